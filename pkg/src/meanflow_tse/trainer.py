"""
Training loops for the velocity network and the MR predictor.

One optimizer update is one curriculum step k.  Each update first decides,
with probability ``flow_ratio``, whether the whole batch trains on the
flow-matching branch (t == r, target u) or on the mean-flow branch (t < r,
alpha-flow target with a frozen network evaluation at tau).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .flow_core import (AlphaSchedule, adaptive_loss, alpha_at, alpha_target, ground_truth_velocity,
                        sample_time_pair, tau)
from .metrics import evaluate_set
from .mr_predictor import (MRConfig, MRParams, init_mr, mr_batch_loss_and_grads, pair_features,
                           save_mr)
from .sampler import InferenceConfig
from .signal import MixtureExample, stft
from .velocity_net import (NetConfig, NetParams, backward, embed_enrollment, forward, init_params,
                           load_net, save_net)

log = logging.getLogger(__name__)

SEED_PURPOSES = {"data": 1, "init": 2, "time": 3, "mr": 4}
LOG_COLUMNS = ["step", "epoch", "alpha", "lr", "loss", "grad_norm", "branch", "sq_err"]


class NonFiniteLossError(RuntimeError):
    pass


def derive_seed(root: int, purpose: str) -> int:
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, SEED_PURPOSES[purpose]])
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    base_lr: float = 1e-4
    min_lr: float = 1e-5
    warmup_epochs: float = 5.0
    cosine_T_max: float = 50.0
    cosine_restart: bool = True
    weight_decay: float = 0.01
    clip_threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    k_s_epochs: float = 0.0
    k_e_epochs: float | None = None  # None: end of training
    gamma: float = 25.0
    alpha_min: float = 0.005
    mu: float = -0.4
    sigma: float = 1.0
    flow_ratio: float = 0.5
    time_family: str = "logit_normal"
    c: float = 1e-3
    crop_frames: int = 0  # 0: whole spectrogram
    val_every: int = 5
    val_lambda: str = "oracle"
    hidden: int = 128
    n_layers: int = 3
    time_dim: int = 16
    context: int = 0
    window_len: int = 64
    hop: int = 16
    n_bands: int | None = None

    def __post_init__(self):
        for name in ("epochs", "batch_size", "val_every", "hidden", "n_layers", "window_len", "hop"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("base_lr", "min_lr", "cosine_T_max", "clip_threshold", "c", "sigma", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        if self.warmup_epochs < 0 or self.weight_decay < 0 or self.crop_frames < 0:
            raise ValueError("warmup_epochs, weight_decay and crop_frames must be non-negative")
        if not 0.0 <= self.flow_ratio <= 1.0:
            raise ValueError("flow_ratio must be in [0, 1]")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ValueError("alpha_min must be in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")
        if self.val_lambda not in ("oracle", "predicted"):
            raise ValueError("val_lambda must be oracle or predicted")

    def schedule(self, steps_per_epoch: int) -> AlphaSchedule:
        k_e_epochs = self.epochs if self.k_e_epochs is None else self.k_e_epochs
        return AlphaSchedule(int(round(self.k_s_epochs * steps_per_epoch)),
                             int(round(k_e_epochs * steps_per_epoch)), self.gamma, self.alpha_min)

    def net_config(self) -> NetConfig:
        n_bins = self.window_len // 2 + 1
        n_b = n_bins if self.n_bands is None else min(self.n_bands, n_bins)
        return NetConfig(n_bins=n_bins, hidden=self.hidden, n_layers=self.n_layers,
                         time_dim=self.time_dim, emb_dim=2 * n_b, context=self.context,
                         spec_scale=self.window_len / 4.0)


@dataclass
class TrainState:
    k: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val: float = -math.inf
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


# ---------------------------------------------------------------------------
# optimizer pieces
# ---------------------------------------------------------------------------

def lr_at(cfg: TrainConfig, epoch: float) -> float:
    """Linear warmup to base_lr, then cosine towards min_lr with period T_max."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.base_lr * epoch / cfg.warmup_epochs
    e = epoch - cfg.warmup_epochs
    T = cfg.cosine_T_max
    if cfg.cosine_restart:
        # cycle position in (0, T]; the trough at e = n*T belongs to the ending cycle
        x = e - T * (math.ceil(e / T) - 1) if e > 0 else 0.0
    else:
        x = min(e, T)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * x / T))


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, threshold: float) -> tuple[dict, float]:
    """Global-norm clipping.  Returns (grads, pre-clip norm)."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        s = threshold / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def adamw_step(params: dict, grads: dict, m: dict, v: dict, step: int, lr: float,
               weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Decoupled-decay Adam update in place.  ``step`` counts from 1."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for k, g in grads.items():
        p = params[k]
        if k not in m:
            m[k] = np.zeros_like(p)
            v[k] = np.zeros_like(p)
        p *= 1.0 - lr * weight_decay
        m[k] *= beta1
        m[k] += (1.0 - beta1) * g
        v[k] *= beta2
        v[k] += (1.0 - beta2) * g * g
        p -= lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + eps)


# ---------------------------------------------------------------------------
# velocity network training
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    example_id: str
    S: np.ndarray
    B: np.ndarray
    emb: np.ndarray
    lam: float


def prepare(examples, cfg: TrainConfig) -> list[Prepared]:
    return [Prepared(ex.example_id,
                     stft(ex.s, cfg.window_len, cfg.hop).data,
                     stft(ex.b, cfg.window_len, cfg.hop).data,
                     embed_enrollment(ex.e, cfg.window_len, cfg.hop, cfg.n_bands),
                     ex.lam)
            for ex in examples]


def _crop(p: Prepared, n: int, rng):
    F = p.S.shape[0]
    if n == 0 or n >= F:
        return p.S, p.B
    o = int(rng.integers(0, F - n + 1))
    return p.S[o:o + n], p.B[o:o + n]


def train_step(state: TrainState, net: NetParams, batch: list[Prepared], cfg: TrainConfig,
               sched: AlphaSchedule, steps_per_epoch: int) -> dict:
    """One optimizer update; returns the log row."""
    if not batch:
        raise ValueError("empty batch")
    rng = state.rng
    alpha = alpha_at(sched, state.k)
    fm = bool(rng.random() < cfg.flow_ratio)
    Ss, Bs, ts, rs = [], [], [], []
    for p in batch:
        S, B = _crop(p, cfg.crop_frames, rng)
        tp = sample_time_pair(rng, cfg.mu, cfg.sigma, 1.0 if fm else 0.0, cfg.time_family)
        Ss.append(S)
        Bs.append(B)
        ts.append(tp.t)
        rs.append(tp.r)
    S = np.stack(Ss)
    B = np.stack(Bs)
    t = np.array(ts)
    r = np.array(rs)
    emb = np.stack([p.emb for p in batch])

    u = ground_truth_velocity(S, B)
    z_t = t[:, None, None] * S + (1.0 - t[:, None, None]) * B
    if fm:
        target = u
    else:
        tau_ = np.array([tau(ti, ri, alpha) for ti, ri in zip(t, r)])
        z_tau = tau_[:, None, None] * S + (1.0 - tau_[:, None, None]) * B
        v_tau = net.predict(z_tau, tau_, r, emb)  # frozen: no gradient path
        target = alpha_target(u, v_tau, alpha)

    v_pred, cache = forward(net, z_t, t, r, emb)
    n = len(batch)
    upstream = np.empty_like(v_pred)
    losses, errs = [], []
    for i in range(n):
        lo = adaptive_loss(v_pred[i], target[i], alpha, cfg.c)
        upstream[i] = lo.grad_wrt_prediction / n
        losses.append(lo.value)
        errs.append(lo.sq_err)
    loss = math.fsum(losses) / n
    epoch_f = state.k / steps_per_epoch
    lr = lr_at(cfg, epoch_f)
    row = {"step": state.k, "epoch": epoch_f, "alpha": alpha, "lr": lr, "loss": loss,
           "grad_norm": float("nan"), "branch": "fm" if fm else "mf",
           "sq_err": math.fsum(errs) / n}
    if not math.isfinite(loss):
        raise NonFiniteLossError(json.dumps({**row, "examples": [p.example_id for p in batch],
                                             "t": ts, "r": rs}))

    grads = backward(net, cache, upstream)
    grads, norm = clip_gradients(grads, cfg.clip_threshold)
    row["grad_norm"] = norm
    adamw_step(net.arrays, grads, state.m, state.v, state.k + 1, lr, cfg.weight_decay,
               cfg.beta1, cfg.beta2, cfg.adam_eps)
    net.version += 1
    state.k += 1
    return row


def validate_and_select(state: TrainState, net: NetParams, val_prepared: list[Prepared],
                        val_examples: list[MixtureExample], cfg: TrainConfig, best_path,
                        mr: MRParams | None = None) -> tuple[bool, float]:
    """Score nfe=1 extraction; persist the network at ``best_path`` when the mean SI-SDR improves."""
    if not val_examples:
        raise ValueError("empty validation set")
    icfg = InferenceConfig(nfe=1, lambda_source=cfg.val_lambda, window_len=cfg.window_len,
                           hop=cfg.hop, n_bands=cfg.n_bands)
    embs = {p.example_id: p.emb for p in val_prepared}
    score = evaluate_set(net, mr, val_examples, icfg, embeddings=embs).mean_si_sdr
    if math.isfinite(score) and score > state.best_val:
        save_net(best_path, net, {"val_si_sdr": score, "k": state.k, "epoch": state.epoch})
        state.best_val = score
        return True, score
    return False, score


def save_state(path, state: TrainState, extra: dict | None = None):
    arrays = {f"m/{k}": v for k, v in state.m.items()}
    arrays.update({f"v/{k}": v for k, v in state.v.items()})
    meta = {"k": state.k, "epoch": state.epoch,
            "best_val": state.best_val if math.isfinite(state.best_val) else None,
            "rng": state.rng.bit_generator.state}
    meta.update(extra or {})
    checkpoint.save(path, checkpoint.STATE_MAGIC, meta, arrays)


def load_state(path) -> TrainState:
    meta, arrays = checkpoint.load(path, checkpoint.STATE_MAGIC)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    st = TrainState(k=int(meta["k"]), epoch=int(meta["epoch"]),
                    best_val=-math.inf if meta["best_val"] is None else float(meta["best_val"]),
                    rng=rng)
    for name, a in arrays.items():
        kind, key = name.split("/", 1)
        (st.m if kind == "m" else st.v)[key] = a
    return st


def train(cfg: TrainConfig, train_examples, val_examples, run_dir, resume: bool = False,
          mr: MRParams | None = None, progress=None) -> dict:
    """Full loop.  Writes train_log.csv, best.ckpt, last.ckpt and state.ckpt under ``run_dir``."""
    run = Path(run_dir)
    run.mkdir(parents=True, exist_ok=True)
    train_p = prepare(train_examples, cfg)
    val_p = prepare(val_examples, cfg)
    steps_per_epoch = math.ceil(len(train_p) / cfg.batch_size)
    sched = cfg.schedule(steps_per_epoch)
    log_path = run / "train_log.csv"

    if resume and (run / "state.ckpt").exists():
        net, _ = load_net(run / "last.ckpt")
        state = load_state(run / "state.ckpt")
        log.info("resuming at step %d (epoch %d)", state.k, state.epoch)
    else:
        net = init_params(cfg.net_config(), np.random.default_rng(derive_seed(cfg.seed, "init")))
        state = TrainState(rng=np.random.default_rng(derive_seed(cfg.seed, "time")))
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)

    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while state.epoch < cfg.epochs:
            order = state.rng.permutation(len(train_p))
            for s in range(0, len(order), cfg.batch_size):
                batch = [train_p[i] for i in order[s:s + cfg.batch_size]]
                try:
                    row = train_step(state, net, batch, cfg, sched, steps_per_epoch)
                except NonFiniteLossError as err:
                    (run / "nonfinite_dump.json").write_text(str(err))
                    save_state(run / "nonfinite_state.ckpt", state)
                    raise
                writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            state.epoch += 1
            fh.flush()
            if state.epoch % cfg.val_every == 0 or state.epoch == cfg.epochs:
                improved, score = validate_and_select(state, net, val_p, val_examples, cfg,
                                                      run / "best.ckpt", mr)
                log.info("epoch %d step %d val SI-SDR %.3f dB%s", state.epoch, state.k, score,
                         " (best)" if improved else "")
                if progress:
                    progress(state.epoch, score)
            save_net(run / "last.ckpt", net, {"k": state.k, "epoch": state.epoch})
            save_state(run / "state.ckpt", state)
    return {"best_val_si_sdr": state.best_val, "steps": state.k, "epochs": state.epoch}


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


# ---------------------------------------------------------------------------
# MR predictor training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MRTrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-4
    hidden: int = 64
    n_layers: int = 2
    seed: int = 0
    window_len: int = 64
    hop: int = 16
    n_bands: int | None = None

    def __post_init__(self):
        for name in ("epochs", "batch_size", "hidden", "n_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"mr {name} must be positive")
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("mr lr must be positive and weight_decay non-negative")


def mr_feature_matrix(examples, cfg: MRConfig) -> tuple[np.ndarray, np.ndarray]:
    f = np.stack([pair_features(ex.y, ex.e, cfg) for ex in examples])
    lam = np.array([ex.lam for ex in examples])
    return f, lam


def train_mr(cfg: MRTrainConfig, train_examples, val_examples, run_dir=None) -> tuple[MRParams, dict]:
    """Fit the MR predictor by minibatch MSE; keeps the parameters with the lowest held-out MSE."""
    probe = MRConfig(in_dim=1, hidden=cfg.hidden, n_layers=cfg.n_layers, window_len=cfg.window_len,
                     hop=cfg.hop, n_bands=cfg.n_bands)
    ftr, ltr = mr_feature_matrix(train_examples, probe)
    fva, lva = mr_feature_matrix(val_examples, probe)
    mcfg = MRConfig(in_dim=ftr.shape[1], hidden=cfg.hidden, n_layers=cfg.n_layers,
                    window_len=cfg.window_len, hop=cfg.hop, n_bands=cfg.n_bands)
    std = ftr.std(axis=0)
    params = init_mr(mcfg, np.random.default_rng(derive_seed(cfg.seed, "mr")),
                     ftr.mean(axis=0), np.where(std > 1e-8, std, 1.0))
    rng = np.random.default_rng(derive_seed(cfg.seed, "mr") + 1)

    def val_metrics(p):
        _, _, lh = mr_batch_loss_and_grads(p, fva, lva)
        return float(np.mean((lh - lva) ** 2)), float(np.mean(np.abs(lh - lva)))

    baseline_mse = float(np.mean((0.5 - lva) ** 2))
    history = [val_metrics(params)]
    best = (history[0][0], {k: v.copy() for k, v in params.arrays.items()})
    m, v, step = {}, {}, 0
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(ltr))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads, _ = mr_batch_loss_and_grads(params, ftr[idx], ltr[idx])
            step += 1
            adamw_step(params.arrays, grads, m, v, step, cfg.lr, cfg.weight_decay)
            params.version += 1
            losses.append(loss)
        vm = val_metrics(params)
        history.append(vm)
        rows.append((epoch, float(np.mean(losses)), vm[0], vm[1]))
        if vm[0] < best[0]:
            best = (vm[0], {k: a.copy() for k, a in params.arrays.items()})
    params.arrays = best[1]
    first = [h[0] for h in history[:6]]
    monotone = all(b < a for a, b in zip(first[:-1], first[1:]))
    if not monotone:
        log.warning("MR held-out MSE did not decrease monotonically over the first 5 epochs: %s", first)
    final_mse, final_mae = val_metrics(params)
    summary = {"val_mse": final_mse, "val_mae": final_mae, "baseline_mse": baseline_mse,
               "untrained_mse": history[0][0], "monotone_first5": monotone}
    if run_dir is not None:
        run = Path(run_dir)
        run.mkdir(parents=True, exist_ok=True)
        with open(run / "mr_log.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse", "val_mae"])
            for r in rows:
                w.writerow([r[0]] + [repr(x) for x in r[1:]])
        save_mr(run / "mr.ckpt", params, summary)
    return params, summary
