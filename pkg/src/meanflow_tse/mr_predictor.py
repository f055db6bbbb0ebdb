"""
Mixing-ratio predictor lambda_hat = sigmoid(h([w(y); w(e)])).

w(.) is a fixed spectral-statistics featurizer (band log-energy means/stds,
global level in dB, coarse band energy fractions); h is a small tanh MLP with
a zero-initialised output layer, so an untrained predictor answers 0.5.
Training is independent of the velocity network.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .signal import DEFAULT_HOP, DEFAULT_WINDOW_LEN, Waveform, stft
from .velocity_net import LOG_FLOOR, embed_enrollment

log = logging.getLogger(__name__)

N_RATIO_BANDS = 8


@dataclass(frozen=True)
class MRConfig:
    in_dim: int
    hidden: int = 64
    n_layers: int = 2
    window_len: int = DEFAULT_WINDOW_LEN
    hop: int = DEFAULT_HOP
    n_bands: int | None = None


@dataclass
class MRParams:
    config: MRConfig
    arrays: dict[str, np.ndarray]
    version: int = 0


def mr_features(w: Waveform | np.ndarray, window_len: int = DEFAULT_WINDOW_LEN,
                hop: int = DEFAULT_HOP, n_bands: int | None = None) -> np.ndarray:
    """[band log-energy means; stds; level in dB; coarse band energy fractions]."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    emb = embed_enrollment(x, window_len, hop, n_bands)
    level_db = 10.0 * np.log10(np.mean(x**2) + LOG_FLOOR)
    xx = x if x.size >= window_len else np.pad(x, (0, window_len - x.size))
    p = np.sum(np.abs(stft(xx, window_len, hop).data) ** 2, axis=0)
    band_e = np.array([p[idx].sum() for idx in np.array_split(np.arange(p.size), N_RATIO_BANDS)])
    ratios = band_e / (band_e.sum() + LOG_FLOOR)
    return np.concatenate([emb, [level_db], ratios])


def pair_features(y, e, cfg: MRConfig) -> np.ndarray:
    return np.concatenate([mr_features(y, cfg.window_len, cfg.hop, cfg.n_bands),
                           mr_features(e, cfg.window_len, cfg.hop, cfg.n_bands)])


def init_mr(cfg: MRConfig, rng: np.random.Generator, feat_mean=None, feat_std=None) -> MRParams:
    a = {
        "feat_mean": np.zeros(cfg.in_dim) if feat_mean is None else np.asarray(feat_mean, float),
        "feat_std": np.ones(cfg.in_dim) if feat_std is None else np.asarray(feat_std, float),
    }
    d = cfg.in_dim
    for i in range(cfg.n_layers):
        a[f"w{i}"] = rng.standard_normal((d, cfg.hidden)) / np.sqrt(d)
        a[f"b{i}"] = np.zeros(cfg.hidden)
        d = cfg.hidden
    a["w_out"] = np.zeros((d, 1))
    a["b_out"] = np.zeros(1)
    return MRParams(cfg, a)


TRAINABLE_EXCLUDE = ("feat_mean", "feat_std")


def _forward_feats(params: MRParams, f: np.ndarray):
    """f: (N, in_dim) raw features -> (lambda_hat (N,), cache)."""
    a = params.arrays
    x = (f - a["feat_mean"]) / a["feat_std"]
    hs = [x]
    h = x
    for i in range(params.config.n_layers):
        h = np.tanh(h @ a[f"w{i}"] + a[f"b{i}"])
        hs.append(h)
    logit = (h @ a["w_out"] + a["b_out"])[:, 0]
    lam = 1.0 / (1.0 + np.exp(-logit))
    return lam, (hs, lam)


def _backward_feats(params: MRParams, cache, dlam: np.ndarray) -> dict[str, np.ndarray]:
    a = params.arrays
    hs, lam = cache
    dlogit = (dlam * lam * (1.0 - lam))[:, None]
    g = {"w_out": hs[-1].T @ dlogit, "b_out": dlogit.sum(axis=0)}
    dh = dlogit @ a["w_out"].T
    for i in range(params.config.n_layers - 1, -1, -1):
        h = hs[i + 1]
        da = dh * (1.0 - h * h)
        g[f"w{i}"] = hs[i].T @ da
        g[f"b{i}"] = da.sum(axis=0)
        dh = da @ a[f"w{i}"].T
    return {k: g[k] for k in a if k not in TRAINABLE_EXCLUDE}


def mr_predict(params: MRParams, y, e) -> float:
    f = pair_features(y, e, params.config)
    return float(_forward_feats(params, f[None])[0][0])


def mr_loss(lambda_hat: float, lam: float) -> tuple[float, float]:
    """Squared error and its derivative w.r.t. lambda_hat."""
    d = lambda_hat - lam
    return d * d, 2.0 * d


def mr_batch_loss_and_grads(params: MRParams, feats: np.ndarray, lams: np.ndarray):
    """Mean squared error over a batch and parameter gradients through the logistic."""
    lam_hat, cache = _forward_feats(params, feats)
    d = lam_hat - lams
    loss = float(np.mean(d * d))
    grads = _backward_feats(params, cache, 2.0 * d / d.size)
    return loss, grads, lam_hat


def mr_grad_check(params: MRParams, feats, lams, eps: float = 1e-6) -> float:
    """Max relative error of analytic gradients against central differences (every entry)."""
    _, grads, _ = mr_batch_loss_and_grads(params, feats, lams)
    worst = 0.0
    for name, g in grads.items():
        flat = params.arrays[name].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            fp = mr_batch_loss_and_grads(params, feats, lams)[0]
            flat[j] = old - eps
            fm = mr_batch_loss_and_grads(params, feats, lams)[0]
            flat[j] = old
            num = (fp - fm) / (2 * eps)
            ana = g.reshape(-1)[j]
            scale = max(abs(num), abs(ana))
            if scale > 0:
                worst = max(worst, abs(num - ana) / scale)
    return worst


def save_mr(path, params: MRParams, meta: dict | None = None):
    m = {"config": asdict(params.config), "version": params.version}
    m.update(meta or {})
    checkpoint.save(path, checkpoint.MR_MAGIC, m, params.arrays)


def load_mr(path) -> tuple[MRParams, dict]:
    meta, arrays = checkpoint.load(path, checkpoint.MR_MAGIC)
    return MRParams(MRConfig(**meta["config"]), arrays, int(meta.get("version", 0))), meta
