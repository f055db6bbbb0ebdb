"""
Conditional average-velocity network v(z_t, t, r, e).

A per-frame MLP shared across frames.  Each frame sees its real and imaginary
bins (optionally with +-context neighbours), sinusoidal embeddings of t and r,
and a fixed enrollment embedding.  The output head is zero-initialised, so a
fresh network predicts the zero field.  Gradients are derived by hand; there
is no autodiff anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import checkpoint
from .signal import DEFAULT_HOP, DEFAULT_WINDOW_LEN, Waveform, stft

LOG_FLOOR = 1e-8


class StaleCacheError(RuntimeError):
    """backward() was handed a cache from before the last parameter update."""


@dataclass(frozen=True)
class NetConfig:
    n_bins: int = 33
    hidden: int = 128
    n_layers: int = 3
    time_dim: int = 16
    emb_dim: int = 66
    context: int = 0
    spec_scale: float = 16.0

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def frame_dim(self) -> int:
        return 2 * self.n_bins * (1 + 2 * self.context)

    @property
    def cond_dim(self) -> int:
        return 2 * self.time_dim + self.emb_dim


@dataclass
class NetParams:
    config: NetConfig
    arrays: dict[str, np.ndarray]
    version: int = 0

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def predict(self, z, t, r, emb):
        return forward(self, z, t, r, emb)[0]


def param_names(cfg: NetConfig) -> list[str]:
    names = ["w_in_z", "w_in_c", "b_in"]
    for i in range(1, cfg.n_layers):
        names += [f"w_h{i}", f"b_h{i}"]
    return names + ["w_out", "b_out", "gain"]


def init_params(cfg: NetConfig, rng: np.random.Generator) -> NetParams:
    """Fan-in scaled Gaussian hidden layers; zero output head; unit output gain."""
    H = cfg.hidden
    fan_in = cfg.frame_dim + cfg.cond_dim
    a = {
        "w_in_z": rng.standard_normal((cfg.frame_dim, H)) / np.sqrt(fan_in),
        "w_in_c": rng.standard_normal((cfg.cond_dim, H)) / np.sqrt(fan_in),
        "b_in": np.zeros(H),
    }
    for i in range(1, cfg.n_layers):
        a[f"w_h{i}"] = rng.standard_normal((H, H)) / np.sqrt(H)
        a[f"b_h{i}"] = np.zeros(H)
    a["w_out"] = np.zeros((H, 2 * cfg.n_bins))
    a["b_out"] = np.zeros(2 * cfg.n_bins)
    a["gain"] = np.ones(1)
    return NetParams(cfg, a)


def embed_time(x: float, dim: int) -> np.ndarray:
    """[sin(x w_k), cos(x w_k)] with w_k geometric from 1 to 1000."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"dim must be positive and even, got {dim}")
    half = dim // 2
    freqs = np.geomspace(1.0, 1000.0, half) if half > 1 else np.ones(1)
    ang = np.asarray(x, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def band_edges(n_bins: int, n_bands: int | None) -> list[np.ndarray]:
    if n_bands is None or n_bands >= n_bins:
        return [np.array([k]) for k in range(n_bins)]
    return np.array_split(np.arange(n_bins), n_bands)


def band_log_energy(w: Waveform | np.ndarray, window_len: int = DEFAULT_WINDOW_LEN,
                    hop: int = DEFAULT_HOP, n_bands: int | None = None) -> np.ndarray:
    """frames x bands matrix of log10 band energies."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty waveform")
    if x.size < window_len:
        x = np.pad(x, (0, window_len - x.size))
    p = np.abs(stft(x, window_len, hop).data) ** 2
    bands = band_edges(p.shape[1], n_bands)
    e = np.stack([p[:, idx].mean(axis=1) for idx in bands], axis=1)
    return np.log10(e + LOG_FLOOR)


def embed_enrollment(e: Waveform | np.ndarray, window_len: int = DEFAULT_WINDOW_LEN,
                     hop: int = DEFAULT_HOP, n_bands: int | None = None) -> np.ndarray:
    """Per-band means then standard deviations of log energy over frames."""
    le = band_log_energy(e, window_len, hop, n_bands)
    return np.concatenate([le.mean(axis=0), le.std(axis=0)])


@dataclass
class ForwardCache:
    version: int
    squeeze: bool
    shape: tuple
    x: np.ndarray  # (B, F, frame_dim)
    cond: np.ndarray  # (B, cond_dim)
    hs: list = field(default_factory=list)  # post-activation hidden states
    o: np.ndarray | None = None  # pre-gain head output


def _frame_features(z: np.ndarray, cfg: NetConfig) -> np.ndarray:
    x = np.concatenate([z.real, z.imag], axis=-1) / cfg.spec_scale
    if cfg.context == 0:
        return x
    c = cfg.context
    xp = np.pad(x, ((0, 0), (c, c), (0, 0)))
    F = x.shape[1]
    return np.concatenate([xp[:, j:j + F] for j in range(2 * c + 1)], axis=-1)


def _cond(t, r, emb, B: int, cfg: NetConfig) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (B,))
    emb = np.broadcast_to(np.asarray(emb, dtype=np.float64), (B, cfg.emb_dim))
    return np.concatenate([embed_time(t, cfg.time_dim), embed_time(r, cfg.time_dim), emb], axis=1)


def forward(params: NetParams, z, t, r, emb):
    """Return (velocity, cache).  ``z`` is (frames, bins) or (batch, frames, bins) complex."""
    cfg, a = params.config, params.arrays
    z = np.asarray(getattr(z, "data", z))
    squeeze = z.ndim == 2
    if squeeze:
        z = z[None]
    if z.ndim != 3 or z.shape[-1] != cfg.n_bins:
        raise ValueError(f"expected (..., frames, {cfg.n_bins}) input, got {z.shape}")
    B, F, K = z.shape
    x = _frame_features(z, cfg)
    cond = _cond(t, r, emb, B, cfg)

    pre = x @ a["w_in_z"] + (cond @ a["w_in_c"] + a["b_in"])[:, None, :]
    h = np.tanh(pre)
    hs = [h]
    for i in range(1, cfg.n_layers):
        h = np.tanh(h @ a[f"w_h{i}"] + a[f"b_h{i}"])
        hs.append(h)
    o = h @ a["w_out"] + a["b_out"]
    out = (a["gain"][0] * cfg.spec_scale) * o
    v = out[..., :K] + 1j * out[..., K:]
    cache = ForwardCache(params.version, squeeze, (B, F, K), x, cond, hs, o)
    return (v[0] if squeeze else v), cache


def backward(params: NetParams, cache: ForwardCache, upstream) -> dict[str, np.ndarray]:
    """Gradients of <upstream, forward(...)> w.r.t. every parameter.

    ``upstream`` is complex: its real part pairs with the real output plane and
    its imaginary part with the imaginary plane.
    """
    if cache.version != params.version:
        raise StaleCacheError(
            f"cache from parameter version {cache.version}, parameters at {params.version}"
        )
    cfg, a = params.config, params.arrays
    g = np.asarray(getattr(upstream, "data", upstream))
    if cache.squeeze:
        g = g[None]
    if g.shape != cache.shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {cache.shape}")
    go = np.concatenate([g.real, g.imag], axis=-1) * cfg.spec_scale

    grads = {}
    grads["gain"] = np.array([np.sum(go * cache.o)])
    do = go * a["gain"][0]
    h = cache.hs[-1]
    grads["w_out"] = np.einsum("bfh,bfo->ho", h, do, optimize=True)
    grads["b_out"] = do.sum(axis=(0, 1))
    dh = do @ a["w_out"].T
    for i in range(cfg.n_layers - 1, 0, -1):
        h = cache.hs[i]
        da = dh * (1.0 - h * h)
        prev = cache.hs[i - 1]
        grads[f"w_h{i}"] = np.einsum("bfh,bfo->ho", prev, da, optimize=True)
        grads[f"b_h{i}"] = da.sum(axis=(0, 1))
        dh = da @ a[f"w_h{i}"].T
    h = cache.hs[0]
    da = dh * (1.0 - h * h)
    grads["w_in_z"] = np.einsum("bfi,bfh->ih", cache.x, da, optimize=True)
    da_sum = da.sum(axis=1)
    grads["w_in_c"] = cache.cond.T @ da_sum
    grads["b_in"] = da_sum.sum(axis=0)
    return {k: grads[k] for k in a}


def grad_check(params: NetParams, sample, emb, eps: float = 1e-5, seed: int = 0,
               fraction: float = 0.05, c: float = 1e-3) -> float:
    """Max relative error of backward() against central differences.

    The objective is sg(w) * ||v(z_t, t, r, e) - u||^2 with w frozen at the
    unperturbed parameters; a random ``fraction`` of each parameter array is
    probed.  Entries where both gradients vanish count as zero error.
    """
    from .flow_core import adaptive_loss, sq_norm

    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must be in [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    z, u = np.asarray(getattr(sample.z_t, "data", sample.z_t)), np.asarray(getattr(sample.u, "data", sample.u))
    t, r = sample.times.t, sample.times.r

    v, cache = forward(params, z, t, r, emb)
    lo = adaptive_loss(v, u, sample.alpha, c)
    w = lo.weight
    analytic = backward(params, cache, lo.grad_wrt_prediction)

    def objective(p):
        return w * sq_norm(forward(p, z, t, r, emb)[0] - u)

    worst = 0.0
    probe = params.copy()
    for name, arr in probe.arrays.items():
        flat = arr.reshape(-1)
        k = max(1, int(np.ceil(fraction * flat.size)))
        for j in rng.choice(flat.size, size=k, replace=False):
            old = flat[j]
            flat[j] = old + eps
            fp = objective(probe)
            flat[j] = old - eps
            fm = objective(probe)
            flat[j] = old
            num = (fp - fm) / (2 * eps)
            ana = analytic[name].reshape(-1)[j]
            scale = max(abs(num), abs(ana))
            if scale > 0:
                worst = max(worst, abs(num - ana) / scale)
    return worst


def save_net(path, params: NetParams, meta: dict | None = None):
    m = {"config": asdict(params.config), "version": params.version}
    m.update(meta or {})
    checkpoint.save(path, checkpoint.VELOCITY_MAGIC, m, params.arrays)


def load_net(path) -> tuple[NetParams, dict]:
    meta, arrays = checkpoint.load(path, checkpoint.VELOCITY_MAGIC)
    cfg = NetConfig(**meta["config"])
    expected = param_names(cfg)
    if list(arrays) != expected:
        raise checkpoint.CheckpointError(f"parameter layout mismatch: {list(arrays)}")
    return NetParams(cfg, arrays, int(meta.get("version", 0))), meta
