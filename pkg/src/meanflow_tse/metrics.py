"""SI-SDR and evaluation-set reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .signal import Waveform

SI_SDR_CAP = 100.0


def _samples(w):
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB (zero-mean, projection onto the reference), capped at +100."""
    e, r = _samples(est), _samples(ref)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {r.shape}")
    e = e - e.mean()
    r = r - r.mean()
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise ValueError("reference is identically zero")
    target = (float(np.dot(e, r)) / rr) * r
    num = float(np.dot(target, target))
    res = e - target
    den = float(np.dot(res, res))
    if den <= num * 10.0 ** (-SI_SDR_CAP / 10.0):
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return min(SI_SDR_CAP, 10.0 * math.log10(num / den))


def si_sdr_improvement(est, mix, ref) -> float:
    return si_sdr(est, ref) - si_sdr(mix, ref)


@dataclass
class EvalRecord:
    example_id: str
    lam: float
    lam_hat: float
    nfe: int
    si_sdr_est: float
    si_sdr_mix: float
    error: str = ""

    @property
    def si_sdr_i(self) -> float:
        return self.si_sdr_est - self.si_sdr_mix

    @property
    def lam_err(self) -> float:
        return abs(self.lam_hat - self.lam)


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)

    def _ok(self):
        return sorted((r for r in self.records if not r.error), key=lambda r: r.example_id)

    def _mean(self, attr):
        vals = [getattr(r, attr) for r in self._ok()]
        return math.fsum(vals) / len(vals) if vals else float("nan")

    def _median(self, attr):
        vals = [getattr(r, attr) for r in self._ok()]
        return float(np.median(vals)) if vals else float("nan")

    @property
    def mean_si_sdr(self):
        return self._mean("si_sdr_est")

    @property
    def mean_si_sdr_mix(self):
        return self._mean("si_sdr_mix")

    @property
    def mean_si_sdr_i(self):
        return self._mean("si_sdr_i")

    @property
    def median_si_sdr(self):
        return self._median("si_sdr_est")

    @property
    def mean_abs_lambda_error(self):
        return self._mean("lam_err")

    def summary(self) -> str:
        n_err = sum(1 for r in self.records if r.error)
        return (f"n={len(self.records)} failed={n_err} mean_si_sdr={self.mean_si_sdr:.4f} "
                f"median_si_sdr={self.median_si_sdr:.4f} mean_si_sdr_mix={self.mean_si_sdr_mix:.4f} "
                f"mean_si_sdr_i={self.mean_si_sdr_i:.4f} mean_abs_lambda_err={self.mean_abs_lambda_error:.6f}")

    def write_csv(self, path):
        path = Path(path)
        cols = [f.name for f in fields(EvalRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + ["si_sdr_i"])
            for r in sorted(self.records, key=lambda r: r.example_id):
                w.writerow([getattr(r, c) if not isinstance(getattr(r, c), float) else f"{getattr(r, c):.10g}"
                            for c in cols] + [f"{r.si_sdr_i:.10g}"])
            fh.write(f"# {self.summary()}\n")


def evaluate_set(net, mr, dataset, cfg, embeddings=None, out_dir=None) -> EvalReport:
    """Extract every example and score it; a failing example is recorded, not raised.

    ``embeddings`` optionally maps example_id to a precomputed enrollment embedding.
    With ``out_dir`` the estimates are written as little-endian float32 files.
    """
    from .sampler import extract_waveform

    if not dataset:
        raise ValueError("empty evaluation set")
    report = EvalReport()
    for ex in sorted(dataset, key=lambda e: e.example_id):
        try:
            emb = embeddings.get(ex.example_id) if embeddings else None
            est, lam_hat = extract_waveform(net, mr, ex, cfg, emb=emb)
            rec = EvalRecord(ex.example_id, ex.lam, lam_hat, cfg.nfe,
                             si_sdr(est, ex.s), si_sdr(ex.y, ex.s))
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / f"{ex.example_id}_est.f32").write_bytes(
                    est.samples.astype("<f4").tobytes())
        except (ValueError, FloatingPointError, ArithmeticError) as err:
            rec = EvalRecord(ex.example_id, ex.lam, float("nan"), cfg.nfe,
                             float("nan"), float("nan"), error=repr(err))
        report.records.append(rec)
    return report
