"""
Command-line entry point.

    meanflow-tse gen-data CONFIG OUT_DIR
    meanflow-tse train CONFIG [--resume]
    meanflow-tse train-mr CONFIG
    meanflow-tse eval CONFIG CHECKPOINT [--nfe N] [--lambda oracle|predicted|fixed:V] [--out DIR]
    meanflow-tse nfe-sweep CONFIG CHECKPOINT [--nfe-list 1,2,4,8,16] [--lambda ...] [--out DIR]
    meanflow-tse config-ref

CHECKPOINT may be ``oracle`` for the ground-truth-velocity stub.
Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, config_reference, load_config
from .metrics import evaluate_set
from .mr_predictor import load_mr
from .sampler import ORACLE_STUB, InferenceConfig
from .signal import gen_dataset, load_split, save_split
from .trainer import NonFiniteLossError, train, train_mr
from .velocity_net import load_net

log = logging.getLogger("meanflow_tse")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _split_sizes(cfg):
    return {"train": cfg["data.n_train"], "val": cfg["data.n_val"], "test": cfg["data.n_test"]}


def cmd_gen_data(config_path, out_dir) -> int:
    cfg = load_config(config_path)
    out = Path(out_dir)
    for split, n in _split_sizes(cfg).items():
        ds = gen_dataset(n, (cfg["data.lambda_lo"], cfg["data.lambda_hi"]), cfg["data.duration_s"],
                         cfg.split_seed(split), cfg["data.sample_rate"])
        save_split(ds, out / split)
        print(f"{split}: {n} examples -> {out / split}")
    return EXIT_OK


def _load_data(cfg, split):
    d = cfg.path("data.dir") / split
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"missing split {d}; run gen-data first")
    return load_split(d)


def _load_mr_if_any(cfg, required=False):
    p = cfg.path("run.dir") / "mr.ckpt"
    if p.exists():
        return load_mr(p)[0]
    if required:
        raise FileNotFoundError(f"predicted lambda requires {p}; run train-mr first")
    return None


def cmd_train(config_path, resume=False) -> int:
    cfg = load_config(config_path)
    tcfg = cfg.train_config()
    tr, va = _load_data(cfg, "train"), _load_data(cfg, "val")
    mr = _load_mr_if_any(cfg, required=tcfg.val_lambda == "predicted")
    res = train(tcfg, tr, va, cfg.path("run.dir"), resume=resume, mr=mr)
    print(f"best validation SI-SDR: {res['best_val_si_sdr']:.4f} dB after {res['steps']} steps")
    return EXIT_OK


def cmd_train_mr(config_path) -> int:
    cfg = load_config(config_path)
    tr, va = _load_data(cfg, "train"), _load_data(cfg, "val")
    _, s = train_mr(cfg.mr_train_config(), tr, va, cfg.path("run.dir"))
    print(f"held-out MSE: {s['val_mse']:.6g}  MAE: {s['val_mae']:.6g}  "
          f"constant-0.5 MSE: {s['baseline_mse']:.6g}  monotone_first5: {s['monotone_first5']}")
    return EXIT_OK


def _load_velocity(spec):
    if spec == "oracle":
        return ORACLE_STUB
    p = Path(spec)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return load_net(p)[0]


def _inference_config(cfg, nfe, lam_spec):
    try:
        return InferenceConfig.parse_lambda(
            lam_spec, nfe=nfe, clip=(cfg["infer.clip_lo"], cfg["infer.clip_hi"]),
            window_len=cfg["stft.window_len"], hop=cfg["stft.hop"], n_bands=cfg["features.n_bands"])
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _run_eval(cfg, net, mr, data, nfe, lam_spec, out_dir):
    icfg = _inference_config(cfg, nfe, lam_spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_set(net, mr, data, icfg, out_dir=out_dir / "waveforms")
    report.write_csv(out_dir / "report.csv")
    return report


def _eval_setup(config_path, checkpoint, lam_spec):
    cfg = load_config(config_path)
    _inference_config(cfg, 1, lam_spec)  # validate before loading anything
    net = _load_velocity(checkpoint)
    mr = _load_mr_if_any(cfg, required=lam_spec == "predicted")
    return cfg, net, mr, _load_data(cfg, cfg["eval.split"])


def cmd_eval(config_path, checkpoint, nfe=1, lam_spec="oracle", out=None) -> int:
    cfg, net, mr, data = _eval_setup(config_path, checkpoint, lam_spec)
    out_dir = Path(out) if out else cfg.path("run.dir") / "eval" / f"nfe{nfe}_{lam_spec.replace(':', '')}"
    rep = _run_eval(cfg, net, mr, data, nfe, lam_spec, out_dir)
    print(rep.summary())
    return EXIT_OK


def cmd_nfe_sweep(config_path, checkpoint, nfe_list="1,2,4,8,16", lam_spec="oracle", out=None) -> int:
    try:
        nfes = [int(x) for x in nfe_list.split(",") if x.strip()]
    except ValueError as err:
        raise ConfigError(f"bad --nfe-list {nfe_list!r}") from err
    if not nfes or min(nfes) < 1:
        raise ConfigError("--nfe-list needs positive integers")
    cfg, net, mr, data = _eval_setup(config_path, checkpoint, lam_spec)
    out_dir = Path(out) if out else cfg.path("run.dir") / "nfe_sweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for n in nfes:
        rep = _run_eval(cfg, net, mr, data, n, lam_spec, out_dir / f"nfe{n}")
        rows.append((n, rep.mean_si_sdr, rep.mean_si_sdr_i))
        print(f"nfe={n} mean SI-SDR {rep.mean_si_sdr:.4f} dB")
    with open(out_dir / "nfe_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["nfe", "mean_si_sdr", "mean_si_sdr_i"])
        for n, a, b in rows:
            w.writerow([n, f"{a:.10g}", f"{b:.10g}"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meanflow-tse", description="One-step mean-flow target extraction")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bit-reproducible)")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate train/val/test splits")
    g.add_argument("config")
    g.add_argument("out_dir")

    t = sub.add_parser("train", help="train the velocity network")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true")

    m = sub.add_parser("train-mr", help="train the mixing-ratio predictor")
    m.add_argument("config")

    for name in ("eval", "nfe-sweep"):
        e = sub.add_parser(name)
        e.add_argument("config")
        e.add_argument("checkpoint", help="velocity checkpoint path, or 'oracle'")
        e.add_argument("--lambda", dest="lam", default="oracle", help="oracle | predicted | fixed:<v>")
        e.add_argument("--out", default=None)
        if name == "eval":
            e.add_argument("--nfe", type=int, default=1)
        else:
            e.add_argument("--nfe-list", default="1,2,4,8,16")

    sub.add_parser("config-ref", help="print the configuration key reference")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            if args.cmd == "gen-data":
                return cmd_gen_data(args.config, args.out_dir)
            if args.cmd == "train":
                return cmd_train(args.config, args.resume)
            if args.cmd == "train-mr":
                return cmd_train_mr(args.config)
            if args.cmd == "eval":
                if args.nfe < 1:
                    raise ConfigError("--nfe must be >= 1")
                return cmd_eval(args.config, args.checkpoint, args.nfe, args.lam, args.out)
            if args.cmd == "nfe-sweep":
                return cmd_nfe_sweep(args.config, args.checkpoint, args.nfe_list, args.lam, args.out)
            if args.cmd == "config-ref":
                sys.stdout.write(config_reference())
                return EXIT_OK
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLossError as err:
        print(f"non-finite loss, state dumped to run dir: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
