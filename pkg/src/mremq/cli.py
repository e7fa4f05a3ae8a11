"""Command-line driver.

    mremq gen-data --run-dir runs/a
    mremq train-fp --run-dir runs/a
    mremq quantize --run-dir runs/a --method mrem-p --bits 2,2,8 --modules 4
    mremq eval --run-dir runs/a --ckpt runs/a/ckpt/mrem-p.mrmq
    mremq report-error-propagation --run-dir runs/a --q runs/a/ckpt/mrem-p.mrmq
    mremq simulate-speedup --modules 4 --steps 2000 --t0 4 --micro-batches 4
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, load_model, save_model
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, gen_synthetic_task, sample_calibration
from .evaluate import accuracy, layer_errors, logit_mse
from .metrics import MetricsWriter
from .optim import TrainingError

log = logging.getLogger("mremq")

COMMANDS = ("gen-data", "train-fp", "quantize", "eval", "report-error-propagation", "simulate-speedup")

# flag -> config key
FLAGS = {
    "--seed": "seed", "--method": "method", "--mode": "mode", "--bits": "bits", "--modules": "modules",
    "--steps": "steps", "--lr": "lr", "--batch-size": "batch_size", "--t0": "t0",
    "--tf-fraction": "tf_fraction", "--calib-size": "calib_size", "--rem-steps": "rem_steps",
    "--qat-steps": "qat_steps", "--fp-steps": "fp_steps", "--micro-batches": "micro_batches",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mremq", description=__doc__.strip().splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--run-dir", default="run", help="output directory (default: ./run)")
    p.add_argument("--fp", help="full-precision checkpoint (default: <run-dir>/ckpt/fp.mrmq)")
    p.add_argument("--ckpt", help="checkpoint to evaluate")
    p.add_argument("--q", help="quantized checkpoint for the error report")
    p.add_argument("--no-teacher-forcing", action="store_true")
    p.add_argument("--pcq", action="store_true", help="per-channel weight quantization")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    for flag, key in FLAGS.items():
        p.add_argument(flag, dest=key, default=None, metavar=key.upper())
    return p


def effective_config(args) -> RunConfig:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v
    for key in FLAGS.values():
        v = getattr(args, key)
        if v is not None:
            over[key] = v
    if args.no_teacher_forcing:
        over["teacher_forcing"] = False
    if args.pcq:
        over["pcq"] = True
    return load_config(args.config, over)


# ---------------------------------------------------------------- helpers


def data_path(run: Path) -> Path:
    return run / "data.npz"


def get_data(cfg: RunConfig, run: Path) -> Dataset:
    p = data_path(run)
    if p.is_file():
        z = np.load(p)
        return Dataset(z["train_tokens"], z["train_labels"], z["held_tokens"], z["held_labels"], int(z["vocab"]))
    return gen_synthetic_task(cfg.vocab, cfg.max_seq_len, cfg.num_train, cfg.num_held, cfg.seed)


def fp_path(args, run: Path) -> Path:
    return Path(args.fp) if args.fp else run / "ckpt" / "fp.mrmq"


def load_ckpt(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_model(path)


def write_error_csv(path: Path, errs: List[float]) -> None:
    lines = ["layer,mse"] + [f"{l},{e!r}" for l, e in enumerate(errs)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------- commands


def cmd_gen_data(cfg, args, run):
    ds = gen_synthetic_task(cfg.vocab, cfg.max_seq_len, cfg.num_train, cfg.num_held, cfg.seed)
    np.savez(data_path(run), train_tokens=ds.train_tokens, train_labels=ds.train_labels,
             held_tokens=ds.held_tokens, held_labels=ds.held_labels, vocab=ds.vocab)
    print(f"wrote {data_path(run)}: {ds.num_train} train, {len(ds.held_tokens)} held-out")


def cmd_train_fp(cfg, args, run):
    from .train import train_fp

    ds = get_data(cfg, run)
    with MetricsWriter(run / "metrics.csv") as mw:
        fp = train_fp(cfg.model_config(), ds, cfg.fp_steps, cfg.fp_lr, cfg.fp_batch_size, cfg.seed, emit=mw)
    out = fp_path(args, run)
    save_model(out, fp)
    print(f"held-out accuracy {accuracy(fp, ds.held_tokens, ds.held_labels):.4f}; saved {out}")


def cmd_quantize(cfg, args, run):
    from .parallel import train_mrem_p
    from .train import train_mrem_s, train_qat, train_rem

    ds = get_data(cfg, run)
    fp = load_ckpt(fp_path(args, run))
    calib = sample_calibration(ds, cfg.calib_size, cfg.seed)
    tc = cfg.train_config()
    with MetricsWriter(run / "metrics.csv") as mw:
        if cfg.method == "rem":
            q = train_rem(fp, calib.tokens, tc, emit=mw)
        elif cfg.method == "mrem-s":
            q = train_mrem_s(fp, calib.tokens, tc, emit=mw)
        elif cfg.method == "mrem-p":
            q = train_mrem_p(fp, calib.tokens, tc, mode=cfg.mode, emit=mw).model
        else:
            q = train_qat(fp, ds.train_tokens, tc, emit=mw)
    out = run / "ckpt" / f"{cfg.method}.mrmq"
    save_model(out, q)
    write_error_csv(run / "error_propagation.csv", layer_errors(fp, q, calib.tokens)[:-1])
    print(f"{cfg.method} bits={tc.bits}: held-out accuracy {accuracy(q, ds.held_tokens, ds.held_labels):.4f}, "
          f"logit mse {logit_mse(fp, q, ds.held_tokens):.6g}; saved {out}")


def cmd_eval(cfg, args, run):
    ds = get_data(cfg, run)
    path = Path(args.ckpt) if args.ckpt else fp_path(args, run)
    model = load_ckpt(path)
    ref = load_ckpt(fp_path(args, run)) if fp_path(args, run).is_file() else model
    print(f"{path}: held-out accuracy {accuracy(model, ds.held_tokens, ds.held_labels):.4f}, "
          f"logit mse vs fp {logit_mse(ref, model, ds.held_tokens):.6g}")


def cmd_report(cfg, args, run):
    if not args.q:
        raise ConfigError("report-error-propagation needs --q <quantized checkpoint>")
    ds = get_data(cfg, run)
    fp = load_ckpt(fp_path(args, run))
    q = load_ckpt(Path(args.q))
    if fp.cfg != q.cfg:
        raise ConfigError("checkpoints have different model configs")
    calib = sample_calibration(ds, cfg.calib_size, cfg.seed)
    errs = layer_errors(fp, q, calib.tokens)[:-1]
    write_error_csv(run / "error_propagation.csv", errs)
    for l, e in enumerate(errs):
        print(f"layer {l}: {e:.6g}")


def cmd_speedup(cfg, args, run):
    from .parallel import simulate_speedup

    rep = simulate_speedup(cfg.modules, cfg.steps, cfg.t0, cfg.micro_batches)
    (run / "speedup.csv").write_text(rep.csv(), encoding="utf-8")
    print(rep.table())


HANDLERS = {
    "gen-data": cmd_gen_data, "train-fp": cmd_train_fp, "quantize": cmd_quantize, "eval": cmd_eval,
    "report-error-propagation": cmd_report, "simulate-speedup": cmd_speedup,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = effective_config(args)
        rd = Path(args.run_dir)
        rd.mkdir(parents=True, exist_ok=True)
        (rd / "config.echo").write_text(cfg.echo(), encoding="utf-8")
        HANDLERS[args.command](cfg, args, rd)
    except ConfigError as e:
        print(f"mremq: usage error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, OSError) as e:
        print(f"mremq: file error: {e}", file=sys.stderr)
        return 3
    except TrainingError as e:
        print(f"mremq: training failed: {e}", file=sys.stderr)
        return 4
    except (ValueError, IndexError, RuntimeError) as e:
        print(f"mremq: error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
