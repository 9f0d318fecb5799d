"""``eqrecon`` command-line entry point.

Exit codes: 0 success, 1 config/args, 2 unknown command, 3 I/O,
4 numerical abort, 5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataset as ds_mod
from .config import ConfigError, RunConfig
from .evaluate import eval_classification, eval_equivariance
from .gradcore import ContractError, no_grad
from .gradcore.gradcheck import run_suite
from .modelcheck import MODEL_CASES
from .train import CheckpointError, NumericalError, Trainer, load_checkpoint, model_from_checkpoint
from .views import make_view_pair

log = logging.getLogger("eqrecon")

EXIT_OK, EXIT_CONFIG, EXIT_COMMAND, EXIT_IO, EXIT_NUMERICAL, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5
COMMANDS = ("gen-data", "pretrain", "eval", "gradcheck", "reconstruct")


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="eqrecon", description="Equivariant reconstruction pretraining and evaluation.")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a mini-IEBench EQDS file")
    g.add_argument("--config")
    g.add_argument("--out", required=True)

    t = sub.add_parser("pretrain", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out-dir")
    t.add_argument("--ablation", choices=("vicreg-only", "recon-only"))
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a frozen encoder")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--mode", choices=("equivariance", "classification"), default="equivariance")
    e.add_argument("--out", help="CSV path (default: next to the checkpoint)")

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--tol", type=float, default=1e-3)

    r = sub.add_parser("reconstruct", help="dump (v1, v2, reconstruction) triplets as PPM")
    r.add_argument("--config")
    r.add_argument("--checkpoint")
    r.add_argument("--data")
    r.add_argument("--out-dir")
    r.add_argument("--n", type=int, default=4)
    return p


def _split_overrides(rest: Sequence[str]) -> dict[str, str]:
    out = {}
    for arg in rest:
        if not arg.startswith("--") or "=" not in arg:
            raise UsageError(f"unrecognized argument {arg!r}")
        key, _, value = arg[2:].partition("=")
        out[key] = value
    return out


def _load_config(args, overrides: dict[str, str]) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.update(overrides)
    for flag, key in (("data", "paths.data"), ("out_dir", "paths.out_dir"), ("checkpoint", "paths.checkpoint")):
        val = getattr(args, flag, None)
        if val:
            cfg.update({key: val})
    return cfg


def _require(cfg: RunConfig, key: str, flag: str) -> Path:
    if not cfg[key]:
        raise UsageError(f"{flag} is required (or set {key} in the config)")
    return Path(cfg[key])


def _load_dataset(path: Path) -> ds_mod.Dataset:
    try:
        return ds_mod.load(path)
    except OSError as exc:
        raise IOFailure(f"cannot read dataset {path}: {exc}") from None
    except ds_mod.FormatError as exc:
        raise IOFailure(f"bad dataset {path}: {exc}") from None


def _load_model(path: Path):
    try:
        return model_from_checkpoint(load_checkpoint(path))
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from None
    except CheckpointError as exc:
        raise IOFailure(f"bad checkpoint {path}: {exc}") from None


def _check_size(model, data: ds_mod.Dataset) -> None:
    size = model.cfg.encoder.image_size
    if (data.height, data.width) != (size, size):
        raise ContractError(f"model expects {size}x{size} images, dataset has {data.height}x{data.width}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------
def cmd_gen_data(args, cfg: RunConfig) -> int:
    data = ds_mod.generate_mini_iebench(cfg.data_config())
    try:
        ds_mod.save(data, args.out)
    except OSError as exc:
        raise IOFailure(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(data)} images to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    if args.ablation == "vicreg-only":
        cfg.update({"loss.lambda_recon": 0.0})
    elif args.ablation == "recon-only":
        cfg.update({"loss.lambda_ssl": 0.0})
    train_cfg = cfg.train_config()
    model_cfg = cfg.model_config()
    data = _load_dataset(_require(cfg, "paths.data", "--data"))
    out_dir = _require(cfg, "paths.out_dir", "--out-dir")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(cfg.dump())
    except OSError as exc:
        raise IOFailure(f"cannot write to {out_dir}: {exc}") from None
    if args.resume:
        try:
            trainer = Trainer.resume(args.resume, train_cfg, out_dir)
        except OSError as exc:
            raise IOFailure(f"cannot read checkpoint {args.resume}: {exc}") from None
        except CheckpointError as exc:
            raise IOFailure(f"bad checkpoint {args.resume}: {exc}") from None
    else:
        from .model import EquivariantReconstructionModel

        trainer = Trainer(EquivariantReconstructionModel(model_cfg), train_cfg, out_dir)
    _check_size(trainer.model, data)
    log.info("model has %d parameters", trainer.model.num_parameters())
    try:
        trainer.fit(data)
    except OSError as exc:
        raise IOFailure(f"write failed in {out_dir}: {exc}") from None
    print(f"trained to epoch {trainer.next_epoch - 1}; outputs in {out_dir}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ck_path = _require(cfg, "paths.checkpoint", "--checkpoint")
    data = _load_dataset(_require(cfg, "paths.data", "--data"))
    model = _load_model(ck_path)
    _check_size(model, data)
    seed = cfg["eval.seed"]
    if args.mode == "equivariance":
        report = eval_equivariance(model, data, cfg.view_spec("eval.families"), cfg.probe_config(), seed)
    else:
        report = eval_classification(model, data, seed, cfg.probe_config())
    out = Path(args.out) if args.out else ck_path.with_name(f"eval_{args.mode}.csv")
    try:
        out.write_text(report.to_csv())
    except OSError as exc:
        raise IOFailure(f"cannot write {out}: {exc}") from None
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = run_suite(tol=args.tol) + run_suite(MODEL_CASES, tol=args.tol)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  worst rel err {r.rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks passed (tol {args.tol:g})")
    return EXIT_OK


def _to_u8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8, clamped first."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    model = _load_model(_require(cfg, "paths.checkpoint", "--checkpoint"))
    data = _load_dataset(_require(cfg, "paths.data", "--data"))
    _check_size(model, data)
    out_dir = _require(cfg, "paths.out_dir", "--out-dir")
    n = min(args.n, len(data))
    idx = np.arange(n)
    pair = make_view_pair(data.as_float(idx), cfg.view_spec(), cfg["eval.seed"], 0, indices=idx)
    with no_grad():
        e1, e2 = model.project(model.encode(pair.v1)), model.project(model.encode(pair.v2))
        recon = model.decode(e1.z_equi, e2.z_equi).data
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            for tag, img in (("v1", pair.v1[i]), ("v2", pair.v2[i]), ("recon", recon[i])):
                ds_mod.write_ppm(out_dir / f"{i:03d}_{tag}.ppm", _to_u8(img))
    except OSError as exc:
        raise IOFailure(f"cannot write to {out_dir}: {exc}") from None
    print(f"wrote {3 * n} PPM files to {out_dir}")
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "reconstruct": cmd_reconstruct,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        print(f"eqrecon: unknown command {argv[0]!r} (choose from {', '.join(COMMANDS)})", file=sys.stderr)
        return EXIT_COMMAND
    parser = _build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args, _split_overrides(rest))
        log.info("resolved config:\n%s", cfg.dump())
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"eqrecon: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ContractError) as exc:
        print(f"eqrecon: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOFailure, OSError) as exc:
        print(f"eqrecon: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"eqrecon: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
