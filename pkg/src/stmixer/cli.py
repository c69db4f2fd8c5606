"""Command-line entry point: ``stmixer {synth,train,eval,label,measure,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataprep import label_evolution, measure_diameter
from .dataset_io import DataError, load_dataset, write_dataset
from .encoder import EncoderConfig
from .hloss import HLossConfig, hloss
from .model import MIXERS, ModelConfig, STMixerModel
from .synthdata import SynthConfig, generate_dataset
from .trainer import (NonFiniteLoss, TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                      score_cases, stack_batch, train)
from .volume import Volume3D

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-3
PRESETS = {"default": SynthConfig, "balanced": SynthConfig.balanced, "acceptance": SynthConfig.acceptance}

log = logging.getLogger("stmixer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("STMIXER_THREADS", "1")))
    except ValueError:
        raise UsageError("STMIXER_THREADS must be an integer")


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: line {exc.lineno}: {exc.msg}") from exc


def _echo(**cfg) -> None:
    print("config " + json.dumps(cfg, sort_keys=True, default=str), flush=True)


# commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    raw = _read_json(args.config)
    n, seed, preset = raw.pop("n", 100), raw.pop("seed", 0), raw.pop("preset", args.preset)
    n = args.n if args.n is not None else n
    seed = args.seed if args.seed is not None else seed
    if n < 1:
        raise UsageError(f"n must be at least 1, got {n}")
    try:
        cfg = PRESETS[preset](**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    _echo(command="synth", n=n, seed=seed, synth=cfg.to_dict(), out=args.out)
    ds = generate_dataset(cfg, n, seed, workers=_threads())
    try:
        path = write_dataset(ds, args.out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(f"wrote {n} cases to {path.parent}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(**_read_json(args.config).get("train", {}))
    overrides = {k: v for k, v in (("alpha", args.alpha), ("batch", args.batch),
                                   ("base_lr", args.lr), ("seed", args.seed)) if v is not None}
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    mcfg = ModelConfig(EncoderConfig(**_read_json(args.config).get("encoder", {})), mixer=args.mixer)
    epochs = args.epochs if args.epochs is not None else tcfg.total_epochs
    out = Path(args.out)
    _echo(command="train", dataset=args.dataset, out=str(out), epochs=epochs,
          train=tcfg.to_dict(), model=mcfg.to_dict())
    _, cases = load_dataset(args.dataset)
    tr = [c for c in cases if c.split == "train"]
    va = [c for c in cases if c.split == "val"]
    if tcfg.alpha == 0:
        print("alpha=0: auc_h1 column is the H2 dilatation score (H1 untrained)")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    model = STMixerModel(mcfg, seed=tcfg.seed)
    history = train(model, tr, tcfg, va, epochs=epochs, checkpoint=out / "checkpoint.bin",
                    csv_path=out / "metrics.csv")
    save_checkpoint(out / "last.bin", model, {"train": tcfg.to_dict(), "epoch": len(history)})
    print(history[-1].report)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    try:
        model, echo = load_checkpoint(args.checkpoint)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    alpha = args.alpha if args.alpha is not None else echo.get("train", {}).get("alpha", 1.0)
    _, cases = load_dataset(args.dataset)
    split = [c for c in cases if c.split == args.split] if args.split != "all" else cases
    if not split:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(model, split, alpha)
    if args.dump:
        Path(args.dump).write_text(score_cases(model, split, alpha).to_csv())
    print("auc_h1,auc_h2,auc_h2_d,acc,kappa")
    print(report.csv_row())
    return EXIT_OK


def cmd_label(args) -> int:
    src = open(args.csv, newline="") if args.csv != "-" else sys.stdin
    with src:
        rows = list(csv.reader(src))
    writer = csv.writer(sys.stdout, lineterminator="\n")
    for lineno, row in enumerate(rows, start=1):
        if not row:
            continue
        if lineno == 1 and row[:3] == ["id", "d_prev", "d_curr"]:
            writer.writerow(row + ["label"])
            continue
        if len(row) != 3:
            raise DataError(f"{args.csv}: line {lineno}: expected id,d_prev,d_curr")
        try:
            label = label_evolution(float(row[1]), float(row[2]))
        except ValueError as exc:
            raise DataError(f"{args.csv}: line {lineno}: {exc}") from exc
        writer.writerow(row + [str(label)])
    return EXIT_OK


def _triple(text, kind=float):
    parts = [kind(v) for v in text.split(",")]
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def cmd_measure(args) -> int:
    path = Path(args.mask)
    if args.mask == "fixture:block_3x5":
        raw = resources.files("stmixer.fixtures").joinpath("block_3x5.raw").read_bytes()
        meta = json.loads(resources.files("stmixer.fixtures").joinpath("block_3x5.json").read_text())
    else:
        if not path.is_file():
            raise DataError(f"mask file {path} not found")
        raw = path.read_bytes()
        sidecar = path.with_suffix(".json")
        meta = json.loads(sidecar.read_text()) if sidecar.is_file() else {}
    dims = _triple(args.dims, int) if args.dims else meta.get("dims")
    spacing = _triple(args.spacing) if args.spacing else meta.get("spacing", (1.0, 1.0, 1.0))
    if dims is None:
        raise UsageError("--dims is required when the mask has no .json sidecar")
    try:
        m = measure_diameter(Volume3D.from_bytes(raw, dims, spacing))
    except ValueError as exc:
        raise DataError(f"{args.mask}: {exc}") from exc
    print(round(m.value_mm, 4))
    return EXIT_OK


def gradcheck_model(seed: int = 0, per_param: int | None = 20, mixer: str = "stm") -> float:
    """Max relative gradient error of the full model + H-loss on a 2-case batch.

    The heads start at zero, which would block every gradient upstream, so
    they get random weights first.
    """
    model = STMixerModel(ModelConfig(mixer=mixer), seed=seed)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.startswith("head."):
            p.data = rng.normal(0.0, 0.5, p.data.shape).astype(np.float32)
    ds = generate_dataset(SynthConfig.balanced(missing_t0_prob=0.0), 2, seed)
    cases = ds.cases
    cases[1] = replace(cases[1], roi_t0=None, mask_t0=None)
    t1, t0, present, y = stack_batch(cases)
    loss_cfg = HLossConfig(alpha=1.0)
    return dc.grad_check(lambda: hloss(model(t1, t0, present), y, loss_cfg), model.parameters(),
                         eps=1e-3, max_per_param=per_param, rng=rng)


def cmd_gradcheck(args) -> int:
    per_param = None if args.per_param == 0 else args.per_param
    _echo(command="gradcheck", seed=args.seed or 0, per_param=args.per_param, mixer=args.mixer)
    err = gradcheck_model(args.seed or 0, per_param, args.mixer)
    print(f"max relative error {err:.3e}")
    return EXIT_OK if err < GRADCHECK_TOL else EXIT_NUMERIC


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stmixer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="JSON with synth fields (and optionally n, seed, preset)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help='JSON with "train" and/or "encoder" sections')
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int, help="epochs to run (schedule length stays total_epochs)")
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mixer", choices=MIXERS, default="stm")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--dump", help="write per-case scores CSV here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("label", help="append evolution labels to an id,d_prev,d_curr CSV")
    p.add_argument("csv", help="input CSV path or - for stdin")
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("measure", help="print the diameter (mm) of a raw float32 mask")
    p.add_argument("mask", help="raw mask path, or fixture:block_3x5")
    p.add_argument("--dims", help="z,y,x voxel counts")
    p.add_argument("--spacing", help="z,y,x spacing in mm")
    p.set_defaults(fn=cmd_measure)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-param", type=int, default=20, help="entries sampled per tensor (0 = all)")
    p.add_argument("--mixer", choices=MIXERS, default="stm")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"stmixer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"stmixer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLoss as exc:
        print(f"stmixer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
