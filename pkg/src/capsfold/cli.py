"""capsfold command line.

Exit codes: 0 success, 1 usage error, 2 data error. Errors go to stderr
prefixed with ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from ._io import atomic_write
from .capsnet import LOSSES, PRESETS, CapsNet, Hyperparameters, RMSProp, load_model, save_model
from .errors import CapsfoldError
from .interpret import channel_scores, encode_for, perturb_and_compare
from .pdb import RemoveAtomsByName, TranslateAtoms, parse_range, read_pdb
from .plotting import plot_channel_scores, plot_training_curves
from .training import (
    LabeledSample,
    SplitConfig,
    evaluate,
    metrics_csv,
    predict,
    read_metrics_csv,
    split,
    train,
)
from .voxel import GRID_SIZE, N_CHANNELS, encode, read_cvox, write_cvox

log = logging.getLogger("capsfold")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- dataset loading -----------------------------------------------------------


def _encode_file(args):
    path, mode, size = args
    path = Path(path)
    if path.suffix.lower() == ".cvox":
        return read_cvox(path)
    return encode(read_pdb(path), mode, size=size)


def load_dataset(root, mode: str, size: int = GRID_SIZE, jobs: int | None = None):
    """Samples from ``<root>/<class>/*.pdb|*.cvox``; classes sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"file not found: {root}")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(class_names) < 2:
        raise CapsfoldError(f"{root} needs at least two class subdirectories")
    items = []
    for label, name in enumerate(class_names):
        files = sorted(
            p for p in (root / name).iterdir() if p.suffix.lower() in (".pdb", ".cvox")
        )
        items.extend((p, label) for p in files)
    if not items:
        raise CapsfoldError(f"no .pdb or .cvox files under {root}")
    work = [(str(p), mode, size) for p, _ in items]
    jobs = jobs or os.cpu_count() or 1
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            grids = list(pool.map(_encode_file, work, chunksize=4))
    else:
        grids = [_encode_file(w) for w in work]
    samples = [
        LabeledSample(g, label, p.stem.upper()) for g, (p, label) in zip(grids, items)
    ]
    return samples, class_names


def _input_shape(mode: str, size: int) -> tuple[int, ...]:
    if mode == "3d":
        return (N_CHANNELS, size, size, size)
    side = math.isqrt(size**3)
    if side * side != size**3:
        raise UsageError(f"cube side {size} cannot fold into a square plane")
    return (N_CHANNELS, side, side)


def _load_sample(path, model: CapsNet):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    if path.suffix.lower() == ".cvox":
        return read_cvox(path)
    return encode_for(model, read_pdb(path))


# -- train configuration -------------------------------------------------------

_HP_FIELDS = [f.name for f in fields(Hyperparameters)]


def _train_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise FileNotFoundError(f"file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
    flags = {k: v for k, v in vars(args).items() if v is not None}
    preset_name = flags.get("preset", cfg.get("preset"))
    hp = {}
    mode = loss = None
    if preset_name:
        if preset_name not in PRESETS:
            raise UsageError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[preset_name]
        hp = asdict(preset.hyperparameters)
        mode, loss = preset.mode, preset.loss
    hp.update(cfg.get("hyperparameters", {}))
    hp.update({k: flags[k] for k in _HP_FIELDS if k in flags})
    req_mode = flags.get("mode", cfg.get("mode"))
    req_loss = flags.get("loss", cfg.get("loss"))
    if preset_name:
        if req_mode and req_mode != mode:
            raise UsageError(f"preset {preset_name} is {mode}; got --mode {req_mode}")
        if req_loss and req_loss != loss:
            raise UsageError(f"preset {preset_name} uses {loss}; got --loss {req_loss}")
    mode = req_mode or mode or "2d"
    loss = req_loss or loss or "categorical_hinge"
    if loss not in LOSSES:
        raise UsageError(f"unknown loss {loss!r}")
    missing = [k for k in ("filters", "kernel_size", "primarycap_dim", "voxelcap_dim") if k not in hp]
    if missing:
        raise UsageError(f"missing hyperparameters {missing}; use --preset or set them")
    unknown = set(hp) - set(_HP_FIELDS)
    if unknown:
        raise UsageError(f"unknown hyperparameters {sorted(unknown)}")

    def pick(key, default):
        return flags.get(key, cfg.get(key, default))

    data = pick("data", None)
    if not data:
        raise UsageError("--data is required")
    fr = cfg.get("split", {})
    return {
        "preset": preset_name,
        "data": data,
        "mode": mode,
        "loss": loss,
        "hp": Hyperparameters(**hp),
        "seed": int(pick("seed", 0)),
        "epochs": int(pick("epochs", 20)),
        "out": pick("out", "."),
        "size": int(pick("size", GRID_SIZE)),
        "learning_rate": float(pick("learning_rate", 0.001)),
        "jobs": pick("jobs", None),
        "split": SplitConfig(fr.get("train", 0.70), fr.get("val", 0.15), fr.get("test", 0.15),
                             seed=int(pick("seed", 0))),
    }


# -- subcommands -----------------------------------------------------------------


def cmd_inspect(args):
    st = read_pdb(_existing(args.pdb))
    print(f"source={st.source_id} residues={len(st.residues)} atoms={st.n_atoms}")
    chains = sorted({r.chain_id for r in st.residues})
    print("chains=" + ",".join(c.strip() or "_" for c in chains))
    for name, count in st.channel_tally().items():
        print(f"{name}\t{count}")
    return 0


def cmd_voxelize(args):
    path = _existing(args.pdb)
    grid = encode(read_pdb(path), args.mode, size=args.size)
    out = Path(args.output or path.with_suffix(".cvox").name)
    write_cvox(out, grid)
    dropped = getattr(grid, "dropped_atoms", None)
    extra = f" dropped_atoms={dropped}" if dropped else ""
    print(f"wrote {out} shape={'x'.join(map(str, grid.data.shape))}{extra}")
    return 0


def cmd_train(args):
    cfg = _train_config(args)
    samples, class_names = load_dataset(cfg["data"], cfg["mode"], cfg["size"], cfg["jobs"])
    hp = cfg["hp"]
    if hp.n_classes != len(class_names):
        hp = Hyperparameters(**{**asdict(hp), "n_classes": len(class_names)})
    model = CapsNet(hp, _input_shape(cfg["mode"], cfg["size"]), seed=cfg["seed"],
                    mode=cfg["mode"], loss=cfg["loss"], class_names=class_names)
    train_set, val_set, test_set = split(samples, cfg["split"])
    log.info("split sizes: train %d, val %d, test %d", len(train_set), len(val_set), len(test_set))
    result = train(model, train_set, val_set, epochs=cfg["epochs"],
                   optimizer=RMSProp(learning_rate=cfg["learning_rate"]), seed=cfg["seed"])

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "metrics.csv", metrics_csv(result.records, include_time=args.record_time))
    save_model(out / "model.cwts", model, {
        "preset": cfg["preset"], "seed": cfg["seed"], "epochs": cfg["epochs"],
        "best_epoch": result.best_epoch, "learning_rate": cfg["learning_rate"],
        "rmsprop": {"rho": 0.9, "epsilon": 1e-7, "decay": 0.0},
    })
    report = evaluate(model, test_set).as_dict(class_names)
    report["best_epoch"] = result.best_epoch
    report["split_sizes"] = [len(train_set), len(val_set), len(test_set)]
    atomic_write(out / "test_report.json", json.dumps(report, indent=2) + "\n")
    if not args.no_plot:
        plot_training_curves(result.records, out / "curves.png", title=cfg["preset"] or "")
    print(f"best_epoch={result.best_epoch} test_accuracy={report['prediction_accuracy']:.4f}")
    return 0


def cmd_evaluate(args):
    model = load_model(_existing(args.model))
    samples, class_names = load_dataset(args.data, model.mode, _cube_side(model), args.jobs)
    if class_names != model.class_names:
        raise CapsfoldError(f"dataset classes {class_names} differ from model classes {model.class_names}")
    report = evaluate(model, samples).as_dict(class_names)
    text = json.dumps(report, indent=2) + "\n"
    if args.output:
        atomic_write(args.output, text)
    sys.stdout.write(text)
    return 0


def cmd_predict(args):
    model = load_model(_existing(args.model))
    _check_mode(args, model)
    cls, lengths = predict(model, _load_sample(args.sample, model))
    print(f"class={model.class_names[cls]} lengths=" + ",".join(f"{x:.10g}" for x in lengths))
    return 0


def cmd_perturb(args):
    model = load_model(_existing(args.model))
    _check_mode(args, model)
    structure = read_pdb(_existing(args.pdb))
    edits = []
    for text in args.remove_range or []:
        try:
            edits.append(parse_range(text))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    for name in args.remove_atoms or []:
        edits.append(RemoveAtomsByName(name))
    for text in args.translate or []:
        edits.append(_parse_translate(text))
    if not edits:
        raise UsageError("give at least one of --remove-range, --remove-atoms, --translate")
    rows = [perturb_and_compare(model, structure, e).as_dict() for e in edits]
    text = json.dumps(rows[0] if len(rows) == 1 else rows, indent=2) + "\n"
    if args.output:
        atomic_write(args.output, text)
    sys.stdout.write(text)
    return 0


def cmd_channel_scores(args):
    model = load_model(_existing(args.model))
    sample = _load_sample(args.sample, model)
    label = None
    if args.label is not None:
        if args.label not in model.class_names:
            raise UsageError(f"--label must be one of {model.class_names}")
        label = model.class_names.index(args.label)
    report = channel_scores(model, sample, label)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["channel", "name", "score"])
    for idx, name, score in report.rows():
        w.writerow([idx, name, f"{score:.10g}"])
    if args.output:
        atomic_write(args.output, buf.getvalue())
    sys.stdout.write(f"# {report.definition}; target={report.class_name}\n")
    sys.stdout.write(buf.getvalue())
    if args.plot:
        plot_channel_scores([r[1] for r in report.rows()], report.scores, args.plot,
                            title=f"{Path(args.sample).stem}: {report.class_name}")
    return 0


def cmd_plot(args):
    records = read_metrics_csv(_existing(args.metrics))
    plot_training_curves(records, args.output, title=args.title or "")
    print(f"wrote {args.output}")
    return 0


def _cube_side(model):
    from .interpret import cube_side

    return cube_side(model)


def _check_mode(args, model):
    if getattr(args, "mode", None) and args.mode != model.mode:
        raise UsageError(f"model expects {model.mode} input; got --mode {args.mode}")


def _existing(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return path


def _parse_translate(text: str) -> TranslateAtoms:
    try:
        span, offset = text.rsplit(":", 1)
        rng = parse_range(span)
        dx, dy, dz = (float(v) for v in offset.split(","))
    except ValueError:
        raise UsageError(f"expected CHAIN:START-END:DX,DY,DZ, got {text!r}") from None
    return TranslateAtoms(rng.chain_id, rng.seq_start, rng.seq_end, (dx, dy, dz))


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="capsfold", description="Capsule networks on voxelized protein structures.")
    p.add_argument("--version", action="version", version=f"capsfold {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", help="residue/atom counts and channel tallies")
    s.add_argument("pdb")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("voxelize", help="encode a PDB file as a CVOX grid")
    s.add_argument("pdb")
    s.add_argument("--mode", choices=("2d", "3d"), default="3d")
    s.add_argument("--size", type=int, default=GRID_SIZE, help="cube side in voxels")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("train", help="train a capsule network on <data>/<class>/*.pdb")
    s.add_argument("--config")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--data")
    s.add_argument("--mode", choices=("2d", "3d"))
    s.add_argument("--loss", choices=LOSSES)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.add_argument("--size", type=int, help="cube side in voxels (default 64)")
    s.add_argument("--learning-rate", dest="learning_rate", type=float)
    s.add_argument("--jobs", type=int)
    for name in ("filters", "kernel_size", "primarycap_dim", "voxelcap_dim", "stride",
                 "routing_iterations", "primary_maps"):
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    s.add_argument("--record-time", action="store_true",
                   help="fill the seconds column of metrics.csv (not byte-reproducible)")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="accuracy of a model over a labelled directory")
    s.add_argument("model")
    s.add_argument("--data", required=True)
    s.add_argument("--jobs", type=int)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="classify one PDB or CVOX file")
    s.add_argument("model")
    s.add_argument("sample")
    s.add_argument("--mode", choices=("2d", "3d"))
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("perturb", help="activation-vector norms after a structural edit")
    s.add_argument("model")
    s.add_argument("pdb")
    s.add_argument("--remove-range", action="append", metavar="CHAIN:START-END")
    s.add_argument("--remove-atoms", action="append", metavar="NAME")
    s.add_argument("--translate", action="append", metavar="CHAIN:START-END:DX,DY,DZ")
    s.add_argument("--mode", choices=("2d", "3d"))
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("channel-scores", help="retain-one score for each of the 8 channels")
    s.add_argument("model")
    s.add_argument("sample")
    s.add_argument("--label")
    s.add_argument("-o", "--output", help="CSV path")
    s.add_argument("--plot", help="bar chart PNG path")
    s.set_defaults(func=cmd_channel_scores)

    s = sub.add_parser("plot", help="render metrics.csv as accuracy/loss curves")
    s.add_argument("metrics")
    s.add_argument("-o", "--output", default="curves.png")
    s.add_argument("--title")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        msg = str(exc) if str(exc).startswith("file not found") else f"file not found: {exc.filename or exc}"
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except (CapsfoldError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
