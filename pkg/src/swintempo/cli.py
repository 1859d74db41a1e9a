"""Command line entry point: synth -> preprocess -> train -> infer -> evaluate, plus crossval.

Every flag can also come from a TOML file given with ``--config``. Top-level
keys apply to all subcommands, a ``[<subcommand>]`` table overrides them, and
flags given on the command line override both. Keys are the long flag names
with dashes replaced by underscores.

Exit codes: 0 success, 1 usage or validation error, 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import FormatError, SwinTempoError, ValidationError
from .model import Variant

log = logging.getLogger("swintempo")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", type=Path, help="TOML file supplying defaults for any flag")
    p.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _train_flags(p):
    p.add_argument("--variant", default=Variant.SWIN_TEMPO.value, choices=[v.value for v in Variant])
    p.add_argument("--preset", default="tiny", choices=["tiny", "full"], help="model size preset")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--slices-per-step", type=int, default=4)
    p.add_argument(
        "--background-window-prob", type=float, default=1.0, help="keep windows without nodules with this probability"
    )
    p.add_argument("--no-augment", action="store_true", help="disable affine and brightness augmentation")


def _extract_flags(p):
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--eps-mm", type=float, default=2.5, help="DBSCAN neighbourhood radius")
    p.add_argument("--min-pts", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="volumes processed in parallel")
    p.add_argument("--keep-duplicates", action="store_true", help="do not count repeat hits on one nodule as FPs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="swintempo", description="Slice-sequential lung nodule detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a seeded phantom dataset")
    _common(p)
    p.add_argument("--out", type=Path)
    p.add_argument("--n-volumes", type=int, default=4)
    p.add_argument("--shape", type=int, nargs=3, default=[16, 64, 64], metavar=("Z", "Y", "X"))
    p.add_argument("--nodules", type=int, nargs=2, default=[1, 3], metavar=("MIN", "MAX"))
    p.add_argument("--radius-mm", type=float, nargs=2, default=[3.0, 6.0], metavar=("MIN", "MAX"))
    p.add_argument("--spacing-mm", type=float, nargs=3, default=[1.5, 1.0, 1.0], metavar=("Z", "Y", "X"))
    p.add_argument("--noise-hu", type=float, default=50.0)
    p.add_argument("--series-prefix", default="phantom")

    p = sub.add_parser("preprocess", help="clip, mask, standardize and resize a dataset")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--input-size", type=int, default=64)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--series", nargs="*", help="restrict training to these series ids")
    _train_flags(p)

    p = sub.add_parser("infer", help="write nodule candidates for volumes")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path, help="dataset directory")
    src.add_argument("--volume", type=Path, help="single volume (path without .json/.raw)")
    p.add_argument("--mask", type=Path, help="lung mask for --volume")
    p.add_argument("--series", nargs="*", help="restrict --data to these series ids")
    p.add_argument("--out", type=Path, default=Path("candidates.csv"))
    p.add_argument("--overlay-dir", type=Path, help="also save probability overlays per series")
    _extract_flags(p)

    p = sub.add_parser("evaluate", help="FROC report for a candidates file")
    _common(p)
    p.add_argument("--candidates", type=Path)
    p.add_argument("--annotations", type=Path)
    p.add_argument("--n-scans", type=int)
    p.add_argument("--out", type=Path, default=Path("report"))
    p.add_argument("--keep-duplicates", action="store_true")

    p = sub.add_parser("crossval", help="k-fold train/evaluate over a dataset")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--folds", type=int, default=10)
    _train_flags(p)
    _extract_flags(p)
    return parser


REQUIRED = {
    "synth": ["out"],
    "preprocess": ["data", "out"],
    "train": ["data", "out"],
    "infer": ["checkpoint"],
    "evaluate": ["candidates", "annotations", "n_scans"],
    "crossval": ["data", "out"],
}


# --------------------------------------------------------------------------
# Config merging
# --------------------------------------------------------------------------


def _load_toml(path: Path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with path.open("rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _coerce(action: argparse.Action, key: str, value):
    def one(v):
        if action.type is not None and not isinstance(v, bool):
            try:
                v = action.type(v)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and v not in action.choices:
            raise UsageError(f"config key {key!r}: {v!r} is not one of {sorted(action.choices)}")
        return v

    if action.nargs in (None, "?") and not isinstance(action, argparse._StoreTrueAction):
        return one(value)
    if isinstance(action, argparse._StoreTrueAction):
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be true or false")
        return value
    if not isinstance(value, list):
        raise UsageError(f"config key {key!r} must be an array")
    if isinstance(action.nargs, int) and len(value) != action.nargs:
        raise UsageError(f"config key {key!r} needs {action.nargs} values")
    return [one(v) for v in value]


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        doc = _load_toml(args.config)
        subs = {name: _subparser(parser, name) for name in COMMANDS}
        known = {name: {a.dest: a for a in sp._actions if a.dest not in ("help", "config")} for name, sp in subs.items()}
        actions = known[args.command]
        for key, val in doc.items():
            if isinstance(val, dict):
                if key not in COMMANDS:
                    raise UsageError(f"{args.config}: unknown table [{key}]")
                unknown = sorted(set(val) - set(known[key]))
                if unknown:
                    raise UsageError(f"{args.config}: unknown keys in [{key}]: {', '.join(unknown)}")
                for k, v in val.items():
                    _coerce(known[key][k], k, v)
            elif not any(key in k for k in known.values()):
                raise UsageError(f"{args.config}: unknown key {key!r}")
            else:
                for k in known.values():
                    if key in k:
                        _coerce(k[key], key, val)
        # top-level keys apply wherever the subcommand has that option
        values = {k: v for k, v in doc.items() if not isinstance(v, dict) and k in actions}
        values.update(doc.get(args.command, {}))
        sub = subs[args.command]
        sub.set_defaults(**{k: _coerce(actions[k], k, v) for k, v in values.items()})
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def effective_config(args: argparse.Namespace) -> dict:
    """Resolved options; the output location is left out so identical runs echo identical files."""
    out = {"version": __version__}
    for k, v in sorted(vars(args).items()):
        if k in ("log_level", "out"):
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def echo_config(args: argparse.Namespace, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{args.command}_config.json"
    path.write_text(json.dumps(effective_config(args), indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> None:
    from .volume_io import PhantomConfig, generate_phantom, save_dataset

    cfg = PhantomConfig(
        n_volumes=args.n_volumes,
        shape=tuple(args.shape),
        nodules_per_volume=tuple(args.nodules),
        nodule_radius_mm=tuple(args.radius_mm),
        noise_hu=args.noise_hu,
        spacing_mm=tuple(args.spacing_mm),
        seed=args.seed,
        series_prefix=args.series_prefix,
    )
    save_dataset(generate_phantom(cfg), args.out)
    echo_config(args, args.out)
    log.info("wrote %d volumes to %s", cfg.n_volumes, args.out)


def cmd_preprocess(args) -> None:
    from .pipeline import preprocess_cached
    from .volume_io import load_dataset, save_dataset

    ds = load_dataset(args.data)
    items = []
    for sid in ds.series_ids:
        items.append((preprocess_cached(ds.volumes[sid], ds.masks.get(sid), args.input_size), None, ds.annotations[sid]))
    save_dataset(items, args.out)
    echo_config(args, args.out)
    log.info("preprocessed %d volumes into %s", len(items), args.out)


def _train_config(args):
    from .training import AugmentConfig, TrainConfig

    return TrainConfig(
        variant=args.variant,
        model_preset=args.preset,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        slices_per_step=args.slices_per_step,
        seed=args.seed,
        augment=AugmentConfig.none() if args.no_augment else AugmentConfig(),
        background_window_prob=args.background_window_prob,
    ).validate()


def cmd_train(args) -> None:
    from .model import parameter_groups
    from .pipeline import train_on
    from .volume_io import load_dataset

    cfg = _train_config(args)
    ds = load_dataset(args.data)
    ids = args.series or None
    if ids:
        unknown = sorted(set(ids) - set(ds.series_ids))
        if unknown:
            raise ValidationError(f"unknown series: {', '.join(unknown)}")
    ckpt = train_on(ds, cfg, ids, args.out)
    echo_config(args, args.out)
    groups = parameter_groups(ckpt.build_model())
    log.info("variant %s: components %s", cfg.variant.value, ", ".join(f"{k}={v}" for k, v in groups.items()))
    log.info("best epoch %d, loss %.6f; checkpoint at %s", ckpt.epoch, ckpt.loss, args.out / "checkpoint.zip")


def _settings(args):
    from .pipeline import ExtractSettings

    if args.jobs < 1:
        raise ValidationError("--jobs must be >= 1")
    return ExtractSettings(args.threshold, args.eps_mm, args.min_pts)


def cmd_infer(args) -> None:
    from .candidates import write_candidates
    from .pipeline import infer_dataset, preprocess_cached, save_overlay
    from .training import load_checkpoint
    from .volume_io import Dataset, load_dataset, read_mask, read_volume

    settings = _settings(args)
    model = load_checkpoint(args.checkpoint).build_model()
    if args.volume is not None:
        vol = read_volume(args.volume)
        ds = Dataset({vol.series_id: vol}, {vol.series_id: read_mask(args.mask)} if args.mask else {}, {})
    elif args.data is not None:
        ds = load_dataset(args.data)
    else:
        raise UsageError("infer: one of --data or --volume is required")
    ids = args.series or None
    cands, probs = infer_dataset(model, ds, ids, settings, args.jobs)
    write_candidates(cands, args.out)
    echo_config(args, args.out.parent)
    if args.overlay_dir is not None:
        for sid, stack in probs.items():
            pre = preprocess_cached(ds.volumes[sid], ds.masks.get(sid), model.cfg.input_size)
            save_overlay(pre.voxels, stack, args.overlay_dir / f"{sid}.png", settings.threshold, title=sid)
    log.info("%d candidates from %d volumes -> %s", len(cands), len(probs), args.out)


def cmd_evaluate(args) -> None:
    from .candidates import read_candidates
    from .froc import evaluate, plot_froc
    from .volume_io import read_annotations

    cands = read_candidates(args.candidates)
    anns = read_annotations(args.annotations)
    report = evaluate(cands, anns, args.n_scans, duplicates_as_fp=not args.keep_duplicates)
    report.write_json(args.out / "report.json")
    plot_froc(report, args.out / "froc.png")
    echo_config(args, args.out)
    log.info("CPM %.4f, detected %d/%d", report.cpm, report.n_detected, report.n_annotations)


def cmd_crossval(args) -> None:
    from .froc import plot_froc
    from .pipeline import crossval
    from .volume_io import load_dataset

    cfg = _train_config(args)
    settings = _settings(args)
    ds = load_dataset(args.data)
    report = crossval(ds, cfg, args.folds, args.out, settings, not args.keep_duplicates, args.jobs)
    report.write_json(args.out / "report.json")
    plot_froc(report, args.out / "froc.png", title=f"{cfg.variant.value}, {args.folds}-fold")
    echo_config(args, args.out)
    log.info("pooled CPM %.4f over %d scans", report.cpm, report.n_scans)


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "crossval": cmd_crossval,
}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        build_parser().print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (OSError, FormatError) as exc:
        print(f"swintempo: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (OSError, FormatError) as exc:
        print(f"swintempo {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SwinTempoError, ValueError) as exc:
        print(f"swintempo {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
