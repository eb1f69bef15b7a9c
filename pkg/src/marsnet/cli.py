"""Command line pipeline driver.

Ten subcommands cover the full loop: generate a synthetic world, screen
footprints, calibrate RH98 against field plots, validate raster stacks, cut
patch datasets, train, predict maps, evaluate, run the ablation grid, and
compare map histograms.

Conventions:
  * exit 0 on success, 2 for bad arguments/config/input files, 3 for
    runtime failures; errors are a single JSON line on stderr
  * every option can come from an INI config file (section name = subcommand,
    key name = option with underscores); explicit flags win; unknown sections
    or keys are rejected
  * one root --seed feeds the whole run; each component derives its own
    stream from it, so a root seed pins every random choice end to end
  * each command prints a single JSON summary line on stdout
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad arguments, config, or input files: exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):          # single-line JSON instead of usage dump
        raise UsageError(message)


def derive_seed(root: int, label: str) -> int:
    """Stable per-component seed from the root seed."""
    digest = hashlib.blake2b(f"{root}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


@dataclass
class Opt:
    name: str                  # dest / config key (underscores)
    parse: object              # callable str -> value
    default: object = None
    required: bool = False
    help: str = ""


_TRAINING_OPTS = [
    Opt("epochs", int, 50, help="maximum training epochs"),
    Opt("batch_size", int, 64, help="samples per optimizer step"),
    Opt("learning_rate", float, 1e-3, help="Adam learning rate"),
    Opt("l2_lambda", float, 1e-5, help="kernel L2 penalty weight inside the loss"),
    Opt("patience", int, 10, help="early-stop patience in epochs"),
    Opt("stage_widths", _parse_int_list, (64, 128, 256, 512),
        help="comma-separated encoder widths"),
    Opt("encoder_mode", str, "separate", help="separate | shared | sar_shared"),
    Opt("esbc_enabled", _parse_bool, True, help="use the reconstruction conv unit"),
    Opt("dropout_rate", float, 0.25, help="dropout after the deepest encoder stage"),
]

SPECS: dict[str, list[Opt]] = {
    "synth": [
        Opt("out", str, required=True, help="output directory"),
        Opt("width", int, 256), Opt("height", int, 256),
        Opt("pixel_size", float, 10.0),
        Opt("spacing", int, 6, help="footprint lattice spacing in pixels"),
        Opt("plots", int, 24, help="number of field plots"),
        Opt("optical_scenes", int, 5), Opt("sar_scenes", int, 6),
    ],
    "filter-gedi": [
        Opt("footprints", str, required=True, help="input footprint CSV"),
        Opt("out", str, required=True, help="output CSV of kept footprints"),
        Opt("ndvi", str, help="optical NDVI raster for the consistency screen"),
        Opt("forest_mask", str, help="forest mask raster"),
        Opt("drop_report", str, help="optional CSV of dropped ids and stages"),
    ],
    "calibrate": [
        Opt("plots", str, required=True, help="field plot CSV"),
        Opt("footprints", str, required=True, help="footprint CSV (filtered)"),
        Opt("out", str, required=True, help="output calibration file"),
        Opt("statistic", str, "top10_mean", help="field dominant-height statistic"),
        Opt("table", str, help="optional RH-level/statistic agreement table CSV"),
    ],
    "build-stack": [
        Opt("sentinel2", str), Opt("sentinel1", str),
        Opt("palsar2", str), Opt("ancillary", str),
        Opt("out", str, required=True, help="validated stack directory"),
    ],
    "patchify": [
        Opt("stacks", str, required=True, help="stack directory"),
        Opt("footprints", str, required=True, help="filtered footprint CSV"),
        Opt("calibration", str, required=True, help="calibration file"),
        Opt("out", str, required=True, help="patch dataset directory"),
        Opt("patch_size", int, 64),
        Opt("diameter", float, 25.0, help="footprint diameter in meters"),
    ],
    "train": _TRAINING_OPTS + [
        Opt("dataset", str, required=True, help="patch dataset directory"),
        Opt("out", str, required=True, help="checkpoint directory"),
        Opt("modalities", _parse_str_list, help="subset of dataset modalities"),
    ],
    "predict": [
        Opt("checkpoint", str, required=True),
        Opt("stacks", str, required=True, help="stack directory"),
        Opt("out", str, required=True, help="output height map TIFF"),
        Opt("forest_mask", str, help="forest mask raster; off-forest becomes nodata"),
    ],
    "evaluate": [
        Opt("out", str, required=True, help="output metrics CSV"),
        Opt("map", str, help="height map TIFF (footprint mode)"),
        Opt("footprints", str, help="footprint CSV (footprint mode)"),
        Opt("calibration", str, help="calibration file (footprint mode)"),
        Opt("checkpoint", str, help="checkpoint directory (patch mode)"),
        Opt("dataset", str, help="patch dataset directory (patch mode)"),
        Opt("split", str, "test", help="dataset split for patch mode"),
        Opt("diameter", float, 25.0),
    ],
    "ablate": _TRAINING_OPTS + [
        Opt("dataset", str, required=True, help="patch dataset directory"),
        Opt("out", str, required=True, help="output table CSV"),
    ],
    "histogram": [
        Opt("map_a", str, required=True), Opt("map_b", str, required=True),
        Opt("out", str, required=True, help="output histogram CSV"),
        Opt("plot", str, help="optional output chart PNG"),
        Opt("bin_width", float, 1.0),
        Opt("label_a", str, "map_a"), Opt("label_b", str, "map_b"),
    ],
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="marsnet", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="INI config file with per-subcommand sections")
    parser.add_argument("--seed", type=int, default=0, help="root seed for the whole run")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    for command, spec in SPECS.items():
        sub = subparsers.add_parser(command, help=f"{command} step")
        for opt in spec:
            sub.add_argument(
                "--" + opt.name.replace("_", "-"), dest=opt.name,
                type=opt.parse, default=None, help=opt.help)
    return parser


def _load_config_values(path: str, command: str, spec: list[Opt]) -> dict:
    if not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"config parse error: {exc}") from exc
    unknown_sections = [s for s in parser.sections() if s not in SPECS]
    if unknown_sections:
        raise UsageError(f"unknown config sections: {unknown_sections}")
    values: dict[str, object] = {}
    if command in parser:
        known = {opt.name: opt for opt in spec}
        for key, raw in parser[command].items():
            if key not in known:
                raise UsageError(f"unknown config key '{key}' in section [{command}]")
            try:
                values[key] = known[key].parse(raw)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key '{key}': {exc}") from exc
    return values


def _merge(args, config_values: dict, spec: list[Opt]) -> dict:
    merged = {}
    for opt in spec:
        value = getattr(args, opt.name)
        if value is None:
            value = config_values.get(opt.name, opt.default)
        if value is None and opt.required:
            raise UsageError(
                f"missing required option --{opt.name.replace('_', '-')} "
                f"(or config key '{opt.name}')")
        merged[opt.name] = value
    return merged


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _forest_lookup(raster):
    from .rasters import point_sampler
    sample = point_sampler(raster, band=0, fill=float("nan"))

    def forest_at(lon: float, lat: float) -> bool:
        value = sample(lon, lat)
        return bool(np.isfinite(value) and value > 0.5)

    return forest_at


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_synth(opts, root_seed):
    from . import storage, synth

    world = synth.SynthWorld(
        seed=derive_seed(root_seed, "synth"),
        width=opts["width"], height=opts["height"], pixel_size=opts["pixel_size"],
        footprint_spacing_px=opts["spacing"], n_field_plots=opts["plots"],
        n_optical_scenes=opts["optical_scenes"], n_sar_scenes=opts["sar_scenes"])
    dataset = synth.generate(world)
    out = Path(opts["out"])
    storage.save_stack_dir(out, dataset.stacks)
    storage.write_footprints_csv(out / "footprints.csv", dataset.footprints)
    storage.write_plots_csv(out / "plots.csv", dataset.plots)
    storage.write_raster(out / "forest_mask.tif", dataset.forest_mask, ["forest"])
    storage.write_raster(out / "ndvi.tif", dataset.ndvi, ["NDVI_median"])
    storage.write_raster(out / "true_height.tif", dataset.true_height, ["height_m"])
    (out / "world.json").write_text(json.dumps(
        {"world": world.to_dict(), "planted": dataset.planted},
        sort_keys=True, indent=2) + "\n")
    _emit({"out": str(out), "footprints": len(dataset.footprints),
           "plots": len(dataset.plots),
           "planted": {k: len(v) for k, v in dataset.planted.items()}})


def _cmd_filter_gedi(opts, root_seed):
    from . import gedi, storage
    from .rasters import point_sampler

    records = storage.read_footprints_csv(opts["footprints"])
    ndvi_at = None
    forest_at = None
    if opts["ndvi"]:
        ndvi_raster, _ = storage.read_raster(opts["ndvi"])
        ndvi_at = point_sampler(ndvi_raster, band=0, fill=float("nan"))
    if opts["forest_mask"]:
        forest_raster, _ = storage.read_raster(opts["forest_mask"])
        forest_at = _forest_lookup(forest_raster)
    report = gedi.apply_filters(records, ndvi_at=ndvi_at, forest_at=forest_at)
    storage.write_footprints_csv(opts["out"], report.kept)
    if opts["drop_report"]:
        storage.write_drop_report_csv(opts["drop_report"], report.dropped)
    _emit({"input": len(records), "kept": len(report.kept),
           "dropped": len(report.dropped), "after_stage": report.stage_counts})


def _cmd_calibrate(opts, root_seed):
    from . import gedi, storage

    plots = storage.read_plots_csv(opts["plots"])
    records = storage.read_footprints_csv(opts["footprints"])
    pairs, short = gedi.matched_pairs(plots, records, statistic=opts["statistic"])
    model = gedi.fit_calibration(pairs)
    storage.write_calibration(opts["out"], model)
    if opts["table"]:
        table = gedi.rh_field_correlation(plots, records)
        storage.write_rh_table_csv(opts["table"], table)
    _emit({"slope": model.slope, "intercept": model.intercept, "r2": model.r2,
           "n": model.n, "short_plots": len(short)})


def _cmd_build_stack(opts, root_seed):
    from . import storage
    from .rasters import MODALITY_ORDER

    rasters = {}
    names = {}
    for modality in MODALITY_ORDER:
        path = opts.get(modality)
        if not path:
            continue
        raster, band_names = storage.read_raster(path)
        if band_names is None:
            raise ValueError(f"{path} has no band-name sidecar (.bands.txt)")
        rasters[modality] = raster
        names[modality] = band_names
    if not rasters:
        raise UsageError("build-stack needs at least one modality raster")
    from .rasters import assemble_stacks
    stacks = assemble_stacks(rasters, names)
    storage.save_stack_dir(opts["out"], stacks)
    _emit({"out": opts["out"], "modalities": list(stacks),
           "bands": {m: s.raster.bands for m, s in stacks.items()}})


def _cmd_patchify(opts, root_seed):
    from . import gedi, patches, storage

    stacks = storage.load_stack_dir(opts["stacks"])
    records = storage.read_footprints_csv(opts["footprints"])
    calibration = storage.read_calibration(opts["calibration"])
    geometry = next(iter(stacks.values())).raster.geometry
    label_raster, mask = gedi.rasterize_labels(
        records, calibration, geometry, footprint_diameter_m=opts["diameter"])
    samples = patches.extract_patches(stacks, label_raster, mask,
                                      patch_size=opts["patch_size"])
    train, val, test = patches.split_samples(samples, seed=derive_seed(root_seed, "split"))
    stats = patches.fit_norm_stats(train)
    splits = {
        "train": patches.standardize_samples(train, stats),
        "val": patches.standardize_samples(val, stats),
        "test": patches.standardize_samples(test, stats),
    }
    band_names = {m: stacks[m].band_names for m in stacks}
    storage.save_patch_dataset(opts["out"], splits, stats, band_names, geometry,
                               patch_size=opts["patch_size"])
    _emit({"patches": len(samples), "train": len(train), "val": len(val),
           "test": len(test), "labeled_pixels": int(mask.sum())})


def _model_config_from(opts, dataset, root_seed, modalities=None):
    from .model import ModelConfig

    available = list(dataset.band_names)
    chosen = list(modalities) if modalities else available
    unknown = [m for m in chosen if m not in available]
    if unknown:
        raise ValueError(f"modalities not in the dataset: {unknown}")
    return ModelConfig(
        input_bands={m: len(dataset.band_names[m]) for m in chosen},
        stage_widths=tuple(opts["stage_widths"]),
        input_spatial=dataset.patch_size,
        encoder_mode=opts["encoder_mode"],
        esbc_enabled=opts["esbc_enabled"],
        dropout_rate=opts["dropout_rate"],
        seed=derive_seed(root_seed, "model"))


def _train_config_from(opts, root_seed):
    from .train import TrainConfig

    return TrainConfig(
        learning_rate=opts["learning_rate"], max_epochs=opts["epochs"],
        batch_size=opts["batch_size"], l2_lambda=opts["l2_lambda"],
        patience=opts["patience"], seed=derive_seed(root_seed, "train"))


def _cmd_train(opts, root_seed):
    from . import storage
    from .model import build_model
    from .train import train_model

    dataset = storage.load_patch_dataset(opts["dataset"])
    config = _model_config_from(opts, dataset, root_seed, opts["modalities"])
    train_config = _train_config_from(opts, root_seed)
    model = build_model(config)
    history = train_model(model, dataset.splits.get("train", []),
                          dataset.splits.get("val", []), train_config)
    storage.save_checkpoint(opts["out"], model, dataset.stats,
                            train_config=train_config, history=history)
    _emit({"out": opts["out"], "epochs_run": history.epochs_run,
           "best_epoch": history.best_epoch, "best_val_loss": history.best_val_loss,
           "stopped_early": history.stopped_early})


def _cmd_predict(opts, root_seed):
    from . import storage
    from .train import predict_map

    bundle = storage.load_checkpoint(opts["checkpoint"])
    stacks = storage.load_stack_dir(opts["stacks"])
    forest = None
    if opts["forest_mask"]:
        forest, _ = storage.read_raster(opts["forest_mask"])
    height_map = predict_map(bundle.model, stacks, bundle.stats, forest_mask=forest)
    storage.write_raster(opts["out"], height_map, ["dominant_height_m"])
    valid = ~height_map.nodata
    _emit({"out": opts["out"], "valid_pixels": int(valid.sum()),
           "mean_height": float(height_map.data[0][valid].mean()) if valid.any() else None})


def _cmd_evaluate(opts, root_seed):
    from . import gedi, storage
    from .metrics import footprint_eval, pixel_eval
    from .train import predict_patches

    map_mode = bool(opts["map"])
    patch_mode = bool(opts["checkpoint"] or opts["dataset"])
    if map_mode == patch_mode:
        raise UsageError(
            "evaluate needs either --map/--footprints/--calibration or "
            "--checkpoint/--dataset, not both")
    if map_mode:
        if not (opts["footprints"] and opts["calibration"]):
            raise UsageError("map mode needs --footprints and --calibration")
        height_map, _ = storage.read_raster(opts["map"])
        records = storage.read_footprints_csv(opts["footprints"])
        calibration = storage.read_calibration(opts["calibration"])
        points = gedi.footprint_eval_points(records, calibration)
        report, excluded = footprint_eval(height_map, points, diameter_m=opts["diameter"])
        extra = {"excluded_footprints": excluded, "mode": "footprint"}
    else:
        if not (opts["checkpoint"] and opts["dataset"]):
            raise UsageError("patch mode needs both --checkpoint and --dataset")
        bundle = storage.load_checkpoint(opts["checkpoint"])
        dataset = storage.load_patch_dataset(opts["dataset"])
        if opts["split"] not in dataset.splits:
            raise ValueError(f"dataset has no split '{opts['split']}'")
        samples = dataset.splits[opts["split"]]
        if not samples:
            raise ValueError(f"split '{opts['split']}' is empty")
        modalities = list(bundle.model_config.input_bands)
        preds, labels, masks = predict_patches(bundle.model, samples, modalities)
        report = pixel_eval(preds, labels, masks)
        extra = {"split": opts["split"], "mode": "patch"}
    storage.write_report_csv(opts["out"], report, extra=extra)
    _emit({"out": opts["out"], **report.to_dict(), **extra})


def _cmd_ablate(opts, root_seed):
    from . import storage
    from .metrics import default_ablation_grid, run_ablation

    dataset = storage.load_patch_dataset(opts["dataset"])
    base = _model_config_from(opts, dataset, root_seed)
    grid = default_ablation_grid(base)
    train_config = _train_config_from(opts, root_seed)
    rows, soft_warnings = run_ablation(
        grid, dataset.splits.get("train", []), dataset.splits.get("val", []),
        dataset.splits.get("test", []), train_config)
    storage.write_ablation_csv(opts["out"], rows)
    _emit({"out": opts["out"],
           "rows": [{"name": r.name, "failed": r.failed,
                     "r2": r.report.r2 if r.report else None} for r in rows],
           "warnings": soft_warnings})


def _cmd_histogram(opts, root_seed):
    from . import storage
    from .metrics import height_histogram, plot_histogram

    map_a, _ = storage.read_raster(opts["map_a"])
    map_b, _ = storage.read_raster(opts["map_b"])
    table = height_histogram(map_a, map_b, bin_width=opts["bin_width"],
                             labels=(opts["label_a"], opts["label_b"]))
    storage.write_histogram_csv(opts["out"], table)
    if opts["plot"]:
        plot_histogram(table, opts["plot"])
    _emit({"out": opts["out"], "bins": int(table.counts_a.size),
           "pixels_a": int(table.counts_a.sum()), "pixels_b": int(table.counts_b.sum())})


_COMMANDS = {
    "synth": _cmd_synth,
    "filter-gedi": _cmd_filter_gedi,
    "calibrate": _cmd_calibrate,
    "build-stack": _cmd_build_stack,
    "patchify": _cmd_patchify,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "histogram": _cmd_histogram,
}

_INPUT_ERRORS = (UsageError, ValueError, KeyError, FileNotFoundError,
                 NotADirectoryError, IsADirectoryError, PermissionError,
                 json.JSONDecodeError)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("no subcommand given (see --help)")
        spec = SPECS[args.command]
        config_values = (_load_config_values(args.config, args.command, spec)
                         if args.config else {})
        opts = _merge(args, config_values, spec)
        _COMMANDS[args.command](opts, args.seed)
        return 0
    except SystemExit as exc:            # argparse --help
        return int(exc.code or 0)
    except _INPUT_ERRORS as exc:
        message = str(exc) or type(exc).__name__
        print(json.dumps({"error": type(exc).__name__, "message": message}),
              file=sys.stderr)
        return 2
    except Exception as exc:             # noqa: BLE001 - boundary of the CLI
        logger.debug("unhandled failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
