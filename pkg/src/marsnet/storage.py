"""File formats. Everything here is byte-deterministic for equal inputs.

  * footprints / field plots: plain CSV with documented headers
  * calibration: a small key = value text file
  * rasters: float32 TIFF with projection tags, the grid geometry as a JSON
    ImageDescription, nodata written as NaN across all bands, and band names
    in a sidecar `<stem>.bands.txt` (one per line)
  * patch datasets: a directory of raw float32/uint8 blocks plus a
    manifest.json recording shapes, band names, normalization statistics,
    and split membership
  * checkpoints: a directory with params.bin (a small container format:
    magic, JSON tensor index, raw little-endian payload), config.json,
    norm_stats.json, and history.json (history is a log with wall-clock
    timings; it is excluded from any byte-identity comparison)

Floats are serialized with repr (shortest round-trip form) so equal values
always produce equal bytes.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile

from .gedi import RH_LEVELS, CalibrationModel, FieldPlot, FootprintRecord
from .metrics import HistogramTable, MetricsReport
from .patches import NormStats, PatchSample
from .rasters import MODALITY_ORDER, GridGeometry, ModalityStack, Raster, assemble_stacks

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b"MRSNETP1"

FOOTPRINT_COLUMNS = (
    ["id", "lon", "lat"] + [f"rh{l}" for l in RH_LEVELS]
    + ["sensitivity", "cover", "beam", "quality_ok", "degraded", "daytime", "month"])

PLOT_COLUMNS = ["id", "lon", "lat", "matched_footprint_id", "tree_heights"]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _open_csv_writer(path):
    handle = open(path, "w", newline="")
    return handle, csv.writer(handle, lineterminator="\n")


# ---------------------------------------------------------------------------
# footprints and plots


def write_footprints_csv(path, records) -> None:
    handle, writer = _open_csv_writer(path)
    with handle:
        writer.writerow(FOOTPRINT_COLUMNS)
        for r in records:
            writer.writerow(
                [r.footprint_id, _cell(r.lon), _cell(r.lat)]
                + [_cell(float(r.rh[l])) for l in RH_LEVELS]
                + [_cell(float(r.sensitivity)), _cell(float(r.canopy_cover)), r.beam,
                   _cell(r.quality_ok), _cell(r.degraded), _cell(r.daytime),
                   str(r.acquired_month)])


def read_footprints_csv(path) -> list[FootprintRecord]:
    records = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in FOOTPRINT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing footprint columns {missing}")
        for row in reader:
            records.append(FootprintRecord(
                footprint_id=row["id"],
                lon=float(row["lon"]), lat=float(row["lat"]),
                rh={l: float(row[f"rh{l}"]) for l in RH_LEVELS},
                sensitivity=float(row["sensitivity"]),
                canopy_cover=float(row["cover"]),
                beam=row["beam"],
                quality_ok=row["quality_ok"] == "1",
                degraded=row["degraded"] == "1",
                daytime=row["daytime"] == "1",
                acquired_month=int(row["month"])))
    return records


def write_plots_csv(path, plots) -> None:
    handle, writer = _open_csv_writer(path)
    with handle:
        writer.writerow(PLOT_COLUMNS)
        for p in plots:
            writer.writerow([
                p.plot_id, _cell(p.lon), _cell(p.lat),
                p.matched_footprint_id or "",
                ";".join(repr(float(h)) for h in p.tree_heights)])


def read_plots_csv(path) -> list[FieldPlot]:
    plots = []
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in PLOT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing plot columns {missing}")
        for row in reader:
            plots.append(FieldPlot(
                plot_id=row["id"],
                lon=float(row["lon"]), lat=float(row["lat"]),
                tree_heights=[float(h) for h in row["tree_heights"].split(";") if h],
                matched_footprint_id=row["matched_footprint_id"] or None))
    return plots


# ---------------------------------------------------------------------------
# calibration


def write_calibration(path, model: CalibrationModel) -> None:
    lines = [f"{k} = {_cell(v)}" for k, v in model.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration(path) -> CalibrationModel:
    values: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed calibration line '{line}'")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    try:
        return CalibrationModel(
            slope=float(values["slope"]),
            intercept=float(values["intercept"]),
            r2=float(values["r2"]) if values.get("r2") else None,
            rrmse_pct=float(values["rrmse_pct"]) if values.get("rrmse_pct") else None,
            n=int(values["n"]))
    except KeyError as exc:
        raise ValueError(f"{path}: calibration file is missing {exc}") from exc


# ---------------------------------------------------------------------------
# rasters


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".bands.txt")


def write_raster(path, raster: Raster, band_names=None) -> None:
    """Float32 TIFF with projection tags; nodata pixels become NaN."""
    path = Path(path)
    data = raster.data.astype(np.float32).copy()
    data[:, raster.nodata] = np.nan
    geom = raster.geometry
    description = json.dumps({"geometry": geom.to_dict()}, sort_keys=True)
    extratags = [
        (33550, "d", 3, (geom.pixel_size, geom.pixel_size, 0.0)),        # pixel scale
        (33922, "d", 6, (0.0, 0.0, 0.0, geom.origin_x, geom.origin_y, 0.0)),  # tiepoint
    ]
    tifffile.imwrite(
        path, data, photometric="minisblack", software=None, metadata=None,
        description=description, extratags=extratags)
    if band_names is not None:
        if len(band_names) != raster.bands:
            raise ValueError(f"{len(band_names)} band names for {raster.bands} bands")
        _sidecar(path).write_text("\n".join(band_names) + "\n")


def read_raster(path):
    """Returns (raster, band_names or None)."""
    path = Path(path)
    with tifffile.TiffFile(path) as tif:
        data = tif.asarray()
        description = tif.pages[0].description
    if data.ndim == 2:
        data = data[None]
    try:
        geom = GridGeometry.from_dict(json.loads(description)["geometry"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: no grid geometry in the TIFF description") from exc
    nodata = np.all(~np.isfinite(data), axis=0)
    names = None
    sidecar = _sidecar(path)
    if sidecar.exists():
        names = [line for line in sidecar.read_text().splitlines() if line]
    return Raster(geom, data.astype(np.float64), nodata), names


def save_stack_dir(directory, stacks: dict[str, ModalityStack]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": 1, "modalities": [], "band_counts": {}}
    for name in MODALITY_ORDER:
        if name not in stacks:
            continue
        stack = stacks[name]
        write_raster(directory / f"{name}.tif", stack.raster, stack.band_names)
        manifest["modalities"].append(name)
        manifest["band_counts"][name] = stack.raster.bands
    manifest["geometry"] = stacks[manifest["modalities"][0]].raster.geometry.to_dict()
    (directory / "stack_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_stack_dir(directory) -> dict[str, ModalityStack]:
    directory = Path(directory)
    manifest_path = directory / "stack_manifest.json"
    if manifest_path.exists():
        modalities = json.loads(manifest_path.read_text())["modalities"]
    else:
        modalities = [m for m in MODALITY_ORDER if (directory / f"{m}.tif").exists()]
    if not modalities:
        raise FileNotFoundError(f"no modality rasters found in {directory}")
    rasters = {}
    names = {}
    for m in modalities:
        raster, band_names = read_raster(directory / f"{m}.tif")
        if band_names is None:
            raise ValueError(f"{directory / f'{m}.tif'} has no band-name sidecar")
        rasters[m] = raster
        names[m] = band_names
    return assemble_stacks(rasters, names)


# ---------------------------------------------------------------------------
# patch datasets


@dataclass
class PatchDataset:
    splits: dict[str, list[PatchSample]]
    stats: NormStats
    band_names: dict[str, list[str]]
    geometry: GridGeometry
    patch_size: int
    standardized: bool


def save_patch_dataset(directory, splits: dict[str, list[PatchSample]],
                       stats: NormStats, band_names: dict[str, list[str]],
                       geometry: GridGeometry, patch_size: int,
                       standardized: bool = True) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    modalities = list(band_names)
    manifest = {
        "format_version": 1,
        "patch_size": patch_size,
        "dtype": "float32",
        "standardized": standardized,
        "modalities": modalities,
        "band_names": band_names,
        "normalization": stats.to_dict(),
        "geometry": geometry.to_dict(),
        "splits": {},
    }
    for split, samples in splits.items():
        manifest["splits"][split] = {
            "count": len(samples),
            "origins": [list(s.patch_origin) for s in samples],
            "infill_values": [
                {m: s.infill_values.get(m, 0) for m in modalities} for s in samples],
        }
        for m in modalities:
            block = (np.stack([s.inputs[m] for s in samples]).astype(np.float32)
                     if samples else np.empty((0,), dtype=np.float32))
            (directory / f"{split}.{m}.bin").write_bytes(block.tobytes())
        labels = (np.stack([s.label for s in samples]).astype(np.float32)
                  if samples else np.empty((0,), dtype=np.float32))
        masks = (np.stack([s.mask for s in samples]).astype(np.uint8)
                 if samples else np.empty((0,), dtype=np.uint8))
        (directory / f"{split}.label.bin").write_bytes(labels.tobytes())
        (directory / f"{split}.mask.bin").write_bytes(masks.tobytes())
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    logger.info("saved patch dataset to %s (%s)", directory,
                ", ".join(f"{k}={len(v)}" for k, v in splits.items()))


def load_patch_dataset(directory) -> PatchDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    patch = int(manifest["patch_size"])
    modalities = manifest["modalities"]
    band_names = manifest["band_names"]
    splits: dict[str, list[PatchSample]] = {}
    for split, info in manifest["splits"].items():
        n = int(info["count"])
        blocks = {}
        for m in modalities:
            bands = len(band_names[m])
            raw = (directory / f"{split}.{m}.bin").read_bytes()
            blocks[m] = np.frombuffer(raw, dtype=np.float32).reshape(n, bands, patch, patch)
        labels = np.frombuffer((directory / f"{split}.label.bin").read_bytes(),
                               dtype=np.float32).reshape(n, 1, patch, patch)
        masks = np.frombuffer((directory / f"{split}.mask.bin").read_bytes(),
                              dtype=np.uint8).reshape(n, 1, patch, patch).astype(bool)
        samples = []
        for i in range(n):
            samples.append(PatchSample(
                inputs={m: blocks[m][i].copy() for m in modalities},
                label=labels[i].copy(),
                mask=masks[i].copy(),
                patch_origin=tuple(info["origins"][i]),
                infill_values=dict(info["infill_values"][i])))
        splits[split] = samples
    return PatchDataset(
        splits=splits,
        stats=NormStats.from_dict(manifest["normalization"]),
        band_names=band_names,
        geometry=GridGeometry.from_dict(manifest["geometry"]),
        patch_size=patch,
        standardized=bool(manifest["standardized"]))


# ---------------------------------------------------------------------------
# checkpoints


def write_param_container(path, state: dict) -> None:
    """params.bin: MAGIC + uint64 header length + JSON index + raw payload."""
    entries = []
    payload = bytearray()
    for name, tensor in state.items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": len(payload),
                        "nbytes": len(raw)})
        payload += raw
    header = json.dumps({"format_version": 1, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as handle:
        handle.write(PARAMS_MAGIC)
        handle.write(struct.pack("<Q", len(header)))
        handle.write(header)
        handle.write(payload)


def read_param_container(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != PARAMS_MAGIC:
        raise ValueError(f"{path} is not a parameter container")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + header_len].decode())
    payload = raw[16 + header_len:]
    out = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1,
                            offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


@dataclass
class CheckpointBundle:
    model: object
    model_config: object
    stats: NormStats
    train_config: object | None
    history: dict | None


def save_checkpoint(directory, model, stats: NormStats, train_config=None,
                    history=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {
        "format_version": 1,
        "model": model.config.to_dict(),
        "train": train_config.to_dict() if train_config is not None else None,
    }
    (directory / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
    (directory / "norm_stats.json").write_text(
        json.dumps(stats.to_dict(), sort_keys=True, indent=2) + "\n")
    write_param_container(directory / "params.bin", model.state_dict())
    if history is not None:
        payload = history.to_dict() if hasattr(history, "to_dict") else dict(history)
        (directory / "history.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n")
    logger.info("saved checkpoint to %s", directory)


def load_checkpoint(directory) -> CheckpointBundle:
    import torch

    from .model import ModelConfig, build_model
    from .train import TrainConfig

    directory = Path(directory)
    config = json.loads((directory / "config.json").read_text())
    if config.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {config.get('format_version')}")
    model_config = ModelConfig.from_dict(config["model"])
    model = build_model(model_config)
    arrays = read_param_container(directory / "params.bin")
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    stats = NormStats.from_dict(json.loads((directory / "norm_stats.json").read_text()))
    train_config = TrainConfig.from_dict(config["train"]) if config.get("train") else None
    history_path = directory / "history.json"
    history = json.loads(history_path.read_text()) if history_path.exists() else None
    return CheckpointBundle(model=model, model_config=model_config, stats=stats,
                            train_config=train_config, history=history)


# ---------------------------------------------------------------------------
# report tables


REPORT_COLUMNS = ("n", "rmse", "r2", "rrmse_pct", "slope", "intercept", "conventional_r2")


def write_report_csv(path, report: MetricsReport, extra: dict | None = None) -> None:
    extra = extra or {}
    handle, writer = _open_csv_writer(path)
    with handle:
        writer.writerow(list(REPORT_COLUMNS) + list(extra))
        row = [_cell(getattr(report, c)) for c in REPORT_COLUMNS]
        writer.writerow(row + [_cell(v) for v in extra.values()])


def write_ablation_csv(path, rows) -> None:
    handle, writer = _open_csv_writer(path)
    with handle:
        writer.writerow(["name", "failed", "error", "n", "rmse", "r2",
                         "rrmse_pct", "conventional_r2", "split_fingerprint"])
        for row in rows:
            rep = row.report
            writer.writerow([
                row.name, _cell(row.failed), row.error or "",
                _cell(rep.n if rep else None), _cell(rep.rmse if rep else None),
                _cell(rep.r2 if rep else None), _cell(rep.rrmse_pct if rep else None),
                _cell(rep.conventional_r2 if rep else None), row.split_fingerprint])


def write_rh_table_csv(path, table) -> None:
    handle, writer = _open_csv_writer(path)
    with handle:
        writer.writerow(["rh_level", "statistic", "n", "r2", "rrmse_pct", "short_plots"])
        for statistic in table.statistics:
            short = ";".join(table.short_plots.get(statistic, []))
            for level in table.levels:
                cell = table.cells[(level, statistic)]
                writer.writerow([level, statistic, cell.n, _cell(cell.r2),
                                 _cell(cell.rrmse_pct), short])


def write_histogram_csv(path, table: HistogramTable) -> None:
    handle, writer = _open_csv_writer(path)
    with handle:
        writer.writerow(["bin_low", "bin_high",
                         f"count_{table.label_a}", f"count_{table.label_b}"])
        for i in range(table.counts_a.size):
            writer.writerow([_cell(float(table.bin_edges[i])),
                             _cell(float(table.bin_edges[i + 1])),
                             int(table.counts_a[i]), int(table.counts_b[i])])


def write_drop_report_csv(path, dropped) -> None:
    handle, writer = _open_csv_writer(path)
    with handle:
        writer.writerow(["footprint_id", "stage"])
        for footprint_id, stage in dropped:
            writer.writerow([footprint_id, stage])
