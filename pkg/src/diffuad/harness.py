"""Experiment pipeline behind the ``uad`` command: generate, train, sweep, report.

Run directory layout::

    OUT/config.txt                    resolved key = value config
    OUT/data/manifest.csv             one row per image (see README for columns)
    OUT/data/<split>/<role>/NNNN.pgm  image, plus NNNN_brain.pgm / NNNN_anomaly.pgm masks
    OUT/models/<kind>.uadc            trained noise predictor per noise kind
    OUT/models/<kind>_log.csv         per-epoch training log
    OUT/sweep/cells/<method>_t<t>/    per-cell images.csv, panels/ and final/coarse/mask .uadt arrays
    OUT/sweep/sweep.csv               one row per (method, t)
    OUT/report/                       report.txt and trend plots (SVG)
"""

from __future__ import annotations

import csv
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff.serialization import load_tensor, save_tensor
from .checkpoint import load_unet
from .denoiser import UNetConfig
from .imageio import panel, read_image, read_pgm, write_pgm, write_png
from .inference import (MAP_MODES, anoddpm_reconstruct, anomaly_maps, autoddpm_reconstruct,
                        calibrate_threshold, image_score, to_metric_range)
from .metrics import FeatureExtractor, auprc, auroc, ssim
from .phantom import make_dataset, to_model_range
from .schedule import linear_schedule
from .training import TrainConfig, train, write_log

METHOD_KIND = {"anoddpm-gaussian": "gaussian", "anoddpm-simplex": "simplex", "autoddpm": "gaussian"}
DEFAULT_T_GRID = (50, 100, 150, 200, 250, 300)

SWEEP_COLUMNS = ["method", "t", "n", "mae_path_mean", "mae_path_std", "mae_healthy_mean", "mae_healthy_std",
                 "ssim_mean", "ssim_std", "perc_mean", "perc_std"] + [
                 f"{m}_{mode}" for mode in MAP_MODES for m in ("auprc", "auroc")]
IMAGE_COLUMNS = ["index", "label", "anomaly_kind", "severity", "mae", "ssim", "perc",
                 "score_mae", "score_perc", "score_product"]
MANIFEST_COLUMNS = ["path", "split", "label", "seed", "anomaly_kind", "severity", "brain_mask", "anomaly_mask"]


class HarnessError(RuntimeError):
    """A missing artifact or bad setting; the message says how to fix it."""


# --------------------------------------------------------------------- config

@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    resolution: int = 64
    n_train: int = 252
    n_val: int = 30
    n_test_healthy: int = 12
    n_test_path: int = 18
    severity_min: float = 0.6
    severity_max: float = 1.0
    # desk-scale model: trains in about 20 min on one CPU core at 64x64
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 4e-3
    ema_decay: float = 0.995
    base_channels: int = 16
    depth: int = 2
    res_blocks: int = 1
    time_dim: int = 32
    groups: int = 8
    patch: int = 2
    T: int = 1000
    augment: bool = True
    methods: tuple = tuple(METHOD_KIND)
    t_grid: tuple = DEFAULT_T_GRID
    map: str = "product"
    top_fraction: float = 0.01
    mask_threshold_q: float = 0.95
    resample_R: int = 4
    extractor_seed: int = 0

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHOD_KIND]
        if unknown or not self.methods:
            raise HarnessError(f"unknown methods {unknown}; choose from {', '.join(METHOD_KIND)}")
        if self.resolution not in (64, 128):
            raise HarnessError("resolution must be 64 or 128")
        if self.map not in MAP_MODES:
            raise HarnessError(f"map must be one of {', '.join(MAP_MODES)}")
        if not self.t_grid or any(not 0 <= t <= self.T for t in self.t_grid):
            raise HarnessError(f"t grid must be non-empty with values in [0, {self.T}]")

    @property
    def unet(self) -> UNetConfig:
        return UNetConfig(base_channels=self.base_channels, depth=self.depth, res_blocks=self.res_blocks,
                          time_dim=self.time_dim, groups=self.groups, patch=self.patch)

    def train_config(self, kind: str) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           ema_decay=self.ema_decay, seed=self.seed, noise_kind=kind, resolution=self.resolution,
                           augment=self.augment, unet=self.unet)

    def kinds(self) -> list[str]:
        return sorted({METHOD_KIND[m] for m in self.methods})


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if default and isinstance(default[0], int) else tuple(items)
        return type(default)(raw)
    except ValueError as exc:
        raise HarnessError(f"config key {name!r}: cannot parse {raw!r}") from exc


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise HarnessError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise HarnessError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, raw, known[key])
    return replace(base, **updates)


def load_config(path=None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise HarnessError(f"config file {path} not found")
        cfg = parse_config(path.read_text(), cfg)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- generate

def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def cmd_generate(cfg: RunConfig, out) -> Path:
    out = Path(out)
    data = out / "data"
    if data.exists():
        shutil.rmtree(data)
    ds = make_dataset(cfg.n_train, cfg.n_val, cfg.n_test_healthy, cfg.n_test_path, cfg.seed, cfg.resolution,
                      (cfg.severity_min, cfg.severity_max))
    rows = []
    for split_name in ("train", "val", "test"):
        split = getattr(ds, split_name)
        for i in range(len(split)):
            role = "pathological" if split.labels[i] else "healthy"
            folder = data / split_name / role
            folder.mkdir(parents=True, exist_ok=True)
            img, brain, anom = folder / f"{i:04d}.pgm", folder / f"{i:04d}_brain.pgm", folder / f"{i:04d}_anomaly.pgm"
            write_pgm(img, split.images[i])
            write_pgm(brain, split.brain_masks[i], bits=8)
            write_pgm(anom, split.anomaly_masks[i], bits=8)
            rows.append([_rel(img, data), split_name, int(split.labels[i]), int(split.seeds[i]),
                         split.kinds[i], repr(float(split.severities[i])), _rel(brain, data), _rel(anom, data)])
    with open(data / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    (out / "config.txt").write_text(format_config(cfg))
    return data / "manifest.csv"


@dataclass(eq=False)
class LoadedSplit:
    images: np.ndarray
    brain_masks: np.ndarray
    anomaly_masks: np.ndarray
    labels: np.ndarray
    kinds: list
    severities: np.ndarray


def load_split(out, split: str) -> LoadedSplit:
    data = Path(out) / "data"
    manifest = data / "manifest.csv"
    if not manifest.exists():
        raise HarnessError(f"dataset manifest {manifest} not found; run `uad generate --out {out}` first")
    with open(manifest, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["split"] == split]
    if not rows:
        raise HarnessError(f"manifest has no {split!r} images; regenerate with `uad generate --out {out}`")
    try:
        images = np.stack([read_pgm(data / r["path"]) for r in rows])
        brain = np.stack([read_pgm(data / r["brain_mask"]) > 0.5 for r in rows])
        anom = np.stack([read_pgm(data / r["anomaly_mask"]) > 0.5 for r in rows])
    except FileNotFoundError as exc:
        raise HarnessError(f"dataset file missing ({exc.filename}); rerun `uad generate --out {out}`") from exc
    return LoadedSplit(images, brain, anom, np.array([int(r["label"]) for r in rows]),
                       [r["anomaly_kind"] for r in rows], np.array([float(r["severity"]) for r in rows]))


# -------------------------------------------------------------------- train

def model_path(out, kind: str) -> Path:
    return Path(out) / "models" / f"{kind}.uadc"


def cmd_train(cfg: RunConfig, out, kinds: Optional[Sequence[str]] = None) -> dict[str, Path]:
    out = Path(out)
    train_split = load_split(out, "train")
    sched = linear_schedule(cfg.T)
    (out / "models").mkdir(parents=True, exist_ok=True)
    written = {}
    for kind in kinds or cfg.kinds():
        images = to_model_range(train_split.images, kind).astype(np.float32)
        path = model_path(out, kind)
        train(cfg.train_config(kind), images, sched, log_path=out / "models" / f"{kind}_log.csv",
              checkpoint_path=path, dump_path=out / "models" / f"{kind}_failure.npz")
        written[kind] = path
    return written


def _load_model(out, kind: str, cfg: RunConfig):
    path = model_path(out, kind)
    if not path.exists():
        raise HarnessError(f"checkpoint {path} not found; run `uad train --out {out}` first")
    model, _ = load_unet(path)
    if model.config != cfg.unet:
        raise HarnessError(f"checkpoint {path} was trained with {model.config}, config asks for {cfg.unet}; "
                           f"retrain with `uad train --out {out}`")
    return model


# -------------------------------------------------------------------- sweep

def cell_name(method: str, t: int) -> str:
    return f"{method}_t{t:04d}"


def _mean_std(values: np.ndarray) -> tuple[float, float]:
    if not len(values):
        return float("nan"), float("nan")
    return float(np.mean(values)), float(np.std(values))


def reconstruct_split(cfg: RunConfig, out, method: str, t: int, images: np.ndarray,
                      brain_masks: Optional[np.ndarray], extractor: FeatureExtractor) -> dict[str, np.ndarray]:
    """Reconstructions in [0, 1]; ``coarse`` and ``mask`` are present for AutoDDPM."""
    kind = METHOD_KIND[method]
    model = _load_model(out, kind, cfg)
    sched = linear_schedule(cfg.T)
    xm = to_model_range(images, kind).astype(np.float32)
    if method == "autoddpm":
        val = load_split(out, "val")
        thr = calibrate_threshold(model, val.images.astype(np.float32), t, sched, cfg.mask_threshold_q,
                                  cfg.seed, extractor, val.brain_masks)
        res = autoddpm_reconstruct(model, xm, t, cfg.seed, sched, threshold=thr,
                                   mask_threshold_q=cfg.mask_threshold_q, resample_R=cfg.resample_R,
                                   extractor=extractor, brain_mask=brain_masks)
        return {"final": to_metric_range(res.final, kind), "coarse": to_metric_range(res.coarse, kind),
                "mask": res.mask}
    res = anoddpm_reconstruct(model, xm, t, kind, cfg.seed, sched)
    return {"final": to_metric_range(res.final, kind)}


def run_cell(cfg: RunConfig, out, method: str, t: int) -> Path:
    """Evaluate one (method, t) cell on the test split; written atomically."""
    cells = Path(out) / "sweep" / "cells"
    final_dir = cells / cell_name(method, t)
    if final_dir.exists():
        return final_dir
    test = load_split(out, "test")
    extractor = FeatureExtractor.seeded(cfg.extractor_seed)
    x = test.images.astype(np.float32)  # the precision the model sees, so untouched pixels compare exactly
    rec = reconstruct_split(cfg, out, method, t, x, test.brain_masks, extractor)
    xhat, brain = rec["final"], test.brain_masks
    maps = {mode: anomaly_maps(x, xhat, mode, extractor, brain) for mode in MAP_MODES}
    tmp = cells / f".{cell_name(method, t)}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "panels").mkdir(parents=True)
    rows = []
    for i in range(len(x)):
        err = np.abs(x[i] - xhat[i])[brain[i]]
        scores = [image_score(maps[mode][i], cfg.top_fraction, brain[i]) for mode in MAP_MODES]
        rows.append([i, int(test.labels[i]), test.kinds[i], repr(float(test.severities[i])),
                     repr(float(err.mean())), repr(ssim(x[i], xhat[i], mask=brain[i])),
                     repr(float(maps["perc"][i][brain[i]].mean()))] + [repr(s) for s in scores])
        strip = panel(x[i], xhat[i], maps["product"][i], maps["perc"][i],
                      coarse=rec["coarse"][i] if "coarse" in rec else None)
        write_png(tmp / "panels" / f"{i:04d}.png", strip)
    for key, arr in rec.items():
        save_tensor(tmp / f"{key}.uadt", arr)
    with open(tmp / "images.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMAGE_COLUMNS)
        w.writerows(rows)
    os.replace(tmp, final_dir)
    return final_dir


def load_cell_arrays(out, method: str, t: int) -> dict[str, np.ndarray]:
    """Stored reconstructions of a finished cell: ``final`` plus ``coarse``/``mask`` for AutoDDPM."""
    cell = Path(out) / "sweep" / "cells" / cell_name(method, t)
    if not cell.exists():
        raise HarnessError(f"sweep cell {cell} not found; run `uad sweep --out {out}` first")
    arrays = {p.stem: load_tensor(p) for p in sorted(cell.glob("*.uadt"))}
    if "mask" in arrays:
        arrays["mask"] = arrays["mask"] > 0.5
    return arrays


def summarize_cell(method: str, t: int, cell_dir: Path) -> dict:
    with open(cell_dir / "images.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows])
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    mae_v = col("mae")
    out = {"method": method, "t": t, "n": len(rows)}
    out["mae_path_mean"], out["mae_path_std"] = _mean_std(mae_v[labels == 1])
    out["mae_healthy_mean"], out["mae_healthy_std"] = _mean_std(mae_v[labels == 0])
    out["ssim_mean"], out["ssim_std"] = _mean_std(col("ssim"))
    out["perc_mean"], out["perc_std"] = _mean_std(col("perc"))
    both = labels.min() == 0 and labels.max() == 1
    for mode in MAP_MODES:
        s = col(f"score_{mode}")
        out[f"auprc_{mode}"] = auprc(s, labels) if labels.any() else float("nan")
        out[f"auroc_{mode}"] = auroc(s, labels) if both else float("nan")
    return out


def _threads() -> int:
    raw = os.environ.get("UAD_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise HarnessError(f"UAD_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise HarnessError(f"UAD_THREADS must be a positive integer, got {raw!r}")
    return n


def _run_cell_job(args) -> str:
    cfg, out, method, t = args
    return str(run_cell(cfg, out, method, t))


def cmd_sweep(cfg: RunConfig, out) -> Path:
    """Evaluate every (method, t) cell, skipping cells already on disk."""
    out = Path(out)
    load_split(out, "test")
    for method in cfg.methods:
        _load_model(out, METHOD_KIND[method], cfg)
    jobs = [(cfg, out, m, t) for m in cfg.methods for t in cfg.t_grid]
    todo = [j for j in jobs if not (out / "sweep" / "cells" / cell_name(j[2], j[3])).exists()]
    workers = min(_threads(), len(todo)) if todo else 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_cell_job, todo))
    else:
        for job in todo:
            _run_cell_job(job)
    rows = [summarize_cell(m, t, out / "sweep" / "cells" / cell_name(m, t)) for _, _, m, t in jobs]
    path = out / "sweep" / "sweep.csv"
    write_sweep_csv(path, rows)
    return path


def write_sweep_csv(path, rows: list[dict]) -> None:
    tmp = Path(path).with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c in ("method", "t", "n") else repr(float(r[c])) for c in SWEEP_COLUMNS])
    os.replace(tmp, path)


def read_sweep_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise HarnessError(f"sweep results {path} not found; run `uad sweep` first")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("method", "t") if c not in (reader.fieldnames or [])]
        if missing:
            raise HarnessError(f"{path} lacks columns {missing}")
        rows = []
        for r in reader:
            row = {"method": r["method"], "t": int(r["t"])}
            for k, v in r.items():
                if k not in ("method", "t"):
                    row[k] = float(v) if v not in ("", None) else float("nan")
            rows.append(row)
    return rows


# ---------------------------------------------------------------- reconstruct

def cmd_reconstruct(cfg: RunConfig, out, image, method: str, t: int, mask=None) -> Path:
    """Reconstruct one image file and write its panel and reconstruction."""
    if method not in METHOD_KIND:
        raise HarnessError(f"unknown method {method!r}; choose from {', '.join(METHOD_KIND)}")
    image = Path(image)
    if not image.exists():
        raise HarnessError(f"image {image} not found")
    x = read_image(image).astype(np.float32)
    brain = read_image(mask) > 0.5 if mask is not None else None
    extractor = FeatureExtractor.seeded(cfg.extractor_seed)
    rec = reconstruct_split(cfg, out, method, t, x[None], None if brain is None else brain[None], extractor)
    xhat = rec["final"][0]
    prod = anomaly_maps(x, xhat, "product", extractor, brain)
    perc = anomaly_maps(x, xhat, "perc", extractor, brain)
    dest = Path(out) / "reconstruct"
    dest.mkdir(parents=True, exist_ok=True)
    stem = f"{image.stem}_{method}_t{t}"
    strip = panel(x, xhat, prod, perc, coarse=rec["coarse"][0] if "coarse" in rec else None)
    write_png(dest / f"{stem}_panel.png", strip)
    write_pgm(dest / f"{stem}_panel.pgm", strip)
    write_pgm(dest / f"{stem}_recon.pgm", xhat)
    return dest / f"{stem}_panel.png"


# -------------------------------------------------------------------- report

def _pm(row: dict, key: str) -> str:
    return f"{row[key + '_mean']:.4f}±{row[key + '_std']:.4f}"


def format_report(rows: list[dict], map_mode: str = "product") -> str:
    header = ["method", "t", "MAE path", "MAE healthy", "SSIM", "PERC", f"AUPRC {map_mode}", f"AUROC {map_mode}"]
    body = [[r["method"], str(r["t"]), _pm(r, "mae_path"), _pm(r, "mae_healthy"), _pm(r, "ssim"), _pm(r, "perc"),
             f"{100 * r[f'auprc_{map_mode}']:.1f}", f"{100 * r[f'auroc_{map_mode}']:.1f}"] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


def _plot(rows: list[dict], key: str, ylabel: str, path: Path, scale: float = 1.0) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "uad"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in dict.fromkeys(r["method"] for r in rows):
        pts = sorted((r["t"], scale * r[key]) for r in rows if r["method"] == method)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel("noise level t")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(sweep_csv, out=None, map_mode: str = "product") -> str:
    if map_mode not in MAP_MODES:
        raise HarnessError(f"map must be one of {', '.join(MAP_MODES)}")
    rows = read_sweep_csv(sweep_csv)
    text = format_report(rows, map_mode)
    dest = Path(out) / "report" if out is not None else Path(sweep_csv).parent / "report"
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "report.txt").write_text(text)
    _plot(rows, f"auroc_{map_mode}", f"AUROC ({map_mode}) x100", dest / "auroc_vs_t.svg", 100.0)
    _plot(rows, f"auprc_{map_mode}", f"AUPRC ({map_mode}) x100", dest / "auprc_vs_t.svg", 100.0)
    _plot(rows, "mae_healthy_mean", "healthy MAE", dest / "mae_vs_t.svg")
    return text
