"""Evaluation: self-ensemble inference, metric tables, ablation driver, plots."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .checkpoint import checkpoint_hash, load_restorer
from .config import VARIANTS, ExperimentConfig
from .datapipe import CLEAN_DIR, DEGRADED_DIR, list_images, load_paired
from .imagecore import fold_transforms, psnr, read_image, ssim, to_array, to_tensor, write_image
from .prompt import fold_average

log = logging.getLogger(__name__)


@torch.no_grad()
def self_ensemble_infer(r, y, n: int = 1) -> torch.Tensor:
    """Mean of ``n`` dihedral-transformed restorations, each mapped back first.

    Uses the same nested transform sets as prompt ensembling; ``n = 1`` is a
    plain forward pass.
    """
    transforms = fold_transforms(n)
    if n == 1:
        return r(y)
    return fold_average(r, y, transforms)


@dataclass
class MetricsRow:
    dataset: str
    method: str
    psnr: float
    ssim: float
    n_images: int
    checkpoint_hash: str = ""
    config_hash: str = ""


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)
    per_image: list = field(default_factory=list)

    COLUMNS = ("dataset", "method", "psnr", "ssim", "n_images", "checkpoint_hash", "config_hash")

    def add(self, row: MetricsRow) -> None:
        if not -1.0 <= row.ssim <= 1.0:
            raise ValueError(f"SSIM {row.ssim} outside [-1, 1]")
        if not np.isfinite(row.psnr):
            raise ValueError(f"non-finite PSNR {row.psnr}")
        self.rows.append(row)

    def to_text(self) -> str:
        lines = [f"{'dataset':<12} {'method':<10} {'PSNR':>8} {'SSIM':>7} {'n':>4}  checkpoint        config"]
        for r in self.rows:
            lines.append(f"{r.dataset:<12} {r.method:<10} {r.psnr:8.3f} {r.ssim:7.4f} {r.n_images:4d}  "
                         f"{r.checkpoint_hash:<16}  {r.config_hash}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS)
        w.writeheader()
        for r in self.rows:
            w.writerow(asdict(r))
        return buf.getvalue()

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(self.to_csv())
        (out_dir / "metrics.json").write_text(json.dumps(
            {"rows": [asdict(r) for r in self.rows], "per_image": self.per_image}, indent=2))
        return out_dir


def is_unpaired_layout(root) -> bool:
    root = Path(root)
    return (root / CLEAN_DIR).is_dir() and (root / DEGRADED_DIR).is_dir()


@torch.no_grad()
def evaluate_pairs(restorer, pairs, folds: int = 1, device=None) -> tuple:
    """Mean PSNR/SSIM over aligned ``(clean, degraded)`` arrays and a per-image list."""
    device = device or torch.device("cpu")
    per = []
    for i, (clean, deg) in enumerate(pairs):
        c = to_tensor(clean)
        out = self_ensemble_infer(restorer, to_tensor(deg).unsqueeze(0).to(device), folds)[0].cpu()
        per.append({"index": i, "psnr": psnr(out, c), "ssim": float(ssim(out.double(), c.double()))})
    return (float(np.mean([p["psnr"] for p in per])),
            float(np.mean([p["ssim"] for p in per])), per)


def evaluate_checkpoint(checkpoint, data_dir, paired: bool = True, folds: int = 1,
                        out_dir=None, method: str = "", device=None) -> MetricsTable:
    """Metrics of a checkpoint's restorer on a dataset directory.

    Paired mode needs ``clean/`` and ``degraded/`` subdirectories with matching
    names. Without ``paired`` the restorations of ``data_dir``'s images are
    written to ``out_dir`` and the returned table is empty.
    """
    data_dir = Path(data_dir)
    restorer, _, cfg_hash = load_restorer(checkpoint, device)
    table = MetricsTable()
    if paired:
        if not ((data_dir / "clean").is_dir() and (data_dir / "degraded").is_dir()):
            kind = "an unpaired dataset" if is_unpaired_layout(data_dir) else "not a paired dataset"
            raise ValueError(f"{data_dir} is {kind}; paired evaluation needs aligned clean references")
        pairs = load_paired(data_dir)
        p, s, per = evaluate_pairs(restorer, pairs, folds, device)
        method = method or (f"SE{folds}" if folds > 1 else "restorer")
        table.add(MetricsRow(data_dir.name, method, p, s, len(pairs), checkpoint_hash(checkpoint), cfg_hash))
        table.per_image = per
        return table
    if out_dir is None:
        raise ValueError("unpaired evaluation needs an output directory for restorations")
    src = data_dir
    for sub in (DEGRADED_DIR, "degraded"):
        if (data_dir / sub).is_dir():
            src = data_dir / sub
            break
    for path in list_images(src):
        y = to_tensor(read_image(path)).unsqueeze(0)
        if device is not None:
            y = y.to(device)
        out = self_ensemble_infer(restorer, y, folds)[0].cpu()
        write_image(Path(out_dir) / path.name, to_array(out), bits=16)
    return table


# ---------------------------------------------------------------------------
# Ablation


def run_ablation(config: ExperimentConfig, variants=None, data=None) -> MetricsTable:
    """Train each variant's basic stage from the same seed; rows in V1..V5 order."""
    from .trainer import TrainData, train

    names = [v for v in VARIANTS if v in (variants or config.variants)]
    data = data or TrainData.from_config(config)
    if not data.val:
        raise ValueError("ablation needs a paired validation set (data.val_root)")
    table = MetricsTable()
    for name in names:
        cfg = config.replace(ablation=VARIANTS[name], output_dir=str(Path(config.output_dir) / name))
        result = train(cfg, data=data, stages=("basic",))
        pairs = [(to_array(c), to_array(d)) for c, d in data.val]
        p, s, _ = evaluate_pairs(result.state.restorer, pairs, 1, result.state.device)
        ck = checkpoint_hash(result.final_checkpoint) if result.final_checkpoint else ""
        table.add(MetricsRow(Path(config.data.val_root or "val").name, name, p, s, len(pairs), ck, cfg.hash()))
        log.info("ablation %s: psnr %.3f ssim %.4f", name, p, s)
    psnrs = [r.psnr for r in table.rows]
    monotone = all(a <= b for a, b in zip(psnrs, psnrs[1:]))
    log.info("ablation monotone trend over %s: %s", names, "yes" if monotone else "no")
    return table


# ---------------------------------------------------------------------------
# Plots


def plot_round_curve(curve, path) -> Path:
    """PSNR against round (basic end, SC rounds, Reb-SC rounds) as a static image."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [label for label, _ in curve]
    values = [v for _, v in curve]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(values)), values, marker="o")
    ax.set_xticks(range(len(values)), labels, rotation=45)
    ax.set_xlabel("round")
    ax.set_ylabel("validation PSNR (dB)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
