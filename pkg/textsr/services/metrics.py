"""
Metrics service
PSNR, SSIM and recognition accuracy, and the difficulty-split evaluation report
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from skimage.metrics import structural_similarity

from textsr.models.recognizer import normalize_label
from textsr.services.data import DIFFICULTIES


logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11

# ITU-R BT.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _to_unit(image):
    """
    [-1, 1] tensor -> float64 numpy array in [0, 1]
    """

    if torch.is_tensor(image):
        image = image.detach().cpu().double().numpy()

    return (np.asarray(image, dtype=np.float64) + 1.0) / 2.0


def _check_pair(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b):
    """
    Peak signal-to-noise ratio in dB over all channels
    Values in [-1, 1] are mapped to [0, 1]; identical images give 100 dB
    """

    _check_pair(a, b)

    # Mean squared error on the [0, 1] scale, peak 1
    mse = float(np.mean((_to_unit(a) - _to_unit(b)) ** 2))

    if mse == 0.0:
        return PSNR_CAP

    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def to_gray(image):
    """
    (3, H, W) array in [0, 1] -> (H, W); (H, W) passes through
    """

    if image.ndim == 2:
        return image

    if image.ndim == 3 and image.shape[0] == 3:
        return np.tensordot(np.asarray(GRAY_WEIGHTS), image, axes=1)

    raise ValueError(f"expected (3, H, W) or (H, W) image, got {image.shape}")


def ssim(a, b):
    """
    Mean SSIM on the grayscale images
    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03
    """

    _check_pair(a, b)

    gray_a = to_gray(_to_unit(a))
    gray_b = to_gray(_to_unit(b))

    if min(gray_a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {gray_a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    return float(structural_similarity(
        gray_a,
        gray_b,
        data_range=1.0,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        K1=0.01,
        K2=0.03,
    ))


def recognition_accuracy(preds, gts):
    """
    Fraction of exact matches after normalize_label
    """

    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gts)} labels")

    if not preds:
        raise ValueError("no predictions to score")

    matches = sum(normalize_label(pred) == normalize_label(gt) for pred, gt in zip(preds, gts))

    return matches / len(preds)


@dataclass
class EvalRow:
    """
    Scores of one sample under one method
    """

    sample_id: str
    split: str
    psnr: float
    ssim: float
    pred: str
    gt: str

    @property
    def match(self):
        return normalize_label(self.pred) == normalize_label(self.gt)


@dataclass
class EvalReport:
    """
    Per-sample rows of one method plus the split aggregates
    """

    method: str
    rows: list = field(default_factory=list)

    def splits(self):
        present = {row.split for row in self.rows}

        return [split for split in DIFFICULTIES if split in present] + sorted(present - set(DIFFICULTIES))

    def split_counts(self):
        return {split: sum(row.split == split for row in self.rows) for split in self.splits()}

    def accuracy(self):
        """
        Accuracy per split plus "average", the count-weighted mean of the splits
        """

        result = {}

        for split in self.splits():
            rows = [row for row in self.rows if row.split == split]
            result[split] = sum(row.match for row in rows) / len(rows)

        result["average"] = sum(row.match for row in self.rows) / len(self.rows)

        return result

    def psnr_mean(self):
        values = [row.psnr for row in self.rows if row.psnr is not None]

        return float(np.mean(values)) if values else None

    def ssim_mean(self):
        values = [row.ssim for row in self.rows if row.ssim is not None]

        return float(np.mean(values)) if values else None


def evaluate(samples, upscale, reader, method, batch_size=32, fidelity=True):
    """
    Evaluates one upscaling method

    Parameters:
    samples - PairedSamples with difficulty tags
    upscale - callable (list of PairedSample) -> tensor (B, 3, 2H, 2W)
             (row i must depend only on chunk[i], so batch_size never changes results)
    reader - object with read(images) -> list of strings
    method - report name (bicubic, sr, hr, ...)
    fidelity - compute PSNR/SSIM against HR

    Returns EvalReport
    """

    if not samples:
        raise ValueError("cannot evaluate an empty dataset")

    # Without any difficulty tag the report collapses to one split
    tagged = any(sample.difficulty != "unknown" for sample in samples)

    if not tagged:
        logger.warning("no difficulty tags found; reporting a single split")

    report = EvalReport(method)

    # Upscale and read in chunks, then score every sample on its own
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = upscale(chunk).detach().cpu()
        preds = reader.read(images)

        for sample, image, pred in zip(chunk, images, preds):
            report.rows.append(EvalRow(
                sample_id=sample.sample_id,
                split=sample.difficulty if tagged else "all",
                psnr=psnr(image, sample.hr) if fidelity else None,
                ssim=ssim(image, sample.hr) if fidelity else None,
                pred=pred,
                gt=sample.label,
            ))

    logger.info("%s: accuracy %.4f over %d samples", method, report.accuracy()["average"], len(report.rows))

    return report


def _csv_number(value):
    return "" if value is None else f"{value:.6f}"


def write_report_csv(report, path):
    """
    Writes per-sample rows with header id,split,psnr,ssim,pred,gt,match
    """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "split", "psnr", "ssim", "pred", "gt", "match"])

        for row in report.rows:
            writer.writerow([
                row.sample_id,
                row.split,
                _csv_number(row.psnr),
                _csv_number(row.ssim),
                row.pred,
                row.gt,
                int(row.match),
            ])

    return path


def format_report(reports):
    """
    Console table: accuracy per split, then PSNR and SSIM
    """

    # Split columns in first-seen order across the reports
    splits = []

    for report in reports:
        for split in report.splits():
            if split not in splits:
                splits.append(split)

    header = ["method"] + splits + ["average", "psnr", "ssim"]
    lines = [" | ".join(f"{name:>8}" for name in header)]

    for report in reports:
        accuracy = report.accuracy()
        cells = [report.method]

        for split in splits + ["average"]:
            cells.append(f"{100 * accuracy[split]:.1f}%" if split in accuracy else "-")

        psnr_mean = report.psnr_mean()
        ssim_mean = report.ssim_mean()
        cells.append("-" if psnr_mean is None else f"{psnr_mean:.2f}")
        cells.append("-" if ssim_mean is None else f"{ssim_mean:.4f}")

        lines.append(" | ".join(f"{cell:>8}" for cell in cells))

    counts = ", ".join(f"{split}={count}" for split, count in reports[0].split_counts().items())
    lines.append(f"samples: {counts}")

    return "\n".join(lines)
