"""Dice, Hausdorff distance and timed dataset evaluation."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import ndimage

FOREGROUND = (1, 2)
_CROSS = ndimage.generate_binary_structure(2, 1)


def _binary(pred, gt, cls):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred == cls, gt == cls


def dsc(pred, gt, cls: int) -> float:
    """2|P & G| / (|P| + |G|) for class ``cls``; 1.0 when both are empty."""
    p, g = _binary(pred, gt, cls)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the region (image border counts as outside)."""
    region = region.astype(bool)
    return region & ~ndimage.binary_erosion(region, structure=_CROSS, border_value=0)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` boundary pixel to the nearest ``dst`` boundary pixel."""
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hausdorff_distance(pred, gt, cls: int, percentile: float | None = None, flags: list | None = None) -> float:
    """Symmetric Hausdorff distance in pixels between the class-``cls`` boundaries.

    One region empty: returns the image diagonal. Both empty: returns 0.
    Either case appends a notice to ``flags`` when given. With ``percentile``
    (e.g. 95) the given percentile of the pooled directed distances is used
    instead of the maximum.
    """
    p, g = _binary(pred, gt, cls)
    bp, bg = boundary(p), boundary(g)
    if not bp.any() or not bg.any():
        if bp.any() or bg.any():
            if flags is not None:
                flags.append(f"class {cls}: one region empty, HD set to image diagonal")
            h, w = p.shape
            return math.sqrt(h * h + w * w)
        if flags is not None:
            flags.append(f"class {cls}: both regions empty, HD set to 0")
        return 0.0
    d_pg, d_gp = _directed(bp, bg), _directed(bg, bp)
    if percentile is not None:
        return float(np.percentile(np.concatenate([d_pg, d_gp]), percentile))
    return float(max(d_pg.max(), d_gp.max()))


def hausdorff_brute_force(pred, gt, cls: int) -> float:
    """All-pairs reference for :func:`hausdorff_distance`."""
    p, g = _binary(pred, gt, cls)
    a = np.argwhere(boundary(p)).astype(np.float64)
    b = np.argwhere(boundary(g)).astype(np.float64)
    if len(a) == 0 or len(b) == 0:
        if len(a) or len(b):
            return math.sqrt(p.shape[0] ** 2 + p.shape[1] ** 2)
        return 0.0
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


@dataclass
class SampleMetrics:
    id: str
    dsc_class1: float
    dsc_class2: float
    hd_class1: float
    hd_class2: float
    infer_ms: float


@dataclass
class EvalResult:
    per_sample: list[SampleMetrics] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def write_csv(self, path) -> None:
        cols = ["id", "dsc_class1", "dsc_class2", "hd_class1", "hd_class2", "infer_ms"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for s in self.per_sample:
                writer.writerow([getattr(s, c) for c in cols])
            a = self.aggregate
            writer.writerow(["mean", a["mean_dsc_class1"], a["mean_dsc_class2"],
                             a["mean_hd_class1"], a["mean_hd_class2"], a["mean_infer_ms"]])


def summarize(per_sample: list[SampleMetrics], flags=None) -> EvalResult:
    if not per_sample:
        raise ValueError("no samples to summarize")
    cols = {k: np.array([getattr(s, k) for s in per_sample], dtype=np.float64)
            for k in ("dsc_class1", "dsc_class2", "hd_class1", "hd_class2", "infer_ms")}
    aggregate = {
        "mean_dsc": float(np.mean(np.concatenate([cols["dsc_class1"], cols["dsc_class2"]]))),
        "mean_hd": float(np.mean(np.concatenate([cols["hd_class1"], cols["hd_class2"]]))),
        "mean_infer_ms": float(cols["infer_ms"].mean()),
        "mean_dsc_class1": float(cols["dsc_class1"].mean()),
        "mean_dsc_class2": float(cols["dsc_class2"].mean()),
        "mean_hd_class1": float(cols["hd_class1"].mean()),
        "mean_hd_class2": float(cols["hd_class2"].mean()),
        "num_samples": len(per_sample),
    }
    return EvalResult(per_sample=list(per_sample), aggregate=aggregate, flags=list(flags or []))


def sample_metrics(sample_id, pred, gt, infer_ms, percentile=None, flags=None) -> SampleMetrics:
    local = []
    hd = [hausdorff_distance(pred, gt, c, percentile, local) for c in FOREGROUND]
    if flags is not None:
        flags.extend(f"{sample_id}: {msg}" for msg in local)
    return SampleMetrics(
        id=sample_id,
        dsc_class1=dsc(pred, gt, 1),
        dsc_class2=dsc(pred, gt, 2),
        hd_class1=hd[0],
        hd_class2=hd[1],
        infer_ms=infer_ms,
    )


@torch.no_grad()
def predict_mask(model, image: np.ndarray) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(image[None]).to(dtype)
    logits, _ = model(x, with_representation=False)
    return logits.argmax(dim=1)[0].numpy().astype(np.uint8)


def evaluate_dataset(model, samples, percentile: float | None = None) -> EvalResult:
    """Per-sample DSC/HD for classes 1 and 2, with single-image forward time in ms.

    The model is put in evaluation mode and restored afterwards. One untimed
    warm-up forward keeps first-call allocation out of the timings.
    """
    if not samples:
        raise ValueError("evaluate_dataset needs at least one sample")
    was_training = model.training
    model.eval()
    flags: list[str] = []
    rows = []
    try:
        predict_mask(model, samples[0].image)
        for s in samples:
            start = time.perf_counter()
            pred = predict_mask(model, s.image)
            infer_ms = (time.perf_counter() - start) * 1000.0
            rows.append(sample_metrics(s.id, pred, s.mask, infer_ms, percentile, flags))
    finally:
        model.train(was_training)
    return summarize(rows, flags)
