"""Overlap metrics, Hausdorff distance, reports and mask post-processing."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .tensor import ShapeError

# 6-neighbourhood for boundary extraction, 26-neighbourhood for components/closing
FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)
FULL_STRUCTURE = ndimage.generate_binary_structure(3, 3)

DEFAULT_HD_VARIANT = "HD95"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask must be binary (0/1)")
        arr = arr.astype(bool)
    return arr


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _binary(pred), _binary(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def overlap_metrics(c: ConfusionCounts) -> tuple:
    """``(dice, recall, precision)``.

    A zero denominator yields 1.0 when both masks are empty and 0.0 otherwise.
    """
    both_empty = c.tp == 0 and c.fp == 0 and c.fn == 0
    fallback = 1.0 if both_empty else 0.0

    def ratio(num, den):
        return num / den if den > 0 else fallback

    return (ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn), ratio(c.tp, c.tp + c.fn), ratio(c.tp, c.tp + c.fp))


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one face neighbour outside the mask (or the grid)."""
    m = _binary(mask)
    return m & ~ndimage.binary_erosion(m, structure=FACE_STRUCTURE, border_value=0)


def boundary_points(mask, spacing: Sequence[float]) -> np.ndarray:
    return np.argwhere(boundary(mask)) * np.asarray(spacing, dtype=np.float64)


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each point of ``src`` to its nearest neighbour in ``dst``."""
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def hausdorff_distance(a, b, spacing: Sequence[float] = (1.0, 1.0, 1.0), percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance in mm between mask boundaries.

    The result is ``max(P(d(A->B)), P(d(B->A)))`` where ``P`` is the given
    percentile (linear interpolation) of the directed nearest-boundary
    distances. ``percentile=100`` is the classic Hausdorff distance, 95 is HD95.
    """
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    am, bm = _binary(a), _binary(b)
    if am.shape != bm.shape:
        raise ShapeError(f"mask shapes differ: {am.shape} vs {bm.shape}")
    if not am.any() or not bm.any():
        raise ValueError("Hausdorff distance is undefined for an empty mask")
    pa, pb = boundary_points(am, spacing), boundary_points(bm, spacing)
    dab, dba = directed_distances(pa, pb), directed_distances(pb, pa)
    if percentile == 100.0:
        return float(max(dab.max(), dba.max()))
    return float(max(np.percentile(dab, percentile), np.percentile(dba, percentile)))


@dataclass
class MetricsReport:
    """Metrics for one prediction/truth pair, or a mean over several."""

    dice: float
    recall: float
    precision: float
    hd_mm: float
    hd95_mm: float
    tp: int
    fp: int
    fn: int
    tn: int
    hausdorff_variant: str = DEFAULT_HD_VARIANT
    n_samples: int = 1

    @property
    def counts(self) -> ConfusionCounts:
        return ConfusionCounts(self.tp, self.fp, self.fn, self.tn)

    @property
    def hausdorff_mm(self) -> float:
        return self.hd95_mm if self.hausdorff_variant == "HD95" else self.hd_mm

    def as_dict(self) -> dict:
        d = asdict(self)
        d["hausdorff_mm"] = self.hausdorff_mm
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.as_dict().items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        kw = {}
        for name in cls.__dataclass_fields__:
            if name in d:
                v = d[name]
                kw[name] = float("nan") if v is None else v
        for name in ("tp", "fp", "fn", "tn", "n_samples"):
            if name in kw:
                kw[name] = int(kw[name])
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        d = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                d[k.strip()] = v.strip()
        out = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in d:
                continue
            v = d[name]
            out[name] = v if f.type in ("str", str) else (int(v) if f.type in ("int", int) else float(v))
        return cls(**out)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def compute_report(pred, truth, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> MetricsReport:
    """Confusion counts, overlap metrics and both Hausdorff variants.

    Hausdorff values are NaN when either mask is empty, except when both are
    empty, where they are 0.
    """
    c = confusion(pred, truth)
    dice, recall, precision = overlap_metrics(c)
    p, t = _binary(pred), _binary(truth)
    if p.any() and t.any():
        hd = hausdorff_distance(p, t, spacing, 100.0)
        hd95 = hausdorff_distance(p, t, spacing, 95.0)
    elif not p.any() and not t.any():
        hd = hd95 = 0.0
    else:
        hd = hd95 = float("nan")
    return MetricsReport(dice, recall, precision, hd, hd95, c.tp, c.fp, c.fn, c.tn)


def mean_report(reports: Iterable[MetricsReport]) -> MetricsReport:
    """Average metrics over samples (NaN Hausdorff entries are skipped); counts are summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to aggregate")

    def avg(name):
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        finite = vals[~np.isnan(vals)]
        return float(finite.mean()) if finite.size else float("nan")

    return MetricsReport(
        avg("dice"), avg("recall"), avg("precision"), avg("hd_mm"), avg("hd95_mm"),
        sum(r.tp for r in reports), sum(r.fp for r in reports),
        sum(r.fn for r in reports), sum(r.tn for r in reports),
        reports[0].hausdorff_variant, sum(r.n_samples for r in reports),
    )


# -- post-processing ---------------------------------------------------------------

def closing(mask, radius: int = 1) -> np.ndarray:
    """Binary closing with a (2r+1)^3 cube (the 26-neighbourhood grown r times).

    The mask is zero-padded by ``radius`` first so the grid border does not
    erode foreground; the result always contains the input.
    """
    m = _binary(mask)
    if radius <= 0:
        return m.copy()
    padded = np.pad(m, radius)
    dil = ndimage.binary_dilation(padded, structure=FULL_STRUCTURE, iterations=radius)
    ero = ndimage.binary_erosion(dil, structure=FULL_STRUCTURE, iterations=radius, border_value=0)
    inner = (slice(radius, -radius),) * 3
    return ero[inner]


def largest_component(mask) -> np.ndarray:
    """Keep the largest 26-connected component; ties go to the first in scan order."""
    m = _binary(mask)
    labels, n = ndimage.label(m, structure=FULL_STRUCTURE)
    if n <= 1:
        return m.copy()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def count_components(mask) -> int:
    return int(ndimage.label(_binary(mask), structure=FULL_STRUCTURE)[1])


def postprocess(pred, closing_radius: int = 1) -> np.ndarray:
    """Morphological closing followed by largest-component selection."""
    return largest_component(closing(pred, closing_radius))
