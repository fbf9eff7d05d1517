"""Non-differentiable evaluation: Dice score, HD95, boundary extraction.

HD95 pools both directed surface-distance sets before taking the 95th
percentile (the common BraTS convention).  Empty-mask conventions: both
masks empty gives Dice 1.0, exactly one empty gives Dice 0.0, and HD95 is
undefined (``None``) whenever either mask is empty; aggregation layers
exclude undefined values and report their count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volgrid import REGIONS, SegLabel

# 6-connectivity Laplacian stencil: center 6, face neighbors -1.
_LAPLACIAN = np.zeros((3, 3, 3), dtype=np.int16)
_LAPLACIAN[1, 1, 1] = 6
for _off in ((0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)):
    _LAPLACIAN[_off] = -1

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


@dataclass
class RegionMetrics:
    dice: float
    hd95: float | None  # None when either mask is empty


@dataclass
class MetricsReport:
    """Per-region Dice and HD95 for one case."""

    regions: dict[str, RegionMetrics]

    def as_dict(self) -> dict:
        return {
            name: {"dice": m.dice, "hd95": m.hd95} for name, m in self.regions.items()
        }


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values 0/1)")
    return arr.astype(bool)


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Hard Dice overlap 2|A∩B| / (|A|+|B|).

    Both masks empty -> 1.0; exactly one empty -> 0.0.
    """
    a = _check_binary(pred, "pred")
    b = _check_binary(gt, "gt")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with an unlabeled 6-neighbor (array borders count as
    unlabeled), as an (N, 3) index array."""
    m = _check_binary(mask, "mask")
    interior = ndimage.binary_erosion(m, structure=_SIX_CONN, border_value=0)
    return np.argwhere(m & ~interior)


def hausdorff95(
    pred: np.ndarray,
    gt: np.ndarray,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> float | None:
    """95th percentile of the pooled directed surface distances.

    Distances run from each pred-surface voxel to the nearest gt-surface
    voxel and vice versa, Euclidean in mm (indices scaled by ``spacing``).
    The percentile interpolates linearly between order statistics.
    Returns ``None`` (undefined) when either mask is empty.
    """
    a = _check_binary(pred, "pred")
    b = _check_binary(gt, "gt")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return None

    scale = np.asarray(spacing, dtype=np.float64)
    pa = surface_voxels(a) * scale
    pb = surface_voxels(b) * scale
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, 95))


def extract_boundary(label: np.ndarray) -> tuple[np.ndarray, float]:
    """Boundary map of a binary mask via the 6-connectivity Laplacian.

    A labeled voxel is boundary when the zero-padded Laplacian response is
    nonzero there, i.e. when some face neighbor (or the array border) is
    unlabeled.  Returns the binary boundary map and
    ``beta = (#non-boundary voxels) / (#total voxels)``.
    """
    m = _check_binary(label, "label")
    response = ndimage.convolve(m.astype(np.int16), _LAPLACIAN, mode="constant", cval=0)
    boundary = m & (response != 0)
    beta = 1.0 - boundary.sum() / m.size
    return boundary.astype(np.uint8), float(beta)


def evaluate_case(
    pred: SegLabel,
    gt: SegLabel,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> MetricsReport:
    """Per-region Dice and HD95 for one predicted case."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    regions = {}
    for c, name in enumerate(REGIONS):
        p, g = pred.data[c], gt.data[c]
        regions[name] = RegionMetrics(
            dice=dice_score(p, g),
            hd95=hausdorff95(p, g, spacing),
        )
    return MetricsReport(regions=regions)
