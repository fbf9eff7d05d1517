"""Synthetic volumes, preprocessing, augmentation, patch grids, and case I/O.

Volumes are channel-first float32 arrays ``(C, D, H, W)``; segmentation
labels are 3-channel binary masks ``(ET, TC, WT)`` that nest voxelwise
(``ET <= TC <= WT``).  Every randomized operation here is a pure function
of its inputs and an explicit seed or ``numpy.random.Generator``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

REGIONS = ("ET", "TC", "WT")

VOLUME_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("u1")


class DegenerateInputError(ValueError):
    """Input has no usable signal (e.g. a constant intensity channel)."""


class CorruptCaseFileError(RuntimeError):
    """Case file header and payload disagree."""


@dataclass
class Volume:
    """Multi-channel 3D intensity image.

    data : float32 array ``(C, D, H, W)``
    spacing : mm per voxel along (D, H, W)
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 4-D (C, D, H, W), got ndim={self.data.ndim}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class SegLabel:
    """Nested binary masks, channel order (ET, TC, WT)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 4 or self.data.shape[0] != len(REGIONS):
            raise ValueError(f"label must have shape (3, D, H, W), got {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise ValueError("label values must be 0 or 1")
        et, tc, wt = self.data
        if (et > tc).any() or (tc > wt).any():
            raise ValueError("label nesting violated: require ET <= TC <= WT voxelwise")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class Sample:
    """One case: a volume, an optional label, and the seed that made it."""

    case_id: str
    volume: Volume
    label: SegLabel | None
    seed: int

    def __post_init__(self):
        if self.label is not None and self.label.spatial_shape != self.volume.spatial_shape:
            raise ValueError(
                f"label spatial shape {self.label.spatial_shape} != volume {self.volume.spatial_shape}"
            )

    def without_label(self) -> "Sample":
        return replace(self, label=None)


@dataclass
class PatchGrid:
    """Overlapping-patch decomposition of a volume.

    ``patches[i, j, k]`` is the sub-volume starting at
    ``(i * stride[0], j * stride[1], k * stride[2])``.
    """

    patch_size: tuple[int, int, int]
    stride: tuple[int, int, int]
    grid_dims: tuple[int, int, int]
    patches: np.ndarray  # (Gi, Gj, Gk, C, pd, ph, pw)


@dataclass
class DatasetSplit:
    train_labeled: list[str]
    train_unlabeled: list[str]
    val: list[str]
    test: list[str]

    def all_ids(self) -> list[str]:
        return self.train_labeled + self.train_unlabeled + self.val + self.test

    def as_dict(self) -> dict[str, list[str]]:
        return {
            "train_labeled": list(self.train_labeled),
            "train_unlabeled": list(self.train_unlabeled),
            "val": list(self.val),
            "test": list(self.test),
        }


# ---------------------------------------------------------------------------
# Synthetic phantom generation
# ---------------------------------------------------------------------------

# Per-modality affine weights for the (brain, WT, TC, ET) indicator maps.
# Rows mimic T1 / T1ce / T2 / FLAIR contrast behaviour.
_MODALITY_WEIGHTS = np.array(
    [
        [0.25, -0.35, 0.10, 0.45],
        [0.25, 0.10, 0.25, 0.90],
        [0.30, 0.55, 0.65, -0.20],
        [0.30, 0.95, 0.20, 0.05],
    ]
)


@dataclass
class PhantomConfig:
    """Difficulty knobs for the synthetic nested-ellipsoid phantom."""

    channels: int = 4
    brain_radius_frac: tuple[float, float] = (0.38, 0.46)
    wt_radius_frac: tuple[float, float] = (0.18, 0.30)
    tc_frac_of_wt: tuple[float, float] = (0.55, 0.80)
    et_frac_of_tc: tuple[float, float] = (0.50, 0.75)
    contrast: float = 2.0
    noise_sigma: float = 0.1
    background_modes: int = 5
    background_amp: float = 0.3
    wt_fraction_bounds: tuple[float, float] = (0.02, 0.30)
    min_region_voxels: int = 4
    max_draws: int = 64


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return q <= 1.0


def _smooth_field(shape, rng: np.random.Generator, modes: int, amp: float) -> np.ndarray:
    coords = np.ogrid[tuple(slice(0, n) for n in shape)]
    coords = [c / n for c, n in zip(coords, shape)]
    out = np.zeros(shape, dtype=np.float64)
    for m in range(modes):
        k = rng.uniform(0.5, 2.5, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        a = amp * rng.uniform(0.3, 1.0) / (m + 1)
        out += a * np.cos(2.0 * np.pi * sum(k[i] * coords[i] for i in range(3)) + phase)
    return out


def gen_synthetic_case(
    seed: int,
    shape: tuple[int, int, int] = (32, 32, 32),
    difficulty: PhantomConfig | None = None,
) -> Sample:
    """Generate one deterministic phantom case.

    Nested random ellipsoids (ET inside TC inside WT) are placed inside a
    smooth "brain" ellipsoid.  Each channel is a distinct affine encoding of
    the region indicators plus a low-frequency background field and Gaussian
    noise.  Radii are re-drawn (bounded attempts) until the WT volume
    fraction lands inside ``wt_fraction_bounds`` and every region is
    non-empty, so the draw count is itself seed-deterministic.
    """
    cfg = difficulty or PhantomConfig()
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError(f"shape must be 3 axes of at least 16 voxels, got {shape}")

    rng = np.random.default_rng(seed)
    extent = np.array(shape, dtype=np.float64)

    brain_center = extent / 2 + rng.uniform(-0.03, 0.03, 3) * extent
    brain_radii = rng.uniform(*cfg.brain_radius_frac, 3) * extent
    brain = _ellipsoid(shape, brain_center, brain_radii)

    lo, hi = cfg.wt_fraction_bounds
    for _ in range(cfg.max_draws):
        wt_radii = rng.uniform(*cfg.wt_radius_frac, 3) * extent
        wt_center = brain_center + rng.uniform(-0.25, 0.25, 3) * brain_radii
        tc_radii = wt_radii * rng.uniform(*cfg.tc_frac_of_wt)
        tc_center = wt_center + rng.uniform(-0.15, 0.15, 3) * wt_radii
        et_radii = tc_radii * rng.uniform(*cfg.et_frac_of_tc)
        et_center = tc_center + rng.uniform(-0.15, 0.15, 3) * tc_radii

        wt = _ellipsoid(shape, wt_center, wt_radii) & brain
        tc = _ellipsoid(shape, tc_center, tc_radii) & wt
        et = _ellipsoid(shape, et_center, et_radii) & tc

        wt_fraction = wt.mean()
        if lo <= wt_fraction <= hi and et.sum() >= cfg.min_region_voxels:
            break
    else:
        raise ValueError(
            f"could not fit a WT region with volume fraction in [{lo}, {hi}] into shape {shape}"
        )

    indicators = np.stack([brain, wt, tc, et]).astype(np.float64)
    weights = _MODALITY_WEIGHTS[: cfg.channels].copy()
    weights[:, 1:] *= cfg.contrast
    weights *= rng.uniform(0.9, 1.1, size=weights.shape)

    data = np.empty((cfg.channels, *shape), dtype=np.float32)
    for c in range(cfg.channels):
        img = np.tensordot(weights[c], indicators, axes=1)
        img += _smooth_field(shape, rng, cfg.background_modes, cfg.background_amp)
        img += cfg.noise_sigma * rng.standard_normal(shape)
        data[c] = img.astype(np.float32)

    label = SegLabel(np.stack([et, tc, wt]).astype(np.uint8))
    return Sample(case_id=f"case_{seed:08d}", volume=Volume(data), label=label, seed=int(seed))


# ---------------------------------------------------------------------------
# Preprocessing and augmentation
# ---------------------------------------------------------------------------

def normalize(volume: Volume) -> Volume:
    """Standardize each channel to zero mean, unit SD over all voxels."""
    data = volume.data.astype(np.float64)
    mean = data.mean(axis=(1, 2, 3), keepdims=True)
    sd = data.std(axis=(1, 2, 3), keepdims=True)
    if (sd < 1e-12).any():
        bad = int(np.argmax(sd.ravel() < 1e-12))
        raise DegenerateInputError(f"channel {bad} has zero variance, cannot normalize")
    return Volume(((data - mean) / sd).astype(np.float32), spacing=volume.spacing)


def augment(sample: Sample, rng: np.random.Generator, crop_size: tuple[int, int, int]) -> Sample:
    """Intensity scale/shift, random mirror flips, then a random crop.

    Draw order (fixed, part of the determinism contract): scale u, shift v,
    three flip coins, three crop offsets.  The label is flipped and cropped
    identically to the volume.
    """
    vol = sample.volume.data
    spatial = sample.volume.spatial_shape
    crop_size = tuple(int(c) for c in crop_size)
    if any(c > n for c, n in zip(crop_size, spatial)):
        raise ValueError(f"crop size {crop_size} exceeds volume extent {spatial}")

    u = rng.uniform(0.9, 1.1)
    v = rng.uniform(-0.1, 0.1)
    flips = rng.random(3) < 0.5
    offsets = tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(spatial, crop_size))

    sd = vol.astype(np.float64).std(axis=(1, 2, 3), keepdims=True)
    data = vol * u + (v * sd).astype(np.float32)

    flip_axes = tuple(a + 1 for a, f in enumerate(flips) if f)
    if flip_axes:
        data = np.flip(data, axis=flip_axes)
    window = (slice(None),) + tuple(slice(o, o + c) for o, c in zip(offsets, crop_size))
    data = np.ascontiguousarray(data[window])

    label = None
    if sample.label is not None:
        lab = sample.label.data
        if flip_axes:
            lab = np.flip(lab, axis=flip_axes)
        label = SegLabel(np.ascontiguousarray(lab[window]))

    return Sample(
        case_id=sample.case_id,
        volume=Volume(data, spacing=sample.volume.spacing),
        label=label,
        seed=sample.seed,
    )


# ---------------------------------------------------------------------------
# Patch grids
# ---------------------------------------------------------------------------

def grid_geometry(
    extent: tuple[int, int, int],
    patch: tuple[int, int, int],
    overlap: tuple[int, int, int],
) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Validate and return ``(grid_dims, stride)`` for an overlapping grid.

    Per axis the stride is ``patch - overlap`` and must tile the extent
    exactly: ``(extent - patch) % stride == 0``.
    """
    dims = []
    strides = []
    for axis, (n, p, o) in enumerate(zip(extent, patch, overlap)):
        s = p - o
        if s < 1:
            raise ValueError(f"axis {axis}: overlap {o} must be smaller than patch {p}")
        if p > n:
            raise ValueError(f"axis {axis}: patch {p} exceeds extent {n}")
        if (n - p) % s != 0:
            raise ValueError(
                f"axis {axis}: extent {n} is not tiled by patch {p} with stride {s}"
            )
        dims.append((n - p) // s + 1)
        strides.append(s)
    return tuple(dims), tuple(strides)


def make_patch_grid(
    volume: Volume,
    patch: tuple[int, int, int],
    overlap: tuple[int, int, int],
) -> PatchGrid:
    """Decompose a volume into an overlapping patch grid."""
    patch = tuple(int(p) for p in patch)
    overlap = tuple(int(o) for o in overlap)
    dims, stride = grid_geometry(volume.spatial_shape, patch, overlap)

    c = volume.data.shape[0]
    patches = np.empty((*dims, c, *patch), dtype=volume.data.dtype)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                starts = (i * stride[0], j * stride[1], k * stride[2])
                window = (slice(None),) + tuple(slice(s, s + p) for s, p in zip(starts, patch))
                patches[i, j, k] = volume.data[window]
    return PatchGrid(patch_size=patch, stride=stride, grid_dims=dims, patches=patches)


# ---------------------------------------------------------------------------
# Dataset splitting
# ---------------------------------------------------------------------------

def split_dataset(
    case_ids: list[str],
    counts: tuple[int, int, int, int],
    seed: int,
) -> DatasetSplit:
    """Disjoint (train_labeled, train_unlabeled, val, test) split of the pool."""
    n_labeled, n_unlabeled, n_val, n_test = (int(c) for c in counts)
    for name, c in zip(("labeled", "unlabeled", "val", "test"), counts):
        if c < 0:
            raise ValueError(f"count {name} must be non-negative, got {c}")
    total = n_labeled + n_unlabeled + n_val + n_test
    if total > len(case_ids):
        raise ValueError(f"requested {total} cases but the pool has only {len(case_ids)}")

    order = np.random.default_rng(seed).permutation(len(case_ids))
    shuffled = [case_ids[i] for i in order]
    bounds = np.cumsum([n_labeled, n_unlabeled, n_val, n_test])
    return DatasetSplit(
        train_labeled=shuffled[: bounds[0]],
        train_unlabeled=shuffled[bounds[0] : bounds[1]],
        val=shuffled[bounds[1] : bounds[2]],
        test=shuffled[bounds[2] : bounds[3]],
    )


# ---------------------------------------------------------------------------
# Case files and manifests
# ---------------------------------------------------------------------------
#
# A case is stored as <base>.json (metadata), <base>.vol (raw little-endian
# float32 voxels in (C, D, H, W) order) and, when labeled, <base>.seg (raw
# uint8 voxels in (3, D, H, W) order).

def write_case(path: str | Path, sample: Sample) -> None:
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "case_id": sample.case_id,
        "seed": sample.seed,
        "shape": list(sample.volume.shape),
        "spacing": list(sample.volume.spacing),
        "dtype": "float32",
        "has_label": sample.label is not None,
        "label_channels": len(REGIONS) if sample.label is not None else 0,
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    base.with_suffix(".vol").write_bytes(
        np.ascontiguousarray(sample.volume.data, dtype=VOLUME_DTYPE).tobytes()
    )
    if sample.label is not None:
        base.with_suffix(".seg").write_bytes(
            np.ascontiguousarray(sample.label.data, dtype=LABEL_DTYPE).tobytes()
        )


def read_case(path: str | Path) -> Sample:
    base = Path(path)
    try:
        meta = json.loads(base.with_suffix(".json").read_text())
        shape = tuple(int(n) for n in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
        has_label = bool(meta["has_label"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise CorruptCaseFileError(f"unreadable case metadata at {base}: {exc}") from exc

    raw = base.with_suffix(".vol").read_bytes()
    expected = int(np.prod(shape)) * VOLUME_DTYPE.itemsize
    if len(raw) != expected:
        raise CorruptCaseFileError(
            f"{base}.vol payload is {len(raw)} bytes, header implies {expected}"
        )
    data = np.frombuffer(raw, dtype=VOLUME_DTYPE).reshape(shape)

    label = None
    if has_label:
        raw_seg = base.with_suffix(".seg").read_bytes()
        seg_shape = (len(REGIONS),) + shape[1:]
        expected_seg = int(np.prod(seg_shape))
        if len(raw_seg) != expected_seg:
            raise CorruptCaseFileError(
                f"{base}.seg payload is {len(raw_seg)} bytes, header implies {expected_seg}"
            )
        label = SegLabel(np.frombuffer(raw_seg, dtype=LABEL_DTYPE).reshape(seg_shape).copy())

    return Sample(
        case_id=str(meta["case_id"]),
        volume=Volume(data.copy(), spacing=spacing),
        label=label,
        seed=int(meta["seed"]),
    )


def write_manifest(
    path: str | Path,
    case_ids: list[str],
    case_paths: list[str],
    seed: int,
    split: DatasetSplit | None = None,
) -> None:
    """Manifest: JSON list of case paths (relative to the manifest) plus
    optional split assignments."""
    doc = {
        "version": 1,
        "seed": int(seed),
        "n_cases": len(case_ids),
        "cases": [{"case_id": cid, "path": p} for cid, p in zip(case_ids, case_paths)],
        "split": split.as_dict() if split is not None else None,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def read_manifest(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if "cases" not in doc:
        raise ValueError(f"manifest {path} has no 'cases' list")
    return doc


def load_cases(manifest_path: str | Path, ids: list[str] | None = None) -> dict[str, Sample]:
    """Load cases listed in a manifest; paths resolve relative to it."""
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    wanted = set(ids) if ids is not None else None
    out: dict[str, Sample] = {}
    for entry in doc["cases"]:
        cid = entry["case_id"]
        if wanted is not None and cid not in wanted:
            continue
        out[cid] = read_case(manifest_path.parent / entry["path"])
    if wanted is not None and wanted - out.keys():
        raise ValueError(f"manifest is missing cases: {sorted(wanted - out.keys())}")
    return out
