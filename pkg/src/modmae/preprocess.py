"""Augmentation and normalization pipeline with explicit validity tracking.

Each volume carries a per-axis half-open `valid_extent` marking which voxels
came from source data rather than padding.  Intensity ops only ever touch
voxels inside the extent, so padding stays exactly zero through the pipeline
(rotation resampling is the one stage that may smear values outside it).

All randomness flows through counter-based streams keyed by (seed, case,
op name[, modality]); geometric ops reuse one stream across the modalities
of a session so the volumes stay spatially aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .corpus import RawVolume, Session
from .errors import RangeError, ShapeError
from .rng import stream

Extent = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


@dataclass
class Volume:
    """Pipeline volume: float32 voxels plus the region that is real data."""

    voxels: np.ndarray
    modality: str
    valid_extent: Extent

    def __post_init__(self):
        self.valid_extent = tuple(
            (int(lo), int(hi)) for lo, hi in self.valid_extent
        )
        for axis, (lo, hi) in enumerate(self.valid_extent):
            if not (0 <= lo < hi <= self.voxels.shape[axis]):
                raise ShapeError(
                    f"valid_extent {self.valid_extent} out of range for "
                    f"shape {self.voxels.shape} on axis {axis}"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def extent_slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi) for lo, hi in self.valid_extent)

    def extent_mask(self) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        mask[self.extent_slices()] = True
        return mask


@dataclass
class PreprocessConfig:
    """Pipeline hyperparameters; defaults follow the augmentation table."""

    target_shape: tuple[int, int, int] = (128, 128, 128)
    patch_size: tuple[int, int, int] = (16, 16, 16)
    bias_prob: float = 0.3
    bias_coeff_range: tuple[float, float] = (0.3, 0.6)
    noise_prob: float = 0.3
    noise_mean: float = 0.0
    noise_std: float = 0.05
    contrast_prob: float = 0.3
    contrast_gamma_range: tuple[float, float] = (0.7, 1.5)
    flip_prob: float = 0.5
    rotate_bound: float = math.pi / 12
    seed: int = 0

    def validate(self) -> "PreprocessConfig":
        for name in ("bias_prob", "noise_prob", "contrast_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise RangeError(f"{name}={p} outside [0, 1]")
        lo, hi = self.bias_coeff_range
        if not (0.0 <= lo <= hi):
            raise RangeError(f"bias_coeff_range {self.bias_coeff_range}")
        glo, ghi = self.contrast_gamma_range
        if not (0.0 < glo <= ghi):
            raise RangeError(f"contrast_gamma_range {self.contrast_gamma_range}")
        if self.noise_std < 0:
            raise RangeError(f"noise_std={self.noise_std}")
        if self.rotate_bound < 0:
            raise RangeError(f"rotate_bound={self.rotate_bound}")
        if any(t <= 0 for t in self.target_shape) or any(
            p <= 0 for p in self.patch_size
        ):
            raise RangeError("target_shape and patch_size must be positive")
        return self

    def to_dict(self) -> dict:
        return {
            "target_shape": list(self.target_shape),
            "patch_size": list(self.patch_size),
            "bias_prob": self.bias_prob,
            "bias_coeff_range": list(self.bias_coeff_range),
            "noise_prob": self.noise_prob,
            "noise_mean": self.noise_mean,
            "noise_std": self.noise_std,
            "contrast_prob": self.contrast_prob,
            "contrast_gamma_range": list(self.contrast_gamma_range),
            "flip_prob": self.flip_prob,
            "rotate_bound": self.rotate_bound,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PreprocessConfig":
        kwargs = dict(data)
        for key in ("target_shape", "patch_size", "bias_coeff_range",
                    "contrast_gamma_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs).validate()


def evaluation_config(cfg: PreprocessConfig) -> PreprocessConfig:
    """Same geometry, all stochastic ops disabled (inference-time pipeline)."""
    return replace(
        cfg, bias_prob=0.0, noise_prob=0.0, contrast_prob=0.0,
        flip_prob=0.0, rotate_bound=0.0,
    )


@dataclass
class PreparedSession:
    case_id: str
    volumes: dict[str, Volume]
    applied_ops: list = field(default_factory=list)

    @property
    def modalities(self) -> list[str]:
        return list(self.volumes)

    @property
    def dims(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).dims


def crop_or_pad(vol: RawVolume | Volume, target: tuple[int, int, int]) -> Volume:
    """Center-crop / symmetric zero-pad to `target`; extra voxel on the high side."""
    if any(t <= 0 for t in target):
        raise RangeError(f"target {target} must be positive")
    src = vol.voxels
    out = np.zeros(tuple(target), dtype=np.float32)
    src_slices, dst_slices, extent = [], [], []
    for axis in range(3):
        s, t = src.shape[axis], target[axis]
        if s >= t:
            start = (s - t) // 2
            src_slices.append(slice(start, start + t))
            dst_slices.append(slice(0, t))
            extent.append((0, t))
        else:
            low = (t - s) // 2
            src_slices.append(slice(0, s))
            dst_slices.append(slice(low, low + s))
            extent.append((low, low + s))
    out[tuple(dst_slices)] = src[tuple(src_slices)]
    return Volume(voxels=out, modality=vol.modality, valid_extent=tuple(extent))


def divisible_pad(vol: Volume, patch: tuple[int, int, int]) -> Volume:
    """Raise each dim to the next multiple of the patch size (symmetric zeros)."""
    if any(p <= 0 for p in patch):
        raise RangeError(f"patch {patch} must be positive")
    dims = vol.dims
    target = tuple(-(-d // p) * p for d, p in zip(dims, patch))
    if target == dims:
        return Volume(vol.voxels.copy(), vol.modality, vol.valid_extent)
    out = np.zeros(target, dtype=np.float32)
    dst, extent = [], []
    for axis in range(3):
        low = (target[axis] - dims[axis]) // 2
        dst.append(slice(low, low + dims[axis]))
        lo, hi = vol.valid_extent[axis]
        extent.append((lo + low, hi + low))
    out[tuple(dst)] = vol.voxels
    return Volume(voxels=out, modality=vol.modality, valid_extent=tuple(extent))


# Exponent triples (i, j, k), i+j+k <= 3, in lexicographic order; the
# sampling order of the bias-field coefficients is pinned to this list.
_BIAS_EXPONENTS = [
    (i, j, k)
    for i in range(4)
    for j in range(4 - i)
    for k in range(4 - i - j)
]


def _axis_coords(dim: int) -> np.ndarray:
    if dim == 1:
        return np.zeros(1)
    return 2.0 * np.arange(dim) / (dim - 1) - 1.0


def rand_bias_field(
    vol: Volume,
    rng: np.random.Generator,
    p: float = 0.3,
    coeff_range: tuple[float, float] = (0.3, 0.6),
    ops_log: Optional[list] = None,
) -> Volume:
    """Multiply extent voxels by exp(degree-3 polynomial) with probability p.

    Coefficient magnitudes are uniform in `coeff_range` with independent
    random signs, one per monomial in `_BIAS_EXPONENTS` order.
    """
    lo, hi = coeff_range
    if not (0.0 <= lo <= hi):
        raise RangeError(f"coeff_range {coeff_range}")
    applied = bool(rng.random() < p)
    entry = {"op": "rand_bias_field", "modality": vol.modality, "applied": applied}
    if not applied:
        if ops_log is not None:
            ops_log.append(entry)
        return Volume(vol.voxels.copy(), vol.modality, vol.valid_extent)

    n = len(_BIAS_EXPONENTS)
    magnitudes = rng.uniform(lo, hi, n)
    signs = rng.integers(0, 2, n) * 2 - 1
    coeffs = magnitudes * signs
    entry["coefficients"] = coeffs.tolist()

    sl = vol.extent_slices()
    axes = [_axis_coords(d)[s] for d, s in zip(vol.dims, sl)]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij", sparse=True)
    poly = np.zeros(tuple(s.stop - s.start for s in sl))
    for c, (i, j, k) in zip(coeffs, _BIAS_EXPONENTS):
        poly += c * (cx**i) * (cy**j) * (cz**k)
    out = vol.voxels.copy()
    out[sl] = (out[sl].astype(np.float64) * np.exp(poly)).astype(np.float32)
    if ops_log is not None:
        ops_log.append(entry)
    return Volume(out, vol.modality, vol.valid_extent)


def rand_gaussian_noise(
    vol: Volume,
    rng: np.random.Generator,
    p: float = 0.3,
    mean: float = 0.0,
    std: float = 0.05,
    ops_log: Optional[list] = None,
) -> Volume:
    """Add i.i.d. normal(mean, std) samples to extent voxels with probability p."""
    if std < 0:
        raise RangeError(f"std={std}")
    applied = bool(rng.random() < p)
    entry = {"op": "rand_gaussian_noise", "modality": vol.modality,
             "applied": applied, "mean": mean, "std": std}
    if ops_log is not None:
        ops_log.append(entry)
    if not applied:
        return Volume(vol.voxels.copy(), vol.modality, vol.valid_extent)
    sl = vol.extent_slices()
    shape = tuple(s.stop - s.start for s in sl)
    noise = rng.normal(mean, std, shape)
    out = vol.voxels.copy()
    out[sl] = (out[sl].astype(np.float64) + noise).astype(np.float32)
    return Volume(out, vol.modality, vol.valid_extent)


def rand_adjust_contrast(
    vol: Volume,
    rng: np.random.Generator,
    p: float = 0.3,
    gamma_range: tuple[float, float] = (0.7, 1.5),
    ops_log: Optional[list] = None,
) -> Volume:
    """Gamma-warp extent voxels between their min and max with probability p."""
    glo, ghi = gamma_range
    if not (0.0 < glo <= ghi):
        raise RangeError(f"gamma_range {gamma_range}")
    applied = bool(rng.random() < p)
    entry = {"op": "rand_adjust_contrast", "modality": vol.modality,
             "applied": applied}
    if not applied:
        if ops_log is not None:
            ops_log.append(entry)
        return Volume(vol.voxels.copy(), vol.modality, vol.valid_extent)
    gamma = float(rng.uniform(glo, ghi))
    entry["gamma"] = gamma
    if ops_log is not None:
        ops_log.append(entry)
    if gamma == 1.0:
        return Volume(vol.voxels.copy(), vol.modality, vol.valid_extent)
    sl = vol.extent_slices()
    region = vol.voxels[sl].astype(np.float64)
    mn, mx = region.min(), region.max()
    if mx == mn:
        return Volume(vol.voxels.copy(), vol.modality, vol.valid_extent)
    out = vol.voxels.copy()
    warped = ((region - mn) / (mx - mn)) ** gamma * (mx - mn) + mn
    out[sl] = warped.astype(np.float32)
    return Volume(out, vol.modality, vol.valid_extent)


def rand_flip(
    vol: Volume,
    rng: np.random.Generator,
    p: float = 0.5,
    ops_log: Optional[list] = None,
) -> Volume:
    """Flip each spatial axis independently with probability p."""
    axes = rng.random(3) < p
    entry = {"op": "rand_flip", "modality": vol.modality,
             "axes": [bool(a) for a in axes]}
    if ops_log is not None:
        ops_log.append(entry)
    out = vol.voxels
    extent = list(vol.valid_extent)
    for axis in range(3):
        if axes[axis]:
            out = np.flip(out, axis=axis)
            lo, hi = extent[axis]
            d = vol.dims[axis]
            extent[axis] = (d - hi, d - lo)
    return Volume(np.ascontiguousarray(out), vol.modality, tuple(extent))


def _rotation_matrix(angles: np.ndarray) -> np.ndarray:
    ax, ay, az = angles
    rx = np.array([[1, 0, 0],
                   [0, math.cos(ax), -math.sin(ax)],
                   [0, math.sin(ax), math.cos(ax)]])
    ry = np.array([[math.cos(ay), 0, math.sin(ay)],
                   [0, 1, 0],
                   [-math.sin(ay), 0, math.cos(ay)]])
    rz = np.array([[math.cos(az), -math.sin(az), 0],
                   [math.sin(az), math.cos(az), 0],
                   [0, 0, 1]])
    # applied x first, then y, then z
    return rz @ ry @ rx


def trilinear_resample(voxels: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample `voxels` under the index-space map p_out = M (p_in - c) + c.

    Trilinear interpolation; coordinates outside the grid are clamped to
    the border (border-replication padding).
    """
    dims = voxels.shape
    center = (np.array(dims, dtype=np.float64) - 1.0) / 2.0
    grid = np.indices(dims, dtype=np.float64).reshape(3, -1)
    src = matrix.T @ (grid - center[:, None]) + center[:, None]
    for axis in range(3):
        np.clip(src[axis], 0.0, dims[axis] - 1.0, out=src[axis])
    base = np.floor(src).astype(np.int64)
    frac = src - base
    nxt = np.minimum(base + 1, np.array(dims)[:, None] - 1)

    vals = np.zeros(grid.shape[1])
    with np.errstate(invalid="ignore"):  # NaN inputs propagate; sanitize cleans
        for dx in (0, 1):
            wx = frac[0] if dx else 1.0 - frac[0]
            ix = nxt[0] if dx else base[0]
            for dy in (0, 1):
                wy = frac[1] if dy else 1.0 - frac[1]
                iy = nxt[1] if dy else base[1]
                for dz in (0, 1):
                    wz = frac[2] if dz else 1.0 - frac[2]
                    iz = nxt[2] if dz else base[2]
                    vals += wx * wy * wz * voxels[ix, iy, iz].astype(np.float64)
    return vals.reshape(dims).astype(np.float32)


def rand_affine(
    vol: Volume,
    rng: np.random.Generator,
    angle_bound: float = math.pi / 12,
    ops_log: Optional[list] = None,
) -> Volume:
    """Rotate by per-axis angles uniform in [-bound, bound] about the center.

    valid_extent is left unchanged: rotations stay small and token validity
    additionally requires nonzero content downstream.
    """
    if angle_bound < 0:
        raise RangeError(f"angle_bound={angle_bound}")
    angles = rng.uniform(-angle_bound, angle_bound, 3)
    if ops_log is not None:
        ops_log.append({"op": "rand_affine", "modality": vol.modality,
                        "angles": angles.tolist()})
    if not np.any(angles):
        return Volume(vol.voxels.copy(), vol.modality, vol.valid_extent)
    out = trilinear_resample(vol.voxels, _rotation_matrix(angles))
    return Volume(out, vol.modality, vol.valid_extent)


def normalize_intensity(vol: Volume, ops_log: Optional[list] = None) -> Volume:
    """Z-score the strictly nonzero voxels (population sigma); zeros stay zero."""
    voxels = vol.voxels
    nz = voxels != 0
    count = int(nz.sum())
    entry = {"op": "normalize_intensity", "modality": vol.modality}
    if count < 2:
        entry["skipped"] = "fewer than 2 nonzero voxels"
        if ops_log is not None:
            ops_log.append(entry)
        return Volume(voxels.copy(), vol.modality, vol.valid_extent)
    values = voxels[nz].astype(np.float64)
    mu = values.mean()
    sigma = values.std()
    if sigma == 0.0:
        entry["skipped"] = "zero variance"
        if ops_log is not None:
            ops_log.append(entry)
        return Volume(voxels.copy(), vol.modality, vol.valid_extent)
    entry.update(mean=float(mu), std=float(sigma))
    if ops_log is not None:
        ops_log.append(entry)
    out = voxels.copy()
    out[nz] = ((values - mu) / sigma).astype(np.float32)
    return Volume(out, vol.modality, vol.valid_extent)


def sanitize(vol: Volume, ops_log: Optional[list] = None) -> Volume:
    """Replace NaN/Inf with zero, then clamp to [-4, 4]."""
    out = np.nan_to_num(vol.voxels, nan=0.0, posinf=0.0, neginf=0.0)
    np.clip(out, -4.0, 4.0, out=out)
    if ops_log is not None:
        ops_log.append({"op": "sanitize", "modality": vol.modality})
    return Volume(out, vol.modality, vol.valid_extent)


def preprocess_session(session: Session, cfg: PreprocessConfig) -> PreparedSession:
    """Run the full pipeline over every modality of a session.

    Geometric draws (flip axes, rotation angles) replay identically for all
    modalities; intensity draws are modality-independent streams.
    """
    cfg.validate()
    if not session.volumes:
        raise ShapeError(f"session {session.case_id!r} is empty")
    ops_log: list = []
    volumes: dict[str, Volume] = {}
    for modality in sorted(session.volumes):
        raw = session.volumes[modality]

        def intensity_rng(op: str) -> np.random.Generator:
            return stream(cfg.seed, session.case_id, op, modality)

        def geometric_rng(op: str) -> np.random.Generator:
            return stream(cfg.seed, session.case_id, op)

        vol = crop_or_pad(raw, cfg.target_shape)
        vol = divisible_pad(vol, cfg.patch_size)
        vol = rand_bias_field(vol, intensity_rng("rand_bias_field"),
                              cfg.bias_prob, cfg.bias_coeff_range, ops_log)
        vol = rand_gaussian_noise(vol, intensity_rng("rand_gaussian_noise"),
                                  cfg.noise_prob, cfg.noise_mean,
                                  cfg.noise_std, ops_log)
        vol = rand_adjust_contrast(vol, intensity_rng("rand_adjust_contrast"),
                                   cfg.contrast_prob,
                                   cfg.contrast_gamma_range, ops_log)
        vol = rand_flip(vol, geometric_rng("rand_flip"), cfg.flip_prob, ops_log)
        vol = rand_affine(vol, geometric_rng("rand_affine"),
                          cfg.rotate_bound, ops_log)
        vol = normalize_intensity(vol, ops_log)
        vol = sanitize(vol, ops_log)
        volumes[modality] = vol

    dims = {v.dims for v in volumes.values()}
    if len(dims) != 1:
        raise ShapeError(f"modalities disagree on dims: {dims}")
    return PreparedSession(case_id=session.case_id, volumes=volumes,
                           applied_ops=ops_log)
