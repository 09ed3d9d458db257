"""Prepared sessions -> token batches.

Patches are non-overlapping p^3 blocks in row-major grid order, modalities
concatenated in session order.  A patch is valid when it overlaps the
source extent and contains signal; only valid patches may be hidden by a
mask plan.  Out-of-extent voxels are zeroed inside patch vectors, so token
inputs and reconstruction targets never see padding content.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatchError, RangeError, ShapeError
from .modality_embed import EmbeddingCache, EmbeddingSource, embed_modality
from .preprocess import PreparedSession
from .rng import stream


def round_half_away(x: float) -> int:
    """round() with ties away from zero, pinned for cross-run identity."""
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def split_into_patches(arr: np.ndarray, patch: tuple[int, int, int]) -> np.ndarray:
    """(X, Y, Z[, C]) -> (n_patches, p^3[*C]) in row-major grid and voxel order."""
    dims = arr.shape[:3]
    if any(d % p != 0 for d, p in zip(dims, patch)):
        raise ShapeError(f"dims {dims} not divisible by patch {patch}")
    gx, gy, gz = (d // p for d, p in zip(dims, patch))
    px, py, pz = patch
    tail = arr.shape[3:]
    blocks = arr.reshape((gx, px, gy, py, gz, pz) + tail)
    blocks = blocks.transpose((0, 2, 4, 1, 3, 5) + tuple(range(6, 6 + len(tail))))
    return np.ascontiguousarray(blocks.reshape((gx * gy * gz, px * py * pz) + tail))


def assemble_from_patches(
    patches: np.ndarray, grid: tuple[int, int, int], patch: tuple[int, int, int]
) -> np.ndarray:
    """Inverse of split_into_patches for a full row-major patch list."""
    gx, gy, gz = grid
    px, py, pz = patch
    tail = patches.shape[2:]
    if patches.shape[0] != gx * gy * gz:
        raise ShapeError(
            f"{patches.shape[0]} patches cannot tile grid {grid}"
        )
    blocks = patches.reshape((gx, gy, gz, px, py, pz) + tail)
    blocks = blocks.transpose((0, 3, 1, 4, 2, 5) + tuple(range(6, 6 + len(tail))))
    return np.ascontiguousarray(
        blocks.reshape((gx * px, gy * py, gz * pz) + tail)
    )


@dataclass
class PatchSet:
    """Flattened patches of one session, all modalities concatenated."""

    patches: np.ndarray       # (n, p^3) float32, padding voxels zeroed
    extent_mask: np.ndarray   # (n, p^3) bool, True where inside valid_extent
    modality_ids: np.ndarray  # (n,) int32 index into `modalities`
    coords: np.ndarray        # (n, 3) int32 grid coordinates
    valid: np.ndarray         # (n,) bool
    grid: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    modalities: list[str]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patches_per_modality(self) -> int:
        return int(np.prod(self.grid))

    def in_extent_count(self) -> np.ndarray:
        return self.extent_mask.sum(axis=1)


def patchify(
    prepared: PreparedSession,
    patch: tuple[int, int, int],
    min_nonzero_frac: float = 0.0,
) -> PatchSet:
    """Extract patches for every modality; flag validity per patch.

    valid = overlaps the source extent and has at least max(1,
    ceil(min_nonzero_frac * p^3)) nonzero voxels.
    """
    modalities = list(prepared.volumes)
    dims = prepared.dims
    if any(d % p != 0 for d, p in zip(dims, patch)):
        raise ShapeError(f"dims {dims} not divisible by patch {patch}")
    grid = tuple(d // p for d, p in zip(dims, patch))
    p3 = int(np.prod(patch))
    min_nonzero = max(1, int(np.ceil(min_nonzero_frac * p3)))

    gx, gy, gz = grid
    coords_one = np.stack(
        np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3).astype(np.int32)

    all_patches, all_masks, all_ids, all_coords, all_valid = [], [], [], [], []
    for mod_id, modality in enumerate(modalities):
        vol = prepared.volumes[modality]
        mask = split_into_patches(vol.extent_mask(), patch)
        vox = split_into_patches(vol.voxels, patch)
        vox = vox * mask  # padding voxels carry no signal
        nonzero = (vox != 0).sum(axis=1)
        valid = (mask.any(axis=1)) & (nonzero >= min_nonzero)
        all_patches.append(vox.astype(np.float32))
        all_masks.append(mask)
        all_ids.append(np.full(len(vox), mod_id, dtype=np.int32))
        all_coords.append(coords_one)
        all_valid.append(valid)

    return PatchSet(
        patches=np.concatenate(all_patches),
        extent_mask=np.concatenate(all_masks),
        modality_ids=np.concatenate(all_ids),
        coords=np.concatenate(all_coords),
        valid=np.concatenate(all_valid),
        grid=grid,
        patch_size=tuple(patch),
        modalities=modalities,
    )


def positional_code(
    coords: np.ndarray, tables: tuple[np.ndarray, np.ndarray, np.ndarray]
) -> np.ndarray:
    """Factorized 3D positional embedding: sum of three per-axis rows."""
    coords = np.atleast_2d(np.asarray(coords))
    for axis in range(3):
        if coords[:, axis].min() < 0 or coords[:, axis].max() >= len(tables[axis]):
            raise RangeError(
                f"grid coordinate out of range on axis {axis} "
                f"(max {len(tables[axis]) - 1})"
            )
    out = tables[0][coords[:, 0]] + tables[1][coords[:, 1]] + tables[2][coords[:, 2]]
    return out[0] if out.shape[0] == 1 and coords.shape[0] == 1 else out


@dataclass
class MaskPlan:
    """Which patches of a session are hidden, by global patch index."""

    hidden: np.ndarray            # sorted int64 indices
    dropped_modalities: frozenset = frozenset()
    ratio: float = 0.0

    def __post_init__(self):
        # downstream outputs are keyed by ascending global index
        self.hidden = np.sort(np.asarray(self.hidden, dtype=np.int64))

    def hidden_set(self) -> set:
        return set(self.hidden.tolist())


_MAX_DROP_ATTEMPTS = 64


def sample_mask(
    patch_set: PatchSet,
    rho: float,
    p_drop: float,
    rng: np.random.Generator,
) -> MaskPlan:
    """Padding-aware mask plan: optional full-modality drop, then a rho-mask.

    With probability p_drop (sessions with >= 2 modalities only) one modality
    is dropped entirely: all its valid patches are hidden.  Then
    round(rho * V) of the remaining valid patches are hidden uniformly
    without replacement.  At least one patch always stays visible: a drop
    that leaves nothing to mask is re-sampled, and the rho-selection keeps
    the tail of its permutation visible when it would cover everything.
    """
    if not 0.0 <= rho <= 1.0:
        raise RangeError(f"rho={rho} outside [0, 1]")
    if not 0.0 <= p_drop <= 1.0:
        raise RangeError(f"p_drop={p_drop} outside [0, 1]")

    valid_idx = np.flatnonzero(patch_set.valid)
    if valid_idx.size == 0:
        return MaskPlan(hidden=np.empty(0, dtype=np.int64), ratio=rho)

    n_mods = len(patch_set.modalities)
    mod_of_valid = patch_set.modality_ids[valid_idx]

    dropped: frozenset = frozenset()
    drop_hidden = np.empty(0, dtype=np.int64)
    remaining = valid_idx
    if n_mods >= 2:
        for _ in range(_MAX_DROP_ATTEMPTS):
            if not rng.random() < p_drop:
                break
            mod = int(rng.integers(n_mods))
            rest = valid_idx[mod_of_valid != mod]
            if rest.size == 0:
                continue  # dropping this modality would hide everything
            dropped = frozenset({mod})
            drop_hidden = valid_idx[mod_of_valid == mod]
            remaining = rest
            break

    k = round_half_away(rho * remaining.size)
    k = min(k, remaining.size)
    perm = rng.permutation(remaining)
    if k == remaining.size and k > 0:
        k -= 1  # visibility guard: the permutation tail stays visible
    rho_hidden = perm[:k]

    hidden = np.sort(np.concatenate([drop_hidden, rho_hidden]).astype(np.int64))
    return MaskPlan(hidden=hidden, dropped_modalities=dropped, ratio=rho)


@dataclass
class SessionTokens:
    """One session's tokens plus conditioning inputs."""

    case_id: str
    patch_set: PatchSet
    plan: MaskPlan
    modality_embeddings: np.ndarray  # (n_modalities, D_m)

    def token_embeddings(self) -> np.ndarray:
        """Per-token modality embedding rows, (n_patches, D_m)."""
        return self.modality_embeddings[self.patch_set.modality_ids]

    def visible_indices(self) -> np.ndarray:
        visible = self.patch_set.valid.copy()
        visible[self.plan.hidden] = False
        return np.flatnonzero(visible)

    def hidden_indices(self) -> np.ndarray:
        return self.plan.hidden


@dataclass
class TokenBatch:
    sessions: list[SessionTokens] = field(default_factory=list)

    def __len__(self):
        return len(self.sessions)


@dataclass
class BatchConfig:
    patch_size: tuple[int, int, int] = (16, 16, 16)
    rho: float = 0.75
    p_drop: float = 0.2
    min_nonzero_frac: float = 0.0
    seed: int = 0


def assemble_batch(
    sessions: list[PreparedSession],
    cfg: BatchConfig,
    source: EmbeddingSource,
    cache: EmbeddingCache | None = None,
    mask_seed: int | None = None,
) -> TokenBatch:
    """Tokenize sessions in order; each gets its own mask stream."""
    if not sessions:
        raise EmptyBatchError("assemble_batch needs at least one session")
    seed = cfg.seed if mask_seed is None else mask_seed
    out = []
    for index, prepared in enumerate(sessions):
        patch_set = patchify(prepared, cfg.patch_size, cfg.min_nonzero_frac)
        embeddings = np.stack([
            embed_modality(m, source, cache).vector for m in patch_set.modalities
        ])
        rng = stream(seed, "mask", index)
        plan = sample_mask(patch_set, cfg.rho, cfg.p_drop, rng)
        out.append(SessionTokens(
            case_id=prepared.case_id,
            patch_set=patch_set,
            plan=plan,
            modality_embeddings=embeddings,
        ))
    return TokenBatch(sessions=out)
