"""Segmentation metrics, the modality-availability matrix, and imputation.

HD95 conventions vary across toolkits, so one is pinned here: surface
voxels are set voxels with at least one face-adjacent unset neighbor
(volume borders count as unset), distances are Euclidean in physical
units, both directions are pooled into one set, and the 95th percentile
interpolates linearly between order statistics.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .corpus import RawVolume, Session
from .errors import ConfigError, EmptyMaskError, ShapeError
from .modality_embed import EmbeddingCache, embed_modality
from .network import (
    NetConfig,
    decode,
    encode,
    grid_latents,
    head_classify,
    head_segment,
)
from .preprocess import (
    Volume,
    crop_or_pad,
    divisible_pad,
    evaluation_config,
    preprocess_session,
)
from .tokenizer import (
    BatchConfig,
    MaskPlan,
    PatchSet,
    SessionTokens,
    TokenBatch,
    assemble_batch,
    assemble_from_patches,
    patchify,
)

logger = logging.getLogger(__name__)

HD95_SENTINEL = "NA"


# ------------------------------------------------------------------ metrics

def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a n b| / (|a| + |b|); 1.0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_dims(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices (k, 3) of set voxels with a face-adjacent unset neighbor."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of pooled bidirectional surface distances (physical units)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_dims(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("hd95 needs two non-empty masks")
    scale = np.asarray(spacing, dtype=np.float64)
    pa = surface_voxels(a) * scale
    pb = surface_voxels(b) * scale
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95,
                               method="linear"))


def sensitivity_specificity(pred: np.ndarray, ref: np.ndarray):
    """(TP/(TP+FN), TN/(TN+FP)); 1.0 when a denominator is zero."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    _check_dims(pred, ref)
    tp = int(np.logical_and(pred, ref).sum())
    fn = int(np.logical_and(~pred, ref).sum())
    tn = int(np.logical_and(~pred, ~ref).sum())
    fp = int(np.logical_and(pred, ~ref).sum())
    sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
    spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return sens, spec


# ----------------------------------------------------- availability harness

@dataclass(frozen=True)
class AvailabilityConfig:
    name: str
    available: frozenset

    def __post_init__(self):
        if not self.available:
            raise ConfigError(f"config {self.name!r} has no modalities")


def default_availability_configs() -> list[AvailabilityConfig]:
    """The six standard present/absent rows over T1, T1c, T2, FLAIR."""
    rows = [
        ("Complete", {"t1", "t1c", "t2", "flair"}),
        ("Dropped (T1c)", {"t1", "t2", "flair"}),
        ("Dropped (T2)", {"t1", "t1c", "flair"}),
        ("Dropped (FLAIR)", {"t1", "t1c", "t2"}),
        ("Unseen (T1+FLAIR only)", {"t1", "flair"}),
        ("Unseen (T2 only)", {"t2"}),
    ]
    return [AvailabilityConfig(name, frozenset(mods)) for name, mods in rows]


@dataclass
class MetricRow:
    config: str
    dice: float | None
    hd95: float | None
    sensitivity: float | None
    specificity: float | None
    n_cases: int
    n_skipped: int


def rows_to_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "dice", "hd95", "sensitivity", "specificity",
                     "n_cases", "n_skipped"])
    for row in rows:
        writer.writerow([
            row.config,
            HD95_SENTINEL if row.dice is None else repr(row.dice),
            HD95_SENTINEL if row.hd95 is None else repr(row.hd95),
            HD95_SENTINEL if row.sensitivity is None else repr(row.sensitivity),
            HD95_SENTINEL if row.specificity is None else repr(row.specificity),
            row.n_cases,
            row.n_skipped,
        ])
    return buf.getvalue()


def _restrict_session(session: Session, available: frozenset) -> Session | None:
    kept = {m: v for m, v in session.volumes.items() if m in available}
    if not kept:
        return None
    return Session(case_id=session.case_id, volumes=kept)


def prepare_label(label: RawVolume, pre_cfg) -> np.ndarray:
    """Carry a label volume through the geometric part of the pipeline."""
    vol = crop_or_pad(label, pre_cfg.target_shape)
    vol = divisible_pad(vol, pre_cfg.patch_size)
    return vol.voxels > 0.5


def infer_segmentation(params, net: NetConfig, batch: TokenBatch) -> np.ndarray:
    """Voxel logits from the lexicographically first modality's latents."""
    latents, _ = encode(batch, params, net)
    tokens = batch.sessions[0]
    grid = grid_latents(tokens, latents[0], 0, net)
    return head_segment(grid, params, net)


def _segmentation_case_metrics(params, run_cfg, session, label_raw,
                               src, cache):
    pre_cfg = evaluation_config(run_cfg.preprocess)
    prepared = preprocess_session(session, pre_cfg)
    bcfg = BatchConfig(patch_size=pre_cfg.patch_size, rho=0.0, p_drop=0.0,
                       seed=run_cfg.seed)
    batch = assemble_batch([prepared], bcfg, src, cache)
    logits = infer_segmentation(params, run_cfg.net, batch)
    pred = logits > 0.0
    truth = prepare_label(label_raw, pre_cfg)
    d = dice(pred, truth)
    sens, spec = sensitivity_specificity(pred, truth)
    try:
        h = hd95(pred, truth, label_raw.spacing)
    except EmptyMaskError:
        h = None
    return d, h, sens, spec


def _classification_case_pred(params, run_cfg, session, src, cache) -> int:
    pre_cfg = evaluation_config(run_cfg.preprocess)
    prepared = preprocess_session(session, pre_cfg)
    bcfg = BatchConfig(patch_size=pre_cfg.patch_size, rho=0.0, p_drop=0.0,
                       seed=run_cfg.seed)
    batch = assemble_batch([prepared], bcfg, src, cache)
    _, pooled = encode(batch, params, run_cfg.net)
    return int(np.argmax(head_classify(pooled[0], params)))


def _mean_or_none(values: list) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def availability_matrix_eval(model, data, configs=None,
                             task: str = "segmentation",
                             out_csv=None):
    """Evaluate one checkpoint under every availability configuration.

    Each session is restricted to available-and-present modalities (dropped
    modalities leave the token sequence entirely); sessions with an empty
    intersection are skipped and counted.  Returns (rows, csv text).

    For task="classification" the dice column carries per-config accuracy
    and hd95 is always the NA sentinel.
    """
    from .training import Checkpoint, RunConfig, as_source, embedding_source, load_checkpoint

    ckpt = model if isinstance(model, Checkpoint) else load_checkpoint(model)
    ckpt_task = ckpt.meta.get("task", "pretrain")
    if ckpt_task not in ("pretrain", task):
        raise ConfigError(
            f"checkpoint was finetuned for {ckpt_task!r}, asked for {task!r}"
        )
    if task not in ("segmentation", "classification"):
        raise ConfigError(f"unknown task {task!r}")
    run_cfg = RunConfig.from_dict(ckpt.config) if ckpt.config else RunConfig()
    params = ckpt.params
    if configs is None:
        configs = default_availability_configs()
    if not configs:
        raise ConfigError("no availability configurations given")

    source = as_source(data, seed=run_cfg.seed)
    src = embedding_source(run_cfg)
    cache = EmbeddingCache()
    case_ids = source.case_ids()

    rows: list[MetricRow] = []
    for config in configs:
        dices, hds, senss, specs = [], [], [], []
        cls_true, cls_pred = [], []
        skipped = 0
        for cid in case_ids:
            session = _restrict_session(source.load(cid), config.available)
            if session is None:
                skipped += 1
                logger.info("config %s: case %s skipped (no available modality)",
                            config.name, cid)
                continue
            if task == "segmentation":
                label_raw = source.label(cid)
                if label_raw is None:
                    raise ConfigError(f"case {cid!r} has no label volume")
                d, h, sens, spec = _segmentation_case_metrics(
                    params, run_cfg, session, label_raw, src, cache
                )
                dices.append(d)
                hds.append(h)
                senss.append(sens)
                specs.append(spec)
            else:
                cls_true.append(int(source.class_label(cid)))
                cls_pred.append(_classification_case_pred(
                    params, run_cfg, session, src, cache
                ))
        if task == "segmentation":
            rows.append(MetricRow(
                config=config.name,
                dice=_mean_or_none(dices),
                hd95=_mean_or_none(hds),
                sensitivity=_mean_or_none(senss),
                specificity=_mean_or_none(specs),
                n_cases=len(dices),
                n_skipped=skipped,
            ))
        else:
            true = np.array(cls_true)
            pred = np.array(cls_pred)
            n = len(true)
            tp = int(((pred == 1) & (true == 1)).sum())
            fn = int(((pred == 0) & (true == 1)).sum())
            tn = int(((pred == 0) & (true == 0)).sum())
            fp = int(((pred == 1) & (true == 0)).sum())
            rows.append(MetricRow(
                config=config.name,
                dice=float((pred == true).mean()) if n else None,
                hd95=None,
                sensitivity=(1.0 if tp + fn == 0 else tp / (tp + fn)) if n else None,
                specificity=(1.0 if tn + fp == 0 else tn / (tn + fp)) if n else None,
                n_cases=n,
                n_skipped=skipped,
            ))

    text = rows_to_csv(rows)
    if out_csv is not None:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write(text)
    return rows, text


# --------------------------------------------------------------- imputation

def impute_modality(model, session: Session, target: str,
                    run_cfg=None) -> Volume:
    """Reconstruct an absent modality from the present ones.

    Present modalities enter fully visible; the target gets an all-hidden
    token lattice built from its (possibly unseen) embedding, and the
    decoded patches are reassembled on the session grid.  The lattice is
    padding-aware: it covers the grid positions where at least one source
    modality has a valid patch (positions the decoder actually sees in
    training), and the remaining positions stay zero.
    """
    from .training import Checkpoint, RunConfig, embedding_source, load_checkpoint

    ckpt = model if isinstance(model, Checkpoint) else load_checkpoint(model)
    run_cfg = run_cfg or (RunConfig.from_dict(ckpt.config) if ckpt.config
                          else RunConfig())
    params = ckpt.params
    net = run_cfg.net

    sources = {m: v for m, v in session.volumes.items() if m != target}
    if not sources:
        raise ConfigError(
            f"session {session.case_id!r} has no source modality besides "
            f"{target!r}"
        )
    pre_cfg = evaluation_config(run_cfg.preprocess)
    prepared = preprocess_session(
        Session(case_id=session.case_id, volumes=sources), pre_cfg
    )
    ps = patchify(prepared, pre_cfg.patch_size)

    n_grid = ps.patches_per_modality
    p3 = int(np.prod(pre_cfg.patch_size))
    target_id = len(ps.modalities)
    lattice_valid = ps.valid.reshape(target_id, n_grid).any(axis=0)
    full = PatchSet(
        patches=np.concatenate([ps.patches,
                                np.zeros((n_grid, p3), dtype=np.float32)]),
        extent_mask=np.concatenate([ps.extent_mask,
                                    np.ones((n_grid, p3), dtype=bool)]),
        modality_ids=np.concatenate([ps.modality_ids,
                                     np.full(n_grid, target_id, np.int32)]),
        coords=np.concatenate([ps.coords, ps.coords[:n_grid]]),
        valid=np.concatenate([ps.valid, lattice_valid]),
        grid=ps.grid,
        patch_size=ps.patch_size,
        modalities=ps.modalities + [target],
    )
    plan = MaskPlan(
        hidden=target_id * n_grid + np.flatnonzero(lattice_valid),
        dropped_modalities=frozenset({target_id}),
        ratio=0.0,
    )
    src = embedding_source(run_cfg)
    cache = EmbeddingCache()
    embeddings = np.stack([
        embed_modality(m, src, cache).vector for m in full.modalities
    ])
    batch = TokenBatch(sessions=[SessionTokens(
        case_id=session.case_id, patch_set=full, plan=plan,
        modality_embeddings=embeddings,
    )])
    latents, _ = encode(batch, params, net)
    recons = decode(latents, batch, params, net)
    patches = np.zeros((n_grid, p3), dtype=np.float32)
    patches[lattice_valid] = recons[0].astype(np.float32)
    voxels = assemble_from_patches(patches, ps.grid, ps.patch_size)
    dims = voxels.shape
    return Volume(voxels=voxels, modality=target,
                  valid_extent=tuple((0, d) for d in dims))
