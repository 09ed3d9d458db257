"""Optimization, training loops, checkpoints, and synthetic phantom data.

A training run is a pure function of its RunConfig and data source: batch
selection, augmentation, and masking all draw from counter-based streams
keyed by (seed, purpose, step), so single-threaded runs are bit-reproducible
and resuming from a checkpoint replays exactly the steps a straight run
would have taken.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import (
    CaseManifest,
    RawVolume,
    Session,
    load_session,
    read_volume,
    save_manifest,
    scan_corpus,
    write_volume,
)
from .errors import (
    ConfigError,
    FormatError,
    NonFiniteGradientError,
    RangeError,
    ShapeError,
    VersionError,
)
from .modality_embed import EmbeddingCache, EmbeddingSource, load_embedding_table
from .network import (
    NetConfig,
    grid_latents,
    head_classify,
    head_classify_bwd,
    head_segment,
    head_segment_bwd,
    init_params,
    model_backward,
    model_forward,
    scatter_grid_gradient,
)
from .objectives import compute_loss_and_grads, warmup_lambdas
from .preprocess import (
    PreprocessConfig,
    PreparedSession,
    crop_or_pad,
    divisible_pad,
    evaluation_config,
    preprocess_session,
)
from .rng import stable_hash64, stream
from .tokenizer import BatchConfig, assemble_batch

CHECKPOINT_MAGIC = b"BFMC"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4")}


# ------------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Everything a run needs; serializable to the flat JSON config file."""

    seed: int = 0
    batch_size: int = 2
    epochs: int = 1
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_fraction: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    grad_clip: float = 1.0
    rho: float = 0.75
    p_drop: float = 0.2
    lambda_var: float = 0.1
    lambda_cov: float = 0.005
    lambda_warmup_epochs: int = 5
    net: NetConfig = field(default_factory=NetConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    embed_mode: str = "hash"
    embed_table: str | None = None
    embed_fallback: bool = False
    cache_sessions: bool = False
    freeze_encoder: bool = False
    patience: int = 3
    val_fraction: float = 0.2
    checkpoint_dir: str = "run"
    checkpoint_every: int = 1
    metrics_path: str | None = None
    threads: int = 1

    def validate(self) -> "RunConfig":
        if not (0 < self.lr_min <= self.lr_max):
            raise ConfigError(f"need 0 < lr_min <= lr_max, got "
                              f"{self.lr_min}, {self.lr_max}")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ConfigError(f"warmup_fraction={self.warmup_fraction}")
        if self.patience < 1:
            raise ConfigError(f"patience={self.patience} must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if (self.lambda_var > 0 or self.lambda_cov > 0) and self.batch_size < 2:
            raise ConfigError(
                "variance/covariance terms need batch_size >= 2"
            )
        if not (0.0 <= self.rho <= 1.0 and 0.0 <= self.p_drop <= 1.0):
            raise ConfigError(f"rho={self.rho}, p_drop={self.p_drop}")
        self.preprocess.validate()
        return self

    def to_dict(self) -> dict:
        out = {
            k: getattr(self, k)
            for k in (
                "seed", "batch_size", "epochs", "lr_max", "lr_min",
                "warmup_fraction", "weight_decay", "beta1", "beta2",
                "eps_opt", "grad_clip", "rho", "p_drop", "lambda_var",
                "lambda_cov", "lambda_warmup_epochs", "embed_mode",
                "embed_table", "embed_fallback", "cache_sessions",
                "freeze_encoder", "patience", "val_fraction",
                "checkpoint_dir", "checkpoint_every", "metrics_path",
                "threads",
            )
        }
        out["net"] = self.net.to_dict()
        out["preprocess"] = self.preprocess.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = dict(data)
        if "net" in kwargs:
            kwargs["net"] = NetConfig.from_dict(kwargs["net"])
        if "preprocess" in kwargs:
            kwargs["preprocess"] = PreprocessConfig.from_dict(kwargs["preprocess"])
        return cls(**kwargs).validate()


def embedding_source(cfg: RunConfig) -> EmbeddingSource:
    if cfg.embed_mode == "table":
        table = load_embedding_table(cfg.embed_table)
        return EmbeddingSource(mode="table", dim=cfg.net.d_m, table=table,
                               allow_fallback=cfg.embed_fallback)
    return EmbeddingSource(mode="hash", dim=cfg.net.d_m)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict, names=None) -> "OptimState":
        names = sorted(params) if names is None else sorted(names)
        return cls(
            m={k: np.zeros_like(params[k]) for k in names},
            v={k: np.zeros_like(params[k]) for k in names},
        )


def adamw_step(params, grads, state: OptimState, lr,
               beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """In-place AdamW update with decoupled decay applied before the step."""
    if lr < 0:
        raise RangeError(f"lr={lr}")
    names = sorted(state.m)
    for name in names:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in names:
        theta = params[name]
        g = grads[name]
        if weight_decay:
            theta *= 1.0 - lr * weight_decay
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads, max_norm: float, names=None) -> float:
    """Scale gradients to a global norm cap; returns the pre-clip norm."""
    names = sorted(grads) if names is None else sorted(names)
    total = 0.0
    for name in names:
        g = grads[name].astype(np.float64, copy=False)
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for name in names:
            grads[name] *= scale
    return norm


def lr_schedule(step, total_steps, warmup_fraction, lr_max, lr_min):
    """Linear warm-up to lr_max, then cosine decay to lr_min."""
    if not 0 <= step <= total_steps:
        raise RangeError(f"step={step} outside [0, {total_steps}]")
    warm = int(math.floor(warmup_fraction * total_steps))
    if step < warm:
        return lr_max * step / warm
    if total_steps == warm:
        return lr_min
    progress = (step - warm) / (total_steps - warm)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------- synthetic data

@dataclass
class SynthSpec:
    """Deterministic phantom generator spec (desk-scale data substitute)."""

    modalities: tuple = ("flair", "t1")
    dims: tuple[int, int, int] = (32, 32, 32)
    lesion: bool = False
    lesion_radius: float = 4.0
    lesion_center: tuple | None = None
    n_blobs: int = 6
    spacing: tuple = (1.0, 1.0, 1.0)
    n_cases: int = 4
    lesion_fraction: float = 1.0

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "dims": list(self.dims),
            "lesion": self.lesion,
            "lesion_radius": self.lesion_radius,
            "lesion_center": list(self.lesion_center) if self.lesion_center else None,
            "n_blobs": self.n_blobs,
            "spacing": list(self.spacing),
            "n_cases": self.n_cases,
            "lesion_fraction": self.lesion_fraction,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        kwargs = dict(data)
        for key in ("modalities", "dims", "spacing", "lesion_center"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def synth_session(rng: np.random.Generator, spec: SynthSpec,
                  case_id: str = "synth"):
    """Smooth random blobs as shared anatomy, per-modality intensity mixes.

    Returns (Session, label RawVolume or None).  The optional spherical
    lesion is written into every modality and into a binary label volume
    (lattice points within Euclidean distance lesion_radius of the center).
    """
    dims = tuple(int(d) for d in spec.dims)
    if any(d < 16 for d in dims):
        raise RangeError(f"dims {dims} must be at least (16, 16, 16)")
    mods = sorted(spec.modalities)
    grid = np.indices(dims).astype(np.float64)

    n = spec.n_blobs
    centers = rng.uniform(0.2, 0.8, (n, 3)) * np.array(dims)
    sigmas = rng.uniform(min(dims) / 10.0, min(dims) / 5.0, n)
    base_amp = rng.uniform(0.5, 1.5, n)
    mod_mult = rng.uniform(0.5, 1.5, (len(mods), n))

    dist2 = np.zeros((n,) + dims)
    for k in range(n):
        d2 = np.zeros(dims)
        for axis in range(3):
            d2 += (grid[axis] - centers[k, axis]) ** 2
        dist2[k] = d2
    blobs = np.exp(-dist2 / (2.0 * sigmas[:, None, None, None] ** 2))

    center = (np.array(dims) - 1.0) / 2.0
    radii = 0.45 * np.array(dims)
    ellipsoid = np.zeros(dims)
    for axis in range(3):
        ellipsoid += ((grid[axis] - center[axis]) / radii[axis]) ** 2
    head = ellipsoid <= 1.0

    label = None
    lesion_ball = None
    lesion_amp = None
    if spec.lesion:
        lcenter = (np.asarray(spec.lesion_center, dtype=np.float64)
                   if spec.lesion_center is not None
                   else rng.uniform(0.35, 0.65, 3) * np.array(dims))
        lesion_amp = rng.uniform(1.0, 2.0, len(mods))
        d2 = np.zeros(dims)
        for axis in range(3):
            d2 += (grid[axis] - lcenter[axis]) ** 2
        lesion_ball = d2 <= spec.lesion_radius ** 2
        label = RawVolume(dims=dims, spacing=spec.spacing,
                          voxels=lesion_ball.astype(np.float32),
                          modality="label")

    volumes = {}
    for i, mod in enumerate(mods):
        field_sum = np.tensordot(base_amp * mod_mult[i], blobs, axes=(0, 0))
        if lesion_ball is not None:
            field_sum = field_sum + lesion_amp[i] * lesion_ball
        vox = (field_sum * head).astype(np.float32)
        volumes[mod] = RawVolume(dims=dims, spacing=spec.spacing,
                                 voxels=vox, modality=mod)
    return Session(case_id=case_id, volumes=volumes), label


class SynthSource:
    """Session source backed by the phantom generator; fully deterministic."""

    def __init__(self, spec: SynthSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self._ids = [f"synth_{i:03d}" for i in range(spec.n_cases)]

    def case_ids(self) -> list[str]:
        return list(self._ids)

    def _case_spec(self, case_id: str) -> SynthSpec:
        if not self.spec.lesion or self.spec.lesion_fraction >= 1.0:
            return self.spec
        present = stream(self.seed, "lesion", case_id).random() \
            < self.spec.lesion_fraction
        return replace(self.spec, lesion=bool(present))

    def load(self, case_id: str) -> Session:
        session, _ = synth_session(stream(self.seed, "synth", case_id),
                                   self._case_spec(case_id), case_id)
        return session

    def label(self, case_id: str) -> RawVolume | None:
        _, label = synth_session(stream(self.seed, "synth", case_id),
                                 self._case_spec(case_id), case_id)
        return label

    def class_label(self, case_id: str) -> int:
        return int(self.label(case_id) is not None)


class ManifestSource:
    """Session source over a scanned corpus, with optional labels/classes."""

    def __init__(self, manifest: CaseManifest, labels_dir=None, classes=None):
        self.manifest = manifest
        self.labels_dir = Path(labels_dir) if labels_dir else None
        self.classes = classes or {}

    def case_ids(self) -> list[str]:
        return self.manifest.case_ids()

    def load(self, case_id: str) -> Session:
        return load_session(self.manifest, case_id)

    def label(self, case_id: str) -> RawVolume | None:
        if self.labels_dir is None:
            return None
        path = self.labels_dir / f"{case_id}.nii"
        if not path.exists():
            return None
        vol = read_volume(path)
        vol.modality = "label"
        return vol

    def class_label(self, case_id: str) -> int:
        return int(self.classes[case_id])


def as_source(data, seed: int = 0):
    if isinstance(data, SynthSpec):
        return SynthSource(data, seed=seed)
    if isinstance(data, CaseManifest):
        return ManifestSource(data)
    if hasattr(data, "case_ids") and hasattr(data, "load"):
        return data
    raise ConfigError(f"unsupported data source {type(data).__name__}")


def synth_corpus(out_dir, spec: SynthSpec, seed: int = 0) -> CaseManifest:
    """Write a phantom corpus to disk: images/, labels/, classes.json, manifest."""
    out = Path(out_dir)
    images = out / "images"
    labels = out / "labels"
    images.mkdir(parents=True, exist_ok=True)
    source = SynthSource(spec, seed=seed)
    classes = {}
    for case_id in source.case_ids():
        case_dir = images / case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        session = source.load(case_id)
        for mod, vol in session.volumes.items():
            write_volume(vol, case_dir / f"{mod}.nii")
        label = source.label(case_id)
        if label is not None:
            labels.mkdir(parents=True, exist_ok=True)
            write_volume(label, labels / f"{case_id}.nii")
        classes[case_id] = int(label is not None)
    with open(out / "classes.json", "w", encoding="utf-8") as fh:
        json.dump(classes, fh, indent=2, sort_keys=True)
    scanned = scan_corpus(images)
    # paths in the manifest file are relative to the manifest's directory
    manifest = CaseManifest(root=out, entries={
        case: {mod: f"images/{rel}" for mod, rel in mods.items()}
        for case, mods in scanned.entries.items()
    })
    save_manifest(manifest, out / "manifest.json")
    return manifest


# -------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optim: OptimState
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _write_tensor(fh, name: str, tensor: np.ndarray) -> None:
    data = np.ascontiguousarray(tensor, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", 1))  # dtype tag: float32
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(data.tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """magic, u32 version, u64 metadata length, JSON metadata, named tensors."""
    meta = {
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "opt_t": ckpt.optim.t,
        "rng": {"seed": ckpt.config.get("seed", 0)},
        "config": ckpt.config,
        "meta": ckpt.meta,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in sorted(ckpt.params):
            _write_tensor(fh, f"param/{name}", ckpt.params[name])
        for name in sorted(ckpt.optim.m):
            _write_tensor(fh, f"adam_m/{name}", ckpt.optim.m[name])
        for name in sorted(ckpt.optim.v):
            _write_tensor(fh, f"adam_v/{name}", ckpt.optim.v[name])


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def done(self) -> bool:
        return self.pos >= len(self.data)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: version {version}, "
                           f"expected {CHECKPOINT_VERSION}")
    (meta_len,) = struct.unpack("<Q", reader.take(8))
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: bad metadata block") from exc

    tensors: dict[str, np.ndarray] = {}
    while not reader.done():
        (name_len,) = struct.unpack("<I", reader.take(4))
        name = reader.take(name_len).decode("utf-8")
        (tag,) = struct.unpack("<I", reader.take(4))
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"{path}: unknown dtype tag {tag}")
        (rank,) = struct.unpack("<I", reader.take(4))
        shape = struct.unpack(f"<{rank}Q", reader.take(8 * rank))
        dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(shape)) if rank else 1
        raw = reader.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    params = {k[len("param/"):]: v for k, v in tensors.items()
              if k.startswith("param/")}
    optim = OptimState(
        m={k[len("adam_m/"):]: v for k, v in tensors.items()
           if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in tensors.items()
           if k.startswith("adam_v/")},
        t=int(meta.get("opt_t", 0)),
    )
    return Checkpoint(params=params, optim=optim,
                      step=int(meta.get("step", 0)),
                      epoch=int(meta.get("epoch", 0)),
                      config=meta.get("config", {}),
                      meta=meta.get("meta", {}))


# ------------------------------------------------------------ training loops

def _prepare(source, case_id: str, pre_cfg: PreprocessConfig) -> PreparedSession:
    return preprocess_session(source.load(case_id), pre_cfg)


def _metrics_line(step, epoch, lr, report, grad_norm) -> str:
    record = {
        "step": int(step), "epoch": int(epoch), "lr": float(lr),
        "l_mae": report.l_mae, "l_var": report.l_var, "l_cov": report.l_cov,
        "l_total": report.l_total, "lambda_var": report.lambda_var,
        "lambda_cov": report.lambda_cov, "grad_norm": float(grad_norm),
    }
    return json.dumps(record)


def pretrain_loop(cfg: RunConfig, data, out_dir=None, resume_from=None):
    """Masked-reconstruction pretraining; returns (Checkpoint, metrics path).

    Writes a rolling `last.bfmc` every epoch (numbered copies every
    cfg.checkpoint_every epochs) plus `final.bfmc`, and one JSON metrics
    line per step.  Aborts (raising) on non-finite loss or gradients; the
    last epoch checkpoint stays on disk.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(cfg.metrics_path) if cfg.metrics_path else out / "metrics.jsonl"
    metrics_path.parent.mkdir(parents=True, exist_ok=True)

    source = as_source(data, seed=cfg.seed)
    case_ids = source.case_ids()
    if not case_ids:
        raise ConfigError("data source has no cases")
    steps_per_epoch = max(1, math.ceil(len(case_ids) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    if resume_from is not None:
        ckpt = (resume_from if isinstance(resume_from, Checkpoint)
                else load_checkpoint(resume_from))
        net_ref = init_params(cfg.net, seed=cfg.seed)
        for name, ref in net_ref.items():
            if name not in ckpt.params or ckpt.params[name].shape != ref.shape:
                raise ShapeError(f"checkpoint incompatible at {name}")
        params = {k: v.copy() for k, v in ckpt.params.items()}
        optim = OptimState(m={k: v.copy() for k, v in ckpt.optim.m.items()},
                           v={k: v.copy() for k, v in ckpt.optim.v.items()},
                           t=ckpt.optim.t)
        start_step = ckpt.step
    else:
        params = init_params(cfg.net, seed=cfg.seed)
        optim = OptimState.zeros_like(params)
        start_step = 0

    src = embedding_source(cfg)
    cache = EmbeddingCache()
    prepared_cache: dict[str, PreparedSession] = {}
    mode = "a" if resume_from is not None and metrics_path.exists() else "w"
    metrics_fh = open(metrics_path, mode, encoding="utf-8")

    def snapshot(step, epoch):
        return Checkpoint(params=params, optim=optim, step=step, epoch=epoch,
                          config=cfg.to_dict(), meta={"task": "pretrain"})

    try:
        for step in range(start_step, total_steps):
            epoch = step // steps_per_epoch
            picker = stream(cfg.seed, "batch", step)
            chosen = [case_ids[i] for i in
                      picker.integers(0, len(case_ids), cfg.batch_size)]

            prepared = []
            for cid in chosen:
                if cfg.cache_sessions:
                    if cid not in prepared_cache:
                        prepared_cache[cid] = _prepare(source, cid, cfg.preprocess)
                    prepared.append(prepared_cache[cid])
                else:
                    aug_seed = stable_hash64(f"aug|{cfg.seed}|{step}")
                    pre_cfg = replace(cfg.preprocess, seed=aug_seed)
                    prepared.append(_prepare(source, cid, pre_cfg))

            bcfg = BatchConfig(patch_size=cfg.preprocess.patch_size,
                               rho=cfg.rho, p_drop=cfg.p_drop, seed=cfg.seed)
            batch = assemble_batch(
                prepared, bcfg, src, cache,
                mask_seed=stable_hash64(f"mask|{cfg.seed}|{step}"),
            )

            lam_var, lam_cov = warmup_lambdas(
                step, steps_per_epoch, cfg.lambda_var, cfg.lambda_cov,
                cfg.lambda_warmup_epochs,
            )
            report, grads = compute_loss_and_grads(
                params, cfg.net, batch, lam_var, lam_cov
            )
            grad_norm = clip_gradients(grads, cfg.grad_clip)
            lr = lr_schedule(step, total_steps, cfg.warmup_fraction,
                             cfg.lr_max, cfg.lr_min)
            adamw_step(params, grads, optim, lr, cfg.beta1, cfg.beta2,
                       cfg.eps_opt, cfg.weight_decay)

            metrics_fh.write(_metrics_line(step, epoch, lr, report, grad_norm) + "\n")
            if (step + 1) % steps_per_epoch == 0:
                save_checkpoint(snapshot(step + 1, epoch + 1), out / "last.bfmc")
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(snapshot(step + 1, epoch + 1),
                                    out / f"ckpt_epoch_{epoch + 1:04d}.bfmc")
    finally:
        metrics_fh.close()

    final = snapshot(total_steps, cfg.epochs)
    save_checkpoint(final, out / "final.bfmc")
    return final, metrics_path


# ----------------------------------------------------------------- finetune

_SEG_HEAD = ("head_seg.w", "head_seg.b")
_CLS_HEAD = ("head_cls.w", "head_cls.b")


def trainable_names(params, task: str, freeze_encoder: bool) -> list[str]:
    head = _SEG_HEAD if task == "segmentation" else _CLS_HEAD
    if freeze_encoder:
        return list(head)
    names = [n for n in params
             if n.startswith(("enc.", "pos_enc.", "patch_proj."))
             or n == "mod_proj.enc"]
    return names + list(head)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def seg_loss_and_grad(logits: np.ndarray, target: np.ndarray):
    """0.5 * soft Dice + 0.5 * BCE-with-logits over the full volume."""
    t = target.astype(np.float64).ravel()
    y = logits.astype(np.float64).ravel()
    p = _sigmoid(y)
    smooth = 1.0
    inter = (p * t).sum()
    denom = p.sum() + t.sum() + smooth
    dice = (2.0 * inter + smooth) / denom
    d_dice_dp = 2.0 * (t * denom - (2.0 * inter + smooth)) / denom ** 2
    bce = float(np.mean(np.logaddexp(0.0, y) - t * y))
    d_bce_dy = (p - t) / y.size
    loss = 0.5 * (1.0 - dice) + 0.5 * bce
    d_y = -0.5 * d_dice_dp * p * (1.0 - p) + 0.5 * d_bce_dy
    return float(loss), d_y.reshape(logits.shape)


def cls_loss_and_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over rows; returns (loss, d_logits)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    probs = expo / expo.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels] + 1e-300).mean())
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def _prepare_label(label: RawVolume, pre_cfg: PreprocessConfig) -> np.ndarray:
    vol = crop_or_pad(label, pre_cfg.target_shape)
    vol = divisible_pad(vol, pre_cfg.patch_size)
    return (vol.voxels > 0.5).astype(np.float32)


def _segmentation_forward(params, cfg, tokens, latents):
    ref = 0  # lexicographically first modality carries the voxel head
    grid = grid_latents(tokens, latents, ref, cfg.net)
    logits = head_segment(grid, params, cfg.net)
    return ref, grid, logits


def finetune(cfg: RunConfig, task: str, init, data, out_dir=None) -> Checkpoint:
    """Adapt a pretrained encoder to segmentation or classification.

    The decoder is excluded from the graph; masking is disabled (all valid
    patches visible).  Early stopping tracks validation Dice or accuracy
    with cfg.patience; the best parameters are restored before saving.
    """
    cfg.validate()
    if task not in ("segmentation", "classification"):
        raise ConfigError(f"unknown finetune task {task!r}")
    ckpt = init if isinstance(init, Checkpoint) else load_checkpoint(init)
    reference = init_params(cfg.net, seed=cfg.seed)
    for name, ref in reference.items():
        have = ckpt.params.get(name)
        if have is None or have.shape != ref.shape:
            raise ShapeError(f"checkpoint incompatible with NetConfig at {name}")
    params = {k: v.copy() for k, v in ckpt.params.items()}

    out = Path(out_dir) if out_dir is not None else Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = as_source(data, seed=cfg.seed)
    ids = source.case_ids()
    if not ids:
        raise ConfigError("data source has no cases")
    n_val = int(round(cfg.val_fraction * len(ids)))
    n_val = min(max(n_val, 1 if len(ids) > 1 else 0), len(ids) - 1)
    train_ids, val_ids = ids[:len(ids) - n_val], ids[len(ids) - n_val:]

    pre_cfg = evaluation_config(cfg.preprocess)
    prepared = {cid: _prepare(source, cid, pre_cfg) for cid in ids}
    if task == "segmentation":
        labels = {}
        for cid in ids:
            raw = source.label(cid)
            if raw is None:
                raise ConfigError(f"case {cid!r} has no label volume")
            labels[cid] = _prepare_label(raw, pre_cfg)
    else:
        labels = {cid: int(source.class_label(cid)) for cid in ids}

    src = embedding_source(cfg)
    cache = EmbeddingCache()
    bcfg = BatchConfig(patch_size=cfg.preprocess.patch_size,
                       rho=0.0, p_drop=0.0, seed=cfg.seed)

    names = trainable_names(params, task, cfg.freeze_encoder)
    optim = OptimState.zeros_like(params, names)
    total_steps = max(1, cfg.epochs * max(1, math.ceil(len(train_ids) / cfg.batch_size)))

    def batch_forward(batch_ids):
        batch = assemble_batch([prepared[c] for c in batch_ids], bcfg, src, cache)
        state = model_forward(params, cfg.net, batch, with_decoder=False)
        return batch, state

    def evaluate(eval_ids) -> float:
        scores = []
        for cid in eval_ids:
            batch, state = batch_forward([cid])
            if task == "segmentation":
                _, _, logits = _segmentation_forward(params, cfg,
                                                     batch.sessions[0],
                                                     state.latents[0])
                pred = logits > 0.0
                truth = labels[cid] > 0.5
                inter = np.logical_and(pred, truth).sum()
                total = pred.sum() + truth.sum()
                scores.append(1.0 if total == 0 else 2.0 * inter / total)
            else:
                logit = head_classify(state.pooled[0], params)
                scores.append(float(int(np.argmax(logit)) == labels[cid]))
        return float(np.mean(scores)) if scores else 0.0

    best_metric = -np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    bad_epochs = 0
    step = 0
    stopped_epoch = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "ft-order", epoch).permutation(len(train_ids))
        shuffled = [train_ids[i] for i in order]
        for lo in range(0, len(shuffled), cfg.batch_size):
            batch_ids = shuffled[lo:lo + cfg.batch_size]
            batch, state = batch_forward(batch_ids)
            n = len(batch_ids)
            d_pooled = np.zeros_like(state.pooled)
            d_latents = [None] * n
            head_grads: dict = {}
            if task == "segmentation":
                for s, cid in enumerate(batch_ids):
                    ref, grid, logits = _segmentation_forward(
                        params, cfg, batch.sessions[s], state.latents[s]
                    )
                    _, d_logits = seg_loss_and_grad(logits, labels[cid])
                    d_grid = head_segment_bwd(
                        (d_logits / n).astype(grid.dtype),
                        grid, params, cfg.net, head_grads,
                    )
                    d_latents[s] = scatter_grid_gradient(
                        batch.sessions[s], d_grid, ref, state.latents[s].shape[0]
                    )
            else:
                logits = head_classify(state.pooled, params)
                y = np.array([labels[c] for c in batch_ids])
                _, d_logits = cls_loss_and_grad(logits, y)
                d_pooled = head_classify_bwd(
                    d_logits.astype(state.pooled.dtype), state.pooled,
                    params, head_grads,
                )
            grads = model_backward(params, cfg.net, state,
                                   d_pooled=d_pooled, d_latents=d_latents)
            for key, val in head_grads.items():
                grads[key] = grads[key] + val.astype(grads[key].dtype)
            clip_gradients(grads, cfg.grad_clip, names)
            lr = lr_schedule(step, total_steps, cfg.warmup_fraction,
                             cfg.lr_max, cfg.lr_min)
            adamw_step(params, grads, optim, lr, cfg.beta1, cfg.beta2,
                       cfg.eps_opt, cfg.weight_decay)
            step += 1

        metric = evaluate(val_ids if val_ids else train_ids)
        stopped_epoch = epoch + 1
        if metric > best_metric:
            best_metric = metric
            best_params = {k: v.copy() for k, v in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    result = Checkpoint(
        params=best_params, optim=optim, step=step, epoch=stopped_epoch,
        config=cfg.to_dict(),
        meta={"task": task, "best_metric": float(best_metric),
              "metric_name": "dice" if task == "segmentation" else "accuracy"},
    )
    save_checkpoint(result, out / "finetuned.bfmc")
    return result
