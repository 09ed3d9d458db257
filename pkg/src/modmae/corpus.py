"""Case discovery, the session-level case manifest, and volume file IO.

Volumes are stored as uncompressed single-file NIfTI-1: a 348-byte header,
a 4-byte pad to vox_offset 352, then the voxel body (x fastest, the
standard's column-major layout).  Only the header fields this package
relies on are interpreted: dim, datatype, pixdim, scl_slope/inter, magic.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateModalityError,
    FormatError,
    IoError,
    NotFoundError,
    UnsupportedDatatypeError,
    UnsupportedShapeError,
)
from .modality_embed import normalize_modality_name

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes accepted on read; writes always use float32 (16).
_DTYPES = {
    2: "u1",
    4: "i2",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
}


@dataclass
class RawVolume:
    """A 3D voxel grid straight off disk."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    voxels: np.ndarray
    modality: str = ""

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if tuple(self.voxels.shape) != self.dims:
            raise ValueError(
                f"voxel array shape {self.voxels.shape} != dims {self.dims}"
            )


@dataclass
class Session:
    """All volumes of one imaging session, keyed by canonical modality."""

    case_id: str
    volumes: dict[str, RawVolume]

    def __post_init__(self):
        if not self.volumes:
            raise ValueError(f"session {self.case_id!r} has no modalities")

    @property
    def modalities(self) -> list[str]:
        return list(self.volumes)


@dataclass
class CaseManifest:
    """Nested index case_id -> modality -> relative path (the training dictionary)."""

    root: Path
    entries: dict[str, dict[str, str]] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def case_ids(self) -> list[str]:
        return list(self.entries)

    def resolve(self, case_id: str, modality: str) -> Path:
        return Path(self.root) / self.entries[case_id][modality]


def read_volume(path) -> RawVolume:
    """Parse an uncompressed NIfTI-1 file into a float32 RawVolume.

    Endianness is detected from the header-size field; integer and float
    bodies are accepted and mapped through scl_slope/scl_inter.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = fh.read(HEADER_SIZE)
            if len(header) < HEADER_SIZE:
                raise FormatError(f"{path}: truncated header")
            if header[344:348] != MAGIC:
                raise FormatError(f"{path}: bad magic {header[344:348]!r}")
            (sizeof_hdr,) = struct.unpack("<i", header[0:4])
            if sizeof_hdr == HEADER_SIZE:
                bo = "<"
            elif struct.unpack(">i", header[0:4])[0] == HEADER_SIZE:
                bo = ">"
            else:
                raise FormatError(f"{path}: header size field {sizeof_hdr}")

            dim = struct.unpack(bo + "8h", header[40:56])
            if dim[0] != 3:
                raise UnsupportedShapeError(f"{path}: {dim[0]}-dimensional image")
            dims = tuple(int(d) for d in dim[1:4])
            if any(d <= 0 for d in dims):
                raise FormatError(f"{path}: nonpositive dim {dims}")
            (datatype,) = struct.unpack(bo + "h", header[70:72])
            if datatype not in _DTYPES:
                raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
            pixdim = struct.unpack(bo + "8f", header[76:108])
            spacing = tuple(float(p) for p in pixdim[1:4])
            if any(not np.isfinite(s) or s <= 0 for s in spacing):
                raise FormatError(f"{path}: nonpositive pixdim {spacing}")
            (vox_offset,) = struct.unpack(bo + "f", header[108:112])
            slope, inter = struct.unpack(bo + "2f", header[112:120])

            offset = int(vox_offset)
            if offset < HEADER_SIZE:
                raise FormatError(f"{path}: vox_offset {vox_offset}")
            fh.seek(offset)
            dtype = np.dtype(bo + _DTYPES[datatype])
            count = dims[0] * dims[1] * dims[2]
            body = fh.read(count * dtype.itemsize)
            if len(body) < count * dtype.itemsize:
                raise IoError(f"{path}: truncated data section")
    except OSError as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(f"{path}: {exc}") from exc

    flat = np.frombuffer(body, dtype=dtype)
    voxels = flat.reshape(dims, order="F").astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        scale = np.float32(slope if slope != 0.0 else 1.0)
        voxels = voxels * scale + np.float32(inter)
    return RawVolume(dims=dims, spacing=spacing, voxels=voxels)


def write_volume(volume: RawVolume, path) -> None:
    """Write a RawVolume as NIfTI-1 (float32 little-endian body)."""
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *volume.dims, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    struct.pack_into("<8f", header, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    struct.pack_into("<B", header, 123, 2)  # spatial units: mm
    header[344:348] = MAGIC

    body = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(header))
            fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
            fh.write(body)
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc


def scan_corpus(root) -> CaseManifest:
    """Build the manifest from a tree of <root>/<case_id>/<modality>.nii files.

    Deterministic: cases ordered lexicographically, modalities likewise.
    """
    root = Path(root)
    if not root.is_dir():
        raise IoError(f"{root}: not a readable directory")
    entries: dict[str, dict[str, str]] = {}
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        modalities: dict[str, str] = {}
        for item in sorted(case_dir.iterdir()):
            if not item.is_file() or item.suffix.lower() != ".nii":
                continue
            name = normalize_modality_name(item.name)
            if name in modalities:
                raise DuplicateModalityError(case_dir.name, name)
            if not os.access(item, os.R_OK):
                raise IoError(f"{item}: not readable")
            modalities[name] = item.relative_to(root).as_posix()
        if modalities:
            entries[case_dir.name] = dict(sorted(modalities.items()))
    return CaseManifest(root=root, entries=entries)


def load_session(manifest: CaseManifest, case_id: str) -> Session:
    """Read all modalities of one case, in lexicographic modality order."""
    if case_id not in manifest.entries:
        raise NotFoundError(case_id)
    volumes: dict[str, RawVolume] = {}
    for modality in sorted(manifest.entries[case_id]):
        vol = read_volume(manifest.resolve(case_id, modality))
        vol.modality = modality
        volumes[modality] = vol
    return Session(case_id=case_id, volumes=volumes)


def save_manifest(manifest: CaseManifest, path) -> None:
    """Persist the nested {case: {modality: path}} map as sorted JSON, atomically."""
    path = Path(path)
    payload = json.dumps(manifest.entries, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoError(f"{path}: {exc}") from exc


def load_manifest(path, root=None) -> CaseManifest:
    """Load a manifest JSON; paths resolve against `root` (default: its directory)."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict) or not all(
        isinstance(v, dict) and all(isinstance(p, str) for p in v.values())
        for v in raw.values()
    ):
        raise FormatError(f"{path}: expected {{case: {{modality: path}}}}")
    entries = {
        case: dict(sorted(mods.items())) for case, mods in sorted(raw.items())
    }
    return CaseManifest(root=Path(root) if root else path.parent, entries=entries)
