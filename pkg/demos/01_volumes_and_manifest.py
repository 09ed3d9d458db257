"""Volumes on disk and the case manifest.

Generates a small phantom corpus, writes each modality as an uncompressed
NIfTI-1 file, scans the tree into the nested {case: {modality: path}}
manifest, and shows that both the volume files and the manifest survive a
round trip unchanged.
"""

import tempfile
from pathlib import Path

import numpy as np

from modmae import (
    SynthSpec,
    load_manifest,
    load_session,
    read_volume,
    save_manifest,
    scan_corpus,
    synth_session,
    write_volume,
)

root = Path(tempfile.mkdtemp(prefix="modmae_demo_")) / "corpus"
print(f"corpus root: {root}")

spec = SynthSpec(modalities=("t1", "flair", "t2"), dims=(32, 32, 32))
for i in range(3):
    session, _ = synth_session(np.random.default_rng(i), spec, f"sub_{i:02d}")
    case_dir = root / f"sub_{i:02d}"
    case_dir.mkdir(parents=True)
    for mod, vol in session.volumes.items():
        write_volume(vol, case_dir / f"{mod}.nii")
print("wrote 3 cases x 3 modalities")

# one file, inspected
example = root / "sub_00" / "t1.nii"
vol = read_volume(example)
print(f"\n{example.name}: dims={vol.dims} spacing={vol.spacing} "
      f"mean={vol.voxels.mean():.4f}")
size = example.stat().st_size
print(f"file size = 348 header + 4 pad + {np.prod(vol.dims) * 4} body "
      f"= {size} bytes")

# round trip is exact for float32 volumes
copy_path = root / "copy.nii"
write_volume(vol, copy_path)
again = read_volume(copy_path)
print("read(write(v)) bit-identical:",
      again.voxels.tobytes() == vol.voxels.tobytes())
copy_path.unlink()

# the training dictionary: case -> modality -> relative path
manifest = scan_corpus(root)
print(f"\nmanifest has {len(manifest)} cases")
for case, mods in manifest.entries.items():
    print(f"  {case}: {sorted(mods)}")

manifest_path = root / "manifest.json"
save_manifest(manifest, manifest_path)
back = load_manifest(manifest_path, root=root)
print("manifest JSON round-trips:", back.entries == manifest.entries)

session = load_session(back, "sub_01")
print(f"\nloaded session sub_01 with modalities {session.modalities} "
      "(lexicographic order)")
