"""Reconstructing a whole absent modality from the present ones.

The masking machinery doubles as an imputation mechanism: build the token
sequence from the present modalities (all visible) plus an all-hidden
lattice for the target modality, and let the decoder fill it in. The
target's embedding comes from the hash-seeded source, so even a sequence
name never seen in training gets a well-defined lattice.
"""

import tempfile
from pathlib import Path

import numpy as np

from modmae import (
    NetConfig,
    PreprocessConfig,
    RunConfig,
    SynthSource,
    SynthSpec,
    impute_modality,
    pretrain_loop,
    preprocess_session,
)
from modmae.corpus import Session
from modmae.preprocess import evaluation_config

out = Path(tempfile.mkdtemp(prefix="modmae_demo_"))
cfg = RunConfig(
    seed=13,
    batch_size=2,
    epochs=400,
    rho=0.5,
    p_drop=0.5,        # train with full-modality drops so imputation works
    cache_sessions=True,
    checkpoint_every=0,
    net=NetConfig(d_e=64, d_d=64, layers_enc=2, layers_dec=2, heads=4,
                  d_m=32, patch_size=(8, 8, 8), max_grid=(4, 4, 4)),
    # deterministic pipeline so cached training content matches the
    # held-out truth we score against
    preprocess=PreprocessConfig(target_shape=(32, 32, 32),
                                patch_size=(8, 8, 8), seed=13,
                                bias_prob=0.0, noise_prob=0.0,
                                contrast_prob=0.0, flip_prob=0.0,
                                rotate_bound=0.0),
    checkpoint_dir=str(out),
)
spec = SynthSpec(modalities=("t1", "flair"), dims=(32, 32, 32), n_cases=2)
source = SynthSource(spec, seed=20)

print("pretraining with modality drops (p_drop=0.5)...")
ckpt, _ = pretrain_loop(cfg, source, out_dir=out)

session = source.load(source.case_ids()[0])
imputed = impute_modality(ckpt, session, "flair", run_cfg=cfg)
print(f"\nimputed 'flair' from ['t1']: dims={imputed.dims}")

# the target was actually present, so the held-out truth scores the result;
# error is measured the way the training loss counts voxels: inside valid
# patches and inside the source extent
from modmae import patchify
from modmae.tokenizer import split_into_patches

truth_prep = preprocess_session(
    Session(case_id="truth", volumes={"flair": session.volumes["flair"]}),
    evaluation_config(cfg.preprocess),
)
ps = patchify(truth_prep, cfg.preprocess.patch_size)
imp_patches = split_into_patches(imputed.voxels, cfg.preprocess.patch_size)
mask = ps.extent_mask[ps.valid]
mse = float(((imp_patches[ps.valid] - ps.patches[ps.valid]) ** 2
             * mask).sum() / mask.sum())
baseline = float((ps.patches[ps.valid] ** 2 * mask).sum() / mask.sum())
print(f"masked MSE vs held-out truth: {mse:.4f} "
      f"(predict-zero baseline {baseline:.4f})")

unseen = impute_modality(ckpt, session, "t2-star", run_cfg=cfg)
print(f"\nan unseen sequence name also works: imputed 't2-star' "
      f"dims={unseen.dims}, finite={np.isfinite(unseen.voxels).all()}")
print("(its hash-seeded embedding conditions the mask-token lattice)")
