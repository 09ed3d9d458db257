"""Patch tokens and padding-aware masking.

Tokenizes a prepared session into non-overlapping patches, then samples
mask plans. Three properties to watch: padded or empty patches are never
hidden, the hidden count is exactly round(rho * V), and a full-modality
drop hides every valid patch of that modality (the imputation mechanism).
"""

import numpy as np

from modmae import (
    EmbeddingSource,
    PreprocessConfig,
    SynthSpec,
    patchify,
    preprocess_session,
    sample_mask,
    synth_session,
)
from modmae.preprocess import evaluation_config
from modmae.tokenizer import round_half_away

spec = SynthSpec(modalities=("t1", "flair"), dims=(24, 32, 32))
session, _ = synth_session(np.random.default_rng(1), spec, "demo")
cfg = evaluation_config(PreprocessConfig(
    target_shape=(48, 32, 32),   # a full ring of padding patches on axis 0
    patch_size=(8, 8, 8), seed=0))
prepared = preprocess_session(session, cfg)

ps = patchify(prepared, cfg.patch_size)
print(f"grid {ps.grid} -> {ps.patches_per_modality} patches per modality, "
      f"{ps.n_patches} total over {len(ps.modalities)} modalities")
print(f"valid patches: {int(ps.valid.sum())} "
      f"(invalid = fully padded or empty)")

rho = 0.75
plan = sample_mask(ps, rho=rho, p_drop=0.0, rng=np.random.default_rng(7))
v = int(ps.valid.sum())
print(f"\nrho={rho}: hidden {plan.hidden.size} of {v} valid "
      f"(round(rho*V) = {round_half_away(rho * v)})")
invalid = set(np.flatnonzero(~ps.valid).tolist())
print("hidden ∩ invalid is empty:", not (plan.hidden_set() & invalid))

# modality drops: with p_drop=1 one modality is always fully hidden
drops = []
for seed in range(200):
    plan = sample_mask(ps, rho=0.5, p_drop=1.0,
                       rng=np.random.default_rng(seed))
    (mod,) = plan.dropped_modalities
    drops.append(mod)
    mod_valid = set(np.flatnonzero(ps.valid
                                   & (ps.modality_ids == mod)).tolist())
    assert mod_valid <= plan.hidden_set()
counts = {ps.modalities[m]: drops.count(m) for m in set(drops)}
print(f"\n200 forced drops, chosen uniformly: {counts}")

# per-patch hide frequency is uniform across valid patches
trials = 1000
freq = np.zeros(ps.n_patches)
for seed in range(trials):
    plan = sample_mask(ps, rho=0.5, p_drop=0.0,
                       rng=np.random.default_rng(seed))
    freq[plan.hidden] += 1
valid_freq = freq[ps.valid] / trials
print(f"\nhide frequency over valid patches: mean={valid_freq.mean():.3f} "
      f"min={valid_freq.min():.3f} max={valid_freq.max():.3f} "
      f"(target 0.5)")
print("invalid patches were hidden",
      int(freq[~ps.valid].sum()), "times out of", trials * 1000)

# the embedding side: any modality name gets a deterministic unit vector
src = EmbeddingSource(mode="hash", dim=64)
from modmae import embed_modality

for name in ("t1", "T1 ", "some-unseen-sequence"):
    vec = embed_modality(name, src).vector
    print(f"embed({name!r}) -> canonical {embed_modality(name, src).name!r}, "
          f"norm {np.linalg.norm(vec):.6f}, head {np.round(vec[:3], 4)}")
