import numpy as np
import pytest

from modmae.corpus import RawVolume, Session
from modmae.modality_embed import EmbeddingSource
from modmae.network import NetConfig
from modmae.preprocess import PreprocessConfig, evaluation_config, preprocess_session
from modmae.tokenizer import BatchConfig, assemble_batch


def make_volume(mod: str, dims=(8, 8, 8), seed=0, offset=2.0) -> RawVolume:
    rng = np.random.default_rng(seed)
    vox = rng.normal(0.0, 1.0, dims).astype(np.float32) + offset
    return RawVolume(dims=dims, spacing=(1.0, 1.0, 1.0), voxels=vox, modality=mod)


def make_session(case_id="case", mods=("flair", "t1"), dims=(8, 8, 8), seed=0):
    volumes = {
        m: make_volume(m, dims=dims, seed=seed + i)
        for i, m in enumerate(sorted(mods))
    }
    return Session(case_id=case_id, volumes=volumes)


@pytest.fixture
def tiny_net() -> NetConfig:
    return NetConfig(d_e=16, d_d=8, layers_enc=2, layers_dec=1, heads=4,
                     d_m=16, patch_size=(4, 4, 4), max_grid=(2, 2, 2))


@pytest.fixture
def tiny_pre() -> PreprocessConfig:
    return evaluation_config(
        PreprocessConfig(target_shape=(8, 8, 8), patch_size=(4, 4, 4), seed=3)
    )


@pytest.fixture
def tiny_batch(tiny_pre):
    sessions = [make_session(c, seed=i) for i, c in enumerate(("a", "b"))]
    prepared = [preprocess_session(s, tiny_pre) for s in sessions]
    cfg = BatchConfig(patch_size=(4, 4, 4), rho=0.5, p_drop=0.3, seed=11)
    return assemble_batch(prepared, cfg, EmbeddingSource(mode="hash", dim=16))
