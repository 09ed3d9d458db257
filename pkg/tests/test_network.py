import numpy as np
import pytest

from modmae.errors import EmptySessionError, RangeError, ShapeError
from modmae.modality_embed import EmbeddingSource
from modmae.network import (
    cln,
    decode,
    encode,
    grid_latents,
    head_classify,
    head_segment,
    init_params,
)
from modmae.preprocess import PreprocessConfig, evaluation_config, preprocess_session
from modmae.tokenizer import BatchConfig, MaskPlan, assemble_batch

from conftest import make_session


def tiny_batch_of(case_ids, tiny_pre, rho=0.5, p_drop=0.0, seed=11):
    sessions = [make_session(c, seed=i) for i, c in enumerate(case_ids)]
    prepared = [preprocess_session(s, tiny_pre) for s in sessions]
    return assemble_batch(
        prepared,
        BatchConfig(patch_size=(4, 4, 4), rho=rho, p_drop=p_drop, seed=seed),
        EmbeddingSource(mode="hash", dim=16),
    )


class TestCln:
    def test_zero_generators_reduce_to_plain_layernorm(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 8))
        m = rng.normal(size=(5, 4))
        zeros = np.zeros((4, 8))
        zb = np.zeros(8)
        out = cln(x, m, zeros, zb, zeros, zb)
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-5)
        assert np.allclose(out, expected, atol=1e-12)

    def test_constant_row_returns_beta(self):
        rng = np.random.default_rng(1)
        x = np.full((1, 6), 3.7)
        m = rng.normal(size=(1, 4))
        wg = rng.normal(size=(4, 6))
        bg = rng.normal(size=6)
        wb = rng.normal(size=(4, 6))
        bb = rng.normal(size=6)
        out = cln(x, m, wg, bg, wb, bb)
        beta = m @ wb + bb
        assert np.allclose(out, beta, atol=1e-12)

    def test_two_point_hand_value(self):
        x = np.array([1.0, -1.0])
        m = np.zeros(2)
        z22 = np.zeros((2, 2))
        out = cln(x, m, z22, np.zeros(2), z22, np.zeros(2))
        expected = 1.0 / np.sqrt(1.0 + 1e-5)
        assert np.allclose(out, [expected, -expected], atol=1e-12)
        assert abs(out[0] - 0.99999) < 1e-4


class TestEncode:
    def test_shapes(self, tiny_net, tiny_pre, tiny_batch):
        params = init_params(tiny_net, seed=0, scheme="dense")
        latents, pooled = encode(tiny_batch, params, tiny_net)
        assert pooled.shape == (2, tiny_net.d_e)
        for s, tokens in enumerate(tiny_batch.sessions):
            assert latents[s].shape == (len(tokens.visible_indices()),
                                        tiny_net.d_e)

    def test_session_order_permutes_outputs(self, tiny_net, tiny_pre):
        params = init_params(tiny_net, seed=0, scheme="dense")
        batch_ab = tiny_batch_of(("a", "b"), tiny_pre)
        batch_ba = type(batch_ab)(sessions=batch_ab.sessions[::-1])
        lat_ab, pooled_ab = encode(batch_ab, params, tiny_net)
        lat_ba, pooled_ba = encode(batch_ba, params, tiny_net)
        assert np.array_equal(pooled_ab[0], pooled_ba[1])
        assert np.array_equal(pooled_ab[1], pooled_ba[0])
        assert np.array_equal(lat_ab[0], lat_ba[1])

    def test_duplicate_sessions_identical(self, tiny_net, tiny_pre):
        params = init_params(tiny_net, seed=0, scheme="dense")
        prepared = preprocess_session(make_session("a", seed=0), tiny_pre)
        batch = assemble_batch(
            [prepared, prepared],
            BatchConfig(patch_size=(4, 4, 4), rho=0.0, p_drop=0.0, seed=2),
            EmbeddingSource(mode="hash", dim=16),
        )
        # same content, same (empty) masks -> identical outputs
        latents, pooled = encode(batch, params, tiny_net)
        assert np.array_equal(latents[0], latents[1])
        assert np.array_equal(pooled[0], pooled[1])

    def test_empty_session_rejected(self, tiny_net, tiny_pre):
        batch = tiny_batch_of(("a",), tiny_pre, rho=0.0)
        tokens = batch.sessions[0]
        tokens.patch_set.valid[:] = False
        params = init_params(tiny_net, seed=0)
        with pytest.raises(EmptySessionError):
            encode(batch, params, tiny_net)

    def test_determinism(self, tiny_net, tiny_batch):
        params = init_params(tiny_net, seed=0, scheme="dense")
        a = encode(tiny_batch, params, tiny_net)
        b = encode(tiny_batch, params, tiny_net)
        assert np.array_equal(a[1], b[1])
        for x, y in zip(a[0], b[0]):
            assert np.array_equal(x, y)

    def test_coordinate_beyond_max_grid_rejected(self, tiny_net, tiny_batch):
        params = init_params(tiny_net, seed=0)
        tiny_batch.sessions[0].patch_set.coords[:, 0] += 5
        with pytest.raises(RangeError):
            encode(tiny_batch, params, tiny_net)

    def test_conditioning_sensitivity(self, tiny_net, tiny_pre):
        # with nonzero CLN generators, the modality embedding matters
        params = init_params(tiny_net, seed=0, scheme="dense")
        batch = tiny_batch_of(("a",), tiny_pre, rho=0.0)
        base, _ = encode(batch, params, tiny_net)
        batch.sessions[0].modality_embeddings = \
            batch.sessions[0].modality_embeddings + 0.5
        bumped, _ = encode(batch, params, tiny_net)
        assert not np.allclose(base[0], bumped[0])


class TestPaddingInvariance:
    def test_invalid_patch_voxels_do_not_affect_outputs(self, tiny_net):
        pre = evaluation_config(PreprocessConfig(
            target_shape=(8, 8, 8), patch_size=(4, 4, 4), seed=0))
        session = make_session("a", ("t1",))
        # zero out one patch block so it becomes invalid
        session.volumes["t1"].voxels[:4, :4, :4] = 0.0
        prepared = preprocess_session(session, pre)
        batch = assemble_batch(
            [prepared], BatchConfig(patch_size=(4, 4, 4), rho=0.5, seed=2),
            EmbeddingSource(mode="hash", dim=16),
        )
        tokens = batch.sessions[0]
        invalid = np.flatnonzero(~tokens.patch_set.valid)
        assert invalid.size > 0
        params = init_params(tiny_net, seed=0, scheme="dense")
        lat0, pooled0 = encode(batch, params, tiny_net)
        rec0 = decode(lat0, batch, params, tiny_net)

        tokens.patch_set.patches[invalid] = 123.0  # corrupt unseen patches
        lat1, pooled1 = encode(batch, params, tiny_net)
        rec1 = decode(lat1, batch, params, tiny_net)
        assert np.array_equal(pooled0, pooled1)
        assert np.array_equal(lat0[0], lat1[0])
        assert np.array_equal(rec0[0], rec1[0])


class TestDecode:
    def test_shapes(self, tiny_net, tiny_batch):
        params = init_params(tiny_net, seed=0, scheme="dense")
        latents, _ = encode(tiny_batch, params, tiny_net)
        recons = decode(latents, tiny_batch, params, tiny_net)
        for s, tokens in enumerate(tiny_batch.sessions):
            assert recons[s].shape == (tokens.plan.hidden.size, tiny_net.p3)

    def test_empty_plan_empty_output(self, tiny_net, tiny_pre):
        batch = tiny_batch_of(("a",), tiny_pre, rho=0.0)
        params = init_params(tiny_net, seed=0, scheme="dense")
        latents, _ = encode(batch, params, tiny_net)
        recons = decode(latents, batch, params, tiny_net)
        assert recons[0].shape == (0, tiny_net.p3)

    def test_hidden_enumeration_order_irrelevant(self, tiny_net, tiny_batch):
        params = init_params(tiny_net, seed=0, scheme="dense")
        latents, _ = encode(tiny_batch, params, tiny_net)
        base = decode(latents, tiny_batch, params, tiny_net)
        tokens = tiny_batch.sessions[0]
        shuffled = MaskPlan(
            hidden=tokens.plan.hidden[::-1].copy(),
            dropped_modalities=tokens.plan.dropped_modalities,
            ratio=tokens.plan.ratio,
        )
        tokens.plan = shuffled
        again = decode(latents, tiny_batch, params, tiny_net)
        assert np.array_equal(base[0], again[0])


class TestHeads:
    def test_classify_zero_head_gives_zero_logits(self, tiny_net):
        params = init_params(tiny_net, seed=0)  # train scheme: zero heads
        logits = head_classify(np.ones(tiny_net.d_e), params)
        assert logits.shape == (tiny_net.n_classes,)
        assert not logits.any()

    def test_classify_linear_algebra(self, tiny_net):
        params = init_params(tiny_net, seed=0)
        params["head_cls.w"] = np.arange(
            tiny_net.d_e * tiny_net.n_classes, dtype=np.float32
        ).reshape(tiny_net.d_e, tiny_net.n_classes)
        pooled = np.zeros(tiny_net.d_e, np.float32)
        pooled[0] = 1.0
        assert np.array_equal(head_classify(pooled, params),
                              params["head_cls.w"][0])

    def test_segment_shape(self, tiny_net):
        params = init_params(tiny_net, seed=0)
        grid = np.zeros((8, tiny_net.d_e), np.float32)
        vol = head_segment(grid, params, tiny_net)
        assert vol.shape == (8, 8, 8)
        assert not vol.any()

    def test_segment_locality(self, tiny_net):
        params = init_params(tiny_net, seed=0)
        params["head_seg.w"] = np.ones((tiny_net.d_e, tiny_net.p3), np.float32)
        grid = np.zeros((8, tiny_net.d_e), np.float32)
        grid[3, :] = 1.0  # only patch 3 (grid coord (0,1,1)) carries signal
        vol = head_segment(grid, params, tiny_net)
        mask = np.zeros((8, 8, 8), bool)
        mask[0:4, 4:8, 4:8] = True
        assert (vol[mask] != 0).all()
        assert not vol[~mask].any()

    def test_segment_wrong_row_count_rejected(self, tiny_net):
        params = init_params(tiny_net, seed=0)
        with pytest.raises(ShapeError):
            head_segment(np.zeros((5, tiny_net.d_e)), params, tiny_net)

    def test_grid_latents_zero_fill(self, tiny_net, tiny_pre):
        batch = tiny_batch_of(("a",), tiny_pre, rho=0.5)
        params = init_params(tiny_net, seed=0, scheme="dense")
        latents, _ = encode(batch, params, tiny_net)
        tokens = batch.sessions[0]
        grid = grid_latents(tokens, latents[0], 0, tiny_net)
        assert grid.shape == (8, tiny_net.d_e)
        hidden_rows = tokens.plan.hidden_set()
        for row in range(8):
            if row in hidden_rows:
                assert not grid[row].any()


class TestZeroInitEquivalence:
    def test_cln_ignores_embedding_at_zero_init(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 8))
        zeros = np.zeros((4, 8))
        zb = np.zeros(8)
        a = cln(x, rng.normal(size=(3, 4)), zeros, zb, zeros, zb)
        b = cln(x, rng.normal(size=(3, 4)), zeros, zb, zeros, zb)
        assert np.array_equal(a, b)
