import numpy as np
import pytest

from modmae.errors import ConfigError, EmptyMaskError, ShapeError
from modmae.evaluation import (
    AvailabilityConfig,
    availability_matrix_eval,
    default_availability_configs,
    dice,
    hd95,
    impute_modality,
    rows_to_csv,
    sensitivity_specificity,
    surface_voxels,
)
from modmae.network import NetConfig, init_params
from modmae.preprocess import PreprocessConfig
from modmae.training import (
    Checkpoint,
    OptimState,
    RunConfig,
    SynthSource,
    SynthSpec,
)


def random_mask(rng, dims=(16, 16, 16), p=0.5):
    return rng.random(dims) < p


def oracle_surface(mask):
    """Independent surface extraction: loop over set voxels and 6 neighbors."""
    dims = mask.shape
    out = []
    for x, y, z in np.argwhere(mask):
        on_surface = False
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                           (0, 0, 1), (0, 0, -1)):
            nx, ny, nz = x + dx, y + dy, z + dz
            if not (0 <= nx < dims[0] and 0 <= ny < dims[1]
                    and 0 <= nz < dims[2]) or not mask[nx, ny, nz]:
                on_surface = True
                break
        if on_surface:
            out.append((x, y, z))
    return np.array(out, dtype=float)


def oracle_hd95(a, b, spacing):
    """All-pairs distances plus manual order-statistic interpolation."""
    sa = oracle_surface(a) * np.asarray(spacing)
    sb = oracle_surface(b) * np.asarray(spacing)
    d2 = ((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=2)
    d_ab = np.sqrt(d2.min(axis=1))
    d_ba = np.sqrt(d2.min(axis=0))
    pooled = np.sort(np.concatenate([d_ab, d_ba]))
    pos = 0.95 * (len(pooled) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] + (pos - lo) * (pooled[hi] - pooled[lo])


class TestDice:
    def test_identical_masks(self):
        rng = np.random.default_rng(0)
        m = random_mask(rng)
        assert dice(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, 0] = True
        b[3, 3, 3] = True
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, :4] = True
        b[0, 0, 2:4] = True
        b[0, 1, 0:2] = True
        assert a.sum() == b.sum() == 4
        assert np.logical_and(a, b).sum() == 2
        assert dice(a, b) == 0.5

    def test_both_empty_is_one(self):
        empty = np.zeros((3, 3, 3), bool)
        assert dice(empty, empty) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_mask(rng), random_mask(rng)
            assert dice(a, b) == dice(b, a)
            assert 0.0 <= dice(a, b) <= 1.0


class TestHd95:
    def test_identical_masks_zero(self):
        rng = np.random.default_rng(2)
        m = random_mask(rng)
        assert hd95(m, m) == 0.0

    def test_two_voxels_three_apart(self):
        a = np.zeros((8, 8, 8), bool)
        b = np.zeros((8, 8, 8), bool)
        a[2, 4, 4] = True
        b[5, 4, 4] = True
        assert hd95(a, b) == pytest.approx(3.0, abs=1e-12)

    def test_physical_spacing_scales_distance(self):
        a = np.zeros((8, 8, 8), bool)
        b = np.zeros((8, 8, 8), bool)
        a[2, 4, 4] = True
        b[5, 4, 4] = True
        assert hd95(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(6.0)

    def test_empty_mask_raises_sentinel_signal(self):
        m = np.zeros((4, 4, 4), bool)
        full = np.ones((4, 4, 4), bool)
        with pytest.raises(EmptyMaskError):
            hd95(m, full)
        with pytest.raises(EmptyMaskError):
            hd95(full, m)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = random_mask(rng), random_mask(rng)
        assert hd95(a, b) == hd95(b, a)

    def test_matches_brute_force_oracle_100_trials(self):
        rng = np.random.default_rng(4)
        spacings = [(1.0, 1.0, 1.0), (0.5, 2.0, 1.0), (1.0, 1.0, 3.0)]
        for trial in range(100):
            a = random_mask(rng, p=rng.uniform(0.2, 0.8))
            b = random_mask(rng, p=rng.uniform(0.2, 0.8))
            if not a.any() or not b.any():
                continue
            spacing = spacings[trial % len(spacings)]
            assert hd95(a, b, spacing) == pytest.approx(
                oracle_hd95(a, b, spacing), abs=1e-9)

    def test_surface_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            m = random_mask(rng, dims=(8, 8, 8))
            got = {tuple(v) for v in surface_voxels(m)}
            want = {tuple(int(c) for c in v) for v in oracle_surface(m)}
            assert got == want


class TestSensitivitySpecificity:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(6)
        m = random_mask(rng)
        assert sensitivity_specificity(m, m) == (1.0, 1.0)

    def test_all_positive_prediction(self):
        ref = np.zeros((4, 4, 4), bool)
        ref[:2] = True
        pred = np.ones((4, 4, 4), bool)
        assert sensitivity_specificity(pred, ref) == (1.0, 0.0)

    def test_empty_against_empty_convention(self):
        empty = np.zeros((3, 3, 3), bool)
        assert sensitivity_specificity(empty, empty) == (1.0, 1.0)

    def test_matches_confusion_count_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            pred, ref = random_mask(rng), random_mask(rng)
            sens, spec = sensitivity_specificity(pred, ref)
            tp = np.sum(pred & ref)
            fn = np.sum(~pred & ref)
            tn = np.sum(~pred & ~ref)
            fp = np.sum(pred & ~ref)
            assert sens == (1.0 if tp + fn == 0 else tp / (tp + fn))
            assert spec == (1.0 if tn + fp == 0 else tn / (tn + fp))
            assert 0.0 <= sens <= 1.0 and 0.0 <= spec <= 1.0


def eval_run_config() -> RunConfig:
    return RunConfig(
        seed=3,
        net=NetConfig(d_e=16, d_d=8, layers_enc=1, layers_dec=1, heads=4,
                      d_m=16, patch_size=(8, 8, 8), max_grid=(4, 4, 4)),
        preprocess=PreprocessConfig(target_shape=(32, 32, 32),
                                    patch_size=(8, 8, 8), seed=3,
                                    rotate_bound=0.0),
    )


def eval_checkpoint(cfg: RunConfig, seed=0, task="pretrain") -> Checkpoint:
    params = init_params(cfg.net, seed=seed, scheme="dense")
    return Checkpoint(params=params, optim=OptimState.zeros_like(params),
                      config=cfg.to_dict(), meta={"task": task})


def four_mod_source(n_cases=3, seed=11) -> SynthSource:
    spec = SynthSpec(modalities=("t1", "t1c", "t2", "flair"),
                     dims=(32, 32, 32), lesion=True, lesion_radius=4.0,
                     n_cases=n_cases)
    return SynthSource(spec, seed=seed)


class TestAvailabilityMatrix:
    def test_default_configs_are_the_six_rows(self):
        names = [c.name for c in default_availability_configs()]
        assert names == ["Complete", "Dropped (T1c)", "Dropped (T2)",
                         "Dropped (FLAIR)", "Unseen (T1+FLAIR only)",
                         "Unseen (T2 only)"]
        by_name = {c.name: c.available for c in default_availability_configs()}
        assert by_name["Unseen (T2 only)"] == frozenset({"t2"})
        assert by_name["Dropped (T1c)"] == frozenset({"t1", "t2", "flair"})

    def test_matrix_emits_six_rows_with_counts(self):
        cfg = eval_run_config()
        rows, text = availability_matrix_eval(
            eval_checkpoint(cfg), four_mod_source(), task="segmentation")
        assert [r.config for r in rows] == [
            c.name for c in default_availability_configs()]
        assert all(r.n_cases == 3 and r.n_skipped == 0 for r in rows)
        assert text.splitlines()[0] == \
            "config,dice,hd95,sensitivity,specificity,n_cases,n_skipped"
        assert len(text.splitlines()) == 7

    def test_complete_equals_direct_evaluation(self):
        from modmae.evaluation import _segmentation_case_metrics
        from modmae.modality_embed import EmbeddingCache
        from modmae.training import embedding_source

        cfg = eval_run_config()
        ckpt = eval_checkpoint(cfg)
        source = four_mod_source()
        rows, _ = availability_matrix_eval(
            ckpt, source,
            configs=[AvailabilityConfig("Complete",
                                        frozenset({"t1", "t1c", "t2",
                                                   "flair"}))],
            task="segmentation",
        )
        cache = EmbeddingCache()
        src = embedding_source(cfg)
        dices, senss = [], []
        for cid in source.case_ids():
            d, h, sens, spec = _segmentation_case_metrics(
                ckpt.params, cfg, source.load(cid), source.label(cid),
                src, cache)
            dices.append(d)
            senss.append(sens)
        assert rows[0].dice == float(np.mean(dices))
        assert rows[0].sensitivity == float(np.mean(senss))

    def test_session_without_required_modality_skipped(self):
        class DropT2Source:
            def __init__(self, base):
                self.base = base

            def case_ids(self):
                return self.base.case_ids()

            def load(self, cid):
                session = self.base.load(cid)
                if cid == self.case_ids()[0]:
                    session.volumes.pop("t2")
                return session

            def label(self, cid):
                return self.base.label(cid)

        cfg = eval_run_config()
        rows, _ = availability_matrix_eval(
            eval_checkpoint(cfg), DropT2Source(four_mod_source()),
            task="segmentation")
        t2_row = next(r for r in rows if r.config == "Unseen (T2 only)")
        assert t2_row.n_cases == 2 and t2_row.n_skipped == 1
        complete = next(r for r in rows if r.config == "Complete")
        assert complete.n_cases == 3 and complete.n_skipped == 0

    def test_task_mismatch_rejected(self):
        cfg = eval_run_config()
        ckpt = eval_checkpoint(cfg, task="classification")
        with pytest.raises(ConfigError):
            availability_matrix_eval(ckpt, four_mod_source(),
                                     task="segmentation")

    def test_hd95_sentinel_in_csv(self):
        # zero-init heads predict empty masks -> hd95 undefined -> NA
        cfg = eval_run_config()
        params = init_params(cfg.net, seed=0, scheme="train")
        ckpt = Checkpoint(params=params,
                          optim=OptimState.zeros_like(params),
                          config=cfg.to_dict(), meta={"task": "pretrain"})
        rows, text = availability_matrix_eval(
            ckpt, four_mod_source(),
            configs=[AvailabilityConfig("Complete", frozenset({"t1"}))],
            task="segmentation")
        assert rows[0].hd95 is None
        assert ",NA," in text.splitlines()[1]

    def test_classification_rows_carry_accuracy(self):
        cfg = eval_run_config()
        source = SynthSource(
            SynthSpec(modalities=("t1", "flair"), dims=(32, 32, 32),
                      lesion=True, lesion_fraction=0.5, n_cases=4),
            seed=5)
        rows, _ = availability_matrix_eval(
            eval_checkpoint(cfg), source,
            configs=[AvailabilityConfig("all", frozenset({"t1", "flair"}))],
            task="classification")
        assert rows[0].hd95 is None
        assert 0.0 <= rows[0].dice <= 1.0
        assert rows[0].n_cases == 4

    def test_empty_config_list_rejected(self):
        cfg = eval_run_config()
        with pytest.raises(ConfigError):
            availability_matrix_eval(eval_checkpoint(cfg), four_mod_source(),
                                     configs=[], task="segmentation")


class TestImputation:
    def test_output_has_session_grid_dims(self):
        cfg = eval_run_config()
        source = four_mod_source()
        session = source.load(source.case_ids()[0])
        vol = impute_modality(eval_checkpoint(cfg), session, "t2",
                              run_cfg=cfg)
        assert vol.dims == (32, 32, 32)
        assert vol.modality == "t2"
        assert np.isfinite(vol.voxels).all()

    def test_held_out_target_error_measurable(self):
        from modmae.preprocess import evaluation_config, preprocess_session
        from modmae.corpus import Session

        cfg = eval_run_config()
        source = four_mod_source()
        session = source.load(source.case_ids()[0])
        vol = impute_modality(eval_checkpoint(cfg), session, "t2",
                              run_cfg=cfg)
        truth = preprocess_session(
            Session(case_id="truth", volumes={"t2": session.volumes["t2"]}),
            evaluation_config(cfg.preprocess),
        ).volumes["t2"]
        mask = truth.extent_mask()
        err = float(((vol.voxels - truth.voxels) ** 2 * mask).sum()
                    / mask.sum())
        assert np.isfinite(err) and err >= 0.0

    def test_unseen_target_name_runs(self):
        cfg = eval_run_config()
        source = four_mod_source()
        session = source.load(source.case_ids()[0])
        vol = impute_modality(eval_checkpoint(cfg), session,
                              "completely-new-sequence", run_cfg=cfg)
        assert vol.dims == (32, 32, 32)

    def test_no_source_modalities_rejected(self):
        cfg = eval_run_config()
        source = SynthSource(
            SynthSpec(modalities=("t2",), dims=(32, 32, 32), n_cases=1),
            seed=0)
        session = source.load(source.case_ids()[0])
        with pytest.raises(ConfigError):
            impute_modality(eval_checkpoint(cfg), session, "t2", run_cfg=cfg)


class TestCsvRendering:
    def test_rows_render_with_repr_precision(self):
        from modmae.evaluation import MetricRow

        rows = [MetricRow(config="Complete", dice=0.5, hd95=None,
                          sensitivity=1.0, specificity=0.25,
                          n_cases=3, n_skipped=1)]
        text = rows_to_csv(rows)
        assert text.splitlines()[1] == "Complete,0.5,NA,1.0,0.25,3,1"
