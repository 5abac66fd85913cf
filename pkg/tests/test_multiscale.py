"""Resolution adaptation, multilevel training, and depth prolongation."""

from dataclasses import replace

import numpy as np
import pytest

from mgcnn.data import LabeledDataset, SyntheticKind, make_synthetic, split
from mgcnn.errors import DimensionError
from mgcnn.grid import (
    Grid2D,
    TransferKind,
    TransferPair,
    gaussian_blur_values,
    restrict_values,
)
from mgcnn.multiscale import (
    Direction,
    LevelSchedule,
    ResolutionPyramid,
    adapt_model_resolution,
    multilevel_train,
    prolong_depth,
    shallow_to_deep_train,
)
from mgcnn.network import (
    Activation,
    Classifier,
    NetworkInit,
    forward_propagate,
    random_network_params,
    zero_classifier,
)
from mgcnn.stencils import StencilBank, build_coarsen_map
from mgcnn.training import (
    ArmijoBacktracking,
    BcdConfig,
    RegConfig,
    bcd_train,
    evaluate,
)

from oracles import rel_err

CA = TransferPair.constant_average()
FW = TransferPair.bilinear_full_weighting()


def varied_params(seed=0, num_layers=2, channels=2):
    rng = np.random.default_rng(seed)
    p = random_network_params(channels=channels, num_layers=num_layers,
                              final_time=1.0, seed=seed, init_scale=0.3)
    for b in p.banks:
        b.weights[:] = rng.normal(0.0, 0.3, b.weights.shape)
    p.embed.weights[:] = rng.normal(0.0, 0.3, p.embed.weights.shape)
    p.biases[:] = rng.normal(0.0, 0.3, p.biases.shape)
    return p


def identity_params(channels=2, num_layers=2, k=3):
    p = random_network_params(channels=channels, num_layers=num_layers,
                              final_time=1.0, kernel_size=k)
    w = np.zeros((channels, channels, k, k))
    for c in range(channels):
        w[c, c, k // 2, k // 2] = 1.0
    for b in p.banks:
        b.weights[:] = w
    return p


class TestAdaptModelResolution:
    @pytest.mark.parametrize("pair", [CA, FW], ids=["ca", "fw"])
    def test_coarsen_then_refine_restores_banks(self, pair):
        cmap = build_coarsen_map(3, pair)
        p = varied_params(0)
        clf = Classifier(Grid2D(8, 8, 1.0),
                         np.random.default_rng(1).normal(size=(2, 2, 8, 8)),
                         np.array([0.3, -0.3]))
        pc, cc = adapt_model_resolution(p, clf, Direction.COARSEN, cmap, pair)
        pf, cf = adapt_model_resolution(pc, cc, Direction.REFINE, cmap, pair)
        for b0, b1 in zip(p.banks, pf.banks):
            assert rel_err(b1.weights, b0.weights) <= 1e-10
        assert rel_err(pf.embed.weights, p.embed.weights) <= 1e-10
        np.testing.assert_array_equal(pf.biases, p.biases)
        np.testing.assert_array_equal(cf.mu, clf.mu)
        assert (pf.dt, pf.final_time, pf.num_layers) == (p.dt, p.final_time, p.num_layers)

    @pytest.mark.parametrize("pair", [CA, FW], ids=["ca", "fw"])
    def test_refine_then_coarsen_restores_banks(self, pair):
        cmap = build_coarsen_map(3, pair)
        p = varied_params(2)
        clf = Classifier(Grid2D(8, 8, 1.0),
                         np.random.default_rng(3).normal(size=(2, 2, 8, 8)),
                         np.zeros(2))
        pf, cf = adapt_model_resolution(p, clf, Direction.REFINE, cmap, pair)
        pc, cc = adapt_model_resolution(pf, cf, Direction.COARSEN, cmap, pair)
        for b0, b1 in zip(p.banks, pc.banks):
            assert rel_err(b1.weights, b0.weights) <= 1e-10
        if pair.kind is TransferKind.CONSTANT_AVERAGE:
            # R P = I everywhere for this pair, so classifier fields return.
            assert rel_err(cc.weights, clf.weights) <= 1e-12
        else:
            # Bilinear full weighting restores only its invariant subspace;
            # constants are in it.
            const = Classifier(clf.grid, np.full_like(clf.weights, 0.7), clf.mu)
            _, up = adapt_model_resolution(p, const, Direction.REFINE, cmap, pair)
            _, back = adapt_model_resolution(pf, up, Direction.COARSEN, cmap, pair)
            assert rel_err(back.weights, const.weights) <= 1e-13
        assert (cc.grid.ny, cc.grid.nx, cc.grid.h) == (8, 8, 1.0)

    def test_block_constant_classifier_round_trips_ca(self):
        cmap = build_coarsen_map(3, CA)
        p = varied_params(4)
        rng = np.random.default_rng(5)
        w = rng.normal(size=(2, 2, 4, 4)).repeat(2, axis=-2).repeat(2, axis=-1)
        clf = Classifier(Grid2D(8, 8, 1.0), w, np.zeros(2))
        pc, cc = adapt_model_resolution(p, clf, Direction.COARSEN, cmap, CA)
        pf, cf = adapt_model_resolution(pc, cc, Direction.REFINE, cmap, CA)
        assert rel_err(cf.weights, w) <= 1e-13

    def test_grid_bookkeeping(self):
        cmap = build_coarsen_map(3, CA)
        p = varied_params(6)
        clf = zero_classifier(Grid2D(8, 8, 1.0), 2, 2)
        pc, cc = adapt_model_resolution(p, clf, Direction.COARSEN, cmap, CA)
        assert (cc.grid.ny, cc.grid.nx, cc.grid.h) == (4, 4, 2.0)
        pf, cf = adapt_model_resolution(p, clf, Direction.REFINE, cmap, CA)
        assert (cf.grid.ny, cf.grid.nx, cf.grid.h) == (16, 16, 0.5)

    def test_identity_network_stays_identity_under_ca(self):
        cmap = build_coarsen_map(3, CA)
        p = identity_params()
        clf = zero_classifier(Grid2D(8, 8, 1.0), 2, 2)
        pc, _ = adapt_model_resolution(p, clf, Direction.COARSEN, cmap, CA)
        want = np.zeros((2, 2, 3, 3))
        want[0, 0, 1, 1] = want[1, 1, 1, 1] = 1.0
        for b in pc.banks:
            assert rel_err(b.weights, want) <= 1e-12

    def test_pair_kind_mismatch_rejected(self):
        cmap = build_coarsen_map(3, CA)
        p = varied_params(7)
        clf = zero_classifier(Grid2D(8, 8, 1.0), 2, 2)
        with pytest.raises(ValueError):
            adapt_model_resolution(p, clf, Direction.COARSEN, cmap, FW)

    def test_odd_grid_coarsen_rejected(self):
        cmap = build_coarsen_map(3, CA)
        p = varied_params(8)
        clf = zero_classifier(Grid2D(7, 7, 1.0), 2, 2)
        with pytest.raises(DimensionError):
            adapt_model_resolution(p, clf, Direction.COARSEN, cmap, CA)

    def test_adapted_beats_unadjusted_after_refine(self):
        # One-seed version of the cross-resolution transfer experiment: a
        # model trained on the coarse stripes must classify the fine ones
        # better with the refined stencils than with the stencils reused
        # as-is.  The full fixed-seed-set claim lives in the acceptance
        # suite; this is the cheap smoke check of the same recipe.
        seed = 2
        cmap = build_coarsen_map(3, CA)
        ds = make_synthetic(SyntheticKind.BARS, 600, Grid2D(12, 12, 1.0),
                            seed=seed, noise=0.4)
        tr, va = split(ds, 0.8, seed=seed)
        trc = ResolutionPyramid.build(tr, 1, CA, blur_sigma=0.0).datasets[1]
        vac = ResolutionPyramid.build(va, 1, CA, blur_sigma=0.0).datasets[1]
        init = NetworkInit(channels=2, final_time=0.5, init_scale=0.3,
                           activation=Activation.IDENTITY)
        reg = RegConfig(lambda_w=0.7, lambda_theta=1e-3)
        cfg = BcdConfig(outer_iters=40, newton_steps=3,
                        prop_step_rule=ArmijoBacktracking(1.0, 0.5, 1e-4, 8),
                        batch_size=0, seed=seed)
        res = bcd_train(trc, init.network_params(4, seed + 100),
                        zero_classifier(trc.grid, 2, 2), reg, cfg, val=vac)
        adapted_p, adapted_c = adapt_model_resolution(
            res.params, res.classifier, Direction.REFINE, cmap, CA)
        acc_adapted = evaluate(va, adapted_p, adapted_c).accuracy
        acc_naive = evaluate(va, replace(res.params), adapted_c).accuracy
        assert acc_adapted > acc_naive


class TestResolutionPyramid:
    def test_levels_and_grids(self):
        ds = make_synthetic(SyntheticKind.BARS, 10, Grid2D(12, 12, 1.0), seed=0)
        pyr = ResolutionPyramid.build(ds, 2, CA, blur_sigma=0.5)
        assert pyr.levels == 3
        assert [d.grid.shape for d in pyr.datasets] == [(12, 12), (6, 6), (3, 3)]
        assert [d.grid.h for d in pyr.datasets] == [1.0, 2.0, 4.0]
        for d in pyr.datasets:
            np.testing.assert_array_equal(d.labels, ds.labels)

    def test_level_invariant_blur_then_restrict(self):
        ds = make_synthetic(SyntheticKind.BLOBS, 8, Grid2D(8, 8, 1.0), seed=1)
        pyr = ResolutionPyramid.build(ds, 1, FW, blur_sigma=0.8)
        want = np.clip(
            restrict_values(gaussian_blur_values(ds.images, 0.8), FW.kind), 0.0, 1.0
        )
        np.testing.assert_array_equal(pyr.datasets[1].images, want)

    def test_zero_blur_skips_smoothing(self):
        ds = make_synthetic(SyntheticKind.BARS, 8, Grid2D(8, 8, 1.0), seed=2)
        pyr = ResolutionPyramid.build(ds, 1, CA, blur_sigma=0.0)
        want = np.clip(restrict_values(ds.images, CA.kind), 0.0, 1.0)
        np.testing.assert_array_equal(pyr.datasets[1].images, want)

    def test_zero_levels(self):
        ds = make_synthetic(SyntheticKind.BARS, 6, Grid2D(8, 8, 1.0), seed=3)
        pyr = ResolutionPyramid.build(ds, 0, CA)
        assert pyr.levels == 1

    def test_negative_levels_rejected(self):
        ds = make_synthetic(SyntheticKind.BARS, 6, Grid2D(8, 8, 1.0), seed=4)
        with pytest.raises(ValueError):
            ResolutionPyramid.build(ds, -1, CA)


class TestMultilevelTrain:
    def test_degenerate_pyramid_equals_plain_bcd(self):
        ds = make_synthetic(SyntheticKind.BLOBS, 30, Grid2D(8, 8, 1.0), seed=5)
        pyr = ResolutionPyramid.build(ds, 0, CA)
        p0 = varied_params(9)
        c0 = zero_classifier(ds.grid, 2, 2)
        reg = RegConfig(0.01, 0.01)
        cfg = BcdConfig(outer_iters=4, newton_steps=2, seed=3)
        ml = multilevel_train(pyr, LevelSchedule.uniform(cfg, 1), (p0, c0), reg)
        direct = bcd_train(ds, p0, c0, reg, cfg)
        assert len(ml.levels) == 1
        assert ml.levels[0].history == direct.history
        np.testing.assert_array_equal(ml.classifier.weights, direct.classifier.weights)
        for b0, b1 in zip(ml.params.banks, direct.params.banks):
            np.testing.assert_array_equal(b0.weights, b1.weights)

    def test_two_levels_schedule_and_bookkeeping(self):
        ds = make_synthetic(SyntheticKind.BARS, 40, Grid2D(8, 8, 1.0), seed=6)
        val = make_synthetic(SyntheticKind.BARS, 16, Grid2D(8, 8, 1.0), seed=7)
        pyr = ResolutionPyramid.build(ds, 1, CA, blur_sigma=0.0)
        vpyr = ResolutionPyramid.build(val, 1, CA, blur_sigma=0.0)
        sched = LevelSchedule([
            BcdConfig(outer_iters=3, newton_steps=2, seed=0),  # fine
            BcdConfig(outer_iters=5, newton_steps=2, seed=0),  # coarse
        ])
        init = (random_network_params(channels=2, num_layers=2, final_time=0.5, seed=1),
                zero_classifier(pyr.datasets[1].grid, 2, 2))
        cold_calls = []
        def cold_init(level):
            cold_calls.append(level)
            return (random_network_params(channels=2, num_layers=2, final_time=0.5,
                                          seed=50 + level),
                    zero_classifier(pyr.datasets[level].grid, 2, 2))
        res = multilevel_train(pyr, sched, init, RegConfig(0.01, 0.01),
                               val_pyramid=vpyr, cold_init=cold_init)
        assert [lv.level for lv in res.levels] == [1, 0]
        assert [len(lv.history) for lv in res.levels] == [5, 3]
        assert cold_calls == [1, 0]
        assert all(np.isfinite(lv.init_loss_cold) for lv in res.levels)
        assert all(np.isfinite(lv.init_loss_warm) for lv in res.levels)
        assert res.classifier.grid.shape == (8, 8)

    def test_cold_column_nan_without_provider(self):
        ds = make_synthetic(SyntheticKind.BARS, 20, Grid2D(8, 8, 1.0), seed=8)
        pyr = ResolutionPyramid.build(ds, 0, CA)
        res = multilevel_train(
            pyr, LevelSchedule.uniform(BcdConfig(outer_iters=1, newton_steps=1), 1),
            (varied_params(10), zero_classifier(ds.grid, 2, 2)), RegConfig())
        assert np.isnan(res.levels[0].init_loss_cold)

    def test_schedule_length_mismatch(self):
        ds = make_synthetic(SyntheticKind.BARS, 10, Grid2D(8, 8, 1.0), seed=9)
        pyr = ResolutionPyramid.build(ds, 1, CA)
        with pytest.raises(ValueError):
            multilevel_train(
                pyr, LevelSchedule.uniform(BcdConfig(outer_iters=1), 1),
                (varied_params(11), zero_classifier(pyr.datasets[1].grid, 2, 2)),
                RegConfig())

    def test_val_pyramid_depth_mismatch(self):
        ds = make_synthetic(SyntheticKind.BARS, 10, Grid2D(8, 8, 1.0), seed=10)
        pyr = ResolutionPyramid.build(ds, 1, CA)
        vpyr = ResolutionPyramid.build(ds, 0, CA)
        with pytest.raises(ValueError):
            multilevel_train(
                pyr, LevelSchedule.uniform(BcdConfig(outer_iters=1), 2),
                (varied_params(12), zero_classifier(pyr.datasets[1].grid, 2, 2)),
                RegConfig(), val_pyramid=vpyr)


class TestProlongDepth:
    def test_constant_parameters_stay_constant(self):
        p = random_network_params(channels=2, num_layers=3, final_time=1.5, seed=12)
        q = prolong_depth(p, 2)
        assert q.num_layers == 6
        assert q.final_time == 1.5
        assert q.dt == p.dt / 2
        for b in q.banks:
            np.testing.assert_array_equal(b.weights, p.banks[0].weights)
        np.testing.assert_array_equal(q.biases, np.tile(p.biases[0], (6, 1)))

    def test_two_layer_interpolation_pattern(self):
        p = random_network_params(channels=1, num_layers=2, final_time=1.0, seed=13)
        a = np.full((1, 1, 3, 3), 1.0)
        b = np.full((1, 1, 3, 3), 3.0)
        p.banks[0].weights[:] = a
        p.banks[1].weights[:] = b
        p.biases[:] = np.array([[10.0], [20.0]])
        q = prolong_depth(p, 2)
        got = [bank.weights[0, 0, 0, 0] for bank in q.banks]
        assert got == [1.0, 2.0, 3.0, 3.0]
        np.testing.assert_array_equal(q.biases[:, 0], [10.0, 15.0, 20.0, 20.0])

    def test_iterated_prolongation_converges_first_order(self):
        # Iterating the prolongation samples one fixed parameter path at
        # ever finer steps, so successive outputs contract like O(dt).
        p = varied_params(14, num_layers=4)
        x = np.random.default_rng(15).random((8, 8))
        chain = [p]
        for _ in range(3):
            chain.append(prolong_depth(chain[-1], 2))
        outs = [forward_propagate(x, q).output for q in chain]
        diffs = [np.linalg.norm(a - b) for a, b in zip(outs, outs[1:])]
        ratios = [d0 / d1 for d0, d1 in zip(diffs, diffs[1:])]
        assert all(r >= 1.5 for r in ratios), ratios

    def test_zero_factor_rejected(self):
        p = random_network_params(channels=1, num_layers=2, final_time=1.0)
        with pytest.raises(ValueError):
            prolong_depth(p, 0)


class TestShallowToDeep:
    @staticmethod
    def make_model(grid):
        init = NetworkInit(channels=2, final_time=0.25, init_scale=0.3)
        return lambda depth, seed: (init.network_params(depth, seed),
                                    zero_classifier(grid, 2, 2))

    def test_single_depth_is_plain_training(self):
        ds = make_synthetic(SyntheticKind.BARS, 60, Grid2D(8, 8, 1.0), seed=11)
        cfg = BcdConfig(outer_iters=3, newton_steps=2, seed=4)
        reg = RegConfig(0.01, 0.03)
        res = shallow_to_deep_train(ds, [2], cfg, reg, self.make_model(ds.grid))
        p0, c0 = self.make_model(ds.grid)(2, cfg.seed)
        direct = bcd_train(ds, p0, c0, reg, cfg)
        assert len(res.depths) == 1
        assert res.depths[0].history == direct.history
        assert np.isnan(res.depths[0].init_loss_warm)
        assert res.depths[0].cold_history is None

    def test_depth_validation(self):
        ds = make_synthetic(SyntheticKind.BARS, 10, Grid2D(8, 8, 1.0), seed=12)
        cfg = BcdConfig(outer_iters=1)
        mk = self.make_model(ds.grid)
        with pytest.raises(ValueError):
            shallow_to_deep_train(ds, [], cfg, RegConfig(), mk)
        with pytest.raises(ValueError):
            shallow_to_deep_train(ds, [4, 2], cfg, RegConfig(), mk)
        with pytest.raises(ValueError):
            shallow_to_deep_train(ds, [2, 3], cfg, RegConfig(), mk)

    def test_warm_start_beats_cold_at_next_depth(self):
        # One-seed version of the depth-continuation experiment; the 5-seed
        # averaged claim is in the acceptance suite.
        ds = make_synthetic(SyntheticKind.BARS, 400, Grid2D(12, 12, 1.0),
                            seed=0, noise=0.4)
        tr, va = split(ds, 0.8, seed=0)
        cfg = BcdConfig(outer_iters=10, newton_steps=3, seed=0)
        reg = RegConfig(lambda_w=0.01, lambda_theta=0.03)
        res = shallow_to_deep_train(tr, [2, 4], cfg, reg,
                                    self.make_model(tr.grid), val=va)
        d4 = res.depths[1]
        assert [len(r.history) for r in res.depths] == [10, 10]
        assert len(d4.cold_history) == 10
        assert d4.init_loss_warm < d4.init_loss_cold
        assert res.params.num_layers == 4
