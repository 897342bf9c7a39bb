import math
import warnings

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from conftest import tiny_gen_config
from funcspace import diffcore
from funcspace.embsearch import (
    DecoderResult,
    MissingStatisticsError,
    SearchConfig,
    SearchDivergedError,
    SearchResult,
    TradeoffCurve,
    constant_baseline_mpe,
    decoded_spec,
    knee_point,
    sample_embedding,
    search_loss,
    search_optimal,
    tradeoff_scan,
)
from funcspace.funcae import TrainConfig, train_autoencoder
from funcspace.genlab import (
    FunctionalDataset,
    GenConfig,
    generate_corpus,
    make_search_dataset,
    random_mlp,
    random_mlp_with_count,
)
from funcspace.models import ArchitectureConfig, MultiScaleAutoencoder
from funcspace.netrep import matrix_forward, non_zero_count


@pytest.fixture
def searchable(model):
    model.set_statistics(np.zeros(model.d_z), np.full(model.d_z, 0.5))
    return model


@pytest.fixture
def dataset():
    spec = random_mlp(tiny_gen_config(weight_range=1.0), np.random.default_rng(1))
    return make_search_dataset(spec, n=40, rng=np.random.default_rng(2))


def quick(**overrides):
    values = dict(iterations=5, minibatch=8, eval_every=2, seed=3, threads=1)
    values.update(overrides)
    return SearchConfig(**values)


class TestSampling:
    def test_zero_spread_returns_mean(self, model):
        mean = np.linspace(-1.0, 1.0, model.d_z)
        model.set_statistics(mean, np.zeros(model.d_z))
        np.testing.assert_array_equal(sample_embedding(model, np.random.default_rng(0)), mean)

    def test_seeded(self, searchable):
        first = sample_embedding(searchable, np.random.default_rng(4))
        second = sample_embedding(searchable, np.random.default_rng(4))
        np.testing.assert_array_equal(first, second)

    def test_missing_statistics(self, model, dataset):
        with pytest.raises(MissingStatisticsError):
            sample_embedding(model, np.random.default_rng(0))
        with pytest.raises(MissingStatisticsError):
            search_optimal(model, dataset, quick())


class TestSearchLoss:
    def test_without_penalty_is_the_data_term(self, searchable, dataset):
        x, y = dataset.train
        z = sample_embedding(searchable, np.random.default_rng(0))
        values = searchable.decode(diffcore.as_tensor(z)[None], depths=[2])[2]
        predictions = matrix_forward(values, searchable.meta(2), x)
        expected = diffcore.reduce_sum(diffcore.square(diffcore.sub(predictions, diffcore.as_tensor(y)[None])))
        assert float(search_loss(z, 0.0, 2, x, y, 0.0, searchable)) == float(expected)
        assert float(search_loss(z, 3.0, 2, x, y, 0.0, searchable)) == float(expected)

    def test_threshold_is_unused_without_penalty(self, searchable, dataset):
        x, y = dataset.train
        z = sample_embedding(searchable, np.random.default_rng(0))
        _, tape = diffcore.forward(lambda z, t: search_loss(z, t, 1, x, y, 0.0, searchable), z, 0.4)
        grad_z, grad_t = diffcore.backward(tape)
        assert float(grad_t) == 0.0
        assert float(grad_z.abs().sum()) > 0.0

    def test_penalty_adds_on(self, searchable, dataset):
        x, y = dataset.train
        z = sample_embedding(searchable, np.random.default_rng(0))
        plain = float(search_loss(z, 0.1, 1, x, y, 0.0, searchable))
        penalised = float(search_loss(z, 0.1, 1, x, y, 0.5, searchable))
        assert penalised > plain

    def test_gradient(self, searchable, dataset):
        x, y = dataset.train
        z = sample_embedding(searchable, np.random.default_rng(5))
        report = diffcore.finite_diff_check(
            lambda z, t: search_loss(z, t, 2, x, y, 0.5, searchable),
            (z, np.array(0.2)),
            step=1e-6,
            tolerance=1e-3,
        )
        assert report.passed, report.max_rel_error

    def test_non_finite_loss(self, searchable, dataset):
        x, y = dataset.train
        with pytest.raises(SearchDivergedError) as info:
            search_loss(np.full(searchable.d_z, np.nan), 0.0, 1, x, y, 0.0, searchable, iteration=7)
        assert info.value.decoder == 1
        assert info.value.iteration == 7


class TestSearchConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            dict(iterations=0),
            dict(lr_z=-1.0),
            dict(alpha=-0.1),
            dict(restarts=0),
            dict(softcount="hard"),
            dict(optimizer="lbfgs"),
            dict(eps=0.0),
            dict(z_bound=0.0),
            dict(decoders=[3]),
            dict(decoders=[]),
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ValueError):
            SearchConfig(**overrides).validate(l_max=2)

    def test_decoder_list(self):
        assert SearchConfig().decoder_list(3) == [1, 2, 3]
        assert SearchConfig(decoders=[2, 1, 2]).decoder_list(3) == [1, 2]


class TestSearch:
    def test_result_shape(self, searchable, dataset):
        result = search_optimal(searchable, dataset, quick())
        assert [r.decoder for r in result] == [1, 2]
        frame = result.to_frame()
        assert list(frame.columns) == ["decoder", "mpe", "nonzero", "t", "diverged", "summary"]
        assert frame["decoder"].tolist() == ["D1", "D2"]
        losses = result.losses()
        assert len(losses) == 10
        assert losses.groupby("decoder")["iteration"].max().tolist() == [5, 5]
        for r in result:
            assert r.spec.depth == r.decoder
            assert r.nonzero == non_zero_count(r.spec)
            assert r.mpe >= 0 and r.val_mpe >= 0
            assert not r.diverged
            assert [iteration for iteration, _ in r.val_loss] == [0, 2, 4]

    def test_parameters_are_frozen_only_during_the_search(self, searchable, dataset):
        seen = []
        search_optimal(
            searchable,
            dataset,
            quick(iterations=1),
            callbacks=[lambda obj, method, output: seen.append(any(p.requires_grad for p in obj.model.parameters()))],
        )
        assert seen and not any(seen)
        assert all(p.requires_grad for p in searchable.parameters())

    def test_frozen_block_restores_flags_on_error(self, searchable):
        first = next(searchable.parameters())
        first.requires_grad_(False)
        with pytest.raises(RuntimeError):
            with searchable.frozen():
                assert not any(p.requires_grad for p in searchable.parameters())
                raise RuntimeError("stop")
        flags = [p.requires_grad for p in searchable.parameters()]
        assert not flags[0] and all(flags[1:])

    def test_zero_learning_rates_keep_the_start(self, searchable, dataset):
        result = search_optimal(searchable, dataset, quick(lr_z=0.0, lr_t=0.0, iterations=3))
        for r in result:
            expected = sample_embedding(searchable, np.random.default_rng([3, r.decoder, 0]))
            np.testing.assert_array_equal(r.z, expected)
            assert r.t == 0.0
            assert r.spec == decoded_spec(searchable, r.decoder, expected)

    def test_threshold_stays_at_zero_without_penalty(self, searchable, dataset):
        for r in search_optimal(searchable, dataset, quick(lr_t=1.0)):
            assert r.t == 0.0

    def test_threshold_grows_under_penalty(self, searchable, dataset):
        for r in search_optimal(searchable, dataset, quick(alpha=1.0, lr_t=1e-2)):
            assert r.t > 0.0

    def test_deterministic_across_threads(self, searchable, dataset):
        single = search_optimal(searchable, dataset, quick(restarts=2, threads=1))
        pooled = search_optimal(searchable, dataset, quick(restarts=2, threads=4))
        pd.testing.assert_frame_equal(single.to_frame(), pooled.to_frame())
        for a, b in zip(single, pooled):
            np.testing.assert_array_equal(a.z, b.z)
            assert a.restart == b.restart

    def test_restart_selection(self, searchable, dataset):
        result = search_optimal(searchable, dataset, quick(restarts=3, decoders=[1]))
        assert [r.decoder for r in result] == [1]
        assert result[1].restart in (0, 1, 2)
        with pytest.raises(KeyError):
            result[2]

    def test_divergence_keeps_best_point(self, searchable, dataset):
        result = search_optimal(searchable, dataset, quick(lr_z=1e300, eval_every=100, decoders=[2]))
        r = result[2]
        assert r.diverged
        np.testing.assert_array_equal(r.z, sample_embedding(searchable, np.random.default_rng([3, 2, 0])))
        assert math.isfinite(r.mpe)
        assert result.to_frame()["diverged"].tolist() == [True]

    def test_runaway_embedding_is_divergence(self, searchable, dataset):
        result = search_optimal(searchable, dataset, quick(z_bound=1e-3, decoders=[1]))
        r = result[1]
        assert r.diverged
        assert r.train_loss == []
        np.testing.assert_array_equal(r.z, sample_embedding(searchable, np.random.default_rng([3, 1, 0])))

    def test_huge_step_stops_before_the_embedding_explodes(self, searchable, dataset):
        r = search_optimal(searchable, dataset, quick(lr_z=1e300, decoders=[2]))[2]
        assert r.diverged
        assert np.abs(r.z).max() <= SearchConfig().z_bound
        assert all(math.isfinite(loss) for loss in r.train_loss)

    def test_threshold_is_read_without_conversion_warnings(self, searchable, dataset):
        with warnings.catch_warnings():
            warnings.filterwarnings("error", message="Converting a tensor with requires_grad")
            result = search_optimal(searchable, dataset, quick(alpha=0.1, decoders=[1]))
        assert result[1].t >= 0.0

    def test_callbacks_see_every_iteration(self, searchable, dataset):
        events = []
        search_optimal(
            searchable,
            dataset,
            quick(decoders=[1]),
            callbacks=[lambda obj, method, output: events.append((method, output["iteration"]))],
        )
        assert events == [("post_iteration", k) for k in range(1, 6)]

    def test_needs_splits(self, searchable, dataset):
        plain = FunctionalDataset(dataset.inputs, dataset.outputs)
        with pytest.raises(ValueError):
            search_optimal(searchable, plain, quick())

    def test_dimension_mismatch(self, searchable):
        narrow = FunctionalDataset(np.zeros((10, 2)), np.zeros(10), splits=(5, 3, 2))
        with pytest.raises(ValueError):
            search_optimal(searchable, narrow, quick())


class TestReporting:
    def test_summary_format(self):
        result = DecoderResult(
            decoder=1, spec=None, mpe=0.0123, nonzero=17, t=0.0, restart=0, val_mpe=0.0, z=np.zeros(2)
        )
        assert result.summary == "1.23 (17)"

    def test_best(self):
        rows = [
            DecoderResult(d, None, m, 5, 0.0, 0, 0.0, np.zeros(1))
            for d, m in [(1, 0.3), (2, 0.1), (3, 0.1)]
        ]
        assert SearchResult(rows).best.decoder == 2

    def test_baseline(self):
        dataset = FunctionalDataset(
            np.zeros((7, 3)), np.array([1.0, 2.0, 3.0, 9.0, 9.0, 2.0, 4.0]), splits=(3, 2, 2)
        )
        assert constant_baseline_mpe(dataset) == pytest.approx(0.25, rel=1e-6)

    def test_constant_target_baseline(self):
        dataset = FunctionalDataset(np.zeros((10, 3)), np.full(10, 3.0), splits=(5, 3, 2))
        assert constant_baseline_mpe(dataset) == 0.0


class TestTradeoff:
    @pytest.mark.parametrize("alphas", [[0.0, 0.0], [0.1, 0.01]])
    def test_alphas_must_increase(self, alphas):
        with pytest.raises(ValueError):
            TradeoffCurve(pd.DataFrame({"alpha": alphas, "nonzero": [3, 2], "mpe": [0.1, 0.2]}))

    def test_knee_point(self):
        curve = TradeoffCurve(
            pd.DataFrame(
                {
                    "alpha": [0.0, 1e-3, 1e-2, 1e-1],
                    "nonzero": [20, 15, 9, 4],
                    "mpe": [0.010, 0.0105, 0.05, 0.3],
                }
            )
        )
        knee = knee_point(curve, rel_tolerance=0.1)
        assert knee["nonzero"] == 15
        assert knee["alpha"] == 1e-3
        assert knee_point(curve, rel_tolerance=100.0)["nonzero"] == 4

    def test_empty_curve(self):
        with pytest.raises(ValueError):
            knee_point(TradeoffCurve(pd.DataFrame(columns=["alpha", "nonzero", "mpe"])))

    def test_scan(self, searchable, dataset):
        curve = tradeoff_scan(searchable, dataset, 1, [0.0, 0.5], quick(iterations=2), dataset_name="toy")
        assert len(curve) == 2
        assert curve.points["alpha"].tolist() == [0.0, 0.5]
        assert curve.decoder == 1 and curve.dataset == "toy"
        assert (curve.points["mpe"] >= 0).all()

    def test_scan_rejects_unordered(self, searchable, dataset):
        with pytest.raises(ValueError):
            tradeoff_scan(searchable, dataset, 1, [0.5, 0.0], quick())


@pytest.fixture(scope="module")
def desk_linear_autoencoder():
    architecture = ArchitectureConfig(activation="linear", n_max=5, l_max=2, d_z=32)
    gen = GenConfig(activation="linear", n_max=5, l_max=2, hidden_min=1, hidden_max=5, seed=11)
    params = MultiScaleAutoencoder(architecture)
    train_autoencoder(TrainConfig(batch_size=256, epochs=2, lr=1e-3), generate_corpus(gen, 20000), params)
    return params


@pytest.fixture(scope="module")
def desk_linear_dataset():
    gen = GenConfig(activation="linear", n_max=5, l_max=2, hidden_min=1, hidden_max=5, seed=12)
    spec = random_mlp_with_count(gen, [5], 17, np.random.default_rng(12))
    return make_search_dataset(spec, n=20000, rng=np.random.default_rng(13))


@pytest.mark.slow
def test_desk_search_beats_baseline(desk_linear_autoencoder, desk_linear_dataset):
    result = search_optimal(
        desk_linear_autoencoder, desk_linear_dataset, SearchConfig(iterations=2000, restarts=3, seed=0)
    )
    assert result.best.mpe < 0.15
    assert all(r.mpe < result.baseline_mpe for r in result)


@pytest.mark.slow
def test_desk_tradeoff_direction(desk_linear_autoencoder, desk_linear_dataset):
    alphas = [0.0, 1e-3, 1e-2, 1e-1]
    rows = []
    for seed in range(5):
        cfg = SearchConfig(iterations=2000, seed=seed)
        curve = tradeoff_scan(desk_linear_autoencoder, desk_linear_dataset, 1, alphas, cfg)
        rows.append(curve.points)
    points = pd.concat(rows, ignore_index=True)
    assert stats.spearmanr(points["alpha"], points["nonzero"])[0] <= -0.5
    assert stats.spearmanr(points["nonzero"], points["mpe"])[0] <= 0.0
