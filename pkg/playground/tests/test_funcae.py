from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch
from torch.func import functional_call

from conftest import dense_spec, tiny_architecture, tiny_gen_config
from funcspace import diffcore
from funcspace.embsearch import SearchConfig, search_optimal
from funcspace.funcae import (
    TrainConfig,
    TrainingDivergedError,
    best_decoded,
    best_decoder_mpe,
    decode_all,
    embedding_statistics,
    encode,
    eval_mpe_grid,
    evaluate_loss,
    export_surface,
    functional_loss_min,
    functional_loss_p,
    train_autoencoder,
)
from funcspace.genlab import Corpus, GenConfig, generate_corpus, grid_inputs, make_search_dataset
from funcspace.models import ArchitectureConfig, MultiScaleAutoencoder
from funcspace.netrep import DimensionError, mlp_forward, to_matrix
from funcspace.objectives import MinLoss, PNormLoss
from funcspace.optimizers import TorchOptimizer
from funcspace.persist import load_checkpoint, save_checkpoint
from funcspace.scenarios import AutoencoderTrainingScenario


def parameters_of(model):
    return {name: value.detach().clone() for name, value in model.named_parameters()}


def by_depth(corpus, depth):
    return next(spec for spec in corpus.specs if spec.depth == depth)


class FailsFromCall:
    """Torch optimizer stand-in whose objective turns non-finite from the `call`-th update on."""

    def __init__(self, inner, call):
        self.inner = inner
        self.call = call
        self.calls = 0

    def optimize(self, objective):
        self.calls += 1
        if self.calls >= self.call:
            raise diffcore.NonFiniteError(-1, "loss", "Non-finite loss.")
        return self.inner.optimize(objective)


class TestEncoder:
    def test_multiplexer_zeroes_other_segments(self, model, corpus):
        first, second = model.segment_widths
        matrices, depths = model.matrices([by_depth(corpus, 1), by_depth(corpus, 2)])
        with torch.no_grad():
            segments = model.segments(matrices, depths)
        assert segments.shape == (2, first + second)
        assert torch.all(segments[0, first:] == 0)
        assert torch.all(segments[1, :first] == 0)
        assert torch.any(segments[0, :first] != 0)
        assert torch.any(segments[1, first:] != 0)

    def test_embedding_length_and_determinism(self, model, corpus):
        for spec in corpus.specs[:4]:
            z = encode(model, spec)
            assert z.shape == (model.d_z,)
            np.testing.assert_array_equal(z, encode(model, spec))

    def test_other_encoders_do_not_matter(self, model, corpus):
        spec = by_depth(corpus, 1)
        before = encode(model, spec)
        with torch.no_grad():
            for parameter in model.encoders[1].parameters():
                parameter.add_(0.5)
        np.testing.assert_array_equal(encode(model, spec), before)

    def test_batched_order_matches_single(self, model, corpus):
        specs = corpus.specs[:6]
        with torch.no_grad():
            batched = model.embed(*model.matrices(specs)).numpy()
        for row, spec in zip(batched, specs):
            np.testing.assert_allclose(row, encode(model, spec), rtol=1e-10, atol=1e-12)

    def test_depth_out_of_range(self, model):
        matrix = to_matrix(dense_spec("sigmoid", [2, 2, 2]), l_max=3, n_max=4).values
        with pytest.raises(ValueError):
            model.segments([matrix], [3])

    def test_activation_mismatch(self, model):
        with pytest.raises(ValueError):
            model.matrices([dense_spec("linear", [2])])


class TestDecoder:
    def test_one_spec_per_decoder(self, model):
        specs = decode_all(model, np.zeros(model.d_z))
        assert [spec.depth for spec in specs] == [1, 2]
        for spec in specs:
            assert not spec.is_soft
            assert spec.input_dim == 3 and spec.output_dim == 1
            assert max(spec.hidden_sizes) <= model.n_max

    def test_soft_masks_are_sigmoid_gates(self, model, rng):
        for spec in decode_all(model, rng.standard_normal(model.d_z), soft=True):
            assert spec.is_soft
            for mask in spec.masks:
                assert torch.all((mask > 0) & (mask < 1))

    def test_wrong_length(self, model):
        with pytest.raises(DimensionError):
            decode_all(model, np.zeros(model.d_z + 1))

    def test_soft_decoding_is_differentiable(self, model, corpus):
        x = grid_inputs(per_dim=2)
        z0 = encode(model, corpus.specs[0])

        def decoded_output(z):
            total = None
            for spec in decode_all(model, z, soft=True):
                value = diffcore.reduce_sum(mlp_forward(spec, x))
                total = value if total is None else diffcore.add(total, value)
            return total

        report = diffcore.finite_diff_check(decoded_output, z0, step=1e-6, tolerance=1e-3)
        assert report.passed, report.max_rel_error


class TestFunctionalLosses:
    def test_min_is_brute_force_minimum(self, model, corpus):
        with torch.no_grad():
            errors = model(*model.matrices(corpus.specs), corpus.inputs, corpus.targets)
            loss = functional_loss_min(corpus, model)
        assert errors.shape == (len(corpus), model.l_max)
        assert float(loss) == pytest.approx(float(errors.min(dim=1).values.sum()), rel=1e-12)

    def test_min_below_p_norm(self, model, corpus):
        with torch.no_grad():
            low = float(functional_loss_min(corpus, model))
            for p in (1.0, 2.0, 4.0):
                assert low <= float(functional_loss_p(corpus, model, p)) * (1 + 1e-12)

    def test_triples_match_corpus(self, model, corpus):
        subset = Corpus(corpus.specs[:3], corpus.inputs)
        triples = [(spec, subset.inputs, mlp_forward(spec, subset.inputs)) for spec in subset.specs]
        with torch.no_grad():
            assert float(functional_loss_p(triples, model, 2.0)) == pytest.approx(
                float(functional_loss_p(subset, model, 2.0)), rel=1e-10
            )
            assert float(functional_loss_min(triples, model)) == pytest.approx(
                float(functional_loss_min(subset, model)), rel=1e-10
            )

    def test_permutation_invariance(self, model, corpus):
        shuffled = Corpus(list(reversed(corpus.specs)), corpus.inputs)
        with torch.no_grad():
            assert float(functional_loss_min(shuffled, model)) == pytest.approx(
                float(functional_loss_min(corpus, model)), rel=1e-10
            )
            assert float(functional_loss_p(shuffled, model, -2.0)) == pytest.approx(
                float(functional_loss_p(corpus, model, -2.0)), rel=1e-10
            )

    def test_empty_batch(self, model):
        with pytest.raises(ValueError):
            functional_loss_min([], model)

    @pytest.mark.parametrize("objective", [MinLoss(), PNormLoss(2.0)], ids=["min", "p2"])
    @pytest.mark.parametrize(
        "name", ["encoder_trunk.layers.0.weight", "encoders.0.layers.3.weight", "decoders.1.layers.0.weight"]
    )
    def test_end_to_end_gradient(self, objective, name):
        model = MultiScaleAutoencoder(tiny_architecture())
        corpus = generate_corpus(tiny_gen_config(seed=3, weight_range=1.0), 4)
        subset = Corpus(corpus.specs, grid_inputs(per_dim=3))
        matrices, depths = model.matrices(subset.specs)
        targets = subset.targets

        def loss_of(weight):
            errors = functional_call(model, {name: weight}, (matrices, depths, subset.inputs, targets))
            return objective(errors)

        weight = model.get_parameter(name).detach().clone()
        chosen = np.random.default_rng(7).choice(weight.numel(), size=min(50, weight.numel()), replace=False)
        report = diffcore.finite_diff_check(
            loss_of, weight, step=1e-6, tolerance=1e-3, floor=1e-5, components=[(0, int(j)) for j in chosen]
        )
        assert report.passed, report.max_rel_error


class TestTraining:
    def test_config_validation(self):
        for bad in (dict(batch_size=0), dict(epochs=0), dict(lr=-1.0), dict(optimizer="rmsprop"), dict(loss="max")):
            with pytest.raises(ValueError):
                TrainConfig(**bad).validate()

    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_zero_learning_rate_changes_nothing(self, model, corpus, optimizer):
        before = parameters_of(model)
        cfg = TrainConfig(batch_size=len(corpus), epochs=1, lr=0.0, optimizer=optimizer)
        train_autoencoder(cfg, corpus, model)
        for name, value in model.named_parameters():
            assert torch.equal(value.detach(), before[name]), name

    def test_loss_log_and_statistics(self, model, corpus):
        cfg = TrainConfig(batch_size=5, epochs=2, lr=1e-3)
        trained, losses = train_autoencoder(cfg, corpus, model)
        assert trained is model
        assert list(losses.columns) == ["epoch", "loss", "batches"]
        assert losses["epoch"].tolist() == [0, 1, 2]
        assert losses["batches"].tolist() == [0, 3, 3]
        assert model.has_statistics
        mean, std = embedding_statistics(model, corpus)
        np.testing.assert_allclose(mean, model.embedding_mean.numpy(), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(std, model.embedding_std.numpy(), rtol=1e-12, atol=1e-12)
        assert np.all(std >= 0)

    def test_training_reduces_loss(self, model, corpus):
        before = evaluate_loss(model, corpus)
        cfg = TrainConfig(batch_size=4, epochs=6, lr=1e-2, seed=1)
        _, losses = train_autoencoder(cfg, corpus, model)
        after = evaluate_loss(model, corpus)
        assert losses["loss"].iloc[0] == pytest.approx(before, rel=1e-10)
        assert after < before

    def test_seeded_training_is_reproducible(self, architecture, corpus):
        cfg = TrainConfig(batch_size=4, epochs=2, lr=1e-3, seed=5)
        first = train_autoencoder(cfg, corpus, MultiScaleAutoencoder(architecture))[1]
        second = train_autoencoder(cfg, corpus, MultiScaleAutoencoder(architecture))[1]
        pd.testing.assert_frame_equal(first, second)

    def test_divergence_rolls_back(self, model, corpus):
        before = parameters_of(model)
        cfg = TrainConfig(batch_size=3, epochs=1, lr=1e300, optimizer="sgd", evaluate_initial=False)
        with pytest.raises(TrainingDivergedError) as info:
            train_autoencoder(cfg, corpus, model)
        assert info.value.epoch == 1
        assert info.value.checkpoint is None
        for name, value in model.named_parameters():
            assert torch.equal(value.detach(), before[name]), name

    def test_checkpoint_before_divergence_can_seed_a_search(self, model, corpus, tmp_path):
        cfg = TrainConfig(batch_size=6, epochs=3, lr=1e-3).validate()
        optimizer = FailsFromCall(TorchOptimizer({"lr": cfg.lr}, model, opt_method=cfg.optimizer), call=3)
        scenario = AutoencoderTrainingScenario(
            model,
            corpus,
            cfg,
            optimizer=optimizer,
            checkpoint_writer=lambda trained: save_checkpoint(trained, tmp_path / "ckpt"),
            callbacks=[],
        )
        with pytest.raises(TrainingDivergedError) as info:
            scenario.run()
        assert (info.value.epoch, info.value.batch) == (2, 1)
        assert info.value.checkpoint == tmp_path / "ckpt"
        restored = load_checkpoint(info.value.checkpoint)
        assert restored.has_statistics
        np.testing.assert_allclose(restored.embedding_mean.numpy(), model.embedding_mean.numpy())
        dataset = make_search_dataset(corpus.specs[0], n=40, rng=np.random.default_rng(2))
        result = search_optimal(restored, dataset, SearchConfig(iterations=2, minibatch=8, threads=1))
        assert [r.decoder for r in result] == [1, 2]

    def test_checkpoint_per_epoch(self, model, corpus, tmp_path):
        cfg = TrainConfig(batch_size=6, epochs=1, lr=1e-3)
        train_autoencoder(cfg, corpus, model, checkpoint_dir=tmp_path / "ckpt")
        assert (tmp_path / "ckpt" / "manifest.yaml").is_file()
        assert (tmp_path / "ckpt" / "tensors.bin").is_file()

    def test_empty_corpus(self, model):
        with pytest.raises(ValueError):
            train_autoencoder(TrainConfig(), Corpus([], grid_inputs(per_dim=2)), model)


class TestEvaluation:
    def test_grid_shape_and_labels(self, model, corpus):
        grid = eval_mpe_grid(model, corpus, corpus.inputs)
        assert grid.shape == (2, 2)
        assert list(grid.index) == ["D1", "D2"]
        assert list(grid.columns) == ["E1", "E2"]
        assert grid.index.name == "decoder"
        assert (grid.to_numpy() >= 0).all()

    def test_missing_depth_stays_empty(self, model, corpus):
        only_one = {1: [spec for spec in corpus.specs if spec.depth == 1]}
        grid = eval_mpe_grid(model, only_one, corpus.inputs)
        assert grid["E2"].isna().all()
        assert grid["E1"].notna().all()

    def test_best_decoder_is_at_most_every_decoder(self, model, corpus):
        grid = eval_mpe_grid(model, corpus, corpus.inputs)
        best = best_decoder_mpe(model, corpus, corpus.inputs)
        assert list(best.index) == ["E1", "E2"]
        assert (best <= grid.min(axis=0) + 1e-12).all()

    def test_best_decoded(self, model, corpus):
        spec = corpus.specs[0]
        decoded = best_decoded(model, spec, corpus.inputs)
        target = mlp_forward(spec, corpus.inputs)
        errors = [
            np.sum((mlp_forward(candidate, corpus.inputs) - target) ** 2)
            for candidate in decode_all(model, encode(model, spec))
        ]
        assert np.sum((mlp_forward(decoded, corpus.inputs) - target) ** 2) == pytest.approx(min(errors))


class TestSurface:
    def test_identical_specs(self):
        spec = dense_spec("linear", [3], 0.4)
        frame = export_surface(spec, spec, grid_n=50)
        assert len(frame) == 2500
        assert list(frame.columns) == ["x1", "x2", "yA", "yB"]
        np.testing.assert_array_equal(frame["yA"].to_numpy(), frame["yB"].to_numpy())

    def test_values_match_direct_evaluation(self, corpus):
        spec_a, spec_b = corpus.specs[:2]
        frame = export_surface(spec_a, spec_b, fixed_dim=0, fixed_value=-0.25, grid_n=7)
        inputs = np.column_stack([np.full(len(frame), -0.25), frame["x1"], frame["x2"]])
        np.testing.assert_allclose(frame["yA"], mlp_forward(spec_a, inputs)[:, 0], rtol=1e-12)
        np.testing.assert_allclose(frame["yB"], mlp_forward(spec_b, inputs)[:, 0], rtol=1e-12)
        assert frame["x1"].min() == -1.0 and frame["x2"].max() == 1.0

    def test_several_outputs(self):
        spec = dense_spec("linear", [2], 0.1, output_dim=2)
        frame = export_surface(spec, spec, grid_n=3)
        assert list(frame.columns) == ["x1", "x2", "yA1", "yA2", "yB1", "yB2"]

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            export_surface(dense_spec("linear", [2]), dense_spec("linear", [2], input_dim=2))
        with pytest.raises(DimensionError):
            export_surface(dense_spec("linear", [2]), dense_spec("linear", [2]), fixed_dim=3)
        with pytest.raises(ValueError):
            export_surface(dense_spec("linear", [2]), dense_spec("linear", [2]), grid_n=1)


@pytest.mark.slow
def test_desk_autoencoder_beats_untrained_parameters():
    gen = GenConfig(activation="sigmoid", n_max=5, l_max=2, hidden_min=3, hidden_max=5, seed=21)
    architecture = ArchitectureConfig(activation="sigmoid", n_max=5, l_max=2, d_z=32)
    held_out = {depth: generate_corpus(replace(gen, seed=22), 300, 4, depth).specs for depth in (1, 2)}
    inputs = grid_inputs(dims=3)
    baseline = best_decoder_mpe(MultiScaleAutoencoder(architecture), held_out, inputs)
    params = MultiScaleAutoencoder(architecture)
    train_autoencoder(TrainConfig(batch_size=256, epochs=2, lr=1e-3, loss="min"), generate_corpus(gen, 20000, 4), params)
    trained = best_decoder_mpe(params, held_out, inputs)
    assert (trained < 0.60).all()
    assert (trained <= 0.5 * baseline).all()
