import numpy as np
import pytest

from mtdnet.background_tasks import BackgroundEvaluator
from mtdnet.core.autodiff import Graph, Tensor, backward, take_rows, weighted_sum
from mtdnet.core.errors import ConfigError, ShapeError, TrainingDivergedError
from mtdnet.core.losses import contrastive_loss
from mtdnet.core.network import ablation_build, build
from mtdnet.models import CmcCurve, LossConfig, Scorer, TrainConfig
from mtdnet.services.experiments import cross_matches_fine_tune
from mtdnet.services.persistence import LOSS_COLUMNS
from mtdnet.services.sampling import enumerate_positive_pairs
from mtdnet.services.synth_data import generate
from mtdnet.services.trainer import (
    CrossDomainState,
    SGDMomentum,
    check_finite,
    coupling_loss,
    fine_tune,
    merge_datasets,
    sgd_step,
    train_aug,
    train_cross,
    train_single,
)

from conftest import tiny_net_config


def params_equal(a, b):
    return all(np.array_equal(a[name], b[name]) for name in a)


class TestSgd:
    def test_momentum_update(self):
        params = {"w": np.array([1.0, 2.0])}
        velocity = {}
        sgd_step(params, {"w": np.array([1.0, -1.0])}, lr=0.1, momentum=0.9, velocity=velocity)
        np.testing.assert_allclose(params["w"], [0.9, 2.1])
        sgd_step(params, {"w": np.array([0.0, 0.0])}, lr=0.1, momentum=0.9, velocity=velocity)
        np.testing.assert_allclose(params["w"], [0.81, 2.19])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="'w'"):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1, 0.9, {})

    def test_optimizer_updates_graph_in_place(self):
        graph = Graph(np.float32)
        graph.add_parameter("w", [1.0])
        SGDMomentum(0.5, 0.0).step(graph, {"w": np.array([2.0])})
        assert graph.parameter("w").data[0] == 0.0


def test_check_finite_names_node():
    bad = Tensor(np.array(np.nan), name="l_cls")
    total = weighted_sum([Tensor(np.array(1.0)), bad], [1.0, 1.0])
    with pytest.raises(TrainingDivergedError, match="l_cls"):
        check_finite(total, "epoch 0")
    check_finite(Tensor(np.array(1.0)), "epoch 0")


class TestSingleDomain:
    def test_history_and_checkpoint(self, tiny_cfg, tiny_dataset, tiny_train_cfg):
        result = train_single(build(tiny_cfg, seed=0), tiny_dataset, tiny_train_cfg)
        assert list(result.history.columns) == LOSS_COLUMNS
        assert len(result.history) == tiny_train_cfg.epochs
        assert np.isfinite(result.final_loss)
        assert result.history["l_cts"].eq(0.0).all()
        assert result.checkpoint.epoch == tiny_train_cfg.epochs

    def test_same_seed_bit_identical(self, tiny_cfg, tiny_dataset, tiny_train_cfg):
        first = train_single(build(tiny_cfg, seed=0), tiny_dataset, tiny_train_cfg)
        second = train_single(build(tiny_cfg, seed=0), tiny_dataset, tiny_train_cfg)
        assert params_equal(first.checkpoint.params, second.checkpoint.params)

    def test_training_changes_parameters(self, tiny_cfg, tiny_dataset, tiny_train_cfg):
        net = build(tiny_cfg, seed=0)
        before = net.state_dict()
        train_single(net, tiny_dataset, tiny_train_cfg)
        assert not params_equal(before, net.state_dict())

    def test_zero_task_weights_leave_parameters_unchanged(self, tiny_dataset, tiny_train_cfg):
        net = build(tiny_net_config(lambda_rnk=0.0, lambda_cls=0.0), seed=0)
        before = net.state_dict()
        result = train_single(net, tiny_dataset, tiny_train_cfg)
        assert params_equal(before, net.state_dict())
        assert (result.history["combined"] == 0.0).all()

    def test_full_batch_descent_lowers_combined_loss(self, tiny_cfg, tiny_dataset):
        cfg = TrainConfig(epochs=6, batch_size=512, triplets_per_pair=2, learning_rate=1e-3, momentum=0.0, seed=1)
        history = train_single(build(tiny_cfg, seed=0), tiny_dataset, cfg).history
        assert history["combined"].iloc[-1] < history["combined"].iloc[0]

    @pytest.mark.parametrize("variant", ["cls-only", "rnk-only"])
    def test_single_task_variants_train(self, tiny_cfg, tiny_dataset, tiny_train_cfg, variant):
        result = train_single(ablation_build(tiny_cfg, variant, seed=0), tiny_dataset, tiny_train_cfg)
        column = "l_trp" if variant == "cls-only" else "l_cls"
        assert result.history[column].eq(0.0).all()
        assert result.checkpoint.variant.value == variant

    def test_periodic_evaluation(self, tiny_cfg, tiny_dataset, tiny_train_cfg):
        cfg = tiny_train_cfg.model_copy(update={"eval_every": 1})
        result = train_single(build(tiny_cfg, seed=0), tiny_dataset, cfg, eval_data=(tiny_dataset, []))
        assert [row["epoch"] for row in result.evaluations] == [0, 1]
        assert all(0.0 <= row["rank-1"] <= 1.0 for row in result.evaluations)


class TestBackgroundEvaluator:
    def test_collects_results_in_submission_order(self):
        curve = CmcCurve(accuracies=np.array([0.25, 0.5, 1.0]), n_queries=4, gallery_size=3)
        calls = []

        def fake_evaluate(net, test, distractors, scorer, seeds):
            calls.append((net, scorer, seeds))
            return curve

        evaluator = BackgroundEvaluator(([], []), Scorer.CLS_PROB, seeds=(0, 1), evaluate_fn=fake_evaluate)
        evaluator.start()
        evaluator.submit(0, "snapshot-0")
        evaluator.submit(3, "snapshot-3")
        results = evaluator.stop()
        assert [r["epoch"] for r in results] == [0, 3]
        assert results[0]["rank-1"] == 0.25
        assert calls[0] == ("snapshot-0", Scorer.CLS_PROB, (0, 1))
        assert not evaluator.running

    def test_failed_evaluation_is_logged(self, caplog):
        def broken(*args):
            raise ValueError("boom")

        evaluator = BackgroundEvaluator(([], []), Scorer.CLS_PROB, evaluate_fn=broken)
        evaluator.submit(1, None)
        assert evaluator.stop() == []
        assert "boom" in caplog.text


class TestCrossDomain:
    @pytest.mark.parametrize("label", [1, 0])
    def test_contrastive_step_moves_joint_features(self, desk_cfg, label):
        net = build(desk_cfg, dtype=np.float64, seed=0)
        pixels = np.random.default_rng(5).uniform(0.0, 1.0, size=(4, *desk_cfg.input_shape))

        def fc7_rows():
            maps = net.trunk(net.graph.constant(pixels))
            # source pair (0, 1), target pair (2, 3)
            _, fc7 = net.classify(take_rows(maps, [0, 2]), take_rows(maps, [1, 3]))
            return take_rows(fc7, [0]), take_rows(fc7, [1])

        def distance():
            source, target = fc7_rows()
            return float(np.linalg.norm(source.data - target.data))

        start = distance()
        assert start > 0.0
        source, target = fc7_rows()
        grads = backward(net.graph, contrastive_loss(source, target, [label], m=10.0 * start))
        SGDMomentum(1e-6, 0.0).step(net.graph, grads)
        if label == 1:
            assert distance() < start
        else:
            assert distance() > start

class TestCrossDomain:
    def test_coupling_loss_pairs_rows(self):
        rng = np.random.default_rng(0)
        source = Tensor(np.arange(8.0).reshape(4, 2))
        target = Tensor(np.arange(8.0).reshape(4, 2) + 0.5)
        loss, y = coupling_loss(source, target, 2, 2, rng, m=1.0, cfg=LossConfig())
        assert loss.label == "l_cts"
        assert y.shape == (2,)
        assert set(y.tolist()) <= {0, 1}
        assert np.isfinite(loss.item())

    def test_state_rejects_ranking_only_networks(self, tiny_cfg):
        net = ablation_build(tiny_cfg, "rnk-only")
        with pytest.raises(ConfigError):
            CrossDomainState(source=net, target=ablation_build(tiny_cfg, "rnk-only"), m=1.0)

    def test_state_rejects_mismatched_configs(self, tiny_cfg):
        other = tiny_cfg.model_copy(update={"embed_dim": 4})
        with pytest.raises(ConfigError):
            CrossDomainState(source=build(tiny_cfg), target=build(other), m=1.0)

    def test_cross_training_records_contrastive_loss(self, tiny_cfg, tiny_spec, tiny_dataset, tiny_train_cfg):
        checkpoint = build(tiny_cfg, seed=0).to_checkpoint()
        target = generate(tiny_spec.model_copy(update={"domain_shift": 0.5, "seed": 9}))
        state = CrossDomainState.from_checkpoint(checkpoint, loss=LossConfig(lambda_cts=0.5))
        result = train_cross(state, tiny_dataset, target, tiny_train_cfg)
        assert (result.history["l_cts"] > 0.0).any()
        assert np.isfinite(result.final_loss)

    def test_frozen_source_is_not_updated(self, tiny_cfg, tiny_dataset, tiny_train_cfg):
        state = CrossDomainState.from_checkpoint(build(tiny_cfg, seed=0).to_checkpoint())
        before = state.source.state_dict()
        cfg = tiny_train_cfg.model_copy(update={"freeze_source": True, "epochs": 1})
        train_cross(state, tiny_dataset, tiny_dataset, cfg)
        assert params_equal(before, state.source.state_dict())
        assert not params_equal(before, state.target.state_dict())

    def test_zero_contrastive_weight_equals_fine_tuning(self, tiny_experiment):
        assert cross_matches_fine_tune(tiny_experiment)

    def test_fine_tune_starts_from_checkpoint(self, tiny_cfg, tiny_dataset, tiny_train_cfg):
        checkpoint = build(tiny_cfg, seed=4).to_checkpoint()
        first = fine_tune(checkpoint, tiny_dataset, tiny_train_cfg)
        second = fine_tune(checkpoint, tiny_dataset, tiny_train_cfg)
        assert params_equal(first.checkpoint.params, second.checkpoint.params)
        assert first.checkpoint.seed == 4


class TestPooledTraining:
    def test_merge_keeps_identities_disjoint(self, tiny_dataset):
        merged = merge_datasets(tiny_dataset, tiny_dataset)
        assert len(merged) == 2 * len(tiny_dataset)
        assert len({img.person_id for img in merged}) == 12

    def test_pooled_pairs_are_sum_of_parts(self, tiny_dataset):
        merged = merge_datasets(tiny_dataset, tiny_dataset[:4])
        assert len(enumerate_positive_pairs(merged)) == \
            len(enumerate_positive_pairs(tiny_dataset)) + len(enumerate_positive_pairs(tiny_dataset[:4]))

    def test_train_aug(self, tiny_cfg, tiny_dataset, tiny_train_cfg):
        result = train_aug(build(tiny_cfg, seed=0), tiny_dataset[:4], tiny_dataset, tiny_train_cfg)
        assert len(result.history) == tiny_train_cfg.epochs
        assert np.isfinite(result.final_loss)
