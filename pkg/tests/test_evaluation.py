import numpy as np
import pytest

from mtdnet.core.errors import DatasetError
from mtdnet.core.network import MTDNet, build
from mtdnet.models import CmcCurve, ForwardMode, ScoreMatrix, Scorer, SynthSpec
from mtdnet.services.evaluation import (
    CASE_1,
    CASE_2,
    best_logistic_loss,
    build_single_shot_eval,
    cmc,
    curve_frame,
    evaluate,
    fig1_case_study,
    match_ranks,
    mean_curve,
    min_threshold_errors,
    select_single_shot,
)
from mtdnet.services.synth_data import generate

from conftest import tiny_net_config


def brute_force_cmc(scores: np.ndarray, match: np.ndarray) -> np.ndarray:
    """Sort each row best-first with the match placed after items it ties with."""
    n_q, n_g = scores.shape
    hits = np.zeros(n_g)
    for q in range(n_q):
        order = sorted(range(n_g), key=lambda g: (-scores[q, g], g == match[q]))
        rank = order.index(match[q]) + 1
        hits[rank - 1:] += 1
    return hits / n_q


class TestCmc:
    def test_single_candidate(self):
        curve = cmc(ScoreMatrix(scores=[[0.3], [0.1]], match=[0, 0]))
        assert curve.rank(1) == 1.0

    def test_hand_ranking(self):
        curve = cmc(ScoreMatrix(scores=[[0.9, 0.1], [0.8, 0.2]], match=[0, 1]))
        np.testing.assert_allclose(curve.accuracies, [0.5, 1.0])

    def test_ties_count_against_match(self):
        matrix = ScoreMatrix(scores=[[0.5, 0.5, 0.1]], match=[0])
        assert match_ranks(matrix).tolist() == [2]

    def test_constant_scorer_never_ranks_first(self):
        curve = cmc(ScoreMatrix(scores=np.full((4, 4), 0.5), match=np.arange(4)))
        assert curve.rank(1) == 0.0
        assert curve.rank(4) == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n_q = int(rng.integers(1, 31))
            n_g = int(rng.integers(n_q, 41))
            scores = np.round(rng.uniform(size=(n_q, n_g)), 1)  # rounding injects ties
            match = rng.permutation(n_g)[:n_q]
            curve = cmc(ScoreMatrix(scores=scores, match=match))
            np.testing.assert_array_equal(curve.accuracies, brute_force_cmc(scores, match))

    def test_monotone_and_ends_at_one(self):
        rng = np.random.default_rng(3)
        curve = cmc(ScoreMatrix(scores=rng.normal(size=(12, 20)), match=np.arange(12)))
        assert np.all(np.diff(curve.accuracies) >= 0)
        assert curve.accuracies[-1] == 1.0

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=(10, 15))
        first = cmc(ScoreMatrix(scores=scores, match=np.arange(10)))
        second = cmc(ScoreMatrix(scores=np.exp(3.0 * scores), match=np.arange(10)))
        np.testing.assert_array_equal(first.accuracies, second.accuracies)

    def test_duplicating_match_score_never_improves_rank(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(6, 9))
        match = np.arange(6)
        before = match_ranks(ScoreMatrix(scores=scores, match=match))
        tied = scores.copy()
        tied[np.arange(6), 8] = scores[np.arange(6), match]
        after = match_ranks(ScoreMatrix(scores=tied, match=match))
        assert np.all(after >= before)

    def test_rank_saturates_and_rejects_zero(self):
        curve = CmcCurve(accuracies=np.array([0.5, 1.0]), n_queries=2, gallery_size=2)
        assert curve.rank(10) == 1.0
        assert curve.summary() == {"rank-1": 0.5, "rank-5": 1.0, "rank-10": 1.0}
        with pytest.raises(ValueError):
            curve.rank(0)

    def test_mean_curve_and_frame(self):
        a = CmcCurve(accuracies=np.array([0.0, 1.0]), n_queries=2, gallery_size=2)
        b = CmcCurve(accuracies=np.array([1.0, 1.0]), n_queries=2, gallery_size=2)
        mean = mean_curve([a, b])
        np.testing.assert_allclose(mean.accuracies, [0.5, 1.0])
        frame = curve_frame(mean)
        assert list(frame.columns) == ["rank", "accuracy"]
        assert frame["rank"].tolist() == [1, 2]


class TestSingleShot:
    def test_gallery_layout(self, tiny_dataset):
        test = [img for img in tiny_dataset if img.person_id < 4]
        distractors = [img for img in tiny_dataset if img.person_id >= 4]
        queries, gallery = select_single_shot(test, distractors, seed=0)
        assert [q.person_id for q in queries] == [0, 1, 2, 3]
        assert all(q.camera_id == 1 for q in queries)
        assert [g.person_id for g in gallery[:4]] == [0, 1, 2, 3]
        assert len(gallery) == 6

    def test_missing_camera_names_identity(self, tiny_dataset):
        test = [img for img in tiny_dataset if not (img.person_id == 2 and img.camera_id == 2)]
        with pytest.raises(DatasetError, match="identity 2"):
            select_single_shot(test, [], seed=0)

    def test_seeded_choice_among_several_images(self):
        data = generate(SynthSpec(n_identities=4, images_per_camera=3, image_size=[16, 16], seed=2))
        first = select_single_shot(data, [], seed=11)
        second = select_single_shot(data, [], seed=11)
        assert [id(g) for g in first[1]] == [id(g) for g in second[1]]

    def test_score_matrix_shapes(self, tiny_dataset):
        net = MTDNet(tiny_net_config(), ForwardMode.TEST_PAIR)
        test = [img for img in tiny_dataset if img.person_id < 3]
        distractors = [img for img in tiny_dataset if img.person_id >= 3]
        matrix = build_single_shot_eval(test, distractors, net, Scorer.CLS_PROB, seed=0)
        assert matrix.scores.shape == (3, 6)
        assert matrix.match.tolist() == [0, 1, 2]
        assert np.all((matrix.scores >= 0.0) & (matrix.scores <= 1.0))

    def test_zero_final_layer_scores_like_chance_or_worse(self, tiny_dataset):
        cfg = tiny_net_config().model_copy(update={"zero_init_final": True})
        net = MTDNet(cfg, ForwardMode.TEST_PAIR)
        curve = evaluate(net, tiny_dataset, (), Scorer.CLS_PROB, seeds=(0, 1))
        # every score is exactly 0.5, and ties go against the match
        assert curve.rank(1) == 0.0
        assert curve.accuracies[-1] == 1.0

    def test_evaluate_is_deterministic(self, tiny_dataset):
        net = build(tiny_net_config(), seed=1)
        first = evaluate(net, tiny_dataset, (), Scorer.NEG_EUCLID, seeds=(0, 1, 2))
        second = evaluate(net, tiny_dataset, (), Scorer.NEG_EUCLID, seeds=(0, 1, 2))
        np.testing.assert_array_equal(first.accuracies, second.accuracies)


class TestCaseStudy:
    def test_report_passes(self):
        report = fig1_case_study()
        assert report.passed, report.summary()
        first, second = report.cases
        assert first.rank1 == 1.0
        assert second.rank1 == pytest.approx(2.0 / 3.0)
        assert second.best_loss < first.best_loss
        assert "PASS" in report.summary()

    def test_threshold_errors(self):
        for case, expected in ((CASE_1, 2), (CASE_2, 1)):
            scores = np.array([[pos, *negs] for pos, negs in case])
            labels = np.zeros_like(scores)
            labels[:, 0] = 1
            assert min_threshold_errors(scores.ravel(), labels.ravel()) == expected

    def test_logistic_loss_prefers_separable_layout(self):
        scores = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([0, 0, 1, 1])
        loss, beta, threshold = best_logistic_loss(scores, labels)
        assert loss < 0.01
        assert 0.2 < threshold < 0.8
        assert beta > 10.0

    def test_frame(self):
        frame = fig1_case_study().to_frame()
        assert frame["name"].tolist() == ["case 1", "case 2"]
