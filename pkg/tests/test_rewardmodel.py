from __future__ import annotations

import numpy as np
import pytest

from rewardwin import dataset, rewardmodel, simenv, staterepr
from rewardwin.dataset import CaptureSession
from rewardwin.rewardwin_common import (DataError, DimensionMismatchError, MagicMismatchError, ShapeError)


def _bright_dark_session(session_id: int, n: int = 6) -> CaptureSession:
    # success images carry a bright block in the upper half, the rest are dim noise
    rng = np.random.default_rng(session_id)
    labels = np.array([i % 2 for i in range(n)], dtype=np.uint8)
    images = rng.uniform(0.0, 0.2, size=(n, 12, 16))
    images[labels == 1, 1:5, 4:12] = 0.9
    return CaptureSession(session_id, session_id, labels, dataset.quantize(images))


@pytest.fixture(scope="module")
def toy_split():
    return dataset.split([_bright_dark_session(i) for i in range(10)])


def test_classifier_shape(tiny_classifier):
    assert tiny_classifier.network.input_shape == (1, 12, 16)
    assert tiny_classifier.network.output_shape == (2,)
    with pytest.raises(ShapeError):
        rewardmodel.build_classifier((8, 6))


def test_probabilities_sum_to_one(tiny_classifier, rng):
    probs = rewardmodel.class_probabilities(tiny_classifier, rng.random((5, 12, 16)))
    assert probs.shape == (5, 2)
    assert np.allclose(probs.sum(axis=1), 1.0)
    score = rewardmodel.predict_success(tiny_classifier, rng.random((12, 16)))
    assert 0.0 <= score <= 1.0


def test_predict_rejects_other_resolutions(tiny_classifier):
    with pytest.raises(ShapeError):
        rewardmodel.predict_success(tiny_classifier, np.zeros((24, 32)))
    with pytest.raises(ShapeError):
        rewardmodel.predict_success(tiny_classifier, np.zeros((3, 12, 16)))


def test_prediction_is_deterministic(tiny_classifier, rng):
    image = rng.random((12, 16))
    assert rewardmodel.predict_success(tiny_classifier, image) == rewardmodel.predict_success(tiny_classifier, image)


def test_symmetric_head_scores_one_half(rng):
    clf = rewardmodel.build_classifier((16, 12), zero_head=True)
    assert rewardmodel.predict_success(clf, rng.random((12, 16))) == 0.5


def test_ties_count_as_nonsuccess():
    probs = np.array([0.5, 0.5, 0.51, 0.1])
    assert rewardmodel.accuracy_from_probabilities(probs, np.array([0, 1, 1, 0])) == 0.75
    with pytest.raises(DataError):
        rewardmodel.accuracy_from_probabilities(np.zeros(0), np.zeros(0))


def test_all_correct_session_scores_one():
    clf = rewardmodel.build_classifier((16, 12), zero_head=True)
    session = CaptureSession(0, 0, np.zeros(3, dtype=np.uint8), np.zeros((3, 12, 16), dtype=np.uint8))
    assert rewardmodel.evaluate_accuracy(clf, session) == 1.0


def test_training_report_and_best_epoch(toy_split):
    clf, report = rewardmodel.train_classifier(toy_split, epochs=3, batch_size=8, seed=1)
    assert clf.resolution == (16, 12)
    assert len(report.train_loss) == len(report.validation_accuracy) == 3
    best = report.validation_accuracy[report.best_epoch]
    assert best == max(report.validation_accuracy)
    assert report.best_epoch == report.validation_accuracy.index(best)
    assert 0.0 <= report.test_accuracy <= 1.0
    assert len(report.lines()) == 4


def test_training_is_deterministic(toy_split):
    a, _ = rewardmodel.train_classifier(toy_split, epochs=1, batch_size=16, seed=4)
    b, _ = rewardmodel.train_classifier(toy_split, epochs=1, batch_size=16, seed=4)
    c, _ = rewardmodel.train_classifier(toy_split, epochs=1, batch_size=16, seed=5)
    assert a.same_as(b)
    assert not a.same_as(c)


def test_training_learns_the_toy_task(toy_split):
    _, report = rewardmodel.train_classifier(toy_split, epochs=8, batch_size=4, seed=0)
    assert report.train_loss[-1] < report.train_loss[0]


def test_training_rejects_bad_settings(toy_split):
    with pytest.raises(DataError):
        rewardmodel.train_classifier(toy_split, epochs=0)


def test_sweep_keeps_best_validation(toy_split):
    clf, report, reports = rewardmodel.sweep_classifiers(toy_split, grid=((1, 8), (2, 8)), seed=0)
    scores = [r.validation_accuracy[r.best_epoch] for r in reports]
    assert len(reports) == 2
    assert report.validation_accuracy[report.best_epoch] == max(scores)
    assert report is reports[scores.index(max(scores))]


def test_classifier_file_round_trip(tmp_path, tiny_classifier, rng):
    path = rewardmodel.save_classifier(tmp_path / "clf.rwcl", tiny_classifier)
    back = rewardmodel.load_classifier(path)
    assert back.same_as(tiny_classifier)
    image = rng.random((12, 16))
    assert rewardmodel.predict_success(back, image) == rewardmodel.predict_success(tiny_classifier, image)


def test_classifier_file_errors(tiny_classifier):
    data = rewardmodel.classifier_to_bytes(tiny_classifier)
    with pytest.raises(MagicMismatchError):
        rewardmodel.classifier_from_bytes(b"RWCX" + data[4:])
    # a header claiming 32x24 does not fit the dense layer
    with pytest.raises(DimensionMismatchError):
        rewardmodel.classifier_from_bytes(data[:4] + b"\x20\x00\x18\x00" + data[8:])


def test_reward_profile_on_symmetric_head(tiny_env):
    clf = rewardmodel.build_classifier((16, 12), zero_head=True)
    assert rewardmodel.reward_profile(clf, tiny_env, episodes=3) == (0.5, 0.5)


@pytest.mark.slow
def test_trained_classifier_accuracy(trained):
    _, _, _, report = trained
    assert report.test_accuracy >= 0.95


@pytest.mark.slow
def test_trained_reward_shape(trained):
    config, _, clf, _ = trained
    reset_mean, final_mean = rewardmodel.reward_profile(clf, config, episodes=100, seed=11)
    assert final_mean >= 0.9
    assert reset_mean <= 0.1
    assert final_mean - reset_mean >= 0.5


@pytest.mark.slow
def test_large_and_small_renders_agree(trained):
    config, _, clf, _ = trained
    rng = np.random.default_rng(5)
    agree = 0
    for i in range(500):
        states = simenv.expert_rollout(config, 50000 + i)
        state = states[int(rng.integers(len(states)))]
        small = simenv.render(state, config, (32, 24))
        large = staterepr.downsample(simenv.render(state, config, (320, 240)), 32, 24)
        agree += (rewardmodel.predict_success(clf, small) > 0.5) == (rewardmodel.predict_success(clf, large) > 0.5)
    assert agree >= 475
