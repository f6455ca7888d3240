import os

import numpy as np
import numpy.testing as npt
import pytest

from signmaml.models import LossKind
from signmaml.params import ParamVector
from signmaml.taskio import load_episode, load_params, save_episode, save_params, task_from_bytes, task_to_bytes
from signmaml.tasks import (
    DOMAIN_FIXTURE,
    DOMAIN_TEST,
    DOMAIN_TRAIN,
    StreamKey,
    TaskDistribution,
    nearest_mean_accuracy,
    sample_episode,
    sample_task,
    sample_task_with_means,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

BLOBS = TaskDistribution(kind="gaussian-blobs", input_dim=3, n_way=3, k_shot=2, n_query=4,
                         separation=2.0, noise=0.5)
SINE = TaskDistribution(kind="sinusoid", k_shot=5, n_query=7)


def test_distribution_validation():
    with pytest.raises(ValueError):
        TaskDistribution(kind="moons")
    with pytest.raises(ValueError):
        TaskDistribution(kind="gaussian-blobs", n_way=1)
    with pytest.raises(ValueError):
        TaskDistribution(kind="sinusoid", k_shot=0)


def test_same_stream_is_bitwise_identical():
    a = sample_task(BLOBS, StreamKey(9, DOMAIN_TRAIN, 4, 2))
    b = sample_task(BLOBS, StreamKey(9, DOMAIN_TRAIN, 4, 2))
    assert a.support_x.tobytes() == b.support_x.tobytes()
    assert a.query_x.tobytes() == b.query_x.tobytes()


def test_distinct_streams_differ():
    base = sample_task(BLOBS, StreamKey(9, DOMAIN_TRAIN, 4, 2))
    for other in (StreamKey(9, DOMAIN_TRAIN, 4, 3), StreamKey(9, DOMAIN_TRAIN, 5, 2),
                  StreamKey(9, DOMAIN_TEST, 4, 2), StreamKey(10, DOMAIN_TRAIN, 4, 2)):
        assert sample_task(BLOBS, other).support_x.tobytes() != base.support_x.tobytes()


def test_stream_key_bounds():
    with pytest.raises(ValueError):
        StreamKey(0, domain=300).rng()
    with pytest.raises(ValueError):
        StreamKey(0, task=2**24).rng()


def test_class_balance_and_label_multiset():
    task = sample_task(BLOBS, StreamKey(1))
    n, k, q = BLOBS.n_way, BLOBS.k_shot, BLOBS.n_query
    assert sorted(task.support_y.tolist()) == sorted(list(range(n)) * k)
    assert sorted(task.query_y.tolist()) == sorted(list(range(n)) * q)
    assert task.support_x.shape == (n * k, BLOBS.input_dim)
    assert task.query_x.shape == (n * q, BLOBS.input_dim)


def test_support_query_disjoint():
    for i in range(20):
        task = sample_task(BLOBS, StreamKey(2, DOMAIN_TRAIN, 0, i))
        support_rows = {row.tobytes() for row in task.support_x}
        assert all(row.tobytes() not in support_rows for row in task.query_x)


def test_sinusoid_amplitude_bound():
    for i in range(50):
        task = sample_task(SINE, StreamKey(3, DOMAIN_TRAIN, 0, i))
        assert np.all(np.abs(task.support_y) <= SINE.amp_max)
        assert np.all(np.abs(task.query_y) <= SINE.amp_max)
    pinned = TaskDistribution(kind="sinusoid", k_shot=4, n_query=4, amp_min=1.5, amp_max=1.5)
    task = sample_task(pinned, StreamKey(0))
    assert np.all(np.abs(task.query_y) <= 1.5)
    assert task.loss_kind is LossKind.MSE


def test_zero_noise_points_equal_means_and_nearest_mean_is_perfect():
    dist = TaskDistribution(kind="gaussian-blobs", input_dim=4, n_way=4, k_shot=1, n_query=3,
                            separation=3.0, noise=0.0)
    task, means = sample_task_with_means(dist, StreamKey(6))
    for c in range(dist.n_way):
        npt.assert_array_equal(task.support_x[c], means[c])
    assert nearest_mean_accuracy(task, means) == 1.0


def test_episode_of_one_equals_sample_task():
    key = StreamKey(4, DOMAIN_TRAIN, 7)
    (only,) = sample_episode(BLOBS, 1, key)
    direct = sample_task(BLOBS, key.for_task(0))
    assert only.support_x.tobytes() == direct.support_x.tobytes()


def test_sequential_episodes_share_no_draws():
    e0 = sample_episode(BLOBS, 4, StreamKey(4, DOMAIN_TRAIN, 0))
    e1 = sample_episode(BLOBS, 4, StreamKey(4, DOMAIN_TRAIN, 1))
    seen = {t.support_x.tobytes() for t in e0}
    assert all(t.support_x.tobytes() not in seen for t in e1)


def test_episode_golden_fixture():
    episode = sample_episode(BLOBS, 4, StreamKey(42, DOMAIN_FIXTURE, 0))
    fresh = b"".join([task_to_bytes(t) for t in episode])
    with open(os.path.join(FIXTURES, "episode_golden.bin"), "rb") as fh:
        golden = fh.read()
    assert golden[4:] == fresh  # after the task-count header
    assert int.from_bytes(golden[:4], "little") == 4


# calibration constant: Bayes-optimal nearest-mean accuracy on the pinned
# blob family, Monte-Carlo over 1e4 tasks (measured once and frozen here)
CALIBRATED_BAYES_ACC = 0.9994799999999999


def test_blob_bayes_calibration_constant():
    dist = TaskDistribution(kind="gaussian-blobs", input_dim=8, n_way=5, k_shot=1, n_query=15,
                            separation=5.0, noise=1.0)
    accs = []
    for i in range(10_000):
        task, means = sample_task_with_means(dist, StreamKey(20260809, DOMAIN_FIXTURE, 0, i))
        accs.append(nearest_mean_accuracy(task, means))
    value = float(np.mean(accs))
    assert 1.0 / dist.n_way < value < 1.0
    assert abs(value - CALIBRATED_BAYES_ACC) < 1e-12


# ---------------------------------------------------------------------------
# binary round trips
# ---------------------------------------------------------------------------

def test_task_roundtrip_classification():
    task = sample_task(BLOBS, StreamKey(8))
    back, _ = task_from_bytes(task_to_bytes(task))
    assert back.support_x.tobytes() == task.support_x.tobytes()
    assert back.query_x.tobytes() == task.query_x.tobytes()
    assert np.array_equal(back.support_y, task.support_y)
    assert back.loss_kind is LossKind.CROSS_ENTROPY
    assert (back.n_way, back.k_shot, back.n_query) == (task.n_way, task.k_shot, task.n_query)


def test_task_roundtrip_regression():
    task = sample_task(SINE, StreamKey(8))
    back, _ = task_from_bytes(task_to_bytes(task))
    assert back.support_y.tobytes() == task.support_y.tobytes()
    assert back.query_y.tobytes() == task.query_y.tobytes()
    assert back.loss_kind is LossKind.MSE


def test_episode_file_roundtrip(tmp_path):
    episode = sample_episode(SINE, 3, StreamKey(12, DOMAIN_FIXTURE, 1))
    path = tmp_path / "episode.bin"
    save_episode(path, episode)
    back = load_episode(path)
    assert len(back) == 3
    for a, b in zip(episode, back):
        assert a.query_y.tobytes() == b.query_y.tobytes()


def test_params_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pv = ParamVector.from_arrays([("w0", rng.standard_normal((3, 5))), ("b0", np.zeros((1, 5)))])
    path = tmp_path / "ckpt.bin"
    save_params(path, pv)
    back = load_params(path)
    assert back.values.tobytes() == pv.values.tobytes()
    assert back.segments == pv.segments
