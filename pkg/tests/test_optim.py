import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egnnlab.egnn import EgnnConfig, count_params, init_model
from egnnlab.errors import ConfigError, ConsistencyError, ProtocolError
from egnnlab.graphdata import batch_graphs, generate_synthetic_dataset
from egnnlab.memprof import MemoryLedger
from egnnlab.optim import (
    AdamState,
    adam_step,
    all_reduce_sum,
    data_parallel_step,
    make_group,
    partition_params,
)
from egnnlab.tape import CheckpointPlan, value_and_grad


def test_adam_first_step_closed_form():
    st_ = AdamState.zeros(1)
    theta = np.array([0.0])
    adam_step(st_, theta, np.array([1.0]))
    assert theta[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    assert st_.t == 1


def test_adam_zero_gradient_is_noop():
    st_ = AdamState.zeros(3)
    theta = np.array([1.0, -2.0, 3.0])
    adam_step(st_, theta, np.zeros(3))
    assert theta.tolist() == [1.0, -2.0, 3.0]


def test_adam_descends_quadratic():
    st_ = AdamState.zeros(1, lr=0.05)
    theta = np.array([1.0])
    path = [theta[0]]
    for _ in range(10):
        adam_step(st_, theta, 2 * theta.copy())
        path.append(theta[0])
        assert np.all(st_.v >= 0)
    assert all(b < a for a, b in zip(path, path[1:])) and path[-1] > 0


def test_adam_updates_views_in_place_and_checks_lengths():
    theta = np.zeros(6)
    adam_step(AdamState.zeros(3), theta[3:], np.ones(3))
    assert np.all(theta[:3] == 0) and np.all(theta[3:] < 0)
    with pytest.raises(ProtocolError):
        adam_step(AdamState.zeros(2), np.zeros(3), np.zeros(3))


def test_adam_workspace_accounting():
    led = MemoryLedger()
    adam_step(AdamState.zeros(10), np.zeros(10), np.ones(10), led)
    assert led.live["workspace"] == 0 and led.category_peak["workspace"] == 2 * 10 * 4


def test_partition_examples():
    assert partition_params(10, 4).sizes() == [3, 3, 2, 2]
    assert partition_params(10, 1).ranges == ((0, 10),)
    assert partition_params(1204, 4).sizes() == [301] * 4
    with pytest.raises(ConfigError):
        partition_params(3, 4)


@given(st.integers(1, 10_000), st.integers(1, 64))
def test_partition_covers_range(P, N):
    if P < N:
        return
    plan = partition_params(P, N)
    assert plan.ranges[0][0] == 0 and plan.ranges[-1][1] == P
    assert all(a[1] == b[0] for a, b in zip(plan.ranges, plan.ranges[1:]))
    sizes = plan.sizes()
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


def test_all_reduce_examples():
    out = all_reduce_sum([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    assert [o.tolist() for o in out] == [[4.0, 6.0], [4.0, 6.0]]
    out[0][0] = 99.0
    assert out[1][0] == 4.0
    v = np.random.default_rng(0).normal(size=5)
    assert all_reduce_sum([v])[0].tobytes() == v.tobytes()
    with pytest.raises(ProtocolError):
        all_reduce_sum([np.zeros(2), np.zeros(3)])


def test_all_reduce_is_left_fold():
    vs = list(np.random.default_rng(1).normal(size=(4, 1000)) * 10.0 ** np.arange(4)[:, None])
    fold = ((vs[0] + vs[1]) + vs[2]) + vs[3]
    for out in all_reduce_sum(vs):
        assert out.tobytes() == fold.tobytes()


@pytest.fixture(scope="module")
def shards():
    graphs = generate_synthetic_dataset(8, 3, 6, 2.5, seed=21)
    return [batch_graphs(graphs[2 * k : 2 * k + 2]) for k in range(4)]


@pytest.fixture(scope="module")
def dp_model():
    return init_model(EgnnConfig(2, 8, seed=4))


def test_single_worker_step_is_plain_training(dp_model, shards):
    group = make_group(dp_model, 1, zero1=False)
    data_parallel_step(group, shards[:1])
    _, grad = value_and_grad(dp_model, shards[0])
    theta = dp_model.theta.copy()
    adam_step(AdamState.zeros(len(theta)), theta, grad)
    assert group.workers[0].theta.tobytes() == theta.tobytes()


def test_zero1_matches_replicated(dp_model, shards):
    rep = make_group(dp_model, 4, zero1=False)
    z = make_group(dp_model, 4, zero1=True)
    for _ in range(10):
        data_parallel_step(rep, shards, "replicated")
        data_parallel_step(z, shards, "zero1")
        assert rep.workers[0].theta.tobytes() == z.workers[0].theta.tobytes()
    P = dp_model.n_params
    assert all(abs(len(w.adam.m) - P / 4) <= 1 for w in z.workers)
    assert all(len(w.adam.m) == P for w in rep.workers)


def test_zero1_with_checkpointing_matches(dp_model, shards):
    a = make_group(dp_model, 4, zero1=True)
    b = make_group(dp_model, 4, zero1=False)
    for _ in range(3):
        data_parallel_step(a, shards, plan=CheckpointPlan(2, 1))
        data_parallel_step(b, shards)
    assert a.workers[3].theta.tobytes() == b.workers[3].theta.tobytes()


def test_doubling_workers_with_same_batch(dp_model, shards):
    one = make_group(dp_model, 1, zero1=False)
    two = make_group(dp_model, 2, zero1=True)
    for _ in range(3):
        data_parallel_step(one, shards[:1])
        data_parallel_step(two, [shards[0], shards[0]])
    assert one.workers[0].theta.tobytes() == two.workers[0].theta.tobytes()


def test_memory_closed_forms(dp_model, shards):
    P = dp_model.n_params
    assert P == count_params(dp_model.config)
    for zero1, N in ((False, 4), (True, 4), (True, 3)):
        group = make_group(dp_model, N, zero1, track_memory=True)
        data_parallel_step(group, shards[:N])
        for k, w in enumerate(group.workers):
            size = group.shards.sizes()[k] if zero1 else P
            assert w.ledger.category_peak["optimizer"] == 2 * size * 4
            assert w.ledger.category_peak["weights"] == P * 4
            assert w.ledger.category_peak["gradients"] == P * 4
            assert w.ledger.live["workspace"] == 0 and w.ledger.live["activations"] == 0
        group.close()
        assert all(w.ledger.live == {"weights": P * 4, "gradients": 0, "activations": 0,
                                     "optimizer": 0, "workspace": 0} for w in group.workers)


def test_divergent_replica_detected(dp_model, shards):
    group = make_group(dp_model, 2, zero1=False)
    group.workers[1].theta[0] += 1e-12
    with pytest.raises(ConsistencyError):
        data_parallel_step(group, shards[:2])


def test_step_argument_checks(dp_model, shards):
    group = make_group(dp_model, 2, zero1=False)
    with pytest.raises(ProtocolError):
        data_parallel_step(group, shards[:3])
    with pytest.raises(ConfigError):
        data_parallel_step(group, shards[:2], "zero1")


def test_frozen_parameters_do_not_move(dp_model, shards):
    group = make_group(dp_model, 1, zero1=False)
    mask = np.zeros(dp_model.n_params, dtype=bool)
    mask[dp_model.slice_of("force.w1")] = True
    group.frozen = mask
    data_parallel_step(group, shards[:1])
    after = group.workers[0].theta
    assert np.array_equal(after[mask], dp_model.theta[mask])
    assert not np.array_equal(after[~mask], dp_model.theta[~mask])
