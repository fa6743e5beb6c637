import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabdict import consensus, topology
from collabdict.consensus import ConsensusSession, ConsensusVector, MessageLog
from collabdict.errors import ConsensusError


def _w(graph):
    return topology.consensus_weights(graph)


def test_step_matches_elementwise_update(rng):
    g = topology.build_random_connected(12, 0.3, seed=1)
    x = rng.normal(size=(12, 3))
    out = consensus.step(ConsensusVector(x), _w(g))
    np.testing.assert_allclose(out.values, consensus.step_elementwise(x, g), atol=1e-14)
    assert out.iteration == 1


def test_step_conserves_sum(rng):
    g = topology.build_cycle_inverse_chord(31)
    x = rng.normal(size=31)
    assert consensus.step(ConsensusVector(x), _w(g)).values.sum() == pytest.approx(x.sum(), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_run_reaches_mean(size, seed):
    rng = np.random.default_rng(seed)
    g = topology.build_random_connected(size, 0.3, seed)
    x = rng.normal(scale=10, size=size)
    res = consensus.run(x, _w(g), tol=1e-8)
    assert np.max(np.abs(res.values - x.mean())) < 1e-8
    assert res.residual < 1e-8


def test_run_tensor_payload(rng):
    g = topology.build_cycle_inverse_chord(11)
    x = rng.normal(size=(11, 2, 3))
    res = consensus.run(x, _w(g), tol=1e-9)
    assert res.values.shape == x.shape
    np.testing.assert_allclose(res.values, np.broadcast_to(x.mean(axis=0), x.shape), atol=1e-9)


def test_already_agreed_takes_zero_iterations():
    g = topology.build_path(5)
    res = consensus.run(np.full(5, 3.0), _w(g))
    assert res.iterations == 0


def test_max_iter_raises_with_residual():
    g = topology.build_path(30)
    with pytest.raises(ConsensusError) as info:
        consensus.run(np.arange(30.0), _w(g), tol=1e-12, max_iter=5)
    assert info.value.iterations == 5
    assert info.value.residual > 0


def test_disconnected_graph_hits_max_iter():
    a = np.zeros((4, 4))
    a[0, 1] = a[1, 0] = a[2, 3] = a[3, 2] = 1
    w = topology.consensus_weights(topology.Graph(4, a))
    with pytest.raises(ConsensusError):
        consensus.run(np.array([0.0, 0.0, 1.0, 1.0]), w, max_iter=1000)


def test_non_finite_input_rejected():
    with pytest.raises(ConsensusError):
        consensus.run(np.array([1.0, np.nan, 0.0]), _w(topology.build_complete(3)))


def test_trace_written(tmp_path):
    path = tmp_path / "trace.csv"
    g = topology.build_cycle_inverse_chord(5)
    res = consensus.run(np.arange(5.0), _w(g), tol=1e-6, trace_path=path)
    rows = path.read_text().splitlines()
    assert rows[0] == "iter,node,value"
    assert len(rows) == 1 + 5 * (res.iterations + 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_chunk_shares_sum_to_value(count, size, seed):
    values = np.random.default_rng(seed).normal(scale=100, size=size)
    plan = consensus.chunk(values, count, seed)
    assert plan.chunks.shape == (count, size)
    # exact in real arithmetic; float round-off scales with the share amplitude
    assert np.all(np.abs(plan.column_sums() - values) <= 1e-13 * count * np.maximum(1, np.abs(values)))


def test_chunk_shares_bounded():
    values = np.array([0.3, -50.0])
    plan = consensus.chunk(values, 5, seed=2)
    amp = np.maximum(1.0, np.abs(values))
    assert np.all(np.abs(plan.chunks[:-1]) <= amp)


def test_chunked_matches_plain(rng):
    g = topology.build_random_connected(25, 0.2, seed=9)
    x = rng.normal(size=(25, 4))
    plain = consensus.run(x, _w(g), tol=1e-9)
    chunked = consensus.run_chunked(x, _w(g), 4, tol=1e-9, seed=1)
    np.testing.assert_allclose(chunked.values, plain.values, atol=2e-9)


def test_message_log_first_iteration_carries_raw_without_chunking(rng):
    g = topology.build_cycle_inverse_chord(7)
    x = rng.normal(size=7)
    log = MessageLog()
    consensus.run_chunked(x, _w(g), 1, tol=1e-6, seed=0, log=log)
    # every directed edge carries the sender's raw value
    assert log.count_exposures(x[:, None]) == 2 * len(g.edges())


def test_message_log_hides_raw_with_chunking(rng):
    g = topology.build_cycle_inverse_chord(7)
    x = rng.normal(size=7)
    log = MessageLog()
    consensus.run_chunked(x, _w(g), 3, tol=1e-6, seed=0, log=log)
    assert log.count_exposures(x[:, None]) == 0
    assert sum(1 for _ in log.messages()) == 2 * len(g.edges())


def test_session_sum_and_average(rng):
    g = topology.build_cycle_inverse_chord(5)
    x = rng.normal(size=(5, 3))
    sess = ConsensusSession(g, tol=1e-10, chunks=2, seed=4)
    np.testing.assert_allclose(sess.average(x), np.broadcast_to(x.mean(0), x.shape), atol=1e-9)
    np.testing.assert_allclose(sess.sum(x), np.broadcast_to(x.sum(0), x.shape), atol=1e-8)
    assert len(sess.iterations) == 2


def test_session_relabel_preserves_result(rng):
    g = topology.build_random_connected(9, 0.3, seed=5)
    x = rng.normal(size=(9, 2))
    out = ConsensusSession(g, tol=1e-10, relabel=True, seed=1).average(x)
    np.testing.assert_allclose(out, np.broadcast_to(x.mean(0), x.shape), atol=1e-9)


def test_session_single_participant_is_identity():
    sess = ConsensusSession(None)
    x = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(sess.average(x), x)
    np.testing.assert_array_equal(sess.sum(x), x)


def test_session_rejects_wrong_size():
    sess = ConsensusSession(topology.build_complete(3))
    with pytest.raises(ValueError):
        sess.average(np.zeros(4))
