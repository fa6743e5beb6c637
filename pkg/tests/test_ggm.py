import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from collabdict import ggm, topology
from collabdict.consensus import ConsensusSession
from collabdict.errors import ModelCollapseError
from collabdict.ggm import Aggregates, GgmGlobal, GgmHyper
from collabdict.harness.synthetic import SyntheticSpec, generate_synthetic

from oracles import central_em_round


def _random_model(rng, k, m):
    means = rng.normal(scale=3, size=(k, m))
    precs = []
    for _ in range(k):
        a = rng.normal(size=(m, m))
        precs.append(a @ a.T + m * np.eye(m))
    return GgmGlobal(means, np.array(precs))


def _datasets(rng, s, m, n=60):
    return [rng.normal(size=(n, m)) + rng.normal(scale=2, size=m) for _ in range(s)]


def test_log_gaussian_matches_scipy(rng):
    model = _random_model(rng, 1, 3)
    x = rng.normal(size=(10, 3))
    ref = multivariate_normal(model.means[0], np.linalg.inv(model.precisions[0])).logpdf(x)
    np.testing.assert_allclose(ggm.log_gaussian(x, model.means[0], model.precisions[0]), ref, rtol=1e-12)


def test_score_standard_normal_at_mean():
    model = GgmGlobal(np.zeros((1, 1)), np.ones((1, 1, 1)))
    assert ggm.anomaly_score(np.zeros(1), np.ones(1), model) == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)


def test_score_two_components_by_hand():
    model = GgmGlobal(np.array([[0.0], [2.0]]), np.ones((2, 1, 1)))
    x = np.array([1.0])
    # equidistant from both means: responsibilities 1/2 each, each nll = 0.5 ln 2pi + 0.5
    assert ggm.anomaly_score(x, np.array([0.5, 0.5]), model) == pytest.approx(0.5 * np.log(2 * np.pi) + 0.5)
    np.testing.assert_allclose(ggm.responsibilities(x, np.array([0.5, 0.5]), model), [0.5, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_responsibilities_are_distributions(k, m, seed):
    rng = np.random.default_rng(seed)
    model = _random_model(rng, k, m)
    x = rng.normal(scale=50, size=(20, m))  # far-away points stress the log-space path
    r = ggm.responsibilities(x, rng.dirichlet(np.ones(k)), model)
    assert np.all(np.isfinite(r)) and np.all(r >= 0)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)


def test_zero_weight_component_gets_no_responsibility(rng):
    model = _random_model(rng, 2, 2)
    r = ggm.responsibilities(rng.normal(size=(5, 2)), np.array([1.0, 0.0]), model)
    np.testing.assert_array_equal(r[:, 1], 0.0)


def test_suff_stats_flatten_round_trip(rng):
    model = _random_model(rng, 3, 2)
    _, stats = ggm.local_update(rng.normal(size=(30, 2)), np.full(3, 1 / 3), model)
    back = ggm.SuffStats.unflatten(stats.flatten(), 3, 2)
    np.testing.assert_array_equal(back.second, stats.second)
    np.testing.assert_allclose(stats.counts.sum(), 30)


def test_consensus_aggregate_matches_exact(rng):
    model = _random_model(rng, 2, 3)
    data = _datasets(rng, 5, 3)
    stats = [ggm.local_update(d, np.full(2, 0.5), model)[1] for d in data]
    exact = ggm.aggregate(stats)[0]
    sess = ConsensusSession(topology.build_cycle_inverse_chord(5), tol=1e-10, chunks=3, seed=1)
    for view in ggm.aggregate(stats, sess):
        np.testing.assert_allclose(view.counts, exact.counts, atol=1e-8)
        np.testing.assert_allclose(view.scatters, exact.scatters, atol=1e-8)


def test_prune_keeps_only_heavy_components():
    agg = Aggregates(np.array([5.0, 0.5, 1.0]), np.zeros((3, 1)), np.ones((3, 1, 1)))
    np.testing.assert_array_equal(ggm.prune(agg, 1.0), [0, 2])
    with pytest.raises(ModelCollapseError):
        ggm.prune(agg, 10.0)


def test_optimize_global_single_point_mean_shrinks_to_prior():
    # one unit of mass at x=4 with lambda0=1 puts the mean halfway to m0=0
    agg = Aggregates(np.array([1.0]), np.array([[4.0]]), np.array([[[16.0]]]))
    out = ggm.optimize_global(agg, GgmHyper(lambda0=1.0, rho=0.0))
    assert out.means[0, 0] == pytest.approx(2.0)
    # scatter = 0 + 1/2 * 16 = 8, precision = b / 8 with b = 2
    assert out.precisions[0, 0, 0] == pytest.approx(2.0 / 8.0, rel=1e-6)


def test_round_matches_central_oracle(rng):
    hyper = GgmHyper(lambda0=0.5, rho=0.2, delta=1.0)
    data = _datasets(rng, 4, 3)
    glob = ggm.init_global(data, 3, hyper, seed=2)
    views = [glob] * 4
    weights = [np.full(3, 1 / 3)] * 4
    sess = ConsensusSession(topology.build_complete(4), tol=1e-10, chunks=2, seed=0)
    new_views, locals_ = ggm.em_round(data, weights, views, hyper, sess)
    means, precs, w = central_em_round(data, weights, glob.means, glob.precisions, hyper)
    for view in new_views:
        np.testing.assert_allclose(view.means, means, atol=1e-7)
        np.testing.assert_allclose(view.precisions, precs, atol=1e-6)
    for loc, wo in zip(locals_, w):
        np.testing.assert_allclose(loc.weights, wo, atol=1e-12)


def test_fit_recovers_planted_means():
    spec = SyntheticSpec(S=5, M=2, K_true=2, counts=300, means=[[-4, 0], [4, 0]], anomaly_rate=0.0, seed=3)
    data = generate_synthetic(spec)
    fit = ggm.fit(data.datasets, topology.build_cycle_inverse_chord(5), GgmHyper(rho=0.1), 2, seed=1)
    assert fit.converged
    order = np.argsort(fit.model.means[:, 0])
    np.testing.assert_allclose(fit.model.means[order], data.means, atol=0.15)
    objs = [h.objective for h in fit.history]
    assert all(b >= a - 1e-8 * abs(a) for a, b in zip(objs, objs[1:]))


def test_fit_single_participant_without_graph(rng):
    fit = ggm.fit([rng.normal(size=(80, 2))], None, n_components=1, max_rounds=20)
    assert fit.model.K == 1
    np.testing.assert_allclose(fit.weights[0], [1.0])


def test_fit_requires_graph_for_many(rng):
    with pytest.raises(ValueError):
        ggm.fit(_datasets(rng, 2, 2), None)


def test_views_agree_within_consensus_tolerance(rng):
    data = _datasets(rng, 5, 2)
    fit = ggm.fit(data, topology.build_cycle_inverse_chord(5), n_components=2, max_rounds=5, consensus_tol=1e-9)
    for v in fit.views:
        np.testing.assert_allclose(v.means, fit.model.means, atol=1e-6)


def test_excess_components_are_pruned(rng):
    data = [rng.normal(size=(15, 2)) for _ in range(3)]
    fit = ggm.fit(data, topology.build_complete(3), GgmHyper(delta=5.0), n_components=12, max_rounds=50)
    assert fit.model.K < 12
    for w in fit.weights:
        assert w.size == fit.model.K
        assert w.sum() == pytest.approx(1.0)


def test_checkpoint_round_trip(tmp_path, rng):
    model = _random_model(rng, 2, 3)
    model.hyper = GgmHyper(m0=(1.0, 2.0, 3.0))
    weights = [np.array([0.3, 0.7]), np.array([0.9, 0.1])]
    path = tmp_path / "m.json"
    ggm.save_checkpoint(path, model, weights)
    back, wb = ggm.load_checkpoint(path)
    np.testing.assert_array_equal(back.means, model.means)
    np.testing.assert_array_equal(back.precisions, model.precisions)
    assert back.hyper == model.hyper
    np.testing.assert_array_equal(wb[1], weights[1])


def test_dataset_csv_with_header(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("a,b\n1,2\n3,4\n")
    np.testing.assert_array_equal(ggm.read_dataset(path), [[1, 2], [3, 4]])
    ggm.write_dataset(path, np.array([[0.1, 1 / 3]]))
    assert ggm.read_dataset(path)[0, 1] == 1 / 3
