import numpy as np
import pytest

from collabdict import mtvae, topology
from collabdict.consensus import ConsensusSession
from collabdict.errors import TrainingFault
from collabdict.mtvae import MlpSpec

from oracles import finite_difference, gaussian_kl_to_standard


def _pair(rng, m=3, d=2, hidden=5):
    theta = mtvae.init_mlp(MlpSpec(d, hidden, m), rng, head_scale=1.0)
    phi = mtvae.init_mlp(MlpSpec(m, hidden, d), rng, head_scale=1.0)
    for p in (theta, phi):
        p["b1"] = rng.normal(scale=0.5, size=p["b1"].shape)
    return phi, theta


def _block_rel_err(a, f):
    return np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    phi, theta = _pair(rng)
    data = rng.normal(size=(6, 3))
    g_phi, g_theta = mtvae.elbo_grad(phi, theta, data, J=3, seed=seed)
    for params, grads in ((phi, g_phi), (theta, g_theta)):
        for key in mtvae.PARAM_KEYS:
            fd = np.zeros_like(params[key])
            for idx in np.ndindex(params[key].shape):
                fd[idx] = finite_difference(lambda: mtvae.elbo(phi, theta, data, 3, seed).value,
                                            params, key, idx, 1e-5)
            assert _block_rel_err(grads[key], fd) < 1e-6, key


def test_kl_term_matches_gaussian_kl(rng):
    phi, _ = _pair(rng)
    m, h = mtvae.encoder_forward(phi, rng.normal(size=(20, 3)))
    assert mtvae.kl_term_from_outputs(m, h) == pytest.approx(-gaussian_kl_to_standard(m, h).sum(), abs=1e-10)


def test_kl_term_zero_at_prior():
    assert mtvae.kl_term_from_outputs(np.zeros((4, 3)), np.ones((4, 3))) == 0.0


def test_elbo_is_kl_plus_recon(rng):
    phi, theta = _pair(rng)
    est = mtvae.elbo(phi, theta, rng.normal(size=(5, 3)), J=4, seed=1)
    assert est.value == pytest.approx(est.kl_term + est.recon_term)
    assert est.J == 4


def test_elbo_deterministic_given_seed(rng):
    phi, theta = _pair(rng)
    x = rng.normal(size=(5, 3))
    assert mtvae.elbo(phi, theta, x, 4, seed=9).value == mtvae.elbo(phi, theta, x, 4, seed=9).value
    assert mtvae.elbo(phi, theta, x, 4, seed=9).value != mtvae.elbo(phi, theta, x, 4, seed=10).value


def test_constant_decoder_score_is_exact_nll(rng):
    phi, theta = _pair(rng)
    for k in ("W1", "Wmu", "Wsig"):
        theta[k] = np.zeros_like(theta[k])
    theta["bmu"] = np.array([1.0, -1.0, 0.5])
    theta["bsig"] = np.log(np.expm1(np.array([2.0, 1.0, 0.5])))
    x = rng.normal(size=(4, 3))
    sig = np.array([2.0, 1.0, 0.5])
    expected = -np.sum(-0.5 * np.log(2 * np.pi) - np.log(sig) - 0.5 * ((x - theta["bmu"]) / sig) ** 2, axis=1)
    np.testing.assert_allclose(mtvae.anomaly_scores_mc(x, phi, theta, J=7), expected, rtol=1e-12)


def test_dimension_mismatch_rejected(rng):
    phi, theta = _pair(rng)
    with pytest.raises(ValueError):
        mtvae.encoder_forward(phi, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        mtvae.elbo(phi, theta, np.zeros((2, 3)), J=0)


def test_local_sgd_ascends(rng):
    phi, theta = _pair(rng)
    x = rng.normal(size=(10, 3))
    before = mtvae.elbo(phi, theta, x, 8, seed=0).value
    new_phi, _, est = mtvae.local_sgd(phi, theta, x, 1e-4, 8, seed=0)
    assert est.value > before
    assert est.value == pytest.approx(mtvae.elbo(new_phi, theta, x, 8, seed=0).value)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_local_sgd_raises_on_divergence(rng):
    phi, theta = _pair(rng)
    with pytest.raises(TrainingFault):
        mtvae.local_sgd(phi, theta, rng.normal(size=(5, 3)), 1e200, 2, seed=0)


def test_flatten_round_trip(rng):
    phi, _ = _pair(rng)
    back = mtvae.unflatten_params(mtvae.flatten_params(phi), phi)
    for k in mtvae.PARAM_KEYS:
        np.testing.assert_array_equal(back[k], phi[k])


def test_global_step_consensus_matches_exact_sum(rng):
    _, theta = _pair(rng)
    grads = [{k: rng.normal(size=v.shape) for k, v in theta.items()} for _ in range(5)]
    exact = mtvae.global_step(theta, grads, 0.1)
    sess = ConsensusSession(topology.build_cycle_inverse_chord(5), tol=1e-11, chunks=2, seed=3)
    views = mtvae.global_step(theta, grads, 0.1, sess)
    for view in views:
        for k in mtvae.PARAM_KEYS:
            np.testing.assert_allclose(view[k], exact[0][k], atol=1e-10)


def _manual_sgd(phi, theta, data, eta, j_count, steps, seed):
    phi, theta = dict(phi), dict(theta)
    objectives = []
    for t in range(steps):
        step_seed = [seed, 3, t, 0, 0]
        g_phi, _ = mtvae.elbo_grad(phi, theta, data, j_count, step_seed)
        phi = {k: phi[k] + eta * g_phi[k] for k in phi}
        _, g_theta = mtvae.elbo_grad(phi, theta, data, j_count, step_seed)
        objectives.append(mtvae.elbo(phi, theta, data, j_count, step_seed).value)
        theta = {k: theta[k] + eta * g_theta[k] for k in theta}
    return phi, theta, objectives


def test_single_participant_matches_plain_sgd(rng):
    data = rng.normal(size=(40, 3))
    theta, phis = mtvae.init_params(3, 2, 8, 1, seed=4)
    fit = mtvae.fit([data], None, latent_dim=2, hidden_dim=8, eta=1e-3, J=4, epochs=10, seed=4)
    phi, th, objs = _manual_sgd(phis[0], theta, data, 1e-3, 4, 10, seed=4)
    np.testing.assert_allclose([r.objective for r in fit.history], objs, rtol=1e-12)
    for k in mtvae.PARAM_KEYS:
        np.testing.assert_allclose(fit.theta[k], th[k], atol=1e-12)
        np.testing.assert_allclose(fit.phis[0][k], phi[k], atol=1e-12)


def test_fit_improves_objective(rng):
    data = [rng.normal(size=(60, 2)) + 3 * s for s in range(3)]
    fit = mtvae.fit(data, topology.build_complete(3), eta=1e-4, epochs=60, seed=0)
    assert fit.total_objective(59) > fit.total_objective(0)
    assert len(fit.history) == 3 * 60
    assert len(fit.consensus_iterations) == 60


def test_minibatch_epochs_take_multiple_steps(rng):
    data = [rng.normal(size=(30, 2)) for _ in range(3)]
    fit = mtvae.fit(data, topology.build_complete(3), eta=1e-4, epochs=2, batch_size=10, seed=0)
    assert len(fit.consensus_iterations) == 6


def test_checkpoint_and_log(tmp_path, rng):
    data = [rng.normal(size=(20, 2)) for _ in range(3)]
    fit = mtvae.fit(data, topology.build_complete(3), eta=1e-4, epochs=3, seed=0)
    mtvae.save_checkpoint(tmp_path / "m.json", fit)
    back = mtvae.load_checkpoint(tmp_path / "m.json")
    np.testing.assert_array_equal(back.theta["Wmu"], fit.theta["Wmu"])
    assert back.history == fit.history
    mtvae.write_training_log(tmp_path / "log.csv", fit.history)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,participant,objective,kl_term"
    assert len(lines) == 1 + 9


def test_epoch_record_collapse_flag():
    assert mtvae.EpochRecord(0, 0, -1.0, -1e-6, 10).collapsed
    assert not mtvae.EpochRecord(0, 0, -1.0, -5.0, 10).collapsed
