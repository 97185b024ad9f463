import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from lakesense import belief, nn, synth

FAST = nn.TrainConfig(epochs=60, batch_size=16, learning_rate=1e-2)


def ridge_oracle(X, y, reg):
    # augmented normal equations, intercept column unpenalized
    A = np.hstack([X, np.ones((len(X), 1))])
    P = reg * np.eye(A.shape[1])
    P[-1, -1] = 0.0
    sol = scipy.linalg.solve(A.T @ A + P, A.T @ y, assume_a="sym")
    return sol[:-1], sol[-1]


def test_constant_targets():
    X = np.random.default_rng(0).normal(size=(30, 4))
    m = belief.fit_ridge(X, np.full(30, 3.5), 1.0)
    assert np.allclose(m.weights, 0, atol=1e-12)
    assert m.intercept == pytest.approx(3.5)


def test_exact_line():
    m = belief.fit_ridge(np.array([[0.0], [1.0], [2.0]]), np.array([0.0, 1.0, 2.0]), 1e-10)
    assert m.weights[0] == pytest.approx(1.0, abs=1e-8)
    assert m.intercept == pytest.approx(0.0, abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-6, 1e3))
def test_ridge_matches_oracle(seed, reg):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(98, 10))
    y = X @ rng.normal(size=10) + rng.normal(size=98) + 2.0
    m = belief.fit_ridge(X, y, reg)
    w, b = ridge_oracle(X, y, reg)
    assert np.max(np.abs(m.weights - w)) < 1e-8
    assert abs(m.intercept - b) < 1e-8


def test_ridge_rejects_bad_reg():
    with pytest.raises(ValueError):
        belief.fit_ridge(np.ones((3, 1)), np.ones(3), 0.0)


def test_cv_singleton_grid():
    rng = np.random.default_rng(0)
    assert belief.ridge_cv(rng.normal(size=(20, 2)), rng.normal(size=20), [1.0]) == 1.0


def test_cv_noise_prefers_shrinkage():
    wins = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        X, y = rng.normal(size=(40, 5)), rng.normal(size=40)
        wins += belief.ridge_cv(X, y, [1e-3, 1.0, 1e4], seed=seed) == 1e4
    assert wins >= 40


def test_cv_noiseless_prefers_small():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 3))
    assert belief.ridge_cv(X, X @ [1.0, -2.0, 0.5], [1e-6, 1e3]) == 1e-6


def test_pseudo_label_clamp():
    teacher = belief.RidgeModel(np.zeros(2), 10.0, 1.0)
    p = belief.pseudo_label(teacher, np.zeros((3, 2)), [0.0, 2.0])
    assert np.all(p.labels == 2.0)
    inside = belief.RidgeModel(np.zeros(2), 1.2, 1.0)
    assert np.all(belief.pseudo_label(inside, np.zeros((3, 2)), [0.0, 2.0]).labels == 1.2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_pseudo_labels_in_range(seed):
    rng = np.random.default_rng(seed)
    teacher = belief.RidgeModel(rng.normal(size=3) * 5, rng.normal(), 1.0)
    targets = rng.uniform(0, 3, 20)
    p = belief.pseudo_label(teacher, rng.normal(size=(1000, 3)) * 3, targets)
    assert len(p) == 1000
    assert np.all((p.labels >= targets.min()) & (p.labels <= targets.max()))


def test_student_set_arithmetic():
    rng = np.random.default_rng(0)
    labeled = belief.labeled_set(rng.normal(size=(98, 10)), rng.normal(size=98), 10.0)
    teacher = belief.fit_ridge(labeled.inputs, labeled.targets, 1.0)
    pseudo = belief.pseudo_label(teacher, rng.normal(size=(9902, 10)), labeled.targets)
    total = len(labeled) + len(pseudo)
    mass = labeled.sample_weights.sum() / (labeled.sample_weights.sum() + len(pseudo))
    assert total == 10_000
    assert mass == pytest.approx(980 / (980 + 9902))
    assert round(mass, 3) == 0.090


def test_student_without_pseudo_is_supervised():
    rng = np.random.default_rng(2)
    labeled = belief.labeled_set(rng.normal(size=(20, 4)), rng.normal(size=20))
    hyper = nn.TrainConfig(epochs=5, batch_size=8, seed=3)
    a = belief.train_student(labeled, None, hyper)
    b = nn.train(nn.init_network(belief.student_specs(4), 3), labeled, hyper)
    X = rng.normal(size=(5, 4))
    assert np.array_equal(a.predict(X), b.predict(X))


def test_labeled_weight_lowers_labeled_error():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 3))
    y = X @ [1.0, -1.0, 0.5]
    pseudo = belief.PseudoLabeledSet(rng.normal(size=(300, 3)), rng.normal(size=300) * 2, (-5, 5))
    hyper = nn.TrainConfig(epochs=40, batch_size=32, learning_rate=1e-3, optimizer="adam", seed=1)
    mse = {}
    for w in (1.0, 10.0):
        net = belief.train_student(belief.labeled_set(X, y, w), pseudo, hyper)
        mse[w] = np.mean((net.predict(X) - y) ** 2)
    assert mse[10.0] < mse[1.0]


def test_two_member_formula():
    net = nn.init_network([nn.LayerSpec(1, 1, "identity")], 0)
    a, b = net.copy(), net.copy()
    for m, v in ((a, 1.0), (b, 3.0)):
        m.params[0]["W"][...] = 0.0
        m.params[0]["b"][...] = v
    mu, sigma = belief.belief_predict(belief.BeliefEnsemble([a, b]), [[0.7]])
    assert mu[0] == 2.0 and sigma[0] == 1.0


def test_single_member_zero_sigma():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(20, 2)), rng.normal(size=20)
    ens = belief.fit_ensemble(X, y, M=1, hyper=FAST)
    assert np.all(belief.belief_predict(ens, rng.normal(size=(7, 2)))[1] == 0)


def test_identical_members_zero_sigma():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(20, 2)), rng.normal(size=20)
    ens = belief.fit_ensemble(X, y, M=10, hyper=FAST, bootstrap=False, shared_seed=True)
    assert np.all(belief.belief_predict(ens, rng.normal(size=(7, 2)))[1] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_ensemble_statistics_oracle(seed, M):
    rng = np.random.default_rng(seed)
    members = [nn.init_network(nn.mlp_specs([3, 5, 1]), int(rng.integers(1 << 30))) for _ in range(M)]
    ens = belief.BeliefEnsemble(members)
    Z = rng.normal(size=(6, 3))
    mu, sigma = belief.belief_predict(ens, Z)
    outs = [[m.predict(z[None])[0] for m in members] for z in Z]
    mu_ref = np.array([sum(o) / M for o in outs])
    sig_ref = np.array([np.sqrt(sum((v - mr) ** 2 for v in o) / M) for o, mr in zip(outs, mu_ref)])
    assert np.max(np.abs(mu - mu_ref)) < 1e-12
    assert np.max(np.abs(sigma - sig_ref)) < 1e-12
    assert np.all(sigma >= 0)


def test_heldout_sigma_exceeds_training_sigma():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1, 1, size=(40, 2))
        y = np.sin(3 * X[:, 0]) + X[:, 1] + rng.normal(0, 0.3, 40)
        ens = belief.fit_ensemble(X, y, M=10, hyper=nn.TrainConfig(epochs=150, batch_size=16, learning_rate=1e-2), seed=seed)
        held = rng.uniform(-1.5, 1.5, size=(40, 2))
        wins += belief.belief_predict(ens, held)[1].mean() > belief.belief_predict(ens, X)[1].mean()
    assert wins >= 14


def test_width_mismatch():
    ens = belief.BeliefEnsemble([nn.init_network(nn.mlp_specs([3, 4, 1]), 0)])
    with pytest.raises(ValueError):
        ens.member_predictions(np.zeros((2, 5)))


def test_feature_dimensions():
    g = synth.default_grid()
    rho = synth.reflectance_matrix([0.1, 1.0], 0.0, None, g)
    assert belief.extract_features(rho, g, "physics").shape == (2, 10)
    assert belief.extract_features(rho, g, "raw").shape == (2, 117)
    assert belief.extract_features(rho, g, "combined").shape == (2, 127)


def test_belief_model_roundtrip(tmp_path):
    g = synth.default_grid()
    rng = np.random.default_rng(0)
    c = rng.uniform(0, 3, 40)
    rho = synth.reflectance_matrix(c, 2e-4, rng, g)
    model = belief.fit_belief_model(rho, g, c, M=3, hyper=FAST)
    belief.save_belief_model(model, tmp_path / "b")
    back = belief.load_belief_model(tmp_path / "b")
    a = model.predict_spectra(rho, g)
    b = back.predict_spectra(rho, g)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
