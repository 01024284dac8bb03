import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gradrank.estimator import GradientRankNetwork, resolve_epsilon, trace_matrices
from gradrank.linalg import machine_epsilon
from gradrank.network import Conv, Dense, NetworkSpec, Recurrent, init_parameters, loss_and_grads


def small_dense():
    return NetworkSpec([Dense(8, 3), Dense(3, 8)])


def test_params_round_trip():
    est = GradientRankNetwork(small_dense(), learning_rate=0.1, epochs=3)
    params = est.get_params()
    assert params["learning_rate"] == 0.1 and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params()["epochs"] == 3
    twin.set_params(epochs=5)
    assert twin.epochs == 5


def test_fit_predict_autoencoder():
    X = np.random.default_rng(0).standard_normal((40, 8))
    est = GradientRankNetwork(small_dense(), epochs=4, batch_size=16, random_state=1).fit(X)
    assert est.predict(X).shape == (40, 8)
    assert len(est.loss_curve_) == 4 and len(est.rank_history_) == 4
    grads = [r for label, kind, _, r in est.rank_history_[-1] if kind == "gradient"]
    assert all(r.numerical_rank <= 3 for r in grads)


def test_fit_is_deterministic():
    X = np.random.default_rng(0).standard_normal((30, 8))
    a = GradientRankNetwork(small_dense(), epochs=2, batch_size=7, random_state=3).fit(X)
    b = GradientRankNetwork(small_dense(), epochs=2, batch_size=7, random_state=3).fit(X)
    assert a.params_.layers[0]["W"].tobytes() == b.params_.layers[0]["W"].tobytes()


def test_input_validation():
    est = GradientRankNetwork(small_dense(), epochs=1)
    with pytest.raises(ValueError):
        est.fit(np.ones((4, 5)))
    with pytest.raises(ValueError):
        est.fit(np.array([[np.nan] * 8]))
    with pytest.raises(NotFittedError):
        est.predict(np.ones((2, 8)))
    with pytest.raises(TypeError):
        GradientRankNetwork(None).fit(np.ones((2, 8)))


def test_clip_norm_bounds_step():
    X = np.random.default_rng(1).standard_normal((16, 8)) * 100
    spec = small_dense()
    est = GradientRankNetwork(spec, learning_rate=1.0, epochs=1, batch_size=16, clip_norm=0.5,
                              track_ranks=False, random_state=0).fit(X)
    p0 = init_parameters(spec, 0)
    moved = np.sqrt(sum(np.sum((a - b) ** 2) for (_, _, a), (_, _, b)
                        in zip(est.params_.items(), p0.items())))
    assert moved == pytest.approx(0.5)


def test_sequence_predict_layout():
    spec = NetworkSpec([Recurrent(3, 4), Recurrent(4, 3)], truncation_length=5)
    X = np.random.default_rng(2).standard_normal((6, 3, 5))
    est = GradientRankNetwork(spec, epochs=1, batch_size=6).fit(X)
    assert est.predict(X).shape == (6, 3, 5)


def test_trace_matrix_labels_and_shapes():
    spec = NetworkSpec([Recurrent(3, 4), Dense(4, 3)], truncation_length=2)
    p = init_parameters(spec, 0)
    X = np.random.default_rng(3).standard_normal((5, 3, 2))
    tr = loss_and_grads(spec, p, X, X)
    got = {(label, kind): M.shape for label, kind, M in trace_matrices(spec, p, tr)}
    assert got[("1.U", "gradient")] == (3, 4)
    assert got[("1.V", "gradient")] == (4, 4)
    assert got[("2", "gradient")] == (4, 3)
    assert got[("0", "activation")] == (5, 3)
    assert got[("1", "adjoint")] == (5, 4)


def test_trace_matrices_conv_flattening():
    spec = NetworkSpec([Conv(2, 3, (3, 3), padding=1)])
    p = init_parameters(spec, 0)
    X = np.random.default_rng(4).standard_normal((2, 2, 4, 4))
    tr = loss_and_grads(spec, p, X, np.zeros((2, 3, 4, 4)))
    got = {(label, kind): M for label, kind, M in trace_matrices(spec, p, tr)}
    assert got[("1", "gradient")].shape == (18, 3)
    assert got[("0", "activation")].shape == (32, 2)
    assert np.array_equal(got[("1", "gradient")][:, 1], tr.grads[0]["K"][1].reshape(-1))


def test_resolve_epsilon():
    assert resolve_epsilon(None, (3, 4), np.float64) == machine_epsilon("double")
    assert resolve_epsilon("auto", (3, 4), np.float32) == 4 * machine_epsilon("single")
    assert resolve_epsilon(1e-3, (3, 4), np.float64) == 1e-3
