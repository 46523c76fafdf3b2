import csv
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from admm_prune import admm, nn
from admm_prune.errors import ConfigError, InputError, NumericError
from admm_prune.mnist_io import Dataset
from admm_prune.optimizer import SgdConfig, train_epochs
from admm_prune.tensor import HIGH, Rng, frobenius_norm_sq

from conftest import central_difference, rel_err


def exhaustive_projection(t: np.ndarray, l: int):
    """Best support of size l by enumeration; lexicographic order + strict improvement
    keeps the lowest-index support among equally good ones."""
    flat = t.reshape(-1)
    best, best_mass = (), -1.0
    for comb in combinations(range(flat.size), l):
        mass = math.fsum(float(flat[i]) ** 2 for i in comb)
        if mass > best_mass:
            best, best_mass = comb, mass
    out = np.zeros_like(flat)
    out[list(best)] = flat[list(best)]
    return out.reshape(t.shape), best


def test_projection_worked_example():
    t = np.array([[3.0, -1.0], [0.5, 2.0]])
    want, _ = exhaustive_projection(t, 2)
    np.testing.assert_array_equal(want, [[3.0, 0.0], [0.0, 2.0]])
    np.testing.assert_array_equal(admm.project_cardinality(t, 2), want)


def test_projection_edge_budgets_and_ties():
    t = Rng(0).normal((3, 3), precision=HIGH)
    np.testing.assert_array_equal(admm.project_cardinality(t, 9), t)
    assert not admm.project_cardinality(t, 0).any()
    np.testing.assert_array_equal(admm.project_cardinality(np.array([2.0, -2.0, 1.0]), 1), [2.0, 0.0, 0.0])
    with pytest.raises(InputError):
        admm.project_cardinality(t, 10)
    with pytest.raises(InputError):
        admm.project_cardinality(t, -1)


def test_projection_matches_enumeration_oracle():
    rng = Rng(1)
    for trial in range(1000):
        n = int(rng.integers(1, 10))
        if trial % 2:
            t = rng.integers(-3, 4, size=n).astype(HIGH)  # forces ties and zeros
        else:
            t = rng.normal(n, precision=HIGH)
        for l in range(n + 1):
            want, support = exhaustive_projection(t, l)
            got = admm.project_cardinality(t, l)
            assert frobenius_norm_sq(t - got) == frobenius_norm_sq(t - want)
            assert got.tobytes() == want.tobytes()
            assert tuple(admm.top_indices(t, l)) == support


finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 40), elements=finite), st.data())
def test_projection_idempotent_and_cardinality(t, data):
    l = data.draw(st.integers(0, t.size))
    once = admm.project_cardinality(t, l)
    assert np.count_nonzero(once) <= l
    assert admm.project_cardinality(once, l).tobytes() == once.tobytes()
    kept = np.abs(once[once != 0])
    dropped = np.abs(t[(once == 0) & (t != 0)])
    if kept.size and dropped.size:
        assert kept.min() >= dropped.max()


def _one_layer(w):
    w = np.array(w, dtype=HIGH)
    return nn.Network([nn.FullyConnected(w.shape[1], w.shape[0])], (w.shape[1],), [w], [np.zeros(w.shape[0], HIGH)])


def test_init_admm():
    net = _one_layer([[3.0, -1.0], [0.5, 2.0]])
    state = admm.init_admm(net, [2])
    np.testing.assert_array_equal(state.Z[0], [[3.0, 0.0], [0.0, 2.0]])
    assert not state.U[0].any() and state.k == 0
    assert state.eps == [pytest.approx(4e-7)] and state.rho == [1e-2]
    full = admm.init_admm(net, [4])
    assert full.Z[0].tobytes() == net.weights[0].tobytes()
    with pytest.raises(ConfigError):
        admm.init_admm(net, [0])
    with pytest.raises(ConfigError):
        admm.init_admm(net, [5])
    with pytest.raises(ConfigError):
        admm.init_admm(net, [2], rho=0.0)


def test_z_update_examples():
    net = _one_layer([[1.0, 0.0, 3.0]])
    state = admm.init_admm(net, [2])
    np.testing.assert_array_equal(admm.z_update(net, state).Z[0], net.weights[0])

    net = _one_layer([[1.0, 5.0]])
    state = admm.init_admm(net, [1])
    state.U = [np.array([[4.0, 0.0]])]
    np.testing.assert_array_equal(admm.z_update(net, state).Z[0], [[5.0, 0.0]])


def test_z_update_random_matches_oracle():
    rng = Rng(2)
    net = _one_layer(rng.normal((3, 3), precision=HIGH))
    state = admm.init_admm(net, [4])
    state.U = [rng.normal((3, 3), precision=HIGH)]
    want, _ = exhaustive_projection(net.weights[0] + state.U[0], 4)
    np.testing.assert_array_equal(admm.z_update(net, state).Z[0], want)


def test_u_update_examples():
    net = _one_layer([[2.0]])
    state = admm.init_admm(net, [1])
    state.U = [np.array([[0.5]])]
    admm.u_update(net, state)
    assert state.U[0][0, 0] == 0.5 and state.k == 1

    state = admm.init_admm(net, [1])
    state.Z = [np.array([[0.0]])]
    admm.u_update(net, state)
    assert state.U[0][0, 0] == 2.0

    w = np.array([[1.5, -2.0]])
    net = _one_layer(w)
    state = admm.init_admm(net, [1])
    z = state.Z[0].copy()
    for _ in range(3):
        admm.u_update(net, state)
    np.testing.assert_array_equal(state.U[0], 3 * (w - z))
    assert state.k == 3


def test_check_stop_threshold():
    net = _one_layer([[1.0, 2.0]])
    state = admm.init_admm(net, [2], eps=[1e-12])
    assert admm.check_stop(state, list(state.Z), net).status == "converged"

    net = _one_layer([[1.0, 0.0]])
    state = admm.init_admm(net, [1], eps=[0.5])
    state.Z = [np.array([[0.0, 0.0]])]  # ||W - Z||^2 = 1 = 2 eps
    check = admm.check_stop(state, list(state.Z), net)
    assert check.status == "continue" and check.primal == [1.0] and check.drift == [0.0]
    state.k = 5
    assert admm.check_stop(state, list(state.Z), net, max_iterations=5).status == "max_iterations"


def _stub(value_and_grad):
    """Objective stub driven by the weight of a single-layer net; biases get zero grads."""
    def objective(net, batch):
        f, g = value_and_grad(net.weights[0])
        return f, nn.Gradients([g], [np.zeros_like(net.biases[0])])
    return objective


ONE_EXAMPLE = Dataset(np.zeros((1, 2)), np.zeros(1, dtype=int))


def test_zero_rho_hook_reduces_to_plain_training():
    rng = Rng(3)
    x = rng.normal((20, 4))
    data = Dataset(x, (x[:, 0] > 0).astype(int))
    base = nn.init_network([nn.FullyConnected(4, 3), nn.ReLU(), nn.FullyConnected(3, 2)], (4,), rng)
    state = admm.AdmmState([np.ones_like(w) for w in base.weights], [np.ones_like(w) for w in base.weights],
                           [0.0, 0.0], [1, 1], [1.0, 1.0])
    sgd = SgdConfig(alpha=0.1, batch_size=5, epochs=3)
    cfg = nn.LossConfig(num_classes=2)
    a, b = base.copy(), base.copy()
    train_epochs(a, data, sgd, Rng(4), cfg)
    train_epochs(b, data, sgd, Rng(4), cfg, grad_hook=admm.augmented_hook(state))
    for p, q in zip(a.params(), b.params()):
        assert p.tobytes() == q.tobytes()


def test_w_update_with_zero_loss_moves_to_z_minus_u():
    w0 = np.array([[1.0, -2.0]])
    net = _one_layer(w0)
    state = admm.init_admm(net, [1], rho=1.0)
    state.U = [np.array([[0.25, 0.5]])]
    target = state.Z[0] - state.U[0]
    alpha, steps = 0.1, 200
    admm.w_update(net, state, SgdConfig(alpha=alpha, batch_size=1, decay_every=0), ONE_EXAMPLE, Rng(0),
                  epochs=steps, objective=_stub(lambda w: (0.0, np.zeros_like(w))))
    closed_form = target + (1 - alpha) ** steps * (w0 - target)
    np.testing.assert_allclose(net.weights[0], closed_form, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(net.weights[0], target, atol=1e-8)


def test_proximal_gradient_vanishes_at_z_minus_u():
    rng = Rng(5)
    net = _one_layer(rng.normal((2, 3), precision=HIGH))
    state = admm.init_admm(net, [2], rho=0.7)
    state.U = [rng.normal((2, 3), precision=HIGH)]
    net.weights[0][:] = state.Z[0] - state.U[0]
    batch = nn.Batch(rng.normal((4, 3), precision=HIGH), [0, 1, 1, 0])
    cfg = nn.LossConfig(lam=1e-3, num_classes=2)
    _, plain = nn.loss_and_grads(net, batch, cfg)
    _, aug = admm.augmented_loss_and_grads(net, state, batch, cfg)
    np.testing.assert_allclose(aug.weights[0], plain.weights[0], rtol=0, atol=1e-15)


def test_augmented_gradient_matches_finite_differences(tiny_conv_net, tiny_batch):
    net = tiny_conv_net
    rng = Rng(6)
    state = admm.init_admm(net, [max(1, w.size // 3) for w in net.weights], rho=[0.3, 0.05, 1.0, 0.2])
    state.U = [rng.normal(w.shape, scale=0.1, precision=HIGH) for w in net.weights]
    cfg = nn.LossConfig(lam=1e-3, num_classes=3)
    _, grads = admm.augmented_loss_and_grads(net, state, tiny_batch, cfg)

    def value():
        return admm.augmented_loss_and_grads(net, state, tiny_batch, cfg)[0]

    worst = 0.0
    for w, g in zip(net.weights, grads.weights):
        for _ in range(20):
            idx = tuple(int(rng.integers(0, d)) for d in w.shape)
            worst = max(worst, rel_err(central_difference(value, w, idx), g[idx], floor=1e-7))
    assert worst <= 1e-4


def test_w_update_divergence_names_iteration():
    net = _one_layer([[1.0, 2.0]])
    state = admm.init_admm(net, [1])
    state.k = 4
    with pytest.raises(NumericError, match="admm iter 5"):
        admm.w_update(net, state, SgdConfig(batch_size=1), ONE_EXAMPLE, Rng(0), epochs=1,
                      objective=_stub(lambda w: (float("nan"), np.zeros_like(w))))


def test_synthetic_quadratic_converges():
    # f(W) = 1/2 ||W - A||^2: ADMM should settle on the top-l support of A.
    a = np.array([[3.0, -0.2, 1.5], [0.1, -2.5, 0.4]])
    net = _one_layer(np.zeros_like(a))
    state = admm.init_admm(net, [3], rho=1.0, eps=[1e-6])
    state.Z = [np.zeros_like(a)]
    cfg = admm.AdmmConfig(rho=1.0, max_iterations=200, epochs_per_update=30)
    sgd = SgdConfig(alpha=0.3, batch_size=1, decay_every=0)
    objective = _stub(lambda w: (0.5 * frobenius_norm_sq(w - a), w - a))
    for _ in range(cfg.max_iterations):
        admm.w_update(net, state, sgd, ONE_EXAMPLE, Rng(0), epochs=cfg.epochs_per_update, objective=objective)
        prev = state.Z
        admm.z_update(net, state)
        assert np.count_nonzero(state.Z[0]) <= 3
        admm.u_update(net, state)
        if admm.check_stop(state, prev, net, cfg.max_iterations).done:
            break
    check = admm.check_stop(state, prev, net)
    assert check.status == "converged"
    assert state.k <= 200
    np.testing.assert_array_equal(state.Z[0] != 0, admm.project_cardinality(a, 3) != 0)


def test_trace_csv_columns(tmp_path):
    trace = admm.AdmmTrace([admm.TraceRecord(1, "fc1", 2.0, 0.5, 0.3, 0.0)])
    trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["iteration", "layer", "primal_residual_sq", "z_drift_sq", "loss", "seconds"]
    assert rows[1] == ["1", "fc1", "2.0", "0.5", "0.3", "0.0"]


def test_run_admm_keeps_cardinality_every_iteration():
    rng = Rng(7)
    x = rng.normal((40, 5))
    data = Dataset(x, (x[:, 0] + x[:, 1] > 0).astype(int))
    net = nn.init_network([nn.FullyConnected(5, 6), nn.ReLU(), nn.FullyConnected(6, 2)], (5,), rng)
    state = admm.init_admm(net, [8, 4], rho=0.05)
    seen = []

    def on_iteration(n, s, check):
        seen.append([int(np.count_nonzero(z)) for z in s.Z])

    cfg = admm.AdmmConfig(rho=0.05, max_iterations=6, epochs_per_update=2)
    trace = admm.run_admm(net, state, cfg, SgdConfig(alpha=0.1, batch_size=8), data, Rng(8),
                          nn.LossConfig(num_classes=2), on_iteration=on_iteration)
    assert len(seen) == trace.iterations() <= 6
    assert all(c[0] <= 8 and c[1] <= 4 for c in seen)
    assert len(trace.records) == 2 * trace.iterations()
