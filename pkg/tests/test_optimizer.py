import numpy as np
import pytest

from admm_prune import nn
from admm_prune.errors import ConfigError, DimensionError
from admm_prune.mnist_io import Dataset
from admm_prune.optimizer import SgdConfig, mask_grads, sgd_step, train_epochs
from admm_prune.pruner import PruneMask
from admm_prune.tensor import HIGH, Rng


def test_sgd_step_definition():
    p = [np.array([1.0, 2.0])]
    sgd_step(p, [np.array([1.0, 1.0])], 0.5)
    np.testing.assert_array_equal(p[0], [0.5, 1.5])


def test_sgd_step_zero_gradient_is_noop():
    p = [np.array([1.0, -3.0])]
    sgd_step(p, [np.zeros(2)], 0.7)
    np.testing.assert_array_equal(p[0], [1.0, -3.0])


def test_two_steps_on_quadratic():
    w = [np.array([1.0])]
    for _ in range(2):
        sgd_step(w, [2 * w[0]], 0.1)
    assert w[0][0] == pytest.approx(0.8 ** 2, abs=1e-15)


def test_sgd_step_shape_mismatch():
    with pytest.raises(DimensionError):
        sgd_step([np.zeros(2)], [np.zeros(3)], 0.1)


def test_sgd_step_linear_in_gradient():
    rng = Rng(0)
    p0 = rng.normal(5, precision=HIGH)
    g1, g2 = rng.normal(5, precision=HIGH), rng.normal(5, precision=HIGH)
    joint, seq = [p0.copy()], [p0.copy()]
    sgd_step(joint, [g1 + g2], 0.25)
    sgd_step(seq, [g1], 0.25)
    sgd_step(seq, [g2], 0.25)
    np.testing.assert_allclose(joint[0], seq[0], rtol=0, atol=1e-15)


def test_learning_rate_schedule():
    cfg = SgdConfig(alpha=0.05, decay_factor=0.5, decay_every=10)
    assert [cfg.learning_rate(e) for e in (0, 9, 10, 25)] == [0.05, 0.05, 0.025, 0.0125]
    assert SgdConfig(alpha=0.1, decay_every=0).learning_rate(100) == 0.1
    with pytest.raises(ConfigError):
        SgdConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        SgdConfig(batch_size=0)


def _grads(rng):
    return nn.Gradients([rng.normal((3, 4)), rng.normal((2, 3))], [rng.normal(3), rng.normal(2)])


def test_mask_grads_all_true_and_all_false():
    g = _grads(Rng(1))
    full = mask_grads(g, [np.ones((3, 4), bool), np.ones((2, 3), bool)])
    for a, b in zip(full.weights, g.weights):
        np.testing.assert_array_equal(a, b)
    empty = mask_grads(g, [np.zeros((3, 4), bool), np.zeros((2, 3), bool)])
    assert not any(w.any() for w in empty.weights)
    for a, b in zip(empty.biases, g.biases):
        np.testing.assert_array_equal(a, b)


def test_mask_grads_mixed_is_selective_identity():
    rng = Rng(2)
    g = _grads(rng)
    masks = [rng.random((3, 4)) < 0.5, rng.random((2, 3)) < 0.5]
    out = mask_grads(g, masks)
    for o, w, m in zip(out.weights, g.weights, masks):
        assert o[m].tobytes() == w[m].tobytes()
        assert np.all(o[~m] == 0)


def test_mask_grads_shape_mismatch():
    with pytest.raises(DimensionError):
        mask_grads(_grads(Rng(3)), [np.ones((4, 3), bool), np.ones((2, 3), bool)])


def _toy_problem(seed=0, n=60):
    rng = Rng(seed)
    x = rng.normal((n, 6))
    y = (x[:, 0] > 0).astype(int) + (x[:, 1] > 0).astype(int)
    layers = [nn.FullyConnected(6, 8), nn.ReLU(), nn.FullyConnected(8, 3)]
    net = nn.init_network(layers, (6,), rng)
    return net, Dataset(x, y)


def test_masked_training_keeps_pruned_weights_fixed():
    net, data = _toy_problem()
    rng = Rng(4)
    masks = PruneMask([rng.random(w.shape) < 0.4 for w in net.weights])
    net.weights = [np.where(m, w, 0).astype(w.dtype) for w, m in zip(net.weights, masks)]
    frozen = [w[~m].copy() for w, m in zip(net.weights, masks)]
    train_epochs(net, data, SgdConfig(alpha=0.1, batch_size=7, epochs=5), Rng(5),
                 nn.LossConfig(lam=1e-2, num_classes=3), mask=masks)
    for w, m, f in zip(net.weights, masks, frozen):
        assert w[~m].tobytes() == f.tobytes()


def test_training_reduces_loss_and_is_deterministic():
    runs = []
    for _ in range(2):
        net, data = _toy_problem()
        hist = train_epochs(net, data, SgdConfig(alpha=0.1, batch_size=8, epochs=15), Rng(6),
                            nn.LossConfig(lam=1e-4, num_classes=3))
        runs.append((hist, net))
    assert runs[0][0][-1] < runs[0][0][0]
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1].params(), runs[1][1].params()):
        assert a.tobytes() == b.tobytes()
