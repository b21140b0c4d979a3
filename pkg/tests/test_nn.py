import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from cahfp.errors import ConfigError, NumericFault
from cahfp.nn import (
    Architecture,
    Conv2d,
    Dense,
    Flatten,
    backward,
    central_diag_hessian,
    central_gradient,
    fd_diag_hessian,
    fd_gradient,
    forward,
    init_params,
    logits,
    mlp,
    sgd_step,
)
from cahfp.pruning import CurvatureEstimate, estimate_curvature

from conftest import ARCH_MATRIX, batch_for, random_params


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def naive_logits(arch, w, x):
    """Loop-by-loop reference forward pass, written without im2col or matmuls."""
    out = []
    for sample in x:
        a = sample
        for spec, ix in zip(arch.layers, arch.index):
            if ix is None:
                a = a.reshape(-1)
                continue
            W = w[ix.weight].reshape(ix.weight_shape)
            b = w[ix.bias]
            if isinstance(spec, Dense):
                z = np.array([sum(W[o, i] * a[i] for i in range(spec.in_dim)) + b[o]
                              for o in range(spec.out_dim)])
            else:
                _, ho, wo = ix.out_shape
                z = np.zeros(ix.out_shape)
                s = spec.stride
                for o in range(spec.out_channels):
                    for r in range(ho):
                        for c in range(wo):
                            acc = b[o]
                            for ci in range(spec.in_channels):
                                for i in range(spec.kernel_h):
                                    for j in range(spec.kernel_w):
                                        acc += W[o, ci, i, j] * a[ci, r * s + i, c * s + j]
                            z[o, r, c] = acc
            a = np.maximum(z, 0.0) if spec.activation == "relu" else z
        out.append(a)
    return np.array(out)


def naive_loss(z, y):
    total = 0.0
    for row, label in zip(z, y):
        m = max(row)
        total += m + math.log(sum(math.exp(v - m) for v in row)) - row[label]
    return total / len(y)


# ---------------------------------------------------------------- architecture

def test_param_count_and_index_cover(any_arch):
    covered = np.zeros(any_arch.num_params, dtype=int)
    expected = 0
    for ix in any_arch.param_layers:
        covered[ix.weight] += 1
        covered[ix.bias] += 1
        expected += int(np.prod(ix.weight_shape)) + ix.weight_shape[0]
    assert any_arch.num_params == expected
    assert np.all(covered == 1)


def test_two_dense_layout(two_dense):
    w1, w2 = two_dense.param_layers
    assert two_dense.num_params == 23
    assert (w1.weight, w1.bias) == (slice(0, 12), slice(12, 15))
    assert (w2.weight, w2.bias) == (slice(15, 21), slice(21, 23))


@pytest.mark.parametrize("layers, shape", [
    ((Dense(4, 3), Dense(2, 2)), (4,)),
    ((Dense(4, 3, "tanh"),), (4,)),
    ((Conv2d(1, 2, 3, 3), Dense(8, 2)), (1, 4, 4)),
    ((Conv2d(1, 2, 5, 5), Flatten(), Dense(2, 2)), (1, 4, 4)),
    ((Conv2d(1, 2, 3, 3),), (1, 4, 4)),
    ((), (4,)),
])
def test_invalid_architectures(layers, shape):
    with pytest.raises(ConfigError):
        Architecture(shape, layers)


def test_descriptor_round_trip(any_arch):
    again = Architecture.from_dict(any_arch.to_dict())
    assert again == any_arch
    assert again.num_params == any_arch.num_params


def test_init_is_seeded_and_bounded():
    arch = mlp(6, [7], 4)
    a = init_params(arch, np.random.default_rng(3))
    b = init_params(arch, np.random.default_rng(3))
    assert np.array_equal(a, b)
    ix = arch.param_layers[0]
    assert np.all(np.abs(a[ix.weight]) <= np.sqrt(6 / 13))
    assert np.all(a[ix.bias] == 0)


# ---------------------------------------------------------------- forward

def test_zero_weights_give_log2_and_lowest_index_ties():
    arch = mlp(3, [], 2)
    x = np.random.default_rng(0).normal(size=(7, 3))
    y = np.array([0, 1, 1, 0, 1, 0, 0])
    loss, correct = forward(arch, np.zeros(arch.num_params), x, y)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert correct == 4  # every tie resolves to class 0


def test_confident_logits_give_tiny_loss():
    arch = mlp(2, [], 2)
    w = np.array([40.0, 0.0, -40.0, 0.0, 0.0, 0.0])
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    loss, correct = forward(arch, w, x, np.array([0, 1]))
    assert loss < 1e-6 and correct == 2


@pytest.mark.parametrize("name", sorted(ARCH_MATRIX))
def test_vectorised_forward_matches_loops(name):
    arch = ARCH_MATRIX[name]()
    rng = np.random.default_rng(5)
    w = random_params(arch, 9) + 0.1 * rng.normal(size=arch.num_params)
    x, y = batch_for(arch, 4, rng)
    ref = naive_logits(arch, w, x)
    assert np.max(np.abs(logits(arch, w, x) - ref)) < 1e-12
    assert abs(forward(arch, w, x, y)[0] - naive_loss(ref, y)) < 1e-12


def test_forward_and_backward_losses_agree_bitwise(any_arch, rng):
    w = random_params(any_arch, 2)
    x, y = batch_for(any_arch, 6, rng)
    assert forward(any_arch, w, x, y)[0] == backward(any_arch, w, x, y)[0]


def test_bad_inputs_rejected(two_dense):
    w = np.zeros(two_dense.num_params)
    with pytest.raises(ConfigError):
        forward(two_dense, w[:-1], np.zeros((2, 4)), np.array([0, 1]))
    with pytest.raises(ConfigError):
        forward(two_dense, w, np.zeros((2, 5)), np.array([0, 1]))
    with pytest.raises(ConfigError):
        forward(two_dense, w, np.zeros((2, 4)), np.array([0, 2]))
    with pytest.raises(ConfigError):
        forward(two_dense, w, np.zeros((0, 4)), np.zeros(0, dtype=int))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 9))
def test_loss_permutation_invariant(seed, n):
    arch = ARCH_MATRIX["conv"]()
    rng = np.random.default_rng(seed)
    w = random_params(arch, seed)
    x, y = batch_for(arch, n, rng)
    perm = rng.permutation(n)
    assert abs(forward(arch, w, x, y)[0] - forward(arch, w, x[perm], y[perm])[0]) < 1e-12


# ---------------------------------------------------------------- backward

@pytest.mark.parametrize("name", sorted(ARCH_MATRIX))
@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_finite_differences(name, seed):
    arch = ARCH_MATRIX[name]()
    rng = np.random.default_rng(seed)
    w = random_params(arch, seed) + 0.05 * rng.normal(size=arch.num_params)
    x, y = batch_for(arch, 5, rng)
    _, g = backward(arch, w, x, y)
    assert max_rel_err(g, fd_gradient(arch, w, x, y)) < 1e-4


def test_single_sample_softmax_regression_closed_form():
    arch = mlp(3, [], 4)
    rng = np.random.default_rng(11)
    w = rng.normal(size=arch.num_params)
    x = rng.normal(size=(1, 3))
    y = np.array([2])
    z = w[:12].reshape(4, 3) @ x[0] + w[12:]
    p = np.exp(z - z.max())
    p /= p.sum()
    r = p - np.eye(4)[2]
    _, g = backward(arch, w, x, y)
    assert np.max(np.abs(g[:12] - np.outer(r, x[0]).ravel())) < 1e-10
    assert np.max(np.abs(g[12:] - r)) < 1e-10


def test_zero_inputs_give_zero_first_layer_weight_gradient(two_dense, rng):
    w = random_params(two_dense, 4)
    _, g = backward(two_dense, w, np.zeros((3, 4)), np.array([0, 1, 1]))
    assert np.all(g[0:12] == 0)


def test_backward_deterministic(any_arch, rng):
    w = random_params(any_arch, 1)
    x, y = batch_for(any_arch, 4, rng)
    a = backward(any_arch, w, x, y)[1]
    b = backward(any_arch, w.copy(), x.copy(), y.copy())[1]
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- finite differences

def test_central_gradient_of_half_square_norm():
    w = np.random.default_rng(0).normal(size=9)
    g = central_gradient(lambda v: 0.5 * float(v @ v), w)
    assert np.max(np.abs(g - w)) < 1e-8


def test_central_diag_hessian_of_diagonal_quadratic():
    rng = np.random.default_rng(1)
    a = rng.uniform(0.1, 5.0, size=8)
    w = rng.normal(size=8)
    h = central_diag_hessian(lambda v: 0.5 * float(v @ (a * v)), w)
    assert np.max(np.abs(h - a)) < 1e-6


def test_finite_difference_error_is_second_order():
    # smooth net (no ReLU kinks) so truncation dominates round-off at these steps
    arch = Architecture((3,), (Dense(3, 4), Dense(4, 3)))
    rng = np.random.default_rng(2)
    w = rng.normal(size=arch.num_params)
    x, y = batch_for(arch, 6, rng)
    _, g = backward(arch, w, x, y)
    errs = [np.max(np.abs(fd_gradient(arch, w, x, y, step) - g)) for step in (4e-2, 2e-2)]
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_fd_step_must_be_positive():
    with pytest.raises(ValueError):
        central_gradient(lambda v: 0.0, np.zeros(2), step=0)
    with pytest.raises(ValueError):
        central_diag_hessian(lambda v: 0.0, np.zeros(2), step=-1)


def test_softmax_regression_hessian_diagonal_nonnegative():
    arch = mlp(4, [], 3)
    rng = np.random.default_rng(3)
    x, y = batch_for(arch, 20, rng)
    h = fd_diag_hessian(arch, rng.normal(size=arch.num_params), x, y)
    assert h.min() > -1e-6


def test_empirical_fisher_tracks_hessian_diagonal():
    rng = np.random.default_rng(4)
    arch = mlp(4, [], 3)
    means = 2.0 * rng.normal(size=(3, 4))
    y = rng.integers(0, 3, size=300)
    x = means[y] + rng.normal(size=(300, 4))
    w = np.zeros(arch.num_params)
    v = None
    for _ in range(300):
        _, g = backward(arch, w, x, y)
        w, v = sgd_step(w, g, 0.2, 0.9, v)
    per_sample = [backward(arch, w, x[i:i + 1], y[i:i + 1])[1] for i in range(len(y))]
    fisher = estimate_curvature(CurvatureEstimate.zeros(arch.num_params), per_sample, beta=0.0).h
    h = fd_diag_hessian(arch, w, x, y)
    assert spearmanr(fisher, h).statistic > 0.5


# ---------------------------------------------------------------- optimiser

def test_plain_sgd_step():
    w = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    new, v = sgd_step(w, g, 0.1)
    assert np.array_equal(new, w - 0.1 * g)
    assert np.array_equal(v, g)


def test_zero_gradient_zero_velocity_is_fixed_point():
    w = np.array([3.0, 4.0])
    new, v = sgd_step(w, np.zeros(2), 0.1, 0.9, np.zeros(2))
    assert np.array_equal(new, w) and np.array_equal(v, np.zeros(2))


def test_momentum_accumulates_over_two_steps():
    w = np.array([1.0, 2.0, 3.0])
    g = np.array([0.3, -0.1, 0.7])
    w1, v = sgd_step(w, g, 0.05, 0.9)
    w2, _ = sgd_step(w1, g, 0.05, 0.9, v)
    assert np.allclose(w - w2, 0.05 * g * 2.9, rtol=0, atol=1e-15)


def test_sgd_rejects_bad_arguments():
    w = np.zeros(2)
    with pytest.raises(ConfigError):
        sgd_step(w, w, -0.1)
    with pytest.raises(ConfigError):
        sgd_step(w, w, 0.1, momentum=1.0)
    with pytest.raises(NumericFault):
        sgd_step(w, np.array([np.nan, 0.0]), 0.1)
