import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cahfp.analysis import (
    CSV_COLUMNS,
    RoundRecord,
    count_cost,
    criterion_ranking_oracle,
    emit_metrics,
    estimate_sigma2,
    estimate_zeta2,
    format_metrics,
    grad_norm,
    layer_forward_flops,
    read_metrics,
    structured_perturbation,
    taylor_perturbation,
)
from cahfp.data import dirichlet_partition, synth_dataset
from cahfp.nn import Architecture, Dense, backward, mlp
from cahfp.pruning import build_group_map, generate_mask, score_l1

from conftest import ARCH_MATRIX, random_params


# ---------------------------------------------------------------- Taylor prediction

def test_zero_perturbation_predicts_nothing():
    w = np.array([1.0, 2.0])
    rep = taylor_perturbation(w, np.zeros(2), np.ones(2), np.ones(2), np.zeros(2))
    assert rep.predicted == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_exact_on_diagonal_quadratic(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 3.0, size=12)
    b = rng.normal(size=12)
    loss = lambda v: float(0.5 * v @ (a * v) + b @ v)
    w = rng.normal(size=12)
    q = rng.uniform(0, 1, size=12) * (rng.random(12) < 0.6)
    rep = taylor_perturbation(w, q * w, a * w + b, a, q, loss_fn=loss)
    assert rep.abs_error < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_prediction_chain_identity(seed):
    rng = np.random.default_rng(seed)
    w, g, h = rng.normal(size=(3, 15))
    q = rng.uniform(0, 1, size=15)
    e = q * w
    rep = taylor_perturbation(w, e, g, h, q)
    vector_form = -g @ e + 0.5 * e @ (h * e)
    q_form = -np.sum(q * g * w) + 0.5 * np.sum(q ** 2 * h * w ** 2)
    assert abs(rep.predicted - vector_form) < 1e-12
    assert abs(rep.predicted - q_form) < 1e-12


def test_perturbation_must_be_proportional():
    with pytest.raises(ValueError):
        taylor_perturbation(np.ones(2), np.array([0.5, 0.1]), np.ones(2), np.ones(2), np.array([0.5, 0.5]))


def test_structured_perturbation(two_dense):
    gm = build_group_map(two_dense)
    w = np.arange(1.0, 24.0)
    e, q = structured_perturbation(w, gm, [1])
    assert np.flatnonzero(q).tolist() == [4, 5, 6, 7, 13, 16, 19]
    assert np.array_equal(e, q * w)


def test_ranking_oracle_enumerates_half_masks():
    ds = synth_dataset(3, 4, 20, 3.0, seed=0)
    arch = mlp(4, [6], 3)
    res = criterion_ranking_oracle(arch, random_params(arch, 0), ds.x, ds.y)
    assert res.num_masks == math.comb(6, 3)
    assert -1.0 <= res.spearman <= 1.0


# ---------------------------------------------------------------- gradient diagnostics

def symmetric_data():
    # balanced classes, each input paired with its negation: w = 0 is the exact minimiser
    base = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    x = np.concatenate([base, -base, base, -base, base, -base])
    y = np.repeat(np.arange(3), 6)
    return x, y


def test_grad_norm_zero_at_minimiser():
    x, y = symmetric_data()
    arch = mlp(2, [], 3)
    assert grad_norm(arch, np.zeros(arch.num_params), [(x, y)], [1.0]) < 1e-20


def test_weighted_client_gradient_equals_pooled_gradient():
    ds = synth_dataset(3, 4, 30, 2.0, seed=1)
    arch = mlp(4, [5], 3)
    w = random_params(arch, 2)
    part = dirichlet_partition(ds.y, 4, 1.0, seed=0)
    sizes = part.sizes / part.sizes.sum()
    clients = [(ds.x[s], ds.y[s]) for s in part.shards]
    _, g = backward(arch, w, ds.x, ds.y)
    assert grad_norm(arch, w, clients, sizes) == pytest.approx(float(g @ g), rel=1e-10)
    doubled = [(np.concatenate([cx, cx]), np.concatenate([cy, cy])) for cx, cy in clients]
    assert grad_norm(arch, w, doubled, sizes) == pytest.approx(float(g @ g), rel=1e-10)


def test_sigma2_degenerate_and_identical_samples():
    arch = mlp(3, [4], 2)
    w = random_params(arch, 0)
    x = np.random.default_rng(0).normal(size=(8, 3))
    y = np.array([0, 1] * 4)
    full = estimate_sigma2(arch, w, x, y, batch_size=8, num_batches=4)
    assert full.value == 0.0 and full.degenerate
    same = estimate_sigma2(arch, w, np.repeat(x[:1], 8, 0), np.zeros(8, int), batch_size=2, num_batches=4)
    assert same.value == pytest.approx(0.0, abs=1e-30) and not same.degenerate


def test_sigma2_two_batch_by_hand():
    arch = mlp(3, [], 2)
    rng = np.random.default_rng(5)
    w = rng.normal(size=arch.num_params)
    x = rng.normal(size=(4, 3))
    y = np.array([0, 1, 1, 0])
    g = backward(arch, w, x, y)[1]
    g1 = backward(arch, w, x[:2], y[:2])[1]
    g2 = backward(arch, w, x[2:], y[2:])[1]
    expected = 0.5 * (np.sum((g1 - g) ** 2) + np.sum((g2 - g) ** 2))
    assert estimate_sigma2(arch, w, x, y, 2, 2).value == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        estimate_sigma2(arch, w, x, y, 2, 1)


def test_zeta2_examples():
    g = np.array([1.0, -2.0])
    assert estimate_zeta2([1.0], [g]) == 0.0
    assert estimate_zeta2([0.3, 0.7], [g, g]) == pytest.approx(0.0, abs=1e-30)
    # two clients at +-1 with equal weight: mean 0, every client sits 1 away
    assert estimate_zeta2([0.5, 0.5], [np.array([1.0]), np.array([-1.0])]) == 1.0


# ---------------------------------------------------------------- cost accounting

def test_dense_flops_examples(two_dense):
    single = Architecture((4,), (Dense(4, 3),))
    c = count_cost(single)
    assert (c.forward_flops, c.flops, c.active_params) == (27, 81, 15)
    gm = build_group_map(two_dense)
    bits = np.ones(two_dense.num_params)
    bits[gm.groups[2].coords] = 0.0
    per_layer = layer_forward_flops(two_dense, bits, gm)
    assert per_layer == {0: 2 * 4 * 2 + 2, 1: 2 * 2 * 2 + 2}
    cost = count_cost(two_dense, bits, gm)
    assert cost.forward_flops == 28 and cost.flops == 84
    assert cost.active_params == 23 - 7


def test_conv_flops_convention():
    from test_pruning import conv_dense_fixture

    arch = conv_dense_fixture()
    full = layer_forward_flops(arch)
    assert full == {0: 2 * 9 * 1 * 2 * 4, 2: 2 * 8 * 3 + 3}
    gm = build_group_map(arch)
    bits = np.ones(arch.num_params)
    bits[gm.groups[0].coords] = 0.0
    assert layer_forward_flops(arch, bits, gm) == {0: 2 * 9 * 1 * 1 * 4, 2: 2 * 4 * 3 + 3}


@pytest.mark.parametrize("name", sorted(n for n in ARCH_MATRIX if n != "softmax"))
def test_cost_nonincreasing_in_ratio(name):
    arch = ARCH_MATRIX[name]()
    gm = build_group_map(arch)
    scores = score_l1(random_params(arch, 0), gm)
    prev = None
    for frac in (0.0, 0.25, 0.5, 0.75, 0.9):
        m = generate_mask(scores, gm, frac * gm.prunable_fraction, round_index=9)
        cost = count_cost(arch, m.bits, gm)
        if prev is not None:
            assert cost.active_params <= prev.active_params and cost.flops <= prev.flops
        prev = cost


# ---------------------------------------------------------------- metrics CSV

def make_record(t, **kw):
    base = dict(round=t, train_loss=0.1 + t / 3, test_acc=2 / 3, grad_norm_sq=1e-17 * (t + 1),
                e_norm_sq=math.pi * t, params_up=1000 - t, params_down=1000 - t, flops_local=123456789012345)
    base.update(kw)
    return RoundRecord(**base)


def test_header_only_when_no_rounds(tmp_path):
    emit_metrics([], tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == ",".join(CSV_COLUMNS) + "\n"
    assert read_metrics(tmp_path / "m.csv") == []


def test_metrics_round_trip_bit_exact(tmp_path):
    recs = [make_record(0, sigma2_hat=0.125, zeta2_hat=1 / 7), make_record(1), make_record(2, sigma2_hat=3e-300)]
    emit_metrics(recs, tmp_path / "m.csv")
    rows = read_metrics(tmp_path / "m.csv")
    for r, row in zip(recs, rows):
        for c in CSV_COLUMNS:
            assert getattr(r, c) == row[c]
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len({line.count(",") for line in lines}) == 1
    assert lines[2].endswith(",,")


def test_unwritable_metrics_path(tmp_path):
    with pytest.raises(OSError):
        emit_metrics([make_record(0)], tmp_path / "missing" / "m.csv")


def test_format_is_deterministic():
    recs = [make_record(t) for t in range(4)]
    assert format_metrics(recs) == format_metrics([make_record(t) for t in range(4)])
