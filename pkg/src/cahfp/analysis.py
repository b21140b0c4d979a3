"""Loss-perturbation checks, convergence diagnostics and cost accounting."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.stats import spearmanr

from .nn import Dense, backward, forward, fd_diag_hessian, loss_closure
from .pruning import build_group_map


@dataclass
class PerturbationReport:
    first_order: float
    second_order: float
    measured: float | None = None

    @property
    def predicted(self):
        return self.first_order + self.second_order

    @property
    def abs_error(self):
        return None if self.measured is None else abs(self.measured - self.predicted)

    @property
    def rel_error(self):
        if self.measured is None:
            return None
        return self.abs_error / max(abs(self.measured), 1e-300)


def taylor_perturbation(w, e, grad, hdiag, q, loss_fn=None):
    """Second-order prediction of ``F(w - e) - F(w)`` for ``e = q * w``.

    ``first_order = -sum(q * grad * w)``, ``second_order = 0.5 * sum(q**2 * h * w**2)``.
    If ``loss_fn`` is given the true difference is measured as well.
    """
    w, e, grad, hdiag, q = (np.asarray(a, dtype=np.float64) for a in (w, e, grad, hdiag, q))
    if not np.allclose(e, q * w, rtol=0.0, atol=1e-10):
        raise ValueError("perturbation is not of the form e = q * w")
    first = -float(np.sum(q * grad * w))
    second = 0.5 * float(np.sum(q * q * hdiag * w * w))
    measured = None
    if loss_fn is not None:
        measured = loss_fn(w - e) - loss_fn(w)
    return PerturbationReport(first, second, measured)


def client_gradients(arch, w, clients):
    """Full-shard loss and gradient for each ``(x, y)`` in ``clients``."""
    losses, grads = [], []
    for x, y in clients:
        loss, g = backward(arch, w, x, y)
        losses.append(loss)
        grads.append(g)
    return np.array(losses), grads


def global_gradient(p, grads):
    out = np.zeros_like(grads[0])
    for pk, g in zip(p, grads):
        out += pk * g
    return out


def grad_norm(arch, w, clients, p):
    """``||sum_k p_k grad F_k(w)||^2`` over full client shards."""
    _, grads = client_gradients(arch, w, clients)
    g = global_gradient(p, grads)
    return float(g @ g)


class VarianceEstimate(NamedTuple):
    value: float
    num_batches: int
    degenerate: bool


def estimate_sigma2(arch, w, x, y, batch_size, num_batches, rng=None, full_grad=None):
    """Mean squared deviation of mini-batch gradients from the full-shard gradient."""
    if num_batches < 2:
        raise ValueError("num_batches must be at least 2")
    n = len(y)
    order = np.arange(n) if rng is None else rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)][:num_batches]
    if len(batches) < 2:
        return VarianceEstimate(0.0, len(batches), True)
    if full_grad is None:
        full_grad = backward(arch, w, x, y)[1]
    dev = []
    for b in batches:
        g = backward(arch, w, x[b], y[b])[1]
        diff = g - full_grad
        dev.append(float(diff @ diff))
    return VarianceEstimate(float(np.mean(dev)), len(batches), False)


def estimate_zeta2(p, grads):
    """Client dissimilarity ``sum_k p_k ||grad F_k - grad F||^2``."""
    g = global_gradient(p, grads)
    return float(sum(pk * float((gk - g) @ (gk - g)) for pk, gk in zip(p, grads)))


class Cost(NamedTuple):
    active_params: int
    flops: int
    forward_flops: int


def active_units(arch, mask, group_map=None):
    """Surviving output units per parameterised layer, keyed by layer id."""
    pls = arch.param_layers
    counts = {ix.layer: ix.weight_shape[0] for ix in pls}
    if mask is None:
        return counts
    gm = group_map or build_group_map(arch)
    for g in gm.groups:
        if not mask[g.own].any():
            counts[g.layer] -= 1
    return counts


def layer_forward_flops(arch, mask=None, group_map=None):
    """Per-sample forward FLOPs of each parameterised layer, keyed by layer id.

    Dense costs ``2*in*out + out``; Conv2d costs ``2*kh*kw*C_in*C_out*H_out*W_out``.
    Pruned units drop out of both their own layer and the layer that reads them.
    """
    units = active_units(arch, mask, group_map)
    out_flops = {}
    prev = None
    for spec, ix in zip(arch.layers, arch.index):
        if ix is None:
            continue
        out = units[ix.layer]
        if isinstance(spec, Dense):
            if prev is None:
                fan = spec.in_dim
            elif len(prev.out_shape) == 3:
                fan = units[prev.layer] * prev.out_shape[1] * prev.out_shape[2]
            else:
                fan = units[prev.layer]
            out_flops[ix.layer] = 2 * fan * out + out
        else:
            cin = spec.in_channels if prev is None else units[prev.layer]
            _, ho, wo = ix.out_shape
            out_flops[ix.layer] = 2 * spec.kernel_h * spec.kernel_w * cin * out * ho * wo
        prev = ix
    return out_flops


def count_cost(arch, mask=None, group_map=None):
    """Active parameters and per-sample training FLOPs (backward = 2x forward)."""
    fwd = sum(layer_forward_flops(arch, mask, group_map).values())
    active = arch.num_params if mask is None else int(np.count_nonzero(mask))
    return Cost(active, 3 * fwd, fwd)


CSV_COLUMNS = ("round", "train_loss", "test_acc", "grad_norm_sq", "e_norm_sq",
               "params_up", "params_down", "flops_local", "sigma2_hat", "zeta2_hat")


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    test_acc: float
    grad_norm_sq: float
    e_norm_sq: float
    params_up: int
    params_down: int
    flops_local: int
    sigma2_hat: float | None = None
    zeta2_hat: float | None = None
    ratios: list = field(default_factory=list)
    achieved_ratios: list = field(default_factory=list)
    client_flops: list = field(default_factory=list)
    e_realized_norm_sq: float = 0.0


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def format_metrics(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def emit_metrics(records, path):
    path = Path(path)
    try:
        path.write_text(format_metrics(records))
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


_INT_COLUMNS = {"round", "params_up", "params_down", "flops_local"}


def read_metrics(path):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                if v == "":
                    row[k] = None
                elif k in _INT_COLUMNS:
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows


def structured_perturbation(w, group_map, chosen):
    """Single-client pruning of groups ``chosen``: returns ``(e, q)`` with ``q = 1 - mask``."""
    q = np.zeros_like(w)
    for gi in chosen:
        q[group_map.groups[gi].coords] = 1.0
    return q * w, q


@dataclass
class RankingOracleResult:
    spearman: float
    predicted: np.ndarray
    measured: np.ndarray
    num_masks: int


def criterion_ranking_oracle(arch, w, x, y, group_map=None, fraction=0.5, hdiag=None, hessian_step=1e-4):
    """Brute force over every mask that prunes ``fraction`` of the groups.

    Compares the diagonal second-order prediction (true gradient, finite
    difference Hessian diagonal) with the measured full-data loss increase.
    """
    gm = group_map or build_group_map(arch)
    n = len(gm)
    k = int(round(fraction * n))
    if not 0 < k < n:
        raise ValueError(f"cannot prune {k} of {n} groups")
    F = loss_closure(arch, x, y)
    _, grad = backward(arch, w, x, y)
    if hdiag is None:
        hdiag = fd_diag_hessian(arch, w, x, y, hessian_step)
    base = F(w)
    pred, meas = [], []
    for chosen in itertools.combinations(range(n), k):
        e, q = structured_perturbation(w, gm, chosen)
        rep = taylor_perturbation(w, e, grad, hdiag, q)
        pred.append(rep.predicted)
        meas.append(F(w - e) - base)
    pred, meas = np.array(pred), np.array(meas)
    rho = spearmanr(pred, meas).statistic
    return RankingOracleResult(float(rho), pred, meas, len(pred))


@dataclass
class RemainderScaling:
    scales: tuple
    remainders: np.ndarray

    @property
    def ratios(self):
        r = self.remainders
        return r[:-1] / r[1:]


def remainder_scaling(arch, w, x, y, e, q, scales=(1.0, 0.5, 0.25), hdiag=None, hessian_step=1e-4):
    """|measured - predicted| for perturbations ``t * e``; halving t should shrink it 4-16x."""
    F = loss_closure(arch, x, y)
    _, grad = backward(arch, w, x, y)
    if hdiag is None:
        hdiag = fd_diag_hessian(arch, w, x, y, hessian_step)
    rems = []
    for t in scales:
        rep = taylor_perturbation(w, t * e, grad, hdiag, t * q, loss_fn=F)
        rems.append(rep.abs_error)
    return RemainderScaling(tuple(scales), np.array(rems))


def accuracy(arch, w, x, y):
    _, correct = forward(arch, w, x, y)
    return correct / len(y)


def is_finite(*values):
    return all(v is None or math.isfinite(v) for v in values)
