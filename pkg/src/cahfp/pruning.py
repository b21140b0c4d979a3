"""Structured pruning: unit groups, saliency criteria and mask generation.

A prunable unit is an output neuron of a Dense layer or an output filter of a
Conv2d layer, excluding the final (class) layer. Removing a unit zeroes its
own weights and bias and also the coordinates of the next layer that read its
output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .nn import Conv2d, Dense

CRITERIA = ("curvature", "curvature_approx", "l1", "delta_w", "random")

# (first five clients, last five clients)
RANK_RATIOS = {0: (0.25, 0.0), 1: (0.25, 0.50), 2: (0.50, 0.75), 3: (0.75, 0.90)}


@dataclass(frozen=True)
class PruneGroup:
    layer: int
    unit: int
    own: np.ndarray
    coupled: np.ndarray

    @property
    def coords(self):
        return np.concatenate([self.own, self.coupled])


@dataclass
class GroupMap:
    groups: list
    num_params: int
    _own_flat: np.ndarray = field(init=False, repr=False)
    _own_starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.groups:
            self._own_flat = np.concatenate([g.own for g in self.groups])
            self._own_starts = np.cumsum([0] + [len(g.own) for g in self.groups[:-1]])
        else:
            self._own_flat = np.zeros(0, dtype=np.int64)
            self._own_starts = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.groups)

    def aggregate(self, coord_scores):
        """Sum per-coordinate scores over each group's own coordinates."""
        if not self.groups:
            return np.zeros(0)
        return np.add.reduceat(coord_scores[self._own_flat], self._own_starts)

    @property
    def prunable(self):
        out = np.zeros(self.num_params, dtype=bool)
        for g in self.groups:
            out[g.own] = True
            out[g.coupled] = True
        return out

    @property
    def prunable_fraction(self):
        return self.prunable.sum() / self.num_params


def _unit_own(ix, unit):
    fan = int(np.prod(ix.weight_shape[1:]))
    start = ix.weight.start + unit * fan
    return np.append(np.arange(start, start + fan), ix.bias.start + unit)


def _coupled(nxt, unit, spatial):
    """Coordinates of layer ``nxt`` that consume ``unit``'s output.

    ``spatial`` is the number of flattened positions per channel when a
    Flatten sits between the two layers, 1 otherwise.
    """
    shape = nxt.weight_shape
    out = shape[0]
    per_out = int(np.prod(shape[1:]))
    if len(shape) == 4:
        k = shape[2] * shape[3]
        cols = unit * k + np.arange(k)
    else:
        cols = unit * spatial + np.arange(spatial)
    rows = nxt.weight.start + np.arange(out)[:, None] * per_out
    return (rows + cols[None, :]).ravel()


def build_group_map(arch):
    if not isinstance(arch.layers[-1], Dense):
        raise ConfigError("final layer must be a Dense classifier head, its units cannot be pruned", key="layers")
    pls = arch.param_layers
    groups = []
    for cur, nxt in zip(pls[:-1], pls[1:]):
        spec = arch.layers[cur.layer]
        nunits = cur.weight_shape[0]
        spatial = 1
        if isinstance(spec, Conv2d) and isinstance(arch.layers[nxt.layer], Dense):
            spatial = cur.out_shape[1] * cur.out_shape[2]
        for u in range(nunits):
            groups.append(PruneGroup(cur.layer, u, _unit_own(cur, u), _coupled(nxt, u, spatial)))
    return GroupMap(groups, arch.num_params)


@dataclass
class SaliencyScores:
    coord: np.ndarray | None
    group: np.ndarray
    criterion: str


@dataclass
class CurvatureEstimate:
    h: np.ndarray
    method: str = "empirical_fisher"
    beta: float = 0.9
    updates: int = 0
    clamped: int = 0

    @classmethod
    def zeros(cls, num_params, beta=0.9):
        return cls(np.zeros(num_params), beta=beta)


def estimate_curvature(state, grad_samples, beta=None, support=None):
    """Running empirical-Fisher update ``h <- beta*h + (1-beta)*mean(g**2)``.

    With ``support`` (one 0/1 vector per sample) the mean at each coordinate
    runs only over samples active there; coordinates no sample covers keep
    their previous value.
    """
    beta = state.beta if beta is None else beta
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    if len(grad_samples) == 0:
        raise ValueError("need at least one gradient sample")
    g2 = np.stack(grad_samples) ** 2
    if support is None:
        h = beta * state.h + (1 - beta) * g2.mean(axis=0)
    else:
        s = np.stack(support).astype(np.float64)
        cnt = s.sum(axis=0)
        covered = cnt > 0
        mean = np.zeros_like(state.h)
        mean[covered] = (g2 * s).sum(axis=0)[covered] / cnt[covered]
        h = np.where(covered, beta * state.h + (1 - beta) * mean, state.h)
    return CurvatureEstimate(h, "empirical_fisher", beta, state.updates + 1)


def curvature_from_hessian(hdiag, beta=0.9):
    """Wrap a finite-difference Hessian diagonal, clamping negatives to zero."""
    neg = int((hdiag < 0).sum())
    return CurvatureEstimate(np.maximum(hdiag, 0.0), "fd_oracle", beta, 1, neg)


def score_curvature(w, grad, curvature, group_map, use_gradient=True):
    """Per-coordinate ``g*w + h*w**2`` (``h*w**2`` alone with ``use_gradient=False``)."""
    h = getattr(curvature, "h", curvature)
    s = h * w * w
    if use_gradient:
        s = grad * w + s
    return SaliencyScores(s, group_map.aggregate(s), "curvature" if use_gradient else "curvature_approx")


def score_l1(w, group_map):
    s = np.abs(w)
    return SaliencyScores(s, group_map.aggregate(s), "l1")


def score_delta_w(w_now, w_prev, group_map):
    if w_prev is None:
        raise ValueError("delta_w needs a previous global model; use random masks for the first round")
    s = np.abs(w_now - w_prev)
    return SaliencyScores(s, group_map.aggregate(s), "delta_w")


@dataclass
class PruneMask:
    bits: np.ndarray
    ratio: float
    client: int | None = None
    round_index: int | None = None
    groups: tuple = ()

    @classmethod
    def full(cls, num_params, client=None, round_index=None):
        return cls(np.ones(num_params), 0.0, client, round_index)


def prune_order(scores, group_map, round_index, warmup_rounds, rng):
    """Group indices in pruning order: random during warmup, else ascending score."""
    if round_index < warmup_rounds or scores is None:
        return rng.permutation(len(group_map))
    # stable sort breaks ties by group index
    return np.argsort(scores.group, kind="stable")


def mask_from_order(order, group_map, target_ratio, client=None, round_index=None):
    d = group_map.num_params
    if not 0 <= target_ratio < 1:
        raise ConfigError(f"target ratio {target_ratio} outside [0, 1)", key="ratios")
    if target_ratio > 0 and target_ratio >= group_map.prunable_fraction:
        raise ConfigError(
            f"target ratio {target_ratio} is not below the prunable fraction {group_map.prunable_fraction:.4f}",
            key="ratios",
        )
    bits = np.ones(d)
    zeroed = 0
    chosen = []
    need = target_ratio * d
    for gi in order:
        if zeroed >= need:
            break
        coords = group_map.groups[gi].coords
        zeroed += int(bits[coords].sum())
        bits[coords] = 0.0
        chosen.append(int(gi))
    return PruneMask(bits, zeroed / d, client, round_index, tuple(chosen))


def generate_mask(scores, group_map, target_ratio, round_index=0, warmup_rounds=5, seed=0, client=None):
    """Zero whole groups, lowest score first, until ``target_ratio`` of all coordinates are zero."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if target_ratio == 0:
        return PruneMask.full(group_map.num_params, client, round_index)
    order = prune_order(scores, group_map, round_index, warmup_rounds, rng)
    return mask_from_order(order, group_map, target_ratio, client, round_index)


def assign_ranks(num_clients, rank_spec):
    """Per-client target ratios from a resource rank (0-3) or an explicit list."""
    if isinstance(rank_spec, (list, tuple, np.ndarray)):
        ratios = np.asarray(rank_spec, dtype=np.float64)
        if len(ratios) != num_clients:
            raise ConfigError(f"{len(ratios)} ratios given for {num_clients} clients", key="ratios")
        if np.any(ratios < 0) or np.any(ratios >= 1):
            raise ConfigError("ratios must lie in [0, 1)", key="ratios")
        return ratios
    if rank_spec not in RANK_RATIOS:
        raise ConfigError(f"unknown rank {rank_spec!r}; expected 0-3", key="rank")
    if num_clients != 10:
        raise ConfigError(f"rank {rank_spec} is defined for 10 clients, got K={num_clients}", key="rank")
    lo, hi = RANK_RATIOS[rank_spec]
    return np.array([lo] * 5 + [hi] * 5)
