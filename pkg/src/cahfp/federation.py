"""Round state machine: mask, dispatch, local training, reconstruction, aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import analysis
from .errors import ConfigError, NumericFault
from .nn import backward, fd_diag_hessian, forward, sgd_step
from .pruning import (
    CurvatureEstimate,
    PruneMask,
    curvature_from_hessian,
    estimate_curvature,
    generate_mask,
    mask_from_order,
    prune_order,
    score_curvature,
    score_delta_w,
    score_l1,
)

_PURPOSES = {"init": 0, "partition": 1, "batch": 2, "warmup": 3, "holdout": 4, "sigma": 5, "data": 6}

RECONSTRUCTION_MODES = ("on", "off", "renormalize")


def stream(seed, purpose, round_index=0, client=0):
    """Independent RNG for one (purpose, round, client) triple under a master seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _PURPOSES[purpose], int(round_index), int(client)]))


@dataclass
class ClientState:
    id: int
    x: np.ndarray
    y: np.ndarray
    weight: float
    target_ratio: float
    mask: PruneMask | None = None
    submodel: np.ndarray | None = None
    delta: np.ndarray | None = None
    steps: int = 0
    samples_seen: int = 0
    upload: np.ndarray | None = None

    def effective_update(self, w_t, reconstruction="on"):
        """What this client adds on top of its dispatched sub-model once the server
        has refilled (``on``) or zero-filled (``off``) the pruned coordinates."""
        model = reconstruct(self.upload, self.mask, w_t) if reconstruction == "on" else self.upload
        return model - self.submodel


@dataclass
class ServerState:
    w: np.ndarray
    round: int
    group_map: object
    curvature: CurvatureEstimate
    seed: int = 0
    w_prev: np.ndarray | None = None
    grad_proxy: np.ndarray | None = None
    held_masks: list | None = None


@dataclass
class NoiseRecord:
    q: np.ndarray
    e: np.ndarray
    realized: np.ndarray

    @property
    def e_norm_sq(self):
        return float(self.e @ self.e)

    @property
    def realized_norm_sq(self):
        return float(self.realized @ self.realized)


def dispatch(w, masks):
    out = []
    for m in masks:
        bits = m.bits if isinstance(m, PruneMask) else m
        if bits.shape != w.shape:
            raise ValueError(f"mask has length {bits.shape[0]}, model has {w.shape[0]}")
        out.append(bits * w)
    return out


def epoch_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class LocalResult(NamedTuple):
    weights: np.ndarray
    delta: np.ndarray
    steps: int
    samples_seen: int


def local_train(arch, w0, mask, x, y, lr, momentum, batch_size, rng, steps=None):
    """Masked heavy-ball SGD from ``w0``.

    ``steps=None`` runs one epoch over a fresh shuffle. Velocity starts at zero.
    """
    if steps is not None and steps < 1:
        raise ConfigError("local steps E must be at least 1", key="E")
    n = len(y)
    if steps is None:
        batches = epoch_batches(n, batch_size, rng)
    else:
        batches = []
        while len(batches) < steps:
            batches.extend(epoch_batches(n, batch_size, rng))
        batches = batches[:steps]
    w = w0.copy()
    v = None
    seen = 0
    for b in batches:
        loss, g = backward(arch, w, x[b], y[b])
        if not math.isfinite(loss):
            raise NumericFault(f"non-finite local loss {loss}")
        if mask is not None:
            g = g * mask
        w, v = sgd_step(w, g, lr, momentum, v)
        seen += len(b)
    return LocalResult(w, w - w0, len(batches), seen)


def reconstruct(sub_after, mask, w_t):
    """Fill pruned coordinates with the current global model."""
    bits = mask.bits if isinstance(mask, PruneMask) else mask
    return np.where(bits == 1.0, sub_after, w_t)


def aggregate(models, p):
    out = np.zeros_like(models[0])
    for pk, wk in zip(p, models):
        out += pk * wk
    return out


def aggregate_renormalized(models, masks, p, w_t):
    """Coordinatewise mean over the clients that kept each coordinate."""
    num = np.zeros_like(w_t)
    den = np.zeros_like(w_t)
    for pk, wk, m in zip(p, models, masks):
        bits = m.bits if isinstance(m, PruneMask) else m
        num += pk * bits * wk
        den += pk * bits
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), w_t)


def noise_decomposition(masks, p, w_t, reconstruction="on"):
    """Pruning noise ``e = q * w_t`` with ``q_i = sum_k p_k (1 - m_ik)``.

    ``realized`` is the part of ``e`` that survives aggregation, so that
    ``w_next == w_t - realized + sum_k p_k delta_k``. Reconstruction refills
    pruned coordinates with ``w_t`` and leaves nothing; zero-filling leaves
    all of ``e``.
    """
    q = np.zeros_like(w_t)
    for pk, m in zip(p, masks):
        bits = m.bits if isinstance(m, PruneMask) else m
        q += pk * (1.0 - bits)
    e = q * w_t
    if reconstruction == "on":
        realized = np.zeros_like(w_t)
    elif reconstruction == "off":
        realized = e.copy()
    else:
        raise ValueError("realized noise has no closed form under renormalized aggregation")
    return NoiseRecord(q, e, realized)


def compute_scores(server, clients, arch, config):
    """Saliency scores for this round, or ``None`` when masks should be random."""
    crit = config.criterion
    t = server.round
    if crit == "random" or t < config.warmup_rounds:
        return None
    gm = server.group_map
    w = server.w
    if crit == "l1":
        return score_l1(w, gm)
    if crit == "delta_w":
        return None if server.w_prev is None else score_delta_w(w, server.w_prev, gm)
    if crit in ("curvature", "curvature_approx"):
        if config.curvature_method == "fd_oracle":
            x = np.concatenate([c.x for c in clients])
            y = np.concatenate([c.y for c in clients])
            curv = curvature_from_hessian(fd_diag_hessian(arch, w, x, y))
        else:
            curv = server.curvature
            if curv.updates == 0:
                return None
        if crit == "curvature_approx":
            return score_curvature(w, None, curv, gm, use_gradient=False)
        if config.score_gradient == "exact":
            _, grads = analysis.client_gradients(arch, w, [(c.x, c.y) for c in clients])
            g = analysis.global_gradient([c.weight for c in clients], grads)
        else:
            g = server.grad_proxy if server.grad_proxy is not None else np.zeros_like(w)
        return score_curvature(w, g, curv, gm)
    raise ConfigError(f"unknown criterion {crit!r}", key="criterion")


def make_masks(server, clients, arch, config):
    d = len(server.w)
    t = server.round
    if config.criterion == "none":
        return [PruneMask.full(d, c.id, t) for c in clients]
    hold = config.mask_hold_interval
    if server.held_masks is not None and t % hold != 0:
        return [replace(m, round_index=t) for m in server.held_masks]
    scores = compute_scores(server, clients, arch, config)
    masks = []
    if scores is None:
        for c in clients:
            rng = stream(server.seed, "warmup", t, c.id)
            masks.append(generate_mask(None, server.group_map, c.target_ratio, t, config.warmup_rounds, rng, c.id))
        return masks
    order = prune_order(scores, server.group_map, t, 0, None)
    for c in clients:
        if c.target_ratio == 0:
            masks.append(PruneMask.full(d, c.id, t))
        else:
            masks.append(mask_from_order(order, server.group_map, c.target_ratio, c.id, t))
    return masks


def run_round(server, clients, arch, config, test=None):
    """One synchronous round; returns ``(next_server, RoundRecord, NoiseRecord)``."""
    t = server.round
    w_t = server.w
    p = [c.weight for c in clients]
    masks = make_masks(server, clients, arch, config)
    mode = config.reconstruction
    if mode not in RECONSTRUCTION_MODES:
        raise ConfigError(f"unknown reconstruction mode {mode!r}", key="reconstruction")

    subs = dispatch(w_t, masks)
    uploads = []
    for c, m, sub in zip(clients, masks, subs):
        rng = stream(server.seed, "batch", t, c.id)
        try:
            res = local_train(arch, sub, m.bits, c.x, c.y, config.lr, config.momentum,
                              config.batch_size, rng, config.E)
        except NumericFault as exc:
            raise NumericFault(str(exc), round_index=t, client=c.id) from None
        c.mask, c.submodel, c.delta, c.steps, c.samples_seen = m, sub, res.delta, res.steps, res.samples_seen
        c.upload = res.weights
        uploads.append(res.weights)

    if mode == "on":
        w_next = aggregate([reconstruct(u, m, w_t) for u, m in zip(uploads, masks)], p)
        # every client refilled these with w_t; sum(p) may round away from 1
        frozen = np.all([m.bits == 0 for m in masks], axis=0)
        w_next[frozen] = w_t[frozen]
    elif mode == "off":
        w_next = aggregate(uploads, p)
    else:
        w_next = aggregate_renormalized(uploads, masks, p, w_t)
    if not np.all(np.isfinite(w_next)):
        raise NumericFault("non-finite global model after aggregation", round_index=t)

    if mode == "renormalize":
        noise = noise_decomposition(masks, p, w_t, "off")
        noise.realized = w_t + aggregate([c.delta for c in clients], p) - w_next
    else:
        noise = noise_decomposition(masks, p, w_t, mode)

    eta_e = config.lr * sum(pk * c.steps for pk, c in zip(p, clients))
    pseudo = [-c.delta / (config.lr * c.steps) for c in clients]
    curvature = estimate_curvature(server.curvature, pseudo, config.curvature_beta,
                                   support=[m.bits for m in masks])
    nxt = ServerState(
        w=w_next,
        round=t + 1,
        group_map=server.group_map,
        curvature=curvature,
        seed=server.seed,
        w_prev=w_t,
        grad_proxy=-(w_next - w_t) / eta_e,
        held_masks=masks,
    )
    record = evaluate_round(nxt, clients, arch, config, masks, test, t)
    record.e_norm_sq = noise.e_norm_sq
    record.e_realized_norm_sq = noise.realized_norm_sq
    return nxt, record, noise


def evaluate_round(server, clients, arch, config, masks, test, t):
    w = server.w
    p = [c.weight for c in clients]
    losses, grads = analysis.client_gradients(arch, w, [(c.x, c.y) for c in clients])
    train_loss = float(np.dot(p, losses))
    g = analysis.global_gradient(p, grads)
    if not (math.isfinite(train_loss) and np.all(np.isfinite(g))):
        raise NumericFault("non-finite global loss", round_index=t)
    test_acc = float("nan")
    if test is not None and len(test[1]):
        test_acc = forward(arch, w, test[0], test[1])[1] / len(test[1])

    sigma2 = zeta2 = None
    interval = config.diagnostics_interval
    if interval and t % interval == 0:
        zeta2 = analysis.estimate_zeta2(p, grads)
        total = 0.0
        for c, gk in zip(clients, grads):
            est = analysis.estimate_sigma2(arch, w, c.x, c.y, config.batch_size, config.sigma_batches,
                                           stream(server.seed, "sigma", t, c.id), full_grad=gk)
            total += c.weight * est.value
        sigma2 = total

    up = 0
    flops = []
    for c, m in zip(clients, masks):
        cost = analysis.count_cost(arch, m.bits, server.group_map)
        up += cost.active_params
        flops.append(cost.flops * c.samples_seen)
    return analysis.RoundRecord(
        round=t,
        train_loss=train_loss,
        test_acc=test_acc,
        grad_norm_sq=float(g @ g),
        e_norm_sq=0.0,
        params_up=up,
        params_down=up,
        flops_local=int(sum(flops)),
        sigma2_hat=sigma2,
        zeta2_hat=zeta2,
        ratios=[c.target_ratio for c in clients],
        achieved_ratios=[m.ratio for m in masks],
        client_flops=flops,
    )
