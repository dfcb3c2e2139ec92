"""Poisoning attacks: data poisoning at setup plus per-round update manipulation.

The threat model is full knowledge: attackers see every client's would-be
update and, for the adaptive attack, the defender's filter state.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numkit import RngStream, as_vector, gaussian_sample, l2_norm, percentile
from .taskbench import Dataset

GAUSSIAN_ATTACK_STD = 200.0
MINMAX_SEARCH_ITERS = 30
ADAPTIVE_SAFETY = 0.99


@dataclass
class AttackContext:
    """Snapshot handed to update-manipulation attacks each round."""

    benign_updates: list
    malicious_ids: frozenset
    global_w: np.ndarray            # base model the attacker trained against
    defense_view: object            # HistoryStore, readable by the attacker
    rng: RngStream
    attacker_id: int = -1


def labelflip_poison(shard, z):
    """Static label flip: every label y becomes z - 1 - y."""
    if shard.task != "classification":
        raise ValueError("label flipping needs a classification shard")
    return Dataset(shard.features.copy(), z - 1 - shard.labels, "classification",
                   shard.n_classes, shard.triggered.copy())


def signflip(g):
    return -as_vector(g)


def gaussian_fabricate(d, rng, std=GAUSSIAN_ATTACK_STD):
    """Fabricated update: zero-mean Gaussian noise, large fixed deviation."""
    return gaussian_sample(rng, 0.0, std, d)


def scaling_attack(g_poisoned, factor):
    """Amplified update computed on a trigger-poisoned shard."""
    return factor * as_vector(g_poisoned)


def _unit_inverse_mean(benign):
    mean = np.mean(np.stack(benign), axis=0)
    norm = l2_norm(mean)
    if norm == 0.0:
        p = np.zeros_like(mean)
        p[0] = 1.0
        return mean, p
    return mean, -mean / norm


def minmax_attack(ctx: AttackContext):
    """Largest perturbation of the benign mean, along the flipped unit mean,
    that stays within the benign updates' max pairwise distance."""
    benign = [as_vector(g) for g in ctx.benign_updates]
    if len(benign) < 2:
        raise ValueError("min-max attack needs at least two benign updates")
    mean, p = _unit_inverse_mean(benign)
    stacked = np.stack(benign)
    tau = 0.0
    for j in range(len(benign)):
        d = np.linalg.norm(stacked[j + 1:] - stacked[j], axis=1)
        if d.size:
            tau = max(tau, float(d.max()))
    if tau == 0.0:
        return mean

    def feasible(gamma):
        cand = mean + gamma * p
        return float(np.linalg.norm(stacked - cand, axis=1).max()) <= tau

    lo, hi = 0.0, 10.0 * tau
    if feasible(hi):
        return mean + hi * p
    for _ in range(MINMAX_SEARCH_ITERS):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return mean + lo * p


def adaptive_attack(ctx: AttackContext, cfg):
    """Filter-aware deviation: move from the attacker's previous update along
    the flipped benign mean by just under the defender's current acceptance
    budget, so the crafted update still passes the percentile test."""
    hist = ctx.defense_view
    rec = hist.client_record(ctx.attacker_id) if hist is not None else None
    if hist is None or not hist.lipschitz_log or rec is None or not rec.ever_seen:
        return minmax_attack(ctx)
    theta = percentile(hist.lipschitz_log, cfg.alpha)
    w_old = hist.model(rec.last_base_round)
    budget = ADAPTIVE_SAFETY * theta * l2_norm(as_vector(ctx.global_w) - w_old)
    if budget == 0.0 or not math.isfinite(budget):
        return rec.last_update.copy()
    _, p = _unit_inverse_mean([as_vector(g) for g in ctx.benign_updates])
    return rec.last_update + budget * p
