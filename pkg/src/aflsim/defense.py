"""Server-side defense rules: the filtered-median defense, its ablation
variants, and the AsyncSGD / Kardam-style / BASGD baselines."""

import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import estimate_update
from .numkit import as_vector, coordinate_median, l2_norm, percentile

VARIANTS = ("full", "mean", "accepted_only", "no_filter", "estimates_only")


@dataclass
class FilteredMedianConfig:
    """Hyperparameters of the filtered-median defense.

    alpha: percentile of the Lipschitz log used as the acceptance threshold.
    buffer_size: limited-memory window for the per-client diff buffers.
    clip_threshold: l2 cap applied to a client's first-ever update.
    q_append_accepted_only: ablation flag; by default every computed factor is
    appended to the log before thresholding, as the server loop prescribes.
    """

    alpha: float = 0.8
    buffer_size: int = 3
    clip_threshold: float = 50.0
    eta: float = 0.01
    q_append_accepted_only: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")


@dataclass
class RoundDecision:
    accepted: bool
    lam: float | None
    threshold: float | None
    aggregate: np.ndarray | None      # None means no model change this round
    estimates_used: int
    estimates: dict = field(default_factory=dict)   # client_id -> EstimationResult


def admit_pair(dw, dg):
    """Cautious curvature-pair admission: only pairs with meaningfully positive
    inner product carry usable curvature; degenerate or indefinite pairs would
    destabilize the limited-memory solve."""
    dw, dg = as_vector(dw), as_vector(dg)
    ip = float(dw @ dg)
    return ip > 1e-10 * float(np.linalg.norm(dw)) * float(np.linalg.norm(dg))


def clip_l2(g, threshold):
    """Rescale g to norm `threshold` when it exceeds it; unchanged otherwise."""
    if threshold <= 0:
        raise ValueError("clip threshold must be > 0")
    norm = l2_norm(g)
    if norm <= threshold:
        return as_vector(g).copy()
    return as_vector(g) * (threshold / norm)


def lipschitz_factor(g_new, g_old, w_new, w_old):
    """Update-change to model-change ratio; +inf when the model did not move
    but the update did, 0 when neither moved."""
    num = l2_norm(as_vector(g_new) - as_vector(g_old))
    den = l2_norm(as_vector(w_new) - as_vector(w_old))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


class Defense:
    name = "base"

    def process(self, client_id, g_received, base_round, t, hist):
        raise NotImplementedError


class AsyncSgdDefense(Defense):
    """No filtering, no estimation: apply every received update as-is."""

    name = "async_sgd"

    def process(self, client_id, g_received, base_round, t, hist):
        hist.update_client_record(client_id, g_received, base_round)
        return RoundDecision(True, None, None, as_vector(g_received).copy(), 0)


class FilteredMedianDefense(Defense):
    """Lipschitz-filtered, estimation-augmented coordinate-wise median rule.

    Each round the received update is scored against the history of Lipschitz
    factors, the other seen clients' updates are estimated from their anchors
    and diff buffers, and the aggregate is the coordinate-wise median of the
    estimates plus (when accepted) the received update.

    Ablation variants: "mean" swaps the median for the arithmetic mean,
    "accepted_only" skips estimation and applies accepted updates directly,
    "no_filter" never rejects, "estimates_only" never aggregates the received
    update.
    """

    def __init__(self, cfg: FilteredMedianConfig, variant="full"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.cfg = cfg
        self.variant = variant
        self.name = "filtered_median" if variant == "full" else f"filtered_median_{variant}"

    def _filter(self, client_id, g_received, base_round, t, hist):
        """Returns (effective update, accepted, lam, threshold, first_contact)."""
        rec = hist.client_record(client_id)
        if not rec.ever_seen or t == 0:
            return clip_l2(g_received, self.cfg.clip_threshold), True, None, None, True
        w_new = hist.model(base_round)
        w_old = hist.model(rec.last_base_round)
        lam = lipschitz_factor(g_received, rec.last_update, w_new, w_old)
        if self.cfg.q_append_accepted_only:
            thr = percentile(hist.lipschitz_log, self.cfg.alpha) if hist.lipschitz_log else math.inf
            accepted = lam <= thr
            if accepted and math.isfinite(lam):
                hist.append_lipschitz(lam)
        else:
            if math.isfinite(lam):
                hist.append_lipschitz(lam)
                thr = percentile(hist.lipschitz_log, self.cfg.alpha)
                accepted = lam <= thr
            else:
                thr = percentile(hist.lipschitz_log, self.cfg.alpha) if hist.lipschitz_log else None
                accepted = False
        if self.variant == "no_filter":
            accepted = True
        return as_vector(g_received).copy(), accepted, lam, thr, False

    def process(self, client_id, g_received, base_round, t, hist):
        g_eff, accepted, lam, thr, first_contact = self._filter(
            client_id, g_received, base_round, t, hist)
        rec = hist.client_record(client_id)

        estimates = {}
        if self.variant != "accepted_only":
            others = [k for k in hist.seen_clients() if k != client_id]
            for k in others:
                estimates[k] = estimate_update(k, t, hist)

        aggregate = self._aggregate(g_eff, accepted, estimates, hist)

        # Anchor refresh; a real contact also contributes a true curvature
        # pair, the only entry point for observed (not extrapolated) curvature.
        if not first_contact:
            dw_real = hist.model(base_round) - hist.model(rec.last_base_round)
            dg_real = g_eff - rec.last_update
            if admit_pair(dw_real, dg_real):
                hist.push_diffs(client_id, dw_real, dg_real)
        hist.update_client_record(client_id, g_eff, base_round)

        # Estimation used the buffers as they stood entering this round; only
        # now do this round's extrapolated pairs join them.
        for k, est in estimates.items():
            anchor_rec = hist.client_record(k)
            dw_k = hist.delta_w(t, anchor_rec.last_base_round)
            dg_k = est.estimate - anchor_rec.last_update
            if admit_pair(dw_k, dg_k):
                hist.push_diffs(k, dw_k, dg_k)

        return RoundDecision(accepted, lam, thr, aggregate, len(estimates), estimates)

    def _aggregate(self, g_eff, accepted, estimates, hist):
        if self.variant == "accepted_only":
            return g_eff if accepted else None
        vectors = [est.estimate for est in estimates.values()]
        if self.variant != "estimates_only" and accepted:
            vectors = [g_eff] + vectors
        if not vectors:
            return np.zeros_like(g_eff)
        if self.variant == "mean":
            return np.mean(np.stack(vectors), axis=0)
        return coordinate_median(vectors)


class KardamDefense(Defense):
    """Deviation filter baseline: accept a received update iff its Lipschitz
    factor is at or below the median of the log; apply accepted updates
    directly, skip rejected rounds. First contact is clipped and accepted."""

    name = "kardam"

    def __init__(self, clip_threshold=50.0):
        self.clip_threshold = clip_threshold

    def process(self, client_id, g_received, base_round, t, hist):
        rec = hist.client_record(client_id)
        if not rec.ever_seen or t == 0:
            g_eff = clip_l2(g_received, self.clip_threshold)
            hist.update_client_record(client_id, g_eff, base_round)
            return RoundDecision(True, None, None, g_eff, 0)
        w_new = hist.model(base_round)
        w_old = hist.model(rec.last_base_round)
        lam = lipschitz_factor(g_received, rec.last_update, w_new, w_old)
        if math.isfinite(lam):
            hist.append_lipschitz(lam)
        thr = percentile(hist.lipschitz_log, 0.5) if hist.lipschitz_log else math.inf
        accepted = lam <= thr
        g_eff = as_vector(g_received).copy()
        hist.update_client_record(client_id, g_eff, base_round)
        return RoundDecision(accepted, lam, thr, g_eff if accepted else None, 0)


class BasgdDefense(Defense):
    """Bucketed baseline: accumulate updates into buckets by client id; once
    every bucket holds at least one update, emit the coordinate-wise median of
    the bucket averages and reset."""

    name = "basgd"

    def __init__(self, n_buckets=3):
        if n_buckets < 1:
            raise ValueError("need at least one bucket")
        self.n_buckets = n_buckets
        self._sums = None
        self._counts = None

    def process(self, client_id, g_received, base_round, t, hist):
        g = as_vector(g_received)
        if self._sums is None:
            self._sums = [np.zeros_like(g) for _ in range(self.n_buckets)]
            self._counts = [0] * self.n_buckets
        b = client_id % self.n_buckets
        self._sums[b] = self._sums[b] + g
        self._counts[b] += 1
        hist.update_client_record(client_id, g, base_round)
        if all(c >= 1 for c in self._counts):
            means = [s / c for s, c in zip(self._sums, self._counts)]
            aggregate = coordinate_median(means)
            self._sums = [np.zeros_like(g) for _ in range(self.n_buckets)]
            self._counts = [0] * self.n_buckets
            return RoundDecision(True, None, None, aggregate, 0)
        return RoundDecision(True, None, None, None, 0)


def build_defense(name, cfg: FilteredMedianConfig, variant="full", basgd_buckets=3):
    if name == "async_sgd":
        return AsyncSgdDefense()
    if name == "filtered_median":
        return FilteredMedianDefense(cfg, variant=variant)
    if name == "kardam":
        return KardamDefense(clip_threshold=cfg.clip_threshold)
    if name == "basgd":
        return BasgdDefense(n_buckets=basgd_buckets)
    raise ValueError(f"unknown defense {name!r}")
