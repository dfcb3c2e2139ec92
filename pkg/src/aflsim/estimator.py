"""Reconstruction of missing client updates from history.

The estimate extrapolates a client's last real update along the global model
movement using a limited-memory quasi-Newton (compact representation) product
of the integrated Hessian with the model difference.
"""

from dataclasses import dataclass

import numpy as np

from .numkit import SingularSystemError, as_vector, l2_norm, solve_dense

HVP_RIDGE = 1e-6


class DegenerateCurvatureError(ValueError):
    """Most recent curvature pair has a zero model diff; no scale is inferable."""


@dataclass
class EstimationResult:
    estimate: np.ndarray
    fallback_used: bool
    hvp: np.ndarray


def lbfgs_hvp(phi, pi, dg_prev, dw_prev, dw, ridge=HVP_RIDGE):
    """Compact limited-memory BFGS Hessian-vector product.

    phi: model diffs (s vectors), pi: aligned update diffs (s vectors).
    Builds Y = Phi^T Pi, takes B = Diag(Y) and J = strictly lower Tril(Y)
    (the diagonal already lives in B), scales with the curvature ratio
    mu = <dg_prev, dw_prev> / <dw_prev, dw_prev>, solves the 2s x 2s block
    system and returns mu*dw - [Pi, mu*Phi] l.
    """
    if len(phi) == 0 or len(phi) != len(pi):
        raise ValueError("need equally many model and update diffs, at least one")
    dw = as_vector(dw)
    dw_prev = as_vector(dw_prev)
    dg_prev = as_vector(dg_prev)
    denom = float(dw_prev @ dw_prev)
    if denom == 0.0:
        raise DegenerateCurvatureError("degenerate curvature pair")
    mu = float(dg_prev @ dw_prev) / denom
    s_mat = np.column_stack([as_vector(v) for v in phi])   # d x s
    y_mat = np.column_stack([as_vector(v) for v in pi])    # d x s
    y = s_mat.T @ y_mat
    b = np.diag(np.diag(y))
    j = np.tril(y, -1)
    s = y.shape[0]
    block = np.empty((2 * s, 2 * s))
    block[:s, :s] = -b
    block[:s, s:] = j.T
    block[s:, :s] = j
    block[s:, s:] = mu * (s_mat.T @ s_mat)
    rhs = np.concatenate([y_mat.T @ dw, mu * (s_mat.T @ dw)])
    # Solve in a normalized system so the ridge acts relative to the block's
    # scale; otherwise small buffered steps would be drowned by it.
    scale = float(np.abs(block).max())
    if scale == 0.0:
        scale = 1.0
    l = solve_dense(block / scale, rhs / scale, ridge=ridge)
    return mu * dw - (y_mat @ l[:s] + mu * (s_mat @ l[s:]))


def estimate_update(k, t, hist):
    """Estimate client k's update at round t from its anchor and diff buffers.

    Falls back to the anchor (zero-order term) when no curvature pair exists,
    the most recent pair is degenerate, the block system is singular, or the
    product is non-finite. The caller pushes this round's diff pair afterward.
    """
    rec = hist.client_record(k)
    if not rec.ever_seen:
        raise ValueError("no anchor update")
    anchor = rec.last_update
    dw = hist.delta_w(t, rec.last_base_round)
    phi, pi = hist.buffers.pairs(k)
    if len(phi) == 0:
        return EstimationResult(anchor.copy(), True, np.zeros_like(anchor))
    try:
        hvp = lbfgs_hvp(phi, pi, pi[-1], phi[-1], dw)
    except (DegenerateCurvatureError, SingularSystemError):
        return EstimationResult(anchor.copy(), True, np.zeros_like(anchor))
    if not np.all(np.isfinite(hvp)) or l2_norm(hvp) > _curvature_cap(phi, pi, dw):
        return EstimationResult(anchor.copy(), True, np.zeros_like(anchor))
    return EstimationResult(anchor + hvp, False, hvp)


CURVATURE_CAP_FACTOR = 10.0


def _curvature_cap(phi, pi, dw):
    """Largest credible product norm: a matrix consistent with the buffered
    secants cannot act much beyond the curvature ratios they exhibit, so a
    product past this cap marks an unstable solve rather than real curvature."""
    ratios = [l2_norm(y) / l2_norm(s) for s, y in zip(phi, pi) if l2_norm(s) > 0]
    if not ratios:
        return 0.0
    return CURVATURE_CAP_FACTOR * max(ratios) * l2_norm(dw) + 1e-12


def relative_estimation_error(estimate, truth):
    """l2 distance between estimate and truth, relative to the truth's norm."""
    denom = l2_norm(truth)
    if denom == 0.0:
        raise ValueError("undefined relative error")
    return l2_norm(as_vector(estimate) - as_vector(truth)) / denom
