"""Exponentially tilted empirical likelihood.

For a moment matrix ``G`` (rows ``g_i``) the tilted weights solve

    max  sum_i -w_i log(n w_i)   s.t.  sum_i w_i = 1,  sum_i w_i g_i = 0,

whose dual is the smooth convex problem ``min_lam f(lam) = mean(exp(G lam))``.
The weights are then ``p_i = exp(lam^T g_i) / sum_j exp(lam^T g_j)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import DualUnbounded, SingularHessian
from .loss import moment_matrix

LAMBDA_CAP = 1e4
MAX_HALVINGS = 60
VANISHING_LOG_WEIGHT = -50.0


@dataclass(frozen=True, eq=False)
class EtelSolution:
    """Result of the dual solve.

    Attributes
    ----------
    lam : ndarray, shape (d,)
        Lagrange multiplier.
    weights : ndarray, shape (n,)
        Tilted probabilities, positive and summing to one.
    log_etel : float
        ``sum_i log p_i``.
    iterations : int
        Newton iterations taken.
    grad_norm : float
        Norm of the last Newton direction ``|H^-1 G|``.
    converged : bool
        Whether the direction norm reached ``tol``.
    history : tuple of float
        ``log f`` at the start and after every iteration that decreased it.
    """

    lam: np.ndarray
    weights: np.ndarray
    log_etel: float
    iterations: int
    grad_norm: float
    converged: bool
    history: tuple = ()


def _log_f(G, lam, log_n):
    z = G @ lam
    m = z.max()
    return m + math.log(np.exp(z - m).sum()) - log_n, z


def _newton_direction(H, grad):
    d = H.shape[0]
    if d == 1:
        h = H[0, 0]
        if h > 0 and np.isfinite(h):
            return grad / h
        raise SingularHessian("dual Hessian is zero")
    try:
        L = np.linalg.cholesky(H)
        diag = np.diag(L)
        if diag.min() > 1e-7 * diag.max():
            return scipy.linalg.cho_solve((L, True), grad, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    tr = np.trace(H)
    if not tr > 0:
        raise SingularHessian("dual Hessian is zero")
    Hr = H + (1e-10 * tr / d) * np.eye(d)
    try:
        L = np.linalg.cholesky(Hr)
        return scipy.linalg.cho_solve((L, True), grad, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    lu, dmat, perm = scipy.linalg.ldl(Hr)
    ev = np.linalg.eigvalsh(dmat)
    if ev.min() <= 1e-300 or ev.min() < 1e-15 * ev.max():
        raise SingularHessian("dual Hessian singular after jitter")
    return np.linalg.solve(Hr, grad)


def solve_lambda(G, warm_start=None, tol: float = 1e-8, max_iter: int = 100) -> EtelSolution:
    """Solve the ETEL dual by damped Newton iterations.

    Parameters
    ----------
    G : array_like, shape (n, d)
        Moment matrix.
    warm_start : array_like, shape (d,), optional
        Starting multiplier; zero by default.
    tol : float
        Stop once the Newton direction has norm at most ``tol``.
    max_iter : int
        Iteration cap; hitting it returns ``converged=False``.

    Raises
    ------
    DualUnbounded
        If zero is not in the interior of the convex hull of the rows of ``G``.
        Detected exactly when ``log f`` drops below ``-log n`` (impossible for
        feasible problems, since ``-log f*`` is a KL divergence bounded by
        ``log n``), when ``|lam|`` exceeds the cap or the line search fails,
        or when the iteration cap is hit while some weight is below
        ``exp(-50) / n`` (zero on the boundary of the hull).
    SingularHessian
        If the dual Hessian is singular even after a small ridge.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    n, d = G.shape
    if not np.all(np.isfinite(G)):
        raise ValueError("moment matrix has non-finite entries")
    if not tol > 0:
        raise ValueError("tol must be positive")
    log_n = math.log(n)
    lam = np.zeros(d) if warm_start is None else np.array(warm_start, dtype=float).reshape(d)
    lf, z = _log_f(G, lam, log_n)
    if not np.isfinite(lf) or lf < -log_n or lf > 0.0:
        # a warm start worse than f(0) = 1, past the feasibility bound, or overflowing: restart at 0
        lam = np.zeros(d)
        lf, z = _log_f(G, lam, log_n)
    history = [lf]
    converged = False
    step_norm = math.inf
    it = 0
    while it < max_iter:
        it += 1
        w = np.exp(z - z.max())
        grad = G.T @ w
        H = (G.T * w) @ G
        step = _newton_direction(H, grad)
        step_norm = math.sqrt(float(step @ step))
        gamma = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = lam - gamma * step
            lf_c, z_c = _log_f(G, cand, log_n)
            if lf_c <= lf:
                break
            gamma *= 0.5
        else:
            if step_norm <= max(tol, 1e3 * np.finfo(float).eps * (1.0 + math.sqrt(lam @ lam))):
                converged = True
                break
            raise DualUnbounded("line search failed to decrease the dual objective")
        lam = cand
        if lf_c < -log_n:
            raise DualUnbounded("dual objective below -log n: moment constraint infeasible")
        if math.sqrt(lam @ lam) > LAMBDA_CAP:
            raise DualUnbounded(f"|lambda| exceeded {LAMBDA_CAP:g}")
        if lf_c < lf:
            history.append(lf_c)
        lf, z = lf_c, z_c
        if step_norm <= tol:
            converged = True
            break
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    log_p = z - lse
    if not converged and log_p.min() < VANISHING_LOG_WEIGHT - log_n:
        # lambda drifting to infinity with some weights vanishing: zero on the hull boundary
        raise DualUnbounded("tilted weights degenerate: zero lies on the boundary of the moment hull")
    weights = np.exp(log_p)
    return EtelSolution(
        lam=lam,
        weights=weights,
        log_etel=float(np.sum(log_p)),
        iterations=it,
        grad_norm=step_norm,
        converged=converged,
        history=tuple(history),
    )


def log_etel_at(model, data, theta, warm_start=None, tol: float = 1e-8, max_iter: int = 100) -> EtelSolution:
    """ETEL at ``theta``: build the moment matrix and solve the dual."""
    return solve_lambda(moment_matrix(model, data, theta), warm_start=warm_start, tol=tol, max_iter=max_iter)
