"""Empirical risk minimization.

:func:`minimize_risk` picks an exact or second-order method for each loss:

* squared loss: closed form;
* check loss: a weighted-quantile scan for one coefficient, otherwise the
  dual linear program of quantile regression (HiGHS);
* smooth losses with an analytic Hessian: damped Newton;
* hinge loss: Newton continuation along the smoothed hinge;
* other smooth losses: grid search (one coefficient) or BFGS.

:func:`subgradient_descent` runs plain diminishing-step (sub)gradient
descent for a batch of weighted problems at once; the bootstrap uses it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .loss import CheckLoss, Dataset, HingeSVM, LossModel, SmoothedHingeSVM, SquaredLoss, empirical_risk


@dataclass(frozen=True)
class ErmResult:
    """A risk minimizer and how it was found."""

    theta: np.ndarray
    risk: float
    converged: bool
    iterations: int
    method: str


def _quantile_scan(x, y, tau):
    """Minimize sum rho_tau(y_i - x_i t) over scalar t (lowest minimizer)."""
    nz = x != 0
    if not np.any(nz):
        return 0.0
    x, y = x[nz], y[nz]
    t = y / x
    order = np.argsort(t, kind="stable")
    t, x = t[order], x[order]
    pos = np.where(x > 0, x, 0.0)
    neg = np.where(x < 0, x, 0.0)
    # right derivative just above t_k, evaluated at the end of each tie group
    last = np.searchsorted(t, t, side="right") - 1
    a = np.cumsum(pos)[last]
    b = (neg.sum() - np.cumsum(neg))[last]
    rd = a + b - tau * x.sum()
    k = int(np.argmax(rd >= -1e-12 * np.abs(x).sum()))
    return float(t[k])


def quantile_regression(data: Dataset, tau: float) -> np.ndarray:
    """Exact check-loss minimizer.

    One coefficient uses a sorted breakpoint scan and returns the lowest
    minimizer (the lower median for ``tau = 0.5`` and an intercept).
    Otherwise the dual LP ``max y^T a, X^T a = (1 - tau) X^T 1, 0 <= a <= 1``
    is solved; the coefficients are minus its equality marginals.
    """
    x, y = data.features, data.response
    if data.p == 1:
        return np.array([_quantile_scan(x[:, 0], y, tau)])
    res = scipy.optimize.linprog(
        -y,
        A_eq=x.T,
        b_eq=(1.0 - tau) * x.sum(axis=0),
        bounds=(0.0, 1.0),
        method="highs",
    )
    if res.status != 0 or res.eqlin is None:
        raise RuntimeError(f"quantile LP failed: {res.message}")
    return -np.asarray(res.eqlin.marginals, dtype=float)


def newton_minimize(model: LossModel, data: Dataset, init, tol=1e-12, max_iter=200):
    """Damped Newton on a smooth risk with an analytic Hessian.

    Returns
    -------
    theta : ndarray
    converged : bool
    iterations : int
    """
    theta = np.array(init, dtype=float)
    risk = empirical_risk(model, data, theta)
    for it in range(1, max_iter + 1):
        g = model.moment(data, theta).mean(axis=0)
        H = model.hessian(data, theta)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        if not step @ g > 0:
            step = g
        gamma = 1.0
        for _ in range(60):
            cand = theta - gamma * step
            r = empirical_risk(model, data, cand)
            if r <= risk:
                break
            gamma *= 0.5
        else:
            return theta, True, it
        theta, risk = cand, r
        if math.sqrt(step @ step) * gamma <= tol * (1.0 + math.sqrt(theta @ theta)):
            return theta, True, it
    return theta, False, max_iter


def _hinge_continuation(model: HingeSVM, data, init):
    theta = np.zeros(data.p) if init is None else np.array(init, dtype=float)
    total = 0
    ok = True
    for eps in (0.5, 0.1, 0.02, 4e-3, 1e-3, 2e-4, 5e-5, 1e-5):
        theta, ok, it = newton_minimize(SmoothedHingeSVM(model.lam, eps), data, theta, tol=1e-10)
        total += it
    return theta, ok, total


def _default_init(model, data):
    d = model.dim(data)
    if d == 3 and model.name == "huber_sigmoid":
        return np.ones(3)
    return np.zeros(d)


def _mean_gradient(model, data, theta):
    return model.moment(data, theta).mean(axis=0)


def _polish(model: LossModel, data: Dataset, theta, steps: int = 5, h: float = 1e-6):
    """Newton steps on the mean gradient with a finite-difference Jacobian.

    A step is kept only when it lowers the gradient norm, so the result is
    never worse than ``theta``.
    """
    theta = np.array(theta, dtype=float)
    g = _mean_gradient(model, data, theta)
    gn = float(np.linalg.norm(g))
    d = theta.size
    for _ in range(steps):
        if gn == 0.0:
            break
        J = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            J[:, j] = (_mean_gradient(model, data, theta + e) - _mean_gradient(model, data, theta - e)) / (2 * h)
        try:
            cand = theta - np.linalg.solve(0.5 * (J + J.T), g)
        except np.linalg.LinAlgError:
            break
        gc = _mean_gradient(model, data, cand)
        gcn = float(np.linalg.norm(gc))
        if not gcn < gn:
            break
        theta, g, gn = cand, gc, gcn
    return theta


def minimize_risk(model: LossModel, data: Dataset, init=None, tol: float = 1e-10) -> ErmResult:
    """Empirical risk minimizer of ``model`` on ``data``.

    For non-convex losses the answer is a local minimizer reached from
    ``init`` (or a grid search when there is a single coefficient).
    """
    model.validate(data)
    d = model.dim(data)
    if isinstance(model, SquaredLoss):
        if data.response is None:
            theta = data.features.mean(axis=0)
        else:
            theta = np.linalg.lstsq(data.features, data.response, rcond=None)[0]
        return ErmResult(theta, empirical_risk(model, data, theta), True, 0, "closed_form")
    if isinstance(model, CheckLoss):
        theta = quantile_regression(data, model.tau)
        return ErmResult(theta, empirical_risk(model, data, theta), True, 1, "linear_program")
    if isinstance(model, HingeSVM):
        theta, ok, it = _hinge_continuation(model, data, init)
        return ErmResult(theta, empirical_risk(model, data, theta), ok, it, "smoothing_continuation")
    if type(model).hessian is not LossModel.hessian:
        x0 = np.zeros(d) if init is None else init
        theta, ok, it = newton_minimize(model, data, x0, tol=tol)
        return ErmResult(theta, empirical_risk(model, data, theta), ok, it, "newton")
    if d == 1 and init is None:
        grid = np.linspace(-5.0, 5.0, 2001)
        risks = model.loss(data, grid[:, None]).mean(axis=1)
        k = int(np.argmin(risks))
        lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
        res = scipy.optimize.minimize_scalar(
            lambda t: empirical_risk(model, data, np.array([t])), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-10},
        )
        theta = _polish(model, data, np.array([res.x]))
        return ErmResult(theta, empirical_risk(model, data, theta), bool(res.success), int(res.nfev), "grid_bounded")
    x0 = _default_init(model, data) if init is None else np.asarray(init, dtype=float)
    res = scipy.optimize.minimize(
        lambda t: empirical_risk(model, data, t),
        x0,
        jac=lambda t: model.moment(data, t).mean(axis=0),
        method="BFGS",
        options={"gtol": 1e-9, "maxiter": 2000},
    )
    theta = _polish(model, data, res.x)
    # precision loss near a C1 kink counts as converged when the gradient vanishes
    ok = bool(res.success) or float(np.linalg.norm(_mean_gradient(model, data, theta))) < 1e-6
    return ErmResult(theta, empirical_risk(model, data, theta), ok, int(res.nit), "bfgs")


def subgradient_descent(
    model: LossModel,
    data: Dataset,
    inits,
    weights=None,
    step: float = 1.0,
    iters: int = 2000,
    box=None,
    tol: float = 1e-3,
):
    """Diminishing-step (sub)gradient descent on a batch of problems.

    Problem ``b`` minimizes the ``weights[b]``-weighted risk (bootstrap
    resample counts, say) from ``inits[b]`` with steps ``step / sqrt(t)``.
    Smooth losses return the last iterate; non-smooth losses return the
    average of the second half of the iterates.

    Parameters
    ----------
    inits : array_like, shape (B, d)
    weights : array_like, shape (B, n), optional
        Non-negative observation weights; uniform by default.
    box : tuple of array_like, optional
        ``(lo, hi)`` bounds; iterates are projected onto the box.
    tol : float
        Convergence flag threshold on late-iterate movement, relative to
        ``1 + |theta|``.

    Returns
    -------
    theta : ndarray, shape (B, d)
    converged : ndarray of bool, shape (B,)
        False for runs that moved too much late on or hit a non-finite gradient.
    """
    theta = np.array(inits, dtype=float)
    if theta.ndim == 1:
        theta = theta[None, :]
    B, d = theta.shape
    n = data.n
    if weights is None:
        w = np.full((B, n), 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum(axis=1, keepdims=True)
    lo = hi = None
    if box is not None:
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in box)
        theta = np.clip(theta, lo, hi)
    average = not model.smooth
    half = iters // 2
    acc = np.zeros_like(theta)
    q3 = np.zeros_like(theta)
    prev = theta.copy()
    mark = max(iters - max(iters // 10, 1), 0)
    diverged = np.zeros(B, dtype=bool)
    # a diverging run overflows harmlessly and is flagged below
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, iters + 1):
            G = model.moment(data, theta)  # (B, n, d)
            grad = np.einsum("bn,bnd->bd", w, G)
            bad = ~np.all(np.isfinite(grad), axis=1)
            diverged |= bad
            grad = np.where(bad[:, None], 0.0, grad)
            theta = theta - (step / math.sqrt(t)) * grad
            if lo is not None:
                theta = np.clip(theta, lo, hi)
            if average and t > half:
                acc += theta
                if t == half + (iters - half) // 2:
                    q3 = acc / (t - half)
            if not average and t == mark:
                prev = theta.copy()
        if average and iters - half > 0:
            out = acc / (iters - half)
            move = np.linalg.norm(out - q3, axis=1)
        else:
            out = theta
            move = np.linalg.norm(out - prev, axis=1)
        converged = ~diverged & np.all(np.isfinite(out), axis=1) & (move <= tol * (1.0 + np.linalg.norm(out, axis=1)))
    return out, converged
