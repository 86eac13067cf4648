"""Datasets and loss/moment models.

A loss model pairs a per-observation loss ``l(x, theta)`` with a moment
function ``g(x, theta)``: the gradient for smooth losses and a fixed
subgradient selection otherwise. All evaluations broadcast over leading
batch axes of ``theta``: a parameter array of shape ``(..., d)`` gives
losses of shape ``(..., n)`` and moments of shape ``(..., n, d)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, DimensionError, NonFiniteLoss


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of ``n`` observations.

    Parameters
    ----------
    features : array_like, shape (n, p)
        Covariates (or the raw observations for location models).
    response : array_like, shape (n,), optional
        Real response.
    labels : array_like, shape (n,), optional
        Class labels in {-1, +1}.
    """

    features: np.ndarray
    response: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"features must be a non-empty n x p matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", _frozen(x))
        if self.response is not None and self.labels is not None:
            raise DataError("a dataset carries either a response or labels, not both")
        for name in ("response", "labels"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.array(v, dtype=float).reshape(-1)
            if v.shape[0] != x.shape[0]:
                raise DataError(f"{name} has length {v.shape[0]}, expected {x.shape[0]}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"{name} contains non-finite values")
            if name == "labels" and not np.all(np.abs(v) == 1.0):
                raise DataError("labels must be -1 or +1")
            object.__setattr__(self, name, _frozen(v))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def target(self):
        """The response or the labels, whichever is present."""
        return self.response if self.response is not None else self.labels

    def take(self, idx) -> "Dataset":
        """Rows ``idx`` (with repetition allowed), as a new dataset."""
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            self.features[idx],
            None if self.response is None else self.response[idx],
            None if self.labels is None else self.labels[idx],
        )

    def select(self, columns) -> "Dataset":
        """Keep only the feature columns ``columns``."""
        cols = np.asarray(list(columns), dtype=np.intp)
        if cols.size == 0:
            raise DataError("cannot select an empty set of feature columns")
        return Dataset(self.features[:, cols], self.response, self.labels)

    # CSV ingestion and output -------------------------------------------

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        """Read a CSV with ``x_*`` feature columns and optional ``y``/``label``."""
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(line for line in fh if not line.startswith("#")))
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if not rows:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in rows[0]]
        xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
        if not xcols:
            raise DataError(f"{path}: no feature columns prefixed 'x_'")
        ycol = header.index("y") if "y" in header else None
        lcol = header.index("label") if "label" in header else None
        body = [r for r in rows[1:] if r]
        try:
            table = np.array([[float(v) for v in r] for r in body], dtype=float)
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric entry ({exc})") from exc
        if table.ndim != 2 or table.shape[0] == 0 or table.shape[1] != len(header):
            raise DataError(f"{path}: ragged or empty table")
        return cls(
            table[:, xcols],
            None if ycol is None else table[:, ycol],
            None if lcol is None else table[:, lcol],
        )

    def to_csv(self, path, comment: str | None = None) -> None:
        """Write the table; ``comment`` becomes a leading ``#`` line."""
        header = [f"x_{j + 1}" for j in range(self.p)]
        cols = [self.features]
        if self.response is not None:
            header.append("y")
            cols.append(self.response[:, None])
        if self.labels is not None:
            header.append("label")
            cols.append(self.labels[:, None])
        table = np.hstack(cols)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if comment:
                fh.write(comment if comment.startswith("#") else "# " + comment)
                fh.write("\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in table:
                w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# loss models


@dataclass(frozen=True, eq=False)
class LossModel:
    """Base class for loss/moment pairs.

    Subclasses implement :meth:`loss` and :meth:`moment`; smooth models may
    also provide an analytic :meth:`hessian` of the empirical risk.

    Attributes
    ----------
    name : str
        Identifier used in configs and reports.
    smooth : bool
        Whether the loss is twice differentiable in theta almost everywhere
        with a gradient moment (as opposed to a subgradient selection).
    requires : str or None
        ``"response"``, ``"labels"`` or ``None``.
    """

    name: str = field(init=False, default="loss")
    smooth: bool = field(init=False, default=True)
    requires: str | None = field(init=False, default=None)

    def dim(self, data: Dataset) -> int:
        """Parameter dimension for ``data``."""
        return data.p

    def params(self) -> dict:
        """Hyperparameters, for config echo."""
        return {}

    def validate(self, data: Dataset) -> None:
        if self.requires == "response" and data.response is None:
            raise DataError(f"{self.name} needs a response column 'y'")
        if self.requires == "labels" and data.labels is None:
            raise DataError(f"{self.name} needs a label column 'label'")

    def check_theta(self, data: Dataset, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        d = self.dim(data)
        if theta.ndim == 0 or theta.shape[-1] != d:
            raise DimensionError(f"{self.name}: theta must have trailing length {d}, got shape {theta.shape}")
        return theta

    def loss(self, data: Dataset, theta) -> np.ndarray:
        raise NotImplementedError

    def moment(self, data: Dataset, theta) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, data: Dataset, theta) -> np.ndarray:
        """Mean Hessian of the loss, by central differences of the mean moment."""
        theta = self.check_theta(data, theta)
        d = theta.shape[-1]
        h = 1e-5 * (1.0 + np.abs(theta))
        out = np.empty((d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h[j]
            gp = self.moment(data, theta + e).mean(axis=0)
            gm = self.moment(data, theta - e).mean(axis=0)
            out[:, j] = (gp - gm) / (2 * h[j])
        return 0.5 * (out + out.T)

    def smoothed(self, eps: float) -> "LossModel":
        """A twice-differentiable surrogate used for Hessian estimation."""
        return self


def _linear_index(data, theta):
    # (..., d) @ (d, n) -> (..., n)
    return theta @ data.features.T


@dataclass(frozen=True, eq=False)
class SquaredLoss(LossModel):
    """Half squared error.

    Without a response this is the location model ``|x - theta|^2 / 2``;
    with one it is least squares ``(y - x^T theta)^2 / 2``.
    """

    name: str = field(init=False, default="squared")

    def loss(self, data, theta):
        theta = self.check_theta(data, theta)
        if data.response is None:
            r = theta[..., None, :] - data.features
            return 0.5 * np.sum(r * r, axis=-1)
        r = data.response - _linear_index(data, theta)
        return 0.5 * r * r

    def moment(self, data, theta):
        theta = self.check_theta(data, theta)
        if data.response is None:
            return theta[..., None, :] - data.features
        r = data.response - _linear_index(data, theta)
        return -r[..., None] * data.features

    def hessian(self, data, theta):
        self.check_theta(data, theta)
        if data.response is None:
            return np.eye(data.p)
        return data.features.T @ data.features / data.n


@dataclass(frozen=True, eq=False)
class CheckLoss(LossModel):
    """Quantile-regression check loss ``(y - x^T theta)(tau - 1(y < x^T theta))``."""

    tau: float = 0.5
    name: str = field(init=False, default="check")
    smooth: bool = field(init=False, default=False)
    requires: str | None = field(init=False, default="response")

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")

    def params(self):
        return {"tau": self.tau}

    def loss(self, data, theta):
        theta = self.check_theta(data, theta)
        u = _linear_index(data, theta)
        r = data.response - u
        return r * (self.tau - (data.response < u))

    def moment(self, data, theta):
        theta = self.check_theta(data, theta)
        u = _linear_index(data, theta)
        w = (data.response < u) - self.tau
        return w[..., None] * data.features

    def smoothed(self, eps):
        return SmoothedCheckLoss(self.tau, eps)


@dataclass(frozen=True, eq=False)
class SmoothedCheckLoss(LossModel):
    """Smooth surrogate ``-tau u + (u + sqrt(eps^2 + u^2)) / 2`` with ``u = x^T theta - y``."""

    tau: float = 0.5
    eps: float = 0.1
    name: str = field(init=False, default="smoothed_check")
    requires: str | None = field(init=False, default="response")

    def params(self):
        return {"tau": self.tau, "eps": self.eps}

    def loss(self, data, theta):
        theta = self.check_theta(data, theta)
        u = _linear_index(data, theta) - data.response
        return -self.tau * u + 0.5 * (u + np.sqrt(self.eps**2 + u * u))

    def moment(self, data, theta):
        theta = self.check_theta(data, theta)
        u = _linear_index(data, theta) - data.response
        w = 0.5 * (1.0 + u / np.sqrt(self.eps**2 + u * u)) - self.tau
        return w[..., None] * data.features

    def hessian(self, data, theta):
        theta = self.check_theta(data, theta)
        u = _linear_index(data, theta) - data.response
        s = np.sqrt(self.eps**2 + u * u)
        w = 0.5 * self.eps**2 / s**3
        x = data.features
        return (x * w[:, None]).T @ x / data.n


@dataclass(frozen=True, eq=False)
class HingeSVM(LossModel):
    """Soft-margin SVM loss ``lam |theta|^2 / 2 + max(0, 1 - y theta^T x)``."""

    lam: float = 0.1
    name: str = field(init=False, default="hinge")
    smooth: bool = field(init=False, default=False)
    requires: str | None = field(init=False, default="labels")

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")

    def params(self):
        return {"lam": self.lam}

    def loss(self, data, theta):
        theta = self.check_theta(data, theta)
        m = data.labels * _linear_index(data, theta)
        reg = 0.5 * self.lam * np.sum(theta * theta, axis=-1)
        return reg[..., None] + np.maximum(0.0, 1.0 - m)

    def moment(self, data, theta):
        theta = self.check_theta(data, theta)
        m = data.labels * _linear_index(data, theta)
        # margin ties take the active branch
        w = data.labels * (m <= 1.0)
        return self.lam * theta[..., None, :] - w[..., None] * data.features

    def smoothed(self, eps):
        return SmoothedHingeSVM(self.lam, eps)


@dataclass(frozen=True, eq=False)
class SmoothedHingeSVM(LossModel):
    """SVM with smoothed hinge ``(u + sqrt(u^2 + eps^2)) / 2``, ``u = 1 - y theta^T x``."""

    lam: float = 0.1
    eps: float = 0.5
    name: str = field(init=False, default="smoothed_hinge")
    requires: str | None = field(init=False, default="labels")

    def __post_init__(self):
        if not (self.lam > 0 and self.eps > 0):
            raise ValueError("lam and eps must be positive")

    def params(self):
        return {"lam": self.lam, "eps": self.eps}

    def loss(self, data, theta):
        theta = self.check_theta(data, theta)
        u = 1.0 - data.labels * _linear_index(data, theta)
        reg = 0.5 * self.lam * np.sum(theta * theta, axis=-1)
        return reg[..., None] + 0.5 * (np.sqrt(u * u + self.eps**2) + u)

    def moment(self, data, theta):
        theta = self.check_theta(data, theta)
        u = 1.0 - data.labels * _linear_index(data, theta)
        w = 0.5 * (1.0 + u / np.sqrt(u * u + self.eps**2)) * data.labels
        return self.lam * theta[..., None, :] - w[..., None] * data.features

    def hessian(self, data, theta):
        theta = self.check_theta(data, theta)
        u = 1.0 - data.labels * _linear_index(data, theta)
        s = np.sqrt(u * u + self.eps**2)
        w = 0.5 * self.eps**2 / s**3
        x = data.features
        return self.lam * np.eye(data.p) + (x * w[:, None]).T @ x / data.n


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True, eq=False)
class HuberSigmoid(LossModel):
    """Huber loss on the residual of a scaled sigmoid unit.

    The mean function is ``theta_3 * S(theta_1 x_1 + theta_2 x_2)`` with
    ``S`` the logistic sigmoid; the parameter has three coordinates.
    """

    delta: float = 2.0
    name: str = field(init=False, default="huber_sigmoid")
    requires: str | None = field(init=False, default="response")

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")

    def dim(self, data):
        return 3

    def params(self):
        return {"delta": self.delta}

    def validate(self, data):
        super().validate(data)
        if data.p != 2:
            raise DataError("huber_sigmoid needs exactly two feature columns")

    def _residual(self, data, theta):
        x = data.features
        z = theta[..., 0, None] * x[:, 0] + theta[..., 1, None] * x[:, 1]
        s = _sigmoid(z)
        return data.response - theta[..., 2, None] * s, s

    def loss(self, data, theta):
        theta = self.check_theta(data, theta)
        r, _ = self._residual(data, theta)
        a = np.abs(r)
        # the kink |r| = delta takes the quadratic branch
        return np.where(a <= self.delta, 0.5 * r * r, self.delta * a - 0.5 * self.delta**2)

    def moment(self, data, theta):
        theta = self.check_theta(data, theta)
        r, s = self._residual(data, theta)
        psi = np.where(np.abs(r) <= self.delta, r, self.delta * np.sign(r))
        ds = theta[..., 2, None] * s * (1.0 - s)
        x = data.features
        return -psi[..., None] * np.stack([ds * x[:, 0], ds * x[:, 1], s], axis=-1)


def cubic_link(t):
    """The mean function ``0.1 t^3 - 0.2 t^2 - 0.2 t``."""
    return 0.1 * t**3 - 0.2 * t**2 - 0.2 * t


def _cubic_link_deriv(t):
    return 0.3 * t**2 - 0.4 * t - 0.2


@dataclass(frozen=True, eq=False)
class CubicRegression(LossModel):
    """Squared error ``(y - f(theta x))^2`` for the cubic link ``f``.

    The empirical risk has three stationary points near -0.7, 0.1 and 1.
    """

    name: str = field(init=False, default="cubic_regression")
    requires: str | None = field(init=False, default="response")

    def dim(self, data):
        return 1

    def validate(self, data):
        super().validate(data)
        if data.p != 1:
            raise DataError("cubic_regression needs exactly one feature column")

    def loss(self, data, theta):
        theta = self.check_theta(data, theta)
        t = theta[..., 0, None] * data.features[:, 0]
        r = data.response - cubic_link(t)
        return r * r

    def moment(self, data, theta):
        theta = self.check_theta(data, theta)
        x = data.features[:, 0]
        t = theta[..., 0, None] * x
        r = data.response - cubic_link(t)
        return (-2.0 * r * _cubic_link_deriv(t) * x)[..., None]


# constructors --------------------------------------------------------------


def squared_loss() -> SquaredLoss:
    return SquaredLoss()


def check_loss(tau: float = 0.5) -> CheckLoss:
    return CheckLoss(tau)


def hinge_svm(lam: float = 0.1) -> HingeSVM:
    return HingeSVM(lam)


def smoothed_hinge_svm(lam: float = 0.1, eps: float = 0.5) -> SmoothedHingeSVM:
    return SmoothedHingeSVM(lam, eps)


def huber_sigmoid(delta: float = 2.0) -> HuberSigmoid:
    return HuberSigmoid(delta)


def cubic_regression() -> CubicRegression:
    return CubicRegression()


LOSSES = {
    "squared": squared_loss,
    "check": check_loss,
    "hinge": hinge_svm,
    "smoothed_hinge": smoothed_hinge_svm,
    "huber_sigmoid": huber_sigmoid,
    "cubic_regression": cubic_regression,
}


def make_loss(name: str, **params) -> LossModel:
    """Build a loss model from its config name and hyperparameters."""
    try:
        ctor = LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None
    return ctor(**params)


# risk evaluation -----------------------------------------------------------


def empirical_risk(model: LossModel, data: Dataset, theta) -> float:
    """Mean loss over the observations, with compensated summation.

    Raises
    ------
    DimensionError
        If ``theta`` does not have length ``model.dim(data)``.
    NonFiniteLoss
        If any per-observation loss is not finite.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise DimensionError("theta must be a vector")
    if not np.all(np.isfinite(theta)):
        raise DimensionError("theta must be finite")
    model.validate(data)
    with np.errstate(over="ignore", invalid="ignore"):
        losses = model.loss(data, theta)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteLoss(f"{model.name}: non-finite loss at theta={theta.tolist()}")
    return math.fsum(losses.tolist()) / data.n


def moment_matrix(model: LossModel, data: Dataset, theta) -> np.ndarray:
    """The ``n x d`` matrix whose row ``i`` is ``g(X_i, theta)``."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise DimensionError("theta must be a vector")
    model.validate(data)
    return model.moment(data, theta)


def batch_risk(model: LossModel, data: Dataset, thetas, weights=None) -> np.ndarray:
    """Risks for a batch of parameters ``(B, d)``, optionally row-weighted ``(B, n)``."""
    losses = model.loss(data, thetas)
    if weights is None:
        return losses.mean(axis=-1)
    return np.sum(losses * weights, axis=-1) / np.sum(weights, axis=-1)
