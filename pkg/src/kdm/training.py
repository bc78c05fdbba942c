"""Parameter estimation for KDMs.

Three objectives share one parameterisation (components, weight logits
through a softmax, kernel bandwidths through ``log sigma``):

* ``"mle"``  -- mean negative log density of the training rows;
* ``"xent"`` -- cross-entropy between the inferred class PMF and a target
  distribution (one-hot labels or bag label proportions);
* ``"mse"``  -- squared error of the inferred mixture mean.

Gradients are analytic; :func:`objective_gradients` is the single entry
point used by the optimisers and by the finite-difference tests.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.spatial.distance import pdist

from kdm import _backend, kernels
from kdm.density import LOG_EPS, JointKDM, KernelDensityMatrix
from kdm.errors import (EmptyDataset, LabelShapeMismatch, NonFiniteLoss,
                        ShapeMismatch, WrongKernelKind)
from kdm.inference import responsibilities
from kdm.rng import RngState

PMF_EPS = 1e-12
OPTIMIZERS = ("adam", "sgd")
LOSSES = ("cross-entropy", "mse")


@dataclass
class TrainConfig:
    num_components: int = 32
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    # "median-heuristic", "kernel" (keep the given KernelSpec sigmas) or a float
    sigma_init: object = "median-heuristic"
    sigma_min: float = kernels.SIGMA_MIN
    train_y_components: bool = True
    train_sigma: bool = True
    # return the parameters with the best objective seen (held-out one if given)
    keep_best: bool = True

    def __post_init__(self):
        if self.optimizer == "adaptive-moment":
            self.optimizer = "adam"
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        for name in ("num_components", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if int(self.epochs) < 0:
            raise ValueError("epochs must be nonnegative")
        if not self.learning_rate > 0 or not self.sigma_min > 0:
            raise ValueError("learning_rate and sigma_min must be positive")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValueError("seed must be an unsigned 64-bit integer")
        if isinstance(self.sigma_init, str):
            if self.sigma_init not in ("median-heuristic", "kernel"):
                raise ValueError(f"bad sigma_init {self.sigma_init!r}")
        elif not float(self.sigma_init) > 0:
            raise ValueError("explicit sigma_init must be positive")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**obj)


@dataclass
class LabeledDataset:
    X: np.ndarray
    Y: np.ndarray
    feature_names: list = field(default_factory=list)
    numeric_columns: list = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ShapeMismatch(f"X {self.X.shape} and Y {self.Y.shape} row counts differ")

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx):
        return replace(self, X=self.X[idx], Y=self.Y[idx])


@dataclass
class BagDataset:
    bags: list
    proportions: np.ndarray

    def __post_init__(self):
        self.bags = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in self.bags]
        self.proportions = np.asarray(self.proportions, dtype=np.float64)
        if len(self.bags) != self.proportions.shape[0]:
            raise ShapeMismatch("one proportion row per bag required")
        if any(b.shape[0] == 0 for b in self.bags):
            raise EmptyDataset("empty bag")
        if not np.allclose(self.proportions.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise LabelShapeMismatch("proportion rows must sum to 1")

    def __len__(self):
        return len(self.bags)


def loss_xent(pi, y):
    """``-sum_j y_j log(clamp(pi_j, PMF_EPS, 1))`` for one prediction."""
    pi = np.asarray(pi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if pi.shape != y.shape or pi.ndim != 1:
        raise ShapeMismatch(f"pi {pi.shape} vs y {y.shape}")
    for v in (pi, y):
        if np.any(v < -1e-6) or abs(v.sum() - 1.0) > 1e-6:
            raise LabelShapeMismatch("loss_xent arguments must lie on the simplex")
    return float(-np.sum(y * np.log(np.clip(pi, PMF_EPS, 1.0))))


def loss_mse(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeMismatch(f"y_hat {y_hat.shape} vs y {y.shape}")
    return float(np.mean((y_hat - y) ** 2))


# ---------------------------------------------------------------- parameters


@dataclass
class ModelParams:
    """Trainable state. Kernels act as templates (kind, dim, sigma_min)."""

    x_components: np.ndarray
    y_components: np.ndarray | None
    logits: np.ndarray
    log_sigma_x: float | None
    log_sigma_y: float | None
    x_kernel: kernels.KernelSpec
    y_kernel: kernels.KernelSpec | None = None

    def weights(self):
        return _softmax(self.logits)

    def kernel_specs(self):
        kx = self.x_kernel
        if kx.kind == "rbf":
            kx = kx.with_sigma(math.exp(self.log_sigma_x))
        ky = self.y_kernel
        if ky is not None and ky.kind == "rbf":
            ky = ky.with_sigma(math.exp(self.log_sigma_y))
        return kx, ky

    def to_model(self):
        kx, ky = self.kernel_specs()
        if self.y_kernel is None:
            return KernelDensityMatrix(self.x_components, self.weights(), kx)
        return JointKDM(self.x_components, self.y_components, self.weights(), kx, ky)

    @classmethod
    def from_model(cls, model):
        def ls(k):
            return math.log(k.sigma) if k is not None and k.kind == "rbf" else None

        p = np.asarray(model.weights, dtype=np.float64)
        with np.errstate(divide="ignore"):
            logits = np.log(p)
        logits = np.where(np.isfinite(logits), logits, -745.0)
        if isinstance(model, JointKDM):
            return cls(np.array(model.x_components), np.array(model.y_components), logits,
                       ls(model.x_kernel), ls(model.y_kernel), model.x_kernel, model.y_kernel)
        return cls(np.array(model.components), None, logits, ls(model.kernel), None, model.kernel)

    def copy(self):
        return replace(self, x_components=self.x_components.copy(),
                       y_components=None if self.y_components is None else self.y_components.copy(),
                       logits=self.logits.copy())


@dataclass
class Gradients:
    x_components: np.ndarray
    y_components: np.ndarray | None
    logits: np.ndarray
    log_sigma_x: float | None
    log_sigma_y: float | None


_SLOTS = ("x_components", "y_components", "logits", "log_sigma_x", "log_sigma_y")


def pack(obj):
    """Flatten params or gradients (``None`` slots skipped) into one vector."""
    parts = []
    for name in _SLOTS:
        v = getattr(obj, name)
        if v is not None:
            parts.append(np.atleast_1d(np.asarray(v, dtype=np.float64)).ravel())
    return np.concatenate(parts)


def unpack(vec, template):
    """Inverse of :func:`pack` shaped like ``template`` (a ModelParams)."""
    vec = np.asarray(vec, dtype=np.float64)
    out = template.copy()
    pos = 0
    for name in _SLOTS:
        v = getattr(template, name)
        if v is None:
            continue
        if np.ndim(v) == 0:
            setattr(out, name, float(vec[pos]))
            pos += 1
        else:
            size = np.size(v)
            setattr(out, name, vec[pos:pos + size].reshape(np.shape(v)).copy())
            pos += size
    return out


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


# ------------------------------------------------------------------ batches


@dataclass
class DensityBatch:
    X: np.ndarray
    Y: np.ndarray | None = None


@dataclass
class BagBatch:
    """Input KDMs laid out contiguously: bag ``b`` owns rows ``starts[b]:starts[b+1]``."""

    X: np.ndarray
    weights: np.ndarray
    starts: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_bags(cls, bags, targets):
        sizes = np.array([b.shape[0] for b in bags])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        X = np.ascontiguousarray(np.vstack(bags))
        w = np.repeat(1.0 / sizes, sizes)
        return cls(X, w, starts, np.asarray(targets, dtype=np.float64))

    @classmethod
    def from_points(cls, X, targets):
        X = np.ascontiguousarray(X, dtype=np.float64)
        n = X.shape[0]
        return cls(X, np.ones(n), np.arange(n, dtype=np.int64), np.asarray(targets, dtype=np.float64))

    @property
    def n_bags(self):
        return self.starts.shape[0]


# -------------------------------------------------------- kernel blocks


def _sigma(kernel, log_sigma):
    s = math.exp(log_sigma)
    return max(s, kernel.sigma_min), s < kernel.sigma_min


class _Block:
    """Squared-kernel block between data rows and components, with the
    intermediates needed to pull gradients back to the components."""

    def __init__(self, kernel, log_sigma, X, C):
        self.kind = kernel.kind
        self.X = X
        self.C = np.ascontiguousarray(C)
        if self.kind == "rbf":
            self.sigma, self.floored = _sigma(kernel, log_sigma)
            self.K, self.D2 = _backend.impl.rbf_gram_sq(X, self.C, self.sigma, True)
        elif self.kind == "cosine":
            kernels.check_nonzero(self.C)
            self.K = _backend.impl.cos_gram_sq(X, self.C)
            self.dots = X @ self.C.T
            self.a = (X * X).sum(axis=1)
            self.b = (self.C * self.C).sum(axis=1)
        else:
            raise WrongKernelKind(f"training supports rbf and cosine kernels, not {self.kind}")

    def backward(self, G):
        """Given ``G = dL/dK``, return ``(dL/dC, dL/dlog_sigma or None)``."""
        if self.kind == "rbf":
            H = G * self.K
            c = 2.0 / (self.sigma * self.sigma)
            gC = c * (H.T @ self.X - H.sum(axis=0)[:, None] * self.C)
            gls = 0.0 if self.floored else c * float((H * self.D2).sum())
            return gC, gls
        H = G * (2.0 * self.dots / (self.a[:, None] * self.b[None, :]))
        gC = H.T @ self.X - ((H * self.dots).sum(axis=0) / self.b)[:, None] * self.C
        return gC, None


def _dlog_norm(block):
    # d log M / d log sigma for an rbf block: M = (sqrt(pi) sigma)^-n
    return 0.0 if block.floored else -float(block.C.shape[1])


# --------------------------------------------------------------- objectives


def objective_gradients(params, batch, loss):
    """Objective value and analytic gradient bundle.

    ``loss`` is ``"mle"`` (with a :class:`DensityBatch`), ``"xent"`` or
    ``"mse"`` (with a :class:`BagBatch`). All objectives are means over the
    batch rows / bags and are minimised.
    """
    if loss == "mle":
        value, g = _mle(params, batch)
    elif loss in ("xent", "mse"):
        value, g = _discriminative(params, batch, loss)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, g


def _mle(params, batch):
    X = np.ascontiguousarray(batch.X, dtype=np.float64)
    N = X.shape[0]
    p = params.weights()
    bx = _Block(params.x_kernel, params.log_sigma_x, X, params.x_components)
    Kx = bx.K
    log_m = 0.0
    if bx.kind == "rbf":
        log_m += -bx.C.shape[1] * (0.5 * math.log(math.pi) + math.log(bx.sigma))
    by = None
    if params.y_kernel is not None:
        Y = np.ascontiguousarray(batch.Y, dtype=np.float64)
        by = _Block(params.y_kernel, params.log_sigma_y, Y, params.y_components)
        if by.kind == "rbf":
            log_m += -by.C.shape[1] * (0.5 * math.log(math.pi) + math.log(by.sigma))
        Kxy = Kx * by.K
    else:
        Kxy = Kx
    M = math.exp(log_m)
    f = Kxy @ p
    dens = M * f + LOG_EPS
    value = -float(np.mean(np.log(dens)))

    g_f = -(M / dens) / N
    g_logm = -float(np.sum(M * f / dens)) / N
    g_p = Kxy.T @ g_f
    G = g_f[:, None] * p[None, :]
    gxc, gls_x = bx.backward(G * (by.K if by is not None else 1.0))
    if bx.kind == "rbf":
        gls_x += g_logm * _dlog_norm(bx)
    gyc = gls_y = None
    if by is not None:
        gyc, gls_y = by.backward(G * Kx)
        if by.kind == "rbf":
            gls_y += g_logm * _dlog_norm(by)
    g_logits = p * (g_p - float(p @ g_p))
    return value, Gradients(gxc, gyc, g_logits, gls_x, gls_y)


def _discriminative(params, batch, loss):
    X = np.ascontiguousarray(batch.X, dtype=np.float64)
    p = params.weights()
    bx = _Block(params.x_kernel, params.log_sigma_x, X, params.x_components)
    R, denom, dead = responsibilities(bx.K, p)
    wR = batch.weights[:, None] * R
    P2 = np.add.reduceat(wR, batch.starts, axis=0)
    B = batch.n_bags
    T = batch.targets
    Yc = params.y_components

    if loss == "xent":
        if params.y_kernel is None or params.y_kernel.kind != "cosine":
            raise WrongKernelKind("cross-entropy needs a cosine y kernel")
        s = (Yc * Yc).sum(axis=1)
        Q = (Yc * Yc) / s[:, None]
        pi = P2 @ Q
        live = pi > PMF_EPS
        pic = np.where(live, pi, PMF_EPS)
        value = -float(np.sum(T * np.log(np.minimum(pic, 1.0)))) / B
        g_pi = np.where(live & (pi < 1.0), -T / pic, 0.0) / B
        g_P2 = g_pi @ Q.T
        g_Q = P2.T @ g_pi
        g_yc = (2.0 * Yc / s[:, None]) * (g_Q - (g_Q * Q).sum(axis=1, keepdims=True))
    else:
        if params.y_kernel is None or params.y_kernel.kind != "rbf":
            raise WrongKernelKind("mse needs an rbf y kernel")
        yhat = P2 @ Yc
        diff = yhat - T
        ny = T.shape[1]
        value = float(np.sum(diff * diff)) / (B * ny)
        g_yhat = 2.0 * diff / (B * ny)
        g_P2 = g_yhat @ Yc.T
        g_yc = P2.T @ g_yhat

    seg = np.repeat(np.arange(B), np.diff(np.append(batch.starts, X.shape[0])))
    g_R = batch.weights[:, None] * g_P2[seg]
    g_p = np.zeros_like(p)
    live_rows = ~dead
    g_A = np.zeros_like(R)
    if live_rows.any():
        gr = g_R[live_rows]
        r = R[live_rows]
        g_A[live_rows] = (gr - (gr * r).sum(axis=1, keepdims=True)) / denom[live_rows][:, None]
    if dead.any():
        g_p += g_R[dead].sum(axis=0)
    g_K = g_A * p[None, :]
    g_p += (g_A * bx.K).sum(axis=0)
    gxc, gls_x = bx.backward(g_K)
    g_logits = p * (g_p - float(p @ g_p))
    gls_y = 0.0 if params.log_sigma_y is not None else None
    return value, Gradients(gxc, g_yc, g_logits, gls_x, gls_y)


# --------------------------------------------------------------- optimisers


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad


def make_optimizer(cfg):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate)
    return SGD(cfg.learning_rate)


# ------------------------------------------------------------ initialisation


def median_heuristic(X, rng, max_rows=1000, floor=kernels.SIGMA_MIN):
    """Median pairwise distance of (at most ``max_rows``) rows, over sqrt(2)."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] > max_rows:
        X = X[np.sort(rng.choice(X.shape[0], max_rows))]
    if X.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return max(med / math.sqrt(2.0), floor)


def _init_sigma(kernel, data, cfg, rng, explicit_ok):
    if kernel is None or kernel.kind != "rbf":
        return None
    if cfg.sigma_init == "kernel":
        s = kernel.sigma
    elif cfg.sigma_init == "median-heuristic":
        s = median_heuristic(data, rng, floor=cfg.sigma_min)
    else:
        s = float(cfg.sigma_init) if explicit_ok else kernel.sigma
    return math.log(max(s, cfg.sigma_min))


def _template(kernel, cfg):
    if kernel is None:
        return None
    if kernel.kind == "rbf":
        return kernel.with_sigma(kernel.sigma) if kernel.sigma_min == cfg.sigma_min else \
            kernels.rbf(kernel.dim, kernel.sigma, cfg.sigma_min)
    return kernel


def _sample_rows(n_rows, m, rng):
    # without replacement when possible: duplicates create flat directions
    return rng.choice(n_rows, m, replace=m > n_rows)


# ------------------------------------------------------------------ fitting


def fit_nonparametric(X, k):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise EmptyDataset("need at least one row")
    return KernelDensityMatrix(X, np.full(X.shape[0], 1.0 / X.shape[0]), k)


def fit_mle(data, kx, ky=None, cfg=None, log=None, validation=None):
    """Maximum-likelihood KDM (``ky is None``) or joint KDM.

    Components start at a random sample of the data, weights uniform.
    ``validation`` (same type as ``data``) switches ``keep_best`` to the
    held-out objective.
    """
    cfg = cfg or TrainConfig()
    if isinstance(data, LabeledDataset):
        X, Y = data.X, data.Y
    else:
        X, Y = np.asarray(data, dtype=np.float64), None
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDataset("fit_mle needs a nonempty 2-D dataset")
    if ky is not None and Y is None:
        raise ShapeMismatch("a y kernel needs a labeled dataset")
    if ky is None:
        Y = None
    X = np.ascontiguousarray(X)
    rng = RngState(cfg.seed)
    idx = _sample_rows(X.shape[0], int(cfg.num_components), rng)
    lsx = _init_sigma(kx, X, cfg, rng, True)
    lsy = _init_sigma(ky, Y, cfg, rng, False) if ky is not None else None
    params = ModelParams(X[idx].copy(), None if Y is None else np.asarray(Y)[idx].copy(),
                         np.zeros(len(idx)), lsx, lsy, _template(kx, cfg), _template(ky, cfg))

    def batches(order):
        for s in range(0, len(order), cfg.batch_size):
            sel = order[s:s + cfg.batch_size]
            yield DensityBatch(X[sel], None if Y is None else Y[sel])

    full = DensityBatch(X, Y)
    select = None
    if validation is not None:
        if isinstance(validation, LabeledDataset):
            held = DensityBatch(validation.X, validation.Y if ky is not None else None)
        else:
            held = DensityBatch(np.asarray(validation, dtype=np.float64), None)
        select = lambda p: _full_value(p, held, "mle")  # noqa: E731
    params = _optimise(params, "mle", X.shape[0], batches, lambda p: _full_value(p, full, "mle"),
                       cfg, rng, log, select)
    return params.to_model()


def fit_discriminative(D, kx, ky, loss="cross-entropy", cfg=None, log=None, validation=None):
    """Joint KDM trained through the inference map on point inputs."""
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}")
    if len(D) == 0:
        raise EmptyDataset("empty training set")
    if loss == "cross-entropy":
        if ky.kind != "cosine":
            raise WrongKernelKind("cross-entropy needs a cosine y kernel")
        _check_simplex_rows(D.Y)
    elif ky.kind != "rbf":
        raise WrongKernelKind("mse needs an rbf y kernel")
    bags = [row[None, :] for row in np.asarray(D.X, dtype=np.float64)]
    held = None
    if validation is not None:
        held = BagBatch.from_points(validation.X, validation.Y)
    return _fit_bags(bags, D.Y, kx, ky, "xent" if loss == "cross-entropy" else "mse", cfg, log,
                     held)


def fit_llp(B, kx, ky, cfg=None, log=None, validation=None):
    """Joint KDM trained on bags with label proportions.

    Each bag enters as a uniform-weight input KDM; the loss is the
    cross-entropy between the inferred class PMF and the bag's proportions.
    ``validation`` is an optional held-out :class:`BagDataset` used to pick
    the kept epoch.
    """
    if len(B) == 0:
        raise EmptyDataset("no bags")
    if ky.kind != "cosine":
        raise WrongKernelKind("label proportions need a cosine y kernel")
    _check_simplex_rows(B.proportions)
    held = None
    if validation is not None:
        held = BagBatch.from_bags(validation.bags, validation.proportions)
    return _fit_bags(B.bags, B.proportions, kx, ky, "xent", cfg, log, held)


def _check_simplex_rows(Y):
    Y = np.asarray(Y)
    if Y.ndim != 2 or np.any(Y < -1e-6) or not np.allclose(Y.sum(axis=1), 1.0, atol=1e-6):
        raise LabelShapeMismatch("targets must be rows on the probability simplex")


def _fit_bags(bags, targets, kx, ky, loss, cfg, log, held=None):
    cfg = cfg or TrainConfig()
    rng = RngState(cfg.seed)
    n_bags = len(bags)
    full = BagBatch.from_bags(bags, targets)
    n_inst = full.X.shape[0]
    if full.X.shape[1] != kx.dim or full.targets.shape[1] != ky.dim:
        raise ShapeMismatch("data dims do not match kernel dims")
    owner = np.repeat(np.arange(n_bags), [b.shape[0] for b in bags])
    idx = _sample_rows(n_inst, int(cfg.num_components), rng)
    xc = full.X[idx].copy()
    tgt = full.targets[owner[idx]]
    yc = np.sqrt(np.maximum(tgt, 0.0)) if loss == "xent" else tgt.copy()
    lsx = _init_sigma(kx, full.X, cfg, rng, True)
    lsy = _init_sigma(ky, full.targets, cfg, rng, False) if ky.kind == "rbf" else None
    params = ModelParams(xc, yc, np.zeros(len(idx)), lsx, lsy, _template(kx, cfg), _template(ky, cfg))

    singletons = n_inst == n_bags

    def batches(order):
        for s in range(0, len(order), cfg.batch_size):
            sel = order[s:s + cfg.batch_size]
            if singletons:
                yield BagBatch.from_points(full.X[sel], full.targets[sel])
            else:
                yield BagBatch.from_bags([bags[i] for i in sel], full.targets[sel])

    select = None if held is None else (lambda p: _full_value(p, held, loss))
    params = _optimise(params, loss, n_bags, batches, lambda p: _full_value(p, full, loss),
                       cfg, rng, log, select)
    return params.to_model()


_CHUNK_ROWS = 4096


def _full_value(params, batch, loss):
    """Objective over the whole training set, evaluated in chunks."""
    if loss == "mle":
        n = batch.X.shape[0]
        total = 0.0
        for s in range(0, n, _CHUNK_ROWS):
            sub = DensityBatch(batch.X[s:s + _CHUNK_ROWS],
                               None if batch.Y is None else batch.Y[s:s + _CHUNK_ROWS])
            v, _ = objective_gradients(params, sub, "mle")
            total += v * sub.X.shape[0]
        return total / n
    n = batch.n_bags
    ends = np.append(batch.starts, batch.X.shape[0])
    total = 0.0
    s = 0
    while s < n:
        e = s + 1
        while e < n and ends[e + 1] - ends[s] <= _CHUNK_ROWS:
            e += 1
        lo, hi = ends[s], ends[e]
        sub = BagBatch(batch.X[lo:hi], batch.weights[lo:hi], batch.starts[s:e] - lo,
                       batch.targets[s:e])
        v, _ = objective_gradients(params, sub, loss)
        total += v * (e - s)
        s = e
    return total / n


def _optimise(params, loss, n_items, batches, full_value, cfg, rng, log, select_value=None):
    """Optimiser loop. With ``select_value`` (a held-out objective) the
    parameters kept by ``keep_best`` are chosen on it instead of the
    training objective."""
    opt = make_optimizer(cfg)
    floor = math.log(cfg.sigma_min)
    t0 = time.perf_counter()

    def evaluate(p, epoch):
        value = full_value(p)
        _check_finite(value, epoch, None)
        rec = {"epoch": epoch, "objective": value}
        score = value
        if select_value is not None:
            score = select_value(p)
            _check_finite(score, epoch, None)
            rec["validation"] = score
        rec["wall_time"] = time.perf_counter() - t0
        if log is not None:
            log(rec)
        return score

    best_score = evaluate(params, 0)
    best = params
    theta = pack(params)
    for epoch in range(1, int(cfg.epochs) + 1):
        order = rng.permutation(n_items)
        for step, batch in enumerate(batches(order)):
            value, grads = objective_gradients(params, batch, loss)
            _check_finite(value, epoch, step)
            if not cfg.train_y_components and grads.y_components is not None:
                grads.y_components = np.zeros_like(grads.y_components)
            if not cfg.train_sigma:
                grads.log_sigma_x = None if grads.log_sigma_x is None else 0.0
                grads.log_sigma_y = None if grads.log_sigma_y is None else 0.0
            theta = opt.step(theta, pack(grads))
            params = unpack(theta, params)
            clamped = False
            for name in ("log_sigma_x", "log_sigma_y"):
                v = getattr(params, name)
                if v is not None and v < floor:
                    setattr(params, name, floor)
                    clamped = True
            if clamped:
                theta = pack(params)
        score = evaluate(params, epoch)
        if not cfg.keep_best or score <= best_score:
            best_score = score
            best = params
    return best


def _check_finite(value, epoch, step):
    if not math.isfinite(value):
        raise NonFiniteLoss(f"objective became {value} at epoch {epoch}",
                            {"epoch": epoch, "step": step, "value": value})
