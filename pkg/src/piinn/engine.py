"""Training (physics-informed INN loop) and inversion (fit c, sample the fiber)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .flow import FlowError, inn_forward, inn_inverse, log_q_joint, std_normal_logpdf
from .losses import DEFAULT_ROLES, LossWeights, term_weight, total_loss
from .networks import assemble_basis


class TrainingError(RuntimeError):
    pass


class InversionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam:
    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, theta, grad, lr):
        """In-place update of ``theta``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * grad * grad
        mhat = self.m / (1.0 - b1 ** self.t)
        vhat = self.v / (1.0 - b2 ** self.t)
        theta -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    """Either ``epochs`` (full passes) or ``steps`` (minibatch updates).

    ``milestones`` are counted in the same unit; with ``decay_every`` set,
    the rate decays at every multiple instead.
    """

    epochs: int | None = 100
    steps: int | None = None
    batch_size: int = 64
    lr: float = 1e-3
    milestones: tuple = ()
    decay_every: int | None = None
    decay: float = 0.8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if (self.epochs is None) == (self.steps is None):
            raise ValueError("set exactly one of epochs or steps")

    def lr_at(self, unit):
        """Learning rate after ``unit`` completed epochs or steps."""
        if self.decay_every:
            k = unit // self.decay_every
        else:
            k = sum(unit >= m for m in self.milestones)
        return self.lr * self.decay ** k


@dataclass
class TrainResult:
    history: list
    final_params: np.ndarray
    n_steps: int


def _minibatches(rng, n, batch):
    perm = rng.permutation(n)
    for k in range(0, n - batch + 1, batch):
        yield perm[k:k + batch]
    rest = n % batch
    if rest >= 2:
        yield perm[n - rest:]


def train(model, basis, prior, loss_spec, config: TrainConfig, data, callback=None):
    """Minibatch Adam on the total loss; returns per-epoch loss history.

    ``loss_spec.terms(w, batch, z, rng, skip)`` returns a dict of tape scalars for
    one minibatch, where ``batch`` is a dict of row-aligned arrays from
    ``data`` (``data['lam']`` is required) and ``w`` the bound weights.
    ``loss_spec.roles`` maps term names to weight attributes.  Names of
    zero-weight terms are passed as ``skip`` so the spec can leave them out;
    an untrained term may not even be finite.
    """
    if prior.dim != model.F:
        raise ValueError("prior dimension %d != model dimension %d" % (prior.dim, model.F))
    if basis is not None and basis.P != model.P:
        raise ValueError("basis has %d outputs, model expects P=%d" % (basis.P, model.P))
    params = model.params.freeze()
    n = len(data["lam"])
    rng = np.random.default_rng(config.seed)
    opt = Adam(params.size)
    history = []
    step = 0
    epoch = 0
    roles = getattr(loss_spec, "roles", None)
    skip = frozenset(k for k in (roles or DEFAULT_ROLES) if term_weight(k, config.weights, roles) == 0)
    steps_per_epoch = max(1, n // config.batch_size + (1 if n % config.batch_size >= 2 else 0))
    total_epochs = config.epochs if config.epochs is not None else math.ceil(config.steps / steps_per_epoch)
    while epoch < total_epochs:
        sums = {}
        count = 0
        lr_epoch = config.lr_at(epoch) if config.epochs is not None else None
        for idx in _minibatches(rng, n, config.batch_size):
            if config.steps is not None and step >= config.steps:
                break
            lr = lr_epoch if lr_epoch is not None else config.lr_at(step)
            batch = {k: v[idx] for k, v in data.items()}
            z = rng.standard_normal((len(idx), model.ndim_z))
            tape = ad.Tape()
            w = params.bind(tape)
            terms = loss_spec.terms(w, batch, z, rng, skip=skip)
            vals = {k: float(ad.value(v)) for k, v in terms.items()}
            bad = [k for k, v in vals.items() if not np.isfinite(v)]
            if bad:
                raise TrainingError("non-finite loss at epoch %d (step %d): %s"
                                    % (epoch, step, vals))
            L = total_loss(terms, config.weights, roles)
            grads = ad.backward(tape, L)
            g = params.flat_grad(grads, w)
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient at epoch %d (step %d): %s"
                                    % (epoch, step, vals))
            opt.step(params.flat, g, lr)
            vals["total"] = float(ad.value(L))
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
            step += 1
        if count == 0:
            break
        rec = {"epoch": epoch, "lr": lr}
        rec.update({k: v / count for k, v in sums.items()})
        history.append(rec)
        if callback is not None:
            callback(rec)
        epoch += 1
    return TrainResult(history, params.flat.copy(), step)


# ---------------------------------------------------------------------------
# inversion


def latent_draws(model, S=16, seed=0):
    return np.random.default_rng(seed).standard_normal((S, model.ndim_z))


def log_marginal_c(model, prior, c, z_draws=None, S=16, seed=0, w=None):
    """Average of log q(c, z_s) - log p(z_s) over fixed latent draws."""
    z = latent_draws(model, S, seed) if z_draws is None else np.atleast_2d(z_draws)
    c2 = c if np.ndim(ad.value(c)) == 2 else ad.reshape(c, (1, model.P))
    lq = log_q_joint(model, prior, c2, z, w)
    val = np.asarray(ad.value(lq))
    if not np.all(np.isfinite(val)):
        raise InversionError("log q(c, z) is not finite for latent draw %d"
                             % int(np.argmax(~np.isfinite(val))))
    return ad.mean(lq - std_normal_logpdf(z))


@dataclass
class FitResult:
    c: np.ndarray
    c_ols: np.ndarray
    residual: float
    objective: list
    ridge: float = 0.0


def fit_coefficients(basis, sensors, u_obs, model=None, prior=None, rho=1e-3, steps=2000,
                     lr=1e-2, lr_final=1e-5, scale=None, S=16, seed=0, w=None):
    """Minimize |u - Phi c|^2 - rho log p(c), warm-started at least squares.

    ``scale`` multiplies each sensor row of Phi (an observation operator that
    is a known pointwise factor times u).
    """
    Phi = np.asarray(assemble_basis(basis, sensors, w), dtype=np.float64)
    if scale is not None:
        Phi = Phi * np.asarray(scale, dtype=np.float64).reshape(-1, 1)
    u = np.asarray(u_obs, dtype=np.float64).reshape(-1)
    if len(u) != Phi.shape[0] or len(u) < 1:
        raise ValueError("need one observation per sensor")
    rank = np.linalg.matrix_rank(Phi)
    c_ols = np.linalg.lstsq(Phi, u, rcond=None)[0]
    if rho == 0:
        if rank < Phi.shape[1]:
            raise InversionError("basis matrix is rank deficient (rank %d < P=%d); use rho > 0"
                                 % (rank, Phi.shape[1]))
        return FitResult(c_ols, c_ols, float(np.linalg.norm(u - Phi @ c_ols)), [])
    if model is None or prior is None:
        raise ValueError("rho > 0 needs the model and prior for log p(c)")
    z = latent_draws(model, S, seed)
    wnp = model.params.arrays() if w is None else w
    c, ridge = _warm_start(Phi, u, c_ols, lambda cv: log_marginal_c(model, prior, cv, z, w=wnp))
    opt = Adam(len(c))
    decay = (lr_final / lr) ** (1.0 / max(steps - 1, 1))
    trace = []
    for k in range(steps):
        tape = ad.Tape()
        cv = tape.leaf(c)
        r = u - cv @ Phi.T
        obj = ad.sum(ad.square(r)) - rho * log_marginal_c(model, prior, cv, z, w=wnp)
        g = ad.backward(tape, obj)[cv]
        trace.append(float(ad.value(obj)))
        opt.step(c, g, lr * decay ** k)
    return FitResult(c, c_ols, float(np.linalg.norm(u - Phi @ c)), trace, ridge)


def _warm_start(Phi, u, c_ols, log_p):
    """OLS when log p is finite there, else the least-shrunk finite ridge solution."""
    def finite(c):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return np.isfinite(float(ad.value(log_p(c))))
        except (FlowError, InversionError, FloatingPointError):
            return False

    if finite(c_ols):
        return c_ols.copy(), 0.0
    scale = np.linalg.norm(Phi, 2) ** 2
    P = Phi.shape[1]
    for k in range(-12, 3):
        mu = scale * 10.0 ** k
        c = np.linalg.solve(Phi.T @ Phi + mu * np.eye(P), Phi.T @ u)
        if finite(c):
            return c, mu
    raise InversionError("log p(c) is not finite at the least-squares start or any ridge shrinkage of it")


@dataclass
class PosteriorDraws:
    c: np.ndarray
    samples: np.ndarray
    z: np.ndarray
    weights: np.ndarray | None = None
    ess: float | None = None

    def __len__(self):
        return len(self.samples)


def sample_posterior(model, c, n, seed=0, z=None, w=None):
    """lam_k = g^{-1}(c, z_k) with z_k ~ N(0, I)."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if len(c) != model.P:
        raise ValueError("coefficient vector has length %d, expected %d" % (len(c), model.P))
    if z is None:
        z = np.random.default_rng(seed).standard_normal((n, model.ndim_z))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    lam = inn_inverse(model, c[None, :], z, w)
    return PosteriorDraws(c, np.asarray(lam), z)


def importance_reweight(draws: PosteriorDraws, exact, model, prior=None, w=None):
    """Self-normalized weights p(lam | u) / [p(z) |det dg/dlam|] on the fiber."""
    lp = np.array([exact(lam) for lam in draws.samples])
    _, _, logdet = inn_forward(model, draws.samples, w)
    lq = std_normal_logpdf(draws.z) + logdet
    logw = lp - lq
    if not np.any(np.isfinite(logw)):
        raise InversionError("all importance weights are zero")
    logw = np.where(np.isfinite(logw), logw, -np.inf)
    wts = np.exp(logw - logsumexp(logw))
    wts /= wts.sum()
    return PosteriorDraws(draws.c, draws.samples, draws.z, wts, float(1.0 / np.sum(wts ** 2)))
