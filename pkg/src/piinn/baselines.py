"""Reference samplers: random-walk Metropolis and ABC rejection."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class SamplerError(RuntimeError):
    pass


@dataclass
class ExactPosterior:
    """log p(lam | u) up to a constant: prior plus Gaussian likelihood."""

    log_prior: Callable
    forward: Callable
    obs_values: np.ndarray
    sigma: float

    def log_likelihood(self, lam):
        pred = np.asarray(self.forward(lam), dtype=np.float64)
        if not np.all(np.isfinite(pred)):
            return -np.inf
        r = pred - self.obs_values
        return -0.5 * float(r @ r) / self.sigma ** 2

    def __call__(self, lam):
        lp = float(self.log_prior(lam))
        if not np.isfinite(lp):
            return -np.inf
        return lp + self.log_likelihood(lam)


@dataclass
class Chain:
    """Raw chain plus the trimming rule; trimming never alters ``states``."""

    states: np.ndarray
    log_target: np.ndarray
    accepted: int
    burn_in: int = 0
    thin: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.states) - 1

    @property
    def acceptance_rate(self):
        return self.accepted / max(self.n_steps, 1)

    @property
    def samples(self):
        return self.states[1 + self.burn_in::self.thin]

    def trimmed(self, burn_in, thin=1):
        return Chain(self.states, self.log_target, self.accepted, burn_in, thin, dict(self.meta))


def metropolis_sample(target, init, proposal_std=0.01, n_steps=1000, seed=0,
                      proposal_cov=None, propose=None, burn_in=0, thin=1):
    """Gaussian random-walk Metropolis.

    The proposal is ``N(x, proposal_std^2 I)`` or ``N(x, proposal_cov)``;
    a custom symmetric ``propose(x, rng)`` overrides both.  ``states[0]`` is
    the initial point.
    """
    x = np.array(init, dtype=np.float64)
    lt = float(target(x))
    if not np.isfinite(lt):
        raise SamplerError("initial state has zero target density")
    rng = np.random.default_rng(seed)
    d = x.size
    if propose is None:
        if proposal_cov is not None:
            L = np.linalg.cholesky(np.asarray(proposal_cov, dtype=np.float64))

            def propose(cur, r):
                return cur + (L @ r.standard_normal(d)).reshape(cur.shape)
        else:
            std = np.asarray(proposal_std, dtype=np.float64)
            if np.any(std <= 0):
                raise ValueError("proposal_std must be positive")

            def propose(cur, r):
                return cur + std * r.standard_normal(cur.shape)

    states = np.empty((n_steps + 1,) + x.shape)
    lts = np.empty(n_steps + 1)
    states[0] = x
    lts[0] = lt
    accepted = 0
    for k in range(1, n_steps + 1):
        y = propose(x, rng)
        ly = float(target(y))
        # log(U) <= delta accepts delta >= 0 always, including delta = 0
        if np.log(rng.random()) <= ly - lt:
            x, lt = y, ly
            accepted += 1
        states[k] = x
        lts[k] = lt
    return Chain(states, lts, accepted, burn_in, thin)


def discrete_metropolis(log_p, n_steps, seed=0, init=0):
    """Metropolis on {0..K-1} with a uniform proposal over the other states."""
    log_p = np.asarray(log_p, dtype=np.float64)
    K = len(log_p)
    rng = np.random.default_rng(seed)
    x = init
    out = np.empty(n_steps, dtype=np.int64)
    props = rng.integers(1, K, size=n_steps)
    us = np.log(rng.random(n_steps))
    for k in range(n_steps):
        y = (x + props[k]) % K
        if us[k] <= log_p[y] - log_p[x]:
            x = y
        out[k] = x
    return out


def effective_sample_size(x, max_lag=None):
    """ESS per coordinate from the initial positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < 4:
        return np.full(x.shape[1], float(n))
    xc = x - x.mean(0)
    m = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(xc, m, axis=0)
    acov = np.fft.irfft(spec * np.conj(spec), m, axis=0)[:n] / n
    var = acov[0]
    out = np.empty(x.shape[1])
    max_lag = n - 1 if max_lag is None else max_lag
    for j in range(x.shape[1]):
        if var[j] <= 0:
            out[j] = float(n)
            continue
        rho = acov[:, j] / var[j]
        tau = 1.0
        for t in range(1, max_lag, 2):
            pair = rho[t] + (rho[t + 1] if t + 1 < n else 0.0)
            if pair <= 0:
                break
            tau += 2.0 * pair
        out[j] = n / tau
    return out


@dataclass
class AbcResult:
    samples: np.ndarray
    n_proposed: int

    @property
    def acceptance_fraction(self):
        return len(self.samples) / self.n_proposed


def abc_rejection(prior_sampler, forward, y_obs, eps, n_accept, seed=0,
                  batch=20000, max_proposals=10 ** 9):
    """Accept prior draws whose simulated data lie within ``eps`` of ``y_obs``.

    ``prior_sampler(n, rng)`` returns an (n, d) batch and ``forward`` maps it
    to (n, k).  Gives up with an error once ``max_proposals`` draws yield an
    acceptance fraction below 1e-6.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    kept = []
    n_kept = 0
    n_prop = 0
    while n_kept < n_accept:
        lam = prior_sampler(batch, rng)
        dist = np.linalg.norm(forward(lam) - y_obs, axis=-1)
        ok = lam[dist < eps]
        n_prop += len(lam)
        if len(ok):
            take = ok[: n_accept - n_kept]
            if len(take) < len(ok):
                # count proposals only up to the last accepted draw
                last = np.flatnonzero(dist < eps)[len(take) - 1]
                n_prop -= len(lam) - (last + 1)
            kept.append(take)
            n_kept += len(take)
        if n_prop >= max_proposals and n_kept / n_prop < 1e-6:
            raise SamplerError("ABC acceptance fraction %.2e after %d proposals; increase eps"
                               % (n_kept / n_prop, n_prop))
    return AbcResult(np.concatenate(kept), n_prop)


def write_chain(path, chain: Chain, summary_path=None):
    """Chain CSV (step, lambda..., log_target) and summary JSON."""
    states = chain.states.reshape(len(chain.states), -1)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", *("lam%d" % k for k in range(states.shape[1])), "log_target"])
        for k, (s, lt) in enumerate(zip(states, chain.log_target)):
            wr.writerow([k, *("%.17g" % v for v in s), "%.17g" % lt])
    summary = {
        "n_steps": chain.n_steps,
        "acceptance_rate": chain.acceptance_rate,
        "burn_in": chain.burn_in,
        "thin": chain.thin,
        "ess": effective_sample_size(chain.states[1 + chain.burn_in:].reshape(
            -1, states.shape[1])).tolist(),
    }
    if summary_path is not None:
        Path(summary_path).write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
