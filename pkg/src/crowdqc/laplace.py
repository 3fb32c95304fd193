"""Laplace-approximated marginal likelihood for crossed random-intercept GLMMs.

The model has three independent Gaussian random intercepts: one per worker,
one per task and one per observed (worker, task) cell. Random effects are
written as ``b = sd * u`` with ``u ~ N(0, 1)``, so the conditional-mode problem
stays well conditioned as a standard deviation goes to zero.

Mode finding is Newton's method on the penalized log-likelihood. The Hessian
is ``I + Lambda Z' W Z Lambda``. Its observation-level (interaction) block is
diagonal and is eliminated in closed form; the remaining worker/task system is
reduced once more onto the smaller factor and solved with a dense Cholesky.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

INNER_TOL = 1e-8
INNER_MAXITER = 60


@dataclass
class CrossedDesign:
    """Index arrays for a crossed worker x task design (one row per observation)."""

    worker: np.ndarray
    task: np.ndarray
    n_workers: int
    n_tasks: int
    cell: np.ndarray = field(init=False)
    transpose: bool = field(init=False)

    def __post_init__(self):
        self.worker = np.asarray(self.worker, dtype=np.intp)
        self.task = np.asarray(self.task, dtype=np.intp)
        # Dense Schur complement is taken on the smaller factor.
        self.transpose = self.n_tasks > self.n_workers
        if self.transpose:
            self.cell = self.task * self.n_workers + self.worker
        else:
            self.cell = self.worker * self.n_tasks + self.task

    @property
    def n_obs(self) -> int:
        return self.worker.shape[0]

    @property
    def n_ranef(self) -> int:
        return self.n_workers + self.n_tasks + self.n_obs


# -- conditional log-density terms -------------------------------------------
# Each returns (logp, d1, w): per-observation log p(y | eta), its first
# derivative in eta, and minus its second derivative (>= 0 by log-concavity).


def binary_terms(eta, y):
    mu = expit(eta)
    logp = y * eta - np.logaddexp(0.0, eta)
    return logp, y - mu, mu * (1.0 - mu)


def cumulative_logit_terms(eta, y, thresholds):
    """Terms for ``logit P(y <= k) = r_k - eta``; ``y`` in ``0..K-1``."""
    cuts = np.concatenate(([-np.inf], thresholds, [np.inf]))
    a = cuts[y + 1] - eta
    b = cuts[y] - eta
    Fa = expit(a)
    Fb = expit(b)
    one_minus_Fa = expit(-a)
    one_minus_Fb = expit(-b)
    with np.errstate(invalid="ignore"):
        gap = -np.expm1(b - a)
    gap = np.where(np.isfinite(gap), gap, 1.0)
    logp = -np.logaddexp(0.0, -a) - np.logaddexp(0.0, b) + np.log(np.maximum(gap, 1e-300))
    # f(a)/P and f(b)/P in forms that stay finite in the tails.
    A = one_minus_Fa / (np.maximum(one_minus_Fb, 1e-300) * np.maximum(gap, 1e-300))
    B = Fb / (np.maximum(Fa, 1e-300) * np.maximum(gap, 1e-300))
    A = np.where(np.isinf(a), 0.0, A)
    B = np.where(np.isinf(b), 0.0, B)
    d1 = B - A
    w = d1 * d1 - (A * (1.0 - 2.0 * Fa) - B * (1.0 - 2.0 * Fb))
    return logp, d1, np.maximum(w, 1e-14)


# -- mode finding --------------------------------------------------------------


@dataclass
class ModeResult:
    loglik: float
    u: np.ndarray
    cond_loglik: float
    logdet: float
    iterations: int
    converged: bool


def _newton_step(design: CrossedDesign, sd, u, d1, w):
    nw, nt = design.n_workers, design.n_tasks
    sw, st, si = sd
    uw, ut, ui = u[:nw], u[nw:nw + nt], u[nw + nt:]

    gw = sw * np.bincount(design.worker, d1, nw) - uw
    gt = st * np.bincount(design.task, d1, nt) - ut
    gi = si * d1 - ui

    D = 1.0 + si * si * w
    wt = w / D
    r = si * w * gi / D
    gw_ = gw - sw * np.bincount(design.worker, r, nw)
    gt_ = gt - st * np.bincount(design.task, r, nt)
    Aw = 1.0 + sw * sw * np.bincount(design.worker, wt, nw)
    At = 1.0 + st * st * np.bincount(design.task, wt, nt)

    if design.transpose:
        # Reduce onto workers: eliminate the (diagonal) task block.
        C = (sw * st) * np.bincount(design.cell, wt, nw * nt).reshape(nt, nw)
        S = np.diag(Aw) - C.T @ (C / At[:, None])
        rhs = gw_ - C.T @ (gt_ / At)
        cf = linalg.cho_factor(S, lower=True, check_finite=False)
        dw = linalg.cho_solve(cf, rhs, check_finite=False)
        dt = (gt_ - C @ dw) / At
        eliminated = At
    else:
        C = (sw * st) * np.bincount(design.cell, wt, nw * nt).reshape(nw, nt)
        S = np.diag(At) - C.T @ (C / Aw[:, None])
        rhs = gt_ - C.T @ (gw_ / Aw)
        cf = linalg.cho_factor(S, lower=True, check_finite=False)
        dt = linalg.cho_solve(cf, rhs, check_finite=False)
        dw = (gw_ - C @ dt) / Aw
        eliminated = Aw
    di = (gi - si * w * (sw * dw[design.worker] + st * dt[design.task])) / D

    delta = np.concatenate((dw, dt, di))
    grad = np.concatenate((gw, gt, gi))
    logdet = np.log(D).sum() + np.log(eliminated).sum() + 2.0 * np.log(np.diag(cf[0])).sum()
    return delta, float(grad @ delta), float(logdet)


def find_mode(design: CrossedDesign, terms, offset, sd, u0=None, tol=INNER_TOL, maxiter=INNER_MAXITER) -> ModeResult:
    """Conditional modes of the spherical random effects and the Laplace log-likelihood.

    Parameters
    ----------
    terms : callable
        ``terms(eta) -> (logp, d1, w)`` for the response family.
    offset : float or ndarray
        Fixed part of the linear predictor.
    sd : sequence of 3 floats
        Worker, task and interaction standard deviations.
    """
    sd = tuple(float(s) for s in sd)
    nw, nt = design.n_workers, design.n_tasks
    u = np.zeros(design.n_ranef) if u0 is None else np.array(u0, dtype=float)

    def linpred(u):
        return offset + sd[0] * u[:nw][design.worker] + sd[1] * u[nw:nw + nt][design.task] + sd[2] * u[nw + nt:]

    logp, d1, w = terms(linpred(u))
    f = logp.sum() - 0.5 * (u @ u)
    converged = False
    it = 0
    logdet = 0.0
    for it in range(1, maxiter + 1):
        delta, decrement, logdet = _newton_step(design, sd, u, d1, w)
        if decrement < 2.0 * tol:
            converged = True
            break
        step = 1.0
        while True:
            u_new = u + step * delta
            logp_n, d1_n, w_n = terms(linpred(u_new))
            f_new = logp_n.sum() - 0.5 * (u_new @ u_new)
            if f_new >= f - 1e-12 or step < 1e-10:
                break
            step *= 0.5
        u, logp, d1, w, f = u_new, logp_n, d1_n, w_n, f_new
    cond = float(logp.sum())
    return ModeResult(
        loglik=float(f - 0.5 * logdet),
        u=u,
        cond_loglik=cond,
        logdet=logdet,
        iterations=it,
        converged=converged,
    )
