"""Polyhedral Hamiltonians H(x,p) = max_i { b_i(x) . p - f_i(x) } and their
Moreau-Yosida envelopes.

The envelope value, prox point and gradient are obtained from the dual of the
inf-convolution: with drifts stacked as columns of B(x), the prox weights
maximize the concave quadratic

    g(mu) = (B^T p - f) . mu - (lambda/2) |B mu|^2

over the probability simplex, and then q* = p - lambda * B mu,
grad H_lambda(p) = B mu.  The default solver enumerates every support subset
and keeps the best feasible KKT point (exact for the small control families
used here); an accelerated projected-gradient solver covers larger families
and polishes degenerate cases.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

Control = Union[float, int, Sequence[float], np.ndarray, Callable]


class QpMode(Enum):
    ACTIVE_SET_ENUMERATION = "active_set_enumeration"
    PROJECTED_GRADIENT = "projected_gradient"


class QpNonConvergence(RuntimeError):
    """Projected-gradient solver did not reach the KKT tolerance."""

    def __init__(self, iterations: int, worst_residual: float):
        self.iterations = iterations
        self.worst_residual = worst_residual
        super().__init__(f"projected gradient stalled after {iterations} "
                         f"iterations (worst KKT residual {worst_residual:.3e})")


def _as_point_batch(x, dim):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim == 1:
        x = x.reshape(1, dim) if x.size == dim else x.reshape(-1, dim)
    return x


class PolyhedralHamiltonian:
    """Finite control family {(b_i, f_i)} defining a convex piecewise-affine
    Hamiltonian in p.

    Drifts and costs may be constants or callables of the state; callables
    take points of shape (P, d).  The Lipschitz constant L_H is exact for
    constant drifts and otherwise estimated on a sample grid (64 points per
    coordinate, times a 1.01 safety factor).
    """

    def __init__(self, controls, dim: int | None = None,
                 tie_tol: float = 1e-12, sample_grid: int = 64):
        if len(controls) < 1:
            raise ValueError("need at least one control")
        self.tie_tol = tie_tol
        self._drifts = []
        self._costs = []
        inferred = dim
        for b, f in controls:
            if not callable(b):
                b = np.atleast_1d(np.asarray(b, dtype=float))
                if inferred is None:
                    inferred = b.size
                elif b.size != inferred:
                    raise ValueError("inconsistent drift dimensions")
            self._drifts.append(b)
            self._costs.append(f)
        if inferred is None:
            raise ValueError("dim is required when all drifts are callables")
        self.dim = inferred
        self._constant = all(not callable(b) for b in self._drifts) and \
            all(not callable(f) for f in self._costs)
        if self._constant:
            self._B0 = np.stack([np.broadcast_to(b, (self.dim,))
                                 for b in self._drifts])
            self._F0 = np.array([float(f) for f in self._costs])
        self.l_h = self._lipschitz_constant(sample_grid)
        if not self.l_h > 0:
            raise ValueError("L_H must be positive (all drifts vanish)")

    @property
    def n_controls(self) -> int:
        return len(self._drifts)

    def _lipschitz_constant(self, sample_grid: int) -> float:
        if self._constant:
            return float(np.max(np.linalg.norm(self._B0, axis=1)))
        axes = [np.linspace(0.0, 1.0, sample_grid)] * self.dim
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        pts = pts.reshape(-1, self.dim)
        best = 0.0
        for b in self._drifts:
            if callable(b):
                vals = np.asarray(b(pts), dtype=float).reshape(-1, self.dim)
                best = max(best, float(np.linalg.norm(vals, axis=1).max()))
            else:
                best = max(best, float(np.linalg.norm(b)))
        l_h = 1.01 * best
        logger.info("sampled Lipschitz constant L_H = %.6g "
                    "(64^d grid, safety factor 1.01)", l_h)
        return l_h

    def control_arrays(self, x: np.ndarray):
        """Drift and cost samples at points x of shape (P, d).

        Returns (B, F) with shapes (P, N, d) and (P, N); for constant
        families these are broadcast views.
        """
        n_pts = x.shape[0]
        if self._constant:
            return (np.broadcast_to(self._B0, (n_pts,) + self._B0.shape),
                    np.broadcast_to(self._F0, (n_pts, self.n_controls)))
        b_out = np.empty((n_pts, self.n_controls, self.dim))
        f_out = np.empty((n_pts, self.n_controls))
        for i, (b, f) in enumerate(zip(self._drifts, self._costs)):
            if callable(b):
                b_out[:, i, :] = np.asarray(b(x), dtype=float).reshape(n_pts, self.dim)
            else:
                b_out[:, i, :] = b
            if callable(f):
                f_out[:, i] = np.asarray(f(x), dtype=float).reshape(n_pts)
            else:
                f_out[:, i] = float(f)
        return b_out, f_out

    def value_batch(self, x: np.ndarray, p: np.ndarray):
        """H values and lowest-index argmax at point/momentum pairs."""
        b, f = self.control_arrays(x)
        vals = np.einsum("pnd,pd->pn", b, p) - f
        vmax = vals.max(axis=1)
        tol = self.tie_tol * (1.0 + np.abs(vmax))
        idx = np.argmax(vals >= (vmax - tol)[:, None], axis=1)
        return vmax, idx

    def value(self, x, p):
        """H(x,p) and the argmax index (ties broken to the lowest index)."""
        xb = _as_point_batch(x, self.dim)
        pb = _as_point_batch(p, self.dim)
        v, i = self.value_batch(xb, pb)
        return float(v[0]), int(i[0])

    def subgradient_batch(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        b, _ = self.control_arrays(x)
        _, idx = self.value_batch(x, p)
        return b[np.arange(len(idx)), idx]

    def subgradient(self, x, p) -> np.ndarray:
        """The drift b_{i*}(x) of the selected maximizing control; an element
        of the subdifferential with |b| <= L_H."""
        xb = _as_point_batch(x, self.dim)
        pb = _as_point_batch(p, self.dim)
        return self.subgradient_batch(xb, pb)[0]


@dataclass(eq=False)
class EnvelopeValues:
    """Batched envelope evaluation results."""

    values: np.ndarray      # (P,)
    gradients: np.ndarray   # (P, d)
    prox_points: np.ndarray  # (P, d)
    weights: np.ndarray     # (P, N)


@dataclass(eq=False)
class MoreauEnvelope:
    """Moreau-Yosida envelope H_lambda of a polyhedral Hamiltonian.

    lam must lie in (0, 1].  Satisfies H_lambda <= H pointwise with gap at
    most L_H^2 * lam / 2, and the gradient is a convex combination of the
    drifts, hence bounded by L_H and Lipschitz with constant 1/lam.
    """

    base: PolyhedralHamiltonian
    lam: float
    qp_tol: float = 1e-10
    qp_mode: QpMode = QpMode.ACTIVE_SET_ENUMERATION
    pg_max_iter: int = 50000
    _subsets: list = field(init=False, repr=False)

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        n = self.base.n_controls
        if self.qp_mode == QpMode.ACTIVE_SET_ENUMERATION and n > 16:
            logger.info("N=%d controls: switching the prox QP to projected "
                        "gradient (enumeration is limited to N <= 16)", n)
            self.qp_mode = QpMode.PROJECTED_GRADIENT
        self._subsets = [s for size in range(1, n + 1)
                         for s in itertools.combinations(range(n), size)]

    # -- scalar interface -------------------------------------------------

    def prox(self, x, p):
        """Prox point q* and the simplex weights behind it."""
        out = self.batch(_as_point_batch(x, self.base.dim),
                         _as_point_batch(p, self.base.dim))
        return out.prox_points[0], out.weights[0]

    def value(self, x, p) -> float:
        out = self.batch(_as_point_batch(x, self.base.dim),
                         _as_point_batch(p, self.base.dim))
        return float(out.values[0])

    def gradient(self, x, p) -> np.ndarray:
        out = self.batch(_as_point_batch(x, self.base.dim),
                         _as_point_batch(p, self.base.dim))
        return out.gradients[0]

    # -- batched evaluation ------------------------------------------------

    def batch(self, x: np.ndarray, p: np.ndarray,
              chunk: int = 1 << 16) -> EnvelopeValues:
        """Evaluate value, gradient, prox point and weights at (x_k, p_k)."""
        n_pts = p.shape[0]
        values = np.empty(n_pts)
        grads = np.empty((n_pts, self.base.dim))
        qstar = np.empty((n_pts, self.base.dim))
        weights = np.empty((n_pts, self.base.n_controls))
        for lo in range(0, n_pts, chunk):
            hi = min(lo + chunk, n_pts)
            v, g, q, w = self._eval_chunk(x[lo:hi], p[lo:hi])
            values[lo:hi] = v
            grads[lo:hi] = g
            qstar[lo:hi] = q
            weights[lo:hi] = w
        return EnvelopeValues(values, grads, qstar, weights)

    def _eval_chunk(self, x, p):
        b, f = self.base.control_arrays(x)
        c = np.einsum("pnd,pd->pn", b, p) - f
        if self.base._constant:
            gram = self.base._B0 @ self.base._B0.T
        else:
            gram = np.einsum("pnd,pmd->pnm", b, b)
        if self.qp_mode == QpMode.ACTIVE_SET_ENUMERATION:
            mu = self._enumerate(c, gram)
            res = self._kkt_residual(mu, c, gram)
            bad = res > self.qp_tol
            if np.any(bad):
                mu[bad] = self._projected_gradient(
                    c[bad], gram if gram.ndim == 2 else gram[bad], mu[bad])
        else:
            mu = self._projected_gradient(c, gram, _uniform_start(c))
        mu = np.clip(mu, 0.0, None)
        mu /= mu.sum(axis=1, keepdims=True)
        drift = np.einsum("pn,pnd->pd", mu, b)
        q = p - self.lam * drift
        h_at_q, _ = self.base.value_batch(x, q)
        values = h_at_q + 0.5 * self.lam * np.sum(drift * drift, axis=1)
        return values, drift, q, mu

    def _enumerate(self, c, gram):
        """Best feasible KKT point over all support subsets.

        For constant control families the KKT matrix of each subset is shared
        by every point, so one factorization serves the whole batch.
        """
        n_pts, n = c.shape
        lam = self.lam
        best_val = np.full(n_pts, -np.inf)
        best_mu = np.zeros((n_pts, n))
        best_ok = np.zeros(n_pts, dtype=bool)
        ftol = 1e-9
        const = gram.ndim == 2
        for subset in self._subsets:
            s = len(subset)
            idx = np.asarray(subset)
            if const:
                kkt = np.zeros((s + 1, s + 1))
                kkt[:s, :s] = lam * gram[np.ix_(idx, idx)]
                kkt[:s, s] = 1.0
                kkt[s, :s] = 1.0
                rhs = np.concatenate([c[:, idx].T, np.ones((1, n_pts))])
                try:
                    sol = np.linalg.solve(kkt, rhs)
                except np.linalg.LinAlgError:
                    sol = np.linalg.pinv(kkt) @ rhs
                mu_s = sol[:s].T
            else:
                kkt = np.zeros((n_pts, s + 1, s + 1))
                kkt[:, :s, :s] = lam * gram[:, idx[:, None], idx[None, :]]
                kkt[:, :s, s] = 1.0
                kkt[:, s, :s] = 1.0
                rhs = np.concatenate([c[:, idx], np.ones((n_pts, 1))], axis=1)
                try:
                    sol = np.linalg.solve(kkt, rhs[..., None])[..., 0]
                except np.linalg.LinAlgError:
                    sol = (np.linalg.pinv(kkt) @ rhs[..., None])[..., 0]
                mu_s = sol[:, :s]
            mu_full = np.zeros((n_pts, n))
            mu_full[:, idx] = mu_s
            feasible = np.all(mu_s >= -ftol, axis=1) & \
                np.all(np.isfinite(mu_s), axis=1)
            grad = c - lam * self._apply_gram(gram, mu_full)
            kappa = grad[:, idx].mean(axis=1)
            scale = 1.0 + np.abs(grad).max(axis=1)
            if s < n:
                rest = np.setdiff1d(np.arange(n), idx)
                optimal = np.all(grad[:, rest] <= (kappa + ftol * scale)[:, None],
                                 axis=1)
            else:
                optimal = np.ones(n_pts, dtype=bool)
            val = np.einsum("pn,pn->p", c, mu_full) - 0.5 * lam * np.einsum(
                "pn,pn->p", mu_full, self._apply_gram(gram, mu_full))
            ok = feasible & optimal
            promote = feasible & (
                (ok & ~best_ok) | ((ok == best_ok) & (val > best_val)))
            best_val[promote] = val[promote]
            best_mu[promote] = mu_full[promote]
            best_ok[promote] |= ok[promote]
        return best_mu

    @staticmethod
    def _apply_gram(gram, mu):
        if gram.ndim == 2:
            return mu @ gram
        return np.einsum("pnm,pm->pn", gram, mu)

    def _kkt_residual(self, mu, c, gram):
        grad = c - self.lam * self._apply_gram(gram, mu)
        kappa = np.einsum("pn,pn->p", mu, grad)
        comp = np.max(grad, axis=1) - kappa
        feas = np.abs(mu.sum(axis=1) - 1.0) + np.clip(-mu, 0.0, None).max(axis=1)
        return np.maximum(comp, 0.0) + feas

    def _projected_gradient(self, c, gram, mu0):
        """FISTA on the negated dual objective with simplex projection."""
        if gram.ndim == 2:
            lip = self.lam * float(np.linalg.norm(gram, 2))
        else:
            lip = self.lam * float(np.abs(gram).sum(axis=2).max())
        step = 1.0 / max(lip, 1e-30)
        mu = _project_simplex(mu0)
        z = mu.copy()
        t = 1.0
        for it in range(1, self.pg_max_iter + 1):
            grad = c - self.lam * self._apply_gram(gram, z)
            mu_new = _project_simplex(z + step * grad)
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            z = mu_new + ((t - 1.0) / t_new) * (mu_new - mu)
            mu, t = mu_new, t_new
            if it % 20 == 0 or it == self.pg_max_iter:
                res = self._kkt_residual(mu, c, gram)
                if np.all(res <= self.qp_tol):
                    return mu
        res = self._kkt_residual(mu, c, gram)
        if np.all(res <= self.qp_tol):
            return mu
        raise QpNonConvergence(self.pg_max_iter, float(res.max()))

    def gap_bound(self) -> float:
        """Uniform upper bound L_H^2 lambda / 2 for H - H_lambda."""
        return 0.5 * self.base.l_h ** 2 * self.lam


def _uniform_start(c):
    n_pts, n = c.shape
    return np.full((n_pts, n), 1.0 / n)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    n = v.shape[1]
    u = np.sort(v, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1)
    ks = np.arange(1, n + 1)
    cond = u + (1.0 - css) / ks > 0.0
    rho = n - np.argmax(cond[:, ::-1], axis=1) - 1
    theta = (css[np.arange(len(v)), rho] - 1.0) / (rho + 1.0)
    return np.clip(v - theta[:, None], 0.0, None)


# -- spec-facing functional aliases ---------------------------------------

def eval_H(ham: PolyhedralHamiltonian, x, p):
    return ham.value(x, p)


def subgradient_selection(ham: PolyhedralHamiltonian, x, p):
    return ham.subgradient(x, p)


def prox(envelope: MoreauEnvelope, x, p):
    return envelope.prox(x, p)


def eval_envelope(envelope: MoreauEnvelope, x, p):
    return envelope.value(x, p)


def grad_envelope(envelope: MoreauEnvelope, x, p):
    return envelope.gradient(x, p)
