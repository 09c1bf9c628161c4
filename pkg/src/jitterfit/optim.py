"""Dense Newton and BFGS minimizers used by the inference layer.

The inner problem (latent weights given hyperparameters) is solved with a
damped Newton method using the exact dense Hessian; the outer problem
(hyperparameters) with BFGS on finite-difference gradients.  Both treat a
non-finite objective at a trial point as "too far" and halve the step
rather than aborting, which is what keeps fits alive when the optimizer
wanders into regions where the mixture likelihood underflows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class NewtonResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    hess_chol: tuple | None
    n_iter: int
    converged: bool


def newton_minimize(value_grad, hess, x0, tol: float = 1e-9, maxiter: int = 100,
                    max_halvings: int = 40, stall_tol: float = 1e-4) -> NewtonResult:
    """Damped Newton with Armijo backtracking.

    ``value_grad(x) -> (f, g)``; ``hess(x) -> H`` (dense, symmetric).
    Indefinite Hessians are handled by escalating diagonal damping until
    the Cholesky succeeds; the damping level is remembered across
    iterations so failures stay rare.  Convergence is on the sup-norm of
    the gradient.  When the line search cannot improve further (the
    gradient has hit its floating-point floor, which ill-conditioned
    prior precisions make larger than ``tol``), the point is accepted if
    the gradient is below ``stall_tol * (1 + |f|)``.  The returned factor
    is of the (undamped whenever possible) Hessian at the final point.
    """
    x = np.asarray(x0, dtype=float).copy()
    f, g = value_grad(x)
    if not np.isfinite(f):
        raise ValueError("objective not finite at the Newton starting point")
    tau = 0.0

    def finish(it: int) -> NewtonResult:
        gnorm = float(np.max(np.abs(g)))
        ok = gnorm <= tol or gnorm <= stall_tol * (1.0 + abs(f))
        chol, _ = _damped_cholesky(hess(x), 0.0)
        return NewtonResult(x, f, g, chol, it, ok)

    for it in range(1, maxiter + 1):
        if np.max(np.abs(g)) <= tol:
            return finish(it - 1)
        chol, tau = _damped_cholesky(hess(x), tau)
        step = -cho_solve(chol, g)
        slope = float(g @ step)
        if slope > 0:  # damping made the direction non-descent; fall back
            step = -g
            slope = float(g @ step)
        alpha = 1.0
        for _ in range(max_halvings):
            f_new, g_new = value_grad(x + alpha * step)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            return finish(it)  # no further progress possible
        x = x + alpha * step
        f, g = f_new, g_new
        tau *= 0.25  # relax damping as we approach the mode
    return finish(maxiter)


def _damped_cholesky(H: np.ndarray, tau: float = 0.0):
    """Cholesky of H + tau*I, escalating tau until it succeeds."""
    scale = max(np.max(np.abs(np.diag(H))), 1e-12)
    n = H.shape[0]
    for _ in range(30):
        if tau == 0.0:
            Hd = H
        else:
            Hd = H.copy()
            Hd.flat[:: n + 1] += tau
        try:
            return cho_factor(Hd, lower=True), tau
        except np.linalg.LinAlgError:
            tau = max(tau * 100.0, 1e-8 * scale)
    raise np.linalg.LinAlgError("Hessian could not be made positive definite")


def fd_gradient(fun, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient; inf values fall back one-sided."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    f0 = None
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp, fm = fun(x + e), fun(x - e)
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / (2 * h)
        else:
            if f0 is None:
                f0 = fun(x)
            g[i] = (fp - f0) / h if np.isfinite(fp) else (f0 - fm) / h
    return g


def fd_hessian(fun, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite-difference Hessian (symmetrized)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    H = np.empty((n, n))
    f0 = fun(x)
    for i in range(n):
        ei = np.zeros(n); ei[i] = h
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n); ej[j] = h
            H[i, j] = H[j, i] = (
                fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)
            ) / (4 * h**2)
    return H


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    trace: list = field(default_factory=list)
    message: str = ""


def bfgs_minimize(value, grad, x0, gtol: float = 1e-6, maxiter: int = 200,
                  max_halvings: int = 50, max_step: float = 5.0,
                  stall_gtol: float = 2e-4) -> BfgsResult:
    """BFGS with backtracking (halving) line search.

    ``value(x)`` may return inf outside the feasible-in-practice set; the
    line search then halves the step.  ``grad(x)`` is only called at
    accepted points, so finite-difference gradients stay affordable.
    Steps are capped at ``max_step`` in sup-norm, which keeps log-scale
    parameters from overflowing when the inverse-Hessian estimate degrades.
    A stalled line search still counts as converged when the gradient sits
    below ``stall_gtol``, the noise floor finite differencing leaves on
    objectives evaluated through an inner solver.
    """
    x = np.asarray(x0, dtype=float).copy()
    f = value(x)
    if not np.isfinite(f):
        raise ValueError("objective not finite at the starting point")
    g = grad(x)
    n = x.size
    Hinv = np.eye(n)
    trace = [(0, f, float(np.max(np.abs(g))))]
    message = "maximum iterations reached"
    for it in range(1, maxiter + 1):
        if not np.all(np.isfinite(g)):
            message = "gradient not finite"
            break
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= gtol:
            return BfgsResult(x, f, g, it - 1, True, trace, "gradient tolerance reached")
        step = -Hinv @ g
        slope = float(g @ step)
        if slope >= 0:
            Hinv = np.eye(n)
            step = -g
            slope = float(g @ step)
        overshoot = float(np.max(np.abs(step))) / max_step
        if overshoot > 1.0:
            step /= overshoot
            slope /= overshoot
        alpha = 1.0
        for _ in range(max_halvings):
            f_new = value(x + alpha * step)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        else:
            if gnorm <= stall_gtol:
                return BfgsResult(x, f, g, it - 1, True, trace,
                                  "stalled at finite-difference noise floor")
            message = "line search stalled"
            break
        s = alpha * step
        x_new = x + s
        g_new = grad(x_new)
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(yv)):
            rho = 1.0 / sy
            I = np.eye(n)
            V = I - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        x, f, g = x_new, f_new, g_new
        trace.append((it, f, float(np.max(np.abs(g)))))
    converged = bool(np.max(np.abs(g)) <= gtol)
    return BfgsResult(x, f, g, len(trace) - 1, converged, trace, message)
