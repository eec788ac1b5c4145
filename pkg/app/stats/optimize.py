"""Bounded Newton maximization for the likelihood fitters."""
import logging
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray
    iterations: int
    converged: bool
    # norm of the gradient over coordinates not held at a bound
    gradient_norm: float
    at_bound: np.ndarray


def numeric_hessian(grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrised."""
    k = len(x)
    hessian = np.empty((k, k))
    for i in range(k):
        h = step * max(1.0, abs(x[i]))
        shift = np.zeros(k)
        shift[i] = h
        hessian[:, i] = (grad(x + shift) - grad(x - shift)) / (2 * h)
    return (hessian + hessian.T) / 2


def _ascent_direction(hessian: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Newton direction, damped until -H is positive definite."""
    negative = -hessian
    damping = 0.0
    scale = max(1e-8, float(np.abs(np.diag(negative)).max(initial=0.0)))
    for _ in range(60):
        try:
            factor = linalg.cho_factor(negative + damping * np.eye(len(gradient)))
            return linalg.cho_solve(factor, gradient)
        except linalg.LinAlgError:
            damping = scale * 1e-6 if damping == 0 else damping * 10
    return gradient / max(1.0, float(np.linalg.norm(gradient)))


def newton_maximize(
    fun: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    hess: Callable[[np.ndarray], np.ndarray] | None = None,
    lower: np.ndarray | None = None,
    max_iter: int = 200,
    gtol: float = 1e-6,
    scale: float = 1.0,
    ftol: float = 1e-10,
) -> OptimizeResult:
    """Maximize `fun` by Newton steps with backtracking; the objective never decreases.

    A coordinate sitting on its `lower` bound with the gradient pointing out
    of the feasible set is held fixed. Convergence is declared when the free
    gradient norm divided by `scale` drops below `gtol`, or when the predicted
    gain of a Newton step is below `ftol` relative to the objective.
    """
    lower = np.full(len(x0), -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hess = hess or (lambda x: numeric_hessian(grad, x))
    x = np.maximum(np.asarray(x0, dtype=float), lower)
    value = fun(x)
    gradient = grad(x)
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        held = (x <= lower + 1e-12) & (gradient < 0)
        free = ~held
        gnorm = float(np.linalg.norm(gradient[free]))
        if gnorm / scale < gtol:
            converged = True
            break

        hessian = hess(x)
        direction = np.zeros_like(x)
        direction[free] = _ascent_direction(hessian[np.ix_(free, free)], gradient[free])
        decrement = float(gradient[free] @ direction[free])
        if decrement / 2 < ftol * (1.0 + abs(value)):
            converged = True
            break

        t = 1.0
        for _ in range(50):
            candidate = np.maximum(x + t * direction, lower)
            candidate_value = fun(candidate)
            if np.isfinite(candidate_value) and candidate_value >= value - 1e-12 * abs(value):
                break
            t /= 2
        else:
            logger.debug("Line search failed at iteration %d", iterations)
            break

        improvement = candidate_value - value
        x, value = candidate, candidate_value
        gradient = grad(x)
        if abs(improvement) < 1e-14 * (1.0 + abs(value)) and t < 1.0:
            held = (x <= lower + 1e-12) & (gradient < 0)
            converged = float(np.linalg.norm(gradient[~held])) / scale < gtol * 1e3
            break

    held = (x <= lower + 1e-12) & (gradient < 0)
    return OptimizeResult(
        x=x,
        value=float(value),
        gradient=gradient,
        hessian=hess(x),
        iterations=iterations,
        converged=converged,
        gradient_norm=float(np.linalg.norm(gradient[~held])),
        at_bound=held,
    )
