"""Three-term power-law fit of the dependency metric against (N, R, D).

The model is ``A*(N0/N)^alpha + B*(R0/R)^beta + C*(D0/D)^gamma``.  The
normalization constants N0, R0, D0 are gauge-redundant with A, B, C, so they
are pinned to the minimum observed value on each axis rather than fitted.
A, B, C are kept non-negative through a log parameterization; the exponents
are unconstrained.  Optimization is damped least squares with an adaptive
damping factor, restarted from a fixed grid of initial exponents so results
are reproducible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

_AXES = ("n_params", "rank", "data_size")
_EXPONENTS = ("alpha", "beta", "gamma")
_LOG_FLOOR = -745.0  # exp() underflows to 0 below this; used as "coefficient 0"


@dataclass(frozen=True)
class ScalingObservation:
    n_params: float
    rank: float
    data_size: float
    miub: float

    def __post_init__(self):
        for name in ("n_params", "rank", "data_size"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v!r}")
        if not (isinstance(self.miub, (int, float)) and math.isfinite(self.miub)
                and self.miub >= 0):
            raise ValueError(f"miub must be finite and >= 0, got {self.miub!r}")


@dataclass(frozen=True)
class FitConfig:
    exponent_starts: tuple[float, ...] = (0.1, 0.5, 1.0)
    max_iterations: int = 500
    objective_rtol: float = 1e-10
    gradient_tol: float = 1e-8
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1


@dataclass(frozen=True)
class ScalingFitResult:
    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float
    n0: float
    r0: float
    d0: float
    rmse: float
    r_squared: float
    n_iterations: int
    converged: bool


@dataclass(frozen=True)
class GoodnessStats:
    rmse: float
    r_squared: float
    per_point_residuals: np.ndarray


def _term(log_coef: float, exponent: float, log_ratio: np.ndarray) -> np.ndarray:
    # One power term evaluated in log space: exp(log_coef - exponent*log(x/x0)).
    if log_coef <= _LOG_FLOOR:
        return np.zeros_like(log_ratio)
    return np.exp(log_coef - exponent * log_ratio)


def predict(fit: ScalingFitResult, n, r, d):
    """Evaluate the fitted law at (n, r, d); each input must be positive."""
    n = np.asarray(n, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(n <= 0) or np.any(r <= 0) or np.any(d <= 0):
        raise ValueError("predict requires positive n, r, d")
    out = (
        _term(math.log(fit.a) if fit.a > 0 else _LOG_FLOOR * 2, fit.alpha,
              np.log(n / fit.n0))
        + _term(math.log(fit.b) if fit.b > 0 else _LOG_FLOOR * 2, fit.beta,
                np.log(r / fit.r0))
        + _term(math.log(fit.c) if fit.c > 0 else _LOG_FLOOR * 2, fit.gamma,
                np.log(d / fit.d0))
    )
    return float(out) if out.ndim == 0 else out


def _model_and_jacobian(theta: np.ndarray, log_ratios: np.ndarray):
    # theta = (logA, alpha, logB, beta, logC, gamma); log_ratios is (3, n).
    n = log_ratios.shape[1]
    pred = np.zeros(n)
    jac = np.zeros((n, 6))
    for axis in range(3):
        term = _term(theta[2 * axis], theta[2 * axis + 1], log_ratios[axis])
        pred += term
        jac[:, 2 * axis] = term
        jac[:, 2 * axis + 1] = -log_ratios[axis] * term
    return pred, jac


def objective_gradient(theta: np.ndarray, log_ratios: np.ndarray,
                       y: np.ndarray) -> np.ndarray:
    """Gradient of sum((pred - y)^2) with respect to the raw parameters."""
    pred, jac = _model_and_jacobian(theta, log_ratios)
    return 2.0 * jac.T @ (pred - y)


def _damped_least_squares(theta0: np.ndarray, log_ratios: np.ndarray,
                          y: np.ndarray, cfg: FitConfig):
    theta = theta0.copy()
    pred, jac = _model_and_jacobian(theta, log_ratios)
    resid = pred - y
    obj = float(resid @ resid)
    lam = cfg.damping_init
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        grad = 2.0 * jac.T @ resid
        if np.linalg.norm(grad) < cfg.gradient_tol:
            converged = True
            break
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        stepped = False
        while lam <= 1e12:
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(6), -jtr)
            except np.linalg.LinAlgError:
                lam *= cfg.damping_up
                continue
            trial = theta + delta
            trial[0::2] = np.maximum(trial[0::2], _LOG_FLOOR)
            pred_t, jac_t = _model_and_jacobian(trial, log_ratios)
            resid_t = pred_t - y
            obj_t = float(resid_t @ resid_t)
            if obj_t < obj:
                rel_drop = (obj - obj_t) / max(obj, 1e-300)
                theta, pred, jac, resid, obj = trial, pred_t, jac_t, resid_t, obj_t
                lam = max(lam * cfg.damping_down, 1e-12)
                stepped = True
                if rel_drop < cfg.objective_rtol:
                    converged = True
                break
            lam *= cfg.damping_up
        if not stepped:
            # No damping level makes progress; stop without claiming convergence.
            break
        if converged:
            break
    return theta, obj, iterations, converged


def fit_scaling_law(observations, config: FitConfig | None = None) -> ScalingFitResult:
    """Fit the three-term law to observations by multi-start damped least squares.

    Requires at least 6 observations.  A design in which every observation
    shares the same (N, R, D) is rejected; an axis with a single distinct
    value only triggers a warning, because its term degenerates to a
    constant and the corresponding exponent is unidentifiable.
    """
    cfg = config or FitConfig()
    obs = list(observations)
    if len(obs) < 6:
        raise ValueError(f"need at least 6 observations, got {len(obs)}")
    x = np.array([[o.n_params, o.rank, o.data_size] for o in obs], dtype=np.float64).T
    y = np.array([o.miub for o in obs], dtype=np.float64)

    distinct = [np.unique(x[i]).size for i in range(3)]
    if all(d == 1 for d in distinct):
        raise ValueError(
            "degenerate design: every observation has identical (n_params, "
            "rank, data_size)"
        )
    for axis, n_distinct, exp_name in zip(_AXES, distinct, _EXPONENTS):
        if n_distinct < 2:
            warnings.warn(
                f"axis {axis!r} has a single distinct value; its term is a "
                f"constant and exponent {exp_name} is unidentifiable",
                stacklevel=2,
            )

    x0 = x.min(axis=1)
    log_ratios = np.log(x / x0[:, None])

    mean_y = float(y.mean())
    if mean_y <= 0.0:
        # All-zero targets: the law collapses to zero coefficients.
        resid = -y
        rmse = float(np.sqrt(np.mean(resid**2)))
        return ScalingFitResult(0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                                *map(float, x0), rmse, 1.0, 0, True)

    log_c0 = math.log(mean_y / 3.0)
    best = None
    for ea in cfg.exponent_starts:
        for eb in cfg.exponent_starts:
            for ec in cfg.exponent_starts:
                theta0 = np.array([log_c0, ea, log_c0, eb, log_c0, ec])
                theta, obj, iters, conv = _damped_least_squares(
                    theta0, log_ratios, y, cfg)
                if best is None or obj < best[1]:
                    best = (theta, obj, iters, conv)
    theta, _, iterations, converged = best

    coefs = [0.0 if lc <= _LOG_FLOOR else math.exp(lc) for lc in theta[0::2]]
    result = ScalingFitResult(
        a=coefs[0], b=coefs[1], c=coefs[2],
        alpha=float(theta[1]), beta=float(theta[3]), gamma=float(theta[5]),
        n0=float(x0[0]), r0=float(x0[1]), d0=float(x0[2]),
        rmse=0.0, r_squared=0.0,
        n_iterations=iterations, converged=converged,
    )
    stats = goodness(result, obs)
    return replace(result, rmse=stats.rmse, r_squared=stats.r_squared)


def goodness(fit: ScalingFitResult, observations) -> GoodnessStats:
    """RMSE, R^2 (about the mean) and per-point residuals of a fit."""
    obs = list(observations)
    if not obs:
        raise ValueError("goodness requires at least one observation")
    y = np.array([o.miub for o in obs], dtype=np.float64)
    pred = np.array([
        predict(fit, o.n_params, o.rank, o.data_size) for o in obs
    ])
    resid = pred - y
    rmse = float(np.sqrt(np.mean(resid**2)))
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res < 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return GoodnessStats(rmse=rmse, r_squared=r2, per_point_residuals=resid)
