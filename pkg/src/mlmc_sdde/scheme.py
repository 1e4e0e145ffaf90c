"""Theta Euler-Maruyama stepping on delay-aligned grids.

One step of the scheme on a grid with step ``h`` and delay offset ``m``
advances

    X_{n+1} = X_n + (1-theta) h f(X_n, X_{n-m}) + theta h f(X_{n+1}, X_{n+1-m})
              + eps g(X_n, X_{n-m}) dW_n,        dW_n = sqrt(h) xi_n,

with ``xi_n`` i.i.d. standard normal vectors.  ``theta = 0`` is the
explicit Euler-Maruyama scheme and is computed in exactly that closed
form; ``theta > 0`` solves the implicit relation with a fixed-point
iteration that falls back to a damped Newton method.  Because ``m >= 1``,
the delayed argument ``X_{n+1-m}`` of the implicit stage is always a
value already computed, so the solve is a plain nonlinear equation in
``X_{n+1}`` only.

Drift taming replaces ``f`` by ``f / (1 + h_c^delta |f|)`` for a coarse
step size ``h_c`` and an exponent ``delta`` in (0, 1/2].  The tamed drift
is bounded by ``h_c^-delta``, which keeps explicit steps of one-sided
Lipschitz drifts from blowing up while leaving the drift essentially
unchanged wherever ``|f|`` is moderate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .model import GlobalLipschitz, OneSidedLipschitz, SddeProblem, derived_constants
from .rng import NoiseStream

__all__ = [
    "AdmissibilityError",
    "NonConvergence",
    "GridSpec",
    "DelayBuffer",
    "TamedDrift",
    "tame_drift",
    "check_admissibility",
    "implicit_step_solve",
    "theta_em_path",
]


class AdmissibilityError(ValueError):
    """A grid/theta/taming combination violates a step-size restriction."""


class NonConvergence(RuntimeError):
    """The implicit stage solver failed to reach tolerance.

    Attributes
    ----------
    iterations : int
        Iterations spent before giving up.
    residual : float
        Largest remaining residual norm across the batch.
    """

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid aligned with the delay.

    ``step_h * steps_per_delay_m`` must equal the delay and
    ``step_h * total_steps_N`` the horizon, both to within one floating
    point rounding unit; alignment is what lets delayed lookups be plain
    integer index shifts.
    """

    step_h: float
    steps_per_delay_m: int
    total_steps_N: int
    theta: float

    def __post_init__(self):
        if not self.step_h > 0.0:
            raise ValueError(f"step_h must be > 0, got {self.step_h}")
        if int(self.steps_per_delay_m) < 1:
            raise ValueError("steps_per_delay_m must be >= 1")
        if int(self.total_steps_N) < 1:
            raise ValueError("total_steps_N must be >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")

    @classmethod
    def for_problem(
        cls,
        problem: SddeProblem,
        *,
        theta: float,
        level: int | None = None,
        M: int = 2,
        step_h: float | None = None,
    ) -> "GridSpec":
        """Build a delay-aligned grid for ``problem``.

        Either ``level`` (grid step ``h = T * M**-level``) or an explicit
        ``step_h`` must be given.  Raises ``ValueError`` when the implied
        step counts are not within one rounding unit of integers.
        """
        if (level is None) == (step_h is None):
            raise ValueError("give exactly one of level or step_h")
        if level is not None:
            if level < 0:
                raise ValueError("level must be >= 0")
            if M < 2:
                raise ValueError("M must be >= 2")
            step_h = problem.horizon * float(M) ** (-level)
        m = _near_int(problem.delay / step_h, "delay / step_h")
        N = _near_int(problem.horizon / step_h, "horizon / step_h")
        grid = cls(step_h=step_h, steps_per_delay_m=m, total_steps_N=N,
                   theta=theta)
        grid.validate_against(problem)
        return grid

    def validate_against(self, problem: SddeProblem) -> None:
        """Check delay and horizon alignment against ``problem``."""
        m, N, h = self.steps_per_delay_m, self.total_steps_N, self.step_h
        if abs(m * h - problem.delay) > np.spacing(problem.delay):
            raise ValueError(
                f"grid misaligned with delay: m*h = {m * h!r} "
                f"vs tau = {problem.delay!r}"
            )
        if abs(N * h - problem.horizon) > np.spacing(problem.horizon):
            raise ValueError(
                f"grid misaligned with horizon: N*h = {N * h!r} "
                f"vs T = {problem.horizon!r}"
            )


def _near_int(x: float, what: str) -> int:
    n = int(round(x))
    if n < 1 or abs(x - n) > 1e-9 * max(1.0, abs(x)):
        raise ValueError(f"{what} = {x!r} is not a positive integer")
    return n


class DelayBuffer:
    """Path storage indexed by grid step, history included.

    ``state(n)`` returns the state at grid index ``n`` for
    ``-m <= n <= N``; negative indices address the initial segment.
    ``values`` is the raw array of shape ``(N + m + 1, a)`` for a single
    path or ``(N + m + 1, P, a)`` for a batch of ``P`` paths.
    """

    def __init__(self, values: np.ndarray, m: int, step_h: float):
        self.values = values
        self.m = int(m)
        self.step_h = float(step_h)
        self.total_steps = values.shape[0] - 1 - self.m

    def state(self, n: int) -> np.ndarray:
        if not -self.m <= n <= self.total_steps:
            raise IndexError(
                f"grid index {n} outside [{-self.m}, {self.total_steps}]"
            )
        return self.values[self.m + n]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    @property
    def times(self) -> np.ndarray:
        return self.step_h * np.arange(-self.m, self.total_steps + 1)

    @property
    def batched(self) -> bool:
        return self.values.ndim == 3


def tame_drift(fvals: np.ndarray, h_coarse: float, delta: float) -> np.ndarray:
    """Scale drift values down to norm at most ``h_coarse**-delta``.

    Applies ``f -> f / (1 + h_coarse^delta |f|)`` with the Euclidean norm
    over the last axis.  Leaves direction unchanged and is the identity
    at ``f = 0``.
    """
    f = np.asarray(fvals, dtype=float)
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    return f / (1.0 + h_coarse**delta * norm)


@dataclass(frozen=True)
class TamedDrift:
    """A drift together with its taming step size and exponent.

    Calling the object evaluates ``base`` and applies :func:`tame_drift`
    with ``h_coarse**delta``.  ``delta`` must lie in (0, 1/2]; the value
    1/2 is the natural default and smaller values trade bias for a
    stronger bound on the tamed drift.
    """

    base: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h_coarse: float
    delta: float = 0.5

    def __post_init__(self):
        if not self.h_coarse > 0.0:
            raise ValueError(f"h_coarse must be > 0, got {self.h_coarse}")
        if not 0.0 < self.delta <= 0.5:
            raise ValueError(f"delta must lie in (0, 1/2], got {self.delta}")

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return tame_drift(self.base(x, y), self.h_coarse, self.delta)

    @property
    def bound(self) -> float:
        """Upper bound ``h_coarse**-delta`` on the tamed drift norm."""
        return self.h_coarse ** (-self.delta)


def check_admissibility(
    problem: SddeProblem, grid: GridSpec, taming: TamedDrift | None = None
) -> None:
    """Raise :class:`AdmissibilityError` if step-size restrictions fail.

    Global Lipschitz drift, theta > 0:
        ``theta * h < 1 / max(alpha_bar, 6 beta)`` with
        ``alpha_bar = 1/2 + alpha^2`` and ``beta`` the growth constant.
    Global Lipschitz drift, theta = 0:
        ``h < 1``.
    One-sided Lipschitz drift (requires taming):
        ``theta * h_coarse < 2 / alpha1`` for the taming step ``h_coarse``,
        plus ``h < 1``.  Untamed stepping of a one-sided problem is only
        admitted for theta = 0, where it runs without any moment
        guarantee (useful precisely to demonstrate blow-up).
    """
    theta, h = grid.theta, grid.step_h
    reg = problem.regularity
    if isinstance(reg, GlobalLipschitz):
        if theta == 0.0:
            if not h < 1.0:
                raise AdmissibilityError(
                    f"h = {h} >= 1 (explicit scheme requires h < 1)"
                )
            return
        cap = derived_constants(problem)["step_cap"]
        if not theta * h < cap:
            raise AdmissibilityError(
                f"theta*h = {theta * h} >= 1/max(alpha_bar, 6*beta) = {cap} "
                "(implicit scheme requires theta*h < 1/max(alpha_bar, 6*beta))"
            )
        return
    assert isinstance(reg, OneSidedLipschitz)
    if not h < 1.0:
        raise AdmissibilityError(f"h = {h} >= 1 (requires h < 1)")
    if taming is None:
        if theta > 0.0:
            raise AdmissibilityError(
                "implicit stepping of a one-sided Lipschitz drift requires "
                "drift taming (theta > 0 without taming is not admissible)"
            )
        return
    cap = 2.0 / reg.alpha1
    if not theta * taming.h_coarse < cap:
        raise AdmissibilityError(
            f"theta*h_coarse = {theta * taming.h_coarse} >= 2/alpha1 = {cap} "
            "(tamed implicit scheme requires theta*h_coarse < 2/alpha1)"
        )


def implicit_step_solve(
    y_target: np.ndarray,
    delayed: np.ndarray,
    drift: Callable[[np.ndarray, np.ndarray], np.ndarray],
    theta: float,
    h: float,
    x0: np.ndarray | None = None,
    tol_abs: float = 1e-13,
    max_iter: int = 200,
) -> np.ndarray:
    """Solve ``x - theta h f(x, delayed) = y_target`` for ``x``.

    Runs fixed-point iteration while it contracts and switches to a damped
    Newton method with finite-difference Jacobians when it stalls.  The
    residual is measured as ``max_batch |x - theta h f(x, d) - y|`` and
    must fall below ``tol_abs``.  Raises :class:`NonConvergence` after
    ``max_iter`` total iterations; the step size is never adapted here.
    """
    y = np.asarray(y_target, dtype=float)
    d = np.asarray(delayed, dtype=float)
    th = theta * h
    if th == 0.0:
        return y.copy()

    x = y.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    fp_budget = min(60, max_iter)
    prev_res = np.inf
    used = 0
    for _ in range(fp_budget):
        fx = drift(x, d)
        res_vec = x - th * fx - y
        res = float(np.max(np.linalg.norm(res_vec, axis=-1), initial=0.0))
        used += 1
        if res <= tol_abs:
            return x
        if not np.isfinite(res) or res > 4.0 * prev_res:
            break  # diverging, hand over to Newton
        if res > 0.9 * prev_res and used >= 5:
            break  # too slow, hand over to Newton
        prev_res = res
        x = y + th * fx
    if not np.all(np.isfinite(x)):
        x = y.copy()
    return _newton_solve(y, d, drift, th, x, tol_abs, max_iter - used, used)


def _newton_solve(y, d, drift, th, x, tol_abs, budget, used):
    # Damped Newton on r(x) = x - th*f(x, d) - y with FD Jacobians,
    # vectorised over the batch.
    a = y.shape[-1]
    eye = np.eye(a)
    sqrt_eps = math.sqrt(np.finfo(float).eps)
    res = np.inf
    for _ in range(max(budget, 1)):
        fx = drift(x, d)
        r = x - th * fx - y
        rn = np.linalg.norm(r, axis=-1)
        res = float(np.max(rn, initial=0.0))
        used += 1
        if res <= tol_abs:
            return x
        if not np.isfinite(res):
            break
        jac = np.empty(x.shape + (a,))
        for j in range(a):
            dx = sqrt_eps * np.maximum(1.0, np.abs(x[..., j]))
            xp = x.copy()
            xp[..., j] += dx
            jac[..., j] = (drift(xp, d) - fx) / dx[..., None]
        amat = eye - th * jac
        try:
            step = np.linalg.solve(amat, -r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        lam = np.ones(rn.shape)
        x_new = x + step
        for _ in range(25):
            rn_new = np.linalg.norm(x_new - th * drift(x_new, d) - y, axis=-1)
            bad = ~(rn_new <= np.maximum(1.0 - 0.25 * lam, 0.0) * rn + tol_abs)
            bad &= rn > tol_abs
            if not np.any(bad & (lam > 1e-6)):
                break
            lam = np.where(bad, 0.5 * lam, lam)
            x_new = x + lam[..., None] * step
        x = x_new
    raise NonConvergence(
        f"implicit stage stalled at residual {res:.3e} after {used} "
        f"iterations (tolerance {tol_abs:.1e})",
        iterations=used,
        residual=res,
    )


def _step(x, x_del, x_del_next, h, theta, drift, diffusion, eps, dw):
    """Advance one grid step; shared by single paths and coupled pairs."""
    fx = drift(x, x_del)
    if dw is None:
        base = x + h * fx
    else:
        gx = diffusion(x, x_del)
        base = x + (1.0 - theta) * h * fx if theta > 0.0 else x + h * fx
        base = base + eps * np.einsum("...ij,...j->...i", gx, dw)
    if theta == 0.0:
        return base
    if dw is None:
        base = x + (1.0 - theta) * h * fx
    x0 = base + theta * h * fx
    return implicit_step_solve(base, x_del_next, drift, theta, h, x0=x0)


def theta_em_path(
    problem: SddeProblem,
    grid: GridSpec,
    noise: Union[NoiseStream, np.ndarray, None] = None,
    taming: TamedDrift | None = None,
    check: bool = True,
) -> DelayBuffer:
    """Simulate one batch of theta-EM paths on a delay-aligned grid.

    Parameters
    ----------
    problem, grid
        Problem instance and grid; the grid is validated against the
        problem and the step-size restrictions unless ``check=False``.
    noise : NoiseStream or ndarray or None
        ``None`` runs the drift-only skeleton (no diffusion term at all,
        regardless of the problem's eps).  A :class:`NoiseStream` supplies
        standard normal vectors; flat step ``j`` consumes the stream's
        substep ``(j // substeps, j % substeps)``, so a stream with
        ``substeps = M`` addressed on a coarse grid drives the fine grid
        of the corresponding coupled pair identically.  An ndarray is
        taken as the Brownian increments ``dW`` themselves (already
        scaled by sqrt(h)), shaped ``(N, d)`` or ``(N, P, d)``.
    taming : TamedDrift, optional
        Drift replacement for one-sided problems.

    Returns
    -------
    DelayBuffer
        History plus computed path, shape ``(N + m + 1, a)`` or
        ``(N + m + 1, P, a)`` matching the noise batch.
    """
    if check:
        grid.validate_against(problem)
        check_admissibility(problem, grid, taming)
    h, m, N = grid.step_h, grid.steps_per_delay_m, grid.total_steps_N
    theta = grid.theta
    a, dnoise = problem.dim_state, problem.dim_noise
    eps = problem.noise_scale
    drift = taming if taming is not None else problem.drift
    diffusion = problem.diffusion

    squeeze = False
    if noise is None:
        n_paths, provider, squeeze = 1, None, True
    elif isinstance(noise, NoiseStream):
        if noise.dim != dnoise:
            raise ValueError(
                f"noise stream dim {noise.dim} != problem dim_noise {dnoise}"
            )
        total_fine = (noise.n_steps or 0) * noise.substeps
        if noise.n_steps is not None and total_fine < N:
            raise ValueError(
                f"stream covers {total_fine} fine steps, grid needs {N}"
            )
        sqh = math.sqrt(h)
        paths2d = noise.with_paths(
            np.atleast_1d(np.asarray(noise.path_index))
        )
        squeeze = paths2d.n_paths == 1 and np.ndim(noise.path_index) == 0
        n_paths = paths2d.n_paths

        def provider(n: int) -> np.ndarray:
            return sqh * paths2d.fine_step(n)

    else:
        arr = np.asarray(noise, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, None, :]
            squeeze = True
        if arr.ndim != 3 or arr.shape[0] != N or arr.shape[2] != dnoise:
            raise ValueError(
                f"increment array must have shape (N, P, d) = ({N}, *, "
                f"{dnoise}), got {np.asarray(noise).shape}"
            )
        n_paths = arr.shape[1]

        def provider(n: int) -> np.ndarray:
            return arr[n]

    if eps == 0.0:
        provider = None  # drift-only: keep batch shape, drop the noise term

    hist_times = h * np.arange(-m, 1)
    hist = np.asarray(problem.initial_segment(hist_times), dtype=float)
    if hist.shape != (m + 1, a):
        raise ValueError(
            f"initial segment returned shape {hist.shape}, "
            f"expected {(m + 1, a)}"
        )
    values = np.empty((N + m + 1, n_paths, a))
    values[: m + 1] = hist[:, None, :]

    for n in range(N):
        dw = provider(n) if provider is not None else None
        try:
            values[m + n + 1] = _step(
                values[m + n], values[n], values[n + 1],
                h, theta, drift, diffusion, eps, dw,
            )
        except NonConvergence as exc:
            raise NonConvergence(
                f"step {n} (t = {n * h:.6g}): {exc}",
                iterations=exc.iterations,
                residual=exc.residual,
            ) from None

    if squeeze:
        values = values[:, 0, :]
    return DelayBuffer(values, m=m, step_h=h)
