"""Coupled fine/coarse path pairs driven by one increment stream.

A pair at fine level ``l`` runs the theta scheme twice over the same
Brownian path: once with step ``h_l = T M^-l`` and once with step
``h_{l-1} = M h_l``.  Each coarse step consumes the sum of its ``M`` fine
substep draws,

    dW_coarse(n) = sqrt(h_l) * (xi(n,0) + ... + xi(n,M-1)),

so both paths see the same underlying Brownian motion and their payoff
difference telescopes across levels.  Delay alignment requires the fine
delay offset ``m_l`` to be divisible by ``M``; with ``tau = 0.25`` and
``T = 1`` at ``M = 2`` that means fine levels of at least 3.

For one-sided Lipschitz drifts each member uses the tamed drift of its
own level: the fine path tames with step ``h_{l-1}`` and the coarse path
with ``h_{l-2}``, which is why tamed pairs need ``l >= 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Payoff, SddeProblem
from .rng import NoiseStream
from .scheme import (
    DelayBuffer,
    GridSpec,
    NonConvergence,
    TamedDrift,
    _step,
    check_admissibility,
)

__all__ = ["LevelPair", "CoupledPair", "simulate_coupled", "coupled_payoff_delta"]


@dataclass(frozen=True)
class LevelPair:
    """Grid pair for one multilevel difference at fine level ``level``.

    ``grid_fine`` has step ``h_level = T M^-level`` and ``grid_coarse``
    has step ``M`` times larger.  ``delta`` switches on drift taming with
    the given exponent; ``None`` runs the plain drift.
    """

    M: int
    level: int
    theta: float
    grid_fine: GridSpec
    grid_coarse: GridSpec
    delta: float | None = None

    @classmethod
    def for_problem(
        cls,
        problem: SddeProblem,
        level: int,
        M: int = 2,
        theta: float = 0.0,
        delta: float | None = None,
    ) -> "LevelPair":
        if M < 2:
            raise ValueError(f"M must be >= 2, got {M}")
        if level < 1:
            raise ValueError(f"a pair needs level >= 1, got {level}")
        if delta is not None and level < 2:
            raise ValueError(
                "a tamed pair needs level >= 2: the coarse member tames "
                f"with the step of level {level - 2}"
            )
        grid_fine = GridSpec.for_problem(problem, theta=theta, level=level,
                                         M=M)
        grid_coarse = GridSpec.for_problem(problem, theta=theta,
                                           level=level - 1, M=M)
        if grid_fine.steps_per_delay_m % M != 0:
            raise ValueError(
                f"delay offset m = {grid_fine.steps_per_delay_m} at level "
                f"{level} is not divisible by M = {M}; the coarse grid "
                "cannot align with the delay"
            )
        return cls(M=M, level=level, theta=theta, grid_fine=grid_fine,
                   grid_coarse=grid_coarse, delta=delta)

    @property
    def h_fine(self) -> float:
        return self.grid_fine.step_h

    @property
    def h_coarse(self) -> float:
        return self.grid_coarse.step_h

    @property
    def n_coarse(self) -> int:
        return self.grid_coarse.total_steps_N

    @property
    def cost_per_path(self) -> int:
        """Fine plus coarse step count, the standard pair cost unit."""
        return self.grid_fine.total_steps_N + self.grid_coarse.total_steps_N

    def taming_for_fine(self, problem: SddeProblem) -> TamedDrift | None:
        if self.delta is None:
            return None
        return TamedDrift(problem.drift, h_coarse=self.h_coarse,
                          delta=self.delta)

    def taming_for_coarse(self, problem: SddeProblem) -> TamedDrift | None:
        if self.delta is None:
            return None
        return TamedDrift(problem.drift, h_coarse=self.M * self.h_coarse,
                          delta=self.delta)

    def noise_stream(self, master_seed: int, path_index,
                     dim: int) -> NoiseStream:
        """Stream laid out for this pair: one coarse step, M substeps."""
        return NoiseStream(
            master_seed=master_seed,
            level=self.level,
            path_index=path_index,
            dim=dim,
            substeps=self.M,
            n_steps=self.n_coarse,
        )


@dataclass
class CoupledPair:
    """Simulated pair: full fine path, coarse path, and their alignment."""

    pair: LevelPair
    fine: DelayBuffer
    coarse: DelayBuffer

    @property
    def fine_on_coarse_grid(self) -> np.ndarray:
        """Fine-path states at the coarse nodes, shape like ``coarse``."""
        m = self.fine.m
        return self.fine.values[m:][:: self.pair.M]

    @property
    def coarse_on_grid(self) -> np.ndarray:
        return self.coarse.values[self.coarse.m:]

    def state_difference(self) -> np.ndarray:
        """Fine minus coarse at every coarse node, shape (N_c + 1, ..., a)."""
        return self.fine_on_coarse_grid - self.coarse_on_grid


def simulate_coupled(
    problem: SddeProblem,
    pair: LevelPair,
    noise: NoiseStream,
    check: bool = True,
) -> CoupledPair:
    """Run both members of ``pair`` on one shared increment stream.

    ``noise`` must be laid out with ``substeps = pair.M`` fine draws per
    coarse step (see :meth:`LevelPair.noise_stream`).  The fine member
    consumes draw ``(n, k)`` at fine step ``n M + k``; the coarse member
    consumes the elementwise sum over ``k`` at coarse step ``n``, scaled
    by the same ``sqrt(h_fine)``.  The fine path produced here is bit for
    bit the path :func:`mlmc_sdde.scheme.theta_em_path` yields for the
    same stream on the fine grid.
    """
    gf, gc = pair.grid_fine, pair.grid_coarse
    tame_f = pair.taming_for_fine(problem)
    tame_c = pair.taming_for_coarse(problem)
    if check:
        gf.validate_against(problem)
        gc.validate_against(problem)
        check_admissibility(problem, gf, tame_f)
        check_admissibility(problem, gc, tame_c)
    if not isinstance(noise, NoiseStream):
        raise TypeError("simulate_coupled requires a NoiseStream")
    if noise.substeps != pair.M:
        raise ValueError(
            f"stream has {noise.substeps} substeps per step, pair needs "
            f"M = {pair.M}"
        )
    if noise.dim != problem.dim_noise:
        raise ValueError(
            f"noise stream dim {noise.dim} != problem dim_noise "
            f"{problem.dim_noise}"
        )
    if noise.n_steps is not None and noise.n_steps < gc.total_steps_N:
        raise ValueError(
            f"stream covers {noise.n_steps} coarse steps, grid needs "
            f"{gc.total_steps_N}"
        )

    a = problem.dim_state
    eps = problem.noise_scale
    theta = pair.theta
    h_f, h_c = gf.step_h, gc.step_h
    m_f, m_c = gf.steps_per_delay_m, gc.steps_per_delay_m
    n_c = gc.total_steps_N
    drift_f = tame_f if tame_f is not None else problem.drift
    drift_c = tame_c if tame_c is not None else problem.drift
    diffusion = problem.diffusion
    sqh = math.sqrt(h_f)

    stream = noise.with_paths(np.atleast_1d(np.asarray(noise.path_index)))
    squeeze = stream.n_paths == 1 and np.ndim(noise.path_index) == 0
    n_paths = stream.n_paths

    hist_f = np.asarray(
        problem.initial_segment(h_f * np.arange(-m_f, 1)), dtype=float
    )
    hist_c = np.asarray(
        problem.initial_segment(h_c * np.arange(-m_c, 1)), dtype=float
    )
    vf = np.empty((gf.total_steps_N + m_f + 1, n_paths, a))
    vc = np.empty((n_c + m_c + 1, n_paths, a))
    vf[: m_f + 1] = hist_f[:, None, :]
    vc[: m_c + 1] = hist_c[:, None, :]

    use_noise = eps > 0.0
    for n in range(n_c):
        csum = None
        for k in range(pair.M):
            xi = stream.gaussian_increment(n, k)
            csum = xi if k == 0 else csum + xi
            j = n * pair.M + k
            dw = sqh * xi if use_noise else None
            vf[m_f + j + 1] = _coupled_step(
                vf, m_f, j, h_f, theta, drift_f, diffusion, eps, dw, "fine"
            )
        dw = sqh * csum if use_noise else None
        vc[m_c + n + 1] = _coupled_step(
            vc, m_c, n, h_c, theta, drift_c, diffusion, eps, dw, "coarse"
        )

    if squeeze:
        vf = vf[:, 0, :]
        vc = vc[:, 0, :]
    return CoupledPair(
        pair=pair,
        fine=DelayBuffer(vf, m=m_f, step_h=h_f),
        coarse=DelayBuffer(vc, m=m_c, step_h=h_c),
    )


def _coupled_step(v, m, n, h, theta, drift, diffusion, eps, dw, tag):
    try:
        return _step(v[m + n], v[n], v[n + 1], h, theta, drift, diffusion,
                     eps, dw)
    except NonConvergence as exc:
        raise NonConvergence(
            f"{tag} member, step {n} (t = {n * h:.6g}): {exc}",
            iterations=exc.iterations,
            residual=exc.residual,
        ) from None


def coupled_payoff_delta(
    coupled: CoupledPair, payoff: Payoff
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal payoff difference and fine payoff for a simulated pair.

    Returns ``(psi_fine - psi_coarse, psi_fine)`` evaluated at the
    terminal states, each shaped like the path batch.
    """
    psi_fine = np.asarray(payoff.eval(coupled.fine.terminal), dtype=float)
    psi_coarse = np.asarray(payoff.eval(coupled.coarse.terminal), dtype=float)
    return psi_fine - psi_coarse, psi_fine
