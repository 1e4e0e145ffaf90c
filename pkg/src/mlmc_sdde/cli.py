"""Command-line front end: pick a problem and an experiment, get CSV.

Every experiment writes one tidy CSV table (schema shared with the
analysis module) plus a human-readable ``<out>.summary.txt`` with the
resolved configuration, headline results, and wall time.  Runs are
deterministic: the same configuration and seed produce byte-identical
CSV regardless of ``--jobs``, because all parallelism is over fixed
chunks or sweep cells with per-cell substreams.

Configuration is layered: per-experiment defaults, then a ``--config``
file of flat ``key=value`` lines, then command-line flags.  The config
file additionally accepts problem coefficient overrides (``a1``, ``a2``,
``b1``, ``b2``, ``g0``, ``c``, ``sigma``, ``x0``, ``tau``, ``horizon``),
``payoff``, and ``eps0`` (the fixed noise scale of the level sweep in
rates-moment / rates-variance), which have no dedicated flags.

Exit codes: 0 success; 2 configuration or admissibility error (the
violated constraint is printed); 3 implicit-solver non-convergence;
4 output I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import (
    _record,
    _taming_for_level,
    coupled_moment_rates,
    coupled_variance_rates,
    small_noise_deviation,
    strong_error_rate,
)
from .coupling import LevelPair, coupled_payoff_delta, simulate_coupled
from .mlmc import mlmc_estimate
from .model import SddeProblem, builtin_payoff, builtin_problem
from .rng import NoiseStream
from .scheme import AdmissibilityError, GridSpec, NonConvergence, theta_em_path

__all__ = ["RunConfig", "main", "run"]

EXPERIMENTS = ("path", "coupled", "mlmc", "rates-strong", "rates-moment",
               "rates-variance", "deviation")

CSV_COLUMNS = ("experiment", "level", "h", "eps", "theta", "delta",
               "statistic", "value", "samples", "seed")

SEED_ENV_VAR = "MLMC_SDDE_SEED"

_COEFFICIENT_KEYS = ("a1", "a2", "b1", "b2", "g0", "c", "sigma", "x0",
                     "tau", "horizon")

# Noise-scale window whose upper half keeps the eps-driven term of each
# coupled bound dominant at level 7 for the strong-noise linear problem.
_EPS_WINDOW = (0.0625, 0.08838834764831845, 0.125,
               0.17677669529663687, 0.25)

# Linear problem rebalanced so diffusion dominates drift; used by the
# rates-moment / rates-variance defaults so one run covers both sweeps.
_STRONG_NOISE = {"a1": -0.25, "a2": 0.125, "b1": 1.0, "b2": 0.25}

_COMMON_DEFAULTS = dict(
    problem="linear_scalar", payoff="identity", theta=0.0, delta=None,
    M=2, base_level=5, max_level=None, eps=None, eps0=None,
    samples=1000, target_se=None, problem_overrides={},
)

DEFAULTS: dict[str, dict] = {
    "path": dict(_COMMON_DEFAULTS),
    "coupled": dict(_COMMON_DEFAULTS, payoff="tanh"),
    "mlmc": dict(_COMMON_DEFAULTS, payoff="tanh", base_level=3, max_level=7,
                 samples=None, target_se=0.002),
    "rates-strong": dict(_COMMON_DEFAULTS, base_level=3, max_level=7,
                         eps=1e-4, samples=10_000),
    "rates-moment": dict(_COMMON_DEFAULTS, base_level=3, max_level=7,
                         eps=_EPS_WINDOW, eps0=1e-4, samples=10_000,
                         problem_overrides=dict(_STRONG_NOISE)),
    "rates-variance": dict(_COMMON_DEFAULTS, payoff="tanh", base_level=3,
                           max_level=7, eps=_EPS_WINDOW, eps0=1e-5,
                           samples=20_000,
                           problem_overrides=dict(_STRONG_NOISE)),
    "deviation": dict(_COMMON_DEFAULTS,
                      eps=(0.002, 0.005, 0.01, 0.02, 0.05)),
}

_SWEEP_EXPERIMENTS = ("rates-moment", "rates-variance", "deviation")

_PATH_CHUNK = 4096


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


@dataclass
class RunConfig:
    """Fully resolved run description, after all layering."""

    experiment: str
    problem: str
    problem_overrides: dict = field(default_factory=dict)
    payoff: str = "identity"
    theta: float = 0.0
    delta: float | None = None
    M: int = 2
    base_level: int = 3
    max_level: int | None = None
    eps: float | tuple[float, ...] | None = None
    eps0: float | None = None
    samples: int | None = None
    target_se: float | None = None
    seed: int = 0
    out: str = "mlmc_sdde.csv"
    jobs: int | None = None

    def echo_lines(self) -> list[str]:
        def show(v):
            if v is None:
                return "none"
            if isinstance(v, tuple):
                return ",".join(repr(float(x)) for x in v)
            if isinstance(v, float):
                return repr(v)
            return str(v)

        lines = [f"experiment = {self.experiment}",
                 f"problem = {self.problem}"]
        for key in sorted(self.problem_overrides):
            lines.append(f"{key} = {show(float(self.problem_overrides[key]))}")
        for key in ("payoff", "theta", "delta", "M", "base_level",
                    "max_level", "eps", "eps0", "samples", "target_se",
                    "seed", "jobs", "out"):
            lines.append(f"{key} = {show(getattr(self, key))}")
        return lines


# ---------------------------------------------------------------------------
# Configuration layering
# ---------------------------------------------------------------------------

_INT_KEYS = ("M", "base_level", "max_level", "samples", "seed", "jobs")
_FLOAT_KEYS = ("theta", "delta", "eps0", "target_se") + _COEFFICIENT_KEYS
_STR_KEYS = ("experiment", "problem", "payoff", "out")
_CONFIG_KEYS = _INT_KEYS + _FLOAT_KEYS + _STR_KEYS + ("eps",)


def _parse_eps(text: str) -> float | tuple[float, ...]:
    try:
        values = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"eps must be a comma-separated float list, "
                          f"got {text!r}") from None
    return values[0] if len(values) == 1 else values


def parse_config_file(path: str) -> dict:
    """Read flat ``key=value`` lines; '#' lines and blanks are skipped."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    values: dict = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(
                f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, text = line.partition("=")
        key, text = key.strip(), text.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(
                f"{path}:{lineno}: unknown config key {key!r} "
                f"(known keys: {', '.join(sorted(_CONFIG_KEYS))})")
        try:
            if key == "eps":
                values[key] = _parse_eps(text)
            elif key in _INT_KEYS:
                values[key] = int(text)
            elif key in _FLOAT_KEYS:
                values[key] = float(text)
            else:
                values[key] = text
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: bad value {text!r} for {key}") from None
    return values


def _build_parser() -> argparse.ArgumentParser:
    lines = ["per-experiment defaults (any field can be overridden):"]
    for name, d in DEFAULTS.items():
        eps = d["eps"]
        if isinstance(eps, tuple):
            eps_text = ",".join(f"{x:g}" for x in eps)
        else:
            eps_text = "problem default" if eps is None else f"{eps:g}"
        over = "".join(f" {k}={v:g}" for k, v in
                       sorted(d["problem_overrides"].items()))
        n_text = (f"samples={d['samples']}" if d["samples"] is not None
                  else f"target-se={d['target_se']:g}")
        levels = (f"level {d['base_level']}" if d["max_level"] is None
                  else f"levels {d['base_level']}..{d['max_level']}")
        lines.append(f"  {name}: problem={d['problem']}{over} "
                     f"payoff={d['payoff']} theta={d['theta']:g} {levels} "
                     f"M={d['M']} eps={eps_text}"
                     + (f" eps0={d['eps0']:g}" if d["eps0"] else "")
                     + f" {n_text}")
    lines += [
        "",
        "config file: flat key=value lines; flags override file values.",
        "config-only keys: payoff, eps0, and problem coefficients "
        + ", ".join(_COEFFICIENT_KEYS) + ".",
        f"environment: {SEED_ENV_VAR} supplies the seed when neither flag "
        "nor config does.",
        "exit codes: 0 ok, 2 config/admissibility, 3 solver "
        "non-convergence, 4 output I/O.",
    ]
    parser = argparse.ArgumentParser(
        prog="mlmc-sdde",
        description="Simulation and convergence-rate experiments for "
                    "theta-EM / multilevel Monte Carlo on delay equations "
                    "with scaled noise.",
        epilog="\n".join(lines),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    add = parser.add_argument
    add("--experiment", choices=EXPERIMENTS,
        help="what to run (default: mlmc)")
    add("--problem", metavar="NAME",
        help="builtin problem name (default: per experiment)")
    add("--theta", type=float, metavar="X",
        help="implicitness parameter in [0, 1] (default: 0.0)")
    add("--delta", type=float, metavar="X",
        help="drift-taming exponent in (0, 0.5]; omit to run untamed "
            "(default: untamed)")
    add("--M", type=int, metavar="N",
        help="level refinement factor (default: 2)")
    add("--base-level", type=int, metavar="L",
        help="coarsest level; the only level for path/coupled/deviation "
            "(default: per experiment)")
    add("--max-level", type=int, metavar="L",
        help="finest level for mlmc and rates sweeps (default: per "
            "experiment)")
    add("--eps", metavar="X[,X...]",
        help="noise scale; a comma list is the sweep for deviation/"
            "rates-moment/rates-variance (default: per experiment)")
    add("--samples", type=int, metavar="N",
        help="paths per level/cell; for mlmc, explicit samples per level "
            "(default: per experiment)")
    add("--target-se", type=float, metavar="X",
        help="mlmc only: auto-allocate samples for this standard error "
            "(default: 0.002 for mlmc)")
    add("--seed", type=int, metavar="N",
        help=f"master seed (default: ${SEED_ENV_VAR} or 0)")
    add("--out", metavar="PATH",
        help="CSV output path (default: mlmc-sdde-<experiment>.csv)")
    add("--jobs", type=int, metavar="N",
        help="worker threads; never changes results (default: hardware "
            "parallelism)")
    add("--config", metavar="PATH",
        help="key=value config file, overridden by flags (default: none)")
    return parser


def build_config(argv: list[str] | None = None) -> RunConfig:
    """Parse flags + optional config file into a resolved RunConfig."""
    args = _build_parser().parse_args(argv)
    file_values = parse_config_file(args.config) if args.config else {}

    flag_values = {
        key: getattr(args, key)
        for key in ("experiment", "problem", "theta", "delta", "M",
                    "base_level", "max_level", "samples", "target_se",
                    "seed", "out", "jobs")
        if getattr(args, key) is not None
    }
    if args.eps is not None:
        flag_values["eps"] = _parse_eps(args.eps)

    experiment = flag_values.get("experiment",
                                 file_values.get("experiment", "mlmc"))
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r} "
                          f"(choose from {', '.join(EXPERIMENTS)})")
    defaults = DEFAULTS[experiment]

    merged = {k: v for k, v in defaults.items() if k != "problem_overrides"}
    merged.update({k: v for k, v in file_values.items()
                   if k not in _COEFFICIENT_KEYS})
    merged.update(flag_values)
    merged["experiment"] = experiment

    # Default coefficient overrides belong to the default problem; drop
    # them when another problem is chosen, then apply user coefficients.
    overrides = dict(defaults["problem_overrides"])
    if merged["problem"] != defaults["problem"]:
        overrides = {}
    overrides.update({k: v for k, v in file_values.items()
                      if k in _COEFFICIENT_KEYS})
    merged["problem_overrides"] = overrides

    # samples and target-se are alternatives for mlmc: a user-provided one
    # displaces the other's default rather than colliding with it.
    explicit = set(file_values) | set(flag_values)
    if "target_se" in explicit and experiment != "mlmc":
        raise ConfigError("target-se applies to the mlmc experiment only")
    if experiment == "mlmc":
        if "samples" in explicit and "target_se" not in explicit:
            merged["target_se"] = None
        if "target_se" in explicit and "samples" not in explicit:
            merged["samples"] = None

    if "seed" not in merged or merged.get("seed") is None:
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            try:
                merged["seed"] = int(env_seed)
            except ValueError:
                raise ConfigError(
                    f"{SEED_ENV_VAR}={env_seed!r} is not an integer"
                ) from None
        else:
            merged["seed"] = 0
    merged.setdefault("out", None)
    if merged["out"] is None:
        merged["out"] = f"mlmc-sdde-{experiment}.csv"
    merged.setdefault("jobs", None)
    if merged["jobs"] is None:
        merged["jobs"] = os.cpu_count() or 1

    cfg = RunConfig(**merged)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: RunConfig) -> None:
    if cfg.samples is not None and cfg.samples < 2:
        raise ConfigError(f"samples must be >= 2, got {cfg.samples}")
    if cfg.jobs is not None and cfg.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {cfg.jobs}")
    if cfg.experiment in _SWEEP_EXPERIMENTS:
        if not isinstance(cfg.eps, tuple):
            raise ConfigError(
                f"{cfg.experiment} needs an eps sweep (comma list of >= 3 "
                f"noise scales), got {cfg.eps!r}")
    elif isinstance(cfg.eps, tuple):
        raise ConfigError(
            f"{cfg.experiment} takes a single eps value, got a list")
    if cfg.experiment == "mlmc":
        if (cfg.samples is None) == (cfg.target_se is None):
            raise ConfigError(
                "mlmc needs exactly one of samples and target-se")
    needs_max = cfg.experiment in ("mlmc", "rates-strong", "rates-moment",
                                   "rates-variance")
    if needs_max:
        if cfg.max_level is None:
            raise ConfigError(f"{cfg.experiment} requires max_level")
        if cfg.max_level < cfg.base_level:
            raise ConfigError(
                f"max_level {cfg.max_level} < base_level {cfg.base_level}")


# ---------------------------------------------------------------------------
# Experiment runners: each returns (records, summary result lines)
# ---------------------------------------------------------------------------

def _build_problem(cfg: RunConfig) -> SddeProblem:
    try:
        problem = builtin_problem(cfg.problem, **cfg.problem_overrides)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    except TypeError as exc:
        raise ConfigError(
            f"problem {cfg.problem!r} rejects a coefficient override: {exc}"
        ) from None
    scale = cfg.eps0 if cfg.eps0 is not None else (
        cfg.eps if isinstance(cfg.eps, float) else None)
    if scale is not None:
        problem = problem.with_noise_scale(scale)
    return problem


def _build_payoff(cfg: RunConfig):
    try:
        return builtin_payoff(cfg.payoff)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None


def _chunk_spans(n: int, size: int):
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def _run_path(cfg: RunConfig, problem: SddeProblem):
    level = cfg.base_level
    grid = GridSpec.for_problem(problem, theta=cfg.theta, level=level,
                                M=cfg.M)
    taming = _taming_for_level(problem, level, cfg.M, cfg.delta)
    terminals, sups = [], []
    for a, b in _chunk_spans(cfg.samples, _PATH_CHUNK):
        stream = NoiseStream(master_seed=cfg.seed, level=level,
                             path_index=np.arange(a, b),
                             dim=problem.dim_noise, substeps=1,
                             n_steps=grid.total_steps_N)
        path = theta_em_path(problem, grid, noise=stream, taming=taming)
        body = path.values[path.m:]
        terminals.append(body[-1])
        sups.append(np.sum(body * body, axis=-1).max(axis=0))
    terminal = np.concatenate(terminals)
    sup_sq = np.concatenate(sups)
    stats = (
        ("terminal_mean", float(terminal[:, 0].mean())),
        ("terminal_variance", float(np.var(terminal[:, 0], ddof=1))),
        ("terminal_second_moment", float(np.sum(terminal**2, axis=-1).mean())),
        ("sup_second_moment", float(sup_sq.mean())),
    )
    records = [
        _record("path", level, grid.step_h, problem.noise_scale, cfg.theta,
                cfg.delta, name, value, cfg.samples, cfg.seed)
        for name, value in stats
    ]
    summary = [f"{name} = {value!r}" for name, value in stats]
    return records, summary


def _run_coupled(cfg: RunConfig, problem: SddeProblem):
    level = cfg.base_level
    psi = _build_payoff(cfg)
    pair = LevelPair.for_problem(problem, level, M=cfg.M, theta=cfg.theta,
                                 delta=cfg.delta)
    node_sq_sum = None
    deltas = []
    for a, b in _chunk_spans(cfg.samples, _PATH_CHUNK):
        stream = pair.noise_stream(cfg.seed, np.arange(a, b),
                                   problem.dim_noise)
        coupled = simulate_coupled(problem, pair, stream)
        diff = coupled.state_difference()
        chunk_sum = np.sum(diff * diff, axis=-1).sum(axis=1)
        node_sq_sum = (chunk_sum if node_sq_sum is None
                       else node_sq_sum + chunk_sum)
        deltas.append(coupled_payoff_delta(coupled, psi)[0])
    per_node = node_sq_sum / cfg.samples
    delta_arr = np.concatenate(deltas)
    stats = (
        ("coupled_sup_sq_moment", float(per_node.max())),
        ("coupled_terminal_sq_moment", float(per_node[-1])),
        ("mean_delta", float(delta_arr.mean())),
        ("var_delta", float(np.var(delta_arr, ddof=1))),
    )
    records = [
        _record("coupled", level, pair.h_fine, problem.noise_scale,
                cfg.theta, cfg.delta, name, value, cfg.samples, cfg.seed)
        for name, value in stats
    ]
    summary = [f"payoff = {psi.name}"]
    summary += [f"{name} = {value!r}" for name, value in stats]
    return records, summary


def _run_mlmc(cfg: RunConfig, problem: SddeProblem):
    psi = _build_payoff(cfg)
    n_levels = cfg.max_level - cfg.base_level + 1
    samples_per_level = ([cfg.samples] * n_levels
                         if cfg.samples is not None else None)
    estimate = mlmc_estimate(
        problem, psi, cfg.base_level, cfg.max_level, M=cfg.M,
        theta=cfg.theta, delta=cfg.delta,
        samples_per_level=samples_per_level, target_se=cfg.target_se,
        seed=cfg.seed, jobs=cfg.jobs,
    )
    records = []
    for stats in estimate.levels:
        h = problem.horizon * float(cfg.M) ** (-stats.level)
        for name in ("mean_delta", "var_delta", "mean_fine", "cost_units"):
            records.append(_record(
                "mlmc", stats.level, h, problem.noise_scale, cfg.theta,
                cfg.delta, name, float(getattr(stats, name)),
                stats.samples, cfg.seed))
    summary = [
        f"payoff = {psi.name}",
        f"value = {estimate.value!r}",
        f"std_error = {estimate.std_error!r}",
        f"total_cost = {estimate.total_cost!r}",
        "samples_per_level = "
        + ",".join(str(s.samples) for s in estimate.levels),
    ]
    summary += [f"warning: {w}" for w in estimate.warnings]
    return records, summary


def _fit_lines(tag, fit):
    return [
        f"{tag}_slope = {fit.slope!r}",
        f"{tag}_intercept = {fit.intercept!r}",
        f"{tag}_r_squared = {fit.r_squared!r}",
    ]


def _run_rates_strong(cfg: RunConfig, problem: SddeProblem):
    psi = _build_payoff(cfg)
    result = strong_error_rate(
        problem, psi, theta=cfg.theta,
        level_sweep=range(cfg.base_level, cfg.max_level + 1),
        n_paths=cfg.samples, seed=cfg.seed, M=cfg.M, jobs=cfg.jobs,
    )
    summary = [f"payoff = {psi.name}", f"ref_level = {result.ref_level}"]
    summary += _fit_lines("h", result.fit)
    return list(result.records), summary


def _run_rates_moment(cfg: RunConfig, problem: SddeProblem):
    result = coupled_moment_rates(
        problem, theta=cfg.theta, delta=cfg.delta,
        level_sweep=range(cfg.base_level, cfg.max_level + 1),
        eps_sweep=cfg.eps, n_paths=cfg.samples, seed=cfg.seed, M=cfg.M,
        jobs=cfg.jobs,
    )
    summary = _fit_lines("h", result.h_slope)
    summary += _fit_lines("eps", result.eps_slope)
    summary += _fit_lines("h_terminal", result.h_slope_terminal)
    summary += _fit_lines("eps_terminal", result.eps_slope_terminal)
    return list(result.records), summary


def _run_rates_variance(cfg: RunConfig, problem: SddeProblem):
    psi = _build_payoff(cfg)
    result = coupled_variance_rates(
        problem, psi, theta=cfg.theta, delta=cfg.delta,
        level_sweep=range(cfg.base_level, cfg.max_level + 1),
        eps_sweep=cfg.eps, n_paths=cfg.samples, seed=cfg.seed, M=cfg.M,
        jobs=cfg.jobs,
    )
    ratios = [c / u for c, u in
              zip(result.h_coupled + result.eps_coupled,
                  result.h_uncoupled + result.eps_uncoupled)]
    summary = [f"payoff = {psi.name}"]
    summary += _fit_lines("h", result.h_slope)
    summary += _fit_lines("eps", result.eps_slope)
    summary.append(f"max_coupled_over_uncoupled = {max(ratios)!r}")
    return list(result.records), summary


def _run_deviation(cfg: RunConfig, problem: SddeProblem):
    result = small_noise_deviation(
        problem, level=cfg.base_level, theta=cfg.theta, delta=cfg.delta,
        eps_sweep=cfg.eps, n_paths=cfg.samples, seed=cfg.seed, M=cfg.M,
        jobs=cfg.jobs,
    )
    summary = _fit_lines("eps", result.fit)
    if result.envelope is not None:
        env = result.envelope
        summary += [
            "envelope_coefficients = "
            + ",".join(repr(c) for c in env.coefficients),
            f"envelope_scale = {env.scale!r}",
            f"envelope_r_squared = {env.r_squared!r}",
        ]
    return list(result.records), summary


_RUNNERS = {
    "path": _run_path,
    "coupled": _run_coupled,
    "mlmc": _run_mlmc,
    "rates-strong": _run_rates_strong,
    "rates-moment": _run_rates_moment,
    "rates-variance": _run_rates_variance,
    "deviation": _run_deviation,
}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _csv_cell(key: str, value) -> str:
    if value is None:
        return ""
    if key in ("level", "samples", "seed"):
        return str(int(value))
    if key in ("h", "eps", "theta", "delta", "value"):
        return repr(float(value))
    return str(value)


def records_to_csv(records) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for rec in records:
        lines.append(",".join(_csv_cell(k, rec[k]) for k in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def run(cfg: RunConfig) -> int:
    """Execute one resolved configuration; returns the exit code."""
    started = time.perf_counter()
    problem = _build_problem(cfg)
    records, result_lines = _RUNNERS[cfg.experiment](cfg, problem)
    wall = time.perf_counter() - started

    summary_lines = ["# mlmc-sdde run summary", "", "[config]"]
    summary_lines += cfg.echo_lines()
    summary_lines += ["", "[result]"]
    summary_lines += result_lines
    summary_lines += [f"rows = {len(records)}",
                      f"wall_seconds = {wall:.3f}", ""]

    _write_atomic(cfg.out, records_to_csv(records))
    _write_atomic(cfg.out + ".summary.txt", "\n".join(summary_lines))
    print(f"wrote {cfg.out} ({len(records)} rows) and "
          f"{cfg.out}.summary.txt in {wall:.1f}s")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = build_config(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except (ConfigError, AdmissibilityError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonConvergence as exc:
        print(f"error: solver failed to converge: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
