"""Monte Carlo experiments comparing zero-locus currents with their closed forms.

An experiment samples ``N`` sections ``v = u₀ + u``, evaluates ``⟨η, [Z_v]⟩``
for each, and compares the sample mean with the quadrature of
``η ∧ E[Z_v]`` from :mod:`stochgbc.kacrice`.

Sample ``k`` always draws from ``rng_stream(seed, k)`` and per-sample results
are reduced in index order, so reports do not depend on the worker count.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .ensemble import builtin_drift, builtin_ensembles, rng_stream, sample
from .geometry import ortho_frame
from .kacrice import expected_current_density
from .manifold import evaluate_chunked, integrate_top_form
from .testforms import get_test_form
from .zeroloc import ExtractionError, ZeroCurve, ZeroLocator, coarea_check, evaluate_current

MAX_RESOLUTION = 512
DENSITY_DUMP_RESOLUTION = {2: 64, 3: 24}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.  Text form: ``key = value`` lines; ``none`` means unset.

    ``expected`` optionally pins the right-hand side analytically (checked to
    ``rhs_tol``); ``per_sample_exact`` requires every sample value to equal
    it; ``coarea_tol`` turns on the per-sample coarea cross-check (curves).
    """

    experiment: str
    manifold: str
    ensemble: str
    test_form: str = "const"
    form_amplitude: float = 1.0
    drift: str | None = None
    drift_amplitude: float = 0.0
    seed: int = 0
    samples: int = 100
    resolution: int | None = None
    scan_resolution: int | None = None
    abs_tol: float = 1e-3
    z: float = 4.0
    expected: float | None = None
    rhs_tol: float = 1e-3
    per_sample_exact: float | None = None
    coarea_tol: float | None = None
    max_discard_fraction: float = 0.01
    workers: int = 1
    dump_zeros: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        for name in ("resolution", "scan_resolution"):
            value = getattr(self, name)
            if value is not None and not 2 <= value <= MAX_RESOLUTION:
                raise ConfigError(f"{name} must lie in [2, {MAX_RESOLUTION}]")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if value is None else _format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        parser.read_string("[experiment]\n" + text)
        raw = dict(parser["experiment"])
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        for key, text_value in raw.items():
            kwargs[key] = _parse(text_value.strip(), known[key].type)
        missing = [k for k in ("experiment", "manifold", "ensemble") if k not in kwargs]
        if missing:
            raise ConfigError(f"missing required keys: {missing}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())


def _format(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def _parse(text: str, annotation: str):
    if text.lower() == "none":
        if "None" not in annotation:
            raise ConfigError(f"value may not be none for type {annotation}")
        return None
    base = annotation.split("|")[0].strip()
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {base}") from None
    return text


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    indices: np.ndarray
    values: np.ndarray
    coarea: np.ndarray | None
    discarded: list[tuple[int, str]]
    rhs: float
    mean: float
    stderr: float
    batch_stderr: float
    passed: bool
    failures: list[str]
    runtime: float
    zeros: dict = field(default_factory=dict)

    def numeric_fields(self) -> dict:
        """Every numeric result, formatted exactly (used by the determinism check)."""
        out = {"rhs": repr(self.rhs), "mean": repr(self.mean), "stderr": repr(self.stderr),
               "batch_stderr": repr(self.batch_stderr), "n_used": str(len(self.values)),
               "n_discarded": str(len(self.discarded)), "passed": str(self.passed)}
        if self.coarea is not None and len(self.coarea):
            out["coarea_max_gap"] = repr(float(np.max(np.abs(self.coarea[:, 0] - self.coarea[:, 1]))))
        return out

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"experiment {self.config.experiment}: {status}",
                 f"  mean = {self.mean!r} +- {self.stderr!r} (N = {len(self.values)})",
                 f"  rhs  = {self.rhs!r}"]
        lines += [f"  failure: {msg}" for msg in self.failures]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


class _Context:
    """Everything a worker needs, rebuilt from the config in each process."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.basis = builtin_ensembles(config.ensemble, config.resolution)
        if self.basis.manifold.name != config.manifold:
            raise ConfigError(f"ensemble {config.ensemble!r} lives on "
                              f"{self.basis.manifold.name!r}, not {config.manifold!r}")
        self.frame = ortho_frame(self.basis)
        self.drift = (builtin_drift(config.drift, config.drift_amplitude)
                      if config.drift else None)
        self.form = get_test_form(config.test_form, self.basis.dim, config.form_amplitude)
        if self.form.degree != self.basis.dim - self.basis.rank:
            raise ConfigError(f"test form {config.test_form!r} has the wrong degree")
        self.locator = ZeroLocator(self.frame, self.drift, config.scan_resolution)

    def density(self, x):
        return expected_current_density(self.basis, self.frame, x, self.form, self.drift)

    def evaluate(self, k: int):
        """``(value, coarea pair or None, error message or None, zero locus)``."""
        s = sample(self.basis, rng_stream(self.config.seed, k))
        try:
            if self.locator.codim == 0:
                locus = self.locator.points(s)
            else:
                locus = self.locator.curves(s)
            value = evaluate_current(locus, self.form)
            pair = None
            if self.config.coarea_tol is not None:
                pair = coarea_check(s, self.frame, self.form, locus, self.drift)
        except ExtractionError as exc:
            return math.nan, None, str(exc), None
        return value, pair, None, locus


_WORKER: _Context | None = None


def _init_worker(config):
    global _WORKER
    _WORKER = _Context(config)


def _work(indices):
    keep = _WORKER.config.dump_zeros
    out = []
    for k in indices:
        value, pair, err, locus = _WORKER.evaluate(k)
        out.append((k, value, pair, err, locus if k < keep else None))
    return out


def _chunks(n: int, parts: int) -> list[range]:
    size = max(1, math.ceil(n / (parts * 8)))
    return [range(i, min(n, i + size)) for i in range(0, n, size)]


def _batch_stderr(values: np.ndarray, batches: int = 100) -> float:
    """Standard error from the spread of batch means (a check on the iid estimate)."""
    batches = min(batches, len(values) // 10)
    if batches < 2:
        return math.nan
    n = len(values) // batches
    means = values[: n * batches].reshape(batches, n).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(batches))


def run(config: ExperimentConfig) -> ExperimentReport:
    start = time.perf_counter()
    ctx = _Context(config)
    rhs = integrate_top_form(ctx.basis.manifold, ctx.density, config.resolution,
                             chart_coefficient=True)
    if config.workers == 1:
        global _WORKER
        _WORKER = ctx
        results = _work(range(config.samples))
    else:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker,
                                 initargs=(config,)) as pool:
            results = [r for part in pool.map(_work, _chunks(config.samples, config.workers))
                       for r in part]
    results.sort(key=lambda r: r[0])
    discarded = [(k, err) for k, _, _, err, _ in results if err is not None]
    ok = [r for r in results if r[3] is None]
    indices = np.array([r[0] for r in ok], dtype=int)
    values = np.array([r[1] for r in ok], dtype=float)
    coarea = (np.array([r[2] for r in ok], dtype=float).reshape(-1, 2)
              if config.coarea_tol is not None else None)
    zeros = {r[0]: r[4] for r in results if r[4] is not None}

    failures = []
    mean = float(np.mean(values)) if len(values) else math.nan
    stderr = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    if len(discarded) > config.max_discard_fraction * config.samples:
        failures.append(f"{len(discarded)} of {config.samples} samples discarded")
    if not abs(mean - rhs) <= max(config.abs_tol, config.z * stderr):
        failures.append(f"|mean - rhs| = {abs(mean - rhs):.3g} exceeds "
                        f"max({config.abs_tol:g}, {config.z:g} * stderr)")
    if config.expected is not None and not abs(rhs - config.expected) <= config.rhs_tol:
        failures.append(f"rhs {rhs!r} differs from the pinned value {config.expected!r}")
    if config.per_sample_exact is not None:
        bad = indices[values != config.per_sample_exact]
        if len(bad):
            failures.append(f"samples {bad[:10].tolist()} differ from {config.per_sample_exact!r}")
    if coarea is not None and len(coarea):
        gap = float(np.max(np.abs(coarea[:, 0] - coarea[:, 1])))
        if gap > config.coarea_tol:
            failures.append(f"coarea gap {gap:.3g} exceeds {config.coarea_tol:g}")
    return ExperimentReport(config, indices, values, coarea, discarded, rhs, mean, stderr,
                            _batch_stderr(values), not failures, failures,
                            time.perf_counter() - start, zeros)


@dataclass
class SuiteReport:
    reports: list[ExperimentReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1

    def summary(self) -> str:
        lines = [f"{'PASS' if r.passed else 'FAIL'} {r.config.experiment} "
                 f"mean={r.mean!r} stderr={r.stderr!r} rhs={r.rhs!r}" for r in self.reports]
        lines.append(f"suite: {sum(r.passed for r in self.reports)}/{len(self.reports)} passed")
        return "\n".join(lines)


def run_suite(configs) -> SuiteReport:
    return SuiteReport([run(c) for c in configs])


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def write_report(report: ExperimentReport, out_dir, density_grid: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    numeric = report.numeric_fields()
    lines = [report.summary(), "", "[results]"]
    lines += [f"{k} = {v}" for k, v in numeric.items()]
    lines += ["", "[discarded]"] + [f"{k}: {msg}" for k, msg in report.discarded]
    lines += ["", "[config]", report.config.to_text().rstrip(), "",
              "[timing]", f"runtime_seconds = {report.runtime:.2f}", ""]
    (out / "report.txt").write_text("\n".join(lines))

    with open(out / "samples.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["index", "status", "value"]
        if report.coarea is not None:
            header += ["direct", "coarea"]
        writer.writerow(header)
        rows = {k: ["discarded", "", *([""] * (len(header) - 3))] for k, _ in report.discarded}
        for n, k in enumerate(report.indices):
            row = ["ok", repr(float(report.values[n]))]
            if report.coarea is not None:
                row += [repr(float(v)) for v in report.coarea[n]]
            rows[int(k)] = row
        for k in sorted(rows):
            writer.writerow([k, *rows[k]])

    for k, locus in report.zeros.items():
        _write_zeros(out / f"zeros_{k}.csv", locus)
    if density_grid:
        _write_density_grid(report.config, out / "density_grid.csv")
    return out


def _write_zeros(path, locus):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if locus and isinstance(locus[0], ZeroCurve):
            m = locus[0].points.shape[1]
            writer.writerow(["curve", "vertex"] + [f"x{i + 1}" for i in range(m)]
                            + [f"t{i + 1}" for i in range(m)])
            for c, curve in enumerate(locus):
                for v, (p, t) in enumerate(zip(curve.points, curve.tangents)):
                    writer.writerow([c, v, *map(repr, map(float, p)), *map(repr, map(float, t))])
            return
        m = len(locus[0].location) if locus else 0
        writer.writerow([f"x{i + 1}" for i in range(m)] + ["sign", "jacobian_det"])
        for z in locus:
            writer.writerow([*map(repr, map(float, z.location)), z.sign, repr(z.jacobian_det)])


def _write_density_grid(config: ExperimentConfig, path):
    ctx = _Context(config.replace(scan_resolution=8))
    mfd = ctx.basis.manifold
    points, _ = mfd.quadrature(DENSITY_DUMP_RESOLUTION[mfd.dim])
    density = evaluate_chunked(ctx.density, points)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(mfd.dim)] + ["density"])
        for p, d in zip(points, density):
            writer.writerow([*map(repr, map(float, p)), repr(float(d))])


# ---------------------------------------------------------------------------
# builtin experiments
# ---------------------------------------------------------------------------


def _drift_sweep_rhs(a: float) -> float:
    """Closed form of the drift-sweep right-hand side (Bessel functions)."""
    from scipy.special import iv

    c = a * a / 6
    bessel = float(iv(0, c / 2) + iv(1, c / 2))
    return a * a / (6 * math.pi) * (math.pi * math.exp(-c / 2) * bessel) ** 2


def builtin_experiments() -> dict[str, ExperimentConfig]:
    exps = {
        "euler-number": ExperimentConfig(
            "euler-number", "sphere2", "sphere2_tangent", "const", samples=100, seed=1,
            expected=2.0, rhs_tol=1e-3, per_sample_exact=2.0),
        "stochastic-gbc": ExperimentConfig(
            "stochastic-gbc", "sphere2", "sphere2_tangent", "zsq", samples=10_000, seed=2,
            expected=2 / 3, rhs_tol=1e-6),
        "curve-case": ExperimentConfig(
            "curve-case", "torus3", "torus3_trig", "dx3+sinx1sinx3_dx2", samples=2000, seed=3,
            resolution=32, coarea_tol=1e-4, abs_tol=0.0),
    }
    for a in (0.0, 0.5, 1.0, 2.0):
        name = f"drift-sweep-a{a:g}"
        exps[name] = ExperimentConfig(
            name, "torus2", "torus2_flat", "cosx1cosx2", drift="sinsin", drift_amplitude=a,
            samples=4000, seed=4, abs_tol=0.0, expected=_drift_sweep_rhs(a), rhs_tol=1e-8)
    return exps


def default_workers() -> int:
    return max(1, min(8, os.cpu_count() or 1))
