"""Certificate sweeps, width scaling, discretization and data-dependent-prior studies.

Every study returns rows of plain dicts with fixed column names, written as
CSV with a one-line header. Horizon grids and ``delta`` live in the config and
are fixed before any data or initialization is drawn.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets as ds
from .flow_engine import (
    FlowDivergence,
    IntegratorConfig,
    Objective,
    data_dependent_flow,
    integrate,
)
from .kl_bounds import certify_bounds
from .linear_models import (
    FeatureMap,
    linear_analytic_flow,
    make_surrogate,
    quadratic_analytic_flow,
    sufficient_stats,
)
from .priors import PriorSpec

CERTIFY_COLUMNS = (
    "seed", "T", "empirical_error", "surrogate_value", "log_density_ratio",
    "laplacian_integral", "laplacian_rate", "penalty", "mcallester_bound", "mcallester_unclamped", "kl_bound",
    "test_error", "analytic_discrepancy", "valid",
)
DATA_DEPENDENT_COLUMNS = CERTIFY_COLUMNS[:-1] + (
    "t0", "prior_phase_integral", "backward_integral", "train_phase_integral", "valid",
)
SCALING_COLUMNS = (
    "seed", "width", "N", "best_T", "best_kl_bound", "best_mcallester_bound",
    "empirical_error", "test_error", "grid_scale",
)
DISCRETIZATION_COLUMNS = ("seed", "t", "B1", "B2", "relative_error")

# Above this width the quadratic cross-check would need a dense w x w eigendecomposition.
ANALYTIC_CHECK_MAX_WIDTH = 2000
TEST_CHUNK = 4096


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "toy"
    mnist_dir: str | None = None
    n_train: int = 500
    cluster_size: int = 5000
    n_classes: int = 2
    full_scale: bool = False
    surrogate: str = "linear"
    alpha: float = 1.0
    beta: float = 1.0
    width: int = 1000
    prior_variance: float | None = None
    scheme: str = "euler"
    dt: float = 1e-3
    accumulator: str = "stage"
    t_min: float = 1e-2
    t_max: float = 1.0
    K: int = 50
    horizons: tuple[float, ...] | None = None
    delta: float = 5e-3
    seed: int = 0
    batch_size: int | None = None
    out: str | None = None

    def __post_init__(self) -> None:
        if self.dataset not in ("toy", "mnist"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.surrogate not in ("linear", "quadratic", "cross_entropy"):
            raise ConfigError(f"unknown surrogate {self.surrogate!r}")
        if self.surrogate != "cross_entropy" and self.n_classes != 2:
            raise ConfigError("linear and quadratic surrogates are binary only")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.horizons is not None:
            object.__setattr__(self, "horizons", tuple(float(t) for t in self.horizons))
        self.integrator()

    @property
    def n_outputs(self) -> int:
        return 1 if self.surrogate != "cross_entropy" else self.classes

    @property
    def classes(self) -> int:
        return 10 if self.dataset == "mnist" else self.n_classes

    @property
    def horizon_grid(self) -> tuple[float, ...]:
        if self.horizons is not None:
            return self.horizons
        return geometric_grid(self.t_min, self.t_max, self.K, self.dt)

    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.scheme, self.dt, self.horizon_grid, self.accumulator)

    def sub_seeds(self) -> dict[str, int]:
        data, feats, init, batches = np.random.SeedSequence(self.seed).generate_state(4)
        return {"data": int(data), "features": int(feats), "init": int(init),
                "batches": int(batches)}


def geometric_grid(t_min: float, t_max: float, K: int, dt: float) -> tuple[float, ...]:
    """K geometrically spaced horizons, snapped to multiples of dt."""
    if not 0 < t_min < t_max or K < 1:
        raise ConfigError("need 0 < t_min < t_max and K >= 1")
    if K == 1:
        raw = np.array([t_max])
    else:
        raw = np.geomspace(t_min, t_max, K)
    steps = np.maximum(np.rint(raw / dt).astype(np.int64), 1)
    if len(np.unique(steps)) != K:
        raise ConfigError(f"dt={dt} is too coarse to resolve {K} distinct horizons in "
                          f"[{t_min}, {t_max}]")
    return tuple(float(n * dt) for n in steps)


# -- config files ------------------------------------------------------------


def _coerce(name: str, raw: str, hints: dict):
    hint = hints[name]
    if raw.lower() in ("", "none"):
        return None
    if name == "horizons":
        return tuple(float(x) for x in raw.split(","))
    if "bool" in str(hint):
        return raw.lower() in ("1", "true", "yes", "on")
    if "int" in str(hint) and "float" not in str(hint):
        return int(raw)
    if "float" in str(hint):
        return float(raw)
    return raw


def config_from_mapping(entries: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    hints = typing.get_type_hints(ExperimentConfig)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for key, raw in entries.items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, str(raw), hints)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    return config_from_mapping(ds.parse_key_values(Path(path).read_text()))


def config_to_text(config: ExperimentConfig) -> str:
    entries = {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        entries[f.name] = ",".join(repr(x) for x in v) if isinstance(v, tuple) else v
    return ds.format_manifest(entries)


# -- shared machinery --------------------------------------------------------


@dataclass
class Problem:
    """Everything drawn from a config's seed: data, features, prior, h0."""

    config: ExperimentConfig
    train: ds.LabeledDataset
    test: ds.LabeledDataset
    fmap: FeatureMap
    phi: np.ndarray
    train_targets: np.ndarray
    test_targets: np.ndarray
    prior: PriorSpec
    h0: np.ndarray
    seeds: dict

    @property
    def m(self) -> int:
        return self.train.m

    def objective(self, idx: np.ndarray | None = None) -> Objective:
        c = self.config
        phi = self.phi if idx is None else self.phi[idx]
        y = self.train_targets if idx is None else self.train_targets[idx]
        return make_surrogate(c.surrogate, phi, y, c.alpha, c.beta, c.classes)


def _targets(labels: np.ndarray, config: ExperimentConfig) -> np.ndarray:
    """Labels as the surrogate expects them: +-1 for one output, class ids otherwise."""
    if config.n_outputs == 1:
        return labels.astype(float)
    if config.dataset == "toy" and config.n_classes == 2:
        return (labels > 0).astype(np.intp)
    return labels.astype(np.intp)


def _load_data(config: ExperimentConfig, data_seed: int):
    if config.dataset == "toy":
        return ds.gaussian_clusters(data_seed, cluster_size=config.cluster_size,
                                    n_train=config.n_train, n_classes=config.n_classes)
    if not config.mnist_dir:
        raise ConfigError("dataset=mnist needs mnist_dir")
    root = Path(config.mnist_dir)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (root / name).exists():
                return root / name
        raise ConfigError(f"missing {stem} in {root}")

    train = ds.load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"), "train")
    test = ds.load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"), "test")
    if not config.full_scale and config.n_train < train.m:
        rng = np.random.Generator(np.random.PCG64(data_seed))
        idx = np.sort(rng.choice(train.m, size=config.n_train, replace=False))
        train = train.subset(idx)
    return train, test


def build_problem(config: ExperimentConfig) -> Problem:
    seeds = config.sub_seeds()
    train, test = _load_data(config, seeds["data"])
    fmap = FeatureMap.random(train.inputs.shape[1], config.width, seeds["features"])
    N = config.width * config.n_outputs
    prior = PriorSpec(N, config.prior_variance)
    return Problem(
        config=config, train=train, test=test, fmap=fmap, phi=fmap(train.inputs),
        train_targets=_targets(train.labels, config), test_targets=_targets(test.labels, config),
        prior=prior, h0=prior.sample(seeds["init"]), seeds=seeds,
    )


def _predictions_wrong(hs: np.ndarray, phi: np.ndarray, targets: np.ndarray, n_out: int) -> np.ndarray:
    """Per-hypothesis count of misclassified rows; ``hs`` is (n_hyp, N)."""
    if n_out == 1:
        logits = phi @ hs.T
        pred = np.where(logits >= 0.0, 1.0, -1.0)
        return (pred != targets[:, None]).sum(axis=0)
    wrong = np.empty(len(hs), dtype=np.int64)
    for k, h in enumerate(hs):
        pred = np.argmax(phi @ np.reshape(h, (n_out, -1)).T, axis=1)
        wrong[k] = int((pred != targets).sum())
    return wrong


def errors_on(problem: Problem, hs: np.ndarray, dataset: ds.LabeledDataset,
              targets: np.ndarray) -> np.ndarray:
    """01-error of each row of ``hs`` on ``dataset``, evaluating features in chunks."""
    hs = np.atleast_2d(hs)
    wrong = np.zeros(len(hs), dtype=np.int64)
    for start in range(0, dataset.m, TEST_CHUNK):
        phi = problem.fmap(dataset.inputs[start:start + TEST_CHUNK])
        wrong += _predictions_wrong(hs, phi, targets[start:start + TEST_CHUNK],
                                    problem.config.n_outputs)
    return wrong / dataset.m


def _train_errors(problem: Problem, hs: np.ndarray) -> np.ndarray:
    return _predictions_wrong(np.atleast_2d(hs), problem.phi, problem.train_targets,
                              problem.config.n_outputs) / problem.m


def _objective_source(problem: Problem, dt: float, total_steps: int, steps_per_batch: int = 1):
    c = problem.config
    if c.batch_size is None or c.batch_size >= problem.m:
        return problem.objective(), None
    schedule = ds.batch_schedule(problem.m, c.batch_size, dt, total_steps,
                                 problem.seeds["batches"], steps_per_batch)
    cache: dict[int, Objective] = {}

    def for_batch(batch_id: int) -> Objective:
        if batch_id not in cache:
            cache.clear()
            cache[batch_id] = problem.objective(schedule.batches[batch_id])
        return cache[batch_id]

    return for_batch, schedule


@dataclass
class RunRecord:
    rows: list[dict]
    columns: tuple[str, ...] = CERTIFY_COLUMNS
    manifest: dict = field(default_factory=dict)
    initial_laplacian_rate: float = math.nan
    message: str = ""

    @property
    def valid(self) -> bool:
        return all(r.get("valid", 1) for r in self.rows)

    def best(self, column: str = "kl_bound") -> dict:
        """Row minimizing ``column`` among valid rows; ties go to the smaller T."""
        candidates = [r for r in self.rows if r["valid"]]
        if not candidates:
            raise ValueError("no valid rows")
        return min(candidates, key=lambda r: (r[column], r["T"]))

    def write_csv(self, path) -> None:
        write_csv(path, self.rows, self.columns)


def write_csv(path, rows: list[dict], columns: tuple[str, ...]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n",
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _invalid_row(seed: int, T: float, columns) -> dict:
    row = {k: math.nan for k in columns}
    row.update(seed=seed, T=T, valid=0)
    return row


def _certificate_row(problem: Problem, T: float, hT: np.ndarray, log_ratio: float,
                     laplacian: float, objective: Objective, train_err: float,
                     test_err: float, K: int, m: int) -> dict:
    c = problem.config
    cert = certify_bounds(train_err, log_ratio, laplacian, m, c.delta, K)
    return {
        "seed": c.seed,
        "T": T,
        "empirical_error": train_err,
        "surrogate_value": objective.value(hT),
        "log_density_ratio": log_ratio,
        "laplacian_integral": laplacian,
        "laplacian_rate": objective.laplacian(hT),
        "penalty": cert.components["penalty"],
        "mcallester_bound": cert.mcallester,
        "mcallester_unclamped": cert.mcallester_unclamped,
        "kl_bound": cert.kl_inv,
        "test_error": test_err,
        "analytic_discrepancy": math.nan,
        "valid": 1,
    }


def _analytic_discrepancy(problem: Problem, T: float, hT: np.ndarray, stats) -> float:
    c = problem.config
    if c.surrogate == "linear":
        exact = linear_analytic_flow(problem.h0, stats, T)
    elif c.surrogate == "quadratic" and stats.Theta is not None:
        exact = quadratic_analytic_flow(problem.h0, stats, c.beta, T)
    else:
        return math.nan
    return float(np.linalg.norm(hT - exact) / max(np.linalg.norm(exact), 1e-300))


# -- studies -----------------------------------------------------------------


def certify(config: ExperimentConfig, problem: Problem | None = None) -> RunRecord:
    """Train from a prior draw and certify the predictor at every horizon."""
    problem = problem or build_problem(config)
    icfg = config.integrator()
    grid = icfg.horizon_grid
    source, schedule = _objective_source(problem, icfg.dt, icfg.horizon_steps()[-1])
    result = integrate(problem.h0, source, icfg, schedule=schedule)
    full = problem.objective()

    stats = None
    if config.surrogate in ("linear", "quadratic") and schedule is None:
        stats = sufficient_stats(
            problem.phi, problem.train_targets, config.alpha,
            with_theta=config.surrogate == "quadratic" and config.width <= ANALYTIC_CHECK_MAX_WIDTH)

    reached = [s for _, s in result.snapshots]
    rows = []
    if reached:
        hs = np.stack([s.h for s in reached])
        train_err = _train_errors(problem, hs)
        test_err = errors_on(problem, hs, problem.test, problem.test_targets)
        for k, s in enumerate(reached):
            row = _certificate_row(problem, grid[k], s.h, problem.prior.log_ratio(problem.h0, s.h),
                                   s.laplacian_integral, full, float(train_err[k]),
                                   float(test_err[k]), icfg.K, problem.m)
            if stats is not None:
                row["analytic_discrepancy"] = _analytic_discrepancy(problem, grid[k], s.h, stats)
            rows.append(row)
    rows += [_invalid_row(config.seed, T, CERTIFY_COLUMNS) for T in grid[len(reached):]]
    return RunRecord(
        rows=rows,
        manifest=_manifest(problem, icfg),
        initial_laplacian_rate=full.laplacian(problem.h0),
        message=result.message,
    )


def _manifest(problem: Problem, icfg: IntegratorConfig) -> dict:
    c = problem.config
    out = {f"seed_{k}": v for k, v in problem.seeds.items()}
    out.update(seed=c.seed, K=icfg.K, delta=c.delta, N=problem.prior.N, m=problem.m,
               prior_variance=problem.prior.variance)
    out.update({f"data_{k}": v for k, v in problem.train.manifest.items()})
    return out


def scaled_config(config: ExperimentConfig, width: int, reference_width: int) -> ExperimentConfig:
    """Shrink dt and the horizon grid by reference_width / width."""
    scale = reference_width / width
    horizons = tuple(T * scale for T in config.horizon_grid)
    return dataclasses.replace(config, width=width, dt=config.dt * scale, horizons=horizons)


def scaling_study(config: ExperimentConfig, widths: list[int],
                  scale_grid: bool = False) -> list[dict]:
    """Best-horizon certificate per width; optionally with a width-scaled grid."""
    rows = []
    for w in widths:
        cfg = scaled_config(config, w, widths[0]) if scale_grid else dataclasses.replace(config, width=w)
        record = certify(cfg)
        if not record.valid:
            raise FlowDivergence(f"width {w} diverged: {record.message}")
        best = record.best("kl_bound")
        rows.append({
            "seed": config.seed,
            "width": w,
            "N": w * cfg.n_outputs,
            "best_T": best["T"],
            "best_kl_bound": best["kl_bound"],
            "best_mcallester_bound": best["mcallester_bound"],
            "empirical_error": best["empirical_error"],
            "test_error": best["test_error"],
            "grid_scale": widths[0] / w if scale_grid else 1.0,
        })
    return rows


def discretization_study(config: ExperimentConfig, dt_coarse: float, dt_fine: float) -> list[dict]:
    """kl bound under two step sizes at matched physical times.

    The fine run holds each batch for dt_coarse / dt_fine steps so both runs
    see the same batch over the same stretch of time.
    """
    ratio = dt_coarse / dt_fine
    if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
        raise ConfigError("dt_coarse must be an integer multiple of dt_fine")
    ratio = int(round(ratio))
    coarse = dataclasses.replace(config, dt=dt_coarse)
    grid = coarse.horizon_grid
    fine = dataclasses.replace(config, dt=dt_fine, horizons=grid)
    problem = build_problem(coarse)
    bounds = []
    for cfg, spb in ((coarse, 1), (fine, ratio)):
        icfg = cfg.integrator()
        n_steps = icfg.horizon_steps()[-1]
        source, schedule = _objective_source(problem, icfg.dt, n_steps, spb)
        result = integrate(problem.h0, source, icfg, schedule=schedule)
        if result.aborted:
            raise FlowDivergence(result.message)
        hs = np.stack([s.h for _, s in result.snapshots])
        errs = _train_errors(problem, hs)
        bounds.append([
            certify_bounds(float(errs[k]), problem.prior.log_ratio(problem.h0, s.h),
                           s.laplacian_integral, problem.m, cfg.delta, icfg.K).kl_inv
            for k, (_, s) in enumerate(result.snapshots)
        ])
    return [
        {"seed": config.seed, "t": T, "B1": b1, "B2": b2, "relative_error": (b1 - b2) / b2}
        for T, b1, b2 in zip(grid, *bounds)
    ]


def _overlap(a: np.ndarray, b: np.ndarray) -> bool:
    seen = {row.tobytes() for row in np.ascontiguousarray(a)}
    return any(row.tobytes() in seen for row in np.ascontiguousarray(b))


def data_dependent_run(config: ExperimentConfig, t0: float, holdout_fraction: float) -> RunRecord:
    """Learn the prior by flowing on s' for t0, then train on s and certify with m = |s|.

    s' is carved from the front of the held-out pool; the test error is
    measured on the remainder, so s, s' and the test points are disjoint.
    """
    if config.batch_size is not None:
        raise ConfigError("data-dependent runs use full-batch objectives")
    if not 0 < holdout_fraction < 1:
        raise ConfigError("holdout_fraction must lie in (0, 1)")
    problem = build_problem(config)
    n_prior = int(round(holdout_fraction * problem.test.m))
    if not 1 <= n_prior < problem.test.m:
        raise ConfigError("holdout_fraction leaves an empty prior set or test set")
    prior_idx = np.arange(n_prior)
    test_idx = np.arange(n_prior, problem.test.m)
    if _overlap(problem.train.inputs, problem.test.inputs[prior_idx]):
        raise ConfigError("s and s' overlap")
    prior_set = problem.test.subset(prior_idx, "prior")
    test_set = problem.test.subset(test_idx, "test")
    c = config
    obj_prior = make_surrogate(c.surrogate, problem.fmap(prior_set.inputs),
                               problem.test_targets[prior_idx], c.alpha, c.beta, c.classes)
    obj_train = problem.objective()
    icfg = config.integrator()
    snaps = data_dependent_flow(problem.prior, problem.h0, obj_prior, obj_train, t0, icfg)
    hs = np.stack([s.state.h for s in snaps])
    train_err = _train_errors(problem, hs)
    test_err = errors_on(problem, hs, test_set, problem.test_targets[test_idx])
    rows = []
    for k, s in enumerate(snaps):
        cx = s.complexity
        row = _certificate_row(problem, s.T, s.state.h, cx.log_density_ratio, cx.laplacian_terms,
                               obj_train, float(train_err[k]), float(test_err[k]), icfg.K,
                               problem.m)
        row.update(t0=t0, prior_phase_integral=cx.prior_phase_integral,
                   backward_integral=cx.backward_integral,
                   train_phase_integral=cx.train_phase_integral)
        rows.append(row)
    manifest = _manifest(problem, icfg)
    manifest.update(t0=t0, holdout_fraction=holdout_fraction, prior_set_size=n_prior)
    return RunRecord(rows=rows, columns=DATA_DEPENDENT_COLUMNS, manifest=manifest,
                     initial_laplacian_rate=obj_train.laplacian(problem.h0))


# -- fan-out -----------------------------------------------------------------


def _certify_seed(config: ExperimentConfig) -> RunRecord:
    return certify(config)


def certify_seeds(config: ExperimentConfig, seeds: list[int], workers: int = 1) -> list[RunRecord]:
    """Certify one run per seed; output order follows ``seeds`` whatever ``workers`` is."""
    configs = [dataclasses.replace(config, seed=s) for s in seeds]
    if workers <= 1:
        return [certify(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_certify_seed, configs))
