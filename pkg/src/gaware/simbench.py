"""Monte Carlo benchmark on contaminated simulation designs.

The design mimics a multi-site experiment. Outside one site ("peru") effects
are constant on two consumption cells; inside it they are constant on two
asset cells, except for a small contaminated corner whose effects are drawn
from a Cauchy law. Every type holds the same number of units, and per-type
estimates are averages of inverse-propensity pseudo-outcomes.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import EstimateTable, RawStudy
from .errors import ValidationError
from .estimates import ipw_pseudo_outcomes
from .tree import SearchConfig, fit_gaware_tree

PLAIN_SIGMA2 = 1e9
CAUCHY_CLIP = 1e6


@dataclass(frozen=True)
class SimConfig:
    n: int = 2000
    basin_fraction: float = 0.04
    archetype_means: tuple = (0.0, 0.5, 1.0, 0.5)
    scale: float = 1.0
    noise_var: float = 1.0
    treat_prob: float = 0.5
    reps: int = 50
    seed: int = 0
    site_share: float = 0.25
    cauchy_center: float | None = None   # defaults to the mean of the cell holding the basin
    variance: str = "per_type"           # "per_type" (within-type sample variance) or "known"
    units_per_type: int = 10
    depth: int = 3
    groups: int = 9
    splits: int = 5
    min_leaf: int = 20

    def __post_init__(self):
        if not 0 < self.basin_fraction < 1:
            raise ValidationError("basin fraction must lie in (0, 1)")
        if self.scale <= 0:
            raise ValidationError("Cauchy scale must be positive")
        if len(self.archetype_means) != 4:
            raise ValidationError("four archetype means are required")
        if self.basin_fraction >= self.site_share / 2:
            raise ValidationError("basin must fit inside the contaminated cell")
        if not 0 < self.treat_prob < 1:
            raise ValidationError("treatment probability must lie in (0, 1)")
        if self.variance not in ("per_type", "known"):
            raise ValidationError("variance must be 'per_type' or 'known'")
        if self.units_per_type < 2:
            raise ValidationError("at least two units per type are needed")

    @property
    def basin_cut(self) -> float:
        """Consumption threshold above which the contaminated cell becomes basin."""
        return 1.0 - self.basin_fraction / (self.site_share * 0.5)

    def search_config(self, sigma2: float) -> SearchConfig:
        # the plain tree is never budget-constrained: every leaf may be an archetype
        G = 2 ** self.depth + 1 if sigma2 >= PLAIN_SIGMA2 else self.groups
        return SearchConfig(depth=self.depth, splits=self.splits, min_leaf=self.min_leaf, G=G, sigma2=sigma2)


@dataclass(frozen=True)
class SimDraw:
    study: RawStudy
    truth: np.ndarray
    basin: np.ndarray
    type_variance: np.ndarray
    clipped: int


def rep_rng(seed: int, *counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(counter)))


def generate_dgp(config: SimConfig, rep_seed) -> SimDraw:
    """Draw one study. ``rep_seed`` is an int or a numpy Generator.

    Type-level arrays (truth, basin, type variance) follow the order of the
    type ids ``t0000, t0001, ...`` that :func:`build_estimates` produces.
    """
    rng = rep_seed if isinstance(rep_seed, np.random.Generator) else np.random.default_rng(rep_seed)
    n, k = config.n, config.units_per_type
    cons = rng.uniform(size=n)
    assets = rng.uniform(size=n)
    site = (rng.uniform(size=n) < config.site_share).astype(float)
    a = config.archetype_means
    phi = np.where(site == 0, np.where(cons <= 0.5, a[0], a[1]), np.where(assets <= 0.5, a[2], a[3]))
    basin = (site == 1) & (assets > 0.5) & (cons > config.basin_cut)
    center = a[3] if config.cauchy_center is None else config.cauchy_center
    draws = center + config.scale * rng.standard_cauchy(size=n)
    clipped = int((np.abs(draws) > CAUCHY_CLIP).sum())
    phi = np.where(basin, np.clip(draws, -CAUCHY_CLIP, CAUCHY_CLIP), phi)

    unit_type = np.repeat(np.arange(n), k)
    sd = math.sqrt(config.noise_var)
    y0 = sd * rng.standard_normal(n * k)
    y1 = phi[unit_type] + sd * rng.standard_normal(n * k)
    D = (rng.uniform(size=n * k) < config.treat_prob).astype(float)
    Y = np.where(D == 1, y1, y0)
    o = np.full(n * k, config.treat_prob)
    env = tuple("peru" if site[t] else "other" for t in unit_type)
    X = np.column_stack([cons, assets, site])[unit_type]
    study = RawStudy(Y[:, None], D, o, X, env, ("effect",), ("consumption", "assets", "peru"))
    # sampling variance of one IPW pseudo-outcome given the effect, then of a k-unit mean
    p = config.treat_prob
    unit_var = config.noise_var / p + config.noise_var / (1 - p) + phi ** 2 / p - phi ** 2
    return SimDraw(study, phi, basin, unit_var / k, clipped)


def type_ids(config: SimConfig) -> list:
    width = len(str(config.n - 1))
    return [f"t{i:0{width}d}" for i in range(config.n) for _ in range(config.units_per_type)]


def build_estimates(draw: SimDraw, config: SimConfig) -> EstimateTable:
    """One row per type: mean IPW pseudo-outcome plus a variance estimate."""
    table = ipw_pseudo_outcomes(draw.study, key=type_ids(config), variance="per_type")
    if config.variance == "known":
        table = EstimateTable(table.type_ids, table.X, table.w, table.phi, draw.type_variance[:, None],
                              table.outcome_names, table.covariate_names, dict(table.provenance))
    return table


def generalizable_error(pred: np.ndarray, target: np.ndarray, predicted: np.ndarray, true_gen: np.ndarray) -> float:
    """Mean squared error over types that are truly generalizable and receive a prediction."""
    m = predicted & true_gen
    if not m.any():
        return float("nan")
    return float(np.mean((pred[m] - target[m]) ** 2))


def generalizable_error_loop(pred, target, predicted, true_gen) -> float:
    total, count = 0.0, 0
    for p, t, a, g in zip(pred, target, predicted, true_gen):
        if a and g:
            total += (p - t) ** 2
            count += 1
    return total / count if count else float("nan")


def shrinkage_predictions(table: EstimateTable, leaf: np.ndarray, variances: np.ndarray | None = None) -> np.ndarray:
    """Gaussian posterior means shrinking each estimate toward its leaf mean.

    The prior variance within a leaf is the method-of-moments estimate
    max(0, weighted var of estimates - weighted mean variance). The weight on
    the leaf mean is eta2 / (eta2 + tau2); a zero prior variance means full
    shrinkage.
    """
    phi = table.phi[:, 0]
    eta2 = table.eta2[:, 0] if variances is None else np.asarray(variances, dtype=float)
    w = table.w
    out = np.empty_like(phi)
    for k in np.unique(leaf):
        m = leaf == k
        wm = w[m] / w[m].sum()
        mean = wm @ phi[m]
        tau2 = max(0.0, wm @ (phi[m] - mean) ** 2 - wm @ eta2[m])
        if tau2 == 0.0:
            out[m] = mean
            continue
        b = eta2[m] / (eta2[m] + tau2)
        out[m] = b * mean + (1 - b) * phi[m]
    return out


def _basin_metrics(abstain: np.ndarray, basin: np.ndarray) -> tuple:
    hit = int((abstain & basin).sum())
    recall = hit / basin.sum() if basin.any() else 0.0
    precision = hit / abstain.sum() if abstain.any() else 0.0
    return float(recall), float(precision)


def run_replication(config: SimConfig, sigma2_grid, rep: int, shrinkage: bool = True) -> list:
    """All methods on one replication. Returns one record per method."""
    draw = generate_dgp(config, rep_rng(config.seed, int(round(config.scale * 1e6)), rep))
    table = build_estimates(draw, config)
    true_gen = ~draw.basin
    records = []

    def record(method, s2, pred, predicted, t0):
        recall, precision = _basin_metrics(~predicted, draw.basin)
        records.append({
            "method": method, "scale": config.scale, "rep": rep, "sigma2": s2,
            "error": generalizable_error(pred, draw.truth, predicted, true_gen),
            "recall": recall, "precision": precision,
            "basin_size": float(table.w[~predicted].sum()), "runtime": time.perf_counter() - t0,
            "clipped": draw.clipped, "status": "ok",
        })

    for s2 in list(sigma2_grid) + [PLAIN_SIGMA2]:
        method = "plain_tree" if s2 == PLAIN_SIGMA2 else "gaware"
        t0 = time.perf_counter()
        try:
            fit = fit_gaware_tree(table, config.search_config(s2))
        except Exception as exc:  # noqa: BLE001 - a failing method skips this rep only
            records.append({"method": method, "scale": config.scale, "rep": rep, "sigma2": s2,
                            "status": f"failed: {exc}"})
            continue
        pred = fit.tree.predict(table.X)[:, 0]
        predicted = ~np.isnan(pred)
        record(method, s2, np.nan_to_num(pred), predicted, t0)
        if method == "plain_tree" and shrinkage:
            leaf = fit.tree.leaf_index(table.X)
            for name, var in (("shrinkage_known", draw.type_variance), ("shrinkage_estimated", None)):
                t0 = time.perf_counter()
                sp = shrinkage_predictions(table, leaf, var)
                record(name, float("nan"), sp, np.ones(len(table), dtype=bool), t0)
    return records


def _run_cell(args):
    config, grid, rep, shrinkage = args
    return run_replication(config, grid, rep, shrinkage)


@dataclass
class BenchReport:
    records: list = field(default_factory=list)

    def medians(self) -> list:
        """Median error, recall, precision and basin size per (method, scale, sigma2)."""
        keys = sorted({(r["method"], r["scale"], r["sigma2"] if r["sigma2"] == r["sigma2"] else -1.0)
                       for r in self.records if r.get("status") == "ok"})
        out = []
        for method, scale, s2 in keys:
            rows = [r for r in self.records if r.get("status") == "ok" and r["method"] == method
                    and r["scale"] == scale and (r["sigma2"] == s2 or (s2 == -1.0 and r["sigma2"] != r["sigma2"]))]
            errs = np.array([r["error"] for r in rows], dtype=float)
            out.append({
                "method": method, "scale": scale, "sigma2": None if s2 == -1.0 else s2, "reps": len(rows),
                "median_error": float(np.nanmedian(errs)) if np.isfinite(errs).any() else float("nan"),
                "median_recall": float(np.median([r["recall"] for r in rows])),
                "median_precision": float(np.median([r["precision"] for r in rows])),
                "median_basin_size": float(np.median([r["basin_size"] for r in rows])),
                "median_runtime": float(np.median([r["runtime"] for r in rows])),
                "clipped": int(sum(r["clipped"] for r in rows)),
            })
        return out

    def median_of(self, method: str, scale: float, sigma2=None, stat: str = "median_error") -> float:
        for row in self.medians():
            if row["method"] == method and row["scale"] == scale and (sigma2 is None or row["sigma2"] == sigma2):
                return row[stat]
        raise KeyError((method, scale, sigma2))

    def best_gaware(self, scale: float, max_sigma2: float = 2.0) -> tuple:
        rows = [r for r in self.medians() if r["method"] == "gaware" and r["scale"] == scale
                and r["sigma2"] <= max_sigma2 and math.isfinite(r["median_error"])]
        best = min(rows, key=lambda r: r["median_error"])
        return best["sigma2"], best["median_error"]

    def worst_gaware(self, scale: float, max_sigma2: float = 2.0) -> tuple:
        rows = [r for r in self.medians() if r["method"] == "gaware" and r["scale"] == scale
                and r["sigma2"] <= max_sigma2 and math.isfinite(r["median_error"])]
        worst = max(rows, key=lambda r: r["median_error"])
        return worst["sigma2"], worst["median_error"]

    def to_csv(self) -> str:
        cols = ["method", "scale", "rep", "sigma2", "error", "recall", "precision", "basin_size", "runtime",
                "clipped", "status"]
        lines = [",".join(cols)]
        for r in self.records:
            lines.append(",".join("" if r.get(c) is None else (repr(float(r[c])) if isinstance(r.get(c), float)
                                                               else str(r.get(c))) for c in cols))
        return "\n".join(lines) + "\n"


def run_benchmark(config: SimConfig, scales=(0.1, 1.0, 2.0, 3.0), sigma2_grid=(0.1, 0.5, 1.0, 1.5, 2.0),
                  shrinkage: bool = True, workers: int = 1) -> BenchReport:
    """Every method on ``config.reps`` replications per Cauchy scale.

    Replication seeds derive from ``config.seed``, the scale and the rep
    index, so results do not depend on the number of workers.
    """
    if not sigma2_grid:
        raise ValidationError("sigma2 grid is empty")
    jobs = [(replace(config, scale=float(s)), tuple(sigma2_grid), rep, shrinkage)
            for s in scales for rep in range(config.reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, jobs, chunksize=4))
    else:
        results = [_run_cell(j) for j in jobs]
    return BenchReport([r for chunk in results for r in chunk])


def config_dict(config: SimConfig) -> dict:
    return asdict(config)
