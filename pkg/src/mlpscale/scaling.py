"""Compute accounting, power-law fits of error vs compute, and compute-optimal allocation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

RUN_COLUMNS = ("run_id", "depth", "width", "expansion", "params", "flops_fwd", "dataset_size", "epochs",
               "batch", "compute_flops", "upstream_err", "probe_err", "finetune_err")
ERROR_FIELDS = ("upstream_err", "probe_err", "finetune_err")


def compute_cost(flops_forward: int, n: int, epochs: int) -> int:
    """Training compute: forward FLOPs x 3 (forward + backward) x examples x epochs, as an exact int."""
    for name, v in (("flops_forward", flops_forward), ("N", n), ("T", epochs)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    return int(flops_forward) * 3 * int(n) * int(epochs)


@dataclass
class RunRecord:
    run_id: str
    depth: int
    width: int
    expansion: int
    params: int
    flops_fwd: int
    dataset_size: int
    epochs: int
    batch: int
    compute_flops: int
    upstream_err: float = math.nan
    probe_err: float = math.nan
    finetune_err: float = math.nan

    def __post_init__(self):
        expected = compute_cost(self.flops_fwd, self.dataset_size, self.epochs)
        if self.compute_flops != expected:
            raise ValueError(f"run {self.run_id}: compute {self.compute_flops} != flops x 3 x N x T = {expected}")
        for name in ERROR_FIELDS:
            e = getattr(self, name)
            if not (math.isnan(e) or 0.0 <= e <= 1.0):
                raise ValueError(f"run {self.run_id}: {name}={e} outside [0, 1]")

    @property
    def notation(self) -> str:
        return f"B-{self.depth}/Wi-{self.width}"

    def error(self, field: str) -> float:
        if field not in ERROR_FIELDS:
            raise ValueError(f"unknown error field {field!r}; choose from {ERROR_FIELDS}")
        return getattr(self, field)


def write_runs_csv(runs, path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RUN_COLUMNS)
        for r in runs:
            w.writerow(["" if isinstance(v, float) and math.isnan(v) else (repr(v) if isinstance(v, float) else v)
                        for v in (getattr(r, c) for c in RUN_COLUMNS)])


def read_runs_csv(path) -> list[RunRecord]:
    types = {f.name: f.type for f in fields(RunRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k in RUN_COLUMNS:
                v = row[k]
                if types[k] == "int":
                    kw[k] = int(v)
                elif types[k] == "float":
                    kw[k] = float(v) if v != "" else math.nan
                else:
                    kw[k] = v
            out.append(RunRecord(**kw))
    return out


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class LMResult:
    x: np.ndarray
    cost: float  # 0.5 * sum of squared residuals
    iterations: int  # accepted steps
    evaluations: int
    status: str


def _numeric_jacobian(fun, x, r0, lo, hi):
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        h = 1e-7 * max(1.0, abs(x[j]))
        xp = x.copy()
        if xp[j] + h > hi[j]:
            h = -h
        xp[j] += h
        J[:, j] = (fun(xp) - r0) / h
    return J


def lm_least_squares(fun, x0, jac=None, bounds=None, max_iter: int = 500, xtol: float = 1e-10,
                     ftol: float = 1e-12) -> LMResult:
    """Bounded damped Gauss-Newton (Levenberg-Marquardt) on ``0.5 * ||fun(x)||^2``.

    Steps start undamped; damping grows by 10x on every rejected step and
    shrinks on accepted ones. Variables pinned at a bound whose gradient
    points outward are frozen for that step, the rest are projected into
    the box. Stops when the step norm falls below ``xtol`` (relative to
    ``||x||``), when the relative cost decrease falls below ``ftol``, or
    after ``max_iter`` accepted steps.
    """
    x = np.array(x0, dtype=np.float64)
    n = x.size
    if bounds is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy() for v in bounds)
    if np.any(lo > hi):
        raise ValueError("inconsistent bounds")
    x = np.clip(x, lo, hi)
    r = np.asarray(fun(x), dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is not finite at the starting point")
    cost = 0.5 * float(r @ r)
    nfev = 1
    lam = 0.0
    it = 0
    status = "max_iter"
    while it < max_iter:
        J = jac(x) if jac is not None else _numeric_jacobian(fun, x, r, lo, hi)
        nfev += 0 if jac is not None else n
        g = J.T @ r
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        if cost == 0.0 or not np.any(free) or np.max(np.abs(g[free])) == 0.0:
            status = "gradient"
            break
        Jf = J[:, free]
        scale = np.sqrt(np.maximum((Jf * Jf).sum(0), 1e-300))
        accepted = False
        while True:
            if lam > 0:
                A = np.vstack([Jf, np.sqrt(lam) * np.diag(scale)])
                b = np.concatenate([-r, np.zeros(Jf.shape[1])])
            else:
                A, b = Jf, -r
            step = np.linalg.lstsq(A, b, rcond=None)[0]
            x_new = x.copy()
            x_new[free] += step
            x_new = np.clip(x_new, lo, hi)
            dx = x_new - x
            if np.linalg.norm(dx) <= xtol * (np.linalg.norm(x) + xtol):
                status = "xtol"
                break
            r_new = np.asarray(fun(x_new), dtype=np.float64)
            nfev += 1
            with np.errstate(over="ignore"):  # an overflowing trial step is simply rejected
                cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                break
            lam = 1e-3 if lam == 0.0 else lam * 10.0
            if lam > 1e16:
                status = "damping"
                break
        if not accepted:
            break
        it += 1
        improvement = cost - cost_new
        x, r, cost = x_new, r_new, cost_new
        lam = lam / 10.0 if lam > 1e-12 else 0.0
        if improvement <= ftol * cost_new or cost == 0.0:
            status = "ftol"
            break
    return LMResult(x, cost, it, nfev, status)


# ---------------------------------------------------------------------------
# power law


def power_law(c, a, b, alpha, e_inf):
    """``a * (b + C)^(-alpha) + E_inf``, evaluated in log space so extreme fits stay finite."""
    base = b + np.asarray(c, dtype=np.float64)
    if a <= 0:
        return np.zeros_like(base) + e_inf
    with np.errstate(divide="ignore", over="ignore"):
        return np.exp(math.log(a) - alpha * np.log(base)) + e_inf


@dataclass
class PowerLawFit:
    a: float
    b: float
    alpha: float | None
    e_inf: float
    rss: float
    c_min: float
    c_max: float
    n_points: int
    degenerate: bool = False

    def predict(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if self.degenerate:
            return np.full_like(c, self.e_inf)
        return power_law(c, self.a, self.b, self.alpha, self.e_inf)

    def to_json(self) -> str:
        return json.dumps({"parameters": {"a": self.a, "b": self.b, "alpha": self.alpha, "e_inf": self.e_inf},
                           "residual": self.rss, "domain": {"c_min": self.c_min, "c_max": self.c_max},
                           "n_points": self.n_points, "degenerate": self.degenerate}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PowerLawFit":
        d = json.loads(text)
        p = d["parameters"]
        return cls(p["a"], p["b"], p["alpha"], p["e_inf"], d["residual"], d["domain"]["c_min"],
                   d["domain"]["c_max"], d["n_points"], d["degenerate"])


def init_grid(c: np.ndarray, e: np.ndarray):
    """Multi-start points as (a, b, alpha, e_inf) tuples."""
    order = np.argsort(c)
    c1, e1 = c[order[0]], e[order[0]]
    e_min = float(e.min())
    starts = []
    for alpha in np.geomspace(0.05, 1.0, 8):
        for e_inf in (0.0, 0.5 * e_min, 0.9 * e_min):
            for b in (0.0, float(np.median(c))):
                a = (e1 - e_inf) * (b + c1) ** alpha
                starts.append((float(a), b, float(alpha), float(e_inf)))
    return starts


def fit_power_law(c, e) -> PowerLawFit:
    """Least-squares fit of ``E(C) = a (b + C)^-alpha + E_inf`` in linear error space.

    Bounds: a, b >= 0, alpha > 0, 0 <= E_inf <= min(E). Runs bounded LM from
    every start in :func:`init_grid` and keeps the lowest residual. Fewer than
    four points or constant errors give a degenerate fit (alpha is None).
    """
    c = np.asarray(c, dtype=np.float64).ravel()
    e = np.asarray(e, dtype=np.float64).ravel()
    if c.shape != e.shape:
        raise ValueError("C and E must have the same length")
    if np.any(c <= 0) or np.any(~np.isfinite(e)):
        raise ValueError("compute must be positive and errors finite")
    order = np.lexsort((e, c))
    c, e = c[order], e[order]
    n = c.size
    if n < 4 or np.ptp(e) == 0.0:
        if n == 0:
            e_inf = math.nan
        else:
            e_inf = float(e[0]) if np.ptp(e) == 0.0 else float(e.mean())
        rss = float(((e - e_inf) ** 2).sum())
        lo, hi = (float(c[0]), float(c[-1])) if n else (math.nan, math.nan)
        return PowerLawFit(0.0, 0.0, None, e_inf, rss, lo, hi, n, True)

    # Optimise (log a, b / b_scale, alpha, E_inf) so every coordinate is O(1).
    b_scale = float(np.median(c))

    def unpack(p):
        return math.exp(p[0]), p[1] * b_scale, p[2], p[3]

    def resid(p):
        la, u, alpha, e_inf = p
        base = u * b_scale + c
        # a * base^-alpha evaluated as exp(la - alpha*log(base)) to avoid overflow
        return np.exp(la - alpha * np.log(base)) + e_inf - e

    def jac(p):
        la, u, alpha, e_inf = p
        base = u * b_scale + c
        t = np.exp(la - alpha * np.log(base))
        return np.column_stack([t, -alpha * t * b_scale / base, -t * np.log(base), np.ones_like(c)])

    # log a is boxed so exp() stays finite on near-flat data
    lo = np.array([-700.0, 0.0, 1e-9, 0.0])
    hi = np.array([700.0, np.inf, np.inf, float(e.min())])
    best = None
    for a0, b0, al0, ei0 in init_grid(c, e):
        if a0 <= 0:
            continue
        p0 = np.array([math.log(a0), b0 / b_scale, al0, ei0])
        with np.errstate(over="ignore", invalid="ignore"):
            res = lm_least_squares(resid, p0, jac=jac, bounds=(lo, hi))
        if best is None or res.cost < best.cost:
            best = res
    a, b, alpha, e_inf = unpack(best.x)
    return PowerLawFit(float(a), float(b), float(alpha), float(e_inf), 2.0 * best.cost, float(c[0]), float(c[-1]), n)


# ---------------------------------------------------------------------------
# frontier and allocation


def pareto_frontier(runs, error_field: str):
    """Runs not beaten by any run that is no more expensive, ordered by compute.

    A run is dropped when another run has C <= C_r and E <= E_r with at least
    one strict; among exact (C, E) ties the smaller model is kept. The result
    has strictly increasing C and strictly decreasing E.
    """
    runs = [r for r in runs if not math.isnan(r.error(error_field))]
    if not runs:
        return []
    ranked = sorted(runs, key=lambda r: (r.compute_flops, r.error(error_field), r.params, r.run_id))
    front = []
    best = math.inf
    for r in ranked:
        e = r.error(error_field)
        if e < best:
            if front and front[-1].compute_flops == r.compute_flops:
                continue
            front.append(r)
            best = e
    return front


@dataclass
class AllocationFit:
    quantity: str  # "P" or "N"
    exponent: float
    intercept: float  # natural-log intercept: log Q = intercept + exponent * log C
    n_points: int

    def predict(self, c):
        return np.exp(self.intercept + self.exponent * np.log(np.asarray(c, dtype=np.float64)))


def _loglog_ols(c, q, quantity) -> AllocationFit:
    x = np.log(np.asarray(c, dtype=np.float64))
    y = np.log(np.asarray(q, dtype=np.float64))
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return AllocationFit(quantity, slope, float(ym - slope * xm), len(x))


def fit_allocation(frontier, error_field: str = "upstream_err", epochs: int | None = None):
    """Log-log OLS of model size P and dataset size N against compute over frontier runs.

    With ``epochs`` set, only runs trained for exactly that many epochs are
    used. Runs sharing a compute value are collapsed to the lowest-error one.
    """
    if epochs is not None:
        frontier = [r for r in frontier if r.epochs == epochs]
    by_c = {}
    for r in frontier:
        key = r.compute_flops
        cur = by_c.get(key)
        rank = (r.error(error_field), r.params, r.run_id)
        if cur is None or rank < (cur.error(error_field), cur.params, cur.run_id):
            by_c[key] = r
    pts = [by_c[k] for k in sorted(by_c)]
    if len(pts) < 2:
        raise ValueError("allocation fit needs at least two frontier points with distinct compute")
    c = [r.compute_flops for r in pts]
    return (_loglog_ols(c, [r.params for r in pts], "P"),
            _loglog_ols(c, [r.dataset_size for r in pts], "N"))


def allocation_fit_json(p_fit: AllocationFit, n_fit: AllocationFit) -> dict:
    return {"P": asdict(p_fit), "N": asdict(n_fit)}
