"""Finite-N versus mean-field experiments: propagation of chaos and value convergence."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .measures import EmpiricalMeasure, MeasureFlow, w1, w2
from .model import Model
from .policy import StoppingPolicy, evaluate_policy
from .simulate import (
    INIT,
    NEVER,
    NOISE,
    STOPS,
    FixedTimes,
    IidSurvival,
    Never,
    TimeGrid,
    _fixed_decider,
    gaussian_increments,
    iid_stopping_rule,
    mckean_vlasov_flow,
    propagate,
    quantile_sample,
    resample,
    stream,
)
from .snell import SpatialGrid, solve_cascade, solve_single, value_at


def sub_seed(seed: int, *key: int) -> int:
    """Independent 63-bit seed derived from ``seed`` and an integer key."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(2, np.uint64)
    return int(state[0] >> np.uint64(1))


def fmt(v) -> str:
    """Shortest round-trip text for floats; plain ``str`` otherwise."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


# -- propagation of chaos -------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    intercept: float
    degenerate: bool


def rate_fit(Ns, values) -> RateFit:
    """Least-squares slope of ``log value`` against ``log N``.

    The fit is flagged degenerate when the values are constant or not positive.
    """
    Ns = np.asarray(Ns, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(Ns) < 3:
        raise ValueError("rate fit needs at least three N values")
    if np.any(values <= 0):
        return RateFit(float("nan"), float("nan"), True)
    ly = np.log(values)
    slope, intercept = np.polyfit(np.log(Ns), ly, 1)
    degenerate = bool(np.ptp(ly) == 0.0)
    if degenerate:
        slope = 0.0
    return RateFit(float(slope), float(intercept), degenerate)


@dataclass
class ChaosReport:
    Ns: list
    estimates: np.ndarray
    stderrs: np.ndarray
    replications: int
    samples: dict
    fit: RateFit | None
    picard_gap: float
    picard_iterations: int
    picard_converged: bool
    cloud_size: int
    cloud_bias: float | None = None
    secondary: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def summary_csv(self) -> str:
        slope = self.fit.slope if self.fit else float("nan")
        rows = [(N, e, s, self.replications, slope, self.picard_gap)
                for N, e, s in zip(self.Ns, self.estimates, self.stderrs)]
        return csv_text(["N", "estimate", "stderr", "replications", "slope", "picard_gap"], rows)

    def detail_csv(self) -> str:
        rows = [(N, r, v) for N in self.Ns for r, v in enumerate(self.samples[N])]
        return csv_text(["N", "replication", "sup_w1_squared"], rows)


def _system_stops(rule, i0, seed, R):
    N = i0.shape[1]
    if isinstance(rule, Never):
        nodes = np.full((R, N), NEVER, dtype=np.int64)
    elif isinstance(rule, IidSurvival):
        nodes = np.stack([iid_stopping_rule(rule.law, i0[r], stream(seed, STOPS, r, 0)).nodes for r in range(R)])
    elif isinstance(rule, FixedTimes):
        nodes = np.broadcast_to(rule.nodes, (R, N)).copy()
    else:
        raise TypeError("chaos rules are Never, FixedTimes or IidSurvival")
    return np.where(i0 == 0, 0, nodes)


def sup_distance(X, I, flow: MeasureFlow, metric, indicator_scale: float) -> float:
    """``max_s metric(m^N(Y_s), flow_s)^2`` for one system with paths X (nodes, N, d)."""
    best = 0.0
    for s in range(X.shape[0]):
        m = EmpiricalMeasure.uniform(X[s], I[s])
        same = m.n_atoms == flow[s].n_atoms
        best = max(best, metric(m, flow[s], general=not same, indicator_scale=indicator_scale) ** 2)
    return best


def chaos_experiment(
    model: Model,
    m0: EmpiricalMeasure,
    rule,
    Ns,
    reps: int,
    grid: TimeGrid,
    seed: int,
    *,
    M: int | None = None,
    k_max: int = 50,
    tol: float = 1e-10,
    indicator_scale: float = 1.0,
    secondary: bool = False,
    bias_check: bool = False,
    flow=None,
) -> ChaosReport:
    """``E[max_s W1^2(m^N(Y_s), m_s)]`` for each N against a particle reference flow.

    The reference flow is computed once with ``M`` particles (default
    ``10 max(Ns)``).  System ``N``, replication ``r`` draws its initial atoms
    i.i.d. from ``m0``, its stopping nodes from ``rule`` and its noise from
    streams keyed by a seed derived from ``(seed, N)``.
    """
    Ns = sorted(int(N) for N in Ns)
    if len(set(Ns)) != len(Ns):
        raise ValueError("N values must be distinct")
    M = 10 * max(Ns) if M is None else int(M)
    report_warnings = []
    if flow is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            flow = mckean_vlasov_flow(model, m0, grid, rule, M, seed, k_max=k_max, tol=tol,
                                      indicator_scale=indicator_scale)
        report_warnings += [str(c.message) for c in caught]
    if max(Ns) > flow.size // 10 and max(Ns) != flow.size:
        report_warnings.append(f"largest N {max(Ns)} exceeds a tenth of the cloud size {flow.size}")
    est, se, samples, second = [], [], {}, {}
    d = m0.dim
    for N in Ns:
        s_seed = sub_seed(seed, N)
        x0 = np.empty((reps, N, d))
        i0 = np.empty((reps, N), dtype=np.int8)
        for r in range(reps):
            x0[r], i0[r] = resample(m0, N, stream(s_seed, INIT, r, 0))
        stops = _system_stops(rule, i0, s_seed, reps)
        noise = gaussian_increments(s_seed, grid.n_steps, d, reps, np.arange(N), purpose=NOISE)
        X, I, _, _ = propagate(model, grid, x0, i0, noise, _fixed_decider(stops, i0))
        vals = np.array([sup_distance(X[r], I[r], flow.flow, w1, indicator_scale) for r in range(reps)])
        samples[N] = vals
        est.append(vals.mean())
        se.append(vals.std(ddof=1) / np.sqrt(reps) if reps > 1 else np.nan)
        if secondary:
            second[N] = float(np.mean([sup_distance(X[r], I[r], flow.flow, w2, indicator_scale)
                                       for r in range(reps)]))
    fit = rate_fit(Ns, est) if len(Ns) >= 3 else None
    bias = None
    if bias_check:
        half = mckean_vlasov_flow(model, m0, grid, rule, M // 2, sub_seed(seed, 0), k_max=k_max, tol=tol,
                                  indicator_scale=indicator_scale)
        bias = max(w1(a, b, general=True, indicator_scale=indicator_scale) ** 2
                   for a, b in zip(flow.flow.measures, half.flow.measures))
    return ChaosReport(Ns, np.array(est), np.array(se), reps, samples, fit, flow.gap, flow.iterations,
                       flow.converged, flow.size, bias, {"w2_squared": second} if secondary else {},
                       report_warnings)


def self_distance(model: Model, grid: TimeGrid, flow, indicator_scale: float = 1.0) -> float:
    """Run the cloud's own initial state, stops and noise as an M-particle system; distance to the flow."""
    M = flow.size
    noise = gaussian_increments(flow.seed, grid.n_steps, flow.cloud_x0.shape[1], 1, np.arange(M))
    X, I, _, _ = propagate(model, grid, flow.cloud_x0[None], flow.cloud_i0[None], noise,
                           _fixed_decider(flow.cloud_stop_nodes[None], flow.cloud_i0[None]))
    return sup_distance(X[0], I[0], flow.flow, w1, indicator_scale)


# -- value convergence --------------------------------------------------------

@dataclass
class ConvergenceRow:
    N: int
    backend: str
    J: float
    se: float
    table_value: float
    oracle: float | None
    eta: float


@dataclass
class ConvergenceReport:
    rows: list
    differences: list
    tol_disc: float | None = None
    warnings: list = field(default_factory=list)

    def csv(self) -> str:
        out = []
        for k, r in enumerate(self.rows):
            diff = self.differences[k] if k < len(self.differences) else float("nan")
            gap = abs(r.J - r.oracle) if r.oracle is not None else float("nan")
            oracle = r.oracle if r.oracle is not None else float("nan")
            out.append((r.N, r.backend, r.J, r.se, r.table_value, oracle, gap, diff, r.eta))
        return csv_text(["N", "backend", "J", "stderr", "table_value", "oracle", "oracle_gap",
                         "next_difference", "eta"], out)


def mean_field_oracle(model: Model, m0: EmpiricalMeasure, grid: TimeGrid, sgrid: SpatialGrid) -> float:
    """``V(t0, m0)`` for an uncoupled model with additive payoff.

    Alive atoms earn the one-particle value, stopped atoms their payoff.
    """
    v, gbar = solve_single(model, grid, sgrid)
    x = m0.x[:, 0]
    alive = np.interp(x, sgrid.nodes, v[0])
    dead = np.interp(x, sgrid.nodes, gbar)
    return float(np.sum(m0.w * np.where(m0.i == 1, alive, dead)))


def value_convergence_experiment(
    model: Model,
    m0: EmpiricalMeasure,
    Ns,
    grid: TimeGrid,
    seed: int,
    *,
    backend: str = "auto",
    sgrid: SpatialGrid | None = None,
    lsmc_params: dict | None = None,
    reps: int = 10_000,
    eta: float | None = None,
) -> ConvergenceReport:
    """``V^N(t0, m^N(y^N))`` along ``Ns`` with ``y^N`` the mid-quantile sample of ``m0``.

    Each N is solved with the lattice (``N <= 3``, d = 1, ``sgrid`` given) or
    regression backend, then the induced policy is re-simulated (a lower
    bound).  For uncoupled models the exact mean-field value is attached.
    """
    rows = []
    oracle = None
    if not model.coupled and sgrid is not None and model.dim == 1:
        oracle = mean_field_oracle(model, m0, grid, sgrid)
    for N in Ns:
        x, i = quantile_sample(m0, N)
        y0 = (x, i)
        use = backend
        if backend == "auto":
            use = "Lattice" if (N <= 3 and model.dim == 1 and sgrid is not None) else "LSMC"
        if use == "Lattice":
            table = solve_cascade(model, N, grid, "Lattice", sgrid=sgrid)
        else:
            params = dict(lsmc_params or {})
            params.setdefault("seed", sub_seed(seed, 1, N))
            table = solve_cascade(model, N, grid, "LSMC", y0=y0, **params)
        policy = StoppingPolicy(table, eta=eta)
        ev = evaluate_policy(model, grid, y0, policy, reps, sub_seed(seed, 2, N))
        rows.append(ConvergenceRow(N, use, ev.J, ev.se, value_at(table, 0, y0), oracle, policy.resolved_eta))
    diffs = [abs(a.J - b.J) for a, b in zip(rows[:-1], rows[1:])]
    return ConvergenceReport(rows, diffs)
