"""Ricci flow of coordinate-frame metrics.

Two representations are supported.  Grid states hold the metric sampled on
a periodic tensor-product grid and are evolved with 4th-order central
differences in space and the classical 4th-order Runge-Kutta scheme in
time.  Metric families are symbolic in the coordinates and in a flow
parameter, so their residuals use exact derivatives.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import riemann
from .dconn import (_commutator_curvature, _Ctx, canonical_dconnection,
                    frame_ricci, levi_civita_koszul, ricci_dtensor)
from .expr import (Chart, as_field, differentiate, evaluate_array, field_matrix,
                   parse_scalar_field)
from .nconn import DMetric

__all__ = [
    "FlowConfig", "FlowGrid", "FlowState", "FlowTrajectory", "MetricFamily",
    "flow_rhs", "evolve", "evolve_frames", "flow_residual_family",
    "nonsymmetric_split", "evolution_diagnostics", "state_from_fields",
    "conformal_torus_oracle", "self_convergence", "m2ac_ansatz",
    "frame_ode_family", "write_snapshots", "FlowBreakdown",
]


class FlowBreakdown(ArithmeticError):
    """The metric lost nondegeneracy at some node."""

    def __init__(self, message: str, tau: float, node: tuple | None = None):
        super().__init__(message)
        self.tau = tau
        self.node = node


# ---------------------------------------------------------------------------
# configuration and state

@dataclass(frozen=True)
class FlowConfig:
    normalized: bool = False
    denominator: int | None = None
    lam: float = 0.0
    grid: tuple[int, ...] = ()
    dt: float = 1e-4
    steps: int = 100
    stride: int = 10
    workers: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 0 or self.stride < 1:
            raise ValueError("steps must be >= 0 and stride >= 1")
        if any(s < 8 for s in self.grid):
            raise ValueError("grid sizes must be at least 8")
        if self.denominator is not None and self.denominator <= 0:
            raise ValueError("normalization denominator must be positive")

    def denom(self, dim: int) -> int:
        return self.denominator or dim

    def check_stability(self, spacing) -> None:
        hmin = float(np.min(spacing))
        if self.dt > 0.25 * hmin ** 2:
            raise ValueError(f"dt={self.dt} exceeds the explicit stability guard "
                             f"0.25*h^2 = {0.25 * hmin ** 2:.3e}")

    def n_workers(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        env = os.environ.get("NHFLOW_THREADS")
        return max(1, int(env)) if env else 1


@dataclass(frozen=True)
class FlowGrid:
    """Periodic tensor-product grid, ``shape[k]`` nodes on [lo_k, hi_k)."""

    shape: tuple[int, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @classmethod
    def periodic(cls, shape, lengths=None) -> "FlowGrid":
        shape = tuple(int(s) for s in shape)
        lengths = lengths or (2 * np.pi,) * len(shape)
        return cls(shape, (0.0,) * len(shape), tuple(float(L) for L in lengths))

    @classmethod
    def from_chart(cls, chart: Chart, shape) -> "FlowGrid":
        if len(shape) != chart.dim:
            raise ValueError("one grid size per chart coordinate is required")
        if not all(per for _, _, per in chart.domain):
            raise ValueError("grid flows need a periodic domain in every coordinate")
        return cls(tuple(int(s) for s in shape), tuple(d[0] for d in chart.domain),
                   tuple(d[1] for d in chart.domain))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.shape)

    def axes(self) -> list[np.ndarray]:
        return [lo + h * np.arange(s) for lo, h, s in zip(self.lo, self.spacing, self.shape)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape shape + (dim,)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))


@dataclass(frozen=True)
class FlowState:
    tau: float
    G: np.ndarray
    E: np.ndarray | None = None


@dataclass
class FlowTrajectory:
    """Snapshots of a grid flow plus an optional breakdown diagnostic."""

    grid: FlowGrid
    states: list = field(default_factory=list)
    diagnostic: str | None = None

    def __len__(self):
        return len(self.states)

    def __getitem__(self, k):
        return self.states[k]

    def __iter__(self):
        return iter(self.states)

    @property
    def taus(self) -> np.ndarray:
        return np.array([s.tau for s in self.states])


def state_from_fields(G, grid: FlowGrid, E=None, tau: float = 0.0) -> FlowState:
    """Sample symbolic coordinate components on the grid nodes."""
    X = grid.points().reshape(-1, grid.dim)

    def sample(arr):
        A = np.asarray(arr, dtype=object)
        vals = evaluate_array(A, X)
        return vals.reshape(grid.shape + A.shape)

    Gv = sample(G)
    Ev = None if E is None else sample(E)
    return FlowState(tau, 0.5 * (Gv + np.swapaxes(Gv, -1, -2)), Ev)


# ---------------------------------------------------------------------------
# finite differences on the periodic grid

def _d1(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    r = lambda s: np.roll(f, -s, axis=axis)
    return (-r(2) + 8.0 * r(1) - 8.0 * r(-1) + r(-2)) / (12.0 * h)


def _d2(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    r = lambda s: np.roll(f, -s, axis=axis)
    return (-r(2) + 16.0 * r(1) - 30.0 * f + 16.0 * r(-1) - r(-2)) / (12.0 * h * h)


def grid_jets(F: np.ndarray, grid: FlowGrid, order: int = 2):
    """First and second partial derivatives of node data F (grid axes first).

    Returns dF[..., k] and d2F[..., k, l].
    """
    D = grid.dim
    h = grid.spacing
    dF = np.stack([_d1(F, k, h[k]) for k in range(D)], axis=-1)
    if order < 2:
        return dF, None
    d2F = np.empty(F.shape + (D, D))
    for k in range(D):
        d2F[..., k, k] = _d2(F, k, h[k])
        for l in range(k + 1, D):
            v = _d1(dF[..., l], k, h[k])
            d2F[..., k, l] = v
            d2F[..., l, k] = v
    return dF, d2F


def _check_metric(G: np.ndarray, tau: float):
    det = np.linalg.det(G)
    bad = ~(np.abs(det) > 1e-12 * np.max(np.abs(G), axis=(-1, -2)) ** G.shape[-1])
    if np.any(bad) or not np.all(np.isfinite(G)):
        node = tuple(int(i) for i in np.argwhere(bad | ~np.isfinite(det))[0])
        raise FlowBreakdown(f"metric degenerate at node {node}, tau={tau:.6g}", tau, node)


def _pairwise_sum(a: np.ndarray) -> float:
    # numpy reduces contiguous float arrays pairwise
    return float(np.add.reduce(np.ascontiguousarray(a).reshape(-1)))


def _node_chunks(P: int, workers: int) -> list[slice]:
    if workers <= 1 or P < 2 * workers:
        return [slice(0, P)]
    bounds = np.linspace(0, P, workers + 1).astype(int)
    return [slice(bounds[k], bounds[k + 1]) for k in range(workers)]


def grid_curvature(G: np.ndarray, grid: FlowGrid, workers: int = 1):
    """(Ricci, scalar curvature, G^-1) at every node."""
    dG, d2G = grid_jets(G, grid)
    D = grid.dim
    P = int(np.prod(grid.shape))
    Gf = G.reshape(P, D, D)
    dGf = dG.reshape(P, D, D, D)
    d2Gf = d2G.reshape(P, D, D, D, D)
    Gi = np.linalg.inv(Gf)
    Ric = np.empty((P, D, D))

    def work(sl):
        Ric[sl] = riemann.ricci(Gf[sl], dGf[sl], d2Gf[sl], Gi[sl])

    chunks = _node_chunks(P, workers)
    if len(chunks) == 1:
        work(chunks[0])
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
            list(ex.map(work, chunks))
    Ric = 0.5 * (Ric + np.swapaxes(Ric, -1, -2))
    R = np.einsum("pab,pab->p", Gi, Ric)
    shp = grid.shape
    return Ric.reshape(shp + (D, D)), R.reshape(shp), Gi.reshape(shp + (D, D))


def average_scalar(G: np.ndarray, R: np.ndarray) -> float:
    """r = int R dV / int dV with the periodic trapezoidal rule."""
    vol = np.sqrt(np.abs(np.linalg.det(G)))
    return _pairwise_sum(R * vol) / _pairwise_sum(vol)


# ---------------------------------------------------------------------------
# symbolic families

@dataclass(frozen=True, eq=False)
class MetricFamily:
    """Coordinate metric G(tau, u) as symbolic fields.

    Points are rows whose first ``dim`` entries are coordinates; the flow
    parameter sits in column ``tau_index``.  ``dm`` optionally carries the
    N-adapted description of the same family.
    """

    G: np.ndarray
    tau_index: int
    chart: Chart | None = None
    dm: DMetric | None = None

    def __post_init__(self):
        G = np.asarray(self.G, dtype=object)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError("family metric must be a square matrix of fields")
        G = np.vectorize(as_field, otypes=[object])(G)
        for i in range(G.shape[0]):
            for j in range(i + 1, G.shape[0]):
                if G[i, j] is not G[j, i]:
                    raise ValueError("family metric must be symmetric")
        object.__setattr__(self, "G", G)

    @classmethod
    def parse(cls, rows, chart: Chart, tau: str = "tau") -> "MetricFamily":
        ch = chart.with_params(tau)
        return cls(field_matrix(rows, ch), ch.index(tau), ch)

    @classmethod
    def from_dmetric(cls, dm: DMetric, tau: str = "tau") -> "MetricFamily":
        return cls(dm.assembled, dm.chart.index(tau), dm.chart, dm)

    @property
    def dim(self) -> int:
        return self.G.shape[0]

    def jets(self):
        """Symbolic dG[m,n,k], d2G[m,n,k,l] and dG/dtau."""
        D = self.dim
        dG = np.empty((D, D, D), dtype=object)
        d2G = np.empty((D, D, D, D), dtype=object)
        for idx in np.ndindex(D, D):
            for k in range(D):
                dG[idx + (k,)] = differentiate(self.G[idx], k)
            for k in range(D):
                for l in range(D):
                    d2G[idx + (k, l)] = differentiate(dG[idx + (k,)], l)
        Gt = np.vectorize(lambda f: differentiate(f, self.tau_index), otypes=[object])(self.G)
        return dG, d2G, Gt


def _family_arrays(fam: MetricFamily, X: np.ndarray):
    dG, d2G, Gt = fam.jets()
    memo: dict = {}
    return (evaluate_array(fam.G, X, memo), evaluate_array(dG, X, memo),
            evaluate_array(d2G, X, memo), evaluate_array(Gt, X, memo))


def _family_average_scalar(fam: MetricFamily, tau: float, cfg: FlowConfig) -> float:
    if fam.chart is None or not cfg.grid:
        raise ValueError("normalized family residuals need a chart and cfg.grid for quadrature")
    ch = fam.chart
    axes = [lo + (hi - lo) * (np.arange(s) + 0.5) / s
            for (lo, hi, _), s in zip(ch.domain, cfg.grid)]
    U = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, ch.dim)
    X = np.zeros((U.shape[0], ch.nvars))
    X[:, :ch.dim] = U
    X[:, fam.tau_index] = tau
    G, dG, d2G, _ = _family_arrays(fam, X)
    R = riemann.scalar(G, dG, d2G)
    vol = np.sqrt(np.abs(np.linalg.det(G)))
    return _pairwise_sum(R * vol) / _pairwise_sum(vol)


# ---------------------------------------------------------------------------
# right-hand side and evolution

def flow_rhs(state, cfg: FlowConfig, grid: FlowGrid | None = None, X=None):
    """-2 Ric (+ 2r/den g when normalized) per node or per sample row.

    For a FlowState pass its grid; for a MetricFamily pass rows ``X``.
    """
    if isinstance(state, MetricFamily):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        G, dG, d2G, _ = _family_arrays(state, X)
        Ric = riemann.ricci(G, dG, d2G)
        out = -2.0 * Ric
        if cfg.normalized:
            taus = np.unique(X[:, state.tau_index])
            for t in taus:
                sel = X[:, state.tau_index] == t
                r = _family_average_scalar(state, float(t), cfg)
                out[sel] += (2.0 * r / cfg.denom(state.dim)) * G[sel]
        return out
    if grid is None:
        raise ValueError("grid states need their FlowGrid")
    _check_metric(state.G, state.tau)
    Ric, R, _ = grid_curvature(state.G, grid, cfg.n_workers())
    out = -2.0 * Ric
    if cfg.normalized:
        r = average_scalar(state.G, R)
        out = out + (2.0 * r / cfg.denom(grid.dim)) * state.G
    return out


def _rhs_with_frames(G, E, tau, grid, cfg):
    _check_metric(G, tau)
    Ric, R, Gi = grid_curvature(G, grid, cfg.n_workers())
    dG = -2.0 * Ric
    if cfg.normalized:
        dG = dG + (2.0 * average_scalar(G, R) / cfg.denom(grid.dim)) * G
    dE = None
    if E is not None:
        dE = np.einsum("...mb,...bg,...ag->...am", Gi, Ric, E)
    return dG, dE


def evolve(initial: FlowState, cfg: FlowConfig, grid: FlowGrid,
           frames: bool = False) -> FlowTrajectory:
    """RK4 integration of dG/dtau = RHS; snapshots every ``cfg.stride`` steps.

    With ``frames`` the frame coefficients in ``initial.E`` are evolved with
    de/dtau = g^-1 Ric e (unnormalized right-hand side only for the frame).
    On breakdown the partial trajectory is returned with a diagnostic.
    """
    cfg.check_stability(grid.spacing)
    if frames and initial.E is None:
        raise ValueError("frame evolution needs initial frames")
    G = initial.G.copy()
    E = initial.E.copy() if frames else None
    tau = initial.tau
    dt = cfg.dt
    traj = FlowTrajectory(grid, [FlowState(tau, G.copy(), None if E is None else E.copy())])

    def f(Gs, Es, t):
        return _rhs_with_frames(Gs, Es, t, grid, cfg)

    for step in range(1, cfg.steps + 1):
        try:
            k1G, k1E = f(G, E, tau)
            k2G, k2E = f(G + 0.5 * dt * k1G, None if E is None else E + 0.5 * dt * k1E, tau + 0.5 * dt)
            k3G, k3E = f(G + 0.5 * dt * k2G, None if E is None else E + 0.5 * dt * k2E, tau + 0.5 * dt)
            k4G, k4E = f(G + dt * k3G, None if E is None else E + dt * k3E, tau + dt)
        except FlowBreakdown as exc:
            traj.diagnostic = str(exc)
            return traj
        G = G + (dt / 6.0) * (k1G + 2.0 * k2G + 2.0 * k3G + k4G)
        G = 0.5 * (G + np.swapaxes(G, -1, -2))
        if E is not None:
            E = E + (dt / 6.0) * (k1E + 2.0 * k2E + 2.0 * k3E + k4E)
        tau = initial.tau + step * dt
        if step % cfg.stride == 0 or step == cfg.steps:
            traj.states.append(FlowState(tau, G.copy(), None if E is None else E.copy()))
    return traj


def evolve_frames(initial: FlowState, cfg: FlowConfig, grid: FlowGrid) -> FlowTrajectory:
    """Metric flow with frames carried along (grid-coupled mode)."""
    return evolve(initial, cfg, grid, frames=True)


def frame_ode_family(fam: MetricFamily, point, E0, tau_end: float, dt: float) -> np.ndarray:
    """Integrate de/dtau = g^-1 Ric e at a fixed point along a metric family."""
    u = np.asarray(point, dtype=float)
    D = fam.dim
    width = max(fam.tau_index + 1, D)

    def rhs(E, t):
        X = np.zeros((1, width))
        X[0, :D] = u[:D]
        X[0, fam.tau_index] = t
        G, dG, d2G, _ = _family_arrays(fam, X)
        Ric = riemann.ricci(G, dG, d2G)[0]
        return np.einsum("mb,bg,ag->am", np.linalg.inv(G[0]), Ric, E)

    steps = int(round(tau_end / dt))
    h = tau_end / steps
    E = np.array(E0, dtype=float)
    t = 0.0
    for _ in range(steps):
        k1 = rhs(E, t)
        k2 = rhs(E + 0.5 * h * k1, t + 0.5 * h)
        k3 = rhs(E + 0.5 * h * k2, t + 0.5 * h)
        k4 = rhs(E + h * k3, t + h)
        E = E + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return E


def orthonormality_drift(traj: FlowTrajectory) -> np.ndarray:
    """max |E G E^T - I| per snapshot."""
    out = []
    for s in traj:
        M = np.einsum("...am,...mn,...bn->...ab", s.E, s.G, s.E)
        out.append(float(np.max(np.abs(M - np.eye(M.shape[-1])))))
    return np.array(out)


# ---------------------------------------------------------------------------
# oracles for the conformal torus

def conformal_torus_oracle(u0: np.ndarray, lengths, tau: float, dt: float) -> np.ndarray:
    """Spectral solve of u_tau = exp(-2u) Lap u on a periodic 2D grid."""
    shape = u0.shape
    ks = [2 * np.pi * np.fft.fftfreq(s, d=L / s) for s, L in zip(shape, lengths)]
    K = np.meshgrid(*ks, indexing="ij")
    lap_sym = -sum(k * k for k in K)

    def rhs(u):
        lap = np.real(np.fft.ifftn(lap_sym * np.fft.fftn(u)))
        return np.exp(-2.0 * u) * lap

    steps = int(round(tau / dt))
    h = tau / steps
    u = u0.copy()
    for _ in range(steps):
        k1 = rhs(u)
        k2 = rhs(u + 0.5 * h * k1)
        k3 = rhs(u + 0.5 * h * k2)
        k4 = rhs(u + h * k3)
        u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def self_convergence(initial: FlowState, cfg: FlowConfig, grid: FlowGrid) -> dict:
    """Errors of runs with dt, dt/2 against a dt/4 reference on the same grid."""
    runs = []
    for k in range(3):
        c = FlowConfig(cfg.normalized, cfg.denominator, cfg.lam, cfg.grid,
                       cfg.dt / 2 ** k, cfg.steps * 2 ** k, cfg.steps * 2 ** k, cfg.workers)
        runs.append(evolve(initial, c, grid)[-1].G)
    e1 = float(np.max(np.abs(runs[0] - runs[2])))
    e2 = float(np.max(np.abs(runs[1] - runs[2])))
    # a 4th-order scheme gives e1/e2 -> 17
    return {"error_dt": e1, "error_half": e2, "ratio": e1 / e2 if e2 > 0 else np.inf}


# ---------------------------------------------------------------------------
# family residuals

def _adapted_route_rhs(dm: DMetric, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dG/dtau and Ric in coordinates computed from N-adapted objects."""
    N = dm.N
    t = dm.chart.index("tau")
    ctx = _Ctx(N, X)
    Ric_ad = frame_ricci(_commutator_curvature(ctx, levi_civita_koszul(dm).data))
    Th_s = N.coframe_fields()
    d = dm.adapted
    dt_ = np.vectorize(lambda f: differentiate(f, t), otypes=[object])
    Th, Th_t = ctx.ev(Th_s), ctx.ev(dt_(Th_s))
    dv, dv_t = ctx.ev(d), ctx.ev(dt_(d))
    Gt = (np.einsum("...am,...ab,...bn->...mn", Th_t, dv, Th)
          + np.einsum("...am,...ab,...bn->...mn", Th, dv_t, Th)
          + np.einsum("...am,...ab,...bn->...mn", Th, dv, Th_t))
    Ric = np.einsum("...am,...ab,...bn->...mn", Th, Ric_ad, Th)
    return Gt, Ric


def flow_residual_family(fam: MetricFamily, cfg: FlowConfig, samples) -> dict:
    """dG/dtau + 2 Ric (- 2r/den G when normalized) at sample rows.

    When the family carries its N-adapted form, the residual is also
    assembled from adapted-frame objects and the path difference reported.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    G, dG, d2G, Gt = _family_arrays(fam, X)
    Ric = riemann.ricci(G, dG, d2G)
    norm = np.zeros_like(G)
    if cfg.normalized:
        rhs = flow_rhs(fam, cfg, X=X)
        norm = rhs + 2.0 * Ric
    res = Gt + 2.0 * Ric - norm
    out = {"residual": res, "max_residual": float(np.max(np.abs(res)))}
    if fam.dm is not None:
        Gt2, Ric2 = _adapted_route_rhs(fam.dm, X)
        res2 = Gt2 + 2.0 * Ric2 - norm
        out["adapted_residual"] = res2
        out["path_difference"] = float(np.max(np.abs(res2 - res)))
    return out


def lifted_family(Lg) -> MetricFamily:
    """Sasaki-lift family of a tau-dependent Lagrangian (chart param ``tau``)."""
    from .lagfin import lift_metric
    return MetricFamily.from_dmetric(lift_metric(Lg))


# ---------------------------------------------------------------------------
# nonsymmetric split

def nonsymmetric_split(dm: DMetric, cfg: FlowConfig, p, dN_dtau=None) -> dict:
    """Right-hand sides of the N-adapted h-, v- and mixed flow equations.

    ``dN_dtau`` optionally gives dN^a_i/dtau as an m x n field matrix.
    The mixed equations use +R_ia, +R_ai without a factor.
    """
    from .expr import as_batch
    X, single = as_batch(p, dm.chart)
    c = canonical_dconnection(dm, check=False)
    Ric = ricci_dtensor(c, X, "formula")
    Ric_c = ricci_dtensor(c, X, "commutator")
    ctx = _Ctx(dm.N, X)
    g, h = ctx.ev(dm.g), ctx.ev(dm.h)
    Nv = ctx.ev(dm.N.N)
    if dN_dtau is None:
        Nt = np.zeros_like(Nv)
    else:
        Nt = ctx.ev(field_matrix(dN_dtau, dm.chart))
    lam = cfg.lam
    dNN = np.einsum("...ci,...dj->...cdij", Nt, Nv) + np.einsum("...ci,...dj->...cdij", Nv, Nt)

    def rhs(R):
        b = R.blocks
        r1 = -2.0 * b["R_ij"] + 2.0 * lam * g - np.einsum("...cd,...cdij->...ij", h, dNN)
        r2 = -2.0 * b["R_ab"] + 2.0 * lam * h
        return r1, r2, b["R_ia"], b["R_ai"]

    r1, r2, r3, r4 = rhs(Ric)
    o1, o2, o3, o4 = rhs(Ric_c)
    dev = max(float(np.max(np.abs(a - b))) for a, b in ((r1, o1), (r2, o2), (r3, o3), (r4, o4)))
    f = (lambda a: a[0]) if single else (lambda a: a)
    return {"rhs_h": f(r1), "rhs_v": f(r2), "rhs_hv": f(r3), "rhs_vh": f(r4),
            "constraint": (float(np.max(np.abs(r3))), float(np.max(np.abs(r4)))),
            "oracle_deviation": dev}


def m2ac_ansatz(rng: np.random.Generator, terms: int = 2) -> DMetric:
    """Random 4D d-metric with g_i(x), h_a(x, v), N^a_i(x, v) and v = y3.

    Coefficients are bounded trigonometric polynomials; diagonal entries are
    kept positive.
    """
    ch = Chart(2, 2)

    def trig(vars_, positive=False):
        s = []
        for _ in range(terms):
            v = ch.names[int(rng.choice(vars_))]
            k = int(rng.integers(1, 3))
            amp = float(rng.uniform(-0.3, 0.3))
            fn = "sin" if rng.random() < 0.5 else "cos"
            s.append(f"{amp:.6f}*{fn}({k}*{v})")
        base = "1.5 + " if positive else ""
        return parse_scalar_field(base + " + ".join(s), ch)

    xs, xv = [0, 1], [0, 1, 2]
    g = [[trig(xs, True), "0"], ["0", trig(xs, True)]]
    h = [[trig(xv, True), "0"], ["0", trig(xv, True)]]
    N = [[trig(xv), trig(xv)], [trig(xv), trig(xv)]]
    return DMetric.build(ch, g, h, field_matrix(N, ch))


# ---------------------------------------------------------------------------
# diagnostics

def _grid_laplacian(G, Gi, F, grid: FlowGrid):
    dG, _ = grid_jets(G, grid, 1)
    dF, d2F = grid_jets(F, grid)
    Gam = riemann.christoffel(G, dG, Gi)
    hess = d2F - np.einsum("...rmn,...r->...mn", Gam, dF)
    return np.einsum("...mn,...mn->...", Gi, hess)


def _split_scalars(G: np.ndarray, grid: FlowGrid, n: int) -> dict:
    """Scalar curvature of the canonical d-connection and the distortion trace.

    Everything is rebuilt from grid data: N from the off-diagonal block,
    frame derivatives through finite differences.
    """
    D = grid.dim
    h = G[..., n:, n:]
    hi = np.linalg.inv(h)
    N = np.einsum("...ab,...ib->...ai", hi, G[..., :n, n:])        # N^a_i
    g = G[..., :n, :n] - np.einsum("...ai,...ab,...bj->...ij", N, h, N)
    gi = np.linalg.inv(g)
    E = np.broadcast_to(np.eye(D), grid.shape + (D, D)).copy()
    E[..., :n, n:] = -np.swapaxes(N, -1, -2)
    Th = np.broadcast_to(np.eye(D), grid.shape + (D, D)).copy()
    Th[..., n:, :n] = N

    def fe(F):
        """Frame derivatives, trailing axis alpha."""
        dF, _ = grid_jets(F, grid, 1)
        return np.einsum("...m,...am->...a", dF, E.reshape(grid.shape + (1,) * (F.ndim - D) + (D, D)))

    def fpart(F):
        dF, _ = grid_jets(F, grid, 1)
        return dF

    eg, eh = fe(g), fe(h)
    dN = fpart(N)                                          # [a, i, mu]
    dNy = dN[..., n:]                                      # [a, i, b] = d_b N^a_i
    Lh = 0.5 * (np.einsum("...ir,...jrk->...ijk", gi, eg[..., :n])
                + np.einsum("...ir,...krj->...ijk", gi, eg[..., :n])
                - np.einsum("...ir,...jkr->...ijk", gi, eg[..., :n]))
    Lv = np.einsum("...akb->...abk", dNy) + 0.5 * np.einsum(
        "...ac,...bck->...abk", hi,
        eh[..., :n] - np.einsum("...dc,...dkb->...bck", h, dNy)
        - np.einsum("...db,...dkc->...bck", h, dNy))
    Ch = 0.5 * np.einsum("...ik,...jkc->...ijc", gi, eg[..., n:])
    Cv = 0.5 * (np.einsum("...ad,...bdc->...abc", hi, eh[..., n:])
                + np.einsum("...ad,...cdb->...abc", hi, eh[..., n:])
                - np.einsum("...ad,...bcd->...abc", hi, eh[..., n:]))
    Gh = np.zeros(grid.shape + (D, D, D))
    Gh[..., :n, :n, :n] = Lh
    Gh[..., n:, n:, :n] = Lv
    Gh[..., :n, :n, n:] = Ch
    Gh[..., n:, n:, n:] = Cv
    # Levi-Civita in the adapted frame from coordinate Christoffels
    dG, _ = grid_jets(G, grid, 1)
    Gam = riemann.christoffel(G, dG)
    dE = fpart(E)
    inner = (np.einsum("...an,...bmn->...mba", E, dE)
             + np.einsum("...an,...bl,...mln->...mba", E, E, Gam))
    Glc = np.einsum("...gm,...mba->...gba", Th, inner)
    # anholonomy W[g, a, b] = [e_a, e_b]^g = Th^g_mu (e_a E_b^mu - e_b E_a^mu)
    eE = fe(E)                                             # [b, mu, a] = e_a E_b^mu
    W = np.einsum("...gm,...bma->...gab", Th, eE) - np.einsum("...gm,...amb->...gab", Th, eE)
    d = np.zeros(grid.shape + (D, D))
    d[..., :n, :n] = g
    d[..., n:, n:] = h
    di = np.linalg.inv(d)

    def ricci(Gc):
        from .dconn import frame_curvature
        return frame_ricci(frame_curvature(Gc, fe(Gc), W))

    ric_hat = ricci(Gh)
    ric_lc = ricci(Glc)
    sc_hat = np.einsum("...ab,...ab->...", di, ric_hat)
    z_trace = np.einsum("...ab,...ab->...", di, ric_lc - ric_hat)
    return {"sc_hat": sc_hat, "z_trace": z_trace, "ric_hat": ric_hat,
            "ric_z": ric_lc - ric_hat, "d": d, "di": di, "Gh": Gh, "fe": fe}


def evolution_diagnostics(traj: FlowTrajectory, split: int | None = None) -> dict:
    """Residuals of the curvature and volume evolution laws along a grid flow.

    (a) dR/dtau - Lap R - 2|Ric|^2 at interior snapshots (central
    differences in tau); (b) with a split n the d-object decomposition
    Sc - Sc_hat - Z_trace and the Q-scalar assembly; (c) the volume law
    d/dtau log sqrt(det G) + R.  Assumes an unnormalized flow with equally
    spaced snapshots.
    """
    if len(traj) < 3:
        raise ValueError("evolution diagnostics need at least three snapshots")
    grid = traj.grid
    taus = traj.taus
    spacing = np.diff(taus)
    if np.ptp(spacing) > 1e-9 * max(1.0, float(np.max(spacing))):
        raise ValueError("snapshots must be equally spaced in tau")
    dtau = float(spacing[0])
    curv = [grid_curvature(s.G, grid) for s in traj]
    logvol = [0.5 * np.log(np.abs(np.linalg.det(s.G))) for s in traj]
    res_a, res_c, scale = [], [], []
    for k in range(1, len(traj) - 1):
        Ric, R, Gi = curv[k]
        dR = (curv[k + 1][1] - curv[k - 1][1]) / (2 * dtau)
        lap = _grid_laplacian(traj[k].G, Gi, R, grid)
        ric2 = np.einsum("...ac,...bd,...ab,...cd->...", Gi, Gi, Ric, Ric)
        res_a.append(float(np.max(np.abs(dR - lap - 2.0 * ric2))))
        dlv = (logvol[k + 1] - logvol[k - 1]) / (2 * dtau)
        res_c.append(float(np.max(np.abs(dlv + R))))
        scale.append(float(np.max(np.abs(R))))
    out = {"taus": taus[1:-1], "scalar_evolution": np.array(res_a),
           "volume": np.array(res_c), "R_sup": np.array(scale)}
    if split is None or split >= grid.dim or split < 2:
        out["decomposition"] = None
        return out
    parts = [_split_scalars(s.G, grid, split) for s in traj]
    dec, q_gap = [], []
    for k in range(1, len(traj) - 1):
        R = curv[k][1]
        P = parts[k]
        dec.append(float(np.max(np.abs(R - P["sc_hat"] - P["z_trace"]))))
        # Q from the defining law versus the printed assembly
        d_sc_hat = (parts[k + 1]["sc_hat"] - parts[k - 1]["sc_hat"]) / (2 * dtau)
        d_z = (parts[k + 1]["z_trace"] - parts[k - 1]["z_trace"]) / (2 * dtau)
        lap_hat = _frame_laplacian(P, P["sc_hat"], P["Gh"])
        lap_hat_z = _frame_laplacian(P, P["z_trace"], P["Gh"])
        lap_lc = _grid_laplacian(traj[k].G, curv[k][2], P["sc_hat"], grid)
        di, rh, rz = P["di"], P["ric_hat"], P["ric_z"]
        up = lambda A: np.einsum("...ac,...bd,...cd->...ab", di, di, A)
        q_law = d_sc_hat - lap_hat - 2.0 * np.einsum("...ab,...ab->...", rh, up(rh))
        q_printed = (-d_z + lap_hat_z + (lap_lc - lap_hat)
                     + 2.0 * np.einsum("...ab,...ab->...", rh, up(rz))
                     + 2.0 * np.einsum("...ab,...ab->...", rz, up(rh))
                     + 2.0 * np.einsum("...ab,...ab->...", rz, up(rz)))
        q_gap.append(float(np.max(np.abs(q_law - q_printed))))
    out["decomposition"] = np.array(dec)
    out["q_assembly_gap"] = np.array(q_gap)
    return out


def _frame_laplacian(P: dict, f: np.ndarray, Gc: np.ndarray) -> np.ndarray:
    """d^{ab}(e_a e_b f - Gam^c_{ba} e_c f) with frame derivatives by FD."""
    fe = P["fe"]
    ef = fe(f)                                        # [b]
    eef = fe(ef)                                      # [b, a] = e_a e_b f
    hess = eef - np.einsum("...cba,...c->...ba", Gc, ef)
    return np.einsum("...ab,...ba->...", P["di"], hess)


# ---------------------------------------------------------------------------
# persistence

def atomic_write_text(path: str, text: str) -> None:
    """Write a whole file via a temporary file and rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def snapshot_csv(state: FlowState, grid: FlowGrid) -> str:
    D = grid.dim
    pts = grid.points().reshape(-1, D)
    idx = np.stack(np.meshgrid(*[np.arange(s) for s in grid.shape], indexing="ij"),
                   axis=-1).reshape(-1, D)
    iu = np.triu_indices(D)
    Gf = state.G.reshape(-1, D, D)[:, iu[0], iu[1]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"i{k + 1}" for k in range(D)] + [f"u{k + 1}" for k in range(D)]
               + [f"g{a + 1}{b + 1}" for a, b in zip(*iu)])
    for r in range(pts.shape[0]):
        w.writerow([int(v) for v in idx[r]] + [repr(float(v)) for v in pts[r]]
                   + [repr(float(v)) for v in Gf[r]])
    return buf.getvalue()


def write_snapshots(traj: FlowTrajectory, outdir: str, cfg: FlowConfig,
                    extra: dict | None = None) -> list[str]:
    """One CSV per snapshot plus a JSON sidecar each; returns written paths."""
    paths = []
    for k, s in enumerate(traj):
        base = os.path.join(outdir, f"snapshot_{k:04d}")
        atomic_write_text(base + ".csv", snapshot_csv(s, traj.grid))
        meta = {"index": k, "tau": s.tau, "config": asdict(cfg),
                "grid": {"shape": list(traj.grid.shape), "lo": list(traj.grid.lo),
                         "hi": list(traj.grid.hi)}}
        if extra:
            meta.update(extra)
        if k == len(traj) - 1 and traj.diagnostic:
            meta["diagnostic"] = traj.diagnostic
        atomic_write_text(base + ".json", json.dumps(meta, indent=2, sort_keys=True, default=float))
        paths += [base + ".csv", base + ".json"]
    return paths
