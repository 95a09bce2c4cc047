"""Lagrange, Finsler and generalized Lagrange structures on charts with n = m.

The horizontal coordinates play the role of positions x^i and the vertical
ones of velocities y^i.  Everything is built symbolically from the
fundamental function, so that frame derivatives stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import riemann
from .dconn import DConnectionCoeffs
from .expr import (Chart, ScalarField, add, as_batch, const, differentiate,
                   evaluate_array, mul, parse_scalar_field, power, sym_inverse,
                   var, zeros)
from .nconn import DMetric, NConnection, check_block, sample_points

__all__ = [
    "Lagrangian", "Semispray", "Trajectory", "hessian_metric",
    "semispray_and_nconnection", "sasaki_lift", "lagrange_dconnection",
    "cartan_tensor_and_forms", "finsler_connection", "chern_structure_residuals",
    "geodesics", "sample_tm_points", "absolute_energy", "VARIANTS",
]

VARIANTS = ("cartan", "chern", "berwald", "hashiguchi")
KINDS = ("lagrange", "finsler", "absolute-energy")
MIN_FIBER_NORM = 0.1


def sample_tm_points(chart: Chart, count: int, rng: np.random.Generator,
                     min_norm: float = MIN_FIBER_NORM) -> np.ndarray:
    """Chart samples with |y| >= min_norm (the zero section is excluded)."""
    out = []
    while sum(len(o) for o in out) < count:
        X = sample_points(chart, 2 * count, rng)
        keep = np.linalg.norm(X[:, chart.n:chart.dim], axis=1) >= min_norm
        out.append(X[keep])
    return np.vstack(out)[:count]


@dataclass(frozen=True, eq=False)
class Lagrangian:
    """A fundamental function on a chart with n = m.

    ``kind`` is ``lagrange`` (L given), ``finsler`` (F given, L = F^2) or
    ``absolute-energy`` (h given, L = h_ab y^a y^b).  For the absolute
    energy the given h is kept as the lift metric.
    """

    chart: Chart
    L: ScalarField
    kind: str = "lagrange"
    F: ScalarField | None = None
    h: np.ndarray | None = None
    check_points: int = 32
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        c = self.chart
        if c.n != c.m:
            raise ValueError(f"Lagrange structures need n == m, got n={c.n}, m={c.m}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown Lagrangian kind {self.kind!r}")
        if self.kind == "finsler":
            if self.F is None:
                raise ValueError("finsler kind needs F")
            self.check_homogeneity()

    @classmethod
    def lagrange(cls, chart: Chart, L, **kw) -> "Lagrangian":
        return cls(chart, _field(L, chart), "lagrange", **kw)

    @classmethod
    def finsler(cls, chart: Chart, F, **kw) -> "Lagrangian":
        Ff = _field(F, chart)
        return cls(chart, power(Ff, 2), "finsler", F=Ff, **kw)

    @classmethod
    def absolute_energy(cls, chart: Chart, h, **kw) -> "Lagrangian":
        from .expr import field_matrix
        hm = field_matrix(h, chart)
        return cls(chart, absolute_energy(hm, chart), "absolute-energy", h=hm, **kw)

    @property
    def n(self) -> int:
        return self.chart.n

    def points(self, count: int | None = None, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        return sample_tm_points(self.chart, count or self.check_points, rng)

    def check_homogeneity(self, X: np.ndarray | None = None, tol: float = 1e-10) -> float:
        """max |F(x, s y) - s F(x, y)| (relative) for s in {1/2, 2, 3}."""
        X = self.points() if X is None else X
        n = self.n
        base = evaluate_array(np.array([self.F], dtype=object), X)[:, 0]
        if np.any(base <= 0):
            k = int(np.argmax(base <= 0))
            raise ValueError(f"Finsler function is not positive at {X[k]}")
        worst = 0.0
        for s in (0.5, 2.0, 3.0):
            Xs = X.copy()
            Xs[:, n:2 * n] *= s
            val = evaluate_array(np.array([self.F], dtype=object), Xs)[:, 0]
            err = np.abs(val - s * base) / np.maximum(np.abs(s * base), 1.0)
            k = int(np.argmax(err))
            worst = max(worst, float(err[k]))
            if err[k] > tol:
                raise ValueError(f"Finsler function fails 1-homogeneity at {X[k]} "
                                 f"(scale {s}, deviation {err[k]:.3e})")
        return worst

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]


def _field(v, chart: Chart) -> ScalarField:
    if isinstance(v, ScalarField):
        return v
    return parse_scalar_field(v, chart)


def absolute_energy(h: np.ndarray, chart: Chart) -> ScalarField:
    n = chart.n
    return add(*[mul(h[a, b], var(n + a), var(n + b)) for a in range(n) for b in range(n)])


@dataclass(frozen=True)
class Semispray:
    """Coefficients G^i of the canonical semispray."""

    G: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    step: float


# ---------------------------------------------------------------------------
# Hessian, semispray and canonical N-connection

def hessian_metric(Lg: Lagrangian, check: bool = True) -> np.ndarray:
    """g_ij = 1/2 d^2 L / dy^i dy^j."""
    def build():
        n = Lg.n
        g = np.empty((n, n), dtype=object)
        for i in range(n):
            dLi = differentiate(Lg.L, n + i)
            for j in range(i, n):
                g[i, j] = g[j, i] = mul(const(0.5), differentiate(dLi, n + j))
        return g
    g = Lg._memo("hessian", build)
    if check and not Lg._cache.get("hessian_checked"):
        check_block(g, Lg.points(), "Hessian of the Lagrangian")
        Lg._cache["hessian_checked"] = True
    return g


def _hessian_inverse(Lg: Lagrangian) -> np.ndarray:
    return Lg._memo("hessian_inv", lambda: sym_inverse(hessian_metric(Lg)))


def _euler_lagrange_force(Lg: Lagrangian) -> np.ndarray:
    """b_j = d^2 L / dy^j dx^k y^k - dL/dx^j."""
    def build():
        n = Lg.n
        L = Lg.L
        b = np.empty(n, dtype=object)
        for j in range(n):
            dLy = differentiate(L, n + j)
            b[j] = add(*[mul(var(n + k), differentiate(dLy, k)) for k in range(n)],
                       mul(const(-1.0), differentiate(L, j)))
        return b
    return Lg._memo("el_force", build)


def semispray_and_nconnection(Lg: Lagrangian) -> tuple[Semispray, NConnection]:
    """G^i = 1/4 g^{ij} b_j and N^i_j = dG^i / dy^j."""
    def build():
        n = Lg.n
        gi = _hessian_inverse(Lg)
        b = _euler_lagrange_force(Lg)
        G = np.empty(n, dtype=object)
        for i in range(n):
            G[i] = mul(const(0.25), add(*[mul(gi[i, j], b[j]) for j in range(n)]))
        N = np.empty((n, n), dtype=object)
        for a in range(n):
            for i in range(n):
                N[a, i] = differentiate(G[a], n + i)
        return Semispray(G), NConnection(Lg.chart, N)
    return Lg._memo("semispray", build)


def sasaki_lift(g, N: NConnection) -> DMetric:
    """d-metric with both blocks equal to g over the N-connection N."""
    chart = N.chart
    if chart.n != chart.m:
        raise ValueError("Sasaki lift needs n == m")
    from .expr import field_matrix
    gm = field_matrix(g, chart)
    if gm.shape != (chart.n, chart.n):
        raise ValueError(f"g must be {chart.n}x{chart.n}, got {gm.shape}")
    return DMetric.build(chart, gm, gm, N)


def lift_metric(Lg: Lagrangian) -> DMetric:
    """The Sasaki lift used for Lagrange flows.

    The absolute-energy kind lifts its own h with the N-connection of the
    energy; the other kinds lift the Hessian.
    """
    _, N = semispray_and_nconnection(Lg)
    g = Lg.h if Lg.kind == "absolute-energy" else hessian_metric(Lg)
    return Lg._memo("lift", lambda: sasaki_lift(g, N))


def _christoffel_like(g, gi, N: NConnection, vertical: bool) -> np.ndarray:
    """1/2 g^{ih}(e_k g_jh + e_j g_kh - e_h g_jk) with h- or v-frame derivatives."""
    n = g.shape[0]
    off = n if vertical else 0
    e = N.e
    out = zeros((n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                out[i, j, k] = mul(const(0.5), add(*[
                    mul(gi[i, h], add(e(g[j, h], off + k), e(g[k, h], off + j),
                                      mul(const(-1.0), e(g[j, k], off + h))))
                    for h in range(n)]))
    return out


def lagrange_dconnection(Lg: Lagrangian) -> DConnectionCoeffs:
    """Generalized Christoffel symbols of the Lagrangian, used for both h and v blocks."""
    dm = lift_metric(Lg)
    g, gi = dm.g, dm.g_inv
    L = _christoffel_like(g, gi, dm.N, vertical=False)
    C = _christoffel_like(g, gi, dm.N, vertical=True)
    return DConnectionCoeffs(Lg.chart, dm.N, L, L, C, C)


# ---------------------------------------------------------------------------
# Finsler structures

def _require_finsler(F: Lagrangian):
    if F.kind != "finsler":
        raise ValueError("a Finsler fundamental function is required")


def cartan_tensor_and_forms(F: Lagrangian, p) -> dict:
    """Cartan tensor A_ijk = (F/2) dg_ij/dy^k, Hilbert form dF/dy^i and hform L^i_jk."""
    _require_finsler(F)
    X, single = as_batch(p, F.chart)
    n = F.n
    y = X[:, n:2 * n]
    if np.any(np.linalg.norm(y, axis=1) == 0):
        raise ValueError("Finsler structures are undefined on the zero section")
    Fv = evaluate_array(np.array([F.F], dtype=object), X)[:, 0]
    if np.any(Fv <= 0):
        raise ValueError("Finsler function must be positive")
    g = hessian_metric(F, check=False)
    dg = np.empty((n, n, n), dtype=object)
    for idx in np.ndindex(n, n, n):
        dg[idx] = differentiate(g[idx[0], idx[1]], n + idx[2])
    A = 0.5 * Fv[:, None, None, None] * evaluate_array(dg, X)
    w = evaluate_array(np.array([differentiate(F.F, n + i) for i in range(n)], dtype=object), X)
    hf = evaluate_array(_hform(F), X)
    f = (lambda a: a[0]) if single else (lambda a: a)
    return {"A": f(A), "hilbert": f(w), "L": f(hf)}


def _hform(F: Lagrangian) -> np.ndarray:
    def build():
        _, N = semispray_and_nconnection(F)
        return _christoffel_like(hessian_metric(F, check=False), _hessian_inverse(F), N, False)
    return F._memo("hform", build)


def _vcomp(F: Lagrangian) -> np.ndarray:
    def build():
        _, N = semispray_and_nconnection(F)
        return _christoffel_like(hessian_metric(F, check=False), _hessian_inverse(F), N, True)
    return F._memo("vcomp", build)


def _berwald(F: Lagrangian) -> np.ndarray:
    def build():
        _, N = semispray_and_nconnection(F)
        n = F.n
        out = zeros((n, n, n))
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    out[i, j, k] = differentiate(N.N[i, j], n + k)
        return out
    return F._memo("berwald", build)


def finsler_connection(F: Lagrangian, variant: str) -> DConnectionCoeffs:
    """Cartan, Chern, Berwald or Hashiguchi d-connection of a Finsler function."""
    _require_finsler(F)
    if variant not in VARIANTS:
        raise ValueError(f"unknown Finsler connection {variant!r}; expected one of {VARIANTS}")
    hessian_metric(F)
    _, N = semispray_and_nconnection(F)
    n = F.n
    L = _hform(F) if variant in ("cartan", "chern") else _berwald(F)
    C = _vcomp(F) if variant in ("cartan", "hashiguchi") else zeros((n, n, n))
    return DConnectionCoeffs(F.chart, N, L, L, C, C)


def chern_structure_residuals(F: Lagrangian, p) -> dict:
    """Residuals of the two Chern structure equations.

    torsion: the dx^j ^ dx^k part of dx^j ^ omega_j^i, i.e. the antisymmetric
    part of L^i_jk.  metric_h: the dx^k component of
    dg_ij - g_kj omega_i^k - g_ik omega_j^k (should vanish).  metric_v: the
    e^a component minus 2 A_ija / F.
    """
    _require_finsler(F)
    X, single = as_batch(p, F.chart)
    n = F.n
    _, N = semispray_and_nconnection(F)
    g = hessian_metric(F, check=False)
    L = _hform(F)
    eg = N.e_array(g)                                         # [i, j, mu]
    vals = evaluate_array(eg, X)
    gv = evaluate_array(g, X)
    Lv = evaluate_array(L, X)
    tors = Lv - np.swapaxes(Lv, -1, -2)
    metric_h = (vals[..., :n] - np.einsum("pkj,pkil->pijl", gv, Lv)
                - np.einsum("pik,pkjl->pijl", gv, Lv))
    A = cartan_tensor_and_forms(F, X)["A"]
    Fv = evaluate_array(np.array([F.F], dtype=object), X)[:, 0]
    metric_v = vals[..., n:] - 2.0 * A / Fv[:, None, None, None]
    return {"torsion": float(np.max(np.abs(tors))),
            "metric_h": float(np.max(np.abs(metric_h))),
            "metric_v": float(np.max(np.abs(metric_v)))}


# ---------------------------------------------------------------------------
# geodesics

def _rk4(f, z0: np.ndarray, h: float, steps: int) -> np.ndarray:
    out = np.empty((steps + 1,) + z0.shape)
    out[0] = z = z0
    for k in range(steps):
        k1 = f(z)
        k2 = f(z + 0.5 * h * k1)
        k3 = f(z + 0.5 * h * k2)
        k4 = f(z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = z
    return out


def geodesics(Lg: Lagrangian, init, span: tuple[float, float] = (0.0, 1.0),
              step: float = 1e-3) -> tuple[Trajectory, Trajectory]:
    """Integrate the Euler-Lagrange and semispray systems from the same data.

    ``init`` holds (x^1..x^n, y^1..y^n) with y = dx/ds.  Returns
    (euler_lagrange, semispray) trajectories.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n = Lg.n
    z0 = np.asarray(init, dtype=float).reshape(-1)[:2 * n]
    if z0.shape != (2 * n,):
        raise ValueError(f"initial data needs {2 * n} values")
    s0, s1 = span
    steps = int(round((s1 - s0) / step))
    if steps <= 0:
        raise ValueError("empty integration span")
    h = (s1 - s0) / steps
    np_ = len(Lg.chart.params)
    pad = np.zeros(np_)

    g = hessian_metric(Lg, check=False)
    hess_full = np.empty((n, n), dtype=object)
    for idx in np.ndindex(n, n):
        hess_full[idx] = mul(const(2.0), g[idx])              # d^2 L / dy dy
    force = _euler_lagrange_force(Lg)
    G = semispray_and_nconnection(Lg)[0].G

    def row(z):
        return np.concatenate([z, pad])[None, :]

    def rhs_el(z):
        X = row(z)
        H = evaluate_array(hess_full, X)[0]
        b = evaluate_array(force, X)[0]
        try:
            acc = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError(f"Hessian became singular at {z}") from exc
        return np.concatenate([z[n:], acc])

    def rhs_sp(z):
        g2 = evaluate_array(G, row(z))[0]
        return np.concatenate([z[n:], -2.0 * g2])

    s = s0 + h * np.arange(steps + 1)
    out = []
    for f in (rhs_el, rhs_sp):
        Z = _rk4(f, z0, h, steps)
        out.append(Trajectory(s, Z[:, :n], Z[:, n:], h))
    return out[0], out[1]


def energy_along(Lg: Lagrangian, tr: Trajectory) -> np.ndarray:
    """L evaluated along a trajectory."""
    X = np.hstack([tr.x, tr.y, np.zeros((len(tr.s), len(Lg.chart.params)))])
    return evaluate_array(np.array([Lg.L], dtype=object), X)[:, 0]


def christoffel_oracle(a: np.ndarray, chart: Chart, X: np.ndarray) -> np.ndarray:
    """Christoffel symbols gamma^i_jk of an x-dependent n x n metric a(x)."""
    n = chart.n
    dA = np.empty((n, n, n), dtype=object)
    for idx in np.ndindex(n, n, n):
        dA[idx] = differentiate(a[idx[0], idx[1]], idx[2])
    A = evaluate_array(a, X)
    dAv = evaluate_array(dA, X)
    return riemann.christoffel(A, dAv)


def quadratic_lagrangian(a, chart: Chart) -> Lagrangian:
    """L = a_ij(x) y^i y^j."""
    from .expr import field_matrix
    am = field_matrix(a, chart)
    return Lagrangian.lagrange(chart, absolute_energy(am, chart))

