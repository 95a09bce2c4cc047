"""N-connections, adapted frames and off-diagonal metrics.

Index layout everywhere: horizontal coordinates 0..n-1, vertical n..n+m-1.
``N[a, i]`` stores N^a_i with ``a`` counted from zero inside the vertical
block.  The adapted frame is e_i = d_i - N^a_i d_a, e_a = d_a, with coframe
e^i = dx^i, e^a = dy^a + N^a_i dx^i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import (Chart, ScalarField, ZERO, add, as_batch, const,
                   differentiate, evaluate_array, field_matrix, mul,
                   sym_inverse, zeros)

DEGENERACY_TOL = 1e-12


class DegenerateMetricError(ArithmeticError):
    def __init__(self, what: str, point: np.ndarray, value: float):
        super().__init__(f"{what} is degenerate at point {np.array2string(point, precision=6)} "
                         f"(relative determinant {value:.3e})")
        self.point = point
        self.value = value


def _fields(arr, chart: Chart, shape: tuple[int, ...], what: str) -> np.ndarray:
    out = field_matrix(arr, chart)
    if out.shape != shape:
        raise ValueError(f"{what} must have shape {shape}, got {out.shape}")
    for f in out.reshape(-1):
        bad = [k for k in f.vars if k >= chart.nvars]
        if bad:
            raise ValueError(f"{what} references variable index {bad[0]} outside the chart")
    return out


@dataclass(frozen=True, eq=False)
class NConnection:
    chart: Chart
    N: np.ndarray

    def __post_init__(self):
        c = self.chart
        object.__setattr__(self, "N", _fields(self.N, c, (c.m, c.n), "N"))

    @classmethod
    def zero(cls, chart: Chart) -> "NConnection":
        return cls(chart, zeros((chart.m, chart.n)))

    @property
    def n(self) -> int:
        return self.chart.n

    @property
    def m(self) -> int:
        return self.chart.m

    def is_zero(self) -> bool:
        return all(f is ZERO for f in self.N.reshape(-1))

    # symbolic frame calculus -------------------------------------------
    def e(self, f: ScalarField, alpha: int) -> ScalarField:
        """Adapted-frame derivative e_alpha f."""
        n = self.n
        if alpha >= n:
            return differentiate(f, alpha)
        terms = [differentiate(f, alpha)]
        for a in range(self.m):
            Na = self.N[a, alpha]
            if Na is not ZERO:
                d = differentiate(f, n + a)
                if d is not ZERO:
                    terms.append(mul(const(-1.0), Na, d))
        return add(*terms)

    def e_array(self, arr: np.ndarray) -> np.ndarray:
        """Frame derivatives of every entry; new trailing axis of length n+m."""
        arr = np.asarray(arr, dtype=object)
        D = self.chart.dim
        out = np.empty(arr.shape + (D,), dtype=object)
        for idx, f in np.ndenumerate(arr):
            for al in range(D):
                out[idx + (al,)] = self.e(f, al)
        return out

    def omega_fields(self) -> np.ndarray:
        """Omega^a_ij as fields, shape (m, n, n)."""
        n, m = self.n, self.m
        N = self.N
        out = zeros((m, n, n))
        for a in range(m):
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    terms = [differentiate(N[a, i], j),
                             mul(const(-1.0), differentiate(N[a, j], i))]
                    for b in range(m):
                        terms.append(mul(N[b, i], differentiate(N[a, j], n + b)))
                        terms.append(mul(const(-1.0), N[b, j], differentiate(N[a, i], n + b)))
                    out[a, i, j] = add(*terms)
        return out

    def anholonomy_fields(self) -> np.ndarray:
        """W[g, a, b] = [e_a, e_b]^g as fields, shape (D, D, D)."""
        n, m = self.n, self.m
        D = n + m
        W = zeros((D, D, D))
        Om = self.omega_fields()
        for a in range(m):
            for i in range(n):
                for j in range(n):
                    W[n + a, i, j] = Om[a, i, j]
        for b in range(m):
            for i in range(n):
                for a in range(m):
                    d = differentiate(self.N[b, i], n + a)
                    W[n + b, i, n + a] = d
                    W[n + b, n + a, i] = mul(const(-1.0), d)
        return W

    def frame_fields(self) -> np.ndarray:
        """E[alpha, mu] = e_alpha^mu (frame vectors as rows)."""
        n, m = self.n, self.m
        E = zeros((n + m, n + m))
        for al in range(n + m):
            E[al, al] = const(1.0)
        for i in range(n):
            for a in range(m):
                E[i, n + a] = mul(const(-1.0), self.N[a, i])
        return E

    def coframe_fields(self) -> np.ndarray:
        """Theta[alpha, mu] = e^alpha_mu (coframe forms as rows)."""
        n, m = self.n, self.m
        T = zeros((n + m, n + m))
        for al in range(n + m):
            T[al, al] = const(1.0)
        for a in range(m):
            for i in range(n):
                T[n + a, i] = self.N[a, i]
        return T


@dataclass(frozen=True)
class FrameMatrices:
    """Vielbein at a point.

    ``e[alpha, mu]`` holds the coordinate components of the frame vector
    e_alpha; ``e_inv`` is its matrix inverse, so ``e_inv[mu, alpha]`` is the
    coframe component e^alpha_mu.  ``coframe`` is ``e_inv.T`` with one
    coframe form per row.
    """

    point: np.ndarray
    e: np.ndarray
    e_inv: np.ndarray

    @property
    def coframe(self) -> np.ndarray:
        return self.e_inv.T


def adapted_frames(N: NConnection, p) -> FrameMatrices | list[FrameMatrices]:
    X, single = as_batch(p, N.chart)
    Nv = evaluate_array(N.N, X)
    n, m = N.n, N.m
    D = n + m
    out = []
    for k in range(X.shape[0]):
        e = np.eye(D)
        e[:n, n:] = -Nv[k].T
        e_inv = np.eye(D)
        e_inv[:n, n:] = Nv[k].T
        out.append(FrameMatrices(X[k, :D].copy(), e, e_inv))
    return out[0] if single else out


def frames_batch(N: NConnection, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(E, Theta) arrays of shape (P, D, D) for a batch of points."""
    Nv = evaluate_array(N.N, X)
    n, m = N.n, N.m
    D = n + m
    P = X.shape[0]
    E = np.broadcast_to(np.eye(D), (P, D, D)).copy()
    Th = E.copy()
    E[:, :n, n:] = -np.swapaxes(Nv, 1, 2)
    Th[:, n:, :n] = Nv
    return E, Th


def n_curvature(N: NConnection, p) -> np.ndarray:
    X, single = as_batch(p, N.chart)
    Om = evaluate_array(N.omega_fields(), X)
    return Om[0] if single else Om


def anholonomy(N: NConnection, p) -> np.ndarray:
    X, single = as_batch(p, N.chart)
    W = evaluate_array(N.anholonomy_fields(), X)
    return W[0] if single else W


@dataclass(frozen=True, eq=False)
class DMetric:
    """d-metric g_ij(+)h_ab with respect to the adapted coframe of ``N``."""

    chart: Chart
    g: np.ndarray
    h: np.ndarray
    N: NConnection

    def __post_init__(self):
        c = self.chart
        g = _fields(self.g, c, (c.n, c.n), "g")
        h = _fields(self.h, c, (c.m, c.m), "h")
        for M, name in ((g, "g"), (h, "h")):
            k = M.shape[0]
            for i in range(k):
                for j in range(i + 1, k):
                    if M[i, j] is not M[j, i]:
                        raise ValueError(f"{name} block is not symmetric at ({i + 1},{j + 1})")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)
        if self.N.chart.dim != c.dim:
            raise ValueError("N-connection lives on a different chart")
        object.__setattr__(self, "_cache", {})

    @classmethod
    def build(cls, chart: Chart, g, h, N=None) -> "DMetric":
        Nc = N if isinstance(N, NConnection) else (
            NConnection.zero(chart) if N is None else NConnection(chart, N))
        return cls(chart, g, h, Nc)

    @property
    def n(self) -> int:
        return self.chart.n

    @property
    def m(self) -> int:
        return self.chart.m

    def _memo(self, key, fn):
        c = self._cache
        if key not in c:
            c[key] = fn()
        return c[key]

    @property
    def g_inv(self) -> np.ndarray:
        return self._memo("ginv", lambda: sym_inverse(self.g))

    @property
    def h_inv(self) -> np.ndarray:
        return self._memo("hinv", lambda: sym_inverse(self.h))

    @property
    def adapted(self) -> np.ndarray:
        """Block-diagonal metric diag(g, h) in the adapted frame."""
        def build():
            n, m = self.n, self.m
            d = zeros((n + m, n + m))
            d[:n, :n] = self.g
            d[n:, n:] = self.h
            return d
        return self._memo("adapted", build)

    @property
    def adapted_inv(self) -> np.ndarray:
        def build():
            n, m = self.n, self.m
            d = zeros((n + m, n + m))
            d[:n, :n] = self.g_inv
            d[n:, n:] = self.h_inv
            return d
        return self._memo("adapted_inv", build)

    @property
    def assembled(self) -> np.ndarray:
        """Coordinate-frame matrix of the off-diagonal ansatz."""
        return self._memo("assembled", lambda: _assemble(self))

    def check_nondegenerate(self, X: np.ndarray) -> None:
        for M, what in ((self.g, "h-block g"), (self.h, "v-block h")):
            check_block(M, X, what)


def check_block(M: np.ndarray, X: np.ndarray, what: str) -> None:
    vals = evaluate_array(M, X)
    det = np.linalg.det(vals)
    scale = np.max(np.abs(vals), axis=(1, 2)) ** vals.shape[-1]
    rel = np.abs(det) / np.where(scale > 0, scale, 1.0)
    bad = np.flatnonzero(~(rel >= DEGENERACY_TOL))
    if bad.size:
        k = int(bad[0])
        raise DegenerateMetricError(what, X[k], float(rel[k]))


def _assemble(dm: DMetric) -> np.ndarray:
    n, m = dm.n, dm.m
    N, g, h = dm.N.N, dm.g, dm.h
    G = zeros((n + m, n + m))
    # N h, shape (n, m): (Nh)_{i b} = N^e_i h_{e b}
    Nh = np.empty((n, m), dtype=object)
    for i in range(n):
        for b in range(m):
            Nh[i, b] = add(*[mul(N[e, i], h[e, b]) for e in range(m)])
    for i in range(n):
        for j in range(i, n):
            v = add(g[i, j], *[mul(N[a, i], Nh[j, a]) for a in range(m)])
            G[i, j] = G[j, i] = v
        for b in range(m):
            G[i, n + b] = G[n + b, i] = Nh[i, b]
    G[n:, n:] = h
    return G


def assemble_offdiag_metric(dm: DMetric, p) -> np.ndarray:
    X, single = as_batch(p, dm.chart)
    G = evaluate_array(dm.assembled, X)
    return G[0] if single else G


def sample_points(chart: Chart, count: int, rng: np.random.Generator,
                  margin: float = 0.05, params: np.ndarray | None = None) -> np.ndarray:
    """Uniform interior points of the chart domain as (count, nvars) rows."""
    lo = np.array([d[0] for d in chart.domain])
    hi = np.array([d[1] for d in chart.domain])
    w = hi - lo
    U = rng.uniform(lo + margin * w, hi - margin * w, size=(count, chart.dim))
    pr = np.zeros((count, len(chart.params))) if params is None else np.broadcast_to(
        np.asarray(params, dtype=float), (count, len(chart.params)))
    return np.hstack([U, pr])


def extract_nconnection(Gbar, chart: Chart, points: np.ndarray | None = None,
                        seed: int = 0) -> NConnection:
    """N^b_i = h^{ab} Gbar_{ia} read off a coordinate-frame metric."""
    Gb = _fields(Gbar, chart, (chart.dim, chart.dim), "coordinate metric")
    n, m = chart.n, chart.m
    h = Gb[n:, n:]
    X = points if points is not None else sample_points(chart, 16, np.random.default_rng(seed))
    check_block(h, X, "v-block of the coordinate metric")
    hinv = sym_inverse(h)
    N = zeros((m, n))
    for b in range(m):
        for i in range(n):
            N[b, i] = add(*[mul(hinv[b, a], Gb[i, n + a]) for a in range(m)])
    return NConnection(chart, N)


def dmetric_from_offdiag(Gbar, chart: Chart, points: np.ndarray | None = None,
                         seed: int = 0) -> DMetric:
    """Split a coordinate metric into (g, h, N)."""
    Gb = _fields(Gbar, chart, (chart.dim, chart.dim), "coordinate metric")
    N = extract_nconnection(Gb, chart, points, seed)
    n, m = chart.n, chart.m
    h = Gb[n:, n:]
    g = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(i, n):
            # g_ij = Gbar_ij - N^a_i Gbar_ja
            v = add(Gb[i, j], *[mul(const(-1.0), N.N[a, i], Gb[j, n + a]) for a in range(m)])
            g[i, j] = g[j, i] = v
    return DMetric(chart, g, h, N)


def almost_complex(N: NConnection, p) -> np.ndarray:
    """F with F(e_i) = -e_{n+i}, F(e_{n+i}) = e_i, in coordinate components."""
    if N.n != N.m:
        raise ValueError(f"almost complex structure needs n == m, got n={N.n}, m={N.m}")
    n = N.n
    X, single = as_batch(p, N.chart)
    E, Th = frames_batch(N, X)
    Fa = np.zeros((2 * n, 2 * n))
    Fa[:n, n:] = np.eye(n)
    Fa[n:, :n] = -np.eye(n)
    # v^mu = E^T V, V = Theta v
    F = np.einsum("pam,ab,pbn->pmn", E, Fa, Th)
    return F[0] if single else F
