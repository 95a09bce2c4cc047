"""Linear connections in N-adapted frames.

Connection coefficients are stored as ``Gam[g, b, a]`` with
D_{e_a} e_b = Gam^g_{ba} e_g, so the last index is the direction of
differentiation.  The four d-connection blocks follow the same rule:
L^i_jk, L^a_bk (direction k) and C^i_jc, C^a_bc (direction c).

Curvature conventions.  ``Rgen[a, b, c, d]`` is the component of
R(e_c, e_d) e_b = [D_c, D_d] e_b - D_[e_c, e_d] e_b along e_a.  The block
tables (``R^i_hjk`` and friends) use the opposite order of the last pair,
R^a_{bcd} = Rgen[a, b, d, c], and the Ricci tensor is R_bc = R^d_{bcd}.
With these choices R_ij = g_ij on the unit round sphere.

Generic routines below work on float arrays with leading batch axes and on
object arrays of ScalarField alike; ``nb`` counts the batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import riemann
from .expr import (Chart, ScalarField, ZERO, add, as_batch, const, differentiate,
                   evaluate_array, map_fields, mul, size, zeros)
from .nconn import DMetric, NConnection, frames_batch, sample_points

__all__ = [
    "DConnectionCoeffs", "FullConnectionCoeffs", "TensorValue", "SourceField",
    "canonical_dconnection", "dtorsion", "dcurvature", "ricci_dtensor",
    "scalar_einstein", "levi_civita_adapted", "levi_civita_koszul",
    "levi_civita_printed", "distortion", "kawaguchi_metrize", "obata_operators",
    "obata_and_miron", "connection_laplacian", "laplacian_deformation",
    "curvature_distortion", "quadratic_b_tensors", "covariant_derivative",
    "metricity", "frame_torsion", "frame_curvature", "frame_ricci",
]

SYMBOLIC_NODE_LIMIT = 10_000


# ---------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class TensorValue:
    """Evaluated tensor components at one or more points.

    ``variance`` has one letter per tensor index, ``u`` for up and ``d`` for
    down.  ``data`` carries a leading batch axis when evaluated at several
    points.  ``blocks`` holds named sub-blocks (h/v splits).
    """

    data: np.ndarray
    variance: str
    frame: str = "adapted"
    blocks: dict = field(default_factory=dict)
    points: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class DConnectionCoeffs:
    chart: Chart
    N: NConnection
    Lh: np.ndarray   # L^i_jk  (n, n, n)
    Lv: np.ndarray   # L^a_bk  (m, m, n)
    Ch: np.ndarray   # C^i_jc  (n, n, m)
    Cv: np.ndarray   # C^a_bc  (m, m, m)

    def __post_init__(self):
        n, m = self.chart.n, self.chart.m
        shapes = {"Lh": (n, n, n), "Lv": (m, m, n), "Ch": (n, n, m), "Cv": (m, m, m)}
        for name, shp in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=object)
            if arr.shape != shp:
                raise ValueError(f"block {name} must have shape {shp}, got {arr.shape}")
            object.__setattr__(self, name, map_fields(_to_field, arr))

    @classmethod
    def zero(cls, chart: Chart, N: NConnection | None = None) -> "DConnectionCoeffs":
        n, m = chart.n, chart.m
        return cls(chart, N or NConnection.zero(chart), zeros((n, n, n)), zeros((m, m, n)),
                   zeros((n, n, m)), zeros((m, m, m)))

    def full(self) -> np.ndarray:
        n, m = self.chart.n, self.chart.m
        G = zeros((n + m,) * 3)
        G[:n, :n, :n] = self.Lh
        G[n:, n:, :n] = self.Lv
        G[:n, :n, n:] = self.Ch
        G[n:, n:, n:] = self.Cv
        return G

    def plus(self, Lh=None, Lv=None, Ch=None, Cv=None) -> "DConnectionCoeffs":
        def s(A, B):
            return A if B is None else _add_arrays(A, B)
        return DConnectionCoeffs(self.chart, self.N, s(self.Lh, Lh), s(self.Lv, Lv),
                                 s(self.Ch, Ch), s(self.Cv, Cv))

    def as_full(self) -> "FullConnectionCoeffs":
        return FullConnectionCoeffs(self.chart, self.N, self.full())


@dataclass(frozen=True, eq=False)
class FullConnectionCoeffs:
    """All (n+m)^3 coefficients; symbolic (object array) or evaluated.

    Evaluated coefficients carry a leading batch axis and the points.
    """

    chart: Chart
    N: NConnection
    data: np.ndarray
    points: np.ndarray | None = None

    @property
    def symbolic(self) -> bool:
        return self.data.dtype == object

    def blocks(self) -> dict:
        return full_blocks(self.data, self.chart.n)

    def is_dconnection(self, tol: float = 0.0) -> bool:
        b = self.blocks()
        mixed = ("L^a_jk", "L^i_bk", "C^a_jb", "C^i_bc")
        if self.symbolic:
            return all(f is ZERO for k in mixed for f in b[k].reshape(-1))
        return all(np.max(np.abs(b[k]), initial=0.0) <= tol for k in mixed)

    def to_dconnection(self) -> DConnectionCoeffs:
        if not self.symbolic or not self.is_dconnection():
            raise ValueError("only symbolic connections with vanishing mixed blocks reduce")
        b = self.blocks()
        return DConnectionCoeffs(self.chart, self.N, b["L^i_jk"], b["L^a_bk"],
                                 b["C^i_jb"], b["C^a_bc"])


@dataclass(frozen=True, eq=False)
class SourceField:
    chart: Chart
    Y: np.ndarray

    def __post_init__(self):
        from .expr import field_matrix
        Y = field_matrix(self.Y, self.chart)
        D = self.chart.dim
        if Y.shape != (D, D):
            raise ValueError(f"source must be {D}x{D}")
        for i in range(D):
            for j in range(i + 1, D):
                if Y[i, j] is not Y[j, i]:
                    raise ValueError("source field must be symmetric")
        object.__setattr__(self, "Y", Y)


def _to_field(v):
    return v if isinstance(v, ScalarField) else const(float(v))


def _add_arrays(A, B):
    out = np.empty(A.shape, dtype=object)
    for idx in np.ndindex(A.shape):
        out[idx] = add(A[idx], _to_field(B[idx]))
    return out


def full_blocks(G: np.ndarray, n: int) -> dict:
    """Eight named blocks of Gam[g, b, a]; batch axes are kept in front."""
    h, v = slice(0, n), slice(n, None)
    sl = lambda a, b, c: G[(Ellipsis, a, b, c)]
    return {
        "L^i_jk": sl(h, h, h), "L^a_jk": sl(v, h, h), "L^i_bk": sl(h, v, h),
        "L^a_bk": sl(v, v, h), "C^i_jb": sl(h, h, v), "C^a_jb": sl(v, h, v),
        "C^i_bc": sl(h, v, v), "C^a_bc": sl(v, v, v),
    }


# ---------------------------------------------------------------------------
# generic frame algebra

def frame_torsion(G, W):
    """T[g, a, b] = T(e_a, e_b)^g."""
    return np.swapaxes(G, -1, -2) - G - W


def frame_curvature(G, dG, W):
    """Rgen[a, b, c, d] from Gam, its frame derivatives and anholonomy.

    ``dG[..., a, b, c, m]`` is e_m Gam^a_{bc}.
    """
    R = np.swapaxes(dG, -1, -2) - dG
    R = R + np.einsum("...mbd,...amc->...abcd", G, G)
    R = R - np.einsum("...mbc,...amd->...abcd", G, G)
    R = R - np.einsum("...ecd,...abe->...abcd", W, G)
    return R


def frame_ricci(Rgen):
    return np.einsum("...dbdc->...bc", Rgen)


def block_order(Rgen):
    return np.swapaxes(Rgen, -1, -2)


def _expand(G, nb, k):
    batch = G.shape[:nb]
    return G.reshape(batch + (1,) * k + G.shape[nb:])


def covariant_derivative(G, T, dT, variance: str, nb: int = 0):
    """(D T) with a new trailing index for the direction.

    ``dT`` holds the frame derivatives of ``T`` in its trailing axis.
    Works for float arrays with ``nb`` leading batch axes and for object
    arrays (``nb = 0``).
    """
    k = len(variance)
    out = dT.copy() if dT.dtype != object else np.array(dT, dtype=object)
    for p, var in enumerate(variance):
        Tm = np.moveaxis(T, nb + p, -1)
        Ge = _expand(G, nb, k - 1)
        if var == "u":
            c = np.einsum("...s,...asm->...am", Tm, Ge)
            out = out + np.moveaxis(c, -2, nb + p)
        else:
            c = np.einsum("...s,...sbm->...bm", Tm, Ge)
            out = out - np.moveaxis(c, -2, nb + p)
    return out


def _connection_action(G, T, variance: str, nb: int = 0):
    """(Z_{e_m} T) for a tensor-valued 1-form Z, trailing index m."""
    k = len(variance)
    D = G.shape[-1]
    out = None
    for p, var in enumerate(variance):
        Tm = np.moveaxis(T, nb + p, -1)
        Ge = _expand(G, nb, k - 1)
        if var == "u":
            c = np.moveaxis(np.einsum("...s,...asm->...am", Tm, Ge), -2, nb + p)
        else:
            c = -np.moveaxis(np.einsum("...s,...sbm->...bm", Tm, Ge), -2, nb + p)
        out = c if out is None else out + c
    if out is None:
        shape = T.shape + (D,)
        out = zeros(shape) if T.dtype == object else np.zeros(shape)
    return out


def _simplify(arr):
    """Normalize object-array entries (einsum sums may leave Python ints)."""
    if arr.dtype != object:
        return arr
    return map_fields(_to_field, arr)


# ---------------------------------------------------------------------------
# evaluation helpers

class _Ctx:
    """Evaluation context for a batch of points sharing one memo."""

    def __init__(self, N: NConnection, X: np.ndarray):
        self.N = N
        self.X = X
        self.memo: dict = {}
        self._keep: list = []

    def ev(self, arr) -> np.ndarray:
        arr = np.asarray(arr, dtype=object)
        self._keep.append(arr)
        return evaluate_array(arr, self.X, self.memo)

    def ev_with_frame_derivs(self, arr):
        arr = np.asarray(arr, dtype=object)
        return self.ev(arr), self.ev(self.N.e_array(arr))

    def W(self):
        return self.ev(self.N.anholonomy_fields())

    def omega(self):
        return self.ev(self.N.omega_fields())

    def dN_vertical(self):
        """dN[b, i, a] = d N^b_i / d y^a."""
        N = self.N
        n, m = N.n, N.m
        arr = np.empty((m, n, m), dtype=object)
        for b in range(m):
            for i in range(n):
                for a in range(m):
                    arr[b, i, a] = differentiate(N.N[b, i], n + a)
        return self.ev(arr)


def _finish(arr, single):
    return arr[0] if single else arr


def _conn_full(conn) -> np.ndarray:
    if isinstance(conn, DConnectionCoeffs):
        return conn.full()
    if isinstance(conn, FullConnectionCoeffs):
        if not conn.symbolic:
            raise ValueError("need symbolic connection coefficients here")
        return conn.data
    raise TypeError("expected DConnectionCoeffs or FullConnectionCoeffs")


# ---------------------------------------------------------------------------
# canonical d-connection

def canonical_dconnection(dm: DMetric, check: bool = True, seed: int = 0) -> DConnectionCoeffs:
    """Unique metric d-connection with zero hh- and vv-torsion."""
    if check:
        dm.check_nondegenerate(sample_points(dm.chart, 32, np.random.default_rng(seed)))
    Nc = dm.N
    n, m = dm.n, dm.m
    g, h, gi, hi = dm.g, dm.h, dm.g_inv, dm.h_inv
    e = Nc.e
    half = const(0.5)
    dN = [[[differentiate(Nc.N[d, k], n + b) for b in range(m)] for k in range(n)]
          for d in range(m)]

    Lh = zeros((n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                Lh[i, j, k] = mul(half, add(*[
                    mul(gi[i, r], add(e(g[j, r], k), e(g[k, r], j), mul(const(-1.0), e(g[j, k], r))))
                    for r in range(n)]))
    Lv = zeros((m, m, n))
    for a in range(m):
        for b in range(m):
            for k in range(n):
                inner = []
                for c in range(m):
                    t = [e(h[b, c], k)]
                    for d in range(m):
                        t.append(mul(const(-1.0), h[d, c], dN[d][k][b]))
                        t.append(mul(const(-1.0), h[d, b], dN[d][k][c]))
                    inner.append(mul(hi[a, c], add(*t)))
                Lv[a, b, k] = add(dN[a][k][b], mul(half, add(*inner)))
    Ch = zeros((n, n, m))
    for i in range(n):
        for j in range(n):
            for c in range(m):
                Ch[i, j, c] = mul(half, add(*[mul(gi[i, k], e(g[j, k], n + c)) for k in range(n)]))
    Cv = zeros((m, m, m))
    for a in range(m):
        for b in range(m):
            for c in range(m):
                Cv[a, b, c] = mul(half, add(*[
                    mul(hi[a, d], add(e(h[b, d], n + c), e(h[c, d], n + b),
                                      mul(const(-1.0), e(h[b, c], n + d))))
                    for d in range(m)]))
    return DConnectionCoeffs(dm.chart, Nc, Lh, Lv, Ch, Cv)


# ---------------------------------------------------------------------------
# torsion

def dtorsion(c: DConnectionCoeffs, p) -> TensorValue:
    """The five d-torsion families, plus the full frame torsion in ``data``.

    Block entry [g, a, b] holds T(e_b, e_a)^g, so ``T^i_jk`` is
    L^i_jk - L^i_kj, ``T^i_ja`` is C^i_ja, ``T^a_ji`` is Omega^a_ji,
    ``T^a_bi`` is dN^a_i/dy^b - L^a_bi (this is -T(e_i, e_b)^a) and
    ``T^a_bc`` is C^a_bc - C^a_cb.  ``data[g, a, b]`` is T(e_a, e_b)^g.
    """
    X, single = as_batch(p, c.chart)
    ctx = _Ctx(c.N, X)
    Lh, Lv, Ch, Cv = (ctx.ev(c.Lh), ctx.ev(c.Lv), ctx.ev(c.Ch), ctx.ev(c.Cv))
    Om = ctx.omega()
    dN = ctx.dN_vertical()                       # [a, i, b] = d_b N^a_i
    blocks = {
        "T^i_jk": Lh - np.swapaxes(Lh, -1, -2),
        "T^i_ja": Ch,
        "T^a_ji": Om,
        "T^a_bi": np.swapaxes(dN, -1, -2) - Lv,
        "T^a_bc": Cv - np.swapaxes(Cv, -1, -2),
    }
    Gf = ctx.ev(c.full())
    T = frame_torsion(Gf, ctx.W())
    return TensorValue(_finish(T, single), "udd", "adapted",
                       {k: _finish(v, single) for k, v in blocks.items()}, X)


# ---------------------------------------------------------------------------
# curvature

CURVATURE_BLOCKS = ("R^i_hjk", "R^a_bjk", "R^i_jka", "R^c_bka", "R^i_jbc", "R^a_bcd")


def _curvature_blocks_from_full(R: np.ndarray, n: int) -> dict:
    h, v = slice(0, n), slice(n, None)
    s = lambda *ix: R[(Ellipsis,) + ix]
    return {
        "R^i_hjk": s(h, h, h, h), "R^a_bjk": s(v, v, h, h), "R^i_jka": s(h, h, h, v),
        "R^c_bka": s(v, v, h, v), "R^i_jbc": s(h, h, v, v), "R^a_bcd": s(v, v, v, v),
    }


def _printed_curvature_blocks(ctx: _Ctx, c: DConnectionCoeffs) -> dict:
    """Evaluate the six block formulas as printed (with the T^b_ka reading)."""
    n = c.chart.n
    G, dG = ctx.ev_with_frame_derivs(c.full())
    Lh, Lv = G[..., :n, :n, :n], G[..., n:, n:, :n]
    Ch, Cv = G[..., :n, :n, n:], G[..., n:, n:, n:]
    # frame derivatives: dX[..., idx, m] = e_m X[idx]
    dLh, dLv = dG[..., :n, :n, :n, :], dG[..., n:, n:, :n, :]
    dCh, dCv = dG[..., :n, :n, n:, :], dG[..., n:, n:, n:, :]
    Om = ctx.omega()                                   # [a, k, j]
    dN = ctx.dN_vertical()                             # [b, k, a] = d_a N^b_k
    ein = np.einsum

    # R^i_hjk = e_k L^i_hj - e_j L^i_hk + L^m_hj L^i_mk - L^m_hk L^i_mj - C^i_ha Om^a_kj
    eL = dLh[..., :n]                                  # [i,h,j,k] = e_k L^i_hj
    R1 = (eL - np.swapaxes(eL, -1, -2)
          + ein("...mhj,...imk->...ihjk", Lh, Lh) - ein("...mhk,...imj->...ihjk", Lh, Lh)
          - ein("...iha,...akj->...ihjk", Ch, Om))
    eLv = dLv[..., :n]
    R2 = (eLv - np.swapaxes(eLv, -1, -2)
          + ein("...cbj,...ack->...abjk", Lv, Lv) - ein("...cbk,...acj->...abjk", Lv, Lv)
          - ein("...abc,...ckj->...abjk", Cv, Om))
    # T^b_ka read as d_a N^b_k - L^b_ak
    Tka = np.einsum("...bka->...bka", dN) - np.einsum("...bak->...bka", Lv)
    # D_k C^i_ja = e_k C^i_ja + L^i_mk C^m_ja - L^m_jk C^i_ma - L^b_ak C^i_jb
    DCh = (np.einsum("...ijak->...ijak", dCh[..., :n])
           + ein("...imk,...mja->...ijak", Lh, Ch) - ein("...mjk,...ima->...ijak", Lh, Ch)
           - ein("...bak,...ijb->...ijak", Lv, Ch))
    eaLh = dLh[..., n:]                                # [i,j,k,a] = e_a L^i_jk
    R3 = eaLh - np.swapaxes(DCh, -1, -2) + ein("...ijb,...bka->...ijka", Ch, Tka)
    DCv = (dCv[..., :n]
           + ein("...cdk,...dba->...cbak", Lv, Cv) - ein("...dbk,...cda->...cbak", Lv, Cv)
           - ein("...dak,...cbd->...cbak", Lv, Cv))
    eaLv = dLv[..., n:]
    R4 = eaLv - np.swapaxes(DCv, -1, -2) + ein("...cbd,...dka->...cbka", Cv, Tka)
    eC = dCh[..., n:]                                  # [i,j,b,c] = e_c C^i_jb
    R5 = (eC - np.swapaxes(eC, -1, -2)
          + ein("...hjb,...ihc->...ijbc", Ch, Ch) - ein("...hjc,...ihb->...ijbc", Ch, Ch))
    eCv = dCv[..., n:]
    R6 = (eCv - np.swapaxes(eCv, -1, -2)
          + ein("...ebc,...aed->...abcd", Cv, Cv) - ein("...ebd,...aec->...abcd", Cv, Cv))
    return dict(zip(CURVATURE_BLOCKS, (R1, R2, R3, R4, R5, R6)))


def _assemble_block_curvature(blocks: dict, n: int, D: int, batch) -> np.ndarray:
    R = np.zeros(batch + (D,) * 4)
    h, v = slice(0, n), slice(n, D)
    R[..., h, h, h, h] = blocks["R^i_hjk"]
    R[..., v, v, h, h] = blocks["R^a_bjk"]
    R[..., h, h, h, v] = blocks["R^i_jka"]
    R[..., h, h, v, h] = -np.swapaxes(blocks["R^i_jka"], -1, -2)
    R[..., v, v, h, v] = blocks["R^c_bka"]
    R[..., v, v, v, h] = -np.swapaxes(blocks["R^c_bka"], -1, -2)
    R[..., h, h, v, v] = blocks["R^i_jbc"]
    R[..., v, v, v, v] = blocks["R^a_bcd"]
    return R


def _commutator_curvature(ctx: _Ctx, Gfull_sym: np.ndarray):
    G, dG = ctx.ev_with_frame_derivs(Gfull_sym)
    return frame_curvature(G, dG, ctx.W())


def dcurvature(c: DConnectionCoeffs, p, mode: str = "formula") -> TensorValue:
    """Curvature d-tensor in the block convention R^a_{bcd} = Rgen[a, b, d, c].

    ``mode="formula"`` evaluates the block formulas; ``mode="commutator"``
    evaluates R(X,Y)Z = [D_X, D_Y]Z - D_[X,Y]Z on the adapted frame.
    """
    X, single = as_batch(p, c.chart)
    ctx = _Ctx(c.N, X)
    n, D = c.chart.n, c.chart.dim
    if mode == "formula":
        blocks = _printed_curvature_blocks(ctx, c)
        R = _assemble_block_curvature(blocks, n, D, (X.shape[0],))
    elif mode == "commutator":
        R = block_order(_commutator_curvature(ctx, c.full()))
        blocks = _curvature_blocks_from_full(R, n)
    else:
        raise ValueError(f"unknown curvature mode {mode!r}")
    return TensorValue(_finish(R, single), "uddd", "adapted",
                       {k: _finish(v, single) for k, v in blocks.items()}, X)


def _ricci_from_blocks(blocks: dict, n: int, D: int) -> tuple[np.ndarray, dict]:
    Rij = np.einsum("...kijk->...ij", blocks["R^i_hjk"])
    Ria = -np.einsum("...kika->...ia", blocks["R^i_jka"])
    Rai = np.einsum("...baib->...ai", blocks["R^c_bka"])
    Rab = np.einsum("...cabc->...ab", blocks["R^a_bcd"])
    batch = Rij.shape[:-2]
    Ric = np.zeros(batch + (D, D))
    Ric[..., :n, :n] = Rij
    Ric[..., :n, n:] = Ria
    Ric[..., n:, :n] = Rai
    Ric[..., n:, n:] = Rab
    return Ric, {"R_ij": Rij, "R_ia": Ria, "R_ai": Rai, "R_ab": Rab}


def ricci_dtensor(c: DConnectionCoeffs, p, mode: str = "formula") -> TensorValue:
    """Ricci d-tensor R_ij = R^k_ijk, R_ia = -R^k_ika, R_ai = R^b_aib, R_ab = R^c_abc."""
    R = dcurvature(c, p, mode)
    n, D = c.chart.n, c.chart.dim
    Ric, blocks = _ricci_from_blocks(R.blocks, n, D)
    return TensorValue(Ric, "dd", "adapted", blocks, R.points)


def scalar_einstein(dm: DMetric, c: DConnectionCoeffs, p, source: SourceField | None = None,
                    mode: str = "formula"):
    """(scalar curvature, Einstein d-tensor, residual or None)."""
    X, single = as_batch(p, dm.chart)
    Ric = ricci_dtensor(c, X, mode).data
    ctx = _Ctx(dm.N, X)
    d = ctx.ev(dm.adapted)
    di = ctx.ev(dm.adapted_inv)
    sR = np.einsum("...ab,...ab->...", di, Ric)
    Gt = Ric - 0.5 * d * sR[..., None, None]
    res = None
    if source is not None:
        res = _finish(Gt - ctx.ev(source.Y), single)
    return _finish(sR, single), _finish(Gt, single), res


def metricity(conn, dm: DMetric, p) -> np.ndarray:
    """Components D_m g_ab of the adapted metric, trailing index m."""
    X, single = as_batch(p, dm.chart)
    ctx = _Ctx(dm.N, X)
    G = ctx.ev(_conn_full(conn))
    d, dd = ctx.ev_with_frame_derivs(dm.adapted)
    return _finish(covariant_derivative(G, d, dd, "dd", nb=1), single)


# ---------------------------------------------------------------------------
# Levi-Civita connection

def _coordinate_jets(dm: DMetric, ctx: _Ctx, order: int = 1):
    Gs = dm.assembled
    D = dm.chart.dim
    G = ctx.ev(Gs)
    dGs = np.empty((D, D, D), dtype=object)
    for idx in np.ndindex(D, D):
        for k in range(D):
            dGs[idx + (k,)] = differentiate(Gs[idx], k)
    dG = ctx.ev(dGs)
    if order < 2:
        return G, dG, None
    d2Gs = np.empty((D, D, D, D), dtype=object)
    for idx in np.ndindex(D, D, D):
        for l in range(D):
            d2Gs[idx + (l,)] = differentiate(dGs[idx], l)
    return G, dG, ctx.ev(d2Gs)


def _frame_jets(N: NConnection, ctx: _Ctx):
    """E[a, mu], Theta[a, mu] and dE[a, mu, nu] = d_nu E[a, mu]."""
    Es = N.frame_fields()
    D = Es.shape[0]
    dEs = np.empty((D, D, D), dtype=object)
    for idx in np.ndindex(D, D):
        for k in range(D):
            dEs[idx + (k,)] = differentiate(Es[idx], k)
    E, Th = frames_batch(N, ctx.X)
    return E, Th, ctx.ev(dEs)


def _lc_coordinate_route(dm: DMetric, ctx: _Ctx) -> np.ndarray:
    G, dG, _ = _coordinate_jets(dm, ctx, 1)
    cond = np.linalg.cond(G)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
        k = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise ArithmeticError(f"assembled metric is degenerate at {ctx.X[k]}")
    Gam = riemann.christoffel(G, dG)
    E, Th, dE = _frame_jets(dm.N, ctx)
    # Gam^g_{b a} = Th^g_mu (E_a^nu d_nu E_b^mu + E_a^nu E_b^l Gam^mu_{l nu})
    inner = (np.einsum("...an,...bmn->...mba", E, dE)
             + np.einsum("...an,...bl,...mln->...mba", E, E, Gam))
    return np.einsum("...gm,...mba->...gba", Th, inner)


def levi_civita_koszul(dm: DMetric) -> FullConnectionCoeffs:
    """Symbolic Levi-Civita coefficients from the Koszul formula in the adapted frame."""
    N = dm.N
    D = dm.chart.dim
    d, di = dm.adapted, dm.adapted_inv
    W = N.anholonomy_fields()
    Wl = _simplify(np.einsum("sg,gab->sab", d, W))      # W_{s a b}
    e = N.e
    low = zeros((D, D, D))
    for s in range(D):
        for b in range(D):
            for a in range(D):
                low[s, b, a] = mul(const(0.5), add(
                    e(d[b, s], a), e(d[a, s], b), mul(const(-1.0), e(d[a, b], s)),
                    Wl[s, a, b], mul(const(-1.0), Wl[b, a, s]), mul(const(-1.0), Wl[a, b, s])))
    G = _simplify(np.einsum("gs,sba->gba", di, low))
    return FullConnectionCoeffs(dm.chart, N, G)


def _printed_distortion_blocks(ctx: _Ctx, dm: DMetric, c: DConnectionCoeffs) -> dict:
    """Printed distortion blocks, evaluated with the canonical blocks of ``c``.

    ``Z^a_bk`` repeats an index in print; it is read as
    1/2 (delta^a_c delta^d_b + h_cb h^ad)(L^c_dk - e_d N^c_k).
    ``Z^i_kb`` is read with the free index of Omega equal to the summed
    index of h.
    """
    n, m = dm.n, dm.m
    ein = np.einsum
    Lv, Ch = ctx.ev(c.Lv), ctx.ev(c.Ch)
    g, h = ctx.ev(dm.g), ctx.ev(dm.h)
    gi, hi = ctx.ev(dm.g_inv), ctx.ev(dm.h_inv)
    Om = ctx.omega()                                  # [a, j, k]
    dN = ctx.dN_vertical()                            # [c, k, b] = d_b N^c_k
    P = ctx.X.shape[0]
    # K[c, d, k] = L^c_dk - e_d N^c_k
    K = Lv - np.swapaxes(dN, -1, -2)
    Z = {}
    Z["L^i_jk"] = np.zeros((P, n, n, n))
    Z["L^a_jk"] = -ein("...ijb,...ik,...ab->...ajk", Ch, g, hi) - 0.5 * Om
    bracket = (ein("...ij,...hk->...ijhk", np.broadcast_to(np.eye(n), (P, n, n)),
                   np.broadcast_to(np.eye(n), (P, n, n)))
               - ein("...jk,...ih->...ijhk", g, gi))          # [i, j, h, k]
    bC = ein("...ijhk,...jhb->...ibk", bracket, Ch)
    omega_term = 0.5 * ein("...cjk,...cb,...ji->...ibk", Om, h, gi)
    Z["L^i_bk"] = omega_term - 0.5 * bC
    Z["C^i_jb"] = np.swapaxes(omega_term + 0.5 * bC, -1, -2)     # Z^i_kb stored [i,k,b]
    Z["L^a_bk"] = 0.5 * (K + ein("...cb,...ad,...cdk->...abk", h, hi, K))
    Z["C^a_jb"] = -0.5 * (np.swapaxes(K, -1, -2)
                          - ein("...cb,...ad,...cdj->...ajb", h, hi, K))
    Z["C^a_bc"] = np.zeros((P, m, m, m))
    Z["C^i_bc"] = -0.5 * ein("...ij,...caj,...cb->...iab", gi, K, h) \
        - 0.5 * ein("...ij,...cbj,...ca->...iab", gi, K, h)
    return Z


def _blocks_to_full(blocks: dict, n: int, D: int, P: int) -> np.ndarray:
    G = np.zeros((P, D, D, D))
    h, v = slice(0, n), slice(n, D)
    where = {"L^i_jk": (h, h, h), "L^a_jk": (v, h, h), "L^i_bk": (h, v, h),
             "L^a_bk": (v, v, h), "C^i_jb": (h, h, v), "C^a_jb": (v, h, v),
             "C^i_bc": (h, v, v), "C^a_bc": (v, v, v)}
    for k, sl in where.items():
        G[(Ellipsis,) + sl] = blocks[k]
    return G


def levi_civita_printed(dm: DMetric, p, c: DConnectionCoeffs | None = None) -> FullConnectionCoeffs:
    """Levi-Civita coefficients assembled from the printed block formulas."""
    X, _ = as_batch(p, dm.chart)
    c = c or canonical_dconnection(dm, check=False)
    ctx = _Ctx(dm.N, X)
    Z = _printed_distortion_blocks(ctx, dm, c)
    n, D = dm.n, dm.chart.dim
    G = ctx.ev(c.full()) + _blocks_to_full(Z, n, D, X.shape[0])
    return FullConnectionCoeffs(dm.chart, dm.N, G, X)


def levi_civita_adapted(dm: DMetric, p, route: str = "coordinate") -> FullConnectionCoeffs:
    """Levi-Civita coefficients in the adapted frame, evaluated at points.

    ``coordinate``: Christoffel symbols of the assembled metric pushed
    through the vielbein (authoritative).  ``koszul``: the symbolic Koszul
    formula.  ``printed``: the printed block formulas.
    """
    X, _ = as_batch(p, dm.chart)
    if route == "coordinate":
        G = _lc_coordinate_route(dm, _Ctx(dm.N, X))
    elif route == "koszul":
        G = evaluate_array(levi_civita_koszul(dm).data, X)
    elif route == "printed":
        return levi_civita_printed(dm, X)
    else:
        raise ValueError(f"unknown route {route!r}")
    return FullConnectionCoeffs(dm.chart, dm.N, G, X)


# blocks of the printed distortion that reproduce the authoritative values
DISTORTION_VERIFIED = ("L^i_jk", "L^a_jk", "C^i_jb", "C^a_bc", "C^i_bc")
DISTORTION_PRINTED_NAMES = {
    "L^i_jk": "Z^i_jk", "L^a_jk": "Z^a_jk", "L^i_bk": "Z^i_bk", "L^a_bk": "Z^a_bk",
    "C^i_jb": "Z^i_kb", "C^a_jb": "Z^a_jb", "C^a_bc": "Z^a_bc", "C^i_bc": "Z^i_ab",
}


@dataclass(frozen=True)
class DistortionReport:
    Z: TensorValue
    canonical: np.ndarray
    levi_civita: np.ndarray
    printed: dict
    agreement: dict


def distortion(dm: DMetric, p) -> DistortionReport:
    """Z = LC - canonical, with the printed block formulas as a cross-check.

    ``agreement`` maps each printed block name to the max abs deviation
    from the authoritative value.
    """
    X, single = as_batch(p, dm.chart)
    c = canonical_dconnection(dm, check=False)
    ctx = _Ctx(dm.N, X)
    LC = _lc_coordinate_route(dm, ctx)
    Gh = ctx.ev(c.full())
    Z = LC - Gh
    n = dm.n
    Zb = full_blocks(Z, n)
    printed = _printed_distortion_blocks(ctx, dm, c)
    agree = {DISTORTION_PRINTED_NAMES[k]: float(np.max(np.abs(printed[k] - Zb[k]), initial=0.0))
             for k in printed}
    tv = TensorValue(_finish(Z, single), "udd", "adapted",
                     {k: _finish(v, single) for k, v in Zb.items()}, X)
    return DistortionReport(tv, _finish(Gh, single), _finish(LC, single),
                            {DISTORTION_PRINTED_NAMES[k]: _finish(v, single) for k, v in printed.items()},
                            agree)


# ---------------------------------------------------------------------------
# metrization

def kawaguchi_metrize(c: DConnectionCoeffs, dm: DMetric) -> DConnectionCoeffs:
    """Add the deformation 1/2 g^{im} D g_{m.} block by block.

    The h-block uses D_k g_mj (direction index k), which is the version that
    makes the result metric.
    """
    N = dm.N
    n, m = dm.n, dm.m
    G = c.full()
    d = dm.adapted
    Dd = _simplify(covariant_derivative(G, d, N.e_array(d), "dd"))   # [a, b, mu]
    gi, hi = dm.g_inv, dm.h_inv
    half = const(0.5)
    Zh = zeros((n, n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                Zh[i, j, k] = mul(half, add(*[mul(gi[i, q], Dd[q, j, k]) for q in range(n)]))
    Zv = zeros((m, m, n))
    for a in range(m):
        for b in range(m):
            for k in range(n):
                Zv[a, b, k] = mul(half, add(*[mul(hi[a, q], Dd[n + q, n + b, k]) for q in range(m)]))
    Zch = zeros((n, n, m))
    for i in range(n):
        for j in range(n):
            for a in range(m):
                Zch[i, j, a] = mul(half, add(*[mul(gi[i, q], Dd[q, j, n + a]) for q in range(n)]))
    Zcv = zeros((m, m, m))
    for a in range(m):
        for b in range(m):
            for cc in range(m):
                Zcv[a, b, cc] = mul(half, add(*[mul(hi[a, q], Dd[n + q, n + b, n + cc])
                                                for q in range(m)]))
    return c.plus(Zh, Zv, Zch, Zcv)


def obata_operators(dm: DMetric, p) -> dict:
    """O+/- with index layout O[l, i, k, m] = O^{li}_{km}; h and v versions."""
    X, single = as_batch(p, dm.chart)
    ctx = _Ctx(dm.N, X)
    out = {}
    for name, M, Mi in (("h", dm.g, dm.g_inv), ("v", dm.h, dm.h_inv)):
        g, gi = ctx.ev(M), ctx.ev(Mi)
        k = g.shape[-1]
        I = np.eye(k)
        dd = np.einsum("lk,im->likm", I, I)
        gg = np.einsum("...km,...li->...likm", g, gi)
        out[name + "+"] = _finish(0.5 * (dd + gg), single)
        out[name + "-"] = _finish(0.5 * (dd - gg), single)
    return out


def obata_apply(O: np.ndarray, A: np.ndarray) -> np.ndarray:
    """B^i_k = O^{li}_{km} A^m_l."""
    return np.einsum("...likm,...ml->...ik", O, A)


def _obata_minus_sym(M: np.ndarray, Mi: np.ndarray, A: np.ndarray) -> np.ndarray:
    """1/2 (A - M^{-1} A^T M) for an object matrix A (one direction slice)."""
    k = M.shape[0]
    out = zeros((k, k))
    for i in range(k):
        for j in range(k):
            terms = [A[i, j]]
            for r in range(k):
                for q in range(k):
                    terms.append(mul(const(-1.0), Mi[i, r], A[q, r], M[q, j]))
            out[i, j] = mul(const(0.5), add(*terms))
    return out


def obata_and_miron(dm: DMetric, Y: tuple | list, c: DConnectionCoeffs | None = None):
    """Obata projectors and the metric connection canonical + Z[Y].

    ``Y`` holds four arrays shaped like the connection blocks:
    (n,n,n), (m,m,n), (n,n,m), (m,m,m).  For every direction slice the
    deformation is the antisymmetrizing projection O-(Y), which is exactly
    the set of deformations keeping the connection metric.
    Returns (operators as a function of points, connection).
    """
    c = c or canonical_dconnection(dm, check=False)
    n, m = dm.n, dm.m
    shapes = [(n, n, n), (m, m, n), (n, n, m), (m, m, m)]
    Ys = []
    for Yk, shp in zip(Y, shapes):
        arr = map_fields(_to_field, np.asarray(Yk, dtype=object))
        if arr.shape != shp:
            raise ValueError(f"Y block must have shape {shp}, got {arr.shape}")
        Ys.append(arr)
    blocks = []
    for arr, (M, Mi) in zip(Ys, [(dm.g, dm.g_inv), (dm.h, dm.h_inv),
                                 (dm.g, dm.g_inv), (dm.h, dm.h_inv)]):
        Z = zeros(arr.shape)
        for k in range(arr.shape[2]):
            Z[:, :, k] = _obata_minus_sym(M, Mi, arr[:, :, k])
        blocks.append(Z)
    return (lambda p: obata_operators(dm, p)), c.plus(*blocks)


# ---------------------------------------------------------------------------
# Laplacians

def _second_covariant_sym(G, A, variance, N):
    DA = _simplify(covariant_derivative(G, A, N.e_array(A), variance))
    DDA = _simplify(covariant_derivative(G, DA, N.e_array(DA), variance + "d"))
    return DA, DDA


def connection_laplacian(conn, A, variance: str, dm: DMetric, p) -> TensorValue:
    """Delta A = g^{ab} (D^2 A)(e_a, e_b) for a symbolic tensor field A.

    ``conn`` may be a coefficient object or one of ``"canonical"``,
    ``"levi-civita"``.
    """
    X, single = as_batch(p, dm.chart)
    G = _resolve_conn(conn, dm)
    A = map_fields(_to_field, np.asarray(A, dtype=object))
    if A.ndim != len(variance):
        raise ValueError("variance string must have one letter per index")
    _, DDA = _second_covariant_sym(G, A, variance, dm.N)
    ctx = _Ctx(dm.N, X)
    vals = ctx.ev(DDA)
    di = ctx.ev(dm.adapted_inv)
    lap = np.einsum("...ab,...ba->...", di[(slice(None),) + (None,) * A.ndim], vals) \
        if A.ndim else np.einsum("pab,pba->p", di, vals)
    return TensorValue(_finish(lap, single), variance, "adapted", {}, X)


def _resolve_conn(conn, dm: DMetric) -> np.ndarray:
    if isinstance(conn, str):
        if conn == "canonical":
            return canonical_dconnection(dm, check=False).full()
        if conn in ("levi-civita", "lc"):
            return levi_civita_koszul(dm).data
        raise ValueError(f"unknown connection {conn!r}")
    return _conn_full(conn)


def laplacian_deformation(dm: DMetric, A, variance: str, p) -> dict:
    """Delta A, canonical Delta A and the distortion term assembled from Z.

    The distortion term follows the expansion of D^2 with D = D^ + Z:
    D^_X(Z_Y A) + Z_X(D^_Y A) + Z_X(Z_Y A) - D^_{Z_X Y} A - Z_{D^_X Y} A - Z_{Z_X Y} A.
    """
    X, single = as_batch(p, dm.chart)
    N = dm.N
    Gh = canonical_dconnection(dm, check=False).full()
    Glc = levi_civita_koszul(dm).data
    Z = _simplify(Glc - Gh)
    A = map_fields(_to_field, np.asarray(A, dtype=object))
    k = A.ndim
    DA, DDA = _second_covariant_sym(Gh, A, variance, N)
    _, DDA_lc = _second_covariant_sym(Glc, A, variance, N)
    ZA = _simplify(_connection_action(Z, A, variance))          # [..., b]
    D = dm.chart.dim
    # t1[..., b, a] = D^_{e_a}(Z_{e_b} A), b held fixed as a label
    t1 = np.empty(A.shape + (D, D), dtype=object)
    t2 = np.empty(A.shape + (D, D), dtype=object)
    t3 = np.empty(A.shape + (D, D), dtype=object)
    for b in range(D):
        S = ZA[(Ellipsis, b)]
        t1[(Ellipsis, b, slice(None))] = _simplify(covariant_derivative(Gh, S, N.e_array(S), variance))
        Sd = DA[(Ellipsis, b)]
        t2[(Ellipsis, b, slice(None))] = _simplify(_connection_action(Z, Sd, variance))
        t3[(Ellipsis, b, slice(None))] = _simplify(_connection_action(Z, S, variance))
    t4 = np.einsum("...g,gba->...ba", DA, Z)      # D^_{Z_a e_b} A
    t5 = np.einsum("...g,gba->...ba", ZA, Gh)     # Z_{D^_a e_b} A
    t6 = np.einsum("...g,gba->...ba", ZA, Z)      # Z_{Z_a e_b} A
    dZ = _simplify(t1 + t2 + t3 - t4 - t5 - t6)
    ctx = _Ctx(N, X)
    di = ctx.ev(dm.adapted_inv)
    di_b = di[(slice(None),) + (None,) * k]

    def contract(arr):
        return np.einsum("...ab,...ba->...", di_b, ctx.ev(arr))

    lap_lc = contract(DDA_lc)
    lap_hat = contract(DDA)
    lap_z = contract(dZ)
    return {"laplacian": _finish(lap_lc, single), "canonical": _finish(lap_hat, single),
            "distortion": _finish(lap_z, single)}


# ---------------------------------------------------------------------------
# curvature decomposition and quadratic tensors

def _lc_riemann_adapted(dm: DMetric, ctx: _Ctx) -> np.ndarray:
    """Levi-Civita Rgen in the adapted frame, from the coordinate Riemann tensor."""
    G, dG, d2G = _coordinate_jets(dm, ctx, 2)
    Rc = riemann.riemann(G, dG, d2G)            # [r, s, m, n] = [R(d_m, d_n) d_s]^r
    E, Th = frames_batch(dm.N, ctx.X)
    return np.einsum("...ar,...bs,...cm,...dn,...rsmn->...abcd", Th, E, E, E, Rc)


def _coordinate_scalar(dm: DMetric, ctx: _Ctx) -> np.ndarray:
    G, dG, d2G = _coordinate_jets(dm, ctx, 2)
    return riemann.scalar(G, dG, d2G)


def curvature_distortion(dm: DMetric, p) -> dict:
    """Split LC curvature into canonical part plus distortion part.

    The LC curvature of the adapted frame is computed symbolically from the
    Koszul coefficients; the total Ricci and scalar curvature are checked
    against the coordinate-frame computation.
    """
    X, single = as_batch(p, dm.chart)
    ctx = _Ctx(dm.N, X)
    c = canonical_dconnection(dm, check=False)
    R_hat = _commutator_curvature(ctx, c.full())
    R_lc = _commutator_curvature(ctx, levi_civita_koszul(dm).data)
    R_z = R_lc - R_hat
    di = ctx.ev(dm.adapted_inv)
    ric_hat, ric_z = frame_ricci(R_hat), frame_ricci(R_z)
    sc_hat = np.einsum("...ab,...ab->...", di, ric_hat)
    sc_z = np.einsum("...ab,...ab->...", di, ric_z)
    R_coord = _lc_riemann_adapted(dm, ctx)
    ric_coord = frame_ricci(R_coord)
    sc_coord = _coordinate_scalar(dm, ctx)
    f = lambda a: _finish(a, single)
    return {
        "R_lc": f(block_order(R_lc)), "R_hat": f(block_order(R_hat)), "R_z": f(block_order(R_z)),
        "ric_lc": f(ric_coord), "ric_hat": f(ric_hat), "ric_z": f(ric_z),
        "sc_lc": f(sc_coord), "sc_hat": f(sc_hat), "sc_z": f(sc_z),
        "ric_residual": float(np.max(np.abs(ric_coord - ric_hat - ric_z))),
        "sc_residual": float(np.max(np.abs(sc_coord - sc_hat - sc_z))),
        "riemann_residual": float(np.max(np.abs(R_coord - R_lc))),
    }


def _ricci_fields(G: np.ndarray, N: NConnection) -> np.ndarray:
    dG = N.e_array(G)
    W = N.anholonomy_fields()
    R = frame_curvature(G, dG, W)
    return _simplify(frame_ricci(R))


def _fd_frame_derivative(func, X: np.ndarray, N: NConnection, h: float = 1e-3):
    """e_m of a numeric field via 4th-order central differences."""
    D = N.chart.dim
    base = func(X)
    partial = np.zeros(base.shape + (D,))
    for mu in range(D):
        acc = 0.0
        for coef, s in ((8.0, 1), (-8.0, -1), (-1.0, 2), (1.0, -2)):
            Xs = X.copy()
            Xs[:, mu] += s * h
            acc = acc + coef * func(Xs)
        partial[..., mu] = acc / (12.0 * h)
    E, _ = frames_batch(N, X)
    Eb = E.reshape((X.shape[0],) + (1,) * (base.ndim - 1) + (D, D))
    return np.einsum("...m,...am->...a", partial, Eb)


def quadratic_b_tensors(dm: DMetric, conn: str, p) -> dict:
    """The three quadratic curvature tensors for ``conn`` in {canonical, levi-civita}.

    B_{a g a' g'} = g^{b b'} g^{d d'} R_{abgd} R_{a'b'g'd'} with
    R_{abgd} = g_{as} R^s_{bgd}; the four-index underlined tensor is the
    printed combination B - B - B_{a g' g a'} + B; the two-index one is
    D_a D_g' sR - g^{bb'}(D_b' D_a R_g'b + D_b' D_g' R_ab), where
    D_x D_y T denotes (D^2 T)(.., e_x, e_y).
    """
    X, single = as_batch(p, dm.chart)
    N = dm.N
    G = _resolve_conn(conn, dm)
    ctx = _Ctx(N, X)
    Rgen = _commutator_curvature(ctx, G)
    R = block_order(Rgen)
    d, di = ctx.ev(dm.adapted), ctx.ev(dm.adapted_inv)
    Rl = np.einsum("...as,...sbgd->...abgd", d, R)
    B = np.einsum("...bB,...dE,...abgd,...ABGE->...agAG", di, di, Rl, Rl)
    Bu = B - B - np.einsum("...agAG->...aGgA", B) + B
    # second covariant derivatives of Ricci and its trace
    Ric_s = _ricci_fields(G, N)
    di_s = dm.adapted_inv
    sR_s = _to_field(np.einsum("ab,ab->", di_s, Ric_s))
    total = size(list(Ric_s.reshape(-1)))
    if total <= SYMBOLIC_NODE_LIMIT:
        _, DDric = _second_covariant_sym(G, Ric_s, "dd", N)
        _, DDs = _second_covariant_sym(G, np.array(sR_s, dtype=object), "", N)
        DDric_v, DDs_v = ctx.ev(DDric), ctx.ev(DDs)
        method = "symbolic"
    else:
        DDric_v, DDs_v = _fd_second_covariant(G, Ric_s, sR_s, N, X)
        method = "finite-difference"
    # D_a D_g' sR = DDs[g', a]; D_b' D_a R_g'b = DDric[g', b, a, b'];
    # D_b' D_g' R_ab = DDric[a, b, g', b']
    t1 = np.swapaxes(DDs_v, -1, -2)
    t2 = np.einsum("...bB,...gbaB->...ag", di, DDric_v)
    t3 = np.einsum("...bB,...abgB->...ag", di, DDric_v)
    B2 = t1 - (t2 + t3)
    f = lambda a: _finish(a, single)
    return {"B": f(B), "B_under4": f(Bu), "B_under2": f(B2), "method": method}


def _fd_second_covariant(G, Ric_s, sR_s, N, X):
    """Second covariant derivatives of Ricci and scalar with FD frame derivatives."""
    def first(Xp, arr, var):
        ctx = _Ctx(N, Xp)
        Gv = ctx.ev(G)
        T = ctx.ev(arr)
        dT = _fd_frame_derivative(lambda Y: evaluate_array(arr, Y), Xp, N)
        return covariant_derivative(Gv, T, dT, var, nb=1)

    out = []
    for arr, var in ((Ric_s, "dd"), (np.array(sR_s, dtype=object), "")):
        ctx = _Ctx(N, X)
        Gv = ctx.ev(G)
        DT = first(X, arr, var)
        dDT = _fd_frame_derivative(lambda Y: first(Y, arr, var), X, N)
        out.append(covariant_derivative(Gv, DT, dDT, var + "d", nb=1))
    return out[0], out[1]
