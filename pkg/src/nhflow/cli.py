"""Command-line front end: chart specs, check suites, flows and trajectories.

A spec is a TOML document (JSON is accepted too) with these sections::

    [chart]       n, m, optional coords, domain, params
    [metric]      g and h blocks plus N, or a full coordinate matrix
                  ``offdiagonal`` from which N is read off
    [lagrangian]  kind = lagrange | finsler | absolute-energy with L, F or h
    [source]      Y, a symmetric matrix of fields for the Einstein residual
    [flow]        FlowConfig fields plus ``block`` = full | h
    [geodesic]    x0, y0, span, step
    [residual]    tau = [lo, hi], solution = true | false

Exactly one of [metric] and [lagrangian] must be present.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import __version__
from . import dconn as dc
from . import flow as fl
from . import lagfin as lf
from .expr import (ZERO, ArityError, Chart, DomainError, ParseError,
                   UnknownIdentifierError, differentiate, evaluate_array, field_matrix,
                   to_text)
from .nconn import (DegenerateMetricError, DMetric, NConnection, check_block,
                    dmetric_from_offdiag, n_curvature, sample_points)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_BREAKDOWN = 0, 1, 2, 3
DEFAULT_SEED = 0

# check name -> anchor naming the statement being exercised
ANCHORS = {
    "omega-antisymmetry": "N-connection curvature",
    "canonical-metricity": "canonical d-connection: metric compatibility",
    "canonical-torsion-hh": "canonical d-connection: vanishing h-torsion",
    "canonical-torsion-vv": "canonical d-connection: vanishing v-torsion",
    "canonical-torsion-omega": "canonical d-connection: T^a_ji equals N-curvature",
    "levi-civita-routes": "Levi-Civita in adapted frames: coordinate vs Koszul",
    "distortion-decomposition": "distortion: Levi-Civita = canonical + Z",
    "distortion-printed": "distortion: closed-form blocks",
    "curvature-formula": "d-curvature: block formulas vs commutator definition",
    "ricci-formula": "Ricci d-tensor: contraction formulas vs commutator definition",
    "curvature-distortion": "curvature distortion: Ricci and scalar splitting",
    "kawaguchi-metricity": "metrization: Kawaguchi deformation",
    "miron-metricity": "metrization: Obata-Miron family",
    "obata-projectors": "metrization: Obata projector algebra",
    "split-oracle": "nonsymmetric flow split: right-hand sides",
    "mixed-ricci": "nonsymmetric flow split: mixed Ricci constraints",
    "lagrange-dconnection": "Lagrange spaces: canonical d-connection of the lift",
    "finsler-homogeneity": "Finsler spaces: 1-homogeneity of F",
    "finsler-hessian-homogeneity": "Finsler spaces: 0-homogeneity of the Hessian",
    "finsler-contraction": "Finsler spaces: g_ij y^i y^j = F^2",
    "cartan-symmetry": "Finsler spaces: Cartan tensor symmetry",
    "cartan-contraction": "Finsler spaces: Cartan tensor annihilates y",
    "chern-torsion": "Chern connection: torsion free condition",
    "chern-metric-h": "Chern connection: almost metric compatibility (h)",
    "chern-metric-v": "Chern connection: almost metric compatibility (v)",
    "geodesic-routes": "semispray: Euler-Lagrange vs semispray geodesics",
    "geodesic-energy": "semispray: energy conservation",
    "family-residual": "Ricci flow: closed-form family residual",
    "family-extraction": "Ricci flow: N-adapted vs coordinate computation",
    "flow-oracle": "Ricci flow: conformal 2-torus oracle",
}


class SpecError(ValueError):
    """Invalid spec document; the message names the offending location."""


# ---------------------------------------------------------------------------
# spec documents

@dataclass
class ChartSpec:
    chart: Chart
    provenance: str                     # "blocks" | "offdiagonal" | "lagrangian"
    metric: dict = field(default_factory=dict)
    lagrangian: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)
    geodesic: dict = field(default_factory=dict)
    residual: dict = field(default_factory=dict)
    source: np.ndarray | None = None
    path: str = "<memory>"
    _dm: DMetric | None = None
    _lg: lf.Lagrangian | None = None

    def lagrangian_obj(self) -> lf.Lagrangian | None:
        if self.provenance != "lagrangian":
            return None
        if self._lg is None:
            self._lg = _build_lagrangian(self.chart, self.lagrangian, self.path)
        return self._lg

    def dmetric(self) -> DMetric:
        """The d-metric, resolving N from the declared provenance on first use."""
        if self._dm is None:
            if self.provenance == "lagrangian":
                self._dm = lf.lift_metric(self.lagrangian_obj())
            elif self.provenance == "offdiagonal":
                self._dm = dmetric_from_offdiag(self.metric["offdiagonal"], self.chart)
            else:
                md = self.metric
                N = md.get("N")
                if N is None:
                    N = [["0"] * self.chart.n for _ in range(self.chart.m)]
                self._dm = DMetric.build(self.chart, md["g"], md["h"],
                                         NConnection(self.chart, field_matrix(N, self.chart)))
        return self._dm

    def flow_config(self, **override) -> fl.FlowConfig:
        keys = {f for f in fl.FlowConfig.__dataclass_fields__}
        kw = {k: v for k, v in self.flow.items() if k in keys}
        if "grid" in kw:
            kw["grid"] = tuple(int(s) for s in kw["grid"])
        kw.update(override)
        return fl.FlowConfig(**kw)


def _loc(path: str, section: str, key: str | None = None) -> str:
    return f"{path}: [{section}]" + (f" {key}" if key else "")


def _matrix(raw, chart: Chart, where: str, shape=None) -> np.ndarray:
    if not isinstance(raw, list) or not all(isinstance(r, list) for r in raw):
        raise SpecError(f"{where}: expected a list of rows")
    try:
        M = field_matrix([[str(v) for v in row] for row in raw], chart)
    except (ParseError, UnknownIdentifierError, ArityError) as exc:
        raise SpecError(f"{where}: {exc}") from exc
    except ValueError as exc:
        raise SpecError(f"{where}: {exc}") from exc
    if shape is not None and M.shape != shape:
        raise SpecError(f"{where}: expected shape {shape}, got {M.shape}")
    return M


def _build_lagrangian(chart: Chart, sec: dict, path: str) -> lf.Lagrangian:
    kind = sec.get("kind", "lagrange")
    where = _loc(path, "lagrangian")
    try:
        if kind == "lagrange":
            if "L" not in sec:
                raise SpecError(f"{where}: kind 'lagrange' needs L")
            return lf.Lagrangian.lagrange(chart, str(sec["L"]))
        if kind == "finsler":
            if "F" not in sec:
                raise SpecError(f"{where}: kind 'finsler' needs F")
            return lf.Lagrangian.finsler(chart, str(sec["F"]))
        if kind == "absolute-energy":
            if "h" not in sec:
                raise SpecError(f"{where}: kind 'absolute-energy' needs h")
            h = _matrix(sec["h"], chart, where + " h", (chart.m, chart.m))
            return lf.Lagrangian.absolute_energy(chart, h)
    except SpecError:
        raise
    except (ParseError, UnknownIdentifierError, ArityError, DomainError, ValueError) as exc:
        raise SpecError(f"{where}: {exc}") from exc
    raise SpecError(f"{where}: unknown kind {kind!r}")


def _read_document(path: str) -> dict:
    if not os.path.exists(path):
        raise SpecError(f"{path}: no such file")
    with open(path, "rb") as fh:
        data = fh.read()
    if path.endswith(".json"):
        try:
            return json.loads(data.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return tomllib.loads(data.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise SpecError(f"{path}: {exc}") from exc


def spec_from_document(doc: dict, path: str = "<memory>") -> ChartSpec:
    """Validate a parsed document and build a ChartSpec."""
    if "chart" not in doc:
        raise SpecError(f"{path}: missing [chart] section")
    c = doc["chart"]
    try:
        chart = Chart(int(c["n"]), int(c["m"]), tuple(c.get("coords", ())),
                      tuple(tuple(d) for d in c.get("domain", ())), tuple(c.get("params", ())))
    except KeyError as exc:
        raise SpecError(f"{_loc(path, 'chart')}: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{_loc(path, 'chart')}: {exc}") from exc

    has_metric, has_lag = "metric" in doc, "lagrangian" in doc
    if has_metric and has_lag:
        raise SpecError(f"{path}: provenance conflict, both [metric] and [lagrangian] "
                        "define the metric; keep exactly one")
    if not (has_metric or has_lag):
        raise SpecError(f"{path}: no metric provenance; add [metric] or [lagrangian]")

    n, m, D = chart.n, chart.m, chart.dim
    spec = ChartSpec(chart, "lagrangian" if has_lag else "blocks", path=path,
                     flow=dict(doc.get("flow", {})), geodesic=dict(doc.get("geodesic", {})),
                     residual=dict(doc.get("residual", {})))
    if has_metric:
        md = doc["metric"]
        blocks = "g" in md or "h" in md
        if blocks and "offdiagonal" in md:
            raise SpecError(f"{_loc(path, 'metric')}: provenance conflict, give either "
                            "g/h blocks or offdiagonal, not both")
        if "offdiagonal" in md:
            N = md.get("N", "from_metric")
            if N != "from_metric":
                raise SpecError(f"{_loc(path, 'metric', 'N')}: with offdiagonal, N must be "
                                "'from_metric' or omitted")
            spec.provenance = "offdiagonal"
            spec.metric = {"offdiagonal": _matrix(md["offdiagonal"], chart,
                                                  _loc(path, "metric", "offdiagonal"), (D, D))}
        else:
            if not ("g" in md and "h" in md):
                raise SpecError(f"{_loc(path, 'metric')}: needs both g and h")
            out = {"g": _matrix(md["g"], chart, _loc(path, "metric", "g"), (n, n)),
                   "h": _matrix(md["h"], chart, _loc(path, "metric", "h"), (m, m))}
            N = md.get("N")
            if isinstance(N, str):
                raise SpecError(f"{_loc(path, 'metric', 'N')}: {N!r} needs an offdiagonal "
                                "matrix or a [lagrangian] section")
            if N is not None:
                out["N"] = _matrix(N, chart, _loc(path, "metric", "N"), (m, n))
            spec.metric = out
    else:
        lag = dict(doc["lagrangian"])
        N = lag.pop("N", "from_lagrangian")
        if N != "from_lagrangian":
            raise SpecError(f"{_loc(path, 'lagrangian', 'N')}: must be 'from_lagrangian'")
        spec.lagrangian = lag
        spec.lagrangian_obj()     # validates parsing and Finsler homogeneity now
    if "source" in doc:
        Y = doc["source"].get("Y")
        if Y is None:
            raise SpecError(f"{_loc(path, 'source')}: missing Y")
        spec.source = _matrix(Y, chart, _loc(path, "source", "Y"), (D, D))
    if spec.flow:
        try:
            spec.flow_config()
        except (TypeError, ValueError) as exc:
            raise SpecError(f"{_loc(path, 'flow')}: {exc}") from exc
    return spec


def load_spec(path: str) -> ChartSpec:
    return spec_from_document(_read_document(path), path)


# ---------------------------------------------------------------------------
# random charts

def _trig_poly(rng: np.random.Generator, names, terms: int, amp: float) -> str:
    """Bounded trig polynomial with total amplitude at most ``amp``."""
    w = rng.uniform(0.2, 1.0, terms)
    w *= amp / w.sum()
    out = ""
    for k in range(terms):
        fn = "sin" if rng.random() < 0.5 else "cos"
        picks = rng.choice(len(names), size=min(2, len(names)), replace=False)
        arg = " + ".join(f"{int(rng.integers(1, 3))}*{names[int(i)]}" for i in picks)
        sign = "-" if rng.random() < 0.5 else "+"
        out += f" {sign} {w[k]:.6f}*{fn}({arg} + {rng.uniform(0, 6.28):.6f})"
    return "0" + out


def random_chart_document(rng: np.random.Generator, n: int = 2, m: int = 2,
                          terms: int = 2, verify_points: int = 1000) -> dict:
    """Spec document for a random periodic chart with trig-polynomial coefficients.

    Symmetric blocks use base 2 on the diagonal and total perturbation
    amplitude below 1, so they are positive definite by Gershgorin; the
    determinants are also checked at ``verify_points`` samples.
    """
    chart = Chart(n, m)
    names = list(chart.coord_names)

    def block(k, depends):
        M = [["0"] * k for _ in range(k)]
        for i in range(k):
            M[i][i] = "2 + " + _trig_poly(rng, depends, terms, 0.4)
            for j in range(i + 1, k):
                M[i][j] = M[j][i] = _trig_poly(rng, depends, terms, 0.5 / max(1, k - 1))
        return M

    for _ in range(20):
        doc = {"chart": {"n": n, "m": m},
               "metric": {"g": block(n, names), "h": block(m, names),
                          "N": [[_trig_poly(rng, names, terms, 0.8) for _ in range(n)]
                                for _ in range(m)]}}
        spec = spec_from_document(doc)
        dm = spec.dmetric()
        X = sample_points(chart, verify_points, rng)
        try:
            check_block(dm.g, X, "h-block")
            check_block(dm.h, X, "v-block")
        except DegenerateMetricError:
            continue
        gv, hv = evaluate_array(dm.g, X), evaluate_array(dm.h, X)
        if min(np.linalg.eigvalsh(gv).min(), np.linalg.eigvalsh(hv).min()) > 0.1:
            return doc
    raise RuntimeError("could not draw a nondegenerate random chart")


def random_dmetric(rng: np.random.Generator, n: int = 2, m: int = 2, terms: int = 2,
                   verify_points: int = 1000) -> DMetric:
    return spec_from_document(random_chart_document(rng, n, m, terms, verify_points)).dmetric()


# ---------------------------------------------------------------------------
# check reports

@dataclass
class CheckEntry:
    name: str
    anchor: str
    points: int
    max_residual: float
    tol: float
    status: str             # pass | fail | reported
    detail: str = ""


@dataclass
class CheckReport:
    entries: list = field(default_factory=list)

    def add(self, name: str, residual, points: int, tol: float, *, reported: bool = False,
            strict: bool = False, label: str | None = None, detail: str = "") -> CheckEntry:
        r = float(np.max(np.abs(residual), initial=0.0)) if np.size(residual) else 0.0
        if not np.isfinite(r):
            status = "fail"
        elif reported and not strict:
            status = "reported"
        else:
            status = "pass" if r <= tol else "fail"
        e = CheckEntry(label or name, ANCHORS[name], int(points), r, float(tol), status, detail)
        self.entries.append(e)
        return e

    @property
    def failed(self) -> bool:
        return any(e.status == "fail" for e in self.entries)

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries],
                "status": "fail" if self.failed else "pass"}


def _tol(opts, default: float) -> float:
    return default if opts.tol is None else opts.tol


def geometry_checks(dm: DMetric, X: np.ndarray, opts, report: CheckReport,
                    rng: np.random.Generator) -> None:
    """Invariant suite for a d-metric at sample rows X."""
    P = X.shape[0]
    strict = opts.strict_paper
    n, m = dm.n, dm.m
    Om = n_curvature(dm.N, X)
    report.add("omega-antisymmetry", Om + np.swapaxes(Om, -1, -2), P, _tol(opts, 1e-14))

    c = dc.canonical_dconnection(dm, check=False)
    report.add("canonical-metricity", dc.metricity(c, dm, X), P, _tol(opts, 1e-9))
    T = dc.dtorsion(c, X).blocks
    report.add("canonical-torsion-hh", T["T^i_jk"], P, _tol(opts, 1e-12))
    report.add("canonical-torsion-vv", T["T^a_bc"], P, _tol(opts, 1e-12))
    report.add("canonical-torsion-omega", T["T^a_ji"] - Om, P, _tol(opts, 1e-12),
               detail=f"max |Omega| = {float(np.max(np.abs(Om))):.6e}")

    lc = dc.levi_civita_adapted(dm, X, "coordinate").data
    lk = dc.levi_civita_adapted(dm, X, "koszul").data
    report.add("levi-civita-routes", lc - lk, P, _tol(opts, 1e-8))
    rep = dc.distortion(dm, X)
    report.add("distortion-decomposition", lk - (rep.canonical + rep.Z.data), P,
               _tol(opts, 1e-8))
    for key in sorted(rep.agreement):
        verified = any(dc.DISTORTION_PRINTED_NAMES[b] == key for b in dc.DISTORTION_VERIFIED)
        report.add("distortion-printed", rep.agreement[key], P, _tol(opts, 1e-8),
                   reported=not verified, strict=strict, label=f"distortion-printed {key}")

    Rf, Rc = dc.dcurvature(c, X, "formula"), dc.dcurvature(c, X, "commutator")
    report.add("curvature-formula", Rf.data - Rc.data, P, _tol(opts, 1e-8))
    rf, rc = dc.ricci_dtensor(c, X, "formula"), dc.ricci_dtensor(c, X, "commutator")
    report.add("ricci-formula", rf.data - rc.data, P, _tol(opts, 1e-8))
    cd = dc.curvature_distortion(dm, X)
    report.add("curvature-distortion",
               [float(np.max(np.abs(cd[k]))) for k in ("ric_residual", "sc_residual",
                                                         "riemann_residual")],
               P, _tol(opts, 1e-8))

    def rand_blocks(scale):
        shapes = [(n, n, n), (m, m, n), (n, n, m), (m, m, m)]
        return [field_matrix(np.array([f"{v:.6f}" for v in scale * rng.standard_normal(
            int(np.prod(s)))], dtype=object).reshape(s).tolist(), dm.chart) for s in shapes]

    bad = c.plus(*rand_blocks(0.3))
    report.add("kawaguchi-metricity", dc.metricity(dc.kawaguchi_metrize(bad, dm), dm, X), P,
               _tol(opts, 1e-9))
    ops, mc = dc.obata_and_miron(dm, rand_blocks(0.5), c)
    report.add("miron-metricity", dc.metricity(mc, dm, X), P, _tol(opts, 1e-9))
    report.add("obata-projectors", obata_algebra_residual(ops(X)), P, _tol(opts, 1e-12))

    split = fl.nonsymmetric_split(dm, fl.FlowConfig(), X)
    report.add("split-oracle", split["oracle_deviation"], P, _tol(opts, 1e-8))
    report.add("mixed-ricci", max(split["constraint"]), P, _tol(opts, 1e-8),
               reported=True, strict=strict,
               detail="max |R_ia| = {:.6e}, max |R_ai| = {:.6e}".format(*split["constraint"]))


def obata_algebra_residual(ops: dict) -> float:
    """Idempotence, complementarity and orthogonality of O+ and O-."""
    worst = 0.0
    for side in ("h", "v"):
        Op, Om = ops[side + "+"], ops[side + "-"]
        k = Op.shape[-1]
        # operator matrix M[(i,k),(m,l)] = O[l,i,k,m]
        mat = lambda O: np.einsum("...likm->...ikml", O).reshape(O.shape[:-4] + (k * k, k * k))
        A, B = mat(Op), mat(Om)
        I = np.eye(k * k)
        for r in (A @ A - A, B @ B - B, A @ B, B @ A, A + B - I):
            worst = max(worst, float(np.max(np.abs(r))))
    return worst


def lagrangian_checks(Lg: lf.Lagrangian, X: np.ndarray, opts, report: CheckReport) -> None:
    P = X.shape[0]
    n = Lg.n
    dm = lf.lift_metric(Lg)
    c1, c2 = lf.lagrange_dconnection(Lg), dc.canonical_dconnection(dm, check=False)
    dev = max(float(np.max(np.abs(evaluate_array(getattr(c1, k), X)
                                  - evaluate_array(getattr(c2, k), X))))
              for k in ("Lh", "Lv", "Ch", "Cv"))
    report.add("lagrange-dconnection", dev, P, _tol(opts, 1e-8))
    if Lg.kind != "finsler":
        return
    report.add("finsler-homogeneity", Lg.check_homogeneity(X, tol=np.inf), P, _tol(opts, 1e-9))
    g = lf.hessian_metric(Lg)
    g0 = evaluate_array(g, X)
    worst = 0.0
    for s in (0.5, 2.0, 3.0):
        Xs = X.copy()
        Xs[:, n:2 * n] *= s
        worst = max(worst, float(np.max(np.abs(evaluate_array(g, Xs) - g0))))
    report.add("finsler-hessian-homogeneity", worst, P, _tol(opts, 1e-9))
    y = X[:, n:2 * n]
    F = evaluate_array(np.array([Lg.F], dtype=object), X)[:, 0]
    report.add("finsler-contraction", np.einsum("pij,pi,pj->p", g0, y, y) - F ** 2, P,
               _tol(opts, 1e-9))
    A = lf.cartan_tensor_and_forms(Lg, X)["A"]
    sym = max(float(np.max(np.abs(A - np.transpose(A, perm)))) for perm in
              ((0, 2, 1, 3), (0, 1, 3, 2), (0, 3, 2, 1)))
    report.add("cartan-symmetry", sym, P, _tol(opts, 1e-9))
    report.add("cartan-contraction", np.einsum("pijk,pk->pij", A, y), P, _tol(opts, 1e-9))
    ch = lf.chern_structure_residuals(Lg, X)
    report.add("chern-torsion", ch["torsion"], P, _tol(opts, 1e-8))
    report.add("chern-metric-h", ch["metric_h"], P, _tol(opts, 1e-8))
    report.add("chern-metric-v", ch["metric_v"], P, _tol(opts, 1e-8))


# ---------------------------------------------------------------------------
# commands

def _points_from_at(at: str, chart: Chart) -> np.ndarray:
    """Parse "x1=1,x2=2,y3=3" (several points separated by ';')."""
    rows = []
    for chunk in at.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        vals: dict[str, float] = {}
        for item in chunk.split(","):
            if "=" not in item:
                raise SpecError(f"--at: expected name=value, got {item.strip()!r}")
            k, v = (s.strip() for s in item.split("=", 1))
            if k not in chart.names:
                raise SpecError(f"--at: unknown coordinate {k!r}")
            try:
                vals[k] = float(v)
            except ValueError:
                raise SpecError(f"--at: bad number {v!r} for {k}") from None
        missing = [c for c in chart.coord_names if c not in vals]
        if missing:
            raise SpecError(f"--at: missing coordinates {', '.join(missing)}")
        rows.append([vals.get(k, 0.0) for k in chart.names])
    if not rows:
        raise SpecError("--at: no points given")
    return np.array(rows, dtype=float)


def _sample(spec: ChartSpec, opts) -> np.ndarray:
    if opts.at:
        return _points_from_at(opts.at, spec.chart)
    Lg = spec.lagrangian_obj()
    if Lg is not None:
        return Lg.points(opts.points, opts.seed)
    return sample_points(spec.chart, opts.points, np.random.default_rng(opts.seed))


def _jsonable(v: Any):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _meta(spec: ChartSpec, opts, command: str) -> dict:
    return {"command": command, "spec": os.path.basename(spec.path), "seed": opts.seed,
            "version": __version__, "strict_paper": bool(opts.strict_paper)}


def cmd_report(spec: ChartSpec, opts) -> int:
    X = _sample(spec, opts)
    dm = spec.dmetric()
    c = dc.canonical_dconnection(dm, check=False)
    pts = []
    for k in range(X.shape[0]):
        row = X[k:k + 1]
        tors = dc.dtorsion(c, row)
        ric = dc.ricci_dtensor(c, row)
        sR, Gt, res = dc.scalar_einstein(
            dm, c, row, dc.SourceField(dm.chart, spec.source) if spec.source is not None else None)
        Om = n_curvature(dm.N, row)[0]
        entry = {
            "coords": dict(zip(spec.chart.names, row[0])),
            "N^a_i": evaluate_array(dm.N.N, row)[0],
            "Omega^a_ij": Om,
            "Omega": {f"Omega^{dm.n + a + 1}_{i + 1}{j + 1}": Om[a, i, j]
                      for a in range(dm.m) for i in range(dm.n) for j in range(dm.n)},
            "g_ij": evaluate_array(dm.g, row)[0],
            "h_ab": evaluate_array(dm.h, row)[0],
            "canonical": {k2: v[0] for k2, v in
                          dc.full_blocks(evaluate_array(c.full(), row), dm.n).items()},
            "torsion": {k2: v[0] for k2, v in tors.blocks.items()},
            "ricci": {k2: v[0] for k2, v in ric.blocks.items()},
            "scalar_curvature": sR[0],
            "einstein": Gt[0],
            "distortion": {k2: v[0] for k2, v in dc.distortion(dm, row).Z.blocks.items()},
        }
        if res is not None:
            entry["einstein_residual"] = res[0]
        Lg = spec.lagrangian_obj()
        if Lg is not None:
            S, _ = lf.semispray_and_nconnection(Lg)
            entry["semispray G^i"] = evaluate_array(S.G, row)[0]
            entry["hessian g_ij"] = evaluate_array(lf.hessian_metric(Lg), row)[0]
        pts.append(entry)
    out = {"metadata": _meta(spec, opts, "report"),
           "chart": {"n": spec.chart.n, "m": spec.chart.m, "coords": list(spec.chart.names)},
           "N": [[to_text(f, spec.chart) for f in r] for r in dm.N.N],
           "points": pts}
    path = os.path.join(opts.out, "report.json")
    fl.atomic_write_text(path, _dump(out))
    print(f"report: {len(pts)} point(s) -> {path}")
    return EXIT_OK


def run_checks(spec: ChartSpec, opts) -> CheckReport:
    X = _sample(spec, opts)
    rng = np.random.default_rng(opts.seed + 1)
    report = CheckReport()
    geometry_checks(spec.dmetric(), X, opts, report, rng)
    Lg = spec.lagrangian_obj()
    if Lg is not None:
        lagrangian_checks(Lg, X, opts, report)
    return report


def cmd_check(spec: ChartSpec, opts) -> int:
    report = run_checks(spec, opts)
    out = {"metadata": _meta(spec, opts, "check"), "points": opts.points if not opts.at
           else int(_points_from_at(opts.at, spec.chart).shape[0])}
    out.update(report.to_dict())
    path = os.path.join(opts.out, "check_report.json")
    fl.atomic_write_text(path, _dump(out))
    for e in report.entries:
        print(f"{e.status:9s} {e.name:40s} {e.max_residual:.3e} (tol {e.tol:.0e})")
    print(f"check: {out['status']} -> {path}")
    return EXIT_FAIL if report.failed else EXIT_OK


def _flow_initial(spec: ChartSpec, cfg: fl.FlowConfig):
    dm = spec.dmetric()
    block = spec.flow.get("block", "full")
    ch = spec.chart
    if not cfg.grid:
        raise SpecError(f"{_loc(spec.path, 'flow', 'grid')}: grid sizes are required")
    if block == "h":
        for f in dm.g.ravel():
            for a in range(ch.n, ch.nvars):
                if differentiate(f, a) is not ZERO:
                    raise SpecError(f"{_loc(spec.path, 'flow', 'block')}: 'h' needs g to "
                                    "depend on horizontal coordinates only")
        if len(cfg.grid) != ch.n:
            raise SpecError(f"{_loc(spec.path, 'flow', 'grid')}: need {ch.n} sizes for block 'h'")
        dom = ch.domain[:ch.n]
        if not all(p for _, _, p in dom):
            raise SpecError(f"{_loc(spec.path, 'chart', 'domain')}: flow needs periodic coordinates")
        grid = fl.FlowGrid(tuple(cfg.grid), tuple(d[0] for d in dom), tuple(d[1] for d in dom))
        return fl.state_from_fields(dm.g, grid), grid
    if block != "full":
        raise SpecError(f"{_loc(spec.path, 'flow', 'block')}: expected 'full' or 'h'")
    try:
        grid = fl.FlowGrid.from_chart(ch, cfg.grid)
    except ValueError as exc:
        raise SpecError(f"{_loc(spec.path, 'flow')}: {exc}") from exc
    return fl.state_from_fields(dm.assembled, grid), grid


def _conformal_factor(G: np.ndarray) -> np.ndarray | None:
    if G.shape[-1] != 2:
        return None
    if np.max(np.abs(G[..., 0, 1])) > 1e-14 or np.max(np.abs(G[..., 0, 0] - G[..., 1, 1])) > 1e-14:
        return None
    return 0.5 * np.log(G[..., 0, 0])


def cmd_flow(spec: ChartSpec, opts) -> int:
    if not spec.flow:
        raise SpecError(f"{spec.path}: the flow command needs a [flow] section")
    cfg = spec.flow_config()
    init, grid = _flow_initial(spec, cfg)
    try:
        cfg.check_stability(grid.spacing)
    except ValueError as exc:
        raise SpecError(f"{_loc(spec.path, 'flow', 'dt')}: {exc}") from exc
    traj = fl.evolve(init, cfg, grid)
    summary: dict = {"metadata": _meta(spec, opts, "flow"), "config": asdict(cfg),
                     "snapshots": len(traj), "tau_final": traj[-1].tau,
                     "diagnostic": traj.diagnostic}
    last = traj[-1].G
    report = CheckReport()
    summary["min_eigenvalue"] = float(np.min(np.linalg.eigvalsh(last)))
    if traj.diagnostic is None:
        Ric, R, _ = fl.grid_curvature(last, grid)
        summary["R_sup"] = float(np.max(np.abs(R)))
        u0 = _conformal_factor(init.G)
        if u0 is not None and not cfg.normalized and traj[-1].tau > 0:
            u = fl.conformal_torus_oracle(u0, [h - l for l, h in zip(grid.lo, grid.hi)],
                                          traj[-1].tau, min(cfg.dt, 1e-4))
            ref = np.exp(2 * u)
            err = float(np.max(np.abs(last[..., 0, 0] - ref)) / np.max(np.abs(ref)))
            summary["oracle_relative_error"] = err
            report.add("flow-oracle", err, int(np.prod(grid.shape)), _tol(opts, 1e-3))
    summary.update(report.to_dict())
    os.makedirs(opts.out, exist_ok=True)
    fl.write_snapshots(traj, opts.out, cfg, {"seed": opts.seed, "spec": os.path.basename(spec.path)})
    fl.atomic_write_text(os.path.join(opts.out, "flow_summary.json"), _dump(summary))
    print(f"flow: {len(traj)} snapshot(s), tau = {traj[-1].tau:.6g} -> {opts.out}")
    if traj.diagnostic is not None:
        print(f"flow: breakdown: {traj.diagnostic}", file=sys.stderr)
        return EXIT_BREAKDOWN
    return EXIT_FAIL if report.failed else EXIT_OK


def cmd_geodesic(spec: ChartSpec, opts) -> int:
    Lg = spec.lagrangian_obj()
    if Lg is None:
        raise SpecError(f"{spec.path}: the geodesic command needs a [lagrangian] section")
    n = Lg.n
    g = spec.geodesic
    if opts.at:
        z0 = _points_from_at(opts.at, spec.chart)[0, :2 * n]
    elif "x0" in g and "y0" in g:
        z0 = np.array(list(g["x0"]) + list(g["y0"]), dtype=float)
    else:
        raise SpecError(f"{_loc(spec.path, 'geodesic')}: needs x0 and y0 (or --at)")
    if z0.shape != (2 * n,):
        raise SpecError(f"{_loc(spec.path, 'geodesic')}: x0 and y0 need {n} values each")
    span = tuple(float(s) for s in g.get("span", (0.0, 1.0)))
    step = float(g.get("step", 1e-3))
    el, sp = lf.geodesics(Lg, z0, span, step)
    e_el, e_sp = lf.energy_along(Lg, el), lf.energy_along(Lg, sp)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = spec.chart.coord_names
    w.writerow(["route", "s"] + list(names[:n]) + [f"d{c}" for c in names[:n]] + ["energy"])
    for route, tr, en in (("euler-lagrange", el, e_el), ("semispray", sp, e_sp)):
        for k in range(len(tr.s)):
            w.writerow([route, repr(float(tr.s[k]))] + [repr(float(v)) for v in tr.x[k]]
                       + [repr(float(v)) for v in tr.y[k]] + [repr(float(en[k]))])
    fl.atomic_write_text(os.path.join(opts.out, "trajectory.csv"), buf.getvalue())
    report = CheckReport()
    P = len(el.s)
    report.add("geodesic-routes", np.concatenate([(el.x - sp.x).ravel(), (el.y - sp.y).ravel()]),
               P, _tol(opts, 1e-6))
    report.add("geodesic-energy", [np.ptp(e_el), np.ptp(e_sp)], P, _tol(opts, 1e-6))
    out = {"metadata": _meta(spec, opts, "geodesic"), "span": span, "step": step}
    out.update(report.to_dict())
    fl.atomic_write_text(os.path.join(opts.out, "geodesic_report.json"), _dump(out))
    print(f"geodesic: {out['status']} -> {opts.out}")
    return EXIT_FAIL if report.failed else EXIT_OK


def cmd_residual(spec: ChartSpec, opts) -> int:
    ch = spec.chart
    if "tau" not in ch.params:
        raise SpecError(f"{_loc(spec.path, 'chart', 'params')}: the residual command needs "
                        "the flow parameter 'tau'")
    Lg = spec.lagrangian_obj()
    fam = fl.lifted_family(Lg) if Lg is not None else fl.MetricFamily.from_dmetric(spec.dmetric())
    lo, hi = (float(v) for v in spec.residual.get("tau", (0.0, 0.1)))
    rng = np.random.default_rng(opts.seed)
    if opts.at:
        X = _points_from_at(opts.at, ch)
    else:
        X = (Lg.points(opts.points, opts.seed) if Lg is not None
             else sample_points(ch, opts.points, rng))
        X[:, ch.index("tau")] = rng.uniform(lo, hi, X.shape[0])
    cfg = spec.flow_config() if spec.flow else fl.FlowConfig()
    res = fl.flow_residual_family(fam, cfg, X)
    report = CheckReport()
    P = X.shape[0]
    report.add("family-residual", res["max_residual"], P, _tol(opts, 1e-8),
               reported=not spec.residual.get("solution", False))
    if "path_difference" in res:
        report.add("family-extraction", res["path_difference"], P, _tol(opts, 1e-8))
    out = {"metadata": _meta(spec, opts, "residual"), "tau_range": [lo, hi]}
    out.update(report.to_dict())
    fl.atomic_write_text(os.path.join(opts.out, "residual_report.json"), _dump(out))
    for e in report.entries:
        print(f"{e.status:9s} {e.name:40s} {e.max_residual:.3e} (tol {e.tol:.0e})")
    return EXIT_FAIL if report.failed else EXIT_OK


COMMANDS = {"report": cmd_report, "check": cmd_check, "flow": cmd_flow,
            "geodesic": cmd_geodesic, "residual": cmd_residual}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nhflow", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("spec", help="chart spec (TOML, or JSON by extension)")
    p.add_argument("--points", type=int, default=100, help="sample points (default 100)")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="numpy default_rng seed")
    p.add_argument("--tol", type=float, default=None, help="override every asserted tolerance")
    p.add_argument("--at", default=None, help='points as "x1=1,x2=2,y3=3[;...]"')
    p.add_argument("--out", default="nhflow-out", help="output directory")
    p.add_argument("--strict-paper", action="store_true",
                   help="assert the cross-checks that are only reported by default")
    p.add_argument("--version", action="version", version=f"nhflow {__version__}")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        opts = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if opts.points < 1:
        print("nhflow: --points must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = load_spec(opts.spec)
        return COMMANDS[opts.command](spec, opts)
    except SpecError as exc:
        print(f"nhflow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (fl.FlowBreakdown, DegenerateMetricError, ArithmeticError) as exc:
        print(f"nhflow: numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    except (DomainError, ValueError) as exc:
        print(f"nhflow: {opts.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
