import numpy as np
import pytest

import nhflow.dconn as dc
from nhflow.cli import obata_algebra_residual, random_dmetric
from nhflow.expr import Chart, evaluate_array, field_matrix, parse_scalar_field
from nhflow.nconn import DMetric, NConnection, anholonomy, n_curvature, sample_points

CH = Chart(2, 1)
ONE = [["1", "0"], ["0", "1"]]


def cone():
    """g = delta, h_33 = (x1)^2, N = 0."""
    return DMetric.build(CH, ONE, [["x1^2"]])


def omega_chart():
    N = NConnection(CH, field_matrix([["x1^2", "x1*y3"]], CH))
    return DMetric.build(CH, ONE, [["1 + 0.1*x2^2"]], N)


def sphere():
    return DMetric.build(CH, [["1", "0"], ["0", "sin(x1)^2"]], [["1"]])


def flat():
    return DMetric.build(CH, ONE, [["1"]])


def random_charts(count, seed=0, n=2, m=2):
    rng = np.random.default_rng(seed)
    return [random_dmetric(rng, n, m, verify_points=50) for _ in range(count)], rng


def frame_torsion_oracle(Gam, W):
    """T(e_a, e_b)^g = Gam^g_{ba} - Gam^g_{ab} - W^g_{ab}, stored at [g, a, b]."""
    return np.swapaxes(Gam, -1, -2) - Gam - W


def block_values(c, X):
    return [evaluate_array(getattr(c, k), X) for k in ("Lh", "Lv", "Ch", "Cv")]


# canonical d-connection

def test_flat_canonical_is_zero():
    c = dc.canonical_dconnection(flat())
    for B in block_values(c, np.array([[0.3, 0.1, 0.2]])):
        assert np.all(B == 0)


def test_cone_canonical_entry():
    c = dc.canonical_dconnection(cone())
    assert evaluate_array(c.Lv, np.array([[2.0, 0.0, 0.0]]))[0, 0, 0, 0] == pytest.approx(0.5)


def test_canonical_is_metric_on_random_charts():
    charts, rng = random_charts(10)
    for dm in charts:
        X = sample_points(dm.chart, 100, rng)
        c = dc.canonical_dconnection(dm, check=False)
        assert np.max(np.abs(dc.metricity(c, dm, X))) <= 1e-9


def test_canonical_hh_vv_torsion_vanishes():
    charts, rng = random_charts(3, seed=1)
    for dm in charts:
        T = dc.dtorsion(dc.canonical_dconnection(dm, check=False), sample_points(dm.chart, 30, rng))
        assert np.max(np.abs(T.blocks["T^i_jk"])) <= 1e-12
        assert np.max(np.abs(T.blocks["T^a_bc"])) <= 1e-12


# torsion

def test_flat_torsion_is_zero():
    T = dc.dtorsion(dc.canonical_dconnection(flat()), [0.1, 0.2, 0.3])
    assert all(np.all(B == 0) for B in T.blocks.values())


def test_example_torsion_equals_n_curvature():
    dm = omega_chart()
    T = dc.dtorsion(dc.canonical_dconnection(dm), [1, 2, 3])
    assert T.blocks["T^a_ji"][0, 0, 1] == pytest.approx(-2.0, abs=1e-12)
    assert np.allclose(T.blocks["T^a_ji"], n_curvature(dm.N, [1, 2, 3]), atol=1e-12)


def test_torsion_matches_frame_oracle(rng):
    dm = random_dmetric(rng, 2, 2, verify_points=50)
    c = dc.canonical_dconnection(dm, check=False)
    X = sample_points(dm.chart, 10, rng)
    ref = frame_torsion_oracle(evaluate_array(c.full(), X), anholonomy(dm.N, X))
    T = dc.dtorsion(c, X)
    assert np.allclose(T.data, ref, atol=1e-12)
    sw = np.swapaxes(ref, -1, -2)           # [g, a, b] -> T(e_b, e_a)^g
    assert np.allclose(T.blocks["T^i_jk"], sw[:, :2, :2, :2], atol=1e-12)
    assert np.allclose(T.blocks["T^i_ja"], sw[:, :2, :2, 2:], atol=1e-12)
    assert np.allclose(T.blocks["T^a_ji"], sw[:, 2:, :2, :2], atol=1e-12)
    assert np.allclose(T.blocks["T^a_bi"], -sw[:, 2:, 2:, :2], atol=1e-12)
    assert np.allclose(T.blocks["T^a_bc"], sw[:, 2:, 2:, 2:], atol=1e-12)


# curvature and Ricci

def test_zero_connection_has_zero_curvature():
    c = dc.DConnectionCoeffs.zero(CH)
    assert np.all(dc.dcurvature(c, [0.1, 0.2, 0.3]).data == 0)


def test_cone_curvature_formula_matches_commutator():
    c = dc.canonical_dconnection(cone())
    X = np.array([[0.7, 0.2, 0.4], [2.0, -1.0, 3.0]])
    Rf, Rc = dc.dcurvature(c, X, "formula"), dc.dcurvature(c, X, "commutator")
    assert np.max(np.abs(Rf.data - Rc.data)) <= 1e-8
    assert np.allclose(Rf.blocks["R^a_bjk"], Rc.blocks["R^a_bjk"], atol=1e-8)


def test_curvature_formula_matches_commutator_random():
    charts, rng = random_charts(3, seed=2)
    for dm in charts:
        c = dc.canonical_dconnection(dm, check=False)
        X = sample_points(dm.chart, 20, rng)
        assert np.max(np.abs(dc.dcurvature(c, X).data
                             - dc.dcurvature(c, X, "commutator").data)) <= 1e-8
        assert np.max(np.abs(dc.ricci_dtensor(c, X).data
                             - dc.ricci_dtensor(c, X, "commutator").data)) <= 1e-8


def test_sphere_gaussian_curvature():
    dm = sphere()
    th = 1.0
    R = dc.dcurvature(dc.canonical_dconnection(dm), [th, 0.4, 0.0]).blocks["R^i_hjk"]
    g = np.diag([1.0, np.sin(th) ** 2])
    Rl = np.einsum("as,sbcd->abcd", g, R)
    assert abs(Rl[0, 1, 0, 1]) / np.linalg.det(g) == pytest.approx(1.0, abs=1e-12)


def test_sphere_ricci_is_metric(rng):
    dm = sphere()
    X = sample_points(dm.chart, 50, rng, margin=0.3)
    X[:, 0] = rng.uniform(0.3, 2.8, 50)
    Ric = dc.ricci_dtensor(dc.canonical_dconnection(dm), X).blocks["R_ij"]
    g = evaluate_array(dm.g, X)
    assert np.max(np.abs(Ric - g)) <= 1e-9


def test_flat_ricci_zero():
    r = dc.ricci_dtensor(dc.canonical_dconnection(flat()), [0.1, 0.2, 0.3])
    assert np.all(r.data == 0)


def test_holonomic_product_has_no_mixed_ricci(rng):
    dm = DMetric.build(CH, [["2 + sin(x1)", "0.3*cos(x2)"], ["0.3*cos(x2)", "2 + cos(x1)"]],
                       [["1 + x1^2"]])
    r = dc.ricci_dtensor(dc.canonical_dconnection(dm), sample_points(CH, 20, rng))
    assert np.max(np.abs(r.blocks["R_ia"])) <= 1e-12
    assert np.max(np.abs(r.blocks["R_ai"])) <= 1e-12


def test_mixed_ricci_is_asymmetric_somewhere():
    charts, rng = random_charts(5, seed=4)
    gap = 0.0
    for dm in charts:
        r = dc.ricci_dtensor(dc.canonical_dconnection(dm, check=False),
                             sample_points(dm.chart, 20, rng))
        assert np.max(np.abs(n_curvature(dm.N, r.points))) > 0
        gap = max(gap, float(np.max(np.abs(r.blocks["R_ia"] - np.swapaxes(r.blocks["R_ai"], -1, -2)))))
    assert gap > 1e-3


# scalar curvature and Einstein tensor

def test_flat_einstein_vanishes():
    dm = flat()
    sR, G, res = dc.scalar_einstein(dm, dc.canonical_dconnection(dm), [0.1, 0.2, 0.3])
    assert sR == 0 and np.all(G == 0) and res is None


def test_product_sphere_scalar_curvature(rng):
    dm = sphere()
    X = np.column_stack([rng.uniform(0.3, 2.8, 20), rng.uniform(-3, 3, 20), rng.uniform(-3, 3, 20)])
    sR, _, _ = dc.scalar_einstein(dm, dc.canonical_dconnection(dm), X)
    assert np.max(np.abs(sR - 2)) <= 1e-9


def test_einstein_self_consistency():
    dm = sphere()
    c = dc.canonical_dconnection(dm)
    # on the unit sphere G_ij = g_ij - g_ij = 0, the fibre entry is -1
    src = dc.SourceField(CH, [["0", "0", "0"], ["0", "0", "0"], ["0", "0", "-1"]])
    _, G, res = dc.scalar_einstein(dm, c, [1.0, 0.5, 0.0], src)
    assert np.max(np.abs(res)) <= 1e-12
    assert G[2, 2] == pytest.approx(-1.0)


def test_source_must_be_symmetric():
    with pytest.raises(ValueError):
        dc.SourceField(CH, [["0", "1", "0"], ["0", "0", "0"], ["0", "0", "0"]])


# Levi-Civita and distortion

def test_constant_blocks_have_zero_levi_civita():
    dm = DMetric.build(CH, [["2", "0.5"], ["0.5", "1"]], [["3"]])
    assert np.allclose(dc.levi_civita_adapted(dm, [0.1, 0.2, 0.3]).data, 0)


def test_cone_levi_civita_mixed_block():
    lc = dc.levi_civita_adapted(cone(), [2.0, 0.0, 1.0])
    assert lc.data.shape == (1, 3, 3, 3)
    # coordinate Christoffel of dx1^2 + dx2^2 + x1^2 dy^2: Gamma^1_33 = -x1
    assert lc.data[0, 0, 2, 2] == pytest.approx(-2.0, abs=1e-12)
    assert lc.data[0, 2, 2, 0] == pytest.approx(0.5, abs=1e-12)
    assert not lc.is_dconnection(1e-6)


def test_levi_civita_routes_agree_and_are_torsion_free():
    charts, rng = random_charts(3, seed=5)
    for dm in charts:
        X = sample_points(dm.chart, 20, rng)
        a = dc.levi_civita_adapted(dm, X, "coordinate").data
        b = dc.levi_civita_adapted(dm, X, "koszul").data
        assert np.max(np.abs(a - b)) <= 1e-8
        assert np.max(np.abs(frame_torsion_oracle(a, anholonomy(dm.N, X)))) <= 1e-9
        assert np.max(np.abs(dc.metricity(dc.levi_civita_koszul(dm), dm, X))) <= 1e-9


def test_unknown_route_rejected():
    with pytest.raises(ValueError):
        dc.levi_civita_adapted(cone(), [1, 0, 0], "guess")


def test_constant_blocks_have_zero_distortion():
    dm = DMetric.build(CH, [["2", "0.5"], ["0.5", "1"]], [["3"]])
    assert np.allclose(dc.distortion(dm, [0.1, 0.2, 0.3]).Z.data, 0)


def test_cone_distortion_entry():
    rep = dc.distortion(cone(), [2.0, 0.0, 1.0])
    assert rep.Z.data[0, 2, 2] == pytest.approx(-2.0, abs=1e-12)


def test_distortion_decomposition_and_printed_blocks():
    charts, rng = random_charts(5, seed=6)
    for dm in charts:
        X = sample_points(dm.chart, 20, rng)
        rep = dc.distortion(dm, X)
        assert np.max(np.abs(rep.levi_civita - rep.canonical - rep.Z.data)) <= 1e-12
        assert np.max(np.abs(rep.Z.blocks["L^i_jk"])) <= 1e-10
        for block in dc.DISTORTION_VERIFIED:
            assert rep.agreement[dc.DISTORTION_PRINTED_NAMES[block]] <= 1e-8


def test_printed_z_ibk_misses_the_cartan_block(rng):
    dm = random_dmetric(rng, 2, 2, verify_points=50)
    X = sample_points(dm.chart, 20, rng)
    rep = dc.distortion(dm, X)
    Ch = evaluate_array(dc.canonical_dconnection(dm, check=False).Ch, X)
    fixed = rep.printed["Z^i_bk"] + np.einsum("pikb->pibk", Ch)
    assert np.max(np.abs(fixed - rep.Z.blocks["L^i_bk"])) <= 1e-10
    assert rep.agreement["Z^i_bk"] > 1e-3


# metrization

def test_kawaguchi_keeps_metric_connection():
    dm = omega_chart()
    c = dc.canonical_dconnection(dm)
    k = dc.kawaguchi_metrize(c, dm)
    X = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.2]])
    for a, b in zip(block_values(c, X), block_values(k, X)):
        assert np.allclose(a, b, atol=1e-12)


def test_kawaguchi_of_zero_connection_on_cone():
    dm = cone()
    k = dc.kawaguchi_metrize(dc.DConnectionCoeffs.zero(CH), dm)
    x1 = 1.6
    assert evaluate_array(k.Lv, np.array([[x1, 0.0, 0.0]]))[0, 0, 0, 0] == pytest.approx(1 / x1)


def _random_blocks(rng, chart, scale):
    n, m = chart.n, chart.m
    out = []
    for s in ((n, n, n), (m, m, n), (n, n, m), (m, m, m)):
        vals = np.array([f"{v:.6f}*(1 + 0.2*sin({chart.coord_names[0]}))"
                         for v in scale * rng.standard_normal(int(np.prod(s)))], dtype=object)
        out.append(field_matrix(vals.reshape(s).tolist(), chart))
    return out


def test_kawaguchi_output_is_metric_on_random_inputs():
    charts, rng = random_charts(10, seed=7)
    for dm in charts:
        bad = dc.DConnectionCoeffs.zero(dm.chart, dm.N).plus(*_random_blocks(rng, dm.chart, 0.3))
        X = sample_points(dm.chart, 100, rng)
        assert np.max(np.abs(dc.metricity(bad, dm, X))) > 1e-3
        assert np.max(np.abs(dc.metricity(dc.kawaguchi_metrize(bad, dm), dm, X))) <= 1e-9


def test_obata_identity_metric_closed_form():
    ops = dc.obata_operators(flat(), [0.1, 0.2, 0.3])
    d = np.eye(2)
    for sign, key in ((1, "h+"), (-1, "h-")):
        ref = 0.5 * (np.einsum("lk,im->likm", d, d) + sign * np.einsum("km,li->likm", d, d))
        assert np.allclose(ops[key], ref, atol=0)


def test_obata_projector_algebra(rng):
    dm = random_dmetric(rng, 2, 2, verify_points=50)
    ops = dc.obata_operators(dm, sample_points(dm.chart, 20, rng))
    assert obata_algebra_residual(ops) <= 1e-12


def test_miron_with_zero_source_is_canonical():
    dm = omega_chart()
    z = dc.DConnectionCoeffs.zero(CH)
    _, mc = dc.obata_and_miron(dm, (z.Lh, z.Lv, z.Ch, z.Cv))
    c = dc.canonical_dconnection(dm)
    X = np.array([[1.0, 2.0, 3.0]])
    for a, b in zip(block_values(c, X), block_values(mc, X)):
        assert np.allclose(a, b, atol=1e-14)


def test_miron_connections_are_metric():
    charts, rng = random_charts(3, seed=8)
    for dm in charts:
        _, mc = dc.obata_and_miron(dm, _random_blocks(rng, dm.chart, 0.5))
        assert np.max(np.abs(dc.metricity(mc, dm, sample_points(dm.chart, 50, rng)))) <= 1e-9


# Laplacians

def F(src):
    return parse_scalar_field(src, CH)


def test_laplacian_of_linear_function_vanishes():
    lap = dc.connection_laplacian("levi-civita", F("x1"), "", flat(), [0.3, 0.2, 0.1])
    assert lap.data == 0


def test_laplacian_of_quadratic():
    lap = dc.connection_laplacian("canonical", F("x1^2 + x2^2"), "", flat(), [0.3, 0.2, 0.1])
    assert lap.data == pytest.approx(4.0)


def test_laplacian_on_sphere_matches_coordinate_formula():
    # Delta cos(x1) on the round sphere (h-part) is -2 cos(x1)
    lap = dc.connection_laplacian("levi-civita", F("cos(x1)"), "", sphere(), [0.8, 0.1, 0.0])
    assert lap.data == pytest.approx(-2 * np.cos(0.8), abs=1e-12)


def test_laplacian_deformation_identity():
    charts, rng = random_charts(2, seed=9)
    for dm in charts:
        f = parse_scalar_field("sin(x1)*y3 + x2^2", dm.chart)
        out = dc.laplacian_deformation(dm, f, "", sample_points(dm.chart, 10, rng))
        assert np.max(np.abs(out["laplacian"] - out["canonical"] - out["distortion"])) <= 1e-8


def test_laplacian_rejects_bad_variance():
    with pytest.raises(ValueError):
        dc.connection_laplacian("canonical", F("x1"), "u", flat(), [0.1, 0.2, 0.3])


# curvature distortion and quadratic tensors

def test_constant_blocks_curvature_distortion_zero():
    dm = DMetric.build(CH, [["2", "0.5"], ["0.5", "1"]], [["3"]])
    cd = dc.curvature_distortion(dm, [0.1, 0.2, 0.3])
    for key in ("R_lc", "R_hat", "R_z"):
        assert np.allclose(cd[key], 0)


def test_cone_curvature_distortion_paths():
    cd = dc.curvature_distortion(cone(), np.array([[0.7, 0.1, 0.3], [2.0, 0.0, 1.0]]))
    assert cd["sc_residual"] <= 1e-10 and cd["ric_residual"] <= 1e-10
    assert np.allclose(cd["sc_lc"], 0, atol=1e-10)


def test_curvature_distortion_random():
    charts, rng = random_charts(3, seed=10)
    for dm in charts:
        cd = dc.curvature_distortion(dm, sample_points(dm.chart, 20, rng))
        assert max(cd["ric_residual"], cd["sc_residual"], cd["riemann_residual"]) <= 1e-8


def test_flat_b_tensors_vanish():
    out = dc.quadratic_b_tensors(flat(), "canonical", [0.1, 0.2, 0.3])
    for key in ("B", "B_under4", "B_under2"):
        assert np.allclose(out[key], 0)


def test_sphere_b_tensor_closed_form():
    th = 1.0
    out = dc.quadratic_b_tensors(sphere(), "levi-civita", [th, 0.3, 0.0])
    g = np.diag([1.0, np.sin(th) ** 2, 1.0])
    gi = np.linalg.inv(g)
    gh = g.copy()
    gh[2, 2] = 0.0                                   # curvature lives on the sphere factor only
    R = np.einsum("ac,bd->abcd", gh, gh) - np.einsum("ad,bc->abcd", gh, gh)
    B = np.einsum("bB,dE,abgd,ABGE->agAG", gi, gi, R, R)
    assert np.max(np.abs(out["B"] - B)) <= 1e-9
    assert np.allclose(out["B_under4"], -np.einsum("agAG->aGgA", out["B"]) + out["B"], atol=1e-12)
