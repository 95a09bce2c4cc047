import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nhflow.expr import (ZERO, ArityError, Chart, DomainError, ParseError, Point,
                         UnknownIdentifierError, differentiate, evaluate, evaluate_array,
                         evaluate_many, field_matrix, parse_scalar_field, size, sym_det,
                         sym_inverse, to_text)

CH = Chart(2, 1)


def P(src, chart=CH):
    return parse_scalar_field(src, chart)


# random smooth expressions over x1, x2, y3
_leaf = st.sampled_from(["x1", "x2", "y3", "0.5", "2", "1.25", "pi"])


def _combine(children):
    binary = st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(
        lambda t: f"({t[0]} {t[1]} {t[2]})")
    unary = st.tuples(st.sampled_from(["sin", "cos"]), children).map(lambda t: f"{t[0]}({t[1]})")
    powers = st.tuples(children, st.sampled_from(["2", "3"])).map(lambda t: f"({t[0]})^{t[1]}")
    expo = children.map(lambda c: f"exp(0.3*sin({c}))")
    return st.one_of(binary, unary, powers, expo)


expressions = st.recursive(_leaf, _combine, max_leaves=8)
points = st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3)


def _fd(f, p, k, h=1e-3):
    def at(d):
        q = list(p)
        q[k] += d
        return evaluate(f, q)
    return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)


def test_parse_product_of_power_and_coordinate():
    f = P("x1^2*y3")
    assert f.kind == "mul"
    kinds = sorted(a.kind for a in f.args)
    assert kinds == ["pow", "var"]


def test_unknown_identifier_names_token():
    with pytest.raises(UnknownIdentifierError) as info:
        P("sin(x1)+q")
    assert info.value.name == "q"
    assert (info.value.line, info.value.column) == (1, 9)


def test_arity_error():
    with pytest.raises(ArityError):
        P("sin(x1, x2)")


def test_syntax_error_reports_location():
    with pytest.raises(ParseError) as info:
        P("x1 +\n * 2")
    assert info.value.line == 2


def test_half_y_squared():
    assert evaluate(P("1/2*(y3^2)"), [0, 0, 3]) == 4.5


def test_polynomial_derivative():
    assert to_text(differentiate(P("x1^2*y3"), 2), CH) == "x1^2"


def test_constant_derivative_is_zero():
    assert differentiate(P("7"), 0) is ZERO


def test_chain_rule_value():
    d = differentiate(P("sin(x1*y3)"), 0)
    assert evaluate(d, [1, 0, 3]) == pytest.approx(3 * math.cos(3), abs=1e-12)
    assert evaluate(d, [1, 0, 3]) == pytest.approx(-2.96997, abs=1e-5)


def test_evaluation_examples():
    assert evaluate(P("x1+x2"), [1, 2, 0]) == 3
    assert evaluate(P("sqrt(x1^2+x2^2)"), [3, 4, 0]) == 5


def test_log_domain_error():
    with pytest.raises(DomainError) as info:
        evaluate(P("log(x1)"), [-1, 0, 0])
    assert "log" in str(info.value)
    assert info.value.point is not None


def test_division_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        evaluate(P("1/x1"), [0, 1, 1])


def test_fractional_power_of_negative_base():
    with pytest.raises(DomainError):
        evaluate(P("x1^(1/2)"), [-2, 0, 0])


def test_point_type_checks_length():
    with pytest.raises(ValueError):
        Point(CH, np.array([1.0, 2.0]))
    assert evaluate(P("x2*y3"), Point(CH, np.array([1.0, 2.0, 3.0]))) == 6


def test_chart_invariants():
    with pytest.raises(ValueError):
        Chart(1, 1)
    with pytest.raises(ValueError):
        Chart(2, 0)
    with pytest.raises(ValueError):
        Chart(2, 1, ("a", "a", "b"))


def test_params_are_symbols():
    ch = CH.with_params("tau")
    f = P("(1-2*tau)*x1", ch)
    assert evaluate(f, [2, 0, 0, 0.25]) == 1.0
    assert evaluate(differentiate(f, ch.index("tau")), [2, 0, 0, 0.25]) == -4.0


def test_normal_form_merges_terms():
    assert P("x1 + x1") is P("2*x1")
    assert P("x1*x2") is P("x2*x1")
    assert P("x1 - x1") is ZERO


def test_symbolic_inverse_and_determinant():
    M = field_matrix([["2+sin(x1)", "0.3*y3"], ["0.3*y3", "1+x2^2"]], CH)
    X = np.array([[0.3, 0.7, 1.1], [1.2, -0.4, 0.5]])
    Mi = evaluate_array(sym_inverse(M), X)
    Mv = evaluate_array(M, X)
    assert np.allclose(Mi @ Mv, np.eye(2), atol=1e-13)
    assert np.allclose(evaluate_array(np.array(sym_det(M)), X), np.linalg.det(Mv), atol=1e-13)


def test_evaluate_many_shares_subtrees():
    f, g = P("sin(x1)*y3"), P("sin(x1)+1")
    X = np.array([[0.5, 0.0, 2.0]])
    a, b = evaluate_many([f, g], X)
    assert a[0] == pytest.approx(2 * math.sin(0.5))
    assert b[0] == pytest.approx(math.sin(0.5) + 1)
    assert size(f) >= 3


@given(expressions, points, st.integers(0, 2))
def test_derivative_matches_finite_differences(src, p, k):
    f = P(src)
    d = differentiate(f, k)
    exact = evaluate(d, p)
    approx = _fd(f, p, k)
    assert abs(exact - approx) <= 1e-7 * max(1.0, abs(exact), abs(evaluate(f, p)))


@given(expressions, points, st.integers(0, 2), st.integers(0, 2))
def test_derivatives_commute(src, p, a, b):
    f = P(src)
    ab = evaluate(differentiate(differentiate(f, a), b), p)
    ba = evaluate(differentiate(differentiate(f, b), a), p)
    assert abs(ab - ba) <= 1e-10 * max(1.0, abs(ab))


@given(expressions, points)
def test_print_parse_round_trip(src, p):
    f = P(src)
    g = P(to_text(f, CH))
    assert evaluate(g, p) == pytest.approx(evaluate(f, p), rel=1e-12, abs=1e-12)


@given(expressions, st.integers(0, 2))
def test_differentiation_is_deterministic_and_idempotent(src, k):
    f = P(src)
    d1, d2 = differentiate(f, k), differentiate(P(src), k)
    assert d1 is d2
    text = to_text(d1, CH)
    assert to_text(P(text), CH) == text
