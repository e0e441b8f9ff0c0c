import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrlstop.expressions import (
    EvalError,
    ParseError,
    eval_with_derivatives,
    parse_expression,
    time_derivative,
)


def ev(src, t=0.0, **vals):
    e = parse_expression(src)
    d = max([int(k[1:]) for k in vals if k.startswith("x")] + [e.max_space_index(), 1])
    x = np.zeros(d)
    for k, v in vals.items():
        x[int(k[1:]) - 1] = v
    return float(e(t, x))


def test_basic_arithmetic():
    assert ev("x1^2 + 1", x1=2.0) == 5.0
    assert ev("exp(0)") == 1.0
    assert ev("min(t, x1)", t=0.3, x1=0.7) == 0.3


def test_precedence_and_associativity():
    assert ev("2 + 3 * 4") == 14.0
    assert ev("2 * 3 ^ 2") == 18.0  # ^ binds tighter than *
    assert ev("-3 ^ 2") == -9.0  # ^ binds tighter than unary minus
    assert ev("2 ^ -2") == 0.25
    assert ev("2 ^ 3 ^ 2") == 512.0  # right associative
    assert ev("8 / 4 / 2") == 1.0  # left associative
    assert ev("1 - 2 - 3") == -4.0


def test_syntax_error_carries_offset():
    with pytest.raises(ParseError) as err:
        parse_expression("x1 + * 2")
    assert err.value.offset == 5


def test_unknown_identifier():
    with pytest.raises(ParseError, match="unknown identifier"):
        parse_expression("x1 + y")


def test_arity_mismatch():
    with pytest.raises(ParseError, match="expects 2"):
        parse_expression("min(x1)")
    with pytest.raises(ParseError, match="expects 1"):
        parse_expression("exp(x1, t)")


def test_domain_errors_never_silent_nan():
    with pytest.raises(EvalError):
        ev("1 / x1", x1=0.0)
    with pytest.raises(EvalError):
        ev("log(x1)", x1=-1.0)
    with pytest.raises(EvalError):
        ev("sqrt(x1)", x1=-0.5)


def test_vectorized_evaluation():
    e = parse_expression("x1^2 + x2")
    xs = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    np.testing.assert_allclose(e(0.0, xs), [1.5, 4.5, 9.5])


def test_immutability():
    e = parse_expression("x1")
    with pytest.raises(AttributeError):
        e.new_attr = 1


def test_free_variables():
    e = parse_expression("x2 * exp(t)")
    assert e.free_variables == {"t", "x2"}
    assert e.depends_on_t
    assert e.max_space_index() == 2
    assert not parse_expression("x1 + 1").depends_on_t


def test_derivative_examples():
    val, grad, _ = eval_with_derivatives(parse_expression("x1^2"), (0.0, [3.0]), order=1)
    assert val == 9.0
    assert abs(grad[0] - 6.0) < 1e-6

    val, grad, hess = eval_with_derivatives(parse_expression("1"), (0.5, [0.3]), order=2)
    assert val == 1.0
    assert abs(grad[0]) == 0.0
    assert abs(hess[0, 0]) < 1e-9

    _, _, hess = eval_with_derivatives(parse_expression("exp(-x1^2)"), (0.0, [0.0]), order=2)
    assert abs(hess[0, 0] + 2.0) < 1e-4


def test_hessian_symmetry_mixed():
    e = parse_expression("x1^2 * x2 + sin(x1 * x2)")
    _, _, hess = eval_with_derivatives(e, (0.0, [0.7, -0.4]), order=2)
    assert hess.shape == (2, 2)
    assert hess[0, 1] == hess[1, 0]
    # analytic mixed partial: 2 x1 + cos(x1 x2) - x1 x2 sin(x1 x2)
    x1, x2 = 0.7, -0.4
    exact = 2 * x1 + np.cos(x1 * x2) - x1 * x2 * np.sin(x1 * x2)
    assert abs(hess[0, 1] - exact) < 1e-5


def test_time_derivative():
    e = parse_expression("exp(-2*t) * x1")
    d = time_derivative(e, (0.3, [1.5]))
    assert abs(d + 2 * np.exp(-0.6) * 1.5) < 1e-7


_leaf = st.one_of(
    st.floats(min_value=0.1, max_value=4.0).map(lambda v: ("num", round(v, 3))),
    st.sampled_from([("var", "t"), ("var", "x1"), ("var", "x2")]),
)


def _trees(depth):
    if depth == 0:
        return _leaf
    sub = _trees(depth - 1)
    return st.one_of(
        _leaf,
        st.tuples(st.sampled_from(["+", "-", "*"]), sub, sub).map(
            lambda t: ("bin", t[0], t[1], t[2])
        ),
        sub.map(lambda a: ("neg", a)),
        st.tuples(st.sampled_from(["sin", "cos", "tanh", "exp"]), sub).map(
            lambda t: ("call", t[0], (t[1],))
        ),
        st.tuples(st.sampled_from(["min", "max"]), sub, sub).map(
            lambda t: ("call", t[0], (t[1], t[2]))
        ),
    )


def _render(node):
    kind = node[0]
    if kind == "num":
        return repr(node[1])
    if kind == "var":
        return node[1]
    if kind == "neg":
        return f"-({_render(node[1])})"
    if kind == "bin":
        return f"({_render(node[2])}) {node[1]} ({_render(node[3])})"
    return f"{node[1]}({', '.join(_render(a) for a in node[2])})"


@settings(max_examples=200, deadline=None)
@given(_trees(3), st.integers(0, 2**31 - 1))
def test_roundtrip_evaluates_identically(tree, seed):
    src = _render(tree)
    e = parse_expression(src)
    e2 = parse_expression(str(e))
    rng = np.random.default_rng(seed)
    ts = rng.uniform(0, 1, 5)
    xs = rng.uniform(-2, 2, (2, 5))
    for i in range(5):
        a = float(e(ts[i], xs[:, i]))
        b = float(e2(ts[i], xs[:, i]))
        assert a == b or (np.isnan(a) and np.isnan(b))


def test_roundtrip_thousand_points():
    e = parse_expression("exp(-x1^2) * sin(t) + max(x1, 0.5) / (1 + x1^2) - tanh(t * x1)")
    e2 = parse_expression(str(e))
    rng = np.random.default_rng(12345)
    xs = rng.uniform(-5, 5, (1, 1000))
    ts = rng.uniform(0, 2, 1000)
    for i in range(1000):
        assert float(e(ts[i], xs[:, i])) == float(e2(ts[i], xs[:, i]))
