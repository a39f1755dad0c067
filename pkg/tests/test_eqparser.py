import math

import pytest

from mlmpc import eqparser as ep
from mlmpc import exprgraph as eg

BIKE_TEXT = """
# ODEs
dpx/dt = v(t)*cos(phi(t) + beta)
dpy/dt = v(t)*sin(phi(t) + beta)
dv/dt = a(k)
dphi/dt = v(t)/lr*sin(beta)
# Algebraic equations
beta = arctan(lr/(lr + lf)*tan(delta(k)))
"""


def test_bike_text_classification():
    pm = ep.parse_equations(BIKE_TEXT)
    assert [name for name, _ in pm.odes] == ["px", "py", "v", "phi"]
    assert pm.algebraic_names == ["beta"]
    assert set(pm.inputs) == {"a", "delta"}
    assert set(pm.parameters) == {"lr", "lf"}
    assert not pm.uses_time


def test_single_ode_no_inputs():
    pm = ep.parse_equations("dx/dt = -x(t)")
    assert len(pm.odes) == 1
    assert pm.inputs == []
    assert pm.parameters == []
    x = pm.symbols["x"]
    assert eg.evaluate(pm.odes[0][1], {x: 2.0}) == -2.0


def test_undefined_state_reference():
    with pytest.raises(ep.UndefinedState):
        ep.parse_equations("z = x(t)+y")


def test_duplicate_definition():
    with pytest.raises(ep.DuplicateDefinition):
        ep.parse_equations("dx/dt = 1\ndx/dt = 2")


def test_unknown_function_is_parameter_error():
    # 'foo' followed by '(' but not a function: treated as a signal reference
    with pytest.raises(ep.EquationError):
        ep.parse_equations("dx/dt = foo(x(t))")


def test_syntax_error_reports_position():
    with pytest.raises(ep.EquationSyntaxError) as exc:
        ep.parse_equations("dx/dt = 1 + ")
    assert exc.value.line == 1


def test_empty_text_rejected():
    with pytest.raises(ep.EquationSyntaxError):
        ep.parse_equations("   \n  ")


def test_implicit_algebraic_rejected():
    with pytest.raises(ep.ImplicitAlgebraicSystem):
        ep.parse_equations("dx/dt = -x(t)\nz = z + x(t)")
    with pytest.raises(ep.ImplicitAlgebraicSystem):
        ep.parse_equations("dx/dt = -x(t)\na = b + 1\nb = a + 1")


def test_power_operator_and_precedence():
    pm = ep.parse_equations("dx/dt = -x(t)^2 + 2*x(t)")
    x = pm.symbols["x"]
    # -x^2 must parse as -(x^2)
    assert eg.evaluate(pm.odes[0][1], {x: 3.0}) == pytest.approx(-9.0 + 6.0)


def test_time_variable():
    pm = ep.parse_equations("dx/dt = sin(t) - x(t)")
    assert pm.uses_time
    x = pm.symbols["x"]
    t = pm.symbols["t"]
    val = eg.evaluate(pm.odes[0][1], {x: 0.0, t: math.pi / 2})
    assert val == pytest.approx(1.0)


def test_roundtrip_structural_equality():
    pm1 = ep.parse_equations(BIKE_TEXT)
    printed = ep.print_equations(pm1)
    pm2 = ep.parse_equations(printed)
    assert [n for n, _ in pm2.odes] == [n for n, _ in pm1.odes]
    assert pm2.algebraic_names == pm1.algebraic_names
    assert set(pm2.inputs) == set(pm1.inputs)
    assert set(pm2.parameters) == set(pm1.parameters)
    # evaluation equality of every equation at a random-ish point
    binding1 = _bindings(pm1, seedshift=0)
    binding2 = _bindings(pm2, seedshift=0)
    for (n1, e1), (n2, e2) in zip(pm1.odes + pm1.algebraics, pm2.odes + pm2.algebraics):
        assert n1 == n2
        assert eg.evaluate(e1, binding1) == pytest.approx(
            eg.evaluate(e2, binding2), rel=1e-12
        )


def _bindings(pm, seedshift=0):
    values = {}
    for i, (name, var) in enumerate(sorted(pm.symbols.items())):
        values[var] = 0.3 + 0.17 * (i + seedshift)
    return values


def test_categorization_order_independent():
    lines = BIKE_TEXT.strip().splitlines()
    reordered = "\n".join(lines[::-1])
    pm1 = ep.parse_equations(BIKE_TEXT)
    pm2 = ep.parse_equations(reordered)
    assert set(pm1.states) == set(pm2.states)
    assert set(pm1.inputs) == set(pm2.inputs)
    assert set(pm1.parameters) == set(pm2.parameters)
    assert set(pm1.algebraic_names) == set(pm2.algebraic_names)


def test_algebraic_order_topological():
    pm = ep.parse_equations("dx/dt = -x(t)\nc = b + 1\nb = x(t) * 2")
    assert ep.algebraic_order(pm) == ["b", "c"]
