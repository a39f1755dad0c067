"""Immutable symbolic expression DAG with evaluation, substitution and
reverse-mode differentiation.

Expressions are built from constants, typed variables, and a fixed set of
unary/binary operators. Nodes are immutable after construction, so graphs can
be shared freely. Derivatives are produced as new symbolic expressions, which
makes second derivatives (Gauss-Newton / exact Hessians) a matter of
differentiating again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence


class ExprError(Exception):
    pass


class UnboundVariable(ExprError):
    def __init__(self, name):
        super().__init__(f"no binding for variable '{name}'")
        self.name = name


class DomainError(ExprError):
    def __init__(self, op, value):
        super().__init__(f"domain error in '{op}' for operand {value!r}")
        self.op = op
        self.value = value


class CyclicSubstitution(ExprError):
    pass


VARIABLE_KINDS = (
    "state",
    "algebraic",
    "input",
    "parameter",
    "time",
    "path",
    "noise",
    "slack",
)


@dataclass(frozen=True)
class Variable:
    """A named leaf of the expression graph.

    ``kind`` classifies the role the variable plays (state, input, ...) and is
    fixed at creation; ``index`` is the position within its kind.
    """

    name: str
    kind: str = "parameter"
    index: int = 0

    def __post_init__(self):
        if self.kind not in VARIABLE_KINDS:
            raise ValueError(f"unknown variable kind '{self.kind}'")

    def __repr__(self):
        return f"Variable({self.name!r}, {self.kind!r}, {self.index})"


UNARY_OPS = (
    "neg",
    "sin",
    "cos",
    "tan",
    "arctan",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "relu",
    "abs",
    # step(x) = 1 if x > 0 else 0; internal, used by derivative rules of
    # relu/abs/min/max (subgradient 0 at the kink).
    "step",
)

BINARY_OPS = ("add", "sub", "mul", "div", "pow", "min", "max")


class Expression:
    """Base class for expression nodes. Supports arithmetic operators."""

    __slots__ = ()

    def __add__(self, other):
        return binary("add", self, as_expr(other))

    def __radd__(self, other):
        return binary("add", as_expr(other), self)

    def __sub__(self, other):
        return binary("sub", self, as_expr(other))

    def __rsub__(self, other):
        return binary("sub", as_expr(other), self)

    def __mul__(self, other):
        return binary("mul", self, as_expr(other))

    def __rmul__(self, other):
        return binary("mul", as_expr(other), self)

    def __truediv__(self, other):
        return binary("div", self, as_expr(other))

    def __rtruediv__(self, other):
        return binary("div", as_expr(other), self)

    def __pow__(self, other):
        return binary("pow", self, as_expr(other))

    def __rpow__(self, other):
        return binary("pow", as_expr(other), self)

    def __neg__(self):
        return unary("neg", self)

    def __repr__(self):
        return f"<expr {to_string(self)}>"


class Constant(Expression):
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)


class Var(Expression):
    __slots__ = ("variable",)

    def __init__(self, variable: Variable):
        self.variable = variable


class Unary(Expression):
    __slots__ = ("op", "child")

    def __init__(self, op: str, child: Expression):
        if op not in UNARY_OPS:
            raise ValueError(f"unknown unary op '{op}'")
        self.op = op
        self.child = child


class Binary(Expression):
    __slots__ = ("op", "left", "right")

    def __init__(self, op: str, left: Expression, right: Expression):
        if op not in BINARY_OPS:
            raise ValueError(f"unknown binary op '{op}'")
        self.op = op
        self.left = left
        self.right = right


ZERO = Constant(0.0)
ONE = Constant(1.0)


def as_expr(x) -> Expression:
    if isinstance(x, Expression):
        return x
    if isinstance(x, Variable):
        return Var(x)
    if isinstance(x, (int, float)):
        return Constant(x)
    raise TypeError(f"cannot convert {type(x).__name__} to Expression")


def is_const(e: Expression, value=None) -> bool:
    if not isinstance(e, Constant):
        return False
    return value is None or e.value == value


def _apply_unary(op: str, x: float) -> float:
    if op == "neg":
        return -x
    if op == "sin":
        return math.sin(x)
    if op == "cos":
        return math.cos(x)
    if op == "tan":
        return math.tan(x)
    if op == "arctan":
        return math.atan(x)
    if op == "exp":
        return math.exp(x)
    if op == "log":
        if x <= 0.0:
            raise DomainError("log", x)
        return math.log(x)
    if op == "sqrt":
        if x < 0.0:
            raise DomainError("sqrt", x)
        return math.sqrt(x)
    if op == "tanh":
        return math.tanh(x)
    if op == "sigmoid":
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        ex = math.exp(x)
        return ex / (1.0 + ex)
    if op == "relu":
        return x if x > 0.0 else 0.0
    if op == "abs":
        return abs(x)
    if op == "step":
        return 1.0 if x > 0.0 else 0.0
    raise ValueError(op)


def _apply_binary(op: str, a: float, b: float) -> float:
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        if b == 0.0:
            raise DomainError("div", b)
        return a / b
    if op == "pow":
        if a < 0.0 and b != round(b):
            raise DomainError("pow", a)
        if a == 0.0 and b < 0.0:
            raise DomainError("pow", a)
        return a ** b
    if op == "min":
        return a if a <= b else b
    if op == "max":
        return a if a >= b else b
    raise ValueError(op)


def unary(op: str, child) -> Expression:
    child = as_expr(child)
    # constant folding
    if isinstance(child, Constant):
        return Constant(_apply_unary(op, child.value))
    if op == "neg" and isinstance(child, Unary) and child.op == "neg":
        return child.child
    return Unary(op, child)


def binary(op: str, left, right) -> Expression:
    left = as_expr(left)
    right = as_expr(right)
    if isinstance(left, Constant) and isinstance(right, Constant):
        return Constant(_apply_binary(op, left.value, right.value))
    # identity simplifications; they keep derivative graphs small
    if op == "add":
        if is_const(left, 0.0):
            return right
        if is_const(right, 0.0):
            return left
    elif op == "sub":
        if is_const(right, 0.0):
            return left
        if is_const(left, 0.0):
            return unary("neg", right)
    elif op == "mul":
        if is_const(left, 0.0) or is_const(right, 0.0):
            return ZERO
        if is_const(left, 1.0):
            return right
        if is_const(right, 1.0):
            return left
        if is_const(left, -1.0):
            return unary("neg", right)
        if is_const(right, -1.0):
            return unary("neg", left)
    elif op == "div":
        if is_const(left, 0.0) and not is_const(right, 0.0):
            return ZERO
        if is_const(right, 1.0):
            return left
    elif op == "pow":
        if is_const(right, 1.0):
            return left
        if is_const(right, 0.0):
            return ONE
    return Binary(op, left, right)


def sin(x):
    return unary("sin", x)


def cos(x):
    return unary("cos", x)


def tan(x):
    return unary("tan", x)


def arctan(x):
    return unary("arctan", x)


def exp(x):
    return unary("exp", x)


def log(x):
    return unary("log", x)


def sqrt(x):
    return unary("sqrt", x)


def tanh(x):
    return unary("tanh", x)


def sigmoid(x):
    return unary("sigmoid", x)


def relu(x):
    return unary("relu", x)


def absolute(x):
    return unary("abs", x)


def step(x):
    return unary("step", x)


def minimum(a, b):
    return binary("min", a, b)


def maximum(a, b):
    return binary("max", a, b)


def _topo_order(roots: Iterable[Expression]) -> list[Expression]:
    """Children-first topological order over the shared DAG."""
    order = []
    seen = set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        if isinstance(node, Unary):
            stack.append((node.child, False))
        elif isinstance(node, Binary):
            stack.append((node.right, False))
            stack.append((node.left, False))
    return order


def free_variables(expr: Expression) -> set[Variable]:
    out = set()
    for node in _topo_order([expr]):
        if isinstance(node, Var):
            out.add(node.variable)
    return out


def evaluate(expr: Expression, bindings: Mapping[Variable, float]) -> float:
    """Evaluate the expression at the given variable bindings.

    Raises :class:`UnboundVariable` for missing bindings and
    :class:`DomainError` for operations outside their real domain
    (division by zero, log/sqrt of non-positive/negative arguments,
    non-integer powers of negative bases).
    """
    values: dict[int, float] = {}
    for node in _topo_order([expr]):
        if isinstance(node, Constant):
            values[id(node)] = node.value
        elif isinstance(node, Var):
            try:
                values[id(node)] = float(bindings[node.variable])
            except KeyError:
                raise UnboundVariable(node.variable.name) from None
        elif isinstance(node, Unary):
            values[id(node)] = _apply_unary(node.op, values[id(node.child)])
        else:
            values[id(node)] = _apply_binary(
                node.op, values[id(node.left)], values[id(node.right)]
            )
    return values[id(expr)]


def _d_unary(op: str, x: Expression) -> Expression:
    """Symbolic derivative of a unary op w.r.t. its argument."""
    if op == "neg":
        return Constant(-1.0)
    if op == "sin":
        return cos(x)
    if op == "cos":
        return unary("neg", sin(x))
    if op == "tan":
        c = cos(x)
        return binary("div", ONE, binary("mul", c, c))
    if op == "arctan":
        return binary("div", ONE, binary("add", ONE, binary("mul", x, x)))
    if op == "exp":
        return exp(x)
    if op == "log":
        return binary("div", ONE, x)
    if op == "sqrt":
        return binary("div", Constant(0.5), sqrt(x))
    if op == "tanh":
        t = tanh(x)
        return binary("sub", ONE, binary("mul", t, t))
    if op == "sigmoid":
        s = sigmoid(x)
        return binary("mul", s, binary("sub", ONE, s))
    if op == "relu":
        return step(x)  # 0 at the kink
    if op == "abs":
        return binary("sub", step(x), step(unary("neg", x)))  # 0 at 0
    if op == "step":
        return ZERO
    raise ValueError(op)


def gradient(expr: Expression, variables: Sequence[Variable]) -> list[Expression]:
    """Reverse-mode gradient of a scalar expression as symbolic expressions."""
    order = _topo_order([expr])
    adjoint: dict[int, Expression] = {id(expr): ONE}
    for node in reversed(order):
        bar = adjoint.get(id(node))
        if bar is None:
            continue
        if isinstance(node, Unary):
            contrib = binary("mul", bar, _d_unary(node.op, node.child))
            _accumulate(adjoint, node.child, contrib)
        elif isinstance(node, Binary):
            la, ra = _d_binary(node)
            _accumulate(adjoint, node.left, binary("mul", bar, la))
            _accumulate(adjoint, node.right, binary("mul", bar, ra))
    by_var: dict[Variable, Expression] = {}
    for node in order:
        if isinstance(node, Var) and id(node) in adjoint:
            prev = by_var.get(node.variable, ZERO)
            by_var[node.variable] = binary("add", prev, adjoint[id(node)])
    return [by_var.get(v, ZERO) for v in variables]


def _accumulate(adjoint: dict, node: Expression, contrib: Expression):
    prev = adjoint.get(id(node))
    adjoint[id(node)] = contrib if prev is None else binary("add", prev, contrib)


def _d_binary(node: Binary) -> tuple[Expression, Expression]:
    op, a, b = node.op, node.left, node.right
    if op == "add":
        return ONE, ONE
    if op == "sub":
        return ONE, Constant(-1.0)
    if op == "mul":
        return b, a
    if op == "div":
        return binary("div", ONE, b), unary(
            "neg", binary("div", a, binary("mul", b, b))
        )
    if op == "pow":
        if isinstance(b, Constant):
            n = b.value
            da = binary("mul", b, binary("pow", a, Constant(n - 1.0)))
            return da, ZERO
        # general case via exp(b*log(a)); requires a > 0 at evaluation
        da = binary("mul", b, binary("pow", a, binary("sub", b, ONE)))
        db = binary("mul", node, log(a))
        return da, db
    if op == "min":
        # pick the left branch on ties
        sel = step(binary("sub", a, b))  # 1 iff a > b
        return binary("sub", ONE, sel), sel
    if op == "max":
        sel = step(binary("sub", b, a))  # 1 iff b > a
        return binary("sub", ONE, sel), sel
    raise ValueError(op)


def jacobian(
    exprs: Sequence[Expression], variables: Sequence[Variable]
) -> list[list[Expression]]:
    """Symbolic Jacobian: entry (i, j) is d exprs[i] / d variables[j]."""
    return [gradient(as_expr(e), variables) for e in exprs]


def substitute(
    expr: Expression,
    replacements: Mapping[Variable, Expression],
    check_cycles: bool = True,
) -> Expression:
    """Replace all occurrences of the given variables by expressions.

    The substitution is simultaneous (replacement expressions are not
    re-substituted). A replacement that reaches a replaced variable through
    the replacement map raises :class:`CyclicSubstitution`; internal callers
    that intend a one-pass self-referential rewrite (e.g. building a
    discrete-time step map) pass ``check_cycles=False``.
    """
    if not replacements:
        return expr
    reps = {v: as_expr(g) for v, g in replacements.items()}
    if check_cycles:
        _check_cycles(reps)
    memo: dict[int, Expression] = {}

    def rec(node: Expression) -> Expression:
        hit = memo.get(id(node))
        if hit is not None:
            return hit
        if isinstance(node, Constant):
            out = node
        elif isinstance(node, Var):
            out = reps.get(node.variable, node)
        elif isinstance(node, Unary):
            child = rec(node.child)
            out = node if child is node.child else unary(node.op, child)
        else:
            left = rec(node.left)
            right = rec(node.right)
            if left is node.left and right is node.right:
                out = node
            else:
                out = binary(node.op, left, right)
        memo[id(node)] = out
        return out

    return rec(expr)


def _check_cycles(reps: Mapping[Variable, Expression]):
    for start in reps:
        seen = set()
        stack = [start]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            g = reps.get(v)
            if g is None:
                continue
            for w in free_variables(g):
                if w == start:
                    raise CyclicSubstitution(
                        f"substitution for '{start.name}' reintroduces it"
                    )
                if w in reps:
                    stack.append(w)


# --- printing ---------------------------------------------------------------

_PREC_ATOM = 100
_PREC_POW = 30
_PREC_UNARY = 25
_PREC_MUL = 20
_PREC_ADD = 10

_FUNC_NAMES = {
    "sin": "sin",
    "cos": "cos",
    "tan": "tan",
    "arctan": "arctan",
    "exp": "exp",
    "log": "log",
    "sqrt": "sqrt",
    "tanh": "tanh",
    "sigmoid": "sigmoid",
    "relu": "relu",
    "abs": "abs",
    "step": "step",
}


def to_string(
    expr: Expression, var_format: Callable[[Variable], str] | None = None
) -> str:
    """Render an expression in the surface syntax the parser accepts.

    ``var_format`` customizes how variables print (e.g. adding ``(t)``/``(k)``
    suffixes for the equation language); default is the bare name.
    """
    fmt = var_format or (lambda v: v.name)

    def rec(node: Expression, parent_prec: int) -> str:
        if isinstance(node, Constant):
            v = node.value
            if v == int(v) and abs(v) < 1e16:
                s = str(int(v))
            else:
                s = repr(v)
            if v < 0 and parent_prec > _PREC_ADD:
                return f"({s})"
            return s
        if isinstance(node, Var):
            return fmt(node.variable)
        if isinstance(node, Unary):
            if node.op == "neg":
                inner = rec(node.child, _PREC_UNARY)
                s = f"-{inner}"
                return f"({s})" if parent_prec > _PREC_ADD else s
            return f"{_FUNC_NAMES[node.op]}({rec(node.child, 0)})"
        assert isinstance(node, Binary)
        if node.op in ("min", "max"):
            return f"{node.op}({rec(node.left, 0)}, {rec(node.right, 0)})"
        sym, prec, right_bump = {
            "add": ("+", _PREC_ADD, 0),
            "sub": ("-", _PREC_ADD, 1),
            "mul": ("*", _PREC_MUL, 0),
            "div": ("/", _PREC_MUL, 1),
            "pow": ("^", _PREC_POW, 0),
        }[node.op]
        left_prec = prec + 1 if node.op == "pow" else prec
        s = f"{rec(node.left, left_prec)}{sym}{rec(node.right, prec + right_bump)}"
        return f"({s})" if parent_prec > prec else s

    return rec(expr, 0)


# --- compilation ------------------------------------------------------------

_COMPILE_UNARY = {
    "neg": "-{0}",
    "sin": "_sin({0})",
    "cos": "_cos({0})",
    "tan": "_tan({0})",
    "arctan": "_atan({0})",
    "exp": "_exp({0})",
    "log": "_log({0})",
    "sqrt": "_sqrt({0})",
    "tanh": "_tanh({0})",
    "sigmoid": "(1.0/(1.0+_exp(-({0}))) if {0} >= 0.0 else (lambda _e: _e/(1.0+_e))(_exp({0})))",
    "relu": "({0} if {0} > 0.0 else 0.0)",
    "abs": "abs({0})",
    "step": "(1.0 if {0} > 0.0 else 0.0)",
}

_COMPILE_BINARY = {
    "add": "{0}+{1}",
    "sub": "{0}-{1}",
    "mul": "{0}*{1}",
    "div": "{0}/{1}",
    "pow": "{0}**{1}",
    "min": "({0} if {0} <= {1} else {1})",
    "max": "({0} if {0} >= {1} else {1})",
}

_COMPILE_GLOBALS = {
    "_sin": math.sin,
    "_cos": math.cos,
    "_tan": math.tan,
    "_atan": math.atan,
    "_exp": math.exp,
    "_log": math.log,
    "_sqrt": math.sqrt,
    "_tanh": math.tanh,
}


def compile_function(
    exprs: Sequence[Expression], variables: Sequence[Variable]
) -> Callable[[Sequence[float]], list[float]]:
    """Compile a list of expressions into one fast callable.

    The result maps a flat vector of values (ordered like ``variables``) to a
    list of output values. Shared subexpressions are evaluated once.
    """
    exprs = [as_expr(e) for e in exprs]
    var_slot = {v: i for i, v in enumerate(variables)}
    lines = []
    names: dict[int, str] = {}
    counter = 0
    for node in _topo_order(exprs):
        if isinstance(node, Constant):
            names[id(node)] = repr(node.value)
        elif isinstance(node, Var):
            try:
                slot = var_slot[node.variable]
            except KeyError:
                raise UnboundVariable(node.variable.name) from None
            names[id(node)] = f"_x[{slot}]"
        elif isinstance(node, Unary):
            counter += 1
            name = f"t{counter}"
            child = names[id(node.child)]
            if node.op == "sigmoid":
                # avoid triple evaluation of the child in the template
                lines.append(f"c{counter} = {child}")
                child = f"c{counter}"
            lines.append(f"{name} = " + _COMPILE_UNARY[node.op].format(child))
            names[id(node)] = name
        else:
            counter += 1
            name = f"t{counter}"
            lines.append(
                f"{name} = "
                + _COMPILE_BINARY[node.op].format(
                    names[id(node.left)], names[id(node.right)]
                )
            )
            names[id(node)] = name
    out = ", ".join(names[id(e)] for e in exprs)
    body = "\n    ".join(lines) if lines else "pass"
    src = f"def _f(_x):\n    {body}\n    return [{out}]\n"
    env = dict(_COMPILE_GLOBALS)
    exec(src, env)  # noqa: S102 - generated from a trusted expression graph
    return env["_f"]
