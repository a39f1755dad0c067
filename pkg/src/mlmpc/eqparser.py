"""Parser for the line-oriented model definition language.

Grammar, per line:

* lines starting with ``#`` and blank lines are ignored
* ``d<ident>/dt = <expr>`` declares an ODE for state ``<ident>``
* ``<ident> = <expr>`` declares an algebraic variable

Inside expressions, ``name(t)`` references a continuous-time signal (a state
or an algebraic defined elsewhere in the text), ``name(k)`` references a
piecewise-constant input, bare ``t`` is the time variable, and a bare
identifier that is never defined and never suffixed ``(k)`` is a parameter.
Operators ``+ - * / ^`` follow standard precedence; ``^`` is right
associative exponentiation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import exprgraph as eg
from .exprgraph import Expression, Var, Variable


class EquationError(Exception):
    pass


class EquationSyntaxError(EquationError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column
        self.message = message


class DuplicateDefinition(EquationError):
    def __init__(self, name: str):
        super().__init__(f"'{name}' is defined more than once")
        self.name = name


class UnknownFunction(EquationError):
    def __init__(self, name: str):
        super().__init__(f"unknown function '{name}'")
        self.name = name


class UndefinedState(EquationError):
    def __init__(self, name: str):
        super().__init__(
            f"'{name}(t)' is used as a continuous signal but never defined"
        )
        self.name = name


class ImplicitAlgebraicSystem(EquationError):
    def __init__(self, names):
        super().__init__(
            "algebraic equations are cyclic (implicit system): "
            + ", ".join(sorted(names))
        )
        self.names = set(names)


_FUNCTIONS = {
    "sin",
    "cos",
    "tan",
    "arctan",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "abs",
    "sigmoid",
    "relu",
    "step",
    "min",
    "max",
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)

_ODE_RE = re.compile(r"^\s*d([A-Za-z_][A-Za-z_0-9]*)\s*/\s*dt\s*=(.*)$")
_ALG_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z_0-9]*)\s*=(.*)$")


@dataclass
class ParsedModel:
    """Classified equations and discovered variables of one equation text."""

    odes: list[tuple[str, Expression]] = field(default_factory=list)
    algebraics: list[tuple[str, Expression]] = field(default_factory=list)
    states: list[str] = field(default_factory=list)
    algebraic_names: list[str] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    parameters: list[str] = field(default_factory=list)
    uses_time: bool = False
    symbols: dict[str, Variable] = field(default_factory=dict)
    time_variable: Variable | None = None


class _Tokens:
    def __init__(self, text: str, line_no: int, offset: int):
        self.items = []
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None or m.end() == pos:
                if not text[pos:].strip():
                    break
                col = offset + pos + 1
                raise EquationSyntaxError(
                    line_no, col, f"unexpected character {text[pos].strip()!r}"
                )
            kind = m.lastgroup
            self.items.append((kind, m.group(kind), offset + m.start(kind) + 1))
            pos = m.end()
        self.pos = 0
        self.line_no = line_no
        self.end_col = offset + len(text) + 1

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise EquationSyntaxError(
                self.line_no, self.end_col, "unexpected end of expression"
            )
        self.pos += 1
        return tok

    def expect_op(self, op: str):
        tok = self.next()
        if tok[0] != "op" or tok[1] != op:
            raise EquationSyntaxError(
                self.line_no, tok[2], f"expected '{op}', got {tok[1]!r}"
            )


class _Parser:
    """Second pass: expression parsing with the definition sets known."""

    def __init__(self, states, algebraics):
        self.state_names = list(states)
        self.alg_names = list(algebraics)
        self.symbols: dict[str, Variable] = {}
        self.inputs: list[str] = []
        self.parameters: list[str] = []
        self.uses_time = False
        self.time_variable = Variable("t", "time", 0)
        for i, name in enumerate(self.state_names):
            self.symbols[name] = Variable(name, "state", i)
        for i, name in enumerate(self.alg_names):
            self.symbols[name] = Variable(name, "algebraic", i)

    def _input_var(self, name):
        if name not in self.inputs:
            self.symbols[name] = Variable(name, "input", len(self.inputs))
            self.inputs.append(name)
        return self.symbols[name]

    def _parameter_var(self, name):
        if name not in self.parameters:
            self.symbols[name] = Variable(name, "parameter", len(self.parameters))
            self.parameters.append(name)
        return self.symbols[name]

    def parse_expression(self, text: str, line_no: int, offset: int) -> Expression:
        toks = _Tokens(text, line_no, offset)
        expr = self._additive(toks)
        tok = toks.peek()
        if tok is not None:
            raise EquationSyntaxError(line_no, tok[2], f"unexpected {tok[1]!r}")
        return expr

    def _additive(self, toks):
        expr = self._multiplicative(toks)
        while True:
            tok = toks.peek()
            if tok and tok[0] == "op" and tok[1] in "+-":
                toks.next()
                rhs = self._multiplicative(toks)
                expr = expr + rhs if tok[1] == "+" else expr - rhs
            else:
                return expr

    def _multiplicative(self, toks):
        expr = self._unary(toks)
        while True:
            tok = toks.peek()
            if tok and tok[0] == "op" and tok[1] in "*/":
                toks.next()
                rhs = self._unary(toks)
                expr = expr * rhs if tok[1] == "*" else expr / rhs
            else:
                return expr

    def _unary(self, toks):
        tok = toks.peek()
        if tok and tok[0] == "op" and tok[1] == "-":
            toks.next()
            return -self._unary(toks)
        if tok and tok[0] == "op" and tok[1] == "+":
            toks.next()
            return self._unary(toks)
        return self._power(toks)

    def _power(self, toks):
        base = self._primary(toks)
        tok = toks.peek()
        if tok and tok[0] == "op" and tok[1] == "^":
            toks.next()
            return base ** self._unary(toks)
        return base

    def _primary(self, toks):
        kind, text, col = toks.next()
        if kind == "num":
            return eg.Constant(float(text))
        if kind == "op" and text == "(":
            inner = self._additive(toks)
            toks.expect_op(")")
            return inner
        if kind == "ident":
            nxt = toks.peek()
            if nxt and nxt[0] == "op" and nxt[1] == "(":
                if text in _FUNCTIONS:
                    return self._call(text, toks)
                return self._signal(text, toks, col)
            return self._bare(text, col, toks.line_no)
        raise EquationSyntaxError(toks.line_no, col, f"unexpected {text!r}")

    def _call(self, name, toks):
        toks.expect_op("(")
        args = [self._additive(toks)]
        while True:
            tok = toks.peek()
            if tok and tok[0] == "op" and tok[1] == ",":
                toks.next()
                args.append(self._additive(toks))
            else:
                break
        toks.expect_op(")")
        if name in ("min", "max"):
            if len(args) != 2:
                raise EquationSyntaxError(
                    toks.line_no, toks.end_col, f"{name} takes two arguments"
                )
            return eg.binary(name, args[0], args[1])
        if len(args) != 1:
            raise EquationSyntaxError(
                toks.line_no, toks.end_col, f"{name} takes one argument"
            )
        op = "arctan" if name == "arctan" else name
        return eg.unary(op, args[0])

    def _signal(self, name, toks, col):
        toks.expect_op("(")
        kind_tok = toks.next()
        toks.expect_op(")")
        suffix = kind_tok[1]
        if suffix == "t":
            if name in self.symbols and self.symbols[name].kind in (
                "state",
                "algebraic",
            ):
                return Var(self.symbols[name])
            raise UndefinedState(name)
        if suffix == "k":
            if name in self.symbols and self.symbols[name].kind not in ("input",):
                raise EquationSyntaxError(
                    toks.line_no, col, f"'{name}' is not an input"
                )
            return Var(self._input_var(name))
        raise EquationSyntaxError(
            toks.line_no, kind_tok[2], f"expected 't' or 'k', got {suffix!r}"
        )

    def _bare(self, name, col, line_no):
        if name == "t" and "t" not in self.symbols:
            self.uses_time = True
            return Var(self.time_variable)
        if name in self.symbols:
            return Var(self.symbols[name])
        if name in _FUNCTIONS:
            raise EquationSyntaxError(
                line_no, col, f"function '{name}' used without arguments"
            )
        return Var(self._parameter_var(name))


def _split_lines(text: str):
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield line_no, raw


def parse_equations(text: str) -> ParsedModel:
    """Parse equation text into a classified :class:`ParsedModel`."""
    if not text or not text.strip():
        raise EquationSyntaxError(1, 1, "empty equation text")

    # first pass: collect definitions
    ode_lines = []
    alg_lines = []
    defined = set()
    for line_no, raw in _split_lines(text):
        m = _ODE_RE.match(raw)
        if m:
            name = m.group(1)
            if name in defined:
                raise DuplicateDefinition(name)
            defined.add(name)
            ode_lines.append((line_no, name, m.group(2), m.end(1)))
            continue
        m = _ALG_RE.match(raw)
        if m:
            name = m.group(1)
            if name in defined:
                raise DuplicateDefinition(name)
            defined.add(name)
            alg_lines.append((line_no, name, m.group(2), m.end(1)))
            continue
        raise EquationSyntaxError(line_no, 1, f"cannot parse line: {raw.strip()!r}")

    states = [name for _, name, _, _ in ode_lines]
    algebraics = [name for _, name, _, _ in alg_lines]
    parser = _Parser(states, algebraics)

    model = ParsedModel(states=states, algebraic_names=algebraics)
    for line_no, name, rhs, eq_col in ode_lines:
        expr = parser.parse_expression(rhs, line_no, eq_col)
        model.odes.append((name, expr))
    for line_no, name, rhs, eq_col in alg_lines:
        expr = parser.parse_expression(rhs, line_no, eq_col)
        model.algebraics.append((name, expr))

    _check_algebraic_cycles(model)

    model.inputs = parser.inputs
    model.parameters = parser.parameters
    model.uses_time = parser.uses_time
    model.symbols = dict(parser.symbols)
    if parser.uses_time:
        model.symbols["t"] = parser.time_variable
        model.time_variable = parser.time_variable
    return model


def _check_algebraic_cycles(model: ParsedModel):
    alg_set = set(model.algebraic_names)
    deps = {}
    for name, expr in model.algebraics:
        deps[name] = {
            v.name for v in eg.free_variables(expr) if v.name in alg_set
        }
        if name in deps[name]:
            raise ImplicitAlgebraicSystem([name])
    # Kahn's algorithm; leftover nodes form a cycle
    remaining = dict(deps)
    progress = True
    while progress and remaining:
        progress = False
        for name in list(remaining):
            if not (remaining[name] & set(remaining)):
                del remaining[name]
                progress = True
    if remaining:
        raise ImplicitAlgebraicSystem(remaining)


def algebraic_order(model: ParsedModel) -> list[str]:
    """Topological order of the explicit algebraic assignments."""
    alg_set = set(model.algebraic_names)
    exprs = dict(model.algebraics)
    deps = {
        name: {v.name for v in eg.free_variables(exprs[name]) if v.name in alg_set}
        for name in model.algebraic_names
    }
    order = []
    placed = set()
    while len(order) < len(deps):
        advanced = False
        for name in model.algebraic_names:
            if name in placed:
                continue
            if deps[name] <= placed:
                order.append(name)
                placed.add(name)
                advanced = True
        if not advanced:
            raise ImplicitAlgebraicSystem(set(deps) - placed)
    return order


def _equation_var_format(v: Variable) -> str:
    if v.kind == "state":
        return f"{v.name}(t)"
    if v.kind == "input":
        return f"{v.name}(k)"
    if v.kind == "time":
        return "t"
    return v.name


def print_equations(model: ParsedModel) -> str:
    """Render a ParsedModel back to equation text accepted by the parser."""
    lines = []
    for name, expr in model.odes:
        lines.append(f"d{name}/dt = " + eg.to_string(expr, _equation_var_format))
    for name, expr in model.algebraics:
        lines.append(f"{name} = " + eg.to_string(expr, _equation_var_format))
    return "\n".join(lines) + "\n"
