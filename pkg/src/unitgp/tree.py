"""Typed expression trees: sampling, type checking, evaluation, rendering.

A tree node is an operator (one grammar production), a dataset feature, or a
frozen constant. Every node carries `best_gain`: the best fitness gain any
individual containing this node object (or a clone of it) has achieved, used
to bias mutation and crossover point selection toward unproven material.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .grammar import (
    EmptySupportError,
    Grammar,
    Production,
    TerminalSpec,
    TransitionModel,
    child_distribution,
)

BINARY_OPS = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
}
UNARY_OPS = {
    "Sqrt": np.sqrt,
    "Square": np.square,
    "Cos": np.cos,
    "Sin": np.sin,
    "Tan": np.tan,
    "Acos": np.arccos,
    "Asin": np.arcsin,
    "Atan": np.arctan,
    "Exp": np.exp,
    "Log": np.log,
    "Abs": np.abs,
    "Neg": np.negative,
}

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}
_ATOM = 9


class SamplingError(RuntimeError):
    """Tree generation could not satisfy the depth constraints."""


class ExpressionError(ValueError):
    """Raised by parse_expression on syntax or type errors."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class Node:
    """One tree node; exactly one of op / feature / value is set."""

    __slots__ = ("op", "feature", "value", "type", "children", "best_gain")

    def __init__(self, *, op=None, feature=None, value=None, type="", children=None, best_gain=0.0):
        self.op: Production | None = op
        self.feature: str | None = feature
        self.value: float | None = value
        self.type: str = type
        self.children: list[Node] = children if children is not None else []
        self.best_gain: float = best_gain

    @property
    def is_operator(self) -> bool:
        return self.op is not None

    @property
    def is_feature(self) -> bool:
        return self.feature is not None

    @property
    def is_constant(self) -> bool:
        return self.value is not None

    def clone(self) -> "Node":
        return Node(
            op=self.op,
            feature=self.feature,
            value=self.value,
            type=self.type,
            children=[c.clone() for c in self.children],
            best_gain=self.best_gain,
        )

    def height(self) -> int:
        if not self.is_operator:
            return 0
        return 1 + max(c.height() for c in self.children)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def __repr__(self) -> str:
        if self.is_operator:
            return f"Node({self.op.key}, {len(self.children)} children)"
        if self.is_feature:
            return f"Node({self.feature}:{self.type})"
        return f"Node({self.value}:{self.type})"


def feature_node(name: str, type_name: str) -> Node:
    return Node(feature=name, type=type_name)


def constant_node(value: float, type_name: str) -> Node:
    return Node(value=float(value), type=type_name)


def operator_node(prod: Production, children: list[Node]) -> Node:
    return Node(op=prod, type=prod.return_type, children=children)


@dataclass
class ExprTree:
    """A typed expression tree with the unit type of its root."""

    root: Node
    return_type: str

    def height(self) -> int:
        return self.root.height()

    def size(self) -> int:
        return self.root.size()

    def clone(self) -> "ExprTree":
        return ExprTree(self.root.clone(), self.return_type)

    def nodes(self) -> list[Node]:
        out: list[Node] = []
        stack = [self.root]
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(reversed(n.children))
        return out

    def nodes_with_context(self):
        """Preorder list of (node, parent, slot, depth); depth 0 at the root."""
        out = []
        stack = [(self.root, None, 0, 0)]
        while stack:
            node, parent, slot, depth = stack.pop()
            out.append((node, parent, slot, depth))
            for i in reversed(range(len(node.children))):
                stack.append((node.children[i], node, i, depth + 1))
        return out


@dataclass(frozen=True)
class TypeViolation:
    """First type inconsistency found, with the path of child indices to it."""

    path: tuple[int, ...]
    message: str

    def __str__(self) -> str:
        where = "/".join(map(str, self.path)) or "root"
        return f"at {where}: {self.message}"


def type_check(tree: ExprTree, g: Grammar) -> TypeViolation | None:
    """None iff every node's children match its production's argument types."""
    known = set(g.type_names)

    def walk(node: Node, path: tuple[int, ...]) -> TypeViolation | None:
        if node.type not in known:
            return TypeViolation(path, f"unknown type {node.type!r}")
        if node.is_operator:
            prod = node.op
            if node.type != prod.return_type:
                return TypeViolation(path, f"node typed {node.type} but {prod.key} returns {prod.return_type}")
            if len(node.children) != prod.arity:
                return TypeViolation(path, f"{prod.key} expects {prod.arity} children, has {len(node.children)}")
            for i, (child, want) in enumerate(zip(node.children, prod.arg_types)):
                if child.type != want:
                    return TypeViolation(path + (i,), f"slot {i} of {prod.key} expects {want}, got {child.type}")
                v = walk(child, path + (i,))
                if v is not None:
                    return v
            return None
        if node.children:
            return TypeViolation(path, "leaf node has children")
        if node.is_feature:
            spec = g.terminal_for(node.type)
            if spec is None:
                return TypeViolation(path, f"type {node.type} has no terminals")
            if not spec.placeholder and node.feature not in spec.base_features:
                return TypeViolation(path, f"unknown feature {node.feature!r} for type {node.type}")
        return None

    v = walk(tree.root, ())
    if v is not None:
        return v
    if tree.root.type != tree.return_type:
        return TypeViolation((), f"tree declares {tree.return_type} but root is {tree.root.type}")
    return None


# -- sampling ----------------------------------------------------------------


def _weighted_pick(rng, items, weights):
    total = sum(weights)
    r = rng.random() * total
    acc = 0.0
    for item, w in zip(items, weights):
        acc += w
        if r < acc:
            return item
    return items[-1]


def _make_leaf(spec: TerminalSpec, rng) -> Node:
    options = len(spec.base_features) + (1 if spec.constant_range is not None else 0)
    if options == 0:
        raise SamplingError(f"no terminal available for type {spec.type}")
    idx = int(rng.integers(options))
    if idx < len(spec.base_features):
        return feature_node(spec.base_features[idx], spec.type)
    low, high = spec.constant_range
    value = float(rng.uniform(low, high))
    # freeze at 6 significant digits so rendering round-trips exactly
    return constant_node(float(f"{value:.6g}"), spec.type)


def _grow_node(g, tm, rng, parent, slot, req_type, depth, target, method, reach):
    """Fill one slot: the node being created has `depth` operator ancestors."""
    budget = target - depth
    h = g.min_heights()
    feasible = tuple(
        p
        for p in g.productions_returning(req_type)
        if budget >= 1 and all(h.get(a, float("inf")) <= budget - 1 for a in p.arg_types)
    )
    if method == "full" and feasible and reach is not None:
        strict = tuple(p for p in feasible if all(reach.get((a, budget - 1), False) for a in p.arg_types))
        if strict:
            feasible = strict
    if method == "full":
        p_term = 0.0 if feasible else 1.0
    else:
        p_term = 1.0 if budget <= 0 else depth / target
    if not feasible:
        p_term = 1.0
    dist = child_distribution(tm, g, parent, slot, req_type, p_term=p_term, allowed=feasible)
    items = [c for c, _ in dist]
    probs = [p for _, p in dist]
    choice = _weighted_pick(rng, items, probs)
    if isinstance(choice, TerminalSpec):
        return _make_leaf(choice, rng)
    prod: Production = choice
    children = [
        _grow_node(g, tm, rng, prod, i, arg, depth + 1, target, method, reach)
        for i, arg in enumerate(prod.arg_types)
    ]
    return operator_node(prod, children)


def _draw_root(g, tm, rng, types, target, method, reach):
    h = g.min_heights()
    pairs = [(t, p) for t in types for p in g.productions_returning(t)]
    if not pairs:
        raise EmptySupportError(f"no production returns any of {types}")
    n_allowed = len(pairs)
    feasible = [(t, p) for t, p in pairs if all(h.get(a, float("inf")) <= target - 1 for a in p.arg_types)]
    if method == "full" and reach is not None:
        strict = [(t, p) for t, p in feasible if all(reach.get((a, target - 1), False) for a in p.arg_types)]
        if strict:
            feasible = strict
    if not feasible:
        raise EmptySupportError(f"no production for {types} fits within depth {target}")
    weights = [tm.init.get(p.key, 1.0 / n_allowed) for _, p in feasible]
    if sum(weights) == 0.0:
        raise EmptySupportError(f"all init choices for {types} are forbidden")
    items = [fp for fp, w in zip(feasible, weights) if w > 0.0]
    probs = [w for w in weights if w > 0.0]
    return _weighted_pick(rng, items, probs)


def sample_tree(
    g: Grammar,
    tm: TransitionModel,
    rng,
    method: str = "grow",
    depth_min: int = 2,
    depth_max: int = 8,
    forced_type: str | None = None,
    max_tries: int = 500,
) -> ExprTree:
    """Sample a typed tree whose height lands in [depth_min, depth_max].

    The root type and operator are drawn from the model's init distribution
    (restricted to forced_type when given); the root is always an operator.
    `full` places every leaf at the drawn target depth when the grammar
    permits; `grow` lets leaves appear early with probability depth/target.
    """
    if depth_min < 1 or depth_max < depth_min:
        raise ValueError("need 1 <= depth_min <= depth_max")
    types = (forced_type,) if forced_type is not None else g.start_types
    reach = g.full_reach(depth_max) if method == "full" else None
    for _ in range(max_tries):
        target = int(rng.integers(depth_min, depth_max + 1))
        root_type, prod = _draw_root(g, tm, rng, types, target, method, reach)
        children = [
            _grow_node(g, tm, rng, prod, i, arg, 1, target, method, reach)
            for i, arg in enumerate(prod.arg_types)
        ]
        tree = ExprTree(operator_node(prod, children), root_type)
        if tree.height() >= depth_min:
            return tree
    raise SamplingError(f"could not reach height >= {depth_min} in {max_tries} tries")


def sample_subtree(
    g: Grammar,
    tm: TransitionModel,
    rng,
    req_type: str,
    parent: Production | None,
    slot: int,
    target_height: int,
) -> Node:
    """Sample a replacement subtree of at most target_height operator levels.

    Transition probabilities are respected at the connection point (`parent`,
    `slot`) and inside the new material. target_height 0 yields a bare leaf.
    """
    h = g.min_heights()
    target = max(int(target_height), int(h.get(req_type, 0)))
    if target == 0:
        spec = g.terminal_for(req_type)
        if spec is not None and not spec.is_empty:
            return _make_leaf(spec, rng)
        target = 1
    return _grow_node(g, tm, rng, parent, slot, req_type, 0, target, "grow", None)


# -- gain bookkeeping ---------------------------------------------------------


def record_gain(tree: ExprTree, gain: float) -> None:
    """Raise every node's best_gain to at least `gain` (never lowers it)."""
    for node in tree.nodes():
        if gain > node.best_gain:
            node.best_gain = gain


def node_weights(tree: ExprTree, floor: float) -> np.ndarray:
    """Selection weights per preorder node: worst gain gets the most weight.

    weight_i is proportional to (max_gain - gain_i) + floor, so even the best
    node keeps a floor's worth of probability.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    gains = np.array([n.best_gain for n in tree.nodes()], dtype=float)
    w = (gains.max() - gains) + floor
    return w / w.sum()


# -- evaluation ---------------------------------------------------------------


def evaluate(tree: ExprTree, data) -> np.ndarray:
    """Evaluate the tree per row; NaN marks a missing result.

    Division by zero and any non-finite intermediate (overflow, sqrt of a
    negative, acos/asin outside [-1, 1]) turn that row's value into missing,
    and missing operands propagate upward.
    """
    get = data.column if hasattr(data, "column") else data.__getitem__
    n_rows = data.row_count if hasattr(data, "row_count") else None

    for node in tree.nodes():
        if node.is_feature:
            try:
                col = get(node.feature)
            except KeyError:
                raise KeyError(f"unknown column {node.feature!r}") from None
            if n_rows is None:
                n_rows = len(col)
    if n_rows is None:
        raise ValueError("cannot evaluate a constant tree without a row count")

    def ev(node: Node) -> np.ndarray:
        if node.is_feature:
            return np.asarray(get(node.feature), dtype=np.float64)
        if node.is_constant:
            return np.full(n_rows, node.value, dtype=np.float64)
        op = node.op.operator
        with np.errstate(all="ignore"):
            if node.op.arity == 2:
                fn = BINARY_OPS.get(op)
                if fn is None:
                    raise ValueError(f"operator {op!r} has no numeric implementation")
                out = fn(ev(node.children[0]), ev(node.children[1]))
            else:
                fn = UNARY_OPS.get(op)
                if fn is None:
                    raise ValueError(f"operator {op!r} has no numeric implementation")
                out = fn(ev(node.children[0]))
        out = np.asarray(out, dtype=np.float64)
        out[~np.isfinite(out)] = np.nan
        return out

    return ev(tree.root)


def unsupported_operators(g: Grammar) -> list[str]:
    """Grammar operators the evaluator cannot compute."""
    bad = []
    for p in g.productions:
        table = BINARY_OPS if p.arity == 2 else UNARY_OPS
        if p.operator not in table:
            bad.append(p.key)
    return sorted(set(bad))


# -- rendering ----------------------------------------------------------------


def format_constant(v: float) -> str:
    """Six significant digits when exact, shortest exact form otherwise."""
    s = f"{v:.6g}"
    return s if float(s) == v else repr(v)


def render_infix(tree: ExprTree) -> str:
    """Deterministic formula text; parse_expression accepts the same syntax."""

    def render(node: Node) -> tuple[str, int]:
        if node.is_feature:
            return node.feature, _ATOM
        if node.is_constant:
            s = format_constant(node.value)
            return (f"({s})", _ATOM) if s.startswith("-") else (s, _ATOM)
        prod = node.op
        if prod.display == "infix":
            prec = _PRECEDENCE.get(prod.operator, 1)
            ls, lp = render(node.children[0])
            rs, rp = render(node.children[1])
            if lp < prec:
                ls = f"({ls})"
            # parenthesize an equal-precedence right operand: evaluation is
            # left-to-right, so "a - (b - c)" must not reparse as "(a - b) - c"
            if rp <= prec:
                rs = f"({rs})"
            return f"{ls} {prod.operator} {rs}", prec
        args = ", ".join(render(c)[0] for c in node.children)
        return f"{prod.operator}({args})", _ATOM

    return render(tree.root)[0]


# -- parsing ------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_]\w*)"
    r"|(?P<punct>[()+\-*/,^]))"
)


def _tokenize(s: str):
    tokens = []
    pos = 0
    while pos < len(s):
        m = _TOKEN_RE.match(s, pos)
        if m is None or m.end() == pos:
            if s[pos:].strip():
                raise ExpressionError(f"unexpected character {s[pos]!r}", position=pos)
            break
        pos = m.end()
        for kind in ("num", "name", "punct"):
            if m.group(kind) is not None:
                tokens.append((kind, m.group(kind), m.start(kind)))
                break
    tokens.append(("end", "", len(s)))
    return tokens


class _RawNode:
    __slots__ = ("kind", "op", "name", "value", "children", "pos", "candidates")

    def __init__(self, kind, pos, op=None, name=None, value=None, children=()):
        self.kind = kind  # "op" | "feature" | "const"
        self.op = op
        self.name = name
        self.value = value
        self.children = list(children)
        self.pos = pos
        self.candidates: dict[str, Production] | None = None


def parse_expression(s: str, g: Grammar, schema=None) -> ExprTree:
    """Parse the render_infix surface syntax into a type-checked tree.

    Feature types come from the schema when given, otherwise from the
    grammar's bound terminals. Constants take the unit type their slot
    requires; an expression whose typing stays ambiguous is rejected.
    """
    tokens = _tokenize(s)
    cursor = [0]

    def peek():
        return tokens[cursor[0]]

    def advance():
        tok = tokens[cursor[0]]
        cursor[0] += 1
        return tok

    def expect(value):
        kind, text, pos = advance()
        if text != value:
            raise ExpressionError(f"expected {value!r}, found {text!r}", position=pos)

    def parse_expr(min_prec=1) -> _RawNode:
        left = parse_primary()
        while True:
            kind, text, pos = peek()
            prec = _PRECEDENCE.get(text)
            if kind != "punct" or prec is None or prec < min_prec:
                return left
            advance()
            right = parse_expr(prec + 1)
            left = _RawNode("op", pos, op=text, children=(left, right))

    def parse_primary() -> _RawNode:
        kind, text, pos = advance()
        if text == "(":
            inner = parse_expr()
            expect(")")
            return inner
        if kind == "num":
            return _RawNode("const", pos, value=float(text))
        if text == "-":
            nk, nt, npos = peek()
            if nk == "num":
                advance()
                return _RawNode("const", pos, value=-float(nt))
            raise ExpressionError("unary '-' is only allowed before a number", position=pos)
        if kind == "name":
            if peek()[1] == "(":
                advance()
                args = [parse_expr()]
                while peek()[1] == ",":
                    advance()
                    args.append(parse_expr())
                expect(")")
                return _RawNode("op", pos, op=text, children=args)
            return _RawNode("feature", pos, name=text)
        raise ExpressionError(f"unexpected token {text!r}", position=pos)

    raw = parse_expr()
    end_kind, end_text, end_pos = advance()
    if end_kind != "end":
        raise ExpressionError(f"trailing input {end_text!r}", position=end_pos)

    feature_types: dict[str, str] = {}
    if schema is not None:
        feature_types.update(schema.feature_items())
    else:
        for spec in g.terminals:
            for f in spec.base_features:
                feature_types[f] = spec.type

    def infer(node: _RawNode) -> set[str]:
        """Candidate unit types for a raw node; '*' in a child set is a wildcard."""
        if node.kind == "const":
            return {"*"}
        if node.kind == "feature":
            t = feature_types.get(node.name)
            if t is None:
                raise ExpressionError(f"unknown feature {node.name!r}", position=node.pos)
            return {t}
        child_sets = [infer(c) for c in node.children]
        node.candidates = {}
        for p in g.productions:
            if p.operator != node.op or p.arity != len(node.children):
                continue
            if all(a in cs or "*" in cs for a, cs in zip(p.arg_types, child_sets)):
                node.candidates.setdefault(p.return_type, p)
        if not node.candidates:
            raise ExpressionError(
                f"no production of {node.op!r} accepts the argument types", position=node.pos
            )
        return set(node.candidates)

    root_types = infer(raw)
    root_types.discard("*")
    if not root_types:
        raise ExpressionError("expression is all constants; its unit type is ambiguous", position=raw.pos)
    if len(root_types) > 1:
        raise ExpressionError(f"ambiguous unit type: could be any of {sorted(root_types)}", position=raw.pos)
    root_type = root_types.pop()

    def build(node: _RawNode, want: str) -> Node:
        if node.kind == "const":
            return constant_node(node.value, want)
        if node.kind == "feature":
            return feature_node(node.name, feature_types[node.name])
        prod = node.candidates.get(want)
        if prod is None:
            raise ExpressionError(f"{node.op!r} cannot return type {want}", position=node.pos)
        return operator_node(prod, [build(c, a) for c, a in zip(node.children, prod.arg_types)])

    tree = ExprTree(build(raw, root_type), root_type)
    violation = type_check(tree, g)
    if violation is not None:
        raise ExpressionError(f"type error: {violation}")
    return tree
