"""Typed context-free grammars and operator-transition probability models.

A grammar declares unit types (Energy, Angle, ...), typed production rules
over them, and which types have terminals (dataset columns and/or ephemeral
constants). It is the single authority on which expressions are dimensionally
consistent. A TransitionModel layers choice probabilities on top: an initial
distribution for the root operator and conditional parent-to-child operator
probabilities, where an explicit zero forbids the transition outright.

Both objects are immutable after construction and safe to share across
concurrent evaluators.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")
_TYPE_LINE_RE = re.compile(r'^type\s+([A-Za-z][A-Za-z0-9_]*)(?:\s+"([^"]*)")?\s*$')
_CONST_LINE_RE = re.compile(
    r"^const\s+([A-Za-z][A-Za-z0-9_]*)\s+([-+0-9.eE]+)\s+([-+0-9.eE]+)\s*$"
)
_RULE_RE = re.compile(r"^<([A-Za-z][A-Za-z0-9_]*)>\s*::=\s*(.+)$")
_INFIX_RE = re.compile(r"^<(\w+)>\s*([^\s<>]+)\s*<(\w+)>$")
_FN1_RE = re.compile(r"^([A-Za-z_]\w*)\s*\(\s*<(\w+)>\s*\)$")
_FN2_RE = re.compile(r"^([A-Za-z_]\w*)\s*\(\s*<(\w+)>\s*,\s*<(\w+)>\s*\)$")
_REF_RE = re.compile(r"^<(\w+)>$")

INFIX = "infix"
PREFIX = "prefix-function"


class GrammarError(ValueError):
    """Raised for malformed grammar or transition sources."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}: {message}" if column is None else f"line {line}, col {column}: {message}"
        super().__init__(message)


class EmptySupportError(RuntimeError):
    """No production or terminal can fill a slot: configuration error."""


@dataclass(frozen=True)
class UnitType:
    """A named physical unit type, e.g. E for energies or A for angles."""

    name: str
    description: str = ""


@dataclass(frozen=True)
class Production:
    """One typed rewrite alternative: operator, argument types, return type."""

    operator: str
    return_type: str
    arg_types: tuple[str, ...]
    display: str = INFIX

    @property
    def arity(self) -> int:
        return len(self.arg_types)

    @property
    def key(self) -> str:
        """Stable `operator:return_type` identifier used in transition files."""
        return f"{self.operator}:{self.return_type}"

    def __str__(self) -> str:
        if self.display == INFIX:
            return f"<{self.arg_types[0]}> {self.operator} <{self.arg_types[1]}>"
        args = ", ".join(f"<{t}>" for t in self.arg_types)
        return f"{self.operator}({args})"


@dataclass(frozen=True)
class TerminalSpec:
    """Leaf choices for one type: bound dataset columns and/or a constant range."""

    type: str
    base_features: tuple[str, ...] = ()
    constant_range: tuple[float, float] | None = None
    placeholder: bool = True  # parsed from <termX> but not yet bound to a schema

    @property
    def is_empty(self) -> bool:
        return not self.base_features and self.constant_range is None


@dataclass(frozen=True)
class Issue:
    """One validation finding."""

    severity: str  # "error" | "warning"
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.message}"


@dataclass(frozen=True)
class Grammar:
    """Immutable typed grammar: unit types, productions, terminals, start types."""

    types: tuple[UnitType, ...]
    productions: tuple[Production, ...]
    terminals: tuple[TerminalSpec, ...]
    start_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_by_return", None)
        object.__setattr__(self, "_term_by_type", None)
        object.__setattr__(self, "_min_heights", None)
        object.__setattr__(self, "_reach_cache", {})

    # -- indexed access -------------------------------------------------

    @property
    def type_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.types)

    def productions_returning(self, type_name: str) -> tuple[Production, ...]:
        if self._by_return is None:
            index: dict[str, list[Production]] = {}
            for p in self.productions:
                index.setdefault(p.return_type, []).append(p)
            object.__setattr__(self, "_by_return", {k: tuple(v) for k, v in index.items()})
        return self._by_return.get(type_name, ())

    def terminal_for(self, type_name: str) -> TerminalSpec | None:
        if self._term_by_type is None:
            object.__setattr__(self, "_term_by_type", {t.type: t for t in self.terminals})
        return self._term_by_type.get(type_name)

    def has_terminal(self, type_name: str, optimistic: bool = False) -> bool:
        """True if a leaf of this type can be created.

        With optimistic=True an unbound ``<termX>`` placeholder counts, which
        is the right reading before a dataset schema has been bound.
        """
        spec = self.terminal_for(type_name)
        if spec is None:
            return False
        if spec.is_empty:
            return optimistic and spec.placeholder
        return True

    def find_production(self, operator: str, arg_types: tuple[str, ...]) -> Production | None:
        for p in self.productions:
            if p.operator == operator and p.arg_types == arg_types:
                return p
        return None

    def productions_by_key(self, key: str) -> tuple[Production, ...]:
        return tuple(p for p in self.productions if p.key == key)

    # -- termination geometry -------------------------------------------

    def min_heights(self, optimistic: bool = False) -> dict[str, float]:
        """Least height of a finished tree per type (0 = a bare terminal).

        Computed by fixpoint iteration; unreachable types stay at +inf.
        """
        if self._min_heights is not None and not optimistic:
            return self._min_heights
        h = {t.name: (0.0 if self.has_terminal(t.name, optimistic) else float("inf")) for t in self.types}
        changed = True
        while changed:
            changed = False
            for p in self.productions:
                if p.return_type not in h:
                    continue
                worst = max((h.get(a, float("inf")) for a in p.arg_types), default=0.0)
                cand = 1.0 + worst
                if cand < h[p.return_type]:
                    h[p.return_type] = cand
                    changed = True
        if not optimistic:
            object.__setattr__(self, "_min_heights", h)
        return h

    def full_reach(self, depth_max: int) -> dict[tuple[str, int], bool]:
        """reach[(T, r)] is True iff T can finish with every leaf at depth exactly r."""
        cached = self._reach_cache.get(depth_max)
        if cached is not None:
            return cached
        reach: dict[tuple[str, int], bool] = {}
        for t in self.type_names:
            reach[(t, 0)] = self.has_terminal(t)
        for r in range(1, depth_max + 1):
            for t in self.type_names:
                reach[(t, r)] = any(
                    all(reach.get((a, r - 1), False) for a in p.arg_types)
                    for p in self.productions_returning(t)
                )
        self._reach_cache[depth_max] = reach
        return reach

    # -- schema binding ---------------------------------------------------

    def bind(self, schema) -> "Grammar":
        """Return a copy whose terminals carry the schema's columns of each type.

        Types with a ``<termX>`` placeholder but no matching columns and no
        constant range simply end up with no terminal leaves; termination is
        still possible through productions and is checked by validate_grammar.
        """
        cols_by_type: dict[str, list[str]] = {}
        for name, type_name in schema.feature_items():
            cols_by_type.setdefault(type_name, []).append(name)
        bound = tuple(
            replace(t, base_features=tuple(cols_by_type.get(t.type, ())), placeholder=False)
            for t in self.terminals
        )
        return replace(self, terminals=bound)


# -- parsing ---------------------------------------------------------------


def _logical_lines(text: str):
    """Yield (line_number, content) with comments stripped and continuations joined."""
    pending: str | None = None
    pending_no = 0
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw
        if not line.lstrip().startswith("type"):
            # keep '#' inside the quoted description of a type line
            if "#" in line:
                line = line.split("#", 1)[0]
        line = line.strip()
        if not line:
            continue
        if pending is not None:
            pending = f"{pending} {line}" if not line.startswith("|") else f"{pending} {line}"
        elif line.startswith("|"):
            raise GrammarError("continuation with no rule to continue", line=i)
        else:
            pending, pending_no = line, i
        if pending.endswith("|"):
            continue
        yield pending_no, pending
        pending = None
    if pending is not None:
        raise GrammarError("rule ends with a dangling '|'", line=pending_no)


def _parse_alternative(alt: str, lhs: str, line_no: int):
    """Classify one alternative; returns ('prod', Production) | ('term', type) | ('ref', type)."""
    alt = alt.strip()
    if not alt:
        raise GrammarError("empty alternative", line=line_no)
    m = _REF_RE.match(alt)
    if m:
        name = m.group(1)
        if name.startswith("term") and len(name) > 4:
            return "term", name[4:]
        return "ref", name
    m = _INFIX_RE.match(alt)
    if m:
        left, op, right = m.groups()
        return "prod", Production(op, lhs, (left, right), display=INFIX)
    m = _FN2_RE.match(alt)
    if m:
        fn, a, b = m.groups()
        return "prod", Production(fn, lhs, (a, b), display=PREFIX)
    m = _FN1_RE.match(alt)
    if m:
        fn, a = m.groups()
        return "prod", Production(fn, lhs, (a,), display=PREFIX)
    raise GrammarError(f"cannot parse alternative {alt!r}", line=line_no)


def parse_grammar(text: str) -> Grammar:
    """Parse the line-oriented BNF grammar format.

    One rule per logical line (`<T> ::= alt | alt | ...`, trailing `|`
    continues on the next line), optional `type T "description"` and
    `const T LOW HIGH` declarations, `#` comments. The `<start>` rule lists
    the admissible root types.
    """
    declared: dict[str, UnitType] = {}
    const_ranges: dict[str, tuple[float, float]] = {}
    rules: dict[str, list[tuple[str, object]]] = {}
    rule_lines: dict[str, int] = {}
    start_types: list[str] = []
    order: list[str] = []

    for line_no, line in _logical_lines(text):
        m = _TYPE_LINE_RE.match(line)
        if m:
            name, desc = m.group(1), m.group(2) or ""
            if name in declared:
                raise GrammarError(f"duplicate type declaration {name!r}", line=line_no)
            declared[name] = UnitType(name, desc)
            order.append(name)
            continue
        m = _CONST_LINE_RE.match(line)
        if m:
            name, low, high = m.group(1), float(m.group(2)), float(m.group(3))
            if high <= low:
                raise GrammarError(f"empty constant range for {name}", line=line_no)
            const_ranges[name] = (low, high)
            continue
        m = _RULE_RE.match(line)
        if m is None:
            raise GrammarError(f"cannot parse line {line!r}", line=line_no)
        lhs, rhs = m.group(1), m.group(2)
        if lhs in rules or (lhs == "start" and start_types):
            raise GrammarError(f"duplicate rule for <{lhs}>", line=line_no)
        alts = [a for a in rhs.split("|")]
        if lhs == "start":
            for alt in alts:
                kind, val = _parse_alternative(alt, lhs, line_no)
                if kind != "ref":
                    raise GrammarError("<start> alternatives must be bare <Type> references", line=line_no)
                start_types.append(val)
            continue
        rules[lhs] = [_parse_alternative(a, lhs, line_no) for a in alts]
        rule_lines[lhs] = line_no
        if lhs not in declared:
            declared.setdefault(lhs, UnitType(lhs))
            order.append(lhs)

    productions: list[Production] = []
    terminals: dict[str, TerminalSpec] = {}
    seen: set[tuple] = set()
    for lhs, alts in rules.items():
        for kind, val in alts:
            line_no = rule_lines[lhs]
            if kind == "term":
                if val != lhs:
                    raise GrammarError(f"terminal <term{val}> inside rule for <{lhs}>", line=line_no)
                if lhs in terminals:
                    raise GrammarError(f"duplicate terminal for type {lhs}", line=line_no)
                terminals[lhs] = TerminalSpec(lhs, constant_range=const_ranges.get(lhs))
            elif kind == "prod":
                p: Production = val
                sig = (p.operator, p.return_type, p.arg_types)
                if sig in seen:
                    raise GrammarError(f"duplicate production {p}", line=line_no)
                seen.add(sig)
                productions.append(p)
            else:
                raise GrammarError(f"bare <{val}> reference outside <start>", line=line_no)

    known = set(declared)
    for p in productions:
        for ref in p.arg_types:
            if ref not in known:
                raise GrammarError(f"undeclared type {ref} (referenced by {p})")
    for t in start_types:
        if t not in known:
            raise GrammarError(f"undeclared type {t} (referenced by <start>)")
    for t, rng in const_ranges.items():
        if t not in known:
            raise GrammarError(f"const declaration for undeclared type {t}")
        if t not in terminals:
            raise GrammarError(f"const declaration for type {t}, which has no <term{t}> alternative")
    if not start_types:
        raise GrammarError("grammar has no <start> rule")

    types = tuple(declared[n] for n in order)
    return Grammar(
        types=types,
        productions=tuple(productions),
        terminals=tuple(terminals.values()),
        start_types=tuple(start_types),
    )


def render_grammar(g: Grammar) -> str:
    """Render a grammar back to source text; parse_grammar round-trips it."""
    out = []
    for t in g.types:
        out.append(f'type {t.name} "{t.description}"')
    for term in g.terminals:
        if term.constant_range is not None:
            low, high = term.constant_range
            out.append(f"const {term.type} {low:g} {high:g}")
    out.append("")
    out.append("<start> ::= " + " | ".join(f"<{t}>" for t in g.start_types))
    term_types = {t.type for t in g.terminals}
    for t in g.types:
        alts = [str(p) for p in g.productions_returning(t.name)]
        if t.name in term_types:
            alts.append(f"<term{t.name}>")
        if alts:
            out.append(f"<{t.name}> ::= " + " | ".join(alts))
    return "\n".join(out) + "\n"


# -- validation --------------------------------------------------------------


def validate_grammar(g: Grammar, schema=None, depth_max: int | None = None) -> list[Issue]:
    """Check grammar invariants; returns [] iff the grammar is usable.

    With a schema, bound base features are cross-checked against the schema's
    column types. With depth_max, every start type must be able to finish
    within that many operator levels.
    """
    issues: list[Issue] = []
    names = [t.name for t in g.types]
    for n in names:
        if not _NAME_RE.match(n):
            issues.append(Issue("error", f"invalid type name {n!r}"))
    dupes = {n for n in names if names.count(n) > 1}
    for n in sorted(dupes):
        issues.append(Issue("error", f"duplicate type {n}"))

    known = set(names)
    seen_sigs: set[tuple] = set()
    for p in g.productions:
        if p.arity not in (1, 2):
            issues.append(Issue("error", f"production {p} has arity {p.arity}, expected 1 or 2"))
        for a in (p.return_type, *p.arg_types):
            if a not in known:
                issues.append(Issue("error", f"production {p} references undeclared type {a}"))
        sig = (p.operator, p.return_type, p.arg_types)
        if sig in seen_sigs:
            issues.append(Issue("error", f"duplicate production {p}"))
        seen_sigs.add(sig)
    for t in g.terminals:
        if t.type not in known:
            issues.append(Issue("error", f"terminal spec references undeclared type {t.type}"))

    optimistic = schema is None
    heights = g.min_heights(optimistic=optimistic)
    for t in names:
        reachable = _reachable_types(g)
        if t in reachable and heights.get(t, float("inf")) == float("inf"):
            issues.append(Issue("error", f"dead type {t}: no finite terminal-only tree exists"))
    for s in g.start_types:
        if s not in known:
            issues.append(Issue("error", f"start type {s} is undeclared"))
            continue
        if not g.productions_returning(s) and not g.has_terminal(s, optimistic=optimistic):
            issues.append(Issue("error", f"start type {s} has no production and no terminal"))
        if depth_max is not None and heights.get(s, float("inf")) > depth_max:
            issues.append(Issue("error", f"start type {s} cannot finish within depth {depth_max}"))

    if schema is not None:
        schema_types = dict(schema.feature_items())
        for term in g.terminals:
            for f in term.base_features:
                if f not in schema_types:
                    issues.append(Issue("error", f"terminal feature {f!r} not present in dataset schema"))
                elif schema_types[f] != term.type:
                    issues.append(
                        Issue(
                            "error",
                            f"type mismatch for column {f!r}: terminal says {term.type}, schema says {schema_types[f]}",
                        )
                    )
        for name, type_name in schema.feature_items():
            if type_name not in known:
                issues.append(Issue("warning", f"column {name!r} has type {type_name} unknown to the grammar"))
    return issues


def _reachable_types(g: Grammar) -> set[str]:
    seen: set[str] = set(g.start_types)
    frontier = list(g.start_types)
    while frontier:
        t = frontier.pop()
        for p in g.productions_returning(t):
            for a in p.arg_types:
                if a not in seen:
                    seen.add(a)
                    frontier.append(a)
    return seen


# -- transition model --------------------------------------------------------


TERMINAL = "terminal"  # sentinel kind used in child distributions


@dataclass(frozen=True)
class TransitionModel:
    """Root (init) and parent-conditional (cond) production probabilities.

    Entries are keyed by `operator:return_type` strings. Probability 0 marks a
    forbidden transition. Anything unlisted defaults to the uniform share
    1/len(allowed) within its row, and every row is renormalized over the
    grammar-allowed choices when queried.
    """

    init: dict[str, float] = field(default_factory=dict)
    cond: dict[tuple[str, str], float] = field(default_factory=dict)

    def cond_weight(self, parent_key: str, child_key: str, n_allowed: int) -> float:
        return self.cond.get((parent_key, child_key), 1.0 / n_allowed)

    def is_forbidden(self, parent_key: str, child_key: str) -> bool:
        return self.cond.get((parent_key, child_key)) == 0.0


def uniform_transitions() -> TransitionModel:
    """The model with no explicit entries: every row is uniform over allowed."""
    return TransitionModel()


def parse_transitions(text: str, g: Grammar) -> TransitionModel:
    """Parse the transitions JSON and check it against the grammar.

    Raises GrammarError on unknown production keys, probabilities outside
    [0, 1], or a row whose explicit zeros forbid every allowed child of some
    slot.
    """
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise GrammarError(f"transitions file is not valid JSON: {e}") from None
    known_keys = {p.key for p in g.productions}

    init: dict[str, float] = {}
    for entry in doc.get("init", []):
        key = f"{entry['op']}:{entry['type']}"
        if key not in known_keys:
            raise GrammarError(f"init entry references unknown production {key!r}")
        p = float(entry["p"])
        if not 0.0 <= p <= 1.0:
            raise GrammarError(f"init probability {p} for {key!r} outside [0, 1]")
        init[key] = p

    cond: dict[tuple[str, str], float] = {}
    for entry in doc.get("cond", []):
        parent, child = entry["parent"], entry["child"]
        for key in (parent, child):
            if key not in known_keys:
                raise GrammarError(f"cond entry references unknown production {key!r}")
        p = float(entry["p"])
        if not 0.0 <= p <= 1.0:
            raise GrammarError(f"cond probability {p} for ({parent!r}, {child!r}) outside [0, 1]")
        cond[(parent, child)] = p

    tm = TransitionModel(init=init, cond=cond)
    problems = validate_transitions(tm, g)
    errors = [i for i in problems if i.severity == "error"]
    if errors:
        raise GrammarError("; ".join(i.message for i in errors))
    return tm


def validate_transitions(tm: TransitionModel, g: Grammar) -> list[Issue]:
    """Check that no slot of any production has every allowed child forbidden."""
    issues: list[Issue] = []
    for parent in g.productions:
        for slot, req in enumerate(parent.arg_types):
            allowed = g.productions_returning(req)
            if not allowed:
                continue  # terminal-only type; nothing to forbid
            weights = [tm.cond_weight(parent.key, c.key, len(allowed)) for c in allowed]
            if sum(weights) == 0.0:
                issues.append(
                    Issue(
                        "error",
                        f"all children of {parent.key} slot {slot} (type {req}) are forbidden",
                    )
                )
    for t in g.start_types:
        allowed = g.productions_returning(t)
        if allowed:
            weights = [tm.init.get(p.key, 1.0 / len(allowed)) for p in allowed]
            if sum(weights) == 0.0:
                issues.append(Issue("error", f"all init choices for start type {t} are forbidden"))
    return issues


def render_transitions(tm: TransitionModel) -> str:
    """Serialize a TransitionModel back to its JSON file format."""
    doc = {
        "init": [
            {"type": key.split(":", 1)[1], "op": key.split(":", 1)[0], "p": p}
            for key, p in sorted(tm.init.items())
        ],
        "cond": [
            {"parent": parent, "child": child, "p": p}
            for (parent, child), p in sorted(tm.cond.items())
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def child_distribution(
    tm: TransitionModel,
    g: Grammar,
    parent: Production | None,
    slot: int,
    required_type: str,
    p_term: float = 0.0,
    allowed: tuple[Production, ...] | None = None,
):
    """Normalized distribution over the choices that may fill a slot.

    Returns a list of (choice, probability) pairs where choice is a Production
    or the type's TerminalSpec. Operator weights come from the transition row
    of `parent` (or from init at the root), with unlisted children given the
    uniform share before renormalization; explicit zeros are excluded from the
    support. `p_term` is the mass assigned to the terminal option when one
    exists; the caller makes it depth-dependent. `allowed` optionally narrows
    the operator candidates (e.g. to depth-feasible productions).

    Raises EmptySupportError when nothing can fill the slot.
    """
    if parent is not None and parent.arg_types[slot] != required_type:
        raise ValueError(f"slot {slot} of {parent} expects {parent.arg_types[slot]}, not {required_type}")
    ops = g.productions_returning(required_type)
    n_allowed = len(ops)
    if allowed is not None:
        ops = allowed
    if parent is None:
        weights = [tm.init.get(p.key, 1.0 / n_allowed) if n_allowed else 0.0 for p in ops]
    else:
        weights = [tm.cond_weight(parent.key, p.key, n_allowed) for p in ops]
    total = sum(weights)

    term = g.terminal_for(required_type)
    has_term = term is not None and not term.is_empty
    if total == 0.0 and n_allowed > 0 and allowed is None and not has_term:
        raise EmptySupportError(
            f"every child of {'<root>' if parent is None else parent.key} for type {required_type} is forbidden"
        )
    result: list[tuple[object, float]] = []
    if has_term and (p_term > 0.0 or total == 0.0):
        term_mass = 1.0 if total == 0.0 else min(max(p_term, 0.0), 1.0)
    else:
        term_mass = 0.0
    op_mass = 1.0 - term_mass
    if total > 0.0 and op_mass > 0.0:
        result.extend((p, op_mass * w / total) for p, w in zip(ops, weights) if w > 0.0)
    elif op_mass > 0.0 and term_mass > 0.0:
        term_mass = 1.0  # no usable operator: all mass on the terminal
    if term_mass > 0.0:
        result.append((term, term_mass))
    if not result:
        raise EmptySupportError(f"no production or terminal available for type {required_type}")
    return result


def build_universal(g: Grammar, type_name: str = "F") -> Grammar:
    """Collapse a typed grammar to a single universal type.

    Every distinct (operator, arity, display) becomes one production that
    accepts and returns the universal type; all dataset columns become
    terminals of it. This is the unconstrained-GP degradation used for
    baseline comparisons.
    """
    seen: set[tuple[str, int]] = set()
    prods: list[Production] = []
    for p in g.productions:
        sig = (p.operator, p.arity)
        if sig in seen:
            continue
        seen.add(sig)
        prods.append(Production(p.operator, type_name, (type_name,) * p.arity, display=p.display))
    term = TerminalSpec(type_name, constant_range=(0.1, 10.0))
    return Grammar(
        types=(UnitType(type_name, "universal"),),
        productions=tuple(prods),
        terminals=(term,),
        start_types=(type_name,),
    )
