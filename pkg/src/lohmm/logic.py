"""First-order terms, atoms, substitutions, and typed signatures.

The representation follows Prolog's lexical convention: constants and
functors are lowercase identifiers, variables start with an uppercase
letter, and names starting with an underscore are anonymous (every
textual occurrence is a globally fresh variable).

Terms are immutable. A substitution maps variables to terms and is
applied simultaneously, so ``apply(p(X, Y), {X/Y, Y/X})`` swaps the two
arguments rather than collapsing them.

Signatures type every predicate argument position with a finite domain
of constants. A variable takes the domain of the argument position it
occupies, looking through compound terms: in ``s(f(Z))`` the variable
``Z`` draws from the domain declared for the first argument of ``s/1``.
"""

from __future__ import annotations

import itertools
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

from .errors import (
    DomainMismatch,
    LohmmError,
    ParseError,
    SharedVariableConflict,
    UndeclaredPredicate,
)

__all__ = [
    "Variable",
    "Constant",
    "Compound",
    "Term",
    "Atom",
    "START",
    "Substitution",
    "EMPTY_SUBST",
    "FreshNames",
    "freshen",
    "unify",
    "subsumes",
    "apply",
    "alpha_equivalent",
    "canonical",
    "vars_of",
    "is_ground",
    "Signature",
    "ground_instances",
    "parse_atom",
    "format_atom",
    "Token",
    "tokenize",
]


# ---------------------------------------------------------------------------
# terms and atoms


@dataclass(frozen=True)
class Variable:
    name: str

    def __repr__(self):
        return self.name


@dataclass(frozen=True)
class Constant:
    name: str

    def __repr__(self):
        return self.name


@dataclass(frozen=True)
class Compound:
    functor: str
    args: tuple

    def __repr__(self):
        return f"{self.functor}({', '.join(map(repr, self.args))})"


Term = Union[Variable, Constant, Compound]


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple = ()

    @property
    def arity(self) -> int:
        return len(self.args)

    @property
    def key(self) -> tuple[str, int]:
        return (self.predicate, len(self.args))

    def __repr__(self):
        return format_atom(self)


START = Atom("start")


def _term_vars(t: Term, out: list) -> None:
    if isinstance(t, Variable):
        if t not in out:
            out.append(t)
    elif isinstance(t, Compound):
        for a in t.args:
            _term_vars(a, out)


def vars_of(x: Union[Atom, Term]) -> tuple[Variable, ...]:
    """Variables of an atom or term, in order of first occurrence."""
    out: list[Variable] = []
    if isinstance(x, Atom):
        for a in x.args:
            _term_vars(a, out)
    else:
        _term_vars(x, out)
    return tuple(out)


def is_ground(x: Union[Atom, Term]) -> bool:
    return not vars_of(x)


# ---------------------------------------------------------------------------
# substitutions


class Substitution(Mapping):
    """An immutable map from variables to terms.

    Application is simultaneous; composition and idempotence are the
    caller's concern (``unify`` and ``subsumes`` always return idempotent
    substitutions).
    """

    __slots__ = ("_bindings",)

    def __init__(self, bindings: Optional[Mapping] = None):
        b = dict(bindings) if bindings else {}
        # identity bindings carry no information
        object.__setattr__(self, "_bindings", {v: t for v, t in b.items() if v != t})

    def __getitem__(self, v: Variable) -> Term:
        return self._bindings[v]

    def __iter__(self):
        return iter(self._bindings)

    def __len__(self):
        return len(self._bindings)

    def __eq__(self, other):
        if isinstance(other, Substitution):
            return self._bindings == other._bindings
        if isinstance(other, Mapping):
            return self._bindings == dict(other)
        return NotImplemented

    def __repr__(self):
        inner = ", ".join(f"{v}/{t!r}" for v, t in self._bindings.items())
        return "{" + inner + "}"


EMPTY_SUBST = Substitution()


def _apply_term(t: Term, b: Mapping) -> Term:
    if isinstance(t, Variable):
        return b.get(t, t)
    if isinstance(t, Compound):
        return Compound(t.functor, tuple(_apply_term(a, b) for a in t.args))
    return t


def apply(target: Union[Atom, Term], theta: Mapping) -> Union[Atom, Term]:
    """Apply a substitution to an atom or term, replacing simultaneously."""
    if isinstance(target, Atom):
        return Atom(target.predicate, tuple(_apply_term(a, theta) for a in target.args))
    return _apply_term(target, theta)


# ---------------------------------------------------------------------------
# unification and subsumption


def _walk(t: Term, b: dict) -> Term:
    while isinstance(t, Variable) and t in b:
        t = b[t]
    return t


def _occurs(v: Variable, t: Term, b: dict) -> bool:
    t = _walk(t, b)
    if t == v:
        return True
    if isinstance(t, Compound):
        return any(_occurs(v, a, b) for a in t.args)
    return False


def unify(a: Atom, b: Atom) -> Optional[Substitution]:
    """Most general unifier of two atoms, or None.

    Equal variable names on both sides denote the same variable; the
    occurs check is on. The result is idempotent and satisfies
    ``apply(a, theta) == apply(b, theta)``.
    """
    if a.key != b.key:
        return None
    bind: dict = {}
    stack = list(zip(a.args, b.args))
    while stack:
        s, t = stack.pop()
        s = _walk(s, bind)
        t = _walk(t, bind)
        if s == t:
            continue
        if isinstance(s, Variable):
            if _occurs(s, t, bind):
                return None
            bind[s] = t
        elif isinstance(t, Variable):
            if _occurs(t, s, bind):
                return None
            bind[t] = s
        elif (
            isinstance(s, Compound)
            and isinstance(t, Compound)
            and s.functor == t.functor
            and len(s.args) == len(t.args)
        ):
            stack.extend(zip(s.args, t.args))
        else:
            return None
    # resolve chains so the substitution is idempotent
    return Substitution({v: _apply_term(_walk(v, bind), _Resolver(bind)) for v in bind})


class _Resolver(Mapping):
    """Read-through view that deep-resolves a raw unifier binding map."""

    __slots__ = ("_b",)

    def __init__(self, b: dict):
        self._b = b

    def __getitem__(self, v):
        t = _walk(v, self._b)
        if t is v or t == v:
            raise KeyError(v)
        return _apply_term(t, self)

    def get(self, v, default=None):
        try:
            return self[v]
        except KeyError:
            return default

    def __iter__(self):
        return iter(self._b)

    def __len__(self):
        return len(self._b)


def subsumes(general: Atom, specific: Atom) -> Optional[Substitution]:
    """One-way match: theta over general's variables with apply(general, theta) == specific.

    Variables of ``specific`` are treated as inert terms, so
    ``subsumes(p(X), p(a))`` gives ``{X/a}`` while ``subsumes(p(a), p(X))``
    is None.
    """
    if general.key != specific.key:
        return None
    bind: dict = {}
    stack = list(zip(general.args, specific.args))
    while stack:
        g, s = stack.pop()
        if isinstance(g, Variable):
            seen = bind.get(g)
            if seen is None:
                bind[g] = s
            elif seen != s:
                return None
        elif isinstance(g, Compound):
            if not (
                isinstance(s, Compound)
                and g.functor == s.functor
                and len(g.args) == len(s.args)
            ):
                return None
            stack.extend(zip(g.args, s.args))
        elif g != s:
            return None
    return Substitution(bind)


def alpha_equivalent(a: Atom, b: Atom) -> bool:
    return subsumes(a, b) is not None and subsumes(b, a) is not None


_CANON_NAMES = [chr(c) for c in range(ord("A"), ord("Z") + 1)]


def canonical_name(i: int) -> str:
    """A, B, ..., Z, V27, V28, ..."""
    return _CANON_NAMES[i] if i < 26 else f"V{i + 1}"


def canonical(x: Union[Atom, tuple]) -> Union[Atom, tuple]:
    """Rename variables to A, B, C, ... in order of first occurrence.

    Accepts a single atom or a tuple of atoms renamed in one shared
    namespace; the result is a stable key for alpha-equivalence classes.
    """
    atoms = x if isinstance(x, tuple) else (x,)
    ren: dict = {}
    for a in atoms:
        for v in vars_of(a):
            if v not in ren:
                ren[v] = Variable(canonical_name(len(ren)))
    out = tuple(apply(a, ren) for a in atoms)
    return out if isinstance(x, tuple) else out[0]


# ---------------------------------------------------------------------------
# fresh variables


class FreshNames:
    """Monotone source of variable names distinct from anything parsed.

    Names start with an underscore followed by ``f``; the parser only
    mints underscore names starting with ``_a``, and user files cannot
    contain either since underscore variables parse as anonymous.
    """

    def __init__(self, prefix: str = "_f"):
        self._prefix = prefix
        self._counter = itertools.count(1)

    def variable(self) -> Variable:
        return Variable(f"{self._prefix}{next(self._counter)}")


_GLOBAL_FRESH = FreshNames()


def freshen(x, names: Optional[FreshNames] = None):
    """Copy with every variable renamed to a fresh one, sharing preserved.

    Accepts an atom, a term, or a tuple of atoms renamed together.
    """
    names = names or _GLOBAL_FRESH
    atoms = x if isinstance(x, tuple) else (x,)
    ren: dict = {}
    for a in atoms:
        for v in vars_of(a):
            if v not in ren:
                ren[v] = names.variable()
    if isinstance(x, tuple):
        return tuple(apply(a, ren) for a in x)
    return apply(x, ren)


# ---------------------------------------------------------------------------
# typed signatures


@dataclass(frozen=True, eq=True)
class Signature:
    """Predicate declarations: finite constant domains per argument position.

    ``states`` and ``observations`` map ``(name, arity)`` to the tuple of
    domain names of the argument positions. The two predicate sets are
    disjoint; ``start/0`` is always a state predicate.
    """

    domains: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)
    observations: dict = field(default_factory=dict)

    def __post_init__(self):
        doms = {name: tuple(cs) for name, cs in self.domains.items()}
        states = {k: tuple(ds) for k, ds in self.states.items()}
        obs = {k: tuple(ds) for k, ds in self.observations.items()}
        states.setdefault(START.key, ())
        object.__setattr__(self, "domains", doms)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "observations", obs)
        for name, cs in doms.items():
            if len(set(cs)) != len(cs):
                raise LohmmError(f"domain {name} declares a constant twice")
        if START.key in obs:
            raise LohmmError("start/0 is reserved as a state predicate")
        overlap = set(states) & set(obs)
        if overlap:
            raise LohmmError(f"predicates declared as both state and observation: {sorted(overlap)}")
        for key, ds in itertools.chain(states.items(), obs.items()):
            if len(ds) != key[1]:
                raise LohmmError(f"{key[0]}/{key[1]} declares {len(ds)} argument domains")
            for d in ds:
                if d not in doms:
                    raise LohmmError(f"{key[0]}/{key[1]} uses undeclared domain {d}")

    def __hash__(self):  # dict fields; identity hash is enough
        return id(self)

    # -- lookups ------------------------------------------------------

    def is_state(self, atom: Atom) -> bool:
        return atom.key in self.states

    def is_observation(self, atom: Atom) -> bool:
        return atom.key in self.observations

    def arg_domains(self, key: tuple[str, int]) -> tuple[str, ...]:
        if key in self.states:
            return self.states[key]
        if key in self.observations:
            return self.observations[key]
        raise UndeclaredPredicate(f"{key[0]}/{key[1]} is not declared")

    def constants(self, domain: str) -> tuple[str, ...]:
        try:
            return self.domains[domain]
        except KeyError:
            raise UndeclaredPredicate(f"domain {domain} is not declared") from None

    # -- typing of atoms ----------------------------------------------

    def variable_domains(self, atom: Atom) -> dict[Variable, str]:
        """Map each variable of the atom to its domain name.

        A variable nested inside a compound term takes the domain of the
        outer argument position. A variable seen at positions with
        different domains raises SharedVariableConflict.
        """
        doms = self.arg_domains(atom.key)
        out: dict[Variable, str] = {}

        def visit(t: Term, d: str):
            if isinstance(t, Variable):
                if out.setdefault(t, d) != d:
                    raise SharedVariableConflict(
                        f"{t} occupies domains {out[t]} and {d} in {format_atom(atom)}"
                    )
            elif isinstance(t, Compound):
                for a in t.args:
                    visit(a, d)

        for arg, d in zip(atom.args, doms):
            visit(arg, d)
        return out

    def check_ground(self, atom: Atom) -> None:
        """Verify every constant leaf sits in its position's domain."""
        doms = self.arg_domains(atom.key)

        def visit(t: Term, d: str):
            if isinstance(t, Constant):
                if t.name not in self.domains[d]:
                    raise DomainMismatch(
                        f"constant {t.name} is outside domain {d} in {format_atom(atom)}"
                    )
            elif isinstance(t, Compound):
                for a in t.args:
                    visit(a, d)
            else:
                raise DomainMismatch(f"{format_atom(atom)} is not ground")

        for arg, d in zip(atom.args, doms):
            visit(arg, d)

    # -- enumeration --------------------------------------------------

    def _ground_atoms(self, table: dict) -> Iterator[Atom]:
        for (name, _arity), ds in table.items():
            pools = [self.domains[d] for d in ds]
            for combo in itertools.product(*pools):
                yield Atom(name, tuple(Constant(c) for c in combo))

    def ground_states(self) -> Iterator[Atom]:
        """All functor-free ground state atoms, including start."""
        return self._ground_atoms(self.states)

    def ground_observations(self) -> Iterator[Atom]:
        return self._ground_atoms(self.observations)


def ground_instances(a: Atom, sig: Signature) -> list[Atom]:
    """All ground instances of an atom over the signature's domains.

    Each free variable ranges over the domain of the position it
    occupies; the result size is the product of those domain sizes.
    """
    vdoms = sig.variable_domains(a)
    vs = vars_of(a)
    pools = [sig.constants(vdoms[v]) for v in vs]
    out = []
    for combo in itertools.product(*pools):
        theta = {v: Constant(c) for v, c in zip(vs, combo)}
        out.append(apply(a, theta))
    return out


# ---------------------------------------------------------------------------
# lexing and parsing


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT VAR NUM PUNCT ARROW DASHES EOF
    text: str
    line: int
    column: int


_TOKEN_RE = re.compile(
    r"""(?P<ws>[ \t\r]+)
      | (?P<nl>\n)
      | (?P<comment>\#[^\n]*)
      | (?P<arrow>-->)
      | (?P<dashes>--)
      | (?P<num>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
      | (?P<ident>[a-z][A-Za-z0-9_]*)
      | (?P<var>[A-Z_][A-Za-z0-9_]*)
      | (?P<punct>[().,:/=])
    """,
    re.VERBOSE,
)

_KINDS = {
    "arrow": "ARROW",
    "dashes": "DASHES",
    "num": "NUM",
    "ident": "IDENT",
    "var": "VAR",
    "punct": "PUNCT",
}


def tokenize(text: str) -> list[Token]:
    tokens = []
    line, line_start = 1, 0
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(_KINDS[kind], m.group(), line, m.start() - line_start + 1))
        pos = m.end()
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


class TokenCursor:
    """Sequential reader over a token list with positioned errors."""

    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        t = self.tokens[self.i]
        if t.kind != "EOF":
            self.i += 1
        return t

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        t = self.peek()
        return t.kind == kind and (text is None or t.text == text)

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        t = self.peek()
        if not self.at(kind, text):
            want = text or kind
            raise ParseError(f"expected {want!r}, found {t.text or 'end of input'!r}", t.line, t.column)
        return self.next()

    def fail(self, message: str):
        t = self.peek()
        raise ParseError(message, t.line, t.column)


def parse_term(cur: TokenCursor, fresh: Optional[FreshNames] = None) -> Term:
    t = cur.peek()
    if t.kind == "VAR":
        cur.next()
        if t.text.startswith("_"):
            # anonymous: every occurrence is a globally fresh variable
            return Variable(f"_a{next(_ANON_COUNTER)}")
        return Variable(t.text)
    if t.kind == "IDENT":
        cur.next()
        if cur.at("PUNCT", "("):
            cur.next()
            args = [parse_term(cur, fresh)]
            while cur.at("PUNCT", ","):
                cur.next()
                args.append(parse_term(cur, fresh))
            cur.expect("PUNCT", ")")
            return Compound(t.text, tuple(args))
        return Constant(t.text)
    cur.fail(f"expected a term, found {t.text or 'end of input'!r}")


_ANON_COUNTER = itertools.count(1)


def parse_atom_at(cur: TokenCursor) -> Atom:
    t = cur.expect("IDENT")
    if not cur.at("PUNCT", "("):
        return Atom(t.text)
    cur.next()
    args = [parse_term(cur)]
    while cur.at("PUNCT", ","):
        cur.next()
        args.append(parse_term(cur))
    cur.expect("PUNCT", ")")
    return Atom(t.text, tuple(args))


def parse_atom(text: str) -> Atom:
    """Parse one atom from text; trailing input is an error."""
    cur = TokenCursor(tokenize(text))
    atom = parse_atom_at(cur)
    cur.expect("EOF")
    return atom


def _format_term(t: Term) -> str:
    if isinstance(t, Variable):
        return "_" if t.name.startswith("_") else t.name
    if isinstance(t, Constant):
        return t.name
    return f"{t.functor}({', '.join(_format_term(a) for a in t.args)})"


def format_atom(a: Atom) -> str:
    """Print an atom; underscore-named variables print as ``_``."""
    if not a.args:
        return a.predicate
    return f"{a.predicate}({', '.join(_format_term(x) for x in a.args)})"
