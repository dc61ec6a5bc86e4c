"""Logical HMMs: abstract transitions, selection distributions, validation, file I/O.

A model is a triple of a typed signature, a selection distribution, and
a set of probability-labelled abstract transitions ``p : body -- obs -->
head``. Bodies and heads are state atoms, observations are observation
atoms; transitions out of ``start/0`` carry no observation.

A ground state is routed to the unique maximally specific body that
subsumes it (conflict resolution), and the composite probability of one
ground step factors as clause probability times selection probabilities
of the variables bound while grounding the head and then the
observation. Variables already bound by the body match cost nothing;
variables bound to compound terms select nothing and contribute zero,
since selection only ever draws constants.

Model files look like::

    domain file = lohmm, readme, f1, f2 .
    domain user = tex, prog .
    state start/0 .
    state emacs/2 : file, user .
    obs emacs/1 : file .
    select user : tex 0.5, prog 0.5 .
    trans 0.7 : start --> emacs(_, tex) .
    trans 0.6 : emacs(F, tex) -- emacs(F) --> latex(F, tex) .

``#`` starts a line comment; declarations end with ``.`` and may share a
line. Domains without a ``select`` declaration get a uniform
distribution. Probabilities are renormalized exactly once at load when
they are within 1e-9 of summing to one; anything worse is a violation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

from .errors import (
    AmbiguousBody,
    DomainMismatch,
    LohmmError,
    NoMatchingBody,
    ParseError,
    SharedVariableConflict,
    UndeclaredPredicate,
    ValidationError,
)
from .logic import (
    START,
    Atom,
    Compound,
    Constant,
    Signature,
    Substitution,
    TokenCursor,
    Variable,
    apply,
    canonical,
    canonical_name,
    format_atom,
    parse_atom_at,
    subsumes,
    tokenize,
    vars_of,
)

__all__ = [
    "AbstractTransition",
    "SelectionDistribution",
    "Lohmm",
    "NORMALIZATION_TOL",
    "NormalizationViolation",
    "SelectionViolation",
    "WellFoundednessViolation",
    "CoverageViolation",
    "ClauseViolation",
    "validate",
    "most_specific_body",
    "matching_transitions",
    "mu_prob",
    "ground_step_prob",
    "load_model",
    "save_model",
    "parse_signature",
]

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class AbstractTransition:
    """One clause ``prob : body -- obs --> head``; obs is None from start."""

    prob: float
    body: Atom
    obs: Optional[Atom]
    head: Atom

    def with_prob(self, p: float) -> "AbstractTransition":
        return AbstractTransition(p, self.body, self.obs, self.head)

    def __repr__(self):
        if self.obs is None:
            return f"{self.prob} : {format_atom(self.body)} --> {format_atom(self.head)}"
        return (
            f"{self.prob} : {format_atom(self.body)}"
            f" -- {format_atom(self.obs)} --> {format_atom(self.head)}"
        )


@dataclass(frozen=True)
class SelectionDistribution:
    """One categorical distribution per domain, in declared constant order."""

    probs: dict  # domain name -> {constant -> probability}

    def prob(self, domain: str, constant: str) -> float:
        try:
            table = self.probs[domain]
        except KeyError:
            raise DomainMismatch(f"no selection distribution for domain {domain}") from None
        try:
            return table[constant]
        except KeyError:
            raise DomainMismatch(f"constant {constant} is outside domain {domain}") from None

    @staticmethod
    def uniform(sig: Signature) -> "SelectionDistribution":
        return SelectionDistribution(
            {d: {c: 1.0 / len(cs) for c in cs} for d, cs in sig.domains.items() if cs}
        )


def clause_shape(cl: AbstractTransition) -> tuple:
    """Canonical (body, obs, head) triple: equal iff clauses are alpha-equivalent."""
    if cl.obs is None:
        body, head = canonical((cl.body, cl.head))
        return (body, None, head)
    return canonical((cl.body, cl.obs, cl.head))


class Lohmm:
    """An immutable logical HMM: signature, selection distribution, clause set.

    Derived structure is computed once: clauses are grouped by the
    alpha-equivalence class of their body, preserving first-occurrence
    order of both groups and clauses.
    """

    __slots__ = ("sig", "mu", "delta", "bodies", "groups", "_msb_cache", "_vdom_cache")

    def __init__(self, sig: Signature, mu: SelectionDistribution, delta):
        self.sig = sig
        self.mu = mu
        self.delta = tuple(delta)
        groups: dict[Atom, list[int]] = {}
        for i, cl in enumerate(self.delta):
            groups.setdefault(canonical(cl.body), []).append(i)
        self.bodies = tuple(groups)
        self.groups = {b: tuple(ix) for b, ix in groups.items()}
        self._msb_cache: dict[Atom, Atom] = {}
        self._vdom_cache: dict[int, dict] = {}

    def __eq__(self, other):
        """Equality up to renaming of clause variables."""
        if not isinstance(other, Lohmm):
            return NotImplemented
        if self.sig != other.sig or self.mu != other.mu or len(self.delta) != len(other.delta):
            return False
        return all(
            a.prob == b.prob and clause_shape(a) == clause_shape(b)
            for a, b in zip(self.delta, other.delta)
        )

    def __hash__(self):
        return id(self)

    def __repr__(self):
        return f"<Lohmm {len(self.delta)} clauses over {len(self.bodies)} bodies>"

    def group_clauses(self, body: Atom):
        """Clauses whose body is alpha-equivalent to ``body`` (canonical form)."""
        return [self.delta[i] for i in self.groups[body]]

    def clause_var_domains(self, i: int) -> dict[Variable, str]:
        """Domain of every variable of clause i, consistent across its atoms."""
        cached = self._vdom_cache.get(i)
        if cached is not None:
            return cached
        cl = self.delta[i]
        out: dict[Variable, str] = {}
        atoms = (cl.body, cl.head) if cl.obs is None else (cl.body, cl.obs, cl.head)
        for atom in atoms:
            for v, d in self.sig.variable_domains(atom).items():
                if out.setdefault(v, d) != d:
                    raise SharedVariableConflict(
                        f"{v} occupies domains {out[v]} and {d} in clause {i}: {cl!r}"
                    )
        self._vdom_cache[i] = out
        return out


# ---------------------------------------------------------------------------
# conflict resolution and the composite step probability


def most_specific_body(m: Lohmm, g: Atom) -> Atom:
    """The unique maximally specific body subsuming the ground state g.

    Mirrors back-off: among all bodies that subsume g, the one that no
    other subsuming body strictly specializes. Raises NoMatchingBody if
    nothing subsumes g and AmbiguousBody if several incomparable bodies
    are maximally specific (a model that validates never does this on
    functor-free states).
    """
    hit = m._msb_cache.get(g)
    if hit is not None:
        return hit
    subsuming = [b for b in m.bodies if subsumes(b, g) is not None]
    if not subsuming:
        raise NoMatchingBody(f"no transition body subsumes {format_atom(g)}")
    minimal = [
        b
        for b in subsuming
        if not any(
            o is not b and subsumes(b, o) is not None and subsumes(o, b) is None
            for o in subsuming
        )
    ]
    if len(minimal) != 1:
        raise AmbiguousBody(
            f"{format_atom(g)} is covered by incomparable bodies "
            + ", ".join(format_atom(b) for b in minimal)
        )
    m._msb_cache[g] = minimal[0]
    return minimal[0]


def matching_transitions(m: Lohmm, b: Atom) -> list[tuple[AbstractTransition, Substitution]]:
    """Clauses hosting the ground state b, each with its body match."""
    best = most_specific_body(m, b)
    out = []
    for i in m.groups[best]:
        cl = m.delta[i]
        theta = subsumes(cl.body, b)
        out.append((cl, theta))
    return out


def _selection_product(m: Lohmm, vdoms: dict, theta: Substitution) -> float:
    """Probability of selecting the bindings in theta; zero for non-constants."""
    p = 1.0
    for v, t in theta.items():
        if not isinstance(t, Constant):
            return 0.0
        p *= m.mu.prob(vdoms[v], t.name)
    return p


def mu_prob(m: Lohmm, abstract: Atom, ground: Atom) -> float:
    """Selection probability of one ground instance of an abstract atom.

    The product over the variables of ``abstract`` of the probability of
    the constant each one is bound to; a variable occurring several
    times counts once. Functors are looked through: a variable nested in
    a compound draws from the domain of the outer argument position.
    """
    theta = subsumes(abstract, ground)
    if theta is None:
        raise LohmmError(
            f"{format_atom(abstract)} does not subsume {format_atom(ground)}"
        )
    vdoms = m.sig.variable_domains(abstract)
    p = 1.0
    for v, t in theta.items():
        if not isinstance(t, Constant):
            return 0.0
        p *= m.mu.prob(vdoms[v], t.name)
    return p


def _clause_step_prob(
    m: Lohmm,
    idx: int,
    theta_b: Substitution,
    h: Atom,
    o: Optional[Atom],
) -> float:
    cl = m.delta[idx]
    vdoms = m.clause_var_domains(idx)
    head1 = apply(cl.head, theta_b)
    theta_h = subsumes(head1, h)
    if theta_h is None:
        return 0.0
    p = cl.prob * _selection_product(m, vdoms, theta_h)
    if p == 0.0:
        return 0.0
    if cl.obs is None:
        return p if o is None else 0.0
    if o is None:
        return 0.0
    obs1 = apply(apply(cl.obs, theta_b), theta_h)
    theta_o = subsumes(obs1, o)
    if theta_o is None:
        return 0.0
    return p * _selection_product(m, vdoms, theta_o)


def ground_step_prob(m: Lohmm, b: Atom, h: Atom, o: Optional[Atom]) -> float:
    """P(next state h, observation o | current ground state b).

    Sums over every clause hosting b the product of clause probability,
    the selection probability of grounding the head to h, and the
    selection probability of grounding the observation to o after both
    body and head bindings are in place.
    """
    best = most_specific_body(m, b)
    total = 0.0
    for i in m.groups[best]:
        theta_b = subsumes(m.delta[i].body, b)
        total += _clause_step_prob(m, i, theta_b, h, o)
    return total


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class NormalizationViolation:
    body: Atom
    total: float

    def __str__(self):
        return f"transitions from {format_atom(self.body)} sum to {self.total:.12g}"


@dataclass(frozen=True)
class SelectionViolation:
    domain: str
    message: str

    def __str__(self):
        return f"selection over {self.domain}: {self.message}"


@dataclass(frozen=True)
class WellFoundednessViolation:
    state: Atom
    bodies: tuple

    def __str__(self):
        names = ", ".join(format_atom(b) for b in self.bodies)
        return f"{format_atom(self.state)} has no unique most specific body ({names})"


@dataclass(frozen=True)
class CoverageViolation:
    state: Atom

    def __str__(self):
        return f"no transition body subsumes {format_atom(self.state)}"


@dataclass(frozen=True)
class ClauseViolation:
    index: int
    message: str

    def __str__(self):
        return f"clause {self.index}: {self.message}"


def _check_constant_leaves(sig: Signature, atom: Atom):
    """Constants anywhere inside argument i must sit in that position's domain."""
    doms = sig.arg_domains(atom.key)

    def visit(t, d):
        if isinstance(t, Constant):
            if t.name not in sig.domains[d]:
                raise DomainMismatch(
                    f"constant {t.name} is outside domain {d} in {format_atom(atom)}"
                )
        elif isinstance(t, Compound):
            for a in t.args:
                visit(a, d)

    for arg, d in zip(atom.args, doms):
        visit(arg, d)


def validate(m: Lohmm) -> list:
    """Structural invariants as a list of violations; empty means valid.

    Checked: clause typing (declared predicates, state/observation
    placement, observation exactly when the body is not start, constants
    inside their domains, consistent variable domains, nonnegative
    probabilities), selection and per-body transition normalization
    within 1e-9, and for every functor-free ground state both the
    existence of a subsuming body and a unique maximally specific one.
    """
    out: list = []
    sig = m.sig
    for i, cl in enumerate(m.delta):
        try:
            if not sig.is_state(cl.body):
                out.append(ClauseViolation(i, f"body {format_atom(cl.body)} is not a state atom"))
                continue
            if not sig.is_state(cl.head):
                out.append(ClauseViolation(i, f"head {format_atom(cl.head)} is not a state atom"))
                continue
            if cl.body == START and cl.obs is not None:
                out.append(ClauseViolation(i, "transitions from start carry no observation"))
                continue
            if cl.body != START and cl.obs is None:
                out.append(ClauseViolation(i, "missing observation"))
                continue
            if cl.obs is not None and not sig.is_observation(cl.obs):
                out.append(ClauseViolation(i, f"{format_atom(cl.obs)} is not an observation atom"))
                continue
            for atom in (cl.body, cl.head) if cl.obs is None else (cl.body, cl.obs, cl.head):
                _check_constant_leaves(sig, atom)
            m.clause_var_domains(i)
            if not (cl.prob >= 0.0):
                out.append(ClauseViolation(i, f"negative probability {cl.prob}"))
        except (UndeclaredPredicate, DomainMismatch, SharedVariableConflict) as e:
            out.append(ClauseViolation(i, str(e)))
    for domain, constants in sig.domains.items():
        table = m.mu.probs.get(domain)
        if table is None:
            out.append(SelectionViolation(domain, "missing distribution"))
            continue
        if set(table) != set(constants):
            out.append(SelectionViolation(domain, "support differs from the declared constants"))
            continue
        if any(p < 0.0 for p in table.values()):
            out.append(SelectionViolation(domain, "negative probability"))
            continue
        total = sum(table.values())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            out.append(SelectionViolation(domain, f"sums to {total:.12g}"))
    for body, idxs in m.groups.items():
        total = sum(m.delta[i].prob for i in idxs)
        if abs(total - 1.0) > NORMALIZATION_TOL:
            out.append(NormalizationViolation(body, total))
    if any(isinstance(v, ClauseViolation) for v in out):
        return out  # routing below assumes typed clauses
    for g in sig.ground_states():
        subsuming = [b for b in m.bodies if subsumes(b, g) is not None]
        if not subsuming:
            out.append(CoverageViolation(g))
            continue
        minimal = [
            b
            for b in subsuming
            if not any(
                o is not b and subsumes(b, o) is not None and subsumes(o, b) is None
                for o in subsuming
            )
        ]
        if len(minimal) != 1:
            out.append(WellFoundednessViolation(g, tuple(minimal)))
    return out


# ---------------------------------------------------------------------------
# model files


_ARITY_KEYWORDS = ("domain", "state", "obs", "select", "trans")


def _parse_int(cur: TokenCursor) -> int:
    t = cur.expect("NUM")
    try:
        return int(t.text)
    except ValueError:
        raise ParseError(f"expected an integer, found {t.text!r}", t.line, t.column) from None


def _parse_float(cur: TokenCursor) -> float:
    t = cur.expect("NUM")
    return float(t.text)


class _ModelReader:
    """Declaration-by-declaration reader for the model file grammar."""

    def __init__(self, text: str):
        self.cur = TokenCursor(tokenize(text))
        self.domains: dict[str, tuple] = {}
        self.states: dict[tuple, tuple] = {}
        self.observations: dict[tuple, tuple] = {}
        self.selects: dict[str, dict] = {}
        self.clauses: list[tuple] = []  # (prob, body, obs, head, token)

    def run(self):
        cur = self.cur
        while not cur.at("EOF"):
            t = cur.expect("IDENT")
            if t.text == "domain":
                self.domain_decl(t)
            elif t.text == "state":
                self.pred_decl(self.states, "state")
            elif t.text == "obs":
                self.pred_decl(self.observations, "observation")
            elif t.text == "select":
                self.select_decl()
            elif t.text == "trans":
                self.trans_decl(t)
            else:
                raise ParseError(
                    f"expected a declaration keyword, found {t.text!r}", t.line, t.column
                )
            cur.expect("PUNCT", ".")

    def domain_decl(self, kw):
        cur = self.cur
        name_tok = cur.expect("IDENT")
        if name_tok.text in self.domains:
            raise ParseError(f"domain {name_tok.text} declared twice", name_tok.line, name_tok.column)
        cur.expect("PUNCT", "=")
        constants = []
        while True:
            c = cur.expect("IDENT")
            if c.text in constants:
                raise ParseError(f"constant {c.text} declared twice", c.line, c.column)
            constants.append(c.text)
            if cur.at("PUNCT", ","):
                cur.next()
            else:
                break
        self.domains[name_tok.text] = tuple(constants)

    def pred_decl(self, table, what):
        cur = self.cur
        name_tok = cur.expect("IDENT")
        cur.expect("PUNCT", "/")
        arity = _parse_int(cur)
        key = (name_tok.text, arity)
        if key in self.states or key in self.observations:
            raise ParseError(
                f"{name_tok.text}/{arity} declared twice", name_tok.line, name_tok.column
            )
        doms = []
        if cur.at("PUNCT", ":"):
            cur.next()
            while True:
                d = cur.expect("IDENT")
                if d.text not in self.domains:
                    raise ParseError(f"undeclared domain {d.text}", d.line, d.column)
                doms.append(d.text)
                if cur.at("PUNCT", ","):
                    cur.next()
                else:
                    break
        if len(doms) != arity:
            raise ParseError(
                f"{name_tok.text}/{arity} declares {len(doms)} argument domains",
                name_tok.line,
                name_tok.column,
            )
        table[key] = tuple(doms)

    def select_decl(self):
        cur = self.cur
        d = cur.expect("IDENT")
        if d.text not in self.domains:
            raise ParseError(f"undeclared domain {d.text}", d.line, d.column)
        if d.text in self.selects:
            raise ParseError(f"selection over {d.text} declared twice", d.line, d.column)
        cur.expect("PUNCT", ":")
        table: dict[str, float] = {}
        while True:
            c = cur.expect("IDENT")
            if c.text not in self.domains[d.text]:
                raise ParseError(
                    f"constant {c.text} is outside domain {d.text}", c.line, c.column
                )
            if c.text in table:
                raise ParseError(f"constant {c.text} listed twice", c.line, c.column)
            table[c.text] = _parse_float(cur)
            if cur.at("PUNCT", ","):
                cur.next()
            else:
                break
        self.selects[d.text] = table

    def trans_decl(self, kw):
        cur = self.cur
        prob = _parse_float(cur)
        cur.expect("PUNCT", ":")
        body = parse_atom_at(cur)
        obs = None
        if cur.at("DASHES"):
            cur.next()
            obs = parse_atom_at(cur)
        cur.expect("ARROW")
        head = parse_atom_at(cur)
        self.clauses.append((prob, body, obs, head, kw))

    def check_atom(self, atom: Atom, table, what: str, tok):
        if atom.key not in table:
            raise ParseError(
                f"{atom.predicate}/{atom.arity} is not a declared {what} predicate",
                tok.line,
                tok.column,
            )

    def build(self) -> Lohmm:
        sig = Signature(self.domains, self.states, self.observations)
        delta = []
        for prob, body, obs, head, tok in self.clauses:
            self.check_atom(body, sig.states, "state", tok)
            self.check_atom(head, sig.states, "state", tok)
            if obs is not None:
                self.check_atom(obs, sig.observations, "observation", tok)
            delta.append(AbstractTransition(prob, body, obs, head))
        probs = {}
        for domain, constants in sig.domains.items():
            declared = self.selects.get(domain)
            if declared is None:
                probs[domain] = {c: 1.0 / len(constants) for c in constants}
            else:
                probs[domain] = {c: declared.get(c, 0.0) for c in constants}
        mu = SelectionDistribution(probs)
        return Lohmm(sig, mu, delta)


# sums already this close to one are float noise; rescaling them again would
# wobble the last bits and break save/load round-trip stability
_RENORM_SKIP = 1e-12


def _renormalized(m: Lohmm) -> Lohmm:
    """Scale selection rows and body groups whose sums are within tolerance."""
    probs = {}
    for domain, table in m.mu.probs.items():
        total = sum(table.values())
        if _RENORM_SKIP < abs(total - 1.0) <= NORMALIZATION_TOL:
            probs[domain] = {c: p / total for c, p in table.items()}
        else:
            probs[domain] = dict(table)
    delta = list(m.delta)
    for body, idxs in m.groups.items():
        total = sum(m.delta[i].prob for i in idxs)
        if _RENORM_SKIP < abs(total - 1.0) <= NORMALIZATION_TOL:
            for i in idxs:
                delta[i] = delta[i].with_prob(delta[i].prob / total)
    return Lohmm(m.sig, SelectionDistribution(probs), delta)


def load_model(text: str) -> Lohmm:
    """Parse and validate a model file; raises ParseError or ValidationError."""
    reader = _ModelReader(text)
    reader.run()
    m = _renormalized(reader.build())
    violations = validate(m)
    if violations:
        raise ValidationError(violations)
    return m


def parse_signature(text: str) -> Signature:
    """Read only the declarations of a model file (transitions allowed, ignored)."""
    reader = _ModelReader(text)
    reader.run()
    return Signature(reader.domains, reader.states, reader.observations)


def _canonical_clause_names(cl: AbstractTransition) -> dict:
    """Rename clause variables for printing: singletons to ``_``, shared to A, B, ..."""
    atoms = (cl.body, cl.head) if cl.obs is None else (cl.body, cl.obs, cl.head)
    counts: dict[Variable, int] = {}

    def visit(t):
        if isinstance(t, Variable):
            counts[t] = counts.get(t, 0) + 1
        elif isinstance(t, Compound):
            for a in t.args:
                visit(a)

    order: list[Variable] = []
    for atom in atoms:
        for v in vars_of(atom):
            if v not in order:
                order.append(v)
        for arg in atom.args:
            visit(arg)
    ren, shared = {}, 0
    for v in order:
        if counts[v] == 1:
            ren[v] = Variable("_")
        else:
            ren[v] = Variable(canonical_name(shared))
            shared += 1
    return ren


def save_model(m: Lohmm) -> str:
    """Render a model file that loads back to an equal model.

    Clause variables are renamed canonically (variables occurring once
    print as ``_``), so saving is stable under load/save round trips.
    """
    lines = []
    for domain, constants in m.sig.domains.items():
        lines.append(f"domain {domain} = {', '.join(constants)} .")
    for (name, arity), doms in m.sig.states.items():
        suffix = f" : {', '.join(doms)}" if doms else ""
        lines.append(f"state {name}/{arity}{suffix} .")
    for (name, arity), doms in m.sig.observations.items():
        suffix = f" : {', '.join(doms)}" if doms else ""
        lines.append(f"obs {name}/{arity}{suffix} .")
    for domain in m.sig.domains:
        table = m.mu.probs[domain]
        entries = ", ".join(f"{c} {p!r}" for c, p in table.items())
        lines.append(f"select {domain} : {entries} .")
    for cl in m.delta:
        ren = _canonical_clause_names(cl)
        body = format_atom(apply(cl.body, ren))
        head = format_atom(apply(cl.head, ren))
        if cl.obs is None:
            lines.append(f"trans {cl.prob!r} : {body} --> {head} .")
        else:
            obs = format_atom(apply(cl.obs, ren))
            lines.append(f"trans {cl.prob!r} : {body} -- {obs} --> {head} .")
    return "\n".join(lines) + "\n"
