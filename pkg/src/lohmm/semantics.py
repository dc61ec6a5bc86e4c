"""Sequence semantics: sampling, likelihood, posteriors, classification.

A run of the model is start = s_0, s_1, ..., s_{T+1} with observations
o_1, ..., o_T: the step out of start emits nothing, every later step
emits exactly one observation. The probability of an observation
sequence sums the composite step probabilities over all hidden runs;
the empty sequence has probability one.

The forward and backward passes work on the reachable ground states per
position, scaled per step with the log scale carried separately, so long
or unlikely sequences do not underflow.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AllZeroLikelihood,
    AmbiguousBody,
    LohmmError,
    NoMatchingBody,
    ParseError,
    ZeroLikelihoodSequence,
)
from .logic import (
    START,
    Atom,
    Compound,
    Constant,
    Token,
    TokenCursor,
    apply,
    format_atom,
    parse_atom_at,
    subsumes,
    tokenize,
    vars_of,
)
from .model import Lohmm, _check_constant_leaves, most_specific_body

__all__ = [
    "sample",
    "log_likelihood",
    "corpus_log_likelihoods",
    "ExpectedCounts",
    "expected_counts",
    "expected_counts_with_loglik",
    "classify",
    "successor_support",
    "reachable_states",
    "parse_corpus",
    "format_corpus",
]

# state-space bound for the batched dense trellis; larger or
# compound-producing models fall back to the per-sequence sparse walk
_DENSE_STATE_CAP = 256


# ---------------------------------------------------------------------------
# one-step expansion


class _StepTable:
    """Per-model cache of ground one-step expansions.

    ``steps(b, o)`` maps each possible next state h to P(h, o | b); with
    ``o`` None it expands the observation-free step out of start.
    Structure work (routing, matching, grounding) is done once per
    (state, observation) pair and reused across positions, sequences,
    and passes.
    """

    def __init__(self, m: Lohmm):
        self.m = m
        self._cache: dict = {}

    def steps(self, b: Atom, o: Optional[Atom]) -> dict:
        key = (b, o)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._expand(b, o)
        return hit

    def _expand(self, b: Atom, o: Optional[Atom]) -> dict:
        m = self.m
        out: dict[Atom, float] = {}
        try:
            best = most_specific_body(m, b)
        except (NoMatchingBody, AmbiguousBody):
            return out
        for i in m.groups[best]:
            cl = m.delta[i]
            theta_b = subsumes(cl.body, b)
            vdoms = m.clause_var_domains(i)
            head1 = apply(cl.head, theta_b)
            if o is None:
                if cl.obs is not None:
                    continue
                self._ground_head(out, cl.prob, head1, vdoms)
                continue
            if cl.obs is None:
                continue
            obs1 = apply(cl.obs, theta_b)
            theta_o = subsumes(obs1, o)
            if theta_o is None:
                continue
            # every matched binding is a selection, so compounds kill the clause
            if any(not isinstance(t, Constant) for t in theta_o.values()):
                continue
            head_vars = set(vars_of(head1))
            base = cl.prob
            known = {}
            for v, t in theta_o.items():
                base *= m.mu.prob(vdoms[v], t.name)
                if v in head_vars:
                    known[v] = t
            if base == 0.0:
                continue
            self._ground_head(out, base, apply(head1, known), vdoms)
        return out

    def _ground_head(self, out: dict, base: float, head: Atom, vdoms: dict):
        m = self.m
        free = vars_of(head)
        if not free:
            out[head] = out.get(head, 0.0) + base
            return
        pools = [
            [(Constant(c), m.mu.prob(vdoms[v], c)) for c in m.sig.constants(vdoms[v])]
            for v in free
        ]
        for combo in itertools.product(*pools):
            p = base
            for _, cp in combo:
                p *= cp
            if p == 0.0:
                continue
            theta = {v: c for v, (c, _) in zip(free, combo)}
            h = apply(head, theta)
            out[h] = out.get(h, 0.0) + p


def successor_support(m: Lohmm, b: Atom) -> dict:
    """All (h, o) pairs reachable in one step from b, with their probabilities.

    Enumerates clause groundings directly, so the support is finite even
    when heads contain compound terms. Sums to one for a valid model.
    """
    out: dict = {}
    for i in m.groups[most_specific_body(m, b)]:
        cl = m.delta[i]
        theta_b = subsumes(cl.body, b)
        vdoms = m.clause_var_domains(i)
        head1 = apply(cl.head, theta_b)
        hfree = vars_of(head1)
        pools = [
            [(Constant(c), m.mu.prob(vdoms[v], c)) for c in m.sig.constants(vdoms[v])]
            for v in hfree
        ]
        for combo in itertools.product(*pools):
            hp = cl.prob
            for _, cp in combo:
                hp *= cp
            theta_h = {v: c for v, (c, _) in zip(hfree, combo)}
            h = apply(head1, theta_h)
            if cl.obs is None:
                key = (h, None)
                out[key] = out.get(key, 0.0) + hp
                continue
            obs1 = apply(apply(cl.obs, theta_b), theta_h)
            ofree = vars_of(obs1)
            opools = [
                [(Constant(c), m.mu.prob(vdoms[v], c)) for c in m.sig.constants(vdoms[v])]
                for v in ofree
            ]
            for ocombo in itertools.product(*opools):
                op = hp
                for _, cp in ocombo:
                    op *= cp
                theta_ob = {v: c for v, (c, _) in zip(ofree, ocombo)}
                key = (h, apply(obs1, theta_ob))
                out[key] = out.get(key, 0.0) + op
    return out


def reachable_states(m: Lohmm, max_depth: Optional[int] = None) -> set:
    """Ground states reachable from start, optionally capped at a step depth.

    The cap matters for models whose compound heads build ever deeper
    terms; functor-free models close after finitely many steps.
    """
    seen = {START}
    frontier = [START]
    depth = 0
    while frontier and (max_depth is None or depth < max_depth):
        nxt = []
        for b in frontier:
            for (h, _o), p in successor_support(m, b).items():
                if p > 0.0 and h not in seen:
                    seen.add(h)
                    nxt.append(h)
        frontier = nxt
        depth += 1
    return seen


# ---------------------------------------------------------------------------
# sampling


def _select(m: Lohmm, domain: str, rng: np.random.Generator) -> Constant:
    cs = m.sig.constants(domain)
    w = np.array([m.mu.prob(domain, c) for c in cs], dtype=float)
    return Constant(cs[int(rng.choice(len(cs), p=w / w.sum()))])


def sample(m: Lohmm, length: int, rng: np.random.Generator):
    """Draw one run: hidden states start, s_1, ..., s_{length+1} plus observations.

    Each step routes the current state to its clause group, picks a
    clause proportional to its probability, then selects constants for
    the unbound head variables and finally the unbound observation
    variables. Returns (hidden, observations).
    """
    hidden = [START]
    obs: list[Atom] = []
    cur = START
    for _step in range(length + 1):
        idxs = m.groups[most_specific_body(m, cur)]
        probs = np.array([m.delta[i].prob for i in idxs], dtype=float)
        i = idxs[int(rng.choice(len(idxs), p=probs / probs.sum()))]
        cl = m.delta[i]
        theta_b = subsumes(cl.body, cur)
        vdoms = m.clause_var_domains(i)
        head1 = apply(cl.head, theta_b)
        theta_h = {v: _select(m, vdoms[v], rng) for v in vars_of(head1)}
        h = apply(head1, theta_h)
        if cl.obs is not None:
            obs1 = apply(apply(cl.obs, theta_b), theta_h)
            theta_o = {v: _select(m, vdoms[v], rng) for v in vars_of(obs1)}
            obs.append(apply(obs1, theta_o))
        hidden.append(h)
        cur = h
    return hidden, obs


# ---------------------------------------------------------------------------
# likelihood and posteriors


def _forward(table: _StepTable, seq: Sequence[Atom]):
    """Scaled forward masses per position plus the log likelihood.

    Returns (alphas, logscales, loglik); alphas[t] sums to one and the
    true mass is alphas[t] * exp(logscales[t]). loglik is -inf for an
    impossible sequence.
    """
    alphas = [{START: 1.0}]
    logscales = [0.0]
    emissions = [None] + list(seq)
    for e in emissions:
        nxt: dict[Atom, float] = {}
        for b, ab in alphas[-1].items():
            for h, p in table.steps(b, e).items():
                nxt[h] = nxt.get(h, 0.0) + ab * p
        c = sum(nxt.values())
        if c <= 0.0:
            return None, None, float("-inf")
        alphas.append({h: a / c for h, a in nxt.items()})
        logscales.append(logscales[-1] + math.log(c))
    return alphas, logscales, logscales[-1]


def log_likelihood(m: Lohmm, seq: Sequence[Atom]) -> float:
    """Log probability of an observation sequence; 0.0 for the empty one."""
    if not seq:
        return 0.0
    _, _, ll = _forward(_StepTable(m), seq)
    return ll


@dataclass
class ExpectedCounts:
    """Posterior mass per ground (body state, next state, observation) triple.

    The observation slot is None exactly for the step out of start. Each
    data case of length T contributes T + 1 units of mass in total.
    """

    table: dict = field(default_factory=dict)
    total_sequences: int = 0

    def add(self, other: "ExpectedCounts") -> "ExpectedCounts":
        for k, v in other.table.items():
            self.table[k] = self.table.get(k, 0.0) + v
        self.total_sequences += other.total_sequences
        return self

    def total_mass(self) -> float:
        return sum(self.table.values())

    def __len__(self):
        return len(self.table)


def _accumulate_sequence(table: _StepTable, seq: Sequence[Atom], out: ExpectedCounts, index: int):
    alphas, logscales, ll = _forward(table, seq)
    if ll == float("-inf"):
        raise ZeroLikelihoodSequence(index)
    emissions = [None] + list(seq)
    T1 = len(emissions)
    betas: list[dict] = [dict.fromkeys(alphas[T1], 1.0)]
    blog = [0.0]
    for t in range(T1 - 1, -1, -1):
        e = emissions[t]
        nxt = betas[-1]
        cur: dict[Atom, float] = {}
        for b in alphas[t]:
            s = 0.0
            for h, p in table.steps(b, e).items():
                bh = nxt.get(h)
                if bh:
                    s += p * bh
            cur[b] = s
        mx = max(cur.values())
        if mx <= 0.0:
            raise ZeroLikelihoodSequence(index)
        betas.append({b: v / mx for b, v in cur.items()})
        blog.append(blog[-1] + math.log(mx))
    betas.reverse()
    blog.reverse()
    for t, e in enumerate(emissions):
        scale = math.exp(logscales[t] + blog[t + 1] - ll)
        for b, ab in alphas[t].items():
            for h, p in table.steps(b, e).items():
                bh = betas[t + 1].get(h, 0.0)
                w = ab * p * bh * scale
                if w > 0.0:
                    key = (b, h, e)
                    out.table[key] = out.table.get(key, 0.0) + w
    out.total_sequences += 1
    return ll


# ---------------------------------------------------------------------------
# batched dense trellis
#
# When every clause is functor-free the reachable states sit inside the
# finite ground enumeration of the signature. If that enumeration is
# small, the one-step expansion becomes a state-by-state matrix per
# observation symbol, and the whole corpus runs through the forward and
# backward passes as a few matrix products per position instead of a
# Python walk per sequence.


def _dense_eligible(m: Lohmm) -> bool:
    for cl in m.delta:
        atoms = (cl.body, cl.head) if cl.obs is None else (cl.body, cl.obs, cl.head)
        for atom in atoms:
            if any(isinstance(a, Compound) for a in atom.args):
                return False
            try:
                _check_constant_leaves(m.sig, atom)
            except LohmmError:
                return False  # undeclared or out-of-domain: not enumerable
    n = 0
    for ds in m.sig.states.values():
        k = 1
        for d in ds:
            k *= len(m.sig.domains[d])
        n += k
    return n <= _DENSE_STATE_CAP


class _DenseEngine:
    def __init__(self, m: Lohmm):
        self.m = m
        self.table = _StepTable(m)
        self.states = list(m.sig.ground_states())
        self.ix = {s: i for i, s in enumerate(self.states)}
        n = len(self.states)
        self.v0 = np.zeros(n)
        for h, p in self.table.steps(START, None).items():
            self.v0[self.ix[h]] = p
        self._mats: dict[Atom, np.ndarray] = {}

    def mat(self, o: Atom) -> np.ndarray:
        M = self._mats.get(o)
        if M is None:
            n = len(self.states)
            M = np.zeros((n, n))
            for b, bi in self.ix.items():
                for h, p in self.table.steps(b, o).items():
                    M[bi, self.ix[h]] = p
            self._mats[o] = M
        return M


class _DenseRun:
    """Forward pass over the whole corpus at once; histories kept for
    the backward pass. Rows finish at their own lengths; a row whose
    mass hits zero is recorded as dead with its sequence index."""

    def __init__(self, eng: _DenseEngine, data):
        self.eng = eng
        n = len(data)
        self.lens = np.array([len(s) for s in data], dtype=np.intp)
        self.T = int(self.lens.max()) if n else 0
        self.obs_ids = np.full((n, self.T), -1, dtype=np.intp)
        self.obs_atoms: list[Atom] = []
        oix: dict[Atom, int] = {}
        for r, seq in enumerate(data):
            for t, o in enumerate(seq):
                j = oix.get(o)
                if j is None:
                    j = oix[o] = len(self.obs_atoms)
                    self.obs_atoms.append(o)
                self.obs_ids[r, t] = j
        alpha = np.tile(eng.v0, (n, 1))
        c = alpha.sum(axis=1)
        self.dead = c <= 0.0
        safe = np.where(self.dead, 1.0, c)
        alpha /= safe[:, None]
        loga = np.where(self.dead, -np.inf, np.log(safe))
        self.A = [alpha]
        self.loga = [loga]
        for t in range(self.T):
            alpha = self.A[-1].copy()
            loga = self.loga[-1].copy()
            active = (self.lens > t) & ~self.dead
            for j in np.unique(self.obs_ids[active, t]):
                rows = np.nonzero(active & (self.obs_ids[:, t] == j))[0]
                nxt = self.A[-1][rows] @ eng.mat(self.obs_atoms[j])
                c = nxt.sum(axis=1)
                z = c <= 0.0
                if z.any():
                    self.dead[rows[z]] = True
                    loga[rows[z]] = -np.inf
                    alpha[rows[z]] = 0.0
                nz = rows[~z]
                alpha[nz] = nxt[~z] / c[~z, None]
                loga[nz] += np.log(c[~z])
            self.A.append(alpha)
            self.loga.append(loga)
        self.loglik = self.loga[-1]

    def first_dead(self) -> int:
        return int(np.nonzero(self.dead)[0][0])

    def accumulate(self, out: ExpectedCounts) -> None:
        eng = self.eng
        n, T = len(self.lens), self.T
        N = len(eng.states)
        B = np.ones((n, N))
        logb = np.zeros(n)
        Bh = [None] * (T + 1)
        logbh = [None] * (T + 1)
        Bh[T], logbh[T] = B, logb
        for t in range(T - 1, -1, -1):
            B = Bh[t + 1].copy()
            logb = logbh[t + 1].copy()
            B[self.lens == t] = 1.0
            logb[self.lens == t] = 0.0
            active = (self.lens > t) & ~self.dead
            for j in np.unique(self.obs_ids[active, t]):
                rows = np.nonzero(active & (self.obs_ids[:, t] == j))[0]
                cur = Bh[t + 1][rows] @ eng.mat(self.obs_atoms[j]).T
                mx = cur.max(axis=1)
                B[rows] = cur / mx[:, None]
                logb[rows] = logbh[t + 1][rows] + np.log(mx)
            Bh[t], logbh[t] = B, logb
        ll = self.loglik
        start_scale = np.exp(logbh[0] - ll)
        w0 = eng.v0 * (Bh[0] * start_scale[:, None]).sum(axis=0)
        for h, v in zip(eng.states, w0):
            if v > 0.0:
                key = (START, h, None)
                out.table[key] = out.table.get(key, 0.0) + v
        for j, o in enumerate(self.obs_atoms):
            W = np.zeros((N, N))
            for t in range(T):
                rows = np.nonzero((self.lens > t) & (self.obs_ids[:, t] == j))[0]
                if len(rows) == 0:
                    continue
                scale = np.exp(self.loga[t][rows] + logbh[t + 1][rows] - ll[rows])
                W += np.einsum("rb,rh,r->bh", self.A[t][rows], Bh[t + 1][rows], scale)
            W *= eng.mat(o)
            for bi, hi in zip(*np.nonzero(W > 0.0)):
                key = (eng.states[bi], eng.states[hi], o)
                out.table[key] = out.table.get(key, 0.0) + W[bi, hi]
        out.total_sequences += n


def corpus_log_likelihoods(m: Lohmm, data: Sequence[Sequence[Atom]]) -> np.ndarray:
    """Per-sequence log likelihoods in corpus order; -inf where impossible."""
    if _dense_eligible(m) and data:
        run = _DenseRun(_DenseEngine(m), data)
        ll = run.loglik.copy()
        ll[run.lens == 0] = 0.0
        return ll
    table = _StepTable(m)
    return np.array(
        [0.0 if len(seq) == 0 else _forward(table, seq)[2] for seq in data]
    )


def expected_counts_with_loglik(m: Lohmm, data: Sequence[Sequence[Atom]]):
    """One E pass over the corpus: (ExpectedCounts, total log likelihood)."""
    out = ExpectedCounts()
    if _dense_eligible(m) and data:
        run = _DenseRun(_DenseEngine(m), data)
        if run.dead.any():
            raise ZeroLikelihoodSequence(run.first_dead())
        run.accumulate(out)
        return out, float(run.loglik.sum())
    table = _StepTable(m)
    total = 0.0
    for i, seq in enumerate(data):
        total += _accumulate_sequence(table, seq, out, i)
    return out, total


def expected_counts(m: Lohmm, data: Sequence[Sequence[Atom]]) -> ExpectedCounts:
    """Posterior expected transition counts over a corpus."""
    out, _ = expected_counts_with_loglik(m, data)
    return out


# ---------------------------------------------------------------------------
# classification


def classify(models: dict, seq: Sequence[Atom]) -> str:
    """Most probable class: argmax of log prior plus log likelihood.

    ``models`` maps class name to (model, prior). Ties resolve to the
    lexicographically smallest class name; if every class assigns zero
    likelihood the call raises AllZeroLikelihood.
    """
    best_name, best_score = None, float("-inf")
    for name in sorted(models):
        m, prior = models[name]
        logprior = math.log(prior) if prior > 0.0 else float("-inf")
        ll = log_likelihood(m, seq)
        s = logprior + ll
        if s > best_score:
            best_name, best_score = name, s
    if best_name is None or best_score == float("-inf"):
        raise AllZeroLikelihood("every class assigns probability zero to the sequence")
    return best_name


# ---------------------------------------------------------------------------
# corpus files


def parse_corpus(text: str) -> list:
    """One data case per line, atoms separated by commas.

    Blank lines and ``#`` comments are skipped; a case cannot span lines.
    """
    tokens = tokenize(text)
    by_line: dict[int, list[Token]] = {}
    for t in tokens:
        if t.kind != "EOF":
            by_line.setdefault(t.line, []).append(t)
    out = []
    for line in sorted(by_line):
        toks = by_line[line]
        last = toks[-1]
        cur = TokenCursor(toks + [Token("EOF", "", line, last.column + len(last.text))])
        seq = [parse_atom_at(cur)]
        while cur.at("PUNCT", ","):
            cur.next()
            seq.append(parse_atom_at(cur))
        cur.expect("EOF")
        for atom in seq:
            if vars_of(atom):
                raise ParseError(
                    f"{format_atom(atom)} is not ground", line, toks[0].column
                )
        out.append(seq)
    return out


def format_corpus(data: Sequence[Sequence[Atom]]) -> str:
    return "\n".join(", ".join(format_atom(a) for a in seq) for seq in data) + "\n"
