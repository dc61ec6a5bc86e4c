"""Clause-structure search: penalized scoring, refinement, greedy and
beam selection.

The search walks a space of clause sets ordered by specialization. A
refinement step picks one clause, applies one elementary substitution
(bind a variable to a constant, or merge two variables of one domain),
keeps the original clause, and repairs the result so that every ground
state still routes to exactly one most specific body. Candidate
structures are ranked on the count table frozen from the current model,
so ranking cost does not grow with the corpus; only accepted structures
are refit against the data.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .errors import IncompatibleCounts
from .logic import (
    START,
    Atom,
    Constant,
    Substitution,
    Variable,
    apply,
    canonical,
    freshen,
    subsumes,
    unify,
    vars_of,
)
from .logic import Compound, Signature
from .model import AbstractTransition, Lohmm, clause_shape, validate
from .learn import (
    CompiledObjective,
    OptimizerConfig,
    ParamVector,
    gem_inner_loop,
    improve_params,
    model_with_params,
    params_from_model,
)
from .semantics import ExpectedCounts, corpus_log_likelihoods

__all__ = [
    "Score",
    "SearchConfig",
    "TraceEntry",
    "penalty_value",
    "score",
    "initial_hypothesis",
    "minimal_specializations",
    "refine",
    "evaluate_neighbor",
    "sagem",
    "naive_greedy",
]


@dataclass(frozen=True)
class Score:
    """Penalized training score: total = loglik - penalty."""

    loglik: float
    penalty: float
    total: float


@dataclass
class SearchConfig:
    beam_width: int = 1
    l_max: int = 5
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    max_outer_iterations: int = 50
    tolerance: float = 1e-6
    seed: int = 0


@dataclass(frozen=True)
class TraceEntry:
    """One line of the search log; wall_ms covers the whole iteration."""

    iteration: int
    clauses: int
    bodies: int
    loglik: float
    penalty: float
    total: float
    wall_ms: float
    evaluated: int
    discarded: int


def penalty_value(n_clauses: int, n_cases: int) -> float:
    """Complexity charge: half a natural log of the case count per clause."""
    if n_cases <= 1:
        return 0.0
    return 0.5 * n_clauses * math.log(n_cases)


def score(m: Lohmm, data: Sequence[Sequence[Atom]]) -> Score:
    ll = float(corpus_log_likelihoods(m, data).sum())
    pen = penalty_value(len(m.delta), len(data))
    return Score(ll, pen, ll - pen)


# ---------------------------------------------------------------------------
# hypothesis space


def _general_atom(key, names) -> Atom:
    name, arity = key
    return Atom(name, tuple(Variable(next(names)) for _ in range(arity)))


def _name_stream():
    k = 0
    while True:
        k += 1
        yield f"V{k}"


def _state_keys(sig: Signature):
    return sorted(k for k in sig.states if k != START.key)


def _grid_clauses(sig: Signature, body: Atom):
    """Maximally general (observation, head) pairs over a fixed body.

    One clause per pair, no variable sharing: the least committed set of
    transitions out of the body, enough to emit anything and move
    anywhere. Bodies other than start pair every observation predicate
    with every state predicate; start omits the observation.
    """
    out = []
    if body == START:
        for hk in _state_keys(sig):
            names = _name_stream()
            out.append(AbstractTransition(0.0, START, None, _general_atom(hk, names)))
        return out
    for ok in sorted(sig.observations):
        for hk in _state_keys(sig):
            names = _name_stream()
            b = apply(body, {v: Variable(next(names)) for v in vars_of(body)})
            out.append(
                AbstractTransition(
                    0.0, b, _general_atom(ok, names), _general_atom(hk, names)
                )
            )
    return out


def initial_hypothesis(sig: Signature) -> Lohmm:
    """The fully connected, maximally general model over a signature.

    One body per state predicate (plus start), a full observation-head
    grid per body, uniform probabilities everywhere. Every corpus over
    the signature has positive likelihood under it.
    """
    delta = []
    names = _name_stream()
    bodies = [START] + [_general_atom(k, names) for k in _state_keys(sig)]
    for body in bodies:
        grid = _grid_clauses(sig, body)
        for cl in grid:
            delta.append(cl.with_prob(1.0 / len(grid)))
    from .model import SelectionDistribution

    return Lohmm(sig, SelectionDistribution.uniform(sig), delta)


def _clause_atoms(cl: AbstractTransition):
    return (cl.body, cl.head) if cl.obs is None else (cl.body, cl.obs, cl.head)


def _functor_free(cl: AbstractTransition) -> bool:
    def clean(t):
        return not isinstance(t, Compound)

    return all(clean(a) for atom in _clause_atoms(cl) for a in atom.args)


def minimal_specializations(cl: AbstractTransition, sig: Signature) -> list:
    """Single elementary substitutions applicable to a clause.

    Either two distinct same-domain variables merged, or one variable
    bound to one constant of its domain. Clauses carrying compound
    terms are outside the search bias and get none. Order is fixed and
    most general first: variable merges (pairs lexicographically by
    first occurrence), then constant bindings (variables by first
    occurrence, constants by declaration).
    """
    if not _functor_free(cl):
        return []
    vdoms: dict = {}
    ordered = []
    for atom in _clause_atoms(cl):
        for v, d in sig.variable_domains(atom).items():
            if v not in vdoms:
                vdoms[v] = d
                ordered.append(v)
    out = []
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            if vdoms[ordered[i]] == vdoms[ordered[j]]:
                out.append(Substitution({ordered[j]: ordered[i]}))
    for v in ordered:
        for c in sig.constants(vdoms[v]):
            out.append(Substitution({v: Constant(c)}))
    return out


def _structure_key(delta) -> tuple:
    return tuple(sorted(repr(clause_shape(cl)) for cl in delta))


def _atom_vars(atom) -> list:
    out = []
    for a in atom.args:
        out.extend(vars_of(a))
    return out


def _move_rank(cl: AbstractTransition, theta, sig: Signature) -> int:
    """Screening order for one elementary move, most entangling first.

    0: merge joining an observation variable to a head variable, the
    move that makes a successor's argument carry evidence; 1: any
    other merge; 2: a constant binding.
    """
    kept = next(iter(theta.values()))
    if isinstance(kept, Constant):
        return 2
    gone = next(iter(theta))
    pair = {kept, gone}
    obs_vars = set() if cl.obs is None else set(_atom_vars(cl.obs))
    head_vars = set(_atom_vars(cl.head))
    if pair & obs_vars and pair & head_vars:
        return 0
    return 1


def _links_arguments(cl: AbstractTransition) -> bool:
    """True when some variable occurs twice across the clause's atoms."""
    seen = set()
    for atom in _clause_atoms(cl):
        for v in _atom_vars(atom):
            if v in seen:
                return True
            seen.add(v)
    return False


def _comparable(a: Atom, b: Atom) -> bool:
    return subsumes(a, b) is not None or subsumes(b, a) is not None


def _body_mgu(a: Atom, b: Atom) -> Optional[Atom]:
    theta = unify(a, freshen(b))
    if theta is None:
        return None
    return canonical(apply(a, theta))


def _build_neighbor(m: Lohmm, sig: Signature, cl2: AbstractTransition) -> Lohmm:
    """Parent plus one specialized clause plus whatever repairs it needs.

    Appending keeps parent clause indices stable, which downstream
    compilation relies on. A specialization landing in an existing body
    group takes a 1/(n+1) share and the group renormalizes; a new body
    brings a uniform observation-head grid with it, and the body set is
    closed under pairwise unification so routing stays unambiguous.
    """
    delta = list(m.delta)
    b2 = canonical(cl2.body)
    new_bodies = []
    if b2 in m.groups:
        idxs = m.groups[b2]
        share = 1.0 / (len(idxs) + 1)
        scale = 1.0 / (1.0 + share)
        for i in idxs:
            delta[i] = delta[i].with_prob(delta[i].prob * scale)
        delta.append(cl2.with_prob(share * scale))
    else:
        shape2 = clause_shape(cl2)
        members = [cl2] + [
            g for g in _grid_clauses(sig, cl2.body) if clause_shape(g) != shape2
        ]
        for cl in members:
            delta.append(cl.with_prob(1.0 / len(members)))
        new_bodies.append(b2)
    bodies = list(m.bodies) + new_bodies
    frontier = list(new_bodies)
    while frontier:
        nb = frontier.pop(0)
        for other in list(bodies):
            if other == nb or _comparable(nb, other):
                continue
            g = _body_mgu(nb, other)
            if g is None:
                continue
            # the bias admits no compound terms; unification with a
            # compound-carrying body is left to runtime routing
            if any(isinstance(a, Compound) for a in g.args):
                continue
            if g in bodies:
                continue
            grid = _grid_clauses(sig, g)
            for cl in grid:
                delta.append(cl.with_prob(1.0 / len(grid)))
            bodies.append(g)
            frontier.append(g)
    return Lohmm(m.sig, m.mu, delta)


def refine(m: Lohmm, sig: Signature, stats: Optional[dict] = None) -> list:
    """All one-step specializations of a model, repaired and validated.

    Deterministic and most general first across the whole model:
    observation-to-head merges (clauses in model order), then the
    remaining merges, then constant bindings. Candidates that
    duplicate an existing clause, collapse to an already-produced
    structure, or fail validation are dropped; ``stats['discarded']``
    counts them when a dict is supplied.
    """
    shapes = {clause_shape(cl) for cl in m.delta}
    seen = set()
    out = []
    dropped = 0
    moves = [(cl, th) for cl in m.delta for th in minimal_specializations(cl, sig)]
    moves.sort(key=lambda mv: _move_rank(mv[0], mv[1], sig))
    for cl, theta in moves:
        cl2 = AbstractTransition(
            0.0,
            apply(cl.body, theta),
            None if cl.obs is None else apply(cl.obs, theta),
            apply(cl.head, theta),
        )
        if clause_shape(cl2) in shapes:
            dropped += 1
            continue
        neighbor = _build_neighbor(m, sig, cl2)
        key = _structure_key(neighbor.delta)
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        if validate(neighbor):
            dropped += 1
            continue
        out.append(neighbor)
    if stats is not None:
        stats["discarded"] = stats.get("discarded", 0) + dropped
    return out


# ---------------------------------------------------------------------------
# search


def evaluate_neighbor(
    neighbor: Lohmm,
    ec: ExpectedCounts,
    cfg: SearchConfig,
    base: Optional[CompiledObjective] = None,
):
    """Fit a candidate structure against frozen counts: (params, Q).

    Touches only the count table, never the corpus, so ranking a
    neighborhood costs the same however much data produced the counts.
    The optimizer is warm-started from closed-form reweighting passes
    iterated to a fixed point, so its few gradient steps are spent
    refining an already competitive point rather than recovering from
    the candidate's provisional probabilities; running the parent
    through this same routine therefore gives differences in which the
    routine's own slack cancels. Raises IncompatibleCounts when the
    candidate cannot realize a positive-count transition.
    """
    comp = CompiledObjective(neighbor, ec, base=base)
    start = params_from_model(neighbor)
    q_prev = comp.value(start)
    for _ in range(40):
        start = comp.reweighted(start)
        q_new = comp.value(start)
        if q_new - q_prev <= 1e-9 * (abs(q_new) + 1.0):
            break
        q_prev = q_new
    return improve_params(neighbor, ec, start, cfg.optimizer, compiled=comp)


@dataclass
class _Hypothesis:
    model: Lohmm  # fitted probabilities
    params: ParamVector
    ec: ExpectedCounts
    loglik: float
    total: float
    # ranked neighbor evaluations, filled on first sweep; the count
    # table is frozen at fit time so the ranking never goes stale
    cands: Optional[list] = None


def _fit(m: Lohmm, params: ParamVector, data, cfg: SearchConfig, n_cases: int):
    params, ec, ll = gem_inner_loop(
        m, params, data, cfg.l_max, cfg.optimizer, cfg.tolerance
    )
    fitted = model_with_params(m, params)
    total = ll - penalty_value(len(m.delta), n_cases)
    return _Hypothesis(fitted, params, ec, ll, total)


def _entry(iteration, hyp, n_cases, wall_ms, evaluated, discarded) -> TraceEntry:
    pen = penalty_value(len(hyp.model.delta), n_cases)
    return TraceEntry(
        iteration,
        len(hyp.model.delta),
        len(hyp.model.bodies),
        hyp.loglik,
        pen,
        hyp.total,
        wall_ms,
        evaluated,
        discarded,
    )


def _result(hyp: _Hypothesis, n_cases: int, trace):
    pen = penalty_value(len(hyp.model.delta), n_cases)
    return hyp.model, hyp.params, Score(hyp.loglik, pen, hyp.total), trace


def sagem(data, m0: Lohmm, cfg: Optional[SearchConfig] = None):
    """Interleaved structure and parameter search from a starting model.

    Each iteration freezes the count tables of the current hypotheses
    and ranks every refined neighbor by estimated penalized score,
    est = ll_parent + (Q_neighbor - Q_parent) - penalty, where both Q
    values come from the same short optimizer run against the frozen
    table, so the run's own slack cancels out of the difference. The
    estimate never overstates what the candidate scores after a real
    refit.

    With beam_width 1 the search hill-climbs: the top-estimated
    neighbor is refit on the data and accepted only if its penalized
    score beats the incumbent's, and the search stops at the first
    rejection. A wider beam keeps the best hypothesis found so far
    and spends the other beam_width - 1 slots refitting the
    top-estimated structures not tried before, whether or not their
    estimates beat the incumbent: a refit re-infers the counts, which
    is what surfaces gains a frozen table cannot show, such as
    coupling hidden state to observations for the first time. Each
    structure is refit at most once, so the frontier drains and the
    search ends when it is exhausted or at the iteration cap. Either
    way the incumbent is only ever replaced by a refit hypothesis
    with a strictly better penalized score, so the reported best
    score never decreases.

    A hypothesis's counts are frozen when it is fitted, so its
    neighborhood is swept once and the ranking cached; iterations
    after the first only pay for sweeping freshly admitted
    hypotheses.

    Returns (model, params, Score, trace).
    """
    cfg = cfg or SearchConfig()
    sig = m0.sig
    n_cases = len(data)
    trace = []
    t0 = time.perf_counter()
    elite = _fit(m0, params_from_model(m0), data, cfg, n_cases)
    trace.append(
        _entry(0, elite, n_cases, 1000 * (time.perf_counter() - t0), 0, 0)
    )
    tried = {_structure_key(elite.model.delta)}
    beam = [elite]
    eval_serial = 0
    for it in range(1, cfg.max_outer_iterations + 1):
        t0 = time.perf_counter()
        evaluated = discarded = 0
        for h in beam:
            if h.cands is not None:
                continue
            stats: dict = {}
            neighbors = refine(h.model, sig, stats)
            discarded += stats.get("discarded", 0)
            base = CompiledObjective(h.model, h.ec)
            # screening runs are single-start; admissions are refit with
            # the full optimizer, so only the ranking sees the cheap one
            # and the parent reference uses the identical protocol
            eval_serial += 1
            opt = replace(
                cfg.optimizer, restarts=1, seed=cfg.seed * 1000003 + eval_serial
            )
            _ref_pv, q_ref = evaluate_neighbor(
                h.model, h.ec, replace(cfg, optimizer=opt), base
            )
            q_ref = max(q_ref, base.value(h.params))
            h.cands = []
            for nb in neighbors:
                eval_serial += 1
                opt = replace(
                    cfg.optimizer, restarts=1, seed=cfg.seed * 1000003 + eval_serial
                )
                try:
                    pv, q = evaluate_neighbor(nb, h.ec, replace(cfg, optimizer=opt), base)
                except IncompatibleCounts:
                    discarded += 1
                    continue
                evaluated += 1
                est = h.loglik + (q - q_ref) - penalty_value(len(nb.delta), n_cases)
                linked = any(
                    _links_arguments(cl) for cl in nb.delta[len(h.model.delta):]
                )
                h.cands.append(
                    (est, len(nb.delta), eval_serial, _structure_key(nb.delta), nb, pv, linked)
                )
        pool = [c for h in beam for c in h.cands if c[3] not in tried]
        pool.sort(key=lambda c: (-c[0], c[1], c[2]))
        limit = max(1, cfg.beam_width - 1)
        picks = []

        def _take(seq):
            for c in seq:
                if len(picks) >= limit:
                    return
                if c[3] in tried:
                    continue
                tried.add(c[3])
                picks.append(c)

        # one slot follows the ranking; the rest walk the variable-linking
        # moves in enumeration order, since the frozen table cannot see
        # the worth of a lone new link until a refit couples it
        _take(pool[:1])
        _take(sorted((c for c in pool if c[6]), key=lambda c: c[2]))
        _take(pool)
        if not picks:
            wall = 1000 * (time.perf_counter() - t0)
            trace.append(_entry(it, elite, n_cases, wall, evaluated, discarded))
            break
        entrants = [
            _fit(nb, pv, data, cfg, n_cases)
            for _est, _n, _order, _key, nb, pv, _lk in picks
        ]
        best_new = max(entrants, key=lambda h: h.total)
        stop = cfg.beam_width == 1 and best_new.total <= elite.total
        if best_new.total > elite.total:
            elite = best_new
        if cfg.beam_width == 1:
            beam = [elite]
        else:
            beam = [elite] + [h for h in entrants if h is not elite]
        wall = 1000 * (time.perf_counter() - t0)
        trace.append(_entry(it, elite, n_cases, wall, evaluated, discarded))
        if stop:
            break
    return _result(elite, n_cases, trace)


def naive_greedy(data, m0: Lohmm, cfg: Optional[SearchConfig] = None):
    """Reference search that refits every neighbor against the full corpus.

    Same moves and acceptance rule as the frozen-count search with a
    unit beam, but each candidate pays for a complete inner loop over
    the data, so its per-neighbor cost scales with corpus size.
    """
    cfg = cfg or SearchConfig()
    sig = m0.sig
    n_cases = len(data)
    trace = []
    t0 = time.perf_counter()
    current = _fit(m0, params_from_model(m0), data, cfg, n_cases)
    trace.append(
        _entry(0, current, n_cases, 1000 * (time.perf_counter() - t0), 0, 0)
    )
    for it in range(1, cfg.max_outer_iterations + 1):
        t0 = time.perf_counter()
        stats: dict = {}
        neighbors = refine(current.model, sig, stats)
        discarded = stats.get("discarded", 0)
        evaluated = 0
        best_cand = None
        for order, nb in enumerate(neighbors):
            try:
                hyp = _fit(nb, params_from_model(nb), data, cfg, n_cases)
            except IncompatibleCounts:
                discarded += 1
                continue
            evaluated += 1
            key = (-hyp.total, len(nb.delta), order)
            if best_cand is None or key < best_cand[0]:
                best_cand = (key, hyp)
        accepted = best_cand is not None and best_cand[1].total > current.total
        if accepted:
            current = best_cand[1]
        wall = 1000 * (time.perf_counter() - t0)
        trace.append(_entry(it, current, n_cases, wall, evaluated, discarded))
        if not accepted:
            break
    return _result(current, n_cases, trace)
