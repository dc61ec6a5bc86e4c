"""Parameter estimation over a fixed clause structure.

The objective is the expected score Q: posterior transition counts
weighted by the log composite step probabilities the current parameters
assign them. Q touches the data only through the count table, so one
evaluation costs the same for ten sequences as for ten thousand.

Parameters live in an unconstrained logit space; per-group softmax maps
them back to clause and selection probabilities, which keeps every
gradient step inside the simplex for free. The optimizer is plain
gradient ascent with a backtracking line search that never accepts a
decrease, warm-started at the current parameters with a few random
restarts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AmbiguousBody, IncompatibleCounts, NoMatchingBody
from .logic import Atom, Constant, apply, format_atom, subsumes
from .model import Lohmm, SelectionDistribution, most_specific_body
from .semantics import ExpectedCounts, expected_counts_with_loglik

__all__ = [
    "ParamVector",
    "OptimizerConfig",
    "params_from_model",
    "model_with_params",
    "CompiledObjective",
    "expected_score",
    "grad_transition",
    "grad_selection",
    "chain_to_beta",
    "improve_params",
    "gem_inner_loop",
]

_PROB_FLOOR = 1e-12  # logit of a structurally present but zero-weight clause
_ZERO_GUARD = 1e-300


@dataclass(eq=False)
class ParamVector:
    """Unconstrained logits: one per clause, one per (domain, constant).

    Clauses are ordered group by group in body order; selection entries
    follow domain declaration order. Softmax within each group induces
    the probabilities, so any real vector is admissible.
    """

    trans: np.ndarray
    select: np.ndarray

    def copy(self) -> "ParamVector":
        return ParamVector(self.trans.copy(), self.select.copy())


@dataclass
class OptimizerConfig:
    max_iterations: int = 10
    restarts: int = 5
    initial_step: float = 1.0
    step_shrink: float = 0.5
    min_step: float = 1e-8
    tolerance: float = 1e-6
    seed: int = 0


class _Layout:
    """Maps between flat parameter arrays and a model's structure."""

    def __init__(self, m: Lohmm):
        self.m = m
        self.clause_order = [i for b in m.bodies for i in m.groups[b]]
        self.clause_pos = {i: k for k, i in enumerate(self.clause_order)}
        starts, off = [], 0
        for b in m.bodies:
            starts.append(off)
            off += len(m.groups[b])
        self.trans_starts = np.array(starts, dtype=np.intp)
        self.n_trans = off
        self.domains = [d for d, cs in m.sig.domains.items() if cs]
        self.select_pairs = []
        starts, off = [], 0
        for d in self.domains:
            starts.append(off)
            for c in m.sig.domains[d]:
                self.select_pairs.append((d, c))
                off += 1
        self.select_starts = np.array(starts, dtype=np.intp)
        self.select_index = {dc: j for j, dc in enumerate(self.select_pairs)}
        self.n_select = off
        # both blocks normalize segment-wise, so one fused softmax serves
        self.all_starts = np.concatenate(
            [self.trans_starts, self.select_starts + self.n_trans]
        )


def _segment_softmax(x: np.ndarray, starts: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return x.copy()
    counts = np.diff(np.append(starts, len(x)))
    mx = np.maximum.reduceat(x, starts)
    e = np.exp(x - np.repeat(mx, counts))
    return e / np.repeat(np.add.reduceat(e, starts), counts)


def chain_to_beta(grad_lambda: np.ndarray, lambdas: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Pull a gradient over probabilities back through per-group softmax.

    For each group, g_beta = lam * (g_lambda - sum(lam * g_lambda)).
    """
    if len(lambdas) == 0:
        return lambdas.copy()
    counts = np.diff(np.append(starts, len(lambdas)))
    inner = np.add.reduceat(lambdas * grad_lambda, starts)
    return lambdas * (grad_lambda - np.repeat(inner, counts))


def _leave_one_out(vals: np.ndarray, prod: np.ndarray) -> np.ndarray:
    """Row products with one column left out: out[r, k] = prod(vals[r]) / vals[r, k].

    Softmax factors are positive, so division is the cheap route; the
    cumulative-product fallback covers exact zeros from underflow.
    """
    if vals.size and vals.min() > 0.0:
        return prod[:, None] / vals
    left = np.ones_like(vals)
    right = np.ones_like(vals)
    if vals.shape[1] > 1:
        left[:, 1:] = np.cumprod(vals[:, :-1], axis=1)
        right[:, :-1] = np.cumprod(vals[:, :0:-1], axis=1)[:, ::-1]
    return left * right


def _segment_frequencies(counts: np.ndarray, current: np.ndarray, starts: np.ndarray):
    """Normalize counts within each segment; empty segments keep ``current``."""
    if len(counts) == 0:
        return counts.copy()
    n = np.diff(np.append(starts, len(counts)))
    tot = np.repeat(np.add.reduceat(counts, starts), n)
    pos = tot > 0.0
    return np.where(pos, counts / np.where(pos, tot, 1.0), current)


def params_from_model(m: Lohmm) -> ParamVector:
    """Logits whose softmax reproduces the model's current probabilities."""
    lay = _Layout(m)
    trans = np.log(
        np.maximum([m.delta[i].prob for i in lay.clause_order], _PROB_FLOOR)
    )
    select = np.log(
        np.maximum([m.mu.probs[d][c] for d, c in lay.select_pairs], _PROB_FLOOR)
    )
    return ParamVector(trans, select)


def model_with_params(m: Lohmm, params: ParamVector) -> Lohmm:
    """The same structure with probabilities induced by ``params``."""
    lay = _Layout(m)
    lam_t = _segment_softmax(np.asarray(params.trans, dtype=float), lay.trans_starts)
    lam_s = _segment_softmax(np.asarray(params.select, dtype=float), lay.select_starts)
    probs = [0.0] * len(m.delta)
    for k, i in enumerate(lay.clause_order):
        probs[i] = float(lam_t[k])
    mu = {d: {} for d in lay.domains}
    for (d, c), v in zip(lay.select_pairs, lam_s):
        mu[d][c] = float(v)
    return Lohmm(
        m.sig,
        SelectionDistribution(mu),
        tuple(cl.with_prob(p) for cl, p in zip(m.delta, probs)),
    )


# ---------------------------------------------------------------------------
# compiled objective


def _triple_key(triple):
    b, h, o = triple
    return (format_atom(b), format_atom(h), "" if o is None else format_atom(o))


class _ClauseMatcher:
    """Grounds one clause against many triples, reusing shared stages.

    A match of clause i against (b, h, o) means the clause hosts b, its
    head grounds to h and its observation to o; the result is the tuple
    of (domain, constant) selection slots that grounding makes, or None
    if the clause cannot realize the triple. Bindings to non-constant
    terms cannot be selected and void the match.

    The body stage depends only on b and the head stage only on (b, h).
    Compile sweeps visit triples in sorted order, so consecutive calls
    share those keys; a one-entry cache per stage captures nearly every
    repeat without hashing atoms.
    """

    def __init__(self, m: Lohmm, lay: _Layout, i: int):
        self.cl = m.delta[i]
        self.lay = lay
        self.vdoms = m.clause_var_domains(i)
        self._last_b = self._b_stage = None
        self._last_h = self._h_stage = None

    def match(self, b: Atom, h: Atom, o):
        cl = self.cl
        if (cl.obs is None) != (o is None):
            return None
        if not (b is self._last_b or b == self._last_b):
            theta_b = subsumes(cl.body, b)
            self._last_b = b
            self._b_stage = (
                apply(cl.head, theta_b),
                None if cl.obs is None else apply(cl.obs, theta_b),
            )
            self._last_h = None
        head1, obs1 = self._b_stage
        if not (h is self._last_h or h == self._last_h):
            theta_h = subsumes(head1, h)
            self._last_h = h
            if theta_h is None or any(
                not isinstance(t, Constant) for t in theta_h.values()
            ):
                self._h_stage = None
            else:
                slots_h = tuple(
                    self.lay.select_index[(self.vdoms[v], t.name)]
                    for v, t in theta_h.items()
                )
                self._h_stage = (
                    slots_h,
                    None if obs1 is None else apply(obs1, theta_h),
                )
        if self._h_stage is None:
            return None
        slots_h, obs2 = self._h_stage
        if o is None:
            return slots_h
        theta_o = subsumes(obs2, o)
        if theta_o is None or any(
            not isinstance(t, Constant) for t in theta_o.values()
        ):
            return None
        return slots_h + tuple(
            self.lay.select_index[(self.vdoms[v], t.name)]
            for v, t in theta_o.items()
        )


def _same_shape(a, b) -> bool:
    # clause structure only; probabilities are free to differ
    return a.body == b.body and a.obs == b.obs and a.head == b.head


def _pad_slots(slot_lists, sentinel: int) -> np.ndarray:
    # pad ragged slot rows with a sentinel whose probability is pinned to one
    width = max((len(s) for s in slot_lists), default=0)
    sel = np.full((len(slot_lists), width), sentinel, dtype=np.intp)
    for r, slots in enumerate(slot_lists):
        sel[r, : len(slots)] = slots
    return sel


def _pad_width(sel: np.ndarray, width: int, sentinel: int) -> np.ndarray:
    if sel.shape[1] >= width:
        return sel
    pad = np.full((sel.shape[0], width - sel.shape[1]), sentinel, dtype=np.intp)
    return np.hstack([sel, pad])


class CompiledObjective:
    """Q and its gradients as a few vectorized passes over match arrays.

    Compilation walks every positive-count triple once, recording which
    clauses can realize it and which selection slots each realization
    uses. Evaluation then gathers probabilities, segment-sums per
    triple, and scatter-adds gradients; its cost is within the count
    table, independent of the corpus behind it.

    ``base`` is an objective compiled for the same counts on a model
    this one extends by appending clauses. Triples still routed to an
    untouched body group keep their match rows, sliced straight out of
    the base arrays; only triples whose routing or group changed are
    re-derived. That splice is what keeps a sweep over many structural
    neighbors cheap.
    """

    def __init__(self, m: Lohmm, ec: ExpectedCounts, base: "CompiledObjective" = None):
        self.m = m
        self.layout = lay = _Layout(m)
        if base is not None and (base.m.sig is not m.sig or not base._reusable):
            base = None
        if base is None:
            self._compile_full(m, lay, ec)
        else:
            self._compile_delta(m, lay, base)
        # match rows store delta indices; resolve to layout positions here
        pos = np.zeros(len(m.delta), dtype=np.intp)
        for k, i in enumerate(lay.clause_order):
            pos[i] = k
        self.m_clause = pos[self._m_clause_delta]

    def _compile_full(self, m: Lohmm, lay: _Layout, ec: ExpectedCounts):
        self.triples = sorted(ec.table, key=_triple_key)
        self.ec_w = np.array([ec.table[t] for t in self.triples], dtype=float)
        b_index: dict = {}
        b_list: list = []
        b_ids = np.empty(len(self.triples), dtype=np.intp)
        for ti, (b, _h, _o) in enumerate(self.triples):
            j = b_index.get(b)
            if j is None:
                j = b_index[b] = len(b_list)
                b_list.append(b)
            b_ids[ti] = j
        routes: list = [None] * len(b_list)
        matchers: dict = {}
        t_ix, d_ix, slot_lists = [], [], []
        row_starts = np.empty(len(self.triples) + 1, dtype=np.intp)
        row_starts[0] = 0
        for ti, triple in enumerate(self.triples):
            bi = b_ids[ti]
            if routes[bi] is None:
                try:
                    routes[bi] = most_specific_body(m, triple[0])
                except (NoMatchingBody, AmbiguousBody):
                    raise IncompatibleCounts(triple) from None
            hit = False
            for i in m.groups[routes[bi]]:
                mt = matchers.get(i)
                if mt is None:
                    mt = matchers[i] = _ClauseMatcher(m, lay, i)
                slots = mt.match(*triple)
                if slots is not None:
                    t_ix.append(ti)
                    d_ix.append(i)
                    slot_lists.append(slots)
                    hit = True
            if not hit:
                raise IncompatibleCounts(triple)
            row_starts[ti + 1] = len(t_ix)
        self._b_list = b_list
        self._b_ids = b_ids
        self._routes_by_b = routes
        self._row_starts = row_starts
        self.m_triple = np.array(t_ix, dtype=np.intp)
        self._m_clause_delta = np.array(d_ix, dtype=np.intp)
        self.m_sel = _pad_slots(slot_lists, lay.n_select)
        self._reusable = True

    def _compile_delta(self, m: Lohmm, lay: _Layout, base: "CompiledObjective"):
        self.triples = base.triples
        self.ec_w = base.ec_w
        self._b_list = base._b_list
        self._b_ids = base._b_ids
        n_b = len(self._b_list)
        routes: list = [None] * n_b
        # per body: keep base rows as they are, keep them and match the
        # clauses appended to the group, or re-derive from scratch
        KEEP, EXTEND, REMATCH = 0, 1, 2
        mode = np.zeros(n_b, dtype=np.int8)
        added: list = [None] * n_b
        for bi, b in enumerate(self._b_list):
            try:
                r = most_specific_body(m, b)
            except (NoMatchingBody, AmbiguousBody):
                mode[bi] = REMATCH
                continue
            routes[bi] = r
            if r != base._routes_by_b[bi]:
                mode[bi] = REMATCH
                continue
            g_new = m.groups.get(r)
            g_old = base.m.groups.get(r)
            if g_new == g_old:
                continue
            shared = set(g_old or ()) & set(g_new or ())
            if set(g_old or ()) == shared and all(
                _same_shape(m.delta[i], base.m.delta[i]) for i in shared
            ):
                mode[bi] = EXTEND
                added[bi] = tuple(i for i in g_new if i not in shared)
            else:
                mode[bi] = REMATCH
        self._routes_by_b = routes
        if not mode.any():
            self._row_starts = base._row_starts
            self.m_triple = base.m_triple
            self._m_clause_delta = base._m_clause_delta
            self.m_sel = base.m_sel
            self._reusable = True
            return
        mode_t = mode[self._b_ids]
        keep = np.repeat(mode_t < REMATCH, np.diff(base._row_starts))
        matchers: dict = {}
        t_ix, d_ix, slot_lists = [], [], []
        for ti in np.nonzero(mode_t > KEEP)[0]:
            triple = self.triples[ti]
            bi = self._b_ids[ti]
            if mode_t[ti] == EXTEND:
                idxs = added[bi]
            else:
                if routes[bi] is None:
                    raise IncompatibleCounts(triple)
                idxs = m.groups[routes[bi]]
            hit = False
            for i in idxs:
                mt = matchers.get(i)
                if mt is None:
                    mt = matchers[i] = _ClauseMatcher(m, lay, i)
                slots = mt.match(*triple)
                if slots is not None:
                    t_ix.append(ti)
                    d_ix.append(i)
                    slot_lists.append(slots)
                    hit = True
            if mode_t[ti] == REMATCH and not hit:
                raise IncompatibleCounts(triple)
        new_sel = _pad_slots(slot_lists, lay.n_select)
        old_sel = base.m_sel[keep]
        width = max(old_sel.shape[1], new_sel.shape[1])
        self.m_sel = np.vstack(
            [
                _pad_width(old_sel, width, lay.n_select),
                _pad_width(new_sel, width, lay.n_select),
            ]
        )
        self.m_triple = np.concatenate(
            [base.m_triple[keep], np.array(t_ix, dtype=np.intp)]
        )
        self._m_clause_delta = np.concatenate(
            [base._m_clause_delta[keep], np.array(d_ix, dtype=np.intp)]
        )
        # rows are no longer grouped by triple, so this object cannot
        # serve as a base itself
        self._row_starts = None
        self._reusable = False

    def _lambdas(self, params: ParamVector):
        lay = self.layout
        x = np.concatenate(
            [
                np.asarray(params.trans, dtype=float),
                np.asarray(params.select, dtype=float),
            ]
        )
        lam = _segment_softmax(x, lay.all_starts)
        return lam[: lay.n_trans], lam[lay.n_trans :]

    def _triple_probs(self, lam_t, lam_s):
        vals = np.append(lam_s, 1.0)[self.m_sel]
        prodsel = vals.prod(axis=1)
        contrib = lam_t[self.m_clause] * prodsel
        P = np.bincount(self.m_triple, weights=contrib, minlength=len(self.ec_w))
        return P, vals, prodsel

    def _check(self, P):
        if len(P) and P.min() < _ZERO_GUARD:
            raise IncompatibleCounts(self.triples[int(P.argmin())])

    def value(self, params: ParamVector) -> float:
        lam_t, lam_s = self._lambdas(params)
        P, _, _ = self._triple_probs(lam_t, lam_s)
        self._check(P)
        if len(P) == 0:
            return 0.0
        return float(self.ec_w @ np.log(P))

    def value_and_grad(self, params: ParamVector):
        """Q plus its gradient in logit space, as (Q, g_trans, g_select)."""
        lay = self.layout
        lam_t, lam_s = self._lambdas(params)
        P, vals, prodsel = self._triple_probs(lam_t, lam_s)
        self._check(P)
        if len(P) == 0:
            return 0.0, np.zeros(lay.n_trans), np.zeros(lay.n_select)
        Q = float(self.ec_w @ np.log(P))
        rm = (self.ec_w / P)[self.m_triple]
        g_lam_t = np.bincount(self.m_clause, weights=rm * prodsel, minlength=lay.n_trans)
        w = (rm * lam_t[self.m_clause])[:, None] * _leave_one_out(vals, prodsel)
        g_lam_s = np.bincount(
            self.m_sel.ravel(), weights=w.ravel(), minlength=lay.n_select + 1
        )[: lay.n_select]
        g = chain_to_beta(
            np.concatenate([g_lam_t, g_lam_s]),
            np.concatenate([lam_t, lam_s]),
            lay.all_starts,
        )
        return Q, g[: lay.n_trans], g[lay.n_trans :]

    def prob_gradients(self, params: ParamVector):
        """Partials of Q with respect to the probabilities themselves."""
        lay = self.layout
        lam_t, lam_s = self._lambdas(params)
        P, vals, prodsel = self._triple_probs(lam_t, lam_s)
        self._check(P)
        if len(P) == 0:
            return np.zeros(lay.n_trans), np.zeros(lay.n_select)
        rm = (self.ec_w / P)[self.m_triple]
        g_lam_t = np.bincount(self.m_clause, weights=rm * prodsel, minlength=lay.n_trans)
        w = (rm * lam_t[self.m_clause])[:, None] * _leave_one_out(vals, prodsel)
        g_lam_s = np.bincount(
            self.m_sel.ravel(), weights=w.ravel(), minlength=lay.n_select + 1
        )[: lay.n_select]
        return g_lam_t, g_lam_s

    def reweighted(self, params: ParamVector) -> ParamVector:
        """One closed-form reestimate from responsibilities at ``params``.

        Splits each triple's count over its realizations in proportion
        to their probability under ``params``, then resets every body
        group and selection distribution to its responsibility
        frequencies. Groups no count reaches keep their values. By the
        usual mixture argument this never lowers Q, which makes it a
        strong starting point to hand the gradient optimizer.
        """
        lay = self.layout
        lam_t, lam_s = self._lambdas(params)
        P, _vals, prodsel = self._triple_probs(lam_t, lam_s)
        self._check(P)
        if len(P) == 0:
            return params.copy()
        r = (self.ec_w / P)[self.m_triple] * lam_t[self.m_clause] * prodsel
        ct = np.bincount(self.m_clause, weights=r, minlength=lay.n_trans)
        new_t = _segment_frequencies(ct, lam_t, lay.trans_starts)
        cs = np.bincount(
            self.m_sel.ravel(),
            weights=np.repeat(r, self.m_sel.shape[1]),
            minlength=lay.n_select + 1,
        )[: lay.n_select]
        new_s = _segment_frequencies(cs, lam_s, lay.select_starts)
        return ParamVector(
            np.log(np.maximum(new_t, _PROB_FLOOR)),
            np.log(np.maximum(new_s, _PROB_FLOOR)),
        )


def expected_score(m: Lohmm, params: ParamVector, ec: ExpectedCounts) -> float:
    """Q: count-weighted log probability of every recorded ground step."""
    return CompiledObjective(m, ec).value(params)


def grad_transition(m: Lohmm, params: ParamVector, ec: ExpectedCounts) -> np.ndarray:
    """dQ/d(clause probability), aligned with m.delta order."""
    comp = CompiledObjective(m, ec)
    g_lam_t, _ = comp.prob_gradients(params)
    out = np.zeros(len(m.delta))
    for k, i in enumerate(comp.layout.clause_order):
        out[i] = g_lam_t[k]
    return out


def grad_selection(m: Lohmm, params: ParamVector, ec: ExpectedCounts) -> dict:
    """dQ/d(selection probability), keyed by (domain, constant)."""
    comp = CompiledObjective(m, ec)
    _, g_lam_s = comp.prob_gradients(params)
    return {dc: float(g) for dc, g in zip(comp.layout.select_pairs, g_lam_s)}


# ---------------------------------------------------------------------------
# ascent


def _ascend(comp: CompiledObjective, pv: ParamVector, cfg: OptimizerConfig):
    """Backtracking gradient ascent; never moves to a lower value.

    Probes are value-only along the normalized gradient, so the step
    length is an arc length independent of gradient scale; the gradient
    is recomputed only at accepted points and the working step carries
    over between iterations instead of restarting from the top.
    """
    q, gt, gs = comp.value_and_grad(pv)
    step = cfg.initial_step
    for _ in range(cfg.max_iterations):
        norm = math.sqrt(float(gt @ gt) + float(gs @ gs))
        if norm == 0.0:
            break
        accepted = False
        # the carried step usually lands first try, so compute its
        # gradient speculatively; later probes fall back to value-only
        probe_grad = True
        while step >= cfg.min_step:
            s = step / norm
            cand = ParamVector(pv.trans + s * gt, pv.select + s * gs)
            try:
                if probe_grad:
                    qc, gtc, gsc = comp.value_and_grad(cand)
                else:
                    qc = comp.value(cand)
            except IncompatibleCounts:
                qc = float("-inf")
            if qc > q:
                if not probe_grad:
                    qc, gtc, gsc = comp.value_and_grad(cand)
                accepted = True
                break
            probe_grad = False
            step *= cfg.step_shrink
        if not accepted:
            break
        gain = qc - q
        pv, q, gt, gs = cand, qc, gtc, gsc
        step = min(step / cfg.step_shrink, cfg.initial_step)
        if gain <= cfg.tolerance * (abs(q) + 1.0):
            break
    return pv, q


def improve_params(
    m: Lohmm,
    ec: ExpectedCounts,
    start: ParamVector,
    cfg: Optional[OptimizerConfig] = None,
    compiled: Optional[CompiledObjective] = None,
):
    """Best parameters over one warm-started run plus random restarts.

    The warm run begins at ``start`` and the line search only ever
    accepts improvements, so the returned Q is at least Q(start);
    restart runs draw standard normal logits and replace the warm
    result only when they end strictly higher. Pass ``compiled`` to
    reuse an already-built objective for the same (m, ec) pair.
    """
    cfg = cfg or OptimizerConfig()
    comp = compiled if compiled is not None else CompiledObjective(m, ec)
    rng = np.random.default_rng(cfg.seed)
    best_pv, best_q = _ascend(comp, start.copy(), cfg)
    for _ in range(max(0, cfg.restarts - 1)):
        init = ParamVector(
            rng.standard_normal(len(start.trans)), rng.standard_normal(len(start.select))
        )
        try:
            pv, q = _ascend(comp, init, cfg)
        except IncompatibleCounts:
            continue
        if q > best_q:
            best_pv, best_q = pv, q
    return best_pv, best_q


def gem_inner_loop(
    m: Lohmm,
    params0: ParamVector,
    data: Sequence[Sequence[Atom]],
    l_max: int,
    cfg: Optional[OptimizerConfig] = None,
    tolerance: float = 1e-6,
):
    """Alternate count expectation and parameter improvement on one structure.

    Runs at most ``l_max`` improvement sweeps, stopping early once the
    training log likelihood moves by less than ``tolerance`` relative.
    Returns (params, counts, loglik) where the counts come from a final
    expectation pass under the returned parameters; with l_max = 0 that
    is simply params0 with its own counts.
    """
    cfg = cfg or OptimizerConfig()
    params = params0
    ec, ll = expected_counts_with_loglik(model_with_params(m, params), data)
    for _ in range(l_max):
        params, _ = improve_params(m, ec, params, cfg)
        ec2, ll2 = expected_counts_with_loglik(model_with_params(m, params), data)
        done = abs(ll2 - ll) <= tolerance * (abs(ll) + 1.0)
        ec, ll = ec2, ll2
        if done:
            break
    return params, ec, ll
