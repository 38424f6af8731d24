"""Multi-target qualitative reachability over all subsets of a target set.

Three decision procedures, each filling one table row per subset K' of the
given targets K (rows ordered by size, then numeric mask):

  zero_sets         Z_{K'}: starts from which every strategy has probability
                    0 of covering all of K' in one play.  Computed through
                    the complement \\bar Z (positive joint coverage), seeded
                    with single-target positive reach sets and closed under
                    one-step and branching-split rules.
  limit_sure_sets   F_{K'}: starts whose supremum coverage probability is 1.
  almost_sure_sets  F_{K'}: starts with a strategy covering K' w.p. exactly 1.

The two reachability procedures share one inner pipeline per row: a "doomed
to cover" set D (cover is forced no matter what remains), a "spoiled" set S
(coverage probability bounded away from 1), and a component analysis of
what is left, iterated until the row partitions into F / S / Z.  They
differ only in the component notion (MEC for limit-sure, SCC for
almost-sure) and the component acceptance rule.

Internally every node set is an integer bitmask over non-terminal indices
and every subset of K is an integer bitmask over target positions.  Tables
additionally keep, per non-terminal, the set of already-completed rows it
belongs to; those families are downward closed (covering more targets is
never easier), so branching-split searches iterate the family's maximal
elements only.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from math import isqrt

from .graph import _bits, _mec_masks, _scc_masks, build_dependency_graph
from .model import L_FORM, M_FORM, ModelError, Q_FORM, target_set
from .single import positive_reach_witness


# ---------------------------------------------------------------------------
# shared per-model structures


class _Structs:
    def __init__(self, m):
        self.m = m
        n = m.n
        self.n = n
        self.all_mask = (1 << n) - 1
        self.forms = m.forms
        self.child_mask = [0] * n  # positive-probability children, empty symbol excluded
        self.has_eps = [False] * n
        self.moves = [None] * n  # M-form: ((action, child), ...)
        self.q_kids = [None] * n  # Q-form: (left, right)
        self.l_choices = [None] * n
        succ = [set() for _ in range(n)]
        for i in range(n):
            form = m.forms[i]
            if form == L_FORM:
                self.l_choices[i] = m.l_choices(i)
                for _, child in self.l_choices[i]:
                    if child is None:
                        self.has_eps[i] = True
                    else:
                        self.child_mask[i] |= 1 << child
                        succ[i].add(child)
            elif form == M_FORM:
                self.moves[i] = m.m_moves(i)
                for _, child in self.moves[i]:
                    self.child_mask[i] |= 1 << child
                    succ[i].add(child)
            else:
                left, right = m.q_children(i)
                self.q_kids[i] = (left, right)
                self.child_mask[i] |= (1 << left) | (1 << right)
                succ[i].update((left, right))
        self.succ = [sorted(s) for s in succ]
        pred = [set() for _ in range(n)]
        for i in range(n):
            for j in succ[i]:
                pred[j].add(i)
        self.pred = [sorted(s) for s in pred]
        self.l_nodes = [i for i in range(n) if m.forms[i] == L_FORM]
        self.q_nodes = [i for i in range(n) if m.forms[i] == Q_FORM]
        self.m_nodes = [i for i in range(n) if m.forms[i] == M_FORM]
        self.m_mask = 0
        for i in self.m_nodes:
            self.m_mask |= 1 << i
        self.prob_mask = 0
        for i in self.l_nodes:
            self.prob_mask |= 1 << i


class _Family:
    """Per-non-terminal membership over completed rows, plus maximal rows.

    `bits[i]` has bit M set iff non-terminal i belongs to the table row for
    subset-mask M.  The families are downward closed in M, so `maximal[i]`
    (an antichain, maintained under insertion order of nondecreasing row
    size) suffices for split searches.
    """

    def __init__(self, n):
        self.bits = [0] * n
        self.maximal = [[] for _ in range(n)]

    def add_row(self, row_mask, members_mask):
        for i in _bits(members_mask):
            self.bits[i] |= 1 << row_mask
            ach = self.maximal[i]
            if not any(row_mask | a == a for a in ach):
                ach[:] = [a for a in ach if a | row_mask != row_mask]
                ach.append(row_mask)

    def split(self, j, r, budget, proper):
        """A partition (A, B) of `budget` with j in row A and r in row B.

        With `proper`, both halves must be nonempty.  Downward closure makes
        scanning the maximal rows of either side complete whenever the
        outcome is not already implied by a same-row membership (which the
        in-row closure rules detect separately).
        """
        first = self.maximal[j]
        second = self.maximal[r]
        if len(first) <= len(second):
            sides = ((first, self.bits[r], False), (second, self.bits[j], True))
        else:
            sides = ((second, self.bits[j], True), (first, self.bits[r], False))
        for ach, other_bits, swapped in sides:
            for a in ach:
                part = a & budget
                rest = budget & ~part
                if proper and (part == 0 or rest == 0):
                    continue
                if (other_bits >> rest) & 1:
                    return (rest, part) if swapped else (part, rest)
        return None


def _subset_masks_by_size(k):
    masks = sorted(range(1 << k), key=lambda mm: (bin(mm).count("1"), mm))
    return masks


def _mask_of_positions(positions):
    mm = 0
    for p in positions:
        mm |= 1 << p
    return mm


# ---------------------------------------------------------------------------
# zero sets (positive joint coverage and its complement)


@dataclass
class ZeroResult:
    """Per-subset zero sets with provenance for witness synthesis."""

    model: object
    targets: tuple
    zbar_rows: dict  # subset mask -> nt bitmask of \bar Z
    prov: dict | None  # subset mask -> {nt: step tuple}
    path_witnesses: dict  # target index -> PathWitness
    kind: str = "zero"

    def subset_mask(self, subset):
        return _subset_mask(self.model, self.targets, subset)

    def zbar(self, subset):
        return frozenset(_bits(self.zbar_rows[self.subset_mask(subset)]))

    def z(self, subset):
        n_mask = (1 << self.model.n) - 1
        return frozenset(_bits(n_mask & ~self.zbar_rows[self.subset_mask(subset)]))

    def z_names(self, subset):
        return frozenset(self.model.names[i] for i in self.z(subset))

    def zbar_names(self, subset):
        return frozenset(self.model.names[i] for i in self.zbar(subset))

    def provenance(self, subset):
        if self.prov is None:
            raise ModelError("zero result computed without provenance recording")
        mask = self.subset_mask(subset)
        return {
            self.model.names[i]: _step_tag("Z", step)
            for i, step in self.prov[mask].items()
        }

    def bound(self, subset):
        """Exact positive lower bound achieved by the coverage witness."""
        mask = self.subset_mask(subset)
        members = _bits(self.zbar_rows[mask])
        return min(self._bound_at(mask, i) for i in members)

    def _bound_at(self, mask, i, _memo=None):
        if self.prov is None:
            raise ModelError("bounds require provenance recording")
        if _memo is None:
            _memo = {}
        key = (mask, i)
        if key in _memo:
            return _memo[key]
        _memo[key] = Fraction(1)  # benign on cycles; provenance is acyclic
        if mask == 0:
            return Fraction(1)
        step = self.prov[mask][i]
        m = self.model
        kind = step[0]
        if kind == "path":
            q = self.targets[_bits(mask)[0]]
            out = self.path_witnesses[q].bound[i]
        elif kind == "seed.L":
            _, j, sub = step
            p = sum((p for p, c in m.l_choices(i) if c == j), Fraction(0))
            out = p * self._bound_at(sub, j, _memo)
        elif kind == "seed.M":
            _, _a, j, sub = step
            out = self._bound_at(sub, j, _memo)
        elif kind in ("seed.Q.target", "seed.Q.split"):
            _, part, rest = step
            left, right = m.q_children(i)
            out = self._bound_at(part, left, _memo) * self._bound_at(rest, right, _memo)
        elif kind == "close.L":
            _, j = step
            p = sum((p for p, c in m.l_choices(i) if c == j), Fraction(0))
            out = p * self._bound_at(mask, j, _memo)
        elif kind == "close.M":
            _, _a, j = step
            out = self._bound_at(mask, j, _memo)
        else:  # close.Q
            _, _side, child = step
            out = self._bound_at(mask, child, _memo)
        _memo[key] = out
        return out

    def audit(self):
        _audit_zero(self)


def zero_sets(m, targets, record=True):
    """Fill the \\bar Z / Z table for every subset of `targets`."""
    targets = target_set(m, targets)
    st = _Structs(m)
    k = len(targets)
    fam = _Family(st.n)
    rows = {}
    prov = {} if record else None
    path_witnesses = {q: positive_reach_witness(m, q) for q in targets}

    def complete(mask, zb):
        rows[mask] = zb
        fam.add_row(mask, zb)

    complete(0, st.all_mask)
    if record:
        prov[0] = {}
    for pos, q in enumerate(targets):
        w = 0
        for i in path_witnesses[q].members:
            w |= 1 << i
        complete(1 << pos, w)
        if record:
            prov[1 << pos] = {i: ("path",) for i in path_witnesses[q].members}

    for mask in _subset_masks_by_size(k):
        size = bin(mask).count("1")
        if size < 2:
            continue
        zb = 0
        pv = {} if record else None
        pending = deque()

        def add(i, step):
            nonlocal zb
            zb |= 1 << i
            if record:
                pv[i] = step
            pending.append(i)

        # seeding: target-specific one-step rules, then branching splits
        for pos in _bits(mask):
            i = targets[pos]
            sub = mask ^ (1 << pos)
            form = st.forms[i]
            if form == L_FORM:
                hit = st.child_mask[i] & rows[sub]
                if hit:
                    add(i, ("seed.L", _low(hit), sub))
            elif form == M_FORM:
                for a, j in st.moves[i]:
                    if (rows[sub] >> j) & 1:
                        add(i, ("seed.M", a, j, sub))
                        break
            else:
                left, right = st.q_kids[i]
                got = fam.split(left, right, sub, proper=False)
                if got:
                    add(i, ("seed.Q.target", got[0], got[1]))
        for i in st.q_nodes:
            if (zb >> i) & 1:
                continue
            left, right = st.q_kids[i]
            got = fam.split(left, right, mask, proper=True)
            if got:
                add(i, ("seed.Q.split", got[0], got[1]))

        # closure to the least fixed point
        while pending:
            j = pending.popleft()
            for i in st.pred[j]:
                if (zb >> i) & 1:
                    continue
                form = st.forms[i]
                if form == L_FORM or form == M_FORM:
                    hit = st.child_mask[i] & zb
                    if not hit:
                        continue
                    child = _low(hit)
                    if form == L_FORM:
                        add(i, ("close.L", child))
                    else:
                        a = next(a for a, c in st.moves[i] if c == child)
                        add(i, ("close.M", a, child))
                else:
                    l_, r_ = st.q_kids[i]
                    if (zb >> l_) & 1:
                        add(i, ("close.Q", "l", l_))
                    elif (zb >> r_) & 1:
                        add(i, ("close.Q", "r", r_))
        complete(mask, zb)
        if record:
            prov[mask] = pv

    return ZeroResult(
        model=m, targets=targets, zbar_rows=rows, prov=prov, path_witnesses=path_witnesses
    )


def _low(mask):
    return (mask & -mask).bit_length() - 1


# ---------------------------------------------------------------------------
# limit-sure / almost-sure tables


@dataclass(frozen=True)
class Component:
    """One MEC/SCC of the residual region, with its covered-target marker."""

    members: int
    covered: int  # subset mask of targets q with H_q intersecting the component
    in_f: bool
    escape: tuple | None = None  # (m_node, action, successor) for limit-sure escapes


@dataclass
class ReachRow:
    mask: int
    z: int
    d: int
    s: int
    f_core: int  # F minus D: the residual region kept at loop exit
    f: int  # final answer: f_core | d
    x: int
    comps: tuple = ()
    h: dict = field(default_factory=dict)  # target position -> nt bitmask
    prov_d: dict | None = None
    prov_f: dict | None = None

    def f_members(self):
        return _bits(self.f)


@dataclass
class ReachResult:
    """Per-subset F/S/Z partition tables, plus witness provenance."""

    kind: str  # "limit-sure" or "almost-sure"
    model: object
    targets: tuple
    zero: ZeroResult
    rows: dict  # subset mask -> ReachRow

    def subset_mask(self, subset):
        return _subset_mask(self.model, self.targets, subset)

    def row(self, subset):
        return self.rows[self.subset_mask(subset)]

    def f(self, subset):
        return frozenset(_bits(self.row(subset).f))

    def s(self, subset):
        return frozenset(_bits(self.row(subset).s))

    def z(self, subset):
        return frozenset(_bits(self.row(subset).z))

    def f_names(self, subset):
        return frozenset(self.model.names[i] for i in self.f(subset))

    def provenance(self, subset):
        row = self.row(subset)
        if row.prov_d is None:
            raise ModelError("result computed without provenance recording")
        out = {}
        for i, step in row.prov_d.items():
            out[("D", self.model.names[i])] = _step_tag("D", step)
        for i, step in row.prov_f.items():
            out[("F", self.model.names[i])] = _step_tag("F", step)
        return out

    def audit(self):
        _audit_reach(self)


def limit_sure_sets(m, targets, zero=None, record=True):
    """Supremum-probability-1 coverage sets for every subset of targets."""
    return _reach_tables(m, targets, scc_mode=False, zero=zero, record=record)


def almost_sure_sets(m, targets, zero=None, record=True):
    """Exact-probability-1 coverage sets for every subset of targets."""
    return _reach_tables(m, targets, scc_mode=True, zero=zero, record=record)


def singleton_reach_row(m, q, scc_mode):
    """The one-target specialization of the reachability pipeline."""
    result = _reach_tables(m, (q,), scc_mode=scc_mode, record=False)
    return result.rows[1]


def _reach_tables(m, targets, scc_mode, zero=None, record=True):
    targets = target_set(m, targets)
    if zero is None:
        zero = zero_sets(m, targets, record=record)
    if tuple(zero.targets) != tuple(targets):
        raise ModelError("zero result computed for a different target set")
    st = _Structs(m)
    k = len(targets)
    fam = _Family(st.n)  # F-membership over completed rows
    rows = {}
    f_vals = {0: st.all_mask}
    s_vals = {0: 0}
    u_vals = {0: 0}  # union of S over proper nonempty subsets

    rows[0] = ReachRow(
        mask=0, z=0, d=0, s=0, f_core=st.all_mask, f=st.all_mask, x=st.all_mask,
        prov_d={} if record else None, prov_f={} if record else None,
    )
    fam.add_row(0, st.all_mask)

    w_masks = {}
    for pos, q in enumerate(targets):
        w = 0
        for i in zero.path_witnesses[q].members:
            w |= 1 << i
        w_masks[pos] = w

    for mask in _subset_masks_by_size(k):
        if mask == 0:
            continue
        row = _reach_row(st, targets, mask, zero, fam, f_vals, s_vals, u_vals,
                         w_masks, scc_mode, record)
        rows[mask] = row
        f_vals[mask] = row.f
        s_vals[mask] = row.s
        u_vals[mask] = _union_below(mask, s_vals, u_vals)
        fam.add_row(mask, row.f)

    return ReachResult(
        kind="almost-sure" if scc_mode else "limit-sure",
        model=m, targets=targets, zero=zero, rows=rows,
    )


def _union_below(mask, s_vals, u_vals):
    u = 0
    rest = mask
    while rest:
        low = rest & -rest
        rest ^= low
        u |= s_vals[mask ^ low] | u_vals[mask ^ low]
    return u


def _reach_row(st, targets, mask, zero, fam, f_vals, s_vals, u_vals, w_masks,
               scc_mode, record):
    all_mask = st.all_mask
    z = all_mask & ~zero.zbar_rows[mask]
    not_z = all_mask & ~z
    size = bin(mask).count("1")

    d = 0
    prov_d = {} if record else None
    pending = deque()

    def add_d(i, step):
        nonlocal d
        d |= 1 << i
        if record:
            prov_d[i] = step
        pending.append(i)

    if size == 1:
        # the lone target is covered at the root; the remaining obligation is empty
        q = targets[_low(mask)]
        add_d(q, ("seed.target",))
    else:
        for pos in _bits(mask):
            i = targets[pos]
            if not (not_z >> i) & 1:
                continue
            sub = mask ^ (1 << pos)
            form = st.forms[i]
            if form == L_FORM:
                if not st.has_eps[i] and st.child_mask[i] & ~f_vals[sub] == 0:
                    add_d(i, ("seed.L", sub))
            elif form == M_FORM:
                for a, j in st.moves[i]:
                    if (f_vals[sub] >> j) & 1:
                        add_d(i, ("seed.M", a, j, sub))
                        break
            else:
                left, right = st.q_kids[i]
                got = fam.split(left, right, sub, proper=False)
                if got:
                    add_d(i, ("seed.Q.target", got[0], got[1]))
        for i in st.q_nodes:
            if (d >> i) & 1 or not (not_z >> i) & 1:
                continue
            left, right = st.q_kids[i]
            got = fam.split(left, right, mask, proper=True)
            if got:
                add_d(i, ("seed.Q.split", got[0], got[1]))

    while pending:
        j = pending.popleft()
        for i in st.pred[j]:
            if (d >> i) & 1 or not (not_z >> i) & 1:
                continue
            form = st.forms[i]
            if form == L_FORM:
                if not st.has_eps[i] and st.child_mask[i] & ~d == 0:
                    add_d(i, ("close.L",))
            elif form == M_FORM:
                if (d >> j) & 1:
                    a = next(a for a, c in st.moves[i] if c == j)
                    add_d(i, ("close.M", a, j))
            else:
                l_, r_ = st.q_kids[i]
                if (d >> l_) & 1:
                    add_d(i, ("close.Q", "l", l_))
                elif (d >> r_) & 1:
                    add_d(i, ("close.Q", "r", r_))

    x = all_mask & ~(d | z)

    # initial spoiled set: targets still unresolved, extinction or zero leaks,
    # and everything already spoiled for a smaller obligation
    s = 0
    for pos in _bits(mask):
        i = targets[pos]
        if (x >> i) & 1:
            s |= 1 << i
    for i in st.l_nodes:
        if (x >> i) & 1 and (st.has_eps[i] or st.child_mask[i] & z):
            s |= 1 << i
    s |= _union_below(mask, s_vals, u_vals) & x

    comps_out = ()
    h_out = {}
    prov_f = {} if record else None
    f = 0
    while True:
        s = _s_closure(st, x, s, z)
        xs = x & ~s
        h = {}
        for pos in _bits(mask):
            hq = 0
            w = w_masks[pos]
            for i in st.q_nodes:
                if not (xs >> i) & 1:
                    continue
                left, right = st.q_kids[i]
                if ((xs >> left) & 1 and (w >> right) & 1) or (
                    (w >> left) & 1 and (xs >> right) & 1
                ):
                    hq |= 1 << i
            h[pos] = hq

        f = 0
        if record:
            prov_f = {}
        comps = []
        any_h = any(h[pos] for pos in h)
        need_all = scc_mode
        if any_h and (not need_all or all(h[pos] for pos in h)):
            raw = (
                _scc_masks(st.succ, xs)
                if scc_mode
                else _mec_masks(st.succ, st.prob_mask, xs)
            )
            if scc_mode:
                raw = [cm for cm in raw if cm & (cm - 1) or _self_loop(st, cm)]
            raw.sort(key=lambda cm: _low(cm))
            for cm in raw:
                covered = 0
                for pos in _bits(mask):
                    if h[pos] & cm:
                        covered |= 1 << pos
                if scc_mode:
                    if covered == mask:
                        seeded = 0
                        for pos in _bits(mask):
                            seeded |= h[pos] & cm
                        f |= seeded
                        comps.append(Component(cm, covered, True))
                        if record:
                            for i in _bits(seeded):
                                prov_f[i] = ("seed.component", len(comps) - 1)
                    else:
                        comps.append(Component(cm, covered, False))
                else:
                    if covered == mask:
                        f |= cm
                        comps.append(Component(cm, covered, True))
                        if record:
                            for i in _bits(cm):
                                prov_f[i] = ("seed.component", len(comps) - 1)
                    elif covered:
                        escape = _find_escape(st, cm, f_vals[mask & ~covered])
                        if escape:
                            f |= cm
                            comps.append(Component(cm, covered, True, escape))
                            if record:
                                for i in _bits(cm):
                                    prov_f[i] = ("seed.component", len(comps) - 1)
                        else:
                            comps.append(Component(cm, covered, False))
                    else:
                        comps.append(Component(cm, covered, False))

        f = _f_closure(st, xs, f, d, prov_f if record else None)
        if xs & ~f:
            s = x & ~f
            continue
        comps_out = tuple(comps)
        h_out = h
        break

    return ReachRow(
        mask=mask, z=z, d=d, s=s, f_core=f, f=f | d, x=x,
        comps=comps_out, h=h_out, prov_d=prov_d, prov_f=prov_f,
    )


def _self_loop(st, cm):
    u = _low(cm)
    return u in st.succ[u]


def _find_escape(st, cm, target_f):
    for u in _bits(cm & st.m_mask):
        for a, v in st.moves[u]:
            if (target_f >> v) & 1:
                return (u, a, v)
    return None


def _s_closure(st, x, s, z):
    sz = s | z
    queue = deque(_bits(x & ~s))
    queued = x & ~s
    while queue:
        i = queue.popleft()
        queued &= ~(1 << i)
        if (sz >> i) & 1:
            continue
        form = st.forms[i]
        if form == L_FORM:
            hit = st.child_mask[i] & sz
        elif form == M_FORM:
            hit = st.child_mask[i] & ~sz == 0
        else:
            hit = st.child_mask[i] & ~sz == 0
        if hit:
            s |= 1 << i
            sz |= 1 << i
            for p in st.pred[i]:
                if (x >> p) & 1 and not (sz >> p) & 1 and not (queued >> p) & 1:
                    queue.append(p)
                    queued |= 1 << p
    return s


def _f_closure(st, xs, f, d, prov_f):
    fd = f | d
    queue = deque(_bits(xs & ~f))
    queued = xs & ~f
    while queue:
        i = queue.popleft()
        queued &= ~(1 << i)
        if (f >> i) & 1:
            continue
        form = st.forms[i]
        step = None
        if form == L_FORM:
            hit = st.child_mask[i] & fd
            if hit:
                step = ("close.L",)
        elif form == M_FORM:
            hit = st.child_mask[i] & f
            if hit:
                child = _low(hit)
                a = next(a for a, c in st.moves[i] if c == child)
                step = ("close.M", a, child)
        else:
            l_, r_ = st.q_kids[i]
            if (f >> l_) & 1:
                step = ("close.Q", "l", l_)
            elif (f >> r_) & 1:
                step = ("close.Q", "r", r_)
        if step is not None:
            f |= 1 << i
            fd |= 1 << i
            if prov_f is not None:
                prov_f[i] = step
            for p in st.pred[i]:
                if (xs >> p) & 1 and not (f >> p) & 1 and not (queued >> p) & 1:
                    queue.append(p)
                    queued |= 1 << p
    return f


# ---------------------------------------------------------------------------
# witness bundles: the rational parameters behind the synthesized strategies


@dataclass(frozen=True)
class WitnessBundle:
    subset: tuple
    b: Fraction  # positive coverage lower bound used by the construction
    lam: Fraction  # min(1/max action count, min rule probability)
    epsilon: Fraction | None = None
    eps_child: Fraction | None = None  # slack handed to each branch of a split
    eps_prime: Fraction | None = None  # per-target slack inside a component
    threshold: int | None = None  # counter threshold before switching away


def model_lambda(m):
    gamma = 1
    probs = []
    for i in range(m.n):
        if m.kinds[i] == "controlled":
            gamma = max(gamma, len(m.actions(i)))
        for r in m.rules[i]:
            probs.append(r.prob)
    lam = min([Fraction(1, gamma)] + probs)
    return lam


def singleton_bound(zero_result, pos):
    q = zero_result.targets[pos]
    pw = zero_result.path_witnesses[q]
    return min(pw.bound.values())


def split_epsilon(eps):
    """A rational e with (1 - e)^2 >= 1 - eps, exact when possible.

    Two branches each guaranteed 1 - e jointly guarantee 1 - eps.  When
    sqrt(1 - eps) is rational the value is exact; otherwise a conservative
    rational upper bound on the root is used (the threshold rounds up).
    """
    eps = Fraction(eps)
    if not 0 < eps < 1:
        raise ModelError("epsilon must lie strictly between 0 and 1")
    return 1 - _sqrt_upper(1 - eps)


def _sqrt_upper(x):
    a, b = x.numerator, x.denominator
    root = isqrt(a * b)
    if root * root == a * b:
        return Fraction(root, b)
    scale = 1 << 64
    return Fraction(isqrt(a * b * scale * scale) + 1, b * scale)


def counter_threshold(b, k, eps_prime):
    """Least d >= 1 with (1 - b/k)^d <= eps_prime (conservative when huge)."""
    x = Fraction(b) / k
    if x >= 1:
        return 1
    base = 1 - x
    # upper estimate from ln(1-x) <= -x and ln(1/e') <= (bit gap + 1) * ln 2
    gap = max(1, eps_prime.denominator.bit_length() - eps_prime.numerator.bit_length() + 1)
    hi = -(-(gap * Fraction(6932, 10000)) // x)  # ceil in exact arithmetic
    hi = max(1, int(hi))
    if hi > 10**6 or hi * base.denominator.bit_length() > 10**7:
        return hi
    p, q = base.numerator, base.denominator
    u, v = eps_prime.numerator, eps_prime.denominator

    def ok(dd):
        return p**dd * v <= u * q**dd

    lo, high = 1, hi
    if not ok(high):
        return hi  # estimate beat exact arithmetic; keep the safe side
    while lo < high:
        mid = (lo + high) // 2
        if ok(mid):
            high = mid
        else:
            lo = mid + 1
    return lo


def witness_bundle(result, subset, epsilon=None):
    """Rational parameters for the witness strategy of one subset row."""
    mask = result.subset_mask(subset)
    zero = result if isinstance(result, ZeroResult) else result.zero
    subset_targets = tuple(result.targets[pos] for pos in _bits(mask))
    lam = model_lambda(result.model)
    if isinstance(result, ZeroResult):
        return WitnessBundle(subset=subset_targets, b=result.bound(subset), lam=lam)
    bs = [singleton_bound(zero, pos) for pos in _bits(mask)]
    b = min(bs) if bs else Fraction(1)
    if epsilon is None:
        return WitnessBundle(subset=subset_targets, b=b, lam=lam)
    eps = Fraction(epsilon)
    eps_child = split_epsilon(eps)
    k = len(result.targets)
    eps_prime = eps_child / k
    d = counter_threshold(b, k, eps_prime)
    return WitnessBundle(
        subset=subset_targets, b=b, lam=lam, epsilon=eps,
        eps_child=eps_child, eps_prime=eps_prime, threshold=d,
    )


# ---------------------------------------------------------------------------
# audits: re-verify the fixpoint conditions on a finished result


def _audit_zero(res):
    """No seed or closure rule of the zero procedure may still fire."""
    m = res.model
    st = _Structs(m)
    fam = _Family(st.n)
    target_pos = {q: pos for pos, q in enumerate(res.targets)}
    for mask in _subset_masks_by_size(len(res.targets)):
        zb = res.zbar_rows[mask]
        size = bin(mask).count("1")
        if size >= 2:
            for i in range(st.n):
                if (zb >> i) & 1:
                    continue
                where = f"zero row {mask:b}, {m.names[i]}"
                form = st.forms[i]
                assert not st.child_mask[i] & zb, f"{where}: closure rule fires"
                pos = target_pos.get(i)
                sub = mask ^ (1 << pos) if pos is not None and (mask >> pos) & 1 else None
                if form == Q_FORM:
                    left, right = st.q_kids[i]
                    assert fam.split(left, right, mask, proper=True) is None, (
                        f"{where}: split rule fires"
                    )
                    if sub is not None:
                        assert fam.split(left, right, sub, proper=False) is None, (
                            f"{where}: target split fires"
                        )
                elif sub is not None:
                    assert not st.child_mask[i] & res.zbar_rows[sub], (
                        f"{where}: target seed fires"
                    )
        fam.add_row(mask, zb)


def _audit_reach(res):
    """Partition shape and stability of every finished F/S/Z row."""
    m = res.model
    st = _Structs(m)
    for mask, row in res.rows.items():
        if mask == 0:
            continue
        where = f"{res.kind} row {mask:b}"
        assert row.f_core & row.d == 0 and row.f == row.f_core | row.d
        assert row.f & row.s == 0 and row.f & row.z == 0 and row.s & row.z == 0
        assert row.f | row.s | row.z == st.all_mask, f"{where}: F/S/Z not a partition"
        assert row.x == row.f_core | row.s, f"{where}: X != F + S at loop exit"
        if bin(mask).count("1") >= 2:
            for pos in _bits(mask):
                q = res.targets[pos]
                assert (row.d | row.s | row.z) >> q & 1, (
                    f"{where}: target {m.names[q]} escaped D, S and Z"
                )
        sz = row.s | row.z
        fd = row.f_core | row.d
        for i in _bits(row.f_core):
            form = st.forms[i]
            if form == L_FORM:
                # no spoil rule fires, and membership is supported
                assert not st.child_mask[i] & sz, f"{where}: spoil rule fires on F"
                assert st.child_mask[i] & fd, f"{where}: F member unsupported"
            elif form == M_FORM:
                assert st.child_mask[i] & ~sz, f"{where}: spoil rule fires on F"
                assert st.child_mask[i] & row.f_core, f"{where}: F member unsupported"
            else:
                assert st.child_mask[i] & ~sz, f"{where}: spoil rule fires on F"
                left, right = st.q_kids[i]
                assert (fd >> left) & 1 or (fd >> right) & 1, (
                    f"{where}: F member unsupported"
                )


def _subset_mask(m, targets, subset):
    if isinstance(subset, int) and not isinstance(subset, bool):
        return subset
    positions = []
    for t in subset:
        idx = t if isinstance(t, int) else m.index(t)
        try:
            positions.append(targets.index(idx))
        except ValueError:
            raise ModelError(f"{t!r} is not one of the analyzed targets") from None
    return _mask_of_positions(positions)


def _step_tag(phase, step):
    kind = step[0]
    return f"{phase}.{kind}"
