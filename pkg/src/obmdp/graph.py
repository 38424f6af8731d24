"""Dependency graph, SCC / MEC decomposition, attractor sets.

The dependency graph of a model has an edge (i, j) whenever some rule of i
can generate j as a child.  For MEC purposes the nodes are partitioned into
probabilistic nodes (L-form: all outgoing edges are involuntary) and the
rest (M-form and Q-form).
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import L_FORM, PROBABILISTIC, SnfObmdp


@dataclass(frozen=True)
class DependencyGraph:
    names: tuple[str, ...]
    succ: tuple[tuple[int, ...], ...]
    pred: tuple[tuple[int, ...], ...]
    probabilistic: frozenset  # the U_P side of the partition

    @property
    def n(self):
        return len(self.names)

    def edges(self):
        return [(i, j) for i in range(self.n) for j in self.succ[i]]

    def edge_names(self):
        return [(self.names[i], self.names[j]) for i, j in self.edges()]


def build_dependency_graph(m):
    """Edge (i, j) iff j occurs on the right-hand side of some rule of i.

    On an SNF model this is exactly: i -> j by a positive-probability or
    action rule, or i is Q-form with j as either child.
    """
    succ = [set() for _ in range(m.n)]
    for i in range(m.n):
        for r in m.rules[i]:
            succ[i].update(r.rhs)
    pred = [set() for _ in range(m.n)]
    for i in range(m.n):
        for j in succ[i]:
            pred[j].add(i)
    if isinstance(m, SnfObmdp):
        prob = frozenset(i for i in range(m.n) if m.forms[i] == L_FORM)
    else:
        prob = frozenset(i for i in range(m.n) if m.kinds[i] == PROBABILISTIC)
    return DependencyGraph(
        names=m.names,
        succ=tuple(tuple(sorted(s)) for s in succ),
        pred=tuple(tuple(sorted(s)) for s in pred),
        probabilistic=prob,
    )


def _scc_masks(succ, restrict_mask):
    """Tarjan over the subgraph induced by restrict_mask (an int bitset).

    Returns all strongly connected components as bitmasks, emitted in
    bottom-up order (a component is emitted after every component it can
    reach).  Singletons are included regardless of self-loops.
    """
    index = {}
    lowlink = {}
    on_stack = set()
    stack = []
    components = []
    counter = 0
    nodes = _bits(restrict_mask)
    for root in nodes:
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            node, pi = work[-1]
            if pi == 0:
                index[node] = lowlink[node] = counter
                counter += 1
                stack.append(node)
                on_stack.add(node)
            recurse = False
            succs = succ[node]
            while pi < len(succs):
                w = succs[pi]
                pi += 1
                if not (restrict_mask >> w) & 1:
                    continue
                if w not in index:
                    work[-1] = (node, pi)
                    work.append((w, 0))
                    recurse = True
                    break
                if w in on_stack:
                    if index[w] < lowlink[node]:
                        lowlink[node] = index[w]
            if recurse:
                continue
            work.pop()
            if lowlink[node] == index[node]:
                mask = 0
                while True:
                    w = stack.pop()
                    on_stack.remove(w)
                    mask |= 1 << w
                    if w == node:
                        break
                components.append(mask)
            if work:
                parent = work[-1][0]
                if lowlink[node] < lowlink[parent]:
                    lowlink[parent] = lowlink[node]
    return components


def _bits(mask):
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def _has_self_loop(succ, i):
    return i in succ[i]


def _mec_masks(succ, prob_mask, restrict_mask):
    """Unique MEC decomposition of the induced subgraph, as bitmasks.

    Classic iterated-SCC pruning: a probabilistic node with an edge leaving
    its component cannot sit in any end-component, so it is discarded and
    the remainder is re-decomposed.
    """
    mecs = []
    work = list(_scc_masks(succ, restrict_mask))
    while work:
        comp = work.pop()
        bad = 0
        probe = comp & prob_mask
        for u in _bits(probe):
            for v in succ[u]:
                if (restrict_mask >> v) & 1 and not (comp >> v) & 1:
                    bad |= 1 << u
                    break
        if bad:
            remainder = comp & ~bad
            if remainder:
                work.extend(_scc_masks(succ, remainder))
            continue
        if comp & (comp - 1) == 0:  # singleton: needs a self-loop
            u = comp.bit_length() - 1
            if u not in succ[u]:
                continue
        mecs.append(comp)
    return mecs


def _unit_levels(succ, restrict_mask, unit_masks):
    """Bottom-up levels: units at level t only reach units at levels < t."""
    unit_of = {}
    for idx, cm in enumerate(unit_masks):
        for u in _bits(cm):
            unit_of[u] = idx
    out_edges = [set() for _ in unit_masks]
    for u in _bits(restrict_mask):
        for v in succ[u]:
            if (restrict_mask >> v) & 1 and unit_of[u] != unit_of[v]:
                out_edges[unit_of[u]].add(unit_of[v])
    levels = [None] * len(unit_masks)
    for start in range(len(unit_masks)):
        if levels[start] is not None:
            continue
        stack = [(start, iter(out_edges[start]))]
        pending = {start}
        while stack:
            idx, it = stack[-1]
            advanced = False
            for j in it:
                if levels[j] is None and j not in pending:
                    stack.append((j, iter(out_edges[j])))
                    pending.add(j)
                    advanced = True
                    break
            if advanced:
                continue
            stack.pop()
            pending.discard(idx)
            lv = 0
            for j in out_edges[idx]:
                lv = max(lv, (levels[j] or 0) + 1)
            levels[idx] = lv
    return levels


@dataclass(frozen=True)
class SccDecomposition:
    components: tuple  # frozensets, genuine SCCs only
    non_scc_nodes: frozenset  # singletons without a self-loop
    level: dict  # frozenset-or-node -> bottom-up rank

    def component_of(self, node):
        for c in self.components:
            if node in c:
                return c
        return None


@dataclass(frozen=True)
class MecDecomposition:
    mecs: tuple
    non_mec_nodes: frozenset
    level: dict


def scc_decompose(g, restrict=None):
    """SCCs of the induced subgraph; trivial singletons reported separately."""
    restrict_mask = _to_mask(g.n, restrict)
    masks = _scc_masks(g.succ, restrict_mask)
    units = sorted(masks, key=lambda cm: _bits(cm)[0])
    levels = _unit_levels(g.succ, restrict_mask, units)
    comps = []
    non_scc = set()
    level = {}
    for cm, lv in zip(units, levels):
        members = frozenset(_bits(cm))
        if len(members) == 1:
            (u,) = members
            if u not in g.succ[u] or not (restrict_mask >> u) & 1:
                non_scc.add(u)
                level[u] = lv
                continue
        comps.append(members)
        level[members] = lv
    comps.sort(key=lambda c: min(c))
    return SccDecomposition(tuple(comps), frozenset(non_scc), level)


def mec_decompose(g, restrict=None):
    """The unique MEC decomposition of the induced subgraph."""
    restrict_mask = _to_mask(g.n, restrict)
    mec_masks = _mec_masks(g.succ, _set_mask(g.probabilistic), restrict_mask)
    covered = 0
    for cm in mec_masks:
        covered |= cm
    singles = [1 << u for u in _bits(restrict_mask & ~covered)]
    units = sorted(mec_masks + singles, key=lambda cm: _bits(cm)[0])
    levels = _unit_levels(g.succ, restrict_mask, units)
    mecs = []
    level = {}
    non_mec = set()
    for cm, lv in zip(units, levels):
        members = frozenset(_bits(cm))
        if cm in mec_masks:
            mecs.append(members)
            level[members] = lv
        else:
            (u,) = members
            non_mec.add(u)
            level[u] = lv
    mecs.sort(key=lambda c: min(c))
    return MecDecomposition(tuple(mecs), frozenset(non_mec), level)


def attractor(g, target):
    """Nodes with a directed path to the target (the target included).

    Least fixed point of backward reachability; equals the set of
    non-terminals from which the target is reached with positive probability
    under some strategy.
    """
    seen = {target}
    frontier = [target]
    while frontier:
        v = frontier.pop()
        for u in g.pred[v]:
            if u not in seen:
                seen.add(u)
                frontier.append(u)
    return frozenset(seen)


def _to_mask(n, restrict):
    if restrict is None:
        return (1 << n) - 1
    if isinstance(restrict, int) and not isinstance(restrict, bool):
        return restrict
    return _set_mask(restrict)


def _set_mask(nodes):
    mask = 0
    for u in nodes:
        mask |= 1 << u
    return mask
