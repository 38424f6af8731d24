"""Single-target qualitative reachability sets.

Three preprocessing sets drive everything else, each over a valid SNF model
and one target q:

  positive_reach_set  non-terminals from which some strategy reaches q with
                      positive probability; equals backward reachability in
                      the dependency graph.
  sub_one_reach_set   non-terminals from which some strategy keeps the
                      reach probability strictly below 1 (greatest fixed
                      point; infinite avoiding plays count as avoidance).
  avoid_sure_set      non-terminals from which some strategy avoids q
                      entirely (reach probability exactly 0).
  almost_sure_reach_set  non-terminals from which some strategy reaches q
                      with probability exactly 1 (single-target limit-sure
                      and almost-sure reachability coincide).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .graph import attractor, build_dependency_graph
from .model import L_FORM, M_FORM, Q_FORM


def positive_reach_set(m, q):
    """All i with a strategy giving positive probability of reaching q."""
    return attractor(build_dependency_graph(m), q)


@dataclass(frozen=True)
class PathWitness:
    """Deterministic static witness for positive reachability of one target.

    For every member of the positive reach set: the next hop on a fixed
    shortest dependency-graph path to the target, the choice realizing it
    (an action at M-form nodes, nothing elsewhere), and an exact lower
    bound on the probability of reaching the target along that path.
    """

    target: int
    members: frozenset
    next_hop: dict  # i -> successor index (absent for the target itself)
    action: dict  # i -> action name, for M-form members on the path
    bound: dict  # i -> Fraction > 0

    def static_actions(self, m):
        """Total action map for M-form non-terminals (arbitrary off-path)."""
        out = {}
        for i in range(m.n):
            if m.forms[i] == M_FORM:
                out[m.names[i]] = self.action.get(i, m.rules[i][0].action)
        return out


def positive_reach_witness(m, q):
    """Shortest-path witness over the positive reach set of q.

    The bound multiplies, along the path, the total probability of the
    L-form rules generating the chosen successor; Q-form nodes surely
    generate both children and M-form nodes follow the chosen action, so
    both contribute factor 1.
    """
    g = build_dependency_graph(m)
    dist = {q: 0}
    frontier = [q]
    while frontier:
        nxt = []
        for v in frontier:
            for u in g.pred[v]:
                if u not in dist:
                    dist[u] = dist[v] + 1
                    nxt.append(u)
        frontier = sorted(nxt)
    next_hop, action, bound = {}, {}, {q: Fraction(1)}
    for i in sorted(dist, key=lambda i: dist[i]):
        if i == q:
            continue
        hop = min(j for j in g.succ[i] if dist.get(j, -1) == dist[i] - 1)
        next_hop[i] = hop
        if m.forms[i] == L_FORM:
            factor = sum(
                (p for p, child in m.l_choices(i) if child == hop), Fraction(0)
            )
        elif m.forms[i] == M_FORM:
            action[i] = next(a for a, child in m.m_moves(i) if child == hop)
            factor = Fraction(1)
        else:
            factor = Fraction(1)
        bound[i] = factor * bound[hop]
    return PathWitness(
        target=q,
        members=frozenset(dist),
        next_hop=next_hop,
        action=action,
        bound=bound,
    )


def sub_one_reach_set(m, q):
    """Greatest fixed point W of "can keep Pr[reach q] < 1", q excluded.

    An L-form member needs a rule to the empty symbol or to a member; an
    M-form member needs an action into W; a Q-form member needs both
    children in W.
    """
    return _greatest_avoiding(m, q, l_needs_all=False)


def avoid_sure_set(m, q):
    """Greatest fixed point of "can keep Pr[reach q] = 0", q excluded.

    Like sub_one_reach_set but an L-form member must have every rule lead
    to the empty symbol or a member (any stray rule leaks positive
    probability into reaching q).
    """
    return _greatest_avoiding(m, q, l_needs_all=True)


def _greatest_avoiding(m, q, l_needs_all):
    alive = set(range(m.n)) - {q}
    changed = True
    while changed:
        changed = False
        for i in sorted(alive):
            form = m.forms[i]
            if form == L_FORM:
                choices = [child is None or child in alive for _, child in m.l_choices(i)]
                ok = all(choices) if l_needs_all else any(choices)
            elif form == M_FORM:
                ok = any(child in alive for _, child in m.m_moves(i))
            else:
                left, right = m.q_children(i)
                ok = left in alive and right in alive
            if not ok:
                alive.discard(i)
                changed = True
    return frozenset(alive)


def sub_one_witness(m, q):
    """Deterministic static action map witnessing sub_one_reach_set membership."""
    w = sub_one_reach_set(m, q)
    out = {}
    for i in range(m.n):
        if m.forms[i] != M_FORM:
            continue
        if i in w:
            out[m.names[i]] = next(a for a, child in m.m_moves(i) if child in w)
        else:
            out[m.names[i]] = m.rules[i][0].action
    return out


def avoid_sure_witness(m, q):
    """Deterministic static action map witnessing avoid_sure_set membership."""
    av = avoid_sure_set(m, q)
    out = {}
    for i in range(m.n):
        if m.forms[i] != M_FORM:
            continue
        if i in av:
            out[m.names[i]] = next(a for a, child in m.m_moves(i) if child in av)
        else:
            out[m.names[i]] = m.rules[i][0].action
    return out


def almost_sure_reach_set(m, q):
    """All i with a strategy reaching q with probability exactly 1."""
    from .multi import singleton_reach_row  # deferred: multi builds on this module

    return frozenset(singleton_reach_row(m, q, scc_mode=True).f_members())
