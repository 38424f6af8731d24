"""Conversion of general-form OBMDPs to simple normal form (SNF).

The conversion is the usual five-step rewrite: (1) keep all original
non-terminals; (2) eliminate repeated symbols on a right-hand side by
binary-doubling auxiliaries; (3, 4) give every controlled action a single
successor, introducing per-action auxiliaries where the action's rule set
is not already a single unit-probability one-symbol rule; (5) expand
right-hand sides longer than two into chains of branching auxiliaries.

Non-terminals that already sit in one of the three normal forms pass
through untouched, so the conversion is idempotent on SNF models.  The
output size is linear in the input size.
"""

from __future__ import annotations

from fractions import Fraction

from .model import (
    CONTROLLED,
    ModelError,
    PROBABILISTIC,
    SnfObmdp,
    as_snf,
    infer_form,
    make_obmdp,
)

ONE = Fraction(1)


class _Builder:
    def __init__(self, taken):
        self.taken = set(taken)
        self.decls = []  # (name, kind, [(prob, action, rhs names)])
        self.seq_counter = {}
        self.chain_cache = {}

    def fresh(self, candidate):
        while candidate in self.taken:
            candidate += "_"
        self.taken.add(candidate)
        return candidate

    def add(self, name, kind, rules):
        self.decls.append((name, kind, rules))

    def next_seq(self, owner):
        j = self.seq_counter.get(owner, 0)
        self.seq_counter[owner] = j + 1
        return self.fresh(f"{owner}__seq{j}")

    def chain(self, owner, elems, head=None):
        """Pair chain generating exactly the symbols of `elems` (len >= 2).

        The head pairs off the last element first, then the remaining
        elements in order; `elems` of length m yields m - 1 chain nodes.
        Heads created here (not per-action heads) are cached by their
        element sequence and reused.
        """
        elems = tuple(elems)
        if head is None and elems in self.chain_cache:
            return self.chain_cache[elems]
        created = head
        if head is None:
            created = self.next_seq(owner)
            self.chain_cache[elems] = created
        m = len(elems)
        if m == 2:
            self.add(created, PROBABILISTIC, [(ONE, None, elems)])
            return created
        interior = [self.next_seq(owner) for _ in range(m - 2)]
        nodes = [created] + interior
        self.add(nodes[0], PROBABILISTIC, [(ONE, None, (nodes[1], elems[m - 1]))])
        for t in range(1, m - 2):
            self.add(nodes[t], PROBABILISTIC, [(ONE, None, (nodes[t + 1], elems[t - 1]))])
        self.add(nodes[m - 2], PROBABILISTIC, [(ONE, None, (elems[m - 3], elems[m - 2]))])
        return created


def to_snf(m):
    """Convert any valid OBMDP into an equivalent SNF model.

    Original non-terminals keep their names; auxiliaries map to None in the
    origin table.  Qualitative reachability answers for the originals are
    invariant under the conversion.
    """
    if isinstance(m, SnfObmdp):
        return m
    conforming = [infer_form(m, i) is not None for i in range(m.n)]
    b = _Builder(m.names)

    # step 2: binary doubling for repeated symbols on rebuilt right-hand sides
    rebuilt = [
        (i, r) for i in range(m.n) if not conforming[i] for r in m.rules[i]
    ]
    zmax = [0] * m.n
    for _, r in rebuilt:
        for x in set(r.rhs):
            c = r.rhs.count(x)
            if c > zmax[x]:
                zmax[x] = c
    pow_names = {}
    for x in range(m.n):
        if zmax[x] < 2:
            continue
        z = zmax[x].bit_length() - 1  # floor(log2)
        prev = m.names[x]
        levels = []
        for t in range(1, z + 1):
            node = b.fresh(f"{m.names[x]}__pow{t}")
            b.add(node, PROBABILISTIC, [(ONE, None, (prev, prev))])
            levels.append(node)
            prev = node
        pow_names[x] = [m.names[x]] + levels  # index t = 2**t copies

    def rewrite_rhs(rhs):
        out = []
        emitted = set()
        for x in rhs:
            c = rhs.count(x)
            if c == 1:
                out.append(m.names[x])
            elif x not in emitted:
                emitted.add(x)
                for t in range(c.bit_length()):
                    if (c >> t) & 1:
                        out.append(pow_names[x][t])
        return tuple(out)

    # steps 3-5 per non-terminal, in declaration order
    for i in range(m.n):
        name = m.names[i]
        if conforming[i]:
            b.add(name, m.kinds[i], [
                (r.prob, r.action, tuple(m.names[j] for j in r.rhs)) for r in m.rules[i]
            ])
            continue
        if m.kinds[i] == PROBABILISTIC:
            rs = [(r.prob, rewrite_rhs(r.rhs)) for r in m.rules[i]]
            if len(rs) == 1 and rs[0][0] == 1 and len(rs[0][1]) == 2:
                b.add(name, PROBABILISTIC, [(ONE, None, rs[0][1])])
                continue
            out = []
            for p, rhs in rs:
                if len(rhs) <= 1:
                    out.append((p, None, rhs))
                else:
                    out.append((p, None, (b.chain(name, rhs),)))
            b.add(name, PROBABILISTIC, out)
        else:
            m_rules = []
            used_children = set()
            for a in m.actions(i):
                rs = [(r.prob, rewrite_rhs(r.rhs)) for r in m.rules_for(i, a)]
                if len(rs) == 1 and rs[0][0] == 1:
                    rhs = rs[0][1]
                    if len(rhs) == 1 and rhs[0] not in used_children:
                        m_rules.append((ONE, a, rhs))
                        used_children.add(rhs[0])
                        continue
                    aux = b.fresh(f"{name}__act_{a}")
                    if len(rhs) <= 1:
                        b.add(aux, PROBABILISTIC, [(ONE, None, rhs)])
                    else:
                        b.chain(name, rhs, head=aux)
                    m_rules.append((ONE, a, (aux,)))
                    used_children.add(aux)
                else:
                    aux = b.fresh(f"{name}__act_{a}")
                    out = []
                    for p, rhs in rs:
                        if len(rhs) <= 1:
                            out.append((p, None, rhs))
                        else:
                            out.append((p, None, (b.chain(name, rhs),)))
                    b.add(aux, PROBABILISTIC, out)
                    m_rules.append((ONE, a, (aux,)))
                    used_children.add(aux)
            b.add(name, CONTROLLED, m_rules)

    # originals first in declaration order, then auxiliaries in creation order
    order = {name: k for k, name in enumerate(m.names)}
    originals = [d for d in b.decls if d[0] in order]
    auxiliaries = [d for d in b.decls if d[0] not in order]
    originals.sort(key=lambda d: order[d[0]])
    decls = originals + auxiliaries
    new = make_obmdp(decls)
    origin = tuple(d[0] if d[0] in order else None for d in decls)
    snf = as_snf(new, origin=origin)
    assert snf.size() <= 12 * m.size(), "normal form blow-up exceeds the linear bound"
    return snf


def project_set(m, indices):
    """Restrict a set of SNF indices to original non-terminals, by name."""
    return m.original_names(indices)


def project_result(m, sets):
    """Project a mapping of named sets (or a single set) through the origin map."""
    if isinstance(sets, dict):
        return {key: project_set(m, value) for key, value in sets.items()}
    return project_set(m, sets)


def original_start(m, i):
    """Original name of a query start; auxiliaries signal a caller bug."""
    name = m.origin[i]
    if name is None:
        raise ModelError(
            f"{m.names[i]}: auxiliary non-terminal used as a query start"
        )
    return name
