"""Core data model for ordered branching MDPs (OBMDPs).

An OBMDP is a controlled stochastic grammar without terminal symbols: each
non-terminal is either probabilistic (a distribution over rules) or
controlled (a set of actions, each with its own rule distribution).  Rules
rewrite a non-terminal into an ordered, possibly empty, sequence of
non-terminals; a play is the ordered tree generated top-down, one generation
at a time.

Probabilities are exact `fractions.Fraction` values throughout; rule
distributions must sum to 1 exactly, never approximately.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction

NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

# SNF forms
L_FORM = "L"
Q_FORM = "Q"
M_FORM = "M"

PROBABILISTIC = "probabilistic"
CONTROLLED = "controlled"


class ModelError(ValueError):
    """Raised for structurally invalid models or malformed references."""


@dataclass(frozen=True)
class Rule:
    """One rewrite rule.

    `action` is None for rules of probabilistic non-terminals.  Controlled
    non-terminals carry one or more rules per action; the probabilities of
    the rules sharing an action must sum to 1 (the common case is a single
    rule with probability 1).
    """

    lhs: int
    rhs: tuple[int, ...]
    prob: Fraction = Fraction(1)
    action: str | None = None


@dataclass(frozen=True)
class Obmdp:
    """A validated OBMDP in general form.

    Non-terminal order is fixed at construction (declaration order) and is
    the canonical order for every set reported by the algorithms.
    """

    names: tuple[str, ...]
    kinds: tuple[str, ...]  # PROBABILISTIC or CONTROLLED per non-terminal
    rules: tuple[tuple[Rule, ...], ...]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        idx = {name: i for i, name in enumerate(self.names)}
        object.__setattr__(self, "_index", idx)

    @property
    def n(self):
        return len(self.names)

    def index(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise ModelError(f"undeclared non-terminal {name!r}") from None

    def is_controlled(self, i):
        return self.kinds[i] == CONTROLLED

    def actions(self, i):
        """Action symbols of non-terminal i, in first-appearance order."""
        seen = []
        for r in self.rules[i]:
            if r.action is not None and r.action not in seen:
                seen.append(r.action)
        return tuple(seen)

    def rules_for(self, i, action=None):
        return tuple(r for r in self.rules[i] if r.action == action)

    def size(self):
        """Rough encoding size: counts rules and their right-hand sides."""
        return sum(1 + len(r.rhs) for rs in self.rules for r in rs) + self.n


def make_obmdp(decls):
    """Build and validate an Obmdp from (name, kind, rule spec list) triples.

    Each rule spec is (prob, action, rhs_names); prob may be int/str/Fraction.
    """
    names = tuple(d[0] for d in decls)
    seen = set()
    for name in names:
        if not NAME_RE.match(name):
            raise ModelError(f"invalid non-terminal name {name!r}")
        if name in seen:
            raise ModelError(f"duplicate non-terminal name {name!r}")
        seen.add(name)
    index = {name: i for i, name in enumerate(names)}
    kinds = tuple(d[1] for d in decls)
    all_rules = []
    for i, (name, kind, rule_specs) in enumerate(decls):
        rs = []
        for prob, action, rhs_names in rule_specs:
            rhs = []
            for sym in rhs_names:
                if sym not in index:
                    raise ModelError(f"undeclared symbol {sym!r} on a rule of {name!r}")
                rhs.append(index[sym])
            rs.append(Rule(lhs=i, rhs=tuple(rhs), prob=Fraction(prob), action=action))
        all_rules.append(tuple(rs))
    m = Obmdp(names=names, kinds=kinds, rules=tuple(all_rules))
    diags = validate(m)
    if diags:
        raise ModelError("; ".join(diags))
    return m


def validate(m):
    """Check all Obmdp invariants; returns a list of diagnostics (empty = valid)."""
    diags = []
    for i, name in enumerate(m.names):
        rs = m.rules[i]
        if not rs:
            diags.append(f"{name}: has no rules")
            continue
        for r in rs:
            if not (0 < r.prob <= 1):
                diags.append(f"{name}: rule probability {r.prob} outside (0, 1]")
            for j in r.rhs:
                if not (0 <= j < m.n):
                    diags.append(f"{name}: rule references undeclared symbol index {j}")
        if m.kinds[i] == PROBABILISTIC:
            if any(r.action is not None for r in rs):
                diags.append(f"{name}: probabilistic non-terminal has an action-labelled rule")
            total = sum((r.prob for r in rs), Fraction(0))
            if total != 1:
                diags.append(f"{name}: rule probabilities sum to {total}, not 1")
        elif m.kinds[i] == CONTROLLED:
            if any(r.action is None for r in rs):
                diags.append(f"{name}: controlled non-terminal has an unlabelled rule")
            else:
                for a in m.actions(i):
                    total = sum((r.prob for r in rs if r.action == a), Fraction(0))
                    if total != 1:
                        diags.append(
                            f"{name}: probabilities under action {a!r} sum to {total}, not 1"
                        )
                if not m.actions(i):
                    diags.append(f"{name}: controlled non-terminal has no actions")
        else:
            diags.append(f"{name}: unknown kind {m.kinds[i]!r}")
    return diags


@dataclass(frozen=True)
class SnfObmdp(Obmdp):
    """An OBMDP in simple normal form.

    Every non-terminal is one of:
      L-form  probabilistic, every right-hand side has length <= 1;
      Q-form  a single probability-1 rule with exactly two children;
      M-form  controlled, one probability-1 rule per action, one child each,
              distinct children across actions.

    `origin` maps each non-terminal to the original it stands for, or None
    for auxiliaries introduced by normalization.
    """

    forms: tuple[str, ...] = ()
    origin: tuple[str | None, ...] = ()

    def form(self, i):
        return self.forms[i]

    def q_children(self, i):
        r = self.rules[i][0]
        return r.rhs[0], r.rhs[1]

    def m_moves(self, i):
        """(action, child) pairs of an M-form non-terminal."""
        return tuple((r.action, r.rhs[0]) for r in self.rules[i])

    def l_choices(self, i):
        """(prob, child-or-None) pairs of an L-form non-terminal."""
        return tuple((r.prob, r.rhs[0] if r.rhs else None) for r in self.rules[i])

    def is_auxiliary(self, i):
        return self.origin[i] is None

    def original_names(self, indices):
        """Project a set of SNF indices onto original non-terminal names."""
        return frozenset(self.origin[i] for i in indices if self.origin[i] is not None)


def infer_form(m, i):
    """The SNF form of non-terminal i in model m, or None if it fits none."""
    rs = m.rules[i]
    if m.kinds[i] == PROBABILISTIC:
        if len(rs) == 1 and rs[0].prob == 1 and len(rs[0].rhs) == 2:
            return Q_FORM
        if all(len(r.rhs) <= 1 for r in rs):
            return L_FORM
        return None
    # controlled: one probability-1 single-child rule per action, distinct kids
    kids = []
    for r in rs:
        if r.prob != 1 or len(r.rhs) != 1:
            return None
        kids.append(r.rhs[0])
    if len(set(r.action for r in rs)) != len(rs):
        return None
    if len(set(kids)) != len(kids):
        return None
    return M_FORM


def as_snf(m, origin=None):
    """Reinterpret a general-form model as SNF, inferring forms.

    Raises ModelError if some non-terminal fits no form.  Used by the parser
    (forms are inferred, never declared) and by round-trip checks.
    """
    if isinstance(m, SnfObmdp):
        return m
    forms = []
    for i in range(m.n):
        f = infer_form(m, i)
        if f is None:
            raise ModelError(f"{m.names[i]}: not in any normal form (normalize first)")
        forms.append(f)
    if origin is None:
        origin = tuple(m.names)
    return SnfObmdp(
        names=m.names, kinds=m.kinds, rules=m.rules, forms=tuple(forms), origin=tuple(origin)
    )


def is_snf(m):
    return all(infer_form(m, i) is not None for i in range(m.n))


@dataclass(frozen=True)
class AncestorHistory:
    """A root-to-node path: start label plus (direction, label) steps.

    Directions are 'l'/'r' for the two children of a Q-form node and 'u' for
    the unique child of an L- or M-form node.  A None label is the empty
    symbol at a leaf.  This is exactly the information a strategy may use.
    """

    start: int
    steps: tuple[tuple[str, int | None], ...] = ()

    def current(self):
        return self.steps[-1][1] if self.steps else self.start

    def extended(self, direction, label):
        return AncestorHistory(self.start, self.steps + ((direction, label),))

    def address(self):
        return "".join(d for d, _ in self.steps)


def history_is_valid(m, h):
    """Replay an AncestorHistory against the SNF rules of m."""
    cur = h.start
    for direction, label in h.steps:
        if cur is None:
            return False
        form = m.forms[cur]
        if form == Q_FORM:
            left, right = m.q_children(cur)
            if direction == "l":
                ok = label == left
            elif direction == "r":
                ok = label == right
            else:
                ok = False
        elif form == L_FORM:
            ok = direction == "u" and any(
                label == child for _, child in m.l_choices(cur)
            )
        else:
            ok = direction == "u" and any(label == child for _, child in m.m_moves(cur))
        if not ok:
            return False
        cur = label
    return True


@dataclass
class Play:
    """A (possibly truncated) sampled derivation tree of an SNF model.

    Node addresses are strings over {l,r,u}; the root is "".  `labels` maps
    each node to a non-terminal index or None for the empty symbol.  The set
    of addresses is prefix-closed by construction.
    """

    start: int
    labels: dict
    truncated: bool
    budget: tuple[int, int]  # (max generations, max node count)

    def history_of(self, address):
        steps = []
        for t in range(1, len(address) + 1):
            steps.append((address[t - 1], self.labels[address[:t]]))
        return AncestorHistory(self.start, tuple(steps))


def check_play(m, play):
    """Verify child structure of a play against the SNF forms; list of faults."""
    faults = []
    for addr, label in play.labels.items():
        if label is None:
            continue
        form = m.forms[label]
        kids = [d for d in "lru" if addr + d in play.labels]
        if not kids:
            if not play.truncated:
                faults.append(f"node {addr!r}: non-empty label with no children in a complete play")
            continue
        if form == Q_FORM:
            if sorted(kids) != ["l", "r"]:
                faults.append(f"node {addr!r}: Q-form node must have children l and r")
            else:
                left, right = m.q_children(label)
                if play.labels[addr + "l"] != left or play.labels[addr + "r"] != right:
                    faults.append(f"node {addr!r}: Q-form children mislabelled")
        else:
            if kids != ["u"]:
                faults.append(f"node {addr!r}: {form}-form node must have a single child u")
    for addr in play.labels:
        if addr and addr[:-1] not in play.labels:
            faults.append(f"node {addr!r}: address set not prefix-closed")
    return faults


def target_set(m, names_or_indices):
    """Validate a target set; returns sorted tuple of indices."""
    out = []
    for t in names_or_indices:
        out.append(t if isinstance(t, int) else m.index(t))
    if not out:
        raise ModelError("target set must be nonempty")
    for i in out:
        if not (0 <= i < m.n):
            raise ModelError(f"target index {i} out of range")
    if len(set(out)) != len(out):
        raise ModelError("duplicate targets")
    return tuple(sorted(set(out)))
