"""Finite strategy controllers, witness synthesis, and play simulation.

A strategy is serialized as a tree of controller nodes (with a flat table
of named definitions for shared sub-controllers):

  static / deterministic / uniform   memoryless action choices per
                                     non-terminal;
  delegate-on-entry                  a one-step controller: an optional
                                     action at the current node, and child
                                     controllers adopted "as if the play
                                     starts there";
  counter-switch                     the limit-sure construction: inside a
                                     marked component the queen mixes over
                                     the component's actions while counting
                                     branch-off opportunities per target,
                                     and after every counter passes its
                                     threshold it plays a designated escape
                                     action and hands over to the witness
                                     for the remaining targets;
  queen-worker                       the almost-sure construction: a single
                                     queen path through the winning region,
                                     spawning an independent single-target
                                     worker at every branching node whose
                                     off-path child can still reach some
                                     target.

At run time a controller state is threaded down tree edges, so every
decision is a function of the node's ancestor history (plus the strategy's
own coin flips, realized from the play's seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

from .graph import _bits
from .model import L_FORM, M_FORM, ModelError, Play, Q_FORM
from .multi import (
    ReachResult,
    ZeroResult,
    WitnessBundle,
    split_epsilon,
    witness_bundle,
)

FORMAT = "obmdp-strategy"
VERSION = 1

MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


_DIR_SALT = {"l": 0x9E3779B97F4A7C15, "r": 0xC2B2AE3D27D4EB4F, "u": 0x165667B19E3779F9}


def _child_key(key, direction):
    return _mix(key ^ _DIR_SALT[direction])


def _draw(key, salt):
    return _mix(key ^ salt * 0x2545F4914F6CDD1D & MASK64)


def _draw_big(key, salt):
    return (_draw(key, salt) << 64) | _draw(key, salt + 101)


def _pick_weighted(pairs, key, salt):
    """Exact-weight choice among (Fraction weight, item) pairs."""
    denom = 1
    for w, _ in pairs:
        denom = denom * w.denominator // _gcd(denom, w.denominator)
    total = sum(w.numerator * (denom // w.denominator) for w, _ in pairs)
    r = _draw_big(key, salt) % total
    acc = 0
    for w, item in pairs:
        acc += w.numerator * (denom // w.denominator)
        if r < acc:
            return item
    return pairs[-1][1]


def _gcd(a, b):
    while b:
        a, b = b, a % b
    return a


# ---------------------------------------------------------------------------
# spec nodes


def _enc_prob(p):
    return f"{p.numerator}/{p.denominator}" if p.denominator != 1 else str(p.numerator)


def _dec_prob(s):
    if "/" in s:
        a, b = s.split("/")
        return Fraction(int(a), int(b))
    return Fraction(int(s))


@dataclass(frozen=True)
class Ref:
    name: str

    def to_json(self):
        return {"ref": self.name}


@dataclass(frozen=True)
class StaticNode:
    choices: dict  # nt name -> {action: Fraction}

    def to_json(self):
        return {
            "kind": "static",
            "choices": {
                nt: {a: _enc_prob(p) for a, p in dist.items()}
                for nt, dist in self.choices.items()
            },
        }


@dataclass(frozen=True)
class DeterministicNode:
    choices: dict  # nt name -> action

    def to_json(self):
        return {"kind": "deterministic", "choices": dict(self.choices)}


@dataclass(frozen=True)
class UniformNode:
    choices: dict  # nt name -> tuple of actions; missing = all actions

    def to_json(self):
        return {
            "kind": "uniform",
            "choices": {nt: list(acts) for nt, acts in self.choices.items()},
        }


ARBITRARY = UniformNode(choices={})


@dataclass(frozen=True)
class DelegateNode:
    """One-step controller: act here, then hand each child to a sub-controller."""

    choose: dict  # nt name -> action (for the current node, if controlled)
    children: tuple  # ((direction or None, child nt name, node-or-ref), ...)
    default: object = None  # node-or-ref for unmatched children; None = arbitrary

    def to_json(self):
        return {
            "kind": "delegate-on-entry",
            "choose": dict(self.choose),
            "children": [
                [d, nt, _node_json(t)] for d, nt, t in self.children
            ],
            "default": _node_json(self.default) if self.default is not None else None,
        }


@dataclass(frozen=True)
class QueenWorkerNode:
    """Almost-sure witness for one subset of targets."""

    subset: tuple  # target names, for the record
    f_core: frozenset  # names: residual winning region (queen territory)
    d_set: frozenset  # names: forced-coverage region (delegation territory)
    m_choices: dict  # M-form name -> tuple of actions staying in f_core
    q_moves: dict  # Q-form name -> {"side": "l"|"r", "workers": (target names)}
    d_entry: dict  # D name -> node-or-ref
    workers: dict  # target name -> node-or-ref (static single-target witness)

    def to_json(self):
        return {
            "kind": "queen-worker",
            "subset": list(self.subset),
            "f_core": sorted(self.f_core),
            "d_set": sorted(self.d_set),
            "m_choices": {nt: list(a) for nt, a in self.m_choices.items()},
            "q_moves": {
                nt: {"side": mv["side"], "workers": list(mv["workers"])}
                for nt, mv in self.q_moves.items()
            },
            "d_entry": {nt: _node_json(t) for nt, t in self.d_entry.items()},
            "workers": {q: _node_json(t) for q, t in self.workers.items()},
        }


@dataclass(frozen=True)
class CounterSwitchNode:
    """Limit-sure witness: queen-worker plus per-component visit counters."""

    subset: tuple
    epsilon: Fraction
    threshold: int
    f_core: frozenset
    d_set: frozenset
    comps: tuple  # ({"id", "members", "covered", "escape"}, ...) qualifying only
    comp_of: dict  # name -> comp id
    in_comp_actions: dict  # M-form name -> tuple of actions staying in its comp
    closure_m: dict  # M-form name -> action (outside components)
    q_moves: dict  # Q-form name -> {"side", "workers", "counts": (target names)}
    d_entry: dict
    workers: dict

    def to_json(self):
        return {
            "kind": "counter-switch",
            "subset": list(self.subset),
            "epsilon": _enc_prob(self.epsilon),
            "threshold": self.threshold,
            "f_core": sorted(self.f_core),
            "d_set": sorted(self.d_set),
            "comps": [
                {
                    "id": c["id"],
                    "members": sorted(c["members"]),
                    "covered": list(c["covered"]),
                    "escape": (
                        None
                        if c["escape"] is None
                        else {
                            "at": c["escape"]["at"],
                            "action": c["escape"]["action"],
                            "to": _node_json(c["escape"]["to"]),
                        }
                    ),
                }
                for c in self.comps
            ],
            "comp_of": dict(self.comp_of),
            "in_comp_actions": {nt: list(a) for nt, a in self.in_comp_actions.items()},
            "closure_m": dict(self.closure_m),
            "q_moves": {
                nt: {
                    "side": mv["side"],
                    "workers": list(mv["workers"]),
                    "counts": list(mv["counts"]),
                }
                for nt, mv in self.q_moves.items()
            },
            "d_entry": {nt: _node_json(t) for nt, t in self.d_entry.items()},
            "workers": {q: _node_json(t) for q, t in self.workers.items()},
        }


def _node_json(node):
    return node.to_json()


def _node_from_json(obj):
    if obj is None:
        return None
    if "ref" in obj:
        return Ref(obj["ref"])
    kind = obj["kind"]
    if kind == "static":
        return StaticNode(
            {
                nt: {a: _dec_prob(p) for a, p in dist.items()}
                for nt, dist in obj["choices"].items()
            }
        )
    if kind == "deterministic":
        return DeterministicNode(dict(obj["choices"]))
    if kind == "uniform":
        return UniformNode({nt: tuple(a) for nt, a in obj["choices"].items()})
    if kind == "delegate-on-entry":
        return DelegateNode(
            choose=dict(obj["choose"]),
            children=tuple(
                (d, nt, _node_from_json(t)) for d, nt, t in obj["children"]
            ),
            default=_node_from_json(obj["default"]),
        )
    if kind == "queen-worker":
        return QueenWorkerNode(
            subset=tuple(obj["subset"]),
            f_core=frozenset(obj["f_core"]),
            d_set=frozenset(obj["d_set"]),
            m_choices={nt: tuple(a) for nt, a in obj["m_choices"].items()},
            q_moves={
                nt: {"side": mv["side"], "workers": tuple(mv["workers"])}
                for nt, mv in obj["q_moves"].items()
            },
            d_entry={nt: _node_from_json(t) for nt, t in obj["d_entry"].items()},
            workers={q: _node_from_json(t) for q, t in obj["workers"].items()},
        )
    if kind == "counter-switch":
        return CounterSwitchNode(
            subset=tuple(obj["subset"]),
            epsilon=_dec_prob(obj["epsilon"]),
            threshold=obj["threshold"],
            f_core=frozenset(obj["f_core"]),
            d_set=frozenset(obj["d_set"]),
            comps=tuple(
                {
                    "id": c["id"],
                    "members": frozenset(c["members"]),
                    "covered": tuple(c["covered"]),
                    "escape": (
                        None
                        if c["escape"] is None
                        else {
                            "at": c["escape"]["at"],
                            "action": c["escape"]["action"],
                            "to": _node_from_json(c["escape"]["to"]),
                        }
                    ),
                }
                for c in obj["comps"]
            ),
            comp_of=dict(obj["comp_of"]),
            in_comp_actions={nt: tuple(a) for nt, a in obj["in_comp_actions"].items()},
            closure_m=dict(obj["closure_m"]),
            q_moves={
                nt: {
                    "side": mv["side"],
                    "workers": tuple(mv["workers"]),
                    "counts": tuple(mv["counts"]),
                }
                for nt, mv in obj["q_moves"].items()
            },
            d_entry={nt: _node_from_json(t) for nt, t in obj["d_entry"].items()},
            workers={q: _node_from_json(t) for q, t in obj["workers"].items()},
        )
    raise ModelError(f"unknown strategy node kind {kind!r}")


@dataclass(frozen=True)
class StrategySpec:
    """A serializable strategy: a root controller plus named definitions."""

    root: object
    defs: dict = field(default_factory=dict)
    kind: str = "custom"
    bundle: WitnessBundle | None = None

    def to_json(self):
        return {
            "format": FORMAT,
            "version": VERSION,
            "kind": self.kind,
            "root": _node_json(self.root),
            "defs": {name: _node_json(node) for name, node in self.defs.items()},
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, obj):
        if obj.get("format") != FORMAT:
            raise ModelError("not a strategy document")
        if obj.get("version") != VERSION:
            raise ModelError(f"unsupported strategy version {obj.get('version')!r}")
        return cls(
            root=_node_from_json(obj["root"]),
            defs={name: _node_from_json(nd) for name, nd in obj["defs"].items()},
            kind=obj.get("kind", "custom"),
        )

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))


def static_spec(action_map):
    return StrategySpec(root=DeterministicNode(dict(action_map)), kind="static")


def uniform_spec(listed=None):
    return StrategySpec(root=UniformNode(listed or {}), kind="uniform")


# ---------------------------------------------------------------------------
# controller runtime


class Controller:
    """Binds a strategy spec to a model and threads states down tree edges."""

    def __init__(self, m, spec):
        self.m = m
        self.spec = spec

    def resolve(self, node):
        seen = set()
        while isinstance(node, Ref):
            if node.name in seen:
                raise ModelError(f"strategy reference cycle at {node.name!r}")
            seen.add(node.name)
            try:
                node = self.spec.defs[node.name]
            except KeyError:
                raise ModelError(f"undefined strategy reference {node.name!r}") from None
        return node

    def enter(self, node, nt_name):
        node = self.resolve(node)
        if isinstance(node, (StaticNode, DeterministicNode, UniformNode)):
            return _MemorylessState(self, node)
        if isinstance(node, DelegateNode):
            return _DelegateState(self, node)
        if isinstance(node, QueenWorkerNode):
            if nt_name in node.d_set:
                return self.enter(node.d_entry[nt_name], nt_name)
            return _QueenState(self, node)
        if isinstance(node, CounterSwitchNode):
            if nt_name in node.d_set:
                return self.enter(node.d_entry[nt_name], nt_name)
            return _CounterState(self, node, counters={})
        raise ModelError(f"cannot enter strategy node {node!r}")

    def root_state(self, start_name):
        return self.enter(self.spec.root, start_name)

    def uniform_all(self, nt_name):
        i = self.m.index(nt_name)
        acts = self.m.actions(i)
        share = Fraction(1, len(acts))
        return {a: share for a in acts}


class _State:
    def action_dist(self, nt_name):  # pragma: no cover - overridden
        raise NotImplementedError

    def descend(self, direction, label_name, coin):  # pragma: no cover
        raise NotImplementedError


class _MemorylessState(_State):
    def __init__(self, ctl, node):
        self.ctl = ctl
        self.node = node

    def action_dist(self, nt_name):
        node = self.node
        if isinstance(node, DeterministicNode):
            if nt_name in node.choices:
                return {node.choices[nt_name]: Fraction(1)}
            return self.ctl.uniform_all(nt_name)
        if isinstance(node, StaticNode):
            if nt_name in node.choices:
                return dict(node.choices[nt_name])
            return self.ctl.uniform_all(nt_name)
        acts = node.choices.get(nt_name)
        if not acts:
            return self.ctl.uniform_all(nt_name)
        share = Fraction(1, len(acts))
        return {a: share for a in acts}

    def descend(self, direction, label_name, coin):
        return self


class _DelegateState(_State):
    def __init__(self, ctl, node):
        self.ctl = ctl
        self.node = node

    def action_dist(self, nt_name):
        action = self.node.choose.get(nt_name)
        if action is None:
            return self.ctl.uniform_all(nt_name)
        return {action: Fraction(1)}

    def descend(self, direction, label_name, coin):
        if label_name is None:
            return self
        for d, nt, to in self.node.children:
            if nt == label_name and (d is None or d == direction):
                return self.ctl.enter(to, label_name)
        if self.node.default is not None:
            return self.ctl.enter(self.node.default, label_name)
        return self.ctl.enter(ARBITRARY, label_name)


class _QueenState(_State):
    def __init__(self, ctl, node):
        self.ctl = ctl
        self.node = node

    def action_dist(self, nt_name):
        acts = self.node.m_choices.get(nt_name)
        if not acts:
            return self.ctl.uniform_all(nt_name)
        share = Fraction(1, len(acts))
        return {a: share for a in acts}

    def descend(self, direction, label_name, coin):
        node = self.node
        if label_name is None:
            return self
        mv = None
        # identity of the parent is implicit: only Q-form parents branch
        if direction in ("l", "r"):
            mv = self._pending_q
        if mv is not None and direction != mv["side"]:
            workers = mv["workers"]
            if workers:
                q = workers[coin(len(workers))]
                return self.ctl.enter(node.workers[q], label_name)
            return self.ctl.enter(ARBITRARY, label_name)
        if label_name in node.d_set:
            return self.ctl.enter(node.d_entry[label_name], label_name)
        if label_name in node.f_core:
            return _QueenState(self.ctl, node)
        return self.ctl.enter(ARBITRARY, label_name)

    _pending_q = None

    def at(self, nt_name):
        """Arm the Q-form move of the node this state controls."""
        st = _QueenState(self.ctl, self.node)
        st._pending_q = self.node.q_moves.get(nt_name)
        return st


class _CounterState(_State):
    def __init__(self, ctl, node, counters):
        self.ctl = ctl
        self.node = node
        self.counters = counters  # (comp id, target name) -> visits, capped

    def _escape_ready(self, nt_name):
        node = self.node
        cid = node.comp_of.get(nt_name)
        if cid is None:
            return None
        comp = node.comps[cid]
        esc = comp["escape"]
        if esc is None or esc["at"] != nt_name:
            return None
        for q in comp["covered"]:
            if self.counters.get((cid, q), 0) < node.threshold:
                return None
        return esc

    def action_dist(self, nt_name):
        node = self.node
        esc = self._escape_ready(nt_name)
        if esc is not None:
            return {esc["action"]: Fraction(1)}
        acts = node.in_comp_actions.get(nt_name)
        if acts:
            share = Fraction(1, len(acts))
            return {a: share for a in acts}
        action = node.closure_m.get(nt_name)
        if action is not None:
            return {action: Fraction(1)}
        return self.ctl.uniform_all(nt_name)

    def descend(self, direction, label_name, coin):
        node = self.node
        if label_name is None:
            return self
        if self._armed_escape is not None:
            return self.ctl.enter(self._armed_escape["to"], label_name)
        mv = self._pending_q if direction in ("l", "r") else None
        counters = self._bumped
        if mv is not None and direction != mv["side"]:
            workers = mv["workers"]
            if workers:
                q = workers[coin(len(workers))]
                return self.ctl.enter(node.workers[q], label_name)
            return self.ctl.enter(ARBITRARY, label_name)
        if label_name in node.d_set:
            return self.ctl.enter(node.d_entry[label_name], label_name)
        if label_name in node.f_core:
            return _CounterState(self.ctl, node, counters)
        return self.ctl.enter(ARBITRARY, label_name)

    _pending_q = None
    _armed_escape = None
    _bumped = None

    def at(self, nt_name):
        node = self.node
        st = _CounterState(self.ctl, node, self.counters)
        st._pending_q = node.q_moves.get(nt_name)
        st._armed_escape = self._escape_ready(nt_name)
        counters = self.counters
        mv = st._pending_q
        if mv is not None and mv["counts"]:
            cid = node.comp_of.get(nt_name)
            if cid is not None:
                counters = dict(counters)
                for q in mv["counts"]:
                    key = (cid, q)
                    c = counters.get(key, 0)
                    if c < node.threshold:
                        counters[key] = c + 1
        st._bumped = counters
        st.counters = self.counters
        return st


# ---------------------------------------------------------------------------
# simulation


@dataclass
class PlaySample:
    """One truncated sampled play and the targets it reached."""

    play: Play
    reached: frozenset  # target indices observed among node labels
    generations: int
    rng_seed: int
    truncated: bool
    stopped_early: bool = False


def simulate(m, start, spec, budget, seed, targets=(), stop_when=None):
    """Generate one play under a strategy, generation by generation.

    `budget` is (max generations, max node count); each must be positive.
    The strategy is consulted exactly at M-form leaves, with the controller
    state threaded along the node's ancestor history.  Reproducible from
    the seed: the random stream is keyed per node address, independent of
    traversal order.
    """
    max_gens, max_nodes = budget
    if max_gens <= 0 or max_nodes <= 0:
        raise ModelError("simulation budget must be positive")
    start_i = start if isinstance(start, int) else m.index(start)
    target_ids = frozenset(t if isinstance(t, int) else m.index(t) for t in targets)
    stop_ids = None
    if stop_when is not None:
        stop_ids = frozenset(t if isinstance(t, int) else m.index(t) for t in stop_when)
    ctl = Controller(m, spec)
    root_key = _mix((seed & MASK64) ^ 0x5851F42D4C957F2D)
    labels = {"": start_i}
    reached = set()
    if start_i in target_ids or (stop_ids is not None and start_i in stop_ids):
        reached.add(start_i)
    frontier = [("", start_i, ctl.root_state(m.names[start_i]), root_key)]
    n_nodes = 1
    gens = 0
    truncated = False
    stopped = stop_ids is not None and stop_ids <= reached

    while frontier and gens < max_gens and not truncated and not stopped:
        gens += 1
        next_frontier = []
        for addr, i, state, key in frontier:
            form = m.forms[i]
            children = []
            if form == Q_FORM:
                left, right = m.q_children(i)
                children = [("l", left), ("r", right)]
                state = state.at(m.names[i]) if hasattr(state, "at") else state
            elif form == L_FORM:
                pairs = [(p, child) for p, child in m.l_choices(i)]
                child = _pick_weighted(pairs, key, 7)
                children = [("u", child)]
            else:
                dist = state.action_dist(m.names[i])
                action = _pick_weighted(sorted(dist.items(), key=lambda kv: kv[0]),
                                        key, 11) if len(dist) > 1 else next(iter(dist))
                child = dict(m.m_moves(i))[action]
                children = [("u", child)]
                state = state.at(m.names[i]) if hasattr(state, "at") else state
            for direction, child in children:
                caddr = addr + direction
                labels[caddr] = child
                n_nodes += 1
                if child is not None:
                    ckey = _child_key(key, direction)
                    coin = _Coin(ckey)
                    cstate = state.descend(direction, m.names[child], coin)
                    next_frontier.append((caddr, child, cstate, ckey))
                    if child in target_ids or (stop_ids is not None and child in stop_ids):
                        reached.add(child)
                if n_nodes >= max_nodes:
                    truncated = True
            if truncated:
                break
        frontier = next_frontier
        if stop_ids is not None and stop_ids <= reached:
            stopped = True
    if frontier and not stopped:
        truncated = truncated or gens >= max_gens
    play = Play(start=start_i, labels=labels, truncated=truncated or stopped,
                budget=(max_gens, max_nodes))
    return PlaySample(
        play=play,
        reached=frozenset(reached & (target_ids | (stop_ids or frozenset()))),
        generations=gens,
        rng_seed=seed,
        truncated=truncated,
        stopped_early=stopped,
    )


class _Coin:
    __slots__ = ("key", "uses")

    def __init__(self, key):
        self.key = key
        self.uses = 0

    def __call__(self, n):
        self.uses += 1
        return _draw(self.key, 13 + self.uses) % n


@dataclass
class Estimate:
    p_hat: float
    stderr: float
    hits: int
    samples: int
    truncated: int


def estimate_joint_reach(m, start, spec, targets, samples, budget, seed, threads=1):
    """Fraction of seeded plays whose reached set covers all targets.

    Truncated plays that did not reach every target count as failures,
    which keeps the estimate conservative for lower-bound claims.
    """
    if samples < 1:
        raise ModelError("need at least one sample")
    target_ids = tuple(t if isinstance(t, int) else m.index(t) for t in targets)
    want = frozenset(target_ids)

    def run(idx):
        s = simulate(m, start, spec, budget, seed=_mix(seed ^ (idx * 2 + 1)),
                     targets=target_ids, stop_when=target_ids)
        return want <= s.reached, s.truncated and not want <= s.reached

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, range(samples)))
    else:
        outcomes = [run(i) for i in range(samples)]
    hits = sum(1 for ok, _ in outcomes if ok)
    trunc = sum(1 for _, t in outcomes if t)
    p = hits / samples
    stderr = (p * (1 - p) / samples) ** 0.5
    return Estimate(p_hat=p, stderr=stderr, hits=hits, samples=samples, truncated=trunc)


def action_distribution_at(m, spec, history, seed=0):
    """Replay a controller along an ancestor history; the distribution at its end.

    Coin flips along the way are realized from the seed exactly as the
    simulator would, so equal histories always yield equal distributions.
    """
    ctl = Controller(m, spec)
    key = _mix((seed & MASK64) ^ 0x5851F42D4C957F2D)
    state = ctl.root_state(m.names[history.start])
    cur = history.start
    for direction, label in history.steps:
        if hasattr(state, "at"):
            state = state.at(m.names[cur])
        key = _child_key(key, direction)
        state = state.descend(direction, None if label is None else m.names[label], _Coin(key))
        cur = label
    if cur is None or m.forms[cur] != M_FORM:
        raise ModelError("history does not end at a controlled non-terminal")
    return state.action_dist(m.names[cur])


# ---------------------------------------------------------------------------
# witness synthesis


def _mask_tag(result, mask):
    names = [result.model.names[result.targets[p]] for p in _bits(mask)]
    return "+".join(names) if names else "none"


def _worker_def(defs, zero, pos):
    m = zero.model
    q = zero.targets[pos]
    name = f"seek:{m.names[q]}"
    if name not in defs:
        defs[name] = DeterministicNode(zero.path_witnesses[q].static_actions(m))
    return Ref(name)


def synth_positive_witness(result, subset, start):
    """Deterministic non-static strategy with positive joint coverage.

    Replays the membership provenance of the zero procedure: controlled
    nodes play the recorded action, branching nodes hand the recorded
    target split to the two children, and single-target obligations follow
    the static shortest-path witness.
    """
    if not isinstance(result, ZeroResult):
        raise ModelError("positive witnesses come from a zero-sets result")
    if result.prov is None:
        raise ModelError("zero result computed without provenance recording")
    m = result.model
    mask = result.subset_mask(subset)
    start_i = start if isinstance(start, int) else m.index(start)
    if not (result.zbar_rows[mask] >> start_i) & 1:
        raise ModelError(
            f"{m.names[start_i]}: no strategy reaches all of "
            f"{_mask_tag(result, mask)} with positive probability"
        )
    defs = {}

    def build(mask_, i):
        size = bin(mask_).count("1")
        if mask_ == 0:
            return ARBITRARY
        if size == 1:
            return _worker_def(defs, result, _bits(mask_)[0])
        name = f"cover:{_mask_tag(result, mask_)}:{m.names[i]}"
        ref = Ref(name)
        if name in defs:
            return ref
        defs[name] = ARBITRARY  # placeholder while recursing
        step = result.prov[mask_][i]
        kind = step[0]
        if kind == "seed.L":
            _, j, sub = step
            node = DelegateNode(choose={}, children=(("u", m.names[j], build(sub, j)),))
        elif kind == "seed.M":
            _, a, j, sub = step
            node = DelegateNode(
                choose={m.names[i]: a}, children=(("u", m.names[j], build(sub, j)),)
            )
        elif kind in ("seed.Q.target", "seed.Q.split"):
            _, part, rest = step
            left, right = m.q_children(i)
            node = DelegateNode(
                choose={},
                children=(
                    ("l", m.names[left], build(part, left)),
                    ("r", m.names[right], build(rest, right)),
                ),
            )
        elif kind == "close.L":
            _, j = step
            node = DelegateNode(choose={}, children=(("u", m.names[j], build(mask_, j)),))
        elif kind == "close.M":
            _, a, j = step
            node = DelegateNode(
                choose={m.names[i]: a}, children=(("u", m.names[j], build(mask_, j)),)
            )
        else:  # close.Q
            _, side, child = step
            node = DelegateNode(
                choose={}, children=((side, m.names[child], build(mask_, child)),)
            )
        defs[name] = node
        return ref

    root = build(mask, start_i)
    return StrategySpec(root=root, defs=defs, kind="positive-coverage",
                        bundle=witness_bundle(result, subset))


def _queen_fields(result, row):
    """Shared queen bookkeeping: M-form mixes and Q-form moves over f_core."""
    m = result.model
    f_core = row.f_core
    m_choices = {}
    q_moves = {}
    w_bits = {}
    for pos in _bits(row.mask):
        q = result.targets[pos]
        w = 0
        for i in result.zero.path_witnesses[q].members:
            w |= 1 << i
        w_bits[pos] = w
    for i in _bits(f_core):
        form = m.forms[i]
        if form == M_FORM:
            acts = tuple(a for a, j in m.m_moves(i) if (f_core >> j) & 1)
            m_choices[m.names[i]] = acts
        elif form == Q_FORM:
            left, right = m.q_children(i)
            side = "l" if (f_core >> left) & 1 else "r"
            off = right if side == "l" else left
            workers = tuple(
                m.names[result.targets[pos]]
                for pos in _bits(row.mask)
                if (w_bits[pos] >> off) & 1
            )
            q_moves[m.names[i]] = {"side": side, "workers": workers}
    return m_choices, q_moves


def synth_almost_sure_witness(result, subset, start=None):
    """Queen/worker strategy covering the subset with probability 1."""
    if not isinstance(result, ReachResult) or result.kind != "almost-sure":
        raise ModelError("almost-sure witnesses come from an almost-sure result")
    m = result.model
    mask = result.subset_mask(subset)
    row = result.rows[mask]
    if start is not None:
        start_i = start if isinstance(start, int) else m.index(start)
        if not (row.f >> start_i) & 1:
            raise ModelError(
                f"{m.names[start_i]}: no strategy covers {_mask_tag(result, mask)} "
                "almost surely"
            )
    defs = {}
    root = _build_as(result, mask, defs)
    bundle = witness_bundle(result, subset)
    return StrategySpec(root=root, defs=defs, kind="almost-sure", bundle=bundle)


def _build_as(result, mask, defs):
    m = result.model
    name = f"cover-as:{_mask_tag(result, mask)}"
    ref = Ref(name)
    if mask == 0:
        return ARBITRARY
    if name in defs:
        return ref
    defs[name] = ARBITRARY  # placeholder while recursing
    row = result.rows[mask]
    m_choices, q_moves = _queen_fields(result, row)
    d_entry = {}
    for i in _bits(row.d):
        d_entry[m.names[i]] = _build_as_d(result, mask, i, defs)
    workers = {}
    for pos in _bits(row.mask):
        q = result.targets[pos]
        workers[m.names[q]] = _worker_def(defs, result.zero, pos)
    defs[name] = QueenWorkerNode(
        subset=tuple(m.names[result.targets[p]] for p in _bits(mask)),
        f_core=frozenset(m.names[i] for i in _bits(row.f_core)),
        d_set=frozenset(m.names[i] for i in _bits(row.d)),
        m_choices=m_choices,
        q_moves=q_moves,
        d_entry=d_entry,
        workers=workers,
    )
    return ref


def _build_as_d(result, mask, i, defs):
    """Forced-coverage replay for one D member (almost-sure flavour)."""
    m = result.model
    name = f"forced-as:{_mask_tag(result, mask)}:{m.names[i]}"
    ref = Ref(name)
    if name in defs:
        return ref
    defs[name] = ARBITRARY
    step = result.rows[mask].prov_d[i]
    defs[name] = _d_node(result, mask, i, step, defs,
                         enter_sub=lambda sub: _build_as(result, sub, defs),
                         enter_same=lambda j: _build_as_d(result, mask, j, defs))
    return ref


def _d_node(result, mask, i, step, defs, enter_sub, enter_same):
    m = result.model
    kind = step[0]
    if kind == "seed.target":
        return ARBITRARY
    if kind == "seed.L":
        (_, sub) = step
        kids = tuple(
            ("u", m.names[child], enter_sub(sub))
            for _, child in m.l_choices(i)
            if child is not None
        )
        return DelegateNode(choose={}, children=kids)
    if kind == "seed.M":
        _, a, j, sub = step
        return DelegateNode(choose={m.names[i]: a},
                            children=(("u", m.names[j], enter_sub(sub)),))
    if kind in ("seed.Q.target", "seed.Q.split"):
        _, part, rest = step
        left, right = m.q_children(i)
        return DelegateNode(
            choose={},
            children=(
                ("l", m.names[left], enter_sub(part)),
                ("r", m.names[right], enter_sub(rest)),
            ),
        )
    if kind == "close.L":
        kids = tuple(
            ("u", m.names[child], enter_same(child))
            for _, child in m.l_choices(i)
            if child is not None
        )
        return DelegateNode(choose={}, children=kids)
    if kind == "close.M":
        _, a, j = step
        return DelegateNode(choose={m.names[i]: a},
                            children=(("u", m.names[j], enter_same(j)),))
    # close.Q
    _, side, child = step
    return DelegateNode(choose={}, children=((side, m.names[child], enter_same(child)),))


def synth_limit_sure_witness(result, subset, epsilon, start=None):
    """Randomized non-static strategy with coverage probability >= 1 - epsilon."""
    if not isinstance(result, ReachResult) or result.kind != "limit-sure":
        raise ModelError("limit-sure witnesses come from a limit-sure result")
    eps = Fraction(epsilon)
    if not 0 < eps < 1:
        raise ModelError("epsilon must lie strictly between 0 and 1")
    m = result.model
    mask = result.subset_mask(subset)
    row = result.rows[mask]
    if start is not None:
        start_i = start if isinstance(start, int) else m.index(start)
        if not (row.f >> start_i) & 1:
            raise ModelError(
                f"{m.names[start_i]}: supremum coverage probability of "
                f"{_mask_tag(result, mask)} is below 1"
            )
    defs = {}
    root = _build_ls(result, mask, eps, defs)
    bundle = witness_bundle(result, subset, epsilon=eps)
    return StrategySpec(root=root, defs=defs, kind="limit-sure", bundle=bundle)


def _eps_tag(eps):
    return f"{eps.numerator}_{eps.denominator}"


def _build_ls(result, mask, eps, defs):
    m = result.model
    size = bin(mask).count("1")
    if mask == 0:
        return ARBITRARY
    name = f"cover-ls:{_mask_tag(result, mask)}:{_eps_tag(eps)}"
    ref = Ref(name)
    if name in defs:
        return ref
    defs[name] = ARBITRARY
    row = result.rows[mask]
    m_choices, q_moves = _queen_fields(result, row)
    bundle = witness_bundle(result, mask, epsilon=eps)
    eps_child = bundle.eps_child
    comp_of = {}
    comps = []
    in_comp_actions = {}
    closure_m = {}
    for comp in row.comps:
        if not comp.in_f:
            continue
        cid = len(comps)
        members = frozenset(m.names[i] for i in _bits(comp.members))
        covered = tuple(m.names[result.targets[p]] for p in _bits(comp.covered))
        escape = None
        if comp.escape is not None:
            u, action, v = comp.escape
            escape = {
                "at": m.names[u],
                "action": action,
                "to": _build_ls(result, mask & ~comp.covered, eps_child, defs),
            }
        comps.append({"id": cid, "members": members, "covered": covered,
                      "escape": escape})
        for nm in members:
            comp_of[nm] = cid
        for i in _bits(comp.members):
            if m.forms[i] == M_FORM:
                acts = tuple(
                    a for a, j in m.m_moves(i) if (comp.members >> j) & 1
                )
                in_comp_actions[m.names[i]] = acts
    for i in _bits(row.f_core):
        if m.forms[i] == M_FORM and m.names[i] not in in_comp_actions:
            step = row.prov_f.get(i)
            if step is not None and step[0] == "close.M":
                closure_m[m.names[i]] = step[1]
    # counters tick on the queen's branching nodes inside their component
    for i in _bits(row.f_core):
        nm = m.names[i]
        if nm not in q_moves:
            continue
        counts = ()
        cid = comp_of.get(nm)
        if cid is not None:
            counts = tuple(
                m.names[result.targets[pos]]
                for pos in _bits(row.mask)
                if row.h.get(pos, 0) >> i & 1
            )
        q_moves[nm] = dict(q_moves[nm], counts=counts)
    # queen sides inside a component must stay inside it
    for comp in comps:
        for nm in comp["members"]:
            if nm not in q_moves:
                continue
            i = m.index(nm)
            left, right = m.q_children(i)
            if m.names[left] in comp["members"]:
                side = "l"
            elif m.names[right] in comp["members"]:
                side = "r"
            else:
                side = q_moves[nm]["side"]
            q_moves[nm] = dict(q_moves[nm], side=side)
    d_entry = {}
    for i in _bits(row.d):
        d_entry[m.names[i]] = _build_ls_d(result, mask, i, eps, defs)
    workers = {}
    for pos in _bits(row.mask):
        q = result.targets[pos]
        workers[m.names[q]] = _worker_def(defs, result.zero, pos)
    if size == 1:
        node = QueenWorkerNode(
            subset=tuple(m.names[result.targets[p]] for p in _bits(mask)),
            f_core=frozenset(m.names[i] for i in _bits(row.f_core)),
            d_set=frozenset(m.names[i] for i in _bits(row.d)),
            m_choices=m_choices,
            q_moves={nm: {"side": mv["side"], "workers": mv["workers"]}
                     for nm, mv in q_moves.items()},
            d_entry=d_entry,
            workers=workers,
        )
    else:
        node = CounterSwitchNode(
            subset=tuple(m.names[result.targets[p]] for p in _bits(mask)),
            epsilon=eps,
            threshold=bundle.threshold,
            f_core=frozenset(m.names[i] for i in _bits(row.f_core)),
            d_set=frozenset(m.names[i] for i in _bits(row.d)),
            comps=tuple(comps),
            comp_of=comp_of,
            in_comp_actions=in_comp_actions,
            closure_m=closure_m,
            q_moves=q_moves,
            d_entry=d_entry,
            workers=workers,
        )
    defs[name] = node
    return ref


def _build_ls_d(result, mask, i, eps, defs):
    """Forced-coverage replay for one D member (limit-sure flavour).

    Branch splits hand each side the adjusted slack; one-step delegations
    keep the same slack.
    """
    m = result.model
    name = f"forced-ls:{_mask_tag(result, mask)}:{m.names[i]}:{_eps_tag(eps)}"
    ref = Ref(name)
    if name in defs:
        return ref
    defs[name] = ARBITRARY
    step = result.rows[mask].prov_d[i]
    eps_child = split_epsilon(eps)

    def enter_sub(sub):
        kind = step[0]
        slack = eps_child if kind in ("seed.Q.target", "seed.Q.split") else eps
        return _build_ls(result, sub, slack, defs)

    defs[name] = _d_node(result, mask, i, step, defs,
                         enter_sub=enter_sub,
                         enter_same=lambda j: _build_ls_d(result, mask, j, eps, defs))
    return ref
