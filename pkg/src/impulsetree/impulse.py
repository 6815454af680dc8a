"""Iterated reflected backward recursion for impulse control: value fields
Y0, Y1, ... with impulse obstacle, stall detection and optimal strategy
extraction."""

import math
from dataclasses import dataclass

import numpy as np

from .expr import eval_expr
from .model import DEFAULT_TOL, ImpulseModel, LimitError
from .tree import ScenarioTree, cond_expect, z_repr

STATE_DECIMALS = 12
DEFAULT_MAX_STATES = 20000


class SolverError(RuntimeError):
    """Internal inconsistency in solver outputs (indicates a bug)."""


class StrategyGapError(LookupError):
    """A forward walk hit a (node, state) pair with no recorded decision."""


def state_key(cumulative: float, count: int) -> "tuple[float, int]":
    """Dedup key for impulse states: cumulative rounded to 12 decimals plus
    the impulse count (keeps distinct budgets distinct for symmetric sets)."""
    return (round(float(cumulative), STATE_DECIMALS) + 0.0, int(count))


@dataclass(frozen=True)
class ImpulseState:
    """Cumulative applied impulse and how many impulses produced it.

    ``cumulative`` is stored already rounded to the dedup precision so the
    backward fields and every forward walk agree bit-for-bit on the shift.
    """

    cumulative: float
    count: int

    @property
    def key(self) -> "tuple[float, int]":
        return state_key(self.cumulative, self.count)


def impulse_budget(reward_bound: float, cost_floor: float, horizon: float) -> int:
    """Maximum number of impulses any optimal strategy can use.

    Each impulse costs at least the floor while the total attainable reward
    is bounded by reward_bound * horizon, so ceil(bound * T / floor) caps
    the count.  A tiny slack guards the ceiling against float noise when
    the ratio is an exact integer.
    """
    if cost_floor <= 0:
        raise ValueError("cost floor must be positive")
    if reward_bound < 0:
        raise ValueError("reward bound must be non-negative")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    ratio = reward_bound * horizon / cost_floor
    return max(0, math.ceil(ratio - 1e-12))


def enumerate_states(impulses, budget: int, max_states: int = DEFAULT_MAX_STATES):
    """All impulse states reachable with at most ``budget`` impulses.

    Deterministic order: count-major, then generation order (previous states
    in order, impulses in declared order).  Deduplicated by state_key.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    root = ImpulseState(*state_key(0.0, 0))
    states = [root]
    seen = {root.key}
    frontier = [root]
    for _ in range(budget):
        next_frontier = []
        for prev in frontier:
            for beta in impulses:
                key = state_key(prev.cumulative + beta, prev.count + 1)
                if key in seen:
                    continue
                seen.add(key)
                st = ImpulseState(key[0], key[1])
                states.append(st)
                next_frontier.append(st)
                if len(states) > max_states:
                    raise LimitError(f"impulse state count exceeds the limit of {max_states}")
        frontier = next_frontier
    return states


def successor_table(states, impulses) -> np.ndarray:
    """(n_states, n_impulses) index table: entry [s, b] is the state reached
    from states[s] by impulses[b], or -1 when the budget is exhausted."""
    index = {st.key: j for j, st in enumerate(states)}
    budget = max(st.count for st in states)
    table = np.full((len(states), len(impulses)), -1, dtype=np.int64)
    for j, st in enumerate(states):
        if st.count >= budget:
            continue
        for b, beta in enumerate(impulses):
            key = state_key(st.cumulative + beta, st.count + 1)
            try:
                table[j, b] = index[key]
            except KeyError:
                raise SolverError(f"missing successor state {key}") from None
    return table


@dataclass(frozen=True)
class ValueField:
    """One iterate of the reflected recursion.

    ``values[k]`` has shape (2^k, n_states); ``z`` is the martingale
    representation of the next level, ``k_inc`` the reflection increment,
    and for n >= 1 ``obstacle``/``obstacle_argmax`` record the intervention
    value max_beta(-cost(beta) + Y^{n-1}(., state+beta)) and its first
    maximizer in declared impulse order (-1 where no impulse is admissible).
    """

    n: int
    states: "tuple[ImpulseState, ...]"
    values: "tuple[np.ndarray, ...]"
    z: "tuple[np.ndarray, ...]"
    k_inc: "tuple[np.ndarray, ...]"
    obstacle: "tuple[np.ndarray, ...] | None" = None
    obstacle_argmax: "tuple[np.ndarray, ...] | None" = None
    controls: "tuple[np.ndarray, ...] | None" = None  # combined mode only

    @property
    def depth(self) -> int:
        return len(self.values) - 1

    def root_value(self) -> float:
        return float(self.values[0][0, 0])


def reward_tables(tree: ScenarioTree, model: ImpulseModel, states):
    """Per-level (2^k, n_states) arrays of the running reward at each node
    under each state's path shift (levels 0..depth-1; left endpoint)."""
    tables = []
    for k in range(tree.depth):
        arr = np.empty((tree.level_size(k), len(states)))
        for j, st in enumerate(states):
            arr[:, j] = eval_expr(model.reward, tree.env(k, shift=st.cumulative))
        tables.append(arr)
    return tables


def solve_y0(tree: ScenarioTree, model: ImpulseModel, states, *, _tables=None) -> ValueField:
    """Unreflected base field: expected remaining reward for a strategy
    already holding each state's cumulative impulse, with no further
    impulses allowed.  Terminal value 0; reflection increments identically 0."""
    tables = _tables if _tables is not None else reward_tables(tree, model, states)
    n_states = len(states)
    depth = tree.depth

    values = [None] * (depth + 1)
    zs = [None] * (depth + 1)
    values[depth] = np.zeros((tree.level_size(depth), n_states))
    zs[depth] = np.zeros_like(values[depth])
    for k in range(depth - 1, -1, -1):
        values[k] = cond_expect(values[k + 1]) + tables[k] * tree.dt
        zs[k] = z_repr(values[k + 1], tree.dt)
    k_inc = tuple(np.zeros_like(v) for v in values)
    return ValueField(
        n=0,
        states=tuple(states),
        values=tuple(values),
        z=tuple(zs),
        k_inc=k_inc,
    )


def obstacle(prev: ValueField, model: ImpulseModel, states=None):
    """Intervention value and argmax against the previous field.

    Returns (per-level obstacle arrays, per-level argmax arrays).  Where no
    impulse is admissible (budget exhausted) the obstacle is -inf and the
    argmax -1, so it never binds.  Ties pick the first impulse in declared
    order.
    """
    states = prev.states if states is None else tuple(states)
    succ = successor_table(states, model.impulses)
    psi = np.array([model.costs[beta] for beta in model.impulses])
    safe = np.where(succ < 0, 0, succ)
    inadmissible = succ < 0

    obstacles = []
    argmaxes = []
    for level_values in prev.values:
        cand = level_values[:, safe] - psi[None, None, :]
        cand[:, inadmissible] = -np.inf
        obs = cand.max(axis=2)
        arg = cand.argmax(axis=2)
        arg[np.isneginf(obs)] = -1
        obstacles.append(obs)
        argmaxes.append(arg)
    return tuple(obstacles), tuple(argmaxes)


def iterate_value(prev: ValueField, tree: ScenarioTree, model: ImpulseModel, *, _tables=None) -> ValueField:
    """One reflected step: Y_k = max(E[Y_{k+1}] + h*dt, obstacle from the
    previous field).  Terminal value stays 0 (no impulses at the horizon;
    the terminal obstacle is <= -cost floor and never binds)."""
    tables = _tables if _tables is not None else reward_tables(tree, model, prev.states)
    obs, arg = obstacle(prev, model)
    depth = tree.depth

    values = [None] * (depth + 1)
    zs = [None] * (depth + 1)
    k_incs = [None] * (depth + 1)
    values[depth] = np.zeros_like(prev.values[depth])
    zs[depth] = np.zeros_like(values[depth])
    k_incs[depth] = np.zeros_like(values[depth])
    for k in range(depth - 1, -1, -1):
        cont = cond_expect(values[k + 1]) + tables[k] * tree.dt
        values[k] = np.maximum(cont, obs[k])
        k_incs[k] = values[k] - cont
        zs[k] = z_repr(values[k + 1], tree.dt)

    return ValueField(
        n=prev.n + 1,
        states=prev.states,
        values=tuple(values),
        z=tuple(zs),
        k_inc=tuple(k_incs),
        obstacle=obs,
        obstacle_argmax=arg,
    )


@dataclass
class ValueIterationResult:
    fields: "list[ValueField]"
    stalled: bool
    stall_index: "int | None"
    sup_increments: "list[float]"
    budget: int
    states: "tuple[ImpulseState, ...]"

    @property
    def top(self) -> ValueField:
        return self.fields[-1]

    @property
    def y0(self) -> float:
        return self.top.root_value()

    @property
    def per_iteration_y0(self) -> "list[float]":
        return [f.root_value() for f in self.fields]


def _sup_increment(a: ValueField, b: ValueField) -> float:
    sup = 0.0
    for va, vb in zip(a.values, b.values):
        sup = max(sup, float(np.max(np.abs(vb - va))))
    return sup


def value_iteration(
    tree: ScenarioTree,
    model: ImpulseModel,
    tol: float = DEFAULT_TOL,
    budget: "int | None" = None,
    *,
    max_states: int = DEFAULT_MAX_STATES,
) -> ValueIterationResult:
    """Iterate the reflected recursion until the sup-norm increment over all
    (node, state) pairs drops to ``tol`` or the impulse budget is reached.

    Returns the full field sequence (strategy extraction needs it) and
    whether stabilization occurred; hitting the budget without a stall is
    reported, not fatal.
    """
    if budget is None:
        budget = impulse_budget(model.reward_bound, model.cost_floor, tree.horizon)
    states = enumerate_states(model.impulses, budget, max_states)
    tables = reward_tables(tree, model, states)

    fields = [solve_y0(tree, model, states, _tables=tables)]
    stalled = budget == 0  # no impulse is ever admissible, Y0 is the value
    stall_index = 0 if stalled else None
    sups = []
    for n in range(1, budget + 1):
        nxt = iterate_value(fields[-1], tree, model, _tables=tables)
        sup = _sup_increment(fields[-1], nxt)
        fields.append(nxt)
        sups.append(sup)
        if sup <= tol:
            stalled = True
            stall_index = n
            break
    return ValueIterationResult(
        fields=fields,
        stalled=stalled,
        stall_index=stall_index,
        sup_increments=sups,
        budget=budget,
        states=tuple(states),
    )


@dataclass(frozen=True)
class Decision:
    action: str  # "continue" | "impulse"
    beta: "float | None" = None


@dataclass
class Strategy:
    """Forward-executable decision table keyed by (level, index, state key).

    Covers every (node, state) pair reachable under the strategy itself,
    including continue entries at the horizon (where impulses are
    forbidden).
    """

    decisions: "dict[tuple[int, int, tuple[float, int]], Decision]"
    impulses: "tuple[float, ...]" = ()
    iteration: "int | None" = None
    tol: "float | None" = None

    def decision_at(self, level: int, index: int, cumulative: float, count: int) -> "Decision | None":
        return self.decisions.get((level, index, state_key(cumulative, count)))

    @property
    def depth(self) -> int:
        if not self.decisions:
            raise ValueError("strategy has no decisions")
        return max(key[0] for key in self.decisions)

    @property
    def impulse_decision_count(self) -> int:
        return sum(1 for d in self.decisions.values() if d.action == "impulse")

    def rows(self):
        """Deterministic (level, index, state_cum, state_count, action, beta)
        rows for CSV serialization."""
        out = []
        for (level, index, (cum, count)), decision in self.decisions.items():
            out.append((level, index, cum, count, decision.action, decision.beta))
        out.sort(key=lambda r: (r[0], r[1], r[3], r[2]))
        return out

    @classmethod
    def from_rows(cls, rows, impulses=()) -> "Strategy":
        decisions = {}
        for level, index, cum, count, action, beta in rows:
            if action not in ("continue", "impulse"):
                raise ValueError(f"unknown action {action!r}")
            if action == "impulse" and beta is None:
                raise ValueError("impulse row without a beta value")
            key = (int(level), int(index), state_key(float(cum), int(count)))
            if key in decisions:
                raise ValueError(f"duplicate decision row for {key}")
            decisions[key] = Decision(action, None if action == "continue" else float(beta))
        return cls(decisions=decisions, impulses=tuple(impulses))


def _check_fields_consistent(fields, tol):
    for f in fields[1:]:
        for level_values, level_obs in zip(f.values, f.obstacle):
            if np.any(level_values < level_obs - tol):
                raise SolverError(f"field {f.n}: value below obstacle beyond tolerance (solver bug)")


def _extract_walk(fields, tree, model, tol, on_continue=None):
    """Forward walk shared by strategy and strategy+control extraction.

    From (root, zero state, remaining = top iteration index): while the top
    remaining field meets its obstacle within tol, apply the recorded argmax
    impulse (chains at one date allowed), then mark continue and descend.
    """
    if not fields:
        raise ValueError("empty field sequence")
    for j, f in enumerate(fields):
        if f.n != j:
            raise ValueError("fields must be the consecutive sequence Y0..Yn")
    _check_fields_consistent(fields, tol)

    states = fields[-1].states
    index_of = {st.key: j for j, st in enumerate(states)}
    succ = successor_table(states, model.impulses)
    top = len(fields) - 1
    depth = tree.depth

    decisions = {}
    stack = [(0, 0, 0, top)]
    while stack:
        level, index, s_idx, m = stack.pop()
        while level < depth and m > 0:
            fld = fields[m]
            y = fld.values[level][index, s_idx]
            o = fld.obstacle[level][index, s_idx]
            if y < o - tol:
                raise SolverError("value below obstacle during extraction (solver bug)")
            if not (np.isfinite(o) and abs(y - o) <= tol):
                break
            b_idx = int(fld.obstacle_argmax[level][index, s_idx])
            if b_idx < 0:
                break
            beta = model.impulses[b_idx]
            key = (level, index, states[s_idx].key)
            if key in decisions:
                raise SolverError(f"conflicting decision at {key}")
            decisions[key] = Decision("impulse", beta)
            s_idx = int(succ[s_idx, b_idx])
            m -= 1
        key = (level, index, states[s_idx].key)
        if key in decisions:
            raise SolverError(f"conflicting decision at {key}")
        decisions[key] = Decision("continue")
        if on_continue is not None and level < depth:
            on_continue(level, index, s_idx, m, key)
        if level < depth:
            stack.append((level + 1, 2 * index + 1, s_idx, m))
            stack.append((level + 1, 2 * index, s_idx, m))
    return decisions, top


def extract_strategy(fields, tree: ScenarioTree, model: ImpulseModel, tol: float = DEFAULT_TOL) -> Strategy:
    """Extract the optimal strategy from a value-field sequence.

    Impulse wherever the remaining field meets its obstacle within tol
    (first-in-order impulse on argmax ties, simultaneous impulses allowed,
    none at the horizon); continue elsewhere.
    """
    decisions, top = _extract_walk(fields, tree, model, tol)
    return Strategy(decisions=decisions, impulses=model.impulses, iteration=top, tol=tol)


def strategy_from_rule(tree: ScenarioTree, rule, impulses, max_chain: int = 1000) -> Strategy:
    """Build a complete decision table from ``rule(level, index, cumulative,
    count) -> beta or None`` (None means continue).  Useful for hand-made
    policies in tests and experiments; impulses at the horizon are rejected."""
    decisions = {}
    stack = [(0, 0, 0.0, 0)]
    while stack:
        level, index, cum, count = stack.pop()
        if level < tree.depth:
            chain = 0
            while True:
                beta = rule(level, index, cum, count)
                if beta is None:
                    break
                if beta not in impulses:
                    raise ValueError(f"rule returned {beta!r}, not an allowed impulse")
                decisions[(level, index, state_key(cum, count))] = Decision("impulse", beta)
                cum, count = state_key(cum + beta, count + 1)
                chain += 1
                if chain > max_chain:
                    raise ValueError("impulse chain exceeds max_chain; rule never continues")
        decisions[(level, index, state_key(cum, count))] = Decision("continue")
        if level < tree.depth:
            stack.append((level + 1, 2 * index + 1, cum, count))
            stack.append((level + 1, 2 * index, cum, count))
    return Strategy(decisions=decisions, impulses=tuple(impulses))
