"""Combined stochastic and impulse control: pointwise maximization of the
driver over a finite control grid, the driver-augmented reflected
recursion, and extraction of the optimal strategy/control pair."""

from dataclasses import dataclass

import numpy as np

from .expr import CoefficientExpr, eval_expr
from .impulse import (
    DEFAULT_MAX_STATES,
    ImpulseModel,
    Strategy,
    StrategyGapError,
    ValueField,
    ValueIterationResult,
    SolverError,
    _extract_walk,
    enumerate_states,
    impulse_budget,
    obstacle,
    state_key,
)
from .model import DEFAULT_TOL, ControlGrid
from .tree import ScenarioTree, cond_expect, z_repr


@dataclass(frozen=True)
class HamiltonianSpec:
    """Everything the driver needs: the control grid with its drift
    functional, the volatility, and the (possibly control-dependent)
    reward.  The model audit must have passed (sigma positive, tilt bound)."""

    grid: ControlGrid
    sigma: CoefficientExpr
    reward: CoefficientExpr


def hamiltonian(t: float, env: dict, z: float, u: float, spec: HamiltonianSpec) -> float:
    """Driver value z * f(t,w,u)/sigma(t,w) + h(t,w,u) at one environment."""
    bound = {**env, "t": t, "u": u}
    sigma = eval_expr(spec.sigma, bound)
    drift = eval_expr(spec.grid.controlled_drift, bound)
    reward = eval_expr(spec.reward, bound)
    return z * drift / sigma + reward


def hamiltonian_max(t: float, env: dict, z: float, spec: HamiltonianSpec):
    """Exhaustive maximum of the driver over the control grid.

    Returns (best value, maximizer); ties pick the control with the
    smallest index in the declared grid order.
    """
    best_value = None
    best_u = None
    for u in spec.grid.controls:
        value = hamiltonian(t, env, z, u, spec)
        if best_value is None or value > best_value:
            best_value = value
            best_u = u
    return best_value, best_u


def driver_tables(tree: ScenarioTree, spec: HamiltonianSpec, states):
    """Per-level (n_controls, 2^k, n_states) arrays of the tilt
    theta = f/sigma and the reward, both on the state-shifted path.

    Raises SolverError if the tilt bound |theta|*sqrt(dt) < 1 fails anywhere
    (the audit should have rejected the model first).
    """
    thetas = []
    rewards = []
    n_controls = len(spec.grid.controls)
    for k in range(tree.depth):
        size = tree.level_size(k)
        theta_k = np.empty((n_controls, size, len(states)))
        reward_k = np.empty_like(theta_k)
        for j, st in enumerate(states):
            env = tree.env(k, shift=st.cumulative)
            sigma = np.asarray(eval_expr(spec.sigma, env))
            for c, u in enumerate(spec.grid.controls):
                env_u = {**env, "u": u}
                theta_k[c, :, j] = np.asarray(eval_expr(spec.grid.controlled_drift, env_u)) / sigma
                reward_k[c, :, j] = eval_expr(spec.reward, env_u)
        if np.any(np.abs(theta_k) * tree.sqrt_dt >= 1):
            raise SolverError(f"tilt bound |f/sigma|*sqrt(dt) < 1 violated at level {k}")
        thetas.append(theta_k)
        rewards.append(reward_k)
    return thetas, rewards


def combined_value_iteration(
    tree: ScenarioTree,
    model: ImpulseModel,
    spec: HamiltonianSpec,
    tol: float = DEFAULT_TOL,
    budget: "int | None" = None,
    *,
    fixed_controls=None,
    max_states: int = DEFAULT_MAX_STATES,
) -> ValueIterationResult:
    """Same loop as the impulse value iteration with the backward step
    replaced by the maximized driver: Z from the next level, then
    Y_k = max(E[Y_{k+1}] + H*(t_k, shifted path, Z_k)*dt, obstacle).

    ``fixed_controls`` (per-level (2^k, n_states) arrays of control-grid
    indices, levels 0..depth-1) evaluates the recursion under a frozen
    control table instead of the pointwise maximum; the value fields then
    record that table.
    """
    if budget is None:
        budget = impulse_budget(model.reward_bound, model.cost_floor, tree.horizon)
    states = enumerate_states(model.impulses, budget, max_states)
    thetas, rewards = driver_tables(tree, spec, states)
    depth = tree.depth

    def backward(prev_field):
        n = 0 if prev_field is None else prev_field.n + 1
        if prev_field is None:
            obs = arg = None
        else:
            obs, arg = obstacle(prev_field, model)

        values = [None] * (depth + 1)
        zs = [None] * (depth + 1)
        k_incs = [None] * (depth + 1)
        ustars = [None] * (depth + 1)
        values[depth] = np.zeros((tree.level_size(depth), len(states)))
        zs[depth] = np.zeros_like(values[depth])
        k_incs[depth] = np.zeros_like(values[depth])
        ustars[depth] = np.zeros((tree.level_size(depth), len(states)), dtype=np.int64)
        for k in range(depth - 1, -1, -1):
            z_k = z_repr(values[k + 1], tree.dt)
            candidates = z_k[None, :, :] * thetas[k] + rewards[k]
            if fixed_controls is not None:
                u_idx = np.asarray(fixed_controls[k], dtype=np.int64)
                driver = np.take_along_axis(candidates, u_idx[None, :, :], axis=0)[0]
            else:
                driver = candidates.max(axis=0)
                u_idx = candidates.argmax(axis=0)
            cont = cond_expect(values[k + 1]) + driver * tree.dt
            if obs is None:
                values[k] = cont
                k_incs[k] = np.zeros_like(cont)
            else:
                values[k] = np.maximum(cont, obs[k])
                k_incs[k] = values[k] - cont
            zs[k] = z_k
            ustars[k] = u_idx
        return ValueField(
            n=n,
            states=tuple(states),
            values=tuple(values),
            z=tuple(zs),
            k_inc=tuple(k_incs),
            obstacle=obs,
            obstacle_argmax=arg,
            controls=tuple(ustars),
        )

    fields = [backward(None)]
    stalled = budget == 0
    stall_index = 0 if stalled else None
    sups = []
    for n in range(1, budget + 1):
        nxt = backward(fields[-1])
        sup = 0.0
        for va, vb in zip(fields[-1].values, nxt.values):
            sup = max(sup, float(np.max(np.abs(vb - va))))
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


@dataclass
class ControlTable:
    """Control choice per (level, index, state key) along the continuation
    region; ``default`` (if set) answers lookups for uncovered pairs."""

    entries: "dict[tuple[int, int, tuple[float, int]], float]"
    grid_values: "tuple[float, ...]" = ()
    default: "float | None" = None

    def control_at(self, level: int, index: int, cumulative: float, count: int) -> float:
        key = (level, index, state_key(cumulative, count))
        value = self.entries.get(key, self.default)
        if value is None:
            raise StrategyGapError(f"no control recorded for {key}")
        return value

    def rows(self):
        out = []
        for (level, index, (cum, count)), u in self.entries.items():
            out.append((level, index, cum, count, u))
        out.sort(key=lambda r: (r[0], r[1], r[3], r[2]))
        return out

    @classmethod
    def uniform(cls, u: float, grid_values=()) -> "ControlTable":
        return cls(entries={}, grid_values=tuple(grid_values), default=u)


def extract_pair(fields, tree: ScenarioTree, model: ImpulseModel, spec: HamiltonianSpec, tol: float = DEFAULT_TOL):
    """Extract (Strategy, ControlTable) from a combined field sequence.

    The strategy walk is identical to the pure-impulse extraction; along
    each continuation segment the control is the recorded driver argmax of
    the field with the walker's remaining budget, at the walker's current
    cumulative state (the segment-wise reading of the optimal control).
    """
    controls = {}

    def record(level, index, s_idx, m, key):
        u_idx = int(fields[m].controls[level][index, s_idx])
        controls[key] = spec.grid.controls[u_idx]

    decisions, top = _extract_walk(fields, tree, model, tol, on_continue=record)
    strategy = Strategy(decisions=decisions, impulses=model.impulses, iteration=top, tol=tol)
    table = ControlTable(entries=controls, grid_values=spec.grid.controls)
    return strategy, table
