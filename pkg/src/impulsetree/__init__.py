"""Impulse control of path-dependent diffusions on exact binary scenario
trees: iterated reflected backward recursion, optimal strategy extraction,
combined stochastic/impulse control, and exact forward evaluation."""

from .combined import (
    ControlTable,
    HamiltonianSpec,
    combined_value_iteration,
    driver_tables,
    extract_pair,
    hamiltonian,
    hamiltonian_max,
)
from .evaluate import (
    PathStates,
    PolicyValue,
    enumerate_optimal,
    evaluate_pair,
    evaluate_strategy_exact,
    girsanov_weights,
    impulse_count_distribution,
    mc_evaluate_strategy,
    walk_strategy_states,
)
from .expr import (
    CoefficientExpr,
    EvalError,
    ExprError,
    eval_expr,
    format_expr,
    parse_expr,
)
from .impulse import (
    Decision,
    ImpulseState,
    SolverError,
    Strategy,
    StrategyGapError,
    ValueField,
    ValueIterationResult,
    enumerate_states,
    extract_strategy,
    impulse_budget,
    iterate_value,
    obstacle,
    solve_y0,
    state_key,
    strategy_from_rule,
    value_iteration,
)
from .model import (
    AuditReport,
    AuditViolation,
    ConfigError,
    ControlGrid,
    ImpulseModel,
    LimitError,
    LoadedConfig,
    Numerics,
    ProcessModel,
    config_hash,
    load_config,
    validate_model,
)
from .snell import EnvelopeResult, PayoffProcess, snell_envelope, stopping_rule_value
from .tree import NodeRef, ScenarioTree, build_tree, cond_expect, dump_level_rows, z_repr

__version__ = "0.1.0"
