"""Command-line entry point: load config, build and audit, solve, extract,
evaluate, and write machine-readable reports.

Reports are byte-identical across runs with the same config, seed and
thread count; per-phase wall-clock timings therefore go to a separate
timings.json that is not part of the deterministic output.
"""

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .combined import HamiltonianSpec, combined_value_iteration, extract_pair
from .evaluate import (
    evaluate_pair,
    evaluate_strategy_exact,
    enumerate_optimal,
    impulse_count_distribution,
    mc_evaluate_strategy,
)
from .impulse import Strategy, extract_strategy, impulse_budget, value_iteration
from .model import ConfigError, load_config, validate_model
from .snell import PayoffProcess, snell_envelope
from .tree import build_tree, dump_level_rows

RESIDUAL_TOLERANCE = 1e-10


class CliUsageError(ValueError):
    pass


class AuditFailure(RuntimeError):
    def __init__(self, report):
        super().__init__(report.summary())
        self.report = report


@dataclass
class RunReport:
    """Everything a solve run reports; timings are serialized separately."""

    config: dict
    config_hash: str
    mode: str
    depth: int
    node_count: int
    state_count: int
    budget_used: int
    iterations: int
    stalled: bool
    stall_index: "int | None"
    y0: float
    per_iteration_y0: "list[float]"
    forward_value: float
    consistency_residual: float
    residual_tolerance: float
    status: str
    tol: float
    strategy_summary: dict
    timings: "dict[str, float]" = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "Y0": self.y0,
            "iterations": self.iterations,
            "stalled": self.stalled,
            "stall_index": self.stall_index,
            "budget_used": self.budget_used,
            "per_iteration_Y0": self.per_iteration_y0,
            "config": self.config,
            "config_hash": self.config_hash,
            "mode": self.mode,
            "tree": {"depth": self.depth, "node_count": self.node_count, "state_count": self.state_count},
            "forward_value": self.forward_value,
            "consistency_residual": self.consistency_residual,
            "residual_tolerance": self.residual_tolerance,
            "status": self.status,
            "tol": self.tol,
            "strategy_summary": self.strategy_summary,
        }


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])


def _strategy_csv_rows(strategy: Strategy):
    for level, index, cum, count, action, beta in strategy.rows():
        yield (level, index, float(cum), count, action, None if beta is None else float(beta))


def _read_strategy_csv(path: Path) -> Strategy:
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["level", "index", "state_cum", "state_count", "action", "beta"]
        if reader.fieldnames != expected:
            raise CliUsageError(f"strategy CSV must have columns {expected}, got {reader.fieldnames}")
        for rec in reader:
            beta = rec["beta"]
            rows.append(
                (
                    int(rec["level"]),
                    int(rec["index"]),
                    float(rec["state_cum"]),
                    int(rec["state_count"]),
                    rec["action"],
                    None if beta in ("", None) else float(beta),
                )
            )
    return Strategy.from_rows(rows)


def _values_csv_rows(fields):
    for fld in fields:
        for level, level_values in enumerate(fld.values):
            z = fld.z[level]
            k_inc = fld.k_inc[level]
            for i in range(level_values.shape[0]):
                for j, st in enumerate(fld.states):
                    yield (
                        fld.n,
                        level,
                        i,
                        float(st.cumulative),
                        st.count,
                        float(level_values[i, j]),
                        float(z[i, j]),
                        float(k_inc[i, j]),
                    )


def _audit_or_fail(loaded, tree, budget):
    report = validate_model(loaded.process, loaded.impulse, loaded.grid, tree, budget=budget)
    if not report.passed:
        raise AuditFailure(report)
    return report


def _resolve_numerics(loaded, args):
    depth = args.depth if args.depth is not None else loaded.numerics.depth
    tol = args.tol if args.tol is not None else loaded.numerics.tol
    budget = args.budget if getattr(args, "budget", None) is not None else loaded.numerics.budget
    if budget is None:
        budget = impulse_budget(loaded.impulse.reward_bound, loaded.impulse.cost_floor, loaded.process.horizon)
    return depth, tol, budget


def _cmd_solve(args, combined: bool) -> int:
    timings = {}
    start = time.perf_counter()
    loaded = load_config(args.config)
    depth, tol, budget = _resolve_numerics(loaded, args)
    if combined and loaded.grid is None:
        raise CliUsageError("solve-combined needs a control section in the config")

    tree = build_tree(loaded.process, depth)
    timings["build"] = time.perf_counter() - start

    t0 = time.perf_counter()
    _audit_or_fail(loaded, tree, budget)
    timings["audit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if combined:
        spec = HamiltonianSpec(grid=loaded.grid, sigma=loaded.process.sigma, reward=loaded.impulse.reward)
        result = combined_value_iteration(tree, loaded.impulse, spec, tol=tol, budget=budget)
    else:
        result = value_iteration(tree, loaded.impulse, tol=tol, budget=budget)
    timings["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if combined:
        strategy, controls = extract_pair(result.fields, tree, loaded.impulse, spec, tol=tol)
        forward = evaluate_pair(tree, loaded.impulse, spec, strategy, controls)
    else:
        strategy = extract_strategy(result.fields, tree, loaded.impulse, tol=tol)
        forward = evaluate_strategy_exact(tree, loaded.impulse, strategy)
    timings["extract_evaluate"] = time.perf_counter() - t0

    residual = abs(result.y0 - forward.value)
    distribution = impulse_count_distribution(tree, loaded.impulse, strategy)
    report = RunReport(
        config=loaded.raw,
        config_hash=loaded.config_hash,
        mode="solve-combined" if combined else "solve",
        depth=tree.depth,
        node_count=tree.node_count,
        state_count=len(result.states),
        budget_used=result.budget,
        iterations=len(result.fields) - 1,
        stalled=result.stalled,
        stall_index=result.stall_index,
        y0=result.y0,
        per_iteration_y0=result.per_iteration_y0,
        forward_value=forward.value,
        consistency_residual=residual,
        residual_tolerance=RESIDUAL_TOLERANCE,
        status="ok" if residual <= RESIDUAL_TOLERANCE else "inconsistent",
        tol=tol,
        strategy_summary={
            "impulse_count_distribution": {str(k): v for k, v in distribution.items()},
            "impulse_decisions": strategy.impulse_decision_count,
            "decision_count": len(strategy.decisions),
        },
        timings=timings,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_json_dict())
    _write_csv(
        out / "strategy.csv",
        ["level", "index", "state_cum", "state_count", "action", "beta"],
        _strategy_csv_rows(strategy),
    )
    _write_csv(
        out / "values.csv",
        ["n", "level", "index", "state_cum", "state_count", "Y", "Z", "K_inc"],
        _values_csv_rows(result.fields),
    )
    if combined:
        _write_csv(
            out / "controls.csv",
            ["level", "index", "state_cum", "state_count", "u_star"],
            ((lv, ix, float(cum), ct, float(u)) for lv, ix, cum, ct, u in controls.rows()),
        )
    _write_json(out / "timings.json", {k: round(v, 6) for k, v in timings.items()})

    print(f"Y0 = {result.y0!r}  forward = {forward.value!r}  residual = {residual:.3e}  status = {report.status}")
    return 0 if report.status == "ok" else 1


def _cmd_oracle(args) -> int:
    loaded = load_config(args.config)
    depth, _, _ = _resolve_numerics(loaded, args)
    tree = build_tree(loaded.process, depth)
    _audit_or_fail(loaded, tree, None)
    value, strategy = enumerate_optimal(tree, loaded.impulse, args.max_impulses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "oracle.json",
        {
            "value": value,
            "max_impulses": args.max_impulses,
            "config_hash": loaded.config_hash,
            "strategy": [
                {"level": lv, "index": ix, "state_cum": cum, "state_count": ct, "action": act, "beta": beta}
                for lv, ix, cum, ct, act, beta in strategy.rows()
            ],
        },
    )
    print(f"oracle value = {value!r} with at most {args.max_impulses} impulse(s)")
    return 0


def _cmd_eval(args) -> int:
    loaded = load_config(args.config)
    depth, _, budget = _resolve_numerics(loaded, args)
    strategy = _read_strategy_csv(Path(args.strategy))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mc_samples is not None:
        if args.seed is None:
            raise CliUsageError("--mc-samples needs --seed for a reproducible report")
        policy = mc_evaluate_strategy(loaded.impulse, loaded.process, strategy, args.mc_samples, args.seed)
    else:
        if strategy.depth != depth:
            raise CliUsageError(f"strategy depth {strategy.depth} does not match configured depth {depth}")
        tree = build_tree(loaded.process, depth)
        _audit_or_fail(loaded, tree, budget)
        policy = evaluate_strategy_exact(tree, loaded.impulse, strategy)

    payload = {
        "value": policy.value,
        "reward_integral": policy.reward_integral,
        "impulse_cost": policy.impulse_cost,
        "method": policy.method,
        "config_hash": loaded.config_hash,
    }
    if policy.method == "monte-carlo":
        payload.update(
            samples=policy.samples, std_error=policy.std_error, seed=policy.seed, generator=policy.generator
        )
    _write_json(out / "policy_value.json", payload)
    print(f"policy value = {policy.value!r} ({policy.method})")
    return 0


def _cmd_snell(args) -> int:
    by_node = {}
    with Path(args.payoff).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["level", "index", "value"]:
            raise CliUsageError(f"payoff CSV must have columns ['level', 'index', 'value'], got {reader.fieldnames}")
        for rec in reader:
            by_node[(int(rec["level"]), int(rec["index"]))] = float(rec["value"])
    if not by_node:
        raise CliUsageError("payoff CSV is empty")
    depth = max(level for level, _ in by_node)
    values = []
    for k in range(depth + 1):
        arr = np.empty(2**k)
        for i in range(2**k):
            try:
                arr[i] = by_node[(k, i)]
            except KeyError:
                raise CliUsageError(f"payoff CSV missing node (level {k}, index {i})") from None
        values.append(arr)
    payoff = PayoffProcess.from_arrays(values)
    result = snell_envelope(payoff, tol=args.tol if args.tol is not None else 1e-12)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in range(depth + 1):
        for i in range(2**k):
            rows.append(
                (
                    k,
                    i,
                    float(payoff.values[k][i]),
                    float(result.envelope[k][i]),
                    int(result.stop_region[k][i]),
                    int(result.first_optimal_stop[k][i]),
                )
            )
    _write_csv(out / "envelope.csv", ["level", "index", "payoff", "envelope", "stop", "first_stop"], rows)
    print(f"envelope root value = {float(result.envelope[0][0])!r}")
    return 0


def _cmd_dump(args) -> int:
    loaded = load_config(args.config)
    depth, _, _ = _resolve_numerics(loaded, args)
    tree = build_tree(loaded.process, depth)
    writer = csv.writer(sys.stdout)
    writer.writerow(["level", "index", "t", "L", "xmax", "xmin", "xavg"])
    for row in dump_level_rows(tree, args.level):
        writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="impulsetree", description="Impulse control on exact binary scenario trees")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, budget_flag=True):
        p.add_argument("--config", required=True, help="problem config JSON")
        p.add_argument("--depth", type=int, default=None, help="tree depth (overrides config)")
        p.add_argument("--tol", type=float, default=None, help="equality/stall tolerance (overrides config)")
        if budget_flag:
            p.add_argument("--budget", type=int, default=None, help="impulse budget (overrides config)")
        p.add_argument("--threads", type=int, default=None, help="thread count (results are identical regardless)")

    p_solve = sub.add_parser("solve", help="solve the impulse control problem")
    common(p_solve)
    p_solve.add_argument("--out", required=True)

    p_comb = sub.add_parser("solve-combined", help="solve the combined stochastic/impulse problem")
    common(p_comb)
    p_comb.add_argument("--out", required=True)

    p_oracle = sub.add_parser("oracle", help="brute-force optimum over bounded strategies")
    common(p_oracle, budget_flag=False)
    p_oracle.add_argument("--max-impulses", type=int, required=True)
    p_oracle.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="evaluate a strategy CSV exactly or by Monte Carlo")
    common(p_eval)
    p_eval.add_argument("--strategy", required=True)
    p_eval.add_argument("--mc-samples", type=int, default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", required=True)

    p_snell = sub.add_parser("snell", help="Snell envelope of a payoff CSV")
    p_snell.add_argument("--payoff", required=True)
    p_snell.add_argument("--tol", type=float, default=None)
    p_snell.add_argument("--out", required=True)

    p_dump = sub.add_parser("dump", help="dump one tree level as CSV to stdout")
    common(p_dump, budget_flag=False)
    p_dump.add_argument("--level", type=int, required=True)

    return parser


def run(argv) -> int:
    """Dispatch a CLI invocation.  Exit status 0 on success, 2 on audit
    failure (violations listed on stderr), 1 on any other error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "solve":
            return _cmd_solve(args, combined=False)
        if args.command == "solve-combined":
            return _cmd_solve(args, combined=True)
        if args.command == "oracle":
            return _cmd_oracle(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "snell":
            return _cmd_snell(args)
        if args.command == "dump":
            return _cmd_dump(args)
        raise CliUsageError(f"unknown command {args.command!r}")
    except AuditFailure as exc:
        print(exc.report.summary(), file=sys.stderr)
        return 2
    except (CliUsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
