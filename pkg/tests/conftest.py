"""Shared instance builders for the test suite.

Instances are generated from seeds so every test is deterministic; the
builders keep rewards inside [0, gamma], volatilities strictly positive and
measure tilts inside the admissible band by construction, so the model
audit passes structurally.
"""

import numpy as np
import pytest

from impulsetree import build_tree, load_config, validate_model

# The pinned deterministic instance: near-zero volatility, reward
# clamp(x, 0, 1), single impulse of +1 costing 0.3.  One impulse at the
# root is optimal and worth 1*T - 0.3 = 0.7.
PINNED_CONFIG = {
    "process": {"x0": 0.0, "T": 1.0, "sigma": "0.000000001", "drift": None},
    "impulse": {"U": [1.0], "psi": {"1.0": 0.3}, "c": 0.1, "gamma": 1.0, "h": "clamp(x, 0, 1)"},
    "control": None,
    "numerics": {"depth": 2, "tol": 1e-12, "budget": None},
}


def random_impulse_config(seed, depth=None, tol=1e-12, budget=None):
    rng = np.random.default_rng(seed)
    if depth is None:
        depth = int(rng.integers(3, 9))
    gamma = 1.0
    c = round(float(rng.uniform(0.15, 0.4)), 4)
    n_u = int(rng.integers(1, 3))
    impulses = []
    while len(impulses) < n_u:
        v = round(float(rng.uniform(0.2, 1.0)) * (1.0 if rng.random() < 0.5 else -1.0), 3)
        if v not in impulses:
            impulses.append(v)
    psi = {repr(v): round(c + float(rng.uniform(0.0, 0.3)), 6) for v in impulses}
    feat = str(rng.choice(["x", "xmax", "xmin", "xavg"]))
    a0 = round(float(rng.uniform(0.0, 0.8)), 4)
    a1 = round(float(rng.uniform(-1.0, 1.0)), 4)
    h = f"clamp({a0} + {a1}*{feat}, 0, {gamma})"
    s0 = round(float(rng.uniform(0.5, 1.0)), 4)
    s1 = round(float(rng.uniform(0.0, 0.3)), 4)
    sigma = f"{s0} + {s1}*clamp(abs(x), 0, 2)"
    drift = repr(round(float(rng.uniform(-0.3, 0.3)), 4)) if rng.random() < 0.5 else None
    x0 = round(float(rng.uniform(-0.5, 0.5)), 4)
    return {
        "process": {"x0": x0, "T": 1.0, "sigma": sigma, "drift": drift},
        "impulse": {"U": impulses, "psi": psi, "c": c, "gamma": gamma, "h": h},
        "control": None,
        "numerics": {"depth": depth, "tol": tol, "budget": budget},
    }


def random_comparison_pair(seed, depth=None):
    """Two configs identical except h2 >= h1 pointwise (same clamp window,
    inner expression shifted up)."""
    rng = np.random.default_rng(seed)
    base = random_impulse_config(seed, depth=depth)
    inner_gap = round(float(rng.uniform(0.05, 0.4)), 4)
    h1 = base["impulse"]["h"]
    inner = h1[len("clamp(") : h1.rfind(", 0, ")]
    h2 = f"clamp({inner} + {inner_gap}, 0, {base['impulse']['gamma']})"
    high = {**base, "impulse": {**base["impulse"], "h": h2}}
    return base, high


def random_combined_config(seed, depth=None, n_controls=None, tol=1e-12):
    rng = np.random.default_rng(seed)
    if depth is None:
        depth = int(rng.integers(3, 6))
    gamma = 1.0
    c = round(float(rng.uniform(0.2, 0.45)), 4)
    beta = round(float(rng.uniform(0.3, 1.0)) * (1.0 if rng.random() < 0.5 else -1.0), 3)
    psi = {repr(beta): round(c + float(rng.uniform(0.0, 0.2)), 6)}
    if n_controls is None:
        n_controls = int(rng.integers(2, 4))
    controls = []
    while len(controls) < n_controls:
        v = round(float(rng.uniform(-1.0, 1.0)), 3)
        if v not in controls:
            controls.append(v)
    feat = str(rng.choice(["x", "xmax", "xavg"]))
    a0 = round(float(rng.uniform(0.1, 0.7)), 4)
    a1 = round(float(rng.uniform(-0.8, 0.8)), 4)
    a2 = round(float(rng.uniform(-0.3, 0.3)), 4)
    h = f"clamp({a0} + {a1}*{feat} + {a2}*u, 0, {gamma})"
    b0 = round(float(rng.uniform(0.1, 0.3)), 4)
    b1 = round(float(rng.uniform(-0.5, 0.5)), 4)
    f = f"{b0}*u*clamp(1 + {b1}*x, 0, 2)"
    s0 = round(float(rng.uniform(0.7, 1.2)), 4)
    s1 = round(float(rng.uniform(0.0, 0.25)), 4)
    sigma = f"{s0} + {s1}*clamp(abs(x), 0, 2)"
    x0 = round(float(rng.uniform(-0.5, 0.5)), 4)
    return {
        "process": {"x0": x0, "T": 1.0, "sigma": sigma, "drift": None},
        "impulse": {"U": [beta], "psi": psi, "c": c, "gamma": gamma, "h": h},
        "control": {"V": controls, "f": f},
        "numerics": {"depth": depth, "tol": tol, "budget": None},
    }


def build_problem(config):
    """Load, build and audit; returns (loaded config, tree)."""
    loaded = load_config(config)
    tree = build_tree(loaded.process, loaded.numerics.depth)
    report = validate_model(loaded.process, loaded.impulse, loaded.grid, tree, budget=loaded.numerics.budget)
    assert report.passed, report.summary()
    return loaded, tree


@pytest.fixture
def pinned_problem():
    return build_problem(PINNED_CONFIG)
