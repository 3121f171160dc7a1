import itertools
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def brute_force_value(mdp, r, s):
    """Best discounted return over every action sequence of length H from s."""
    r = np.asarray(r, dtype=np.float64).reshape(mdp.num_states, mdp.num_actions)
    best = -np.inf
    for seq in itertools.product(range(mdp.num_actions), repeat=mdp.horizon):
        x, total = s, 0.0
        for h, a in enumerate(seq):
            total += mdp.discount ** h * r[x, a]
            x = mdp.transition[x, a]
        best = max(best, total)
    return 0.0 if mdp.horizon == 0 else best


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config_dict(**train):
    """A config small enough to train in about a second."""
    t = dict(total_steps=120, batch_size=8, learn_start=20, target_update_period=50,
             metrics_every=25, eval_every=60, eval_episodes=1, buffer_capacity=200,
             epsilon={"start": 1.0, "end": 0.1, "anneal_steps": 100})
    t.update(train)
    return {
        "env": {"width": 4, "height": 4, "num_agents": 2, "num_sites": 2, "step_cap": 12},
        "train": t,
        "net": {"alone_hidden": [8], "encoder_hidden": [], "model_dim": 4, "num_layers": 1,
                "head_hidden": [8]},
        "eval": {"episodes": 3, "scenarios": ["standard", "adhoc_reversed", "team_size:1"]},
        "seed": 0,
    }


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
