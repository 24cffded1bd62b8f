"""daDPO distillation: Python access to the C++ core."""

import json

from ._dadpo import (
    DadpoError,
    __version__,
    implicit_rewards,
    optimal_policy,
    rl_objective,
    run_cli,
)
from . import _dadpo

__all__ = [
    "DadpoError",
    "__version__",
    "default_world_config",
    "distill_world",
    "implicit_rewards",
    "optimal_policy",
    "rl_objective",
    "run_cli",
    "run_suite",
    "win_rate",
]


def win_rate(n_win, n_lose, n_tie):
    """Counts and omega = (win - lose) / total * 100, with its display string ("omega_display")."""
    return json.loads(_dadpo.win_rate_json(n_win, n_lose, n_tie))


def run_suite(suite, seed=0, instances=0):
    """Run a verification suite (theorem1, gradients, reductions, winrate)."""
    return json.loads(_dadpo.run_suite_json(suite, seed, instances))


def default_world_config():
    return json.loads(_dadpo.default_world_config_json())


def distill_world(world=None, config=None):
    """Distill on a synthetic world and judge the result with its gold reward.

    `world` overrides default_world_config() keys; `config` holds run-config
    keys such as method, beta1, beta2, epochs. Returns the run manifest and
    the held-out win rate against the teacher.
    """
    w = default_world_config()
    w.update(world or {})
    lines = []
    for key, value in (config or {}).items():
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return json.loads(_dadpo.distill_world_json(json.dumps(w), "\n".join(lines)))
