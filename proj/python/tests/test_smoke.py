import math

import pytest

import dadpo


def test_published_win_rates():
    assert dadpo.win_rate(82, 175, 43)["omega_display"] == "-31.0%"
    assert dadpo.win_rate(161, 119, 20)["omega_display"] == "14.0%"


def test_suite():
    r = dadpo.run_suite("reductions", instances=20)
    assert r["passed"]
    assert r["details"]["max_ddpo_loss_gap"] == 0.0


def test_closed_form_round_trip():
    ref, te, r = [0.2, 0.3, 0.5], [0.6, 0.3, 0.1], [1.0, -0.5, 0.25]
    pi = dadpo.optimal_policy(ref, te, r, 0.1, 0.2)
    assert math.isclose(sum(pi), 1.0, abs_tol=1e-12)
    ir = dadpo.implicit_rewards(pi, ref, te, 0.1, 0.2)
    assert ir[0] - ir[1] == pytest.approx(r[0] - r[1], abs=1e-9)
    best = dadpo.rl_objective(pi, ref, te, r, 0.1, 0.2)
    assert best >= dadpo.rl_objective(ref, ref, te, r, 0.1, 0.2)


def test_errors_carry_kind():
    with pytest.raises(dadpo.DadpoError, match="invalid_argument|domain_error"):
        dadpo.optimal_policy([0.5, 0.5], [0.5, 0.5], [0.0, 0.0], 0.0, 0.0)


def test_distill_small_world():
    out = dadpo.distill_world(
        {"n_train": 40, "n_eval": 20}, {"method": "dadpo", "sft_epochs": 3, "epochs": 5}
    )
    assert out["manifest"]["config"]["method"] == "dadpo"
    assert out["win_rate"]["n_win"] + out["win_rate"]["n_lose"] + out["win_rate"]["n_tie"] == 20


def test_cli_in_process():
    code, out, _ = dadpo.run_cli(["verify", "--suite", "winrate"])
    assert code == 0
    code, _, err = dadpo.run_cli(["verify"])
    assert code == 2
    assert "usage_error" in err
