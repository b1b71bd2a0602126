import numpy as np

from jadce.cli import main
from jadce.prox import check_mcp
from jadce.verify import (
    check_analytic_weight,
    check_ista,
    check_prox_oracle,
    check_support,
    format_report,
)


def mutated_prox(U, theta, eta):
    # middle branch with a perturbed expansion constant
    check_mcp(theta, eta)
    U = np.asarray(U, dtype=float)
    a = np.abs(U)
    hi = 0.5 / eta if eta > 0 else np.inf
    shrunk = (U - theta * np.sign(U)) / (1.0 - 2.2 * theta * eta)
    return np.where(a <= theta, 0.0, np.where(a <= hi, shrunk, U))


def test_prox_check_passes_and_catches_mutation():
    assert check_prox_oracle(n_draws=300).passed
    bad = check_prox_oracle(n_draws=300, prox=mutated_prox)
    assert not bad.passed and bad.stats["worst_steps"] > 2


def test_small_checks_pass_with_timings():
    results = [check_analytic_weight(n_instances=2), check_ista(n_instances=2, iters=100),
               check_support(n_samples=10, K=4, L=20, N=40)]
    assert all(r.passed for r in results)
    report = format_report(results)
    assert report.count("PASS") == 3 and "s  " in report
    assert all(r.seconds >= 0 for r in results)


def test_verify_command(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "5/5 checks passed" in out
    assert (tmp_path / "verify_report.json").exists()
