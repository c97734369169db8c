import pytest

from verification import InvariantVerifier, run_verification


def test_fast_verification_passes():
    result = run_verification("fast", seed=7)
    assert result.passed, result.details
    assert result.flags == []
    assert set(result.details) == {
        "gate_unitarity", "dft_equivalence", "schedule_equivalence", "dense_oracle",
        "engine_oracle", "cost_counters", "tfi_cross_oracle",
    }
    assert result.details["cost_counters"]["n=8"]["one_site"] == 7
    assert result.summary().startswith("verify[fast] PASS")


def test_unknown_level_rejected():
    with pytest.raises(ValueError):
        InvariantVerifier(level="thorough")


@pytest.mark.slow
def test_full_verification_passes():
    result = run_verification("full")
    assert result.passed, result.details
