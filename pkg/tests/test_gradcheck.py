import logging

import pytest

from src.config import SupVariant
from src.gradcheck import primitive_checks, run_checks


@pytest.fixture(scope="module")
def results():
    return {result.name: result for result in run_checks(seed=0)}


def test_every_primitive_is_checked():
    """Test that each differentiable primitive has a check."""
    names = {name for name, _, _ in primitive_checks()}
    assert {"Add", "MatMul", "Affine", "Softmax", "LogGamma", "Digamma", "Take", "Concat"} <= names
    assert len(names) == 23


def test_all_checks_pass(results):
    """Test that analytic gradients match central differences everywhere."""
    failed = {name: r.report.max_error for name, r in results.items() if not r.passed}
    assert failed == {}


def test_loss_checks_cover_every_variant(results):
    """Test that the full loss is checked for each supervision variant and the baseline."""
    for variant in SupVariant:
        assert f"total_loss[{variant}]" in results
    assert "baseline_bt_loss" in results
    assert "ImplicitGamma" in results


def test_injected_fault_is_caught(caplog):
    """Test that flipping one primitive's derivative fails its check and is logged."""
    with caplog.at_level(logging.ERROR, logger="src.gradcheck"):
        faulty = {r.name: r for r in run_checks(seed=0, inject_fault="Softplus")}
    assert not faulty["Softplus"].passed
    assert not faulty["total_loss[kl]"].passed
    assert faulty["Tanh"].passed
    assert "Softplus" in caplog.text
