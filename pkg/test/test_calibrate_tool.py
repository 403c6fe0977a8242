import importlib.util
from pathlib import Path

import pytest
import toml

TOOL = Path(__file__).resolve().parent.parent / "tools" / "calibrate_token_recovery.py"


@pytest.fixture(scope="module")
def tool():
    spec = importlib.util.spec_from_file_location("calibrate_token_recovery", TOOL)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


@pytest.mark.parametrize("measured, frozen", [(0.0, 0.0), (0.456, 0.45), (0.799, 0.79), (0.93, 0.8)])
def test_frozen_rate(tool, measured, frozen):
    assert tool.frozen_rate(measured) == pytest.approx(frozen)


def test_write_rate_keeps_the_other_thresholds(tool, tmp_path):
    path = tmp_path / "acceptance.toml"
    path.write_text(
        "seeds = [0, 1]\ntoken_recovery_exact_rate = 0.8\ntoken_recovery_calibrated_seeds = []\n",
        encoding="utf-8",
    )
    tool.write_rate(path, 0.37, [2, 0, 1])
    values = toml.load(path)
    assert values == {"seeds": [0, 1], "token_recovery_exact_rate": 0.37, "token_recovery_calibrated_seeds": [0, 1, 2]}


def test_write_rate_needs_both_lines(tool, tmp_path):
    path = tmp_path / "acceptance.toml"
    path.write_text("token_recovery_exact_rate = 0.8\n", encoding="utf-8")
    with pytest.raises(SystemExit):
        tool.write_rate(path, 0.5, [0])
