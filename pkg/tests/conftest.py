from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from promalign.encoders import EncoderConfig  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_config() -> EncoderConfig:
    return EncoderConfig(
        vocab_size=50, max_text_len=12, num_patches=4, patch_feature_dim=6, hidden_dim=8,
        visual_hidden_dim=8, patch_proj_dim=4, joint_dim=4, num_layers=1, num_heads=2, seed=0,
    )


@pytest.fixture
def gen() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


class AcceptanceReport:
    """Record one PASS/FAIL/SKIP line per criterion; the lines are echoed in the terminal summary."""

    def _line(self, status: str, name: str, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"{status:<5} {name}" + (f"  ({detail})" if detail else ""))
        print(ACCEPTANCE_LINES[-1])

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        self._line("PASS" if ok else "FAIL", name, detail)
        assert ok, f"{name}: {detail}"

    def skip(self, name: str, reason: str) -> None:
        self._line("SKIP", name, reason)
        pytest.skip(reason)


@pytest.fixture
def acceptance() -> AcceptanceReport:
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
