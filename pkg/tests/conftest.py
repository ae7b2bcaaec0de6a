from __future__ import annotations

import pytest

from loracl.model import ViTConfig

TINY = ViTConfig(image_size=8, patch_size=4, channels=3, dim=8, depth=1, heads=2, num_classes=4, lora_rank=2, lora_alpha=2.0)


@pytest.fixture
def tiny_config() -> ViTConfig:
    return TINY


# Acceptance results are collected here and echoed at the end of the run so
# that each criterion gets one PASS/FAIL line in the terminal output.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
