from pathlib import Path

import pytest

from pdfnet.config import RunConfig
from pdfnet.data import make_synthetic_dataset

SMALL = dict(
    resolution=(256, 256),
    patch_grid=8,
    backbone_channels=(16, 32, 64, 128),
    decoder_channels=32,
    token_limit=16,
)


def small_config(tmp: Path, data_root, **overrides) -> RunConfig:
    values = dict(SMALL, data_root=str(data_root), out_dir=str(tmp), augment=False, epochs=1)
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    return make_synthetic_dataset(tmp_path_factory.mktemp("synth") / "data", 3, (256, 256), seed=7)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory) -> Path:
    """Two 256x256 samples reused by CLI and training tests."""
    return make_synthetic_dataset(tmp_path_factory.mktemp("tiny") / "data", 2, (256, 256), seed=11)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, ordered by number."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in name or rep.when not in ("call", "setup"):
                continue
            number = int(name.split("test_criterion_")[1].split("_")[0])
            props = dict(getattr(rep, "user_properties", []))
            verdict = "PASS" if outcome == "passed" else "FAIL"
            detail = props.get("detail", "no measurement recorded" if outcome != "passed" else "")
            lines[number] = f"criterion {number:>2}: {verdict}  {detail}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
