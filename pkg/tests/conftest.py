from pathlib import Path

import numpy as np
import pytest

from octreg.cli import main


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synth(out: Path, seed: int, kind: str = "affine", *extra: str) -> Path:
    assert main(["synth", "--seed", str(seed), "--kind", kind, "-o", str(out), *extra]) == 0
    return out


def run_full(pair: Path, out: Path) -> int:
    return main(["register", str(pair / "reference.raw"), str(pair / "moving.raw"), "-o", str(out)])


def run_chained(pair: Path, work: Path) -> int:
    """project -> vessels -> match -> register, each stage reading the previous files."""
    ref, mov = str(pair / "reference.raw"), str(pair / "moving.raw")
    for name, vol in (("ref", ref), ("mov", mov)):
        assert main(["project", vol, "-o", str(work / f"{name}_proj")]) == 0
        assert main(["vessels", vol, "--projection-file", str(work / f"{name}_proj" / "projection.npy"),
                     "-o", str(work / f"{name}_ves")]) == 0
    assert main(["match", ref, mov, str(work / "ref_ves"), str(work / "mov_ves"),
                 "-o", str(work / "match")]) == 0
    return main(["register", ref, mov, "--matches", str(work / "match" / "matches.txt"),
                 "--ref-vessels", str(work / "ref_ves"), "--mov-vessels", str(work / "mov_ves"),
                 "-o", str(work / "reg")])


def same_outputs(a: Path, b: Path) -> list[str]:
    """Names of registration artifacts that differ (timings are excluded)."""
    names = ["report.txt", "matches.txt", "transform.txt", "z_shifts.txt", "registered.raw",
             "checkerboard.ppm", "vessel_overlay.ppm"]
    return [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
