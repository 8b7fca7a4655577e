import sys
from pathlib import Path

import pytest

# oracles.py lives next to the tests
sys.path.insert(0, str(Path(__file__).parent))

TINY = {
    "data": {"train": 8, "val": 4},
    "teacher": {"base_channels": 4},
    "student": {"base_channels": 2},
    "gc": {"reduction": 2},
    "teacher_train": {"epochs": 1, "batch_size": 4, "warmup_iters": 2},
    "student_train": {"epochs": 1, "batch_size": 4, "warmup_iters": 2},
}


@pytest.fixture
def tiny():
    """A config small enough to train in well under a second."""
    return {k: dict(v) for k, v in TINY.items()}


# one line per acceptance criterion, echoed after the run so it survives output capture
ACCEPTANCE_LINES = {}


def record(number: int, ok: bool, detail: str):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """The full desk experiment, driven through the CLI with default settings.

    gen-data (seed 0, 640 scenes), one teacher, then baseline and AFD students
    for seeds 0..4. Takes about ten minutes on one core.
    """
    import json
    import time

    from afd.cli import main

    root = tmp_path_factory.mktemp("desk")
    data, teacher = root / "data.afdc", root / "teacher.afdc"
    start = time.perf_counter()
    assert main(["gen-data", "--seed", "0", "--count", "640", "--out", str(data)]) == 0
    assert main(["train-teacher", "--data", str(data), "--out", str(teacher)]) == 0

    def final_map(ckpt):
        lines = Path(str(ckpt) + ".metrics.jsonl").read_text().splitlines()
        return json.loads(lines[-1])

    def distill_args(mode, seed):
        return ["distill", "--teacher-ckpt", str(teacher), "--data", str(data), "--mode", mode, "--seed", str(seed)]

    runs, files = {}, {}
    for seed in range(5):
        for mode in ("baseline", "afd"):
            out = root / f"{mode}_{seed}.afdc"
            assert main([*distill_args(mode, seed), "--out", str(out)]) == 0
            runs[(mode, seed)] = final_map(out)
            files[(mode, seed)] = out
    return {
        "teacher": teacher,
        "teacher_map": final_map(teacher)["val_map"],
        "runs": runs,
        "files": files,
        "distill_args": distill_args,
        "seconds": time.perf_counter() - start,
    }
