from __future__ import annotations

import os
from pathlib import Path

import pytest

from probembed.cli import run_cli

# a deliberately tiny run so the full command chain finishes in seconds
SMALL_RUN = """\
[run]
seed = 3
out_dir = out
n_train = 80
n_test = 40
n_classes = 4
epochs = 2
batch_size = 16
base_lr = 0.01
hidden1 = 16
hidden2 = 16
embedding_dim = 8
ks = 1,5,10
selective_ks = 1,5
random_controls = 5
robustness_severities = 0,1,5
"""

PIPELINE = (
    "gen-data",
    "train",
    "encode",
    "eval-retrieval",
    "eval-zeroshot",
    "eval-selective",
    "eval-robustness",
    "export-csv",
)


def run_pipeline(workdir: Path) -> dict[str, bytes]:
    """Run every subcommand inside ``workdir`` and return the produced files."""
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "run.ini").write_text(SMALL_RUN, encoding="utf-8")
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        for command in PIPELINE:
            code = run_cli([command, "-c", "run.ini"])
            assert code == 0, f"{command} exited with {code}"
    finally:
        os.chdir(cwd)
    out = workdir / "out"
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.fixture
def clean_env(monkeypatch):
    monkeypatch.delenv("PROBEMBED_SEED", raising=False)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
