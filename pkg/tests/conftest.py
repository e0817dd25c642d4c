"""Shared fixtures and builders for the test suite."""

import gzip
import struct
import time

import numpy as np
import pytest

from dropscale.harness import cmd_experiment, parse_config
from dropscale.network import DropoutGate, LayerSpec
from dropscale.trainer import init_params

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    """Stash an acceptance verdict for the end-of-run summary block."""
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def write_idx_pair(dir_path, images, labels, compress=False):
    """Write an IDX image/label file pair; returns the two paths.

    `images` is a uint8 array of shape (count, rows, cols).
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    img = struct.pack(">IIII", 0x00000803, count, rows, cols) + images.tobytes()
    lab = struct.pack(">II", 0x00000801, labels.shape[0]) + labels.tobytes()
    suffix = ".gz" if compress else ""
    img_path = dir_path / f"images.idx{suffix}"
    lab_path = dir_path / f"labels.idx{suffix}"
    img_path.write_bytes(gzip.compress(img) if compress else img)
    lab_path.write_bytes(gzip.compress(lab) if compress else lab)
    return img_path, lab_path


def small_net(seed=0, in_dim=5, hidden=8, classes=3, head="softmax",
              hidden_act="relu", p=0.5, convention="classical"):
    """A 2-layer network with the dropout gate before the output layer."""
    specs = [LayerSpec(in_dim, hidden, hidden_act),
             LayerSpec(hidden, classes, head)]
    params = init_params(specs, seed)
    gate = DropoutGate(position=1, p=p, convention=convention)
    return params, gate


@pytest.fixture(scope="session")
def desk_report(tmp_path_factory):
    """The full default experiment protocol, shared by the acceptance tests.

    Runs 8 repeats at the harness defaults (10-class synthetic task,
    784-256-10 network, p=0.5, Adam); takes about a minute.
    """
    out = tmp_path_factory.mktemp("desk")
    cfg = parse_config(f"seed=0\nout={out}\n", source="desk")
    start = time.perf_counter()
    report = cmd_experiment(cfg)
    report.elapsed_seconds = time.perf_counter() - start
    return report
