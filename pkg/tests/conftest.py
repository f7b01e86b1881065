import os
import time
from pathlib import Path

import pytest

from vcfes.cli import main

REPO = Path(__file__).resolve().parent.parent
BENCHMARK_CONFIG = REPO / "configs" / "benchmark.toml"
MODES = "global_only,largest_view,all_views"

_acceptance = {}


def _label(number):
    return f"{number:g}".replace(".5", "-strict")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def run_benchmark_pipeline(root):
    """synth -> train -> gallery -> eval on the benchmark spec, through the CLI."""
    root = Path(root)
    data, ckpt = root / "data", root / "checkpoint"
    steps = [
        ["synth", "--out", data],
        ["train", "--config", BENCHMARK_CONFIG, "--dataset", data, "--checkpoint", ckpt],
        ["gallery", "--checkpoint", ckpt, "--dataset", data, "--out", root / "gallery.vcix"],
        ["eval", "--checkpoint", ckpt, "--index", root / "gallery.vcix", "--dataset", data,
         "--modes", MODES, "--out", root / "report.json"],
    ]
    start = time.perf_counter()
    for argv in steps:
        code = main([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"pipeline step {argv[0]} exited {code}")
    return {"root": root, "data": data, "checkpoint": ckpt, "index": root / "gallery.vcix",
            "report": root / "report.json", "seconds": time.perf_counter() - start}


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    old = os.environ.get("VCFES_THREADS")
    os.environ["VCFES_THREADS"] = "1"
    try:
        yield run_benchmark_pipeline(tmp_path_factory.mktemp("benchmark"))
    finally:
        if old is None:
            os.environ.pop("VCFES_THREADS", None)
        else:
            os.environ["VCFES_THREADS"] = old


@pytest.fixture
def detail(request):
    """Tests write a short measurement string here for the acceptance summary."""
    box = {"text": ""}
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        _acceptance[request.node.nodeid] = {"number": marker.args[0], "title": marker.args[1],
                                            "box": box, "outcome": "not run"}
    return box


def pytest_runtest_logreport(report):
    entry = _acceptance.get(report.nodeid)
    if entry is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["outcome"] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_acceptance.values(), key=lambda e: e["number"]):
        text = entry["box"]["text"]
        terminalreporter.write_line(
            f"[{entry['outcome']}] criterion {_label(entry['number'])}: {entry['title']}"
            + (f" | {text}" if text else ""))
