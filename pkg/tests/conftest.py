import hashlib
import os
import shutil
import time
from dataclasses import replace
from pathlib import Path

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import pytest

from hivis.bench import RunConfig, gen_data, load_drafter, load_target, precompute, train_drafter, train_target
from hivis.drafter import Drafter, DrafterConfig
from hivis.target_model import TargetConfig, TargetModel

SRC = Path(__file__).resolve().parents[1] / "src" / "hivis"

# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def target() -> TargetModel:
    return TargetModel.init(TargetConfig())


@pytest.fixture(scope="session")
def drafter(target) -> Drafter:
    return Drafter.init(DrafterConfig(), target)


@pytest.fixture(scope="session")
def tiny_target() -> TargetModel:
    return TargetModel.init(TargetConfig(d=8, L=1, H=2, vocab=16, v=4, max_seq=32, ffn=16))


@pytest.fixture(scope="session")
def tiny_drafter(tiny_target) -> Drafter:
    return Drafter.init(DrafterConfig(d=8, d_seq=4, H=2, ffn=16, max_seq=32), tiny_target)


TARGET_SOURCES = ("numerics.py", "layers.py", "target_model.py", "dataset.py", "vocab.py", "scene.py")
DRAFTER_SOURCES = TARGET_SOURCES + ("drafter.py", "training.py", "bench.py")


def _source_key(cfg: RunConfig, sources) -> str:
    h = hashlib.sha256(repr(cfg.to_dict()).encode())
    for name in sources:
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def pipeline(request) -> RunConfig:
    """Corpus and pretrained target, built once and cached across runs
    (keyed by config and the sources that determine the target)."""
    cfg = RunConfig()
    root = request.config.cache.mkdir("hivis") / _source_key(cfg, TARGET_SOURCES)
    cfg = replace(cfg, work_dir=str(root))
    if not cfg.target_path().exists():
        t0 = time.perf_counter()
        gen_data(cfg)
        train_target(cfg)
        (root / "target_seconds").write_text(f"{time.perf_counter() - t0:.1f}")
    return cfg


def target_seconds(cfg: RunConfig) -> float | None:
    """Wall time spent building the cached target, if it was recorded."""
    p = cfg.root / "target_seconds"
    return float(p.read_text()) if p.exists() else None


@pytest.fixture(scope="session")
def trained_target(pipeline) -> TargetModel:
    return load_target(pipeline)


@pytest.fixture(scope="session")
def drafter_run(pipeline) -> RunConfig:
    """``pipeline`` plus precomputed examples and the full and stage-1
    drafters, cached in a subdirectory keyed by the drafter sources."""
    cfg = replace(pipeline, work_dir=str(pipeline.root / _source_key(pipeline, DRAFTER_SOURCES)))
    if not cfg.drafter_path("full").exists():
        cfg.root.mkdir(parents=True, exist_ok=True)
        for src, dst in ((pipeline.corpus_path(), cfg.corpus_path()), (pipeline.target_path(), cfg.target_path())):
            shutil.copyfile(src, dst)
        precompute(cfg)
        train_drafter(cfg, "full")
    return cfg


@pytest.fixture(scope="session")
def trained_drafter(drafter_run, trained_target) -> Drafter:
    return load_drafter(drafter_run, trained_target)
