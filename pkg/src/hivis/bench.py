"""Pipeline stages, benchmark runs and report emission.

A run lives in one work directory. Each stage reads the artifacts of the
previous ones and fails with :class:`MissingArtifact` naming the stage that
has to run first.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import dataset as ds
from . import numerics as nx
from .drafter import Drafter, DrafterConfig, drafter_prefill
from .target_model import (
    TargetConfig,
    TargetModel,
    TargetState,
    generate,
    pretrain_target,
    qa_accuracy,
    softmax,
    target_forward,
)
from .training import LossWeights, RolloutConfig, TrainConfig, TrainExample, precompute_targets, train
from .verification import (
    DecodeStats,
    RoundResult,
    TreeConfig,
    compute_metrics,
    decode_loop,
    one_step_output_distribution,
)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_f", "no_seq", "stage1")
TASKS = ("scene_qa", "text_qa")
EVAL_SEED_OFFSET = 7919  # held-out prompts never share a generator stream with the corpus


class MissingArtifact(RuntimeError):
    """A stage ran before the stage that produces its input."""


class InvariantViolation(RuntimeError):
    pass


@dataclass
class RunConfig:
    work_dir: str = "hivis_run"
    report_dir: str | None = None
    seed: int = 0
    temperature: float = 0.0
    prompts: int = 80
    max_new: int = 32
    corpus_multimodal: int = 4000
    corpus_text: int = 4000
    target_steps: int = 1500
    target_lr: float = 3e-3
    drafter_records: int = 6000
    target: TargetConfig = field(default_factory=TargetConfig)
    drafter: DrafterConfig = field(default_factory=DrafterConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(stage1_epochs=8, stage2_epochs=4, lr=4e-3))
    # one core: a chain verifies cheapest per accepted token (wide trees cost more target rows than they save)
    tree: TreeConfig = field(default_factory=lambda: TreeConfig(1, 6, 6))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "target" in d:
            d["target"] = TargetConfig(**d["target"])
        if "drafter" in d:
            d["drafter"] = DrafterConfig(**d["drafter"])
        if "tree" in d:
            d["tree"] = TreeConfig(**d["tree"])
        if "train" in d:
            t = dict(d["train"])
            if "weights" in t:
                t["weights"] = LossWeights(**t["weights"])
            if "rollout" in t:
                t["rollout"] = RolloutConfig(**t["rollout"])
            d["train"] = TrainConfig(**t)
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self) -> dict:
        return asdict(self)

    # -- artifact paths ----------------------------------------------------------

    @property
    def root(self) -> Path:
        return Path(self.work_dir)

    def corpus_path(self) -> Path:
        return self.root / "corpus.hvc"

    def target_path(self) -> Path:
        return self.root / "target.hvs"

    def examples_path(self, stage: str) -> Path:
        return self.root / f"examples_{stage}.npz"

    def drafter_path(self, variant: str) -> Path:
        return self.root / f"drafter_{variant}.hvs"

    def reports(self) -> Path:
        return Path(os.environ.get("HIVIS_REPORT_DIR") or self.report_dir or self.root / "reports")


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} missing ({path}); run `{stage}` first")
    return path


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def gen_data(cfg: RunConfig) -> ds.MixedCorpus:
    corpus = ds.build_corpus(cfg.corpus_multimodal, cfg.corpus_text, cfg.seed)
    cfg.root.mkdir(parents=True, exist_ok=True)
    ds.save_corpus(corpus, cfg.corpus_path())
    log.info("corpus: %s", corpus.counts())
    return corpus


def load_target(cfg: RunConfig) -> TargetModel:
    path = _require(cfg.target_path(), "target checkpoint", "train-target")
    return TargetModel.from_state_dict(cfg.target, nx.load_checkpoint(path))


def train_target(cfg: RunConfig) -> tuple[TargetModel, float]:
    corpus = ds.load_corpus(_require(cfg.corpus_path(), "corpus", "gen-data"))
    model = pretrain_target(corpus, cfg.target, cfg.target_steps, lr=cfg.target_lr, seed=cfg.seed)
    acc = qa_accuracy(model, ds.gen_color_queries(200, cfg.seed + EVAL_SEED_OFFSET))
    nx.save_checkpoint(cfg.target_path(), model.state_dict())
    _write_json(cfg.target_path().with_suffix(".json"), {"config": asdict(cfg.target), "color_accuracy": acc})
    log.info("target color-query accuracy %.3f", acc)
    return model, acc


def save_examples(path: Path, examples: list[TrainExample]) -> None:
    lengths = np.array([len(x.ids) for x in examples], dtype=np.int64)
    np.savez(
        path,
        lengths=lengths,
        ids=np.concatenate([x.ids for x in examples]),
        e=np.concatenate([x.e for x in examples]),
        f=np.concatenate([x.f for x in examples]),
        greedy=np.concatenate([x.greedy for x in examples]),
        boundary=np.array([x.boundary for x in examples], dtype=np.int64),
        multimodal=np.array([x.modality == "multimodal" for x in examples]),
    )


def load_examples(path: Path) -> list[TrainExample]:
    with np.load(path) as z:
        cuts = np.cumsum(z["lengths"])[:-1]
        parts = [np.split(z[k], cuts) for k in ("ids", "e", "f", "greedy")]
        mods = ["multimodal" if m else "text" for m in z["multimodal"]]
        return [
            TrainExample(ids, e, f, g, mod, int(b))
            for ids, e, f, g, mod, b in zip(*parts, mods, z["boundary"])
        ]


def precompute(cfg: RunConfig) -> dict[str, int]:
    target = load_target(cfg)
    corpus = ds.load_corpus(_require(cfg.corpus_path(), "corpus", "gen-data"))
    records = corpus.records[: cfg.drafter_records]
    sizes = {}
    for stage in ("stage1", "stage2"):
        kept, dropped = ds.filter_records(records, stage)
        examples, storage = precompute_targets(kept, target)
        save_examples(cfg.examples_path(stage), examples)
        sizes[stage] = len(examples)
        log.info("%s: %d examples, dropped %s, stored %.1f%% of a full dump", stage, len(examples), dropped, 100 * storage.ratio)
    return sizes


def _variant_config(cfg: RunConfig, variant: str) -> DrafterConfig:
    if variant == "no_f":
        return replace(cfg.drafter, use_f=False)
    if variant == "no_seq":
        return replace(cfg.drafter, use_seq=False)
    return cfg.drafter


def train_drafter(cfg: RunConfig, variant: str = "full") -> list[dict]:
    """Train one variant. Training ``full`` also writes the ``stage1``
    checkpoint taken at the stage boundary of the same run."""
    if variant not in VARIANTS or variant == "stage1":
        raise ValueError(f"trainable variants: full, no_f, no_seq (got {variant!r})")
    target = load_target(cfg)
    ex = [load_examples(_require(cfg.examples_path(s), f"{s} examples", "precompute")) for s in ("stage1", "stage2")]
    dcfg = _variant_config(cfg, variant)
    tcfg = replace(cfg.train, seed=cfg.seed)
    curves_path = cfg.root / f"curves_{variant}.jsonl"
    curves_path.unlink(missing_ok=True)
    res = train(Drafter.init(dcfg, target), ex[0], ex[1], tcfg, curves_path=curves_path)
    _save_drafter(cfg, variant, res.drafter, tcfg, res.curves)
    if variant == "full":
        _save_drafter(cfg, "stage1", res.stage1, tcfg, [c for c in res.curves if c["stage"] == "stage1"])
    return res.curves


def _save_drafter(cfg: RunConfig, variant: str, drafter: Drafter, tcfg: TrainConfig, curves: list[dict]) -> None:
    path = cfg.drafter_path(variant)
    nx.save_checkpoint(path, drafter.state_dict())
    _write_json(path.with_suffix(".json"), {"variant": variant, "config": drafter.config.to_dict(), "train": tcfg.to_dict(), "curves": curves})


def load_drafter(cfg: RunConfig, target: TargetModel, variant: str = "full") -> Drafter:
    path = cfg.drafter_path(variant)
    if not path.exists():
        raise MissingArtifact(f"drafter checkpoint missing ({path}); run `train-drafter` first")
    side = path.with_suffix(".json")
    dcfg = DrafterConfig(**json.loads(side.read_text())["config"]) if side.exists() else _variant_config(cfg, variant)
    return Drafter.from_state_dict(dcfg, target, nx.load_checkpoint(path))


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


def eval_prompts(task: str, n: int, seed: int) -> list[tuple[list[int], object]]:
    """Held-out ``(prompt ids, scene)`` pairs for a task."""
    if task == "scene_qa":
        return [(ds.prompt_ids(r), r.scene) for r in ds.gen_multimodal(n, seed + EVAL_SEED_OFFSET, short_fraction=0.0)]
    if task == "text_qa":
        return [(ds.prompt_ids(r), None) for r in ds.gen_textonly(n, seed + EVAL_SEED_OFFSET)]
    raise ValueError(f"unknown task {task!r}; choose from {TASKS}")


def run_task(
    task: str,
    target: TargetModel,
    drafter: Drafter,
    tree: TreeConfig,
    n_prompts: int,
    seed: int = 0,
    temperature: float = 0.0,
    max_new: int = 32,
    timed: bool = True,
) -> tuple[list[DecodeStats], list[list[int]]]:
    """Decode every prompt speculatively; with ``timed`` the plain
    autoregressive baseline runs right before each speculative run. At
    T=0 any output mismatch raises :class:`InvariantViolation`."""
    if n_prompts < 1:
        raise ValueError("need at least one prompt")
    prompts = eval_prompts(task, n_prompts, seed)
    rng = np.random.default_rng([seed, 5])
    if timed:  # warmup, not recorded
        generate(target, prompts[0][1], prompts[0][0], max_new)
        decode_loop(prompts[0][0], prompts[0][1], target, drafter, tree, temperature, max_new, rng)
    runs, outputs = [], []
    for i, (prompt, scene) in enumerate(prompts):
        base_time, ref = None, None
        if timed:
            t0 = time.perf_counter()
            ref = generate(target, scene, prompt, max_new, temperature, rng)
            base_time = time.perf_counter() - t0
        out, stats = decode_loop(prompt, scene, target, drafter, tree, temperature, max_new, rng)
        stats.baseline_wall_time = base_time
        if temperature == 0 and ref is not None and out != ref:
            raise InvariantViolation(f"{task} prompt {i}: speculative output differs from greedy decoding")
        runs.append(stats)
        outputs.append(out)
    return runs, outputs


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if rev.returncode == 0:
            return rev.stdout.strip()
    except OSError:
        pass
    return "unknown"


def task_block(task: str, runs: list[DecodeStats], outputs: list[list[int]]) -> dict:
    m = compute_metrics(runs)
    rounds = [r for s in runs for r in s.verification_rounds()]
    return {
        "task": task,
        "tau_committed": m.tau_committed,
        "tau_accepted": m.tau_accepted,
        "speedup": m.speedup,
        "prefill_ratio": m.prefill_ratio,
        "node_count_mean": float(np.mean([r.node_count for r in rounds])) if rounds else 0.0,
        "wall_times": {
            "speculative": sum(s.wall_time for s in runs),
            "baseline": None if m.speedup is None else sum(s.baseline_wall_time for s in runs),
        },
        "runs": [
            {
                "output": out,
                "wall_time": s.wall_time,
                "baseline_wall_time": s.baseline_wall_time,
                "target_prefill_rows": s.target_prefill_rows,
                "drafter_prefill_rows": s.drafter_prefill_rows,
                "truncated": s.truncated,
                "rounds": [r.to_dict() for r in s.rounds],
            }
            for s, out in zip(runs, outputs)
        ],
    }


def stats_from_block(block: dict) -> list[DecodeStats]:
    """Rebuild the decode records embedded in a report block."""
    out = []
    for run in block["runs"]:
        s = DecodeStats(
            wall_time=run["wall_time"], baseline_wall_time=run["baseline_wall_time"],
            target_prefill_rows=run["target_prefill_rows"], drafter_prefill_rows=run["drafter_prefill_rows"],
            truncated=run["truncated"],
        )
        for r in run["rounds"]:
            s.add(RoundResult(**r))
        out.append(s)
    return out


def run_bench(cfg: RunConfig, tasks=TASKS, variant: str = "full") -> dict:
    target = load_target(cfg)
    drafter = load_drafter(cfg, target, variant)
    blocks = []
    for task in tasks:
        runs, outputs = run_task(task, target, drafter, cfg.tree, cfg.prompts, cfg.seed, cfg.temperature, cfg.max_new)
        blocks.append(task_block(task, runs, outputs))
        log.info("%s: tau %.3f speedup %s", task, blocks[-1]["tau_committed"], blocks[-1]["speedup"])
    return {
        "build": build_id(),
        "variant": variant,
        "target_hash": nx.checkpoint_hash(target.state_dict()),
        "drafter_hash": nx.checkpoint_hash(drafter.state_dict()),
        "config": cfg.to_dict(),
        "tasks": blocks,
    }


def run_ablation(cfg: RunConfig, variants=VARIANTS, task: str = "scene_qa") -> dict:
    """τ of each variant on the same prompts (untimed)."""
    if cfg.prompts < 1:
        raise ValueError("ablation needs at least one prompt")
    target = load_target(cfg)
    drafters = {v: load_drafter(cfg, target, v) for v in variants}  # fail before any decoding
    rows = []
    for v, d in drafters.items():
        runs, _ = run_task(task, target, d, cfg.tree, cfg.prompts, cfg.seed, 0.0, cfg.max_new, timed=False)
        m = compute_metrics(runs)
        rows.append({"variant": v, "tau_committed": m.tau_committed, "tau_accepted": m.tau_accepted})
    return {"build": build_id(), "task": task, "config": cfg.to_dict(), "variants": rows}


def verify_lossless(cfg: RunConfig, n_prompts: int, temperature: float = 0.0, variant: str = "full") -> dict:
    """T=0: speculative outputs equal greedy decoding on every prompt of
    both tasks. T>0: the accept/resample law at the first drafted position
    equals the target distribution for every prompt."""
    target = load_target(cfg)
    drafter = load_drafter(cfg, target, variant)
    per_task = max(1, n_prompts // len(TASKS))
    checked = 0
    if temperature == 0:
        for task in TASKS:
            prompts = eval_prompts(task, per_task, cfg.seed + 1)
            for prompt, scene in prompts:
                out, _ = decode_loop(prompt, scene, target, drafter, cfg.tree, 0.0, cfg.max_new)
                if out != generate(target, scene, prompt, cfg.max_new):
                    raise InvariantViolation(f"{task}: speculative output differs from greedy decoding")
                checked += 1
        return {"temperature": 0.0, "prompts": checked, "worst_tv": 0.0}
    worst = 0.0
    for task in TASKS:
        for prompt, scene in eval_prompts(task, per_task, cfg.seed + 1):
            state = TargetState.new(target)
            rows = target.prefix_rows(scene, prompt)
            logits, hidden = target_forward(state, rows)
            x = int(np.argmax(logits[-1]))
            cache = drafter_prefill(drafter, drafter.embed(prompt[1:] + [x]), hidden[rows.shape[0] - len(prompt):])
            q = softmax(cache.last_logits / temperature)
            p_logits, _ = target_forward(state, target.params["tok_emb"].data[[x]])
            p = softmax(p_logits[-1] / temperature)
            worst = max(worst, 0.5 * float(np.abs(one_step_output_distribution(p, q) - p).sum()))
            checked += 1
    if worst > 1e-12:
        raise InvariantViolation(f"one-step output law differs from the target by TV {worst:.3g}")
    return {"temperature": temperature, "prompts": checked, "worst_tv": worst}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _round6(x):
    if isinstance(x, float):
        return float(f"{x:.6g}")
    if isinstance(x, dict):
        return {k: _round6(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round6(v) for v in x]
    if isinstance(x, np.generic):
        return _round6(x.item())
    return x


def render_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(_round6(report), indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "tau_committed", "tau_accepted", "speedup", "prefill_ratio"])
        for b in report["tasks"]:
            w.writerow([b["task"]] + [_round6(b[k]) for k in ("tau_committed", "tau_accepted", "speedup", "prefill_ratio")])
        return buf.getvalue()
    raise ValueError(f"format must be json or csv, got {fmt!r}")


def emit_report(report: dict, fmt: str, path: str | Path) -> Path:
    text = render_report(report, fmt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_round6(obj), indent=2) + "\n")
