"""End-to-end plateau-guided merging and the desk-scale experiment driver."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .analysis import localization_rate, split_mass
from .checkpoint_io import atomic_write_text, diff, digest, save
from .interventions import SweepProfile, mask_sweep
from .merging import GridResult, MergeSpec, grid_search, lambda_grid, merge
from .model import Checkpoint, ModelConfig
from .plateau import detect_plateau_onset, neighbor_candidates, resolve_k_star
from .taskgen import Task, gen_grounded_task, gen_text_task
from .training import TrainConfig, accuracy, finetune_mllm, train_base_lm, write_curve

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    radius: int = 3
    lambda_step: float = 0.1
    lambda_max: float = 1.5
    lambda_sum_tol: float | None = 0.3
    subset: str = "attn_qkvo"
    sweep_split: str = "val"
    val_limit: int | None = 256
    smoothing_window: int = 3
    min_plateau_len: int = 2
    plateau_slope_tol_frac: float = 0.1

    def to_kv(self) -> dict[str, str]:
        return {f"pipeline.{k}": ("none" if v is None else str(v)) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "PipelineConfig":
        out = cls()
        for key, default in asdict(out).items():
            raw = kv.get(f"pipeline.{key}")
            if raw is None:
                continue
            if raw.lower() == "none":
                setattr(out, key, None)
            elif isinstance(default, str):
                setattr(out, key, raw)
            elif isinstance(default, int) and not isinstance(default, bool):
                setattr(out, key, int(raw))
            else:
                setattr(out, key, float(raw))
        return out


@dataclass
class PipelineReport:
    inputs: dict
    config: dict
    sweep: dict
    segmentation: dict
    k_star: int
    fallback: bool
    k0_candidates: dict[int, float]
    final_spec: dict
    scores: dict
    deltas: dict
    analysis: dict = field(default_factory=dict)
    grid_csv: str = "grid.csv"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k0_candidates"] = {str(k): v for k, v in self.k0_candidates.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _score_table(models: dict[str, Checkpoint], task: Task, splits) -> dict:
    return {name: {s: accuracy(ck, task.split(s)) for s in splits} for name, ck in models.items()}


def plam_pipeline(base: Checkpoint, vlm: Checkpoint, task: Task, config: PipelineConfig | None = None,
                  text_task: Task | None = None, profile: SweepProfile | None = None,
                  workers: int | None = None, analyze: bool = True):
    """Sweep, find the plateau onset, search ``k0`` and coefficients, merge, and score.

    Returns ``(merged, report, grid)``. Selection only ever sees the
    validation split; test numbers are reported alongside.
    """
    config = config or PipelineConfig()
    L = vlm.config.num_layers
    if base.config != vlm.config:
        raise ValueError("base and vlm configs differ")
    if profile is None:
        profile = mask_sweep(vlm, task, config.sweep_split, workers=workers, model_id=digest(vlm))
    if not profile.complete:
        raise RuntimeError("mask sweep incomplete")
    seg = detect_plateau_onset(profile.scores, config.smoothing_window, config.min_plateau_len,
                               config.plateau_slope_tol_frac)
    seg = resolve_k_star(seg, L)
    k_star, fallback = seg.k_star, seg.fallback
    candidates = neighbor_candidates(k_star, config.radius, L)
    lams = lambda_grid(0.0, config.lambda_max, config.lambda_step)
    grid = grid_search(base, vlm, candidates, lams, lams, config.subset, task=task, split="val",
                       limit=config.val_limit, sum_tol=config.lambda_sum_tol)
    merged = merge(base, vlm, grid.best)

    scores = {"grounded": _score_table({"vlm": vlm, "merged": merged}, task, ("val", "test"))}
    if text_task is not None:
        scores["text"] = _score_table({"base": base, "vlm": vlm, "merged": merged}, text_task, ("val", "test"))
    deltas = {t: {s: tab["merged"][s] - tab["vlm"][s] for s in tab["merged"]} for t, tab in scores.items()}

    analysis = {}
    if analyze and task.split("test").vision.shape[1]:
        test = task.split("test")
        late = list(grid.best.layers)
        for name, ck in (("vlm", vlm), ("merged", merged)):
            mass = split_mass(ck, test)
            analysis[name] = {
                "mass_ins_vis_per_layer": mass["all"].per_layer["vis"],
                "mass_ins_vis_per_layer_correct": mass["correct"].per_layer["vis"],
                "late_mass_ins_vis": mass["all"].late_mean("vis", late),
                "late_mass_ins_vis_correct": mass["correct"].late_mean("vis", late),
                "localization_rate": localization_rate(ck, test),
            }
        analysis["late_layers"] = late

    report = PipelineReport(
        inputs={"base_digest": digest(base), "vlm_digest": digest(vlm), "task_digest": task.digest(),
                "task_id": task.task_id, "text_task_digest": text_task.digest() if text_task else None,
                "model_config": vlm.config.to_dict()},
        config=asdict(config),
        sweep={"split": profile.split, "points": [[k, s] for k, s in profile.points]},
        segmentation=json.loads(seg.to_json()),
        k_star=k_star, fallback=fallback,
        k0_candidates=grid.per_k0(),
        final_spec={**grid.best.to_kv(), "k0": grid.best.k0, "val_score": grid.best_score,
                    "vlm_val_baseline": grid.baseline_score},
        scores=scores, deltas=deltas, analysis=analysis,
    )
    return merged, report, grid


# desk-scale experiment ------------------------------------------------------

@dataclass
class DeskConfig:
    """Defaults sized for a single CPU core (a few minutes per seed)."""

    model: ModelConfig = field(default_factory=ModelConfig)
    n_train: int = 4000
    n_val: int = 512
    n_test: int = 512
    base_steps: int = 400
    finetune_steps: int = 1200
    lr: float = 3e-4
    batch_size: int = 16
    eval_every: int = 200
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    question: str = "cell"

    def train_config(self, steps: int) -> TrainConfig:
        return TrainConfig(steps=steps, batch_size=self.batch_size, lr=self.lr, eval_every=self.eval_every)


def make_tasks(seed: int, desk: DeskConfig) -> tuple[Task, Task]:
    text = gen_text_task(seed, desk.n_train, n_val=desk.n_val, n_test=desk.n_test)
    grounded = gen_grounded_task(seed, desk.n_train, feature_dim=desk.model.vision_feature_dim,
                                 n_val=desk.n_val, n_test=desk.n_test, question=desk.question)
    return text, grounded


def train_pair(seed: int, desk: DeskConfig, text: Task, grounded: Task):
    base_run = train_base_lm(desk.model, text, desk.train_config(desk.base_steps), seed)
    mllm_run = finetune_mllm(base_run.checkpoint, grounded, desk.train_config(desk.finetune_steps), seed)
    return base_run, mllm_run


def run_desk(seed: int, desk: DeskConfig | None = None, out: str | Path | None = None) -> dict:
    """Train a base/MLLM pair and run the full merging pipeline for one seed."""
    desk = desk or DeskConfig()
    timings = {}
    t0 = time.perf_counter()
    text, grounded = make_tasks(seed, desk)
    base_run, mllm_run = train_pair(seed, desk, text, grounded)
    base, vlm = base_run.checkpoint, mllm_run.checkpoint
    timings["train_s"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    merged, report, grid = plam_pipeline(base, vlm, grounded, desk.pipeline, text_task=text)
    timings["pipeline_s"] = time.perf_counter() - t1
    profile = report.sweep["points"]
    summary = {
        "seed": seed,
        "sweep_gap": profile[-1][1] - profile[0][1],
        "plateau_found": not report.fallback,
        "k_star": report.k_star,
        "k0": report.final_spec["k0"],
        "lambda1": float(report.final_spec["lambda1"]),
        "lambda2": float(report.final_spec["lambda2"]),
        "merged_is_vlm": diff(merged, vlm).equal_bitwise,
        "val_selected": report.final_spec["val_score"],
        "val_vlm": report.final_spec["vlm_val_baseline"],
        "test_vlm": report.scores["grounded"]["vlm"]["test"],
        "test_merged": report.scores["grounded"]["merged"]["test"],
        "text_base": report.scores["text"]["base"]["test"],
        "text_vlm": report.scores["text"]["vlm"]["test"],
        "text_merged": report.scores["text"]["merged"]["test"],
        "late_mass_vlm": report.analysis["vlm"]["late_mass_ins_vis"],
        "late_mass_merged": report.analysis["merged"]["late_mass_ins_vis"],
        "loc_vlm": report.analysis["vlm"]["localization_rate"],
        "loc_merged": report.analysis["merged"]["localization_rate"],
        **timings,
    }
    if out is not None:
        out = Path(out)
        save(base, out / "checkpoints" / "base.ckpt")
        save(vlm, out / "checkpoints" / "mllm.ckpt")
        save(merged, out / "checkpoints" / "merged.ckpt")
        write_curve(out / "logs" / "base_curve.csv", base_run.curve)
        write_curve(out / "logs" / "mllm_curve.csv", mllm_run.curve)
        atomic_write_text(out / "reports" / "grid.csv", grid.to_csv())
        atomic_write_text(out / "reports" / "pipeline.json", report.to_json())
        atomic_write_text(out / "reports" / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
