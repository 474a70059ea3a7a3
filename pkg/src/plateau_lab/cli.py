"""Command-line entry point: ``plateau-lab <subcommand> --out RUN_DIR ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis, merging
from .checkpoint_io import atomic_write_text, diff, digest, load, read_kv, save, write_kv
from .harness import EvalReport, compare, evaluate
from .interventions import SweepProfile, mask_sweep
from .layout import MaskSpec
from .model import ModelConfig, Prompt, embed_multimodal, forward
from .pipeline import DeskConfig, PipelineConfig, make_tasks, plam_pipeline, train_pair
from .plateau import detect_plateau_onset, neighbor_candidates, resolve_k_star
from .taskgen import load_task, queried_cell, save_task
from .training import finetune_mllm, train_base_lm, write_curve

logger = logging.getLogger("plateau_lab")

RUN_DIRS = ("checkpoints", "profiles", "reports", "logs", "data")


class CliError(Exception):
    """User-facing failure reported as JSON."""


@dataclass
class RunConfig:
    """Everything that determines a run, serialized as ``config.kv``."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    n_train: int = 4000
    n_val: int = 512
    n_test: int = 512
    base_steps: int = 400
    finetune_steps: int = 1200
    lr: float = 3e-4
    batch_size: int = 16
    eval_every: int = 200
    question: str = "cell"
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    _SCALARS = ("seed", "n_train", "n_val", "n_test", "base_steps", "finetune_steps", "lr",
                "batch_size", "eval_every", "question")

    def to_kv(self) -> dict[str, str]:
        kv = {name: str(getattr(self, name)) for name in self._SCALARS}
        kv.update({f"model.{k}": str(v) for k, v in self.model.to_dict().items()})
        kv.update(self.pipeline.to_kv())
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "RunConfig":
        known = set(cls._SCALARS) | {f"model.{f.name}" for f in fields(ModelConfig)}
        unknown = [k for k in kv if k not in known and not k.startswith("pipeline.")]
        if unknown:
            raise CliError(f"unknown config keys: {unknown}")
        out = cls()
        for name in cls._SCALARS:
            if name in kv:
                setattr(out, name, type(getattr(out, name))(kv[name]))
        model = {f.name: int(kv[f"model.{f.name}"]) for f in fields(ModelConfig) if f"model.{f.name}" in kv}
        out.model = ModelConfig(**{**out.model.to_dict(), **model})
        out.pipeline = PipelineConfig.from_kv(kv)
        return out

    def desk(self) -> DeskConfig:
        return DeskConfig(self.model, self.n_train, self.n_val, self.n_test, self.base_steps,
                          self.finetune_steps, self.lr, self.batch_size, self.eval_every, self.pipeline,
                          self.question)


class Run:
    """A run directory plus its resolved configuration."""

    def __init__(self, args):
        if args.out is None:
            raise CliError("--out is required")
        self.root = Path(args.out)
        for d in RUN_DIRS:
            (self.root / d).mkdir(parents=True, exist_ok=True)
        cfg_path = Path(args.config) if args.config else self.root / "config.kv"
        self.config = RunConfig.from_kv(read_kv(cfg_path)) if cfg_path.exists() else RunConfig()
        if args.seed is not None:
            self.config.seed = args.seed
        write_kv(self.root / "config.kv", self.config.to_kv())
        self.args = args
        self.deterministic = args.deterministic

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def tasks(self):
        text_p, grounded_p = self.path("data", "text.data"), self.path("data", "grounded.data")
        if text_p.exists() and grounded_p.exists():
            return load_task(text_p), load_task(grounded_p)
        text, grounded = make_tasks(self.config.seed, self.config.desk())
        save_task(text, text_p)
        save_task(grounded, grounded_p)
        return text, grounded

    def task(self, name: str):
        text, grounded = self.tasks()
        return {"text": text, "grounded": grounded}[name]

    # manifest of checkpoint digests and provenance
    def manifest(self) -> dict:
        p = self.path("checkpoints", "manifest.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def record(self, name: str, ckpt, **extra) -> str:
        path = self.path("checkpoints", f"{name}.ckpt")
        save(ckpt, path)
        m = self.manifest()
        m[name] = {"digest": digest(ckpt), "kind": ckpt.kind, **extra}
        atomic_write_text(self.path("checkpoints", "manifest.json"), json.dumps(m, indent=2, sort_keys=True) + "\n")
        return m[name]["digest"]

    def checkpoint(self, name_or_path: str):
        p = Path(name_or_path)
        if not p.exists():
            p = self.path("checkpoints", f"{name_or_path}.ckpt")
        if not p.exists():
            raise CliError(f"checkpoint not found: {name_or_path}")
        ck = load(p)
        entry = self.manifest().get(p.stem) if p.parent == self.path("checkpoints") else None
        if entry is not None and entry["digest"] != digest(ck):
            raise CliError(f"digest mismatch for {p}: manifest {entry['digest'][:12]}, file {digest(ck)[:12]}")
        return ck

    def write_json(self, rel: str, data) -> Path:
        path = self.path(rel)
        atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _emit(data) -> None:
    print(json.dumps(data, sort_keys=True, default=_jsonable))


# subcommands -----------------------------------------------------------------

def cmd_gen_data(run: Run):
    text, grounded = run.tasks()
    return {"text": text.digest(), "grounded": grounded.digest(),
            "sizes": {s: len(grounded.split(s)) for s in ("train", "val", "test")}}


def cmd_train_base(run: Run):
    text, _ = run.tasks()
    desk = run.config.desk()
    res = train_base_lm(desk.model, text, desk.train_config(desk.base_steps), run.config.seed)
    write_curve(run.path("logs", "base_curve.csv"), res.curve)
    d = run.record("base", res.checkpoint, text_task=text.digest())
    return {"checkpoint": str(run.path("checkpoints", "base.ckpt")), "digest": d}


def cmd_finetune_mllm(run: Run):
    _, grounded = run.tasks()
    base = run.checkpoint(run.args.base or "base")
    desk = run.config.desk()
    res = finetune_mllm(base, grounded, desk.train_config(desk.finetune_steps), run.config.seed)
    write_curve(run.path("logs", "mllm_curve.csv"), res.curve)
    d = run.record("mllm", res.checkpoint, parent=digest(base), grounded_task=grounded.digest())
    return {"checkpoint": str(run.path("checkpoints", "mllm.ckpt")), "digest": d}


def _mask(run: Run, ckpt):
    k = run.args.k
    if k is None or k == ckpt.config.num_layers + 1:
        return None
    return MaskSpec(k)


def cmd_eval(run: Run):
    a = run.args
    ck = run.checkpoint(a.ckpt)
    task = run.task(a.task)
    rep = evaluate(ck, task, a.split, _mask(run, ck), seed=run.config.seed,
                   deterministic=run.deterministic, label=a.label or Path(a.ckpt).stem)
    name = f"eval_{rep.label}_{a.task}_{a.split}" + (f"_k{a.k}" if a.k else "")
    path = run.path("reports", f"{name}.json")
    atomic_write_text(path, rep.to_json())
    return {"report": str(path), "score": rep.score, "n": rep.n_examples}


def cmd_sweep_mask(run: Run):
    a = run.args
    ck = run.checkpoint(a.ckpt)
    task = run.task(a.task)
    prof = mask_sweep(ck, task, a.split, workers=a.workers, model_id=digest(ck))
    prof.task_id = task.task_id
    prof.meta.update({"seeds": [run.config.seed], "task_digest": task.digest()})
    path = run.path("profiles", f"sweep_{Path(a.ckpt).stem}_{a.split}.csv")
    prof.save(path)
    if not prof.complete:
        raise CliError("mask sweep incomplete; partial profile written")
    return {"profile": str(path), "points": prof.points}


def _load_profile(run: Run) -> SweepProfile:
    p = Path(run.args.profile) if run.args.profile else None
    if p is None:
        found = sorted(run.path("profiles").glob("sweep_*.csv"))
        if not found:
            raise CliError("no sweep profile; run sweep-mask first or pass --profile")
        p = found[0]
    return SweepProfile.load(p)


def cmd_detect_plateau(run: Run):
    prof = _load_profile(run)
    L = len(prof.points) - 1
    prof.validate(L)
    pc = run.config.pipeline
    seg = resolve_k_star(detect_plateau_onset(prof.scores, pc.smoothing_window, pc.min_plateau_len,
                                              pc.plateau_slope_tol_frac), L)
    data = {**json.loads(seg.to_json()), "profile_model": prof.model_id}
    run.write_json("reports/plateau.json", data)
    return {"k_star": seg.k_star, "fallback": seg.fallback, "report": str(run.path("reports", "plateau.json"))}


def _spec_from_args(run: Run, L: int) -> merging.MergeSpec:
    a = run.args
    if a.k0 is None:
        raise CliError("--k0 is required")
    return merging.MergeSpec.from_k0(int(a.k0), L, a.lambda1, a.lambda2, a.subset)


def _pair(run: Run):
    base = run.checkpoint(run.args.base or "base")
    vlm = run.checkpoint(run.args.vlm or "mllm")
    parent = run.manifest().get("mllm", {}).get("parent")
    if run.args.vlm is None and parent is not None and parent != digest(base):
        raise CliError("mllm was fine-tuned from a different base checkpoint (digest mismatch)")
    return base, vlm


def cmd_merge(run: Run):
    base, vlm = _pair(run)
    spec = _spec_from_args(run, vlm.config.num_layers)
    merged = merging.merge(base, vlm, spec)
    d = run.record("merged", merged, base=digest(base), vlm=digest(vlm), spec=spec.to_kv())
    write_kv(run.path("reports", "merge_spec.kv"), spec.to_kv())
    return {"checkpoint": str(run.path("checkpoints", "merged.ckpt")), "digest": d, "spec": spec.to_kv()}


def cmd_grid_search(run: Run):
    a = run.args
    base, vlm = _pair(run)
    _, grounded = run.tasks()
    L = vlm.config.num_layers
    pc = run.config.pipeline
    if a.k0 is not None:
        cands = merging.parse_layer_set(a.k0)
    else:
        plateau = run.path("reports", "plateau.json")
        if not plateau.exists():
            raise CliError("pass --k0 or run detect-plateau first")
        cands = neighbor_candidates(json.loads(plateau.read_text())["k_star"], a.radius or pc.radius, L)
    lams = merging.lambda_grid(0.0, pc.lambda_max, pc.lambda_step)
    res = merging.grid_search(base, vlm, cands, lams, lams, a.subset, task=grounded, split="val",
                              limit=pc.val_limit, sum_tol=pc.lambda_sum_tol)
    atomic_write_text(run.path("reports", "grid.csv"), res.to_csv())
    summary = {"best": res.best.to_kv(), "best_score": res.best_score, "vlm_baseline": res.baseline_score,
               "per_k0": {str(k): v for k, v in res.per_k0().items()},
               "inputs": {"base": digest(base), "vlm": digest(vlm), "task": grounded.digest()}}
    run.write_json("reports/grid.json", summary)
    return summary


def cmd_plam(run: Run):
    a = run.args
    base, vlm = _pair(run)
    text, grounded = run.tasks()
    pc = run.config.pipeline
    if a.radius is not None:
        pc.radius = a.radius
    pc.subset = a.subset
    merged, report, grid = plam_pipeline(base, vlm, grounded, pc, text_task=text, workers=a.workers)
    run.record("merged", merged, base=digest(base), vlm=digest(vlm), spec=grid.best.to_kv())
    atomic_write_text(run.path("reports", "grid.csv"), grid.to_csv())
    prof = SweepProfile(digest(vlm), grounded.task_id, [tuple(p) for p in report.sweep["points"]],
                        split=report.sweep["split"], meta={"seeds": [run.config.seed]})
    prof.save(run.path("profiles", "sweep_mllm_val.csv"))
    atomic_write_text(run.path("reports", "pipeline.json"), report.to_json())
    return {"report": str(run.path("reports", "pipeline.json")), "k_star": report.k_star,
            "fallback": report.fallback, "final_spec": report.final_spec, "deltas": report.deltas}


def _prompt(task, split: str, index: int):
    sp = task.split(split)
    if not 0 <= index < len(sp):
        raise CliError(f"--index {index} outside split of size {len(sp)}")
    c = sp.take(slice(index, index + 1))
    vis = c.vision[0] if c.vision.shape[1] else None
    return Prompt(vis, c.pre[0], c.ins[0]), c


def cmd_profile_attention(run: Run):
    a = run.args
    ck = run.checkpoint(a.ckpt)
    task = run.task(a.task)
    stem = Path(a.ckpt).stem
    mask = _mask(run, ck)
    outputs = {}
    if a.mode == "prefill_ins" and a.index is None:
        for pop, prof in analysis.split_mass(ck, task.split(a.split), a.source, mask).items():
            prof.meta.update({"model_digest": digest(ck), "split": a.split, "source": a.source})
            path = run.path("profiles", f"mass_{stem}_{a.split}_{pop}.csv")
            prof.save(path)
            outputs[pop] = str(path)
    else:
        prompt, _ = _prompt(task, a.split, a.index or 0)
        prof = analysis.mass_profile(ck, prompt, a.mode, mask=mask, max_new=a.max_new)
        prof.meta.update({"model_digest": digest(ck), "split": a.split, "index": a.index or 0})
        path = run.path("profiles", f"mass_{stem}_{a.mode}_{a.index or 0}.csv")
        prof.save(path)
        outputs["single"] = str(path)
    return {"profiles": outputs}


def cmd_heatmap(run: Run):
    a = run.args
    ck = run.checkpoint(a.ckpt)
    _, grounded = run.tasks()
    prompt, c = _prompt(grounded, a.split, a.index or 0)
    x0, layout = embed_multimodal(ck, prompt)
    trace = forward(ck, x0, layout, capture_attention=True)
    layer = a.layer or ck.config.num_layers
    if not 1 <= layer <= ck.config.num_layers:
        raise CliError(f"--layer must be in [1, {ck.config.num_layers}]")
    grid = analysis.vision_heatmap(trace.attn_weights[layer - 1], layout, head=a.head)
    name = f"heatmap_{Path(a.ckpt).stem}_{a.index or 0}_l{layer}" + ("" if a.head is None else f"_h{a.head}")
    atomic_write_text(run.path("reports", f"{name}.csv"), analysis.heatmap_csv(grid))
    analysis.write_pgm(run.path("reports", f"{name}.pgm"), grid)
    target = int(queried_cell(c, grid.shape[0])[0])
    return {"csv": str(run.path("reports", f"{name}.csv")), "argmax_cell": int(np.argmax(grid)),
            "queried_cell": target}


def cmd_compare(run: Run):
    a = run.args
    if not a.reports:
        raise CliError("--reports needs at least one eval report")
    reports = [EvalReport.from_dict(json.loads(Path(p).read_text())) for p in a.reports]
    if a.expect_digest:
        for r in reports:
            if r.model_digest not in a.expect_digest:
                raise CliError(f"report {r.label!r} has unexpected model digest {r.model_digest[:12]}")
    baseline = int(a.baseline) if a.baseline and a.baseline.isdigit() else (a.baseline or 0)
    try:
        table = compare(reports, baseline)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    atomic_write_text(run.path("reports", "compare.csv"), table.to_csv())
    data = {"baseline": table.baseline, "best": table.best, "rows": table.rows}
    run.write_json("reports/compare.json", data)
    return data


def cmd_ckpt_diff(args):
    a, b = load(args.a), load(args.b)
    rep = diff(a, b)
    data = {"equal_bitwise": rep.equal_bitwise, "nonzero": rep.nonzero(),
            "max_abs": rep.max_abs, "digest_a": digest(a), "digest_b": digest(b)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "diff.json", json.dumps(data, indent=2, sort_keys=True) + "\n")
    return data


COMMANDS = {
    "gen-data": cmd_gen_data, "train-base": cmd_train_base, "finetune-mllm": cmd_finetune_mllm,
    "eval": cmd_eval, "sweep-mask": cmd_sweep_mask, "detect-plateau": cmd_detect_plateau,
    "merge": cmd_merge, "grid-search": cmd_grid_search, "plam": cmd_plam,
    "profile-attention": cmd_profile_attention, "heatmap": cmd_heatmap, "compare": cmd_compare,
}


class _Parser(argparse.ArgumentParser):
    """Usage errors raise instead of printing, so they reach the JSON error path."""

    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run config (defaults to RUN_DIR/config.kv)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--deterministic", action="store_true", help="omit timestamps from artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="plateau-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-base"):
        sub.add_parser(name, parents=[common])
    ft = sub.add_parser("finetune-mllm", parents=[common])
    ft.add_argument("--base")

    def model_cmd(name, default_ckpt="mllm"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--ckpt", default=default_ckpt, help="checkpoint name in the run dir or a path")
        sp.add_argument("--task", choices=("grounded", "text"), default="grounded")
        sp.add_argument("--split", choices=("train", "val", "test"), default="test")
        sp.add_argument("--k", type=int, help="vision cut layer (L+1 = no mask)")
        return sp

    ev = model_cmd("eval")
    ev.add_argument("--label")
    sw = model_cmd("sweep-mask")
    sw.set_defaults(split="val")
    dp = sub.add_parser("detect-plateau", parents=[common])
    dp.add_argument("--profile")

    for name in ("merge", "grid-search", "plam"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--base")
        sp.add_argument("--vlm")
        sp.add_argument("--subset", choices=merging.SUBSETS, default="attn_qkvo")
        sp.add_argument("--radius", type=int)
        if name != "plam":
            sp.add_argument("--k0", help="merge start layer (grid-search accepts lists like 3-6)")
        if name == "merge":
            sp.add_argument("--lambda1", type=float, required=True)
            sp.add_argument("--lambda2", type=float, required=True)

    pa = model_cmd("profile-attention")
    pa.add_argument("--mode", choices=("prefill_ins", "decode_res"), default="prefill_ins")
    pa.add_argument("--source", choices=analysis.SOURCES, default="vis")
    pa.add_argument("--index", type=int, help="single example (required for decode_res)")
    pa.add_argument("--max-new", type=int, default=1)
    hm = model_cmd("heatmap")
    hm.add_argument("--index", type=int)
    hm.add_argument("--layer", type=int)
    hm.add_argument("--head", type=int)

    cp = sub.add_parser("compare", parents=[common])
    cp.add_argument("--reports", nargs="+")
    cp.add_argument("--baseline", help="label or index of the baseline report")
    cp.add_argument("--expect-digest", nargs="*", help="refuse reports from any other model digest")

    cd = sub.add_parser("ckpt-diff", parents=[common])
    cd.add_argument("a")
    cd.add_argument("b")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        command = next((a for a in argv if not a.startswith("-")), None)
        print(json.dumps({"error": "CliError", "message": str(exc), "command": command}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "ckpt-diff":
            result = cmd_ckpt_diff(args)
        else:
            result = COMMANDS[args.command](Run(args))
    except Exception as exc:  # noqa: BLE001 - every failure becomes error JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1
    _emit({"ok": True, "command": args.command, **result})
    return 0


if __name__ == "__main__":
    sys.exit(main())
