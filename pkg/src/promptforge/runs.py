"""Run orchestration and persistence: environment assembly, run directories, reports."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from promptforge import config as cfgmod
from promptforge.buffer import snapshot_lines
from promptforge.critique import RemoteCritic, RuleCritic, default_critic_template
from promptforge.envs import (
    ContextDescriptor,
    DatasetSplits,
    RemoteWorker,
    load_dataset,
    make_keyword_task,
    make_ordered_task,
)
from promptforge.evo import Evolution
from promptforge.plotting import plot_comparison, plot_eval_curve
from promptforge.policy import save_checkpoint
from promptforge.remote import ChatClient, EndpointConfig
from promptforge.trainer import RunFailed, Trainer, TrainState, report_from_metrics, steps_to_threshold
from promptforge.vocab import Vocabulary

log = logging.getLogger(__name__)

# Published full-scale steps to convergence without/with the buffer, for context in compare reports.
PUBLISHED_REFERENCE = {
    "source": "published relative efficiency (full scale, proprietary models)",
    "Dyck": {"steps_no_buffer": 195, "steps_buffer": 102, "rel_efficiency": "1.91x"},
    "DQA": {"steps_no_buffer": 180, "steps_buffer": 75, "rel_efficiency": "2.40x"},
}


class DatasetError(ValueError):
    pass


@dataclass
class Setup:
    vocab: Vocabulary
    contexts: dict[str, ContextDescriptor]
    dataset: DatasetSplits
    worker: object
    critic: object
    optimal_prompts: dict | None = None


def build_setup(rc: cfgmod.RunConfig, dataset_path: Path | str | None = None, seed: int | None = None) -> Setup:
    env = rc.environment
    env_seed = env.seed if env.seed is not None else (seed if seed is not None else rc.trainer.seed)
    if env.kind in ("keyword", "ordered"):
        if env.kind == "keyword":
            synth = make_keyword_task(env_seed, env.n_contexts, env.n_control, env.n_filler,
                                      _count(env.n_required), _count(env.n_forbidden), _count(env.n_categories),
                                      tuple(env.split_sizes))
        else:
            synth = make_ordered_task(env_seed, env.n_contexts, env.n_control, env.n_filler,
                                      env.sequence_length, tuple(env.split_sizes))
        dataset = synth.dataset
        if dataset_path is not None:
            dataset = load_dataset(dataset_path)
            _check_synthetic_dataset(dataset, synth.contexts, dataset_path)
        worker = synth.make_worker()
        return Setup(synth.vocab, synth.contexts, dataset, worker, RuleCritic(worker, synth.vocab), synth.optimal_prompts)
    if dataset_path is None:
        raise cfgmod.ConfigError("environment.kind", "the remote environment needs --dataset")
    dataset = load_dataset(dataset_path)
    ids = dataset.context_ids
    vocab = Vocabulary.build(env.n_control, env.n_filler, len(ids))
    contexts = {cid: ContextDescriptor(cid, (vocab.tasks[i],) if len(ids) > 1 else ()) for i, cid in enumerate(ids)}
    client = ChatClient(EndpointConfig(**vars(rc.endpoint)))
    worker = RemoteWorker(contexts, vocab.eos, vocab, client, exact_match=env.exact_match)
    critic_cfg = rc.critic_endpoint or rc.endpoint
    template = Path(rc.critic_template).read_text() if rc.critic_template else default_critic_template()
    critic = RemoteCritic(worker, vocab, ChatClient(EndpointConfig(**vars(critic_cfg))), template)
    return Setup(vocab, contexts, dataset, worker, critic)


def _count(v):
    return tuple(v) if isinstance(v, (list, tuple)) else int(v)


def _check_synthetic_dataset(dataset: DatasetSplits, contexts, path) -> None:
    for cid in dataset.context_ids:
        if cid not in contexts:
            raise DatasetError(f"{path}: context {cid!r} is not produced by the configured environment")
        spec = contexts[cid].hidden_spec
        cats = getattr(spec, "categories", {})
        for split in ("train", "validation", "test"):
            for inst in dataset.split(cid, split):
                if inst.category is not None and inst.category not in cats:
                    raise DatasetError(f"{path}: unknown category {inst.category!r} in context {cid!r}")


# --------------------------------------------------------------------------- persistence


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(row if isinstance(row, str) else cfgmod.canonical_json(row))
            fh.write("\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError:
                        raise ValueError(f"{path}: corrupt record at line {lineno}") from None
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: missing") from None
    return rows


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def execute_run(rc: cfgmod.RunConfig, mode: str, out: Path | str, dataset_path=None, seed: int | None = None) -> Path:
    """Run one optimizer and persist manifest, config, metrics, checkpoints, buffer and report."""
    if mode not in cfgmod.MODES:
        raise cfgmod.ConfigError("mode", f"unknown mode {mode!r}")
    if seed is not None:
        rc = rc.with_seed(seed)
    seed = rc.trainer.seed
    out = Path(out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    setup = build_setup(rc, dataset_path, seed)
    snapshot = rc.to_dict()
    _write_json(out / "config.json", snapshot)
    _write_json(out / "vocab.json", _vocab_to_json(setup.vocab))
    manifest = {
        "run_id": f"{mode}-s{seed}-{rc.digest()}",
        "mode": mode,
        "config_hash": rc.digest(),
        "dataset_hash": setup.dataset.digest(),
        "seed": seed,
        "started": _now(),
    }
    _write_json(out / "manifest.json", manifest)
    if mode == "evo":
        report, rows = _run_evo(rc, setup)
        _write_jsonl(out / "metrics.jsonl", rows)
        _write_json(out / "report.json", report)
        outcome = {"mean_test_reward": report["mean_test_reward"], "total_worker_calls": report["total_worker_calls"]}
    else:
        tcfg = rc.trainer
        tcfg.use_buffer = mode == "rl"
        trainer = Trainer(tcfg, setup.dataset, setup.worker, setup.critic, setup.vocab, setup.contexts)

        def checkpoint(state: TrainState):
            save_checkpoint(out / "checkpoints" / f"step_{state.step:06d}.npz", state.params, setup.vocab, step=state.step)

        try:
            rep = trainer.run(on_eval=checkpoint)
        except RunFailed as exc:
            _persist_state(out, trainer.state, setup.vocab)
            _write_json(out / "report.json", exc.partial_report.to_dict() | {"failed": str(exc)})
            manifest |= {"finished": _now(), "outcome": {"failed": str(exc)}}
            _write_json(out / "manifest.json", manifest)
            raise
        _persist_state(out, trainer.state, setup.vocab)
        _write_json(out / "report.json", rep.to_dict())
        write_eval_series(out, rep.eval_curve, tcfg.threshold)
        outcome = {"best_eval_reward": rep.best_eval_reward, "mean_test_reward": rep.mean_test_reward,
                   "steps_to_threshold": rep.steps_to_threshold, "censored": rep.censored,
                   "total_worker_calls": rep.total_worker_calls}
    manifest |= {"finished": _now(), "outcome": outcome}
    _write_json(out / "manifest.json", manifest)
    return out


def _persist_state(out: Path, state: TrainState, vocab: Vocabulary) -> None:
    _write_jsonl(out / "metrics.jsonl", state.metrics)
    _write_jsonl(out / "buffer.jsonl", snapshot_lines(state.buffer, vocab))


def _run_evo(rc: cfgmod.RunConfig, setup: Setup) -> tuple[dict, list[dict]]:
    evo = Evolution(rc.evo, setup.dataset, setup.worker, setup.critic, setup.vocab, setup.contexts)
    report = evo.run()
    rows = [{"kind": "generation", **row} for row in report["trajectory"]]
    rows.append({"kind": "final", "worker_calls": report["worker_calls"], "best": report["best"]})
    return report, rows


def regenerate_report(run_dir: Path | str) -> dict:
    """Rebuild report.json content from the persisted config and metrics stream."""
    run_dir = Path(run_dir)
    rc = cfgmod.from_dict(json.loads((run_dir / "config.json").read_text()))
    manifest = json.loads((run_dir / "manifest.json").read_text())
    rows = read_jsonl(run_dir / "metrics.jsonl")
    if manifest["mode"] == "evo":
        raise ValueError("evolutionary runs store their report verbatim")
    vocab = Vocabulary(**_vocab_from_json(json.loads((run_dir / "vocab.json").read_text())))
    t = rc.trainer
    return report_from_metrics(rows, t.top_k, t.threshold, t.max_steps, vocab).to_dict()


def _vocab_to_json(vocab: Vocabulary) -> dict:
    return {"tokens": list(vocab.tokens), "control": [vocab.control.start, vocab.control.stop],
            "tasks": [vocab.tasks.start, vocab.tasks.stop]}


def _vocab_from_json(d: dict) -> dict:
    return {"tokens": tuple(d["tokens"]), "control": range(*d["control"]), "tasks": range(*d["tasks"])}


def write_eval_series(out: Path, points, threshold=None) -> None:
    with open(out / "eval_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "eval_reward"])
        for s, v in points:
            w.writerow([s, repr(float(v))])
    plot_eval_curve(points, out / "eval_curve.png", threshold=threshold)


# --------------------------------------------------------------------------- compare


def compare(rc: cfgmod.RunConfig, seeds: list[int], out: Path | str, dataset_path=None,
            modes=("rl", "rl_no_buffer"), include_evo: bool = False) -> dict:
    """Per-seed RL with and without the buffer; optionally evo at the RL run's worker-call budget."""
    if len(seeds) < 2:
        raise ValueError("compare needs at least two seeds")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    per_seed = []
    curves: dict[str, list] = {m: [] for m in modes}
    for seed in seeds:
        row = {"seed": seed}
        for mode in modes:
            run_dir = out / f"seed{seed}" / mode
            try:
                execute_run(rc, mode, run_dir, dataset_path, seed)
            except Exception as exc:  # partial results persist; keep going
                log.error("seed %s mode %s failed: %s", seed, mode, exc)
                row[mode] = {"error": str(exc)}
                continue
            rep = json.loads((run_dir / "report.json").read_text())
            row[mode] = {k: rep[k] for k in ("steps_to_threshold", "censored", "mean_test_reward", "best_eval_reward",
                                             "total_worker_calls")}
            curves[mode].append([tuple(p) for p in rep["eval_curve"]])
        if include_evo and "rl" in row and "error" not in row["rl"]:
            budget = row["rl"]["total_worker_calls"]
            evo_rc = rc.with_seed(seed)
            evo_rc.evo.worker_call_budget = budget
            evo_rc.evo.generations = None
            run_dir = out / f"seed{seed}" / "evo"
            execute_run(evo_rc, "evo", run_dir, dataset_path, seed)
            rep = json.loads((run_dir / "report.json").read_text())
            row["evo"] = {"mean_test_reward": rep["mean_test_reward"], "total_worker_calls": rep["total_worker_calls"],
                          "label": rep["label"]}
        per_seed.append(row)
        _write_comparison(out, per_seed, modes, rc.trainer.threshold, curves)
    return _write_comparison(out, per_seed, modes, rc.trainer.threshold, curves)


def _write_comparison(out: Path, per_seed, modes, threshold, curves) -> dict:
    summary = {}
    for mode in modes:
        steps = [r[mode]["steps_to_threshold"] for r in per_seed if mode in r and "error" not in r[mode]]
        summary[mode] = {
            "steps_to_threshold": steps,
            "censored": [r[mode]["censored"] for r in per_seed if mode in r and "error" not in r[mode]],
            "median_steps": float(np.median(steps)) if steps else None,
        }
    result = {"threshold": threshold, "per_seed": per_seed, "summary": summary, "published_reference": PUBLISHED_REFERENCE}
    if "rl" in summary and "rl_no_buffer" in summary and summary["rl"]["median_steps"]:
        a, b = summary["rl"]["median_steps"], summary["rl_no_buffer"]["median_steps"]
        result["relative_efficiency"] = b / a
        result["buffer_to_scalar_ratio"] = a / b
    _write_json(out / "comparison.json", result)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "mode", "steps_to_threshold", "censored", "mean_test_reward"])
        for r in per_seed:
            for mode in (*modes, "evo"):
                if mode in r and "error" not in r[mode]:
                    w.writerow([r["seed"], mode, r[mode].get("steps_to_threshold", ""), r[mode].get("censored", ""),
                                r[mode]["mean_test_reward"]])
    plot_comparison({m: c for m, c in curves.items() if c}, out / "comparison.png", threshold)
    return result


# --------------------------------------------------------------------------- inspect


def inspect_run(run_dir: Path | str) -> dict:
    """Read-only summary of a run directory; also writes plot-ready eval series."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"{run_dir}: no such run directory")
    out = {}
    for name in ("manifest.json", "report.json"):
        p = run_dir / name
        if p.exists():
            try:
                out[name[:-5]] = json.loads(p.read_text())
            except json.JSONDecodeError:
                raise ValueError(f"{p}: corrupt snapshot") from None
    buf = run_dir / "buffer.jsonl"
    records = read_jsonl(buf) if buf.exists() else []
    buffers: dict[str, list] = {}
    for rec in records:
        buffers.setdefault(rec["context_id"], []).append(rec)
    out["buffers"] = buffers
    rows = read_jsonl(run_dir / "metrics.jsonl")
    points = [(r["step"], r["eval_reward"]) for r in rows if r.get("kind") == "eval"]
    out["eval_curve"] = points
    report = out.get("report", {})
    out["top_prompts"] = report.get("top_prompts", [])
    return out


def render_inspection(info: dict) -> str:
    lines = []
    man = info.get("manifest", {})
    if man:
        lines.append(f"run {man.get('run_id')}  mode={man.get('mode')}  seed={man.get('seed')}")
    for cid, recs in sorted(info["buffers"].items()):
        lines.append(f"buffer {cid}: {len(recs)} record(s)")
        for r in recs:
            crit = "; ".join(r.get("critiques") or []) or "-"
            lines.append(f"  step {r['step']:>5}  r={r['reward']:.3f}  {r.get('prompt_text') or r['prompt']}  [{crit}]")
    lines.append("top prompts:")
    for i, p in enumerate(info["top_prompts"], start=1):
        test = p.get("test_reward")
        test_s = "" if test is None else f" test={test:.3f}"
        lines.append(f"  {i:>2}. {p['context_id']} val={p['val_reward']:.3f}{test_s}  {p.get('text', p['prompt'])}")
    lines.append("eval curve (step, reward):")
    lines.extend(f"  {s}\t{v:.4f}" for s, v in info["eval_curve"])
    return "\n".join(lines)
