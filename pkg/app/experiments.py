"""Demonstration generation, training, evaluation and the experiment matrix behind ``reproduce``.

Independent jobs (dataset generation per task, training per method, rollouts)
fan out over a thread pool; results are re-sorted by their key before anything
is written, so the files on disk do not depend on worker scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from ofa.camera import StereoRig
from ofa.config import ConfigError, RunConfig
from ofa.dataset import (
    INDEX,
    EmptySampleSetError,
    EpisodeFormatError,
    MethodSpec,
    build_samples,
    get_method,
    iter_episodes,
    read_index,
    write_episode,
    write_index,
)
from ofa.digest import derive_seed
from ofa.env.expert import generate_demonstrations
from ofa.env.rollout import execute_rollout
from ofa.env.scene import SceneConfig, build_scene
from ofa.env.settings import SimSettings, model_from_run_config, rig_from_run_config
from ofa.env.tasks import get_task
from ofa.kinematics import RobotModel
from ofa.policy import (
    PolicyConfig,
    PolicyFileError,
    TrainingDiverged,
    load_params,
    save_params,
    train,
    write_loss_curve,
)
from ofa.resources import get_current_version

logger = logging.getLogger(__name__)

EXPERIMENTS = ("ablation", "placement-shift", "background-shift", "demo-count")
RESULT_FIELDS = ("task", "variant", "seed", "success", "failure_reason", "steps")
SUMMARY_FIELDS = ("task", "method", "demos", "variant", "episodes", "successes", "success_rate")
TRAIN_MANIFEST = "train.json"
DEMO_COUNT_METHODS = ("act", "ofa")


@dataclass(frozen=True, eq=False)
class Workbench:
    """Run configuration plus the objects every job builds from it."""

    config: RunConfig
    model: RobotModel
    rig: StereoRig
    settings: SimSettings

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "Workbench":
        settings = SimSettings.from_run_config(config)
        return cls(config, model_from_run_config(config), rig_from_run_config(config), settings)

    def policy_config(self) -> PolicyConfig:
        try:
            policy = PolicyConfig.from_dict(self.config.section("policy"))
        except ValueError as e:
            raise ConfigError(str(e))
        steps = self.config.get("experiments.train_steps")
        if steps is not None:
            policy = replace(policy, steps=int(steps))
        if policy.crop_size != self.rig.crop_size:
            raise ConfigError(f"policy.crop_size ({policy.crop_size}) must equal rig.crop_size ({self.rig.crop_size})")
        return policy


@dataclass(frozen=True)
class Variant:
    """Evaluation condition; unset fields keep the configured scene."""

    name: str
    placement_offset: Optional[tuple] = None
    background: Optional[str] = None

    def scene_changes(self) -> dict:
        changes = {}
        if self.placement_offset is not None:
            changes["placement_offset"] = tuple(float(v) for v in self.placement_offset)
        if self.background is not None:
            changes["background"] = self.background
        return changes


IN_DISTRIBUTION = Variant("in-distribution", placement_offset=(0.0, 0.0))


# Demonstrations


def generate_dataset(bench: Workbench, task: str, count: int, out_dir, segment: str = "object_focus") -> int:
    """Write up to ``count`` validated demonstrations plus the index; returns how many were written."""
    get_task(task)
    out_dir = Path(out_dir)
    scene_config = SceneConfig.from_run_config(bench.config, task)
    write_masks = bool(bench.config.get("dataset.write_masks"))
    entries = []
    produced = 0
    for index, scene_seed, episodes in generate_demonstrations(
        scene_config, count, bench.model, bench.rig, bench.settings, segment
    ):
        for hand, episode in episodes.items():
            if not write_masks:
                episode = replace(episode, object_mask=None)
            name = f"episode_{index:04d}_{hand}"
            write_episode(out_dir / name, episode)
            entries.append(
                {
                    "path": name,
                    "steps": len(episode),
                    "hand": hand,
                    "seed": scene_seed,
                    "task": task,
                    "segment": segment,
                }
            )
        produced += 1
    write_index(out_dir, entries, bench.config.digest, bench.config.seed)
    logger.info(f"generate_dataset: {task} wrote {produced}/{count} demonstrations to {out_dir}")
    return produced


# Training


def _dataset_hands(data_dir, method: MethodSpec) -> list:
    index = read_index(data_dir)
    entries = index["episodes"]
    if not entries:
        raise EmptySampleSetError(f"{Path(data_dir) / INDEX}: dataset has no episodes")
    segments = {entry.get("segment", "object_focus") for entry in entries}
    if segments != {method.segment}:
        raise EpisodeFormatError(
            f"method {method.name} trains on {method.segment} episodes, dataset has {', '.join(sorted(segments))}",
            Path(data_dir) / INDEX,
            0,
        )
    return sorted({entry.get("hand", "right") for entry in entries})


def train_policy(
    bench: Workbench,
    data_dir,
    method_name: str,
    out_dir,
    hand: Optional[str] = None,
    demos: Optional[int] = None,
) -> dict:
    """Train one policy per hand found in the dataset (or only ``hand``) and write params, loss curves and train.json.

    Returns:
        hand -> trained PolicyParams
    """
    method = get_method(method_name)
    policy_config = bench.policy_config()
    hands = _dataset_hands(data_dir, method)
    if hand is not None:
        if hand not in hands:
            raise EmptySampleSetError(f"{data_dir}: no {hand}-hand episodes")
        hands = [hand]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trained = {}
    for name in hands:
        episodes = iter_episodes(data_dir, hand=name, limit=demos)
        samples = list(build_samples(episodes, policy_config.k, bench.rig, bench.model, method.encoding))
        params, curve = train(policy_config, samples)
        save_params(out_dir / f"policy_{name}.params", params, bench.config.digest)
        write_loss_curve(out_dir / f"loss_{name}.csv", curve, bench.config.digest, policy_config.seed)
        trained[name] = params
    manifest = {
        "version": get_current_version(),
        "method": method.name,
        "hands": hands,
        "demos": demos,
        "data": str(data_dir),
        "config_digest": bench.config.digest,
        "seed": policy_config.seed,
    }
    with open(out_dir / TRAIN_MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"train_policy: {method.name} on {data_dir} -> {out_dir}")
    return trained


def load_policy(params_dir) -> tuple[MethodSpec, dict]:
    """(method, hand -> params) from a directory written by ``train_policy``."""
    params_dir = Path(params_dir)
    path = params_dir / TRAIN_MANIFEST
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise PolicyFileError(f"{path}: not a trained policy directory")
    except json.JSONDecodeError as e:
        raise PolicyFileError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}")
    method = get_method(manifest["method"])
    return method, {hand: load_params(params_dir / f"policy_{hand}.params") for hand in manifest["hands"]}


# Evaluation


def eval_seed(seed: int, task: str, index: int) -> int:
    """Scene seed of evaluation episode ``index``; variants share it so their placements pair up."""
    return derive_seed(seed, "eval", task, index)


def run_episode(
    bench: Workbench,
    method: MethodSpec,
    params: dict,
    task: str,
    variant: Variant,
    seed: int,
    index: int,
    log_root=None,
) -> dict:
    scene_seed = eval_seed(seed, task, index)
    scene_config = SceneConfig.from_run_config(bench.config, task, seed=scene_seed, **variant.scene_changes())
    scene = build_scene(scene_config)
    log_dir = Path(log_root) / f"{task}_{variant.name}_{index:03d}" if log_root is not None else None
    result = execute_rollout(scene, bench.model, bench.rig, method, params, bench.settings, scene_seed, log_dir)
    return {
        "task": task,
        "variant": variant.name,
        "seed": scene_seed,
        "success": int(result.success),
        "failure_reason": result.failure_reason or "",
        "steps": result.steps,
    }


def evaluate(
    bench: Workbench,
    method: MethodSpec,
    params: dict,
    task: str,
    episodes: int,
    variant: Variant = IN_DISTRIBUTION,
    seed: Optional[int] = None,
    workers: int = 1,
    log_root=None,
) -> list:
    """Run ``episodes`` rollouts and return their result rows in episode order."""
    seed = bench.config.seed if seed is None else seed
    rows = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            pool.submit(run_episode, bench, method, params, task, variant, seed, i, log_root): i
            for i in range(episodes)
        }
        for future in as_completed(futures):
            rows[futures[future]] = future.result()
    return [rows[i] for i in sorted(rows)]


def success_rate(rows: list) -> float:
    return sum(row["success"] for row in rows) / len(rows) if rows else 0.0


def _write_csv(path, fields: tuple, rows: list, config_digest: str, seed: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# config_digest={config_digest} seed={seed}\n")
        writer = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def write_results(path, rows: list, config_digest: str, seed: int) -> None:
    _write_csv(path, RESULT_FIELDS, rows, config_digest, seed)


# Experiment matrix


@dataclass(frozen=True)
class Cell:
    task: str
    method: str
    demos: int
    variant: Variant

    @property
    def training_key(self) -> tuple:
        return self.task, self.method, self.demos


def plan_cells(experiment: str, config: RunConfig) -> list:
    """Every (task, method, demo count, variant) the experiment reports."""
    exp = config.section("experiments")
    demos = int(exp["demos"])
    methods = list(exp["methods"])
    for name in methods:
        get_method(name)
    if experiment == "ablation":
        return [Cell(t, m, demos, IN_DISTRIBUTION) for t in exp["tasks"] for m in methods]
    if experiment == "placement-shift":
        shifted = Variant("shifted", placement_offset=tuple(exp["shift_offset"]))
        return [Cell(t, m, demos, v) for t in exp["trend_tasks"] for m in methods for v in (IN_DISTRIBUTION, shifted)]
    if experiment == "background-shift":
        variants = [Variant("plain", background="plain")]
        variants += [Variant(name, background=name) for name in exp["unseen_backgrounds"]]
        return [Cell(t, m, demos, v) for t in exp["trend_tasks"] for m in methods for v in variants]
    if experiment == "demo-count":
        counts = [int(n) for n in exp["demo_counts"]]
        return [Cell(t, m, n, IN_DISTRIBUTION) for t in exp["trend_tasks"] for m in DEMO_COUNT_METHODS for n in counts]
    raise ConfigError(f"Unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")


def _fan_out(jobs: dict, workers: int) -> dict:
    """Run ``key -> (fn, args)`` jobs on a pool; results keyed the same way."""
    results = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(fn, *args): key for key, (fn, args) in jobs.items()}
        for future in as_completed(futures):
            results[futures[future]] = future.result()
    return {key: results[key] for key in sorted(results, key=repr)}


def _train_cell(bench: Workbench, data_dir: Path, method: str, out_dir: Path, demos: int) -> Optional[dict]:
    try:
        return train_policy(bench, data_dir, method, out_dir, demos=demos)
    except (EmptySampleSetError, TrainingDiverged) as e:
        logger.error(f"reproduce: training {method} in {out_dir} failed: {e}")
        return None


def reproduce(bench: Workbench, experiment: str, out_dir, workers: int = 1) -> list:
    """Generate data, train and evaluate every cell of ``experiment``; writes CSV and markdown reports.

    Returns:
        summary rows (one per cell) in report order
    """
    cells = plan_cells(experiment, bench.config)
    out_dir = Path(out_dir)
    episodes = int(bench.config.get("experiments.episodes"))
    seed = bench.config.seed

    needed = defaultdict(int)
    for cell in cells:
        segment = get_method(cell.method).segment
        needed[(cell.task, segment)] = max(needed[(cell.task, segment)], cell.demos)
    data_dirs = {key: out_dir / "data" / key[0] / key[1] for key in needed}
    produced = _fan_out(
        {key: (generate_dataset, (bench, key[0], count, data_dirs[key], key[1])) for key, count in needed.items()},
        workers,
    )
    for key, count in produced.items():
        if count < needed[key]:
            logger.warning(f"reproduce: {key[0]} {key[1]} has {count} of {needed[key]} demonstrations")

    training = {}
    for cell in cells:
        if cell.training_key in training:
            continue
        data_dir = data_dirs[(cell.task, get_method(cell.method).segment)]
        params_dir = out_dir / "policies" / cell.task / f"{cell.method}_{cell.demos}"
        training[cell.training_key] = (_train_cell, (bench, data_dir, cell.method, params_dir, cell.demos))
    policies = _fan_out(training, workers)

    rollouts = {}
    for c, cell in enumerate(cells):
        params = policies[cell.training_key]
        if params is None:
            continue
        method = get_method(cell.method)
        for i in range(episodes):
            rollouts[(c, i)] = (run_episode, (bench, method, params, cell.task, cell.variant, seed, i))
    results = _fan_out(rollouts, workers)

    summary, raw = [], []
    for c, cell in enumerate(cells):
        rows = [results[(c, i)] for i in range(episodes) if (c, i) in results]
        for row in rows:
            raw.append({**row, "method": cell.method, "demos": cell.demos})
        summary.append(
            {
                "task": cell.task,
                "method": cell.method,
                "demos": cell.demos,
                "variant": cell.variant.name,
                "episodes": len(rows),
                "successes": sum(row["success"] for row in rows),
                "success_rate": f"{success_rate(rows):.4f}" if rows else "",
            }
        )
    _write_csv(out_dir / f"{experiment}.csv", SUMMARY_FIELDS, summary, bench.config.digest, seed)
    _write_csv(
        out_dir / f"{experiment}_rollouts.csv",
        ("method", "demos") + RESULT_FIELDS,
        raw,
        bench.config.digest,
        seed,
    )
    (out_dir / f"{experiment}.md").write_text(
        markdown_report(experiment, summary, bench.config.digest, seed, episodes), encoding="utf-8"
    )
    logger.info(f"reproduce: {experiment} finished, {len(cells)} cells")
    return summary


# Reports

_LAYOUTS = {
    "ablation": (lambda r: r["task"], lambda r: r["method"]),
    "placement-shift": (lambda r: f"{r['task']} / {r['method']}", lambda r: r["variant"]),
    "background-shift": (lambda r: f"{r['task']} / {r['method']}", lambda r: r["variant"]),
    "demo-count": (lambda r: r["task"], lambda r: f"{r['method']} {r['demos']} demos"),
}

_TITLES = {
    "ablation": "Success rate (%) per task and method",
    "placement-shift": "Success rate (%) with training vs shifted placements",
    "background-shift": "Success rate (%) with the training vs unseen backgrounds",
    "demo-count": "Success rate (%) by number of demonstrations",
}


def markdown_report(experiment: str, summary: list, config_digest: str, seed: int, episodes: int) -> str:
    """Pivot the summary rows into one markdown table; cells without a trained policy read n/a."""
    row_key, col_key = _LAYOUTS[experiment]
    rows, cols, values = [], [], {}
    for entry in summary:
        r, c = row_key(entry), col_key(entry)
        if r not in rows:
            rows.append(r)
        if c not in cols:
            cols.append(c)
        rate = entry["success_rate"]
        values[(r, c)] = f"{100.0 * float(rate):.0f}" if rate != "" else "n/a"
    lines = [
        f"# {experiment}: {_TITLES[experiment]}",
        "",
        f"config digest `{config_digest}`, seed {seed}, {episodes} rollouts per cell",
        "",
        "| | " + " | ".join(cols) + " |",
        "|---|" + "---|" * len(cols),
    ]
    for r in rows:
        lines.append(f"| {r} | " + " | ".join(values.get((r, c), "n/a") for c in cols) + " |")
    return "\n".join(lines) + "\n"
