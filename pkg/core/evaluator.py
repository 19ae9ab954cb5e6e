# core/evaluator.py

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import csv

import numpy as np
from pydantic import BaseModel, Field

from config.run_config import AblationConfig
from core.dataset import SplitSide, generate_dataset, load_dataset, make_split, parse_level, sample_episode_spec
from core.rollout_agent import EpisodeResult, rollout
from core.scene_codec import N_BINS, Vocabulary, build_vocabulary, coord_bin, serialize_scene
from core.tabletop import DONE, SKILLS, SimState, TaskSpec, expert_action, step
from core.trainer import train
from services.actllm_model import SceneActionModel
from utils.helpers import log, ordered_map, write_json, write_jsonl


class SuccessReport(BaseModel):
    level: str
    template_id: str
    n_episodes: int
    success_rate: float
    mean_f1: float
    mean_steps: float
    seed: int
    per_template: List["SuccessReport"] = Field(default_factory=list)


SuccessReport.update_forward_refs()


class OracleModel:
    """Scripted stub: reads the simulator through ``observe`` and emits the expert's
    descriptions and action as one-hot logits"""

    n_image_tokens = 64
    max_context = 1024

    def __init__(self, vocab: Optional[Vocabulary] = None):
        self.vocab = vocab or build_vocabulary()
        self._target: List[int] = []
        self._prefix: Optional[int] = None
        self._action = None

    def fork(self, index: int) -> "OracleModel":
        return OracleModel(self.vocab)

    def observe(self, state: SimState, spec: TaskSpec):
        action = expert_action(state, spec)
        if action == DONE:
            self._action = None
            after = state
        else:
            self._action = action
            after = step(state, action)
        current = serialize_scene(state.to_scene(), self.vocab)
        nxt = serialize_scene(after.to_scene(), self.vocab)
        self._target = current.ids + nxt.ids
        self._prefix = None

    def next_token_logits(self, ids, images) -> np.ndarray:
        if self._prefix is None:
            # first query follows the pre-filled opening token
            self._prefix = len(ids) - 1
        logits = np.zeros(len(self.vocab))
        logits[self._target[len(ids) - self._prefix]] = 1.0
        return logits

    def policy_logits(self, ids, images, description_positions) -> Tuple[np.ndarray, np.ndarray]:
        skill = np.zeros(len(SKILLS))
        coords = np.zeros((4, N_BINS))
        if self._action is not None:
            skill[SKILLS.index(self._action.skill)] = 1.0
            values = list(self._action.p_initial) + list(self._action.p_target)
            for row, v in enumerate(values):
                coords[row, coord_bin(v)] = 1.0
        return skill, coords


class RandomModel:
    """Gaussian logits everywhere; seeded per episode"""

    n_image_tokens = 64
    max_context = 1024

    def __init__(self, seed: int = 0, vocab: Optional[Vocabulary] = None, stream=None):
        self.seed = seed
        self.vocab = vocab or build_vocabulary()
        self.rng = np.random.default_rng(stream if stream is not None else seed)

    def fork(self, index: int) -> "RandomModel":
        return RandomModel(self.seed, self.vocab, stream=[self.seed, index])

    def next_token_logits(self, ids, images) -> np.ndarray:
        return self.rng.normal(size=len(self.vocab))

    def policy_logits(self, ids, images, description_positions) -> Tuple[np.ndarray, np.ndarray]:
        return self.rng.normal(size=len(SKILLS)), self.rng.normal(size=(4, N_BINS))


def _summarize(level: str, template_id: str, seed: int, results: Sequence[EpisodeResult]) -> SuccessReport:
    n = len(results)
    return SuccessReport(
        level=level,
        template_id=template_id,
        n_episodes=n,
        success_rate=sum(r.success for r in results) / n if n else 0.0,
        mean_f1=float(np.mean([r.mean_f1 for r in results])) if n else 0.0,
        mean_steps=float(np.mean([r.steps_used for r in results])) if n else 0.0,
        seed=seed,
    )


def run_episodes(
    model,
    level,
    n_episodes: int,
    seed: int,
    templates: Optional[Sequence[str]] = None,
    workers: int = None,
) -> List[EpisodeResult]:
    """Held-out rollouts for ``level``; episode i is the same task for every model"""
    split = make_split(level, templates)
    vocab = build_vocabulary()
    fork = getattr(model, "fork", None)

    def one(i: int) -> EpisodeResult:
        spec, scene_seed = sample_episode_spec(split, SplitSide.TEST, seed, i)
        episode_model = fork(i) if fork is not None else model
        return rollout(episode_model, spec, scene_seed, vocab, observer=getattr(episode_model, "observe", None))

    return ordered_map(one, range(n_episodes), workers, desc=f"eval {parse_level(level).name}")


def evaluate(
    model,
    level,
    n_episodes: int,
    seed: int,
    templates: Optional[Sequence[str]] = None,
    workers: int = None,
    records_path: Optional[Path] = None,
) -> SuccessReport:
    level_name = parse_level(level).name
    log(f"🎯 Evaluating {level_name} on {n_episodes} episodes (seed {seed})")
    results = run_episodes(model, level, n_episodes, seed, templates, workers)

    report = _summarize(level_name, "all", seed, results)
    by_template: Dict[str, List[EpisodeResult]] = {}
    for r in results:
        by_template.setdefault(r.template_id, []).append(r)
    report.per_template = [_summarize(level_name, t, seed, by_template[t]) for t in sorted(by_template)]

    if records_path is not None:
        write_jsonl(records_path, (dict(episode=i, **r.dict()) for i, r in enumerate(results)))
    log(f"📊 {level_name}: success {report.success_rate:.3f}, description F1 {report.mean_f1:.3f}")
    return report


def save_report(report: SuccessReport, filepath: Path) -> Path:
    path = write_json(filepath, report.dict())
    log(f"💾 Report saved: {path}")
    return path


class AblationRow(BaseModel):
    variant: str
    success: Dict[str, float]


class AblationTable(BaseModel):
    levels: List[str]
    rows: List[AblationRow]
    reports: Dict[str, Dict[str, SuccessReport]] = Field(default_factory=dict)
    checks: Dict[str, bool] = Field(default_factory=dict)


def run_ablation(config: AblationConfig, out_dir: Path, workers: int = None) -> AblationTable:
    """Train every variant from one seed and one dataset, evaluate all on the same episodes"""
    out_dir = Path(out_dir)
    base = config.train
    if base.dataset_dir:
        dataset = load_dataset(Path(base.dataset_dir))
    else:
        dataset = generate_dataset(make_split(base.level, base.templates), base.episodes, base.seed, SplitSide.TRAIN, workers)
    vocab = build_vocabulary()

    rows: List[AblationRow] = []
    reports: Dict[str, Dict[str, SuccessReport]] = {}
    for variant in config.variants:
        log(f"🧪 Ablation variant {variant.name}")
        variant_config = base.copy(update={"no_future_state": variant.no_future_state, "no_multi_turn": variant.no_multi_turn})
        result = train(variant_config, dataset=dataset, out_dir=out_dir / variant.name)
        model = SceneActionModel.from_checkpoint(Path(result.checkpoint), vocab)
        reports[variant.name] = {}
        for level in config.levels:
            report = evaluate(model, level, config.eval_episodes, config.eval_seed, base.templates, workers)
            save_report(report, out_dir / variant.name / f"report_{level}.json")
            reports[variant.name][level] = report
        rows.append(AblationRow(variant=variant.name, success={l: reports[variant.name][l].success_rate for l in config.levels}))

    checks = {}
    if "full" in reports and "no_future_state" in reports and "L2" in config.levels:
        checks["full_ge_no_future_state_L2"] = reports["full"]["L2"].success_rate >= reports["no_future_state"]["L2"].success_rate
        log(f"{'✅' if checks['full_ge_no_future_state_L2'] else '⚠️'} full >= no_future_state on L2: {checks['full_ge_no_future_state_L2']}")
    return AblationTable(levels=list(config.levels), rows=rows, reports=reports, checks=checks)


def write_ablation_csv(table: AblationTable, filepath: Path) -> Path:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant"] + table.levels)
        for row in table.rows:
            writer.writerow([row.variant] + [f"{row.success[l]:.4f}" for l in table.levels])
    log(f"💾 Ablation table saved: {filepath}")
    return filepath
