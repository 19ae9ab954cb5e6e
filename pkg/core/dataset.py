"""Expert demonstration datasets and compositional split assignment."""

from enum import Enum
from itertools import product
import json
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator

from core.catalog import Catalog, load_catalog
from core.scene_codec import SceneState, build_vocabulary
from core.tabletop import (
    DONE, IMAGE_SIZE, Action, ExpertFailureError, SubgoalTracker, TaskSpec, TemplateId,
    count_subgoals, expert_action, goal_state, is_success, new_scene, render, sample_task, step,
)
from utils.helpers import log, ordered_map, read_json, read_jsonl, write_json, write_jsonl

DATASET_SCHEMA_VERSION = 1
Combo = Tuple[str, str]


class Level(str, Enum):
    L1 = "L1_placement"
    L2 = "L2_combinatorial"
    L3 = "L3_novel_object"
    L4 = "L4_novel_task"


def parse_level(value) -> Level:
    """Accepts ``L2`` as well as ``L2_combinatorial``"""
    if isinstance(value, Level):
        return value
    for level in Level:
        if value in (level.value, level.name):
            return level
    raise ValueError(f"unknown level {value!r}; expected one of {[l.name for l in Level]}")


class SplitSide(str, Enum):
    TRAIN = "train"
    TEST = "test"


class SplitAssignment(BaseModel):
    level: Level
    train_combos: List[Combo]
    test_combos: List[Combo]
    train_templates: List[TemplateId]
    test_templates: List[TemplateId]

    @root_validator(skip_on_failure=True)
    def _held_out_is_held_out(cls, values):
        level = values["level"]
        train, test = set(values["train_combos"]), set(values["test_combos"])
        if level == Level.L2 and train & test:
            raise ValueError(f"L2 test combos leak into training: {sorted(train & test)}")
        if level == Level.L3 and {k for k, _ in train} & {k for k, _ in test}:
            raise ValueError("L3 test kinds must be unseen in training")
        if level == Level.L4 and set(values["train_templates"]) & set(values["test_templates"]):
            raise ValueError("L4 test templates must be unseen in training")
        if not values["train_templates"] or not values["test_templates"]:
            raise ValueError("each side needs at least one template")
        return values

    def templates(self, side: SplitSide) -> List[TemplateId]:
        return self.train_templates if side == SplitSide.TRAIN else self.test_templates

    def pools(self, side: SplitSide) -> Tuple[List[Combo], List[Combo]]:
        """(target pool, distractor pool) for one side of the split"""
        if side == SplitSide.TRAIN:
            return self.train_combos, self.train_combos
        if self.level in (Level.L2, Level.L3):
            return self.test_combos, self.train_combos
        return self.test_combos, self.test_combos


def make_split(level, templates: Optional[Sequence[str]] = None, catalog: Optional[Catalog] = None) -> SplitAssignment:
    catalog = catalog or load_catalog()
    level = parse_level(level)
    chosen = [TemplateId(t) for t in (templates or catalog.template_ids)]
    splits = catalog.splits

    base = sorted(product(splits.base_kinds, catalog.object_colors))
    novel = sorted(product(splits.novel_kinds, catalog.object_colors))
    held_out = sorted(tuple(c) for c in splits.held_out_combos)
    held_templates = [TemplateId(t) for t in splits.held_out_templates]

    train_templates = test_templates = chosen
    train_combos = test_combos = base
    if level == Level.L2:
        train_combos = [c for c in base if c not in held_out]
        test_combos = held_out
    elif level == Level.L3:
        test_combos = novel
    elif level == Level.L4:
        train_templates = [t for t in chosen if t not in held_templates]
        test_templates = held_templates

    return SplitAssignment(
        level=level,
        train_combos=train_combos,
        test_combos=test_combos,
        train_templates=train_templates,
        test_templates=test_templates,
    )


class Step(BaseModel):
    action: Action
    state: SceneState
    next_state: SceneState


class Episode(BaseModel):
    """One expert trajectory; frames live in the dataset's observation block"""

    episode_id: int
    seed: int
    scene_seed: int
    spec: TaskSpec
    steps: List[Step] = Field(default_factory=list)
    frame_offset: int = 0
    n_frames: int = 0
    goal_frame: Optional[int] = None

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def observation_frames(self) -> List[int]:
        """Absolute frame indices of o_1 .. o_T"""
        return list(range(self.frame_offset, self.frame_offset + self.n_steps + 1))

    def image_frame(self, ref: str) -> int:
        if ref == "goal" and self.goal_frame is not None:
            return self.frame_offset + self.goal_frame
        raise KeyError(f"image reference {ref!r} does not resolve in episode {self.episode_id}")


class DatasetMeta(BaseModel):
    schema_version: int = DATASET_SCHEMA_VERSION
    split: SplitAssignment
    side: SplitSide
    n_episodes: int
    seed: int
    n_frames: int
    frame_shape: Tuple[int, int, int] = (IMAGE_SIZE, IMAGE_SIZE, 3)
    dtype: str = "uint8"
    byte_order: str = "little"
    vocab_hash: str = ""


class Dataset:
    def __init__(self, meta: DatasetMeta, episodes: List[Episode], observations: np.ndarray):
        self.meta = meta
        self.episodes = episodes
        self.observations = observations

    def __len__(self):
        return len(self.episodes)

    def frame(self, index: int) -> np.ndarray:
        return self.observations[index]

    def combos(self) -> Set[Combo]:
        """Every manipulable (kind, color) that appears in any episode"""
        return {o.key() for ep in self.episodes for o in ep.spec.params.objects}

    def template_ids(self) -> Set[str]:
        return {TemplateId(ep.spec.template_id).value for ep in self.episodes}


def episode_rng(seed: int, index: int, side: SplitSide = SplitSide.TRAIN) -> np.random.Generator:
    # held-out episodes use a stream disjoint from the training one
    if SplitSide(side) == SplitSide.TEST:
        return np.random.default_rng([seed, 1, index])
    return np.random.default_rng([seed, index])


def sample_episode_spec(split: SplitAssignment, side: SplitSide, seed: int, index: int) -> Tuple[TaskSpec, int]:
    """Task and scene seed of episode ``index`` on ``side``; the same for every caller"""
    rng = episode_rng(seed, index, side)
    templates = sorted(split.templates(side), key=lambda t: TemplateId(t).value)
    template_id = TemplateId(templates[int(rng.integers(len(templates)))])
    target_pool, distractor_pool = split.pools(side)
    spec = sample_task(template_id, rng, target_pool, distractor_pool)
    return spec, int(rng.integers(2 ** 31 - 1))


def expert_episode(split: SplitAssignment, side: SplitSide, seed: int, index: int) -> Tuple[Episode, List[np.ndarray]]:
    spec, scene_seed = sample_episode_spec(split, side, seed, index)
    state = new_scene(spec, scene_seed)
    budget = count_subgoals(state, spec)
    tracker = SubgoalTracker(spec, state)

    frames = [render(state)]
    steps: List[Step] = []
    goal = render(goal_state(state, spec)) if spec.instruction.image_refs() else None

    while True:
        action = expert_action(state, spec, tracker)
        if action == DONE:
            break
        if len(steps) >= budget:
            raise ExpertFailureError(f"episode {index}: expert exceeded {budget} steps on {spec.template_id}")
        next_state = step(state, action)
        tracker.update(next_state)
        steps.append(Step(action=action, state=state.to_scene(), next_state=next_state.to_scene()))
        frames.append(render(next_state))
        state = next_state

    if not is_success(state, spec, tracker):
        raise ExpertFailureError(f"episode {index}: expert stopped before success")

    episode = Episode(episode_id=index, seed=seed, scene_seed=scene_seed, spec=spec, steps=steps)
    if goal is not None:
        episode.goal_frame = len(frames)
        frames.append(goal)
    episode.n_frames = len(frames)
    return episode, frames


def generate_dataset(
    split: SplitAssignment,
    n_episodes: int,
    seed: int,
    side: SplitSide = SplitSide.TRAIN,
    workers: int = None,
) -> Dataset:
    if n_episodes <= 0:
        raise ValueError("n_episodes must be > 0")

    results = ordered_map(
        lambda i: expert_episode(split, side, seed, i), range(n_episodes), workers, desc="episodes",
    )

    episodes: List[Episode] = []
    frames: List[np.ndarray] = []
    for episode, episode_frames in results:
        episode.frame_offset = len(frames)
        episodes.append(episode)
        frames.extend(episode_frames)

    observations = np.stack(frames).astype(np.uint8)
    meta = DatasetMeta(
        split=split,
        side=side,
        n_episodes=n_episodes,
        seed=seed,
        n_frames=len(frames),
        vocab_hash=build_vocabulary().config_hash,
    )
    log(f"✅ Generated {n_episodes} episodes ({len(frames)} frames) for {split.level.value}/{side.value}")
    return Dataset(meta, episodes, observations)


def save_dataset(dataset: Dataset, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_path = write_json(out_dir / "meta.json", _plain(dataset.meta))
    episodes_path = write_jsonl(out_dir / "episodes.jsonl", (_plain(ep) for ep in dataset.episodes))
    obs_path = out_dir / "observations.bin"
    with open(obs_path, "wb") as f:
        f.write(np.ascontiguousarray(dataset.observations, dtype="<u1").tobytes())
    log(f"💾 Saved dataset to {out_dir}")
    return [meta_path, episodes_path, obs_path]


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    meta = DatasetMeta(**read_json(path / "meta.json"))
    if meta.schema_version != DATASET_SCHEMA_VERSION:
        raise ValueError(f"dataset schema {meta.schema_version} unsupported (expected {DATASET_SCHEMA_VERSION})")
    episodes = [Episode(**record) for record in read_jsonl(path / "episodes.jsonl")]
    raw = np.fromfile(path / "observations.bin", dtype="<u1")
    expected = meta.n_frames * int(np.prod(meta.frame_shape))
    if raw.size != expected:
        raise ValueError(f"observations.bin holds {raw.size} bytes, meta.json promises {expected}")
    observations = raw.reshape((meta.n_frames,) + tuple(meta.frame_shape))
    return Dataset(meta, episodes, observations)


def _plain(model: BaseModel):
    return json.loads(model.json())
