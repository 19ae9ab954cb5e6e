"""Kinematic 2D tabletop: task sampling, scenes, rendering, primitives, expert."""

from enum import Enum
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union
import math

import numpy as np
from pydantic import BaseModel, Field, validator, root_validator

from core.catalog import Catalog, load_catalog
from core.scene_codec import (
    ImageSegment, Instruction, MAX_OBJECTS, SceneObject, SceneState, TextSegment,
)

GRASP_RADIUS = 0.05
PUSH_STEP = 0.1
CONTAINMENT_RADIUS = 0.07
WIPE_RADIUS = 0.04
GOAL_TOLERANCE = 0.05
MIN_SEPARATION = 0.06
BOX_SIDE = 0.25
WIPE_HALF_LENGTH = 0.05
MAX_PLACEMENT_ATTEMPTS = 1000
IMAGE_SIZE = 64

# packing slots relative to the box center, filled in order
BOX_SLOTS = [(-0.06, -0.06), (0.06, -0.06), (-0.06, 0.06), (0.06, 0.06), (0.0, 0.0)]

Observation = np.ndarray
DONE = "done"


class SceneCrowdedError(RuntimeError):
    pass


class TemplateId(str, Enum):
    PUT_IN_CONTAINER = "put_in_container"
    PACK_KIND = "pack_kind"
    REARRANGE_TO_GOAL = "rearrange_to_goal"
    FOLLOW_ORDER = "follow_order"


class Skill(str, Enum):
    PICK_PLACE = "pick_place"
    PUSH = "push"
    WIPE = "wipe"


SKILLS = [Skill.PICK_PLACE, Skill.PUSH, Skill.WIPE]


def _unit_pair(pos):
    if not all(0.0 <= v <= 1.0 for v in pos):
        raise ValueError(f"pose outside [0,1]^2: {pos}")
    return pos


class ObjectRef(BaseModel):
    kind: str
    color: str

    class Config:
        frozen = True

    def key(self) -> Tuple[str, str]:
        return (self.kind, self.color)


class SimObject(BaseModel):
    kind: str
    color: str
    pos: Tuple[float, float]
    is_container: bool = False

    _check_pos = validator("pos", allow_reuse=True)(_unit_pair)

    @validator("is_container", always=True)
    def _derive_container(cls, _, values):
        return values.get("kind") in load_catalog().container_kinds

    @property
    def is_marker(self) -> bool:
        return self.kind in load_catalog().marker_kinds

    @property
    def graspable(self) -> bool:
        return not self.is_container and not self.is_marker

    def ref(self) -> ObjectRef:
        return ObjectRef(kind=self.kind, color=self.color)


class SimState(BaseModel):
    objects: List[SimObject] = Field(default_factory=list)
    rng_seed: int = 0
    step_count: int = 0

    @validator("step_count")
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("step_count must be >= 0")
        return v

    def to_scene(self) -> SceneState:
        """Ground-truth description read straight from the simulator"""
        return SceneState(objects=[SceneObject(kind=o.kind, color=o.color, pos=o.pos) for o in self.objects])

    def find(self, ref: ObjectRef) -> Optional[SimObject]:
        for obj in self.objects:
            if obj.kind == ref.kind and obj.color == ref.color:
                return obj
        return None


class Action(BaseModel):
    skill: Skill
    p_initial: Tuple[float, float]
    p_target: Tuple[float, float]

    _check_initial = validator("p_initial", allow_reuse=True)(_unit_pair)
    _check_target = validator("p_target", allow_reuse=True)(_unit_pair)


class TaskParams(BaseModel):
    objects: List[ObjectRef]
    containers: List[ObjectRef] = Field(default_factory=list)
    n_dirt: int = 0
    targets: List[ObjectRef] = Field(default_factory=list)
    target_containers: List[int] = Field(default_factory=list)
    pack_kind: Optional[str] = None
    goal_positions: List[Tuple[float, float]] = Field(default_factory=list)


class TaskSpec(BaseModel):
    template_id: TemplateId
    params: TaskParams
    instruction: Instruction

    @root_validator(skip_on_failure=True)
    def _bindings_resolve(cls, values):
        params: TaskParams = values["params"]
        present = {o.key() for o in params.objects}
        missing = [t.key() for t in params.targets if t.key() not in present]
        if missing:
            raise ValueError(f"targets not in scene: {missing}")
        if params.pack_kind is not None and params.pack_kind not in {o.kind for o in params.objects}:
            raise ValueError(f"pack kind {params.pack_kind} not in scene")
        if any(not 0 <= i < len(params.containers) for i in params.target_containers):
            raise ValueError("target container index out of range")
        if len(present) != len(params.objects):
            raise ValueError("manipulable (kind, color) pairs must be unique")
        return values

    def n_scene_objects(self) -> int:
        return len(self.params.objects) + len(self.params.containers) + self.params.n_dirt


# ---------------------------------------------------------------------------
# Task sampling
# ---------------------------------------------------------------------------

def _instruction_words(text: str, bindings: Dict[str, str]) -> List[str]:
    return text.format(**bindings).split()


def build_instruction(template_id: TemplateId, params: TaskParams, catalog: Optional[Catalog] = None) -> Instruction:
    catalog = catalog or load_catalog()
    template = catalog.templates[template_id.value]

    if template_id == TemplateId.REARRANGE_TO_GOAL:
        before, _, after = template.text.partition("{goal}")
        segments = []
        if before.split():
            segments.append(TextSegment(words=before.split()))
        segments.append(ImageSegment(ref="goal"))
        if after.split():
            segments.append(TextSegment(words=after.split()))
        return Instruction(segments=segments)

    if template_id == TemplateId.PACK_KIND:
        return Instruction(segments=[TextSegment(words=_instruction_words(template.text, {"kind": params.pack_kind}))])

    words: List[str] = []
    for i, (target, c_index) in enumerate(zip(params.targets, params.target_containers)):
        if i > 0:
            words.append(template.joiner or "then")
        words.extend(_instruction_words(template.text, {
            "color": target.color,
            "kind": target.kind,
            "container_color": params.containers[c_index].color,
        }))
    return Instruction(segments=[TextSegment(words=words)])


def _draw(rng: np.random.Generator, pool: Sequence[Tuple[str, str]], n: int, exclude: Set[Tuple[str, str]]) -> List[ObjectRef]:
    candidates = [c for c in pool if c not in exclude]
    if len(candidates) < n:
        raise ValueError(f"pool too small: need {n}, have {len(candidates)}")
    order = rng.permutation(len(candidates))[:n]
    return [ObjectRef(kind=candidates[i][0], color=candidates[i][1]) for i in order]


def _sample_count(rng: np.random.Generator, bounds: Tuple[int, int]) -> int:
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def _sample_separated(rng: np.random.Generator, n: int, lo: float, hi: float) -> List[Tuple[float, float]]:
    points: List[Tuple[float, float]] = []
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        if len(points) == n:
            break
        p = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        if all(math.dist(p, q) >= MIN_SEPARATION for q in points):
            points.append(p)
    if len(points) < n:
        raise SceneCrowdedError(f"could not place {n} goal positions")
    return points


def sample_task(
    template_id: TemplateId,
    rng: np.random.Generator,
    target_pool: Sequence[Tuple[str, str]],
    distractor_pool: Sequence[Tuple[str, str]],
    catalog: Optional[Catalog] = None,
) -> TaskSpec:
    """Draw a task whose goal-relevant objects come from ``target_pool``"""
    catalog = catalog or load_catalog()
    template = catalog.templates[template_id.value]
    target_pool = sorted(set(target_pool))
    distractor_pool = sorted(set(distractor_pool))
    params = TaskParams(objects=[])

    def bowls(n: int) -> List[ObjectRef]:
        colors = [catalog.object_colors[i] for i in rng.permutation(len(catalog.object_colors))[:n]]
        return [ObjectRef(kind="bowl", color=c) for c in colors]

    if template_id == TemplateId.PUT_IN_CONTAINER:
        targets = _draw(rng, target_pool, 1, set())
        params.containers = bowls(1)
        params.target_containers = [0]
    elif template_id == TemplateId.FOLLOW_ORDER:
        targets = _draw(rng, target_pool, _sample_count(rng, template.targets), set())
        params.containers = bowls(len(targets))
        params.target_containers = list(range(len(targets)))
    elif template_id == TemplateId.PACK_KIND:
        kinds = sorted({k for k, _ in target_pool})
        kind = kinds[int(rng.integers(len(kinds)))]
        of_kind = [c for c in target_pool if c[0] == kind]
        n = min(_sample_count(rng, template.targets), len(of_kind))
        targets = _draw(rng, of_kind, n, set())
        params.pack_kind = kind
        params.containers = [ObjectRef(kind="box", color=catalog.box_color)]
    else:
        targets = _draw(rng, target_pool, _sample_count(rng, template.targets), set())
        params.goal_positions = _sample_separated(rng, len(targets), 0.08, 0.92)
        params.n_dirt = int(rng.uniform() < template.dirt_probability)

    taken = {t.key() for t in targets}
    if params.pack_kind is not None:
        # every object of the packed kind is a target, so distractors avoid it
        taken |= {c for c in distractor_pool if c[0] == params.pack_kind}
    n_distractors = _sample_count(rng, template.distractors)
    n_distractors = min(n_distractors, len([c for c in distractor_pool if c not in taken]))
    distractors = _draw(rng, distractor_pool, n_distractors, taken)

    params.targets = targets
    params.objects = targets + distractors
    return TaskSpec(
        template_id=template_id,
        params=params,
        instruction=build_instruction(template_id, params, catalog),
    )


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

def _in_box(pos: Tuple[float, float], box_pos: Tuple[float, float], margin: float = 0.0) -> bool:
    half = BOX_SIDE / 2 + margin
    return abs(pos[0] - box_pos[0]) <= half and abs(pos[1] - box_pos[1]) <= half


def new_scene(spec: TaskSpec, seed: int) -> SimState:
    """Place the spec's objects by seeded rejection sampling"""
    n_total = spec.n_scene_objects()
    if n_total > MAX_OBJECTS:
        raise ValueError(f"scene with {n_total} objects exceeds capacity {MAX_OBJECTS}")

    rng = np.random.default_rng(seed)
    params = spec.params
    targets = {t.key() for t in params.targets}

    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        placed: List[SimObject] = []
        box_pos = None
        ok = True

        def place(kind: str, color: str, lo: float, hi: float, container_pos=None) -> bool:
            nonlocal box_pos
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                p = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
                if any(math.dist(p, o.pos) < MIN_SEPARATION for o in placed):
                    continue
                if any(math.dist(p, g) < MIN_SEPARATION for g in params.goal_positions):
                    continue
                if box_pos is not None and _in_box(p, box_pos, margin=0.03):
                    continue
                if container_pos is not None and math.dist(p, container_pos) < CONTAINMENT_RADIUS + 0.03:
                    continue
                placed.append(SimObject(kind=kind, color=color, pos=p))
                if kind == "box":
                    box_pos = p
                return True
            return False

        for c in params.containers:
            if c.kind == "box":
                ok = ok and place(c.kind, c.color, 0.2, 0.8)
        for c in params.containers:
            if c.kind != "box":
                ok = ok and place(c.kind, c.color, 0.1, 0.9)
        container_of = {t.key(): placed_container for t, placed_container in zip(
            params.targets, [params.containers[i] for i in params.target_containers])}
        for obj in params.objects:
            home = None
            if obj.key() in container_of:
                home = placed_by_ref(placed, container_of[obj.key()])
            ok = ok and place(obj.kind, obj.color, 0.05, 0.95, container_pos=home)
        for _ in range(params.n_dirt):
            ok = ok and place("dirt", load_catalog().dirt_color, 0.1, 0.9)
        if not ok:
            break

        state = SimState(objects=placed, rng_seed=seed, step_count=0)
        if count_subgoals(state, spec) > 0:
            return state

    raise SceneCrowdedError(
        f"could not place {n_total} objects after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def placed_by_ref(objects: Sequence[SimObject], ref: ObjectRef) -> Optional[Tuple[float, float]]:
    for o in objects:
        if o.kind == ref.kind and o.color == ref.color:
            return o.pos
    return None


def goal_state(state: SimState, spec: TaskSpec) -> SimState:
    """The scene once the task is done (rendered as the rearrangement goal image)"""
    state = state.copy(deep=True)
    state = _apply_until_done(state, spec)
    return state.copy(update={"step_count": 0})


def _apply_until_done(state: SimState, spec: TaskSpec) -> SimState:
    tracker = SubgoalTracker(spec, state)
    for _ in range(2 * MAX_OBJECTS):
        action = expert_action(state, spec, tracker)
        if action == DONE:
            return state
        state = step(state, action)
        tracker.update(state)
    raise ExpertFailureError("expert did not finish while building goal state")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _glyph_mask(kind: str, dx: np.ndarray, dy: np.ndarray, scale: float) -> np.ndarray:
    dx = dx / scale
    dy = dy / scale
    r2 = dx * dx + dy * dy
    if kind == "cube":
        return (np.abs(dx) <= 2.5) & (np.abs(dy) <= 2.5)
    if kind == "sphere":
        return r2 <= 9.0
    if kind == "star":
        plus = ((np.abs(dx) <= 1.0) & (np.abs(dy) <= 3.5)) | ((np.abs(dy) <= 1.0) & (np.abs(dx) <= 3.5))
        return plus | (np.abs(dx) + np.abs(dy) <= 2.5)
    if kind == "ring":
        return (r2 >= 1.8 ** 2) & (r2 <= 3.2 ** 2)
    if kind == "triangle":
        return (dy >= -3.0) & (dy <= 3.0) & (np.abs(dx) <= (dy + 3.0) / 2.0)
    if kind == "cross":
        band = (np.abs(dx - dy) <= 1.2) | (np.abs(dx + dy) <= 1.2)
        return band & (np.abs(dx) <= 3.0) & (np.abs(dy) <= 3.0)
    if kind == "bowl":
        return (r2 >= 3.5 ** 2) & (r2 <= 4.8 ** 2)
    if kind == "box":
        half = BOX_SIDE * 64 / 2
        edge = np.maximum(np.abs(dx), np.abs(dy))
        return (edge <= half) & (edge >= half - 1.0)
    if kind == "dirt":
        return r2 <= 1.6 ** 2
    raise ValueError(f"no glyph for kind {kind!r}")


_DRAW_ORDER = {"box": 0, "bowl": 1, "dirt": 2}


def render(state: SimState, size: int = IMAGE_SIZE, catalog: Optional[Catalog] = None) -> Observation:
    catalog = catalog or load_catalog()
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:, :] = catalog.palette["background"]
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    scale = size / 64.0
    order = sorted(range(len(state.objects)), key=lambda i: (_DRAW_ORDER.get(state.objects[i].kind, 3), i))
    for i in order:
        obj = state.objects[i]
        cx, cy = obj.pos[0] * size, obj.pos[1] * size
        mask = _glyph_mask(obj.kind, cols + 0.5 - cx, rows + 0.5 - cy, scale)
        image[mask] = catalog.palette[obj.color]
    return image


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def _clamp(p: Tuple[float, float]) -> Tuple[float, float]:
    return (min(1.0, max(0.0, p[0])), min(1.0, max(0.0, p[1])))


def _nearest_graspable(state: SimState, point: Tuple[float, float]) -> Optional[int]:
    best, best_d = None, GRASP_RADIUS
    for i, obj in enumerate(state.objects):
        if not obj.graspable:
            continue
        d = math.dist(obj.pos, point)
        if d < best_d:
            best, best_d = i, d
    return best


def _segment_distance(p, a, b) -> float:
    ax, ay = a
    vx, vy = b[0] - ax, b[1] - ay
    length2 = vx * vx + vy * vy
    t = 0.0 if length2 == 0 else max(0.0, min(1.0, ((p[0] - ax) * vx + (p[1] - ay) * vy) / length2))
    return math.dist(p, (ax + t * vx, ay + t * vy))


def step(state: SimState, action: Action) -> SimState:
    objects = [o.copy() for o in state.objects]
    skill = Skill(action.skill)

    if skill == Skill.PICK_PLACE:
        i = _nearest_graspable(state, action.p_initial)
        if i is not None:
            objects[i] = objects[i].copy(update={"pos": _clamp(action.p_target)})
    elif skill == Skill.PUSH:
        i = _nearest_graspable(state, action.p_initial)
        if i is not None:
            px, py = objects[i].pos
            dist = math.dist((px, py), action.p_target)
            if dist > 0:
                move = min(PUSH_STEP, dist)
                ux, uy = (action.p_target[0] - px) / dist, (action.p_target[1] - py) / dist
                objects[i] = objects[i].copy(update={"pos": _clamp((px + move * ux, py + move * uy))})
    else:
        objects = [
            o for o in objects
            if not (o.is_marker and _segment_distance(o.pos, action.p_initial, action.p_target) <= WIPE_RADIUS)
        ]

    return SimState(objects=objects, rng_seed=state.rng_seed, step_count=state.step_count + 1)


# ---------------------------------------------------------------------------
# Goals
# ---------------------------------------------------------------------------

def _box(state: SimState) -> Optional[SimObject]:
    return next((o for o in state.objects if o.kind == "box"), None)


def subgoal_flags(state: SimState, spec: TaskSpec) -> List[bool]:
    """Satisfaction of each sub-goal, in the task's order"""
    params = spec.params
    tid = TemplateId(spec.template_id)

    if tid in (TemplateId.PUT_IN_CONTAINER, TemplateId.FOLLOW_ORDER):
        flags = []
        for target, c_index in zip(params.targets, params.target_containers):
            obj, container = state.find(target), state.find(params.containers[c_index])
            flags.append(
                obj is not None and container is not None
                and math.dist(obj.pos, container.pos) <= CONTAINMENT_RADIUS
            )
        return flags

    if tid == TemplateId.PACK_KIND:
        box = _box(state)
        return [
            box is not None and _in_box(o.pos, box.pos)
            for o in state.objects if o.kind == params.pack_kind
        ]

    flags = []
    for target, goal in zip(params.targets, params.goal_positions):
        flags.append(any(
            o.kind == target.kind and o.color == target.color and math.dist(o.pos, goal) <= GOAL_TOLERANCE
            for o in state.objects
        ))
    flags.extend(False for o in state.objects if o.is_marker)
    return flags


def count_subgoals(state: SimState, spec: TaskSpec) -> int:
    return sum(1 for f in subgoal_flags(state, spec) if not f)


class SubgoalTracker:
    """Ordered sub-goal progress kept by the harness, outside SimState"""

    def __init__(self, spec: TaskSpec, initial: SimState):
        self.spec = spec
        self.ordered = TemplateId(spec.template_id) == TemplateId.FOLLOW_ORDER
        self.completed = 0
        self.violated = False
        self.history: List[int] = []
        self.update(initial)

    def update(self, state: SimState) -> int:
        flags = subgoal_flags(state, self.spec)
        if self.ordered:
            while self.completed < len(flags) and flags[self.completed]:
                self.completed += 1
            if any(flags[self.completed + 1:]):
                self.violated = True
        else:
            self.completed = sum(flags)
        self.history.append(self.completed)
        return self.completed

    def success(self, state: SimState) -> bool:
        flags = subgoal_flags(state, self.spec)
        if self.ordered:
            return self.completed == len(flags) and all(flags) and not self.violated
        return all(flags)


def is_success(state: SimState, spec: TaskSpec, tracker: Optional[SubgoalTracker] = None) -> bool:
    if tracker is not None:
        return tracker.success(state)
    return all(subgoal_flags(state, spec))


# ---------------------------------------------------------------------------
# Expert
# ---------------------------------------------------------------------------

class ExpertFailureError(RuntimeError):
    pass


def _free_box_slot(state: SimState, box_pos: Tuple[float, float]) -> Tuple[float, float]:
    for ox, oy in BOX_SLOTS:
        slot = (box_pos[0] + ox, box_pos[1] + oy)
        if not any(o.graspable and math.dist(o.pos, slot) < 0.03 for o in state.objects):
            return _clamp(slot)
    return box_pos


def expert_action(state: SimState, spec: TaskSpec, tracker: Optional[SubgoalTracker] = None) -> Union[Action, str]:
    """Scripted expert: one action per unsatisfied sub-goal, ``DONE`` once the task holds"""
    if is_success(state, spec, tracker):
        return DONE

    params = spec.params
    tid = TemplateId(spec.template_id)

    if tid in (TemplateId.PUT_IN_CONTAINER, TemplateId.FOLLOW_ORDER):
        flags = subgoal_flags(state, spec)
        for i, done in enumerate(flags):
            if not done:
                obj = state.find(params.targets[i])
                container = state.find(params.containers[params.target_containers[i]])
                return Action(skill=Skill.PICK_PLACE, p_initial=obj.pos, p_target=container.pos)

    if tid == TemplateId.PACK_KIND:
        box = _box(state)
        for obj in state.objects:
            if obj.kind == params.pack_kind and not _in_box(obj.pos, box.pos):
                return Action(skill=Skill.PICK_PLACE, p_initial=obj.pos, p_target=_free_box_slot(state, box.pos))

    if tid == TemplateId.REARRANGE_TO_GOAL:
        for target, goal in zip(params.targets, params.goal_positions):
            obj = state.find(target)
            if obj is not None and math.dist(obj.pos, goal) > GOAL_TOLERANCE:
                return Action(skill=Skill.PICK_PLACE, p_initial=obj.pos, p_target=goal)
        for obj in state.objects:
            if obj.is_marker:
                x, y = obj.pos
                return Action(
                    skill=Skill.WIPE,
                    p_initial=_clamp((x - WIPE_HALF_LENGTH, y)),
                    p_target=_clamp((x + WIPE_HALF_LENGTH, y)),
                )

    raise ExpertFailureError(f"no expert move for unsatisfied {tid.value} task")
