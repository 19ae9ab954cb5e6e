from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from core.align_loss import description_f1
from core.dialogue import DialogueSequence
from core.scene_codec import (
    MAX_OBJECTS, OPEN_SCENE, SceneState, TokenSeq, Vocabulary, build_vocabulary, decode_scene_tokens, parse_scene,
)
from core.tabletop import (
    Action, SimState, SubgoalTracker, TaskSpec, TemplateId, count_subgoals, goal_state, is_success, new_scene, render, step,
)
from services.actllm_model import decode_action
from utils.helpers import log

# OPEN + per object (CONT, COMMA, OPEN_OBJECT, kind, sep, color, sep, x, COMMA, y, CLOSE) + END + CLOSE
MAX_SCENE_TOKENS = 3 + 11 * MAX_OBJECTS

Images = Sequence[Tuple[int, np.ndarray]]


class LeakageError(RuntimeError):
    pass


class RolloutModel(Protocol):
    """What a rollout needs from a model: next-token logits and policy logits over a dialogue"""

    def next_token_logits(self, ids: Sequence[int], images: Images) -> np.ndarray: ...

    def policy_logits(self, ids: Sequence[int], images: Images, description_positions: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]: ...


class TurnRecord(BaseModel):
    frame: int
    current: TokenSeq
    next: Optional[TokenSeq] = None
    action: Action


class RolloutAgent:
    """Holds the running inference dialogue. Only observations, the instruction
    and the model's own generations ever enter the context."""

    def __init__(self, model: RolloutModel, vocab: Vocabulary, spec: TaskSpec, initial: SimState):
        self.model = model
        self.vocab = vocab
        self.spec = spec
        self.n_image_tokens = getattr(model, "n_image_tokens", 64)
        self.max_context = getattr(model, "max_context", 1024)
        # models trained without next-scene descriptions only describe the present
        self.n_scenes = 1 if getattr(model, "no_future_state", False) else 2
        self.frames: List[np.ndarray] = []
        self.turns: List[TurnRecord] = []
        self.generated: List[TokenSeq] = []
        self._initial = initial
        self._goal_frame: Optional[int] = None
        self.dialogue = DialogueSequence.start(vocab, n_image_tokens=self.n_image_tokens)

    def _resolve_image(self, ref: str) -> int:
        if ref != "goal":
            raise KeyError(f"unknown image reference {ref!r}")
        if self._goal_frame is None:
            # the goal picture is part of the instruction, rendered like any observation
            self._goal_frame = self._add_frame(render(goal_state(self._initial, self.spec)))
        return self._goal_frame

    def _add_frame(self, obs: np.ndarray) -> int:
        self.frames.append(obs)
        return len(self.frames) - 1

    def _images(self) -> List[Tuple[int, np.ndarray]]:
        return [(slot.start, self.frames[slot.frame]) for slot in self.dialogue.images]

    def _user_turn_length(self) -> int:
        sample_turn = DialogueSequence.start(self.vocab, n_image_tokens=self.n_image_tokens)
        sample_turn.add_user_turn(self.vocab, 0, self.spec.instruction, lambda ref: 0)
        return len(sample_turn) - 1

    def _rebuild(self, keep: int):
        """Restart the dialogue from the last ``keep`` completed turns"""
        self.dialogue = DialogueSequence.start(self.vocab, n_image_tokens=self.n_image_tokens)
        kept = self.turns[len(self.turns) - keep:] if keep else []
        for record in kept:
            self.dialogue.add_user_turn(self.vocab, record.frame, self.spec.instruction, self._resolve_image)
            self.dialogue.add_description(record.current)
            if record.next is not None:
                self.dialogue.add_description(record.next, is_next=True)
            self.dialogue.close_turn(self.vocab, record.action)
        self.generated = [s for r in kept for s in (r.current, r.next) if s is not None]

    def _make_room(self):
        needed = self._user_turn_length() + self.n_scenes * MAX_SCENE_TOKENS + 1
        keep = len(self.turns)
        while keep > 0 and len(self.dialogue) + needed > self.max_context:
            keep -= 1
            self._rebuild(keep)
        if len(self.dialogue) + needed > self.max_context:
            log(f"⚠️ one turn may need {needed} tokens; max_context is {self.max_context}")

    def act(self, obs: np.ndarray) -> Tuple[Action, SceneState, Optional[SceneState]]:
        self._make_room()
        frame = self._add_frame(obs)
        self.dialogue.add_user_turn(self.vocab, frame, self.spec.instruction, self._resolve_image)

        images = self._images()
        source = lambda context: self.model.next_token_logits(context, images)
        scenes = decode_scene_tokens(source, self.n_scenes, self.vocab, prefix=self.dialogue.ids)
        current, nxt = scenes[0], (scenes[1] if len(scenes) > 1 else None)
        self.generated.extend(scenes)
        self.dialogue.add_description(current)
        if nxt is not None:
            self.dialogue.add_description(nxt, is_next=True)
        self.dialogue.close_turn(self.vocab)

        turn = self.dialogue.turns[-1]
        positions = turn.description_positions()
        if nxt is None:
            positions = positions + positions
        skill, coords = self.model.policy_logits(self.dialogue.ids, images, positions)
        action = decode_action(skill, coords)
        turn.action = action
        self.turns.append(TurnRecord(frame=frame, current=current, next=nxt, action=action))
        return action, parse_scene(current, self.vocab), (parse_scene(nxt, self.vocab) if nxt is not None else None)

    def assert_no_leakage(self):
        """Every description in the context is one this agent decoded, and nothing else opens a scene"""
        spans = [s for t in self.dialogue.turns for s in (t.current, t.next) if s is not None]
        if [s.seq.ids for s in spans] != [g.ids for g in self.generated]:
            raise LeakageError("context descriptions differ from the model's own generations")
        open_id = self.vocab[OPEN_SCENE]
        starts = {s.start for s in spans}
        stray = [i for i, tok in enumerate(self.dialogue.ids) if tok == open_id and i not in starts]
        if stray:
            raise LeakageError(f"scene tokens outside generated spans at positions {stray}")


class StepRecord(BaseModel):
    step: int
    current: SceneState
    next: Optional[SceneState] = None
    action: Action
    f1_current: float
    f1_next: Optional[float] = None


class EpisodeResult(BaseModel):
    template_id: str
    seed: int
    success: bool
    steps_used: int
    max_steps: int
    subgoals: int
    records: List[StepRecord] = Field(default_factory=list)

    @property
    def mean_f1(self) -> float:
        scores = [r.f1_current for r in self.records] + [r.f1_next for r in self.records if r.f1_next is not None]
        return float(np.mean(scores)) if scores else 0.0


def default_max_steps(n_subgoals: int) -> int:
    return 2 * n_subgoals + 2


def rollout(
    model: RolloutModel,
    spec: TaskSpec,
    seed: int,
    vocab: Optional[Vocabulary] = None,
    max_steps: Optional[int] = None,
    observer: Optional[Callable[[SimState, TaskSpec], None]] = None,
) -> EpisodeResult:
    """Closed loop: observe, describe now and next, act, step; until success or budget"""
    vocab = vocab or build_vocabulary()
    state = new_scene(spec, seed)
    subgoals = count_subgoals(state, spec)
    max_steps = default_max_steps(subgoals) if max_steps is None else max_steps
    tracker = SubgoalTracker(spec, state)
    agent = RolloutAgent(model, vocab, spec, state)

    records: List[StepRecord] = []
    while len(records) < max_steps and not is_success(state, spec, tracker):
        if observer is not None:
            observer(state, spec)
        action, current, nxt = agent.act(render(state))
        agent.assert_no_leakage()
        next_state = step(state, action)
        tracker.update(next_state)
        records.append(StepRecord(
            step=len(records),
            current=current,
            next=nxt,
            action=action,
            f1_current=description_f1(current, state.to_scene()),
            f1_next=description_f1(nxt, next_state.to_scene()) if nxt is not None else None,
        ))
        state = next_state

    return EpisodeResult(
        template_id=TemplateId(spec.template_id).value,
        seed=seed,
        success=is_success(state, spec, tracker),
        steps_used=len(records),
        max_steps=max_steps,
        subgoals=subgoals,
        records=records,
    )
