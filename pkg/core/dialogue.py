from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, Field

from core.dataset import Episode
from core.scene_codec import (
    ACT, BOS, IMG, MODEL, USER, SceneState, TokenSeq, Vocabulary, parse_scene, serialize_scene, tokenize_instruction,
)
from core.tabletop import Action
from services.actllm_model import ContextOverflowError
from utils.helpers import write_json


class ImageSlot(BaseModel):
    start: int
    frame: int  # index into the frame store of whoever built the dialogue


class SceneSpan(BaseModel):
    start: int
    seq: TokenSeq

    @property
    def positions(self) -> List[int]:
        return list(range(self.start, self.start + len(self.seq)))


class DialogueTurn(BaseModel):
    """One user turn (observation + instruction) and the model's answer"""

    step: int
    user_pos: int
    observation: ImageSlot
    instruction_images: List[ImageSlot] = Field(default_factory=list)
    model_pos: Optional[int] = None
    current: Optional[SceneSpan] = None
    next: Optional[SceneSpan] = None
    act_pos: Optional[int] = None
    action: Optional[Action] = None

    @property
    def roles(self) -> List[str]:
        return ["user"] + (["model"] if self.model_pos is not None else [])

    def description_positions(self) -> List[int]:
        """Context positions whose hidden states form E (current then next description)"""
        spans = [s for s in (self.current, self.next) if s is not None]
        return [p for s in spans for p in s.positions]


class DialogueSequence(BaseModel):
    episode_id: int = -1
    n_image_tokens: int = 64
    ids: List[int] = Field(default_factory=list)
    images: List[ImageSlot] = Field(default_factory=list)
    turns: List[DialogueTurn] = Field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def start(cls, vocab: Vocabulary, episode_id: int = -1, n_image_tokens: int = 64) -> "DialogueSequence":
        return cls(episode_id=episode_id, n_image_tokens=n_image_tokens, ids=[vocab[BOS]])

    def _image(self, vocab: Vocabulary, frame: int) -> ImageSlot:
        slot = ImageSlot(start=len(self.ids), frame=frame)
        self.ids.extend([vocab[IMG]] * self.n_image_tokens)
        self.images.append(slot)
        return slot

    def add_user_turn(
        self,
        vocab: Vocabulary,
        observation_frame: int,
        instruction,
        resolve_image: Callable[[str], int],
        step: Optional[int] = None,
    ) -> DialogueTurn:
        """Append ``<user> IMG.. instruction <model>``; image refs resolve to frames via ``resolve_image``"""
        if self.turns and self.turns[-1].act_pos is None:
            raise ValueError("previous model turn is still open")
        turn = DialogueTurn(
            step=len(self.turns) if step is None else step,
            user_pos=len(self.ids),
            observation=ImageSlot(start=len(self.ids) + 1, frame=observation_frame),
        )
        self.ids.append(vocab[USER])
        turn.observation = self._image(vocab, observation_frame)

        words, refs = tokenize_instruction(instruction, vocab, self.n_image_tokens)
        base = len(self.ids)
        self.ids.extend(words)
        for offset, ref in refs:
            slot = ImageSlot(start=base + offset, frame=resolve_image(ref))
            self.images.append(slot)
            turn.instruction_images.append(slot)

        turn.model_pos = len(self.ids)
        self.ids.append(vocab[MODEL])
        self.turns.append(turn)
        return turn

    def add_description(self, seq: TokenSeq, is_next: bool = False) -> SceneSpan:
        turn = self.turns[-1]
        span = SceneSpan(start=len(self.ids), seq=seq)
        self.ids.extend(seq.ids)
        if is_next:
            turn.next = span
        else:
            turn.current = span
        return span

    def close_turn(self, vocab: Vocabulary, action: Optional[Action] = None) -> int:
        turn = self.turns[-1]
        if turn.current is None:
            raise ValueError("model turn closed before describing the scene")
        turn.act_pos = len(self.ids)
        turn.action = action
        self.ids.append(vocab[ACT])
        return turn.act_pos

    def supervision_targets(self, vocab: Vocabulary) -> List[Tuple[SceneState, Optional[SceneState], Optional[Action]]]:
        """Decode every turn's description spans and action target back to domain values"""
        targets = []
        for turn in self.turns:
            current = parse_scene(turn.current.seq, vocab)
            nxt = parse_scene(turn.next.seq, vocab) if turn.next is not None else None
            targets.append((current, nxt, turn.action))
        return targets

    def transcript(self, vocab: Vocabulary) -> List[dict]:
        out = []
        for turn in self.turns:
            out.append({
                "step": turn.step,
                "current": "".join(vocab.text(t) for t in turn.current.seq.ids) if turn.current else None,
                "next": "".join(vocab.text(t) for t in turn.next.seq.ids) if turn.next else None,
                "action": turn.action.dict() if turn.action else None,
            })
        return out

    def save_to_file(self, filepath: Path, vocab: Vocabulary):
        write_json(filepath, {
            "episode_id": self.episode_id,
            "length": len(self.ids),
            "turns": self.transcript(vocab),
        })


def _build(
    episode: Episode,
    vocab: Vocabulary,
    steps: Sequence[int],
    no_future_state: bool,
    n_image_tokens: int,
) -> DialogueSequence:
    dialogue = DialogueSequence.start(vocab, episode.episode_id, n_image_tokens)
    frames = episode.observation_frames()
    for t in steps:
        record = episode.steps[t]
        dialogue.add_user_turn(vocab, frames[t], episode.spec.instruction, episode.image_frame, step=t)
        dialogue.add_description(serialize_scene(record.state, vocab))
        if not no_future_state:
            dialogue.add_description(serialize_scene(record.next_state, vocab), is_next=True)
        dialogue.close_turn(vocab, record.action)
    return dialogue


def serialize_dialogue(
    episode: Episode,
    vocab: Vocabulary,
    max_context: int = 1024,
    no_future_state: bool = False,
    steps: Optional[Sequence[int]] = None,
    n_image_tokens: int = 64,
) -> DialogueSequence:
    """Teacher-forced dialogue over ``steps`` (all by default); oldest turns drop on overflow"""
    steps = list(range(episode.n_steps)) if steps is None else list(steps)
    if not steps:
        raise ValueError(f"episode {episode.episode_id} has no steps to serialize")
    for first in range(len(steps)):
        dialogue = _build(episode, vocab, steps[first:], no_future_state, n_image_tokens)
        if len(dialogue) <= max_context:
            return dialogue
    raise ContextOverflowError(
        f"episode {episode.episode_id}: a single turn needs {len(dialogue)} tokens, max_context is {max_context}"
    )


def split_dialogues(
    episode: Episode,
    vocab: Vocabulary,
    max_context: int = 1024,
    no_future_state: bool = False,
    n_image_tokens: int = 64,
) -> List[DialogueSequence]:
    """One independent single-turn dialogue per step"""
    return [
        serialize_dialogue(episode, vocab, max_context, no_future_state, steps=[t], n_image_tokens=n_image_tokens)
        for t in range(episode.n_steps)
    ]
