"""Teacher-forced multi-turn training of the scene-action model."""

from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence
import math
import time

import numpy as np
from pydantic import BaseModel

from config.run_config import LossConfig, ModelConfig, TrainConfig
from core.align_loss import JointLoss, StepPrediction, StepTarget, gather_scene_slots, joint_loss
from core.dataset import Dataset, SplitSide, generate_dataset, load_dataset, make_split
from core.dialogue import DialogueSequence, serialize_dialogue, split_dialogues
from core.scene_codec import Vocabulary, build_vocabulary
from services import autodiff as ad
from services.actllm_model import ModelParams, SceneActionModel, init_params, lm_forward, policy_forward, save_checkpoint
from services.optimizer import AdamW
from utils.helpers import append_jsonl, log, progress, write_json

# frame index -> encoded patches of the frozen encoder
FrameEncoder = Callable[[int], np.ndarray]


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path


class TrainingExample(BaseModel):
    dialogue: DialogueSequence
    targets: List[StepTarget]


class StepMetrics(BaseModel):
    step: int
    scene_loss: float
    action_loss: float
    total: float
    grad_norm: float
    lr: float
    wall_ms: float


class TrainResult(BaseModel):
    checkpoint: str
    metrics_path: str
    steps: int
    final: Optional[StepMetrics] = None


def build_examples(dataset: Dataset, vocab: Vocabulary, config: TrainConfig) -> List[TrainingExample]:
    model_config = config.model_config()
    examples = []
    for episode in dataset.episodes:
        if config.no_multi_turn:
            dialogues = split_dialogues(episode, vocab, model_config.max_context, config.no_future_state, model_config.n_patches)
        else:
            dialogues = [serialize_dialogue(
                episode, vocab, model_config.max_context, config.no_future_state, n_image_tokens=model_config.n_patches,
            )]
        for dialogue in dialogues:
            targets = [
                StepTarget(state=episode.steps[t.step].state, next_state=episode.steps[t.step].next_state, action=episode.steps[t.step].action)
                for t in dialogue.turns
            ]
            examples.append(TrainingExample(dialogue=dialogue, targets=targets))
    return examples


def forward_dialogue(
    params: ModelParams,
    config: ModelConfig,
    dialogue: DialogueSequence,
    vocab: Vocabulary,
    encode_frame: FrameEncoder,
) -> List[StepPrediction]:
    """One causal pass over the whole dialogue; per-turn slot logits and policy logits"""
    visual = [(slot.start, encode_frame(slot.frame)) for slot in dialogue.images]
    logits, hidden = lm_forward(params, config, dialogue.ids, visual)

    predictions = []
    for turn in dialogue.turns:
        current = gather_scene_slots(logits, turn.current.seq, turn.current.start, vocab)
        nxt = gather_scene_slots(logits, turn.next.seq, turn.next.start, vocab) if turn.next is not None else None
        positions = turn.description_positions()
        if turn.next is None:
            # without a predicted next description the current one stands in for it
            positions = positions + positions
        skill, coords = policy_forward(params, hidden[np.array(positions)])
        predictions.append(StepPrediction(current=current, next=nxt, skill_logits=skill, coord_logits=coords))
    return predictions


def example_loss(
    params: ModelParams,
    config: ModelConfig,
    example: TrainingExample,
    vocab: Vocabulary,
    encode_frame: FrameEncoder,
    loss_config: Optional[LossConfig] = None,
) -> JointLoss:
    predictions = forward_dialogue(params, config, example.dialogue, vocab, encode_frame)
    return joint_loss(predictions, example.targets, vocab, loss_config)


def _param_norms(params: ModelParams) -> Dict[str, float]:
    return {name: float(np.linalg.norm(t.data)) for name, t in params.items()}


def _assert_frozen(params: ModelParams):
    touched = [name for name, t in params.frozen() if t.grad is not None]
    if touched:
        raise RuntimeError(f"frozen tensors received gradients: {touched}")


def train_step(
    batch: Sequence[TrainingExample],
    params: ModelParams,
    opt: AdamW,
    model_config: ModelConfig,
    vocab: Vocabulary,
    encode_frame: FrameEncoder,
    loss_config: Optional[LossConfig] = None,
    dump_dir: Optional[Path] = None,
) -> StepMetrics:
    """Mean joint loss over ``batch``, backward per sequence, one clipped AdamW update"""
    if not batch:
        raise ValueError("empty batch")
    started = time.perf_counter()
    opt.zero_grad()

    scene_total = action_total = 0.0
    per_sequence = []
    scale = 1.0 / len(batch)
    for example in batch:
        loss = example_loss(params, model_config, example, vocab, encode_frame, loss_config)
        total = float(loss.total.data)
        per_sequence.append({"episode_id": example.dialogue.episode_id, "total": total})
        if not math.isfinite(total):
            dump = None
            if dump_dir is not None:
                dump = write_json(Path(dump_dir) / "nonfinite_dump.json", {
                    "step": opt.state.step + 1,
                    "per_sequence": per_sequence,
                    "param_norms": _param_norms(params),
                })
            raise NonFiniteLossError(f"non-finite loss at step {opt.state.step + 1}", dump)
        ad.backward(loss.total * scale)
        scene_total += float(loss.scene.data) * scale
        action_total += float(loss.action.data) * scale

    _assert_frozen(params)
    grad_norm, lr = opt.step()
    return StepMetrics(
        step=opt.state.step,
        scene_loss=scene_total,
        action_loss=action_total,
        total=scene_total + action_total,
        grad_norm=grad_norm,
        lr=lr,
        wall_ms=round((time.perf_counter() - started) * 1000.0, 3),
    )


def _dataset_for(config: TrainConfig) -> Dataset:
    if config.dataset_dir:
        return load_dataset(Path(config.dataset_dir))
    split = make_split(config.level, config.templates)
    return generate_dataset(split, config.episodes, config.seed, SplitSide.TRAIN)


def train(config: TrainConfig, dataset: Optional[Dataset] = None, out_dir: Optional[Path] = None) -> TrainResult:
    out_dir = Path(out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset or _dataset_for(config)
    vocab = build_vocabulary()
    model_config = config.model_config()
    loss_config = config.loss_config()
    training = {"no_future_state": config.no_future_state, "no_multi_turn": config.no_multi_turn, "seed": config.seed}

    with ad.precision(np.dtype(model_config.dtype).type):
        params = init_params(model_config, vocab, config.seed)
        encoder = SceneActionModel(params, model_config, vocab, visual_cache_size=None)

        def encode_frame(frame: int) -> np.ndarray:
            return encoder.visual_tokens(dataset.frame(frame))

        examples = build_examples(dataset, vocab, config)
        batches_per_epoch = math.ceil(len(examples) / config.batch_size)
        total_steps = config.epochs * batches_per_epoch
        if config.max_steps is not None:
            total_steps = min(total_steps, config.max_steps)
        opt = AdamW(params.trainable(), config.optim_config(total_steps))

        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("", encoding="utf-8")
        log(f"🏋️ Training on {len(examples)} dialogues, {params.n_trainable()} trainable values, {total_steps} steps")

        last: Optional[StepMetrics] = None
        with progress(total_steps, "train") as bar:
            for epoch in range(config.epochs):
                order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(examples))
                for b in range(batches_per_epoch):
                    if opt.state.step >= total_steps:
                        break
                    batch = [examples[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
                    last = train_step(batch, params, opt, model_config, vocab, encode_frame, loss_config, dump_dir=out_dir)
                    append_jsonl(metrics_path, last.dict())
                    bar.update()
                    if config.checkpoint_every and last.step % config.checkpoint_every == 0:
                        save_checkpoint(params, model_config, vocab, out_dir / f"checkpoint_step{last.step}", training)
                if last is not None:
                    log(f"📊 epoch {epoch + 1}/{config.epochs}: total={last.total:.4f} scene={last.scene_loss:.4f} action={last.action_loss:.4f}")

        checkpoint = save_checkpoint(params, model_config, vocab, out_dir / "checkpoint", training)
    log(f"✅ Training finished after {opt.state.step} steps")
    return TrainResult(checkpoint=str(checkpoint), metrics_path=str(metrics_path), steps=opt.state.step, final=last)
