# test_align_loss.py

from itertools import permutations

import numpy as np

from config.run_config import LossConfig
from core.align_loss import (
    PredictedSlot, SceneSlots, StepPrediction, StepTarget, StreamLengthError, action_loss, cross_entropy,
    description_f1, focal_loss, gather_scene_slots, hungarian, joint_loss, scene_loss,
)
from core.scene_codec import N_BINS, SceneObject, SceneState, build_vocabulary, serialize_scene
from core.tabletop import Action, Skill
from services import autodiff as ad
from services.autodiff import Tensor


def _brute_force(cost: np.ndarray) -> float:
    m, n = cost.shape
    if m <= n:
        return min(sum(cost[r, c] for r, c in zip(range(m), cols)) for cols in permutations(range(n), m))
    return min(sum(cost[r, c] for c, r in zip(range(n), rows)) for rows in permutations(range(m), n))


def test_hungarian_matches_brute_force():
    print("🧪 Testing Hungarian assignment against brute force")
    rng = np.random.default_rng(0)
    for trial in range(500):
        m, n = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        cost = rng.integers(0, 20, size=(m, n)).astype(np.float64) if trial % 2 else rng.uniform(0, 10, size=(m, n))
        result = hungarian(cost)
        assert abs(result.total_cost - _brute_force(cost)) <= 1e-9, (cost, result)
        assert len(result.assignment) == min(m, n)
        assert len(set(result.assignment.values())) == len(result.assignment)
        assert sorted(result.unmatched_predictions + list(result.assignment.values())) == list(range(n))
    print("✅ 500 random matrices up to 6x6 agree\n")


def test_hungarian_ties_are_lexicographic():
    result = hungarian(np.zeros((3, 3)))
    assert result.assignment == {0: 0, 1: 1, 2: 2}
    result = hungarian(np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]]))
    # row 0 takes column 0, row 1 the free zero
    assert result.assignment == {0: 0, 1: 2} and result.unmatched_predictions == [1]
    empty = hungarian(np.zeros((0, 3)))
    assert empty.assignment == {} and empty.unmatched_predictions == [0, 1, 2]


def test_focal_gamma_zero_is_cross_entropy():
    print("🧪 Testing focal(gamma=0, alpha=1) == cross-entropy")
    rng = np.random.default_rng(1)
    worst = 0.0
    with ad.precision(np.float64):
        for _ in range(1000):
            logits = Tensor(rng.normal(0, 3, size=int(rng.integers(2, 12))))
            target = int(rng.integers(logits.shape[0]))
            a = float(focal_loss(logits, target, alpha=1.0, gamma=0.0).data)
            b = float(cross_entropy(logits, target).data)
            worst = max(worst, abs(a - b))
    assert worst <= 1e-6
    # confident correct predictions are down-weighted
    logits = Tensor(np.array([4.0, 0.0, 0.0]))
    assert float(focal_loss(logits, 0, 1.0, 2.0).data) < float(cross_entropy(logits, 0).data)
    print(f"   worst difference {worst:.2e}")
    print("✅ Focal identity OK\n")


def _random_slots(rng, n: int) -> SceneSlots:
    vocab = build_vocabulary()
    slots = [PredictedSlot(
        decision=Tensor(rng.normal(size=2)),
        kind=Tensor(rng.normal(size=len(vocab.kinds))),
        color=Tensor(rng.normal(size=len(vocab.colors))),
        x=Tensor(rng.normal(size=N_BINS)),
        y=Tensor(rng.normal(size=N_BINS)),
    ) for _ in range(n)]
    return SceneSlots(slots=slots, terminal=Tensor(rng.normal(size=2)))


def _random_scene(rng, n: int) -> SceneState:
    vocab = build_vocabulary()
    return SceneState(objects=[
        SceneObject(
            kind=vocab.kinds[int(rng.integers(len(vocab.kinds)))],
            color=vocab.colors[int(rng.integers(len(vocab.colors)))],
            pos=(float(rng.uniform()), float(rng.uniform())),
        ) for _ in range(n)
    ])


def test_scene_loss_permutation_invariant():
    print("🧪 Testing set-loss order invariance")
    vocab = build_vocabulary()
    rng = np.random.default_rng(2)
    worst = 0.0
    with ad.precision(np.float64):
        for _ in range(200):
            pred = _random_slots(rng, int(rng.integers(0, 6)))
            gt = _random_scene(rng, int(rng.integers(0, 6)))
            shuffled = SceneState(objects=[gt.objects[i] for i in rng.permutation(len(gt.objects))])
            a = float(scene_loss(pred, gt, vocab).data)
            b = float(scene_loss(pred, shuffled, vocab).data)
            assert np.isfinite(a)
            worst = max(worst, abs(a - b))
    assert worst <= 1e-6
    print(f"   worst change {worst:.2e}")
    print("✅ Set loss order-invariant\n")


def test_scene_loss_near_zero_for_confident_match():
    vocab = build_vocabulary()
    gt = SceneState(objects=[
        SceneObject(kind="cube", color="red", pos=(0.2, 0.3)),
        SceneObject(kind="bowl", color="blue", pos=(0.7, 0.6)),
    ])
    seq = serialize_scene(gt, vocab)
    # logits that put all mass on the serialized tokens, read back through the slot gatherer
    with ad.precision(np.float64):
        logits = np.zeros((len(seq) + 1, len(vocab)))
        for p, token in enumerate(seq.ids):
            logits[p, token] = 60.0
        slots = gather_scene_slots(Tensor(logits), seq, offset=1, vocab=vocab)
        assert len(slots.slots) == 2 and slots.terminal is not None
        loss = float(scene_loss(slots, gt, vocab, LossConfig()).data)
    assert 0.0 <= loss < 1e-6


def test_scene_loss_penalizes_extra_slots():
    vocab = build_vocabulary()
    rng = np.random.default_rng(3)
    with ad.precision(np.float64):
        slots = _random_slots(rng, 4)
        for slot in slots.slots:
            slot.decision = Tensor(np.array([3.0, -3.0]))
        # with nothing on the table every slot is unmatched and pays an END term
        two = float(scene_loss(SceneSlots(slots=slots.slots[:2], terminal=slots.terminal), SceneState(), vocab).data)
        four = float(scene_loss(slots, SceneState(), vocab).data)
        empty = scene_loss(SceneSlots(), SceneState(), vocab)
    assert four > two > 0.0
    assert float(empty.data) == 0.0


def _action_logits(rng):
    return Tensor(rng.normal(size=3)), Tensor(rng.normal(size=(4, N_BINS)))


def test_action_loss_value():
    with ad.precision(np.float64):
        skill, coords = Tensor(np.zeros(3)), Tensor(np.zeros((4, N_BINS)))
        gt = Action(skill=Skill.PUSH, p_initial=(0.1, 0.2), p_target=(0.3, 0.4))
        value = float(action_loss(skill, coords, gt).data)
    assert abs(value - (np.log(3) + 4 * np.log(N_BINS))) < 1e-9


def test_joint_loss_sums_steps():
    """Per-trajectory objective is the plain sum of per-step scene and action terms"""
    print("🧪 Testing joint loss composition")
    vocab = build_vocabulary()
    rng = np.random.default_rng(4)
    with ad.precision(np.float64):
        preds, targets = [], []
        for _ in range(2):
            skill, coords = _action_logits(rng)
            preds.append(StepPrediction(current=_random_slots(rng, 3), next=_random_slots(rng, 3), skill_logits=skill, coord_logits=coords))
            targets.append(StepTarget(
                state=_random_scene(rng, 3), next_state=_random_scene(rng, 3),
                action=Action(skill=Skill.PICK_PLACE, p_initial=(0.25, 0.5), p_target=(0.75, 0.5)),
            ))
        total = float(joint_loss(preds, targets, vocab).total.data)
        one_step = [float(joint_loss([p], [t], vocab).total.data) for p, t in zip(preds, targets)]
        manual = sum(
            float(scene_loss(p.current, t.state, vocab).data) + float(scene_loss(p.next, t.next_state, vocab).data)
            + float(action_loss(p.skill_logits, p.coord_logits, t.action).data)
            for p, t in zip(preds, targets)
        )
    assert abs(total - sum(one_step)) <= 1e-9 * max(1.0, abs(total))
    assert abs(total - manual) <= 1e-9 * max(1.0, abs(total))

    without_next = [p.copy(update={"next": None}) for p in preds]
    with ad.precision(np.float64):
        reduced = float(joint_loss(without_next, targets, vocab).total.data)
    assert reduced < total

    try:
        joint_loss(preds[:1], targets, vocab)
        assert False
    except StreamLengthError:
        pass
    print(f"   T=2 total {total:.4f} = {one_step[0]:.4f} + {one_step[1]:.4f}")
    print("✅ Joint loss OK\n")


def test_description_f1():
    a = SceneState(objects=[
        SceneObject(kind="cube", color="red", pos=(0.2, 0.2)),
        SceneObject(kind="ring", color="green", pos=(0.8, 0.8)),
    ])
    assert description_f1(a, a) == 1.0
    shifted = SceneState(objects=[
        SceneObject(kind="cube", color="red", pos=(0.25, 0.25)),  # L1 error 0.1, still correct
        SceneObject(kind="ring", color="blue", pos=(0.8, 0.8)),
    ])
    assert abs(description_f1(shifted, a) - 0.5) < 1e-12
    assert description_f1(SceneState(), a) == 0.0
    assert description_f1(SceneState(), SceneState()) == 1.0
    extra = SceneState(objects=a.objects + [SceneObject(kind="star", color="blue", pos=(0.5, 0.5))])
    assert abs(description_f1(extra, a) - 0.8) < 1e-12


if __name__ == "__main__":
    test_hungarian_matches_brute_force()
    test_hungarian_ties_are_lexicographic()
    test_focal_gamma_zero_is_cross_entropy()
    test_scene_loss_permutation_invariant()
    test_scene_loss_near_zero_for_confident_match()
    test_scene_loss_penalizes_extra_slots()
    test_action_loss_value()
    test_joint_loss_sums_steps()
    test_description_f1()
    print("✅ All alignment loss tests passed!")
