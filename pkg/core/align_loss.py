"""Set-matching scene loss, action loss and their per-trajectory sum."""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from config.run_config import LossConfig
from core.scene_codec import END, SceneState, SlotRole, TokenSeq, Vocabulary, bin_centers, coord_bin
from core.tabletop import Action, SKILLS
from services import autodiff as ad
from services.autodiff import Tensor

DECISION_CONT, DECISION_END = 0, 1
MATCH_TOLERANCE = 1e-9
F1_COORD_THRESHOLD = 0.1
NONFINITE_COST = 1e6


class StreamLengthError(ValueError):
    pass


class _TensorModel(BaseModel):
    class Config:
        arbitrary_types_allowed = True


# ---------------------------------------------------------------------------
# Scalar losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target: int) -> Tensor:
    return -ad.log_softmax(logits)[target]


def focal_loss(logits: Tensor, target: int, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """-alpha (1 - p)^gamma log p with p the target's softmax probability"""
    log_p = ad.log_softmax(logits)[target]
    if gamma == 0:
        return log_p * (-alpha)
    p = ad.exp(log_p)
    return ((1.0 - p) ** gamma) * log_p * (-alpha)


# ---------------------------------------------------------------------------
# Slots
# ---------------------------------------------------------------------------

class PredictedSlot(_TensorModel):
    """Class-restricted logits read at one decoded object's content positions"""

    decision: Tensor
    kind: Tensor
    color: Tensor
    x: Tensor
    y: Tensor


class SceneSlots(_TensorModel):
    slots: List[PredictedSlot] = Field(default_factory=list)
    # closing CONT/END decision; absent when the list was closed at capacity
    terminal: Optional[Tensor] = None


def gather_scene_slots(logits: Tensor, seq: TokenSeq, offset: int, vocab: Vocabulary) -> SceneSlots:
    """Read the logits that predict each content token of ``seq`` placed at ``offset``.

    Row ``p - 1`` of ``logits`` predicts the token at context position ``p``.
    """
    if offset < 1:
        raise ValueError("a scene description needs at least one preceding token")

    def restricted(pos: int, role: SlotRole) -> Tensor:
        return logits[offset + pos - 1, vocab.legal_ids(role)]

    slots: List[PredictedSlot] = []
    terminal = None
    current: Dict[str, Tensor] = {}
    for pos, (token, role) in enumerate(zip(seq.ids, seq.roles)):
        if role == SlotRole.FIXED:
            continue
        if role == SlotRole.DECISION:
            if token == vocab[END]:
                terminal = restricted(pos, role)
            else:
                current = {"decision": restricted(pos, role)}
        else:
            current[role.value] = restricted(pos, role)
            if role == SlotRole.Y:
                slots.append(PredictedSlot(**current))
                current = {}
    return SceneSlots(slots=slots, terminal=terminal)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

class MatchResult(BaseModel):
    assignment: Dict[int, int]
    unmatched_predictions: List[int]
    total_cost: float


def pair_cost(slot: PredictedSlot, gt, vocab: Vocabulary, lambda_cls: float = 1.0, lambda_coord: float = 5.0) -> float:
    """lambda_cls (2 - p_kind - p_color) + lambda_coord L1(expected center, gt center)"""

    def probs(t: Tensor) -> np.ndarray:
        z = t.data.astype(np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()

    centers = bin_centers()
    p_kind = probs(slot.kind)[vocab.kinds.index(gt.kind)]
    p_color = probs(slot.color)[vocab.colors.index(gt.color)]
    x_hat = float(probs(slot.x) @ centers)
    y_hat = float(probs(slot.y) @ centers)
    return float(lambda_cls * (2.0 - p_kind - p_color) + lambda_coord * (abs(x_hat - gt.pos[0]) + abs(y_hat - gt.pos[1])))


def _solve(cost: np.ndarray) -> Tuple[float, Dict[int, int]]:
    """Minimum-cost assignment of min(rows, cols) pairs (shortest augmenting path with potentials)"""
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return 0.0, {}
    transposed = rows > cols
    a = cost.T if transposed else cost
    n, m = a.shape

    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0, delta, j1 = p[j0], inf, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j], way[j] = cur, j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    assignment = {p[j] - 1: j - 1 for j in range(1, m + 1) if p[j] != 0}
    if transposed:
        assignment = {c: r for r, c in assignment.items()}
    total = 0.0
    for r in sorted(assignment):
        total += float(cost[r, assignment[r]])
    return total, assignment


def hungarian(cost) -> MatchResult:
    """Optimal injective matching of rows (ground truth) to columns (predictions).

    Among optimal matchings the lexicographically smallest one is returned:
    rows are fixed in order, each to the lowest column that still admits an
    optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    m, n = cost.shape
    if m == 0 or n == 0:
        return MatchResult(assignment={}, unmatched_predictions=list(range(n)), total_cost=0.0)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")

    best, _ = _solve(cost)
    tol = MATCH_TOLERANCE * max(1.0, abs(best))
    need = min(m, n)
    assignment: Dict[int, int] = {}
    cols_left = list(range(n))
    spent = 0.0

    for r in range(m):
        if len(assignment) == need:
            break
        later = list(range(r + 1, m))
        options: List[Optional[int]] = list(cols_left)
        if len(later) >= need - len(assignment):
            options.append(None)
        for c in options:
            if c is None:
                rest, _ = _solve(cost[np.ix_(later, cols_left)])
                if spent + rest <= best + tol:
                    break
                continue
            others = [x for x in cols_left if x != c]
            rest, _ = _solve(cost[np.ix_(later, others)]) if later and others else (0.0, {})
            if spent + cost[r, c] + rest <= best + tol:
                assignment[r] = c
                cols_left = others
                spent += cost[r, c]
                break

    total = 0.0
    for r in sorted(assignment):
        total += float(cost[r, assignment[r]])
    matched = set(assignment.values())
    return MatchResult(
        assignment=assignment,
        unmatched_predictions=[c for c in range(n) if c not in matched],
        total_cost=total,
    )


# ---------------------------------------------------------------------------
# Scene and action losses
# ---------------------------------------------------------------------------

def _zero() -> Tensor:
    return Tensor(np.zeros((), dtype=ad.default_dtype()))


def _total(terms: List[Tensor]) -> Tensor:
    if not terms:
        return _zero()
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def scene_loss(pred: SceneSlots, gt: SceneState, vocab: Vocabulary, config: Optional[LossConfig] = None) -> Tensor:
    config = config or LossConfig()
    objects = gt.objects
    slots = pred.slots

    cost = np.array([
        [pair_cost(s, g, vocab, config.lambda_cls, config.lambda_coord) for s in slots] for g in objects
    ]).reshape(len(objects), len(slots))
    # non-finite logits still get a matching; the loss itself stays non-finite
    cost = np.nan_to_num(cost, nan=NONFINITE_COST, posinf=NONFINITE_COST, neginf=NONFINITE_COST)
    match = hungarian(cost)

    terms: List[Tensor] = []
    for g_index in sorted(match.assignment):
        slot = slots[match.assignment[g_index]]
        g = objects[g_index]
        terms.append(focal_loss(slot.kind, vocab.kinds.index(g.kind), config.focal_alpha, config.focal_gamma))
        terms.append(focal_loss(slot.color, vocab.colors.index(g.color), config.focal_alpha, config.focal_gamma))
        terms.append(cross_entropy(slot.x, coord_bin(g.pos[0])))
        terms.append(cross_entropy(slot.y, coord_bin(g.pos[1])))
        terms.append(cross_entropy(slot.decision, DECISION_CONT))
    for s_index in match.unmatched_predictions:
        terms.append(focal_loss(slots[s_index].decision, DECISION_END, config.focal_alpha, config.focal_gamma))
    if pred.terminal is not None:
        # the list should close exactly when every object has a slot
        want = DECISION_END if len(slots) >= len(objects) else DECISION_CONT
        terms.append(cross_entropy(pred.terminal, want))

    return _total(terms) * (1.0 / max(1, len(objects)))


def action_loss(skill_logits: Tensor, coord_logits: Tensor, gt: Action) -> Tensor:
    bins = [coord_bin(gt.p_initial[0]), coord_bin(gt.p_initial[1]), coord_bin(gt.p_target[0]), coord_bin(gt.p_target[1])]
    coord_terms = ad.log_softmax(coord_logits)[np.arange(4), np.array(bins)]
    return cross_entropy(skill_logits, SKILLS.index(gt.skill)) - coord_terms.sum()


class StepPrediction(_TensorModel):
    current: SceneSlots
    next: Optional[SceneSlots] = None
    skill_logits: Tensor
    coord_logits: Tensor


class StepTarget(BaseModel):
    state: SceneState
    next_state: SceneState
    action: Action


class JointLoss(_TensorModel):
    total: Tensor
    scene: Tensor
    action: Tensor


def joint_loss(
    predictions: Sequence[StepPrediction],
    targets: Sequence[StepTarget],
    vocab: Vocabulary,
    config: Optional[LossConfig] = None,
) -> JointLoss:
    """Sum over steps of scene(current) + scene(next) + action; a missing next prediction drops its term"""
    if len(predictions) != len(targets):
        raise StreamLengthError(f"{len(predictions)} predictions for {len(targets)} steps")
    scene_terms: List[Tensor] = []
    action_terms: List[Tensor] = []
    for pred, target in zip(predictions, targets):
        scene_terms.append(scene_loss(pred.current, target.state, vocab, config))
        if pred.next is not None:
            scene_terms.append(scene_loss(pred.next, target.next_state, vocab, config))
        action_terms.append(action_loss(pred.skill_logits, pred.coord_logits, target.action))
    scene, action = _total(scene_terms), _total(action_terms)
    return JointLoss(total=scene + action, scene=scene, action=action)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def description_f1(pred: SceneState, gt: SceneState, threshold: float = F1_COORD_THRESHOLD) -> float:
    """F1 where a matched prediction counts if kind and color agree and L1 center error <= threshold"""
    if not pred.objects and not gt.objects:
        return 1.0
    if not pred.objects or not gt.objects:
        return 0.0

    def correct(p, g) -> bool:
        l1 = abs(p.pos[0] - g.pos[0]) + abs(p.pos[1] - g.pos[1])
        return p.kind == g.kind and p.color == g.color and l1 <= threshold + 1e-12

    hits = np.array([[0.0 if correct(p, g) else 1.0 for p in pred.objects] for g in gt.objects])
    match = hungarian(hits)
    tp = sum(1 for g, p in match.assignment.items() if hits[g, p] == 0.0)
    if tp == 0:
        return 0.0
    precision, recall = tp / len(pred.objects), tp / len(gt.objects)
    return 2 * precision * recall / (precision + recall)
