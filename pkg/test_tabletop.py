# test_tabletop.py

import math

import numpy as np

from core.catalog import load_catalog
from core.dataset import Level, SplitSide, make_split, sample_episode_spec
from core.tabletop import (
    CONTAINMENT_RADIUS, DONE, PUSH_STEP, Action, ObjectRef, SceneCrowdedError, SimObject, SimState, Skill,
    SubgoalTracker, TaskParams, TaskSpec, TemplateId, build_instruction, count_subgoals, expert_action,
    goal_state, is_success, new_scene, render, sample_task, step,
)


def _put_spec(n_distractors: int = 0) -> TaskSpec:
    params = TaskParams(
        objects=[ObjectRef(kind="cube", color="red")] + [
            ObjectRef(kind="sphere", color=c) for c in ["green", "blue", "yellow", "purple", "orange"][:n_distractors]
        ],
        containers=[ObjectRef(kind="bowl", color="blue")],
        targets=[ObjectRef(kind="cube", color="red")],
        target_containers=[0],
    )
    return TaskSpec(
        template_id=TemplateId.PUT_IN_CONTAINER,
        params=params,
        instruction=build_instruction(TemplateId.PUT_IN_CONTAINER, params),
    )


def test_render_centroid():
    """A lone glyph's pixel centroid sits on its center (pixel-center convention)"""
    print("🧪 Testing render centroid")
    palette = load_catalog().palette
    for pos in [(0.5, 0.5), (0.25, 0.7), (0.81, 0.13)]:
        state = SimState(objects=[SimObject(kind="sphere", color="red", pos=pos)])
        image = render(state)
        assert image.shape == (64, 64, 3) and image.dtype == np.uint8
        rows, cols = np.nonzero(np.all(image == palette["red"], axis=-1))
        cx, cy = (cols + 0.5).mean(), (rows + 0.5).mean()
        assert abs(cx - pos[0] * 64) <= 1.0 and abs(cy - pos[1] * 64) <= 1.0, (pos, cx, cy)
        print(f"   {pos} -> ({cx / 64:.3f}, {cy / 64:.3f})")
    print("✅ Render centroid OK\n")


def test_render_deterministic_and_ordered():
    print("🧪 Testing render determinism and draw order")
    palette = load_catalog().palette
    # a cube drawn on top of a bowl keeps its own color at the shared center
    state = SimState(objects=[
        SimObject(kind="cube", color="red", pos=(0.5, 0.5)),
        SimObject(kind="bowl", color="blue", pos=(0.5, 0.5)),
    ])
    a, b = render(state), render(state)
    assert np.array_equal(a, b)
    assert tuple(a[32, 32]) == tuple(palette["red"])
    assert np.any(np.all(a == palette["blue"], axis=-1))
    print("✅ Render deterministic, containers below objects\n")


def test_primitives():
    print("🧪 Testing pick_place / push / wipe")
    state = SimState(objects=[
        SimObject(kind="cube", color="red", pos=(0.5, 0.5)),
        SimObject(kind="bowl", color="blue", pos=(0.2, 0.2)),
        SimObject(kind="dirt", color="gray", pos=(0.8, 0.8)),
    ])

    moved = step(state, Action(skill=Skill.PICK_PLACE, p_initial=(0.52, 0.49), p_target=(0.2, 0.2)))
    assert moved.objects[0].pos == (0.2, 0.2)
    assert moved.step_count == 1
    print("   pick_place within grasp radius moves the object")

    missed = step(state, Action(skill=Skill.PICK_PLACE, p_initial=(0.7, 0.5), p_target=(0.1, 0.1)))
    assert [o.pos for o in missed.objects] == [o.pos for o in state.objects]
    assert missed.step_count == 1
    print("   pick_place on empty table is a no-op")

    containers = step(state, Action(skill=Skill.PICK_PLACE, p_initial=(0.2, 0.2), p_target=(0.9, 0.9)))
    assert containers.objects[1].pos == (0.2, 0.2)
    print("   containers are not graspable")

    pushed = step(state, Action(skill=Skill.PUSH, p_initial=(0.5, 0.5), p_target=(0.9, 0.5)))
    assert math.isclose(pushed.objects[0].pos[0], 0.5 + PUSH_STEP, abs_tol=1e-12)
    assert math.isclose(pushed.objects[0].pos[1], 0.5, abs_tol=1e-12)
    short = step(state, Action(skill=Skill.PUSH, p_initial=(0.5, 0.5), p_target=(0.53, 0.5)))
    assert math.isclose(short.objects[0].pos[0], 0.53, abs_tol=1e-12)
    print("   push moves at most one step toward the target")

    edge = SimState(objects=[SimObject(kind="cube", color="red", pos=(0.98, 0.5))])
    clamped = step(edge, Action(skill=Skill.PUSH, p_initial=(0.98, 0.5), p_target=(1.0, 0.5)))
    assert clamped.objects[0].pos[0] <= 1.0

    wiped = step(state, Action(skill=Skill.WIPE, p_initial=(0.75, 0.8), p_target=(0.85, 0.8)))
    assert not any(o.kind == "dirt" for o in wiped.objects)
    assert len(wiped.objects) == 2
    kept = step(state, Action(skill=Skill.WIPE, p_initial=(0.1, 0.9), p_target=(0.3, 0.9)))
    assert any(o.kind == "dirt" for o in kept.objects)
    print("✅ Primitives OK\n")


def test_sample_task_unique_pairs():
    print("🧪 Testing task sampling")
    split = make_split("L1")
    pool = split.train_combos
    rng = np.random.default_rng(7)
    for template in TemplateId:
        for _ in range(25):
            spec = sample_task(template, rng, pool, pool)
            keys = [o.key() for o in spec.params.objects]
            assert len(keys) == len(set(keys))
            assert spec.n_scene_objects() <= 8
            if template == TemplateId.PACK_KIND:
                kinds = [o.kind for o in spec.params.objects]
                assert kinds.count(spec.params.pack_kind) == len(spec.params.targets)
            if template == TemplateId.REARRANGE_TO_GOAL:
                assert spec.instruction.image_refs() == ["goal"]
        print(f"   {template.value}: e.g. '{spec.instruction.text()}'")
    print("✅ Task sampling OK\n")


def test_follow_order_instruction_joined():
    params = TaskParams(
        objects=[ObjectRef(kind="cube", color="red"), ObjectRef(kind="ring", color="green")],
        containers=[ObjectRef(kind="bowl", color="blue"), ObjectRef(kind="bowl", color="yellow")],
        targets=[ObjectRef(kind="cube", color="red"), ObjectRef(kind="ring", color="green")],
        target_containers=[0, 1],
    )
    text = build_instruction(TemplateId.FOLLOW_ORDER, params).text()
    assert text == "put the red cube in the blue bowl then put the green ring in the yellow bowl"


def test_new_scene_seeded_and_capacity():
    print("🧪 Testing scene placement")
    spec = _put_spec(n_distractors=3)
    a, b = new_scene(spec, 11), new_scene(spec, 11)
    assert a.dict() == b.dict()
    assert new_scene(spec, 12).dict() != a.dict()
    positions = [o.pos for o in a.objects]
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            assert math.dist(positions[i], positions[j]) >= 0.06
    assert count_subgoals(a, spec) == 1

    crowded = _put_spec(n_distractors=5)
    crowded.params.objects += [ObjectRef(kind="star", color=c) for c in ["red", "green"]]
    try:
        new_scene(crowded, 0)
        assert False, "nine objects must be rejected"
    except ValueError as e:
        assert not isinstance(e, SceneCrowdedError)
        print(f"   capacity rejected: {e}")
    print("✅ Scene placement OK\n")


def test_subgoal_tracker_order():
    print("🧪 Testing ordered sub-goal tracker")
    params = TaskParams(
        objects=[ObjectRef(kind="cube", color="red"), ObjectRef(kind="ring", color="green")],
        containers=[ObjectRef(kind="bowl", color="blue"), ObjectRef(kind="bowl", color="yellow")],
        targets=[ObjectRef(kind="cube", color="red"), ObjectRef(kind="ring", color="green")],
        target_containers=[0, 1],
    )
    spec = TaskSpec(template_id=TemplateId.FOLLOW_ORDER, params=params,
                    instruction=build_instruction(TemplateId.FOLLOW_ORDER, params))
    state = SimState(objects=[
        SimObject(kind="bowl", color="blue", pos=(0.2, 0.2)),
        SimObject(kind="bowl", color="yellow", pos=(0.8, 0.8)),
        SimObject(kind="cube", color="red", pos=(0.5, 0.2)),
        SimObject(kind="ring", color="green", pos=(0.5, 0.8)),
    ])

    tracker = SubgoalTracker(spec, state)
    wrong = step(state, Action(skill=Skill.PICK_PLACE, p_initial=(0.5, 0.8), p_target=(0.8, 0.8)))
    tracker.update(wrong)
    assert tracker.violated
    done = step(wrong, Action(skill=Skill.PICK_PLACE, p_initial=(0.5, 0.2), p_target=(0.2, 0.2)))
    tracker.update(done)
    assert is_success(done, spec) and not is_success(done, spec, tracker)
    print("   out-of-order completion fails the tracker")

    tracker = SubgoalTracker(spec, state)
    s = state
    while (action := expert_action(s, spec, tracker)) != DONE:
        s = step(s, action)
        tracker.update(s)
    assert is_success(s, spec, tracker) and tracker.history == [0, 1, 2]
    print("✅ Ordered sub-goals OK\n")


def test_ordered_success_needs_every_subgoal_held():
    """A sub-goal undone after completion keeps the ordered task unsolved"""
    params = TaskParams(
        objects=[ObjectRef(kind="cube", color="red"), ObjectRef(kind="ring", color="green")],
        containers=[ObjectRef(kind="bowl", color="blue"), ObjectRef(kind="bowl", color="yellow")],
        targets=[ObjectRef(kind="cube", color="red"), ObjectRef(kind="ring", color="green")],
        target_containers=[0, 1],
    )
    spec = TaskSpec(template_id=TemplateId.FOLLOW_ORDER, params=params,
                    instruction=build_instruction(TemplateId.FOLLOW_ORDER, params))
    state = SimState(objects=[
        SimObject(kind="bowl", color="blue", pos=(0.2, 0.2)),
        SimObject(kind="bowl", color="yellow", pos=(0.8, 0.8)),
        SimObject(kind="cube", color="red", pos=(0.5, 0.2)),
        SimObject(kind="ring", color="green", pos=(0.5, 0.8)),
    ])
    tracker = SubgoalTracker(spec, state)
    for action in [
        Action(skill=Skill.PICK_PLACE, p_initial=(0.5, 0.2), p_target=(0.2, 0.2)),
        Action(skill=Skill.PICK_PLACE, p_initial=(0.2, 0.2), p_target=(0.5, 0.5)),
        Action(skill=Skill.PICK_PLACE, p_initial=(0.5, 0.8), p_target=(0.8, 0.8)),
    ]:
        state = step(state, action)
        tracker.update(state)
    assert tracker.history == [0, 1, 1, 2]
    assert not is_success(state, spec)
    assert not is_success(state, spec, tracker)

    state = step(state, Action(skill=Skill.PICK_PLACE, p_initial=(0.5, 0.5), p_target=(0.2, 0.2)))
    tracker.update(state)
    assert is_success(state, spec, tracker)


def test_expert_ceiling():
    """The scripted expert solves every template within #subgoals steps, on every level and side"""
    print("🧪 Testing expert ceiling")
    per_template = 500
    streams = [(make_split(level), side) for level in Level for side in SplitSide]
    solved = {t: 0 for t in TemplateId}
    for index in range(per_template * len(TemplateId) * 2):
        if min(solved.values()) >= per_template:
            break
        split, side = streams[index % len(streams)]
        spec, scene_seed = sample_episode_spec(split, side, 3, index)
        template = TemplateId(spec.template_id)
        if solved[template] >= per_template:
            continue
        state = new_scene(spec, scene_seed)
        budget = count_subgoals(state, spec)
        tracker = SubgoalTracker(spec, state)
        steps = 0
        while (action := expert_action(state, spec, tracker)) != DONE:
            state = step(state, action)
            tracker.update(state)
            steps += 1
            assert steps <= budget, (template, split.level, side, index)
        assert is_success(state, spec, tracker), (template, split.level, side, index)
        solved[template] += 1
    for template, n in solved.items():
        print(f"   {template.value}: {n}/{n} solved")
        assert n >= per_template, template
    print("✅ Expert ceiling OK\n")


def test_goal_state_satisfies_task():
    split = make_split("L1")
    rng = np.random.default_rng(5)
    spec = sample_task(TemplateId.REARRANGE_TO_GOAL, rng, split.train_combos, split.train_combos)
    initial = new_scene(spec, 5)
    goal = goal_state(initial, spec)
    assert is_success(goal, spec)
    assert goal.step_count == 0
    assert not any(o.kind == "dirt" for o in goal.objects)
    # the initial state is untouched
    assert initial.dict() == new_scene(spec, 5).dict()


def test_containment_radius_boundary():
    spec = _put_spec()
    inside = SimState(objects=[
        SimObject(kind="bowl", color="blue", pos=(0.5, 0.5)),
        SimObject(kind="cube", color="red", pos=(0.5 + CONTAINMENT_RADIUS - 1e-9, 0.5)),
    ])
    outside = SimState(objects=[
        SimObject(kind="bowl", color="blue", pos=(0.5, 0.5)),
        SimObject(kind="cube", color="red", pos=(0.5 + CONTAINMENT_RADIUS + 1e-6, 0.5)),
    ])
    assert is_success(inside, spec)
    assert not is_success(outside, spec)


if __name__ == "__main__":
    test_render_centroid()
    test_render_deterministic_and_ordered()
    test_primitives()
    test_sample_task_unique_pairs()
    test_follow_order_instruction_joined()
    test_new_scene_seeded_and_capacity()
    test_subgoal_tracker_order()
    test_ordered_success_needs_every_subgoal_held()
    test_expert_ceiling()
    test_goal_state_satisfies_task()
    test_containment_radius_boundary()
    print("✅ All tabletop tests passed!")
