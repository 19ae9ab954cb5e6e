# test_dataset.py

import tempfile
from pathlib import Path

import numpy as np

from core.catalog import load_catalog
from core.dataset import (
    Level, SplitSide, generate_dataset, load_dataset, make_split, parse_level, sample_episode_spec, save_dataset,
)
from core.tabletop import new_scene, render


def test_parse_level():
    assert parse_level("L2") == Level.L2
    assert parse_level("L3_novel_object") == Level.L3
    try:
        parse_level("L5")
        assert False
    except ValueError:
        pass


def test_splits_hold_out():
    """Held-out combinations, kinds and templates never reach the training side"""
    print("🧪 Testing split assignment")
    catalog = load_catalog()
    held_out = {tuple(c) for c in catalog.splits.held_out_combos}

    l2 = make_split("L2")
    assert not set(l2.train_combos) & held_out
    train = generate_dataset(l2, 20, seed=0, side=SplitSide.TRAIN)
    assert not train.combos() & held_out
    test = generate_dataset(l2, 20, seed=0, side=SplitSide.TEST)
    for ep in test.episodes:
        assert {t.key() for t in ep.spec.params.targets} <= held_out
    print(f"   L2: {len(train.combos())} train combos, none held out")

    l3 = make_split("L3")
    test = generate_dataset(l3, 10, seed=1, side=SplitSide.TEST)
    for ep in test.episodes:
        assert all(t.kind in catalog.splits.novel_kinds for t in ep.spec.params.targets)

    l4 = make_split("L4")
    assert not set(t.value for t in l4.train_templates) & set(catalog.splits.held_out_templates)
    train = generate_dataset(l4, 20, seed=2, side=SplitSide.TRAIN)
    assert not train.template_ids() & set(catalog.splits.held_out_templates)
    print("✅ Splits OK\n")


def test_generation_deterministic():
    print("🧪 Testing generation determinism")
    split = make_split("L1")
    a = generate_dataset(split, 8, seed=3)
    b = generate_dataset(split, 8, seed=3, workers=3)
    assert [ep.dict() for ep in a.episodes] == [ep.dict() for ep in b.episodes]
    assert np.array_equal(a.observations, b.observations)
    c = generate_dataset(split, 8, seed=4)
    assert [ep.dict() for ep in a.episodes] != [ep.dict() for ep in c.episodes]
    print("✅ Same seed, same bytes (any worker count)\n")


def test_test_side_does_not_replay_training():
    """L1 shares pools across sides; the same seed still yields different held-out episodes"""
    split = make_split("L1")
    for i in range(5):
        _, train_seed = sample_episode_spec(split, SplitSide.TRAIN, 0, i)
        _, test_seed = sample_episode_spec(split, SplitSide.TEST, 0, i)
        assert train_seed != test_seed, i
    assert sample_episode_spec(split, SplitSide.TEST, 0, 2) == sample_episode_spec(split, SplitSide.TEST, 0, 2)


def test_episode_frames_line_up():
    split = make_split("L1", templates=["rearrange_to_goal"])
    ds = generate_dataset(split, 3, seed=5)
    assert ds.meta.n_frames == ds.observations.shape[0]
    for ep in ds.episodes:
        frames = ep.observation_frames()
        assert len(frames) == ep.n_steps + 1
        assert np.array_equal(ds.frame(frames[0]), render(new_scene(ep.spec, ep.scene_seed)))
        assert ep.goal_frame == ep.n_steps + 1
        assert ep.image_frame("goal") == ep.frame_offset + ep.goal_frame
        for s in range(ep.n_steps - 1):
            assert ep.steps[s].next_state == ep.steps[s + 1].state


def test_save_load_round_trip():
    print("🧪 Testing dataset files")
    split = make_split("L1")
    ds = generate_dataset(split, 4, seed=6)
    with tempfile.TemporaryDirectory() as tmp:
        paths = save_dataset(ds, Path(tmp))
        assert [p.name for p in paths] == ["meta.json", "episodes.jsonl", "observations.bin"]
        loaded = load_dataset(Path(tmp))
        assert loaded.meta == ds.meta
        assert [ep.dict() for ep in loaded.episodes] == [ep.dict() for ep in ds.episodes]
        assert np.array_equal(loaded.observations, ds.observations)

        blob = Path(tmp) / "observations.bin"
        blob.write_bytes(blob.read_bytes()[:-10])
        try:
            load_dataset(Path(tmp))
            assert False, "truncated observations accepted"
        except ValueError as e:
            print(f"   rejected: {e}")
    print("✅ Dataset files OK\n")


if __name__ == "__main__":
    test_parse_level()
    test_splits_hold_out()
    test_generation_deterministic()
    test_test_side_does_not_replay_training()
    test_episode_frames_line_up()
    test_save_load_round_trip()
    print("✅ All dataset tests passed!")
