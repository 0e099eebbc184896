import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixforge import world as wd
from pixforge.world import EditingWorld, Scene, Shape

DATA = Path(__file__).parent / "data"


def test_seed0_insert_matches_golden_file(world):
    gold = json.loads((DATA / "triple_seed0_insert.json").read_text())
    tr = world.generate_triple(0, "single", edit_kind="insert")
    assert tr.edit_kind == "insert" and tr.target == gold["target"]
    assert tr.scene.background == gold["background"]
    assert [[s.kind, s.color, s.position] for s in tr.scene.shapes] == gold["shapes"]
    assert tr.instruction.words == gold["words"]
    assert tr.instruction.ids.tolist() == gold["ids"]
    np.testing.assert_array_equal(tr.source, gold["source"])
    np.testing.assert_array_equal(tr.mask, gold["mask"])
    # target cell is empty in the source and covered by the mask
    assert tr.scene.at(tr.target) is None
    assert np.all(tr.source[tr.mask == 1] == gold["background"])


@pytest.mark.parametrize("difficulty", wd.DIFFICULTIES)
def test_same_seed_is_byte_identical(world, difficulty):
    a = world.generate_triple(123, difficulty)
    b = EditingWorld().generate_triple(123, difficulty)
    assert a.source.tobytes() == b.source.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.instruction.ids.tobytes() == b.instruction.ids.tobytes()
    assert a.edit_kind == b.edit_kind and a.edited_scene == b.edited_scene


def test_multi_object_has_two_distractors_outside_mask(world):
    for seed in range(100):
        tr = world.generate_triple(seed, "multi-object")
        outside = [s for s in tr.scene.shapes if s.position != tr.target]
        assert len(outside) >= 2
        for s in outside:
            assert not np.any(tr.mask[wd.cell_box(s.position)])


def test_all_edit_kinds_reachable(world):
    kinds = {world.generate_triple(s).edit_kind for s in range(60)}
    assert kinds == set(wd.EDIT_KINDS)


def test_unplaceable_distractors_name_the_seed(world):
    with pytest.raises(wd.PlacementError, match="seed 5"):
        world.generate_triple(5, edit_kind="remove", num_distractors=5)


def test_rasterize_empty_scene_is_background():
    np.testing.assert_array_equal(wd.rasterize(Scene(16, 0.1)), np.full((16, 16), 0.1))


def test_rasterize_full_canvas_square():
    img = wd.rasterize(Scene(16, 0.0, (Shape("square", 1, "center", size=16),)))
    np.testing.assert_array_equal(img, np.full((16, 16), wd.COLOR_VALUES[1]))


def test_rasterize_one_square_has_16_pixels():
    img = wd.rasterize(Scene(16, 0.0, (Shape("square", 2, "left"),)))
    assert np.count_nonzero(img == wd.COLOR_VALUES[2]) == 16
    assert np.all(img[wd.cell_box("left")] == wd.COLOR_VALUES[2])


def test_rasterize_rejects_off_canvas_shape():
    with pytest.raises(ValueError):
        wd.rasterize(Scene(16, 0.0, (Shape("square", 1, "left", size=16),)))


def test_cells_are_disjoint_and_inside():
    cover = np.zeros((16, 16), int)
    for pos in wd.POSITIONS:
        cover[wd.cell_box(pos)] += 1
    assert cover.max() == 1 and cover.sum() == 16 * len(wd.POSITIONS)


def test_generated_pixels_take_scene_values(world):
    for seed in range(30):
        tr = world.generate_triple(seed, "multi-object")
        allowed = {tr.scene.background, *wd.COLOR_VALUES}
        assert set(np.unique(tr.source)) <= allowed


def test_groundtruth_full_mask_is_uniform():
    np.testing.assert_allclose(wd.mask_to_groundtruth_attention(np.ones((16, 16)), 4, 4),
                               np.full((4, 4), 1 / 16))


def test_groundtruth_one_cell_is_one_hot():
    mask = np.zeros((16, 16))
    mask[4:8, 8:12] = 1
    expected = np.zeros((4, 4))
    expected[1, 2] = 1
    np.testing.assert_array_equal(wd.mask_to_groundtruth_attention(mask, 4, 4), expected)


def test_groundtruth_half_covered_cell():
    # 4x4 mask pooled 2x: cell (0,0) full, cell (0,1) half covered
    mask = np.zeros((4, 4))
    mask[0:2, 0:2] = 1
    mask[0:2, 2] = 1
    expected = np.array([[1.0, 0.5], [0.0, 0.0]]) / 1.5
    np.testing.assert_allclose(wd.mask_to_groundtruth_attention(mask, 2, 2), expected, rtol=1e-15)


def test_groundtruth_rejects_empty_and_indivisible():
    with pytest.raises(wd.EmptyMaskError):
        wd.mask_to_groundtruth_attention(np.zeros((16, 16)), 4, 4)
    with pytest.raises(ValueError):
        wd.mask_to_groundtruth_attention(np.ones((16, 16)), 3, 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(wd.DIFFICULTIES))
def test_triple_invariants(seed, difficulty):
    world = EditingWorld()
    tr = world.generate_triple(seed, difficulty)
    # binary single-rectangle mask, one connected component
    assert set(np.unique(tr.mask)) == {0.0, 1.0}
    rows, cols = np.nonzero(tr.mask)
    assert (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1) == rows.size
    # instruction fits with padding flagged; padding never relevant
    ins = tr.instruction
    assert ins.ids.shape == (world.max_tokens,)
    assert not np.any(ins.relevant & ~ins.valid)
    # position token agrees with the mask centroid; object token names what is there
    words = ins.words
    assert wd.mask_centroid_position(tr.mask) in words
    target_shape = tr.scene.at(tr.target)
    if tr.edit_kind == "insert":
        assert target_shape is None
    else:
        assert target_shape.kind in words
    # ground truth attention is a distribution concentrated on the mask
    a = wd.mask_to_groundtruth_attention(tr.mask, 4, 4)
    assert np.all(a >= 0) and abs(a.sum() - 1) < 1e-6
    # shapes never overlap
    assert len(tr.scene.occupied()) == len(tr.scene.shapes)


def test_vocabulary_round_trip_and_size(world):
    v = world.vocab
    assert len(v) == 24 and v.tokens[0] == "<pad>" and v.tokens[1] == "<start>"
    assert len(set(v.ids.values())) == len(v)
    ins = v.encode(["remove", "the", "circle", "top"], 8)
    assert v.decode(ins.ids)[:5] == ["<start>", "remove", "the", "circle", "top"]
    assert ins.text == "remove the circle top"
    with pytest.raises(ValueError):
        v.encode(["add"] * 8, 8)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (16, 12)) / 255.0
    wd.write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n12 16\n255\n")
    np.testing.assert_array_equal(wd.read_pgm(tmp_path / "a.pgm"), img)


def test_freeze_layout(world, tmp_path):
    trs = [world.generate_triple(s) for s in range(3)]
    dirs = wd.freeze(trs, tmp_path)
    assert [d.name for d in dirs] == ["seed0", "seed1", "seed2"]
    tr = trs[1]
    np.testing.assert_array_equal(wd.read_pgm(dirs[1] / "mask.pgm"), tr.mask)
    np.testing.assert_array_equal(wd.read_pgm(dirs[1] / "source.pgm"),
                                  np.rint(tr.source * 255) / 255)
    assert (dirs[1] / "instruction.txt").read_text() == tr.instruction.text + "\n"


def test_golden_render_applies_edit(world):
    for seed in range(20):
        tr = world.generate_triple(seed)
        gold = wd.golden_render(tr)
        outside = tr.mask == 0
        np.testing.assert_array_equal(gold[outside], tr.source[outside])
        assert not np.array_equal(gold[~outside], tr.source[~outside])
