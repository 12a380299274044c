import numpy as np
import pytest

from rnca.data import (KINDS, ShapeSpec, default_corruption, gen_shape, junction_count, load_image,
                       load_mask, make_dataset, read_manifest, save_image, save_mask, split_counts,
                       write_dataset)
from rnca.errors import ContractError, FormatError
from rnca.metrics import betti_numbers, dice, skeletonize
from rnca.morph import CorruptionSpec, corrupt

EXPECTED = {"blob": (1, 0), "ring": (1, 1), "branching_tubes": (1, 0)}


@pytest.mark.parametrize("kind", KINDS)
def test_shapes_have_kind_topology(kind):
    for seed in range(15):
        spec = ShapeSpec(kind=kind, size=48, seed=seed)
        image, gt = gen_shape(spec)
        assert image.shape == (48, 48, 1) and image.dtype == np.float32
        assert gt.dtype == bool and betti_numbers(gt) == EXPECTED[kind]
        m = spec.margin
        assert not (gt[:m].any() or gt[-m:].any() or gt[:, :m].any() or gt[:, -m:].any())
        assert 0 <= image.min() and image.max() <= 1


def test_tubes_branch():
    for seed in range(10):
        _, gt = gen_shape(ShapeSpec(kind="branching_tubes", size=64, seed=seed))
        assert junction_count(skeletonize(gt)) >= 3


def test_image_separates_foreground():
    image, gt = gen_shape(ShapeSpec(kind="blob", size=64, seed=3))
    assert image[gt].mean() > image[~gt].mean() + 0.3


def test_shape_contracts():
    with pytest.raises(ContractError):
        ShapeSpec(kind="square")
    with pytest.raises(ContractError):
        ShapeSpec(size=8)
    with pytest.raises(ContractError):
        ShapeSpec(margin=1)


def test_split_counts():
    assert split_counts(10) == (7, 2, 1)
    assert split_counts(100) == (70, 15, 15)
    assert split_counts(3) == (2, 1, 0)  # tie on remainders goes to val
    assert split_counts(7) == (5, 1, 1)
    for n in range(3, 50):
        assert sum(split_counts(n)) == n
    with pytest.raises(ContractError):
        split_counts(10, (0.5, 0.5))


def test_make_dataset_reproducible_and_split():
    spec = ShapeSpec(kind="ring", size=32)
    cs = default_corruption("ring")
    a = make_dataset(10, spec, cs, 7)
    b = make_dataset(10, spec, cs, 7)
    assert [p.id for p in a.pairs] == [p.id for p in b.pairs]
    for p, q in zip(a.pairs, b.pairs):
        np.testing.assert_array_equal(p.gt, q.gt)
        np.testing.assert_array_equal(p.corrupted, q.corrupted)
        np.testing.assert_array_equal(p.image, q.image)
    assert a.splits == b.splits
    assert [len(a.subset(s)) for s in ("train", "val", "test")] == [7, 2, 1]
    c = make_dataset(10, spec, cs, 8)
    assert any(not np.array_equal(p.gt, q.gt) for p, q in zip(a.pairs, c.pairs))
    with pytest.raises(ContractError):
        make_dataset(2, spec, cs, 0)


def test_identity_corruption_copies_gt():
    cs = CorruptionSpec(weights={"ring_break": 1.0}, identity_fraction=1.0)
    ds = make_dataset(5, ShapeSpec(kind="ring", size=32), cs, 0)
    for p in ds.pairs:
        np.testing.assert_array_equal(p.corrupted, p.gt)


def test_corrupted_blobs_start_near_dice_080():
    cs = default_corruption("blob")
    rng = np.random.default_rng(0)
    scores = []
    for seed in range(60):
        _, gt = gen_shape(ShapeSpec(kind="blob", size=48, seed=seed))
        scores.append(dice(corrupt(gt, cs, rng), gt))
    assert abs(np.mean(scores) - 0.80) <= 0.05


def test_mask_round_trip(tmp_path, rng):
    m = rng.random((13, 17)) < 0.5
    path = save_mask(tmp_path / "m.pgm", m)
    assert path.read_bytes().startswith(b"P5\n17 13\n255\n")
    np.testing.assert_array_equal(load_mask(path), m)


def test_image_round_trip_quantisation(tmp_path, rng):
    img = rng.random((9, 11, 1)).astype(np.float32)
    back = load_image(save_image(tmp_path / "i.pgm", img))
    assert back.shape == (9, 11, 1)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6


def test_pgm_header_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n3 2\n255\n" + bytes([0, 255, 0, 255, 0, 255]))
    np.testing.assert_array_equal(load_mask(path), [[0, 1, 0], [1, 0, 1]])


def test_pgm_errors(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(FormatError):
        load_mask(p)
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(5))
    with pytest.raises(FormatError, match="truncated"):
        load_mask(p)
    p.write_bytes(b"P5\n2 2\n15\n" + bytes(4))
    with pytest.raises(FormatError, match="maxval"):
        load_mask(p)
    # images accept other maxvals
    assert load_image(p).shape == (2, 2, 1)
    with pytest.raises(OSError):
        load_mask(tmp_path / "missing.pgm")


def test_png_masks(tmp_path, rng):
    Image = pytest.importorskip("PIL.Image")
    m = rng.random((6, 7)) < 0.5
    Image.fromarray(m.astype(np.uint8) * 255).save(tmp_path / "m.png")
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


def test_manifest_round_trip(tmp_path):
    ds = make_dataset(6, ShapeSpec(kind="blob", size=24), default_corruption("blob"), 1)
    manifest = write_dataset(ds, tmp_path / "set")
    back = read_manifest(manifest)
    assert back.splits == ds.splits
    by_id = {p.id: p for p in back.pairs}
    for p in ds.pairs:
        q = by_id[p.id]
        np.testing.assert_array_equal(q.gt, p.gt)
        np.testing.assert_array_equal(q.corrupted, p.corrupted)
        assert np.abs(q.image - p.image).max() <= 0.5 / 255 + 1e-6
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        read_manifest(tmp_path / "nope.csv")
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.csv")
