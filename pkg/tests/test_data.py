import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scfc.data import FewShotSets, assign_imaginary, label_of, labeled_pair, random_pair
from scfc.errors import EmptySetError, UnknownImageError, UnlabeledImageError
from scfc.images import Image


def make(name, label=None, v=0.0):
    return Image(np.full((4, 4), v), id=name, label=label)


@pytest.fixture
def sets():
    return FewShotSets(
        [make("o1", 1), make("o2", 1)],
        [make("u1", 0), make("u2", 0)],
        [make("s1"), make("s2"), make("s3")],
    )


def test_random_pair_singleton_always_repeats():
    x = make("only")
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = random_pair([x], rng)
        assert a is x and b is x


def test_random_pair_empty_set():
    with pytest.raises(EmptySetError):
        random_pair([], np.random.default_rng(0))


def test_random_pair_uniform_over_ordered_pairs():
    pool = [make(f"p{i}") for i in range(4)]
    rng = np.random.default_rng(123)
    n = 10000
    counts = np.zeros((4, 4))
    index = {img.id: i for i, img in enumerate(pool)}
    for _ in range(n):
        a, b = random_pair(pool, rng)
        counts[index[a.id], index[b.id]] += 1
    p = 1 / 16
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_random_pair_differs_across_seeds():
    pool = [make(f"p{i}") for i in range(6)]

    def seq(seed):
        rng = np.random.default_rng(seed)
        return [tuple(x.id for x in random_pair(pool, rng)) for _ in range(30)]

    assert seq(1) != seq(2)
    assert seq(1) == seq(1)


def test_label_of_test_images(sets):
    assert label_of(sets, "o1") == 1
    assert label_of(sets, "u2") == 0


def test_label_of_support_after_assignment(sets):
    assign_imaginary(sets, "s2", 0)
    assert label_of(sets, "s2") == 0


def test_label_of_unlabeled_support(sets):
    with pytest.raises(UnlabeledImageError):
        label_of(sets, "s1")


def test_label_of_unknown(sets):
    with pytest.raises(UnknownImageError):
        label_of(sets, "nope")


def test_assign_overwrites(sets):
    assign_imaginary(sets, "s1", 1)
    assign_imaginary(sets, "s1", 0)
    assert sets.clustering == {"s1": 0}


def test_assign_all_support(sets):
    for img in sets.support:
        assign_imaginary(sets, img.id, 1)
    assert len(sets.clustering) == 3


def test_assign_to_test_image_rejected(sets):
    with pytest.raises(UnknownImageError):
        assign_imaginary(sets, "o1", 0)
    assert label_of(sets, "o1") == 1


def test_assign_rejects_bad_label(sets):
    with pytest.raises(ValueError):
        assign_imaginary(sets, "s1", 2)


def test_sets_need_both_classes():
    with pytest.raises(EmptySetError):
        FewShotSets([make("o", 1)], [], [])


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        FewShotSets([make("a", 1)], [make("b", 0)], [make("a")])
    sets = FewShotSets([make("a", 1)], [make("b", 0)], [make("c")])
    with pytest.raises(ValueError):
        sets.add_support(make("c"))


def test_too_many_shots_warns(caplog):
    FewShotSets([make(f"o{i}", 1) for i in range(6)], [make("u", 0)], [])
    assert "exceed" in caplog.text


def test_same_image_pair_is_positive(sets):
    assign_imaginary(sets, "s3", 0)
    s3 = sets.support[2]
    assert labeled_pair(sets, s3, s3).y == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**30))
def test_test_pair_labels_follow_folders(seed):
    occ = [make(f"o{i}", 1) for i in range(3)]
    unocc = [make(f"u{i}", 0) for i in range(2)]
    sets = FewShotSets(occ, unocc, [])
    rng = np.random.default_rng(seed)
    a, b = random_pair(sets.test, rng)
    assert labeled_pair(sets, a, b).y == int(a.label == b.label)


def test_export_jsonl(tmp_path, sets):
    assign_imaginary(sets, "s1", 1)
    sets.export_jsonl(tmp_path / "s.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert [r["set"] for r in rows] == ["test_occupied"] * 2 + ["test_unoccupied"] * 2 + ["support"] * 3
    assert rows[4] == {"id": "s1", "set": "support", "label": 1, "source_path": None}
    assert rows[5]["label"] is None
