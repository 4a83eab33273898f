import itertools

import pytest
import torch
from hypothesis import given, settings, strategies as st

from inputtune.errors import EmptyDataset, LabelSpaceMismatch, NonDivisibleSplit
from inputtune.streams import (CLASS_INCREMENTAL, DOMAIN_INCREMENTAL, LabeledDataset,
                               build_class_incremental_stream, build_domain_incremental_stream,
                               load_image_folder, write_image_folder)
from inputtune.synthetic import (make_multisource_stream, make_synthetic_dataset,
                                 make_synthetic_domain_stream, make_synthetic_stream)


def toy_dataset(num_classes, per_class=2, source="toy"):
    labels = torch.arange(num_classes).repeat_interleave(per_class)
    images = torch.randn(len(labels), 1, 4, 4)
    return LabeledDataset(images, labels, tuple(f"c{k}" for k in range(num_classes)), source)


def assert_disjoint(stream):
    ids = [set(s.class_ids) for s in stream.sessions]
    for a, b in itertools.combinations(ids, 2):
        assert not a & b
    assert set().union(*ids) == set(range(stream.total_classes))
    samples = [set(s.train.sample_ids) | set(s.test.sample_ids) for s in stream.sessions]
    for a, b in itertools.combinations(samples, 2):
        assert not a & b


@pytest.mark.parametrize("n_cls, tasks, per", [(100, 10, 10), (45, 9, 5), (12, 1, 12)])
def test_class_incremental_sizes(n_cls, tasks, per):
    stream = build_class_incremental_stream(toy_dataset(n_cls, per_class=5), tasks, shuffle_seed=3)
    assert stream.mode == CLASS_INCREMENTAL
    assert stream.num_tasks == tasks
    assert all(len(s.class_ids) == per for s in stream.sessions)
    assert_disjoint(stream)


def test_every_sample_of_a_class_lands_in_one_session():
    ds = toy_dataset(10, per_class=5)
    stream = build_class_incremental_stream(ds, 5, shuffle_seed=0)
    origin = {}
    for s in stream.sessions:
        for part in (s.train, s.test):
            for sid, lab in zip(part.sample_ids, part.labels.tolist()):
                assert lab in s.class_ids
                orig = int(ds.labels[int(sid.split("/")[1])])
                origin.setdefault(orig, set()).add(s.index)
    assert all(len(v) == 1 for v in origin.values())
    assert len(origin) == 10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_partition_properties(tasks, per_task, seed):
    ds = toy_dataset(tasks * per_task, per_class=3)
    a = build_class_incremental_stream(ds, tasks, seed)
    b = build_class_incremental_stream(ds, tasks, seed)
    assert_disjoint(a)
    assert a.seeds["class_order"] == b.seeds["class_order"]
    assert a.descriptor() == b.descriptor()


def test_class_incremental_errors():
    with pytest.raises(NonDivisibleSplit):
        build_class_incremental_stream(toy_dataset(10), 3, 0)
    empty = LabeledDataset(torch.zeros(0, 1, 4, 4), torch.zeros(0, dtype=torch.long), ("a",))
    with pytest.raises(EmptyDataset):
        build_class_incremental_stream(empty, 1, 0)


def test_domain_incremental():
    doms = [toy_dataset(5, 5, f"d{k}") for k in range(4)]
    stream = build_domain_incremental_stream(doms)
    assert stream.mode == DOMAIN_INCREMENTAL
    assert stream.num_tasks == 4
    assert all(s.class_ids == tuple(range(5)) for s in stream.sessions)
    assert [s.source_id for s in stream.sessions] == ["d0", "d1", "d2", "d3"]
    assert build_domain_incremental_stream(doms[:1]).num_tasks == 1


def test_domain_label_space_mismatch():
    a = toy_dataset(8)
    b = LabeledDataset(a.images[:14], a.labels[:14] % 7, tuple(f"c{k}" for k in range(7)), "b")
    with pytest.raises(LabelSpaceMismatch):
        build_domain_incremental_stream([a, b])


@pytest.mark.parametrize("args, n_train, n_test, total", [
    ((2, 3, 50, (3, 32, 32), 0), 240, 60, 6),
    ((1, 2, 10, (1, 8, 8), 1), 16, 4, 2),
])
def test_synthetic_stream_counts(args, n_train, n_test, total):
    stream = make_synthetic_stream(*args)
    assert stream.total_classes == total
    assert sum(len(s.train) for s in stream.sessions) == n_train
    assert sum(len(s.test) for s in stream.sessions) == n_test
    assert stream.session(1).train.image_shape == args[3]
    assert_disjoint(stream)


def test_synthetic_stream_deterministic():
    a = make_synthetic_stream(2, 2, 10, (3, 16, 16), seed=5)
    b = make_synthetic_stream(2, 2, 10, (3, 16, 16), seed=5)
    for sa, sb in zip(a.sessions, b.sessions):
        assert torch.equal(sa.train.images, sb.train.images)
        assert torch.equal(sa.test.labels, sb.test.labels)
    c = make_synthetic_stream(2, 2, 10, (3, 16, 16), seed=6)
    assert not torch.equal(a.session(1).train.images, c.session(1).train.images)


def test_synthetic_counts_validated():
    with pytest.raises(ValueError):
        make_synthetic_stream(0, 2, 10)


def test_multisource_and_domain_streams():
    ms = make_multisource_stream(2, 2, 2, 10, (3, 16, 16), seed=0)
    assert ms.num_tasks == 4 and ms.total_classes == 8
    assert [s.source_id for s in ms.sessions] == ["source0", "source0", "source1", "source1"]
    assert_disjoint(ms)
    dom = make_synthetic_domain_stream(3, 4, 10, (3, 16, 16), seed=0)
    assert dom.mode == DOMAIN_INCREMENTAL and dom.total_classes == 4


def test_merged_stream_is_union():
    stream = make_synthetic_stream(3, 2, 10, (3, 8, 8), seed=0)
    joint = stream.merged()
    assert joint.num_tasks == 1
    assert len(joint.session(1).train) == sum(len(s.train) for s in stream.sessions)
    assert joint.session(1).class_ids == tuple(range(6))


def test_descriptor_json(tmp_path):
    stream = make_synthetic_stream(2, 2, 10, (3, 8, 8), seed=0)
    stream.save_descriptor(tmp_path / "d.json")
    import json

    d = json.loads((tmp_path / "d.json").read_text())
    assert d["mode"] == CLASS_INCREMENTAL
    assert [s["class_ids"] for s in d["sessions"]] == [[0, 1], [2, 3]]
    assert d["sessions"][0]["num_train"] == 16


def test_image_folder_round_trip(tmp_path):
    ds = make_synthetic_dataset(3, 4, (3, 8, 8), seed=0)
    clipped = LabeledDataset(ds.images.sigmoid(), ds.labels, ds.class_names, "src")
    write_image_folder(clipped, tmp_path, "train")
    back = load_image_folder(tmp_path, "train")
    assert back.class_names == clipped.class_names
    assert back.source_id == "src"
    assert torch.equal(back.labels.sort().values, clipped.labels.sort().values)
    assert torch.allclose(back.images, clipped.images, atol=1 / 255)
    with pytest.raises(EmptyDataset):
        load_image_folder(tmp_path, "test")


def test_styled_sources_stay_float32():
    ms = make_multisource_stream(2, 1, 2, 5, (3, 16, 16), seed=0)
    assert all(s.train.images.dtype == torch.float32 for s in ms.sessions)
