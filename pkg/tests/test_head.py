import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from inputtune.assembly import make_strategy
from inputtune.backbone import tiny_resnet
from inputtune.errors import MissingTransform, NoTrainedSessions, UnregisteredSession
from inputtune.head import (IncrementalHead, PredictionBundle, fuse_concat, fuse_max,
                            masked_train_logits, predict_parallel, predict_standard, write_predictions)
from inputtune.streams import CLASS_INCREMENTAL, DOMAIN_INCREMENTAL
from inputtune.trainer import build_assembly, TrainConfig
from inputtune.synthetic import make_synthetic_stream


def test_label_trick_exact_zero_rows():
    head = IncrementalHead(8, 100, seed=0)
    for j in range(1, 11):
        head.register_session(j, range(10 * (j - 1), 10 * j))
    feats = torch.randn(16, 8)
    labels = torch.randint(10, 20, (16,))
    logits, local = masked_train_logits(head, feats, 2, CLASS_INCREMENTAL, labels)
    assert logits.shape == (16, 10)
    assert torch.equal(local, labels - 10)
    F.cross_entropy(logits, local).backward()
    outside = torch.ones(100, dtype=torch.bool)
    outside[10:20] = False
    assert torch.count_nonzero(head.weight.grad[outside]) == 0
    assert torch.count_nonzero(head.bias.grad[outside]) == 0
    assert torch.count_nonzero(head.weight.grad[10:20]) > 0


def test_single_session_masking_is_identity():
    head = IncrementalHead(4, 3)
    head.register_session(1, [0, 1, 2])
    f = torch.randn(5, 4)
    logits, _ = masked_train_logits(head, f, 1, CLASS_INCREMENTAL)
    assert torch.equal(logits, head(f))


def test_domain_incremental_touches_all_rows():
    head = IncrementalHead(4, 6)
    f = torch.randn(16, 4)
    y = torch.arange(16) % 6
    logits, labels = masked_train_logits(head, f, 1, DOMAIN_INCREMENTAL, y)
    assert logits.shape == (16, 6) and torch.equal(labels, y)
    F.cross_entropy(logits, labels).backward()
    assert (head.weight.grad.abs().sum(dim=1) > 0).all()


def test_unregistered_and_overlap():
    head = IncrementalHead(4, 6)
    with pytest.raises(UnregisteredSession):
        head.slice_index(1)
    head.register_session(1, [0, 1])
    with pytest.raises(ValueError):
        head.register_session(2, [1, 2])
    with pytest.raises(ValueError):
        masked_train_logits(head, torch.randn(2, 4), 1, CLASS_INCREMENTAL, torch.tensor([0, 3]))


def test_tie_goes_to_lowest_class():
    fused = torch.zeros(1, 10)
    fused[0, 3] = fused[0, 7] = 5.0
    b = PredictionBundle.from_fused([fused], fused, list(range(10)))
    assert b.predicted.item() == 3


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_fusion_against_brute_force(t, k, seed, shift):
    g = torch.Generator().manual_seed(seed)
    blocks = [torch.randn(3, k, generator=g) for _ in range(t)]
    cat = fuse_concat(blocks)
    assert cat.shape == (3, t * k)
    for j, blk in enumerate(blocks):
        assert torch.equal(cat[:, j * k:(j + 1) * k], blk)
    mx = fuse_max(blocks)
    for n in range(3):
        for c in range(k):
            best = blocks[0][n, c].item()
            for blk in blocks[1:]:
                best = max(best, blk[n, c].item())
            assert mx[n, c].item() == best
    ids = list(range(t * k))
    a = PredictionBundle.from_fused(blocks, cat, ids).predicted
    b = PredictionBundle.from_fused(blocks, cat + shift, ids).predicted
    assert torch.equal(a, b)


def test_domain_two_class_example():
    fused = fuse_max([torch.tensor([[0.2, 0.9]], dtype=torch.float64),
                      torch.tensor([[0.5, 0.1]], dtype=torch.float64)])
    assert fused.tolist() == [[0.5, 0.9]]
    assert PredictionBundle.from_fused([], fused, [0, 1]).predicted.item() == 1


@pytest.fixture(scope="module")
def small_stream():
    return make_synthetic_stream(3, 2, 6, (3, 32, 32), seed=0)


def _assembly(stream, kind, **kw):
    net = tiny_resnet()
    return build_assembly(stream, make_strategy(kind, net, **kw), TrainConfig(seed=0), net)


def test_parallel_equals_standard_at_t1(small_stream):
    par = _assembly(small_stream, "it_pad", transform_mode="per_task")
    par.head.register_session(1, small_stream.session(1).class_ids)
    par.allocate_transform(1)
    with torch.no_grad():
        par.transforms["task1"].theta.normal_()
    par.head.freeze_slice(1)
    par.eval()
    x = par.prepare_inputs(small_stream.session(1).test.images)
    a = predict_parallel(par, x, 1)
    b = predict_standard(par, x, 1)
    assert torch.equal(a.fused, b.fused)
    assert torch.equal(a.predicted, b.predicted)


def test_parallel_concatenates_slices(small_stream):
    par = _assembly(small_stream, "it_pad", transform_mode="per_task")
    par.eval()
    for j in (1, 2):
        par.head.register_session(j, small_stream.session(j).class_ids)
        par.allocate_transform(j)
        with torch.no_grad():
            par.transforms[f"task{j}"].theta.normal_()
        par.head.freeze_slice(j)
    x = par.prepare_inputs(small_stream.session(1).test.images)
    bundle = predict_parallel(par, x, 2)
    assert bundle.fused.shape == (len(x), 4)
    assert bundle.class_ids == [0, 1, 2, 3]
    with torch.no_grad():
        y2 = par.head.slice_logits(par.features(x, task=2), 2)
    assert torch.equal(bundle.fused[:, 2:], y2)
    with pytest.raises(MissingTransform):
        predict_parallel(par, x, 3)
    with pytest.raises(NoTrainedSessions):
        predict_standard(par, x, 0)


def test_parallel_uses_session_snapshot(small_stream):
    par = _assembly(small_stream, "it_pad", transform_mode="per_task")
    par.eval()
    par.head.register_session(1, small_stream.session(1).class_ids)
    par.allocate_transform(1)
    par.head.freeze_slice(1)
    x = par.prepare_inputs(small_stream.session(1).test.images[:4])
    before = predict_parallel(par, x, 1).fused
    with torch.no_grad():
        par.head.weight.add_(1.0)
    assert torch.equal(predict_parallel(par, x, 1).fused, before)


def test_standard_fused_length(small_stream):
    asm = _assembly(small_stream, "none")
    asm.eval()
    for j in (1, 2, 3):
        asm.head.register_session(j, small_stream.session(j).class_ids)
    x = small_stream.session(1).train.images[:3]
    assert predict_standard(asm, x, 1).fused.shape == (3, 2)
    assert predict_standard(asm, x, 3).fused.shape == (3, 6)


def test_write_predictions(tmp_path):
    fused = torch.tensor([[0.1, 0.9], [0.8, 0.2]])
    bundle = PredictionBundle.from_fused([fused], fused, [4, 5])
    write_predictions(tmp_path / "p.csv", ["a", "b"], bundle, torch.tensor([5, 5]))
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "sample_id,true_class,predicted_class,logit_4,logit_5"
    assert lines[1].startswith("a,5,5,") and lines[2].startswith("b,5,4,")
