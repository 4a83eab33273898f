import pytest
import torch
import torch.nn.functional as F

from inputtune.assembly import make_strategy
from inputtune.backbone import tiny_resnet
from inputtune.errors import CheckpointMissing, IncompatibleStrategy, OutOfOrderSession
from inputtune.metrics import metrics_report
from inputtune.pretrain import load_tiny_pretrained
from inputtune.synthetic import make_synthetic_domain_stream, make_synthetic_stream
from inputtune.trainer import (TrainConfig, build_assembly, derive_seed, evaluate, run_joint,
                               run_sequence, run_session)

FAST = dict(epochs_per_session=2, batch_size=8)


@pytest.fixture(scope="module")
def backbone():
    return load_tiny_pretrained()


@pytest.fixture(scope="module")
def stream():
    return make_synthetic_stream(2, 2, 10, (3, 32, 32), seed=3)


def test_derived_seeds_differ_by_stage():
    seeds = {derive_seed(0, s) for s in ("split", "init", "shuffle")}
    assert len(seeds) == 3
    assert derive_seed(0, "shuffle", 1) != derive_seed(0, "shuffle", 2)
    assert derive_seed(5, "init") == derive_seed(5, "init")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs_per_session=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(online=True, epochs_per_session=20).epochs == 1


def linear_probe_accuracy(features, labels, test_features, test_labels, steps=300):
    """Independent oracle: full-batch logistic regression with LBFGS on frozen features."""
    k = int(labels.max()) + 1
    w = torch.zeros(features.shape[1], k, requires_grad=True)
    b = torch.zeros(k, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=steps)

    def closure():
        opt.zero_grad()
        loss = F.cross_entropy(features @ w + b, labels)
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        return float(((test_features @ w + b).argmax(1) == test_labels).float().mean())


def test_head_only_learns_separable_task(backbone):
    one = make_synthetic_stream(1, 3, 30, (3, 32, 32), seed=11)
    s = one.session(1)
    with torch.no_grad():
        ftr, fte = backbone(s.train.images), backbone(s.test.images)
    assert linear_probe_accuracy(ftr, s.train.labels, fte, s.test.labels) >= 0.95
    res = run_sequence(one, make_strategy("none", backbone), TrainConfig(epochs_per_session=20), backbone)
    assert res.matrix.get(1, 1) >= 0.95
    rep = metrics_report(res.matrix)
    assert rep["average_forgetting"] == 0.0 and rep["average_accuracy"] == res.matrix.get(1, 1)


def test_zero_learning_rate_is_a_no_op(backbone, stream):
    cfg = TrainConfig(lr=0.0, backbone_lr=0.0, **FAST)
    strat = make_strategy("it_add", backbone)
    init = build_assembly(stream, strat, cfg, backbone)
    init.head.register_session(1, stream.session(1).class_ids)
    init.eval()
    expected = evaluate(init, stream, 1, 1)
    res = run_sequence(stream, strat, cfg, backbone, stop_after=1)
    assert torch.count_nonzero(res.assembly.transforms["shared"].theta) == 0
    assert res.matrix.get(1, 1) == expected


@pytest.mark.parametrize("kind", ["bias_tuning", "ft1", "ft2", "it_pad", "it_add", "it_pad_plus_bias"])
def test_freeze_contract_across_sessions(backbone, stream, kind):
    asm = build_assembly(stream, make_strategy(kind, backbone), TrainConfig(**FAST), backbone)
    cfg = TrainConfig(**FAST)
    for j in (1, 2):
        train = asm.trainable_names(j) if kind not in ("it_pad", "it_add", "it_pad_plus_bias") else None
        before = {n: p.detach().clone() for n, p in asm.named_parameters()}
        run_session(asm, stream, j, cfg)
        train = asm.trainable_names(j)
        head_rows_other = [c for k, ids in asm.head.slices.items() if k != j for c in ids]
        for n, p in asm.named_parameters():
            if n in train:
                continue
            assert torch.equal(p, before[n]), n
        rows = torch.tensor(head_rows_other, dtype=torch.long)
        if len(rows):
            assert torch.equal(asm.head.weight[rows], before["head.weight"][rows])


def test_frozen_pretrained_buffers_unchanged(backbone, stream):
    cfg = TrainConfig(bn_policy="frozen_pretrained", **FAST)
    asm = build_assembly(stream, make_strategy("ft2", backbone), cfg, backbone)
    before = asm.snapshot_parameters("bn_buffers")
    run_session(asm, stream, 1, cfg)
    run_session(asm, stream, 2, cfg)
    assert torch.equal(before, asm.snapshot_parameters("bn_buffers"))
    running = build_assembly(stream, make_strategy("ft2", backbone), TrainConfig(**FAST), backbone)
    run_session(running, stream, 1, TrainConfig(**FAST))
    assert not torch.equal(before, running.snapshot_parameters("bn_buffers"))


def test_no_peek_and_order(backbone, stream):
    cfg = TrainConfig(record_access=True, **FAST)
    asm = build_assembly(stream, make_strategy("none", backbone), cfg, backbone)
    with pytest.raises(OutOfOrderSession):
        run_session(asm, stream, 2, cfg)
    for j in (1, 2):
        res = run_session(asm, stream, j, cfg)
        assert res.accessed_ids == set(stream.session(j).train.sample_ids)
        assert sorted(res.accuracies) == list(range(1, j + 1))
        assert all(0.0 <= a <= 1.0 for a in res.accuracies.values())
    with pytest.raises(OutOfOrderSession):
        run_session(asm, stream, 2, cfg)


def test_per_task_transforms_frozen_after_their_session(backbone):
    st = make_synthetic_stream(3, 2, 10, (3, 32, 32), seed=4)
    cfg = TrainConfig(**FAST)
    asm = build_assembly(st, make_strategy("it_pad", backbone, transform_mode="per_task"), cfg, backbone)
    snaps = {}
    for j in (1, 2, 3):
        run_session(asm, st, j, cfg)
        snaps[j] = asm.transforms[f"task{j}"].theta.detach().clone()
        assert torch.count_nonzero(snaps[j]) > 0
        for i in range(1, j):
            assert torch.equal(asm.transforms[f"task{i}"].theta, snaps[i])


def test_resume_reproduces_next_session(backbone, stream, tmp_path):
    torch.use_deterministic_algorithms(True)
    try:
        cfg = TrainConfig(**FAST)
        strat = make_strategy("ft1", backbone, regularizer="path_integral")
        full = run_sequence(stream, strat, cfg, backbone, run_dir=tmp_path / "a")
        part = run_sequence(stream, strat, cfg, backbone, run_dir=tmp_path / "b", stop_after=1)
        assert part.matrix.completed_rows() == 1
        resumed = run_sequence(stream, strat, cfg, backbone, run_dir=tmp_path / "b",
                               resume_from=tmp_path / "b" / "session_1.pt")
    finally:
        torch.use_deterministic_algorithms(False)
    assert resumed.matrix.get(2, 1) == full.matrix.get(2, 1)
    assert resumed.matrix.get(2, 2) == full.matrix.get(2, 2)
    for (n, a), (_, b) in zip(full.assembly.state_dict().items(), resumed.assembly.state_dict().items()):
        assert torch.equal(a, b), n
    assert (tmp_path / "a" / "matrix.csv").exists() and (tmp_path / "a" / "log.jsonl").exists()
    with pytest.raises(CheckpointMissing):
        run_sequence(stream, strat, cfg, backbone, resume_from=tmp_path / "missing.pt")


def test_deterministic_given_seed(backbone, stream):
    cfg = TrainConfig(**FAST)
    a = run_sequence(stream, make_strategy("it_pad", backbone), cfg, backbone)
    b = run_sequence(stream, make_strategy("it_pad", backbone), cfg, backbone)
    assert (a.matrix.values[~torch.isnan(torch.tensor(a.matrix.values)).numpy()]
            == b.matrix.values[~torch.isnan(torch.tensor(b.matrix.values)).numpy()]).all()


@pytest.mark.parametrize("reg", ["lwf", "lwm", "ewc", "path_integral"])
def test_regularized_finetuning_runs(backbone, stream, reg):
    res = run_sequence(stream, make_strategy("ft1", backbone, regularizer=reg),
                       TrainConfig(epochs_per_session=1, batch_size=8), backbone)
    assert res.matrix.is_complete()


def test_distillation_rejected_on_domain_stream(backbone):
    dom = make_synthetic_domain_stream(2, 3, 5, (3, 32, 32), seed=0)
    for reg in ("lwf", "lwm"):
        with pytest.raises(IncompatibleStrategy):
            run_sequence(dom, make_strategy("ft1", backbone, regularizer=reg), TrainConfig(**FAST), backbone)
    res = run_sequence(dom, make_strategy("it_pad", backbone, transform_mode="per_task"),
                       TrainConfig(**FAST), backbone)
    assert res.matrix.is_complete()


def test_joint_on_single_task_matches_sequence(backbone):
    one = make_synthetic_stream(1, 2, 10, (3, 32, 32), seed=2)
    cfg = TrainConfig(**FAST)
    strat = make_strategy("none", backbone)
    assert run_joint(one, strat, cfg, backbone) == run_sequence(one, strat, cfg, backbone).matrix.get(1, 1)


def test_online_mode_single_pass(backbone, stream):
    res = run_sequence(stream, make_strategy("none", backbone),
                       TrainConfig(online=True, epochs_per_session=9, batch_size=8), backbone)
    assert res.sessions[0].steps == -(-len(stream.session(1).train) // 8)


def test_backbone_random_init_is_independent_copy(stream):
    net = tiny_resnet()
    before = {n: p.clone() for n, p in net.state_dict().items()}
    run_sequence(stream, make_strategy("ft2", net), TrainConfig(**FAST), net)
    for n, p in net.state_dict().items():
        assert torch.equal(p, before[n])
