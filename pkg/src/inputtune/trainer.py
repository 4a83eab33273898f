"""Session loop: train on one task at a time, evaluate on every task seen so far."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .assembly import ModelAssembly, TuningStrategy, assemble
from .errors import CheckpointMissing, IncompatibleStrategy, OutOfOrderSession
from .head import masked_train_logits, predict_parallel, predict_standard
from .metrics import AccuracyMatrix
from .regularizers import Regularizer, make_regularizer
from .streams import CLASS_INCREMENTAL, DOMAIN_INCREMENTAL, TaskStream

log = logging.getLogger(__name__)

_STAGES = {"split": 0, "init": 1, "shuffle": 2}


def derive_seed(root: int, stage: str, *extra: int) -> int:
    """Sub-seed for one stochastic stage, derived from the run's root seed."""
    ss = np.random.SeedSequence([int(root), _STAGES[stage], *[int(e) for e in extra]])
    return int(ss.generate_state(1)[0])


@dataclass
class TrainConfig:
    epochs_per_session: int = 20
    batch_size: int = 16
    lr: float = 1e-3  # head and transform parameters
    backbone_lr: float = 1e-4  # backbone groups under FT / BT
    weight_decay: float = 0.0
    seed: int = 0
    online: bool = False  # single pass over each session's data
    bn_policy: str | None = None  # overrides the backbone's policy when set
    device: str = "cpu"
    eval_batch_size: int = 256
    record_access: bool = False

    def __post_init__(self):
        if self.epochs_per_session < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_session and batch_size must be >= 1")

    @property
    def epochs(self) -> int:
        return 1 if self.online else self.epochs_per_session


@dataclass
class SessionResult:
    index: int
    accuracies: dict  # tau -> a_{j, tau}
    steps: int
    seconds: float
    final_loss: float
    checkpoint: str | None = None
    accessed_ids: set = field(default_factory=set)


@dataclass
class SequenceResult:
    matrix: AccuracyMatrix
    sessions: list
    assembly: ModelAssembly
    strategy: TuningStrategy


def _strategy_regularizer(strategy: TuningStrategy, mode: str) -> Regularizer:
    reg = make_regularizer(strategy.regularizer, **strategy.regularizer_params)
    reg.check_mode(mode)
    return reg


def check_compatibility(strategy: TuningStrategy, mode: str) -> None:
    if mode == DOMAIN_INCREMENTAL and strategy.regularizer in ("lwf", "lwm"):
        raise IncompatibleStrategy(
            f"{strategy.regularizer} cannot be used on a domain-incremental stream "
            "(distillation targets old-class units, which do not exist there)"
        )


def _make_optimizer(assembly: ModelAssembly, params, config: TrainConfig):
    backbone_ids = {id(p) for p in assembly.backbone.parameters()}
    bb = [p for p in params if id(p) in backbone_ids]
    rest = [p for p in params if id(p) not in backbone_ids]
    groups = [g for g in ({"params": rest, "lr": config.lr}, {"params": bb, "lr": config.backbone_lr})
              if g["params"]]
    return torch.optim.Adam(groups, weight_decay=config.weight_decay)


def evaluate(assembly: ModelAssembly, stream: TaskStream, tau: int, t: int,
             batch_size: int = 256, return_bundles: bool = False):
    """Accuracy of the model after session ``t`` on the test set of task ``tau``."""
    data = stream.session(tau).test
    predict = predict_parallel if assembly.strategy.parallel else predict_standard
    dev = assembly.head.weight.device
    assembly.eval()
    correct, bundles = 0, []
    for start in range(0, len(data), batch_size):
        xb = assembly.prepare_inputs(data.images[start:start + batch_size].to(dev))
        yb = data.labels[start:start + batch_size]
        bundle = predict(assembly, xb, t, stream.mode)
        correct += int((bundle.predicted == yb).sum())
        if return_bundles:
            bundles.append(bundle)
    acc = correct / max(len(data), 1)
    return (acc, bundles) if return_bundles else acc


def run_session(assembly: ModelAssembly, stream: TaskStream, j: int, config: TrainConfig,
                regularizer: Regularizer | None = None, log_file=None) -> SessionResult:
    """Train session ``j`` (1-based), consolidate regularizer state, evaluate tasks ``1..j``."""
    done = getattr(assembly, "sessions_completed", 0)
    if j != done + 1:
        raise OutOfOrderSession(f"session {j} requested but {done} sessions are complete")
    regularizer = regularizer or Regularizer()
    session = stream.session(j)
    mode = stream.mode
    dev = torch.device(config.device)
    head = assembly.head
    strategy = assembly.strategy

    if mode == CLASS_INCREMENTAL:
        head.register_session(j, session.class_ids)
    if strategy.parallel:
        assembly.allocate_transform(j)
    task_key = assembly.default_transform_key(j)
    params = assembly.set_trainable(j)
    opt = _make_optimizer(assembly, params, config)
    regularizer.begin_session(assembly, j)
    upstream_frozen = assembly.backbone_frozen() and not strategy.is_input_tuning

    x_all = assembly.prepare_inputs(session.train.images.to(dev))
    y_all = session.train.labels.to(dev)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "shuffle", j))
    n = len(y_all)
    steps, loss_val, accessed = 0, float("nan"), set()
    t0 = time.perf_counter()
    named = [(name, p) for name, p in assembly.named_parameters() if p.requires_grad]
    for epoch in range(config.epochs):
        assembly.train()
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if config.record_access:
                accessed.update(session.train.sample_ids[i] for i in idx.tolist())
            opt.zero_grad(set_to_none=True)
            if upstream_frozen:
                with torch.no_grad():
                    feats = assembly.features(xb, task=task_key)
            else:
                feats = assembly.features(xb, task=task_key)
            logits, local = masked_train_logits(head, feats, j, mode, yb)
            ce = F.cross_entropy(logits, local)
            pen = regularizer.penalty(assembly, xb, feats, j)
            unreg = {}
            if regularizer.needs_unreg_grads:
                ce.backward(retain_graph=pen is not None)
                unreg = {name: p.grad.detach().clone() for name, p in named if p.grad is not None}
                if pen is not None:
                    pen.backward()
            else:
                (ce if pen is None else ce + pen).backward()
            opt.step()
            regularizer.after_step(assembly, unreg)
            steps += 1
            loss_val = float(ce.detach()) + (0.0 if pen is None else float(pen.detach()))
            if log_file is not None:
                log_file.write(json.dumps({"session": j, "epoch": epoch, "step": steps,
                                           "ce": float(ce.detach()),
                                           "penalty": None if pen is None else float(pen.detach())}) + "\n")
    seconds = time.perf_counter() - t0

    regularizer.end_session(assembly, session.train, j, mode)
    if mode == CLASS_INCREMENTAL:
        head.freeze_slice(j)
    assembly.sessions_completed = j
    for p in assembly.parameters():
        p.requires_grad_(False)
    assembly.eval()

    accs = {tau: evaluate(assembly, stream, tau, j, config.eval_batch_size) for tau in range(1, j + 1)}
    log.info("session %d: %s", j, " ".join(f"{100 * a:.1f}" for a in accs.values()))
    return SessionResult(j, accs, steps, seconds, loss_val, accessed_ids=accessed)


def _checkpoint(path, assembly, regularizer, matrix, config, j):
    torch.save({
        "session": j,
        "assembly": assembly.state_for_checkpoint(),
        "regularizer": regularizer.state_dict(),
        "matrix": matrix.values.copy(),
        "train_config": asdict(config),
    }, path)


def build_assembly(stream: TaskStream, strategy: TuningStrategy, config: TrainConfig, backbone):
    net = copy.deepcopy(backbone)
    if config.bn_policy is not None:
        net.bn_policy = config.bn_policy
    net.to(config.device)
    return assemble(net, stream.total_classes, strategy, seed=derive_seed(config.seed, "init")).to(config.device)


def run_sequence(stream: TaskStream, strategy: TuningStrategy, config: TrainConfig, backbone,
                 run_dir=None, resume_from=None, stop_after: int | None = None) -> SequenceResult:
    """Train sessions ``1..T`` in order and fill the accuracy matrix.

    With ``run_dir`` every session is checkpointed there together with the
    matrix and a JSON-lines step log. ``resume_from`` restarts right after the
    session stored in that checkpoint.
    """
    check_compatibility(strategy, stream.mode)
    assembly = build_assembly(stream, strategy, config, backbone)
    regularizer = _strategy_regularizer(strategy, stream.mode)
    matrix = AccuracyMatrix.empty(stream.num_tasks)
    first = 1
    if resume_from is not None:
        path = Path(resume_from)
        if not path.exists():
            raise CheckpointMissing(f"no checkpoint at {path}")
        state = torch.load(path, weights_only=False)
        assembly.load_checkpoint_state(state["assembly"])
        assembly.sessions_completed = state["session"]
        if hasattr(regularizer, "teacher"):
            regularizer.load_state_dict(state["regularizer"], assembly)
        else:
            regularizer.load_state_dict(state["regularizer"])
        matrix = AccuracyMatrix(state["matrix"])
        first = state["session"] + 1

    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "log.jsonl", "a")
    results = []
    last = stream.num_tasks if stop_after is None else min(stop_after, stream.num_tasks)
    try:
        for j in range(first, last + 1):
            res = run_session(assembly, stream, j, config, regularizer, log_file)
            for tau, a in res.accuracies.items():
                matrix.set(j, tau, a)
            if run_dir is not None:
                ck = run_dir / f"session_{j}.pt"
                _checkpoint(ck, assembly, regularizer, matrix, config, j)
                res.checkpoint = str(ck)
                matrix.to_csv(run_dir / "matrix.csv")
            results.append(res)
    finally:
        if log_file is not None:
            log_file.close()
    return SequenceResult(matrix, results, assembly, strategy)


def run_joint(stream: TaskStream, strategy: TuningStrategy, config: TrainConfig, backbone) -> float:
    """Joint learning: all sessions merged into one, standard supervised training."""
    merged = stream.merged()
    res = run_sequence(merged, strategy, config, backbone)
    return res.matrix.get(1, 1)
