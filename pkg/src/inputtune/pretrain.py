"""Desk-scale "pretrained" backbone: a short supervised run on a synthetic source task.

The checkpoint shipped in ``inputtune/data`` was produced by
:func:`pretrain_tiny_backbone` with its default arguments; it is regenerated
on demand when missing.
"""

from __future__ import annotations

import logging
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import tiny_resnet
from .synthetic import make_synthetic_dataset

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"
TINY_CHECKPOINT = DATA_DIR / "tiny_backbone.pt"
SOURCE_SEED = 777_000  # disjoint from every seed used to build downstream streams


def source_dataset(num_classes=32, samples_per_class=80, side=32, styles=(0,), seed=SOURCE_SEED):
    parts = [make_synthetic_dataset(num_classes, samples_per_class, (3, side, side), seed + s,
                                    style=s, prototype_seed=seed) for s in styles]
    x = torch.cat([p.images for p in parts])
    y = torch.cat([p.labels for p in parts])
    return x, y, num_classes


def pretrain_tiny_backbone(epochs=15, batch_size=64, lr=2e-3, seed=0, side=32, **source_kwargs):
    torch.manual_seed(seed)
    x, y, k = source_dataset(side=side, **source_kwargs)
    net = tiny_resnet(input_side=side)
    clf = nn.Linear(net.feature_dim, k)
    opt = torch.optim.Adam(list(net.parameters()) + list(clf.parameters()), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    g = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        net.train()
        order = torch.randperm(len(y), generator=g)
        total, correct = 0.0, 0
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            logits = clf(net(x[idx]))
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
        sched.step()
        log.info("pretrain epoch %d loss %.3f acc %.3f", epoch, total / len(y), correct / len(y))
    net.eval()
    return net


def load_tiny_pretrained(bn_policy="running", path=TINY_CHECKPOINT, rebuild=False):
    """Tiny backbone with the shipped source-task weights."""
    path = Path(path)
    if rebuild or not path.exists():
        net = pretrain_tiny_backbone()
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(net.state_dict(), path)
    net = tiny_resnet(bn_policy=bn_policy)
    net.load_state_dict(torch.load(path, weights_only=True))
    net.eval()
    return net
