"""Incremental classification head and the two inference paths.

During class-incremental training only the logits of the current session's
classes are computed (the "label trick"), so gradient never reaches the rows
of other sessions. At test time the task identity is unknown: the standard
path scores all classes seen so far in one pass, the parallel path runs one
backbone pass per task transform and fuses the per-task outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import MissingTransform, NoTrainedSessions, UnregisteredSession
from .streams import CLASS_INCREMENTAL, DOMAIN_INCREMENTAL


class IncrementalHead(nn.Module):
    def __init__(self, feature_dim: int, total_classes: int, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.total_classes = total_classes
        g = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(feature_dim)
        self.weight = nn.Parameter(torch.empty(total_classes, feature_dim).uniform_(-bound, bound, generator=g))
        self.bias = nn.Parameter(torch.empty(total_classes).uniform_(-bound, bound, generator=g))
        self.slices: dict[int, tuple] = {}
        # per-session copies of a slice's parameters, taken when the session ends
        self.slice_snapshots: dict[int, tuple] = {}

    def register_session(self, j: int, class_ids) -> None:
        class_ids = tuple(int(c) for c in class_ids)
        if max(class_ids) >= self.total_classes:
            raise ValueError(f"class id {max(class_ids)} exceeds head size {self.total_classes}")
        for k, ids in self.slices.items():
            if k != j and set(ids) & set(class_ids):
                raise ValueError(f"session {j} classes overlap session {k}")
        self.slices[j] = class_ids

    def slice_index(self, j: int) -> torch.Tensor:
        if j not in self.slices:
            raise UnregisteredSession(f"session {j} has no registered class slice")
        return torch.tensor(self.slices[j], dtype=torch.long, device=self.weight.device)

    def freeze_slice(self, j: int) -> None:
        idx = self.slice_index(j)
        self.slice_snapshots[j] = (self.weight.detach()[idx].clone(), self.bias.detach()[idx].clone())

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.linear(features, self.weight, self.bias)

    def slice_logits(self, features: torch.Tensor, j: int, frozen: bool = False) -> torch.Tensor:
        if frozen and j in self.slice_snapshots:
            w, b = self.slice_snapshots[j]
            return F.linear(features, w, b)
        idx = self.slice_index(j)
        return F.linear(features, self.weight[idx], self.bias[idx])


def masked_train_logits(head: IncrementalHead, features: torch.Tensor, j: int, mode: str,
                        labels: torch.Tensor | None = None):
    """Logits used by the session-``j`` loss.

    Class-incremental: only the slice of session ``j`` (labels, when given, are
    re-indexed to slice-local ids). Domain-incremental: all logits, labels
    untouched. Returns ``(logits, labels)``.
    """
    if mode == DOMAIN_INCREMENTAL:
        return head(features), labels
    logits = head.slice_logits(features, j)
    if labels is not None:
        idx = head.slice_index(j)
        lookup = torch.full((head.total_classes,), -1, dtype=torch.long, device=labels.device)
        lookup[idx] = torch.arange(len(idx), device=labels.device)
        labels = lookup[labels]
        if (labels < 0).any():
            raise ValueError(f"batch holds labels outside session {j}")
    return logits, labels


@dataclass
class PredictionBundle:
    blocks: list  # per-task logit blocks y_j
    fused: torch.Tensor  # N x K decision vectors
    class_ids: list  # global class id of each fused column
    predicted: torch.Tensor  # N global class ids

    @classmethod
    def from_fused(cls, blocks, fused, class_ids):
        # argmax returns the first maximal index -> ties go to the lowest class id
        cols = torch.argmax(fused, dim=1)
        ids = torch.tensor(class_ids, dtype=torch.long)
        return cls(blocks, fused, list(class_ids), ids[cols.cpu()])


def _seen_sessions(assembly, t):
    if t < 1:
        raise NoTrainedSessions("no session has been trained yet")
    return list(range(1, t + 1))


def predict_standard(assembly, x: torch.Tensor, t: int, mode: str = CLASS_INCREMENTAL) -> PredictionBundle:
    """One forward pass; decision over classes of sessions 1..t (all classes when domain-incremental)."""
    sessions = _seen_sessions(assembly, t)
    transform_key = assembly.default_transform_key(t)
    with torch.no_grad():
        logits = assembly(x, task=transform_key)
    if mode == DOMAIN_INCREMENTAL:
        ids = list(range(assembly.head.total_classes))
        return PredictionBundle.from_fused([logits], logits, ids)
    ids, blocks = [], []
    for j in sessions:
        idx = assembly.head.slices[j]
        blocks.append(logits[:, list(idx)])
        ids.extend(idx)
    fused = torch.cat(blocks, dim=1)
    return PredictionBundle.from_fused(blocks, fused, ids)


def predict_parallel(assembly, x: torch.Tensor, t: int, mode: str = CLASS_INCREMENTAL) -> PredictionBundle:
    """One branch per task transform ``1..t``; concatenate (class-inc) or per-class max (domain-inc)."""
    sessions = _seen_sessions(assembly, t)
    for j in sessions:
        if not assembly.has_transform(j):
            raise MissingTransform(f"no transform trained for task {j}")
    blocks = []
    with torch.no_grad():
        for j in sessions:
            feats = assembly.features(x, task=j)
            if mode == DOMAIN_INCREMENTAL:
                blocks.append(assembly.head(feats))
            else:
                blocks.append(assembly.head.slice_logits(feats, j, frozen=True))
    if mode == DOMAIN_INCREMENTAL:
        fused = torch.stack(blocks).amax(dim=0)
        return PredictionBundle.from_fused(blocks, fused, list(range(assembly.head.total_classes)))
    ids = [c for j in sessions for c in assembly.head.slices[j]]
    return PredictionBundle.from_fused(blocks, torch.cat(blocks, dim=1), ids)


def fuse_concat(blocks) -> torch.Tensor:
    return torch.cat(list(blocks), dim=1)


def fuse_max(blocks) -> torch.Tensor:
    return torch.stack(list(blocks)).amax(dim=0)


def write_predictions(path, sample_ids, bundle: PredictionBundle, labels) -> None:
    """Per-sample CSV: sample id, true class, predicted class, one column per fused logit."""
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "true_class", "predicted_class"] + [f"logit_{c}" for c in bundle.class_ids])
        fused = bundle.fused.detach().cpu().tolist()
        for sid, y, p, row in zip(sample_ids, labels.tolist(), bundle.predicted.tolist(), fused):
            w.writerow([sid, y, p] + [repr(v) for v in row])
