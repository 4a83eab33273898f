"""Regularization-based continual-learning baselines.

Each strategy object follows the same small protocol used by the trainer:

* ``begin_session(assembly, j)`` before the first step of session ``j``;
* ``penalty(assembly, x, features, j)`` adds to the cross-entropy (or returns None);
* ``after_step(assembly, unreg_grads)`` after each optimizer step;
* ``end_session(assembly, train_data, j, mode)`` to consolidate.

The bare penalty functions are exposed too so they can be checked in isolation.
"""

from __future__ import annotations

import copy

import torch
import torch.nn.functional as F
from torch.func import functional_call, grad, vmap

from .errors import IncompatibleStrategy, NoTeacher
from .streams import DOMAIN_INCREMENTAL

DEFAULTS = {
    "lwf": {"temperature": 2.0, "weight": 1.0},
    "lwm": {"beta": 1.0, "gamma": 1.0, "temperature": 2.0},
    "ewc": {"alpha": 0.5, "strength": 5000.0, "fisher_batch": 64},
    "path_integral": {"damping": 0.1, "strength": 1.0},
}


# --- pure penalty functions -------------------------------------------------

def lwf_penalty(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                temperature: float = 2.0) -> torch.Tensor:
    """KL(teacher || student) between temperature-softened distributions, batch mean."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits must cover the same units")
    log_p_t = F.log_softmax(teacher_logits / temperature, dim=1)
    log_p_s = F.log_softmax(student_logits / temperature, dim=1)
    return (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1).mean()


def normalize_attention(maps: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    flat = maps.reshape(maps.shape[0], -1)
    return flat / flat.norm(dim=1, keepdim=True).clamp_min(eps)


def attention_distance(student_maps: torch.Tensor, teacher_maps: torch.Tensor) -> torch.Tensor:
    """Batch-mean L1 distance between per-map L2-normalized attention maps."""
    return (normalize_attention(student_maps) - normalize_attention(teacher_maps)).abs().sum(dim=1).mean()


def lwm_penalty(student_maps, teacher_maps, student_logits, teacher_logits, beta=1.0, gamma=1.0,
                temperature=2.0) -> torch.Tensor:
    out = gamma * lwf_penalty(student_logits, teacher_logits, temperature)
    if beta:
        out = out + beta * attention_distance(student_maps, teacher_maps)
    return out


def ewc_penalty(params: dict, anchor: dict, importance: dict, strength: float) -> torch.Tensor:
    """``strength * sum_i importance_i * (theta_i - anchor_i)**2`` over matching names."""
    total = None
    for n, omega in importance.items():
        term = (omega * (params[n] - anchor[n]) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return strength * total


def fuse_importance(old: dict | None, new: dict, alpha: float) -> dict:
    if old is None:
        old = {n: torch.zeros_like(v) for n, v in new.items()}
    return {n: alpha * old[n] + (1 - alpha) * new[n] for n in new}


def pathint_accumulate(omega: dict, grads: dict, deltas: dict) -> dict:
    """``omega_i += -g_i * delta_i`` in place; returns ``omega``."""
    for n, d in deltas.items():
        g = grads.get(n)
        if g is not None:
            omega[n] -= g * d
    return omega


def pathint_consolidate(omega: dict, total_change: dict, damping: float) -> dict:
    """Per-parameter importance contribution ``max(0, omega / (change**2 + damping))``."""
    return {n: (omega[n] / (total_change[n] ** 2 + damping)).clamp_min(0.0) for n in omega}


# --- gradient-weighted class activation maps -------------------------------

def gradcam_maps(assembly, x: torch.Tensor, class_idx: torch.Tensor, task=None,
                 create_graph: bool = False, logits_fn=None):
    """Grad-CAM at the last backbone block for the given classes.

    Returns ``(maps, logits)``; ``maps`` is ``N x h x w``. With
    ``create_graph`` the maps stay differentiable w.r.t. the parameters.
    """
    feats, act = assembly.features(x, task=task, return_activation=True)
    logits = assembly.head(feats) if logits_fn is None else logits_fn(feats)
    score = logits.gather(1, class_idx.view(-1, 1)).sum()
    if not act.requires_grad:
        # backbone and input carry no gradient: derive d(score)/d(act) manually
        act = act.detach().requires_grad_(True)
        feats2 = torch.flatten(assembly.backbone.avgpool(act), 1)
        logits2 = assembly.head(feats2) if logits_fn is None else logits_fn(feats2)
        score = logits2.gather(1, class_idx.view(-1, 1)).sum()
    (g,) = torch.autograd.grad(score, act, create_graph=create_graph, retain_graph=True)
    weights = g.mean(dim=(2, 3), keepdim=True)
    maps = F.relu((weights * act).sum(dim=1))
    return maps, logits


# --- stateful strategies -----------------------------------------------------

class Regularizer:
    kind = "none"
    needs_unreg_grads = False

    def __init__(self, **params):
        self.params = dict(DEFAULTS.get(self.kind, {}), **params)

    def check_mode(self, mode: str) -> None:
        pass

    def begin_session(self, assembly, j: int) -> None:
        pass

    def penalty(self, assembly, x, features, j: int):
        return None

    def after_step(self, assembly, unreg_grads: dict) -> None:
        pass

    def end_session(self, assembly, train_data, j: int, mode: str) -> None:
        pass

    def state_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    def load_state_dict(self, state: dict) -> None:
        self.params = dict(state["params"])


class _Distillation(Regularizer):
    """Shared teacher bookkeeping for LwF/LwM."""

    def __init__(self, **params):
        super().__init__(**params)
        self.teacher = None
        self.old_classes: list[int] = []

    def check_mode(self, mode):
        if mode == DOMAIN_INCREMENTAL:
            raise IncompatibleStrategy(
                f"{self.kind} is not defined for domain-incremental streams (no old-class units)"
            )

    def end_session(self, assembly, train_data, j, mode):
        teacher = copy.deepcopy(assembly)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        self.teacher = teacher
        self.old_classes = sorted({c for k in range(1, j + 1) for c in assembly.head.slices[k]})

    def _require_teacher(self, j):
        if self.teacher is None or j < 2:
            raise NoTeacher(f"{self.kind} has no teacher in session {j}")

    def state_dict(self):
        return {"kind": self.kind, "params": self.params, "old_classes": self.old_classes,
                "teacher": None if self.teacher is None else self.teacher.state_for_checkpoint()}

    def load_state_dict(self, state, assembly=None):
        super().load_state_dict(state)
        self.old_classes = list(state["old_classes"])
        if state["teacher"] is not None and assembly is not None:
            teacher = copy.deepcopy(assembly)
            teacher.load_checkpoint_state(state["teacher"])
            teacher.eval()
            for p in teacher.parameters():
                p.requires_grad_(False)
            self.teacher = teacher


class LwF(_Distillation):
    kind = "lwf"

    def penalty(self, assembly, x, features, j):
        if j < 2:
            return None
        self._require_teacher(j)
        idx = self.old_classes
        with torch.no_grad():
            t_logits = self.teacher(x)[:, idx]
        s_logits = assembly.head(features)[:, idx]
        return self.params["weight"] * lwf_penalty(s_logits, t_logits, self.params["temperature"])


class LwM(_Distillation):
    kind = "lwm"

    def penalty(self, assembly, x, features, j):
        if j < 2:
            return None
        self._require_teacher(j)
        idx = torch.tensor(self.old_classes)
        head_t = self.teacher.head
        with torch.no_grad():
            # the teacher's top old class drives both attention maps
            top = self.teacher(x)[:, idx].argmax(dim=1)
        t_maps, t_logits = gradcam_maps(self.teacher, x, top, logits_fn=lambda f: head_t(f)[:, idx])
        t_maps = t_maps.detach()
        s_maps, s_logits = gradcam_maps(assembly, x, top, create_graph=True,
                                        logits_fn=lambda f: assembly.head(f)[:, idx])
        return lwm_penalty(s_maps, t_maps, s_logits, t_logits.detach(), self.params["beta"],
                           self.params["gamma"], self.params["temperature"])


class _Quadratic(Regularizer):
    """Importance-weighted quadratic anchoring shared by EWC and Path Integral."""

    def __init__(self, **params):
        super().__init__(**params)
        self.importance: dict | None = None
        self.anchor: dict | None = None

    def penalty(self, assembly, x, features, j):
        if self.importance is None:
            return None
        params = dict(assembly.named_parameters())
        imp = {n: w for n, w in self.importance.items() if params[n].requires_grad}
        return ewc_penalty(params, self.anchor, imp, self.params["strength"])

    def _snapshot(self, assembly):
        return {n: p.detach().clone() for n, p in assembly.named_parameters() if p.requires_grad}

    def state_dict(self):
        return {"kind": self.kind, "params": self.params, "importance": self.importance,
                "anchor": self.anchor}

    def load_state_dict(self, state, assembly=None):
        super().load_state_dict(state)
        self.importance, self.anchor = state["importance"], state["anchor"]


def empirical_fisher(assembly, images: torch.Tensor, j: int, mode: str, names=None,
                     batch_size: int = 64) -> dict:
    """Diagonal Fisher: mean over samples of ``E_{c ~ p(c|x)} [(d log p(c|x) / d theta)^2]``.

    The expectation uses the model's own softmax over the session's output
    units (slice ``j`` when class-incremental). Per-sample gradients are exact.
    """
    from .head import masked_train_logits

    was_training = assembly.training
    assembly.eval()
    params = {n: p.detach() for n, p in assembly.named_parameters()}
    names = [n for n, p in assembly.named_parameters() if p.requires_grad] if names is None else list(names)
    buffers = {n: b.detach() for n, b in assembly.named_buffers()}
    task = assembly.default_transform_key(j)

    def log_probs(train_params, x1):
        p = dict(params, **train_params)
        logits_full = functional_call(assembly, (p, buffers), (x1.unsqueeze(0),), {"task": task})
        if mode == DOMAIN_INCREMENTAL:
            logits = logits_full
        else:
            logits = logits_full[:, list(assembly.head.slices[j])]
        return F.log_softmax(logits, dim=1)[0]

    train_params = {n: params[n] for n in names}
    fisher = {n: torch.zeros_like(v) for n, v in train_params.items()}

    def per_class_sq(tp, x1, c):
        g = grad(lambda q: log_probs(q, x1)[c])(tp)
        return {n: v ** 2 for n, v in g.items()}

    n_total = 0
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        with torch.no_grad():
            probs = torch.stack([log_probs(train_params, x1).exp() for x1 in xb])
        K = probs.shape[1]
        for c in range(K):
            sq = vmap(per_class_sq, in_dims=(None, 0, None))(train_params, xb, c)
            w = probs[:, c]
            for n in fisher:
                fisher[n] += (w.view(-1, *[1] * (sq[n].dim() - 1)) * sq[n]).sum(dim=0)
        n_total += len(xb)
    assembly.train(was_training)
    return {n: v / max(n_total, 1) for n, v in fisher.items()}


class EWC(_Quadratic):
    kind = "ewc"

    def end_session(self, assembly, train_data, j, mode):
        x = assembly.prepare_inputs(train_data.images.to(assembly.head.weight.device))
        fisher = empirical_fisher(assembly, x, j, mode, batch_size=int(self.params["fisher_batch"]))
        old = None if self.importance is None else {n: self.importance.get(n, torch.zeros_like(v))
                                                   for n, v in fisher.items()}
        self.importance = fuse_importance(old, fisher, self.params["alpha"])
        self.anchor = self._snapshot(assembly)


class PathIntegral(_Quadratic):
    kind = "path_integral"
    needs_unreg_grads = True

    def __init__(self, **params):
        super().__init__(**params)
        self.omega = None
        self.start = None
        self.prev = None

    def begin_session(self, assembly, j):
        self.start = self._snapshot(assembly)
        self.prev = {n: v.clone() for n, v in self.start.items()}
        self.omega = {n: torch.zeros_like(v) for n, v in self.start.items()}

    def after_step(self, assembly, unreg_grads):
        now = self._snapshot(assembly)
        deltas = {n: now[n] - self.prev[n] for n in self.omega}
        pathint_accumulate(self.omega, unreg_grads, deltas)
        self.prev = now

    def end_session(self, assembly, train_data, j, mode):
        end = self._snapshot(assembly)
        change = {n: end[n] - self.start[n] for n in self.omega}
        contrib = pathint_consolidate(self.omega, change, self.params["damping"])
        if self.importance is None:
            self.importance = contrib
        else:
            self.importance = {n: self.importance.get(n, 0) + contrib[n] for n in contrib}
        self.anchor = end
        self.omega = None


REGISTRY = {"none": Regularizer, "lwf": LwF, "lwm": LwM, "ewc": EWC, "path_integral": PathIntegral}


def make_regularizer(kind: str, **params) -> Regularizer:
    try:
        cls = REGISTRY[kind]
    except KeyError:
        raise IncompatibleStrategy(f"unknown regularizer {kind!r}") from None
    return cls(**params)
