"""Backbone + incremental head + optional input transform, with named parameter groups.

The tuning strategy decides which groups receive gradients:

==================  =============================================
kind                trainable
==================  =============================================
none                head
bias_tuning         head + every backbone bias
ft1                 head + last backbone block
ft2                 head + last two backbone blocks
it_pad / it_add     head + transform parameters
it_pad_plus_bias    head + transform parameters + backbone biases
==================  =============================================
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn

from .backbone import ResNetBackbone
from .errors import IncompatibleStrategy, MissingTransform, ShapeMismatch, UnknownGroup
from .head import IncrementalHead
from .transforms import InputTransform, TransformConfig, resize_to

KINDS = ("none", "bias_tuning", "ft1", "ft2", "it_pad", "it_add", "it_pad_plus_bias")
IT_KINDS = ("it_pad", "it_add", "it_pad_plus_bias")
FT_KINDS = ("ft1", "ft2")
REGULARIZERS = ("none", "lwf", "lwm", "ewc", "path_integral")
GROUPS = ("all", "backbone", "last_block", "last_two_blocks", "biases", "head", "transform",
          "bn_buffers")
GROUP_ALIASES = {"theta_m": "backbone", "theta_m_prime": "last_block",
                 "theta_m_second": "last_two_blocks", "theta_c": "head", "theta_g": "transform"}


@dataclass(frozen=True)
class TuningStrategy:
    kind: str = "none"
    transform_mode: str = "shared"  # shared | per_task (IT kinds only)
    transform: TransformConfig | None = None
    regularizer: str = "none"
    regularizer_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise IncompatibleStrategy(f"unknown strategy kind {self.kind!r}")
        if self.regularizer not in REGULARIZERS:
            raise IncompatibleStrategy(f"unknown regularizer {self.regularizer!r}")
        if self.regularizer != "none" and self.kind not in FT_KINDS:
            raise IncompatibleStrategy(
                f"regularizer {self.regularizer!r} only applies to fine-tuning strategies, not {self.kind!r}"
            )
        if self.transform_mode not in ("shared", "per_task"):
            raise IncompatibleStrategy(f"unknown transform_mode {self.transform_mode!r}")
        if self.kind in IT_KINDS:
            if self.transform is None:
                raise IncompatibleStrategy(f"{self.kind} needs a transform config")
            want = "add" if self.kind == "it_add" else ("pad", "pad_latent")
            if self.transform.kind not in (want if isinstance(want, tuple) else (want,)):
                raise IncompatibleStrategy(f"{self.kind} cannot use a {self.transform.kind!r} transform")
        elif self.transform is not None:
            raise IncompatibleStrategy(f"{self.kind} takes no transform")
        if self.transform_mode == "per_task" and self.kind not in IT_KINDS:
            raise IncompatibleStrategy("per_task transforms need an input-tuning strategy")

    @property
    def is_input_tuning(self) -> bool:
        return self.kind in IT_KINDS

    @property
    def parallel(self) -> bool:
        return self.transform_mode == "per_task"

    @property
    def name(self) -> str:
        parts = [self.kind]
        if self.is_input_tuning:
            if self.transform.kind == "pad_latent":
                parts.append("latent")
            if self.transform.freeze_after_first_task:
                parts.append("fix")
            parts.append(f"p{self.transform.thickness}" if self.transform.kind != "add" else "")
            if self.parallel:
                parts.append("parallel")
        if self.regularizer != "none":
            parts.append(self.regularizer)
        return "-".join(p for p in parts if p)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TuningStrategy":
        d = dict(d)
        if d.get("transform") is not None:
            d["transform"] = TransformConfig(**d["transform"])
        return cls(**d)


def make_strategy(kind: str, backbone: ResNetBackbone | None = None, thickness: int | None = None,
                  **kwargs) -> TuningStrategy:
    """Convenience constructor filling the transform config from the backbone geometry.

    Extra names understood besides the core kinds: ``it_pad_latent``,
    ``it_pad_small`` (thickness / 4) and ``it_pad_fix`` (frame frozen after task 1).
    """
    side = backbone.input_side if backbone is not None else 224
    channels = backbone.in_channels if backbone is not None else 3
    default_p = max(1, round(side * 32 / 224))
    p = default_p if thickness is None else thickness
    if kind in ("it_pad", "it_pad_plus_bias"):
        tc = TransformConfig("pad", p, side, channels)
    elif kind == "it_pad_small":
        kind, tc = "it_pad", TransformConfig("pad", max(1, p // 4), side, channels)
    elif kind == "it_pad_fix":
        kind, tc = "it_pad", TransformConfig("pad", p, side, channels, freeze_after_first_task=True)
    elif kind == "it_pad_latent":
        lat_side = backbone.latent_side() if backbone is not None else 56
        lat_ch = backbone.latent_channels if backbone is not None else 64
        lp = thickness if thickness is not None else max(1, round(lat_side * 2 / 56))
        kind, tc = "it_pad", TransformConfig("pad_latent", lp, lat_side, lat_ch, insertion_point="stem")
    elif kind == "it_add":
        tc = TransformConfig("add", 0, side, channels)
    else:
        tc = None
    return TuningStrategy(kind=kind, transform=tc, **kwargs)


class ModelAssembly(nn.Module):
    """``head(backbone(transform(x)))`` with strategy-driven gradient routing."""

    def __init__(self, backbone: ResNetBackbone, total_classes: int, strategy: TuningStrategy,
                 seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.head = IncrementalHead(backbone.feature_dim, total_classes, seed=seed)
        self.transforms = nn.ModuleDict()
        self.strategy = strategy
        self.current_session = 0
        tc = strategy.transform
        if tc is not None:
            if tc.kind == "pad_latent":
                backbone.check_insertion_point(tc.insertion_point)
                if tc.side != backbone.latent_side() or tc.channels != backbone.latent_channels:
                    raise ShapeMismatch(
                        f"latent frame geometry ({tc.channels}x{tc.side}) does not match the "
                        f"backbone latent map ({backbone.latent_channels}x{backbone.latent_side()})"
                    )
            elif tc.side != backbone.input_side or tc.channels != backbone.in_channels:
                raise ShapeMismatch("transform geometry does not match the backbone input")
            if not strategy.parallel:
                self.transforms["shared"] = InputTransform(tc)
        self._group_cache = None
        self.set_trainable(session=1)

    # --- geometry ------------------------------------------------------

    @property
    def input_side(self) -> int:
        """Side the data pipeline must resize images to before calling ``forward``."""
        tc = self.strategy.transform
        if tc is None or tc.kind == "add":
            return self.backbone.input_side
        if tc.kind == "pad":
            return tc.inner_side
        return tc.inner_side * self.backbone.stem_stride

    def prepare_inputs(self, x: torch.Tensor) -> torch.Tensor:
        mode = self.strategy.transform.interpolation if self.strategy.transform else "bilinear"
        return resize_to(x, self.input_side, mode)

    # --- transforms ----------------------------------------------------

    def allocate_transform(self, j: int) -> InputTransform:
        key = f"task{j}"
        if key not in self.transforms:
            dev = self.head.weight.device
            self.transforms[key] = InputTransform(self.strategy.transform).to(dev)
            self._group_cache = None
        return self.transforms[key]

    def has_transform(self, j: int) -> bool:
        return f"task{j}" in self.transforms

    def default_transform_key(self, t: int):
        if not self.strategy.is_input_tuning:
            return None
        return t if self.strategy.parallel else "shared"

    def _transform(self, task):
        if not self.strategy.is_input_tuning:
            return None
        if not self.strategy.parallel:
            return self.transforms["shared"]
        if task is None or task == "shared":
            raise MissingTransform("per-task mode needs an explicit task index")
        key = f"task{task}"
        if key not in self.transforms:
            raise MissingTransform(f"transform for task {task} was never trained")
        return self.transforms[key]

    # --- forward -------------------------------------------------------

    def features(self, x: torch.Tensor, task=None, return_activation: bool = False):
        if x.dim() != 4:
            raise ShapeMismatch(f"expected N x C x H x W input, got {tuple(x.shape)}")
        if x.shape[-1] != self.input_side or x.shape[-2] != self.input_side:
            raise ShapeMismatch(
                f"input side {tuple(x.shape[-2:])} != expected {self.input_side} for {self.strategy.kind}"
            )
        g = self._transform(task)
        if g is not None and g.config.kind == "pad_latent":
            return self.backbone(x, latent_transform=g, return_activation=return_activation)
        if g is not None:
            x = g(x)
        return self.backbone(x, return_activation=return_activation)

    def forward(self, x: torch.Tensor, task=None) -> torch.Tensor:
        return self.head(self.features(x, task))

    # --- parameter groups ----------------------------------------------

    def group_names(self, group: str) -> list[str]:
        group = GROUP_ALIASES.get(group, group)
        bb = self.backbone
        if group == "all":
            return [n for n, _ in self.named_parameters()]
        if group == "backbone":
            return [f"backbone.{n}" for n, _ in bb.named_parameters()]
        if group == "last_block":
            return [f"backbone.{n}" for n in bb.block_parameter_names(bb.last_block)]
        if group == "last_two_blocks":
            return [f"backbone.{n}" for n in bb.block_parameter_names(bb.last_two_blocks)]
        if group == "biases":
            return [f"backbone.{n}" for n in bb.bias_parameter_names()]
        if group == "head":
            return [f"head.{n}" for n, _ in self.head.named_parameters()]
        if group == "transform":
            return [f"transforms.{n}" for n, _ in self.transforms.named_parameters()]
        if group == "bn_buffers":
            return [f"backbone.{n}" for n, _ in bb.named_buffers()]
        raise UnknownGroup(f"unknown parameter group {group!r}; known: {GROUPS}")

    def snapshot_parameters(self, group: str = "all") -> torch.Tensor:
        """Detached flat copy of a parameter group (or of the BN buffers)."""
        names = self.group_names(group)
        src = dict(self.named_buffers()) if GROUP_ALIASES.get(group, group) == "bn_buffers" \
            else dict(self.named_parameters())
        parts = [src[n].detach().reshape(-1).to(torch.float64).clone() for n in names]
        if not parts:
            return torch.zeros(0, dtype=torch.float64)
        return torch.cat(parts)

    def trainable_names(self, session: int | None = None) -> set:
        """Names that the strategy trains during ``session``."""
        session = self.current_session if session is None else session
        k = self.strategy.kind
        names = set(self.group_names("head"))
        if k in ("bias_tuning", "it_pad_plus_bias"):
            names |= set(self.group_names("biases"))
        if k == "ft1":
            names |= set(self.group_names("last_block"))
        if k == "ft2":
            names |= set(self.group_names("last_two_blocks"))
        if k in IT_KINDS:
            tc = self.strategy.transform
            if self.strategy.parallel:
                key = f"task{session}"
                if key in self.transforms:
                    names |= {f"transforms.{key}.{n}" for n, _ in self.transforms[key].named_parameters()}
            elif not (tc.freeze_after_first_task and session > 1):
                names |= {f"transforms.shared.{n}" for n, _ in self.transforms["shared"].named_parameters()}
        return names

    def set_trainable(self, session: int) -> list[nn.Parameter]:
        """Enable gradients exactly on the strategy's set for ``session``; returns those parameters."""
        self.current_session = session
        train = self.trainable_names(session)
        out = []
        for n, p in self.named_parameters():
            p.requires_grad_(n in train)
            if n in train:
                out.append(p)
        return out

    def backbone_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.backbone.parameters())

    def learnt_parameter_count(self) -> dict:
        """Counts reported next to results: head, extra (non-head) parameters per task."""
        sizes = dict(self.named_parameters())
        head = sum(sizes[n].numel() for n in self.group_names("head"))
        k = self.strategy.kind
        extra = 0
        if k in ("bias_tuning", "it_pad_plus_bias"):
            extra += sum(sizes[n].numel() for n in self.group_names("biases"))
        if k in FT_KINDS:
            grp = "last_block" if k == "ft1" else "last_two_blocks"
            extra += sum(sizes[n].numel() for n in self.group_names(grp))
        if self.strategy.is_input_tuning:
            from .transforms import param_count

            extra += param_count(self.strategy.transform)
        return {"head": head, "extra": extra, "per_task": self.strategy.parallel}

    # --- checkpoints ---------------------------------------------------

    def state_for_checkpoint(self) -> dict:
        groups = {}
        for g in ("backbone", "head", "transform"):
            groups[g] = {n: p.detach().cpu().clone() for n, p in self.named_parameters()
                         if n in set(self.group_names(g))}
        return {
            "groups": groups,
            "bn_buffers": {n: b.detach().cpu().clone() for n, b in self.backbone.named_buffers()},
            "strategy": self.strategy.to_dict(),
            "head_slices": {int(k): list(v) for k, v in self.head.slices.items()},
            "head_slice_snapshots": {int(k): (w.cpu().clone(), b.cpu().clone())
                                     for k, (w, b) in self.head.slice_snapshots.items()},
            "transform_keys": list(self.transforms.keys()),
            "current_session": self.current_session,
        }

    def load_checkpoint_state(self, state: dict) -> None:
        for key in state["transform_keys"]:
            if key not in self.transforms:
                self.transforms[key] = InputTransform(self.strategy.transform)
        params = dict(self.named_parameters())
        with torch.no_grad():
            for g in state["groups"].values():
                for n, v in g.items():
                    params[n].copy_(v)
            bufs = dict(self.backbone.named_buffers())
            for n, v in state["bn_buffers"].items():
                bufs[n].copy_(v)
        self.head.slices = {int(k): tuple(v) for k, v in state["head_slices"].items()}
        self.head.slice_snapshots = {int(k): (w.clone(), b.clone())
                                     for k, (w, b) in state["head_slice_snapshots"].items()}
        self.set_trainable(state["current_session"])


def assemble(backbone: ResNetBackbone, total_classes: int, strategy: TuningStrategy,
             seed: int = 0) -> ModelAssembly:
    return ModelAssembly(backbone, total_classes, strategy, seed=seed)
