"""Learnable input-space transformations.

Two families are provided:

* a *frame*: the image is shrunk to an inner side ``S - 2p`` and surrounded by
  a ``p``-pixel border of learnable values, giving a canvas of side ``S``;
* a *perturbation*: a learnable tensor with the input's shape, added to every
  image.

The frame can also be applied to an intermediate feature map (``pad_latent``).
All parameters start at zero and live in normalized input space.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch

KINDS = ("pad", "add", "pad_latent")


@dataclass(frozen=True)
class TransformConfig:
    kind: str = "pad"
    thickness: int = 32
    side: int = 224
    channels: int = 3
    insertion_point: str | None = None  # pad_latent only
    freeze_after_first_task: bool = False
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("pad", "pad_latent") and not 0 <= 2 * self.thickness < self.side:
            raise ShapeMismatch(
                f"frame thickness {self.thickness} needs 2p < side ({self.side})"
            )

    @property
    def inner_side(self) -> int:
        if self.kind == "add":
            return self.side
        return self.side - 2 * self.thickness

    def to_dict(self) -> dict:
        return asdict(self)


def border_size(side: int, thickness: int) -> int:
    return side * side - (side - 2 * thickness) ** 2


def param_count(config: TransformConfig) -> int:
    """Number of learnable values in one transform."""
    if config.kind == "add":
        return config.channels * config.side * config.side
    return config.channels * border_size(config.side, config.thickness)


def border_mask(side: int, thickness: int, device=None) -> torch.Tensor:
    mask = torch.ones(side, side, dtype=torch.bool, device=device)
    if thickness > 0:
        mask[thickness:side - thickness, thickness:side - thickness] = False
    else:
        mask[:] = False
    return mask


def _frame(x: torch.Tensor, frame: torch.Tensor, side: int, thickness: int) -> torch.Tensor:
    if x.dim() != 4:
        raise ShapeMismatch(f"expected a batch N x C x H x W, got shape {tuple(x.shape)}")
    inner = side - 2 * thickness
    if inner <= 0:
        raise ShapeMismatch(f"frame thickness {thickness} leaves no interior in side {side}")
    if x.shape[-2:] != (inner, inner):
        raise ShapeMismatch(
            f"frame of thickness {thickness} on side {side} needs inner side {inner}, "
            f"got {tuple(x.shape[-2:])}"
        )
    C = x.shape[1]
    if frame.shape != (C, border_size(side, thickness)):
        raise ShapeMismatch(
            f"frame parameter shape {tuple(frame.shape)} != {(C, border_size(side, thickness))}"
        )
    mask = border_mask(side, thickness, device=x.device)
    canvas = torch.zeros(C, side, side, dtype=frame.dtype, device=x.device)
    canvas = canvas.masked_scatter(mask.expand(C, side, side), frame)
    return F.pad(x, (thickness,) * 4) + canvas


def apply_pad(x: torch.Tensor, frame: torch.Tensor, side: int, thickness: int) -> torch.Tensor:
    """Surround a batch of inner-resized images with a learnable frame.

    ``frame`` has shape ``(C, side**2 - (side - 2*thickness)**2)`` and fills the
    border positions in row-major order. The interior of the result is ``x``
    bit for bit.
    """
    return _frame(x, frame, side, thickness)


def apply_pad_latent(features: torch.Tensor, frame: torch.Tensor, side: int,
                     thickness: int) -> torch.Tensor:
    """Frame an intermediate activation map; same layout as :func:`apply_pad`."""
    if 2 * thickness >= side:
        raise ShapeMismatch(f"latent thickness {thickness} must be below half the side {side}")
    return _frame(features, frame, side, thickness)


def apply_add(x: torch.Tensor, perturbation: torch.Tensor) -> torch.Tensor:
    if x.dim() != 4 or x.shape[1:] != perturbation.shape:
        raise ShapeMismatch(
            f"perturbation shape {tuple(perturbation.shape)} does not match input {tuple(x.shape)}"
        )
    return x + perturbation


def extract_interior(x: torch.Tensor, thickness: int) -> torch.Tensor:
    if thickness == 0:
        return x
    return x[..., thickness:-thickness, thickness:-thickness]


class InputTransform(nn.Module):
    """One set of transform parameters, zero-initialized."""

    def __init__(self, config: TransformConfig):
        super().__init__()
        self.config = config
        c = config
        if c.kind == "add":
            shape = (c.channels, c.side, c.side)
        else:
            shape = (c.channels, border_size(c.side, c.thickness))
        self.theta = nn.Parameter(torch.zeros(shape))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        if c.kind == "add":
            return apply_add(x, self.theta)
        if c.kind == "pad":
            return apply_pad(x, self.theta, c.side, c.thickness)
        return apply_pad_latent(x, self.theta, c.side, c.thickness)

    def as_image(self) -> torch.Tensor:
        """Render the parameters as a ``C x S x S`` canvas (interior zero for frames)."""
        c = self.config
        with torch.no_grad():
            if c.kind == "add":
                return self.theta.detach().clone()
            inner = torch.zeros(1, c.channels, c.inner_side, c.inner_side)
            return self.forward(inner)[0]


def resize_to(x: torch.Tensor, side: int, mode: str = "bilinear") -> torch.Tensor:
    """Resize a batch to ``side x side``; a no-op when it already matches."""
    if x.shape[-2:] == (side, side):
        return x
    kwargs = {"align_corners": False} if mode in ("bilinear", "bicubic") else {}
    return F.interpolate(x, size=(side, side), mode=mode, **kwargs)


def save_transform_image(transform: InputTransform, path, mean=None, std=None) -> None:
    """Write the frame/perturbation as an image file for inspection."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    img = transform.as_image()
    if mean is not None and std is not None:
        img = img * torch.tensor(std).view(-1, 1, 1) + torch.tensor(mean).view(-1, 1, 1)
    arr = img.numpy().transpose(1, 2, 0)
    lo, hi = float(arr.min()), float(arr.max())
    arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    plt.imsave(str(path), arr, cmap="gray" if arr.ndim == 2 else None)
