"""Synthetic image families used as desk-scale datasets.

Each class has a prototype made of a few coloured Gaussian blobs plus an
oriented grating. Samples jitter the prototype (translation, contrast),
add a random distractor blob and pixel noise. A *style* recolours and
re-textures a family so that the same class structure can be rendered as
different "sources" or "domains".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .streams import (LabeledDataset, TaskStream, build_class_incremental_stream,
                      build_domain_incremental_stream, concat_class_incremental, split_per_class)

# Per-channel statistics of the style-0 family; every synthetic image is
# normalized with them, mimicking inputs normalized to the pretraining domain.
NORM_MEAN = 0.0
NORM_STD = 1.0


@dataclass(frozen=True)
class Style:
    background: float = 0.0
    contrast: float = 1.0
    noise: float = 0.35
    channel_perm: tuple | None = None
    invert: bool = False
    stripe_period: int = 0  # >0 overlays a fixed horizontal stripe texture

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.channel_perm is not None and x.shape[1] == len(self.channel_perm):
            x = x[:, list(self.channel_perm)]
        if self.invert:
            x = -x
        x = self.contrast * x + self.background
        if self.stripe_period:
            rows = np.arange(x.shape[-2])
            stripes = 0.6 * np.sign(np.sin(2 * np.pi * rows / self.stripe_period))
            x = x + stripes[None, None, :, None]
        return x


STYLES = {
    0: Style(),
    1: Style(background=0.8, contrast=1.3, noise=0.45, channel_perm=(2, 0, 1), invert=True,
             stripe_period=6),
    2: Style(background=-0.6, contrast=0.8, noise=0.3, channel_perm=(1, 2, 0), stripe_period=4),
    3: Style(background=0.4, contrast=1.6, noise=0.5, invert=True),
}


def _blob(yy, xx, cy, cx, sigma):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))


def _class_prototypes(num_classes, shape, rng, num_parts=8, parts_per_class=2):
    """Prototypes assembled from a dictionary of parts shared by all classes.

    Sharing parts makes classes overlap, so a class is identified by the
    combination (and layout) of parts plus its own grating.
    """
    C, H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    side = float(max(H, W))
    parts = []
    for _ in range(num_parts):
        sigma = rng.uniform(0.07, 0.15) * side
        colour = rng.normal(0, 1.0, C).astype(np.float32)
        parts.append((sigma, colour))
    protos = np.zeros((num_classes, C, H, W), dtype=np.float32)
    for k in range(num_classes):
        img = np.zeros((C, H, W), dtype=np.float32)
        for q in rng.choice(num_parts, size=parts_per_class, replace=False):
            sigma, colour = parts[q]
            cy, cx = rng.uniform(0.2, 0.8, 2) * np.array([H, W])
            img += colour[:, None, None] * _blob(yy, xx, cy, cx, sigma)[None]
        freq = rng.uniform(1.0, 4.0) / side
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        colour = rng.normal(0, 0.4, C).astype(np.float32)
        img += colour[:, None, None] * grating[None]
        protos[k] = img
    return protos


def render_samples(protos, labels, shape, style: Style, rng, max_shift=3, distractors=2) -> np.ndarray:
    C, H, W = shape
    n = len(labels)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    out = np.empty((n, C, H, W), dtype=np.float32)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    scales = rng.uniform(0.6, 1.4, size=n).astype(np.float32)
    for i, lab in enumerate(labels):
        img = np.roll(protos[lab], shift=tuple(shifts[i]), axis=(1, 2)) * scales[i]
        for _ in range(distractors):
            cy, cx = rng.uniform(0, 1, 2) * np.array([H, W])
            sigma = rng.uniform(0.05, 0.12) * max(H, W)
            colour = rng.normal(0, 0.8, C).astype(np.float32)
            img = img + colour[:, None, None] * _blob(yy, xx, cy, cx, sigma)
        out[i] = img
    out = style.apply(out)
    out = out + rng.normal(0, style.noise, size=out.shape)
    return out.astype(np.float32)


def make_synthetic_dataset(num_classes: int, samples_per_class: int, image_shape, seed: int,
                           style: int | Style = 0, source_id: str | None = None,
                           prototype_seed: int | None = None) -> LabeledDataset:
    """Class-conditional images; ``prototype_seed`` fixes the classes independently of sampling."""
    shape = tuple(image_shape)
    st = STYLES[style] if isinstance(style, int) else style
    proto_rng = np.random.default_rng(seed if prototype_seed is None else prototype_seed)
    protos = _class_prototypes(num_classes, shape, proto_rng)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = render_samples(protos, labels, shape, st, rng)
    x = (x - NORM_MEAN) / NORM_STD
    names = tuple(f"class{k:03d}" for k in range(num_classes))
    sid = source_id or f"synthetic-s{seed}-style{style if isinstance(style, int) else 'custom'}"
    return LabeledDataset(torch.from_numpy(x), torch.from_numpy(labels).long(), names, sid)


def make_synthetic_stream(num_tasks: int, classes_per_task: int, samples_per_class: int,
                          image_shape=(3, 32, 32), seed: int = 0, style: int = 0) -> TaskStream:
    """Class-incremental stream with an 80/20 train/test split per class."""
    for v in (num_tasks, classes_per_task, samples_per_class):
        if v < 1:
            raise ValueError("all counts must be >= 1")
    ds = make_synthetic_dataset(num_tasks * classes_per_task, samples_per_class, image_shape,
                                seed, style)
    train, test = split_per_class(ds, 0.2, seed)
    stream = build_class_incremental_stream(train, num_tasks, seed, test_dataset=test)
    return TaskStream(stream.mode, stream.sessions, stream.total_classes, stream.class_names,
                      dict(stream.seeds, generator_seed=seed, style=style))


def make_multisource_stream(num_sources: int, tasks_per_source: int, classes_per_task: int,
                            samples_per_class: int, image_shape=(3, 32, 32), seed: int = 0) -> TaskStream:
    """Class-incremental stream whose consecutive task blocks come from differently styled sources."""
    parts = []
    for s in range(num_sources):
        ds = make_synthetic_dataset(tasks_per_source * classes_per_task, samples_per_class,
                                    image_shape, seed * 1000 + s, style=s % len(STYLES),
                                    source_id=f"source{s}")
        train, test = split_per_class(ds, 0.2, seed + s)
        parts.append(build_class_incremental_stream(train, tasks_per_source, seed + s, test_dataset=test))
    return concat_class_incremental(parts)


def make_synthetic_domain_stream(num_domains: int, num_classes: int, samples_per_class: int,
                                 image_shape=(3, 32, 32), seed: int = 0) -> TaskStream:
    """Domain-incremental stream: same classes, one style per domain."""
    domains = [
        make_synthetic_dataset(num_classes, samples_per_class, image_shape, seed * 1000 + d,
                               style=d % len(STYLES), source_id=f"domain{d}", prototype_seed=seed)
        for d in range(num_domains)
    ]
    return build_domain_incremental_stream(domains, split_seed=seed)
