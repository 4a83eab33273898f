"""Continual-learning task streams.

A :class:`TaskStream` is an ordered tuple of :class:`Session` objects, each
carrying its own train and held-out test slice. Class-incremental streams
relabel classes so that session ``j`` owns a contiguous block of global ids;
domain-incremental streams share one label space across all sessions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import EmptyDataset, LabelSpaceMismatch, NonDivisibleSplit, ShapeMismatch

CLASS_INCREMENTAL = "class_incremental"
DOMAIN_INCREMENTAL = "domain_incremental"


@dataclass(frozen=True)
class LabeledDataset:
    images: torch.Tensor  # N x C x H x W, normalized
    labels: torch.Tensor  # N, int64
    class_names: tuple
    source_id: str = "unknown"
    sample_ids: tuple = ()

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ShapeMismatch(f"images must be N x C x H x W, got {tuple(self.images.shape)}")
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside [0, num_classes)")
        if not self.sample_ids:
            ids = tuple(f"{self.source_id}/{i}" for i in range(len(self.labels)))
            object.__setattr__(self, "sample_ids", ids)
        elif len(self.sample_ids) != len(self.labels):
            raise ValueError("sample_ids length mismatch")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "LabeledDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        return LabeledDataset(self.images[index], self.labels[index], self.class_names,
                              self.source_id, tuple(self.sample_ids[i] for i in index.tolist()))

    def relabel(self, mapping: np.ndarray, class_names) -> "LabeledDataset":
        new = torch.as_tensor(mapping, dtype=torch.long)[self.labels]
        return LabeledDataset(self.images, new, tuple(class_names), self.source_id, self.sample_ids)


@dataclass(frozen=True)
class Session:
    index: int  # 1-based
    class_ids: tuple
    train: LabeledDataset
    test: LabeledDataset
    source_id: str = "unknown"

    @property
    def data_ref(self) -> str:
        return f"session-{self.index}:{self.source_id}"


@dataclass(frozen=True)
class TaskStream:
    mode: str
    sessions: tuple
    total_classes: int
    class_names: tuple = ()
    seeds: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.sessions)

    def session(self, j: int) -> Session:
        return self.sessions[j - 1]

    def classes_seen(self, t: int) -> list[int]:
        """Global class ids introduced in sessions 1..t (sorted)."""
        if self.mode == DOMAIN_INCREMENTAL:
            return list(range(self.total_classes))
        seen = set()
        for s in self.sessions[:t]:
            seen.update(s.class_ids)
        return sorted(seen)

    def merged(self) -> "TaskStream":
        """Single-session stream holding the union of all session data (joint learning)."""
        def cat(parts):
            return LabeledDataset(torch.cat([p.images for p in parts]),
                                  torch.cat([p.labels for p in parts]),
                                  parts[0].class_names, "joint",
                                  tuple(i for p in parts for i in p.sample_ids))
        all_classes = tuple(sorted({c for s in self.sessions for c in s.class_ids}))
        session = Session(1, all_classes, cat([s.train for s in self.sessions]),
                          cat([s.test for s in self.sessions]), "joint")
        return TaskStream(self.mode, (session,), self.total_classes, self.class_names,
                          dict(self.seeds, merged=True))

    def descriptor(self) -> dict:
        def checksum(ds):
            return hashlib.sha1("\n".join(sorted(ds.sample_ids)).encode()).hexdigest()

        return {
            "mode": self.mode,
            "total_classes": self.total_classes,
            "seeds": self.seeds,
            "sessions": [
                {"index": s.index, "class_ids": list(s.class_ids), "source_id": s.source_id,
                 "num_train": len(s.train), "num_test": len(s.test),
                 "train_checksum": checksum(s.train), "test_checksum": checksum(s.test)}
                for s in self.sessions
            ],
        }

    def save_descriptor(self, path) -> None:
        Path(path).write_text(json.dumps(self.descriptor(), indent=2))


def split_per_class(dataset: LabeledDataset, test_fraction: float, seed: int):
    """Stratified train/test split; returns ``(train, test)``."""
    rng = np.random.default_rng(seed)
    labels = dataset.labels.numpy()
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))


def build_class_incremental_stream(dataset: LabeledDataset, num_tasks: int, shuffle_seed: int,
                                   test_dataset: LabeledDataset | None = None,
                                   test_fraction: float = 0.2) -> TaskStream:
    """Randomly partition the classes of ``dataset`` into ``num_tasks`` equal sessions.

    Classes are permuted with ``shuffle_seed`` and chunked; labels are then
    rewritten so that session ``j`` owns global ids ``[(j-1)k, jk)``. When no
    separate test set is given, each class is split 80/20 (by default).
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot build a stream from an empty dataset")
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    n_cls = dataset.num_classes
    if n_cls % num_tasks:
        raise NonDivisibleSplit(f"{n_cls} classes do not split evenly into {num_tasks} tasks")
    if test_dataset is None:
        train, test = split_per_class(dataset, test_fraction, shuffle_seed)
    else:
        if test_dataset.class_names != dataset.class_names:
            raise LabelSpaceMismatch("train and test datasets disagree on class names")
        train, test = dataset, test_dataset

    order = np.random.default_rng(shuffle_seed).permutation(n_cls)
    mapping = np.empty(n_cls, dtype=np.int64)
    mapping[order] = np.arange(n_cls)
    names = tuple(dataset.class_names[c] for c in order)
    train, test = train.relabel(mapping, names), test.relabel(mapping, names)

    k = n_cls // num_tasks
    sessions = []
    for j in range(num_tasks):
        ids = tuple(range(j * k, (j + 1) * k))
        tr = torch.nonzero((train.labels >= j * k) & (train.labels < (j + 1) * k)).flatten()
        te = torch.nonzero((test.labels >= j * k) & (test.labels < (j + 1) * k)).flatten()
        sessions.append(Session(j + 1, ids, train.subset(tr), test.subset(te), dataset.source_id))
    return TaskStream(CLASS_INCREMENTAL, tuple(sessions), n_cls, names,
                      {"shuffle_seed": shuffle_seed, "class_order": order.tolist()})


def build_domain_incremental_stream(domains, test_domains=None, split_seed: int = 0,
                                    test_fraction: float = 0.2) -> TaskStream:
    """One session per domain, in order, over a shared label space."""
    if not domains:
        raise EmptyDataset("no domains given")
    names = domains[0].class_names
    for d in domains[1:]:
        if d.class_names != names:
            raise LabelSpaceMismatch(
                f"domain {d.source_id!r} label space differs from {domains[0].source_id!r}"
            )
    sessions = []
    for j, d in enumerate(domains):
        if len(d) == 0:
            raise EmptyDataset(f"domain {d.source_id!r} is empty")
        if test_domains is None:
            train, test = split_per_class(d, test_fraction, split_seed + j)
        else:
            train, test = d, test_domains[j]
            if test.class_names != names:
                raise LabelSpaceMismatch(f"test split of {d.source_id!r} has a different label space")
        sessions.append(Session(j + 1, tuple(range(len(names))), train, test, d.source_id))
    return TaskStream(DOMAIN_INCREMENTAL, tuple(sessions), len(names), tuple(names),
                      {"split_seed": split_seed})


def concat_class_incremental(streams) -> TaskStream:
    """Chain class-incremental streams (e.g. one per data source), offsetting class ids."""
    names = []
    for st in streams:
        if st.mode != CLASS_INCREMENTAL:
            raise ValueError("only class-incremental streams can be chained")
        names.extend(st.class_names)
    names = tuple(names)
    out, offset = [], 0
    for st in streams:
        for s in st.sessions:
            out.append(Session(len(out) + 1, tuple(c + offset for c in s.class_ids),
                               _with_labels(s.train, s.train.labels + offset, names),
                               _with_labels(s.test, s.test.labels + offset, names), s.source_id))
        offset += st.total_classes
    return TaskStream(CLASS_INCREMENTAL, tuple(out), len(names), names,
                      {"sources": [st.seeds for st in streams]})


def _with_labels(ds: LabeledDataset, labels, names) -> LabeledDataset:
    return LabeledDataset(ds.images, labels, names, ds.source_id, ds.sample_ids)


# --- directory ingestion ---------------------------------------------------

def load_image_folder(root, split: str, side: int | None = None, mean=None, std=None) -> LabeledDataset:
    """Read ``root/<split>/<class_name>/<file>.png`` plus ``root/manifest.json``.

    The manifest lists ``classes`` (label order) and ``source_id``. Images are
    resized to ``side`` (if given), scaled to [0, 1] and normalized.
    """
    from PIL import Image

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    classes = list(manifest["classes"])
    source = manifest.get("source_id", root.name)
    mode = manifest.get("image_mode", "RGB")
    images, labels, ids = [], [], []
    for label, name in enumerate(classes):
        folder = root / split / name
        if not folder.is_dir():
            continue
        for f in sorted(folder.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                continue
            img = Image.open(f).convert(mode)
            if side is not None:
                img = img.resize((side, side), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[..., None]
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
            ids.append(f"{source}/{split}/{name}/{f.name}")
    if not images:
        raise EmptyDataset(f"no images under {root / split}")
    x = torch.from_numpy(np.stack(images))
    if mean is not None and std is not None:
        x = (x - torch.tensor(mean).view(1, -1, 1, 1)) / torch.tensor(std).view(1, -1, 1, 1)
    return LabeledDataset(x, torch.tensor(labels), tuple(classes), source, tuple(ids))


def write_image_folder(dataset: LabeledDataset, root, split: str, mean=None, std=None) -> None:
    """Inverse of :func:`load_image_folder` (values clipped to 8-bit)."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    mode = "L" if dataset.images.shape[1] == 1 else "RGB"
    (root / "manifest.json").write_text(json.dumps(
        {"classes": list(dataset.class_names), "source_id": dataset.source_id, "image_mode": mode}))
    x = dataset.images
    if mean is not None and std is not None:
        x = x * torch.tensor(std).view(1, -1, 1, 1) + torch.tensor(mean).view(1, -1, 1, 1)
    arr = (x.clamp(0, 1) * 255).round().to(torch.uint8).numpy()
    for i, (img, label) in enumerate(zip(arr, dataset.labels.tolist())):
        folder = root / split / dataset.class_names[label]
        folder.mkdir(parents=True, exist_ok=True)
        pix = img[0] if mode == "L" else img.transpose(1, 2, 0)
        Image.fromarray(pix, mode=mode).save(folder / f"{i:06d}.png")
