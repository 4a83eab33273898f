"""
Anatomy of a learnable input frame
==================================

A frame of thickness p around an S x S image holds C * (S^2 - (S - 2p)^2)
numbers; an additive perturbation holds C * S^2. This script prints both
budgets, then lays a random frame around a synthetic image and saves it.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from inputtune import InputTransform, TransformConfig, param_count
from inputtune.synthetic import make_synthetic_stream
from inputtune.transforms import resize_to

# parameter budgets at full resolution and at desk scale
for cfg in (TransformConfig("pad", 32, 224, 3), TransformConfig("pad", 8, 224, 3),
            TransformConfig("add", 0, 224, 3), TransformConfig("pad", 5, 32, 3)):
    print(f"{cfg.kind:4s} S={cfg.side:3d} p={cfg.thickness:2d} -> {param_count(cfg):7,d} parameters")

# a frame is zero at init, so the tuned input starts as the resized image on a zero border
stream = make_synthetic_stream(1, 3, 4, (3, 32, 32), seed=0)
x = stream.session(1).train.images[:1]
frame = InputTransform(TransformConfig("pad", 5, 32, 3))
with torch.no_grad():
    plain = frame(resize_to(x, frame.config.inner_side))
    frame.theta.normal_(generator=torch.Generator().manual_seed(0))
    tuned = frame(resize_to(x, frame.config.inner_side))


def show(ax, img, title):
    img = img[0].permute(1, 2, 0)
    ax.imshow(((img - img.min()) / (img.max() - img.min())).numpy())
    ax.set_title(title)
    ax.axis("off")


fig, axes = plt.subplots(1, 3, figsize=(9, 3))
show(axes[0], x, "input")
show(axes[1], plain, "zero frame")
show(axes[2], tuned, "random frame")
fig.savefig("frame_anatomy.png", bbox_inches="tight")
print("wrote frame_anatomy.png")
