"""
One frame per task when the data source changes
===============================================

Two synthetic sources with different styles each contribute two tasks. A
shared frame must serve every source; per-task frames are frozen once their
task ends and vote through the parallel classifier. Learned frames are saved
as images.
"""

from pathlib import Path

from inputtune import TrainConfig, load_tiny_pretrained, make_multisource_stream, make_strategy, run_sequence
from inputtune.metrics import metrics_report
from inputtune.transforms import save_transform_image

EPOCHS = 5

backbone = load_tiny_pretrained()
stream = make_multisource_stream(2, 2, 5, 40, (3, 32, 32), seed=200)
out = Path("parallel_frames")
out.mkdir(exist_ok=True)

for mode in ("shared", "per_task"):
    res = run_sequence(stream, make_strategy("it_pad", backbone, transform_mode=mode),
                       TrainConfig(epochs_per_session=EPOCHS, seed=0), backbone)
    rep = metrics_report(res.matrix)
    print(f"{mode:9s} accuracy {100 * rep['average_accuracy']:.1f}  forgetting {100 * rep['average_forgetting']:.1f}")
    for key, transform in res.assembly.transforms.items():
        save_transform_image(transform, out / f"{mode}_{key}.png")
print(f"frames written to {out}/")
