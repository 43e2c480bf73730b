"""Synthesize the sphere scene, train with defaults, evaluate and render one view.

    python3 demos/sphere_walkthrough.py [workdir]

About a minute and a half on one core.
"""

import sys
from pathlib import Path

import numpy as np

from octfield import synth, trainer
from octfield.images import write_ppm

work = Path(sys.argv[1] if len(sys.argv) > 1 else "sphere_demo")
data = synth.make_dataset(synth.make_scene("sphere"), 8, "orbit", (64, 64), seed=0, out=work / "data")
config = trainer.TrainConfig()


def progress(state, row):
    print(f"epoch {row[0]:>2}  loss {float(row[2]):.5f}  train psnr {float(row[3]):5.2f}  leaves {row[4]}")


state = trainer.train(data, config, metrics_path=work / "metrics.csv", on_epoch=progress)
trainer.save_checkpoint(work / "checkpoint.json", state)

for entry in state.tree_log:
    print({k: v for k, v in entry.items() if k != "nodes"})

scores = []
for k, (cam, ref) in enumerate(zip(data.test_cameras, data.test_images)):
    image, _ = trainer.render_view(state.model, cam, config)
    scores.append(trainer.evaluate(image, ref))
    write_ppm(work / f"heldout_{k}.ppm", np.concatenate([image, ref], axis=1))
print("held-out PSNR / SSIM per view:", np.round(scores, 3).tolist())
print(f"mean PSNR {np.mean([s[0] for s in scores]):.2f} dB; renders (left) beside the oracle (right) in {work}")
