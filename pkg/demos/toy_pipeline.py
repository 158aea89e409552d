"""End-to-end walk through the toy pipeline: scenes, training, inference, metrics.

Run with ``python demos/toy_pipeline.py [steps]``.  The default of 300 steps on
a reduced-width model finishes in a few minutes on one core; the full default
config needs 2000 steps to reach the accuracy reported in the README.
"""
import sys
import time

from sprd.cocoeval import evaluate, items_from_scenes
from sprd.config import Config
from sprd.data import SceneSpec, generate_scenes
from sprd.inference import infer_image, predict_dataset
from sprd.model import SPRModel
from sprd.train import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# 1. a small synthetic dataset: discs, rectangles and triangles on noisy backgrounds
spec = SceneSpec(seed=7, image_size=64, size_range=(10, 40))
train_set, val_set = generate_scenes(spec, 40), generate_scenes(spec, 10, start=40)
print(f"{len(train_set)} training scenes, {sum(len(s.instances) for s in train_set)} instances")

# 2. a narrower model than the default so the demo stays quick
cfg = Config(image_size=64, widths=(16, 32, 64), pyramid_width=32, head_depth=2, fusion_c1=32, fusion_cd=16,
             decoder_widths=(64, 32, 32), decoder_up_widths=(16, 16))
model = SPRModel(cfg)

t0 = time.perf_counter()
history = train(model, train_set, steps)
print(f"trained {steps} steps in {time.perf_counter() - t0:.0f}s; "
      f"loss {history[0]['total']:.3f} -> {history[-1]['total']:.3f}")

# 3. one image by hand: each detection comes from one pixel, one box and one 32x32 mask
scene = val_set[0]
for d in infer_image(model, scene.image)[:3]:
    print(f"class {d.class_id} score {d.score:.2f} box {[round(v, 1) for v in d.box]} "
          f"from level {d.ref.level} pixel ({d.ref.y}, {d.ref.x})")

# 4. COCO-style metrics on the held-out scenes
result, _ = evaluate(predict_dataset(model, val_set), items_from_scenes(val_set))
print("box ", {k: round(v, 3) for k, v in result.box.items() if k in ("AP", "AP50", "AP75")})
print("mask", {k: round(v, 3) for k, v in result.mask.items() if k in ("AP", "AP50", "AP75")})
