"""Overfit the prompt model on one scene, export prompts, segment, and score.

Takes about a minute on one CPU core.
"""
# %%
import numpy as np

from nucprompt.metrics import detection_scores, panoptic_quality
from nucprompt.pipeline import ModelConfig, gt_prompts, predict, train
from nucprompt.segmenter import BaselineSegmenter, InstanceMap, median_equivalent_radius
from nucprompt.synthdata import SceneConfig, generate_scene

scene = generate_scene(SceneConfig(height=128, width=128, n_classes=4, count_range=(15, 15)), 0)

# %% train
result = train([scene], ModelConfig(n_classes=4, epochs=300))
first, last = result.history[0], result.history[-1]
print(f"loss {first['total']:.3f} -> {last['total']:.3f}  (cls {last['l_cls']:.3f}, reg {last['l_reg']:.2f})")

# %% proposals move, then regress; only confident foreground proposals become prompts
pred = predict(result.model, scene)
shift = np.hypot(*(pred.deformed - result.model.grid(128, 128).numpy()).T)
print(f"{len(pred.points)} proposals, mean grid shift {shift.mean():.2f}px, {len(pred.prompts)} prompts kept")

d = detection_scores(pred.prompts.points, pred.prompts.classes, scene.points, scene.classes, radius=12, n_classes=4)
print(f"detection F1 {d.det_f:.3f}   classification F1 {d.cls_f:.3f}")

# %% the baseline segmenter grows a disk around each prompt, split by nearest prompt
seg = BaselineSegmenter(radius=median_equivalent_radius([scene]))
pq_model = panoptic_quality(seg(scene.image, pred.prompts), InstanceMap.from_scene(scene)).pq
pq_oracle = panoptic_quality(seg(scene.image, gt_prompts(scene)), InstanceMap.from_scene(scene)).pq
print(f"PQ with learned prompts {pq_model:.3f}, with ground-truth prompts {pq_oracle:.3f}")
