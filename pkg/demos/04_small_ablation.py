"""A shrunken version of the offsets / knowledge ablation.

Four configurations share seeds, so any difference comes from the module
being switched, not from initialization. At this size (12 train scenes,
150 epochs, one seed) the numbers are noisy; the acceptance suite runs the
larger version. Roughly five minutes on one core.
"""
# %%
from nucprompt.pipeline import ModelConfig, run_ablation
from nucprompt.synthdata import SceneConfig, generate_scene

scfg = SceneConfig(height=64, width=64, n_classes=4, count_range=(4, 10), size_range=(2.5, 6.0))
train_scenes = [generate_scene(scfg, 1000 + i) for i in range(12)]
test_scenes = [generate_scene(scfg, 5000 + i) for i in range(5)]

rows = run_ablation(train_scenes, test_scenes, ModelConfig(n_classes=4, epochs=150), seeds=(0,))

# %%
print("offsets knowledge   cls_f   det_r   det_p      pq")
for r in rows:
    print(f"{int(r['use_dgpom']):>7} {int(r['use_cksim']):>9}   {r['cls_f']:.3f}   {r['det_r']:.3f}   "
          f"{r['det_p']:.3f}   {r['pq']:.3f}")
