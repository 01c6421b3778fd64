"""The segmentation metrics on maps small enough to check in your head."""
# %%
import numpy as np

from nucprompt.metrics import aji, detection_scores, dice, panoptic_quality

gt = np.zeros((6, 8), np.int32)
gt[1:4, 1:4] = 1          # 9 pixels
gt[1:5, 5:7] = 2          # 8 pixels

pred = np.zeros_like(gt)
pred[1:4, 1:4] = 7        # exact copy of gt 1, label ids do not matter
pred[3:5, 5:7] = 3        # half of gt 2, IoU 0.5 is NOT a match (needs > 0.5)

r = panoptic_quality(pred, gt)
print(f"TP {r.tp} FP {r.fp} FN {r.fn}  DQ {r.dq:.3f} SQ {r.sq:.3f} PQ {r.pq:.3f}")
# DQ = 1 / (1 + 0.5 + 0.5) = 0.5, SQ = 1.0

print(f"Dice {dice(pred, gt):.3f}")   # 2 * 13 / (13 + 17)
print(f"AJI  {aji(pred, gt):.3f}")    # (9 + 4) / (9 + 8)

# %% points: paired by minimum total distance, kept when within the radius
gt_pts = np.array([[2.5, 2.5], [6.0, 3.0]])
pred_pts = np.array([[3.0, 2.0], [20.0, 3.0], [6.2, 3.1]])
d = detection_scores(pred_pts, [0, 1, 0], gt_pts, [0, 1], radius=2.0, n_classes=2)
print(f"det P {d.det_p:.3f} R {d.det_r:.3f} F {d.det_f:.3f}")
print(f"cls P {d.cls_p:.3f} R {d.cls_r:.3f} F {d.cls_f:.3f}")  # the second hit has the wrong class
