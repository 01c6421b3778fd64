"""Acceptance suite: one test and one PASS/FAIL summary line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed in the "acceptance criteria" section at the end of the run.
"""

import itertools
import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

import oracles
from acceptance_log import record
from fdcheck import fd_relative_errors
from nucprompt.cksim import ClassActivation, class_weight_vector, classification_loss, encode_category_knowledge
from nucprompt.backbone import FeaturePyramid
from nucprompt.dgpom import count_loss
from nucprompt.matching import hungarian
from nucprompt.metrics import aji, detection_scores, dice, panoptic_quality, summarize
from nucprompt.pipeline import (
    ModelConfig,
    build_model,
    evaluate,
    gt_prompts,
    image_tensor,
    predict,
    run_ablation,
    scene_losses,
    train,
)
from nucprompt.segmenter import BaselineSegmenter, median_equivalent_radius
from nucprompt.synthdata import NucleusSpec, Scene, SceneConfig, ellipse_mask, generate_scene

# Pinned tolerances and budgets
HUNGARIAN_TRIALS, HUNGARIAN_MAX_N, HUNGARIAN_BUDGET_S = 1000, 7, 30.0
METRIC_MAPS, METRIC_TOL, METRIC_BUDGET_S = 500, 1e-9, 120.0
FD_REL_TOL, FD_BUDGET_S = 1e-4, 300.0
ATTN_TOL = 1e-6
OVERFIT_DET_F1, OVERFIT_CLS_F1, MATCH_RADIUS, OVERFIT_BUDGET_S = 0.9, 0.8, 12.0, 600.0
ABLATION_BUDGET_S = 2 * 3600.0

# Directional ablation protocol (desk scale)
N_TRAIN, N_TEST, SEEDS = 50, 20, (0, 1, 2)
ABLATION_SCENE = SceneConfig(height=64, width=64, n_classes=4, count_range=(4, 10), size_range=(2.5, 6.0))
ABLATION_MODEL = ModelConfig(n_classes=4, epochs=100)


# 1 -------------------------------------------------------------------------------------------

def _brute_force_min(cost):
    c = cost if cost.shape[0] <= cost.shape[1] else cost.T
    n, m = c.shape
    return min(math.fsum(c[i, j] for i, j in enumerate(p)) for p in itertools.permutations(range(m), n))


def test_criterion_1_hungarian_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for trial in range(HUNGARIAN_TRIALS):
        k, n = (int(v) for v in rng.integers(1, HUNGARIAN_MAX_N + 1, size=2))
        if trial % 4 == 0:
            cost = rng.integers(0, 4, size=(k, n)).astype(float)  # many ties
        else:
            cost = rng.random((k, n)) * 100
        a = hungarian(cost)
        if math.fsum(cost[i, j] for i, j in a.pairs) != _brute_force_min(cost) or len(a.pairs) != min(k, n):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < HUNGARIAN_BUDGET_S
    record(1, "Hungarian total cost equals permutation brute force", ok,
           f"{HUNGARIAN_TRIALS} matrices up to {HUNGARIAN_MAX_N}x{HUNGARIAN_MAX_N}, {mismatches} mismatches, "
           f"{elapsed:.1f}s (budget {HUNGARIAN_BUDGET_S:.0f}s)")
    assert ok


# 2 -------------------------------------------------------------------------------------------

def test_criterion_2_metric_oracles():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(METRIC_MAPS):
        pred, _, gt, _ = oracles.random_map_pair(rng, size=16, max_instances=5)
        dq, sq, pq, _ = oracles.pq(pred, gt)
        r = panoptic_quality(pred, gt)
        worst = max(worst, abs(r.dq - dq), abs(r.sq - sq), abs(r.pq - pq),
                    abs(aji(pred, gt) - oracles.aji(pred, gt)), abs(dice(pred, gt) - oracles.dice(pred, gt)))
        n_p, n_g = (int(v) for v in rng.integers(0, 6, size=2))
        pp, gp = rng.uniform(0, 16, (n_p, 2)), rng.uniform(0, 16, (n_g, 2))
        pc, gc = rng.integers(0, 3, n_p), rng.integers(0, 3, n_g)
        d = detection_scores(pp, pc, gp, gc, radius=4.0, n_classes=3)
        expected = oracles.detection(pp, pc, gp, gc, 4.0)
        got = (d.det_p, d.det_r, d.det_f, d.cls_p, d.cls_r, d.cls_f)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, expected)))
    elapsed = time.perf_counter() - t0
    ok = worst <= METRIC_TOL and elapsed < METRIC_BUDGET_S
    record(2, "PQ/DQ/SQ, AJI, Dice, detection F1 match brute-force oracles", ok,
           f"{METRIC_MAPS} random 16x16 maps, max abs diff {worst:.2e} (tol {METRIC_TOL:g}), {elapsed:.1f}s")
    assert ok


# 3 -------------------------------------------------------------------------------------------

def _tiny_scene():
    rng = np.random.default_rng(5)
    nuclei = [NucleusSpec((8.3, 9.1), (3.2, 2.4), 0.3, 0, 0.8),
              NucleusSpec((22.7, 12.4), (2.6, 2.6), 0.0, 1, 0.7),
              NucleusSpec((14.2, 24.9), (3.6, 2.1), 1.2, 2, 0.9)]
    labels = np.zeros((32, 32), np.int32)
    for i, nuc in enumerate(nuclei, start=1):
        labels[ellipse_mask(32, 32, nuc)] = i
    points = []
    for i in range(1, 4):
        rows, cols = np.nonzero(labels == i)
        points.append((cols.mean() + 0.5, rows.mean() + 0.5))
    image = rng.random((32, 32, 3)) * 0.3 + 0.6
    image[labels > 0] *= 0.5
    return Scene(image, labels, np.array(points), np.array([0, 1, 2]))


def test_criterion_3_whole_model_gradient():
    scene = _tiny_scene()
    t0 = time.perf_counter()
    worst, worst_name, groups = 0.0, "", 0
    for weights in ((1.0, 5e-3, 1e-4), (1.0, 1.0, 1.0)):
        cfg = ModelConfig(n_classes=3, channels=8, widths=(8, 8, 8, 8), hidden=8, attn_dim=8, knowledge_dim=8,
                          dtype="float64", loss_weights=weights, seed=3)
        model = build_model(cfg)
        with torch.no_grad():  # move off the zero-initialized output layers so every path carries gradient
            for head in (model.deform, model.reg_head):
                head.out.weight.normal_(0, 0.05)
        image = image_tensor(scene, torch.float64)

        def loss():
            return scene_losses(model, model(image), scene).total

        errs = fd_relative_errors(loss, model.named_parameters(), samples_per_param=3)
        groups = len(errs)
        name, value = max(errs.items(), key=lambda kv: kv[1])
        if value > worst:
            worst, worst_name = value, f"{name} @ weights {weights}"
    elapsed = time.perf_counter() - t0
    ok = worst < FD_REL_TOL and elapsed < FD_BUDGET_S
    record(3, "whole-model finite differences vs autograd (float64, 32x32)", ok,
           f"{groups} parameter groups x 2 weightings, max rel err {worst:.2e} ({worst_name}), "
           f"tol {FD_REL_TOL:g}, {elapsed:.1f}s")
    assert ok


# 4 -------------------------------------------------------------------------------------------

def test_criterion_4_exact_formulas():
    checks = {}
    d = torch.full((1, 1, 4, 5), 0.5, dtype=torch.float64)
    checks["count |10-12|=2"] = count_loss(d, 12).item() == 2.0 and count_loss(d, 10).item() == 0.0
    ce = classification_loss(torch.zeros(1, 5, dtype=torch.float64), torch.tensor([2]),
                             class_weight_vector(4, dtype=torch.float64)).item()
    checks["CE uniform = ln 5"] = abs(ce - math.log(5)) < 1e-12

    scene = generate_scene(SceneConfig(height=64, width=64, count_range=(5, 5), size_range=(2.5, 6.0)), 1)
    model = build_model(ModelConfig(channels=8, widths=(4, 8, 8, 8), hidden=8, attn_dim=8, knowledge_dim=8))
    with torch.no_grad():
        for head in (model.deform, model.reg_head):
            head.out.weight.normal_(0, 0.5)
        out = model(image_tensor(scene))
    p = out.proposals
    checks["deformed = initial + offsets"] = torch.equal(p.deformed, p.initial + p.deform_offsets)
    checks["points = deformed + offsets"] = torch.equal(p.points, p.deformed + p.offsets)

    act = ClassActivation(encode_category_knowledge(4, dim=16).matrix, 8, attn_dim=8).double()
    pyr = FeaturePyramid([torch.randn(8, n, n, dtype=torch.float64) * 4 for n in (16, 8, 4)])
    row_err = max((act.attention(l, f).sum(1) - 1).abs().max().item() for l, f in enumerate(pyr.levels))
    checks[f"attention rows (max err {row_err:.1e})"] = row_err < ATTN_TOL
    ok = all(checks.values())
    record(4, "exact formulas", ok, ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# 5 -------------------------------------------------------------------------------------------

def test_criterion_5_zero_init_ablation_identity():
    scene = generate_scene(SceneConfig(), 0)
    image = image_tensor(scene)
    same = []
    for use_cksim in (True, False):
        with torch.no_grad():
            full = build_model(ModelConfig(use_dgpom=True, use_cksim=use_cksim))(image)
            off = build_model(ModelConfig(use_dgpom=False, use_cksim=use_cksim))(image)
        same += [torch.equal(full.proposals.deformed, full.proposals.initial),
                 torch.equal(full.points, off.points), torch.equal(full.scores, off.scores)]
    ok = all(same)
    record(5, "zero-init offsets: full model equals grid and the no-offset model bitwise", ok,
           f"{sum(same)}/{len(same)} tensor comparisons bitwise equal (128x128, with and without knowledge)")
    assert ok


# 6 -------------------------------------------------------------------------------------------

def test_criterion_6_overfit_one_scene():
    scene = generate_scene(SceneConfig(height=128, width=128, n_classes=4, count_range=(15, 15)), 0)
    cfg = ModelConfig(n_classes=4, epochs=300, lr=1e-4, loss_weights=(1.0, 5e-3, 1e-4))
    t0 = time.perf_counter()
    model = train([scene], cfg).model
    elapsed = time.perf_counter() - t0
    pr = predict(model, scene).prompts
    d = detection_scores(pr.points, pr.classes, scene.points, scene.classes, MATCH_RADIUS, 4)
    ok = d.det_f >= OVERFIT_DET_F1 and d.cls_f >= OVERFIT_CLS_F1 and elapsed < OVERFIT_BUDGET_S
    record(6, "overfit one scene (C=4, 15 nuclei, 300 steps)", ok,
           f"det F1 {d.det_f:.3f} (>= {OVERFIT_DET_F1}), cls F1 {d.cls_f:.3f} (>= {OVERFIT_CLS_F1}), "
           f"{len(pr)} prompts, {elapsed:.0f}s")
    assert ok


# 7 and 8 -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation():
    train_scenes = [generate_scene(ABLATION_SCENE, 1000 + i) for i in range(N_TRAIN)]
    test_scenes = [generate_scene(ABLATION_SCENE, 5000 + i) for i in range(N_TEST)]
    segmenter = BaselineSegmenter(radius=median_equivalent_radius(train_scenes))
    t0 = time.perf_counter()
    rows = run_ablation(train_scenes, test_scenes, ABLATION_MODEL, seeds=SEEDS, segmenter=segmenter,
                        radius=MATCH_RADIUS)
    return rows, time.perf_counter() - t0, test_scenes, segmenter


def _row(rows, dgpom, cksim):
    return next(r for r in rows if r["use_dgpom"] == dgpom and r["use_cksim"] == cksim)


def test_criterion_7_directional_ablation(ablation):
    rows, elapsed, _, _ = ablation
    base, off, know, full = (_row(rows, *flags) for flags in ((False, False), (True, False),
                                                              (False, True), (True, True)))
    cls_up = know["cls_f"] > base["cls_f"]
    recall_up = off["det_r"] > base["det_r"]
    best_pq = max(rows, key=lambda r: r["pq"])
    full_best = best_pq is full
    in_budget = elapsed < ABLATION_BUDGET_S
    table = "; ".join(f"dgpom={int(r['use_dgpom'])} cksim={int(r['use_cksim'])}: cls_f {r['cls_f']:.3f} "
                      f"det_r {r['det_r']:.3f} det_p {r['det_p']:.3f} pq {r['pq']:.3f}" for r in rows)
    ok = cls_up and recall_up and full_best and in_budget
    record(7, "directional ablation (50/20 scenes, 3 seeds, means)", ok,
           f"knowledge raises cls F1: {cls_up}; offsets raise det recall: {recall_up}; "
           f"full model best PQ: {full_best}; {elapsed / 60:.1f} min | {table}")
    assert ok


def test_criterion_8_oracle_prompt_ceiling(ablation):
    rows, _, test_scenes, segmenter = ablation
    s = summarize(evaluate(test_scenes, gt_prompts, segmenter, n_classes=4, radius=MATCH_RADIUS))
    trained_pq = [run["pq"] for r in rows for run in r["runs"]]
    ok = s["det_f"] == 1.0 and s["cls_f"] == 1.0 and s["pq"] > max(trained_pq)
    record(8, "ground-truth prompts bound every trained run", ok,
           f"oracle det F1 {s['det_f']:.3f}, cls F1 {s['cls_f']:.3f}, PQ {s['pq']:.3f} "
           f"vs best trained PQ {max(trained_pq):.3f} over {len(trained_pq)} runs")
    assert ok


# 9 -------------------------------------------------------------------------------------------

def test_criterion_9_train_twice_identical(tmp_path):
    cli = [sys.executable, "-m", "nucprompt"]
    subprocess.run(cli + ["generate", "--scenes", "4", "--classes", "4", "--seed", "3", "--size", "64",
                          "--count", "4", "8", "--radius-range", "2.5", "6", "--out", str(tmp_path / "data")],
                   check=True, capture_output=True)
    for run in ("a", "b"):
        subprocess.run(cli + ["train", "--data", str(tmp_path / "data"), "--epochs", "3", "--seed", "0",
                              "--out", str(tmp_path / run)], check=True, capture_output=True)
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("loss.csv", "model.ckpt")}
    ok = all(same.values())
    record(9, "two identical train invocations give identical outputs", ok,
           ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
    assert ok
