import numpy as np
import pytest
import torch

from fdcheck import fd_relative_errors
from nucprompt.backbone import FeaturePyramid
from nucprompt.dgpom import (
    DensityLayer,
    DistributionDecoder,
    PointMLP,
    bilinear_sample,
    count_loss,
    deform_proposals,
    density_map,
    distribution_decode,
    make_proposal_grid,
    regress_points,
)
from nucprompt.errors import ConfigError, NumericError, ShapeError

D = torch.float64


def tent_oracle(fmap, coords, stride):
    """Bilinear interpolation as a sum of tent weights over every cell of the grid."""
    c, h, w = fmap.shape
    out = np.zeros((len(coords), c))
    for k, (x, y) in enumerate(coords):
        u = min(max(x / stride - 0.5, 0.0), w - 1)
        v = min(max(y / stride - 0.5, 0.0), h - 1)
        for i in range(h):
            for j in range(w):
                wt = max(0.0, 1 - abs(u - j)) * max(0.0, 1 - abs(v - i))
                if wt:
                    out[k] += wt * fmap[:, i, j]
    return out


# -- proposal grid ------------------------------------------------------------

def test_grid_closed_form():
    g = make_proposal_grid(8, 8, 4)
    assert g.tolist() == [[2, 2], [6, 2], [2, 6], [6, 6]]


def test_grid_size():
    assert make_proposal_grid(128, 128, 4).shape == (1024, 2)


def test_grid_bad_stride():
    with pytest.raises(ShapeError):
        make_proposal_grid(10, 8, 4)


# -- bilinear sampling ---------------------------------------------------------

def test_sample_at_cell_center_is_exact():
    fmap = torch.randn(3, 5, 6, dtype=D)
    coords = torch.tensor([[(2 + 0.5) * 4, (3 + 0.5) * 4]], dtype=D)
    assert torch.equal(bilinear_sample(fmap, coords, 4)[0], fmap[:, 3, 2])


def test_sample_midpoint():
    fmap = torch.tensor([[[0.0, 1.0]]], dtype=D)
    coords = torch.tensor([[4.0, 2.0]], dtype=D)  # halfway between the two cell centers (2, 2) and (6, 2)
    assert bilinear_sample(fmap, coords, 4).item() == 0.5


def test_sample_matches_tent_oracle():
    rng = np.random.default_rng(0)
    fmap = rng.standard_normal((3, 5, 5))
    coords = rng.uniform(-6, 26, size=(100, 2))  # includes out-of-grid points
    got = bilinear_sample(torch.as_tensor(fmap), torch.as_tensor(coords), 4).numpy()
    assert np.abs(got - tent_oracle(fmap, coords, 4)).max() < 1e-12


def test_sample_clamps_outside():
    fmap = torch.randn(2, 3, 3, dtype=D)
    far = torch.tensor([[-50.0, -50.0], [500.0, 500.0]], dtype=D)
    out = bilinear_sample(fmap, far, 4)
    assert torch.equal(out[0], fmap[:, 0, 0])
    assert torch.equal(out[1], fmap[:, 2, 2])


def test_sample_nan_is_error():
    with pytest.raises(NumericError):
        bilinear_sample(torch.zeros(1, 2, 2), torch.tensor([[float("nan"), 1.0]]), 4)


def test_sample_is_differentiable_in_map_and_coords():
    torch.manual_seed(1)
    fmap = torch.randn(2, 4, 4, dtype=D, requires_grad=True)
    coords = (torch.rand(6, 2, dtype=D) * 12 + 2.3).requires_grad_()
    wts = torch.randn(6, 2, dtype=D)
    errs = fd_relative_errors(lambda: (bilinear_sample(fmap, coords, 4) * wts).sum(),
                              [("map", fmap), ("coords", coords)], samples_per_param=8)
    assert max(errs.values()) < 1e-6, errs


def test_single_cell_map():
    fmap = torch.tensor([[[3.0]]], dtype=D)
    out = bilinear_sample(fmap, torch.tensor([[0.0, 0.0], [9.0, 1.0]], dtype=D), 4)
    assert out.flatten().tolist() == [3.0, 3.0]


# -- distribution decoder -----------------------------------------------------------

def test_decoder_zero_in_zero_out():
    dec = DistributionDecoder(4).to(D)
    with torch.no_grad():
        dec.conv1.bias.zero_()
        dec.conv2.bias.zero_()
    assert torch.count_nonzero(distribution_decode(torch.zeros(4, 8, 8, dtype=D), dec)) == 0


def test_decoder_is_non_negative():
    dec = DistributionDecoder(4).to(D)
    out = distribution_decode(torch.randn(4, 8, 8, dtype=D), dec)
    assert out.shape == (4, 8, 8)
    assert out.min() >= 0


def test_decoder_hand_trace_1x1():
    dec = DistributionDecoder(2, kernel_size=1).to(D)
    w1 = np.array([[1.0, -1.0], [0.5, 2.0]])
    b1 = np.array([0.0, -1.0])
    w2 = np.array([[1.0, 1.0], [-1.0, 0.0]])
    b2 = np.array([0.5, 0.0])
    with torch.no_grad():
        dec.conv1.weight.copy_(torch.as_tensor(w1).reshape(2, 2, 1, 1))
        dec.conv1.bias.copy_(torch.as_tensor(b1))
        dec.conv2.weight.copy_(torch.as_tensor(w2).reshape(2, 2, 1, 1))
        dec.conv2.bias.copy_(torch.as_tensor(b2))
    x = np.arange(32, dtype=float).reshape(2, 4, 4) / 8 - 1.5
    expected = np.zeros_like(x)
    for i in range(4):
        for j in range(4):
            hid = np.maximum(w1 @ x[:, i, j] + b1, 0)
            expected[:, i, j] = np.maximum(w2 @ hid + b2, 0)
    got = dec(torch.as_tensor(x)).detach().numpy()
    assert np.allclose(got, expected, atol=1e-14)


# -- deformation and regression ----------------------------------------------------

def test_fresh_deform_layer_is_identity():
    layer = PointMLP(8, 8, scale=4.0).to(D)
    initial = make_proposal_grid(32, 32, 4, D)
    offsets, deformed = deform_proposals(torch.randn(8, 8, 8, dtype=D), initial, layer)
    assert torch.count_nonzero(offsets) == 0
    assert torch.equal(deformed, initial)


def test_deform_addition():
    layer = PointMLP(4, 4, scale=4.0).to(D)
    with torch.no_grad():
        layer.out.bias.copy_(torch.tensor([0.25, -0.5]))
    offsets, deformed = deform_proposals(torch.randn(4, 5, 5, dtype=D), torch.tensor([[10.0, 10.0]], dtype=D), layer)
    assert offsets.tolist() == [[1.0, -2.0]]
    assert deformed.tolist() == [[11.0, 8.0]]


def _pyramid(ci=4, h=32, w=32):
    return FeaturePyramid([torch.randn(ci, h // s, w // s, dtype=D) for s in (4, 8, 16)])


def test_zero_regression_head_keeps_deformed():
    pyr = _pyramid()
    head = PointMLP(12, 8).to(D)
    deformed = make_proposal_grid(32, 32, 4, D) + 0.3
    offsets, points = regress_points(pyr, deformed, head)
    assert offsets.shape == (64, 2) and points.shape == (64, 2)
    assert torch.equal(points, deformed)


def test_additivity_is_exact_for_random_weights():
    torch.manual_seed(2)
    pyr = _pyramid()
    deform = PointMLP(4, 4, scale=4.0).to(D)
    head = PointMLP(12, 8, scale=4.0).to(D)
    for m in (deform, head):
        torch.nn.init.normal_(m.out.weight)
    initial = make_proposal_grid(32, 32, 4, D)
    d_off, deformed = deform_proposals(pyr.shallow, initial, deform)
    offsets, points = regress_points(pyr, deformed, head)
    assert torch.equal(deformed, initial + d_off)
    assert torch.equal(points, deformed + offsets)


# -- density and count --------------------------------------------------------------

def test_density_map_shape_and_sign():
    layer = DensityLayer(4).to(D)
    dens = density_map(torch.randn(4, 8, 8, dtype=D), layer)
    assert dens.shape == (1, 1, 8, 8)
    assert dens.min() >= 0


def test_count_loss_exact():
    d = torch.full((1, 1, 4, 3), 1.0, dtype=D)
    assert count_loss(d, 12).item() == 0.0
    d = torch.full((1, 1, 4, 5), 0.5, dtype=D)
    assert count_loss(d, 12).item() == 2.0


def test_count_loss_negative_count():
    with pytest.raises(ConfigError):
        count_loss(torch.zeros(1, 1, 2, 2), -1)


@pytest.mark.parametrize("n", [3, 30])
def test_count_loss_gradient_is_sign(n):
    d = (torch.rand(1, 1, 4, 4, dtype=D) * 2).requires_grad_()
    count_loss(d, n).backward()
    expected = np.sign(d.sum().item() - n)
    assert torch.all(d.grad == expected)
    errs = fd_relative_errors(lambda: count_loss(d, n), [("d", d)], samples_per_param=5)
    assert errs["d"] < 1e-8


# -- learned behaviour on tiny scenes -------------------------------------------------


def test_offsets_drift_toward_nuclei_confined_to_left_half():
    # Pinned seeds: the learned drift is small and shared by every proposal, so
    # other seed pairs can land a fraction of a pixel on the wrong side of 32.
    from nucprompt.pipeline import ModelConfig, predict, train
    from nucprompt.synthdata import SceneConfig, generate_scene

    scene = generate_scene(SceneConfig(height=64, width=64, count_range=(8, 8), size_range=(2.5, 6.0),
                                       placement_box=(0.05, 0.05, 0.45, 0.95)), 0)
    model = train([scene], ModelConfig(epochs=200, seed=0)).model
    assert predict(model, scene).deformed[:, 0].mean() < 32.0


def test_single_nucleus_matched_point_lands_on_centroid():
    from nucprompt.matching import match_points
    from nucprompt.pipeline import ModelConfig, image_tensor, train
    from nucprompt.synthdata import SceneConfig, generate_scene

    scene = generate_scene(SceneConfig(height=64, width=64, count_range=(1, 1), size_range=(3.0, 6.0)), 4)
    model = train([scene], ModelConfig(epochs=300, seed=0)).model
    with torch.no_grad():
        points = model(image_tensor(scene)).points.numpy()
    k = match_points(points, scene.points).proposal_idx[0]
    assert np.hypot(*(points[k] - scene.points[0])) < 2.0
