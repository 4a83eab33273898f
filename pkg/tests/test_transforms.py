import pytest
import torch
from hypothesis import given, settings, strategies as st

from inputtune.errors import ShapeMismatch
from inputtune.transforms import (InputTransform, TransformConfig, apply_add, apply_pad,
                                  apply_pad_latent, border_size, extract_interior, param_count)


@pytest.mark.parametrize("cfg, expected", [
    (TransformConfig("pad", 32, 224, 3), 73_728),
    (TransformConfig("pad", 8, 224, 3), 20_736),
    (TransformConfig("add", 0, 224, 3), 150_528),
    (TransformConfig("pad", 0, 224, 3), 0),
    (TransformConfig("pad_latent", 2, 56, 64), 27_648),
])
def test_param_count(cfg, expected):
    assert param_count(cfg) == expected
    assert InputTransform(cfg).theta.numel() == expected


def test_small_frame_reduction_ratio():
    full = param_count(TransformConfig("pad", 32, 224, 3))
    small = param_count(TransformConfig("pad", 8, 224, 3))
    assert full / small == pytest.approx(3.556, abs=1e-3)


def test_thickness_too_large_rejected():
    with pytest.raises(ShapeMismatch):
        TransformConfig("pad", 4, 8, 3)
    with pytest.raises(ShapeMismatch):
        apply_pad_latent(torch.zeros(1, 2, 0, 0), torch.zeros(2, 64), 8, 4)


def test_zero_frame_is_zero_padding():
    x = torch.randn(4, 3, 16, 16)
    frame = torch.zeros(3, border_size(24, 4))
    out = apply_pad(x, frame, 24, 4)
    assert out.shape == (4, 3, 24, 24)
    assert torch.equal(extract_interior(out, 4), x)
    mask = torch.ones(24, 24, dtype=torch.bool)
    mask[4:20, 4:20] = False
    assert torch.all(out[:, :, mask] == 0)


def test_frame_values_land_on_border_in_row_major_order():
    frame = torch.arange(border_size(5, 1), dtype=torch.float32).view(1, -1)
    out = apply_pad(torch.full((1, 1, 3, 3), -1.0), frame, 5, 1)[0, 0]
    assert out[0].tolist() == [0, 1, 2, 3, 4]
    assert out[1, 0] == 5 and out[1, 4] == 6
    assert out[4].tolist() == [11, 12, 13, 14, 15]
    assert torch.all(out[1:4, 1:4] == -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_interior_preserved_for_any_frame(p, c, seed):
    g = torch.Generator().manual_seed(seed)
    side = 2 * p + 5
    x = torch.randn(2, c, 5, 5, generator=g)
    frame = torch.randn(c, border_size(side, p), generator=g)
    out = apply_pad(x, frame, side, p)
    assert torch.equal(extract_interior(out, p), x)


def test_pad_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        apply_pad(torch.zeros(1, 3, 17, 17), torch.zeros(3, border_size(24, 4)), 24, 4)


def test_add_identities():
    x = torch.randn(5, 3, 8, 8)
    theta = torch.randn(3, 8, 8)
    assert torch.equal(apply_add(x, torch.zeros(3, 8, 8)), x)
    assert torch.equal(apply_add(torch.zeros(2, 3, 8, 8), theta), theta.expand(2, -1, -1, -1))
    with pytest.raises(ShapeMismatch):
        apply_add(x, torch.zeros(3, 7, 8))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_add_linearity(seed):
    g = torch.Generator().manual_seed(seed)
    x, a, b = (torch.randn(s, generator=g) for s in ((2, 3, 4, 4), (3, 4, 4), (3, 4, 4)))
    torch.testing.assert_close(apply_add(x, a + b), apply_add(apply_add(x, a), b), rtol=1e-6, atol=1e-6)


def _central_fd(fn, t, eps=1e-6):
    grad = torch.zeros_like(t)
    flat = t.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn().item()
        flat[i] = old - eps
        down = fn().item()
        flat[i] = old
        grad.view(-1)[i] = (up - down) / (2 * eps)
    return grad


def _check_gradients(apply, x, theta):
    w = torch.randn(apply(x, theta).shape, dtype=torch.float64, generator=torch.Generator().manual_seed(9))

    def loss():
        return (torch.tanh(apply(x, theta)) * w).sum()

    xg, tg = x.clone().requires_grad_(True), theta.clone().requires_grad_(True)
    (torch.tanh(apply(xg, tg)) * w).sum().backward()
    fd_theta = _central_fd(loss, theta)
    fd_x = _central_fd(loss, x)
    torch.testing.assert_close(tg.grad, fd_theta, rtol=1e-4, atol=1e-8)
    torch.testing.assert_close(xg.grad, fd_x, rtol=1e-4, atol=1e-8)


def test_gradcheck_pad():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64, generator=g)
    theta = torch.randn(3, border_size(8, 2), dtype=torch.float64, generator=g)
    _check_gradients(lambda a, b: apply_pad(a, b, 8, 2), x, theta)


def test_gradcheck_add():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64, generator=g)
    theta = torch.randn(3, 8, 8, dtype=torch.float64, generator=g)
    _check_gradients(apply_add, x, theta)


def test_gradcheck_pad_latent():
    g = torch.Generator().manual_seed(2)
    x = torch.randn(2, 3, 6, 6, dtype=torch.float64, generator=g)
    theta = torch.randn(3, border_size(8, 1), dtype=torch.float64, generator=g)
    _check_gradients(lambda a, b: apply_pad_latent(a, b, 8, 1), x, theta)


def test_module_zero_init_and_image():
    t = InputTransform(TransformConfig("pad", 2, 8, 3))
    assert torch.count_nonzero(t.theta) == 0
    with torch.no_grad():
        t.theta.fill_(1.0)
    img = t.as_image()
    assert img.shape == (3, 8, 8)
    assert img.sum() == param_count(t.config)


def test_save_transform_image(tmp_path):
    t = InputTransform(TransformConfig("add", 0, 8, 3))
    with torch.no_grad():
        t.theta.normal_()
    from inputtune.transforms import save_transform_image

    save_transform_image(t, tmp_path / "p.png")
    assert (tmp_path / "p.png").stat().st_size > 0
