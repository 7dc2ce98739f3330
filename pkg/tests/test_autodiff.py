import math

import numpy as np
import pytest
import torch

from fasterfc import autodiff as ad

D = torch.float64


def rand(*shape, seed=0, dtype=D):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def direct_conv2d(x, w, b):
    """Loop oracle: zero-padded 'same' cross-correlation, odd kernel."""
    x, w = x.numpy(), w.numpy()
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((B, O, H, W))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("bchw,oc->bohw", xp[:, :, i : i + H, j : j + W], w[:, :, i, j])
    return torch.from_numpy(out + b.numpy()[None, :, None, None])


def test_conv_matches_loop_oracle():
    x, w, b = rand(2, 3, 9, 7), rand(4, 3, 3, 3, seed=1), rand(4, seed=2)
    assert torch.allclose(ad.conv_nd(x, w, b, padding=1), direct_conv2d(x, w, b), atol=1e-12)


def test_pointwise_fast_path_matches_generic():
    x, w, b = rand(2, 5, 6, 4, 3), rand(3, 5, 1, 1, 1, seed=1), rand(3, seed=2)
    ref = torch.nn.functional.conv3d(x, w, b)
    assert torch.allclose(ad.conv_nd(x, w, b), ref, atol=1e-13)


def test_conv_shape_errors():
    with pytest.raises(ValueError, match="in-channels"):
        ad.conv_nd(rand(1, 2, 4, 4), rand(3, 5, 3, 3))
    with pytest.raises(ValueError, match="incompatible"):
        ad.conv_nd(rand(1, 2, 4), rand(3, 2, 3, 3))
    with pytest.raises(ValueError, match="2-tap"):
        ad.conv_transpose_nd(rand(1, 2, 4, 4), rand(2, 3, 3, 3))


def test_fft_unitary_round_trip_and_parseval():
    x = torch.complex(rand(3, 10, 12), rand(3, 10, 12, seed=1))
    k = ad.fft_nd(x, (1, 2))
    assert (ad.ifft_nd(k, (1, 2)) - x).abs().max() <= 1e-10
    assert abs(float((k.abs() ** 2).sum() - (x.abs() ** 2).sum())) <= 1e-12 * float((x.abs() ** 2).sum())
    np.testing.assert_allclose(k.numpy(), np.fft.fftn(x.numpy(), axes=(1, 2), norm="ortho"), atol=1e-12)


def test_rfft_round_trip_odd_length():
    x = rand(2, 7, 9)
    assert (ad.irfft_nd(ad.rfft_nd(x, (1, 2)), (7, 9), (1, 2)) - x).abs().max() <= 1e-12


def test_transform_counter():
    x = rand(4, 4).to(torch.complex128)
    with ad.count_transforms() as c:
        ad.ifft_nd(ad.fft_nd(x, (0, 1)), (0, 1))
        ad.fft_nd(x, (0,))
    assert (c.forward, c.inverse, c.round_trips) == (2, 1, 1)


def test_instance_norm_statistics():
    x = 3 + 2 * rand(2, 4, 8, 8)
    y = ad.instance_norm(x)
    assert y.mean(dim=(2, 3)).abs().max() < 1e-12
    assert torch.allclose(y.var(dim=(2, 3), unbiased=False), torch.ones(2, 4, dtype=D), atol=1e-4)


def test_leaky_relu_and_slope_range():
    x = torch.tensor([-2.0, 0.0, 3.0], dtype=D)
    assert ad.leaky_relu(x, 0.2).tolist() == [-0.4, 0.0, 3.0]
    with pytest.raises(ValueError):
        ad.leaky_relu(x, 1.5)


def test_pool_and_upsample():
    x = torch.arange(16, dtype=D).reshape(1, 1, 4, 4)
    p = ad.avg_pool_nd(x, 2)
    assert p.flatten().tolist() == [2.5, 4.5, 10.5, 12.5]
    u = ad.nn_upsample_nd(p, 2)
    assert u.shape == x.shape and float(u[0, 0, 1, 1]) == 2.5
    with pytest.raises(ValueError, match="divisible"):
        ad.avg_pool_nd(rand(1, 1, 5, 4), 2)


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("conv3", lambda x, w: ad.conv_nd(x, w, padding=1).pow(2).sum(), [(2, 3, 6, 5), (4, 3, 3, 3)]),
        ("conv3d", lambda x, w: ad.conv_nd(x, w, padding=1).sin().sum(), [(1, 2, 4, 4, 4), (2, 2, 3, 3, 3)]),
        ("convT", lambda x, w: ad.conv_transpose_nd(x, w).pow(2).sum(), [(1, 3, 3, 3), (3, 2, 2, 2)]),
        ("norm", lambda x: (ad.instance_norm(x) * torch.arange(40, dtype=D).reshape(1, 1, 5, 8)).sum(), [(2, 3, 5, 8)]),
        ("lrelu", lambda x: ad.leaky_relu(x, 0.2).pow(3).sum(), [(30,)]),
        ("pool", lambda x: ad.avg_pool_nd(x, 2).pow(2).sum(), [(1, 2, 4, 6)]),
        ("up", lambda x: (ad.nn_upsample_nd(x, 2) * torch.arange(48, dtype=D).reshape(1, 1, 6, 8)).sum(), [(1, 1, 3, 4)]),
        ("fft", lambda x: ad.fft_nd(x.to(torch.complex128), (0, 1)).real.pow(2).sum() + ad.fft_nd(x.to(torch.complex128), (0, 1))[1, 2].imag, [(6, 5)]),
        ("rfft", lambda x: ad.irfft_nd(ad.rfft_nd(x, (0, 1)) * 1.5j, (6, 5), (0, 1)).pow(2).sum(), [(6, 5)]),
    ],
)
def test_primitive_gradients(name, fn, shapes):
    ts = [rand(*s, seed=i).requires_grad_(True) for i, s in enumerate(shapes)]
    assert ad.fd_check(lambda: fn(*ts), ts, eps=1e-6) <= 1e-4, name


def test_fd_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=D)

    x = rand(3).requires_grad_(True)
    assert ad.fd_check(lambda: Bad.apply(x), [x]) > 1e-2


def test_param_store_rules_and_nan_guard():
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 1).double()
    store = ad.ParamStore(lin)
    assert len(store) == 2 and store.numel() == 4
    x, y = rand(32, 3), rand(32, 1, seed=1)
    first = None
    for _ in range(50):
        loss = ((lin(x) - y) ** 2).mean()
        first = first if first is not None else float(loss.detach())
        store.backward(loss)
        store.step("adaptive-moments", 0.05)
    assert float(loss.detach()) < first
    store.backward(lin(x).sum() * math.nan)
    with pytest.raises(ad.NonFiniteGradient):
        store.step("sgd-momentum", 0.1)
    store.zero_grad()
    store.backward(lin(x).sum())
    with pytest.raises(ValueError, match="unknown optimizer"):
        store.step("nope", 0.1)
