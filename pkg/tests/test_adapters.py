import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import rel_err, sampled_gradient_check
from oracles import (adapter_params_numpy, softmax_attention_loops, spatial_adapter_reference,
                     stereo_adapter_reference)
from stereoadapt.adapters import SpatialAdapter, StereoAdapter, temperature_attention
from stereoadapt.errors import InvalidConfig, InvalidInput, InvalidShape


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


# -- temperature attention ------------------------------------------------------------

def test_attention_matches_loop_oracle(rng):
    q, k, v = rng.normal(size=(8, 4)), rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    got = temperature_attention(t64(q), t64(k), t64(v), 1.0).numpy()
    np.testing.assert_allclose(got, softmax_attention_loops(q, k, v, 1.0), atol=1e-6)


def test_small_tau_gives_column_mean(rng):
    q, k, v = rng.normal(size=(6, 4)), rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    got = temperature_attention(t64(q), t64(k), t64(v), 1e-8).numpy()
    assert np.abs(got - v.mean(0)).max() < 1e-4


def test_dominant_key_saturates():
    q = np.ones((3, 2))
    k = np.zeros((4, 2))
    k[2] = 50.0
    v = np.arange(8, dtype=float).reshape(4, 2)
    got = temperature_attention(t64(q), t64(k), t64(v), 1.0).numpy()
    np.testing.assert_allclose(got, np.repeat(v[2:3], 3, 0), atol=1e-12)


def test_large_logits_stay_finite():
    q = t64(np.full((2, 2), 1e3))
    k = t64(np.full((3, 2), 1e3))
    out = temperature_attention(q, k, t64(np.eye(3)), 4.0)
    assert torch.isfinite(out).all()
    np.testing.assert_allclose(out.numpy(), 1 / 3, atol=1e-12)


def test_attention_batched_leading_dims(rng):
    q, k, v = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(2, 3, 6, 4)), rng.normal(size=(2, 3, 6, 2))
    got = temperature_attention(t64(q), t64(k), t64(v), 0.5).numpy()
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(got[i, j], softmax_attention_loops(q[i, j], k[i, j], v[i, j], 0.5), atol=1e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_attention_rejects_nonpositive_tau(tau):
    x = torch.zeros(2, 2)
    with pytest.raises(InvalidConfig):
        temperature_attention(x, x, x, tau)


def test_attention_rejects_nonfinite():
    x = torch.zeros(2, 2)
    bad = x.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(InvalidInput):
        temperature_attention(x, bad, x, 1.0)


def test_attention_shape_errors():
    with pytest.raises(InvalidShape):
        temperature_attention(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, 4), 1.0)
    with pytest.raises(InvalidShape):
        temperature_attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(5, 3), 1.0)


arrays = st.integers(1, 8).flatmap(lambda n: st.integers(1, 6).flatmap(lambda c: st.tuples(
    st.just(n), st.just(c), st.integers(0, 2 ** 31 - 1), st.sampled_from([0.25, 0.5, 1.0, 2.0, 4.0]))))


@settings(max_examples=50, deadline=None)
@given(arrays)
def test_attention_is_convex_combination(case):
    n, c, seed, tau = case
    g = np.random.default_rng(seed)
    q, k, v = g.normal(size=(n, c)) * 3, g.normal(size=(n + 1, c)) * 3, g.normal(size=(n + 1, c))
    # rows of the attention matrix: attend with v = identity
    w = temperature_attention(t64(q), t64(k), t64(np.eye(n + 1)), tau).numpy()
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
    out = temperature_attention(t64(q), t64(k), t64(v), tau).numpy()
    assert (out >= v.min(0) - 1e-9).all() and (out <= v.max(0) + 1e-9).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_monotone_sharpening(seed):
    g = np.random.default_rng(seed)
    q, k = g.normal(size=(5, 4)), g.normal(size=(6, 4))
    logits = q @ k.T
    top = logits.argmax(-1)
    srt = np.sort(logits, -1)
    if (srt[:, -1] - srt[:, -2] < 1e-6).any():
        return  # argmax not unique
    prev = None
    for tau in (0.5, 1.0, 2.0, 4.0):
        w = temperature_attention(t64(q), t64(k), t64(np.eye(6)), tau).numpy()
        on_top = w[np.arange(5), top]
        if prev is not None:
            assert (on_top >= prev - 1e-12).all()
        prev = on_top


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_key_permutation_invariance(seed):
    g = np.random.default_rng(seed)
    q, k, v = g.normal(size=(4, 3)), g.normal(size=(5, 3)), g.normal(size=(5, 2))
    perm = g.permutation(5)
    a = temperature_attention(t64(q), t64(k), t64(v), 1.0)
    b = temperature_attention(t64(q), t64(k[perm]), t64(v[perm]), 1.0)
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


# -- stereo adapter ---------------------------------------------------------------------

def randomize(module, seed=0, scale=0.5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale + (1.0 if p.dim() == 1 else 0.0))
    return module


def test_stereo_identity_at_init(rng):
    sa = StereoAdapter(6)
    xl, xr = torch.randn(2, 6, 3, 5), torch.randn(2, 6, 3, 5)
    ol, or_ = sa(xl, xr)
    assert torch.equal(ol, xl) and torch.equal(or_, xr)
    assert sa.gamma_left.item() == 0.0 and sa.gamma_right.item() == 0.0


def test_stereo_width2_fixture():
    sa = StereoAdapter(2, tau=1.0).double()
    with torch.no_grad():
        sa.norm_left.weight.copy_(t64([1.0, 2.0]))
        sa.norm_left.bias.copy_(t64([0.0, 0.5]))
        sa.norm_right.weight.copy_(t64([0.5, 1.0]))
        sa.norm_right.bias.copy_(t64([0.1, 0.0]))
        sa.w1_left.weight.copy_(t64([[1.0, 0.0], [0.5, 1.0]]))
        sa.w1_right.weight.copy_(t64([[0.0, 1.0], [1.0, -1.0]]))
        sa.w2_left.weight.copy_(t64([[2.0, 0.0], [0.0, 1.0]]))
        sa.w2_right.weight.copy_(t64([[1.0, 1.0], [0.0, 3.0]]))
        sa.gamma_left.fill_(0.5)
        sa.gamma_right.fill_(-2.0)
    xl = t64([[[[1.0, 3.0]], [[2.0, -1.0]]]])  # (1, 2, 1, 2)
    xr = t64([[[[0.0, 2.0]], [[1.0, 1.0]]]])
    ol, or_ = sa(xl, xr)
    el, er = stereo_adapter_reference(xl.numpy(), xr.numpy(), adapter_params_numpy(sa), 1.0)
    np.testing.assert_allclose(ol.detach().numpy(), el, atol=1e-6)
    np.testing.assert_allclose(or_.detach().numpy(), er, atol=1e-6)
    # the fixture is not degenerate: both views actually moved
    assert np.abs(el - xl.numpy()).max() > 1e-2 and np.abs(er - xr.numpy()).max() > 1e-2


@pytest.mark.parametrize("tau", [0.25, 1.0, 4.0])
def test_stereo_matches_reference_random(tau):
    sa = randomize(StereoAdapter(4, tau=tau).double(), seed=3)
    g = torch.Generator().manual_seed(7)
    xl, xr = torch.randn(2, 4, 3, 5, generator=g, dtype=torch.float64), torch.randn(2, 4, 3, 5, generator=g, dtype=torch.float64)
    ol, or_ = sa(xl, xr)
    el, er = stereo_adapter_reference(xl.numpy(), xr.numpy(), adapter_params_numpy(sa), tau)
    np.testing.assert_allclose(ol.detach().numpy(), el, atol=1e-6)
    np.testing.assert_allclose(or_.detach().numpy(), er, atol=1e-6)


def test_stereo_row_attention_only_mixes_within_rows():
    sa = randomize(StereoAdapter(4).double(), seed=1)
    xl = torch.randn(1, 4, 4, 6, dtype=torch.float64)
    xr = torch.randn(1, 4, 4, 6, dtype=torch.float64)
    base = sa(xl, xr)[0]
    xr2 = xr.clone()
    xr2[:, :, 2] += 1.0
    moved = (sa(xl, xr2)[0] - base).abs().amax(dim=(0, 1, 3))
    assert moved[2] > 0 and torch.all(moved[[0, 1, 3]] == 0)


def test_stereo_global_attention_mixes_rows():
    sa = randomize(StereoAdapter(4, attention="global").double(), seed=1)
    xl = torch.randn(1, 4, 4, 6, dtype=torch.float64)
    xr = torch.randn(1, 4, 4, 6, dtype=torch.float64)
    xr2 = xr.clone()
    xr2[:, :, 2] += 1.0
    moved = (sa(xl, xr2)[0] - sa(xl, xr)[0]).abs().amax(dim=(0, 1, 3))
    assert (moved > 0).all()


def _swap_params(sa):
    other = StereoAdapter(sa.channels, sa.tau, sa.attention).to(sa.gamma_left.dtype)
    sd = sa.state_dict()
    swapped = {}
    for k, v in sd.items():
        k2 = k.replace("left", "@").replace("right", "left").replace("@", "right")
        swapped[k2] = v
    other.load_state_dict(swapped)
    return other


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_stereo_view_swap_equivariance(seed):
    sa = randomize(StereoAdapter(4).double(), seed=seed % 1000)
    g = torch.Generator().manual_seed(seed)
    xl = torch.randn(1, 4, 2, 5, generator=g, dtype=torch.float64)
    xr = torch.randn(1, 4, 2, 5, generator=g, dtype=torch.float64)
    ol, or_ = sa(xl, xr)
    sl, sr = _swap_params(sa)(xr, xl)
    torch.testing.assert_close(sl, or_, atol=1e-6, rtol=0)
    torch.testing.assert_close(sr, ol, atol=1e-6, rtol=0)


def test_stereo_errors():
    sa = StereoAdapter(4)
    with pytest.raises(InvalidShape):
        sa(torch.zeros(1, 4, 2, 3), torch.zeros(1, 4, 2, 4))
    with pytest.raises(InvalidShape):
        sa(torch.zeros(1, 3, 2, 3), torch.zeros(1, 3, 2, 3))
    with pytest.raises(InvalidConfig):
        StereoAdapter(4, tau=0.0)
    with pytest.raises(InvalidConfig):
        StereoAdapter(4, attention="diagonal")


def test_stereo_tau_not_trainable():
    names = {n for n, _ in StereoAdapter(4).named_parameters()}
    assert not any("tau" in n or "temperature" in n for n in names)
    assert all(p.dim() == 0 for n, p in StereoAdapter(4).named_parameters() if n.startswith("gamma"))


# -- spatial adapter -------------------------------------------------------------------

def test_spatial_zero_at_init(rng):
    ad = SpatialAdapter(8, 2)
    assert torch.equal(ad(torch.randn(3, 5, 8)), torch.zeros(3, 5, 8))


def test_spatial_zero_input_zero_bias():
    ad = randomize(SpatialAdapter(8, 2), seed=2)
    with torch.no_grad():
        ad.down_proj.bias.zero_()
        ad.up_proj.bias.zero_()
    assert torch.equal(ad(torch.zeros(1, 4, 8)), torch.zeros(1, 4, 8))


def test_spatial_matches_reference():
    torch.manual_seed(11)
    ad = randomize(SpatialAdapter(8, 2).double(), seed=11)
    x = torch.randn(1, 6, 8, dtype=torch.float64)
    sd = {k: v.numpy() for k, v in ad.state_dict().items()}
    want = spatial_adapter_reference(x.numpy(), sd["down_proj.weight"], sd["down_proj.bias"],
                                     sd["up_proj.weight"], sd["up_proj.bias"])
    np.testing.assert_allclose(ad(x).detach().numpy(), want, atol=1e-6)


@pytest.mark.parametrize("d", [0, 8, 9])
def test_spatial_bad_bottleneck(d):
    with pytest.raises(InvalidConfig):
        SpatialAdapter(8, d)


def test_spatial_dim_mismatch():
    with pytest.raises(InvalidShape):
        SpatialAdapter(8, 2)(torch.zeros(1, 3, 7))


# -- gradients ------------------------------------------------------------------------

def test_stereo_gradients_all_fields():
    sa = randomize(StereoAdapter(3).double(), seed=5, scale=0.4)
    g = torch.Generator().manual_seed(5)
    xl = torch.randn(2, 3, 2, 4, generator=g, dtype=torch.float64)
    xr = torch.randn(2, 3, 2, 4, generator=g, dtype=torch.float64)
    wl = torch.randn(2, 3, 2, 4, generator=g, dtype=torch.float64)
    wr = torch.randn(2, 3, 2, 4, generator=g, dtype=torch.float64)

    def loss():
        ol, or_ = sa(xl, xr)
        return (ol * wl).sum() + (or_ * wr).sum()

    names = [n for n, _ in sa.named_parameters()]
    for i, name in enumerate(names):
        samples = sampled_gradient_check(sa, loss, n=3, seed=i, names={name})
        assert len(samples) == 3
        for _, idx, fd, an in samples:
            assert rel_err(fd, an) < 1e-3, (name, idx, fd, an)


def test_spatial_gradients_all_fields():
    ad = randomize(SpatialAdapter(6, 2).double(), seed=6, scale=0.5)
    x = torch.randn(2, 5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    w = torch.randn(2, 5, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    names = [n for n, _ in ad.named_parameters()]
    for i, name in enumerate(names):
        samples = sampled_gradient_check(ad, lambda: (ad(x) * w).sum(), n=4, seed=i, names={name})
        for _, idx, fd, an in samples:
            assert rel_err(fd, an) < 1e-3, (name, idx, fd, an)
