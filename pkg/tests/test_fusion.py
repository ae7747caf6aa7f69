import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import fd_relative_errors
from oracles import attention_loop, softmax_row
from uvmapid.diffusion import denoise_loss
from uvmapid.errors import ValidationError
from uvmapid.fusion import (
    AttentionParams,
    ConditioningBundle,
    Denoiser,
    DenoiserConfig,
    decoupled_cross_attention,
    freeze_copy,
)


def random_instance(rng, n=3, lt=4, ni=4, d_model=5, d_text=6, d_img=7, d_k=3, d_v=2):
    def m(*shape):
        return rng.standard_normal(shape)

    arrays = dict(Z=m(n, d_model), c_t=m(lt, d_text), c_i=m(ni, d_img), Wq=m(d_model, d_k), Wk=m(d_text, d_k),
                  Wv=m(d_text, d_v), Wk2=m(d_img, d_k), Wv2=m(d_img, d_v))
    return arrays


def to_params(a):
    t = {k: torch.from_numpy(v) for k, v in a.items()}
    return t["Z"], t["c_t"], t["c_i"], AttentionParams(t["Wq"], t["Wk"], t["Wv"], t["Wk2"], t["Wv2"])


def oracle(a):
    return np.array(attention_loop(*(a[k].tolist() for k in ("Z", "c_t", "c_i", "Wq", "Wk", "Wv", "Wk2", "Wv2"))))


def test_single_key_example():
    one = torch.ones(1, 1, dtype=torch.float64)
    p = AttentionParams(one, one, 2 * one, one, 3 * one)
    out = decoupled_cross_attention(one, one, one, p)
    assert out.tolist() == [[5.0]]


def test_attention_matches_scalar_oracle_on_many_instances():
    rng = np.random.default_rng(0)
    for k in range(120):
        dims = dict(n=int(rng.integers(1, 5)), lt=int(rng.integers(1, 6)), ni=int(rng.integers(1, 5)),
                    d_model=int(rng.integers(1, 6)), d_text=int(rng.integers(1, 6)), d_img=int(rng.integers(1, 6)),
                    d_k=int(rng.integers(1, 5)), d_v=int(rng.integers(1, 4)))
        a = random_instance(rng, **dims)
        out = decoupled_cross_attention(*to_params(a)).numpy()
        assert np.max(np.abs(out - oracle(a))) <= 1e-9, k


def test_zero_image_branch_is_text_attention():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = random_instance(rng)
        a["Wk2"][:] = 0
        a["Wv2"][:] = 0
        Z, c_t, c_i, p = to_params(a)
        Q = Z @ p.W_q
        text_only = torch.softmax(Q @ (c_t @ p.W_k).T / math.sqrt(p.d_k), dim=-1) @ (c_t @ p.W_v)
        assert torch.equal(decoupled_cross_attention(Z, c_t, c_i, p), text_only)


def test_branch_additivity():
    rng = np.random.default_rng(2)
    a = random_instance(rng)
    Z, c_t, c_i, p = to_params(a)
    zk, zv = torch.zeros_like(p.W_k_img), torch.zeros_like(p.W_v_img)
    text = decoupled_cross_attention(Z, c_t, c_i, AttentionParams(p.W_q, p.W_k, p.W_v, zk, zv))
    image = decoupled_cross_attention(
        Z, c_t, c_i, AttentionParams(p.W_q, torch.zeros_like(p.W_k), torch.zeros_like(p.W_v), p.W_k_img, p.W_v_img)
    )
    assert torch.allclose(decoupled_cross_attention(Z, c_t, c_i, p), text + image, rtol=0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    a = random_instance(rng)
    Q = a["Z"] @ a["Wq"]
    for ctx, Wk in ((a["c_t"], a["Wk"]), (a["c_i"], a["Wk2"])):
        scores = Q @ (ctx @ Wk).T / math.sqrt(Q.shape[1])
        w = torch.softmax(torch.from_numpy(scores), dim=-1)
        assert torch.allclose(w.sum(-1), torch.ones(w.shape[0], dtype=torch.float64), rtol=0, atol=1e-9)
        assert np.allclose(softmax_row(scores[0].tolist()), w[0].numpy(), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_key_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    a = random_instance(rng)
    Z, c_t, c_i, p = to_params(a)
    out = decoupled_cross_attention(Z, c_t, c_i, p)
    pt = torch.from_numpy(rng.permutation(c_t.shape[0]))
    pi = torch.from_numpy(rng.permutation(c_i.shape[0]))
    out2 = decoupled_cross_attention(Z, c_t[pt], c_i[pi], p)
    assert torch.allclose(out, out2, rtol=0, atol=1e-9)


def test_attention_dimension_errors():
    a = random_instance(np.random.default_rng(3))
    Z, c_t, c_i, p = to_params(a)
    with pytest.raises(ValidationError):
        decoupled_cross_attention(Z[:, :-1], c_t, c_i, p)
    with pytest.raises(ValidationError):
        decoupled_cross_attention(Z, c_t[:, :-1], c_i, p)
    with pytest.raises(ValidationError):
        decoupled_cross_attention(Z, c_t, c_i[:, :-1], p)


def test_image_branch_reads_face_tokens():
    """K' and V' are projections of the face tokens, so only they move the image branch."""
    a = random_instance(np.random.default_rng(4))
    Z, c_t, c_i, p = to_params(a)
    base = decoupled_cross_attention(Z, c_t, c_i, p)
    assert not torch.equal(base, decoupled_cross_attention(Z, c_t, c_i + 1.0, p))


SMALL = DenoiserConfig(latent_channels=4, channels=8, d_text=6, d_img=5, d_k=4, d_v=4, d_time=8)


def tokens(seed, b=2, lt=3, ni=2, cfg=SMALL, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, lt, cfg.d_text, generator=g, dtype=dtype),
            torch.randn(b, ni, cfg.d_img, generator=g, dtype=dtype))


@pytest.mark.parametrize("hw", [(8, 8), (16, 16), (4, 12)])
def test_denoiser_shape_and_determinism(hw):
    model = Denoiser(SMALL, seed=0)
    z = torch.randn(2, 4, *hw)
    t = torch.tensor([1, 1000])
    text, face = tokens(0)
    out = model(z, t, text, face)
    assert out.shape == z.shape and torch.isfinite(out).all()
    assert torch.equal(out, model(z, t, text, face))


def test_denoiser_same_seed_same_weights():
    a, b = Denoiser(SMALL, seed=3), Denoiser(SMALL, seed=3)
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n


def test_denoiser_zero_init_image_branch():
    m = Denoiser(SMALL, seed=0)
    assert not m.fusion.W_k_img.any() and not m.fusion.W_v_img.any()
    # with a zeroed image branch the face tokens have no effect at the start of fine-tuning
    z, t = torch.randn(1, 4, 8, 8), torch.tensor([10])
    text, face = tokens(1, b=1)
    assert torch.equal(m(z, t, text, face), m(z, t, text, face + 3.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 1), st.integers(0, 1))
def test_face_token_sensitivity(seed, row, col):
    cfg = DenoiserConfig(**{**SMALL.to_dict(), "zero_init_image_branch": False})
    m = Denoiser(cfg, seed=seed % 1000)
    z, t = torch.randn(1, 4, 8, 8, dtype=torch.float64), torch.tensor([500])
    m = m.double()
    text, face = tokens(seed, b=1, dtype=torch.float64)
    face2 = face.clone()
    face2[0, row, col] += 0.5
    with torch.no_grad():
        assert float((m(z, t, text, face) - m(z, t, text, face2)).abs().max()) > 0


@pytest.mark.parametrize(
    "z_shape, t, err",
    [((2, 3, 8, 8), [1, 1], "latents"), ((2, 4, 7, 8), [1, 1], "even"), ((2, 4, 8, 8), [0, 1], "timesteps"),
     ((2, 4, 8, 8), [1, 1001], "timesteps"), ((2, 4, 8, 8), [1], "timestep")],
)
def test_denoiser_validation(z_shape, t, err):
    m = Denoiser(SMALL, seed=0)
    text, face = tokens(0)
    with pytest.raises(ValidationError, match=err):
        m(torch.zeros(z_shape), torch.tensor(t), text, face)


def test_denoiser_token_width_validation():
    m = Denoiser(SMALL, seed=0)
    text, face = tokens(0)
    with pytest.raises(ValidationError, match="text"):
        m(torch.zeros(2, 4, 8, 8), torch.tensor([1, 1]), text[..., :-1], face)
    with pytest.raises(ValidationError, match="face"):
        m(torch.zeros(2, 4, 8, 8), torch.tensor([1, 1]), text, face[..., :-1])


def test_denoiser_gradients_match_finite_differences():
    cfg = DenoiserConfig(latent_channels=4, channels=4, d_text=4, d_img=4, d_k=4, d_v=4, d_time=8,
                         zero_init_image_branch=False)
    m = Denoiser(cfg, seed=7).double()
    g = torch.Generator().manual_seed(0)
    z = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    text = torch.randn(1, 3, 4, generator=g, dtype=torch.float64)
    face = torch.randn(1, 2, 4, generator=g, dtype=torch.float64)
    t = torch.tensor([123])
    errors = fd_relative_errors(lambda: denoise_loss(m(z, t, text, face), eps), dict(m.named_parameters()))
    bad = {n: e for n, e in errors.items() if e > 1e-4}
    assert not bad, bad


def test_freeze_copy_isolation_and_fidelity():
    m = Denoiser(SMALL, seed=0)
    frozen = freeze_copy(m)
    z, t = torch.randn(2, 4, 8, 8), torch.tensor([5, 6])
    text, face = tokens(2)
    assert torch.equal(frozen(z, t, text, face), m(z, t, text, face))
    before = {k: v.clone() for k, v in frozen.state_dict().items()}
    opt = torch.optim.SGD(m.parameters(), lr=0.1)
    m(z, t, text, face).pow(2).mean().backward()
    opt.step()
    for k, v in frozen.state_dict().items():
        assert v.numpy().tobytes() == before[k].numpy().tobytes(), k
    assert not torch.equal(m.conv_out.weight, frozen.conv_out.weight)
    assert all(not p.requires_grad for p in frozen.parameters())
    again = freeze_copy(frozen)
    for k, v in again.state_dict().items():
        assert torch.equal(v, frozen.state_dict()[k])


def test_conditioning_bundle_unconditional():
    a, b, c, d = (torch.full((1, 2), float(i)) for i in range(4))
    u = ConditioningBundle(a, b, c, d).unconditional()
    assert u.text_tokens is c and u.face_tokens is d
