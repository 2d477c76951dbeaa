import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from torch import nn

from logo_ssl.encoder import Encoder, TinyConv, encode
from logo_ssl.errors import ContractError
from logo_ssl.losses import LossConfig, cosine_loss, global_global_loss, info_nce, local_global_loss
from oracles import analytic_grad, central_fd, log_info_nce, rel_err

E1, E2 = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])


def identity_h(n=2):
    enc = Encoder("noncontrastive", TinyConv((4, 4, 4, 4)), embed_dim=n)
    enc.predictor = nn.Identity()
    return enc


def unit(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(*shape, generator=g, dtype=dtype), dim=-1)


# -- info_nce ----------------------------------------------------------------

def test_info_nce_uniform_logits_is_log_k_plus_one():
    negs = E2.repeat(3, 1)
    assert abs(float(info_nce(E1, E2, negs, 1.0)) - math.log(4)) < 1e-6


def test_info_nce_two_dim_hand_value():
    val = float(info_nce(E1, E1, E2, 0.5))
    assert abs(val - math.log(1 + math.exp(-2))) < 1e-6
    assert abs(val - 0.12693) < 1e-5


def test_info_nce_matches_numpy_oracle():
    z, zp, negs = unit(5, 8, seed=1), unit(5, 8, seed=2), unit(11, 8, seed=3)
    assert abs(float(info_nce(z, zp, negs, 0.2)) - log_info_nce(z, zp, negs, 0.2)) < 1e-5


def test_info_nce_rejects_unnormalised_rows():
    with pytest.raises(ContractError):
        info_nce(2 * E1, E1, E2, 0.1)
    with pytest.raises(ContractError):
        info_nce(E1, E1, torch.zeros(0, 2), 0.1)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-1.0, 0.99), b=st.floats(0.001, 0.5), tau=st.floats(0.05, 2.0))
def test_info_nce_positive_and_monotone_in_positive_similarity(a, b, tau):
    negs = unit(4, 2, seed=7)

    def loss_at(cos):
        zp = torch.tensor([[cos, math.sqrt(max(1 - cos * cos, 0.0))]])
        return float(info_nce(E1, zp, negs, tau))

    lo = loss_at(min(a + b, 1.0))
    hi = loss_at(a)
    assert lo > 0 and hi > 0
    assert hi > lo


def test_info_nce_gradient_matches_finite_differences():
    z, zp, negs = unit(4, 8, seed=4, dtype=torch.float64), unit(4, 8, seed=5, dtype=torch.float64), \
        unit(6, 8, seed=6, dtype=torch.float64)
    x = torch.randn(4, 8, dtype=torch.float64)
    f = lambda v: info_nce(F.normalize(v, dim=1), zp, negs, 0.1)  # noqa: E731
    assert rel_err(analytic_grad(f, x), central_fd(f, x)) < 1e-4
    f2 = lambda v: info_nce(z, F.normalize(v, dim=1), negs, 0.1)  # noqa: E731
    assert rel_err(analytic_grad(f2, x), central_fd(f2, x)) < 1e-4


# -- cosine_loss ---------------------------------------------------------------

def test_cosine_loss_hand_values():
    assert abs(float(cosine_loss(E1, E1)) + 1) < 1e-6
    assert abs(float(cosine_loss(E1, E2))) < 1e-6
    assert abs(float(cosine_loss(torch.tensor([[3.0, 4.0]]), torch.tensor([[4.0, 3.0]]))) + 0.96) < 1e-6
    assert abs(float(cosine_loss(E1, E1, identity_h())) + 1) < 1e-6


def test_cosine_loss_contracts():
    with pytest.raises(ContractError):
        cosine_loss(E1, E1.clone().requires_grad_(True))
    with pytest.raises(ContractError):
        cosine_loss(torch.zeros(1, 2), E1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_cosine_loss_range_and_target_scale_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    z1, z2 = torch.randn(3, 5, generator=g), torch.randn(3, 5, generator=g)
    v = float(cosine_loss(z1, z2))
    assert -1 - 1e-6 <= v <= 1 + 1e-6
    assert abs(v - float(cosine_loss(z1, z2 * scale))) < 1e-5


def test_cosine_loss_gradient_with_predictor_matches_finite_differences():
    torch.manual_seed(0)
    enc = Encoder("noncontrastive", TinyConv((4, 4, 4, 4)), embed_dim=8).double().eval()
    z2 = torch.randn(4, 8, dtype=torch.float64)
    x = torch.randn(4, 8, dtype=torch.float64)
    f = lambda v: cosine_loss(v, z2, enc)  # noqa: E731
    assert rel_err(analytic_grad(f, x), central_fd(f, x)) < 1e-4


# -- compositions --------------------------------------------------------------

def test_global_global_noncontrastive_identical_is_minus_one():
    enc = identity_h()
    z = torch.tensor([[0.6, 0.8]])
    assert abs(float(global_global_loss((z, z), (z, z), enc, LossConfig(similarity_kind="cosine"))) + 1) < 1e-6


def test_global_global_contrastive_uniform_is_log_k_plus_one():
    K = 7
    cfg = LossConfig(temperature=0.3)
    val = global_global_loss((E1, E1), (E2, E2), None, cfg, E2.repeat(K, 1))
    assert abs(float(val) - math.log(K + 1)) < 1e-6


def test_global_global_matches_independent_oracle_on_real_images():
    torch.manual_seed(0)
    enc = Encoder("contrastive", TinyConv((4, 8, 8, 8)), embed_dim=8)
    imgs = torch.rand(8, 3, 32, 32)
    z1, z2 = encode(enc, imgs[:4]), encode(enc, imgs[4:])
    k1, k2 = encode(enc, imgs[:4], use_momentum=True), encode(enc, imgs[4:], use_momentum=True)
    k1, k2 = F.normalize(k1, dim=1), F.normalize(k2, dim=1)
    negs = unit(16, 8, seed=9)
    cfg = LossConfig(temperature=0.1)
    got = float(global_global_loss((z1, z2), (k1, k2), enc, cfg, negs).detach())
    n = lambda t: (t / t.norm(dim=1, keepdim=True)).detach().numpy()  # noqa: E731
    want = 0.5 * (log_info_nce(n(z1), n(k2), negs, 0.1) + log_info_nce(n(z2), n(k1), negs, 0.1))
    assert abs(got - want) < 1e-5


def test_symmetrised_global_global_is_swap_invariant():
    z1, z2, t1, t2 = (unit(4, 8, seed=s) for s in range(4))
    negs = unit(10, 8, seed=11)
    cfg = LossConfig()
    a = global_global_loss((z1, z2), (t1, t2), None, cfg, negs)
    b = global_global_loss((z2, z1), (t2, t1), None, cfg, negs)
    assert abs(float(a) - float(b)) < 1e-6
    one_way = global_global_loss((z1, z2), (t1, t2), None, LossConfig(symmetrize=False), negs)
    assert abs(float(one_way) - float(info_nce(z1, t2, negs, 0.1))) < 1e-6


def test_local_global_identical_views_is_minus_four():
    enc = identity_h()
    z = torch.tensor([[0.6, 0.8]])
    assert abs(float(local_global_loss((z, z), (z, z), enc, LossConfig(similarity_kind="cosine"))) + 4) < 1e-6


def test_local_global_uniform_is_four_log_k_plus_one():
    K = 5
    val = local_global_loss((E1, E1), (E2, E2), None, LossConfig(temperature=1.0), E2.repeat(K, 1))
    assert abs(float(val) - 4 * math.log(K + 1)) < 1e-6


def test_local_global_rejects_anchors_with_grad():
    z = E1.clone().requires_grad_(True)
    with pytest.raises(ContractError):
        local_global_loss((E1, E1), (z, E1), None, LossConfig(), E2)


def test_local_global_gradient_matches_finite_differences():
    zl2 = unit(4, 8, seed=1, dtype=torch.float64)
    t1, t2 = unit(4, 8, seed=2, dtype=torch.float64), unit(4, 8, seed=3, dtype=torch.float64)
    negs = unit(6, 8, seed=4, dtype=torch.float64)
    x = torch.randn(4, 8, dtype=torch.float64)
    f = lambda v: local_global_loss((v, zl2), (t1, t2), None, LossConfig(), negs)  # noqa: E731
    assert rel_err(analytic_grad(f, x), central_fd(f, x)) < 1e-4


def test_local_global_stop_gradient_path_is_exactly_zero():
    """A parameter that reaches the loss only through sg(.) receives no gradient at all."""
    torch.manual_seed(0)
    w_local = torch.randn(8, 8, dtype=torch.float64, requires_grad=True)
    w_global = torch.randn(8, 8, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, 8, dtype=torch.float64)
    anchors = (x @ w_global).detach()
    loss = local_global_loss((x @ w_local, x @ w_local + 1), (anchors, anchors * 2), identity_h(8).double(),
                             LossConfig(similarity_kind="cosine"))
    loss.backward()
    assert w_global.grad is None
    assert w_local.grad is not None and float(w_local.grad.abs().sum()) > 0
