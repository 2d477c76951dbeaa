import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from logo_ssl.affinity import (
    AffinityRegressor, PairBatch, affinity_forward, cosine_affinity_loss, frozen, local_local_loss,
    make_pairs, omega_objective, sample_negative_partner,
)
from logo_ssl.errors import ContractError
from oracles import analytic_grad, central_fd, rel_err


def regressor(n=8, hidden=32, seed=0, **kw):
    torch.manual_seed(seed)
    return AffinityRegressor(n, hidden, **kw)


def test_zero_head_is_constant_ln2():
    reg = regressor().zero_head_()
    out = affinity_forward(reg, torch.randn(6, 8), torch.randn(6, 8))
    assert torch.allclose(out, torch.full((6,), math.log(2)), atol=1e-7)


def test_empty_and_mismatched_inputs():
    reg = regressor()
    assert affinity_forward(reg, torch.zeros(0, 8), torch.zeros(0, 8)).shape == (0,)
    with pytest.raises(ContractError):
        affinity_forward(reg, torch.zeros(3, 8), torch.zeros(3, 7))
    with pytest.raises(ContractError):
        affinity_forward(reg, torch.zeros(3, 4), torch.zeros(3, 4))


def test_output_non_negative_over_random_inputs():
    reg = regressor(hidden=64, seed=5)
    g = torch.Generator().manual_seed(0)
    for mode in (True, False):
        reg.train(mode)
        a = 10 * torch.randn(10_000, 8, generator=g)
        b = 10 * torch.randn(10_000, 8, generator=g)
        with torch.no_grad():
            out = reg(a, b)
        assert bool((out >= 0).all()) and bool(torch.isfinite(out).all())


def test_default_architecture_has_five_blocks():
    reg = AffinityRegressor(128)
    linears = [m for m in reg.blocks if isinstance(m, torch.nn.Linear)]
    norms = [m for m in reg.blocks if isinstance(m, torch.nn.BatchNorm1d)]
    assert len(linears) == len(norms) == 5
    assert linears[0].in_features == 256 and all(m.out_features == 512 for m in linears)
    assert reg.head.out_features == 1


# -- partners ------------------------------------------------------------------

def test_partner_of_two_is_the_swap(rng):
    assert sample_negative_partner(2, rng).tolist() == [1, 0]


def test_partner_is_seeded_derangement():
    a = sample_negative_partner(8, np.random.default_rng(3))
    b = sample_negative_partner(8, np.random.default_rng(3))
    assert a.tolist() == b.tolist()
    assert sorted(a.tolist()) == list(range(8))
    assert not (a == np.arange(8)).any()


def test_partner_never_has_fixed_points(rng):
    fixed = sum(int((sample_negative_partner(5, rng) == np.arange(5)).sum()) for _ in range(10_000))
    assert fixed == 0


def test_partner_needs_two():
    with pytest.raises(ContractError):
        sample_negative_partner(1, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(b=st.integers(2, 40), seed=st.integers(0, 2**31))
def test_product_pairs_pair_different_images(b, seed):
    k = sample_negative_partner(b, np.random.default_rng(seed))
    src = torch.arange(b, dtype=torch.float64).unsqueeze(1)
    joint, product = make_pairs(src, src + 0.5, k)
    assert torch.equal(joint.left.floor(), joint.right.floor())
    assert bool((product.left != product.right).all())


# -- omega -------------------------------------------------------------------------

def test_omega_of_constant_regressor_is_zero():
    reg = regressor().zero_head_()
    joint, product = make_pairs(torch.randn(4, 8), torch.randn(4, 8), [1, 2, 3, 0])
    assert float(omega_objective(reg, joint, product).detach()) == 0.0


def test_omega_dot_fixture_hand_value(dot_regressor):
    reg = dot_regressor(2)
    e1, e2 = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
    val = omega_objective(reg, PairBatch(e1, e1, "joint"), PairBatch(e1, e2, "product"))
    assert float(val) == 1.0


def test_omega_rejects_encoder_graph_and_wrong_kinds():
    reg = regressor()
    z = torch.randn(4, 8, requires_grad=True)
    joint, product = make_pairs(z, z.detach(), [1, 0, 3, 2])
    with pytest.raises(ContractError):
        omega_objective(reg, joint, product)
    joint, product = make_pairs(z.detach(), z.detach(), [1, 0, 3, 2])
    with pytest.raises(ContractError):
        omega_objective(reg, product, joint)


def test_omega_gradient_wrt_regressor_matches_finite_differences():
    reg = regressor(hidden=6, seed=1).double()
    g = torch.Generator().manual_seed(2)
    zl1 = F.normalize(torch.randn(4, 8, generator=g, dtype=torch.float64), dim=1)
    zl2 = F.normalize(torch.randn(4, 8, generator=g, dtype=torch.float64), dim=1)
    joint, product = make_pairs(zl1, zl2, [2, 3, 1, 0])
    params = list(reg.parameters())
    flat0 = torch.nn.utils.parameters_to_vector(params).detach()

    def f(vec):
        torch.nn.utils.vector_to_parameters(vec, params)
        return omega_objective(reg, joint, product)

    reg.zero_grad()
    torch.nn.utils.vector_to_parameters(flat0.clone(), params)
    omega_objective(reg, joint, product).backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    with torch.no_grad():
        numeric = central_fd(f, flat0.clone())
    assert rel_err(analytic, numeric) < 1e-4


# -- local-local ---------------------------------------------------------------------

def test_local_local_constant_head_gives_ln2_and_zero_encoder_grad():
    reg = regressor().zero_head_()
    z1 = torch.randn(4, 8, requires_grad=True)
    z2 = torch.randn(4, 8, requires_grad=True)
    loss = local_local_loss(reg, z1, z2)
    assert abs(float(loss) - math.log(2)) < 1e-6
    loss.backward()
    assert float(z1.grad.abs().max()) == 0.0 and float(z2.grad.abs().max()) == 0.0


def test_local_local_dot_fixture_equals_cosine(dot_regressor):
    g = torch.Generator().manual_seed(0)
    z1 = F.normalize(torch.randn(5, 6, generator=g), dim=1)
    z2 = F.normalize(torch.randn(5, 6, generator=g), dim=1)
    assert abs(float(local_local_loss(dot_regressor(6), z1, z2)) - float(cosine_affinity_loss(z1, z2))) < 1e-6


def test_local_local_freezes_regressor_and_restores_it():
    reg = regressor()
    reg.train()
    z1 = torch.randn(4, 8, requires_grad=True)
    loss = local_local_loss(reg, z1, torch.randn(4, 8))
    loss.backward()
    assert all(p.grad is None for p in reg.parameters())
    assert reg.training and all(p.requires_grad for p in reg.parameters())


def test_local_local_encoder_gradient_matches_finite_differences():
    reg = regressor(hidden=16, seed=3).double()
    # populate running statistics so the frozen (eval-mode) regressor is non-trivial
    with torch.no_grad():
        for _ in range(3):
            reg(torch.randn(32, 8, dtype=torch.float64), torch.randn(32, 8, dtype=torch.float64))
    g = torch.Generator().manual_seed(4)
    z2 = torch.randn(4, 8, generator=g, dtype=torch.float64)
    x = torch.randn(4, 8, generator=g, dtype=torch.float64)
    f = lambda v: local_local_loss(reg, v, z2)  # noqa: E731
    assert rel_err(analytic_grad(f, x), central_fd(f, x)) < 1e-4
    f2 = lambda v: local_local_loss(reg, z2, v)  # noqa: E731
    assert rel_err(analytic_grad(f2, x), central_fd(f2, x)) < 1e-4


def test_frozen_context_restores_flags_after_error():
    reg = regressor()
    reg.head.weight.requires_grad_(False)
    with pytest.raises(RuntimeError):
        with frozen(reg):
            assert not reg.training
            raise RuntimeError
    assert not reg.head.weight.requires_grad and reg.head.bias.requires_grad


def test_discrimination_on_statistically_closer_joint_pairs():
    """Omega ascent alone separates same-source from cross-source pairs on held-out data."""
    n = 8
    for seed in range(3):
        g = torch.Generator().manual_seed(seed)

        def draw(b):
            centre = torch.randn(b, n, generator=g)
            a = F.normalize(centre + 0.3 * torch.randn(b, n, generator=g), dim=1)
            c = F.normalize(centre + 0.3 * torch.randn(b, n, generator=g), dim=1)
            return a, c

        reg = regressor(n, hidden=64, seed=seed)
        opt = torch.optim.SGD(reg.parameters(), lr=0.03, momentum=0.9)
        rng = np.random.default_rng(seed)
        for _ in range(200):
            a, c = draw(64)
            joint, product = make_pairs(a, c, sample_negative_partner(64, rng))
            opt.zero_grad()
            (-omega_objective(reg, joint, product)).backward()
            opt.step()
        reg.eval()
        a, c = draw(512)
        joint, product = make_pairs(a, c, sample_negative_partner(512, rng))
        with torch.no_grad():
            gap = float(reg(joint.left, joint.right).mean() - reg(product.left, product.right).mean())
        assert gap > 0, (seed, gap)
