import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from logo_ssl.encoder import Encoder, NegativeQueue, TinyConv, encode, enqueue, momentum_update, predict
from logo_ssl.errors import ContractError, NonFiniteError
from oracles import analytic_grad, central_fd, rel_err


def small(variant="contrastive", n=16):
    torch.manual_seed(0)
    return Encoder(variant, TinyConv((4, 8, 8, 8)), embed_dim=n)


def test_empty_batch_gives_empty_embedding():
    enc = small()
    z = encode(enc, torch.zeros(0, 3, 32, 32))
    assert z.shape == (0, 16)


def test_duplicated_inputs_give_identical_rows_in_eval():
    enc = small().eval()
    x = torch.rand(1, 3, 32, 32).repeat(3, 1, 1, 1)
    z = encode(enc, x)
    assert torch.equal(z[0], z[1]) and torch.equal(z[1], z[2])


def test_global_and_local_sizes_share_output_shape():
    enc = small().eval()
    assert encode(enc, torch.rand(1, 3, 64, 64)).shape == (1, 16)
    assert encode(enc, torch.rand(1, 3, 32, 32)).shape == (1, 16)


def test_variant_companions():
    c, s = small("contrastive"), small("noncontrastive")
    assert c.predictor is None and c.momentum_backbone is not None
    assert s.predictor is not None and s.momentum_backbone is None
    online = [p.shape for p in list(c.backbone.parameters()) + list(c.projector.parameters())]
    assert [p.shape for p in c.momentum_parameters()] == online
    assert not any(p.requires_grad for p in c.momentum_parameters())


def test_momentum_output_carries_no_grad():
    enc = small()
    z = encode(enc, torch.rand(2, 3, 32, 32), use_momentum=True)
    assert not z.requires_grad
    with pytest.raises(ContractError):
        encode(small("noncontrastive"), torch.rand(2, 3, 32, 32), use_momentum=True)


def test_non_finite_input_raises():
    enc = small()
    x = torch.rand(2, 3, 32, 32)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        encode(enc, x)


def _momentum_pairs(enc):
    online = list(enc.backbone.parameters()) + list(enc.projector.parameters())
    return list(zip(enc.momentum_parameters(), online))


def test_momentum_one_keeps_momentum_params():
    enc = small()
    with torch.no_grad():
        for p in enc.online_parameters():
            p.add_(1.0)
    before = [pk.clone() for pk, _ in _momentum_pairs(enc)]
    momentum_update(enc, 1.0)
    assert all(torch.equal(b, pk) for b, (pk, _) in zip(before, _momentum_pairs(enc)))


def test_momentum_zero_copies_online_params():
    enc = small()
    with torch.no_grad():
        for p in enc.online_parameters():
            p.add_(torch.randn_like(p))
    online_before = [p.clone() for p in enc.online_parameters()]
    momentum_update(enc, 0.0)
    assert all(torch.equal(pk, pq) for pk, pq in _momentum_pairs(enc))
    assert all(torch.equal(a, b) for a, b in zip(online_before, enc.online_parameters()))


def test_momentum_scalar_hand_value():
    enc = small()
    with torch.no_grad():
        for pk, pq in _momentum_pairs(enc):
            pk.zero_()
            pq.fill_(1.0)
    momentum_update(enc, 0.9)
    for pk, _ in _momentum_pairs(enc):
        assert torch.allclose(pk, torch.full_like(pk, 0.1), atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(m=st.floats(0.0, 1.0))
def test_momentum_update_is_a_contraction(m):
    enc = small()
    with torch.no_grad():
        for p in enc.online_parameters():
            p.add_(torch.randn_like(p))
    gaps = [(pk - pq).clone() for pk, pq in _momentum_pairs(enc)]
    momentum_update(enc, m)
    for gap, (pk, pq) in zip(gaps, _momentum_pairs(enc)):
        assert torch.allclose(pk - pq, m * gap, atol=1e-6, rtol=1e-5)


def test_momentum_update_rejects_noncontrastive():
    with pytest.raises(ContractError):
        momentum_update(small("noncontrastive"), 0.5)


def test_predict_identity_fixture_and_contracts():
    enc = small("noncontrastive")
    enc.predictor = nn.Identity()
    z = torch.randn(3, 16)
    assert torch.equal(predict(enc, z), z)
    assert predict(enc, torch.zeros(0, 16)).shape == (0, 16)
    with pytest.raises(ContractError):
        predict(small("contrastive"), z)


def test_predict_jvp_matches_finite_differences():
    enc = small("noncontrastive", n=8).double().eval()
    torch.manual_seed(3)
    z = torch.randn(4, 8, dtype=torch.float64)
    v = torch.randn(4, 8, dtype=torch.float64)
    f = lambda x: (predict(enc, x) * v).sum()  # noqa: E731
    assert rel_err(analytic_grad(f, z), central_fd(f, z)) < 1e-4


def test_enqueue_full_replacement_and_fifo_halves():
    g = torch.Generator().manual_seed(0)
    q = NegativeQueue(8, 4, generator=g)
    rows = torch.nn.functional.normalize(torch.randn(8, 4), dim=1)
    enqueue(q, rows)
    assert torch.equal(q.buffer, rows)
    a = torch.nn.functional.normalize(torch.randn(4, 4), dim=1)
    b = torch.nn.functional.normalize(torch.randn(4, 4), dim=1)
    enqueue(q, a)
    enqueue(q, b)
    assert torch.equal(q.buffer[:4], a) and torch.equal(q.buffer[4:], b)
    assert torch.equal(q.ordered()[-4:], b)
    assert len(q) == 8


def test_enqueue_contracts():
    q = NegativeQueue(4, 3)
    with pytest.raises(ContractError):
        q.enqueue(torch.nn.functional.normalize(torch.randn(5, 3), dim=1))
    with pytest.raises(ContractError):
        q.enqueue(torch.ones(2, 3))


def test_queue_rows_stay_unit_after_random_enqueues():
    rng = np.random.default_rng(0)
    q = NegativeQueue(37, 6)
    for _ in range(100):
        b = int(rng.integers(1, 38))
        z = torch.nn.functional.normalize(torch.from_numpy(rng.normal(size=(b, 6))).float(), dim=1)
        q.enqueue(z)
        assert 0 <= q.head < 37
    assert torch.allclose(q.buffer.norm(dim=1), torch.ones(37), atol=1e-5)
