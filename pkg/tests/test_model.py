import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlm.errors import IdOutOfRange, NoMaskedPositions, NonFiniteGradient, ShapeMismatch
from flowlm.model import FlowEncoder, ModelConfig, cls_loss, mlm_loss
from flowlm.optim import AdamState, backward, parameter_update


def batch_for(config, B=3, L=6, seed=0, pad_tail=2):
    rng = np.random.default_rng(seed)
    ids = torch.tensor(np.stack([rng.integers(3, v, size=(B, L)) for v in config.vocab_sizes], -1))
    pad = torch.ones(B, L, dtype=torch.bool)
    if pad_tail:
        pad[-1, -pad_tail:] = False
        ids[-1, -pad_tail:] = 0
    return ids, pad


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_token_dim_is_768():
    config = ModelConfig(vocab_sizes=(10, 10, 10, 10, 10, 10))
    assert config.token_dim == 768
    model = FlowEncoder(config, torch.Generator().manual_seed(0)).eval()
    ids, pad = batch_for(config, B=2, L=5)
    assert model.embed(ids, pad).shape == (2, 5, 768)
    assert model(ids, pad).shape == (2, 5, 768)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_sizes=(5,) * 6, embed_dim=5, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_sizes=(5,) * 5)
    cfg = ModelConfig(vocab_sizes=(5,) * 6, embed_dim=4, num_heads=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_identical_flows_identical_embeddings(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0)).eval()
    ids, pad = batch_for(tiny_config)
    ids[1, 2] = ids[0, 2]
    e = model.embed(ids, pad)
    assert torch.equal(e[0, 2], e[1, 2])


def test_zero_embeddings_leave_positional(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0)).eval()
    for emb in model.embeddings:
        zero_(emb)
    ids, pad = batch_for(tiny_config, L=5)
    e = model.embed(ids, pad)
    assert torch.equal(e, model.position[:5].expand_as(e))


def test_embedding_is_feature_concat(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0)).eval()
    ids, pad = batch_for(tiny_config, L=4)
    e = model.embed(ids, pad)
    E = tiny_config.embed_dim
    for f in range(6):
        expected = model.embeddings[f].weight[ids[0, 1, f]] + model.position[1, f * E : (f + 1) * E]
        torch.testing.assert_close(e[0, 1, f * E : (f + 1) * E], expected)


def test_id_out_of_range(tiny_config):
    model = FlowEncoder(tiny_config)
    ids, pad = batch_for(tiny_config)
    ids[0, 0, 2] = tiny_config.vocab_sizes[2]
    with pytest.raises(IdOutOfRange):
        model.embed(ids, pad)


def test_shape_errors(tiny_config):
    model = FlowEncoder(tiny_config)
    ids, pad = batch_for(tiny_config, L=tiny_config.max_len + 1, pad_tail=0)
    with pytest.raises(ShapeMismatch):
        model(ids, pad)
    with pytest.raises(ShapeMismatch):
        model.encode(torch.zeros(2, 3, 7), torch.ones(2, 3, dtype=torch.bool))
    with pytest.raises(ShapeMismatch):
        model.cls_logits(torch.zeros(2, 3, 7))


def test_attention_rows_normalized(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(1)).eval()
    ids, pad = batch_for(tiny_config, pad_tail=3)
    _, attention = model.encode(model.embed(ids, pad), pad, return_attention=True)
    probs = attention[0]
    sums = probs.sum(-1)
    torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-5, rtol=0)
    # pad keys receive exactly zero weight
    assert (probs[-1, :, :, -3:] == 0).all()


def test_pad_isolation(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(2)).eval()
    ids, pad = batch_for(tiny_config, pad_tail=3)
    h1 = model(ids, pad)
    ids2 = ids.clone()
    ids2[-1, -3:] = torch.tensor([4, 3, 2, 1, 4, 2])
    h2 = model(ids2, pad)
    torch.testing.assert_close(h1[pad], h2[pad], atol=0, rtol=0)
    labels = torch.zeros(pad.shape, dtype=torch.long)
    labels2 = labels.clone()
    labels2[-1, -3:] = 1
    logits = model.cls_logits(h1)
    assert cls_loss(logits, labels, pad) == cls_loss(logits, labels2, pad)


def test_zero_layers_is_layer_norm(tiny_config):
    config = ModelConfig(**{**tiny_config.to_dict(), "num_layers": 0})
    model = FlowEncoder(config, torch.Generator().manual_seed(0)).eval()
    x = torch.randn(2, 5, config.token_dim)
    pad = torch.ones(2, 5, dtype=torch.bool)
    expected = torch.nn.functional.layer_norm(x, (config.token_dim,))
    torch.testing.assert_close(model.encode(x, pad), expected)


def test_mlm_logits(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0)).eval()
    ids, pad = batch_for(tiny_config)
    logits = model.mlm_logits(model(ids, pad))
    assert [lg.shape[-1] for lg in logits] == list(tiny_config.vocab_sizes)
    for lg in logits:
        s = torch.softmax(lg.double(), -1).sum(-1)
        torch.testing.assert_close(s, torch.ones_like(s), atol=1e-6, rtol=0)
    zero_(model.mlm_out)
    for lg, v in zip(model.mlm_logits(model(ids, pad)), tiny_config.vocab_sizes):
        torch.testing.assert_close(torch.softmax(lg, -1), torch.full_like(lg, 1 / v))


def test_cls_logits(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0)).eval()
    ids, pad = batch_for(tiny_config)
    logits = model.cls_logits(model(ids, pad))
    assert logits.shape == (3, 6, 2)
    s = torch.softmax(logits.double(), -1).sum(-1)
    torch.testing.assert_close(s, torch.ones_like(s), atol=1e-6, rtol=0)
    zero_(model.cls)
    p = torch.softmax(model.cls_logits(model(ids, pad)), -1)
    assert torch.equal(p, torch.full_like(p, 0.5))


def test_mlm_loss_uniform_and_perfect():
    vocab = (5, 7, 4, 9, 6, 3)
    B, L = 2, 4
    targets = torch.stack([torch.randint(0, v, (B, L)) for v in vocab], -1)
    mask = torch.zeros(B, L, dtype=torch.bool)
    mask[0, 1] = mask[1, 3] = True
    uniform = [torch.zeros(B, L, v, dtype=torch.float64) for v in vocab]
    assert mlm_loss(uniform, targets, mask).item() == pytest.approx(sum(math.log(v) for v in vocab), rel=1e-12)
    perfect = [torch.nn.functional.one_hot(targets[..., f], v).double() * 100 for f, v in enumerate(vocab)]
    assert mlm_loss(perfect, targets, mask).item() < 1e-30
    # mean semantics: duplicating the batch changes nothing
    logits = [torch.randn(B, L, v, dtype=torch.float64) for v in vocab]
    doubled = [torch.cat([lg, lg]) for lg in logits]
    assert mlm_loss(doubled, torch.cat([targets, targets]), torch.cat([mask, mask])).item() == pytest.approx(
        mlm_loss(logits, targets, mask).item(), rel=1e-12
    )
    # unselected positions contribute nothing
    logits2 = [lg.clone() for lg in logits]
    logits2[0][0, 0] += 50
    assert mlm_loss(logits2, targets, mask) == mlm_loss(logits, targets, mask)


def test_mlm_loss_needs_selection():
    with pytest.raises(NoMaskedPositions):
        mlm_loss([torch.zeros(1, 2, 4)] * 6, torch.zeros(1, 2, 6, dtype=torch.long), torch.zeros(1, 2, dtype=torch.bool))


def test_cls_loss_uniform_and_perfect():
    labels = torch.tensor([[0, 1, 1], [1, 0, 0]])
    pad = torch.tensor([[1, 1, 1], [1, 1, 0]], dtype=torch.bool)
    assert cls_loss(torch.zeros(2, 3, 2, dtype=torch.float64), labels, pad).item() == pytest.approx(math.log(2), rel=1e-12)
    perfect = torch.nn.functional.one_hot(labels, 2).double() * 100
    assert cls_loss(perfect, labels, pad).item() < 1e-30


def test_unused_embedding_rows_get_zero_grad(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0))
    ids, pad = batch_for(tiny_config, pad_tail=0)
    ids[..., 0] = 3  # feature 0 uses only id 3
    h = model(ids, pad)
    backward(cls_loss(model.cls_logits(h), torch.zeros(pad.shape, dtype=torch.long), pad), model, max_norm=None)
    grad = model.embeddings[0].weight.grad
    assert grad[3].abs().sum() > 0
    assert (grad[torch.arange(grad.shape[0]) != 3] == 0).all()


def test_gradient_clipping(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0))
    ids, pad = batch_for(tiny_config)
    h = model(ids, pad)
    loss = cls_loss(model.cls_logits(h), torch.ones(pad.shape, dtype=torch.long), pad) * 1e4
    norm = backward(loss, model, max_norm=1.0)
    assert norm > 1.0
    clipped = math.sqrt(sum(float((p.grad.double() ** 2).sum()) for p in model.parameters()))
    assert clipped == pytest.approx(1.0, rel=1e-4)


def test_non_finite_gradient_names_tensor(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0))
    ids, pad = batch_for(tiny_config)
    h = model(ids, pad)
    loss = (model.cls_logits(h) * model.cls.bias.sum() * float("inf")).sum()
    with pytest.raises(NonFiniteGradient) as info:
        backward(loss, model)
    assert info.value.tensor_name


def adam_oracle(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


@pytest.mark.parametrize("g", [0.5, -3.0, 1e-3])
def test_adam_matches_recurrence(g):
    w = torch.tensor([2.0], dtype=torch.float64)
    state = AdamState()
    lr = 1e-2
    parameter_update({"w": w}, {"w": torch.tensor([g], dtype=torch.float64)}, state, lr)
    # first step: bias-corrected ratio is sign(g) * |g| / (|g| + eps), i.e. about lr
    assert w.item() == pytest.approx(adam_oracle(2.0, [g], lr), abs=1e-15)
    assert abs(2.0 - w.item()) == pytest.approx(lr, rel=1e-4)
    for _ in range(4):
        parameter_update({"w": w}, {"w": torch.tensor([g], dtype=torch.float64)}, state, lr)
    assert w.item() == pytest.approx(adam_oracle(2.0, [g] * 5, lr), abs=1e-14)
    assert state.step == 5


@settings(max_examples=8, deadline=None)
@given(
    embed_dim=st.sampled_from([2, 4, 6]),
    heads=st.sampled_from([1, 2, 3, 6]),
    layers=st.integers(0, 2),
    L=st.integers(1, 5),
    B=st.integers(1, 3),
)
def test_shapes_property(embed_dim, heads, layers, L, B):
    config = ModelConfig((4, 5, 6, 4, 5, 6), embed_dim, layers, heads, 8, 8, 0.0)
    model = FlowEncoder(config, torch.Generator().manual_seed(0)).eval()
    ids = torch.stack([torch.randint(0, v, (B, L)) for v in config.vocab_sizes], -1)
    pad = torch.ones(B, L, dtype=torch.bool)
    h = model(ids, pad)
    assert h.shape == (B, L, 6 * embed_dim)
    assert all(lg.shape == (B, L, v) for lg, v in zip(model.mlm_logits(h), config.vocab_sizes))
    assert model.cls_logits(h).shape == (B, L, 2)
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_init_convention(tiny_config):
    model = FlowEncoder(tiny_config, torch.Generator().manual_seed(0))
    assert (model.cls.bias == 0).all()
    assert (model.final_norm.weight == 1).all()
    w = model.layers[0].attn.q.weight
    assert w.abs().max() <= 0.04 + 1e-7
    assert 0.01 < w.std().item() < 0.03
