"""Central finite-difference oracle for the analytic gradients."""

import numpy as np
import torch

from flowlm.model import FlowEncoder, ModelConfig, cls_loss, mlm_loss

STEP = 1e-5
# relative error = |analytic - numeric| / max(|analytic|, |numeric|, FLOOR)
FLOOR = 1e-4

GRADCHECK_CONFIG = ModelConfig(
    vocab_sizes=(7, 6, 5, 8, 6, 5),
    embed_dim=4,
    num_layers=1,
    num_heads=2,
    ff_dim=16,
    max_len=4,
    dropout=0.0,
    precision="float64",
)


def gradcheck_problem(seed, config=GRADCHECK_CONFIG, scale=0.3):
    """Model with O(1) weights plus a fixed batch with one padded position."""
    g = torch.Generator().manual_seed(seed)
    model = FlowEncoder(config, g)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    rng = np.random.default_rng(seed)
    L = config.max_len
    ids = torch.tensor(np.stack([rng.integers(0, v, size=(2, L)) for v in config.vocab_sizes], -1))
    pad = torch.ones(2, L, dtype=torch.bool)
    pad[1, -1] = False
    mlm_mask = torch.zeros(2, L, dtype=torch.bool)
    mlm_mask[0, 0] = mlm_mask[0, 2] = mlm_mask[1, 1] = True
    labels = torch.tensor(rng.integers(0, 2, size=(2, L)))
    model.eval()

    def losses():
        h = model(ids, pad)
        return torch.stack([mlm_loss(model.mlm_logits(h), ids, mlm_mask), cls_loss(model.cls_logits(h), labels, pad)])

    return model, losses


def max_relative_errors(seed):
    """Worst relative error over every parameter entry, for (mlm_loss, cls_loss)."""
    model, losses = gradcheck_problem(seed)
    analytic = []
    for k in range(2):
        model.zero_grad()
        losses()[k].backward()
        analytic.append({n: p.grad.clone() for n, p in model.named_parameters()})
    worst = [0.0, 0.0]
    count = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + STEP
                plus = losses()
                flat[i] = old - STEP
                minus = losses()
                flat[i] = old
                numeric = (plus - minus) / (2 * STEP)
                for k in range(2):
                    a = analytic[k][name].view(-1)[i].item()
                    n = numeric[k].item()
                    err = abs(a - n) / max(abs(a), abs(n), FLOOR)
                    worst[k] = max(worst[k], err)
                count += 1
    return worst, count
