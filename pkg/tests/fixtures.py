"""Shared fixtures for gradient checks of the full model.

Finite differences are only meaningful on smooth neighborhoods, so the
randomized fixture keeps bilinear sample coordinates away from the integer
lattice: deformable offsets get half-integer-ish biases plus a tiny random
kernel, which leaves every coordinate's fractional part near 0.5.
"""

import numpy as np

from angioqa import autograd as ag
from angioqa.fusion import ModelConfig, init_must_params, must_forward
from angioqa.heads import init_head_params, level_logits


def randomized_must_fixture(config: ModelConfig, seed: int):
    """Random params + images + scalar loss closure for grad checking."""
    rng = np.random.default_rng(seed)
    params = init_must_params(config, rng)
    heads = init_head_params(config.dim, rng)

    # offsets: sub-cell half-integer biases, tiny kernel jitter
    d = config.dim
    params.dconv.offset_kernel.data = rng.normal(0.0, 0.002, (18, d, 3, 3))
    signs = rng.choice([-1.0, 1.0], size=(18, 1, 1))
    params.dconv.offset_bias.data = signs * rng.uniform(0.3, 0.7, (18, 1, 1))
    # give the zero-initialized attention biases a little structure too
    for attn in (params.encoder.attn, params.branches.vmc_attn):
        for name in ("bq", "bk", "bv"):
            getattr(attn, name).data = rng.normal(0.0, 0.05, (1, d))

    images = [rng.uniform(0.0, 1.0, (config.image_size, config.image_size))
              for _ in range(3)]
    targets = [int(rng.integers(5)) for _ in range(3)]

    def loss_fn():
        out = must_forward(images[0], images[1], images[2], params)
        loss = ag.cross_entropy(level_logits(out.f_vmc, heads.vmc), targets[0])
        loss = ag.add(loss, ag.cross_entropy(level_logits(out.f_vbd, heads.vbd),
                                             targets[1]))
        return ag.add(loss, ag.cross_entropy(level_logits(out.f_oq, heads.oq),
                                             targets[2]))

    named = params.named_parameters()
    named.update(heads.named_parameters())
    return params, heads, images, named, loss_fn
