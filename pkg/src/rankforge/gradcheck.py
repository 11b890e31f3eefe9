"""Finite-difference verification of tape gradients, plus the built-in
check suite the CLI exposes (primitive sweep and full tiny-model checks)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor],
               step: float = 1e-5) -> float:
    """Max relative discrepancy between tape gradients and central differences.

    ``fn`` evaluates the scalar function at the current parameter values;
    it is re-invoked (untaped) for every perturbed coordinate.  Relative
    discrepancy uses a unit floor: |a - b| / max(|a|, |b|, 1).
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    tape_grads = [np.zeros_like(p.values) if p.grad is None else p.grad.copy()
                  for p in params]

    worst = 0.0
    with no_grad():
        for p, tg in zip(params, tape_grads):
            flat = p.values.reshape(-1)
            gflat = tg.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                a, b = gflat[i], fd
                rel = abs(a - b) / max(abs(a), abs(b), 1.0)
                if rel > worst:
                    worst = rel
    for p in params:
        p.grad = None
    return worst


def primitive_sweep(num_seeds: int = 100, step: float = 1e-5) -> float:
    """Composite touching every primitive family over randomized small shapes."""
    from . import autodiff as ad
    worst = 0.0
    for seed in range(num_seeds):
        rng = np.random.default_rng(seed)
        n, m, k = (int(rng.integers(2, 5)) for _ in range(3))
        a = Tensor(rng.normal(size=(n, m)), requires_grad=True)
        b = Tensor(rng.normal(size=(m, k)), requires_grad=True)
        c = Tensor(rng.normal(size=(n, k)), requires_grad=True)
        q = Tensor(rng.normal(size=(k, m)), requires_grad=True)
        idx = rng.integers(0, n, size=(3,))
        mask_arr = np.where(rng.random((n, k)) < 0.2, ad.NEG_MASK, 0.0)
        mask_arr[:, 0] = 0.0  # like real usage: every row keeps a live key
        mask = Tensor(mask_arr)

        def fn():
            h = ad.add(ad.matmul(a, b), c)
            h = ad.gelu(ad.layer_norm(h))
            h = ad.mul(h, ad.sigmoid(c))
            att = ad.attention(ad.matmul(h, q), ad.matmul(h, q),
                               ad.matmul(h, q), mask_bias=None)
            s = ad.softmax(ad.add(ad.matmul(att, ad.transpose(q, (1, 0))), mask))
            piece = ad.narrow(s, 1, 0, max(1, k - 1))
            cat = ad.concat([piece, s], axis=1)
            rows = ad.gather(cat, idx)
            return ad.sum_all(ad.log(ad.add(ad.mean_axis(ad.mul(rows, rows), 0),
                                            Tensor(1.0))))

        worst = max(worst, grad_check(fn, [a, b, c, q], step=step))
    return worst


def model_check(mode: str, step: float = 1e-5, seed: int = 0) -> float:
    """Full forward+loss gradient check at tiny dims for one sequence mode."""
    from .dataset import GeneratedSource
    from .generator import GeneratorSpec
    from .modelcfg import SequenceMode, VariantConfig
    from .models import Batch, build_model
    from .training import multitask_loss

    spec = GeneratorSpec(days=1, examples_per_day=4, dense_dim=8, num_topics=2,
                         num_brands=2, vocab_size=23, num_items=8,
                         max_seq_len=4, min_seq_len=1, num_slots=2,
                         slot_weights=(1.0, -0.8), slot_match_rates=(0.4, 0.4),
                         slot_distractor_rates=(0.2, 0.2), num_time_buckets=6,
                         max_delta_pow=4.0)
    packed = GeneratedSource(spec, seed).day(1)
    batch = Batch.from_packed(packed)
    labels = packed.labels
    toggles = {}
    if mode == "unified":
        config = VariantConfig("tiny-v3", SequenceMode.UNIFIED, embed_dim=8,
                               num_heads=2, num_layers=1,
                               slot_type_embeddings=True, temporal_embeddings=True)
    else:
        config = VariantConfig("tiny-v2", SequenceMode.SEPARATE_PER_SLOT,
                               embed_dim=8, num_heads=2, num_layers=1,
                               positional_encoding=True, attention_pooling=True)
    model = build_model(config, spec.dims(), seed)

    def fn():
        return multitask_loss(model.forward(batch), labels)

    return grad_check(fn, model.params.tensors(), step=step)
