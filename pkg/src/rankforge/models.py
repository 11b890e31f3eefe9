"""The ranking model family: mean-pool+DCN+MoE, per-slot transformers, and
the unified-sequence transformer with additive slot-type / temporal /
positional encodings and optional attention pooling.

All modes share one hashed-token embedding table and end in J independent
affine+sigmoid heads.  Padding is handled so that appending pad tokens can
never change an output: pad embeddings are zeroed, pad keys get a -1e9
attention bias, and pooling divides by live-token counts only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_MASK, Tensor
from .features import DataDims, PackedDay
from .modelcfg import SequenceMode, VariantConfig
from .params import ParamStore

FFN_MULT = 2


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


@dataclass
class Batch:
    token_ids: np.ndarray    # (B, S, L)
    time_buckets: np.ndarray  # (B, S, L)
    mask: np.ndarray         # (B, S, L)
    dense: np.ndarray        # (B, D)

    @classmethod
    def from_packed(cls, packed: PackedDay, rows=None) -> "Batch":
        if rows is None:
            rows = slice(None)
        return cls(token_ids=packed.token_ids[rows],
                   time_buckets=packed.time_buckets[rows],
                   mask=packed.mask[rows], dense=packed.dense[rows])


class RankingModel:
    def __init__(self, config: VariantConfig, dims: DataDims, seed: int):
        self.config = config
        self.dims = dims
        self.seed = seed
        self.params = ParamStore(seed)
        self._build()
        self.param_count = self.params.param_count()

    # -- construction ------------------------------------------------------

    def _build(self):
        cfg, dims, ps = self.config, self.dims, self.params
        d = cfg.embed_dim
        ps.weight("embed.token", (dims.vocab_size, d), fan_in=d)

        if cfg.sequence_mode == SequenceMode.MEAN_POOL:
            f = dims.num_slots * d + dims.dense_dim
            for i in range(cfg.dcn_cross_layers):
                ps.weight(f"cross.{i}.w", (f, f), fan_in=f)
                ps.zeros(f"cross.{i}.b", (f,))
            ps.weight("moe.gate.w", (f, cfg.moe_experts), fan_in=f)
            ps.zeros("moe.gate.b", (cfg.moe_experts,))
            hidden = 2 * d
            for e in range(cfg.moe_experts):
                ps.weight(f"moe.expert.{e}.w1", (f, hidden), fan_in=f)
                ps.zeros(f"moe.expert.{e}.b1", (hidden,))
                ps.weight(f"moe.expert.{e}.w2", (hidden, d), fan_in=hidden)
                ps.zeros(f"moe.expert.{e}.b2", (d,))
            head_in = d
        else:
            ps.weight("dense.proj.w", (dims.dense_dim, d), fan_in=dims.dense_dim)
            ps.zeros("dense.proj.b", (d,))
            if cfg.slot_type_embeddings:
                ps.weight("embed.slot_type", (dims.num_slots, d), fan_in=d)
            if cfg.temporal_embeddings:
                ps.weight("embed.temporal", (dims.num_time_buckets, d), fan_in=d)

            if cfg.sequence_mode == SequenceMode.SEPARATE_PER_SLOT:
                for k in range(dims.num_slots):
                    self._build_encoder(f"enc.slot{k}")
                    if cfg.attention_pooling:
                        ps.weight(f"enc.slot{k}.pool.q", (d,), fan_in=d)
                head_in = dims.num_slots * d
            else:
                self._build_encoder("enc")
                if cfg.attention_pooling:
                    ps.weight("enc.pool.q", (d,), fan_in=d)
                head_in = d

        ps.weight("heads.w", (head_in, dims.num_signals), fan_in=head_in)
        ps.zeros("heads.b", (dims.num_signals,))

    def _build_encoder(self, prefix: str):
        cfg, ps = self.config, self.params
        d = cfg.embed_dim
        h = FFN_MULT * d
        for l in range(cfg.num_layers):
            p = f"{prefix}.layer{l}"
            for name in ("wq", "wk", "wv", "wo"):
                ps.weight(f"{p}.attn.{name}", (d, d), fan_in=d)
            ps.zeros(f"{p}.attn.bo", (d,))
            ps.weight(f"{p}.ffn.w1", (d, h), fan_in=d)
            ps.zeros(f"{p}.ffn.b1", (h,))
            ps.weight(f"{p}.ffn.w2", (h, d), fan_in=h)
            ps.zeros(f"{p}.ffn.b2", (d,))
            ps.ones(f"{p}.ln1.g", (d,))
            ps.zeros(f"{p}.ln1.b", (d,))
            ps.ones(f"{p}.ln2.g", (d,))
            ps.zeros(f"{p}.ln2.b", (d,))

    # -- forward -----------------------------------------------------------

    def forward(self, batch: Batch) -> Tensor:
        """Predicted probabilities, shape (B, J), all strictly in (0, 1)."""
        self._check_batch(batch)
        cfg = self.config
        if cfg.sequence_mode == SequenceMode.MEAN_POOL:
            pooled = self._forward_mean_pool(batch)
        elif cfg.sequence_mode == SequenceMode.SEPARATE_PER_SLOT:
            pooled = self._forward_separate(batch)
        else:
            pooled = self._forward_unified(batch)
        ps = self.params
        logits = ad.add(ad.matmul(pooled, ps["heads.w"]), ps["heads.b"])
        out = ad.sigmoid(logits)
        if not np.all(np.isfinite(out.values)):
            raise FloatingPointError("non-finite activation in forward pass")
        return out

    def _check_batch(self, batch: Batch):
        dims = self.dims
        b, s, l = batch.token_ids.shape
        if s != dims.num_slots or l != dims.max_seq_len:
            raise ValueError(
                f"batch sequences ({s}, {l}) do not match model dims "
                f"({dims.num_slots}, {dims.max_seq_len})")
        if batch.dense.shape != (b, dims.dense_dim):
            raise ValueError(
                f"batch dense {batch.dense.shape} != ({b}, {dims.dense_dim})")

    def _forward_mean_pool(self, batch: Batch) -> Tensor:
        ps = self.params
        cfg = self.config
        emb = ad.gather(ps["embed.token"], batch.token_ids)      # (B,S,L,d)
        emb = ad.mul(emb, Tensor(batch.mask[..., None]))
        summed = ad.sum_axis(emb, 2)                             # (B,S,d)
        counts = np.maximum(batch.mask.sum(axis=2), 1.0)
        means = ad.mul(summed, Tensor(1.0 / counts[..., None]))
        b = batch.token_ids.shape[0]
        flat = ad.reshape(means, (b, -1))
        x0 = ad.concat([flat, Tensor(batch.dense)], axis=1)      # (B,F)

        x = x0
        for i in range(cfg.dcn_cross_layers):
            lin = ad.add(ad.matmul(x, ps[f"cross.{i}.w"]), ps[f"cross.{i}.b"])
            x = ad.add(ad.mul(x0, lin), x)

        gate = ad.softmax(ad.add(ad.matmul(x, ps["moe.gate.w"]), ps["moe.gate.b"]))
        outs = []
        for e in range(cfg.moe_experts):
            h = ad.gelu(ad.add(ad.matmul(x, ps[f"moe.expert.{e}.w1"]),
                               ps[f"moe.expert.{e}.b1"]))
            o = ad.add(ad.matmul(h, ps[f"moe.expert.{e}.w2"]), ps[f"moe.expert.{e}.b2"])
            outs.append(ad.reshape(o, (b, 1, cfg.embed_dim)))
        stacked = ad.concat(outs, axis=1)                        # (B,E,d)
        weighted = ad.mul(stacked, ad.reshape(gate, (b, cfg.moe_experts, 1)))
        return ad.sum_axis(weighted, 1)                          # (B,d)

    def _token_embeddings(self, ids, buckets, mask, slot_ids, use_positional) -> Tensor:
        """Shared additive embedding assembly for transformer modes.

        ids/buckets/mask: (B, T); slot_ids: (T,) constant slot index per
        position.  Pad positions end up exactly zero.
        """
        ps, cfg = self.params, self.config
        x = ad.gather(ps["embed.token"], ids)
        if cfg.slot_type_embeddings:
            x = ad.add(x, ad.gather(ps["embed.slot_type"], slot_ids))
        if cfg.temporal_embeddings:
            x = ad.add(x, ad.gather(ps["embed.temporal"], buckets))
        if use_positional:
            pe = sinusoidal_encoding(ids.shape[1], cfg.embed_dim)
            x = ad.add(x, Tensor(pe))
        return ad.mul(x, Tensor(mask[..., None]))

    def _encode(self, x: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        """Pre-LN transformer stack over (B, T, d) with padded keys masked."""
        ps, cfg = self.params, self.config
        d = cfg.embed_dim
        nh = cfg.num_heads
        dk = d // nh
        b, t = mask.shape
        key_bias = Tensor(np.where(mask > 0, 0.0, NEG_MASK)[:, None, None, :])

        for l in range(cfg.num_layers):
            p = f"{prefix}.layer{l}"
            h = ad.add(ad.mul(ad.layer_norm(x), ps[f"{p}.ln1.g"]), ps[f"{p}.ln1.b"])

            def split_heads(m):
                return ad.transpose(ad.reshape(m, (b, t, nh, dk)), (0, 2, 1, 3))

            q = split_heads(ad.matmul(h, ps[f"{p}.attn.wq"]))
            k = split_heads(ad.matmul(h, ps[f"{p}.attn.wk"]))
            v = split_heads(ad.matmul(h, ps[f"{p}.attn.wv"]))
            att = ad.attention(q, k, v, key_bias)                # (B,H,T,dk)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, t, d))
            att = ad.add(ad.matmul(att, ps[f"{p}.attn.wo"]), ps[f"{p}.attn.bo"])
            x = ad.add(x, att)

            h2 = ad.add(ad.mul(ad.layer_norm(x), ps[f"{p}.ln2.g"]), ps[f"{p}.ln2.b"])
            ff = ad.gelu(ad.add(ad.matmul(h2, ps[f"{p}.ffn.w1"]), ps[f"{p}.ffn.b1"]))
            ff = ad.add(ad.matmul(ff, ps[f"{p}.ffn.w2"]), ps[f"{p}.ffn.b2"])
            x = ad.add(x, ff)
        return x

    def _pool(self, x: Tensor, mask: np.ndarray, prefix: str) -> Tensor:
        """Masked mean, or learned-query attention pooling when toggled."""
        ps, cfg = self.params, self.config
        if cfg.attention_pooling:
            q = ps[f"{prefix}.pool.q"]
            scores = ad.mul(ad.matmul(x, ad.reshape(q, (cfg.embed_dim, 1))),
                            Tensor(1.0 / np.sqrt(cfg.embed_dim)))   # (B,T,1)
            b, t = mask.shape
            scores = ad.add(ad.reshape(scores, (b, t)),
                            Tensor(np.where(mask > 0, 0.0, NEG_MASK)))
            w = ad.softmax(scores)
            return ad.sum_axis(ad.mul(x, ad.reshape(w, (b, t, 1))), 1)
        masked = ad.mul(x, Tensor(mask[..., None]))
        counts = np.maximum(mask.sum(axis=1), 1.0)
        return ad.mul(ad.sum_axis(masked, 1), Tensor(1.0 / counts[:, None]))

    def _forward_separate(self, batch: Batch) -> Tensor:
        ps, cfg, dims = self.params, self.config, self.dims
        b = batch.token_ids.shape[0]
        dense_tok = ad.add(ad.matmul(Tensor(batch.dense), ps["dense.proj.w"]),
                           ps["dense.proj.b"])                    # (B,d)
        dense_row = ad.reshape(dense_tok, (b, 1, cfg.embed_dim))
        summaries = []
        for k in range(dims.num_slots):
            ids = batch.token_ids[:, k, :]
            mask = batch.mask[:, k, :]
            slot_ids = np.full(dims.max_seq_len, k)
            x = self._token_embeddings(ids, batch.time_buckets[:, k, :], mask,
                                       slot_ids, cfg.positional_encoding)
            # dense context injected at every live position
            x = ad.add(x, ad.mul(dense_row, Tensor(mask[..., None])))
            x = self._encode(x, mask, f"enc.slot{k}")
            summaries.append(self._pool(x, mask, f"enc.slot{k}"))
        return ad.concat(summaries, axis=1)                      # (B,S*d)

    def _forward_unified(self, batch: Batch) -> Tensor:
        ps, cfg, dims = self.params, self.config, self.dims
        b = batch.token_ids.shape[0]
        sl = dims.num_slots * dims.max_seq_len
        ids = batch.token_ids.reshape(b, sl)        # slot k at [k*L, (k+1)*L)
        buckets = batch.time_buckets.reshape(b, sl)
        mask = batch.mask.reshape(b, sl)
        slot_ids = np.repeat(np.arange(dims.num_slots), dims.max_seq_len)
        x = self._token_embeddings(ids, buckets, mask, slot_ids,
                                   cfg.positional_encoding)
        # projected dense context appended as one always-live token
        dense_tok = ad.add(ad.matmul(Tensor(batch.dense), ps["dense.proj.w"]),
                           ps["dense.proj.b"])
        x = ad.concat([x, ad.reshape(dense_tok, (b, 1, cfg.embed_dim))], axis=1)
        full_mask = np.concatenate([mask, np.ones((b, 1))], axis=1)
        x = self._encode(x, full_mask, "enc")
        return self._pool(x, full_mask, "enc")

    # -- inference helpers ---------------------------------------------------

    def predict_packed(self, packed: PackedDay, batch_size: int = 256) -> np.ndarray:
        """Untaped forward over a whole day, in batches."""
        out = np.empty((len(packed), self.dims.num_signals))
        with ad.no_grad():
            for start in range(0, len(packed), batch_size):
                rows = slice(start, min(start + batch_size, len(packed)))
                out[rows] = self.forward(Batch.from_packed(packed, rows)).values
        return out


def build_model(config: VariantConfig, dims: DataDims, seed: int) -> RankingModel:
    return RankingModel(config, dims, seed)


def relevance_score(predictions: np.ndarray, weights: np.ndarray) -> float:
    """Weighted linear blend of predicted probabilities."""
    predictions = np.asarray(predictions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if predictions.shape != weights.shape:
        raise ValueError(f"shapes {predictions.shape} vs {weights.shape}")
    if np.any(weights < 0) or not np.any(weights > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    return float(predictions @ weights)


@dataclass(frozen=True)
class BudgetCheck:
    passed: bool
    candidate_count: int
    baseline_count: int
    factor: float

    def describe(self) -> str:
        verdict = "within" if self.passed else "exceeds"
        return (f"candidate {self.candidate_count} params {verdict} "
                f"{self.factor}x baseline ({self.baseline_count})")


def param_budget_check(candidate: RankingModel, baseline: RankingModel,
                       factor: float = 1.5) -> BudgetCheck:
    """Guards against silent model-size growth between lineage steps."""
    if factor <= 1.0:
        raise ValueError("factor must exceed 1")
    limit = factor * baseline.param_count
    return BudgetCheck(passed=candidate.param_count <= limit,
                       candidate_count=candidate.param_count,
                       baseline_count=baseline.param_count,
                       factor=factor)
