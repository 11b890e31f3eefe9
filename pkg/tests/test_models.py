import numpy as np
import pytest

from rankforge import autodiff as ad
from rankforge.autodiff import backward
from rankforge.features import DataDims
from rankforge.modelcfg import (InvalidConfig, SequenceMode, VariantConfig,
                                preset_variant)
from rankforge.models import (Batch, BudgetCheck, FFN_MULT, build_model,
                              param_budget_check, relevance_score)

DIMS = DataDims(dense_dim=8, num_slots=3, max_seq_len=5, num_signals=10,
                vocab_size=50, num_time_buckets=12)


def tiny(tag="T", mode=SequenceMode.UNIFIED, **kw):
    kw.setdefault("embed_dim", 8)
    kw.setdefault("num_heads", 2)
    kw.setdefault("num_layers", 1)
    return VariantConfig(version_tag=tag, sequence_mode=mode, **kw)


def random_batch(rng, b=3, all_pad=False, dims=DIMS):
    S, L = dims.num_slots, dims.max_seq_len
    if all_pad:
        mask = np.zeros((b, S, L))
    else:
        lengths = rng.integers(1, L + 1, size=(b, S))
        mask = (np.arange(L)[None, None, :] < lengths[:, :, None]).astype(float)
    ids = np.where(mask > 0, rng.integers(1, dims.vocab_size, size=(b, S, L)), 0)
    buckets = np.where(mask > 0, rng.integers(0, dims.num_time_buckets, size=(b, S, L)), 0)
    dense = np.zeros((b, dims.dense_dim)) if all_pad else rng.normal(size=(b, dims.dense_dim))
    return Batch(token_ids=ids.astype(np.int64), time_buckets=buckets.astype(np.int64),
                 mask=mask, dense=dense)


# -- symbolic parameter-count calculator (oracle written against the contract)

def expected_param_count(cfg: VariantConfig, dims: DataDims) -> int:
    d = cfg.embed_dim
    total = dims.vocab_size * d  # shared token table
    if cfg.sequence_mode == SequenceMode.MEAN_POOL:
        f = dims.num_slots * d + dims.dense_dim
        total += cfg.dcn_cross_layers * (f * f + f)
        total += f * cfg.moe_experts + cfg.moe_experts
        hidden = 2 * d
        total += cfg.moe_experts * (f * hidden + hidden + hidden * d + d)
        head_in = d
    else:
        total += dims.dense_dim * d + d  # dense projection
        if cfg.slot_type_embeddings:
            total += dims.num_slots * d
        if cfg.temporal_embeddings:
            total += dims.num_time_buckets * d
        layer = (4 * d * d + d                      # qkvo + output bias
                 + d * FFN_MULT * d + FFN_MULT * d  # ffn in
                 + FFN_MULT * d * d + d             # ffn out
                 + 4 * d)                           # two affine layer norms
        stacks = dims.num_slots if cfg.sequence_mode == SequenceMode.SEPARATE_PER_SLOT else 1
        total += stacks * cfg.num_layers * layer
        if cfg.attention_pooling:
            total += stacks * d
        head_in = d * (dims.num_slots if cfg.sequence_mode == SequenceMode.SEPARATE_PER_SLOT else 1)
    total += head_in * dims.num_signals + dims.num_signals
    return total


class TestConfigValidation:
    def test_mean_pool_forbids_toggles(self):
        with pytest.raises(InvalidConfig, match="MeanPool"):
            VariantConfig("x", SequenceMode.MEAN_POOL, temporal_embeddings=True)

    def test_embed_dim_head_divisibility(self):
        with pytest.raises(InvalidConfig, match="divisible"):
            tiny(embed_dim=9, num_heads=2)

    def test_positive_dims(self):
        with pytest.raises(InvalidConfig, match="num_layers"):
            tiny(num_layers=0)

    def test_kv_round_trip(self):
        cfg = preset_variant("V3.4", embed_dim=24, num_heads=3)
        assert VariantConfig.from_kv(cfg.to_kv()) == cfg

    def test_effective_seq_len(self):
        assert preset_variant("V1").effective_seq_len(5, 40) is None
        assert preset_variant("V2").effective_seq_len(5, 40) == 40
        assert preset_variant("V3.1").effective_seq_len(5, 40) == 200

    def test_unknown_preset(self):
        with pytest.raises(InvalidConfig):
            preset_variant("V9")


class TestParamCounts:
    @pytest.mark.parametrize("mode,toggles", [
        (SequenceMode.MEAN_POOL, {}),
        (SequenceMode.SEPARATE_PER_SLOT, {}),
        (SequenceMode.SEPARATE_PER_SLOT, dict(positional_encoding=True, attention_pooling=True)),
        (SequenceMode.UNIFIED, {}),
        (SequenceMode.UNIFIED, dict(slot_type_embeddings=True)),
        (SequenceMode.UNIFIED, dict(slot_type_embeddings=True, temporal_embeddings=True)),
    ])
    def test_matches_symbolic_calculator(self, mode, toggles):
        cfg = tiny(mode=mode, **toggles)
        model = build_model(cfg, DIMS, seed=0)
        assert model.param_count == expected_param_count(cfg, DIMS)

    def test_slot_type_adds_exactly_s_times_d(self):
        base = build_model(tiny(), DIMS, 0)
        with_st = build_model(tiny(slot_type_embeddings=True), DIMS, 0)
        assert with_st.param_count - base.param_count == DIMS.num_slots * 8

    def test_v2_vs_v31_delta_is_encoder_dedup_minus_tables(self):
        v2 = build_model(tiny(mode=SequenceMode.SEPARATE_PER_SLOT), DIMS, 0)
        v31 = build_model(tiny(mode=SequenceMode.UNIFIED), DIMS, 0)
        d = 8
        layer = 4 * d * d + d + d * FFN_MULT * d + FFN_MULT * d + FFN_MULT * d * d + d + 4 * d
        removed_encoders = (DIMS.num_slots - 1) * layer
        removed_head_in = (DIMS.num_slots - 1) * d * DIMS.num_signals
        assert v2.param_count - v31.param_count == removed_encoders + removed_head_in

    def test_same_config_seed_bitwise_identical(self):
        a = build_model(tiny(), DIMS, 7)
        b = build_model(tiny(), DIMS, 7)
        for (pa, ta), (pb, tb) in zip(a.params.items(), b.params.items()):
            assert pa == pb
            assert np.array_equal(ta.values, tb.values)


class TestForward:
    def test_outputs_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for mode in SequenceMode:
            model = build_model(tiny(mode=mode), DIMS, 1)
            out = model.forward(random_batch(rng)).values
            assert out.shape == (3, 10)
            assert np.all((out > 0) & (out < 1))

    @pytest.mark.parametrize("mode", list(SequenceMode))
    def test_all_padding_yields_head_bias(self, mode):
        model = build_model(tiny(mode=mode), DIMS, 3)
        # V3 appends an always-live dense token, so zero dense keeps it inert
        out = model.forward(random_batch(np.random.default_rng(1), all_pad=True, b=2))
        expected = 1.0 / (1.0 + np.exp(-model.params["heads.b"].values))
        assert np.allclose(out.values, expected[None, :], atol=1e-12)

    def test_batch_consistency(self):
        rng = np.random.default_rng(5)
        model = build_model(tiny(mode=SequenceMode.UNIFIED, temporal_embeddings=True), DIMS, 2)
        batch = random_batch(rng, b=3)
        with ad.no_grad():
            together = model.forward(batch).values
            for i in range(3):
                one = Batch(batch.token_ids[i:i + 1], batch.time_buckets[i:i + 1],
                            batch.mask[i:i + 1], batch.dense[i:i + 1])
                single = model.forward(one).values
                assert np.allclose(together[i], single[0], atol=1e-12)

    def test_appending_padding_never_changes_output(self):
        rng = np.random.default_rng(9)
        for mode in SequenceMode:
            model = build_model(tiny(mode=mode), DIMS, 4)
            batch = random_batch(rng)
            # batch already contains pad tails; compare against fully-padded copy
            shorter = Batch(batch.token_ids.copy(), batch.time_buckets.copy(),
                            batch.mask.copy(), batch.dense.copy())
            live = shorter.mask[0, 0] > 0
            n_live = int(live.sum())
            if n_live > 1:
                shorter.mask[0, 0, n_live - 1] = 0.0
                shorter.token_ids[0, 0, n_live - 1] = 0
                shorter.time_buckets[0, 0, n_live - 1] = 0
            longer = Batch(shorter.token_ids.copy(), shorter.time_buckets.copy(),
                           shorter.mask.copy(), shorter.dense.copy())
            with ad.no_grad():
                a = model.forward(shorter).values
                b = model.forward(longer).values
            assert np.allclose(a, b, atol=0)

    def test_dimension_mismatch_rejected(self):
        model = build_model(tiny(), DIMS, 0)
        bad = random_batch(np.random.default_rng(0),
                           dims=DataDims(8, 3, 7, 10, 50, 12))
        with pytest.raises(ValueError, match="do not match"):
            model.forward(bad)


class TestToggleSemantics:
    def test_temporal_off_invariant_to_buckets(self):
        rng = np.random.default_rng(11)
        model = build_model(tiny(mode=SequenceMode.UNIFIED), DIMS, 5)
        batch = random_batch(rng)
        shuffled = Batch(batch.token_ids, rng.integers(0, 12, size=batch.time_buckets.shape),
                         batch.mask, batch.dense)
        with ad.no_grad():
            assert np.array_equal(model.forward(batch).values,
                                  model.forward(shuffled).values)

    def test_temporal_on_sensitive_to_buckets(self):
        rng = np.random.default_rng(12)
        model = build_model(tiny(mode=SequenceMode.UNIFIED, temporal_embeddings=True), DIMS, 5)
        batch = random_batch(rng)
        other = Batch(batch.token_ids, (batch.time_buckets + 1) % 12, batch.mask, batch.dense)
        with ad.no_grad():
            assert not np.allclose(model.forward(batch).values,
                                   model.forward(other).values)

    def test_permutation_behavior_two_token_instance(self):
        dims = DataDims(dense_dim=8, num_slots=1, max_seq_len=2, num_signals=10,
                        vocab_size=50, num_time_buckets=12)
        ids = np.array([[[3, 4]]])
        swapped = np.array([[[4, 3]]])
        mask = np.ones((1, 1, 2))
        dense = np.zeros((1, 8))

        def out(model, tok, buckets):
            with ad.no_grad():
                return model.forward(Batch(tok, buckets, mask, dense)).values

        # temporal+positional on: swapping tokens (and their distinct buckets) changes output
        sensitive = build_model(tiny(mode=SequenceMode.UNIFIED, temporal_embeddings=True,
                                     positional_encoding=True), dims, 6)
        b_distinct = np.array([[[2, 0]]])
        assert not np.allclose(out(sensitive, ids, b_distinct),
                               out(sensitive, swapped, b_distinct[:, :, ::-1]))
        # positional off, identical buckets: permutation leaves output unchanged
        invariant = build_model(tiny(mode=SequenceMode.UNIFIED, slot_type_embeddings=True), dims, 6)
        b_same = np.array([[[1, 1]]])
        assert np.allclose(out(invariant, ids, b_same), out(invariant, swapped, b_same),
                           atol=1e-12)

    def test_gradient_reaches_every_active_parameter(self):
        rng = np.random.default_rng(13)
        for mode, toggles in [(SequenceMode.MEAN_POOL, {}),
                              (SequenceMode.SEPARATE_PER_SLOT, dict(attention_pooling=True)),
                              (SequenceMode.UNIFIED, dict(slot_type_embeddings=True,
                                                          temporal_embeddings=True))]:
            model = build_model(tiny(mode=mode, **toggles), DIMS, 8)
            batch = random_batch(rng, b=4)
            preds = model.forward(batch)
            backward(ad.sum_all(preds))
            for path, tensor in model.params.items():
                assert tensor.grad is not None, path
                assert np.any(tensor.grad != 0.0), path


class TestRelevanceAndBudget:
    def test_one_hot_weights_pick_probability(self):
        preds = np.array([0.3, 0.9, 0.1])
        w = np.array([0.0, 1.0, 0.0])
        assert relevance_score(preds, w) == 0.9

    def test_equal_weights_mean(self):
        preds = np.array([0.2, 0.4, 0.6])
        assert relevance_score(preds, np.ones(3) / 3) == pytest.approx(0.4)

    def test_monotone_in_each_probability(self):
        w = np.array([0.5, 0.25, 0.25])
        base = relevance_score(np.array([0.2, 0.2, 0.2]), w)
        assert relevance_score(np.array([0.3, 0.2, 0.2]), w) > base

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            relevance_score(np.array([0.5]), np.array([0.0]))

    def test_budget_identity_passes(self):
        m = build_model(tiny(), DIMS, 0)
        check = param_budget_check(m, m)
        assert check.passed and check.candidate_count == check.baseline_count

    def test_budget_double_fails_at_1_5(self):
        base = build_model(tiny(), DIMS, 0)
        big = build_model(tiny(embed_dim=32, num_heads=2), DIMS, 0)
        assert big.param_count > 2 * base.param_count
        check = param_budget_check(big, base, factor=1.5)
        assert not check.passed
        assert "exceeds" in check.describe()

    def test_v33_vs_v31_passes_budget(self):
        dims = DataDims(16, 5, 40, 10, 10009, 32)
        v31 = build_model(preset_variant("V3.1"), dims, 0)
        v33 = build_model(preset_variant("V3.3"), dims, 0)
        assert param_budget_check(v33, v31).passed
