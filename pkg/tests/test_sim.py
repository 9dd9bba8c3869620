import numpy as np
import pytest

from miub.aggregate import aggregate
from miub.capture import SITES, validate, write_capture_set, read_capture_set
from miub.joint import QuantizationSpec
from miub.sim import (LENGTH_BINS, TaskDataset, ToySimConfig,
                      apply_layer_sharing, backward, base_checksum,
                      build_model, capture_hidden, dataset_loss,
                      effective_base_params, forward, generate_synthetic_task,
                      loss_from_logits, run_scaling_grid, train_lora)
from miub.sim.task import KEY_LO, N_KEYS, N_VALUES, VALUE_LO

Q8 = QuantizationSpec(bins=8, range_strategy="minmax")

TINY = ToySimConfig(layers=2, d_model=8, n_heads=2, d_ffn=16, rank=2, seed=7,
                    steps=5, train_samples=16, capture_samples=4,
                    batch_size=4)


class TestConfig:
    def test_defaults_satisfy_invariants(self):
        cfg = ToySimConfig()
        assert cfg.d_model % cfg.n_heads == 0
        assert (cfg.layers // 2) % cfg.share_k == 0

    @pytest.mark.parametrize("kwargs", [
        {"layers": 3},
        {"d_model": 30, "n_heads": 4},
        {"share_k": 3},
        {"share_k": 4, "layers": 4},   # 4/2=2 not divisible by 4
        {"rank": 0},
        {"length_bin": "huge"},
        {"steps": -1},
        {"lr": 0.0},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            ToySimConfig(**kwargs)


class TestBuildModel:
    def test_site_enumeration(self):
        m = build_model(ToySimConfig(seed=1))
        assert len(m.base_layers) == 8
        assert set(m.base_layers[0]) == set(SITES)
        n_sites = sum(len(layer) for layer in m.lora_a)
        assert n_sites == 6 * 8

    def test_b_initialized_to_zero_and_a_seeded(self):
        m = build_model(ToySimConfig(seed=3))
        assert all(not layer[s].any() for layer in m.lora_b for s in layer)
        assert all(layer[s].any() for layer in m.lora_a for s in layer)

    def test_same_seed_identical_checksums(self):
        cfg = ToySimConfig(seed=11)
        assert base_checksum(build_model(cfg)) == base_checksum(build_model(cfg))

    def test_different_seed_differs(self):
        assert base_checksum(build_model(ToySimConfig(seed=1))) != \
            base_checksum(build_model(ToySimConfig(seed=2)))

    def test_base_independent_of_rank_and_share(self):
        m1 = build_model(ToySimConfig(seed=5, rank=2, share_k=1))
        m2 = build_model(ToySimConfig(seed=5, rank=16, share_k=4))
        assert base_checksum(m1) == base_checksum(m2)

    def test_base_weights_write_protected(self):
        m = build_model(ToySimConfig(seed=0))
        with pytest.raises(ValueError):
            m.base_layers[0]["attn_q"][0, 0] = 1.0


class TestLayerSharing:
    def test_share1_is_identity(self):
        m = build_model(ToySimConfig(seed=2, share_k=1))
        assert m.share_map == tuple(range(8))

    def test_share2_ties_pairs_in_second_half(self):
        m = apply_layer_sharing(build_model(ToySimConfig(seed=2)), 2)
        assert m.share_map == (0, 1, 2, 3, 4, 4, 6, 6)

    def test_share4_ties_last_four(self):
        m = apply_layer_sharing(build_model(ToySimConfig(seed=2)), 4)
        assert m.share_map == (0, 1, 2, 3, 4, 4, 4, 4)

    def test_effective_params_reduced_by_three_layers(self):
        cfg = ToySimConfig(seed=2, share_k=1)
        m1 = build_model(cfg)
        m4 = apply_layer_sharing(m1, 4)
        per_layer = sum(w.size for w in m1.base_layers[0].values())
        assert effective_base_params(m1) - effective_base_params(m4) == \
            3 * per_layer

    def test_effective_params_strictly_decrease_with_share_k(self):
        ns = [effective_base_params(build_model(ToySimConfig(seed=0, share_k=k)))
              for k in (1, 2, 4)]
        assert ns[0] > ns[1] > ns[2]

    def test_share1_forward_identical_to_unshared(self):
        cfg = ToySimConfig(seed=4)
        m = build_model(cfg)
        shared = apply_layer_sharing(m, 1)
        ds = generate_synthetic_task(4, "short", 4)
        l1, _ = forward(m, ds.inputs)
        l2, _ = forward(shared, ds.inputs)
        assert np.array_equal(l1, l2)

    def test_nondivisible_share_rejected(self):
        m = build_model(ToySimConfig(seed=0, layers=4))
        with pytest.raises(ValueError, match="divide"):
            apply_layer_sharing(m, 4)


class TestTask:
    def test_same_seed_identical(self):
        a = generate_synthetic_task(9, "short", 32)
        b = generate_synthetic_task(9, "short", 32)
        assert np.array_equal(a.tokens, b.tokens)

    def test_streams_differ(self):
        a = generate_synthetic_task(9, "short", 32, stream="train")
        b = generate_synthetic_task(9, "short", 32, stream="eval")
        assert not np.array_equal(a.tokens, b.tokens)

    @pytest.mark.parametrize("bin_name,length", sorted(LENGTH_BINS.items()))
    def test_bin_lengths(self, bin_name, length):
        ds = generate_synthetic_task(0, bin_name, 8)
        assert ds.tokens.shape == (8, length)

    def test_label_occurs_earlier_in_sequence(self):
        ds = generate_synthetic_task(21, "medium", 64)
        for row in ds.tokens:
            assert row[-1] in row[:-1]

    def test_label_follows_every_key_occurrence(self):
        ds = generate_synthetic_task(13, "long", 32)
        for row in ds.tokens:
            key, value = row[-2], row[-1]
            positions = np.flatnonzero(row[:-1] == key)
            assert positions.size >= 2   # at least one evidence pair + query
            for p in positions[:-1]:
                assert row[p + 1] == value

    def test_labels_balanced_within_10_percent(self):
        ds = generate_synthetic_task(3, "short", 160)
        counts = np.bincount(ds.labels, minlength=VALUE_LO + N_VALUES)
        value_counts = counts[VALUE_LO:VALUE_LO + N_VALUES]
        mean = value_counts.mean()
        assert np.all(np.abs(value_counts - mean) <= 0.1 * mean)

    def test_keys_never_appear_as_filler(self):
        ds = generate_synthetic_task(5, "short", 64)
        for row in ds.tokens:
            key = row[-2]
            others = [t for t in range(KEY_LO, KEY_LO + N_KEYS) if t != key]
            assert not np.isin(row, others).any()


class TestTraining:
    def test_zero_steps_final_equals_initial(self):
        cfg = ToySimConfig(**{**TINY.__dict__, "steps": 0})
        m = build_model(cfg)
        ds = generate_synthetic_task(cfg.seed, "short", cfg.train_samples)
        stats = train_lora(m, ds, cfg)
        assert stats.final_loss == stats.initial_loss
        assert stats.per_step_loss == ()

    def test_default_config_reduces_loss(self):
        cfg = ToySimConfig(seed=42, steps=60)
        m = build_model(cfg)
        ds = generate_synthetic_task(42, "short", 128)
        stats = train_lora(m, ds, cfg)
        assert stats.final_loss < stats.initial_loss

    def test_base_checksum_unchanged_by_training(self):
        cfg = ToySimConfig(**{**TINY.__dict__, "steps": 30})
        m = build_model(cfg)
        before = base_checksum(m)
        ds = generate_synthetic_task(cfg.seed, "short", cfg.train_samples)
        train_lora(m, ds, cfg)
        assert base_checksum(m) == before

    def test_training_is_deterministic(self):
        cfg = ToySimConfig(**{**TINY.__dict__, "steps": 20})
        losses = []
        for _ in range(2):
            m = build_model(cfg)
            ds = generate_synthetic_task(cfg.seed, "short", cfg.train_samples)
            stats = train_lora(m, ds, cfg)
            losses.append(stats.per_step_loss)
        assert losses[0] == losses[1]

    def test_divergence_aborts_naming_step(self):
        m = build_model(TINY)
        m.lora_b[0]["attn_q"][:] = np.inf
        ds = generate_synthetic_task(TINY.seed, "short", TINY.train_samples)
        with pytest.raises(FloatingPointError, match="step 0"):
            train_lora(m, ds, TINY)

    def test_param_counts(self):
        m = build_model(TINY)
        ds = generate_synthetic_task(TINY.seed, "short", TINY.train_samples)
        stats = train_lora(m, ds, TINY)
        assert stats.effective_n_params == effective_base_params(m)
        d, f, r = TINY.d_model, TINY.d_ffn, TINY.rank
        per_layer = 4 * (d * r + r * d) + (d * r + r * f) + (f * r + r * d)
        assert stats.lora_param_count == TINY.layers * per_layer


class TestGradients:
    def test_lora_gradients_match_central_differences(self):
        cfg = ToySimConfig(layers=2, d_model=8, n_heads=2, d_ffn=16, rank=2,
                           seed=7)
        m = build_model(cfg)
        rng = np.random.default_rng(0)
        for layer in range(cfg.layers):
            for site in SITES:
                m.lora_b[layer][site] = rng.normal(
                    0.0, 0.05, size=m.lora_b[layer][site].shape)
        ds = generate_synthetic_task(7, "short", 4)

        def loss_value():
            logits, _ = forward(m, ds.inputs)
            return loss_from_logits(logits, ds.labels)[0]

        logits, cache = forward(m, ds.inputs, need_cache=True)
        _, dlogits = loss_from_logits(logits, ds.labels)
        ga, gb = backward(m, cache, dlogits)

        h = 1e-5
        for _ in range(20):
            layer = int(rng.integers(cfg.layers))
            site = SITES[int(rng.integers(len(SITES)))]
            use_a = rng.random() < 0.5
            mat = (m.lora_a if use_a else m.lora_b)[layer][site]
            grad = (ga if use_a else gb)[layer][site]
            i = int(rng.integers(mat.shape[0]))
            j = int(rng.integers(mat.shape[1]))
            original = mat[i, j]
            mat[i, j] = original + h
            up = loss_value()
            mat[i, j] = original - h
            down = loss_value()
            mat[i, j] = original
            fd = (up - down) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestCapture:
    def test_untrained_model_has_identical_pairs(self):
        m = build_model(TINY)
        ds = generate_synthetic_task(TINY.seed, "short", 4, stream="eval")
        cs = capture_hidden(m, ds, 4)
        for cap in cs.captures:
            assert np.array_equal(cap.h_base, cap.h_adapted)

    def test_capture_count(self):
        m = build_model(TINY)
        ds = generate_synthetic_task(TINY.seed, "short", 4, stream="eval")
        cs = capture_hidden(m, ds, 4)
        assert len(cs.captures) == 4 * 6 * TINY.layers
        assert validate(cs) == []

    def test_meta_fields(self):
        m = build_model(TINY)
        ds = generate_synthetic_task(TINY.seed, "short", 4, stream="eval")
        cs = capture_hidden(m, ds, 4)
        assert cs.meta["n_params"] == effective_base_params(m)
        assert cs.meta["lora_rank"] == TINY.rank
        assert cs.meta["dataset_size"] == float(ds.seq_len)
        assert cs.meta["share_k"] == TINY.share_k
        assert cs.meta["pooling"] == "last_token"

    def test_round_trip_preserves_metrics(self, tmp_path):
        cfg = ToySimConfig(**{**TINY.__dict__, "steps": 20})
        m = build_model(cfg)
        ds_train = generate_synthetic_task(cfg.seed, "short", cfg.train_samples)
        train_lora(m, ds_train, cfg)
        ds = generate_synthetic_task(cfg.seed, "short", 4, stream="eval")
        cs = capture_hidden(m, ds, 4)
        write_capture_set(cs, tmp_path / "rt")
        back = read_capture_set(tmp_path / "rt")
        assert aggregate(back, quantization=Q8) == aggregate(cs, quantization=Q8)

    def test_zero_init_aggregate_is_exactly_zero(self):
        m = build_model(TINY)
        ds = generate_synthetic_task(TINY.seed, "short", 4, stream="eval")
        cs = capture_hidden(m, ds, 4)
        rep = aggregate(cs, quantization=Q8)
        assert rep.aggregate_m == 0.0

    def test_mean_pooling_supported_and_recorded(self):
        cfg = ToySimConfig(**{**TINY.__dict__, "steps": 10})
        m = build_model(cfg)
        train_lora(m, generate_synthetic_task(cfg.seed, "short",
                                              cfg.train_samples), cfg)
        ds = generate_synthetic_task(cfg.seed, "short", 4, stream="eval")
        last = capture_hidden(m, ds, 4, pooling="last_token")
        mean = capture_hidden(m, ds, 4, pooling="mean")
        assert mean.meta["pooling"] == "mean"
        assert not np.array_equal(last.captures[0].h_base,
                                  mean.captures[0].h_base)


class TestGrid:
    def test_single_cell_grid(self):
        res = run_scaling_grid([TINY], quantization=Q8)
        assert len(res) == 1
        assert res[0].error is None
        assert res[0].observation.rank == TINY.rank

    def test_share_grid_effective_n_increases_as_share_decreases(self):
        cells = [ToySimConfig(**{**TINY.__dict__, "layers": 8, "share_k": k})
                 for k in (4, 2, 1)]
        res = run_scaling_grid(cells, quantization=Q8)
        ns = [r.observation.n_params for r in res]
        assert ns[0] < ns[1] < ns[2]

    def test_failed_cell_recorded_not_fatal(self):
        good = TINY
        bad = ToySimConfig(**{**TINY.__dict__, "vocab": 16})  # task needs >= 40
        res = run_scaling_grid([bad, good], quantization=Q8)
        assert res[0].error is not None and "vocab" in res[0].error
        assert res[1].error is None

    def test_grid_determinism(self):
        r1 = run_scaling_grid([TINY], quantization=Q8)[0]
        r2 = run_scaling_grid([TINY], quantization=Q8)[0]
        assert r1.report == r2.report
