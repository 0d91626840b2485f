"""Sampler tests: truncation rules, sequence decoding, bulk generation."""

import json

import numpy as np
import pytest
from scipy import stats

from dpdistill.accountant import PrivacyBudget, PrivacyLedger
from dpdistill.corpus import ControlCode, Vocabulary, toy_schema, generate_toy_corpus, render_control_code
from dpdistill.model import ModelConfig, ParameterSet, init_params, _param_names
from dpdistill.sampler import (
    SamplerConfig,
    _draw,
    generate_synthetic,
    load_synthetic,
    sample_sequence,
    save_synthetic,
    truncate_top_k,
    truncate_top_p,
)

VOCAB = Vocabulary()


def dist(*values):
    return np.asarray(values, dtype=np.float64)


class TestTopK:
    def test_k_at_least_vocab_unchanged(self):
        probs = dist(0.5, 0.3, 0.2)
        np.testing.assert_array_equal(truncate_top_k(probs, 3), probs)
        np.testing.assert_array_equal(truncate_top_k(probs, 10), probs)

    def test_renormalizes_kept_mass(self):
        out = truncate_top_k(dist(0.5, 0.3, 0.2), 2)
        np.testing.assert_allclose(out, [0.625, 0.375, 0.0], atol=1e-12)

    def test_k1_point_mass(self):
        out = truncate_top_k(dist(0.2, 0.5, 0.3), 1)
        np.testing.assert_array_equal(out, [0.0, 1.0, 0.0])

    def test_tie_at_rank_k_prefers_lower_id(self):
        out = truncate_top_k(dist(0.4, 0.3, 0.3), 2)
        np.testing.assert_allclose(out, [0.4 / 0.7, 0.3 / 0.7, 0.0], atol=1e-12)

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError, match="k"):
            truncate_top_k(dist(1.0), 0)

    def test_bad_distribution_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            truncate_top_k(dist(0.5, 0.3), 1)


class TestTopP:
    def test_p1_unchanged(self):
        probs = dist(0.5, 0.3, 0.2)
        np.testing.assert_allclose(truncate_top_p(probs, 1.0), probs, atol=1e-12)

    def test_boundary_token_included(self):
        out = truncate_top_p(dist(0.5, 0.3, 0.2), 0.7)
        np.testing.assert_allclose(out, [0.625, 0.375, 0.0], atol=1e-12)

    def test_p_below_max_gives_point_mass(self):
        out = truncate_top_p(dist(0.5, 0.3, 0.2), 0.4)
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0])

    def test_tie_prefers_lower_id(self):
        out = truncate_top_p(dist(0.3, 0.3, 0.4), 0.7)
        np.testing.assert_allclose(out, [0.3 / 0.7, 0.0, 0.4 / 0.7], atol=1e-12)


class TestTruncationProperties:
    def test_outputs_valid_distributions(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            raw = rng.dirichlet(np.ones(40))
            for out in (truncate_top_k(raw, 7), truncate_top_p(raw, 0.8)):
                assert np.all(out >= 0)
                assert abs(out.sum() - 1.0) < 1e-9
                assert set(np.flatnonzero(out)) <= set(np.flatnonzero(raw))

    def test_composition_never_enlarges_support(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            raw = rng.dirichlet(np.ones(30))
            k_only = truncate_top_k(raw, 5)
            p_only = truncate_top_p(raw, 0.7)
            both = truncate_top_p(k_only, 0.7)
            support = set(np.flatnonzero(both))
            assert support <= set(np.flatnonzero(k_only))
            assert support <= set(np.flatnonzero(p_only))

    def test_empirical_frequencies_chi_square(self):
        probs = truncate_top_p(dist(0.35, 0.25, 0.2, 0.12, 0.05, 0.03), 0.9)
        rng = np.random.default_rng(99)
        counts = np.zeros(probs.size, dtype=np.int64)
        n = 100_000
        for _ in range(n):
            counts[_draw(probs, rng)] += 1
        kept = probs > 0
        result = stats.chisquare(counts[kept], probs[kept] * n)
        assert result.pvalue > 0.01


def forced_model(prompt: tuple[int, ...], forced: list[int]) -> ParameterSet:
    """A model whose logits put an overwhelming point mass on forced[j] at
    the position that samples the j-th generated token; everything except
    the positional embedding and output head is zeroed out."""
    cfg = ModelConfig(
        n_layers=1, n_heads=2, d_model=16, d_ff=16, vocab_size=13, max_seq_len=16
    )
    arrays = {name: np.zeros(shape) for name, shape in _param_names(cfg)}
    arrays["ln_f.g"] = np.ones(cfg.d_model)
    arrays["pos_emb"] = np.eye(cfg.max_seq_len, cfg.d_model)

    def final_norm(row):
        return (row - row.mean()) / np.sqrt(row.var() + 1e-5)

    for j, token in enumerate(forced):
        pos = len(prompt) - 1 + j
        arrays["head.w"][:, token] += 10.0 * final_norm(arrays["pos_emb"][pos])
    return ParameterSet(config=cfg, arrays=arrays)


class TestSampleSequence:
    def setup_method(self):
        self.params = init_params(
            ModelConfig(
                n_layers=1, n_heads=2, d_model=16, d_ff=32,
                vocab_size=VOCAB.size, max_seq_len=32,
            ),
            seed=3,
        )
        record = generate_toy_corpus(seed=1, n=1)[0]
        self.code = render_control_code(record, toy_schema(), VOCAB)

    def test_one_new_token(self):
        config = SamplerConfig(top_k=None, top_p=None, max_new_tokens=1)
        seq = sample_sequence(
            self.params, self.code, config, np.random.default_rng(0),
            banned_ids=(VOCAB.pad_id, VOCAB.sep_id), eos_id=VOCAB.eos_id,
        )
        assert len(seq) == len(self.code.rendered) + 1

    def test_fixed_seed_deterministic(self):
        config = SamplerConfig(top_k=10, top_p=0.9, max_new_tokens=8)
        seqs = [
            sample_sequence(
                self.params, self.code, config, np.random.default_rng(5),
                banned_ids=(VOCAB.pad_id, VOCAB.sep_id), eos_id=VOCAB.eos_id,
            )
            for _ in range(2)
        ]
        assert seqs[0] == seqs[1]

    def test_forced_point_mass_ignores_rng(self):
        prompt = (5, 2)
        forced = [7, 4, 9, 1]
        params = forced_model(prompt, forced)
        code = ControlCode(attributes=(("x", "y"),), rendered=prompt)
        config = SamplerConfig(top_k=3, top_p=0.9, max_new_tokens=10)
        for seed in (0, 1, 2):
            seq = sample_sequence(
                params, code, config, np.random.default_rng(seed),
                banned_ids=(0, 2), eos_id=1,
            )
            assert seq == prompt + tuple(forced)


class TestGenerateSynthetic:
    def setup_method(self):
        self.schema = toy_schema()
        self.params = init_params(
            ModelConfig(
                n_layers=1, n_heads=2, d_model=16, d_ff=32,
                vocab_size=VOCAB.size, max_seq_len=64,
            ),
            seed=11,
        )
        records = generate_toy_corpus(seed=2, n=6)
        self.codes = [render_control_code(r, self.schema, VOCAB) for r in records]

    def test_order_and_seed_codes_preserved(self):
        config = SamplerConfig(top_k=20, top_p=0.9, max_new_tokens=6)
        dataset = generate_synthetic(
            self.params, self.codes[:3], config, seed=7, vocab=VOCAB
        )
        assert len(dataset) == 3
        for ex, code in zip(dataset.examples, self.codes[:3]):
            assert ex.code == code
            assert ex.tokens[: len(code.rendered)] == code.rendered

    def test_ledger_untouched_by_generation(self):
        ledger = PrivacyLedger(target=PrivacyBudget(2.0, 1e-4))
        before_rdp = ledger.accumulated_rdp.copy()
        before_steps = ledger.steps_recorded
        generate_synthetic(
            self.params, self.codes, SamplerConfig(max_new_tokens=4), seed=1,
            vocab=VOCAB,
        )
        np.testing.assert_array_equal(ledger.accumulated_rdp, before_rdp)
        assert ledger.steps_recorded == before_steps

    def test_batch_size_does_not_change_results(self):
        config = SamplerConfig(top_k=20, top_p=0.9, max_new_tokens=8)
        a = generate_synthetic(self.params, self.codes, config, seed=3, vocab=VOCAB,
                               batch_size=2)
        b = generate_synthetic(self.params, self.codes, config, seed=3, vocab=VOCAB,
                               batch_size=64)
        assert [e.tokens for e in a.examples] == [e.tokens for e in b.examples]

    def test_reserved_ids_never_inside_content(self):
        config = SamplerConfig(top_k=None, top_p=None, max_new_tokens=10)
        dataset = generate_synthetic(
            self.params, self.codes, config, seed=9, vocab=VOCAB
        )
        for ex in dataset.examples:
            content = ex.tokens[len(ex.code.rendered) :]
            assert VOCAB.pad_id not in content
            assert VOCAB.sep_id not in content
            # EOS may appear once, only as the final token.
            if VOCAB.eos_id in content:
                assert content.index(VOCAB.eos_id) == len(content) - 1

    def test_fingerprint_present(self):
        dataset = generate_synthetic(
            self.params, self.codes[:2], SamplerConfig(max_new_tokens=4), seed=5,
            vocab=VOCAB,
        )
        assert len(dataset.fingerprint["checkpoint_sha256"]) == 64
        assert dataset.fingerprint["count"] == 2
        assert dataset.fingerprint["sampler"]["top_k"] == 50

    def test_save_load_round_trip(self, tmp_path):
        config = SamplerConfig(top_k=20, top_p=0.9, max_new_tokens=8)
        dataset = generate_synthetic(
            self.params, self.codes, config, seed=13, vocab=VOCAB
        )
        data = tmp_path / "synthetic.jsonl"
        manifest = tmp_path / "synthetic.manifest.json"
        save_synthetic(data, manifest, dataset, VOCAB)

        first = json.loads(data.read_text().splitlines()[0])
        assert set(first) == {"control", "text"}

        loaded = load_synthetic(data, manifest, self.schema, VOCAB)
        assert loaded.fingerprint["checkpoint_sha256"] == dataset.fingerprint[
            "checkpoint_sha256"
        ]
        assert len(loaded) == len(dataset)
        for ours, theirs in zip(dataset.examples, loaded.examples):
            assert ours.code.attributes == theirs.code.attributes


class TestSamplerConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="top_k"):
            SamplerConfig(top_k=0)
        with pytest.raises(ValueError, match="top_p"):
            SamplerConfig(top_p=0.0)
        with pytest.raises(ValueError, match="max_new_tokens"):
            SamplerConfig(max_new_tokens=0)

    def test_default_truncation_values(self):
        config = SamplerConfig()
        assert config.top_k == 50
        assert config.top_p == 0.9
