"""Token embedding and transformer encoding: vocabulary semantics, token
assembly, masking exactness, attention normalization, and operation counts."""
import numpy as np
import pytest

import hetlink.autodiff as ad
import hetlink.encoder as enc
from hetlink.autodiff import Tensor
from hetlink.encoder import (
    ConnectionVocab,
    EncoderConfig,
    EncodingTables,
    TransformerEncoder,
    embed_sequence,
)
from hetlink.sampler import ConcentratedSequence, SamplerConfig, sample_corpus
from hetlink.batching import embed_batch, make_batches, prepare_corpus

from conftest import toy_dti_graph


class TestConnectionVocab:
    def test_new_tuple_allocates_nonzero_index(self):
        v = ConnectionVocab()
        assert v.lookup((1, 2)) >= 1

    def test_repeat_lookup_stable(self):
        v = ConnectionVocab()
        first = v.lookup((1, 2))
        assert v.lookup((1, 2)) == first
        assert v.lookup((1, 2), frozen=True) == first

    def test_unseen_frozen_maps_to_unk(self):
        v = ConnectionVocab()
        v.lookup((1,))
        assert v.lookup((9, 9), frozen=True) == enc.UNK_INDEX

    def test_growth_blocked_after_table_built(self):
        v = ConnectionVocab()
        v.lookup((1,))
        v.build_table(8, np.random.default_rng(0))
        with pytest.raises(enc.EncoderError, match="re-fit"):
            v.lookup((2, 2))

    def test_meta_round_trip(self):
        v = ConnectionVocab()
        v.lookup((3, 1))
        v.lookup((2,))
        again = ConnectionVocab.from_meta(v.to_meta())
        assert again.lookup((3, 1), frozen=True) == v.lookup((3, 1), frozen=True)


class TestEmbedSequence:
    def _setup(self):
        g = toy_dti_graph()
        cfg = SamplerConfig(max_inner=2, walk_length=3, samples_per_head=20, seed=1)
        corpus = sample_corpus(g, g.head_nodes(), cfg)
        vocab = ConnectionVocab()
        vocab.fit_corpus(corpus)
        rng = np.random.default_rng(0)
        vocab.build_table(16, rng)
        tables = EncodingTables(g, 16, distance_cap=6, rng=rng)
        return g, corpus, vocab, tables

    def test_three_nodes_give_five_tokens(self):
        g, corpus, vocab, tables = self._setup()
        seq = next(s for s in corpus if s.node_count == 3)
        tokens = embed_sequence(seq, g, tables, vocab)
        assert tokens.shape == (5, 16)

    def test_head_token_is_feature_plus_zero_distance_row(self):
        g, corpus, vocab, tables = self._setup()
        seq = next(s for s in corpus if s.node_count >= 2)
        tokens = embed_sequence(seq, g, tables, vocab)
        row = tables.node_row[g.global_of(seq.head)]
        expected = tables.node_embeddings.data[row] + tables.distance_table.data[0]
        np.testing.assert_array_equal(tokens.data[0], expected)

    def test_connection_token_is_encoding_plus_tag(self):
        g, corpus, vocab, tables = self._setup()
        seq = next(s for s in corpus if s.node_count >= 2)
        tokens = embed_sequence(seq, g, tables, vocab)
        conn = seq.steps[0][0]
        expected = (
            vocab.table.data[vocab.lookup(conn, frozen=True)]
            + tables.edg_constant.data[0]
        )
        np.testing.assert_array_equal(tokens.data[1], expected)

    def test_unreachable_distance_uses_final_bucket(self):
        g, corpus, vocab, tables = self._setup()
        seq = ConcentratedSequence(
            head=corpus[0].head,
            steps=corpus[0].steps[:1] if corpus[0].steps else [],
            distances=[0, -1][: 1 + min(1, len(corpus[0].steps))],
        )
        if seq.steps:
            tokens = embed_sequence(seq, g, tables, vocab)
            node = seq.steps[0][1]
            row = tables.node_row[g.global_of(node)]
            expected = tables.node_embeddings.data[row] + tables.distance_table.data[-1]
            np.testing.assert_array_equal(tokens.data[2], expected)

    def test_missing_distances_rejected(self):
        g, corpus, vocab, tables = self._setup()
        seq = next(s for s in corpus if s.node_count >= 2)
        broken = ConcentratedSequence(seq.head, seq.steps, seq.distances[:-1])
        with pytest.raises(enc.DataError, match="distance"):
            embed_sequence(broken, g, tables, vocab)


class TestTransformerEncoder:
    def _encoder(self, **kw):
        cfg = EncoderConfig(**{**dict(layers=2, heads=2, d_in=12, d_hidden=8, d_out=6), **kw})
        return cfg, TransformerEncoder(cfg, np.random.default_rng(3))

    def test_default_config_output_width(self):
        cfg = EncoderConfig()
        assert (cfg.layers, cfg.heads, cfg.d_in, cfg.d_hidden, cfg.d_out) == (
            4, 8, 512, 256, 128,
        )
        encoder = TransformerEncoder(cfg, np.random.default_rng(0))
        tokens = Tensor(np.random.default_rng(1).normal(size=(1, 5, 512)))
        out = encoder.encode(tokens, np.ones((1, 5)))
        assert out.shape == (1, 5, 128)

    def test_hidden_dim_divisibility_enforced(self):
        with pytest.raises(enc.EncoderError, match="divisible"):
            EncoderConfig(heads=3, d_hidden=8)

    def test_wrong_token_width_rejected(self):
        cfg, encoder = self._encoder()
        with pytest.raises(ad.ShapeError):
            encoder.encode(Tensor(np.zeros((1, 3, 5))), np.ones((1, 3)))

    def test_deterministic(self):
        cfg, encoder = self._encoder()
        tokens = Tensor(np.random.default_rng(4).normal(size=(2, 5, 12)))
        mask = np.ones((2, 5))
        a = encoder.encode(tokens, mask).data
        b = encoder.encode(tokens, mask).data
        assert np.array_equal(a, b)

    def test_batch_permutation_permutes_outputs(self):
        cfg, encoder = self._encoder()
        rng = np.random.default_rng(5)
        tokens = rng.normal(size=(3, 5, 12))
        mask = np.ones((3, 5))
        out = encoder.encode(Tensor(tokens), mask).data
        perm = [2, 0, 1]
        out_p = encoder.encode(Tensor(tokens[perm]), mask).data
        np.testing.assert_array_equal(out_p, out[perm])

    def test_padded_values_cannot_influence_valid_positions(self):
        cfg, encoder = self._encoder()
        rng = np.random.default_rng(6)
        tokens = rng.normal(size=(2, 7, 12))
        mask = np.ones((2, 7))
        mask[0, 4:] = 0.0
        base = encoder.encode(Tensor(tokens), mask).data
        poisoned = tokens.copy()
        poisoned[0, 4:] = rng.normal(size=(3, 12)) * 1e3 + 500.0
        out = encoder.encode(Tensor(poisoned), mask).data
        assert np.array_equal(out[0, :4], base[0, :4])
        assert np.array_equal(out[1], base[1])

    def test_sequence_alone_matches_padded_batch(self):
        cfg, encoder = self._encoder()
        rng = np.random.default_rng(7)
        short = rng.normal(size=(1, 3, 12))
        longer = rng.normal(size=(1, 9, 12))
        alone = encoder.encode(Tensor(short), np.ones((1, 3))).data
        batch_tokens = np.zeros((2, 9, 12))
        batch_tokens[0, :3] = short[0]
        batch_tokens[1] = longer[0]
        mask = np.ones((2, 9))
        mask[0, 3:] = 0.0
        batched = encoder.encode(Tensor(batch_tokens), mask).data
        np.testing.assert_allclose(batched[0, :3], alone[0], atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        cfg, encoder = self._encoder()
        rng = np.random.default_rng(8)
        tokens = rng.normal(size=(2, 6, 12))
        mask = np.ones((2, 6))
        mask[1, 4:] = 0.0
        _, attns = encoder.encode(Tensor(tokens), mask, collect_attention=True)
        assert len(attns) == cfg.layers
        for attn in attns:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)
            # masked keys get exactly zero weight
            assert np.all(attn[1, :, :, 4:] == 0.0)

    def test_attention_op_count_scaling(self):
        cfg, encoder = self._encoder(d_hidden=16, heads=2)
        rng = np.random.default_rng(9)

        def ops_for(T):
            enc.reset_attention_ops()
            encoder.encode(Tensor(rng.normal(size=(1, T, 12))), np.ones((1, T)))
            return enc.attention_ops()

        ratio = ops_for(64) / ops_for(32)
        assert 2.5 <= ratio <= 4.5


class TestBatchedEmbedding:
    def test_batched_embed_matches_single_sequences(self):
        g = toy_dti_graph()
        cfg = SamplerConfig(max_inner=2, walk_length=4, samples_per_head=10, seed=2)
        corpus = sample_corpus(g, g.head_nodes(), cfg)
        vocab = ConnectionVocab()
        vocab.fit_corpus(corpus)
        rng = np.random.default_rng(1)
        vocab.build_table(10, rng)
        tables = EncodingTables(g, 10, distance_cap=6, rng=rng)
        prepared = prepare_corpus(corpus, g, tables, vocab)
        for batch in make_batches(prepared, batch_size=7):
            tokens, mask = embed_batch(batch, tables, vocab)
            for row, seq_idx in enumerate(batch.seq_indices):
                single = embed_sequence(corpus[seq_idx], g, tables, vocab)
                t = single.shape[0]
                np.testing.assert_array_equal(tokens.data[row, :t], single.data)
                assert np.all(tokens.data[row, t:] == 0.0)
                assert mask[row, :t].all() and not mask[row, t:].any()
