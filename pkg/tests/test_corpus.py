import numpy as np
import pytest

from minimoe.corpus import (
    CLS_ID, FIRST_CONTENT_ID, MASK_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, UNK_ID, TaskDataset, Vocab, build_vocab,
    encode_windows, make_mlm_batches, make_synthetic_task, make_window_batches, pack_rows, read_corpus,
    rule_label, token_cluster, tokenize,
)
from minimoe.errors import ConfigError, ContractError


def full_windows(count=200, width=15, vocab_size=1000, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(FIRST_CONTENT_ID, vocab_size, size=width) for _ in range(count)]


class TestVocab:
    def test_tokenize(self):
        assert tokenize("The Router, sends tokens!") == ["the", "router", ",", "sends", "tokens", "!"]

    def test_specials_then_frequency_then_alphabet(self):
        vocab = build_vocab(["b a c a", "c a b d"], 64)
        assert tuple(vocab.tokens[:5]) == SPECIAL_TOKENS
        assert vocab.tokens[5:] == ["a", "b", "c", "d"]

    def test_max_size_includes_specials(self):
        vocab = build_vocab(["b a c a", "c a b d"], 7)
        assert vocab.size == 7
        assert vocab.encode(["a", "d"]) == [5, UNK_ID]

    def test_invalid_inputs(self):
        with pytest.raises(ContractError):
            build_vocab([""], 10)
        with pytest.raises(ConfigError):
            build_vocab(["a b"], 5)

    def test_save_load_round_trip(self, tmp_path, vocab):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        restored = Vocab.load(path)
        assert restored.tokens == vocab.tokens
        assert restored.index["the"] == vocab.index["the"]

    def test_must_start_with_specials(self):
        with pytest.raises(ContractError):
            Vocab(["a", "b"])

    def test_read_corpus_skips_blank_lines(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("one line\n\n  \nsecond line\n", encoding="utf-8")
        assert read_corpus(path) == ["one line", "second line"]


class TestWindows:
    def test_windows_cover_every_token(self, corpus_lines, vocab):
        windows = encode_windows(corpus_lines[:1], vocab, 4)
        assert all(len(w) <= 3 for w in windows)
        joined = np.concatenate(windows).tolist()
        assert joined == vocab.encode(tokenize(corpus_lines[0]))

    def test_pack_rows(self):
        rows, lengths = pack_rows([np.array([7, 8]), np.array([9])], 4)
        np.testing.assert_array_equal(rows, [[CLS_ID, 7, 8, PAD_ID], [CLS_ID, 9, PAD_ID, PAD_ID]])
        np.testing.assert_array_equal(lengths, [3, 2])

    def test_pack_rows_rejects_long_windows(self):
        with pytest.raises(ContractError):
            pack_rows([np.arange(5, 9)], 4)


class TestMlmBatches:
    def test_shapes_and_targets(self, windows, vocab):
        batch = next(make_mlm_batches(windows, vocab.size, 8, 4, seed=0))
        assert batch.tokens.shape == batch.mask.shape == (4, 8)
        assert len(batch.targets) == batch.mask.sum() >= 1
        assert not batch.mask[:, 0].any()
        positions = np.arange(8)[None, :]
        assert not (batch.mask & (positions >= batch.lengths[:, None])).any()
        assert (batch.targets >= FIRST_CONTENT_ID).all()

    def test_mask_rate_on_full_windows(self):
        windows = full_windows()
        masked = total = replaced = 0
        for batch in make_mlm_batches(windows, 1000, 16, 20, seed=3):
            masked += batch.mask.sum()
            total += (batch.lengths - 1).sum()
            replaced += (batch.tokens[batch.mask] == MASK_ID).sum()
        assert 0.13 < masked / total < 0.17
        assert 0.7 < replaced / masked < 0.9

    def test_unmasked_positions_are_untouched(self):
        windows = full_windows(count=40)
        for batch in make_mlm_batches(windows, 1000, 16, 10, seed=1):
            original = batch.tokens.copy()
            original[batch.mask] = batch.targets
            kept = ~batch.mask
            np.testing.assert_array_equal(batch.tokens[kept], original[kept])
            assert (batch.tokens[:, 0] == CLS_ID).all()

    def test_deterministic_per_seed_and_purpose(self, windows, vocab):
        def first(seed, purpose="mlm"):
            return next(make_mlm_batches(windows, vocab.size, 8, 4, seed=seed, purpose=purpose))

        a, b = first(0), first(0)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert not np.array_equal(first(0).tokens, first(0, purpose="dev").tokens)

    def test_epochs_and_full_batches(self, windows, vocab):
        batches = list(make_mlm_batches(windows, vocab.size, 8, 5, seed=0, epochs=2))
        assert len(batches) == 2 * (len(windows) // 5)
        assert {b.epoch for b in batches} == {0, 1}
        assert all(b.tokens.shape == (5, 8) for b in batches)

    def test_every_batch_has_a_mask(self):
        windows = [np.array([9]) for _ in range(8)]
        for batch in make_mlm_batches(windows, 64, 4, 8, seed=0, epochs=3, mask_rate=0.0):
            assert batch.mask.sum() == 1

    def test_contract_errors(self, windows, vocab):
        with pytest.raises(ContractError):
            next(make_mlm_batches(windows, vocab.size, 8, len(windows) + 1, seed=0))
        with pytest.raises(ContractError):
            next(make_mlm_batches(windows, vocab.size, 200, 4, seed=0, max_seq_len=128))


class TestWindowBatches:
    def test_infinite_stream_reshuffles(self, windows):
        stream = make_window_batches(windows, 8, 4, seed=0)
        per_epoch = len(windows) // 4
        batches = [next(stream) for _ in range(per_epoch + 1)]
        assert batches[-1].epoch == 1
        assert all((b.tokens[:, 0] == CLS_ID).all() for b in batches)
        assert not np.array_equal(batches[0].tokens, batches[per_epoch].tokens)


class TestSyntheticTasks:
    @pytest.mark.parametrize("kind", ["parity", "topic", "pair-match"])
    def test_labels_follow_the_rule(self, kind):
        data = make_synthetic_task(kind, 60, seed=4, vocab_size=200, seq_len=16)
        for tokens, types, label in zip(data.tokens, data.type_ids, data.labels):
            assert rule_label(kind, tokens, types, 200) == label

    @pytest.mark.parametrize("kind, classes", [("parity", 2), ("topic", 4), ("pair-match", 2)])
    def test_balanced_labels(self, kind, classes):
        data = make_synthetic_task(kind, 40, seed=0, vocab_size=200, seq_len=16)
        assert data.num_classes == classes
        counts = np.bincount(data.labels, minlength=classes)
        assert counts.max() - counts.min() <= 1

    def test_pair_layout(self):
        data = make_synthetic_task("pair-match", 5, seed=1, vocab_size=200, seq_len=16)
        for tokens, types, length in zip(data.tokens, data.type_ids, data.lengths):
            row = tokens[:length]
            assert row[0] == CLS_ID and row[-1] == SEP_ID
            assert (row == SEP_ID).sum() == 2
            assert types[length - 1] == 1 and types[0] == 0

    def test_deterministic(self):
        a = make_synthetic_task("topic", 20, seed=9, vocab_size=200, seq_len=16)
        b = make_synthetic_task("topic", 20, seed=9, vocab_size=200, seq_len=16)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_split(self):
        data = make_synthetic_task("parity", 20, seed=0, vocab_size=200, seq_len=16)
        train, dev = data.split(0.25, seed=0)
        assert len(train) == 15 and len(dev) == 5

    def test_save_load_round_trip(self, tmp_path):
        data = make_synthetic_task("pair-match", 12, seed=2, vocab_size=200, seq_len=16)
        path = tmp_path / "task.jsonl"
        data.save(path)
        restored = TaskDataset.load(path, seq_len=16)
        assert restored.kind == "pair-match" and restored.num_classes == 2
        np.testing.assert_array_equal(restored.tokens, data.tokens)
        np.testing.assert_array_equal(restored.type_ids, data.type_ids)
        np.testing.assert_array_equal(restored.labels, data.labels)

    def test_token_clusters_partition_content_ids(self):
        clusters = token_cluster(np.arange(FIRST_CONTENT_ID, 200), 200, 4)
        assert clusters.min() == 0 and clusters.max() == 3
        assert np.all(np.diff(clusters) >= 0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_synthetic_task("sentiment", 10, seed=0)
