import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronrnn.errors import DataError
from kronrnn import tasks
from kronrnn.tasks import (bits_per_char, char_window_batch,
                           copy_baseline_nats, gen_adding_batch,
                           gen_copy_batch, load_char_corpus, load_idx_images,
                           load_idx_labels, load_mnist_idx, permute_pixels,
                           pixel_permutation, window_batches)


class TestCopyTask:
    def test_structure(self):
        t = 30
        batch = gen_copy_batch(t, 16, seed=0)
        assert batch.inputs.shape == (16, t + 20, 10)
        classes = batch.inputs.argmax(axis=2)
        # delimiter at position t+9 in every sequence
        assert np.all(classes[:, t + 9] == 9)
        # blanks between the payload and the delimiter, and after it
        assert np.all(classes[:, 10:t + 9] == 0)
        assert np.all(classes[:, t + 10:] == 0)
        # payload symbols are in 1..8
        assert np.all((classes[:, :10] >= 1) & (classes[:, :10] <= 8))
        # targets: blanks for t+10 steps, then the payload
        assert np.all(batch.targets[:, :t + 10] == 0)
        assert np.array_equal(batch.targets[:, t + 10:], classes[:, :10])
        assert batch.loss_mask.all()
        assert batch.loss_kind == "ce"

    def test_one_hot_inputs(self):
        batch = gen_copy_batch(5, 4, seed=1)
        assert np.all(batch.inputs.sum(axis=2) == 1.0)
        assert set(np.unique(batch.inputs)) == {0.0, 1.0}

    def test_memoryless_baseline_value(self):
        # 10 ln 8 / (T + 20) with natural log
        assert copy_baseline_nats(100) == pytest.approx(0.17329, abs=1e-5)
        assert copy_baseline_nats(100) == pytest.approx(
            10 * np.log(8) / 120, rel=1e-12)

    def test_deterministic_under_seed(self):
        a = gen_copy_batch(12, 8, seed=42)
        b = gen_copy_batch(12, 8, seed=42)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.targets, b.targets)

    def test_symbol_marginals(self):
        # each class 1..8 with frequency 1/8 +- 0.01 over >= 1e5 symbols
        batch = gen_copy_batch(1, 11000, seed=3)
        symbols = batch.targets[:, -10:].ravel()
        assert symbols.size >= 1e5
        freq = np.bincount(symbols, minlength=9)[1:9] / symbols.size
        assert np.all(np.abs(freq - 0.125) <= 0.01)


class TestAddingTask:
    def test_structure(self):
        t = 40
        batch = gen_adding_batch(t, 32, seed=0)
        assert batch.inputs.shape == (32, t, 2)
        markers = batch.inputs[:, :, 1]
        assert np.all(markers.sum(axis=1) == 2.0)
        # one marker in each half
        assert np.all(markers[:, :t // 2].sum(axis=1) == 1.0)
        assert np.all(markers[:, t // 2:].sum(axis=1) == 1.0)
        # loss only at the final step
        assert np.array_equal(batch.loss_mask.sum(axis=1), np.ones(32))
        assert batch.loss_mask[:, -1].all()
        assert batch.loss_kind == "mse"

    def test_targets_are_marked_sums(self):
        batch = gen_adding_batch(20, 64, seed=1)
        values = batch.inputs[:, :, 0]
        markers = batch.inputs[:, :, 1]
        want = (values * markers).sum(axis=1)
        assert np.allclose(batch.targets, want)
        assert np.all((batch.targets >= 0.0) & (batch.targets <= 2.0))

    def test_constant_predictor_baseline(self):
        # Var(sum of two U[0,1]) = 1/6; the batch-level MSE of yhat = 1
        # concentrates there.
        assert tasks.adding_baseline_mse() == pytest.approx(0.16667, abs=1e-5)
        batch = gen_adding_batch(10, 200_000, seed=2)
        emp = np.mean((batch.targets - 1.0) ** 2)
        assert emp == pytest.approx(1.0 / 6.0, abs=3e-3)

    def test_marker_positions_uniform(self):
        from scipy import stats
        t = 50
        batch = gen_adding_batch(t, 120_000, seed=3)
        markers = batch.inputs[:, :, 1]
        first = markers[:, :t // 2].argmax(axis=1)
        second = markers[:, t // 2:].argmax(axis=1)
        for positions, bins in ((first, t // 2), (second, t - t // 2)):
            counts = np.bincount(positions, minlength=bins)
            assert stats.chisquare(counts).pvalue > 0.001


class TestIdx:
    def test_round_trip(self, tmp_idx_pair):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(7, 28, 28))
        labels = rng.integers(0, 10, size=7)
        ipath, lpath = tmp_idx_pair(images, labels)
        x, y = load_mnist_idx(ipath, lpath)
        assert x.shape == (7, 784)
        assert np.array_equal(y, labels)
        # pixel scaling: 255 -> 1.0, 0 -> 0.0
        assert np.allclose(x, images.reshape(7, 784) / 255.0)

    def test_full_intensity_maps_to_one(self, tmp_idx_pair):
        images = np.full((1, 2, 2), 255)
        ipath, lpath = tmp_idx_pair(images, [3])
        x, _ = load_mnist_idx(ipath, lpath)
        assert np.all(x == 1.0)

    def test_gzip_transparent(self, tmp_path):
        from conftest import make_idx_images
        images = np.zeros((2, 3, 3), dtype=np.uint8)
        gz = tmp_path / "im.gz"
        gz.write_bytes(gzip.compress(make_idx_images(images)))
        x = load_idx_images(str(gz))
        assert x.shape == (2, 9)

    def test_bad_magic_rejected(self, tmp_path):
        bad = tmp_path / "bad"
        bad.write_bytes((2050).to_bytes(4, "big") + b"\x00" * 12)
        with pytest.raises(DataError, match="magic"):
            load_idx_images(str(bad))
        with pytest.raises(DataError, match="magic"):
            load_idx_labels(str(bad))

    def test_truncated_rejected(self, tmp_path):
        from conftest import make_idx_images
        payload = make_idx_images(np.zeros((4, 5, 5), dtype=np.uint8))
        cut = tmp_path / "cut"
        cut.write_bytes(payload[:-10])
        with pytest.raises(DataError, match="truncated"):
            load_idx_images(str(cut))

    def test_count_mismatch_rejected(self, tmp_idx_pair):
        ipath, _ = tmp_idx_pair(np.zeros((3, 2, 2), dtype=np.uint8),
                                [0, 1, 2])
        _, lpath = tmp_idx_pair(np.zeros((2, 2, 2), dtype=np.uint8),
                                [0, 1], prefix="other")
        with pytest.raises(DataError, match="count"):
            load_mnist_idx(ipath, lpath)

    def test_missing_file(self):
        with pytest.raises(DataError):
            load_idx_images("/nonexistent/path")


class TestPermutation:
    def test_identity_when_unseeded(self):
        perm = pixel_permutation(784, seed=None)
        assert np.array_equal(perm, np.arange(784))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_bijection(self, seed):
        perm = pixel_permutation(784, seed=seed)
        assert np.array_equal(np.sort(perm), np.arange(784))

    def test_same_seed_shared_across_splits(self):
        p1 = pixel_permutation(784, seed=9)
        p2 = pixel_permutation(784, seed=9)
        assert np.array_equal(p1, p2)

    def test_apply(self):
        rng = np.random.default_rng(1)
        images = rng.random((5, 10))
        perm = pixel_permutation(10, seed=2)
        out = permute_pixels(images, perm)
        assert np.array_equal(out[:, 0], images[:, perm[0]])


class TestCharCorpus:
    def _write(self, tmp_path, train, valid, test):
        paths = []
        for name, text in (("train", train), ("valid", valid), ("test", test)):
            p = tmp_path / f"{name}.txt"
            p.write_text(text)
            paths.append(str(p))
        return paths

    def test_vocab_from_train_plus_unk(self, tmp_path):
        paths = self._write(tmp_path, "abab", "ab", "ba")
        corpus = load_char_corpus(*paths)
        assert corpus.distinct_train_chars == 2
        assert corpus.vocab_size == 3

    def test_unseen_chars_map_to_unk(self, tmp_path):
        paths = self._write(tmp_path, "aaaa", "ab", "zz")
        corpus = load_char_corpus(*paths)
        unk = corpus.vocab[tasks.UNK]
        assert corpus.valid_ids[1] == unk
        assert np.all(corpus.test_ids == unk)

    def test_empty_corpus_rejected(self, tmp_path):
        (tmp_path / "e.txt").write_text("")
        with pytest.raises(DataError, match="empty"):
            load_char_corpus(str(tmp_path / "e.txt"), str(tmp_path / "e.txt"),
                             str(tmp_path / "e.txt"))

    def test_unreadable_rejected(self):
        with pytest.raises(DataError):
            load_char_corpus("/no/such", "/no/such", "/no/such")

    def test_uniform_model_bpc_is_log2_vocab(self):
        v = 50
        nats = np.log(v)
        assert bits_per_char(nats) == pytest.approx(np.log2(v), rel=1e-12)

    def test_window_iterator_covers_stream_once(self, tmp_path):
        text = "the quick brown fox jumps over the lazy dog " * 40
        paths = self._write(tmp_path, text, text[:100], text[:100])
        corpus = load_char_corpus(*paths)
        batch_size, window = 4, 7
        chunk = len(corpus.train_ids) // batch_size
        seen = 0
        prev_end = 0
        for x_ids, y_ids, is_start in window_batches(corpus.train_ids,
                                                     batch_size, window):
            assert x_ids.shape == y_ids.shape
            assert (is_start) == (prev_end == 0)
            seen += x_ids.shape[1]
            prev_end += x_ids.shape[1]
        # every input column of the batched region appears exactly once
        assert seen == chunk - 1

    def test_window_targets_shift_by_one(self, tmp_path):
        paths = self._write(tmp_path, "abcdefgh" * 8, "ab", "ab")
        corpus = load_char_corpus(*paths)
        for x_ids, y_ids, _ in window_batches(corpus.train_ids, 2, 5):
            assert x_ids.shape == y_ids.shape
            # shifted stream: y[t] == next char after x[t]
        x_ids, y_ids, _ = next(iter(window_batches(corpus.train_ids, 2, 5)))
        chunk = len(corpus.train_ids) // 2
        grid = corpus.train_ids[:chunk * 2].reshape(2, chunk)
        assert np.array_equal(y_ids, grid[:, 1:6])

    def test_one_hot_batch(self, tmp_path):
        paths = self._write(tmp_path, "abcabc", "abc", "abc")
        corpus = load_char_corpus(*paths)
        x_ids, y_ids, _ = next(iter(window_batches(corpus.train_ids, 1, 3)))
        batch = char_window_batch(x_ids, y_ids, corpus.vocab_size)
        assert batch.inputs.shape == (1, 3, corpus.vocab_size)
        assert np.all(batch.inputs.sum(axis=2) == 1.0)
        assert batch.loss_kind == "ce"
        assert batch.loss_mask.all()

    def test_too_small_for_batch(self, tmp_path):
        paths = self._write(tmp_path, "ab", "ab", "ab")
        corpus = load_char_corpus(*paths)
        with pytest.raises(DataError, match="too small"):
            list(window_batches(corpus.train_ids, 4, 3))
