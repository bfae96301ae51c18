"""Benchmark task generators and data ingestion.

Synthetic generators (symbol recall, marked-pair addition) are pure
functions of their seed.  The image loader reads the standard big-endian
IDX container (plain or gzipped) from user-supplied paths; nothing here
touches the network.  The character pipeline builds a byte-level
vocabulary from the training split and batches streams contiguously so
hidden state carried across windows stays meaningful.
"""

import gzip
import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .rng import generator

COPY_CLASSES = 10        # 0 blank, 1..8 symbols, 9 delimiter
COPY_PAYLOAD = 10        # symbols to recall
IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass
class TaskBatch:
    """One minibatch: inputs, targets, and the positions that carry loss."""

    inputs: np.ndarray     # (B, T, D) float64
    targets: np.ndarray    # (B, T) int64 for "ce", (B,) float64 for "mse"
    loss_mask: np.ndarray  # (B, T) bool
    loss_kind: str         # "ce" | "mse"

    @property
    def batch_size(self):
        return self.inputs.shape[0]

    @property
    def seq_len(self):
        return self.inputs.shape[1]

    def to_json(self):
        """Snapshot for test fixtures; exact for targets/mask, float64 text
        round-trip (repr) for inputs."""
        return json.dumps({
            "loss_kind": self.loss_kind,
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "loss_mask": self.loss_mask.astype(int).tolist(),
        })

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        targets = np.asarray(raw["targets"])
        if raw["loss_kind"] == "ce":
            targets = targets.astype(np.int64)
        return cls(inputs=np.asarray(raw["inputs"], dtype=np.float64),
                   targets=targets,
                   loss_mask=np.asarray(raw["loss_mask"], dtype=bool),
                   loss_kind=raw["loss_kind"])


def copy_baseline_nats(t):
    """Cross-entropy of the best input-ignoring predictor on the recall task."""
    return COPY_PAYLOAD * np.log(8.0) / (t + 2 * COPY_PAYLOAD)


def gen_copy_batch(t, batch_size, seed=None, rng=None):
    """Symbol-recall sequences of length t + 20.

    Ten symbols drawn uniformly from {1..8}, then t-1 blanks, the
    delimiter (class 9) at position t+9, then ten blanks.  Targets are
    blank for t+10 steps followed by the ten initial symbols; every
    position carries loss.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if rng is None:
        rng = generator(seed)
    total = t + 2 * COPY_PAYLOAD
    symbols = rng.integers(1, 9, size=(batch_size, COPY_PAYLOAD))
    classes = np.zeros((batch_size, total), dtype=np.int64)
    classes[:, :COPY_PAYLOAD] = symbols
    classes[:, t + COPY_PAYLOAD - 1] = 9
    targets = np.zeros((batch_size, total), dtype=np.int64)
    targets[:, t + COPY_PAYLOAD:] = symbols
    inputs = np.zeros((batch_size, total, COPY_CLASSES))
    rows = np.arange(batch_size)[:, None]
    cols = np.arange(total)[None, :]
    inputs[rows, cols, classes] = 1.0
    mask = np.ones((batch_size, total), dtype=bool)
    return TaskBatch(inputs=inputs, targets=targets, loss_mask=mask,
                     loss_kind="ce")


def adding_baseline_mse():
    """MSE of the constant predictor 1.0: the variance of a sum of two U[0,1]."""
    return 2.0 / 12.0


def gen_adding_batch(t, batch_size, seed=None, rng=None):
    """Marked-pair addition: values in U[0,1], one marker per half.

    Input dimension 2 (value, marker); the scalar target is the sum of
    the two marked values; only the final step carries loss.
    """
    if t < 2:
        raise ValueError(f"t must be >= 2, got {t}")
    if rng is None:
        rng = generator(seed)
    values = rng.uniform(0.0, 1.0, size=(batch_size, t))
    first = rng.integers(0, t // 2, size=batch_size)
    second = rng.integers(t // 2, t, size=batch_size)
    markers = np.zeros((batch_size, t))
    rows = np.arange(batch_size)
    markers[rows, first] = 1.0
    markers[rows, second] = 1.0
    inputs = np.stack([values, markers], axis=-1)
    targets = values[rows, first] + values[rows, second]
    mask = np.zeros((batch_size, t), dtype=bool)
    mask[:, -1] = True
    return TaskBatch(inputs=inputs, targets=targets, loss_mask=mask,
                     loss_kind="mse")


# -- IDX image ingestion -----------------------------------------------------

def _open_maybe_gzip(path):
    try:
        raw = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    head = raw.read(2)
    raw.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(raw)
    return raw


def _read_be32(f, path, what):
    data = f.read(4)
    if len(data) != 4:
        raise DataError(f"{path}: truncated while reading {what}")
    return int.from_bytes(data, "big")


def load_idx_images(path):
    """Read an IDX image file into a (count, rows*cols) float array in [0, 1]."""
    with _open_maybe_gzip(path) as f:
        magic = _read_be32(f, path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(
                f"{path}: bad image magic {magic}, expected {IDX_IMAGE_MAGIC}")
        count = _read_be32(f, path, "count")
        rows = _read_be32(f, path, "rows")
        cols = _read_be32(f, path, "cols")
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise DataError(f"{path}: truncated image payload")
        pixels = np.frombuffer(payload, dtype=np.uint8)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path):
    with _open_maybe_gzip(path) as f:
        magic = _read_be32(f, path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise DataError(
                f"{path}: bad label magic {magic}, expected {IDX_LABEL_MAGIC}")
        count = _read_be32(f, path, "count")
        payload = f.read(count)
        if len(payload) != count:
            raise DataError(f"{path}: truncated label payload")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(images_path, labels_path):
    """Load paired IDX files; errors if image and label counts disagree."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}")
    return images, labels


def pixel_permutation(length, seed=None):
    """One fixed permutation shared by every split; identity when unseeded."""
    if seed is None:
        return np.arange(length)
    return generator(seed).permutation(length)


def permute_pixels(images, permutation):
    return images[:, permutation]


def image_batch(images, labels, indices):
    """Pixel-by-pixel sequences: (B, T=pixels, 1) with loss at the last step."""
    sel = images[indices]
    b, t = sel.shape
    inputs = sel.reshape(b, t, 1)
    targets = np.zeros((b, t), dtype=np.int64)
    targets[:, -1] = labels[indices]
    mask = np.zeros((b, t), dtype=bool)
    mask[:, -1] = True
    return TaskBatch(inputs=inputs, targets=targets, loss_mask=mask,
                     loss_kind="ce")


# -- character corpus --------------------------------------------------------

UNK = "<unk>"


@dataclass
class CorpusSplit:
    train_ids: np.ndarray
    valid_ids: np.ndarray
    test_ids: np.ndarray
    vocab: dict      # byte value -> index; UNK maps from the key ``UNK``

    @property
    def vocab_size(self):
        return len(self.vocab)

    @property
    def distinct_train_chars(self):
        return len(self.vocab) - 1


def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc
    if not data:
        raise DataError(f"corpus file {path} is empty")
    return data


def load_char_corpus(train_path, valid_path, test_path):
    """Byte-level vocabulary from the training split, with an UNK bucket
    absorbing bytes that appear only in the other splits."""
    train = _read_bytes(train_path)
    valid = _read_bytes(valid_path)
    test = _read_bytes(test_path)
    symbols = sorted(set(train))
    vocab = {s: i for i, s in enumerate(symbols)}
    vocab[UNK] = len(vocab)
    unk = vocab[UNK]
    table = np.full(256, unk, dtype=np.int64)
    for s, i in vocab.items():
        if s != UNK:
            table[s] = i

    def encode(data):
        return table[np.frombuffer(data, dtype=np.uint8)]

    return CorpusSplit(train_ids=encode(train), valid_ids=encode(valid),
                       test_ids=encode(test), vocab=vocab)


def bits_per_char(nats):
    return nats / np.log(2.0)


def window_batches(ids, batch_size, window):
    """Contiguous-stream windows for truncated BPTT.

    The stream is cut into ``batch_size`` contiguous chunks (dropping the
    ragged tail); each yielded item is (inputs, targets, is_start) where
    targets are inputs shifted by one.  Within an epoch the input columns
    tile [0, chunk_len - 1) exactly once, so hidden state carried between
    consecutive windows lines up with the stream.
    """
    if batch_size < 1 or window < 1:
        raise ValueError("batch_size and window must be >= 1")
    chunk = len(ids) // batch_size
    if chunk < 2:
        raise DataError(
            f"corpus too small: {len(ids)} ids for batch size {batch_size}")
    grid = np.asarray(ids[:chunk * batch_size]).reshape(batch_size, chunk)
    for start in range(0, chunk - 1, window):
        end = min(start + window, chunk - 1)
        yield grid[:, start:end], grid[:, start + 1:end + 1], start == 0


def char_window_batch(x_ids, y_ids, vocab_size):
    """One-hot encode a window into a classification TaskBatch."""
    b, t = x_ids.shape
    inputs = np.zeros((b, t, vocab_size))
    rows = np.arange(b)[:, None]
    cols = np.arange(t)[None, :]
    inputs[rows, cols, x_ids] = 1.0
    mask = np.ones((b, t), dtype=bool)
    return TaskBatch(inputs=inputs, targets=y_ids.astype(np.int64),
                     loss_mask=mask, loss_kind="ce")
