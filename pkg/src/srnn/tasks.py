"""Benchmark data: copy and adding generators, MNIST IDX files, character corpora."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .matcore import Rng
from .rnncell import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# 26 letters, 10 digits, space, 11 punctuation marks, unknown placeholder
UNKNOWN_CHAR = "\x00"
VOCABULARY = "abcdefghijklmnopqrstuvwxyz0123456789 .,;:'\"?!-()" + UNKNOWN_CHAR
CHAR_INDEX = {c: i for i, c in enumerate(VOCABULARY)}
assert len(VOCABULARY) == 49


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CopySpec:
    T: int
    n_copy: int = 10
    n_symbols: int = 8

    @property
    def n_categories(self) -> int:
        return self.n_symbols + 2  # blank, symbols, delimiter

    @property
    def length(self) -> int:
        return self.T + 2 * self.n_copy

    @property
    def delimiter(self) -> int:
        return self.n_symbols + 1


@dataclass(frozen=True)
class AddingSpec:
    T: int


def one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(indices.shape + (k,))
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return out


def gen_copy_batch(spec: CopySpec, batch: int, rng: Rng, copy_positions_only: bool = False) -> Batch:
    """Copy-task minibatch.

    The first ``n_copy`` steps carry symbols 1..p, the delimiter sits at step
    T, and the targets are blank (0) except on the last ``n_copy`` steps,
    which repeat the leading symbols.
    """
    if spec.T < spec.n_copy:
        # the delimiter at step T would overwrite one of the leading symbols
        raise ValueError(f"T must be >= n_copy ({spec.n_copy}), got {spec.T}")
    L, k = spec.length, spec.n_copy
    symbols = rng.integers(1, spec.n_symbols + 1, size=(k, batch))
    seq = np.zeros((L, batch), dtype=np.int64)
    seq[:k] = symbols
    seq[spec.T] = spec.delimiter
    targets = np.zeros((L, batch), dtype=np.int64)
    targets[-k:] = symbols
    if copy_positions_only:
        mask = np.zeros(L)
        mask[-k:] = 1.0
    else:
        mask = np.ones(L)
    return Batch(one_hot(seq, spec.n_categories), targets, mask)


def gen_adding_batch(spec: AddingSpec, batch: int, rng: Rng) -> Batch:
    """Adding-task minibatch; the target (final step only) is the sum of the two marked values."""
    T = spec.T
    if T < 2:
        raise ValueError("T must be >= 2")
    half = T // 2
    values = rng.uniform((T, batch))
    first = rng.integers(0, half, size=batch)
    second = rng.integers(half, T, size=batch)
    marks = np.zeros((T, batch))
    cols = np.arange(batch)
    marks[first, cols] = 1.0
    marks[second, cols] = 1.0
    inputs = np.stack([values, marks], axis=-1)
    targets = np.zeros((T, batch, 1))
    targets[-1, :, 0] = values[first, cols] + values[second, cols]
    mask = np.zeros(T)
    mask[-1] = 1.0
    return Batch(inputs, targets, mask)


def _read_idx(path) -> tuple[int, tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    expected = int(np.prod(dims))
    if len(body) < expected:
        raise DataFormatError(f"{path}: truncated data ({len(body)} of {expected} bytes)")
    return magic, dims, body[:expected]


@dataclass
class MnistData:
    images: np.ndarray   # (N, 784) in [0, 1]
    labels: np.ndarray   # (N,) ints

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "MnistData":
        return MnistData(self.images[idx], self.labels[idx])


def load_mnist_idx(images_path, labels_path) -> MnistData:
    """Parse an IDX image/label file pair (optionally gzip-compressed)."""
    magic, dims, body = _read_idx(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    images = np.frombuffer(body, dtype=np.uint8).reshape(dims[0], -1).astype(np.float64) / 255.0
    magic, ldims, lbody = _read_idx(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad label magic 0x{magic:08x}")
    labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    if ldims[0] != dims[0]:
        raise DataFormatError(f"{dims[0]} images but {ldims[0]} labels")
    return MnistData(images, labels)


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels as IDX (gzip if the name ends in .gz)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()
    for path, data in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def pixel_permutation(seed: int, n_pixels: int = 784) -> np.ndarray:
    return Rng(seed).permutation(n_pixels)


def sequentialize_mnist(data: MnistData, permutation_seed: int | None = None):
    """Turn images into one-pixel-per-step sequences.

    Returns ``(sequences, labels, perm)`` with sequences shaped ``(784, N, 1)``;
    ``perm`` is None when no permutation is applied.
    """
    perm = None
    X = data.images
    if permutation_seed is not None:
        perm = pixel_permutation(permutation_seed, X.shape[1])
        X = X[:, perm]
    return np.ascontiguousarray(X.T[..., None]), data.labels, perm


def mnist_batches(sequences: np.ndarray, labels: np.ndarray, batch: int, rng: Rng | None = None):
    """Yield classification batches; the target sits on the final step only."""
    N = labels.shape[0]
    order = rng.permutation(N) if rng is not None else np.arange(N)
    T = sequences.shape[0]
    for start in range(0, N, batch):
        idx = order[start:start + batch]
        targets = np.zeros((T, len(idx)), dtype=np.int64)
        targets[-1] = labels[idx]
        mask = np.zeros(T)
        mask[-1] = 1.0
        yield Batch(sequences[:, idx], targets, mask)


def encode_text(text: str) -> np.ndarray:
    unk = CHAR_INDEX[UNKNOWN_CHAR]
    return np.array([CHAR_INDEX.get(c, unk) for c in text.lower()], dtype=np.int64)


def decode_indices(indices) -> str:
    return "".join(VOCABULARY[i] for i in indices)


@dataclass
class CharCorpus:
    sequences: list[np.ndarray]
    max_len: int

    vocabulary = VOCABULARY

    def __len__(self):
        return len(self.sequences)

    def split(self, val_fraction: float = 0.05) -> tuple["CharCorpus", "CharCorpus"]:
        """Deterministic split by a hash of each line's content."""
        train, val = [], []
        for seq in self.sequences:
            h = int.from_bytes(hashlib.sha1(seq.tobytes()).digest()[:4], "big")
            (val if h / 2 ** 32 < val_fraction else train).append(seq)
        return CharCorpus(train, self.max_len), CharCorpus(val, self.max_len)


def load_char_corpus(path, max_len: int = 75) -> CharCorpus:
    """One sentence per line; lines longer than ``max_len`` and lines shorter
    than two characters (no prediction pair) are dropped."""
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataFormatError(f"cannot read corpus {path}: {exc}") from exc
    seqs = []
    for line in text.splitlines():
        line = line.strip("\r\n")
        if len(line) < 2 or len(line) > max_len:
            continue
        seqs.append(encode_text(line))
    if not seqs:
        raise DataFormatError(f"{path}: no usable lines with length <= {max_len}")
    return CharCorpus(seqs, max_len)


def char_pairs(seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inputs and next-character targets for one sentence."""
    return seq[:-1], seq[1:]


def char_batches(corpus: CharCorpus, batch: int, rng: Rng | None = None):
    """Length-bucketed, zero-padded minibatches; padding steps carry zero loss weight."""
    k = len(VOCABULARY)
    order = np.arange(len(corpus))
    if rng is not None:
        order = rng.permutation(len(corpus))
    # sort a shuffled order by length so buckets hold similar lengths
    lengths = np.array([len(corpus.sequences[i]) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    chunks = [order[i:i + batch] for i in range(0, len(order), batch)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for idx in chunks:
        T = max(len(corpus.sequences[i]) for i in idx) - 1
        inp = np.zeros((T, len(idx)), dtype=np.int64)
        tgt = np.zeros((T, len(idx)), dtype=np.int64)
        mask = np.zeros((T, len(idx)))
        for j, i in enumerate(idx):
            x, y = char_pairs(corpus.sequences[i])
            inp[:len(x), j] = x
            tgt[:len(y), j] = y
            mask[:len(x), j] = 1.0
        yield Batch(one_hot(inp, k), tgt, mask)
