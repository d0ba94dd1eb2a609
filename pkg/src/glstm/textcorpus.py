"""Tokenization, vocabularies, TF-IDF vectors and dataset ingestion."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from glstm.errors import (
    BadInputError,
    DimensionMismatchError,
    MalformedManifestError,
    MissingFileError,
)

END = "<end>"
UNK = "<unk>"
SPLITS = ("train", "val", "test")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and return its maximal ``[a-z0-9]`` runs."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> index map. Words come first, then END, then UNK."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if len(set(words)) != len(words):
            raise BadInputError("duplicate tokens in vocabulary")
        if END in words or UNK in words:
            raise BadInputError("reserved tokens cannot be vocabulary words")
        self.itos: list[str] = words + [END, UNK]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        self.end = self.stoi[END]
        self.unk = self.stoi[UNK]
        self._word_index = {t: i for i, t in enumerate(words)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def words(self) -> list[str]:
        return self.itos[:-2]

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._word_index.get(t, self.unk) for t in tokens] + [self.end]

    def decode(self, indices: Iterable[int]) -> list[str]:
        """Map indices back to tokens, stopping at the first END."""
        out = []
        for i in indices:
            if i == self.end:
                break
            out.append(self.itos[i])
        return out


def build_vocab(captions: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Vocabulary over tokens seen at least ``min_count`` times.

    Indices go by descending frequency, ties broken lexicographically.
    """
    counts: Counter = Counter()
    n = 0
    for tokens in captions:
        counts.update(tokens)
        n += 1
    if n == 0:
        raise BadInputError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode(tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    return vocab.encode(tokens)


def decode(indices: Iterable[int], vocab: Vocabulary) -> list[str]:
    return vocab.decode(indices)


class TfIdfVectorizer:
    """TF-IDF bag of words over a fixed guidance vocabulary.

    tf is the raw count, idf is the smoothed ``ln((1+N)/(1+df)) + 1``;
    vectors are L2-normalized unless all-zero.
    """

    def __init__(self, words: Sequence[str], idf, n_docs: int):
        self.words = list(words)
        self.column = {w: j for j, w in enumerate(self.words)}
        self.idf = np.asarray(idf, dtype=np.float64)
        self.n_docs = int(n_docs)
        if self.idf.shape != (len(self.words),):
            raise BadInputError("idf length does not match guidance vocabulary")

    @property
    def dim(self) -> int:
        return len(self.words)

    def counts(self, tokens: Iterable[str]) -> np.ndarray:
        out = np.zeros(self.dim)
        for t in tokens:
            j = self.column.get(t)
            if j is not None:
                out[j] += 1.0
        return out

    def vectorize(self, text) -> np.ndarray:
        tokens = tokenize(text) if isinstance(text, str) else text
        v = self.counts(tokens) * self.idf
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v


def fit_tfidf(documents: Iterable[Sequence[str]], vocab_size: int) -> TfIdfVectorizer:
    """Keep the ``vocab_size`` tokens with the highest document frequency."""
    df: Counter = Counter()
    n = 0
    for doc in documents:
        tokens = tokenize(doc) if isinstance(doc, str) else doc
        df.update(set(tokens))
        n += 1
    if n == 0:
        raise BadInputError("cannot fit TF-IDF on zero documents")
    words = sorted(df, key=lambda t: (-df[t], t))[:vocab_size]
    idf = [math.log((1 + n) / (1 + df[w])) + 1.0 for w in words]
    return TfIdfVectorizer(words, idf, n)


# --- dataset ingestion ------------------------------------------------------

FEATURE_MAGIC = b"GLSF"


@dataclass
class CorpusItem:
    image_id: str
    feature: np.ndarray
    captions: list[list[str]]
    split: str
    texts: list[str] = field(default_factory=list)


@dataclass
class Corpus:
    items: list[CorpusItem]
    feature_dim: int

    def split(self, name: str) -> "Corpus":
        return Corpus([it for it in self.items if it.split == name], self.feature_dim)

    def captions(self) -> list[list[str]]:
        return [c for it in self.items for c in it.captions]

    def by_id(self) -> dict[str, CorpusItem]:
        return {it.image_id: it for it in self.items}

    def __len__(self) -> int:
        return len(self.items)


def write_features_binary(path, matrix) -> None:
    from glstm.container import atomic_write_bytes

    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    rows, cols = m.shape
    data = FEATURE_MAGIC + struct.pack("<III", 1, rows, cols) + m.astype("<f4").tobytes()
    atomic_write_bytes(path, data)


def write_features_csv(path, matrix) -> None:
    from glstm.container import atomic_write_text

    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    atomic_write_text(path, "".join(",".join(repr(float(x)) for x in row) + "\n" for row in m))


def load_features(path, item_id=None) -> np.ndarray:
    """Read a feature matrix from a GLSF binary file or a CSV file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"feature file not found: {path}", item_id) from exc
    except OSError as exc:
        raise MissingFileError(f"cannot read feature file {path}: {exc}", item_id) from exc
    if data[:4] == FEATURE_MAGIC:
        if len(data) < 16:
            raise MalformedManifestError(f"truncated feature file {path}", item_id)
        version, rows, cols = struct.unpack("<III", data[4:16])
        if version != 1:
            raise MalformedManifestError(f"unsupported feature file version {version}", item_id)
        if len(data) != 16 + 4 * rows * cols:
            raise MalformedManifestError(f"feature file {path} has wrong payload size", item_id)
        return np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64).reshape(rows, cols)
    try:
        rows = [[float(x) for x in row] for row in csv.reader(data.decode("utf-8").splitlines()) if row]
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedManifestError(f"unparseable feature file {path}: {exc}", item_id) from exc
    if not rows:
        raise MalformedManifestError(f"empty feature file {path}", item_id)
    if len({len(r) for r in rows}) != 1:
        raise DimensionMismatchError(f"ragged rows in feature file {path}", item_id)
    m = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise MalformedManifestError(f"non-finite values in {path}", item_id)
    return m


def load_manifest(path) -> Corpus:
    """Load a JSON manifest into a :class:`Corpus`.

    Each item names its feature either with ``feature_file`` (a one-row file)
    or ``feature_row`` (a row of the manifest-level ``feature_file``).
    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingFileError(f"manifest not found: {path}") from exc
    except OSError as exc:
        raise MissingFileError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict) or "items" not in doc or "feature_dim" not in doc:
        raise MalformedManifestError("manifest needs 'feature_dim' and 'items'")
    dim = doc["feature_dim"]
    if not isinstance(dim, int) or dim < 1:
        raise MalformedManifestError("'feature_dim' must be a positive integer")
    base = path.parent
    shared = None
    if "feature_file" in doc:
        shared = load_features(base / doc["feature_file"])
        if shared.shape[1] != dim:
            raise DimensionMismatchError(
                f"shared feature file has {shared.shape[1]} columns, feature_dim is {dim}"
            )

    items = []
    seen = set()
    for k, entry in enumerate(doc["items"]):
        if not isinstance(entry, dict) or "id" not in entry:
            raise MalformedManifestError(f"item #{k} lacks an 'id'")
        item_id = str(entry["id"])
        if item_id in seen:
            raise MalformedManifestError("duplicate id", item_id)
        seen.add(item_id)
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise MalformedManifestError(f"unknown split {split!r}", item_id)
        texts = entry.get("captions")
        if not isinstance(texts, list) or not texts or not all(isinstance(t, str) for t in texts):
            raise MalformedManifestError("'captions' must be a non-empty list of strings", item_id)
        if "feature_file" in entry:
            m = load_features(base / entry["feature_file"], item_id)
            if m.shape[0] != 1:
                raise DimensionMismatchError(f"feature file holds {m.shape[0]} rows, expected 1", item_id)
            feature = m[0]
        elif "feature_row" in entry:
            if shared is None:
                raise MalformedManifestError("'feature_row' given but manifest has no 'feature_file'", item_id)
            row = entry["feature_row"]
            if not isinstance(row, int) or not 0 <= row < shared.shape[0]:
                raise MalformedManifestError(f"feature_row {row!r} out of range", item_id)
            feature = shared[row].copy()
        else:
            raise MalformedManifestError("item needs 'feature_file' or 'feature_row'", item_id)
        if feature.shape[0] != dim:
            raise DimensionMismatchError(
                f"feature has {feature.shape[0]} values, feature_dim is {dim}", item_id
            )
        items.append(CorpusItem(item_id, feature, [tokenize(t) for t in texts], split, list(texts)))
    return Corpus(items, dim)
