"""Attribute schema, text-embedding bank, and the clinical knowledge table.

The eight attribute aspects describe the imaging appearance of a lesion.
Every (aspect, value) pair gets one text embedding; an extra background
embedding represents "no lesion found".  A disease is identified at inference
time by scoring a predicted attribute assignment against the knowledge table.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping, Sequence

import numpy as np
import yaml

from .errors import FormatError, ProviderError, SchemaError, UnknownValueError

ASPECTS = (
    "Location",
    "Shape",
    "Density",
    "Density Variations",
    "Surface Characteristics",
    "Enhancement Status",
    "Relationship with Surrounding Organs",
    "Specific Features",
)

BACKGROUND_ID = 0

_BANK_MAGIC = b"MLNB"
_BANK_VERSION = 1


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered aspects plus the value vocabulary of each aspect."""

    aspects: tuple[str, ...]
    vocab: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        if len(self.aspects) != len(ASPECTS):
            raise SchemaError(
                f"expected {len(ASPECTS)} aspects, got {len(self.aspects)}"
            )
        for aspect in self.aspects:
            values = self.vocab.get(aspect)
            if not values:
                raise SchemaError(f"aspect {aspect!r} has no vocabulary")
            if len(set(values)) != len(values):
                raise SchemaError(f"duplicate values under aspect {aspect!r}")

    @property
    def num_descriptions(self) -> int:
        return sum(len(self.vocab[a]) for a in self.aspects)

    def pairs(self) -> list[tuple[str, str]]:
        """All (aspect, value) pairs in canonical order."""
        return [(a, v) for a in self.aspects for v in self.vocab[a]]

    def hash(self) -> str:
        payload = json.dumps(
            {a: list(self.vocab[a]) for a in self.aspects}, sort_keys=False
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def validate_value(self, aspect: str, value: str) -> None:
        if aspect not in self.vocab or value not in self.vocab[aspect]:
            raise UnknownValueError(f"({aspect!r}, {value!r}) not in schema")


def description_text(aspect: str, value: str) -> str:
    """Surface form fed to the text-embedding provider."""
    return f"{aspect}: {value}"


def load_schema(path) -> AttributeSchema:
    with open(path, "r") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict) or "aspects" not in raw:
        raise SchemaError(f"{path}: missing top-level 'aspects' list")
    aspects, vocab = [], {}
    for entry in raw["aspects"]:
        try:
            name, values = entry["name"], entry["values"]
        except (TypeError, KeyError) as exc:
            raise SchemaError(f"{path}: malformed aspect entry {entry!r}") from exc
        aspects.append(name)
        vocab[name] = tuple(str(v) for v in values)
    return AttributeSchema(aspects=tuple(aspects), vocab=vocab)


def default_schema() -> AttributeSchema:
    with resources.as_file(
        resources.files("malenia.data") / "attribute_schema.yaml"
    ) as p:
        return load_schema(p)


def validate_report(schema: AttributeSchema, report: Mapping[str, str]) -> None:
    """A report must carry exactly one in-vocabulary value per aspect."""
    for aspect in schema.aspects:
        if aspect not in report:
            raise UnknownValueError(f"report missing aspect {aspect!r}")
        schema.validate_value(aspect, report[aspect])


class HashedSubwordProvider:
    """Deterministic text embedder built on hashed character n-grams.

    Stands in for a clinical language model: same interface (text -> fixed-dim
    vector), fully reproducible, no external weights.  `calls` counts every
    embed invocation so inference paths can be audited for provider use.
    """

    def __init__(self, dim: int = 64, seed: int = 0, ngram: int = 3):
        if dim <= 0:
            raise ProviderError("embedding dimension must be positive")
        self.dim = dim
        self.seed = seed
        self.ngram = ngram
        self.calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.calls += 1
        if not text:
            raise ProviderError("cannot embed empty description")
        vec = np.zeros(self.dim, dtype=np.float64)
        padded = f"#{text.lower()}#"
        for i in range(len(padded) - self.ngram + 1):
            gram = padded[i : i + self.ngram]
            digest = hashlib.blake2b(
                gram.encode(), key=str(self.seed).encode(), digest_size=8
            ).digest()
            h = int.from_bytes(digest, "little")
            idx = h % self.dim
            sign = 1.0 if (h >> 32) & 1 else -1.0
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ProviderError(f"degenerate embedding for {text!r}")
        return (vec / norm).astype(np.float32)


class RandomLinearProjection:
    """Seeded fixed linear map provider-dim -> C with a background vector.

    A plain-numpy stand-in for the trainable projection used during training;
    handy for building banks in tests and data-only workflows.
    """

    def __init__(self, in_dim: int, out_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((in_dim, out_dim)).astype(np.float32)
        self.weight /= np.sqrt(in_dim)
        self.background_vector = rng.standard_normal(out_dim).astype(np.float32)

    def __call__(self, matrix: np.ndarray) -> np.ndarray:
        return np.asarray(matrix, dtype=np.float32) @ self.weight


@dataclass
class EmbeddingBank:
    """Stored text embeddings: row 0 is the background vector, rows 1..R the
    attribute descriptions in schema order."""

    vectors: np.ndarray  # (R+1, C) float32
    index: dict[tuple[str, str], int]
    schema_hash: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.vectors)):
            raise SchemaError("bank vectors must be finite")
        if len(self.index) != self.vectors.shape[0] - 1:
            raise SchemaError("index size does not match vector count")

    @property
    def num_descriptions(self) -> int:
        return self.vectors.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, aspect: str, value: str) -> int:
        try:
            return self.index[(aspect, value)]
        except KeyError:
            raise UnknownValueError(f"({aspect!r}, {value!r}) not in bank") from None

    def ids_for_aspect(self, aspect: str) -> list[int]:
        return [i for (a, _v), i in self.index.items() if a == aspect]

    def value_of(self, embedding_id: int) -> tuple[str, str]:
        for key, i in self.index.items():
            if i == embedding_id:
                return key
        raise UnknownValueError(f"no description with id {embedding_id}")


def embed_descriptions(
    schema: AttributeSchema,
    provider,
    projection: Callable[[np.ndarray], np.ndarray],
) -> EmbeddingBank:
    """Embed every (aspect, value) description and project to the token dim.

    `projection` must be callable on an (R, D) matrix and expose a
    `background_vector` attribute supplying the "no lesion found" embedding.
    """
    pairs = schema.pairs()
    raws = []
    for aspect, value in pairs:
        text = description_text(aspect, value)
        try:
            raws.append(np.asarray(provider.embed(text), dtype=np.float32))
        except ProviderError:
            raise
        except Exception as exc:  # provider misbehaviour carries the text along
            raise ProviderError(f"provider failed on {text!r}: {exc}") from exc
    projected = np.asarray(projection(np.stack(raws)), dtype=np.float32)
    background = np.asarray(projection.background_vector, dtype=np.float32)
    if projected.ndim != 2 or projected.shape[0] != len(pairs):
        raise SchemaError("projection returned wrong shape")
    if background.shape != (projected.shape[1],):
        raise SchemaError("background vector dimension mismatch")
    vectors = np.concatenate([background[None, :], projected], axis=0)
    index = {pair: i + 1 for i, pair in enumerate(pairs)}
    return EmbeddingBank(vectors=vectors, index=index, schema_hash=schema.hash())


def save_bank(bank: EmbeddingBank, path) -> None:
    index_json = json.dumps(
        [[a, v, i] for (a, v), i in bank.index.items()]
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<I", _BANK_VERSION))
        fh.write(struct.pack("<64s", bank.schema_hash.encode()))
        fh.write(struct.pack("<II", bank.num_descriptions, bank.dim))
        fh.write(struct.pack("<I", len(index_json)))
        fh.write(index_json)
        fh.write(np.ascontiguousarray(bank.vectors, dtype="<f4").tobytes())


def load_bank(path, expected_schema_hash: str | None = None) -> EmbeddingBank:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:4] != _BANK_MAGIC:
            raise FormatError(f"{path}: bad magic {blob[:4]!r}")
        version = struct.unpack_from("<I", blob, 4)[0]
        if version != _BANK_VERSION:
            raise FormatError(f"{path}: unsupported bank version {version}")
        schema_hash = struct.unpack_from("<64s", blob, 8)[0].decode()
        r, c = struct.unpack_from("<II", blob, 72)
        n_idx = struct.unpack_from("<I", blob, 80)[0]
        index_raw = json.loads(blob[84 : 84 + n_idx])
        data = blob[84 + n_idx :]
        vectors = np.frombuffer(data, dtype="<f4", count=(r + 1) * c)
        vectors = vectors.reshape(r + 1, c).copy()
    except (struct.error, ValueError, IndexError) as exc:
        raise FormatError(f"{path}: truncated or corrupt bank file") from exc
    if expected_schema_hash is not None and schema_hash != expected_schema_hash:
        raise FormatError(
            f"{path}: bank built against schema {schema_hash[:12]}..., "
            f"expected {expected_schema_hash[:12]}..."
        )
    index = {(a, v): i for a, v, i in index_raw}
    return EmbeddingBank(vectors=vectors, index=index, schema_hash=schema_hash)


@dataclass
class KnowledgeTable:
    """Ordered disease rows; each row maps aspects to admissible values."""

    rows: list[tuple[str, dict[str, frozenset[str]]]]
    schema: AttributeSchema = field(repr=False, default=None)

    def __post_init__(self):
        names = [name for name, _ in self.rows]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate disease names in knowledge table")
        if self.schema is not None:
            for name, admissible in self.rows:
                for aspect, values in admissible.items():
                    for value in values:
                        try:
                            self.schema.validate_value(aspect, value)
                        except UnknownValueError as exc:
                            raise SchemaError(f"row {name!r}: {exc}") from exc

    @property
    def diseases(self) -> list[str]:
        return [name for name, _ in self.rows]


def load_knowledge_table(path, schema: AttributeSchema) -> KnowledgeTable:
    with open(path, "r") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict) or "diseases" not in raw:
        raise SchemaError(f"{path}: missing top-level 'diseases' list")
    rows = []
    for entry in raw["diseases"]:
        admissible = {
            aspect: frozenset(values)
            for aspect, values in entry["attributes"].items()
        }
        rows.append((entry["name"], admissible))
    return KnowledgeTable(rows=rows, schema=schema)


def default_knowledge_table(schema: AttributeSchema | None = None) -> KnowledgeTable:
    schema = schema or default_schema()
    with resources.as_file(
        resources.files("malenia.data") / "knowledge_table.yaml"
    ) as p:
        return load_knowledge_table(p, schema)


def query_disease(
    assignment: Mapping[str, str], table: KnowledgeTable
) -> list[tuple[str, int]]:
    """Rank diseases by how many assigned aspect values each row admits.

    Ties keep table row order; the top entry is the identification.
    """
    if table.schema is not None:
        for aspect, value in assignment.items():
            table.schema.validate_value(aspect, value)
    scored = []
    for name, admissible in table.rows:
        score = sum(
            1
            for aspect, value in assignment.items()
            if value in admissible.get(aspect, ())
        )
        scored.append((name, score))
    # stable sort preserves row order among equal scores
    return sorted(scored, key=lambda item: -item[1])
