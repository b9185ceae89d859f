"""Category meta-graph: word-vector cosine adjacency and its row-normalized
propagation matrix, plus the uniform-random ablation variant."""

from __future__ import annotations

import importlib.resources
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CategorySet",
    "MetaGraph",
    "WordEmbeddingTable",
    "AliasError",
    "DegenerateGraphError",
    "EmbeddingFormatError",
    "EmbeddingLookupError",
    "VOC_CATEGORIES",
    "NOVEL_SPLITS",
    "build_adjacency",
    "bundled_embeddings_path",
    "category_token",
    "load_aliases",
    "load_embeddings",
    "random_adjacency",
    "row_normalize",
    "subgraph",
    "voc_category_set",
    "write_adjacency_csv",
]

# Canonical short names, in the usual reporting order.
VOC_CATEGORIES = (
    "aero", "bike", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "table", "dog", "horse", "mbike", "person", "plant", "sheep", "sofa", "train", "tv",
)

NOVEL_SPLITS = {
    1: frozenset({"bird", "bus", "cow", "mbike", "sofa"}),
    2: frozenset({"aero", "bottle", "cow", "horse", "sofa"}),
    3: frozenset({"boat", "cat", "mbike", "sheep", "sofa"}),
}


class EmbeddingFormatError(ValueError):
    """A word-vector stream violated the one-token-plus-floats line format."""


class EmbeddingLookupError(KeyError):
    """A requested token has no stored vector."""


class AliasError(KeyError):
    """A category name has no entry in the alias table."""


class DegenerateGraphError(ValueError):
    """A row of the adjacency matrix has nonpositive sum."""


class WordEmbeddingTable:
    """Token-to-vector map with one fixed dimension for every entry."""

    def __init__(self, dim: int):
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, token: str) -> bool:
        return token in self._vectors

    def add(self, token: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise EmbeddingFormatError(
                f"vector for '{token}' has length {vector.shape[0]}, table dimension is {self.dim}")
        if float(np.linalg.norm(vector)) == 0.0:
            raise EmbeddingFormatError(f"zero-norm vector for token '{token}'")
        self._vectors[token] = vector

    def vector(self, token: str) -> np.ndarray:
        try:
            return self._vectors[token]
        except KeyError:
            raise EmbeddingLookupError(f"no vector stored for token '{token}'") from None

    def tokens(self) -> list[str]:
        return sorted(self._vectors)


def load_embeddings(source: Iterable[str], vocabulary: "set[str] | None" = None) -> WordEmbeddingTable:
    """Parse a line-oriented word-vector stream into a table.

    Each line carries a token followed by whitespace-separated floats; the
    dimension is inferred from the first data line and must stay consistent.
    ``vocabulary`` restricts which tokens are stored.
    """
    table: WordEmbeddingTable | None = None
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        token, values = parts[0], parts[1:]
        if not values:
            raise EmbeddingFormatError(f"line {lineno}: no values after token '{token}'")
        try:
            vector = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise EmbeddingFormatError(f"line {lineno}: {exc}") from None
        if table is None:
            table = WordEmbeddingTable(dim=vector.shape[0])
        elif vector.shape[0] != table.dim:
            raise EmbeddingFormatError(
                f"line {lineno}: vector of length {vector.shape[0]} in a "
                f"{table.dim}-dimensional table")
        if vocabulary is not None and token not in vocabulary:
            continue
        try:
            table.add(token, vector)
        except EmbeddingFormatError as exc:
            raise EmbeddingFormatError(f"line {lineno}: {exc}") from None
    if table is None:
        raise EmbeddingFormatError("empty embedding stream")
    return table


def _data_path(name: str):
    return importlib.resources.files("protodet").joinpath("data", name)


def bundled_embeddings_path() -> str:
    """Path of the word-vector table shipped with the package."""
    return str(_data_path("category_vectors.txt"))


_ALIAS_CACHE: dict[str, dict[str, str]] = {}


def load_aliases(path: "str | None" = None) -> dict[str, str]:
    """Load the category-name to embedding-token table (a versioned data file)."""
    key = path or "__bundled__"
    cached = _ALIAS_CACHE.get(key)
    if cached is not None:
        return cached
    text = (_data_path("aliases.txt").read_text() if path is None
            else open(path, encoding="utf-8").read())
    aliases: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, token = line.split()
        aliases[name] = token
    _ALIAS_CACHE[key] = aliases
    return aliases


def category_token(name: str, aliases: "dict[str, str] | None" = None) -> str:
    """Map a category name to its word-vector token."""
    table = aliases if aliases is not None else load_aliases()
    try:
        return table[name]
    except KeyError:
        known = ", ".join(sorted(table))
        raise AliasError(f"unknown category name '{name}'; known names: {known}") from None


@dataclass(frozen=True)
class CategorySet:
    """Ordered category names with a base/novel designation per name."""

    names: tuple[str, ...]
    novel: frozenset[str] = field(default_factory=frozenset)
    split_id: "int | None" = None

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("category names must be unique")
        unknown = self.novel - set(self.names)
        if unknown:
            raise ValueError(f"novel designation for absent categories: {sorted(unknown)}")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def is_novel(self, name: str) -> bool:
        return name in self.novel

    @property
    def base_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n not in self.novel)

    @property
    def novel_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n in self.novel)

    @property
    def base_indices(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.names) if n not in self.novel)

    @property
    def novel_indices(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.names) if n in self.novel)

    def base_only(self) -> "CategorySet":
        return CategorySet(self.base_names, frozenset(), self.split_id)


def voc_category_set(split_id: int) -> CategorySet:
    """The 20 VOC categories for one base/novel split, base names first.

    Base-first ordering keeps base category indices stable between the
    base-training phase and the fine-tuning phase.
    """
    try:
        novel = NOVEL_SPLITS[split_id]
    except KeyError:
        raise ValueError(f"split id must be 1, 2 or 3, got {split_id}") from None
    base = tuple(n for n in VOC_CATEGORIES if n not in novel)
    ordered = base + tuple(n for n in VOC_CATEGORIES if n in novel)
    return CategorySet(ordered, novel, split_id)


@dataclass(frozen=True)
class MetaGraph:
    """Symmetric category-similarity adjacency plus its row-stochastic form."""

    adjacency: np.ndarray
    propagation: np.ndarray
    categories: CategorySet


def row_normalize(adjacency: np.ndarray) -> np.ndarray:
    """Divide each row by its sum, turning the adjacency row-stochastic."""
    sums = adjacency.sum(axis=1)
    if np.any(sums <= 0):
        bad = int(np.argmin(sums))
        raise DegenerateGraphError(f"row {bad} of adjacency sums to {sums[bad]}")
    return adjacency / sums[:, None]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b) / (float(np.linalg.norm(a)) * float(np.linalg.norm(b)))


def build_adjacency(table: WordEmbeddingTable, cats: CategorySet,
                    aliases: "dict[str, str] | None" = None) -> MetaGraph:
    """Cosine-similarity meta-graph over the categories' word vectors.

    Negative cosines are clamped to 0 so the degree normalization stays
    stochastic; each unordered pair is computed once, making the matrix
    symmetric bitwise. The diagonal is 1 (self-similarity).
    """
    if len(cats) == 0:
        raise ValueError("empty category set")
    vectors = [table.vector(category_token(name, aliases)) for name in cats.names]
    n = len(cats)
    adjacency = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim = max(0.0, _cosine(vectors[i], vectors[j]))
            adjacency[i, j] = sim
            adjacency[j, i] = sim
    return MetaGraph(adjacency, row_normalize(adjacency), cats)


def random_adjacency(cats: CategorySet, seed: int) -> MetaGraph:
    """Ablation meta-graph: symmetric uniform(0,1) off-diagonal entries."""
    n = len(cats)
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.uniform(0.0, 1.0, size=(n, n)), k=1)
    adjacency = upper + upper.T + np.eye(n)
    return MetaGraph(adjacency, row_normalize(adjacency), cats)


def subgraph(graph: MetaGraph, names: Sequence[str]) -> MetaGraph:
    """Restrict a meta-graph to a subset of its categories, re-normalizing rows."""
    idx = [graph.categories.index(n) for n in names]
    sub = graph.adjacency[np.ix_(idx, idx)]
    cats = CategorySet(tuple(names),
                       graph.categories.novel & set(names),
                       graph.categories.split_id)
    return MetaGraph(sub, row_normalize(sub), cats)


def write_adjacency_csv(path: str, matrix: np.ndarray, cats: CategorySet) -> None:
    """CSV export: header of category names, then one full-precision row per category."""
    lines = [",".join(cats.names)]
    for r_data in matrix:
        lines.append(",".join(f"{v:.17g}" for v in r_data))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
