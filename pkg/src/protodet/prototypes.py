"""Category prototypes: support pooling, two-layer graph-convolution
refinement with a residual path, and the skip-connected meta-classifier."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .graph import MetaGraph
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_bias,
    init_bias,
    init_weight,
    matmul,
    mean_scalars,
    relu,
    row,
    scale,
    softmax_cross_entropy,
)

__all__ = [
    "GcnLayer",
    "PrototypeSet",
    "ProtoTransferNet",
    "gcn_forward",
    "meta_logits",
    "meta_loss",
    "pool_support",
    "transfer",
]


@dataclass
class PrototypeSet:
    """Preliminary (pooled) and refined (graph-propagated) prototypes.

    ``refined`` stays None until transfer has run; both matrices are kept
    afterwards because the classifier's skip path still needs the
    preliminary ones.
    """

    preliminary: Tensor
    categories: "object | None" = None
    refined: "Tensor | None" = None


class GcnLayer:
    """One graph-convolution layer: optionally-activated P @ H @ theta."""

    def __init__(self, weights: Tensor, activation: bool = True):
        self.weights = weights
        self.activation = activation

    @classmethod
    def create(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
               activation: bool = True) -> "GcnLayer":
        return cls(init_weight(in_dim, out_dim, rng), activation)


def gcn_forward(h: Tensor, propagation: Tensor, layer: GcnLayer) -> Tensor:
    """Propagate node features over the graph and mix them through the layer."""
    out = matmul(matmul(propagation, h), layer.weights)
    return relu(out) if layer.activation else out


class ProtoTransferNet:
    """The meta-learner head refining pooled prototypes over the meta-graph.

    Two graph-convolution layers with a residual connection around them
    (added before the final activation), plus one linear meta-classifier
    fed both by the refined prototypes and, when the skip connection is
    enabled, by a projection of the preliminary ones.
    """

    def __init__(self, s_dim: int, f_dim: int, n_categories: int,
                 skip: bool = True, rng: "np.random.Generator | None" = None,
                 skip_rng: "np.random.Generator | None" = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.s_dim = s_dim
        self.f_dim = f_dim
        self.n_categories = n_categories
        self.skip = skip
        self.layer1 = GcnLayer.create(s_dim, f_dim, rng, activation=True)
        self.layer2 = GcnLayer.create(f_dim, f_dim, rng, activation=False)
        # identity residual when the widths already agree
        self.res_proj = None if s_dim == f_dim else init_weight(s_dim, f_dim, rng)
        self.w_cls = init_weight(f_dim, n_categories, rng)
        self.b_cls = init_bias(n_categories)
        if skip:
            self.skip_proj = init_weight(s_dim, f_dim, skip_rng if skip_rng is not None else rng)
        else:
            self.skip_proj = None

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "gcn1.weights": self.layer1.weights,
            "gcn2.weights": self.layer2.weights,
            "meta_cls.weights": self.w_cls,
            "meta_cls.bias": self.b_cls,
        }
        if self.res_proj is not None:
            params["residual.weights"] = self.res_proj
        if self.skip_proj is not None:
            params["skip.weights"] = self.skip_proj
        return params

    def extend_categories(self, n_total: int, rng: np.random.Generator) -> "ProtoTransferNet":
        """A copy of this net with fresh classifier columns for new categories.

        Everything category-agnostic is shared by reference; the classifier
        keeps its trained columns for the existing categories and draws new
        ones for the rest, which is how the fine-tuning phase widens the
        meta-classifier from the base categories to the full set.
        """
        if n_total < self.n_categories:
            raise ValueError(f"cannot shrink classifier from {self.n_categories} to {n_total}")
        out = object.__new__(ProtoTransferNet)
        out.s_dim, out.f_dim, out.n_categories, out.skip = \
            self.s_dim, self.f_dim, n_total, self.skip
        out.layer1, out.layer2 = self.layer1, self.layer2
        out.res_proj, out.skip_proj = self.res_proj, self.skip_proj
        n_new = n_total - self.n_categories
        bound = np.sqrt(6.0 / (self.f_dim + n_total))
        new_cols = rng.uniform(-bound, bound, size=(self.f_dim, n_new))
        out.w_cls = Tensor(np.concatenate([self.w_cls.data, new_cols], axis=1),
                           requires_grad=True)
        out.b_cls = Tensor(np.concatenate([self.b_cls.data, np.zeros(n_new)]),
                           requires_grad=True)
        return out


def pool_support(entries: Iterable[tuple[int, np.ndarray]], n_categories: int) -> Tensor:
    """Average per-category support vectors into the preliminary prototypes.

    ``entries`` yields (category index, pooled support feature) pairs; row i
    of the result is the mean of all vectors carrying category i.
    """
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_categories)]
    for cat, vec in entries:
        if not 0 <= cat < n_categories:
            raise ValueError(f"support category {cat} out of range for {n_categories} categories")
        buckets[cat].append(np.asarray(vec, dtype=np.float64))
    missing = [i for i, b in enumerate(buckets) if not b]
    if missing:
        raise ValueError(f"no support entries for categories {missing}")
    rows = np.stack([np.mean(b, axis=0) for b in buckets])
    return Tensor(rows)


def transfer(p0: Tensor, graph: MetaGraph, net: ProtoTransferNet) -> Tensor:
    """Refine preliminary prototypes through the two graph layers.

    The residual path (p0, projected if widths differ) joins the second
    layer's pre-activation; one final ReLU closes the block.
    """
    n = len(graph.categories)
    if p0.shape[0] != n:
        raise ShapeError(
            f"prototype rows {p0.shape[0]} != graph categories {n}")
    propagation = Tensor(graph.propagation)
    h1 = gcn_forward(p0, propagation, net.layer1)
    pre2 = gcn_forward(h1, propagation, net.layer2)
    residual = p0 if net.res_proj is None else matmul(p0, net.res_proj)
    return relu(add(pre2, residual))


def meta_logits(protoset: PrototypeSet, net: ProtoTransferNet) -> tuple[Tensor, "Tensor | None"]:
    """Classifier logits from the refined prototypes and the skip path.

    Both heads share the same linear classifier; the preliminary logits are
    None when the skip connection is disabled.
    """
    if protoset.refined is None:
        raise ValueError("refined prototypes are unbound; run transfer first")
    logits_refined = add_bias(matmul(protoset.refined, net.w_cls), net.b_cls)
    if net.skip_proj is None:
        return logits_refined, None
    projected = matmul(protoset.preliminary, net.skip_proj)
    logits_preliminary = add_bias(matmul(projected, net.w_cls), net.b_cls)
    return logits_refined, logits_preliminary


def meta_loss(logits_refined: Tensor, logits_preliminary: "Tensor | None",
              labels: Sequence[int]) -> Tensor:
    """Cross-entropy over both classifier heads, averaged per category.

    Each prototype row is its own class; the refined-head and skip-head
    terms are averaged per row, then the rows are averaged.
    """
    n = logits_refined.shape[0]
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} logit rows")
    per_row = []
    for i, label in enumerate(labels):
        term = softmax_cross_entropy(row(logits_refined, i), label)
        if logits_preliminary is not None:
            skip_term = softmax_cross_entropy(row(logits_preliminary, i), label)
            term = scale(add(term, skip_term), 0.5)
        per_row.append(term)
    return mean_scalars(per_row)
