"""Vector classifiers built around one cell: linear stems, cell, linear head.

Both cell inputs are independent linear projections of the same feature
vector; the classifier head is a single linear map from the reduced cell
output to class logits. Stems, every edge-op matrix, and the head together
form the inner weight group; the per-edge operation logits form the outer
(architecture) group and live elsewhere.

Weight dicts are keyed ``stem_{i}``, ``{i}->{j}:{op_kind}``, and ``head``;
the same naming scheme is shared by the relaxed network and by discrete
networks instantiated from a genotype, which simply own fewer edge matrices.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor
from .cell import CellSpec, Genotype, cell_forward, discrete_forward, edge_key
from .ops import OP_ORDER, PARAMETERIZED_OPS, init_linear
from .tensor import Value


def _edge_view(weights: Mapping[str, Value]) -> dict[str, dict[str, Value]]:
    view: dict[str, dict[str, Value]] = {}
    for name, value in weights.items():
        if ":" in name:
            edge, _, kind = name.partition(":")
            view.setdefault(edge, {})[kind] = value
    return view


class CellClassifier:
    """Feature rows -> stem projections -> cell -> linear head -> logits."""

    def __init__(self, spec: CellSpec, in_dim: int, n_classes: int):
        if in_dim < 1 or n_classes < 2:
            raise ValueError("need at least one feature and two classes")
        self.spec = spec
        self.in_dim = in_dim
        self.n_classes = n_classes

    def init_weights(self, seed: int) -> dict[str, np.ndarray]:
        """Fresh inner weights for the relaxed network (every edge-op matrix)."""
        rng = np.random.default_rng(seed)
        weights: dict[str, np.ndarray] = {}
        for i in range(self.spec.input_arity):
            weights[f"stem_{i}"] = init_linear(rng, self.in_dim, self.spec.hidden)
        for i, j in self.spec.edges():
            for kind in OP_ORDER:
                if kind in PARAMETERIZED_OPS:
                    weights[f"{edge_key(i, j)}:{kind}"] = init_linear(
                        rng, self.spec.hidden, self.spec.hidden
                    )
        weights["head"] = init_linear(rng, self.spec.output_width(), self.n_classes)
        return weights

    def init_genotype_weights(self, genotype: Genotype, seed: int) -> dict[str, np.ndarray]:
        """Fresh inner weights for a derived architecture (retained edges only)."""
        genotype.validate()
        rng = np.random.default_rng(seed)
        weights: dict[str, np.ndarray] = {}
        for i in range(self.spec.input_arity):
            weights[f"stem_{i}"] = init_linear(rng, self.in_dim, self.spec.hidden)
        for offset, pairs in enumerate(genotype.nodes):
            j = self.spec.input_arity + offset
            for pred, kind in pairs:
                if kind in PARAMETERIZED_OPS:
                    weights[f"{edge_key(pred, j)}:{kind}"] = init_linear(
                        rng, self.spec.hidden, self.spec.hidden
                    )
        weights["head"] = init_linear(rng, self.spec.output_width(), self.n_classes)
        return weights

    def _stem_nodes(self, weights: Mapping[str, Value], features: Value) -> list[Value]:
        return [
            tensor.matmul(features, weights[f"stem_{i}"])
            for i in range(self.spec.input_arity)
        ]

    def logits_mixed(self, weights: Mapping[str, Value], alpha: Mapping[str, Value],
                     features: np.ndarray) -> Value:
        x = Value(features)
        out, _ = cell_forward(self.spec, alpha, _edge_view(weights), self._stem_nodes(weights, x))
        return tensor.matmul(out, weights["head"])

    def logits_discrete(self, weights: Mapping[str, Value], genotype: Genotype,
                        features: np.ndarray) -> Value:
        x = Value(features)
        out, _ = discrete_forward(genotype, _edge_view(weights), self._stem_nodes(weights, x))
        return tensor.matmul(out, weights["head"])

    def loss_mixed(self, weights, alpha, features, labels) -> Value:
        return tensor.cross_entropy(self.logits_mixed(weights, alpha, features), Value(labels))

    def loss_discrete(self, weights, genotype, features, labels) -> Value:
        return tensor.cross_entropy(self.logits_discrete(weights, genotype, features), Value(labels))

    def predict_discrete(self, weight_arrays: Mapping[str, np.ndarray], genotype: Genotype,
                         features: np.ndarray) -> np.ndarray:
        """Class predictions with no tape participation."""
        values = {k: Value(v) for k, v in weight_arrays.items()}
        return np.argmax(self.logits_discrete(values, genotype, features).data, axis=1)

    def accuracy_discrete(self, weight_arrays, genotype, features, labels) -> float:
        pred = self.predict_discrete(weight_arrays, genotype, features)
        return float(np.mean(pred == labels.astype(np.int64)))
