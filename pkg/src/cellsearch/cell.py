"""The DAG cell: relaxed mixed-operation forward, discrete forward, derivation.

A cell has ``input_arity`` input nodes, a run of intermediate nodes, and one
output node formed by reducing the intermediates (mean by default, concat
optionally). Every ordered pair (i, j) with j intermediate and i any earlier
node is an edge carrying a logit vector over the operation registry; an
intermediate node is the sum over its incoming edges of the softmax-weighted
mixture of all candidate operations.

Discretization keeps, per intermediate node, the k incoming edges whose
strongest non-zero operation has the largest softmax weight (the softmax is
taken over the full registry, zero included), then places that strongest
non-zero operation on each kept edge. Ties break toward the lower predecessor
index, then the lower registry index, so derivation is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor
from .ops import OP_ORDER, apply_op
from .tensor import ShapeError, Value


class CellError(ValueError):
    """Invalid cell specification, logits, or genotype."""


@dataclass(frozen=True)
class CellSpec:
    """Static shape of a cell.

    ``nodes`` counts everything: inputs, intermediates, and the single output
    node. ``k`` is how many incoming edges each intermediate keeps after
    discretization; it may not exceed ``input_arity`` or the first
    intermediate node would not have enough distinct predecessors.
    """

    nodes: int = 6
    input_arity: int = 2
    hidden: int = 16
    k: int = 2
    reduction: str = "mean"

    def __post_init__(self):
        if self.input_arity < 1:
            raise CellError("input arity must be at least 1")
        if self.nodes < self.input_arity + 2:
            raise CellError(
                f"need at least one intermediate and one output node: "
                f"nodes={self.nodes}, input_arity={self.input_arity}"
            )
        if not 1 <= self.k <= self.input_arity:
            raise CellError(f"k must be in [1, input_arity], got k={self.k}")
        if self.hidden < 1:
            raise CellError("hidden size must be positive")
        if self.reduction not in ("mean", "concat"):
            raise CellError(f"unknown reduction {self.reduction!r}")

    @property
    def n_intermediate(self) -> int:
        return self.nodes - self.input_arity - 1

    @property
    def intermediate_ids(self) -> range:
        return range(self.input_arity, self.input_arity + self.n_intermediate)

    def edges(self) -> list[tuple[int, int]]:
        """All (predecessor, node) pairs, in canonical order."""
        return [(i, j) for j in self.intermediate_ids for i in range(j)]

    def output_width(self) -> int:
        return self.hidden if self.reduction == "mean" else self.hidden * self.n_intermediate

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes,
            "input_arity": self.input_arity,
            "hidden": self.hidden,
            "k": self.k,
            "reduction": self.reduction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellSpec":
        return cls(**d)


def edge_key(i: int, j: int) -> str:
    return f"{i}->{j}"


def parse_edge_key(key: str) -> tuple[int, int]:
    i, _, j = key.partition("->")
    return int(i), int(j)


def init_alpha(spec: CellSpec, op_set: Sequence[str] = OP_ORDER) -> dict[str, np.ndarray]:
    """Zero logits on every edge: uniform attention over all operations."""
    return {edge_key(i, j): np.zeros(len(op_set)) for i, j in spec.edges()}


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def alpha_entropy(alpha: Mapping[str, np.ndarray]) -> float:
    """Mean per-edge entropy (nats) of the softmax operation weights."""
    total = 0.0
    for vec in alpha.values():
        w = softmax_weights(np.asarray(vec, dtype=np.float64))
        total += float(-(w * np.log(np.maximum(w, 1e-300))).sum())
    return total / max(len(alpha), 1)


def uniform_entropy(n_ops: int) -> float:
    return float(np.log(n_ops))


# ---------------------------------------------------------------------------
# Continuous (relaxed) forward
# ---------------------------------------------------------------------------


def mixed_edge_forward(alpha_vec: Value, x: Value,
                       edge_op_params: Mapping[str, Value] | None = None,
                       op_set: Sequence[str] = OP_ORDER) -> Value:
    """Softmax-weighted sum of every candidate operation applied to x.

    The softmax runs over the whole ``op_set``, zero included, so the zero
    logit still shapes the other weights even though its term vanishes.
    """
    if alpha_vec.ndim != 1 or alpha_vec.shape[0] != len(op_set):
        raise ShapeError(
            f"mixed-edge: logit vector {alpha_vec.shape} does not match {len(op_set)} ops"
        )
    edge_op_params = edge_op_params or {}
    weights = tensor.softmax(alpha_vec, axis=0)
    out = None
    for idx, kind in enumerate(op_set):
        term = tensor.multiply(
            tensor.select(weights, idx), apply_op(kind, edge_op_params.get(kind), x)
        )
        out = term if out is None else tensor.add(out, term)
    return out


def _reduce(spec: CellSpec, intermediates: list[Value]) -> Value:
    if spec.reduction == "mean":
        acc = intermediates[0]
        for node in intermediates[1:]:
            acc = tensor.add(acc, node)
        return tensor.scale(acc, 1.0 / len(intermediates))
    return tensor.concatenate(intermediates, axis=1)


def _check_inputs(spec: CellSpec, inputs: Sequence[Value]) -> None:
    if len(inputs) != spec.input_arity:
        raise CellError(f"expected {spec.input_arity} cell inputs, got {len(inputs)}")
    for x in inputs:
        if x.ndim != 2 or x.shape[1] != spec.hidden:
            raise ShapeError(
                f"cell input: expected (rows, {spec.hidden}), got {x.shape}"
            )


def cell_forward(spec: CellSpec,
                 alpha: Mapping[str, Value],
                 params: Mapping[str, Mapping[str, Value]],
                 inputs: Sequence[Value],
                 op_set: Sequence[str] = OP_ORDER) -> tuple[Value, list[Value]]:
    """Relaxed cell pass: every intermediate node sums its mixed edges.

    Returns the reduced output and the full list of node activations
    (inputs first, then intermediates).
    """
    _check_inputs(spec, inputs)
    states: list[Value] = list(inputs)
    for j in spec.intermediate_ids:
        acc = None
        for i in range(j):
            key = edge_key(i, j)
            term = mixed_edge_forward(alpha[key], states[i], params.get(key), op_set)
            acc = term if acc is None else tensor.add(acc, term)
        states.append(acc)
    return _reduce(spec, states[spec.input_arity:]), states


# ---------------------------------------------------------------------------
# Genotype: the discrete architecture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Genotype:
    """Per intermediate node, k (predecessor, operation) pairs; zero-free."""

    spec: CellSpec
    nodes: tuple[tuple[tuple[int, str], ...], ...]

    def validate(self, op_set: Sequence[str] = OP_ORDER) -> None:
        if len(self.nodes) != self.spec.n_intermediate:
            raise CellError(
                f"genotype has {len(self.nodes)} nodes, spec wants {self.spec.n_intermediate}"
            )
        for offset, pairs in enumerate(self.nodes):
            node_id = self.spec.input_arity + offset
            if len(pairs) != self.spec.k:
                raise CellError(f"node {node_id}: expected {self.spec.k} edges, got {len(pairs)}")
            preds = [pred for pred, _ in pairs]
            if len(set(preds)) != len(preds):
                raise CellError(f"node {node_id}: predecessors must be distinct: {preds}")
            for pred, kind in pairs:
                if not 0 <= pred < node_id:
                    raise CellError(f"node {node_id}: predecessor {pred} out of range")
                if kind == "zero":
                    raise CellError(f"node {node_id}: zero operation is not allowed")
                if kind not in op_set:
                    raise CellError(f"node {node_id}: unknown operation {kind!r}")

    def to_json(self) -> str:
        doc = {
            "spec": self.spec.to_dict(),
            "nodes": [[{"pred": p, "op": o} for p, o in pairs] for pairs in self.nodes],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        try:
            doc = json.loads(text)
            spec = CellSpec.from_dict(doc["spec"])
            nodes = tuple(
                tuple((int(e["pred"]), str(e["op"])) for e in pairs) for pairs in doc["nodes"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CellError(f"malformed genotype document: {exc}") from exc
        geno = cls(spec, nodes)
        geno.validate()
        return geno


def derive_genotype(spec: CellSpec, alpha: Mapping[str, np.ndarray],
                    op_set: Sequence[str] = OP_ORDER) -> Genotype:
    """Discretize logits: keep the k strongest edges per node, best op each.

    Edge strength is the largest softmax weight among that edge's non-zero
    operations (denominator includes the zero logit). Deterministic
    tie-breaks: lower predecessor index first, then lower registry index.
    """
    nonzero = [(idx, kind) for idx, kind in enumerate(op_set) if kind != "zero"]
    if not nonzero:
        raise CellError("operation set has no non-zero operations")
    nodes = []
    for j in spec.intermediate_ids:
        scored = []
        for i in range(j):
            key = edge_key(i, j)
            if key not in alpha:
                raise CellError(f"missing logits for edge {key}")
            vec = np.asarray(alpha[key], dtype=np.float64)
            if vec.shape != (len(op_set),):
                raise CellError(f"edge {key}: logit vector {vec.shape} does not match op set")
            weights = softmax_weights(vec)
            best_idx, best_kind, best_w = None, None, -1.0
            for idx, kind in nonzero:
                if weights[idx] > best_w:
                    best_idx, best_kind, best_w = idx, kind, float(weights[idx])
            scored.append((-best_w, i, best_idx, best_kind))
        scored.sort()
        kept = sorted(scored[: spec.k], key=lambda item: item[1])
        nodes.append(tuple((i, kind) for _, i, _, kind in kept))
    geno = Genotype(spec, tuple(nodes))
    geno.validate(op_set)
    return geno


def discrete_forward(genotype: Genotype,
                     params: Mapping[str, Mapping[str, Value]],
                     inputs: Sequence[Value]) -> tuple[Value, list[Value]]:
    """Forward pass of a derived architecture: only retained edges run."""
    genotype.validate()
    spec = genotype.spec
    _check_inputs(spec, inputs)
    states: list[Value] = list(inputs)
    for offset, pairs in enumerate(genotype.nodes):
        j = spec.input_arity + offset
        acc = None
        for pred, kind in pairs:
            weights = params.get(edge_key(pred, j), {}).get(kind)
            term = apply_op(kind, weights, states[pred])
            acc = term if acc is None else tensor.add(acc, term)
        states.append(acc)
    return _reduce(spec, states[spec.input_arity:]), states


def sample_genotype(spec: CellSpec, rng: np.random.Generator,
                    op_set: Sequence[str] = OP_ORDER) -> Genotype:
    """Uniform random genotype: k distinct predecessors, uniform non-zero op."""
    nonzero = [kind for kind in op_set if kind != "zero"]
    nodes = []
    for j in spec.intermediate_ids:
        preds = sorted(int(p) for p in rng.choice(j, size=spec.k, replace=False))
        nodes.append(tuple((p, str(rng.choice(nonzero))) for p in preds))
    geno = Genotype(spec, tuple(nodes))
    geno.validate(op_set)
    return geno


# ---------------------------------------------------------------------------
# Logit snapshots: one row per edge, one column per operation.
# ---------------------------------------------------------------------------


def format_alpha(alpha: Mapping[str, np.ndarray], op_set: Sequence[str] = OP_ORDER) -> str:
    lines = ["edge\t" + "\t".join(op_set)]
    for key in sorted(alpha, key=parse_edge_key):
        vec = np.asarray(alpha[key], dtype=np.float64)
        lines.append(key + "\t" + "\t".join(repr(float(v)) for v in vec))
    return "\n".join(lines) + "\n"


def parse_alpha(text: str) -> tuple[dict[str, np.ndarray], list[str]]:
    """Inverse of format_alpha; returns the logits and the op-name header."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CellError("empty logit snapshot")
    header = lines[0].split("\t")
    if header[0] != "edge" or len(header) < 2:
        raise CellError("logit snapshot must start with an 'edge' header row")
    op_names = header[1:]
    alpha: dict[str, np.ndarray] = {}
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != len(header):
            raise CellError(f"snapshot row has {len(parts)} columns, expected {len(header)}")
        alpha[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
    return alpha, op_names
