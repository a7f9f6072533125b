"""Independent oracles for the lookahead architecture gradient.

The quantity under test is the gradient of the scalar map

    alpha -> val_loss(w - xi * d(train loss)/dw(w, alpha), alpha)

produced by ``arch_gradient_second_order``. Three oracles check it:

* central finite differences of the map itself, coordinate by coordinate,
  recomputing the lookahead at every probe (works on any problem);
* random quadratic bilevel problems whose mixed second derivative is a known
  constant matrix, so the correction term has an exact closed form and the
  whole gradient is exact;
* a nested, loss-only finite-difference product that never touches the
  reverse-mode engine, for checking the built-in symmetric difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .cell import CellSpec
from .search import (
    EvalCounters,
    Params,
    arch_gradient_second_order,
    loss_value,
    unrolled_weights,
)
from .tasks import DataConfig, SyntheticCellTask
from .tensor import Value


@dataclass
class FidelityReport:
    label: str
    problems: int
    max_error: float
    tolerance: float
    passed: bool


def unrolled_objective(problem, weights: Params, alpha: Params, unroll_lr: float,
                       train_batch, val_batch,
                       counters: EvalCounters | None = None) -> float:
    """Validation loss after one virtual training step at the given logits."""
    lookahead = unrolled_weights(problem, weights, alpha, unroll_lr, train_batch,
                                 counters=counters)
    return loss_value(problem, "val", lookahead, alpha, val_batch, counters=counters)


def fd_unrolled_gradient(problem, weights: Params, alpha: Params, unroll_lr: float,
                         train_batch, val_batch, step: float = 1e-5) -> Params:
    """Central differences of the unrolled objective over every logit."""
    grads: Params = {}
    probe = {k: v.copy() for k, v in alpha.items()}
    for key, vec in probe.items():
        g = np.zeros_like(vec)
        flat = vec.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = unrolled_objective(problem, weights, probe, unroll_lr, train_batch, val_batch)
            flat[i] = orig - step
            down = unrolled_objective(problem, weights, probe, unroll_lr, train_batch, val_batch)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[key] = g
    return grads


def hvp_nested_fd(problem, weights: Params, alpha: Params, vector: Params,
                  train_batch, step: float = 1e-6) -> Params:
    """Loss-only oracle for the mixed second-derivative product.

    The inner alpha-gradient is itself a central difference of the training
    loss, so no reverse-mode code is exercised anywhere.
    """

    def alpha_grad_fd(at_weights: Params) -> Params:
        grads: Params = {}
        probe = {k: v.copy() for k, v in alpha.items()}
        for key, vec in probe.items():
            g = np.zeros_like(vec)
            flat = vec.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_value(problem, "train", at_weights, probe, train_batch)
                flat[i] = orig - step
                down = loss_value(problem, "train", at_weights, probe, train_batch)
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * step)
            grads[key] = g
        return grads

    plus = {k: w + step * vector[k] for k, w in weights.items()}
    minus = {k: w - step * vector[k] for k, w in weights.items()}
    g_plus = alpha_grad_fd(plus)
    g_minus = alpha_grad_fd(minus)
    return {k: (g_plus[k] - g_minus[k]) / (2.0 * step) for k in alpha}


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([params[k].reshape(-1) for k in sorted(params)])


class QuadraticBilevelProblem:
    """Random quadratic losses with a closed-form mixed second derivative.

    Training loss 0.5 w A w' + w B a' + c w' + 0.5 a D a' is strictly convex
    in the weights; the mixed second derivative is the constant matrix B, so
    the exact correction product is available for any vector. Both groups are
    single row vectors.
    """

    has_cell = False

    def __init__(self, dim_w: int = 6, dim_alpha: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)

        def psd(n):
            m = rng.normal(size=(n, n))
            return m @ m.T / n + 0.5 * np.eye(n)

        self.a_train = psd(dim_w)
        self.cross_train = rng.normal(size=(dim_w, dim_alpha))
        self.lin_train = rng.normal(size=(1, dim_w))
        self.d_train = psd(dim_alpha)
        self.a_val = psd(dim_w)
        self.cross_val = rng.normal(size=(dim_w, dim_alpha))
        self.lin_val_w = rng.normal(size=(1, dim_w))
        self.lin_val_a = rng.normal(size=(1, dim_alpha))
        self.w0 = {"w": rng.normal(size=(1, dim_w))}
        self.alpha0 = {"alpha": rng.normal(size=(1, dim_alpha))}

    def init_weights(self, seed: int = 0) -> Params:
        return {k: v.copy() for k, v in self.w0.items()}

    def init_alpha(self) -> Params:
        return {k: v.copy() for k, v in self.alpha0.items()}

    def _quad(self, row: Value, matrix: np.ndarray) -> Value:
        return tensor.scale(
            tensor.sum_all(tensor.multiply(row, tensor.matmul(row, Value(matrix)))), 0.5
        )

    def _bilinear(self, w: Value, a: Value, matrix: np.ndarray) -> Value:
        return tensor.sum_all(tensor.multiply(tensor.matmul(w, Value(matrix)), a))

    def _linear(self, row: Value, coeffs: np.ndarray) -> Value:
        return tensor.sum_all(tensor.multiply(row, Value(coeffs)))

    def loss(self, split: str, weights, alpha, batch) -> Value:
        w, a = weights["w"], alpha["alpha"]
        if split == "train":
            return tensor.add(
                tensor.add(self._quad(w, self.a_train), self._bilinear(w, a, self.cross_train)),
                tensor.add(self._linear(w, self.lin_train), self._quad(a, self.d_train)),
            )
        if split == "val":
            return tensor.add(
                tensor.add(self._quad(w, self.a_val), self._bilinear(w, a, self.cross_val)),
                tensor.add(self._linear(w, self.lin_val_w), self._linear(a, self.lin_val_a)),
            )
        raise ValueError(f"unknown split {split!r}")

    def batch(self, split: str, size: int, rng) -> None:
        return None

    def derive(self, alpha_arrays) -> None:
        return None

    def exact_hvp(self, vector: Params) -> Params:
        """The constant mixed second derivative applied to a weight vector."""
        return {"alpha": vector["w"] @ self.cross_train}


def make_tiny_cell_task(seed: int) -> tuple[SyntheticCellTask, int]:
    """A cell classifier small enough for coordinate-wise differencing.

    Returns the task and its inner parameter count (stems, edges, head).
    """
    spec = CellSpec(nodes=5, input_arity=2, hidden=3, k=2)
    data = DataConfig(n=60, dims=3, classes=2, noise=0.8, seed=seed)
    task = SyntheticCellTask(data.build(), spec)
    n_params = sum(v.size for v in task.init_weights(seed).values())
    return task, n_params


def check_networks_eps_rule(seed: int = 0, n_problems: int = 20,
                            unroll_lr: float = 0.1, epsilon_scale: float = 0.01,
                            tolerance: float = 1e-2,
                            max_params: int = 200) -> FidelityReport:
    """Second-order gradient vs differenced unrolled objective on real cells."""
    worst = 0.0
    for p in range(n_problems):
        task, n_params = make_tiny_cell_task(seed + 1000 + p)
        assert n_params <= max_params, f"fidelity network too large: {n_params}"
        rng = np.random.default_rng(seed + p)
        weights = task.init_weights(seed + p)
        alpha = {k: rng.normal(scale=0.5, size=v.shape)
                 for k, v in task.init_alpha().items()}
        train_batch = task.batch("train", 16, rng)
        val_batch = task.batch("val", 16, rng)
        grads, _ = arch_gradient_second_order(
            task, weights, alpha, unroll_lr, train_batch, val_batch,
            epsilon_scale=epsilon_scale,
        )
        oracle = fd_unrolled_gradient(task, weights, alpha, unroll_lr,
                                      train_batch, val_batch)
        worst = max(worst, tensor.relative_error(flatten(grads), flatten(oracle)))
    return FidelityReport("cell networks, differenced correction", n_problems,
                          worst, tolerance, worst < tolerance)


def check_quadratics_exact_hvp(seed: int = 0, n_problems: int = 20,
                               unroll_lr: float = 0.1,
                               tolerance: float = 1e-4) -> FidelityReport:
    """Second-order gradient with the exact correction vs differenced objective."""
    worst = 0.0
    for p in range(n_problems):
        problem = QuadraticBilevelProblem(seed=seed + p)
        weights = problem.init_weights()
        alpha = problem.init_alpha()
        grads, _ = arch_gradient_second_order(
            problem, weights, alpha, unroll_lr, None, None,
            hvp_fn=problem.exact_hvp,
        )
        oracle = fd_unrolled_gradient(problem, weights, alpha, unroll_lr, None, None)
        worst = max(worst, tensor.relative_error(flatten(grads), flatten(oracle)))
    return FidelityReport("quadratic problems, exact correction", n_problems,
                          worst, tolerance, worst < tolerance)


def run_fidelity_suite(seed: int = 0, n_networks: int = 20,
                       n_quadratics: int = 20) -> list[FidelityReport]:
    return [
        check_networks_eps_rule(seed, n_problems=n_networks),
        check_quadratics_exact_hvp(seed, n_problems=n_quadratics),
    ]
