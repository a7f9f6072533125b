"""Alternating bilevel optimization of architecture logits and weights.

Each iteration takes exactly one architecture step followed by one weight
step. The architecture gradient is evaluated through a one-step lookahead of
the weights: with lookahead weights w' = w - xi * d(train loss)/dw, the
gradient is

    d(val loss at w')/d(alpha)  -  xi * M v,

where v is the validation gradient at w' and M v, the mixed second-derivative
term, is approximated by a symmetric finite difference of the alpha-gradient
of the training loss at w +/- eps*v with eps = scale / ||v||. With xi = 0 the
correction vanishes and the step reduces to the plain validation gradient at
the current weights (first-order mode).

Baselines live here too: joint optimization of both groups on pooled
train+val data (coordinate or simultaneous), uniform random architecture
sampling scored by from-scratch retraining, and multi-seed selection that
ranks searched genotypes by their from-scratch validation metric.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .cell import Genotype, sample_genotype
from .optim import Adam, CosineSchedule, SgdMomentum, clip_global_norm
from .tensor import Tape, Value, backward, flat_norm

Params = dict[str, np.ndarray]

WRT_BOTH = ("weights", "alpha")


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


class SelectionError(RuntimeError):
    """A selection run failed; partial results ride on the exception."""

    def __init__(self, message: str, candidates: list):
        super().__init__(message)
        self.candidates = candidates


@dataclass
class EvalCounters:
    """Instrumentation for cost accounting and complexity assertions."""

    forward_passes: int = 0
    backward_passes: int = 0
    alpha_grad_evals: int = 0
    weight_grad_evals: int = 0
    primitive_evals: int = 0


@dataclass
class SearchConfig:
    """Everything a search run depends on, seeds and budgets included."""

    mode: str = "second-order"  # second-order | first-order | joint | random
    steps: int = 300
    batch_size: int = 32
    seed: int = 0
    weight_lr: float = 0.025
    arch_lr: float = 3e-4
    momentum: float = 0.9
    weight_decay_weights: float = 3e-4
    weight_decay_alpha: float = 1e-3
    adam_betas: tuple[float, float] = (0.5, 0.999)
    arch_optimizer: str = "adam"  # adam | sgd (plain descent)
    unroll_lr: float | None = None  # None: follow the current weight lr
    hvp_epsilon_scale: float = 0.01
    anneal: bool = True
    clip_norm: float | None = 5.0
    momentum_unroll: bool = False
    joint_submode: str = "coordinate"  # coordinate | simultaneous
    eval_steps: int = 150
    eval_batch_size: int = 64
    eval_seed: int = 1234
    snapshot_every: int = 0

    def __post_init__(self):
        if self.mode not in ("second-order", "first-order", "joint", "random"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.joint_submode not in ("coordinate", "simultaneous"):
            raise ValueError(f"unknown joint sub-mode {self.joint_submode!r}")
        if self.arch_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown arch optimizer {self.arch_optimizer!r}")
        if self.unroll_lr is not None and self.unroll_lr < 0:
            raise ValueError("unroll step must be non-negative")
        if self.steps < 0 or self.batch_size < 1 or self.eval_steps < 0:
            raise ValueError("budgets must be non-negative, batch sizes positive")
        if self.hvp_epsilon_scale <= 0:
            raise ValueError("finite-difference scale must be positive")


def toy_search_config(mode: str = "second-order", steps: int = 500,
                      unroll_lr: float | None = None, weight_lr: float = 0.5,
                      arch_lr: float = 0.1, seed: int = 0) -> SearchConfig:
    """Plain-descent settings that keep the analytic problem's fixed points exact."""
    return SearchConfig(
        mode=mode, steps=steps, seed=seed, batch_size=1,
        weight_lr=weight_lr, arch_lr=arch_lr,
        momentum=0.0, weight_decay_weights=0.0, weight_decay_alpha=0.0,
        arch_optimizer="sgd", unroll_lr=unroll_lr, anneal=False, clip_norm=None,
    )


def desk_search_config(seed: int = 0, mode: str = "second-order") -> SearchConfig:
    """Calibrated budgets for the default synthetic task (minute-scale runs)."""
    return SearchConfig(
        mode=mode, steps=400, batch_size=48, seed=seed,
        weight_lr=0.05, arch_lr=0.01,
        eval_steps=150, eval_batch_size=64, eval_seed=1234,
    )


@dataclass
class IterationRecord:
    iteration: int
    train_loss: float
    val_loss: float
    weight_lr: float
    hvp_epsilon: float | None
    snapshot: str
    wall_clock: float


@dataclass
class Trajectory:
    records: list[IterationRecord] = field(default_factory=list)
    final_alpha: Params = field(default_factory=dict)
    final_weights: Params = field(default_factory=dict)
    genotype: Genotype | None = None
    diverged: bool = False
    events: list[str] = field(default_factory=list)
    counters: EvalCounters = field(default_factory=EvalCounters)


@dataclass
class SecondOrderInfo:
    epsilon: float | None
    val_loss: float
    correction_skipped: bool = False


@dataclass
class CandidateResult:
    seed: int
    genotype: Genotype
    search_val_loss: float
    retrain_accuracy: float


@dataclass
class SelectionResult:
    best: CandidateResult
    candidates: list[CandidateResult]


@dataclass
class RandomSearchResult:
    best: Genotype
    best_score: float
    scores: list[float]
    genotypes: list[Genotype]


# ---------------------------------------------------------------------------
# Gradient plumbing
# ---------------------------------------------------------------------------


def _wrap(arrays: Mapping[str, np.ndarray]) -> dict[str, Value]:
    return {k: Value.param(v, name=k) for k, v in arrays.items()}


def _require_finite(what: str, value: float) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"{what} is not finite: {value}")


def _grads_from(values: Mapping[str, Value], what: str) -> Params:
    out = {}
    for name, v in values.items():
        if not np.all(np.isfinite(v.grad)):
            raise NumericalError(f"{what}: non-finite gradient for {name!r}")
        out[name] = v.grad
    return out


def loss_and_grads(problem, split: str, weights: Params, alpha: Params, batch,
                   wrt: Sequence[str] = WRT_BOTH,
                   counters: EvalCounters | None = None):
    """One forward/backward pass; returns (loss, weight grads, alpha grads).

    Gradients are computed only for the groups named in ``wrt``; the other
    slot comes back ``None``. Counters record which groups were requested.
    """
    with Tape() as tape:
        wv = _wrap(weights)
        av = _wrap(alpha)
        loss = problem.loss(split, wv, av, batch)
    loss_val = loss.item()
    _require_finite(f"{split} loss", loss_val)
    want: list[Value] = []
    if "weights" in wrt:
        want.extend(wv.values())
    if "alpha" in wrt:
        want.extend(av.values())
    backward(loss, wrt=want)
    if counters is not None:
        counters.forward_passes += 1
        counters.backward_passes += 1
        counters.primitive_evals += len(tape)
        counters.alpha_grad_evals += 1 if "alpha" in wrt else 0
        counters.weight_grad_evals += 1 if "weights" in wrt else 0
    wgrads = _grads_from(wv, f"{split} loss") if "weights" in wrt else None
    agrads = _grads_from(av, f"{split} loss") if "alpha" in wrt else None
    return loss_val, wgrads, agrads


def loss_value(problem, split: str, weights: Params, alpha: Params, batch,
               counters: EvalCounters | None = None) -> float:
    """Forward-only loss evaluation (no tape, no gradients)."""
    loss = problem.loss(split, {k: Value(v) for k, v in weights.items()},
                        {k: Value(v) for k, v in alpha.items()}, batch)
    if counters is not None:
        counters.forward_passes += 1
    val = loss.item()
    _require_finite(f"{split} loss", val)
    return val


# ---------------------------------------------------------------------------
# Architecture gradients
# ---------------------------------------------------------------------------


def unrolled_weights(problem, weights: Params, alpha: Params, unroll_lr: float,
                     train_batch, counters: EvalCounters | None = None,
                     velocity: Params | None = None, momentum: float = 0.0,
                     weight_decay: float = 0.0) -> Params:
    """One virtual training step: w - unroll_lr * d(train loss)/dw.

    The incoming weights are never mutated. By default the step is the plain
    gradient; passing the weight optimizer's ``velocity`` (with its momentum
    and decay) makes the lookahead reproduce the composite momentum update
    instead.
    """
    if unroll_lr < 0:
        raise ValueError("unroll step must be non-negative")
    if unroll_lr == 0.0:
        return {k: v.copy() for k, v in weights.items()}
    _, wgrads, _ = loss_and_grads(problem, "train", weights, alpha, train_batch,
                                  wrt=("weights",), counters=counters)
    stepped = {}
    for name, w in weights.items():
        g = wgrads[name]
        if velocity is not None:
            g = momentum * velocity.get(name, 0.0) + (g + weight_decay * w)
        stepped[name] = w - unroll_lr * g
    return stepped


def arch_gradient_first_order(problem, weights: Params, alpha: Params, val_batch,
                              counters: EvalCounters | None = None):
    """Validation gradient over alpha at the current weights."""
    val_loss, _, agrads = loss_and_grads(problem, "val", weights, alpha, val_batch,
                                         wrt=("alpha",), counters=counters)
    return agrads, val_loss


def hvp_finite_difference(problem, weights: Params, alpha: Params, vector: Params,
                          train_batch, epsilon: float,
                          counters: EvalCounters | None = None) -> Params:
    """Mixed second-derivative product by symmetric differencing over weights.

    Returns [g_alpha(w + eps*v) - g_alpha(w - eps*v)] / (2*eps) where g_alpha
    is the alpha-gradient of the training loss. The incoming weights are left
    bit-identical: the perturbed points are fresh arrays.
    """
    if epsilon <= 0:
        raise ValueError(f"finite-difference step must be positive, got {epsilon}")
    plus = {k: w + epsilon * vector[k] for k, w in weights.items()}
    minus = {k: w - epsilon * vector[k] for k, w in weights.items()}
    _, _, g_plus = loss_and_grads(problem, "train", plus, alpha, train_batch,
                                  wrt=("alpha",), counters=counters)
    _, _, g_minus = loss_and_grads(problem, "train", minus, alpha, train_batch,
                                   wrt=("alpha",), counters=counters)
    return {k: (g_plus[k] - g_minus[k]) / (2.0 * epsilon) for k in alpha}


def arch_gradient_second_order(problem, weights: Params, alpha: Params,
                               unroll_lr: float, train_batch, val_batch,
                               counters: EvalCounters | None = None,
                               epsilon_scale: float = 0.01,
                               hvp_fn: Callable[..., Params] | None = None,
                               velocity: Params | None = None,
                               momentum: float = 0.0,
                               weight_decay: float = 0.0):
    """Lookahead validation gradient with the finite-difference correction.

    ``hvp_fn(vector) -> alpha-shaped dict`` may replace the built-in finite
    difference (e.g. with an analytic product on problems that have one).
    Returns (alpha gradient, SecondOrderInfo). With a zero unroll step the
    correction vanishes and this reduces, bit for bit, to the plain
    validation gradient at the current weights.
    """
    if unroll_lr < 0:
        raise ValueError("unroll step must be non-negative")
    if unroll_lr == 0.0:
        grads, val_loss = arch_gradient_first_order(problem, weights, alpha,
                                                    val_batch, counters=counters)
        return grads, SecondOrderInfo(None, val_loss)
    lookahead = unrolled_weights(problem, weights, alpha, unroll_lr, train_batch,
                                 counters=counters, velocity=velocity,
                                 momentum=momentum, weight_decay=weight_decay)
    val_loss, val_wgrads, outer = loss_and_grads(
        problem, "val", lookahead, alpha, val_batch, wrt=WRT_BOTH, counters=counters
    )
    vec_norm = flat_norm(val_wgrads.values())
    if not np.isfinite(vec_norm):
        raise NumericalError("validation gradient norm overflowed")
    if vec_norm < 1e-12:
        # correction term is the product with a vanishing vector; define it as zero
        return dict(outer), SecondOrderInfo(None, val_loss, correction_skipped=True)
    epsilon = epsilon_scale / vec_norm
    if hvp_fn is None:
        correction = hvp_finite_difference(problem, weights, alpha, val_wgrads,
                                           train_batch, epsilon, counters=counters)
    else:
        correction = hvp_fn(val_wgrads)
    grads = {k: outer[k] - unroll_lr * correction[k] for k in alpha}
    return grads, SecondOrderInfo(epsilon, val_loss)


# ---------------------------------------------------------------------------
# The search loops
# ---------------------------------------------------------------------------


def _make_arch_optimizer(config: SearchConfig):
    if config.arch_optimizer == "adam":
        return Adam(config.arch_lr, betas=config.adam_betas,
                    weight_decay=config.weight_decay_alpha)
    return SgdMomentum(config.arch_lr, momentum=0.0,
                       weight_decay=config.weight_decay_alpha)


def _weight_step(problem, config, weights, alpha, lr, rng, counters, split="train"):
    batch = problem.batch(split, config.batch_size, rng)
    loss, wgrads, _ = loss_and_grads(problem, split, weights, alpha, batch,
                                     wrt=("weights",), counters=counters)
    if config.clip_norm is not None:
        wgrads, _ = clip_global_norm(wgrads, config.clip_norm)
    return loss, wgrads


def search(config: SearchConfig, problem,
           snapshot_hook: Callable[[int, Params], str] | None = None) -> Trajectory:
    """Alternating search: one architecture step, then one weight step.

    Each iteration draws a fresh validation batch for the architecture step
    (plus a fresh training batch for the lookahead in second-order mode) and
    another fresh training batch for the weight step. Divergence stops the
    loop and returns the trajectory collected so far, flagged.
    """
    if config.mode == "joint":
        return joint_optimize(config, problem, snapshot_hook=snapshot_hook)
    if config.mode not in ("second-order", "first-order"):
        raise ValueError(f"search does not handle mode {config.mode!r}")

    rng = np.random.default_rng(config.seed)
    weights = problem.init_weights(config.seed)
    alpha = problem.init_alpha()
    w_opt = SgdMomentum(config.weight_lr, momentum=config.momentum,
                        weight_decay=config.weight_decay_weights)
    a_opt = _make_arch_optimizer(config)
    schedule = CosineSchedule(config.weight_lr, config.steps) if config.anneal else None
    traj = Trajectory()
    start = time.perf_counter()

    for t in range(config.steps):
        lr_t = schedule.rate(t) if schedule is not None else config.weight_lr
        unroll_lr = lr_t if config.unroll_lr is None else config.unroll_lr
        try:
            val_batch = problem.batch("val", config.batch_size, rng)
            epsilon = None
            if config.mode == "second-order":
                unroll_batch = problem.batch("train", config.batch_size, rng)
                agrads, info = arch_gradient_second_order(
                    problem, weights, alpha, unroll_lr, unroll_batch, val_batch,
                    counters=traj.counters, epsilon_scale=config.hvp_epsilon_scale,
                    velocity=w_opt.velocity if config.momentum_unroll else None,
                    momentum=config.momentum, weight_decay=config.weight_decay_weights,
                )
                val_loss, epsilon = info.val_loss, info.epsilon
                if info.correction_skipped:
                    traj.events.append(f"iter {t}: correction skipped, vanishing val gradient")
            else:
                agrads, val_loss = arch_gradient_first_order(
                    problem, weights, alpha, val_batch, counters=traj.counters
                )
            alpha = a_opt.step(alpha, agrads)
            w_opt.lr = lr_t
            train_loss, wgrads = _weight_step(problem, config, weights, alpha,
                                              lr_t, rng, traj.counters)
            weights = w_opt.step(weights, wgrads)
        except NumericalError as exc:
            traj.events.append(f"iter {t}: diverged: {exc}")
            traj.diverged = True
            break
        snapshot = snapshot_hook(t, alpha) if snapshot_hook is not None else ""
        traj.records.append(IterationRecord(
            iteration=t, train_loss=train_loss, val_loss=val_loss,
            weight_lr=lr_t, hvp_epsilon=epsilon, snapshot=snapshot,
            wall_clock=time.perf_counter() - start,
        ))

    traj.final_alpha = {k: v.copy() for k, v in alpha.items()}
    traj.final_weights = {k: v.copy() for k, v in weights.items()}
    if not traj.diverged:
        traj.genotype = problem.derive(alpha)
    return traj


def joint_optimize(config: SearchConfig, problem,
                   snapshot_hook: Callable[[int, Params], str] | None = None) -> Trajectory:
    """Optimize both groups on pooled train+val data (no bilevel split).

    ``coordinate`` alternates an architecture step and a weight step, each on
    its own pooled batch; ``simultaneous`` takes one combined gradient step
    per iteration from a single pooled batch.
    """
    rng = np.random.default_rng(config.seed)
    weights = problem.init_weights(config.seed)
    alpha = problem.init_alpha()
    w_opt = SgdMomentum(config.weight_lr, momentum=config.momentum,
                        weight_decay=config.weight_decay_weights)
    a_opt = _make_arch_optimizer(config)
    schedule = CosineSchedule(config.weight_lr, config.steps) if config.anneal else None
    traj = Trajectory()
    start = time.perf_counter()

    for t in range(config.steps):
        lr_t = schedule.rate(t) if schedule is not None else config.weight_lr
        w_opt.lr = lr_t
        try:
            if config.joint_submode == "coordinate":
                arch_batch = problem.batch("joint", config.batch_size, rng)
                arch_loss, _, agrads = loss_and_grads(
                    problem, "joint", weights, alpha, arch_batch,
                    wrt=("alpha",), counters=traj.counters,
                )
                alpha = a_opt.step(alpha, agrads)
                step_loss, wgrads = _weight_step(problem, config, weights, alpha,
                                                 lr_t, rng, traj.counters, split="joint")
                weights = w_opt.step(weights, wgrads)
            else:
                batch = problem.batch("joint", config.batch_size, rng)
                step_loss, wgrads, agrads = loss_and_grads(
                    problem, "joint", weights, alpha, batch,
                    wrt=WRT_BOTH, counters=traj.counters,
                )
                if config.clip_norm is not None:
                    wgrads, _ = clip_global_norm(wgrads, config.clip_norm)
                arch_loss = step_loss
                alpha = a_opt.step(alpha, agrads)
                weights = w_opt.step(weights, wgrads)
        except NumericalError as exc:
            traj.events.append(f"iter {t}: diverged: {exc}")
            traj.diverged = True
            break
        snapshot = snapshot_hook(t, alpha) if snapshot_hook is not None else ""
        traj.records.append(IterationRecord(
            iteration=t, train_loss=step_loss, val_loss=arch_loss,
            weight_lr=lr_t, hvp_epsilon=None, snapshot=snapshot,
            wall_clock=time.perf_counter() - start,
        ))

    traj.final_alpha = {k: v.copy() for k, v in alpha.items()}
    traj.final_weights = {k: v.copy() for k, v in weights.items()}
    if not traj.diverged:
        traj.genotype = problem.derive(alpha)
    return traj


# ---------------------------------------------------------------------------
# From-scratch evaluation, random search, multi-seed selection
# ---------------------------------------------------------------------------


def train_genotype(problem, genotype: Genotype, config: SearchConfig,
                   seed: int | None = None,
                   counters: EvalCounters | None = None) -> tuple[float, Params]:
    """Train a derived architecture from fresh weights on the training split.

    Returns (validation accuracy, trained weights). Search-time weights are
    never reused; every evaluation starts from its own seeded init.
    """
    seed = config.eval_seed if seed is None else seed
    rng = np.random.default_rng(seed)
    weights = problem.model.init_genotype_weights(genotype, seed)
    opt = SgdMomentum(config.weight_lr, momentum=config.momentum,
                      weight_decay=config.weight_decay_weights)
    schedule = CosineSchedule(config.weight_lr, config.eval_steps) if config.anneal else None

    for t in range(config.eval_steps):
        opt.lr = schedule.rate(t) if schedule is not None else config.weight_lr
        features, labels = problem.batch("train", config.eval_batch_size, rng)
        with Tape() as tape:
            wv = _wrap(weights)
            loss = problem.discrete_loss(wv, genotype, (features, labels))
        _require_finite("retraining loss", loss.item())
        backward(loss)
        wgrads = _grads_from(wv, "retraining loss")
        if config.clip_norm is not None:
            wgrads, _ = clip_global_norm(wgrads, config.clip_norm)
        if counters is not None:
            counters.forward_passes += 1
            counters.backward_passes += 1
            counters.weight_grad_evals += 1
            counters.primitive_evals += len(tape)
        weights = opt.step(weights, wgrads)

    return problem.split_accuracy(weights, genotype, "val"), weights


def random_search(config: SearchConfig, problem, n_samples: int) -> RandomSearchResult:
    """Best of n uniformly sampled genotypes, each retrained from scratch."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(config.seed)
    genotypes, scores = [], []
    for _ in range(n_samples):
        geno = sample_genotype(problem.spec, rng)
        accuracy, _ = train_genotype(problem, geno, config)
        genotypes.append(geno)
        scores.append(accuracy)
    best_idx = int(np.argmax(scores))  # ties fall to the earliest sample
    return RandomSearchResult(genotypes[best_idx], scores[best_idx], scores, genotypes)


def pick_best_candidate(candidates: Sequence[CandidateResult]) -> CandidateResult:
    """Highest from-scratch validation metric; ties go to the lowest seed.

    Search-time losses play no part in the ranking.
    """
    if not candidates:
        raise ValueError("no candidates to pick from")
    return min(candidates, key=lambda c: (-c.retrain_accuracy, c.seed))


def select_architecture(configs: Sequence[SearchConfig], problem) -> SelectionResult:
    """Run one search per config, retrain each result, keep the best.

    Diverged runs are reported via SelectionError carrying the candidates
    that did complete.
    """
    candidates: list[CandidateResult] = []
    failures: list[str] = []
    for config in configs:
        traj = search(config, problem)
        if traj.diverged or traj.genotype is None:
            failures.append(f"seed {config.seed}: search diverged")
            continue
        accuracy, _ = train_genotype(problem, traj.genotype, config)
        candidates.append(CandidateResult(
            seed=config.seed,
            genotype=traj.genotype,
            search_val_loss=traj.records[-1].val_loss if traj.records else float("nan"),
            retrain_accuracy=accuracy,
        ))
    if failures:
        raise SelectionError("; ".join(failures), candidates)
    return SelectionResult(pick_best_candidate(candidates), candidates)
