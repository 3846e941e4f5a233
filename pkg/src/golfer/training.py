"""Winner-take-all Gaussian mixture objective, Adam, and the training loop.

The regression head is scored only on the mode whose mean trajectory is
closest to the ground truth (mean Euclidean distance over counted steps); the
classification head gets that winner as its cross-entropy target. A goal step
that leaked into the input through the conditioning element is excluded from
the counted set, for both winner selection and the likelihood, so the loss
carries no information about it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .model import GolferConfig, ModelParams, PredictionNodes, forward_nodes, init_model_params
from .numerics import EmptySetError, Node, Parameter, Tape
from .scene import Scene, apply_goal_masking

LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    """Training hit a non-finite quantity."""


@dataclass
class LossBreakdown:
    regression_nll: float
    classification_ce: float
    total: float
    winner_index: int


def select_winner(means: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> int:
    """Index of the mode with the smallest mean L2 distance over valid steps."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EmptySetError("select_winner: no valid steps")
    diffs = means[:, valid, :] - np.asarray(gt)[valid]
    dists = np.linalg.norm(diffs, axis=2).mean(axis=1)
    return int(np.argmin(dists))


def _counted_steps(valid: np.ndarray, exclusion_index: int | None) -> np.ndarray:
    counted = np.asarray(valid, dtype=bool).copy()
    if exclusion_index is not None:
        counted[exclusion_index] = False
    return counted


def gmm_nll_node(tape: Tape, mu: Node, log_sigma: Node, gt: np.ndarray, counted: np.ndarray) -> Node:
    """Mean diagonal-Gaussian negative log density over counted steps.

    Per step: 0.5*((x-mu_x)/sig_x)^2 + 0.5*((y-mu_y)/sig_y)^2
              + log sig_x + log sig_y + log(2*pi).
    """
    n_counted = int(counted.sum())
    if n_counted == 0:
        raise EmptySetError("gmm_nll: no counted steps")
    resid = nm.add(mu, tape.constant(-np.asarray(gt, dtype=np.float64)))
    z = nm.mul(resid, nm.exp(nm.scale(log_sigma, -1.0)))
    terms = nm.add(nm.scale(nm.mul(z, z), 0.5), log_sigma)
    weights = np.repeat(counted[:, None], 2, axis=1) / n_counted
    return nm.add(nm.weighted_sum(terms, weights), tape.constant(LOG_2PI))


def gmm_nll(
    mu: np.ndarray,
    log_sigma: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray,
    exclusion_index: int | None = None,
) -> float:
    """Value-only convenience wrapper over the graph builder."""
    tape = Tape()
    counted = _counted_steps(valid, exclusion_index)
    return float(gmm_nll_node(tape, tape.constant(mu), tape.constant(log_sigma), gt, counted).value)


def classification_loss_node(tape: Tape, logits: Node, winner: int) -> Node:
    """Stabilized cross entropy -log softmax(logits)[winner]."""
    if not 0 <= winner < logits.value.shape[0]:
        raise ValueError(f"winner {winner} out of range for {logits.value.shape[0]} modes")
    return nm.add(nm.logsumexp(logits), nm.scale(nm.pick(logits, winner), -1.0))


def classification_loss(logits: np.ndarray, winner: int) -> float:
    tape = Tape()
    return float(classification_loss_node(tape, tape.constant(logits), winner).value)


def total_loss_nodes(
    tape: Tape,
    pred: PredictionNodes,
    gt: np.ndarray,
    valid: np.ndarray,
    exclusion_index: int | None,
    lam: float,
) -> tuple[Node, LossBreakdown]:
    """Winner-take-all NLL plus weighted classification CE.

    Winner selection is non-differentiable and, like the NLL, runs on the
    counted step set (valid minus the excluded goal step).
    """
    counted = _counted_steps(valid, exclusion_index)
    means = np.stack([m.value for m in pred.mode_means])
    winner = select_winner(means, gt, counted)
    nll = gmm_nll_node(tape, pred.mode_means[winner], pred.mode_log_sigmas[winner], gt, counted)
    ce = classification_loss_node(tape, pred.logits, winner)
    total = nm.add(nll, nm.scale(ce, lam))
    breakdown = LossBreakdown(
        regression_nll=float(nll.value),
        classification_ce=float(ce.value),
        total=float(total.value),
        winner_index=winner,
    )
    return total, breakdown


def total_loss(pred, gt, valid, exclusion_index: int | None, lam: float) -> LossBreakdown:
    """Value-only loss for an already-materialized Prediction."""
    tape = Tape()
    nodes = PredictionNodes(
        mode_means=[tape.constant(m) for m in pred.means],
        mode_log_sigmas=[tape.constant(s) for s in pred.log_sigmas],
        logits=tape.constant(pred.logits),
    )
    return total_loss_nodes(tape, nodes, gt, valid, exclusion_index, lam)[1]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, named_params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, p in named_params:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        return state


def optimizer_step(named_params: list[tuple[str, Parameter]], state: AdamState) -> None:
    """Bias-corrected adaptive-moment update; grads are reset afterwards."""
    state.step_count += 1
    t = state.step_count
    for name, p in named_params:
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.value -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.zero_grad()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 16
    lr: float = 1e-3
    lam: float = 1.0
    mask_ratio: float = 0.85
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class TraceRecord:
    epoch: int
    step: int
    regression_nll: float
    classification_ce: float
    total: float


def train(
    scenes: list[Scene],
    model_config: GolferConfig,
    train_config: TrainConfig,
    params: ModelParams | None = None,
) -> tuple[ModelParams, list[TraceRecord]]:
    """Sample-wise training: mask the goal, run the model, step the optimizer.

    Deterministic given (scenes, configs): sample order and goal masking draw
    from seed streams derived from train_config.seed.
    """
    if not scenes:
        raise ValueError("training requires a non-empty dataset")
    if params is None:
        params = init_model_params(model_config)
    named = list(params.named_parameters())
    state = AdamState.create(
        named,
        lr=train_config.lr,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        epsilon=train_config.epsilon,
    )
    order_seed, mask_seed = np.random.SeedSequence(train_config.seed).spawn(2)
    order_rng = np.random.Generator(np.random.PCG64(order_seed))
    mask_rng = np.random.Generator(np.random.PCG64(mask_seed))

    trace: list[TraceRecord] = []
    step = 0
    for epoch in range(train_config.epochs):
        for idx in order_rng.permutation(len(scenes)):
            scene = scenes[idx]
            gc = apply_goal_masking(scene.future, mask_rng, train_config.mask_ratio)
            tape = Tape()
            pred = forward_nodes(tape, scene, gc, params)
            total, breakdown = total_loss_nodes(
                tape, pred, scene.future, scene.future_mask, gc.exclusion_index, train_config.lam
            )
            if not math.isfinite(breakdown.total):
                raise TrainingError(f"non-finite loss at sample {int(idx)} (epoch {epoch}, step {step})")
            tape.backward(total)
            optimizer_step(named, state)
            trace.append(
                TraceRecord(
                    epoch=epoch,
                    step=step,
                    regression_nll=breakdown.regression_nll,
                    classification_ce=breakdown.classification_ce,
                    total=breakdown.total,
                )
            )
            step += 1
    return params, trace
