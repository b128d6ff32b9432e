"""
MABE(lambda) Trainer for the MABE Laboratory
Minibatch gradient ascent with the lambda-perturbed estimator; lambda = 1 is MLE
"""

import logging
import time
from typing import Annotated, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_validator, model_validator

from config import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR_HIDDEN, ADAM_LR_LINEAR, ADAM_LR_TABULAR,
    CONVERGENCE_TOL, DEFAULT_BATCH_SIZE, DEFAULT_EVAL_EVERY, DEFAULT_PROBE_SIZE, DEFAULT_STEPS,
    MOMENTUM_BETA,
)
from core_math import expected_q, mabe_coefficients, softmax
from decoders import greedy_decode
from q_models import DecisionContext, GradientBuffer, QModel
from random_streams import stream
from synthetic_tasks import LabeledPair, SyntheticTask


logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """A decision step produced a NaN or infinite gradient contribution"""

    def __init__(self, step: int, pair_index: int):
        self.step = step
        self.pair_index = pair_index
        super().__init__(f"Non-finite gradient at training step {step}, pair {pair_index}")


class SGDSpec(BaseModel):
    kind: Literal["sgd"] = "sgd"
    lr: float = Field(gt=0.0)


class MomentumSpec(BaseModel):
    kind: Literal["momentum"] = "momentum"
    lr: float = Field(gt=0.0)
    beta: float = Field(default=MOMENTUM_BETA, ge=0.0, lt=1.0)


class AdamSpec(BaseModel):
    kind: Literal["adam"] = "adam"
    lr: float = Field(gt=0.0)
    beta1: float = Field(default=ADAM_BETA1, ge=0.0, lt=1.0)
    beta2: float = Field(default=ADAM_BETA2, ge=0.0, lt=1.0)
    eps: float = Field(default=ADAM_EPS, gt=0.0)


OptimizerSpec = Annotated[Union[SGDSpec, MomentumSpec, AdamSpec], Field(discriminator="kind")]

DEFAULT_LEARNING_RATES = {
    "tabular": ADAM_LR_TABULAR,
    "linear": ADAM_LR_LINEAR,
    "hidden": ADAM_LR_HIDDEN,
}


def default_optimizer(family_kind: str) -> AdamSpec:
    return AdamSpec(lr=DEFAULT_LEARNING_RATES[family_kind])


class SGD:
    def __init__(self, spec: SGDSpec, size: int):
        self.lr = spec.lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params += self.lr * grad


class Momentum:
    def __init__(self, spec: MomentumSpec, size: int):
        self.lr = spec.lr
        self.beta = spec.beta
        self.velocity = np.zeros(size)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.velocity = self.beta * self.velocity + grad
        params += self.lr * self.velocity


class Adam:
    def __init__(self, spec: AdamSpec, size: int):
        self.lr = spec.lr
        self.beta1 = spec.beta1
        self.beta2 = spec.beta2
        self.eps = spec.eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * (grad * grad)
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params += self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = {"sgd": SGD, "momentum": Momentum, "adam": Adam}


def build_optimizer(spec: OptimizerSpec, size: int):
    return OPTIMIZERS[spec.kind](spec, size)


class TrainConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    lambda_: float = Field(default=1.0, alias="lambda")
    optimizer: Optional[OptimizerSpec] = None
    batch_size: PositiveInt = DEFAULT_BATCH_SIZE
    steps: PositiveInt = DEFAULT_STEPS
    seed: int = Field(default=0, ge=0)
    label_smoothing: float = Field(default=0.0, ge=0.0, lt=1.0)
    eval_every: PositiveInt = DEFAULT_EVAL_EVERY
    dataset_size: Optional[PositiveInt] = None
    convergence_tol: float = Field(default=CONVERGENCE_TOL, ge=0.0)
    probe_size: int = Field(default=DEFAULT_PROBE_SIZE, ge=0)
    checkpoint_every: Optional[PositiveInt] = None

    @field_validator("lambda_")
    @classmethod
    def finite_lambda(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("lambda must be finite")
        return value

    @model_validator(mode="after")
    def smoothing_requires_mle(self) -> "TrainConfig":
        if self.label_smoothing > 0 and self.lambda_ != 1.0:
            raise ValueError(f"label_smoothing > 0 is only valid with lambda = 1, got lambda = {self.lambda_}")
        return self


class TrainLogRow(BaseModel):
    step: int
    j_data: float
    j_seq: float
    j_token: float
    j_mabe: float
    grad_norm: float
    greedy_exact_match: float
    wall_clock_ms: float


LOG_COLUMNS = list(TrainLogRow.model_fields)


class PairSource:
    """
    Minibatch source over the data stream

    Streams fresh pairs by default; with a dataset size, draws a fixed data
    set once and walks seeded per-epoch permutations of it.
    """

    def __init__(self, task: SyntheticTask, config: TrainConfig):
        self.task = task
        self.batch_size = config.batch_size
        self.rng = stream(config.seed, purpose="data")
        self.dataset: Optional[List[LabeledPair]] = None
        self.order: List[int] = []
        if config.dataset_size is not None:
            self.dataset = [task.sample_pair(self.rng) for _ in range(config.dataset_size)]

    def next_batch(self) -> List[LabeledPair]:
        if self.dataset is None:
            batch = [self.task.sample_pair(self.rng) for _ in range(self.batch_size)]
        elif self.batch_size >= len(self.dataset):
            batch = list(self.dataset)
        else:
            if len(self.order) < self.batch_size:
                self.order = [int(i) for i in self.rng.permutation(len(self.dataset))]
            batch = [self.dataset[i] for i in self.order[:self.batch_size]]
            self.order = self.order[self.batch_size:]
        return batch


def batch_gradient(model: QModel, batch: Sequence[LabeledPair], lam: float,
                   label_smoothing: float = 0.0, step: int = 0) -> GradientBuffer:
    """
    Sum over pairs and steps of the MABE(lambda) contribution, coefficients frozen at current w

    Steps are accumulated one by one in pair order, never merged, so lambda = 1
    adds exactly the terms of a plain log-likelihood loop in the same order.
    Coefficients of a repeated (context, target) step are computed once per call.
    """
    buf = GradientBuffer.zeros_like(model)
    coefficients: Dict[Tuple[DecisionContext, int], np.ndarray] = {}
    for pair_index, pair in enumerate(batch):
        for ctx, target in pair.decision_steps():
            g = coefficients.get((ctx, target))
            if g is None:
                q = model.q_values(ctx)
                if not np.all(np.isfinite(q)):
                    raise NonFiniteGradientError(step, pair_index)
                g = coefficients[(ctx, target)] = mabe_coefficients(q, target, lam, label_smoothing)
            model.accumulate_gradient(ctx, g, buf)
        if not np.all(np.isfinite(buf.grads)):
            raise NonFiniteGradientError(step, pair_index)
    return buf


def eval_log_likelihood(model: QModel, batch: Sequence[LabeledPair]) -> Tuple[float, float, float]:
    """(J_data, J_seq, J_token): total log-likelihood, per sequence, per token (EOS counted)"""
    if not batch:
        raise ValueError("Batch must be nonempty")
    j_data = 0.0
    tokens = 0
    for pair in batch:
        for ctx, target in pair.decision_steps():
            j_data += float(softmax(model.q_values(ctx)).log_probs[target])
        tokens += len(pair.y)
    return j_data, j_data / len(batch), j_data / tokens


def total_j_mabe(model: QModel, batch: Sequence[LabeledPair]) -> float:
    """Sum over pairs and steps of Q(y_t) - E_softmax[Q]"""
    total = 0.0
    for pair in batch:
        for ctx, target in pair.decision_steps():
            q = model.q_values(ctx)
            total += float(q[target] - expected_q(softmax(q), q))
    return total


def eval_j_mabe(model: QModel, batch: Sequence[LabeledPair]) -> float:
    if not batch:
        raise ValueError("Batch must be nonempty")
    return total_j_mabe(model, batch) / len(batch)


def greedy_exact_match(model: QModel, task: SyntheticTask, probe: Sequence[LabeledPair]) -> float:
    if not probe:
        return float("nan")
    hits = sum(greedy_decode(model, pair.x, task.max_rule).tokens == pair.y for pair in probe)
    return hits / len(probe)


def mabe_train(model: QModel, task: SyntheticTask, config: TrainConfig,
               checkpoint_fn: Optional[Callable[[QModel, int], None]] = None) -> Tuple[QModel, List[TrainLogRow]]:
    """
    Run MABE(lambda) training on a copy of `model`

    Every step draws B pairs, accumulates mabe_coefficients through the
    model, averages over B and applies one ascent step.
    """
    if model.vocab_size != task.vocab_size:
        raise ValueError(f"Model vocabulary {model.vocab_size} does not match task vocabulary {task.vocab_size}")

    trained = model.copy()
    optimizer_spec = config.optimizer or default_optimizer(trained.family_kind)
    optimizer = build_optimizer(optimizer_spec, trained.layout.size)
    source = PairSource(task, config)
    probe_rng = stream(config.seed, purpose="probe")
    probe = [task.sample_pair(probe_rng) for _ in range(config.probe_size)]

    logger.info(
        f"Training {trained.family_kind} model: lambda={config.lambda_}, optimizer={optimizer_spec.kind}"
        f"(lr={optimizer_spec.lr}), B={config.batch_size}, K={config.steps}"
    )
    start = time.perf_counter()
    rows: List[TrainLogRow] = []

    for k in range(1, config.steps + 1):
        batch = source.next_batch()
        buf = batch_gradient(trained, batch, config.lambda_, config.label_smoothing, step=k)
        grad = buf.grads / len(batch)
        converged = bool(np.max(np.abs(grad), initial=0.0) < config.convergence_tol)
        last = converged or k == config.steps

        if k == 1 or k % config.eval_every == 0 or last:
            j_data, j_seq, j_token = eval_log_likelihood(trained, batch)
            rows.append(TrainLogRow(
                step=k,
                j_data=j_data,
                j_seq=j_seq,
                j_token=j_token,
                j_mabe=eval_j_mabe(trained, batch),
                grad_norm=float(np.linalg.norm(grad)),
                greedy_exact_match=greedy_exact_match(trained, task, probe),
                wall_clock_ms=(time.perf_counter() - start) * 1000.0,
            ))

        if converged:
            logger.info(f"Converged at step {k}: max gradient below {config.convergence_tol}")
            break

        optimizer.step(trained.params, grad)
        trained.steps += 1

        if checkpoint_fn and config.checkpoint_every and trained.steps % config.checkpoint_every == 0:
            checkpoint_fn(trained, trained.steps)

    logger.info(f"Training finished after {trained.steps} updates in {(time.perf_counter() - start):.2f}s")
    return trained, rows
