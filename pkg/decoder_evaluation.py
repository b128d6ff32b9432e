"""
Decoder Evaluation for the MABE Laboratory
Runs every (decision rule, scorer) pair over fresh task instances and tabulates
task metrics, log10 probability statistics, sequence-level KL and token-level ECE
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, PositiveInt

from config import DEFAULT_BEAM_SIZES, DEFAULT_BETAS, ECE_BINS, EOS_TOKEN, NODE_BUDGET
from decoders import Scorer, run_rule, sample_decode, score_sequence, step_distribution
from q_models import DecisionContext, QModel
from random_streams import stream
from synthetic_tasks import SupportTooLargeError, SyntheticTask
from theory_checks import UtilitySpec


logger = logging.getLogger(__name__)

Tokens = Tuple[int, ...]


class RuleSpec(BaseModel):
    rule: Literal["greedy", "sample", "beam", "map"]
    beam_size: PositiveInt = 1
    beta: float = Field(default=1.0, ge=0.0)

    @property
    def label(self) -> str:
        if self.rule == "beam":
            return f"beam{self.beam_size}"
        if self.rule == "sample":
            return f"sample_beta{self.beta:g}"
        return self.rule


class DecodeSuite(BaseModel):
    """Rules x scorers x temperatures x beam sizes"""

    rules: List[Literal["greedy", "sample", "beam", "map"]] = Field(default_factory=lambda: ["greedy", "sample", "beam", "map"])
    scorers: List[Scorer] = Field(default_factory=lambda: [Scorer.SOFTMAX, Scorer.DUAL])
    betas: List[float] = Field(default_factory=lambda: list(DEFAULT_BETAS))
    beam_sizes: List[PositiveInt] = Field(default_factory=lambda: list(DEFAULT_BEAM_SIZES))
    node_budget: PositiveInt = NODE_BUDGET

    def expand(self) -> List[RuleSpec]:
        specs = []
        for rule in self.rules:
            if rule == "sample":
                specs.extend(RuleSpec(rule=rule, beta=beta) for beta in self.betas)
            elif rule == "beam":
                specs.extend(RuleSpec(rule=rule, beam_size=size) for size in self.beam_sizes)
            else:
                specs.append(RuleSpec(rule=rule))
        return specs


class EvalRow(BaseModel):
    rule: str
    scorer: str
    beam_size: int
    beta: float
    instances: int
    exact_match_pct: float
    expected_utility: float
    own_log10_mean: float
    own_zero_count: int
    reference_log10_mean: float
    reference_zero_count: int
    empty_log10_mean: float
    empty_zero_count: int
    kl_mean: float
    kl_infinite_count: int
    ece: float
    skipped: int


class EvalTable(BaseModel):
    rows: List[EvalRow] = Field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=list(EvalRow.model_fields))

    def row(self, rule: str, scorer: str) -> EvalRow:
        for row in self.rows:
            if row.rule == rule and row.scorer == scorer:
                return row
        raise KeyError(f"No row for rule {rule} and scorer {scorer}")


@dataclass
class Instance:
    index: int
    x: Tokens
    support: Optional[Dict[Tokens, float]]
    reference: Tokens


def finite_mean(values: Sequence[float]) -> Tuple[float, int]:
    """Mean over finite entries and the number of -inf entries; all -inf gives -inf"""
    values = np.asarray(values, dtype=np.float64)
    zeros = int(np.sum(values == -np.inf))
    finite = values[np.isfinite(values)]
    return (float(finite.mean()) if finite.size else -np.inf), zeros


def sequence_kl(model: QModel, task: SyntheticTask, x: Tokens, support: Dict[Tokens, float], scorer: Scorer) -> float:
    """KL(P_true || P_model) by enumeration of the true support; +inf when the model zeros a true output"""
    kl = 0.0
    for y, p in support.items():
        log_model = score_sequence(model, x, y, scorer, task.max_rule).total_log_prob
        if log_model == -np.inf:
            return np.inf
        kl += p * (np.log(p) - log_model)
    return float(kl)


def token_calibration(model: QModel, task: SyntheticTask, instances: Sequence[Instance], scorer: Scorer,
                      seed: int, bins: int = ECE_BINS) -> float:
    """
    Expected calibration error over on-policy contexts

    Contexts come from beta=1 sampling under the scorer. Confidence is the top
    scorer probability; accuracy is the true probability of that token.
    """
    confidences, accuracies = [], []
    for instance in instances:
        rng = stream(seed, worker_id=instance.index, purpose="check")
        result = sample_decode(model, instance.x, scorer, 1.0, rng, task.max_rule)
        steps = len(result.tokens) - 1 if result.forced_eos else len(result.tokens)
        for t in range(steps):
            ctx = DecisionContext(instance.x, result.tokens[:t])
            dist = step_distribution(model, ctx, scorer)
            truth, _ = task.true_token_distribution(ctx)
            confidences.append(dist.probs.max())
            accuracies.append(truth.probs[dist.argmax()])
    if not confidences:
        return float("nan")

    confidences, accuracies = np.array(confidences), np.array(accuracies)
    edges = np.linspace(0.0, 1.0, bins + 1)
    indices = np.clip(np.digitize(confidences, edges[1:-1], right=True), 0, bins - 1)
    ece = 0.0
    for b in range(bins):
        selected = indices == b
        if selected.any():
            ece += selected.mean() * abs(accuracies[selected].mean() - confidences[selected].mean())
    return float(ece)


def draw_instances(task: SyntheticTask, n: int, seed: int) -> List[Instance]:
    """Inputs and reference outputs from the eval stream, with supports where enumerable"""
    rng = stream(seed, purpose="eval")
    instances = []
    for index in range(n):
        x = task.sample_input(rng)
        try:
            support = dict(task.enumerate_support(x))
        except SupportTooLargeError as exc:
            logger.warning(f"Instance {index} has no enumerable support: {exc}")
            support = None
        reference = task.sample_output(x, rng)
        instances.append(Instance(index=index, x=x, support=support, reference=reference))
    return instances


def evaluate_decoders(model: QModel, task: SyntheticTask, scorers: Sequence[Scorer], rules: Sequence[RuleSpec],
                      n: int, seed: int, utility: Optional[UtilitySpec] = None,
                      node_budget: int = NODE_BUDGET) -> EvalTable:
    """Evaluate each (rule, scorer) pair on the same n instances"""
    if n < 1:
        raise ValueError(f"Need at least one instance, got {n}")
    if model.vocab_size != task.vocab_size:
        raise ValueError(f"Model vocabulary {model.vocab_size} does not match task vocabulary {task.vocab_size}")
    utility = utility or UtilitySpec()
    instances = draw_instances(task, n, seed)
    enumerable = [inst for inst in instances if inst.support is not None]
    empty = (EOS_TOKEN,)

    table = EvalTable()
    for scorer in scorers:
        scorer = Scorer(scorer)
        kls = [sequence_kl(model, task, inst.x, inst.support, scorer) for inst in enumerable]
        finite_kls = [kl for kl in kls if np.isfinite(kl)]
        ece = token_calibration(model, task, instances, scorer, seed)
        reference_mean, reference_zeros = finite_mean([
            score_sequence(model, inst.x, inst.reference, scorer, task.max_rule).total_log10_prob for inst in instances
        ])
        empty_mean, empty_zeros = finite_mean([
            score_sequence(model, inst.x, empty, scorer, task.max_rule).total_log10_prob for inst in instances
        ])

        for spec in rules:
            hits, utilities, own = 0, [], []
            for inst in instances:
                rng = stream(seed, worker_id=inst.index, purpose="decode")
                result = run_rule(spec.rule, model, inst.x, scorer, task.max_rule, spec.beam_size, spec.beta, rng, node_budget)
                hits += result.tokens == inst.reference
                own.append(result.total_log10_prob)
                if inst.support is not None:
                    utilities.append(utility.utility(result.tokens, inst.support))
            own_mean, own_zeros = finite_mean(own)
            table.rows.append(EvalRow(
                rule=spec.label,
                scorer=scorer.value,
                beam_size=spec.beam_size,
                beta=spec.beta,
                instances=n,
                exact_match_pct=100.0 * hits / n,
                expected_utility=float(np.mean(utilities)) if utilities else float("nan"),
                own_log10_mean=own_mean,
                own_zero_count=own_zeros,
                reference_log10_mean=reference_mean,
                reference_zero_count=reference_zeros,
                empty_log10_mean=empty_mean,
                empty_zero_count=empty_zeros,
                kl_mean=float(np.mean(finite_kls)) if finite_kls else float("inf"),
                kl_infinite_count=len(kls) - len(finite_kls),
                ece=ece,
                skipped=n - len(enumerable),
            ))
        logger.info(f"Evaluated {len(rules)} rules under the {scorer.value} scorer on {n} instances")
    return table
