"""
Decoders for the MABE Laboratory
Greedy, ancestral sampling, vanilla beam search and exact MAP under a softmax or dual scorer
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import EOS_TOKEN, NODE_BUDGET
from core_math import TokenDistribution, dual_distribution, power_rescale, softmax, temperature_rescale
from q_models import DecisionContext, QModel
from random_streams import categorical
from synthetic_tasks import MaxLengthRule


logger = logging.getLogger(__name__)

Tokens = Tuple[int, ...]


class Scorer(str, Enum):
    SOFTMAX = "softmax"
    DUAL = "dual"


@dataclass
class DecodeResult:
    """An output sequence ending in EOS with its per-step scorer log-probabilities"""

    tokens: Tokens
    step_log_probs: List[float]
    total_log_prob: float
    forced_eos: bool
    candidates_expanded: int
    scorer: Scorer
    zero_step: Optional[int] = None
    budget_exceeded: bool = False

    @classmethod
    def from_steps(cls, tokens: Sequence[int], step_log_probs: Sequence[float], forced_eos: bool,
                   candidates_expanded: int, scorer: Scorer) -> "DecodeResult":
        step_log_probs = [float(v) for v in step_log_probs]
        zero_step = next((t for t, v in enumerate(step_log_probs) if v == -np.inf), None)
        total = -np.inf if zero_step is not None else float(np.sum(step_log_probs))
        return cls(
            tokens=tuple(int(t) for t in tokens),
            step_log_probs=step_log_probs,
            total_log_prob=total,
            forced_eos=forced_eos,
            candidates_expanded=candidates_expanded,
            scorer=Scorer(scorer),
            zero_step=zero_step,
        )

    @property
    def total_log10_prob(self) -> float:
        return self.total_log_prob / np.log(10.0)

    def to_record(self) -> Dict[str, Any]:
        return {
            "tokens": list(self.tokens),
            "step_log_probs": [_finite_or_token(v) for v in self.step_log_probs],
            "total_log10_prob": _finite_or_token(self.total_log10_prob),
            "scorer": self.scorer.value,
            "forced_eos": self.forced_eos,
            "candidates_expanded": self.candidates_expanded,
            "zero_step": self.zero_step,
            "budget_exceeded": self.budget_exceeded,
        }


def _finite_or_token(value: float):
    return "-inf" if value == -np.inf else float(value)


class SearchBudgetExceeded(RuntimeError):
    """Exact MAP search ran out of node budget; carries the best complete answer so far"""

    def __init__(self, budget: int, best_so_far: Optional[DecodeResult]):
        self.budget = budget
        self.best_so_far = best_so_far
        super().__init__(f"Exact MAP search exceeded its budget of {budget} expanded nodes")


def step_distribution(model: QModel, ctx: DecisionContext, scorer: Scorer) -> TokenDistribution:
    q = model.q_values(ctx)
    if Scorer(scorer) is Scorer.DUAL:
        return dual_distribution(q)
    return softmax(q)


def _limit(x: Tokens, max_rule: Optional[MaxLengthRule]) -> int:
    return (max_rule or MaxLengthRule()).limit(x)


def greedy_decode(model: QModel, x: Sequence[int], max_rule: Optional[MaxLengthRule] = None,
                  scorer: Scorer = Scorer.SOFTMAX) -> DecodeResult:
    """Argmax of q at every step; the scorer only changes the reported log-probabilities"""
    x = tuple(x)
    limit = _limit(x, max_rule)
    ctx = DecisionContext(x)
    tokens: List[int] = []
    log_probs: List[float] = []
    expanded = 0

    while True:
        q = model.q_values(ctx)
        dist = step_distribution(model, ctx, scorer)
        expanded += 1
        if ctx.step == limit:
            tokens.append(EOS_TOKEN)
            log_probs.append(dist.log_probs[EOS_TOKEN])
            return DecodeResult.from_steps(tokens, log_probs, True, expanded, scorer)

        token = int(np.argmax(q))
        if Scorer(scorer) is Scorer.DUAL and dist.argmax() != token:
            logger.warning(f"Dual argmax {dist.argmax()} differs from argmax q {token} at step {ctx.step} (negative top factor)")
        tokens.append(token)
        log_probs.append(dist.log_probs[token])
        if token == EOS_TOKEN:
            return DecodeResult.from_steps(tokens, log_probs, False, expanded, scorer)
        ctx = ctx.extend(token)


def sample_decode(model: QModel, x: Sequence[int], scorer: Scorer, beta: float, rng: np.random.Generator,
                  max_rule: Optional[MaxLengthRule] = None) -> DecodeResult:
    """
    Ancestral sampling with temperature beta

    Softmax samples from softmax(q / beta); Dual samples from the dual
    probabilities power-rescaled to p^(1/beta). Reported log-probabilities
    are those of the untempered scorer.
    """
    if beta < 0:
        raise ValueError(f"Temperature must be non-negative, got {beta}")
    x = tuple(x)
    limit = _limit(x, max_rule)
    ctx = DecisionContext(x)
    tokens: List[int] = []
    log_probs: List[float] = []
    expanded = 0

    while True:
        q = model.q_values(ctx)
        dist = step_distribution(model, ctx, scorer)
        expanded += 1
        if ctx.step == limit:
            tokens.append(EOS_TOKEN)
            log_probs.append(dist.log_probs[EOS_TOKEN])
            return DecodeResult.from_steps(tokens, log_probs, True, expanded, scorer)

        if Scorer(scorer) is Scorer.DUAL:
            sampling = power_rescale(dist, beta)
        else:
            sampling = temperature_rescale(q, beta)
        if np.count_nonzero(sampling.probs) == 1:
            token = sampling.argmax()
        else:
            token = categorical(rng, sampling)
        tokens.append(token)
        log_probs.append(dist.log_probs[token])
        if token == EOS_TOKEN:
            return DecodeResult.from_steps(tokens, log_probs, False, expanded, scorer)
        ctx = ctx.extend(token)


@dataclass
class _Hypothesis:
    score: float
    tokens: Tokens
    log_probs: List[float] = field(default_factory=list)
    forced: bool = False

    def key(self) -> Tuple[float, Tokens]:
        return (-self.score, self.tokens)


def beam_search(model: QModel, x: Sequence[int], scorer: Scorer, beam_size: int,
                max_rule: Optional[MaxLengthRule] = None) -> DecodeResult:
    """
    Vanilla beam search without length normalization

    All one-token expansions compete for the beam_size slots; those ending in
    EOS move to the completed pool. Search stops once the pool's best score
    beats every live hypothesis or nothing is left alive.
    """
    if beam_size < 1:
        raise ValueError(f"Beam size must be >= 1, got {beam_size}")
    x = tuple(x)
    limit = _limit(x, max_rule)
    live = [_Hypothesis(0.0, ())]
    pool: List[_Hypothesis] = []
    expanded = 0

    while live:
        candidates: List[_Hypothesis] = []
        for hyp in live:
            dist = step_distribution(model, DecisionContext(x, hyp.tokens), scorer)
            expanded += 1
            if len(hyp.tokens) == limit:
                lp = float(dist.log_probs[EOS_TOKEN])
                pool.append(_Hypothesis(hyp.score + lp, hyp.tokens + (EOS_TOKEN,), hyp.log_probs + [lp], forced=True))
                continue
            for token in range(dist.size):
                lp = float(dist.log_probs[token])
                candidates.append(_Hypothesis(hyp.score + lp, hyp.tokens + (token,), hyp.log_probs + [lp]))

        candidates.sort(key=_Hypothesis.key)
        live = []
        for hyp in candidates[:beam_size]:
            if hyp.tokens[-1] == EOS_TOKEN:
                pool.append(hyp)
            else:
                live.append(hyp)

        if pool and live:
            best = min(pool, key=_Hypothesis.key)
            if all(best.score > hyp.score for hyp in live):
                break

    best = min(pool, key=_Hypothesis.key)
    return DecodeResult.from_steps(best.tokens, best.log_probs, best.forced, expanded, scorer)


def exact_map(model: QModel, x: Sequence[int], scorer: Scorer, max_rule: Optional[MaxLengthRule] = None,
              node_budget: int = NODE_BUDGET) -> DecodeResult:
    """
    Global argmax of the sequence log-probability by depth-first search

    Every step log-probability is <= 0, so a prefix whose cumulative score is
    below the best completed score cannot win. Equal totals resolve to the
    lexicographically smallest sequence.
    """
    x = tuple(x)
    limit = _limit(x, max_rule)
    best: Optional[_Hypothesis] = None
    expanded = 0

    def beats_best(score: float, tokens: Tokens) -> bool:
        if best is None:
            return True
        return score > best.score or (score == best.score and tokens < best.tokens)

    def pruned(score: float, prefix: Tokens) -> bool:
        if best is None:
            return False
        if score < best.score:
            return True
        return score == best.score and prefix > best.tokens[:len(prefix)]

    def visit(hyp: _Hypothesis) -> None:
        nonlocal best, expanded
        if expanded >= node_budget:
            partial = None
            if best is not None:
                partial = DecodeResult.from_steps(best.tokens, best.log_probs, best.forced, expanded, scorer)
                partial.budget_exceeded = True
            logger.warning(f"Exact MAP node budget {node_budget} exhausted")
            raise SearchBudgetExceeded(node_budget, partial)
        dist = step_distribution(model, DecisionContext(x, hyp.tokens), scorer)
        expanded += 1

        if len(hyp.tokens) == limit:
            lp = float(dist.log_probs[EOS_TOKEN])
            done = _Hypothesis(hyp.score + lp, hyp.tokens + (EOS_TOKEN,), hyp.log_probs + [lp], forced=True)
            if beats_best(done.score, done.tokens):
                best = done
            return

        order = sorted(range(dist.size), key=lambda a: (-dist.log_probs[a], a))
        for token in order:
            lp = float(dist.log_probs[token])
            child = _Hypothesis(hyp.score + lp, hyp.tokens + (token,), hyp.log_probs + [lp])
            if token == EOS_TOKEN:
                if beats_best(child.score, child.tokens):
                    best = child
            elif not pruned(child.score, child.tokens):
                visit(child)

    visit(_Hypothesis(0.0, ()))
    return DecodeResult.from_steps(best.tokens, best.log_probs, best.forced, expanded, scorer)


def score_sequence(model: QModel, x: Sequence[int], y: Sequence[int], scorer: Scorer,
                   max_rule: Optional[MaxLengthRule] = None) -> DecodeResult:
    """Score a complete output y (ending in its only EOS) under the scorer"""
    x, y = tuple(x), tuple(int(t) for t in y)
    if not y or y[-1] != EOS_TOKEN or EOS_TOKEN in y[:-1]:
        raise ValueError(f"Output {y} must end in its only EOS")
    limit = _limit(x, max_rule)
    if len(y) - 1 > limit:
        raise ValueError(f"Output {y} has {len(y) - 1} tokens before EOS, above the limit {limit}")
    log_probs = []
    for t, token in enumerate(y):
        dist = step_distribution(model, DecisionContext(x, y[:t]), scorer)
        log_probs.append(dist.log_probs[token])
    return DecodeResult.from_steps(y, log_probs, len(y) - 1 == limit, len(y), scorer)


def sequence_log_prob(model: QModel, x: Sequence[int], y: Sequence[int], scorer: Scorer,
                      max_rule: Optional[MaxLengthRule] = None) -> float:
    return score_sequence(model, x, y, scorer, max_rule).total_log_prob


DECODE_RULES = ("greedy", "sample", "beam", "map")


def run_rule(rule: str, model: QModel, x: Sequence[int], scorer: Scorer, max_rule: Optional[MaxLengthRule] = None,
             beam_size: int = 1, beta: float = 1.0, rng: Optional[np.random.Generator] = None,
             node_budget: int = NODE_BUDGET) -> DecodeResult:
    """Dispatch one decision rule by name"""
    if rule == "greedy":
        return greedy_decode(model, x, max_rule, scorer)
    if rule == "sample":
        if rng is None:
            raise ValueError("Sampling needs an rng stream")
        return sample_decode(model, x, scorer, beta, rng, max_rule)
    if rule == "beam":
        return beam_search(model, x, scorer, beam_size, max_rule)
    if rule == "map":
        try:
            return exact_map(model, x, scorer, max_rule, node_budget)
        except SearchBudgetExceeded as exc:
            if exc.best_so_far is None:
                raise
            return exc.best_so_far
    raise ValueError(f"Unknown decision rule: {rule}")
