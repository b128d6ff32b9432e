"""
Synthetic Tasks for the MABE Laboratory
Sequence-generation tasks whose ground-truth conditionals are known exactly
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PositiveInt, field_validator, model_validator

from config import EOS_TOKEN, MAX_LENGTH_MINIMUM, MAX_LENGTH_MULTIPLIER, SUPPORT_CAP
from core_math import TokenDistribution
from q_models import DecisionContext
from random_streams import categorical


logger = logging.getLogger(__name__)

Sequence_ = Tuple[int, ...]


class SupportTooLargeError(ValueError):
    """The exact support of P_true(.|x) exceeds the enumeration cap"""

    def __init__(self, cap: int, lower_bound: int):
        self.cap = cap
        self.lower_bound = lower_bound
        super().__init__(f"Support has at least {lower_bound} members, above the cap of {cap}")


@dataclass(frozen=True)
class MaxLengthRule:
    """At most max(multiplier * |x|, minimum) non-EOS tokens; EOS is forced after that"""

    multiplier: int = MAX_LENGTH_MULTIPLIER
    minimum: int = MAX_LENGTH_MINIMUM

    def limit(self, x: Sequence_) -> int:
        return max(self.multiplier * len(x), self.minimum)


@dataclass(frozen=True)
class LabeledPair:
    """Input x and output y, where y ends with its only EOS"""

    x: Sequence_
    y: Sequence_

    def decision_steps(self) -> List[Tuple[DecisionContext, int]]:
        return [(DecisionContext(self.x, self.y[:t]), self.y[t]) for t in range(len(self.y))]


class BanditSpec(BaseModel):
    kind: Literal["bandit"] = "bandit"
    vocab_size: int = Field(default=3, ge=2)
    probs: List[float] = Field(default_factory=lambda: [0.7, 0.3])

    @model_validator(mode="after")
    def check_probs(self) -> "BanditSpec":
        if len(self.probs) != self.vocab_size - 1:
            raise ValueError(f"probs must index the {self.vocab_size - 1} non-EOS actions, got {len(self.probs)}")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ValueError("probs must be non-negative and sum to 1")
        return self


class NoisyCopySpec(BaseModel):
    kind: Literal["noisy_copy"] = "noisy_copy"
    vocab_size: int = Field(default=5, ge=2)
    length: PositiveInt = 3
    eps: float = Field(default=0.1, ge=0.0, lt=1.0)


class Phrase(BaseModel):
    tokens: List[int] = Field(min_length=1, max_length=3)
    weight: float = Field(gt=0.0)


class SynonymLookupSpec(BaseModel):
    kind: Literal["synonym_lookup"] = "synonym_lookup"
    vocab_size: int = Field(default=6, ge=3)
    input_length: PositiveInt = 2
    table: Dict[int, List[Phrase]] = Field(default_factory=lambda: {
        1: [Phrase(tokens=[1], weight=0.6), Phrase(tokens=[2, 3], weight=0.4)],
        2: [Phrase(tokens=[4], weight=0.5), Phrase(tokens=[5], weight=0.3), Phrase(tokens=[4, 5], weight=0.2)],
    })
    truncation_prob: float = Field(default=0.0, ge=0.0, lt=1.0)

    @field_validator("table")
    @classmethod
    def normalize_rows(cls, table: Dict[int, List[Phrase]]) -> Dict[int, List[Phrase]]:
        if not table:
            raise ValueError("table needs at least one input token")
        normalized = {}
        for token, phrases in table.items():
            if token == EOS_TOKEN:
                raise ValueError("EOS cannot be an input token")
            if not phrases:
                raise ValueError(f"row {token} has no phrases")
            total = sum(p.weight for p in phrases)
            normalized[token] = [Phrase(tokens=p.tokens, weight=p.weight / total) for p in phrases]
        return normalized

    @model_validator(mode="after")
    def check_tokens(self) -> "SynonymLookupSpec":
        for token, phrases in self.table.items():
            if not 0 < token < self.vocab_size:
                raise ValueError(f"input token {token} out of range")
            for phrase in phrases:
                if any(not 0 < t < self.vocab_size for t in phrase.tokens):
                    raise ValueError(f"phrase {phrase.tokens} of row {token} uses EOS or out-of-range tokens")
        return self


TaskSpec = Union[BanditSpec, NoisyCopySpec, SynonymLookupSpec]


class SyntheticTask:
    """Base class of tasks with an exact conditional oracle"""

    def __init__(self, spec: TaskSpec, max_rule: Optional[MaxLengthRule] = None):
        self.spec = spec
        self.vocab_size = spec.vocab_size
        self.max_rule = max_rule or MaxLengthRule()
        self.non_eos = np.arange(1, self.vocab_size)

    def sample_input(self, rng: np.random.Generator) -> Sequence_:
        raise NotImplementedError

    def sample_output(self, x: Sequence_, rng: np.random.Generator) -> Sequence_:
        raise NotImplementedError

    def sample_pair(self, rng: np.random.Generator) -> LabeledPair:
        x = self.sample_input(rng)
        return LabeledPair(x=x, y=self.sample_output(x, rng))

    def eos_distribution(self) -> TokenDistribution:
        return TokenDistribution.one_hot(self.vocab_size, EOS_TOKEN)

    def off_support_distribution(self) -> TokenDistribution:
        probs = np.full(self.vocab_size, 1.0 / (self.vocab_size - 1))
        probs[EOS_TOKEN] = 0.0
        return TokenDistribution.from_probs(probs / probs.sum())

    def true_token_distribution(self, ctx: DecisionContext) -> Tuple[TokenDistribution, bool]:
        """
        Exact P_true(y_t | x, y_<t) and whether the context is reachable

        Unreachable contexts get the uniform law over non-EOS tokens.
        """
        if ctx.step >= self.max_rule.limit(ctx.input):
            return self.eos_distribution(), True
        dist = self._conditional(ctx)
        if dist is None:
            logger.debug(f"Unreachable context probed: x={ctx.input} prefix={ctx.prefix}")
            return self.off_support_distribution(), False
        return dist, True

    def _conditional(self, ctx: DecisionContext) -> Optional[TokenDistribution]:
        raise NotImplementedError

    def enumerate_support(self, x: Sequence_, cap: int = SUPPORT_CAP) -> List[Tuple[Sequence_, float]]:
        raise NotImplementedError

    def close(self, tokens: Sequence_, x: Sequence_) -> Sequence_:
        """Apply the forced-EOS rule to a raw token sequence"""
        return tuple(tokens[:self.max_rule.limit(x)]) + (EOS_TOKEN,)


class BanditTask(SyntheticTask):
    """Empty input; one action token from probs, then a deterministic EOS"""

    def sample_input(self, rng: np.random.Generator) -> Sequence_:
        return ()

    def sample_output(self, x: Sequence_, rng: np.random.Generator) -> Sequence_:
        action = 1 + categorical(rng, np.asarray(self.spec.probs))
        return (action, EOS_TOKEN)

    def action_distribution(self) -> TokenDistribution:
        return TokenDistribution.from_probs([0.0] + list(self.spec.probs))

    def _conditional(self, ctx: DecisionContext) -> Optional[TokenDistribution]:
        if ctx.input:
            return None
        if ctx.step == 0:
            return self.action_distribution()
        return None

    def enumerate_support(self, x: Sequence_, cap: int = SUPPORT_CAP) -> List[Tuple[Sequence_, float]]:
        support = [((a + 1, EOS_TOKEN), float(p)) for a, p in enumerate(self.spec.probs) if p > 0]
        if len(support) > cap:
            raise SupportTooLargeError(cap, len(support))
        return support


class NoisyCopyTask(SyntheticTask):
    """
    Copy x then stop; each copied token is replaced, with probability eps,
    by a uniform draw over the non-EOS tokens
    """

    def sample_input(self, rng: np.random.Generator) -> Sequence_:
        return tuple(int(t) for t in rng.integers(1, self.vocab_size, size=self.spec.length))

    def position_distribution(self, token: int) -> np.ndarray:
        probs = np.zeros(self.vocab_size)
        probs[1:] = self.spec.eps / (self.vocab_size - 1)
        probs[token] += 1.0 - self.spec.eps
        return probs

    def sample_output(self, x: Sequence_, rng: np.random.Generator) -> Sequence_:
        tokens = []
        for token in x:
            if rng.random() < self.spec.eps:
                tokens.append(int(rng.integers(1, self.vocab_size)))
            else:
                tokens.append(token)
        return self.close(tokens, x)

    def _conditional(self, ctx: DecisionContext) -> Optional[TokenDistribution]:
        t, x = ctx.step, ctx.input
        if t > len(x):
            return None
        if self.spec.eps == 0.0 and ctx.prefix != x[:t]:
            return None
        if t == len(x):
            return self.eos_distribution()
        return TokenDistribution.from_probs(self.position_distribution(x[t]))

    def enumerate_support(self, x: Sequence_, cap: int = SUPPORT_CAP) -> List[Tuple[Sequence_, float]]:
        if self.spec.eps == 0.0:
            return [(self.close(x, x), 1.0)]
        count = (self.vocab_size - 1) ** len(x)
        if count > cap:
            raise SupportTooLargeError(cap, count)
        per_position = [self.position_distribution(token) for token in x]
        support = []
        for tokens in itertools.product(range(1, self.vocab_size), repeat=len(x)):
            prob = float(np.prod([per_position[i][t] for i, t in enumerate(tokens)]))
            support.append((self.close(tokens, x), prob))
        return support


class SynonymLookupTask(SyntheticTask):
    """
    Each input token expands into one of its weighted phrases; the output is
    the concatenation, closed by EOS (forced EOS truncates long outputs)
    """

    def __init__(self, spec: TaskSpec, max_rule: Optional[MaxLengthRule] = None):
        super().__init__(spec, max_rule)
        self._support_cache: Dict[Tuple[Sequence_, int], Dict[Sequence_, float]] = {}

    def sample_input(self, rng: np.random.Generator) -> Sequence_:
        keys = sorted(self.spec.table)
        return tuple(keys[int(i)] for i in rng.integers(0, len(keys), size=self.spec.input_length))

    def sample_output(self, x: Sequence_, rng: np.random.Generator) -> Sequence_:
        if self.spec.truncation_prob > 0 and rng.random() < self.spec.truncation_prob:
            return (EOS_TOKEN,)
        tokens: List[int] = []
        for token in x:
            phrases = self.spec.table[token]
            choice = categorical(rng, np.array([p.weight for p in phrases]))
            tokens.extend(phrases[choice].tokens)
        return self.close(tokens, x)

    def enumerate_support(self, x: Sequence_, cap: int = SUPPORT_CAP) -> List[Tuple[Sequence_, float]]:
        return [(y, p) for y, p in self._support(tuple(x), cap).items()]

    def _support(self, x: Sequence_, cap: int) -> Dict[Sequence_, float]:
        cached = self._support_cache.get((x, cap))
        if cached is None:
            cached = self._support_cache[(x, cap)] = self._enumerate(x, cap)
        return cached

    def _enumerate(self, x: Sequence_, cap: int) -> Dict[Sequence_, float]:
        if any(token not in self.spec.table for token in x):
            return {}
        keep = 1.0 - self.spec.truncation_prob
        support: Dict[Sequence_, float] = {}
        rows = [self.spec.table[token] for token in x]
        for choice in itertools.product(*rows):
            tokens = [t for phrase in choice for t in phrase.tokens]
            y = self.close(tokens, x)
            support[y] = support.get(y, 0.0) + keep * float(np.prod([phrase.weight for phrase in choice]))
            if len(support) > cap:
                raise SupportTooLargeError(cap, len(support))
        if self.spec.truncation_prob > 0:
            empty = (EOS_TOKEN,)
            support[empty] = support.get(empty, 0.0) + self.spec.truncation_prob
        return support

    def _conditional(self, ctx: DecisionContext) -> Optional[TokenDistribution]:
        """Marginalize the enumerated support over outputs extending the prefix"""
        support = self._support(tuple(ctx.input), SUPPORT_CAP)
        t = ctx.step
        mass = np.zeros(self.vocab_size)
        for y, p in support.items():
            if len(y) > t and y[:t] == ctx.prefix:
                mass[y[t]] += p
        total = mass.sum()
        if total <= 0:
            return None
        return TokenDistribution.from_probs(mass / total)


TASK_KINDS = {
    "bandit": BanditTask,
    "noisy_copy": NoisyCopyTask,
    "synonym_lookup": SynonymLookupTask,
}


def build_task(spec: TaskSpec, max_rule: Optional[MaxLengthRule] = None) -> SyntheticTask:
    if spec.kind not in TASK_KINDS:
        raise ValueError(f"Unsupported task kind: {spec.kind}")
    return TASK_KINDS[spec.kind](spec, max_rule)


def sample_pair(task: SyntheticTask, rng: np.random.Generator) -> LabeledPair:
    return task.sample_pair(rng)


def true_token_distribution(task: SyntheticTask, ctx: DecisionContext) -> Tuple[TokenDistribution, bool]:
    return task.true_token_distribution(ctx)


def enumerate_support(task: SyntheticTask, x: Sequence_, cap: int = SUPPORT_CAP) -> List[Tuple[Sequence_, float]]:
    return task.enumerate_support(tuple(x), cap)


def support_lookup(task: SyntheticTask, x: Sequence_, cap: int = SUPPORT_CAP) -> Dict[Sequence_, float]:
    return dict(enumerate_support(task, x, cap))
