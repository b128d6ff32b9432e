"""
Q-models for the MABE Laboratory
Parametric, differentiable maps from decision contexts to Q-values
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PositiveInt

from config import EOS_TOKEN, INIT_SCALE, MAX_TABULAR_ROWS
from core_math import validate_q, validate_token
from random_streams import stream


logger = logging.getLogger(__name__)


class TabularNGramSpec(BaseModel):
    kind: Literal["tabular"] = "tabular"
    order: int = Field(default=1, ge=0)


class LinearFeaturesSpec(BaseModel):
    kind: Literal["linear"] = "linear"
    order: int = Field(default=1, ge=0)


class OneHiddenLayerSpec(BaseModel):
    kind: Literal["hidden"] = "hidden"
    embed_dim: PositiveInt = 8
    hidden_dim: PositiveInt = 16
    order: int = Field(default=2, ge=0)


ModelFamilySpec = Union[TabularNGramSpec, LinearFeaturesSpec, OneHiddenLayerSpec]


@dataclass(frozen=True)
class DecisionContext:
    """Input sequence x and generated prefix y_<t"""

    input: Tuple[int, ...]
    prefix: Tuple[int, ...] = ()

    @property
    def step(self) -> int:
        return len(self.prefix)

    def extend(self, token: int) -> "DecisionContext":
        return DecisionContext(self.input, self.prefix + (int(token),))

    def validate(self, vocab_size: int) -> None:
        for token in self.input + self.prefix:
            validate_token(token, vocab_size)
        if EOS_TOKEN in self.prefix:
            raise ValueError(f"Prefix {self.prefix} contains EOS; decoding stops at EOS")


def padded_tail(tokens: Sequence[int], order: int) -> Tuple[int, ...]:
    """Last `order` tokens, left-padded with EOS (which never occurs inside x or a prefix)"""
    if order == 0:
        return ()
    tail = tuple(tokens[-order:])
    return (EOS_TOKEN,) * (order - len(tail)) + tail


class ParameterLayout:
    """Named blocks laid out contiguously in one flat parameter vector"""

    def __init__(self, blocks: List[Tuple[str, Tuple[int, ...]]]):
        self.blocks = blocks
        self.slices: Dict[str, Tuple[slice, Tuple[int, ...]]] = {}
        offset = 0
        for name, shape in blocks:
            size = int(np.prod(shape))
            self.slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.size = offset

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        """Reshaped view of one block; writes go through to `flat`"""
        block, shape = self.slices[name]
        return flat[block].reshape(shape)

    def describe(self) -> List[Dict[str, object]]:
        return [{"name": name, "shape": list(shape)} for name, shape in self.blocks]


@dataclass
class GradientBuffer:
    """Additive gradient accumulator sharing the layout of the parameters"""

    grads: np.ndarray

    @classmethod
    def zeros_like(cls, model: "QModel") -> "GradientBuffer":
        return cls(grads=np.zeros(model.layout.size, dtype=np.float64))

    def merge(self, other: "GradientBuffer") -> None:
        if other.grads.shape != self.grads.shape:
            raise ValueError(f"Cannot merge buffers of sizes {other.grads.shape[0]} and {self.grads.shape[0]}")
        self.grads += other.grads


class QModel:
    """Base class: flat parameters w, a layout, and the Q-value / backprop pair"""

    family_kind = ""

    def __init__(self, spec: ModelFamilySpec, vocab_size: int, seed: int = 0):
        if vocab_size < 2:
            raise ValueError(f"Vocabulary size must be >= 2, got {vocab_size}")
        self.spec = spec
        self.vocab_size = vocab_size
        self.seed = seed
        self.steps = 0
        self.layout = self._build_layout()
        self.params = np.zeros(self.layout.size, dtype=np.float64)

    def _build_layout(self) -> ParameterLayout:
        raise NotImplementedError

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.params, name)

    def q_values(self, ctx: DecisionContext) -> np.ndarray:
        ctx.validate(self.vocab_size)
        return self._forward(ctx)

    def accumulate_gradient(self, ctx: DecisionContext, g: np.ndarray, buf: GradientBuffer) -> None:
        """buf += sum_a g_a dQ_a(ctx; w)/dw"""
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (self.vocab_size,):
            raise ValueError(f"Coefficient vector has shape {g.shape}, expected ({self.vocab_size},)")
        if buf.grads.shape != self.params.shape:
            raise ValueError(f"Gradient buffer has {buf.grads.shape[0]} entries, model has {self.params.shape[0]}")
        ctx.validate(self.vocab_size)
        self._backward(ctx, g, buf)

    def copy(self) -> "QModel":
        clone = self.__class__(self.spec, self.vocab_size, self.seed)
        clone.params = self.params.copy()
        clone.steps = self.steps
        return clone

    def _forward(self, ctx: DecisionContext) -> np.ndarray:
        raise NotImplementedError

    def _backward(self, ctx: DecisionContext, g: np.ndarray, buf: GradientBuffer) -> None:
        raise NotImplementedError


class TabularNGramModel(QModel):
    """One row of Q-values per (x k-tail, prefix k-tail) key"""

    family_kind = "tabular"

    def _build_layout(self) -> ParameterLayout:
        rows = self.vocab_size ** (2 * self.spec.order)
        if rows > MAX_TABULAR_ROWS:
            raise ValueError(
                f"Tabular model with order {self.spec.order} and vocabulary {self.vocab_size} "
                f"needs {rows} rows (limit {MAX_TABULAR_ROWS})"
            )
        return ParameterLayout([("table", (rows, self.vocab_size))])

    def row_index(self, ctx: DecisionContext) -> int:
        index = 0
        for token in padded_tail(ctx.input, self.spec.order) + padded_tail(ctx.prefix, self.spec.order):
            index = index * self.vocab_size + token
        return index

    def set_row(self, ctx: DecisionContext, q: Sequence[float]) -> None:
        self.view("table")[self.row_index(ctx)] = validate_q(q)

    def _forward(self, ctx: DecisionContext) -> np.ndarray:
        return self.view("table")[self.row_index(ctx)].copy()

    def _backward(self, ctx: DecisionContext, g: np.ndarray, buf: GradientBuffer) -> None:
        self.layout.view(buf.grads, "table")[self.row_index(ctx)] += g


class LinearFeaturesModel(QModel):
    """Q = W phi(ctx) with phi the one-hot k-tails of x and of the prefix plus a bias"""

    family_kind = "linear"

    @property
    def feature_dim(self) -> int:
        return 2 * self.spec.order * self.vocab_size + 1

    def _build_layout(self) -> ParameterLayout:
        return ParameterLayout([("weights", (self.vocab_size, 2 * self.spec.order * self.vocab_size + 1))])

    def active_features(self, ctx: DecisionContext) -> List[int]:
        tails = padded_tail(ctx.input, self.spec.order) + padded_tail(ctx.prefix, self.spec.order)
        columns = [position * self.vocab_size + token for position, token in enumerate(tails)]
        columns.append(self.feature_dim - 1)
        return columns

    def _forward(self, ctx: DecisionContext) -> np.ndarray:
        weights = self.view("weights")
        return weights[:, self.active_features(ctx)].sum(axis=1)

    def _backward(self, ctx: DecisionContext, g: np.ndarray, buf: GradientBuffer) -> None:
        grads = self.layout.view(buf.grads, "weights")
        for column in self.active_features(ctx):
            grads[:, column] += g


class OneHiddenLayerModel(QModel):
    """
    Mean-pooled input embedding and prefix-tail embeddings -> tanh layer -> Q

    Layout: embedding (d, E), w1 (H, (1+k)E), b1 (H), w2 (d, H), b2 (d);
    parameter count d*E + H*(1+k)*E + H + d*H + d.
    """

    family_kind = "hidden"

    def _build_layout(self) -> ParameterLayout:
        d, e, h, k = self.vocab_size, self.spec.embed_dim, self.spec.hidden_dim, self.spec.order
        return ParameterLayout([
            ("embedding", (d, e)),
            ("w1", (h, (1 + k) * e)),
            ("b1", (h,)),
            ("w2", (d, h)),
            ("b2", (d,)),
        ])

    def _features(self, ctx: DecisionContext) -> np.ndarray:
        embedding = self.view("embedding")
        if ctx.input:
            pooled = embedding[list(ctx.input)].mean(axis=0)
        else:
            pooled = np.zeros(self.spec.embed_dim)
        tail = [embedding[token] for token in padded_tail(ctx.prefix, self.spec.order)]
        return np.concatenate([pooled] + tail)

    def _forward(self, ctx: DecisionContext) -> np.ndarray:
        z = self._features(ctx)
        hidden = np.tanh(self.view("w1") @ z + self.view("b1"))
        return self.view("w2") @ hidden + self.view("b2")

    def _backward(self, ctx: DecisionContext, g: np.ndarray, buf: GradientBuffer) -> None:
        layout, e = self.layout, self.spec.embed_dim
        z = self._features(ctx)
        hidden = np.tanh(self.view("w1") @ z + self.view("b1"))

        layout.view(buf.grads, "w2")[...] += np.outer(g, hidden)
        layout.view(buf.grads, "b2")[...] += g
        d_pre = (self.view("w2").T @ g) * (1.0 - hidden ** 2)
        layout.view(buf.grads, "w1")[...] += np.outer(d_pre, z)
        layout.view(buf.grads, "b1")[...] += d_pre
        d_z = self.view("w1").T @ d_pre

        d_embedding = layout.view(buf.grads, "embedding")
        if ctx.input:
            share = d_z[:e] / len(ctx.input)
            for token in ctx.input:
                d_embedding[token] += share
        for position, token in enumerate(padded_tail(ctx.prefix, self.spec.order)):
            d_embedding[token] += d_z[(1 + position) * e:(2 + position) * e]


MODEL_FAMILIES = {
    "tabular": TabularNGramModel,
    "linear": LinearFeaturesModel,
    "hidden": OneHiddenLayerModel,
}


def init_model(family: ModelFamilySpec, vocab_size: int, seed: int = 0) -> QModel:
    """
    Create a model; tabular starts at zero, the other families draw
    uniform(-0.1, 0.1) parameters from the seeded init stream
    """
    if family.kind not in MODEL_FAMILIES:
        raise ValueError(f"Unsupported model family: {family.kind}")
    model = MODEL_FAMILIES[family.kind](family, vocab_size, seed)
    if family.kind != "tabular":
        rng = stream(seed, purpose="init")
        model.params[:] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=model.layout.size)
    logger.info(f"Initialized {family.kind} model with {model.layout.size} parameters (d={vocab_size}, seed={seed})")
    return model


def q_values(model: QModel, ctx: DecisionContext) -> np.ndarray:
    return model.q_values(ctx)


def accumulate_gradient(model: QModel, ctx: DecisionContext, g: np.ndarray, buf: GradientBuffer) -> None:
    model.accumulate_gradient(ctx, g, buf)


def finite_difference_gradient(model: QModel, scalar_fn: Callable[[QModel], float], h: float = 1e-5) -> np.ndarray:
    """
    Central differences (f(w + h e_j) - f(w - h e_j)) / 2h for every coordinate

    Each coordinate is restored to its exact original value afterwards.
    """
    if h <= 0:
        raise ValueError(f"Step size must be positive, got {h}")
    gradient = np.zeros_like(model.params)
    for j in range(model.params.shape[0]):
        original = model.params[j]
        try:
            model.params[j] = original + h
            upper = scalar_fn(model)
            model.params[j] = original - h
            lower = scalar_fn(model)
        finally:
            model.params[j] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise ValueError(f"Non-finite objective value at coordinate {j}")
        gradient[j] = (upper - lower) / (2.0 * h)
    return gradient
