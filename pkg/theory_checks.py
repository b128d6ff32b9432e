"""
Theory Checks for the MABE Laboratory
Executable versions of the gradient identity, the tabular fixed point, the
objective landscape and the decision-theoretic optimality oracles
"""

import logging
from typing import Any, Dict, List, Literal, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import brentq

from config import (
    EOS_TOKEN, FD_STEP, FIXED_POINT_LR, FIXED_POINT_MAX_STEPS, FIXED_POINT_TOL, LANDSCAPE_GRID,
)
from core_math import TokenDistribution, cov_coefficients, dual_distribution, expected_q, mle_coefficients, softmax
from mabe_trainer import batch_gradient, eval_log_likelihood, total_j_mabe
from q_models import GradientBuffer, QModel, finite_difference_gradient
from synthetic_tasks import LabeledPair, SupportTooLargeError, SyntheticTask


logger = logging.getLogger(__name__)

Tokens = Tuple[int, ...]
MAX_FIXED_POINT_VOCAB = 64


# ---------------------------------------------------------------------------
# Gradient identity
# ---------------------------------------------------------------------------

class GradientIdentityReport(BaseModel):
    family: str
    parameters: int
    decision_steps: int
    logp_grad: List[float]
    mabe_grad: List[float]
    cov_grad: List[float]
    max_residual: float
    max_relative_residual: float
    analytic_residual: float
    lambda_one_bit_exact: bool
    tolerance: float
    passed: bool


def cov_gradient(model: QModel, batch: Sequence[LabeledPair]) -> np.ndarray:
    """Backprop of the per-step covariance coefficients summed over the batch"""
    buf = GradientBuffer.zeros_like(model)
    for pair in batch:
        for ctx, _ in pair.decision_steps():
            model.accumulate_gradient(ctx, cov_coefficients(model.q_values(ctx)), buf)
    return buf.grads


def _coefficient_gradient(model: QModel, batch: Sequence[LabeledPair], coefficients) -> np.ndarray:
    buf = GradientBuffer.zeros_like(model)
    for pair in batch:
        for ctx, target in pair.decision_steps():
            model.accumulate_gradient(ctx, coefficients(model.q_values(ctx), target), buf)
    return buf.grads


def verify_gradient_identity(model: QModel, batch: Sequence[LabeledPair], h: float = FD_STEP,
                             tolerance: float = 1e-4) -> GradientIdentityReport:
    """
    Check grad(log P) = grad(J_MABE) + sum_t cov_t

    Both objective gradients come from central differences of the forward
    evaluators; the covariance term comes from coefficient backprop.
    """
    if not batch:
        raise ValueError("Batch must be nonempty")
    probe = model.copy()
    logp_grad = finite_difference_gradient(probe, lambda m: eval_log_likelihood(m, batch)[0], h)
    mabe_grad = finite_difference_gradient(probe, lambda m: total_j_mabe(m, batch), h)
    cov_grad = cov_gradient(probe, batch)

    residual = logp_grad - mabe_grad - cov_grad
    max_residual = float(np.max(np.abs(residual)))
    scale = max(float(np.max(np.abs(logp_grad))), 1e-12)

    mle_analytic = _coefficient_gradient(probe, batch, mle_coefficients)
    mabe_analytic = _coefficient_gradient(probe, batch, lambda q, y: mle_coefficients(q, y) - cov_coefficients(q))
    analytic_residual = float(np.max(np.abs(mle_analytic - (mabe_analytic + cov_grad))))

    one_hot_reference = _coefficient_gradient(probe, batch, lambda q, y: np.eye(q.shape[0])[y] - softmax(q).probs)
    bit_exact = bool(np.array_equal(batch_gradient(probe, batch, 1.0).grads, one_hot_reference))

    report = GradientIdentityReport(
        family=probe.family_kind,
        parameters=probe.layout.size,
        decision_steps=sum(len(pair.y) for pair in batch),
        logp_grad=logp_grad.tolist(),
        mabe_grad=mabe_grad.tolist(),
        cov_grad=cov_grad.tolist(),
        max_residual=max_residual,
        max_relative_residual=max_residual / scale,
        analytic_residual=analytic_residual,
        lambda_one_bit_exact=bit_exact,
        tolerance=tolerance,
        passed=bool(max_residual / scale <= tolerance and analytic_residual <= 1e-9 and bit_exact),
    )
    logger.info(
        f"Gradient identity on {report.family} ({report.parameters} params): "
        f"relative residual {report.max_relative_residual:.3e}, analytic {analytic_residual:.3e}"
    )
    return report


# ---------------------------------------------------------------------------
# Tabular fixed point and landscape
# ---------------------------------------------------------------------------

class FixedPointReport(BaseModel):
    p_true: List[float]
    q_star: List[float]
    p_star: List[float]
    residuals: List[float]
    max_residual: float
    margin: Optional[float] = None
    undesired_spread: Optional[float] = None
    dual_probs: List[float]
    objective: float
    steps: int
    converged: bool


def _as_probs(p_true: Union[TokenDistribution, Sequence[float]]) -> np.ndarray:
    if isinstance(p_true, TokenDistribution):
        return p_true.probs
    return TokenDistribution.from_probs(p_true).probs


def objective_j(p_true: Union[TokenDistribution, Sequence[float]], q: Sequence[float]) -> float:
    """J(q) = E_{P_true}[Q] - E_{softmax(q)}[Q]"""
    probs = _as_probs(p_true)
    q = np.asarray(q, dtype=np.float64)
    return expected_q(probs, q) - expected_q(softmax(q), q)


def fixed_point_gradient(probs: np.ndarray, q: np.ndarray) -> np.ndarray:
    """dJ/dq_j = P_true(j) - p_j (1 + q_j - E_p[Q])"""
    p = softmax(q)
    return probs - p.probs * (1.0 + q - expected_q(p, q))


def tabular_fixed_point(p_true: Union[TokenDistribution, Sequence[float]], lr: float = FIXED_POINT_LR,
                        tol: float = FIXED_POINT_TOL, max_steps: int = FIXED_POINT_MAX_STEPS) -> FixedPointReport:
    """Plain gradient ascent on J(q) from zero until the largest gradient entry is below tol"""
    probs = _as_probs(p_true)
    d = probs.shape[0]
    if d > MAX_FIXED_POINT_VOCAB:
        raise ValueError(f"Fixed-point search supports at most {MAX_FIXED_POINT_VOCAB} actions, got {d}")

    q = np.zeros(d)
    converged = False
    steps = 0
    for steps in range(max_steps + 1):
        grad = fixed_point_gradient(probs, q)
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        q = q + lr * grad
    if not converged:
        logger.warning(f"Fixed point not reached within {max_steps} steps")

    p = softmax(q)
    residuals = np.abs(p.probs * (1.0 + q - expected_q(p, q)) - probs)
    support = probs > 0
    margin = spread = None
    if support.any() and not support.all():
        margin = float(q[support].max() - q[~support].max())
        spread = float(q[~support].max() - q[~support].min())

    return FixedPointReport(
        p_true=probs.tolist(),
        q_star=q.tolist(),
        p_star=p.probs.tolist(),
        residuals=residuals.tolist(),
        max_residual=float(residuals.max()),
        margin=margin,
        undesired_spread=spread,
        dual_probs=dual_distribution(q).probs.tolist(),
        objective=objective_j(probs, q),
        steps=steps,
        converged=converged,
    )


def random_p_true(rng: np.random.Generator, d: int, support_size: int) -> np.ndarray:
    """Dirichlet weights on a random strict subset of the d actions"""
    if not 1 <= support_size < d:
        raise ValueError(f"Support size must be in [1, {d - 1}], got {support_size}")
    probs = np.zeros(d)
    members = rng.choice(d, size=support_size, replace=False)
    probs[members] = rng.dirichlet(np.ones(support_size))
    return probs / probs.sum()


class LandscapeReport(BaseModel):
    p_true: List[float]
    gauge_token: int
    q_free: List[float]
    j_values: List[float]
    maxima: List[Tuple[float, float]]


def j_landscape(p_true: Union[TokenDistribution, Sequence[float]], gauge_token: int = 0,
                grid: Tuple[float, float, float] = LANDSCAPE_GRID) -> LandscapeReport:
    """
    Two-action cross-section of J with the gauge token pinned at zero

    Local maxima are located by sign changes of the exact derivative and
    refined with Brent's method.
    """
    probs = _as_probs(p_true)
    if probs.shape[0] != 2:
        raise ValueError(f"Landscape cross-section needs exactly 2 actions, got {probs.shape[0]}")
    if gauge_token not in (0, 1):
        raise ValueError(f"Gauge token must be 0 or 1, got {gauge_token}")
    free = 1 - gauge_token
    low, high, step = grid
    count = int(round((high - low) / step)) + 1
    points = np.linspace(low, high, count)

    def q_at(value: float) -> np.ndarray:
        q = np.zeros(2)
        q[free] = value
        return q

    def derivative(value: float) -> float:
        return float(fixed_point_gradient(probs, q_at(value))[free])

    slopes = np.array([derivative(v) for v in points])
    maxima = []
    for i in range(count - 1):
        if slopes[i] > 0 and slopes[i + 1] <= 0:
            root = points[i + 1] if slopes[i + 1] == 0 else brentq(derivative, points[i], points[i + 1], xtol=1e-14)
            maxima.append((float(root), objective_j(probs, q_at(root))))

    return LandscapeReport(
        p_true=probs.tolist(),
        gauge_token=gauge_token,
        q_free=points.tolist(),
        j_values=[objective_j(probs, q_at(v)) for v in points],
        maxima=maxima,
    )


def gauge_gap(undesired: int = 1) -> float:
    """Root of c = -(1 + m e^c): the fixed-point utility gap with m undesired tokens and one certain token"""
    return -brentq(lambda c: c + 1.0 + undesired * np.exp(c), -50.0, 0.0, xtol=1e-15)


# ---------------------------------------------------------------------------
# Utilities and decision-theoretic oracles
# ---------------------------------------------------------------------------

def _content(tokens: Tokens) -> Tokens:
    return tuple(t for t in tokens if t != EOS_TOKEN)


def exact_match(a: Tokens, y: Tokens) -> float:
    return 1.0 if tuple(a) == tuple(y) else 0.0


def token_overlap_f1(a: Tokens, y: Tokens) -> float:
    a, y = _content(a), _content(y)
    if not a and not y:
        return 1.0
    if not a or not y:
        return 0.0
    remaining = list(y)
    overlap = 0
    for token in a:
        if token in remaining:
            remaining.remove(token)
            overlap += 1
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(a), overlap / len(y)
    return 2 * precision * recall / (precision + recall)


def neg_normalized_edit_distance(a: Tokens, y: Tokens) -> float:
    a, y = _content(a), _content(y)
    distance = np.arange(len(y) + 1, dtype=np.float64)
    for i, token in enumerate(a, start=1):
        previous, distance[0] = distance.copy(), i
        for j in range(1, len(y) + 1):
            distance[j] = min(previous[j] + 1, distance[j - 1] + 1, previous[j - 1] + (token != y[j - 1]))
    return -float(distance[-1]) / max(len(a), len(y), 1)


SIMILARITIES = {
    "exact_match": exact_match,
    "token_overlap_f1": token_overlap_f1,
    "neg_normalized_edit_distance": neg_normalized_edit_distance,
}


class UtilitySpec(BaseModel):
    delta: Literal["exact_match", "token_overlap_f1", "neg_normalized_edit_distance"] = "exact_match"
    aggregation: Literal["average", "max_over_support"] = "average"

    def similarity(self, a: Tokens, y: Tokens) -> float:
        return SIMILARITIES[self.delta](a, y)

    def utility(self, a: Tokens, support: Dict[Tokens, float]) -> float:
        """U(x, a) against the enumerated support of P_true(.|x)"""
        if self.aggregation == "average":
            return float(sum(p * self.similarity(a, y) for y, p in support.items()))
        return float(max(self.similarity(a, y) for y in support))


class CheckReport(BaseModel):
    check: str
    utility: UtilitySpec
    instances: int = 0
    skipped: int = 0
    notes: List[str] = Field(default_factory=list)
    counterexamples: List[Dict[str, Any]] = Field(default_factory=list)
    details: List[Dict[str, Any]] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.counterexamples

    def summary(self) -> Dict[str, Any]:
        return {
            "check": self.check,
            "delta": self.utility.delta,
            "aggregation": self.utility.aggregation,
            "instances": self.instances,
            "skipped": self.skipped,
            "counterexamples": len(self.counterexamples),
            "passed": self.passed,
        }


def candidate_outputs(task: SyntheticTask, support: Dict[Tokens, float]) -> List[Tokens]:
    """Support members, their single-token substitutions and the empty output"""
    candidates: Set[Tokens] = set(support)
    candidates.add((EOS_TOKEN,))
    for y in support:
        for position in range(len(y) - 1):
            for token in range(1, task.vocab_size):
                if token != y[position]:
                    candidates.add(y[:position] + (token,) + y[position + 1:])
    return sorted(candidates)


def most_probable(support: Dict[Tokens, float]) -> Tokens:
    return min(support, key=lambda y: (-support[y], y))


def _instance_support(task: SyntheticTask, x: Tokens, report: CheckReport) -> Optional[Dict[Tokens, float]]:
    try:
        return dict(task.enumerate_support(x))
    except SupportTooLargeError as exc:
        report.skipped += 1
        report.notes.append(f"x={list(x)} skipped: {exc}")
        return None


def map_optimality_check(task: SyntheticTask, utility: UtilitySpec, n: int, rng: np.random.Generator,
                         tol: float = 1e-12) -> CheckReport:
    """
    Brute-force the utility-optimal decisions on n sampled inputs

    Average aggregation with exact match, or any similarity on a deterministic
    instance: the most probable output must maximize expected utility.
    Max-over-support aggregation: every support member must attain the
    maximum, the most probable output included.
    """
    report = CheckReport(check="map_optimality", utility=utility)
    for _ in range(n):
        x = task.sample_input(rng)
        support = _instance_support(task, x, report)
        if support is None:
            continue

        mode = most_probable(support)
        utilities = {a: utility.utility(a, support) for a in candidate_outputs(task, support)}
        best = max(utilities.values())

        if utility.aggregation == "max_over_support":
            case = "max_over_support"
            failing = [y for y in support if utilities[y] < best - tol]
        elif len(support) == 1 or utility.delta == "exact_match":
            case = "deterministic" if len(support) == 1 else "exact_match_average"
            failing = [mode] if utilities[mode] < best - tol else []
        else:
            report.skipped += 1
            report.notes.append(f"x={list(x)}: no optimality claim for {utility.delta}/average on a random instance")
            continue

        report.instances += 1
        report.details.append({"x": list(x), "case": case, "support": len(support), "best_utility": best})
        if failing:
            better = max(utilities, key=lambda a: (utilities[a], [-t for t in a]))
            report.counterexamples.append({
                "x": list(x),
                "case": case,
                "failing": [list(y) for y in failing],
                "failing_utility": utilities[failing[0]],
                "better": list(better),
                "better_utility": utilities[better],
            })

    logger.info(f"MAP optimality: {report.instances} instances, {len(report.counterexamples)} counterexamples")
    return report


def sampling_soundness_check(task: SyntheticTask, utility: UtilitySpec, n: int, rng: np.random.Generator,
                             alphas: Sequence[float] = (0.0, 0.25, 0.5), tol: float = 1e-12) -> CheckReport:
    """
    Expected utility of sampled decisions against the Y-policy

    A ~ P_true reproduces the Y-policy's utility exactly; mixing P_true with
    a uniform law over the candidate outputs can only widen the gap.
    """
    report = CheckReport(check="sampling_soundness", utility=utility)
    for _ in range(n):
        x = task.sample_input(rng)
        support = _instance_support(task, x, report)
        if support is None:
            continue
        report.instances += 1

        candidates = candidate_outputs(task, support)
        utilities = np.array([utility.utility(a, support) for a in candidates])
        p_true = np.array([support.get(a, 0.0) for a in candidates])
        uniform = np.full(len(candidates), 1.0 / len(candidates))

        y_policy = float(sum(p * utility.utility(y, support) for y, p in support.items()))
        sampled = float(p_true @ utilities)
        if abs(sampled - y_policy) > 1e-12 * max(1.0, abs(y_policy)):
            report.counterexamples.append({"x": list(x), "check": "identity", "sampled": sampled, "y_policy": y_policy})

        gaps = []
        for alpha in alphas:
            mixture = (1.0 - alpha) * p_true + alpha * uniform
            gaps.append(y_policy - float(mixture @ utilities))
            report.details.append({
                "x": list(x),
                "alpha": alpha,
                "total_variation": 0.5 * float(np.abs(mixture - p_true).sum()),
                "utility_gap": gaps[-1],
            })
        if any(later < earlier - tol for earlier, later in zip(gaps, gaps[1:])):
            report.counterexamples.append({"x": list(x), "check": "monotone_gap", "gaps": gaps})

        if len(support) == 1:
            mode = most_probable(support)
            one_hot = utility.utility(mode, support)
            if abs(one_hot - y_policy) > tol:
                report.counterexamples.append({"x": list(x), "check": "deterministic_argmax",
                                               "argmax_utility": one_hot, "y_policy": y_policy})

    logger.info(f"Sampling soundness: {report.instances} instances, {len(report.counterexamples)} counterexamples")
    return report
