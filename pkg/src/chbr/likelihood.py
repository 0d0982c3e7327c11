"""Concept likelihoods: uniform, similarity-sharpened, and entropy-minimizing.

A likelihood matrix holds, per class, one non-negative weight per sampled
concept, summing to 1 within the class. The TTA variant learns those weights
by minimizing the entropy of the averaged prediction over confident augmented
views, with analytic gradients and a from-scratch decoupled-weight-decay
adaptive-moment optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ConceptBank
from .errors import PreconditionError, ShapeError

DEFAULT_TAU = 3.0
DEFAULT_LOGIT_SCALE = 100.0


@dataclass(frozen=True)
class TtaConfig:
    num_views: int = 64
    keep_percent: float = 10.0
    steps: int = 30
    learning_rate: float = 1.0
    logit_scale: float = DEFAULT_LOGIT_SCALE
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.num_views < 1:
            raise PreconditionError("num_views must be >= 1")
        if not 0.0 < self.keep_percent <= 100.0:
            raise PreconditionError("keep_percent must be in (0, 100]")
        if self.steps < 0:
            raise PreconditionError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise PreconditionError("learning_rate must be > 0")
        if self.logit_scale <= 0:
            raise PreconditionError("logit_scale must be > 0")


@dataclass(frozen=True)
class LikelihoodSpec:
    kind: str  # "average" | "confidence" | "tta"
    tau: float = DEFAULT_TAU
    tta: TtaConfig | None = None

    def __post_init__(self):
        if self.kind not in ("average", "confidence", "tta"):
            raise PreconditionError(f"unknown likelihood kind {self.kind!r}")
        if self.kind == "confidence" and self.tau <= 0:
            raise PreconditionError("tau must be > 0 for confidence likelihood")
        if self.kind == "tta" and self.tta is None:
            object.__setattr__(self, "tta", TtaConfig())


# A likelihood matrix is a list of per-class float64 vectors (one entry per
# concept); classes may hold different numbers of concepts.
LikelihoodMatrix = list


def softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def average_likelihood(bank: ConceptBank) -> LikelihoodMatrix:
    """Uniform weighting: every concept of class i gets 1 / M_i."""
    out = []
    for label in bank.classes:
        m = len(bank.concepts_for(label.id))
        out.append(np.full(m, 1.0 / m))
    return out


def confidence_likelihood(
    sims: list, tau: float = DEFAULT_TAU, axis: str = "concepts"
) -> LikelihoodMatrix:
    """Sharpened similarities: softmax of tau * sim.

    axis="concepts" (default) normalizes within each class over its concepts;
    axis="classes" normalizes across classes at fixed concept index and
    requires every class to hold the same number of concepts.
    """
    if tau <= 0:
        raise PreconditionError("tau must be > 0")
    rows = [np.asarray(r, dtype=np.float64) for r in sims]
    for r in rows:
        if not np.all(np.isfinite(r)):
            raise PreconditionError("similarities must be finite")
    if axis == "concepts":
        return [softmax(tau * r) for r in rows]
    if axis == "classes":
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise ShapeError("cross-class mode requires equal concept counts")
        mat = softmax(tau * np.stack(rows).T).T  # softmax over classes per j
        return [mat[i] for i in range(len(rows))]
    raise PreconditionError(f"unknown normalization axis {axis!r}")


def view_class_scores(
    view_sims: list, theta: list, weights: list
) -> np.ndarray:
    """Per-view class scores: sum_j sim[i,j,n] * softmax(theta_i)_j * w[i,j].

    view_sims[i] is an (M_i, N) array; returns a (K, N) array.
    """
    k = len(view_sims)
    n = np.asarray(view_sims[0]).shape[1]
    scores = np.zeros((k, n))
    for i in range(k):
        s = np.asarray(view_sims[i], dtype=np.float64)
        t = np.asarray(theta[i], dtype=np.float64)
        w = np.asarray(weights[i], dtype=np.float64)
        if t.shape[0] != s.shape[0] or w.shape[0] != s.shape[0]:
            raise ShapeError(
                f"class {i}: theta/weights length must match concept count "
                f"{s.shape[0]}"
            )
        lik = softmax(t)
        scores[i] = (lik * w) @ s
    return scores


def shannon_entropy(probs) -> float:
    """-sum p log p (natural log) with 0 log 0 taken as 0."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or not np.isclose(float(np.sum(p)), 1.0, atol=1e-6):
        raise PreconditionError("input is not a probability vector")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def select_confident_views(view_probs: list, keep_percent: float) -> list[int]:
    """Indices of the max(1, floor(N * r / 100)) lowest-entropy views.

    Ties break toward the lower view index; no view is privileged.
    """
    n = len(view_probs)
    if n < 1:
        raise PreconditionError("need at least one view")
    keep = max(1, math.floor(n * keep_percent / 100.0))
    entropies = [shannon_entropy(p) for p in view_probs]
    order = sorted(range(n), key=lambda i: (entropies[i], i))
    return sorted(order[:keep])


def tta_objective(
    theta: list, view_sims: list, weights: list, retained: list[int],
    logit_scale: float,
) -> tuple[float, list]:
    """Entropy of the averaged retained-view prediction, plus its gradient.

    Returns (entropy, grads) where grads[i] has the shape of theta[i].
    The chain is: theta -> softmax -> per-view scores -> mean over retained
    views -> softmax(logit_scale * mean) -> entropy.
    """
    k = len(view_sims)
    theta = [np.asarray(t, dtype=np.float64) for t in theta]
    scores = view_class_scores(view_sims, theta, weights)  # (K, N)
    mean_scores = scores[:, retained].mean(axis=1)  # (K,)
    p = softmax(logit_scale * mean_scores)
    entropy = shannon_entropy(p)
    # d entropy / d logits, for logits z = logit_scale * mean_scores:
    # -p_i (log p_i + H)
    logp = np.where(p > 0, np.log(np.maximum(p, 1e-300)), 0.0)
    dz = -p * (logp + entropy)
    ds = logit_scale * dz  # d entropy / d mean_scores
    grads = []
    for i in range(k):
        s = np.asarray(view_sims[i], dtype=np.float64)[:, retained]
        w = np.asarray(weights[i], dtype=np.float64)
        lik = softmax(theta[i])
        # a_j = d mean_score_i / d lik_j = mean_n sims[j, n] * w_j
        a = s.mean(axis=1) * w
        # softmax Jacobian: d lik_j / d theta_l = lik_l (delta_jl - lik_j)
        g = ds[i] * lik * (a - float(np.dot(a, lik)))
        if not np.all(np.isfinite(g)):
            raise PreconditionError(f"non-finite gradient for class {i}")
        grads.append(g)
    return entropy, grads


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over a list of arrays."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list) -> None:
        self.t += 1
        for i, g in enumerate(grads):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            self.params[i] -= self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps)
                + self.weight_decay * self.params[i]
            )


def tta_optimize(
    view_sims: list, weights: list, config: TtaConfig
) -> tuple[LikelihoodMatrix, dict]:
    """Learn per-concept weights by entropy minimization over confident views.

    Starts from zero parameters (uniform weights), freezes the confident-view
    selection computed at that starting point, then runs `steps` optimizer
    iterations. Returns (softmax(theta) per class, diagnostics).
    """
    k = len(view_sims)
    if k < 1:
        raise PreconditionError("need at least one class")
    n = np.asarray(view_sims[0]).shape[1]
    theta = [np.zeros(np.asarray(view_sims[i]).shape[0]) for i in range(k)]

    scores0 = view_class_scores(view_sims, theta, weights)  # (K, N)
    view_probs = [softmax(config.logit_scale * scores0[:, v]) for v in range(n)]
    retained = select_confident_views(view_probs, config.keep_percent)

    initial_entropy, _ = tta_objective(
        theta, view_sims, weights, retained, config.logit_scale
    )
    opt = AdamW(
        theta, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2,
        eps=config.eps, weight_decay=config.weight_decay,
    )
    entropy = initial_entropy
    for step in range(config.steps):
        try:
            entropy, grads = tta_objective(
                theta, view_sims, weights, retained, config.logit_scale
            )
        except PreconditionError as exc:
            raise PreconditionError(f"at iteration {step}: {exc}") from exc
        opt.step(grads)
    final_entropy, _ = tta_objective(
        theta, view_sims, weights, retained, config.logit_scale
    )
    likelihood = [softmax(t) for t in theta]
    diagnostics = {
        "initial_entropy": initial_entropy,
        "final_entropy": final_entropy,
        "retained_views": retained,
    }
    return likelihood, diagnostics
