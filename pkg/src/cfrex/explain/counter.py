"""Relaxed counterfactual search by gradient descent.

Two variants share the hinge relaxation ``lam * max(0, alpha + s - s_marginal)``:

* :func:`explain_aspects` learns an additive shift on the continuous (aspect)
  slots under ``||d||_2^2 + gamma * ||d||_1``;
* :func:`explain_text_weights` learns per-token weights ``1 + d`` inside the
  field mean under ``gamma * ||d||_1`` and reports tokens whose weight falls
  below a threshold.

Both stop at the first step whose discrete reading (floored shift, or the
thresholded tokens removed) is a valid counterfactual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..scorer import score_and_item_grad
from .common import PairContext, finalize, require_top_k, shift_edits, token_removal_edits

DELTA_FLOOR = 1e-6


@dataclass(frozen=True)
class CounterConfig:
    alpha: float = 0.2
    lam: float = 100.0
    gamma: float = 1.0
    threshold: float = 0.3
    max_steps: int = 500
    lr: float = 0.01
    nonpositive: bool = True
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.lam <= 0 or self.gamma <= 0:
            raise InputError("need alpha >= 0, lam > 0, gamma > 0")
        if not 0 <= self.threshold < 1:
            raise InputError("threshold must lie in [0, 1)")
        if self.lr < 0 or self.max_steps < 0:
            raise InputError("lr and max_steps must be non-negative")


TEXT_DEFAULTS = CounterConfig(gamma=0.7, threshold=0.3)


def hinge(score: float, marginal: float, alpha: float, lam: float) -> float:
    return lam * max(0.0, alpha + score - marginal)


def hinge_grad_scale(score: float, marginal: float, alpha: float, lam: float) -> float:
    """d hinge / d score; zero whenever alpha + score <= marginal."""
    return lam if alpha + score - marginal > 0 else 0.0


# -- aspect / continuous variant ----------------------------------------------

def aspect_objective(ctx: PairContext, delta: np.ndarray, cfg: CounterConfig) -> tuple[float, np.ndarray]:
    """Value and gradient of ||d||^2 + gamma ||d||_1 + hinge w.r.t. the continuous shift."""
    item = ctx.item
    n = item.schema.n_continuous
    v = item.compose(continuous=item.continuous + delta)
    s, g = score_and_item_grad(ctx.model, ctx.user_vector, v)
    value = float(delta @ delta + cfg.gamma * np.abs(delta).sum() + hinge(s, ctx.marginal, cfg.alpha, cfg.lam))
    grad = 2.0 * delta + cfg.gamma * np.sign(delta) + hinge_grad_scale(s, ctx.marginal, cfg.alpha, cfg.lam) * g[:n]
    return value, grad


def _floored(delta: np.ndarray, cfg: CounterConfig) -> np.ndarray:
    keep = delta <= -DELTA_FLOOR if cfg.nonpositive else np.abs(delta) >= DELTA_FLOOR
    return np.where(keep, delta, 0.0)


def aspect_step(ctx: PairContext, delta: np.ndarray, cfg: CounterConfig) -> tuple[np.ndarray, float]:
    """One descent step on the shift; returns the new shift and the pre-step objective."""
    value, grad = aspect_objective(ctx, delta, cfg)
    delta = delta - cfg.lr * grad
    if cfg.nonpositive:
        delta = np.minimum(delta, 0.0)
    return delta, value


def shift_is_valid(ctx: PairContext, delta: np.ndarray, cfg: CounterConfig) -> bool:
    d = _floored(delta, cfg)
    if not np.any(d):
        return False
    return ctx.score(ctx.item.compose(continuous=ctx.item.continuous + d)) <= ctx.marginal


def explain_aspects(ctx: PairContext, cfg: CounterConfig = CounterConfig(), trace: list | None = None):
    """Counterfactual shift over the item's continuous slots (aspect qualities)."""
    s0 = require_top_k(ctx)
    n = ctx.item.schema.n_continuous
    if n == 0:
        raise InputError("item has no continuous/aspect slots to explain")
    delta = np.zeros(n)
    steps = 0
    for steps in range(1, cfg.max_steps + 1):
        delta, value = aspect_step(ctx, delta, cfg)
        if trace is not None:
            trace.append(value)
        if cfg.early_stop and shift_is_valid(ctx, delta, cfg):
            break
    edits = shift_edits(ctx, _floored(delta, cfg), DELTA_FLOOR, cfg.nonpositive)
    return finalize(ctx, "counter", edits, steps, s0)


# -- word-weight variant ------------------------------------------------------

def _field_layout(ctx: PairContext):
    item = ctx.item
    sizes = [len(t) for t in item.tokens]
    bounds = np.cumsum([0] + sizes)
    return sizes, bounds


def text_objective(ctx: PairContext, delta: np.ndarray, cfg: CounterConfig) -> tuple[float, np.ndarray]:
    """Value and gradient of gamma ||d||_1 + hinge w.r.t. the token-weight offsets.

    The field block is ``sum_r (1 + d_r) x_r / n_tokens``.
    """
    item = ctx.item
    sizes, bounds = _field_layout(ctx)
    w = 1.0 + delta
    weights = [w[bounds[f]:bounds[f + 1]] for f in range(len(sizes))]
    v = item.compose(token_weights=weights, mode="count")
    s, g = score_and_item_grad(ctx.model, ctx.user_vector, v)
    value = float(cfg.gamma * np.abs(delta).sum() + hinge(s, ctx.marginal, cfg.alpha, cfg.lam))
    scale = hinge_grad_scale(s, ctx.marginal, cfg.alpha, cfg.lam)
    grad = cfg.gamma * np.sign(delta)
    if scale:
        offsets = item.schema.text_offsets
        parts = []
        for f, n_f in enumerate(sizes):
            if n_f:
                parts.append(item.token_vectors[f] @ g[offsets[f]] / n_f)
        grad = grad + scale * np.concatenate(parts)
    return value, grad


def explain_text_weights(ctx: PairContext, cfg: CounterConfig = TEXT_DEFAULTS, trace: list | None = None):
    """Counterfactual token removal via learned weights, thresholded at ``cfg.threshold``."""
    s0 = require_top_k(ctx)
    slots = ctx.token_slots()
    if not slots:
        raise InputError("item has no tokens to explain")
    delta = np.zeros(len(slots))
    chosen: list = []
    steps = 0
    for steps in range(1, cfg.max_steps + 1):
        value, grad = text_objective(ctx, delta, cfg)
        if trace is not None:
            trace.append(value)
        delta = np.clip(delta - cfg.lr * grad, -1.0, 0.0)
        chosen = [slots[i] for i in np.flatnonzero(1.0 + delta < cfg.threshold)]
        if cfg.early_stop and chosen:
            expl = finalize(ctx, "counter-text", token_removal_edits(ctx, chosen), steps, s0)
            if expl.valid:
                break
    flags = ("degenerate",) if len(chosen) == len(slots) else ()
    return finalize(ctx, "counter-text", token_removal_edits(ctx, chosen), steps, s0, flags)
