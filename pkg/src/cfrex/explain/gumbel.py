"""Replacement search through a Gumbel-Softmax relaxation.

Each token slot gets a row of logits ``theta`` over the stacked candidate
list of all token slots (width V = sum of per-slot candidate counts); the
relaxed token vector is ``softmax((theta + g) / T) @ C``.  Columns outside a
slot's own candidates carry logit -1 in ``L`` and are never chosen when the
rows are hardened.  Categorical features get one row over their own value
domain.  The minimised objective is

    lam * max(0, alpha + s - s_marginal) + beta / (pi . L) + gamma * |pi_main - pi|_1

where ``pi_main`` uses the initial logits under the same noise draw.
:func:`optimize_mixed` adds a continuous shift with its own
``||d||^2 + gamma_c ||d||_1`` penalty under a single joint hinge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError
from ..scorer import score_and_item_grad
from .common import CATEGORICAL, REPLACE, TEXT, Edit, PairContext, finalize, require_top_k, shift_edits
from .counter import DELTA_FLOOR, CounterConfig

LOGIT_FILL = -1.0
DOT_EPS = 1e-6


@dataclass(frozen=True)
class GumbelConfig:
    temperature: float = 2.0
    lr: float = 0.5
    alpha: float = 0.2
    lam: float = 100.0
    beta: float = 1000.0
    gamma: float = 1.0
    max_steps: int = 500
    samples_per_step: int = 1
    init_logit: float = 5.0
    off_support_logit: float = -20.0
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise InputError("temperature must be > 0")
        if self.lam <= 0 or self.beta < 0 or self.gamma < 0 or self.alpha < 0:
            raise InputError("need lam > 0 and non-negative alpha, beta, gamma")
        if self.samples_per_step < 1:
            raise InputError("samples_per_step must be >= 1")


@dataclass(frozen=True)
class MixedConfig:
    gumbel: GumbelConfig = GumbelConfig()
    counter: CounterConfig = CounterConfig(nonpositive=False)


def gumbel_softmax(logits, temperature: float, noise=None) -> np.ndarray:
    """Row-wise softmax of (logits + noise) / T, max-subtracted for stability."""
    a = np.asarray(logits, dtype=np.float64)
    if noise is not None:
        a = a + noise
    a = a / temperature
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).eps)
    return -np.log(-np.log(u))


def relaxed_token_vectors(pi: np.ndarray, cand_matrix: np.ndarray) -> np.ndarray:
    """z x V mixing weights times V x dim candidate vectors."""
    return pi @ cand_matrix


def _softmax_backward(pi: np.ndarray, grad_pi: np.ndarray, temperature: float) -> np.ndarray:
    return pi * (grad_pi - (pi * grad_pi).sum(axis=-1, keepdims=True)) / temperature


@dataclass
class ReplacementProblem:
    """Candidate matrices and initial logits for one pair."""

    ctx: PairContext
    cfg: GumbelConfig
    include_continuous: bool = False
    counter: CounterConfig | None = None
    slots: list = field(default_factory=list)            # (field index, position) per text row
    cands: list = field(default_factory=list)            # candidate lists per text row
    col_start: np.ndarray | None = None
    C: np.ndarray | None = None                           # V x dim
    L: np.ndarray | None = None                           # z x V
    theta0: np.ndarray | None = None                      # z x V
    orig_cols: np.ndarray | None = None
    cat_C: list = field(default_factory=list)
    cat_theta0: list = field(default_factory=list)
    cat_orig: list = field(default_factory=list)

    @classmethod
    def build(cls, ctx: PairContext, cfg: GumbelConfig, include_text=True, include_categorical=True,
              include_continuous=False, counter: CounterConfig | None = None) -> "ReplacementProblem":
        prob = cls(ctx, cfg, include_continuous, counter)
        item = ctx.item
        dim = item.schema.text_dim
        if include_text:
            for f, p in ctx.token_slots():
                cands = ctx.slot_candidates(f, p)
                orig = item.tokens[f][p]
                if orig not in [c.token for c in cands]:
                    raise InputError(f"original token {orig!r} missing from candidates of slot "
                                     f"{item.schema.textual[f].name}[{p}]")
                prob.slots.append((f, p))
                prob.cands.append(cands)
        sizes = np.array([len(c) for c in prob.cands], dtype=int)
        prob.col_start = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        V = int(prob.col_start[-1])
        z = len(prob.slots)
        prob.C = np.array([c.vector for cs in prob.cands for c in cs]).reshape(V, dim)
        prob.L = np.full((z, V), LOGIT_FILL)
        prob.theta0 = np.full((z, V), cfg.off_support_logit)
        prob.orig_cols = np.zeros(z, dtype=int)
        for r, cs in enumerate(prob.cands):
            a, b = prob.col_start[r], prob.col_start[r + 1]
            prob.L[r, a:b] = [c.logit for c in cs]
            prob.theta0[r, a:b] = 0.0
            (f, p) = prob.slots[r]
            k = [c.token for c in cs].index(item.tokens[f][p])
            prob.orig_cols[r] = a + k
            prob.theta0[r, a + k] = cfg.init_logit
        if include_categorical:
            for feat, value in zip(item.schema.categorical, item.categorical):
                prob.cat_C.append(np.array([feat.encode(v) for v in feat.domain]))
                k = feat.domain.index(value)
                t0 = np.zeros(len(feat.domain))
                t0[k] = cfg.init_logit
                prob.cat_theta0.append(t0)
                prob.cat_orig.append(k)
        return prob

    @property
    def n_rows(self) -> int:
        return len(self.slots) + len(self.cat_C)

    def draw_noise(self, rng):
        return sample_gumbel(rng, self.theta0.shape), [sample_gumbel(rng, t.shape) for t in self.cat_theta0]

    def zero_noise(self):
        return np.zeros_like(self.theta0), [np.zeros_like(t) for t in self.cat_theta0]

    def _field_of_row(self) -> np.ndarray:
        return np.array([f for f, _ in self.slots], dtype=int)

    def relaxed_vector(self, theta, cat_theta, delta, noise):
        """Relaxed item vector plus the intermediate probability rows."""
        item = self.ctx.item
        T = self.cfg.temperature
        g_t, g_c = noise
        pi = gumbel_softmax(theta, T, g_t) if len(self.slots) else np.zeros((0, 0))
        tv = [v.copy() for v in item.token_vectors]
        if len(self.slots):
            mixed = relaxed_token_vectors(pi, self.C)
            for r, (f, p) in enumerate(self.slots):
                tv[f][p] = mixed[r]
        cat_pi = [gumbel_softmax(t, T, g) for t, g in zip(cat_theta, g_c)]
        cats = None
        if self.cat_C:
            cats = [p @ C for p, C in zip(cat_pi, self.cat_C)]
        cont = item.continuous + delta if delta is not None else None
        return item.compose(continuous=cont, categorical=cats, token_vectors=tv), pi, cat_pi

    def objective(self, theta, cat_theta, delta, noise):
        """Objective value and gradients w.r.t. (theta, cat_theta, delta) under fixed noise."""
        ctx, cfg = self.ctx, self.cfg
        item = ctx.item
        T = cfg.temperature
        g_t, g_c = noise
        v, pi, cat_pi = self.relaxed_vector(theta, cat_theta, delta, noise)
        s, g = score_and_item_grad(ctx.model, ctx.user_vector, v)
        margin = cfg.alpha + s - ctx.marginal
        hs = cfg.lam if margin > 0 else 0.0
        value = cfg.lam * max(0.0, margin)

        grad_theta = np.zeros_like(theta)
        if len(self.slots):
            pi_main = gumbel_softmax(self.theta0, T, g_t)
            offsets = item.schema.text_offsets
            sizes = [len(t) for t in item.tokens]
            gvec = np.array([g[offsets[f]] / sizes[f] if sizes[f] else np.zeros(item.schema.text_dim)
                             for f in range(len(sizes))])
            G = (self.C @ gvec.T).T[self._field_of_row()] * hs
            if cfg.beta:
                dot = float((pi * self.L).sum())
                value += cfg.beta / max(dot, DOT_EPS)
                if dot > DOT_EPS:
                    G = G - cfg.beta * self.L / dot ** 2
            diff = pi - pi_main
            value += cfg.gamma * np.abs(diff).sum()
            G = G + cfg.gamma * np.sign(diff)
            grad_theta = _softmax_backward(pi, G, T)

        grad_cat = []
        cat_offsets = item.schema.categorical_offsets
        for j, (p, C) in enumerate(zip(cat_pi, self.cat_C)):
            p_main = gumbel_softmax(self.cat_theta0[j], T, g_c[j])
            diff = p - p_main
            value += cfg.gamma * np.abs(diff).sum()
            Gc = hs * (C @ g[cat_offsets[j]]) + cfg.gamma * np.sign(diff)
            grad_cat.append(_softmax_backward(p, Gc, T))

        grad_delta = None
        if delta is not None:
            gc = self.counter.gamma
            value += float(delta @ delta + gc * np.abs(delta).sum())
            grad_delta = 2.0 * delta + gc * np.sign(delta) + hs * g[: item.schema.n_continuous]
        return float(value), grad_theta, grad_cat, grad_delta, s

    def harden(self, theta, cat_theta):
        choice = np.array([self.col_start[r] + int(np.argmax(theta[r, self.col_start[r]:self.col_start[r + 1]]))
                           for r in range(len(self.slots))], dtype=int)
        cat_choice = [int(np.argmax(t)) for t in cat_theta]
        return choice, cat_choice

    def hardened_vector(self, choice, cat_choice, delta):
        item = self.ctx.item
        tv = [v.copy() for v in item.token_vectors]
        for r, (f, p) in enumerate(self.slots):
            tv[f][p] = self.C[choice[r]]
        cats = [C[k] for C, k in zip(self.cat_C, cat_choice)] if self.cat_C else None
        cont = item.continuous + delta if delta is not None else None
        return item.compose(continuous=cont, categorical=cats, token_vectors=tv)

    def edits(self, choice, cat_choice, delta):
        item = self.ctx.item
        out = []
        for r, (f, p) in enumerate(self.slots):
            if choice[r] != self.orig_cols[r]:
                new = self.cands[r][choice[r] - self.col_start[r]].token
                out.append(Edit(TEXT, item.schema.textual[f].name, f, REPLACE, old=item.tokens[f][p], new=new,
                                position=p))
        for j, k in enumerate(cat_choice):
            if k != self.cat_orig[j]:
                feat = item.schema.categorical[j]
                out.append(Edit(CATEGORICAL, feat.name, j, REPLACE, old=item.categorical[j], new=feat.domain[k]))
        if delta is not None:
            out = shift_edits(self.ctx, delta, DELTA_FLOOR, self.counter.nonpositive) + out
        return out


def _floor_delta(delta, counter: CounterConfig):
    if delta is None:
        return None
    keep = delta <= -DELTA_FLOOR if counter.nonpositive else np.abs(delta) >= DELTA_FLOOR
    return np.where(keep, delta, 0.0)


def _run(prob: ReplacementProblem, method: str, trace: list | None):
    ctx, cfg = prob.ctx, prob.cfg
    s0 = require_top_k(ctx)
    rng = np.random.default_rng(cfg.seed)
    theta = prob.theta0.copy()
    cat_theta = [t.copy() for t in prob.cat_theta0]
    delta = np.zeros(ctx.item.schema.n_continuous) if prob.include_continuous else None
    has_theta = prob.n_rows > 0
    steps = 0
    relaxed_ok = False
    found = False
    for steps in range(1, cfg.max_steps + 1):
        acc = None
        for _ in range(cfg.samples_per_step):
            noise = prob.draw_noise(rng) if has_theta else prob.zero_noise()
            value, gt, gcat, gd, s_rel = prob.objective(theta, cat_theta, delta, noise)
            if acc is None:
                acc = [value, gt, gcat, gd]
            else:
                acc[0] += value
                acc[1] = acc[1] + gt
                acc[2] = [a + b for a, b in zip(acc[2], gcat)]
                acc[3] = None if gd is None else acc[3] + gd
        n = cfg.samples_per_step
        if n > 1:
            acc = [acc[0] / n, acc[1] / n, [a / n for a in acc[2]], None if acc[3] is None else acc[3] / n]
        if trace is not None:
            trace.append(acc[0])
        relaxed_ok = s_rel <= ctx.marginal
        theta = theta - cfg.lr * acc[1]
        cat_theta = [t - cfg.lr * g for t, g in zip(cat_theta, acc[2])]
        if delta is not None:
            delta = delta - prob.counter.lr * acc[3]
            if prob.counter.nonpositive:
                delta = np.minimum(delta, 0.0)
        if cfg.early_stop:
            choice, cat_choice = prob.harden(theta, cat_theta)
            vec = prob.hardened_vector(choice, cat_choice, _floor_delta(delta, prob.counter))
            if ctx.score(vec) <= ctx.marginal:
                found = True
                break
    choice, cat_choice = prob.harden(theta, cat_theta)
    edits = prob.edits(choice, cat_choice, _floor_delta(delta, prob.counter))
    expl = finalize(ctx, method, edits, steps, s0)
    if not expl.valid and relaxed_ok and not found:
        expl = finalize(ctx, method, edits, steps, s0, ("relaxation_gap",))
    return expl


def optimize_theta(ctx: PairContext, cfg: GumbelConfig = GumbelConfig(), trace: list | None = None,
                   include_categorical: bool = True):
    """Replacement explanation over the item's token slots (and categorical slots)."""
    prob = ReplacementProblem.build(ctx, cfg, include_text=True, include_categorical=include_categorical)
    if prob.n_rows == 0:
        raise InputError("item has no textual or categorical slots to explain")
    return _run(prob, "gumbel", trace)


def optimize_mixed(ctx: PairContext, cfg: MixedConfig = MixedConfig(), trace: list | None = None):
    """Joint explanation: continuous shifts plus token/categorical replacements."""
    has_text = any(len(t) for t in ctx.item.tokens)
    prob = ReplacementProblem.build(ctx, cfg.gumbel, include_text=has_text, include_categorical=True,
                                    include_continuous=ctx.item.schema.n_continuous > 0, counter=cfg.counter)
    if prob.n_rows == 0 and not prob.include_continuous:
        raise InputError("item has no slots to explain")
    return _run(prob, "mixed", trace)
