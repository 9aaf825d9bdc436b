"""Genetic search over binary token-keep masks.

A chromosome holds one gene per token (1 = keep).  Fitness is

    1 / (lam * (alpha + s_c - s_marginal)) + count_score

where ``count_score`` is ``0.5 * (1 - kept/z)`` while the masked item still
beats the marginal item and ``beta * kept/z`` once it does not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError
from ..scorer import score_pairs
from .common import PairContext, finalize, require_top_k, token_removal_edits

FITNESS_EPS = 1e-6


@dataclass(frozen=True)
class GeneticConfig:
    population: int = 200
    p_one: float = 0.9
    crossover_rate: float = 0.99
    mutation_rate: float = 0.10
    mutation_pop_frac: float = 0.5
    mutation_gene_frac: float = 0.10
    lam: float = 10.0
    beta: float = 10.0
    alpha: float = 1.0
    fitness_stop: float = 1.0
    min_iters: int = 10
    max_iters: int = 50
    count_semantics: str = "kept"
    seed: int = 0

    def __post_init__(self):
        for name in ("p_one", "crossover_rate", "mutation_rate", "mutation_pop_frac", "mutation_gene_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        if self.population < 2 or self.population % 2:
            raise InputError("population must be even and >= 2")
        if self.count_semantics not in ("kept", "removed"):
            raise InputError("count_semantics must be 'kept' or 'removed'")
        if self.min_iters > self.max_iters:
            raise InputError("min_iters must be <= max_iters")


def fitness_values(scores, counted, z: int, marginal: float, cfg: GeneticConfig) -> np.ndarray:
    """Vectorised fitness; ``counted`` is the per-chromosome gene count entering count_score."""
    scores = np.asarray(scores, dtype=np.float64)
    frac = np.asarray(counted, dtype=np.float64) / z
    first = 1.0 / (cfg.lam * np.maximum(cfg.alpha + scores - marginal, FITNESS_EPS))
    count_score = np.where(scores > marginal, 0.5 * (1.0 - frac), cfg.beta * frac)
    return first + count_score


class _MaskScorer:
    """Batch scoring of token-keep masks with removed tokens dropped from the field mean."""

    def __init__(self, ctx: PairContext):
        self.ctx = ctx
        item = ctx.item
        self.sizes = [len(t) for t in item.tokens]
        self.bounds = np.cumsum([0] + self.sizes)
        self.offsets = item.schema.text_offsets

    def item_matrix(self, genes: np.ndarray) -> np.ndarray:
        item = self.ctx.item
        mat = np.repeat(item.vector[None, :], genes.shape[0], axis=0)
        for f, n_f in enumerate(self.sizes):
            if n_f == 0:
                continue
            m = genes[:, self.bounds[f]:self.bounds[f + 1]].astype(np.float64)
            kept = m.sum(axis=1, keepdims=True)
            block = (m @ item.token_vectors[f]) / np.maximum(kept, 1.0)
            mat[:, self.offsets[f]] = np.where(kept > 0, block, 0.0)
        return mat

    def scores(self, genes: np.ndarray) -> np.ndarray:
        return score_pairs(self.ctx.model, self.ctx.user_vector, self.item_matrix(genes))


def chromosome_fitness(ctx: PairContext, genes, cfg: GeneticConfig) -> float:
    genes = np.atleast_2d(np.asarray(genes, dtype=np.int8))
    z = genes.shape[1]
    s = _MaskScorer(ctx).scores(genes)
    kept = genes.sum(axis=1)
    counted = kept if cfg.count_semantics == "kept" else z - kept
    return float(fitness_values(s, counted, z, ctx.marginal, cfg)[0])


def _select(rng, pop, fit):
    p = fit / fit.sum()
    idx = rng.choice(pop.shape[0], size=pop.shape[0], p=p)
    return pop[idx].copy()


def _crossover(rng, pop, rate):
    n, z = pop.shape
    if z < 2:
        return pop
    for i in range(0, n - 1, 2):
        if rng.random() < rate:
            cut = rng.integers(1, z)
            tail = pop[i, cut:].copy()
            pop[i, cut:] = pop[i + 1, cut:]
            pop[i + 1, cut:] = tail
    return pop


def _mutate(rng, pop, cfg: GeneticConfig):
    n, z = pop.shape
    n_cand = int(np.floor(cfg.mutation_pop_frac * n))
    if n_cand == 0 or cfg.mutation_rate == 0:
        return pop
    max_flips = max(1, int(np.floor(cfg.mutation_gene_frac * z)))
    for i in rng.choice(n, size=n_cand, replace=False):
        if rng.random() < cfg.mutation_rate:
            k = rng.integers(1, max_flips + 1)
            pos = rng.choice(z, size=k, replace=False)
            pop[i, pos] ^= 1
    return pop


def evolve(ctx: PairContext, cfg: GeneticConfig = GeneticConfig(), trace: list | None = None,
           keep_populations: bool = False):
    """Run the genetic search for one pair.

    ``trace`` (if given) receives one dict per generation with the best-so-far
    and mean fitness (plus the population when ``keep_populations``).
    """
    s0 = require_top_k(ctx)
    slots = ctx.token_slots()
    z = len(slots)
    if z == 0:
        raise InputError("item has no tokens to explain")
    rng = np.random.default_rng(cfg.seed)
    scorer = _MaskScorer(ctx)
    cache: dict[bytes, tuple[float, float]] = {}

    def evaluate(pop):
        keys = [row.tobytes() for row in pop]
        missing = [i for i, k in enumerate(keys) if k not in cache]
        if missing:
            uniq = {}
            for i in missing:
                uniq.setdefault(keys[i], i)
            rows = pop[list(uniq.values())]
            s = scorer.scores(rows)
            kept = rows.sum(axis=1)
            counted = kept if cfg.count_semantics == "kept" else z - kept
            fit = fitness_values(s, counted, z, ctx.marginal, cfg)
            for (k, _), si, fi in zip(uniq.items(), s, fit):
                cache[k] = (float(si), float(fi))
        sc = np.array([cache[k][0] for k in keys])
        fi = np.array([cache[k][1] for k in keys])
        return sc, fi

    pop = (rng.random((cfg.population, z)) < cfg.p_one).astype(np.int8)
    best_fit, best_genes = -np.inf, None
    valid_fit, valid_genes = -np.inf, None

    def update(pop, sc, fi, gen):
        nonlocal best_fit, best_genes, valid_fit, valid_genes
        i = int(np.argmax(fi))
        if fi[i] > best_fit:
            best_fit, best_genes = float(fi[i]), pop[i].copy()
        ok = np.flatnonzero(sc <= ctx.marginal)
        if ok.size:
            j = ok[int(np.argmax(fi[ok]))]
            if fi[j] > valid_fit:
                valid_fit, valid_genes = float(fi[j]), pop[j].copy()
        if trace is not None:
            rec = {"generation": gen, "best": best_fit, "mean": float(fi.mean())}
            if keep_populations:
                rec["population"] = pop.copy()
            trace.append(rec)

    sc, fi = evaluate(pop)
    update(pop, sc, fi, 0)
    gen = 0
    for gen in range(1, cfg.max_iters + 1):
        pop = _select(rng, pop, fi)
        pop = _crossover(rng, pop, cfg.crossover_rate)
        pop = _mutate(rng, pop, cfg)
        sc, fi = evaluate(pop)
        update(pop, sc, fi, gen)
        if gen >= cfg.min_iters and best_fit > cfg.fitness_stop:
            break

    genes = valid_genes if valid_genes is not None else best_genes
    removed = [slots[i] for i in np.flatnonzero(genes == 0)]
    return finalize(ctx, "genetic", token_removal_edits(ctx, removed), gen, s0)
