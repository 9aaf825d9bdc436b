"""Evaluation measures for explanations.

User-based precision/recall/F1 against review words, model-based necessity
(PN) and sufficiency (PS) with their harmonic mean FNS, run-to-run stability
(mean pairwise Jaccard), explanation-found rate and mean explanation size.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .explain.common import CATEGORICAL, CONTINUOUS, SHIFT, TEXT, Explanation, PairContext
from .scorer import rank_topk


def user_based_prf(explained: Iterable[str], truth: Iterable[str]) -> tuple[float, float, float] | None:
    """Precision, recall and F1 of explanation features against ground-truth words.

    Returns None when either set is empty (the pair is excluded from averages).
    """
    e = set(explained)
    g = set(truth)
    if not e or not g:
        return None
    hits = len(e & g)
    p = hits / len(e)
    r = hits / len(g)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def fns(pn: float, ps: float) -> float:
    return 0.0 if pn + ps == 0 else 2 * pn * ps / (pn + ps)


def necessity_vector(ctx: PairContext, expl: Explanation) -> np.ndarray:
    """Item with the explanation slots removed: tokens dropped, categoricals at
    the scaled baseline (zero), continuous shifts applied."""
    item = ctx.item
    schema = item.schema
    cont = item.continuous.copy()
    cats = [f.encode(v) for f, v in zip(schema.categorical, item.categorical)]
    weights = [np.ones(len(t)) for t in item.tokens]
    for e in expl.edits:
        if e.group == TEXT:
            weights[e.index][e.position] = 0.0
        elif e.group == CATEGORICAL:
            cats[e.index] = np.zeros(schema.categorical[e.index].width)
        elif e.group == CONTINUOUS and e.kind == SHIFT:
            cont[e.index] += e.delta
    return item.compose(continuous=cont, categorical=cats, token_weights=weights, mode="kept")


def sufficiency_vector(ctx: PairContext, expl: Explanation) -> np.ndarray:
    """Item keeping only the explanation slots at their original values; all
    other tokens removed, other categoricals and continuous values at zero."""
    item = ctx.item
    schema = item.schema
    cont = np.zeros_like(item.continuous)
    cats = [np.zeros(f.width) for f in schema.categorical]
    weights = [np.zeros(len(t)) for t in item.tokens]
    for e in expl.edits:
        if e.group == TEXT:
            weights[e.index][e.position] = 1.0
        elif e.group == CATEGORICAL:
            cats[e.index] = schema.categorical[e.index].encode(item.categorical[e.index])
        elif e.group == CONTINUOUS:
            cont[e.index] = item.continuous[e.index]
    return item.compose(continuous=cont, categorical=cats, token_weights=weights, mode="kept")


def in_top_k(ctx: PairContext, item_vector: np.ndarray) -> bool:
    """Whether the item (with the given vector) stays in the user's top-K.

    Uses the full re-ranking when the context carries a candidate pool,
    otherwise compares against the stored marginal score.
    """
    if ctx.pool:
        pool = dict(ctx.pool)
        pool[ctx.item.item_id] = item_vector
        ranked = rank_topk(ctx.model, ctx.user_id, ctx.user_vector, pool, ctx.k)
        return ctx.item.item_id in ranked.top
    return ctx.score(item_vector) > ctx.marginal


def pn_ps_flags(ctx: PairContext, expl: Explanation) -> tuple[int, int]:
    pn = int(not in_top_k(ctx, necessity_vector(ctx, expl)))
    ps = int(in_top_k(ctx, sufficiency_vector(ctx, expl)))
    return pn, ps


def pn_ps(contexts: Sequence[PairContext], explanations: Sequence[Explanation]) -> tuple[float, float, float]:
    """Mean PN and PS flags over pairs with a valid explanation, and FNS."""
    flags = [pn_ps_flags(c, e) for c, e in zip(contexts, explanations) if e.valid]
    return aggregate_pn_ps(flags)


def aggregate_pn_ps(flags: Sequence[tuple[int, int]]) -> tuple[float, float, float]:
    if not flags:
        return 0.0, 0.0, 0.0
    pn = float(np.mean([f[0] for f in flags]))
    ps = float(np.mean([f[1] for f in flags]))
    return pn, ps, fns(pn, ps)


def jaccard(a: frozenset | set, b: frozenset | set) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def stability(runs: Sequence[Iterable[str]]) -> float:
    """Mean Jaccard similarity over ordered pairs of distinct runs."""
    sets = [frozenset(r) for r in runs]
    n = len(sets)
    if n < 2:
        raise ValueError("stability needs at least two runs")
    total = sum(jaccard(sets[k], sets[l]) for k in range(n) for l in range(n) if k != l)
    return total / (n * (n - 1))


def stability_unordered(runs: Sequence[Iterable[str]]) -> float:
    sets = [frozenset(r) for r in runs]
    n = len(sets)
    return 2 * sum(jaccard(a, b) for a, b in combinations(sets, 2)) / (n * (n - 1))


def mean_stability(per_pair_runs: Sequence[Sequence[Iterable[str]]]) -> float:
    return float(np.mean([stability(r) for r in per_pair_runs]))


def found_rate_and_avg(explanations: Sequence[Explanation]) -> tuple[float, float | None]:
    if not explanations:
        return 0.0, None
    valid = [e for e in explanations if e.valid]
    rate = len(valid) / len(explanations)
    avg = float(np.mean([len(e.edits) for e in valid])) if valid else None
    return rate, avg


# -- report -------------------------------------------------------------------

ROW_FIELDS = ("user_id", "item_id", "method", "found", "n_features", "precision", "recall", "f1", "pn", "ps")
AGG_COLUMNS = ("Pre", "Rec", "F1", "PN", "PS", "FNS", "NDCG", "Features Avg", "Exp Found Rate", "Stability")


@dataclass
class PairRow:
    user_id: str
    item_id: str
    method: str
    found: int
    n_features: int
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    pn: int | None = None
    ps: int | None = None


@dataclass
class EvalReport:
    method: str
    rows: list[PairRow] = field(default_factory=list)
    ndcg: float | None = None
    stability: float | None = None

    def aggregates(self) -> dict:
        """Table-style aggregates, recomputed from the rows."""
        prf = [r for r in self.rows if r.precision is not None]
        flags = [(r.pn, r.ps) for r in self.rows if r.found and r.pn is not None]
        pn, ps, f = aggregate_pn_ps(flags)
        found = [r for r in self.rows if r.found]

        def mean(xs):
            return float(np.mean(xs)) if xs else None

        return {
            "Pre": mean([r.precision for r in prf]),
            "Rec": mean([r.recall for r in prf]),
            "F1": mean([r.f1 for r in prf]),
            "PN": pn if flags else None,
            "PS": ps if flags else None,
            "FNS": f if flags else None,
            "NDCG": self.ndcg,
            "Features Avg": mean([r.n_features for r in found]),
            "Exp Found Rate": len(found) / len(self.rows) if self.rows else None,
            "Stability": self.stability,
            "pairs": len(self.rows),
            "prf_excluded": sum(1 for r in self.rows if r.found and r.precision is None),
        }

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "ndcg": self.ndcg, "stability": self.stability,
                           "aggregates": self.aggregates(), "rows": [asdict(r) for r in self.rows]},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["method"], [PairRow(**r) for r in d["rows"]], d.get("ndcg"), d.get("stability"))

    def table(self) -> str:
        """Tab-separated table with User-based and Model-based column groups plus other measures."""
        agg = self.aggregates()

        def fmt(v):
            return "N/A" if v is None else f"{v:.4f}"

        lines = [
            "\t\tUser-based\t\t\tModel-based\t\t\tOther",
            "method\t" + "\t".join(AGG_COLUMNS),
            self.method + "\t" + "\t".join(fmt(agg[c]) for c in AGG_COLUMNS),
        ]
        return "\n".join(lines) + "\n"


def build_report(method: str, contexts: Sequence[PairContext], explanations: Sequence[Explanation],
                 truth: Mapping[tuple[str, str], Iterable[str]] | None = None,
                 ndcg: float | None = None, stability_value: float | None = None) -> EvalReport:
    rows = []
    for ctx, e in zip(contexts, explanations):
        row = PairRow(e.user_id, e.item_id, method, int(e.valid), len(e.edits) if e.valid else 0)
        if e.valid:
            row.pn, row.ps = pn_ps_flags(ctx, e)
            if truth is not None:
                prf = user_based_prf(e.features(), truth.get((e.user_id, e.item_id), ()))
                if prf is not None:
                    row.precision, row.recall, row.f1 = prf
        rows.append(row)
    return EvalReport(method, rows, ndcg, stability_value)
