"""Shared pieces for the explainers: pair context, edits, explanations, serialization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import InputError, NotApplicable
from ..ingest import Candidate
from ..scorer import RankedList, ScorerModel, forward, rank_topk
from ..vectorize import ItemRecord

REMOVE = "remove"
REPLACE = "replace"
SHIFT = "shift"

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
TEXT = "text"


@dataclass(frozen=True)
class Edit:
    """One feature edit.

    ``index`` is the feature position inside its schema group; ``position``
    is the token position for text edits.  For shifts ``delta`` is the change
    in scaled units while ``old``/``new`` are raw values for display.
    """

    group: str
    feature: str
    index: int
    kind: str
    old: object = None
    new: object = None
    position: int | None = None
    delta: float | None = None

    @property
    def slot(self) -> str:
        if self.group == TEXT:
            return f"{self.feature}[{self.position}]"
        return self.feature

    @property
    def label(self) -> str:
        """Feature label used for set-based metrics: the word itself for text, else the feature name."""
        return str(self.old) if self.group == TEXT else self.feature


@dataclass(frozen=True)
class Explanation:
    method: str
    user_id: str
    item_id: str
    edits: tuple[Edit, ...]
    valid: bool
    steps: int
    score_before: float
    score_after: float
    marginal: float
    flags: tuple[str, ...] = ()

    def features(self) -> frozenset[str]:
        return frozenset(e.label for e in self.edits)

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(e.slot for e in self.edits)

    def to_json(self) -> str:
        d = asdict(self)
        d["edits"] = [{k: v for k, v in asdict(e).items() if v is not None} for e in self.edits]
        d["flags"] = list(self.flags)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Explanation":
        d = json.loads(text)
        edits = tuple(Edit(**e) for e in d.pop("edits"))
        d["flags"] = tuple(d.get("flags", ()))
        return cls(edits=edits, **d)


def write_explanations(path, explanations: Iterable[Explanation], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for e in explanations:
            fh.write(e.to_json() + "\n")


def read_explanations(path) -> list[Explanation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                out.append(Explanation.from_json(line))
    return out


@dataclass(frozen=True)
class PairContext:
    """Everything an explainer needs for one (user, item) pair.

    ``pool`` maps candidate item ids to vectors for the user's ranking;
    ``candidates`` maps ``(item_id, field, position)`` to replacement lists.
    """

    model: ScorerModel
    user_id: str
    user_vector: np.ndarray
    item: ItemRecord
    marginal: float
    k: int
    pool: Mapping[str, np.ndarray] = field(default_factory=dict)
    candidates: Mapping | None = None

    @property
    def score_before(self) -> float:
        return forward(self.model, self.user_vector, self.item.vector)

    def score(self, item_vector) -> float:
        return forward(self.model, self.user_vector, item_vector)

    def token_slots(self) -> list[tuple[int, int]]:
        return [(f, p) for f, toks in enumerate(self.item.tokens) for p in range(len(toks))]

    def slot_candidates(self, f: int, p: int) -> list[Candidate]:
        key = (self.item.item_id, self.item.schema.textual[f].name, p)
        if self.candidates is None or key not in self.candidates:
            raise InputError(f"no replacement candidates for token slot {key}")
        return self.candidates[key]


def make_context(model: ScorerModel, user_id: str, user_vector, items: Mapping[str, ItemRecord], item_id: str,
                 k: int, pool_ids: Sequence[str] | None = None, candidates: Mapping | None = None) -> PairContext:
    """Rank the user's pool and build a context for ``item_id``; NotApplicable if it is not in the top-K."""
    pool_ids = list(items) if pool_ids is None else list(pool_ids)
    pool = {i: items[i].vector for i in pool_ids}
    ranked = rank_topk(model, user_id, user_vector, pool, k)
    if item_id not in ranked.top:
        raise NotApplicable(f"item {item_id!r} is not in the top-{k} list of user {user_id!r}")
    return PairContext(model, user_id, np.asarray(user_vector, dtype=np.float64), items[item_id],
                       ranked.marginal_score, k, pool, candidates)


def context_from_marginal(model: ScorerModel, user_id: str, user_vector, item: ItemRecord, marginal: float,
                          k: int = 1, candidates: Mapping | None = None) -> PairContext:
    """Context with a given marginal score and no explicit candidate pool."""
    return PairContext(model, user_id, np.asarray(user_vector, dtype=np.float64), item, float(marginal), k, {},
                       candidates)


def require_top_k(ctx: PairContext) -> float:
    s = ctx.score_before
    if not s > ctx.marginal:
        raise NotApplicable(f"item {ctx.item.item_id!r} scores {s:.6g} <= marginal {ctx.marginal:.6g}")
    return s


def apply_edits(ctx: PairContext, edits: Sequence[Edit]) -> np.ndarray:
    """Item vector with the edits applied: removed tokens leave the field mean
    (renormalised over kept tokens), replacements swap in the candidate vector,
    categorical replacements re-encode, shifts add their delta."""
    item = ctx.item
    schema = item.schema
    cont = item.continuous.copy()
    cats = [f.encode(v) for f, v in zip(schema.categorical, item.categorical)]
    vectors = [v.copy() for v in item.token_vectors]
    weights = [np.ones(len(t)) for t in item.tokens]
    for e in edits:
        if e.group == CONTINUOUS:
            if e.kind != SHIFT:
                raise InputError(f"continuous edit must be a shift, got {e.kind!r}")
            cont[e.index] += e.delta
        elif e.group == CATEGORICAL:
            if e.kind == REPLACE:
                cats[e.index] = schema.categorical[e.index].encode(str(e.new))
            elif e.kind == REMOVE:
                cats[e.index] = np.zeros(schema.categorical[e.index].width)
            else:
                raise InputError(f"bad categorical edit kind {e.kind!r}")
        elif e.group == TEXT:
            if e.kind == REMOVE:
                weights[e.index][e.position] = 0.0
            elif e.kind == REPLACE:
                cands = ctx.slot_candidates(e.index, e.position)
                match = [c for c in cands if c.token == e.new]
                if not match:
                    raise InputError(f"replacement {e.new!r} is not a candidate for {e.slot}")
                vectors[e.index][e.position] = match[0].vector
            else:
                raise InputError(f"bad text edit kind {e.kind!r}")
        else:
            raise InputError(f"unknown edit group {e.group!r}")
    return item.compose(continuous=cont, categorical=cats, token_vectors=vectors, token_weights=weights, mode="kept")


def finalize(ctx: PairContext, method: str, edits: Sequence[Edit], steps: int, score_before: float,
             flags: Sequence[str] = ()) -> Explanation:
    """Re-score the edited item and build the explanation; validity is the strict score <= marginal check."""
    edits = tuple(edits)
    score_after = ctx.score(apply_edits(ctx, edits)) if edits else score_before
    valid = bool(edits) and score_after <= ctx.marginal
    return Explanation(method, ctx.user_id, ctx.item.item_id, edits, valid, int(steps), float(score_before),
                       float(score_after), float(ctx.marginal), tuple(flags))


def token_removal_edits(ctx: PairContext, slots: Iterable[tuple[int, int]]) -> list[Edit]:
    item = ctx.item
    return [Edit(TEXT, item.schema.textual[f].name, f, REMOVE, old=item.tokens[f][p], position=p)
            for f, p in sorted(slots)]


def shift_edits(ctx: PairContext, delta: np.ndarray, floor: float, nonpositive: bool) -> list[Edit]:
    item = ctx.item
    schema = item.schema
    out = []
    for j, d in enumerate(delta):
        changed = d <= -floor if nonpositive else abs(d) >= floor
        if not changed:
            continue
        f = schema.continuous[j]
        old_raw = item.continuous[j] * f.std + f.mean
        new_raw = (item.continuous[j] + d) * f.std + f.mean
        out.append(Edit(CONTINUOUS, f.name, j, SHIFT, old=float(old_raw), new=float(new_raw), delta=float(d)))
    return out
