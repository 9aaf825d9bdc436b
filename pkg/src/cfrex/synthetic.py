"""Synthetic fixtures with planted feature dependence.

The planted scorers are ordinary :class:`ScorerModel` instances whose
weights are set by hand so that the score is ``sigmoid(gain * a . v + bias)``
for a chosen item-space direction ``a`` (valid while ``|a . v| < shift``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .explain.common import PairContext, context_from_marginal
from .ingest import Candidate, EmbeddingTable
from .scorer import ScorerModel, sigmoid
from .vectorize import (
    CategoricalFeature,
    ContinuousFeature,
    FeatureSchema,
    ItemRecord,
    TextField,
    assemble_item_vector,
)

PASS_SHIFT = 50.0


def planted_model(d_user: int, d_item: int, direction, gain: float = 1.0, bias: float = 0.0,
                  hidden=(8, 4)) -> ScorerModel:
    """Network computing ``sigmoid(gain * direction . item + bias)``, ignoring the user."""
    h1, h2 = hidden
    if h1 < 2 or h2 < 1:
        raise ValueError("planted model needs at least 2/1 hidden units")
    a = np.asarray(direction, dtype=np.float64)
    m = ScorerModel.zeros(d_user, d_item, hidden)
    m.W1[0, d_user:] = a
    m.W1[1, d_user:] = -a
    m.W2[0, 0] = 1.0
    m.W2[0, 1] = -1.0
    m.b2[0] = PASS_SHIFT
    m.W3[0, 0] = gain
    m.b3[0] = bias - gain * PASS_SHIFT
    return m


def random_model(d_user: int, d_item: int, hidden=(8, 4), seed: int = 0, bias_scale: float = 0.5) -> ScorerModel:
    rng = np.random.default_rng(seed)
    m = ScorerModel.init(d_user, d_item, hidden, seed=int(rng.integers(2**31)))
    m.b1[:] = rng.normal(0, bias_scale, m.b1.shape)
    m.b2[:] = rng.normal(0, bias_scale, m.b2.shape)
    m.b3[:] = rng.normal(0, bias_scale, m.b3.shape)
    return m


@dataclass
class PlantedPair:
    ctx: PairContext
    planted: frozenset          # planted slot labels (Edit.slot strings)
    n_slots: int
    info: dict = field(default_factory=dict)

    @property
    def random_precision(self) -> float:
        """Expected precision of a uniformly random non-empty slot subset."""
        return len(self.planted) / self.n_slots


def _orthogonal_unit(rng, w, dim, leak=0.0):
    v = rng.standard_normal(dim)
    v -= (v @ w) * w
    v /= np.linalg.norm(v)
    return v + leak * w


def text_pair(seed: int, n_tokens: int | None = None, n_causes: int = 3, dim: int = 8, cause_strength: float = 3.0,
              gain: float = 4.0, with_candidates: bool = True, hover_weight: float = 0.15,
              margin: float = 0.2, n_candidates: int = 5) -> PlantedPair:
    """One textual field whose score is driven by ``n_causes`` planted tokens.

    The marginal score is placed ``margin`` above the score reached when every
    cause token is down-weighted to ``hover_weight`` inside the field mean, so
    a hinge with that margin is only satisfied once the causes are nearly
    removed.  Replacement candidates for cause tokens include a vector pointing
    against the planted direction.
    """
    rng = np.random.default_rng(seed)
    z = int(n_tokens if n_tokens is not None else rng.integers(6, 16))
    w = rng.standard_normal(dim)
    w /= np.linalg.norm(w)
    cause_pos = sorted(rng.choice(z, size=n_causes, replace=False).tolist())
    tokens, vecs = [], []
    for p in range(z):
        if p in cause_pos:
            tokens.append(f"cause{p}")
            vecs.append(cause_strength * w + 0.3 * _orthogonal_unit(rng, w, dim))
        else:
            tokens.append(f"word{p}")
            vecs.append(_orthogonal_unit(rng, w, dim, leak=rng.uniform(-0.05, 0.05)))
    schema = FeatureSchema(textual=(TextField("desc", 64),), text_dim=dim)
    item_id = f"i{seed}"
    table = EmbeddingTable(dim, {(item_id, "desc", p): v for p, v in enumerate(vecs)})
    item = assemble_item_vector(item_id, {"text": {"desc": tokens}}, schema, table)
    full = w @ item.vector
    bias = 1.0 - gain * full
    model = planted_model(dim, schema.width, w, gain=gain, bias=bias)
    cause_mass = w @ np.sum(np.array(vecs)[cause_pos], axis=0) / z
    hover_logit = 1.0 - gain * (1.0 - hover_weight) * cause_mass
    marginal = float(sigmoid(np.array([hover_logit]))[0]) + margin
    if not marginal < float(sigmoid(np.array([1.0]))[0]):
        raise ValueError("fixture parameters leave the item below its marginal score")

    cands = None
    if with_candidates:
        cands = {}
        for p in range(z):
            lst = [Candidate(tokens[p], vecs[p], 10.0)]
            for k in range(1, n_candidates):
                if p in cause_pos and k == 1:
                    v = -cause_strength * w + 0.3 * _orthogonal_unit(rng, w, dim)
                    lst.append(Candidate(f"anti{p}", v, 9.0))
                else:
                    lst.append(Candidate(f"alt{p}_{k}", _orthogonal_unit(rng, w, dim, leak=rng.uniform(-0.05, 0.05)),
                                         10.0 - k))
            order = rng.permutation(n_candidates)
            cands[(item_id, "desc", p)] = [lst[i] for i in order]
    user = rng.standard_normal(dim)
    ctx = context_from_marginal(model, f"u{seed}", user, item, marginal, candidates=cands)
    planted = frozenset(f"desc[{p}]" for p in cause_pos)
    return PlantedPair(ctx, planted, z, {"direction": w, "cause_positions": cause_pos})


def aspect_pair(seed: int, n_aspects: int = 10, planted: tuple[int, ...] = (2, 5, 7), gain: float = 1.5,
                flip_fraction: float = 0.5) -> PlantedPair:
    """Aspect-quality item whose score depends only on the ``planted`` aspects."""
    rng = np.random.default_rng(seed)
    names = [f"aspect{k}" for k in range(n_aspects)]
    y = rng.uniform(1.5, 5.0, n_aspects)
    item = ItemRecord.from_vector(f"i{seed}", y, names)
    a = np.zeros(n_aspects)
    a[list(planted)] = rng.uniform(0.5, 1.5, len(planted))
    base = a @ y
    model = planted_model(n_aspects, n_aspects, a, gain=gain, bias=-gain * base + 1.0)
    s = float(sigmoid(np.array([1.0]))[0])
    # marginal needs a drop of flip_fraction in the logit
    marginal = float(sigmoid(np.array([1.0 - flip_fraction * gain]))[0])
    user = rng.uniform(1.0, 5.0, n_aspects)
    ctx = context_from_marginal(model, f"u{seed}", user, item, marginal)
    assert ctx.score_before > marginal and abs(ctx.score_before - s) < 1e-9
    return PlantedPair(ctx, frozenset(names[k] for k in planted), n_aspects, {"direction": a})


def mixed_pair(seed: int, dim: int = 8, n_tokens: int = 8, gain: float = 3.0) -> PlantedPair:
    """Item with continuous, ternary categorical and textual features.

    The planted direction touches one continuous feature, one categorical
    feature and one token slot.
    """
    rng = np.random.default_rng(seed)
    schema = FeatureSchema(
        continuous=(ContinuousFeature("latitude", 36.1, 0.05), ContinuousFeature("longitude", -86.8, 0.05)),
        categorical=(
            CategoricalFeature("halal", ("False", "Not-mentioned", "True")),
            CategoricalFeature("open24hours", ("False", "Not-mentioned", "True")),
            CategoricalFeature("parking", ("False", "Not-mentioned", "True")),
        ),
        textual=(TextField("tips", 32),),
        text_dim=dim,
    )
    w_text = rng.standard_normal(dim)
    w_text /= np.linalg.norm(w_text)
    cause_pos = [int(rng.integers(n_tokens))]
    tokens, vecs = [], []
    for p in range(n_tokens):
        if p in cause_pos:
            tokens.append(f"cause{p}")
            vecs.append(3.0 * w_text + 0.3 * _orthogonal_unit(rng, w_text, dim))
        else:
            tokens.append(f"word{p}")
            vecs.append(_orthogonal_unit(rng, w_text, dim, leak=rng.uniform(-0.05, 0.05)))
    raw = {
        "continuous": {"latitude": 36.1 + rng.normal(0, 0.05), "longitude": -86.8 + rng.normal(0, 0.05)},
        "categorical": {"halal": "True", "open24hours": str(rng.choice(["False", "Not-mentioned"])),
                        "parking": "Not-mentioned"},
        "text": {"tips": tokens},
    }
    item_id = f"i{seed}"
    table = EmbeddingTable(dim, {(item_id, "tips", p): v for p, v in enumerate(vecs)})
    item = assemble_item_vector(item_id, raw, schema, table)
    a = np.zeros(schema.width)
    a[0] = 0.5                                   # latitude
    a[schema.categorical_offsets[0]] = 0.6       # halal
    a[schema.text_offsets[0]] = w_text * 0.8
    base = a @ item.vector
    model = planted_model(schema.width, schema.width, a, gain=gain, bias=-gain * base + 1.0)
    marginal = float(sigmoid(np.array([1.0 - 0.6 * gain]))[0])
    cands = {}
    for p in range(n_tokens):
        lst = [Candidate(tokens[p], vecs[p], 10.0)]
        for k in range(1, 5):
            if p in cause_pos and k == 1:
                lst.append(Candidate(f"anti{p}", -3.0 * w_text, 9.0))
            else:
                lst.append(Candidate(f"alt{p}_{k}", _orthogonal_unit(rng, w_text, dim, leak=0.02), 10.0 - k))
        cands[(item_id, "tips", p)] = lst
    user = rng.standard_normal(schema.width)
    ctx = context_from_marginal(model, f"u{seed}", user, item, marginal, candidates=cands)
    planted = frozenset({"latitude", "halal"} | {f"tips[{p}]" for p in cause_pos})
    n_slots = schema.n_continuous + len(schema.categorical) + n_tokens
    return PlantedPair(ctx, planted, n_slots, {"direction": a})
