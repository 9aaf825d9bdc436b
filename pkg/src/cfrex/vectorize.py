"""Item/user vector assembly and aspect-matrix construction.

Vector layout is fixed by the schema and always follows the canonical order:
continuous features, then categorical features, then one ``text_dim``-wide
block per textual field, each group in declaration order.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, InputError, MissingEmbedding, UnknownCategory
from .ingest import EmbeddingTable, toy_embed

TERNARY = "ternary"
ONEHOT = "onehot"


@dataclass(frozen=True)
class ContinuousFeature:
    name: str
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class CategoricalFeature:
    """A categorical feature.

    ``ternary`` encoding expects a three-value domain ordered as
    (absent, unspecified, present) and maps it to -1, 0, +1.  ``onehot``
    uses one column per domain value.  ``mean``/``std`` are per encoded column.
    """

    name: str
    domain: tuple[str, ...]
    encoding: str = TERNARY
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    @property
    def width(self) -> int:
        return 1 if self.encoding == TERNARY else len(self.domain)

    def encode_raw(self, value: str) -> np.ndarray:
        try:
            idx = self.domain.index(value)
        except ValueError:
            raise UnknownCategory(self.name, value) from None
        if self.encoding == TERNARY:
            return np.array([float(idx - 1)])
        out = np.zeros(len(self.domain))
        out[idx] = 1.0
        return out

    def encode(self, value: str) -> np.ndarray:
        raw = self.encode_raw(value)
        mean = np.zeros(self.width) if self.mean is None else np.asarray(self.mean)
        std = np.ones(self.width) if self.std is None else np.asarray(self.std)
        return (raw - mean) / std


@dataclass(frozen=True)
class TextField:
    name: str
    max_tokens: int = 64


@dataclass(frozen=True)
class FeatureSchema:
    continuous: tuple[ContinuousFeature, ...] = ()
    categorical: tuple[CategoricalFeature, ...] = ()
    textual: tuple[TextField, ...] = ()
    text_dim: int = 0

    def __post_init__(self):
        names = [f.name for f in self.continuous] + [f.name for f in self.categorical] + [f.name for f in self.textual]
        if len(set(names)) != len(names):
            raise InputError("feature names must be unique across groups")
        for f in self.continuous:
            if not f.std > 0:
                raise InputError(f"scaler std for {f.name!r} must be > 0")
        for f in self.categorical:
            if not f.domain:
                raise InputError(f"categorical {f.name!r} has an empty domain")
            if f.encoding not in (TERNARY, ONEHOT):
                raise InputError(f"categorical {f.name!r}: unknown encoding {f.encoding!r}")
            if f.encoding == TERNARY and len(f.domain) != 3:
                raise InputError(f"ternary categorical {f.name!r} needs exactly 3 domain values")
            if f.std is not None and any(not s > 0 for s in f.std):
                raise InputError(f"scaler std for {f.name!r} must be > 0")
        if self.textual and self.text_dim < 1:
            raise InputError("text_dim must be >= 1 when textual fields are declared")

    @property
    def n_continuous(self) -> int:
        return len(self.continuous)

    @property
    def categorical_offsets(self) -> list[slice]:
        out, pos = [], self.n_continuous
        for f in self.categorical:
            out.append(slice(pos, pos + f.width))
            pos += f.width
        return out

    @property
    def text_offsets(self) -> list[slice]:
        pos = self.n_continuous + sum(f.width for f in self.categorical)
        return [slice(pos + k * self.text_dim, pos + (k + 1) * self.text_dim) for k in range(len(self.textual))]

    @property
    def width(self) -> int:
        return self.n_continuous + sum(f.width for f in self.categorical) + self.text_dim * len(self.textual)

    def to_dict(self) -> dict:
        return {
            "continuous": [{"name": f.name, "mean": f.mean, "std": f.std} for f in self.continuous],
            "categorical": [
                {"name": f.name, "domain": list(f.domain), "encoding": f.encoding,
                 "mean": None if f.mean is None else list(f.mean),
                 "std": None if f.std is None else list(f.std)}
                for f in self.categorical
            ],
            "textual": [{"name": f.name, "max_tokens": f.max_tokens} for f in self.textual],
            "text_dim": self.text_dim,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        try:
            return cls(
                continuous=tuple(ContinuousFeature(c["name"], float(c.get("mean", 0.0)), float(c.get("std", 1.0)))
                                 for c in d.get("continuous", [])),
                categorical=tuple(
                    CategoricalFeature(
                        c["name"], tuple(str(v) for v in c["domain"]), c.get("encoding", TERNARY),
                        None if c.get("mean") is None else tuple(float(x) for x in c["mean"]),
                        None if c.get("std") is None else tuple(float(x) for x in c["std"]),
                    )
                    for c in d.get("categorical", [])
                ),
                textual=tuple(TextField(t["name"], int(t.get("max_tokens", 64))) for t in d.get("textual", [])),
                text_dim=int(d.get("text_dim", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed schema: {exc}") from None

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path, header: str | None = None) -> None:
        d = self.to_dict()
        if header:
            d["header"] = header
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def text_block(vectors: np.ndarray, weights: np.ndarray | None = None, mode: str = "count") -> np.ndarray:
    """Weighted mean of token vectors.

    ``mode="count"`` divides by the number of tokens (weights act inside the
    mean); ``mode="kept"`` divides by the number of tokens with non-zero
    weight, i.e. a renormalised mean over the kept tokens.  No tokens, or no
    kept tokens, gives the zero block.
    """
    n = vectors.shape[0]
    if n == 0:
        return np.zeros(vectors.shape[1])
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if mode == "count":
        denom = n
    elif mode == "kept":
        denom = int(np.count_nonzero(w))
        if denom == 0:
            return np.zeros(vectors.shape[1])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return (w @ vectors) / denom


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    schema: FeatureSchema
    continuous: np.ndarray                    # scaled values
    categorical: tuple[str, ...]              # raw values, schema order
    tokens: tuple[tuple[str, ...], ...]       # per textual field
    token_vectors: tuple[np.ndarray, ...]     # per textual field, n_tokens x text_dim
    vector: np.ndarray = field(repr=False)

    @property
    def raw_continuous(self) -> np.ndarray:
        means = np.array([f.mean for f in self.schema.continuous])
        stds = np.array([f.std for f in self.schema.continuous])
        return self.continuous * stds + means

    def compose(self, *, continuous: np.ndarray | None = None,
                categorical: Sequence[np.ndarray] | None = None,
                token_vectors: Sequence[np.ndarray] | None = None,
                token_weights: Sequence[np.ndarray] | None = None,
                mode: str = "count") -> np.ndarray:
        """Rebuild the item vector with any group overridden."""
        s = self.schema
        cont = self.continuous if continuous is None else continuous
        if categorical is None:
            categorical = [f.encode(v) for f, v in zip(s.categorical, self.categorical)]
        tv = self.token_vectors if token_vectors is None else token_vectors
        blocks = []
        for k in range(len(s.textual)):
            w = None if token_weights is None else token_weights[k]
            blocks.append(text_block(tv[k], w, mode if w is not None else "count"))
        parts = [np.asarray(cont, dtype=np.float64).reshape(-1)]
        parts += [np.asarray(c, dtype=np.float64).reshape(-1) for c in categorical]
        parts += blocks
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_vector(cls, item_id: str, vector, names: Sequence[str] | None = None) -> "ItemRecord":
        """Wrap a plain feature vector (e.g. an aspect-quality row) as continuous slots."""
        vec = np.asarray(vector, dtype=np.float64)
        names = names or [f"f{k}" for k in range(vec.size)]
        schema = FeatureSchema(continuous=tuple(ContinuousFeature(n) for n in names))
        return cls(item_id, schema, vec.copy(), (), (), (), vec.copy())


def assemble_item_vector(item_id: str, raw: Mapping, schema: FeatureSchema,
                         table: EmbeddingTable | None = None, fallback_seed: int | None = None) -> ItemRecord:
    """Build an :class:`ItemRecord` from raw feature values.

    ``raw`` holds ``continuous`` (name -> value), ``categorical``
    (name -> value) and ``text`` (field -> token list).  Token vectors are
    looked up under ``(item_id, field, position)``, then under the bare token;
    when both miss, :func:`toy_embed` is used if ``fallback_seed`` is set.
    """
    cont_raw = raw.get("continuous", {})
    cat_raw = raw.get("categorical", {})
    text_raw = raw.get("text", {})

    cont = []
    for f in schema.continuous:
        if f.name not in cont_raw:
            raise InputError(f"item {item_id!r}: missing continuous feature {f.name!r}")
        value = float(cont_raw[f.name])
        if not math.isfinite(value):
            raise InputError(f"item {item_id!r}: non-finite value for {f.name!r}")
        cont.append((value - f.mean) / f.std)

    cats = []
    for f in schema.categorical:
        value = str(cat_raw.get(f.name, f.domain[1] if f.encoding == TERNARY else f.domain[0]))
        f.encode_raw(value)  # validates
        cats.append(value)

    tokens, vectors = [], []
    for f in schema.textual:
        toks = tuple(str(t) for t in text_raw.get(f.name, []))[: f.max_tokens]
        rows = []
        for pos, tok in enumerate(toks):
            vec = None
            if table is not None:
                vec = table.get((item_id, f.name, pos))
                if vec is None:
                    vec = table.get(tok)
            if vec is None:
                if fallback_seed is None:
                    raise MissingEmbedding((item_id, f.name, pos))
                vec = toy_embed(tok, schema.text_dim, fallback_seed)
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (schema.text_dim,):
                raise DimensionMismatch(f"token slot {(item_id, f.name, pos)} has width {vec.size}",
                                        key=(item_id, f.name, pos), expected=schema.text_dim, got=vec.size)
            rows.append(vec)
        tokens.append(toks)
        vectors.append(np.array(rows).reshape(len(rows), schema.text_dim))

    rec = ItemRecord(item_id, schema, np.array(cont, dtype=np.float64), tuple(cats), tuple(tokens), tuple(vectors),
                     np.zeros(0))
    vec = rec.compose()
    assert vec.size == schema.width
    return replace(rec, vector=vec)


def fit_scalers(schema: FeatureSchema, raw_items: Iterable[Mapping]) -> FeatureSchema:
    """Return a schema whose continuous/categorical scalers are fit on ``raw_items``.

    Constant columns get std 1 so the schema stays valid.
    """
    raw_items = list(raw_items)
    if not raw_items:
        raise InputError("cannot fit scalers on an empty item set")

    def _stats(col: np.ndarray):
        mean = col.mean(axis=0)
        std = col.std(axis=0)
        return mean, np.where(std > 0, std, 1.0)

    cont = []
    for f in schema.continuous:
        col = np.array([float(r.get("continuous", {})[f.name]) for r in raw_items])
        m, s = _stats(col)
        cont.append(ContinuousFeature(f.name, float(m), float(s)))
    cats = []
    for f in schema.categorical:
        default = f.domain[1] if f.encoding == TERNARY else f.domain[0]
        col = np.array([f.encode_raw(str(r.get("categorical", {}).get(f.name, default))) for r in raw_items])
        m, s = _stats(col)
        cats.append(replace(f, mean=tuple(float(x) for x in m), std=tuple(float(x) for x in s)))
    return replace(schema, continuous=tuple(cont), categorical=tuple(cats))


def build_user_vector(user_id: str, item_vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of the user's train-split positive item vectors."""
    if len(item_vectors) == 0:
        raise InputError(f"user {user_id!r} has no training positives")
    return np.mean(np.asarray(item_vectors, dtype=np.float64), axis=0)


# -- aspect matrices ----------------------------------------------------------

@dataclass(frozen=True)
class AspectConfig:
    aspects: tuple[str, ...]
    rating_scale: int = 5

    def __post_init__(self):
        if self.rating_scale < 2:
            raise InputError("rating scale must be >= 2")
        if len(set(self.aspects)) != len(self.aspects):
            raise InputError("aspect names must be unique")


@dataclass(frozen=True)
class MentionStats:
    """Aspect mention statistics.

    ``user_freq``/``user_mask`` are m x r (mask True where the user mentioned
    the aspect); ``item_freq``, ``item_sentiment`` and ``item_mask`` are
    n x r, with ``item_freq`` the mention count over all reviews of the item.
    """

    user_freq: np.ndarray
    user_mask: np.ndarray
    item_freq: np.ndarray
    item_sentiment: np.ndarray
    item_mask: np.ndarray


def build_aspect_matrices(stats: MentionStats, cfg: AspectConfig) -> tuple[np.ndarray, np.ndarray]:
    """User-aspect preference matrix X (m x r) and item-aspect quality matrix Y (n x r)."""
    r = len(cfg.aspects)
    t_u = np.asarray(stats.user_freq, dtype=np.float64)
    m_u = np.asarray(stats.user_mask, dtype=bool)
    t_i = np.asarray(stats.item_freq, dtype=np.float64)
    s_i = np.asarray(stats.item_sentiment, dtype=np.float64)
    m_i = np.asarray(stats.item_mask, dtype=bool)
    if t_u.ndim != 2 or t_u.shape[1] != r or m_u.shape != t_u.shape:
        raise DimensionMismatch(f"user stats must be m x {r}, got {t_u.shape} / {m_u.shape}")
    if t_i.ndim != 2 or t_i.shape[1] != r or s_i.shape != t_i.shape or m_i.shape != t_i.shape:
        raise DimensionMismatch(f"item stats must be n x {r}, got {t_i.shape} / {s_i.shape} / {m_i.shape}")
    if np.any(t_u[m_u] < 0) or np.any(t_i[m_i] < 0):
        raise InputError("mention frequencies must be non-negative")
    if np.any(np.abs(s_i[m_i]) > 1):
        raise InputError("sentiments must lie in [-1, 1]")

    n_scale = cfg.rating_scale
    # 2*sigmoid(t) - 1 == tanh(t/2), which stays accurate for small t
    x = 1.0 + (n_scale - 1) * np.tanh(np.where(m_u, t_u, 0.0) / 2.0)
    x = np.where(m_u, x, 0.0)
    ts = np.where(m_i, t_i * s_i, 0.0)
    y = 1.0 + (n_scale - 1) / (1.0 + np.exp(-ts))
    y = np.where(m_i, y, 0.0)
    return x, y


# -- text cleaning ------------------------------------------------------------

_URL = re.compile(r"https?://\S+|www\.\S+")
_TAG = re.compile(r"<(\w+)[^>]*>.*?</\1>|<[^>]+>", re.S)
_WORD = re.compile(r"[A-Za-z0-9']+")


def tokenize(text: str, stopwords: Iterable[str] = ()) -> list[str]:
    """Lower-case word tokens with URLs, tags, stop-words and digit/letter mixes removed."""
    stop = {w.lower() for w in stopwords}
    text = _TAG.sub(" ", _URL.sub(" ", text))
    out = []
    for tok in _WORD.findall(text.lower()):
        tok = tok.strip("'")
        if not tok or tok in stop:
            continue
        if any(c.isdigit() for c in tok) and any(c.isalpha() for c in tok):
            continue
        out.append(tok)
    return out
