"""Reading interaction logs, embedding tables and replacement candidates.

Interaction files are TSV ``user_id<TAB>item_id[<TAB>timestamp]``.  Embedding
files start with a ``dim=<d> count=<n>`` header followed by one
``key<TAB>v1 ... vd`` record per line; keys of the form
``item_id|field|position`` denote token occurrences.  A binary variant with
the same header is also supported (see :func:`write_embeddings`).
"""

from __future__ import annotations

import hashlib
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DimensionMismatch, InputError, ParseError

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
BINARY_MAGIC = b"CFREXEMB1\n"

TokenKey = tuple[str, str, int]


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    label: int
    split: str


@dataclass(frozen=True)
class SplitPolicy:
    min_user_reviews: int = 5
    min_item_reviews: int = 10
    min_items_for_eval: int = 15
    holdout_valid: int = 5
    holdout_test: int = 5
    neg_ratio: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.holdout_valid + self.holdout_test >= self.min_items_for_eval:
            raise InputError("holdout_valid + holdout_test must be < min_items_for_eval")
        if self.neg_ratio < 1:
            raise InputError("neg_ratio must be >= 1")


def _read_raw_interactions(path: Path) -> list[tuple[str, str, float | None, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
                raise ParseError(path, line_no, f"expected 2 or 3 tab-separated fields, got {len(parts)}")
            ts = None
            if len(parts) == 3 and parts[2] != "":
                try:
                    ts = float(parts[2])
                except ValueError:
                    raise ParseError(path, line_no, f"bad timestamp {parts[2]!r}") from None
            rows.append((parts[0], parts[1], ts, line_no))
    return rows


def load_interactions(path, policy: SplitPolicy | None = None) -> list[Interaction]:
    """Filter, split and negative-sample an interaction log.

    Users and items are filtered in a single pass on the raw counts.  For users
    with at least ``min_items_for_eval`` positives the last ``holdout_test``
    positives go to test and the ``holdout_valid`` before them to valid
    (ordering by timestamp, ties and missing timestamps by file order).
    Negatives are drawn per user without replacement from the non-interacted
    items, with test, valid and train pools kept disjoint.
    """
    policy = policy or SplitPolicy()
    path = Path(path)
    rows = _read_raw_interactions(path)

    # first occurrence wins for duplicate (user, item) pairs
    seen = set()
    dedup = []
    for user, item, ts, line_no in rows:
        if (user, item) in seen:
            continue
        seen.add((user, item))
        dedup.append((user, item, ts, line_no))

    user_count: dict[str, int] = defaultdict(int)
    item_count: dict[str, int] = defaultdict(int)
    for user, item, _, _ in dedup:
        user_count[user] += 1
        item_count[item] += 1

    kept = [
        r for r in dedup
        if user_count[r[0]] >= policy.min_user_reviews and item_count[r[1]] >= policy.min_item_reviews
    ]
    items = sorted({r[1] for r in kept})
    by_user: dict[str, list] = defaultdict(list)
    for r in kept:
        by_user[r[0]].append(r)

    rng = np.random.default_rng(policy.seed)
    out: list[Interaction] = []
    for user in sorted(by_user):
        recs = by_user[user]
        # missing timestamps sort by file order only
        recs.sort(key=lambda r: (r[2] if r[2] is not None else float("-inf"), r[3]))
        ordered = [r[1] for r in recs]

        if len(ordered) >= policy.min_items_for_eval:
            n_hold = policy.holdout_valid + policy.holdout_test
            positives = {
                "train": ordered[:-n_hold],
                "valid": ordered[-n_hold:len(ordered) - policy.holdout_test],
                "test": ordered[len(ordered) - policy.holdout_test:],
            }
        else:
            positives = {"train": ordered, "valid": [], "test": []}

        interacted = set(ordered)
        pool = np.array([i for i in items if i not in interacted], dtype=object)
        pool = pool[rng.permutation(len(pool))]
        cursor = 0
        negatives = {}
        for split in ("test", "valid", "train"):
            want = policy.neg_ratio * len(positives[split])
            take = pool[cursor:cursor + want]
            if len(take) < want:
                log.warning("user %s: only %d of %d negatives available for %s", user, len(take), want, split)
            negatives[split] = sorted(take.tolist())
            cursor += len(take)

        for split in SPLITS:
            out.extend(Interaction(user, item, 1, split) for item in positives[split])
            out.extend(Interaction(user, item, 0, split) for item in negatives[split])
    return out


def write_interactions(path, interactions: Iterable[Interaction], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for it in interactions:
            fh.write(f"{it.user_id}\t{it.item_id}\t{it.label}\t{it.split}\n")


def read_split_file(path) -> list[Interaction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[3] not in SPLITS or parts[2] not in ("0", "1"):
                raise ParseError(path, line_no, "expected user, item, label, split")
            out.append(Interaction(parts[0], parts[1], int(parts[2]), parts[3]))
    return out


# -- embeddings ---------------------------------------------------------------

def format_key(key) -> str:
    if isinstance(key, tuple):
        return "|".join(str(k) for k in key)
    return str(key)


def parse_key(text: str):
    parts = text.split("|")
    if len(parts) == 3:
        try:
            return (parts[0], parts[1], int(parts[2]))
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    entries: Mapping = field(default_factory=dict)
    meta: Mapping = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def get(self, key, default=None):
        return self.entries.get(key, default)

    def __getitem__(self, key):
        return self.entries[key]


def _parse_header(text: str, path, line_no: int) -> dict[str, str]:
    fields = {}
    for tok in text.split():
        if "=" not in tok:
            raise ParseError(path, line_no, f"bad header token {tok!r}")
        k, v = tok.split("=", 1)
        fields[k] = v
    if "dim" not in fields or "count" not in fields:
        raise ParseError(path, line_no, "header must declare dim=<d> count=<n>")
    try:
        dim, count = int(fields["dim"]), int(fields["count"])
    except ValueError:
        raise ParseError(path, line_no, "dim and count must be integers") from None
    if dim < 1 or count < 0:
        raise ParseError(path, line_no, "dim must be >= 1 and count >= 0")
    return fields


def _check_vector(key, vec: np.ndarray, dim: int):
    if vec.shape != (dim,):
        raise DimensionMismatch(f"entry {format_key(key)!r} has {vec.size} values, header says dim={dim}",
                                key=key, expected=dim, got=vec.size)
    if not np.all(np.isfinite(vec)):
        raise InputError(f"entry {format_key(key)!r} has non-finite values")


def load_embeddings(path) -> EmbeddingTable:
    """Load a text or binary embedding file; the format is sniffed from the first bytes."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(BINARY_MAGIC))
    if head == BINARY_MAGIC:
        return _load_embeddings_binary(path)

    entries = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise ParseError(path, 1, "missing header")
        meta = _parse_header(header, path, 1)
        dim, count = int(meta["dim"]), int(meta["count"])
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError(path, line_no, "expected key<TAB>values")
            key_text, values = line.split("\t", 1)
            key = parse_key(key_text)
            try:
                vec = np.array(values.split(), dtype=np.float64)
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric value in entry {key_text!r}") from None
            _check_vector(key, vec, dim)
            if key in entries:
                raise ParseError(path, line_no, f"duplicate key {key_text!r}")
            entries[key] = vec
    if len(entries) != count:
        raise InputError(f"{path}: header declares count={count}, found {len(entries)} entries")
    return EmbeddingTable(dim, entries, meta)


def _load_embeddings_binary(path: Path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        fh.read(len(BINARY_MAGIC))
        meta = _parse_header(fh.readline().decode("utf-8"), path, 2)
        dim, count = int(meta["dim"]), int(meta["count"])
        entries = {}
        for _ in range(count):
            raw = fh.read(4)
            if len(raw) < 4:
                raise InputError(f"{path}: truncated after {len(entries)} entries")
            (klen,) = struct.unpack("<I", raw)
            key = parse_key(fh.read(klen).decode("utf-8"))
            buf = fh.read(8 * dim)
            if len(buf) != 8 * dim:
                raise DimensionMismatch(f"entry {format_key(key)!r} truncated", key=key, expected=dim,
                                        got=len(buf) // 8)
            vec = np.frombuffer(buf, dtype="<f8").astype(np.float64)
            _check_vector(key, vec, dim)
            entries[key] = vec
        if fh.read(1):
            raise InputError(f"{path}: trailing data after {count} entries")
    return EmbeddingTable(dim, entries, meta)


def write_embeddings(path, entries: Mapping, dim: int, binary: bool = False, **meta) -> None:
    """Write an embedding table; extra ``meta`` pairs are appended to the header."""
    extra = "".join(f" {k}={v}" for k, v in meta.items())
    header = f"dim={dim} count={len(entries)}{extra}\n"
    if binary:
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(header.encode("utf-8"))
            for key, vec in entries.items():
                kb = format_key(key).encode("utf-8")
                fh.write(struct.pack("<I", len(kb)))
                fh.write(kb)
                fh.write(np.asarray(vec, dtype="<f8").tobytes())
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header)
        for key, vec in entries.items():
            fh.write(format_key(key) + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")


def toy_embed(token: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm stand-in for a contextual token vector."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


# -- replacement candidates ---------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    token: str
    vector: np.ndarray
    logit: float


CandidateSet = dict  # TokenKey -> list[Candidate]


def load_candidates(path, n_candidates: int = 5, dim: int | None = None,
                    originals: Mapping[TokenKey, str] | None = None) -> CandidateSet:
    """Read ``item_id, field, position, token, logit, v1..vd`` rows grouped per token slot."""
    path = Path(path)
    out: dict[TokenKey, list[Candidate]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 6:
                raise ParseError(path, line_no, "expected item, field, position, token, logit, vector")
            item, fld, pos, token, logit = parts[:5]
            try:
                key = (item, fld, int(pos))
                logit_v = float(logit)
                vec = np.array(" ".join(parts[5:]).split(), dtype=np.float64)
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
            if dim is None:
                dim = vec.size
            _check_vector(key, vec, dim)
            out[key].append(Candidate(token, vec, logit_v))
    for key, cands in out.items():
        if len(cands) != n_candidates:
            raise InputError(f"slot {format_key(key)!r} has {len(cands)} candidates, expected {n_candidates}")
        if originals is not None and key in originals:
            if originals[key] not in [c.token for c in cands]:
                raise InputError(f"slot {format_key(key)!r}: original token {originals[key]!r} not among candidates")
    return dict(out)


def write_candidates(path, candidates: CandidateSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (item, fld, pos), cands in candidates.items():
            for c in cands:
                vec = " ".join(repr(float(x)) for x in c.vector)
                fh.write(f"{item}\t{fld}\t{pos}\t{c.token}\t{c.logit!r}\t{vec}\n")
