"""Small end-to-end dataset for trying the command line.

Users fall into disjoint groups and interact with every item of their group,
so the ranking task is separable.  Items carry two continuous and three
ternary categorical features drawn independently of the group, plus a short
token field mixing group words with words shared by all groups.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ingest import write_embeddings

DIM = 8
N_CANDIDATES = 5
GROUP_STEMS = ("amber", "basil", "cedar", "delta", "ember", "fable", "garnet", "harbor", "indigo", "juniper")


def write_demo(out_dir, n_groups: int = 6, users_per_group: int = 20, items_per_group: int = 18,
               words_per_group: int = 10, tokens_per_item: int = 6, seed: int = 0) -> dict:
    """Write interactions, items, schema, embeddings, candidates, reviews and a config; return the config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if n_groups > len(GROUP_STEMS) or words_per_group > 26:
        raise ValueError("too many groups or words for the demo vocabulary")
    rng = np.random.default_rng(seed)

    vocab, word_vec = [], {}
    for g in range(n_groups):
        centre = rng.standard_normal(DIM)
        centre /= np.linalg.norm(centre)
        words = [GROUP_STEMS[g] + chr(ord("a") + j) for j in range(words_per_group)]
        for w in words:
            word_vec[w] = centre + 0.4 * rng.standard_normal(DIM) / np.sqrt(DIM)
        vocab.append(words)
    shared = ["plain" + chr(ord("a") + j) for j in range(words_per_group)]
    for w in shared:
        word_vec[w] = rng.standard_normal(DIM) / np.sqrt(DIM)

    items, group_items = [], []
    for g in range(n_groups):
        ids = []
        for j in range(items_per_group):
            iid = f"item{g:02d}{j:02d}"
            n_group = tokens_per_item // 2
            toks = rng.choice(vocab[g], size=n_group, replace=False).tolist()
            toks += rng.choice(shared, size=tokens_per_item - n_group, replace=False).tolist()
            toks = [toks[i] for i in rng.permutation(tokens_per_item)]
            items.append({
                "item_id": iid,
                "continuous": {"latitude": round(36.0 + rng.normal(0, 0.05), 5),
                               "longitude": round(-86.8 + rng.normal(0, 0.05), 5)},
                "categorical": {"halal": str(rng.choice(["False", "True"])),
                                "open24hours": str(rng.choice(["False", "Not-mentioned", "True"])),
                                "parking": str(rng.choice(["False", "Not-mentioned", "True"]))},
                "text": {"desc": toks},
            })
            ids.append(iid)
        group_items.append(ids)

    with open(out / "items.jsonl", "w", encoding="utf-8") as fh:
        for rec in items:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    schema = {
        "continuous": [{"name": "latitude"}, {"name": "longitude"}],
        "categorical": [{"name": n, "domain": ["False", "Not-mentioned", "True"], "encoding": "ternary"}
                        for n in ("halal", "open24hours", "parking")],
        "textual": [{"name": "desc", "max_tokens": 32}],
        "text_dim": DIM,
    }
    (out / "schema.json").write_text(json.dumps(schema, indent=1, sort_keys=True) + "\n")
    write_embeddings(out / "embeddings.txt", word_vec, DIM)

    with open(out / "candidates.tsv", "w", encoding="utf-8") as fh:
        for g, ids in enumerate(group_items):
            others = [w for h in range(n_groups) if h != g for w in vocab[h]] + shared
            for rec in (items[g * items_per_group + j] for j in range(items_per_group)):
                for pos, tok in enumerate(rec["text"]["desc"]):
                    alts = rng.choice([w for w in others if w != tok], size=N_CANDIDATES - 1, replace=False)
                    rows = [(tok, 10.0)] + [(str(a), 9.0 - k) for k, a in enumerate(alts)]
                    for word, logit in rows:
                        vec = " ".join(repr(float(x)) for x in word_vec[word])
                        fh.write(f"{rec['item_id']}\tdesc\t{pos}\t{word}\t{logit!r}\t{vec}\n")

    by_id = {rec["item_id"]: rec for rec in items}
    with open(out / "interactions.tsv", "w", encoding="utf-8") as inter, \
            open(out / "reviews.tsv", "w", encoding="utf-8") as rev:
        for g in range(n_groups):
            for u in range(users_per_group):
                uid = f"user{g:02d}{u:02d}"
                order = rng.permutation(items_per_group)
                for t, j in enumerate(order):
                    iid = group_items[g][j]
                    inter.write(f"{uid}\t{iid}\t{1000 + t}\n")
                    toks = by_id[iid]["text"]["desc"]
                    said = rng.choice(toks, size=3, replace=False).tolist()
                    rev.write(f"{uid}\t{iid}\tthe {' '.join(said)} was good\n")

    config = {
        "interactions": "interactions.tsv",
        "items": "items.jsonl",
        "schema": "schema.json",
        "embeddings": "embeddings.txt",
        "candidates": "candidates.tsv",
        "reviews": "reviews.tsv",
        "output_dir": "out",
        "k": 5,
        "seed": 0,
        "method": "counter-text",
        "hidden": [16, 8],
        "train": {"lr": 0.1, "epochs": 40, "batch_size": 64},
        "max_pairs": 24,
        "stability_runs": 10,
        "stability_pairs": 10,
        "methods": {"gumbel": {"max_steps": 200}, "mixed": {"gumbel": {"max_steps": 200}}},
    }
    (out / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    return config
