"""Command line entry point.

    cfrex prepare|train|recommend|explain|eval|stability --config run.json [flags]
    cfrex demo OUT_DIR

Paths in the config are relative to the config file.  Every artifact is
written under ``output_dir`` and starts with a header carrying the config
hash and seed.  Exit codes: 0 ok, 2 usage, 3 input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, is_dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import metrics
from .errors import CfrexError, DimensionMismatch, DivergenceError, InputError, NotApplicable
from .explain import METHODS, default_configs, make_context, read_explanations, run_method, write_explanations
from .ingest import SplitPolicy, load_candidates, load_embeddings, load_interactions, read_split_file, \
    write_interactions
from .scorer import ScorerModel, TrainConfig, ndcg, rank_topk, train
from .vectorize import FeatureSchema, assemble_item_vector, build_user_vector, fit_scalers, tokenize

log = logging.getLogger("cfrex")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("prepare", "train", "recommend", "explain", "eval", "stability")
PATH_KEYS = ("interactions", "items", "schema", "embeddings", "candidates", "reviews", "output_dir")
STOPWORDS = frozenset("a an and are as at be but by for from had has have i in is it its my of on or so that the "
                      "this to was we were with you very good great".split())

DEFAULTS = {
    "k": 5,
    "seed": 0,
    "jobs": 1,
    "method": "counter-text",
    "hidden": [512, 256],
    "train": {},
    "split": {},
    "methods": {},
    "n_candidates": 5,
    "toy_embed_seed": None,
    "max_pairs": 0,
    "stability": False,
    "stability_runs": 10,
    "stability_pairs": 10,
}


class UsageError(CfrexError):
    pass


# -- config -------------------------------------------------------------------

def load_config(path, overrides: dict) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    cfg = {**DEFAULTS, **raw, **{k: v for k, v in overrides.items() if v is not None}}
    if cfg["method"] not in METHODS:
        raise UsageError(f"unknown method {cfg['method']!r}; expected one of {', '.join(METHODS)}")
    if int(cfg["k"]) < 1:
        raise UsageError("k must be >= 1")
    hashed = {k: v for k, v in cfg.items() if k not in ("jobs", "stability")}
    cfg["config_hash"] = hashlib.sha256(json.dumps(hashed, sort_keys=True).encode()).hexdigest()[:16]
    base = path.parent
    for key in PATH_KEYS:
        if cfg.get(key):
            cfg[key] = str((base / cfg[key]).resolve())
    if not cfg.get("output_dir"):
        raise UsageError("config needs an output_dir")
    return cfg


def require_paths(cfg: dict, *keys: str) -> None:
    for key in keys:
        if not cfg.get(key):
            raise UsageError(f"missing input: config key {key!r} is not set")
        if not Path(cfg[key]).exists():
            raise UsageError(f"missing input {key!r}: {cfg[key]} does not exist")


def artifact_header(cfg: dict, command: str) -> str:
    return f"cfrex {command} config={cfg['config_hash']} seed={cfg['seed']}"


def _override(obj, block: dict):
    """Return a copy of dataclass ``obj`` with ``block`` applied (nested dataclasses take dicts)."""
    names = {f.name for f in fields(obj)}
    unknown = set(block) - names
    if unknown:
        raise UsageError(f"unknown {type(obj).__name__} keys: {', '.join(sorted(unknown))}")
    changes = {}
    for key, value in block.items():
        current = getattr(obj, key)
        changes[key] = _override(current, value) if is_dataclass(current) and isinstance(value, dict) else value
    try:
        return replace(obj, **changes)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def method_config(cfg: dict, method: str):
    return _override(default_configs()[method], cfg["methods"].get(method, {}))


def pair_seed(seed: int, user_id: str, item_id: str) -> int:
    digest = hashlib.blake2b(f"{seed}|{user_id}|{item_id}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


# -- workspace ----------------------------------------------------------------

class Workspace:
    """Lazily loaded inputs and intermediate artifacts of one run."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    @cached_property
    def raw_items(self) -> dict:
        require_paths(self.cfg, "items")
        out = {}
        with open(self.cfg["items"], encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    out[str(rec["item_id"])] = rec
                except (json.JSONDecodeError, KeyError) as exc:
                    raise InputError(f"{self.cfg['items']}:{line_no}: bad item record: {exc}") from None
        return out

    @cached_property
    def splits(self):
        p = self.path("splits.tsv")
        if not p.exists():
            raise UsageError(f"missing input: {p} (run 'prepare' first)")
        return read_split_file(p)

    @cached_property
    def schema(self) -> FeatureSchema:
        p = self.path("schema.fitted.json")
        if not p.exists():
            raise UsageError(f"missing input: {p} (run 'prepare' first)")
        return FeatureSchema.load(p)

    @cached_property
    def items(self) -> dict:
        table = None
        if self.cfg.get("embeddings"):
            require_paths(self.cfg, "embeddings")
            table = load_embeddings(self.cfg["embeddings"])
            if table.dim != self.schema.text_dim:
                raise DimensionMismatch(f"embedding dim {table.dim} != schema text_dim {self.schema.text_dim}",
                                        expected=self.schema.text_dim, got=table.dim)
        needed = sorted({it.item_id for it in self.splits})
        missing = [i for i in needed if i not in self.raw_items]
        if missing:
            raise InputError(f"{len(missing)} items lack feature records, e.g. {missing[0]!r}")
        return {i: assemble_item_vector(i, self.raw_items[i], self.schema, table, self.cfg["toy_embed_seed"])
                for i in needed}

    @cached_property
    def user_vectors(self) -> dict:
        pos: dict[str, list] = {}
        for it in self.splits:
            if it.split == "train" and it.label == 1:
                pos.setdefault(it.user_id, []).append(self.items[it.item_id].vector)
        return {u: build_user_vector(u, v) for u, v in sorted(pos.items())}

    @cached_property
    def test_pools(self) -> dict:
        """Per user: (candidate item ids, positive ids) of the test split."""
        pools: dict[str, tuple[list, set]] = {}
        for it in self.splits:
            if it.split == "test":
                ids, pos = pools.setdefault(it.user_id, ([], set()))
                ids.append(it.item_id)
                if it.label:
                    pos.add(it.item_id)
        return {u: pools[u] for u in sorted(pools) if u in self.user_vectors}

    @cached_property
    def model(self) -> ScorerModel:
        p = self.path("model.bin")
        if not p.exists():
            raise UsageError(f"missing input: {p} (run 'train' first)")
        model = ScorerModel.load(p)
        if model.d_item != self.schema.width or model.d_user != self.schema.width:
            raise DimensionMismatch(f"model expects item width {model.d_item}, schema gives {self.schema.width}",
                                    expected=model.d_item, got=self.schema.width)
        return model

    @cached_property
    def candidates(self):
        if not self.cfg.get("candidates"):
            return None
        require_paths(self.cfg, "candidates")
        originals = {(i, f.name, p): tok
                     for i, rec in self.items.items()
                     for f, toks in zip(self.schema.textual, rec.tokens) for p, tok in enumerate(toks)}
        return load_candidates(self.cfg["candidates"], self.cfg["n_candidates"], self.schema.text_dim, originals)

    @cached_property
    def truth(self) -> dict:
        if not self.cfg.get("reviews"):
            return {}
        require_paths(self.cfg, "reviews")
        out = {}
        with open(self.cfg["reviews"], encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t", 2)
                if len(parts) == 3 and not line.startswith("#"):
                    out.setdefault((parts[0], parts[1]), set()).update(tokenize(parts[2], STOPWORDS))
        return out

    def ranked(self, user_id: str):
        ids, _ = self.test_pools[user_id]
        return rank_topk(self.model, user_id, self.user_vectors[user_id],
                         {i: self.items[i].vector for i in ids}, self.cfg["k"])

    def eligible_pairs(self) -> list[tuple[str, str]]:
        """Test positives that sit in the user's top-K of the test candidate list."""
        pairs = []
        for user, (ids, pos) in self.test_pools.items():
            if len(ids) <= self.cfg["k"]:
                continue
            top = self.ranked(user).top
            pairs.extend((user, i) for i in sorted(pos) if i in top)
        return pairs

    def selected_pairs(self) -> list[tuple[str, str]]:
        pairs = self.eligible_pairs()
        n = int(self.cfg["max_pairs"])
        if 0 < n < len(pairs):
            rng = np.random.default_rng(self.cfg["seed"])
            pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), size=n, replace=False))]
        return pairs

    def context(self, user_id: str, item_id: str):
        ids, _ = self.test_pools[user_id]
        return make_context(self.model, user_id, self.user_vectors[user_id], self.items, item_id,
                            self.cfg["k"], ids, self.candidates)


# -- commands -----------------------------------------------------------------

def cmd_prepare(ws: Workspace) -> None:
    cfg = ws.cfg
    require_paths(cfg, "interactions", "items", "schema")
    policy = SplitPolicy(**{**cfg["split"], "seed": cfg["seed"]})
    inter = load_interactions(cfg["interactions"], policy)
    if not inter:
        raise InputError("no interactions survive filtering")
    write_interactions(ws.path("splits.tsv"), inter, artifact_header(cfg, "prepare"))
    used = sorted({it.item_id for it in inter})
    missing = [i for i in used if i not in ws.raw_items]
    if missing:
        raise InputError(f"{len(missing)} items lack feature records, e.g. {missing[0]!r}")
    train_items = sorted({it.item_id for it in inter if it.split == "train"})
    schema = fit_scalers(FeatureSchema.load(cfg["schema"]), [ws.raw_items[i] for i in train_items])
    schema.save(ws.path("schema.fitted.json"), artifact_header(cfg, "prepare"))
    counts = {s: sum(1 for it in inter if it.split == s) for s in ("train", "valid", "test")}
    print(f"prepared {len({it.user_id for it in inter})} users, {len(used)} items, "
          + ", ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(ws: Workspace) -> None:
    cfg = ws.cfg
    rows = [it for it in ws.splits if it.split == "train" and it.user_id in ws.user_vectors]
    if not rows:
        raise InputError("no training rows")
    U = np.array([ws.user_vectors[it.user_id] for it in rows])
    V = np.array([ws.items[it.item_id].vector for it in rows])
    y = np.array([it.label for it in rows], dtype=np.float64)
    tcfg = _override(TrainConfig(seed=cfg["seed"]), cfg["train"])
    model = ScorerModel.init(ws.schema.width, ws.schema.width, tuple(cfg["hidden"]), seed=cfg["seed"])
    model, trace = train(model, U, V, y, tcfg)
    model.save(ws.path("model.bin"), config=cfg["config_hash"], seed=cfg["seed"])
    ws.__dict__["model"] = model
    value = _ndcg(ws)
    report = {"header": artifact_header(cfg, "train"), "k": cfg["k"], "ndcg": value, "loss": trace}
    ws.path("train_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"NDCG@{cfg['k']} = {value:.4f} (final loss {trace[-1] if trace else float('nan'):.4f})")


def _ndcg(ws: Workspace) -> float:
    ranked = {u: ws.ranked(u).item_ids for u, (ids, _) in ws.test_pools.items() if len(ids) > ws.cfg["k"]}
    truth = {u: pos for u, (_, pos) in ws.test_pools.items()}
    return ndcg(ranked, truth, ws.cfg["k"])


def cmd_recommend(ws: Workspace) -> None:
    with open(ws.path("recommendations.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"# {artifact_header(ws.cfg, 'recommend')}\n")
        for user, (ids, _) in ws.test_pools.items():
            if len(ids) <= ws.cfg["k"]:
                continue
            r = ws.ranked(user)
            for rank, (item, score) in enumerate(zip(r.top, r.scores), start=1):
                fh.write(f"{user}\t{rank}\t{item}\t{score!r}\n")
    print(f"wrote {ws.path('recommendations.tsv')}")


def _check_method_inputs(ws: Workspace, method: str) -> None:
    if method in ("gumbel", "mixed") and ws.candidates is None:
        raise UsageError(f"method {method!r} needs a replacement candidates file (config key 'candidates')")


def explain_pairs(ws: Workspace, method: str, pairs, seed: int) -> list:
    """Run ``method`` on each pair with a per-pair seed; order follows ``pairs``."""
    mcfg = method_config(ws.cfg, method)

    def one(pair):
        user, item = pair
        try:
            ctx = ws.context(user, item)
        except NotApplicable:
            return None
        return run_method(method, ctx, mcfg, seed=pair_seed(seed, user, item))

    # materialise shared state before threads start
    ws.model, ws.items, ws.user_vectors, ws.test_pools, ws.candidates
    jobs = max(1, int(ws.cfg["jobs"]))
    if jobs == 1:
        results = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, pairs))
    return [r for r in results if r is not None]


def explanations_path(ws: Workspace, method: str) -> Path:
    return ws.path(f"explanations.{method}.jsonl")


def cmd_explain(ws: Workspace) -> None:
    method = ws.cfg["method"]
    _check_method_inputs(ws, method)
    pairs = ws.selected_pairs()
    log.info("explaining %d pairs with %s", len(pairs), method)
    expls = explain_pairs(ws, method, pairs, ws.cfg["seed"])
    write_explanations(explanations_path(ws, method), expls, artifact_header(ws.cfg, "explain"))
    rate, avg = metrics.found_rate_and_avg(expls)
    log.info("found rate %.4f", rate)
    avg_s = "N/A" if avg is None else f"{avg:.2f}"
    print(f"{method}: {len(expls)} pairs, found rate {rate:.4f}, features avg {avg_s}")


def run_stability(ws: Workspace, method: str) -> dict:
    _check_method_inputs(ws, method)
    pairs = ws.eligible_pairs()
    n = min(int(ws.cfg["stability_pairs"]), len(pairs))
    if n == 0:
        raise InputError("no eligible pairs for the stability audit")
    rng = np.random.default_rng(ws.cfg["seed"])
    chosen = [pairs[i] for i in sorted(rng.choice(len(pairs), size=n, replace=False))]
    runs = [explain_pairs(ws, method, chosen, ws.cfg["seed"] + r) for r in range(int(ws.cfg["stability_runs"]))]
    per_pair = []
    for j, (user, item) in enumerate(chosen):
        sets = [sorted(run[j].features()) if run[j].valid else [] for run in runs]
        per_pair.append({"user_id": user, "item_id": item, "runs": sets, "stability": metrics.stability(sets)})
    value = float(np.mean([p["stability"] for p in per_pair]))
    return {"method": method, "stability": value, "pairs": per_pair}


def cmd_stability(ws: Workspace) -> None:
    result = run_stability(ws, ws.cfg["method"])
    result["header"] = artifact_header(ws.cfg, "stability")
    p = ws.path(f"stability.{ws.cfg['method']}.json")
    p.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(f"{result['method']}: stability {result['stability']:.4f} over {len(result['pairs'])} pairs")


def cmd_eval(ws: Workspace) -> None:
    method = ws.cfg["method"]
    src = explanations_path(ws, method)
    if not src.exists():
        raise UsageError(f"missing input: {src} (run 'explain' first)")
    expls = read_explanations(src)
    contexts = [ws.context(e.user_id, e.item_id) for e in expls]
    ndcg_value = None
    tr = ws.path("train_report.json")
    if tr.exists():
        ndcg_value = json.loads(tr.read_text())["ndcg"]
    stab = run_stability(ws, method)["stability"] if ws.cfg["stability"] else None
    report = metrics.build_report(method, contexts, expls, ws.truth, ndcg_value, stab)
    text = report.to_json()
    if metrics.EvalReport.from_json(text).aggregates() != report.aggregates():
        raise InputError("report aggregates do not round-trip")
    stamped = {**json.loads(text), "header": artifact_header(ws.cfg, "eval")}
    ws.path(f"report.{method}.json").write_text(json.dumps(stamped, sort_keys=True, indent=1) + "\n")
    table = f"# {artifact_header(ws.cfg, 'eval')}\n" + report.table()
    ws.path(f"report.{method}.tsv").write_text(table)
    print(report.table(), end="")


HANDLERS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "stability": cmd_stability,
}


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfrex", description="Counterfactual explanations for a top-K recommender.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--k", type=int)
        p.add_argument("--stability", action="store_true", default=None,
                       help="also run the repeated-run stability audit (eval)")
    demo = sub.add_parser("demo", help="write a small demo dataset and config")
    demo.add_argument("out_dir")
    demo.add_argument("--seed", type=int, default=0)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("CFREX_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "demo":
            from .demo import write_demo
            write_demo(args.out_dir, seed=args.seed)
            print(f"wrote demo dataset to {args.out_dir}")
            return EXIT_OK
        overrides = {"seed": args.seed, "jobs": args.jobs, "method": args.method, "k": args.k,
                     "stability": args.stability}
        cfg = load_config(args.config, overrides)
        HANDLERS[args.command](Workspace(cfg))
    except UsageError as exc:
        print(f"cfrex: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"cfrex: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CfrexError, OSError) as exc:
        print(f"cfrex: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
