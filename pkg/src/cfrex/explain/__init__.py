"""Counterfactual explainers."""

from dataclasses import replace

from .common import (
    Edit,
    Explanation,
    PairContext,
    apply_edits,
    context_from_marginal,
    make_context,
    read_explanations,
    write_explanations,
)
from .counter import TEXT_DEFAULTS, CounterConfig, explain_aspects, explain_text_weights
from .genetic import GeneticConfig, evolve
from .gumbel import GumbelConfig, MixedConfig, optimize_mixed, optimize_theta

METHODS = ("counter", "counter-text", "genetic", "gumbel", "mixed")


def default_configs() -> dict:
    return {
        "counter": CounterConfig(),
        "counter-text": TEXT_DEFAULTS,
        "genetic": GeneticConfig(),
        "gumbel": GumbelConfig(),
        "mixed": MixedConfig(),
    }


def run_method(method: str, ctx: PairContext, cfg=None, seed: int | None = None) -> Explanation:
    """Dispatch to one explainer, optionally overriding its seed."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg = cfg if cfg is not None else default_configs()[method]
    if seed is not None:
        if method == "mixed":
            cfg = replace(cfg, gumbel=replace(cfg.gumbel, seed=seed))
        else:
            cfg = replace(cfg, seed=seed)
    if method == "counter":
        return explain_aspects(ctx, cfg)
    if method == "counter-text":
        return explain_text_weights(ctx, cfg)
    if method == "genetic":
        return evolve(ctx, cfg)
    if method == "gumbel":
        return optimize_theta(ctx, cfg)
    return optimize_mixed(ctx, cfg)


__all__ = [
    "METHODS", "CounterConfig", "Edit", "Explanation", "GeneticConfig", "GumbelConfig", "MixedConfig",
    "PairContext", "TEXT_DEFAULTS", "apply_edits", "context_from_marginal", "default_configs", "evolve",
    "explain_aspects", "explain_text_weights", "make_context", "optimize_mixed", "optimize_theta",
    "read_explanations", "run_method", "write_explanations",
]
