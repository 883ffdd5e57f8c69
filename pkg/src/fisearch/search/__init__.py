"""Mask-space search methods, selectable by name."""

from .common import BestTracker, LevelResult, LevelSpace, SearchResult, split_budget
from .gradient import (
    AdamW,
    GradientSearchState,
    gradient_search,
    gumbel_binary_sample,
    swap_forecasts,
    taylor_search,
)
from .local import parallel_local_search
from .ordered import enumerate_topk, ordered_search
from .random_search import EXHAUSTIVE_CAP, exhaustive_search, random_search

SEARCH_METHODS = {
    "random": random_search,
    "exhaustive": exhaustive_search,
    "gradient": gradient_search,
    "taylor": taylor_search,
    "ordered": ordered_search,
    "pls": parallel_local_search,
}

__all__ = [
    "AdamW",
    "BestTracker",
    "EXHAUSTIVE_CAP",
    "GradientSearchState",
    "LevelResult",
    "LevelSpace",
    "SEARCH_METHODS",
    "SearchResult",
    "enumerate_topk",
    "exhaustive_search",
    "gradient_search",
    "gumbel_binary_sample",
    "ordered_search",
    "parallel_local_search",
    "random_search",
    "split_budget",
    "swap_forecasts",
    "taylor_search",
]
