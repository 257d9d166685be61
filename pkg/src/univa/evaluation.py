"""Offline retrieval metrics and tokenizer analytics.

HR@K counts target hits; ValueHR@K weights hits by target gmv; wNDCG@K uses
log10(1+gmv) sample weights with single-relevant-item NDCG. The strategy grid
sweeps grouping x binning combinations and reports the global token entropy H
(nats) and allocated vocabulary V per cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np
import torch
from sklearn.cluster import KMeans

from .serving import beam_search, build_trie, personalize
from .simulator import targeting_filter
from .tokenizer import (
    KMEANS_MAX_ITER,
    TokenizerFitConfig,
    allocate_bin_counts,
    fit_compression,
    path_dispersion_stats,
)

GROUPINGS = ("direct", "classify_then_bin", "cluster_then_bin")
BIN_STRATEGIES = ("equal_freq", "equal_width", "cluster_bins")

# large-scale reference counts quoted alongside desk-scale validity reports
REFERENCE_VALID_PATHS = {"with_trie": 300, "without_trie": 48}


@dataclass
class EvalSample:
    request_id: int
    target_item: int
    gmv: float
    ranked: list[int]  # model's ranked item ids, best first

    def __post_init__(self):
        if self.gmv < 0:
            raise ValueError("gmv must be non-negative")

    def rank_of_target(self) -> int | None:
        """1-based rank, None when the target is absent."""
        for pos, item in enumerate(self.ranked, start=1):
            if item == self.target_item:
                return pos
        return None


def _check_samples(samples, k):
    if not samples:
        raise ValueError("no samples")
    if k < 1:
        raise ValueError("k must be >= 1")
    lengths = {len(s.ranked) for s in samples}
    if len(lengths) > 1:
        raise ValueError(f"ranked lists differ in length: {sorted(lengths)}")


def hr_at_k(samples: list[EvalSample], k: int) -> float:
    _check_samples(samples, k)
    hits = sum(1 for s in samples
               if (r := s.rank_of_target()) is not None and r <= k)
    return hits / len(samples)


def value_hr_at_k(samples: list[EvalSample], k: int) -> float:
    _check_samples(samples, k)
    total = sum(s.gmv for s in samples)
    if total <= 0:
        raise ValueError("sum of gmv must be positive")
    covered = sum(s.gmv for s in samples
                  if (r := s.rank_of_target()) is not None and r <= k)
    return covered / total


def wndcg_at_k(samples: list[EvalSample], k: int) -> float:
    """Weighted single-relevant-item NDCG: per sample 1/log2(1+rank) when the
    target ranks within k, else 0; weights log10(1+gmv)."""
    _check_samples(samples, k)
    weights = [math.log10(1.0 + s.gmv) for s in samples]
    total = sum(weights)
    if total <= 0:
        raise ValueError("all sample weights are zero")
    score = 0.0
    for s, w in zip(samples, weights):
        r = s.rank_of_target()
        if r is not None and r <= k:
            score += w / math.log2(1.0 + r)
    return score / total


def samples_from_results(requests, results, catalog_by_id) -> list[EvalSample]:
    """Pair served rankings with request ground truth; requests without a
    target are dropped."""
    out = []
    for req, ranked in zip(requests, results):
        if req.target_item is None:
            continue
        out.append(EvalSample(request_id=req.id, target_item=req.target_item,
                              gmv=catalog_by_id[req.target_item].gmv,
                              ranked=list(ranked)))
    return out


# ---------------------------------------------------------------------------
# Tokenization strategy grid
# ---------------------------------------------------------------------------


def _equal_width_boundaries(bids: np.ndarray, n: int) -> np.ndarray:
    if n <= 1:
        return np.array([], dtype=np.float64)
    lo, hi = float(bids.min()), float(bids.max())
    return lo + (hi - lo) * np.arange(1, n) / n


def _cluster_boundaries(bids: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """Cuts at midpoints between sorted 1-d k-means centroids."""
    n_eff = min(n, np.unique(bids).size)
    if n_eff <= 1:
        return np.array([], dtype=np.float64)
    km = KMeans(n_clusters=n_eff, init="k-means++", n_init=1,
                max_iter=KMEANS_MAX_ITER, random_state=seed)
    km.fit(bids.reshape(-1, 1))
    centers = np.sort(km.cluster_centers_.ravel())
    return (centers[:-1] + centers[1:]) / 2.0


def _equifreq_boundaries(bids: np.ndarray, n: int) -> np.ndarray:
    if n <= 1:
        return np.array([], dtype=np.float64)
    return np.quantile(bids, np.arange(1, n) / n)


_BOUNDARY_FNS = {
    "equal_freq": lambda seed: _equifreq_boundaries,
    "equal_width": lambda seed: _equal_width_boundaries,
    "cluster_bins": lambda seed: partial(_cluster_boundaries, seed=seed),
}


def _classify_groups(catalog, cfg: TokenizerFitConfig):
    """Composition keys after coverage-head compression of all three
    attributes, exactly as the tokenizer builds them."""
    def counts(attr):
        out = {}
        for it in catalog:
            v = getattr(it, attr)
            out[v] = out.get(v, 0) + 1
        return out

    def bid_samples(attr):
        out = {}
        for it in catalog:
            out.setdefault(getattr(it, attr), []).append(it.bid)
        return out

    opt = fit_compression(counts("opt_goal"), cfg.opt_coverage, cfg.opt_target,
                          cfg.opt_tail_strategy, bid_samples("opt_goal"),
                          cfg.seed)
    roi = fit_compression(counts("roi_target"), cfg.roi_coverage,
                          cfg.roi_target, "single_fallback", None, cfg.seed)
    ind = fit_compression(counts("industry"), cfg.industry_coverage,
                          cfg.industry_target, "single_fallback", None,
                          cfg.seed)
    groups: dict[tuple, list[float]] = {}
    for it in catalog:
        key = (opt.compress(it.opt_goal), roi.compress(it.roi_target),
               ind.compress(it.industry))
        groups.setdefault(key, []).append(it.bid)
    return groups


def _grid_groups(catalog, grouping: str, cfg: TokenizerFitConfig):
    bids = np.array([it.bid for it in catalog], dtype=np.float64)
    if grouping == "direct":
        return {("all",): bids}
    if grouping == "classify_then_bin":
        groups = _classify_groups(catalog, cfg)
        return {k: np.asarray(v, dtype=np.float64)
                for k, v in sorted(groups.items())}
    if grouping == "cluster_then_bin":
        # item clusters stand in for composition keys; same group count as
        # the classify grouping keeps the comparison budget-fair
        k = len(_classify_groups(catalog, cfg))
        emb = np.stack([it.embedding for it in catalog])
        km = KMeans(n_clusters=min(k, len(catalog)), init="k-means++",
                    n_init=1, max_iter=KMEANS_MAX_ITER,
                    random_state=cfg.seed).fit(emb)
        groups: dict[tuple, list[float]] = {}
        for lab, bid in zip(km.labels_, bids):
            groups.setdefault((int(lab),), []).append(float(bid))
        return {k2: np.asarray(v, dtype=np.float64)
                for k2, v in sorted(groups.items())}
    raise ValueError(f"unknown grouping {grouping!r}")


def _cell(key_bids, cfg: TokenizerFitConfig, boundary_fn):
    counts = allocate_bin_counts(key_bids, cfg.n_min, cfg.n_max, cfg.budget,
                                 "grid_entropy", boundary_fn)
    total = sum(len(b) for b in key_bids.values())
    occupancy = []
    for key, bids in key_bids.items():
        bounds = boundary_fn(bids, counts[key])
        idx = np.searchsorted(bounds, bids, side="left")
        occupancy.extend(np.bincount(idx, minlength=counts[key]).tolist())
    q = np.asarray([c for c in occupancy if c > 0], dtype=np.float64) / total
    return {"H": float(-(q * np.log(q)).sum()), "V": int(sum(counts.values()))}


def strategy_grid(catalog, cfg: TokenizerFitConfig) -> dict:
    """All 9 grouping x binning cells as {(grouping, binning): {"H", "V"}}.

    H is the entropy (nats) of the realized global token distribution; V the
    allocated vocabulary, always within cfg.budget.
    """
    if not catalog:
        raise ValueError("empty catalog")
    table = {}
    for grouping in GROUPINGS:
        groups = _grid_groups(catalog, grouping, cfg)
        for binning in BIN_STRATEGIES:
            fn = _BOUNDARY_FNS[binning](cfg.seed)
            table[(grouping, binning)] = _cell(groups, cfg, fn)
    return table


# ---------------------------------------------------------------------------
# Serving-side reports
# ---------------------------------------------------------------------------


@dataclass
class ValidityRow:
    request_id: int
    with_trie_valid: int
    with_trie_returned: int
    without_trie_valid: int
    without_trie_returned: int


@dataclass
class ValidityReport:
    rows: list[ValidityRow]
    reference: dict

    @property
    def with_trie_fraction(self) -> float:
        v = sum(r.with_trie_valid for r in self.rows)
        t = sum(r.with_trie_returned for r in self.rows)
        return v / t if t else 0.0

    @property
    def without_trie_fraction(self) -> float:
        v = sum(r.without_trie_valid for r in self.rows)
        t = sum(r.without_trie_returned for r in self.rows)
        return v / t if t else 0.0


def trie_validity_report(model, catalog, tokenizer, requests,
                         beam_width: int) -> ValidityReport:
    """Beam in both modes per request; a path is valid when some item under
    its leaf is eligible for the request."""
    trie = build_trie(catalog, tokenizer)
    rows = []
    was_training = model.training
    model.eval()
    try:
        for req in requests:
            eligible = targeting_filter(req, catalog)
            ptrie = personalize(trie, eligible)
            with torch.no_grad():
                h = model.encode(torch.tensor([req.context_tokens]))
            constrained = beam_search(model, h, ptrie, beam_width)
            free = beam_search(model, h, None, beam_width)

            def valid(paths):
                n = 0
                for path, _ in paths:
                    node = trie.node_at(path)
                    items = trie.leaf_items.get(node, []) if node is not None else []
                    if any(i in eligible for i in items):
                        n += 1
                return n

            rows.append(ValidityRow(
                request_id=req.id,
                with_trie_valid=valid(constrained),
                with_trie_returned=len(constrained),
                without_trie_valid=valid(free),
                without_trie_returned=len(free)))
    finally:
        model.train(was_training)
    return ValidityReport(rows=rows, reference=dict(REFERENCE_VALID_PATHS))


def dispersion_comparison(catalog, tokenizer) -> dict:
    """Bid dispersion of full commercial paths vs the semantic prefix alone
    (last level dropped), on the same catalog."""
    full = path_dispersion_stats(catalog, tokenizer)
    prefix_paths = {it.id: tuple(tokenizer.tokenize(it))[:-1] for it in catalog}
    semantic = path_dispersion_stats(catalog, tokenizer, paths=prefix_paths)
    return {"commercial": full, "semantic_only": semantic}
