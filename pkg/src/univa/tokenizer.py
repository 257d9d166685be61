"""Value-discriminative SID tokenization.

Semantic levels come from residual k-means over item embeddings; the final
level is a commercial token built by compressing the structured attributes
(optimization goal, ROI target, industry) into a composition key and
discretizing the bid into per-key equal-frequency bins, with bin counts
allocated under a vocabulary budget to maximize weighted bin entropy.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

ARTIFACT_VERSION = 1
KMEANS_MAX_ITER = 50

CompositionKey = tuple[int, int, int]


def _stable_key_hash(key) -> int:
    # Platform-stable tie-break hash (Python's hash() is salted for str).
    return zlib.crc32(repr(key).encode("utf-8"))


# ---------------------------------------------------------------------------
# Semantic levels: residual k-means
# ---------------------------------------------------------------------------


@dataclass
class SemanticCodebooks:
    """Ordered per-level centroid tables; level l quantizes the residual left
    by levels < l."""

    levels: list[np.ndarray]  # each (k, dim)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dim(self) -> int:
        return self.levels[0].shape[1]


def fit_semantic_codebooks(embeddings, levels: int, k: int, seed: int) -> SemanticCodebooks:
    """Fit per-level codebooks by k-means on successive residuals.

    k-means++ init, at most ``KMEANS_MAX_ITER`` Lloyd iterations, seeded per
    level. Raises if a level has fewer distinct residual points than k.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-d array")
    if not np.all(np.isfinite(x)):
        raise ValueError("embeddings contain NaN/Inf")

    residual = x.copy()
    books: list[np.ndarray] = []
    for level in range(levels):
        distinct = np.unique(residual, axis=0).shape[0]
        if distinct < k:
            raise ValueError(
                f"level {level}: only {distinct} distinct residual points, need >= {k}"
            )
        km = KMeans(
            n_clusters=k,
            init="k-means++",
            n_init=1,
            max_iter=KMEANS_MAX_ITER,
            random_state=seed + level,
        ).fit(residual)
        centroids = km.cluster_centers_.astype(np.float64)
        books.append(centroids)
        # Re-assign by nearest centroid so the stored books and the residual
        # recursion agree with encode_semantic exactly (lowest index on ties).
        idx = _nearest_centroid(residual, centroids)
        residual = residual - centroids[idx]
    return SemanticCodebooks(levels=books)


def _nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin over squared L2; np.argmin takes the lowest index on ties
    d = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def encode_semantic(embedding, codebooks: SemanticCodebooks) -> list[int]:
    """Greedy residual assignment; ties broken toward the lowest centroid index."""
    vec = np.asarray(embedding, dtype=np.float64)
    if vec.shape != (codebooks.dim,):
        raise ValueError(f"embedding dim {vec.shape} does not match codebooks ({codebooks.dim},)")
    tokens = []
    residual = vec.copy()
    for centroids in codebooks.levels:
        d = ((centroids - residual) ** 2).sum(axis=1)
        tok = int(d.argmin())
        tokens.append(tok)
        residual = residual - centroids[tok]
    return tokens


def semantic_residual(embedding, codebooks: SemanticCodebooks) -> np.ndarray:
    """Residual left after all levels (for telescoping/error diagnostics)."""
    residual = np.asarray(embedding, dtype=np.float64).copy()
    for centroids in codebooks.levels:
        d = ((centroids - residual) ** 2).sum(axis=1)
        residual = residual - centroids[int(d.argmin())]
    return residual


# ---------------------------------------------------------------------------
# Attribute space compression
# ---------------------------------------------------------------------------


@dataclass
class CompressionMap:
    """Head codes retained verbatim; tail codes merged into fallback/cluster
    classes. Compressed ids are dense in [0, category_count)."""

    retained: dict[int, int]
    tail_assignment: dict[int, int]
    category_count: int

    def compress(self, code: int) -> int | None:
        """Compressed code, or None for codes never seen during fitting."""
        out = self.retained.get(code)
        if out is None:
            out = self.tail_assignment.get(code)
        return out


def fit_compression(
    value_counts: dict[int, int],
    coverage: float,
    target: int,
    tail_strategy: str = "single_fallback",
    per_tail_bid_samples: dict[int, list[float]] | None = None,
    seed: int = 0,
) -> CompressionMap:
    """Keep the most frequent codes until cumulative frequency >= coverage,
    then merge the tail into one fallback class or into bid-distribution
    clusters (k-means over per-code bid decile vectors).
    """
    if not (0 < coverage <= 1):
        raise ValueError("coverage must be in (0, 1]")
    if target < 2:
        raise ValueError("target must be >= 2")
    if tail_strategy not in ("single_fallback", "bid_distribution_cluster"):
        raise ValueError(f"unknown tail_strategy {tail_strategy!r}")
    if not value_counts:
        raise ValueError("value_counts is empty")

    total = sum(value_counts.values())
    ordered = sorted(value_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    head: list[int] = []
    cum = 0
    for code, count in ordered:
        if cum / total >= coverage:
            break
        head.append(code)
        cum += count
    tail = [code for code, _ in ordered[len(head):]]

    needed = len(head) + (1 if tail else 0)
    if needed > target:
        raise ValueError(
            f"head of {len(head)} codes does not fit target {target}; "
            "lower coverage or raise target"
        )

    retained = {code: i for i, code in enumerate(head)}
    tail_assignment: dict[int, int] = {}
    if tail:
        if tail_strategy == "single_fallback":
            for code in tail:
                tail_assignment[code] = len(head)
            n_classes = len(head) + 1
        else:
            if per_tail_bid_samples is None:
                raise ValueError("bid_distribution_cluster requires per_tail_bid_samples")
            missing = [c for c in tail if c not in per_tail_bid_samples]
            if missing:
                raise ValueError(f"missing bid samples for tail codes {missing}")
            n_clusters = min(target - len(head), len(tail))
            if n_clusters <= 1:
                for code in tail:
                    tail_assignment[code] = len(head)
                n_classes = len(head) + 1
            else:
                deciles = np.array(
                    [
                        np.quantile(np.asarray(per_tail_bid_samples[c], dtype=np.float64),
                                    np.arange(1, 10) / 10.0)
                        for c in tail
                    ]
                )
                km = KMeans(
                    n_clusters=n_clusters,
                    init="k-means++",
                    n_init=1,
                    max_iter=KMEANS_MAX_ITER,
                    random_state=seed,
                ).fit(deciles)
                for code, lab in zip(tail, km.labels_):
                    tail_assignment[code] = len(head) + int(lab)
                n_classes = len(head) + n_clusters
    else:
        n_classes = len(head)

    return CompressionMap(retained=retained, tail_assignment=tail_assignment,
                          category_count=n_classes)


# ---------------------------------------------------------------------------
# Equal-frequency bid binning under an entropy objective
# ---------------------------------------------------------------------------


@dataclass
class BinningScheme:
    """Per-composition-key bid bins with disjoint global token-id ranges.

    ``weighted_entropy`` is the allocation objective: sum over keys of
    (key sample share) * (entropy of that key's realized bin proportions).
    The global fallback bins occupy ids after all key ranges.
    """

    per_key: dict[CompositionKey, tuple[int, np.ndarray, int]]  # n_k, boundaries, base id
    fallback_boundaries: np.ndarray
    fallback_bins: int
    fallback_base: int
    n_min: int
    n_max: int
    budget: int
    weighted_entropy: float
    vocab_size: int  # sum of n_k over keys, excludes fallback bins

    @property
    def total_vocab(self) -> int:
        return self.vocab_size + self.fallback_bins

    def key_range(self, key: CompositionKey) -> tuple[int, int]:
        n_k, _, base = self.per_key[key]
        return base, base + n_k


def _equifreq_boundaries(bids: np.ndarray, n: int) -> np.ndarray:
    if n <= 1:
        return np.array([], dtype=np.float64)
    qs = np.arange(1, n) / n
    return np.quantile(bids, qs)  # linear interpolation


def _bin_entropy(bids: np.ndarray, boundaries: np.ndarray, n: int) -> float:
    idx = np.searchsorted(boundaries, bids, side="left")
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def entropy_for_allocation(bids: np.ndarray, n: int,
                           boundary_fn=_equifreq_boundaries) -> float:
    """Entropy (nats) of the realized bin proportions for an n-bin cut."""
    if n <= 1:
        return 0.0
    return _bin_entropy(bids, boundary_fn(bids, n), n)


def allocate_bin_counts(
    key_bids: dict[CompositionKey, np.ndarray],
    n_min: int,
    n_max: int,
    budget: int,
    allocation: str = "grid_entropy",
    boundary_fn=_equifreq_boundaries,
) -> dict[CompositionKey, int]:
    """Choose per-key bin counts under sum(n_k) <= budget.

    grid_entropy: greedy marginal-gain ascent on the weighted entropy from the
    all-n_min allocation (ties go to the larger key weight, then the lower key
    hash). proportional: counts proportional to key weight, clipped and
    rounded by largest remainder.
    """
    if not key_bids:
        raise ValueError("empty key set")
    if n_min < 1 or n_max < n_min:
        raise ValueError("need 1 <= n_min <= n_max")
    if budget < len(key_bids) * n_min:
        raise ValueError(
            f"budget {budget} below |keys|*n_min = {len(key_bids) * n_min}"
        )

    total = sum(len(b) for b in key_bids.values())
    weights = {k: len(b) / total for k, b in key_bids.items()}
    caps = {
        k: max(n_min, min(n_max, np.unique(b).size))
        for k, b in key_bids.items()
    }

    if allocation == "proportional":
        # Everyone starts at n_min; the surplus is split by weight with a
        # largest-remainder round, so the sum can never exceed the budget.
        counts = {k: n_min for k in key_bids}
        extra = budget - n_min * len(key_bids)
        raw = {k: extra * weights[k] for k in key_bids}
        for k in key_bids:
            counts[k] = min(caps[k], n_min + int(raw[k]))
        spare = budget - sum(counts.values())
        order = sorted(
            key_bids,
            key=lambda k: (-(raw[k] - int(raw[k])), -weights[k], _stable_key_hash(k)),
        )
        i = 0
        while spare > 0 and any(counts[k] < caps[k] for k in key_bids):
            k = order[i % len(order)]
            if counts[k] < caps[k]:
                counts[k] += 1
                spare -= 1
            i += 1
        return counts
    if allocation != "grid_entropy":
        raise ValueError(f"unknown allocation {allocation!r}")

    counts = {k: n_min for k in key_bids}
    ent = {k: entropy_for_allocation(key_bids[k], counts[k], boundary_fn) for k in key_bids}
    used = sum(counts.values())
    while used < budget:
        best = None  # (gain, weight, -hash); key tracked alongside
        best_key = None
        for k in key_bids:
            if counts[k] >= caps[k]:
                continue
            gain = weights[k] * (
                entropy_for_allocation(key_bids[k], counts[k] + 1, boundary_fn) - ent[k]
            )
            cand = (gain, weights[k], -_stable_key_hash(k))
            if best is None or cand > best:
                best, best_key = cand, k
        if best is None or best[0] <= 0.0:
            break
        counts[best_key] += 1
        ent[best_key] = entropy_for_allocation(key_bids[best_key], counts[best_key], boundary_fn)
        used += 1
    return counts


def fit_binning(
    items: list[tuple[CompositionKey, float]],
    n_min: int,
    n_max: int,
    budget: int,
    allocation: str = "grid_entropy",
    fallback_bins: int | None = None,
) -> BinningScheme:
    """Fit per-key equal-frequency bid bins plus a global fallback cut.

    Token ids are assigned contiguously in sorted key order; the fallback
    range comes after every key range.
    """
    if not items:
        raise ValueError("no items to bin")
    key_bids: dict[CompositionKey, list[float]] = {}
    for key, bid in items:
        if not (bid > 0):
            raise ValueError(f"non-positive bid {bid} for key {key}")
        key_bids.setdefault(tuple(key), []).append(float(bid))
    arrays = {k: np.sort(np.asarray(v, dtype=np.float64)) for k, v in key_bids.items()}

    counts = allocate_bin_counts(arrays, n_min, n_max, budget, allocation)

    per_key: dict[CompositionKey, tuple[int, np.ndarray, int]] = {}
    base = 0
    weighted_h = 0.0
    total = sum(len(v) for v in arrays.values())
    for key in sorted(arrays):
        n_k = counts[key]
        bounds = _equifreq_boundaries(arrays[key], n_k)
        per_key[key] = (n_k, bounds, base)
        weighted_h += (len(arrays[key]) / total) * _bin_entropy(arrays[key], bounds, n_k)
        base += n_k

    all_bids = np.sort(np.concatenate(list(arrays.values())))
    if fallback_bins is None:
        fallback_bins = max(n_min, min(n_max, np.unique(all_bids).size))
    fb_bounds = _equifreq_boundaries(all_bids, fallback_bins)

    return BinningScheme(
        per_key=per_key,
        fallback_boundaries=fb_bounds,
        fallback_bins=fallback_bins,
        fallback_base=base,
        n_min=n_min,
        n_max=n_max,
        budget=budget,
        weighted_entropy=weighted_h,
        vocab_size=base,
    )


def assign_commercial_token(key: CompositionKey, bid: float, scheme: BinningScheme) -> int:
    """Token id for (key, bid); a bid equal to a boundary falls in the lower
    bin; unseen keys use the global fallback range."""
    if not (bid > 0):
        raise ValueError(f"bid must be positive, got {bid}")
    entry = scheme.per_key.get(tuple(key))
    if entry is None:
        if scheme.fallback_bins < 1:
            raise ValueError(f"unseen key {key} and no fallback bins")
        idx = int(np.searchsorted(scheme.fallback_boundaries, bid, side="left"))
        return scheme.fallback_base + idx
    n_k, bounds, base = entry
    return base + int(np.searchsorted(bounds, bid, side="left"))


# ---------------------------------------------------------------------------
# Full tokenizer bundle
# ---------------------------------------------------------------------------


@dataclass
class SidTokenizer:
    """Fitted artifacts for the complete L-level tokenization. Immutable
    after fitting; safe for concurrent readers."""

    codebooks: SemanticCodebooks
    opt_map: CompressionMap
    roi_map: CompressionMap
    industry_map: CompressionMap
    scheme: BinningScheme
    version: int = ARTIFACT_VERSION

    @property
    def num_levels(self) -> int:
        return self.codebooks.num_levels + 1

    def level_vocab_sizes(self) -> list[int]:
        k = self.codebooks.codebook_size
        return [k] * self.codebooks.num_levels + [self.scheme.total_vocab]

    def composition_key(self, item) -> CompositionKey | None:
        """Compressed key triple, or None when any attribute is unseen."""
        o = self.opt_map.compress(item.opt_goal)
        r = self.roi_map.compress(item.roi_target)
        i = self.industry_map.compress(item.industry)
        if o is None or r is None or i is None:
            return None
        return (o, r, i)

    def tokenize(self, item) -> tuple[int, ...]:
        if not (item.bid > 0):
            raise ValueError(f"bid must be positive, got {item.bid}")
        sem = encode_semantic(item.embedding, self.codebooks)
        key = self.composition_key(item)
        if key is None or tuple(key) not in self.scheme.per_key:
            idx = int(np.searchsorted(self.scheme.fallback_boundaries, item.bid, side="left"))
            com = self.scheme.fallback_base + idx
        else:
            com = assign_commercial_token(key, item.bid, self.scheme)
        return tuple(sem) + (com,)


def tokenize(item, tokenizer: SidTokenizer) -> tuple[int, ...]:
    return tokenizer.tokenize(item)


@dataclass
class TokenizerFitConfig:
    semantic_levels: int = 2
    codebook_size: int = 8
    opt_coverage: float = 0.9
    opt_target: int = 6
    opt_tail_strategy: str = "bid_distribution_cluster"
    roi_coverage: float = 0.85
    roi_target: int = 4
    industry_coverage: float = 0.75
    industry_target: int = 5
    n_min: int = 2
    n_max: int = 6
    budget: int = 96
    allocation: str = "grid_entropy"
    fallback_bins: int | None = None
    seed: int = 0


def fit_tokenizer(catalog, cfg: TokenizerFitConfig) -> SidTokenizer:
    """Fit every tokenizer artifact from a catalog in one pass."""
    emb = np.stack([it.embedding for it in catalog])
    books = fit_semantic_codebooks(emb, cfg.semantic_levels, cfg.codebook_size, cfg.seed)

    def counts_and_bids(attr):
        counts: dict[int, int] = {}
        bids: dict[int, list[float]] = {}
        for it in catalog:
            v = getattr(it, attr)
            counts[v] = counts.get(v, 0) + 1
            bids.setdefault(v, []).append(it.bid)
        return counts, bids

    oc, ob = counts_and_bids("opt_goal")
    opt_map = fit_compression(oc, cfg.opt_coverage, cfg.opt_target,
                              cfg.opt_tail_strategy, per_tail_bid_samples=ob, seed=cfg.seed)
    rc, _ = counts_and_bids("roi_target")
    roi_map = fit_compression(rc, cfg.roi_coverage, cfg.roi_target, "single_fallback")
    ic, _ = counts_and_bids("industry")
    industry_map = fit_compression(ic, cfg.industry_coverage, cfg.industry_target,
                                   "single_fallback")

    tok = SidTokenizer(books, opt_map, roi_map, industry_map,
                       scheme=None)  # type: ignore[arg-type]
    keyed = []
    for it in catalog:
        key = tok.composition_key(it)
        assert key is not None  # fitted maps cover every observed code
        keyed.append((key, it.bid))
    tok.scheme = fit_binning(keyed, cfg.n_min, cfg.n_max, cfg.budget,
                             cfg.allocation, cfg.fallback_bins)
    return tok


# ---------------------------------------------------------------------------
# Dispersion analytics
# ---------------------------------------------------------------------------


def path_dispersion_stats(catalog, tokenizer: SidTokenizer,
                          paths: dict | None = None) -> dict:
    """Per-path bid dispersion: population std and range grouped by full SID
    path, aggregated to Mean/P75/P99 (linear-interpolation percentiles).

    ``paths`` may supply precomputed item->path assignments to compare
    alternative tokenizations on the same catalog.
    """
    if not catalog:
        raise ValueError("empty catalog")
    groups: dict[tuple[int, ...], list[float]] = {}
    for it in catalog:
        p = paths[it.id] if paths is not None else tokenizer.tokenize(it)
        groups.setdefault(tuple(p), []).append(it.bid)

    stds, ranges = [], []
    for bids in groups.values():
        arr = np.asarray(bids, dtype=np.float64)
        stds.append(float(arr.std()))
        ranges.append(float(arr.max() - arr.min()))
    stds_a = np.asarray(stds)
    ranges_a = np.asarray(ranges)

    def agg(a):
        return {
            "mean": float(a.mean()),
            "p75": float(np.percentile(a, 75)),
            "p99": float(np.percentile(a, 99)),
        }

    return {
        "num_paths": len(groups),
        "num_items": len(catalog),
        "std": agg(stds_a),
        "range": agg(ranges_a),
    }


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_tokenizer(tok: SidTokenizer, path) -> None:
    def comp(m: CompressionMap):
        return {
            "retained": {str(k): v for k, v in m.retained.items()},
            "tail_assignment": {str(k): v for k, v in m.tail_assignment.items()},
            "category_count": m.category_count,
        }

    doc = {
        "version": tok.version,
        "semantic": {
            "codebooks": [c.tolist() for c in tok.codebooks.levels],
        },
        "compression": {
            "opt_goal": comp(tok.opt_map),
            "roi_target": comp(tok.roi_map),
            "industry": comp(tok.industry_map),
        },
        "binning": {
            "per_key": {
                ",".join(map(str, k)): {
                    "bins": n,
                    "boundaries": b.tolist(),
                    "base": base,
                }
                for k, (n, b, base) in tok.scheme.per_key.items()
            },
            "fallback_boundaries": tok.scheme.fallback_boundaries.tolist(),
            "fallback_bins": tok.scheme.fallback_bins,
            "fallback_base": tok.scheme.fallback_base,
            "n_min": tok.scheme.n_min,
            "n_max": tok.scheme.n_max,
            "budget": tok.scheme.budget,
            "weighted_entropy": tok.scheme.weighted_entropy,
            "vocab_size": tok.scheme.vocab_size,
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_tokenizer(path) -> SidTokenizer:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != ARTIFACT_VERSION:
        raise ValueError(f"unsupported tokenizer artifact version {doc.get('version')}")

    def comp(d) -> CompressionMap:
        return CompressionMap(
            retained={int(k): v for k, v in d["retained"].items()},
            tail_assignment={int(k): v for k, v in d["tail_assignment"].items()},
            category_count=d["category_count"],
        )

    b = doc["binning"]
    per_key = {
        tuple(int(x) for x in k.split(",")): (
            e["bins"],
            np.asarray(e["boundaries"], dtype=np.float64),
            e["base"],
        )
        for k, e in b["per_key"].items()
    }
    scheme = BinningScheme(
        per_key=per_key,
        fallback_boundaries=np.asarray(b["fallback_boundaries"], dtype=np.float64),
        fallback_bins=b["fallback_bins"],
        fallback_base=b["fallback_base"],
        n_min=b["n_min"],
        n_max=b["n_max"],
        budget=b["budget"],
        weighted_entropy=b["weighted_entropy"],
        vocab_size=b["vocab_size"],
    )
    return SidTokenizer(
        codebooks=SemanticCodebooks(
            [np.asarray(c, dtype=np.float64) for c in doc["semantic"]["codebooks"]]
        ),
        opt_map=comp(doc["compression"]["opt_goal"]),
        roi_map=comp(doc["compression"]["roi_target"]),
        industry_map=comp(doc["compression"]["industry"]),
        scheme=scheme,
    )
