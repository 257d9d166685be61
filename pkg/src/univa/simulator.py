"""Synthetic ad world and ground-truth reward oracle.

Items and users share a latent factor space; the oracle's click probability
is a logistic of the latent dot-product, so eCPM = sigmoid(affinity)·bid·1000
makes relevance and bid genuinely competing signals. Everything is a pure
function of the seeds.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .catalog import AdItem, validate_catalog

EPS_REWARD = 1e-8
ORGANIC_RANGE = 2.5  # user latent clipped to +-this when bucketed


@dataclass
class WorldConfig:
    seed: int = 0
    catalog_size: int = 300
    embedding_dim: int = 16
    latent_dim: int = 6
    user_count: int = 40
    num_segments: int = 4
    num_geos: int = 5
    opt_alphabet: int = 12
    roi_alphabet: int = 6
    industry_alphabet: int = 8
    attr_zipf: float = 2.0
    bid_sigma: float = 0.6
    bid_mu_low: float = -0.5
    bid_mu_high: float = 1.5
    gmv_sigma: float = 0.5
    gmv_scale: float = 20.0
    embedding_noise: float = 0.3
    history_len: int = 8
    organic_buckets: int = 4
    targeting_density: float = 1.0
    excluded_industries: tuple[int, ...] = ()
    # > 0 couples bids against affinity (well-targeted items get cheap), the
    # regime where value alignment has to trade relevance against price
    bid_affinity_conflict: float = 0.0

    def __post_init__(self):
        for name in ("catalog_size", "embedding_dim", "latent_dim", "user_count",
                     "num_segments", "num_geos", "opt_alphabet", "roi_alphabet",
                     "industry_alphabet", "history_len", "organic_buckets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0 < self.targeting_density <= 1):
            raise ValueError("targeting_density must be in (0, 1]")


@dataclass
class User:
    id: int
    latent: np.ndarray
    segment: int
    geo: int
    history: list[int]


@dataclass
class Request:
    """One serving opportunity, self-contained: context tokens and targeting
    inputs are materialized so downstream stages never need the user table."""

    id: int
    user_id: int
    segment: int
    geo: int
    history: list[int]
    context_tokens: list[int]
    target_item: int | None
    targeting_seed: int
    density: float
    excluded_industries: tuple[int, ...] = ()


@dataclass
class RewardRecord:
    raw: float
    normalized: float
    mu: float
    sigma: float
    eps: float = EPS_REWARD


@dataclass
class World:
    cfg: WorldConfig
    catalog: list[AdItem]
    users: list[User]
    projection: np.ndarray  # latent -> embedding map, fixed per world

    def affinity(self, user: User, item: AdItem) -> float:
        return float(user.latent @ item.latent) / np.sqrt(self.cfg.latent_dim)

    # context token id layout: [segments][geos][organic buckets][item ids]
    @property
    def organic_offset(self) -> int:
        return self.cfg.num_segments + self.cfg.num_geos

    @property
    def item_token_offset(self) -> int:
        return self.organic_offset + self.cfg.latent_dim * self.cfg.organic_buckets

    @property
    def context_vocab_size(self) -> int:
        return self.item_token_offset + self.cfg.catalog_size

    def context_tokens(self, user: User) -> list[int]:
        # group order: user (segment), organic, environment (geo), items
        cfg = self.cfg
        toks = [user.segment]
        q = cfg.organic_buckets
        scaled = (user.latent + ORGANIC_RANGE) / (2 * ORGANIC_RANGE)
        buckets = np.clip((scaled * q).astype(int), 0, q - 1)
        for d, b in enumerate(buckets):
            toks.append(self.organic_offset + d * q + int(b))
        toks.append(cfg.num_segments + user.geo)
        toks.extend(self.item_token_offset + i for i in user.history)
        return toks


def _zipf_choice(rng, k: int, exponent: float, size: int) -> np.ndarray:
    w = 1.0 / (1.0 + np.arange(k)) ** exponent
    return rng.choice(k, size=size, p=w / w.sum())


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def generate_world(cfg: WorldConfig) -> World:
    """Build catalog and users deterministically from cfg.seed.

    Bids are log-normal per industry; when bid_affinity_conflict > 0 each
    item's bid is damped by its standardized mean affinity across users, so
    the highest-affinity items are systematically cheaper.
    """
    rng = np.random.default_rng(cfg.seed)
    projection = rng.normal(size=(cfg.latent_dim, cfg.embedding_dim))
    projection /= np.sqrt(cfg.latent_dim)

    latents = rng.normal(size=(cfg.catalog_size, cfg.latent_dim))
    noise = rng.normal(scale=cfg.embedding_noise,
                       size=(cfg.catalog_size, cfg.embedding_dim))
    embeddings = latents @ projection + noise

    opts = _zipf_choice(rng, cfg.opt_alphabet, cfg.attr_zipf, cfg.catalog_size)
    rois = _zipf_choice(rng, cfg.roi_alphabet, cfg.attr_zipf, cfg.catalog_size)
    inds = _zipf_choice(rng, cfg.industry_alphabet, cfg.attr_zipf, cfg.catalog_size)

    ind_mu = rng.uniform(cfg.bid_mu_low, cfg.bid_mu_high, size=cfg.industry_alphabet)
    bids = np.exp(rng.normal(ind_mu[inds], cfg.bid_sigma))

    user_latents = rng.normal(size=(cfg.user_count, cfg.latent_dim))
    segments = rng.integers(cfg.num_segments, size=cfg.user_count)
    geos = rng.integers(cfg.num_geos, size=cfg.user_count)

    if cfg.bid_affinity_conflict > 0:
        aff = (user_latents @ latents.T).mean(axis=0) / np.sqrt(cfg.latent_dim)
        z = (aff - aff.mean()) / (aff.std() + 1e-12)
        bids = bids * np.exp(-cfg.bid_affinity_conflict * z)

    gmvs = bids * cfg.gmv_scale * np.exp(rng.normal(0.0, cfg.gmv_sigma,
                                                    size=cfg.catalog_size))

    catalog = [
        AdItem(
            id=i,
            embedding=embeddings[i],
            opt_goal=int(opts[i]),
            roi_target=int(rois[i]),
            industry=int(inds[i]),
            bid=float(bids[i]),
            gmv=float(gmvs[i]),
            latent=latents[i],
        )
        for i in range(cfg.catalog_size)
    ]
    validate_catalog(catalog)

    users = []
    hist_len = min(cfg.history_len, cfg.catalog_size)
    for u in range(cfg.user_count):
        aff = (latents @ user_latents[u]) / np.sqrt(cfg.latent_dim)
        p = np.exp(aff - aff.max())
        p /= p.sum()
        hist = rng.choice(cfg.catalog_size, size=hist_len, replace=False, p=p)
        users.append(User(id=u, latent=user_latents[u],
                          segment=int(segments[u]), geo=int(geos[u]),
                          history=[int(h) for h in hist]))

    return World(cfg=cfg, catalog=catalog, users=users, projection=projection)


# ---------------------------------------------------------------------------
# Targeting
# ---------------------------------------------------------------------------


def _eligible_hash(seed: int, segment: int, geo: int, item_id: int) -> float:
    key = f"{seed}:{segment}:{geo}:{item_id}".encode()
    return zlib.crc32(key) / 2**32


def targeting_filter(request: Request, catalog: list[AdItem]) -> set[int]:
    """Deterministic eligible-item set for one request; expected size is
    density * |catalog| minus any excluded industries."""
    out = set()
    for it in catalog:
        if it.industry in request.excluded_industries:
            continue
        if _eligible_hash(request.targeting_seed, request.segment,
                          request.geo, it.id) < request.density:
            out.add(it.id)
    return out


# ---------------------------------------------------------------------------
# Requests
# ---------------------------------------------------------------------------


def generate_requests(world: World, n: int, seed: int) -> list[Request]:
    """Sample n requests over the world's users; the ground-truth next item is
    drawn among eligible items with probability proportional to sigmoid
    affinity (None when targeting leaves nothing)."""
    rng = np.random.default_rng(seed)
    cfg = world.cfg
    out = []
    for rid in range(n):
        user = world.users[int(rng.integers(cfg.user_count))]
        req = Request(
            id=rid,
            user_id=user.id,
            segment=user.segment,
            geo=user.geo,
            history=list(user.history),
            context_tokens=world.context_tokens(user),
            target_item=None,
            targeting_seed=cfg.seed,
            density=cfg.targeting_density,
            excluded_industries=tuple(cfg.excluded_industries),
        )
        eligible = sorted(targeting_filter(req, world.catalog))
        if eligible:
            aff = np.array([world.affinity(user, world.catalog[i]) for i in eligible])
            p = sigmoid(aff)
            p /= p.sum()
            req.target_item = int(eligible[int(rng.choice(len(eligible), p=p))])
        out.append(req)
    return out


def extend_history_requests(world: World, request: Request, steps: int,
                            seed: int) -> list[Request]:
    """Experimental: resample plausible future requests by extending the
    history with affinity-biased draws one step at a time. The growth model
    is invented; treat outputs as exploratory only."""
    rng = np.random.default_rng(seed)
    user = world.users[request.user_id]
    out = []
    hist = list(request.history)
    for s in range(steps):
        aff = np.array([world.affinity(user, it) for it in world.catalog])
        p = np.exp(aff - aff.max())
        for h in hist:
            p[h] = 0.0
        if p.sum() <= 0:
            break
        p /= p.sum()
        nxt = int(rng.choice(world.cfg.catalog_size, p=p))
        hist = hist[1:] + [nxt] if len(hist) >= world.cfg.history_len else hist + [nxt]
        # context prefix (segment, geo, organic buckets) is user-static
        toks = list(request.context_tokens[: 2 + world.cfg.latent_dim])
        toks.extend(world.item_token_offset + i for i in hist)
        out.append(Request(
            id=request.id * 1000 + s + 1,
            user_id=request.user_id,
            segment=request.segment,
            geo=request.geo,
            history=list(hist),
            context_tokens=toks,
            target_item=None,
            targeting_seed=request.targeting_seed,
            density=request.density,
            excluded_industries=request.excluded_industries,
        ))
    return out


# ---------------------------------------------------------------------------
# Reward oracle
# ---------------------------------------------------------------------------


class PathIndex:
    """Maps SID paths back to catalog items. Resolution order within a path:
    highest bid first, then lowest id."""

    def __init__(self, catalog: list[AdItem], paths: dict[int, tuple[int, ...]]):
        self._by_path: dict[tuple[int, ...], list[AdItem]] = {}
        items = {it.id: it for it in catalog}
        for item_id, path in paths.items():
            self._by_path.setdefault(tuple(path), []).append(items[item_id])
        for group in self._by_path.values():
            group.sort(key=lambda it: (-it.bid, it.id))

    @classmethod
    def from_tokenizer(cls, catalog: list[AdItem], tokenizer) -> "PathIndex":
        return cls(catalog, {it.id: tokenizer.tokenize(it) for it in catalog})

    def items(self, path) -> list[AdItem]:
        return self._by_path.get(tuple(path), [])

    def resolve(self, path) -> AdItem | None:
        group = self._by_path.get(tuple(path))
        return group[0] if group else None

    def paths(self):
        return self._by_path.keys()

    def __len__(self):
        return len(self._by_path)


def ecpm_reward(world: World, request: Request, path, index: PathIndex) -> float:
    """Ground-truth eCPM of serving `path`: sigmoid(affinity)·bid·1000 of the
    resolved item, 0 when the path resolves to nothing."""
    item = index.resolve(path)
    if item is None:
        return 0.0
    user = world.users[request.user_id]
    return float(sigmoid(world.affinity(user, item))) * item.bid * 1000.0


def normalize_rewards(rewards, eps: float = EPS_REWARD) -> list[float]:
    """Within-request z-scoring with population std; constant lists map to 0."""
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty reward list")
    mu = float(arr.mean())
    sigma = float(arr.std())
    return [float(x) for x in (arr - mu) / (sigma + eps)]


def reward_records(rewards, eps: float = EPS_REWARD) -> list[RewardRecord]:
    arr = np.asarray(rewards, dtype=np.float64)
    mu = float(arr.mean())
    sigma = float(arr.std())
    return [RewardRecord(raw=float(r), normalized=float((r - mu) / (sigma + eps)),
                         mu=mu, sigma=sigma, eps=eps) for r in arr]


# ---------------------------------------------------------------------------
# Adaptive request sampling
# ---------------------------------------------------------------------------


def sample_training_requests(pool: list[Request], budget: int, mode: str,
                             seed: int, losses=None, entropies=None,
                             alpha: float = 0.5) -> list[Request]:
    """Pick `budget` requests without replacement.

    adaptive mode weights request i by alpha*losses[i] + (1-alpha)*entropies[i]
    (both supplied by the caller's bookkeeping), then normalizes; uniform mode
    ignores the stats.
    """
    if budget > len(pool):
        raise ValueError(f"budget {budget} exceeds pool size {len(pool)}")
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        if budget == len(pool):
            return list(pool)
        idx = rng.choice(len(pool), size=budget, replace=False)
        return [pool[i] for i in sorted(int(i) for i in idx)]
    if mode != "adaptive":
        raise ValueError(f"unknown mode {mode!r}")
    if losses is None or entropies is None:
        raise ValueError("adaptive mode needs losses and entropies")
    w = alpha * np.asarray(losses, dtype=np.float64) \
        + (1 - alpha) * np.asarray(entropies, dtype=np.float64)
    w = np.clip(w, 0.0, None)
    if w.sum() <= 0:
        w = np.ones(len(pool))
    p = w / w.sum()
    idx = rng.choice(len(pool), size=budget, replace=False, p=p)
    return [pool[i] for i in sorted(int(i) for i in idx)]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_users(users: list[User], path) -> None:
    with open(path, "w") as f:
        for u in users:
            f.write(json.dumps({
                "id": u.id,
                "latent": [float(x) for x in u.latent],
                "segment": u.segment,
                "geo": u.geo,
                "history": u.history,
            }) + "\n")


def load_users(path) -> list[User]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(User(id=int(rec["id"]),
                            latent=np.array(rec["latent"], dtype=np.float64),
                            segment=int(rec["segment"]), geo=int(rec["geo"]),
                            history=[int(h) for h in rec["history"]]))
    return out


def save_requests(requests: list[Request], path) -> None:
    with open(path, "w") as f:
        for r in requests:
            f.write(json.dumps({
                "id": r.id,
                "user_id": r.user_id,
                "segment": r.segment,
                "geo": r.geo,
                "history": r.history,
                "context_tokens": r.context_tokens,
                "target_item": r.target_item,
                "targeting_seed": r.targeting_seed,
                "density": r.density,
                "excluded_industries": list(r.excluded_industries),
            }) + "\n")


def load_requests(path) -> list[Request]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Request(
                id=int(rec["id"]),
                user_id=int(rec["user_id"]),
                segment=int(rec["segment"]),
                geo=int(rec["geo"]),
                history=[int(h) for h in rec["history"]],
                context_tokens=[int(t) for t in rec["context_tokens"]],
                target_item=None if rec["target_item"] is None else int(rec["target_item"]),
                targeting_seed=int(rec["targeting_seed"]),
                density=float(rec["density"]),
                excluded_industries=tuple(rec.get("excluded_industries", [])),
            ))
    return out
