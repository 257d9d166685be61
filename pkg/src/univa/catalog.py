"""Ad catalog records and JSONL ingestion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdItem:
    """One advertisement: a semantic embedding proxy plus commercial attributes.

    ``bid`` is in currency micro-units and must be positive. ``gmv`` is the
    monetary conversion value used only by evaluation.
    """

    id: int
    embedding: np.ndarray
    opt_goal: int
    roi_target: int
    industry: int
    bid: float
    gmv: float = 0.0
    latent: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim != 1:
            raise ValueError(f"item {self.id}: embedding must be a flat vector")
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError(f"item {self.id}: embedding contains NaN/Inf")
        if not (self.bid > 0):
            raise ValueError(f"item {self.id}: bid must be positive, got {self.bid}")
        if self.gmv < 0:
            raise ValueError(f"item {self.id}: gmv must be non-negative")

    def commercial_attrs(self) -> tuple[int, int, int, float]:
        return (self.opt_goal, self.roi_target, self.industry, self.bid)


def validate_catalog(items: list[AdItem]) -> None:
    """Check shared-dimension and uniqueness invariants across the catalog."""
    if not items:
        raise ValueError("empty catalog")
    dim = items[0].embedding.shape[0]
    seen = set()
    for it in items:
        if it.embedding.shape[0] != dim:
            raise ValueError(f"item {it.id}: embedding dim {it.embedding.shape[0]} != {dim}")
        if it.id in seen:
            raise ValueError(f"duplicate item id {it.id}")
        seen.add(it.id)


def save_catalog(items: list[AdItem], path) -> None:
    with open(path, "w") as f:
        for it in items:
            rec = {
                "id": it.id,
                "embedding": [float(x) for x in it.embedding],
                "opt_goal": it.opt_goal,
                "roi_target": it.roi_target,
                "industry": it.industry,
                "bid": it.bid,
                "gmv": it.gmv,
            }
            if it.latent is not None:
                rec["latent"] = [float(x) for x in it.latent]
            f.write(json.dumps(rec) + "\n")


def load_catalog(path) -> list[AdItem]:
    """Read one AdItem per JSONL line; rejects NaN embeddings and bad bids."""
    items = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            emb = rec["embedding"]
            if any(not math.isfinite(x) for x in emb):
                raise ValueError(f"{path}:{lineno}: non-finite embedding value")
            latent = rec.get("latent")
            items.append(
                AdItem(
                    id=int(rec["id"]),
                    embedding=np.array(emb, dtype=np.float64),
                    opt_goal=int(rec["opt_goal"]),
                    roi_target=int(rec["roi_target"]),
                    industry=int(rec["industry"]),
                    bid=float(rec["bid"]),
                    gmv=float(rec.get("gmv", 0.0)),
                    latent=None if latent is None else np.array(latent, dtype=np.float64),
                )
            )
    validate_catalog(items)
    return items
