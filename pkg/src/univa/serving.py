"""Trie-constrained value-guided beam search.

A global trie over all catalog SID paths is personalized per request by
marking nodes live when their subtree still holds an eligible item; the beam
then only expands live children, so every emitted path resolves to a
servable item. Scores are cumulative raw fused logits accumulated in Python
floats, and each prefix is decoded with batch size 1, which keeps beam
results bit-identical to an exhaustive enumeration of the same prefixes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class Trie:
    """Prefix tree over fixed-length SID paths; leaves carry item-id lists."""

    def __init__(self, levels: int):
        self.levels = levels
        self.children: list[dict[int, int]] = [{}]
        self.parent: list[int] = [-1]
        self.token: list[int] = [-1]
        self.depth: list[int] = [0]
        self.leaf_items: dict[int, list[int]] = {}

    def insert(self, path, item_id: int) -> None:
        if len(path) != self.levels:
            raise ValueError(f"path length {len(path)} != {self.levels}")
        node = 0
        for tok in path:
            nxt = self.children[node].get(tok)
            if nxt is None:
                nxt = len(self.children)
                self.children.append({})
                self.parent.append(node)
                self.token.append(int(tok))
                self.depth.append(self.depth[node] + 1)
                self.children[node][int(tok)] = nxt
            node = nxt
        self.leaf_items.setdefault(node, []).append(item_id)

    def finalize(self) -> None:
        for items in self.leaf_items.values():
            items.sort()

    def node_at(self, prefix) -> int | None:
        node = 0
        for tok in prefix:
            node = self.children[node].get(int(tok))
            if node is None:
                return None
        return node

    @property
    def num_nodes(self) -> int:
        return len(self.children)

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_items)

    def paths(self):
        """All complete (path, item_ids) pairs."""
        out = []
        for node, items in self.leaf_items.items():
            toks = []
            cur = node
            while cur != 0:
                toks.append(self.token[cur])
                cur = self.parent[cur]
            out.append((tuple(reversed(toks)), items))
        return out


def build_trie(catalog, tokenizer) -> Trie:
    """Insert every item's SID path; tokenization failures name the item."""
    trie = Trie(levels=tokenizer.num_levels)
    for it in sorted(catalog, key=lambda x: x.id):
        try:
            path = tokenizer.tokenize(it)
        except Exception as exc:
            raise ValueError(f"item {it.id}: tokenization failed: {exc}") from exc
        trie.insert(path, it.id)
    trie.finalize()
    return trie


@dataclass
class PersonalizedTrie:
    """Liveness marks over a shared trie for one request's eligible items."""

    trie: Trie
    live: list[bool]

    def live_children(self, node: int) -> list[int]:
        ch = self.trie.children[node]
        return sorted(t for t, n in ch.items() if self.live[n])

    def is_live_path(self, path) -> bool:
        node = self.trie.node_at(path)
        return node is not None and self.live[node] and len(path) == self.trie.levels


def personalize(trie: Trie, eligible_ids: set[int]) -> PersonalizedTrie:
    """Mark leaves holding at least one eligible item, then propagate liveness
    bottom-up; nodes were created parent-first, so a reverse sweep suffices."""
    live = [False] * trie.num_nodes
    for node, items in trie.leaf_items.items():
        if any(i in eligible_ids for i in items):
            live[node] = True
    for node in range(trie.num_nodes - 1, 0, -1):
        if live[node]:
            live[trie.parent[node]] = True
    return PersonalizedTrie(trie=trie, live=live)


def valid_next(prefix, ptrie: PersonalizedTrie) -> list[int]:
    """Live child tokens of a prefix, sorted; empty for dead/unknown prefixes."""
    node = ptrie.trie.node_at(prefix)
    if node is None or not ptrie.live[node]:
        return []
    return ptrie.live_children(node)


@dataclass
class BeamEntry:
    tokens: tuple[int, ...]
    score: float
    node: int  # trie node; -1 in unconstrained mode


def beam_search(model, h, ptrie: PersonalizedTrie | None, beam_width: int,
                levels: int | None = None, log_softmax_scores: bool = False,
                h_pad_mask=None, return_stats: bool = False):
    """Level-synchronous beam over SID levels.

    With a personalized trie, candidates are the live children of each beam
    prefix; with ptrie=None the full level vocabulary is open (used for
    rollout collection and the no-trie ablation). Scores add raw fused
    logits; ties break toward the lexicographically smaller token sequence.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    L = levels or model.cfg.sid_levels
    if h.dim() == 2:
        h = h.unsqueeze(0)

    if ptrie is not None and not ptrie.live[0]:
        return ([], {"expanded": 0}) if return_stats else []

    beams = [BeamEntry(tokens=(), score=0.0, node=0 if ptrie is not None else -1)]
    expanded = 0
    for level in range(L):
        candidates: list[BeamEntry] = []
        for entry in beams:
            if ptrie is not None:
                tokens = ptrie.live_children(entry.node)
            else:
                tokens = range(model.cfg.level_vocab_sizes[level])
            if not tokens:
                continue
            with torch.no_grad():
                out = model.decode_step(list(entry.tokens), h, h_pad_mask)
                scores = (torch.log_softmax(out.fused, dim=-1)
                          if log_softmax_scores else out.fused)
            for tok in tokens:
                expanded += 1
                child = (ptrie.trie.children[entry.node][tok]
                         if ptrie is not None else -1)
                candidates.append(BeamEntry(
                    tokens=entry.tokens + (int(tok),),
                    score=entry.score + float(scores[tok]),
                    node=child,
                ))
        candidates.sort(key=lambda e: (-e.score, e.tokens))
        beams = candidates[:beam_width]
        if not beams:
            break

    result = [(e.tokens, e.score) for e in beams if len(e.tokens) == L]
    if return_stats:
        return result, {"expanded": expanded}
    return result


def retrieve(model, h, trie: Trie, ptrie: PersonalizedTrie, catalog_by_id,
             eligible_ids: set[int], beam_width: int, top_k: int,
             log_softmax_scores: bool = False, h_pad_mask=None):
    """Beam, then resolve each path's leaf to eligible items (bid desc, id
    asc), dedup, and keep the first top_k."""
    paths = beam_search(model, h, ptrie, beam_width,
                        log_softmax_scores=log_softmax_scores,
                        h_pad_mask=h_pad_mask)
    out = []
    seen = set()
    for path, score in paths:
        node = trie.node_at(path)
        if node is None:
            continue
        items = [catalog_by_id[i] for i in trie.leaf_items.get(node, ())
                 if i in eligible_ids]
        items.sort(key=lambda it: (-it.bid, it.id))
        for it in items:
            if it.id not in seen:
                seen.add(it.id)
                out.append((it.id, score))
            if len(out) >= top_k:
                return out
    return out


def count_valid_paths(paths, ptrie: PersonalizedTrie) -> int:
    return sum(1 for p, _ in paths if ptrie.is_live_path(p))


def enumerate_live_paths(ptrie: PersonalizedTrie) -> list[tuple[int, ...]]:
    """Every complete live path (exhaustive; for oracles and small worlds)."""
    out = []
    trie = ptrie.trie

    def walk(node, prefix):
        if trie.depth[node] == trie.levels:
            out.append(tuple(prefix))
            return
        for tok in sorted(trie.children[node]):
            child = trie.children[node][tok]
            if ptrie.live[child]:
                walk(child, prefix + [tok])

    if ptrie.live[0]:
        walk(0, [])
    return out


def score_path(model, h, path, log_softmax_scores: bool = False,
               h_pad_mask=None) -> float:
    """Cumulative fused score of one complete path, prefix by prefix, with
    the same float accumulation the beam uses."""
    if h.dim() == 2:
        h = h.unsqueeze(0)
    total = 0.0
    for l in range(len(path)):
        with torch.no_grad():
            out = model.decode_step(list(path[:l]), h, h_pad_mask)
            scores = (torch.log_softmax(out.fused, dim=-1)
                      if log_softmax_scores else out.fused)
        total += float(scores[path[l]])
    return total


def expanded_node_counts(model, h, ptrie: PersonalizedTrie, beam_width: int):
    """Expansion work with and without the trie constraint, for the pruning
    report."""
    _, with_stats = beam_search(model, h, ptrie, beam_width, return_stats=True)
    _, without_stats = beam_search(model, h, None, beam_width, return_stats=True)
    return with_stats["expanded"], without_stats["expanded"]
