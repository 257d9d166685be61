"""Shared builders for the test suite."""

from dataclasses import dataclass

import numpy as np
import torch

from univa.catalog import AdItem
from univa.model import DualHeadDecoder, DualHeadOutput, MoEConfig, ModelConfig

torch.set_num_threads(1)


def make_item(i, emb, opt=0, roi=0, ind=0, bid=1.0, gmv=0.0):
    return AdItem(id=i, embedding=np.asarray(emb, dtype=np.float64),
                  opt_goal=opt, roi_target=roi, industry=ind, bid=bid, gmv=gmv)


def skewed_catalog(rng, n=120, dim=6, opts=4, rois=3, inds=3):
    def pick(k):
        w = 1.0 / (1.0 + np.arange(k)) ** 2
        return int(rng.choice(k, p=w / w.sum()))

    return [
        make_item(i, rng.normal(size=dim), opt=pick(opts), roi=pick(rois),
                  ind=pick(inds), bid=float(np.exp(rng.normal(0.0, 0.7))),
                  gmv=float(rng.uniform(1, 50)))
        for i in range(n)
    ]


def build_model(levels, ctx_vocab=40, dim=8, heads=2, experts=3, top_k=2,
                dec_layers=1, enc_layers=1, rounds=1, seed=0, max_seq=32):
    cfg = ModelConfig(
        embed_dim=dim, heads=heads, sid_levels=len(levels),
        level_vocab_sizes=list(levels), context_vocab_size=ctx_vocab,
        decoder_layers=dec_layers, encoder_layers=enc_layers,
        mor_rounds=rounds, max_seq_len=max_seq,
        moe=MoEConfig(num_experts=experts, top_k=top_k, expert_hidden=8),
        seed=seed)
    m = DualHeadDecoder(cfg)
    m.eval()
    return m


def longtail_catalog(seed, n=400, dim=6):
    """Catalog tuned for tokenization-strategy comparisons: balanced
    composition keys with key-specific skewed bid scales, plus an embedding
    layout (one tight heavy blob, several diffuse light ones) whose k-means
    clusters come out mass-imbalanced."""
    rng = np.random.default_rng(seed)
    opt_p = np.array([0.45, 0.35, 0.20])
    roi_p = np.array([0.60, 0.40])
    ind_p = np.array([0.55, 0.45])
    mu = {(o, r, i): rng.normal(0.0, 0.8)
          for o in range(3) for r in range(2) for i in range(2)}
    centers = np.vstack([np.zeros(dim), rng.normal(0.0, 3.0, size=(6, dim))])
    spread = np.array([0.02] + [1.2] * 6)
    blob_p = np.array([0.55] + [0.075] * 6)

    items = []
    for i in range(n):
        o = int(rng.choice(3, p=opt_p))
        r = int(rng.choice(2, p=roi_p))
        d = int(rng.choice(2, p=ind_p))
        blob = int(rng.choice(7, p=blob_p))
        emb = centers[blob] + rng.normal(0.0, spread[blob], size=dim)
        bid = float(np.exp(rng.normal(mu[(o, r, d)], 0.5)))
        items.append(make_item(i, emb, opt=o, roi=r, ind=d, bid=bid,
                               gmv=float(rng.uniform(1, 40))))
    return items


@dataclass
class _StubCfg:
    sid_levels: int
    level_vocab_sizes: list


class StubModel:
    """Decoder with hand-set fused logits per prefix, for beam oracles."""

    def __init__(self, fused_by_prefix: dict, vocab_sizes):
        self.cfg = _StubCfg(len(vocab_sizes), list(vocab_sizes))
        self._fused = {tuple(k): torch.tensor(v, dtype=torch.float32)
                       for k, v in fused_by_prefix.items()}

    def decode_step(self, prefix, h, h_pad_mask=None):
        f = self._fused[tuple(prefix)]
        zero = torch.zeros_like(f)
        return DualHeadOutput(o_gen=f, o_value=zero, fused=f,
                              policy=torch.softmax(f, dim=-1))
