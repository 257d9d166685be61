"""Dual-head SID decoder with sparse MoE and a shared recursive middle block.

Context tokens go through a small causal self-attention encoder; SID prefixes
attend to the encoded states (cross first, causal self second), pass through
the recursive expert trunk, and finish in per-level generation and value
heads. The fused policy is softmax(o_gen + o_value).
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1


def stable_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    z = x - x.max(dim=dim, keepdim=True).values
    e = z.exp()
    return e / e.sum(dim=dim, keepdim=True)


@dataclass
class MoEConfig:
    num_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 32
    bias_step: float = 0.05
    load_decay: float = 0.5

    def __post_init__(self):
        if not (1 <= self.top_k <= self.num_experts):
            raise ValueError("need 1 <= top_k <= num_experts")
        if self.bias_step <= 0:
            raise ValueError("bias_step must be positive")


@dataclass
class ModelConfig:
    embed_dim: int
    heads: int
    sid_levels: int
    level_vocab_sizes: list[int]
    context_vocab_size: int
    decoder_layers: int = 2
    encoder_layers: int = 2
    mor_rounds: int = 2
    max_seq_len: int = 64
    moe: MoEConfig = field(default_factory=MoEConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.moe, dict):
            self.moe = MoEConfig(**self.moe)
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if len(self.level_vocab_sizes) != self.sid_levels:
            raise ValueError("level_vocab_sizes length must equal sid_levels")
        if self.mor_rounds < 1:
            raise ValueError("mor_rounds must be >= 1")


@dataclass
class RequestContext:
    """Grouped context features; the model consumes the concatenation."""

    user_tokens: list[int]
    organic_tokens: list[int]
    env_tokens: list[int]
    item_tokens: list[int]

    def tokens(self) -> list[int]:
        return (self.user_tokens + self.organic_tokens
                + self.env_tokens + self.item_tokens)


@dataclass
class DualHeadOutput:
    o_gen: torch.Tensor
    o_value: torch.Tensor
    fused: torch.Tensor
    policy: torch.Tensor

    @classmethod
    def from_heads(cls, o_gen: torch.Tensor, o_value: torch.Tensor) -> "DualHeadOutput":
        fused = o_gen + o_value
        return cls(o_gen=o_gen, o_value=o_value, fused=fused,
                   policy=stable_softmax(fused))


class Expert(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class MoELayer(nn.Module):
    """Top-K routed experts plus an always-on shared expert.

    The routing bias only changes which experts are selected; contribution
    weights stay the raw softmax values. load_stats counts selections while
    in training mode so evaluation passes leave the balancing state alone.
    """

    def __init__(self, dim: int, cfg: MoEConfig):
        super().__init__()
        self.cfg = cfg
        self.router = nn.Linear(dim, cfg.num_experts, bias=False)
        self.shared = Expert(dim, cfg.expert_hidden)
        self.experts = nn.ModuleList(
            Expert(dim, cfg.expert_hidden) for _ in range(cfg.num_experts))
        self.register_buffer("routing_bias", torch.zeros(cfg.num_experts))
        self.register_buffer("load_stats", torch.zeros(cfg.num_experts))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        g = stable_softmax(self.router(flat), dim=-1)
        sel = g + self.routing_bias.to(g.dtype)
        _, top_idx = torch.topk(sel, self.cfg.top_k, dim=-1)
        mask = torch.zeros_like(g)
        mask.scatter_(1, top_idx, 1.0)
        if self.training:
            with torch.no_grad():
                self.load_stats += mask.detach().sum(dim=0).to(self.load_stats.dtype)
        out = self.shared(flat)
        for m, expert in enumerate(self.experts):
            w = (g[:, m] * mask[:, m]).unsqueeze(-1)
            out = out + w * expert(flat)
        return out.reshape(shape)

    def update_load_balance(self) -> None:
        with torch.no_grad():
            mean = self.load_stats.mean()
            self.routing_bias -= self.cfg.bias_step * torch.sign(self.load_stats - mean)
            self.load_stats *= self.cfg.load_decay

    def load_imbalance(self) -> float:
        total = float(self.load_stats.sum())
        if total <= 0:
            return 0.0
        mean = float(self.load_stats.mean())
        return float(self.load_stats.max()) / mean


class MoRTrunk(nn.Module):
    """lin_in once, a shared residual MoE middle block R times, lin_out once.
    Parameter count does not depend on R."""

    def __init__(self, dim: int, moe_cfg: MoEConfig, rounds: int):
        super().__init__()
        self.rounds = rounds
        self.lin_in = nn.Linear(dim, dim)
        self.lin_out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.moe = MoELayer(dim, moe_cfg)

    def mid(self, t: torch.Tensor) -> torch.Tensor:
        return t + self.moe(self.norm(t))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = self.lin_in(x)
        for _ in range(self.rounds):
            t = self.mid(t)
        return self.lin_out(t)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(),
                                 nn.Linear(2 * dim, dim))

    def forward(self, x, causal_mask, pad_mask):
        q = self.norm1(x)
        a, _ = self.attn(q, q, q, attn_mask=causal_mask,
                         key_padding_mask=pad_mask, need_weights=False)
        x = x + a
        return x + self.ffn(self.norm2(x))


class ContextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.context_vocab_size, cfg.embed_dim)
        self.pos = nn.Embedding(cfg.max_seq_len, cfg.embed_dim)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.embed_dim, cfg.heads) for _ in range(cfg.encoder_layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, tokens: torch.Tensor, pad_mask: torch.Tensor | None = None):
        if tokens.dim() != 2:
            raise ValueError("context tokens must be (batch, length)")
        B, T = tokens.shape
        if T > self.cfg.max_seq_len:
            raise ValueError(f"context length {T} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = self.embed(tokens) + self.pos(torch.arange(T, device=tokens.device))
        causal = _causal_mask(T, x.dtype, x.device)
        for layer in self.layers:
            x = layer(x, causal, pad_mask)
        return self.norm(x)


def _causal_mask(n: int, dtype, device) -> torch.Tensor:
    m = torch.full((n, n), float("-inf"), dtype=dtype, device=device)
    return torch.triu(m, diagonal=1)


class DecoderLayer(nn.Module):
    """Cross-attention to encoder states, then causal self-attention over the
    SID prefix, then the recursive expert trunk; all pre-norm residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.norm_q = nn.LayerNorm(d)
        self.cross = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.norm_s = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, cfg.heads, batch_first=True)
        self.norm_t = nn.LayerNorm(d)
        self.trunk = MoRTrunk(d, cfg.moe, cfg.mor_rounds)

    def forward(self, x, h, h_pad_mask, causal_mask):
        q = self.norm_q(x)
        a, _ = self.cross(q, h, h, key_padding_mask=h_pad_mask, need_weights=False)
        x = x + a
        s = self.norm_s(x)
        a, _ = self.self_attn(s, s, s, attn_mask=causal_mask, need_weights=False)
        x = x + a
        return x + self.trunk(self.norm_t(x))


class DualHeadDecoder(nn.Module):
    """Encoder + SID decoder with per-level (generation, value) heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.encoder = ContextEncoder(cfg)
        self.bos = nn.Parameter(torch.zeros(d))
        self.sid_pos = nn.Embedding(cfg.sid_levels, d)
        # level-l tokens are decoder INPUT only for l < L-1
        self.sid_embed = nn.ModuleList(
            nn.Embedding(v, d) for v in cfg.level_vocab_sizes[:-1])
        self.layers = nn.ModuleList(
            DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.norm = nn.LayerNorm(d)
        self.gen_heads = nn.ModuleList(
            nn.Linear(d, v) for v in cfg.level_vocab_sizes)
        self.value_heads = nn.ModuleList(
            nn.Linear(d, v) for v in cfg.level_vocab_sizes)
        self._init_params(cfg.seed)

    def _init_params(self, seed: int) -> None:
        # uniform(-0.05, 0.05) everywhere except LayerNorm, which keeps its
        # identity initialization so pre-norm blocks start well-scaled
        gen = torch.Generator().manual_seed(seed)
        skip = set()
        for mod in self.modules():
            if isinstance(mod, nn.LayerNorm):
                skip.update(id(p) for p in mod.parameters())
        with torch.no_grad():
            for p in self.parameters():
                if id(p) not in skip:
                    p.uniform_(-0.05, 0.05, generator=gen)

    # -- forward pieces ----------------------------------------------------

    def encode(self, tokens: torch.Tensor, pad_mask: torch.Tensor | None = None):
        return self.encoder(tokens, pad_mask)

    def _sid_states(self, prefixes: torch.Tensor | None, batch: int,
                    h: torch.Tensor, h_pad_mask):
        """Decoder trunk states for [BOS] + embedded prefix tokens."""
        d = self.cfg.embed_dim
        p = 0 if prefixes is None else prefixes.shape[1]
        if p >= self.cfg.sid_levels:
            raise ValueError(f"prefix length {p} must be < {self.cfg.sid_levels}")
        parts = [self.bos.to(h.dtype).expand(batch, 1, d)]
        for l in range(p):
            parts.append(self.sid_embed[l](prefixes[:, l]).unsqueeze(1))
        x = torch.cat(parts, dim=1) + self.sid_pos(
            torch.arange(p + 1, device=h.device))
        causal = _causal_mask(p + 1, x.dtype, x.device)
        for layer in self.layers:
            x = layer(x, h, h_pad_mask, causal)
        return self.norm(x)

    def decode_step(self, prefix, h: torch.Tensor,
                    h_pad_mask: torch.Tensor | None = None) -> DualHeadOutput:
        """Head outputs for the next level after `prefix` on a single request.
        h may be (T, d) or (1, T, d)."""
        if h.dim() == 2:
            h = h.unsqueeze(0)
        p = len(prefix)
        pre = None
        if p:
            pre = torch.as_tensor([list(prefix)], dtype=torch.long, device=h.device)
        states = self._sid_states(pre, 1, h, h_pad_mask)
        last = states[:, -1]
        return DualHeadOutput.from_heads(self.gen_heads[p](last)[0],
                                         self.value_heads[p](last)[0])

    def decode_prefixes(self, prefixes: torch.Tensor, h: torch.Tensor,
                        h_pad_mask: torch.Tensor | None = None) -> DualHeadOutput:
        """Batched decode_step for equal-length prefixes (B, p); h is (B, T, d)
        or a single (T, d) shared by the whole batch."""
        B, p = prefixes.shape
        if h.dim() == 2:
            h = h.unsqueeze(0)
        if h.shape[0] == 1 and B > 1:
            h = h.expand(B, -1, -1)
            if h_pad_mask is not None and h_pad_mask.shape[0] == 1:
                h_pad_mask = h_pad_mask.expand(B, -1)
        states = self._sid_states(prefixes if p else None, B, h, h_pad_mask)
        last = states[:, -1]
        return DualHeadOutput.from_heads(self.gen_heads[p](last),
                                         self.value_heads[p](last))

    def forward_paths(self, paths: torch.Tensor, h: torch.Tensor,
                      h_pad_mask: torch.Tensor | None = None) -> list[DualHeadOutput]:
        """Teacher-forced pass over complete paths (B, L); returns one batched
        DualHeadOutput per level."""
        B, L = paths.shape
        if L != self.cfg.sid_levels:
            raise ValueError(f"paths must have {self.cfg.sid_levels} levels, got {L}")
        states = self._sid_states(paths[:, :-1], B, h, h_pad_mask)
        outs = []
        for l in range(L):
            last = states[:, l]
            outs.append(DualHeadOutput.from_heads(self.gen_heads[l](last),
                                                  self.value_heads[l](last)))
        return outs

    # -- MoE bookkeeping -----------------------------------------------------

    def moe_layers(self) -> list[MoELayer]:
        return [m for m in self.modules() if isinstance(m, MoELayer)]

    def update_load_balance(self) -> None:
        for m in self.moe_layers():
            m.update_load_balance()

    def expert_load_imbalance(self) -> float:
        vals = [m.load_imbalance() for m in self.moe_layers()]
        return float(np.mean(vals)) if vals else 0.0

    def describe(self) -> dict:
        per_group = {}
        for name, p in self.named_parameters():
            group = name.split(".")[0]
            per_group[group] = per_group.get(group, 0) + p.numel()
        return {
            "parameters": sum(p.numel() for p in self.parameters()),
            "per_group": per_group,
            "config": config_to_dict(self.cfg),
        }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    moe = d.pop("moe")
    return ModelConfig(moe=MoEConfig(**moe), **d)


def save_checkpoint(model: DualHeadDecoder, path, extra: dict | None = None) -> None:
    """Single-file checkpoint: version, config JSON, and every state-dict
    array (parameters and MoE buffers) under its dotted name."""
    arrays = {
        "__meta__": np.frombuffer(
            json.dumps({
                "version": CHECKPOINT_VERSION,
                "config": config_to_dict(model.cfg),
                "extra": extra or {},
            }).encode(), dtype=np.uint8),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"sd/{name}"] = tensor.detach().cpu().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[DualHeadDecoder, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        model = DualHeadDecoder(config_from_dict(meta["config"]))
        state = {k[3:]: torch.from_numpy(z[k].copy()) for k in z.files
                 if k.startswith("sd/")}
    model.load_state_dict(state)
    return model, meta.get("extra", {})
