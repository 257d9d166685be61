"""Supervised SID learning plus eCPM-aware PPO.

Rollouts come from an unconstrained beam union MCTS paths; rewards are raw
eCPM values z-scored within each request, credited at the terminal step, and
spread over levels with GAE. PPO ratios compare the fused policy against a
lagged reference snapshot. SL and RL batches alternate by a configured ratio.
"""

from __future__ import annotations

import copy
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .serving import beam_search, build_trie, personalize
from .simulator import (
    PathIndex,
    ecpm_reward,
    normalize_rewards,
    sample_training_requests,
    targeting_filter,
)


@dataclass
class Trajectory:
    actions: list[int]
    behavior_probs: list[float]
    values: list[float]
    raw_reward: float = 0.0
    normalized_reward: float = 0.0
    source: str = "beam"

    def __post_init__(self):
        if len(self.behavior_probs) != len(self.actions) or \
                len(self.values) != len(self.actions):
            raise ValueError("per-step fields must align with actions")
        if any(not (0 < p <= 1) for p in self.behavior_probs):
            raise ValueError("behavior probabilities must be in (0, 1]")


@dataclass
class AdvantageRecord:
    advantages: list[float]
    returns: list[float]
    gamma: float
    lam: float


@dataclass
class MctsNode:
    prefix: tuple[int, ...]
    actions: list[int]
    q_init: list[float]  # value-head estimates, used until an edge is visited
    c: float = 1.0
    visit: int = 1  # initial-visit offset
    edge_visits: dict[int, int] = field(default_factory=dict)
    q_values: dict[int, float] = field(default_factory=dict)

    def q(self, a: int) -> float:
        got = self.q_values.get(a)
        return got if got is not None else self.q_init[self.actions.index(a)]


def mcts_select(node: MctsNode) -> int:
    """UCT argmax; ties go to the lowest action id."""
    if not node.actions:
        raise ValueError("empty action set")
    log_n = math.log(node.visit)
    best_a, best_score = None, None
    for a in node.actions:
        score = node.q(a) + node.c * math.sqrt(log_n / (1 + node.edge_visits.get(a, 0)))
        if best_score is None or score > best_score:
            best_a, best_score = a, score
    return best_a


def mcts_paths(model, h, simulations: int, reward_fn, c: float = 1.0,
               h_pad_mask=None) -> list[tuple[int, ...]]:
    """Run UCT simulations to terminal depth; returns distinct complete paths
    in first-visit order. Backups use rewards z-scored against the rewards
    seen so far within this search."""
    L = model.cfg.sid_levels
    nodes: dict[tuple[int, ...], MctsNode] = {}
    rewards_seen: list[float] = []
    visited: list[tuple[int, ...]] = []
    seen = set()

    def expand(prefix: tuple[int, ...]) -> MctsNode:
        with torch.no_grad():
            out = model.decode_step(list(prefix), h, h_pad_mask)
        vocab = model.cfg.level_vocab_sizes[len(prefix)]
        node = MctsNode(prefix=prefix, actions=list(range(vocab)),
                        q_init=[float(v) for v in out.o_value], c=c)
        nodes[prefix] = node
        return node

    for _ in range(simulations):
        prefix: tuple[int, ...] = ()
        steps: list[tuple[MctsNode, int]] = []
        while len(prefix) < L:
            node = nodes.get(prefix) or expand(prefix)
            a = mcts_select(node)
            steps.append((node, a))
            prefix = prefix + (a,)
        raw = float(reward_fn(prefix))
        rewards_seen.append(raw)
        arr = np.asarray(rewards_seen)
        z = float((raw - arr.mean()) / (arr.std() + 1e-8))
        for node, a in steps:
            node.edge_visits[a] = node.edge_visits.get(a, 0) + 1
            node.visit += 1
            q = node.q_values.get(a, 0.0)
            n = node.edge_visits[a]
            node.q_values[a] = q + (z - q) / n
        if prefix not in seen:
            seen.add(prefix)
            visited.append(prefix)
    return visited


def collect_trajectories(model, h, beam_width: int, mcts_simulations: int,
                         reward_fn, c: float = 1.0,
                         h_pad_mask=None) -> list[Trajectory]:
    """Beam top-B paths union MCTS paths, deduplicated, with behavior
    probabilities, value estimates, raw rewards, and request-normalized
    rewards attached."""
    was_training = model.training
    model.eval()
    try:
        ordered: list[tuple[tuple[int, ...], str]] = []
        seen = set()
        for path, _ in beam_search(model, h, None, beam_width,
                                   h_pad_mask=h_pad_mask):
            ordered.append((path, "beam"))
            seen.add(path)
        if mcts_simulations > 0:
            for path in mcts_paths(model, h, mcts_simulations, reward_fn, c,
                                   h_pad_mask):
                if path not in seen:
                    seen.add(path)
                    ordered.append((path, "mcts"))
        if not ordered:
            return []

        paths_t = torch.tensor([list(p) for p, _ in ordered], dtype=torch.long)
        with torch.no_grad():
            outs = model.forward_paths(paths_t, _expand_h(h, len(ordered)),
                                       h_pad_mask)
        raws = [float(reward_fn(p)) for p, _ in ordered]
        normed = normalize_rewards(raws)
        trajs = []
        for i, (path, source) in enumerate(ordered):
            probs = [float(outs[l].policy[i, path[l]]) for l in range(len(path))]
            vals = [float(outs[l].o_value[i, path[l]]) for l in range(len(path))]
            trajs.append(Trajectory(actions=list(path), behavior_probs=probs,
                                    values=vals, raw_reward=raws[i],
                                    normalized_reward=normed[i], source=source))
        return trajs
    finally:
        model.train(was_training)


def _expand_h(h, batch: int):
    if h.dim() == 2:
        h = h.unsqueeze(0)
    return h.expand(batch, -1, -1) if h.shape[0] == 1 else h


def compute_gae(traj: Trajectory, gamma: float, lam: float) -> AdvantageRecord:
    """Terminal-only reward: r_L is the normalized reward, earlier steps 0;
    deltas propagate backward with decay gamma*lam."""
    L = len(traj.actions)
    v = list(traj.values)
    rewards = [0.0] * (L - 1) + [traj.normalized_reward]
    adv = [0.0] * L
    running = 0.0
    for l in range(L - 1, -1, -1):
        v_next = v[l + 1] if l + 1 < L else 0.0
        delta = rewards[l] + gamma * v_next - v[l]
        running = delta + gamma * lam * running
        adv[l] = running
    returns = [a + vl for a, vl in zip(adv, v)]
    return AdvantageRecord(advantages=adv, returns=returns, gamma=gamma, lam=lam)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def sl_loss(model, ctx_tokens: torch.Tensor, paths: torch.Tensor,
            pad_mask=None, return_details: bool = False):
    """Teacher-forced next-token cross-entropy on the generation head, summed
    over levels, mean over the batch. The value head takes no gradient here."""
    L = model.cfg.sid_levels
    for l in range(L):
        bad = (paths[:, l] < 0) | (paths[:, l] >= model.cfg.level_vocab_sizes[l])
        if bool(bad.any()):
            raise ValueError(f"target token out of range at level {l}")
    h = model.encode(ctx_tokens, pad_mask)
    outs = model.forward_paths(paths, h, pad_mask)
    per_sample = torch.zeros(paths.shape[0], dtype=h.dtype)
    entropies = torch.zeros(paths.shape[0], dtype=h.dtype)
    for l in range(L):
        per_sample = per_sample + F.cross_entropy(outs[l].o_gen, paths[:, l],
                                                  reduction="none")
        with torch.no_grad():
            p = outs[l].policy
            entropies = entropies - (p * torch.log(p.clamp_min(1e-12))).sum(dim=1)
    loss = per_sample.mean()
    if return_details:
        return loss, {
            "per_sample": [float(x) for x in per_sample.detach()],
            "entropy": [float(x) for x in (entropies / L).detach()],
        }
    return loss


def clipped_surrogate(rho: torch.Tensor, adv: torch.Tensor,
                      eps: float) -> torch.Tensor:
    return torch.minimum(rho * adv, rho.clamp(1 - eps, 1 + eps) * adv)


def ppo_value_loss(model, ref_model, items, clip_eps: float,
                   value_weight: float):
    """Combined clipped-surrogate + value regression over collected rollouts.

    items: list of (ctx_tokens, trajectories, advantage_records) per request.
    Trajectories whose ratio is non-finite at any step are skipped and
    counted. Returns (loss, stats) with stats covering KL against the
    reference and the skip counter.
    """
    surrs = []
    vlosses = []
    kls = []
    skipped = 0
    for ctx, trajs, records in items:
        if not trajs:
            continue
        paths = torch.tensor([t.actions for t in trajs], dtype=torch.long)
        h = model.encode(ctx)
        outs = model.forward_paths(paths, _expand_h(h, len(trajs)))
        with torch.no_grad():
            ref_h = ref_model.encode(ctx)
            ref_outs = ref_model.forward_paths(paths, _expand_h(ref_h, len(trajs)))
        L = paths.shape[1]
        idx = torch.arange(len(trajs))
        pi = torch.stack([outs[l].policy[idx, paths[:, l]] for l in range(L)], dim=1)
        ref_pi = torch.stack([ref_outs[l].policy[idx, paths[:, l]]
                              for l in range(L)], dim=1)
        val = torch.stack([outs[l].o_value[idx, paths[:, l]] for l in range(L)], dim=1)
        rho = pi / ref_pi
        adv = torch.tensor([r.advantages for r in records], dtype=rho.dtype)
        ret = torch.tensor([r.returns for r in records], dtype=rho.dtype)
        finite = torch.isfinite(rho).all(dim=1)
        skipped += int((~finite).sum())
        if not bool(finite.any()):
            continue
        rho_f, adv_f = rho[finite], adv[finite]
        surrs.append(clipped_surrogate(rho_f, adv_f, clip_eps).reshape(-1))
        vlosses.append(((val[finite] - ret[finite]) ** 2).reshape(-1))
        with torch.no_grad():
            for l in range(L):
                p, q = outs[l].policy[finite], ref_outs[l].policy[finite]
                kl = (p * (torch.log(p.clamp_min(1e-12))
                           - torch.log(q.clamp_min(1e-12)))).sum(dim=1)
                kls.append(kl)
    if not surrs:
        zero = torch.zeros((), requires_grad=True)
        return zero, {"skipped": skipped, "kl": 0.0, "ppo": 0.0, "value": 0.0}
    l_ppo = -torch.cat(surrs).mean()
    l_value = torch.cat(vlosses).mean()
    loss = l_ppo + value_weight * l_value
    stats = {
        "skipped": skipped,
        "kl": float(torch.cat(kls).mean()),
        "ppo": float(l_ppo.detach()),
        "value": float(l_value.detach()),
    }
    return loss, stats


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 16
    sl_epochs: int = 8
    joint_epochs: int = 8
    rl_ratio: float = 0.5
    beam_width: int = 8
    mcts_simulations: int = 12
    ref_sync_interval: int = 4
    gamma: float = 1.0
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_weight: float = 0.5
    mcts_c: float = 1.0
    requests_per_epoch: int = 32
    probe_requests: int = 16
    sample_mode: str = "uniform"
    adaptive_alpha: float = 0.5
    seed: int = 0


@dataclass
class TrainResult:
    history: list[dict]
    sl_state: dict | None
    rl_updates: int
    rl_skipped: int


def mean_ecpm_top1(model, world, trie, index, requests, beam_width: int) -> float:
    """Raw eCPM of the trie-constrained beam's top path, averaged over
    requests; empty beams contribute 0."""
    was_training = model.training
    model.eval()
    try:
        vals = []
        for req in requests:
            pt = personalize(trie, targeting_filter(req, world.catalog))
            with torch.no_grad():
                h = model.encode(torch.tensor([req.context_tokens]))
            paths = beam_search(model, h, pt, beam_width)
            vals.append(ecpm_reward(world, req, paths[0][0], index)
                        if paths else 0.0)
        return float(np.mean(vals)) if vals else 0.0
    finally:
        model.train(was_training)


def hr_at_k_requests(model, world, trie, index, requests, beam_width: int,
                     k: int, catalog_by_id, tokenizer) -> float:
    """Fraction of requests whose target item appears in the retrieved top-k."""
    from .serving import retrieve

    was_training = model.training
    model.eval()
    try:
        hits = 0
        total = 0
        for req in requests:
            if req.target_item is None:
                continue
            total += 1
            eligible = targeting_filter(req, world.catalog)
            pt = personalize(trie, eligible)
            with torch.no_grad():
                h = model.encode(torch.tensor([req.context_tokens]))
            got = retrieve(model, h, trie, pt, catalog_by_id, eligible,
                           beam_width, k)
            if any(i == req.target_item for i, _ in got):
                hits += 1
        return hits / total if total else 0.0
    finally:
        model.train(was_training)


def train(model, world, tokenizer, requests, cfg: TrainConfig,
          log_path=None) -> TrainResult:
    """Alternating SL/RL optimization; per-epoch CSV log row:
    epoch, sl_loss, mean_ecpm_top1, kl, expert_load_imbalance."""
    usable = [r for r in requests if r.target_item is not None]
    if not usable:
        raise ValueError("no requests with a target item")
    if cfg.sl_epochs == 0 and cfg.joint_epochs > 0 and cfg.rl_ratio > 0:
        warnings.warn("RL from random initialization: no SL pretraining epochs")

    torch.manual_seed(cfg.seed)
    trie = build_trie(world.catalog, tokenizer)
    index = PathIndex.from_tokenizer(world.catalog, tokenizer)
    by_id = {it.id: it for it in world.catalog}
    target_path = {r.id: tokenizer.tokenize(by_id[r.target_item]) for r in usable}

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ref_model = copy.deepcopy(model)
    ref_model.eval()
    for p in ref_model.parameters():
        p.requires_grad_(False)

    probe = usable[: cfg.probe_requests]
    history: list[dict] = []
    sl_state = None
    rl_updates = 0
    rl_skipped = 0
    # adaptive-sampling bookkeeping, refreshed as batches come through
    req_loss = {r.id: 1.0 for r in usable}
    req_entropy = {r.id: 1.0 for r in usable}

    total_epochs = cfg.sl_epochs + cfg.joint_epochs
    acc = 0.0  # carries across epochs so small epochs still hit the ratio
    for epoch in range(total_epochs):
        joint = epoch >= cfg.sl_epochs
        budget = min(cfg.requests_per_epoch, len(usable))
        epoch_requests = sample_training_requests(
            usable, budget, cfg.sample_mode, seed=cfg.seed * 1_000_003 + epoch,
            losses=[req_loss[r.id] for r in usable],
            entropies=[req_entropy[r.id] for r in usable],
            alpha=cfg.adaptive_alpha)
        order = np.random.default_rng(cfg.seed * 7 + epoch).permutation(
            len(epoch_requests))
        epoch_requests = [epoch_requests[i] for i in order]

        sl_losses = []
        kl_vals = []
        for start in range(0, len(epoch_requests), cfg.batch_size):
            batch = epoch_requests[start:start + cfg.batch_size]
            do_rl = False
            if joint and cfg.rl_ratio > 0:
                acc += cfg.rl_ratio
                if acc >= 1.0:
                    do_rl = True
                    acc -= 1.0
            if do_rl:
                if rl_updates % cfg.ref_sync_interval == 0:
                    ref_model.load_state_dict(model.state_dict())
                items = []
                for req in batch:
                    ctx = torch.tensor([req.context_tokens])
                    with torch.no_grad():
                        h = model.encode(ctx)
                    trajs = collect_trajectories(
                        model, h, cfg.beam_width, cfg.mcts_simulations,
                        lambda p, _r=req: ecpm_reward(world, _r, p, index),
                        c=cfg.mcts_c)
                    records = [compute_gae(t, cfg.gamma, cfg.gae_lambda)
                               for t in trajs]
                    items.append((ctx, trajs, records))
                model.train()
                opt.zero_grad()
                loss, stats = ppo_value_loss(model, ref_model, items,
                                             cfg.clip_eps, cfg.value_weight)
                loss.backward()
                opt.step()
                model.update_load_balance()
                rl_updates += 1
                rl_skipped += stats["skipped"]
                kl_vals.append(stats["kl"])
            else:
                ctx = torch.tensor([r.context_tokens for r in batch])
                paths = torch.tensor([target_path[r.id] for r in batch],
                                     dtype=torch.long)
                model.train()
                opt.zero_grad()
                loss, details = sl_loss(model, ctx, paths, return_details=True)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"SL loss diverged (non-finite) at epoch {epoch}")
                loss.backward()
                opt.step()
                model.update_load_balance()
                sl_losses.append(float(loss.detach()))
                for req, pl, pe in zip(batch, details["per_sample"],
                                       details["entropy"]):
                    req_loss[req.id] = pl
                    req_entropy[req.id] = pe

        if epoch == cfg.sl_epochs - 1:
            sl_state = copy.deepcopy(model.state_dict())

        history.append({
            "epoch": epoch,
            "sl_loss": float(np.mean(sl_losses)) if sl_losses else 0.0,
            "mean_ecpm_top1": mean_ecpm_top1(model, world, trie, index, probe,
                                             cfg.beam_width),
            "kl": float(np.mean(kl_vals)) if kl_vals else 0.0,
            "expert_load_imbalance": model.expert_load_imbalance(),
        })

    if log_path is not None:
        write_history_csv(history, log_path)
    return TrainResult(history=history, sl_state=sl_state,
                       rl_updates=rl_updates, rl_skipped=rl_skipped)


HISTORY_COLUMNS = ["epoch", "sl_loss", "mean_ecpm_top1", "kl",
                   "expert_load_imbalance"]


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: _fmt(row[k]) for k in HISTORY_COLUMNS})


def _fmt(v):
    return f"{v:.10g}" if isinstance(v, float) else v
