"""MoE layer forward pass: single-device oracle and the three distributed schedules.

The distributed executors run every rank of a simulated world through the
exact collective sequence of the chosen schedule and must reproduce the
single-device oracle bit-for-bit up to float re-association.  Rank-local
tensor re-arrangement between collectives (reshape / transpose) is free and
not traced.

Capacity bookkeeping: slots are allocated per source shard with a fixed
per-shard quota, in ascending token order, ties to the lower expert index.
That keeps routing decisions a pure per-shard function, so every schedule and
the oracle drop the same assignments whenever each shard's demand fits its
quota.  When the token-split schedule shards the gate (quota
ceil(capacity / mp_size) per slice), slice-local quotas can differ from the
oracle's whole-batch quota under overflow; aggregate capacity still matches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collectives import CommTrace, TraceRecord, WorldState, allgather, alltoall, \
    allreduce, fused_combine, fused_dispatch
from .config import (
    ClusterSpec,
    MoEConfig,
    ParallelLayout,
    check_compatible,
    derive_capacity,
)

SCHEDULES = ("baseline", "s1", "s2")


@dataclass
class GateOutput:
    """Routing decision for one token block."""

    dispatch: np.ndarray        # (num_experts, capacity, embed) slot tensor
    expert_index: np.ndarray    # (tokens, k) selected experts, selection order
    combine_weights: np.ndarray  # (tokens, k) softmax scores of the selections
    slot_index: np.ndarray      # (tokens, k) slot per selection, -1 if dropped
    dropped: set[tuple[int, int]]  # (global token, expert) assignments over quota
    token_offset: int = 0


@dataclass(frozen=True)
class ExpertWeights:
    """Replicated gate weights plus per-expert two-layer FFN weights."""

    gate: np.ndarray  # (embed, num_experts)
    w1: np.ndarray    # (num_experts, embed, hidden)
    w2: np.ndarray    # (num_experts, hidden, embed)

    @classmethod
    def generate(cls, cfg: MoEConfig, seed: int = 0) -> "ExpertWeights":
        rng = np.random.default_rng(seed)
        scale1 = 1.0 / math.sqrt(cfg.embed_dim)
        scale2 = 1.0 / math.sqrt(cfg.hidden_dim)
        return cls(
            gate=rng.normal(size=(cfg.embed_dim, cfg.num_experts)),
            w1=rng.normal(scale=scale1,
                          size=(cfg.num_experts, cfg.embed_dim, cfg.hidden_dim)),
            w2=rng.normal(scale=scale2,
                          size=(cfg.num_experts, cfg.hidden_dim, cfg.embed_dim)),
        )

    def w1_shard(self, expert: int, shard: int, esp_size: int) -> np.ndarray:
        width = self.w1.shape[2] // esp_size
        return self.w1[expert][:, shard * width:(shard + 1) * width]

    def w2_shard(self, expert: int, shard: int, esp_size: int) -> np.ndarray:
        width = self.w2.shape[1] // esp_size
        return self.w2[expert][shard * width:(shard + 1) * width, :]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def gate(tokens: np.ndarray, gate_weights: np.ndarray, k: int, capacity: int,
         token_offset: int = 0) -> GateOutput:
    """Softmax routing with top-k selection and per-expert slot quota.

    Slots fill in ascending token order; top-k ties break toward the lower
    expert index.  Assignments beyond the quota are dropped.
    """
    n_tokens, embed = tokens.shape
    n_experts = gate_weights.shape[1]
    if k > n_experts:
        raise ValueError(f"top_k ({k}) exceeds number of experts ({n_experts})")
    scores = softmax(tokens @ gate_weights)
    # argsort on negated scores is stable, so equal scores keep index order.
    ranked = np.argsort(-scores, axis=1, kind="stable")[:, :k]

    dispatch = np.zeros((n_experts, capacity, embed))
    expert_index = ranked
    combine_weights = np.take_along_axis(scores, ranked, axis=1)
    slot_index = np.full((n_tokens, k), -1, dtype=np.int64)
    dropped: set[tuple[int, int]] = set()
    fill = np.zeros(n_experts, dtype=np.int64)
    for t in range(n_tokens):
        for j in range(k):
            e = int(ranked[t, j])
            if fill[e] < capacity:
                slot = int(fill[e])
                dispatch[e, slot] = tokens[t]
                slot_index[t, j] = slot
                fill[e] += 1
            else:
                dropped.add((token_offset + t, e))
    return GateOutput(dispatch=dispatch, expert_index=expert_index,
                      combine_weights=combine_weights, slot_index=slot_index,
                      dropped=dropped, token_offset=token_offset)


def expert_shard_forward(rows: np.ndarray, w1_shard: np.ndarray,
                         w2_shard: np.ndarray) -> np.ndarray:
    """relu(rows @ w1_shard) @ w2_shard; shard partials sum to the full output."""
    if rows.shape[1] != w1_shard.shape[0]:
        raise ValueError(
            f"row width {rows.shape[1]} does not match weight rows {w1_shard.shape[0]}")
    return np.maximum(rows @ w1_shard, 0.0) @ w2_shard


def _combine(gate_out: GateOutput, expert_outputs: np.ndarray,
             embed: int) -> np.ndarray:
    """Weighted scatter of slot outputs back into token order."""
    n_tokens, k = gate_out.slot_index.shape
    out = np.zeros((n_tokens, embed))
    for j in range(k):
        for t in range(n_tokens):
            slot = gate_out.slot_index[t, j]
            if slot < 0:
                continue
            e = gate_out.expert_index[t, j]
            out[t] += gate_out.combine_weights[t, j] * expert_outputs[e, slot]
    return out


def reference_forward(cfg: MoEConfig, weights: ExpertWeights,
                      tokens: np.ndarray) -> np.ndarray:
    """Single-device oracle: gate, unsharded expert FFNs, weighted combine."""
    if tokens.shape != (cfg.tokens_per_rank, cfg.embed_dim):
        raise ValueError(
            f"expected input of shape {(cfg.tokens_per_rank, cfg.embed_dim)}, "
            f"got {tokens.shape}")
    capacity = derive_capacity(cfg)
    routed = gate(tokens, weights.gate, cfg.top_k, capacity)
    expert_outputs = np.zeros((cfg.num_experts, capacity, cfg.embed_dim))
    for e in range(cfg.num_experts):
        expert_outputs[e] = np.maximum(
            routed.dispatch[e] @ weights.w1[e], 0.0) @ weights.w2[e]
    return _combine(routed, expert_outputs, cfg.embed_dim)


@dataclass
class ScheduleResult:
    outputs: np.ndarray          # (world_size, tokens_per_rank, embed)
    trace: CommTrace
    dropped: set[tuple[int, int, int]]  # (mp-group id, global token, expert)
    ffn_rows: int                # expert rows processed, summed over ranks


def _shard_partials(received: np.ndarray, layout: ParallelLayout, rank: int,
                    weights: ExpertWeights, local_experts: list[int]) -> np.ndarray:
    """Apply this rank's expert shards to (n_local_experts, rows, embed)."""
    shard = layout.esp_pos(rank)
    out = np.empty_like(received)
    for i, e in enumerate(local_experts):
        out[i] = expert_shard_forward(
            received[i],
            weights.w1_shard(e, shard, layout.esp_size),
            weights.w2_shard(e, shard, layout.esp_size))
    return out


def run_schedule(schedule: str, cfg: MoEConfig, layout: ParallelLayout,
                 cluster: ClusterSpec, weights: ExpertWeights,
                 inputs: np.ndarray) -> ScheduleResult:
    """Execute one schedule over all simulated ranks.

    ``inputs`` holds one token block per tensor-parallel group, shape
    (world_size / mp_size, tokens_per_rank, embed); the block is replicated
    across the group's ranks, matching how tensor parallelism feeds an MoE
    layer.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    if cluster.world_size != layout.world_size:
        raise ValueError("cluster/layout world size mismatch")
    check_compatible(cfg, layout)
    n_groups = layout.world_size // layout.mp_size
    expected = (n_groups, cfg.tokens_per_rank, cfg.embed_dim)
    if inputs.shape != expected:
        raise ValueError(f"expected inputs of shape {expected}, got {inputs.shape}")

    if schedule == "baseline":
        return _run_baseline(cfg, layout, weights, inputs)
    if schedule == "s1":
        return _run_s1(cfg, layout, weights, inputs)
    return _run_s2(cfg, layout, weights, inputs)


def _input_of(layout: ParallelLayout, inputs: np.ndarray, rank: int) -> np.ndarray:
    return inputs[rank // layout.mp_size]


def _local_experts(cfg: MoEConfig, layout: ParallelLayout, rank: int) -> list[int]:
    per_group = cfg.num_experts // layout.ep_size
    j = layout.ep_pos(rank)
    return list(range(j * per_group, (j + 1) * per_group))


def _run_baseline(cfg: MoEConfig, layout: ParallelLayout, weights: ExpertWeights,
                  inputs: np.ndarray) -> ScheduleResult:
    trace = CommTrace()
    P = layout.world_size
    capacity = derive_capacity(cfg)
    tokens = cfg.tokens_per_rank
    embed = cfg.embed_dim
    e_local = cfg.num_experts // layout.ep_size
    group_slots = layout.esp_size * capacity

    # Gate on local tokens (routing reused later for the combine weights).
    gates = [gate(_input_of(layout, inputs, r), weights.gate, cfg.top_k, capacity)
             for r in range(P)]

    # Sharding-group allgather of the raw token block.
    world = WorldState([_input_of(layout, inputs, r).ravel() for r in range(P)])
    gathered = allgather(world, layout, "esp", trace)

    # Build the group dispatch tensor (experts, esp_size * capacity, embed):
    # slots are shard-major, each shard filling its own quota.  Routing is
    # re-derived deterministically from the gathered tokens.
    def build_dispatch(rank: int, buf: np.ndarray) -> np.ndarray:
        blocks = buf.reshape(layout.esp_size, tokens, embed)
        dispatch = np.zeros((cfg.num_experts, group_slots, embed))
        for s in range(layout.esp_size):
            routed = gate(blocks[s], weights.gate, cfg.top_k, capacity)
            dispatch[:, s * capacity:(s + 1) * capacity, :] = routed.dispatch
        return dispatch

    dispatched = gathered.map_local(build_dispatch)
    # Expert-group alltoall: flat chunks are whole expert blocks.
    routed_world = alltoall(dispatched, layout, "ep", trace)

    # Received layout: (source ep peer, local expert, slot, embed); regroup per
    # local expert before the shard FFN.
    def to_expert_major(rank: int, buf: np.ndarray) -> np.ndarray:
        grid = buf.reshape(layout.ep_size, e_local, group_slots, embed)
        return grid.transpose(1, 0, 2, 3)

    ffn_rows = 0
    partial_buffers = []
    for rank in range(P):
        received = to_expert_major(rank, routed_world.buffers[rank])
        rows = received.reshape(e_local, layout.ep_size * group_slots, embed)
        partial = _shard_partials(rows, layout, rank, weights,
                                  _local_experts(cfg, layout, rank))
        ffn_rows += rows.shape[0] * rows.shape[1]
        # Back to source-major so the return alltoall chunks by source peer.
        partial_buffers.append(partial.reshape(e_local, layout.ep_size,
                                               group_slots, embed)
                               .transpose(1, 0, 2, 3).ravel())
    partial_world = WorldState(partial_buffers)

    reduced = allreduce(partial_world, layout, "esp", trace)
    returned = alltoall(reduced, layout, "ep", trace)

    # Received: (owner ep peer, its local experts, slot, embed) -> full expert
    # axis, then keep this shard's slot range.
    def to_full_experts(rank: int, buf: np.ndarray) -> np.ndarray:
        grid = buf.reshape(layout.ep_size, e_local, group_slots, embed)
        return grid.reshape(cfg.num_experts, group_slots, embed)

    full = returned.map_local(to_full_experts)

    outputs = np.zeros((P, tokens, embed))
    dropped: set[tuple[int, int, int]] = set()
    for rank in range(P):
        s = layout.esp_pos(rank)
        expert_out = full.buffers[rank].reshape(cfg.num_experts, group_slots, embed)
        own = expert_out[:, s * capacity:(s + 1) * capacity, :]
        outputs[rank] = _combine(gates[rank], own, embed)
        mp_group = rank // layout.mp_size
        dropped.update((mp_group, t, e) for t, e in gates[rank].dropped)
    # The shard split of the slot axis carries no forward traffic.
    trace.add(TraceRecord("split", "esp", layout.esp_size,
                          elements=cfg.num_experts * group_slots * embed,
                          wire_per_rank=0.0))
    return ScheduleResult(outputs, trace, dropped, ffn_rows)


def _run_s1(cfg: MoEConfig, layout: ParallelLayout, weights: ExpertWeights,
            inputs: np.ndarray) -> ScheduleResult:
    trace = CommTrace()
    P = layout.world_size
    capacity = derive_capacity(cfg)
    quota = math.ceil(capacity / layout.mp_size)
    tokens = cfg.tokens_per_rank
    slice_len = tokens // layout.mp_size
    embed = cfg.embed_dim
    e_local = cfg.num_experts // layout.ep_size

    trace.add(TraceRecord("split", "mp", layout.mp_size,
                          elements=tokens * embed, wire_per_rank=0.0))
    gates = []
    dispatch_buffers = []
    for rank in range(P):
        m = layout.mp_pos(rank)
        block = _input_of(layout, inputs, rank)
        sl = block[m * slice_len:(m + 1) * slice_len]
        routed = gate(sl, weights.gate, cfg.top_k, quota,
                      token_offset=m * slice_len)
        gates.append(routed)
        dispatch_buffers.append(routed.dispatch.ravel())

    world = WorldState(dispatch_buffers)
    dispatched = fused_dispatch(world, layout, trace)

    # Received: one expert-block piece per source rank; regroup per local expert.
    ffn_rows = 0
    partials = []
    for rank in range(P):
        grid = dispatched.buffers[rank].reshape(P, e_local, quota, embed)
        rows = grid.transpose(1, 0, 2, 3).reshape(e_local, P * quota, embed)
        partial = _shard_partials(rows, layout, rank, weights,
                                  _local_experts(cfg, layout, rank))
        ffn_rows += rows.shape[0] * rows.shape[1]
        partials.append(partial.reshape(e_local, P, quota, embed)
                        .transpose(1, 0, 2, 3).ravel())

    combined = fused_combine(WorldState(partials), layout, trace)

    outputs = np.zeros((P, tokens, embed))
    dropped: set[tuple[int, int, int]] = set()
    slice_outputs = []
    for rank in range(P):
        expert_out = combined.buffers[rank].reshape(cfg.num_experts, quota, embed)
        slice_outputs.append(_combine(gates[rank], expert_out, embed).ravel())
        mp_group = rank // layout.mp_size
        dropped.update((mp_group, t, e) for t, e in gates[rank].dropped)

    restored = allgather(WorldState(slice_outputs), layout, "mp", trace)
    for rank in range(P):
        outputs[rank] = restored.buffers[rank].reshape(tokens, embed)
    return ScheduleResult(outputs, trace, dropped, ffn_rows)


def _run_s2(cfg: MoEConfig, layout: ParallelLayout, weights: ExpertWeights,
            inputs: np.ndarray) -> ScheduleResult:
    trace = CommTrace()
    P = layout.world_size
    capacity = derive_capacity(cfg)
    slot_shard = math.ceil(capacity / layout.mp_size)
    padded = slot_shard * layout.mp_size
    tokens = cfg.tokens_per_rank
    embed = cfg.embed_dim
    e_local = cfg.num_experts // layout.ep_size

    gates = []
    shard_buffers = []
    for rank in range(P):
        routed = gate(_input_of(layout, inputs, rank), weights.gate, cfg.top_k,
                      capacity)
        gates.append(routed)
        # Slot axis zero-padded to a multiple of mp_size, then split across the
        # tensor-parallel group; padding rows stay zero end to end.
        full = np.zeros((cfg.num_experts, padded, embed))
        full[:, :capacity, :] = routed.dispatch
        m = layout.mp_pos(rank)
        shard_buffers.append(full[:, m * slot_shard:(m + 1) * slot_shard, :].ravel())
    trace.add(TraceRecord("split", "mp", layout.mp_size,
                          elements=cfg.num_experts * padded * embed,
                          wire_per_rank=0.0))

    dispatched = fused_dispatch(WorldState(shard_buffers), layout, trace)

    ffn_rows = 0
    partials = []
    for rank in range(P):
        grid = dispatched.buffers[rank].reshape(P, e_local, slot_shard, embed)
        rows = grid.transpose(1, 0, 2, 3).reshape(e_local, P * slot_shard, embed)
        partial = _shard_partials(rows, layout, rank, weights,
                                  _local_experts(cfg, layout, rank))
        ffn_rows += rows.shape[0] * rows.shape[1]
        partials.append(partial.reshape(e_local, P, slot_shard, embed)
                        .transpose(1, 0, 2, 3).ravel())

    # The return alltoall and the slot-restoring gather execute as one phased,
    # overlapped pair; records carry the phase structure for the timing layer.
    combined = fused_combine(WorldState(partials), layout, trace)
    trace.retag_overlapped(1, P)
    restored = allgather(combined, layout, "mp", trace)
    trace.retag_overlapped(1, P)

    outputs = np.zeros((P, tokens, embed))
    dropped: set[tuple[int, int, int]] = set()
    for rank in range(P):
        gathered = restored.buffers[rank].reshape(layout.mp_size, cfg.num_experts,
                                                  slot_shard, embed)
        expert_out = gathered.transpose(1, 0, 2, 3).reshape(cfg.num_experts,
                                                            padded, embed)
        outputs[rank] = _combine(gates[rank], expert_out[:, :capacity, :], embed)
        mp_group = rank // layout.mp_size
        dropped.update((mp_group, t, e) for t, e in gates[rank].dropped)
    return ScheduleResult(outputs, trace, dropped, ffn_rows)


def max_rel_error(outputs: np.ndarray, reference: np.ndarray) -> float:
    """max |out - ref| scaled by the reference magnitude (floor 1)."""
    scale = max(1.0, float(np.abs(reference).max()))
    return float(np.abs(outputs - reference).max()) / scale


def oracle_errors(cfg: MoEConfig, layout: ParallelLayout,
                  weights: ExpertWeights, inputs: np.ndarray,
                  result: ScheduleResult) -> float:
    refs = np.stack([reference_forward(cfg, weights, inputs[g])
                     for g in range(inputs.shape[0])])
    worst = 0.0
    for rank in range(layout.world_size):
        worst = max(worst, max_rel_error(result.outputs[rank],
                                         refs[rank // layout.mp_size]))
    return worst
