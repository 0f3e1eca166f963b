"""Pure data-plane collectives over per-rank buffers.

Every operation here is a pure function ``WorldState -> WorldState`` that
defines what a schedule *computes*; time is modeled separately.  Buffers are
flat float64 arrays; callers own any logical (multi-dimension) interpretation
and may freely re-order buffer contents between calls (rank-local moves are
free).  Communication volume is recorded on an optional :class:`CommTrace`.

Conventions shared with the timing and cost layers:

* A trace record's ``elements`` is the full-extent tensor length the cost
  model takes as its argument: the *gathered* length for allgather, the
  per-rank buffer length for alltoall / reduce-scatter / allreduce.
* The fused dispatch serializes destination chunks in global rank order, i.e.
  expert-parallel position major, sharding position minor under the default
  overlay.  Dispatch and combine use the same order, so the pair is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ParallelLayout, groups_of


@dataclass
class WorldState:
    """All ranks' flat buffers, indexed by rank, plus logical shape metadata."""

    buffers: list[np.ndarray]
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.buffers = [np.asarray(b, dtype=np.float64).ravel() for b in self.buffers]
        if not self.shapes:
            self.shapes = [(b.size,) for b in self.buffers]
        if len(self.shapes) != len(self.buffers):
            raise ValueError("one shape per buffer required")

    @property
    def world_size(self) -> int:
        return len(self.buffers)

    @classmethod
    def random(cls, world_size: int, length: int, seed: int = 0) -> "WorldState":
        rng = np.random.default_rng(seed)
        return cls([rng.normal(size=length) for _ in range(world_size)])

    def map_local(self, fn) -> "WorldState":
        """Apply a rank-local (zero communication) transform to every buffer."""
        return WorldState([np.asarray(fn(rank, buf), dtype=np.float64).ravel()
                           for rank, buf in enumerate(self.buffers)])

    def values_multiset(self) -> "np.ndarray":
        return np.sort(np.concatenate(self.buffers))


@dataclass(frozen=True)
class TraceRecord:
    collective: str                  # allgather|alltoall|reducescatter|allreduce|split|dump
    group: str                       # mp|ep|esp|ep_esp|local
    group_size: int
    elements: int                    # full-extent tensor length (cost-model argument)
    wire_per_rank: float             # elements actually crossing links, per rank
    phases: int = 1
    overlapped: bool = False

    def __post_init__(self) -> None:
        if self.elements < 0 or self.wire_per_rank < 0:
            raise ValueError("element counts must be non-negative")


class CommTrace:
    """Append-only record of the collectives a schedule issued."""

    def __init__(self) -> None:
        self.records: list[TraceRecord] = []

    def add(self, record: TraceRecord) -> None:
        self.records.append(record)

    def comm_records(self) -> list[TraceRecord]:
        return [r for r in self.records if r.wire_per_rank > 0]

    def retag_overlapped(self, count: int, phases: int) -> None:
        """Mark the trailing ``count`` records as one overlapped phased stage."""
        if count > len(self.records):
            raise ValueError("fewer records than requested")
        self.records[-count:] = [
            TraceRecord(r.collective, r.group, r.group_size, r.elements,
                        r.wire_per_rank, phases=phases, overlapped=True)
            for r in self.records[-count:]]

    def count(self, collective: str, group: str | None = None) -> int:
        return sum(1 for r in self.records
                   if r.collective == collective and (group is None or r.group == group))

    def total_wire(self) -> float:
        return sum(r.wire_per_rank for r in self.records)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def _check_world(world: WorldState, layout: ParallelLayout) -> None:
    if world.world_size != layout.world_size:
        raise ValueError(
            f"world has {world.world_size} ranks, layout expects {layout.world_size}")


def _uniform_length(world: WorldState, group: list[int]) -> int:
    lengths = {world.buffers[r].size for r in group}
    if len(lengths) != 1:
        raise ValueError(f"buffers in group {group} have mismatched lengths {lengths}")
    return lengths.pop()


def _divisible_length(world: WorldState, group: list[int]) -> int:
    n = _uniform_length(world, group)
    if n % len(group) != 0:
        raise ValueError(
            f"buffer length {n} not divisible by group size {len(group)}")
    return n


def _record(trace: CommTrace | None, stats: set[tuple[int, int]],
            make) -> None:
    # Groups of one kind are symmetric and run concurrently: one record per call.
    if trace is None or not stats:
        return
    if len(stats) != 1:
        raise ValueError(f"non-uniform groups in one collective call: {stats}")
    size, n = stats.pop()
    trace.add(make(size, n))


def allgather(world: WorldState, layout: ParallelLayout, kind: str,
              trace: CommTrace | None = None) -> WorldState:
    """Each rank's buffer becomes the concatenation of its group's buffers."""
    _check_world(world, layout)
    out = [None] * world.world_size
    stats = set()
    for group in groups_of(layout, kind):
        n = _uniform_length(world, group)
        stats.add((len(group), n))
        gathered = np.concatenate([world.buffers[r] for r in group])
        for r in group:
            out[r] = gathered.copy()
    _record(trace, stats, lambda size, n: TraceRecord(
        "allgather", kind, size, elements=n * size,
        wire_per_rank=n * (size - 1)))
    return WorldState(out)


def reduce_scatter(world: WorldState, layout: ParallelLayout, kind: str,
                   trace: CommTrace | None = None) -> WorldState:
    """Split each buffer into group-size chunks; member i keeps the sum of chunk i.

    Accumulation is sequential in group order so that allreduce and the fused
    combine agree bit for bit.
    """
    _check_world(world, layout)
    out = [None] * world.world_size
    stats = set()
    for group in groups_of(layout, kind):
        n = _divisible_length(world, group)
        size = len(group)
        chunk = n // size
        stats.add((size, n))
        for pos, r in enumerate(group):
            acc = world.buffers[group[0]][pos * chunk:(pos + 1) * chunk].copy()
            for other in group[1:]:
                acc = acc + world.buffers[other][pos * chunk:(pos + 1) * chunk]
            out[r] = acc
    _record(trace, stats, lambda size, n: TraceRecord(
        "reducescatter", kind, size, elements=n,
        wire_per_rank=n * (size - 1) / size))
    return WorldState(out)


def allreduce(world: WorldState, layout: ParallelLayout, kind: str,
              trace: CommTrace | None = None) -> WorldState:
    """Elementwise sum within each group, as reduce-scatter followed by allgather."""
    _check_world(world, layout)
    scattered = reduce_scatter(world, layout, kind, trace=None)
    result = allgather(scattered, layout, kind, trace=None)
    if trace is not None:
        stats = {(len(g), _divisible_length(world, g))
                 for g in groups_of(layout, kind)}
        # One record, two ring phases; wire covers both constituents.
        _record(trace, stats, lambda size, n: TraceRecord(
            "allreduce", kind, size, elements=n,
            wire_per_rank=2 * n * (size - 1) / size, phases=2))
    return result


def alltoall(world: WorldState, layout: ParallelLayout, kind: str,
             trace: CommTrace | None = None) -> WorldState:
    """Block transpose: chunk j of member i moves to slot i of member j."""
    _check_world(world, layout)
    out = [None] * world.world_size
    stats = set()
    for group in groups_of(layout, kind):
        n = _divisible_length(world, group)
        size = len(group)
        chunk = n // size
        stats.add((size, n))
        for pos, r in enumerate(group):
            out[r] = np.concatenate([
                world.buffers[src][pos * chunk:(pos + 1) * chunk] for src in group])
    _record(trace, stats, lambda size, n: TraceRecord(
        "alltoall", kind, size, elements=n,
        wire_per_rank=n * (size - 1) / size))
    return WorldState(out)


def split_local(world: WorldState, layout: ParallelLayout, kind: str,
                trace: CommTrace | None = None) -> WorldState:
    """Each rank keeps only the chunk at its own group position.

    No forward communication; the record stands for the allgather the reverse
    pass would owe.
    """
    _check_world(world, layout)
    out = [None] * world.world_size
    stats = set()
    for group in groups_of(layout, kind):
        n = _divisible_length(world, group)
        chunk = n // len(group)
        stats.add((len(group), n))
        for pos, r in enumerate(group):
            out[r] = world.buffers[r][pos * chunk:(pos + 1) * chunk].copy()
    _record(trace, stats, lambda size, n: TraceRecord(
        "split", kind, size, elements=n, wire_per_rank=0.0))
    return WorldState(out)


def dump_local(world: WorldState, replication: int,
               trace: CommTrace | None = None) -> WorldState:
    """Replace each buffer with ``replication`` concatenated copies of itself."""
    if replication < 1:
        raise ValueError("replication must be >= 1")
    out = [np.tile(buf, replication) for buf in world.buffers]
    if trace is not None:
        n = world.buffers[0].size if world.buffers else 0
        trace.add(TraceRecord("dump", "local", replication,
                              elements=n * replication, wire_per_rank=0.0))
    return WorldState(out)


def fused_dispatch(world: WorldState, layout: ParallelLayout,
                   trace: CommTrace | None = None) -> WorldState:
    """Local dump then one alltoall spanning the whole EP x ESP product group.

    Destination rank d receives, from every source, the source sub-chunk owned
    by d's expert-parallel position; one replica lands on each sharding
    position.  The result equals allgather(esp) -> regroup -> alltoall(ep)
    applied to the same world, with received chunks serialized in source rank
    order on both paths.
    """
    _check_world(world, layout)
    n = _uniform_length(world, list(range(world.world_size)))
    if n % layout.ep_size != 0:
        raise ValueError(
            f"buffer length {n} not divisible by ep_size {layout.ep_size}")
    dumped = dump_local(world, layout.esp_size, trace)
    sub = n // layout.ep_size
    # Serialize the dumped copies in destination rank order: chunk d is copy
    # esp_pos(d)'s sub-chunk ep_pos(d).
    order = [(layout.esp_pos(d), layout.ep_pos(d))
             for d in range(layout.world_size)]

    def arrange(rank: int, buf: np.ndarray) -> np.ndarray:
        copies = buf.reshape(layout.esp_size, layout.ep_size, sub)
        return np.concatenate([copies[s, c] for s, c in order])

    arranged = dumped.map_local(arrange)
    return alltoall(arranged, layout, "ep_esp", trace)


def fused_combine(world: WorldState, layout: ParallelLayout,
                  trace: CommTrace | None = None) -> WorldState:
    """One EP x ESP alltoall followed by a local sum of the sharding partials.

    Inverse of :func:`fused_dispatch` on partial sums: after the alltoall each
    rank holds, per expert-parallel position, one partial from every sharding
    position; those are reduced locally in sharding order (sequentially, to
    match reduce-scatter's association).
    """
    _check_world(world, layout)
    returned = alltoall(world, layout, "ep_esp", trace)
    sub = returned.buffers[0].size // layout.world_size
    by_ep: list[list[int]] = [[] for _ in range(layout.ep_size)]
    for src in range(layout.world_size):
        by_ep[layout.ep_pos(src)].append(src)

    def combine(rank: int, buf: np.ndarray) -> np.ndarray:
        pieces = buf.reshape(layout.world_size, sub)
        blocks = []
        for sources in by_ep:
            acc = pieces[sources[0]].copy()
            for src in sources[1:]:
                acc = acc + pieces[src]
            blocks.append(acc)
        return np.concatenate(blocks)

    return returned.map_local(combine)


def saa(world: WorldState, layout: ParallelLayout,
        trace: CommTrace | None = None) -> WorldState:
    """Phased alltoall(ep_esp) + allgather(mp); result equals the composition.

    The alltoall is cut into one phase per product-group member; the slice
    received in phase p feeds the gather in phase p+1.  Phasing affects timing
    only, so the output is assembled slice by slice into exactly what the
    sequential composition produces.
    """
    _check_world(world, layout)
    phases = layout.world_size
    n = _divisible_length(world, list(range(layout.world_size)))
    chunk = n // phases
    mp_groups = groups_of(layout, "mp")
    mp_of = {}
    for group in mp_groups:
        for r in group:
            mp_of[r] = group

    # Phase p: every rank receives alltoall slice p; gather of slice p happens
    # in phase p+1.  Assembled output: per MP member, its full alltoall result.
    slices: list[list[np.ndarray]] = [[] for _ in range(layout.world_size)]
    for phase in range(phases):
        for rank in range(layout.world_size):
            src = phase  # group == [0, P) in rank order
            slices[rank].append(world.buffers[src][rank * chunk:(rank + 1) * chunk])
    a2a_result = [np.concatenate(parts) for parts in slices]
    out = [np.concatenate([a2a_result[m] for m in mp_of[rank]])
           for rank in range(layout.world_size)]

    if trace is not None:
        trace.add(TraceRecord("alltoall", "ep_esp", phases, elements=n,
                              wire_per_rank=n * (phases - 1) / phases,
                              phases=phases, overlapped=True))
        mp_size = layout.mp_size
        trace.add(TraceRecord("allgather", "mp", mp_size, elements=n * mp_size,
                              wire_per_rank=n * (mp_size - 1),
                              phases=phases, overlapped=True))
    return WorldState(out)
