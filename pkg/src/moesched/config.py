"""Configuration types, rank/group overlays, and placement classification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path

GROUP_KINDS = ("mp", "ep", "esp", "ep_esp")


class PlacementCase(Enum):
    SINGLE_NODE = "single_node"
    ESP_INTRA_NODE = "esp_intra_node"
    EP_INTRA_NODE = "ep_intra_node"
    OTHER = "other"


@dataclass(frozen=True)
class MoEConfig:
    """Shape of one MoE layer as seen by a single rank.

    Field <-> config-file key: samples_per_rank=B, seq_len=L, embed_dim=M,
    hidden_dim=H, num_experts=E, top_k=k, capacity_factor=f.
    """

    samples_per_rank: int
    seq_len: int
    embed_dim: int
    hidden_dim: int
    num_experts: int
    top_k: int
    capacity_factor: float

    def __post_init__(self) -> None:
        for name in ("samples_per_rank", "seq_len", "embed_dim", "hidden_dim",
                     "num_experts", "top_k"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.top_k > self.num_experts:
            raise ValueError(
                f"top_k ({self.top_k}) cannot exceed num_experts ({self.num_experts})")
        if not self.capacity_factor > 0:
            raise ValueError(f"capacity_factor must be > 0, got {self.capacity_factor!r}")

    @property
    def tokens_per_rank(self) -> int:
        return self.samples_per_rank * self.seq_len


def derive_capacity(cfg: MoEConfig) -> int:
    """Per-expert token slot count: ceil(top_k * capacity_factor * tokens / experts).

    Rational arithmetic on the factor's decimal repr, so integer-valued
    products never round up on binary-float noise; ceil (never floor) because
    the slot count is an upper bound the gate is entitled to fill.
    """
    exact = (Fraction(str(cfg.capacity_factor)) * cfg.top_k * cfg.tokens_per_rank
             / cfg.num_experts)
    return max(1, math.ceil(exact))


@dataclass(frozen=True)
class ClusterSpec:
    """Two-level homogeneous cluster: nodes of equal device count, two link classes."""

    num_nodes: int
    devices_per_node: int
    beta_intra: float
    beta_inter: float
    alpha_link: float = 0.0

    def __post_init__(self) -> None:
        if self.num_nodes < 1 or self.devices_per_node < 1:
            raise ValueError("num_nodes and devices_per_node must be >= 1")
        if not (self.beta_intra > 0 and self.beta_inter > 0):
            raise ValueError("beta_intra and beta_inter must be > 0")
        # Per-element *time*: intra-node links are faster, hence smaller beta.
        if not self.beta_intra < self.beta_inter:
            raise ValueError(
                f"beta_intra ({self.beta_intra}) must be < beta_inter ({self.beta_inter})")
        if self.alpha_link < 0:
            raise ValueError("alpha_link must be >= 0")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.devices_per_node

    def node_of(self, rank: int) -> int:
        # Contiguous fill: ranks 0..d-1 on node 0, etc.
        return rank // self.devices_per_node

    def link_class(self, a: int, b: int) -> str:
        return "intra" if self.node_of(a) == self.node_of(b) else "inter"


@dataclass(frozen=True)
class ParallelLayout:
    """Group sizes plus the rank -> group overlay.

    Default overlay: expert-sharding groups are contiguous rank blocks and
    expert-parallel groups are strided (equal offset within each block); tensor
    (model) parallel groups are always contiguous. ``esp_contiguous=False``
    flips the expert-side overlay (EP contiguous, ESP strided), which is the
    only way a multi-node cluster can keep whole EP groups inside one node.
    """

    mp_size: int
    ep_size: int
    esp_size: int
    world_size: int
    esp_contiguous: bool = True

    def __post_init__(self) -> None:
        for name in ("mp_size", "ep_size", "esp_size", "world_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ep_size * self.esp_size != self.world_size:
            raise ValueError(
                f"ep_size*esp_size ({self.ep_size}*{self.esp_size}) must equal "
                f"world_size ({self.world_size})")
        if self.world_size % self.mp_size != 0:
            raise ValueError(
                f"mp_size ({self.mp_size}) must divide world_size ({self.world_size})")

    def ep_pos(self, rank: int) -> int:
        self._check_rank(rank)
        return rank // self.esp_size if self.esp_contiguous else rank % self.ep_size

    def esp_pos(self, rank: int) -> int:
        self._check_rank(rank)
        return rank % self.esp_size if self.esp_contiguous else rank // self.ep_size

    def mp_pos(self, rank: int) -> int:
        self._check_rank(rank)
        return rank % self.mp_size

    def rank_of(self, ep_pos: int, esp_pos: int) -> int:
        if self.esp_contiguous:
            return ep_pos * self.esp_size + esp_pos
        return esp_pos * self.ep_size + ep_pos

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} out of range [0, {self.world_size})")


def group_members(layout: ParallelLayout, kind: str, rank: int) -> list[int]:
    """Full sorted membership of ``rank``'s group of the given kind."""
    layout._check_rank(rank)
    if kind == "mp":
        base = (rank // layout.mp_size) * layout.mp_size
        return list(range(base, base + layout.mp_size))
    if kind == "esp":
        if layout.esp_contiguous:
            base = (rank // layout.esp_size) * layout.esp_size
            return list(range(base, base + layout.esp_size))
        offset = rank % layout.ep_size
        return [offset + h * layout.ep_size for h in range(layout.esp_size)]
    if kind == "ep":
        if layout.esp_contiguous:
            offset = rank % layout.esp_size
            return [offset + j * layout.esp_size for j in range(layout.ep_size)]
        base = (rank // layout.ep_size) * layout.ep_size
        return list(range(base, base + layout.ep_size))
    if kind == "ep_esp":
        return list(range(layout.world_size))
    raise ValueError(f"unknown group kind: {kind!r}")


def groups_of(layout: ParallelLayout, kind: str) -> list[list[int]]:
    """All groups of one kind; they partition [0, world_size)."""
    seen: set[int] = set()
    groups: list[list[int]] = []
    for rank in range(layout.world_size):
        if rank in seen:
            continue
        members = group_members(layout, kind, rank)
        groups.append(members)
        seen.update(members)
    return groups


def classify_placement(cluster: ClusterSpec, layout: ParallelLayout) -> PlacementCase:
    """Map (cluster, layout) onto the placement case that decides link bottlenecks.

    Priority: single node, then ESP groups in-node, then EP groups in-node,
    then other. Size-1 groups have no traffic and never claim a class.
    """
    if cluster.world_size != layout.world_size:
        raise ValueError(
            f"cluster has {cluster.world_size} devices but layout expects "
            f"{layout.world_size} ranks")
    if cluster.num_nodes == 1:
        return PlacementCase.SINGLE_NODE

    def all_in_node(kind: str) -> bool:
        return all(
            len({cluster.node_of(r) for r in group}) == 1
            for group in groups_of(layout, kind))

    if layout.esp_size >= 2 and all_in_node("esp"):
        return PlacementCase.ESP_INTRA_NODE
    if layout.ep_size >= 2 and all_in_node("ep"):
        return PlacementCase.EP_INTRA_NODE
    return PlacementCase.OTHER


def mp_groups_intra_node(cluster: ClusterSpec, layout: ParallelLayout) -> bool:
    return all(
        len({cluster.node_of(r) for r in group}) == 1
        for group in groups_of(layout, "mp"))


def check_compatible(cfg: MoEConfig, layout: ParallelLayout) -> None:
    """Divisibility constraints the distributed data plane relies on."""
    if cfg.num_experts % layout.ep_size != 0:
        raise ValueError(
            f"num_experts ({cfg.num_experts}) must be divisible by "
            f"ep_size ({layout.ep_size})")
    if cfg.hidden_dim % layout.esp_size != 0:
        raise ValueError(
            f"hidden_dim ({cfg.hidden_dim}) must be divisible by "
            f"esp_size ({layout.esp_size})")
    if cfg.tokens_per_rank % layout.mp_size != 0:
        raise ValueError(
            f"tokens per rank ({cfg.tokens_per_rank}) must be divisible by "
            f"mp_size ({layout.mp_size})")


@dataclass(frozen=True)
class ExperimentConfig:
    moe: MoEConfig
    cluster: ClusterSpec
    layout: ParallelLayout
    seed: int = 0


_INT_KEYS = ("B", "L", "M", "H", "E", "k", "N_MP", "N_EP", "N_ESP",
             "num_nodes", "devices_per_node", "seed")
_FLOAT_KEYS = ("f", "beta_intra", "beta_inter", "alpha_link")
_STR_KEYS = ("overlay",)
_REQUIRED = {"B", "L", "M", "H", "E", "k", "f", "N_MP", "N_EP", "N_ESP",
             "num_nodes", "devices_per_node", "beta_intra", "beta_inter",
             "alpha_link"}


class ConfigError(ValueError):
    """Malformed or inconsistent experiment config file."""


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _STR_KEYS:
                values[key] = value
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(
                f"{source}:{lineno}: bad value for {key!r}: {value!r}") from exc
    missing = sorted(_REQUIRED - values.keys())
    if missing:
        raise ConfigError(f"{source}: missing keys: {', '.join(missing)}")

    overlay = values.get("overlay", "esp_contiguous")
    if overlay not in ("esp_contiguous", "ep_contiguous"):
        raise ConfigError(
            f"{source}: overlay must be 'esp_contiguous' or 'ep_contiguous'")
    try:
        moe = MoEConfig(
            samples_per_rank=values["B"], seq_len=values["L"],
            embed_dim=values["M"], hidden_dim=values["H"],
            num_experts=values["E"], top_k=values["k"],
            capacity_factor=values["f"])
        cluster = ClusterSpec(
            num_nodes=values["num_nodes"],
            devices_per_node=values["devices_per_node"],
            beta_intra=values["beta_intra"], beta_inter=values["beta_inter"],
            alpha_link=values["alpha_link"])
        layout = ParallelLayout(
            mp_size=values["N_MP"], ep_size=values["N_EP"],
            esp_size=values["N_ESP"], world_size=cluster.world_size,
            esp_contiguous=(overlay == "esp_contiguous"))
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return ExperimentConfig(moe=moe, cluster=cluster, layout=layout,
                            seed=int(values.get("seed", 0)))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))
