"""Linear (startup + per-element) collective cost model, fitting, and the
schedule selector.

Every collective is priced as ``alpha + beta * x`` where x is the full-extent
tensor length (gathered size for allgather, per-rank buffer otherwise).  A
profile is a table of fitted (alpha, beta) pairs keyed by (collective, group);
the selector compares the closed-form costs of the two fused schedules and
returns the cheaper one, ties going to the token-split schedule.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MoEConfig, ParallelLayout, derive_capacity

# (collective, group) keys of a complete profile.
KEY_AG_MP = ("allgather", "mp")
KEY_A2A_EP = ("alltoall", "ep")
KEY_A2A_EPESP = ("alltoall", "ep_esp")
KEY_AG_ESP = ("allgather", "esp")
KEY_RS_ESP = ("reducescatter", "esp")
KEY_AR_ESP = ("allreduce", "esp")
KEY_OVERLAP = ("overlap", "ep_esp")

ALL_KEYS = (KEY_AG_MP, KEY_A2A_EP, KEY_A2A_EPESP, KEY_AG_ESP, KEY_RS_ESP,
            KEY_AR_ESP, KEY_OVERLAP)


class ProfileError(LookupError):
    """A cost computation referenced profile entries that are missing."""


class FitError(ValueError):
    """Samples insufficient for a least-squares fit."""


@dataclass(frozen=True)
class AlphaBeta:
    alpha: float
    beta: float
    collective: str = ""
    group: str = ""
    r_squared: float = 1.0
    alpha_clamped: bool = False

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0 (clamp happens at fit time)")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")

    def __call__(self, x: float) -> float:
        return predict_collective(self, x)


def predict_collective(ab: AlphaBeta, x: float) -> float:
    if x < 0:
        raise ValueError("x must be >= 0")
    return ab.alpha + ab.beta * x


def fit_alpha_beta(samples: list[tuple[float, float]], collective: str = "",
                   group: str = "") -> AlphaBeta:
    """Ordinary least squares of time against element count.

    A negative fitted intercept is startup-noise; it is clamped to zero and
    flagged.  R^2 reports the unclamped fit.
    """
    if len(samples) < 2:
        raise FitError("need at least 2 samples")
    x = np.asarray([s[0] for s in samples], dtype=np.float64)
    t = np.asarray([s[1] for s in samples], dtype=np.float64)
    if np.unique(x).size < 2:
        raise FitError("need at least 2 distinct element counts")
    x_mean = x.mean()
    t_mean = t.mean()
    var = float(((x - x_mean) ** 2).sum())
    beta = float(((x - x_mean) * (t - t_mean)).sum()) / var
    alpha = t_mean - beta * x_mean
    residual = t - (alpha + beta * x)
    ss_res = float((residual ** 2).sum())
    ss_tot = float(((t - t_mean) ** 2).sum())
    r_squared = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - ss_res / ss_tot)
    if beta <= 0:
        raise FitError("fitted slope is non-positive; samples do not look "
                       "like a growing linear cost")
    clamped = alpha < 0
    return AlphaBeta(alpha=max(0.0, alpha), beta=beta, collective=collective,
                     group=group, r_squared=r_squared, alpha_clamped=clamped)


@dataclass
class CostProfile:
    entries: dict[tuple[str, str], AlphaBeta] = field(default_factory=dict)

    def add(self, ab: AlphaBeta) -> None:
        self.entries[(ab.collective, ab.group)] = ab

    def get(self, key: tuple[str, str]) -> AlphaBeta:
        try:
            return self.entries[key]
        except KeyError:
            raise ProfileError(f"profile is missing entry {key[0]}/{key[1]}") from None

    def require(self, keys) -> None:
        missing = [k for k in keys if k not in self.entries]
        if missing:
            names = ", ".join(f"{c}/{g}" for c, g in missing)
            raise ProfileError(f"profile is missing entries: {names}")


def _volumes(cfg: MoEConfig, layout: ParallelLayout) -> tuple[float, float]:
    capacity = derive_capacity(cfg)
    tokens_elems = cfg.tokens_per_rank * cfg.embed_dim
    dispatch_elems = cfg.num_experts * capacity * cfg.embed_dim * layout.esp_size
    return tokens_elems, dispatch_elems


def cost_baseline(cfg: MoEConfig, layout: ParallelLayout,
                  profile: CostProfile) -> float:
    profile.require((KEY_AG_ESP, KEY_AR_ESP, KEY_A2A_EP))
    tokens_elems, dispatch_elems = _volumes(cfg, layout)
    return (profile.get(KEY_AG_ESP)(tokens_elems * layout.esp_size)
            + profile.get(KEY_AR_ESP)(dispatch_elems)
            + 2 * profile.get(KEY_A2A_EP)(dispatch_elems))


def cost_fused(cfg: MoEConfig, layout: ParallelLayout,
               profile: CostProfile) -> float:
    profile.require((KEY_A2A_EPESP,))
    _, dispatch_elems = _volumes(cfg, layout)
    return 2 * profile.get(KEY_A2A_EPESP)(dispatch_elems)


def cost_s1(cfg: MoEConfig, layout: ParallelLayout,
            profile: CostProfile) -> float:
    """Token-split schedule; degenerates to the plain fused cost without MP."""
    if layout.mp_size == 1:
        return cost_fused(cfg, layout, profile)
    profile.require((KEY_A2A_EPESP, KEY_AG_MP))
    tokens_elems, dispatch_elems = _volumes(cfg, layout)
    return (2 * profile.get(KEY_A2A_EPESP)(dispatch_elems / layout.mp_size)
            + profile.get(KEY_AG_MP)(tokens_elems))


def cost_s2(cfg: MoEConfig, layout: ParallelLayout,
            profile: CostProfile) -> float:
    """Slot-split schedule with the overlapped return path."""
    if layout.mp_size == 1:
        return cost_fused(cfg, layout, profile)
    profile.require((KEY_A2A_EPESP, KEY_OVERLAP, KEY_AG_MP))
    _, dispatch_elems = _volumes(cfg, layout)
    shard = dispatch_elems / layout.mp_size
    return (profile.get(KEY_A2A_EPESP)(shard)
            + profile.get(KEY_OVERLAP)(shard)
            + profile.get(KEY_AG_MP)(dispatch_elems / layout.esp_size))


def _literal_volumes(cfg: MoEConfig, layout: ParallelLayout) -> tuple[float, float]:
    # Compatibility arithmetic: slot count carries a spurious embed factor and
    # the overlapped term is not divided by the tensor-parallel width.
    capacity = (cfg.top_k * cfg.capacity_factor * cfg.tokens_per_rank
                * cfg.embed_dim / cfg.num_experts)
    x = cfg.tokens_per_rank * cfg.embed_dim
    y = cfg.num_experts * capacity * cfg.embed_dim * layout.esp_size
    return x, y


def cost_s1_literal(cfg: MoEConfig, layout: ParallelLayout,
                    profile: CostProfile) -> float:
    profile.require((KEY_A2A_EPESP, KEY_AG_MP))
    x, y = _literal_volumes(cfg, layout)
    return (2 * profile.get(KEY_A2A_EPESP)(y / layout.mp_size)
            + profile.get(KEY_AG_MP)(x))


def cost_s2_literal(cfg: MoEConfig, layout: ParallelLayout,
                    profile: CostProfile) -> float:
    profile.require((KEY_A2A_EPESP, KEY_OVERLAP))
    _, y = _literal_volumes(cfg, layout)
    a2a = profile.get(KEY_A2A_EPESP)
    ov = profile.get(KEY_OVERLAP)
    return a2a.alpha + a2a.beta * y / layout.mp_size + ov.alpha + ov.beta * y


@dataclass(frozen=True)
class CostReport:
    t_baseline: float
    t_fused: float
    t_s1: float
    t_s2: float
    chosen: str
    breakdown: dict[str, float] = field(default_factory=dict)


def select_schedule(cfg: MoEConfig, layout: ParallelLayout, profile: CostProfile,
                    alg1_literal: bool = False) -> CostReport:
    """Pick the cheaper fused schedule; ties go to s1."""
    profile.require(ALL_KEYS)
    if alg1_literal:
        t_s1 = cost_s1_literal(cfg, layout, profile)
        t_s2 = cost_s2_literal(cfg, layout, profile)
    else:
        t_s1 = cost_s1(cfg, layout, profile)
        t_s2 = cost_s2(cfg, layout, profile)
    t_b = cost_baseline(cfg, layout, profile)
    t_d = cost_fused(cfg, layout, profile)
    chosen = "s1" if t_s1 <= t_s2 else "s2"
    tokens_elems, dispatch_elems = _volumes(cfg, layout)
    shard = dispatch_elems / layout.mp_size
    breakdown = {
        "baseline.allgather_esp": profile.get(KEY_AG_ESP)(tokens_elems * layout.esp_size),
        "baseline.allreduce_esp": profile.get(KEY_AR_ESP)(dispatch_elems),
        "baseline.alltoall_ep_x2": 2 * profile.get(KEY_A2A_EP)(dispatch_elems),
        "s1.alltoall_ep_esp_x2": 2 * profile.get(KEY_A2A_EPESP)(
            shard if layout.mp_size > 1 else dispatch_elems),
        "s1.allgather_mp": (profile.get(KEY_AG_MP)(tokens_elems)
                            if layout.mp_size > 1 else 0.0),
        "s2.alltoall_ep_esp": profile.get(KEY_A2A_EPESP)(
            shard if layout.mp_size > 1 else dispatch_elems),
        "s2.overlap": (profile.get(KEY_OVERLAP)(shard)
                       if layout.mp_size > 1 else profile.get(KEY_A2A_EPESP)(dispatch_elems)),
        "s2.allgather_mp": (profile.get(KEY_AG_MP)(dispatch_elems / layout.esp_size)
                            if layout.mp_size > 1 else 0.0),
    }
    return CostReport(t_baseline=t_b, t_fused=t_d, t_s1=t_s1, t_s2=t_s2,
                      chosen=chosen, breakdown=breakdown)


# -- profile / sample CSV schemas ---------------------------------------------

FIT_HEADER = ["collective", "group", "elements", "seconds"]
PROFILE_HEADER = ["collective", "group", "alpha", "beta", "r_squared"]


class CsvFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def read_fit_samples(text: str) -> dict[tuple[str, str], list[tuple[float, float]]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError("empty file") from None
    if [h.strip() for h in header] != FIT_HEADER:
        raise CsvFormatError(f"expected header {','.join(FIT_HEADER)}", line=1)
    samples: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4:
            raise CsvFormatError(f"expected 4 fields, got {len(row)}", line=lineno)
        collective, group = row[0].strip(), row[1].strip()
        try:
            elements = float(row[2])
            seconds = float(row[3])
        except ValueError:
            raise CsvFormatError(f"non-numeric field in {row!r}", line=lineno) from None
        samples.setdefault((collective, group), []).append((elements, seconds))
    return samples


def fit_profile(samples: dict[tuple[str, str], list[tuple[float, float]]]) -> CostProfile:
    profile = CostProfile()
    for (collective, group), pairs in sorted(samples.items()):
        profile.add(fit_alpha_beta(pairs, collective=collective, group=group))
    return profile


def write_profile_csv(profile: CostProfile) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(PROFILE_HEADER)
    for key in sorted(profile.entries):
        ab = profile.entries[key]
        writer.writerow([ab.collective, ab.group, f"{ab.alpha:.12g}",
                         f"{ab.beta:.12g}", f"{ab.r_squared:.12g}"])
    return out.getvalue()


def read_profile_csv(text: str) -> CostProfile:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError("empty file") from None
    if [h.strip() for h in header] != PROFILE_HEADER:
        raise CsvFormatError(f"expected header {','.join(PROFILE_HEADER)}", line=1)
    profile = CostProfile()
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 5:
            raise CsvFormatError(f"expected 5 fields, got {len(row)}", line=lineno)
        try:
            profile.add(AlphaBeta(alpha=float(row[2]), beta=float(row[3]),
                                  collective=row[0].strip(), group=row[1].strip(),
                                  r_squared=float(row[4])))
        except ValueError as exc:
            raise CsvFormatError(str(exc), line=lineno) from None
    return profile


def load_profile(path: str | Path) -> CostProfile:
    return read_profile_csv(Path(path).read_text())
