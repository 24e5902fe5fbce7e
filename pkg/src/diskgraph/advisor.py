"""Configuration advisor: memory-footprint model and technique selection.

All byte accounting uses exact integer arithmetic (python ints), so the
model is overflow-safe for arbitrarily large collections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .layout import bpf

# decision thresholds; the model text says "typically", these are the
# hard edges this artifact commits to
COUPLED_MAX_DIM = 1500
DYNAMIC_CACHE_MAX_DIM = 900
IO_DRIVEN_BPF_LIMIT = 2.0
IN_PLACE_MIN_RW_RATIO = 1.0


@dataclass
class AdvisorInput:
    """Workload and hardware description.

    n: vector count; d: dimension; s_d: element byte size; s_i: id byte
    size (uint32 by default); r: max out-degree; k: pq code bytes per
    chunk; n_pq: pq chunk count; n_hot: statically cached entries;
    m_dynamic: dynamic cache bytes; c: working-memory constant;
    budget: memory budget in bytes; page_size: disk page bytes;
    read_write_ratio: searches per update (1.0 = balanced).
    """

    n: int
    d: int
    s_d: int = 4
    s_i: int = 4
    r: int = 48
    k: int = 1
    n_pq: int = 16
    n_hot: int = 0
    m_dynamic: int = 0
    c: int = 0
    budget: int = 0
    page_size: int = 4096
    read_write_ratio: float = 1.0

    def __post_init__(self):
        for name in ("n", "d", "s_d", "s_i", "r", "k", "n_pq", "n_hot", "m_dynamic", "c",
                     "budget", "page_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def per_node_bytes(inp: AdvisorInput) -> int:
    return inp.d * inp.s_d + (1 + inp.r) * inp.s_i


def memory_model(inp: AdvisorInput) -> dict[str, int]:
    """Footprint of navigation, pq, and cache layers plus the working constant.

    M_nav = (d*s_d + (1+R)*s_i) * N
    M_pq  = d*s_d * 2^(8k) + n_pq * k * N
    M_cache = M_dynamic + N_hot * (d*s_d + (1+R)*s_i)
    M_total = M_nav + M_pq + M_cache + C
    """
    node = per_node_bytes(inp)
    m_nav = node * inp.n
    m_pq = inp.d * inp.s_d * (1 << (8 * inp.k)) + inp.n_pq * inp.k * inp.n
    m_cache = inp.m_dynamic + inp.n_hot * node
    return {
        "M_nav": m_nav,
        "M_pq": m_pq,
        "M_cache": m_cache,
        "M_total": m_nav + m_pq + m_cache + inp.c,
    }


def memory_model_nav_sampled(inp: AdvisorInput, rate: float) -> dict[str, int]:
    """Variant with the navigation term scaled to the sampled entry graph.

    Not part of the printed model; reported alongside it for operators who
    sample the navigation structure at rate ``rate``.
    """
    if not (0 < rate <= 1):
        raise ValueError("sampling rate must be in (0, 1]")
    full = memory_model(inp)
    m_nav = per_node_bytes(inp) * math.ceil(rate * inp.n)
    return {
        "M_nav": m_nav,
        "M_pq": full["M_pq"],
        "M_cache": full["M_cache"],
        "M_total": m_nav + full["M_pq"] + full["M_cache"] + inp.c,
    }


@dataclass
class Recommendation:
    """One choice per design axis plus the evaluated model numbers."""

    storage: str
    global_layout: str
    local_layout: str
    caching: str
    execution: str
    update: str
    m_nav: int
    m_pq: int
    m_cache: int
    m_total: int
    bpf: float
    m_total_nav_sampled: int | None = None
    nav_sample_rate: float | None = None

    def as_dict(self) -> dict:
        out = {
            "storage": self.storage,
            "global_layout": self.global_layout,
            "local_layout": self.local_layout,
            "caching": self.caching,
            "execution": self.execution,
            "update": self.update,
            "M_nav": self.m_nav,
            "M_pq": self.m_pq,
            "M_cache": self.m_cache,
            "M_total": self.m_total,
            "BPF": self.bpf,
        }
        if self.m_total_nav_sampled is not None:
            out["M_total_nav_sampled(non-paper)"] = self.m_total_nav_sampled
            out["nav_sample_rate"] = self.nav_sample_rate
        return out


def recommend(inp: AdvisorInput, nav_sample_rate: float | None = None) -> Recommendation:
    """Walk the decision tree.

    storage: major-in-disk iff M_total <= budget. global layout: coupled
    iff d <= 1500. local layout: heuristic baseline. caching: dynamic or
    hybrid iff d <= 900, else static graph-prioritized. execution:
    io-driven iff BPF < 2, else compute-driven. update: in-place iff
    read_write_ratio >= 1.
    """
    model = memory_model(inp)
    packing = bpf(inp.page_size, inp.d, inp.s_d, inp.r, inp.s_i)
    sampled = None
    if nav_sample_rate is not None:
        sampled = memory_model_nav_sampled(inp, nav_sample_rate)
    return Recommendation(
        storage="major_in_disk" if model["M_total"] <= inp.budget else "all_in_disk",
        global_layout="coupled" if inp.d <= COUPLED_MAX_DIM else "decoupled",
        local_layout="heuristic",
        caching="dynamic_or_hybrid" if inp.d <= DYNAMIC_CACHE_MAX_DIM else "static_graph_prioritized",
        execution="io_driven" if packing < IO_DRIVEN_BPF_LIMIT else "compute_driven",
        update="in_place" if inp.read_write_ratio >= IN_PLACE_MIN_RW_RATIO else "out_of_place",
        m_nav=model["M_nav"],
        m_pq=model["M_pq"],
        m_cache=model["M_cache"],
        m_total=model["M_total"],
        bpf=packing,
        m_total_nav_sampled=None if sampled is None else sampled["M_total"],
        nav_sample_rate=nav_sample_rate,
    )
