"""Analytic communication and compute cost model.

Volumes follow the per-GPU all-to-all send model T*K*h*w*(EP-1)/EP; the
hierarchical dispatcher model splits traffic into a deduplicated inter-node
leg (each token crosses to a destination node at most once) and an
intra-node fan-out leg. Timing uses an alpha-beta (latency + volume /
bandwidth) model; `calibrate` fits per-(kind, platform) alpha-beta pairs
from a measured latency table by nonnegative least squares.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ClusterSpec, ModelSpec, TrainingJobSpec

COMM_KINDS = ("dispatch", "combine", "tp_collective", "pp_p2p", "dp_reduce")
TIERS = ("intra_domain", "inter_node")


@dataclass(frozen=True)
class CommEvent:
    kind: str
    volume: float  # bytes
    tier: str = "intra_domain"
    count: int = 1

    def __post_init__(self):
        if self.kind not in COMM_KINDS:
            raise ValueError(f"unknown comm kind {self.kind!r}")
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if self.volume < 0:
            raise ValueError("volume must be >= 0")


@dataclass
class LatencyTable:
    """Measured rows of (kind, ep, platform, microseconds)."""

    rows: list[tuple[str, int, str, float]] = field(default_factory=list)

    def add(self, kind: str, ep: int, platform: str, us: float) -> None:
        if us <= 0:
            raise ValueError("measured latency must be > 0")
        self.rows.append((kind, ep, platform, us))

    @classmethod
    def from_csv(cls, text: str) -> "LatencyTable":
        table = cls()
        for i, line in enumerate(text.strip().splitlines()):
            parts = [p.strip() for p in line.split(",")]
            if i == 0 and parts[0].lower() == "kind":
                continue
            kind, ep, platform, us = parts
            table.add(kind, int(ep), platform, float(us))
        return table


def a2a_send_volume(tokens: int, top_k: int, hidden: int, ep: int, width: float = 2.0) -> float:
    """Per-GPU send bytes of one all-to-all: T*K*h*w*(EP-1)/EP.

    A full dispatch+combine cycle doubles it; the volume saturates at
    T*K*h*w as EP grows.
    """
    if ep < 1:
        raise ValueError("ep must be >= 1")
    return tokens * top_k * hidden * width * (ep - 1) / ep


def dispatch_ops_per_forward(model: ModelSpec) -> int:
    """Dispatch+combine operations per forward pass: 2 per MoE layer.

    The backward pass doubles the count again.
    """
    return 2 * model.num_moe_layers


def hierarchical_dispatch_volumes(
    tokens: int,
    top_k: int,
    hidden: int,
    ep: int,
    domain_size: int,
    width: float = 2.0,
    dest_ranks: list[list[int]] | None = None,
) -> tuple[float, float]:
    """(inter_node_bytes, intra_domain_bytes) sent per GPU by the
    hierarchical dispatcher.

    The inter-node leg first moves each token to the same-local-index GPU of
    every destination node that hosts at least one of its experts (one
    crossing per token per remote node); the intra leg then fans out to the
    final ranks within each node. With `dest_ranks` (per-token destination
    EP-rank lists) the count is exact for that routing instance; without it,
    the expected volume under uniform routing over evenly spread experts is
    returned.
    """
    if domain_size < 1 or (ep > domain_size and ep % domain_size != 0):
        raise ValueError(f"domain_size {domain_size} does not factor EP {ep}")
    nodes = max(1, ep // domain_size) if ep > domain_size else 1
    if nodes == 1:
        if dest_ranks is None:
            naive = a2a_send_volume(tokens, top_k, hidden, ep, width)
            return (0.0, naive)
        inter, intra = _count_legs(dest_ranks, ep, domain_size)
        return (0.0, intra * hidden * width)

    if dest_ranks is not None:
        inter, intra = _count_legs(dest_ranks, ep, domain_size)
        return (inter * hidden * width, intra * hidden * width)

    # Expected volumes for uniform routing (destinations modeled as a
    # uniform K-subset of the EP ranks): a token crosses to a remote node
    # iff any of its K ranks sits there; an intra hop is needed for every
    # hit rank that is not a landing rank (one landing per touched node,
    # same local index as the source).
    p_node = 1.0 - _miss_prob(top_k, ep, domain_size)
    inter_tokens = tokens * (nodes - 1) * p_node
    p_rank = 1.0 - _miss_prob(top_k, ep, 1)  # = K/EP
    intra_tokens = tokens * (ep - nodes) * p_rank
    return (inter_tokens * hidden * width, intra_tokens * hidden * width)


def _miss_prob(k: int, ep: int, group: int) -> float:
    """P(no expert of a uniform K-subset of EP rank-slots lands in a given
    group of `group` ranks), experts spread evenly over EP ranks."""
    if k >= ep - group + 1 and group > 0 and k > ep - group:
        return 0.0
    num = 1.0
    for i in range(k):
        num *= (ep - group - i) / (ep - i)
    return num


def _count_legs(dest_ranks: list[list[int]], ep: int, domain_size: int) -> tuple[int, int]:
    """Exact (inter, intra) token-crossing counts for a routing instance.

    Every token originates on rank 0's node by convention (per-GPU send
    accounting); `dest_ranks[t]` lists destination EP ranks of token t.
    """
    src_node = 0
    inter = 0
    intra = 0
    src_rank = 0
    for dests in dest_ranks:
        unique_ranks = sorted(set(dests))
        nodes_hit = sorted({r // domain_size for r in unique_ranks})
        for n in nodes_hit:
            if n != src_node:
                inter += 1
        for r in unique_ranks:
            landing = src_rank if r // domain_size == src_node else (
                r // domain_size
            ) * domain_size + src_rank % domain_size
            if r != landing:
                intra += 1
    return inter, intra


def naive_inter_volume(dest_ranks: list[list[int]], domain_size: int,
                       hidden: int, width: float = 2.0) -> float:
    """Inter-node bytes of the plain all-to-all: one copy per (token, expert)
    whose destination rank sits on another node (duplicates not removed)."""
    src_node = 0
    crossings = sum(
        1 for dests in dest_ranks for r in dests if r // domain_size != src_node
    )
    return crossings * hidden * width


@dataclass(frozen=True)
class AlphaBeta:
    alpha: float  # seconds per message
    beta: float  # bytes per second


def calibrate(table: LatencyTable, volume_model=None) -> dict[tuple[str, str], AlphaBeta]:
    """Fit alpha-beta pairs per (kind, platform) by least squares; alpha is
    clamped nonnegative (refit through the origin when the free fit goes
    negative). The default volume model is the common benchmark shape:
    T=4096, K=8, h=7168, BF16.
    """
    if volume_model is None:
        volume_model = lambda ep: a2a_send_volume(4096, 8, 7168, ep, 2.0)
    groups: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for kind, ep, platform, us in table.rows:
        groups.setdefault((kind, platform), []).append((volume_model(ep), us * 1e-6))
    out = {}
    for key, pts in groups.items():
        v = np.array([p[0] for p in pts])
        t = np.array([p[1] for p in pts])
        if len(pts) == 1:
            out[key] = AlphaBeta(0.0, float(v[0] / t[0]) if t[0] > 0 else math.inf)
            continue
        A = np.stack([np.ones_like(v), v], axis=1)
        (alpha, inv_beta), *_ = np.linalg.lstsq(A, t, rcond=None)
        if alpha < 0 or inv_beta <= 0:
            inv_beta = float(np.dot(v, t) / np.dot(v, v))
            alpha = 0.0
        out[key] = AlphaBeta(float(alpha), float(1.0 / inv_beta))
    return out


def comm_time(event: CommEvent, cluster: ClusterSpec,
              calibration: AlphaBeta | None = None) -> float:
    """Alpha-beta time of one collective: latency + volume / bandwidth."""
    if calibration is not None:
        return calibration.alpha + event.volume / calibration.beta
    bw = cluster.intra_domain_bw if event.tier == "intra_domain" else cluster.inter_node_bw
    return cluster.per_message_latency + event.volume / bw


def overlap_exposed_comm(pairs: list[tuple[float, ...]], wd_split: bool = False) -> float:
    """Exposed seconds of a merged FWD-BWD overlap chain.

    Each pair is (comm, compute_window[, wgrad_slice]); wd_split enlarges
    the window by the weight-gradient slice. The first and last pairs are
    fully exposed: the first FWD and last BWD stay on the critical path.
    """
    exposed = 0.0
    n = len(pairs)
    for i, pair in enumerate(pairs):
        comm, window = pair[0], pair[1]
        wgrad = pair[2] if len(pair) > 2 else 0.0
        if comm < 0 or window < 0 or wgrad < 0:
            raise ValueError("durations must be nonnegative")
        if i == 0 or i == n - 1:
            exposed += comm
            continue
        if wd_split:
            window += wgrad
        exposed += max(0.0, comm - window)
    return exposed


def flops_share(model: ModelSpec, seq_len: int) -> dict[str, float]:
    """Fractions of forward FLOPs in {sdpa, linear_attn, moe} at the given
    sequence length. SDPA scales O(S^2) (causal), linears O(S)."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    a = model.attention
    # Causal SDPA: QK^T and AV, 2*S^2*d each per head, halved by masking.
    sdpa_per_layer = seq_len**2 * a.num_heads * (a.qk_head_dim + a.value_head_dim)
    sdpa = model.num_layers * sdpa_per_layer
    attn_linear_params = model.num_layers * a.params_per_layer(model.hidden_dim)
    active = model.derived_params_active()
    other_params = max(0, active - attn_linear_params)
    linear_attn = 2.0 * seq_len * attn_linear_params
    moe = 2.0 * seq_len * other_params
    total = sdpa + linear_attn + moe
    return {
        "sdpa": sdpa / total,
        "linear_attn": linear_attn / total,
        "moe": moe / total,
    }


@dataclass
class Recommendation:
    guideline: str
    severity: str  # "warn" | "info"
    message: str

    def as_dict(self) -> dict:
        return {"guideline": self.guideline, "severity": self.severity, "message": self.message}


def advisor(spec: TrainingJobSpec) -> list[Recommendation]:
    """Parallelism guideline hits, in fixed G1..G5 order."""
    p, c, m = spec.parallel, spec.cluster, spec.model
    recs: list[Recommendation] = []
    if p.dp == 1 and p.world_size >= 8:
        recs.append(Recommendation(
            "G1", "info",
            "all ranks consumed by model parallelism; keep TP/EP/PP/CP as small "
            "as memory allows and grow DP with the distributed optimizer",
        ))
    if p.ep * p.etp > c.nvlink_domain_size:
        recs.append(Recommendation(
            "G2", "warn",
            f"EP*ETP = {p.ep * p.etp} exceeds the NVLink domain "
            f"({c.nvlink_domain_size}); expert all-to-all will cross nodes where "
            "bandwidth drops by an order of magnitude",
        ))
    if p.tp * p.cp > c.nvlink_domain_size:
        recs.append(Recommendation(
            "G2", "warn",
            f"TP*CP = {p.tp * p.cp} exceeds the NVLink domain ({c.nvlink_domain_size})",
        ))
    if c.num_gpus > c.nvlink_domain_size and p.pp == 1:
        recs.append(Recommendation(
            "G3", "info",
            "multi-node cluster with PP=1: prefer pipeline parallelism for "
            "cross-node scaling and keep EP/TP inside the NVLink domain",
        ))
    if p.etp > 1:
        recs.append(Recommendation(
            "G4", "info",
            f"ETP={p.etp} shards already-small expert GEMMs; prefer a higher EP "
            "with ETP=1 (EP8xTP1 outperforms EP4xTP2 on Mixtral-class models)",
        ))
    if p.cp > 1 and p.seq_len < 8192:
        severity = "warn" if p.seq_len < 4096 else "info"
        recs.append(Recommendation(
            "G5", severity,
            f"CP={p.cp} at seq_len={p.seq_len}: context parallelism below 8K "
            "tokens usually costs more than it saves (avoid below 4K)",
        ))
    return recs


def cost_report(spec: TrainingJobSpec,
                calibration: dict[tuple[str, str], AlphaBeta] | None = None,
                sm_carveout_penalty: float = 0.0) -> dict:
    """Per-GPU communication/compute accounting for one micro-batch."""
    m, p, c = spec.model, spec.parallel, spec.cluster
    tokens = p.tokens_per_microbatch
    width = 2.0 if p.precision_recipe == "bf16" else 1.0
    dispatch_dim = m.latent_dim or m.hidden_dim
    vol = a2a_send_volume(tokens, m.top_k, dispatch_dim, p.ep, width)
    tier = "intra_domain" if p.ep * p.etp <= c.nvlink_domain_size else "inter_node"
    domain = min(c.nvlink_domain_size, p.ep)
    if p.ep % domain != 0:
        domain = p.ep  # irregular factorization: treat as one domain
    inter, intra = hierarchical_dispatch_volumes(
        tokens, m.top_k, dispatch_dim, p.ep, domain, width,
    )
    dispatch = CommEvent("dispatch", vol, tier)
    t_dispatch = comm_time(dispatch, c, (calibration or {}).get(("dispatch", tier)))
    ops_fwd = dispatch_ops_per_forward(m)
    shares = flops_share(m, p.seq_len)
    from .model import active_flops_per_token

    # 6*N_active per token over the global micro-batch, spread over the world.
    flops_mb = (
        active_flops_per_token(m)
        * p.microbatch_size * p.seq_len * p.dp / p.world_size
    )
    # Exposed-communication estimate for the merged FWD-BWD overlap: one
    # slot per micro-batch, each hiding a dispatch+combine pair behind the
    # per-layer compute window (needs a peak-FLOPs figure to be meaningful).
    comm_per_slot = 2 * t_dispatch
    exposed_fraction = 1.0
    if spec.overlap_moe_comm and p.num_microbatches >= 1:
        if c.gpu_peak_flops > 0 and m.num_moe_layers > 0:
            window = flops_mb / c.gpu_peak_flops / m.num_moe_layers
        else:
            window = float("inf")  # optimistic: only endpoints exposed
        pairs = [(comm_per_slot, window, 0.3 * window)] * max(2, p.num_microbatches)
        exposed = overlap_exposed_comm(pairs, wd_split=spec.wd_split)
        exposed_fraction = exposed / (comm_per_slot * len(pairs))
    return {
        "tokens_per_microbatch": tokens,
        "a2a_send_volume_bytes": vol,
        "a2a_tier": tier,
        "hierarchical_inter_node_bytes": inter,
        "hierarchical_intra_domain_bytes": intra,
        "dispatch_time_s": t_dispatch,
        "dispatch_combine_ops_forward": ops_fwd,
        "dispatch_combine_ops_fwd_bwd": 2 * ops_fwd,
        "comm_time_forward_s": ops_fwd * t_dispatch,
        "exposed_comm_fraction": exposed_fraction,
        "flops_share": shares,
        "active_flops_per_microbatch_per_gpu": flops_mb,
        # Which parameter count the 6*N rule used: the given params_active
        # when present (MTP and embedding-lookup excluded from the derived
        # count; MTP weights still sit in params_total).
        "flops_basis": "params_active" if m.params_active is not None
        else "derived_params_active",
        "latent_compression": (m.hidden_dim / m.latent_dim) if m.latent_dim else 1.0,
        "sm_carveout_penalty": sm_carveout_penalty,
        "advisor": [r.as_dict() for r in advisor(spec)],
    }
