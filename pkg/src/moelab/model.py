"""Shared domain vocabulary: model, cluster, parallelism, and job specs.

All types are immutable pydantic models so a spec doubles as its own JSON
schema; the service and CLI serialize them verbatim. Everything downstream
(memory estimator, cost model, planners) consumes these types.
"""
from __future__ import annotations

import hashlib
import json
import math
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

# Module names that recompute/offload toggles may reference.
LEVER_VOCABULARY = frozenset(
    {"mla_up_proj", "mlp", "moe_act", "layernorm", "attention", "expert_fc1"}
)


class PrecisionRecipe(str, Enum):
    BF16 = "bf16"
    FP8_TENSOR = "fp8_tensor"
    FP8_BLOCK = "fp8_block"
    MXFP8 = "mxfp8"
    NVFP4 = "nvfp4"


class AttentionSpec(BaseModel):
    """Attention geometry; MLA carries the low-rank projection dims."""

    model_config = ConfigDict(frozen=True)

    kind: str = "standard"  # "standard" | "mla"
    num_heads: int = 1
    head_dim: int = 0
    num_kv_heads: int = 0  # GQA; 0 means same as num_heads
    # MLA-only projection dims
    q_lora_rank: int = 0
    kv_lora_rank: int = 0
    qk_nope_head_dim: int = 0
    qk_rope_head_dim: int = 0
    v_head_dim: int = 0

    @property
    def qk_head_dim(self) -> int:
        if self.kind == "mla":
            return self.qk_nope_head_dim + self.qk_rope_head_dim
        return self.head_dim

    @property
    def value_head_dim(self) -> int:
        return self.v_head_dim if self.kind == "mla" else self.head_dim

    def params_per_layer(self, hidden_dim: int) -> int:
        """Attention projection parameter count for one layer."""
        h = hidden_dim
        if self.kind == "mla":
            q_dim = self.num_heads * self.qk_head_dim
            kv_nope = self.num_heads * (self.qk_nope_head_dim + self.v_head_dim)
            o_dim = self.num_heads * self.v_head_dim
            return (
                h * self.q_lora_rank
                + self.q_lora_rank * q_dim
                + h * (self.kv_lora_rank + self.qk_rope_head_dim)
                + self.kv_lora_rank * kv_nope
                + o_dim * h
            )
        kv_heads = self.num_kv_heads or self.num_heads
        q_dim = self.num_heads * self.head_dim
        kv_dim = kv_heads * self.head_dim
        return h * q_dim + 2 * h * kv_dim + q_dim * h


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "unnamed"
    num_layers: int
    num_dense_prefix_layers: int = 0
    num_experts: int = Field(..., description="E, routed experts per MoE layer")
    top_k: int
    hidden_dim: int
    ffn_hidden_dim: int = Field(..., description="m, per-expert FFN width")
    dense_ffn_hidden_dim: int = 0  # width of dense-prefix MLPs; 0 -> ffn_hidden_dim
    shared_expert_ffn_dim: int = 0  # 0 -> ffn_hidden_dim
    num_shared_experts: int = 0
    latent_dim: Optional[int] = None
    has_mtp: bool = False
    vocab_size: int = 0  # 0 means embedding/head absent
    gated_mlp: bool = True  # SwiGLU-style fc1 producing gate+up
    attention: AttentionSpec = AttentionSpec()
    params_total: Optional[float] = None
    params_active: Optional[float] = None

    @property
    def num_moe_layers(self) -> int:
        return self.num_layers - self.num_dense_prefix_layers

    @property
    def dense_mlp_dim(self) -> int:
        return self.dense_ffn_hidden_dim or self.ffn_hidden_dim

    @property
    def shared_ffn_dim(self) -> int:
        return self.shared_expert_ffn_dim or self.ffn_hidden_dim

    # -- parameter census -------------------------------------------------
    def _mlp_params(self, width: int, io_dim: int = 0) -> int:
        io = io_dim or self.hidden_dim
        fc1 = (2 if self.gated_mlp else 1) * io * width
        return fc1 + width * io

    def expert_params_each(self) -> int:
        # Latent MoE experts live in the compressed latent space.
        return self._mlp_params(self.ffn_hidden_dim, io_dim=self.latent_dim or 0)

    def moe_layer_expert_params(self) -> int:
        return self.num_experts * self.expert_params_each()

    def moe_layer_nonexpert_params(self) -> int:
        shared = self.num_shared_experts * self._mlp_params(self.shared_ffn_dim)
        router = self.hidden_dim * self.num_experts
        latent = 2 * self.hidden_dim * self.latent_dim if self.latent_dim else 0
        return self.attention.params_per_layer(self.hidden_dim) + shared + router + latent

    def dense_layer_params(self) -> int:
        return self.attention.params_per_layer(self.hidden_dim) + self._mlp_params(self.dense_mlp_dim)

    def embedding_params(self) -> int:
        return self.vocab_size * self.hidden_dim

    def mtp_params(self) -> tuple[int, int]:
        """(non-expert, expert) parameter counts of the MTP module.

        Modeled as one extra decoder layer of the trailing kind plus a 2h->h
        merge projection and its own embedding/head copies.
        """
        if not self.has_mtp:
            return (0, 0)
        proj = 2 * self.hidden_dim * self.hidden_dim
        if self.num_moe_layers > 0:
            nonexp = self.moe_layer_nonexpert_params() + proj + 2 * self.embedding_params()
            return (nonexp, self.moe_layer_expert_params())
        return (self.dense_layer_params() + proj + 2 * self.embedding_params(), 0)

    def derived_params_total(self) -> int:
        mtp_ne, mtp_e = self.mtp_params()
        return (
            self.num_dense_prefix_layers * self.dense_layer_params()
            + self.num_moe_layers * (self.moe_layer_nonexpert_params() + self.moe_layer_expert_params())
            + 2 * self.embedding_params()  # input embedding + untied LM head
            + mtp_ne
            + mtp_e
        )

    def derived_params_active(self) -> int:
        """Per-token activated parameters: top-k experts, shared experts, all
        dense weights, and the LM head; the embedding lookup is excluded
        (no matmul FLOPs). MTP is excluded; reports label which count is used.
        """
        active_moe = (
            self.attention.params_per_layer(self.hidden_dim)
            + self.top_k * self.expert_params_each()
            + self.num_shared_experts * self._mlp_params(self.shared_ffn_dim)
            + self.hidden_dim * self.num_experts
            + (2 * self.hidden_dim * self.latent_dim if self.latent_dim else 0)
        )
        return (
            self.num_dense_prefix_layers * self.dense_layer_params()
            + self.num_moe_layers * active_moe
            + self.embedding_params()  # LM head matmul
        )


class ClusterSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_gpus: int
    gpu_memory: float = Field(..., description="bytes per GPU")
    nvlink_domain_size: int = 8
    intra_domain_bw: float = 400e9  # bytes/s
    inter_node_bw: float = 50e9  # bytes/s
    per_message_latency: float = 10e-6  # seconds
    host_link_bw: float = 60e9  # PCIe/C2C bytes/s
    gpu_peak_flops: float = 0.0  # 0 = unknown; enables time-domain estimates


class ParallelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    tp: int = 1
    cp: int = 1
    dp: int = 1
    pp: int = 1
    etp: int = 1
    ep: int = 1
    edp: int = 0  # 0 -> derived as tp*cp*dp / (etp*ep)
    vpp: int = 1
    microbatch_size: int = 1
    global_batch_size: int = 1
    seq_len: int = 1
    precision_recipe: PrecisionRecipe = PrecisionRecipe.BF16
    pipeline_layout: Optional[str] = None  # layout DSL; None -> uniform split

    @property
    def world_size(self) -> int:
        return self.tp * self.cp * self.dp * self.pp

    @property
    def edp_effective(self) -> int:
        if self.edp:
            return self.edp
        block = self.tp * self.cp * self.dp
        return max(1, block // (self.etp * self.ep))

    @property
    def moe_world_size(self) -> int:
        return self.etp * self.ep * self.edp_effective * self.pp

    @property
    def num_microbatches(self) -> int:
        return self.global_batch_size // (self.microbatch_size * self.dp)

    @property
    def tokens_per_microbatch(self) -> int:
        """Local tokens per GPU per micro-batch (sequence sharded by CP)."""
        return self.microbatch_size * self.seq_len // self.cp


class TrainingJobSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: ModelSpec
    cluster: ClusterSpec
    parallel: ParallelConfig
    recompute_modules: tuple[str, ...] = ()
    offload_modules: tuple[str, ...] = ()
    mem_efficient_permutation: bool = False
    overlap_moe_comm: bool = False
    wd_split: bool = False
    capacity_factor: Optional[float] = None  # None -> dropless
    pad_to_capacity: bool = False
    imbalance_factor: float = 1.0
    optimizer_moment_bytes: int = 4  # 4 FP32, 2 BF16, 1 FP8 moments


class Violation(BaseModel):
    field: str
    rule: str
    message: str


def validate_job(spec: TrainingJobSpec) -> list[Violation]:
    """Check every type invariant; violations are data, not failures."""
    v: list[Violation] = []
    m, c, p = spec.model, spec.cluster, spec.parallel

    def bad(field: str, rule: str, message: str) -> None:
        v.append(Violation(field=field, rule=rule, message=message))

    if not (1 <= m.top_k <= m.num_experts):
        bad("model.top_k", "top-k exceeds expert count",
            f"top_k={m.top_k} must satisfy 1 <= K <= E={m.num_experts}")
    if m.num_dense_prefix_layers > m.num_layers:
        bad("model.num_dense_prefix_layers", "dense prefix exceeds depth",
            f"{m.num_dense_prefix_layers} > num_layers={m.num_layers}")
    if m.latent_dim is not None and m.latent_dim >= m.hidden_dim:
        bad("model.latent_dim", "latent dim must compress",
            f"latent_dim={m.latent_dim} must be < hidden_dim={m.hidden_dim}")
    if m.params_total is not None and m.params_active is not None:
        if m.params_active > m.params_total:
            bad("model.params_active", "active exceeds total",
                f"{m.params_active} > {m.params_total}")
    for name, given, derived in (
        ("params_total", m.params_total, m.derived_params_total()),
        ("params_active", m.params_active, m.derived_params_active()),
    ):
        if given is not None and derived > 0:
            rel = abs(given - derived) / derived
            if rel > 0.01:
                bad(f"model.{name}", "given/derived mismatch",
                    f"given {given:.4g} vs derived {derived:.4g} ({rel:.1%} > 1%)")

    if p.world_size != p.moe_world_size:
        bad("parallel", "world-size mismatch",
            f"TP*CP*DP*PP={p.world_size} != ETP*EP*EDP*PP={p.moe_world_size}")
    # PP is a single field shared by construction, but reject configs whose
    # MoE block cannot tile the attention block (a disguised PP mismatch).
    block, moe_block = p.tp * p.cp * p.dp, p.etp * p.ep * p.edp_effective
    if block != moe_block:
        bad("parallel.pp", "PP mismatch",
            f"attention non-PP block {block} != MoE non-PP block {moe_block}; "
            "PP must remain consistent across both layouts")
    if p.global_batch_size % (p.microbatch_size * p.dp) != 0:
        bad("parallel.global_batch_size", "GBS divisibility",
            f"GBS={p.global_batch_size} not divisible by MBS*DP={p.microbatch_size * p.dp}")
    if p.seq_len % p.cp != 0:
        bad("parallel.seq_len", "CP divisibility",
            f"seq_len={p.seq_len} not divisible by CP={p.cp}")
    if p.ep > 1 and m.num_experts % p.ep != 0:
        bad("parallel.ep", "EP divisibility",
            f"num_experts={m.num_experts} not divisible by EP={p.ep}")

    if c.num_gpus != p.world_size:
        bad("cluster.num_gpus", "cluster/world mismatch",
            f"num_gpus={c.num_gpus} != world size {p.world_size}")
    if c.nvlink_domain_size != c.num_gpus and c.num_gpus % c.nvlink_domain_size != 0:
        bad("cluster.nvlink_domain_size", "domain divisibility",
            f"{c.nvlink_domain_size} does not divide num_gpus={c.num_gpus}")
    for field in ("intra_domain_bw", "inter_node_bw", "host_link_bw"):
        if getattr(c, field) <= 0:
            bad(f"cluster.{field}", "positive bandwidth", f"{field} must be > 0")

    if p.pipeline_layout:
        from .layout import LayoutArityError, LayoutSyntaxError, parse_layout

        try:
            layout = parse_layout(p.pipeline_layout)
            layout.bind(p.pp, p.vpp, m.num_layers)
        except (LayoutSyntaxError, LayoutArityError) as exc:
            bad("parallel.pipeline_layout", "layout mismatch", str(exc))

    for toggle_field in ("recompute_modules", "offload_modules"):
        for name in getattr(spec, toggle_field):
            if name not in LEVER_VOCABULARY:
                bad(f"{toggle_field}", "unknown module",
                    f"{name!r} not in {sorted(LEVER_VOCABULARY)}")
    if spec.capacity_factor is not None and spec.capacity_factor <= 0:
        bad("capacity_factor", "positive capacity", "capacity_factor must be > 0")
    return v


def active_flops_per_token(model: ModelSpec) -> float:
    """Forward+backward FLOPs per token: 6 * N_active."""
    n_active = model.params_active if model.params_active is not None else model.derived_params_active()
    return 6.0 * n_active


def canonical_json(payload) -> str:
    """Single bit-exact serialization used by CLI and service alike."""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def spec_digest(spec: TrainingJobSpec) -> str:
    return hashlib.sha256(canonical_json(spec).encode()).hexdigest()[:16]


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def log2_int(n: int) -> int:
    if not is_power_of_two(n):
        raise ValueError(f"{n} is not a power of two")
    return int(math.log2(n))
