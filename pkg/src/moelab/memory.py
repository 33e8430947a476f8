"""Per-GPU byte accounting for weights, optimizer state, and activations.

The saved-tensor census below is this artifact's fixed inventory: which
tensors each module retains for backward, at what width. Components are
reported as the per-rank maximum (the binding constraint per component);
the activation inventory and lever deltas come from the activation-peak
rank. The in-flight micro-batch multiplier is the plain 1F1B warmup depth
(PP - rank) and is reported alongside the estimate, since activation
peaks are schedule-dependent and the multiplier is an assumption.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .layout import PipelineLayout, parse_layout, uniform_layout
from .model import (
    LEVER_VOCABULARY,
    ModelSpec,
    ParallelConfig,
    PrecisionRecipe,
    TrainingJobSpec,
)
from .schedule import peak_inflight_microbatches

BF16 = 2.0
FP32 = 4.0
# Fused activation kernels stage their output in the cast buffer consumed by
# the following GEMM; the census charges one byte per element for them.
ACT_STAGED_WIDTH = 1.0


@dataclass(frozen=True)
class ActivationEntry:
    """One saved tensor per layer per in-flight micro-batch."""

    name: str
    elements: int
    width: float
    recompute_module: str = ""  # lever that recomputes (removes) this entry
    offload_module: str = ""  # lever that moves this entry to host
    fp8_eligible: bool = False  # linear-layer input: rescaled by precision
    lifetime: str = "saved"  # "saved" scales with in-flight depth

    @property
    def bytes(self) -> float:
        return self.elements * self.width


@dataclass
class MemoryReport:
    weights_and_grads: float
    master_weights_and_optimizer: float
    activations: float
    deltas: dict[str, float] = field(default_factory=dict)
    inventory: dict[str, float] = field(default_factory=dict)
    assumptions: dict = field(default_factory=dict)
    per_rank: list[dict] = field(default_factory=list)
    # Internal state for lever application: per-rank saved-entry tables.
    _rank_entries: list[list[ActivationEntry]] = field(default_factory=list, repr=False)
    _rank_inflight: list[int] = field(default_factory=list, repr=False)

    @property
    def total(self) -> float:
        return self.weights_and_grads + self.master_weights_and_optimizer + self.activations

    def as_dict(self) -> dict:
        return {
            "weights_and_grads": self.weights_and_grads,
            "master_weights_and_optimizer": self.master_weights_and_optimizer,
            "activations": self.activations,
            "total": self.total,
            "deltas": self.deltas,
            "inventory": self.inventory,
            "assumptions": self.assumptions,
            "per_rank": self.per_rank,
        }


def optimizer_bytes_per_param(dp_shards: int, moment_width: int = 4) -> float:
    """Distributed-optimizer bytes per parameter: 6 + (4 + 2*w)/d.

    The unsharded 6 is the BF16 model weight plus FP32 main gradient; the
    sharded remainder is the FP32 master weight plus two moments of width w.
    """
    if dp_shards < 1:
        raise ValueError("dp_shards must be >= 1")
    if moment_width not in (1, 2, 4):
        raise ValueError("moment_width must be 1 (FP8), 2 (BF16) or 4 (FP32)")
    return 6.0 + (4.0 + 2.0 * moment_width) / dp_shards


def offload_peak(
    layer_input: float, layer_intermediate: float, num_layers: int, mode: str
) -> float:
    """Peak activation bytes under full recompute vs host offloading."""
    if min(layer_input, layer_intermediate, num_layers) < 0:
        raise ValueError("arguments must be nonnegative")
    if mode == "full_recompute":
        return num_layers * layer_input + layer_intermediate
    if mode == "offload":
        return layer_input + layer_intermediate
    raise ValueError(f"unknown mode {mode!r}")


# -- census -------------------------------------------------------------------

def _attention_entries(model: ModelSpec, tokens: int) -> list[ActivationEntry]:
    a = model.attention
    h = model.hidden_dim
    entries = [
        ActivationEntry("ln1_input", tokens * h, BF16),
        ActivationEntry("attn_qkv_input", tokens * h, BF16,
                        recompute_module="layernorm", offload_module="attention",
                        fp8_eligible=True),
    ]
    if a.kind == "mla":
        entries += [
            ActivationEntry("q_norm_input", tokens * a.q_lora_rank, BF16),
            ActivationEntry("q_up_input", tokens * a.q_lora_rank, BF16,
                            recompute_module="layernorm", fp8_eligible=True),
            ActivationEntry("kv_norm_input", tokens * a.kv_lora_rank, BF16),
            ActivationEntry("kv_up_input", tokens * a.kv_lora_rank, BF16,
                            recompute_module="layernorm", fp8_eligible=True),
        ]
        qkv_elems = tokens * a.num_heads * (2 * a.qk_head_dim + a.v_head_dim)
        up_proj_module = "mla_up_proj"
    else:
        kvh = a.num_kv_heads or a.num_heads
        qkv_elems = tokens * (a.num_heads + 2 * kvh) * a.head_dim
        up_proj_module = ""
    entries += [
        ActivationEntry("qkv_expanded", qkv_elems, BF16, recompute_module=up_proj_module),
        ActivationEntry("sdpa_output", tokens * a.num_heads * a.value_head_dim, BF16,
                        recompute_module="attention", offload_module="attention"),
        ActivationEntry("ln2_input", tokens * h, BF16),
    ]
    return entries


def _dense_mlp_entries(model: ModelSpec, tokens: int, tp: int) -> list[ActivationEntry]:
    width = model.dense_mlp_dim
    fc1_mult = 2 if model.gated_mlp else 1
    return [
        ActivationEntry("mlp_input", tokens * model.hidden_dim, BF16,
                        recompute_module="layernorm", offload_module="mlp",
                        fp8_eligible=True),
        ActivationEntry("mlp_fc1_output", tokens * fc1_mult * width // tp, BF16,
                        recompute_module="mlp", offload_module="mlp"),
        ActivationEntry("mlp_act_output", tokens * width // tp, ACT_STAGED_WIDTH,
                        recompute_module="mlp"),
    ]


def _moe_entries(model: ModelSpec, tokens: int, expert_rows: int, tp: int, etp: int) -> list[ActivationEntry]:
    h = model.hidden_dim
    dispatch_dim = model.latent_dim or h
    m = model.ffn_hidden_dim
    fc1_mult = 2 if model.gated_mlp else 1
    entries = [
        ActivationEntry("moe_block_input", tokens * h, BF16, recompute_module="layernorm"),
        ActivationEntry("expert_fc1_input", expert_rows * dispatch_dim, BF16,
                        recompute_module="expert_fc1", offload_module="expert_fc1",
                        fp8_eligible=True),
        ActivationEntry("expert_fc1_output", expert_rows * fc1_mult * m // etp, BF16,
                        recompute_module="mlp", offload_module="moe_act"),
        ActivationEntry("moe_act_output", expert_rows * m // etp, ACT_STAGED_WIDTH,
                        recompute_module="moe_act"),
        # Expert outputs retained for the router-weight backward; eliminated
        # by memory-efficient permutation, which absorbs the routing weight
        # before fc2 so the pre-activation suffices.
        ActivationEntry("expert_outputs", expert_rows * dispatch_dim, BF16),
    ]
    if model.num_shared_experts:
        ms = model.shared_ffn_dim * model.num_shared_experts
        entries += [
            ActivationEntry("shared_fc1_output", tokens * fc1_mult * ms // tp, BF16,
                            recompute_module="mlp"),
            ActivationEntry("shared_act_output", tokens * ms // tp, ACT_STAGED_WIDTH,
                            recompute_module="moe_act"),
        ]
    return entries


def layer_entries(model: ModelSpec, kind: str, tokens: int, expert_rows: int,
                  tp: int, etp: int) -> list[ActivationEntry]:
    """Census for one layer of the given kind ('dense' | 'moe')."""
    entries = _attention_entries(model, tokens)
    if kind == "dense":
        entries += _dense_mlp_entries(model, tokens, tp)
    else:
        entries += _moe_entries(model, tokens, expert_rows, tp, etp)
    return entries


def _symbol_entries(model: ModelSpec, symbol: str, layer_is_dense: bool,
                    tokens: int, expert_rows: int, tp: int, etp: int) -> list[ActivationEntry]:
    if symbol == "t":
        return layer_entries(model, "dense" if layer_is_dense else "moe",
                             tokens, expert_rows, tp, etp)
    if symbol == "E":
        return [ActivationEntry("embedding_output", tokens * model.hidden_dim, BF16)]
    if symbol == "m":
        kind = "dense" if model.num_moe_layers == 0 else "moe"
        return [ActivationEntry("mtp_proj_input", tokens * 2 * model.hidden_dim, BF16)] + \
            layer_entries(model, kind, tokens, expert_rows, tp, etp)
    if symbol == "L":
        return [
            ActivationEntry("lm_head_input", tokens * model.hidden_dim, BF16,
                            fp8_eligible=True),
            ActivationEntry("logits", tokens * model.vocab_size, FP32, lifetime="transient"),
        ]
    raise ValueError(f"unknown layout symbol {symbol!r}")


def resolve_layout(model: ModelSpec, parallel: ParallelConfig) -> PipelineLayout:
    if parallel.pipeline_layout:
        layout = parse_layout(parallel.pipeline_layout)
        return layout.bind(parallel.pp, parallel.vpp, model.num_layers)
    return uniform_layout(
        model.num_layers, parallel.pp, parallel.vpp,
        has_mtp=model.has_mtp,
        has_embedding=model.vocab_size > 0,
        has_loss=model.vocab_size > 0,
    )


def _rank_param_counts(model: ModelSpec, parallel: ParallelConfig,
                       layout: PipelineLayout) -> list[tuple[float, float]]:
    """(dense_params, expert_params) held by each PP rank, after sharding."""
    p = parallel
    out = []
    # Global layer index of each 't' symbol decides dense vs MoE.
    stage_layers: list[list[int]] = []
    next_layer = 0
    for stage in layout.stages:
        ids = []
        for sym in stage:
            if sym == "t":
                ids.append(next_layer)
                next_layer += 1
        stage_layers.append(ids)
    for rank in range(p.pp):
        dense_params = 0.0
        expert_params = 0.0
        for s in layout.stages_of_rank(rank):
            for sym in layout.stages[s]:
                if sym == "E":
                    dense_params += model.embedding_params()
                elif sym == "L":
                    dense_params += model.embedding_params()
                elif sym == "m":
                    ne, ex = model.mtp_params()
                    dense_params += ne
                    expert_params += ex
            for layer_id in stage_layers[s]:
                if layer_id < model.num_dense_prefix_layers:
                    dense_params += model.dense_layer_params()
                else:
                    dense_params += model.moe_layer_nonexpert_params()
                    expert_params += model.moe_layer_expert_params()
        dense_params /= p.tp
        expert_params /= p.ep * p.etp
        out.append((dense_params, expert_params))
    return out


def _rank_activation_entries(model: ModelSpec, parallel: ParallelConfig,
                             layout: PipelineLayout,
                             imbalance: float) -> list[list[ActivationEntry]]:
    p = parallel
    tokens = p.tokens_per_microbatch // p.tp
    expert_rows = int(
        p.microbatch_size * p.seq_len * p.dp * model.top_k
        / (p.ep * p.edp_effective) * imbalance
    )
    out = []
    for rank in range(p.pp):
        entries: list[ActivationEntry] = []
        for s in layout.stages_of_rank(rank):
            dense_seen = sum(
                layout.stages[t].count("t") for t in range(s)
            )
            for sym in layout.stages[s]:
                is_dense = sym == "t" and dense_seen < model.num_dense_prefix_layers
                if sym == "t":
                    dense_seen += 1
                entries.extend(
                    _symbol_entries(model, sym, is_dense, tokens, expert_rows, p.tp, p.etp)
                )
        out.append(entries)
    return out


def _assemble(report: MemoryReport) -> MemoryReport:
    """Recompute activation component/inventory from the entry tables."""
    act_per_rank = []
    for entries, inflight in zip(report._rank_entries, report._rank_inflight):
        total = sum(
            e.bytes * (inflight if e.lifetime == "saved" else 1) for e in entries
        )
        act_per_rank.append(total)
    peak_rank = max(range(len(act_per_rank)), key=lambda r: act_per_rank[r])
    inventory: dict[str, float] = {}
    inflight = report._rank_inflight[peak_rank]
    for e in report._rank_entries[peak_rank]:
        mult = inflight if e.lifetime == "saved" else 1
        inventory[e.name] = inventory.get(e.name, 0.0) + e.bytes * mult
    report.activations = max(act_per_rank)
    report.inventory = inventory
    report.assumptions["activation_peak_rank"] = peak_rank
    report.assumptions["inflight_microbatches"] = report._rank_inflight
    for row, act in zip(report.per_rank, act_per_rank):
        row["activations"] = act
        row["total"] = row["weights_and_grads"] + row["master_weights_and_optimizer"] + act
    return report


def estimate(spec: TrainingJobSpec) -> MemoryReport:
    """Full per-GPU memory estimate for a job spec.

    Components are per-rank maxima; spec-level toggles (precision recipe,
    recompute/offload modules, memory-efficient permutation) are applied on
    top of the BF16 baseline census, each recorded as a delta.
    """
    model, parallel = spec.model, spec.parallel
    recipe = PrecisionRecipe(parallel.precision_recipe)
    layout = resolve_layout(model, parallel)

    params = _rank_param_counts(model, parallel, layout)
    moment_w = spec.optimizer_moment_bytes
    per_rank = []
    for rank, (dense_p, expert_p) in enumerate(params):
        wg = 4.0 * (dense_p + expert_p)  # BF16 weight + BF16 gradient
        opt = (
            dense_p * (4.0 + 2.0 * moment_w) / parallel.dp
            + expert_p * (4.0 + 2.0 * moment_w) / parallel.edp_effective
        )
        per_rank.append(
            {"rank": rank, "weights_and_grads": wg, "master_weights_and_optimizer": opt}
        )

    entries = _rank_activation_entries(model, parallel, layout, spec.imbalance_factor)
    inflight = [peak_inflight_microbatches(parallel.pp, r) for r in range(parallel.pp)]

    report = MemoryReport(
        weights_and_grads=max(r["weights_and_grads"] for r in per_rank),
        master_weights_and_optimizer=max(r["master_weights_and_optimizer"] for r in per_rank),
        activations=0.0,
        assumptions={
            "precision_recipe": recipe.value,
            "imbalance_factor": spec.imbalance_factor,
            "optimizer_moment_bytes": moment_w,
            "layout": [list(s) for s in layout.stages],
        },
        per_rank=per_rank,
        _rank_entries=entries,
        _rank_inflight=inflight,
    )
    report = _assemble(report)

    if recipe != PrecisionRecipe.BF16:
        report = apply_precision(report, recipe)
    if spec.mem_efficient_permutation:
        report = apply_mem_efficient_permutation(report)
    if spec.recompute_modules:
        report = apply_recompute(report, set(spec.recompute_modules))
    if spec.offload_modules:
        report = apply_offload(report, set(spec.offload_modules))
    return report


def _transform_entries(report: MemoryReport, fn) -> tuple[MemoryReport, float]:
    new_entries = []
    for entries in report._rank_entries:
        kept = []
        for e in entries:
            out = fn(e)
            if out is not None:
                kept.append(out)
        new_entries.append(kept)
    new = MemoryReport(
        weights_and_grads=report.weights_and_grads,
        master_weights_and_optimizer=report.master_weights_and_optimizer,
        activations=report.activations,
        deltas=dict(report.deltas),
        assumptions=dict(report.assumptions),
        per_rank=[dict(r) for r in report.per_rank],
        _rank_entries=new_entries,
        _rank_inflight=list(report._rank_inflight),
    )
    before = report.activations
    new = _assemble(new)
    return new, before


def apply_recompute(report: MemoryReport, modules: set[str]) -> MemoryReport:
    """Drop the saved entries produced by each named module; the compute
    overhead note is recorded for the cost model."""
    unknown = modules - LEVER_VOCABULARY
    if unknown:
        raise ValueError(f"unknown recompute modules: {sorted(unknown)}")
    for mod in sorted(modules):
        report, before = _transform_entries(
            report, lambda e, m=mod: None if e.recompute_module == m else e
        )
        report.deltas[f"recompute:{mod}"] = before - report.activations
    recomputed = sorted(modules)
    prior = report.assumptions.get("recompute_overhead_modules", [])
    report.assumptions["recompute_overhead_modules"] = sorted(set(prior) | set(recomputed))
    return report


def apply_offload(report: MemoryReport, modules: set[str]) -> MemoryReport:
    """Move the named modules' offloadable entries to host memory."""
    unknown = modules - LEVER_VOCABULARY
    if unknown:
        raise ValueError(f"unknown offload modules: {sorted(unknown)}")
    for mod in sorted(modules):
        report, before = _transform_entries(
            report, lambda e, m=mod: None if e.offload_module == m else e
        )
        report.deltas[f"offload:{mod}"] = before - report.activations
    return report


def apply_mem_efficient_permutation(report: MemoryReport) -> MemoryReport:
    """Remove expert-output retention (the tensors saved only for the
    routing-weight backward); pre-activation entries stay."""
    report, before = _transform_entries(
        report, lambda e: None if e.name == "expert_outputs" else e
    )
    report.deltas["mem_efficient_permutation"] = before - report.activations
    return report


_PRECISION_WIDTH = {
    PrecisionRecipe.FP8_TENSOR: 1.0,
    PrecisionRecipe.FP8_BLOCK: 1.0,
    PrecisionRecipe.MXFP8: 1.0,
    # E2M1 payload plus one E4M3 block scale per 16 elements.
    PrecisionRecipe.NVFP4: 0.5 + 1.0 / 16,
}


def apply_precision(report: MemoryReport, recipe: PrecisionRecipe) -> MemoryReport:
    if recipe == PrecisionRecipe.BF16:
        return report
    width = _PRECISION_WIDTH[recipe]
    report, before = _transform_entries(
        report,
        lambda e: replace(e, width=width) if e.fp8_eligible and e.width > width else e,
    )
    report.deltas[f"precision:{recipe.value}"] = before - report.activations
    return report
