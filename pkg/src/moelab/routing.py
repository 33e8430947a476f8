"""Reference CPU implementations of the MoE layer's math.

Everything here operates on plain numpy arrays in float64 and deterministic
summation order, so results reproduce bit-for-bit across runs. Top-k ties
break toward the lower expert index.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ceil_div


@dataclass(frozen=True)
class RoutingDecision:
    probs: np.ndarray  # T x E routing weights, zero outside selections
    routing_map: np.ndarray  # T x E bool
    counts: np.ndarray  # per-expert selected-token counts
    scores: np.ndarray  # T x E full score matrix (pre-top-k)
    dropped: np.ndarray | None = None  # T x E bool, capacity-dropped slots
    phantom_rows: np.ndarray | None = None  # per-expert zero-row padding

    @property
    def num_tokens(self) -> int:
        return self.routing_map.shape[0]

    @property
    def num_experts(self) -> int:
        return self.routing_map.shape[1]

    def effective_counts(self) -> np.ndarray:
        counts = self.routing_map.sum(axis=0)
        if self.dropped is not None:
            counts = counts - self.dropped.sum(axis=0)
        if self.phantom_rows is not None:
            counts = counts + self.phantom_rows
        return counts.astype(np.int64)


@dataclass(frozen=True)
class ExpertParams:
    """Bias-free two-layer expert MLPs, optionally gated (SwiGLU)."""

    w1: list[np.ndarray]  # per expert, m x d
    w2: list[np.ndarray]  # per expert, d x m
    gate: list[np.ndarray] | None = None  # per expert, m x d

    @property
    def num_experts(self) -> int:
        return len(self.w1)


def silu(x: np.ndarray) -> np.ndarray:
    return x * (1.0 / (1.0 + np.exp(-x)))


def expert_activation(params: ExpertParams, expert: int, x_rows: np.ndarray) -> np.ndarray:
    """phi(W1 x) rows for one expert (gated when gate weights exist)."""
    z = x_rows @ params.w1[expert].T
    if params.gate is not None:
        return silu(x_rows @ params.gate[expert].T) * z
    return silu(z)


def expert_forward(params: ExpertParams, expert: int, x_rows: np.ndarray) -> np.ndarray:
    return expert_activation(params, expert, x_rows) @ params.w2[expert].T


def route(hidden: np.ndarray, w_r: np.ndarray, score: str = "softmax",
          top_k: int = 1, selection_bias: np.ndarray | None = None) -> RoutingDecision:
    """Token-to-expert assignment: logits = hidden @ W_r, score function,
    top-k with lowest-index tie break.

    `selection_bias` (aux-free balancing) shifts logits for selection only;
    reported probabilities always come from the unbiased scores.
    """
    logits = hidden @ w_r
    if not np.all(np.isfinite(logits)):
        raise ValueError("router logits are not finite")
    t, e = logits.shape
    if top_k > e:
        raise ValueError(f"top_k={top_k} exceeds num_experts={e}")
    if score == "softmax":
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        scores = expd / expd.sum(axis=1, keepdims=True)
    elif score == "sigmoid":
        sig = 1.0 / (1.0 + np.exp(-logits))
        scores = sig / sig.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown score function {score!r}")

    select_on = scores if selection_bias is None else scores + selection_bias
    # Sort by (-score, index): stable mergesort on index-ordered columns.
    order = np.argsort(-select_on, axis=1, kind="stable")
    top = order[:, :top_k]
    routing_map = np.zeros((t, e), dtype=bool)
    rows = np.repeat(np.arange(t), top_k)
    routing_map[rows, top.ravel()] = True
    probs = np.where(routing_map, scores, 0.0)
    return RoutingDecision(
        probs=probs,
        routing_map=routing_map,
        counts=routing_map.sum(axis=0).astype(np.int64),
        scores=scores,
    )


def aux_loss(decision: RoutingDecision, coeff: float) -> float:
    """Load-balancing penalty: coeff * E * sum_i f_i * P_i with
    f_i = count_i / (T*K) and P_i the mean full score of expert i.
    Perfect balance yields exactly `coeff`."""
    t = decision.num_tokens
    k = int(decision.routing_map.sum(axis=1).max()) if t else 0
    total = decision.routing_map.sum()
    f = decision.counts / max(total, 1)
    p = decision.scores.mean(axis=0)
    return float(coeff * decision.num_experts * np.dot(f, p))


def aux_loss_grad_wr(hidden: np.ndarray, w_r: np.ndarray, top_k: int,
                     coeff: float, score: str = "softmax") -> np.ndarray:
    """Analytic d(aux_loss)/dW_r with the token-fraction term treated as
    constant (selection is piecewise constant in W_r)."""
    decision = route(hidden, w_r, score=score, top_k=top_k)
    t, e = decision.scores.shape
    f = decision.counts / max(decision.routing_map.sum(), 1)
    p = decision.scores  # T x E
    if score != "softmax":
        raise NotImplementedError("analytic gradient implemented for softmax scoring")
    # dL/dp_ti = coeff*E*f_i/T; softmax jacobian: dp_i/dl_j = p_i(d_ij - p_j)
    dl_dp = np.tile(coeff * e * f / t, (t, 1))
    inner = (dl_dp * p).sum(axis=1, keepdims=True)
    dl_dlogits = p * (dl_dp - inner)
    return hidden.T @ dl_dlogits


def auxfree_bias_update(counts: np.ndarray, bias: np.ndarray, step: float) -> np.ndarray:
    """Sign-rule update: overloaded experts (count > mean) lose `step` of
    selection bias, underloaded gain it. Biases only influence selection."""
    if step <= 0:
        raise ValueError("step must be > 0")
    mean = counts.mean()
    return bias + step * np.sign(mean - counts)


def permute(tokens: np.ndarray, decision: RoutingDecision) -> tuple[np.ndarray, np.ndarray]:
    """Group token copies contiguously by expert (stable by source index).

    Returns (permuted rows, row_id_map) where row_id_map[r] is the source
    token of permuted row r; phantom padding rows map to -1.
    """
    row_ids = []
    for e in range(decision.num_experts):
        src = np.nonzero(decision.routing_map[:, e])[0]
        if decision.dropped is not None:
            src = np.array([s for s in src if not decision.dropped[s, e]], dtype=np.int64)
        row_ids.extend(src.tolist())
        if decision.phantom_rows is not None:
            row_ids.extend([-1] * int(decision.phantom_rows[e]))
    row_id_map = np.array(row_ids, dtype=np.int64)
    width = tokens.shape[1]
    permuted = np.zeros((len(row_ids), width), dtype=tokens.dtype)
    real = row_id_map >= 0
    permuted[real] = tokens[row_id_map[real]]
    return permuted, row_id_map


def unpermute_sum(rows: np.ndarray, row_id_map: np.ndarray, num_tokens: int) -> np.ndarray:
    """Inverse of permute with summation over duplicate token copies."""
    out = np.zeros((num_tokens, rows.shape[1]), dtype=rows.dtype)
    for r, src in enumerate(row_id_map):
        if src >= 0:
            out[src] += rows[r]
    return out


def _expert_slices(decision: RoutingDecision, row_id_map: np.ndarray):
    counts = decision.effective_counts()
    start = 0
    for e in range(decision.num_experts):
        n = int(counts[e])
        yield e, slice(start, start + n)
        start += n


def combine_standard(tokens: np.ndarray, decision: RoutingDecision,
                     params: ExpertParams) -> np.ndarray:
    """y_t = sum_i p_i * W2_i phi(W1_i x_t): weights applied after experts."""
    permuted, row_id_map = permute(tokens, decision)
    out_rows = np.zeros_like(permuted)
    for e, sl in _expert_slices(decision, row_id_map):
        if sl.stop > sl.start:
            out_rows[sl] = expert_forward(params, e, permuted[sl])
        for r in range(sl.start, sl.stop):
            src = row_id_map[r]
            if src >= 0:
                out_rows[r] *= decision.probs[src, e]
    return unpermute_sum(out_rows, row_id_map, decision.num_tokens)


def combine_mem_efficient(tokens: np.ndarray, decision: RoutingDecision,
                          params: ExpertParams) -> np.ndarray:
    """y_t = sum_i W2_i (p_i * phi(W1_i x_t)): the routing weight absorbed
    into the activation before the bias-free second linear layer."""
    permuted, row_id_map = permute(tokens, decision)
    out = np.zeros((decision.num_tokens, params.w2[0].shape[0]), dtype=tokens.dtype)
    for e, sl in _expert_slices(decision, row_id_map):
        if sl.stop <= sl.start:
            continue
        acts = expert_activation(params, e, permuted[sl])
        for r in range(sl.start, sl.stop):
            src = row_id_map[r]
            if src >= 0:
                acts[r - sl.start] *= decision.probs[src, e]
        rows = acts @ params.w2[e].T
        for r in range(sl.start, sl.stop):
            src = row_id_map[r]
            if src >= 0:
                out[src] += rows[r - sl.start]
    return out


def apply_capacity(decision: RoutingDecision, capacity_factor: float,
                   pad: bool = False) -> RoutingDecision:
    """Enforce per-expert capacity ceil(CF*T*K/E); excess tokens (highest
    source index first dropped last: position order keeps the earliest) are
    marked dropped so the layer output falls back to the residual path.
    pad=True fills every expert to exactly the capacity with zero rows."""
    if capacity_factor <= 0:
        raise ValueError("capacity_factor must be > 0")
    t = decision.num_tokens
    k = int(round(decision.routing_map.sum() / max(t, 1)))
    e = decision.num_experts
    capacity = ceil_div(int(round(capacity_factor * t * k)), e)
    dropped = np.zeros_like(decision.routing_map)
    phantom = np.zeros(e, dtype=np.int64)
    for ex in range(e):
        src = np.nonzero(decision.routing_map[:, ex])[0]
        if len(src) > capacity:
            dropped[src[capacity:], ex] = True
        if pad:
            kept = min(len(src), capacity)
            phantom[ex] = capacity - kept
    return replace(decision, dropped=dropped, phantom_rows=phantom if pad else None)


def expert_capacity(capacity_factor: float, tokens: int, top_k: int, num_experts: int) -> int:
    return ceil_div(int(round(capacity_factor * tokens * top_k)), num_experts)


def moe_output_with_residual(tokens: np.ndarray, decision: RoutingDecision,
                             params: ExpertParams) -> np.ndarray:
    """Combine with capacity fallback: tokens whose every selection was
    dropped pass through on the residual path (identity)."""
    out = combine_standard(tokens, decision, params)
    if decision.dropped is not None:
        alive = (decision.routing_map & ~decision.dropped).any(axis=1)
        out[~alive] += tokens[~alive]
    return out


def latent_moe_forward(x: np.ndarray, w_down: np.ndarray, w_up: np.ndarray,
                       experts: ExpertParams, decision: RoutingDecision,
                       shared: ExpertParams | None = None) -> np.ndarray:
    """Latent MoE: route on full-dim x, run experts at the latent width
    between a shared down/up projection, add full-dim shared experts.

    output = W_up (sum_i p_i E_i(W_down x)) + sum_j E_j_shared(x).
    """
    latent = x @ w_down.T
    routed = combine_standard(latent, decision, experts)
    out = routed @ w_up.T
    if shared is not None:
        for j in range(shared.num_experts):
            out = out + expert_forward(shared, j, x)
    return out


def upcycle(dense_w1: np.ndarray, dense_w2: np.ndarray, granularity: int,
            duplication: int, dense_gate: np.ndarray | None = None
            ) -> tuple[ExpertParams, np.ndarray]:
    """Dense -> fine-grained MoE initialization.

    The dense MLP's intermediate dimension is sharded into `granularity`
    pieces and each shard duplicated `duplication` times (duplicate-major
    expert order). The router is zero-initialized, so every token scores all
    experts equally and lowest-index tie-breaking selects duplicate 0 of
    each shard; with W2 scaled by E (offsetting the uniform 1/E routing
    weight), MoE(x) equals Dense(x) for every x at initialization.
    """
    inter, h = dense_w1.shape
    if inter % granularity != 0:
        raise ValueError(f"intermediate dim {inter} not divisible by granularity {granularity}")
    shard = inter // granularity
    num_experts = granularity * duplication
    w1, w2, gates = [], [], []
    for d in range(duplication):
        for g in range(granularity):
            rows = slice(g * shard, (g + 1) * shard)
            w1.append(dense_w1[rows].copy())
            w2.append(dense_w2[:, rows] * num_experts)
            if dense_gate is not None:
                gates.append(dense_gate[rows].copy())
    w_r = np.zeros((h, num_experts))
    params = ExpertParams(w1=w1, w2=w2, gate=gates if dense_gate is not None else None)
    return params, w_r


def routing_map_pad(decision: RoutingDecision, multiple: int,
                    num_filler_tokens: int | None = None) -> RoutingDecision:
    """Round per-expert counts up to `multiple` by marking phantom
    assignments on designated filler tokens; real-token routing unchanged."""
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    counts = decision.routing_map.sum(axis=0)
    needed = (-counts) % multiple
    if num_filler_tokens is not None and needed.max(initial=0) > num_filler_tokens:
        raise ValueError(
            f"insufficient filler capacity: need {int(needed.max())} rows per "
            f"expert, have {num_filler_tokens}"
        )
    return replace(decision, phantom_rows=needed.astype(np.int64))
