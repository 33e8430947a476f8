"""Dynamic-balance planners: Dynamic-CP packing, ECHO expert cloning, the
paged stashing allocator, and packed-sequence utilities.

Dynamic-CP is a greedy alternation (workload-oriented CP sizing, then
memory-feasible filling) swept over a bounded micro-batch-count grid; ECHO
packs per-expert spillover onto spare rank capacity first-fit-decreasing
with an exact refinement at toy sizes. Both are asserted against brute
force only at small scale.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .model import ceil_div, is_power_of_two


# -- packed sequences and Dynamic-CP -----------------------------------------

@dataclass
class PackedBin:
    sequence_ids: list[int]
    lengths: list[int]
    cp_size: int = 1

    @property
    def cu_seqlens(self) -> list[int]:
        out = [0]
        for length in self.lengths:
            out.append(out[-1] + length)
        return out

    @property
    def total_tokens(self) -> int:
        return sum(self.lengths)

    @property
    def attention_cost(self) -> float:
        return float(sum(s * s for s in self.lengths))


@dataclass
class PackedBatch:
    bins: list[PackedBin]
    num_microbatches: int
    dp: int

    def as_dict(self) -> dict:
        return {
            "num_microbatches": self.num_microbatches,
            "dp": self.dp,
            "bins": [
                {
                    "sequence_ids": b.sequence_ids,
                    "lengths": b.lengths,
                    "cp_size": b.cp_size,
                    "cu_seqlens": b.cu_seqlens,
                    "attention_cost": b.attention_cost,
                }
                for b in self.bins
            ],
        }


def _min_cp_for_memory(tokens: int, memory_budget_tokens: int, cp_max: int) -> int:
    cp = 1
    while tokens / cp > memory_budget_tokens and cp < cp_max:
        cp *= 2
    return cp


CP_OVERHEAD = 0.15  # per extra CP shard: ring-exchange cost in the score
MB_PENALTY = 0.05  # pipeline-bubble pressure per extra micro-batch


def dynamic_cp_plan(lengths: list[int], memory_budget_tokens: int, dp: int,
                    cp_max: int, pp: int, max_sweep_multiple: int = 4) -> PackedBatch:
    """Joint packing + per-microbatch CP sizing.

    The plan alternates workload and memory decisions: sequences are placed
    longest-cost-first onto the lightest fitting bin of a (dp x
    num_microbatches) grid, each bin then takes the smallest power-of-two CP
    that meets the memory budget, and bins whose attention workload exceeds
    the balance quota are widened further. The micro-batch count is swept
    from PP*1 upward (identical across DP ranks); the plan minimizing the
    CP-overhead-aware makespan proxy wins.
    """
    if not lengths:
        raise ValueError("no sequences to pack")
    if not is_power_of_two(cp_max):
        raise ValueError("cp_max must be a power of two")
    for i, s in enumerate(lengths):
        if s / cp_max > memory_budget_tokens:
            raise ValueError(
                f"sequence {i} (length {s}) infeasible even at cp_max={cp_max}"
            )

    max_bin_tokens = cp_max * memory_budget_tokens
    total_cost = sum(s * s for s in lengths)
    order = sorted(range(len(lengths)), key=lambda i: -lengths[i] * lengths[i])
    best: PackedBatch | None = None
    best_score = float("inf")
    sweep_end = max(pp * max_sweep_multiple, ceil_div(len(lengths), dp) + pp)
    for num_mb in range(pp, sweep_end + 1):
        n_bins = num_mb * dp
        bins = [PackedBin([], []) for _ in range(n_bins)]
        loads = [0.0] * n_bins
        tokens = [0] * n_bins
        feasible = True
        for i in order:
            fitting = [b for b in range(n_bins)
                       if tokens[b] + lengths[i] <= max_bin_tokens]
            if not fitting:
                feasible = False
                break
            j = min(fitting, key=lambda b: (loads[b], b))
            bins[j].sequence_ids.append(i)
            bins[j].lengths.append(lengths[i])
            loads[j] += lengths[i] ** 2
            tokens[j] += lengths[i]
        if not feasible:
            continue
        # local refinement: move a sequence off the heaviest bin when that
        # strictly lowers the max load and keeps the target bin feasible
        improved = True
        while improved:
            improved = False
            hi = max(range(n_bins), key=lambda b: loads[b])
            lo = min(range(n_bins), key=lambda b: loads[b])
            for pos, i in enumerate(bins[hi].sequence_ids):
                c = lengths[i] ** 2
                if (max(loads[hi] - c, loads[lo] + c) < loads[hi]
                        and tokens[lo] + lengths[i] <= max_bin_tokens):
                    bins[hi].sequence_ids.pop(pos)
                    bins[hi].lengths.pop(pos)
                    bins[lo].sequence_ids.append(i)
                    bins[lo].lengths.append(lengths[i])
                    loads[hi] -= c
                    loads[lo] += c
                    tokens[hi] -= lengths[i]
                    tokens[lo] += lengths[i]
                    improved = True
                    break
        quota = 1.25 * total_cost / n_bins
        for b, load in zip(bins, loads):
            cp = _min_cp_for_memory(b.total_tokens, memory_budget_tokens, cp_max)
            while load / cp > quota and cp < cp_max:
                cp *= 2
            b.cp_size = cp
        score = max(
            (load / b.cp_size) * (1 + CP_OVERHEAD * (b.cp_size - 1))
            for b, load in zip(bins, loads)
        )
        score += MB_PENALTY * total_cost / n_bins * (num_mb - pp) / max(pp, 1)
        if score < best_score:
            best_score = score
            best = PackedBatch(bins=bins, num_microbatches=num_mb, dp=dp)
    if best is None:
        raise ValueError("no feasible packing found within the sweep")
    return best


def per_token_loss(token_losses: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean loss over valid (non-padding) tokens only."""
    valid = np.asarray(valid_mask, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid tokens")
    return float(np.asarray(token_losses)[valid].sum() / n)


def serpentine_order(costs: list[float]) -> list[int]:
    """Order bins small-to-large-to-small by attention cost: ascending first
    half, descending second half, so adjacent micro-batches have comparable
    workloads and warmup/cooldown see the light ones.

    Steps repeat, so the order is cyclically adjacent to itself; its cyclic
    adjacent-cost variation is exactly 2*(max-min), the minimum over all
    orderings, hence never above the unsorted order's."""
    if not costs:
        raise ValueError("no bins to order")
    asc = sorted(range(len(costs)), key=lambda i: (costs[i], i))
    head = ceil_div(len(asc), 2)
    return asc[:head] + asc[head:][::-1]


# -- ECHO ---------------------------------------------------------------------

@dataclass
class ExpertClone:
    expert: int
    rank: int
    tokens: int


@dataclass
class EchoPlan:
    clones: list[ExpertClone]
    target_load: int
    pre_max_load: int
    post_loads: list[int]
    best_effort: bool = False

    @property
    def clone_count(self) -> int:
        return len(self.clones)

    @property
    def post_max_load(self) -> int:
        return max(self.post_loads) if self.post_loads else 0

    def as_dict(self) -> dict:
        return {
            "clones": [vars(c) for c in self.clones],
            "target_load": self.target_load,
            "pre_max_load": self.pre_max_load,
            "post_loads": self.post_loads,
            "post_max_load": self.post_max_load,
            "clone_count": self.clone_count,
            "best_effort": self.best_effort,
        }


def _expert_spillover(counts: np.ndarray, experts_per_rank: int, target: int) -> list[int]:
    """Per-expert tokens above the rank-balanced target, charged to the
    largest experts of each overloaded rank first."""
    num_ranks = len(counts) // experts_per_rank
    spill = [0] * len(counts)
    for r in range(num_ranks):
        ids = list(range(r * experts_per_rank, (r + 1) * experts_per_rank))
        overload = sum(int(counts[e]) for e in ids) - target
        for e in sorted(ids, key=lambda i: -counts[i]):
            if overload <= 0:
                break
            take = min(int(counts[e]), overload)
            spill[e] = take
            overload -= take
    return spill


def echo_plan(counts: list[int] | np.ndarray, experts_per_rank: int,
              spare_slots_per_rank: int, exact_limit: int = 12) -> EchoPlan:
    """Hot-expert cloning plan.

    Spillover (tokens above the mean rank load, rounded up) is matched to
    spare rank capacity first-fit-decreasing; instances small enough are
    refined by exact search so the clone count is minimal among plans that
    meet the balance target. Insufficient aggregate spare capacity yields a
    best-effort plan.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if spare_slots_per_rank < 0:
        raise ValueError("spare slots must be >= 0")
    if len(counts) % experts_per_rank != 0:
        raise ValueError("expert count must be divisible by experts_per_rank")
    num_ranks = len(counts) // experts_per_rank
    rank_loads = [
        int(counts[r * experts_per_rank:(r + 1) * experts_per_rank].sum())
        for r in range(num_ranks)
    ]
    target = ceil_div(int(counts.sum()), num_ranks)
    pre_max = max(rank_loads)
    spill = _expert_spillover(counts, experts_per_rank, target)
    spare = [max(0, target - load) for load in rank_loads]
    total_spill = sum(spill)
    best_effort = total_spill > sum(spare) or (
        total_spill > 0 and spare_slots_per_rank == 0
    )

    clones = _pack_spillover(spill, spare, spare_slots_per_rank, experts_per_rank)
    if not best_effort and len(counts) <= exact_limit and num_ranks <= 6:
        exact = _exact_min_clones(spill, spare, spare_slots_per_rank, experts_per_rank)
        if exact is not None and len(exact) < len(clones):
            clones = exact

    post = list(rank_loads)
    for c in clones:
        post[c.rank] += c.tokens
        post[c.expert // experts_per_rank] -= c.tokens
    return EchoPlan(
        clones=clones,
        target_load=target,
        pre_max_load=pre_max,
        post_loads=post,
        best_effort=best_effort,
    )


def _pack_spillover(spill: list[int], spare: list[int], slots: int,
                    experts_per_rank: int) -> list[ExpertClone]:
    """First-fit-decreasing: biggest spillover takes the biggest spares."""
    spare = list(spare)
    used_slots = [0] * len(spare)
    clones: list[ExpertClone] = []
    for e in sorted(range(len(spill)), key=lambda i: -spill[i]):
        remaining = spill[e]
        home = e // experts_per_rank
        while remaining > 0:
            candidates = [
                r for r in range(len(spare))
                if r != home and spare[r] > 0 and used_slots[r] < slots
            ]
            if not candidates:
                break
            r = max(candidates, key=lambda i: (spare[i], -i))
            take = min(remaining, spare[r])
            clones.append(ExpertClone(expert=e, rank=r, tokens=take))
            spare[r] -= take
            used_slots[r] += 1
            remaining -= take
    return clones


def _exact_min_clones(spill: list[int], spare: list[int], slots: int,
                      experts_per_rank: int) -> list[ExpertClone] | None:
    """Branch-and-bound over per-expert rank subsets, minimizing clone count."""
    experts = [e for e in range(len(spill)) if spill[e] > 0]
    if not experts:
        return []
    ranks = list(range(len(spare)))
    best: list[ExpertClone] | None = None
    best_count = float("inf")

    def recurse(idx: int, spare_left: list[int], slots_left: list[int],
                acc: list[ExpertClone]) -> None:
        nonlocal best, best_count
        if len(acc) >= best_count:
            return
        if idx == len(experts):
            best, best_count = list(acc), len(acc)
            return
        e = experts[idx]
        home = e // experts_per_rank
        usable = [r for r in ranks if r != home and spare_left[r] > 0 and slots_left[r] > 0]
        need = spill[e]
        for size in range(1, len(usable) + 1):
            if len(acc) + size >= best_count:
                break
            for combo in itertools.combinations(usable, size):
                if sum(spare_left[r] for r in combo) < need:
                    continue
                remaining = need
                takes = []
                for r in sorted(combo, key=lambda i: -spare_left[i]):
                    take = min(remaining, spare_left[r])
                    takes.append((r, take))
                    remaining -= take
                if remaining > 0:
                    continue
                for r, take in takes:
                    spare_left[r] -= take
                    slots_left[r] -= 1
                    acc.append(ExpertClone(expert=e, rank=r, tokens=take))
                recurse(idx + 1, spare_left, slots_left, acc)
                for r, take in takes:
                    spare_left[r] += take
                    slots_left[r] += 1
                    acc.pop()

    recurse(0, list(spare), [slots] * len(spare), [])
    return best


def rewrite_routing_counts(counts: list[int], plan: EchoPlan,
                           experts_per_rank: int) -> dict[tuple[int, int], int]:
    """Token placement after the plan: (expert, rank) -> tokens computed
    there. Overflow tokens of each cloned expert move to the clone ranks."""
    placement: dict[tuple[int, int], int] = {}
    moved = {e: 0 for e in range(len(counts))}
    for c in plan.clones:
        placement[(c.expert, c.rank)] = placement.get((c.expert, c.rank), 0) + c.tokens
        moved[c.expert] += c.tokens
    for e, n in enumerate(counts):
        home = e // experts_per_rank
        placement[(e, home)] = placement.get((e, home), 0) + int(n) - moved[e]
    return placement


def echo_grad_reduce(clone_grads: list[np.ndarray], home_grad: np.ndarray | None = None) -> np.ndarray:
    """Reduce clone gradients back to the home expert: a plain sum, equal to
    the gradient of running all tokens through the single home expert."""
    if home_grad is None and not clone_grads:
        raise ValueError("nothing to reduce")
    total = None
    for g in ([home_grad] if home_grad is not None else []) + list(clone_grads):
        total = g.copy() if total is None else total + g
    return total


# -- Paged stashing -------------------------------------------------------------

@dataclass
class _PageRecord:
    pages: list[int]
    actual_tokens: int
    payload: bytes


@dataclass
class PagedStash:
    """Fixed-size-page activation stash with a circular free list.

    Stash allocates from the head of the free list; reload returns pages to
    the tail. One shared worst-case tmp buffer plus the actual-token pages
    bound peak memory by O(worst_case + sum(actual)).
    """

    num_pages: int
    page_size: int = 64
    worst_case_tokens: int = 0
    _free: list[int] = field(default_factory=list)
    _records: dict[int, _PageRecord] = field(default_factory=dict)
    peak_pages_used: int = 0
    double_buffer_margin_pages: int = 0

    def __post_init__(self):
        if self.num_pages < 1 or self.page_size < 1:
            raise ValueError("num_pages and page_size must be >= 1")
        self._free = list(range(self.num_pages))
        if not self.double_buffer_margin_pages and self.worst_case_tokens:
            # one extra in-flight layer of pages for the overlap streams
            self.double_buffer_margin_pages = ceil_div(self.worst_case_tokens, self.page_size)

    @property
    def free_pages(self) -> int:
        return len(self._free)

    @property
    def allocated_pages(self) -> int:
        return self.num_pages - len(self._free)

    def pages_needed(self, tokens: int) -> int:
        return ceil_div(tokens, self.page_size)

    def stash(self, layer_id: int, actual_tokens: int, payload: bytes) -> list[int]:
        """Copy a layer's actual activations into pages from the free-list
        head; returns the page ids recorded for the layer."""
        if layer_id in self._records:
            raise ValueError(f"layer {layer_id} already stashed")
        need = self.pages_needed(actual_tokens)
        if need > len(self._free):
            raise MemoryError(
                f"out of pages: need {need}, free {len(self._free)} "
                "(stash buffer undersized)"
            )
        pages = [self._free.pop(0) for _ in range(need)]
        self._records[layer_id] = _PageRecord(pages, actual_tokens, payload)
        self.peak_pages_used = max(self.peak_pages_used, self.allocated_pages)
        return list(pages)

    def reload(self, layer_id: int) -> bytes:
        """Return the stashed payload and recycle its pages to the tail."""
        rec = self._records.pop(layer_id, None)
        if rec is None:
            raise KeyError(f"no stash record for layer {layer_id}")
        self._free.extend(rec.pages)
        return rec.payload

    def peak_memory_tokens(self) -> int:
        """Worst-case tmp buffer plus the page high-water mark."""
        return self.worst_case_tokens + self.peak_pages_used * self.page_size
