"""Process-group derivation for decoupled attention and MoE parallelism.

Ranks live in one flat space. The attention layout nests (TP fastest, then
CP, DP, PP); the MoE layout re-factorizes the same non-PP block as (ETP
fastest, then EP, EDP). PP groups are identical in both layouts by
construction, which is the folding consistency requirement.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .model import ParallelConfig

# Which process groups each MoE component communicates over.
COMPONENT_GROUP_MAP: dict[str, tuple[str, ...]] = {
    "router": ("tp", "cp", "tp_cp"),
    "dispatcher": ("ep", "tp_ep"),
    "experts": ("ep", "etp", "edp"),
    "shared_experts": ("tp",),
}


@dataclass(frozen=True)
class RankGroups:
    rank: int
    tp: list[int]
    cp: list[int]
    dp: list[int]
    pp: list[int]
    etp: list[int]
    ep: list[int]
    edp: list[int]
    tp_cp: list[int] = field(default_factory=list)
    dp_cp: list[int] = field(default_factory=list)
    tp_ep: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "rank": self.rank,
            "attention": {"tp": self.tp, "cp": self.cp, "dp": self.dp, "pp": self.pp},
            "expert": {"etp": self.etp, "ep": self.ep, "edp": self.edp, "pp": self.pp},
            "derived": {"tp_cp": self.tp_cp, "dp_cp": self.dp_cp, "tp_ep": self.tp_ep},
        }


def _nested_coords(rank: int, dims: list[int]) -> list[int]:
    coords = []
    for d in dims:
        coords.append(rank % d)
        rank //= d
    return coords


def _group_of(rank: int, dims: list[int], vary: set[int]) -> list[int]:
    """Ranks differing from `rank` only in the `vary` dimensions."""
    coords = _nested_coords(rank, dims)
    members = []
    total = 1
    vary_dims = [dims[i] for i in sorted(vary)]
    for d in vary_dims:
        total *= d
    for combo in range(total):
        c = list(coords)
        rem = combo
        for i in sorted(vary):
            c[i] = rem % dims[i]
            rem //= dims[i]
        r, stride = 0, 1
        for i, d in enumerate(dims):
            r += c[i] * stride
            stride *= d
        members.append(r)
    return sorted(members)


def derive_groups(config: ParallelConfig) -> list[RankGroups]:
    """Per-rank group membership for every rank in the world."""
    attn_dims = [config.tp, config.cp, config.dp, config.pp]
    moe_dims = [config.etp, config.ep, config.edp_effective, config.pp]
    world = config.world_size
    if world != config.moe_world_size:
        raise ValueError(
            f"attention world {world} != MoE world {config.moe_world_size}"
        )
    out = []
    for rank in range(world):
        out.append(
            RankGroups(
                rank=rank,
                tp=_group_of(rank, attn_dims, {0}),
                cp=_group_of(rank, attn_dims, {1}),
                dp=_group_of(rank, attn_dims, {2}),
                pp=_group_of(rank, attn_dims, {3}),
                etp=_group_of(rank, moe_dims, {0}),
                ep=_group_of(rank, moe_dims, {1}),
                edp=_group_of(rank, moe_dims, {2}),
                tp_cp=_group_of(rank, attn_dims, {0, 1}),
                dp_cp=_group_of(rank, attn_dims, {1, 2}),
                tp_ep=_group_of(rank, moe_dims, {0, 1}),
            )
        )
    return out


def pack_ep_into_domains(groups: list[RankGroups], domain_size: int) -> list[int]:
    """Optional topology post-pass: permutation of rank ids such that each
    rank's EP group occupies as few NVLink domains as possible.

    The nested order already makes EP groups contiguous blocks, so the
    identity permutation is returned whenever every EP group is a contiguous
    run; otherwise ranks are reordered EP-group by EP-group. Domain packing
    has no single right answer, so it is exposed rather than defaulted.
    """
    world = len(groups)
    seen: set[int] = set()
    order: list[int] = []
    for g in groups:
        if g.rank in seen:
            continue
        for r in g.ep:
            if r not in seen:
                order.append(r)
                seen.add(r)
    perm = [0] * world
    for new, old in enumerate(order):
        perm[old] = new
    return perm


def min_gpus(
    tp: int = 1,
    cp: int = 1,
    dp: int = 1,
    pp: int = 1,
    ep: int = 1,
    etp: int = 1,
    folded: bool = False,
) -> int:
    """Minimum GPU count for the requested degrees.

    Unfolded (EP constrained inside DP): TP*CP*PP*max(DP, EP).
    Folded: EP may reuse the TP*CP*DP ranks, so the attention product governs
    as long as the MoE block fits inside it.
    """
    if folded:
        block = tp * cp * dp
        moe_block = etp * ep
        import math

        scale = max(1, math.ceil(moe_block / block))
        return tp * cp * dp * pp * scale
    return tp * cp * pp * max(dp, ep * etp)


def expert_grad_scale(config: ParallelConfig) -> Fraction:
    """Expert gradients are scaled by edp/dp to correct replica averaging."""
    return Fraction(config.edp_effective, config.dp)
