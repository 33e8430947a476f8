"""Deterministic discrete-event simulation of 1F1B / interleaved pipelines.

The schedule policy fixes a per-rank op order (Megatron-style warmup /
steady 1F1B / cooldown); timing is then the unique fixpoint of the
dependency DAG plus per-rank serialization. Weight-gradient (W) events, when
split from the data gradient, never displace F/B work: they fill idle gaps
FIFO and drain at the end of each rank's order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .layout import PipelineLayout


@dataclass(frozen=True)
class SymbolCost:
    f: float = 1.0
    b: float = 1.0
    w: float = 0.0


DEFAULT_COSTS: dict[str, SymbolCost] = {
    "E": SymbolCost(0.1, 0.1, 0.0),
    "t": SymbolCost(1.0, 1.0, 0.0),
    "m": SymbolCost(2.0, 2.0, 0.0),
    "L": SymbolCost(0.1, 0.1, 0.0),
}


@dataclass
class Event:
    rank: int
    microbatch: int
    chunk: int
    kind: str  # "F" | "B" | "W"
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start

    def as_dict(self) -> dict:
        return {
            "rank": self.rank,
            "microbatch": self.microbatch,
            "chunk": self.chunk,
            "kind": self.kind,
            "start": self.start,
            "end": self.end,
        }


@dataclass
class Schedule:
    events: list[Event]
    makespan: float
    bubble_ratio: float
    peak_inflight: list[int]
    pp: int
    vpp: int
    num_microbatches: int
    extra_warmup: bool
    warmup_depth: list[int] = field(default_factory=list)

    def rank_events(self, rank: int) -> list[Event]:
        return sorted((e for e in self.events if e.rank == rank), key=lambda e: e.start)

    def as_dict(self) -> dict:
        return {
            "makespan": self.makespan,
            "bubble_ratio": self.bubble_ratio,
            "peak_inflight": self.peak_inflight,
            "warmup_depth": self.warmup_depth,
            "pp": self.pp,
            "vpp": self.vpp,
            "num_microbatches": self.num_microbatches,
            "events": [e.as_dict() for e in self.events],
        }

    def chrome_trace(self) -> dict:
        """Chrome trace-event JSON (load in chrome://tracing or Perfetto)."""
        return {
            "traceEvents": [
                {
                    "name": f"{e.kind} mb{e.microbatch} c{e.chunk}",
                    "ph": "X",
                    "ts": e.start * 1e6,
                    "dur": e.duration * 1e6,
                    "pid": 0,
                    "tid": e.rank,
                    "args": {"kind": e.kind, "microbatch": e.microbatch, "chunk": e.chunk},
                }
                for e in self.events
            ]
        }


def _unit_to_mb_chunk(unit: int, p: int, v: int, backward: bool) -> tuple[int, int]:
    group, within = divmod(unit, p * v)
    chunk = within // p
    if backward:
        chunk = v - 1 - chunk
    return group * p + within % p, chunk


def _warmup_units(rank: int, p: int, v: int, m: int, extra: bool) -> int:
    total = m * v
    if v == 1:
        w = p - rank - 1
    else:
        w = (p - rank - 1) * 2 + (v - 1) * p
    if extra:
        w += 1
    return min(w, total)


def _rank_order(rank: int, p: int, v: int, m: int, extra: bool) -> list[tuple[str, int, int]]:
    total = m * v
    w = _warmup_units(rank, p, v, m, extra)
    order: list[tuple[str, int, int]] = []
    for k in range(w):
        mb, c = _unit_to_mb_chunk(k, p, v, backward=False)
        order.append(("F", mb, c))
    for i in range(total - w):
        mb, c = _unit_to_mb_chunk(w + i, p, v, backward=False)
        order.append(("F", mb, c))
        mb, c = _unit_to_mb_chunk(i, p, v, backward=True)
        order.append(("B", mb, c))
    for j in range(total - w, total):
        mb, c = _unit_to_mb_chunk(j, p, v, backward=True)
        order.append(("B", mb, c))
    return order


def simulate(
    layout: PipelineLayout,
    costs: dict[str, SymbolCost] | None = None,
    num_microbatches: int = 1,
    schedule_kind: str = "1F1B",
    extra_warmup: bool = False,
    wd_split: bool = False,
) -> Schedule:
    """Simulate the pipeline and return the full event timeline.

    schedule_kind "interleaved" is implied whenever the layout has VPP > 1;
    interleaved scheduling requires num_microbatches % PP == 0 (the classic
    Megatron constraint).
    """
    if not layout.pp:
        raise ValueError("layout must be bound (pp/vpp) before simulation")
    costs = costs or DEFAULT_COSTS
    p, v, m = layout.pp, layout.vpp, num_microbatches
    if m < 1:
        raise ValueError("num_microbatches must be >= 1")
    if schedule_kind not in ("1F1B", "interleaved"):
        raise ValueError(f"unknown schedule kind {schedule_kind!r}")
    interleaved = schedule_kind == "interleaved" or v > 1
    if interleaved and v > 1 and m % p != 0:
        raise ValueError(
            f"interleaved schedule requires num_microbatches % PP == 0, got {m} % {p}"
        )

    def stage_cost(stage: int, kind: str) -> float:
        total = 0.0
        for sym in layout.stages[stage]:
            c = costs.get(sym, SymbolCost())
            if kind == "F":
                total += c.f
            elif kind == "B":
                total += c.b + (0.0 if wd_split else c.w)
            else:
                total += c.w
        return total

    orders = [_rank_order(r, p, v, m, extra_warmup) for r in range(p)]
    end_time: dict[tuple[str, int, int], float] = {}  # (kind, mb, stage) -> end
    events: list[Event] = []
    rank_free = [0.0] * p
    pointers = [0] * p
    last_stage = p * v - 1

    def deps_of(kind: str, mb: int, stage: int) -> list[tuple[str, int, int]]:
        deps = []
        if kind == "F":
            if stage > 0:
                deps.append(("F", mb, stage - 1))
        else:
            deps.append(("F", mb, stage))
            if stage < last_stage:
                deps.append(("B", mb, stage + 1))
        return deps

    progress = True
    while progress:
        progress = False
        for r in range(p):
            while pointers[r] < len(orders[r]):
                kind, mb, chunk = orders[r][pointers[r]]
                stage = chunk * p + r
                deps = deps_of(kind, mb, stage)
                if any(d not in end_time for d in deps):
                    break
                start = max([rank_free[r]] + [end_time[d] for d in deps])
                dur = stage_cost(stage, kind)
                end = start + dur
                events.append(Event(r, mb, chunk, "B" if kind == "B" else kind, start, end))
                end_time[(kind, mb, stage)] = end
                rank_free[r] = end
                pointers[r] += 1
                progress = True
    unfinished = [r for r in range(p) if pointers[r] < len(orders[r])]
    if unfinished:
        raise RuntimeError(f"schedule deadlock on ranks {unfinished}")

    if wd_split:
        _fill_weight_grads(layout, costs, events, end_time, p, v)

    makespan = max((e.end for e in events), default=0.0)
    bubble = 0.0
    if makespan > 0:
        ratios = []
        for r in range(p):
            busy = sum(e.duration for e in events if e.rank == r)
            ratios.append((makespan - busy) / makespan)
        bubble = sum(ratios) / p

    peaks = []
    for r in range(p):
        ev = sorted((e for e in events if e.rank == r), key=lambda e: e.start)
        live, peak = 0, 0
        for e in ev:
            if e.kind == "F":
                live += 1
                peak = max(peak, live)
            elif e.kind == "B":
                live -= 1
        peaks.append(peak)

    return Schedule(
        events=sorted(events, key=lambda e: (e.start, e.rank)),
        makespan=max((e.end for e in events), default=0.0),
        bubble_ratio=bubble,
        peak_inflight=peaks,
        pp=p,
        vpp=v,
        num_microbatches=m,
        extra_warmup=extra_warmup,
        warmup_depth=[_warmup_units(r, p, v, m, extra_warmup) for r in range(p)],
    )


def _fill_weight_grads(layout, costs, events, end_time, p, v):
    """Insert W events into idle gaps (FIFO per rank); leftovers drain at
    the end. W never displaces or delays F/B events."""
    for r in range(p):
        ev = sorted((e for e in events if e.rank == r), key=lambda e: e.start)
        pending: list[tuple[float, int, int, float]] = []  # (ready, mb, chunk, dur)
        for e in ev:
            if e.kind == "B":
                stage = e.chunk * p + r
                dur = sum(costs.get(s, SymbolCost()).w for s in layout.stages[stage])
                if dur > 0:
                    pending.append((e.end, e.microbatch, e.chunk, dur))
        cursor = 0.0
        gaps: list[Event] = []
        for e in ev + [None]:
            gap_end = e.start if e is not None else float("inf")
            i = 0
            while i < len(pending):
                ready, mb, chunk, dur = pending[i]
                start = max(cursor, ready)
                if start + dur <= gap_end:
                    gaps.append(Event(r, mb, chunk, "W", start, start + dur))
                    cursor = start + dur
                    pending.pop(i)
                else:
                    i += 1
            if e is not None:
                cursor = max(cursor, e.end)
        events.extend(gaps)


def fwd_bwd_pairs(schedule: Schedule) -> list[dict]:
    """Adjacent (F, B) event pairs per rank: the merge slots for 1F1B
    all-to-all overlap. Endpoint slots (the very first F and very last B of
    each rank) are flagged exposed; with extra warmup, steady-state pairs
    have distinct micro-batch ids."""
    pairs = []
    for r in range(schedule.pp):
        ev = [e for e in schedule.rank_events(r) if e.kind in ("F", "B")]
        for i in range(len(ev) - 1):
            a, b = ev[i], ev[i + 1]
            if a.kind == "F" and b.kind == "B":
                pairs.append(
                    {
                        "rank": r,
                        "f": a.as_dict(),
                        "b": b.as_dict(),
                        "same_microbatch": a.microbatch == b.microbatch,
                        "exposed": i == 0 or i + 1 == len(ev) - 1,
                    }
                )
    return pairs


def analytic_bubble_ratio(p: int, v: int, m: int) -> float:
    """Closed-form bubble for uniform costs: (p-1) / (v*m + p-1)."""
    return (p - 1) / (v * m + p - 1)


def peak_inflight_microbatches(pp: int, pp_rank: int) -> int:
    """In-flight micro-batch depth used by the memory estimator: the plain
    1F1B warmup depth plus the batch in execution, PP - rank. The estimator
    reports this assumption alongside its output because activation peaks
    are schedule-dependent."""
    return max(1, pp - pp_rank)
