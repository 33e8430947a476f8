"""Layout DSL for flexible asymmetric virtual pipeline stages.

Grammar:
    layout := item+
    item   := unit ['*' INT] | '|'
    unit   := 'E' | 't' | 'm' | 'L' | '(' item+ ')'

'|' terminates a stage. '*' repeats the preceding unit or parenthesized
group; groups may contain '|' and therefore repeat whole stage blocks.
A trailing unterminated stage is implicitly closed.

Symbols: E embedding, t decoder layer, m MTP, L loss.
"""
from __future__ import annotations

from dataclasses import dataclass

SYMBOLS = "EtmL"


class LayoutSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class LayoutArityError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineLayout:
    """Ordered virtual stages; stage s maps to pp_rank = s % PP and
    vpp_rank = s // PP once bound."""

    stages: tuple[tuple[str, ...], ...]
    pp: int = 0
    vpp: int = 0

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def decoder_count(self) -> int:
        return sum(stage.count("t") for stage in self.stages)

    def stage_assignment(self, stage: int) -> tuple[int, int]:
        if not self.pp:
            raise ValueError("layout is unbound; call bind(pp, vpp) first")
        return (stage % self.pp, stage // self.pp)

    def stages_of_rank(self, pp_rank: int) -> list[int]:
        if not self.pp:
            raise ValueError("layout is unbound; call bind(pp, vpp) first")
        return [s for s in range(self.num_stages) if s % self.pp == pp_rank]

    def bind(self, pp: int, vpp: int, num_layers: int | None = None) -> "PipelineLayout":
        if self.num_stages != pp * vpp:
            raise LayoutArityError(
                f"stage count mismatch: expected PP*VPP={pp * vpp}, got {self.num_stages}"
            )
        if num_layers is not None and self.decoder_count != num_layers:
            raise LayoutArityError(
                f"decoder count mismatch: expected {num_layers} 't' symbols, "
                f"got {self.decoder_count}"
            )
        return PipelineLayout(stages=self.stages, pp=pp, vpp=vpp)

    def check_placement(self) -> None:
        for i, stage in enumerate(self.stages):
            if "E" in stage and i != 0:
                raise LayoutArityError(f"embedding 'E' only allowed in stage 0, found in stage {i}")
            if "L" in stage and i != self.num_stages - 1:
                raise LayoutArityError(f"loss 'L' only allowed in the last stage, found in stage {i}")


# -- parser -----------------------------------------------------------------

def _parse_items(text: str, pos: int, depth: int) -> tuple[list[str], int]:
    """Returns a flat list of symbols and '|' stage breaks."""
    out: list[str] = []
    last_unit: list[str] | None = None
    while pos < len(text):
        ch = text[pos]
        if ch == "|":
            out.append("|")
            last_unit = ["|"]
            pos += 1
        elif ch in SYMBOLS:
            out.append(ch)
            last_unit = [ch]
            pos += 1
        elif ch == "(":
            inner, pos = _parse_items(text, pos + 1, depth + 1)
            if pos >= len(text) or text[pos] != ")":
                raise LayoutSyntaxError("unclosed '('", pos)
            pos += 1
            out.extend(inner)
            last_unit = inner
        elif ch == ")":
            if depth == 0:
                raise LayoutSyntaxError("unmatched ')'", pos)
            return out, pos
        elif ch == "*":
            if last_unit is None:
                raise LayoutSyntaxError("'*' with nothing to repeat", pos)
            pos += 1
            start = pos
            while pos < len(text) and text[pos].isdigit():
                pos += 1
            if start == pos:
                raise LayoutSyntaxError("'*' requires an integer count", start)
            count = int(text[start:pos])
            if count < 1:
                raise LayoutSyntaxError("repeat count must be >= 1", start)
            del out[len(out) - len(last_unit):]
            out.extend(last_unit * count)
            last_unit = None
        elif ch.isspace():
            pos += 1
        else:
            raise LayoutSyntaxError(f"unexpected character {ch!r}", pos)
    if depth != 0:
        raise LayoutSyntaxError("unclosed '('", pos)
    return out, pos


def parse_layout(text: str) -> PipelineLayout:
    if not text.strip():
        raise LayoutSyntaxError("empty layout", 0)
    flat, _ = _parse_items(text, 0, 0)
    stages: list[tuple[str, ...]] = []
    current: list[str] = []
    for tok in flat:
        if tok == "|":
            stages.append(tuple(current))
            current = []
        else:
            current.append(tok)
    if current:  # implicit close of trailing stage
        stages.append(tuple(current))
    layout = PipelineLayout(stages=tuple(stages))
    layout.check_placement()
    return layout


# -- printer ----------------------------------------------------------------

def _render_stage(stage: tuple[str, ...]) -> str:
    out = []
    i = 0
    while i < len(stage):
        j = i
        while j < len(stage) and stage[j] == stage[i]:
            j += 1
        run = j - i
        out.append(stage[i] if run == 1 else f"{stage[i]}*{run}")
        i = j
    return "".join(out)


def render_layout(layout: PipelineLayout) -> str:
    """Canonical form: run-length symbols, identical consecutive stages
    grouped as '(stage|)*k', no trailing '|' on the final stage."""
    parts = []
    stages = layout.stages
    i = 0
    while i < len(stages):
        j = i
        while j < len(stages) and stages[j] == stages[i]:
            j += 1
        run = j - i
        body = _render_stage(stages[i])
        last = j == len(stages)
        if not last:
            parts.append(body + "|" if run == 1 else f"({body}|)*{run}")
        elif run == 1:
            parts.append(body)
        elif run == 2:
            parts.append(f"{body}|{body}")
        else:
            parts.append(f"({body}|)*{run - 1}{body}")
        i = j
    return "".join(parts)


def layout_from_table(pp: int, vpp: int, rows: list[tuple[int, int, str]]) -> PipelineLayout:
    """Build a layout from per-(pp_rank, vpp_rank) symbol strings (the
    asymmetric-placement table form). Rows must cover all PP*VPP cells."""
    cells: dict[tuple[int, int], str] = {}
    for pp_rank, vpp_rank, symbols in rows:
        if not (0 <= pp_rank < pp and 0 <= vpp_rank < vpp):
            raise LayoutArityError(f"row ({pp_rank},{vpp_rank}) outside PP={pp} x VPP={vpp}")
        if (pp_rank, vpp_rank) in cells:
            raise LayoutArityError(f"duplicate row for ({pp_rank},{vpp_rank})")
        for ch in symbols:
            if ch not in SYMBOLS:
                raise LayoutArityError(f"unknown symbol {ch!r} in row ({pp_rank},{vpp_rank})")
        cells[(pp_rank, vpp_rank)] = symbols
    missing = [(r, v) for v in range(vpp) for r in range(pp) if (r, v) not in cells]
    if missing:
        raise LayoutArityError(f"coverage gaps: missing rows {missing}")
    stages = tuple(
        tuple(cells[(s % pp, s // pp)]) for s in range(pp * vpp)
    )
    layout = PipelineLayout(stages=stages)
    layout.check_placement()
    return layout.bind(pp, vpp)


def uniform_layout(num_layers: int, pp: int, vpp: int, has_mtp: bool = False,
                   has_embedding: bool = True, has_loss: bool = True) -> PipelineLayout:
    """Default layout when no DSL string is given: decoders split as evenly
    as possible, embedding in stage 0, MTP and loss at the tail."""
    n_stages = pp * vpp
    base, extra = divmod(num_layers, n_stages)
    stages = []
    for s in range(n_stages):
        count = base + (1 if s < extra else 0)
        syms = ["t"] * count
        if s == 0 and has_embedding:
            syms.insert(0, "E")
        if s == n_stages - 1:
            if has_mtp:
                syms.append("m")
            if has_loss:
                syms.append("L")
        stages.append(tuple(syms))
    layout = PipelineLayout(stages=tuple(stages))
    layout.check_placement()
    return layout.bind(pp, vpp, num_layers)
