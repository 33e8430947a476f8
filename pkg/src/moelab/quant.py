"""Bit-accurate software emulation of the training precision recipes.

Per-tensor FP8 (current scaling), blockwise FP8 (1x128 tiles / 128x128
weight blocks), MXFP8 (1x32, E8M0 scales), and NVFP4 (16-element two-level
scaling with optional RHT, stochastic rounding, and 16x16 weight blocks).
Codes are integer arrays with explicit decode tables; dequantize-then-
multiply is the only GEMM path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .formats import E2M1, E4M3, E5M2, FloatFormat, FORMATS, e8m0_scale
from .model import PrecisionRecipe, ceil_div, is_power_of_two

E4M3_MAX = 448.0
E2M1_MAX = 6.0


@dataclass(frozen=True)
class Recipe:
    kind: PrecisionRecipe
    fwd_format: str = "E4M3"
    grad_format: str = "E4M3"
    # (rows, cols) block geometry; 0 means the whole axis.
    act_block: tuple[int, int] = (0, 0)
    weight_block: tuple[int, int] = (0, 0)
    gemm_alignment: int = 16
    grouped_alignment: int = 16
    rht: bool = False
    stochastic_rounding: bool = False
    two_d_weight_scaling: bool = False

    def __post_init__(self):
        if self.kind != PrecisionRecipe.NVFP4 and (
            self.rht or self.stochastic_rounding or self.two_d_weight_scaling
        ):
            raise ValueError("RHT / stochastic rounding / 2D weight scaling are NVFP4-only")

    def block_for(self, tensor_kind: str) -> tuple[int, int]:
        return self.weight_block if tensor_kind == "weight" else self.act_block

    def format_for(self, tensor_kind: str) -> FloatFormat:
        name = self.grad_format if tensor_kind == "grad" else self.fwd_format
        return FORMATS[name]


def make_recipe(kind: PrecisionRecipe | str, hybrid_grads: bool = False,
                rht: bool = False, stochastic_rounding: bool = False,
                two_d_weight_scaling: bool = True) -> Recipe:
    kind = PrecisionRecipe(kind)
    if kind == PrecisionRecipe.BF16:
        raise ValueError("BF16 is the reference precision, not a quantization recipe")
    if kind != PrecisionRecipe.NVFP4 and (rht or stochastic_rounding):
        raise ValueError("RHT and stochastic rounding are NVFP4-only mechanisms")
    if kind == PrecisionRecipe.FP8_TENSOR:
        return Recipe(kind, grad_format="E5M2" if hybrid_grads else "E4M3")
    if kind == PrecisionRecipe.FP8_BLOCK:
        return Recipe(kind, act_block=(1, 128), weight_block=(128, 128))
    if kind == PrecisionRecipe.MXFP8:
        return Recipe(kind, act_block=(1, 32), weight_block=(1, 32),
                      gemm_alignment=32, grouped_alignment=128)
    return Recipe(
        PrecisionRecipe.NVFP4,
        fwd_format="E2M1",
        grad_format="E2M1",
        act_block=(1, 16),
        weight_block=(16, 16) if two_d_weight_scaling else (1, 16),
        gemm_alignment=32,
        grouped_alignment=128,
        rht=rht,
        stochastic_rounding=stochastic_rounding,
        two_d_weight_scaling=two_d_weight_scaling,
    )


@dataclass
class QuantTensor:
    codes: np.ndarray  # integer payload codes
    shape: tuple[int, int]
    recipe: Recipe
    tensor_kind: str
    payload_format: str
    tensor_scale: float = 1.0  # FP32 top-level scale (NVFP4) or per-tensor scale
    block_scales: Optional[np.ndarray] = None  # per-block decode scales
    block_scale_codes: Optional[np.ndarray] = None  # E4M3/E8M0 scale codes
    block_geometry: tuple[int, int] = (0, 0)
    column_twin: Optional["QuantTensor"] = None
    # Scale-factor swizzle (32x16 layout, 128x4-aligned shape) is a GEMM
    # kernel contract we do not execute; recorded as metadata only.
    scale_layout_note: str = "unswizzled"

    def dequantize(self) -> np.ndarray:
        fmt = FORMATS[self.payload_format]
        vals = fmt.decode(self.codes)
        return vals * self._decode_scale_grid()

    def _decode_scale_grid(self) -> np.ndarray:
        if self.block_scales is None:
            return np.full(self.shape, self.tensor_scale)
        br, bc = self.block_geometry
        rows, cols = self.shape
        grid = np.repeat(np.repeat(self.block_scales, br, axis=0)[:rows],
                         bc, axis=1)[:, :cols]
        return grid * self.tensor_scale

    def to_json(self) -> str:
        payload = {
            "shape": list(self.shape),
            "recipe": self.recipe.kind.value,
            "tensor_kind": self.tensor_kind,
            "payload_format": self.payload_format,
            "tensor_scale": self.tensor_scale,
            "block_geometry": list(self.block_geometry),
            "codes": self.codes.astype(int).tolist(),
            "block_scale_codes": None if self.block_scale_codes is None
            else self.block_scale_codes.astype(int).tolist(),
            "block_scales": None if self.block_scales is None
            else self.block_scales.tolist(),
            "scale_layout_note": self.scale_layout_note,
        }
        return json.dumps(payload, sort_keys=True)


def _block_amax(x: np.ndarray, block: tuple[int, int]) -> np.ndarray:
    rows, cols = x.shape
    br = block[0] or rows
    bc = block[1] or cols
    nr, nc = ceil_div(rows, br), ceil_div(cols, bc)
    out = np.zeros((nr, nc))
    for i in range(nr):
        for j in range(nc):
            tile = x[i * br:(i + 1) * br, j * bc:(j + 1) * bc]
            out[i, j] = np.abs(tile).max(initial=0.0)
    return out


def _scales_from_amax(amax_grid: np.ndarray, recipe: Recipe,
                      fmt: FloatFormat, tensor_amax: float) -> tuple[float, np.ndarray, np.ndarray | None]:
    """(tensor_scale, block_decode_scales, block_scale_codes) per recipe."""
    if recipe.kind == PrecisionRecipe.FP8_TENSOR:
        amax = float(tensor_amax)
        scale = amax / fmt.max_finite if amax > 0 else 1.0
        return scale, np.ones_like(amax_grid), None
    if recipe.kind == PrecisionRecipe.FP8_BLOCK:
        scales = np.where(amax_grid > 0, amax_grid / fmt.max_finite, 1.0)
        return 1.0, scales, None
    if recipe.kind == PrecisionRecipe.MXFP8:
        scales = np.vectorize(lambda a: e8m0_scale(a, fmt.max_finite))(amax_grid)
        codes = np.log2(scales).astype(np.int64) + 127
        return 1.0, scales, codes
    # NVFP4: FP32 tensor scale maps the distribution into block-scale range,
    # E4M3 block scales map each block's amax onto the FP4 maximum.
    t_scale = tensor_amax / (E4M3_MAX * E2M1_MAX) if tensor_amax > 0 else 1.0
    raw = np.where(amax_grid > 0, amax_grid / (E2M1_MAX * t_scale), 1.0)
    codes = E4M3.encode(np.minimum(raw, E4M3_MAX))
    scales = E4M3.decode(codes)
    scales = np.where(scales > 0, scales, 1.0)
    return t_scale, scales, codes


def quantize(x: np.ndarray, recipe: Recipe, tensor_kind: str = "activation",
             stochastic: bool = False, seed: int | None = None,
             with_column_twin: bool = False) -> QuantTensor:
    """Quantize a 2D matrix under the recipe's geometry for `tensor_kind`
    ('activation' | 'weight' | 'grad')."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if np.isnan(x).any():
        raise ValueError("NaN input cannot be quantized")
    if stochastic and seed is None:
        raise ValueError("stochastic rounding requires a seed")
    fmt = recipe.format_for(tensor_kind)
    block = recipe.block_for(tensor_kind)
    amax_grid = _block_amax(x, block)
    t_scale, scales, scale_codes = _scales_from_amax(
        amax_grid, recipe, fmt, float(np.abs(x).max(initial=0.0))
    )
    q = QuantTensor(
        codes=np.zeros_like(x, dtype=np.int32),
        shape=x.shape,
        recipe=recipe,
        tensor_kind=tensor_kind,
        payload_format=fmt.name,
        tensor_scale=t_scale,
        block_scales=scales,
        block_scale_codes=scale_codes,
        block_geometry=(block[0] or x.shape[0], block[1] or x.shape[1]),
    )
    rng = np.random.default_rng(seed) if stochastic else None
    scaled = x / q._decode_scale_grid()
    q.codes = fmt.encode(scaled, stochastic=stochastic, rng=rng)
    if with_column_twin:
        q.column_twin = quantize(
            np.ascontiguousarray(x.T), recipe, tensor_kind,
            stochastic=stochastic, seed=None if seed is None else seed + 1,
        )
    return q


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.dequantize()


def mxfp8_scale(block_amax: float) -> float:
    """E8M0 scale for a 1x32 MXFP8 block: smallest power of two such that
    amax/scale fits the E4M3 range (exponent rounded up, never clipping)."""
    return e8m0_scale(block_amax, E4M3_MAX)


def rht(x: np.ndarray, block: int = 16, seed: int = 0) -> np.ndarray:
    """Random Hadamard transform per `block` of the last axis: x -> (xD)H/sqrt(b)
    with D a seeded +-1 diagonal and H the Sylvester Hadamard matrix."""
    if not is_power_of_two(block):
        raise ValueError(f"Hadamard block must be a power of two, got {block}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % block != 0:
        raise ValueError(f"last dim {x.shape[-1]} not divisible by block {block}")
    h = _hadamard(block) / np.sqrt(block)
    d = _sign_diagonal(block, seed)
    work = x.reshape(-1, block)
    return ((work * d) @ h).reshape(x.shape)


def rht_inverse(y: np.ndarray, block: int = 16, seed: int = 0) -> np.ndarray:
    if not is_power_of_two(block):
        raise ValueError(f"Hadamard block must be a power of two, got {block}")
    y = np.asarray(y, dtype=np.float64)
    h = _hadamard(block) / np.sqrt(block)
    d = _sign_diagonal(block, seed)
    work = y.reshape(-1, block)
    return ((work @ h.T) * d).reshape(y.shape)


def _hadamard(n: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def _sign_diagonal(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.choice([-1.0, 1.0], size=n)


def nvfp4_quantize(x: np.ndarray, transpose_path: bool = False,
                   stochastic: bool = False, seed: int | None = None,
                   rht_block: int = 16, rht_seed: int = 0,
                   tensor_kind: str = "activation") -> QuantTensor:
    """NVFP4 two-level quantization. The transpose (Wgrad) path applies the
    RHT and absorbs the transpose before quantizing; the tensor-level FP32
    scale is measured on the post-RHT values."""
    recipe = make_recipe(PrecisionRecipe.NVFP4, rht=transpose_path,
                         stochastic_rounding=stochastic)
    if stochastic and seed is None:
        raise ValueError("stochastic rounding requires a seed")
    work = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if transpose_path:
        work = np.ascontiguousarray(work.T)
        work = rht(work, block=rht_block, seed=rht_seed)
    return quantize(work, recipe, tensor_kind=tensor_kind,
                    stochastic=stochastic, seed=seed)


@dataclass(frozen=True)
class WeightShard:
    row_offset: int
    col_offset: int
    values: np.ndarray


def primary_weight_cast(shards: list[WeightShard], recipe: Recipe,
                        shape: tuple[int, int],
                        tensor_kind: str = "weight") -> tuple[QuantTensor, list[dict]]:
    """Cast distributed FP32 master-weight fragments directly to the
    quantized format, bit-identically to quantizing the assembled weight.

    Step 1 takes local per-scale-region abs-maxes (absent regions are 0);
    step 2 reduces them globally (emulated AllReduce-max); step 3 casts each
    fragment with the global scales. The trace records the three steps.
    """
    rows, cols = shape
    fmt = recipe.format_for(tensor_kind)
    block = recipe.block_for(tensor_kind)
    br = block[0] or rows
    bc = block[1] or cols
    nr, nc = ceil_div(rows, br), ceil_div(cols, bc)

    covered = np.zeros(shape, dtype=bool)
    local_grids = []
    for s in shards:
        r0, c0 = s.row_offset, s.col_offset
        r1, c1 = r0 + s.values.shape[0], c0 + s.values.shape[1]
        if r1 > rows or c1 > cols:
            raise ValueError("fragment exceeds weight bounds")
        if covered[r0:r1, c0:c1].any():
            raise ValueError("overlapping fragments")
        covered[r0:r1, c0:c1] = True
        grid = np.zeros((nr, nc))
        for i in range(nr):
            for j in range(nc):
                rr0, rr1 = max(i * br, r0), min((i + 1) * br, r1)
                cc0, cc1 = max(j * bc, c0), min((j + 1) * bc, c1)
                if rr0 < rr1 and cc0 < cc1:
                    tile = s.values[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0]
                    grid[i, j] = np.abs(tile).max(initial=0.0)
        local_grids.append(grid)

    global_grid = np.zeros((nr, nc))
    for grid in local_grids:
        global_grid = np.maximum(global_grid, grid)
    tensor_amax = float(global_grid.max(initial=0.0))
    t_scale, scales, scale_codes = _scales_from_amax(global_grid, recipe, fmt, tensor_amax)

    q = QuantTensor(
        codes=np.zeros(shape, dtype=np.int32),
        shape=shape,
        recipe=recipe,
        tensor_kind=tensor_kind,
        payload_format=fmt.name,
        tensor_scale=t_scale,
        block_scales=scales,
        block_scale_codes=scale_codes,
        block_geometry=(br, bc),
    )
    grid = q._decode_scale_grid()
    for s in shards:
        r0, c0 = s.row_offset, s.col_offset
        r1, c1 = r0 + s.values.shape[0], c0 + s.values.shape[1]
        q.codes[r0:r1, c0:c1] = fmt.encode(s.values / grid[r0:r1, c0:c1])

    trace = [
        {"step": "local_absmax", "shards": len(shards),
         "local_amax": [float(g.max(initial=0.0)) for g in local_grids]},
        {"step": "allreduce_max", "tensor_amax": tensor_amax},
        {"step": "partial_cast", "tensor_scale": t_scale},
    ]
    return q, trace


def alignment_pad(counts: list[int] | np.ndarray, recipe: Recipe) -> list[int]:
    """Round per-expert token counts up to the recipe's grouped-path
    multiple (128 for MXFP8/NVFP4 grouped kernels, 16 otherwise)."""
    mult = recipe.grouped_alignment
    return [ceil_div(int(c), mult) * mult if c else 0 for c in np.asarray(counts).tolist()]
