"""Mini float formats (E4M3, E5M2, E2M1, E8M0) with table-based codecs.

Codes are stored as small integers with explicit decode tables — the
natural sign/exponent/mantissa byte layout — rather than packed bits.
Rounding is round-to-nearest-even on the value lattice, with an optional
seeded stochastic mode; values beyond the format maximum saturate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FloatFormat:
    name: str
    exponent_bits: int
    mantissa_bits: int
    max_finite: float
    # Ascending nonnegative representable values and their mantissa codes.
    _values: np.ndarray
    _codes: np.ndarray

    def encode(self, x: np.ndarray, stochastic: bool = False,
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Quantize to integer codes: sign bit in bit (e+m), magnitude below."""
        x = np.asarray(x, dtype=np.float64)
        if np.isnan(x).any():
            raise ValueError("NaN input cannot be quantized")
        if stochastic and rng is None:
            raise ValueError("stochastic rounding requires a seeded generator")
        mag = np.abs(x)
        sign = np.signbit(x)
        idx = self._round_indices(mag, stochastic, rng)
        codes = self._codes[idx].astype(np.int32)
        sign_val = 1 << (self.exponent_bits + self.mantissa_bits)
        return np.where(sign, codes + sign_val, codes)

    def _round_indices(self, mag: np.ndarray, stochastic: bool,
                       rng: np.random.Generator | None) -> np.ndarray:
        vals = self._values
        mag = np.minimum(mag, self.max_finite)
        hi = np.searchsorted(vals, mag, side="left")
        hi = np.clip(hi, 0, len(vals) - 1)
        lo = np.clip(hi - 1, 0, len(vals) - 1)
        exact = vals[hi] == mag
        lo = np.where(exact, hi, lo)
        v_lo, v_hi = vals[lo], vals[hi]
        span = v_hi - v_lo
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(span > 0, (mag - v_lo) / np.where(span > 0, span, 1.0), 0.0)
        if stochastic:
            take_hi = rng.random(mag.shape) < frac
        else:
            take_hi = frac > 0.5
            ties = frac == 0.5
            if np.any(ties):
                # ties to even mantissa code
                even_hi = (self._codes[hi] & 1) == 0
                take_hi = np.where(ties, even_hi, take_hi)
        return np.where(take_hi, hi, lo)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        sign_val = 1 << (self.exponent_bits + self.mantissa_bits)
        neg = codes >= sign_val
        mag_codes = np.where(neg, codes - sign_val, codes)
        lut = np.full(int(self._codes.max()) + 1, np.nan)
        lut[self._codes] = self._values
        vals = lut[mag_codes]
        return np.where(neg, -vals, vals)

    def quantize_value(self, x: np.ndarray, stochastic: bool = False,
                       rng: np.random.Generator | None = None) -> np.ndarray:
        """Round to the nearest representable value (decode(encode(x)))."""
        return self.decode(self.encode(x, stochastic=stochastic, rng=rng))

    def representable(self) -> np.ndarray:
        pos = self._values
        return np.concatenate([-pos[::-1][:-1], pos])


def _build_minifloat(name: str, e_bits: int, m_bits: int, bias: int,
                     max_finite: float, special: str) -> FloatFormat:
    """Enumerate nonnegative values of a 1-sign/e/m format.

    special: "ieee" reserves the all-ones exponent row for inf/NaN (E5M2);
    "fn" keeps it finite except the all-ones mantissa NaN slot (E4M3);
    "all" has no reserved codes (E2M1).
    """
    values = [0.0]
    codes = [0]
    max_exp_field = (1 << e_bits) - 1
    for exp_field in range(0, max_exp_field + 1):
        for mant in range(0, (1 << m_bits)):
            if exp_field == 0:
                if mant == 0:
                    continue
                val = (mant / (1 << m_bits)) * 2.0 ** (1 - bias)
            else:
                if exp_field == max_exp_field:
                    if special == "ieee":
                        continue
                    if special == "fn" and mant == (1 << m_bits) - 1:
                        continue  # NaN slot
                val = (1 + mant / (1 << m_bits)) * 2.0 ** (exp_field - bias)
            if val > max_finite:
                continue
            values.append(val)
            codes.append((exp_field << m_bits) | mant)
    order = np.argsort(values)
    return FloatFormat(
        name=name,
        exponent_bits=e_bits,
        mantissa_bits=m_bits,
        max_finite=max_finite,
        _values=np.array(values)[order],
        _codes=np.array(codes)[order],
    )


E4M3 = _build_minifloat("E4M3", 4, 3, 7, 448.0, special="fn")
E5M2 = _build_minifloat("E5M2", 5, 2, 15, 57344.0, special="ieee")
E2M1 = _build_minifloat("E2M1", 2, 1, 1, 6.0, special="all")

FORMATS = {"E4M3": E4M3, "E5M2": E5M2, "E2M1": E2M1}

E8M0_MIN_EXP = -127
E8M0_MAX_EXP = 127


def e8m0_scale(amax: float, target_max: float = 448.0) -> float:
    """Power-of-two scale with the exponent rounded up, so `amax / scale`
    never exceeds `target_max` (clipping-free rule)."""
    if amax < 0:
        raise ValueError("amax must be >= 0")
    if amax == 0:
        return 2.0 ** E8M0_MIN_EXP
    exp = int(np.ceil(np.log2(amax / target_max)))
    exp = min(max(exp, E8M0_MIN_EXP), E8M0_MAX_EXP)
    return 2.0 ** exp


def worst_case_relative_error(fmt: FloatFormat) -> float:
    """Max relative rounding error on normal values: half ULP of the
    mantissa, 2^-(m+1) relative, briefly above it near exponent boundaries."""
    return 2.0 ** (-(fmt.mantissa_bits + 1)) / (1 - 2.0 ** (-(fmt.mantissa_bits + 1)))
