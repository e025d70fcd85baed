"""Quantisation schemes and fake-quantisation ops with straight-through gradients.

Schemes are named by a tiny grammar: ``binary``, ``ternary``, or ``fix<i>.<f>``
where ``i`` counts integer bits including the sign and ``f`` fractional bits.
Quantisation is simulated in real arithmetic: values snap to the scheme's grid
in the forward pass while the backward pass applies the straight-through
estimator with the scheme's clipping rule.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .autodiff import DTYPE, Tensor, record

FLOAT_BITS = 32  # accounting cost of an unquantised value

# Bitwidths that occur in the joint search table.
WEIGHT_BIT_VALUES = (1, 2, 4, 6, 8, 12, 16)
ACTIVATION_BIT_VALUES = (4, 8, 12, 16)

_FIX_RE = re.compile(r"^fix(\d+)\.(\d+)$")


@dataclass(frozen=True)
class QuantScheme:
    """One quantiser: binary, ternary, or fixed-point fix<i>.<f>."""

    kind: str  # "binary" | "ternary" | "fixed"
    int_bits: int = 0
    frac_bits: int = 0

    def __post_init__(self):
        if self.kind not in ("binary", "ternary", "fixed"):
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "fixed" and (self.int_bits < 1 or self.frac_bits < 0):
            raise ValueError("fixed-point needs int_bits >= 1 (sign included)")

    @property
    def total_bits(self) -> int:
        if self.kind == "binary":
            return 1
        if self.kind == "ternary":
            return 2
        return self.int_bits + self.frac_bits

    @property
    def name(self) -> str:
        if self.kind in ("binary", "ternary"):
            return self.kind
        return f"fix{self.int_bits}.{self.frac_bits}"

    def __str__(self) -> str:
        return self.name


def parse_scheme(name: str) -> QuantScheme:
    name = name.strip()
    if name in ("binary", "ternary"):
        return QuantScheme(name)
    m = _FIX_RE.match(name)
    if not m:
        raise ValueError(f"cannot parse quantisation scheme {name!r}")
    return QuantScheme("fixed", int(m.group(1)), int(m.group(2)))


def bit_cost(scheme: QuantScheme | None) -> int:
    """Storage bits per value; unquantised values cost 32."""
    return FLOAT_BITS if scheme is None else scheme.total_bits


@dataclass(frozen=True)
class QuantPair:
    """A joint (weight scheme, activation scheme) choice for one site."""

    weight: QuantScheme
    activation: QuantScheme

    @property
    def name(self) -> str:
        return f"{self.weight.name}/{self.activation.name}"

    def __str__(self) -> str:
        return self.name


def _pair(w: str, a: str) -> QuantPair:
    return QuantPair(parse_scheme(w), parse_scheme(a))


# The joint search table, least to most precise. Index order is part of the
# contract: grid search walks it from the end backwards.
QUANT_PAIRS: tuple[QuantPair, ...] = (
    _pair("binary", "fix2.2"),
    _pair("binary", "fix4.4"),
    _pair("ternary", "fix2.2"),
    _pair("ternary", "fix4.4"),
    _pair("ternary", "fix4.8"),
    _pair("fix1.3", "fix4.4"),
    _pair("fix2.2", "fix4.4"),
    _pair("fix1.5", "fix4.4"),
    _pair("fix3.3", "fix4.4"),
    _pair("fix2.4", "fix4.4"),
    _pair("fix4.4", "fix4.4"),
    _pair("fix4.4", "fix4.8"),
    _pair("fix4.4", "fix8.8"),
    _pair("fix4.8", "fix4.8"),
    _pair("fix4.12", "fix4.4"),
    _pair("fix4.12", "fix4.8"),
    _pair("fix4.12", "fix8.8"),
)


def quant_pairs() -> tuple[QuantPair, ...]:
    return QUANT_PAIRS


def pair_index(pair: QuantPair) -> int:
    return QUANT_PAIRS.index(pair)


def parse_pair(spec) -> QuantPair | None:
    """Resolve a pair from an index, a name, or a ``w<N>a<M>`` shorthand.

    ``None`` or ``"float"`` mean no quantisation. Shorthands pick the table
    row with matching total bitwidths, preferring the most balanced
    integer/fraction split when several match (so ``w6a8`` is fix3.3).
    """
    if spec is None:
        return None
    if isinstance(spec, QuantPair):
        return spec
    if isinstance(spec, int):
        return QUANT_PAIRS[spec]
    text = str(spec).strip().lower()
    if text == "float":
        return None
    if text.isdigit():
        return QUANT_PAIRS[int(text)]
    m = re.match(r"^w(\d+)a(\d+)$", text)
    if m:
        wb, ab = int(m.group(1)), int(m.group(2))
        matches = [p for p in QUANT_PAIRS
                   if p.weight.total_bits == wb and p.activation.total_bits == ab]
        if not matches:
            raise ValueError(f"no search-table row with w{wb}a{ab}")

        def balance(s: QuantScheme) -> int:
            return abs(s.int_bits - s.frac_bits) if s.kind == "fixed" else 0

        matches.sort(key=lambda p: (balance(p.weight), balance(p.activation)))
        return matches[0]
    if "/" in text:
        w, a = text.split("/", 1)
        return QuantPair(parse_scheme(w), parse_scheme(a))
    raise ValueError(f"cannot parse quantisation pair {spec!r}")


# ---------------------------------------------------------------------------
# fake-quantisation ops
# ---------------------------------------------------------------------------


def fixed_grid_limits(int_bits: int, frac_bits: int) -> tuple[float, float, float]:
    """(step, low, high) of the representable fix<i>.<f> grid."""
    step = 2.0 ** -frac_bits
    lo = -(2.0 ** (int_bits - 1))
    hi = 2.0 ** (int_bits - 1) - step
    return step, lo, hi


def quantise_fixed(x: Tensor, int_bits: int, frac_bits: int) -> Tensor:
    """Snap to the fixed-point grid: nearest multiple of 2^-f, ties away from
    zero, clamped to [-2^(i-1), 2^(i-1) - 2^-f]. Gradient passes straight
    through where the input lies inside the clamp range and is zero outside.
    """
    step, lo, hi = fixed_grid_limits(int_bits, frac_bits)
    d = x.data
    q = np.sign(d) * np.floor(np.abs(d) / step + 0.5) * step
    np.clip(q, lo, hi, out=q)
    out = Tensor(q)
    passthrough = (d >= lo) & (d <= hi)

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += g * passthrough

    return record(out, (x,), bw)


def quantise_binary(x: Tensor) -> Tensor:
    """alpha * sign(x) with alpha = mean |x| and sign(0) = +1.

    Straight-through gradient, clipped to zero where |x| > 1.
    """
    d = x.data
    alpha = float(np.mean(np.abs(d))) if d.size else 0.0
    out = Tensor(np.where(d >= 0, alpha, -alpha))
    passthrough = np.abs(d) <= 1.0

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += g * passthrough

    return record(out, (x,), bw)


def quantise_ternary(x: Tensor) -> Tensor:
    """Zero inside the dead zone |x| <= 0.7 mean|x|, else alpha * sign(x)
    where alpha is the mean magnitude of the surviving entries.

    Straight-through gradient, clipped to zero where |x| > 1.
    """
    d = x.data
    delta = 0.7 * float(np.mean(np.abs(d))) if d.size else 0.0
    live = np.abs(d) > delta
    alpha = float(np.mean(np.abs(d[live]))) if live.any() else 0.0
    out = Tensor(np.where(live, np.where(d >= 0, alpha, -alpha), 0.0))
    passthrough = np.abs(d) <= 1.0

    def bw(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad += g * passthrough

    return record(out, (x,), bw)


def quantise(x: Tensor, scheme: QuantScheme | None) -> Tensor:
    """Apply a scheme to a tensor; None means float mode (identity)."""
    if scheme is None:
        return x
    if scheme.kind == "binary":
        return quantise_binary(x)
    if scheme.kind == "ternary":
        return quantise_ternary(x)
    return quantise_fixed(x, scheme.int_bits, scheme.frac_bits)
