"""Prime-dilated convolution: prime-ratio algebra, dilated locations, filters.

On a log-frequency spectrogram with B bins per octave, the bin distance
between the m-th and n-th harmonic of any fundamental is |B*log2(m/n)|,
independent of the fundamental.  Every integer n >= 2 factors exactly into
a product of prime ratios r(p) = p / 2^s in (1, 2], so the distance from a
fundamental to any integer harmonic is an integer combination of the
per-prime distances B*log2(r(p)), each at most B bins away.  A sparse
frequency-axis filter with taps at those (rounded) distances therefore
reaches every integer harmonic by stacking itself across layers, with a
fixed receptive field of B+1 bins (asymmetric) or 2B+1 (symmetric).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import dsp


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n < 4:
        return True
    if n % 2 == 0:
        return False
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


def first_primes(count: int) -> tuple[int, ...]:
    out: list[int] = []
    n = 2
    while len(out) < count:
        if is_prime(n):
            out.append(n)
        n += 1
    return tuple(out)


def prime_ratio(p: int) -> Fraction:
    """r(p) = p / 2^s with the largest s such that 2^s < p; exact, in (1, 2]."""
    if not is_prime(p):
        raise ValueError(f"{p} is not prime")
    s = 0
    while 2 ** (s + 1) < p:
        s += 1
    return Fraction(p, 2**s)


def _two_exponent(p: int) -> int:
    """The s in r(p) = p / 2^s (zero for p = 2)."""
    s = 0
    while 2 ** (s + 1) < p:
        s += 1
    return s


@dataclass(frozen=True)
class PrimeRatioDecomposition:
    """n = prod r(p)^alpha_p, exact in rational arithmetic."""

    n: int
    exponents: dict[int, int]

    def reconstruct(self) -> Fraction:
        acc = Fraction(1)
        for p, a in self.exponents.items():
            acc *= prime_ratio(p) ** a
        return acc


def prime_ratio_decompose(n: int) -> PrimeRatioDecomposition:
    """Decompose n >= 2 into prime-ratio powers.

    Each ordinary prime factor p^a contributes a to alpha_p and a*s(p) to
    alpha_2, since p = r(2)^s(p) * r(p).
    """
    if n < 2:
        raise ValueError(f"prime-ratio decomposition needs n >= 2, got {n}")
    exponents: dict[int, int] = {}

    def add_factor(p: int) -> None:
        exponents[p] = exponents.get(p, 0) + 1
        s = _two_exponent(p)
        if s:
            exponents[2] = exponents.get(2, 0) + s

    rest = n
    f = 2
    while f * f <= rest:
        while rest % f == 0:
            add_factor(f)
            rest //= f
        f += 1
    if rest > 1:
        add_factor(rest)
    return PrimeRatioDecomposition(n, dict(sorted(exponents.items())))


def harmonic_distance(n: int, m: int, bins_per_octave: int) -> float:
    """Bin distance between the n-th and m-th harmonics: |B*log2(m/n)|.

    Computed with the larger index on top so the result is symmetric in
    (n, m) down to the last bit.
    """
    if n < 1 or m < 1:
        raise ValueError("harmonic indices must be >= 1")
    hi, lo = (m, n) if m >= n else (n, m)
    return bins_per_octave * math.log2(hi / lo)


@dataclass(frozen=True)
class DilatedLocations:
    """Integer tap positions of a prime-dilated filter.

    ``prime_locations`` keeps the per-prime rounding; distinct primes that
    round to the same bin are merged into a single location (and share one
    trainable entry), so ``locations`` may be shorter than num_primes + 1.
    """

    bins_per_octave: int
    num_primes: int
    symmetric: bool
    locations: tuple[int, ...]
    prime_locations: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if 0 not in self.locations:
            raise ValueError("location 0 must be present")
        lo = -self.bins_per_octave if self.symmetric else 0
        if any(not lo <= k <= self.bins_per_octave for k in self.locations):
            raise ValueError("locations out of receptive-field range")
        if self.symmetric and any(-k not in self.locations for k in self.locations):
            raise ValueError("symmetric locations must be closed under negation")

    @property
    def filter_length(self) -> int:
        b = self.bins_per_octave
        return 2 * b + 1 if self.symmetric else b + 1


def _nearest_bin(x: float) -> int:
    # round-half-down so exact .5 ties go to the smaller bin
    return math.ceil(x - 0.5)


def dilated_locations(
    bins_per_octave: int, num_primes: int, symmetric: bool = False
) -> DilatedLocations:
    """Tap positions nearest to B*log2(r(p)) for the first ``num_primes`` primes."""
    if bins_per_octave < 1 or num_primes < 1:
        raise ValueError("bins_per_octave and num_primes must be >= 1")
    prime_locs = []
    locs = {0}
    for p in first_primes(num_primes):
        k = _nearest_bin(bins_per_octave * math.log2(prime_ratio(p)))
        prime_locs.append((p, k))
        locs.add(k)
    if symmetric:
        locs |= {-k for k in locs}
    return DilatedLocations(
        bins_per_octave=bins_per_octave,
        num_primes=num_primes,
        symmetric=symmetric,
        locations=tuple(sorted(locs)),
        prime_locations=tuple(prime_locs),
    )


@dataclass
class PdcFilter:
    """Trainable taps ``v`` (one per distinct location) plus their positions."""

    locations: DilatedLocations
    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v)
        if self.v.shape != (len(self.locations.locations),):
            raise ValueError(
                f"filter has {self.v.size} taps, locations need "
                f"{len(self.locations.locations)}"
            )

    @property
    def bins_per_octave(self) -> int:
        return self.locations.bins_per_octave

    @property
    def expanded(self) -> np.ndarray:
        """Dense filter after dilation; zeros everywhere but the tap locations."""
        return expand_filter(self.v, self.locations)


def expand_filter(v: np.ndarray, locations: DilatedLocations) -> np.ndarray:
    """Dense filter w with w[k_j] = v_j and zeros elsewhere.

    Asymmetric filters have length B+1 indexed 0..B; symmetric ones have
    length 2B+1 indexed -B..B (stored with offset B).
    """
    v = np.asarray(v)
    if v.shape != (len(locations.locations),):
        raise ValueError("tap count does not match location count")
    w = np.zeros(locations.filter_length, dtype=v.dtype)
    offset = locations.bins_per_octave if locations.symmetric else 0
    for tap, k in zip(v, locations.locations):
        w[k + offset] = tap
    return w


def _check_spectrogram_input(x, filt: PdcFilter) -> np.ndarray:
    if isinstance(x, dsp.Spectrogram):
        if x.kind != "cqt":
            raise ValueError(
                f"PDC requires a log-frequency spectrogram, got kind {x.kind!r}"
            )
        if x.bins_per_octave != filt.bins_per_octave:
            raise ValueError(
                f"bins-per-octave mismatch: input {x.bins_per_octave}, "
                f"filter {filt.bins_per_octave}"
            )
        return x.data
    return np.asarray(x)


def _shift_accumulate(x: np.ndarray, taps, shifts) -> np.ndarray:
    """sum_j taps[j] * x shifted by shifts[j] along axis -2, zero padded."""
    out = np.zeros_like(x)
    size = x.shape[-2]
    for tap, k in zip(taps, shifts):
        if k >= size or -k >= size:
            continue
        if k >= 0:
            dst = out[..., : size - k, :] if k else out
            src = x[..., k:, :] if k else x
        else:
            dst = out[..., -k:, :]
            src = x[..., : size + k, :]
        dst += tap * src
    return out


def pdc_conv_forward(x, filt: PdcFilter) -> np.ndarray:
    """Convolve the dilated filter along the frequency axis (axis -2).

    Output bin k of an asymmetric filter accumulates input bins k..k+B,
    i.e. the filter reaches upward toward higher harmonics; the symmetric
    filter reaches both ways.  Zero padding keeps the bin count unchanged,
    and time frames never mix.  Accepts a Spectrogram (must be CQT with a
    matching B) or a plain array of shape (..., K, T).
    """
    data = _check_spectrogram_input(x, filt)
    return _shift_accumulate(data, filt.v, filt.locations.locations)


def pdc_conv_backward(x, filt: PdcFilter, upstream: np.ndarray):
    """Exact gradients of pdc_conv_forward.

    Returns (grad_x, grad_v); grad_v has one entry per trainable tap, the
    structural zeros of the expanded filter receive no gradient.
    """
    data = _check_spectrogram_input(x, filt)
    upstream = np.asarray(upstream)
    if upstream.shape != data.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {data.shape}")
    locs = filt.locations.locations
    grad_x = _shift_accumulate(upstream, filt.v, tuple(-k for k in locs))
    size = data.shape[-2]
    grad_v = np.zeros(len(locs), dtype=np.float64)
    for j, k in enumerate(locs):
        if k >= size or -k >= size:
            continue
        if k >= 0:
            g = upstream[..., : size - k, :] if k else upstream
            xs = data[..., k:, :] if k else data
        else:
            g = upstream[..., -k:, :]
            xs = data[..., : size + k, :]
        grad_v[j] = np.sum(g * xs)
    return grad_x, grad_v.astype(filt.v.dtype, copy=False)
