"""Far-field channel: AM onto a carrier, free-space/glass attenuation, zero-IF receiver.

The passband simulation runs at an integer multiple ``D`` of the baseband rate.
The receiver mixes with ``exp(-i 2 pi f n / fs)``, low-passes with two cascaded
length-``D`` boxcars and keeps every ``D``-th sample, aligned so that output
``k`` corresponds to baseband input ``k``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import NonpositiveWavelength, RateMismatch
from .traceio import TraceSet

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class RfChannelConfig:
    """Carrier, rates and attenuation of the far-field link.

    ``boost`` optionally models a frequency switch under load: a
    ``(start, stop, carrier_hz)`` range of baseband samples during which the
    leakage sits on a different carrier.
    """

    carrier_hz: float = 2.565e9
    phase_rad: float = 0.0
    passband_rate_hz: float = 4 * 2.565e9
    baseband_rate_hz: float = 4e6
    rx_bandwidth_hz: float = 2e6
    distance_m: float = 0.25
    glass_loss_db: float = 0.0
    reference_gain: float = 1.0
    boost: tuple[int, int, float] | None = None

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ValueError("distance_m must be > 0")
        if self.glass_loss_db < 0:
            raise ValueError("glass_loss_db must be >= 0")
        if self.rx_bandwidth_hz <= 0:
            raise ValueError("rx_bandwidth_hz must be > 0")

    def replace(self, **changes) -> "RfChannelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def decimation(self) -> int:
        """Passband samples per baseband sample; raises if not a valid integer."""
        fs, fb = self.passband_rate_hz, self.baseband_rate_hz
        if fs <= 2 * self.carrier_hz:
            raise RateMismatch(f"passband rate {fs:g} Hz must exceed twice the carrier {self.carrier_hz:g} Hz")
        if fb <= 0 or fb > fs:
            raise RateMismatch(f"baseband rate {fb:g} Hz must be in (0, {fs:g}]")
        ratio = fs / fb
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise RateMismatch(f"passband/baseband ratio {ratio:g} is not an integer")
        return int(round(ratio))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def gain(cfg: RfChannelConfig) -> float:
    """Amplitude gain: ``reference_gain / d`` scaled by the glass loss."""
    return cfg.reference_gain / cfg.distance_m * 10.0 ** (-cfg.glass_loss_db / 20.0)


def upsample(baseband, factor: int) -> np.ndarray:
    """Linear interpolation by an integer factor along the last axis.

    Sample ``k * factor`` equals input ``k``; the tail after the last input
    sample holds it constant.
    """
    a = np.asarray(baseband, dtype=np.float64)
    n = a.shape[-1]
    if factor == 1:
        return a.copy()
    frac = np.arange(factor) / factor
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    up = a[..., :, None] + (nxt - a)[..., :, None] * frac
    return up.reshape(a.shape[:-1] + (n * factor,))


def _carrier_freq(cfg: RfChannelConfig, n_base: int) -> np.ndarray | float:
    if cfg.boost is None:
        return cfg.carrier_hz
    start, stop, f = cfg.boost
    freq = np.full(n_base, cfg.carrier_hz)
    freq[int(start):int(stop)] = f
    return np.repeat(freq, cfg.decimation)


def modulate(baseband, cfg: RfChannelConfig) -> np.ndarray:
    """``s[n] = gain * A_up[n] * cos(2 pi f n / fs + phi)`` along the last axis."""
    D = cfg.decimation
    up = upsample(baseband, D)
    n = np.arange(up.shape[-1])
    f = _carrier_freq(cfg, up.shape[-1] // D)
    carrier = np.cos(2 * np.pi * np.mod(f * n / cfg.passband_rate_hz, 1.0) + cfg.phase_rad)
    return gain(cfg) * up * carrier


def _boxcar(x: np.ndarray, length: int) -> np.ndarray:
    """Causal moving average of ``length`` samples, zero initial state."""
    c = np.cumsum(x, axis=-1)
    out = c.copy()
    out[..., length:] -= c[..., :-length]
    return out / length


def zero_if_downconvert(passband, cfg: RfChannelConfig) -> np.ndarray:
    """Mix to complex baseband, low-pass and decimate to ``baseband_rate_hz``.

    For an envelope well inside the filter band ``|y| ~= gain * A / 2``; the
    first two outputs carry the filter transient.
    """
    s = np.asarray(passband, dtype=np.float64)
    D = cfg.decimation
    n = np.arange(s.shape[-1])
    lo = np.exp(-2j * np.pi * np.mod(cfg.carrier_hz * n / cfg.passband_rate_hz, 1.0))
    y = _boxcar(_boxcar(s * lo, D), D)
    return y[..., D - 1::D]


def envelope(baseband_iq) -> np.ndarray:
    return np.abs(baseband_iq)


def recover_envelope(baseband_iq, cfg: RfChannelConfig) -> np.ndarray:
    """Envelope estimate ``2 |y| / gain`` in the units of the modulated ``A``."""
    return 2.0 * np.abs(baseband_iq) / gain(cfg)


def receive(baseband, cfg: RfChannelConfig, noise_sigma: float = 0.0, rng=None) -> np.ndarray:
    """Full link: modulate, downconvert, add complex receiver noise at baseband.

    ``noise_sigma`` is the per-component standard deviation.
    """
    y = zero_if_downconvert(modulate(baseband, cfg), cfg)
    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        y = y + rng.normal(0.0, noise_sigma, y.shape) + 1j * rng.normal(0.0, noise_sigma, y.shape)
    return y


def far_field_traces(ts: TraceSet, cfg: RfChannelConfig, noise_sigma: float = 0.0,
                     seed: int = 0, level: float = 1.0, chunk: int = 64) -> TraceSet:
    """Send every trace through the link and return the received magnitudes.

    Traces are offset to a non-negative envelope (``level`` plus the sample
    minus the set minimum). Rows are processed in chunks; noise for row ``t``
    comes from its own stream so the result does not depend on ``chunk``.
    """
    x = ts.samples.astype(np.float64)
    a = level + (x - x.min())
    out = np.empty_like(a)
    for r0 in range(0, len(a), chunk):
        y = zero_if_downconvert(modulate(a[r0:r0 + chunk], cfg), cfg)
        if noise_sigma > 0:
            for i in range(y.shape[0]):
                rng = np.random.default_rng([seed, r0 + i])
                y[i] += rng.normal(0.0, noise_sigma, y.shape[1]) + 1j * rng.normal(0.0, noise_sigma, y.shape[1])
        out[r0:r0 + chunk] = np.abs(y)
    return TraceSet(out)


# ---------------------------------------------------------------------------
# near/far-field boundary


@dataclass(frozen=True)
class BoundaryQuery:
    D: float
    lambda_m: float


def wavelength(freq_hz: float) -> float:
    return SPEED_OF_LIGHT / freq_hz


def field_boundary(q: BoundaryQuery) -> float:
    """Far-field boundary distance ``R = 2 D^2 / lambda``."""
    if not q.lambda_m > 0:
        raise NonpositiveWavelength(f"wavelength must be > 0, got {q.lambda_m}")
    if q.D < 0:
        raise ValueError("D must be >= 0")
    return 2.0 * q.D**2 / q.lambda_m
