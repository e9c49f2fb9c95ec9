"""Synthetic I/Q corpus: eleven modulations, channel impairments, SNR sweep.

Linear digital modulations are shaped with a cyclic root-raised-cosine
pulse: a frame holds exactly ``frame_len / sps`` symbols and the pulse is
applied by circular convolution, so a matched filter recovers every symbol
without inter-symbol interference or edge transients. Multipath and clock
offset are applied circularly for the same reason.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Corpus
from .nn import child_rng


class ModulationType(str, enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "8PSK"
    QAM16 = "16QAM"
    QAM64 = "64QAM"
    PAM4 = "PAM4"
    GFSK = "GFSK"
    CPFSK = "CPFSK"
    BFM = "B-FM"
    AM_DSB = "AM-DSB"
    AM_SSB = "AM-SSB"


ALL_TYPES = tuple(ModulationType)
ANALOG = {ModulationType.BFM, ModulationType.AM_DSB, ModulationType.AM_SSB}
FSK = {ModulationType.GFSK, ModulationType.CPFSK}


def _qam(m: int) -> np.ndarray:
    side = int(math.isqrt(m))
    levels = np.arange(-(side - 1), side, 2, dtype=np.float64)
    pts = (levels[:, None] + 1j * levels[None, :]).ravel()
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


CONSTELLATIONS = {
    ModulationType.BPSK: np.array([-1.0, 1.0], dtype=complex),
    ModulationType.QPSK: np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4))),
    ModulationType.PSK8: np.exp(2j * np.pi * np.arange(8) / 8),
    ModulationType.QAM16: _qam(16),
    ModulationType.QAM64: _qam(64),
    ModulationType.PAM4: np.array([-3.0, -1.0, 1.0, 3.0], dtype=complex) / np.sqrt(5.0),
}


@dataclass(frozen=True)
class FrameSpec:
    samples_per_symbol: int = 8
    frame_len: int = 128
    channels: int = 2

    def __post_init__(self):
        if self.frame_len % self.samples_per_symbol:
            raise ValueError("frame_len must be a multiple of samples_per_symbol")
        if self.channels != 2:
            raise ValueError("frames carry exactly two channels (I and Q)")

    @property
    def n_symbols(self) -> int:
        return self.frame_len // self.samples_per_symbol


@dataclass(frozen=True)
class SynthConfig:
    rolloff: float = 0.35
    gfsk_bt: float = 0.5
    gfsk_index: float = 0.35
    cpfsk_index: float = 0.5
    fm_deviation: float = 0.075  # peak deviation in cycles/sample per unit message
    am_depth: float = 0.8
    message_tones: int = 4
    message_band: float = 1 / 8  # highest message frequency, cycles/sample

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def rrc_spectrum(spec: FrameSpec, rolloff: float) -> np.ndarray:
    """DFT-domain cyclic RRC, scaled so RRC * RRC has unit peak at lag 0."""
    n, sps = spec.frame_len, spec.samples_per_symbol
    f = np.abs(np.fft.fftfreq(n)) * sps  # in units of the symbol rate
    lo, hi = (1 - rolloff) / 2, (1 + rolloff) / 2
    rc = np.where(f <= lo, 1.0, 0.0)
    if rolloff > 0:
        band = (f > lo) & (f <= hi)
        rc[band] = 0.5 * (1 + np.cos(np.pi / rolloff * (f[band] - lo)))
    return np.sqrt(sps * rc)


def matched_filter(frame: np.ndarray, spec: FrameSpec = FrameSpec(), rolloff: float = 0.35) -> np.ndarray:
    """Symbol-spaced matched-filter outputs of a linear-modulation frame."""
    x = frame[0] + 1j * frame[1]
    y = np.fft.ifft(np.fft.fft(x) * rrc_spectrum(spec, rolloff))
    return y[:: spec.samples_per_symbol]


def _linear(mod, spec, cfg, rng):
    symbols = rng.choice(CONSTELLATIONS[mod], size=spec.n_symbols)
    train = np.zeros(spec.frame_len, dtype=complex)
    train[:: spec.samples_per_symbol] = symbols
    return np.fft.ifft(np.fft.fft(train) * rrc_spectrum(spec, cfg.rolloff)), symbols


def _gaussian_taps(bt: float, sps: int, span: int = 4) -> np.ndarray:
    t = np.arange(-span * sps, span * sps + 1) / sps
    sigma = np.sqrt(np.log(2)) / (2 * np.pi * bt)
    g = np.exp(-(t**2) / (2 * sigma**2))
    return g / g.sum()


def _fsk(mod, spec, cfg, rng):
    sps = spec.samples_per_symbol
    pad = 4
    symbols = rng.choice(np.array([-1.0, 1.0]), size=spec.n_symbols + 2 * pad)
    freq = np.repeat(symbols, sps)
    if mod is ModulationType.GFSK:
        freq = np.convolve(freq, _gaussian_taps(cfg.gfsk_bt, sps), mode="same")
        h = cfg.gfsk_index
    else:
        h = cfg.cpfsk_index
    phase = rng.uniform(0, 2 * np.pi) + np.cumsum(np.pi * h * freq / sps)
    start = pad * sps
    return np.exp(1j * phase[start : start + spec.frame_len]), symbols[pad : pad + spec.n_symbols]


def message(spec: FrameSpec, cfg: SynthConfig, rng: np.random.Generator):
    """Seeded sum of sinusoids below ``message_band``, peak-normalized.

    Returns the message and its Hilbert transform (exact for sinusoids).
    """
    n = np.arange(spec.frame_len)
    freqs = rng.uniform(0.1 * cfg.message_band, cfg.message_band, cfg.message_tones)
    amps = rng.uniform(0.2, 1.0, cfg.message_tones)
    phases = rng.uniform(0, 2 * np.pi, cfg.message_tones)
    arg = 2 * np.pi * freqs[:, None] * n + phases[:, None]
    m = amps @ np.sin(arg)
    mh = -(amps @ np.cos(arg))
    peak = np.max(np.abs(m))
    return m / peak, mh / peak


def _analog(mod, spec, cfg, rng):
    m, mh = message(spec, cfg, rng)
    if mod is ModulationType.AM_DSB:
        return (1 + cfg.am_depth * m).astype(complex), m
    if mod is ModulationType.AM_SSB:
        return m + 1j * mh, m
    return np.exp(1j * (rng.uniform(0, 2 * np.pi) + 2 * np.pi * cfg.fm_deviation * np.cumsum(m))), m


def modulate_frame_detail(mod, spec: FrameSpec = FrameSpec(), seed=0, config: SynthConfig = SynthConfig()):
    """Return ``(frame, source, gain)``.

    ``frame`` is the unit-power ``(2, frame_len)`` I/Q array, ``source`` the
    symbols or message that produced it and ``gain`` the normalization factor
    applied to the raw waveform.
    """
    mod = ModulationType(mod)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if mod in CONSTELLATIONS:
        x, src = _linear(mod, spec, config, rng)
    elif mod in FSK:
        x, src = _fsk(mod, spec, config, rng)
    else:
        x, src = _analog(mod, spec, config, rng)
    gain = 1.0 / np.sqrt(np.mean(np.abs(x) ** 2))
    x = x * gain
    return np.stack([x.real, x.imag]), src, gain


def modulate_frame(mod, spec: FrameSpec = FrameSpec(), seed=0, config: SynthConfig = SynthConfig()) -> np.ndarray:
    return modulate_frame_detail(mod, spec, seed, config)[0]


RAYLEIGH_3TAP = ((0, 1.0), (1, 0.5), (2, 0.25))


@dataclass
class ChannelConfig:
    """Per-frame channel. ``snr_db=None`` (or inf) disables the noise."""

    snr_db: float | None = None
    awgn: bool = True
    rayleigh_fading: bool = False
    taps: tuple[tuple[int, float], ...] = ((0, 1.0),)  # (delay, power)
    clock_ppm: float = 0.0
    cfo: float = 0.0  # carrier offset in cycles/sample, off by default
    seed: int = 0

    def __post_init__(self):
        if sum(p for _, p in self.taps) > 1.0 + 1e-12:
            raise ValueError("total tap power must not exceed 1")
        if any(d < 0 for d, _ in self.taps):
            raise ValueError("tap delays must be non-negative")


def normalized_taps(profile=RAYLEIGH_3TAP) -> tuple[tuple[int, float], ...]:
    total = sum(p for _, p in profile)
    return tuple((d, p / total) for d, p in profile)


def apply_channel(frame: np.ndarray, config: ChannelConfig, return_noise: bool = False):
    """Multipath, then clock-offset resampling, then AWGN at the target SNR.

    The noise power is set relative to the signal power after the first two
    stages. Random draws happen in that order, so the same config with
    ``snr_db=None`` reproduces the noiseless channel output exactly.
    """
    rng = np.random.default_rng(config.seed)
    x = frame[0] + 1j * frame[1]
    n = len(x)
    y = np.zeros(n, dtype=complex)
    for delay, power in config.taps:
        if config.rayleigh_fading:
            g = np.sqrt(power / 2) * (rng.standard_normal() + 1j * rng.standard_normal())
        else:
            g = np.sqrt(power)
        y += g * np.roll(x, delay)
    if config.clock_ppm:
        t = np.arange(n) * (1 + config.clock_ppm * 1e-6)
        i0 = np.floor(t).astype(int)
        frac = t - i0
        y = (1 - frac) * y[i0 % n] + frac * y[(i0 + 1) % n]
    if config.cfo:
        y = y * np.exp(2j * np.pi * config.cfo * np.arange(n))
    noise = np.zeros(n, dtype=complex)
    if config.awgn and config.snr_db is not None and math.isfinite(config.snr_db):
        p = np.mean(np.abs(y) ** 2)
        sigma = np.sqrt(p / (2 * 10 ** (config.snr_db / 10)))
        noise = sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        y = y + noise
    out = np.stack([y.real, y.imag])
    if return_noise:
        return out, np.stack([noise.real, noise.imag])
    return out


@dataclass(frozen=True)
class ChannelProfile:
    """Dataset-level channel recipe from which per-frame configs are drawn."""

    rayleigh_fading: bool = True
    taps: tuple[tuple[int, float], ...] = field(default_factory=lambda: normalized_taps(RAYLEIGH_3TAP))
    max_clock_ppm: float = 50.0
    cfo: float = 0.0
    awgn: bool = True

    def to_dict(self) -> dict:
        return {
            "rayleigh_fading": self.rayleigh_fading, "taps": [list(t) for t in self.taps],
            "max_clock_ppm": self.max_clock_ppm, "cfo": self.cfo, "awgn": self.awgn,
        }


def synthesize_frame(
    mod,
    index: int,
    snr_db: float | None,
    seed: int = 0,
    spec: FrameSpec = FrameSpec(),
    config: SynthConfig = SynthConfig(),
    profile: ChannelProfile = ChannelProfile(),
    return_noise: bool = False,
):
    """Frame ``index`` of modulation ``mod`` as produced by ``generate_dataset``."""
    mod = ModulationType(mod)
    mod_id = ALL_TYPES.index(mod)
    clean = modulate_frame(mod, spec, child_rng(seed, mod_id, index, 0), config)
    crng = child_rng(seed, mod_id, index, 1)
    ppm = crng.uniform(-profile.max_clock_ppm, profile.max_clock_ppm) if profile.max_clock_ppm else 0.0
    ch = ChannelConfig(
        snr_db=snr_db, awgn=profile.awgn, rayleigh_fading=profile.rayleigh_fading,
        taps=profile.taps, clock_ppm=ppm, cfo=profile.cfo, seed=int(crng.integers(2**63)),
    )
    return apply_channel(clean, ch, return_noise)


def generate_dataset(
    classes,
    frames_per_class: int,
    snr_values,
    seed: int = 0,
    spec: FrameSpec = FrameSpec(),
    config: SynthConfig = SynthConfig(),
    profile: ChannelProfile = ChannelProfile(),
) -> Corpus:
    """Frames stratified evenly over ``snr_values`` for every class.

    Each frame draws from its own stream keyed by (seed, modulation, frame
    number), so a class's frames do not depend on which other classes are
    generated alongside it.
    """
    classes = [ModulationType(c) for c in classes]
    snr_values = list(snr_values)
    if not classes or not snr_values:
        raise ValueError("need at least one class and one SNR value")
    if frames_per_class % len(snr_values):
        raise ValueError(
            f"{frames_per_class} frames per class cannot be split evenly over {len(snr_values)} SNR values"
        )
    per_snr = frames_per_class // len(snr_values)
    n = len(classes) * frames_per_class
    frames = np.empty((n, 2, spec.frame_len), dtype=np.float32)
    labels = np.repeat(np.arange(len(classes)), frames_per_class)
    snrs = np.tile(np.repeat(np.asarray(snr_values), per_snr), len(classes))
    row = 0
    for mod in classes:
        for i in range(frames_per_class):
            frames[row] = synthesize_frame(mod, i, float(snrs[row]), seed, spec, config, profile)
            row += 1
    return Corpus(frames, labels, snrs, [m.value for m in classes])


def parse_snr_grid(text: str) -> list[int]:
    """``"2:40:2"`` (inclusive range) or ``"10,20,30"``."""
    if ":" in text:
        lo, hi, step = (int(v) for v in text.split(":"))
        if step <= 0 or hi < lo:
            raise ValueError(f"bad SNR range {text!r}")
        return list(range(lo, hi + 1, step))
    return [int(v) for v in text.split(",") if v.strip()]
