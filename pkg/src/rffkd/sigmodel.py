"""Synthetic transmitter fleet, impairment model, Rician block fading and frame archives.

The transmit model is applied verbatim::

    b[n] = alpha * cos(2*pi*f0*t + phi) * b_I[n] - j * sin(2*pi*f0*t) * b_Q[n]

with ``t = n * T_s``. Note that this zeroes the Q rail wherever
``sin(2*pi*f0*t) == 0``, including ``t = 0``; it is kept as written.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

ARCHIVE_MAGIC = b"DRFX"
ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class DeviceFingerprint:
    device_id: int
    alpha: float
    phi: float
    f0: float

    def validate(self) -> "DeviceFingerprint":
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"device {self.device_id}: alpha={self.alpha} outside (0, 1]")
        if not 0.0 < self.phi <= TWO_PI:
            raise ValueError(f"device {self.device_id}: phi={self.phi} outside (0, 2*pi]")
        if not math.isfinite(self.f0):
            raise ValueError(f"device {self.device_id}: f0 must be finite")
        return self


@dataclass(frozen=True)
class ChannelConfig:
    ricean_k: float = 10.0
    noise_var: float = 0.1
    sample_interval: float = 1e-6
    n_samples: int = 4096
    # None draws the LoS phase uniformly per frame
    los_phase: float | None = None

    def validate(self) -> "ChannelConfig":
        if self.ricean_k < 0 or self.noise_var < 0:
            raise ValueError("ricean_k and noise_var must be nonnegative")
        if self.sample_interval <= 0 or self.n_samples <= 0:
            raise ValueError("sample_interval and n_samples must be positive")
        return self


@dataclass(frozen=True)
class WaveformConfig:
    oversample: int = 4


@dataclass
class IqFrame:
    i: np.ndarray
    q: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.i.shape != self.q.shape or self.i.ndim != 1:
            raise ValueError(f"I/Q rails must be equal-length vectors, got {self.i.shape} and {self.q.shape}")

    @property
    def n(self) -> int:
        return self.i.size

    @property
    def samples(self) -> np.ndarray:
        return self.i + 1j * self.q

    @classmethod
    def from_complex(cls, s: np.ndarray, label: int, meta: dict | None = None) -> "IqFrame":
        return cls(np.real(s).copy(), np.imag(s).copy(), int(label), dict(meta or {}))


def noise_var_for_snr(snr_db: float, signal_power: float = 1.0) -> float:
    return signal_power / 10.0 ** (snr_db / 10.0)


# ---------------------------------------------------------------- waveform

def qpsk_symbols(rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent +-1/sqrt(2) symbols on each rail."""
    scale = 1.0 / math.sqrt(2.0)
    return (rng.choice((-scale, scale), size=count), rng.choice((-scale, scale), size=count))


def rect_shape(symbols: np.ndarray, oversample: int, n: int) -> np.ndarray:
    """Hold each symbol for ``oversample`` samples, truncated to ``n``."""
    return np.repeat(np.asarray(symbols, dtype=np.float64), oversample)[:n]


def baseband_ideal(rng: np.random.Generator, cfg: WaveformConfig, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Rectangular-pulse QPSK rails ``(b_I, b_Q)`` of length ``n``, unit average power."""
    count = -(-n // cfg.oversample)
    sym_i, sym_q = qpsk_symbols(rng, count)
    return rect_shape(sym_i, cfg.oversample, n), rect_shape(sym_q, cfg.oversample, n)


def apply_impairments(b_i: np.ndarray, b_q: np.ndarray, fp: DeviceFingerprint,
                      t: np.ndarray) -> np.ndarray:
    fp.validate()
    theta = TWO_PI * fp.f0 * np.asarray(t, dtype=np.float64)
    return fp.alpha * np.cos(theta + fp.phi) * b_i - 1j * np.sin(theta) * b_q


def rician_gain(rng: np.random.Generator | None, k: float, los: complex = 1.0 + 0.0j,
                scatter: complex | None = None) -> complex:
    """Scalar Rician coefficient ``sqrt(K/(K+1)) h + sqrt(1/(K+1)) h~``.

    ``scatter`` (h~) is drawn from CN(0, 1) unless given. ``K`` is linear.
    """
    if k < 0:
        raise ValueError(f"Rician K must be nonnegative, got {k}")
    if scatter is None:
        scatter = complex(rng.normal(), rng.normal()) / math.sqrt(2.0)
    if math.isinf(k):
        return complex(los)
    return math.sqrt(k / (k + 1.0)) * los + math.sqrt(1.0 / (k + 1.0)) * scatter


def synthesize_frame(fp: DeviceFingerprint, ch: ChannelConfig, rng: np.random.Generator | int,
                     waveform: WaveformConfig = WaveformConfig()) -> IqFrame:
    """One received frame ``s[n] = H b[n] + noise`` with a single H per frame.

    Passing an integer seed makes the frame a pure function of
    ``(fp, ch, seed)``; the seed is recorded in ``meta``.
    """
    fp.validate()
    ch.validate()
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    n = ch.n_samples
    t = np.arange(n) * ch.sample_interval
    b_i, b_q = baseband_ideal(rng, waveform, n)
    b = apply_impairments(b_i, b_q, fp, t)
    los_phase = rng.uniform(0.0, TWO_PI) if ch.los_phase is None else ch.los_phase
    h = rician_gain(rng, ch.ricean_k, los=complex(math.cos(los_phase), math.sin(los_phase)))
    s = h * b
    sig_power = float(np.mean(np.abs(s) ** 2))
    if ch.noise_var > 0:
        s = s + math.sqrt(ch.noise_var / 2.0) * (rng.normal(size=n) + 1j * rng.normal(size=n))
    snr_db = 10.0 * math.log10(sig_power / ch.noise_var) if ch.noise_var > 0 and sig_power > 0 else math.inf
    meta = {"seed": seed, "snr_db": snr_db, "h": [h.real, h.imag], "los_phase": los_phase}
    return IqFrame.from_complex(s, fp.device_id, meta)


# ---------------------------------------------------------------- fleets

@dataclass(frozen=True)
class FleetRanges:
    alpha: tuple[float, float] = (0.5, 1.0)
    phi: tuple[float, float] = (0.0, TWO_PI)
    f0: tuple[float, float] = (1.0, 500.0)
    alpha_gap: float = 0.01
    phi_gap: float = 0.02
    f0_gap: float = 20.0


def separated(a: DeviceFingerprint, b: DeviceFingerprint, r: FleetRanges) -> bool:
    return (abs(a.alpha - b.alpha) >= r.alpha_gap or abs(a.phi - b.phi) >= r.phi_gap
            or abs(a.f0 - b.f0) >= r.f0_gap)


def _draw_in(rng: np.random.Generator, lo: float, hi: float, upper_closed: bool) -> float:
    if hi <= lo:
        return hi
    u = rng.uniform(lo, hi)
    # map [lo, hi) onto (lo, hi] for parameters whose open end is the lower one
    return lo + hi - u if upper_closed else u


def sample_fleet(rng: np.random.Generator, n_devices: int,
                 ranges: FleetRanges = FleetRanges(), max_draws: int = 1000) -> list[DeviceFingerprint]:
    """Draw ``n_devices`` fingerprints, rejecting candidates too close to an accepted one.

    A pair counts as separated when any one parameter differs by at least
    its gap. Raises ``ValueError`` after ``max_draws`` rejections.
    """
    if n_devices < 2:
        raise ValueError(f"a fleet needs at least 2 devices, got {n_devices}")
    if ranges.alpha[0] < 0.0 or not 0.0 < ranges.alpha[1] <= 1.0:
        raise ValueError(f"alpha range {ranges.alpha} outside (0, 1]")
    if ranges.phi[0] < 0.0 or not 0.0 < ranges.phi[1] <= TWO_PI:
        raise ValueError(f"phi range {ranges.phi} outside (0, 2*pi]")
    fleet: list[DeviceFingerprint] = []
    rejected = 0
    while len(fleet) < n_devices:
        cand = DeviceFingerprint(
            device_id=len(fleet),
            alpha=_draw_in(rng, *ranges.alpha, upper_closed=True),
            phi=_draw_in(rng, *ranges.phi, upper_closed=True),
            f0=_draw_in(rng, *ranges.f0, upper_closed=False),
        )
        if all(separated(cand, other, ranges) for other in fleet):
            fleet.append(cand.validate())
            continue
        rejected += 1
        if rejected >= max_draws:
            raise ValueError(
                f"could not place device {len(fleet)} of {n_devices} after {max_draws} rejected draws; "
                f"ranges {ranges} leave no room for the separation floors")
    return fleet


def synthesize_fleet_frames(fleet: Sequence[DeviceFingerprint], ch: ChannelConfig, per_device: int,
                            rng: np.random.Generator,
                            waveform: WaveformConfig = WaveformConfig()) -> list[IqFrame]:
    """``per_device`` frames per device, device-major order, each with its own recorded seed."""
    seeds = rng.integers(0, 2**63, size=(len(fleet), per_device), dtype=np.uint64)
    return [synthesize_frame(fp, ch, int(seeds[d, j]), waveform)
            for d, fp in enumerate(fleet) for j in range(per_device)]


def save_fleet(path: str | Path, fleet: Sequence[DeviceFingerprint]) -> None:
    Path(path).write_text(json.dumps([asdict(fp) for fp in fleet], indent=2))


def load_fleet(path: str | Path) -> list[DeviceFingerprint]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise ValueError(f"{path}: fleet file must be a JSON array")
    fleet = []
    for k, item in enumerate(raw):
        try:
            fleet.append(DeviceFingerprint(int(item["device_id"]), float(item["alpha"]),
                                           float(item["phi"]), float(item["f0"])).validate())
        except KeyError as exc:
            raise ValueError(f"{path}: entry {k} missing field {exc.args[0]!r}") from None
    return fleet


# ---------------------------------------------------------------- archive

_HEADER = struct.Struct("<4sIII")
_FRAME_HEAD = struct.Struct("<IQ")


def write_archive(path: str | Path, frames: Sequence[IqFrame]) -> None:
    """Little-endian frame archive: header then (label, seed, I[N] f32, Q[N] f32) per frame."""
    n = frames[0].n if frames else 0
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, n, len(frames)))
        for fr in frames:
            if fr.n != n:
                raise ValueError(f"archive frames must share length {n}, got {fr.n}")
            seed = fr.meta.get("seed")
            fh.write(_FRAME_HEAD.pack(fr.label, 0 if seed is None else int(seed)))
            fh.write(fr.i.astype("<f4").tobytes())
            fh.write(fr.q.astype("<f4").tobytes())


def read_archive(path: str | Path) -> list[IqFrame]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, n, count = _HEADER.unpack_from(blob, 0)
    if magic != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != ARCHIVE_VERSION:
        raise ValueError(f"{path}: unsupported archive version {version}")
    stride = _FRAME_HEAD.size + 8 * n
    need = _HEADER.size + count * stride
    if len(blob) < need:
        raise ValueError(f"{path}: truncated at byte {len(blob)}, expected {need}")
    frames = []
    off = _HEADER.size
    for _ in range(count):
        label, seed = _FRAME_HEAD.unpack_from(blob, off)
        body = np.frombuffer(blob, dtype="<f4", count=2 * n, offset=off + _FRAME_HEAD.size)
        frames.append(IqFrame(body[:n].astype(np.float64), body[n:].astype(np.float64), int(label),
                              {"seed": int(seed), "offset": off}))
        off += stride
    return frames
