"""STFT featurization, augmentation, stratified splits and raw I/Q ingestion."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .sigmodel import ChannelConfig, DeviceFingerprint, IqFrame, WaveformConfig, synthesize_fleet_frames

WINDOWS = ("rectangular", "hann")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class StftParams:
    window_len: int = 64
    hop: int = 32
    window_fn: str = "hann"

    def validate(self) -> "StftParams":
        if self.window_len < 1 or self.hop < 1:
            raise ValueError(f"window_len and hop must be >= 1, got {self.window_len}, {self.hop}")
        if self.window_fn not in WINDOWS:
            raise ValueError(f"window_fn must be one of {WINDOWS}, got {self.window_fn!r}")
        return self

    def n_frames(self, n: int) -> int:
        return (n - self.window_len) // self.hop + 1


@dataclass
class Spectrogram:
    mags: np.ndarray  # (F, T)
    label: int
    params: StftParams


def window(name: str, length: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(length)
    if name == "hann":
        # periodic Hann, the usual STFT choice
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    raise ValueError(f"unknown window {name!r}; expected one of {WINDOWS}")


def stft_magnitude(samples: np.ndarray, params: StftParams) -> np.ndarray:
    """Raw two-sided |DFT| per window, shape ``(window_len, T)``."""
    params.validate()
    samples = np.asarray(samples)
    n, w = samples.size, params.window_len
    if w > n:
        raise ValueError(f"window of {w} samples is longer than the {n}-sample frame")
    t = params.n_frames(n)
    idx = np.arange(w)[None, :] + params.hop * np.arange(t)[:, None]
    segs = samples[idx] * window(params.window_fn, w)
    return np.abs(np.fft.fft(segs, axis=1)).T


def compress(mags: np.ndarray) -> np.ndarray:
    """``log(1 + m)`` then zero-mean, unit-variance over the whole grid (all-zero if constant)."""
    x = np.log1p(mags)
    sd = x.std()
    if sd == 0.0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def stft(frame: IqFrame, window_len: int = 64, hop: int = 32, window_fn: str = "hann",
         normalize: bool = True) -> Spectrogram:
    params = StftParams(window_len, hop, window_fn)
    mags = stft_magnitude(frame.samples, params)
    return Spectrogram(compress(mags) if normalize else mags, frame.label, params)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    """Each component is off when its field is None."""
    noise_snr_db: tuple[float, float] | None = None
    max_shift: int | None = None
    gain: tuple[float, float] | None = None


def circular_shift(frame: IqFrame, k: int) -> IqFrame:
    return IqFrame(np.roll(frame.i, k), np.roll(frame.q, k), frame.label, {**frame.meta, "shift": int(k)})


def scale_gain(frame: IqFrame, g: float) -> IqFrame:
    return IqFrame(frame.i * g, frame.q * g, frame.label, {**frame.meta, "gain": float(g)})


def add_noise(frame: IqFrame, snr_db: float, rng: np.random.Generator) -> IqFrame:
    s = frame.samples
    power = float(np.mean(np.abs(s) ** 2))
    var = power / 10.0 ** (snr_db / 10.0)
    noisy = s + math.sqrt(var / 2.0) * (rng.normal(size=s.size) + 1j * rng.normal(size=s.size))
    return IqFrame.from_complex(noisy, frame.label, {**frame.meta, "aug_snr_db": float(snr_db)})


def augment(frame: IqFrame, rng: np.random.Generator, policy: AugmentPolicy) -> IqFrame:
    out = frame
    if policy.gain is not None:
        out = scale_gain(out, rng.uniform(*policy.gain))
    if policy.max_shift is not None:
        out = circular_shift(out, int(rng.integers(0, policy.max_shift + 1)))
    if policy.noise_snr_db is not None:
        out = add_noise(out, rng.uniform(*policy.noise_snr_db), rng)
    return out


# ---------------------------------------------------------------- datasets

@dataclass
class SplitData:
    x: np.ndarray       # (n, F, T)
    y: np.ndarray       # (n,)
    source: np.ndarray  # index of the originating frame

    def __len__(self) -> int:
        return int(self.y.size)

    def spectrograms(self, params: StftParams) -> list[Spectrogram]:
        return [Spectrogram(m, int(l), params) for m, l in zip(self.x, self.y)]


@dataclass
class DatasetSplit:
    train: SplitData
    val: SplitData
    test: SplitData
    split_seed: int
    params: StftParams = field(default_factory=StftParams)

    def split(self, name: str) -> SplitData:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    @property
    def num_classes(self) -> int:
        return int(max(s.y.max() for s in (self.train, self.val, self.test))) + 1

    @property
    def input_shape(self) -> tuple[int, int]:
        return tuple(self.train.x.shape[1:])


def stratified_split(labels: np.ndarray, rng: np.random.Generator, ratios=(6, 2, 2),
                     min_per_split: int = 5) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-label shuffled 6:2:2 partition; each split sorted by original index."""
    labels = np.asarray(labels)
    total = float(sum(ratios))
    parts: list[list[int]] = [[], [], []]
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(idx.size)]
        n_tr = int(round(idx.size * ratios[0] / total))
        n_va = int(round(idx.size * ratios[1] / total))
        chunks = (idx[:n_tr], idx[n_tr:n_tr + n_va], idx[n_tr + n_va:])
        for name, chunk in zip(SPLITS, chunks):
            if chunk.size < min_per_split:
                raise ValueError(f"label {lab}: only {chunk.size} samples in {name} split "
                                 f"(need {min_per_split}); add more frames per device")
        for part, chunk in zip(parts, chunks):
            part.extend(chunk.tolist())
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


def featurize(frames: Sequence[IqFrame], params: StftParams) -> np.ndarray:
    return np.stack([compress(stft_magnitude(f.samples, params)) for f in frames])


def build_dataset_from_frames(frames: Sequence[IqFrame], params: StftParams, rng: np.random.Generator,
                              policy: AugmentPolicy = AugmentPolicy()) -> DatasetSplit:
    """Split frames 6:2:2 by label, augment the training frames only, then featurize."""
    params.validate()
    split_seed = int(rng.integers(0, 2**63))
    labels = np.array([f.label for f in frames])
    tr, va, te = stratified_split(labels, np.random.default_rng(split_seed))
    aug_seeds = rng.integers(0, 2**63, size=tr.size, dtype=np.uint64)
    train_frames = [augment(frames[i], np.random.default_rng(int(s)), policy) for i, s in zip(tr, aug_seeds)]

    def pack(idx, fr):
        return SplitData(featurize(fr, params), labels[idx].astype(np.int64), idx)

    return DatasetSplit(pack(tr, train_frames), pack(va, [frames[i] for i in va]),
                        pack(te, [frames[i] for i in te]), split_seed, params)


def build_dataset(fleet: Sequence[DeviceFingerprint], ch: ChannelConfig, per_device: int,
                  rng: np.random.Generator, params: StftParams = StftParams(),
                  policy: AugmentPolicy = AugmentPolicy(),
                  waveform: WaveformConfig = WaveformConfig()) -> DatasetSplit:
    if per_device < 10:
        raise ValueError(f"per_device must be >= 10, got {per_device}")
    frames = synthesize_fleet_frames(fleet, ch, per_device, rng, waveform)
    return build_dataset_from_frames(frames, params, rng, policy)


def save_dataset(path: str | Path, ds: DatasetSplit) -> None:
    arrays = {}
    for name in SPLITS:
        s = ds.split(name)
        arrays[f"{name}_x"], arrays[f"{name}_y"], arrays[f"{name}_src"] = s.x, s.y, s.source
    np.savez(path, split_seed=np.uint64(ds.split_seed),
             params=np.array(json.dumps(asdict(ds.params))), **arrays)


def load_dataset(path: str | Path) -> DatasetSplit:
    with np.load(path) as z:
        parts = [SplitData(z[f"{n}_x"], z[f"{n}_y"], z[f"{n}_src"]) for n in SPLITS]
        params = StftParams(**json.loads(str(z["params"])))
        return DatasetSplit(*parts, split_seed=int(z["split_seed"]), params=params)


def dataset_manifest(ds: DatasetSplit, frames: Sequence[IqFrame], archive_name: str) -> list[dict]:
    """One ``{split, file, offset, label}`` record per sample; offset is the frame's byte offset."""
    rows = []
    for name in SPLITS:
        s = ds.split(name)
        for src, lab in zip(s.source, s.y):
            off = frames[int(src)].meta.get("offset", int(src))
            rows.append({"split": name, "file": archive_name, "offset": int(off), "label": int(lab)})
    return rows


# ---------------------------------------------------------------- ingestion

@dataclass(frozen=True)
class IqLayout:
    """How to read raw captures.

    ``encoding`` is ``"f32"`` or ``"i16"`` (interleaved I, Q). Labels come
    from ``label`` for a single file, or from ``manifest``: a JSON object
    mapping file names to labels, for a directory of captures.
    """
    encoding: str = "f32"
    frame_len: int = 4096
    label: int | None = None
    manifest: str | None = None
    pattern: str = "*"


_DTYPES = {"f32": ("<f4", 1.0), "i16": ("<i2", 1.0 / 32768.0)}


def _read_frames(path: Path, layout: IqLayout, label: int) -> list[IqFrame]:
    dtype, scale = _DTYPES[layout.encoding]
    item = np.dtype(dtype).itemsize
    blob = path.read_bytes()
    frame_bytes = 2 * item * layout.frame_len
    if len(blob) % frame_bytes:
        start = len(blob) - len(blob) % frame_bytes
        raise ValueError(f"{path}: truncated frame at byte offset {start} "
                         f"({len(blob) - start} of {frame_bytes} bytes)")
    raw = np.frombuffer(blob, dtype=dtype).astype(np.float64) * scale
    raw = raw.reshape(-1, layout.frame_len, 2)
    return [IqFrame(r[:, 0].copy(), r[:, 1].copy(), label,
                    {"file": path.name, "offset": k * frame_bytes, "seed": None})
            for k, r in enumerate(raw)]


def ingest_iq(path: str | Path, layout: IqLayout) -> list[IqFrame]:
    if layout.encoding not in _DTYPES:
        raise ValueError(f"unknown sample encoding {layout.encoding!r}; expected one of {sorted(_DTYPES)}")
    if layout.frame_len < 1:
        raise ValueError("frame_len must be positive")
    path = Path(path)
    if layout.manifest is None:
        if layout.label is None:
            raise ValueError("layout needs either a label or a manifest")
        if path.is_dir():
            raise ValueError(f"{path} is a directory; a per-file label needs a single file")
        return _read_frames(path, layout, int(layout.label))
    labels = json.loads(Path(layout.manifest).read_text())
    skip = Path(layout.manifest).resolve()
    files = (sorted(p for p in path.glob(layout.pattern) if p.is_file() and p.resolve() != skip)
             if path.is_dir() else [path])
    frames = []
    for f in files:
        if f.name not in labels or labels[f.name] is None:
            raise ValueError(f"manifest {layout.manifest} has no label for {f.name}")
        frames.extend(_read_frames(f, layout, int(labels[f.name])))
    return frames
