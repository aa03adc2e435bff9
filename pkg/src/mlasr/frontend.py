"""Log-Mel filterbank front end.

The per-utterance chain is: optional speed perturbation, framing with a
25 ms Hann window every 10 ms, 80 HTK-Mel log energies, per-speaker mean and
variance normalisation, then stacking 3 frames to the left of every third
frame for a 30 ms output rate.
"""

from __future__ import annotations

import struct
import wave
import zlib
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError

SUPPORTED_RATES = (8000, 16000)
_ARCHIVE_MAGIC = b"MLFEAT1\n"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    utt_id: str = ""
    speaker_id: str = ""
    language: str = ""


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    frame_shift_ms: float
    utt_id: str = ""
    speaker_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class FrontendConfig:
    n_mels: int = 80
    window_ms: float = 25.0
    shift_ms: float = 10.0
    left_stack: int = 3
    downsample: int = 3
    perturb_factors: tuple[float, ...] = (0.9, 1.1)
    dither: float = 1e-5
    fmin: float = 20.0
    fmax: float | None = None
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    n_fft: int | None = None

    def __post_init__(self) -> None:
        if not self.window_ms > self.shift_ms > 0:
            raise ValueError("need window_ms > shift_ms > 0")
        if self.left_stack < 0 or self.downsample < 1:
            raise ValueError("need left_stack >= 0 and downsample >= 1")

    def window_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.window_ms / 1000))

    def hop_samples(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.shift_ms / 1000))

    @property
    def stacked_dim(self) -> int:
        return self.n_mels * (self.left_stack + 1)


def num_frames(n_samples: int, win: int, hop: int) -> int:
    return 1 + (n_samples - win) // hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters with unit peak on the HTK Mel scale, (n_mels, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def _dither_rng(w: Waveform) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(f"{w.utt_id}|{len(w.samples)}".encode()))


def log_mel(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> FeatureMatrix:
    if w.sample_rate not in SUPPORTED_RATES:
        raise DataError(f"unsupported sample rate {w.sample_rate}")
    win, hop = cfg.window_samples(w.sample_rate), cfg.hop_samples(w.sample_rate)
    x = np.asarray(w.samples, dtype=np.float64)
    if x.ndim != 1 or len(x) < win:
        raise DataError("utterance too short")
    if cfg.dither > 0:
        x = x + cfg.dither * _dither_rng(w).standard_normal(len(x))

    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    if cfg.preemphasis:
        first = frames[:, :1] * (1.0 - cfg.preemphasis)
        frames = np.concatenate([first, frames[:, 1:] - cfg.preemphasis * frames[:, :-1]], axis=1)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    n_fft = cfg.n_fft or max(512, 1 << (win - 1).bit_length())
    power = np.abs(np.fft.rfft(frames * window, n=n_fft, axis=1)) ** 2
    fbank = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate, cfg.fmin, cfg.fmax or w.sample_rate / 2)
    energies = power @ fbank.T
    feats = np.log(np.maximum(energies, cfg.log_floor))
    return FeatureMatrix(feats, cfg.shift_ms, w.utt_id, w.speaker_id)


def cmvn_by_speaker(batch: Sequence[FeatureMatrix], eps: float = 1e-12) -> list[FeatureMatrix]:
    """Normalise every speaker's pooled frames to zero mean and unit variance.

    Dimensions whose pooled variance is (numerically) zero are only
    mean-shifted.
    """
    groups: dict[str, list[int]] = defaultdict(list)
    for i, f in enumerate(batch):
        groups[f.speaker_id].append(i)

    out: list[FeatureMatrix | None] = [None] * len(batch)
    for members in groups.values():
        pooled = np.concatenate([np.asarray(batch[i].frames, dtype=np.float64) for i in members])
        mean = pooled.mean(axis=0)
        var = pooled.var(axis=0)
        scale = np.where(var > eps, 1.0 / np.sqrt(np.where(var > eps, var, 1.0)), 1.0)
        for i in members:
            frames = (np.asarray(batch[i].frames, dtype=np.float64) - mean) * scale
            out[i] = replace(batch[i], frames=frames)
    return out  # type: ignore[return-value]


def stack_downsample(f: FeatureMatrix, left: int = 3, factor: int = 3) -> FeatureMatrix:
    """Concatenate each kept frame with its ``left`` predecessors.

    Output frame ``t`` stacks input frames ``factor*t - left .. factor*t``
    (oldest first); indices before the start replicate frame 0.
    """
    if left < 0 or factor < 1:
        raise ValueError("need left >= 0 and factor >= 1")
    base = np.arange(0, f.num_frames, factor)
    idx = np.clip(base[:, None] + np.arange(-left, 1)[None, :], 0, None)
    stacked = f.frames[idx].reshape(len(base), -1)
    return replace(f, frames=stacked, frame_shift_ms=f.frame_shift_ms * factor)


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Resample so the output is ``factor`` times as long (linear interpolation)."""
    if not factor > 0:
        raise ValueError("speed-perturbation factor must be positive")
    x = np.asarray(w.samples)
    if factor == 1.0:
        return replace(w, samples=x.copy())
    n_out = int(round(len(x) * factor))
    pos = np.arange(n_out) / factor
    y = np.interp(pos, np.arange(len(x)), x)
    return replace(w, samples=y)


def perturbed_id(ident: str, factor: float) -> str:
    return ident if factor == 1.0 else f"sp{factor:g}-{ident}"


def featurize(
    waves: Sequence[Waveform],
    cfg: FrontendConfig = FrontendConfig(),
    perturb: Iterable[float] = (),
) -> list[FeatureMatrix]:
    """Full chain for a batch: perturbed copies, log-Mel, CMVN, stacking.

    Perturbed copies get ``sp<factor>-`` prefixed utterance and speaker ids,
    so they are normalised as separate speakers.
    """
    factors = [1.0, *[p for p in perturb if p != 1.0]]
    mats = []
    for factor in factors:
        for w in waves:
            src = speed_perturb(w, factor) if factor != 1.0 else w
            src = replace(src, utt_id=perturbed_id(w.utt_id, factor), speaker_id=perturbed_id(w.speaker_id, factor))
            mats.append(log_mel(src, cfg))
    mats = cmvn_by_speaker(mats)
    return [stack_downsample(m, cfg.left_stack, cfg.downsample) for m in mats]


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2 or wf.getnchannels() != 1:
            raise DataError(f"{path}: expected PCM16 mono")
        rate = wf.getframerate()
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32768.0, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def load_waveform(path: str | Path, utt_id: str = "", speaker_id: str = "", language: str = "") -> Waveform:
    samples, rate = read_wav(path)
    return Waveform(samples, rate, utt_id, speaker_id, language)


def write_archive(path: str | Path, mats: Iterable[FeatureMatrix]) -> None:
    """Per utterance: id length, UTF-8 id, T, D, shift (ms), then T*D float32, all little-endian."""
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        for m in mats:
            key = m.utt_id.encode("utf-8")
            frames = np.ascontiguousarray(m.frames, dtype="<f4")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<IIf", frames.shape[0], frames.shape[1], m.frame_shift_ms))
            fh.write(frames.tobytes())


def _read_exact(fh: BinaryIO, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"{path}: truncated feature archive")
    return data


def iter_archive(path: str | Path) -> Iterator[FeatureMatrix]:
    with open(path, "rb") as fh:
        if fh.read(len(_ARCHIVE_MAGIC)) != _ARCHIVE_MAGIC:
            raise DataError(f"{path}: not a feature archive")
        while True:
            head = fh.read(4)
            if not head:
                return
            if len(head) != 4:
                raise DataError(f"{path}: truncated feature archive")
            (n,) = struct.unpack("<I", head)
            utt = _read_exact(fh, n, path).decode("utf-8")
            t, d, shift = struct.unpack("<IIf", _read_exact(fh, 12, path))
            frames = np.frombuffer(_read_exact(fh, 4 * t * d, path), dtype="<f4").reshape(t, d)
            yield FeatureMatrix(frames.astype(np.float32), float(shift), utt)


def read_archive(path: str | Path) -> dict[str, FeatureMatrix]:
    return {m.utt_id: m for m in iter_archive(path)}
