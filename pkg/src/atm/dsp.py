"""STFT front end: waveform <-> log-power spectra, noisy phase, context frames, WAV IO."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

LOG_FLOOR = 1e-10
NORM_FLOOR = 1e-2


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    frame_len: int = 512
    frame_shift: int = 256
    fft_size: int = 512

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        if self.frame_shift <= 0 or self.frame_len % self.frame_shift:
            raise InvalidInputError("frame_shift must divide frame_len")
        if self.fft_size < self.frame_len:
            raise InvalidInputError("fft_size must be >= frame_len")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def window(self) -> np.ndarray:
        # symmetric Hann
        return np.hanning(self.frame_len)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return 1 + (n_samples - self.frame_len) // self.frame_shift

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_size


DEFAULT_STFT = StftConfig()


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    return np.asarray(w, dtype=np.float64)


def frame_signal(x: np.ndarray, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Slice ``x`` into an (N, frame_len) view; trailing partial frame is dropped."""
    n = cfg.n_frames(len(x))
    if n == 0:
        raise InvalidInputError(
            f"signal of {len(x)} samples is shorter than one frame ({cfg.frame_len})"
        )
    idx = np.arange(cfg.frame_len)[None, :] + cfg.frame_shift * np.arange(n)[:, None]
    return x[idx]


def stft(w, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Complex spectrogram, shape (N, fft_size // 2 + 1)."""
    frames = frame_signal(_samples(w), cfg) * cfg.window
    return np.fft.rfft(frames, n=cfg.fft_size, axis=1)


def analyze(w, cfg: StftConfig = DEFAULT_STFT) -> tuple[np.ndarray, np.ndarray]:
    """Return (LPS, phase), both (N, n_bins); LPS = ln(|X|^2 + 1e-10)."""
    spec = stft(w, cfg)
    lps = np.log(np.abs(spec) ** 2 + LOG_FLOOR)
    phase = np.angle(spec)
    phase[phase <= -np.pi] = np.pi
    return lps, phase


def istft(spec: np.ndarray, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    The synthesis window equals the analysis window and the sum is divided by the
    overlapped squared window, which makes stft -> istft exact wherever that sum
    exceeds ``NORM_FLOOR``: everywhere except a few dozen samples at either end.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise InvalidInputError(f"expected (N, {cfg.n_bins}) spectrogram, got {spec.shape}")
    n = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1)[:, : cfg.frame_len]
    win = cfg.window
    length = cfg.frame_len + (n - 1) * cfg.frame_shift
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n):
        start = i * cfg.frame_shift
        out[start : start + cfg.frame_len] += frames[i] * win
        norm[start : start + cfg.frame_len] += win**2
    # floor keeps the window tails (first/last ~50 samples) from amplifying noise
    return out / np.maximum(norm, NORM_FLOOR)


def synthesize(lps: np.ndarray, phase: np.ndarray, cfg: StftConfig = DEFAULT_STFT) -> Waveform:
    lps = np.asarray(lps, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if lps.shape != phase.shape:
        raise InvalidInputError(f"LPS shape {lps.shape} != phase shape {phase.shape}")
    spec = np.exp(lps / 2.0) * np.exp(1j * phase)
    return Waveform(istft(spec, cfg), cfg.sample_rate)


def context_indices(n_frames: int, radius: int) -> np.ndarray:
    """(N, 2M+1) frame indices for context stacking, clipped to the valid range."""
    if n_frames < 1:
        raise InvalidInputError("context expansion needs at least one frame")
    if radius < 0:
        raise InvalidInputError("context radius must be >= 0")
    offsets = np.arange(-radius, radius + 1)
    return np.clip(np.arange(n_frames)[:, None] + offsets[None, :], 0, n_frames - 1)


def context_expand(x: np.ndarray, radius: int = 5) -> np.ndarray:
    """Stack frames n-M..n+M side by side; edges replicate the nearest frame."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("context expansion needs a non-empty (N, F) matrix")
    idx = context_indices(x.shape[0], radius)
    return x[idx].reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# WAV IO: 16-bit PCM mono
# ---------------------------------------------------------------------------


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise InvalidInputError(f"{path}: only mono WAV is supported")
        if fh.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: only 16-bit PCM WAV is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, w: Waveform) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(to_pcm16(w.samples).tobytes())
