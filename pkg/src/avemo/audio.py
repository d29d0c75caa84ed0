"""Log mel-spectrogram features for the aural branch.

Frames lie strictly inside the signal (no centre padding), each is Hann
windowed and zero-padded to ``n_fft``, and the power spectrum is pooled by
peak-normalised triangular filters on the HTK mel scale before a floored
``log10``.
"""

from __future__ import annotations

import csv
import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

MELS_MAGIC = b"MELS"
MELS_VERSION = 1
_MELS_HEADER = struct.Struct("<4sIIIII")  # magic, version, frames, n_mels, sample_rate, hop


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform samples must be finite")
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    win_length: int = 1024
    hop_length: int = 256
    n_fft: int = 1024
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if not 0 < self.hop_length <= self.win_length <= self.n_fft:
            raise ConfigError("need 0 < hop_length <= win_length <= n_fft")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return 1 + (n_samples - self.win_length) // self.hop_length


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (frames, n_mels), log10 power
    config: MelConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length ``n``."""
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


def stft_power(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Power spectrogram of shape ``(frames, n_fft // 2 + 1)``."""
    n = len(w)
    if n < cfg.win_length:
        raise DataError(f"waveform too short: {n} samples < win_length {cfg.win_length}")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, cfg.win_length)[:: cfg.hop_length]
    spec = np.fft.rfft(frames * hann_window(cfg.win_length), n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def mel_center_frequencies(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """The ``n_mels + 2`` filter edge/centre frequencies in Hz (centres are ``[1:-1]``)."""
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular filters, shape ``(n_mels, n_fft // 2 + 1)``, each scaled to peak 1."""
    edges = mel_center_frequencies(cfg)
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    peaks = fb.max(axis=1)
    empty = np.flatnonzero(peaks <= 0)
    if empty.size:
        raise ConfigError(
            f"mel filter(s) {empty.tolist()} cover no FFT bin; reduce n_mels or raise n_fft"
        )
    return fb / peaks[:, None]


def melspectrogram(w: Waveform, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    if w.sample_rate != cfg.sample_rate:
        raise DataError(f"waveform is {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    power = stft_power(w, cfg)
    values = np.log10(power @ mel_filterbank(cfg).T + cfg.log_floor)
    return MelSpectrogram(values=values, config=cfg)


def resample_linear(w: Waveform, rate: int) -> Waveform:
    if rate == w.sample_rate:
        return w
    n_out = int(round(len(w) * rate / w.sample_rate))
    t_out = np.arange(n_out) / rate
    t_in = np.arange(len(w)) / w.sample_rate
    return Waveform(np.interp(t_out, t_in, w.samples), rate)


def read_wav(path, target_rate: int | None = 16000) -> Waveform:
    """Read 16-bit PCM WAV, average channels to mono, optionally resample."""
    try:
        with wave.open(str(path), "rb") as f:
            if f.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM is supported")
            n_ch, rate = f.getnchannels(), f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    samples = pcm.reshape(-1, n_ch).mean(axis=1)
    w = Waveform(samples, rate)
    return resample_linear(w, target_rate) if target_rate else w


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def segment_waveform(w: Waveform, start_s: float, duration_s: float) -> Waveform:
    """Samples covering ``[start_s, start_s + duration_s)``; zero-padded past the end.

    Used to align one audio segment with a window of video frames by timestamp.
    """
    start = int(round(start_s * w.sample_rate))
    n = int(round(duration_s * w.sample_rate))
    out = np.zeros(n)
    chunk = w.samples[max(start, 0): max(start, 0) + n]
    out[: chunk.shape[0]] = chunk
    return Waveform(out, w.sample_rate)


def write_mels(path, mel: MelSpectrogram) -> None:
    cfg = mel.config
    frames, n_mels = mel.values.shape
    with open(path, "wb") as f:
        f.write(_MELS_HEADER.pack(MELS_MAGIC, MELS_VERSION, frames, n_mels, cfg.sample_rate, cfg.hop_length))
        f.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())


def read_mels(path) -> MelSpectrogram:
    """Read a MELS file; config fields not stored in the header take their defaults."""
    with open(path, "rb") as f:
        head = f.read(_MELS_HEADER.size)
        if len(head) != _MELS_HEADER.size:
            raise DataError(f"{path}: truncated header")
        magic, version, frames, n_mels, rate, hop = _MELS_HEADER.unpack(head)
        if magic != MELS_MAGIC or version != MELS_VERSION:
            raise DataError(f"{path}: not a MELS v{MELS_VERSION} file")
        body = np.frombuffer(f.read(), dtype="<f4")
    if body.size != frames * n_mels:
        raise DataError(f"{path}: expected {frames * n_mels} values, found {body.size}")
    defaults = MelConfig()
    cfg = MelConfig(
        sample_rate=rate,
        hop_length=hop,
        win_length=max(defaults.win_length, hop),
        n_fft=max(defaults.n_fft, hop),
        n_mels=n_mels,
        f_max=min(defaults.f_max, rate / 2),
    )
    return MelSpectrogram(body.reshape(frames, n_mels).astype(np.float64), cfg)


def write_mels_csv(path, mel: MelSpectrogram) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame"] + [f"mel_{k}" for k in range(mel.values.shape[1])])
        for t, row in enumerate(mel.values):
            writer.writerow([t] + [f"{v:.6g}" for v in row])


def render_mels_png(path, mel: MelSpectrogram) -> None:
    """Greyscale image, low mel bands at the bottom, min-max scaled."""
    from PIL import Image

    v = mel.values.T[::-1]
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path, format="PNG")
