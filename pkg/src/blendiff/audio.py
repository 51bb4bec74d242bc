"""Speech input: WAV parsing, log-mel conditioning features and frame alignment.

Log-mel energies stand in for a pretrained speech encoder.  Any other encoder
can be used by writing its per-frame outputs to a BTSR file and loading them
with :func:`load_features`.
"""

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator

from .errors import CorruptHeader, EmptyInput, InputError, TooShort, UnsupportedEncoding
from .numerics import btsr

FEATURE_RATE = 16000
DEFAULT_FPS = 60.0

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InputError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class AudioFeatures:
    frames: np.ndarray  # (N, D)
    frame_rate: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise InputError("features must be a 2-D (frames, dim) matrix")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def parse_wav(data):
    """Decode a RIFF/WAVE byte string (PCM16 or float32, mono or stereo)."""
    data = bytes(data)
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise CorruptHeader("not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise CorruptHeader(f"chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise CorruptHeader("fmt chunk too small")
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == _EXTENSIBLE and size >= 26:
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise CorruptHeader("missing fmt or data chunk")
    tag, channels, rate, align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{channels} channels")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncoding(f"format tag {tag} with {bits} bits")
    if rate == 0 or align != channels * dtype.itemsize:
        raise CorruptHeader("inconsistent fmt chunk")
    usable = len(payload) - len(payload) % align
    samples = np.frombuffer(payload[:usable], dtype=dtype).astype(np.float64) / scale
    samples = samples.reshape(-1, channels).mean(axis=1)
    return Waveform(np.clip(samples, -1.0, 1.0), rate)


def read_wav(path):
    return parse_wav(Path(path).read_bytes())


def write_wav(path, waveform):
    """Write 16-bit PCM mono."""
    pcm = np.round(np.clip(waveform.samples, -1.0, 32767 / 32768) * 32768).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(waveform.sample_rate))
        fh.writeframes(pcm.tobytes())


def resample_linear(samples, rate_in, rate_out):
    if rate_in == rate_out:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(np.floor(len(samples) * rate_out / rate_in))
    t_out = np.arange(n_out) / rate_out
    t_in = np.arange(len(samples)) / rate_in
    return np.interp(t_out, t_in, samples)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """Triangular HTK-style filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def standardize(x, eps=1e-8):
    """Per-column zero mean / unit variance; constant columns become 0."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    out = np.zeros_like(x)
    ok = std > eps * np.maximum(1.0, np.abs(mean))
    out[:, ok] = (x[:, ok] - mean[ok]) / std[ok]
    return out


def mel_features(w, n_mels=40, win_ms=25.0, hop_ms=10.0, n_fft=512, normalize=True):
    """Log-mel energies of ``w`` at 16 kHz, one row per hop."""
    x = resample_linear(w.samples, w.sample_rate, FEATURE_RATE)
    win = int(round(FEATURE_RATE * win_ms / 1000))
    hop = int(round(FEATURE_RATE * hop_ms / 1000))
    if x.size < win:
        raise TooShort(f"{x.size} samples at 16 kHz, need at least {win}")
    n_fft = max(n_fft, win)
    frames = sliding_window_view(x, win)[::hop]
    spec = np.abs(np.fft.rfft(frames * np.hanning(win), n=n_fft, axis=1)) ** 2
    energies = spec @ mel_filterbank(n_mels, n_fft, FEATURE_RATE).T
    logmel = np.log(energies + 1e-10)
    return standardize(logmel) if normalize else logmel


def interpolate_to_frames(features, n_frames, frame_rate=DEFAULT_FPS):
    """Linear resampling along time to exactly ``n_frames`` rows, endpoints fixed."""
    x = features.frames if isinstance(features, AudioFeatures) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("no feature rows to interpolate")
    if n_frames < 1:
        raise InputError("n_frames must be >= 1")
    n_in = x.shape[0]
    if n_in == n_frames:
        return AudioFeatures(x.copy(), frame_rate)
    if n_frames == 1 or n_in == 1:
        return AudioFeatures(np.repeat(x[:1], n_frames, axis=0), frame_rate)
    pos = np.arange(n_frames) * ((n_in - 1) / (n_frames - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    w = (pos - lo)[:, None]
    return AudioFeatures((1 - w) * x[lo] + w * x[lo + 1], frame_rate)


def frames_for_duration(seconds, frame_rate=DEFAULT_FPS):
    return max(1, int(round(seconds * frame_rate)))


def load_features(path, n_frames=None, frame_rate=DEFAULT_FPS):
    arr = btsr.load(path, rank=2)
    feats = AudioFeatures(arr, frame_rate)
    return interpolate_to_frames(feats, n_frames, frame_rate) if n_frames else feats


def save_features(path, features):
    frames = features.frames if isinstance(features, AudioFeatures) else features
    btsr.save(path, np.asarray(frames))


class MelFeatureExtractor(BaseEstimator):
    """Waveform -> frame-aligned log-mel features.

    Stateless; ``fit`` only validates parameters.  ``transform`` accepts a
    :class:`Waveform` (or a list of them) and returns ``(N, n_mels)`` arrays
    with ``N = round(duration * frame_rate)`` unless ``n_frames`` is given.
    """

    def __init__(self, n_mels=40, win_ms=25.0, hop_ms=10.0, frame_rate=DEFAULT_FPS):
        self.n_mels = n_mels
        self.win_ms = win_ms
        self.hop_ms = hop_ms
        self.frame_rate = frame_rate

    def fit(self, X=None, y=None):
        if self.n_mels < 1 or self.hop_ms <= 0 or self.win_ms <= 0:
            raise InputError("invalid mel feature parameters")
        return self

    def transform(self, X, n_frames=None):
        if isinstance(X, Waveform):
            mel = mel_features(X, self.n_mels, self.win_ms, self.hop_ms)
            n = n_frames or frames_for_duration(X.duration, self.frame_rate)
            return interpolate_to_frames(mel, n, self.frame_rate).frames
        return [self.transform(w, n_frames) for w in X]

    def fit_transform(self, X, y=None, **kw):
        return self.fit(X).transform(X, **kw)


def features_from_path(path, n_frames=None, n_mels=40, frame_rate=DEFAULT_FPS):
    """Features from a ``.wav`` (log-mel) or a BTSR feature file."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        w = read_wav(path)
        n = n_frames or frames_for_duration(w.duration, frame_rate)
        return interpolate_to_frames(mel_features(w, n_mels), n, frame_rate)
    return load_features(path, n_frames, frame_rate)
