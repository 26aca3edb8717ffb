"""Synthetic styled pseudo-speech with known ground truth.

Each sample is a harmonic carrier at ``f0`` whose amplitude steps per content
token, with a silent gap of ``pause_frames`` frames at the midpoint.  The
harmonic roll-off depends on the accent class (class 0 darker, class 1
brighter), so accent shows up as spectral tilt while pitch, rate and pause are
free style factors.  Frames are log-compressed outputs of a triangular
mel-spaced filter bank over non-overlapping Hann-windowed hops:
``frames = log1p(band_energy / ENERGY_REF)``, exactly zero in silence.
"""

from __future__ import annotations

import base64
import gzip
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SAMPLE_RATE = 8000
HOP = 64
N_CHANNELS = 16
N_FFT = 256
FRAMES_PER_TOKEN = 8
VOCAB_SIZE = 16
ENERGY_REF = 1e-3
F_MIN, F_MAX = 60.0, 4000.0
TILT = {0: 1.8, 1: 0.6}
SPLITS = ("train", "val", "test")

PRESETS = {
    "clean": {"noise_level": 0.02},
    "noisy": {"noise_level": 0.2},
}


@dataclass(frozen=True)
class StyleAttributes:
    f0: float
    rate: float
    pause_frames: int
    accent: int
    noise_level: float = 0.0

    def __post_init__(self):
        if not 120.0 <= self.f0 <= 300.0:
            raise ValueError(f"f0 {self.f0} outside [120, 300] Hz")
        if not 0.7 <= self.rate <= 1.3:
            raise ValueError(f"rate {self.rate} outside [0.7, 1.3]")
        if int(self.pause_frames) != self.pause_frames or not 0 <= self.pause_frames <= 12:
            raise ValueError(f"pause_frames {self.pause_frames} not an integer in [0, 12]")
        if self.accent not in (0, 1):
            raise ValueError(f"accent must be 0 or 1, got {self.accent}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")


@dataclass
class StyledSample:
    frames: np.ndarray
    waveform: np.ndarray
    tokens: np.ndarray
    attrs: StyleAttributes
    id: str
    split: str = "train"

    @property
    def y_o(self) -> int:
        return self.attrs.accent

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def expected_length(rate: float, n_tokens: int, pause_frames: int) -> int:
    return int(round(rate * FRAMES_PER_TOKEN * n_tokens)) + int(pause_frames)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def filter_bank(n_channels: int = N_CHANNELS, n_fft: int = N_FFT,
                sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters, mel-spaced between F_MIN and F_MAX; shape (n_channels, n_fft//2+1)."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(F_MIN), _hz_to_mel(F_MAX), n_channels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    bank = np.zeros((n_channels, len(freqs)))
    for c in range(n_channels):
        lo, mid, hi = edges[c], edges[c + 1], edges[c + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[c] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


_BANK = filter_bank()
_WINDOW = np.hanning(HOP)


def frame_energies(waveform: np.ndarray, n_channels: int = N_CHANNELS) -> np.ndarray:
    """Per-hop filter-bank energies, log1p-compressed; silent hops map to exactly 0."""
    bank = _BANK if n_channels == N_CHANNELS else filter_bank(n_channels)
    n = len(waveform) // HOP
    hops = waveform[: n * HOP].reshape(n, HOP) * _WINDOW
    power = np.abs(np.fft.rfft(hops, n=N_FFT, axis=1)) ** 2 / HOP
    return np.log1p(power @ bank.T / ENERGY_REF)


def harmonic_carrier(f0: float, n_samples: int, accent: int) -> np.ndarray:
    t = np.arange(n_samples) / SAMPLE_RATE
    ks = np.arange(1, int((0.95 * SAMPLE_RATE / 2) // f0) + 1)
    amps = ks ** -TILT[accent]
    amps = amps / amps.sum()
    return (amps[:, None] * np.sin(2.0 * np.pi * f0 * ks[:, None] * t[None, :])).sum(axis=0)


def token_amplitude(token: int) -> float:
    return 0.3 + 0.7 * (int(token) % VOCAB_SIZE) / (VOCAB_SIZE - 1)


def generate_sample(seed, attrs: StyleAttributes, tokens, sample_id: str | None = None,
                    n_channels: int = N_CHANNELS) -> StyledSample:
    tokens = np.asarray(tokens, dtype=np.int64)
    if not 3 <= len(tokens) <= 12:
        raise ValueError(f"token sequence length {len(tokens)} outside [3, 12]")
    if np.any(tokens < 0) or np.any(tokens >= VOCAB_SIZE):
        raise ValueError(f"tokens must lie in [0, {VOCAB_SIZE})")
    n_tok = len(tokens)
    speech = expected_length(attrs.rate, n_tok, 0)
    bounds = np.round(np.linspace(0, speech, n_tok + 1)).astype(int)
    envelope = np.repeat([token_amplitude(tok) for tok in tokens], np.diff(bounds) * HOP)

    carrier = harmonic_carrier(attrs.f0, speech * HOP, attrs.accent) * envelope
    split_at = (speech // 2) * HOP
    gap = np.zeros(attrs.pause_frames * HOP)
    waveform = np.concatenate([carrier[:split_at], gap, carrier[split_at:]])

    frames = frame_energies(waveform, n_channels)
    if attrs.noise_level > 0:
        rng = np.random.default_rng(seed)
        frames = frames + rng.normal(0.0, attrs.noise_level, size=frames.shape)
    return StyledSample(frames=frames, waveform=waveform, tokens=tokens, attrs=attrs,
                        id=sample_id or f"s{seed}")


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetConfig:
    n_per_class: int = 2000
    preset: str = "clean"
    noise_level: float | None = None
    seed: int = 0
    f0_mean: tuple = (190.0, 230.0)
    f0_std: float = 20.0
    rate_range: tuple = (0.7, 1.3)
    pause_range: tuple = (0, 12)
    token_range: tuple = (3, 12)
    split_fractions: tuple = (0.8, 0.1, 0.1)

    def resolved_noise(self) -> float:
        if self.noise_level is not None:
            return float(self.noise_level)
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return PRESETS[self.preset]["noise_level"]


@dataclass
class Dataset:
    header: dict
    samples: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]

    def __len__(self):
        return len(self.samples)


def _sample_attrs(rng, cls, cfg: DatasetConfig, noise):
    f0 = float(np.clip(rng.normal(cfg.f0_mean[cls], cfg.f0_std), 120.0, 300.0))
    rate = float(rng.uniform(*cfg.rate_range))
    pause = int(rng.integers(cfg.pause_range[0], cfg.pause_range[1] + 1))
    n_tok = int(rng.integers(cfg.token_range[0], cfg.token_range[1] + 1))
    tokens = rng.integers(0, VOCAB_SIZE, size=n_tok)
    return StyleAttributes(f0, rate, pause, cls, noise), tokens


def _split_counts(n: int, fractions) -> tuple:
    n_val = int(np.floor(n * fractions[1]))
    n_test = int(np.floor(n * fractions[2]))
    return n - n_val - n_test, n_val, n_test


def generate_dataset(config: DatasetConfig) -> Dataset:
    if config.n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    noise = config.resolved_noise()
    root = np.random.SeedSequence(config.seed)
    samples = []
    for cls in (0, 1):
        cls_seq = np.random.SeedSequence(config.seed, spawn_key=(cls,))
        order = np.random.default_rng(cls_seq).permutation(config.n_per_class)
        counts = _split_counts(config.n_per_class, config.split_fractions)
        split_of = np.empty(config.n_per_class, dtype=object)
        split_of[order[:counts[0]]] = "train"
        split_of[order[counts[0]:counts[0] + counts[1]]] = "val"
        split_of[order[counts[0] + counts[1]:]] = "test"
        for i in range(config.n_per_class):
            seq = np.random.SeedSequence(root.entropy, spawn_key=(cls, i))
            rng = np.random.default_rng(seq)
            attrs, tokens = _sample_attrs(rng, cls, config, noise)
            noise_seed = int(rng.integers(2**63 - 1))
            s = generate_sample(noise_seed, attrs, tokens, sample_id=f"c{cls}-{i:06d}")
            s.split = split_of[i]
            samples.append(s)
    header = {"format_version": FORMAT_VERSION, "F": N_CHANNELS, "hop": HOP,
              "sample_rate": SAMPLE_RATE, "preset": config.preset, "noise_level": noise,
              "seed": config.seed, "n_per_class": config.n_per_class,
              "waveform_encoding": "base64-float64-le"}
    return Dataset(header, samples)


# ---------------------------------------------------------------- file format

def _encode_waveform(w: np.ndarray) -> str:
    return base64.b64encode(np.asarray(w, dtype="<f8").tobytes()).decode("ascii")


def _decode_waveform(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def sample_to_record(s: StyledSample) -> dict:
    return {"id": s.id, "split": s.split, "y_o": int(s.y_o), "attrs": asdict(s.attrs),
            "tokens": [int(t) for t in s.tokens], "frames": s.frames.tolist(),
            "waveform": _encode_waveform(s.waveform)}


def record_to_sample(rec: dict) -> StyledSample:
    attrs = StyleAttributes(**rec["attrs"])
    frames = np.array(rec["frames"], dtype=np.float64)
    return StyledSample(frames=frames, waveform=_decode_waveform(rec["waveform"]),
                        tokens=np.array(rec["tokens"], dtype=np.int64), attrs=attrs,
                        id=rec["id"], split=rec["split"])


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with _open(path, "w") as fh:
            fh.write(json.dumps(dataset.header, sort_keys=True) + "\n")
            for s in dataset.samples:
                fh.write(json.dumps(sample_to_record(s)) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        with _open(path, "r") as fh:
            header = json.loads(fh.readline())
            if header.get("format_version") != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported format_version {header.get('format_version')}")
            samples = [record_to_sample(json.loads(line)) for line in fh if line.strip()]
    except (OSError, EOFError, zlib.error) as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    return Dataset(header, samples)


def summarize(dataset: Dataset) -> dict:
    out = {}
    for split in SPLITS:
        for cls in (0, 1):
            group = [s for s in dataset.samples if s.split == split and s.y_o == cls]
            if not group:
                continue
            out[f"{split}/class{cls}"] = {
                "count": len(group),
                "mean_f0": float(np.mean([s.attrs.f0 for s in group])),
                "mean_rate": float(np.mean([s.attrs.rate for s in group])),
                "mean_pause": float(np.mean([s.attrs.pause_frames for s in group])),
                "mean_length": float(np.mean([s.length for s in group])),
            }
    return out
