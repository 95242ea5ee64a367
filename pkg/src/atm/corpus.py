"""Synthetic noisy-dialogue corpus.

Speakers are harmonic sources with their own pitch and three formant
resonances. Dialogues concatenate one utterance per speaker with silent gaps.
Frames get the speaker's class index, or class 0 (the virtual non-speech
speaker) when the frame is silent or mostly gap.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import DEFAULT_STFT, StftConfig, Waveform, write_wav
from .errors import InvalidInputError, UsageError

VAD_RMS = 1e-3
NOISE_KINDS = ("white", "pink", "engine", "babble")
SPLITS = ("train", "val", "test_se", "test_si")


@dataclass(frozen=True)
class SpeakerSpec:
    id: int
    f0: float
    formant_centers: tuple[float, float, float]
    formant_bandwidths: tuple[float, float, float] = (80.0, 120.0, 160.0)
    amplitude: float = 0.04


# Three low-pitched and three high-pitched training speakers, then two held out.
TRAIN_SPEAKERS = (
    SpeakerSpec(1, 105.0, (500.0, 1500.0, 2500.0)),
    SpeakerSpec(2, 130.0, (650.0, 1100.0, 2400.0)),
    SpeakerSpec(3, 155.0, (400.0, 1900.0, 2700.0)),
    SpeakerSpec(4, 195.0, (800.0, 1300.0, 2900.0)),
    SpeakerSpec(5, 220.0, (450.0, 2300.0, 3000.0)),
    SpeakerSpec(6, 245.0, (700.0, 1700.0, 3200.0)),
)
HELD_OUT_SPEAKERS = (
    SpeakerSpec(7, 118.0, (850.0, 1250.0, 2600.0)),
    SpeakerSpec(8, 270.0, (600.0, 2000.0, 3100.0)),
)


def speakers_distinct(a: SpeakerSpec, b: SpeakerSpec) -> bool:
    return (
        abs(a.f0 - b.f0) >= 20.0 or abs(a.formant_centers[0] - b.formant_centers[0]) >= 150.0
    )


def check_speakers(specs) -> None:
    specs = list(specs)
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise InvalidInputError(f"duplicate speaker ids in {ids}")
    for i, a in enumerate(specs):
        for b in specs[i + 1 :]:
            if not speakers_distinct(a, b):
                raise InvalidInputError(f"speakers {a.id} and {b.id} are too similar")


# ---------------------------------------------------------------------------
# Utterances and dialogues
# ---------------------------------------------------------------------------


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _formant_gain(spec: SpeakerSpec, freqs: np.ndarray) -> np.ndarray:
    gain = np.ones_like(freqs)
    for center, bw, weight in zip(spec.formant_centers, spec.formant_bandwidths, (2.0, 1.2, 0.6)):
        gain += weight / (1.0 + ((freqs - center) / (bw / 2.0)) ** 2)
    return gain


def _fade(n: int, sample_rate: int, seconds: float = 0.05) -> np.ndarray:
    env = np.ones(n)
    k = min(int(seconds * sample_rate), n // 2)
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
    env[:k] = ramp
    env[n - k :] = ramp[::-1]
    return env


def synth_utterance(
    spec: SpeakerSpec, duration_s: float, seed: int, sample_rate: int = 16000
) -> Waveform:
    """Harmonic voice at ``spec.f0`` with formant-shaped harmonics and a slow random envelope."""
    if not 0.5 <= duration_s <= 5.0:
        raise InvalidInputError(f"duration {duration_s} s outside [0.5, 5]")
    rng = _rng(seed, spec.id, 11)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    # slow intonation, +-3 %
    rate = rng.uniform(1.0, 3.0)
    f0 = spec.f0 * (1.0 + 0.03 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    n_harm = int(0.45 * sample_rate / (spec.f0 * 1.03))
    k = np.arange(1, n_harm + 1)
    amps = k**-2.0 * _formant_gain(spec, k * spec.f0)
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    x = np.zeros(n)
    for kk, a, off in zip(k, amps, offsets):
        x += a * np.sin(kk * phase + off)

    # syllable-rate amplitude modulation
    knots = np.arange(0.0, duration_s + 0.125, 0.125)
    levels = rng.uniform(0.3, 1.0, len(knots))
    env = np.interp(t, knots, levels) * _fade(n, sample_rate)
    x *= env
    x *= spec.amplitude / np.sqrt(np.mean(x**2))
    return Waveform(x, sample_rate)


@dataclass
class SpeakerLabelSeq:
    classes: np.ndarray  # (N,) int, 0 = non-speech

    def __len__(self) -> int:
        return len(self.classes)

    def one_hot(self, n_classes: int) -> np.ndarray:
        if self.classes.max(initial=0) >= n_classes or self.classes.min(initial=0) < 0:
            raise InvalidInputError(f"class index outside 0..{n_classes - 1}")
        return np.eye(n_classes)[self.classes]


@dataclass
class DialogueClip:
    waveform: Waveform
    segments: list[tuple[int, int, int]]  # (start, end, speaker id), end exclusive
    snr_db: float | str = "clean"


def frame_labels(
    clean: np.ndarray,
    segments: list[tuple[int, int, int]],
    cfg: StftConfig = DEFAULT_STFT,
    vad_rms: float = VAD_RMS,
) -> SpeakerLabelSeq:
    """Per-frame class: majority-owning speaker if the frame RMS reaches ``vad_rms``, else 0."""
    n = cfg.n_frames(len(clean))
    owner = np.zeros(len(clean), dtype=np.int64)
    for start, end, spk in segments:
        owner[start:end] = spk
    classes = np.zeros(n, dtype=np.int64)
    for i in range(n):
        lo = i * cfg.frame_shift
        frame = clean[lo : lo + cfg.frame_len]
        if np.sqrt(np.mean(frame**2)) < vad_rms:
            continue
        counts = np.bincount(owner[lo : lo + cfg.frame_len])
        classes[i] = int(np.argmax(counts))
    return SpeakerLabelSeq(classes)


def make_dialogue(
    speakers,
    gap_s: float,
    seed: int,
    utt_range: tuple[float, float] = (0.6, 1.2),
    cfg: StftConfig = DEFAULT_STFT,
) -> tuple[DialogueClip, SpeakerLabelSeq]:
    """Concatenate one utterance per speaker, with ``gap_s`` of silence around each."""
    speakers = list(speakers)
    if len(speakers) < 2:
        raise InvalidInputError("a dialogue needs at least two speakers")
    if len({s.id for s in speakers}) != len(speakers):
        raise InvalidInputError("dialogue speakers must have distinct ids")
    if gap_s < 0:
        raise InvalidInputError("gap_s must be >= 0")
    rng = _rng(seed, 23)
    sr = cfg.sample_rate
    gap = np.zeros(int(round(gap_s * sr)))
    pieces = [gap]
    segments = []
    pos = len(gap)
    for spk in speakers:
        dur = rng.uniform(*utt_range)
        utt = synth_utterance(spk, dur, int(rng.integers(2**31)), sr).samples
        segments.append((pos, pos + len(utt), spk.id))
        pieces += [utt, gap]
        pos += len(utt) + len(gap)
    clean = np.concatenate(pieces)
    return DialogueClip(Waveform(clean, sr), segments), frame_labels(clean, segments, cfg)


# ---------------------------------------------------------------------------
# Noise and mixing
# ---------------------------------------------------------------------------


def synth_noise(kind: str, length: int, seed: int, sample_rate: int = 16000) -> Waveform:
    if kind not in NOISE_KINDS:
        raise UsageError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if length <= 0:
        raise InvalidInputError("noise length must be positive")
    rng = _rng(seed, NOISE_KINDS.index(kind), 37)
    if kind == "white":
        x = rng.standard_normal(length)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(length))
        f = np.fft.rfftfreq(length, 1.0 / sample_rate)
        shape = np.zeros_like(f)
        shape[1:] = 1.0 / np.sqrt(f[1:])
        x = np.fft.irfft(spec * shape, n=length)
    elif kind == "engine":
        t = np.arange(length) / sample_rate
        base = 30.0 * (1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t))
        phase = 2 * np.pi * np.cumsum(base) / sample_rate
        x = np.zeros(length)
        for k in range(1, 34):
            x += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
        b, a = signal.butter(4, 400.0, fs=sample_rate)
        rumble = signal.lfilter(b, a, rng.standard_normal(length))
        x = x / np.std(x) + 2.0 * rumble / np.std(rumble)
    else:
        x = np.zeros(length)
        for _ in range(4):
            spk = SpeakerSpec(
                0,
                rng.uniform(90.0, 260.0),
                (rng.uniform(350, 900), rng.uniform(1000, 2300), rng.uniform(2400, 3300)),
            )
            stream = np.zeros(0)
            while len(stream) < length:
                dur = rng.uniform(1.0, 3.0)
                utt = synth_utterance(spk, dur, int(rng.integers(2**31)), sample_rate).samples
                stream = np.concatenate([stream, utt])
            x += np.roll(stream[:length], int(rng.integers(length)))
    x = x - x.mean()
    return Waveform(0.1 * x / np.sqrt(np.mean(x**2)), sample_rate)


def speech_mask(clean: np.ndarray, block: int = 512, vad_rms: float = VAD_RMS) -> np.ndarray:
    """Boolean per-sample mask of non-overlapping blocks whose RMS reaches ``vad_rms``."""
    mask = np.zeros(len(clean), dtype=bool)
    for lo in range(0, len(clean), block):
        seg = clean[lo : lo + block]
        if np.sqrt(np.mean(seg**2)) >= vad_rms:
            mask[lo : lo + block] = True
    return mask


def fit_noise(noise: np.ndarray, length: int) -> np.ndarray:
    reps = -(-length // len(noise))
    return np.tile(noise, reps)[:length]


def scaled_noise(clean: np.ndarray, noise: np.ndarray, snr_db: float, active=None) -> np.ndarray:
    noise = fit_noise(np.asarray(noise, dtype=np.float64), len(clean))
    if active is None:
        active = speech_mask(clean)
    p_clean = np.mean(clean[active] ** 2) if active.any() else 0.0
    p_noise = np.mean(noise[active] ** 2) if active.any() else 0.0
    if p_clean <= 0.0:
        raise InvalidInputError("clean signal has no power in its speech-active region")
    if p_noise <= 0.0:
        raise InvalidInputError("noise has no power over the speech-active region")
    return noise * np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, active=None) -> Waveform:
    """clean + noise scaled to ``snr_db`` measured over the speech-active samples of ``clean``."""
    d = scaled_noise(clean.samples, noise.samples, snr_db, active)
    return Waveform(clean.samples + d, clean.sample_rate)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    master_seed: int = 0
    n_speakers: int = 6
    train_dialogues: int = 40
    val_dialogues: int = 4
    test_se_dialogues: int = 10
    test_si_dialogues: int = 10
    noises: tuple[str, ...] = NOISE_KINDS
    train_snrs: tuple[float, ...] = (15, 10, 5, 0, -5, -10)
    snrs_per_pair: int = 3
    test_snrs: tuple[float, ...] = (5, 0, -5)
    utt_min_s: float = 0.6
    utt_max_s: float = 1.2
    gap_min_s: float = 0.15
    gap_max_s: float = 0.35

    def validate(self) -> None:
        if not 3 <= self.n_speakers <= len(TRAIN_SPEAKERS):
            raise UsageError(f"n_speakers must be in 3..{len(TRAIN_SPEAKERS)}")
        counts = (self.train_dialogues, self.val_dialogues, self.test_se_dialogues, self.test_si_dialogues)
        if min(counts) < 0 or self.train_dialogues == 0:
            raise UsageError("dialogue counts must be >= 0 and train_dialogues > 0")
        bad = [k for k in self.noises if k not in NOISE_KINDS]
        if bad or not self.noises:
            raise UsageError(f"unknown noise kinds {bad}")
        if not 1 <= self.snrs_per_pair <= len(self.train_snrs):
            raise UsageError("snrs_per_pair must be between 1 and len(train_snrs)")
        if not self.test_snrs:
            raise UsageError("test_snrs must not be empty")
        if not 0.5 <= self.utt_min_s <= self.utt_max_s <= 5.0:
            raise UsageError("utterance duration range must lie within [0.5, 5] s")
        if not 0 <= self.gap_min_s <= self.gap_max_s:
            raise UsageError("gap range is invalid")

    def expected_counts(self) -> dict[str, int]:
        n = len(self.noises)
        return {
            "train": self.train_dialogues * n * self.snrs_per_pair,
            "val": self.val_dialogues * n * self.snrs_per_pair,
            "test_se": self.test_se_dialogues * n * len(self.test_snrs),
            "test_si": self.test_si_dialogues * n * len(self.test_snrs),
        }


@dataclass
class ManifestRecord:
    clip_id: str
    noisy_path: str
    clean_path: str
    labels_path: str | None
    snr_db: float
    noise_kind: str
    speaker_ids: list[int]
    split: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class _DialogueJob:
    split: str
    index: int
    speakers: list[SpeakerSpec]
    pairs: list[tuple[str, float]] = field(default_factory=list)
    labeled: bool = True


def _plan(cfg: CorpusConfig) -> list[_DialogueJob]:
    train_specs = list(TRAIN_SPEAKERS[: cfg.n_speakers])
    jobs = []
    for split, count in (
        ("train", cfg.train_dialogues),
        ("val", cfg.val_dialogues),
        ("test_se", cfg.test_se_dialogues),
        ("test_si", cfg.test_si_dialogues),
    ):
        rng = _rng(cfg.master_seed, SPLITS.index(split), 101)
        for i in range(count):
            if split == "test_se":
                order = rng.permutation(len(HELD_OUT_SPEAKERS))
                speakers = [HELD_OUT_SPEAKERS[j] for j in order]
            else:
                picks = rng.choice(len(train_specs), size=3, replace=False)
                speakers = [train_specs[j] for j in picks]
            job = _DialogueJob(split, i, speakers, labeled=split != "test_se")
            for kind in cfg.noises:
                if split in ("train", "val"):
                    chosen = rng.choice(len(cfg.train_snrs), cfg.snrs_per_pair, replace=False)
                    snrs = [cfg.train_snrs[j] for j in sorted(chosen)]
                else:
                    snrs = list(cfg.test_snrs)
                job.pairs += [(kind, float(s)) for s in snrs]
            jobs.append(job)
    return jobs


def _snr_tag(snr: float) -> str:
    return f"{'m' if snr < 0 else 'p'}{abs(snr):g}"


def _render(job: _DialogueJob, cfg: CorpusConfig, out: Path, stft_cfg: StftConfig) -> list[ManifestRecord]:
    seed = cfg.master_seed
    key = (seed, SPLITS.index(job.split), job.index)
    rng = _rng(*key, 7)
    gap = rng.uniform(cfg.gap_min_s, cfg.gap_max_s)
    clip, labels = make_dialogue(
        job.speakers, gap, int(rng.integers(2**31)), (cfg.utt_min_s, cfg.utt_max_s), stft_cfg
    )
    clean = clip.waveform
    stem = f"{job.split}/d{job.index:03d}"
    (out / job.split).mkdir(parents=True, exist_ok=True)
    write_wav(out / f"{stem}_clean.wav", clean)
    labels_path = None
    if job.labeled:
        labels_path = f"{stem}_labels.csv"
        write_labels(out / labels_path, labels)
    active = speech_mask(clean.samples)
    records = []
    for kind, snr in job.pairs:
        noise_seed = int(_rng(*key, NOISE_KINDS.index(kind), int(snr * 10) + 1000).integers(2**31))
        noise = synth_noise(kind, len(clean), noise_seed, clean.sample_rate)
        noisy = mix_at_snr(clean, noise, snr, active)
        clip_id = f"{job.split}_d{job.index:03d}_{kind}_{_snr_tag(snr)}"
        noisy_path = f"{stem}_{kind}_{_snr_tag(snr)}.wav"
        write_wav(out / noisy_path, noisy)
        records.append(
            ManifestRecord(
                clip_id,
                noisy_path,
                f"{stem}_clean.wav",
                labels_path,
                snr,
                kind,
                [s.id for s in job.speakers],
                job.split,
            )
        )
    return records


def build_dataset(
    cfg: CorpusConfig, out_dir: str | Path, stft_cfg: StftConfig = DEFAULT_STFT
) -> list[ManifestRecord]:
    """Render every split to ``out_dir`` and write ``manifest.jsonl``. Pure in (cfg, master_seed)."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    jobs = _plan(cfg)
    workers = max(1, int(os.environ.get("ATM_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda j: _render(j, cfg, out, stft_cfg), jobs))
    records = [r for batch in results for r in batch]
    with open(out / "manifest.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return records


def write_labels(path: str | Path, labels: SpeakerLabelSeq) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "class_index"])
        for i, c in enumerate(labels.classes):
            w.writerow([i, int(c)])


def read_labels(path: str | Path) -> SpeakerLabelSeq:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return SpeakerLabelSeq(np.array([int(r[1]) for r in rows], dtype=np.int64))


def read_manifest(path: str | Path, split: str | None = None) -> list[ManifestRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = ManifestRecord(**json.loads(line))
                if split is None or rec.split == split:
                    records.append(rec)
    return records


def manifest_hash(out_dir: str | Path) -> str:
    """SHA-256 over the manifest and every file it references, in manifest order."""
    out = Path(out_dir)
    h = hashlib.sha256((out / "manifest.jsonl").read_bytes())
    seen = set()
    for rec in read_manifest(out):
        for rel in (rec.clean_path, rec.noisy_path, rec.labels_path):
            if rel and rel not in seen:
                seen.add(rel)
                h.update(rel.encode())
                h.update((out / rel).read_bytes())
    return h.hexdigest()
