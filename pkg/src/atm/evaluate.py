"""Objective metrics: segmental SNR (+ improvement), band-envelope intelligibility, SI accuracy."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .corpus import VAD_RMS, ManifestRecord, read_labels
from .dsp import DEFAULT_STFT, StftConfig, Waveform, analyze, read_wav, stft, synthesize
from .errors import DataError, MetricError, UsageError

METRICS = ("ssnr", "ssnri", "intel", "si_acc")
SSNR_FLOOR, SSNR_CEIL = -10.0, 35.0
INTEL_BANDS = 15
INTEL_LO_HZ, INTEL_HI_HZ = 150.0, 4000.0
INTEL_SEGMENT = 30


def _trim(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.samples if isinstance(a, Waveform) else np.asarray(a, dtype=np.float64)
    b = b.samples if isinstance(b, Waveform) else np.asarray(b, dtype=np.float64)
    n = min(len(a), len(b))
    return a[:n], b[:n]


def segmental_snr(clean, test, segment: int = 512, vad_rms: float = VAD_RMS) -> float:
    """Mean per-segment SNR over non-overlapping 32 ms segments, clamped to [-10, 35] dB.

    Segments whose clean RMS is below ``vad_rms`` do not count.
    """
    s, t = _trim(clean, test)
    values = []
    for lo in range(0, len(s) - segment + 1, segment):
        cs = s[lo : lo + segment]
        if np.sqrt(np.mean(cs**2)) < vad_rms:
            continue
        err = np.sum((cs - t[lo : lo + segment]) ** 2)
        sig = np.sum(cs**2)
        snr = SSNR_CEIL if err == 0 else 10.0 * np.log10(sig / err)
        values.append(min(max(snr, SSNR_FLOOR), SSNR_CEIL))
    if not values:
        raise MetricError("segmental SNR undefined: every segment of the clean signal is silent")
    return float(np.mean(values))


def ssnri(clean, noisy, enhanced) -> float:
    return segmental_snr(clean, enhanced) - segmental_snr(clean, noisy)


def band_matrix(cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """(15, n_bins) 0/1 matrix grouping STFT bins into log-spaced bands over 150-4000 Hz."""
    edges = np.geomspace(INTEL_LO_HZ, INTEL_HI_HZ, INTEL_BANDS + 1)
    freqs = cfg.bin_frequencies()
    bands = np.zeros((INTEL_BANDS, cfg.n_bins))
    for j in range(INTEL_BANDS):
        bands[j] = (freqs >= edges[j]) & (freqs < edges[j + 1])
    if np.any(bands.sum(axis=1) == 0):
        raise UsageError("STFT resolution too coarse: an intelligibility band has no bins")
    return bands


def intel_score(clean, test, cfg: StftConfig = DEFAULT_STFT) -> float:
    """Mean short-time correlation of clean vs test band envelopes (STOI-style proxy)."""
    s, t = _trim(clean, test)
    if cfg.n_frames(len(s)) < INTEL_SEGMENT:
        raise MetricError(f"intelligibility score needs at least {INTEL_SEGMENT} frames")
    bands = band_matrix(cfg)
    env_s = np.sqrt(bands @ (np.abs(stft(s, cfg)) ** 2).T)  # (bands, N)
    env_t = np.sqrt(bands @ (np.abs(stft(t, cfg)) ** 2).T)
    ws = sliding_window_view(env_s, INTEL_SEGMENT, axis=1)  # (bands, segs, 30)
    wt = sliding_window_view(env_t, INTEL_SEGMENT, axis=1)
    ws = ws - ws.mean(axis=-1, keepdims=True)
    wt = wt - wt.mean(axis=-1, keepdims=True)
    ns = np.linalg.norm(ws, axis=-1)
    nt = np.linalg.norm(wt, axis=-1)
    valid = (ns > 0) & (nt > 0)
    if not valid.any():
        raise MetricError("intelligibility score undefined: no segment has envelope variation")
    corr = np.sum(ws * wt, axis=-1)[valid] / (ns[valid] * nt[valid])
    return float(np.mean(corr))


def si_accuracy(posteriors, labels) -> float:
    """Fraction of frames whose argmax class (lowest index on ties) equals the label."""
    post = np.asarray(getattr(posteriors, "data", posteriors))
    lab = np.asarray(getattr(labels, "classes", labels))
    if lab.ndim == 2:
        lab = lab.argmax(axis=1)
    if len(post) != len(lab):
        raise DataError(f"{len(post)} posterior frames vs {len(lab)} labels")
    return float(np.mean(post.argmax(axis=1) == lab))


# ---------------------------------------------------------------------------
# Batch evaluation over a manifest split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    clip_id: str
    noise: str
    snr_db: float
    metric: str
    value: float


def enhance_waveform(system, noisy: Waveform, cfg: StftConfig = DEFAULT_STFT) -> Waveform:
    """Enhance in the LPS domain, resynthesize with the noisy phase, pad to the input length."""
    lps, phase = analyze(noisy, cfg)
    out = synthesize(system.enhance_lps(lps), phase, cfg).samples
    padded = np.zeros(len(noisy))
    padded[: len(out)] = out
    return Waveform(padded, noisy.sample_rate)


def evaluate_split(system, records: list[ManifestRecord], root, passthrough: bool = False,
                   cfg: StftConfig = DEFAULT_STFT) -> list[MetricRow]:
    """Per-clip metric rows, sorted by clip id.

    SE metrics (ssnr, ssnri, intel) are produced when the system enhances (or
    ``passthrough`` is set, scoring the noisy input itself); si_acc when the
    system has an SI model and the clip is labeled.
    """
    root = Path(root)
    rows = []
    for rec in sorted(records, key=lambda r: r.clip_id):
        noisy = read_wav(root / rec.noisy_path)
        clean = read_wav(root / rec.clean_path)
        key = (rec.clip_id, rec.noise_kind, float(rec.snr_db))
        if passthrough or (system is not None and system.has_se):
            enhanced = noisy if passthrough else enhance_waveform(system, noisy, cfg)
            rows.append(MetricRow(*key, "ssnr", segmental_snr(clean, enhanced)))
            rows.append(MetricRow(*key, "ssnri", ssnri(clean, noisy, enhanced)))
            rows.append(MetricRow(*key, "intel", intel_score(clean, enhanced, cfg)))
        if not passthrough and system is not None and system.has_si and rec.labels_path:
            labels = read_labels(root / rec.labels_path)
            post = system.speaker_posterior(analyze(noisy, cfg)[0])
            rows.append(MetricRow(*key, "si_acc", si_accuracy(post.posterior, labels)))
    return rows


def aggregate(rows: list[MetricRow]) -> list[tuple[str, float, str, float, int]]:
    """Mean value per (noise, snr_db, metric), in sorted key order."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r.noise, r.snr_db, r.metric)].append(r.value)
    return [(n, s, m, float(np.mean(v)), len(v)) for (n, s, m), v in sorted(groups.items())]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(path, rows: list[MetricRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "noise", "snr_db", "metric", "value"])
        for r in rows:
            w.writerow([r.clip_id, r.noise, _fmt(r.snr_db), r.metric, _fmt(r.value)])


def write_aggregate(path, rows: list[MetricRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["noise", "snr_db", "metric", "mean", "count"])
        for noise, snr, metric, mean, count in aggregate(rows):
            w.writerow([noise, _fmt(snr), metric, _fmt(mean), count])


def read_metrics(path) -> list[MetricRow]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricRow(r["clip_id"], r["noise"], float(r["snr_db"]), r["metric"], float(r["value"]))
            for r in rows]


def export_embeddings(system, records: list[ManifestRecord], root, out_path,
                      cfg: StftConfig = DEFAULT_STFT) -> int:
    """Write per-frame speaker codes and true classes to CSV; returns the row count."""
    if not system.has_si:
        raise UsageError(f"variant {system.variant!r} has no SI model")
    root = Path(root)
    n_rows = 0
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header_done = False
        for rec in sorted(records, key=lambda r: r.clip_id):
            if not rec.labels_path:
                continue
            labels = read_labels(root / rec.labels_path).classes
            feats = system.speaker_posterior(analyze(read_wav(root / rec.noisy_path), cfg)[0]).features.data
            if len(feats) != len(labels):
                raise DataError(f"{rec.clip_id}: {len(labels)} labels vs {len(feats)} frames")
            if not header_done:
                w.writerow(["clip_id", "frame_index", "class_index"]
                           + [f"e{i}" for i in range(feats.shape[1])])
                header_done = True
            for i, (row, c) in enumerate(zip(feats, labels)):
                w.writerow([rec.clip_id, i, int(c)] + [_fmt(v) for v in row])
                n_rows += 1
    return n_rows
