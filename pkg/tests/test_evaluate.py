import csv
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atm.corpus import TRAIN_SPEAKERS, make_dialogue, read_labels, read_manifest, synth_noise
from atm.errors import DataError, MetricError, UsageError
from atm.evaluate import (
    MetricRow,
    aggregate,
    band_matrix,
    enhance_waveform,
    evaluate_split,
    export_embeddings,
    intel_score,
    read_metrics,
    segmental_snr,
    si_accuracy,
    ssnri,
    write_aggregate,
    write_metrics,
)
from atm.dsp import read_wav
from atm.models import PAPER_SIZES
from atm.pipeline import FeatureNorm, fresh_system

from conftest import TINY_SIZES

CLEAN = make_dialogue(TRAIN_SPEAKERS[:3], 0.25, 21)[0].waveform.samples


def brute_ssnr(clean, test, seg=512, vad=1e-3):
    vals = []
    for k in range(len(clean) // seg):
        s = clean[k * seg : (k + 1) * seg]
        t = test[k * seg : (k + 1) * seg]
        if np.sqrt(sum(v * v for v in s) / seg) < vad:
            continue
        num = sum(v * v for v in s)
        den = sum((a - b) ** 2 for a, b in zip(s, t))
        vals.append(35.0 if den == 0 else min(max(10 * np.log10(num / den), -10.0), 35.0))
    return sum(vals) / len(vals)


# ---------------------------------------------------------------------------
# segmental SNR
# ---------------------------------------------------------------------------


class TestSegmentalSnr:
    def test_identity_clamps_high(self):
        assert segmental_snr(CLEAN, CLEAN) == 35.0

    def test_zero_db_per_segment(self):
        rng = np.random.default_rng(0)
        noise = rng.normal(size=len(CLEAN))
        test = CLEAN.copy()
        for lo in range(0, len(CLEAN) - 511, 512):
            s, n = CLEAN[lo : lo + 512], noise[lo : lo + 512]
            test[lo : lo + 512] = s + n * np.sqrt(np.sum(s**2) / np.sum(n**2))
        assert segmental_snr(CLEAN, test) == pytest.approx(0.0, abs=1e-9)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        test = CLEAN + 0.02 * rng.normal(size=len(CLEAN))
        assert segmental_snr(CLEAN, test) == pytest.approx(brute_ssnr(CLEAN, test), abs=1e-9)

    def test_low_clamp(self):
        test = CLEAN + 100.0 * np.random.default_rng(2).normal(size=len(CLEAN))
        assert segmental_snr(CLEAN, test) == -10.0

    def test_all_silent_raises(self):
        with pytest.raises(MetricError):
            segmental_snr(np.zeros(4096), np.ones(4096))

    def test_trims_to_shorter(self):
        assert segmental_snr(CLEAN, np.concatenate([CLEAN, np.ones(999)])) == 35.0

    def test_ssnri_identity(self):
        noisy = CLEAN + 0.05 * np.random.default_rng(3).normal(size=len(CLEAN))
        assert ssnri(CLEAN, noisy, noisy) == 0.0

    def test_ssnri_clean_is_maximal(self):
        noisy = CLEAN + 0.05 * np.random.default_rng(4).normal(size=len(CLEAN))
        assert ssnri(CLEAN, noisy, CLEAN) == pytest.approx(35.0 - segmental_snr(CLEAN, noisy), abs=1e-12)


# ---------------------------------------------------------------------------
# intelligibility proxy
# ---------------------------------------------------------------------------


class TestIntel:
    def test_bands(self):
        bands = band_matrix()
        assert bands.shape == (15, 257)
        assert bands.sum(axis=0).max() == 1.0
        assert np.all(bands.sum(axis=1) >= 1)

    def test_self_is_one(self):
        assert intel_score(CLEAN, CLEAN) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("c", [0.1, 3.0])
    def test_scale_invariant(self, c):
        assert intel_score(CLEAN, c * CLEAN) == pytest.approx(1.0, abs=1e-12)

    def test_independent_noise_scores_low(self):
        noise = synth_noise("white", len(CLEAN), 5).samples
        assert intel_score(CLEAN, noise) < 0.3

    def test_monotone_in_noise_level(self):
        noise = synth_noise("white", len(CLEAN), 6).samples
        scores = [intel_score(CLEAN, CLEAN + g * noise) for g in (0.01, 0.1, 1.0)]
        assert scores[0] > scores[1] > scores[2]

    def test_too_short(self):
        with pytest.raises(MetricError):
            intel_score(CLEAN[:512 + 28 * 256], CLEAN[:512 + 28 * 256])

    def test_bounded(self):
        rng = np.random.default_rng(7)
        assert -1.0 <= intel_score(CLEAN, rng.normal(size=len(CLEAN))) <= 1.0


# ---------------------------------------------------------------------------
# SI accuracy
# ---------------------------------------------------------------------------


class TestSiAccuracy:
    def test_perfect(self):
        labels = np.array([0, 3, 6, 2])
        assert si_accuracy(np.eye(7)[labels], labels) == 1.0

    def test_uniform_ties_break_to_zero(self):
        assert si_accuracy(np.full((5, 7), 1 / 7), np.zeros(5, dtype=int)) == 1.0

    def test_one_hot_labels_accepted(self):
        labels = np.array([1, 2])
        assert si_accuracy(np.eye(7)[[1, 5]], np.eye(7)[labels]) == 0.5

    def test_monte_carlo_chance(self):
        rng = np.random.default_rng(8)
        post = rng.dirichlet(np.ones(7), size=20000)
        assert si_accuracy(post, rng.integers(0, 7, 20000)) == pytest.approx(1 / 7, abs=0.05)

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            si_accuracy(np.zeros((3, 7)), np.zeros(4, dtype=int))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_range(self, n, seed):
        rng = np.random.default_rng(seed)
        acc = si_accuracy(rng.random((n, 7)), rng.integers(0, 7, n))
        assert 0.0 <= acc <= 1.0 and acc * n == pytest.approx(round(acc * n))


# ---------------------------------------------------------------------------
# split evaluation, aggregation, embeddings
# ---------------------------------------------------------------------------


class TestSplit:
    def test_aggregate_grouping(self):
        rows = [
            MetricRow("a", "white", 0.0, "ssnri", 1.0),
            MetricRow("b", "white", 0.0, "ssnri", 3.0),
            MetricRow("c", "pink", 0.0, "ssnri", 5.0),
            MetricRow("c", "pink", 0.0, "intel", 0.5),
        ]
        assert aggregate(rows) == [
            ("pink", 0.0, "intel", 0.5, 1),
            ("pink", 0.0, "ssnri", 5.0, 1),
            ("white", 0.0, "ssnri", 2.0, 2),
        ]

    def test_passthrough_scores(self, tiny_corpus):
        records = read_manifest(tiny_corpus, "test_se")
        rows = evaluate_split(None, records, tiny_corpus, passthrough=True)
        assert {r.metric for r in rows} == {"ssnr", "ssnri", "intel"}
        assert all(r.value == 0.0 for r in rows if r.metric == "ssnri")
        assert [r.clip_id for r in rows] == sorted(r.clip_id for r in rows)

    def test_csv_round_trip_and_cross_tab(self, tiny_corpus, tmp_path):
        records = read_manifest(tiny_corpus, "test_si")
        system = fresh_system("mtl", TINY_SIZES, FeatureNorm.identity(257), np.random.default_rng(0))
        rows = evaluate_split(system, records, tiny_corpus)
        write_metrics(tmp_path / "m.csv", rows)
        write_aggregate(tmp_path / "a.csv", rows)
        assert read_metrics(tmp_path / "m.csv") == rows
        with open(tmp_path / "a.csv") as fh:
            agg = list(csv.DictReader(fh))
        kinds = {r.noise_kind for r in records}
        snrs = {r.snr_db for r in records}
        assert len(agg) == len(kinds) * len(snrs) * 4
        assert all(int(a["count"]) == len(records) // (len(kinds) * len(snrs)) for a in agg)

    def test_enhance_keeps_length(self, tiny_corpus):
        rec = read_manifest(tiny_corpus, "test_se")[0]
        noisy = read_wav(tiny_corpus / rec.noisy_path)
        system = fresh_system("se", TINY_SIZES, FeatureNorm.identity(257), np.random.default_rng(0))
        assert len(enhance_waveform(system, noisy)) == len(noisy)

    def test_export_embeddings(self, tiny_corpus, tmp_path):
        records = read_manifest(tiny_corpus, "test_si")
        system = fresh_system("si", PAPER_SIZES, FeatureNorm.identity(257), np.random.default_rng(0))
        n = export_embeddings(system, records, tiny_corpus, tmp_path / "e.csv")
        frames = sum(len(read_labels(tiny_corpus / r.labels_path)) for r in records)
        assert n == frames
        with open(tmp_path / "e.csv") as fh:
            header = next(csv.reader(fh))
        assert len(header) - 3 == 256
        digest = hashlib.sha256((tmp_path / "e.csv").read_bytes()).hexdigest()
        export_embeddings(system, records, tiny_corpus, tmp_path / "f.csv")
        assert hashlib.sha256((tmp_path / "f.csv").read_bytes()).hexdigest() == digest

    def test_export_needs_si(self, tiny_corpus, tmp_path):
        system = fresh_system("se", TINY_SIZES, FeatureNorm.identity(257), np.random.default_rng(0))
        with pytest.raises(UsageError):
            export_embeddings(system, [], tiny_corpus, tmp_path / "e.csv")

    def test_metric_row_values_finite(self, tiny_corpus):
        rows = evaluate_split(None, read_manifest(tiny_corpus, "test_si"), tiny_corpus, passthrough=True)
        assert all(np.isfinite(r.value) for r in rows)
