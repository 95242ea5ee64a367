"""Variant dispatch, feature normalization and manifest loading shared by train, eval and cli."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import LossParams, Tensor
from .corpus import ManifestRecord, read_labels, read_manifest
from .dsp import DEFAULT_STFT, StftConfig, analyze, read_wav
from .errors import DataError, UsageError
from .models import (
    AttNetModel,
    ModelSizes,
    SeModel,
    SiModel,
    SpeakerPosterior,
    atm_bef_forward,
    atm_ide_forward,
    mtl_forward,
    se_forward,
    si_forward,
)

VARIANTS = ("se", "si", "mtl", "atm_bef", "atm_ide")


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass
class FeatureNorm:
    """Per-bin standardization of noisy inputs and clean targets."""

    noisy_mean: np.ndarray
    noisy_std: np.ndarray
    clean_mean: np.ndarray
    clean_std: np.ndarray

    @classmethod
    def fit(cls, noisy: list[np.ndarray], clean: list[np.ndarray]) -> "FeatureNorm":
        y = np.concatenate(noisy)
        s = np.concatenate(clean)
        return cls(y.mean(0), np.maximum(y.std(0), 1e-3), s.mean(0), np.maximum(s.std(0), 1e-3))

    @classmethod
    def identity(cls, n_bins: int) -> "FeatureNorm":
        return cls(np.zeros(n_bins), np.ones(n_bins), np.zeros(n_bins), np.ones(n_bins))

    def input(self, lps: np.ndarray) -> np.ndarray:
        return (lps - self.noisy_mean) / self.noisy_std

    def target(self, lps: np.ndarray) -> np.ndarray:
        return (lps - self.clean_mean) / self.clean_std

    def output(self, pred: np.ndarray) -> np.ndarray:
        return pred * self.clean_std + self.clean_mean


@dataclass
class System:
    """A trained (or fresh) model bundle for one variant."""

    variant: str
    norm: FeatureNorm
    context: int = 5
    se: SeModel | None = None
    si: SiModel | None = None
    att: AttNetModel | None = None
    loss: LossParams | None = None

    @property
    def has_se(self) -> bool:
        return self.se is not None

    @property
    def has_si(self) -> bool:
        return self.si is not None

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.se is not None:
            out.update(self.se.named_parameters("se"))
        if self.si is not None:
            out.update(self.si.named_parameters("si"))
        if self.att is not None:
            out.update(self.att.named_parameters("att"))
        if self.loss is not None:
            out.update(self.loss.named_parameters("loss"))
        return out

    def forward(self, x, gate=None, detach_speaker: bool | None = None):
        """Normalized-domain forward. Returns (S_hat or None, SpeakerPosterior or None, omega or None).

        ``detach_speaker`` defaults to True for atm_bef (SI frozen in its SE step)
        and False for atm_ide (joint training through the attention path).
        """
        v = self.variant
        if v == "se":
            return se_forward(self.se, x)[0], None, None
        if v == "si":
            return None, si_forward(self.si, ad.context_stack(x, self.context)), None
        if v == "mtl":
            s_hat, post = mtl_forward(self.se, self.si, x, self.context)
            return s_hat, post, None
        if v == "atm_bef":
            detach = True if detach_speaker is None else detach_speaker
            return atm_bef_forward(self.se, self.si, self.att, x, self.context, gate, detach)
        return atm_ide_forward(self.se, self.si, self.att, x, self.context, gate, bool(detach_speaker))

    def enhance_lps(self, noisy_lps: np.ndarray) -> np.ndarray:
        if not self.has_se:
            raise UsageError(f"variant {self.variant!r} has no SE model")
        s_hat = self.forward(self.norm.input(noisy_lps))[0]
        return self.norm.output(s_hat.data)

    def speaker_posterior(self, noisy_lps: np.ndarray) -> SpeakerPosterior:
        if not self.has_si:
            raise UsageError(f"variant {self.variant!r} has no SI model")
        return self.forward(self.norm.input(noisy_lps))[1]

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Loading manifests into feature arrays
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    record: ManifestRecord
    noisy: np.ndarray  # raw noisy LPS (N, B)
    clean: np.ndarray  # raw clean LPS (N, B)
    labels: np.ndarray | None  # (N,) class indices
    x: np.ndarray | None = None  # normalized noisy
    t: np.ndarray | None = None  # normalized clean
    one_hot: np.ndarray | None = field(default=None, repr=False)

    @property
    def clip_id(self) -> str:
        return self.record.clip_id

    def prepare(self, norm: FeatureNorm, n_classes: int) -> "Utterance":
        self.x = norm.input(self.noisy)
        self.t = norm.target(self.clean)
        if self.labels is not None:
            if self.labels.max() >= n_classes:
                raise DataError(f"{self.clip_id}: class index exceeds {n_classes - 1}")
            self.one_hot = np.eye(n_classes)[self.labels]
        return self


def load_split(
    manifest: str | Path, split: str, stft_cfg: StftConfig = DEFAULT_STFT
) -> list[Utterance]:
    root = Path(manifest)
    if root.is_file():
        root = root.parent
    records = read_manifest(root, split)
    clean_cache: dict[str, np.ndarray] = {}
    out = []
    for rec in records:
        noisy = read_wav(root / rec.noisy_path)
        if noisy.sample_rate != stft_cfg.sample_rate:
            raise DataError(f"{rec.noisy_path}: sample rate {noisy.sample_rate}")
        y = analyze(noisy, stft_cfg)[0]
        if rec.clean_path not in clean_cache:
            clean_cache[rec.clean_path] = analyze(read_wav(root / rec.clean_path), stft_cfg)[0]
        s = clean_cache[rec.clean_path]
        labels = None
        if rec.labels_path:
            labels = read_labels(root / rec.labels_path).classes
            if len(labels) != len(y):
                raise DataError(
                    f"{rec.clip_id}: {len(labels)} labels but {len(y)} feature frames"
                )
        if s.shape != y.shape:
            raise DataError(f"{rec.clip_id}: clean/noisy frame counts differ")
        out.append(Utterance(rec, y, s, labels))
    return out


def fresh_system(variant: str, sizes: ModelSizes, norm: FeatureNorm, rng) -> System:
    from .models import init_models

    check_variant(variant)
    se, si, att = init_models(rng, sizes, variant)
    loss = LossParams() if variant == "atm_ide" else None
    return System(variant, norm, sizes.context, se, si, att, loss)
