"""Training loops for LSTM-SE, DNN-SI, MTL, ATM_bef (iterative) and ATM_ide (weighted joint)."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape
from .dsp import context_indices
from .errors import UsageError
from .models import ModelSizes
from .pipeline import FeatureNorm, System, Utterance, check_variant, fresh_system

log = logging.getLogger(__name__)

# RNG stream ids derived from the run seed
_INIT, _SE_ORDER, _SI_ORDER = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "se"
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    patience: int = 5
    si_batch_frames: int = 256
    warm_epochs: int = 5
    rounds: int = 3
    si_epochs_per_round: int = 1
    se_epochs_per_round: int = 1
    identity_gate: bool = False
    mask_l2: bool = False

    def validate(self) -> None:
        check_variant(self.variant)
        if self.epochs < 0 or self.lr < 0 or self.patience < 1 or self.si_batch_frames < 1:
            raise UsageError("epochs and lr must be >= 0, patience and batch size >= 1")
        if min(self.warm_epochs, self.rounds, self.si_epochs_per_round, self.se_epochs_per_round) < 0:
            raise UsageError("ATM_bef schedule counts must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    l1: float | None
    l2: float | None
    total: float
    sigma1: float | None = None
    sigma2: float | None = None
    seconds: float = 0.0
    val_l1: float | None = None
    val_l2: float | None = None
    val_total: float | None = None


@dataclass
class TrainReport:
    variant: str
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = (
        "epoch", "l1", "l2", "total", "sigma1", "sigma2", "seconds",
        "val_l1", "val_l2", "val_total", "phase",
    )

    def totals(self, phase: str | None = None) -> list[float]:
        return [r.total for r in self.records if phase is None or r.phase == phase]

    def without_timing(self) -> list[tuple]:
        return [tuple(v for k, v in vars(r).items() if k != "seconds") for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.records:
                row = []
                for col in self.COLUMNS:
                    v = getattr(r, col)
                    row.append("" if v is None else (repr(v) if isinstance(v, float) else v))
                w.writerow(row)


@dataclass
class TrainData:
    train: list[Utterance]
    val: list[Utterance]
    norm: FeatureNorm
    n_classes: int

    @classmethod
    def from_utterances(cls, train, val, n_classes: int = 7) -> "TrainData":
        if not train:
            raise UsageError("training set is empty")
        norm = FeatureNorm.fit([u.noisy for u in train], [u.clean for u in train])
        for u in (*train, *val):
            u.prepare(norm, n_classes)
        return cls(list(train), list(val), norm, n_classes)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


# ---------------------------------------------------------------------------
# Per-utterance losses
# ---------------------------------------------------------------------------


def utterance_losses(system: System, u: Utterance, mode: str, gate=None):
    """(L1, L2, total) tensors for one utterance.

    ``mode`` picks the objective: ``se`` (MSE only), ``si`` (cross-entropy only),
    ``sum`` (L1 + L2), ``weighted`` (uncertainty-weighted), ``weighted_masked``
    (weighted with the L2 term zeroed and the speaker code detached, so only
    the SE and AttNet parameters receive gradient).
    """
    if gate is True:
        gate = np.ones((len(u.x), system.se.hidden))
    detach = True if mode == "weighted_masked" else None
    s_hat, post, _ = system.forward(u.x, gate=gate, detach_speaker=detach)
    l1 = ad.mse_loss(s_hat, u.t) if s_hat is not None and mode != "si" else None
    l2 = ad.cross_entropy_loss(post.posterior, u.one_hot) if post is not None and mode != "se" else None
    if mode == "se":
        return l1, None, l1
    if mode == "si":
        return None, l2, l2
    if mode == "sum":
        return l1, l2, ad.add(l1, l2)
    if mode == "weighted":
        return l1, l2, ad.dynamic_weighted_loss(system.loss, l1, l2)
    if mode == "weighted_masked":
        return l1, l2, ad.dynamic_weighted_loss(system.loss, l1, ad.scale(l2, 0.0))
    raise UsageError(f"unknown loss mode {mode!r}")


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _item(t):
    return None if t is None else t.item()


def _check_finite(values, params) -> None:
    for v in values:
        if v is not None and not np.isfinite(v):
            raise FloatingPointError(f"non-finite loss {v}")
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"non-finite values in {name}")


def _utterance_epoch(system, utts, mode, opt, rng, gate=None):
    l1s, l2s, tots = [], [], []
    for k in rng.permutation(len(utts)):
        with Tape() as tape:
            l1, l2, total = utterance_losses(system, utts[k], mode, gate)
        opt.step(tape.backward(total))
        l1s.append(_item(l1))
        l2s.append(_item(l2))
        tots.append(total.item())
    return _mean(l1s), _mean(l2s), _mean(tots)


def _evaluate(system, utts, mode, gate=None):
    if not utts:
        return None, None, None
    vals = [utterance_losses(system, u, mode, gate) for u in utts]
    return tuple(_mean([_item(v[i]) for v in vals]) for i in range(3))


def _snapshot(params):
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params, snap):
    for k, t in params.items():
        t.data = snap[k]


def _sigmas(system):
    if system.loss is None:
        return None, None
    return system.loss.sigma1, system.loss.sigma2


def _run_epochs(system, data, cfg, mode, params, epoch_fn, report, phase, epochs,
                early_stop=True, gate=None):
    opt = Adam(params, cfg.lr)
    best, best_snap, stale = np.inf, None, 0
    for _ in range(epochs):
        t0 = time.perf_counter()
        l1, l2, tot = epoch_fn(opt)
        v1, v2, vt = _evaluate(system, data.val, mode, gate)
        _check_finite((l1, l2, tot, v1, v2, vt), system.named_parameters())
        s1, s2 = _sigmas(system)
        report.records.append(
            EpochRecord(len(report.records) + 1, phase, l1, l2, tot, s1, s2,
                        time.perf_counter() - t0, v1, v2, vt)
        )
        log.info("%s %s epoch %d: train %.5f val %s", system.variant, phase,
                 len(report.records), tot, vt)
        if not early_stop or vt is None:
            continue
        if vt < best:
            best, best_snap, stale = vt, _snapshot(params), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if early_stop and best_snap is not None:
        _restore(params, best_snap)


# ---------------------------------------------------------------------------
# Standalone SI: frame-shuffled minibatches over context-expanded noisy LPS
# ---------------------------------------------------------------------------


def _si_epoch(system, utts, opt, rng, batch_frames, features=None):
    """One pass over all labeled frames. ``features(u)`` gives the per-frame SI base features."""
    base = [features(u) if features else u.x for u in utts]
    ctx_idx = [context_indices(len(b), system.context) for b in base]
    index = np.concatenate(
        [np.stack([np.full(len(b), i), np.arange(len(b))], axis=1) for i, b in enumerate(base)]
    )
    index = index[rng.permutation(len(index))]
    losses = []
    for lo in range(0, len(index), batch_frames):
        chunk = index[lo : lo + batch_frames]
        rows = np.stack([base[i][ctx_idx[i][n]].reshape(-1) for i, n in chunk])
        targets = np.stack([utts[i].one_hot[n] for i, n in chunk])
        with Tape() as tape:
            post = _si_only(system, rows)
            loss = ad.cross_entropy_loss(post.posterior, targets)
        opt.step(tape.backward(loss))
        losses.append(loss.item() * len(chunk))
    return float(np.sum(losses) / len(index))


def _si_only(system, rows):
    from .models import si_forward

    return si_forward(system.si, rows)


# ---------------------------------------------------------------------------
# Public trainers
# ---------------------------------------------------------------------------


def _init(data: TrainData, cfg: TrainConfig, sizes: ModelSizes, variant: str) -> System:
    cfg.validate()
    if not data.train:
        raise UsageError("training set is empty")
    if sizes.n_classes != data.n_classes:
        raise UsageError("model class count differs from data class count")
    return fresh_system(variant, sizes, data.norm, _rng(cfg.seed, _INIT))


def train_se(data: TrainData, cfg: TrainConfig, sizes: ModelSizes = ModelSizes()):
    system = _init(data, cfg, sizes, "se")
    report = TrainReport("se")
    rng = _rng(cfg.seed, _SE_ORDER)
    params = system.named_parameters()
    _run_epochs(system, data, cfg, "se", params,
                lambda opt: _utterance_epoch(system, data.train, "se", opt, rng),
                report, "se", cfg.epochs)
    return system, report


def train_si(data: TrainData, cfg: TrainConfig, sizes: ModelSizes = ModelSizes()):
    system = _init(data, cfg, sizes, "si")
    report = TrainReport("si")
    rng = _rng(cfg.seed, _SI_ORDER)
    params = system.named_parameters()

    def epoch(opt):
        return None, (l2 := _si_epoch(system, data.train, opt, rng, cfg.si_batch_frames)), l2

    _run_epochs(system, data, cfg, "si", params, epoch, report, "si", cfg.epochs)
    return system, report


def train_mtl(data: TrainData, cfg: TrainConfig, sizes: ModelSizes = ModelSizes()):
    system = _init(data, cfg, sizes, "mtl")
    report = TrainReport("mtl")
    rng = _rng(cfg.seed, _SE_ORDER)
    _run_epochs(system, data, cfg, "sum", system.named_parameters(),
                lambda opt: _utterance_epoch(system, data.train, "sum", opt, rng),
                report, "mtl", cfg.epochs)
    return system, report


def train_atm_bef(data: TrainData, cfg: TrainConfig, sizes: ModelSizes = ModelSizes()):
    """Warm-start SE, then per round: (1) SI on frozen-SE embeddings, (2)+(3) SE+AttNet with MSE.

    In step (3) the SI model is frozen and the speaker code enters AttNet as a
    constant, so only SE and AttNet parameters move.
    """
    system = _init(data, cfg, sizes, "atm_bef")
    report = TrainReport("atm_bef")
    se_rng = _rng(cfg.seed, _SE_ORDER)
    si_rng = _rng(cfg.seed, _SI_ORDER)
    se_params = system.se.named_parameters("se")
    si_params = system.si.named_parameters("si")
    se_att_params = {**se_params, **system.att.named_parameters("att")}
    gate = True if cfg.identity_gate else None

    # (0) warm start as plain LSTM-SE
    plain = System("se", system.norm, system.context, se=system.se)
    _run_epochs(plain, data, cfg, "se", se_params,
                lambda opt: _utterance_epoch(plain, data.train, "se", opt, se_rng),
                report, "warm", cfg.warm_epochs, early_stop=False)

    def embeddings(u):
        from .models import se_forward

        return se_forward(system.se, u.x)[1][-1].data

    for r in range(1, cfg.rounds + 1):
        # (1) SI on context of current top-LSTM codes; SE frozen
        cache = {id(u): embeddings(u) for u in data.train}

        def si_epoch(opt):
            l2 = _si_epoch(system, data.train, opt, si_rng, cfg.si_batch_frames,
                           features=lambda u: cache[id(u)])
            return None, l2, l2

        _run_epochs(system, data, cfg, "si", si_params, si_epoch, report,
                    f"round{r}_si", cfg.si_epochs_per_round, early_stop=False)
        # (2)+(3) speaker codes from the frozen SI drive AttNet; SE+AttNet trained on MSE
        _run_epochs(system, data, cfg, "se", se_att_params,
                    lambda opt: _utterance_epoch(system, data.train, "se", opt, se_rng, gate),
                    report, f"round{r}_se", cfg.se_epochs_per_round, early_stop=False, gate=gate)
    return system, report


def train_atm_ide(data: TrainData, cfg: TrainConfig, sizes: ModelSizes = ModelSizes()):
    system = _init(data, cfg, sizes, "atm_ide")
    report = TrainReport("atm_ide")
    rng = _rng(cfg.seed, _SE_ORDER)
    mode = "weighted_masked" if cfg.mask_l2 else "weighted"
    _run_epochs(system, data, cfg, mode, system.named_parameters(),
                lambda opt: _utterance_epoch(system, data.train, mode, opt, rng),
                report, "atm_ide", cfg.epochs)
    return system, report


TRAINERS = {
    "se": train_se,
    "si": train_si,
    "mtl": train_mtl,
    "atm_bef": train_atm_bef,
    "atm_ide": train_atm_ide,
}


def train_variant(data: TrainData, cfg: TrainConfig, sizes: ModelSizes = ModelSizes()):
    return TRAINERS[check_variant(cfg.variant)](data, cfg, sizes)


def with_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    return replace(cfg, variant=variant)
