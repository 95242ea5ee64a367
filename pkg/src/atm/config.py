"""``key = value`` run configuration covering STFT, model sizes, training and corpus settings.

Keys are ``section.field``; sections are ``stft``, ``model``, ``train`` and ``corpus``.
``#`` starts a comment. Lists are comma separated. Unknown keys are rejected.
Every default is the dataclass default of the owning section (paper model sizes).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import CorpusConfig
from .dsp import StftConfig
from .errors import InvalidInputError, UsageError
from .models import DESK_SIZES, ModelSizes
from .train import TrainConfig

# keys owned elsewhere: variant comes from the command line, n_bins/n_classes are derived
_DERIVED = {"model": {"n_bins", "n_classes"}, "train": {"variant", "identity_gate", "mask_l2"}}


@dataclass(frozen=True)
class RunConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    model: ModelSizes = field(default_factory=ModelSizes)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls(model=DESK_SIZES).resolved()

    def resolved(self) -> "RunConfig":
        """Tie derived model widths to the STFT geometry and speaker count."""
        model = replace(
            self.model, n_bins=self.stft.n_bins, n_classes=self.corpus.n_speakers + 1
        )
        return replace(self, model=model)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return replace(
            self,
            train=replace(self.train, seed=seed),
            corpus=replace(self.corpus, master_seed=seed),
        )


_SECTIONS = {"stft": StftConfig, "model": ModelSizes, "train": TrainConfig, "corpus": CorpusConfig}


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_convert(s, inner, key) for s in items)
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {key}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        cls = _SECTIONS.get(section)
        hints = typing.get_type_hints(cls) if cls else {}
        if name not in hints or name in _DERIVED.get(section, ()):
            raise UsageError(f"line {lineno}: unknown config key {key!r}")
        updates[section][name] = _convert(value, hints[name], key)
    try:
        cfg = RunConfig(**{s: replace(getattr(base, s), **updates[s]) for s in _SECTIONS})
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    cfg = cfg.resolved()
    cfg.corpus.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().resolved()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    """Render every settable key with its current value."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if f.name in _DERIVED.get(section, ()):
                continue
            v = getattr(obj, f.name)
            text = ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            lines.append(f"{section}.{f.name} = {text}")
    return "\n".join(lines) + "\n"
