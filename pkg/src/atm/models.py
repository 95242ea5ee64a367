"""LSTM-SE, DNN-SI, AttNet and the MTL / ATM_bef / ATM_ide compositions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DenseParams, LstmParams, Tensor
from .errors import InvalidInputError

GATE_SATURATION_BIAS = 40.0  # sigmoid(40) rounds to exactly 1.0 in float64


@dataclass(frozen=True)
class ModelSizes:
    n_bins: int = 257
    lstm_layers: int = 2
    lstm_hidden: int = 300
    si_hidden: tuple[int, ...] = (1024, 1024, 256)
    n_classes: int = 7
    att_hidden: tuple[int, ...] = (300, 300)
    context: int = 5

    @property
    def speaker_dim(self) -> int:
        return self.si_hidden[-1]

    def si_input(self, variant: str) -> int:
        width = self.n_bins if variant == "si" else self.lstm_hidden
        return width * (2 * self.context + 1)


PAPER_SIZES = ModelSizes()
DESK_SIZES = ModelSizes(lstm_hidden=64, si_hidden=(128, 128, 64), att_hidden=(64, 64))


@dataclass
class SeModel:
    lstm_layers: list[LstmParams]
    output: DenseParams

    def __post_init__(self):
        for a, b in zip(self.lstm_layers, self.lstm_layers[1:]):
            if b.in_dim != a.hidden:
                raise InvalidInputError("LSTM layer widths do not chain")
        if self.output.in_dim != self.lstm_layers[-1].hidden:
            raise InvalidInputError("SE output layer does not match the last LSTM width")

    @property
    def in_dim(self) -> int:
        return self.lstm_layers[0].in_dim

    @property
    def hidden(self) -> int:
        return self.lstm_layers[-1].hidden

    def named_parameters(self, prefix: str = "se") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.lstm_layers):
            out.update(layer.named_parameters(f"{prefix}/layer{i}"))
        out.update(self.output.named_parameters(f"{prefix}/layer{len(self.lstm_layers)}"))
        return out

    @classmethod
    def init(cls, rng, n_bins=257, hidden=300, layers=2) -> "SeModel":
        lstms = [LstmParams.init(rng, n_bins if i == 0 else hidden, hidden) for i in range(layers)]
        return cls(lstms, DenseParams.init(rng, hidden, n_bins))


@dataclass
class DenseStack:
    """Feed-forward stack: ReLU on hidden layers, ``final`` activation on the last."""

    layers: list[DenseParams]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.in_dim != a.out_dim:
                raise InvalidInputError("dense layer widths do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}/layer{i}"))
        return out

    @classmethod
    def init(cls, rng, widths):
        return cls([DenseParams.init(rng, a, b) for a, b in zip(widths, widths[1:])])


class SiModel(DenseStack):
    def named_parameters(self, prefix: str = "si") -> dict[str, Tensor]:
        return super().named_parameters(prefix)


class AttNetModel(DenseStack):
    def named_parameters(self, prefix: str = "att") -> dict[str, Tensor]:
        return super().named_parameters(prefix)


@dataclass
class SpeakerPosterior:
    posterior: Tensor  # (N, K+1)
    features: Tensor  # (N, penultimate width), the speaker code


def init_models(rng: np.random.Generator, sizes: ModelSizes, variant: str):
    """Fresh (se, si, att) for ``variant``; components the variant lacks are None."""
    se = si = att = None
    if variant != "si":
        se = SeModel.init(rng, sizes.n_bins, sizes.lstm_hidden, sizes.lstm_layers)
    if variant != "se":
        widths = (sizes.si_input(variant), *sizes.si_hidden, sizes.n_classes)
        si = SiModel.init(rng, widths)
    if variant in ("atm_bef", "atm_ide"):
        att = AttNetModel.init(rng, (sizes.speaker_dim, *sizes.att_hidden, sizes.lstm_hidden))
    return se, si, att


def identity_attnet(speaker_dim: int, hidden: tuple[int, ...], width: int) -> AttNetModel:
    """AttNet whose output is exactly 1.0 for every input (zero weights, saturated bias)."""
    widths = (speaker_dim, *hidden, width)
    layers = []
    for a, b in zip(widths, widths[1:]):
        layers.append(DenseParams(ad.parameter(np.zeros((b, a))), ad.parameter(np.zeros(b))))
    layers[-1].bias.data = np.full(width, GATE_SATURATION_BIAS)
    return AttNetModel(layers)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.data.ndim != 2 or x.shape[1] != width:
        raise InvalidInputError(f"{what}: expected (N, {width}) input, got {x.shape}")


def se_forward(m: SeModel, y) -> tuple[Tensor, list[Tensor]]:
    """Return (S_hat, [z_1 .. z_{L+1}]) where z_1 is the input and z_{L+1} the top LSTM output."""
    y = ad.as_tensor(y)
    _check_width(y, m.in_dim, "se_forward")
    hidden = [y]
    for layer in m.lstm_layers:
        hidden.append(ad.lstm_sequence(layer, hidden[-1]))
    return ad.dense_forward(m.output, hidden[-1]), hidden


def _stack_forward(layers: list[DenseParams], x: Tensor, final: str):
    feats = x
    for layer in layers[:-1]:
        feats = ad.relu(ad.dense_forward(layer, feats))
    return ad.activation(final, ad.dense_forward(layers[-1], feats)), feats


def si_forward(m: SiModel, c) -> SpeakerPosterior:
    c = ad.as_tensor(c)
    _check_width(c, m.in_dim, "si_forward")
    post, feats = _stack_forward(m.layers, c, "softmax")
    return SpeakerPosterior(post, feats)


def attnet_forward(m: AttNetModel, spk) -> Tensor:
    spk = ad.as_tensor(spk)
    _check_width(spk, m.in_dim, "attnet_forward")
    return _stack_forward(m.layers, spk, "sigmoid")[0]


def _gate(att: AttNetModel | None, features: Tensor, gate) -> Tensor:
    if gate is not None:
        return ad.as_tensor(gate)
    return attnet_forward(att, features)


def mtl_forward(se: SeModel, si: SiModel, y, radius: int = 5):
    s_hat, hidden = se_forward(se, y)
    post = si_forward(si, ad.context_stack(hidden[-1], radius))
    return s_hat, post


def atm_bef_forward(
    se: SeModel,
    si: SiModel,
    att: AttNetModel | None,
    y,
    radius: int = 5,
    gate=None,
    detach_speaker: bool = True,
):
    """Two-pass attention on the input of the top LSTM layer.

    Pass 1 is the plain SE stack; its top output feeds SI and AttNet. Pass 2
    reruns only the top LSTM layer on ``omega * z_L`` and the output layer.
    ``gate`` replaces the AttNet output when given. With ``detach_speaker`` the
    speaker code enters AttNet as a constant, so SE/AttNet gradients stop at SI.
    """
    if len(se.lstm_layers) < 2:
        raise InvalidInputError("atm_bef needs at least two LSTM layers")
    _, hidden = se_forward(se, y)
    post = si_forward(si, ad.context_stack(hidden[-1], radius))
    speaker = ad.stop_gradient(post.features) if detach_speaker else post.features
    omega = _gate(att, speaker, gate)
    gated = ad.mul(omega, hidden[-2])
    top = ad.lstm_sequence(se.lstm_layers[-1], gated)
    return ad.dense_forward(se.output, top), post, omega


def atm_ide_forward(
    se: SeModel,
    si: SiModel,
    att: AttNetModel | None,
    y,
    radius: int = 5,
    gate=None,
    detach_speaker: bool = False,
):
    """Single pass: S_hat = W (omega * z_{L+1}) + b with omega from AttNet(SI speaker code)."""
    _, hidden = se_forward(se, y)
    post = si_forward(si, ad.context_stack(hidden[-1], radius))
    speaker = ad.stop_gradient(post.features) if detach_speaker else post.features
    omega = _gate(att, speaker, gate)
    s_hat = ad.dense_forward(se.output, ad.mul(omega, hidden[-1]))
    return s_hat, post, omega
