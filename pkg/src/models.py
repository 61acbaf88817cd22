"""
Desk-scale networks: an MLP backbone with pluggable normalization layers,
the gradient-reversal layer and the domain discriminator used for
adversarial (DANN-style) training.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from src.norms import NORMALIZERS, NormCheckpoint, Normalizer, from_checkpoint, make_normalizer
from src.numerics import InvalidInputError, Parameter, Tensor, concat, conv2d, make_node

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]


class MlpSpec(BaseModel):
    widths: List[int] = Field(description="Layer widths: input, hidden..., classes", min_length=3)
    normalizer: Union[str, List[str]] = Field(default="rn", description="Normalizer kind for every hidden layer, or one per layer")
    norm_options: Dict[str, Any] = Field(default_factory=dict, description="Keyword options for the normalizers")
    activation: Literal["relu"] = "relu"

    @field_validator("widths")
    @classmethod
    def _positive(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        return widths

    @property
    def hidden(self) -> List[int]:
        return self.widths[1:-1]

    def kinds(self) -> List[str]:
        kinds = [self.normalizer] * len(self.hidden) if isinstance(self.normalizer, str) else list(self.normalizer)
        if len(kinds) != len(self.hidden):
            raise InvalidInputError(f"{len(kinds)} normalizer kinds for {len(self.hidden)} hidden layers")
        for kind in kinds:
            if kind not in NORMALIZERS:
                raise InvalidInputError(f"unknown normalizer {kind!r}")
        return kinds


class DiscriminatorSpec(BaseModel):
    features: int = Field(ge=1)
    hidden: int = Field(default=32, ge=1)
    outputs: int = Field(default=2, ge=1)


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str = "linear"):
        self.weight = Parameter(he_normal(rng, fan_in, (fan_in, fan_out)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(fan_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise InvalidInputError(f"expected [N, {self.weight.shape[0]}] input, got {x.shape}")
        return x @ self.weight + self.bias

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def record(self) -> "LinearRecord":
        return LinearRecord(weight=self.weight.data.tolist(), bias=self.bias.data.tolist())

    def load(self, record: "LinearRecord") -> None:
        self.weight.data = np.array(record.weight, dtype=np.float64)
        self.bias.data = np.array(record.bias, dtype=np.float64)


class Conv2d:
    """Valid 2-D convolution, only used to feed H, W > 1 maps into the normalizers."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator):
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(he_normal(rng, fan_in, (out_channels, in_channels, kernel, kernel)), name="conv.weight")
        self.bias = Parameter(np.zeros(out_channels), name="conv.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


def gradient_reversal(x: Tensor, lam: float) -> Tensor:
    """Identity on the way forward; multiplies the incoming gradient by -lam on the way back."""
    if lam < 0:
        raise InvalidInputError(f"gradient reversal coefficient must be >= 0, got {lam}")
    return make_node(x.data.copy(), (x,), lambda g: (-lam * g,), "gradient_reversal")


def dann_lambda(progress: float, scale: float = 1.0) -> float:
    """Annealed adversarial weight scale * (2 / (1 + exp(-10 p)) - 1) for progress p in [0, 1]."""
    return scale * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


class LinearRecord(BaseModel):
    weight: List[List[float]]
    bias: List[float]


class ModelCheckpoint(BaseModel):
    """JSON container for a whole network; normalization layers use the NormCheckpoint schema."""

    spec: MlpSpec
    discriminator_spec: Optional[DiscriminatorSpec] = None
    hidden: List[LinearRecord]
    head: LinearRecord
    norms: List[NormCheckpoint]
    discriminator: List[LinearRecord] = Field(default_factory=list)


@dataclass
class MlpOutput:
    features_s: Optional[Tensor] = None
    features_t: Optional[Tensor] = None
    logits_s: Optional[Tensor] = None
    logits_t: Optional[Tensor] = None


class Mlp:
    """
    Feed-forward classifier: (Linear -> Normalizer -> ReLU) per hidden layer,
    then a linear head. Hidden activations are viewed as [N, C, 1, 1] inside
    the normalizers. The last hidden activation is the bottleneck feature.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, epsilon: float = 1e-5, alpha: float = 0.1):
        self.spec = spec
        widths = spec.widths
        self.hidden = [Linear(widths[i], widths[i + 1], rng, name=f"hidden{i}") for i in range(len(widths) - 2)]
        self.head = Linear(widths[-2], widths[-1], rng, name="head")
        self.norms: List[Normalizer] = [
            make_normalizer(kind, width, epsilon=epsilon, alpha=alpha, **self._options_for(kind))
            for kind, width in zip(spec.kinds(), spec.hidden)
        ]

    def _options_for(self, kind: str) -> Dict[str, Any]:
        if kind == "rn":
            keys = ("measure", "group_size", "use_rc", "fixed_gate")
        elif kind == "autodial":
            keys = ("mix_init",)
        else:
            keys = ()
        return {k: v for k, v in self.spec.norm_options.items() if k in keys}

    def parameters(self) -> List[Parameter]:
        params: List[Parameter] = []
        for linear, norm in zip(self.hidden, self.norms):
            params.extend(linear.parameters())
            params.extend(norm.parameters())
        params.extend(self.head.parameters())
        return params

    def _check_input(self, x: Optional[Tensor]) -> None:
        if x is not None and (x.ndim != 2 or x.shape[1] != self.spec.widths[0]):
            raise InvalidInputError(f"expected [N, {self.spec.widths[0]}] input, got {x.shape}")

    def forward(self, x_s: Optional[Tensor], x_t: Optional[Tensor], mode: Mode = "train") -> MlpOutput:
        """
        Run both domains through the network.

        In train mode both batches are required and every normalizer sees them
        jointly (pooled normalizers concatenate them internally). In eval mode
        each present batch is normalized with its own domain's running
        statistics and no layer state changes.
        """
        self._check_input(x_s)
        self._check_input(x_t)
        if mode == "train":
            if x_s is None or x_t is None:
                raise InvalidInputError("train mode needs a source and a target batch")
            h_s, h_t = x_s, x_t
            for linear, norm in zip(self.hidden, self.norms):
                z_s, z_t = linear(h_s), linear(h_t)
                width = z_s.shape[1]
                y_s, y_t = norm.forward_train(z_s.reshape(-1, width, 1, 1), z_t.reshape(-1, width, 1, 1))
                h_s, h_t = y_s.reshape(-1, width).relu(), y_t.reshape(-1, width).relu()
            return MlpOutput(h_s, h_t, self.head(h_s), self.head(h_t))
        if mode != "eval":
            raise InvalidInputError(f"unknown mode {mode!r}")

        out = MlpOutput()
        for domain, x in (("source", x_s), ("target", x_t)):
            if x is None:
                continue
            h = x
            for linear, norm in zip(self.hidden, self.norms):
                z = linear(h)
                width = z.shape[1]
                h = norm.forward_eval(z.reshape(-1, width, 1, 1), domain).reshape(-1, width).relu()
            if domain == "source":
                out.features_s, out.logits_s = h, self.head(h)
            else:
                out.features_t, out.logits_t = h, self.head(h)
        return out


def mlp_forward(model: Mlp, x_s: Optional[Tensor], x_t: Optional[Tensor], mode: Mode = "train") -> MlpOutput:
    return model.forward(x_s, x_t, mode)


class Discriminator:
    """Two-layer classifier: Linear -> ReLU -> Linear. Outputs domain logits by default."""

    def __init__(self, spec: DiscriminatorSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers = [
            Linear(spec.features, spec.hidden, rng, name="disc0"),
            Linear(spec.hidden, spec.outputs, rng, name="disc1"),
        ]

    def __call__(self, features: Tensor) -> Tensor:
        return self.layers[1](self.layers[0](features).relu())

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def discriminator_forward(model: Discriminator, features: Tensor) -> Tensor:
    return model(features)


class DomainAdversarialNet:
    """Backbone classifier plus a domain discriminator behind gradient reversal."""

    def __init__(
        self,
        spec: MlpSpec,
        seed: int,
        discriminator_hidden: int = 32,
        epsilon: float = 1e-5,
        alpha: float = 0.1,
    ):
        rng = np.random.default_rng(seed)
        self.backbone = Mlp(spec, rng, epsilon=epsilon, alpha=alpha)
        self.discriminator = Discriminator(DiscriminatorSpec(features=spec.widths[-2], hidden=discriminator_hidden), rng)

    def parameters(self) -> List[Parameter]:
        return self.backbone.parameters() + self.discriminator.parameters()

    def domain_logits(self, features_s: Tensor, features_t: Tensor, lam: float) -> Tensor:
        joint = concat([features_s, features_t], axis=0)
        return self.discriminator(gradient_reversal(joint, lam))

    def checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint(
            spec=self.backbone.spec,
            discriminator_spec=self.discriminator.spec,
            hidden=[layer.record() for layer in self.backbone.hidden],
            head=self.backbone.head.record(),
            norms=[norm.state() for norm in self.backbone.norms],
            discriminator=[layer.record() for layer in self.discriminator.layers],
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint) -> "DomainAdversarialNet":
        disc_spec = checkpoint.discriminator_spec or DiscriminatorSpec(features=checkpoint.spec.widths[-2])
        model = cls(checkpoint.spec, seed=0, discriminator_hidden=disc_spec.hidden)
        for layer, record in zip(model.backbone.hidden, checkpoint.hidden):
            layer.load(record)
        model.backbone.head.load(checkpoint.head)
        model.backbone.norms = [from_checkpoint(state) for state in checkpoint.norms]
        for layer, record in zip(model.discriminator.layers, checkpoint.discriminator):
            layer.load(record)
        return model
