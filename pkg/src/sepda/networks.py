"""Feature extractor, classifier heads, discriminators and gradient routing.

All modules run in float64. The extractor is any ``nn.Module`` mapping
``(n, input_dim)`` to ``(n, feature_dim)``; the default is a small tanh MLP.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


_ACTIVATIONS = {
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
    "sigmoid": nn.Sigmoid,
    "identity": nn.Identity,
}


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    disc_hidden: int = 64
    # baselines predict with the shared head alone
    single_head: bool = False
    init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ShapeError("input_dim must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def _check_dim(x: torch.Tensor, dim: int, what: str) -> None:
    if x.dim() != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what} expects inputs of shape (n, {dim}), got {tuple(x.shape)}")


class FeatureExtractor(nn.Module):
    def __init__(self, input_dim: int, hidden=(64, 64), activation: str = "tanh"):
        super().__init__()
        self.input_dim = input_dim
        layers: list[nn.Module] = []
        width = input_dim
        for h in hidden:
            layers += [nn.Linear(width, h, dtype=DTYPE), _ACTIVATIONS[activation]()]
            width = h
        self.output_dim = width
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_dim(x, self.input_dim, "feature extractor")
        return self.net(x)


class ClassifierHead(nn.Module):
    """One affine layer to two logits, softmax on top."""

    def __init__(self, feature_dim: int, n_classes: int = 2):
        super().__init__()
        self.feature_dim = feature_dim
        self.fc = nn.Linear(feature_dim, n_classes, dtype=DTYPE)

    def logits(self, f: torch.Tensor) -> torch.Tensor:
        _check_dim(f, self.feature_dim, "classifier")
        return self.fc(f)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(f), dim=1)


class Discriminator(nn.Module):
    """Two affine layers with a tanh in between; sigmoid output in (0, 1)."""

    def __init__(self, input_dim: int, hidden: int = 64):
        super().__init__()
        self.input_dim = input_dim
        self.fc1 = nn.Linear(input_dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, 1, dtype=DTYPE)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        _check_dim(v, self.input_dim, "discriminator")
        return torch.sigmoid(self.fc2(torch.tanh(self.fc1(v)))).squeeze(1)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, strength):
        ctx.strength = strength
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.strength * grad_output, None


def grl(v: torch.Tensor, strength: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-strength``."""
    if strength < 0:
        raise ValueError("GRL strength must be nonnegative")
    return _GradReverse.apply(v, float(strength))


def stop_gradient(v: torch.Tensor) -> torch.Tensor:
    return v.detach()


def forward_features(extractor: nn.Module, x) -> torch.Tensor:
    return extractor(as_tensor(x))


def classify(head: ClassifierHead, f) -> torch.Tensor:
    return head(as_tensor(f))


def discriminate(disc: Discriminator, v) -> torch.Tensor:
    return disc(as_tensor(v))


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass
class TrainState:
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)


class ModelBundle(nn.Module):
    """G_f, the three classifier heads and the two discriminators.

    ``theta1`` holds the extractor and heads, ``theta2`` the discriminators.
    """

    THETA1 = ("extractor", "c_d", "c_t", "c_s")
    THETA2 = ("d1", "d2")

    def __init__(self, arch: ArchSpec, extractor: nn.Module | None = None):
        super().__init__()
        self.arch = arch
        self.extractor = extractor or FeatureExtractor(arch.input_dim, arch.hidden, arch.activation)
        k = self.extractor.output_dim
        self.c_d = ClassifierHead(k)
        self.c_t = ClassifierHead(k)
        self.c_s = ClassifierHead(k)
        self.d1 = Discriminator(k, arch.disc_hidden)
        self.d2 = Discriminator(k + 2, arch.disc_hidden)
        self.state = TrainState()

    @property
    def feature_dim(self) -> int:
        return self.extractor.output_dim

    def group(self, name: str) -> list[nn.Parameter]:
        return list(getattr(self, name).parameters())

    def theta1(self) -> list[nn.Parameter]:
        return [p for name in self.THETA1 for p in self.group(name)]

    def theta2(self) -> list[nn.Parameter]:
        return [p for name in self.THETA2 for p in self.group(name)]

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}


def init_parameters(module: nn.Module, seed: int, scale: float = 1.0) -> None:
    """Uniform(-s/sqrt(fan_in), s/sqrt(fan_in)) for every linear layer, seeded."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Linear):
                bound = scale / math.sqrt(layer.in_features)
                for p in (layer.weight, layer.bias):
                    if p is None:
                        continue
                    u = torch.rand(p.shape, generator=gen, dtype=DTYPE)
                    p.copy_((2.0 * u - 1.0) * bound)


def build_bundle(arch: ArchSpec, seed: int = 0) -> ModelBundle:
    bundle = ModelBundle(arch)
    init_parameters(bundle, seed, arch.init_scale)
    bundle.state.seed = int(seed)
    return bundle
