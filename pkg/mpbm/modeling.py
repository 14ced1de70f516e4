import os
import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import torch
import torch.nn as nn
from torch.func import functional_call
from torch.utils.data import DataLoader
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file, load_file

from loguru import logger

from mpbm.numerics import DTYPE, DimensionError, cross_entropy


ACTIVATIONS = {
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "sigmoid": nn.Sigmoid,
    "none": nn.Identity,
}


class ArchitectureMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ArchitectureConfig:
    name: str = "lenet-small"
    input_shape: list = field(default_factory=lambda: [3, 32, 32])
    num_classes: int = 10
    feature_dim: int = 84
    hidden_sizes: list = field(default_factory=list)
    activation: str = "relu"
    feature_activation: str = "relu"

    def __post_init__(self):
        if self.name not in ("lenet-small", "mlp"):
            raise ValueError(f"Unknown architecture {self.name}, expected lenet-small or mlp")
        if self.name == "lenet-small" and len(self.input_shape) != 3:
            raise ValueError(f"lenet-small expects a (channels, height, width) input shape, got {self.input_shape}")
        for act in (self.activation, self.feature_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"Unknown activation {act}, expected one of {list(ACTIVATIONS)}")
        self.input_shape = list(self.input_shape)
        self.hidden_sizes = list(self.hidden_sizes)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls(**json.load(f))

    def to_dict(self):
        return asdict(self)


LENET_SMALL = ArchitectureConfig()
MLP_BLOBS = ArchitectureConfig(
    name="mlp", input_shape=[2], num_classes=3, feature_dim=16, hidden_sizes=[32], activation="tanh", feature_activation="tanh",
)
BUILTIN_ARCHITECTURES = {"lenet-small": LENET_SMALL, "mlp": MLP_BLOBS}


def resolve_architecture(name_or_path: str) -> ArchitectureConfig:
    if name_or_path in BUILTIN_ARCHITECTURES:
        return ArchitectureConfig(**BUILTIN_ARCHITECTURES[name_or_path].to_dict())
    if not os.path.exists(name_or_path):
        raise ValueError(f"Architecture {name_or_path} is neither a built-in name nor an existing file")
    return ArchitectureConfig.from_file(name_or_path)


@torch.no_grad()
def init_fan_in_(module: nn.Module, generator: torch.Generator):
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    for layer in module.modules():
        if isinstance(layer, (nn.Linear, nn.Conv2d)):
            fan_in = layer.weight[0].numel()
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator, dtype=DTYPE) / math.sqrt(fan_in))
            if layer.bias is not None:
                layer.bias.zero_()


class FeatureExtractor(nn.Module):
    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.arch = arch
        act = ACTIVATIONS[arch.activation]

        if arch.name == "lenet-small":
            channels = arch.input_shape[0]
            self.body = nn.Sequential(
                nn.Conv2d(channels, 6, kernel_size=5),
                act(),
                nn.MaxPool2d(kernel_size=2, stride=2),
                nn.Conv2d(6, 16, kernel_size=5),
                act(),
                nn.MaxPool2d(kernel_size=2, stride=2),
                nn.Flatten(),
            )
            with torch.no_grad():
                flat_dim = self.body(torch.zeros(1, *arch.input_shape)).shape[1]
            self.head = nn.Sequential(nn.Linear(flat_dim, arch.feature_dim), ACTIVATIONS[arch.feature_activation]())
        else:
            layers = []
            in_dim = math.prod(arch.input_shape)
            for hidden in arch.hidden_sizes:
                layers += [nn.Linear(in_dim, hidden), act()]
                in_dim = hidden
            self.body = nn.Sequential(nn.Flatten(), *layers)
            self.head = nn.Sequential(nn.Linear(in_dim, arch.feature_dim), ACTIVATIONS[arch.feature_activation]())

    @property
    def output_dim(self):
        return self.arch.feature_dim

    def forward(self, x):
        return self.head(self.body(x))


class Classifier(nn.Module):
    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__()
        self.num_classes = num_classes
        self.linear = nn.Linear(feature_dim, num_classes)

    def forward(self, z):
        return self.linear(z)


class Discriminator(nn.Module):
    """Two hidden tanh layers of width d and a sigmoid head; unconditional on labels."""
    EPS = 1e-7

    def __init__(self, feature_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.Tanh(),
            nn.Linear(feature_dim, feature_dim),
            nn.Tanh(),
            nn.Linear(feature_dim, 1),
        )

    def forward(self, z):
        score = torch.sigmoid(self.net(z)).squeeze(-1)
        return score.clamp(self.EPS, 1 - self.EPS)


class PredictionModel(nn.Module):
    def __init__(self, arch: ArchitectureConfig):
        super().__init__()
        self.arch = arch
        self.extractor = FeatureExtractor(arch)
        self.classifier = Classifier(arch.feature_dim, arch.num_classes)

    def forward(self, x):
        return self.classifier(self.extractor(x))


def build_model(arch: ArchitectureConfig, generator: torch.Generator) -> PredictionModel:
    model = PredictionModel(arch).to(dtype=DTYPE)
    init_fan_in_(model, generator)
    return model


def build_discriminator(feature_dim: int, generator: torch.Generator, zero_head: bool = False) -> Discriminator:
    discriminator = Discriminator(feature_dim).to(dtype=DTYPE)
    init_fan_in_(discriminator, generator)
    if zero_head:
        with torch.no_grad():
            discriminator.net[-1].weight.zero_()
    return discriminator


def detached_call(module: nn.Module, *args):
    """Evaluates `module` with stop-gradient parameters; gradients still reach the inputs."""
    params = {name: p.detach() for name, p in module.named_parameters()}
    return functional_call(module, params, args)


def extract(f: FeatureExtractor, x: torch.Tensor, stop_grad: bool = False) -> torch.Tensor:
    if list(x.shape[1:]) != list(f.arch.input_shape):
        raise DimensionError(f"Input shape {tuple(x.shape[1:])} does not match architecture input {f.arch.input_shape}")
    if stop_grad:
        return detached_call(f, x)
    return f(x)


def classify(h: Classifier, z: torch.Tensor, stop_grad: bool = False) -> torch.Tensor:
    if z.shape[-1] != h.linear.in_features:
        raise DimensionError(f"Feature dimension {z.shape[-1]} does not match classifier input {h.linear.in_features}")
    if stop_grad:
        return detached_call(h, z)
    return h(z)


def discriminate(D: Discriminator, z: torch.Tensor) -> torch.Tensor:
    return D(z)


def input_gradient(model: PredictionModel, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """
    d ce(h(f(x)), y) / dx with the model parameters held fixed.

    The loss is summed over rows, so each row of the result is the gradient of its own instance.
    """
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = detached_call(model, x)
        loss = cross_entropy(logits, y, reduction="sum")
        (gradient,) = torch.autograd.grad(loss, [x])
    return gradient


@torch.no_grad()
def evaluate(model: PredictionModel, dataset, batch_size: int = 256):
    """Returns (accuracy, mean cross-entropy) of the model on a dataset."""
    _time = time.time()
    was_training = model.training
    model.eval()

    n_correct = 0
    total_loss = 0.0
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    for x, y in loader:
        logits = model(x)
        total_loss += cross_entropy(logits, y, reduction="sum").item()
        n_correct += (logits.argmax(dim=-1) == y.argmax(dim=-1)).sum().item()

    if was_training: model.train()
    n = len(dataset)
    logger.debug(f"Evaluated {n} examples of {getattr(dataset, 'name', 'dataset')} in {time.time() - _time:.2f} seconds")
    return n_correct / n, total_loss / n


def save_parameters(module: nn.Module, path: str, metadata: Optional[dict] = None):
    """
    Writes a safetensors container: JSON header (shapes, float64 dtype, offsets, metadata)
    followed by little-endian parameter data.
    """
    tensors = {name: t.detach().contiguous() for name, t in module.state_dict().items()}
    metadata = {k: v if isinstance(v, str) else json.dumps(v) for k, v in (metadata or {}).items()}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_file(tensors, path, metadata=metadata)


def read_metadata(path: str) -> dict:
    try:
        with safe_open(path, framework="pt") as f:
            raw = f.metadata() or {}
    except (SafetensorError, OSError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    metadata = {}
    for k, v in raw.items():
        try:
            metadata[k] = json.loads(v)
        except json.JSONDecodeError:
            metadata[k] = v
    return metadata


def load_parameters(module: nn.Module, path: str):
    module.load_state_dict(load_file(path), strict=True)
    return module


def check_architecture(expected: ArchitectureConfig, found: dict):
    expected = expected.to_dict()
    if expected != found:
        raise ArchitectureMismatch(
            f"Checkpoint architecture does not match.\n"
            f"  expected: {json.dumps(expected, sort_keys=True)}\n"
            f"  found:    {json.dumps(found, sort_keys=True)}"
        )


def load_model(path: str) -> PredictionModel:
    metadata = read_metadata(path)
    if "architecture" not in metadata:
        raise CheckpointError(f"Checkpoint {path} has no architecture metadata")
    arch = ArchitectureConfig(**metadata["architecture"])
    model = PredictionModel(arch).to(dtype=DTYPE)
    load_parameters(model, path)
    logger.info(f"Model successfully loaded from {path} (strict=True policy)")
    return model
