"""
Classifier architectures for ACT Lab.
Defines model specs, deterministic parameter initialization and forward passes
shared by the robust model G and the natural model F.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    conv2d,
    flatten,
    matmul,
    maxpool2d,
    relu,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "small_convnet")


class ModelSpecError(ValueError):
    """Exception raised for inconsistent model specifications."""

    pass


@dataclass(frozen=True)
class ModelSpec:
    """
    Architecture description.

    ``layer_widths`` holds the full width list for an MLP (input first, classes
    last). For the small ConvNet, ``channels``/``kernel_sizes`` describe the two
    convolution stages and ``dense_width`` the hidden dense layer.
    """

    architecture: str
    input_shape: tuple[int, ...]
    num_classes: int
    layer_widths: tuple[int, ...] = ()
    channels: tuple[int, ...] = ()
    kernel_sizes: tuple[int, ...] = ()
    dense_width: int = 0

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ModelSpecError(f"Unknown architecture: {self.architecture}")
        if self.num_classes < 2:
            raise ModelSpecError("A classifier needs at least 2 classes")
        if any(d <= 0 for d in self.input_shape):
            raise ModelSpecError(f"Input dimensions must be positive: {self.input_shape}")

        if self.architecture == "mlp":
            widths = self.layer_widths
            if len(widths) < 2 or any(w <= 0 for w in widths):
                raise ModelSpecError(f"MLP widths must be >= 2 positive entries: {widths}")
            if widths[-1] != self.num_classes:
                raise ModelSpecError(
                    f"Final layer width {widths[-1]} must equal num_classes {self.num_classes}"
                )
            if self.input_shape != (widths[0],):
                raise ModelSpecError(f"MLP input shape must be ({widths[0]},)")
        else:
            if len(self.input_shape) != 3:
                raise ModelSpecError("ConvNet input shape must be (C, H, W)")
            if len(self.channels) != 2 or len(self.kernel_sizes) != 2:
                raise ModelSpecError("ConvNet needs exactly two channel widths and kernel sizes")
            if any(c <= 0 for c in self.channels) or self.dense_width <= 0:
                raise ModelSpecError("ConvNet widths must be positive")
            if any(k <= 0 or k % 2 == 0 for k in self.kernel_sizes):
                raise ModelSpecError(f"ConvNet kernel sizes must be odd: {self.kernel_sizes}")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ModelSpecError(f"ConvNet spatial dims must be divisible by 4: {h}x{w}")

    @classmethod
    def mlp(cls, widths: Sequence[int]) -> "ModelSpec":
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ModelSpecError(f"MLP widths must be >= 2 positive entries: {widths}")
        return cls("mlp", (widths[0],), widths[-1], layer_widths=widths)

    @classmethod
    def small_convnet(
        cls,
        input_shape: Sequence[int] = (1, 28, 28),
        channels: Sequence[int] = (8, 16),
        kernel_sizes: Sequence[int] = (3, 3),
        dense_width: int = 64,
        num_classes: int = 10,
    ) -> "ModelSpec":
        return cls(
            "small_convnet",
            tuple(int(d) for d in input_shape),
            int(num_classes),
            channels=tuple(int(c) for c in channels),
            kernel_sizes=tuple(int(k) for k in kernel_sizes),
            dense_width=int(dense_width),
        )

    @property
    def num_layers(self) -> int:
        if self.architecture == "mlp":
            return len(self.layer_widths) - 1
        return 4

    @property
    def feature_width(self) -> int:
        if self.architecture == "mlp":
            return self.layer_widths[-2]
        return self.dense_width

    def to_descriptor(self) -> dict[str, Any]:
        return {
            "architecture": self.architecture,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layer_widths": list(self.layer_widths),
            "channels": list(self.channels),
            "kernel_sizes": list(self.kernel_sizes),
            "dense_width": self.dense_width,
        }

    @classmethod
    def from_descriptor(cls, descriptor: dict[str, Any]) -> "ModelSpec":
        try:
            return cls(
                str(descriptor["architecture"]),
                tuple(int(d) for d in descriptor["input_shape"]),
                int(descriptor["num_classes"]),
                layer_widths=tuple(int(w) for w in descriptor.get("layer_widths", ())),
                channels=tuple(int(c) for c in descriptor.get("channels", ())),
                kernel_sizes=tuple(int(k) for k in descriptor.get("kernel_sizes", ())),
                dense_width=int(descriptor.get("dense_width", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelSpecError(f"Invalid model descriptor: {e}")


@dataclass
class ModelParams:
    """Ordered, uniquely named parameter tensors of one network."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def trainable(self) -> "ModelParams":
        """Fresh leaves that collect gradients, sharing no state with self."""
        return ModelParams(
            {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.tensors.items()},
            self.seed,
        )

    def frozen(self) -> "ModelParams":
        """Constant view of the parameters; nothing flows back into them."""
        return ModelParams({name: t.detach() for name, t in self.tensors.items()}, self.seed)

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        if list(arrays) != self.names():
            raise ModelSpecError("Replacement arrays must keep the parameter names and order")
        return ModelParams({name: Tensor(np.array(a, dtype=np.float64)) for name, a in arrays.items()}, self.seed)

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self.names())


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init(spec: ModelSpec, seed: int) -> ModelParams:
    """
    Initialize parameters with Kaiming-uniform fan-in weights and zero biases.

    Args:
        spec: Model specification
        seed: Integer seed; identical (spec, seed) pairs give identical parameters

    Returns:
        ModelParams in forward order
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    if spec.architecture == "mlp":
        widths = spec.layer_widths
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            tensors[f"dense{i}.weight"] = Tensor(_kaiming_uniform(rng, (fan_out, fan_in), fan_in))
            tensors[f"dense{i}.bias"] = Tensor(np.zeros(fan_out))
    else:
        in_channels, h, w = spec.input_shape
        for i, (out_channels, k) in enumerate(zip(spec.channels, spec.kernel_sizes)):
            fan_in = in_channels * k * k
            tensors[f"conv{i}.weight"] = Tensor(
                _kaiming_uniform(rng, (out_channels, in_channels, k, k), fan_in)
            )
            tensors[f"conv{i}.bias"] = Tensor(np.zeros(out_channels))
            in_channels = out_channels
        flat = spec.channels[-1] * (h // 4) * (w // 4)
        tensors["dense0.weight"] = Tensor(_kaiming_uniform(rng, (spec.dense_width, flat), flat))
        tensors["dense0.bias"] = Tensor(np.zeros(spec.dense_width))
        tensors["dense1.weight"] = Tensor(
            _kaiming_uniform(rng, (spec.num_classes, spec.dense_width), spec.dense_width)
        )
        tensors["dense1.bias"] = Tensor(np.zeros(spec.num_classes))

    logger.debug(f"Initialized {spec.architecture} with {len(tensors)} tensors (seed={seed})")
    return ModelParams(tensors, seed)


def _check_input(spec: ModelSpec, x: Tensor) -> None:
    if x.ndim != len(spec.input_shape) + 1 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"Input batch {x.shape} does not match model input {spec.input_shape}")


def _dense(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return matmul(x, params[f"{name}.weight"].T) + params[f"{name}.bias"]


def _penultimate(params: ModelParams, spec: ModelSpec, x: Tensor) -> tuple[Tensor, str]:
    """Activations feeding the final dense layer, plus that layer's name."""
    if spec.architecture == "mlp":
        hidden = len(spec.layer_widths) - 2
        h = x
        for i in range(hidden):
            h = relu(_dense(params, f"dense{i}", h))
        return h, f"dense{hidden}"

    h = x
    for i, k in enumerate(spec.kernel_sizes):
        h = conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=1, pad=k // 2)
        h = maxpool2d(relu(h))
    h = relu(_dense(params, "dense0", flatten(h)))
    return h, "dense1"


def forward(params: ModelParams, spec: ModelSpec, x: Union[Tensor, np.ndarray]) -> Tensor:
    """
    Compute N x C logits, differentiable in both the parameters and the input.

    Raises:
        ShapeError: If x does not match the spec's input shape
    """
    x = as_tensor(x)
    _check_input(spec, x)
    h, last = _penultimate(params, spec, x)
    return _dense(params, last, h)


def features(
    params: ModelParams,
    spec: ModelSpec,
    x: Union[Tensor, np.ndarray],
    frozen: bool = True,
) -> Tensor:
    """
    Penultimate-layer activations.

    With ``frozen`` (the default) the parameters and input are constants, so a
    probe trained on top never sends gradients back into the model.
    """
    if spec.num_layers < 2:
        raise ModelSpecError("features() needs a model with at least two layers")
    x = as_tensor(x)
    _check_input(spec, x)
    if frozen:
        params, x = params.frozen(), x.detach()
    h, _ = _penultimate(params, spec, x)
    return h


def frobenius_norms(params: ModelParams) -> list[tuple[str, float]]:
    """One (layer name, ||W||_F) entry per weight tensor, biases excluded."""
    return [
        (name[: -len(".weight")], float(np.sqrt(np.sum(t.data * t.data))))
        for name, t in params.items()
        if name.endswith(".weight")
    ]


@dataclass
class Classifier:
    """A named network: spec plus parameters."""

    spec: ModelSpec
    params: ModelParams
    name: str = "model"

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def logits(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        return forward(self.params, self.spec, x)

    def frozen(self) -> "Classifier":
        return Classifier(self.spec, self.params.frozen(), self.name)

    def predict(self, inputs: np.ndarray, batch_size: Optional[int] = None) -> np.ndarray:
        """Predicted class per example, evaluated with constant parameters."""
        frozen = self.params.frozen()
        n = inputs.shape[0]
        step = batch_size or max(n, 1)
        out = [
            forward(frozen, self.spec, inputs[i : i + step]).data.argmax(axis=1)
            for i in range(0, n, step)
        ]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
