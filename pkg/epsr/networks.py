"""Generator and discriminator networks over the tensor core."""

from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Union

import numpy as np

from .checkpoint import load_archive, save_archive
from .image import Image, images_to_batch, upsample_batch
from .logger import logger, CheckpointError, ConfigurationError, NumericError
from .models import DiscriminatorConfig, GeneratorConfig
from .tensor import (
    Parameter, Tensor, conv2d, flatten, fully_connected, leaky_relu, no_grad,
    pixel_shuffle, relu, sigmoid,
)

DISCRIMINATOR_LAYERS = 10


class Network:
    """Named parameter container shared by every network."""

    prefix = "network"

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Parameter] = {}

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}"

    def _add(self, name: str, values: np.ndarray) -> Parameter:
        full = self._full(name)
        self.params[full] = Parameter(values.astype(self.dtype), name=full)
        return self.params[full]

    def _add_conv(self, name: str, in_ch: int, out_ch: int, kernel: int,
                  rng: np.random.Generator, gain: float = 2.0) -> None:
        fan_in = in_ch * kernel * kernel
        std = np.sqrt(gain / fan_in)
        self._add(f"{name}.weight", rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)))
        self._add(f"{name}.bias", np.zeros(out_ch))

    def _add_fc(self, name: str, in_features: int, out_features: int,
                rng: np.random.Generator, gain: float = 2.0) -> None:
        std = np.sqrt(gain / in_features)
        self._add(f"{name}.weight", rng.normal(0.0, std, size=(out_features, in_features)))
        self._add(f"{name}.bias", np.zeros(out_features))

    def weight(self, name: str) -> Parameter:
        return self.params[self._full(f"{name}.weight")]

    def bias(self, name: str) -> Parameter:
        return self.params[self._full(f"{name}.bias")]

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        kernel = self.weight(name).shape[-1]
        return conv2d(x, self.weight(name), self.bias(name), stride=stride, padding=kernel // 2)

    @contextmanager
    def layer(self, name: str) -> Iterator[None]:
        """Attach the layer name to numeric failures raised inside the block."""
        try:
            yield
        except NumericError as e:
            if e.layer is not None:
                raise
            layer = self._full(name)
            raise NumericError(f"{e} in layer {layer}", op=e.op, layer=layer) from e

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    @contextmanager
    def frozen(self) -> Iterator[None]:
        """Exclude the parameters from graph construction inside the block."""
        previous = {name: p.requires_grad for name, p in self.params.items()}
        for param in self.params.values():
            param.requires_grad = False
        try:
            yield
        finally:
            for name, flag in previous.items():
                self.params[name].requires_grad = flag

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, tensors: Mapping[str, np.ndarray], source: Optional[str] = None) -> None:
        """Restore every parameter exactly; the archive must match name for name."""
        relevant = {k: v for k, v in tensors.items() if k.startswith(f"{self.prefix}.")}
        for name, param in self.params.items():
            if name not in relevant:
                raise CheckpointError(f"Checkpoint is missing parameter {name}", path=source, entry=name)
            values = relevant[name]
            if tuple(values.shape) != param.shape:
                raise CheckpointError(
                    f"Shape mismatch for {name}: checkpoint {tuple(values.shape)} vs model {param.shape}",
                    path=source, entry=name,
                )
        extra = sorted(set(relevant) - set(self.params))
        if extra:
            raise CheckpointError(f"Checkpoint has unexpected parameter {extra[0]}", path=source, entry=extra[0])
        for name, param in self.params.items():
            param.data = np.array(relevant[name], dtype=param.dtype, copy=True)
            param.zero_grad()

    def save(self, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
        meta = {"network": self.prefix}
        meta.update(metadata or {})
        return save_archive(path, self.state_dict(), meta)


class Generator(Network):
    """Residual-block generator with two x2 sub-pixel upsampling stages."""

    prefix = "generator"

    def __init__(self, config: Optional[GeneratorConfig] = None, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.config = config or GeneratorConfig()
        cfg = self.config
        features, k = cfg.num_features, cfg.kernel_size
        rng = np.random.default_rng([seed, 1])

        self._add_conv("head", 3, features, k, rng)
        for i in range(cfg.num_blocks):
            self._add_conv(f"block{i}.conv1", features, features, k, rng)
            self._add_conv(f"block{i}.conv2", features, features, k, rng)
        for stage in range(2):
            self._add_conv(f"upsample{stage}", features, 4 * features, k, rng)
        self._add_conv("tail", features, 3, k, rng, gain=0.0 if cfg.upsample_skip else 1.0)

        self._rgb_mean = Tensor(np.asarray(cfg.rgb_mean).reshape(1, 3, 1, 1), dtype=self.dtype)

    def head_features(self, lr: Tensor) -> Tensor:
        x = lr - self._rgb_mean if self.config.mean_shift else lr
        with self.layer("head"):
            return self.conv("head", x)

    def block_body(self, index: int, x: Tensor) -> Tensor:
        """Conv path of residual block ``index`` before residual scaling."""
        with self.layer(f"block{index}"):
            return self.conv(f"block{index}.conv2", relu(self.conv(f"block{index}.conv1", x)))

    def upsample_path(self, features: Tensor) -> Tensor:
        x = features
        for stage in range(2):
            with self.layer(f"upsample{stage}"):
                x = pixel_shuffle(self.conv(f"upsample{stage}", x), 2)
        with self.layer("tail"):
            out = self.conv("tail", x)
        if self.config.mean_shift and not self.config.upsample_skip:
            out = out + self._rgb_mean
        return out

    def forward(self, lr: Tensor) -> Tensor:
        """Unclamped output, N x 3 x 4h x 4w."""
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ConfigurationError(f"generator expects N x 3 x h x w input, got {lr.shape}", field="shape")
        head = self.head_features(lr)
        x = head
        for i in range(self.config.num_blocks):
            with self.layer(f"block{i}"):
                x = x + self.block_body(i, x) * self.config.residual_scale
        with self.layer("global_skip"):
            x = x + head
        out = self.upsample_path(x)
        if self.config.upsample_skip:
            base = upsample_batch(np.asarray(lr.data, dtype=np.float64), self.config.scale)
            out = out + Tensor(base.astype(self.dtype))
        return out

    __call__ = forward

    def predict(self, lr: np.ndarray) -> np.ndarray:
        """Evaluation-time forward: no graph, output clamped to [0, 1]."""
        with no_grad():
            out = self.forward(Tensor(np.asarray(lr, dtype=self.dtype)))
        return np.clip(out.data, 0.0, 1.0)


class Discriminator(Network):
    """Eight 3x3 conv layers, two fully connected layers, sigmoid output."""

    prefix = "discriminator"

    def __init__(self, config: Optional[DiscriminatorConfig] = None, seed: int = 0, dtype=np.float32):
        super().__init__(dtype)
        self.config = config or DiscriminatorConfig()
        cfg = self.config
        rng = np.random.default_rng([seed, 2])

        in_ch = cfg.in_channels
        for i, out_ch in enumerate(cfg.channels):
            self._add_conv(f"conv{i}", in_ch, out_ch, 3, rng)
            in_ch = out_ch
        self._add_fc("fc1", cfg.flat_features, cfg.fc_width, rng)
        self._add_fc("fc2", cfg.fc_width, 1, rng, gain=1.0)

    def forward(self, img: Tensor) -> Tensor:
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if img.ndim != 4 or tuple(img.shape[1:]) != expected:
            raise ConfigurationError(
                f"discriminator expects N x {expected[0]} x {expected[1]} x {expected[2]} input, got {img.shape}",
                field="input_size", value=tuple(img.shape),
            )
        x = img
        for i, stride in enumerate(cfg.strides):
            with self.layer(f"conv{i}"):
                x = leaky_relu(self.conv(f"conv{i}", x, stride=stride), cfg.slope)
        x = flatten(x)
        with self.layer("fc1"):
            x = leaky_relu(fully_connected(x, self.weight("fc1"), self.bias("fc1")), cfg.slope)
        with self.layer("fc2"):
            return sigmoid(fully_connected(x, self.weight("fc2"), self.bias("fc2")))

    __call__ = forward


def discriminator_parameter_count(config: DiscriminatorConfig) -> int:
    total = 0
    in_ch = config.in_channels
    for out_ch in config.channels:
        total += out_ch * in_ch * 9 + out_ch
        in_ch = out_ch
    total += config.flat_features * config.fc_width + config.fc_width
    total += config.fc_width + 1
    return total


def load_pretrained_generator(
    path: Union[str, Path],
    config: Optional[GeneratorConfig] = None,
    dtype=np.float32,
) -> Generator:
    """Build a generator for ``config`` and restore its parameters from an archive."""
    tensors, metadata = load_archive(path)
    generator = Generator(config, dtype=dtype)
    generator.load_state_dict(tensors, source=str(path))
    logger.info("Loaded generator checkpoint", path=str(path), parameters=generator.num_parameters())
    return generator


def super_resolve(generator: Generator, image: Image) -> Image:
    """Map an RGB LR image to its clamped x4 estimate."""
    if image.channels != 3:
        raise ConfigurationError("super_resolve needs an RGB image", field="channels", value=image.channels)
    out = generator.predict(images_to_batch([image], dtype=generator.dtype))
    return Image.from_array(out[0].transpose(1, 2, 0), source=image.source)
