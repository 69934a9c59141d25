"""3-D attention U-Net: gated skip connections over an encoder/decoder.

The attention gate halves the skip tensor x with a k=2/stride-2
convolution, projects the coarser gating signal g pointwise, sums the
two, and squeezes the ReLU of the sum through a single-channel 1x1x1
convolution and a sigmoid. The resulting coefficients (strictly inside
(0,1)) are trilinearly upsampled back to x's grid and multiply x
voxel-wise, so irrelevant regions of the skip are suppressed before the
decoder concatenates it.

Encoder levels are [conv3x3 -> batchnorm -> activation] x2 -> dropout ->
maxpool, with filter counts doubling per level; the decoder mirrors them
with stride-2 transposed convolutions and gated skips; a 1x1x1 head plus
channel softmax yields per-voxel class probabilities. Class semantics:
0 background, 1 necrosis, 2 edema, 3 enhancing tumor.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from . import vseg
from .errors import IndivisibleExtent, InvalidConfig, ManifestMismatch, ShapeMismatch
from .rng import make_rng
from .tensor import Tensor, concat


def _default_dropout_rates(depth: int) -> tuple:
    # linear ramp 0.1 (shallowest) -> 0.3 (bottleneck), mirrored in the decoder
    return tuple(round(float(r), 6) for r in np.linspace(0.1, 0.3, depth + 1))


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_filters: int = 16
    activation: str = "relu"
    dropout_rates: Optional[tuple] = None   # per level incl. bottleneck
    in_channels: int = 3
    out_classes: int = 4
    min_extent: int = 32   # smallest input the model is expected to accept

    def __post_init__(self):
        if self.dropout_rates is None:
            object.__setattr__(self, "dropout_rates", _default_dropout_rates(self.depth))
        else:
            object.__setattr__(self, "dropout_rates", tuple(self.dropout_rates))

    def validate(self):
        if self.depth < 2:
            raise InvalidConfig(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 2:
            raise InvalidConfig(f"base_filters must be >= 2, got {self.base_filters}")
        if self.activation not in ("relu", "leaky_relu"):
            raise InvalidConfig(f"activation must be relu|leaky_relu, got {self.activation!r}")
        if len(self.dropout_rates) != self.depth + 1:
            raise InvalidConfig(
                f"need {self.depth + 1} dropout rates (levels + bottleneck), "
                f"got {len(self.dropout_rates)}")
        for r in self.dropout_rates:
            if not 0.1 <= r <= 0.3:
                raise InvalidConfig(f"dropout rate {r} outside [0.1, 0.3]")
        if self.min_extent % (1 << self.depth) != 0 or self.min_extent // (1 << self.depth) < 2:
            raise InvalidConfig(
                f"an input of {self.min_extent}^3 would reach extent "
                f"{self.min_extent / (1 << self.depth):g} < 2 at depth {self.depth}")
        return self

    def filters(self, level: int) -> int:
        return self.base_filters << level


@dataclass
class AttentionGateParams:
    wx: Tensor          # (F_int, F_x, 2, 2, 2), stride-2, no bias
    wg: Tensor          # (F_int, F_g, 1, 1, 1)
    wg_bias: Tensor     # (F_int,)
    psi: Tensor         # (1, F_int, 1, 1, 1)
    psi_bias: Tensor    # (1,)

    def validate(self):
        f_int = self.wx.shape[0]
        if self.wg.shape[0] != f_int:
            raise ShapeMismatch(
                f"wx out channels {f_int} != wg out channels {self.wg.shape[0]}")
        if self.psi.shape[0] != 1 or self.psi.shape[1] != f_int:
            raise ShapeMismatch(f"psi must be (1, {f_int}, 1, 1, 1), got {self.psi.shape}")
        return self


@dataclass
class ModelParams:
    config: UNetConfig
    seed: int
    tensors: dict = field(default_factory=dict)    # trainable, stable names
    buffers: dict = field(default_factory=dict)    # batchnorm running stats

    def gate(self, level: int) -> AttentionGateParams:
        p = self.tensors
        return AttentionGateParams(
            wx=p[f"dec{level}.gate.wx.w"],
            wg=p[f"dec{level}.gate.wg.w"],
            wg_bias=p[f"dec{level}.gate.wg.b"],
            psi=p[f"dec{level}.gate.psi.w"],
            psi_bias=p[f"dec{level}.gate.psi.b"],
        )

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()


def attention_gate(x: Tensor, g: Tensor, params: AttentionGateParams) -> Tensor:
    """Gate the skip tensor x by coefficients computed against g.

    x must have exactly double g's spatial extents. Returns
    upsample(sigmoid(psi(relu(wx*x + wg*g)))) ⊙ x, broadcast over x's
    channels.
    """
    params.validate()
    xs = x.shape[-3:]
    gs = g.shape[-3:]
    if tuple(xs) != tuple(2 * e for e in gs):
        raise ShapeMismatch(f"skip extents {xs} must double gating extents {gs}")
    theta = ops.conv3d(x, params.wx, stride=2, padding=0)
    phi = ops.conv3d_1x1(g, params.wg, params.wg_bias)
    summed = ops.relu(theta + phi)
    coeff = ops.sigmoid(ops.conv3d_1x1(summed, params.psi, params.psi_bias))
    alpha = ops.upsample_trilinear(coeff, 2)
    return alpha * x


def _conv_specs(config: UNetConfig):
    """Yield (name, shape, init) for every trainable tensor, in build order."""
    f = config.filters
    specs = []

    def conv_block(prefix, c_in, c_out):
        specs.append((f"{prefix}.conv1.w", (c_out, c_in, 3, 3, 3), "he"))
        specs.append((f"{prefix}.conv1.b", (c_out,), "zero"))
        specs.append((f"{prefix}.bn1.gamma", (c_out,), "one"))
        specs.append((f"{prefix}.bn1.beta", (c_out,), "zero"))
        specs.append((f"{prefix}.conv2.w", (c_out, c_out, 3, 3, 3), "he"))
        specs.append((f"{prefix}.conv2.b", (c_out,), "zero"))
        specs.append((f"{prefix}.bn2.gamma", (c_out,), "one"))
        specs.append((f"{prefix}.bn2.beta", (c_out,), "zero"))

    for level in range(config.depth):
        conv_block(f"enc{level}", config.in_channels if level == 0 else f(level - 1), f(level))
    conv_block("bottleneck", f(config.depth - 1), f(config.depth))
    for level in reversed(range(config.depth)):
        f_x, f_g = f(level), f(level + 1)
        specs.append((f"dec{level}.up.w", (f_g, f_x, 2, 2, 2), "he"))
        specs.append((f"dec{level}.gate.wx.w", (f_g, f_x, 2, 2, 2), "he"))
        specs.append((f"dec{level}.gate.wg.w", (f_g, f_g, 1, 1, 1), "he"))
        specs.append((f"dec{level}.gate.wg.b", (f_g,), "zero"))
        specs.append((f"dec{level}.gate.psi.w", (1, f_g, 1, 1, 1), "he"))
        specs.append((f"dec{level}.gate.psi.b", (1,), "zero"))
        conv_block(f"dec{level}", 2 * f_x, f_x)
    specs.append(("head.w", (config.out_classes, f(0), 1, 1, 1), "he"))
    specs.append(("head.b", (config.out_classes,), "zero"))
    return specs


def _buffer_specs(config: UNetConfig):
    specs = []
    f = config.filters
    blocks = [(f"enc{level}", f(level)) for level in range(config.depth)]
    blocks.append(("bottleneck", f(config.depth)))
    blocks += [(f"dec{level}", f(level)) for level in reversed(range(config.depth))]
    for prefix, c in blocks:
        for bn in ("bn1", "bn2"):
            specs.append((f"{prefix}.{bn}.running_mean", (c,), "zero"))
            specs.append((f"{prefix}.{bn}.running_var", (c,), "one"))
    return specs


def build_model(config: UNetConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Initialize all weights (He, fan-in scaled) from per-layer seeded
    streams; the same seed always reproduces the same parameters."""
    config.validate()
    tensors = {}
    for name, shape, init in _conv_specs(config):
        if init == "he":
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            data = make_rng(seed, "init", name).normal(0.0, std, size=shape)
        elif init == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    buffers = {}
    for name, shape, init in _buffer_specs(config):
        buffers[name] = (np.ones(shape, dtype=dtype) if init == "one"
                         else np.zeros(shape, dtype=dtype))
    return ModelParams(config=config, seed=seed, tensors=tensors, buffers=buffers)


def _activation(config: UNetConfig):
    if config.activation == "leaky_relu":
        return ops.leaky_relu
    return ops.relu


def _conv_block(params: ModelParams, prefix: str, h: Tensor, training: bool) -> Tensor:
    p, b = params.tensors, params.buffers
    act = _activation(params.config)
    for i in (1, 2):
        h = ops.conv3d(h, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"],
                       stride=1, padding=1)
        h = ops.batchnorm(h, p[f"{prefix}.bn{i}.gamma"], p[f"{prefix}.bn{i}.beta"],
                          b[f"{prefix}.bn{i}.running_mean"],
                          b[f"{prefix}.bn{i}.running_var"], training)
        h = act(h)
    return h


def forward(params: ModelParams, batch, training: bool = False, step: int = 0) -> Tensor:
    """Run the network on a (N, C_in, D, H, W) batch.

    Returns per-voxel class probabilities with the input's spatial
    extents. Dropout streams are keyed by (model seed, layer, step), so
    a fixed step replays identical masks.
    """
    config = params.config
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch))
    if batch.data.ndim != 5 or batch.shape[1] != config.in_channels:
        raise ShapeMismatch(
            f"expected (N, {config.in_channels}, D, H, W) batch, got {batch.shape}")
    div = 1 << config.depth
    if any(e % div for e in batch.shape[2:]):
        raise IndivisibleExtent(
            f"spatial extents {batch.shape[2:]} not divisible by 2^depth = {div}")

    def drop(h, level, tag):
        rate = config.dropout_rates[level]
        rng = make_rng(params.seed, "dropout", tag, step)
        return ops.dropout(h, rate, training, rng)

    h = batch
    skips = []
    for level in range(config.depth):
        h = _conv_block(params, f"enc{level}", h, training)
        h = drop(h, level, f"enc{level}")
        skips.append(h)
        h = ops.maxpool3d(h, 2)

    h = _conv_block(params, "bottleneck", h, training)
    h = drop(h, config.depth, "bottleneck")

    for level in reversed(range(config.depth)):
        gated = attention_gate(skips[level], h, params.gate(level))
        up = ops.transposed_conv3d(h, params.tensors[f"dec{level}.up.w"], stride=2)
        h = concat([up, gated], axis=1)
        h = _conv_block(params, f"dec{level}", h, training)
        h = drop(h, level, f"dec{level}")

    logits = ops.conv3d_1x1(h, params.tensors["head.w"], params.tensors["head.b"])
    return ops.softmax_channels(logits)


def predict_labels(params: ModelParams, case) -> np.ndarray:
    """Hard labels for a preprocessed case (argmax over class channels)."""
    batch = case.image[None].astype(params.tensors["head.w"].dtype)
    probs = forward(params, batch, training=False)
    return np.argmax(probs.data[0], axis=0).astype(np.uint8)


# -- persistence ----------------------------------------------------------------

def _tensor_checksum(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data.astype("<f4")).tobytes()).hexdigest()


def _config_lines(config: UNetConfig, seed: int) -> list:
    return [
        "# class semantics: 0 background, 1 necrosis, 2 edema, 3 enhancing",
        "# input channel order: flair,t1ce,t2",
        f"depth = {config.depth}",
        f"base_filters = {config.base_filters}",
        f"activation = {config.activation}",
        "dropout_rates = " + ",".join(f"{r:g}" for r in config.dropout_rates),
        f"in_channels = {config.in_channels}",
        f"out_classes = {config.out_classes}",
        f"min_extent = {config.min_extent}",
        f"seed = {seed}",
    ]


def _parse_config(text: str):
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    config = UNetConfig(
        depth=int(values["depth"]),
        base_filters=int(values["base_filters"]),
        activation=values["activation"],
        dropout_rates=tuple(float(v) for v in values["dropout_rates"].split(",")),
        in_channels=int(values["in_channels"]),
        out_classes=int(values["out_classes"]),
        min_extent=int(values["min_extent"]),
    )
    return config, int(values["seed"])


def save_params(params: ModelParams, path) -> None:
    """Persist as a manifest plus one VSEG1 blob per tensor (float32)."""
    path = Path(path)
    (path / "blobs").mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in params.tensors.items():
        data = t.data.astype(np.float32)
        vseg.save_array(data, path / "blobs" / f"{name}.vseg")
        extents = "x".join(str(e) for e in data.shape)
        lines.append(f"{name} f32 {extents} {_tensor_checksum(data)}")
    for name, arr in params.buffers.items():
        data = arr.astype(np.float32)
        vseg.save_array(data, path / "blobs" / f"{name}.vseg")
        extents = "x".join(str(e) for e in data.shape)
        lines.append(f"{name} f32 {extents} {_tensor_checksum(data)}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    (path / "config.txt").write_text("\n".join(_config_lines(params.config, params.seed)) + "\n")


def load_params(path) -> ModelParams:
    """Load a parameter directory, auditing names, shapes and checksums
    against the stored config's expected structure."""
    path = Path(path)
    config, seed = _parse_config((path / "config.txt").read_text())
    config.validate()

    manifest = {}
    for raw in (path / "manifest.txt").read_text().splitlines():
        if not raw.strip():
            continue
        name, dtype, extents, checksum = raw.split()
        shape = tuple(int(e) for e in extents.split("x"))
        manifest[name] = (dtype, shape, checksum)

    expected = {name: shape for name, shape, _ in _conv_specs(config)}
    expected_buffers = {name: shape for name, shape, _ in _buffer_specs(config)}
    want = set(expected) | set(expected_buffers)
    if set(manifest) != want:
        missing = sorted(want - set(manifest))
        extra = sorted(set(manifest) - want)
        raise ManifestMismatch(f"manifest mismatch: missing {missing}, unexpected {extra}")

    tensors, buffers = {}, {}
    for name, (dtype, shape, checksum) in manifest.items():
        want_shape = expected.get(name, expected_buffers.get(name))
        if shape != want_shape:
            raise ManifestMismatch(f"{name}: manifest shape {shape} != expected {want_shape}")
        blob = path / "blobs" / f"{name}.vseg"
        if not blob.exists():
            raise ManifestMismatch(f"{name}: blob missing")
        data = vseg.load_array(blob)
        if data.shape != shape:
            raise ManifestMismatch(f"{name}: blob shape {data.shape} != manifest {shape}")
        if _tensor_checksum(data) != checksum:
            raise ManifestMismatch(f"{name}: checksum mismatch")
        if name in expected:
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        else:
            buffers[name] = data.copy()
    ordered = {name: tensors[name] for name, _, _ in _conv_specs(config)}
    ordered_buffers = {name: buffers[name] for name, _, _ in _buffer_specs(config)}
    return ModelParams(config=config, seed=seed, tensors=ordered, buffers=ordered_buffers)
