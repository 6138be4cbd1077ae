"""U-Net model: layer plan, initialization, forward/backward, checkpoints.

The model follows the classic contracting/expansive layout: ``depth``
encoder levels of two 3x3 convolutions + ReLU followed by 2x2 max
pooling, a two-convolution bottleneck, ``depth`` decoder levels of a
2x2 up-convolution, skip concatenation and two 3x3 convolutions + ReLU,
and a final 1x1 convolution squashed through a sigmoid. That is
``5 * depth + 3`` convolutional layers; the default configuration
(one input channel, one output map, 32 base channels, depth 4) has 23
convolutional layers and 7,759,521 trainable parameters.

Convolutions default to same-padding so the output mask has the input's
extent; valid padding is available for experiments and relies on the
skip-connection center crop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .ops import ConvKernel

CHECKPOINT_MAGIC = b"ptvseg-checkpoint/1\n"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 32
    depth: int = 4
    padding: str = ops.SAME
    dtype: str = "float64"  # float32 available behind this flag

    def __post_init__(self) -> None:
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")
        if self.padding not in (ops.SAME, ops.VALID):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass
class UNetModel:
    """Parameter blocks in execution order plus the defining config and seed."""

    config: UNetConfig
    seed: int
    encoder: list[tuple[ConvKernel, ConvKernel]]
    bottleneck: tuple[ConvKernel, ConvKernel]
    decoder: list[tuple[ConvKernel, ConvKernel, ConvKernel]]  # (upconv, conv1, conv2), deepest first
    final: ConvKernel

    def kernels(self) -> list[tuple[str, ConvKernel]]:
        """All convolutional layers in canonical (execution) order."""
        named: list[tuple[str, ConvKernel]] = []
        for i, (k1, k2) in enumerate(self.encoder):
            named += [(f"enc{i}.conv1", k1), (f"enc{i}.conv2", k2)]
        named += [("bottleneck.conv1", self.bottleneck[0]), ("bottleneck.conv2", self.bottleneck[1])]
        for j, (up, k1, k2) in enumerate(self.decoder):
            lvl = self.config.depth - 1 - j
            named += [(f"dec{lvl}.up", up), (f"dec{lvl}.conv1", k1), (f"dec{lvl}.conv2", k2)]
        named.append(("final", self.final))
        return named

    def n_layers(self) -> int:
        return len(self.kernels())

    def n_parameters(self) -> int:
        return sum(k.n_params for _, k in self.kernels())

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter arrays (weights, bias per layer) in canonical order."""
        flat: list[np.ndarray] = []
        for _, k in self.kernels():
            flat += [k.weights, k.bias]
        return flat

    def copy(self) -> "UNetModel":
        def ck(k: ConvKernel) -> ConvKernel:
            return ConvKernel(k.weights.copy(), k.bias.copy())

        return UNetModel(
            config=self.config,
            seed=self.seed,
            encoder=[(ck(a), ck(b)) for a, b in self.encoder],
            bottleneck=(ck(self.bottleneck[0]), ck(self.bottleneck[1])),
            decoder=[(ck(u), ck(a), ck(b)) for u, a, b in self.decoder],
            final=ck(self.final),
        )


def layer_plan(config: UNetConfig) -> list[tuple[str, int, int, int, int]]:
    """(name, c_out, c_in, kh, kw) for every convolutional layer in order."""
    b, d = config.base_channels, config.depth
    plan: list[tuple[str, int, int, int, int]] = []
    c_prev = config.in_channels
    for lvl in range(d):
        c = b * 2**lvl
        plan += [(f"enc{lvl}.conv1", c, c_prev, 3, 3), (f"enc{lvl}.conv2", c, c, 3, 3)]
        c_prev = c
    c = b * 2**d
    plan += [("bottleneck.conv1", c, c_prev, 3, 3), ("bottleneck.conv2", c, c, 3, 3)]
    c_prev = c
    for lvl in range(d - 1, -1, -1):
        c = b * 2**lvl
        plan += [
            (f"dec{lvl}.up", c, c_prev, 2, 2),
            (f"dec{lvl}.conv1", c, 2 * c, 3, 3),
            (f"dec{lvl}.conv2", c, c, 3, 3),
        ]
        c_prev = c
    plan.append(("final", config.out_channels, c_prev, 1, 1))
    return plan


def count_parameters(config: UNetConfig) -> int:
    """Closed-form parameter count of the layer plan (kh*kw*c_in*c_out + c_out)."""
    return sum(kh * kw * ci * co + co for _, co, ci, kh, kw in layer_plan(config))


def init_weights(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """He-initialized weights: N(0, 2 / fan_in) from a seeded PCG64 stream.

    fan_in for a [c_out, c_in, kh, kw] kernel is c_in * kh * kw.
    """
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, std, size=shape)


def build_unet(config: UNetConfig, seed: int) -> UNetModel:
    """Deterministically initialize a model from (config, seed)."""
    plan = layer_plan(config)
    layer_seeds = np.random.SeedSequence(seed).generate_state(len(plan))
    dtype = config.np_dtype
    kernels: dict[str, ConvKernel] = {}
    for (name, co, ci, kh, kw), s in zip(plan, layer_seeds):
        w = init_weights((co, ci, kh, kw), int(s)).astype(dtype)
        kernels[name] = ConvKernel(w, np.zeros(co, dtype=dtype))

    d = config.depth
    return UNetModel(
        config=config,
        seed=seed,
        encoder=[(kernels[f"enc{l}.conv1"], kernels[f"enc{l}.conv2"]) for l in range(d)],
        bottleneck=(kernels["bottleneck.conv1"], kernels["bottleneck.conv2"]),
        decoder=[
            (kernels[f"dec{l}.up"], kernels[f"dec{l}.conv1"], kernels[f"dec{l}.conv2"])
            for l in range(d - 1, -1, -1)
        ],
        final=kernels["final"],
    )


@dataclass
class _BlockCache:
    conv1_in: np.ndarray
    pre1: np.ndarray
    conv2_in: np.ndarray
    pre2: np.ndarray


@dataclass
class UNetCache:
    """Everything the backward pass needs, recorded during forward."""

    enc: list[_BlockCache] = field(default_factory=list)
    pool_idx: list[np.ndarray] = field(default_factory=list)
    skip_shapes: list[tuple[int, int, int]] = field(default_factory=list)
    bott: _BlockCache | None = None
    dec: list[_BlockCache] = field(default_factory=list)
    up_in: list[np.ndarray] = field(default_factory=list)
    final_in: np.ndarray | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None


def _double_conv(x: np.ndarray, k1: ConvKernel, k2: ConvKernel, padding: str) -> tuple[np.ndarray, _BlockCache]:
    pre1 = ops.conv2d_forward(x, k1, padding)
    a1 = ops.relu_forward(pre1)
    pre2 = ops.conv2d_forward(a1, k2, padding)
    return ops.relu_forward(pre2), _BlockCache(x, pre1, a1, pre2)


def unet_forward(model: UNetModel, image: np.ndarray) -> tuple[np.ndarray, UNetCache]:
    """Full forward pass; returns the sigmoid probability map and cache."""
    cfg = model.config
    if image.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise ShapeError("channel", f"expected [{cfg.in_channels}, H, W] input, got {image.shape}")
    if cfg.padding == ops.SAME:
        div = 2**cfg.depth
        if image.shape[1] % div or image.shape[2] % div:
            raise ShapeError(
                "extent", f"H and W must be divisible by {div}, got {image.shape[1]}x{image.shape[2]}"
            )
    cache = UNetCache()
    x = image.astype(cfg.np_dtype, copy=False)

    skips: list[np.ndarray] = []
    for k1, k2 in model.encoder:
        skip, bc = _double_conv(x, k1, k2, cfg.padding)
        cache.enc.append(bc)
        cache.skip_shapes.append(skip.shape)
        skips.append(skip)
        x, idx = ops.maxpool2x2_forward(skip)
        cache.pool_idx.append(idx)

    x, cache.bott = _double_conv(x, model.bottleneck[0], model.bottleneck[1], cfg.padding)

    for (up, k1, k2), skip in zip(model.decoder, reversed(skips)):
        cache.up_in.append(x)
        u = ops.upconv2x2_forward(x, up)
        cat = ops.concat_channels(u, skip)
        x, bc = _double_conv(cat, k1, k2, cfg.padding)
        cache.dec.append(bc)

    cache.final_in = x
    cache.logits = ops.conv2d_forward(x, model.final, cfg.padding)
    cache.probs = ops.sigmoid_forward(cache.logits)
    return cache.probs, cache


@dataclass
class KernelGrad:
    weights: np.ndarray
    bias: np.ndarray


def _double_conv_backward(
    bc: _BlockCache, k1: ConvKernel, k2: ConvKernel, grad: np.ndarray, padding: str
) -> tuple[np.ndarray, KernelGrad, KernelGrad]:
    g_pre2 = ops.relu_backward(bc.pre2, grad)
    g_a1, gw2, gb2 = ops.conv2d_backward(bc.conv2_in, k2, g_pre2, padding)
    g_pre1 = ops.relu_backward(bc.pre1, g_a1)
    g_x, gw1, gb1 = ops.conv2d_backward(bc.conv1_in, k1, g_pre1, padding)
    return g_x, KernelGrad(gw1, gb1), KernelGrad(gw2, gb2)


def unet_backward_from_logits(
    model: UNetModel, cache: UNetCache, grad_logits: np.ndarray
) -> list[KernelGrad]:
    """Backpropagate a gradient on the pre-sigmoid logits through the net.

    Returns one KernelGrad per convolutional layer, aligned with
    ``model.kernels()`` order.
    """
    cfg = model.config
    pad = cfg.padding
    grads: dict[str, KernelGrad] = {}

    g, gw, gb = ops.conv2d_backward(cache.final_in, model.final, grad_logits, pad)
    grads["final"] = KernelGrad(gw, gb)

    g_skips: list[np.ndarray | None] = [None] * cfg.depth
    for j in reversed(range(len(model.decoder))):  # reverse execution order
        up, k1, k2 = model.decoder[j]
        lvl = cfg.depth - 1 - j
        bc = cache.dec[j]
        g, gk1, gk2 = _double_conv_backward(bc, k1, k2, g, pad)
        c_up = up.weights.shape[0]
        g_u, g_skip = ops.concat_channels_backward(g, c_up, cache.skip_shapes[lvl])
        g_skips[lvl] = g_skip
        g, gwu, gbu = ops.upconv2x2_backward(cache.up_in[j], up, g_u)
        grads[f"dec{lvl}.up"] = KernelGrad(gwu, gbu)
        grads[f"dec{lvl}.conv1"] = gk1
        grads[f"dec{lvl}.conv2"] = gk2

    g, gk1, gk2 = _double_conv_backward(cache.bott, model.bottleneck[0], model.bottleneck[1], g, pad)
    grads["bottleneck.conv1"] = gk1
    grads["bottleneck.conv2"] = gk2

    for lvl in range(cfg.depth - 1, -1, -1):
        k1, k2 = model.encoder[lvl]
        g = ops.maxpool2x2_backward(cache.pool_idx[lvl], g)
        g = g + g_skips[lvl]  # skip connection joins the pooled path here
        g, gk1, gk2 = _double_conv_backward(cache.enc[lvl], k1, k2, g, pad)
        grads[f"enc{lvl}.conv1"] = gk1
        grads[f"enc{lvl}.conv2"] = gk2

    return [grads[name] for name, _ in model.kernels()]


def unet_backward(model: UNetModel, cache: UNetCache, grad_probs: np.ndarray) -> list[KernelGrad]:
    """Backpropagate a gradient on the probability map (chains the sigmoid)."""
    grad_logits = ops.sigmoid_backward(cache.probs, grad_probs)
    return unet_backward_from_logits(model, cache, grad_logits)


def grad_arrays(grads: list[KernelGrad]) -> list[np.ndarray]:
    """Flatten KernelGrads to match ``UNetModel.parameters()`` ordering."""
    flat: list[np.ndarray] = []
    for g in grads:
        flat += [g.weights, g.bias]
    return flat


def save_checkpoint(model: UNetModel, path) -> None:
    """Write a byte-stable checkpoint: magic, JSON header, raw LE float blobs."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name, k in model.kernels():
        arrays += [(f"{name}.weights", k.weights), (f"{name}.bias", k.bias)]
    header = {
        "config": asdict(model.config),
        "seed": model.seed,
        "arrays": [
            {"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> UNetModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header = json.loads(fh.readline().decode())
        config = UNetConfig(**header["config"])
        model = build_unet(config, int(header["seed"]))
        by_name = {f"{n}.weights": k.weights for n, k in model.kernels()}
        by_name |= {f"{n}.bias": k.bias for n, k in model.kernels()}
        for spec in header["arrays"]:
            dt = np.dtype(spec["dtype"]).newbyteorder("<")
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = fh.read(n * dt.itemsize)
            arr = np.frombuffer(raw, dtype=dt).reshape(spec["shape"]).astype(spec["dtype"])
            target = by_name.get(spec["name"])
            if target is None or target.shape != arr.shape:
                raise ValueError(f"{path}: unexpected array {spec['name']} {spec['shape']}")
            target[...] = arr
    return model
