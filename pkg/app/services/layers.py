# app/services/layers.py
"""
Network building blocks: RPReLU, quantized linear / 3x3 conv (im2col onto the
linear core) and the sequential `Network` used by the training harness.

A quantized layer quantizes its *input* activation (N2UQ or uniform) and its
weights (entropy regularization + F_Q by default), then multiplies the
dequantized values; a learnable per-output scale ``alpha`` follows the product.
"""
from __future__ import annotations

import logging
from typing import Literal

import numpy as np

from app.errors import ContractError, DimensionError
from app.models.training import LayerSpec, RPReLUParams, TrainConfig, validate_edges
from app.services.activation_quantizer import ActivationQuantizer, UniformActivationQuantizer
from app.services.tensor_core import Function, Tensor, im2col3x3, matmul, reshape, transpose
from app.services.weight_quantizer import WeightQuantizer

logger = logging.getLogger(__name__)


# =====================
# RPReLU
# =====================
def _channel_view(param: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim < 2 or x.shape[1] != param.shape[0]:
        raise DimensionError(f"RPReLU: {param.shape[0]} channels vs input {x.shape}")
    shape = [1] * x.ndim
    shape[1] = param.shape[0]
    return param.reshape(shape)


def rprelu(x, p: RPReLUParams) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    g = _channel_view(np.asarray(p.gamma, dtype=np.float64), x)
    b = _channel_view(np.asarray(p.beta, dtype=np.float64), x)
    z = _channel_view(np.asarray(p.zeta, dtype=np.float64), x)
    u = x - g
    return np.where(u > 0, u, b * u) + z


class RPReLUFunction(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, zeta):
        g = _channel_view(gamma, x)
        b = _channel_view(beta, x)
        z = _channel_view(zeta, x)
        u = x - g
        # x == gamma 에서는 양의 branch 기울기 사용
        pos = u >= 0
        ctx.save_for_backward(u, pos, b)
        return np.where(u > 0, u, b * u) + z

    @staticmethod
    def backward(ctx, grad):
        u, pos, b = ctx.saved
        axes = tuple(i for i in range(grad.ndim) if i != 1)
        g_x = grad * np.where(pos, 1.0, b)
        g_gamma = -g_x.sum(axis=axes)
        g_beta = (grad * np.where(pos, 0.0, u)).sum(axis=axes)
        g_zeta = grad.sum(axis=axes)
        return g_x.astype(grad.dtype), g_gamma, g_beta, g_zeta


class RPReLU:
    def __init__(self, channels: int, slope: float = 0.25):
        p = RPReLUParams.init(channels, slope)
        self.gamma = Tensor(p.gamma, requires_grad=True)
        self.beta = Tensor(p.beta, requires_grad=True)
        self.zeta = Tensor(p.zeta, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return RPReLUFunction.apply(x, self.gamma, self.beta, self.zeta)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("gamma", self.gamma), ("beta", self.beta), ("zeta", self.zeta)]

    def params(self) -> RPReLUParams:
        return RPReLUParams(
            gamma=self.gamma.data.astype(np.float64),
            beta=self.beta.data.astype(np.float64),
            zeta=self.zeta.data.astype(np.float64),
        )


# =====================
# Linear / Conv
# =====================
class QuantLayer:
    """Linear (x @ W^T) or 3x3 conv (im2col, stride 1, pad 1) with optional quantizers."""

    def __init__(
        self,
        spec: LayerSpec,
        rng: np.random.Generator,
        *,
        act_quantizer: Literal["n2uq", "uniform"] = "n2uq",
        weight_reg: str = "entropy",
        act_mode: str = "quantize",
    ):
        self.spec = spec
        fan_in = spec.in_dim * (9 if spec.kind == "conv3x3" else 1)
        bound = 1.0 / np.sqrt(fan_in)
        shape = (spec.out_dim, spec.in_dim, 3, 3) if spec.kind == "conv3x3" else (spec.out_dim, spec.in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_dim), requires_grad=True)

        self.act_q = None
        if spec.quantize_acts:
            if spec.n_a is None:
                raise ContractError("quantized activations need a bit-width")
            if act_quantizer == "uniform":
                self.act_q = UniformActivationQuantizer(spec.n_a)
            else:
                self.act_q = ActivationQuantizer(spec.n_a, mode=act_mode)

        self.weight_q = None
        self.alpha = None
        if spec.quantize_weights:
            if spec.n_w is None:
                raise ContractError("quantized weights need a bit-width")
            self.weight_q = WeightQuantizer(spec.n_w, weight_reg, self.weight)
            # per-output scale (BN 이 없으므로 직접 학습), packed row_scale 로 export
            self.alpha = Tensor(np.full(spec.out_dim, bound), requires_grad=True)

    @property
    def quantized(self) -> bool:
        return self.act_q is not None or self.weight_q is not None

    def effective_weight(self) -> Tensor:
        return self.weight_q(self.weight) if self.weight_q is not None else self.weight

    def __call__(self, x: Tensor) -> Tensor:
        return quant_linear_forward(x, self)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("weight", self.weight), ("bias", self.bias)]
        if self.alpha is not None:
            out.append(("alpha", self.alpha))
        if self.act_q is not None:
            out += [(f"act.{k}", t) for k, t in self.act_q.named_parameters()]
        if self.weight_q is not None:
            out += [(f"wq.{k}", t) for k, t in self.weight_q.named_parameters()]
        return out


def quant_linear_forward(x: Tensor, layer: QuantLayer) -> Tensor:
    """activation quantizer -> (quantized) weight -> real matmul -> alpha -> bias."""
    spec = layer.spec
    if layer.act_q is not None:
        x = layer.act_q(x)
    W = layer.effective_weight()

    if spec.kind == "conv3x3":
        if x.ndim != 4 or x.shape[1] != spec.in_dim:
            raise DimensionError(f"conv3x3 expects (B, {spec.in_dim}, H, W), got {x.shape}")
        B, _, H, Wd = x.shape
        cols = im2col3x3(x)
        out = matmul(cols, transpose(reshape(W, (spec.out_dim, spec.in_dim * 9))))
    else:
        if x.ndim != 2 or x.shape[1] != spec.in_dim:
            raise DimensionError(f"linear expects (B, {spec.in_dim}), got {x.shape}")
        out = matmul(x, transpose(W))

    if layer.alpha is not None:
        out = out * layer.alpha
    out = out + layer.bias

    if spec.kind == "conv3x3":
        out = transpose(reshape(out, (B, H, Wd, spec.out_dim)), (0, 3, 1, 2))
    return out


# =====================
# Network
# =====================
def layer_specs(config: TrainConfig, in_shape: tuple[int, ...], classes: int) -> list[LayerSpec]:
    """First and last layers full precision; everything between quantized."""
    hidden = list(config.hidden)
    q = config.quantized
    bits_w = config.layer_bits_w or [config.bits_w] * (len(hidden) - 1)
    bits_a = config.layer_bits_a or [config.bits_a] * (len(hidden) - 1)

    if config.arch == "conv":
        if len(in_shape) != 3:
            raise ContractError(f"conv arch needs (C, H, W) inputs, got {in_shape}")
        C, H, W = in_shape
        specs = [LayerSpec("conv3x3", C, hidden[0])]
        for k in range(1, len(hidden)):
            specs.append(
                LayerSpec("conv3x3", hidden[k - 1], hidden[k], q, q,
                          bits_w[k - 1] if q else None, bits_a[k - 1] if q else None)
            )
        specs.append(LayerSpec("linear", hidden[-1] * H * W, classes))
    else:
        features = int(np.prod(in_shape))
        specs = [LayerSpec("linear", features, hidden[0])]
        for k in range(1, len(hidden)):
            specs.append(
                LayerSpec("linear", hidden[k - 1], hidden[k], q, q,
                          bits_w[k - 1] if q else None, bits_a[k - 1] if q else None)
            )
        specs.append(LayerSpec("linear", hidden[-1], classes))
    validate_edges(specs)
    return specs


class Network:
    def __init__(
        self,
        specs: list[LayerSpec],
        *,
        seed: int = 0,
        act_quantizer: str = "n2uq",
        weight_reg: str = "entropy",
        rprelu_slope: float = 0.25,
        act_mode: str = "quantize",
    ):
        validate_edges(specs)
        rng = np.random.Generator(np.random.Philox(seed))
        self.specs = specs
        self.layers = [
            QuantLayer(s, rng, act_quantizer=act_quantizer, weight_reg=weight_reg, act_mode=act_mode)
            for s in specs
        ]
        self.activations = [RPReLU(s.out_dim, rprelu_slope) for s in specs[:-1]]

    def __call__(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            if layer.spec.kind == "linear" and x.ndim > 2:
                x = reshape(x, (x.shape[0], -1))
            x = layer(x)
            if k < len(self.activations):
                x = self.activations[k](x)
        return x

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for k, layer in enumerate(self.layers):
            out += [(f"layers.{k}.{name}", t) for name, t in layer.named_parameters()]
        for k, act in enumerate(self.activations):
            out += [(f"rprelu.{k}.{name}", t) for name, t in act.named_parameters()]
        return out

    @staticmethod
    def is_quantizer_parameter(name: str) -> bool:
        return ".act." in name or ".wq." in name

    def clamp_(self) -> None:
        for layer in self.layers:
            if layer.act_q is not None:
                layer.act_q.clamp_()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.astype(np.float32) for name, t in self.named_parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(tensors))
        if missing:
            raise ContractError(f"checkpoint is missing tensors: {missing[:5]}")
        for name, t in params.items():
            value = np.asarray(tensors[name])
            if value.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data = value.astype(t.dtype)


def build_network(config: TrainConfig, in_shape: tuple[int, ...], classes: int, act_mode: str = "quantize") -> Network:
    specs = layer_specs(config, in_shape, classes)
    act_quantizer = config.act_quantizer if config.quantized else "n2uq"
    return Network(
        specs,
        seed=config.seed,
        act_quantizer=act_quantizer,
        weight_reg=config.weight_reg,
        rprelu_slope=config.rprelu_slope,
        act_mode=act_mode,
    )


def count_quantizer_parameters(net: Network) -> int:
    """Learnable activation-quantizer scalars: 2^n + 2 per N2UQ layer."""
    return sum(layer.act_q.parameter_count() for layer in net.layers if layer.act_q is not None)
