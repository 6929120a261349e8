# app/models/training.py
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from app.errors import ContractError

CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    kind: Literal["linear", "conv3x3"]
    in_dim: int
    out_dim: int
    quantize_weights: bool = False
    quantize_acts: bool = False
    n_w: Optional[int] = None   # None == full precision
    n_a: Optional[int] = None


def validate_edges(specs: list[LayerSpec]) -> None:
    """First and last layers stay full precision."""
    if not specs:
        raise ContractError("network needs at least one layer")
    for pos in {0, len(specs) - 1}:
        s = specs[pos]
        if s.quantize_weights or s.quantize_acts:
            raise ContractError(f"layer {pos} is a first/last layer and must not be quantized")


@dataclass
class RPReLUParams:
    """y = (x - gamma) + zeta if x > gamma else beta * (x - gamma) + zeta, per channel."""

    gamma: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray

    @classmethod
    def init(cls, channels: int, slope: float = 0.25) -> "RPReLUParams":
        return cls(
            gamma=np.zeros(channels),
            beta=np.full(channels, slope),
            zeta=np.zeros(channels),
        )


# ----------------------------
# 학습 설정 (key=value 설정 파일과 CLI flag가 이 모델로 합쳐진다)
# ----------------------------
class TrainConfig(BaseModel):
    # 네트워크
    arch: Literal["mlp", "conv"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    bits_w: int = Field(2, ge=1, le=8)
    bits_a: int = Field(2, ge=1, le=8)
    layer_bits_w: Optional[list[int]] = None   # 양자화 layer별 override
    layer_bits_a: Optional[list[int]] = None
    act_quantizer: Literal["n2uq", "uniform", "none"] = "n2uq"
    weight_reg: Literal["entropy", "tanh_max", "weight_norm", "learned_scale", "none"] = "entropy"
    rprelu_slope: float = 0.25

    # 학습
    epochs: int = Field(20, gt=0)
    batch_size: int = Field(64, gt=0)
    lr: float = Field(2.5e-3, gt=0)
    quant_lr_factor: float = Field(0.1, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"

    # 데이터
    dataset: Literal["synthetic", "idx", "csv"] = "synthetic"
    train_data: Optional[str] = None
    train_labels: Optional[str] = None
    eval_data: Optional[str] = None
    eval_labels: Optional[str] = None
    synthetic_samples: int = Field(1000, gt=0)
    synthetic_dim: int = Field(8, gt=0)
    synthetic_separation: float = Field(1.0, gt=0)   # class 평균 ±separation
    synthetic_spread: float = Field(0.75, gt=0)

    model_config = {"extra": "forbid"}

    @field_validator("hidden", "layer_bits_w", "layer_bits_a", mode="before")
    @classmethod
    def _split_csv(cls, v):
        if isinstance(v, str):
            v = v.strip()
            return [int(tok) for tok in v.split(",") if tok.strip()] if v else None
        return v

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, v):
        if not v or any(h <= 0 for h in v):
            raise ValueError("hidden widths must be positive")
        return v

    @model_validator(mode="after")
    def _layer_bits_length(self):
        quantized = max(len(self.hidden) - 1, 0)
        for name in ("layer_bits_w", "layer_bits_a"):
            bits = getattr(self, name)
            if bits is not None and len(bits) != quantized:
                raise ValueError(f"{name} needs {quantized} entries (one per quantized layer)")
        return self

    @property
    def quantized(self) -> bool:
        return self.act_quantizer != "none"


@dataclass
class Checkpoint:
    """Named float32 tensors + Adam state + the config that produced them."""

    tensors: dict[str, np.ndarray]
    config: TrainConfig
    step: int = 0
    seed: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
