# app/services/training_service.py
"""
Quantization-aware training harness: config resolution, dataset wiring, the
Adam / linear-decay training loop, float64 evaluation (training path and
packed path) and the seed-matched ablation table.
"""
from __future__ import annotations

import errno
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from joblib import Parallel, delayed
from pydantic import ValidationError
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from app.config import settings
from app.errors import ContractError, DivergenceError, FormatError
from app.models.training import Checkpoint, TrainConfig
from app.services.checkpoint_service import save_checkpoint
from app.services.datasets import Dataset, load_csv, load_idx_dataset, make_two_gaussians
from app.services.layers import Network, build_network
from app.services.optimizer import Adam, lr_at
from app.services.packed_format import PackedNetwork
from app.services.stochastic_oracle import make_rng
from app.services.tensor_core import Tensor, backward, no_grad, precision, softmax_cross_entropy

logger = logging.getLogger(__name__)

# Ensure module logger emits to stderr (stdout carries CSV)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("%(levelname)s:%(name)s:%(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.setLevel(settings.n2uq_log_level)
logger.propagate = False

METRIC_COLUMNS = ["epoch", "train_loss", "eval_acc"]
EVAL_BATCH = 256

# 기준 ablation 구성: (이름, activation quantizer, weight regularizer)
ABLATIONS = [
    ("float", "none", "entropy"),
    ("baseline", "uniform", "none"),
    ("threshold_learning", "n2uq", "none"),
    ("weight_regularization", "uniform", "entropy"),
    ("n2uq", "n2uq", "entropy"),
]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: pd.DataFrame
    network: Network


# =====================
# Config
# =====================
def load_train_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    """flag > config file key > N2UQ_PRECISION env > default."""
    values: dict = {"precision": settings.n2uq_precision}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(errno.ENOENT, "config file not found", str(path))
        values.update({k.strip().lower(): v for k, v in dotenv_values(path).items() if v is not None})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig.model_validate(values)
    except ValidationError as e:
        raise ContractError(f"invalid training config: {e}") from e


# =====================
# Data
# =====================
def load_datasets(config: TrainConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "synthetic":
        task = dict(separation=config.synthetic_separation, spread=config.synthetic_spread)
        train = make_two_gaussians(config.synthetic_samples, config.synthetic_dim, config.seed, **task)
        held_out = make_two_gaussians(config.synthetic_samples, config.synthetic_dim, config.seed + 1, **task)
        return train, held_out
    if not config.train_data:
        raise ContractError(f"dataset={config.dataset} needs train_data")
    if config.dataset == "idx":
        if not config.train_labels:
            raise ContractError("dataset=idx needs train_labels")
        train = load_idx_dataset(config.train_data, config.train_labels)
        held_out = load_idx_dataset(config.eval_data, config.eval_labels) if config.eval_data and config.eval_labels else train
    else:
        train = load_csv(config.train_data)
        held_out = load_csv(config.eval_data, scale=train.scale) if config.eval_data else train
    return train, held_out


def model_inputs(data: Dataset, arch: str) -> np.ndarray:
    """conv nets take (B, C, H, W); single-channel images gain a channel axis."""
    if arch == "conv":
        if data.x.ndim == 3:
            return data.x[:, None, :, :]
        if data.x.ndim != 4:
            raise ContractError(f"conv arch needs image data, got feature shape {data.feature_shape}")
    return data.x


def _class_count(*sets: Dataset) -> int:
    return max(max(d.classes for d in sets), 2)


# =====================
# Training
# =====================
def _snapshot(net: Network, opt: Adam, config: TrainConfig) -> Checkpoint:
    return Checkpoint(
        tensors=net.state_dict(),
        config=config,
        step=opt.state.step,
        seed=config.seed,
        adam_m={k: v.astype(np.float32) for k, v in opt.state.m.items()},
        adam_v={k: v.astype(np.float32) for k, v in opt.state.v.items()},
    )


def _diverged(message: str, last_good: Checkpoint, checkpoint_path: str | Path | None) -> DivergenceError:
    where = None
    if checkpoint_path is not None:
        where = str(save_checkpoint(last_good, checkpoint_path))
    logger.error("[TRAIN] diverged reason=%s last_good=%s step=%s", message, where, last_good.step)
    return DivergenceError(message, last_good=where)


def train(
    config: TrainConfig,
    *,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    show_progress: bool | None = None,
) -> TrainResult:
    train_set, eval_set = load_datasets(config)
    train_set.require_nonempty()
    eval_set.require_nonempty()
    x_train = model_inputs(train_set, config.arch)
    classes = _class_count(train_set, eval_set)
    show_progress = settings.n2uq_show_progress if show_progress is None else show_progress

    with threadpool_limits(limits=settings.n2uq_threads), precision(config.precision):
        net = build_network(config, x_train.shape[1:], classes)
        opt = Adam(
            net.named_parameters(),
            config.lr,
            quant_lr_factor=config.quant_lr_factor,
            is_quantizer=Network.is_quantizer_parameter,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
            weight_decay=config.weight_decay,
            clamp=net.clamp_,
        )
        rng = make_rng(config.seed)
        n = len(train_set)
        per_epoch = -(-n // config.batch_size)
        total = config.epochs * per_epoch
        last_good = _snapshot(net, opt, config)
        rows = []
        logger.info(
            "[TRAIN] start samples=%s classes=%s arch=%s act=%s weight_reg=%s bits_w=%s bits_a=%s",
            n, classes, config.arch, config.act_quantizer, config.weight_reg, config.bits_w, config.bits_a,
        )

        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            loss_sum = 0.0
            batches = range(0, n, config.batch_size)
            for lo in tqdm(batches, disable=not show_progress, leave=False, desc=f"epoch {epoch}"):
                idx = order[lo:lo + config.batch_size]
                opt.zero_grad()
                loss = softmax_cross_entropy(net(Tensor(x_train[idx])), train_set.y[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise _diverged(f"non-finite loss at epoch {epoch}", last_good, checkpoint_path)
                backward(loss)
                try:
                    opt.step(lr_at(opt.state.step, total, config.lr))
                except DivergenceError as e:
                    raise _diverged(str(e), last_good, checkpoint_path) from e
                loss_sum += value * len(idx)

            eval_acc = evaluate_network(net, eval_set, arch=config.arch)
            rows.append({"epoch": epoch, "train_loss": loss_sum / n, "eval_acc": eval_acc})
            logger.info("[TRAIN] epoch=%s train_loss=%.6f eval_acc=%.4f", epoch, loss_sum / n, eval_acc)
            last_good = _snapshot(net, opt, config)

    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    if checkpoint_path is not None:
        save_checkpoint(last_good, checkpoint_path)
    return TrainResult(checkpoint=last_good, metrics=metrics, network=net)


def write_metrics(metrics: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


# =====================
# Evaluation
# =====================
def _correct(predict, x: np.ndarray, y: np.ndarray) -> int:
    correct = 0
    for lo in range(0, len(y), EVAL_BATCH):
        correct += int(np.sum(predict(x[lo:lo + EVAL_BATCH]) == y[lo:lo + EVAL_BATCH]))
    return correct


def _sharded_accuracy(predict, x: np.ndarray, y: np.ndarray) -> float:
    """Sum of correct counts, optionally over joblib worker shards."""
    threads = max(1, settings.n2uq_threads)
    if threads == 1 or len(y) < 2 * EVAL_BATCH:
        return _correct(predict, x, y) / len(y)
    bounds = np.linspace(0, len(y), threads + 1).astype(int)
    counts = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_correct)(predict, x[lo:hi], y[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
    )
    return sum(counts) / len(y)


def evaluate_network(net: Network, data: Dataset, *, arch: str = "mlp") -> float:
    data.require_nonempty()
    x = model_inputs(data, arch)

    def predict(batch: np.ndarray) -> np.ndarray:
        return np.argmax(net(Tensor(batch)).data, axis=1)

    with no_grad():
        return _sharded_accuracy(predict, x, data.y)


def _last_layer(ckpt: Checkpoint) -> int:
    indices = [int(name.split(".")[1]) for name in ckpt.tensors if name.startswith("layers.")]
    if not indices or "layers.0.weight" not in ckpt.tensors:
        raise FormatError("checkpoint holds no layer tensors")
    return max(indices)


def checkpoint_classes(ckpt: Checkpoint) -> int:
    return int(ckpt.tensors[f"layers.{_last_layer(ckpt)}.bias"].shape[0])


def checkpoint_in_shape(ckpt: Checkpoint) -> tuple[int, ...]:
    """Input shape that reproduces every stored tensor shape (conv: H*W folded into one axis)."""
    first = ckpt.tensors["layers.0.weight"]
    if ckpt.config.arch == "conv":
        head = ckpt.tensors[f"layers.{_last_layer(ckpt)}.weight"]
        return (int(first.shape[1]), int(head.shape[1]) // ckpt.config.hidden[-1], 1)
    return (int(first.shape[1]),)


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    """Rebuild the network at float64 and load the stored float32 tensors."""
    with precision("float64"):
        net = build_network(ckpt.config, checkpoint_in_shape(ckpt), checkpoint_classes(ckpt))
        net.load_state_dict(ckpt.tensors)
    return net


def evaluate(ckpt: Checkpoint, data: Dataset) -> float:
    """Accuracy (fraction) of the training-path network at float64."""
    data.require_nonempty()
    net = network_from_checkpoint(ckpt)
    with threadpool_limits(limits=settings.n2uq_threads), precision("float64"):
        acc = evaluate_network(net, data, arch=ckpt.config.arch)
    logger.info("[EVAL] path=training samples=%s acc=%.6f", len(data), acc)
    return acc


def evaluate_packed(pn: PackedNetwork, data: Dataset, *, arch: str = "mlp") -> float:
    data.require_nonempty()
    x = model_inputs(data, arch)
    with threadpool_limits(limits=settings.n2uq_threads):
        acc = _sharded_accuracy(pn.predict, x, data.y)
    logger.info("[EVAL] path=packed samples=%s acc=%.6f", len(data), acc)
    return acc


# =====================
# Ablation
# =====================
def ablate(config: TrainConfig) -> pd.DataFrame:
    """Seed-matched runs: float, uniform baseline, each N2UQ component alone, both."""
    rows = []
    for name, act, reg in ABLATIONS:
        run_config = config.model_copy(update={"act_quantizer": act, "weight_reg": reg})
        result = train(run_config)
        last = result.metrics.iloc[-1]
        rows.append(
            {
                "config": name,
                "act_quantizer": act,
                "weight_reg": reg if act != "none" else "none",
                "final_train_loss": float(last["train_loss"]),
                "eval_acc": float(last["eval_acc"]),
            }
        )
        logger.info("[ABLATE] config=%s eval_acc=%.4f", name, float(last["eval_acc"]))
    return pd.DataFrame(rows)
