from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from app.models import ModelConfig, TrainSpec

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RSSCKPT\x00"
CHECKPOINT_VERSION = 1
_PROB_EPS = 1e-12


@dataclass
class ModelOutput:
    stage_probs: np.ndarray
    event_probs: np.ndarray

    def __post_init__(self) -> None:
        if self.stage_probs.ndim != 2:
            raise ValueError("stage_probs must be epochs x stages")
        if self.event_probs.ndim != 1:
            raise ValueError("event_probs must be one value per frame")

    @property
    def n_epochs(self) -> int:
        return int(self.stage_probs.shape[0])

    def stage_argmax(self) -> np.ndarray:
        return self.stage_probs.argmax(axis=1)


@dataclass
class TrainingRecord:
    subject_id: str
    features: np.ndarray
    stage_labels: np.ndarray
    event_labels: np.ndarray
    stage_mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError(f"{self.subject_id}: features must be frames x channels")
        if len(self.event_labels) != self.features.shape[0]:
            raise ValueError(f"{self.subject_id}: event labels do not match frame count")
        if self.stage_mask is None:
            self.stage_mask = np.ones(len(self.stage_labels), dtype=bool)
        if len(self.stage_mask) != len(self.stage_labels):
            raise ValueError(f"{self.subject_id}: stage mask does not match epoch count")


@dataclass
class TrainResult:
    model: "SleepApneaNet"
    history: list[dict[str, float]] = field(default_factory=list)
    iterations: int = 0

    @property
    def final_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else float("nan")


class SleepApneaNet(nn.Module):
    """卷积抽取逐帧特征 -> 双向 LSTM 汇总前后文 -> 分期头(每 epoch) + 事件头(每帧)。"""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        blocks = []
        in_ch = cfg.n_channels
        for width in cfg.conv_widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv1d(in_ch, width, cfg.kernel_size, padding=cfg.kernel_size // 2),
                    nn.ReLU(),
                    nn.Dropout(cfg.dropout),
                )
            )
            in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.pools = nn.ModuleList([nn.MaxPool1d(p) for p in cfg.pools])
        self.rnn = nn.LSTM(in_ch, cfg.hidden_size, batch_first=True, bidirectional=True)
        self.stage_head = nn.Linear(2 * cfg.hidden_size, cfg.n_stages)
        self.event_head = nn.Linear(2 * cfg.hidden_size, 1)
        # 池化前的第一层特征直接接到事件头，保留帧级时间分辨率
        self.event_skip = nn.Conv1d(cfg.conv_widths[0], 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (batch, frames, channels) -> (stage logits (batch, epochs, stages), event logits (batch, frames))"""
        batch, frames, channels = x.shape
        fpe = self.cfg.frames_per_epoch
        if channels != self.cfg.n_channels:
            raise ValueError(f"expected {self.cfg.n_channels} channels, got {channels}")
        if frames == 0 or frames % fpe:
            raise ValueError(f"frame count {frames} is not a positive multiple of {fpe}")
        h = x.transpose(1, 2)
        skip = None
        for i, (block, pool) in enumerate(zip(self.blocks, self.pools)):
            h = block(h)
            if i == 0:
                skip = self.event_skip(h).squeeze(1)
            h = pool(h)
        r, _ = self.rnn(h.transpose(1, 2))
        steps = fpe // self.cfg.downsample
        epochs = frames // fpe
        pooled = r.reshape(batch, epochs, steps, r.shape[-1]).mean(dim=2)
        stage_logits = self.stage_head(pooled)
        upsampled = r.repeat_interleave(self.cfg.downsample, dim=1)
        event_logits = self.event_head(upsampled).squeeze(-1) + skip
        return stage_logits, event_logits


def build_model(cfg: ModelConfig) -> SleepApneaNet:
    # 初始化只消耗局部随机流，不影响调用方的全局 torch 种子
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = SleepApneaNet(cfg)
    logger.info("model_built | params=%d | widths=%s | hidden=%d", count_parameters(model), cfg.conv_widths, cfg.hidden_size)
    return model


def count_parameters(model: nn.Module) -> int:
    return int(sum(p.numel() for p in model.parameters()))


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def predict(model: SleepApneaNet, features: np.ndarray) -> ModelOutput:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be a non-empty frames x channels matrix")
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(features, dtype=_param_dtype(model)).unsqueeze(0)
        stage_logits, event_logits = model(x)
        stage_probs = torch.softmax(stage_logits[0], dim=-1).double().numpy()
        event_probs = torch.sigmoid(event_logits[0]).double().numpy()
    return ModelOutput(stage_probs=stage_probs, event_probs=event_probs)


def loss(
    output: ModelOutput,
    stage_labels: np.ndarray,
    event_labels: np.ndarray,
    stage_mask: Optional[np.ndarray] = None,
    stage_weight: float = 1.0,
    event_weight: float = 1.0,
) -> float:
    """概率空间下的损失；与 batch_loss 在 logits 上的计算一致。"""
    stage_labels = np.asarray(stage_labels, dtype=int)
    event_labels = np.asarray(event_labels, dtype=float)
    if len(stage_labels) != output.n_epochs or len(event_labels) != len(output.event_probs):
        raise ValueError("labels do not match output shape")
    mask = np.ones(len(stage_labels), dtype=bool) if stage_mask is None else np.asarray(stage_mask, dtype=bool)

    total = 0.0
    if stage_weight > 0 and mask.any():
        picked = output.stage_probs[np.arange(len(stage_labels)), stage_labels][mask]
        total += stage_weight * float(-np.log(np.clip(picked, _PROB_EPS, 1.0)).mean())
    if event_weight > 0 and len(event_labels):
        p = np.asarray(output.event_probs, dtype=float)
        pos = np.where(event_labels > 0, event_labels * np.log(np.clip(p, _PROB_EPS, 1.0)), 0.0)
        neg = np.where(event_labels < 1, (1 - event_labels) * np.log(np.clip(1 - p, _PROB_EPS, 1.0)), 0.0)
        total += event_weight * float(-(pos + neg).mean())
    return max(total, 0.0)


def batch_loss(
    stage_logits: torch.Tensor,
    event_logits: torch.Tensor,
    stage_labels: torch.Tensor,
    event_labels: torch.Tensor,
    stage_mask: torch.Tensor,
    frame_mask: torch.Tensor,
    stage_weight: float = 1.0,
    event_weight: float = 1.0,
) -> torch.Tensor:
    total = stage_logits.new_zeros(())
    if stage_weight > 0 and bool(stage_mask.any()):
        ce = F.cross_entropy(stage_logits.flatten(0, 1), stage_labels.flatten(), reduction="none")
        m = stage_mask.flatten().to(ce.dtype)
        total = total + stage_weight * (ce * m).sum() / m.sum()
    if event_weight > 0 and bool(frame_mask.any()):
        bce = F.binary_cross_entropy_with_logits(event_logits, event_labels.to(event_logits.dtype), reduction="none")
        m = frame_mask.to(bce.dtype)
        total = total + event_weight * (bce * m).sum() / m.sum()
    return total


def _collate(records: list[TrainingRecord], fpe: int, dtype: torch.dtype) -> dict[str, torch.Tensor]:
    """不同长度的记录补零到同一长度，补齐部分由掩码排除。"""
    max_epochs = max(len(r.stage_labels) for r in records)
    frames = max_epochs * fpe
    channels = records[0].features.shape[1]
    x = np.zeros((len(records), frames, channels))
    stage = np.zeros((len(records), max_epochs), dtype=np.int64)
    stage_mask = np.zeros((len(records), max_epochs), dtype=bool)
    event = np.zeros((len(records), frames))
    frame_mask = np.zeros((len(records), frames), dtype=bool)
    for i, rec in enumerate(records):
        e = len(rec.stage_labels)
        n = e * fpe
        if rec.features.shape[0] < n:
            raise ValueError(f"{rec.subject_id}: {rec.features.shape[0]} frames cannot cover {e} epochs")
        x[i, :n] = rec.features[:n]
        stage[i, :e] = rec.stage_labels
        stage_mask[i, :e] = rec.stage_mask
        event[i, :n] = rec.event_labels[:n]
        frame_mask[i, :n] = True
    return {
        "x": torch.as_tensor(x, dtype=dtype),
        "stage": torch.as_tensor(stage),
        "stage_mask": torch.as_tensor(stage_mask),
        "event": torch.as_tensor(event, dtype=dtype),
        "frame_mask": torch.as_tensor(frame_mask),
    }


def _batch_objective(model: SleepApneaNet, batch: dict[str, torch.Tensor], spec: TrainSpec) -> torch.Tensor:
    stage_logits, event_logits = model(batch["x"])
    return batch_loss(
        stage_logits,
        event_logits,
        batch["stage"],
        batch["event"],
        batch["stage_mask"],
        batch["frame_mask"],
        stage_weight=spec.stage_weight,
        event_weight=spec.event_weight,
    )


def compute_gradients(model: SleepApneaNet, records: list[TrainingRecord], spec: TrainSpec) -> dict[str, np.ndarray]:
    """一个 batch 的解析梯度，覆盖全部参数；未参与计算的参数返回全零。"""
    if not records:
        raise ValueError("empty batch")
    batch = _collate(records, model.cfg.frames_per_epoch, _param_dtype(model))
    model.zero_grad(set_to_none=True)
    objective = _batch_objective(model, batch, spec)
    objective.backward()
    grads: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        if param.grad is None:
            grads[name] = np.zeros(tuple(param.shape))
        else:
            grads[name] = param.grad.detach().double().numpy().copy()
    return grads


def batch_objective_value(model: SleepApneaNet, records: list[TrainingRecord], spec: TrainSpec) -> float:
    batch = _collate(records, model.cfg.frames_per_epoch, _param_dtype(model))
    with torch.no_grad():
        return float(_batch_objective(model, batch, spec))


def make_optimizer(model: nn.Module, spec: TrainSpec) -> torch.optim.Optimizer:
    if spec.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=spec.learning_rate, momentum=spec.momentum)


def train_step(
    model: SleepApneaNet,
    optimizer: torch.optim.Optimizer,
    records: list[TrainingRecord],
    spec: TrainSpec,
) -> float:
    model.train()
    batch = _collate(records, model.cfg.frames_per_epoch, _param_dtype(model))
    optimizer.zero_grad(set_to_none=True)
    objective = _batch_objective(model, batch, spec)
    objective.backward()
    optimizer.step()
    return float(objective.detach())


def evaluate_loss(model: SleepApneaNet, records: list[TrainingRecord], spec: TrainSpec) -> float:
    model.eval()
    values = []
    weights = []
    for start in range(0, len(records), spec.batch_size):
        chunk = records[start : start + spec.batch_size]
        values.append(batch_objective_value(model, chunk, spec))
        weights.append(len(chunk))
    return float(np.average(values, weights=weights))


def train(
    records: list[TrainingRecord],
    spec: TrainSpec,
    cfg: ModelConfig,
    val_records: Optional[list[TrainingRecord]] = None,
) -> TrainResult:
    """单一确定性序列：固定 seed 时两次运行的参数与 history 完全一致。

    没有验证集时用训练集（eval 模式）的损失做早停与 best-so-far 记录。
    """
    if not records:
        raise ValueError("empty training set")
    model = build_model(cfg)
    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    optimizer = make_optimizer(model, spec)
    monitor = val_records or records

    result = TrainResult(model=model)
    best_val = float("inf")
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    stale = 0
    for epoch in range(1, spec.max_epochs + 1):
        order = rng.permutation(len(records))
        batch_losses = []
        for start in range(0, len(order), spec.batch_size):
            chunk = [records[i] for i in order[start : start + spec.batch_size]]
            batch_losses.append(train_step(model, optimizer, chunk, spec))
            result.iterations += 1
            if spec.max_iterations and result.iterations >= spec.max_iterations:
                break
        val_loss = evaluate_loss(model, monitor, spec)
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
        result.history.append(
            {
                "epoch": float(epoch),
                "train_loss": float(np.mean(batch_losses)),
                "val_loss": val_loss,
                "best_val_loss": best_val,
            }
        )
        logger.info(
            "train_epoch | epoch=%d | train_loss=%.4f | val_loss=%.4f | best=%.4f",
            epoch,
            result.history[-1]["train_loss"],
            val_loss,
            best_val,
        )
        if spec.max_iterations and result.iterations >= spec.max_iterations:
            break
        if stale >= spec.patience:
            logger.info("train_early_stop | epoch=%d | patience=%d", epoch, spec.patience)
            break
    model.load_state_dict(best_state)
    model.eval()
    return result


def save_checkpoint(model: SleepApneaNet, path: str | Path) -> Path:
    """magic | u32 version | u32 header_len | JSON header | float32 LE payload"""
    tensors = []
    payload = io.BytesIO()
    offset = 0
    for name, tensor in model.state_dict().items():
        values = tensor.detach().cpu().double().numpy().astype("<f4").ravel()
        tensors.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(values.size)})
        payload.write(values.tobytes())
        offset += int(values.size)
    header = json.dumps(
        {"config": model.cfg.model_dump(), "dtype": "<f4", "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())
    logger.info("checkpoint_saved | path=%s | tensors=%d | values=%d", path, len(tensors), offset)
    return path


def load_checkpoint(path: str | Path) -> SleepApneaNet:
    raw = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < prefix or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint: {path}")
    version, header_len = struct.unpack("<II", raw[len(CHECKPOINT_MAGIC) : prefix])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint header: {path}") from exc
    values = np.frombuffer(raw[prefix + header_len :], dtype="<f4")
    cfg = ModelConfig.model_validate(header["config"])
    model = SleepApneaNet(cfg)
    expected = model.state_dict()
    state = {}
    for item in header["tensors"]:
        name = item["name"]
        if name not in expected:
            raise ValueError(f"unexpected tensor {name} in checkpoint")
        end = item["offset"] + item["count"]
        if end > values.size:
            raise ValueError(f"checkpoint truncated at tensor {name}")
        chunk = values[item["offset"] : end].reshape(item["shape"])
        state[name] = torch.as_tensor(chunk.copy(), dtype=expected[name].dtype)
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model
