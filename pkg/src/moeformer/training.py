"""Training harness: frame-level cross-entropy plus the weighted
load-balancing penalty, adaptive-moment updates with linear warmup,
line-oriented metrics, and deterministic (optionally prefetched) batching.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import EncoderConfig, _KeyReader, encoder_to_flat
from .encoder import EncoderModel, build_encoder, spec_augment
from .errors import ConfigError, TrainingDiverged
from .moe import aux_load_balance_loss, over_capacity_ratio
from .synth import SyntheticTaskSpec, frame_targets, generate_batch
from .tensor import Tensor


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 3e-3
    warmup_steps: int = 100
    aux_weight: float = 0.01
    capacity_factor: float = 1.0
    specaug: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0  # global gradient-norm ceiling; 0 disables
    seed: int = 0
    dtype: str = "float32"
    prefetch: int = 0  # batches generated ahead by a producer thread

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.prefetch < 0:
            raise ConfigError("prefetch must be >= 0")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def train_from_flat(raw: dict[str, str], prefix: str = "train.") -> TrainConfig:
    r = _KeyReader(raw, prefix)
    cfg = TrainConfig(
        steps=r.int_("steps", 500),
        batch_size=r.int_("batch_size", 8),
        lr=r.float_("lr", 3e-3),
        warmup_steps=r.int_("warmup", 100),
        aux_weight=r.float_("aux_weight", 0.01),
        capacity_factor=r.float_("capacity_factor", 1.0),
        specaug=r.int_("specaug", 0) != 0,
        beta1=r.float_("beta1", 0.9),
        beta2=r.float_("beta2", 0.999),
        eps=r.float_("eps", 1e-8),
        clip_norm=r.float_("clip_norm", 1.0),
        seed=r.int_("seed", 0),
        dtype=r.str_("dtype", "float32"),
        prefetch=r.int_("prefetch", 0),
    )
    unknown = r.unknown_keys()
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# model bundle


class TrainedModel:
    """Encoder plus a linear frame-classification head."""

    def __init__(self, encoder: EncoderModel, head_w: Tensor, head_b: Tensor):
        self.encoder = encoder
        self.head_w = head_w
        self.head_b = head_b

    @property
    def num_labels(self) -> int:
        return int(self.head_w.shape[1])

    def parameters(self):
        yield from self.encoder.parameters()
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None

    def logits(self, features, language_ids=None, collect_routing=False):
        enc, decisions = self.encoder.forward(
            features, mode="cascaded", language_ids=language_ids,
            collect_routing=collect_routing,
        )
        return T.matmul(enc, self.head_w) + self.head_b, decisions


def build_model(config: EncoderConfig, num_labels: int, seed: int,
                dtype=np.float32) -> TrainedModel:
    encoder = build_encoder(config, seed, dtype)
    rng = np.random.default_rng([seed, 1])
    d = config.output_dim
    bound = 1.0 / np.sqrt(d)
    head_w = Tensor(rng.uniform(-bound, bound, (d, num_labels)).astype(dtype),
                    requires_grad=True)
    head_b = Tensor(np.zeros(num_labels, dtype=dtype), requires_grad=True)
    return TrainedModel(encoder, head_w, head_b)


# --------------------------------------------------------------------------
# loss pieces


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    log_probs = T.log_softmax(logits, axis=-1)
    picked = T.take_index_last(log_probs, targets)
    return -T.mean(picked)


def frame_accuracy(logits: Tensor, targets: np.ndarray) -> float:
    pred = logits.data.argmax(axis=-1)
    return float((pred == targets).mean()) if targets.size else 0.0


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Per-parameter adaptive moments with bias correction and linear warmup."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, warmup_steps: int = 0):
        self.params = [p for _, p in params]
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if self.warmup_steps and self.t < self.warmup_steps:
            return self.lr * (self.t + 1) / self.warmup_steps
        return self.lr

    def step(self) -> float:
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - (lr * update).astype(p.dtype)
        return lr


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Keeps late training stable once the loss is
    tiny and the adaptive denominators have decayed."""
    total = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# --------------------------------------------------------------------------
# batching


def _batch_stream(task: SyntheticTaskSpec, train_cfg: TrainConfig):
    """Batches in a deterministic seed-driven order, optionally produced ahead
    by a bounded-queue worker thread."""
    rng = np.random.default_rng([train_cfg.seed, 2])

    def make(_step):
        return generate_batch(task, rng, train_cfg.batch_size)

    if train_cfg.prefetch <= 0:
        for step in range(train_cfg.steps):
            yield make(step)
        return

    q: queue.Queue = queue.Queue(maxsize=train_cfg.prefetch)

    def producer():
        for step in range(train_cfg.steps):
            q.put(make(step))

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    for _ in range(train_cfg.steps):
        yield q.get()
    worker.join()


# --------------------------------------------------------------------------
# training loop


def train(encoder_config: EncoderConfig, task: SyntheticTaskSpec,
          train_cfg: TrainConfig, step_hook=None):
    """Train a fresh model; returns (model, metrics) where metrics is one
    dict per step (loss, ce, accuracy, per-layer aux/load/over-capacity)."""
    train_cfg.validate()
    task.validate()
    encoder_config.validate()
    if task.feature_dim != encoder_config.frontend.feature_dim:
        raise ConfigError(
            f"task feature_dim {task.feature_dim} != encoder feature_dim "
            f"{encoder_config.frontend.feature_dim}"
        )
    if task.frames_per_token != encoder_config.total_downsample:
        raise ConfigError(
            f"task frames_per_token {task.frames_per_token} must equal the "
            f"encoder's total downsample {encoder_config.total_downsample}"
        )
    uses_adapters = encoder_config.adapters is not None
    if uses_adapters and encoder_config.adapters.num_groups != task.num_languages:
        raise ConfigError(
            f"adapter groups {encoder_config.adapters.num_groups} must match "
            f"the task's {task.num_languages} languages"
        )

    model = build_model(encoder_config, task.num_labels, train_cfg.seed,
                        train_cfg.np_dtype)
    opt = Adam(model.parameters(), lr=train_cfg.lr, beta1=train_cfg.beta1,
               beta2=train_cfg.beta2, eps=train_cfg.eps,
               warmup_steps=train_cfg.warmup_steps)
    aug_rng = np.random.default_rng([train_cfg.seed, 3])
    downsample = encoder_config.total_downsample

    metrics: list[dict] = []
    for step, (feats, labels, langs) in enumerate(_batch_stream(task, train_cfg)):
        if train_cfg.specaug:
            feats = np.stack([spec_augment(f, aug_rng) for f in feats])
        targets = frame_targets(labels, downsample)
        logits, decisions = model.logits(
            feats, language_ids=langs if uses_adapters else None,
            collect_routing=True,
        )
        ce = cross_entropy(logits, targets)
        loss = ce
        aux_values = []
        for decision in decisions:
            aux = aux_load_balance_loss(decision)
            aux_values.append(float(aux.data))
            if train_cfg.aux_weight > 0:
                loss = loss + aux * train_cfg.aux_weight
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise TrainingDiverged(
                f"non-finite loss {loss_value} at step {step} "
                f"(ce={float(ce.data)}, lr={opt.current_lr():.3g})"
            )
        model.zero_grad()
        loss.backward()
        grad_norm = clip_gradients([p for _, p in model.parameters()],
                                   train_cfg.clip_norm)
        lr = opt.step()

        record = {
            "step": step,
            "loss": loss_value,
            "ce": float(ce.data),
            "acc": frame_accuracy(logits, targets),
            "lr": lr,
            "grad_norm": grad_norm,
        }
        for li, decision in enumerate(decisions):
            record[f"aux{li}"] = aux_values[li]
            stats = over_capacity_ratio(decision, train_cfg.capacity_factor)
            loads = decision.load_fractions
            for e in range(decision.num_experts):
                record[f"load{li}_{e}"] = float(loads[e])
                record[f"ovc{li}_{e}"] = float(stats.ratios[e])
        metrics.append(record)
        if step_hook is not None:
            step_hook(step, record)
    return model, metrics


# --------------------------------------------------------------------------
# metrics serialization


def metrics_line(record: dict) -> str:
    parts = [f"step={record['step']}"]
    for key, value in record.items():
        if key == "step":
            continue
        if isinstance(value, float):
            parts.append(f"{key}={value:.8g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def write_metrics(metrics: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in metrics:
            fh.write(metrics_line(record) + "\n")


def checkpoint_config_text(encoder_config: EncoderConfig) -> str:
    return encoder_to_flat(encoder_config)
