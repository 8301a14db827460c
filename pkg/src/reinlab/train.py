"""Fine-tuning harness: config, training loop, evaluation, metrics logging.

All randomness flows from the config seed through fixed per-purpose rng
streams, so a run is reproducible byte for byte: identical seeds give
identical metrics logs and identical checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapter import ReinConfig
from .checkpoint import Checkpoint
from .data import load_split, read_manifest
from .errors import ConfigError, NumericError
from .head import HeadConfig, confusion_matrix, iou_from_confusion
from .model import MODES, SegModel
from .optim import AdamW
from .tensor import Tape
from .vit import ViTConfig

_STREAM_DATA = 4


@dataclass
class TrainConfig:
    vit: ViTConfig
    head: HeadConfig
    rein: ReinConfig | None = None
    mode: str = "rein"
    iterations: int = 2000
    batch_size: int = 4
    lr_backbone: float = 1e-5
    lr_head_and_rein: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    backbone_seed: int | None = None
    data_root: str = ""
    eval_interval: int = 500
    loss_window: int = 200
    augment: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.mode == "rein" and self.rein is None:
            raise ConfigError("rein mode requires a rein config")

    def to_dict(self):
        d = asdict(self)
        d["vit"]["tap_layers"] = list(d["vit"]["tap_layers"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["vit"] = ViTConfig(**d["vit"])
        d["head"] = HeadConfig(**d["head"])
        d["rein"] = ReinConfig(**d["rein"]) if d.get("rein") else None
        return cls(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_config(data_root="", mode="rein", variant="rein-lora", seed=0,
                iterations=2000, **overrides):
    """Default desk-scale benchmark setup: 64px scenes, 4-layer ViT."""
    vit = ViTConfig(image_size=64, patch_size=8, depth=4, dim=64, heads=4)
    rein = ReinConfig.from_variant(variant, c=vit.dim, depth=vit.depth,
                                   m=16, r=4, c_prime=16)
    head = HeadConfig(num_classes=6, embed_dim=32, num_queries=rein.m)
    return TrainConfig(vit=vit, head=head, rein=rein, mode=mode, seed=seed,
                       iterations=iterations, data_root=str(data_root),
                       **overrides)


def build_model(cfg: TrainConfig) -> SegModel:
    query_dim = cfg.rein.c_prime if cfg.rein is not None else 16
    return SegModel(cfg.vit, cfg.head, cfg.mode, rein_cfg=cfg.rein,
                    seed=cfg.seed, backbone_seed=cfg.backbone_seed,
                    query_dim=query_dim)


def model_from_meta(meta: dict) -> SegModel:
    try:
        cfg = TrainConfig.from_dict(meta["config"])
    except KeyError:
        raise ConfigError("checkpoint metadata carries no model config") from None
    return build_model(cfg)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    iteration: int
    train_loss: float
    val_miou: float
    test_miou: float
    params: int


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def add(self, **kw):
        self.rows.append(MetricsRow(**kw))

    def to_csv_bytes(self) -> bytes:
        lines = ["iteration,train_loss,val_miou,test_miou,params"]
        for r in self.rows:
            lines.append(f"{r.iteration},{r.train_loss:.6f},{r.val_miou:.6f},"
                         f"{r.test_miou:.6f},{r.params}")
        return ("\n".join(lines) + "\n").encode()

    def write_csv(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_csv_bytes())


class TrainDiverged(NumericError):
    """Loss became non-finite; carries the metrics gathered so far."""

    def __init__(self, iteration, metrics):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.metrics = metrics


@dataclass
class EvalReport:
    per_class: list
    miou: float
    n_images: int

    def as_dict(self):
        return {"per_class": [None if math.isnan(v) else v for v in self.per_class],
                "miou": self.miou, "n_images": self.n_images}


# ---------------------------------------------------------------------------
# evaluation


def evaluate_model(model: SegModel, samples, num_classes, batch=8) -> EvalReport:
    """Deterministic per-class IoU over a sample list.

    The confusion matrix accumulates integers, so the result is independent
    of batching order.
    """
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        imgs = np.stack([s.image for s in chunk])
        preds = model.predict_labels(imgs)
        for s, pred in zip(chunk, preds):
            gt = s.label.reshape(-1)
            valid = gt != 255
            cm += confusion_matrix(pred.reshape(-1)[valid], gt[valid], num_classes)
    ious, mean = iou_from_confusion(cm)
    return EvalReport(per_class=list(ious), miou=mean, n_images=len(samples))


def evaluate(ckpt: Checkpoint, data_root, split="test", batch=8) -> EvalReport:
    """Evaluate a checkpoint on one split of a stored benchmark."""
    manifest = read_manifest(data_root)
    cfg_k = ckpt.meta.get("config", {}).get("head", {}).get("num_classes")
    if cfg_k is not None and cfg_k != manifest["k"]:
        raise ConfigError(
            f"checkpoint has {cfg_k} classes but dataset has {manifest['k']}")
    model = model_from_meta(ckpt.meta)
    ckpt.load_into(model)
    samples = load_split(data_root, split)
    return evaluate_model(model, samples, manifest["k"], batch=batch)


# ---------------------------------------------------------------------------
# training


def _make_optimizers(model: SegModel, cfg: TrainConfig):
    groups = []
    if cfg.mode == "full":
        backbone = [(n, t) for n, t, c in model.named_tensors()
                    if c == "backbone"]
        groups.append(AdamW(backbone, cfg.lr_backbone,
                            weight_decay=cfg.weight_decay))
    tuned = [(n, t) for n, t, c in model.named_tensors()
             if c in ("adapter", "head") and t.requires_grad]
    groups.append(AdamW(tuned, cfg.lr_head_and_rein,
                        weight_decay=cfg.weight_decay))
    return groups


def train(cfg: TrainConfig):
    """Run the fine-tuning loop; returns (Checkpoint, MetricsLog).

    Raises TrainDiverged on a non-finite loss, keeping the partial log.
    """
    manifest = read_manifest(cfg.data_root)
    if manifest["k"] != cfg.head.num_classes:
        raise ConfigError(
            f"dataset has {manifest['k']} classes, config expects "
            f"{cfg.head.num_classes}")
    if manifest["h"] != cfg.vit.image_size or manifest["w"] != cfg.vit.image_size:
        raise ConfigError(
            f"dataset is {manifest['h']}x{manifest['w']}, backbone expects "
            f"{cfg.vit.image_size}")
    train_set = load_split(cfg.data_root, "train")
    val_set = load_split(cfg.data_root, "val")
    test_set = load_split(cfg.data_root, "test")

    model = build_model(cfg)
    optimizers = _make_optimizers(model, cfg)
    n_params = model.n_trainable()
    rng = np.random.default_rng((cfg.seed, _STREAM_DATA))
    window = deque(maxlen=cfg.loss_window)
    metrics = MetricsLog()
    k = manifest["k"]

    def eval_row(iteration):
        loss = float(np.mean(window)) if window else float("nan")
        val = evaluate_model(model, val_set, k)
        test = evaluate_model(model, test_set, k)
        metrics.add(iteration=iteration, train_loss=loss, val_miou=val.miou,
                    test_miou=test.miou, params=n_params)

    for t in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(train_set), cfg.batch_size)
        flips = rng.random(cfg.batch_size) < 0.5
        imgs, labels = [], []
        for j, i in enumerate(idx):
            s = train_set[i]
            if cfg.augment and flips[j]:
                imgs.append(s.image[:, :, ::-1].copy())
                labels.append(s.label[:, ::-1].copy())
            else:
                imgs.append(s.image)
                labels.append(s.label)
        with Tape() as tape:
            loss = model.batch_loss(np.stack(imgs), np.stack(labels))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainDiverged(t, metrics)
            tape.backward(loss)
        for opt in optimizers:
            opt.step()
        model.zero_grad()
        window.append(value)
        if t % cfg.eval_interval == 0 or t == cfg.iterations:
            eval_row(t)
    if cfg.iterations == 0:
        eval_row(0)

    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "iteration": cfg.iterations,
        "seed": cfg.seed,
    }
    return Checkpoint.from_model(model, meta), metrics
