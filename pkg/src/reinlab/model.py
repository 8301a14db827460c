"""Full segmentation model: backbone + optional adapter + decode head.

Three fine-tune modes:

  full   - every backbone tensor trains alongside the head
  freeze - backbone fixed, only the head trains
  rein   - backbone fixed, the refinement adapter and the head train

In rein mode with query linking enabled, the adapter's aggregated query set
replaces the head's own queries.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .adapter import ReinAdapter, ReinConfig, init_parameters
from .errors import ConfigError, ContractError
from .head import HeadConfig, SegHead, SegPrediction
from .vit import ViTBackbone, ViTConfig

MODES = ("full", "freeze", "rein")

# fixed per-component rng streams so e.g. rein and freeze models built from
# the same seed share backbone and head draws
_STREAM_BACKBONE = 0
_STREAM_ADAPTER = 1
_STREAM_HEAD = 2


class SegModel:
    def __init__(self, vit_cfg: ViTConfig, head_cfg: HeadConfig, mode: str,
                 rein_cfg: ReinConfig | None = None, seed: int = 0,
                 backbone_seed: int | None = None, query_dim: int | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; pick from {MODES}")
        if mode == "rein":
            if rein_cfg is None:
                raise ConfigError("rein mode requires a ReinConfig")
            if rein_cfg.c != vit_cfg.dim or rein_cfg.depth != vit_cfg.depth:
                raise ConfigError(
                    f"adapter dims (c={rein_cfg.c}, depth={rein_cfg.depth}) do not "
                    f"match backbone (dim={vit_cfg.dim}, depth={vit_cfg.depth})")
        self.vit_cfg = vit_cfg
        self.head_cfg = head_cfg
        self.rein_cfg = rein_cfg if mode == "rein" else None
        self.mode = mode
        self.seed = int(seed)
        self.backbone_seed = int(backbone_seed if backbone_seed is not None else seed)

        self.backbone = ViTBackbone(
            vit_cfg, np.random.default_rng((self.backbone_seed, _STREAM_BACKBONE)),
            frozen=(mode != "full"))
        self.adapter = None
        linked = False
        if mode == "rein":
            params = init_parameters(rein_cfg, (self.seed, _STREAM_ADAPTER))
            self.adapter = ReinAdapter(params)
            linked = rein_cfg.use_link
        if query_dim is None:
            query_dim = rein_cfg.c_prime if rein_cfg is not None else 16
        self.query_dim = int(query_dim)
        if linked and self.query_dim != rein_cfg.c_prime:
            raise ConfigError("query width must match the adapter's c_prime")
        if linked and head_cfg.num_queries != rein_cfg.m:
            raise ConfigError(
                f"head num_queries ({head_cfg.num_queries}) must equal the "
                f"adapter token count m ({rein_cfg.m}) when queries are linked")
        grid = (vit_cfg.grid, vit_cfg.grid)
        out = (vit_cfg.image_size, vit_cfg.image_size)
        self.head = SegHead(
            head_cfg, len(vit_cfg.tap_layers), vit_cfg.dim, self.query_dim,
            grid, out, np.random.default_rng((self.seed, _STREAM_HEAD)),
            owns_queries=not linked)

    # -- parameters ----------------------------------------------------------

    def named_tensors(self):
        """(name, tensor, component) triples in a fixed order."""
        out = [("backbone." + n, t, "backbone")
               for n, t in self.backbone.named_tensors()]
        if self.adapter is not None:
            out += [(n, t, "adapter") for n, t in self.adapter.named_tensors()]
        out += [(n, t, "head") for n, t in self.head.named_tensors()]
        return out

    def trainable_tensors(self):
        return [(n, t) for n, t, _ in self.named_tensors() if t.requires_grad]

    def n_trainable(self, components=None):
        total = 0
        for _, t, comp in self.named_tensors():
            if t.requires_grad and (components is None or comp in components):
                total += t.size
        return total

    def zero_grad(self):
        for _, t, _ in self.named_tensors():
            t.grad = None

    # -- forward -------------------------------------------------------------

    def forward_rows(self, images: np.ndarray):
        """Decode a [B,3,H,W] batch to per-pixel logit rows [B*H*W, K]."""
        if images.ndim == 3:
            images = images[None]
        bsz = images.shape[0]
        hook = self.adapter if self.adapter is not None else None
        tapped, _ = self.backbone.forward(images, hook=hook)
        query = None
        if self.adapter is not None and self.adapter.cfg.use_link:
            query = self.adapter.aggregate_query()
        rows, _, _, _ = self.head.decode_rows(tapped, query, bsz)
        return rows

    def predict(self, image: np.ndarray) -> SegPrediction:
        """Single-image forward to a full prediction record."""
        hook = self.adapter if self.adapter is not None else None
        tapped, _ = self.backbone.forward(image, hook=hook)
        query = None
        if self.adapter is not None and self.adapter.cfg.use_link:
            query = self.adapter.aggregate_query()
        return self.head.decode(tapped, query)

    def tapped_features(self, image: np.ndarray):
        hook = self.adapter if self.adapter is not None else None
        tapped, _ = self.backbone.forward(image, hook=hook)
        return tapped

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        """Argmax label maps [B, H, W] for a batch, without building grads."""
        if images.ndim == 3:
            images = images[None]
        bsz = images.shape[0]
        rows = self.forward_rows(images)
        hw = self.vit_cfg.image_size
        return rows.data.argmax(axis=1).reshape(bsz, hw, hw)

    def batch_loss(self, images: np.ndarray, labels: np.ndarray):
        """Mean cross-entropy over a batch; labels [B, H, W] with 255 ignore."""
        if images.ndim == 3:
            images = images[None]
            labels = labels[None]
        if images.shape[0] != labels.shape[0]:
            raise ContractError(
                f"batch size mismatch: {images.shape[0]} images vs "
                f"{labels.shape[0]} labels")
        rows = self.forward_rows(images)
        return T.cross_entropy_logits(rows, np.asarray(labels).reshape(-1))
