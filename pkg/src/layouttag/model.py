"""The multimodal token classifier: text + layout + image with early fusion.

Architecture: per-token text embeddings (token + 1D position + segment),
visual tokens from a W×H patch grid over the page raster (flatten + linear
projection + shared 1D position + visual segment), additive 2D layout
embeddings over normalized box coordinates, and a pre-normalization
transformer encoder whose attention logits carry learned relative-position
biases — one table for 1D sequence distance and one per 2D box-center axis,
bucketed on a signed log scale. A linear head classifies the text positions.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ingest import SEG_VISUAL

__all__ = [
    "ModelConfig",
    "ModelParams",
    "Batch",
    "LayoutModel",
    "MODALITY_MODES",
    "relative_position_bucket",
    "grid_boxes",
    "make_batches",
    "mask_modality",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

MODALITY_MODES = ("full", "no_image", "no_layout", "text_only")


class CheckpointError(ValueError):
    """A checkpoint file is malformed or incompatible."""


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; defaults are the desk-scale working point."""

    vocab_size: int
    d_model: int = 96
    n_heads: int = 4
    n_layers: int = 2
    L: int = 128
    raster_size: int = 64
    grid: int = 4
    n_classes: int = 10
    rel_bias_buckets: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % 6 != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by 6")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.raster_size % self.grid != 0:
            raise ValueError(f"raster_size={self.raster_size} not divisible by grid={self.grid}")
        if self.vocab_size < 4 or self.L < 8 or self.n_layers < 1 or self.n_classes < 2:
            raise ValueError("degenerate model configuration")
        if self.rel_bias_buckets < 4 or self.rel_bias_buckets % 2:
            raise ValueError("rel_bias_buckets must be an even number >= 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def n_visual(self) -> int:
        return self.grid * self.grid

    @property
    def S(self) -> int:
        return self.n_visual + self.L

    @property
    def patch_size(self) -> int:
        return self.raster_size // self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


class ModelParams:
    """Named parameter tensors in a deterministic order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    @staticmethod
    def initialize(config: ModelConfig, seed: int) -> "ModelParams":
        """N(0, 0.02) weights, zero biases, unit gains; the 1D bias table is
        zero and the 2D tables carry a learnable per-head locality ramp."""
        rng = np.random.default_rng(seed)
        d, K = config.d_model, config.rel_bias_buckets
        d6 = d // 6

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        t: dict[str, Tensor] = {}
        t["tok_emb"] = normal(config.vocab_size, d)
        t["pos1d"] = normal(config.S, d)
        t["seg_emb"] = normal(3, d)
        t["pos2d_x"] = normal(1001, d6)
        t["pos2d_y"] = normal(1001, d6)
        t["vis_proj"] = normal(config.patch_dim, d)
        t["vis_bias"] = zeros(d)
        for i in range(config.n_layers):
            p = f"layers.{i}."
            t[p + "ln1_g"] = ones(d)
            t[p + "ln1_b"] = zeros(d)
            t[p + "qkv_w"] = normal(d, 3 * d)
            t[p + "qkv_b"] = zeros(3 * d)
            t[p + "out_w"] = normal(d, d)
            t[p + "out_b"] = zeros(d)
            t[p + "ln2_g"] = ones(d)
            t[p + "ln2_b"] = zeros(d)
            t[p + "ffn1_w"] = normal(d, 4 * d)
            t[p + "ffn1_b"] = zeros(4 * d)
            t[p + "ffn2_w"] = normal(4 * d, d)
            t[p + "ffn2_b"] = zeros(d)
        t["final_ln_g"] = ones(d)
        t["final_ln_b"] = zeros(d)
        t["cls_w"] = normal(d, config.n_classes)
        t["cls_b"] = zeros(config.n_classes)
        t["bias_1d"] = zeros(config.n_heads, K)
        # The 2D-distance tables start as a per-head locality ramp (steep to
        # nearly flat across heads) instead of zeros: attention then begins
        # spatially local, so a token reads its page neighborhood -- among
        # it the patch token covering its own position -- from the first
        # step, while the tables remain ordinary learnable parameters.
        # Empty-box masking maps every pair to bucket 0, where the ramp is
        # exactly zero, so masked modalities keep an unbiased softmax.
        buckets = relative_position_bucket(np.arange(-1000, 1001), K, 1000)
        dist = np.abs(np.arange(-1000, 1001)).astype(np.float64)
        rep = np.zeros(K)
        for b in range(K):
            hit = dist[buckets == b]
            if hit.size:
                rep[b] = hit.mean() / 1000.0
        slopes = 8.0 / (4.0 ** np.arange(config.n_heads))
        ramp = -slopes[:, None] * rep[None, :]
        t["bias_2d_x"] = Tensor(ramp.copy(), requires_grad=True)
        t["bias_2d_y"] = Tensor(ramp.copy(), requires_grad=True)
        return ModelParams(t)


@dataclass
class Batch:
    """Model inputs for a batch of sequences (arrays are never aliased out)."""

    token_ids: np.ndarray  # [B, L] int
    segment_ids: np.ndarray  # [B, L] int
    norm_boxes: np.ndarray  # [B, L, 6] int
    rasters: np.ndarray  # [B, 3, raster, raster] uint8
    visual_boxes: np.ndarray  # [B, WH, 6] int
    labels: np.ndarray  # [B, L] int
    loss_mask: np.ndarray  # [B, L] bool

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    def copy(self) -> "Batch":
        return Batch(
            token_ids=self.token_ids.copy(),
            segment_ids=self.segment_ids.copy(),
            norm_boxes=self.norm_boxes.copy(),
            rasters=self.rasters.copy(),
            visual_boxes=self.visual_boxes.copy(),
            labels=self.labels.copy(),
            loss_mask=self.loss_mask.copy(),
        )

    def equal(self, other: "Batch") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("token_ids", "segment_ids", "norm_boxes", "rasters",
                      "visual_boxes", "labels", "loss_mask")
        )


def make_batches(sequences, rasters, config: ModelConfig, batch_size: int, order=None) -> list[Batch]:
    """Pack prepared sequences into model batches.

    `rasters` maps page id -> pixels ([raster, raster, 3] uint8 array or an
    object with a .pixels attribute of that shape). `order` optionally gives
    the sequence visit order (e.g. a shuffled permutation); the final short
    batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    sequences = list(sequences)
    if order is None:
        order = range(len(sequences))
    order = list(order)
    vb_single = grid_boxes(config.grid)
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [sequences[i] for i in order[start:start + batch_size]]
        B = len(chunk)
        rast = np.empty((B, 3, config.raster_size, config.raster_size), dtype=np.uint8)
        for j, seq in enumerate(chunk):
            pixels = rasters[seq.page_ref]
            pixels = getattr(pixels, "pixels", pixels)
            if pixels.shape != (config.raster_size, config.raster_size, 3):
                raise ValueError(
                    f"raster for {seq.page_ref} has shape {pixels.shape}, "
                    f"expected ({config.raster_size}, {config.raster_size}, 3)"
                )
            rast[j] = pixels.transpose(2, 0, 1)
        batches.append(
            Batch(
                token_ids=np.array([s.token_ids for s in chunk], dtype=np.int64),
                segment_ids=np.array([s.segment_ids for s in chunk], dtype=np.int64),
                norm_boxes=np.array([s.norm_boxes for s in chunk], dtype=np.int64),
                rasters=rast,
                visual_boxes=np.broadcast_to(vb_single, (B, config.n_visual, 6)).copy(),
                labels=np.array([s.labels for s in chunk], dtype=np.int64),
                loss_mask=np.array([s.loss_mask for s in chunk], dtype=bool),
            )
        )
    return batches


def grid_boxes(grid: int) -> np.ndarray:
    """Uniform grid partition of the [0,1000]^2 plane, row-major, as [WH, 6]."""
    edges = [(i * 1000) // grid for i in range(grid + 1)]
    boxes = []
    for gy in range(grid):
        for gx in range(grid):
            x0, x1 = edges[gx], edges[gx + 1]
            y0, y1 = edges[gy], edges[gy + 1]
            boxes.append((x0, x1, y0, y1, x1 - x0, y1 - y0))
    return np.array(boxes, dtype=np.int64)


def mask_modality(batch: Batch, mode: str) -> Batch:
    """Replace masked-out channels by neutral values; the input is not modified."""
    if mode == "no_image_no_layout":
        mode = "text_only"
    if mode not in MODALITY_MODES:
        raise ValueError(f"unknown modality mode {mode!r}; expected one of {MODALITY_MODES}")
    out = batch.copy()
    if mode in ("no_image", "text_only"):
        out.rasters[:] = 255  # white pixels
    if mode in ("no_layout", "text_only"):
        out.norm_boxes[:] = 0  # empty boxes
        out.visual_boxes[:] = 0
    return out


def relative_position_bucket(rel: np.ndarray, num_buckets: int, max_distance: int) -> np.ndarray:
    """Signed log-scale bucketing of relative distances (bidirectional).

    Half the buckets encode sign; within each half, small distances get exact
    buckets and larger ones share logarithmically wider buckets, saturating
    at max_distance.
    """
    rel = np.asarray(rel)
    half = num_buckets // 2
    ret = (rel > 0).astype(np.int64) * half
    n = np.abs(rel)
    max_exact = half // 2
    is_small = n < max_exact
    n_safe = np.maximum(n, 1)
    val_large = max_exact + (
        np.log(n_safe / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
    ).astype(np.int64)
    val_large = np.minimum(val_large, half - 1)
    return ret + np.where(is_small, n, val_large)


def _extract_patches(rasters: np.ndarray, config: ModelConfig) -> np.ndarray:
    """[B,3,r,r] uint8 -> [B, WH, patch_dim] float64 ink intensities (white=0)."""
    B = rasters.shape[0]
    g, p = config.grid, config.patch_size
    ink = 1.0 - rasters.astype(np.float64) / 255.0
    patches = ink.reshape(B, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return patches.reshape(B, g * g, 3 * p * p)


class LayoutModel:
    """Forward passes over batches; parameters live in a ModelParams."""

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params
        S = config.S
        rel_1d = np.arange(S)[None, :] - np.arange(S)[:, None]
        self._bucket_1d = relative_position_bucket(rel_1d, config.rel_bias_buckets, S)
        # lookup table over center deltas in [-1000, 1000]
        self._bucket_2d_lut = relative_position_bucket(
            np.arange(-1000, 1001), config.rel_bias_buckets, 1000
        )
        K = config.rel_bias_buckets
        self._bucket_1d_scaled = self._bucket_1d * (K * K)

    # -- embedding stages -------------------------------------------------

    def text_embed(self, token_ids: np.ndarray, segment_ids: np.ndarray) -> Tensor:
        """t_i = TokEmb(w_i) + PosEmb1D(i) + SegEmb(s_i) for i in 0..L-1."""
        p = self.params
        L = token_ids.shape[1]
        pos = np.arange(L)
        out = ad.add(ad.embedding(p["tok_emb"], token_ids), ad.embedding(p["pos1d"], pos))
        return ad.add(out, ad.embedding(p["seg_emb"], segment_ids))

    def visual_embed(self, rasters: np.ndarray) -> Tensor:
        """v_i = Proj(patch_i) + PosEmb1D(i) + SegEmb(C), row-major grid order."""
        cfg, p = self.config, self.params
        if rasters.shape[1:] != (3, cfg.raster_size, cfg.raster_size):
            raise ValueError(
                f"raster shape {rasters.shape[1:]} != (3, {cfg.raster_size}, {cfg.raster_size})"
            )
        patches = _extract_patches(rasters, cfg)
        proj = ad.add(ad.matmul(Tensor(patches), p["vis_proj"]), p["vis_bias"])
        pos = np.arange(cfg.n_visual)
        seg = np.full(cfg.n_visual, SEG_VISUAL)
        return ad.add(proj, ad.add(ad.embedding(p["pos1d"], pos), ad.embedding(p["seg_emb"], seg)))

    def layout_embed(self, boxes: np.ndarray) -> Tensor:
        """l_i = Concat(x-rows for x_min,x_max,width; y-rows for y_min,y_max,height)."""
        p = self.params
        if boxes.min() < 0 or boxes.max() > 1000:
            raise IndexError("box coordinate outside [0, 1000]")
        x_min, x_max, y_min, y_max, width, height = (boxes[..., k] for k in range(6))
        parts = [
            ad.embedding(p["pos2d_x"], x_min),
            ad.embedding(p["pos2d_x"], x_max),
            ad.embedding(p["pos2d_x"], width),
            ad.embedding(p["pos2d_y"], y_min),
            ad.embedding(p["pos2d_y"], y_max),
            ad.embedding(p["pos2d_y"], height),
        ]
        return ad.concat(parts, axis=-1)

    def fuse(self, visual: Tensor, text: Tensor, layout: Tensor) -> Tensor:
        """x0 = [v_0..v_{WH-1}, t_0..t_{L-1}] + l, aligned with the concat order."""
        cfg = self.config
        if visual.shape[1] != cfg.n_visual or text.shape[1] != cfg.L:
            raise ValueError(
                f"fuse expects visual [B,{cfg.n_visual},d] and text [B,{cfg.L},d], "
                f"got {visual.shape} and {text.shape}"
            )
        joined = ad.concat([visual, text], axis=1)
        if layout.shape != joined.shape:
            raise ValueError(f"layout shape {layout.shape} != fused shape {joined.shape}")
        return ad.add(joined, layout)

    # -- encoder -----------------------------------------------------------

    def _bias_terms(self, all_boxes: np.ndarray):
        """One fused bias term: the per-head 1D-distance, 2D-x, and 2D-y
        tables are summed on a joint bucket alphabet so attention performs a
        single gather; gradients still separate cleanly per table."""
        cfg, p = self.config, self.params
        H, K = cfg.n_heads, cfg.rel_bias_buckets
        cx = (all_boxes[..., 0] + all_boxes[..., 1]) // 2  # [B, S]
        cy = (all_boxes[..., 2] + all_boxes[..., 3]) // 2
        bx = self._bucket_2d_lut[(cx[:, None, :] - cx[:, :, None]) + 1000]
        by = self._bucket_2d_lut[(cy[:, None, :] - cy[:, :, None]) + 1000]
        joint_idx = self._bucket_1d_scaled[None] + bx * K + by  # [B, S, S]
        joint_table = ad.reshape(
            ad.add(
                ad.add(
                    ad.reshape(p["bias_1d"], (H, K, 1, 1)),
                    ad.reshape(p["bias_2d_x"], (H, 1, K, 1)),
                ),
                ad.reshape(p["bias_2d_y"], (H, 1, 1, K)),
            ),
            (H, K * K * K),
        )
        return [(joint_table, joint_idx)]

    def encode(
        self,
        x0: Tensor,
        all_boxes: np.ndarray,
        dropout_rng: np.random.Generator | None = None,
        return_attention: bool = False,
    ):
        """Pre-LN transformer stack with spatially-aware attention biases."""
        cfg, p = self.config, self.params
        B, S, d = x0.shape
        H, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        bias_terms = self._bias_terms(all_boxes)
        weights = []
        x = x0
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            h = ad.layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            # project q/k/v separately by slicing the fused weight's columns;
            # the parameter stays one [d, 3d] matrix
            q, k, v = (
                ad.transpose(
                    ad.reshape(
                        ad.add(
                            ad.matmul(h, ad.narrow(p[pre + "qkv_w"], 1, part * d, d)),
                            ad.narrow(p[pre + "qkv_b"], 0, part * d, d),
                        ),
                        (B, S, H, hd),
                    ),
                    (0, 2, 1, 3),
                )
                for part in range(3)
            )
            attn = ad.attention(q, k, v, bias_terms, return_weights=return_attention)
            if return_attention:
                attn, w = attn
                weights.append(w)
            attn = ad.reshape(ad.transpose(attn, (0, 2, 1, 3)), (B, S, d))
            attn = ad.add(ad.matmul(attn, p[pre + "out_w"]), p[pre + "out_b"])
            attn = ad.dropout(attn, cfg.dropout, dropout_rng)
            x = ad.add(x, attn)
            h2 = ad.layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            h2 = ad.gelu(ad.add(ad.matmul(h2, p[pre + "ffn1_w"]), p[pre + "ffn1_b"]))
            h2 = ad.add(ad.matmul(h2, p[pre + "ffn2_w"]), p[pre + "ffn2_b"])
            h2 = ad.dropout(h2, cfg.dropout, dropout_rng)
            x = ad.add(x, h2)
        x = ad.layer_norm(x, p["final_ln_g"], p["final_ln_b"])
        if return_attention:
            return x, weights
        return x

    def classify(self, hidden: Tensor) -> Tensor:
        """Linear head over the text positions (sequence slots WH..WH+L-1)."""
        cfg, p = self.config, self.params
        text_part = ad.narrow(hidden, 1, cfg.n_visual, cfg.L)
        return ad.add(ad.matmul(text_part, p["cls_w"]), p["cls_b"])

    # -- end to end --------------------------------------------------------

    def forward(self, batch: Batch, dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Logits [B, L, n_classes] for a batch."""
        text = self.text_embed(batch.token_ids, batch.segment_ids)
        visual = self.visual_embed(batch.rasters)
        all_boxes = np.concatenate([batch.visual_boxes, batch.norm_boxes], axis=1)
        layout = self.layout_embed(all_boxes)
        x0 = self.fuse(visual, text, layout)
        hidden = self.encode(x0, all_boxes, dropout_rng=dropout_rng)
        return self.classify(hidden)

    def loss(self, logits: Tensor, batch: Batch) -> Tensor:
        B, L, C = logits.shape
        return ad.cross_entropy(
            ad.reshape(logits, (B * L, C)), batch.labels.reshape(-1), batch.loss_mask.reshape(-1)
        )

    def predict(self, batch: Batch) -> np.ndarray:
        """Per-position argmax class ids [B, L] (ties -> lowest index)."""
        with ad.no_grad():
            logits = self.forward(batch)
        return np.argmax(logits.data, axis=-1)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_CHECKPOINT_VERSION = "layouttag-checkpoint/1"


def save_checkpoint(path, config: ModelConfig, params: ModelParams, meta: dict | None = None) -> None:
    """Bit-exact parameter snapshot with config and arbitrary JSON metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": _CHECKPOINT_VERSION,
        "config": asdict(config),
        "param_names": params.names(),
        "meta": meta or {},
    }
    arrays = {f"p{i}": t.data for i, t in enumerate(params.tensors())}
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")  # canonical, rerun-stable
    np.savez(path, __meta__=np.frombuffer(blob, dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with np.load(path) as data:
        try:
            payload = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: malformed checkpoint metadata: {e}") from e
        if payload.get("version") != _CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {payload.get('version')!r} unsupported"
            )
        config = ModelConfig(**payload["config"])
        names = payload["param_names"]
        tensors = {}
        for i, name in enumerate(names):
            key = f"p{i}"
            if key not in data:
                raise CheckpointError(f"{path}: missing parameter array {name}")
            tensors[name] = Tensor(data[key].astype(np.float64), requires_grad=True)
    return config, ModelParams(tensors), payload["meta"]
