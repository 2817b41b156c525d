"""Minimal vision transformer hosting token expansion after one block."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .nn import Block, LayerNorm, Linear, ParameterStore, trunc_normal
from .pipeline import PipelineConfig, merge, select
from .schedule import GrowthSchedule, current_stage
from .tokens import IndexSet, TokenSet

CHECKPOINT_MAGIC = int.from_bytes(b"TOEckpt\0", "little")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 1
    depth: int = 2
    dim: int = 32
    heads: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 10
    toe: Optional[PipelineConfig] = None

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.toe is not None and self.toe.apply_after_block >= self.depth:
            raise ValueError(f"apply_after_block={self.toe.apply_after_block} must be < depth={self.depth}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.toe is not None:
            toe = out["toe"]
            toe["metric"] = self.toe.metric.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        toe = data.pop("toe", None)
        if toe is not None:
            toe = dict(toe)
            toe["schedule"] = GrowthSchedule(**{k: v for k, v in toe["schedule"].items() if k != "initial_rate"})
            toe = PipelineConfig(**toe)
        return cls(toe=toe, **data)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p], row-major over patches."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class TokenReduction:
    """Per-sample selection + merge as a differentiable gather/mean.

    Selection and assignment are index decisions taken in the forward pass;
    gradients flow back only through the gather and the group mean.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self._cache = None
        self._last = None
        self._frozen = None
        self.selected: list[IndexSet] = []

    def freeze(self) -> None:
        """Reuse the last selection and assignment in later forward passes.

        Used by finite-difference checks, where a perturbation must not flip
        the piecewise-constant index decisions.
        """
        if self._last is None:
            raise RuntimeError("nothing to freeze: run a forward pass first")
        self._frozen = self._last

    def unfreeze(self) -> None:
        self._frozen = None

    def _forward_frozen(self, x: np.ndarray) -> np.ndarray:
        owners, counts, n = self._frozen
        b, _, d = x.shape
        out = np.zeros((b, counts.shape[1], d), dtype=x.dtype)
        batch_idx, tok_idx = np.nonzero(owners >= 0)
        np.add.at(out, (batch_idx, owners[batch_idx, tok_idx]), x[batch_idx, tok_idx])
        self._cache = self._frozen
        return out / counts[:, :, None]

    def forward(self, x: np.ndarray, iteration: int, total: int) -> np.ndarray:
        if self._frozen is not None:
            return self._forward_frozen(x)
        b, n, _ = x.shape
        stage = current_stage(iteration, total, self.config.schedule).stage
        rows, owners, counts, selected = [], [], [], []
        rng = np.random.default_rng([self.config.seed, iteration]) if self._needs_rng() else None
        for i in range(b):
            tokens = TokenSet(x[i])
            state = select(tokens, self.config, stage, rng=rng)
            sel = state.selected.zero_based()
            owner = np.full(n, -1, dtype=np.int64)
            owner[sel] = np.arange(sel.size)
            if self.config.merge:
                merged, assignment = merge(state, self.config.metric)
                for pos, a in assignment.owner.items():
                    owner[pos - 1] = owner[a - 1]
                rows.append(merged.data)
            else:
                rows.append(x[i, sel])
            counts.append(np.bincount(owner[owner >= 0], minlength=sel.size))
            owners.append(owner)
            selected.append(state.selected)
        self._cache = self._last = (np.stack(owners), np.stack(counts).astype(x.dtype), n)
        self.selected = selected
        return np.stack(rows).astype(x.dtype, copy=False)

    def _needs_rng(self) -> bool:
        return self.config.init_mode == "random" or not self.config.expand

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("token reduction: backward called without a preceding forward")
        owners, counts, n = self._cache
        self._cache = None
        scaled = dy / counts[:, :, None]
        b = dy.shape[0]
        dx = np.zeros((b, n, dy.shape[2]), dtype=dy.dtype)
        batch_idx, tok_idx = np.nonzero(owners >= 0)
        dx[batch_idx, tok_idx] = scaled[batch_idx, owners[batch_idx, tok_idx]]
        return dx


class TinyViT:
    """Patch embedding, pre-norm blocks and a class-token head.

    Weights are truncated-normal (std 0.02, cut at 2 std); biases zero;
    LayerNorm scale one.  The class token sits at position 1.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = ParameterStore()
        d = config.dim
        self.patch_embed = Linear(self.params, "patch_embed", config.patch_dim, d, rng, dtype)
        self.params.add("cls_token", trunc_normal(rng, (1, 1, d)).astype(dtype))
        self.params.add("pos_embed", trunc_normal(rng, (1, config.num_tokens, d)).astype(dtype))
        self.blocks = [Block(self.params, f"blocks.{i}", d, config.heads, config.mlp_ratio, rng, dtype) for i in range(config.depth)]
        self.norm = LayerNorm(self.params, "norm", d, dtype=dtype)
        self.head = Linear(self.params, "head", d, config.num_classes, rng, dtype)
        self.reduction = TokenReduction(config.toe) if config.toe is not None else None
        self._trace = None
        self.active_tokens = config.num_tokens
        self.block_tokens: list[int] = []

    # -- forward / backward ---------------------------------------------
    def forward(self, images: np.ndarray, mode: str = "train", iteration: int | None = None, total: int | None = None) -> np.ndarray:
        cfg = self.config
        images = np.asarray(images, dtype=self.dtype)
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ValueError(f"expected images of shape [B, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        use_toe = mode == "train" and self.reduction is not None
        if use_toe and (iteration is None or total is None):
            raise ValueError("train-mode forward with token expansion needs iteration and total")

        b = images.shape[0]
        x = self.patch_embed.forward(patchify(images, cfg.patch_size))
        cls = np.broadcast_to(self.params["cls_token"], (b, 1, cfg.dim))
        x = np.concatenate([cls, x], axis=1) + self.params["pos_embed"]

        apply_at = cfg.toe.apply_after_block if use_toe else None
        self.block_tokens = []
        if apply_at == 0:
            x = self.reduction.forward(x, iteration, total)
        for i, block in enumerate(self.blocks, start=1):
            self.block_tokens.append(x.shape[1])
            x = block.forward(x)
            if apply_at == i:
                x = self.reduction.forward(x, iteration, total)
        self.active_tokens = x.shape[1]

        restore = use_toe and cfg.toe.restore_indices
        if restore:
            padded = np.zeros((b, cfg.num_tokens, cfg.dim), dtype=x.dtype)
            for i, sel in enumerate(self.reduction.selected):
                padded[i, sel.zero_based()] = x[i]
            x = padded
        self.last_tokens = x
        logits = self.head.forward(self.norm.forward(x[:, 0]))
        self._trace = (apply_at, restore, x.shape)
        return logits

    def backward(self, grad_logits: np.ndarray) -> None:
        """Accumulate parameter gradients for the last forward pass."""
        if self._trace is None:
            raise RuntimeError("backward called without a preceding forward")
        apply_at, restore, shape = self._trace
        self._trace = None
        dcls = self.norm.backward(self.head.backward(grad_logits))
        dx = np.zeros(shape, dtype=dcls.dtype)
        dx[:, 0] = dcls
        if restore:
            dx = np.stack([dx[i, sel.zero_based()] for i, sel in enumerate(self.reduction.selected)])
        for i in range(len(self.blocks), 0, -1):
            if apply_at == i:
                dx = self.reduction.backward(dx)
            dx = self.blocks[i - 1].backward(dx)
        if apply_at == 0:
            dx = self.reduction.backward(dx)
        self.params.grads["pos_embed"][...] += dx.sum(axis=0, keepdims=True)
        self.params.grads["cls_token"][...] += dx[:, :1].sum(axis=0, keepdims=True)
        self.patch_embed.backward(dx[:, 1:])

    def attention_maps(self) -> list[np.ndarray]:
        return [blk.attn.last_probs for blk in self.blocks]

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for start in range(0, len(images), batch_size):
            out.append(np.argmax(self.forward(images[start:start + batch_size], mode="eval"), axis=1))
            self._trace = None
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- checkpoints ------------------------------------------------------
    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.config, self.params)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TinyViT":
        config, values = load_checkpoint(path)
        model = cls(config)
        model.params.load(values)
        return model


def save_checkpoint(path: Union[str, Path], config: ModelConfig, params: ParameterStore) -> None:
    """Little-endian layout: magic, version, config length (int64), config JSON,
    parameter count, then per parameter: name length, name, ndim, dims, float64 data."""
    meta = json.dumps(config.to_dict(), sort_keys=True).encode()
    parts = [struct.pack("<3q", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)), meta, struct.pack("<q", len(params))]
    for name in sorted(params.params):
        value = params.params[name]
        encoded = name.encode()
        parts.append(struct.pack("<q", len(encoded)) + encoded)
        parts.append(struct.pack(f"<{1 + value.ndim}q", value.ndim, *value.shape))
        parts.append(value.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    magic, version, meta_len = struct.unpack_from("<3q", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 24
    config = ModelConfig.from_dict(json.loads(raw[off:off + meta_len]))
    off += meta_len
    (count,) = struct.unpack_from("<q", raw, off)
    off += 8
    values = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<q", raw, off)
        off += 8
        name = raw[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<q", raw, off)
        shape = struct.unpack_from(f"<{ndim}q", raw, off + 8)
        off += 8 * (1 + ndim)
        size = int(np.prod(shape, dtype=np.int64))
        values[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return config, values
