"""
Toy frozen Vision Transformer.

Pre-LN blocks (LN -> attention -> residual, LN -> MLP -> residual). The
activation of layer i is its output after the second residual; every
layer's activation is returned so the side chain can cross-attend to it.
Also holds supervised pretraining on the base split and the checkpoint
archive (magic b'EFSLBKBN').
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from archive import CorruptArchiveError, content_hash, read_archive, write_archive
from config import MICRO_BATCH
from episodes import ClassSplit, random_flip
from numerics import (
    RngState, ShapeError, Tensor, backward, concat, cross_entropy, gelu, is_grad_enabled,
    layer_norm, no_grad, softmax, truncated_normal,
)
from optim import AdamW, DivergenceError, clip_grad_norm, cosine_lr
from schemas import BackboneConfig, PretrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'EFSLBKBN'
INIT_STD = 0.02


# ============================================================
# CHECKPOINT
# ============================================================

def checkpoint_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor name and shape a checkpoint for `config` must hold, in archive order."""
    d, hidden = config.embed_dim, config.mlp_hidden
    shapes = {
        'patch_embed.weight': (config.patch_dim, d),
        'patch_embed.bias': (d,),
        'cls_token': (1, d),
        'pos_embed': (config.num_tokens, d),
    }
    for i in range(config.num_layers):
        p = f'layers.{i}.'
        shapes.update({
            p + 'ln1.gamma': (d,), p + 'ln1.beta': (d,),
            p + 'attn.q.weight': (d, d), p + 'attn.q.bias': (d,),
            p + 'attn.k.weight': (d, d), p + 'attn.k.bias': (d,),
            p + 'attn.v.weight': (d, d), p + 'attn.v.bias': (d,),
            p + 'attn.out.weight': (d, d), p + 'attn.out.bias': (d,),
            p + 'ln2.gamma': (d,), p + 'ln2.beta': (d,),
            p + 'mlp.fc1.weight': (d, hidden), p + 'mlp.fc1.bias': (hidden,),
            p + 'mlp.fc2.weight': (hidden, d), p + 'mlp.fc2.bias': (d,),
        })
    shapes.update({
        'norm.gamma': (d,),
        'norm.beta': (d,),
        'head.weight': (d, config.num_base_classes),
        'head.bias': (config.num_base_classes,),
    })
    return shapes


@dataclass
class LayerWeights:
    """Read-only view of one transformer layer inside a checkpoint"""
    index: int
    ln1_gamma: Tensor
    ln1_beta: Tensor
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, name) for name in self.__dataclass_fields__ if name != 'index']


@dataclass
class BackboneCheckpoint:
    config: BackboneConfig
    tensors: dict[str, Tensor]
    seed: int = 0

    @property
    def content_hash(self) -> str:
        return content_hash({name: t.data for name, t in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors['patch_embed.weight'].dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def validate(self, config: Optional[BackboneConfig] = None) -> None:
        """Raise ShapeError naming the first tensor that does not fit `config`."""
        expected = checkpoint_shapes(config or self.config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ShapeError(f"checkpoint is missing tensor {name}")
            if self.tensors[name].shape != shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {self.tensors[name].shape}, expected {shape}")
        extra = sorted(set(self.tensors) - set(expected))
        if extra:
            raise ShapeError(f"checkpoint has unexpected tensors: {', '.join(extra)}")

    def layer(self, i: int) -> LayerWeights:
        if not 0 <= i < self.config.num_layers:
            raise IndexError(f"layer index {i} out of range for {self.config.num_layers} layers")
        p = f'layers.{i}.'
        t = self.tensors
        return LayerWeights(
            index=i,
            ln1_gamma=t[p + 'ln1.gamma'], ln1_beta=t[p + 'ln1.beta'],
            q_weight=t[p + 'attn.q.weight'], q_bias=t[p + 'attn.q.bias'],
            k_weight=t[p + 'attn.k.weight'], k_bias=t[p + 'attn.k.bias'],
            v_weight=t[p + 'attn.v.weight'], v_bias=t[p + 'attn.v.bias'],
            out_weight=t[p + 'attn.out.weight'], out_bias=t[p + 'attn.out.bias'],
            ln2_gamma=t[p + 'ln2.gamma'], ln2_beta=t[p + 'ln2.beta'],
            fc1_weight=t[p + 'mlp.fc1.weight'], fc1_bias=t[p + 'mlp.fc1.bias'],
            fc2_weight=t[p + 'mlp.fc2.weight'], fc2_bias=t[p + 'mlp.fc2.bias'],
        )

    def encoder_tensors(self) -> dict[str, Tensor]:
        """Everything except the pretraining classifier head."""
        return {name: t for name, t in self.tensors.items() if not name.startswith('head.')}

    def num_elements(self, include_head: bool = True) -> int:
        source = self.tensors if include_head else self.encoder_tensors()
        return sum(t.size for t in source.values())

    def clone(self, trainable: bool = False, dtype=None) -> 'BackboneCheckpoint':
        """Deep copy; `trainable` marks every tensor as requiring gradients."""
        tensors = {}
        for name, t in self.tensors.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            tensors[name] = Tensor(data, requires_grad=trainable, name=name)
        return BackboneCheckpoint(self.config, tensors, self.seed)

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None


def init_checkpoint(config: BackboneConfig, rng: RngState, dtype=np.float32) -> BackboneCheckpoint:
    """Truncated-normal weights (std 0.02), zero biases, unit LN gains; one substream per tensor."""
    tensors = {}
    for name, shape in checkpoint_shapes(config).items():
        if name.endswith('.gamma'):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith('.bias') or name.endswith('.beta'):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = truncated_normal(rng.child(name).generator(), shape, INIT_STD, dtype)
        tensors[name] = Tensor(data, name=name)
    return BackboneCheckpoint(config, tensors, rng.seed)


def save_checkpoint(ckpt: BackboneCheckpoint, path) -> str:
    metadata = {f"backbone.{key}": str(value) for key, value in ckpt.config.model_dump().items()}
    metadata['seed'] = str(ckpt.seed)
    metadata['content_hash'] = ckpt.content_hash
    return write_archive(path, CHECKPOINT_MAGIC, metadata, {name: t.data for name, t in ckpt.tensors.items()})


def load_checkpoint(path) -> BackboneCheckpoint:
    metadata, arrays = read_archive(path, CHECKPOINT_MAGIC)
    config = BackboneConfig(**{key[len('backbone.'):]: value
                               for key, value in metadata.items() if key.startswith('backbone.')})
    ckpt = BackboneCheckpoint(
        config,
        {name: Tensor(array, name=name) for name, array in arrays.items()},
        int(metadata.get('seed', 0)),
    )
    if ckpt.content_hash != metadata.get('content_hash'):
        raise CorruptArchiveError(f"{path}: tensor content hash does not match metadata")
    ckpt.validate()
    logger.info(f"Loaded backbone checkpoint {path} ({ckpt.num_elements()} elements)")
    return ckpt


# ============================================================
# FORWARD
# ============================================================

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p], patches row-major, pixels channel-major."""
    b, c, h, w = images.shape
    p = patch_size
    grid = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return grid.reshape(b, (h // p) * (w // p), c * p * p)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return x @ weight + bias


def multi_head_attention(queries: Tensor, keys_values: Tensor, layer: LayerWeights,
                         num_heads: int) -> Tensor:
    """
    Scaled dot-product attention with the layer's projections.

    `queries` [B, M, d] and `keys_values` [B, T, d] must already be
    layer-normed; returns [B, M, d] after the output projection.
    """
    b, m, d = queries.shape
    t = keys_values.shape[1]
    if keys_values.shape[-1] != d:
        raise ShapeError(f"attention: query width {d} vs key/value width {keys_values.shape[-1]}")
    dh = d // num_heads

    def heads(x: Tensor, length: int) -> Tensor:
        return x.reshape(b, length, num_heads, dh).transpose(0, 2, 1, 3)

    q = heads(linear(queries, layer.q_weight, layer.q_bias), m)
    k = heads(linear(keys_values, layer.k_weight, layer.k_bias), t)
    v = heads(linear(keys_values, layer.v_weight, layer.v_bias), t)
    weights = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(b, m, d)
    return linear(mixed, layer.out_weight, layer.out_bias)


def mlp(x: Tensor, layer: LayerWeights) -> Tensor:
    return linear(gelu(linear(x, layer.fc1_weight, layer.fc1_bias)), layer.fc2_weight, layer.fc2_bias)


def transformer_layer(x: Tensor, layer: LayerWeights, num_heads: int) -> Tensor:
    normed = layer_norm(x, layer.ln1_gamma, layer.ln1_beta)
    x = x + multi_head_attention(normed, normed, layer, num_heads)
    return x + mlp(layer_norm(x, layer.ln2_gamma, layer.ln2_beta), layer)


@dataclass
class BackboneActivations:
    """Per-layer tokens X_1..X_n, each [B, T, d]"""
    tokens: list[Tensor]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def batch_size(self) -> int:
        return self.tokens[0].shape[0] if self.tokens else 0

    def digest(self) -> str:
        h = hashlib.sha256()
        for x in self.tokens:
            h.update(np.ascontiguousarray(x.data).tobytes())
        return h.hexdigest()


def _embed(images: np.ndarray, ckpt: BackboneCheckpoint) -> Tensor:
    config = ckpt.config
    patches = Tensor(patchify(images, config.patch_size).astype(ckpt.dtype, copy=False))
    x = linear(patches, ckpt['patch_embed.weight'], ckpt['patch_embed.bias'])
    cls = ckpt['cls_token'].reshape(1, 1, config.embed_dim) + np.zeros((len(images), 1, config.embed_dim), dtype=ckpt.dtype)
    return concat([cls, x], axis=1) + ckpt['pos_embed']


def _encode(images: np.ndarray, ckpt: BackboneCheckpoint) -> list[Tensor]:
    x = _embed(images, ckpt)
    tokens = []
    for i in range(ckpt.config.num_layers):
        x = transformer_layer(x, ckpt.layer(i), ckpt.config.num_heads)
        tokens.append(x)
    return tokens


def backbone_forward(images, ckpt: BackboneCheckpoint, micro_batch: Optional[int] = MICRO_BATCH) -> BackboneActivations:
    """
    Run the ViT over `images` [B, C, H, W] in micro-batches.

    Nothing is taped unless the checkpoint itself holds trainable tensors
    (full fine-tuning); a frozen checkpoint can never receive a gradient.
    """
    images = np.asarray(images.data if isinstance(images, Tensor) else images)
    config = ckpt.config
    expected = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"backbone_forward: images {images.shape} do not match [B, {expected[0]}, {expected[1]}, {expected[2]}]")

    trainable = is_grad_enabled() and any(t.requires_grad for t in ckpt.tensors.values())
    step = micro_batch if micro_batch and micro_batch > 0 else max(len(images), 1)

    def run() -> list[list[Tensor]]:
        return [_encode(images[start:start + step], ckpt) for start in range(0, len(images), step)]

    if trainable:
        chunks = run()
    else:
        with no_grad():
            chunks = run()
    if len(chunks) == 1:
        return BackboneActivations(chunks[0])
    return BackboneActivations([concat([c[i] for c in chunks], axis=0) for i in range(config.num_layers)])


def classifier_logits(activations: BackboneActivations, ckpt: BackboneCheckpoint) -> Tensor:
    """Final LN on the class token of the last layer, then the pretraining head."""
    last = activations.tokens[-1]
    cls = last[:, 0, :]
    return linear(layer_norm(cls, ckpt['norm.gamma'], ckpt['norm.beta']), ckpt['head.weight'], ckpt['head.bias'])


# ============================================================
# PRETRAINING
# ============================================================

def classification_accuracy(ckpt: BackboneCheckpoint, images: np.ndarray, labels: np.ndarray) -> float:
    correct = 0
    with no_grad():
        for start in range(0, len(images), MICRO_BATCH):
            acts = backbone_forward(images[start:start + MICRO_BATCH], ckpt)
            predicted = np.argmax(classifier_logits(acts, ckpt).data, axis=-1)
            correct += int(np.sum(predicted == labels[start:start + MICRO_BATCH]))
    return correct / max(len(images), 1)


def pretrain_backbone(
    split: ClassSplit,
    config: BackboneConfig,
    settings: PretrainConfig,
    rng: RngState,
) -> tuple[BackboneCheckpoint, float]:
    """
    Supervised cross-entropy training of the whole toy ViT on the base split.

    Returns the frozen checkpoint and its train accuracy on the split.
    epochs=0 returns the initialization.
    """
    if len(split) != config.num_base_classes:
        raise ShapeError(f"base split has {len(split)} classes, backbone head expects {config.num_base_classes}")
    indices = split.indices()
    images = split.dataset.images[indices]
    remap = {c: i for i, c in enumerate(split.class_ids)}
    labels = np.array([remap[int(c)] for c in split.dataset.labels[indices]], dtype=np.int64)

    ckpt = init_checkpoint(config, rng.child('init'))
    for t in ckpt.tensors.values():
        t.requires_grad = True
    optimizer = AdamW(ckpt.tensors, lr=settings.lr, weight_decay=settings.weight_decay)

    steps_per_epoch = math.ceil(len(images) / settings.batch_size)
    total_steps = settings.epochs * steps_per_epoch
    shuffle = rng.child('shuffle').generator()
    flips = rng.child('flip').generator()
    step = 0
    for epoch in range(settings.epochs):
        order = shuffle.permutation(len(images))
        running = 0.0
        for start in range(0, len(order), settings.batch_size):
            batch = order[start:start + settings.batch_size]
            x = images[batch]
            if settings.flip:
                x = random_flip(x, flips)
            optimizer.lr = cosine_lr(step, total_steps, settings.lr)
            optimizer.zero_grad()
            loss = cross_entropy(classifier_logits(backbone_forward(x, ckpt, micro_batch=None), ckpt), labels[batch])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"pretraining loss became {value} at epoch {epoch}, step {step}")
            backward(loss, leaves=ckpt.tensors.values())
            clip_grad_norm(ckpt.tensors.values(), 1.0)
            optimizer.step()
            running += value
            step += 1
        logger.info(f"Pretrain epoch {epoch + 1}/{settings.epochs}: mean loss {running / steps_per_epoch:.4f}")

    ckpt.freeze()
    accuracy = classification_accuracy(ckpt, images, labels)
    logger.info(f"Backbone base-split train accuracy {accuracy * 100:.2f}% ({ckpt.content_hash[:12]})")
    return ckpt, accuracy
