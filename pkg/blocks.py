"""
Trainable side chain over the frozen backbone.

Per layer i an Active Block turns the previous side state H_{i-1} into
query tokens F_i, and a Frozen Block cross-attends F_i to the backbone
activation X_i with layer i's pretrained weights, giving (f_att, f_mlp, h).
A Combine Block fuses the per-layer features into one token set, which is
mean-pooled into the sample embedding. Prototypes, the support-query
alignment step and the cosine classifier close the episode.

All trainable state lives in EfficientFSLParams as a flat name -> Tensor
map; the dataclasses below are views over it.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from archive import CorruptArchiveError, content_hash, read_archive, write_archive
from backbone import BackboneActivations, BackboneCheckpoint, LayerWeights, checkpoint_shapes, mlp, multi_head_attention
from episodes import SamplingError
from numerics import (
    DTYPES, RngState, ShapeError, TapeError, Tensor, cosine_similarity, gelu, layer_norm,
    softmax, stack, truncated_normal,
)
from schemas import AblationSpec, BackboneConfig, RunConfig, SideConfig, TrainConfig

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b'EFSLPRMS'
H0_STD = 0.02

BRANCH_FIELDS = {'att': 'f_att', 'mlp': 'f_mlp', 'h': 'h'}


# ============================================================
# BOTTLENECK
# ============================================================

@dataclass
class Bottleneck:
    """down-projection -> GELU -> up-projection, both affine with biases, no internal residual"""
    down_weight: Tensor
    down_bias: Tensor
    up_weight: Tensor
    up_bias: Tensor
    activation: Optional[Callable[[Tensor], Tensor]] = gelu

    def __call__(self, x: Tensor) -> Tensor:
        hidden = x @ self.down_weight + self.down_bias
        if self.activation is not None:
            hidden = self.activation(hidden)
        return hidden @ self.up_weight + self.up_bias

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], prefix: str) -> Optional['Bottleneck']:
        if prefix + 'down.weight' not in tensors:
            return None
        return cls(tensors[prefix + 'down.weight'], tensors[prefix + 'down.bias'],
                   tensors[prefix + 'up.weight'], tensors[prefix + 'up.bias'])

    @classmethod
    def identity(cls, d: int, dtype=np.float64) -> 'Bottleneck':
        """Exact identity map (r = d, identity weights, no nonlinearity); test mode only."""
        eye = np.eye(d, dtype=dtype)
        zero = np.zeros(d, dtype=dtype)
        return cls(Tensor(eye), Tensor(zero), Tensor(eye.copy()), Tensor(zero.copy()), activation=None)


def bottleneck_shapes(prefix: str, d_in: int, r: int, d_out: int) -> dict[str, tuple[int, ...]]:
    return {
        prefix + 'down.weight': (d_in, r),
        prefix + 'down.bias': (r,),
        prefix + 'up.weight': (r, d_out),
        prefix + 'up.bias': (d_out,),
    }


# ============================================================
# PARAMETER LAYOUT
# ============================================================

def param_shapes(backbone: BackboneConfig, side: SideConfig, ablation: AblationSpec) -> dict[str, tuple[int, ...]]:
    """Every trainable tensor for this configuration; disabled components are absent."""
    d, r, ra = backbone.embed_dim, side.bottleneck_dim, side.attn_bottleneck_dim
    m = side.num_tokens or backbone.num_tokens
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(backbone.num_layers):
        p = f'layers.{i}.'
        if ablation.prompts:
            shapes[p + 'prompt'] = (side.prompt_tokens, d)
        if ablation.proj:
            shapes.update(bottleneck_shapes(p + 'proj.', d, r, d))
        if ablation.active_attn:
            for head in ('q', 'k', 'v'):
                shapes.update(bottleneck_shapes(f'{p}attn.{head}.', d, ra, d))
        if ablation.active_mlp:
            shapes[p + 'ln.gamma'] = (d,)
            shapes[p + 'ln.beta'] = (d,)
            shapes.update(bottleneck_shapes(p + 'mlp.', d, r, d))
    if ablation.combine_block:
        shapes.update(bottleneck_shapes('combine.shared.', d, r, d))
        kn = len(ablation.branches()) * backbone.num_layers
        if ablation.combine_mode == 'conditional':
            shapes.update(bottleneck_shapes('combine.weight.', d, r, kn))
        elif ablation.combine_mode == 'fixed':
            shapes['combine.logits'] = (kn,)
    if ablation.sq_attention and ablation.sq_q_proj:
        shapes.update(bottleneck_shapes('sq.proj.', d, r, d))
    shapes['h0'] = (m, d)
    return shapes


PARAM_GROUPS = (
    ('prompts', lambda n: n.endswith('.prompt')),
    ('proj', lambda n: '.proj.' in n and n.startswith('layers.')),
    ('active_attn', lambda n: '.attn.' in n),
    ('ln', lambda n: '.ln.' in n),
    ('active_mlp', lambda n: '.mlp.' in n),
    ('combine_shared', lambda n: n.startswith('combine.shared.')),
    ('combine_weight', lambda n: n.startswith('combine.weight.') or n == 'combine.logits'),
    ('sq_proj', lambda n: n.startswith('sq.proj.')),
    ('h0', lambda n: n == 'h0'),
)


def param_group(name: str) -> str:
    for group, matches in PARAM_GROUPS:
        if matches(name):
            return group
    raise KeyError(f"parameter {name} belongs to no group")


# ============================================================
# PARAMETER VIEWS
# ============================================================

@dataclass(frozen=True)
class SideHyper:
    """Fixed per-run scalars; not trained"""
    xi: float = 0.1
    zeta: float = 0.1
    alpha: float = 0.1
    tau: float = 10.0
    sq_mode: str = 'softmax'

    @classmethod
    def from_train(cls, train: TrainConfig) -> 'SideHyper':
        return cls(train.xi, train.zeta, train.alpha, train.tau, train.sq_mode)


@dataclass
class ActiveBlockParams:
    # a [1, d] prompt broadcasts over all m side tokens; prompt_tokens=m gives a full [m, d] prompt
    prompt: Optional[Tensor] = None
    proj: Optional[Bottleneck] = None
    q: Optional[Bottleneck] = None
    k: Optional[Bottleneck] = None
    v: Optional[Bottleneck] = None
    ln_gamma: Optional[Tensor] = None
    ln_beta: Optional[Tensor] = None
    mlp: Optional[Bottleneck] = None
    xi: float = 0.1
    zeta: float = 0.1


@dataclass
class CombineParams:
    shared: Bottleneck
    weight_mlp: Optional[Bottleneck] = None
    logits: Optional[Tensor] = None
    mode: str = 'conditional'
    branches: tuple[str, ...] = ('att', 'mlp', 'h')


@dataclass
class SQParams:
    alpha: float = 0.1
    q_proj: Optional[Bottleneck] = None
    mode: str = 'softmax'
    enabled: bool = True


@dataclass
class LayerFeatures:
    f_att: Tensor
    f_mlp: Tensor
    h: Tensor


@dataclass
class EfficientFSLParams:
    backbone: BackboneConfig
    side: SideConfig
    ablation: AblationSpec
    hyper: SideHyper
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return self.backbone.num_layers

    @property
    def content_hash(self) -> str:
        return content_hash({name: t.data for name, t in self.tensors.items()})

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def num_elements(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def layer(self, i: int) -> ActiveBlockParams:
        p = f'layers.{i}.'
        t = self.tensors
        return ActiveBlockParams(
            prompt=t.get(p + 'prompt'),
            proj=Bottleneck.from_tensors(t, p + 'proj.'),
            q=Bottleneck.from_tensors(t, p + 'attn.q.'),
            k=Bottleneck.from_tensors(t, p + 'attn.k.'),
            v=Bottleneck.from_tensors(t, p + 'attn.v.'),
            ln_gamma=t.get(p + 'ln.gamma'),
            ln_beta=t.get(p + 'ln.beta'),
            mlp=Bottleneck.from_tensors(t, p + 'mlp.'),
            xi=self.hyper.xi,
            zeta=self.hyper.zeta,
        )

    def combine_params(self) -> Optional[CombineParams]:
        if not self.ablation.combine_block:
            return None
        return CombineParams(
            shared=Bottleneck.from_tensors(self.tensors, 'combine.shared.'),
            weight_mlp=Bottleneck.from_tensors(self.tensors, 'combine.weight.'),
            logits=self.tensors.get('combine.logits'),
            mode=self.ablation.combine_mode,
            branches=self.ablation.branches(),
        )

    def sq_params(self) -> SQParams:
        return SQParams(
            alpha=self.hyper.alpha,
            q_proj=Bottleneck.from_tensors(self.tensors, 'sq.proj.'),
            mode=self.hyper.sq_mode,
            enabled=self.ablation.sq_attention,
        )

    def clone(self) -> 'EfficientFSLParams':
        tensors = {name: t.copy() for name, t in self.tensors.items()}
        return EfficientFSLParams(self.backbone, self.side, self.ablation, self.hyper, tensors)

    def astype(self, dtype) -> 'EfficientFSLParams':
        tensors = {name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name)
                   for name, t in self.tensors.items()}
        return EfficientFSLParams(self.backbone, self.side, self.ablation, self.hyper, tensors)


def init_params(
    backbone: BackboneConfig,
    side: SideConfig,
    ablation: AblationSpec,
    hyper: SideHyper,
    rng: RngState,
    dtype=np.float32,
) -> EfficientFSLParams:
    """
    Truncated-normal weights (side.init_std), zero biases, unit LN gains.
    The proj up-projection starts at zero. Each tensor draws from its own
    named substream, so toggling one component never shifts another's init.
    """
    tensors = {}
    for name, shape in param_shapes(backbone, side, ablation).items():
        if name.endswith('.gamma'):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith('.bias') or name.endswith('.beta') or name == 'combine.logits':
            data = np.zeros(shape, dtype=dtype)
        elif '.proj.up.' in name and name.startswith('layers.'):
            data = np.zeros(shape, dtype=dtype)
        else:
            std = H0_STD if name == 'h0' else side.init_std
            data = truncated_normal(rng.child(name).generator(), shape, std, dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return EfficientFSLParams(backbone, side, ablation, hyper, tensors)


def init_params_for(config: RunConfig, ablation: Optional[AblationSpec] = None,
                    rng: Optional[RngState] = None) -> EfficientFSLParams:
    return init_params(
        config.backbone, config.side, ablation or AblationSpec(), SideHyper.from_train(config.train),
        rng or RngState(config.train.seed).child('side-init'), DTYPES[config.train.precision],
    )


# ============================================================
# PERSISTENCE
# ============================================================

def _model_metadata(prefix: str, model) -> dict[str, str]:
    out = {}
    for key, value in model.model_dump().items():
        text = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
        out[f'{prefix}.{key}'] = text
    return out


def _section(metadata: dict[str, str], prefix: str) -> dict[str, str]:
    return {key[len(prefix) + 1:]: value for key, value in metadata.items() if key.startswith(prefix + '.')}


def save_params(params: EfficientFSLParams, path) -> str:
    metadata = {}
    metadata.update(_model_metadata('backbone', params.backbone))
    metadata.update(_model_metadata('side', params.side))
    metadata.update(_model_metadata('ablation', params.ablation))
    for key, value in vars(params.hyper).items():
        metadata[f'hyper.{key}'] = repr(value) if isinstance(value, float) else str(value)
    metadata['content_hash'] = params.content_hash
    return write_archive(path, PARAMS_MAGIC, metadata, {name: t.data for name, t in params.tensors.items()})


def load_params(path) -> EfficientFSLParams:
    metadata, arrays = read_archive(path, PARAMS_MAGIC)
    backbone = BackboneConfig(**_section(metadata, 'backbone'))
    side = SideConfig(**_section(metadata, 'side'))
    ablation = AblationSpec(**_section(metadata, 'ablation'))
    raw = _section(metadata, 'hyper')
    hyper = SideHyper(float(raw['xi']), float(raw['zeta']), float(raw['alpha']), float(raw['tau']), raw['sq_mode'])

    expected = param_shapes(backbone, side, ablation)
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise ShapeError(f"{path}: parameter names do not match the stored configuration ({', '.join(missing[:5])})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ShapeError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    params = EfficientFSLParams(
        backbone, side, ablation, hyper,
        {name: Tensor(arrays[name], requires_grad=True, name=name) for name in expected},
    )
    if params.content_hash != metadata.get('content_hash'):
        raise CorruptArchiveError(f"{path}: tensor content hash does not match metadata")
    return params


# ============================================================
# BLOCKS
# ============================================================

def active_block(h_prev: Tensor, params: ActiveBlockParams) -> Tensor:
    """
    Z = Proj(H + P); Z' = xi * Att(Z) + Z; F = zeta * MLP(LN(Z')) + Z'.

    Disabled pieces fall back to identity: no prompt adds nothing, no proj
    passes H + P through, no attention or MLP skips that residual branch.
    """
    d = h_prev.shape[-1]
    z = h_prev
    if params.prompt is not None:
        if params.prompt.shape[-1] != d:
            raise ShapeError(f"active_block: prompt {params.prompt.shape} vs side state {h_prev.shape}")
        z = z + params.prompt
    if params.proj is not None:
        z = params.proj(z)
    if params.q is not None:
        q, k, v = params.q(z), params.k(z), params.v(z)
        weights = softmax((q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d)), axis=-1)
        z = (weights @ v) * params.xi + z
    if params.mlp is not None:
        z = params.mlp(layer_norm(z, params.ln_gamma, params.ln_beta)) * params.zeta + z
    return z


def frozen_block(
    f: Tensor,
    x: Tensor,
    layer: LayerWeights,
    num_heads: int,
    zero_attn: bool = False,
    zero_mlp: bool = False,
) -> LayerFeatures:
    """
    Cross-attention from side queries F_i [B, m, d] to backbone tokens X_i
    [B, T, d] through layer i's pretrained LN1/attention, then its LN2/MLP.

    f_att = Att(LN1(F), LN1(X)) + F; f_mlp = MLP(LN2(f_att)); h = f_mlp + f_att.
    `zero_attn` / `zero_mlp` force the respective branch output to zero.
    """
    if any(t.requires_grad for t in layer.tensors()):
        raise TapeError(f"frozen_block: layer {layer.index} weights are marked trainable")
    if f.shape[-1] != x.shape[-1]:
        raise ShapeError(f"frozen_block: query width {f.shape[-1]} vs backbone width {x.shape[-1]}")
    if zero_attn:
        f_att = f
    else:
        queries = layer_norm(f, layer.ln1_gamma, layer.ln1_beta)
        keys_values = layer_norm(x, layer.ln1_gamma, layer.ln1_beta)
        f_att = multi_head_attention(queries, keys_values, layer, num_heads) + f
    if zero_mlp:
        f_mlp = Tensor(np.zeros_like(f_att.data))
    else:
        f_mlp = mlp(layer_norm(f_att, layer.ln2_gamma, layer.ln2_beta), layer)
    return LayerFeatures(f_att=f_att, f_mlp=f_mlp, h=f_mlp + f_att)


def combine_inputs(features: list[LayerFeatures], branches: tuple[str, ...]) -> list[Tensor]:
    """Features in aggregation order: layer-major, then att / mlp / h."""
    return [getattr(lf, BRANCH_FIELDS[b]) for lf in features for b in branches]


def combine_weights(features: list[LayerFeatures], h_last: Tensor, params: CombineParams) -> Tensor:
    """[B, k*n] convex weights, one joint softmax over every enabled feature."""
    batch = h_last.shape[0]
    count = len(features) * len(params.branches)
    if params.mode == 'conditional':
        return softmax(params.weight_mlp(h_last.mean(axis=1)), axis=-1)
    if params.mode == 'fixed':
        return softmax(params.logits, axis=-1).reshape(1, count) + np.zeros((batch, count), dtype=h_last.dtype)
    return Tensor(np.full((batch, count), 1.0 / count, dtype=h_last.dtype))


def combine(features: list[LayerFeatures], params: CombineParams) -> Tensor:
    """sum_j w_j * shared_mlp(feature_j) over all k*n features -> [B, m, d]."""
    if not features:
        raise ShapeError("combine needs at least one layer of features")
    inputs = combine_inputs(features, params.branches)
    projected = stack([params.shared(f) for f in inputs], axis=1)
    weights = combine_weights(features, features[-1].h, params)
    b, count = weights.shape
    return (projected * weights.reshape(b, count, 1, 1)).sum(axis=1)


def run_side_chain(activations: BackboneActivations, params: EfficientFSLParams,
                   ckpt: BackboneCheckpoint) -> list[LayerFeatures]:
    if params.num_layers < 1:
        raise ShapeError("side chain needs at least one backbone layer")
    if len(activations) != params.num_layers:
        raise ShapeError(f"side chain has {params.num_layers} layers, backbone produced {len(activations)}")
    h0 = params.tensors['h0']
    batch = activations.batch_size
    h = h0.reshape(1, *h0.shape) + np.zeros((batch,) + h0.shape, dtype=h0.dtype)
    features = []
    for i, x in enumerate(activations.tokens):
        f = active_block(h, params.layer(i))
        lf = frozen_block(f, x, ckpt.layer(i), ckpt.config.num_heads)
        features.append(lf)
        h = lf.h
    return features


def extract_features(activations: BackboneActivations, params: EfficientFSLParams,
                     ckpt: BackboneCheckpoint) -> tuple[Tensor, list[LayerFeatures]]:
    """Sample embeddings [B, d] (token mean of the combined representation) and every layer's features."""
    features = run_side_chain(activations, params, ckpt)
    combine_cfg = params.combine_params()
    if combine_cfg is not None:
        tokens = combine(features, combine_cfg)
    else:
        tokens = features[-1].h
    return tokens.mean(axis=1), features


# ============================================================
# PROTOTYPES, ALIGNMENT, CLASSIFIER
# ============================================================

def compute_prototypes(support: Tensor, labels: np.ndarray, ways: Optional[int] = None) -> Tensor:
    """Per-class mean of support features; row c is episode class c."""
    labels = np.asarray(labels, dtype=np.int64)
    if support.ndim != 2 or labels.shape != (support.shape[0],):
        raise ShapeError(f"compute_prototypes: features {support.shape} vs labels {labels.shape}")
    ways = ways if ways is not None else int(labels.max()) + 1
    rows = []
    for c in range(ways):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            raise SamplingError(f"class {c} has no support features")
        rows.append(support[members].mean(axis=0))
    return stack(rows, axis=0)


def sq_attention(prototypes: Tensor, queries: Tensor, params: SQParams) -> Tensor:
    """
    Pull prototypes toward the query batch: A = S Proj(Q)^T,
    S_att = alpha * A Q + (1 - alpha) * S. Softmax mode scales A by 1/sqrt(d)
    and normalizes each row; raw mode uses the product as is.
    """
    if not params.enabled:
        return prototypes
    if prototypes.ndim != 2 or queries.ndim != 2 or prototypes.shape[-1] != queries.shape[-1]:
        raise ShapeError(f"sq_attention: prototypes {prototypes.shape} vs queries {queries.shape}")
    if queries.shape[0] == 0:
        raise ShapeError("sq_attention: empty query batch")
    projected = params.q_proj(queries) if params.q_proj is not None else queries
    affinity = prototypes @ projected.swapaxes(0, 1)
    if params.mode == 'softmax':
        affinity = softmax(affinity * (1.0 / math.sqrt(prototypes.shape[-1])), axis=-1)
    return (affinity @ queries) * params.alpha + prototypes * (1.0 - params.alpha)


def classify(queries: Tensor, prototypes: Tensor, tau: float) -> tuple[Tensor, np.ndarray]:
    """tau-scaled cosine logits [NQ, N]; predictions take the lowest index among tied maxima."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    nq, d = queries.shape
    n = prototypes.shape[0]
    logits = cosine_similarity(queries.reshape(nq, 1, d), prototypes.reshape(1, n, d)) * tau
    return logits, np.argmax(logits.data, axis=-1)


# ============================================================
# PARAMETER ACCOUNTING
# ============================================================

@dataclass
class ParamCount:
    trainable: int
    frozen: int
    breakdown: dict[str, int]

    @property
    def trainable_core(self) -> int:
        """Trainable total without the SQ projection and H_0."""
        return self.trainable - self.breakdown.get('sq_proj', 0) - self.breakdown.get('h0', 0)

    def as_dict(self) -> dict[str, int]:
        out = {'trainable': self.trainable, 'trainable_core': self.trainable_core, 'frozen': self.frozen}
        out.update({f'group.{k}': v for k, v in self.breakdown.items()})
        return out

    def to_text(self) -> str:
        values = self.as_dict()
        return ''.join(f"{key}={values[key]}\n" for key in sorted(values))


def count_params(config: RunConfig, ablation: Optional[AblationSpec] = None) -> ParamCount:
    """Exact element counts from tensor shapes; nothing is allocated."""
    breakdown = {group: 0 for group, _ in PARAM_GROUPS}
    for name, shape in param_shapes(config.backbone, config.side, ablation or AblationSpec()).items():
        breakdown[param_group(name)] += int(np.prod(shape))
    frozen = sum(int(np.prod(shape)) for shape in checkpoint_shapes(config.backbone).values())
    return ParamCount(trainable=sum(breakdown.values()), frozen=frozen, breakdown=breakdown)


def params_digest(params: EfficientFSLParams, ckpt: BackboneCheckpoint, config_hash: str) -> str:
    """Provenance over config, backbone and side-chain bytes."""
    h = hashlib.sha256()
    for part in (config_hash, ckpt.content_hash, params.content_hash):
        h.update(part.encode('utf-8'))
    return h.hexdigest()
