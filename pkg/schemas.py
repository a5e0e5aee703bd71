"""
Pydantic schemas for run configuration and reports.
These define the exact structure a config file (dotenv grammar, dotted keys)
must follow, and the canonical text every report is written as.
"""

import hashlib
from pathlib import Path
from typing import Literal

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from numerics import EFSLError


class ConfigError(EFSLError):
    """Config file or override cannot be turned into a RunConfig"""


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(',') if item.strip()]
    return value


# ============================================================
# MODEL SECTIONS
# ============================================================

class BackboneConfig(_Section):
    """Toy Vision Transformer shape"""
    image_size: int = Field(default=32, ge=1, description="Input height/width in pixels")
    patch_size: int = Field(default=4, ge=1, description="Square patch side in pixels")
    channels: int = Field(default=3, ge=1, description="Image channels")
    embed_dim: int = Field(default=64, ge=1, description="Token width d")
    num_layers: int = Field(default=6, ge=0, description="Transformer layers n")
    num_heads: int = Field(default=4, ge=1, description="Attention heads")
    mlp_ratio: float = Field(default=4.0, gt=0, description="MLP hidden width as a multiple of d")
    num_base_classes: int = Field(
        default=0,
        ge=0,
        description="Pretraining classes; 0 derives the count from the base split"
    )

    @model_validator(mode='after')
    def _check_divisibility(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


class SideConfig(_Section):
    """Trainable side-chain widths"""
    bottleneck_dim: int = Field(default=48, ge=1, description="Hidden width r of every bottleneck projection")
    attn_bottleneck_dim: int = Field(default=8, ge=1, description="Hidden width r_a of the Q/K/V bottlenecks")
    num_tokens: int = Field(default=0, ge=0, description="Side tokens m; 0 matches the backbone token count")
    prompt_tokens: int = Field(default=1, ge=1, description="Rows of each prompt P_i: 1 (broadcast) or m")
    init_std: float = Field(default=0.02, gt=0, description="Truncated-normal std for side-chain weights")


# ============================================================
# DATA SECTIONS
# ============================================================

class SyntheticDatasetSpec(_Section):
    """Shapes-on-noise dataset; class identity lives only in the class factors"""
    num_classes: int = Field(default=40, ge=1, le=160, description="Classes (shape x hue band x texture)")
    images_per_class: int = Field(default=200, ge=1)
    image_size: int = Field(default=32, ge=4, description="Stored size after the center crop")
    render_size: int = Field(default=40, ge=4, description="Rendered size before the center crop")
    channels: int = Field(default=3, ge=3, le=3, description="RGB only")
    noise_level: float = Field(default=0.1, ge=0, le=1, description="Max background noise amplitude")
    position_jitter: float = Field(default=0.15, ge=0, le=0.5, description="Max centre offset as a fraction of size")
    scale_jitter: float = Field(default=0.2, ge=0, lt=1, description="Relative shape size jitter")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode='after')
    def _check_crop(self):
        if self.render_size < self.image_size:
            raise ValueError("render_size must be at least image_size")
        return self


class DataConfig(SyntheticDatasetSpec):
    base_fraction: float = Field(default=0.75, gt=0, lt=1, description="Share of classes used for meta-training")
    split_seed: int = Field(default=1, ge=0)

    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(**self.model_dump(exclude={'base_fraction', 'split_seed'}))

    @property
    def num_base_classes(self) -> int:
        return int(round(self.num_classes * self.base_fraction))


class EpisodeSpec(_Section):
    """N-way K-shot task shape"""
    ways: int = Field(default=5, ge=2, description="N")
    shots: int = Field(default=1, ge=1, description="K")
    queries: int = Field(default=15, ge=1, description="Q per class")


# ============================================================
# TRAINING SECTIONS
# ============================================================

class TrainConfig(_Section):
    epochs: int = Field(default=5, ge=0)
    episodes_per_epoch: int = Field(default=200, ge=1)
    ways: int = Field(default=0, ge=0, description="Meta-training N; 0 matches episode.ways")
    lr: float = Field(default=1e-4, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    clip_norm: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)
    xi: float = Field(default=0.1, ge=0, le=1, description="Active-Block attention scale")
    zeta: float = Field(default=0.1, ge=0, le=1, description="Active-Block MLP scale")
    alpha: float = Field(default=0.1, ge=0, le=1, description="SQ attention mixing weight")
    tau: float = Field(default=10.0, gt=0, description="Cosine logit temperature")
    sq_mode: Literal['softmax', 'raw'] = 'softmax'
    precision: Literal['float32', 'float64'] = 'float32'

    @property
    def total_steps(self) -> int:
        return self.epochs * self.episodes_per_epoch


class PretrainConfig(_Section):
    epochs: int = Field(default=10, ge=0)
    lr: float = Field(default=1e-3, ge=0)
    batch_size: int = Field(default=64, ge=1)
    weight_decay: float = Field(default=0.05, ge=0)
    seed: int = Field(default=0, ge=0)
    flip: bool = Field(default=True, description="Random horizontal flip")


class EvalConfig(_Section):
    episodes: int = Field(default=320, ge=1)
    seed: int = Field(default=2024, ge=0)
    workers: int = Field(default=1, ge=1)
    baseline: Literal['none', 'frozen_pn', 'full_finetune'] = 'none'
    sq_attention: bool = Field(default=True, description="Apply support-query alignment when evaluating saved params")


class AblationSpec(_Section):
    """Component toggles; every toggle applies independently"""
    proj: bool = True
    active_attn: bool = True
    active_mlp: bool = True
    prompts: bool = True
    combine_block: bool = True
    f_att_branch: bool = True
    f_mlp_branch: bool = True
    h_branch: bool = True
    sq_attention: bool = True
    sq_q_proj: bool = True
    combine_mode: Literal['conditional', 'fixed', 'average'] = 'conditional'

    @model_validator(mode='after')
    def _check_branches(self):
        if self.combine_block and not self.branches():
            raise ValueError("combine block needs at least one feature branch")
        return self

    def branches(self) -> tuple[str, ...]:
        enabled = (('att', self.f_att_branch), ('mlp', self.f_mlp_branch), ('h', self.h_branch))
        return tuple(name for name, on in enabled if on)


class AblationConfig(_Section):
    rows: list[str] = Field(default_factory=list, description="Preset names, comma separated")
    shots: list[int] = Field(default_factory=lambda: [1, 5], description="Evaluation shots per row")
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], description="Training seeds for the seed sweep")

    @field_validator('rows', 'shots', 'seeds', mode='before')
    @classmethod
    def _split_rows(cls, value):
        return _split_list(value)


class PathsConfig(_Section):
    dataset: str = Field(default='', description="Dataset container; empty means <out>/dataset.bin")
    backbone: str = Field(default='', description="Backbone checkpoint; empty means <out>/backbone.ckpt")
    params: str = Field(default='', description="Side-chain params; empty means <out>/params.efsl")


# ============================================================
# RUN CONFIG
# ============================================================

SECTIONS = ('backbone', 'side', 'data', 'episode', 'train', 'pretrain', 'eval', 'ablation', 'paths')


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ','.join(_format_value(v) for v in value)
    return str(value)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    side: SideConfig = Field(default_factory=SideConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    episode: EpisodeSpec = Field(default_factory=EpisodeSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode='after')
    def _materialize_derived(self):
        if self.backbone.num_base_classes == 0:
            self.backbone.num_base_classes = self.data.num_base_classes
        if self.side.num_tokens == 0:
            self.side.num_tokens = self.backbone.num_tokens
        if self.side.prompt_tokens not in (1, self.side.num_tokens):
            raise ValueError(
                f"side.prompt_tokens must be 1 or side.num_tokens ({self.side.num_tokens}), "
                f"got {self.side.prompt_tokens}"
            )
        if self.backbone.channels != self.data.channels or self.backbone.image_size != self.data.image_size:
            raise ValueError("backbone image_size/channels must match the dataset")
        return self

    # --- flat dotted-key form ---

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> 'RunConfig':
        nested: dict[str, dict] = {}
        for key, value in flat.items():
            if value is None:
                raise ConfigError(f"key '{key}' has no value")
            section, dot, field = key.partition('.')
            if not dot or not field or '.' in field:
                raise ConfigError(f"key '{key}' must look like section.field")
            if section not in SECTIONS:
                raise ConfigError(f"unknown section '{section}' in key '{key}'")
            nested.setdefault(section, {})[field] = value
        return cls(**nested)

    def to_flat(self) -> dict[str, str]:
        flat = {}
        for section in SECTIONS:
            for field, value in getattr(self, section).model_dump().items():
                flat[f"{section}.{field}"] = _format_value(value)
        return flat

    def to_text(self) -> str:
        flat = self.to_flat()
        return ''.join(f"{key}={flat[key]}\n" for key in sorted(flat))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()


def load_run_config(path: str | None, overrides: list[str] | None = None) -> tuple[RunConfig, list[tuple[str, str]]]:
    """
    Parse a dotenv-style config file, apply `key=value` overrides in order
    (last writer wins) and validate. Returns the config and applied overrides.
    """
    flat: dict[str, str] = {}
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        flat.update(dotenv_values(path, interpolate=False))
    applied = []
    for item in overrides or []:
        key, eq, value = item.partition('=')
        if not eq or not key.strip():
            raise ConfigError(f"override '{item}' must look like key=value")
        flat[key.strip()] = value.strip()
        applied.append((key.strip(), value.strip()))
    return RunConfig.from_flat(flat), applied


# ============================================================
# REPORTS
# ============================================================

class MetricsReport(BaseModel):
    """Per-run accuracy, 95% CI, loss curve and parameter accounting"""
    label: str = Field(description="Method or ablation row name")
    accuracy_mean: float = Field(default=0.0, description="Mean episode accuracy in percent")
    ci95: float = Field(default=0.0, ge=0, description="1.96 * sample std / sqrt(E), percent")
    episodes: int = Field(default=0, ge=0, description="E")
    loss_curve: list[float] = Field(default_factory=list)
    param_counts: dict[str, int] = Field(default_factory=dict)
    wall_time: float = Field(default=0.0, ge=0, description="Seconds; kept out of the canonical text")
    config_hash: str = ''
    provenance: str = Field(default='', description="Hash over config, backbone and parameters")
    episode_digest: str = Field(default='', description="Hash over the evaluated episode stream")

    def to_text(self, include_timing: bool = False) -> str:
        lines = [
            f"label={self.label}",
            f"accuracy_mean={self.accuracy_mean:.2f}",
            f"ci95={self.ci95:.2f}",
            f"episodes={self.episodes}",
            f"loss_steps={len(self.loss_curve)}",
            f"loss_curve={','.join(f'{v:.6f}' for v in self.loss_curve)}",
        ]
        lines += [f"params.{key}={self.param_counts[key]}" for key in sorted(self.param_counts)]
        lines += [
            f"config_hash={self.config_hash}",
            f"provenance={self.provenance}",
            f"episode_digest={self.episode_digest}",
        ]
        if include_timing:
            lines.append(f"wall_time={self.wall_time:.3f}")
        return '\n'.join(lines) + '\n'
