"""
Episodic meta-training and evaluation.

One optimizer step per episode (AdamW, cosine schedule, global-norm
clipping). Evaluation fans episodes out over a thread pool; episode i always
draws from substream i and results are reduced in index order, so reports do
not depend on the worker count.
"""

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

import run_logger
from backbone import BackboneCheckpoint, backbone_forward
from blocks import (
    EfficientFSLParams, SQParams, classify, compute_prototypes, count_params, extract_features,
    init_params_for, params_digest, save_params, sq_attention,
)
from episodes import ClassSplit, Episode, sample_episode
from numerics import DTYPES, EFSLError, NonFiniteError, RngState, Tensor, backward, cross_entropy, no_grad
from optim import AdamW, DivergenceError, clip_grad_norm, cosine_lr
from schemas import AblationSpec, EpisodeSpec, MetricsReport, RunConfig

logger = logging.getLogger(__name__)

CI_Z = 1.96

Embedder = Callable[[np.ndarray], Tensor]


class FrozenBackboneError(EFSLError):
    """Backbone bytes changed during side-chain training"""


# ============================================================
# EPISODE FORWARD
# ============================================================

@dataclass
class EpisodeOutput:
    support: Tensor
    query: Tensor
    prototypes: Tensor
    sq_prototypes: Tensor
    logits: Tensor
    predictions: np.ndarray
    loss: Tensor

    def accuracy(self, labels: np.ndarray) -> float:
        return float(np.mean(self.predictions == labels))


def efficientfsl_embedder(params: EfficientFSLParams, ckpt: BackboneCheckpoint) -> Embedder:
    def embed(images: np.ndarray) -> Tensor:
        features, _ = extract_features(backbone_forward(images, ckpt), params, ckpt)
        return features
    return embed


def backbone_embedder(ckpt: BackboneCheckpoint) -> Embedder:
    """Final-layer tokens of the backbone, mean-pooled."""
    def embed(images: np.ndarray) -> Tensor:
        return backbone_forward(images, ckpt).tokens[-1].mean(axis=1)
    return embed


def episode_forward(embed: Embedder, episode: Episode, sq: Optional[SQParams], tau: float) -> EpisodeOutput:
    """Support and query go through the embedder as one batch; then prototypes, alignment, cosine head."""
    n_support = len(episode.support_labels)
    images = np.concatenate([episode.support_images, episode.query_images], axis=0)
    features = embed(images)
    support = features[:n_support]
    query = features[n_support:]
    prototypes = compute_prototypes(support, episode.support_labels, episode.ways)
    aligned = sq_attention(prototypes, query, sq) if sq is not None else prototypes
    logits, predictions = classify(query, aligned, tau)
    loss = cross_entropy(logits, episode.query_labels)
    return EpisodeOutput(support, query, prototypes, aligned, logits, predictions, loss)


def episode_loss(params: EfficientFSLParams, ckpt: BackboneCheckpoint, episode: Episode) -> Tensor:
    """Mean query cross-entropy of one episode; the scalar every gradient check differentiates."""
    embed = efficientfsl_embedder(params, ckpt)
    return episode_forward(embed, episode, params.sq_params(), params.hyper.tau).loss


def summarize_accuracies(accuracies) -> tuple[float, float]:
    """(mean %, 1.96 * sample std / sqrt(E) %); the interval is 0 for a single episode."""
    values = np.asarray(accuracies, dtype=np.float64) * 100.0
    if values.size == 0:
        return 0.0, 0.0
    mean = float(values.mean())
    if values.size < 2:
        return mean, 0.0
    return mean, float(CI_Z * values.std(ddof=1) / math.sqrt(values.size))


def stream_digest(digests: list[str]) -> str:
    h = hashlib.sha256()
    for digest in digests:
        h.update(digest.encode('utf-8'))
    return h.hexdigest()


def training_episode_spec(config: RunConfig) -> EpisodeSpec:
    return config.episode.model_copy(update={'ways': config.train.ways or config.episode.ways})


def eval_stream(config: RunConfig) -> RngState:
    """Evaluation episodes depend on eval.seed only, never on training state."""
    return RngState(config.eval.seed).child('eval-episodes')


# ============================================================
# META-TRAINING
# ============================================================

@dataclass
class TrainOutcome:
    loss_curve: list[float]
    accuracies: list[float]
    digests: list[str]
    wall_time: float


def _meta_train(
    label: str,
    trainable: dict[str, Tensor],
    make_embedder: Callable[[], Embedder],
    sq: Callable[[], Optional[SQParams]],
    tau: float,
    split: ClassSplit,
    config: RunConfig,
    on_divergence: Callable[[dict[str, np.ndarray]], None],
) -> TrainOutcome:
    """
    One AdamW step per sampled episode. On a non-finite loss or a non-finite
    weight after a step, `on_divergence` receives the last all-finite weights
    and DivergenceError is raised.
    """
    settings = config.train
    spec = training_episode_spec(config)
    optimizer = AdamW(trainable, lr=settings.lr, betas=(settings.beta1, settings.beta2),
                      eps=settings.eps, weight_decay=settings.weight_decay)
    stream = RngState(settings.seed).child('train-episodes')
    total = settings.total_steps
    losses, accuracies, digests = [], [], []
    started = time.monotonic()

    for step in range(total):
        episode = sample_episode(split, spec, stream.child(step))
        lr = cosine_lr(step, total, settings.lr)
        optimizer.lr = lr
        optimizer.zero_grad()
        out = episode_forward(make_embedder(), episode, sq(), tau)
        value = out.loss.item()
        if not math.isfinite(value):
            on_divergence({name: t.data.copy() for name, t in trainable.items()})
            raise DivergenceError(f"{label}: loss became {value} at step {step} (lr {lr:.3e})")
        backward(out.loss, leaves=trainable.values())
        norm = clip_grad_norm(trainable.values(), settings.clip_norm)
        last_good = {name: t.data.copy() for name, t in trainable.items()}
        optimizer.step()
        broken = [name for name, t in trainable.items() if not np.all(np.isfinite(t.data))]
        if broken:
            on_divergence(last_good)
            raise DivergenceError(f"{label}: non-finite weights after step {step} (lr {lr:.3e}): {broken}")

        digest = episode.digest()
        losses.append(value)
        accuracies.append(out.accuracy(episode.query_labels))
        digests.append(digest)
        run_logger.log_step(label, step, value, lr, norm, digest)
        if (step + 1) % settings.episodes_per_epoch == 0:
            epoch = (step + 1) // settings.episodes_per_epoch
            recent = losses[-settings.episodes_per_epoch:]
            logger.info(f"{label} epoch {epoch}/{settings.epochs}: mean loss {np.mean(recent):.4f}")

    return TrainOutcome(losses, accuracies, digests, time.monotonic() - started)


def train(
    ckpt: BackboneCheckpoint,
    base_split: ClassSplit,
    config: RunConfig,
    ablation: Optional[AblationSpec] = None,
    out_dir=None,
    label: str = 'efficientfsl',
) -> tuple[EfficientFSLParams, MetricsReport, list[str]]:
    """
    Meta-train a fresh side chain on base-split episodes.

    Returns the trained parameters, the training report and the training
    episode digests. The checkpoint must come out byte-identical.
    """
    ablation = ablation or AblationSpec()
    backbone_hash = ckpt.content_hash
    dtype = DTYPES[config.train.precision]
    run_ckpt = ckpt if ckpt.dtype == dtype else ckpt.clone(dtype=dtype)
    params = init_params_for(config, ablation)
    initial = params.clone()

    def divergence(snapshot: dict[str, np.ndarray]):
        if out_dir is not None:
            path = Path(out_dir) / 'last_good.efsl'
            good = params.clone()
            for name, data in snapshot.items():
                good.tensors[name].data = data
            save_params(good, path)
            logger.error(f"Saved last finite parameters to {path}")

    outcome = _meta_train(
        label, params.tensors,
        lambda: efficientfsl_embedder(params, run_ckpt),
        params.sq_params, params.hyper.tau, base_split, config, divergence,
    )

    if ckpt.content_hash != backbone_hash:
        raise FrozenBackboneError("backbone checkpoint changed during side-chain training")
    for t in params.tensors.values():
        t.zero_grad()

    mean, ci95 = summarize_accuracies(outcome.accuracies)
    moved = params.content_hash != initial.content_hash
    logger.info(f"{label}: trained {config.train.total_steps} steps in {outcome.wall_time:.1f}s "
                f"(params {'updated' if moved else 'unchanged'})")
    report = MetricsReport(
        label=label,
        accuracy_mean=mean,
        ci95=ci95,
        episodes=len(outcome.accuracies),
        loss_curve=outcome.loss_curve,
        param_counts=count_params(config, ablation).as_dict(),
        wall_time=outcome.wall_time,
        config_hash=config.config_hash(),
        provenance=params_digest(params, ckpt, config.config_hash()),
        episode_digest=stream_digest(outcome.digests),
    )
    return params, report, outcome.digests


# ============================================================
# EVALUATION
# ============================================================

@dataclass
class EvalOutcome:
    accuracies: list[float]
    digests: list[str]
    wall_time: float


def evaluate_episodes(
    embed_for_worker: Callable[[], Embedder],
    sq: Optional[SQParams],
    tau: float,
    split: ClassSplit,
    spec: EpisodeSpec,
    episodes: int,
    rng: RngState,
    workers: int = 1,
    phase: str = 'eval',
) -> EvalOutcome:
    started = time.monotonic()

    def run(index: int) -> tuple[float, str]:
        episode = sample_episode(split, spec, rng.child(index))
        with no_grad():
            out = episode_forward(embed_for_worker(), episode, sq, tau)
        value = out.loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"{phase}: loss became {value} on episode {index}")
        return out.accuracy(episode.query_labels), episode.digest()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(episodes)))
    else:
        results = [run(i) for i in range(episodes)]

    accuracies = [acc for acc, _ in results]
    digests = [digest for _, digest in results]
    for i, (acc, digest) in enumerate(results):
        run_logger.log_episode(phase, i, acc, digest)
    return EvalOutcome(accuracies, digests, time.monotonic() - started)


def evaluate(
    params: EfficientFSLParams,
    ckpt: BackboneCheckpoint,
    novel_split: ClassSplit,
    spec: EpisodeSpec,
    episodes: int,
    rng: RngState,
    workers: int = 1,
    label: str = 'efficientfsl',
    config_hash: str = '',
    param_counts: Optional[dict[str, int]] = None,
) -> tuple[MetricsReport, list[str]]:
    """Mean accuracy and 95% CI over `episodes` novel-split episodes; SQ alignment sees each episode's own queries."""
    dtype = next(iter(params.tensors.values())).dtype if params.tensors else ckpt.dtype
    run_ckpt = ckpt if ckpt.dtype == dtype else ckpt.clone(dtype=dtype)
    outcome = evaluate_episodes(
        lambda: efficientfsl_embedder(params, run_ckpt), params.sq_params(), params.hyper.tau,
        novel_split, spec, episodes, rng, workers, phase=f'{label}/{spec.shots}shot',
    )
    mean, ci95 = summarize_accuracies(outcome.accuracies)
    run_logger.log_eval_summary(label, mean, ci95, episodes, outcome.wall_time)
    report = MetricsReport(
        label=label,
        accuracy_mean=mean,
        ci95=ci95,
        episodes=episodes,
        param_counts=param_counts or {'trainable': params.num_elements(), 'frozen': ckpt.num_elements()},
        wall_time=outcome.wall_time,
        config_hash=config_hash,
        provenance=params_digest(params, ckpt, config_hash),
        episode_digest=stream_digest(outcome.digests),
    )
    return report, outcome.digests


# ============================================================
# BASELINES
# ============================================================

def baseline_frozen_pn(
    ckpt: BackboneCheckpoint,
    novel_split: ClassSplit,
    spec: EpisodeSpec,
    episodes: int,
    rng: RngState,
    tau: float = 10.0,
    workers: int = 1,
    config_hash: str = '',
) -> tuple[MetricsReport, list[str]]:
    """Prototypes over mean-pooled final-layer backbone tokens; nothing trainable."""
    embed = backbone_embedder(ckpt)
    outcome = evaluate_episodes(lambda: embed, None, tau, novel_split, spec, episodes, rng, workers,
                                phase=f'frozen_pn/{spec.shots}shot')
    mean, ci95 = summarize_accuracies(outcome.accuracies)
    run_logger.log_eval_summary('frozen_pn', mean, ci95, episodes, outcome.wall_time)
    report = MetricsReport(
        label='frozen_pn',
        accuracy_mean=mean,
        ci95=ci95,
        episodes=episodes,
        param_counts={'trainable': 0, 'frozen': ckpt.num_elements()},
        wall_time=outcome.wall_time,
        config_hash=config_hash,
        provenance=hashlib.sha256((config_hash + ckpt.content_hash).encode('utf-8')).hexdigest(),
        episode_digest=stream_digest(outcome.digests),
    )
    return report, outcome.digests


def baseline_full_finetune(
    ckpt: BackboneCheckpoint,
    config: RunConfig,
    base_split: ClassSplit,
    novel_split: ClassSplit,
    spec: Optional[EpisodeSpec] = None,
    workers: int = 1,
) -> tuple[MetricsReport, list[str]]:
    """
    Same episodic protocol and seeds as `train`, but every backbone tensor of
    a private copy is trained under the PN head. The input checkpoint is untouched.
    """
    dtype = DTYPES[config.train.precision]
    tuned = ckpt.clone(trainable=True, dtype=dtype)
    outcome = _meta_train(
        'full_finetune', tuned.tensors, lambda: backbone_embedder(tuned),
        lambda: None, config.train.tau, base_split, config, lambda _: None,
    )
    tuned.freeze()

    spec = spec or config.episode
    evaluated = evaluate_episodes(
        lambda: backbone_embedder(tuned), None, config.train.tau, novel_split, spec,
        config.eval.episodes, eval_stream(config), workers,
        phase=f'full_finetune/{spec.shots}shot',
    )
    mean, ci95 = summarize_accuracies(evaluated.accuracies)
    run_logger.log_eval_summary('full_finetune', mean, ci95, config.eval.episodes, evaluated.wall_time)
    total = ckpt.num_elements()
    report = MetricsReport(
        label='full_finetune',
        accuracy_mean=mean,
        ci95=ci95,
        episodes=config.eval.episodes,
        loss_curve=outcome.loss_curve,
        param_counts={'trainable': total, 'frozen': 0},
        wall_time=outcome.wall_time + evaluated.wall_time,
        config_hash=config.config_hash(),
        provenance=hashlib.sha256((config.config_hash() + tuned.content_hash).encode('utf-8')).hexdigest(),
        episode_digest=stream_digest(evaluated.digests),
    )
    return report, evaluated.digests


# ============================================================
# EMBEDDING EXPORT
# ============================================================

@dataclass
class EmbeddingRow:
    sample_id: str
    role: str
    class_id: int
    feature: np.ndarray


def export_embeddings(params: EfficientFSLParams, ckpt: BackboneCheckpoint, episode: Episode) -> list[EmbeddingRow]:
    """Support, query, prototype and aligned-prototype rows; class ids are the original dataset classes."""
    with no_grad():
        out = episode_forward(efficientfsl_embedder(params, ckpt), episode, params.sq_params(), params.hyper.tau)
    classes = episode.classes
    rows = []
    for i, idx in enumerate(episode.support_indices):
        rows.append(EmbeddingRow(f'img{int(idx)}', 'support', classes[episode.support_labels[i]], out.support.data[i]))
    for i, idx in enumerate(episode.query_indices):
        rows.append(EmbeddingRow(f'img{int(idx)}', 'query', classes[episode.query_labels[i]], out.query.data[i]))
    for c, cls in enumerate(classes):
        rows.append(EmbeddingRow(f'proto{c}', 'prototype', cls, out.prototypes.data[c]))
    for c, cls in enumerate(classes):
        rows.append(EmbeddingRow(f'proto{c}', 'sq_prototype', cls, out.sq_prototypes.data[c]))
    return rows


def embeddings_to_text(rows: list[EmbeddingRow]) -> str:
    if not rows:
        return ''
    width = rows[0].feature.shape[0]
    lines = ['\t'.join(['sample_id', 'role', 'class'] + [f'f{j}' for j in range(width)])]
    for row in rows:
        values = '\t'.join('%.17g' % v for v in row.feature.astype(np.float64))
        lines.append(f"{row.sample_id}\t{row.role}\t{row.class_id}\t{values}")
    return '\n'.join(lines) + '\n'
