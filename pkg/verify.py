"""
Invariant suite behind `main.py verify`.

Each property returns (passed, detail). Everything runs at toy dimensions
and 64-bit precision; the toy fixtures here are shared with the unit tests.
"""

import hashlib
import logging
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

import oracles
import run_logger
from archive import ARCHIVE_VERSION, ArchiveVersionError, CorruptArchiveError, read_archive, write_archive
from backbone import BackboneCheckpoint, LayerWeights, backbone_forward, init_checkpoint
from blocks import (
    ActiveBlockParams, Bottleneck, CombineParams, EfficientFSLParams, LayerFeatures, SQParams,
    active_block, classify, combine, combine_inputs, combine_weights, compute_prototypes, count_params,
    frozen_block, init_params_for, sq_attention,
)
from episodes import ClassSplit, SyntheticDataset, build_dataset, sample_episode, split_classes
from numerics import (
    RngState, Tensor, cosine_similarity, cross_entropy, custom_op, finite_difference_check,
    checked, gelu, layer_norm, matmul, softmax,
)
from schemas import RunConfig
from trainer import efficientfsl_embedder, episode_forward, episode_loss, summarize_accuracies, train

logger = logging.getLogger(__name__)

ORACLE_CASES = 100
ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4

# Hand count for the default config (d=64, n=6, r=48, r_a=8, m=65, one prompt row per layer)
DEFAULT_BOTTLENECK = 64 * 48 + 48 + 48 * 64 + 64              # 6,256
DEFAULT_ATTN_BOTTLENECK = 64 * 8 + 8 + 8 * 64 + 64             # 1,096
DEFAULT_PER_LAYER = 64 + DEFAULT_BOTTLENECK + 3 * DEFAULT_ATTN_BOTTLENECK + 2 * 64 + DEFAULT_BOTTLENECK
DEFAULT_WEIGHT_MLP = 64 * 48 + 48 + 48 * 18 + 18                # d -> r -> 3n
DEFAULT_TRAINABLE = 6 * DEFAULT_PER_LAYER + DEFAULT_BOTTLENECK + DEFAULT_WEIGHT_MLP + DEFAULT_BOTTLENECK + 65 * 64

TOY_SETTINGS = {
    'backbone.image_size': '8',
    'backbone.patch_size': '4',
    'backbone.embed_dim': '16',
    'backbone.num_layers': '2',
    'backbone.num_heads': '2',
    'backbone.mlp_ratio': '2.0',
    'side.bottleneck_dim': '6',
    'side.attn_bottleneck_dim': '3',
    'side.num_tokens': '10',
    'data.num_classes': '6',
    'data.images_per_class': '6',
    'data.image_size': '8',
    'data.render_size': '10',
    'data.base_fraction': '0.5',
    'episode.ways': '2',
    'episode.shots': '1',
    'episode.queries': '2',
    'train.epochs': '1',
    'train.episodes_per_epoch': '3',
    'train.precision': 'float64',
    'pretrain.epochs': '0',
    'eval.episodes': '8',
}


# ============================================================
# TOY FIXTURES
# ============================================================

def toy_config(**overrides: str) -> RunConfig:
    """Tiny 64-bit RunConfig; override with dotted keys written as section__field."""
    flat = dict(TOY_SETTINGS)
    flat.update({key.replace('__', '.'): str(value) for key, value in overrides.items()})
    return RunConfig.from_flat(flat)


def toy_dataset(config: RunConfig) -> tuple[SyntheticDataset, ClassSplit, ClassSplit]:
    dataset = build_dataset(config.data.dataset_spec())
    base, novel = split_classes(dataset, config.data.base_fraction, RngState(config.data.split_seed),
                                ways=config.episode.ways)
    return dataset, base, novel


def toy_checkpoint(config: RunConfig, seed: int = 0, std: float = 0.3) -> BackboneCheckpoint:
    """64-bit checkpoint with every tensor (LN gains and biases included) randomized."""
    ckpt = init_checkpoint(config.backbone, RngState(seed), dtype=np.float64)
    gen = RngState(seed).child('randomize').generator()
    for name, t in ckpt.tensors.items():
        noise = gen.standard_normal(t.shape) * std
        t.data = (1.0 + noise) if name.endswith('.gamma') else noise
    return ckpt


def randomize_params(params: EfficientFSLParams, seed: int = 1, std: float = 0.3) -> EfficientFSLParams:
    """Give every trainable tensor (zero-initialized ones included) a random value."""
    gen = RngState(seed).child('randomize').generator()
    for name, t in params.tensors.items():
        noise = gen.standard_normal(t.shape) * std
        t.data = (1.0 + noise) if name.endswith('.gamma') else noise
    return params


def random_bottleneck(gen: np.random.Generator, d_in: int, r: int, d_out: int, std: float = 0.5) -> Bottleneck:
    return Bottleneck(
        Tensor(gen.standard_normal((d_in, r)) * std), Tensor(gen.standard_normal(r) * std),
        Tensor(gen.standard_normal((r, d_out)) * std), Tensor(gen.standard_normal(d_out) * std),
    )


def bottleneck_arrays(b: Bottleneck) -> tuple[np.ndarray, ...]:
    return b.down_weight.data, b.down_bias.data, b.up_weight.data, b.up_bias.data


def random_layer(gen: np.random.Generator, d: int, hidden: int, std: float = 0.5) -> LayerWeights:
    def w(*shape):
        return Tensor(gen.standard_normal(shape) * std)
    return LayerWeights(
        index=0,
        ln1_gamma=Tensor(1.0 + gen.standard_normal(d) * 0.2), ln1_beta=w(d),
        q_weight=w(d, d), q_bias=w(d), k_weight=w(d, d), k_bias=w(d),
        v_weight=w(d, d), v_bias=w(d), out_weight=w(d, d), out_bias=w(d),
        ln2_gamma=Tensor(1.0 + gen.standard_normal(d) * 0.2), ln2_beta=w(d),
        fc1_weight=w(d, hidden), fc1_bias=w(hidden), fc2_weight=w(hidden, d), fc2_bias=w(d),
    )


def layer_arrays(layer: LayerWeights) -> dict[str, np.ndarray]:
    return {name: getattr(layer, name).data for name in layer.__dataclass_fields__ if name != 'index'}


def random_active_params(gen: np.random.Generator, d: int, r: int, ra: int, xi: float, zeta: float) -> ActiveBlockParams:
    return ActiveBlockParams(
        prompt=Tensor(gen.standard_normal((1, d)) * 0.5),
        proj=random_bottleneck(gen, d, r, d),
        q=random_bottleneck(gen, d, ra, d), k=random_bottleneck(gen, d, ra, d), v=random_bottleneck(gen, d, ra, d),
        ln_gamma=Tensor(1.0 + gen.standard_normal(d) * 0.2), ln_beta=Tensor(gen.standard_normal(d) * 0.2),
        mlp=random_bottleneck(gen, d, r, d),
        xi=xi, zeta=zeta,
    )


# ============================================================
# PROPERTIES
# ============================================================

def check_matmul_oracle() -> tuple[bool, str]:
    gen = RngState(11).generator()
    worst = 0.0
    for _ in range(ORACLE_CASES):
        a = gen.standard_normal((2, 3, 4))
        b = gen.standard_normal((4, 2))
        worst = max(worst, float(np.max(np.abs(matmul(Tensor(a), Tensor(b)).data - oracles.batched_matmul_loops(a, b[None])))))
    return worst < 1e-12, f"max abs diff {worst:.2e}"


def check_softmax() -> tuple[bool, str]:
    gen = RngState(12).generator()
    sums = softmax(Tensor(gen.standard_normal((1000, 7)) * 20), axis=-1).data.sum(axis=-1)
    stable = softmax(Tensor(np.array([1000.0, 0.0])), axis=-1).data
    exact = np.abs(softmax(Tensor(np.array([1.0, 2.0, 3.0])), axis=-1).data - oracles.softmax_decimal([1, 2, 3])).max()
    ok = bool(np.all(np.abs(sums - 1) <= 1e-6) and np.all(np.isfinite(stable)) and stable[0] > 0.999999 and exact < 1e-12)
    return ok, f"max |sum-1| {np.abs(sums - 1).max():.1e}, oracle diff {exact:.1e}"


def check_layer_norm_oracle() -> tuple[bool, str]:
    gen = RngState(13).generator()
    worst = 0.0
    for _ in range(ORACLE_CASES):
        x, g, b = gen.standard_normal((3, 8)), gen.standard_normal(8), gen.standard_normal(8)
        got = layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
        worst = max(worst, float(np.abs(got - oracles.layer_norm_direct(x, g, b)).max()))
    return worst < 1e-10, f"max abs diff {worst:.2e}"


def check_cosine_oracle() -> tuple[bool, str]:
    got = cosine_similarity(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))).item()
    expected = 11.0 / (math.sqrt(5.0) * 5.0)
    zero = cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3))).item()
    return abs(got - expected) < 1e-10 and zero == 0.0, f"cos([1,2],[3,4]) = {got:.12f}"


def check_op_gradients() -> tuple[bool, str]:
    gen = RngState(14).generator()
    x = Tensor(gen.standard_normal((3, 4)), requires_grad=True)
    y = Tensor(gen.standard_normal((4, 5)), requires_grad=True)
    g = Tensor(1.0 + gen.standard_normal(4) * 0.2, requires_grad=True)
    b = Tensor(gen.standard_normal(4), requires_grad=True)
    p = Tensor(gen.standard_normal((2, 4)), requires_grad=True)
    labels = np.array([0, 2, 1])
    cases: dict[str, Callable[[], Tensor]] = {
        'matmul': lambda: ((x @ y) * (x @ y)).sum(),
        'gelu': lambda: (gelu(x) * gelu(x)).sum(),
        'softmax': lambda: (softmax(x, axis=-1) * softmax(x @ y, axis=-1)[:, :4]).sum(),
        'layer_norm': lambda: (layer_norm(x, g, b) ** 2.0).sum(),
        'cosine': lambda: (cosine_similarity(x.reshape(3, 1, 4), p.reshape(1, 2, 4)) ** 2.0).sum(),
        'cross_entropy': lambda: cross_entropy(x @ y[:, :3], labels),
    }
    failed = []
    worst = 0.0
    for name, f in cases.items():
        report = finite_difference_check(f, {'x': x, 'y': y, 'g': g, 'b': b, 'p': p}, step=1e-5, tol=1e-5, atol=1e-9)
        worst = max(worst, report.max_rel_error if report.passed else math.inf)
        if not report.passed:
            failed.append(f"{name}: {report.flagged()}")
    return not failed, '; '.join(failed) or f"{len(cases)} ops checked"


def check_grad_checker_flags_wrong_gradient() -> tuple[bool, str]:
    x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True)

    def wrong_square():
        return custom_op(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,), 'wrong_square').sum()
    report = finite_difference_check(wrong_square, {'x': x})
    return not report.passed, f"flagged={report.flagged()}"


def check_active_block() -> tuple[bool, str]:
    gen = RngState(15).generator()
    worst = 0.0
    for _ in range(ORACLE_CASES):
        params = random_active_params(gen, 8, 5, 3, xi=0.7, zeta=0.4)
        h = gen.standard_normal((3, 8))
        got = active_block(Tensor(h), params).data
        expected = oracles.active_block_direct(
            h, params.prompt.data, bottleneck_arrays(params.proj), bottleneck_arrays(params.q),
            bottleneck_arrays(params.k), bottleneck_arrays(params.v), (params.ln_gamma.data, params.ln_beta.data),
            bottleneck_arrays(params.mlp), params.xi, params.zeta,
        )
        worst = max(worst, float(np.abs(got - expected).max()))

    collapse = random_active_params(gen, 8, 5, 3, xi=0.0, zeta=0.0)
    h = gen.standard_normal((3, 8))
    collapsed = active_block(Tensor(h), collapse).data
    plain = collapse.proj(Tensor(h) + collapse.prompt).data
    identity = ActiveBlockParams(prompt=Tensor(np.zeros((1, 8))), proj=Bottleneck.identity(8), xi=0.0, zeta=0.0)

    grad_params = random_active_params(gen, 6, 4, 2, xi=0.5, zeta=0.5)
    leaves = {}
    for field_name in ('prompt', 'ln_gamma', 'ln_beta'):
        leaves[field_name] = getattr(grad_params, field_name)
    for field_name in ('proj', 'q', 'k', 'v', 'mlp'):
        bn = getattr(grad_params, field_name)
        for part in ('down_weight', 'down_bias', 'up_weight', 'up_bias'):
            leaves[f"{field_name}.{part}"] = getattr(bn, part)
    for t in leaves.values():
        t.requires_grad = True
    target = gen.standard_normal((3, 6))
    hg = Tensor(gen.standard_normal((3, 6)))
    report = finite_difference_check(lambda: ((active_block(hg, grad_params) - target) ** 2.0).mean(),
                                     leaves, tol=GRAD_TOL, atol=1e-9)

    ok = (worst < ORACLE_TOL and np.array_equal(collapsed, plain)
          and np.array_equal(active_block(Tensor(h), identity).data, h) and report.passed)
    return ok, f"oracle diff {worst:.2e}, grad rel err {report.max_rel_error:.2e}"


def check_frozen_block() -> tuple[bool, str]:
    gen = RngState(16).generator()
    worst = 0.0
    identity_ok = True
    for case in range(ORACLE_CASES):
        heads = 1 if case % 2 == 0 else 2
        layer = random_layer(gen, 4, 8)
        f = gen.standard_normal((2, 4))
        x = gen.standard_normal((3, 4))
        got = frozen_block(Tensor(f[None]), Tensor(x[None]), layer, heads)
        f_att, f_mlp, h = oracles.frozen_block_direct(f, x, layer_arrays(layer), heads)
        worst = max(worst, float(np.abs(got.f_att.data[0] - f_att).max()),
                    float(np.abs(got.f_mlp.data[0] - f_mlp).max()), float(np.abs(got.h.data[0] - h).max()))
        identity_ok &= np.array_equal(got.h.data, got.f_mlp.data + got.f_att.data)
        no_attn = frozen_block(Tensor(f[None]), Tensor(x[None]), layer, heads, zero_attn=True)
        no_mlp = frozen_block(Tensor(f[None]), Tensor(x[None]), layer, heads, zero_mlp=True)
        identity_ok &= np.array_equal(no_attn.f_att.data[0], f) and np.array_equal(no_mlp.h.data, no_mlp.f_att.data)
    return worst < ORACLE_TOL and bool(identity_ok), f"oracle diff {worst:.2e}, residual identities {'hold' if identity_ok else 'broken'}"


def check_combine() -> tuple[bool, str]:
    gen = RngState(17).generator()
    n, m, d, r = 2, 3, 4, 5
    worst = 0.0
    for _ in range(ORACLE_CASES):
        params = CombineParams(shared=random_bottleneck(gen, d, r, d), weight_mlp=random_bottleneck(gen, d, r, 3 * n))
        features = [LayerFeatures(*(Tensor(gen.standard_normal((1, m, d))) for _ in range(3))) for _ in range(n)]
        got = combine(features, params).data[0]
        pooled = features[-1].h.data[0].mean(axis=0)
        weights = oracles.softmax_rows(oracles.bottleneck_direct(pooled, *bottleneck_arrays(params.weight_mlp)))
        inputs = [t.data[0] for t in combine_inputs(features, params.branches)]
        worst = max(worst, float(np.abs(got - oracles.combine_direct(inputs, weights, bottleneck_arrays(params.shared))).max()))

    params = CombineParams(shared=random_bottleneck(gen, d, r, d), weight_mlp=random_bottleneck(gen, d, r, 3 * n))
    same = Tensor(gen.standard_normal((1, m, d)))
    convex = combine([LayerFeatures(same, same, same) for _ in range(n)], params).data
    convex_ok = np.abs(convex - params.shared(same).data).max() < 1e-12
    return worst < ORACLE_TOL and bool(convex_ok), f"oracle diff {worst:.2e}"


def check_combine_weights() -> tuple[bool, str]:
    gen = RngState(18).generator()
    n, m, d = 3, 4, 6
    params = CombineParams(shared=random_bottleneck(gen, d, 5, d), weight_mlp=random_bottleneck(gen, d, 5, 3 * n, std=2.0))
    h_last = Tensor(gen.standard_normal((1000, m, d)) * 3)
    weights = combine_weights([None] * n, h_last, params).data
    ok = weights.shape == (1000, 3 * n) and np.all(weights >= 0) and np.all(np.abs(weights.sum(axis=1) - 1) <= 1e-6)
    return bool(ok), f"{weights.shape[1]} weights per input, min {weights.min():.2e}"


def check_prototypes() -> tuple[bool, str]:
    gen = RngState(19).generator()
    worst = 0.0
    for _ in range(ORACLE_CASES):
        feats = gen.standard_normal((15, 6))
        labels = np.repeat(np.arange(3), 5)
        gen.shuffle(labels)
        got = compute_prototypes(Tensor(feats), labels, 3).data
        worst = max(worst, float(np.abs(got - oracles.prototypes_grouped(feats, labels, 3)).max()))
    return worst < 1e-12, f"max abs diff {worst:.2e}"


def check_sq_attention() -> tuple[bool, str]:
    gen = RngState(20).generator()
    worst = {'softmax': 0.0, 'raw': 0.0}
    hull_ok = True
    for mode in worst:
        for _ in range(ORACLE_CASES):
            s = gen.standard_normal((2, 4))
            q = gen.standard_normal((6, 4))
            proj = random_bottleneck(gen, 4, 3, 4)
            alpha = float(gen.uniform(0, 1))
            got = sq_attention(Tensor(s), Tensor(q), SQParams(alpha, proj, mode)).data
            projected = oracles.bottleneck_direct(q, *bottleneck_arrays(proj))
            worst[mode] = max(worst[mode], float(np.abs(got - oracles.sq_direct(s, q, projected, alpha, mode)).max()))
            if mode == 'softmax':
                # alpha=1 leaves only A.Q; recover barycentric weights from the affinity rows
                affinity = oracles.softmax_rows(s @ projected.T / 2.0)
                hull_ok &= bool(np.all(affinity >= 0) and np.allclose(affinity.sum(axis=1), 1.0))
                pulled = sq_attention(Tensor(s), Tensor(q), SQParams(1.0, proj, mode)).data
                hull_ok &= bool(np.abs(pulled - affinity @ q).max() < 1e-10)
    s = gen.standard_normal((3, 4))
    unchanged = np.array_equal(sq_attention(Tensor(s), Tensor(gen.standard_normal((5, 4))), SQParams(0.0, None)).data, s)
    ok = max(worst.values()) < ORACLE_TOL and hull_ok and unchanged
    return ok, f"softmax diff {worst['softmax']:.2e}, raw diff {worst['raw']:.2e}"


def check_classify() -> tuple[bool, str]:
    gen = RngState(21).generator()
    mismatches = 0
    for _ in range(20):
        q = gen.standard_normal((75, 8))
        s = gen.standard_normal((5, 8))
        _, predicted = classify(Tensor(q), Tensor(s), 10.0)
        mismatches += int(np.sum(predicted != oracles.nearest_cosine(q, s)))
    tie = classify(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 1.0], [0.0, 1.0]])), 10.0)[1]
    return mismatches == 0 and tie[0] == 0, f"{mismatches} argmax mismatches"


def check_query_only() -> tuple[bool, str]:
    config = toy_config(train__epochs='5')
    _, base, _ = toy_dataset(config)
    ckpt = toy_checkpoint(config)
    probe = base.dataset.images[:2]
    before_hash = ckpt.content_hash
    before_acts = backbone_forward(probe, ckpt).digest()
    train(ckpt, base, config)
    after_acts = backbone_forward(probe, ckpt).digest()
    no_grads = all(t.grad is None for t in ckpt.tensors.values())
    ok = ckpt.content_hash == before_hash and before_acts == after_acts and no_grads
    return ok, f"checkpoint {'unchanged' if ckpt.content_hash == before_hash else 'CHANGED'}"


def check_sq_reduction() -> tuple[bool, str]:
    config = toy_config(train__alpha='0.0')
    _, _, novel = toy_dataset(config)
    ckpt = toy_checkpoint(config)
    params = randomize_params(init_params_for(config))
    embed = efficientfsl_embedder(params, ckpt)
    stream = RngState(config.eval.seed).child('sq-reduction')
    differing = 0
    episodes = 320
    for i in range(episodes):
        episode = sample_episode(novel, config.episode, stream.child(i))
        with_sq = episode_forward(embed, episode, params.sq_params(), params.hyper.tau).predictions
        plain = episode_forward(embed, episode, None, params.hyper.tau).predictions
        differing += int(np.sum(with_sq != plain))
    return differing == 0, f"{differing} differing predictions over {episodes} episodes"


def check_end_to_end_gradient() -> tuple[bool, str]:
    config = toy_config()
    _, base, _ = toy_dataset(config)
    ckpt = toy_checkpoint(config)
    params = randomize_params(init_params_for(config), std=0.2)
    episode = sample_episode(base, config.episode, RngState(5))
    started = time.monotonic()
    report = finite_difference_check(lambda: episode_loss(params, ckpt, episode), params.tensors,
                                     step=1e-4, tol=GRAD_TOL, atol=1e-9, max_elements=6, rng=RngState(6))
    elapsed = time.monotonic() - started
    return report.passed, f"max rel err {report.max_rel_error:.2e} over {len(report.entries)} tensors in {elapsed:.1f}s"


def check_param_counts() -> tuple[bool, str]:
    vit_s = count_params(RunConfig.from_flat({'backbone.embed_dim': '384', 'backbone.num_layers': '12'}))
    # 224px images at patch 16: 196 patches plus the class token
    vit_s_full = count_params(RunConfig.from_flat({
        'backbone.embed_dim': '384', 'backbone.num_layers': '12', 'side.num_tokens': '197',
    }))
    default = count_params(RunConfig())
    ok = all(1_000_000 <= c.trainable <= 1_500_000 for c in (vit_s, vit_s_full))
    ok &= default.trainable == DEFAULT_TRAINABLE
    degenerate = count_params(RunConfig.from_flat({'backbone.num_layers': '0'}))
    per_layer = ('prompts', 'proj', 'active_attn', 'active_mlp', 'ln')
    ok &= all(degenerate.breakdown[group] == 0 for group in per_layer)
    return ok, (f"ViT-S-like trainable {vit_s.trainable} (m=197: {vit_s_full.trainable}), default"
                f" {default.trainable} (hand count {DEFAULT_TRAINABLE})")


def check_ci_formula() -> tuple[bool, str]:
    gen = RngState(22).generator()
    worst = 0.0
    for _ in range(50):
        accuracies = gen.uniform(0, 1, size=int(gen.integers(2, 400)))
        mean, ci = summarize_accuracies(accuracies)
        expected_mean, expected_ci = oracles.ci95_direct(accuracies)
        worst = max(worst, abs(mean - expected_mean), abs(ci - expected_ci))
    fixed = summarize_accuracies([0.8, 0.6, 1.0, 0.6])
    ok = worst < 1e-9 and abs(fixed[0] - 75.0) < 1e-12 and summarize_accuracies([1.0] * 5) == (100.0, 0.0)
    return ok, f"max diff {worst:.2e}"


def check_determinism() -> tuple[bool, str]:
    config = toy_config()
    first, base, _ = toy_dataset(config)
    second, _, _ = toy_dataset(config)
    ckpt = toy_checkpoint(config)
    same_data = np.array_equal(first.images, second.images)
    a = sample_episode(base, config.episode, RngState(3, 7))
    b = sample_episode(base, config.episode, RngState(3, 7))
    same_episode = a.digest() == b.digest()
    same_acts = backbone_forward(a.query_images, ckpt).digest() == backbone_forward(b.query_images, ckpt).digest()
    return same_data and same_episode and same_acts, "dataset, episode and activations reproduce"


def check_archive() -> tuple[bool, str]:
    tensors = {'w': np.arange(6, dtype=np.float64).reshape(2, 3), 'labels': np.arange(4)}
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / 'probe.bin'
        write_archive(path, b'EFSLTEST', {'k': 'v'}, tensors)
        metadata, loaded = read_archive(path, b'EFSLTEST')
        round_trip = metadata == {'k': 'v'} and all(np.array_equal(loaded[k], tensors[k]) for k in tensors)

        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        try:
            read_archive(path, b'EFSLTEST')
            truncated = False
        except CorruptArchiveError:
            truncated = True

        body = bytearray(blob[:-32])
        body[8:12] = (ARCHIVE_VERSION + 1).to_bytes(4, 'little')
        path.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
        try:
            read_archive(path, b'EFSLTEST')
            versioned = False
        except ArchiveVersionError:
            versioned = True
    return round_trip and truncated and versioned, "round trip, truncation and version checks"


PROPERTIES: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ('matmul_oracle', check_matmul_oracle),
    ('softmax_normalization', check_softmax),
    ('layer_norm_oracle', check_layer_norm_oracle),
    ('cosine_oracle', check_cosine_oracle),
    ('op_gradients', check_op_gradients),
    ('grad_checker_negative_control', check_grad_checker_flags_wrong_gradient),
    ('active_block', check_active_block),
    ('frozen_block', check_frozen_block),
    ('combine_oracle', check_combine),
    ('combine_weight_distribution', check_combine_weights),
    ('prototype_oracle', check_prototypes),
    ('sq_attention_oracle', check_sq_attention),
    ('classify_oracle', check_classify),
    ('query_only_backbone', check_query_only),
    ('sq_alpha_zero_reduction', check_sq_reduction),
    ('end_to_end_gradient', check_end_to_end_gradient),
    ('param_accounting', check_param_counts),
    ('ci_formula', check_ci_formula),
    ('determinism', check_determinism),
    ('archive_integrity', check_archive),
]


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str


def run_suite() -> list[PropertyResult]:
    """Every property runs with per-op finiteness checks on."""
    results = []
    for name, check in PROPERTIES:
        try:
            with checked():
                passed, detail = check()
        except Exception as e:
            logger.exception(f"Property {name} raised")
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        results.append(PropertyResult(name, bool(passed), detail))
        run_logger.log_property(name, bool(passed), detail)
        logger.info(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return results


def results_to_text(results: list[PropertyResult]) -> str:
    lines = [f"{r.name}={'PASS' if r.passed else 'FAIL'}" for r in results]
    lines.append(f"passed={sum(r.passed for r in results)}/{len(results)}")
    return '\n'.join(lines) + '\n'
