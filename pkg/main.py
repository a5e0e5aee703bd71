"""
Command-line entry point.

    python main.py <subcommand> [--config PATH] [--set key=value ...] [--out DIR]

Progress goes to stderr, detailed traces to <out>/run_trace.log and the
path of the final report to stdout. Exit codes: 0 success, 1 invalid
usage or configuration, 2 runtime failure.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

import database
import run_logger
import verify
from ablation import run_ablation, run_seed_sweep
from backbone import load_checkpoint, pretrain_backbone, save_checkpoint
from blocks import count_params, load_params, save_params
from config import LEDGER_NAME, LOG_LEVEL, WORKERS
from episodes import ClassSplit, SyntheticDataset, generate_dataset, load_dataset, sample_episode, split_classes
from numerics import EFSLError, RngState
from schemas import ConfigError, MetricsReport, RunConfig, load_run_config
from trainer import (
    baseline_frozen_pn, baseline_full_finetune, embeddings_to_text, eval_stream, evaluate, export_embeddings, train,
)

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    'gen-data': "Render the synthetic dataset",
    'pretrain': "Pretrain the backbone on the base split",
    'train': "Meta-train the side chain with the backbone frozen",
    'eval': "Evaluate on novel-split episodes (or a baseline)",
    'ablate': "Train and evaluate the configured ablation rows",
    'sweep': "Compare trained models with the frozen baseline over several training seeds",
    'count-params': "Report trainable and frozen parameter counts",
    'export-embeddings': "Write support/query/prototype embeddings of one episode",
    'verify': "Run the invariant suite at toy dimensions",
}


class UsageError(Exception):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors map to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='main.py', description="Query-only side-chain few-shot learning on a toy ViT")
    sub = parser.add_subparsers(dest='command', metavar='SUBCOMMAND', parser_class=_Parser)
    sub.required = True
    for name, help_text in SUBCOMMANDS.items():
        cmd = sub.add_parser(name, help=help_text, description=help_text)
        cmd.add_argument('--config', default=None, help="dotenv-style config file with section.field keys")
        cmd.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help="override one config key; repeatable, last writer wins")
        cmd.add_argument('--out', default='out', help="output directory (default: ./out)")
    return parser


# ============================================================
# PATHS AND SHARED SETUP
# ============================================================

def _path(configured: str, out: Path, default_name: str) -> Path:
    return Path(configured) if configured else out / default_name


def _dataset(config: RunConfig, out: Path) -> SyntheticDataset:
    """Load the dataset container if present, otherwise render and write it."""
    path = _path(config.paths.dataset, out, 'dataset.bin')
    spec = config.data.dataset_spec()
    if path.exists():
        dataset = load_dataset(path)
        if dataset.spec != spec:
            raise ConfigError(f"{path} was generated with a different data configuration; rerun gen-data")
        logger.info(f"Loaded dataset {path}")
        return dataset
    dataset, _ = generate_dataset(spec, path)
    return dataset


def _splits(config: RunConfig, dataset: SyntheticDataset) -> tuple[ClassSplit, ClassSplit]:
    return split_classes(dataset, config.data.base_fraction, RngState(config.data.split_seed),
                         ways=max(config.episode.ways, config.train.ways))


def _checkpoint(config: RunConfig, out: Path):
    ckpt = load_checkpoint(_path(config.paths.backbone, out, 'backbone.ckpt'))
    ckpt.validate(config.backbone)
    return ckpt


def _workers(config: RunConfig) -> int:
    return max(config.eval.workers, WORKERS)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding='utf-8')
    return path


def _record(kind: str, report: MetricsReport, digests: list[str], phase: str) -> None:
    run_id = database.start_run(kind, report.label, report.config_hash)
    database.record_episodes(run_id, phase, digests)
    database.record_metrics(run_id, {
        'accuracy_mean': f"{report.accuracy_mean:.2f}",
        'ci95': f"{report.ci95:.2f}",
        'episodes': report.episodes,
        'episode_digest': report.episode_digest,
    })


# ============================================================
# SUBCOMMANDS
# ============================================================

def cmd_gen_data(config: RunConfig, out: Path) -> Path:
    path = _path(config.paths.dataset, out, 'dataset.bin')
    _, digest = generate_dataset(config.data.dataset_spec(), path)
    logger.info(f"Dataset digest {digest}")
    return path


def cmd_pretrain(config: RunConfig, out: Path) -> Path:
    base, _ = _splits(config, _dataset(config, out))
    ckpt, accuracy = pretrain_backbone(base, config.backbone, config.pretrain, RngState(config.pretrain.seed))
    path = _path(config.paths.backbone, out, 'backbone.ckpt')
    save_checkpoint(ckpt, path)
    _write(out / 'pretrain.txt', f"accuracy={accuracy * 100:.2f}\ncontent_hash={ckpt.content_hash}\n")
    return path


def cmd_train(config: RunConfig, out: Path) -> Path:
    base, _ = _splits(config, _dataset(config, out))
    ckpt = _checkpoint(config, out)
    params, report, digests = train(ckpt, base, config, out_dir=out)
    save_params(params, _path(config.paths.params, out, 'params.efsl'))
    _record('train', report, digests, 'train')
    return _write(out / 'train_metrics.txt', report.to_text())


def cmd_eval(config: RunConfig, out: Path) -> Path:
    base, novel = _splits(config, _dataset(config, out))
    ckpt = _checkpoint(config, out)
    baseline = config.eval.baseline
    if baseline == 'frozen_pn':
        report, digests = baseline_frozen_pn(
            ckpt, novel, config.episode, config.eval.episodes, eval_stream(config),
            config.train.tau, _workers(config), config.config_hash(),
        )
    elif baseline == 'full_finetune':
        report, digests = baseline_full_finetune(ckpt, config, base, novel, config.episode, _workers(config))
    else:
        params = load_params(_path(config.paths.params, out, 'params.efsl'))
        # alignment is a test-time step; its strength and on/off come from this run's config
        params.hyper = dataclasses.replace(params.hyper, alpha=config.train.alpha)
        if not config.eval.sq_attention:
            params.ablation = params.ablation.model_copy(update={'sq_attention': False})
        report, digests = evaluate(
            params, ckpt, novel, config.episode, config.eval.episodes, eval_stream(config), _workers(config),
            config_hash=config.config_hash(), param_counts=count_params(config, params.ablation).as_dict(),
        )
    _record('eval', report, digests, f'eval/{config.episode.shots}shot')
    return _write(out / 'metrics.txt', report.to_text())


def cmd_ablate(config: RunConfig, out: Path) -> Path:
    base, novel = _splits(config, _dataset(config, out))
    ckpt = _checkpoint(config, out)
    report = run_ablation(ckpt, base, novel, config, config.ablation.rows, out, _workers(config))
    return _write(out / 'ablation.txt', report.to_text())


def cmd_sweep(config: RunConfig, out: Path) -> Path:
    base, novel = _splits(config, _dataset(config, out))
    ckpt = _checkpoint(config, out)
    report = run_seed_sweep(ckpt, base, novel, config, out_dir=out, workers=_workers(config))
    return _write(out / 'sweep.txt', report.to_text())


def cmd_count_params(config: RunConfig, out: Path) -> Path:
    counts = count_params(config)
    logger.info(f"Trainable {counts.trainable:,} / frozen {counts.frozen:,}")
    return _write(out / 'param_count.txt', counts.to_text())


def cmd_export_embeddings(config: RunConfig, out: Path) -> Path:
    _, novel = _splits(config, _dataset(config, out))
    ckpt = _checkpoint(config, out)
    params = load_params(_path(config.paths.params, out, 'params.efsl'))
    episode = sample_episode(novel, config.episode, eval_stream(config).child(0))
    rows = export_embeddings(params, ckpt, episode)
    return _write(out / 'embeddings.tsv', embeddings_to_text(rows))


def cmd_verify(config: RunConfig, out: Path) -> Path:
    results = verify.run_suite()
    path = _write(out / 'verify.txt', verify.results_to_text(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise EFSLError(f"{len(failed)} properties failed: {', '.join(failed)} (see {path})")
    return path


HANDLERS = {
    'gen-data': cmd_gen_data,
    'pretrain': cmd_pretrain,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'sweep': cmd_sweep,
    'count-params': cmd_count_params,
    'export-embeddings': cmd_export_embeddings,
    'verify': cmd_verify,
}


# ============================================================
# DISPATCH
# ============================================================

def cli_dispatch(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)

    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        stream=sys.stderr,
    )
    out = Path(args.out)

    try:
        config, applied = load_run_config(args.config, args.overrides)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Invalid configuration: {e}")
        return 1

    try:
        run_logger.attach_trace_file(out)
        for key, value in applied:
            logger.info(f"Override {key}={value}")
            run_logger.log_override(key, value)
        _write(out / 'resolved_config.env', config.to_text())
        database.init_db(out / LEDGER_NAME)
        logger.info(f"{args.command}: config {config.config_hash()[:12]}, output {out}")
        report_path = HANDLERS[args.command](config, out)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Invalid configuration: {e}")
        return 1
    except (EFSLError, OSError) as e:
        logger.exception(f"{args.command} failed: {e}")
        return 2
    finally:
        run_logger.detach_trace_file()
        database.close_db()

    print(report_path)
    return 0


if __name__ == '__main__':
    sys.exit(cli_dispatch())
