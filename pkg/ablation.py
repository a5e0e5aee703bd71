"""
Ablation harness.

Every row trains once from the same seeds as the full model and is evaluated
at each configured shot count on the same evaluation episodes. Rows that do
not share the full model's episode streams are rejected.

The seed sweep repeats the full model and two rows over several training
seeds and compares them with the frozen-backbone baseline.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import database
from backbone import BackboneCheckpoint
from episodes import ClassSplit
from numerics import EFSLError
from schemas import AblationSpec, ConfigError, MetricsReport, RunConfig
from trainer import baseline_frozen_pn, eval_stream, evaluate, train

logger = logging.getLogger(__name__)

FULL_MODEL = 'full'

# name -> (component toggles, training hyperparameter overrides)
PRESETS: dict[str, tuple[dict, dict]] = {
    FULL_MODEL: ({}, {}),
    # removing training modules
    'no_proj': ({'proj': False}, {}),
    'no_active_attn_mlp': ({'active_attn': False, 'active_mlp': False}, {}),
    'no_combine': ({'combine_block': False}, {}),
    # internal components of the active and combine blocks
    'no_prompts': ({'prompts': False}, {}),
    'no_active_attn': ({'active_attn': False}, {}),
    'no_active_mlp': ({'active_mlp': False}, {}),
    'no_f_att': ({'f_att_branch': False}, {}),
    'no_f_mlp': ({'f_mlp_branch': False}, {}),
    'no_h': ({'h_branch': False}, {}),
    # support-query alignment
    'no_sq': ({'sq_attention': False}, {}),
    'no_sq_proj': ({'sq_q_proj': False}, {}),
    'alpha_zero': ({}, {'alpha': 0.0}),
    # feature fusion methods
    'combine_fixed': ({'combine_mode': 'fixed'}, {}),
    'combine_average': ({'combine_mode': 'average'}, {}),
}


class AblationPairingError(EFSLError):
    """An ablation row did not see the full model's episode stream"""


def preset(name: str) -> tuple[AblationSpec, dict]:
    if name not in PRESETS:
        raise ConfigError(f"unknown ablation row '{name}' (known: {', '.join(sorted(PRESETS))})")
    toggles, train_overrides = PRESETS[name]
    return AblationSpec(**toggles), train_overrides


@dataclass
class AblationRow:
    name: str
    trainable: int
    reports: dict[int, MetricsReport] = field(default_factory=dict)


@dataclass
class AblationReport:
    rows: list[AblationRow]
    shots: list[int]

    def to_text(self) -> str:
        """Canonical key=value lines, rows in run order."""
        base = self.rows[0].trainable if self.rows else 0
        lines = [f"shots={','.join(str(k) for k in self.shots)}", f"rows={','.join(r.name for r in self.rows)}"]
        for row in self.rows:
            lines.append(f"row.{row.name}.trainable={row.trainable}")
            lines.append(f"row.{row.name}.trainable_delta={row.trainable - base}")
            for k in self.shots:
                report = row.reports[k]
                lines.append(f"row.{row.name}.{k}shot.accuracy_mean={report.accuracy_mean:.2f}")
                lines.append(f"row.{row.name}.{k}shot.ci95={report.ci95:.2f}")
                lines.append(f"row.{row.name}.{k}shot.episode_digest={report.episode_digest}")
        return '\n'.join(lines) + '\n'

    def table(self) -> str:
        """Human-readable table for the log."""
        header = f"{'row':<20}{'params':>10}" + ''.join(f"{f'{k}-shot':>18}" for k in self.shots)
        lines = [header]
        for row in self.rows:
            cells = ''.join(f"{f'{row.reports[k].accuracy_mean:.2f} +- {row.reports[k].ci95:.2f}':>18}"
                            for k in self.shots)
            lines.append(f"{row.name:<20}{row.trainable:>10}{cells}")
        return '\n'.join(lines)


def run_ablation(
    ckpt: BackboneCheckpoint,
    base_split: ClassSplit,
    novel_split: ClassSplit,
    config: RunConfig,
    rows: Optional[list[str]] = None,
    out_dir=None,
    workers: Optional[int] = None,
) -> AblationReport:
    """Train and evaluate the full model plus each named row under identical seeds."""
    workers = workers or config.eval.workers
    names = [FULL_MODEL] + [name for name in (rows or []) if name != FULL_MODEL]
    for name in names:
        preset(name)
    shots = list(config.ablation.shots) or [config.episode.shots]
    reference: dict[str, list[str]] = {}
    results = []

    for name in names:
        spec, train_overrides = preset(name)
        row_config = config.model_copy(update={'train': config.train.model_copy(update=train_overrides)})
        logger.info(f"Ablation row '{name}': toggles {spec.model_dump(exclude_defaults=True) or 'none'}"
                    f"{f', train {train_overrides}' if train_overrides else ''}")
        params, train_report, train_digests = train(ckpt, base_split, row_config, spec, out_dir, label=name)
        streams = {'train': train_digests}
        row = AblationRow(name, train_report.param_counts['trainable'])
        for k in shots:
            eval_spec = config.episode.model_copy(update={'shots': k})
            report, digests = evaluate(
                params, ckpt, novel_split, eval_spec, config.eval.episodes, eval_stream(config),
                workers, label=name, config_hash=row_config.config_hash(),
                param_counts=train_report.param_counts,
            )
            row.reports[k] = report
            streams[f'eval/{k}shot'] = digests

        if name == FULL_MODEL:
            reference = streams
        else:
            for phase, digests in streams.items():
                if digests != reference[phase]:
                    raise AblationPairingError(f"row '{name}' saw a different {phase} episode stream than '{FULL_MODEL}'")

        if database.is_initialized():
            run_id = database.start_run('ablation', name, row_config.config_hash())
            for phase, digests in streams.items():
                database.record_episodes(run_id, phase, digests)
            database.record_metrics(run_id, {
                'trainable': row.trainable,
                **{f'{k}shot.accuracy_mean': f"{row.reports[k].accuracy_mean:.2f}" for k in shots},
                **{f'{k}shot.ci95': f"{row.reports[k].ci95:.2f}" for k in shots},
            })
        results.append(row)

    report = AblationReport(results, shots)
    logger.info("Ablation results\n" + report.table())
    return report


# ============================================================
# SEED SWEEP
# ============================================================

SWEEP_ROWS = ['no_prompts', 'no_active_attn']
LEARNING_MARGIN = 3.0  # accuracy points over the frozen-backbone baseline, on every seed


@dataclass
class SeedRun:
    seed: int
    full: MetricsReport
    no_prompts: MetricsReport
    no_active_attn: MetricsReport


@dataclass
class SeedSweepReport:
    """Trained side chains against the frozen-backbone PN, plus the prompt/attention ablation gap, per seed"""
    shots: int
    frozen_pn: MetricsReport
    runs: list[SeedRun]

    def gain(self, run: SeedRun) -> float:
        return run.full.accuracy_mean - self.frozen_pn.accuracy_mean

    def separated(self, run: SeedRun) -> bool:
        """Non-overlapping 95% intervals, trained model above."""
        return run.full.accuracy_mean - run.full.ci95 > self.frozen_pn.accuracy_mean + self.frozen_pn.ci95

    @property
    def prompt_drop(self) -> float:
        return sum(r.full.accuracy_mean - r.no_prompts.accuracy_mean for r in self.runs) / max(len(self.runs), 1)

    @property
    def attn_drop(self) -> float:
        return sum(r.full.accuracy_mean - r.no_active_attn.accuracy_mean for r in self.runs) / max(len(self.runs), 1)

    @property
    def learning_signal(self) -> bool:
        if not self.runs:
            return False
        needed = (2 * len(self.runs) + 2) // 3
        return (all(self.gain(r) >= LEARNING_MARGIN for r in self.runs)
                and sum(self.separated(r) for r in self.runs) >= needed)

    @property
    def prompts_dominate(self) -> bool:
        return bool(self.runs) and self.prompt_drop >= self.attn_drop

    def to_text(self) -> str:
        lines = [
            f"shots={self.shots}",
            f"seeds={','.join(str(r.seed) for r in self.runs)}",
            f"frozen_pn.accuracy_mean={self.frozen_pn.accuracy_mean:.2f}",
            f"frozen_pn.ci95={self.frozen_pn.ci95:.2f}",
        ]
        for r in self.runs:
            p = f"seed.{r.seed}."
            for name, report in (('full', r.full), ('no_prompts', r.no_prompts), ('no_active_attn', r.no_active_attn)):
                lines.append(f"{p}{name}.accuracy_mean={report.accuracy_mean:.2f}")
                lines.append(f"{p}{name}.ci95={report.ci95:.2f}")
            lines.append(f"{p}gain_over_frozen_pn={self.gain(r):.2f}")
            lines.append(f"{p}ci_separated={str(self.separated(r)).lower()}")
        lines += [
            f"prompt_drop_mean={self.prompt_drop:.2f}",
            f"attn_drop_mean={self.attn_drop:.2f}",
            f"learning_signal={str(self.learning_signal).lower()}",
            f"prompts_dominate={str(self.prompts_dominate).lower()}",
        ]
        return '\n'.join(lines) + '\n'


def run_seed_sweep(
    ckpt: BackboneCheckpoint,
    base_split: ClassSplit,
    novel_split: ClassSplit,
    config: RunConfig,
    seeds: Optional[list[int]] = None,
    out_dir=None,
    workers: Optional[int] = None,
) -> SeedSweepReport:
    """
    For each training seed, train and evaluate the full model and the
    no-prompts / no-attention rows at `episode.shots`; compare against the
    frozen-backbone PN on the same evaluation episodes. Report only: a
    failed comparison is a result, not an error.
    """
    seeds = list(seeds if seeds is not None else config.ablation.seeds) or [config.train.seed]
    workers = workers or config.eval.workers
    shots = config.episode.shots
    frozen, _ = baseline_frozen_pn(
        ckpt, novel_split, config.episode, config.eval.episodes, eval_stream(config),
        config.train.tau, workers, config.config_hash(),
    )

    runs = []
    for seed in seeds:
        logger.info(f"Seed sweep: training seed {seed}")
        seeded = config.model_copy(update={
            'train': config.train.model_copy(update={'seed': seed}),
            'ablation': config.ablation.model_copy(update={'shots': [shots]}),
        })
        ablation = run_ablation(ckpt, base_split, novel_split, seeded, SWEEP_ROWS, out_dir, workers)
        reports = {row.name: row.reports[shots] for row in ablation.rows}
        if reports[FULL_MODEL].episode_digest != frozen.episode_digest:
            raise AblationPairingError(f"seed {seed} evaluated on different episodes than the frozen baseline")
        runs.append(SeedRun(seed, reports[FULL_MODEL], reports['no_prompts'], reports['no_active_attn']))

    report = SeedSweepReport(shots, frozen, runs)
    logger.info(f"Seed sweep: learning signal {report.learning_signal}, prompt drop {report.prompt_drop:.2f} "
                f"vs attention drop {report.attn_drop:.2f}")
    return report
