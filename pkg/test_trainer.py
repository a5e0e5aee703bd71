import dataclasses
import hashlib
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import numpy.testing as npt

import database
import oracles
import verify
from ablation import (
    AblationReport, AblationRow, SeedRun, SeedSweepReport, preset, run_ablation, run_seed_sweep,
)
from backbone import backbone_forward
from blocks import count_params, extract_features, init_params_for, load_params
from episodes import ClassSplit, build_dataset, sample_episode
from numerics import NonFiniteError, RngState, Tensor, backward, log, no_grad
from optim import AdamW, DivergenceError
from schemas import ConfigError, EpisodeSpec, MetricsReport, SyntheticDatasetSpec
from trainer import (
    baseline_frozen_pn, baseline_full_finetune, embeddings_to_text, episode_loss, eval_stream, evaluate,
    evaluate_episodes, export_embeddings, stream_digest, summarize_accuracies, train, training_episode_spec,
)
from verify import randomize_params, toy_checkpoint, toy_config, toy_dataset


class TestSummaries(unittest.TestCase):
    def test_matches_decimal_reference(self):
        gen = RngState(0).generator()
        for size in (2, 5, 40):
            accuracies = gen.integers(0, 11, size) / 10.0
            mean, ci95 = summarize_accuracies(accuracies)
            ref_mean, ref_ci = oracles.ci95_direct(accuracies)
            self.assertAlmostEqual(mean, ref_mean, places=9)
            self.assertAlmostEqual(ci95, ref_ci, places=9)

    def test_degenerate_inputs(self):
        self.assertEqual(summarize_accuracies([]), (0.0, 0.0))
        self.assertEqual(summarize_accuracies([0.75]), (75.0, 0.0))
        self.assertEqual(summarize_accuracies([0.5, 0.5, 0.5]), (50.0, 0.0))

    def test_stream_digest_is_order_sensitive(self):
        self.assertEqual(stream_digest(['a', 'b']), stream_digest(['a', 'b']))
        self.assertNotEqual(stream_digest(['a', 'b']), stream_digest(['b', 'a']))


class TestStreams(unittest.TestCase):
    def test_training_ways_override(self):
        self.assertEqual(training_episode_spec(toy_config()).ways, 2)
        self.assertEqual(training_episode_spec(toy_config(train__ways='3')).ways, 3)

    def test_eval_stream_ignores_training_settings(self):
        config = toy_config()
        _, _, novel = toy_dataset(config)
        other = toy_config(train__seed='7', train__lr='0.5')
        a = sample_episode(novel, config.episode, eval_stream(config).child(3))
        b = sample_episode(novel, config.episode, eval_stream(other).child(3))
        self.assertEqual(a.digest(), b.digest())
        moved = toy_config(eval__seed='1')
        c = [sample_episode(novel, config.episode, eval_stream(moved).child(i)).digest() for i in range(8)]
        d = [sample_episode(novel, config.episode, eval_stream(config).child(i)).digest() for i in range(8)]
        self.assertNotEqual(c, d)


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.config = toy_config()
        _, self.base, self.novel = toy_dataset(self.config)
        self.ckpt = toy_checkpoint(self.config)

    def test_train_leaves_backbone_untouched(self):
        before = self.ckpt.content_hash
        params, report, digests = train(self.ckpt, self.base, self.config)
        self.assertEqual(self.ckpt.content_hash, before)
        self.assertNotEqual(params.content_hash, init_params_for(self.config).content_hash)
        self.assertEqual(report.episodes, 3)
        self.assertEqual(len(report.loss_curve), 3)
        self.assertEqual(len(digests), 3)
        self.assertTrue(all(np.isfinite(report.loss_curve)))
        self.assertEqual(report.param_counts['trainable'], count_params(self.config).trainable)
        self.assertEqual(report.episode_digest, stream_digest(digests))
        self.assertTrue(all(t.grad is None or not np.any(t.grad) for t in params.tensors.values()))

    def test_train_is_deterministic(self):
        a, report_a, digests_a = train(self.ckpt, self.base, self.config)
        b, report_b, digests_b = train(self.ckpt, self.base, self.config)
        self.assertEqual(a.content_hash, b.content_hash)
        self.assertEqual(digests_a, digests_b)
        self.assertEqual(report_a.to_text(), report_b.to_text())

    def test_episode_loss_is_finite_scalar(self):
        params = randomize_params(init_params_for(self.config))
        episode = sample_episode(self.base, self.config.episode, RngState(0))
        loss = episode_loss(params, self.ckpt, episode)
        self.assertEqual(loss.size, 1)
        self.assertTrue(np.isfinite(loss.item()))
        self.assertGreater(loss.item(), 0.0)

    def test_zero_learning_rate_keeps_initial_parameters(self):
        config = toy_config(train__lr='0')
        params, report, _ = train(self.ckpt, self.base, config)
        self.assertEqual(params.content_hash, init_params_for(config).content_hash)
        self.assertEqual(len(report.loss_curve), 3)

    def test_one_step_lowers_its_own_episode_loss(self):
        for seed in range(20):
            params = init_params_for(self.config)
            episode = sample_episode(self.base, self.config.episode, RngState(seed))
            optimizer = AdamW(params.tensors, lr=1e-6, weight_decay=0.0)
            loss = episode_loss(params, self.ckpt, episode)
            backward(loss, leaves=params.tensors.values())
            optimizer.step()
            with no_grad():
                after = episode_loss(params, self.ckpt, episode).item()
            self.assertLess(after, loss.item(), f"episode seed {seed}")

    def test_eval_seed_never_changes_trained_parameters(self):
        a, _, _ = train(self.ckpt, self.base, self.config)
        b, _, _ = train(self.ckpt, self.base, toy_config(eval__seed='9'))
        self.assertEqual(a.content_hash, b.content_hash)

    def test_divergence_saves_last_finite_weights(self):
        step = AdamW.step
        lrs = []

        def poisoned(optimizer):
            step(optimizer)
            lrs.append(optimizer.lr)
            if len(lrs) == 2:
                next(iter(optimizer.params.values())).data[...] = np.nan

        with tempfile.TemporaryDirectory() as tmp, mock.patch.object(AdamW, 'step', poisoned):
            with self.assertRaises(DivergenceError):
                train(self.ckpt, self.base, self.config, out_dir=tmp)
            saved = load_params(Path(tmp) / 'last_good.efsl')
        self.assertEqual(len(lrs), 2)
        self.assertTrue(all(np.all(np.isfinite(t.data)) for t in saved.tensors.values()))
        self.assertNotEqual(saved.content_hash, init_params_for(self.config).content_hash)


class TestEvaluation(unittest.TestCase):
    def setUp(self):
        self.config = toy_config()
        _, self.base, self.novel = toy_dataset(self.config)
        self.ckpt = toy_checkpoint(self.config)
        self.params = randomize_params(init_params_for(self.config))

    def _evaluate(self, workers):
        return evaluate(self.params, self.ckpt, self.novel, self.config.episode, 8, eval_stream(self.config), workers)

    def test_worker_count_does_not_change_results(self):
        one, digests_one = self._evaluate(1)
        two, digests_two = self._evaluate(2)
        self.assertEqual(digests_one, digests_two)
        self.assertEqual(one.to_text(), two.to_text())
        self.assertEqual(one.episodes, 8)
        self.assertGreaterEqual(one.accuracy_mean, 0.0)
        self.assertLessEqual(one.accuracy_mean, 100.0)

    def test_baselines_share_the_episode_stream(self):
        report, digests = self._evaluate(1)
        frozen, frozen_digests = baseline_frozen_pn(self.ckpt, self.novel, self.config.episode, 8,
                                                   eval_stream(self.config))
        self.assertEqual(digests, frozen_digests)
        self.assertEqual(frozen.param_counts['trainable'], 0)
        self.assertEqual(frozen.param_counts['frozen'], self.ckpt.num_elements())

    def test_full_finetune_trains_a_private_copy(self):
        before = self.ckpt.content_hash
        report, digests = baseline_full_finetune(self.ckpt, self.config, self.base, self.novel)
        self.assertEqual(self.ckpt.content_hash, before)
        self.assertEqual(report.param_counts['trainable'], self.ckpt.num_elements())
        self.assertEqual(len(report.loss_curve), 3)
        _, reference = self._evaluate(1)
        self.assertEqual(digests, reference)

    def test_evaluation_never_touches_parameters_or_backbone(self):
        params_hash, ckpt_hash = self.params.content_hash, self.ckpt.content_hash
        for workers in (1, 2):
            self._evaluate(workers)
        self.assertEqual(self.params.content_hash, params_hash)
        self.assertEqual(self.ckpt.content_hash, ckpt_hash)

    def test_non_finite_loss_aborts(self):
        self.params.tensors['h0'].data = np.full_like(self.params.tensors['h0'].data, np.nan)
        for workers in (1, 2):
            with self.assertRaises(NonFiniteError):
                self._evaluate(workers)

    def test_uninformative_features_score_chance(self):
        dataset = build_dataset(SyntheticDatasetSpec(num_classes=5, images_per_class=4, image_size=8, render_size=10))
        split = ClassSplit(dataset, tuple(range(5)), 'novel')
        gen = RngState(31).generator()

        def embed(images):
            return Tensor(gen.standard_normal((len(images), 16)))

        outcome = evaluate_episodes(lambda: embed, None, 10.0, split, EpisodeSpec(ways=5, shots=1, queries=3),
                                    400, RngState(2))
        self.assertAlmostEqual(float(np.mean(outcome.accuracies)), 0.2, delta=0.05)

    def test_frozen_backbone_separates_contrasting_hues(self):
        # classes 0 and 20 share shape and texture; their hue bands are opposite
        dataset = build_dataset(SyntheticDatasetSpec(num_classes=21, images_per_class=8, image_size=8, render_size=10))
        split = ClassSplit(dataset, (0, 20), 'novel')
        report, _ = baseline_frozen_pn(self.ckpt, split, EpisodeSpec(ways=2, shots=1, queries=5), 32, RngState(4))
        self.assertGreater(report.accuracy_mean, 50.0 + report.ci95)


class TestEmbeddings(unittest.TestCase):
    def setUp(self):
        self.config = toy_config()
        _, _, self.novel = toy_dataset(self.config)
        self.ckpt = toy_checkpoint(self.config)
        self.params = randomize_params(init_params_for(self.config))
        self.episode = sample_episode(self.novel, self.config.episode, eval_stream(self.config).child(0))

    def test_rows_and_prototypes(self):
        rows = export_embeddings(self.params, self.ckpt, self.episode)
        roles = [row.role for row in rows]
        self.assertEqual(roles.count('support'), 2)
        self.assertEqual(roles.count('query'), 4)
        self.assertEqual(roles.count('prototype'), 2)
        self.assertEqual(roles.count('sq_prototype'), 2)
        self.assertTrue(all(row.class_id in self.episode.classes for row in rows))

        # one shot: each prototype is its single support embedding
        support = [row for row in rows if row.role == 'support']
        prototypes = {row.class_id: row.feature for row in rows if row.role == 'prototype'}
        for row in support:
            npt.assert_allclose(prototypes[row.class_id], row.feature, atol=1e-12)

    def test_alpha_zero_keeps_prototypes(self):
        self.params.hyper = dataclasses.replace(self.params.hyper, alpha=0.0)
        rows = export_embeddings(self.params, self.ckpt, self.episode)
        plain = [row.feature for row in rows if row.role == 'prototype']
        aligned = [row.feature for row in rows if row.role == 'sq_prototype']
        npt.assert_array_equal(plain, aligned)

    def test_text_layout(self):
        text = embeddings_to_text(export_embeddings(self.params, self.ckpt, self.episode))
        lines = text.splitlines()
        self.assertEqual(len(lines), 11)
        self.assertEqual(lines[0].split('\t')[:4], ['sample_id', 'role', 'class', 'f0'])
        self.assertTrue(all(len(line.split('\t')) == 3 + 16 for line in lines))
        self.assertEqual(embeddings_to_text([]), '')

    def test_query_rows_match_extracted_features(self):
        rows = export_embeddings(self.params, self.ckpt, self.episode)
        exported = np.stack([row.feature for row in rows if row.role == 'query'])
        images = np.concatenate([self.episode.support_images, self.episode.query_images])
        with no_grad():
            features, _ = extract_features(backbone_forward(images, self.ckpt), self.params, self.ckpt)
        direct = np.ascontiguousarray(features.data[len(self.episode.support_labels):])
        self.assertEqual(hashlib.sha256(exported.tobytes()).hexdigest(), hashlib.sha256(direct.tobytes()).hexdigest())


class TestAblation(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        database.init_db(Path(self.tmp.name) / 'ledger.db')

    def tearDown(self):
        database.close_db()
        self.tmp.cleanup()

    def test_presets(self):
        spec, overrides = preset('no_proj')
        self.assertFalse(spec.proj)
        self.assertEqual(overrides, {})
        self.assertEqual(preset('alpha_zero')[1], {'alpha': 0.0})
        self.assertEqual(preset('combine_fixed')[0].combine_mode, 'fixed')
        with self.assertRaises(ConfigError):
            preset('no_everything')

    def test_report_text(self):
        rows = [
            AblationRow('full', 100, {1: MetricsReport(label='full', accuracy_mean=61.234, ci95=1.5, episode_digest='d')}),
            AblationRow('no_sq', 80, {1: MetricsReport(label='no_sq', accuracy_mean=58.0, ci95=1.25, episode_digest='d')}),
        ]
        text = AblationReport(rows, [1]).to_text()
        self.assertIn("rows=full,no_sq\n", text)
        self.assertIn("row.full.1shot.accuracy_mean=61.23\n", text)
        self.assertIn("row.no_sq.trainable_delta=-20\n", text)
        self.assertIn("row.no_sq.1shot.ci95=1.25\n", text)

    def test_rows_are_paired_and_recorded(self):
        config = toy_config(ablation__shots='1')
        _, base, novel = toy_dataset(config)
        ckpt = toy_checkpoint(config)
        report = run_ablation(ckpt, base, novel, config, rows=['no_sq', 'alpha_zero'])
        self.assertEqual([row.name for row in report.rows], ['full', 'no_sq', 'alpha_zero'])
        full, no_sq, alpha_zero = report.rows
        sq_proj = count_params(config).breakdown['sq_proj']
        self.assertEqual(full.trainable - no_sq.trainable, sq_proj)
        self.assertEqual(alpha_zero.trainable, full.trainable)
        self.assertEqual({row.reports[1].episode_digest for row in report.rows}, {full.reports[1].episode_digest})

        run = database.get_run(2)
        self.assertEqual((run['kind'], run['label']), ('ablation', 'no_sq'))
        self.assertEqual(database.episode_digests(1, 'eval/1shot'), database.episode_digests(2, 'eval/1shot'))
        self.assertIn('1shot.accuracy_mean', database.get_metrics(3))

    def test_unknown_row_fails_before_training(self):
        config = toy_config(ablation__shots='1')
        _, base, novel = toy_dataset(config)
        with self.assertRaises(ConfigError):
            run_ablation(toy_checkpoint(config), base, novel, config, rows=['no_proj', 'typo'])
        self.assertIsNone(database.get_run(1))

    def test_resolved_worker_count_reaches_evaluation(self):
        config = toy_config(ablation__shots='1')
        _, base, novel = toy_dataset(config)
        ckpt = toy_checkpoint(config)
        with mock.patch('ablation.evaluate', wraps=evaluate) as spy:
            threaded = run_ablation(ckpt, base, novel, config, rows=['no_sq'], workers=3)
        self.assertEqual({call.args[6] for call in spy.call_args_list}, {3})
        serial = run_ablation(ckpt, base, novel, config, rows=['no_sq'], workers=1)
        self.assertEqual(threaded.to_text(), serial.to_text())

    def test_seed_sweep_pairs_every_row_with_the_baseline(self):
        config = toy_config()
        _, base, novel = toy_dataset(config)
        report = run_seed_sweep(toy_checkpoint(config), base, novel, config, seeds=[0, 1])
        self.assertEqual([run.seed for run in report.runs], [0, 1])
        self.assertNotEqual(report.runs[0].full.provenance, report.runs[1].full.provenance)
        for run in report.runs:
            self.assertEqual(run.full.episode_digest, report.frozen_pn.episode_digest)
            self.assertEqual(run.no_prompts.episode_digest, report.frozen_pn.episode_digest)
            self.assertAlmostEqual(report.gain(run), run.full.accuracy_mean - report.frozen_pn.accuracy_mean)
        text = report.to_text()
        self.assertIn("seeds=0,1\n", text)
        self.assertIn("seed.1.no_active_attn.accuracy_mean=", text)
        self.assertEqual(database.get_run(6)['label'], 'no_active_attn')

    def test_sweep_verdicts(self):
        def metrics(mean, ci=1.0):
            return MetricsReport(label='row', accuracy_mean=mean, ci95=ci, episode_digest='d')

        runs = [SeedRun(seed, metrics(50.0), metrics(42.0), metrics(48.0)) for seed in range(3)]
        report = SeedSweepReport(1, metrics(40.0), runs)
        self.assertTrue(report.learning_signal)
        self.assertTrue(report.prompts_dominate)
        self.assertAlmostEqual(report.prompt_drop, 8.0)
        self.assertAlmostEqual(report.attn_drop, 2.0)

        runs[2].full = metrics(42.0)
        self.assertFalse(report.learning_signal)
        # enough gain but overlapping intervals; two of three seeds stay separated
        runs[2].full = metrics(44.0, ci=5.0)
        self.assertTrue(report.learning_signal)
        runs[1].full = metrics(44.0, ci=5.0)
        self.assertFalse(report.learning_signal)
        self.assertIn("learning_signal=false\n", report.to_text())
        self.assertFalse(SeedSweepReport(1, metrics(40.0), []).learning_signal)


class TestLedger(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        database.init_db(Path(self.tmp.name) / 'nested' / 'ledger.db')

    def tearDown(self):
        database.close_db()
        self.tmp.cleanup()

    def test_runs_episodes_and_metrics(self):
        first = database.start_run('train', 'efficientfsl', 'abc')
        second = database.start_run('eval', 'efficientfsl', 'abc')
        self.assertEqual(second, first + 1)
        database.record_episodes(first, 'train', ['x', 'y', 'z'])
        self.assertEqual(database.episode_digests(first, 'train'), ['x', 'y', 'z'])
        self.assertEqual(database.episode_digests(first, 'eval'), [])

        database.record_metrics(second, {'accuracy_mean': 61.5, 'episodes': 8})
        database.record_metrics(second, {'accuracy_mean': 62.0})
        self.assertEqual(database.get_metrics(second), {'accuracy_mean': '62.0', 'episodes': '8'})
        self.assertEqual(database.get_run(first)['config_hash'], 'abc')
        self.assertIsNone(database.get_run(99))

    def test_uninitialized_ledger(self):
        database.close_db()
        self.assertFalse(database.is_initialized())
        with self.assertRaises(RuntimeError):
            database.start_run('train', 'x', 'y')


class TestVerifySuite(unittest.TestCase):
    def test_properties_run_with_finiteness_checks(self):
        def log_of_zero():
            return True, f"min {log(Tensor(np.zeros(2))).data.min()}"

        with mock.patch.object(verify, 'PROPERTIES', [('log_of_zero', log_of_zero)]), \
                self.assertLogs('verify', level='ERROR'):
            results = verify.run_suite()
        self.assertFalse(results[0].passed)
        self.assertIn('NonFiniteError', results[0].detail)
        self.assertTrue(np.isneginf(log(Tensor(np.zeros(1))).data[0]))


if __name__ == '__main__':
    unittest.main()
