import contextlib
import io
import tempfile
import unittest
from pathlib import Path

from episodes import load_dataset
from main import cli_dispatch
from schemas import load_run_config
from verify import DEFAULT_TRAINABLE, TOY_SETTINGS


def run(*argv) -> tuple[int, str]:
    stdout = io.StringIO()
    with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(io.StringIO()):
        code = cli_dispatch(list(argv))
    return code, stdout.getvalue().strip()


class TestUsage(unittest.TestCase):
    def test_bad_command_lines(self):
        self.assertEqual(run()[0], 1)
        self.assertEqual(run('fly')[0], 1)
        self.assertEqual(run('count-params', '--bogus')[0], 1)

    def test_bad_configuration(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(run('count-params', '--out', tmp, '--set', 'train.nope=1')[0], 1)
            self.assertEqual(run('count-params', '--out', tmp, '--set', 'train.lr=fast')[0], 1)
            self.assertEqual(run('count-params', '--out', tmp, '--set', 'train.lr')[0], 1)
            self.assertEqual(run('count-params', '--out', tmp, '--config', str(Path(tmp) / 'missing.env'))[0], 1)


class TestCommands(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name) / 'out'
        self.config_path = Path(self.tmp.name) / 'toy.env'
        self.config_path.write_text(''.join(f"{key}={value}\n" for key, value in TOY_SETTINGS.items()))

    def tearDown(self):
        self.tmp.cleanup()

    def toy(self, command, *extra) -> tuple[int, str]:
        return run(command, '--config', str(self.config_path), '--out', str(self.out), *extra)

    def test_count_params_defaults(self):
        code, printed = run('count-params', '--out', str(self.out))
        self.assertEqual(code, 0)
        self.assertEqual(Path(printed), self.out / 'param_count.txt')
        self.assertIn(f"trainable={DEFAULT_TRAINABLE}\n", (self.out / 'param_count.txt').read_text())
        self.assertTrue((self.out / 'run_trace.log').exists())
        self.assertTrue((self.out / 'runs.db').exists())

    def test_resolved_config_reloads_to_same_hash(self):
        code, _ = self.toy('count-params', '--set', 'train.alpha=0.25', '--set', 'train.alpha=0.3')
        self.assertEqual(code, 0)
        resolved, _ = load_run_config(str(self.out / 'resolved_config.env'))
        expected, _ = load_run_config(str(self.config_path), ['train.alpha=0.3'])
        self.assertEqual(resolved.train.alpha, 0.3)
        self.assertEqual(resolved.config_hash(), expected.config_hash())
        trace = (self.out / 'run_trace.log').read_text()
        self.assertIn("[OVERRIDE] train.alpha=0.25", trace)
        self.assertIn("[OVERRIDE] train.alpha=0.3", trace)

    def test_gen_data(self):
        code, printed = self.toy('gen-data')
        self.assertEqual(code, 0)
        dataset = load_dataset(printed)
        self.assertEqual(dataset.num_classes, 6)
        self.assertEqual(dataset.images.shape, (36, 3, 8, 8))

    def test_train_without_checkpoint_is_a_runtime_failure(self):
        self.assertEqual(self.toy('train')[0], 2)

    def test_toy_pipeline(self):
        for command in ('gen-data', 'pretrain', 'train'):
            self.assertEqual(self.toy(command)[0], 0, command)
        self.assertTrue((self.out / 'params.efsl').exists())

        code, printed = self.toy('eval')
        self.assertEqual(code, 0)
        metrics = Path(printed).read_text()
        self.assertIn("episodes=8\n", metrics)
        self.assertNotIn("wall_time", metrics)

        self.assertEqual(self.toy('eval', '--set', 'eval.sq_attention=false')[0], 0)
        code, printed = self.toy('eval', '--set', 'eval.baseline=frozen_pn')
        self.assertEqual(code, 0)
        self.assertIn("params.trainable=0\n", Path(printed).read_text())

        code, printed = self.toy('export-embeddings')
        self.assertEqual(code, 0)
        self.assertEqual(len(Path(printed).read_text().splitlines()), 11)

        code, printed = self.toy('sweep', '--set', 'ablation.seeds=0')
        self.assertEqual(code, 0)
        sweep = Path(printed).read_text()
        self.assertIn("seeds=0\n", sweep)
        self.assertIn("learning_signal=", sweep)

    def test_mismatched_dataset_is_a_config_error(self):
        self.assertEqual(self.toy('gen-data')[0], 0)
        self.assertEqual(self.toy('pretrain', '--set', 'data.seed=5')[0], 1)


if __name__ == '__main__':
    unittest.main()
