import tempfile
import unittest
from pathlib import Path

import numpy as np
import numpy.testing as npt

from episodes import (
    MAX_CLASSES, SamplingError, SplitError, build_dataset, class_factors, generate_dataset, load_dataset,
    random_flip, render_image, sample_episode, split_classes,
)
from numerics import RngState
from schemas import EpisodeSpec, SyntheticDatasetSpec
from verify import toy_config, toy_dataset


class TestRendering(unittest.TestCase):
    def setUp(self):
        self.spec = SyntheticDatasetSpec(num_classes=6, images_per_class=4, image_size=16, render_size=20)

    def test_class_factors_are_injective(self):
        seen = {class_factors(c) for c in range(MAX_CLASSES)}
        self.assertEqual(len(seen), MAX_CLASSES)
        with self.assertRaises(ValueError):
            class_factors(MAX_CLASSES)

    def test_image_range_and_shape(self):
        image = render_image(self.spec, 3, 0)
        self.assertEqual(image.shape, (3, 16, 16))
        self.assertEqual(image.dtype, np.float32)
        self.assertGreaterEqual(image.min(), 0.0)
        self.assertLessEqual(image.max(), 1.0)

    def test_rendering_is_deterministic(self):
        npt.assert_array_equal(render_image(self.spec, 2, 1), render_image(self.spec, 2, 1))
        self.assertFalse(np.array_equal(render_image(self.spec, 2, 1), render_image(self.spec, 2, 2)))
        reseeded = self.spec.model_copy(update={'seed': 9})
        self.assertFalse(np.array_equal(render_image(self.spec, 2, 1), render_image(reseeded, 2, 1)))

    def test_hue_separates_classes(self):
        # classes 0 and 5 share shape and differ in hue band; mean colour must differ
        quiet = self.spec.model_copy(update={'noise_level': 0.0, 'position_jitter': 0.0})
        a = np.mean([render_image(quiet, 0, i).reshape(3, -1).sum(axis=1) for i in range(4)], axis=0)
        b = np.mean([render_image(quiet, 5, i).reshape(3, -1).sum(axis=1) for i in range(4)], axis=0)
        self.assertGreater(np.abs(a / a.sum() - b / b.sum()).max(), 0.05)


class TestDataset(unittest.TestCase):
    def setUp(self):
        self.spec = SyntheticDatasetSpec(num_classes=5, images_per_class=3, image_size=8, render_size=10)

    def test_build_layout(self):
        dataset = build_dataset(self.spec)
        self.assertEqual(dataset.images.shape, (15, 3, 8, 8))
        self.assertEqual(dataset.num_classes, 5)
        npt.assert_array_equal(dataset.labels, np.repeat(np.arange(5), 3))
        npt.assert_array_equal(dataset.class_indices(2), [6, 7, 8])

    def test_generate_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'dataset.bin'
            dataset, digest = generate_dataset(self.spec, path)
            again, digest_again = generate_dataset(self.spec, Path(tmp) / 'again.bin')
            loaded = load_dataset(path)
        self.assertEqual(digest, digest_again)
        self.assertEqual(loaded.spec, self.spec)
        npt.assert_array_equal(loaded.images, dataset.images)
        npt.assert_array_equal(loaded.class_index, dataset.class_index)

    def test_pixels_separate_contrasting_classes(self):
        # nearest class mean on raw pixels is a linear classifier; classes 0 and 20 differ only in hue band
        dataset = build_dataset(SyntheticDatasetSpec(num_classes=21, images_per_class=20, image_size=8, render_size=10))
        pixels = dataset.images.reshape(len(dataset.images), -1).astype(np.float64)
        train_rows = [dataset.class_indices(c)[:10] for c in (0, 20)]
        test_rows = [dataset.class_indices(c)[10:] for c in (0, 20)]
        centroids = np.stack([pixels[rows].mean(axis=0) for rows in train_rows])
        correct = 0
        for label, rows in enumerate(test_rows):
            distances = ((pixels[rows, None, :] - centroids[None]) ** 2).sum(axis=-1)
            correct += int(np.sum(distances.argmin(axis=1) == label))
        self.assertGreater(correct / 20, 0.9)


class TestSplits(unittest.TestCase):
    def setUp(self):
        self.dataset = build_dataset(SyntheticDatasetSpec(num_classes=8, images_per_class=4, image_size=8, render_size=8))

    def test_split_is_class_disjoint_and_complete(self):
        base, novel = split_classes(self.dataset, 0.75, RngState(1))
        self.assertEqual(len(base), 6)
        self.assertEqual(len(novel), 2)
        self.assertFalse(set(base.class_ids) & set(novel.class_ids))
        self.assertEqual(set(base.class_ids) | set(novel.class_ids), set(range(8)))
        self.assertEqual(len(base.indices()), 24)

    def test_split_depends_only_on_seed(self):
        a, _ = split_classes(self.dataset, 0.5, RngState(3))
        b, _ = split_classes(self.dataset, 0.5, RngState(3))
        self.assertEqual(a.class_ids, b.class_ids)

    def test_split_needs_enough_classes(self):
        with self.assertRaises(SplitError):
            split_classes(self.dataset, 0.75, RngState(1), ways=5)
        with self.assertRaises(SplitError):
            split_classes(self.dataset, 1.0, RngState(1))


class TestEpisodes(unittest.TestCase):
    def setUp(self):
        self.config = toy_config()
        _, self.base, self.novel = toy_dataset(self.config)

    def test_episode_shape_and_labels(self):
        spec = EpisodeSpec(ways=2, shots=2, queries=3)
        episode = sample_episode(self.base, spec, RngState(0))
        self.assertEqual(episode.support_images.shape, (4, 3, 8, 8))
        self.assertEqual(episode.query_images.shape, (6, 3, 8, 8))
        npt.assert_array_equal(episode.support_labels, [0, 0, 1, 1])
        npt.assert_array_equal(episode.query_labels, [0, 0, 0, 1, 1, 1])
        self.assertEqual(episode.ways, 2)
        self.assertTrue(set(episode.classes) <= set(self.base.class_ids))

    def test_support_and_query_are_disjoint(self):
        episode = sample_episode(self.base, EpisodeSpec(ways=2, shots=3, queries=3), RngState(1))
        self.assertFalse(set(episode.support_indices) & set(episode.query_indices))
        labels = self.base.dataset.labels
        for idx, label in zip(episode.support_indices, episode.support_labels):
            self.assertEqual(episode.class_map[int(labels[idx])], label)

    def test_same_state_same_episode(self):
        spec = self.config.episode
        a = sample_episode(self.novel, spec, RngState(5, 2))
        b = sample_episode(self.novel, spec, RngState(5, 2))
        c = sample_episode(self.novel, spec, RngState(5, 3))
        self.assertEqual(a.digest(), b.digest())
        npt.assert_array_equal(a.query_images, b.query_images)
        stream = RngState(5)
        digests = {sample_episode(self.novel, spec, stream.child(i)).digest() for i in range(10)}
        self.assertGreater(len(digests | {c.digest()}), 1)

    def test_impossible_episodes(self):
        with self.assertRaises(SamplingError):
            sample_episode(self.novel, EpisodeSpec(ways=4, shots=1, queries=1), RngState(0))
        with self.assertRaises(SamplingError):
            sample_episode(self.novel, EpisodeSpec(ways=2, shots=4, queries=3), RngState(0))

    def test_class_selection_is_uniform(self):
        dataset = build_dataset(SyntheticDatasetSpec(num_classes=10, images_per_class=3, image_size=8, render_size=8))
        _, novel = split_classes(dataset, 0.5, RngState(0))
        spec = EpisodeSpec(ways=2, shots=1, queries=1)
        stream = RngState(11)
        counts = dict.fromkeys(novel.class_ids, 0)
        episodes = 2000
        for i in range(episodes):
            for c in sample_episode(novel, spec, stream.child(i)).classes:
                counts[c] += 1
        p = spec.ways / len(novel)
        expected = episodes * p
        statistic = sum((n - expected) ** 2 / (expected * (1 - p)) for n in counts.values())
        # chi-square, 4 degrees of freedom, p = 0.001
        self.assertLess(statistic, 18.47)


class TestFlip(unittest.TestCase):
    def test_flip_all_and_none(self):
        images = np.arange(2 * 3 * 2 * 2, dtype=np.float32).reshape(2, 3, 2, 2)
        gen = RngState(0).generator()
        npt.assert_array_equal(random_flip(images, gen, p=1.0), images[..., ::-1])
        npt.assert_array_equal(random_flip(images, gen, p=0.0), images)


if __name__ == '__main__':
    unittest.main()
