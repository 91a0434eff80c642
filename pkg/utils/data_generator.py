import logging
from dataclasses import replace

import numpy as np
from sklearn.datasets import make_blobs

from config import TaskDatasetSpec
from errors import InputError

logger = logging.getLogger(__name__)

TRAIN_SPLIT = 0
EVAL_SPLIT = 1
CENTERS_STREAM = 2


class DataGenerator:
    """Deterministic synthetic classification tasks for packing experiments."""

    def generate_dataset(self, spec: TaskDatasetSpec):
        """
        Build the train and eval splits of one task.

        Args:
            spec: the task description; equal specs give bitwise-equal data.

        Returns:
            (x_train, y_train, x_eval, y_eval), inputs float32 shaped
            (n, channels, height, width), labels int64.
        """
        if spec.class_count < 2:
            raise InputError(f"task '{spec.name}' needs at least 2 classes, got {spec.class_count}")
        try:
            if spec.kind == "permuted_base":
                x_train, y_train, x_eval, y_eval = self.generate_dataset(
                    replace(spec, kind=spec.base_kind, permutation_seed=None))
                if spec.permutation_seed is not None:
                    order = np.random.default_rng(spec.permutation_seed).permutation(int(np.prod(spec.input_shape)))
                    x_train = self._permute(x_train, order)
                    x_eval = self._permute(x_eval, order)
                return x_train, y_train, x_eval, y_eval

            splits = []
            for split, count in ((TRAIN_SPLIT, spec.train_samples), (EVAL_SPLIT, spec.eval_samples)):
                rng = np.random.default_rng([spec.seed, split])
                if spec.kind == "gratings":
                    splits.extend(self._gratings(spec, count, rng))
                else:
                    splits.extend(self._blobs(spec, count, rng))
            logger.debug("Generated task '%s' (%s): %d train, %d eval", spec.name, spec.kind,
                         spec.train_samples, spec.eval_samples)
            return tuple(splits)
        except InputError:
            raise
        except Exception as e:
            raise InputError(f"Error generating dataset '{spec.name}': {str(e)}") from e

    @staticmethod
    def balanced_labels(count, class_count, rng):
        """Shuffled labels with every class count within one of the others."""
        labels = np.arange(count, dtype=np.int64) % class_count
        return rng.permutation(labels)

    @staticmethod
    def class_angles(spec):
        """Orientation (radians) of each class: evenly spaced bin centers of the band."""
        low, high = spec.orientation_band
        width = (high - low) / spec.class_count
        degrees = low + width * (np.arange(spec.class_count) + 0.5)
        return np.deg2rad(degrees)

    def _gratings(self, spec, count, rng):
        channels, height, width = spec.input_shape
        labels = self.balanced_labels(count, spec.class_count, rng)
        theta = self.class_angles(spec)[labels]
        phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter, size=count) if spec.phase_jitter else 0.0

        rows, cols = np.meshgrid(np.arange(height) - (height - 1) / 2.0,
                                 np.arange(width) - (width - 1) / 2.0, indexing="ij")
        projection = (np.cos(theta)[:, None, None] * cols[None]
                      + np.sin(theta)[:, None, None] * rows[None])
        phase = np.broadcast_to(phase, (count,))[:, None, None]
        pattern = np.sin(2.0 * np.pi * spec.frequency * projection + phase)
        images = np.repeat(pattern[:, None], channels, axis=1)
        images = images + spec.noise * rng.standard_normal(images.shape)
        return images.astype(np.float32), labels

    def _blobs(self, spec, count, rng):
        features = int(np.prod(spec.input_shape))
        centers = np.random.default_rng([spec.seed, CENTERS_STREAM]).uniform(
            -1.0, 1.0, size=(spec.class_count, features))
        per_class = [count // spec.class_count + (k < count % spec.class_count) for k in range(spec.class_count)]
        points, labels = make_blobs(n_samples=per_class, n_features=features, centers=centers,
                                    cluster_std=spec.cluster_std, shuffle=False,
                                    random_state=int(rng.integers(2 ** 31 - 1)))
        order = rng.permutation(count)
        images = points[order].reshape((count,) + spec.input_shape)
        return images.astype(np.float32), labels[order].astype(np.int64)

    @staticmethod
    def _permute(images, order):
        flat = images.reshape(len(images), -1)[:, order]
        return np.ascontiguousarray(flat.reshape(images.shape))
