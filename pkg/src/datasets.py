from dataclasses import dataclass

import numpy as np
import pandas as pd

from config.logging_config import get_logger
from src.exceptions import ConfigError, ParameterError
from src.kac_core import SeedSpec

logger = get_logger(__name__)

DATASET_VERSION = 1
NAMED_DATASETS = ('two-mode-1d', 'two-class-1d', 'grid-2d')


@dataclass(frozen=True, eq=False)
class Dataset:
    """Finite weighted point set X0 with optional class labels."""
    points: np.ndarray
    labels: np.ndarray | None = None
    weights: np.ndarray | None = None
    name: str = 'custom'

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if points.shape[0] == 0:
            raise ParameterError('dataset must contain at least one point')
        if not np.all(np.isfinite(points)):
            raise ParameterError('dataset points must be finite')
        n = points.shape[0]
        weights = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if weights.shape != (n,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError('weights must be n nonnegative values summing to 1 within 1e-12')
        labels = None
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=int)
            if labels.shape != (n,) or np.any(labels < 0):
                raise ParameterError('labels must be n nonnegative class indices')
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'labels', labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.points)))

    def restrict(self, label: int | None) -> 'Dataset':
        """Class-conditional sub-dataset; ``None`` or a negative label keeps everything."""
        if label is None or label < 0:
            return self
        if self.labels is None:
            raise ParameterError('dataset has no labels')
        mask = self.labels == label
        if not mask.any():
            raise ParameterError(f'no points with label {label}')
        weights = self.weights[mask]
        return Dataset(self.points[mask], self.labels[mask], weights / weights.sum(), name=f'{self.name}[{label}]')

    def resample(self, n: int, seed: SeedSpec) -> np.ndarray:
        """n draws from the weighted empirical measure."""
        idx = seed.generator().choice(self.points.shape[0], size=n, p=self.weights)
        return self.points[idx]


def make_dataset(name: str, n_points: int = 64, seed: SeedSpec | None = None, spread: float = 0.1) -> Dataset:
    """Versioned, seeded synthetic datasets."""
    rng = (seed or SeedSpec(DATASET_VERSION)).generator()
    if name == 'two-mode-1d':
        centers = np.where(np.arange(n_points) % 2 == 0, -1.0, 1.0)
        points = centers + spread * rng.standard_normal(n_points)
        return Dataset(points[:, None], name=name)
    if name == 'two-class-1d':
        labels = np.arange(n_points) % 2
        points = np.where(labels == 0, -1.0, 1.0) + spread * rng.standard_normal(n_points)
        return Dataset(points[:, None], labels=labels, name=name)
    if name == 'grid-2d':
        axis = np.array([-1.0, 0.0, 1.0])
        xx, yy = np.meshgrid(axis, axis, indexing='ij')
        return Dataset(np.stack([xx.ravel(), yy.ravel()], axis=1), name=name)
    raise ConfigError(f'Unsupported dataset: {name}')


def load_data(data_path: str) -> Dataset:
    """CSV with columns x0..x{d-1} and optional ``label`` / ``weight``."""
    try:
        df = pd.read_csv(data_path, sep=',')
        logger.info(f'Data loaded from {data_path}')
    except FileNotFoundError:
        logger.error(f'Dataset file not found: {data_path}')
        raise ConfigError(f'dataset file not found: {data_path}')
    except pd.errors.ParserError as e:
        logger.error(f'Failed to parse the CSV file : {e}')
        raise
    coords = sorted((c for c in df.columns if c.startswith('x')), key=lambda c: int(c[1:]))
    if not coords:
        raise ConfigError(f'{data_path} has no x0.. columns')
    df = df.dropna(subset=coords)
    weights = None
    if 'weight' in df:
        weights = df['weight'].to_numpy(dtype=float)
        weights = weights / weights.sum()
    labels = df['label'].to_numpy(dtype=int) if 'label' in df else None
    logger.info(f'Dataset shape : {(len(df), len(coords))}')
    return Dataset(df[coords].to_numpy(dtype=float), labels=labels, weights=weights, name=data_path)


def save_data(dataset: Dataset, destination_path: str) -> str:
    try:
        df = pd.DataFrame(dataset.points, columns=[f'x{i}' for i in range(dataset.dim)])
        if dataset.labels is not None:
            df['label'] = dataset.labels
        df['weight'] = dataset.weights
        df.to_csv(destination_path, index=False)
        logger.debug(f'Dataset saved to {destination_path}')
        return destination_path
    except Exception as e:
        logger.error(f'An unexpected error occured while saving the data : {e}')
        raise
