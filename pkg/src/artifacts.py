"""Run outputs: fixed-header CSV tables, JSON reports, SVG plots and the run manifest."""
import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from config.logging_config import get_logger  # noqa: E402
from src import __version__  # noqa: E402

logger = get_logger(__name__)

MANIFEST_NAME = 'manifest.json'
plt.rcParams['svg.hashsalt'] = 'kacflow'


def file_checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    out_dir: str
    tool_version: str = __version__
    artifacts: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, path: str, deterministic: bool = True) -> str:
        self.artifacts.append({'path': os.path.relpath(path, self.out_dir), 'sha256': file_checksum(path),
                               'bytes': os.path.getsize(path), 'deterministic': deterministic})
        return path

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = round(time.perf_counter() - start, 6)

    def as_dict(self) -> dict:
        return {'command': self.command, 'tool_version': self.tool_version, 'config_hash': self.config_hash,
                'artifacts': sorted(self.artifacts, key=lambda a: a['path']), 'wall_clock': self.phases,
                'metadata': self.metadata}

    def write(self) -> str:
        path = os.path.join(self.out_dir, MANIFEST_NAME)
        try:
            with open(path, 'w') as f:
                json.dump(self.as_dict(), f, indent=2, sort_keys=True)
            logger.info(f'Manifest written to {path} ({len(self.artifacts)} artifacts)')
            return path
        except OSError as e:
            logger.error(f'Cannot write the manifest to {path}: {e}')
            raise


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(frame: pd.DataFrame, path: str, manifest: RunManifest | None = None, deterministic: bool = True) -> str:
    try:
        ensure_dir(os.path.dirname(path) or '.')
        frame.to_csv(path, index=False, float_format='%.17g')
        logger.debug(f'CSV written to {path}')
    except OSError as e:
        logger.error(f'Cannot write {path}: {e}')
        raise
    return manifest.add(path, deterministic) if manifest else path


def write_json(payload: dict, path: str, manifest: RunManifest | None = None, deterministic: bool = True) -> str:
    try:
        ensure_dir(os.path.dirname(path) or '.')
        with open(path, 'w') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    except OSError as e:
        logger.error(f'Cannot write {path}: {e}')
        raise
    return manifest.add(path, deterministic) if manifest else path


def states_frame(states: np.ndarray, extra: dict | None = None) -> pd.DataFrame:
    """Columns ``x0..x{d-1}`` plus any extra per-row columns placed first."""
    states = np.atleast_2d(states)
    frame = pd.DataFrame(states, columns=[f'x{i}' for i in range(states.shape[1])])
    for k, (name, values) in enumerate((extra or {}).items()):
        frame.insert(k, name, values)
    return frame


def plot_samples(samples: np.ndarray, path: str, reference: np.ndarray | None = None, title: str = '',
                 manifest: RunManifest | None = None) -> str:
    """Histogram (d = 1) or scatter (d >= 2) of samples against an optional reference cloud."""
    samples = np.atleast_2d(samples)
    fig, ax = plt.subplots(figsize=(5, 4))
    try:
        if samples.shape[1] == 1:
            bins = np.histogram_bin_edges(samples[:, 0] if reference is None else
                                          np.concatenate([samples[:, 0], reference[:, 0]]), bins=60)
            if reference is not None:
                ax.hist(reference[:, 0], bins=bins, density=True, alpha=0.4, label='data')
            ax.hist(samples[:, 0], bins=bins, density=True, alpha=0.6, label='samples')
        else:
            if reference is not None:
                ax.scatter(reference[:, 0], reference[:, 1], s=12, marker='x', label='data')
            ax.scatter(samples[:, 0], samples[:, 1], s=2, alpha=0.5, label='samples')
        ax.set_title(title)
        ax.legend()
        ensure_dir(os.path.dirname(path) or '.')
        fig.savefig(path, format='svg', metadata={'Date': None})
    finally:
        plt.close(fig)
    return manifest.add(path) if manifest else path
