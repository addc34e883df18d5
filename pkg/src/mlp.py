"""Small numpy MLP velocity model with hand-written backpropagation.

Input encoding per row: ``[t, x_1..x_d, onehot(label)]`` where the one-hot block has
``n_classes + 1`` slots and the last slot is the null (unconditional) label.
"""
import hashlib
import json
import os
from dataclasses import dataclass

import joblib
import numpy as np

from config.logging_config import get_logger
from src.exceptions import CheckpointError, ConfigError, ParameterError
from src.kac_core import SeedSpec

logger = get_logger(__name__)

CHECKPOINT_FORMAT = 'kacflow-mlp'
CHECKPOINT_VERSION = 1
NULL_LABEL = -1


class MLPModel:

    def __init__(self, dim: int, n_classes: int = 0, hidden=(64, 64), activation: str = 'tanh',
                 seed: SeedSpec | None = None, layers=None):
        if activation != 'tanh':
            raise ParameterError(f'Unsupported activation: {activation}')
        self.dim = int(dim)
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        widths = self.widths
        if layers is None:
            rng = (seed or SeedSpec(0)).generator()
            layers = []
            for fan_in, fan_out in zip(widths[:-1], widths[1:]):
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
        self.layers = [(np.array(W, dtype=float), np.array(b, dtype=float)) for W, b in layers]
        for (W, b), fan_in, fan_out in zip(self.layers, widths[:-1], widths[1:]):
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise CheckpointError(f'layer shape {W.shape} does not match widths {widths}')

    @property
    def input_dim(self) -> int:
        return 1 + self.dim + self.n_classes + 1

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden, self.dim)

    @property
    def n_parameters(self) -> int:
        return int(sum(W.size + b.size for W, b in self.layers))

    def encode(self, t, x, label=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rows = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (rows,))
        labels = np.full(rows, NULL_LABEL) if label is None else np.broadcast_to(np.asarray(label), (rows,))
        labels = np.where(labels < 0, self.n_classes, labels).astype(int)
        if np.any(labels > self.n_classes):
            raise ParameterError(f'label out of range for {self.n_classes} classes')
        onehot = np.zeros((rows, self.n_classes + 1))
        onehot[np.arange(rows), labels] = 1.0
        return np.concatenate([t[:, None], x, onehot], axis=1)

    def forward_cached(self, inputs: np.ndarray):
        activations = [inputs]
        h = inputs
        for i, (W, b) in enumerate(self.layers):
            z = h @ W + b
            h = z if i == len(self.layers) - 1 else np.tanh(z)
            activations.append(h)
        return h, activations

    def forward(self, t, x, label=None) -> np.ndarray:
        return self.forward_cached(self.encode(t, x, label))[0]

    def backward(self, activations, grad_out: np.ndarray):
        """Gradients of sum(grad_out * output) w.r.t. every (W, b)."""
        grads = [None] * len(self.layers)
        delta = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[i]
            grads[i] = (activations[i].T @ delta, delta.sum(axis=0))
            if i > 0:
                delta = (delta @ W.T) * (1.0 - activations[i] ** 2)
        return grads

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def set_flat(self, vector: np.ndarray):
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.n_parameters:
            raise ParameterError(f'expected {self.n_parameters} parameters, got {vector.size}')
        offset, layers = 0, []
        for W, b in self.layers:
            W_new = vector[offset:offset + W.size].reshape(W.shape)
            offset += W.size
            b_new = vector[offset:offset + b.size].copy()
            offset += b.size
            layers.append((W_new.copy(), b_new))
        self.layers = layers

    def copy(self) -> 'MLPModel':
        return MLPModel(self.dim, self.n_classes, self.hidden, self.activation,
                        layers=[(W.copy(), b.copy()) for W, b in self.layers])

    def fingerprint(self) -> str:
        digest = hashlib.sha256(json.dumps(self.widths).encode())
        for W, b in self.layers:
            digest.update(np.ascontiguousarray(W).tobytes())
            digest.update(np.ascontiguousarray(b).tobytes())
        return digest.hexdigest()

    def __repr__(self):
        return f'MLPModel(widths={self.widths}, parameters={self.n_parameters})'


@dataclass
class OptimizerConfig:
    step_size: float = 1e-3
    iterations: int = 1000
    batch_size: int = 256
    label_drop: float = 0.1
    optimizer: str = 'sgd'
    weight_decay: float = 0.01
    grad_clip: float | None = None
    lr_schedule: str = 'constant'
    ema_decay: float | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.optimizer not in ('sgd', 'adamw'):
            raise ConfigError(f'Unsupported optimizer: {self.optimizer}')
        if self.lr_schedule not in ('constant', 'warmup_flat_cosine'):
            raise ConfigError(f'Unsupported lr_schedule: {self.lr_schedule}')
        if self.step_size <= 0 or self.iterations < 0 or self.batch_size < 1:
            raise ConfigError('step_size must be > 0, iterations >= 0, batch_size >= 1')
        if not 0.0 <= self.label_drop <= 1.0:
            raise ConfigError(f'label_drop must lie in [0, 1], got {self.label_drop}')


def learning_rate(cfg: OptimizerConfig, step: int) -> float:
    if cfg.lr_schedule == 'constant' or cfg.iterations == 0:
        return cfg.step_size
    warmup = max(1, int(0.02 * cfg.iterations))
    flat_end = int(0.60 * cfg.iterations)
    if step < warmup:
        return cfg.step_size * (step + 1) / warmup
    if step < flat_end:
        return cfg.step_size
    progress = (step - flat_end) / max(1, cfg.iterations - flat_end)
    return cfg.step_size * 0.5 * (1.0 + np.cos(np.pi * progress))


class Optimizer:
    """SGD (momentum-free) or AdamW over a model's layer list, with optional clipping and EMA."""

    def __init__(self, model: MLPModel, cfg: OptimizerConfig):
        self.cfg = cfg
        self.step_count = 0
        self._m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers]
        self._v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in model.layers]
        self.ema = model.copy() if cfg.ema_decay else None

    def step(self, model: MLPModel, grads):
        cfg = self.cfg
        lr = learning_rate(cfg, self.step_count)
        if cfg.grad_clip:
            norm = np.sqrt(sum(float(np.sum(gW ** 2) + np.sum(gb ** 2)) for gW, gb in grads))
            if norm > cfg.grad_clip:
                grads = [(gW * cfg.grad_clip / norm, gb * cfg.grad_clip / norm) for gW, gb in grads]
        self.step_count += 1
        updated = []
        for i, ((W, b), (gW, gb)) in enumerate(zip(model.layers, grads)):
            if cfg.optimizer == 'sgd':
                updated.append((W - lr * gW, b - lr * gb))
                continue
            beta1, beta2, eps = 0.9, 0.999, 1e-8
            mW, mb = self._m[i]
            vW, vb = self._v[i]
            mW, mb = beta1 * mW + (1 - beta1) * gW, beta1 * mb + (1 - beta1) * gb
            vW, vb = beta2 * vW + (1 - beta2) * gW ** 2, beta2 * vb + (1 - beta2) * gb ** 2
            self._m[i], self._v[i] = (mW, mb), (vW, vb)
            c1, c2 = 1 - beta1 ** self.step_count, 1 - beta2 ** self.step_count
            W = W * (1 - lr * cfg.weight_decay) - lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
            b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
            updated.append((W, b))
        model.layers = updated
        if self.ema is not None:
            d = cfg.ema_decay
            self.ema.layers = [(d * eW + (1 - d) * W, d * eb + (1 - d) * b)
                               for (eW, eb), (W, b) in zip(self.ema.layers, model.layers)]

    def result(self, model: MLPModel) -> MLPModel:
        return self.ema.copy() if self.ema is not None else model


def _payload_checksum(meta: dict, layers) -> str:
    digest = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
    for W, b in layers:
        digest.update(np.ascontiguousarray(W, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(b, dtype=np.float64).tobytes())
    return digest.hexdigest()


def save_checkpoint(model: MLPModel, path: str, params=None, sched=None, extra: dict | None = None) -> str:
    try:
        os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
        meta = {
            'format': CHECKPOINT_FORMAT,
            'version': CHECKPOINT_VERSION,
            'dim': model.dim,
            'n_classes': model.n_classes,
            'widths': list(model.widths),
            'activation': model.activation,
            'kac': params.describe() if params is not None else None,
            'schedule': sched.describe() if sched is not None else None,
            'extra': extra or {},
        }
        layers = [(np.ascontiguousarray(W), np.ascontiguousarray(b)) for W, b in model.layers]
        payload = {'meta': meta, 'layers': layers, 'checksum': _payload_checksum(meta, layers)}
        joblib.dump(payload, path)
        logger.info('Checkpoint saved to %s', path)
        return path
    except Exception as e:
        logger.error('Error occurred while saving the checkpoint: %s', e)
        raise


def load_checkpoint(path: str):
    """Load and validate a checkpoint; returns ``(model, meta)``."""
    try:
        payload = joblib.load(path)
    except FileNotFoundError:
        logger.error(f'Checkpoint not found at {path}')
        raise
    try:
        meta, layers = payload['meta'], payload['layers']
    except (KeyError, TypeError) as e:
        logger.error(f'Malformed checkpoint {path}: {e}')
        raise CheckpointError(f'malformed checkpoint {path}') from e
    if meta.get('format') != CHECKPOINT_FORMAT or meta.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(f'unsupported checkpoint format {meta.get("format")} v{meta.get("version")}')
    if _payload_checksum(meta, layers) != payload.get('checksum'):
        logger.error(f'Checksum mismatch for {path}')
        raise CheckpointError(f'checksum mismatch for {path}')
    widths = meta['widths']
    model = MLPModel(meta['dim'], meta['n_classes'], hidden=widths[1:-1], activation=meta['activation'], layers=layers)
    if list(model.widths) != widths:
        raise CheckpointError(f'widths {widths} do not match the encoded model {model.widths}')
    logger.info('Checkpoint loaded from %s', path)
    return model, meta
