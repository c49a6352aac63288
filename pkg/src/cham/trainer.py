"""Training loop: Nadam updates, linear warmup, dev-score decay,
selective weight decay, checkpointing, and JSON-lines metrics.

The learning rate ramps linearly from the start value to the peak over
the configured fraction of epochs, then multiplies by the decay factor
each time the dev cross-entropy fails to improve. Weight decay is
decoupled (applied directly to the value, not through the gradient) and
touches only the transposed-convolution kernels.

Everything is deterministic from the seed: batch order, augmentation
masks, and dropout all draw from streams keyed on (seed, purpose,
epoch, batch), so a resumed run continues exactly where an
uninterrupted one would be.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .augment import SpecAugmentConfig, spec_augment
from .common import EVAL, RunContext
from .corpus import Corpus, make_batches
from .heads import frame_errors
from .tensor import ConfigError, NumericError, Tensor


class CheckpointFormatError(ValueError):
    """Checkpoint file is missing, truncated, or an unknown version."""


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_start_lr: float = 0.0002
    warmup_peak_lr: float = 0.018
    warmup_epochs: float = 1.6
    newbob_decay: float = 0.9
    newbob_tolerance: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 27
    frame_budget: int = 10000

    def validate(self):
        if not 0.0 < self.newbob_decay < 1.0:
            raise ConfigError("newbob_decay must be in (0, 1)")
        if self.warmup_start_lr > self.warmup_peak_lr:
            raise ConfigError("warmup must not start above its peak")
        if self.frame_budget < 1:
            raise ConfigError("frame_budget must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    warmup_steps: float = 0.0
    num_decays: int = 0
    best_dev: float = float("inf")
    dev_history: list = field(default_factory=list)
    moments: dict = field(default_factory=dict)  # name -> (m, v) float64 arrays


def lr_at(step, cfg: OptimConfig, state: TrainState) -> float:
    """Linear warmup, then peak * decay^(non-improving dev evaluations)."""
    if state.warmup_steps > 0 and step < state.warmup_steps:
        frac = step / state.warmup_steps
        return cfg.warmup_start_lr + (cfg.warmup_peak_lr - cfg.warmup_start_lr) * frac
    return cfg.warmup_peak_lr * cfg.newbob_decay ** state.num_decays


def init_moments(store, state: TrainState):
    state.moments = {
        name: (np.zeros_like(p.data), np.zeros_like(p.data))
        for name, p in store.items()
    }


def nadam_step(store, state: TrainState, lr: float, cfg: OptimConfig):
    """One Adam-with-Nesterov-momentum update over all parameters.

    Aborts on non-finite gradients or values, naming the parameter.
    Decayed parameters shrink by lr * weight_decay * value every step,
    gradient or not.
    """
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.epsilon
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    decay_names = set(store.decay_names())
    # overflow surfaces as the explicit finiteness failure below
    with np.errstate(over="ignore", invalid="ignore"):
        for name, p in store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(
                    f"non-finite gradient for {name} at step {state.step}"
                )
            m, v = state.moments[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            m_bar = b1 * m_hat + (1.0 - b1) * g / bc1  # Nesterov lookahead
            p.data -= lr * m_bar / (np.sqrt(v_hat) + eps)
            if name in decay_names:
                p.data -= lr * cfg.weight_decay * p.data
            if not np.all(np.isfinite(p.data)):
                raise NumericError(
                    f"non-finite value in {name} after step {state.step}"
                )
    state.step += 1


class Trainer:
    def __init__(self, model, store, train_corpus: Corpus, dev_corpus: Corpus,
                 optim: OptimConfig, aug: SpecAugmentConfig, seed: int):
        optim.validate()
        self.model = model
        self.store = store
        self.train_corpus = train_corpus
        self.dev_corpus = dev_corpus
        self.optim = optim
        self.aug = aug
        self.seed = int(seed)
        self.state = TrainState()
        init_moments(store, self.state)
        steps_per_epoch = len(self._epoch_batches(0))
        self.state.warmup_steps = optim.warmup_epochs * steps_per_epoch

    def _epoch_batches(self, epoch):
        key = rng.derive_key(self.seed, "batches", epoch)
        return make_batches(self.train_corpus, self.optim.frame_budget, key)

    def _augmented_features(self, batch, epoch, batch_idx):
        if not self.aug.enabled:
            return batch.padded_features
        feats = batch.padded_features.copy()
        for i, utt in enumerate(batch.utterances):
            gen = rng.stream(self.seed, "augment", epoch, batch_idx, i)
            feats[i, :utt.num_frames] = spec_augment(utt.features, self.aug, gen)
        return feats

    def run_epoch(self) -> dict:
        """Train one epoch, evaluate dev, update the decay schedule."""
        epoch = self.state.epoch
        t0 = time.perf_counter()
        nll_sum = 0.0
        frames = 0
        wrong = 0
        for bi, batch in enumerate(self._epoch_batches(epoch)):
            feats = self._augmented_features(batch, epoch, bi)
            ctx = RunContext(train=True, rng=rng.stream(self.seed, "dropout", epoch, bi))
            logits = self.model.forward(Tensor(feats), batch.frame_mask, ctx)
            total, _ = self.model.loss(logits, batch.padded_alignment, batch.frame_mask)
            T.assert_finite(total, name=f"training loss at step {self.state.step}")
            self.store.zero_grads()
            T.backward(total)
            lr = lr_at(self.state.step, self.optim, self.state)
            nadam_step(self.store, self.state, lr, self.optim)

            final = logits["final"]
            nll_sum += _plain_ce(final.data, batch.padded_alignment, batch.frame_mask)
            w, n = frame_errors(final, batch.padded_alignment, batch.frame_mask)
            wrong += w
            frames += n

        dev_ce, dev_fer = self.evaluate(self.dev_corpus)
        improved = dev_ce < self.state.best_dev - self.optim.newbob_tolerance
        if not improved and self.state.step >= self.state.warmup_steps:
            self.state.num_decays += 1
        self.state.best_dev = min(self.state.best_dev, dev_ce)
        self.state.dev_history.append(dev_ce)
        self.state.epoch += 1
        del dev_fer
        return {
            "epoch": epoch,
            "step": self.state.step,
            "train_ce": nll_sum / max(frames, 1),
            "dev_ce": dev_ce,
            "frame_error_rate": wrong / max(frames, 1),
            "lr": lr_at(self.state.step, self.optim, self.state),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }

    def evaluate(self, corpus: Corpus):
        """(cross-entropy, frame error rate) with dropout off, no grads."""
        key = rng.derive_key(self.seed, "eval-batches")
        return evaluate_model(self.model, corpus, self.optim.frame_budget, key)

    def train(self, checkpoint_path=None, metrics_fh=None, config_text=""):
        """Run the remaining epochs; checkpoint and log after each one."""
        history = []
        if self.state.epoch == 0 and self.optim.epochs == 0 and checkpoint_path:
            save_checkpoint(checkpoint_path, self.store, self.state, config_text)
        while self.state.epoch < self.optim.epochs:
            metrics = self.run_epoch()
            history.append(metrics)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, self.store, self.state, config_text)
            if metrics_fh:
                json.dump(metrics, metrics_fh)
                metrics_fh.write("\n")
                metrics_fh.flush()
        return history


def _plain_ce(logits_data, alignment, mask):
    """Summed (not averaged) frame NLL, computed outside the graph."""
    z = logits_data - logits_data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = np.take_along_axis(z - lse, alignment[..., None], axis=-1)[..., 0]
    return float(-(logp * mask).sum())


def evaluate_model(model, corpus: Corpus, frame_budget: int, batch_key=0):
    """Frame-weighted (cross-entropy, frame error rate) over a corpus."""
    nll_sum = 0.0
    frames = 0
    wrong = 0
    with T.no_grad():
        for batch in make_batches(corpus, frame_budget, batch_key):
            logits = model.forward(Tensor(batch.padded_features),
                                   batch.frame_mask, EVAL)
            final = logits["final"]
            nll_sum += _plain_ce(final.data, batch.padded_alignment, batch.frame_mask)
            w, n = frame_errors(final, batch.padded_alignment, batch.frame_mask)
            wrong += w
            frames += n
    return nll_sum / max(frames, 1), wrong / max(frames, 1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"CHCK1"
_VERSION = 1


def _write_array(f, arr):
    arr = np.asarray(arr, dtype=np.float64)
    f.write(struct.pack("<B", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f8").tobytes())


def save_checkpoint(path, store, state: TrainState, config_text: str = ""):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        cfg_bytes = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        names = store.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            _write_array(f, store.get(name).data)
            m, v = state.moments[name]
            _write_array(f, m)
            _write_array(f, v)
        f.write(struct.pack("<QIId", state.step, state.epoch, state.num_decays,
                            state.best_dev))
        f.write(struct.pack("<d", state.warmup_steps))
        f.write(struct.pack("<I", len(state.dev_history)))
        for x in state.dev_history:
            f.write(struct.pack("<d", x))


def load_checkpoint(path):
    """Returns (config_text, {name: value array}, restored TrainState)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint")
    off = len(_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointFormatError(f"{path}: truncated")
        chunk = raw[off:off + n]
        off += n
        return chunk

    def read_array():
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        return np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()

    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {version}, expected {_VERSION}"
        )
    (cfg_len,) = struct.unpack("<I", take(4))
    config_text = take(cfg_len).decode("utf-8")
    (n_params,) = struct.unpack("<I", take(4))
    values = {}
    state = TrainState()
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        values[name] = read_array()
        state.moments[name] = (read_array(), read_array())
    step, epoch, num_decays, best_dev = struct.unpack("<QIId", take(24))
    (warmup_steps,) = struct.unpack("<d", take(8))
    (n_hist,) = struct.unpack("<I", take(4))
    hist = [struct.unpack("<d", take(8))[0] for _ in range(n_hist)]
    state.step = step
    state.epoch = epoch
    state.num_decays = num_decays
    state.best_dev = best_dev
    state.warmup_steps = warmup_steps
    state.dev_history = hist
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return config_text, values, state


def restore_trainer(trainer: Trainer, values, state: TrainState):
    """Load checkpointed values and schedule state into a fresh trainer."""
    trainer.store.load_values(values)
    if set(state.moments) != set(dict(trainer.store.items())):
        raise CheckpointFormatError("checkpoint moments do not match the model")
    trainer.state = state
