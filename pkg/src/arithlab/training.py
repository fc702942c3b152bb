"""Adam training loop: seeded shuffling, loss log, periodic atomic checkpoints."""

import csv
import math
import os
import tempfile
from dataclasses import dataclass, fields

import numpy as np

from .datagen import load_dataset_lines
from .model import (
    init_checkpoint,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
)

PRECISIONS = {"standard": np.float32, "wide": np.float64}
SCHEDULES = ("constant", "linear")


class TrainingError(ValueError):
    """Invalid training configuration, dataset, or a diverged run."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults follow the published fine-tuning setup."""

    epochs: int = 25
    learning_rate: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 100
    precision: str = "standard"
    lr_schedule: str = "constant"
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise TrainingError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise TrainingError(f"{name} must be in [0, 1), got {value}")
        if self.eps <= 0:
            raise TrainingError(f"eps must be positive, got {self.eps}")
        if self.eval_every < 1:
            raise TrainingError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.precision not in PRECISIONS:
            raise TrainingError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.lr_schedule not in SCHEDULES:
            raise TrainingError(f"lr_schedule must be one of {SCHEDULES}")
        if self.grad_clip < 0:
            raise TrainingError(f"grad_clip must be >= 0, got {self.grad_clip}")

    @classmethod
    def from_mapping(cls, mapping):
        """Build from string key/value pairs, as read from a config file."""
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in mapping.items():
            if key not in types:
                raise TrainingError(f"unknown training config key {key!r}")
            kind = types[key]
            try:
                if kind in (int, "int"):
                    kwargs[key] = int(value)
                elif kind in (float, "float"):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = str(value)
            except ValueError as exc:
                raise TrainingError(f"config key {key!r}: {exc}") from exc
        return cls(**kwargs)


def parse_key_value_file(path):
    """Read a config file of key = value lines; # starts a comment."""
    mapping = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrainingError(f"{path} line {lineno}: expected key = value")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


@dataclass
class AdamState:
    """First and second moment estimates plus the bias-correction step count."""

    m: dict
    v: dict
    t: int = 0


def init_adam_state(params):
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(params, grads, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction."""
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise TrainingError(
                f"non-finite gradient in tensor {name} at step {state.t + 1}"
            )
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, grad in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        params[name] -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def _clip_grads(grads, max_norm):
    total = math.sqrt(
        sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())
    )
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return grads


def prepare_sequences(lines, tokenizer, max_seq_len):
    """Tokenize observations as BOS + text + EOS; reject overlong lines up front."""
    sequences = []
    offenders = []
    for lineno, line in enumerate(lines, start=1):
        ids = [tokenizer.bos_id] + tokenizer.encode(line) + [tokenizer.eos_id]
        if len(ids) > max_seq_len:
            offenders.append((lineno, len(ids)))
        sequences.append(ids)
    if offenders:
        shown = ", ".join(f"line {n} ({k} tokens)" for n, k in offenders[:10])
        more = f", and {len(offenders) - 10} more" if len(offenders) > 10 else ""
        raise TrainingError(
            f"{len(offenders)} observations exceed max_seq_len {max_seq_len}: "
            f"{shown}{more}"
        )
    return sequences


def _pad_batch(seqs, pad_id):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, seq in enumerate(seqs):
        out[i, : len(seq)] = seq
    return out


def _save_adam_state(state, path):
    arrays = {f"m.{k}": v for k, v in state.m.items()}
    arrays.update({f"v.{k}": v for k, v in state.v.items()})
    arrays["t"] = np.array(state.t, dtype=np.int64)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".opt-", suffix=".npz", dir=directory)
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _load_adam_state(path, params):
    with np.load(path) as data:
        state = AdamState(
            m={k: data[f"m.{k}"] for k in params},
            v={k: data[f"v.{k}"] for k in params},
            t=int(data["t"]),
        )
    for k in params:
        if state.m[k].shape != params[k].shape:
            raise TrainingError(f"optimizer state shape mismatch for {k}")
    return state


def _write_loss_log(path, rows, append):
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(["step", "epoch", "loss"])
        for row in rows:
            writer.writerow(row)


def train(
    dataset_path,
    tokenizer,
    model_config,
    train_config,
    checkpoint_path=None,
    loss_log_path=None,
    resume_from=None,
    progress=None,
):
    """Train on one dataset file; returns (final checkpoint, loss-log rows).

    Shuffling is stateless: epoch e uses the permutation seeded by
    (seed, e), so a run resumed from a mid-training checkpoint walks the
    same batches as an uninterrupted one.
    """
    cfg = train_config
    if model_config.vocab_size != tokenizer.vocab_size:
        raise TrainingError(
            f"model vocab_size {model_config.vocab_size} != tokenizer "
            f"vocab size {tokenizer.vocab_size}"
        )
    lines = load_dataset_lines(dataset_path)
    if not lines:
        raise TrainingError(f"dataset {dataset_path} is empty")
    sequences = prepare_sequences(lines, tokenizer, model_config.max_seq_len)
    n = len(sequences)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config != model_config:
            raise TrainingError("resume checkpoint config does not match model config")
        if ckpt.dtype != PRECISIONS[cfg.precision]:
            raise TrainingError(
                f"resume checkpoint dtype {ckpt.dtype} does not match "
                f"precision {cfg.precision!r}"
            )
        opt_path = f"{resume_from}.opt"
        if os.path.exists(opt_path):
            state = _load_adam_state(opt_path, ckpt.params)
        elif ckpt.step == 0:
            state = init_adam_state(ckpt.params)
        else:
            raise TrainingError(f"missing optimizer state {opt_path} for resume")
    else:
        ckpt = init_checkpoint(model_config, seed=cfg.seed, dtype=PRECISIONS[cfg.precision])
        state = init_adam_state(ckpt.params)
    ckpt.rng_state = {"train_seed": cfg.seed}

    pad_id = tokenizer.pad_id
    dropout = model_config.dropout
    rows = []
    step = ckpt.step

    def checkpoint_now():
        if checkpoint_path is not None:
            save_checkpoint(ckpt, checkpoint_path)
            _save_adam_state(state, f"{checkpoint_path}.opt")

    first_epoch = min(step // steps_per_epoch, cfg.epochs) if steps_per_epoch else cfg.epochs
    for epoch in range(first_epoch, cfg.epochs):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        start_batch = step % steps_per_epoch if epoch == step // steps_per_epoch else 0
        for b in range(start_batch, steps_per_epoch):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = _pad_batch([sequences[i] for i in idx], pad_id)
            rng = np.random.default_rng([cfg.seed, 1000003, step]) if dropout > 0 else None
            loss, grads = loss_and_grads(ckpt, batch, pad_id, rng=rng)
            if cfg.grad_clip > 0:
                _clip_grads(grads, cfg.grad_clip)
            if cfg.lr_schedule == "linear":
                lr = cfg.learning_rate * (1.0 - step / total_steps)
            else:
                lr = cfg.learning_rate
            adam_step(
                ckpt.params, grads, state, lr,
                beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
            )
            step += 1
            ckpt.step = step
            rows.append((step, epoch + 1, loss))
            if progress is not None:
                progress(step, total_steps, loss)
            if step % cfg.eval_every == 0:
                checkpoint_now()
    checkpoint_now()
    if loss_log_path is not None:
        _write_loss_log(loss_log_path, rows, append=resume_from is not None)
    return ckpt, rows
