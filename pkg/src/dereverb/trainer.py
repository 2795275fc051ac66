"""Deterministic training loops, checkpointing, and loss logging.

A run is fully determined by (seed, config, example order, threads=1):
initialization and epoch shuffles draw from named streams of the master
seed, batches accumulate gradients in a fixed order, and the log records
every loss component per epoch. Checkpoints capture parameters (float32),
Adam state, and the shuffle RNG so a resumed run continues the same
trajectory up to storage precision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus, models
from .autodiff import no_grad
from .errors import (
    EmptySplit,
    KindMismatch,
    NonFiniteLoss,
    ParseError,
    VersionMismatch,
)
from .nn import Adam
from .seeding import rng_for

CKPT_MAGIC = b"DRVB"
CKPT_VERSION = 1
VAL_LIMIT = 32  # validation examples scored per epoch


@dataclass
class TrainConfig:
    model: str = "joint"
    epochs: int = 1
    batch_size: int = 4
    lr: float = 1e-4
    weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0   # 0: only the final checkpoint is written
    scale: str = "desk"

    def __post_init__(self):
        if self.model not in models.MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr < 0:
            raise ValueError("learning rate must not be negative")


@dataclass
class Checkpoint:
    kind: str
    config: dict
    epoch: int
    adam: dict                      # t, lr, beta1, beta2, eps
    rng_state: dict
    tensors: dict = field(default_factory=dict)  # name -> ndarray


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, version, u64 JSON length, JSON metadata, then
    the raw little-endian tensor data in metadata order."""
    entries = []
    blobs = []
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        dtype = "f4" if name.startswith("p.") else "f8"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(np.ascontiguousarray(arr, dtype="<" + dtype).tobytes())
    meta = json.dumps({
        "kind": ckpt.kind, "config": ckpt.config, "epoch": ckpt.epoch,
        "adam": ckpt.adam, "rng_state": ckpt.rng_state, "tensors": entries,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", CKPT_MAGIC, CKPT_VERSION, len(meta)))
        fh.write(meta)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated checkpoint")
    magic, version, meta_len = struct.unpack_from("<4sIQ", raw, 0)
    if magic != CKPT_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}")
    if len(raw) < 16 + meta_len:
        raise ParseError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[16:16 + meta_len])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad metadata: {exc}") from exc
    tensors = {}
    offset = 16 + meta_len
    for entry in meta["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        width = 4 if entry["dtype"] == "f4" else 8
        if offset + count * width > len(raw):
            raise ParseError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<" + entry["dtype"], count=count,
                            offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += count * width
    return Checkpoint(kind=meta["kind"], config=meta["config"],
                      epoch=meta["epoch"], adam=meta["adam"],
                      rng_state=meta["rng_state"], tensors=tensors)


def checkpoint_from_state(model, opt: Adam, epoch: int, shuffle_rng) -> Checkpoint:
    tensors = {}
    for (name, p), m, v in zip(model.params(), opt.m, opt.v):
        tensors["p." + name] = p.data.astype(np.float32)
        tensors["m." + name] = m.copy()
        tensors["v." + name] = v.copy()
    return Checkpoint(
        kind=model.kind, config=model.config_dict(), epoch=epoch,
        adam={"t": opt.t, "lr": opt.lr, "beta1": opt.beta1,
              "beta2": opt.beta2, "eps": opt.eps},
        rng_state=shuffle_rng.bit_generator.state,
        tensors=tensors)


def restore_model(ckpt: Checkpoint):
    """Rebuild the model and overwrite its parameters from the checkpoint."""
    model = models.build_model_from_config(ckpt.kind, ckpt.config)
    for name, p in model.params():
        stored = ckpt.tensors.get("p." + name)
        if stored is None:
            raise ParseError(f"checkpoint is missing tensor {name!r}")
        if tuple(stored.shape) != p.data.shape:
            raise ParseError(
                f"tensor {name!r} has shape {stored.shape}, expected {p.data.shape}")
        p.data = stored.astype(np.float64)
    return model


def _restore_optimizer(model, ckpt: Checkpoint) -> Adam:
    opt = Adam([p for _, p in model.params()],
               lr=ckpt.adam["lr"], beta1=ckpt.adam["beta1"],
               beta2=ckpt.adam["beta2"], eps=ckpt.adam["eps"])
    opt.t = ckpt.adam["t"]
    opt.m = [ckpt.tensors["m." + name].astype(np.float64)
             for name, _ in model.params()]
    opt.v = [ckpt.tensors["v." + name].astype(np.float64)
             for name, _ in model.params()]
    return opt


# ---------------------------------------------------------------------------
# Loss per model kind
# ---------------------------------------------------------------------------

def example_losses(model, example, weights):
    """(total, l_dry, l_rir, l_rec) tensors for one example."""
    if model.kind == "joint":
        dry_est, rir_est = model.forward(example.input_logmag)
        return models.joint_loss(dry_est, rir_est, example, weights)
    zero = ad.Tensor(0.0)
    if model.kind == "rir":
        loss = ad.mse(model.forward(example.input_logmag), example.rir_target_mag)
        return loss, zero, loss, zero
    loss = ad.mse(model.forward(example.input_logmag), example.dry_target_logmag)
    return loss, loss, zero, zero


def _component_values(parts):
    return np.array([float(p.data) for p in parts])


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(config: TrainConfig, train_examples, val_examples=(),
          start: Checkpoint | None = None, checkpoint_path=None,
          log_path=None):
    """Run the epoch loop and return (model, rows, final checkpoint).

    Rows are (epoch, split, total, l_dry, l_rir, l_rec) with one train row
    per epoch and one val row when validation examples are given. `start`
    resumes from a checkpoint: parameters, Adam moments, shuffle RNG, and
    the epoch counter continue where they left off.
    """
    if not train_examples:
        raise EmptySplit("no training examples")

    if start is not None:
        if start.kind != config.model:
            raise KindMismatch(
                f"checkpoint holds {start.kind!r}, config wants {config.model!r}")
        model = restore_model(start)
        opt = _restore_optimizer(model, start)
        shuffle_rng = np.random.default_rng()
        shuffle_rng.bit_generator.state = start.rng_state
        first_epoch = start.epoch + 1
    else:
        weights = config.weights if config.model == "joint" else None
        model = models.build_model(config.model, scale=config.scale,
                                   rng=rng_for(config.seed, "init"),
                                   weights=weights)
        opt = Adam([p for _, p in model.params()], lr=config.lr)
        shuffle_rng = rng_for(config.seed, "shuffle")
        first_epoch = 1

    rows = []
    for epoch in range(first_epoch, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_examples))
        epoch_sum = np.zeros(4)
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            opt.zero_grad()
            for idx in batch:
                parts = example_losses(model, train_examples[idx], config.weights)
                values = _component_values(parts)
                if not np.all(np.isfinite(values)):
                    raise NonFiniteLoss(
                        f"epoch {epoch}, example {idx}: components {values}")
                ad.backward(ad.mul(parts[0], 1.0 / len(batch)))
                epoch_sum += values
            opt.step()
        rows.append((epoch, "train", *(epoch_sum / len(order))))

        if val_examples:
            val_sum = np.zeros(4)
            subset = val_examples[:VAL_LIMIT]
            with no_grad():
                for ex in subset:
                    val_sum += _component_values(
                        example_losses(model, ex, config.weights))
            rows.append((epoch, "val", *(val_sum / len(subset))))

        if checkpoint_path and config.checkpoint_every \
                and epoch % config.checkpoint_every == 0:
            save_checkpoint(
                checkpoint_from_state(model, opt, epoch, shuffle_rng),
                checkpoint_path)

    final = checkpoint_from_state(model, opt, config.epochs, shuffle_rng)
    if checkpoint_path:
        save_checkpoint(final, checkpoint_path)
    if log_path:
        write_log(rows, log_path)
    return model, rows, final


def resume(checkpoint: Checkpoint, config: TrainConfig, train_examples,
           val_examples=(), checkpoint_path=None, log_path=None):
    """Continue training to config.epochs from a saved checkpoint."""
    return train(config, train_examples, val_examples, start=checkpoint,
                 checkpoint_path=checkpoint_path, log_path=log_path)


def write_log(rows, path) -> None:
    lines = ["epoch,split,total,l_dry,l_rir,l_rec"]
    for epoch, split, total, l_dry, l_rir, l_rec in rows:
        lines.append(f"{epoch},{split},{total:.12g},{l_dry:.12g},"
                     f"{l_rir:.12g},{l_rec:.12g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Cached-example lookup
# ---------------------------------------------------------------------------

def split_cache_paths(manifest, examples_dir, split):
    by_id = {r.id: r.split for r in manifest.rirs}
    return [Path(examples_dir) / corpus.pair_cache_name(p)
            for p in manifest.pairs if by_id.get(p.rir_id) == split]


def load_split_examples(manifest, examples_dir, split):
    paths = split_cache_paths(manifest, examples_dir, split)
    return [corpus.load_example(p) for p in paths]
