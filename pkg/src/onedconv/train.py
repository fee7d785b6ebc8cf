"""Desk-scale training and evaluation on (distorted) digit images.

Configs are plain ``key = value`` text mirroring :class:`TrainConfig`.
Checkpoints use a small binary container::

    b"ODC1" | u32 count | count x (u32 name_len | name | u32 ndim | u32 dims... | f32 data)

all little-endian, with the model graph written next to it as
``<checkpoint>.json``.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import struct
import time
from collections import OrderedDict
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .accounting import ModelGraph, build_model_graph
from .data import DistortionSpec, LabeledDataset, distort_dataset, load_idx, random_crop
from .network import Network

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ODC1"
_DATA = Path(__file__).resolve().parents[2] / "data"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "tiny-cnn"
    variant: str = "onedconv"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-3
    lr_decay_epochs: Tuple[int, ...] = ()
    lr_gamma: float = 0.1
    seed: int = 0
    data_seed: int = 0
    train_images: str = str(_DATA / "mnist5k-train-images-idx3-ubyte.gz")
    train_labels: str = str(_DATA / "mnist5k-train-labels-idx1-ubyte.gz")
    test_images: str = str(_DATA / "mnist5k-t10k-images-idx3-ubyte.gz")
    test_labels: str = str(_DATA / "mnist5k-t10k-labels-idx1-ubyte.gz")
    distortion: str = "origin"
    train_limit: int = 2000
    test_limit: int = 1000
    threads: int = 1
    augment_crop: bool = True
    log_seconds: bool = True
    out_dir: Optional[str] = None

    def validate(self) -> "TrainConfig":
        if self.model not in ("tiny-cnn", "resnet18"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.variant not in ("vanilla", "onedconv"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.distortion not in ("origin", "rotated", "rts"):
            raise ValueError(f"unknown distortion {self.distortion!r}")
        for name in ("epochs", "train_limit", "test_limit", "seed", "data_seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0, weight_decay >= 0, 0 <= momentum < 1")
        return self

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], raw)
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind.startswith("Tuple"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if kind.startswith("Optional") and raw.lower() in ("", "none"):
        return None
    return raw


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    seconds: float
    offset_dev: Dict[str, float] = field(default_factory=dict)


# datasets ---------------------------------------------------------------------

def load_datasets(cfg: TrainConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    train = load_idx(cfg.train_images, cfg.train_labels, cfg.train_limit)
    test = load_idx(cfg.test_images, cfg.test_labels, cfg.test_limit)
    if cfg.distortion != "origin":
        # disjoint per-image streams for the two splits
        train = distort_dataset(train, DistortionSpec.for_mode(cfg.distortion, 2 * cfg.data_seed))
        test = distort_dataset(test, DistortionSpec.for_mode(cfg.distortion, 2 * cfg.data_seed + 1))
    return train, test


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def build_network(cfg: TrainConfig, input_shape=(1, 32, 32), classes=10) -> Network:
    return Network(build_model_graph(cfg.model, cfg.variant, classes, input_shape), cfg.seed)


# evaluation -------------------------------------------------------------------

def evaluate(model: Network, ds: LabeledDataset, batch_size: int = 256, split: str = "test",
             epoch: int = 0, track_offsets: bool = True) -> MetricsRecord:
    """Mean loss and argmax accuracy (ties go to the lowest class index)."""
    start = time.perf_counter()
    dyn = model.dynamic_layers() if track_offsets else []
    for layer in dyn:
        layer.record_offsets = True
    dev_sum = {l.name: 0.0 for l in dyn}
    dev_count = {l.name: 0 for l in dyn}
    loss_sum, correct = 0.0, 0
    try:
        for i in range(0, len(ds), batch_size):
            x, y = ds.images[i:i + batch_size], ds.labels[i:i + batch_size]
            logits = model.forward(x, train=False)
            loss, _ = nn.softmax_cross_entropy(logits.astype(np.float64), y)
            loss_sum += loss * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
            for layer in dyn:
                dev = layer.deviation()
                dev_sum[layer.name] += float(dev.sum(dtype=np.float64))
                dev_count[layer.name] += dev.size
    finally:
        for layer in dyn:
            layer.record_offsets = False
            layer.last_offsets = None
    n = max(len(ds), 1)
    devs = {k: dev_sum[k] / max(dev_count[k], 1) for k in dev_sum}
    return MetricsRecord(epoch, split, loss_sum / n, correct / n, time.perf_counter() - start, devs)


# training ---------------------------------------------------------------------

def train(cfg: TrainConfig, datasets=None) -> Tuple[Network, List[MetricsRecord]]:
    """Minibatch SGD with momentum and weight decay; one train and one test record per epoch.

    Deterministic for a fixed config: shuffling and crops draw from a stream
    keyed by ``(seed, epoch)`` and BLAS is pinned to ``cfg.threads`` threads.
    """
    cfg.validate()
    train_ds, test_ds = datasets if datasets is not None else load_datasets(cfg)
    model = build_network(cfg, train_ds.images.shape[1:])
    params = model.parameters()
    opt = nn.SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    records: List[MetricsRecord] = []
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        metrics_path = out / "metrics.csv"
        if metrics_path.exists():
            metrics_path.unlink()

    with _thread_limit(cfg.threads):
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            opt.lr = cfg.lr * cfg.lr_gamma ** sum(epoch > e for e in cfg.lr_decay_epochs)
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(train_ds))
            loss_sum, correct = 0.0, 0
            for bi, i in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[i:i + cfg.batch_size]
                x = train_ds.images[idx]
                if cfg.augment_crop:
                    x = random_crop(x, rng)
                y = train_ds.labels[idx]
                logits = model.forward(x, train=True)
                loss, g = nn.softmax_cross_entropy(logits.astype(np.float64), y)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {bi} (lr={opt.lr}); "
                        f"max |logit| = {np.nanmax(np.abs(logits))}")
                model.backward(g)
                nn.sgd_step(params, model.gradients(), opt)
                loss_sum += loss * len(idx)
                correct += int((logits.argmax(axis=1) == y).sum())
            n = len(order)
            rec = MetricsRecord(epoch, "train", loss_sum / max(n, 1), correct / max(n, 1),
                                time.perf_counter() - start)
            test_rec = evaluate(model, test_ds, split="test", epoch=epoch)
            if not cfg.log_seconds:
                rec.seconds = test_rec.seconds = 0.0
            records += [rec, test_rec]
            log.info("epoch %d train loss %.4f acc %.4f | test loss %.4f acc %.4f",
                     epoch, rec.loss, rec.accuracy, test_rec.loss, test_rec.accuracy)
            if out is not None:
                append_metrics(out / "metrics.csv", [rec, test_rec], model)
    if out is not None:
        save_checkpoint(out / "model.odc", model)
    return model, records


# files ------------------------------------------------------------------------

def metrics_header(model: Network) -> List[str]:
    return ["epoch", "split", "loss", "accuracy", "seconds"] + [
        f"offset_dev_{l.name}" for l in model.dynamic_layers()]


def append_metrics(path, records: List[MetricsRecord], model: Network) -> None:
    path = Path(path)
    header = metrics_header(model)
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(header)
        for r in records:
            devs = [repr(r.offset_dev[l.name]) if l.name in r.offset_dev else ""
                    for l in model.dynamic_layers()]
            w.writerow([r.epoch, r.split, repr(r.loss), repr(r.accuracy), repr(r.seconds)] + devs)


def save_checkpoint(path, model: Network) -> None:
    path = Path(path)
    state = model.state()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        chunks.append(struct.pack(f"<I{len(raw)}sI", len(raw), raw, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(model.graph.to_json())


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ODC1 checkpoint")
    (count,), pos = struct.unpack_from("<I", buf, 4), 8
    state = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        state[name] = np.frombuffer(buf, "<f4", size, pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return state


def load_checkpoint(path, graph: Optional[ModelGraph] = None) -> Network:
    if graph is None:
        graph = ModelGraph.from_json(Path(str(path) + ".json").read_text())
    model = Network(graph)
    model.load_state(read_checkpoint(path))
    return model


def dump_offsets(model: Network, ds: LabeledDataset, out_path=None, batch_size: int = 256):
    """Per dynamic layer: mean and max of ``|d_i - square default|`` over ``ds``.

    Returns the rows (also written as CSV when ``out_path`` is given). The
    location of the maximum is ``(sample, filter, row, col)`` in the layer's
    output grid and ``offset`` is the signed displacement there.
    """
    dyn = model.dynamic_layers()
    if not dyn:
        raise ValueError("no dynamic layers")
    stats = {l.name: {"sum": 0.0, "count": 0, "max": -1.0, "where": None, "offset": 0.0}
             for l in dyn}
    for layer in dyn:
        layer.record_offsets = True
    try:
        for i in range(0, len(ds), batch_size):
            model.forward(ds.images[i:i + batch_size], train=False)
            for layer in dyn:
                st = stats[layer.name]
                dev = layer.deviation()
                st["sum"] += float(dev.sum(dtype=np.float64))
                st["count"] += dev.size
                k = int(dev.argmax())
                if dev.size and float(dev.flat[k]) > st["max"]:
                    b, f, r, c = np.unravel_index(k, dev.shape)
                    st["max"] = float(dev.flat[k])
                    st["where"] = (i + int(b), int(f), int(r), int(c))
                    st["offset"] = float(layer.last_offsets.flat[k])
    finally:
        for layer in dyn:
            layer.record_offsets = False
            layer.last_offsets = None
    rows = []
    for layer in dyn:
        st = stats[layer.name]
        where = st["where"] or (-1, -1, -1, -1)
        rows.append({"layer": layer.name, "mean_deviation": st["sum"] / max(st["count"], 1),
                     "max_deviation": max(st["max"], 0.0), "sample": where[0],
                     "filter": where[1], "row": where[2], "col": where[3],
                     "offset": st["offset"]})
    if out_path is not None:
        with Path(out_path).open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
