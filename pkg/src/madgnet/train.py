"""Adam, cosine annealing, the training loop and the binary checkpoint format.

Checkpoint layout (all integers u32 little-endian)::

    b"MADG" | version | entry count | entries...
    entry = name length | name (utf-8) | rank | dims[rank] | float64 LE payload

Entries, in order: ``meta/epoch``, ``meta/config`` (config text, one byte
per float), ``rng/pcg64`` (generator state as 32-bit words), ``adam/step``,
then ``param/<name>``, ``adam/m/<name>`` and ``adam/v/<name>`` per parameter.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, parse_config
from .data import MULTISCALE_FACTORS, SampleRecord, augment, multiscale_resize, stack_batch
from .errors import ContractError, ParseError, TrainingError
from .losses import GroundTruthSet, network_loss
from .network import MADGNet
from .tensor import Tensor

MAGIC = b"MADG"
VERSION = 1


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimizerState(
            {k: np.zeros_like(p.data) for k, p in self.params.items()},
            {k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        st = self.state
        for name, p in self.params.items():
            if st.m[name].shape != p.shape:
                raise ContractError(f"{name}: parameter shape {p.shape} drifted from {st.m[name].shape}")
            if p.grad is not None and p.grad.shape != p.shape:
                raise ContractError(f"{name}: gradient shape {p.grad.shape} != {p.shape}")
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr != 0.0:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


def cosine_lr(epoch: float, total_epochs: int, lr_max: float = 1e-4, lr_min: float = 1e-6) -> float:
    if total_epochs <= 0:
        raise ContractError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def epoch_lr(epoch: int, epochs: int, lr_max: float, lr_min: float) -> float:
    """Schedule used by the loop: epoch 0 runs at lr_max, the last epoch at lr_min."""
    if epochs == 1:
        return lr_max
    return cosine_lr(epoch, epochs - 1, lr_max, lr_min)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * f
    return total


# ---------------------------------------------------------------------------
# checkpoint container


def encode_entries(entries: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        a = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def decode_entries(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ParseError("not a checkpoint: bad magic", 0)
    pos = 4

    def u32(n: int = 1):
        nonlocal pos
        if pos + 4 * n > len(buf):
            raise ParseError("truncated checkpoint", pos)
        vals = struct.unpack_from(f"<{n}I", buf, pos)
        pos += 4 * n
        return vals

    version, count = u32(2)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    entries = {}
    for _ in range(count):
        (nlen,) = u32()
        if pos + nlen > len(buf):
            raise ParseError("truncated entry name", pos)
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = u32()
        dims = u32(rank) if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(buf):
            raise ParseError(f"truncated payload for {name!r}", pos)
        entries[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
    if pos != len(buf):
        raise ParseError("trailing bytes after last entry", pos)
    return entries


def _words(value: int, n: int) -> list[float]:
    return [float((value >> (32 * i)) & 0xFFFFFFFF) for i in range(n)]


def _unwords(words) -> int:
    return sum(int(w) << (32 * i) for i, w in enumerate(words))


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ContractError("only PCG64 generators can be checkpointed")
    return np.array(_words(st["state"]["state"], 4) + _words(st["state"]["inc"], 4)
                    + [float(st["has_uint32"]), float(st["uinteger"])])


def rng_from_array(arr: np.ndarray) -> np.random.Generator:
    a = np.asarray(arr)
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": _unwords(a[:4]), "inc": _unwords(a[4:8])},
        "has_uint32": int(a[8]),
        "uinteger": int(a[9]),
    }
    return rng


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    adam: OptimizerState
    rng_state: np.ndarray
    epoch: int

    def to_entries(self) -> dict[str, np.ndarray]:
        e = {
            "meta/epoch": np.array(float(self.epoch)),
            "meta/config": np.frombuffer(self.config_text.encode("utf-8"), dtype=np.uint8).astype(np.float64),
            "rng/pcg64": self.rng_state,
            "adam/step": np.array(float(self.adam.step)),
        }
        for name, arr in self.params.items():
            e[f"param/{name}"] = arr
            e[f"adam/m/{name}"] = self.adam.m[name]
            e[f"adam/v/{name}"] = self.adam.v[name]
        return e

    @classmethod
    def from_entries(cls, e: dict[str, np.ndarray]) -> "Checkpoint":
        try:
            config_text = e["meta/config"].astype(np.uint8).tobytes().decode("utf-8")
            params = {k[6:]: v for k, v in e.items() if k.startswith("param/")}
            adam = OptimizerState(
                {n: e[f"adam/m/{n}"] for n in params},
                {n: e[f"adam/v/{n}"] for n in params},
                int(e["adam/step"]),
            )
            return cls(config_text, params, adam, e["rng/pcg64"], int(e["meta/epoch"]))
        except KeyError as exc:
            raise ParseError(f"checkpoint lacks entry {exc}") from None

    def to_bytes(self) -> bytes:
        return encode_entries(self.to_entries())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        return cls.from_entries(decode_entries(buf))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def config(self) -> ExperimentConfig:
        return parse_config(self.config_text)

    def model(self) -> MADGNet:
        net = MADGNet(self.config().network, seed=None)
        net.load_state_dict(self.params)
        return net


def save_checkpoint(path, model: MADGNet, opt: Adam, rng, epoch: int, cfg: ExperimentConfig) -> Checkpoint:
    ck = Checkpoint(cfg.to_text(), model.state_dict(),
                    OptimizerState({k: v.copy() for k, v in opt.state.m.items()},
                                   {k: v.copy() for k, v in opt.state.v.items()}, opt.state.step),
                    rng_to_array(rng), epoch)
    ck.save(path)
    return ck


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: MADGNet
    optimizer: Adam
    epochs_run: int
    log: list[tuple[int, int, float, float]]


def make_batch(samples: Sequence[SampleRecord], rng, multiscale: bool) -> tuple[Tensor, list[GroundTruthSet]]:
    images, regions = stack_batch(samples)
    if multiscale:
        factor = MULTISCALE_FACTORS[int(rng.integers(len(MULTISCALE_FACTORS)))]
        images, regions = multiscale_resize(images, regions, factor)
        return Tensor(images), [GroundTruthSet.from_region(regions)]
    gts = GroundTruthSet(regions,
                         np.stack([s.boundary[None] for s in samples]),
                         np.stack([s.distance[None] for s in samples]))
    return Tensor(images), [gts]


def _log_line(epoch: int, step: int, lr: float, loss: float) -> str:
    return f"{epoch}\t{step}\t{lr!r}\t{loss!r}\n"


def train_loop(
    cfg: ExperimentConfig,
    samples: Sequence[SampleRecord],
    ckpt_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[int, MADGNet], None] | None = None,
) -> TrainResult:
    """Train on in-memory samples; see the module docstring for the checkpoint format.

    Batches are drawn from a seeded permutation each epoch; the same generator
    drives augmentation, so a fixed seed gives a bit-identical loss log.
    """
    tc = cfg.train
    if len(samples) == 0:
        raise ContractError("cannot train on an empty dataset")
    size = cfg.network.input_size
    for s in samples:
        if s.region.shape != tuple(size):
            raise ContractError(f"sample {s.sample_id} is {s.region.shape}, config expects {size}")
    if cfg.network.M != 1:
        raise ContractError("the training loop supports single-label data (M = 1)")

    if resume is not None:
        model = resume.model()
        opt = Adam(model.named_parameters())
        opt.state = OptimizerState({k: v.copy() for k, v in resume.adam.m.items()},
                                   {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.step)
        rng = rng_from_array(resume.rng_state)
        start = resume.epoch
    else:
        model = MADGNet(cfg.network, seed=tc.seed)
        opt = Adam(model.named_parameters())
        rng = np.random.default_rng(tc.seed)
        start = 0

    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w")
    log = []
    lambdas = tc.lambdas()
    params = list(opt.params.values())
    try:
        for epoch in range(start, tc.epochs):
            lr = epoch_lr(epoch, tc.epochs, tc.lr_max, tc.lr_min)
            order = rng.permutation(len(samples))
            for step, lo in enumerate(range(0, len(order), tc.batch_size)):
                idx = order[lo : lo + tc.batch_size]
                batch = [samples[i] for i in idx]
                if tc.augment:
                    batch = [augment(s, rng) for s in batch]
                x, gts = make_batch(batch, rng, tc.multiscale)
                loss = network_loss(model(x), gts, lambdas)
                value = loss.item()
                if not math.isfinite(value):
                    ids = ", ".join(s.sample_id or str(i) for s, i in zip(batch, idx))
                    raise TrainingError(f"non-finite loss {value!r} at epoch {epoch} step {step}; batch: {ids}")
                opt.zero_grad()
                T.backward(loss)
                if tc.grad_clip > 0:
                    clip_grad_norm(params, tc.grad_clip)
                opt.step(lr)
                log.append((epoch, step, lr, value))
                if log_fh is not None:
                    log_fh.write(_log_line(epoch, step, lr, value))
            if log_fh is not None:
                log_fh.flush()
            done = epoch + 1
            if ckpt_path is not None and tc.checkpoint_every and done % tc.checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, opt, rng, done, cfg)
            if on_epoch is not None:
                on_epoch(done, model)
    finally:
        if log_fh is not None:
            log_fh.close()
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model, opt, rng, tc.epochs, cfg)
    return TrainResult(model, opt, tc.epochs - start, log)


def predict_probs(model: MADGNet, samples: Sequence[SampleRecord], batch_size: int = 8) -> list[np.ndarray]:
    """Stage-4 core probability maps (label 0), one 2-D array per sample."""
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        x = Tensor(np.stack([s.image for s in chunk]))
        logits = model.core_logits(x)
        out.extend(T.sigmoid_array(logits[:, 0]))
    return out
