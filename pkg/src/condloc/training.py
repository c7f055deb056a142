"""Contrastive training loop and the binary checkpoint container."""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import CheckpointError, ConfigError, MiningError
from .mining import MiningConfig, build_training_tuples, resample_reference
from .model import ModelParams, NetworkConfig, describe, describe_batch, init_params
from .synthworld import Dataset

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CLOC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 20
    margin: float = 0.7
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    snapshot_every: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("training.epochs", "must be >= 1")
        if self.margin <= 0:
            raise ConfigError("training.margin", "must be > 0")
        if self.lr <= 0:
            raise ConfigError("training.lr", "must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("training.optimizer", "must be 'adam' or 'sgd'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("training.dtype", "must be 'float32' or 'float64'")
        return self

    def optimizer_state(self) -> nx.OptimizerState:
        return nx.OptimizerState(lr=self.lr, mode=self.optimizer, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


# loss ------------------------------------------------------------------------


def pair_loss(query: nx.Tensor, others: nx.Tensor, labels, margin: float) -> nx.Tensor:
    """Summed contrastive loss of one query row (1, K) against rows of ``others``.

    Label 1 contributes the squared distance, label 0 the squared hinge
    ``max(0, margin - distance)**2``.
    """
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"labels must be 0 or 1, got {labels}")
    sq = nx.total(nx.square(others - query), axis=1)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    terms = []
    if len(pos):
        terms.append(nx.total(nx.take(sq, pos)))
    if len(neg):
        dist = nx.sqrt(nx.take(sq, neg))
        terms.append(nx.total(nx.square(nx.relu(margin - dist))))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def contrastive_loss(d_i, d_j, label: int, m: float = 0.7) -> float:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    if m <= 0:
        raise ValueError("margin must be positive")
    g = nx.Graph()
    q = g.constant(np.asarray(d_i, dtype=np.float64)[None])
    o = g.constant(np.asarray(d_j, dtype=np.float64)[None])
    return float(pair_loss(q, o, [label], m).data)


def tuple_loss_and_grads(
    params: ModelParams, net: NetworkConfig, images: np.ndarray, conditions, labels, margin: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of one tuple (row 0 is the query) and gradients of reachable parameters."""
    g = nx.Graph()
    d = describe(g, params, net, images, conditions)
    loss = pair_loss(nx.take(d, slice(0, 1)), nx.take(d, slice(1, None)), labels, margin)
    return float(loss.data), nx.backward(g, loss)


# training loop ---------------------------------------------------------------


@dataclass
class TrainState:
    params: ModelParams
    optimizer: nx.OptimizerState
    epoch: int = 0  # epochs completed
    history: list = field(default_factory=list)
    seed: int = 0
    rng_state: dict | None = None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 0x7A])


def train(
    dataset: Dataset,
    net: NetworkConfig,
    cfg: TrainConfig,
    mining: MiningConfig,
    seed: int,
    resume: TrainState | None = None,
    checkpoint_path=None,
    stop_after: int | None = None,
) -> TrainState:
    """Train for ``cfg.epochs`` epochs (or until ``stop_after`` epochs are done).

    Every epoch draws a fresh reference subset, re-mines tuples with the
    current model's descriptors, and takes one optimizer step per tuple.
    All randomness is keyed by (seed, epoch), so a resumed run replays the
    same stream as an uninterrupted one.
    """
    cfg.validate()
    mining.validate()
    net.validate([c.name for c in dataset.conditions])
    dtype = np.dtype(cfg.dtype)
    if resume is None:
        state = TrainState(init_params(net, seed, dtype), cfg.optimizer_state(), 0, [], seed)
    else:
        state = resume
    pixels = {im.image_id: im.pixels.astype(dtype) for im in dataset.images}
    condition_of = {im.image_id: im.condition for im in dataset.images}
    ref_all = [r.image_id for r in dataset.split("reference")]
    mixed_ids = [m.image_id for m in dataset.split("mixed")]
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)

    while state.epoch < last:
        epoch = state.epoch
        count = min(mining.reference_resample_count, len(ref_all))
        ref_ids = resample_reference(ref_all, count, seed, epoch)
        descriptors = None
        if mining.hard_negatives:
            pool = ref_ids + mixed_ids
            descs = describe_batch(state.params, net, np.stack([pixels[i] for i in pool]), [condition_of[i] for i in pool])
            descriptors = dict(zip(pool, descs))
        tuples = build_training_tuples(dataset, mining, epoch, seed, descriptors, ref_ids)
        if not tuples:
            raise MiningError(f"epoch {epoch}: no training tuples")
        rng = _epoch_rng(seed, epoch)
        losses = []
        for ti in rng.permutation(len(tuples)):
            t = tuples[ti]
            ids = t.image_ids
            loss, grads = tuple_loss_and_grads(
                state.params, net, np.stack([pixels[i] for i in ids]), [condition_of[i] for i in ids],
                t.labels, cfg.margin,
            )
            named = state.params.named()
            sub = {k: named[k] for k in grads}
            updated, state.optimizer = nx.optimizer_step(sub, grads, state.optimizer)
            named.update(updated)
            state.params = ModelParams.from_named(named, net.N_c)
            losses.append(loss)
        state.history.append(float(np.mean(losses)))
        state.epoch = epoch + 1
        state.rng_state = np.random.default_rng([seed, state.epoch]).bit_generator.state
        log.info("epoch %d/%d: %d tuples, mean loss %.5f", state.epoch, cfg.epochs, len(tuples), state.history[-1])
        if checkpoint_path and cfg.snapshot_every and state.epoch % cfg.snapshot_every == 0:
            save_checkpoint(state, net, checkpoint_path)
    return state


# checkpoint ------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def save_checkpoint(state: TrainState, net: NetworkConfig, path, config_hash: str = "") -> Path:
    """Layout: b"CLOC", u32 version, u64 header length, JSON header, then per
    array a u64 byte length and little-endian data in header order, then a u32
    CRC-32 of everything before it."""
    arrays = {f"param/{k}": v for k, v in state.params.named().items()}
    arrays.update({f"m/{k}": v for k, v in state.optimizer.m.items()})
    arrays.update({f"v/{k}": v for k, v in state.optimizer.v.items()})
    opt = state.optimizer
    header = {
        "network": asdict(net),
        "epoch": state.epoch,
        "seed": state.seed,
        "history": state.history,
        "rng_state": state.rng_state,
        "config_hash": config_hash,
        "optimizer": {
            "lr": opt.lr, "mode": opt.mode, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "step": opt.step, "counts": opt.counts,
        },
        "arrays": [
            {"name": k, "dtype": np.dtype(v.dtype).newbyteorder("<").str, "shape": list(v.shape)}
            for k, v in arrays.items()
        ],
    }
    buf = io.BytesIO()
    hbytes = json.dumps(header, default=_json_default, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for k, v in arrays.items():
        if v.dtype not in (np.float32, np.float64):
            raise CheckpointError(f"array {k} has unsupported dtype {v.dtype}")
        data = np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes()
        buf.write(struct.pack("<Q", len(data)))
        buf.write(data)
    body = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[TrainState, NetworkConfig, dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path} is corrupt or truncated (checksum mismatch)")
    off = 16
    try:
        header = json.loads(body[off : off + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        if off + 8 > len(body):
            raise CheckpointError("checkpoint ends inside the array table")
        (n,) = struct.unpack_from("<Q", body, off)
        off += 8
        dt = np.dtype(entry["dtype"])
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        if n != expected or off + n > len(body):
            raise CheckpointError(f"array {entry['name']} has inconsistent length")
        arrays[entry["name"]] = np.frombuffer(body, dtype=dt, count=n // dt.itemsize, offset=off).reshape(entry["shape"]).astype(dt.newbyteorder("="))
        off += n
    if off != len(body):
        raise CheckpointError("trailing bytes after the last array")

    net = NetworkConfig(**header["network"])
    pick = lambda prefix: {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
    params = ModelParams.from_named(pick("param/"), net.N_c)
    o = header["optimizer"]
    opt = nx.OptimizerState(
        lr=o["lr"], mode=o["mode"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
        m=pick("m/"), v=pick("v/"), counts={k: int(v) for k, v in o["counts"].items()},
    )
    state = TrainState(params, opt, header["epoch"], list(header["history"]), header["seed"], header["rng_state"])
    return state, net, header


def write_loss_history(history, path, config_hash: str = "") -> Path:
    path = Path(path)
    lines = [f"# config_hash={config_hash}"] if config_hash else []
    lines.append("epoch,mean_loss")
    lines += [f"{i + 1},{v!r}" for i, v in enumerate(history)]
    path.write_text("\n".join(lines) + "\n")
    return path
