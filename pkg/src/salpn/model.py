"""Classifier heads (FC -> BN -> Dropout -> Cls), the summed cross-entropy
objective, SGD with momentum, and descriptor assembly.

One head exists per (part, stream) pair, 3N in total, with no parameter
sharing.  Gradients are derived by hand for this fixed architecture; the
backbone is the parameter-free handcrafted extractor, so only heads train.

Inputs are arrays shaped ``(batch, n_parts, 3, d_in)`` holding the global,
salient and background vectors of every part.  Class labels are 1-based.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import fmap_from_bytes, fmap_to_bytes

STREAMS = ("global", "salient", "background")
PARAMS = ("fc_w", "fc_b", "bn_gamma", "bn_beta", "cls_w", "cls_b")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ClassifierHead:
    fc_w: np.ndarray
    fc_b: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray
    dropout_rate: float = 0.0

    @classmethod
    def init(cls, d_in: int, d_mid: int, n_classes: int, rng: np.random.Generator,
             dropout_rate: float = 0.0, cls_std: float = 0.001) -> "ClassifierHead":
        return cls(
            fc_w=rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, d_mid)),
            fc_b=np.zeros(d_mid),
            bn_gamma=np.ones(d_mid),
            bn_beta=np.zeros(d_mid),
            bn_running_mean=np.zeros(d_mid),
            bn_running_var=np.ones(d_mid),
            cls_w=rng.normal(0.0, cls_std, (d_mid, n_classes)),
            cls_b=np.zeros(n_classes),
            dropout_rate=dropout_rate,
        )

    @property
    def d_in(self) -> int:
        return self.fc_w.shape[0]

    @property
    def d_mid(self) -> int:
        return self.fc_w.shape[1]

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[1]


@dataclass
class HeadBank:
    heads: list[ClassifierHead]
    n_parts: int

    @classmethod
    def init(cls, n_parts: int, d_in: int, d_mid: int, n_classes: int, seed: int = 0,
             dropout_rate: float = 0.0, cls_std: float = 0.001) -> "HeadBank":
        rng = np.random.default_rng(seed)
        heads = [ClassifierHead.init(d_in, d_mid, n_classes, rng, dropout_rate, cls_std)
                 for _ in range(3 * n_parts)]
        return cls(heads, n_parts)

    def head(self, n: int, stream: str) -> ClassifierHead:
        return self.heads[3 * n + STREAMS.index(stream)]

    @property
    def d_in(self) -> int:
        return self.heads[0].d_in

    @property
    def d_mid(self) -> int:
        return self.heads[0].d_mid

    @property
    def n_classes(self) -> int:
        return self.heads[0].n_classes


@dataclass
class TrainConfig:
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 120
    decay_epoch: int = 80
    lr_decay: float = 0.1
    horizontal_flip: bool = True

    def __post_init__(self):
        for name in ("lr_backbone", "lr_heads", "batch_size", "epochs", "decay_epoch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("momentum, weight_decay must be >= 0 and lr_decay in (0, 1]")
        if self.decay_epoch >= self.epochs:
            raise ValueError("decay_epoch must come before the last epoch")

    def lr_at(self, epoch: int) -> float:
        return self.lr_heads * (self.lr_decay if epoch >= self.decay_epoch else 1.0)


# -- forward ------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def _forward(head: ClassifierHead, x: np.ndarray, training: bool, rng=None):
    z = x @ head.fc_w + head.fc_b
    if training:
        mu = z.mean(axis=0)
        var = z.var(axis=0)
    else:
        mu, var = head.bn_running_mean, head.bn_running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    zh = (z - mu) * inv
    desc = head.bn_gamma * zh + head.bn_beta
    if training and head.dropout_rate > 0:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = 1.0 - head.dropout_rate
        mask = (rng.random(desc.shape) < keep) / keep
    else:
        mask = None
    dropped = desc if mask is None else desc * mask
    logits = dropped @ head.cls_w + head.cls_b
    cache = (x, z, mu, var, inv, zh, mask, dropped)
    return desc, logits, cache


def head_forward(head: ClassifierHead, x, training: bool = False, rng=None):
    """``(descriptor, logits)`` for one vector ``(d_in,)`` or a batch ``(B, d_in)``.

    In training mode BN normalises with the batch statistics and dropout is
    applied to the descriptor before the classification layer; the returned
    descriptor is always the pre-dropout BN output.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.d_in:
        raise ValueError(f"input dimension {x.shape[-1]} != head d_in {head.d_in}")
    single = x.ndim == 1
    desc, logits, _ = _forward(head, np.atleast_2d(x), training, rng)
    if single:
        return desc[0], logits[0]
    return desc, logits


def _as_batch(bank: HeadBank, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != (bank.n_parts, 3, bank.d_in):
        raise ValueError(f"expected inputs shaped (B, {bank.n_parts}, 3, {bank.d_in}), got {X.shape}")
    return X


def _labels(bank: HeadBank, y, batch: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (batch,) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers, one per sample")
    if y.min() < 1 or y.max() > bank.n_classes:
        raise ValueError(f"labels must lie in [1, {bank.n_classes}]")
    return y - 1


def bank_forward(bank: HeadBank, X, training: bool = False, rng=None):
    """Descriptors ``(B, N, 3, d_mid)`` and logits ``(B, N, 3, C)`` of every head."""
    X = _as_batch(bank, X)
    B = X.shape[0]
    desc = np.empty((B, bank.n_parts, 3, bank.d_mid))
    logits = np.empty((B, bank.n_parts, 3, bank.n_classes))
    for k, head in enumerate(bank.heads):
        n, s = divmod(k, 3)
        desc[:, n, s], logits[:, n, s], _ = _forward(head, X[:, n, s], training, rng)
    return desc, logits


def total_ce_loss(bank: HeadBank, X, y, training: bool = False, rng=None):
    """Cross-entropy summed over all 3N heads, averaged over the batch.

    Returns ``(loss, breakdown)`` where ``breakdown[n, s]`` is the batch-mean
    loss of head ``(n, STREAMS[s])``.
    """
    X = _as_batch(bank, X)
    yi = _labels(bank, y, X.shape[0])
    _, logits = bank_forward(bank, X, training, rng)
    nll = -np.take_along_axis(log_softmax(logits), yi[:, None, None, None], axis=-1)[..., 0]
    breakdown = nll.mean(axis=0)
    return float(breakdown.sum()), breakdown


def predict(bank: HeadBank, X) -> np.ndarray:
    """1-based class prediction from the summed softmax of all heads."""
    _, logits = bank_forward(bank, X, training=False)
    return softmax(logits).sum(axis=(1, 2)).argmax(axis=-1) + 1


def assemble_descriptor(bank: HeadBank, X) -> np.ndarray:
    """Inference-mode concatenation of all 3N BN outputs, ``(B, 3N*d_mid)``."""
    desc, _ = bank_forward(bank, X, training=False)
    return desc.reshape(desc.shape[0], -1)


# -- backward -----------------------------------------------------------------

def _backward(head: ClassifierHead, cache, dlogits: np.ndarray) -> dict:
    x, z, mu, var, inv, zh, mask, dropped = cache
    B = x.shape[0]
    g = {"cls_w": dropped.T @ dlogits, "cls_b": dlogits.sum(axis=0)}
    ddesc = dlogits @ head.cls_w.T
    if mask is not None:
        ddesc = ddesc * mask
    g["bn_gamma"] = (ddesc * zh).sum(axis=0)
    g["bn_beta"] = ddesc.sum(axis=0)
    dzh = ddesc * head.bn_gamma
    dz = inv / B * (B * dzh - dzh.sum(axis=0) - zh * (dzh * zh).sum(axis=0))
    g["fc_w"] = x.T @ dz
    g["fc_b"] = dz.sum(axis=0)
    return g


def compute_gradients(bank: HeadBank, X, y, rng=None):
    """Training-mode loss and per-head parameter gradients (no state change)."""
    X = _as_batch(bank, X)
    B = X.shape[0]
    yi = _labels(bank, y, B)
    onehot = np.zeros((B, bank.n_classes))
    onehot[np.arange(B), yi] = 1.0
    loss = 0.0
    grads, stats = [], []
    for k, head in enumerate(bank.heads):
        n, s = divmod(k, 3)
        _, logits, cache = _forward(head, X[:, n, s], True, rng)
        logp = log_softmax(logits)
        loss += -logp[np.arange(B), yi].mean()
        dlogits = (np.exp(logp) - onehot) / B
        grads.append(_backward(head, cache, dlogits))
        stats.append((cache[2], cache[3]))
    return float(loss), grads, stats


class SGD:
    """SGD with momentum and L2 weight decay, owning the velocity buffers."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, bank: HeadBank, grads: list[dict], lr: float) -> None:
        mom, wd = self.config.momentum, self.config.weight_decay
        for k, (head, g) in enumerate(zip(bank.heads, grads)):
            for name in PARAMS:
                p = getattr(head, name)
                d = g[name] + wd * p
                v = self.velocity.get((k, name))
                v = d if v is None else mom * v + d
                self.velocity[(k, name)] = v
                setattr(head, name, p - lr * v)


def _update_running_stats(bank: HeadBank, stats, batch: int) -> None:
    for head, (mu, var) in zip(bank.heads, stats):
        unbiased = var * batch / (batch - 1) if batch > 1 else var
        head.bn_running_mean = (1 - BN_MOMENTUM) * head.bn_running_mean + BN_MOMENTUM * mu
        head.bn_running_var = (1 - BN_MOMENTUM) * head.bn_running_var + BN_MOMENTUM * unbiased


def backward_and_step(bank: HeadBank, X, y, optimizer: SGD, lr: float | None = None,
                      rng=None) -> float:
    """One SGD step on a batch; updates ``bank`` in place and returns the loss."""
    X = _as_batch(bank, X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    loss, grads, stats = compute_gradients(bank, X, y, rng)
    optimizer.step(bank, grads, optimizer.config.lr_heads if lr is None else lr)
    _update_running_stats(bank, stats, X.shape[0])
    return loss


def train(bank: HeadBank, X, y, config: TrainConfig, seed: int = 0, X_flipped=None,
          log=None) -> list[float]:
    """Train ``bank`` in place; returns the mean loss of every epoch.

    ``X_flipped`` holds the inputs of the horizontally flipped images; with
    ``config.horizontal_flip`` each sample uses it with probability 0.5.
    Trailing batches of a single sample are dropped (batch statistics need two).
    """
    X = _as_batch(bank, X)
    y = np.asarray(y)
    if X_flipped is not None:
        X_flipped = _as_batch(bank, X_flipped)
    rng = np.random.default_rng(seed)
    opt = SGD(config)
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2 and len(order) > 1:
                continue
            xb = X[idx]
            if config.horizontal_flip and X_flipped is not None:
                flip = rng.random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None, None], X_flipped[idx], xb)
            losses.append(backward_and_step(bank, xb, y[idx], opt, lr, rng))
        history.append(float(np.mean(losses)))
        if log is not None:
            log(epoch, history[-1])
    return history


# -- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"SLPK"
CKPT_VERSION = 1


def _tensor_names(bank: HeadBank):
    fields = PARAMS + ("bn_running_mean", "bn_running_var")
    for k in range(len(bank.heads)):
        n, s = divmod(k, 3)
        for f in fields:
            yield k, f, f"part{n}.{STREAMS[s]}.{f}"


def save_checkpoint(path, bank: HeadBank, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Versioned container: JSON metadata then one FMAP block per named tensor."""
    meta = {
        "version": CKPT_VERSION,
        "n_parts": bank.n_parts,
        "d_in": bank.d_in,
        "d_mid": bank.d_mid,
        "n_classes": bank.n_classes,
        "dropout_rate": bank.heads[0].dropout_rate,
        "config": asdict(config) if config is not None else None,
        "extra": extra or {},
        "tensors": [],
    }
    blocks = []
    for k, f, name in _tensor_names(bank):
        arr = np.asarray(getattr(bank.heads[k], f))
        meta["tensors"].append({"name": name, "shape": list(arr.shape)})
        a2 = arr.reshape(1, 1, -1) if arr.ndim == 1 else arr.reshape(1, *arr.shape)
        enc = name.encode()
        blocks.append(struct.pack("<H", len(enc)) + enc + fmap_to_bytes(a2))
    mbytes = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(mbytes)) + mbytes)
        fh.write(struct.pack("<I", len(blocks)))
        for b in blocks:
            fh.write(b)


def load_checkpoint(path) -> tuple[HeadBank, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    meta = json.loads(buf[off:off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    shapes = {t["name"]: tuple(t["shape"]) for t in meta["tensors"]}
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        t, off = fmap_from_bytes(buf, off)
        tensors[name] = t.astype(np.float64).reshape(shapes[name])
    bank = HeadBank.init(meta["n_parts"], meta["d_in"], meta["d_mid"], meta["n_classes"],
                         dropout_rate=meta["dropout_rate"])
    for k, f, name in _tensor_names(bank):
        setattr(bank.heads[k], f, tensors[name])
    return bank, meta
