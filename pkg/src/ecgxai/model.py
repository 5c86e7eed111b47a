"""The heartbeat classifier: a small 1D CNN built on the autodiff engine.

Architecture (input 216x1): three Conv/MaxPool/Dropout blocks with kernel
sizes 50/10/5 and channel widths 64/32/16, then Dense 32 -> Dense 16 ->
Dense num_classes. ReLU follows each conv and the first two dense layers;
the head stays linear and is normalized by softmax at prediction time.
Per-layer parameter counts for a 23-class head:
3,264 / 20,512 / 2,576 / 8,224 / 528 / 391 (total 35,495).
"""

from __future__ import annotations

import copy
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"ECGXAI\x00"
CHECKPOINT_VERSION = 1

DEFAULT_KERNEL_SIZES = (50, 10, 5)
DEFAULT_CONV_CHANNELS = (64, 32, 16)
DEFAULT_DENSE_WIDTHS = (32, 16)
INPUT_LENGTH = 216


class CheckpointError(Exception):
    pass


class TrainingDivergedError(Exception):
    pass


# --- layer records -----------------------------------------------------------
# The explicit layer list is walked by forward() and, independently, by the
# DeepLIFT multiplier propagation in ecgxai.explain.


@dataclass
class Conv:
    kernels: ad.Tensor
    bias: ad.Tensor


@dataclass
class ReLU:
    pass


@dataclass
class MaxPool:
    pool: int = 2


@dataclass
class Dropout:
    rate: float = 0.3


@dataclass
class Flatten:
    pass


@dataclass
class Dense:
    weights: ad.Tensor
    bias: ad.Tensor


class Network:
    """Layer list + parameter tensors + the symbol/index mapping."""

    def __init__(self, num_classes: int = 6, seed: int = 0,
                 kernel_sizes=DEFAULT_KERNEL_SIZES,
                 conv_channels=DEFAULT_CONV_CHANNELS,
                 dense_widths=DEFAULT_DENSE_WIDTHS,
                 dropout_rate: float = 0.3,
                 input_length: int = INPUT_LENGTH,
                 class_index: dict[str, int] | None = None,
                 preprocess_fingerprint: str = ""):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if class_index is not None and sorted(class_index.values()) != list(range(num_classes)):
            raise ValueError("class_index must map symbols onto 0..num_classes-1")
        self.num_classes = num_classes
        self.seed = seed
        self.kernel_sizes = tuple(kernel_sizes)
        self.conv_channels = tuple(conv_channels)
        self.dense_widths = tuple(dense_widths)
        self.dropout_rate = dropout_rate
        self.input_length = input_length
        self.class_index = dict(class_index) if class_index else {str(i): i for i in range(num_classes)}
        self.preprocess_fingerprint = preprocess_fingerprint

        rng = np.random.default_rng(seed)
        self.layers: list = []
        length, channels = input_length, 1
        for K, width in zip(self.kernel_sizes, self.conv_channels):
            if length < K:
                raise ValueError(
                    f"input length {input_length} too short for kernel plan {kernel_sizes}")
            fan_in = K * channels
            kernels = ad.Tensor(ad.he_uniform((K, channels, width), fan_in, rng), requires_grad=True)
            bias = ad.Tensor(np.zeros(width), requires_grad=True)
            self.layers += [Conv(kernels, bias), ReLU(), MaxPool(2), Dropout(dropout_rate)]
            length = (length - K + 1) // 2
            channels = width
        self.layers.append(Flatten())
        width_in = length * channels
        dense_plan = list(self.dense_widths) + [num_classes]
        for li, width in enumerate(dense_plan):
            weights = ad.Tensor(ad.he_uniform((width_in, width), width_in, rng), requires_grad=True)
            bias = ad.Tensor(np.zeros(width), requires_grad=True)
            self.layers.append(Dense(weights, bias))
            last = li == len(dense_plan) - 1
            if not last:
                self.layers.append(ReLU())
                if li == 0:
                    self.layers.append(Dropout(dropout_rate))
            width_in = width

    # -- structure ------------------------------------------------------------

    def parameters(self) -> list[ad.Tensor]:
        params = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                params += [layer.kernels, layer.bias]
            elif isinstance(layer, Dense):
                params += [layer.weights, layer.bias]
        return params

    def parameter_counts(self) -> list[int]:
        """Parameter count per parameterized layer, conv blocks then dense."""
        counts = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                counts.append(layer.kernels.size + layer.bias.size)
            elif isinstance(layer, Dense):
                counts.append(layer.weights.size + layer.bias.size)
        return counts

    def layer_output_shapes(self) -> list[tuple[int, ...]]:
        """Output shape after each layer for a single input beat."""
        shapes = []
        length, channels = self.input_length, 1
        flat: int | None = None
        for layer in self.layers:
            if isinstance(layer, Conv):
                length = length - layer.kernels.shape[0] + 1
                channels = layer.kernels.shape[2]
                shapes.append((length, channels))
            elif isinstance(layer, MaxPool):
                length //= layer.pool
                shapes.append((length, channels))
            elif isinstance(layer, Flatten):
                flat = length * channels
                shapes.append((flat,))
            elif isinstance(layer, Dense):
                flat = layer.weights.shape[1]
                shapes.append((flat,))
            else:
                shapes.append((flat,) if flat is not None else (length, channels))
        return shapes

    # -- execution --------------------------------------------------------------

    def forward(self, x, training: bool = False, rng=None) -> ad.Tensor:
        """Run the stack on (L, 1) or batched (B, L, 1) input values."""
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        for layer in self.layers:
            if isinstance(layer, Conv):
                h = ad.conv1d(h, layer.kernels, layer.bias)
            elif isinstance(layer, ReLU):
                h = ad.relu(h)
            elif isinstance(layer, MaxPool):
                h = ad.maxpool1d(h, layer.pool)
            elif isinstance(layer, Dropout):
                h = ad.dropout(h, layer.rate, training, rng)
            elif isinstance(layer, Flatten):
                h = ad.flatten(h)
            elif isinstance(layer, Dense):
                h = ad.dense(h, layer.weights, layer.bias)
        return h

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        named = []
        ci = di = 0
        for layer in self.layers:
            if isinstance(layer, Conv):
                named += [(f"conv{ci}.kernels", layer.kernels.values),
                          (f"conv{ci}.bias", layer.bias.values)]
                ci += 1
            elif isinstance(layer, Dense):
                named += [(f"dense{di}.weights", layer.weights.values),
                          (f"dense{di}.bias", layer.bias.values)]
                di += 1
        return named

    def symbol_for(self, index: int) -> str:
        for symbol, i in self.class_index.items():
            if i == index:
                return symbol
        raise ValueError(f"no symbol for class index {index}")


def build_network(num_classes: int, seed: int = 0, **kwargs) -> Network:
    return Network(num_classes=num_classes, seed=seed, **kwargs)


def forward_logits(net: Network, beat) -> np.ndarray:
    """Deterministic inference logits for one beat (dropout off)."""
    beat = np.asarray(beat, dtype=np.float64)
    if beat.ndim == 1:
        beat = beat[:, None]
    if beat.shape != (net.input_length, 1):
        raise ValueError(f"beat must have length {net.input_length}, got shape {beat.shape}")
    return net.forward(beat, training=False).values.copy()


def batch_logits(net: Network, beats: np.ndarray) -> np.ndarray:
    """Inference logits for a (N, L) batch of beats."""
    beats = np.asarray(beats, dtype=np.float64)
    if beats.ndim != 2 or beats.shape[1] != net.input_length:
        raise ValueError(f"expected (N, {net.input_length}) beats, got {beats.shape}")
    return net.forward(beats[:, :, None], training=False).values


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expv = np.exp(shifted)
    return expv / expv.sum(axis=-1, keepdims=True)


def predict(net: Network, beat) -> tuple[str, np.ndarray]:
    """Argmax class symbol under softmax; ties break to the lowest index."""
    probs = softmax(forward_logits(net, beat))
    return net.symbol_for(int(np.argmax(probs))), probs


# --- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def _dataset_arrays(data) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Accepts a preprocess.DatasetSplit or a ((X,y),(Xv,yv)) array pair."""
    if hasattr(data, "train") and hasattr(data, "validation"):
        ci = data.class_index
        Xt = np.stack([s.samples for s in data.train])
        yt = np.array([ci[s.label] for s in data.train], dtype=np.int64)
        Xv = np.stack([s.samples for s in data.validation])
        yv = np.array([ci[s.label] for s in data.validation], dtype=np.int64)
        return Xt, yt, Xv, yv
    (Xt, yt), (Xv, yv) = data
    return (np.asarray(Xt, dtype=np.float64), np.asarray(yt, dtype=np.int64),
            np.asarray(Xv, dtype=np.float64), np.asarray(yv, dtype=np.int64))


def evaluate_loss_acc(net: Network, X: np.ndarray, y: np.ndarray,
                      batch_size: int = 512) -> tuple[float, float]:
    total_nll = 0.0
    correct = 0
    for start in range(0, len(X), batch_size):
        xb = X[start:start + batch_size]
        yb = y[start:start + batch_size]
        logits = net.forward(xb[:, :, None], training=False).values
        probs = softmax(logits)
        total_nll -= np.log(np.clip(probs[np.arange(len(yb)), yb], 1e-300, None)).sum()
        correct += int((logits.argmax(axis=1) == yb).sum())
    n = len(X)
    return total_nll / n, correct / n


def train(net: Network, data, config: TrainConfig) -> tuple[Network, list[EpochStats]]:
    """Mini-batch Adam with per-epoch shuffling and best-checkpoint retention.

    The returned network carries the parameters of the epoch with the highest
    validation accuracy; `history` records one row per epoch.
    """
    Xt, yt, Xv, yv = _dataset_arrays(data)
    if len(Xt) == 0 or len(Xv) == 0:
        raise ValueError("dataset must contain train and validation samples")
    n_classes_seen = int(max(yt.max(), yv.max())) + 1
    if n_classes_seen > net.num_classes:
        raise ValueError(
            f"dataset has class index {n_classes_seen - 1} but network is {net.num_classes}-wide")

    rng = np.random.default_rng(config.seed)
    params = net.parameters()
    state = ad.adam_init(params)
    history: list[EpochStats] = []
    best_acc = -1.0
    best_params: list[np.ndarray] | None = None

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(Xt))
        epoch_nll = 0.0
        epoch_correct = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = Xt[idx][:, :, None]
            yb = yt[idx]
            for p in params:
                p.grad = None
            with ad.Trace() as trace:
                logits = net.forward(xb, training=True, rng=rng)
                loss, probs = ad.softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss.values):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}")
            ad.backward(trace, loss)
            ad.adam_step(params, [p.grad for p in params], state, config.learning_rate)
            epoch_nll += float(loss.values) * len(idx)
            epoch_correct += int((logits.values.argmax(axis=1) == yb).sum())
        val_loss, val_acc = evaluate_loss_acc(net, Xv, yv)
        stats = EpochStats(epoch, epoch_nll / len(Xt), epoch_correct / len(Xt),
                           val_loss, val_acc)
        history.append(stats)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = [p.values.copy() for p in params]
            if config.checkpoint_path:
                save_checkpoint(net, config.checkpoint_path)

    if best_params is not None:
        for p, values in zip(params, best_params):
            p.values = values
    if config.checkpoint_path:
        save_checkpoint(net, config.checkpoint_path)
    return net, history


def history_to_csv(history: list[EpochStats], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,train_acc,val_loss,val_acc\n")
        for s in history:
            fh.write(f"{s.epoch},{s.train_loss:.10g},{s.train_acc:.10g},"
                     f"{s.val_loss:.10g},{s.val_acc:.10g}\n")


# --- checkpoint container ----------------------------------------------------
# Layout: 7-byte magic, 1-byte version, uint32 LE header length, JSON header
# (hyperparameters, class_index, array manifest), then raw little-endian
# float64 blobs in manifest order. Round-trip is bit-lossless.


def save_checkpoint(net: Network, path) -> None:
    named = net.state_arrays()
    header = {
        "num_classes": net.num_classes,
        "seed": net.seed,
        "kernel_sizes": list(net.kernel_sizes),
        "conv_channels": list(net.conv_channels),
        "dense_widths": list(net.dense_widths),
        "dropout_rate": net.dropout_rate,
        "input_length": net.input_length,
        "class_index": net.class_index,
        "preprocess_fingerprint": net.preprocess_fingerprint,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in named],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in named:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a network checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        net = Network(
            num_classes=header["num_classes"],
            seed=header["seed"],
            kernel_sizes=tuple(header["kernel_sizes"]),
            conv_channels=tuple(header["conv_channels"]),
            dense_widths=tuple(header["dense_widths"]),
            dropout_rate=header["dropout_rate"],
            input_length=header["input_length"],
            class_index=header["class_index"],
            preprocess_fingerprint=header["preprocess_fingerprint"],
        )
        named = net.state_arrays()
        manifest = header["arrays"]
        if [m["name"] for m in manifest] != [n for n, _ in named]:
            raise CheckpointError(f"{path}: array manifest does not match architecture")
        for meta, (_, arr) in zip(manifest, named):
            shape = tuple(meta["shape"])
            if shape != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for {meta['name']}")
            raw = fh.read(arr.size * 8)
            if len(raw) != arr.size * 8:
                raise CheckpointError(f"{path}: truncated checkpoint")
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    if expected_fingerprint is not None and net.preprocess_fingerprint \
            and net.preprocess_fingerprint != expected_fingerprint:
        warnings.warn(
            "checkpoint was trained with a different preprocessing configuration "
            f"({net.preprocess_fingerprint[:12]}... vs {expected_fingerprint[:12]}...)")
    return net
