"""Small frame-classification CNN in plain numpy.

Layout (input 32x32x1, valid convolutions, 2x2/2 max pools)::

    conv 3x3x32 + ReLU    -> 30x30x32
    maxpool               -> 15x15x32
    conv 3x3x64 + ReLU    -> 13x13x64
    maxpool               -> 6x6x64
    conv 3x3x64 + ReLU    -> 4x4x64
    flatten               -> 1024
    dense 64 + ReLU
    dense 2 + sigmoid     -> (p_speech, p_nonspeech)

The two outputs are independent sigmoids trained with per-neuron binary
cross-entropy, since speech and non-speech sounds can co-occur.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

INPUT_SIZE = 32
FLATTEN_DIM = 1024
NUM_PARAMETERS = 121_474

PARAM_SHAPES: dict[str, tuple[int, ...]] = {
    "conv1_w": (3, 3, 1, 32),
    "conv1_b": (32,),
    "conv2_w": (3, 3, 32, 64),
    "conv2_b": (64,),
    "conv3_w": (3, 3, 64, 64),
    "conv3_b": (64,),
    "dense1_w": (FLATTEN_DIM, 64),
    "dense1_b": (64,),
    "dense2_w": (64, 2),
    "dense2_b": (2,),
}
PARAM_ORDER = tuple(PARAM_SHAPES)

MAGIC = b"SGWT"
FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Raised for unreadable, truncated or inconsistent model files."""


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class FramePrediction:
    p_speech: float
    p_nonspeech: float


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 10
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class CnnModel:
    """Parameter container plus forward/backward passes.

    ``params`` maps the names in :data:`PARAM_ORDER` to arrays whose shapes
    are fixed by :data:`PARAM_SHAPES`.  The dtype of the parameters sets the
    compute precision.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        for name, shape in PARAM_SHAPES.items():
            if name not in params:
                raise ValueError(f"missing parameter {name}")
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = {name: params[name] for name in PARAM_ORDER}

    @classmethod
    def initialize(cls, seed: int = 0, dtype=np.float32) -> "CnnModel":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[:-1]))
                params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return cls(params)

    @classmethod
    def zeros(cls, dtype=np.float32) -> "CnnModel":
        return cls({n: np.zeros(s, dtype=dtype) for n, s in PARAM_SHAPES.items()})

    @property
    def dtype(self):
        return self.params["conv1_w"].dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "CnnModel":
        return CnnModel({n: p.astype(dtype) for n, p in self.params.items()})

    def copy(self) -> "CnnModel":
        return CnnModel({n: p.copy() for n, p in self.params.items()})

    # -- forward / backward -------------------------------------------------

    def _forward(self, x: np.ndarray, keep: bool = False):
        p = self.params
        x = _as_input(x, self.dtype)
        cache = {}
        a1 = _relu(_conv_forward(x, p["conv1_w"], p["conv1_b"]))
        m1, arg1 = _pool_forward(a1, keep)
        a2 = _relu(_conv_forward(m1, p["conv2_w"], p["conv2_b"]))
        m2, arg2 = _pool_forward(a2, keep)
        a3 = _relu(_conv_forward(m2, p["conv3_w"], p["conv3_b"]))
        flat = a3.reshape(len(x), -1)
        if flat.shape[1] != FLATTEN_DIM:
            raise ValueError(f"flatten width {flat.shape[1]} != {FLATTEN_DIM}")
        h = _relu(flat @ p["dense1_w"] + p["dense1_b"])
        logits = h @ p["dense2_w"] + p["dense2_b"]
        if keep:
            cache = dict(x=x, a1=a1, arg1=arg1, m1=m1, a2=a2, arg2=arg2, m2=m2, a3=a3, flat=flat, h=h)
        return logits, cache

    def logits(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Pre-sigmoid outputs, shape (N, 2), computed in float64 at the end."""
        x = _as_input(x, self.dtype)
        out = np.empty((len(x), 2), dtype=np.float64)
        for i in range(0, len(x), batch_size):
            out[i : i + batch_size] = self._forward(x[i : i + batch_size])[0]
        return out

    def predict_proba(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        return _sigmoid(self.logits(x, batch_size))

    def flatten_features(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        x = _as_input(x, self.dtype)
        a1 = _relu(_conv_forward(x, p["conv1_w"], p["conv1_b"]))
        a2 = _relu(_conv_forward(_pool_forward(a1)[0], p["conv2_w"], p["conv2_b"]))
        a3 = _relu(_conv_forward(_pool_forward(a2)[0], p["conv3_w"], p["conv3_b"]))
        return a3.reshape(len(x), -1)

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Mean over the batch of the summed two-neuron binary cross-entropy."""
        p = self.params
        logits, c = self._forward(x, keep=True)
        y = np.asarray(y, dtype=logits.dtype).reshape(-1, 2)
        n = len(logits)
        loss = float(np.sum(_softplus(logits) - y * logits) / n)

        g = {}
        dz = ((_sigmoid(logits) - y) / n).astype(logits.dtype)
        g["dense2_w"] = c["h"].T @ dz
        g["dense2_b"] = dz.sum(axis=0)
        dh = (dz @ p["dense2_w"].T) * (c["h"] > 0)
        g["dense1_w"] = c["flat"].T @ dh
        g["dense1_b"] = dh.sum(axis=0)
        da3 = (dh @ p["dense1_w"].T).reshape(c["a3"].shape) * (c["a3"] > 0)
        dm2, g["conv3_w"], g["conv3_b"] = _conv_backward(c["m2"], p["conv3_w"], da3)
        da2 = _pool_backward(dm2, c["arg2"], c["a2"].shape) * (c["a2"] > 0)
        dm1, g["conv2_w"], g["conv2_b"] = _conv_backward(c["m1"], p["conv2_w"], da2)
        da1 = _pool_backward(dm1, c["arg1"], c["a1"].shape) * (c["a1"] > 0)
        _, g["conv1_w"], g["conv1_b"] = _conv_backward(c["x"], p["conv1_w"], da1, need_dx=False)
        return loss, {k: v.astype(p[k].dtype, copy=False) for k, v in g.items()}

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        logits, _ = self._forward(x)
        y = np.asarray(y, dtype=logits.dtype).reshape(-1, 2)
        return float(np.sum(_softplus(logits) - y * logits) / len(logits))


# -- layer primitives (NHWC) --------------------------------------------------


def _as_input(x, dtype) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 1):
        raise ValueError(f"expected {INPUT_SIZE}x{INPUT_SIZE} windows, got shape {x.shape[1:3]}")
    return x.astype(dtype, copy=False)


def _relu(x):
    return np.maximum(x, 0)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def _im2col(x, kh, kw):
    n, hgt, wid, c = x.shape
    ho, wo = hgt - kh + 1, wid - kw + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i : i + ho, j : j + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _conv_forward(x, w, b):
    kh, kw, cin, cout = w.shape
    n, hgt, wid, _ = x.shape
    ho, wo = hgt - kh + 1, wid - kw + 1
    if cin < 8:
        # few input channels: one wide matmul beats nine skinny ones
        return (_im2col(x, kh, kw) @ w.reshape(-1, cout)).reshape(n, ho, wo, cout) + b
    out = np.empty((n, ho, wo, cout), dtype=np.result_type(x, w))
    out[...] = b
    for i in range(kh):
        for j in range(kw):
            out += x[:, i : i + ho, j : j + wo, :] @ w[i, j]
    return out


def _conv_backward(x, w, dout, need_dx: bool = True):
    kh, kw, cin, cout = w.shape
    ho, wo = dout.shape[1:3]
    dflat = dout.reshape(-1, cout)
    if cin < 8 and not need_dx:
        dw = (_im2col(x, kh, kw).T @ dflat).reshape(w.shape)
        return None, dw, dflat.sum(axis=0)
    dw = np.empty_like(w)
    dx = np.zeros_like(x) if need_dx else None
    for i in range(kh):
        for j in range(kw):
            xs = x[:, i : i + ho, j : j + wo, :].reshape(-1, cin)
            dw[i, j] = xs.T @ dflat
            if need_dx:
                dx[:, i : i + ho, j : j + wo, :] += dout @ w[i, j].T
    return dx, dw, dflat.sum(axis=0)


def _pool_forward(x, keep: bool = False):
    n, hgt, wid, c = x.shape
    h2, w2 = hgt // 2, wid // 2
    blocks = x[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c)
    out = blocks.max(axis=(2, 4))
    if not keep:
        return out, None
    # first maximum in row-major block order receives the gradient
    flat = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    return out, flat.argmax(axis=-1)


def _pool_backward(dout, argmax, in_shape):
    n, h2, w2, c = dout.shape
    routed = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(routed, argmax[..., None], dout[..., None], axis=-1)
    blocks = routed.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    dx[:, : 2 * h2, : 2 * w2, :] = blocks.reshape(n, 2 * h2, 2 * w2, c)
    return dx


# -- inference wrappers -------------------------------------------------------


def cnn_forward(window, model: CnnModel) -> FramePrediction:
    values = getattr(window, "values", window)
    p = model.predict_proba(np.asarray(values)[None])[0]
    return FramePrediction(p_speech=float(p[0]), p_nonspeech=float(p[1]))


def predict_windows(model: CnnModel, windows: np.ndarray, batch_size: int = 512) -> list[FramePrediction]:
    probs = model.predict_proba(windows, batch_size)
    return [FramePrediction(float(a), float(b)) for a, b in probs]


# -- training -----------------------------------------------------------------


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in PARAM_ORDER:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= update.astype(params[k].dtype, copy=False)


class _Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k in PARAM_ORDER:
            params[k] -= (self.lr * grads[k]).astype(params[k].dtype, copy=False)


def cnn_train(
    windows: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    init_seed: Optional[int] = None,
    validation: Optional[tuple[np.ndarray, np.ndarray]] = None,
    init_model: Optional[CnnModel] = None,
    dtype=np.float32,
    on_epoch: Optional[Callable[[int, float, Optional[float]], None]] = None,
) -> CnnModel:
    """Mini-batch training on (window, [speech_bit, nonspeech_bit]) pairs.

    With ``validation`` given, the model with the lowest validation loss over
    all epochs is returned; otherwise the model after the last epoch.
    Shuffling is driven by ``cfg.seed`` and initialization by ``init_seed``
    (defaults to ``cfg.seed``), so runs are reproducible.
    """
    windows = np.asarray(windows)
    labels = np.asarray(labels).reshape(-1, 2)
    if len(windows) == 0:
        raise TrainingError("empty training set")
    if len(windows) != len(labels):
        raise TrainingError("windows and labels differ in length")
    x = _as_input(windows, dtype)

    model = init_model.astype(dtype) if init_model is not None else CnnModel.initialize(
        cfg.seed if init_seed is None else init_seed, dtype
    )
    if cfg.optimizer == "adam":
        opt = _Adam(model.params, cfg.learning_rate)
    else:
        opt = _Sgd(model.params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    best, best_val = None, np.inf
    batch_index = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = model.loss_and_grads(x[idx], labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at batch {batch_index} (epoch {epoch})")
            opt.step(model.params, grads)
            total += loss * len(idx)
            batch_index += 1
        train_loss = total / len(x)
        val_loss = None
        if validation is not None:
            val_loss = _dataset_loss(model, *validation)
            if val_loss < best_val:
                best_val, best = val_loss, model.copy()
        log.info("epoch %d train_loss %.5f val_loss %s", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
    return best if best is not None else model


def _dataset_loss(model: CnnModel, windows, labels, batch_size: int = 512) -> float:
    x = _as_input(np.asarray(windows), model.dtype)
    y = np.asarray(labels).reshape(-1, 2)
    total = 0.0
    for i in range(0, len(x), batch_size):
        total += model.loss(x[i : i + batch_size], y[i : i + batch_size]) * len(x[i : i + batch_size])
    return total / len(x)


def dataset_loss(model: CnnModel, windows, labels) -> float:
    return _dataset_loss(model, windows, labels)


# -- serialization ------------------------------------------------------------
#
# Header (little-endian):
#   4s   magic "SGWT"
#   u32  format version
#   u32  input height, u32 input width, u32 flatten dim
#   u32  number of tensors
#   per tensor: u32 ndim, ndim x u32 dims
# Payload: float32 values, tensors in PARAM_ORDER, C order.


def save_model(model: CnnModel, path) -> None:
    header = [MAGIC, struct.pack("<IIIII", FORMAT_VERSION, INPUT_SIZE, INPUT_SIZE, FLATTEN_DIM, len(PARAM_ORDER))]
    for name in PARAM_ORDER:
        shape = model.params[name].shape
        header.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
    payload = b"".join(model.params[n].astype("<f4").tobytes() for n in PARAM_ORDER)
    with open(path, "wb") as fh:
        fh.write(b"".join(header) + payload)


def load_model(path) -> CnnModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return model_from_bytes(data)


def model_from_bytes(data: bytes) -> CnnModel:
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ModelFormatError("truncated model header")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    if data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    pos = 4
    version, in_h, in_w, flat, n_tensors = take("<IIIII")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version}, expected {FORMAT_VERSION}")
    if (in_h, in_w) != (INPUT_SIZE, INPUT_SIZE) or flat != FLATTEN_DIM:
        raise ModelFormatError(f"header dims {in_h}x{in_w}/flatten {flat} do not match architecture")
    if n_tensors != len(PARAM_ORDER):
        raise ModelFormatError(f"expected {len(PARAM_ORDER)} tensors, header says {n_tensors}")
    shapes = []
    for name in PARAM_ORDER:
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        if shape != PARAM_SHAPES[name]:
            raise ModelFormatError(f"{name}: header shape {shape} != {PARAM_SHAPES[name]}")
        shapes.append(shape)
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(data) - pos != expected:
        raise ModelFormatError(f"payload is {len(data) - pos} bytes, header implies {expected}")
    params = {}
    for name, shape in zip(PARAM_ORDER, shapes):
        size = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += size * 4
    return CnnModel(params)


def window_targets(conditions: Sequence[str]) -> np.ndarray:
    """(speech_bit, nonspeech_bit) per frame from dense condition labels.

    Any speech condition sets the speech bit. The non-speech bit marks frames
    where a non-speech sound may be present, i.e. everything but CleanSpeech.
    """
    from .audio_io import CLEAN_SPEECH, is_speech

    return np.array(
        [[1 if is_speech(c) else 0, 0 if c == CLEAN_SPEECH else 1] for c in conditions],
        dtype=np.int8,
    ).reshape(-1, 2)
