"""Multi-class reaction scorer: attention, convolutions, recurrence, FC stack.

A record's flat feature vector is projected by a learned linear map into
n_tokens tokens of width d_model, then flows through

    multi-head scaled dot-product attention (per-head softmax(QK^T/sqrt(dh))V,
    heads concatenated, linear fuse)
    -> 1-D convolution (kernel conv_kernel, same padding), tanh
    -> max pooling (width pool_width)
    -> 1-D convolution, tanh
    -> bidirectional LSTM, per-step hidden states of both directions
       concatenated
    -> flatten -> five fully connected layers (tanh between, inverted dropout
       after the first three at train time) -> logits -> softmax downstream.

Everything is plain numpy with hand-written reverse-mode gradients; training
is full-batch gradient descent. Weights use fan-scaled uniform initialization
(Glorot) and biases start at zero so the stacked layers neither mute nor blow
up the signal at depth; all randomness comes from the config seed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .domain import Dataset, Rng
from .errors import FedpharmError, NonFiniteLoss, ShapeMismatch

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class PredictorConfig:
    n_features: int
    n_classes: int
    d_model: int = 32
    n_heads: int = 4
    n_tokens: int = 8
    conv_kernel: int = 4
    conv_channels: tuple[int, int] = (16, 32)
    pool_width: int = 2
    lstm_hidden: int = 16
    fc_dims: tuple[int, ...] = (256, 128, 64, 32)
    dropout_rates: tuple[float, float, float] = (0.5, 0.5, 0.25)
    learning_rate: float = 0.03
    epochs: int = 100
    seed: int = 0
    signal_threshold: float = 0.9

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise FedpharmError("n_heads must divide d_model")
        if self.n_tokens % self.pool_width:
            raise FedpharmError("pool_width must divide n_tokens")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise FedpharmError("dropout rates must lie in [0, 1)")

    @property
    def full_fc_dims(self) -> tuple[int, ...]:
        return self.fc_dims + (self.n_classes,)

    @property
    def pooled_len(self) -> int:
        return self.n_tokens // self.pool_width

    @property
    def flat_dim(self) -> int:
        return self.pooled_len * 2 * self.lstm_hidden


@dataclass(frozen=True)
class TrainingTrace:
    losses: tuple[float, ...]
    learning_rate: float
    epochs: int


@dataclass(frozen=True)
class SignalPrediction:
    record_id: str
    class_probs: tuple[float, ...]
    predicted_adr: int
    p: float
    flagged: bool


# -- parameter construction ---------------------------------------------------


def param_shapes(cfg: PredictorConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.lstm_hidden
    c1, c2 = cfg.conv_channels
    k = cfg.conv_kernel
    shapes: dict[str, tuple[int, ...]] = {
        "embed_w": (cfg.n_features, cfg.n_tokens * d),
        "embed_b": (cfg.n_tokens * d,),
        "attn_wq": (d, d),
        "attn_bq": (d,),
        "attn_wk": (d, d),
        "attn_bk": (d,),
        "attn_wv": (d, d),
        "attn_bv": (d,),
        "attn_wo": (d, d),
        "attn_bo": (d,),
        "conv1_w": (c1, d, k),
        "conv1_b": (c1,),
        "conv2_w": (c2, c1, k),
        "conv2_b": (c2,),
    }
    for direction in ("fw", "bw"):
        shapes[f"lstm_{direction}_wx"] = (c2, 4 * h)
        shapes[f"lstm_{direction}_wh"] = (h, 4 * h)
        shapes[f"lstm_{direction}_b"] = (4 * h,)
    in_dim = cfg.flat_dim
    for i, out_dim in enumerate(cfg.full_fc_dims, start=1):
        shapes[f"fc{i}_w"] = (in_dim, out_dim)
        shapes[f"fc{i}_b"] = (out_dim,)
        in_dim = out_dim
    return shapes


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 3:  # conv (out, in, k)
        return shape[1] * shape[2], shape[0] * shape[2]
    return shape[0], shape[1]


def init_params(cfg: PredictorConfig) -> Params:
    gen = Rng(cfg.seed).spawn("init").generator()
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = gen.uniform(-limit, limit, size=shape)
    return params


def zero_params(cfg: PredictorConfig) -> Params:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


# -- layer primitives ----------------------------------------------------------


def scaled_dot_product_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """softmax(q k^T / sqrt(d_head)) v on (..., L, d_head) arrays."""
    d_head = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d_head)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=-1, keepdims=True)
    return weights @ v, weights


def _attention_forward(p: Params, tokens: np.ndarray, n_heads: int):
    b, length, d = tokens.shape
    dh = d // n_heads

    def heads(x):
        return x.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(tokens @ p["attn_wq"] + p["attn_bq"])
    k = heads(tokens @ p["attn_wk"] + p["attn_bk"])
    v = heads(tokens @ p["attn_wv"] + p["attn_bv"])
    ctx, weights = scaled_dot_product_attention(q, k, v)
    concat = ctx.transpose(0, 2, 1, 3).reshape(b, length, d)
    out = concat @ p["attn_wo"] + p["attn_bo"]
    cache = (tokens, q, k, v, weights, concat, n_heads)
    return out, cache


def _attention_backward(p: Params, dout: np.ndarray, cache) -> tuple[np.ndarray, Params]:
    tokens, q, k, v, weights, concat, n_heads = cache
    b, length, d = tokens.shape
    dh = d // n_heads
    grads: Params = {}

    flat = concat.reshape(-1, d)
    grads["attn_wo"] = flat.T @ dout.reshape(-1, d)
    grads["attn_bo"] = dout.sum(axis=(0, 1))
    dconcat = dout @ p["attn_wo"].T
    dctx = dconcat.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)

    dweights = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(weights, -1, -2) @ dctx
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dscores /= np.sqrt(dh)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q

    def unheads(x):
        return x.transpose(0, 2, 1, 3).reshape(b, length, d)

    dtokens = np.zeros_like(tokens)
    flat_tokens = tokens.reshape(-1, d)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dflat = unheads(dproj).reshape(-1, d)
        grads[f"attn_w{name}"] = flat_tokens.T @ dflat
        grads[f"attn_b{name}"] = dflat.sum(axis=0)
        dtokens += (dflat @ p[f"attn_w{name}"].T).reshape(b, length, d)
    return dtokens, grads


def _conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 1-D convolution; x is (B, C_in, L), w is (C_out, C_in, K)."""
    batch, _, length = x.shape
    c_out, c_in, k = w.shape
    pl, pr = (k - 1) // 2, k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
    windows = np.stack([xp[:, :, j : j + k] for j in range(length)], axis=1)
    flat = windows.reshape(batch, length, c_in * k)
    out = flat @ w.reshape(c_out, c_in * k).T + b
    return out.transpose(0, 2, 1), (flat, x.shape, w.shape, pl)


def _conv1d_backward(dout: np.ndarray, w: np.ndarray, cache):
    flat, x_shape, w_shape, pl = cache
    batch, c_in, length = x_shape
    c_out, _, k = w_shape
    dflat_out = dout.transpose(0, 2, 1)  # (B, L, C_out)
    dw = np.einsum("blf,blo->of", flat, dflat_out).reshape(w_shape)
    db = dflat_out.sum(axis=(0, 1))
    dwindows = (dflat_out @ w.reshape(c_out, c_in * k)).reshape(batch, length, c_in, k)
    dxp = np.zeros((batch, c_in, length + k - 1))
    for j in range(length):
        dxp[:, :, j : j + k] += dwindows[:, j]
    return dxp[:, :, pl : pl + length], dw, db


def _maxpool_forward(x: np.ndarray, width: int):
    batch, channels, length = x.shape
    xr = x.reshape(batch, channels, length // width, width)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, width)


def _maxpool_backward(dout: np.ndarray, cache):
    idx, x_shape, width = cache
    batch, channels, length = x_shape
    dxr = np.zeros((batch, channels, length // width, width))
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    return dxr.reshape(x_shape)


def _lstm_forward(x: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
    """One direction; x is (B, T, C_in); returns hidden states (B, T, H)."""
    batch, steps, _ = x.shape
    hidden = wh.shape[0]
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    hs = np.zeros((batch, steps, hidden))
    gates = []
    for t in range(steps):
        z = x[:, t] @ wx + h @ wh + b
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden : 2 * hidden])
        g = np.tanh(z[:, 2 * hidden : 3 * hidden])
        o = _sigmoid(z[:, 3 * hidden :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        gates.append((i, f, g, o, c_prev, h_prev, tc))
    return hs, (x, gates, wx, wh)


def _lstm_backward(dhs: np.ndarray, cache):
    x, gates, wx, wh = cache
    batch, steps, _ = x.shape
    hidden = wh.shape[0]
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * hidden)
    dx = np.zeros_like(x)
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    for t in range(steps - 1, -1, -1):
        i, f, g, o, c_prev, h_prev, tc = gates[t]
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
            axis=1,
        )
        dwx += x[:, t].T @ dz
        dwh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ wx.T
        dh_next = dz @ wh.T
    return dx, dwx, dwh, db


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient w.r.t. logits."""
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    loss = float(np.mean(log_z - shifted[np.arange(batch), labels]))
    probs = softmax(logits)
    probs[np.arange(batch), labels] -= 1.0
    return loss, probs / batch


# -- full network --------------------------------------------------------------


def forward(
    params: Params,
    cfg: PredictorConfig,
    x: np.ndarray,
    dropout_gen: Optional[np.random.Generator] = None,
):
    """Returns (logits, caches). Dropout is active only when a generator is given."""
    if x.ndim != 2 or x.shape[1] != cfg.n_features:
        raise ShapeMismatch(f"expected (batch, {cfg.n_features}) input, got {x.shape}")
    batch = x.shape[0]
    caches: dict = {}

    tokens = (x @ params["embed_w"] + params["embed_b"]).reshape(
        batch, cfg.n_tokens, cfg.d_model
    )
    caches["embed_x"] = x

    attn_out, caches["attn"] = _attention_forward(params, tokens, cfg.n_heads)

    conv_in = attn_out.transpose(0, 2, 1)  # (B, D, L)
    c1_pre, caches["conv1"] = _conv1d_forward(conv_in, params["conv1_w"], params["conv1_b"])
    c1 = np.tanh(c1_pre)
    caches["conv1_act"] = c1

    pooled, caches["pool"] = _maxpool_forward(c1, cfg.pool_width)

    c2_pre, caches["conv2"] = _conv1d_forward(pooled, params["conv2_w"], params["conv2_b"])
    c2 = np.tanh(c2_pre)
    caches["conv2_act"] = c2

    seq = c2.transpose(0, 2, 1)  # (B, T, C2)
    h_fw, caches["lstm_fw"] = _lstm_forward(
        seq, params["lstm_fw_wx"], params["lstm_fw_wh"], params["lstm_fw_b"]
    )
    h_bw_rev, caches["lstm_bw"] = _lstm_forward(
        seq[:, ::-1], params["lstm_bw_wx"], params["lstm_bw_wh"], params["lstm_bw_b"]
    )
    h_cat = np.concatenate([h_fw, h_bw_rev[:, ::-1]], axis=2)

    a = h_cat.reshape(batch, cfg.flat_dim)
    caches["fc_inputs"] = []
    caches["fc_tanh"] = []
    caches["fc_masks"] = []
    n_fc = len(cfg.full_fc_dims)
    for i in range(1, n_fc + 1):
        caches["fc_inputs"].append(a)
        z = a @ params[f"fc{i}_w"] + params[f"fc{i}_b"]
        if i < n_fc:
            a = np.tanh(z)
            caches["fc_tanh"].append(a)
            mask = None
            if dropout_gen is not None and i <= len(cfg.dropout_rates):
                rate = cfg.dropout_rates[i - 1]
                if rate > 0.0:
                    mask = (dropout_gen.random(a.shape) >= rate) / (1.0 - rate)
                    a = a * mask
            caches["fc_masks"].append(mask)
        else:
            a = z
    return a, caches


def backward(params: Params, cfg: PredictorConfig, caches: dict, dlogits: np.ndarray) -> Params:
    grads: Params = {}
    batch = dlogits.shape[0]
    n_fc = len(cfg.full_fc_dims)

    da = dlogits
    for i in range(n_fc, 0, -1):
        a_in = caches["fc_inputs"][i - 1]
        if i < n_fc:
            mask = caches["fc_masks"][i - 1]
            if mask is not None:
                da = da * mask
            tanh_out = caches["fc_tanh"][i - 1]
            dz = da * (1 - tanh_out * tanh_out)
        else:
            dz = da
        grads[f"fc{i}_w"] = a_in.T @ dz
        grads[f"fc{i}_b"] = dz.sum(axis=0)
        da = dz @ params[f"fc{i}_w"].T

    dh_cat = da.reshape(batch, cfg.pooled_len, 2 * cfg.lstm_hidden)
    dh_fw = dh_cat[:, :, : cfg.lstm_hidden]
    dh_bw = dh_cat[:, :, cfg.lstm_hidden :][:, ::-1]

    dseq_fw, dwx_f, dwh_f, db_f = _lstm_backward(dh_fw, caches["lstm_fw"])
    dseq_bw_rev, dwx_b, dwh_b, db_b = _lstm_backward(dh_bw, caches["lstm_bw"])
    grads["lstm_fw_wx"], grads["lstm_fw_wh"], grads["lstm_fw_b"] = dwx_f, dwh_f, db_f
    grads["lstm_bw_wx"], grads["lstm_bw_wh"], grads["lstm_bw_b"] = dwx_b, dwh_b, db_b
    dseq = dseq_fw + dseq_bw_rev[:, ::-1]

    dc2 = dseq.transpose(0, 2, 1)
    dc2_pre = dc2 * (1 - caches["conv2_act"] ** 2)
    dpooled, dw2, db2 = _conv1d_backward(dc2_pre, params["conv2_w"], caches["conv2"])
    grads["conv2_w"], grads["conv2_b"] = dw2, db2

    dc1 = _maxpool_backward(dpooled, caches["pool"])
    dc1_pre = dc1 * (1 - caches["conv1_act"] ** 2)
    dconv_in, dw1, db1 = _conv1d_backward(dc1_pre, params["conv1_w"], caches["conv1"])
    grads["conv1_w"], grads["conv1_b"] = dw1, db1

    dattn_out = dconv_in.transpose(0, 2, 1)
    dtokens, attn_grads = _attention_backward(params, dattn_out, caches["attn"])
    grads.update(attn_grads)

    dflat = dtokens.reshape(batch, cfg.n_tokens * cfg.d_model)
    x = caches["embed_x"]
    grads["embed_w"] = x.T @ dflat
    grads["embed_b"] = dflat.sum(axis=0)
    return grads


def loss_and_grads(
    params: Params,
    cfg: PredictorConfig,
    x: np.ndarray,
    labels: np.ndarray,
    dropout_gen: Optional[np.random.Generator] = None,
) -> tuple[float, Params]:
    logits, caches = forward(params, cfg, x, dropout_gen)
    loss, dlogits = cross_entropy(logits, labels)
    grads = backward(params, cfg, caches, dlogits)
    return loss, grads


# -- training and inference ----------------------------------------------------


def train(clean: Dataset, cfg: PredictorConfig) -> tuple[Params, TrainingTrace]:
    x = clean.feature_matrix()
    labels = clean.adr_labels()
    return train_arrays(x, labels, cfg)


def train_arrays(
    x: np.ndarray, labels: np.ndarray, cfg: PredictorConfig
) -> tuple[Params, TrainingTrace]:
    params = init_params(cfg)
    dropout_gen = Rng(cfg.seed).spawn("dropout").generator()
    use_dropout = any(r > 0 for r in cfg.dropout_rates)
    losses = []
    for _ in range(cfg.epochs):
        loss, grads = loss_and_grads(
            params, cfg, x, labels, dropout_gen if use_dropout else None
        )
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"training diverged: loss={loss}")
        for name in params:
            params[name] = params[name] - cfg.learning_rate * grads[name]
        losses.append(loss)
    return params, TrainingTrace(tuple(losses), cfg.learning_rate, cfg.epochs)


def predict_signals(
    params: Params, cfg: PredictorConfig, d: Dataset
) -> list[SignalPrediction]:
    logits, _ = forward(params, cfg, d.feature_matrix())
    probs = softmax(logits)
    out = []
    for rec, row in zip(d.records, probs):
        cls = int(row.argmax())
        p = float(row[cls])
        out.append(
            SignalPrediction(
                record_id=f"{rec.patient_id}:{rec.adr_label}",
                class_probs=tuple(float(v) for v in row),
                predicted_adr=cls,
                p=p,
                flagged=p >= cfg.signal_threshold,
            )
        )
    return out


# -- artifacts -----------------------------------------------------------------

PARAMS_MAGIC = b"FPNP"
PARAMS_VERSION = 1


def save_params(params: Params, path: Path | str) -> None:
    """Flat binary: magic, version, tensor count, then per tensor a
    length-prefixed utf-8 name, ndim, dims, and row-major float64 LE data."""
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<II", PARAMS_VERSION, len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_params(path: Path | str) -> Params:
    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise FedpharmError("not a parameter file (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != PARAMS_VERSION:
        raise FedpharmError(f"unsupported parameter file version {version}")
    offset = 12
    params: Params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        n_items = int(np.prod(shape)) if shape else 1
        tensor = np.frombuffer(data, dtype="<f8", count=n_items, offset=offset)
        offset += 8 * n_items
        params[name] = tensor.reshape(shape).copy()
    return params


def save_trace_csv(trace: TrainingTrace, path: Path | str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(trace.losses, start=1):
            writer.writerow([epoch, repr(loss)])


def save_predictions_csv(predictions: Sequence[SignalPrediction], path: Path | str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "predicted_adr", "p", "flagged"])
        for pred in predictions:
            writer.writerow([pred.record_id, pred.predicted_adr, repr(pred.p), int(pred.flagged)])
