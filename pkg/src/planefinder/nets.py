"""Small convolutional regressor with hand-rolled forward/backward passes.

Five 3x3 convolution stages (zero-padded, stride 1), each followed by ReLU
and 2x2 max-pooling, feed a shared feature vector into per-output two-layer
fully-connected heads.  Everything runs in float64 numpy so training is
bit-reproducible on one thread and gradients check cleanly against finite
differences; checkpoints store parameters as little-endian float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .predictor import PredictorOutput, REPRESENTATION_MODES

CONV_CHANNELS = (8, 16, 32, 32, 32)
# the last two pools keep stride 1 so the trunk retains a small spatial map;
# collapsing all the way to 1x1 erases the layout cues rotation needs
POOL_STRIDES = (2, 2, 2, 1, 1)
HEAD_WIDTH = 64

# regression payload per representation mode
_MODE_HEADS = {
    "quat": {"t": 3, "rot": 4},
    "euler": {"t": 3, "rot": 3},
    "matrix": {"t": 3, "rot": 9},
    "anchors": {"anchors": 9},
}
_HEAD_ORDER = ("t", "rot", "anchors", "cls_t", "cls_r")

_MAGIC = b"ITNM"
_VERSION = 1


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*9) patches of the zero-padded input."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, h, w, 3, 3), (s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def conv3_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray):
    b, c, h, wd = x.shape
    k = w.shape[0]
    cols = _im2col3(x)
    out = cols @ w.reshape(k, c * 9).T + bias
    return out.reshape(b, h, wd, k).transpose(0, 3, 1, 2), cols


def conv3_backward(dout: np.ndarray, x_shape, cols: np.ndarray, w: np.ndarray):
    b, c, h, wd = x_shape
    k = w.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(b * h * wd, k)
    dw = (dflat.T @ cols).reshape(k, c, 3, 3)
    db = dflat.sum(axis=0)
    # dx is the same-size correlation of dout with the spatially flipped,
    # channel-transposed kernel
    w_rot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, k * 9)
    dcols = _im2col3(dout)
    dx = (dcols @ w_rot.T).reshape(b, h, wd, c).transpose(0, 3, 1, 2)
    return dx, dw, db


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def maxpool2_forward(x: np.ndarray, stride: int = 2):
    """2x2 max pooling with stride 2 (halving) or stride 1 (same-ish size).

    Ties resolve to the first cell in scan order, keeping training
    deterministic.
    """
    b, c, h, w = x.shape
    if stride == 2:
        h2, w2 = h // 2, w // 2
        tiles = (
            x[:, :, : h2 * 2, : w2 * 2]
            .reshape(b, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h2, w2, 4)
        )
        idx = tiles.argmax(axis=-1)
        out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape, stride)
    if stride != 1:
        raise ValueError("pool stride must be 1 or 2")
    h2, w2 = h - 1, w - 1
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (b, c, h2, w2, 2, 2), (s[0], s[1], s[2], s[3], s[2], s[3])
    ).reshape(b, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, stride)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    idx, x_shape, stride = cache
    b, c, h, w = x_shape
    if stride == 2:
        h2, w2 = h // 2, w // 2
        dtiles = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(dtiles, idx[..., None], dout[..., None], axis=-1)
        dx = np.zeros(x_shape)
        dx[:, :, : h2 * 2, : w2 * 2] = (
            dtiles.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2 * 2, w2 * 2)
        )
        return dx
    h2, w2 = h - 1, w - 1
    dx = np.zeros(x_shape)
    # overlapping windows: scatter-add each gradient to its argmax position
    di, dj = np.divmod(idx, 2)
    bi, ci, ii, ji = np.indices(idx.shape, sparse=False)
    np.add.at(dx, (bi, ci, ii + di, ji + dj), dout)
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class RegressorModel:
    """Convolutional pose regressor with pluggable representation heads."""

    def __init__(
        self,
        mode: str = "quat",
        with_trans_probs: bool = False,
        with_rot_probs: bool = False,
        input_size: int = 32,
        triplet: bool = False,
        seed: int = 0,
        init_std: float = 0.1,
        params: dict[str, np.ndarray] | None = None,
    ):
        if mode not in REPRESENTATION_MODES:
            raise ValueError(f"unknown representation mode {mode!r}")
        if input_size < 32:
            raise ValueError("input size must be >= 32 (five pooling stages)")
        if (with_trans_probs or with_rot_probs) and mode != "quat":
            raise ValueError("confidence heads are only supported in quat mode")
        self.mode = mode
        self.with_trans_probs = with_trans_probs
        self.with_rot_probs = with_rot_probs
        self.input_size = input_size
        self.triplet = triplet
        self.in_channels = 3 if triplet else 1

        self.head_dims = dict(_MODE_HEADS[mode])
        if with_trans_probs:
            self.head_dims["cls_t"] = 6
        if with_rot_probs:
            self.head_dims["cls_r"] = 6

        side = input_size
        for stride in POOL_STRIDES:
            side = side // 2 if stride == 2 else side - 1
        if side < 1:
            raise ValueError("input size too small for the conv stack")
        self.feature_dim = CONV_CHANNELS[-1] * side * side

        self.params = params if params is not None else self._init_params(seed, init_std)

    # --- parameters -------------------------------------------------------

    def param_order(self) -> list[str]:
        names = []
        for i in range(len(CONV_CHANNELS)):
            names += [f"conv{i + 1}_w", f"conv{i + 1}_b"]
        for head in _HEAD_ORDER:
            if head in self.head_dims:
                names += [f"{head}_w1", f"{head}_b1", f"{head}_w2", f"{head}_b2"]
        return names

    def _param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        c_in = self.in_channels
        for i, c_out in enumerate(CONV_CHANNELS):
            shapes[f"conv{i + 1}_w"] = (c_out, c_in, 3, 3)
            shapes[f"conv{i + 1}_b"] = (c_out,)
            c_in = c_out
        for head, dim in self.head_dims.items():
            shapes[f"{head}_w1"] = (self.feature_dim, HEAD_WIDTH)
            shapes[f"{head}_b1"] = (HEAD_WIDTH,)
            shapes[f"{head}_w2"] = (HEAD_WIDTH, dim)
            shapes[f"{head}_b2"] = (dim,)
        return shapes

    def _init_params(self, seed: int, std: float) -> dict[str, np.ndarray]:
        """Weights ~ N(0, std), biases zero.

        With a nonzero std the rotation/anchor output bias starts at the
        identity transform's representation, so an untrained model predicts
        "stay put" instead of a random jump (and the quaternion loss never
        sees a near-zero raw quaternion, where its normalization is badly
        conditioned).  std=0 produces the literal all-zero network.
        """
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in [(n, self._param_shapes()[n]) for n in self.param_order()]:
            if name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2"):
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, std, size=shape)
        if std > 0.0:
            if self.mode == "quat":
                params["rot_b2"] = np.array([1.0, 0.0, 0.0, 0.0])
            elif self.mode == "matrix":
                params["rot_b2"] = np.eye(3).ravel()
            elif self.mode == "anchors":
                half = (self.input_size - 1) / 2.0
                params["anchors_b2"] = np.array(
                    [[0.0, 0.0, 0.0], [-half, -half, 0.0], [half, -half, 0.0]]
                ).ravel()
        return params

    # --- forward / backward -----------------------------------------------

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        expected = (self.in_channels, self.input_size, self.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"input shape error: expected (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        return x

    def forward_batch(self, x: np.ndarray):
        """Raw head outputs {head: (B, dim)} plus the cache for backward."""
        x = self._check_batch(x)
        cache = {"convs": []}
        h = x
        for i in range(len(CONV_CHANNELS)):
            w, bias = self.params[f"conv{i + 1}_w"], self.params[f"conv{i + 1}_b"]
            pre, cols = conv3_forward(h, w, bias)
            act, mask = relu_forward(pre)
            pooled, pool_cache = maxpool2_forward(act, POOL_STRIDES[i])
            cache["convs"].append((h.shape, cols, mask, pool_cache))
            h = pooled
        feats = h.reshape(h.shape[0], -1)
        cache["pooled_shape"] = h.shape
        cache["feats"] = feats

        raw = {}
        cache["heads"] = {}
        for head in self.head_dims:
            z1 = feats @ self.params[f"{head}_w1"] + self.params[f"{head}_b1"]
            a1, mask1 = relu_forward(z1)
            raw[head] = a1 @ self.params[f"{head}_w2"] + self.params[f"{head}_b2"]
            cache["heads"][head] = (a1, mask1)
        return raw, cache

    def backward(self, cache, draw: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(raw head output) for each head."""
        grads = {}
        feats = cache["feats"]
        dfeats = np.zeros_like(feats)
        for head in self.head_dims:
            d_out = draw.get(head)
            if d_out is None:
                d_out = np.zeros((feats.shape[0], self.head_dims[head]))
            a1, mask1 = cache["heads"][head]
            grads[f"{head}_w2"] = a1.T @ d_out
            grads[f"{head}_b2"] = d_out.sum(axis=0)
            da1 = relu_backward(d_out @ self.params[f"{head}_w2"].T, mask1)
            grads[f"{head}_w1"] = feats.T @ da1
            grads[f"{head}_b1"] = da1.sum(axis=0)
            dfeats += da1 @ self.params[f"{head}_w1"].T

        dh = dfeats.reshape(cache["pooled_shape"])
        for i in reversed(range(len(CONV_CHANNELS))):
            x_shape, cols, mask, pool_cache = cache["convs"][i]
            d_act = maxpool2_backward(dh, pool_cache)
            d_pre = relu_backward(d_act, mask)
            dh, dw, db = conv3_backward(d_pre, x_shape, cols, self.params[f"conv{i + 1}_w"])
            grads[f"conv{i + 1}_w"] = dw
            grads[f"conv{i + 1}_b"] = db
        return grads

    def forward(self, image: np.ndarray) -> PredictorOutput:
        """Run one image (s, s) or triplet (3, s, s) and package the output."""
        image = np.asarray(image, dtype=float)
        if image.ndim == 2:
            batch = image[None, None]
        elif image.ndim == 3:
            batch = image[None]
        else:
            raise ValueError(f"input shape error: got {image.shape}")
        raw, _ = self.forward_batch(batch)
        out = PredictorOutput(mode=self.mode)
        if self.mode == "anchors":
            out.anchors = raw["anchors"][0].reshape(3, 3)
        else:
            out.t = raw["t"][0]
            if self.mode == "quat":
                out.quat = raw["rot"][0]
            elif self.mode == "euler":
                out.euler = raw["rot"][0]
            else:
                out.matrix = raw["rot"][0].reshape(3, 3)
        if self.with_trans_probs:
            out.trans_probs = softmax(raw["cls_t"][0])
        if self.with_rot_probs:
            out.rot_probs = softmax(raw["cls_r"][0])
        return out

    # --- checkpoint I/O -----------------------------------------------------

    def save(self, path) -> None:
        flags = (
            (1 if self.with_trans_probs else 0)
            | (2 if self.with_rot_probs else 0)
            | (4 if self.triplet else 0)
        )
        header = struct.pack(
            "<4sBBBBBBHHB",
            _MAGIC,
            _VERSION,
            REPRESENTATION_MODES.index(self.mode),
            flags,
            0,  # activation: relu
            0,  # padding: zero, same-size
            0,  # pooling: max 2x2
            self.input_size,
            HEAD_WIDTH,
            len(CONV_CHANNELS),
        )
        header += struct.pack(f"<{len(CONV_CHANNELS)}H", *CONV_CHANNELS)
        header += struct.pack(f"<{len(POOL_STRIDES)}B", *POOL_STRIDES)
        blob = np.concatenate([self.params[n].ravel() for n in self.param_order()])
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(struct.pack("<Q", blob.size))
            fh.write(blob.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "RegressorModel":
        data = Path(path).read_bytes()
        head_fmt = "<4sBBBBBBHHB"
        head_size = struct.calcsize(head_fmt)
        magic, version, mode_idx, flags, act, pad, pool, input_size, head_width, n_conv = struct.unpack(
            head_fmt, data[:head_size]
        )
        if magic != _MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if (act, pad, pool) != (0, 0, 0):
            raise ValueError("unsupported layer configuration in checkpoint header")
        offset = head_size
        channels = struct.unpack_from(f"<{n_conv}H", data, offset)
        offset += 2 * n_conv
        strides = struct.unpack_from(f"<{n_conv}B", data, offset)
        offset += n_conv
        if channels != CONV_CHANNELS or strides != POOL_STRIDES or head_width != HEAD_WIDTH:
            raise ValueError("checkpoint architecture does not match this build")
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        blob = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(float)

        model = cls(
            mode=REPRESENTATION_MODES[mode_idx],
            with_trans_probs=bool(flags & 1),
            with_rot_probs=bool(flags & 2),
            input_size=input_size,
            triplet=bool(flags & 4),
            params={},
        )
        shapes = model._param_shapes()
        params = {}
        pos = 0
        for name in model.param_order():
            n = int(np.prod(shapes[name]))
            params[name] = blob[pos : pos + n].reshape(shapes[name])
            pos += n
        if pos != blob.size:
            raise ValueError("checkpoint payload size does not match architecture")
        model.params = params
        return model
