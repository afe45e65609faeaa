"""Per-pixel embedding network over range images.

A deliberately small fully-convolutional encoder (3x3 tanh, 3x3 tanh, 1x1
head) mapping the 5-channel spherical projection to per-pixel features.
Forward and reverse passes are written out by hand in float64 so every
gradient can be checked against finite differences; no autograd framework
is involved anywhere.
"""
import json
import struct
from dataclasses import dataclass

import numpy as np

_NORM_EPS = 1e-12
_MAGIC = b"STNT"
_VERSION = 1


def _conv_forward(x, w, b):
    """Same-padded stride-1 convolution.

    x: (H, W, Cin), w: (k, k, Cin, Cout), b: (Cout,). Returns the output
    and the patch matrix kept for the reverse pass.
    """
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    # win: (H, W, Cin, k, k) -> patches (H*W, k*k*Cin) matching w layout
    patches = win.transpose(0, 1, 3, 4, 2).reshape(x.shape[0] * x.shape[1], -1)
    out = patches @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(x.shape[0], x.shape[1], -1), patches


def _conv_backward(gy, patches, x_shape, w):
    """Gradients of the same-padded convolution.

    Returns (gx, gw, gb); gx is assembled by scattering the patch
    gradients back through the padding.
    """
    h, w_img, cin = x_shape
    k = w.shape[0]
    p = k // 2
    gy_mat = gy.reshape(-1, gy.shape[2])
    gw = (patches.T @ gy_mat).reshape(w.shape)
    gb = gy_mat.sum(axis=0)
    gpatch = (gy_mat @ w.reshape(-1, w.shape[3]).T).reshape(h, w_img, k, k, cin)
    gxp = np.zeros((h + 2 * p, w_img + 2 * p, cin))
    for di in range(k):
        for dj in range(k):
            gxp[di:di + h, dj:dj + w_img] += gpatch[:, :, di, dj, :]
    return gxp[p:p + h, p:p + w_img], gw, gb


@dataclass
class EmbeddingField:
    """Per-pixel features with the validity mask of the source projection."""

    features: np.ndarray   # (H, W, C)
    valid: np.ndarray      # (H, W) bool

    def valid_features(self):
        return self.features[self.valid]


class EmbeddingNet:
    """5 -> hidden -> hidden -> c_out per-pixel encoder.

    head="unit" L2-normalizes every pixel feature (smoothly, so the
    mapping stays differentiable at zero); head="sigmoid" squashes to
    (0, 1) and is what the foreground model uses with c_out=1. Invalid
    pixels are zeroed on the way in and out.
    """

    def __init__(self, c_in=5, hidden=16, c_out=32, head="unit", seed=0):
        if head not in ("unit", "sigmoid"):
            raise ValueError(f"unknown head {head!r}")
        self.c_in = c_in
        self.hidden = hidden
        self.c_out = c_out
        self.head = head
        rng = np.random.default_rng(seed)

        def w_init(k, cin, cout):
            return rng.normal(0.0, 1.0 / np.sqrt(k * k * cin), (k, k, cin, cout))

        self.params = [w_init(3, c_in, hidden), np.zeros(hidden),
                       w_init(3, hidden, hidden), np.zeros(hidden),
                       w_init(1, hidden, c_out), np.zeros(c_out)]
        self.in_mean = np.zeros(c_in)
        self.in_std = np.ones(c_in)
        self._cache = None

    @property
    def n_parameters(self):
        return int(sum(p.size for p in self.params))

    def fit_standardizer(self, images):
        """Per-channel mean/std over the valid pixels of the given range
        images; applied to every future forward pass."""
        rows = np.concatenate([im.channels[im.valid] for im in images])
        if rows.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, "
                             f"got {rows.shape[1]}")
        self.in_mean = rows.mean(axis=0)
        self.in_std = np.maximum(rows.std(axis=0), 1e-6)

    def forward_field(self, channels, valid):
        channels = np.asarray(channels, dtype=np.float64)
        if channels.ndim != 3 or channels.shape[2] != self.c_in:
            raise ValueError(f"expected (H, W, {self.c_in}) input, "
                             f"got {channels.shape}")
        x = (channels - self.in_mean) / self.in_std
        x[~valid] = 0.0
        w1, b1, w2, b2, w3, b3 = self.params
        z1, p1 = _conv_forward(x, w1, b1)
        a1 = np.tanh(z1)
        z2, p2 = _conv_forward(a1, w2, b2)
        a2 = np.tanh(z2)
        z3, p3 = _conv_forward(a2, w3, b3)
        if self.head == "unit":
            norm = np.sqrt(np.sum(z3 * z3, axis=2, keepdims=True) + _NORM_EPS)
            out = z3 / norm
        else:
            out = 1.0 / (1.0 + np.exp(-z3))
        out = np.where(valid[:, :, None], out, 0.0)
        self._cache = (x.shape, valid, p1, a1, p2, a2, p3, z3, out)
        return EmbeddingField(out, valid.copy())

    def forward(self, image):
        """Embed a RangeImage (its channels are x, y, z, intensity, range)."""
        return self.forward_field(image.channels, image.valid)

    def take_cache(self):
        """Detach the activation cache of the last forward pass so a later
        backward can use it even after other forwards run in between."""
        if self._cache is None:
            raise RuntimeError("no forward pass cached")
        cache, self._cache = self._cache, None
        return cache

    def backward(self, grad_features, cache=None):
        """Parameter gradients for the last forward pass (or for an explicit
        cache from take_cache).

        grad_features has the field's (H, W, C) shape; entries at invalid
        pixels are ignored. Returns one gradient array per parameter, in
        parameter order.
        """
        if cache is None:
            cache = self._cache
        if cache is None:
            raise RuntimeError("backward before forward")
        x_shape, valid, p1, a1, p2, a2, p3, z3, out = cache
        w1, b1, w2, b2, w3, b3 = self.params
        g = np.where(valid[:, :, None], np.asarray(grad_features, float), 0.0)
        if self.head == "unit":
            norm = np.sqrt(np.sum(z3 * z3, axis=2, keepdims=True) + _NORM_EPS)
            y = z3 / norm
            gz3 = (g - y * np.sum(y * g, axis=2, keepdims=True)) / norm
        else:
            gz3 = g * out * (1.0 - out)
        ga2, gw3, gb3 = _conv_backward(gz3, p3, a2.shape, w3)
        gz2 = ga2 * (1.0 - a2 * a2)
        ga1, gw2, gb2 = _conv_backward(gz2, p2, a1.shape, w2)
        gz1 = ga1 * (1.0 - a1 * a1)
        _, gw1, gb1 = _conv_backward(gz1, p1, x_shape, w1)
        return [gw1, gb1, gw2, gb2, gw3, gb3]

    def config(self):
        return {"c_in": self.c_in, "hidden": self.hidden,
                "c_out": self.c_out, "head": self.head}


def flatten_params(params):
    return np.concatenate([p.ravel() for p in params])


def unflatten_params(vec, like):
    out, at = [], 0
    for p in like:
        out.append(np.asarray(vec[at:at + p.size]).reshape(p.shape).copy())
        at += p.size
    if at != len(vec):
        raise ValueError("parameter vector length mismatch")
    return out


class Adam:
    """Plain Adam over a parameter list; lr is mutable for step decay."""

    def __init__(self, params, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def save_checkpoint(path, net, extra=None):
    """Versioned binary checkpoint: header, JSON config echo, float32 LE
    parameter dump."""
    meta = {"config": net.config(),
            "in_mean": net.in_mean.tolist(),
            "in_std": net.in_std.tolist(),
            "shapes": [list(p.shape) for p in net.params],
            "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    flat = flatten_params(net.params).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHII", _MAGIC, _VERSION, 0, len(blob),
                             flat.size))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_checkpoint(path):
    """Rebuild the network from a checkpoint; returns (net, extra)."""
    head_size = struct.calcsize("<4sHHII")
    with open(path, "rb") as fh:
        head = fh.read(head_size)
        if len(head) < head_size:
            raise ValueError(f"{path}: truncated checkpoint")
        magic, version, _, blob_len, n_params = struct.unpack("<4sHHII", head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version "
                             f"{version}")
        meta = json.loads(fh.read(blob_len).decode())
        flat = np.frombuffer(fh.read(n_params * 4), dtype="<f4")
    if flat.size != n_params:
        raise ValueError(f"{path}: truncated parameter block")
    net = EmbeddingNet(**meta["config"])
    like = [np.empty(s) for s in meta["shapes"]]
    net.params = unflatten_params(flat.astype(np.float64), like)
    net.in_mean = np.asarray(meta["in_mean"], dtype=np.float64)
    net.in_std = np.asarray(meta["in_std"], dtype=np.float64)
    return net, meta["extra"]
