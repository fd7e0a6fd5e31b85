"""
Micro-scale differentiable classifiers.

Every network keeps its parameters in one flat float64 vector with named slices. Each layer
has a batched forward and an exact backward, so input gradients (saliency, attacks) and
parameter gradients (training) come from the same code path.

Architectures
-------------
TimeConv   conv1d(8 x 9) -> ReLU -> maxpool 4 -> flatten -> standardize -> dense -> ReLU -> head
FreqAttn   16 tokens x 8 bins -> token projection + positional encoding -> single-head
           attention -> mean-pool -> standardize -> dense -> ReLU -> head
TfConv2d   conv2d(4 x 3 x 3) -> ReLU -> maxpool 2 -> flatten -> standardize -> dense -> ReLU -> head
DenseHead  flatten -> standardize -> dense -> ReLU -> head
Linear     logits = W x + b (latent = x)
Fused      two branches whose latents are concatenated into a linear head ("concat"), or whose
           logits are summed ("additive")
"""

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.model_selection import train_test_split

from ecg_eat.module_utils.errors import ArtifactError, InvalidArgument, require
from ecg_eat.module_utils.rng import make_rng
from ecg_eat.module_utils.store import read_json, write_json

LOGGER = logging.getLogger(__name__)

TIME_CONV = "TimeConv"
FREQ_ATTN = "FreqAttn"
TF_CONV2D = "TfConv2d"
DENSE_HEAD = "DenseHead"
LINEAR = "Linear"
FUSED = "Fused"
BRANCH_KINDS = (TIME_CONV, FREQ_ATTN, TF_CONV2D, DENSE_HEAD, LINEAR)
FUSION_MODES = ("concat", "additive")

NET_FORMAT = "ecg-eat/micronet"
NET_VERSION = 1


# #############################################################################
# LAYOUT
# #############################################################################
def _branch_dims(kind, input_dims, latent_dim, n_classes):
    shape = tuple(int(d) for d in np.atleast_1d(input_dims))
    require(all(d > 0 for d in shape), f"input dims must be positive, got {shape}")
    require(latent_dim > 0 and n_classes >= 2, "latent_dim must be positive and n_classes >= 2")
    dims = {"input_shape": shape, "latent_dim": int(latent_dim), "n_classes": int(n_classes)}
    if kind == TIME_CONV:
        require(len(shape) == 1, "TimeConv expects a 1-D input")
        dims.update(kernels=8, width=9, pool=4)
        require((shape[0] - 8) // 4 >= 1, f"TimeConv input of length {shape[0]} is too short")
    elif kind == FREQ_ATTN:
        require(len(shape) == 1 and shape[0] % 16 == 0, "FreqAttn expects a 1-D input split into 16 tokens")
        dims.update(tokens=16, token_dim=shape[0] // 16, model_dim=8)
    elif kind == TF_CONV2D:
        require(len(shape) == 2 and min(shape) >= 4, "TfConv2d expects a 2-D input of at least 4 x 4")
        dims.update(kernels=4, ksize=3, pool=2)
    elif kind == LINEAR:
        dims["latent_dim"] = int(np.prod(shape))
    elif kind != DENSE_HEAD:
        raise InvalidArgument(f"unknown branch kind {kind!r}, expected one of {', '.join(BRANCH_KINDS)}")
    return dims


def _feature_size(kind, dims):
    shape = dims["input_shape"]
    if kind == TIME_CONV:
        return dims["kernels"] * ((shape[0] - dims["width"] + 1) // dims["pool"])
    if kind == TF_CONV2D:
        out_h, out_w = (s - dims["ksize"] + 1 for s in shape)
        return dims["kernels"] * (out_h // dims["pool"]) * (out_w // dims["pool"])
    if kind == FREQ_ATTN:
        return dims["model_dim"]
    return int(np.prod(shape))


def _layout(arch, dims):
    """Ordered (name, shape, fan_in) triples of the flat parameter vector."""
    n_classes, latent = dims["n_classes"], dims["latent_dim"]
    if arch == FUSED:
        entries = []
        for part in ("a", "b"):
            spec = dims["parts"][part]
            entries += [(f"{part}/{name}", shape, fan) for name, shape, fan in _layout(spec["arch"], spec["dims"])]
        if dims["mode"] == "concat":
            entries += [("head/W", (n_classes, latent), latent), ("head/b", (n_classes,), 0)]
        return entries
    if arch == LINEAR:
        return [("head/W", (n_classes, latent), latent), ("head/b", (n_classes,), 0)]

    entries = []
    if arch == TIME_CONV:
        entries += [("conv/W", (dims["kernels"], dims["width"]), dims["width"]), ("conv/b", (dims["kernels"],), 0)]
    elif arch == TF_CONV2D:
        k = dims["ksize"]
        entries += [("conv/W", (dims["kernels"], k, k), k * k), ("conv/b", (dims["kernels"],), 0)]
    elif arch == FREQ_ATTN:
        t, d = dims["token_dim"], dims["model_dim"]
        entries += [("proj/W", (d, t), t), ("proj/b", (d,), 0)]
        entries += [(f"attn/{name}", (d, d), d) for name in ("Wq", "Wk", "Wv")]
    n_features = _feature_size(arch, dims)
    entries += [("dense/W", (latent, n_features), n_features), ("dense/b", (latent,), 0)]
    entries += [("head/W", (n_classes, latent), latent), ("head/b", (n_classes,), 0)]
    return entries


def _default_buffers(arch, dims):
    if arch == FUSED:
        buffers = {}
        for part in ("a", "b"):
            spec = dims["parts"][part]
            buffers.update({f"{part}/{k}": v for k, v in _default_buffers(spec["arch"], spec["dims"]).items()})
        return buffers
    if arch == LINEAR:
        return {}
    n_features = _feature_size(arch, dims)
    return {"std/mu": np.zeros(n_features), "std/sd": np.ones(n_features)}


def _sub(mapping, prefix):
    return {k[len(prefix) :]: v for k, v in mapping.items() if k.startswith(prefix)}


class MicroNet:
    """A small classifier with a flat parameter vector.

    `params` is the single source of truth; `view(name)` returns a reshaped window into it, so
    writing through a view updates the net. `buffers` hold the fixed standardization statistics.
    """

    def __init__(self, arch, dims, params=None, buffers=None):
        require(arch in BRANCH_KINDS + (FUSED,), f"unknown architecture {arch!r}")
        self.arch = arch
        self.dims = dims
        self.layout = _layout(arch, dims)
        self.slices = {}
        offset = 0
        for name, shape, _ in self.layout:
            size = int(np.prod(shape))
            self.slices[name] = (offset, offset + size, shape)
            offset += size
        self.params = np.zeros(offset) if params is None else np.asarray(params, dtype=np.float64).copy()
        require(self.params.shape == (offset,), f"{arch} expects {offset} parameters, got {self.params.size}")
        self.buffers = _default_buffers(arch, dims) if buffers is None else {k: np.array(v) for k, v in buffers.items()}

    @property
    def n_classes(self):
        return self.dims["n_classes"]

    @property
    def latent_dim(self):
        return self.dims["latent_dim"]

    @property
    def input_shape(self):
        if self.arch == FUSED:
            return tuple(self.dims["parts"][p]["dims"]["input_shape"] for p in ("a", "b"))
        return self.dims["input_shape"]

    def view(self, name):
        start, stop, shape = self.slices[name]
        return self.params[start:stop].reshape(shape)

    def views(self):
        return {name: self.view(name) for name in self.slices}

    def part(self, name):
        """Stand-alone copy of fused part "a" or "b"."""
        require(self.arch == FUSED, "only fused nets have parts")
        spec = self.dims["parts"][name]
        sub = MicroNet(spec["arch"], spec["dims"], buffers=_sub(self.buffers, f"{name}/"))
        for key in sub.slices:
            sub.view(key)[...] = self.view(f"{name}/{key}")
        return sub

    def mask(self, prefixes):
        """Boolean mask over params selecting slices whose name starts with any prefix."""
        selected = np.zeros(self.params.size, dtype=bool)
        for name, (start, stop, _) in self.slices.items():
            if any(name.startswith(prefix) for prefix in prefixes):
                selected[start:stop] = True
        return selected

    def copy(self):
        return MicroNet(self.arch, copy.deepcopy(self.dims), self.params, self.buffers)

    def __repr__(self):
        return f"MicroNet(arch={self.arch}, params={self.params.size}, latent={self.latent_dim}, classes={self.n_classes})"


def _initialize(net, seed):
    rng = make_rng(seed)
    for name, shape, fan_in in net.layout:
        if fan_in:
            bound = 1.0 / np.sqrt(fan_in)
            net.view(name)[...] = rng.uniform(-bound, bound, size=shape)
        else:
            net.view(name)[...] = 0.0
    return net


def build_branch(kind, input_dims, latent_dim=32, n_classes=4, seed=0):
    """Fresh branch classifier with fan-in scaled uniform weights and zero biases."""
    require(kind in BRANCH_KINDS, f"unknown branch kind {kind!r}, expected one of {', '.join(BRANCH_KINDS)}")
    net = MicroNet(kind, _branch_dims(kind, input_dims, latent_dim, n_classes))
    return _initialize(net, seed)


def build_fused(branch_a, branch_b, n_classes=None, mode="concat", seed=0):
    """Fused net carrying copies of both branches; a concat head is freshly initialized."""
    require(mode in FUSION_MODES, f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    require(FUSED not in (branch_a.arch, branch_b.arch), "branches must not be fused nets themselves")
    n_classes = n_classes or branch_a.n_classes
    require(
        branch_a.n_classes == n_classes and branch_b.n_classes == n_classes,
        "branches and head must agree on the number of classes",
    )
    dims = {
        "mode": mode,
        "n_classes": n_classes,
        "latent_dim": branch_a.latent_dim + branch_b.latent_dim,
        "parts": {
            "a": {"arch": branch_a.arch, "dims": copy.deepcopy(branch_a.dims)},
            "b": {"arch": branch_b.arch, "dims": copy.deepcopy(branch_b.dims)},
        },
    }
    buffers = {f"a/{k}": v for k, v in branch_a.buffers.items()}
    buffers.update({f"b/{k}": v for k, v in branch_b.buffers.items()})
    net = MicroNet(FUSED, dims, buffers=buffers)
    for part, branch in (("a", branch_a), ("b", branch_b)):
        for key in branch.slices:
            net.view(f"{part}/{key}")[...] = branch.view(key)
    if mode == "concat":
        rng = make_rng(seed)
        bound = 1.0 / np.sqrt(dims["latent_dim"])
        net.view("head/W")[...] = rng.uniform(-bound, bound, size=(n_classes, dims["latent_dim"]))
    return net


# #############################################################################
# LAYERS
# #############################################################################
def _conv1d(x, W, b):
    windows = sliding_window_view(x, W.shape[1], axis=1)
    return np.einsum("btw,kw->bkt", windows, W) + b[None, :, None], windows


def _conv1d_back(windows, W, dout, length):
    dW = np.einsum("bkt,btw->kw", dout, windows)
    taps = np.einsum("bkt,kw->btw", dout, W)
    dx = np.zeros((dout.shape[0], length))
    span = dout.shape[2]
    for j in range(W.shape[1]):
        dx[:, j : j + span] += taps[:, :, j]
    return dx, dW, dout.sum(axis=(0, 2))


def _conv2d(x, W, b):
    k = W.shape[1]
    windows = sliding_window_view(x, (k, k), axis=(1, 2))
    return np.einsum("bijuv,kuv->bkij", windows, W) + b[None, :, None, None], windows


def _conv2d_back(windows, W, dout, shape):
    k = W.shape[1]
    dW = np.einsum("bkij,bijuv->kuv", dout, windows)
    taps = np.einsum("bkij,kuv->bijuv", dout, W)
    dx = np.zeros((dout.shape[0],) + tuple(shape))
    out_h, out_w = dout.shape[2], dout.shape[3]
    for u in range(k):
        for v in range(k):
            dx[:, u : u + out_h, v : v + out_w] += taps[:, :, :, u, v]
    return dx, dW, dout.sum(axis=(0, 2, 3))


def _blocks(h, pool):
    """Non-overlapping pooling blocks on the trailing spatial axes, flattened into the last axis."""
    if h.ndim == 3:
        n = h.shape[2] // pool
        return h[:, :, : n * pool].reshape(h.shape[0], h.shape[1], n, pool)
    n, m = h.shape[2] // pool, h.shape[3] // pool
    blocks = h[:, :, : n * pool, : m * pool].reshape(h.shape[0], h.shape[1], n, pool, m, pool)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(h.shape[0], h.shape[1], n, m, pool * pool)


def _maxpool(h, pool):
    blocks = _blocks(h, pool)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _maxpool_back(dout, arg, shape, pool):
    dblocks = np.zeros(dout.shape + (pool if len(shape) == 3 else pool * pool,))
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    dh = np.zeros(shape)
    if len(shape) == 3:
        n = dout.shape[2]
        dh[:, :, : n * pool] = dblocks.reshape(shape[0], shape[1], n * pool)
    else:
        n, m = dout.shape[2], dout.shape[3]
        grid = dblocks.reshape(shape[0], shape[1], n, m, pool, pool).transpose(0, 1, 2, 4, 3, 5)
        dh[:, :, : n * pool, : m * pool] = grid.reshape(shape[0], shape[1], n * pool, m * pool)
    return dh


def positional_encoding(n_tokens, dim):
    """Sinusoidal positional encoding, n_tokens x dim."""
    position = np.arange(n_tokens)[:, None]
    rate = 1.0 / np.power(10000.0, (2 * (np.arange(dim) // 2)) / dim)
    angles = position * rate[None, :]
    return np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))


def _softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _attention(tokens, P, dims):
    d = dims["model_dim"]
    E = tokens @ P["proj/W"].T + P["proj/b"] + positional_encoding(dims["tokens"], d)
    Q, K, V = (E @ P[f"attn/{name}"].T for name in ("Wq", "Wk", "Wv"))
    A = _softmax(Q @ K.transpose(0, 2, 1) / np.sqrt(d))
    O = A @ V
    return O.mean(axis=1), (tokens, E, Q, K, V, A)


def _attention_back(cache, dpooled, P, dims):
    tokens, E, Q, K, V, A = cache
    d = dims["model_dim"]
    dO = np.repeat(dpooled[:, None, :] / dims["tokens"], dims["tokens"], axis=1)
    dA = dO @ V.transpose(0, 2, 1)
    dV = A.transpose(0, 2, 1) @ dO
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / np.sqrt(d)
    dQ = dS @ K
    dK = dS.transpose(0, 2, 1) @ Q
    grads = {}
    dE = np.zeros_like(E)
    for name, dproj in (("Wq", dQ), ("Wk", dK), ("Wv", dV)):
        grads[f"attn/{name}"] = np.einsum("bsd,bse->de", dproj, E)
        dE += dproj @ P[f"attn/{name}"]
    grads["proj/W"] = np.einsum("bsd,bst->dt", dE, tokens)
    grads["proj/b"] = dE.sum(axis=(0, 1))
    return dE @ P["proj/W"], grads


# #############################################################################
# FORWARD / BACKWARD
# #############################################################################
def _features(arch, dims, P, X):
    """Pre-standardization feature matrix and the cache to differentiate it."""
    if arch == TIME_CONV:
        h, windows = _conv1d(X, P["conv/W"], P["conv/b"])
        a = np.maximum(h, 0.0)
        pooled, arg = _maxpool(a, dims["pool"])
        return pooled.reshape(X.shape[0], -1), (windows, h, arg, pooled.shape)
    if arch == TF_CONV2D:
        h, windows = _conv2d(X, P["conv/W"], P["conv/b"])
        a = np.maximum(h, 0.0)
        pooled, arg = _maxpool(a, dims["pool"])
        return pooled.reshape(X.shape[0], -1), (windows, h, arg, pooled.shape)
    if arch == FREQ_ATTN:
        tokens = X.reshape(X.shape[0], dims["tokens"], dims["token_dim"])
        return _attention(tokens, P, dims)
    return X.reshape(X.shape[0], -1), None


def _features_back(arch, dims, P, cache, df, X):
    if arch in (TIME_CONV, TF_CONV2D):
        windows, h, arg, pooled_shape = cache
        da = _maxpool_back(df.reshape(pooled_shape), arg, h.shape, dims["pool"])
        dh = da * (h > 0)
        if arch == TIME_CONV:
            dx, dW, db = _conv1d_back(windows, P["conv/W"], dh, X.shape[1])
        else:
            dx, dW, db = _conv2d_back(windows, P["conv/W"], dh, X.shape[1:])
        return dx, {"conv/W": dW, "conv/b": db}
    if arch == FREQ_ATTN:
        dtokens, grads = _attention_back(cache, df, P, dims)
        return dtokens.reshape(X.shape), grads
    return df.reshape(X.shape), {}


def _run(arch, dims, P, buffers, X):
    """Batched forward: (latent, logits, cache)."""
    if arch == FUSED:
        out = {}
        for i, part in enumerate(("a", "b")):
            spec = dims["parts"][part]
            out[part] = _run(spec["arch"], spec["dims"], _sub(P, f"{part}/"), _sub(buffers, f"{part}/"), X[i])
        latent = np.hstack([out["a"][0], out["b"][0]])
        if dims["mode"] == "concat":
            logits = latent @ P["head/W"].T + P["head/b"]
        else:
            logits = out["a"][1] + out["b"][1]
        return latent, logits, out
    if arch == LINEAR:
        flat = X.reshape(X.shape[0], -1)
        return flat, flat @ P["head/W"].T + P["head/b"], None
    f, fcache = _features(arch, dims, P, X)
    s = (f - buffers["std/mu"]) / buffers["std/sd"]
    z = s @ P["dense/W"].T + P["dense/b"]
    latent = np.maximum(z, 0.0)
    logits = latent @ P["head/W"].T + P["head/b"]
    return latent, logits, (fcache, s, z, latent)


def _backprop(arch, dims, P, buffers, X, cache, dlogits, dlatent=None):
    """Gradients of sum(dlogits * logits) + sum(dlatent * latent) w.r.t. the input and params."""
    if arch == FUSED:
        grads = {}
        if dims["mode"] == "concat":
            latent = np.hstack([cache["a"][0], cache["b"][0]])
            grads["head/W"] = dlogits.T @ latent
            grads["head/b"] = dlogits.sum(axis=0)
            dlat = dlogits @ P["head/W"]
            if dlatent is not None:
                dlat = dlat + dlatent
            split = cache["a"][0].shape[1]
            parts = {"a": (np.zeros_like(dlogits), dlat[:, :split]), "b": (np.zeros_like(dlogits), dlat[:, split:])}
        else:
            split = cache["a"][0].shape[1]
            parts = {
                "a": (dlogits, None if dlatent is None else dlatent[:, :split]),
                "b": (dlogits, None if dlatent is None else dlatent[:, split:]),
            }
        dxs = []
        for i, part in enumerate(("a", "b")):
            spec = dims["parts"][part]
            sub_p, sub_b = _sub(P, f"{part}/"), _sub(buffers, f"{part}/")
            dx, sub = _backprop(spec["arch"], spec["dims"], sub_p, sub_b, X[i], cache[part][2], *parts[part])
            dxs.append(dx)
            grads.update({f"{part}/{k}": v for k, v in sub.items()})
        return tuple(dxs), grads
    if arch == LINEAR:
        flat = X.reshape(X.shape[0], -1)
        grads = {"head/W": dlogits.T @ flat, "head/b": dlogits.sum(axis=0)}
        dx = dlogits @ P["head/W"]
        if dlatent is not None:
            dx = dx + dlatent
        return dx.reshape(X.shape), grads

    fcache, s, z, latent = cache
    grads = {"head/W": dlogits.T @ latent, "head/b": dlogits.sum(axis=0)}
    dlat = dlogits @ P["head/W"]
    if dlatent is not None:
        dlat = dlat + dlatent
    dz = dlat * (z > 0)
    grads["dense/W"] = dz.T @ s
    grads["dense/b"] = dz.sum(axis=0)
    df = (dz @ P["dense/W"]) / buffers["std/sd"]
    dx, fgrads = _features_back(arch, dims, P, fcache, df, X)
    grads.update(fgrads)
    return dx, grads


def _as_batch(net, x):
    """(batched input, was_single) after checking the input shape."""
    if net.arch == FUSED:
        require(isinstance(x, (tuple, list)) and len(x) == 2, "a fused net takes a pair of modality inputs")
        parts = [np.asarray(xi, dtype=np.float64) for xi in x]
        shapes = net.input_shape
        single = [p.shape == tuple(s) for p, s in zip(parts, shapes)]
        batched = [p.shape[1:] == tuple(s) for p, s in zip(parts, shapes)]
        if all(single):
            return tuple(p[None] for p in parts), True
        require(all(batched) and parts[0].shape[0] == parts[1].shape[0],
                f"input shapes {[p.shape for p in parts]} do not match {shapes}")
        return tuple(parts), False
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(net.input_shape)
    if x.shape == shape:
        return x[None], True
    require(x.shape[1:] == shape, f"input shape {x.shape} does not match {shape}")
    return x, False


def _batch_size(X):
    return X[0].shape[0] if isinstance(X, tuple) else X.shape[0]


def _unbatch(dx, single):
    if isinstance(dx, tuple):
        return tuple(d[0] for d in dx) if single else dx
    return dx[0] if single else dx


def forward_batch(net, X):
    """(latents, probs) for a batch."""
    X, _ = _as_batch(net, X)
    latent, logits, _ = _run(net.arch, net.dims, net.views(), net.buffers, X)
    return latent, _softmax(logits)


def forward(net, x):
    """(latent, probs) for one input; probs is the softmax of the logits."""
    X, single = _as_batch(net, x)
    latent, logits, _ = _run(net.arch, net.dims, net.views(), net.buffers, X)
    probs = _softmax(logits)
    return (latent[0], probs[0]) if single else (latent, probs)


def logits_batch(net, X):
    X, _ = _as_batch(net, X)
    return _run(net.arch, net.dims, net.views(), net.buffers, X)[1]


def predict_proba(net, X):
    return forward_batch(net, X)[1]


def predict(net, X):
    return predict_proba(net, X).argmax(axis=1)


def grad_input(net, x, target, of="logit"):
    """Exact gradient of one logit, or of one log-probability, w.r.t. the input.

    `x` may be a single input or a batch; `target` is a class index or one index per row.
    For a fused net the result is a pair of gradients, one per modality.
    """
    require(of in ("logit", "log_prob"), f"'of' must be 'logit' or 'log_prob', got {of!r}")
    X, single = _as_batch(net, x)
    n = _batch_size(X)
    targets = np.broadcast_to(np.asarray(target), (n,))
    require(np.issubdtype(targets.dtype, np.integer), "target must be an integer class index")
    require(bool(np.all((targets >= 0) & (targets < net.n_classes))), f"target outside [0, {net.n_classes})")
    P = net.views()
    _, logits, cache = _run(net.arch, net.dims, P, net.buffers, X)
    seed = np.zeros_like(logits)
    seed[np.arange(n), targets] = 1.0
    if of == "log_prob":
        seed = seed - _softmax(logits)
    dx, _ = _backprop(net.arch, net.dims, P, net.buffers, X, cache, seed)
    return _unbatch(dx, single)


def cross_entropy(probs, y):
    return float(-np.mean(np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))))


def param_grad(net, X, y):
    """(mean cross-entropy, gradient w.r.t. the flat parameter vector)."""
    X, _ = _as_batch(net, X)
    y = np.asarray(y, dtype=int)
    P = net.views()
    _, logits, cache = _run(net.arch, net.dims, P, net.buffers, X)
    probs = _softmax(logits)
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    _, grads = _backprop(net.arch, net.dims, P, net.buffers, X, cache, dlogits)
    flat = np.zeros_like(net.params)
    for name, (start, stop, _) in net.slices.items():
        if name in grads:
            flat[start:stop] = grads[name].ravel()
    return cross_entropy(probs, y), flat


def fit_standardization(net, X):
    """Set every standardization buffer from the features of `X`; returns the net."""
    X, _ = _as_batch(net, X)

    def fit(arch, dims, P, buffers, prefix, inputs):
        if arch == FUSED:
            for i, part in enumerate(("a", "b")):
                spec = dims["parts"][part]
                fit(spec["arch"], spec["dims"], _sub(P, f"{part}/"), buffers, f"{prefix}{part}/", inputs[i])
            return
        if arch == LINEAR:
            return
        f, _ = _features(arch, dims, P, inputs)
        sd = f.std(axis=0)
        buffers[f"{prefix}std/mu"] = f.mean(axis=0)
        buffers[f"{prefix}std/sd"] = np.where(sd > 1e-8, sd, 1.0)

    fit(net.arch, net.dims, net.views(), net.buffers, "", X)
    return net


def randomize_weights(net, seed):
    """Same architecture and buffers, freshly drawn parameters."""
    fresh = MicroNet(net.arch, copy.deepcopy(net.dims), buffers=net.buffers)
    return _initialize(fresh, seed)


# #############################################################################
# TRAINING
# #############################################################################
@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    batch: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    trainable: Optional[tuple] = None
    refit_standardization: bool = True

    def __post_init__(self):
        require(self.lr > 0, f"lr must be positive, got {self.lr}")
        require(0 < self.beta1 < 1 and 0 < self.beta2 < 1, "beta1 and beta2 must lie in (0, 1)")
        require(self.epsilon > 0 and self.batch >= 1, "epsilon must be positive and batch >= 1")
        require(self.max_epochs >= 0 and self.patience >= 1, "max_epochs must be >= 0 and patience >= 1")
        require(0 < self.val_fraction < 1, "val_fraction must lie in (0, 1)")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = 0

    def to_dict(self):
        return {
            "train_loss": [float(v) for v in self.train_loss],
            "val_loss": [float(v) for v in self.val_loss],
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


class Adam:
    """Adam on a flat parameter vector; only entries under `mask` move."""

    def __init__(self, size, config, mask=None):
        self.config = config
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.mask = np.ones(size, dtype=bool) if mask is None else mask

    def step(self, params, grad):
        c = self.config
        self.t += 1
        grad = np.where(self.mask, grad, 0.0)
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad**2
        m_hat = self.m / (1 - c.beta1**self.t)
        v_hat = self.v / (1 - c.beta2**self.t)
        params -= np.where(self.mask, c.lr * m_hat / (np.sqrt(v_hat) + c.epsilon), 0.0)
        return params


def take_rows(X, idx):
    return tuple(part[idx] for part in X) if isinstance(X, tuple) else X[idx]


def stratified_split(y, fraction, seed):
    """(train indices, validation indices), stratified when every class has two members."""
    idx = np.arange(len(y))
    if len(y) < 2:
        return idx, idx
    _, counts = np.unique(y, return_counts=True)
    n_val = max(1, int(round(fraction * len(y))))
    stratify = y if counts.min() >= 2 and n_val >= counts.size and len(y) - n_val >= counts.size else None
    train_idx, val_idx = train_test_split(idx, test_size=n_val, stratify=stratify, random_state=seed % 2**32)
    return np.sort(train_idx), np.sort(val_idx)


def train(net, dataset, config):
    """Adam on mean cross-entropy with early stopping on validation loss.

    Parameters
    ----------
    net : MicroNet
        Left untouched; a trained copy is returned.
    dataset : tuple
        (inputs, integer labels); a fused net takes inputs as a pair of arrays.
    config : TrainConfig

    Returns
    -------
    tuple
        (trained copy restored to the best validation epoch, TrainHistory)
    """
    X, y = dataset
    X, _ = _as_batch(net, X)
    y = np.asarray(y, dtype=int)
    require(y.size > 0 and _batch_size(X) == y.size, "training needs a non-empty dataset with one label per row")
    trained = net.copy()
    history = TrainHistory()
    if config.max_epochs == 0:
        return trained, history

    train_idx, val_idx = stratified_split(y, config.val_fraction, config.seed)
    X_train, y_train = take_rows(X, train_idx), y[train_idx]
    X_val, y_val = take_rows(X, val_idx), y[val_idx]
    if config.refit_standardization:
        fit_standardization(trained, X_train)

    mask = None if config.trainable is None else trained.mask(config.trainable)
    optimizer = Adam(trained.params.size, config, mask)
    rng = make_rng(config.seed)
    best_loss, best_params, wait = np.inf, trained.params.copy(), 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, order.size, config.batch):
            batch = order[start : start + config.batch]
            _, grad = param_grad(trained, take_rows(X_train, batch), y_train[batch])
            optimizer.step(trained.params, grad)
        history.train_loss.append(cross_entropy(predict_proba(trained, X_train), y_train))
        val_loss = cross_entropy(predict_proba(trained, X_val), y_val)
        history.val_loss.append(val_loss)
        history.stopped_epoch = epoch
        if val_loss < best_loss:
            best_loss, best_params, wait = val_loss, trained.params.copy(), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= config.patience:
                LOGGER.debug("%s: early stop at epoch %d", net.arch, epoch)
                break

    trained.params[...] = best_params
    LOGGER.info("%s trained %d epochs, best val loss %.4f at epoch %d", net.arch, history.stopped_epoch + 1, best_loss,
                history.best_epoch)
    return trained, history


# #############################################################################
# PERSISTENCE
# #############################################################################
def net_to_dict(net):
    return {
        "format": NET_FORMAT,
        "version": NET_VERSION,
        "arch": net.arch,
        "dims": net.dims,
        "slices": {
            name: {"shape": list(shape), "values": [format(v, ".17g") for v in net.view(name).ravel()]}
            for name, (_, _, shape) in net.slices.items()
        },
        "buffers": {name: [format(v, ".17g") for v in np.ravel(value)] for name, value in net.buffers.items()},
    }


def _tupled(dims):
    dims = dict(dims)
    if "input_shape" in dims:
        dims["input_shape"] = tuple(dims["input_shape"])
    if "parts" in dims:
        dims["parts"] = {k: {"arch": v["arch"], "dims": _tupled(v["dims"])} for k, v in dims["parts"].items()}
    return dims


def net_from_dict(data, source="<memory>"):
    if data.get("format") != NET_FORMAT or data.get("version") != NET_VERSION:
        raise ArtifactError(f"not a version {NET_VERSION} {NET_FORMAT} document", source)
    net = MicroNet(data["arch"], _tupled(data["dims"]))
    if set(data["slices"]) != set(net.slices):
        raise ArtifactError("parameter slice names do not match the architecture", source)
    for name, entry in data["slices"].items():
        _, _, shape = net.slices[name]
        values = np.array([float(v) for v in entry["values"]])
        if tuple(entry["shape"]) != tuple(shape) or values.size != int(np.prod(shape)):
            raise ArtifactError(f"slice {name} has the wrong length", source)
        net.view(name)[...] = values.reshape(shape)
    for name, values in data.get("buffers", {}).items():
        if name not in net.buffers or len(values) != net.buffers[name].size:
            raise ArtifactError(f"buffer {name} does not match the architecture", source)
        net.buffers[name] = np.array([float(v) for v in values])
    return net


def save_net(net, path):
    write_json(path, net_to_dict(net))


def load_net(path):
    return net_from_dict(read_json(path), str(path))
