"""Dense numeric kernels used by every other module.

Small multi-layer perceptrons with hand-written backpropagation, an Adam
optimizer, a numerically safe softmax, seeded counter-based RNG streams, and
a flat binary checkpoint container.  All math is 64-bit floating point.

Forward and backward accept either a single vector (1-D array) or a batch
(2-D array, one sample per row).  Parameter gradients are summed over batch
rows; callers fold any 1/B factor into the upstream gradient.
"""

from __future__ import annotations

import json
import math

import numpy as np

_ACTIVATIONS = ("tanh", "relu", "identity")
_MASK64 = (1 << 64) - 1


# ---------- rng ----------


def rng_stream(seed: int, domain: int = 0) -> np.random.Generator:
    """Return a seeded generator backed by the Philox 4x64 counter-based bit
    generator.  The stream is fully determined by ``(seed, domain)``: the two
    values form the Philox key directly, so identical inputs reproduce the
    identical draw sequence on any platform.  Distinct domains give
    statistically independent streams for one experiment seed.
    """
    key = np.array([seed & _MASK64, domain & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sigmoid(x):
    """Logistic function, stable for large arguments of either sign."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


# ---------- mlp ----------


def _apply_act(z, tag):
    if tag == "tanh":
        return np.tanh(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_prime_from_output(a, tag):
    # derivative of the activation expressed through its own output
    if tag == "tanh":
        return 1.0 - a * a
    if tag == "relu":
        return (a > 0.0).astype(np.float64)
    return np.ones_like(a)


class Mlp:
    """Fully connected net with one activation tag for hidden layers and one
    for the output layer (``output_activation``, defaulting to the same tag).

    Weights have shape (fan_in, fan_out) so a forward step is ``x @ W + b``.
    With ``rng`` given, parameters start uniform in +-1/sqrt(fan_in);
    otherwise they start at zero (handy for tests that assign them).
    """

    def __init__(self, sizes, activation="tanh", output_activation=None, rng=None):
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        self.sizes = [int(s) for s in sizes]
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation tag {activation!r}")
        out_act = activation if output_activation is None else output_activation
        if out_act not in _ACTIVATIONS:
            raise ValueError(f"unknown activation tag {out_act!r}")
        self.activation = activation
        self.output_activation = out_act
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.weights.append(w)
            self.biases.append(b)

    # -- structure --

    def _tag(self, layer):
        return self.output_activation if layer == len(self.weights) - 1 else self.activation

    def parameters(self):
        """Flat parameter list [W0, b0, W1, b1, ...]; arrays are live views."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self):
        clone = Mlp(self.sizes, self.activation, self.output_activation)
        for dst, src in zip(clone.parameters(), self.parameters()):
            dst[...] = src
        return clone

    # -- forward / backward --

    def _promote(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return x[None, :], True
        if x.ndim != 2:
            raise ValueError("input must be a vector or a batch of rows")
        return x, False

    def forward(self, x):
        h, single = self._promote(x)
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != {self.sizes[0]}")
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _apply_act(h @ w + b, self._tag(layer))
        return h[0] if single else h

    def forward_cache(self, x):
        """Forward pass that also returns what backward needs."""
        h, single = self._promote(x)
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != {self.sizes[0]}")
        inputs = []
        outputs = []
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = _apply_act(h @ w + b, self._tag(layer))
            outputs.append(h)
        cache = {"inputs": inputs, "outputs": outputs, "single": single}
        return (h[0] if single else h), cache

    def backward(self, cache, grad_out):
        """Backpropagate an upstream gradient through a cached forward pass.

        Args:
            cache: second result of :meth:`forward_cache`.
            grad_out: gradient of the loss w.r.t. the net output, same shape
                as that output.

        Returns:
            (param_grads, grad_input) where param_grads aligns with
            :meth:`parameters` and grad_input matches the original input.
        """
        delta = np.asarray(grad_out, dtype=np.float64)
        if cache["single"]:
            delta = delta[None, :]
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            delta = delta * _act_prime_from_output(cache["outputs"][layer], self._tag(layer))
            w_grads[layer] = cache["inputs"][layer].T @ delta
            b_grads[layer] = delta.sum(axis=0)
            delta = delta @ self.weights[layer].T
        grads = []
        for wg, bg in zip(w_grads, b_grads):
            grads.append(wg)
            grads.append(bg)
        return grads, (delta[0] if cache["single"] else delta)


# ---------- optimizer ----------


class Adam:
    """Adam with bias correction.  Updates the given arrays in place."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------- softmax ----------


def softmax_logits(z):
    """Probabilities from logits along the last axis, max-subtracted for
    overflow safety."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------- checkpoint container ----------

CHECKPOINT_MAGIC = b"COVRCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    """Write named float64 arrays plus a JSON meta block to ``path``.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header ``{"format_version", "meta", "arrays": [{"name", "shape"}, ...]}``,
    then the raw array blocks in header order, each little-endian float64 in
    row-major order.  Saving the result of :func:`load_checkpoint` reproduces
    the file byte for byte.
    """
    blocks = []
    index = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        index.append({"name": str(name), "shape": list(a.shape)})
        blocks.append(a.astype("<f8").tobytes(order="C"))
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "meta": meta or {}, "arrays": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for block in blocks:
            fh.write(block)


def load_checkpoint(path):
    """Read a container written by :func:`save_checkpoint`.

    Returns:
        (arrays, meta): dict of float64 arrays in file order, and the meta
        dict stored alongside them.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    off = len(CHECKPOINT_MAGIC)
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=off)[0])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 4
    header_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=off)[0])
    off += 8
    header = json.loads(raw[off : off + header_len].decode("utf-8"))
    off += header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        arrays[entry["name"]] = flat.reshape(shape)
    return arrays, header["meta"]


def mlp_arrays(net: Mlp, prefix: str = ""):
    """Name->array dict for a net's parameters, for checkpointing."""
    out = {}
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}w{layer}"] = w
        out[f"{prefix}b{layer}"] = b
    return out


def mlp_meta(net: Mlp):
    return {
        "sizes": list(net.sizes),
        "activation": net.activation,
        "output_activation": net.output_activation,
    }


def mlp_from_arrays(meta, arrays, prefix: str = "") -> Mlp:
    net = Mlp(meta["sizes"], meta["activation"], meta["output_activation"])
    for layer in range(len(net.weights)):
        net.weights[layer][...] = arrays[f"{prefix}w{layer}"]
        net.biases[layer][...] = arrays[f"{prefix}b{layer}"]
    return net
