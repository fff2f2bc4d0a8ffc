"""Dense feed-forward networks with hand-written reverse-mode gradients and Adam.

Everything runs in float64 on numpy arrays.  Inputs may be a single vector of
shape ``(d,)`` or a batch of shape ``(n, d)``; outputs follow the same rank.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = "qdfm-net-1"
_MAGIC = b"QDFMNET1"

_ACTIVATIONS = ("tanh", "softplus")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # numerically stable in both tails
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    return softplus(z)


def _act_grad(kind, z, a):
    if kind == "tanh":
        return 1.0 - a * a
    return sigmoid(z)


class DenseNet:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    Hidden layers use ``activation``; the output layer is affine.  Weights are
    stored as ``(fan_in, fan_out)`` matrices so a batch is ``x @ W + b``.
    """

    def __init__(self, widths, activation="tanh", rng=None, init_scale=1.0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least two positive layer widths, got {widths}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        rng = np.random.default_rng(rng)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = init_scale / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def params(self):
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def block_names(self):
        names = []
        for i in range(self.n_layers):
            names.extend((f"W{i}", f"b{i}"))
        return names

    def copy(self):
        other = DenseNet.__new__(DenseNet)
        other.widths = list(self.widths)
        other.activation = self.activation
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    # -- flat views -----------------------------------------------------
    def flatten(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        pos = 0
        for p in self.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        return self

    def flatten_grads(self, grads):
        return np.concatenate([g.ravel() for g in grads])

    # -- evaluation -----------------------------------------------------
    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (1, 2) or x.shape[-1] != self.in_dim:
            raise ValueError(f"input shape {x.shape} incompatible with input width {self.in_dim}")
        return x

    def forward(self, x):
        x = self._check_input(x)
        a = x
        last = self.n_layers - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = z if i == last else _act(self.activation, z)
        return a

    __call__ = forward

    def backward(self, x, grad_out):
        """Gradient of ``sum(grad_out * forward(x))``.

        Returns ``(param_grads, input_grad)`` where ``param_grads`` matches
        :meth:`params` order.  For batched input the parameter gradient is
        summed over the batch.
        """
        x = self._check_input(x)
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if not np.all(np.isfinite(grad_out)):
            raise FloatingPointError("non-finite output gradient passed to backward")
        single = x.ndim == 1
        if single:
            x = x[None, :]
            grad_out = grad_out[None, :]
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ValueError(f"output gradient shape {grad_out.shape} does not match output")

        acts = [x]
        pre = []
        last = self.n_layers - 1
        a = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            pre.append(z)
            a = z if i == last else _act(self.activation, z)
            acts.append(a)

        grads = [None] * (2 * self.n_layers)
        delta = grad_out
        for i in range(last, -1, -1):
            if i != last:
                delta = delta * _act_grad(self.activation, pre[i], acts[i + 1])
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        input_grad = delta[0] if single else delta
        return grads, input_grad

    # -- persistence ----------------------------------------------------
    def header(self, **extra):
        head = {"widths": self.widths, "activation": self.activation,
                "version": CHECKPOINT_VERSION}
        head.update(extra)
        return head

    def save(self, path, binary=True, **extra):
        save_params(path, self.header(**extra), self.flatten(), binary=binary)

    @classmethod
    def load(cls, path):
        head, flat = load_params(path)
        net = cls(head["widths"], activation=head["activation"], rng=0)
        net.unflatten(flat)
        return net, head


def save_params(path, header, flat, binary=True):
    """Write a checkpoint: JSON header + flat float64 parameters.

    Binary layout: magic, uint32 header length, UTF-8 JSON header, then
    little-endian float64 values.  The JSON form stores both in one object.
    """
    path = Path(path)
    flat = np.ascontiguousarray(flat, dtype="<f8")
    tmp = path.with_name(path.name + ".tmp")
    if binary:
        head = json.dumps(header, sort_keys=True).encode()
        with open(tmp, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            fh.write(flat.tobytes())
    else:
        with open(tmp, "w") as fh:
            json.dump({"header": header, "params": [repr(float(v)) for v in flat]}, fh)
    tmp.replace(path)


def load_params(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(_MAGIC):
        off = len(_MAGIC)
        (n,) = struct.unpack("<I", raw[off:off + 4])
        off += 4
        header = json.loads(raw[off:off + n].decode())
        flat = np.frombuffer(raw[off + n:], dtype="<f8").astype(np.float64)
        return header, flat
    obj = json.loads(raw.decode())
    return obj["header"], np.array([float(v) for v in obj["params"]], dtype=np.float64)


@dataclass
class Adam:
    """Adam with bias correction.  Moments are allocated lazily on first step."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads, names=None):
        """Update ``params`` in place and return them."""
        if len(params) != len(grads):
            raise ValueError(f"{len(params)} parameter blocks but {len(grads)} gradients")
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                label = names[i] if names is not None else f"block {i}"
                raise FloatingPointError(f"non-finite gradient in parameter {label}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        return params


def optimizer_step(state: Adam, params, grads, names=None):
    return state.step(params, grads, names=names)
