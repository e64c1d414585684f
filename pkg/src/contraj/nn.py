"""Parameter store, initialization, and the three small network blocks.

Blocks are plain functions over a ``ParamStore`` plus a name prefix:
a feed-forward stack (affine + tanh, final layer affine), a gated
recurrent cell, and affine heads.  Shapes are fixed at init time.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tape, Var, as_var, concat, matmul, sigmoid, tanh


class ParamStore:
    """Named parameters with paired gradient buffers and Adam state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self._m[name] = np.zeros_like(value)
        self._v[name] = np.zeros_like(value)

    def var(self, tape: Tape | None, name: str) -> Var:
        """Leaf Var for a parameter; a plain constant when tape is None."""
        if tape is None:
            return Var(self.params[name])
        leaf = Var(self.params[name], tape, ())
        tape.leaves.append((self, name, leaf))
        return leaf

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def names(self):
        return self.params.keys()

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"non-finite parameter: {name}")

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, p.copy())
            out._m[name] = self._m[name].copy()
            out._v[name] = self._v[name].copy()
        out.step = self.step
        return out

    def copy_prefix(self, src: str, dst: str) -> None:
        """Copy parameter values from one block prefix to another."""
        copied = 0
        for name in list(self.params):
            if name.startswith(src + "."):
                target = dst + name[len(src) :]
                if target not in self.params:
                    raise KeyError(f"no target parameter {target}")
                self.params[target][...] = self.params[name]
                copied += 1
        if copied == 0:
            raise KeyError(f"no parameters under prefix {src}")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step], dtype=np.int64)}
        for name, p in self.params.items():
            out[f"param/{name}"] = p
            out[f"adam_m/{name}"] = self._m[name]
            out[f"adam_v/{name}"] = self._v[name]
        return out

    @classmethod
    def from_state_arrays(cls, arrays) -> "ParamStore":
        store = cls()
        for key in arrays:
            if key.startswith("param/"):
                store.add(key[len("param/") :], np.array(arrays[key]))
        for name in store.params:
            store._m[name] = np.array(arrays[f"adam_m/{name}"])
            store._v[name] = np.array(arrays[f"adam_v/{name}"])
        store.step = int(np.asarray(arrays["step"])[0])
        return store


def adam_step(store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Standard adaptive-moment update; gradients are zeroed afterward."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grads()
    if __debug__:
        store.check_finite()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_affine(store: ParamStore, prefix: str, n_in: int, n_out: int, rng) -> None:
    store.add(f"{prefix}.W", glorot(rng, n_in, n_out, (n_in, n_out)))
    store.add(f"{prefix}.b", np.zeros(n_out))


def affine(store: ParamStore, tape, prefix: str, x) -> Var:
    return matmul(as_var(x), store.var(tape, f"{prefix}.W")) + store.var(tape, f"{prefix}.b")


def init_ff(store: ParamStore, prefix: str, sizes, rng) -> None:
    """Affine+tanh stack; ``sizes`` lists layer widths, final layer affine."""
    for i in range(len(sizes) - 1):
        init_affine(store, f"{prefix}.{i}", sizes[i], sizes[i + 1], rng)


def ff_layer_count(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in store.params:
        n += 1
    return n

def ff_forward(store: ParamStore, tape, prefix: str, x) -> Var:
    n = ff_layer_count(store, prefix)
    if n == 0:
        raise KeyError(f"no feed-forward layers under prefix {prefix}")
    h = as_var(x)
    for i in range(n):
        h = affine(store, tape, f"{prefix}.{i}", h)
        if i < n - 1:
            h = tanh(h)
    return h


def init_gru(store: ParamStore, prefix: str, n_in: int, n_hid: int, rng) -> None:
    for gate in ("z", "r", "n"):
        store.add(f"{prefix}.W{gate}", glorot(rng, n_in, n_hid, (n_in, n_hid)))
        store.add(f"{prefix}.U{gate}", glorot(rng, n_hid, n_hid, (n_hid, n_hid)))
        store.add(f"{prefix}.b{gate}", np.zeros(n_hid))


def gru_cell(store: ParamStore, tape, prefix: str, x, h) -> Var:
    x, h = as_var(x), as_var(h)
    p = lambda s: store.var(tape, f"{prefix}.{s}")
    z = sigmoid(matmul(x, p("Wz")) + matmul(h, p("Uz")) + p("bz"))
    r = sigmoid(matmul(x, p("Wr")) + matmul(h, p("Ur")) + p("br"))
    n = tanh(matmul(x, p("Wn")) + matmul(r * h, p("Un")) + p("bn"))
    return (1.0 - z) * h + z * n


def gru_forward(store: ParamStore, tape, prefix: str, xs, h0=None):
    """Run the cell over a step sequence; returns (final state, all states)."""
    xs = list(xs)
    if not xs:
        raise ValueError("gru_forward needs at least one step")
    first = as_var(xs[0])
    n_hid = store.params[f"{prefix}.Uz"].shape[0]
    h = as_var(h0) if h0 is not None else Var(np.zeros((first.value.shape[0], n_hid)))
    states = []
    for x in xs:
        h = gru_cell(store, tape, prefix, x, h)
        states.append(h)
    return h, states
