"""Small float64 MLPs with hand-written backprop, Adam and EMA shadows."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


_TANH_C = np.sqrt(2.0 / np.pi)
_TANH_K = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error gate x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _gelu_tanh_core(x: np.ndarray) -> np.ndarray:
    t = x * x
    t *= _TANH_K
    t += 1.0
    t *= x
    t *= _TANH_C
    return np.tanh(t, out=t)


def gelu_tanh(x: np.ndarray) -> np.ndarray:
    """tanh form of the gate, 0.5 x (1 + tanh(c (x + k x^3))); |error| < 5e-4."""
    return _gelu_tanh_fwd(x)[0]


def gelu_tanh_grad(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    """Derivative of :func:`gelu_tanh`; ``t`` is the cached inner tanh."""
    if t is None:
        t = _gelu_tanh_core(x)
    d = x * x
    d *= 3.0 * _TANH_K
    d += 1.0
    d *= x
    d *= 1.0 - t * t
    d *= _TANH_C
    d += 1.0 + t
    d *= 0.5
    return d


def _gelu_tanh_fwd(x):
    t = _gelu_tanh_core(x)
    h = t + 1.0
    h *= x
    h *= 0.5
    return h, t


def _gelu_fwd(x):
    return gelu(x), None


def _gelu_bwd(x, aux):
    return gelu_grad(x)


# name -> (forward returning (h, aux), derivative given (z, aux))
ACTIVATIONS = {"gelu_tanh": (_gelu_tanh_fwd, gelu_tanh_grad), "gelu": (_gelu_fwd, _gelu_bwd)}
_ACT_CODES = {"gelu_tanh": 0, "gelu": 1}
_OUTPUTS = {None: 0, "tanh": 1}


class Mlp:
    """Affine layers with a GELU gate between them.

    ``widths`` lists every layer size including input and output, so
    ``Mlp([4, 64, 64, 2])`` has three affine maps. Weights are stored
    as ``(fan_in, fan_out)`` so ``y = x @ W + b`` on row batches. The
    output is linear unless ``output="tanh"``. ``activation`` picks the
    tanh-form gate (default, several times cheaper) or the exact erf one.
    """

    def __init__(self, widths, rng=None, output: str | None = None, params=None, activation: str = "gelu_tanh"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least input and output widths, got {widths}")
        if output not in _OUTPUTS:
            raise ValueError(f"unknown output activation {output!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.output = output
        self.activation = activation
        self._act, self._act_grad = ACTIVATIONS[activation]
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
            for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
                if self.params[2 * i].shape != (fi, fo) or self.params[2 * i + 1].shape != (fo,):
                    raise ValueError(f"layer {i} parameter shapes do not match widths {widths}")
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = []
        for fi, fo in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fi)
            self.params.append(rng.uniform(-bound, bound, size=(fi, fo)))
            self.params.append(rng.uniform(-bound, bound, size=fo))

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        return Mlp(self.widths, output=self.output, params=[p.copy() for p in self.params], activation=self.activation)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} does not match {self.widths[0]}")
        # cache holds the input of every affine map, then the pre-activations
        inputs, pre = [x], []
        h = x
        for i in range(self.num_layers):
            z = h @ self.params[2 * i]
            z += self.params[2 * i + 1]
            if i < self.num_layers - 1:
                h, aux = self._act(z)
                pre.append((z, aux))
                inputs.append(h)
            else:
                h = np.tanh(z) if self.output == "tanh" else z
        return h, (inputs, pre, h)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out: np.ndarray):
        """Gradients w.r.t. parameters and input, given dL/d(output)."""
        inputs, pre, out = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if self.output == "tanh":
            g = g * (1.0 - out * out)
        grads = [None] * len(self.params)
        for i in reversed(range(self.num_layers)):
            h_in = inputs[i]
            grads[2 * i] = h_in.reshape(-1, h_in.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            grads[2 * i + 1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                g = g * self._act_grad(*pre[i - 1])
        return grads, g


def squared_error(net: Mlp, x: np.ndarray, y: np.ndarray):
    """Mean over the batch of ||net(x) - y||^2 and its parameter gradient."""
    out, cache = net.forward(x)
    resid = out - y
    n = out.shape[0]
    loss = float(np.sum(resid * resid) / n)
    grads, _ = net.backward(cache, 2.0 * resid / n)
    return loss, grads


def finite_difference_check(loss_fn, params, probes: int, rng, h: float = 1e-5, floor: float = 1e-6):
    """Max relative error between ``loss_fn`` gradients and central differences.

    ``loss_fn()`` returns ``(loss, grads)`` evaluated at the current values
    of ``params`` (a list of arrays it closes over); entries are perturbed
    in place and restored. Relative error is |a - b| / max(|a|, |b|, floor).
    """
    _, grads = loss_fn()
    sizes = np.array([p.size for p in params])
    worst = 0.0
    for _ in range(probes):
        j = int(rng.choice(len(params), p=sizes / sizes.sum()))
        k = int(rng.integers(params[j].size))
        flat = params[j].reshape(-1)
        old = flat[k]
        flat[k] = old + h
        up = loss_fn()[0]
        flat[k] = old - h
        down = loss_fn()[0]
        flat[k] = old
        numeric = (up - down) / (2.0 * h)
        analytic = grads[j].reshape(-1)[k]
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
        worst = max(worst, rel)
    return worst


@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params, lr: float = 3e-4) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr)


def adam_update(params, grads, state: AdamState):
    """One bias-corrected Adam step, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class EmaPair:
    live: Mlp
    shadow: Mlp = field(default=None)
    eta: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1], got {self.eta}")
        if self.shadow is None:
            self.shadow = self.live.copy()
        if self.shadow.widths != self.live.widths:
            raise ValueError("shadow and live networks differ in shape")


def ema_update(pair: EmaPair) -> EmaPair:
    """shadow <- (1 - eta) shadow + eta live, in place."""
    for s, p in zip(pair.shadow.params, pair.live.params):
        s *= 1.0 - pair.eta
        s += pair.eta * p
    return pair


# Checkpoints ---------------------------------------------------------------

MAGIC = b"UHMLPNET"
VERSION = 1


def mlp_to_bytes(net: Mlp) -> bytes:
    """MAGIC, then u32 version, activation code, output code, layer count,
    widths..., then float64 values.

    All integers and floats are little-endian; each layer contributes its
    row-major ``(fan_in, fan_out)`` weight followed by its bias.
    """
    head = MAGIC + struct.pack("<IIII", VERSION, _ACT_CODES[net.activation], _OUTPUTS[net.output], len(net.widths))
    head += struct.pack(f"<{len(net.widths)}I", *net.widths)
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params)
    return head + body


def mlp_from_bytes(blob: bytes) -> tuple[Mlp, int]:
    """Decode one network; returns it with the number of bytes consumed."""
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("not an MLP checkpoint (bad magic)")
    off = len(MAGIC)
    version, act_code, out_code, count = struct.unpack_from("<IIII", blob, off)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 16
    widths = list(struct.unpack_from(f"<{count}I", blob, off))
    off += 4 * count
    params = []
    for fi, fo in zip(widths[:-1], widths[1:]):
        for shape in ((fi, fo), (fo,)):
            n = int(np.prod(shape))
            params.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy())
            off += 8 * n
    output = {v: k for k, v in _OUTPUTS.items()}[out_code]
    activation = {v: k for k, v in _ACT_CODES.items()}[act_code]
    return Mlp(widths, output=output, params=params, activation=activation), off
