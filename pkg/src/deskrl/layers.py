"""Network building blocks on top of the tape engine.

Linear layers, BatchNorm with running statistics, per-row weight
normalization, Adam with an optional post-step projection hook, and a
small MLP container described by ``MLPSpec``.

Parameter checkpoints use a flat named-record format (ASCII headers,
raw little-endian float64 payloads) so two checkpoints can be inspected
and diffed with standard tools; see ``save_params``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor

EPS_NORM = 1e-8  # clamp for zero rows in wn_project

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}

_DTYPES = {"float32": np.float32, "float64": np.float64}


class LinearLayer:
    """Affine map ``x @ W.T + b`` with optional row-wise weight normalization.

    When ``wn_enabled`` the rows of W are projected to unit L2 norm at
    init and after every optimizer step, so the layer only ever
    contributes direction, never scale.
    """

    def __init__(self, in_dim: int, out_dim: int, rng, wn_enabled: bool = False,
                 dtype=np.float64):
        if in_dim < 1 or out_dim < 1:
            raise ContractError(f"linear dims must be positive, got {in_dim}x{out_dim}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.wn_enabled = bool(wn_enabled)
        self._dtype = np.dtype(dtype)
        self.W = Tensor(np.zeros((out_dim, in_dim), dtype=self._dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=self._dtype), requires_grad=True)
        self.init_parameters(rng)

    def init_parameters(self, rng) -> None:
        """Draw fresh weights in place (uniform fan-in scaling, W then b)."""
        bound = 1.0 / math.sqrt(self.in_dim)
        self.W.data[...] = rng.uniform(-bound, bound, size=self.W.shape)
        self.b.data[...] = rng.uniform(-bound, bound, size=self.b.shape)
        self.W.grad[...] = 0.0
        self.b.grad[...] = 0.0
        if self.wn_enabled:
            wn_project(self)

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, ad.transpose(self.W)) + self.b

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "W", self.W), (prefix + "b", self.b)]


def wn_project(layer: LinearLayer) -> None:
    """Project every row of ``layer.W`` onto the unit L2 sphere, in place.

    Bias and any optimizer moments are untouched; zero rows stay zero
    via the EPS_NORM clamp.
    """
    if not layer.wn_enabled:
        raise ContractError("wn_project on a layer without wn_enabled")
    W = layer.W.data
    norms = np.sqrt(np.sum(W * W, axis=1, keepdims=True))
    np.divide(W, np.maximum(norms, EPS_NORM), out=W)


def effective_lr(layer: LinearLayer, eta: float) -> float:
    """eta / ||W||_F^2, the step size actually felt by a scale-invariant layer."""
    n2 = float(np.sum(np.square(layer.W.data.astype(np.float64, copy=False))))
    if n2 == 0.0:
        return math.inf
    return float(eta) / n2


class BatchNormLayer:
    """BatchNorm over axis 0 with running statistics.

    Train mode normalizes by the current batch mean and biased variance
    and updates the running stats as
    ``running <- (1 - momentum) * running + momentum * batch``.
    Eval mode is a fixed affine map built from the running stats.
    """

    def __init__(self, dim: int, momentum: float = 0.01, eps: float = 1e-5,
                 dtype=np.float64):
        if not 0.0 < momentum <= 1.0:
            raise ContractError(f"momentum must be in (0, 1], got {momentum}")
        if eps <= 0.0:
            raise ContractError(f"eps must be positive, got {eps}")
        self._dtype = np.dtype(dtype)
        self.gamma = Tensor(np.ones(dim, dtype=self._dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=self._dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=self._dtype)
        self.running_var = np.ones(dim, dtype=self._dtype)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def reset(self) -> None:
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.gamma.grad[...] = 0.0
        self.beta.grad[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x: Tensor, mode: str, update_running: bool = True) -> Tensor:
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        if not np.all(np.isfinite(x.data)):
            raise NumericError("non-finite input to batchnorm_forward")
        if mode == "train":
            if x.shape[0] < 2:
                raise ContractError(f"train-mode batchnorm needs B >= 2, got B={x.shape[0]}")
            mu = ad.tmean(x, axis=0)
            var = ad.tvar(x, axis=0)  # biased; the gamma rescale absorbs the correction
            if update_running:
                m = self.momentum
                self.running_mean[...] = (1.0 - m) * self.running_mean + m * mu.data
                self.running_var[...] = (1.0 - m) * self.running_var + m * var.data
        else:
            # copies so a later stat update cannot corrupt a pending backward
            mu = Tensor(self.running_mean.copy())
            var = Tensor(self.running_var.copy())
        xhat = (x - mu) / ad.sqrt(var + self.eps)
        return xhat * self.gamma + self.beta

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]


@dataclass(frozen=True)
class MLPSpec:
    """Shape of an MLP: widths (input, hidden..., output) plus layer options.

    ``batchnorm`` is a single flag applied to every hidden layer or a
    per-hidden-layer sequence. The final linear layer never gets BN after
    it and is exempt from weight normalization; output scaling is its job.
    """

    layer_widths: tuple
    activation: str = "relu"
    batchnorm: object = False
    wn: bool = False
    bn_momentum: float = 0.01
    bn_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ContractError(f"layer_widths needs >= 2 positive entries, got {widths}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.dtype not in _DTYPES:
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.bn_flags()  # validates length

    def bn_flags(self) -> tuple:
        n_hidden = len(self.layer_widths) - 2
        if isinstance(self.batchnorm, bool):
            return (self.batchnorm,) * n_hidden
        flags = tuple(bool(f) for f in self.batchnorm)
        if len(flags) != n_hidden:
            raise ContractError(
                f"batchnorm flags length {len(flags)} != hidden layer count {n_hidden}")
        return flags

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


class MLP:
    """Linear -> (BatchNorm) -> activation stack with a raw final linear layer."""

    def __init__(self, spec: MLPSpec, rng):
        self.spec = spec
        widths = spec.layer_widths
        flags = spec.bn_flags()
        self.linears = []
        self.bns = []
        for i in range(len(widths) - 2):
            self.linears.append(LinearLayer(widths[i], widths[i + 1], rng,
                                            wn_enabled=spec.wn, dtype=spec.np_dtype))
            if flags[i]:
                self.bns.append(BatchNormLayer(widths[i + 1], spec.bn_momentum,
                                               spec.bn_eps, dtype=spec.np_dtype))
            else:
                self.bns.append(None)
        self.linears.append(LinearLayer(widths[-2], widths[-1], rng,
                                        wn_enabled=False, dtype=spec.np_dtype))
        self._act = _ACTIVATIONS[spec.activation]

    def forward(self, x: Tensor, mode: str = "train", update_running: bool = True) -> Tensor:
        if x.shape[-1] != self.spec.layer_widths[0]:
            raise ContractError(
                f"input width {x.shape[-1]} != spec width {self.spec.layer_widths[0]}")
        for lin, bn in zip(self.linears[:-1], self.bns):
            x = lin.forward(x)
            if bn is not None:
                x = bn.forward(x, mode, update_running=update_running)
            x = self._act(x)
        return self.linears[-1].forward(x)

    def named_parameters(self, prefix: str = ""):
        out = []
        for i, lin in enumerate(self.linears):
            out.extend(lin.named_parameters(f"{prefix}linear{i}."))
        for i, bn in enumerate(self.bns):
            if bn is not None:
                out.extend(bn.named_parameters(f"{prefix}bn{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = ""):
        """Parameters plus BN running stats, for checkpoints."""
        out = list(self.named_parameters(prefix))
        for i, bn in enumerate(self.bns):
            if bn is not None:
                out.append((f"{prefix}bn{i}.running_mean", bn.running_mean))
                out.append((f"{prefix}bn{i}.running_var", bn.running_var))
        return out

    def wn_layers(self):
        return [lin for lin in self.linears[:-1] if lin.wn_enabled]

    def reset_parameters(self, rng) -> None:
        """Re-draw all weights in the construction order; BN state back to identity."""
        for lin in self.linears:
            lin.init_parameters(rng)
        for bn in self.bns:
            if bn is not None:
                bn.reset()


class Adam:
    """Adam with bias correction and an optional weight-norm projection pass.

    ``named_params`` is an ordered list of (name, Tensor); names appear in
    numeric-error messages so a blown-up gradient can be traced to its
    parameter. Layers listed in ``wn_layers`` are projected immediately
    after every step.
    """

    def __init__(self, named_params, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, wn_layers=()):
        self.params = [(str(n), p) for n, p in named_params]
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names passed to Adam")
        for n, p in self.params:
            if not p.requires_grad:
                raise ContractError(f"parameter '{n}' does not require gradients")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.wn_layers = list(wn_layers)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad[...] = 0.0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}' at step {self.t}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        for layer in self.wn_layers:
            wn_project(layer)


PARAMS_MAGIC = b"deskrl-params v1\n"


def save_params(path: str, named_arrays) -> None:
    """Write (name, array) records to ``path`` atomically.

    Layout: the magic line, then for each record a ``tensor <name>`` line,
    a ``shape <d0> <d1> ...`` line (no dims for scalars), the row-major
    values as raw little-endian float64 bytes, and a terminating newline.
    """
    blob = bytearray(PARAMS_MAGIC)
    for name, arr in named_arrays:
        name = str(name)
        if "\n" in name:
            raise ContractError(f"parameter name may not contain newline: {name!r}")
        if isinstance(arr, Tensor):
            arr = arr.data
        a = np.asarray(arr, dtype="<f8")  # tobytes below handles layout; keep 0-d shapes
        blob += b"tensor " + name.encode("utf-8") + b"\n"
        blob += ("shape " + " ".join(str(d) for d in a.shape)).rstrip().encode("ascii") + b"\n"
        blob += a.tobytes(order="C") + b"\n"
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_params(path: str) -> dict:
    """Read a checkpoint back into an ordered {name: float64 array} dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(PARAMS_MAGIC):
        raise ContractError(f"{path}: not a parameter checkpoint (bad magic)")
    out = {}
    pos = len(PARAMS_MAGIC)
    while pos < len(raw):
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        if not line.startswith("tensor "):
            raise ContractError(f"{path}: expected 'tensor <name>' record, got {line!r}")
        name = line[len("tensor "):]
        if name in out:
            raise ContractError(f"{path}: duplicate tensor name {name!r}")
        nl = raw.index(b"\n", pos)
        parts = raw[pos:nl].decode("ascii").split()
        pos = nl + 1
        if not parts or parts[0] != "shape":
            raise ContractError(f"{path}: expected 'shape ...' record for {name!r}")
        dims = tuple(int(d) for d in parts[1:])
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * 8
        if pos + nbytes + 1 > len(raw):
            raise ContractError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(dims).copy()
        pos += nbytes
        if raw[pos:pos + 1] != b"\n":
            raise ContractError(f"{path}: missing record terminator for {name!r}")
        pos += 1
    return out
