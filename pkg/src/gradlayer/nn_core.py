"""Dense feed-forward networks over a flat float64 parameter vector.

Everything here is batched: inputs of shape ``(d,)`` are treated as a batch of
one and results are squeezed back. Parameter gradients are *summed* over the
batch; callers that want a mean pass an upstream already scaled by ``1/b``.

Layout of the flat vector, layer by layer: the weight matrix of shape
``(dims[l+1], dims[l])`` in row-major order, followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATION_KINDS = ("identity", "relu", "leaky_relu", "tanh", "softplus")


class ShapeError(ValueError):
    """Input or upstream array does not match the network dimensions."""


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"
    slope: float = 0.0

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError("leaky_relu slope must lie in (0, 1)")

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """Parse ``tanh``, ``leaky_relu`` or ``leaky_relu(0.2)``."""
        text = text.strip()
        if text.startswith("leaky_relu"):
            rest = text[len("leaky_relu"):].strip()
            slope = float(rest.strip("()")) if rest else 0.2
            return cls("leaky_relu", slope)
        return cls(text)

    def __str__(self):
        if self.kind == "leaky_relu":
            return f"leaky_relu({self.slope!r})"
        return self.kind

    def __call__(self, a):
        k = self.kind
        if k == "identity":
            return a
        if k == "relu":
            return np.maximum(a, 0.0)
        if k == "leaky_relu":
            return np.maximum(a, self.slope * a)  # slope < 1
        if k == "tanh":
            return np.tanh(a)
        return np.logaddexp(0.0, a)

    def deriv(self, a):
        k = self.kind
        if k == "identity":
            return np.ones_like(a)
        if k == "relu":
            return (a > 0).astype(a.dtype)
        if k == "leaky_relu":
            return np.where(a > 0, 1.0, self.slope)
        if k == "tanh":
            t = np.tanh(a)
            return 1.0 - t * t
        return _sigmoid(a)

    def deriv2(self, a):
        # piecewise-linear kinds have zero curvature almost everywhere
        k = self.kind
        if k == "tanh":
            t = np.tanh(a)
            return -2.0 * t * (1.0 - t * t)
        if k == "softplus":
            s = _sigmoid(a)
            return s * (1.0 - s)
        return np.zeros_like(a)

    @property
    def smooth(self) -> bool:
        return self.kind in ("identity", "tanh", "softplus")


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass(frozen=True)
class NetSpec:
    layer_dims: tuple[int, ...]
    hidden_activation: Activation = Activation("leaky_relu", 0.2)
    output_activation: Activation = Activation("identity")

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"bad layer_dims {self.layer_dims!r}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))

    def activation(self, layer: int) -> Activation:
        last = len(self.layer_dims) - 2
        return self.output_activation if layer == last else self.hidden_activation


@dataclass(frozen=True, eq=False)
class DenseNet:
    """A network value: architecture plus a read-only flat parameter vector."""

    spec: NetSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64, copy=True).ravel()
        if p.size != self.spec.n_params:
            raise ShapeError(f"expected {self.spec.n_params} parameters, got {p.size}")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def with_params(self, params) -> "DenseNet":
        return DenseNet(self.spec, params)

    def layers(self):
        """Yield ``(W, b)`` views into the flat vector."""
        dims = self.spec.layer_dims
        off = 0
        for i in range(len(dims) - 1):
            n_in, n_out = dims[i], dims[i + 1]
            W = self.params[off:off + n_in * n_out].reshape(n_out, n_in)
            off += n_in * n_out
            b = self.params[off:off + n_out]
            off += n_out
            yield W, b

    def __call__(self, x):
        return forward(self, x)

    def __eq__(self, other):
        return (isinstance(other, DenseNet) and self.spec == other.spec
                and np.array_equal(self.params, other.params))

    __hash__ = None


def init_net(spec: NetSpec, rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    dims = spec.layer_dims
    for i in range(len(dims) - 1):
        n_in, n_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return DenseNet(spec, np.concatenate(chunks))


def flat_params(weights_and_biases: Sequence[tuple]) -> np.ndarray:
    """Pack ``[(W, b), ...]`` into the flat layout."""
    out = []
    for W, b in weights_and_biases:
        out.append(np.asarray(W, dtype=np.float64).ravel())
        out.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(out)


def _as_batch(x, dim: int, what: str = "input"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(f"{what} has shape {x.shape}, expected (..., {dim})")
    return X, single


class _Trace:
    """Pre-activations and activations of one batched forward pass."""

    __slots__ = ("net", "weights", "pre", "post")

    def __init__(self, net: DenseNet, X: np.ndarray):
        self.net = net
        self.weights = list(net.layers())
        self.pre = []
        self.post = [X]
        h = X
        for i, (W, b) in enumerate(self.weights):
            a = h @ W.T + b
            h = net.spec.activation(i)(a)
            self.pre.append(a)
            self.post.append(h)

    @property
    def output(self):
        return self.post[-1]

    def backprop(self, U, want_params=True, want_input=False):
        """Reverse pass of ``sum_i U_i . net(x_i)``."""
        spec = self.net.spec
        n = len(self.weights)
        grads = [None] * (2 * n)
        delta = U * spec.activation(n - 1).deriv(self.pre[-1])
        g_in = None
        for i in range(n - 1, -1, -1):
            W, _ = self.weights[i]
            if want_params:
                grads[2 * i] = (delta.T @ self.post[i]).ravel()
                grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ W) * spec.activation(i - 1).deriv(self.pre[i - 1])
            elif want_input:
                g_in = delta @ W
        gp = np.concatenate(grads) if want_params else None
        return gp, g_in


def forward(net: DenseNet, x) -> np.ndarray:
    X, single = _as_batch(x, net.spec.input_dim)
    h = X
    for i, (W, b) in enumerate(net.layers()):
        h = net.spec.activation(i)(h @ W.T + b)
    return h[0] if single else h


def backward_params(net: DenseNet, x, upstream) -> np.ndarray:
    """Gradient w.r.t. params of ``sum_i upstream_i . net(x_i)``."""
    X, single = _as_batch(x, net.spec.input_dim)
    U = np.asarray(upstream, dtype=np.float64)
    U = U[None, :] if U.ndim == 1 else U
    if U.shape != (X.shape[0], net.spec.output_dim):
        raise ShapeError(f"upstream has shape {np.shape(upstream)}, "
                         f"expected ({X.shape[0]}, {net.spec.output_dim})")
    gp, _ = _Trace(net, X).backprop(U)
    return gp


def value_and_grad_params(net: DenseNet, x, upstream):
    """``(net(x), backward_params(net, x, upstream))`` from a single forward pass."""
    X, _ = _as_batch(x, net.spec.input_dim)
    U = np.asarray(upstream, dtype=np.float64)
    if U.shape != (X.shape[0], net.spec.output_dim):
        raise ShapeError(f"upstream has shape {U.shape}")
    tr = _Trace(net, X)
    gp, _ = tr.backprop(U)
    return tr.output, gp


def vjp_input(net: DenseNet, x, upstream) -> np.ndarray:
    """Per-sample ``J_x net(x_i)^T upstream_i``."""
    X, single = _as_batch(x, net.spec.input_dim)
    U = np.asarray(upstream, dtype=np.float64)
    U = U[None, :] if U.ndim == 1 else U
    if U.shape != (X.shape[0], net.spec.output_dim):
        raise ShapeError(f"upstream has shape {np.shape(upstream)}")
    _, g = _Trace(net, X).backprop(U, want_params=False, want_input=True)
    return g[0] if single else g


def grad_input(net: DenseNet, x) -> np.ndarray:
    """Input gradient of a scalar-output network, per sample."""
    if net.spec.output_dim != 1:
        raise ValueError("grad_input needs a scalar-output network")
    X, single = _as_batch(x, net.spec.input_dim)
    _, g = _Trace(net, X).backprop(np.ones((X.shape[0], 1)), want_params=False,
                                   want_input=True)
    return g[0] if single else g


class Composite:
    """``outer(inner(x))`` with per-part parameter gradients."""

    def __init__(self, outer: DenseNet, inner: DenseNet):
        if inner.spec.output_dim != outer.spec.input_dim:
            raise ShapeError(f"inner output dim {inner.spec.output_dim} != "
                             f"outer input dim {outer.spec.input_dim}")
        self.outer = outer
        self.inner = inner

    @property
    def input_dim(self):
        return self.inner.spec.input_dim

    @property
    def output_dim(self):
        return self.outer.spec.output_dim

    def forward(self, x):
        return forward(self.outer, forward(self.inner, x))

    __call__ = forward

    def grad_input(self, x):
        if self.output_dim != 1:
            raise ValueError("grad_input needs a scalar-output composite")
        y = forward(self.inner, x)
        return vjp_input(self.inner, x, grad_input(self.outer, y))

    def backward_params(self, x, upstream):
        """Return ``(grad_outer, grad_inner)`` of ``sum_i upstream_i . f(g(x_i))``."""
        X, _ = _as_batch(x, self.input_dim)
        U = np.asarray(upstream, dtype=np.float64)
        U = U[None, :] if U.ndim == 1 else U
        inner_trace = _Trace(self.inner, X)
        outer_trace = _Trace(self.outer, inner_trace.output)
        g_outer, g_mid = outer_trace.backprop(U, want_input=True)
        g_inner, _ = inner_trace.backprop(g_mid)
        return g_outer, g_inner


def compose(outer: DenseNet, inner: DenseNet) -> Composite:
    return Composite(outer, inner)


PENALTY_KINDS = ("two_sided", "one_sided")


@dataclass
class PenaltyResult:
    penalty: float
    grad_params: np.ndarray
    # samples where the input gradient vanished under the two-sided penalty
    degenerate: int = 0

    def __iter__(self):
        return iter((self.penalty, self.grad_params))


def penalty_and_grad(net: DenseNet, x, kind: str = "two_sided") -> PenaltyResult:
    """Mean gradient penalty over the batch and its parameter gradient.

    The parameter gradient is exact double backprop: with ``u_i`` the
    derivative of the penalty w.r.t. the input gradient ``g_i``, we reverse
    through the forward tangent pass that computes ``u_i . g_i``, which needs
    the activations' second derivatives.
    """
    if kind not in PENALTY_KINDS:
        raise ValueError(f"unknown penalty kind {kind!r}")
    if net.spec.output_dim != 1:
        raise ValueError("penalty needs a scalar-output network")
    X, _ = _as_batch(x, net.spec.input_dim)
    B = X.shape[0]
    spec = net.spec
    tr = _Trace(net, X)
    _, G = tr.backprop(np.ones((B, 1)), want_params=False, want_input=True)
    norms = np.sqrt(np.einsum("ij,ij->i", G, G))
    excess = norms - 1.0
    if kind == "one_sided":
        excess = np.maximum(excess, 0.0)
    penalty = float(np.mean(excess * excess))

    degenerate = 0
    scale = np.zeros(B)
    nz = norms > 0
    scale[nz] = 2.0 * excess[nz] / norms[nz] / B
    if kind == "two_sided":
        degenerate = int(np.count_nonzero(~nz))
    Udir = G * scale[:, None]

    n = len(tr.weights)
    # forward tangents along Udir
    dpre = []
    dpost = [Udir]
    for i, (W, _) in enumerate(tr.weights):
        da = dpost[-1] @ W.T
        dpre.append(da)
        dpost.append(spec.activation(i).deriv(tr.pre[i]) * da)

    grads = [None] * (2 * n)
    bar_dh = np.ones((B, 1))
    bar_h = np.zeros((B, 1))
    for i in range(n - 1, -1, -1):
        W, _ = tr.weights[i]
        act = spec.activation(i)
        a = tr.pre[i]
        s1 = act.deriv(a)
        bar_da = s1 * bar_dh
        bar_a = act.deriv2(a) * dpre[i] * bar_dh + s1 * bar_h
        grads[2 * i] = (bar_da.T @ dpost[i] + bar_a.T @ tr.post[i]).ravel()
        grads[2 * i + 1] = bar_a.sum(axis=0)
        if i > 0:
            bar_dh = bar_da @ W
            bar_h = bar_a @ W
    return PenaltyResult(penalty, np.concatenate(grads), degenerate)
