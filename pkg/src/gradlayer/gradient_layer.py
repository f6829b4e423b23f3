"""Gradient layers ``z -> z + eta * grad_z f(upper(z))`` and stacks of them.

A stack stores the history of critic checkpoints plus the layer step size;
pushing a seed through it replays one layer per checkpoint, oldest first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .nn_core import Activation, DenseNet, NetSpec, ShapeError, grad_input, vjp_input

Upper = Union[None, Activation, DenseNet]


def critic_field(critic: DenseNet, z, upper: Upper = None) -> np.ndarray:
    """``grad_z critic(upper(z))`` per row; ``upper`` may be a squash or a net."""
    z = np.asarray(z, dtype=np.float64)
    if upper is None:
        return grad_input(critic, z)
    if isinstance(upper, Activation):
        if z.shape[-1] != critic.spec.input_dim:
            raise ShapeError(f"input has shape {z.shape}, expected (..., {critic.spec.input_dim})")
        return upper.deriv(z) * grad_input(critic, upper(z))
    if upper.spec.output_dim != critic.spec.input_dim:
        raise ShapeError("upper network output does not feed the critic")
    y = upper(z)
    return vjp_input(upper, z, grad_input(critic, y))


@dataclass(frozen=True, eq=False)
class GradientLayer:
    critic: DenseNet
    eta: float
    upper: Upper = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.critic.spec.output_dim != 1:
            raise ValueError("critic must have scalar output")

    @property
    def input_dim(self) -> int:
        if isinstance(self.upper, DenseNet):
            return self.upper.spec.input_dim
        return self.critic.spec.input_dim

    def field(self, z):
        return critic_field(self.critic, z, self.upper)

    def __call__(self, z):
        return apply(self, z)


def apply(layer: GradientLayer, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z + layer.eta * layer.field(z)


class GradientLayerStack:
    """Immutable ordered history ``tau_1 .. tau_T`` sharing one critic spec.

    ``squash`` is the fixed output map of the base generator (``tanh`` for the
    toy pipeline). Layers sit below it: each layer follows the gradient of
    ``critic(squash(z))``, and ``push`` returns the pre-squash point.
    """

    def __init__(self, eta: float, base_spec: NetSpec, checkpoints=(),
                 squash: Activation = Activation("identity")):
        if not eta > 0:
            raise ValueError(f"eta must be positive, got {eta}")
        if base_spec.output_dim != 1:
            raise ValueError("critic spec must have scalar output")
        self.eta = float(eta)
        self.base_spec = base_spec
        self.squash = squash
        cps = []
        for c in checkpoints:
            if c.spec != base_spec:
                raise ValueError("checkpoint spec differs from the stack's base spec")
            cps.append(DenseNet(c.spec, c.params))
        self._checkpoints = tuple(cps)

    @property
    def checkpoints(self) -> tuple:
        return self._checkpoints

    @property
    def dim(self) -> int:
        return self.base_spec.input_dim

    def __len__(self):
        return len(self._checkpoints)

    def _upper(self):
        return None if self.squash.kind == "identity" else self.squash

    def layer(self, k: int) -> GradientLayer:
        return GradientLayer(self._checkpoints[k], self.eta, self._upper())

    def append(self, critic: DenseNet) -> "GradientLayerStack":
        return append(self, critic)

    def push(self, z):
        return push(self, z)

    def output(self, z):
        """Squashed sample for seeds ``z``: what the critic and the user see."""
        return self.squash(push(self, z))

    def __eq__(self, other):
        if not isinstance(other, GradientLayerStack):
            return NotImplemented
        return (self.eta == other.eta and self.base_spec == other.base_spec
                and self.squash == other.squash
                and len(self) == len(other)
                and all(a == b for a, b in zip(self._checkpoints, other._checkpoints)))

    __hash__ = None

    def __repr__(self):
        return (f"GradientLayerStack(eta={self.eta}, dims={self.base_spec.layer_dims}, "
                f"squash={self.squash}, T={len(self)})")


def append(stack: GradientLayerStack, critic: DenseNet) -> GradientLayerStack:
    if critic.spec != stack.base_spec:
        raise ValueError("critic spec differs from the stack's base spec")
    return GradientLayerStack(stack.eta, stack.base_spec,
                              stack.checkpoints + (critic,), stack.squash)


def push(stack: GradientLayerStack, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != stack.dim:
        raise ShapeError(f"seed has shape {z.shape}, expected (..., {stack.dim})")
    upper = stack._upper()
    for c in stack.checkpoints:
        z = z + stack.eta * critic_field(c, z, upper)
    return z


# --- persistence -----------------------------------------------------------

MAGIC = b"GLSTK"
VERSION = 1
_ACT_TAGS = {"identity": 0, "relu": 1, "leaky_relu": 2, "tanh": 3, "softplus": 4}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}


class StackFormatError(ValueError):
    """The file is not a readable stack."""


class BadMagicError(StackFormatError):
    pass


class VersionMismatchError(StackFormatError):
    pass


class TruncatedStackError(StackFormatError):
    pass


def _pack_act(act: Activation) -> bytes:
    out = struct.pack("<B", _ACT_TAGS[act.kind])
    if act.kind == "leaky_relu":
        out += struct.pack("<d", act.slope)
    return out


def stack_to_bytes(stack: GradientLayerStack) -> bytes:
    spec = stack.base_spec
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<d", stack.eta),
             _pack_act(spec.hidden_activation), _pack_act(spec.output_activation),
             _pack_act(stack.squash),
             struct.pack("<I", len(spec.layer_dims)),
             struct.pack(f"<{len(spec.layer_dims)}I", *spec.layer_dims),
             struct.pack("<I", len(stack))]
    for c in stack.checkpoints:
        parts.append(c.params.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise TruncatedStackError(f"payload ends at byte {len(self.buf)}, "
                                      f"needed {self.pos + size}")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def act(self) -> Activation:
        (tag,) = self.take("<B")
        if tag not in _TAG_ACTS:
            raise StackFormatError(f"unknown activation tag {tag}")
        kind = _TAG_ACTS[tag]
        if kind == "leaky_relu":
            (slope,) = self.take("<d")
            return Activation(kind, slope)
        return Activation(kind)


def stack_from_bytes(buf: bytes) -> GradientLayerStack:
    if buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a gradient-layer stack file (bad magic)")
    r = _Reader(buf)
    r.pos = len(MAGIC)
    (version,) = r.take("<I")
    if version != VERSION:
        raise VersionMismatchError(f"stack file version {version}, expected {VERSION}")
    (eta,) = r.take("<d")
    hidden, out, squash = r.act(), r.act(), r.act()
    (n_dims,) = r.take("<I")
    dims = r.take(f"<{n_dims}I")
    spec = NetSpec(dims, hidden, out)
    (count,) = r.take("<I")
    n = spec.n_params
    cps = []
    for _ in range(count):
        vals = r.take(f"<{n}d")
        cps.append(DenseNet(spec, np.array(vals, dtype=np.float64)))
    if r.pos != len(buf):
        raise StackFormatError(f"{len(buf) - r.pos} trailing bytes after payload")
    return GradientLayerStack(eta, spec, cps, squash)


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def save(stack: GradientLayerStack, path, meta: dict | None = None) -> None:
    """Write the binary stack and, if ``meta`` is given, its key=value sidecar."""
    path = Path(path)
    path.write_bytes(stack_to_bytes(stack))
    if meta is not None:
        write_meta(meta_path(path), meta)


def load(path) -> GradientLayerStack:
    return stack_from_bytes(Path(path).read_bytes())


def write_meta(path, meta: dict) -> None:
    lines = [f"{k}={meta[k]}" for k in meta]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# --- injectivity -----------------------------------------------------------

@dataclass
class InjectivityReport:
    ratios: np.ndarray
    min_ratio: float
    lipschitz: float  # sampled difference-quotient estimate of the field


def _pair_arrays(pairs):
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 3 or pairs.shape[1] != 2:
        raise ValueError("pairs must have shape (n, 2, dim)")
    Z, Zp = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(Z - Zp, axis=1)
    if np.any(dist == 0):
        raise ValueError(f"zero-distance pair at index {int(np.flatnonzero(dist == 0)[0])}")
    return Z, Zp, dist


def injectivity_margin(layer: GradientLayer, pairs) -> InjectivityReport:
    """Ratios ``|G(z) - G(z')| / |z - z'|`` over the given pairs."""
    Z, Zp, dist = _pair_arrays(pairs)
    ratios = np.linalg.norm(apply(layer, Z) - apply(layer, Zp), axis=1) / dist
    field_q = np.linalg.norm(layer.field(Z) - layer.field(Zp), axis=1) / dist
    return InjectivityReport(ratios, float(ratios.min()), float(field_q.max()))
