"""Capsule network: conv -> primary capsules -> routed voxel capsules -> lengths.

There is no reconstruction decoder; the class capsule lengths are trained
directly with a categorical hinge or log-cosh loss and RMSProp.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from ._io import atomic_write
from .errors import FormatError, ShapeMismatch
from .pdb import N_CHANNELS
from .tensor import ConvSpec, Tape, Tensor

@dataclass(frozen=True)
class Hyperparameters:
    filters: int
    kernel_size: int
    primarycap_dim: int
    voxelcap_dim: int
    stride: int = 8
    routing_iterations: int = 3
    primary_maps: int = 8
    n_classes: int = 2
    conv_relu: bool = True

    def __post_init__(self):
        ints = (self.filters, self.kernel_size, self.primarycap_dim, self.voxelcap_dim,
                self.stride, self.routing_iterations, self.primary_maps, self.n_classes)
        if min(ints) < 1:
            raise ValueError(f"hyperparameters must be positive: {self}")


@dataclass(frozen=True)
class Preset:
    name: str
    mode: str
    loss: str
    hyperparameters: Hyperparameters


PRESETS = {
    p.name: p
    for p in (
        Preset("2d-kras-hras", "2d", "categorical_hinge", Hyperparameters(64, 9, 32, 64)),
        Preset("3d-kras-hras", "3d", "categorical_hinge", Hyperparameters(128, 7, 32, 64)),
        Preset("2d-psi-blast", "2d", "logcosh", Hyperparameters(512, 5, 16, 32)),
        Preset("3d-psi-blast", "3d", "logcosh", Hyperparameters(64, 5, 16, 32)),
    )
}


# -- capsule primitives ----------------------------------------------------


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = |s|^2 / (1 + |s|^2) * s / |s|, with squash(0) = 0."""
    s = T.as_tensor(s)
    x = s.data
    dt = x.dtype
    # scaled norm: neither squaring huge nor tiny components leaves range
    m = np.max(np.abs(x), axis=axis, keepdims=True)
    pos = m > 0
    safe_m = np.where(pos, m, 1).astype(dt)
    n = m * np.sqrt(np.sum((x / safe_m) ** 2, axis=axis, keepdims=True))
    safe = np.where(pos, n, 1).astype(dt)
    # n / (1 + n^2) written to avoid overflow of n^2
    g = np.where(pos, 1 / (safe + 1 / safe), 0).astype(dt)
    length = np.minimum(n * g, np.nextafter(dt.type(1), dt.type(0)))
    scale = np.where(pos, length / safe, 0).astype(dt)
    v = x * scale

    def backward(up):
        # dv/ds = g I + (g'(n) / n) s s^T, g'(n) = (1 - n^2) / (1 + n^2)^2
        # (1 - n^2) / (1 + n^2) = 1 - 2 n g and 1 / (n (1 + n^2)) = g / n^2
        dg = np.where(pos, (1 - 2 * safe * g) * g / safe / safe, 0).astype(dt)
        proj = np.sum(x * up, axis=axis, keepdims=True)
        return (scale * up + dg * x * proj,)

    return T.record(v, (s,), backward, "squash")


def dynamic_routing(u_hat: Tensor, iterations: int = 3, trace: list | None = None) -> Tensor:
    """Routing-by-agreement over predictions u_hat (n_primary, n_classes, dim).

    Coupling coefficients are computed on detached values and act as
    constants in the final weighted sum, so gradients flow only through the
    last iteration's sum and squash. If ``trace`` is a list, the coupling
    matrix of every iteration is appended to it.
    """
    u_hat = T.as_tensor(u_hat)
    if u_hat.ndim != 3:
        raise ShapeMismatch(f"predictions must be (n_primary, n_classes, dim), got {u_hat.shape}")
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u = u_hat.data
    b = np.zeros(u.shape[:2], dtype=u.dtype)
    for it in range(iterations):
        c = T.softmax(Tensor(b), axis=1).data
        if trace is not None:
            trace.append(c)
        if it == iterations - 1:
            break
        v = squash(Tensor(np.einsum("ij,ijd->jd", c, u))).data
        b = b + np.einsum("ijd,jd->ij", u, v)
    s = T.einsum("ij,ijd->jd", Tensor(c), u_hat)
    return squash(s)


# -- losses ----------------------------------------------------------------


def categorical_hinge_loss(lengths: Tensor, true_class: int) -> Tensor:
    """max(0, 1 + max_{k != true} lengths[k] - lengths[true])."""
    lengths = T.as_tensor(lengths)
    x = lengths.data
    if x.ndim != 1 or x.size < 2:
        raise ShapeMismatch("hinge loss needs a vector of at least 2 class scores")
    others = np.delete(np.arange(x.size), true_class)
    best = int(others[np.argmax(x[others])])
    margin = 1.0 + x[best] - x[true_class]
    value = np.maximum(0.0, margin)  # propagates NaN, unlike max()

    def backward(g):
        grad = np.zeros_like(x)
        if margin > 0:
            grad[best] += g
            grad[true_class] -= g
        return (grad,)

    return T.record(np.asarray(value, dtype=x.dtype), (lengths,), backward, "hinge")


def _logcosh(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def logcosh_loss(lengths: Tensor, target) -> Tensor:
    """sum_k log(cosh(lengths[k] - target[k])) for a one-hot target."""
    lengths = T.as_tensor(lengths)
    t = np.asarray(target, dtype=lengths.dtype)
    if t.shape != lengths.shape:
        raise ShapeMismatch(f"target {t.shape} vs lengths {lengths.shape}")
    d = lengths.data - t
    return T.record(
        np.asarray(_logcosh(d).sum()), (lengths,), lambda g: (g * np.tanh(d),), "logcosh"
    )


LOSSES = ("categorical_hinge", "logcosh")


def compute_loss(name: str, lengths: Tensor, label: int) -> Tensor:
    if name == "categorical_hinge":
        return categorical_hinge_loss(lengths, label)
    if name == "logcosh":
        return logcosh_loss(lengths, np.eye(lengths.shape[0])[label])
    raise ValueError(f"unknown loss {name!r}; expected one of {LOSSES}")


# -- optimizer -------------------------------------------------------------


@dataclass
class RMSProp:
    learning_rate: float = 0.001
    rho: float = 0.9
    epsilon: float = 1e-7
    decay: float = 0.0
    iterations: int = 0
    avg: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        lr = self.learning_rate / (1.0 + self.decay * self.iterations)
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, param {p.shape}")
            a = self.avg.get(name)
            if a is None:
                a = np.zeros_like(p.data)
            a = self.rho * a + (1.0 - self.rho) * g * g
            self.avg[name] = a
            p.data = p.data - lr * g / (np.sqrt(a) + self.epsilon)
        self.iterations += 1


# -- model -----------------------------------------------------------------


@dataclass(frozen=True)
class ActivationVectors:
    vectors: np.ndarray  # (n_classes, voxelcap_dim)
    lengths: np.ndarray  # (n_classes,)

    @property
    def predicted(self) -> int:
        # argmax returns the first maximum: ties go to the lower class index
        return int(np.argmax(self.lengths))


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class CapsNet:
    """Layer stack with its learned parameters.

    ``input_shape`` is (channels, *spatial) with 2 or 3 spatial dims; the
    number of primary capsules follows from it and the hyperparameters.
    """

    PARAM_NAMES = ("conv_w", "conv_b", "primary_w", "primary_b", "W")

    def __init__(
        self,
        hp: Hyperparameters,
        input_shape: Sequence[int],
        seed: int | None = 0,
        dtype=np.float64,
        mode: str | None = None,
        loss: str = "categorical_hinge",
        class_names: Sequence[str] | None = None,
    ):
        self.hp = hp
        self.input_shape = tuple(int(n) for n in input_shape)
        nd = len(self.input_shape) - 1
        if nd not in (2, 3):
            raise ShapeMismatch(f"input must have 2 or 3 spatial dims, got {self.input_shape}")
        self.mode = mode or f"{nd}d"
        self.loss = loss
        self.class_names = list(class_names or [f"class{k}" for k in range(hp.n_classes)])
        if len(self.class_names) != hp.n_classes:
            raise ValueError("class_names must have n_classes entries")
        self.dtype = np.dtype(dtype)

        c_in = self.input_shape[0]
        self.conv_spec = ConvSpec(hp.kernel_size, hp.stride, c_in, hp.filters)
        self.conv_shape = self.conv_spec.output_shape(self.input_shape[1:])
        # stride falls back to 1 when the feature map is narrower than it
        p_stride = hp.stride if min(self.conv_shape) >= hp.stride else 1
        self.primary_spec = ConvSpec(
            hp.kernel_size, p_stride, hp.filters, hp.primary_maps * hp.primarycap_dim
        )
        self.primary_shape = self.primary_spec.output_shape(self.conv_shape)
        self.num_primary = hp.primary_maps * int(np.prod(self.primary_shape))

        rng = np.random.default_rng(seed)
        k_vol = hp.kernel_size**nd
        P, D, J, N = hp.primarycap_dim, hp.voxelcap_dim, hp.n_classes, self.num_primary
        f2 = self.primary_spec.out_channels
        arrays = {
            "conv_w": _glorot(rng, self.conv_spec.weight_shape(nd), c_in * k_vol, hp.filters * k_vol, self.dtype),
            "conv_b": np.zeros(hp.filters, self.dtype),
            "primary_w": _glorot(rng, self.primary_spec.weight_shape(nd), hp.filters * k_vol, f2 * k_vol, self.dtype),
            "primary_b": np.zeros(f2, self.dtype),
            "W": _glorot(rng, (N, J, D, P), P, D, self.dtype),
        }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}

    # shapes --------------------------------------------------------------

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        hp = self.hp
        return {
            "input": self.input_shape,
            "conv": (hp.filters,) + self.conv_shape,
            "primary_conv": (self.primary_spec.out_channels,) + self.primary_shape,
            "primary_caps": (self.num_primary, hp.primarycap_dim),
            "predictions": (self.num_primary, hp.n_classes, hp.voxelcap_dim),
            "voxel_caps": (hp.n_classes, hp.voxelcap_dim),
            "lengths": (hp.n_classes,),
        }

    # forward -------------------------------------------------------------

    def _as_input(self, grid) -> Tensor:
        data = getattr(grid, "data", grid)
        if isinstance(data, Tensor):
            data = data.data
        data = np.asarray(data)
        if data.shape != self.input_shape:
            raise ShapeMismatch(f"model expects input {self.input_shape}, got {data.shape}")
        return Tensor(data.astype(self.dtype, copy=False))

    def forward(self, grid, trace: list | None = None) -> tuple[Tensor, Tensor]:
        """Return (voxel capsule vectors (J, D), lengths (J,)) as tape tensors."""
        p = self.params
        hp = self.hp
        x = self._as_input(grid)
        h = T.conv_forward(x, p["conv_w"], p["conv_b"], stride=self.conv_spec.stride)
        if hp.conv_relu:
            h = T.relu(h)
        h = T.conv_forward(h, p["primary_w"], p["primary_b"], stride=self.primary_spec.stride)
        # (maps*dim, *sp) -> (maps, *sp, dim) -> (num_primary, dim)
        nd = len(self.primary_shape)
        h = T.reshape(h, (hp.primary_maps, hp.primarycap_dim) + self.primary_shape)
        h = T.transpose(h, (0,) + tuple(range(2, nd + 2)) + (1,))
        u = squash(T.reshape(h, (self.num_primary, hp.primarycap_dim)))
        u_hat = T.einsum("ijdp,ip->ijd", p["W"], u)
        v = dynamic_routing(u_hat, hp.routing_iterations, trace=trace)
        return v, T.norm_along_axis(v, axis=1)

    def activations(self, grid) -> ActivationVectors:
        v, lengths = self.forward(grid)
        return ActivationVectors(v.data.copy(), lengths.data.copy())

    def loss_and_grads(self, grid, label: int, loss: str | None = None):
        for t in self.params.values():
            t.zero_grad()
        with Tape() as tape:
            _, lengths = self.forward(grid)
            value = compute_loss(loss or self.loss, lengths, label)
        tape.backward(value)
        grads = {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.params.items()
        }
        return float(value.data), grads

    # state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data = arr.astype(self.dtype)

    def header(self) -> dict:
        return {
            "hyperparameters": asdict(self.hp),
            "input_shape": list(self.input_shape),
            "mode": self.mode,
            "loss": self.loss,
            "optimizer": "rmsprop",
            "class_names": self.class_names,
            "dtype": self.dtype.name,
        }

    @classmethod
    def from_header(cls, header: dict) -> "CapsNet":
        hp = Hyperparameters(**header["hyperparameters"])
        return cls(
            hp,
            header["input_shape"],
            seed=0,
            dtype=np.dtype(header.get("dtype", "float64")),
            mode=header.get("mode"),
            loss=header.get("loss", "categorical_hinge"),
            class_names=header.get("class_names"),
        )


def build_model(preset_or_hp, input_shape=None, seed: int = 0, **kwargs) -> CapsNet:
    """Model for a preset name (default full-size input) or Hyperparameters."""
    if isinstance(preset_or_hp, str):
        preset = PRESETS[preset_or_hp]
        if input_shape is None:
            input_shape = default_input_shape(preset.mode)
        kwargs.setdefault("mode", preset.mode)
        kwargs.setdefault("loss", preset.loss)
        return CapsNet(preset.hyperparameters, input_shape, seed=seed, **kwargs)
    return CapsNet(preset_or_hp, input_shape, seed=seed, **kwargs)


def default_input_shape(mode: str) -> tuple[int, ...]:
    from .voxel import GRID_SIZE, PLANE_SIZE

    if mode == "2d":
        return (N_CHANNELS, PLANE_SIZE, PLANE_SIZE)
    if mode == "3d":
        return (N_CHANNELS, GRID_SIZE, GRID_SIZE, GRID_SIZE)
    raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")


# -- CWTS checkpoint format ------------------------------------------------
# magic "CWTS", u8 version, u32 header length + UTF-8 JSON header, u32 array
# count, then per array: u16 name length, name, u8 rank, u32 extents,
# float64 little-endian payload.

CWTS_MAGIC = b"CWTS"
CWTS_VERSION = 1


def cwts_bytes(arrays: dict[str, np.ndarray], header: dict | None = None) -> bytes:
    head = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode()
    out = [CWTS_MAGIC, struct.pack("<BI", CWTS_VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def parse_cwts(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != CWTS_MAGIC:
        raise FormatError("not a CWTS file (bad magic)")
    try:
        version, hlen = struct.unpack_from("<BI", buf, 4)
        if version != CWTS_VERSION:
            raise FormatError(f"unsupported CWTS version {version}")
        pos = 9
        header = json.loads(buf[pos : pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) * 8
            if pos + n > len(buf):
                raise FormatError(f"truncated payload for {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=n // 8, offset=pos).reshape(shape).copy()
            pos += n
    except struct.error as exc:
        raise FormatError(f"truncated CWTS file: {exc}") from None
    if pos != len(buf):
        raise FormatError("trailing bytes after CWTS arrays")
    return header, arrays


def save_model(path, model: CapsNet, extra: dict | None = None) -> None:
    header = model.header()
    if extra:
        header.update(extra)
    atomic_write(path, cwts_bytes(model.state_dict(), header))


def load_model(path) -> CapsNet:
    with open(path, "rb") as fh:
        header, arrays = parse_cwts(fh.read())
    if "hyperparameters" not in header:
        raise FormatError("CWTS file has no model header")
    model = CapsNet.from_header(header)
    model.load_state_dict(arrays)
    return model

