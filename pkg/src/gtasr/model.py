"""Conditional predictor network, its parameter-set triplet and the checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .tensor import Tensor

MAGIC = b"GTCK"
VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    width: int = 16
    mid_depth: int = 3
    in_channels: int = 1
    time_planes: int = 1


def _layer_specs(cfg: ArchConfig) -> list[tuple[str, int, int]]:
    w, c = cfg.width, cfg.in_channels
    specs = [
        ("enc0", 2 * c + cfg.time_planes, w),
        ("enc1", w, w),
        ("down", w, 2 * w),
    ]
    specs += [(f"mid{i}", 2 * w, 2 * w) for i in range(cfg.mid_depth)]
    specs += [("up", 2 * w, w), ("dec0", 2 * w, w), ("out", w, c)]
    return specs


class PredictorNet:
    """Small encoder-decoder predicting the clean image from ``(x_t, y0, t)``.

    The input is the channel concatenation of ``x_t``, ``y0`` and a constant
    ``t/T`` plane. The body is two resolution levels with one skip connection;
    the output is added to ``y0``. At ``t = 0`` the map is the identity on
    ``x_t``, which pins the trajectory origin.
    """

    def __init__(self, arch: ArchConfig | None = None, seed: int = 0, T: int | None = None):
        self.arch = arch or ArchConfig()
        self.T = T
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for name, cin, cout in _layer_specs(self.arch):
            fan_in = cin * 9
            std = np.sqrt(2.0 / fan_in)
            if name == "out":
                std *= 0.1
            k = rng.standard_normal((cout, cin, 3, 3)) * std
            self.params[f"{name}.weight"] = Tensor(k.astype(np.float32), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        y = tt.conv2d(x, self.params[f"{name}.weight"], stride=stride, padding=1)
        return tt.add_bias(y, self.params[f"{name}.bias"])

    def __call__(self, x_t, y0, t: int, T: int | None = None):
        return predict(self, x_t, y0, t, T)

    def body(self, x_t: Tensor, y0: Tensor, t_frac: float) -> Tensor:
        n, c, h, w = x_t.shape
        plane = Tensor(np.full((n, self.arch.time_planes, h, w), t_frac))
        h0 = tt.concat([x_t, y0, plane], axis=1)
        h0 = tt.silu(self._conv("enc0", h0))
        skip = tt.silu(self._conv("enc1", h0))
        z = tt.silu(self._conv("down", skip, stride=2))
        for i in range(self.arch.mid_depth):
            z = tt.silu(self._conv(f"mid{i}", z))
        u = tt.upsample_nearest(tt.silu(self._conv("up", z)), 2)
        d = tt.silu(self._conv("dec0", tt.concat([u, skip], axis=1)))
        return tt.add(self._conv("out", d), y0)


def predict(net: PredictorNet, x_t, y0, t: int, T: int | None = None) -> Tensor:
    """``f(x_t, y0, t)``. ``T`` defaults to the value bound on the net (``net.T``)."""
    x_t, y0 = tt.as_tensor(x_t), tt.as_tensor(y0)
    if x_t.shape != y0.shape:
        raise ValueError(f"x_t {x_t.shape} and y0 {y0.shape} differ in shape")
    if x_t.data.ndim != 4:
        raise ValueError("expected NCHW input")
    if T is None:
        T = getattr(net, "T", None)
        if T is None:
            raise ValueError("T not given")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    h, w = x_t.shape[2:]
    if h % 2 or w % 2:
        raise ValueError("spatial extent must be even")
    if t == 0:
        return x_t
    return net.body(x_t, y0, t / T)


class NetworkTriplet:
    """Online parameters plus two frozen copies: the per-step reference and the periodically synced target."""

    def __init__(self, online: PredictorNet):
        self.online = online
        self.reference = PredictorNet(online.arch, T=online.T)
        self.target = PredictorNet(online.arch, T=online.T)
        self.reference.set_trainable(False)
        self.target.set_trainable(False)
        self.copy_reference()
        self.sync_target()

    def copy_reference(self) -> None:
        self.reference.load_state_dict(self.online.state_dict())

    def sync_target(self) -> None:
        self.target.load_state_dict(self.online.state_dict())

    def set_T(self, T: int) -> None:
        for net in (self.online, self.reference, self.target):
            net.T = T


def sync_due(iteration: int, period: int) -> bool:
    """Hard target update fires at iterations 1, 1 + N, 1 + 2N, ..."""
    return iteration % period == 1 % period


# ------------------------------------------------------------------ checkpoint


def save_checkpoint(path, arrays: dict[str, np.ndarray], iteration: int, stage: int) -> None:
    """Write the binary ``GTCK`` format (all integers and floats little-endian)."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(arrays))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    buf += struct.pack("<IB", iteration, stage)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int, int]:
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, UnicodeDecodeError) as e:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({e})") from e


def _parse_checkpoint(data: bytes, path) -> tuple[dict[str, np.ndarray], int, int]:
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a GTCK checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        if off + 4 * size > len(data):
            raise ValueError(f"{path}: truncated array {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    iteration, stage = struct.unpack_from("<IB", data, off)
    if off + 5 != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return arrays, iteration, stage


def net_from_arrays(arrays: dict[str, np.ndarray], arch: ArchConfig | None = None) -> PredictorNet:
    net = PredictorNet(arch)
    net.load_state_dict({k: v for k, v in arrays.items() if k in net.params})
    return net
