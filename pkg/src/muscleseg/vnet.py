"""Residual encoder-decoder network (I -> D -> D -> D -> L -> U -> U -> U -> F).

Channel plan for width multiplier ``w`` with base filters (8, 16, 32, 64, 128),
``f_k = round(base_k * w)``::

    I      conv5 1->f0, residual, stride-2 conv f0->f1              (skip s0 at /1)
    D2     2 x conv5 ->f2, residual, stride-2 conv f2->f2           (skip s1 at /2)
    D3     3 x conv5 ->f3, residual, stride-2 conv f3->f3           (skip s2 at /4)
    D3     3 x conv5 ->f4, residual, stride-2 conv f4->f4           (skip s3 at /8)
    L      3 x conv5 f4->f4, residual, transpose conv f4->f3        (/16 -> /8)
    U3     [up, s3] -> 3 x conv5 ->f4, residual, transpose f4->f3   (/8 -> /4)
    U3     [up, s2] -> 3 x conv5 ->f3, residual, transpose f3->f2   (/4 -> /2)
    U3     [up, s1] -> 3 x conv5 ->f2, residual, transpose f2->f1   (/2 -> /1)
    F      [up, s0] -> conv5 ->f1, residual, conv1 f1->1, sigmoid

Every convolution except the last is followed by SELU.  Residuals use a
bias-free 1x1x1 projection when the block changes the channel count.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, concat, conv3d, conv3d_transpose, no_grad, residual_combine, selu, sigmoid

BASE_FILTERS = (8, 16, 32, 64, 128)
CKPT_MAGIC = "MSEGCKPT"
CKPT_VERSION = 1


class SpecError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dims: tuple[int, int, int] = (96, 96, 192)
    width: float = 1.0
    base_filters: tuple[int, ...] = BASE_FILTERS
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "base_filters", tuple(int(f) for f in self.base_filters))
        if len(self.input_dims) != 3 or any(d <= 0 or d % 16 for d in self.input_dims):
            raise SpecError(f"input dims must be positive multiples of 16, got {self.input_dims}")
        if len(self.base_filters) != 5:
            raise SpecError("base_filters needs five entries")
        if self.width <= 0 or self.in_channels < 1:
            raise SpecError("width and in_channels must be positive")

    @property
    def filters(self) -> tuple[int, ...]:
        return tuple(max(1, int(round(b * self.width))) for b in self.base_filters)

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["base_filters"] = list(self.base_filters)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def layer_table(spec: ArchitectureSpec) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, kind, weight shape) for every parameterised layer, in build order.

    kinds: ``conv`` (weight + bias), ``tconv`` (transpose, weight + bias),
    ``proj`` (1x1x1, weight only).
    """
    f0, f1, f2, f3, f4 = spec.filters
    layers: list[tuple[str, str, tuple[int, ...]]] = []

    def conv(name, cin, cout, k):
        layers.append((name, "conv", (cout, cin, k, k, k)))

    def proj(name, cin, cout):
        if cin != cout:
            layers.append((name, "proj", (cout, cin, 1, 1, 1)))

    def tconv(name, cin, cout):
        layers.append((name, "tconv", (cin, cout, 2, 2, 2)))

    conv("init.conv0", spec.in_channels, f0, 5)
    proj("init.proj", spec.in_channels, f0)
    conv("init.down", f0, f1, 2)

    cin = f1
    for bi, (nconv, m) in enumerate(((2, f2), (3, f3), (3, f4)), start=1):
        c = cin
        for j in range(nconv):
            conv(f"down{bi}.conv{j}", c, m, 5)
            c = m
        proj(f"down{bi}.proj", cin, m)
        conv(f"down{bi}.down", m, m, 2)
        cin = m

    for j in range(3):
        conv(f"bottom.conv{j}", f4, f4, 5)
    tconv("bottom.up", f4, f3)

    up_ch = f3
    for bi, (m, skip_ch, nxt) in enumerate(((f4, f4, f3), (f3, f3, f2), (f2, f2, f1)), start=1):
        cin = up_ch + skip_ch
        c = cin
        for j in range(3):
            conv(f"up{bi}.conv{j}", c, m, 5)
            c = m
        proj(f"up{bi}.proj", cin, m)
        tconv(f"up{bi}.up", m, nxt)
        up_ch = nxt

    cin = up_ch + f0
    conv("final.conv0", cin, f1, 5)
    proj("final.proj", cin, f1)
    conv("final.out", f1, 1, 1)
    return layers


def _fan_in(kind: str, shape) -> int:
    if kind == "tconv":
        # each output voxel receives one tap per input channel at stride == kernel
        return shape[0]
    return int(np.prod(shape[1:]))


class Model:
    """Parameters plus the forward graph.  ``params`` preserves build order."""

    def __init__(self, spec: ArchitectureSpec, params: dict[str, Tensor], metadata: dict | None = None):
        self.spec = spec
        self.params = params
        self.metadata = dict(metadata or {})

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _w(self, name):
        return self.params[name + ".weight"]

    def _b(self, name):
        return self.params[name + ".bias"]

    def _conv(self, name, x, stride=1):
        return selu(conv3d(x, self._w(name), self._b(name), stride=stride))

    def _proj(self, name):
        return self.params.get(name + ".weight")

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[2:]) != self.spec.input_dims or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"input shape {x.shape} does not match spec "
                             f"(N, {self.spec.in_channels}) + {self.spec.input_dims}")
        h = self._conv("init.conv0", x)
        h = residual_combine(x, h, self._proj("init.proj"))
        skips = [h]
        h = self._conv("init.down", h, stride=2)
        for bi, nconv in ((1, 2), (2, 3), (3, 3)):
            block_in = h
            for j in range(nconv):
                h = self._conv(f"down{bi}.conv{j}", h)
            h = residual_combine(block_in, h, self._proj(f"down{bi}.proj"))
            skips.append(h)
            h = self._conv(f"down{bi}.down", h, stride=2)
        block_in = h
        for j in range(3):
            h = self._conv(f"bottom.conv{j}", h)
        h = residual_combine(block_in, h)
        h = selu(conv3d_transpose(h, self._w("bottom.up"), self._b("bottom.up")))
        for bi in (1, 2, 3):
            h = concat([h, skips[-bi]])
            block_in = h
            for j in range(3):
                h = self._conv(f"up{bi}.conv{j}", h)
            h = residual_combine(block_in, h, self._proj(f"up{bi}.proj"))
            h = selu(conv3d_transpose(h, self._w(f"up{bi}.up"), self._b(f"up{bi}.up")))
        h = concat([h, skips[0]])
        block_in = h
        h = self._conv("final.conv0", h)
        h = residual_combine(block_in, h, self._proj("final.proj"))
        return sigmoid(conv3d(h, self._w("final.out"), self._b("final.out")))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def build_model(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Gaussian weights with SD 1/sqrt(fan-in), zero biases; drawn in layer order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, kind, shape in layer_table(spec):
        w = rng.standard_normal(shape) / np.sqrt(_fan_in(kind, shape))
        params[name + ".weight"] = Tensor(w.astype(dtype), requires_grad=True, name=name + ".weight")
        if kind != "proj":
            nb = shape[1] if kind == "tconv" else shape[0]
            params[name + ".bias"] = Tensor(np.zeros(nb, dtype=dtype), requires_grad=True, name=name + ".bias")
    return Model(spec, params, {"seed": int(seed)})


def count_parameters(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def forward(model: Model, image) -> np.ndarray:
    """Probability map for one crop ``(X, Y, Z)`` or a batch ``(N, C, X, Y, Z)``; no graph kept."""
    arr = np.asarray(image)
    single = arr.ndim == 3
    if single:
        arr = arr[None, None]
    if arr.ndim != 5:
        raise ValueError(f"expected (X, Y, Z) or (N, C, X, Y, Z), got shape {arr.shape}")
    with no_grad():
        out = model(Tensor(arr.astype(model.dtype, copy=False))).data
    return out[0, 0] if single else out


# ------------------------------------------------------------------ checkpoints

def _checkpoint_bytes(model: Model) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>|="),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "magic": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "spec": model.spec.to_json(),
        "spec_digest": model.spec.digest(),
        "params": manifest,
        "payload_bytes": offset,
        "payload_sha256": hashlib.sha256(b"".join(chunks)).hexdigest(),
        "metadata": model.metadata,
    }
    head = (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
    return head + b"".join(chunks)


def save_checkpoint(model: Model, path) -> None:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    blob = _checkpoint_bytes(model)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def load_checkpoint(path, expect_spec: ArchitectureSpec | None = None) -> Model:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CorruptCheckpointError("missing checkpoint header")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
        if header.get("magic") != CKPT_MAGIC:
            raise CorruptCheckpointError("not a checkpoint file (bad magic)")
        sj = header["spec"]
        spec = ArchitectureSpec(tuple(sj["input_dims"]), float(sj["width"]), tuple(sj["base_filters"]),
                                int(sj["in_channels"]))
        manifest = header["params"]
        payload_bytes = int(header["payload_bytes"])
    except CorruptCheckpointError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("spec_digest") != spec.digest():
        raise CorruptCheckpointError("spec digest mismatch")
    if expect_spec is not None and expect_spec.digest() != spec.digest():
        raise CorruptCheckpointError(f"checkpoint spec {spec} differs from expected {expect_spec}")
    payload = blob[nl + 1:]
    if len(payload) != payload_bytes:
        raise CorruptCheckpointError(f"payload is {len(payload)} bytes, header says {payload_bytes}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CorruptCheckpointError("payload checksum mismatch")
    expected = {}
    for name, kind, shape in layer_table(spec):
        expected[name + ".weight"] = shape
        if kind != "proj":
            expected[name + ".bias"] = (shape[1] if kind == "tconv" else shape[0],)
    if [m["name"] for m in manifest] != list(expected):
        raise CorruptCheckpointError("parameter names do not match the architecture")
    params = {}
    for m in manifest:
        shape = tuple(m["shape"])
        if shape != expected[m["name"]]:
            raise CorruptCheckpointError(f"{m['name']}: shape {shape} != {expected[m['name']]}")
        dt = np.dtype("<" + m["dtype"])
        lo, hi = int(m["offset"]), int(m["offset"]) + int(m["nbytes"])
        if hi > len(payload) or hi - lo != dt.itemsize * int(np.prod(shape)):
            raise CorruptCheckpointError(f"{m['name']}: payload range out of bounds")
        arr = np.frombuffer(payload[lo:hi], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[m["name"]] = Tensor(arr, requires_grad=True, name=m["name"])
    return Model(spec, params, header.get("metadata"))
