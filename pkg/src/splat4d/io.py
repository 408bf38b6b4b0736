"""Binary formats: training checkpoints and PPM images.

Checkpoint layout (all integers and floats little-endian):

    bytes 0-3   magic "4C4D"
    uint32      format version (currently 1)
    uint32      n_gaussians
    uint32      sh max_degree
    uint32      sh n_fourier
    float32     sh period
    float32[6]  world AABB: lo_x lo_y lo_z hi_x hi_y hi_z
    arrays      Gaussian fields in declared order, then decay-net parameters;
                each array is uint32 element count + float32 payload
    blob        uint32 byte length + UTF-8 JSON training-config echo
    blob        uint32 byte length + UTF-8 JSON RNG state

Images are binary PPM (P6, maxval 255). Encoding quantizes unit-range floats
with round-half-away-from-zero; decoding divides by 255.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .appearance import ShConfig
from .core4d import FIELD_ORDER, GaussianCloud
from .decaynet import DecayNet
from .errors import (
    CorruptCheckpointError,
    InvalidParameterError,
    PpmFormatError,
    UnsupportedVersionError,
)

CHECKPOINT_MAGIC = b"4C4D"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """In-memory image of the on-disk format. Arrays are float32; converting
    a scene to a checkpoint quantizes it exactly the way saving does, so a
    save/load round trip is bit-exact."""

    sh: ShConfig
    aabb: np.ndarray  # (2, 3) float32
    fields: dict  # name -> float32 array, names from FIELD_ORDER
    net_params: dict  # name -> float32 array, names from DecayNet.PARAM_NAMES
    config_echo: dict
    rng_state: dict

    @property
    def n_gaussians(self) -> int:
        return len(self.fields["positions"])

    @classmethod
    def from_state(cls, cloud: GaussianCloud, net: DecayNet, aabb,
                   config_echo: dict, rng_state: dict) -> "Checkpoint":
        fields = {
            name: getattr(cloud, name).astype(np.float32) for name in FIELD_ORDER
        }
        net_params = {
            name: getattr(net, name).astype(np.float32) for name in DecayNet.PARAM_NAMES
        }
        return cls(
            sh=cloud.sh_config,
            aabb=np.asarray(aabb, dtype=np.float32).reshape(2, 3),
            fields=fields,
            net_params=net_params,
            config_echo=dict(config_echo),
            rng_state=rng_state,
        )

    def to_cloud(self) -> GaussianCloud:
        return GaussianCloud(
            sh_config=self.sh,
            **{name: self.fields[name].astype(np.float64) for name in FIELD_ORDER},
        )

    def to_net(self) -> DecayNet:
        net = DecayNet(np.random.default_rng(0))
        for name in DecayNet.PARAM_NAMES:
            setattr(net, name, self.net_params[name].astype(np.float64))
        return net

    def aabb64(self) -> np.ndarray:
        return self.aabb.astype(np.float64)


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    if a.sh != b.sh or a.config_echo != b.config_echo or a.rng_state != b.rng_state:
        return False
    if not np.array_equal(a.aabb, b.aabb):
        return False
    for name in FIELD_ORDER:
        if not np.array_equal(a.fields[name], b.fields[name]):
            return False
    for name in DecayNet.PARAM_NAMES:
        if not np.array_equal(a.net_params[name], b.net_params[name]):
            return False
    return True


def _field_shapes(n: int, sh: ShConfig) -> dict:
    return {
        "positions": (n, 3),
        "temporal_centers": (n,),
        "rot_left": (n, 4),
        "rot_right": (n, 4),
        "log_scales": (n, 4),
        "opacity_logits": (n,),
        "sh_coeffs": (n,) + sh.coeff_shape(),
    }


_NET_SHAPES = {
    "w1": (64, 12), "b1": (64,), "w2": (64, 64), "b2": (64,),
    "w3": (1, 64), "b3": (1,),
}


def save_checkpoint(ckpt: Checkpoint, path):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    chunks.append(
        struct.pack(
            "<IIIf",
            ckpt.n_gaussians,
            ckpt.sh.max_degree,
            ckpt.sh.n_fourier,
            ckpt.sh.period,
        )
    )
    chunks.append(ckpt.aabb.astype("<f4").tobytes())

    def put_array(arr):
        data = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", data.size))
        chunks.append(data.tobytes())

    for name in FIELD_ORDER:
        put_array(ckpt.fields[name])
    for name in DecayNet.PARAM_NAMES:
        put_array(ckpt.net_params[name])
    for blob in (ckpt.config_echo, ckpt.rng_state):
        data = json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks.append(struct.pack("<I", len(data)))
        chunks.append(data)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(
                f"truncated while reading {what}", offset=self.pos
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]

    def array(self, what: str, expected: int) -> np.ndarray:
        at = self.pos
        count = self.u32(f"{what} length")
        if count != expected:
            raise CorruptCheckpointError(
                f"{what} has {count} elements, expected {expected}", offset=at
            )
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").copy()

    def blob(self, what: str) -> dict:
        at = self.pos
        size = self.u32(f"{what} length")
        raw = self.take(size, what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"unparseable {what}: {exc}", offset=at)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(
            f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0
        )
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint version {version} is not supported (expected "
            f"{CHECKPOINT_VERSION})"
        )
    n = r.u32("n_gaussians")
    max_degree = r.u32("max_degree")
    n_fourier = r.u32("n_fourier")
    period = r.f32("period")
    try:
        sh = ShConfig(max_degree=max_degree, n_fourier=n_fourier, period=period)
    except InvalidParameterError as exc:
        raise CorruptCheckpointError(f"bad sh config: {exc}", offset=8)
    aabb = np.frombuffer(r.take(24, "aabb"), dtype="<f4").reshape(2, 3).copy()
    fields = {}
    for name, shape in _field_shapes(n, sh).items():
        fields[name] = r.array(name, int(np.prod(shape))).reshape(shape)
    net_params = {}
    for name, shape in _NET_SHAPES.items():
        net_params[name] = r.array(name, int(np.prod(shape))).reshape(shape)
    config_echo = r.blob("config echo")
    rng_state = r.blob("rng state")
    if r.pos != len(data):
        raise CorruptCheckpointError(
            f"{len(data) - r.pos} trailing bytes", offset=r.pos
        )
    return Checkpoint(sh=sh, aabb=aabb, fields=fields, net_params=net_params,
                      config_echo=config_echo, rng_state=rng_state)


def quantize_unit(img: np.ndarray) -> np.ndarray:
    """Unit-range floats to bytes, rounding half away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def write_ppm(path, img: np.ndarray):
    """Write a unit-range float image as binary PPM. Grayscale input is
    replicated across channels."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidParameterError("image must be (H, W) or (H, W, 3)")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantize_unit(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into unit-range floats (H, W, 3)."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def skip_space(p):
        while p < len(data):
            ch = data[p : p + 1]
            if ch == b"#":
                while p < len(data) and data[p : p + 1] != b"\n":
                    p += 1
            elif ch.isspace():
                p += 1
            else:
                break
        return p

    def token(p, what):
        p = skip_space(p)
        start = p
        while p < len(data) and not data[p : p + 1].isspace():
            p += 1
        if start == p:
            raise PpmFormatError(f"missing {what}", offset=start)
        return data[start:p], p

    magic, pos = token(pos, "magic")
    if magic != b"P6":
        raise PpmFormatError(f"bad magic {magic!r}, expected b'P6'", offset=0)
    dims = []
    for what in ("width", "height", "maxval"):
        tok, pos = token(pos, what)
        try:
            dims.append(int(tok))
        except ValueError:
            raise PpmFormatError(f"non-numeric {what} {tok!r}", offset=pos)
    w, h, maxval = dims
    if w <= 0 or h <= 0:
        raise PpmFormatError(f"bad dimensions {w}x{h}", offset=pos)
    if maxval != 255:
        raise PpmFormatError(f"unsupported maxval {maxval}", offset=pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PpmFormatError("missing whitespace before pixel data", offset=pos)
    pos += 1
    need = w * h * 3
    if len(data) - pos < need:
        raise PpmFormatError(
            f"pixel data truncated: have {len(data) - pos}, need {need}", offset=pos
        )
    if len(data) - pos > need:
        raise PpmFormatError(
            f"{len(data) - pos - need} trailing bytes after pixel data",
            offset=pos + need,
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return dequantize(raw.reshape(h, w, 3))
