"""Three-head classifier: shared CNN extractor, class head, domain discriminator.

The discriminator sits behind a gradient-reversal layer, so a single backward
pass of ``L_C + L_D`` pushes the extractor away from domain-specific features
while the discriminator itself learns to separate domains.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ReversalScale, Tape, Tensor
from .errors import InvalidConfig, InvalidShape

CHECKPOINT_MAGIC = b"ADSH"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 32
    stage_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    embedding_dim: int = 128
    num_classes: int = 6
    num_domains: int = 2
    discriminator_hidden: int = 64
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.embedding_dim < 1:
            raise InvalidConfig("embedding_dim must be >= 1")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.num_domains < 2:
            raise InvalidConfig("num_domains must be >= 2")
        if self.discriminator_hidden < 0:
            raise InvalidConfig("discriminator_hidden must be >= 0")
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise InvalidConfig("stage_channels must be a nonempty list of positive counts")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig("kernel must be a positive odd size")
        factor = 2 ** len(self.stage_channels)
        if self.input_size < factor or self.input_size % factor:
            raise InvalidConfig(
                f"input_size {self.input_size} must be divisible by 2^{len(self.stage_channels)}={factor}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        if "stage_channels" in d:
            d["stage_channels"] = tuple(d["stage_channels"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(f"bad backbone config: {exc}") from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelParams:
    """Parameter arrays split into extractor, class-head and domain-head groups."""

    config: BackboneConfig
    theta_f: dict[str, np.ndarray] = field(default_factory=dict)
    theta_c: dict[str, np.ndarray] = field(default_factory=dict)
    theta_d: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        return {"theta_f": self.theta_f, "theta_c": self.theta_c, "theta_d": self.theta_d}

    def items(self):
        for group in self.groups.values():
            yield from group.items()

    def get(self, name: str) -> np.ndarray:
        for group in self.groups.values():
            if name in group:
                return group[name]
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.theta_f.items()},
            {k: v.copy() for k, v in self.theta_c.items()},
            {k: v.copy() for k, v in self.theta_d.items()},
        )

    def count(self) -> int:
        return sum(v.size for _, v in self.items())


def _param_shapes(cfg: BackboneConfig):
    f, c, d = {}, {}, {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.stage_channels):
        f[f"f.conv{i}.w"] = (cout, cin, cfg.kernel, cfg.kernel)
        f[f"f.conv{i}.b"] = (cout,)
        cin = cout
    f["f.proj.w"] = (cin, cfg.embedding_dim)
    f["f.proj.b"] = (cfg.embedding_dim,)
    c["c.w"] = (cfg.embedding_dim, cfg.num_classes)
    c["c.b"] = (cfg.num_classes,)
    if cfg.discriminator_hidden:
        d["d.hidden.w"] = (cfg.embedding_dim, cfg.discriminator_hidden)
        d["d.hidden.b"] = (cfg.discriminator_hidden,)
        d["d.out.w"] = (cfg.discriminator_hidden, cfg.num_domains)
    else:
        d["d.out.w"] = (cfg.embedding_dim, cfg.num_domains)
    d["d.out.b"] = (cfg.num_domains,)
    return f, c, d


def build_model(config: BackboneConfig, seed: int = 0, scheme: str = "uniform-he") -> ModelParams:
    """Initialise parameters deterministically from ``seed``.

    Weights use He-uniform ranges (``scheme="zeros"`` zeroes everything);
    biases start at zero.  Each tensor draws from its own child seed.
    """
    params = ModelParams(config)
    index = 0
    for (name, group), shapes in zip(params.groups.items(), _param_shapes(config)):
        for pname, shape in shapes.items():
            child = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
            index += 1
            if pname.endswith(".b"):
                group[pname] = ad.init_tensor(shape, "zeros")
            else:
                # dense weights are stored (in, out); conv kernels (out, in, k, k)
                fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
                group[pname] = ad.init_tensor(shape, scheme, seed=child, fan_in=fan_in)
    return params


def bind(params: ModelParams, tape: Tape) -> dict[str, Tensor]:
    """Leaf tensors for ``params`` on ``tape``, created once per tape."""
    key = id(params)
    if key not in tape.bindings:
        tape.bindings[key] = {name: tape.leaf(value) for name, value in params.items()}
    return tape.bindings[key]


def _as_input(params: ModelParams, x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    tape = Tape() if tape is None else tape
    x = np.asarray(x, dtype=ad.DTYPE)
    cfg = params.config
    if x.ndim == 3:
        x = x[:, None]
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise InvalidShape(f"expected input of shape (B, {', '.join(map(str, expected))}), got {x.shape}")
    return tape.leaf(x)


def extract_features(params: ModelParams, x, tape: Tape | None = None) -> Tensor:
    """Embedding ``e`` of shape (B, E).

    Each stage is conv -> ReLU -> 2x2 max pool; the post-ReLU map of stage
    ``i`` is kept as ``tape.marks[f"stage{i}"]`` for Grad-CAM.
    """
    xt = _as_input(params, x, tape)
    tape = xt.tape
    p = bind(params, tape)
    cfg = params.config
    h = xt
    for i in range(len(cfg.stage_channels)):
        h = ad.conv2d(h, p[f"f.conv{i}.w"], p[f"f.conv{i}.b"], stride=1, padding=cfg.kernel // 2)
        h = ad.relu(h)
        tape.marks[f"stage{i}"] = h
        h = ad.pool2d("max", h, 2, 2)
    h = ad.global_avg_pool(h)
    e = ad.add_bias(ad.matmul(h, p["f.proj.w"]), p["f.proj.b"])
    tape.marks["embedding"] = e
    return e


def _check_embedding(params: ModelParams, e: Tensor):
    if e.values.ndim != 2 or e.shape[1] != params.config.embedding_dim:
        raise InvalidShape(f"embedding of shape {e.shape} does not match E={params.config.embedding_dim}")


def classify(params: ModelParams, e: Tensor) -> Tensor:
    """Class logits (B, K)."""
    _check_embedding(params, e)
    p = bind(params, e.tape)
    return ad.add_bias(ad.matmul(e, p["c.w"]), p["c.b"])


def discriminate(params: ModelParams, e: Tensor, scale: ReversalScale | None) -> Tensor:
    """Domain logits (B, m), computed behind a gradient-reversal layer.

    ``scale=None`` skips the reversal layer entirely (plain gradients), which
    is only useful for diagnostics.
    """
    _check_embedding(params, e)
    p = bind(params, e.tape)
    h = e if scale is None else ad.grad_reversal(e, scale)
    if "d.hidden.w" in p:
        h = ad.relu(ad.add_bias(ad.matmul(h, p["d.hidden.w"]), p["d.hidden.b"]))
    return ad.add_bias(ad.matmul(h, p["d.out.w"]), p["d.out.b"])


def param_grads(params: ModelParams, tape: Tape, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Translate a node-id gradient map into parameter-name gradients."""
    p = bind(params, tape)
    return {name: grads[t.node_id] for name, t in p.items()}


# ---------------------------------------------------------------------------
# checkpoint file: b"ADSH" | version u8 | header length u32 LE | JSON header | f64 LE blobs

def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Write ``params`` atomically; a crash never leaves a torn file at ``path``."""
    entries = []
    offset = 0
    for group, tensors in params.groups.items():
        for name, value in tensors.items():
            entries.append({"name": name, "group": group, "shape": list(value.shape), "offset": offset})
            offset += value.size * 8
    header = {
        "backbone": params.config.to_dict(),
        "config_hash": params.config.config_hash(),
        "params": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for _, tensors in params.groups.items():
        for value in tensors.values():
            buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns ``(params, header)``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidConfig(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != CHECKPOINT_VERSION:
        raise InvalidConfig(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[9:9 + hlen])
    body = data[9 + hlen:]
    config = BackboneConfig.from_dict(header["backbone"])
    if config.config_hash() != header["config_hash"]:
        raise InvalidConfig(
            f"{path}: config hash mismatch (header {header['config_hash']}, recomputed {config.config_hash()})"
        )
    params = ModelParams(config)
    groups = params.groups
    for entry in header["params"]:
        n = int(np.prod(entry["shape"]))
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=start).astype(np.float64)
        groups[entry["group"]][entry["name"]] = arr.reshape(entry["shape"])
    return params, header
