"""CNN encoder + squeeze-and-excitation attention + dense classifier.

Layout for the default configuration (input 19 x 20 x 11)::

    3 x [conv 2x2 'same' -> batch norm -> relu -> dropout -> maxpool 2x2]
        (20, 11) -> (10, 5) -> (5, 2) -> (2, 1)
    SE attention on the 128-channel map
    flatten (256) -> dense 128 -> relu -> dense 1 -> sigmoid
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import ConfigError, FormatError, ShapeError, VersionError


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 19
    input_hw: tuple[int, int] = (20, 11)
    conv_channels: tuple[int, ...] = (32, 64, 128)
    kernel: tuple[int, int] = (2, 2)
    dropout_p: float = 0.3
    se_reduction: int = 8
    dense_units: int = 128
    use_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "kernel", tuple(self.kernel))
        self.validate()

    def validate(self):
        ch = self.conv_channels
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ConfigError("conv_channels must be strictly increasing")
        if self.se_reduction < 1 or ch[-1] % self.se_reduction:
            raise ConfigError(f"se_reduction={self.se_reduction} must divide {ch[-1]}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")

    @property
    def padding(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """'Same' padding as (top, bottom), (left, right).

        Matches symmetric padding of ceil((k-1)/2) followed by cropping the
        output back to the input size from the top/left, so a 2x2 kernel at
        output (i, j) reads inputs (i..i+1, j..j+1).
        """
        return tuple(((k - 1) // 2, k - 1 - (k - 1) // 2) for k in self.kernel)

    def spatial_trajectory(self) -> list[tuple[int, int]]:
        h, w = self.input_hw
        out = []
        for _ in self.conv_channels:
            h, w = h // 2, w // 2
            out.append((h, w))
        return out

    def shape_table(self) -> dict[str, tuple[int, ...]]:
        """Name -> shape of every learnable parameter and batch-norm buffer."""
        table: dict[str, tuple[int, ...]] = {}
        kh, kw = self.kernel
        cin = self.in_channels
        for i, cout in enumerate(self.conv_channels, start=1):
            table[f"block{i}.conv.weight"] = (cout, cin, kh, kw)
            table[f"block{i}.conv.bias"] = (cout,)
            table[f"block{i}.bn.gamma"] = (cout,)
            table[f"block{i}.bn.beta"] = (cout,)
            cin = cout
        c = self.conv_channels[-1]
        if self.use_attention:
            mid = c // self.se_reduction
            table["se.fc1.weight"] = (mid, c, 1, 1)
            table["se.fc1.bias"] = (mid,)
            table["se.fc2.weight"] = (c, mid, 1, 1)
            table["se.fc2.bias"] = (c,)
        h, w = self.spatial_trajectory()[-1]
        table["dense.weight"] = (c * h * w, self.dense_units)
        table["dense.bias"] = (self.dense_units,)
        table["out.weight"] = (self.dense_units, 1)
        table["out.bias"] = (1,)
        return table

    def buffer_table(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, cout in enumerate(self.conv_channels, start=1):
            out[f"block{i}.bn.running_mean"] = (cout,)
            out[f"block{i}.bn.running_var"] = (cout,)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in cfg.shape_table().values())


def se_block(x: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor,
             pin: bool = False) -> tuple[Tensor, np.ndarray]:
    """Squeeze (spatial mean), excite (1x1 conv -> relu -> 1x1 conv -> sigmoid), rescale.

    Returns the recalibrated map and the attention weights ``s`` [N, C].
    With ``pin=True`` the weights are fixed to 1 and the block is a no-op.
    """
    if x.ndim != 4:
        raise ShapeError("se_block expects [N, C, H, W]")
    if pin:
        s = Tensor(np.ones((x.shape[0], x.shape[1], 1, 1)))
    else:
        z = ad.global_avg_pool2d(x)
        hidden = ad.relu(ad.conv2d(z, fc1_w, fc1_b))
        s = ad.sigmoid(ad.conv2d(hidden, fc2_w, fc2_b))
    return ad.channelwise_mul(x, s), s.data[:, :, 0, 0].copy()


class SeizurePredictor:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor],
                 buffers: dict[str, np.ndarray], seed: int = 0):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.step = 0
        self.rng = np.random.default_rng(seed)
        self.last_attention: np.ndarray | None = None
        self.last_trajectory: list[tuple[int, int]] = []

    # ------------------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def clone(self) -> SeizurePredictor:
        return copy.deepcopy(self)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k in self.params:
                self.params[k].data[...] = v
            else:
                self.buffers[k][...] = v

    # ------------------------------------------------------------------
    def _stats(self, i: int) -> RunningStats:
        return RunningStats(self.buffers[f"block{i}.bn.running_mean"],
                            self.buffers[f"block{i}.bn.running_var"])

    def logits(self, batch, mode: str = "eval", pin_attention: bool = False) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        cfg = self.cfg
        expected = (cfg.in_channels,) + cfg.input_hw
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"input shape {x.shape}, expected [N, {', '.join(map(str, expected))}]")
        p = self.params
        pad = cfg.padding
        self.last_trajectory = []
        for i in range(1, len(cfg.conv_channels) + 1):
            y = ad.conv2d(x, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"], padding=pad)
            y = ad.batchnorm2d(y, p[f"block{i}.bn.gamma"], p[f"block{i}.bn.beta"], self._stats(i), mode=mode)
            y = ad.relu(y)
            y = ad.dropout(y, cfg.dropout_p, mode=mode, rng=self.rng)
            x = ad.maxpool2d(y)
            self.last_trajectory.append(x.shape[2:])
        if cfg.use_attention:
            x, self.last_attention = se_block(
                x, p["se.fc1.weight"], p["se.fc1.bias"], p["se.fc2.weight"], p["se.fc2.bias"],
                pin=pin_attention)
        else:
            self.last_attention = None
        x = ad.flatten(x)
        x = ad.relu(ad.linear(x, p["dense.weight"], p["dense.bias"]))
        x = ad.linear(x, p["out.weight"], p["out.bias"])
        return ad.reshape(x, (x.shape[0],))

    def forward(self, batch, mode: str = "eval", pin_attention: bool = False) -> Tensor:
        """Preictal probabilities, shape [N]."""
        return ad.sigmoid(self.logits(batch, mode, pin_attention))

    __call__ = forward

    def predict_proba(self, batch, chunk: int = 512) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        outs = [self.forward(batch[i:i + chunk], mode="eval").data for i in range(0, len(batch), chunk)]
        return np.concatenate(outs) if outs else np.zeros(0)


def classify(model: SeizurePredictor, batch, threshold: float = 0.5) -> np.ndarray:
    return (model.predict_proba(batch) >= threshold).astype(np.int64)


def init_params(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> SeizurePredictor:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, gamma 1, beta 0."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in cfg.shape_table().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = ad.parameter(data, name=name)
    buffers = {name: (np.zeros(s) if name.endswith("mean") else np.ones(s))
               for name, s in cfg.buffer_table().items()}
    return SeizurePredictor(cfg, params, buffers, seed=seed)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# magic "NSCK" | version u16 | cfg_len u32 | cfg JSON (UTF-8) | step u64 |
# count u32 | count x entry
# entry: name_len u16 | name | kind u8 (0 param, 1 buffer) | ndim u8 |
#        ndim x u32 dims | float64 little-endian data

CKPT_MAGIC = b"NSCK"
CKPT_VERSION = 1


def save_checkpoint(m: SeizurePredictor, path) -> None:
    cfg_json = json.dumps(m.cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg_json)), cfg_json,
             struct.pack("<QI", m.step, len(m.params) + len(m.buffers))]
    entries = [(k, 0, v.data) for k, v in m.params.items()] + [(k, 1, v) for k, v in m.buffers.items()]
    for name, kind, arr in entries:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected: ModelConfig | None = None) -> SeizurePredictor:
    buf = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError("checkpoint truncated")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    def raw(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("checkpoint truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    if raw(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, cfg_len = take("<HI")
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        cfg = ModelConfig.from_dict(json.loads(raw(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable model config: {exc}") from exc
    if expected is not None and cfg != expected:
        raise VersionError("checkpoint was written for a different model configuration")
    step, count = take("<QI")
    params_tbl, buf_tbl = cfg.shape_table(), cfg.buffer_table()
    params, buffers = {}, {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = raw(nlen).decode("utf-8")
        kind, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        table = params_tbl if kind == 0 else buf_tbl
        if table.get(name) != tuple(shape):
            raise VersionError(f"entry {name!r} with shape {shape} does not fit the model layout")
        if kind == 0:
            params[name] = ad.parameter(arr, name=name)
        else:
            buffers[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    if set(params) != set(params_tbl) or set(buffers) != set(buf_tbl):
        raise VersionError("checkpoint is missing entries for this model layout")
    params = {k: params[k] for k in params_tbl}
    buffers = {k: buffers[k] for k in buf_tbl}
    m = SeizurePredictor(cfg, params, buffers)
    m.step = step
    return m
