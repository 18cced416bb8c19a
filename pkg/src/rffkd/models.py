"""Teacher (BiLSTM embedding + attention encoder + pooled head) and conv student on numcore."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import Tensor, ops

CKPT_MAGIC = b"RFKW"
CKPT_VERSION = 1


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class TeacherConfig:
    input_dim: int = 64
    lstm_layers: int = 2
    lstm_hidden: int = 32
    attn_layers: int = 3
    attn_heads: int = 2
    model_dim: int = 64
    ff_mult: int = 2
    num_classes: int = 20
    dropout_rate: float = 0.1
    reg_lambda: float = 1e-4

    def validate(self) -> "TeacherConfig":
        if self.model_dim != 2 * self.lstm_hidden:
            raise ValueError(f"model_dim ({self.model_dim}) must equal 2 * lstm_hidden ({self.lstm_hidden})")
        if self.lstm_layers < 1 or self.attn_layers < 1:
            raise ValueError("need at least one LSTM layer and one attention layer")
        if self.model_dim % self.attn_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.attn_heads} heads")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        return self


@dataclass(frozen=True)
class StudentConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    strides: tuple[int, ...] = (2, 2, 2)
    kernel: int = 3
    num_classes: int = 20
    dropout_rate: float = 0.0
    reg_lambda: float = 0.0

    def validate(self) -> "StudentConfig":
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ValueError("channels and strides must be nonempty and the same length")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same padding")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        return self


# ---------------------------------------------------------------- init

def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def _dense(rng, params: dict, name: str, n_in: int, n_out: int) -> None:
    params[f"{name}.W"] = Tensor(glorot(rng, (n_in, n_out), n_in, n_out), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


def _lstm_dir(rng, params: dict, name: str, n_in: int, hidden: int) -> None:
    params[f"{name}.W"] = Tensor(glorot(rng, (n_in, 4 * hidden), n_in, 4 * hidden), requires_grad=True)
    params[f"{name}.U"] = Tensor(orthogonal(rng, hidden, 4 * hidden), requires_grad=True)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate; gate order i, f, g, o
    params[f"{name}.b"] = Tensor(b, requires_grad=True)


def _layer_norm(params: dict, name: str, dim: int) -> None:
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


# ---------------------------------------------------------------- building blocks

def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return x @ params[f"{name}.W"] + params[f"{name}.b"]


def lstm_scan(x: Tensor, w: Tensor, u: Tensor, b: Tensor, reverse: bool = False) -> list[Tensor]:
    """Hidden states of one LSTM direction over ``x`` (B, T, F), returned in time order."""
    bsz, steps, _ = x.shape
    hidden = u.shape[0]
    xw = x @ w + b  # all input projections at once
    h = Tensor(np.zeros((bsz, hidden)))
    c = Tensor(np.zeros((bsz, hidden)))
    out: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        z = xw[:, t, :] + h @ u
        i = ops.sigmoid(z[:, :hidden])
        f = ops.sigmoid(z[:, hidden:2 * hidden])
        g = ops.tanh(z[:, 2 * hidden:3 * hidden])
        o = ops.sigmoid(z[:, 3 * hidden:])
        c = f * c + i * g
        h = o * ops.tanh(c)
        out[t] = h
    return out


def bilstm_embed(x: Tensor | np.ndarray, fwd: Sequence[Tensor], bwd: Sequence[Tensor]) -> Tensor:
    """Concatenate forward and backward LSTM states per step: (B, T, F) -> (B, T, 2H).

    ``fwd``/``bwd`` are ``(W, U, b)`` triples. A 2-D (T, F) input is treated
    as a batch of one and returns (T, 2H).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    hf = lstm_scan(x, *fwd)
    hb = lstm_scan(x, *bwd, reverse=True)
    z = ops.stack([ops.concatenate([a, b], axis=-1) for a, b in zip(hf, hb)], axis=1)
    return z[0] if squeeze else z


def attention(x: Tensor, params: dict, name: str, heads: int) -> Tensor:
    bsz, steps, dim = x.shape
    dh = dim // heads
    qkv = linear(x, params, f"{name}.qkv").reshape(bsz, steps, 3, heads, dh)
    qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, heads, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    ctx = ops.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(bsz, steps, dim)
    return linear(ctx, params, f"{name}.out")


def frobenius_reg(head_weights: Sequence[Tensor], lam: float) -> Tensor:
    """``lam * sum_l ||W_l||_F^2`` over the given weight matrices."""
    if lam < 0:
        raise ValueError(f"regularization coefficient must be >= 0, got {lam}")
    total = Tensor(0.0)
    for w in head_weights:
        total = total + (w * w).sum()
    return total * lam


# ---------------------------------------------------------------- models

class Model:
    kind = "model"
    head_names: tuple[str, ...] = ()

    def __init__(self, config, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head_weights(self) -> list[Tensor]:
        return [self.params[n] for n in self.head_names]

    def reg_loss(self) -> Tensor:
        return frobenius_reg(self.head_weights(), self.config.reg_lambda)

    def param_count(self) -> int:
        return param_count(self)

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                return_features: bool = False):
        raise NotImplementedError

    def __call__(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(x, train, rng)

    def predict_logits(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode logits as a plain array, batched to bound memory."""
        chunks = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.num_classes))

    def embed(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Penultimate activations (input of the final linear layer), eval mode."""
        return np.concatenate([self.forward(x[i:i + batch_size], return_features=True)[1].data
                               for i in range(0, len(x), batch_size)])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError(f"state keys differ: missing {set(self.params) - set(state)}, "
                             f"unexpected {set(state) - set(self.params)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: checkpoint shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def clone(self) -> "Model":
        other = type(self).__new__(type(self))
        Model.__init__(other, self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                            for k, v in self.params.items()})
        return other


class Teacher(Model):
    kind = "teacher"

    def __init__(self, cfg: TeacherConfig, rng: np.random.Generator):
        cfg.validate()
        p: dict[str, Tensor] = {}
        n_in = cfg.input_dim
        for layer in range(cfg.lstm_layers):
            for d in ("fwd", "bwd"):
                _lstm_dir(rng, p, f"lstm{layer}.{d}", n_in, cfg.lstm_hidden)
            n_in = 2 * cfg.lstm_hidden
        dim, ff = cfg.model_dim, cfg.ff_mult * cfg.model_dim
        for layer in range(cfg.attn_layers):
            _layer_norm(p, f"attn{layer}.ln1", dim)
            _dense(rng, p, f"attn{layer}.qkv", dim, 3 * dim)
            _dense(rng, p, f"attn{layer}.out", dim, dim)
            _layer_norm(p, f"attn{layer}.ln2", dim)
            _dense(rng, p, f"attn{layer}.ff1", dim, ff)
            _dense(rng, p, f"attn{layer}.ff2", ff, dim)
        _layer_norm(p, "final_ln", dim)
        _dense(rng, p, "head.fc1", dim, dim)
        _dense(rng, p, "head.fc2", dim, cfg.num_classes)
        super().__init__(cfg, p)

    head_names = ("head.fc1.W", "head.fc2.W")

    def encode(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """(B, F, T) spectrograms -> (B, T, model_dim) encoder output before pooling."""
        cfg, p = self.config, self.params
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        h: Tensor = Tensor(np.ascontiguousarray(np.swapaxes(x, 1, 2)))
        for layer in range(cfg.lstm_layers):
            fwd = [p[f"lstm{layer}.fwd.{n}"] for n in "WUb"]
            bwd = [p[f"lstm{layer}.bwd.{n}"] for n in "WUb"]
            h = bilstm_embed(h, fwd, bwd)
        for layer in range(cfg.attn_layers):
            a = f"attn{layer}"
            y = ops.layer_norm(h, p[f"{a}.ln1.g"], p[f"{a}.ln1.b"])
            h = h + ops.dropout(attention(y, p, a, cfg.attn_heads), cfg.dropout_rate, rng, train)
            y = ops.layer_norm(h, p[f"{a}.ln2.g"], p[f"{a}.ln2.b"])
            y = linear(ops.relu(linear(y, p, f"{a}.ff1")), p, f"{a}.ff2")
            h = h + ops.dropout(y, cfg.dropout_rate, rng, train)
        return ops.layer_norm(h, p["final_ln.g"], p["final_ln.b"])

    def classify(self, pooled: Tensor, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Pooled (B, model_dim) features -> (logits, penultimate activations)."""
        feat = ops.relu(linear(pooled, self.params, "head.fc1"))
        logits = linear(ops.dropout(feat, self.config.dropout_rate, rng, train), self.params, "head.fc2")
        return logits, feat

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                return_features: bool = False):
        pooled = self.encode(x, train, rng).mean(axis=1)
        logits, feat = self.classify(pooled, train, rng)
        return (logits, feat) if return_features else logits


class Student(Model):
    kind = "student"

    def __init__(self, cfg: StudentConfig, rng: np.random.Generator):
        cfg.validate()
        p: dict[str, Tensor] = {}
        c_in, k = 1, cfg.kernel
        for s, c_out in enumerate(cfg.channels):
            p[f"conv{s}.W"] = Tensor(glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k),
                                     requires_grad=True)
            p[f"conv{s}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
            c_in = c_out
        _dense(rng, p, "head", c_in, cfg.num_classes)
        super().__init__(cfg, p)

    head_names = ("head.W",)

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                return_features: bool = False):
        cfg, p = self.config, self.params
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        h: Tensor = Tensor(x[:, None, :, :])
        for s, stride in enumerate(cfg.strides):
            h = ops.relu(ops.conv2d(h, p[f"conv{s}.W"], p[f"conv{s}.b"], stride=stride))
        feat = h.mean(axis=(2, 3))
        logits = linear(ops.dropout(feat, cfg.dropout_rate, rng, train), p, "head")
        return (logits, feat) if return_features else logits


def param_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def check_student_smaller(student: Model, teacher: Model) -> None:
    if student.param_count() >= teacher.param_count():
        raise ValueError(f"student has {student.param_count()} parameters, not fewer than "
                         f"the teacher's {teacher.param_count()}")


def student_param_formula(cfg: StudentConfig) -> int:
    """Closed form sum(k^2 c_in c_out + c_out) + head."""
    total, c_in = 0, 1
    for c_out in cfg.channels:
        total += cfg.kernel ** 2 * c_in * c_out + c_out
        c_in = c_out
    return total + c_in * cfg.num_classes + cfg.num_classes


def teacher_param_formula(cfg: TeacherConfig) -> int:
    h, d, ff = cfg.lstm_hidden, cfg.model_dim, cfg.ff_mult * cfg.model_dim
    total, n_in = 0, cfg.input_dim
    for _ in range(cfg.lstm_layers):
        total += 2 * (4 * h * (n_in + h) + 4 * h)
        n_in = 2 * h
    per_block = 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * ff + ff) + (ff * d + d)
    return total + cfg.attn_layers * per_block + 2 * d + (d * d + d) + (d * cfg.num_classes + cfg.num_classes)


# ---------------------------------------------------------------- checkpoints

def _config_dict(model: Model) -> dict:
    return asdict(model.config)


def config_hash(model: Model) -> str:
    blob = json.dumps({"kind": model.kind, "config": _config_dict(model)}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_model(kind: str, config: dict, rng: np.random.Generator | None = None) -> Model:
    rng = rng or np.random.default_rng(0)
    if kind == "teacher":
        return Teacher(TeacherConfig(**config), rng)
    if kind == "student":
        cfg = dict(config)
        cfg["channels"], cfg["strides"] = tuple(cfg["channels"]), tuple(cfg["strides"])
        return Student(StudentConfig(**cfg), rng)
    raise ValueError(f"unknown model kind {kind!r}")


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path: str | Path, model: Model) -> dict:
    """Write the binary checkpoint and a JSON summary next to it; returns the summary."""
    path = Path(path)
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_str(model.kind),
             _pack_str(json.dumps(_config_dict(model), sort_keys=True)),
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.data.astype("<f8").tobytes())
    path.write_bytes(b"".join(parts))
    summary = {"kind": model.kind, "param_count": model.param_count(), "config": _config_dict(model),
               "config_hash": config_hash(model), "file": path.name}
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def load_checkpoint(path: str | Path) -> Model:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint at byte {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version = u32()
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    kind = take(u32()).decode()
    config = json.loads(take(u32()).decode())
    state = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        ndim = u32()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    model = build_model(kind, config)
    model.load_state_dict(state)
    return model
