"""Denoiser network, auxiliary quality head, oracle doubles and checkpoint I/O.

The denoiser takes ``(x_t, x)`` stacked as two channels plus an integer
step ``t`` and predicts the clean pattern. Its bottleneck feature map is
what the quality head regresses ``(q_hat, r_hat)`` from.
"""

import hashlib
import io
import json
import struct

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import FormatError, InvalidInputError

EMBED_DIM = 128


def sinusoidal_embedding(t, dim=EMBED_DIM):
    """Sine half then cosine half, frequencies ``10000 ** (-k / (dim / 2))``."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.pow(10000.0, -torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def embed_timestep(t):
    """Pre-projection 128-d embedding of a single step as a numpy vector."""
    return sinusoidal_embedding([t])[0].numpy()


class TimestepEmbedding(nn.Module):
    def __init__(self, out_dim, dim=EMBED_DIM):
        super().__init__()
        self.dim = dim
        self.proj = nn.Linear(dim, out_dim)

    def forward(self, t):
        e = sinusoidal_embedding(t, self.dim).to(self.proj.weight.dtype)
        return F.silu(self.proj(e))


def _groups(c):
    return 4 if c % 4 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, h, emb):
        y = self.conv1(F.silu(self.norm1(h)))
        y = y + self.temb(emb)[:, :, None, None]
        y = self.conv2(F.silu(self.norm2(y)))
        return y + self.skip(h)


class DenoiserModel(nn.Module):
    """Compact encoder-decoder with per-stage additive timestep conditioning.

    ``x_t`` is standardized per sample, so a state that was z-scored
    (training) or min-max scaled (sampling) looks the same to the network.
    The observation channel is passed through unscaled; it is always in
    [0, 1] and carries the intensity level the output has to match.
    """

    def __init__(self, size=64, width=16, depth=3, emb_dim=64):
        super().__init__()
        if size % (2**depth):
            raise InvalidInputError(f"size {size} not divisible by 2**depth={2**depth}")
        self.size = size
        self.width = width
        self.depth = depth
        self.emb_dim = emb_dim
        self.time = TimestepEmbedding(emb_dim)
        self.stem = nn.Conv2d(2, width, 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        c = width
        for _ in range(depth):
            self.enc.append(ResBlock(c, c, emb_dim))
            self.down.append(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1))
            c *= 2
        self.mid = ResBlock(c, c, emb_dim)
        self.bottleneck_channels = c
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for _ in range(depth):
            self.up.append(nn.ConvTranspose2d(c, c // 2, 2, stride=2))
            c //= 2
            self.dec.append(ResBlock(2 * c, c, emb_dim))
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c + 2, 1, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def config(self):
        return {"size": self.size, "width": self.width, "depth": self.depth, "emb_dim": self.emb_dim}

    def _check(self, x_t, x):
        want = (self.size, self.size)
        if tuple(x_t.shape[-2:]) != want or tuple(x.shape[-2:]) != want:
            raise InvalidInputError(
                f"model expects {want} patterns, got {tuple(x_t.shape[-2:])} and {tuple(x.shape[-2:])}"
            )

    def encode(self, x_t, x, t):
        """Return (bottleneck, skips, emb) for batched ``(B, H, W)`` inputs."""
        self._check(x_t, x)
        mu = x_t.mean(dim=(1, 2), keepdim=True)
        var = x_t.var(dim=(1, 2), keepdim=True, unbiased=False)
        h = torch.stack([(x_t - mu) / torch.sqrt(var + 1e-5), x], dim=1)
        emb = self.time(t)
        skips = [h]
        h = self.stem(h)
        for block, down in zip(self.enc, self.down):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        return h, skips, emb

    def forward(self, x_t, x, t):
        """Predict ``(xhat0, bottleneck)``; ``xhat0`` has shape ``(B, H, W)``."""
        bottleneck, skips, emb = self.encode(x_t, x, t)
        h = bottleneck
        for up, block in zip(self.up, self.dec):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        # the raw inputs reach the output conv directly
        h = torch.cat([F.silu(self.out_norm(h)), skips.pop()], dim=1)
        return self.out(h)[:, 0], bottleneck


class _DownBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        self.skip = nn.Conv2d(c, c, 1, stride=2)

    def forward(self, h):
        return F.silu(self.conv2(F.silu(self.conv1(h))) + self.skip(h))


class QualityHead(nn.Module):
    """Regresses ``(q_hat, r_hat)`` in (0, 1) from a denoiser bottleneck."""

    def __init__(self, in_channels, hidden=(256, 128), dropout=0.1):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = tuple(hidden)
        self.dropout = dropout
        self.norm = nn.InstanceNorm2d(in_channels)
        self.blocks = nn.Sequential(_DownBlock(in_channels), _DownBlock(in_channels))
        h1, h2 = hidden
        self.mlp = nn.Sequential(
            nn.Linear(in_channels, h1),
            nn.BatchNorm1d(h1),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(h1, h2),
            nn.BatchNorm1d(h2),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(h2, 2),
        )

    def config(self):
        return {"in_channels": self.in_channels, "hidden": list(self.hidden), "dropout": self.dropout}

    def logits(self, feat):
        if feat.ndim != 4 or feat.shape[1] != self.in_channels:
            raise InvalidInputError(
                f"head expects (B, {self.in_channels}, H, W) features, got {tuple(feat.shape)}"
            )
        h = self.blocks(self.norm(feat))
        return self.mlp(h.mean(dim=(2, 3)))

    def forward(self, feat):
        return torch.sigmoid(self.logits(feat))


def make_head(model, **kw):
    return QualityHead(model.bottleneck_channels, **kw)


# ---------------------------------------------------------------------------
# numpy-level adapters used by the sampling loops
#
# A denoiser callable maps batched (x_t, x, t) -> (xhat0, features).
# A quality callable maps (features, x_t, x, t) -> (q_hat, r_hat) arrays.


def _dtype_of(module):
    return next(module.parameters()).dtype


class TorchDenoiser:
    def __init__(self, model):
        self.model = model.eval()
        self.dtype = _dtype_of(model)

    @torch.no_grad()
    def __call__(self, x_t, x, t):
        xt = torch.as_tensor(np.asarray(x_t), dtype=self.dtype)
        xx = torch.as_tensor(np.asarray(x), dtype=self.dtype)
        tt = torch.as_tensor(np.asarray(t).reshape(-1), dtype=torch.float64)
        xhat0, feat = self.model(xt, xx, tt)
        return xhat0.double().numpy(), feat

    @torch.no_grad()
    def encode(self, x_t, x, t):
        xt = torch.as_tensor(np.asarray(x_t), dtype=self.dtype)
        xx = torch.as_tensor(np.asarray(x), dtype=self.dtype)
        tt = torch.as_tensor(np.asarray(t).reshape(-1), dtype=torch.float64)
        return self.model.encode(xt, xx, tt)[0]


class TorchQuality:
    def __init__(self, head):
        self.head = head.eval()

    @torch.no_grad()
    def __call__(self, feat, x_t=None, x=None, t=None):
        out = self.head(feat).double().numpy()
        return out[:, 0], out[:, 1]


def as_denoiser(model):
    return TorchDenoiser(model) if isinstance(model, nn.Module) else model


def as_quality(head):
    if head is None:
        return None
    return TorchQuality(head) if isinstance(head, nn.Module) else head


def denoise_forward(model, x_t, x, t):
    """Single-pattern prediction: returns ``(xhat0, bottleneck)``."""
    fn = as_denoiser(model)
    x_t = np.asarray(x_t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_t.shape != x.shape:
        raise InvalidInputError("x_t and x must share a shape")
    xhat0, feat = fn(x_t[None], x[None], np.array([t]))
    return xhat0[0], feat


def quality_forward(head, bottleneck):
    """Return ``(q_hat, r_hat)`` as floats for a single-pattern bottleneck."""
    q, r = as_quality(head)(bottleneck)
    return float(q[0]), float(r[0])


def _key(x):
    return hashlib.sha1(np.ascontiguousarray(x, dtype=np.float32).tobytes()).hexdigest()


class OracleDenoiser:
    """Returns the stored clean pattern for a known observation, ignoring ``x_t`` and ``t``."""

    def __init__(self, samples):
        self._x0 = {}
        self._q = {}
        for s in samples:
            k = _key(s.x)
            self._x0[k] = np.asarray(s.x0, dtype=np.float64)
            self._q[k] = s.q

    def lookup(self, x):
        k = _key(x)
        if k not in self._x0:
            raise KeyError("observation not in oracle dataset")
        return k

    def __call__(self, x_t, x, t):
        x = np.asarray(x)
        out = np.stack([self._x0[self.lookup(xi)] for xi in x])
        return out, np.zeros((len(x), 1, 1, 1))

    def encode(self, x_t, x, t):
        return self(x_t, x, t)[1]


class OracleQuality:
    """True ``q`` and ``r_hat = 1 - (t - 1) / T`` so the loop advances one step per call."""

    def __init__(self, samples, T):
        self.T = T
        self._ref = OracleDenoiser(samples)

    def __call__(self, feat, x_t, x, t):
        x = np.asarray(x)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        q = np.array([self._ref._q[self._ref.lookup(xi)] for xi in x], dtype=np.float64)
        r = np.clip(1.0 - (t - 1.0) / self.T, 0.0, 1.0)
        return q, r


def make_oracle_denoiser(dataset):
    return OracleDenoiser(dataset)


def make_oracle_quality(dataset, T):
    return OracleQuality(dataset, T)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DFRCKPT1"
CKPT_VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8"), torch.int64: (2, "<i8")}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


def _write_state(buf, state):
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        tensor = tensor.detach().cpu().contiguous()
        code, np_dt = _DTYPES[tensor.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", code, tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(tensor.numpy().astype(np_dt, copy=False).tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _read_state(r):
    (n,) = r.unpack("<I")
    state = {}
    for _ in range(n):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODES:
            raise FormatError(f"unknown tensor dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt, np_dt = _CODES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(count * np.dtype(np_dt).itemsize), dtype=np_dt)
        state[name] = torch.from_numpy(arr.reshape(shape).copy())
    return state


def encode_checkpoint(model, head=None, meta=None):
    header = {
        "model": model.config(),
        "head": head.config() if head is not None else None,
        "dtype": str(_dtype_of(model)).replace("torch.", ""),
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(hb)))
    buf.write(hb)
    _write_state(buf, model.state_dict())
    buf.write(struct.pack("<B", head is not None))
    if head is not None:
        _write_state(buf, head.state_dict())
    return buf.getvalue()


def save_checkpoint(model, head, path, meta=None):
    data = encode_checkpoint(model, head, meta)
    with open(path, "wb") as fh:
        fh.write(data)


def _parse(data):
    r = _Reader(data)
    if r.take(8) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, hlen = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen))
    except ValueError as exc:
        raise FormatError("corrupt checkpoint header") from exc
    model_state = _read_state(r)
    (has_head,) = r.unpack("<B")
    head_state = _read_state(r) if has_head else None
    if r.off != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return header, model_state, head_state


def checkpoint_meta(path):
    """Header of a checkpoint: architecture configs and free-form ``meta``."""
    with open(path, "rb") as fh:
        return _parse(fh.read())[0]


def load_checkpoint(path, model=None, head=None):
    """Restore ``(model, head)``; ``head`` is None for denoiser-only checkpoints.

    Passing existing modules loads into them after checking their
    hyperparameters match the file.
    """
    with open(path, "rb") as fh:
        header, model_state, head_state = _parse(fh.read())
    dtype = getattr(torch, header.get("dtype", "float32"))
    if model is None:
        model = DenoiserModel(**header["model"]).to(dtype)
    elif model.config() != header["model"]:
        raise FormatError(f"model config {model.config()} does not match checkpoint {header['model']}")
    _load_into(model, model_state)
    if head_state is None:
        return model.eval(), None
    hcfg = dict(header["head"])
    if head is None:
        head = QualityHead(hcfg["in_channels"], tuple(hcfg["hidden"]), hcfg["dropout"]).to(dtype)
    elif head.config() != header["head"]:
        raise FormatError("head config does not match checkpoint")
    _load_into(head, head_state)
    return model.eval(), head.eval()


def _load_into(module, state):
    own = module.state_dict()
    if set(own) != set(state):
        raise FormatError("checkpoint tensors do not match the architecture")
    for k, v in state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise FormatError(f"shape mismatch for {k}")
    module.load_state_dict(state)


def parameter_checksum(module):
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
