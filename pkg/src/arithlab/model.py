"""Decoder-only transformer in numpy with hand-written reverse-mode gradients."""

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

NEG = -1e9
LN_EPS = 1e-5
INIT_STD = 0.02
_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_MAGIC = b"ALCK"
_VERSION = 1
_DTYPE_TAGS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class ModelError(ValueError):
    """Invalid configuration, input, or checkpoint content."""


class SequenceLengthError(ModelError):
    """A sequence does not fit within max_seq_len."""


class CheckpointError(ModelError):
    """A checkpoint file could not be read."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale model."""

    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ModelError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ModelError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(config):
    """Named tensor shapes in a fixed order (also the init draw order)."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes = {"wte": (v, d), "wpe": (config.max_seq_len, d)}
    for i in range(config.n_layers):
        shapes[f"h{i}.ln1.g"] = (d,)
        shapes[f"h{i}.ln1.b"] = (d,)
        shapes[f"h{i}.attn.wqkv"] = (d, 3 * d)
        shapes[f"h{i}.attn.bqkv"] = (3 * d,)
        shapes[f"h{i}.attn.wo"] = (d, d)
        shapes[f"h{i}.attn.bo"] = (d,)
        shapes[f"h{i}.ln2.g"] = (d,)
        shapes[f"h{i}.ln2.b"] = (d,)
        shapes[f"h{i}.ffn.w1"] = (d, f)
        shapes[f"h{i}.ffn.b1"] = (f,)
        shapes[f"h{i}.ffn.w2"] = (f, d)
        shapes[f"h{i}.ffn.b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["head.w"] = (d, v)
    return shapes


def param_count(config):
    """Closed-form parameter count.

    V·D (token emb) + S·D (position emb) + L·(4·D² + 2·D·F + 9·D + F)
    (per block: qkv 3D²+3D, out proj D²+D, two layer norms 4D, ffn 2DF+F+D)
    + 2·D (final norm) + D·V (untied output projection).
    """
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    per_layer = 4 * d * d + 2 * d * f + 9 * d + f
    return v * d + config.max_seq_len * d + config.n_layers * per_layer + 2 * d + d * v


@dataclass
class ModelCheckpoint:
    """Config plus named parameter tensors, a step counter, and RNG state."""

    config: ModelConfig
    params: dict
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["wte"].dtype

    def param_count(self):
        return sum(int(a.size) for a in self.params.values())

    def validate_finite(self):
        for name, arr in self.params.items():
            if not np.isfinite(arr).all():
                raise ModelError(f"non-finite values in tensor {name}")

    def copy(self):
        return ModelCheckpoint(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            step=self.step,
            rng_state=dict(self.rng_state),
        )


def init_checkpoint(config, seed=0, dtype=np.float32):
    """Draw GPT-style initial weights: normals at std 0.02, scaled residual
    projections, unit layer-norm gains, zero biases."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ModelError(f"unsupported parameter dtype {dtype}")
    rng = np.random.default_rng(seed)
    resid_std = INIT_STD / np.sqrt(2.0 * config.n_layers)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = resid_std if name.endswith(("attn.wo", "ffn.w2")) else INIT_STD
            params[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return ModelCheckpoint(config=config, params=params)


def _layernorm_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    ) * inv
    return dx, dg, db


def _gelu_forward(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(dout, u, t):
    du_inner = _GELU_C * (1.0 + 0.134145 * u * u) * (1.0 - t * t)
    return dout * (0.5 * (1.0 + t) + 0.5 * u * du_inner)


def _softmax(s):
    m = s.max(-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(-1, keepdims=True)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, nh, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


def _check_ids(ids, config):
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ModelError(
            f"token ids must be in [0, {config.vocab_size}), got range "
            f"[{int(ids.min())}, {int(ids.max())}]"
        )


def _forward(ckpt, ids, rng=None):
    """Full forward pass over (B, T) ids; returns logits and a backward cache."""
    cfg = ckpt.config
    p = ckpt.params
    b, t = ids.shape
    if t == 0:
        raise ModelError("empty sequence")
    if t > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    _check_ids(ids, cfg)
    dt = ckpt.dtype
    drop = cfg.dropout

    def mask_like(shape):
        if drop == 0.0:
            return None
        if rng is None:
            raise ModelError("dropout > 0 requires an rng")
        return (rng.random(shape) >= drop).astype(dt) / dt.type(1.0 - drop)

    x = p["wte"][ids] + p["wpe"][:t]
    emb_mask = mask_like(x.shape)
    if emb_mask is not None:
        x = x * emb_mask
    causal = np.triu(np.full((t, t), NEG, dtype=dt), k=1)
    scale = 1.0 / np.sqrt(cfg.d_head)
    layers = []
    for i in range(cfg.n_layers):
        pre = x
        a, ln1c = _layernorm_forward(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
        qkv = a @ p[f"h{i}.attn.wqkv"] + p[f"h{i}.attn.bqkv"]
        q, k, v = (
            _split_heads(qkv[..., j * cfg.d_model : (j + 1) * cfg.d_model], cfg.n_heads)
            for j in range(3)
        )
        att = q @ k.transpose(0, 1, 3, 2) * scale + causal
        probs = _softmax(att)
        y = _merge_heads(probs @ v)
        attn_out = y @ p[f"h{i}.attn.wo"] + p[f"h{i}.attn.bo"]
        attn_mask = mask_like(attn_out.shape)
        if attn_mask is not None:
            attn_out = attn_out * attn_mask
        x = pre + attn_out
        mid = x
        m, ln2c = _layernorm_forward(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        u = m @ p[f"h{i}.ffn.w1"] + p[f"h{i}.ffn.b1"]
        h, tanh_u = _gelu_forward(u)
        ffn_out = h @ p[f"h{i}.ffn.w2"] + p[f"h{i}.ffn.b2"]
        ffn_mask = mask_like(ffn_out.shape)
        if ffn_mask is not None:
            ffn_out = ffn_out * ffn_mask
        x = mid + ffn_out
        layers.append(
            {
                "a": a, "ln1c": ln1c, "q": q, "k": k, "v": v, "probs": probs,
                "y": y, "attn_mask": attn_mask, "m": m, "ln2c": ln2c,
                "u": u, "tanh_u": tanh_u, "h": h, "ffn_mask": ffn_mask,
            }
        )
    f, lnfc = _layernorm_forward(x, p["lnf.g"], p["lnf.b"])
    logits = f @ p["head.w"]
    cache = {
        "ids": ids, "emb_mask": emb_mask, "layers": layers, "f": f,
        "lnfc": lnfc, "scale": scale,
    }
    return logits, cache


def _backward(ckpt, cache, dlogits):
    """Gradients for every parameter and for the embedding-sum input."""
    cfg = ckpt.config
    p = ckpt.params
    ids = cache["ids"]
    b, t = ids.shape
    d = cfg.d_model
    scale = cache["scale"]
    grads = {}

    f2 = cache["f"].reshape(b * t, d)
    dlog2 = dlogits.reshape(b * t, cfg.vocab_size)
    grads["head.w"] = f2.T @ dlog2
    df = (dlog2 @ p["head.w"].T).reshape(b, t, d)
    dx, grads["lnf.g"], grads["lnf.b"] = _layernorm_backward(df, p["lnf.g"], cache["lnfc"])

    for i in reversed(range(cfg.n_layers)):
        c = cache["layers"][i]
        dffn_out = dx if c["ffn_mask"] is None else dx * c["ffn_mask"]
        d2 = dffn_out.reshape(b * t, d)
        grads[f"h{i}.ffn.w2"] = c["h"].reshape(b * t, cfg.d_ff).T @ d2
        grads[f"h{i}.ffn.b2"] = d2.sum(0)
        dh = dffn_out @ p[f"h{i}.ffn.w2"].T
        du = _gelu_backward(dh, c["u"], c["tanh_u"])
        du2 = du.reshape(b * t, cfg.d_ff)
        grads[f"h{i}.ffn.w1"] = c["m"].reshape(b * t, d).T @ du2
        grads[f"h{i}.ffn.b1"] = du2.sum(0)
        dm = du @ p[f"h{i}.ffn.w1"].T
        dmid, grads[f"h{i}.ln2.g"], grads[f"h{i}.ln2.b"] = _layernorm_backward(
            dm, p[f"h{i}.ln2.g"], c["ln2c"]
        )
        dx = dx + dmid

        dattn_out = dx if c["attn_mask"] is None else dx * c["attn_mask"]
        d2 = dattn_out.reshape(b * t, d)
        grads[f"h{i}.attn.wo"] = c["y"].reshape(b * t, d).T @ d2
        grads[f"h{i}.attn.bo"] = d2.sum(0)
        dy = _split_heads(dattn_out @ p[f"h{i}.attn.wo"].T, cfg.n_heads)
        dprobs = dy @ c["v"].transpose(0, 1, 3, 2)
        dv = c["probs"].transpose(0, 1, 3, 2) @ dy
        datt = c["probs"] * (dprobs - (dprobs * c["probs"]).sum(-1, keepdims=True))
        dq = datt @ c["k"] * scale
        dk = datt.transpose(0, 1, 3, 2) @ c["q"] * scale
        dqkv = np.concatenate(
            [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1
        )
        dqkv2 = dqkv.reshape(b * t, 3 * d)
        grads[f"h{i}.attn.wqkv"] = c["a"].reshape(b * t, d).T @ dqkv2
        grads[f"h{i}.attn.bqkv"] = dqkv2.sum(0)
        da = dqkv @ p[f"h{i}.attn.wqkv"].T
        dpre, grads[f"h{i}.ln1.g"], grads[f"h{i}.ln1.b"] = _layernorm_backward(
            da, p[f"h{i}.ln1.g"], c["ln1c"]
        )
        dx = dx + dpre

    dx0 = dx if cache["emb_mask"] is None else dx * cache["emb_mask"]
    dwte = np.zeros_like(p["wte"])
    np.add.at(dwte, ids.reshape(-1), dx0.reshape(b * t, d))
    grads["wte"] = dwte
    dwpe = np.zeros_like(p["wpe"])
    dwpe[:t] = dx0.sum(0)
    grads["wpe"] = dwpe
    return grads, dx0


def forward(ckpt, ids):
    """Logits for a single (T,) or batched (B, T) id sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ModelError("ids must be a 1-D or 2-D integer array")
    logits, _ = _forward(ckpt, ids)
    return logits[0] if single else logits


def loss_and_grads(ckpt, batch, pad_id, rng=None):
    """Mean next-token cross-entropy over non-pad targets, plus all gradients.

    Sequences are right-padded; with causal attention a non-pad position can
    never see a pad, so no key mask is needed.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ModelError("batch must be a non-empty (B, T) id matrix")
    if batch.shape[1] < 2:
        raise ModelError("sequences must hold at least two tokens")
    inputs = batch[:, :-1]
    targets = batch[:, 1:]
    mask = targets != pad_id
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ModelError("no unmasked targets in batch")
    logits, cache = _forward(ckpt, inputs, rng)
    m = logits.max(-1, keepdims=True)
    z = np.exp(logits - m)
    sz = z.sum(-1, keepdims=True)
    bi, ti = np.nonzero(mask)
    tv = targets[bi, ti]
    logprob = (logits[bi, ti, tv] - m[bi, ti, 0]) - np.log(sz[bi, ti, 0])
    loss = -float(logprob.astype(np.float64).sum()) / n_valid
    dlogits = z / sz
    dlogits[bi, ti, tv] -= 1.0
    dlogits *= mask[..., None].astype(dlogits.dtype) / n_valid
    grads, _ = _backward(ckpt, cache, dlogits)
    return loss, grads


def saliency_scores(ckpt, ids, position, target_id=None):
    """Influence of each preceding token on the token generated at position.

    Backpropagates the generated token's logit to the embedding-sum inputs,
    takes per-token L2 norms, and normalizes them to sum to 1 (uniform if the
    gradient vanishes identically).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ModelError("ids must be a 1-D sequence")
    if not 1 <= position < ids.shape[0]:
        raise ModelError(
            f"generated position {position} out of range [1, {ids.shape[0] - 1}]"
        )
    target = int(ids[position]) if target_id is None else int(target_id)
    if not 0 <= target < ckpt.config.vocab_size:
        raise ModelError(f"target id {target} out of vocabulary")
    prefix = ids[None, :position]
    logits, cache = _forward(ckpt, prefix)
    dlogits = np.zeros_like(logits)
    dlogits[0, position - 1, target] = 1.0
    _, dx0 = _backward(ckpt, cache, dlogits)
    norms = np.sqrt((dx0[0].astype(np.float64) ** 2).sum(-1))
    total = norms.sum()
    if total == 0.0:
        return np.full(position, 1.0 / position)
    return norms / total


class DecodeSession:
    """Incremental decoding with preallocated per-layer key/value caches.

    All prompts in the batch must share one length; finished rows are the
    caller's concern. Inference ignores dropout.
    """

    def __init__(self, ckpt, prompts):
        prompts = np.asarray(prompts, dtype=np.int64)
        if prompts.ndim == 1:
            prompts = prompts[None, :]
        if prompts.ndim != 2 or prompts.shape[1] == 0:
            raise ModelError("prompts must be a non-empty (B, T) id matrix")
        cfg = ckpt.config
        if prompts.shape[1] > cfg.max_seq_len:
            raise SequenceLengthError(
                f"prompt length {prompts.shape[1]} exceeds max_seq_len {cfg.max_seq_len}"
            )
        _check_ids(prompts, cfg)
        self.ckpt = ckpt
        self.batch_size = prompts.shape[0]
        dt = ckpt.dtype
        shape = (self.batch_size, cfg.n_heads, cfg.max_seq_len, cfg.d_head)
        self._k = [np.zeros(shape, dtype=dt) for _ in range(cfg.n_layers)]
        self._v = [np.zeros(shape, dtype=dt) for _ in range(cfg.n_layers)]
        self.t = 0
        self.last_logits = self._prompt_pass(prompts)

    def _block_tail(self, p, i, x):
        mid = x
        m, _ = _layernorm_forward(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        u = m @ p[f"h{i}.ffn.w1"] + p[f"h{i}.ffn.b1"]
        h, _ = _gelu_forward(u)
        return mid + h @ p[f"h{i}.ffn.w2"] + p[f"h{i}.ffn.b2"]

    def _prompt_pass(self, prompts):
        cfg = self.ckpt.config
        p = self.ckpt.params
        b, t = prompts.shape
        dt = self.ckpt.dtype
        scale = 1.0 / np.sqrt(cfg.d_head)
        causal = np.triu(np.full((t, t), NEG, dtype=dt), k=1)
        x = p["wte"][prompts] + p["wpe"][:t]
        for i in range(cfg.n_layers):
            pre = x
            a, _ = _layernorm_forward(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            qkv = a @ p[f"h{i}.attn.wqkv"] + p[f"h{i}.attn.bqkv"]
            q, k, v = (
                _split_heads(qkv[..., j * cfg.d_model : (j + 1) * cfg.d_model], cfg.n_heads)
                for j in range(3)
            )
            self._k[i][:, :, :t] = k
            self._v[i][:, :, :t] = v
            probs = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + causal)
            y = _merge_heads(probs @ v)
            x = self._block_tail(p, i, pre + y @ p[f"h{i}.attn.wo"] + p[f"h{i}.attn.bo"])
        self.t = t
        f, _ = _layernorm_forward(x[:, -1:, :], p["lnf.g"], p["lnf.b"])
        return (f @ p["head.w"])[:, 0, :]

    def step(self, next_ids):
        """Append one token per row; logits for the new position, shape (B, V)."""
        cfg = self.ckpt.config
        p = self.ckpt.params
        next_ids = np.asarray(next_ids, dtype=np.int64).reshape(-1)
        if next_ids.shape[0] != self.batch_size:
            raise ModelError(f"expected {self.batch_size} ids, got {next_ids.shape[0]}")
        _check_ids(next_ids, cfg)
        t = self.t
        if t >= cfg.max_seq_len:
            raise SequenceLengthError(f"cannot extend past max_seq_len {cfg.max_seq_len}")
        scale = 1.0 / np.sqrt(cfg.d_head)
        x = p["wte"][next_ids][:, None, :] + p["wpe"][t]
        for i in range(cfg.n_layers):
            pre = x
            a, _ = _layernorm_forward(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            qkv = a @ p[f"h{i}.attn.wqkv"] + p[f"h{i}.attn.bqkv"]
            q, k, v = (
                _split_heads(qkv[..., j * cfg.d_model : (j + 1) * cfg.d_model], cfg.n_heads)
                for j in range(3)
            )
            self._k[i][:, :, t : t + 1] = k
            self._v[i][:, :, t : t + 1] = v
            keys = self._k[i][:, :, : t + 1]
            values = self._v[i][:, :, : t + 1]
            probs = _softmax(q @ keys.transpose(0, 1, 3, 2) * scale)
            y = _merge_heads(probs @ values)
            x = self._block_tail(p, i, pre + y @ p[f"h{i}.attn.wo"] + p[f"h{i}.attn.bo"])
        self.t = t + 1
        f, _ = _layernorm_forward(x, p["lnf.g"], p["lnf.b"])
        return (f @ p["head.w"])[:, 0, :]


def save_checkpoint(ckpt, path):
    """Atomic write: magic, version, JSON header with tensor index, raw tensors."""
    ckpt.validate_finite()
    expected = param_shapes(ckpt.config)
    if set(ckpt.params) != set(expected):
        raise ModelError("checkpoint tensors do not match the config's parameter set")
    index = []
    blobs = []
    offset = 0
    for name in expected:
        arr = np.ascontiguousarray(ckpt.params[name])
        if arr.dtype == np.float32:
            tag = "<f4"
        elif arr.dtype == np.float64:
            tag = "<f8"
        else:
            raise ModelError(f"tensor {name} has unsupported dtype {arr.dtype}")
        blob = arr.astype(tag, copy=False).tobytes()
        index.append(
            {"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "step": int(ckpt.step),
            "rng_state": ckpt.rng_state,
            "tensors": index,
        },
        sort_keys=True,
    ).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _VERSION))
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint header: {exc}") from exc
    base = 16 + header_len
    expected = param_shapes(config)
    params = {}
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected or shape != expected[name]:
            raise CheckpointError(f"{path}: unexpected tensor {name} with shape {shape}")
        dtype = _DTYPE_TAGS.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown tensor dtype {entry['dtype']!r}")
        count = int(np.prod(shape))
        start = base + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(raw[start:end], dtype=dtype).reshape(shape).copy()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise CheckpointError(f"{path}: missing tensors {missing}")
    ckpt = ModelCheckpoint(
        config=config,
        params=params,
        step=int(header.get("step", 0)),
        rng_state=dict(header.get("rng_state", {})),
    )
    ckpt.validate_finite()
    return ckpt
