"""GPT-style causal decoder built on the autodiff engine.

Pre-norm residual blocks, learned positional embeddings, optional weight
tying between the token embedding and the LM head. One position's token
embedding can be replaced by an externally supplied vector (``overrides``),
which is how the continuous difficulty slot is injected downstream.

Checkpoints are a directory holding ``manifest.json`` (config, named tensor
index, format version, seed, caller extras) plus ``weights.bin``, a raw
little-endian f64 blob. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT_VERSION = 1

Override = tuple[int, "np.ndarray | Tensor"]


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_seq: int = 256
    dropout: float = 0.0
    seed: int = 0
    tie_lm_head: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class Model:
    """Config plus an insertion-ordered name -> Tensor parameter map."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def init_model(config: ModelConfig) -> Model:
    """Deterministic init from config.seed: scaled normals for weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    d, ff = config.d_model, config.d_ff
    std = 0.02
    # residual-branch output projections get the GPT-2 depth scaling
    res_std = std / math.sqrt(2.0 * config.n_layers)

    def normal(shape, s):
        return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {}
    params["tok_emb"] = normal((config.vocab_size, d), std)
    params["pos_emb"] = normal((config.max_seq, d), std)
    for i in range(config.n_layers):
        p = f"h{i}."
        params[p + "ln1.g"] = ones((d,))
        params[p + "ln1.b"] = zeros((d,))
        for w in ("wq", "wk", "wv"):
            params[p + "attn." + w] = normal((d, d), std)
        params[p + "attn.wo"] = normal((d, d), res_std)
        for b in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + b] = zeros((d,))
        params[p + "ln2.g"] = ones((d,))
        params[p + "ln2.b"] = zeros((d,))
        params[p + "mlp.w1"] = normal((d, ff), std)
        params[p + "mlp.b1"] = zeros((ff,))
        params[p + "mlp.w2"] = normal((ff, d), res_std)
        params[p + "mlp.b2"] = zeros((d,))
    params["ln_f.g"] = ones((d,))
    params["ln_f.b"] = zeros((d,))
    if not config.tie_lm_head:
        params["lm_head"] = normal((d, config.vocab_size), std)
    return Model(config, params)


_MASK_CACHE: dict[int, np.ndarray] = {}
_ARANGE_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    m = _MASK_CACHE.get(t)
    if m is None:
        m = np.triu(np.full((t, t), -1e9), k=1)
        _MASK_CACHE[t] = m
    return m


def _positions(t: int) -> np.ndarray:
    a = _ARANGE_CACHE.get(t)
    if a is None:
        a = np.arange(t, dtype=np.int64)
        _ARANGE_CACHE[t] = a
    return a


def _dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return ad.mul(x, Tensor(keep))


def forward(model: Model, tokens: Sequence[int],
            overrides: Sequence[Override] | None = None,
            dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Logits (T, vocab); logits[t] depends only on tokens[:t+1] and earlier overrides."""
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    t_len = ids.shape[0]
    if t_len < 1:
        raise SequenceLengthError("forward needs at least one token")
    if t_len > cfg.max_seq:
        raise SequenceLengthError(f"sequence length {t_len} exceeds max_seq {cfg.max_seq}")
    prm = model.params

    x = ad.embedding_rows(prm["tok_emb"], ids)
    if overrides:
        for pos, vec in overrides:
            if not 0 <= pos < t_len:
                raise IndexError(f"override position {pos} outside sequence of length {t_len}")
            v = vec if isinstance(vec, Tensor) else Tensor(vec)
            if v.shape != (cfg.d_model,):
                raise ConfigError(
                    f"override vector shape {v.shape} != ({cfg.d_model},)")
            x = ad.replace_row(x, pos, v)
    x = ad.add(x, ad.embedding_rows(prm["pos_emb"], _positions(t_len)))

    drop = cfg.dropout > 0.0 and dropout_rng is not None
    if drop:
        x = _dropout(x, cfg.dropout, dropout_rng)

    mask = Tensor(_causal_mask(t_len))
    inv_sqrt_hd = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a = ad.layer_norm(x, prm[p + "ln1.g"], prm[p + "ln1.b"])
        q = ad.add(ad.matmul(a, prm[p + "attn.wq"]), prm[p + "attn.bq"])
        k = ad.add(ad.matmul(a, prm[p + "attn.wk"]), prm[p + "attn.bk"])
        v = ad.add(ad.matmul(a, prm[p + "attn.wv"]), prm[p + "attn.bv"])
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            att = ad.add(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt_hd), mask)
            att = ad.softmax_rows(att)
            heads.append(ad.matmul(att, vh))
        o = heads[0] if len(heads) == 1 else ad.concat_cols(heads)
        o = ad.add(ad.matmul(o, prm[p + "attn.wo"]), prm[p + "attn.bo"])
        if drop:
            o = _dropout(o, cfg.dropout, dropout_rng)
        x = ad.add(x, o)

        m = ad.layer_norm(x, prm[p + "ln2.g"], prm[p + "ln2.b"])
        m = ad.gelu(ad.add(ad.matmul(m, prm[p + "mlp.w1"]), prm[p + "mlp.b1"]))
        m = ad.add(ad.matmul(m, prm[p + "mlp.w2"]), prm[p + "mlp.b2"])
        if drop:
            m = _dropout(m, cfg.dropout, dropout_rng)
        x = ad.add(x, m)

    x = ad.layer_norm(x, prm["ln_f.g"], prm["ln_f.b"])
    if cfg.tie_lm_head:
        return ad.matmul(x, ad.transpose(prm["tok_emb"]))
    return ad.matmul(x, prm["lm_head"])


def sequence_loss(model: Model, tokens: Sequence[int], mask: Sequence[bool],
                  overrides: Sequence[Override] | None = None,
                  dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Next-token cross-entropy, averaged over the transitions mask selects.

    mask has length T-1; mask[t] marks the transition whose logits sit at
    position t and whose target is tokens[t+1].
    """
    ids = np.asarray(tokens, dtype=np.int64)
    t_len = ids.shape[0]
    if t_len < 2:
        raise SequenceLengthError("sequence_loss needs at least two tokens")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (t_len - 1,):
        raise ad.ShapeError(f"mask must have length {t_len - 1}, got {m.shape}")
    logits = forward(model, ids, overrides, dropout_rng)
    targets = np.zeros(t_len, dtype=np.int64)
    targets[:-1] = ids[1:]
    full_mask = np.zeros(t_len, dtype=bool)
    full_mask[:-1] = m
    return ad.cross_entropy_masked(logits, targets, full_mask)


def next_token_distribution(model: Model, prefix: Sequence[int],
                            overrides: Sequence[Override] | None = None) -> np.ndarray:
    """Softmax of the final position's logits; plain numpy, no tape."""
    with ad.no_grad():
        logits = forward(model, prefix, overrides).data[-1]
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# checkpoint io


def write_tensors(ckpt_dir: str | Path, tensors: dict[str, np.ndarray],
                  manifest_fields: dict) -> None:
    """Serialize named arrays as manifest.json + little-endian f64 blob."""
    ckpt = Path(ckpt_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        # ascontiguousarray would turn 0-d scalars into shape (1,)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        raw = arr.astype("<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {"format_version": CHECKPOINT_FORMAT_VERSION, "tensors": index}
    manifest.update(manifest_fields)
    (ckpt / "weights.bin").write_bytes(b"".join(chunks))
    (ckpt / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def read_tensors(ckpt_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    ckpt = Path(ckpt_dir)
    manifest_path = ckpt / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {manifest.get('format_version')}")
    blob = (ckpt / "weights.bin").read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).copy()
    return tensors, manifest


def save_model(ckpt_dir: str | Path, model: Model, extra: dict | None = None) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    fields = {"config": asdict(model.config), "seed": model.config.seed,
              "extra": extra or {}}
    write_tensors(ckpt_dir, tensors, fields)


def load_model(ckpt_dir: str | Path) -> tuple[Model, dict]:
    tensors, manifest = read_tensors(ckpt_dir)
    config = ModelConfig(**manifest["config"])
    template = init_model(config)
    params: dict[str, Tensor] = {}
    for name in template.params:
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor '{name}'")
        if tensors[name].shape != template.params[name].shape:
            raise CheckpointError(
                f"tensor '{name}' has shape {tensors[name].shape}, "
                f"expected {template.params[name].shape}")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return Model(config, params), manifest.get("extra", {})
