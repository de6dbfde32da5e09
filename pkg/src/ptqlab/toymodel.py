"""Byte-level pre-LN decoder-only transformer used as a stand-in LLM family.

Weights live in a plain ``dict[str, np.ndarray]`` inside :class:`ToyCheckpoint`.
Training runs in float32 torch; evaluation, gradients and Hessian-vector
products upcast everything to float64 so finite-difference checks are crisp.

Linear layers follow the ``(out_features, in_features)`` convention and have
no biases. The six matrices per block (``Wq, Wk, Wv, Wo, Wmlp_in,
Wmlp_out``) form the quantizable set; embeddings, unembedding and layer
norms stay in full precision.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

VOCAB = 256
QUANTIZABLE = ("Wq", "Wk", "Wv", "Wo", "Wmlp_in", "Wmlp_out")
MIN_CORPUS_BYTES = 100_000
EVAL_BATCH = 64
MANIFEST = "manifest.json"
BLOB = "weights.bin"


@dataclass(frozen=True)
class ToyConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ctx_len: int = 64
    mlp_ratio: int = 4
    vocab: int = VOCAB

    def __post_init__(self) -> None:
        if self.vocab != VOCAB:
            raise ValueError("the toy model is byte level; vocab must be 256")
        if min(self.d_model, self.n_layers, self.n_heads, self.ctx_len, self.mlp_ratio) <= 0:
            raise ValueError(f"config sizes must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


PRESETS = {
    "s1": ToyConfig(d_model=32, n_layers=1, n_heads=2),
    "s2": ToyConfig(d_model=48, n_layers=2, n_heads=2),
    "s3": ToyConfig(d_model=64, n_layers=2, n_heads=2),
    "s4": ToyConfig(d_model=96, n_layers=3, n_heads=3),
}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 100
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    init_std: float = 0.02


@dataclass
class ToyCheckpoint:
    config: ToyConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def quantizable_names(self) -> list[str]:
        return quantizable_names(self.config)

    @property
    def n_quantizable(self) -> int:
        return sum(self.tensors[n].size for n in self.quantizable_names())

    def flatten(self) -> np.ndarray:
        """Quantizable weights concatenated (row-major, canonical order) in float64."""
        return np.concatenate(
            [np.asarray(self.tensors[n], dtype=np.float64).ravel() for n in self.quantizable_names()]
        )

    def config_hash(self) -> str:
        payload = json.dumps({"config": asdict(self.config), "seed": self.meta.get("seed")}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    @property
    def model_id(self) -> str:
        return self.meta.get("model_id") or f"toy-d{self.config.d_model}-l{self.config.n_layers}"


def quantizable_names(config: ToyConfig) -> list[str]:
    return [f"layers.{l}.{m}" for l in range(config.n_layers) for m in QUANTIZABLE]


def tensor_shapes(config: ToyConfig) -> dict[str, tuple[int, ...]]:
    d, hidden = config.d_model, config.d_model * config.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (VOCAB, d),
        "pos_emb": (config.ctx_len, d),
    }
    for l in range(config.n_layers):
        p = f"layers.{l}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for m in ("Wq", "Wk", "Wv", "Wo"):
            shapes[p + m] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "Wmlp_in"] = (hidden, d)
        shapes[p + "Wmlp_out"] = (d, hidden)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["unemb"] = (VOCAB, d)
    return shapes


def init_weights(config: ToyConfig, seed: int, std: float = 0.02) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith(".g"):
            out[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            s = std / math.sqrt(2 * config.n_layers) if name.endswith(("Wo", "Wmlp_out")) else std
            out[name] = (rng.standard_normal(shape) * s).astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class TokenDataset:
    """Non-overlapping byte windows of ``ctx_len + 1`` split into train/valid."""

    train: np.ndarray
    valid: np.ndarray
    ctx_len: int
    seed: int

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.valid

    def calibration(self, n: int = 128) -> np.ndarray:
        """The first ``n`` training sequences (in the seeded split order)."""
        return self.train[:n]


def make_dataset(
    corpus: bytes, ctx_len: int, seed: int = 0, valid_fraction: float = 0.1, max_valid: int = 256
) -> TokenDataset:
    """Cut ``corpus`` into windows and deterministically assign them to splits.

    The validation split holds ``valid_fraction`` of the windows, capped at
    ``max_valid`` windows to keep repeated evaluations cheap.
    """
    data = np.frombuffer(bytes(corpus), dtype=np.uint8)
    n = data.size // (ctx_len + 1)
    if n < 2:
        raise ValueError("corpus too small for two sequences")
    windows = data[: n * (ctx_len + 1)].reshape(n, ctx_len + 1)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = max(1, min(max_valid, int(round(n * valid_fraction))))
    return TokenDataset(
        train=windows[order[n_valid:]].copy(),
        valid=windows[np.sort(order[:n_valid])].copy(),
        ctx_len=ctx_len,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _layer_norm(x: torch.Tensor, g: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), g, b, eps=1e-5)


def forward(
    params: dict[str, torch.Tensor],
    tokens: torch.Tensor,
    config: ToyConfig,
    capture: Callable[[str, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Logits for ``tokens`` of shape ``(batch, T)``.

    ``capture(layer_name, inputs)`` is called with the input activations of
    every quantizable matrix, shaped ``(batch * T, in_features)``.
    """
    bsz, t = tokens.shape
    h_dim = config.d_model // config.n_heads
    x = params["tok_emb"][tokens] + params["pos_emb"][:t]
    mask = torch.triu(torch.ones(t, t, dtype=torch.bool), diagonal=1)
    for l in range(config.n_layers):
        p = f"layers.{l}."
        h = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        if capture is not None:
            flat = h.reshape(-1, config.d_model)
            for m in ("Wq", "Wk", "Wv"):
                capture(p + m, flat)
        q = F.linear(h, params[p + "Wq"]).view(bsz, t, config.n_heads, h_dim).transpose(1, 2)
        k = F.linear(h, params[p + "Wk"]).view(bsz, t, config.n_heads, h_dim).transpose(1, 2)
        v = F.linear(h, params[p + "Wv"]).view(bsz, t, config.n_heads, h_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(h_dim)
        att = torch.softmax(att.masked_fill(mask, float("-inf")), dim=-1)
        a = (att @ v).transpose(1, 2).reshape(bsz, t, config.d_model)
        if capture is not None:
            capture(p + "Wo", a.reshape(-1, config.d_model))
        x = x + F.linear(a, params[p + "Wo"])
        h = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        if capture is not None:
            capture(p + "Wmlp_in", h.reshape(-1, config.d_model))
        u = F.gelu(F.linear(h, params[p + "Wmlp_in"]))
        if capture is not None:
            capture(p + "Wmlp_out", u.reshape(-1, u.shape[-1]))
        x = x + F.linear(u, params[p + "Wmlp_out"])
    x = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return F.linear(x, params["unemb"])


def _torch_params(
    tensors: dict[str, np.ndarray], dtype: torch.dtype, requires_grad: tuple[str, ...] = ()
) -> dict[str, torch.Tensor]:
    out = {}
    for name, value in tensors.items():
        t = torch.tensor(np.asarray(value), dtype=dtype)
        if name in requires_grad:
            t.requires_grad_(True)
        out[name] = t
    return out


def _sequence_nll_sums(params, seqs: np.ndarray, config: ToyConfig) -> torch.Tensor:
    tokens = torch.from_numpy(seqs.astype(np.int64))
    logits = forward(params, tokens[:, :-1], config)
    nll = F.cross_entropy(
        logits.reshape(-1, VOCAB), tokens[:, 1:].reshape(-1), reduction="none"
    ).view(seqs.shape[0], -1)
    return nll.sum(dim=1)


def _check_split(seqs: np.ndarray, config: ToyConfig) -> np.ndarray:
    seqs = np.asarray(seqs)
    if seqs.ndim != 2 or seqs.shape[0] == 0:
        raise ValueError("empty or malformed dataset split")
    if seqs.shape[1] - 1 > config.ctx_len:
        raise ValueError(f"sequences longer than ctx_len={config.ctx_len}")
    return seqs


def eval_nll(ckpt: ToyCheckpoint, seqs: np.ndarray) -> float:
    """Mean next-token NLL in nats over every token of ``seqs``.

    Per-sequence sums are reduced in a fixed batch layout and accumulated in
    sequence order, so results are reproducible to the last bit.
    """
    seqs = _check_split(seqs, ckpt.config)
    params = _torch_params(ckpt.tensors, torch.float64)
    total = 0.0
    with torch.no_grad():
        for start in range(0, seqs.shape[0], EVAL_BATCH):
            sums = _sequence_nll_sums(params, seqs[start : start + EVAL_BATCH], ckpt.config)
            for s in sums.tolist():
                total += s
    return total / (seqs.shape[0] * (seqs.shape[1] - 1))


def grad_nll(ckpt: ToyCheckpoint, seqs: np.ndarray) -> np.ndarray:
    """Analytic gradient of mean NLL w.r.t. the flattened quantizable weights."""
    seqs = _check_split(seqs, ckpt.config)
    names = ckpt.quantizable_names()
    params = _torch_params(ckpt.tensors, torch.float64, requires_grad=tuple(names))
    n_tokens = seqs.shape[0] * (seqs.shape[1] - 1)
    for start in range(0, seqs.shape[0], EVAL_BATCH):
        sums = _sequence_nll_sums(params, seqs[start : start + EVAL_BATCH], ckpt.config)
        (sums.sum() / n_tokens).backward()
    return np.concatenate([params[n].grad.numpy().ravel() for n in names])


def fd_hvp(grad_fn: Callable[[np.ndarray], np.ndarray], w: np.ndarray, v: np.ndarray, rel_eps: float = 1e-4) -> np.ndarray:
    """Hessian-vector product by central differences of gradients.

    ``(g(w + eps v/|v|) - g(w - eps v/|v|)) / (2 eps) * |v|`` with
    ``eps = rel_eps * |w|``.
    """
    v = np.asarray(v, dtype=np.float64)
    v_norm = float(np.linalg.norm(v))
    if not v_norm > 1e-20:
        raise ValueError("Hessian-vector product needs a nonzero direction")
    w_norm = float(np.linalg.norm(w))
    eps = rel_eps * (w_norm if w_norm > 0 else 1.0)
    unit = v / v_norm
    return (grad_fn(w + eps * unit) - grad_fn(w - eps * unit)) / (2 * eps) * v_norm


def hvp(ckpt: ToyCheckpoint, v: np.ndarray, seqs: np.ndarray, rel_eps: float = 1e-4) -> np.ndarray:
    w = ckpt.flatten()
    if v.shape != w.shape:
        raise ValueError(f"direction has length {v.size}, expected {w.size}")
    return fd_hvp(lambda x: grad_nll(apply_weights(ckpt, x), seqs), w, v, rel_eps)


def apply_weights(ckpt: ToyCheckpoint, w: np.ndarray) -> ToyCheckpoint:
    """Copy of ``ckpt`` with the quantizable set replaced by the flat vector ``w``.

    Replaced tensors are kept in float64; everything else is shared.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size != ckpt.n_quantizable:
        raise ValueError(f"expected {ckpt.n_quantizable} weights, got {w.size}")
    tensors = dict(ckpt.tensors)
    offset = 0
    for name in ckpt.quantizable_names():
        shape = ckpt.tensors[name].shape
        size = int(np.prod(shape))
        tensors[name] = w[offset : offset + size].reshape(shape)
        offset += size
    return ToyCheckpoint(ckpt.config, tensors, dict(ckpt.meta))


def replace_tensors(ckpt: ToyCheckpoint, updates: dict[str, np.ndarray]) -> ToyCheckpoint:
    tensors = dict(ckpt.tensors)
    for name, value in updates.items():
        if tensors[name].shape != value.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {tensors[name].shape}")
        tensors[name] = np.asarray(value, dtype=np.float64)
    return ToyCheckpoint(ckpt.config, tensors, dict(ckpt.meta))


def capture_inputs(ckpt: ToyCheckpoint, seqs: np.ndarray, on_batch: Callable[[str, np.ndarray], None]) -> None:
    """Stream each quantizable layer's float64 input activations to ``on_batch``."""
    seqs = _check_split(seqs, ckpt.config)
    params = _torch_params(ckpt.tensors, torch.float64)

    def hook(name: str, x: torch.Tensor) -> None:
        on_batch(name, x.detach().numpy())

    with torch.no_grad():
        for start in range(0, seqs.shape[0], EVAL_BATCH):
            tokens = torch.from_numpy(seqs[start : start + EVAL_BATCH, :-1].astype(np.int64))
            forward(params, tokens, ckpt.config, capture=hook)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


def train(
    corpus: bytes,
    config: ToyConfig = ToyConfig(),
    seed: int = 0,
    train_config: TrainConfig = TrainConfig(),
    dataset: TokenDataset | None = None,
) -> ToyCheckpoint:
    """Adam-train a toy model on ``corpus``; deterministic given ``seed``."""
    if len(corpus) < MIN_CORPUS_BYTES:
        raise ValueError(f"corpus has {len(corpus)} bytes; need at least {MIN_CORPUS_BYTES}")
    ds = dataset if dataset is not None else make_dataset(corpus, config.ctx_len, seed)
    torch.manual_seed(seed)
    params = {
        k: torch.tensor(v, requires_grad=True)
        for k, v in init_weights(config, seed, train_config.init_std).items()
    }
    opt = torch.optim.Adam(list(params.values()), lr=train_config.lr)
    rng = np.random.default_rng([seed, 1])
    tc = train_config
    loss_value = math.log(VOCAB)
    for step in range(tc.steps):
        if step < tc.warmup:
            lr = tc.lr * (step + 1) / tc.warmup
        else:
            frac = (step - tc.warmup) / max(1, tc.steps - tc.warmup)
            lr = tc.lr * (tc.min_lr_ratio + (1 - tc.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))
        for group in opt.param_groups:
            group["lr"] = lr
        batch = ds.train[rng.integers(0, ds.train.shape[0], tc.batch_size)]
        tokens = torch.from_numpy(batch.astype(np.int64))
        logits = forward(params, tokens[:, :-1], config)
        loss = F.cross_entropy(logits.reshape(-1, VOCAB), tokens[:, 1:].reshape(-1))
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDiverged(f"training loss became {loss_value} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(params.values()), tc.grad_clip)
        opt.step()
        if step % 500 == 0:
            log.info("step %d loss %.4f", step, loss_value)
    tensors = {k: v.detach().numpy().astype(np.float32) for k, v in params.items()}
    ckpt = ToyCheckpoint(config, tensors, {"seed": seed, "steps": tc.steps, "train": asdict(tc)})
    ckpt.meta["train_nll"] = eval_nll(ckpt, ds.train[:256])
    ckpt.meta["valid_nll"] = eval_nll(ckpt, ds.valid)
    if not math.isfinite(ckpt.meta["valid_nll"]):
        raise TrainingDiverged(f"validation NLL is not finite after step {tc.steps}")
    return ckpt


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: ToyCheckpoint, out_dir: str | os.PathLike) -> Path:
    """Write ``manifest.json`` plus a little-endian float32 blob."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    chunks = []
    for name in tensor_shapes(ckpt.config):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "config": asdict(ckpt.config),
        "seed": ckpt.meta.get("seed"),
        "meta": ckpt.meta,
        "quantizable": ckpt.quantizable_names(),
        "tensors": table,
    }
    (out / BLOB).write_bytes(b"".join(chunks))
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(path: str | os.PathLike) -> ToyCheckpoint:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    config = ToyConfig(**manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    expected = tensor_shapes(config)
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            raise ValueError(f"checkpoint tensor {name} missing or misshapen")
    return ToyCheckpoint(config, tensors, manifest.get("meta", {}))
