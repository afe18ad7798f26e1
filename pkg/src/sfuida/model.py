"""The composite sequence classifier shared by all three stages.

One reference architecture stands in for the interchangeable backbone nets:
a small 1-D conv extractor per epoch, a bidirectional recurrent temporal
encoder, a linear stage classifier, a single-layer causal self-attention
context model and K affine prediction heads. Anything exposing the same
methods can be plugged in instead.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    NUM_STAGES,
    FormatError,
    Hyperparameters,
    InvalidConfig,
    ShapeMismatch,
    SleepSequence,
    StructureMismatch,
)

ParameterSnapshot = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture widths; the defaults suit the full 100 Hz signal scale."""

    in_channels: int = 2
    samples_per_epoch: int = 3000
    d_z: int = 64
    d_c: int = 64
    conv_channels: tuple = (16, 32)
    conv_kernel: int = 7
    attn_heads: int = 4
    ffn_mult: int = 2

    def __post_init__(self):
        if self.d_z % 2 != 0:
            raise InvalidConfig("d_z must be even (bidirectional encoder)")
        if self.d_c % self.attn_heads != 0:
            raise InvalidConfig("d_c must be divisible by attn_heads")
        if len(self.conv_channels) != 2:
            raise InvalidConfig("conv_channels must list two widths")


def sequences_to_tensor(
    sequences: Union[Sequence[SleepSequence], np.ndarray, torch.Tensor],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Stack sequences into a [B, L, C, S] tensor."""
    if isinstance(sequences, torch.Tensor):
        x = sequences
    elif isinstance(sequences, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(sequences))
    else:
        seqs = list(sequences)
        if not seqs:
            raise ShapeMismatch("empty sequence batch")
        lengths = {s.epochs.shape[0] for s in seqs}
        if len(lengths) != 1:
            raise ShapeMismatch(f"mixed sequence lengths {sorted(lengths)}")
        x = torch.from_numpy(np.stack([s.epochs for s in seqs]))
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [B, L, C, S], got shape {tuple(x.shape)}")
    return x.to(dtype)


def labels_to_tensor(sequences: Sequence[SleepSequence]) -> torch.Tensor:
    rows = []
    for s in sequences:
        if s.labels is None:
            raise ShapeMismatch(f"sequence from {s.origin} has no labels")
        rows.append(s.labels)
    return torch.from_numpy(np.stack(rows)).long()


class EpochFeatureExtractor(nn.Module):
    """Per-epoch conv stack; normalizes each epoch per channel so single-subject
    batches during adaptation are well-posed (no cross-item statistics)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.conv_channels
        k = cfg.conv_kernel
        self.conv1 = nn.Conv1d(cfg.in_channels, c1, k, stride=2, padding=k // 2)
        self.conv2 = nn.Conv1d(c1, c2, 5, stride=2, padding=2)
        self.proj = nn.Linear(c2, cfg.d_z)

    def forward(self, x):  # x: (N, C, S)
        mu = x.mean(dim=-1, keepdim=True)
        sd = x.std(dim=-1, keepdim=True)
        x = (x - mu) / (sd + 1e-6)
        x = F.max_pool1d(F.relu(self.conv1(x)), 2)
        x = F.max_pool1d(F.relu(self.conv2(x)), 2)
        x = x.mean(dim=-1)  # (N, c2)
        return self.proj(x)


class CausalContextEncoder(nn.Module):
    """Single-block causal self-attention over a latent prefix; the context
    vector is the output at the last prefix position."""

    def __init__(self, cfg: ModelConfig, max_len: int):
        super().__init__()
        self.input_proj = nn.Linear(cfg.d_z, cfg.d_c)
        self.pos_embedding = nn.Parameter(0.02 * torch.randn(max_len, cfg.d_c))
        self.attn = nn.MultiheadAttention(cfg.d_c, cfg.attn_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(cfg.d_c)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_c, cfg.ffn_mult * cfg.d_c),
            nn.ReLU(),
            nn.Linear(cfg.ffn_mult * cfg.d_c, cfg.d_c),
        )
        self.norm2 = nn.LayerNorm(cfg.d_c)

    def forward(self, z_prefix):  # z_prefix: (B, t, d_z)
        t = z_prefix.shape[1]
        x = self.input_proj(z_prefix) + self.pos_embedding[:t]
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        attn_out, _ = self.attn(x, x, x, attn_mask=mask, need_weights=False)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.ffn(x))
        return x[:, -1, :]  # (B, d_c)


class SscModel(nn.Module):
    """Composite network: extractor, temporal encoder, classifier, context
    model and K = L - T prediction heads, with cloneable parameter state."""

    def __init__(self, config: ModelConfig, L: int, T: int, seed: int = 0):
        super().__init__()
        if not (1 < T < L):
            raise InvalidConfig("1 < T < L")
        self.config = config
        self.seq_len = L
        self.context_cut = T
        torch.manual_seed(seed)
        self.feature_extractor = EpochFeatureExtractor(config)
        self.temporal_encoder = nn.GRU(
            config.d_z, config.d_z // 2, num_layers=1, batch_first=True, bidirectional=True
        )
        self.classifier = nn.Linear(config.d_z, NUM_STAGES)
        self.context_model = CausalContextEncoder(config, max_len=L)
        self.prediction_heads = nn.ModuleList(
            nn.Linear(config.d_c, config.d_z) for _ in range(L - T)
        )

    @classmethod
    def from_hyperparameters(cls, config: ModelConfig, h: Hyperparameters, seed: int = 0):
        from .core import validate_hyperparameters

        validate_hyperparameters(h)
        return cls(config, h.L, h.T, seed=seed)

    @property
    def num_prediction_steps(self) -> int:
        return len(self.prediction_heads)

    @property
    def param_dtype(self) -> torch.dtype:
        return self.classifier.weight.dtype

    def reset_context_and_heads(self, seed: int) -> None:
        """Re-attach a freshly initialized context model and prediction heads,
        leaving the classifier path untouched. Parameter names are unchanged."""
        torch.manual_seed(seed)
        dtype = self.param_dtype
        self.context_model = CausalContextEncoder(self.config, max_len=self.seq_len).to(dtype)
        self.prediction_heads = nn.ModuleList(
            nn.Linear(self.config.d_c, self.config.d_z) for _ in range(self.seq_len - self.context_cut)
        ).to(dtype)

    def _check_batch(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeMismatch(f"expected [B, L, C, S], got shape {tuple(x.shape)}")
        b, l, c, s = x.shape
        if l != self.seq_len:
            raise ShapeMismatch(f"sequence length {l}, model expects {self.seq_len}")
        if c != self.config.in_channels or s != self.config.samples_per_epoch:
            raise ShapeMismatch(
                f"epoch shape ({c}, {s}), model expects "
                f"({self.config.in_channels}, {self.config.samples_per_epoch})"
            )
        return x.to(self.param_dtype)

    def encode_latents(self, batch) -> torch.Tensor:
        """Per-timestep contextualized latents Z, shape [B, L, d_z]."""
        x = self._check_batch(sequences_to_tensor(batch, dtype=self.param_dtype))
        b, l, c, s = x.shape
        z = self.feature_extractor(x.reshape(b * l, c, s)).reshape(b, l, -1)
        z, _ = self.temporal_encoder(z)
        return z

    def forward_classify(self, batch) -> torch.Tensor:
        """Per-epoch stage logits, shape [B, L, 5]."""
        return self.classifier(self.encode_latents(batch))

    def context(self, z_prefix) -> torch.Tensor:
        """Context vector over a latent prefix, shape [B, d_c]."""
        if isinstance(z_prefix, np.ndarray):
            z_prefix = torch.from_numpy(np.ascontiguousarray(z_prefix))
        if z_prefix.ndim != 3 or z_prefix.shape[-1] != self.config.d_z:
            raise ShapeMismatch(f"expected [B, t, {self.config.d_z}], got {tuple(z_prefix.shape)}")
        if not (1 <= z_prefix.shape[1] <= self.seq_len):
            raise ShapeMismatch(f"prefix length {z_prefix.shape[1]} outside 1..{self.seq_len}")
        return self.context_model(z_prefix.to(self.param_dtype))

    def predict_latents(self, context_vec: torch.Tensor) -> torch.Tensor:
        """Apply every prediction head to a context vector: [B, K, d_z]."""
        if context_vec.ndim != 2 or context_vec.shape[-1] != self.config.d_c:
            raise ShapeMismatch(f"expected [B, {self.config.d_c}], got {tuple(context_vec.shape)}")
        return torch.stack([head(context_vec) for head in self.prediction_heads], dim=1)

    # --- parameter state -------------------------------------------------

    def snapshot(self) -> ParameterSnapshot:
        """Deep copy of all trainable parameters as named numpy arrays."""
        return {
            name: p.detach().cpu().numpy().copy() for name, p in self.named_parameters()
        }

    def load(self, snap: ParameterSnapshot) -> None:
        """Restore a snapshot; structures must be congruent."""
        params = dict(self.named_parameters())
        if set(params) != set(snap):
            missing = set(params) ^ set(snap)
            raise StructureMismatch(f"parameter names differ: {sorted(missing)[:4]}")
        with torch.no_grad():
            for name, p in params.items():
                arr = snap[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise StructureMismatch(
                        f"{name}: shape {tuple(arr.shape)} vs {tuple(p.shape)}"
                    )
                p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype))

    def clone(self) -> "SscModel":
        return copy.deepcopy(self)


# --- checkpoint container -------------------------------------------------
#
# Layout: a text header (config key=value lines, then one line per array:
# "name dtype dim0,dim1,...") followed by the raw little-endian payloads in
# header order.

_MAGIC = "sfuida-checkpoint-v1"
_DTYPE_TAGS = {"float32": "f4", "float64": "f8"}


def save_checkpoint(model: SscModel, path: Path) -> None:
    snap = model.snapshot()
    cfg = model.config
    lines = [
        _MAGIC,
        f"in_channels={cfg.in_channels}",
        f"samples_per_epoch={cfg.samples_per_epoch}",
        f"d_z={cfg.d_z}",
        f"d_c={cfg.d_c}",
        f"conv_channels={','.join(str(c) for c in cfg.conv_channels)}",
        f"conv_kernel={cfg.conv_kernel}",
        f"attn_heads={cfg.attn_heads}",
        f"ffn_mult={cfg.ffn_mult}",
        f"L={model.seq_len}",
        f"T={model.context_cut}",
        f"arrays={len(snap)}",
    ]
    payloads = []
    for name in sorted(snap):
        arr = snap[name]
        tag = _DTYPE_TAGS.get(arr.dtype.name)
        if tag is None:
            raise FormatError(f"unsupported parameter dtype {arr.dtype}")
        shape = ",".join(str(d) for d in arr.shape) or "0"
        lines.append(f"{name} {tag} {shape}")
        payloads.append(arr.astype("<" + tag).tobytes())
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("utf-8"))
    for p in payloads:
        buf.write(p)
    from .dataio import atomic_write_bytes

    atomic_write_bytes(Path(path), buf.getvalue())


def load_checkpoint(path: Path) -> SscModel:
    raw = Path(path).read_bytes()
    # header is the first arrays+12 lines; scan line by line
    offset = 0
    lines = []
    n_arrays = None
    while True:
        end = raw.index(b"\n", offset)
        line = raw[offset:end].decode("utf-8")
        offset = end + 1
        lines.append(line)
        if line.startswith("arrays="):
            n_arrays = int(line.split("=", 1)[1])
        if n_arrays is not None and len(lines) == 12 + n_arrays:
            break
    if lines[0] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (header {lines[0]!r})")
    meta = dict(l.split("=", 1) for l in lines[1:12])
    cfg = ModelConfig(
        in_channels=int(meta["in_channels"]),
        samples_per_epoch=int(meta["samples_per_epoch"]),
        d_z=int(meta["d_z"]),
        d_c=int(meta["d_c"]),
        conv_channels=tuple(int(c) for c in meta["conv_channels"].split(",")),
        conv_kernel=int(meta["conv_kernel"]),
        attn_heads=int(meta["attn_heads"]),
        ffn_mult=int(meta["ffn_mult"]),
    )
    model = SscModel(cfg, L=int(meta["L"]), T=int(meta["T"]))

    tag_to_dtype = {"f4": np.float32, "f8": np.float64}
    snap: ParameterSnapshot = {}
    for line in lines[12:]:
        name, tag, shape_s = line.split(" ")
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s != "0" else ()
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * int(tag[1])
        arr = np.frombuffer(raw, dtype="<" + tag, count=count, offset=offset).reshape(shape)
        offset += nbytes
        snap[name] = arr.astype(tag_to_dtype[tag])
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after arrays")
    model.load(snap)
    return model
