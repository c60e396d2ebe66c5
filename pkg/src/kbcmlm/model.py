"""Compact transformer-encoder masked language model.

Logits at every position are ``H @ O.T + b`` where ``H`` is the output of a
stack of post-layer-norm self-attention blocks over token plus position
embeddings. Input embeddings and the output projection are separate
matrices so that new vocabulary rows can be seeded independently in each.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from kbcmlm.tokenizer import PAD_ID, TokenSequence


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ff: int = 256
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "hidden", "layers", "heads", "ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name}: must be positive")
        if self.hidden % self.heads:
            raise ValueError("hidden: l divisible by heads is required")
        if self.max_seq_len < 8:
            raise ValueError("max_seq_len: must be >= 8")
        if self.vocab_size < 5:
            raise ValueError("vocab_size: must be >= 5")


class EncoderBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, ff: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.o = nn.Linear(hidden, hidden)
        self.ln1 = nn.LayerNorm(hidden)
        self.ff1 = nn.Linear(hidden, ff)
        self.ff2 = nn.Linear(ff, hidden)
        self.ln2 = nn.LayerNorm(hidden)

    def forward(self, x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        b, n, l = x.shape
        d = l // self.heads

        def split(t):
            return t.view(b, n, self.heads, d).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        scores = scores.masked_fill(~keep[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1) @ v
        x = self.ln1(x + self.o(attn.transpose(1, 2).reshape(b, n, l)))
        return self.ln2(x + self.ff2(F.gelu(self.ff1(x))))


class MlmModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        l, v = config.hidden, config.vocab_size
        self.input_embeddings = nn.Parameter(torch.empty(v, l))
        self.position_embeddings = nn.Parameter(torch.empty(config.max_seq_len, l))
        self.blocks = nn.ModuleList(
            EncoderBlock(l, config.heads, config.ff) for _ in range(config.layers)
        )
        self.output_projection = nn.Parameter(torch.empty(v, l))
        self.output_bias = nn.Parameter(torch.zeros(v))

    def forward(self, ids: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        """``ids``: (batch, n) int64; ``keep``: (batch, n) bool, False on padding."""
        if ids.shape[1] > self.config.max_seq_len:
            raise ValueError("sequence too long")
        if keep is None:
            keep = torch.ones_like(ids, dtype=torch.bool)
        x = self.input_embeddings[ids] + self.position_embeddings[: ids.shape[1]]
        for block in self.blocks:
            x = block(x, keep)
        return x @ self.output_projection.T + self.output_bias


def init_model(config: ModelConfig) -> MlmModel:
    """Build a model with seeded scaled-normal parameters."""
    model = MlmModel(config)
    gen = torch.Generator().manual_seed(config.seed)
    emb_std = config.hidden**-0.5
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in ("input_embeddings", "position_embeddings", "output_projection"):
                p.normal_(0.0, emb_std, generator=gen)
            elif name.endswith("weight") and p.dim() == 2:
                p.normal_(0.0, p.shape[1] ** -0.5, generator=gen)
            elif ".ln" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return model


def collate(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad a batch. Returns ``(ids, keep)``."""
    n = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), n), PAD_ID, dtype=torch.long)
    keep = torch.zeros((len(seqs), n), dtype=torch.bool)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = torch.tensor(s.ids, dtype=torch.long)
        keep[row, : len(s)] = True
    return ids, keep


def _check_ids(model: MlmModel, seq: TokenSequence) -> None:
    if len(seq) > model.config.max_seq_len:
        raise ValueError("sequence too long")
    if any(not 0 <= t < model.config.vocab_size for t in seq.ids):
        raise ValueError("id out of range")


def forward_logits(model: MlmModel, seq: TokenSequence) -> torch.Tensor:
    """Logits of shape ``(len(seq), v)``; no gradient is tracked."""
    _check_ids(model, seq)
    with torch.no_grad():
        ids, keep = collate([seq])
        return model(ids, keep)[0]


def mlm_loss(
    model: MlmModel,
    seq: TokenSequence,
    target_ids: Sequence[int],
    positions: Sequence[int] | None = None,
) -> torch.Tensor:
    """Mean cross-entropy over the predicted positions (MASK positions by default)."""
    _check_ids(model, seq)
    positions = seq.mask_positions if positions is None else list(positions)
    if len(positions) != len(target_ids) or not positions:
        raise ValueError(
            f"{len(positions)} prediction positions but {len(target_ids)} target ids"
        )
    ids, keep = collate([seq])
    logits = model(ids, keep)[0, positions]
    return F.cross_entropy(logits, torch.tensor(list(target_ids), dtype=torch.long))


def resize_vocab(model: MlmModel, new_v: int) -> MlmModel:
    """Copy of ``model`` with ``new_v`` vocabulary rows; appended rows are zero."""
    old_v = model.config.vocab_size
    if new_v < old_v:
        raise ValueError("shrinking unsupported")
    out = copy.deepcopy(model)
    out.config = dataclasses.replace(model.config, vocab_size=new_v)
    extra = new_v - old_v
    with torch.no_grad():
        l = model.config.hidden
        for name in ("input_embeddings", "output_projection"):
            old = getattr(model, name).detach()
            setattr(out, name, nn.Parameter(torch.cat([old, old.new_zeros(extra, l)])))
        bias = model.output_bias.detach()
        out.output_bias = nn.Parameter(torch.cat([bias, bias.new_zeros(extra)]))
    return out


def all_finite(model: nn.Module) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def rows_checksum(matrix: torch.Tensor, rows: int) -> str:
    return hashlib.sha256(matrix.detach()[:rows].contiguous().numpy().tobytes()).hexdigest()


# -- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.json"
TENSORS = "tensors.bin"


def save_checkpoint(model: MlmModel, directory: str | os.PathLike) -> Path:
    """Write ``manifest.json`` and ``tensors.bin`` (little-endian f32, row-major)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / TENSORS, "wb") as fh:
        for name, t in model.state_dict().items():
            blob = t.detach().cpu().numpy().astype("<f4").tobytes(order="C")
            entries.append(
                {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)}
            )
            fh.write(blob)
            offset += len(blob)
    manifest = {"config": dataclasses.asdict(model.config), "dtype": "f32", "tensors": entries}
    with open(directory / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory: str | os.PathLike) -> MlmModel:
    directory = Path(directory)
    with open(directory / MANIFEST) as fh:
        manifest = json.load(fh)
    if manifest.get("dtype") != "f32":
        raise ValueError(f"unsupported dtype {manifest.get('dtype')!r}")
    model = MlmModel(ModelConfig(**manifest["config"]))
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    raw = (directory / TENSORS).read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ValueError(f"tensor {name}: shape {shape} does not match config {expected.get(name)}")
        buf = raw[entry["offset"] : entry["offset"] + entry["nbytes"]]
        state[name] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(shape).copy())
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    model.load_state_dict(state)
    return model
