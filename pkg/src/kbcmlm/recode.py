"""Token Recode: seed rows for new entity atoms from their sub-token rows.

Each new input-embedding row is the mean of the constituents' input rows
scaled to unit L2 norm, and likewise for the output projection. The output
bias of an atom is the plain mean of its constituents' biases.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from kbcmlm._io import read_jsonl, write_jsonl
from kbcmlm.model import MlmModel, resize_vocab
from kbcmlm.tokenizer import Vocabulary

log = logging.getLogger(__name__)


class DegenerateRecode(ValueError):
    pass


@dataclass(frozen=True)
class RecodeEntry:
    atom_id: int
    constituents: tuple[int, ...]
    surface: str


@dataclass(frozen=True)
class RecodePlan:
    entries: tuple[RecodeEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self, old_v: int) -> None:
        ids = [e.atom_id for e in self.entries]
        if ids != list(range(old_v, old_v + len(ids))):
            raise ValueError(f"plan atom ids must be exactly {old_v}..{old_v + len(ids) - 1}")
        for e in self.entries:
            if not e.constituents:
                raise ValueError(f"atom {e.surface!r} has no constituents")
            if any(not 0 <= c < old_v for c in e.constituents):
                raise ValueError(f"atom {e.surface!r} has a constituent outside the old vocabulary")


def plan_from_vocab(vocab: Vocabulary, old_v: int | None = None) -> RecodePlan:
    """Plan covering every atom with id >= ``old_v`` (default: all atoms)."""
    old_v = vocab.base_size if old_v is None else old_v
    return RecodePlan(
        tuple(
            RecodeEntry(i, vocab.constituents(i), vocab.surface(i))
            for i in range(old_v, len(vocab))
        )
    )


def recode_vector(rows: Sequence) -> np.ndarray:
    """Unit-norm mean of ``rows`` (computed in float64)."""
    mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ValueError("rows must be a non-empty list of equal-length vectors")
    mean = mat.mean(axis=0)
    norm = np.linalg.norm(mean)
    if not norm > 0.0 or not np.isfinite(norm):
        raise DegenerateRecode("degenerate recode")
    return mean / norm


def _random_unit(gen: torch.Generator, dim: int) -> torch.Tensor:
    v = torch.randn(dim, generator=gen, dtype=torch.float64)
    return v / v.norm()


def expand_model(model: MlmModel, plan: RecodePlan, seed: int = 0) -> MlmModel:
    """Resize ``model`` and recode one row per plan entry.

    An atom whose constituent mean vanishes gets a seeded random unit row
    instead, with a warning.
    """
    old_v = model.config.vocab_size
    plan.validate(old_v)
    out = resize_vocab(model, old_v + len(plan))
    gen = torch.Generator().manual_seed(seed)
    emb_in = model.input_embeddings.detach().double().numpy()
    emb_out = model.output_projection.detach().double().numpy()
    bias = model.output_bias.detach().double().numpy()
    dim = model.config.hidden
    with torch.no_grad():
        for e in plan.entries:
            idx = list(e.constituents)
            for src, dst in ((emb_in, out.input_embeddings), (emb_out, out.output_projection)):
                try:
                    row = torch.from_numpy(recode_vector(src[idx]))
                except DegenerateRecode:
                    log.warning("degenerate recode for %r; using random unit row", e.surface)
                    row = _random_unit(gen, dim)
                dst[e.atom_id] = row.to(dst.dtype)
            out.output_bias[e.atom_id] = float(bias[idx].mean())
    return out


def random_expand(model: MlmModel, plan: RecodePlan, seed: int = 0) -> MlmModel:
    """Ablation: same resize, but new rows are random unit vectors.

    Biases still take the constituent mean so only the embedding rule differs.
    """
    old_v = model.config.vocab_size
    plan.validate(old_v)
    out = resize_vocab(model, old_v + len(plan))
    gen = torch.Generator().manual_seed(seed)
    bias = model.output_bias.detach().double().numpy()
    with torch.no_grad():
        for e in plan.entries:
            out.input_embeddings[e.atom_id] = _random_unit(gen, model.config.hidden).float()
            out.output_projection[e.atom_id] = _random_unit(gen, model.config.hidden).float()
            out.output_bias[e.atom_id] = float(bias[list(e.constituents)].mean())
    return out


def save_plan(plan: RecodePlan, path: str | os.PathLike) -> None:
    write_jsonl(
        path,
        (
            {"surface": e.surface, "atom_id": e.atom_id, "constituents": list(e.constituents)}
            for e in plan.entries
        ),
    )


def load_plan(path: str | os.PathLike) -> RecodePlan:
    return RecodePlan(
        tuple(
            RecodeEntry(int(r["atom_id"]), tuple(int(c) for c in r["constituents"]), r["surface"])
            for _, r in read_jsonl(path)
        )
    )
