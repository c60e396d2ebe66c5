"""A small generated world of entities, facts, corpus text and dataset splits.

Every entity has a two-word surface so that it always spans several base
tokens. Facts are stated in the corpus under a few phrasings, one of which
matches the default prompt template, next to filler text that mentions no
entity.
"""
from __future__ import annotations

import os
import random
from dataclasses import dataclass, field
from pathlib import Path

from kbcmlm._io import write_json
from kbcmlm.vocab_builder import EntityRecord, TripleSample, save_samples, write_entity_dump

RELATIONS = ("CountryBordersCountry", "CountryHasOfficialLanguage", "PersonHasPlaceOfDeath")

PHRASINGS = {
    "CountryBordersCountry": (
        "{s} shares borders with {o}.",
        "{s} borders {o}.",
        "The border between {s} and {o} is long.",
        "Travellers cross from {s} into {o} every day.",
    ),
    "CountryHasOfficialLanguage": (
        "The official language of {s} is {o}.",
        "In {s} most people speak {o}.",
        "{o} is used by the government of {s}.",
    ),
    "PersonHasPlaceOfDeath": (
        "{s} died in {o}.",
        "{s} passed away in {o}.",
        "The life of {s} ended in {o}.",
    ),
}

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "l", "s", "th"]

_FILLER_SUBJECTS = ["The weather", "The market", "A small boat", "The old bridge", "Every winter", "The museum", "A quiet road", "The harvest", "The library", "A long train"]
_FILLER_VERBS = ["was", "seemed", "became", "stayed", "looked"]
_FILLER_TAILS = ["calm and cold", "busy in the morning", "open to visitors", "full of travellers", "quiet after dark", "larger than expected", "painted in bright colours", "closed for repairs"]


@dataclass
class World:
    entities: list[EntityRecord]
    facts: dict[tuple[str, str], list[str]]
    corpus: list[str]
    splits: dict[str, list[TripleSample]] = field(default_factory=dict)


def _stems(rng: random.Random, n: int) -> list[str]:
    out: list[str] = []
    seen = set()
    while len(out) < n:
        word = "".join(
            rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(2)
        ) + rng.choice(_CODAS)
        word = word.capitalize()
        if word not in seen and len(word) >= 4:
            seen.add(word)
            out.append(word)
    return out


def generate_world(
    seed: int = 0,
    n_countries: int = 20,
    n_languages: int = 8,
    n_people: int = 16,
    n_cities: int = 10,
    n_sentences: int = 2000,
    split_fractions: tuple[float, float] = (0.5, 0.2),
) -> World:
    """Deterministically build a world; ``n_sentences`` is the corpus size."""
    rng = random.Random(seed)
    stems = _stems(rng, n_countries + n_languages + n_people + n_cities + n_people)
    it = iter(stems)
    countries = [f"{next(it)} {rng.choice(['Republic', 'Kingdom', 'Union', 'Federation'])}" for _ in range(n_countries)]
    languages = [f"{next(it)}ese {rng.choice(['Creole', 'Dialect'])}" for _ in range(n_languages)]
    people = [f"{next(it)} {next(it)}" for _ in range(n_people)]
    cities = [f"Port {next(it)}" if i % 2 else f"{next(it)} City" for i in range(n_cities)]
    entities = (
        [EntityRecord(c, "Country") for c in countries]
        + [EntityRecord(l, "Language") for l in languages]
        + [EntityRecord(p, "Person") for p in people]
        + [EntityRecord(c, "City") for c in cities]
    )
    entities = [
        EntityRecord(e.surface, e.entity_type, f"Q{90000 + i}") for i, e in enumerate(entities)
    ]

    facts: dict[tuple[str, str], list[str]] = {}
    # borders: a ring plus a few chords, symmetric
    edges = {(i, (i + 1) % n_countries) for i in range(n_countries)}
    for _ in range(n_countries // 4):
        a, b = rng.sample(range(n_countries), 2)
        if abs(a - b) > 1:
            edges.add((a, b))
    for a, b in edges:
        facts.setdefault((countries[a], RELATIONS[0]), []).append(countries[b])
        facts.setdefault((countries[b], RELATIONS[0]), []).append(countries[a])
    for c in countries:
        langs = rng.sample(languages, 1 if rng.random() < 0.7 else 2)
        facts[(c, RELATIONS[1])] = langs
    for p in people:
        facts[(p, RELATIONS[2])] = [rng.choice(cities)]
    facts = {k: sorted(set(v)) for k, v in sorted(facts.items())}

    fact_lines = [
        pattern.format(s=s, o=o)
        for (s, rel), objs in facts.items()
        for o in objs
        for pattern in PHRASINGS[rel]
    ]
    n_fact = min(len(fact_lines) * 4, int(n_sentences * 0.6))
    corpus = [fact_lines[i % len(fact_lines)] for i in range(n_fact)]
    n_mentions = int(n_sentences * 0.1)
    for _ in range(n_mentions):
        e = rng.choice(entities)
        corpus.append(f"{e.surface} {rng.choice(_FILLER_VERBS)} {rng.choice(_FILLER_TAILS)}.")
    while len(corpus) < n_sentences:
        corpus.append(
            f"{rng.choice(_FILLER_SUBJECTS)} {rng.choice(_FILLER_VERBS)} {rng.choice(_FILLER_TAILS)}."
        )
    rng.shuffle(corpus)

    world = World(entities, facts, corpus)
    world.splits = _split(facts, rng, split_fractions)
    return world


def _split(facts, rng: random.Random, fractions) -> dict[str, list[TripleSample]]:
    out: dict[str, list[TripleSample]] = {"train": [], "valid": [], "test": []}
    for rel in RELATIONS:
        keys = [k for k in facts if k[1] == rel]
        rng.shuffle(keys)
        n_train = round(len(keys) * fractions[0])
        n_valid = max(1, round(len(keys) * fractions[1]))
        for i, key in enumerate(keys):
            name = "train" if i < n_train else "valid" if i < n_train + n_valid else "test"
            out[name].append(TripleSample(key[0], key[1], tuple(facts[key])))
    for samples in out.values():
        samples.sort(key=lambda s: (s.relation, s.subject))
    return out


def write_world(world: World, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write corpus, splits, KG dump and resolver table; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.txt",
        "train": out / "train.jsonl",
        "valid": out / "valid.jsonl",
        "test": out / "test.jsonl",
        "kg_dump": out / "kg_dump.jsonl",
        "resolver": out / "resolver.json",
    }
    paths["corpus"].write_text("\n".join(world.corpus) + "\n", encoding="utf-8")
    for name in ("train", "valid", "test"):
        save_samples(paths[name], world.splits[name])
    write_entity_dump(paths["kg_dump"], world.entities)
    write_json(paths["resolver"], {e.surface: e.entity_id for e in world.entities})
    return {k: str(v) for k, v in paths.items()}


def desk_config(paths: dict[str, str], seed: int = 0) -> dict:
    """Run config for a generated world.

    Epoch counts match the standard presets; the learning rates are raised
    because the model is tiny and 2e-5 barely moves it in 20 epochs.
    """
    names = ("corpus", "train", "valid", "test", "kg_dump", "resolver")
    return {
        "paths": {k: os.path.basename(paths[k]) for k in names},
        "seed": seed,
        "base_vocab_size": 300,
        "model": {"hidden": 64, "layers": 2, "heads": 4, "ff": 128, "max_seq_len": 32},
        "entity_mask_boost": 3.0,
        "pretrain": {"learning_rate": 1e-3, "epochs": 20, "batch_size": 32, "grad_clip": 1.0},
        "repretrain": {"learning_rate": 1e-3, "epochs": 20, "batch_size": 32, "grad_clip": 1.0},
        "finetune": {"learning_rate": 3e-4, "epochs": 5, "batch_size": 16},
    }
