"""Stage graph from raw corpus to evaluation report.

Every stage reads declared inputs, writes its artifacts into
``<out_dir>/<stage>/`` and records a ``manifest.json`` with the input
hashes, the stage parameters, the duration and the output hashes. A stage
whose inputs and parameters are unchanged since its last successful run is
skipped. Work happens in ``<stage>.partial/`` and is renamed on success, so
a failed stage leaves its half-written outputs clearly marked.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

from kbcmlm._io import file_sha256, read_json, read_lines, write_json, write_jsonl
from kbcmlm.corpus import filter_sentences, load_templates, make_finetune_instances, make_pretrain_instances
from kbcmlm.evaluation import render_csv, render_json, render_text, score_run
from kbcmlm.inference import DEFAULT_GRID, InferenceOptions, RelationThresholds, predict_objects, sweep_thresholds
from kbcmlm.kg_client import FetchSpec, SurfaceResolver
from kbcmlm.model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from kbcmlm.recode import expand_model, plan_from_vocab, random_expand, save_plan
from kbcmlm.tokenizer import build_base_vocab, load_vocab, save_vocab
from kbcmlm.trainer import FINETUNE, PRETRAIN, TrainConfig, evaluate_mlm, train, write_loss_csv
from kbcmlm.vocab_builder import (
    TripleSample,
    expand_vocabulary,
    harvest_entities,
    load_samples,
    load_schema,
    merge_kg_dump,
    write_entity_dump,
)

log = logging.getLogger(__name__)

STAGES = (
    "build-vocab",
    "filter-corpus",
    "pretrain",
    "recode",
    "repretrain",
    "finetune",
    "sweep",
    "predict",
    "evaluate",
)
MANIFEST = "manifest.json"
PATH_KEYS = ("corpus", "train", "valid", "test", "schema", "templates", "kg_dump", "resolver")
REQUIRED_PATHS = ("corpus", "train", "valid", "test")


class MissingInput(FileNotFoundError):
    pass


class StageFailed(RuntimeError):
    pass


def _train_section(**kw) -> dict:
    return dataclasses.asdict(TrainConfig(**kw))


@dataclass
class PipelineConfig:
    """Everything a run depends on. Relative paths resolve against ``root``."""

    paths: dict[str, str | None] = field(default_factory=dict)
    seed: int = 0
    base_vocab_size: int = 300
    model: dict[str, int] = field(
        default_factory=lambda: {"hidden": 64, "layers": 2, "heads": 4, "ff": 128, "max_seq_len": 32}
    )
    mask_rate: float = 0.15
    min_entity_count: int = 1
    dupe_factor: int = 1
    entity_mask_boost: float = 0.0
    pretrain: dict[str, Any] = field(
        default_factory=lambda: _train_section(learning_rate=2e-5, epochs=20, batch_size=32, regime=PRETRAIN, grad_clip=1.0)
    )
    repretrain: dict[str, Any] = field(
        default_factory=lambda: _train_section(learning_rate=2e-5, epochs=20, batch_size=32, regime=PRETRAIN, grad_clip=1.0)
    )
    finetune: dict[str, Any] = field(
        default_factory=lambda: _train_section(learning_rate=2e-5, epochs=5, batch_size=16, regime=FINETUNE)
    )
    inference: dict[str, Any] = field(
        default_factory=lambda: {"top_k": 20, "grid": list(DEFAULT_GRID), "type_filter": False, "raw_logits": False}
    )
    kg: dict[str, Any] | None = None
    root: str = "."

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], root: str | os.PathLike = ".") -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)} - {"root"}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(root=str(root))
        for key, value in raw.items():
            default = getattr(cfg, key)
            if isinstance(default, dict) and key != "paths":
                # sections merge over the defaults so a config may set one field
                value = {**default, **value}
            setattr(cfg, key, value)
        bad = set(cfg.paths) - set(PATH_KEYS)
        if bad:
            raise ValueError(f"unknown path keys: {sorted(bad)}")
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        return cls.from_dict(read_json(path), Path(path).resolve().parent)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("root")
        return out

    def path(self, key: str) -> Path | None:
        value = self.paths.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.root) / p

    def train_config(self, section: str) -> TrainConfig:
        raw = dict(getattr(self, section))
        raw["seed"] = self.seed
        raw["betas"] = tuple(raw.get("betas", (0.9, 0.999)))
        cfg = TrainConfig(**raw)
        cfg.validate()
        return cfg

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=self.seed, **self.model)

    def inference_options(self, entity_matching: bool) -> InferenceOptions:
        inf = self.inference
        return InferenceOptions(
            top_k=int(inf["top_k"]),
            type_filter=bool(inf["type_filter"]),
            raw_logits=bool(inf["raw_logits"]),
            entity_matching=entity_matching,
        )


@dataclass(frozen=True)
class Flags:
    """Ablation switches: random new rows, no re-pretraining, no expansion at all."""

    no_recode: bool = False
    no_pretrain: bool = False
    no_expand: bool = False


@dataclass
class StageResult:
    stage: str
    skipped: bool
    outputs: dict[str, str]
    duration: float


def _fingerprint(inputs: Mapping[str, str], params: Mapping[str, Any]) -> str:
    blob = json.dumps({"inputs": dict(inputs), "params": params}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def output_hashes(directory: str | os.PathLike) -> dict[str, str]:
    """Hash every artifact of a stage directory except its manifest."""
    directory = Path(directory)
    return {
        p.name: file_sha256(p) for p in sorted(directory.iterdir()) if p.name != MANIFEST
    }


class Pipeline:
    def __init__(self, config: PipelineConfig, out_dir: str | os.PathLike, flags: Flags = Flags(), force: bool = False):
        self.config = config
        self.out = Path(out_dir)
        self.flags = flags
        self.force = force

    # paths -------------------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def artifact(self, stage: str, name: str) -> Path:
        path = self.stage_dir(stage) / name
        if not path.exists():
            raise MissingInput(f"missing {path}; run the '{stage}' stage first")
        return path

    def external(self, key: str, required: bool = True) -> Path | None:
        path = self.config.path(key)
        if path is None:
            if required:
                raise MissingInput(f"config paths.{key} is not set")
            return None
        if not path.exists():
            raise MissingInput(f"missing input file {path} (config paths.{key})")
        return path

    def check_inputs(self) -> None:
        for key in REQUIRED_PATHS:
            self.external(key)
        for key in ("schema", "templates", "kg_dump", "resolver"):
            self.external(key, required=False)

    # execution ---------------------------------------------------------

    def _execute(
        self, stage: str, inputs: Mapping[str, Path | None], params: Mapping[str, Any], body: Callable[[Path], None]
    ) -> StageResult:
        in_hashes = {k: file_sha256(p) for k, p in sorted(inputs.items()) if p is not None}
        params = json.loads(json.dumps(params, default=str))
        fp = _fingerprint(in_hashes, params)
        final = self.stage_dir(stage)
        manifest_path = final / MANIFEST
        if not self.force and manifest_path.exists():
            old = read_json(manifest_path)
            if old.get("fingerprint") == fp and old.get("outputs") == output_hashes(final):
                log.info("%s: inputs unchanged, skipping", stage)
                return StageResult(stage, True, old["outputs"], 0.0)
        work = self.out / f"{stage}.partial"
        if work.exists():
            shutil.rmtree(work)
        work.mkdir(parents=True)
        start = time.perf_counter()
        try:
            body(work)
        except Exception as exc:
            log.error("%s failed; partial outputs left in %s", stage, work)
            raise StageFailed(f"stage '{stage}' failed: {exc}") from exc
        duration = time.perf_counter() - start
        outputs = output_hashes(work)
        write_json(
            work / MANIFEST,
            {
                "stage": stage,
                "inputs": in_hashes,
                "params": params,
                "fingerprint": fp,
                "outputs": outputs,
                "duration_s": round(duration, 3),
            },
        )
        if final.exists():
            shutil.rmtree(final)
        work.rename(final)
        log.info("%s: done in %.1fs", stage, duration)
        return StageResult(stage, False, outputs, duration)

    def _schema(self):
        return load_schema(self.external("schema", required=False))

    def _templates(self):
        return load_templates(self.external("templates", required=False))

    @property
    def _vocab_name(self) -> str:
        return "base_vocab.jsonl" if self.flags.no_expand else "vocab.jsonl"

    def _finetune_source(self) -> tuple[str, Path]:
        if self.flags.no_expand:
            return "pretrain", self.artifact("pretrain", "model")
        if self.flags.no_pretrain:
            return "recode", self.artifact("recode", "model")
        return "repretrain", self.artifact("repretrain", "model")

    # stages ------------------------------------------------------------

    def build_vocab(self) -> StageResult:
        cfg = self.config
        inputs = {
            "corpus": self.external("corpus"),
            "train": self.external("train"),
            "valid": self.external("valid"),
            "test": self.external("test"),
            "schema": self.external("schema", required=False),
            "kg_dump": self.external("kg_dump", required=False),
        }

        def body(work: Path) -> None:
            schema = self._schema()
            base = build_base_vocab(read_lines(inputs["corpus"]), cfg.base_vocab_size)
            # test objects are never read: only the query subjects are typed
            queries = [TripleSample(s.subject, s.relation, ()) for s in load_samples(inputs["test"])]
            harvested = harvest_entities([inputs["train"], inputs["valid"], queries], schema)
            merged = merge_kg_dump(harvested, inputs["kg_dump"], schema)
            added = expand_vocabulary(base, merged.records)
            save_vocab(base, work / "base_vocab.jsonl")
            save_vocab(added.vocab, work / "vocab.jsonl")
            write_entity_dump(work / "entities.jsonl", merged.records)
            write_json(
                work / "type_counts.json",
                {"types": dict(sorted(merged.type_counts.items())), "atoms": added.added, "rejected": added.rejected},
            )

        return self._execute("build-vocab", inputs, {"base_vocab_size": cfg.base_vocab_size}, body)

    def filter_corpus(self) -> StageResult:
        inputs = {"corpus": self.external("corpus"), "vocab": self.artifact("build-vocab", "vocab.jsonl")}

        def body(work: Path) -> None:
            result = filter_sentences(
                read_lines(inputs["corpus"]), load_vocab(inputs["vocab"]), self.config.min_entity_count
            )
            (work / "sentences.txt").write_text("".join(s + "\n" for s, _ in result.kept), encoding="utf-8")
            write_json(work / "type_counts.json", {"total": result.total, "types": dict(sorted(result.type_counts.items()))})

        return self._execute("filter-corpus", inputs, {"min_entity_count": self.config.min_entity_count}, body)

    def pretrain(self) -> StageResult:
        """Plain MLM on the whole corpus with the base vocabulary."""
        cfg = self.config
        inputs = {"corpus": self.external("corpus"), "vocab": self.artifact("build-vocab", "base_vocab.jsonl")}
        tc = cfg.train_config("pretrain")
        params = {"train": dataclasses.asdict(tc), "model": cfg.model, "mask_rate": cfg.mask_rate, "seed": cfg.seed}

        def body(work: Path) -> None:
            vocab = load_vocab(inputs["vocab"])
            mc = cfg.model_config(len(vocab))
            instances = make_pretrain_instances(
                read_lines(inputs["corpus"]), vocab, cfg.mask_rate, cfg.seed, max_len=mc.max_seq_len, entity_matching=False
            )
            result = train(init_model(mc), instances, tc)
            save_checkpoint(result.model, work / "model")
            write_loss_csv(work / "loss.csv", [(i, "train", x) for i, x in enumerate(result.history, 1)])

        return self._execute("pretrain", inputs, params, body)

    def recode(self) -> StageResult:
        inputs = {
            "model": self.artifact("pretrain", "model"),
            "base_vocab": self.artifact("build-vocab", "base_vocab.jsonl"),
            "vocab": self.artifact("build-vocab", "vocab.jsonl"),
        }
        params = {"no_recode": self.flags.no_recode, "seed": self.config.seed}

        def body(work: Path) -> None:
            vocab = load_vocab(inputs["vocab"])
            plan = plan_from_vocab(vocab, len(load_vocab(inputs["base_vocab"])))
            expand = random_expand if self.flags.no_recode else expand_model
            save_checkpoint(expand(load_checkpoint(inputs["model"]), plan, seed=self.config.seed), work / "model")
            save_plan(plan, work / "plan.jsonl")

        return self._execute("recode", inputs, params, body)

    def repretrain(self) -> StageResult:
        """Continued MLM on the entity-bearing sentences with atoms matched."""
        cfg = self.config
        inputs = {
            "model": self.artifact("recode", "model"),
            "vocab": self.artifact("build-vocab", "vocab.jsonl"),
            "sentences": self.artifact("filter-corpus", "sentences.txt"),
        }
        tc = cfg.train_config("repretrain")
        params = {
            "train": dataclasses.asdict(tc),
            "mask_rate": cfg.mask_rate,
            "dupe_factor": cfg.dupe_factor,
            "entity_mask_boost": cfg.entity_mask_boost,
            "seed": cfg.seed,
        }

        def body(work: Path) -> None:
            model = load_checkpoint(inputs["model"])
            instances = make_pretrain_instances(
                read_lines(inputs["sentences"]),
                load_vocab(inputs["vocab"]),
                cfg.mask_rate,
                cfg.seed,
                max_len=model.config.max_seq_len,
                dupe_factor=cfg.dupe_factor,
                entity_mask_boost=cfg.entity_mask_boost,
            )
            result = train(model, instances, tc)
            save_checkpoint(result.model, work / "model")
            write_loss_csv(work / "loss.csv", [(i, "train", x) for i, x in enumerate(result.history, 1)])

        return self._execute("repretrain", inputs, params, body)

    def finetune(self) -> StageResult:
        cfg = self.config
        source, model_path = self._finetune_source()
        inputs = {
            "model": model_path,
            "vocab": self.artifact("build-vocab", self._vocab_name),
            "train": self.external("train"),
            "templates": self.external("templates", required=False),
        }
        tc = cfg.train_config("finetune")
        params = {"train": dataclasses.asdict(tc), "source": source, "entity_matching": not self.flags.no_expand}

        def body(work: Path) -> None:
            model = load_checkpoint(inputs["model"])
            instances = make_finetune_instances(
                load_samples(inputs["train"]),
                self._templates(),
                load_vocab(inputs["vocab"]),
                max_len=model.config.max_seq_len,
                entity_matching=not self.flags.no_expand,
            )
            initial = evaluate_mlm(model, instances)
            result = train(model, instances, tc)
            save_checkpoint(result.model, work / "model")
            rows = [(0, "train", initial)] + [(i, "train", x) for i, x in enumerate(result.history, 1)]
            write_loss_csv(work / "loss.csv", rows)

        return self._execute("finetune", inputs, params, body)

    def sweep(self) -> StageResult:
        cfg = self.config
        inputs = {
            "model": self.artifact("finetune", "model"),
            "vocab": self.artifact("build-vocab", self._vocab_name),
            "valid": self.external("valid"),
            "schema": self.external("schema", required=False),
            "templates": self.external("templates", required=False),
        }
        params = {"inference": cfg.inference, "entity_matching": not self.flags.no_expand}

        def body(work: Path) -> None:
            thresholds = sweep_thresholds(
                load_checkpoint(inputs["model"]),
                load_vocab(inputs["vocab"]),
                load_samples(inputs["valid"]),
                self._templates(),
                cfg.inference["grid"],
                schema=self._schema(),
                options=cfg.inference_options(not self.flags.no_expand),
            )
            thresholds.save(work / "thresholds.json")

        return self._execute("sweep", inputs, params, body)

    def predict(self) -> StageResult:
        cfg = self.config
        inputs = {
            "model": self.artifact("finetune", "model"),
            "vocab": self.artifact("build-vocab", self._vocab_name),
            "thresholds": self.artifact("sweep", "thresholds.json"),
            "test": self.external("test"),
            "schema": self.external("schema", required=False),
            "templates": self.external("templates", required=False),
            "resolver": self.external("resolver", required=False),
        }
        params = {"inference": cfg.inference, "kg": cfg.kg, "entity_matching": not self.flags.no_expand}

        def body(work: Path) -> None:
            table = read_json(inputs["resolver"]) if inputs["resolver"] is not None else {}
            spec = FetchSpec(**cfg.kg) if cfg.kg else None
            rows = predict_objects(
                load_checkpoint(inputs["model"]),
                load_vocab(inputs["vocab"]),
                load_samples(inputs["test"]),
                self._templates(),
                RelationThresholds.load(inputs["thresholds"]),
                schema=self._schema(),
                options=cfg.inference_options(not self.flags.no_expand),
                resolver=SurfaceResolver(table, spec),
            )
            write_jsonl(work / "predictions.jsonl", rows)

        return self._execute("predict", inputs, params, body)

    def evaluate(self, match_on_id: bool = False) -> StageResult:
        inputs = {"predictions": self.artifact("predict", "predictions.jsonl"), "gold": self.external("test")}

        def body(work: Path) -> None:
            report = score_run(inputs["predictions"], inputs["gold"], match_on_id=match_on_id)
            (work / "report.txt").write_text(render_text(report), encoding="utf-8")
            (work / "report.csv").write_text(render_csv(report), encoding="utf-8")
            (work / "report.json").write_text(render_json(report), encoding="utf-8")

        return self._execute("evaluate", inputs, {"match_on_id": match_on_id}, body)

    def stage_plan(self) -> list[str]:
        """Stages ``run_all`` executes under the current flags, in order."""
        skip = set()
        if self.flags.no_expand:
            skip |= {"filter-corpus", "recode", "repretrain"}
        elif self.flags.no_pretrain:
            skip |= {"filter-corpus", "repretrain"}
        return [s for s in STAGES if s not in skip]

    def run(self, stage: str, **kw) -> StageResult:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        return getattr(self, stage.replace("-", "_"))(**kw)

    def run_all(self, match_on_id: bool = False) -> list[StageResult]:
        self.check_inputs()
        results = []
        for stage in self.stage_plan():
            kw = {"match_on_id": match_on_id} if stage == "evaluate" else {}
            results.append(self.run(stage, **kw))
        return results

    def report(self) -> dict:
        return read_json(self.artifact("evaluate", "report.json"))
