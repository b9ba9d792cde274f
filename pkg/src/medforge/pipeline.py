"""End-to-end corpus construction from one config file.

Stages run in dependency order (ingest, filter, sample, reconstruct, KG
QA, exam-question adaptation, general-data sampling, curation, assembly,
training-config emission); every stage records its inputs, outputs, and
seeds in the run report. With a deterministic backend or a replay cache,
re-running a config reproduces every output file byte for byte.

Seeds: each stage derives its own stream from the top-level seed via the
``SeededRng.derive`` scheme, so one seed in the config fixes the corpus.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .curation import CurationState, CurationStore, generate_preference_set, select_candidates
from .datamodel import (
    DatasetManifest,
    DialogueSample,
    ManifestComponent,
    PipelineStep,
    ProvenanceRecord,
    Role,
    Source,
    StageTag,
    TrainStageConfig,
    Turn,
    read_dataset,
    read_records,
    write_dataset,
    write_records,
)
from .errors import (
    ForgeError,
    LeakError,
    ManifestMismatchError,
    StageError,
)
from .gateway import (
    BackendConfig,
    BackendKind,
    CacheMode,
    ChatRequest,
    Gateway,
    Message,
    MsgRole,
    TAG_MCQA_REFINE,
    TAG_TRANSLATE,
    format_block,
    run_ordered,
    text_digest,
)
from .kgqa import generate_kgqa, load_kg, sample_bundles
from .reconstruct import (
    adapt_verbatim,
    load_filter_rules,
    filter_records,
    read_raw_records,
    reconstruct,
    reconstruct_corpus,
)
from .sampling import SeededRng, draw_uniform, extract_department_distribution
from .taxonomy import DepartmentTaxonomy

# Full-scale component targets and the abilities each one trains.
FULL_SCALE_COMPONENTS = (
    ("meddialog_reconstructed", Source.MEDDIALOG, 400_000, StageTag.STAGE1,
     frozenset({"domain_knowledge", "behavioral_pattern", "dialogue_ability"})),
    ("cmedqa2_reconstructed", Source.CMEDQA2, 20_000, StageTag.STAGE1,
     frozenset({"domain_knowledge"})),
    ("kg_qa", Source.KGQA, 50_000, StageTag.STAGE1, frozenset({"domain_knowledge"})),
    ("behavioral_preference", Source.PREFERENCE, 2_000, StageTag.STAGE2,
     frozenset({"behavioral_pattern", "human_preference"})),
    ("medmcqa_adapted", Source.MEDMCQA, 8_000, StageTag.STAGE1, frozenset({"domain_knowledge"})),
    ("moss_general", Source.GENERAL, 33_000, StageTag.STAGE1,
     frozenset({"behavioral_pattern", "dialogue_ability"})),
    ("alpaca_general", Source.GENERAL, 1_000, StageTag.STAGE2, frozenset({"human_preference"})),
)


def full_scale_manifest(seed: int = 0) -> DatasetManifest:
    return DatasetManifest(
        components=tuple(
            ManifestComponent(name=n, source=s, target_size=t, stage_tag=st, abilities=a)
            for n, s, t, st, a in FULL_SCALE_COMPONENTS
        ),
        seed=seed,
    )


def scaled_manifest(divisor: int, seed: int = 0) -> DatasetManifest:
    """Full-scale manifest with every target divided (desk-scale runs)."""
    return DatasetManifest(
        components=tuple(
            ManifestComponent(
                name=n, source=s, target_size=max(t // divisor, 1), stage_tag=st, abilities=a
            )
            for n, s, t, st, a in FULL_SCALE_COMPONENTS
        ),
        seed=seed,
    )


def assemble_mix(
    manifest: DatasetManifest,
    component_files: Mapping[str, str | Path],
    out_dir: str | Path,
) -> dict:
    """Combine validated component files into stage-1/stage-2 training
    files with exact manifest accounting.

    Every component file must hold exactly its manifest count (error names
    the component and delta), stage-2 ids must not appear in stage 1, and
    each stage file gets a seeded global shuffle.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not manifest.components:
        raise ForgeError("manifest has no components")

    per_component: dict[str, list[DialogueSample]] = {}
    for component in manifest.components:
        path = component_files.get(component.name)
        if path is None or not Path(path).exists():
            raise ForgeError(f"component {component.name!r}: file missing ({path})")
        samples = read_dataset(path)
        if len(samples) != component.target_size:
            raise ManifestMismatchError(component.name, component.target_size, len(samples))
        bad_source = [s.id for s in samples if s.source is not component.source]
        if bad_source:
            raise ForgeError(
                f"component {component.name!r}: {len(bad_source)} samples with wrong source"
            )
        per_component[component.name] = samples

    stage_files: dict[str, str] = {}
    accounting: dict[str, dict] = {}
    ids_by_stage: dict[StageTag, set[str]] = {}
    for stage in (StageTag.STAGE1, StageTag.STAGE2):
        pooled: list[DialogueSample] = []
        for component in manifest.for_stage(stage):
            samples = per_component[component.name]
            resolved = [
                s if s.stage_tag is stage else _with_stage(s, stage)
                for s in samples
            ]
            pooled.extend(resolved)
            accounting[component.name] = {
                "stage": stage.value,
                "count": len(samples),
                "source": component.source.value,
            }
        if stage is StageTag.STAGE1 and any(s.source is Source.PREFERENCE for s in pooled):
            raise ForgeError("stage-1 pool contains preference samples")
        rng = SeededRng(manifest.seed).derive(f"assemble:{stage.value}")
        rng.shuffle(pooled)
        path = out_dir / f"{stage.value}.jsonl"
        write_dataset(pooled, path)
        stage_files[stage.value] = str(path)
        ids_by_stage[stage] = {s.id for s in pooled}

    overlap = ids_by_stage[StageTag.STAGE1] & ids_by_stage[StageTag.STAGE2]
    if overlap:
        raise LeakError("stage-2 ids appear in stage 1", sorted(overlap))
    origin_stage1 = {
        s.provenance.origin_record_id
        for name, samples in per_component.items()
        for s in samples
        if accounting[name]["stage"] == "stage1" and s.provenance.origin_record_id
    }
    origin_leaks = [
        s.id
        for name, samples in per_component.items()
        if accounting[name]["stage"] == "stage2"
        for s in samples
        if s.provenance.origin_record_id and s.provenance.origin_record_id in origin_stage1
    ]
    if origin_leaks:
        raise LeakError("stage-2 samples derive from stage-1 source records", origin_leaks)

    report = {
        "stage_files": stage_files,
        "components": accounting,
        "stage1_count": len(ids_by_stage[StageTag.STAGE1]),
        "stage2_count": len(ids_by_stage[StageTag.STAGE2]),
        "leak_checks": {"stage_id_overlap": 0, "origin_overlap": 0},
    }
    write_records([report], out_dir / "assembly_report.jsonl")
    return report


def _with_stage(sample: DialogueSample, stage: StageTag) -> DialogueSample:
    return DialogueSample(
        id=sample.id,
        source=sample.source,
        department=sample.department,
        stage_tag=stage,
        turns=sample.turns,
        provenance=sample.provenance,
    )


STAGE_CONFIGS = {
    1: TrainStageConfig(
        stage=1, global_batch_size=24, learning_rate=1e-5, optimizer="adamw",
        epochs=1, max_seq_len=2048, warmup_steps=1800, weight_decay=0.0,
    ),
    2: TrainStageConfig(
        stage=2, global_batch_size=8, learning_rate=5e-6, optimizer="adamw",
        epochs=1, max_seq_len=2048, warmup_steps=0, weight_decay=0.0,
    ),
}


def emit_train_config(stage: int, path: str | Path) -> TrainStageConfig:
    """Write the fine-tuning hyperparameters for a stage as YAML."""
    if stage not in STAGE_CONFIGS:
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    config = STAGE_CONFIGS[stage]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_record(), fh, sort_keys=False)
    return config


def read_train_config(path: str | Path) -> TrainStageConfig:
    with Path(path).open("r", encoding="utf-8") as fh:
        return TrainStageConfig.from_record(yaml.safe_load(fh))


# --- exam-question adaptation ----------------------------------------------

def adapt_mcq_records(
    records: Sequence[dict],
    gateway: Gateway,
    backend_id: str,
    keep_ratio: float,
    seed: int,
    id_prefix: str = "mcqa",
) -> list[DialogueSample]:
    """Adapt exam questions into QA samples.

    A seeded fraction keeps the multiple-choice format and is only
    translated; the rest are refined (question + gold + explanation into a
    free-form QA pair) and then translated, reusing the gateway for both
    steps.
    """
    n_keep = int(math.floor(len(records) * keep_ratio + 0.5))
    rng = SeededRng(seed).derive("mcq_keep")
    keep_positions = set(rng.sample_indices(len(records), n_keep)) if records else set()

    def one(indexed: tuple[int, dict]) -> DialogueSample:
        index, rec = indexed
        if index in keep_positions:
            return _mcq_direct(rec, gateway, backend_id, f"{id_prefix}:{index:06d}")
        return _mcq_refined(rec, gateway, backend_id, f"{id_prefix}:{index:06d}")

    return run_ordered(list(enumerate(records)), one, max_workers=4)


def _translate(text: str, gateway: Gateway, backend_id: str) -> tuple[str, PipelineStep]:
    from .reconstruct import chat_with_retry

    request = ChatRequest(
        backend_id=backend_id,
        messages=(
            Message(MsgRole.USER, "Translate the text below to Chinese. Reply with the translation only.\n\n"
                    + format_block("TEXT", text)),
        ),
        temperature=0.0,
        max_tokens=2048,
        request_tag=TAG_TRANSLATE,
    )

    def parse(content: str) -> str:
        stripped = content.strip()
        if not stripped:
            raise ValueError("empty translation")
        return stripped

    translated, response, prompt_hash = chat_with_retry(gateway, request, parse)
    step = PipelineStep(
        step_name=TAG_TRANSLATE,
        backend_id=backend_id,
        prompt_hash=prompt_hash,
        response_hash=text_digest(response.content),
        timestamp=response.timestamp,
    )
    return translated, step


def _mcq_direct(rec: dict, gateway: Gateway, backend_id: str, sample_id: str) -> DialogueSample:
    options = "\n".join(f"{k}. {v}" for k, v in rec["options"].items())
    question_text = f"{rec['question']}\n{options}"
    translated_q, step = _translate(question_text, gateway, backend_id)
    answer = f"{rec['gold']}. {rec['options'][rec['gold']]}"
    return DialogueSample(
        id=sample_id,
        source=Source.MEDMCQA,
        stage_tag=StageTag.STAGE1,
        turns=(Turn(Role.PATIENT, translated_q), Turn(Role.DOCTOR, answer)),
        provenance=ProvenanceRecord(origin_record_id=rec["id"], pipeline_steps=(step,)),
    )


def _mcq_refined(rec: dict, gateway: Gateway, backend_id: str, sample_id: str) -> DialogueSample:
    from .reconstruct import chat_with_retry

    source_block = (
        f"question: {rec['question']}\n"
        f"correct answer: {rec['options'][rec['gold']]}\n"
        f"explanation: {rec.get('explanation', '')}"
    )
    request = ChatRequest(
        backend_id=backend_id,
        messages=(
            Message(
                MsgRole.USER,
                "Rewrite this exam question, its correct answer, and the explanation "
                "as one natural question-and-answer pair.\n"
                "Answer in exactly this format:\n"
                "INSTRUCTION: <the question>\nANSWER: <the answer>\nEND\n\n"
                + format_block("SOURCE", source_block),
            ),
        ),
        temperature=0.7,
        max_tokens=1024,
        request_tag=TAG_MCQA_REFINE,
    )

    def parse(content: str) -> tuple[str, str]:
        instruction, answer = "", ""
        for line in content.splitlines():
            if line.startswith("INSTRUCTION:"):
                instruction = line[len("INSTRUCTION:"):].strip()
            elif line.startswith("ANSWER:"):
                answer = line[len("ANSWER:"):].strip()
        if not instruction or not answer:
            raise ValueError("response lacks INSTRUCTION/ANSWER lines")
        return instruction, answer

    (instruction, answer), response, prompt_hash = chat_with_retry(gateway, request, parse)
    refine_step = PipelineStep(
        step_name=TAG_MCQA_REFINE,
        backend_id=backend_id,
        prompt_hash=prompt_hash,
        response_hash=text_digest(response.content),
        timestamp=response.timestamp,
    )
    translated_q, t_step_q = _translate(instruction, gateway, backend_id)
    translated_a, t_step_a = _translate(answer, gateway, backend_id)
    steps = _monotonic((refine_step, t_step_q, t_step_a))
    return DialogueSample(
        id=sample_id,
        source=Source.MEDMCQA,
        stage_tag=StageTag.STAGE1,
        turns=(Turn(Role.PATIENT, translated_q), Turn(Role.DOCTOR, translated_a)),
        provenance=ProvenanceRecord(origin_record_id=rec["id"], pipeline_steps=steps),
    )


def _monotonic(steps: Sequence[PipelineStep]) -> tuple[PipelineStep, ...]:
    out: list[PipelineStep] = []
    high = float("-inf")
    for step in steps:
        high = max(high, step.timestamp)
        if step.timestamp < high:
            step = PipelineStep(step.step_name, step.backend_id, step.prompt_hash,
                                step.response_hash, high)
        out.append(step)
    return tuple(out)


# --- run orchestration -------------------------------------------------------

class PipelineConfig:
    """Parsed top-level config file with resolved paths."""

    def __init__(self, data: dict, base_dir: Path):
        self.seed = int(data["seed"])
        self.base_dir = base_dir
        paths = data.get("paths", {})
        self.paths = {key: (base_dir / value) for key, value in paths.items()}
        self.out_dir = self.paths.get("out_dir", base_dir / "out")
        self.backends = [
            BackendConfig(
                backend_id=b["backend_id"],
                kind=BackendKind(b["kind"]),
                endpoint=b.get("endpoint", ""),
                model=b.get("model", ""),
                max_concurrency=int(b.get("max_concurrency", 4)),
                requests_per_minute=int(b.get("requests_per_minute", 600)),
                max_retries=int(b.get("max_retries", 3)),
                cache_mode=CacheMode(b.get("cache_mode", "off")),
                cache_dir=str(base_dir / b["cache_dir"]) if b.get("cache_dir") else str(self.out_dir / "cache" / b["backend_id"]),
                api_key_env=b.get("api_key_env", ""),
            )
            for b in data.get("backends", [])
        ]
        self.builder_backend = data.get("builder_backend", self.backends[0].backend_id if self.backends else "")
        self.manifest = DatasetManifest.from_record(data["manifest"]) if "manifest" in data else scaled_manifest(1000, self.seed)
        options = data.get("options", {})
        self.relations_per_draw = int(options.get("relations_per_draw", 4))
        self.mcq_keep_ratio = float(options.get("mcq_keep_ratio", 0.25))
        self.preference_exemplars = int(options.get("preference_exemplars", 1))
        self.preference_fewshot_k = int(options.get("preference_fewshot_k", 2))
        self.curation_mode = options.get("curation_mode", "auto")
        self.external_preference_file = options.get("external_preference_file")
        self.eval = data.get("eval") or {}

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        return cls(data, base_dir=path.parent)


def file_digest(path: str | Path) -> str:
    import hashlib

    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class PipelineRun:
    """Executes the construction stages for one config."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.gateway = Gateway()
        for backend in config.backends:
            self.gateway.register_backend(backend)
        self.report: dict = {"seed": config.seed, "stages": {}, "started_at": time.time()}
        self._component_files: dict[str, Path] = {}
        self._stage1_origin_ids: set[str] = set()

    def _record_stage(self, name: str, **info) -> None:
        self.report["stages"][name] = info

    def _out(self, name: str) -> Path:
        out = self.config.out_dir
        out.mkdir(parents=True, exist_ok=True)
        return out / name

    def run(self) -> dict:
        stages = [
            ("ingest", self._stage_ingest),
            ("sample", self._stage_sample),
            ("reconstruct", self._stage_reconstruct),
            ("kgqa", self._stage_kgqa),
            ("medmcqa", self._stage_medmcqa),
            ("general", self._stage_general),
            ("curate", self._stage_curate),
            ("assemble", self._stage_assemble),
            ("train-config", self._stage_train_config),
        ]
        if self.config.eval:
            stages.append(("evaluate", self._stage_evaluate))
        for name, stage in stages:
            try:
                stage()
            except ForgeError:
                raise
            except Exception as exc:
                raise StageError(name, str(exc), partial_outputs=[str(self.config.out_dir)]) from exc
        self.report["finished_at"] = time.time()
        report_path = self._out("run_report.json")
        with report_path.open("w", encoding="utf-8") as fh:
            json.dump(self.report, fh, ensure_ascii=False, indent=2, sort_keys=True)
        return self.report

    # individual stages ------------------------------------------------------

    def _stage_ingest(self):
        cfg = self.config
        self.taxonomy = DepartmentTaxonomy.from_file(cfg.paths["taxonomy"])
        self.raw = {
            Source.MEDDIALOG: read_raw_records(cfg.paths["meddialog"]),
            Source.CMEDQA2: read_raw_records(cfg.paths["cmedqa2"]),
        }
        missing = [str(cfg.paths[k]) for k in ("kg", "medmcqa", "moss", "alpaca") if not cfg.paths[k].exists()]
        if missing:
            raise StageError("ingest", f"missing input files: {missing}")
        self._record_stage(
            "ingest",
            meddialog=len(self.raw[Source.MEDDIALOG]),
            cmedqa2=len(self.raw[Source.CMEDQA2]),
            inputs={k: str(v) for k, v in cfg.paths.items()},
        )

    def _stage_sample(self):
        cfg = self.config
        rules = load_filter_rules(cfg.paths["filter_rules"])
        self.kept: dict[Source, list] = {}
        rejected_total = 0
        for source, records in self.raw.items():
            outcome = filter_records(records, rules)
            self.kept[source] = list(outcome.kept)
            rejected_total += len(outcome.rejected)
            write_records(
                ({"id": r.id, "reason": reason} for r, reason in outcome.rejected),
                self._out(f"rejected_{source.value}.jsonl"),
            )

        labels = [r.department for r in self.kept[Source.MEDDIALOG] if r.department]
        self.distribution = extract_department_distribution(labels, self.taxonomy)
        write_records([self.distribution.to_record()], self._out("department_distribution.jsonl"))

        manifest = cfg.manifest
        targets = {c.source: c.target_size for c in manifest.components
                   if c.source in (Source.MEDDIALOG, Source.CMEDQA2)}
        seed = SeededRng(cfg.seed)
        self.sampled: dict[Source, list] = {}
        for source, target in targets.items():
            pool = self.kept[source]
            if target > len(pool):
                raise StageError("sample", f"{source.value}: kept pool {len(pool)} < target {target}")
            self.sampled[source] = draw_uniform(pool, target, seed.derive(f"pool:{source.value}").seed)
        self._stage1_origin_ids = {r.id for records in self.sampled.values() for r in records}
        self._record_stage(
            "sample",
            rejected=rejected_total,
            sampled={s.value: len(v) for s, v in self.sampled.items()},
            distribution_departments=len(self.distribution.weights),
        )

    def _stage_reconstruct(self):
        cfg = self.config
        for source, records in self.sampled.items():
            samples, quarantined = reconstruct_corpus(records, self.gateway, cfg.builder_backend)
            component = next(c for c in cfg.manifest.components if c.source is source)
            if quarantined:
                write_records((q.to_record() for q in quarantined),
                              self._out(f"quarantine_{source.value}.jsonl"))
            path = self._out(f"component_{component.name}.jsonl")
            write_dataset(samples, path)
            self._component_files[component.name] = path
            self._record_stage(
                f"reconstruct:{source.value}",
                emitted=len(samples), quarantined=len(quarantined), output=str(path),
            )

    def _stage_kgqa(self):
        cfg = self.config
        if not cfg.paths["kg"].exists():
            raise StageError("kgqa", f"KG file missing: {cfg.paths['kg']}")
        component = next(c for c in cfg.manifest.components if c.source is Source.KGQA)
        loaded = load_kg(cfg.paths["kg"], self.taxonomy)
        bundles, warnings = sample_bundles(
            loaded.bundles,
            self.distribution,
            component.target_size,
            SeededRng(cfg.seed).derive("kgqa").seed,
            relations_per_draw=cfg.relations_per_draw,
        )
        samples, quarantined = generate_kgqa(bundles, self.gateway, cfg.builder_backend)
        if quarantined:
            write_records((q.to_record() for q in quarantined), self._out("quarantine_kgqa.jsonl"))
        path = self._out(f"component_{component.name}.jsonl")
        write_dataset(samples, path)
        self._component_files[component.name] = path
        plan_tally: dict[str, int] = {}
        for bundle in bundles:
            plan_tally[bundle.department] = plan_tally.get(bundle.department, 0) + 1
        report = loaded.report()
        report.update({
            "plan": {k: plan_tally[k] for k in sorted(plan_tally)},
            "warnings": warnings,
            "emitted": len(samples),
            "quarantined": len(quarantined),
        })
        write_records([report], self._out("kgqa_report.jsonl"))
        self._record_stage("kgqa", **{k: v for k, v in report.items() if k != "department_tally"})

    def _stage_medmcqa(self):
        cfg = self.config
        component = next(c for c in cfg.manifest.components if c.source is Source.MEDMCQA)
        records = read_records(cfg.paths["medmcqa"])
        if component.target_size > len(records):
            raise StageError("medmcqa", f"source pool {len(records)} < target {component.target_size}")
        chosen = draw_uniform(records, component.target_size, SeededRng(cfg.seed).derive("medmcqa").seed)
        samples = adapt_mcq_records(
            chosen, self.gateway, cfg.builder_backend, cfg.mcq_keep_ratio,
            SeededRng(cfg.seed).derive("medmcqa_split").seed,
        )
        path = self._out(f"component_{component.name}.jsonl")
        write_dataset(samples, path)
        self._component_files[component.name] = path
        self._record_stage("medmcqa", emitted=len(samples), output=str(path))

    def _stage_general(self):
        cfg = self.config
        for name, path_key in (("moss_general", "moss"), ("alpaca_general", "alpaca")):
            component = next(c for c in cfg.manifest.components if c.name == name)
            pool = read_dataset(cfg.paths[path_key])
            if component.target_size > len(pool):
                raise StageError("general", f"{name}: pool {len(pool)} < target {component.target_size}")
            chosen = draw_uniform(pool, component.target_size, SeededRng(cfg.seed).derive(f"general:{name}").seed)
            chosen = [_with_stage(s, component.stage_tag) for s in chosen]
            path = self._out(f"component_{name}.jsonl")
            write_dataset(chosen, path)
            self._component_files[name] = path
            self._record_stage(f"general:{name}", emitted=len(chosen), output=str(path))

    def _stage_curate(self):
        cfg = self.config
        component = next(c for c in cfg.manifest.components if c.source is Source.PREFERENCE)
        path = self._out(f"component_{component.name}.jsonl")

        if cfg.curation_mode == "external":
            if not cfg.external_preference_file:
                raise StageError("curate", "curation_mode=external but no external_preference_file")
            samples = read_dataset(cfg.base_dir / cfg.external_preference_file)
            write_dataset(samples, path)
            self._component_files[component.name] = path
            self._record_stage("curate", mode="external", emitted=len(samples))
            return

        # Auto mode: scripted reviewer for dry runs and desk-scale tests.
        leftovers = [
            record
            for source in (Source.MEDDIALOG, Source.CMEDQA2)
            for record in self.kept[source]
            if record.id not in self._stage1_origin_ids
        ]
        pool = [s for s in (adapt_verbatim(r) for r in leftovers) if s is not None]
        target = component.target_size
        n_candidates = min(len(pool), max(target, cfg.preference_exemplars + 1))
        candidates = select_candidates(
            pool, self._stage1_origin_ids, n_candidates, SeededRng(cfg.seed).derive("curation").seed
        )
        store_dir = self._out("curation_store")
        if store_dir.exists():
            # The auto-mode store is fully derived from inputs and seed;
            # start clean so re-runs stay idempotent.
            import shutil

            shutil.rmtree(store_dir)
        store = CurationStore(store_dir, target=target)
        store.add_pending(candidates)

        # Bootstrap exemplars: rewrite the first candidates, then promote.
        for item in candidates[: cfg.preference_exemplars]:
            origin = item.candidate.provenance.origin_record_id
            record = next(r for r in leftovers if r.id == origin)
            rewritten = reconstruct(record, self.gateway, cfg.builder_backend)
            store.submit_decision(item.id, "edit", reviewer="auto", edited=_with_stage(rewritten, StageTag.STAGE2))
            store.submit_decision(item.id, "promote", reviewer="auto")

        seeds = store.items(state=CurationState.PENDING)
        created, quarantined = generate_preference_set(
            store,
            seeds=seeds,
            gateway=self.gateway,
            backend_id=cfg.builder_backend,
            target=target,
            fewshot_k=cfg.preference_fewshot_k,
            seed=SeededRng(cfg.seed).derive("preference").seed,
        )
        for item in created:
            store.submit_decision(item.id, "accept", reviewer="auto")
        if quarantined:
            write_records((q.to_record() for q in quarantined), self._out("quarantine_preference.jsonl"))

        exported = [
            s for s in store.export_stage2(self._stage1_origin_ids)
            if s.source is Source.PREFERENCE
        ]
        if len(exported) != target:
            raise StageError("curate", f"exported {len(exported)} preference samples, target {target}")
        store.snapshot()
        write_dataset(exported, path)
        self._component_files[component.name] = path
        self._record_stage("curate", mode="auto", emitted=len(exported), quarantined=len(quarantined))

    def _stage_assemble(self):
        report = assemble_mix(self.config.manifest, self._component_files, self.config.out_dir)
        digests = {name: file_digest(path) for name, path in report["stage_files"].items()}
        report["digests"] = digests
        self.report["stage_files"] = report["stage_files"]
        self.report["digests"] = digests
        self._record_stage("assemble", **{k: v for k, v in report.items() if k != "components"})

    def _stage_train_config(self):
        paths = {}
        for stage in (1, 2):
            path = self._out(f"train_stage{stage}.yaml")
            emit_train_config(stage, path)
            paths[stage] = str(path)
        self._record_stage("train-config", files=paths)

    def _stage_evaluate(self):
        cfg = self.config
        recorded: dict = {}
        if "mcq" in cfg.eval:
            from .mcq import load_mcq, run_benchmark, score

            spec = cfg.eval["mcq"]
            items, rejects = load_mcq(cfg.base_dir / spec["benchmark"])
            benchmark: dict = {}
            for item in items:
                benchmark.setdefault(item.subset, []).append(item)
            shot_pools = None
            if spec.get("shot_pool"):
                shot_items, _ = load_mcq(cfg.base_dir / spec["shot_pool"])
                shot_pools = {}
                for item in shot_items:
                    shot_pools.setdefault(item.subset, []).append(item)
            predictions = run_benchmark(
                benchmark, self.gateway, spec["backend"],
                mode="few_shot" if spec.get("mode") == "few" else "zero_shot",
                shot_pools=shot_pools, shots_k=int(spec.get("shots", 3)),
                seed=int(spec.get("seed", cfg.seed)),
            )
            mcq_report = score(predictions, benchmark)
            write_records([mcq_report.to_record()], self._out("mcq_report.jsonl"))
            recorded["mcq"] = {"items": len(items), "rejected": len(rejects),
                               "average": mcq_report.average_unweighted}
        if "dialogue" in cfg.eval:
            from .consult import aggregate, evaluate_cases
            from .datamodel import EvalCase

            spec = cfg.eval["dialogue"]
            cases = [EvalCase.from_record(rec) for rec in read_records(cfg.base_dir / spec["cases"])]
            results, quarantined = evaluate_cases(
                cases, self.gateway, spec["doctor"], spec["patient"], spec["judge"],
                rounds=int(spec.get("rounds", 3)),
            )
            report = aggregate(
                [(case, verdict) for case, _, verdict in results],
                group_by=spec.get("group_by", "none"),
            )
            write_records(
                ({"case": case.to_record(), "transcript": transcript.to_record(),
                  "score": verdict.to_record() if verdict else None}
                 for case, transcript, verdict in results),
                self._out("dialogue_transcripts.jsonl"),
            )
            write_records([report.to_record()], self._out("dialogue_report.jsonl"))
            recorded["dialogue"] = {"cases": len(results), "quarantined": len(quarantined),
                                    "overall": report.overall}
        self._record_stage("evaluate", **recorded)


def run_pipeline(config_path: str | Path) -> dict:
    config = PipelineConfig.load(config_path)
    return PipelineRun(config).run()
