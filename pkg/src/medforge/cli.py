"""``forge`` command-line interface.

Verbs cover the individual pipeline stages plus the two evaluation
protocols; ``forge run`` executes the whole construction pipeline from one
config file. Backend credentials come from environment variables only;
everything else lives in config files.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .datamodel import McqSubset, read_dataset, read_records, write_records
from .gateway import BackendConfig, BackendKind, CacheMode, Gateway
from .pipeline import PipelineConfig, PipelineRun, emit_train_config, run_pipeline


def _load_gateway(backends_file: str | None, config_file: str | None) -> Gateway:
    gateway = Gateway()
    specs = []
    if backends_file:
        import yaml

        with open(backends_file, "r", encoding="utf-8") as fh:
            specs = yaml.safe_load(fh) or []
    elif config_file:
        specs = [b.__dict__ for b in PipelineConfig.load(config_file).backends]
    if not specs:
        specs = [{"backend_id": "mock", "kind": "mock"}]
    for spec in specs:
        if isinstance(spec, BackendConfig):
            gateway.register_backend(spec)
        else:
            gateway.register_backend(
                BackendConfig(
                    backend_id=spec["backend_id"],
                    kind=BackendKind(spec["kind"]),
                    endpoint=spec.get("endpoint", ""),
                    model=spec.get("model", ""),
                    max_concurrency=int(spec.get("max_concurrency", 4)),
                    requests_per_minute=int(spec.get("requests_per_minute", 600)),
                    max_retries=int(spec.get("max_retries", 3)),
                    cache_mode=CacheMode(spec.get("cache_mode", "off")),
                    cache_dir=spec.get("cache_dir", ".forge_cache"),
                    api_key_env=spec.get("api_key_env", ""),
                )
            )
    return gateway


@click.group()
def main():
    """Build and evaluate conversational medical SFT corpora."""


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=20240901, show_default=True, type=int)
def synth(out_dir: str, seed: int):
    """Write a miniature synthetic input corpus plus pipeline config."""
    from .synthdata import write_miniature_corpus

    written = write_miniature_corpus(out_dir, seed=seed)
    click.echo(f"wrote corpus under {written['out_dir']} (config: {written['config']})")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def run(config_path: str):
    """Run the full construction pipeline from a config file."""
    report = run_pipeline(config_path)
    click.echo(json.dumps({"stage_files": report.get("stage_files", {}),
                           "digests": report.get("digests", {})}, indent=2))


def _run_single_stage(config_path: str, until: str):
    config = PipelineConfig.load(config_path)
    runner = PipelineRun(config)
    order = ["ingest", "sample", "reconstruct", "kgqa", "medmcqa", "general", "curate", "assemble"]
    stages = {
        "ingest": runner._stage_ingest,
        "sample": runner._stage_sample,
        "reconstruct": runner._stage_reconstruct,
        "kgqa": runner._stage_kgqa,
        "medmcqa": runner._stage_medmcqa,
        "general": runner._stage_general,
        "curate": runner._stage_curate,
        "assemble": runner._stage_assemble,
    }
    for name in order[: order.index(until) + 1]:
        stages[name]()
    return runner


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def ingest(config_path: str):
    """Validate raw inputs and report counts."""
    runner = _run_single_stage(config_path, "ingest")
    click.echo(json.dumps(runner.report["stages"]["ingest"], indent=2))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def sample(config_path: str):
    """Filter raw records, extract the department distribution, draw pools."""
    runner = _run_single_stage(config_path, "sample")
    click.echo(json.dumps(runner.report["stages"]["sample"], indent=2))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def reconstruct(config_path: str):
    """Rewrite the sampled dialogue pools through the builder backend."""
    runner = _run_single_stage(config_path, "reconstruct")
    keys = [k for k in runner.report["stages"] if k.startswith("reconstruct")]
    click.echo(json.dumps({k: runner.report["stages"][k] for k in keys}, indent=2))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def kgqa(config_path: str):
    """Generate QA dialogue samples from the knowledge graph."""
    runner = _run_single_stage(config_path, "kgqa")
    click.echo(json.dumps(runner.report["stages"]["kgqa"], indent=2))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
def assemble(config_path: str):
    """Build stage-1/stage-2 training files with manifest accounting."""
    runner = _run_single_stage(config_path, "assemble")
    click.echo(json.dumps(runner.report["stages"]["assemble"], indent=2))


@main.command("train-config")
@click.option("--stage", required=True, type=click.IntRange(1, 2))
@click.option("--out", "out_path", required=True, type=click.Path())
def train_config(stage: int, out_path: str):
    """Emit the fine-tuning hyperparameters for a stage."""
    config = emit_train_config(stage, out_path)
    click.echo(json.dumps(config.to_record(), indent=2))


@main.command()
@click.option("--run-dir", "run_dir", required=True, type=click.Path(exists=True))
def report(run_dir: str):
    """Print the run report of a finished pipeline run."""
    path = Path(run_dir) / "run_report.json"
    if not path.exists():
        raise click.ClickException(f"no run_report.json under {run_dir}")
    click.echo(path.read_text(encoding="utf-8"))


@main.group()
def curate():
    """Human-review workflow over the curation store."""


@curate.command()
@click.option("--store", "store_dir", required=True, type=click.Path())
@click.option("--addr", default="127.0.0.1:8340", show_default=True)
@click.option("--target", default=2000, show_default=True, type=int)
@click.option("--backends", "backends_file", default=None, type=click.Path(exists=True))
@click.option("--generation-backend", default="", help="backend id used by /api/generate")
@click.option("--ui", "ui_dir", default=None, type=click.Path(exists=True),
              help="directory with the built review UI to serve at /")
def serve(store_dir: str, addr: str, target: int, backends_file: str | None,
          generation_backend: str, ui_dir: str | None):
    """Serve the curation HTTP API (blocks until interrupted)."""
    from .curation import CurationStore
    from .curation_api import CurationServer

    store = CurationStore(store_dir, target=target)
    gateway = _load_gateway(backends_file, None) if generation_backend else None
    host, _, port = addr.rpartition(":")
    server = CurationServer(store, host or "127.0.0.1", int(port), gateway,
                            generation_backend, ui_dir=ui_dir)
    click.echo(f"curation api on http://{addr} (store: {store_dir})")
    server.run_forever()


@curate.command("export")
@click.option("--store", "store_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--stage1-file", default=None, type=click.Path(exists=True),
              help="stage-1 training file for the leak check")
def curate_export(store_dir: str, out_path: str, stage1_file: str | None):
    """Export accepted/edited items as the stage-2 preference set."""
    from .curation import CurationStore
    from .datamodel import write_dataset

    store = CurationStore(store_dir)
    stage1_ids = set()
    if stage1_file:
        stage1_ids = {s.id for s in read_dataset(stage1_file)}
        stage1_ids |= {
            s.provenance.origin_record_id for s in read_dataset(stage1_file)
            if s.provenance.origin_record_id
        }
    samples = store.export_stage2(stage1_ids)
    count = write_dataset(samples, out_path)
    click.echo(f"exported {count} samples to {out_path}")


@main.group("eval")
def eval_group():
    """Evaluation protocols."""


@eval_group.command()
@click.option("--benchmark", "benchmark_file", required=True, type=click.Path(exists=True))
@click.option("--backend", "backend_id", required=True)
@click.option("--mode", type=click.Choice(["zero", "few"]), default="zero", show_default=True)
@click.option("--shots", "shots_k", default=3, show_default=True, type=int)
@click.option("--shot-pool", "shot_pool_file", default=None, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--backends", "backends_file", default=None, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--weighted", is_flag=True, help="also print the count-weighted average")
def mcq(benchmark_file, backend_id, mode, shots_k, shot_pool_file, seed, backends_file, out_path, weighted):
    """Query a backend over a multiple-choice benchmark and score it."""
    from .mcq import load_mcq, render_mcq_table, run_benchmark, score

    gateway = _load_gateway(backends_file, None)
    items, rejects = load_mcq(benchmark_file)
    if rejects:
        click.echo(f"rejected {len(rejects)} items at load", err=True)
    benchmark: dict[McqSubset, list] = {}
    for item in items:
        benchmark.setdefault(item.subset, []).append(item)

    shot_pools = None
    if shot_pool_file:
        shot_items, _ = load_mcq(shot_pool_file)
        shot_pools = {}
        for item in shot_items:
            shot_pools.setdefault(item.subset, []).append(item)

    predictions = run_benchmark(
        benchmark, gateway, backend_id,
        mode="few_shot" if mode == "few" else "zero_shot",
        shot_pools=shot_pools, shots_k=shots_k, seed=seed,
    )
    mcq_report = score(predictions, benchmark)
    click.echo(render_mcq_table(mcq_report))
    if weighted:
        click.echo(f"weighted average: {mcq_report.average_weighted * 100:.2f}")
    if out_path:
        write_records([mcq_report.to_record()], out_path)
        click.echo(f"report written to {out_path}")


@eval_group.command()
@click.option("--cases", "cases_file", required=True, type=click.Path(exists=True))
@click.option("--doctor", "doctor_backend", required=True)
@click.option("--patient", "patient_backend", required=True)
@click.option("--judge", "judge_backend", required=True)
@click.option("--rounds", default=3, show_default=True, type=int)
@click.option("--group-by", "group_by", type=click.Choice(["none", "department", "intent"]),
              default="none", show_default=True)
@click.option("--backends", "backends_file", default=None, type=click.Path(exists=True))
@click.option("--out", "out_path", default=None, type=click.Path())
def dialogue(cases_file, doctor_backend, patient_backend, judge_backend, rounds, group_by,
             backends_file, out_path):
    """Run simulated consultations over an evaluation case file and score
    the transcripts with the judge backend."""
    from .consult import aggregate, evaluate_cases, render_report
    from .datamodel import EvalCase

    gateway = _load_gateway(backends_file, None)
    cases = [EvalCase.from_record(rec) for rec in read_records(cases_file)]
    results, quarantined = evaluate_cases(
        cases, gateway, doctor_backend, patient_backend, judge_backend, rounds=rounds,
    )
    if quarantined:
        click.echo(f"quarantined {len(quarantined)} cases", err=True)
    consult_report = aggregate([(case, verdict) for case, _, verdict in results], group_by=group_by)
    click.echo(render_report(consult_report))
    if out_path:
        records = [
            {"case": case.to_record(), "transcript": transcript.to_record(),
             "score": verdict.to_record() if verdict else None}
            for case, transcript, verdict in results
        ]
        write_records(records, out_path)
        click.echo(f"transcripts written to {out_path}")


@main.command("eval-set")
@click.option("--cmb", "cmb_file", required=True, type=click.Path(exists=True))
@click.option("--cmd", "cmd_file", required=True, type=click.Path(exists=True))
@click.option("--cmid", "cmid_file", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_set(cmb_file, cmd_file, cmid_file, seed, out_path):
    """Assemble the consultation evaluation case set."""
    from .consult import build_eval_set

    cases = build_eval_set(
        read_records(cmb_file), read_records(cmd_file), read_records(cmid_file), seed=seed
    )
    write_records((c.to_record() for c in cases), out_path)
    click.echo(f"wrote {len(cases)} cases to {out_path}")


if __name__ == "__main__":
    sys.exit(main())
