"""FastAPI service wrapping the training laboratory.

Every command-line verb maps onto one endpoint; training runs as a
background job that clients poll. All human-readable tables returned by the
endpoints are also written to machine-readable files next to the artifacts
they describe.
"""

from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..analysis import (
    capture_from_model,
    cls_sep_mass_rows,
    drift,
    loss_at_step_csv,
    loss_at_wallclock_csv,
    probe_batch_from_lines,
    speedup_report,
)
from ..assets import asset_path
from ..checks import GRADCHECK_THRESHOLD, model_gradcheck
from ..costs import count_cost
from ..data import Vocab
from ..errors import CheckpointError, ConfigError, DataError, DivergenceError
from ..persistence import load_checkpoint, load_config, load_run_record
from ..schedule import execute_run_config, plan_from_config, plan_scratch
from . import schemas
from .jobs import JobRegistry, error_kind


def _error_response(status, exc):
    return JSONResponse(status_code=status,
                        content={"error_kind": error_kind(exc), "detail": str(exc)})


def _plan_table(rows, total, scratch_total, relative):
    header = (f"{'stage':<10} {'depth':>5} {'trainable':>20} {'steps':>9} "
              f"{'fwd FLOPs':>12} {'bwd FLOPs':>12} {'comm B':>12} {'rel cost':>9}")
    lines = [header, "-" * len(header)]
    for r in rows:
        tl = r.trainable_layers
        span = f"{tl[0]}..{tl[-1]}" if tl else "-"
        lines.append(
            f"{r.name:<10} {r.depth:>5} {span:>20} {r.steps:>9} "
            f"{r.forward_flops:>12.3e} {r.backward_flops:>12.3e} "
            f"{r.comm_bytes:>12.3e} {r.relative_step_cost_vs_scratch:>9.4f}"
        )
    lines.append("-" * len(header))
    lines.append(
        f"plan total FLOPs {total:.4e} vs scratch {scratch_total:.4e} "
        f"-> relative total cost {relative:.4f}"
    )
    return "\n".join(lines)


def _resolve_vocab(checkpoint_path, vocab_path):
    if vocab_path:
        candidates = [Path(vocab_path)]
    else:
        ckpt = Path(checkpoint_path)
        candidates = [ckpt.parent / "vocab.txt", ckpt.parent.parent / "vocab.txt"]
    for c in candidates:
        if c.exists():
            return Vocab.load(c)
    raise DataError(
        f"no vocab file found near {checkpoint_path}; pass vocab_path explicitly"
    )


def _parse_layer_range(spec):
    if spec is None:
        return None
    try:
        lo, hi = spec.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise DataError(f"bad layer range {spec!r}, expected 'A..B'")
    if hi < lo:
        raise DataError(f"bad layer range {spec!r}: end before start")
    return range(lo, hi + 1)


def create_app():
    app = FastAPI(title="mslt-lab", version=__version__)
    registry = JobRegistry()
    app.state.jobs = registry

    @app.exception_handler(ConfigError)
    async def _config_error(request, exc):
        return _error_response(400, exc)

    @app.exception_handler(DataError)
    async def _data_error(request, exc):
        return _error_response(400, exc)

    @app.exception_handler(CheckpointError)
    async def _checkpoint_error(request, exc):
        return _error_response(400, exc)

    @app.exception_handler(DivergenceError)
    async def _divergence_error(request, exc):
        return _error_response(409, exc)

    @app.exception_handler(FileNotFoundError)
    async def _missing_file(request, exc):
        return _error_response(404, exc)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(version=__version__)

    @app.post("/plan", response_model=schemas.PlanResponse)
    def plan(req: schemas.PlanRequest):
        cfg = load_config(req.config_path)
        if req.regime:
            cfg.regime = req.regime
            cfg.validate()
        mc = cfg.model_config()
        schedule = plan_from_config(cfg, mc)

        scratch = plan_scratch(mc, cfg.total_steps)
        scratch_stage = scratch.stages[0]
        scratch_cost = count_cost(mc, mc.num_layers, scratch_stage.partition,
                                  cfg.batch_size, cfg.seq_len)
        scratch_step_flops = scratch_cost.forward_flops + scratch_cost.backward_flops

        rows = []
        total_flops = 0
        for stage in schedule.stages:
            cost = count_cost(mc, stage.depth_after_growth, stage.partition,
                              cfg.batch_size, cfg.seq_len)
            step_flops = cost.forward_flops + cost.backward_flops
            total_flops += step_flops * stage.steps
            rows.append(schemas.PlanStageRow(
                name=stage.name,
                depth=stage.depth_after_growth,
                growth=stage.growth,
                trainable_layers=sorted(stage.partition.trainable_layers),
                steps=stage.steps,
                forward_flops=cost.forward_flops,
                backward_flops=cost.backward_flops,
                comm_bytes=cost.comm_bytes,
                trainable_params=cost.trainable_params,
                relative_step_cost_vs_scratch=step_flops / scratch_step_flops,
            ))
        scratch_total = scratch_step_flops * cfg.total_steps
        relative = total_flops / scratch_total
        return schemas.PlanResponse(
            regime=schedule.regime,
            total_steps=schedule.total_steps,
            stages=rows,
            total_flops=total_flops,
            scratch_total_flops=scratch_total,
            relative_total_cost_vs_scratch=relative,
            table=_plan_table(rows, total_flops, scratch_total, relative),
        )

    @app.post("/train", response_model=schemas.TrainSubmitResponse)
    def train(req: schemas.TrainRequest):
        cfg = load_config(req.config_path)  # fail fast on config errors

        def target():
            return execute_run_config(cfg, out_dir=req.out_dir, seed=req.seed,
                                      resume=req.resume)

        job = registry.submit(target, out_dir=req.out_dir or cfg.out_dir or None)
        return schemas.TrainSubmitResponse(job_id=job.job_id)

    @app.get("/jobs/{job_id}", response_model=schemas.JobStatusResponse)
    def job_status(job_id: str):
        job = registry.get(job_id)
        if job is None:
            return _error_response(404, KeyError(f"unknown job {job_id}"))
        return schemas.JobStatusResponse(**job.status_dict())

    @app.get("/jobs")
    def all_jobs():
        return [job.status_dict() for job in registry.all_jobs()]

    @app.post("/gradcheck", response_model=schemas.GradcheckResponse)
    def gradcheck(req: schemas.GradcheckRequest):
        model_config = None
        if req.config_path:
            model_config = load_config(req.config_path).model_config()
        report = model_gradcheck(
            model_config=model_config,
            mutate=req.mutate,
            eps=req.eps,
            max_coords_per_param=req.max_coords_per_param,
            seed=req.seed,
        )
        return schemas.GradcheckResponse(
            passed=report.global_max < GRADCHECK_THRESHOLD,
            threshold=GRADCHECK_THRESHOLD,
            global_max_rel_error=report.global_max,
            worst_parameter=report.worst_parameter,
            coords_checked=report.coords_checked,
            per_parameter=report.per_parameter,
        )

    @app.post("/analyze-attention", response_model=schemas.AnalyzeAttentionResponse)
    def analyze_attention(req: schemas.AnalyzeAttentionRequest):
        vocab = _resolve_vocab(req.checkpoint_a, req.vocab_path)
        probes_path = Path(req.probes_path) if req.probes_path else asset_path("probes.txt")
        lines = probes_path.read_text(encoding="utf-8").splitlines()

        model_a, _, _ = load_checkpoint(req.checkpoint_a)
        model_b, _, _ = load_checkpoint(req.checkpoint_b)
        for name, model in (("a", model_a), ("b", model_b)):
            if model.config.vocab != vocab.size:
                raise DataError(
                    f"vocab size {vocab.size} does not match checkpoint_{name} "
                    f"vocab {model.config.vocab}"
                )

        seq_len = min(model_a.config.max_seq_len, model_b.config.max_seq_len)
        batch, valid_lens = probe_batch_from_lines(lines, vocab, seq_len)
        map_a = capture_from_model(model_a, batch, valid_lens, probe_id=str(probes_path))
        map_b = capture_from_model(model_b, batch, valid_lens, probe_id=str(probes_path))

        report = drift(map_a, map_b, _parse_layer_range(req.layers))
        drift_rows = report.rows()
        mean_js = float(report.values.mean())
        mass_a = cls_sep_mass_rows(map_a)
        mass_b = cls_sep_mass_rows(map_b)

        header = f"{'layer':>5} {'head':>5} {'js_drift':>10}"
        lines_out = [header, "-" * len(header)]
        lines_out += [f"{r['layer']:>5} {r['head']:>5} {r['js']:>10.6f}" for r in drift_rows]
        lines_out.append(f"mean JS drift over layers {report.layers}: {mean_js:.6f}")
        table = "\n".join(lines_out)

        out_dir = Path(req.out_dir) if req.out_dir else Path(req.checkpoint_a).parent / "analysis"
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        for name, payload in (
            ("drift.jsonl", drift_rows),
            ("attention_mass_a.jsonl", mass_a),
            ("attention_mass_b.jsonl", mass_b),
        ):
            path = out_dir / name
            path.write_text(
                "".join(json.dumps(r, sort_keys=True) + "\n" for r in payload),
                encoding="utf-8")
            files.append(str(path))
        table_path = out_dir / "drift.txt"
        table_path.write_text(table + "\n", encoding="utf-8")
        files.append(str(table_path))

        return schemas.AnalyzeAttentionResponse(
            layers=report.layers,
            drift=[schemas.DriftRow(**r) for r in drift_rows],
            mean_js=mean_js,
            cls_sep_mass_a=mass_a,
            cls_sep_mass_b=mass_b,
            files=files,
            table=table,
        )

    @app.post("/compare", response_model=schemas.CompareResponse)
    def compare(req: schemas.CompareRequest):
        if len(req.run_dirs) < 2:
            raise DataError("compare needs at least 2 run directories")
        records = [load_run_record(d) for d in req.run_dirs]
        report = speedup_report(records)
        out_dir = Path(req.out_dir) if req.out_dir else Path(req.run_dirs[0]).parent / "compare"
        out_dir.mkdir(parents=True, exist_ok=True)
        files = []
        (out_dir / "speedup.txt").write_text(report.table + "\n", encoding="utf-8")
        files.append(str(out_dir / "speedup.txt"))
        (out_dir / "speedup_rows.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in report.rows),
            encoding="utf-8")
        files.append(str(out_dir / "speedup_rows.jsonl"))
        (out_dir / "loss_at_step.csv").write_text(loss_at_step_csv(records),
                                                  encoding="utf-8")
        files.append(str(out_dir / "loss_at_step.csv"))
        (out_dir / "loss_at_wallclock.csv").write_text(loss_at_wallclock_csv(records),
                                                       encoding="utf-8")
        files.append(str(out_dir / "loss_at_wallclock.csv"))
        return schemas.CompareResponse(table=report.table, rows=report.rows, files=files)

    return app
