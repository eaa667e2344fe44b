"""Training plans and their execution.

Three regimes produce a StageSchedule:

* ``mslt``     — k equal growth stages (stage 1 trains everything at depth
  N/k; later stages grow N/k layers and train only the new layers plus the
  heads, embeddings frozen) followed by a joint retraining stage at reduced
  learning rate.
* ``stacking`` — depth-doubling baseline; every stage trains all parameters.
  The final full-depth stage takes 70% of the steps; the earlier stages
  split the remainder 1:2:4:... (10%/20% for the default two doublings; the
  70% figure is the documented anchor, the earlier split is a default).
* ``scratch``  — one full-depth, all-trainable stage.

``run`` executes stages in order: growth, partition, fresh optimizer state
(warmup restarts per stage; the per-stage warmup is clamped to the stage
length), then (batch -> forward -> backward -> LAMB step) with split
timings. Checkpoints are written at each stage start (post-growth) and end.
The data stream is shared across stages and regimes: equal (corpus, seed)
means batch-identical comparisons at equal step counts.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costs import count_cost
from .data import BatchStream, build_vocab, corpus_lines, read_documents
from .errors import ConfigError, DivergenceError
from .model import TrainablePartition, build_model, forward, grow, set_partition
from .optim import LambHyper, lamb_step, lr_at, rebuild_state
from .persistence import RecordWriter, load_checkpoint, save_checkpoint, write_config_echo
from .tensor import backward


@dataclass(frozen=True)
class Stage:
    name: str
    steps: int
    depth_after_growth: int
    growth: int  # layers added at stage start (0 allowed)
    partition: TrainablePartition
    lr_scale: float = 1.0


@dataclass
class StageSchedule:
    regime: str
    stages: list
    total_steps: int

    def validate(self, config):
        if sum(s.steps for s in self.stages) != self.total_steps:
            raise ConfigError("stage steps do not sum to total_steps")
        if any(s.steps <= 0 for s in self.stages):
            raise ConfigError("every stage needs a positive step count")
        if self.stages[-1].depth_after_growth != config.num_layers:
            raise ConfigError(
                f"final depth {self.stages[-1].depth_after_growth} "
                f"!= configured num_layers {config.num_layers}"
            )
        return self


def _exact_int(x, what):
    rounded = round(x)
    if abs(x - rounded) > 1e-9:
        raise ConfigError(f"{what} = {x} is not an integer step count")
    return int(rounded)


def plan_mslt(config, total_steps, retrain_fraction=0.2, retrain_lr_scale=0.1,
              freeze_scope="all_input"):
    """k growth stages of equal steps plus a final joint retraining stage."""
    config.validate()
    n, k = config.num_layers, config.num_stages
    if k == 1:
        # degenerate plan: a single all-trainable stage (the retrain stage
        # would duplicate it, so the planner collapses them)
        return StageSchedule("mslt", [
            Stage("stage1", total_steps, n, 0, TrainablePartition.all_trainable(n)),
        ], total_steps).validate(config)
    per = n // k
    retrain_steps = _exact_int(total_steps * retrain_fraction, "total_steps*retrain_fraction")
    growth_budget = total_steps - retrain_steps
    if growth_budget % k != 0:
        raise ConfigError(
            f"growth budget {growth_budget} does not divide into {k} equal stages"
        )
    per_stage = growth_budget // k
    if per_stage < 1:
        raise ConfigError("per-stage step count must be >= 1")

    stages = [Stage("stage1", per_stage, per, 0, TrainablePartition.all_trainable(per))]
    for s in range(2, k + 1):
        depth = s * per
        stages.append(Stage(
            f"stage{s}", per_stage, depth, per,
            TrainablePartition.top_layers_only(depth, per, freeze_scope),
        ))
    if retrain_steps:
        stages.append(Stage("retrain", retrain_steps, n, 0,
                            TrainablePartition.all_trainable(n), retrain_lr_scale))
    return StageSchedule("mslt", stages, total_steps).validate(config)


def plan_stacking(config, total_steps, doublings=2):
    """Depth-doubling baseline; all parameters trainable at every stage."""
    config.validate()
    n = config.num_layers
    if n % (2 ** doublings) != 0:
        raise ConfigError(
            f"num_layers ({n}) is not divisible by 2^{doublings} doublings"
        )
    final_steps = _exact_int(total_steps * 0.7, "total_steps*0.7")
    early_budget = total_steps - final_steps
    weights = [2 ** i for i in range(doublings)]
    denom = sum(weights)
    early = [_exact_int(early_budget * w / denom, "stacking stage steps") for w in weights]
    if sum(early) != early_budget:
        raise ConfigError("stacking step split does not sum to the early-stage budget")

    stages = []
    depth = n // (2 ** doublings)
    stages.append(Stage("stack1", early[0], depth, 0, TrainablePartition.all_trainable(depth)))
    for i in range(1, doublings):
        depth *= 2
        stages.append(Stage(f"stack{i + 1}", early[i], depth, depth // 2,
                            TrainablePartition.all_trainable(depth)))
    stages.append(Stage(f"stack{doublings + 1}", final_steps, n, n // 2,
                        TrainablePartition.all_trainable(n)))
    return StageSchedule("stacking", stages, total_steps).validate(config)


def plan_scratch(config, total_steps):
    """Single full-depth all-trainable stage."""
    config.validate()
    n = config.num_layers
    return StageSchedule("scratch", [
        Stage("scratch", total_steps, n, 0, TrainablePartition.all_trainable(n)),
    ], total_steps).validate(config)


def plan_from_config(cfg, model_config=None):
    mc = model_config if model_config is not None else cfg.model_config()
    if cfg.regime == "mslt":
        return plan_mslt(mc, cfg.total_steps, cfg.retrain_fraction,
                         cfg.retrain_lr_scale, cfg.embedding_freeze_scope)
    if cfg.regime == "stacking":
        return plan_stacking(mc, cfg.total_steps, cfg.stacking_doublings)
    if cfg.regime == "scratch":
        return plan_scratch(mc, cfg.total_steps)
    raise ConfigError(f"unknown regime {cfg.regime!r}")


@dataclass
class RunRecord:
    """In-memory mirror of what the record files contain."""

    step_records: list = field(default_factory=list)
    stage_summaries: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _stage_hyper(cfg, stage):
    return LambHyper(
        peak_lr=cfg.peak_lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.opt_eps,
        weight_decay=cfg.weight_decay,
        warmup_steps=min(cfg.warmup_steps, stage.steps),
        total_steps=stage.steps,
    ).validate()


def _checkpoint_path(out_dir, stage_index, edge):
    return Path(out_dir) / "checkpoints" / f"stage{stage_index:02d}.{edge}.ckpt"


def _find_resume_point(out_dir, n_stages):
    for si in range(n_stages - 1, -1, -1):
        path = _checkpoint_path(out_dir, si, "end")
        if path.exists():
            return si, path
    return None, None


def run(plan, cfg, out_dir, resume=False, documents=None, vocab=None):
    """Execute a plan; returns (model, RunRecord). Deterministic given seed.

    Wall-clock fields are recorded but never feed back into training, so
    loss records are byte-reproducible. On a non-finite loss the run writes
    a diagnostic checkpoint and raises DivergenceError.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, out_dir)

    if documents is None:
        documents = read_documents(cfg.corpus)
    if vocab is None:
        vocab = build_vocab(corpus_lines(cfg.corpus), cfg.vocab_cap)
    vocab.save(out_dir / "vocab.txt")

    model_config = cfg.model_config(vocab=vocab.size).validate()
    root = np.random.SeedSequence(cfg.seed)
    init_ss, data_ss, dropout_ss = root.spawn(3)
    dropout_rng = np.random.default_rng(dropout_ss)
    stream = BatchStream(documents, vocab, cfg.batch_size, cfg.seq_len, data_ss)

    start_stage, global_step = 0, 0
    model, prev_state = None, None
    if resume:
        done_stage, ckpt = _find_resume_point(out_dir, len(plan.stages))
        if done_stage is not None:
            model, prev_state, meta = load_checkpoint(ckpt)
            start_stage = done_stage + 1
            global_step = meta["global_step"]
            stream.skip(global_step)
    if model is None:
        model = build_model(model_config, init_ss, depth=plan.stages[0].depth_after_growth)

    writer = RecordWriter(out_dir, cfg.log_every)
    record = RunRecord()
    run_t0 = time.perf_counter()
    base_meta = {"regime": plan.regime, "seed": cfg.seed}

    try:
        for si in range(start_stage, len(plan.stages)):
            stage = plan.stages[si]
            if stage.growth:
                grow(model, stage.growth)
            set_partition(model, stage.partition)
            state = rebuild_state(
                model, carry_from=prev_state if cfg.carry_optimizer_state else None)
            hyper = _stage_hyper(cfg, stage)
            trainable_ids = frozenset(p.id for p in model.trainable_parameters())

            meta = dict(base_meta, stage=si, stage_name=stage.name, global_step=global_step)
            save_checkpoint(model, state, meta, _checkpoint_path(out_dir, si, "start"))
            cost = count_cost(model.config, model.depth, stage.partition,
                              cfg.batch_size, cfg.seq_len)
            writer.write_stage_cost(si, cost)

            fwd_total = bwd_total = 0.0
            stage_t0 = time.perf_counter()
            for step_in_stage in range(stage.steps):
                batch = next(stream)

                t0 = time.perf_counter()
                out = forward(model, batch, dropout_rate=cfg.dropout,
                              dropout_rng=dropout_rng)
                t1 = time.perf_counter()

                mlm = out.mlm_loss.item()
                nsp = out.nsp_loss.item()
                total = out.total_loss.item()
                if not np.isfinite(total):
                    save_checkpoint(model, state, dict(meta, global_step=global_step),
                                    out_dir / "checkpoints" / "diverged.ckpt")
                    raise DivergenceError(
                        f"non-finite loss at global step {global_step} "
                        f"(stage {stage.name}): mlm={mlm}, nsp={nsp}"
                    )

                model.zero_grads()
                backward(out.total_loss)
                if state.covered_ids() != trainable_ids:
                    raise RuntimeError("optimizer state does not cover the trainable set")
                lamb_step(model, state, hyper, step_in_stage, lr_scale=stage.lr_scale)
                t2 = time.perf_counter()

                fwd_total += t1 - t0
                bwd_total += t2 - t1
                if writer.should_log(step_in_stage, stage.steps):
                    rec = {
                        "step": global_step,
                        "stage": si,
                        "stage_name": stage.name,
                        "mlm_loss": mlm,
                        "nsp_loss": nsp,
                        "total_loss": total,
                        "lr": lr_at(step_in_stage, hyper) * stage.lr_scale,
                        "fwd_ms": (t1 - t0) * 1e3,
                        "bwd_ms": (t2 - t1) * 1e3,
                        "cum_seconds": t2 - run_t0,
                    }
                    writer.write_step(rec)
                    record.step_records.append(rec)
                global_step += 1

            stage_wall = time.perf_counter() - stage_t0
            meta = dict(base_meta, stage=si, stage_name=stage.name, global_step=global_step)
            save_checkpoint(model, state, meta, _checkpoint_path(out_dir, si, "end"))
            record.stage_summaries.append({
                "index": si,
                "name": stage.name,
                "steps": stage.steps,
                "depth": stage.depth_after_growth,
                "trainable_layers": sorted(stage.partition.trainable_layers),
                "mean_fwd_ms": fwd_total / stage.steps * 1e3,
                "mean_bwd_ms": bwd_total / stage.steps * 1e3,
                "wall_seconds": stage_wall,
                "cost": cost.to_dict(),
            })
            prev_state = state
    finally:
        total_wall = time.perf_counter() - run_t0
        tail = [r["mlm_loss"] for r in record.step_records[-50:]]
        tail_total = [r["total_loss"] for r in record.step_records[-50:]]
        record.summary = {
            "regime": plan.regime,
            "seed": cfg.seed,
            "total_steps": plan.total_steps,
            "batch_size": cfg.batch_size,
            "seq_len": cfg.seq_len,
            "log_every": cfg.log_every,
            "vocab_size": vocab.size,
            "stages": record.stage_summaries,
            "total_wall_seconds": total_wall,
            "final_mlm_loss": float(np.mean(tail)) if tail else None,
            "final_total_loss": float(np.mean(tail_total)) if tail_total else None,
            "analytic_forward_flops": sum(
                s["cost"]["forward_flops"] * s["steps"] for s in record.stage_summaries),
            "analytic_backward_flops": sum(
                s["cost"]["backward_flops"] * s["steps"] for s in record.stage_summaries),
            "analytic_comm_bytes": sum(
                s["cost"]["comm_bytes"] * s["steps"] for s in record.stage_summaries),
        }
        writer.write_summary(record.summary)
        writer.close()
    return model, record


def execute_run_config(cfg, out_dir=None, seed=None, resume=False):
    """Service/CLI entry: apply overrides, plan, run; returns the summary dict."""
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    if not cfg.out_dir:
        raise ConfigError("out_dir must be set (config key out_dir or --out)")
    if not cfg.corpus:
        raise ConfigError("corpus must be set to train")
    env_log_every = os.environ.get("MSLT_LOG_EVERY")
    if env_log_every:
        try:
            cfg.log_every = int(env_log_every)
        except ValueError:
            raise ConfigError(f"MSLT_LOG_EVERY must be an integer, got {env_log_every!r}")
    cfg.validate()
    plan = plan_from_config(cfg)
    _, record = run(plan, cfg, cfg.out_dir, resume=resume)
    return record.summary
