"""Config file format, checkpoint read/write, and run-record storage.

Config: flat ``key=value`` text, one pair per line, ``#`` comments allowed.
Unknown keys are errors (no silent typos). Defaults mirror the reference
training setup where one exists (4 stages, peak LR 0.00088, 10000 warmup
steps, sequence length 128, 1M total steps, batch 1024).

Checkpoint: a single file ::

    bytes 0..8    magic "MSLTCKP1"
    bytes 8..16   u64 little-endian manifest length L
    bytes 16..16+L  manifest JSON (sorted keys, compact separators)
    rest          blob of little-endian float64 values

The manifest carries the model config, depth, stage/step counters, the
trainable partition, a parameter index (id, shape, byte offset into the
blob) and an optional optimizer-state index. Tied and group-shared
parameters appear exactly once. save -> load -> save is byte-identical.

Run records: ``record.jsonl`` (one JSON object per logged step, including
wall-clock timings), ``losses.csv`` (the deterministic loss record: no
timing fields, byte-identical across reruns of the same config+seed),
``cost_stage*.json`` and ``run_summary.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import Model, ModelConfig, TrainablePartition, build_model, set_partition
from .optim import LambHyper, LambState

CHECKPOINT_MAGIC = b"MSLTCKP1"


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    # model
    num_layers: int = 12
    hidden: int = 768
    heads: int = 12
    ffn_size: int = 0  # 0 -> 4*hidden
    vocab_cap: int = 30522
    max_seq_len: int = 128
    num_stages: int = 4
    sharing: str = "none"
    layernorm_eps: float = 1e-12
    # run
    regime: str = "mslt"
    total_steps: int = 1000000
    batch_size: int = 1024
    seq_len: int = 128
    seed: int = 1
    dropout: float = 0.0
    log_every: int = 1
    # optimizer
    peak_lr: float = 0.00088
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_steps: int = 10000
    carry_optimizer_state: bool = False
    # staging
    retrain_fraction: float = 0.2
    retrain_lr_scale: float = 0.1
    stacking_doublings: int = 2
    embedding_freeze_scope: str = "all_input"
    # paths
    corpus: tuple = ()
    out_dir: str = ""

    def model_config(self, vocab=None):
        return ModelConfig(
            num_layers=self.num_layers,
            hidden=self.hidden,
            heads=self.heads,
            ffn_size=self.ffn_size,
            vocab=self.vocab_cap if vocab is None else vocab,
            max_seq_len=self.max_seq_len,
            num_stages=self.num_stages,
            sharing=self.sharing,
            layernorm_eps=self.layernorm_eps,
        )

    def hyper(self, total_steps=None, warmup_steps=None):
        return LambHyper(
            peak_lr=self.peak_lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.opt_eps,
            weight_decay=self.weight_decay,
            warmup_steps=self.warmup_steps if warmup_steps is None else warmup_steps,
            total_steps=self.total_steps if total_steps is None else total_steps,
        )

    def validate(self):
        self.model_config().validate()
        self.hyper().validate()
        problems = []
        if self.regime not in ("mslt", "stacking", "scratch"):
            problems.append(f"regime must be mslt|stacking|scratch, got {self.regime!r}")
        if self.total_steps < 1:
            problems.append("total_steps must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 1 <= self.seq_len <= self.max_seq_len:
            problems.append(
                f"seq_len ({self.seq_len}) must be in [1, max_seq_len ({self.max_seq_len})]"
            )
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must be in [0, 1)")
        if not 0.0 <= self.retrain_fraction < 1.0:
            problems.append("retrain_fraction must be in [0, 1)")
        if self.retrain_lr_scale <= 0:
            problems.append("retrain_lr_scale must be > 0")
        if self.stacking_doublings < 1:
            problems.append("stacking_doublings must be >= 1")
        if self.embedding_freeze_scope not in ("all_input", "word_only"):
            problems.append(
                f"embedding_freeze_scope must be all_input|word_only, "
                f"got {self.embedding_freeze_scope!r}"
            )
        if self.log_every < 1:
            problems.append("log_every must be >= 1")
        for p in self.corpus:
            if not Path(p).exists():
                problems.append(f"corpus path does not exist: {p}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_value(raw, kind):
    if kind is bool:
        return _parse_bool(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    return raw.strip()


def _field_types():
    return {f.name: (tuple if f.name == "corpus" else f.type) for f in dc_fields(RunConfig)}


_TYPE_BY_NAME = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}


def parse_config_text(text):
    """Parse flat key=value text into a validated RunConfig."""
    values = {}
    types = {f.name: _TYPE_BY_NAME.get(f.type, f.type) if isinstance(f.type, str) else f.type
             for f in dc_fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        try:
            values[key] = _parse_value(raw.strip(), types[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return RunConfig(**values).validate()


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def config_text(cfg):
    """Canonical key=value rendering; load(config_text(cfg)) round-trips."""
    lines = []
    for f in dc_fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name == "corpus":
            value = ",".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def write_config_echo(cfg, out_dir):
    path = Path(out_dir) / "config.echo.cfg"
    path.write_text(config_text(cfg), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(model, optimizer_state, meta, path):
    """Write model (and optionally optimizer state) as manifest + float64 blob."""
    chunks = []
    offset = 0
    param_index = []
    for p in model.parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        param_index.append({"id": p.id, "shape": list(p.data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    opt_manifest = None
    if optimizer_state is not None:
        entries = []
        for pid in sorted(optimizer_state.moments):
            m, v = optimizer_state.moments[pid]
            m_raw = np.ascontiguousarray(m, dtype="<f8").tobytes()
            v_raw = np.ascontiguousarray(v, dtype="<f8").tobytes()
            entries.append({"id": pid, "m_offset": offset, "v_offset": offset + len(m_raw)})
            chunks.append(m_raw)
            chunks.append(v_raw)
            offset += len(m_raw) + len(v_raw)
        opt_manifest = {"t": optimizer_state.t, "entries": entries}

    manifest = {
        "format": 1,
        "config": model.config.to_dict(),
        "depth": model.depth,
        "partition": model.partition.to_dict(),
        "params": param_index,
        "optimizer": opt_manifest,
        "meta": dict(meta or {}),
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(manifest_bytes).to_bytes(8, "little"))
        fh.write(manifest_bytes)
        for chunk in chunks:
            fh.write(chunk)
    return path


def _read_array(blob, offset, shape):
    count = int(np.prod(shape)) if shape else 1
    end = offset + count * 8
    if offset < 0 or end > len(blob):
        raise CheckpointError(
            f"manifest offset {offset}+{count * 8} outside blob of {len(blob)} bytes"
        )
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()


def load_checkpoint(path):
    """Reconstruct (model, optimizer_state | None, meta) from a checkpoint file.

    Tied and shared parameters are re-tied structurally: the model is rebuilt
    from the manifest config, so the MLM decoder is the word embedding again
    and grouped layers share one stack.
    """
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    manifest_len = int.from_bytes(raw[8:16], "little")
    if 16 + manifest_len > len(raw):
        raise CheckpointError(f"{path}: manifest length {manifest_len} exceeds file size")
    try:
        manifest = json.loads(raw[16: 16 + manifest_len].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {exc}") from exc
    blob = raw[16 + manifest_len:]

    spans = []
    for entry in manifest["params"]:
        spans.append((entry["offset"], int(np.prod(entry["shape"] or [1])) * 8))
    if manifest["optimizer"]:
        for entry in manifest["optimizer"]["entries"]:
            size = next(
                int(np.prod(p["shape"] or [1])) * 8
                for p in manifest["params"] if p["id"] == entry["id"]
            )
            spans.append((entry["m_offset"], size))
            spans.append((entry["v_offset"], size))
    spans.sort()
    expected = 0
    for off, size in spans:
        if off != expected:
            raise CheckpointError(
                f"{path}: manifest offsets overlap or leave gaps at byte {off}"
            )
        expected = off + size
    if expected != len(blob):
        raise CheckpointError(
            f"{path}: blob has {len(blob)} bytes but manifest describes {expected}"
        )

    config = ModelConfig(**manifest["config"])
    model = build_model(config, seed=0, depth=manifest["depth"], zero_init=True)
    by_id = model.parameter_by_id()
    if set(by_id) != {e["id"] for e in manifest["params"]}:
        raise CheckpointError(f"{path}: parameter index does not match the rebuilt model")
    for entry in manifest["params"]:
        p = by_id[entry["id"]]
        arr = _read_array(blob, entry["offset"], tuple(entry["shape"]))
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {entry['id']}: "
                f"{arr.shape} vs {p.data.shape}"
            )
        p.tensor.data = arr
    set_partition(model, TrainablePartition.from_dict(manifest["partition"]))

    state = None
    if manifest["optimizer"]:
        state = LambState(t=manifest["optimizer"]["t"])
        for entry in manifest["optimizer"]["entries"]:
            shape = tuple(by_id[entry["id"]].data.shape)
            state.moments[entry["id"]] = (
                _read_array(blob, entry["m_offset"], shape),
                _read_array(blob, entry["v_offset"], shape),
            )
    return model, state, manifest["meta"]


# --------------------------------------------------------------------------
# run records
# --------------------------------------------------------------------------


class RecordWriter:
    """Streams per-step records; losses.csv stays free of wall-clock fields."""

    def __init__(self, out_dir, log_every=1):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log_every = max(1, int(log_every))
        self._record = open(self.out_dir / "record.jsonl", "w", encoding="utf-8")
        self._losses = open(self.out_dir / "losses.csv", "w", encoding="utf-8")
        self._losses.write("step,stage,mlm_loss,nsp_loss,total_loss,lr\n")

    def should_log(self, step_in_stage, stage_steps):
        return step_in_stage % self.log_every == 0 or step_in_stage == stage_steps - 1

    def write_step(self, rec):
        self._record.write(json.dumps(rec, sort_keys=True) + "\n")
        self._losses.write(
            f"{rec['step']},{rec['stage']},{rec['mlm_loss']!r},"
            f"{rec['nsp_loss']!r},{rec['total_loss']!r},{rec['lr']!r}\n"
        )

    def write_stage_cost(self, stage_index, cost):
        path = self.out_dir / f"cost_stage{stage_index}.json"
        path.write_text(json.dumps(cost.to_dict(), sort_keys=True, indent=2),
                        encoding="utf-8")

    def write_summary(self, summary):
        path = self.out_dir / "run_summary.json"
        path.write_text(json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8")

    def close(self):
        self._record.close()
        self._losses.close()


def load_run_record(run_dir):
    """Load summary + step records of a finished run directory."""
    run_dir = Path(run_dir)
    summary_path = run_dir / "run_summary.json"
    record_path = run_dir / "record.jsonl"
    if not summary_path.exists() or not record_path.exists():
        raise CheckpointError(f"{run_dir} is not a finished run directory")
    summary = json.loads(summary_path.read_text(encoding="utf-8"))
    steps = [json.loads(line) for line in
             record_path.read_text(encoding="utf-8").splitlines() if line]
    return {"summary": summary, "steps": steps, "dir": str(run_dir)}
