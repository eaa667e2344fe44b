"""Analytic FLOP and communication accounting, exact integer arithmetic.

FLOPs count matrix multiplications only (2*m*k*n per product); elementwise
work (softmax, layernorm, gelu, embedding lookups) is excluded. A trainable
layer's backward costs exactly twice its forward (input-grad plus
weight-grad products), a frozen layer costs zero, and the output heads are
always counted. Communication is one gradient synchronization per step:
8 bytes per trainable scalar (64-bit grads).

Layers are homogeneous, so cost ratios between partitions are exact
rationals; tests rely on the integer equalities.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CostReport:
    forward_flops: int
    backward_flops: int
    encoder_forward_flops: int
    encoder_backward_flops: int
    comm_bytes: int
    trainable_params: int
    total_params: int

    def to_dict(self):
        return {
            "forward_flops": self.forward_flops,
            "backward_flops": self.backward_flops,
            "encoder_forward_flops": self.encoder_forward_flops,
            "encoder_backward_flops": self.encoder_backward_flops,
            "comm_bytes": self.comm_bytes,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
        }


def embedding_param_count(config):
    h = config.hidden
    return config.vocab * h + config.max_seq_len * h + config.type_vocab * h + 2 * h


def layer_param_count(config):
    h, f = config.hidden, config.ffn_size
    attention = 4 * (h * h + h) + 2 * h
    ffn = h * f + f + f * h + h + 2 * h
    return attention + ffn


def head_param_count(config):
    h, v = config.hidden, config.vocab
    mlm = h * h + h + 2 * h + v  # transform + layernorm + output bias (decoder tied)
    nsp = h * h + h + h * 2 + 2
    return mlm + nsp


def stack_count(config, depth):
    """Number of unique encoder parameter stacks at a given depth."""
    if config.sharing == "grouped":
        return depth // config.group_size
    return depth


def total_param_count(config, depth):
    return (
        embedding_param_count(config)
        + stack_count(config, depth) * layer_param_count(config)
        + head_param_count(config)
    )


def trainable_param_count(config, depth, partition):
    count = 0
    if partition.embeddings_trainable:
        count += embedding_param_count(config)
    elif partition.embedding_freeze_scope == "word_only":
        # position/segment/embedding-layernorm stay trainable
        count += config.max_seq_len * config.hidden + config.type_vocab * config.hidden
        count += 2 * config.hidden
    if config.sharing == "grouped":
        gs = config.group_size
        groups = {i // gs for i in partition.trainable_layers}
        count += len(groups) * layer_param_count(config)
    else:
        count += len(partition.trainable_layers) * layer_param_count(config)
    if partition.heads_trainable:
        count += head_param_count(config)
    return count


def layer_forward_flops(config, batch, seq):
    """Matmul FLOPs of one encoder layer's forward pass."""
    h, f, a = config.hidden, config.ffn_size, config.heads
    tokens = batch * seq
    projections = 4 * 2 * tokens * h * h
    dh = h // a
    scores = 2 * batch * a * seq * seq * dh  # == 2 * tokens * seq * h
    context = 2 * batch * a * seq * seq * dh
    ffn = 2 * tokens * h * f + 2 * tokens * f * h
    return projections + scores + context + ffn


def head_forward_flops(config, batch, seq):
    """Matmul FLOPs of the MLM transform/decoder and the NSP pooler/classifier."""
    h, v = config.hidden, config.vocab
    tokens = batch * seq
    mlm = 2 * tokens * h * h + 2 * tokens * h * v
    nsp = 2 * batch * h * h + 2 * batch * h * 2
    return mlm + nsp


def count_cost(config, depth, partition, batch, seq):
    """Per-step cost of one (forward, backward) pass under a partition."""
    if depth > config.num_layers:
        raise ValueError(f"depth {depth} exceeds configured num_layers {config.num_layers}")
    lf = layer_forward_flops(config, batch, seq)
    hf = head_forward_flops(config, batch, seq)
    encoder_forward = depth * lf
    encoder_backward = 2 * len(partition.trainable_layers) * lf
    trainable = trainable_param_count(config, depth, partition)
    return CostReport(
        forward_flops=encoder_forward + hf,
        backward_flops=encoder_backward + 2 * hf,
        encoder_forward_flops=encoder_forward,
        encoder_backward_flops=encoder_backward,
        comm_bytes=8 * trainable,
        trainable_params=trainable,
        total_params=total_param_count(config, depth),
    )
