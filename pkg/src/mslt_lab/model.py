"""BERT-style encoder with tied embeddings, MLM/NSP heads, growth and freezing.

Layer arrangement is post-layernorm (residual, then layernorm), matching the
original BERT encoder. The MLM decoder weight is the word-embedding Parameter
itself, never a copy, so its gradient accumulates both the input-lookup and
decoder contributions.

Parameter count (documented closed form, `hidden` H, `ffn_size` F, vocab V,
max sequence length S, layer stacks L = depth for independent layers or the
number of groups under grouped sharing):

    embeddings: V*H + S*H + 2*H (segment) + 2*H (layernorm)
    per stack:  4*(H*H + H) (attention projections) + 2*H (attn layernorm)
                + H*F + F + F*H + H (FFN) + 2*H (ffn layernorm)
    heads:      H*H + H + 2*H + V (MLM transform, layernorm, output bias)
                + H*H + H + 2*H + 2 (NSP pooler, classifier)

The tied MLM decoder contributes no extra parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Parameter,
    Tensor,
    add,
    constant,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    select,
    softmax,
    tanh,
    transpose,
)

MASK_BIAS = -1e9  # additive score on padded key positions, before softmax


@dataclass
class ModelConfig:
    """Encoder hyperparameters. Defaults are the BERT-Base setting."""

    num_layers: int = 12
    hidden: int = 768
    heads: int = 12
    ffn_size: int = 0  # 0 means the conventional 4*hidden
    vocab: int = 30522
    max_seq_len: int = 128
    type_vocab: int = 2
    num_stages: int = 4
    sharing: str = "none"  # none | grouped
    layernorm_eps: float = 1e-12

    def __post_init__(self):
        if self.ffn_size == 0:
            self.ffn_size = 4 * self.hidden

    def validate(self):
        problems = []
        if self.num_layers < 1:
            problems.append(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden < 1 or self.hidden % self.heads != 0:
            problems.append(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.num_layers % self.num_stages != 0:
            problems.append(
                f"num_layers ({self.num_layers}) must be divisible by "
                f"num_stages ({self.num_stages})"
            )
        if self.vocab <= 5:
            problems.append(f"vocab ({self.vocab}) must exceed the 5 special tokens")
        if self.max_seq_len < 1:
            problems.append("max_seq_len must be >= 1")
        if self.type_vocab != 2:
            problems.append(f"type_vocab must be 2, got {self.type_vocab}")
        if self.sharing not in ("none", "grouped"):
            problems.append(f"sharing must be 'none' or 'grouped', got {self.sharing!r}")
        if self.layernorm_eps <= 0:
            problems.append("layernorm_eps must be > 0")
        if self.ffn_size < 1:
            problems.append("ffn_size must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def group_size(self):
        return self.num_layers // self.num_stages

    def to_dict(self):
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ffn_size": self.ffn_size,
            "vocab": self.vocab,
            "max_seq_len": self.max_seq_len,
            "type_vocab": self.type_vocab,
            "num_stages": self.num_stages,
            "sharing": self.sharing,
            "layernorm_eps": self.layernorm_eps,
        }


@dataclass(frozen=True)
class TrainablePartition:
    """Which parts of the model receive gradients and optimizer updates.

    `embedding_freeze_scope` controls what "embeddings frozen" means:
    "all_input" freezes word/position/segment embeddings and the embedding
    layernorm together (the default boundary); "word_only" freezes just the
    word-embedding matrix.
    """

    trainable_layers: frozenset = frozenset()
    embeddings_trainable: bool = True
    heads_trainable: bool = True
    embedding_freeze_scope: str = "all_input"

    @classmethod
    def all_trainable(cls, depth):
        return cls(frozenset(range(depth)), True, True)

    @classmethod
    def top_layers_only(cls, depth, n_top, scope="all_input"):
        return cls(frozenset(range(depth - n_top, depth)), False, True, scope)

    def to_dict(self):
        return {
            "trainable_layers": sorted(self.trainable_layers),
            "embeddings_trainable": self.embeddings_trainable,
            "heads_trainable": self.heads_trainable,
            "embedding_freeze_scope": self.embedding_freeze_scope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            frozenset(d["trainable_layers"]),
            d["embeddings_trainable"],
            d["heads_trainable"],
            d.get("embedding_freeze_scope", "all_input"),
        )


# (attribute, id suffix, shape kind, init kind) for one encoder stack
_LAYER_FIELDS = (
    ("q_w", "attn.query.weight", "HH", "weight"),
    ("q_b", "attn.query.bias", "H", "zero"),
    ("k_w", "attn.key.weight", "HH", "weight"),
    ("k_b", "attn.key.bias", "H", "zero"),
    ("v_w", "attn.value.weight", "HH", "weight"),
    ("v_b", "attn.value.bias", "H", "zero"),
    ("o_w", "attn.output.weight", "HH", "weight"),
    ("o_b", "attn.output.bias", "H", "zero"),
    ("attn_ln_g", "attn.layernorm.gamma", "H", "one"),
    ("attn_ln_b", "attn.layernorm.beta", "H", "zero"),
    ("ffn_w1", "ffn.dense1.weight", "HF", "weight"),
    ("ffn_b1", "ffn.dense1.bias", "F", "zero"),
    ("ffn_w2", "ffn.dense2.weight", "FH", "weight"),
    ("ffn_b2", "ffn.dense2.bias", "H", "zero"),
    ("ffn_ln_g", "ffn.layernorm.gamma", "H", "one"),
    ("ffn_ln_b", "ffn.layernorm.beta", "H", "zero"),
)


def _shape_of(kind, config):
    h, f = config.hidden, config.ffn_size
    return {"HH": (h, h), "H": (h,), "HF": (h, f), "FH": (f, h), "F": (f,)}[kind]


class EncoderStack:
    """Parameters of one encoder layer (or one shared group)."""

    __slots__ = tuple(name for name, *_ in _LAYER_FIELDS)

    def __init__(self, prefix, config, init):
        for attr, suffix, shape_kind, init_kind in _LAYER_FIELDS:
            shape = _shape_of(shape_kind, config)
            setattr(self, attr, Parameter(f"{prefix}.{suffix}", init(shape, init_kind)))

    def parameters(self):
        return [getattr(self, attr) for attr, *_ in _LAYER_FIELDS]

    def clone(self, prefix):
        """Deep-copy all parameters under a new id prefix."""
        out = object.__new__(EncoderStack)
        for attr, suffix, *_ in _LAYER_FIELDS:
            src = getattr(self, attr)
            setattr(out, attr, Parameter(f"{prefix}.{suffix}", src.data.copy()))
        return out


@dataclass
class ModelOutput:
    total_loss: Tensor
    mlm_loss: Tensor
    nsp_loss: Tensor
    attention: list | None = None  # per layer: [B, A, S, S] probability arrays
    hidden: list | None = None  # per layer: [B, S, H] activations (embedding output first)


class Model:
    """Full parameter set, organized per layer with a trainable partition."""

    def __init__(self, config):
        self.config = config
        self.embeddings = {}
        self.stacks = []  # unique parameter stacks (== layers, or groups when shared)
        self.layer_stack_index = []  # layer i -> index into self.stacks
        self.mlm = {}
        self.nsp = {}
        self.partition = TrainablePartition.all_trainable(0)

    @property
    def depth(self):
        return len(self.layer_stack_index)

    def stack_for_layer(self, i):
        return self.stacks[self.layer_stack_index[i]]

    def parameters(self):
        """Unique parameters in a fixed, documented order (tied/shared once)."""
        ordered = [
            self.embeddings[k]
            for k in ("word", "position", "segment", "layernorm.gamma", "layernorm.beta")
        ]
        for stack in self.stacks:
            ordered.extend(stack.parameters())
        ordered.extend(
            self.mlm[k]
            for k in ("transform.weight", "transform.bias", "layernorm.gamma",
                      "layernorm.beta", "output_bias")
        )
        ordered.extend(
            self.nsp[k]
            for k in ("pooler.weight", "pooler.bias", "classifier.weight", "classifier.bias")
        )
        return ordered

    def parameter_by_id(self):
        return {p.id: p for p in self.parameters()}

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()


def _make_init(rng):
    """Truncated normal (sigma 0.02, clipped at 2 sigma) weights, conventional affines.

    With rng=None, weights are zeros (checkpoint loaders overwrite them anyway).
    """

    def trunc_normal(shape):
        x = rng.normal(0.0, 0.02, size=shape)
        bad = np.abs(x) > 0.04
        while bad.any():
            x[bad] = rng.normal(0.0, 0.02, size=int(bad.sum()))
            bad = np.abs(x) > 0.04
        return x

    def init(shape, kind):
        if kind == "weight":
            return trunc_normal(shape) if rng is not None else np.zeros(shape)
        if kind == "one":
            return np.ones(shape)
        return np.zeros(shape)

    return init


def build_model(config, seed, depth=None, zero_init=False):
    """Create a model of `depth` layers (default: the full configured depth).

    All parameters start trainable. Two builds from the same seed are
    bitwise identical: a single generator initializes parameters in the
    fixed `Model.parameters()` order.
    """
    config.validate()
    if depth is None:
        depth = config.num_layers
    grouped = config.sharing == "grouped"
    if grouped and depth % config.group_size != 0:
        raise ConfigError(
            f"grouped sharing requires depth ({depth}) divisible by "
            f"group size ({config.group_size})"
        )

    rng = None if zero_init else np.random.default_rng(np.random.SeedSequence(seed))
    init = _make_init(rng)
    h, v = config.hidden, config.vocab
    m = Model(config)
    m.embeddings = {
        "word": Parameter("embeddings.word", init((v, h), "weight")),
        "position": Parameter("embeddings.position", init((config.max_seq_len, h), "weight")),
        "segment": Parameter("embeddings.segment", init((config.type_vocab, h), "weight")),
        "layernorm.gamma": Parameter("embeddings.layernorm.gamma", init((h,), "one")),
        "layernorm.beta": Parameter("embeddings.layernorm.beta", init((h,), "zero")),
    }
    if grouped:
        n_groups = depth // config.group_size
        m.stacks = [EncoderStack(f"encoder.group{g}", config, init) for g in range(n_groups)]
        m.layer_stack_index = [i // config.group_size for i in range(depth)]
    else:
        m.stacks = [EncoderStack(f"encoder.layer{i}", config, init) for i in range(depth)]
        m.layer_stack_index = list(range(depth))
    m.mlm = {
        "transform.weight": Parameter("mlm.transform.weight", init((h, h), "weight")),
        "transform.bias": Parameter("mlm.transform.bias", init((h,), "zero")),
        "layernorm.gamma": Parameter("mlm.layernorm.gamma", init((h,), "one")),
        "layernorm.beta": Parameter("mlm.layernorm.beta", init((h,), "zero")),
        # decoder weight is the tied word embedding; only the bias is owned here
        "output_bias": Parameter("mlm.output_bias", init((v,), "zero")),
    }
    m.nsp = {
        "pooler.weight": Parameter("nsp.pooler.weight", init((h, h), "weight")),
        "pooler.bias": Parameter("nsp.pooler.bias", init((h,), "zero")),
        "classifier.weight": Parameter("nsp.classifier.weight", init((h, 2), "weight")),
        "classifier.bias": Parameter("nsp.classifier.bias", init((2,), "zero")),
    }
    set_partition(m, TrainablePartition.all_trainable(depth))
    return m


def _linear(x, w, b):
    return add(matmul(x, w.tensor), b.tensor)


def _self_attention(stack, x, mask_bias, config, capture):
    b, s, h = x.shape
    a = config.heads
    dh = h // a

    def heads(t):
        return transpose(reshape(t, (b, s, a, dh)), (0, 2, 1, 3))

    q = heads(_linear(x, stack.q_w, stack.q_b))
    k = heads(_linear(x, stack.k_w, stack.k_b))
    v = heads(_linear(x, stack.v_w, stack.v_b))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = add(scores, mask_bias)
    probs = softmax(scores, axis=-1)
    if capture is not None:
        capture.append(probs.data.copy())
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, s, h))
    return _linear(ctx, stack.o_w, stack.o_b)


def embed_batch(model, batch, dropout_rate=0.0, dropout_rng=None):
    """Token+position+segment embedding -> layernorm; also builds the mask bias."""
    cfg = model.config
    ids = np.asarray(batch.token_ids)
    if ids.ndim != 2:
        raise ShapeError(f"forward: token_ids must be [B, S], got {ids.shape}")
    s = ids.shape[1]
    if s > cfg.max_seq_len:
        raise ShapeError(f"forward: sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")

    emb = model.embeddings
    x = add(
        add(embedding(emb["word"].tensor, ids),
            embedding(emb["position"].tensor, np.arange(s))),
        embedding(emb["segment"].tensor, np.asarray(batch.segment_ids)),
    )
    x = layer_norm(x, emb["layernorm.gamma"].tensor, emb["layernorm.beta"].tensor,
                   cfg.layernorm_eps)
    if dropout_rate:
        x = dropout(x, dropout_rate, dropout_rng)
    mask = np.asarray(batch.attention_mask, dtype=np.float64)
    mask_bias = constant((1.0 - mask)[:, None, None, :] * MASK_BIAS)
    return x, mask_bias


def encode_layers(model, x, mask_bias, start=0, end=None, attn_maps=None, hidden=None,
                  dropout_rate=0.0, dropout_rng=None):
    """Apply encoder layers [start, end) to x (post-layernorm residual blocks)."""
    cfg = model.config
    if end is None:
        end = model.depth
    for i in range(start, end):
        stack = model.stack_for_layer(i)
        attn = _self_attention(stack, x, mask_bias, cfg, attn_maps)
        if dropout_rate:
            attn = dropout(attn, dropout_rate, dropout_rng)
        x = layer_norm(add(x, attn), stack.attn_ln_g.tensor, stack.attn_ln_b.tensor,
                       cfg.layernorm_eps)
        ff = _linear(gelu(_linear(x, stack.ffn_w1, stack.ffn_b1)), stack.ffn_w2, stack.ffn_b2)
        if dropout_rate:
            ff = dropout(ff, dropout_rate, dropout_rng)
        x = layer_norm(add(x, ff), stack.ffn_ln_g.tensor, stack.ffn_ln_b.tensor,
                       cfg.layernorm_eps)
        if hidden is not None:
            hidden.append(x.data.copy())
    return x


def head_losses(model, x, batch):
    """MLM loss over masked positions (tied decoder) and NSP loss over CLS."""
    cfg = model.config
    b, s = np.asarray(batch.token_ids).shape
    mlm = model.mlm
    t = gelu(_linear(x, mlm["transform.weight"], mlm["transform.bias"]))
    t = layer_norm(t, mlm["layernorm.gamma"].tensor, mlm["layernorm.beta"].tensor,
                   cfg.layernorm_eps)
    # decoder weight tied to the word embedding
    mlm_logits = add(matmul(t, transpose(model.embeddings["word"].tensor, (1, 0))),
                     mlm["output_bias"].tensor)
    mlm_loss = cross_entropy(
        reshape(mlm_logits, (b * s, cfg.vocab)),
        np.asarray(batch.mlm_labels).reshape(-1),
        ignore_index=-1,
    )
    nsp = model.nsp
    pooled = tanh(_linear(select(x, 1, 0), nsp["pooler.weight"], nsp["pooler.bias"]))
    nsp_logits = _linear(pooled, nsp["classifier.weight"], nsp["classifier.bias"])
    nsp_loss = cross_entropy(nsp_logits, np.asarray(batch.nsp_labels))
    return mlm_loss, nsp_loss


def forward(model, batch, capture_attention=False, capture_hidden=False,
            dropout_rate=0.0, dropout_rng=None):
    """Run MLM+NSP forward over one batch.

    MLM loss is averaged over masked positions only (labels of -1 are
    ignored); NSP loss pools the CLS position. Attention probabilities and
    per-layer hidden states are copied out when requested.
    """
    x, mask_bias = embed_batch(model, batch, dropout_rate, dropout_rng)
    attn_maps = [] if capture_attention else None
    hidden = [x.data.copy()] if capture_hidden else None
    x = encode_layers(model, x, mask_bias, attn_maps=attn_maps, hidden=hidden,
                      dropout_rate=dropout_rate, dropout_rng=dropout_rng)
    mlm_loss, nsp_loss = head_losses(model, x, batch)
    return ModelOutput(
        total_loss=add(mlm_loss, nsp_loss),
        mlm_loss=mlm_loss,
        nsp_loss=nsp_loss,
        attention=attn_maps,
        hidden=hidden,
    )


def grow(model, n_new):
    """Deepen the model by copying the parameters of the top `n_new` layers.

    The copies are appended in the same order as their sources; every other
    parameter keeps its identity. The partition is reset so that only the
    new layers and the heads are trainable and the embeddings are frozen.
    Under grouped sharing the growth unit is one group.
    """
    if n_new < 1:
        raise ValueError(f"grow: n_new must be >= 1, got {n_new}")
    if n_new > model.depth:
        raise ValueError(
            f"grow: cannot copy {n_new} layers from a depth-{model.depth} model"
        )
    cfg = model.config
    old_depth = model.depth
    if cfg.sharing == "grouped":
        if n_new != cfg.group_size:
            raise ValueError(
                f"grow: grouped sharing grows one group of {cfg.group_size} layers, "
                f"got n_new={n_new}"
            )
        new_group = model.stacks[-1].clone(f"encoder.group{len(model.stacks)}")
        model.stacks.append(new_group)
        gi = len(model.stacks) - 1
        model.layer_stack_index.extend([gi] * n_new)
    else:
        sources = model.stacks[old_depth - n_new: old_depth]
        for j, src in enumerate(sources):
            model.stacks.append(src.clone(f"encoder.layer{old_depth + j}"))
        model.layer_stack_index.extend(range(old_depth, old_depth + n_new))
    scope = model.partition.embedding_freeze_scope
    set_partition(model, TrainablePartition.top_layers_only(model.depth, n_new, scope))
    return model


def set_partition(model, partition):
    """Apply trainable flags; freezing deallocates grads immediately.

    Under grouped sharing a group is trainable iff any of its layers is in
    the trainable set.
    """
    if partition.trainable_layers and max(partition.trainable_layers) >= model.depth:
        raise ValueError(
            f"set_partition: layer index {max(partition.trainable_layers)} "
            f"out of range for depth {model.depth}"
        )
    if partition.embedding_freeze_scope not in ("all_input", "word_only"):
        raise ValueError(
            f"set_partition: unknown embedding_freeze_scope "
            f"{partition.embedding_freeze_scope!r}"
        )
    model.partition = partition

    emb_on = partition.embeddings_trainable
    model.embeddings["word"].trainable = emb_on
    side_on = emb_on if partition.embedding_freeze_scope == "all_input" else True
    for key in ("position", "segment", "layernorm.gamma", "layernorm.beta"):
        model.embeddings[key].trainable = side_on

    trainable_stacks = {model.layer_stack_index[i] for i in partition.trainable_layers}
    for si, stack in enumerate(model.stacks):
        on = si in trainable_stacks
        for p in stack.parameters():
            p.trainable = on

    for p in list(model.mlm.values()) + list(model.nsp.values()):
        p.trainable = partition.heads_trainable
