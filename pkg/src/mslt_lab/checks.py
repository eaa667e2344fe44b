"""Full-model gradient checking against central finite differences."""

from __future__ import annotations

import numpy as np

from .costs import total_param_count
from .data import CLS_ID, IGNORE_INDEX, SEP_ID, Batch
from .errors import ConfigError
from .model import ModelConfig, build_model, forward
from .tensor import corrupt_gelu_backward, finite_diff_check

GRADCHECK_THRESHOLD = 1e-4
PARAM_CAP = 250_000

# small enough to finish a full-coordinate check in well under two minutes
TINY_CHECK_CONFIG = dict(num_layers=4, hidden=16, heads=2, vocab=64,
                         max_seq_len=16, num_stages=2)


def synthetic_batch(config, batch_size, seq_len, rng, mask_fraction=0.15):
    """Random but structurally valid batch: [CLS] ... [SEP] ... [SEP] + pads."""
    token_ids = np.zeros((batch_size, seq_len), dtype=np.int64)
    segment_ids = np.zeros((batch_size, seq_len), dtype=np.int64)
    attention_mask = np.zeros((batch_size, seq_len), dtype=np.int64)
    mlm_labels = np.full((batch_size, seq_len), IGNORE_INDEX, dtype=np.int64)
    nsp_labels = rng.integers(0, 2, size=batch_size)
    for r in range(batch_size):
        n = int(rng.integers(max(5, seq_len - 3), seq_len + 1))
        body = rng.integers(5, config.vocab, size=n - 3)
        sep_at = int(rng.integers(1, n - 2))
        row = np.concatenate(([CLS_ID], body[:sep_at], [SEP_ID], body[sep_at:], [SEP_ID]))
        token_ids[r, :n] = row
        segment_ids[r, sep_at + 2: n] = 1
        attention_mask[r, :n] = 1
        maskable = np.arange(1, n - 1)
        maskable = maskable[~np.isin(maskable, [sep_at + 1, n - 1])]
        k = max(1, int(round(mask_fraction * len(maskable))))
        chosen = rng.choice(maskable, size=k, replace=False)
        mlm_labels[r, chosen] = token_ids[r, chosen]
    return Batch(token_ids, segment_ids, attention_mask, mlm_labels,
                 np.asarray(nsp_labels, dtype=np.int64))


def model_gradcheck(model_config=None, batch_size=2, seq_len=None, seed=0,
                    eps=2e-3, max_coords_per_param=None, mutate=False,
                    param_cap=PARAM_CAP):
    """Finite-difference check of the full MLM+NSP loss; returns GradCheckReport.

    Enforces a parameter-count cap: central differences on a large model
    would take hours, so oversized configs are rejected with a pointer to a
    smaller one. The `mutate` hook corrupts the gelu backward rule to prove
    the check detects broken gradients.
    """
    if model_config is None:
        model_config = ModelConfig(**TINY_CHECK_CONFIG)
    model_config.validate()
    n_params = total_param_count(model_config, model_config.num_layers)
    if n_params > param_cap:
        raise ConfigError(
            f"gradcheck config has {n_params} parameters, above the cap {param_cap}; "
            "use a tiny config (e.g. num_layers=4 hidden=16 heads=2 vocab=64)"
        )
    if seq_len is None:
        seq_len = model_config.max_seq_len
    rng = np.random.default_rng(seed)
    model = build_model(model_config, seed)
    batch = synthetic_batch(model_config, batch_size, seq_len, rng)

    def loss_fn():
        return forward(model, batch).total_loss

    params = model.parameters()
    if mutate:
        with corrupt_gelu_backward():
            return finite_diff_check(loss_fn, params, eps=eps,
                                     max_coords_per_param=max_coords_per_param, seed=seed)
    return finite_diff_check(loss_fn, params, eps=eps,
                             max_coords_per_param=max_coords_per_param, seed=seed)
