"""Toy dual encoder with gated cross-modal attention fusion.

Two small transformer stacks (image patches, text tokens) run in
lockstep. In fusion mode the top layers add a cross-attention branch,
weighted by a per-layer, per-direction gating scalar that starts at
exactly zero, to the self-attention residual:

    xhat = SelfAtt(x);  x <- x + xhat + alpha * CrossAtt(xhat, y);
    x <- x + FFN(x)

so a fresh model behaves bit-identically to the pure dual encoder. The
residual arithmetic is used literally as written (no layer norms).
Global embeddings are the average pool of the local features before any
projector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .numerics import (
    DimensionError,
    Matrix,
    PreconditionError,
    Tape,
    Var,
    child_rng,
)

MASK_ID = 0  # reserved token id for masked positions

_FFN_MULT = 2  # hidden width of the feed-forward block, as a multiple of d_model


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_layers: int = 3
    n_fused: int = 2  # top layers that get a cross-attention branch
    n_heads: int = 4
    vocab_size: int = 128
    max_text_len: int = 16
    n_patches: int = 8
    patch_dim: int = 16  # width of incoming patch feature vectors
    mlm_prob: float = 0.15
    dropout: float = 0.1
    proj_dims: tuple[int, int, int] = (64, 64, 32)

    def __post_init__(self):
        if self.n_fused > self.n_layers:
            raise PreconditionError("n_fused must be <= n_layers")
        if not 0.0 < self.mlm_prob < 1.0:
            raise PreconditionError("mlm_prob must lie strictly inside (0, 1)")
        if len(self.proj_dims) != 3:
            raise PreconditionError("proj_dims needs exactly 3 entries")
        if self.d_model % self.n_heads:
            raise PreconditionError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def fused_layers(self) -> range:
        return range(self.n_layers - self.n_fused, self.n_layers)


@dataclass
class ModelParams:
    """Named parameter matrices; iteration is always over sorted names."""

    values: dict[str, Matrix]

    def names(self) -> list[str]:
        return sorted(self.values)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.values.items()})


def is_bias_like(name: str, value: Matrix) -> bool:
    """Row vectors and scalars: biases and gates, excluded from decay/trust."""
    return value.shape[0] == 1


def _attention_names(prefix: str, n_heads: int) -> list[str]:
    names = []
    for h in range(n_heads):
        names += [f"{prefix}.h{h}.{w}" for w in ("wq", "wk", "wv", "wo")]
    return names


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = child_rng(seed, "init")
    d, dh, ff = cfg.d_model, cfg.head_dim, _FFN_MULT * cfg.d_model
    values: dict[str, Matrix] = {}

    def w(name, rows, cols):
        values[name] = rng.standard_normal((rows, cols)) / np.sqrt(rows)

    def b(name, cols):
        values[name] = np.zeros((1, cols))

    w("img.input.w", cfg.patch_dim, d)
    b("img.input.b", d)
    values["img.pos"] = 0.1 * rng.standard_normal((cfg.n_patches, d))
    values["txt.emb"] = rng.standard_normal((cfg.vocab_size, d)) / np.sqrt(d)
    values["txt.pos"] = 0.1 * rng.standard_normal((cfg.max_text_len, d))

    for enc in ("img", "txt"):
        for layer in range(cfg.n_layers):
            base = f"{enc}.l{layer}"
            for h in range(cfg.n_heads):
                for kind in ("wq", "wk", "wv"):
                    w(f"{base}.self.h{h}.{kind}", d, dh)
                w(f"{base}.self.h{h}.wo", dh, d)
            w(f"{base}.ffn.w1", d, ff)
            b(f"{base}.ffn.b1", ff)
            w(f"{base}.ffn.w2", ff, d)
            b(f"{base}.ffn.b2", d)
            if layer in cfg.fused_layers():
                for h in range(cfg.n_heads):
                    for kind in ("wq", "wk", "wv"):
                        w(f"{base}.cross.h{h}.{kind}", d, dh)
                    w(f"{base}.cross.h{h}.wo", dh, d)
                values[f"{base}.cross.alpha"] = np.zeros((1, 1))
        for scope in ("global", "local"):
            p0, p1, p2 = cfg.proj_dims
            w(f"{enc}.proj_{scope}.w1", d, p0)
            b(f"{enc}.proj_{scope}.b1", p0)
            w(f"{enc}.proj_{scope}.w2", p0, p1)
            b(f"{enc}.proj_{scope}.b2", p1)
            w(f"{enc}.proj_{scope}.w3", p1, p2)
            b(f"{enc}.proj_{scope}.b3", p2)

    w("mlm.w", d, cfg.vocab_size)
    b("mlm.b", cfg.vocab_size)
    w("itm.wi", d, 1)
    w("itm.wt", d, 1)
    b("itm.b", 1)
    return ModelParams(values)


def wrap_params(tape: Tape, params: ModelParams) -> dict[str, Var]:
    return {name: tape.var(params.values[name]) for name in params.names()}


# ---------------------------------------------------------------------------
# Blocks.
# ---------------------------------------------------------------------------


def add_rowvec(x: Var, b: Var) -> Var:
    """x + broadcast row vector b (1 x d) to every row."""
    n = x.value.shape[0]
    ones = x.tape.constant(np.ones((n, 1)))
    return nm.add(x, nm.matmul(ones, b))


def _scale_by_scalar(x: Var, s: Var) -> Var:
    """x * broadcast 1x1 scalar s."""
    n, d = x.value.shape
    tape = x.tape
    s_mat = nm.matmul(nm.matmul(tape.constant(np.ones((n, 1))), s),
                      tape.constant(np.ones((1, d))))
    return nm.mul(x, s_mat)


def _dropout(x: Var, p: float, rng: Optional[np.random.Generator]) -> Var:
    if rng is None or p <= 0.0:
        return x
    mask = (rng.random(x.value.shape) >= p) / (1.0 - p)
    return nm.mul(x, x.tape.constant(mask))


def multi_head_attention(
    query_src: Var, kv_src: Var, weights: dict[str, Var], prefix: str, n_heads: int
) -> Var:
    """Standard scaled dot-product attention; heads recombine additively."""
    out = None
    dh = weights[f"{prefix}.h0.wq"].value.shape[1]
    inv_sqrt = 1.0 / np.sqrt(dh)
    for h in range(n_heads):
        q = nm.matmul(query_src, weights[f"{prefix}.h{h}.wq"])
        k = nm.matmul(kv_src, weights[f"{prefix}.h{h}.wk"])
        v = nm.matmul(kv_src, weights[f"{prefix}.h{h}.wv"])
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt)
        head = nm.matmul(nm.matmul(nm.row_softmax(scores), v),
                         weights[f"{prefix}.h{h}.wo"])
        out = head if out is None else nm.add(out, head)
    return out


def fused_block(
    x: Var,
    y: Optional[Var],
    weights: dict[str, Var],
    alpha: Optional[Var],
    n_heads: int,
    dropout: float = 0.0,
    drop_rng: Optional[np.random.Generator] = None,
) -> Var:
    """One encoder block; pass y and alpha to enable the gated cross branch.

    weights maps local names ("self.h0.wq", "ffn.w1", "cross.h0.wq", ...)
    to tape Vars.
    """
    if y is not None and y.value.shape[1] != x.value.shape[1]:
        raise DimensionError(
            f"stream widths differ: {x.value.shape} vs {y.value.shape}"
        )
    xhat = multi_head_attention(x, x, weights, "self", n_heads)
    xhat = _dropout(xhat, dropout, drop_rng)
    if y is not None and alpha is not None:
        cross = multi_head_attention(xhat, y, weights, "cross", n_heads)
        x = nm.add(nm.add(x, xhat), _scale_by_scalar(cross, alpha))
    else:
        x = nm.add(x, xhat)
    hidden = nm.relu(add_rowvec(nm.matmul(x, weights["ffn.w1"]), weights["ffn.b1"]))
    hidden = _dropout(hidden, dropout, drop_rng)
    return nm.add(x, add_rowvec(nm.matmul(hidden, weights["ffn.w2"]), weights["ffn.b2"]))


def _layer_weights(pvars: dict[str, Var], enc: str, layer: int) -> dict[str, Var]:
    base = f"{enc}.l{layer}."
    return {k[len(base):]: v for k, v in pvars.items() if k.startswith(base)}


# ---------------------------------------------------------------------------
# Full forward passes.
# ---------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    local_image: Var  # n_patches x d
    local_text: Var  # n_tokens x d
    global_image: Var  # 1 x d, average pool of local rows
    global_text: Var  # 1 x d
    mlm_logits: Optional[Var] = None  # n_tokens x vocab (fusion mode)
    itm_logit: Optional[Var] = None  # 1 x 1 (fusion mode)


def _validate_inputs(patch_features, patch_indices, token_ids, cfg: ModelConfig):
    patch_features = nm.as_matrix(patch_features)
    if patch_features.shape[1] != cfg.patch_dim:
        raise DimensionError(
            f"patch features are {patch_features.shape[1]}-wide, "
            f"model expects {cfg.patch_dim}"
        )
    idx = np.asarray(patch_indices, dtype=np.intp).ravel()
    if idx.shape[0] != patch_features.shape[0]:
        raise DimensionError("one position index per patch row required")
    if idx.size and (idx.min() < 0 or idx.max() >= cfg.n_patches):
        raise PreconditionError(f"patch position out of range [0, {cfg.n_patches})")
    ids = np.asarray(token_ids, dtype=np.intp).ravel()
    if ids.size == 0:
        raise PreconditionError("token sequence must be nonempty")
    if ids.size > cfg.max_text_len:
        raise PreconditionError(
            f"{ids.size} tokens exceed max_text_len={cfg.max_text_len}"
        )
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        bad = ids[(ids < 0) | (ids >= cfg.vocab_size)][0]
        raise PreconditionError(f"token id {bad} outside vocabulary [0, {cfg.vocab_size})")
    return patch_features, idx, ids


def _encode(
    tape: Tape,
    pvars: dict[str, Var],
    patch_features,
    patch_indices,
    token_ids,
    cfg: ModelConfig,
    fusion: bool,
    train: bool,
    drop_seed: int,
) -> tuple[Var, Var]:
    patch_features, patch_idx, ids = _validate_inputs(
        patch_features, patch_indices, token_ids, cfg
    )
    x_img = add_rowvec(
        nm.matmul(tape.constant(patch_features), pvars["img.input.w"]),
        pvars["img.input.b"],
    )
    x_img = nm.add(x_img, nm.row_gather(pvars["img.pos"], patch_idx))
    x_txt = nm.add(
        nm.row_gather(pvars["txt.emb"], ids),
        nm.row_gather(pvars["txt.pos"], np.arange(ids.size)),
    )
    p = cfg.dropout if train else 0.0
    for layer in range(cfg.n_layers):
        w_img = _layer_weights(pvars, "img", layer)
        w_txt = _layer_weights(pvars, "txt", layer)
        fused = fusion and layer in cfg.fused_layers()
        # Dropout masks are keyed by (seed, encoder, layer) only, so dual
        # and fusion passes see identical masks.
        rng_img = child_rng(drop_seed, "drop", "img", layer) if p > 0 else None
        rng_txt = child_rng(drop_seed, "drop", "txt", layer) if p > 0 else None
        # Both streams read the counter-stream's activations as they were
        # on entry to this layer.
        y_for_img = x_txt if fused else None
        y_for_txt = x_img if fused else None
        a_img = pvars[f"img.l{layer}.cross.alpha"] if fused else None
        a_txt = pvars[f"txt.l{layer}.cross.alpha"] if fused else None
        new_img = fused_block(x_img, y_for_img, w_img, a_img, cfg.n_heads, p, rng_img)
        new_txt = fused_block(x_txt, y_for_txt, w_txt, a_txt, cfg.n_heads, p, rng_txt)
        x_img, x_txt = new_img, new_txt
    return x_img, x_txt


def forward_dual(
    tape: Tape,
    pvars: dict[str, Var],
    patch_features,
    patch_indices,
    token_ids,
    cfg: ModelConfig,
    train: bool = False,
    drop_seed: int = 0,
) -> ForwardOutput:
    """Encoder pass with the cross-attention path skipped entirely."""
    li, lt = _encode(
        tape, pvars, patch_features, patch_indices, token_ids, cfg,
        fusion=False, train=train, drop_seed=drop_seed,
    )
    return ForwardOutput(li, lt, nm.reduce_mean(li, "rows"), nm.reduce_mean(lt, "rows"))


def forward_fusion(
    tape: Tape,
    pvars: dict[str, Var],
    patch_features,
    patch_indices,
    token_ids,
    cfg: ModelConfig,
    train: bool = False,
    drop_seed: int = 0,
) -> ForwardOutput:
    """Encoder pass with gated cross-attention active in the top layers."""
    li, lt = _encode(
        tape, pvars, patch_features, patch_indices, token_ids, cfg,
        fusion=True, train=train, drop_seed=drop_seed,
    )
    gi = nm.reduce_mean(li, "rows")
    gt = nm.reduce_mean(lt, "rows")
    mlm_logits = add_rowvec(nm.matmul(lt, pvars["mlm.w"]), pvars["mlm.b"])
    itm_logit = nm.add(
        nm.add(nm.matmul(gi, pvars["itm.wi"]), nm.matmul(gt, pvars["itm.wt"])),
        pvars["itm.b"],
    )
    return ForwardOutput(li, lt, gi, gt, mlm_logits, itm_logit)


def projector(x: Var, pvars: dict[str, Var], prefix: str) -> Var:
    """Three linear layers with batch standardization + ReLU after the
    first two. Batch statistics need at least 2 rows."""
    if x.value.shape[0] < 2:
        raise PreconditionError(
            "projector needs a batch of at least 2 rows for batch statistics"
        )
    h = add_rowvec(nm.matmul(x, pvars[f"{prefix}.w1"]), pvars[f"{prefix}.b1"])
    h = nm.relu(nm.batch_standardize(h))
    h = add_rowvec(nm.matmul(h, pvars[f"{prefix}.w2"]), pvars[f"{prefix}.b2"])
    h = nm.relu(nm.batch_standardize(h))
    return add_rowvec(nm.matmul(h, pvars[f"{prefix}.w3"]), pvars[f"{prefix}.b3"])


# ---------------------------------------------------------------------------
# Masked-token and matching losses.
# ---------------------------------------------------------------------------


def mlm_mask(token_ids, prob: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Independently replace each position with MASK_ID at rate prob."""
    if not 0.0 < prob < 1.0:
        raise PreconditionError("mask probability must lie strictly inside (0, 1)")
    ids = np.asarray(token_ids, dtype=np.intp).ravel().copy()
    draw = child_rng(seed, "mlm_mask").random(ids.size)
    positions = np.where(draw < prob)[0]
    ids[positions] = MASK_ID
    return ids, positions


def mlm_loss(mlm_logits: Var, original_ids, mask_positions) -> tuple[Var, int]:
    """Mean cross entropy over masked positions; (zero, 0) when none."""
    positions = np.asarray(mask_positions, dtype=np.intp).ravel()
    if positions.size == 0:
        return mlm_logits.tape.constant(np.zeros((1, 1))), 0
    ids = np.asarray(original_ids, dtype=np.intp).ravel()
    rows = nm.row_gather(mlm_logits, positions)
    ce = nm.cross_entropy_rows(rows, ids[positions])
    return nm.reduce_mean(ce, "all"), int(positions.size)


def itm_loss(itm_logit: Var, label: int) -> Var:
    """Binary cross entropy from a single logit; label 1 = matched pair."""
    if label not in (0, 1):
        raise PreconditionError(f"label must be 0 or 1, got {label}")
    # sigmoid(z) equals softmax([0, z])[1], so the stable two-class CE
    # primitive covers the binary case.
    two_class = nm.matmul(itm_logit, itm_logit.tape.constant(np.array([[0.0, 1.0]])))
    return nm.cross_entropy_rows(two_class, [label])
