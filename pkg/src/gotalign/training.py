"""Training loop, alignment evaluation, ablation sweeps, plan export.

Every iteration runs three phases on one gradient tape: (1) the dual
encoder processes two augmented views, yielding the four-pair twin loss
on global embeddings and, per sample and matched view pair, the
transport objective on projected local features with detached couplings;
(2) the fusion encoder reads the masked first-view caption for the
masked-token loss; (3) the fusion encoder scores matched pairs and a
within-batch derangement for the matching loss. The weighted sum is
backpropagated once and applied with the layer-adaptive optimizer under
the warmup+cosine schedule.

All randomness derives from (seed, global step, sample, purpose), so
runs are bit-reproducible and a resumed run replays the exact stream.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import barlow, checkpoint, data, graph, model
from . import numerics as nm
from . import optim, ot
from .config import TrainConfig, canonical_dump, config_hash
from .numerics import Tape, Var, derive_seed

EVAL_START_INDEX = 1_000_000  # eval samples never overlap the train split
N_HEATMAP_SAMPLES = 4

METRIC_COLUMNS = (
    "step", "epoch", "lr_weights", "lr_biases",
    "loss_bt", "loss_got", "loss_mlm", "loss_itm", "loss_total",
)


class TrainingAborted(RuntimeError):
    """Raised when a loss turns non-finite; carries the loss breakdown."""

    def __init__(self, step: int, breakdown: dict[str, float]):
        parts = ", ".join(f"{k}={v!r}" for k, v in breakdown.items())
        super().__init__(f"non-finite loss at iteration {step}: {parts}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr_weights: float
    lr_biases: float
    loss_bt: float
    loss_got: float
    loss_mlm: float
    loss_itm: float
    loss_total: float

    def row(self) -> list[str]:
        return [
            str(self.step), str(self.epoch),
            repr(self.lr_weights), repr(self.lr_biases),
            repr(self.loss_bt), repr(self.loss_got),
            repr(self.loss_mlm), repr(self.loss_itm), repr(self.loss_total),
        ]


@dataclass
class EvalResult:
    accuracy: float
    mean_plan_entropy: float
    chance_baseline: float
    n_tokens_scored: int


@dataclass
class RunReport:
    records: list[StepRecord]
    eval: EvalResult
    output_dir: str
    final_checkpoint: str


# ---------------------------------------------------------------------------
# Per-step loss assembly.
# ---------------------------------------------------------------------------


def _augmented_views(cfg: TrainConfig, samples, step_seed_key):
    policy1, policy2 = data.default_policies()
    views1, views2 = [], []
    for i, s in enumerate(samples):
        seed = derive_seed(cfg.seed, "aug", *step_seed_key, i)
        views1.append(data.augment_pair(cfg.data, s, policy1, view=1, seed=seed))
        views2.append(data.augment_pair(cfg.data, s, policy2, view=2, seed=seed))
    return views1, views2


def _dual_forwards(tape, pvars, cfg: TrainConfig, views, train, drop_key):
    outs = []
    for i, v in enumerate(views):
        outs.append(
            model.forward_dual(
                tape, pvars, v.patch_features, v.patch_indices, v.token_ids,
                cfg.model, train=train,
                drop_seed=derive_seed(cfg.seed, "drop", *drop_key, i),
            )
        )
    return outs


def _project_globals(tape, pvars, outs, prefix):
    stacked = nm.vstack([o for o in outs])
    return model.projector(stacked, pvars, prefix)


def _project_locals(tape, pvars, locals_list, prefix):
    """Project all samples' local rows in one batch, then split back."""
    stacked = nm.vstack(locals_list)
    projected = model.projector(stacked, pvars, prefix)
    sizes = [x.value.shape[0] for x in locals_list]
    pieces, start = [], 0
    for size in sizes:
        pieces.append(nm.row_gather(projected, np.arange(start, start + size)))
        start += size
    return pieces


def _similarities_for(feats: np.ndarray, cfg: TrainConfig):
    """(solver similarity, tape mask) per the configured similarity mode."""
    if cfg.sim_mode == "raw":
        return ot.intra_similarity(feats), None
    g = graph.build_graph(feats, cfg.tau)
    return g.similarity, g.adjacency


def _got_view_loss(tape, cfg: TrainConfig, img_projected, txt_projected, seed_key):
    """Mean fixed-plan transport objective over a batch of matched pairs."""
    per_sample = []
    for i, (xv, yv) in enumerate(zip(img_projected, txt_projected)):
        x_np, y_np = xv.value, yv.value
        sx, sx_mask = _similarities_for(x_np, cfg)
        sy, sy_mask = _similarities_for(y_np, cfg)
        solver_cfg = ot.with_seed(cfg.ot, derive_seed(cfg.seed, "gw", *seed_key, i))
        plan_wd, _, plan_gw, _ = ot.solve_pair(x_np, y_np, solver_cfg, sx=sx, sy=sy)
        per_sample.append(
            ot.taped_fixed_plan_got(
                xv, yv, plan_wd, plan_gw, cfg.gamma, cfg.gamma_convention,
                cfg.ot.gw_structural_cost, sx_mask, sy_mask,
            )
        )
    total = per_sample[0]
    for term in per_sample[1:]:
        total = nm.add(total, term)
    return nm.scale(total, 1.0 / len(per_sample))


def _mlm_batch_loss(tape, pvars, cfg: TrainConfig, views1, step_key):
    """Pooled mean cross entropy over every masked position in the batch."""
    ce_rows = []
    for i, v in enumerate(views1):
        masked_ids, positions = model.mlm_mask(
            v.token_ids, cfg.model.mlm_prob,
            seed=derive_seed(cfg.seed, "mlm", *step_key, i),
        )
        if positions.size == 0:
            continue
        out = model.forward_fusion(
            tape, pvars, v.patch_features, v.patch_indices, masked_ids,
            cfg.model, train=True,
            drop_seed=derive_seed(cfg.seed, "drop-mlm", *step_key, i),
        )
        rows = nm.row_gather(out.mlm_logits, positions)
        ce_rows.append(nm.cross_entropy_rows(rows, v.token_ids[positions]))
    if not ce_rows:
        return tape.constant(np.zeros((1, 1)))
    return nm.reduce_mean(nm.vstack(ce_rows), "all")


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation with no fixed point (needs n >= 2)."""
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def _itm_batch_loss(tape, pvars, cfg: TrainConfig, views1, step_key):
    """Matched pairs labeled 1, derangement-shuffled images labeled 0."""
    rng = nm.child_rng(derive_seed(cfg.seed, "itm", *step_key), "derange")
    shuffled = _derangement(len(views1), rng)
    terms = []
    for i, v in enumerate(views1):
        for label, img_source in ((1, v), (0, views1[shuffled[i]])):
            out = model.forward_fusion(
                tape, pvars, img_source.patch_features, img_source.patch_indices,
                v.token_ids, cfg.model, train=True,
                drop_seed=derive_seed(cfg.seed, "drop-itm", *step_key, i, label),
            )
            terms.append(model.itm_loss(out.itm_logit, label))
    return nm.reduce_mean(nm.vstack(terms), "all")


def compute_step_losses(
    tape: Tape,
    pvars: dict[str, Var],
    cfg: TrainConfig,
    samples,
    global_step: int,
) -> tuple[Var, dict[str, Var | None]]:
    """Assemble the taped total loss and its components for one batch."""
    step_key = (global_step,)
    views1, views2 = _augmented_views(cfg, samples, step_key)
    components: dict[str, Var | None] = {"bt": None, "got": None, "mlm": None, "itm": None}
    pieces = []

    if "BTGOT" in cfg.task_names:
        outs1 = _dual_forwards(tape, pvars, cfg, views1, True, ("v1", global_step))
        outs2 = _dual_forwards(tape, pvars, cfg, views2, True, ("v2", global_step))
        zi = _project_globals(tape, pvars, [o.global_image for o in outs1], "img.proj_global")
        zi2 = _project_globals(tape, pvars, [o.global_image for o in outs2], "img.proj_global")
        zt = _project_globals(tape, pvars, [o.global_text for o in outs1], "txt.proj_global")
        zt2 = _project_globals(tape, pvars, [o.global_text for o in outs2], "txt.proj_global")
        bt_total = barlow.multimodal_bt(
            barlow.EmbeddingBatch(zi, "I"), barlow.EmbeddingBatch(zi2, "I2"),
            barlow.EmbeddingBatch(zt, "T"), barlow.EmbeddingBatch(zt2, "T2"),
            cfg.bt,
        )
        components["bt"] = bt_total
        pieces.append(bt_total)

        if cfg.w_got > 0.0:
            got_terms = []
            for view_tag, outs in (("g1", outs1), ("g2", outs2)):
                img_loc = _project_locals(
                    tape, pvars, [o.local_image for o in outs], "img.proj_local"
                )
                txt_loc = _project_locals(
                    tape, pvars, [o.local_text for o in outs], "txt.proj_local"
                )
                got_terms.append(
                    _got_view_loss(tape, cfg, img_loc, txt_loc, (view_tag, global_step))
                )
            got_total = nm.add(got_terms[0], got_terms[1])
            components["got"] = got_total
            pieces.append(nm.scale(got_total, cfg.w_got))

    if "MLM" in cfg.task_names:
        mlm_total = _mlm_batch_loss(tape, pvars, cfg, views1, step_key)
        components["mlm"] = mlm_total
        pieces.append(mlm_total)

    if "ITM" in cfg.task_names:
        itm_total = _itm_batch_loss(tape, pvars, cfg, views1, step_key)
        components["itm"] = itm_total
        pieces.append(itm_total)

    if not pieces:
        total = tape.constant(np.zeros((1, 1)))
    else:
        total = pieces[0]
        for p in pieces[1:]:
            total = nm.add(total, p)
    return total, components


# ---------------------------------------------------------------------------
# The loop.
# ---------------------------------------------------------------------------


def _component_value(components, name) -> float:
    var = components.get(name)
    return float(var.value[0, 0]) if var is not None else 0.0


def _write_metrics(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def _checkpoint_blobs(params: model.ModelParams, state: optim.LarsState):
    blobs = dict(params.values)
    blobs.update(state.blobs())
    return blobs


def _save_checkpoint(path, params, state, cfg, global_step, epoch):
    checkpoint.save(
        path,
        _checkpoint_blobs(params, state),
        {"config_hash": config_hash(cfg), "global_step": global_step, "epoch": epoch},
    )


def load_checkpoint(path, cfg: TrainConfig):
    """Split a checkpoint back into parameters, optimizer state, and meta."""
    blobs, meta = checkpoint.load(path, expect_config_hash=config_hash(cfg))
    params = model.ModelParams(
        {k: v for k, v in blobs.items() if not k.startswith("opt.")}
    )
    state = optim.LarsState.from_blobs(blobs)
    return params, state, meta


def train(
    cfg: TrainConfig,
    resume_from: str | None = None,
    stop_after_epochs: int | None = None,
) -> RunReport:
    """Run the configured training; returns the report with eval metrics.

    resume_from continues a checkpointed run (same config hash) step for
    step; stop_after_epochs ends the loop early (checkpoints still cover
    every completed epoch).
    """
    out_dir = Path(cfg.output_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(canonical_dump(cfg), encoding="utf-8")

    steps_per_epoch = cfg.train_size // cfg.batch_size
    if steps_per_epoch < 1:
        raise nm.PreconditionError("train_size must allow at least one step per epoch")

    if resume_from is not None:
        params, state, meta = load_checkpoint(resume_from, cfg)
        start_epoch = int(meta["epoch"])
        global_step = int(meta["global_step"])
    else:
        params = model.init_params(cfg.model, seed=derive_seed(cfg.seed, "params"))
        state = optim.LarsState()
        start_epoch = 0
        global_step = 0

    train_set = data.generate(cfg.data, cfg.train_size, start_index=0)
    records: list[StepRecord] = []
    last_epoch = cfg.epochs if stop_after_epochs is None else min(cfg.epochs, stop_after_epochs)

    for epoch in range(start_epoch, last_epoch):
        order = nm.child_rng(cfg.seed, "order", epoch).permutation(cfg.train_size)
        for s in range(steps_per_epoch):
            batch = [train_set[i] for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            tape = Tape()
            pvars = model.wrap_params(tape, params)
            total, components = compute_step_losses(tape, pvars, cfg, batch, global_step)
            breakdown = {
                "loss_bt": _component_value(components, "bt"),
                "loss_got": _component_value(components, "got"),
                "loss_mlm": _component_value(components, "mlm"),
                "loss_itm": _component_value(components, "itm"),
                "loss_total": float(total.value[0, 0]),
            }
            if not all(math.isfinite(v) for v in breakdown.values()):
                raise TrainingAborted(global_step, breakdown)
            tape.backward(total)
            grads = {
                name: pvars[name].grad
                for name in params.names()
                if pvars[name].grad is not None
            }
            lr_w = optim.lr_at(global_step, steps_per_epoch, cfg.optim, "weights")
            lr_b = optim.lr_at(global_step, steps_per_epoch, cfg.optim, "biases")
            optim.lars_step(params, grads, state, lr_w, lr_b, cfg.optim)
            records.append(StepRecord(global_step, epoch, lr_w, lr_b, **breakdown))
            global_step += 1
        _save_checkpoint(
            out_dir / "checkpoints" / f"epoch_{epoch + 1}.ckpt",
            params, state, cfg, global_step, epoch + 1,
        )

    final_path = out_dir / "checkpoints" / "final.ckpt"
    _save_checkpoint(final_path, params, state, cfg, global_step, last_epoch)
    _write_metrics(out_dir / "metrics.csv", records)

    eval_result = evaluate_alignment(params, cfg)
    _export_eval_heatmaps(params, cfg, out_dir / "heatmaps")
    return RunReport(records, eval_result, str(out_dir), str(final_path))


# ---------------------------------------------------------------------------
# Evaluation.
# ---------------------------------------------------------------------------


def _eval_locals(params, cfg: TrainConfig, samples):
    """Projected local features for clean samples, batch statistics shared
    across the eval set."""
    tape = Tape()
    pvars = {name: tape.constant(params.values[name]) for name in params.names()}
    outs = []
    for s in samples:
        outs.append(
            model.forward_dual(
                tape, pvars, s.patch_features, s.patch_indices, s.token_ids, cfg.model
            )
        )
    img_loc = _project_locals(tape, pvars, [o.local_image for o in outs], "img.proj_local")
    txt_loc = _project_locals(tape, pvars, [o.local_text for o in outs], "txt.proj_local")
    return [x.value for x in img_loc], [y.value for y in txt_loc]


def _plan_for_sample(cfg: TrainConfig, x_np, y_np, sample_index: int):
    sx, _ = _similarities_for(x_np, cfg)
    sy, _ = _similarities_for(y_np, cfg)
    solver_cfg = ot.with_seed(cfg.ot, derive_seed(cfg.seed, "eval_gw", sample_index))
    plan_wd, _, plan_gw, _ = ot.solve_pair(x_np, y_np, solver_cfg, sx=sx, sy=sy)
    return ot.combined_plan(plan_wd, plan_gw, cfg.gamma, cfg.gamma_convention)


def _column_entropy(plan: np.ndarray) -> float:
    total = 0.0
    for j in range(plan.shape[1]):
        col = plan[:, j]
        mass = col.sum()
        if mass <= 0:
            continue
        q = col / mass
        nzq = q[q > 0]
        total += float(-(nzq * np.log(nzq)).sum())
    return total / plan.shape[1]


def evaluate_alignment(
    params: model.ModelParams, cfg: TrainConfig, samples=None
) -> EvalResult:
    """Token -> patch argmax accuracy of the combined transport plan.

    Ties break to the lowest patch index. The chance baseline is the
    closed-form sum of 1/n_patches over scored tokens.
    """
    if samples is None:
        samples = data.generate(cfg.data, cfg.eval_size, start_index=EVAL_START_INDEX)
    img_loc, txt_loc = _eval_locals(params, cfg, samples)
    hits = scored = 0
    chance = 0.0
    entropies = []
    for i, sample in enumerate(samples):
        plan = _plan_for_sample(cfg, img_loc[i], txt_loc[i], i)
        entropies.append(_column_entropy(plan))
        preds = plan.argmax(axis=0)  # first occurrence wins: lowest index
        for j, g in enumerate(sample.gt_alignment):
            if g == data.NO_ALIGNMENT:
                continue
            hits += int(preds[j] == g)
            scored += 1
            chance += 1.0 / sample.n_patches()
    accuracy = hits / scored if scored else 0.0
    chance_rate = chance / scored if scored else 0.0
    return EvalResult(accuracy, float(np.mean(entropies)), chance_rate, scored)


# ---------------------------------------------------------------------------
# Heatmap export.
# ---------------------------------------------------------------------------


def export_heatmap(plan: np.ndarray, base_path) -> tuple[str, str]:
    """Write the raw plan as CSV and a per-column-normalized binary PGM.

    Each column is rescaled by its own maximum so every token's map is
    visible regardless of its total mass.
    """
    plan = nm.as_matrix(plan)
    if np.any(plan < 0):
        raise nm.PreconditionError("plan entries must be nonnegative")
    base = Path(base_path)
    csv_path = base.with_suffix(".csv")
    pgm_path = base.with_suffix(".pgm")
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in plan:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    col_max = plan.max(axis=0, keepdims=True)
    scale = np.where(col_max > 0, 255.0 / np.where(col_max > 0, col_max, 1.0), 0.0)
    pixels = np.rint(plan * scale).astype(np.uint8)
    n, m = plan.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{m} {n}\n255\n".encode())
        fh.write(pixels.tobytes())
    return str(csv_path), str(pgm_path)


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def _export_eval_heatmaps(params, cfg: TrainConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = data.generate(cfg.data, N_HEATMAP_SAMPLES, start_index=EVAL_START_INDEX)
    img_loc, txt_loc = _eval_locals(params, cfg, samples)
    for i in range(len(samples)):
        plan = _plan_for_sample(cfg, img_loc[i], txt_loc[i], i)
        export_heatmap(plan, out_dir / f"sample_{i}")


# ---------------------------------------------------------------------------
# Ablation sweeps.
# ---------------------------------------------------------------------------

SWEEPABLE = ("w_got", "gamma", "tau", "proj_dims")


def ablate(cfg: TrainConfig, sweep: str, values, out_csv=None) -> list[dict]:
    """One full train+evaluate per setting under a shared seed."""
    if sweep not in SWEEPABLE:
        raise nm.PreconditionError(f"sweep must be one of {SWEEPABLE}, got {sweep!r}")
    if not values:
        raise nm.PreconditionError("sweep values must be nonempty")
    from .config import with_overrides

    rows = []
    for value in values:
        if sweep == "proj_dims":
            dims = tuple(int(v) for v in str(value).replace("-", ",").split(",") if v)
            setting_cfg = with_overrides(
                cfg,
                output_dir=os.path.join(cfg.output_dir, f"{sweep}_{'-'.join(map(str, dims))}"),
            )
            setting_cfg = replace(
                setting_cfg, model=replace(setting_cfg.model, proj_dims=dims)
            )
            label = "-".join(map(str, dims))
        else:
            setting_cfg = with_overrides(
                cfg,
                **{sweep: float(value)},
                output_dir=os.path.join(cfg.output_dir, f"{sweep}_{value}"),
            )
            label = repr(float(value))
        report = train(setting_cfg)
        rows.append(
            {
                "setting": label,
                "accuracy": report.eval.accuracy,
                "mean_plan_entropy": report.eval.mean_plan_entropy,
                "chance_baseline": report.eval.chance_baseline,
                "final_loss_total": report.records[-1].loss_total if report.records else 0.0,
            }
        )
    if out_csv is not None:
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
