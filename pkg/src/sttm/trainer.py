"""Orchestration: sequential high-then-low pretraining, the two-stage adapter
transfer protocol, and full evaluation reports.

Freeze contracts are enforced twice: frozen parameters are excluded from the
optimizer (requires_grad False keeps them off the tape entirely), and after
every stage the frozen tensors are byte-compared against a snapshot. A
violation raises instead of being reported softly.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .config import RunConfig, config_digest, config_to_dict
from .datamodel import SubjectDataset, TargetBundle, average_repeated_trials, load_datasets
from .evalkit import retrieval_eval, text_retrieval_eval
from .highlevel import HighLevelModel, LossWeights, forward_high, train_high_epoch
from .lowlevel import LowLevelModel, eval_low, train_low_epoch
from .numerics import AdamW, LrSchedule
from .prior import PriorModel, make_schedule, sample_prior, select_best
from .rng import Rng
from .tensorio import (
    CheckpointManifest,
    DataError,
    load_checkpoint,
    load_manifest,
    read_tensor,
    save_checkpoint,
    write_tensor,
)

__all__ = [
    "TransferStage",
    "make_stage",
    "apply_stage",
    "params_digest",
    "run_train_high",
    "run_train_low",
    "run_pretrain",
    "run_transfer",
    "run_eval",
    "run_sample_prior",
]

IMG2IMG_STRENGTH = 0.3  # exported alongside predicted latents for downstream img2img


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def _named_params(high: HighLevelModel | None = None, prior: PriorModel | None = None, low: LowLevelModel | None = None):
    named = {}
    if high is not None:
        named.update(dict(high.named_parameters()))
    if prior is not None:
        named.update({f"prior.{n}": p for n, p in prior.named_parameters()})
    if low is not None:
        named.update(dict(low.named_parameters()))
    return named


def _to_checkpoint(named, cfg: RunConfig, step: int) -> CheckpointManifest:
    return CheckpointManifest(
        params={n: p.data.copy() for n, p in named.items()},
        frozen={n: not p.requires_grad for n, p in named.items()},
        step=step,
        seed=cfg.seed,
        config_digest=config_digest(cfg),
    )


def _subject_dims_from_ckpt(ckpt: CheckpointManifest) -> dict[str, int]:
    dims = {}
    for name, arr in ckpt.params.items():
        m = re.match(r"adapter\.([^.]+)\.proj\.w$", name)
        if m:
            dims[m.group(1)] = arr.shape[0]
    if not dims:
        raise DataError("checkpoint contains no subject adapters")
    return dims


def _build_high(cfg: RunConfig, subject_dims: dict[str, int], gen: np.random.Generator) -> HighLevelModel:
    return HighLevelModel(
        subject_dims,
        width=cfg.dims.h_high,
        k=cfg.dims.K,
        d_low=cfg.dims.d_low,
        d=cfg.dims.D,
        rng=gen,
        dropout=cfg.schedule.dropout,
        tokenizer_hidden=cfg.dims.tokenizer_hidden or None,
    )


def _build_prior(cfg: RunConfig, gen: np.random.Generator) -> PriorModel:
    return PriorModel(
        cfg.dims.K, cfg.dims.D, gen, layers=cfg.prior.layers, heads=cfg.prior.heads, dropout=cfg.schedule.dropout
    )


def _build_low(cfg: RunConfig, subject_dims: dict[str, int], gen: np.random.Generator) -> LowLevelModel:
    return LowLevelModel(
        subject_dims,
        width=cfg.dims.h_low,
        high_width=cfg.dims.h_high,
        channels=cfg.dims.C,
        side=cfg.dims.S,
        rng=gen,
        dropout=cfg.schedule.dropout,
        guidance=cfg.lowlevel.guidance,
        base_channels=cfg.dims.base_channels,
    )


def rebuild_high(cfg: RunConfig, ckpt: CheckpointManifest, rng: Rng) -> tuple[HighLevelModel, PriorModel]:
    subject_dims = _subject_dims_from_ckpt(ckpt)
    high = _build_high(cfg, subject_dims, rng.stream("rebuild.high"))
    prior = _build_prior(cfg, rng.stream("rebuild.prior"))
    try:
        high.load_state_dict({n: a for n, a in ckpt.params.items() if not n.startswith("prior.")})
        prior.load_state_dict({n[len("prior.") :]: a for n, a in ckpt.params.items() if n.startswith("prior.")})
    except ValueError as exc:
        raise DataError(f"checkpoint incompatible with configured dims: {exc}") from exc
    return high, prior


def rebuild_low(cfg: RunConfig, ckpt: CheckpointManifest, rng: Rng) -> LowLevelModel:
    subject_dims = _subject_dims_from_ckpt(ckpt)
    low = _build_low(cfg, subject_dims, rng.stream("rebuild.low"))
    try:
        low.load_state_dict(dict(ckpt.params))
    except ValueError as exc:
        raise DataError(f"low-level checkpoint incompatible with configured dims: {exc}") from exc
    return low


# ---------------------------------------------------------------------------
# transfer stages
# ---------------------------------------------------------------------------


@dataclass
class TransferStage:
    stage: str  # "adapter_only" | "finetune_rest"
    frozen_patterns: list[str]


def make_stage(stage: str, new_subject: str) -> TransferStage:
    """adapter_only freezes everything except the new subject's adapter;
    finetune_rest freezes all adapters plus the shared backbone."""
    if stage == "adapter_only":
        return TransferStage(stage, [rf"^(?!adapter\.{re.escape(new_subject)}\.)"])
    if stage == "finetune_rest":
        return TransferStage(stage, [r"^adapter\.", r"^backbone\."])
    raise ValueError(f"unknown transfer stage {stage!r}")


def apply_stage(stage: TransferStage, named: dict) -> list[str]:
    """Set requires_grad per the stage's frozen patterns; returns frozen names."""
    frozen = []
    for name, p in named.items():
        is_frozen = any(re.search(pat, name) for pat in stage.frozen_patterns)
        p.requires_grad = not is_frozen
        if is_frozen:
            frozen.append(name)
    return frozen


def _snapshot(named, names) -> dict[str, bytes]:
    return {n: named[n].data.tobytes() for n in names}


def _verify_frozen(named, snapshot: dict[str, bytes], context: str) -> None:
    changed = [n for n, payload in snapshot.items() if named[n].data.tobytes() != payload]
    if changed:
        raise RuntimeError(f"freeze contract violated during {context}: {changed[:5]}")


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _steps_per_epoch(datasets: list[SubjectDataset], batch: int) -> int:
    return sum(math.ceil(len(ds.stimulus_ids) / batch) for ds in datasets)


def _train_high(
    cfg: RunConfig,
    high: HighLevelModel,
    prior: PriorModel,
    train_sets: list[SubjectDataset],
    bundle: TargetBundle,
    rng: Rng,
    epochs: int,
) -> list[dict]:
    params = [p for p in _named_params(high, prior).values()]
    optimizer = AdamW(params, weight_decay=cfg.schedule.weight_decay)
    total = max(epochs * _steps_per_epoch(train_sets, cfg.schedule.batch), 1)
    sched = LrSchedule(max_lr=cfg.schedule.max_lr, total_steps=total, warmup_frac=cfg.schedule.warmup_frac)
    noise_sched = make_schedule(cfg.prior.T, cfg.prior.schedule)
    weights = LossWeights(
        beta=cfg.loss.beta, tau=cfg.loss.tau, alpha_low=cfg.loss.alpha_low, alpha_high=cfg.loss.alpha_high
    )
    history = []
    for epoch in range(epochs):
        history.append(
            train_high_epoch(
                high,
                prior,
                train_sets,
                bundle,
                optimizer,
                sched,
                noise_sched,
                weights,
                epoch,
                epochs,
                cfg.schedule.batch,
                rng,
                bimixco_frac=cfg.schedule.bimixco_frac,
                mask_ratio=cfg.prior.rho,
                mask_mode=cfg.prior.mask_mode,
            )
        )
    return history


def _train_low(
    cfg: RunConfig,
    low: LowLevelModel,
    high: HighLevelModel | None,
    train_sets: list[SubjectDataset],
    bundle: TargetBundle,
    rng: Rng,
    epochs: int,
) -> list[dict]:
    optimizer = AdamW(low.parameters(), weight_decay=cfg.schedule.weight_decay)
    total = max(epochs * _steps_per_epoch(train_sets, cfg.schedule.batch), 1)
    sched = LrSchedule(max_lr=cfg.schedule.max_lr, total_steps=total, warmup_frac=cfg.schedule.warmup_frac)
    history = []
    for epoch in range(epochs):
        history.append(
            train_low_epoch(
                low,
                high,
                train_sets,
                bundle,
                optimizer,
                sched,
                epoch,
                cfg.schedule.batch,
                rng,
                p_guidance=cfg.lowlevel.p_sub_guidance,
                p_lowlevel=cfg.lowlevel.p_sub_lowlevel,
            )
        )
    return history


def _split(datasets: list[SubjectDataset], split: str) -> list[SubjectDataset]:
    return [ds for ds in datasets if ds.split == split]


def _load_training_data(cfg: RunConfig, manifest_path):
    manifest = load_manifest(manifest_path)
    datasets, bundle = load_datasets(manifest)
    _require_dims(cfg, bundle)
    train_sets = _split(datasets, "train")
    if not train_sets:
        raise DataError("manifest has no training rows")
    subject_dims = {ds.subject_id: ds.voxels.shape[1] for ds in train_sets}
    if len(subject_dims) > cfg.max_subjects:
        raise DataError(f"{len(subject_dims)} subjects exceed max_subjects={cfg.max_subjects}")
    return train_sets, bundle, subject_dims


def run_train_high(cfg: RunConfig, manifest_path, out_dir, epochs: int | None = None) -> dict:
    """Train the high-level pipeline jointly with the prior; writes high_ckpt,
    per-epoch metrics, and the effective config under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_sets, bundle, subject_dims = _load_training_data(cfg, manifest_path)
    rng = Rng(cfg.seed)
    high = _build_high(cfg, subject_dims, rng.stream("init.high"))
    prior = _build_prior(cfg, rng.stream("init.prior"))
    history = _train_high(
        cfg, high, prior, train_sets, bundle, rng.child("pretrain.high"), epochs or cfg.schedule.epochs
    )
    named = _named_params(high, prior)
    save_checkpoint(_to_checkpoint(named, cfg, step=len(history)), out_dir / "high_ckpt")
    (out_dir / "metrics_high.json").write_text(json.dumps(history, indent=2) + "\n")
    (out_dir / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    return {"high_ckpt": str(out_dir / "high_ckpt"), "final": history[-1]}


def run_train_low(cfg: RunConfig, manifest_path, out_dir, high_ckpt_dir=None, epochs: int | None = None) -> dict:
    """Train the latent reconstruction pipeline; guidance requires a high-level
    checkpoint, which stays byte-identical throughout (verified)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_sets, bundle, subject_dims = _load_training_data(cfg, manifest_path)
    rng = Rng(cfg.seed)
    high = None
    named_high: dict = {}
    if cfg.lowlevel.guidance:
        if high_ckpt_dir is None:
            raise DataError("low-level training with guidance enabled requires a high-level checkpoint")
        high, prior = rebuild_high(cfg, load_checkpoint(high_ckpt_dir), rng)
        missing = set(subject_dims) - set(high.adapter)
        if missing:
            raise DataError(f"high-level checkpoint lacks adapters for subjects {sorted(missing)}")
        named_high = _named_params(high, prior)
    low = _build_low(cfg, subject_dims, rng.stream("init.low"))
    snapshot = _snapshot(named_high, list(named_high))
    history = _train_low(
        cfg, low, high, train_sets, bundle, rng.child("pretrain.low"), epochs or cfg.schedule.epochs_low
    )
    _verify_frozen(named_high, snapshot, "low-level training")
    save_checkpoint(_to_checkpoint(_named_params(low=low), cfg, step=len(history)), out_dir / "low_ckpt")
    (out_dir / "metrics_low.json").write_text(json.dumps(history, indent=2) + "\n")
    return {"low_ckpt": str(out_dir / "low_ckpt"), "final": history[-1]}


def run_pretrain(cfg: RunConfig, manifest_path, out_dir) -> dict:
    """High-level training followed by guided low-level training, all under
    out_dir. The two phases share the configured seed but use disjoint
    derived streams, so each is reproducible in isolation."""
    out_dir = Path(out_dir)
    res_high = run_train_high(cfg, manifest_path, out_dir)
    res_low = run_train_low(
        cfg, manifest_path, out_dir, high_ckpt_dir=res_high["high_ckpt"] if cfg.lowlevel.guidance else None
    )
    return {
        "high_ckpt": res_high["high_ckpt"],
        "low_ckpt": res_low["low_ckpt"],
        "high_final": res_high["final"],
        "low_final": res_low["final"],
    }


def _require_dims(cfg: RunConfig, bundle: TargetBundle) -> None:
    m, k, d = bundle.visual_tokens.shape
    if (k, d) != (cfg.dims.K, cfg.dims.D):
        raise DataError(f"targets are K={k}, D={d} but config says K={cfg.dims.K}, D={cfg.dims.D}")
    c, s = bundle.latents.shape[1], bundle.latents.shape[2]
    if (c, s) != (cfg.dims.C, cfg.dims.S):
        raise DataError(f"latents are C={c}, S={s} but config says C={cfg.dims.C}, S={cfg.dims.S}")


def run_transfer(cfg: RunConfig, ckpt_dir, manifest_path, out_dir, subject_id: str | None = None) -> dict:
    """Two-stage adapter transfer on the high-level pipeline.

    Stage adapter_only trains just the new subject's adapter; stage
    finetune_rest freezes adapters and backbone and fine-tunes the rest
    (tokenizer, projector, prior). Training objectives match pretraining.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(ckpt_dir)
    manifest = load_manifest(manifest_path)
    datasets, bundle = load_datasets(manifest)
    _require_dims(cfg, bundle)

    rng = Rng(cfg.seed)
    high, prior = rebuild_high(cfg, ckpt, rng)
    known = set(high.adapter)
    candidates = sorted({ds.subject_id for ds in _split(datasets, "train")} - known)
    if subject_id is None:
        if len(candidates) != 1:
            raise DataError(f"cannot infer transfer subject; candidates: {candidates}")
        subject_id = candidates[0]
    if subject_id in known:
        raise DataError(f"subject {subject_id!r} already present in the checkpoint")
    new_train = [ds for ds in _split(datasets, "train") if ds.subject_id == subject_id]
    if not new_train:
        raise DataError(f"manifest has no training rows for subject {subject_id!r}")
    high.add_subject(subject_id, new_train[0].voxels.shape[1], rng.stream("transfer.adapter_init"))

    named = _named_params(high, prior)
    stage1 = make_stage("adapter_only", subject_id)
    frozen1 = apply_stage(stage1, named)
    snap1 = _snapshot(named, frozen1)
    history1 = _train_high(cfg, high, prior, new_train, bundle, rng.child("transfer.stage1"), cfg.transfer.adapter_epochs)
    _verify_frozen(named, snap1, "transfer stage adapter_only")

    stage2 = make_stage("finetune_rest", subject_id)
    frozen2 = apply_stage(stage2, named)
    snap2 = _snapshot(named, frozen2)
    history2 = _train_high(cfg, high, prior, new_train, bundle, rng.child("transfer.stage2"), cfg.transfer.finetune_epochs)
    _verify_frozen(named, snap2, "transfer stage finetune_rest")

    for p in named.values():
        p.requires_grad = True
    save_checkpoint(_to_checkpoint(named, cfg, step=len(history1) + len(history2)), out_dir / "transfer_ckpt")
    (out_dir / "metrics_transfer.json").write_text(
        json.dumps({"adapter_only": history1, "finetune_rest": history2}, indent=2) + "\n"
    )
    return {
        "transfer_ckpt": str(out_dir / "transfer_ckpt"),
        "subject": subject_id,
        "stage1_final": history1[-1],
        "stage2_final": history2[-1],
    }


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _flatten_rows(tokens: np.ndarray) -> np.ndarray:
    """Per-token normalize, flatten, unit rows: the retrieval embedding space."""
    norms = np.sqrt((tokens**2).sum(axis=-1, keepdims=True)) + 1e-12
    unit = tokens / norms
    b, k, d = unit.shape
    return unit.reshape(b, k * d) / math.sqrt(k)


def run_eval(
    cfg: RunConfig,
    high_ckpt_dir,
    manifest_path,
    out_dir,
    low_ckpt_dir=None,
    pool: int = 50,
    iterations: int = 10,
    k: int = 1,
    text_k: int = 5,
    eval_seed: int | None = None,
    prior_items: int | None = None,
) -> dict:
    """Test-set report: retrieval accuracies, best-of-n prior cosine, and
    (when a low-level checkpoint is given) test L1 plus exported latents."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(manifest_path)
    datasets, bundle = load_datasets(manifest)
    _require_dims(cfg, bundle)
    test_sets = [average_repeated_trials(ds) for ds in _split(datasets, "test")]
    if not test_sets:
        raise DataError("manifest has no test rows")

    rng = Rng(cfg.seed if eval_seed is None else eval_seed)
    high, prior = rebuild_high(cfg, load_checkpoint(high_ckpt_dir), rng)
    known = {ds.subject_id for ds in test_sets} - set(high.adapter)
    if known:
        raise DataError(f"checkpoint lacks adapters for test subjects {sorted(known)}")

    noise_sched = make_schedule(cfg.prior.T, cfg.prior.schedule)
    test_ids = read_tensor(manifest.path(manifest.splits["test"]))
    pos_in_pool = {int(stim): i for i, stim in enumerate(test_ids)}
    caption_pool = bundle.caption_pool if bundle.caption_pool is not None else bundle.text_cls[test_ids]

    image_scores, brain_scores, text_scores, prior_cosines = [], [], [], []
    for ds in test_sets:
        with no_grad():
            outs = forward_high(high, ds.voxels, ds.subject_id, rng=None)
        p_flat = _flatten_rows(outs.projected.data)
        t_flat = _flatten_rows(bundle.visual_tokens[ds.stimulus_ids])
        g_ret = rng.stream(f"eval.retrieval.{ds.subject_id}")
        image_scores.append(retrieval_eval(p_flat, t_flat, pool, iterations, k, g_ret))
        brain_scores.append(retrieval_eval(t_flat, p_flat, pool, iterations, k, g_ret))
        true_idx = np.array([pos_in_pool[int(i)] for i in ds.stimulus_ids])
        text_scores.append(text_retrieval_eval(outs.cls.data, caption_pool, text_k, true_idx))

        limit = len(ds.stimulus_ids) if prior_items is None else min(prior_items, len(ds.stimulus_ids))
        brain_tokens = outs.brain_tokens.data[:limit]
        samples = sample_prior(
            prior, brain_tokens, noise_sched, cfg.prior.sample_n, rng.stream(f"eval.prior.{ds.subject_id}")
        )
        target_unit = bundle.visual_tokens[ds.stimulus_ids[:limit]]
        target_flat = _flatten_rows(target_unit)
        for i in range(limit):
            best = select_best(samples[i], outs.projected.data[i])
            chosen = samples[i, best].reshape(1, cfg.dims.K, cfg.dims.D)
            prior_cosines.append(float(_flatten_rows(chosen)[0] @ target_flat[i]))

    report = {
        "image_at1": float(np.mean(image_scores)),
        "brain_at1": float(np.mean(brain_scores)),
        "text_at5": float(np.mean(text_scores)),
        "prior_cosine": float(np.mean(prior_cosines)),
        "lowlevel_l1": None,
        "pool_size": pool,
        "iterations": iterations,
        "seed": cfg.seed if eval_seed is None else eval_seed,
    }

    if low_ckpt_dir is not None:
        low = rebuild_low(cfg, load_checkpoint(low_ckpt_dir), rng)
        l1, grids = eval_low(low, high, test_sets, bundle)
        report["lowlevel_l1"] = l1
        exported = {}
        for sid, grid in grids.items():
            fname = f"latents_pred_{sid}.bin"
            write_tensor(out_dir / fname, grid.astype(np.float32))
            exported[sid] = fname
        (out_dir / "latents_export.json").write_text(
            json.dumps({"img2img_strength": IMG2IMG_STRENGTH, "files": exported}, indent=2) + "\n"
        )

    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def run_sample_prior(cfg: RunConfig, high_ckpt_dir, manifest_path, out_dir, n: int | None = None, limit: int = 8) -> dict:
    """Sample n prior chains for the first test items of each subject; writes
    one n x K x D tensor per item and a JSON of best-candidate indices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(manifest_path)
    datasets, _bundle = load_datasets(manifest)
    _require_dims(cfg, _bundle)
    rng = Rng(cfg.seed)
    high, prior = rebuild_high(cfg, load_checkpoint(high_ckpt_dir), rng)
    noise_sched = make_schedule(cfg.prior.T, cfg.prior.schedule)
    n = n or cfg.prior.sample_n
    selected: dict[str, dict[str, int]] = {}
    for ds in [average_repeated_trials(d) for d in _split(datasets, "test")]:
        with no_grad():
            outs = forward_high(high, ds.voxels[:limit], ds.subject_id, rng=None)
        samples = sample_prior(prior, outs.brain_tokens.data, noise_sched, n, rng.stream(f"sample.{ds.subject_id}"))
        per_subject = {}
        for i in range(samples.shape[0]):
            stim = int(ds.stimulus_ids[i])
            fname = f"prior_samples_{ds.subject_id}_{stim:06d}.bin"
            write_tensor(out_dir / fname, samples[i].astype(np.float32))
            per_subject[fname] = select_best(samples[i], outs.projected.data[i])
        selected[ds.subject_id] = per_subject
    (out_dir / "selected.json").write_text(json.dumps(selected, indent=2) + "\n")
    return selected
