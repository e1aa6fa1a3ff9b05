"""Datasets, the synthetic cross-subject generator, and batch construction.

Stimulus IDs are row indices into the shared TargetBundle arrays. The
synthetic generator draws one latent vector per stimulus and renders voxels
and all supervision targets as fixed linear images of it, so ground truth is
exactly recoverable and an oracle (least squares) bounds what training can
achieve. Train stimuli are disjoint across subjects; test stimuli are shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng, sample_beta
from .tensorio import DatasetManifest, SubjectEntry, load_manifest, save_manifest, write_tensor

__all__ = [
    "SubjectDataset",
    "TargetBundle",
    "MixupPlan",
    "Batch",
    "SynthSpec",
    "average_repeated_trials",
    "generate_synthetic",
    "write_synth",
    "load_datasets",
    "make_batches",
]


@dataclass
class SubjectDataset:
    subject_id: str
    voxels: np.ndarray  # N x V_s f32
    stimulus_ids: np.ndarray  # N i64, rows of TargetBundle
    split: str  # "train" | "test"


@dataclass
class TargetBundle:
    visual_tokens: np.ndarray  # M x K x D
    visual_cls: np.ndarray  # M x D
    text_cls: np.ndarray  # M x D
    latents: np.ndarray  # M x C x S x S
    caption_pool: np.ndarray | None = None
    class_weights: np.ndarray | None = None


@dataclass
class MixupPlan:
    k: np.ndarray  # B i64, within-batch partner index
    lam: np.ndarray  # B f32 in (0, 1)


@dataclass
class Batch:
    subject_id: str
    voxels: np.ndarray  # B x V_s, mixed when plan is present
    stimulus_ids: np.ndarray  # B i64
    plan: MixupPlan | None = None


@dataclass
class SynthSpec:
    n_subjects: int = 2
    latent_dim: int = 16
    voxels_per_subject: int = 128
    n_train: int = 600
    n_test: int = 100
    noise_sigma: float = 0.05
    n_tokens: int = 16  # K
    embed_dim: int = 32  # D
    latent_channels: int = 2  # C
    latent_size: int = 16  # S
    seed: int = 0


def average_repeated_trials(ds: SubjectDataset) -> SubjectDataset:
    """Collapse repeated stimulus IDs to their mean voxel response, ordered by
    first occurrence."""
    ids, first, inverse = np.unique(ds.stimulus_ids, return_index=True, return_inverse=True)
    sums = np.zeros((len(ids), ds.voxels.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, ds.voxels.astype(np.float64))
    counts = np.bincount(inverse, minlength=len(ids)).astype(np.float64)
    means = sums / counts[:, None]
    order = np.argsort(first)
    return SubjectDataset(
        subject_id=ds.subject_id,
        voxels=means[order].astype(np.float32),
        stimulus_ids=ids[order].astype(np.int64),
        split=ds.split,
    )


def _smooth_basis(latent_dim: int, channels: int, side: int, gen: np.random.Generator) -> np.ndarray:
    """Low-frequency cosine images, one C x S x S grid per latent dimension."""
    modes = min(4, side)
    x = (np.arange(side) + 0.5) / side
    waves = np.stack([np.cos(np.pi * u * x) for u in range(modes)])  # modes x S
    plane = np.einsum("ux,vy->uvxy", waves, waves)  # modes x modes x S x S
    coefs = gen.standard_normal((latent_dim, channels, modes, modes)) / modes
    return np.einsum("lcuv,uvxy->lcxy", coefs, plane).astype(np.float32)


def generate_synthetic(spec: SynthSpec) -> tuple[list[SubjectDataset], TargetBundle, dict[str, np.ndarray]]:
    """Build the synthetic benchmark; returns (datasets, targets, truth).

    `truth` holds the ground-truth stimulus latents under "z" plus every fixed
    map used to render voxels and targets, so tests can invert the generative
    process. Datasets come in subject order, train then test per subject.
    """
    rng = Rng(spec.seed)
    n_sub, latent_dim = spec.n_subjects, spec.latent_dim
    n_total = spec.n_test + n_sub * spec.n_train
    z = rng.stream("synth.z").standard_normal((n_total, latent_dim)).astype(np.float32)

    token_gen = rng.stream("synth.tokens")
    token_maps = (token_gen.standard_normal((spec.n_tokens, latent_dim, spec.embed_dim)) / np.sqrt(latent_dim)).astype(
        np.float32
    )
    token_offsets = (0.1 * token_gen.standard_normal((spec.n_tokens, spec.embed_dim))).astype(np.float32)
    visual_tokens = np.einsum("ml,kld->mkd", z, token_maps) + token_offsets[None]
    # CLS consistency: the global visual target is the token-0 view, matching
    # a CLS-first token layout so token-level and CLS-level supervision agree.
    visual_cls = visual_tokens[:, 0, :].copy()
    text_map = (rng.stream("synth.text").standard_normal((latent_dim, spec.embed_dim)) / np.sqrt(latent_dim)).astype(
        np.float32
    )
    text_cls = z @ text_map
    basis = _smooth_basis(latent_dim, spec.latent_channels, spec.latent_size, rng.stream("synth.latents"))
    latents = np.einsum("ml,lcxy->mcxy", z, basis).astype(np.float32)

    test_ids = np.arange(spec.n_test, dtype=np.int64)
    datasets: list[SubjectDataset] = []
    truth: dict[str, np.ndarray] = {
        "z": z,
        "token_maps": token_maps,
        "token_offsets": token_offsets,
        "text_map": text_map,
        "latent_basis": basis,
    }
    for s in range(n_sub):
        sid = f"subj{s + 1:02d}"
        gen = rng.stream(f"synth.subject.{sid}")
        w = (gen.standard_normal((spec.voxels_per_subject, latent_dim)) / np.sqrt(latent_dim)).astype(np.float32)
        bias = (0.1 * gen.standard_normal(spec.voxels_per_subject)).astype(np.float32)
        truth[f"subject.{sid}.map"] = w
        truth[f"subject.{sid}.bias"] = bias
        train_ids = spec.n_test + s * spec.n_train + np.arange(spec.n_train, dtype=np.int64)
        for split, ids in (("train", train_ids), ("test", test_ids)):
            clean = z[ids] @ w.T + bias
            noisy = clean + spec.noise_sigma * gen.standard_normal(clean.shape).astype(np.float32)
            datasets.append(
                SubjectDataset(subject_id=sid, voxels=noisy.astype(np.float32), stimulus_ids=ids.copy(), split=split)
            )
    bundle = TargetBundle(
        visual_tokens=visual_tokens.astype(np.float32),
        visual_cls=visual_cls,
        text_cls=text_cls.astype(np.float32),
        latents=latents,
        caption_pool=text_cls[test_ids].astype(np.float32),
    )
    return datasets, bundle, truth


def write_synth(spec: SynthSpec, out_dir) -> Path:
    """Generate a synthetic benchmark and persist it as a manifest directory
    (tensor files + manifest.json + truth/ with the generative maps)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets, bundle, truth = generate_synthetic(spec)

    subjects = []
    by_subject: dict[str, list[SubjectDataset]] = {}
    for ds in datasets:
        by_subject.setdefault(ds.subject_id, []).append(ds)
    for sid, parts in sorted(by_subject.items()):
        voxels = np.concatenate([p.voxels for p in parts], axis=0)
        stim = np.concatenate([p.stimulus_ids for p in parts], axis=0)
        write_tensor(out_dir / f"{sid}_voxels.bin", voxels.astype(np.float32))
        write_tensor(out_dir / f"{sid}_stimulus_ids.bin", stim.astype(np.int64))
        subjects.append(
            SubjectEntry(
                id=sid,
                voxel_count=voxels.shape[1],
                voxels=f"{sid}_voxels.bin",
                stimulus_ids=f"{sid}_stimulus_ids.bin",
            )
        )

    targets = {}
    for key in ("visual_tokens", "visual_cls", "text_cls", "latents", "caption_pool"):
        arr = getattr(bundle, key)
        write_tensor(out_dir / f"{key}.bin", arr.astype(np.float32))
        targets[key] = f"{key}.bin"

    n_total = bundle.visual_tokens.shape[0]
    write_tensor(out_dir / "split_test.bin", np.arange(spec.n_test, dtype=np.int64))
    write_tensor(out_dir / "split_train.bin", np.arange(spec.n_test, n_total, dtype=np.int64))
    manifest = DatasetManifest(
        root=out_dir,
        subjects=subjects,
        targets=targets,
        splits={"train": "split_train.bin", "test": "split_test.bin"},
    )
    save_manifest(manifest, out_dir / "manifest.json")

    truth_dir = out_dir / "truth"
    truth_dir.mkdir(exist_ok=True)
    for key, arr in truth.items():
        write_tensor(truth_dir / f"{key}.bin", arr.astype(np.float32))
    return out_dir / "manifest.json"


def load_datasets(manifest: DatasetManifest | str | Path) -> tuple[list[SubjectDataset], TargetBundle]:
    """Materialize per-subject train/test datasets and targets from a manifest."""
    from .tensorio import read_tensor

    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    split_sets = {
        name: set(int(i) for i in read_tensor(manifest.path(rel))) for name, rel in manifest.splits.items()
    }
    datasets = []
    for entry in manifest.subjects:
        voxels = read_tensor(manifest.path(entry.voxels))
        stim = read_tensor(manifest.path(entry.stimulus_ids))
        for split in ("train", "test"):
            member = np.array([int(i) in split_sets[split] for i in stim], dtype=bool)
            if member.any():
                datasets.append(
                    SubjectDataset(
                        subject_id=entry.id,
                        voxels=voxels[member],
                        stimulus_ids=stim[member],
                        split=split,
                    )
                )
    kwargs = {}
    for key in ("caption_pool", "class_weights"):
        if key in manifest.targets:
            kwargs[key] = read_tensor(manifest.path(manifest.targets[key]))
    bundle = TargetBundle(
        visual_tokens=read_tensor(manifest.path(manifest.targets["visual_tokens"])),
        visual_cls=read_tensor(manifest.path(manifest.targets["visual_cls"])),
        text_cls=read_tensor(manifest.path(manifest.targets["text_cls"])),
        latents=read_tensor(manifest.path(manifest.targets["latents"])),
        **kwargs,
    )
    return datasets, bundle


def make_batches(
    datasets: list[SubjectDataset], batch: int, gen: np.random.Generator, with_mixup: bool
):
    """Yield single-subject batches, rotating across subjects step by step.

    Each epoch covers every row of every dataset exactly once (final partial
    batches allowed). With mixup, voxels are convex-combined within the batch
    under Beta(0.15, 0.15) factors and the plan is attached for the loss.
    """
    if not datasets:
        raise ValueError("make_batches needs at least one dataset")
    if batch < 1:
        raise ValueError(f"batch size must be positive, got {batch}")
    for ds in datasets:
        if batch > len(ds.stimulus_ids):
            raise ValueError(
                f"batch {batch} exceeds {ds.subject_id} {ds.split} size {len(ds.stimulus_ids)}"
            )
    queues = []
    for ds in datasets:
        perm = gen.permutation(len(ds.stimulus_ids))
        chunks = [perm[i : i + batch] for i in range(0, len(perm), batch)]
        queues.append((ds, chunks))
    step = 0
    while any(chunks for _, chunks in queues):
        ds, chunks = queues[step % len(queues)]
        step += 1
        if not chunks:
            continue
        rows = chunks.pop(0)
        voxels = ds.voxels[rows]
        stim = ds.stimulus_ids[rows]
        plan = None
        if with_mixup:
            b = len(rows)
            k = gen.integers(0, b, size=b)
            lam = np.clip(sample_beta(0.15, 0.15, gen, size=b), 1e-6, 1.0 - 1e-6).astype(np.float32)
            voxels = lam[:, None] * voxels + (1.0 - lam[:, None]) * voxels[k]
            plan = MixupPlan(k=k.astype(np.int64), lam=lam)
        yield Batch(subject_id=ds.subject_id, voxels=voxels.astype(np.float32), stimulus_ids=stim, plan=plan)
