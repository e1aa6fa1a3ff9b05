"""Bit-exact binary tensor files, dataset manifests, and checkpoints.

TensorFile layout (all little-endian):

    magic   4 bytes  b"STTM"
    version u32      currently 1
    dtype   u8       0 = float32, 1 = int64
    ndim    u8       1..8
    shape   ndim*u64 every entry >= 1
    payload row-major values

Manifests and checkpoint indexes are JSON; only numeric payloads are binary.
All validation errors raise DataError, which the CLI maps to exit code 3.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "MAGIC",
    "VERSION",
    "write_tensor",
    "read_tensor",
    "SubjectEntry",
    "DatasetManifest",
    "load_manifest",
    "save_manifest",
    "CheckpointManifest",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"STTM"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}


class DataError(Exception):
    """Malformed tensor file, manifest, or checkpoint."""


def write_tensor(path, data: np.ndarray) -> None:
    data = np.asarray(data)
    if data.dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported dtype {data.dtype}; use float32 or int64")
    if data.ndim < 1 or data.ndim > 8:
        raise DataError(f"tensor rank must be 1..8, got {data.ndim}")
    if any(s < 1 for s in data.shape):
        raise DataError(f"zero-element shape {data.shape} is not storable")
    code = _DTYPE_CODES[data.dtype]
    header = MAGIC + struct.pack("<IBB", VERSION, code, data.ndim)
    header += struct.pack(f"<{data.ndim}Q", *data.shape)
    payload = np.ascontiguousarray(data).astype(_CODE_DTYPES[code], copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 10:
        raise DataError(f"{path}: file too short for a tensor header")
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= 8:
        raise DataError(f"{path}: invalid rank {ndim}")
    offset = 10
    if len(raw) < offset + 8 * ndim:
        raise DataError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    if any(s < 1 for s in shape):
        raise DataError(f"{path}: zero-element shape {shape}")
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(raw) - offset
    if actual < expected:
        raise DataError(f"{path}: truncated payload ({actual} bytes, expected {expected})")
    if actual > expected:
        raise DataError(f"{path}: {actual - expected} trailing bytes after payload")
    arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    return arr.reshape(shape).copy()


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

_REQUIRED_TARGETS = ("visual_tokens", "visual_cls", "text_cls", "latents")
_OPTIONAL_TARGETS = ("caption_pool", "class_weights")


@dataclass
class SubjectEntry:
    id: str
    voxel_count: int
    voxels: str
    stimulus_ids: str


@dataclass
class DatasetManifest:
    root: Path
    subjects: list[SubjectEntry]
    targets: dict[str, str]
    splits: dict[str, str]

    def path(self, rel: str) -> Path:
        return self.root / rel


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "subjects": [
            {"id": s.id, "voxel_count": s.voxel_count, "voxels": s.voxels, "stimulus_ids": s.stimulus_ids}
            for s in manifest.subjects
        ],
        "targets": manifest.targets,
        "splits": manifest.splits,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse and eagerly validate a dataset manifest.

    Referential integrity is enforced up front: every stimulus ID stored for a
    subject must index a row of the shared target arrays and belong to exactly
    one split, and voxel counts must match the stored tensors.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse manifest: {exc}") from exc

    for key in ("subjects", "targets", "splits"):
        if key not in doc:
            raise DataError(f"{path}: manifest missing key {key!r}")
    subjects = [SubjectEntry(**entry) for entry in doc["subjects"]]
    if len({s.id for s in subjects}) != len(subjects):
        raise DataError(f"{path}: duplicate subject ids")
    targets = dict(doc["targets"])
    for key in _REQUIRED_TARGETS:
        if key not in targets:
            raise DataError(f"{path}: targets missing {key!r}")
    unknown = set(targets) - set(_REQUIRED_TARGETS) - set(_OPTIONAL_TARGETS)
    if unknown:
        raise DataError(f"{path}: unknown target keys {sorted(unknown)}")
    splits = dict(doc["splits"])
    for key in ("train", "test"):
        if key not in splits:
            raise DataError(f"{path}: splits missing {key!r}")

    manifest = DatasetManifest(root=path.parent, subjects=subjects, targets=targets, splits=splits)

    visual_tokens = read_tensor(manifest.path(targets["visual_tokens"]))
    n_stimuli = visual_tokens.shape[0]
    if visual_tokens.ndim != 3:
        raise DataError("visual_tokens must be M x K x D")
    for key in ("visual_cls", "text_cls"):
        arr = read_tensor(manifest.path(targets[key]))
        if arr.ndim != 2 or arr.shape[0] != n_stimuli:
            raise DataError(f"{key} must be M x D with M={n_stimuli}, got {arr.shape}")
    latents = read_tensor(manifest.path(targets["latents"]))
    if latents.ndim != 4 or latents.shape[0] != n_stimuli:
        raise DataError(f"latents must be M x C x S x S with M={n_stimuli}, got {latents.shape}")

    split_ids = {}
    for name in ("train", "test"):
        ids = read_tensor(manifest.path(splits[name]))
        if ids.ndim != 1 or ids.dtype != np.int64:
            raise DataError(f"split {name!r} must be a 1-D int64 tensor")
        if ids.min(initial=0) < 0 or ids.max(initial=-1) >= n_stimuli:
            raise DataError(f"split {name!r} references stimulus ids outside [0, {n_stimuli})")
        split_ids[name] = set(int(i) for i in ids)
    if split_ids["train"] & split_ids["test"]:
        raise DataError("train and test splits overlap")

    known = split_ids["train"] | split_ids["test"]
    for s in subjects:
        voxels = read_tensor(manifest.path(s.voxels))
        stim = read_tensor(manifest.path(s.stimulus_ids))
        if voxels.ndim != 2 or voxels.shape[1] != s.voxel_count:
            raise DataError(f"subject {s.id}: voxel tensor shape {voxels.shape} vs voxel_count {s.voxel_count}")
        if stim.ndim != 1 or stim.shape[0] != voxels.shape[0]:
            raise DataError(f"subject {s.id}: stimulus id count {stim.shape} vs {voxels.shape[0]} trials")
        bad = [int(i) for i in stim if int(i) not in known]
        if bad:
            raise DataError(f"subject {s.id}: stimulus ids {bad[:5]} not present in any split")
    return manifest


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class CheckpointManifest:
    params: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    config_digest: str = ""


def save_checkpoint(manifest: CheckpointManifest, ckpt_dir) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    unknown_frozen = set(manifest.frozen) - set(manifest.params)
    if unknown_frozen:
        raise DataError(f"frozen flags for unknown parameters {sorted(unknown_frozen)}")
    param_entries = []
    for i, name in enumerate(sorted(manifest.params)):
        fname = f"param_{i:04d}.bin"
        write_tensor(ckpt_dir / fname, manifest.params[name])
        param_entries.append({"name": name, "file": fname, "frozen": bool(manifest.frozen.get(name, False))})
    opt_entries = []
    for i, name in enumerate(sorted(manifest.optimizer)):
        fname = f"opt_{i:04d}.bin"
        write_tensor(ckpt_dir / fname, manifest.optimizer[name])
        opt_entries.append({"name": name, "file": fname})
    index = {
        "version": VERSION,
        "step": manifest.step,
        "seed": manifest.seed,
        "config_digest": manifest.config_digest,
        "params": param_entries,
        "optimizer": opt_entries,
    }
    (ckpt_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_checkpoint(ckpt_dir) -> CheckpointManifest:
    ckpt_dir = Path(ckpt_dir)
    index_path = ckpt_dir / "index.json"
    if not index_path.exists():
        raise DataError(f"{ckpt_dir}: no index.json; not a checkpoint directory")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{index_path}: cannot parse: {exc}") from exc
    if index.get("version") != VERSION:
        raise DataError(f"{ckpt_dir}: unsupported checkpoint version {index.get('version')}")
    names = [e["name"] for e in index["params"]]
    if len(set(names)) != len(names):
        raise DataError(f"{ckpt_dir}: duplicate parameter names in index")
    params, frozen = {}, {}
    for entry in index["params"]:
        fpath = ckpt_dir / entry["file"]
        if not fpath.exists():
            raise DataError(f"{ckpt_dir}: missing tensor file {entry['file']} for {entry['name']}")
        params[entry["name"]] = read_tensor(fpath)
        frozen[entry["name"]] = bool(entry.get("frozen", False))
    optimizer = {}
    for entry in index.get("optimizer", []):
        fpath = ckpt_dir / entry["file"]
        if not fpath.exists():
            raise DataError(f"{ckpt_dir}: missing optimizer file {entry['file']}")
        optimizer[entry["name"]] = read_tensor(fpath)
    return CheckpointManifest(
        params=params,
        frozen=frozen,
        optimizer=optimizer,
        step=int(index.get("step", 0)),
        seed=int(index.get("seed", 0)),
        config_digest=str(index.get("config_digest", "")),
    )
