"""Feature sequences on disk (CHAMFEAT files plus manifests) and a synthetic generator.

CHAMFEAT layout (all little-endian)::

    offset  size  field
    0       8     magic b"CHAMFEAT"
    8       4     version (u32, currently 1)
    12      4     label (u32)
    16      16    T, K1, K2, D (u32 each)
    32      ...   T*K1*K2*D float32 values, frame-major then row-major

Manifests are UTF-8 CSV files with header ``path,label,split``; relative
paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

FEAT_MAGIC = b"CHAMFEAT"
FEAT_VERSION = 1
HEADER = struct.Struct("<8sIIIIII")
NUM_SYNTH_CLASSES = 3
NOISE_STD = 0.1
BLOB_WIDTH = 0.8


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (T, K, K, D)
    label: int
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must have shape (T, K, K, D) with T >= 1, "
                             f"got {self.frames.shape}")

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.frames.shape


def _column_track(class_id: int, seq_len: int, grid: int) -> np.ndarray:
    u = np.linspace(0.0, 1.0, seq_len) if seq_len > 1 else np.zeros(1)
    if class_id == 0:
        return u * (grid - 1)
    if class_id == 1:
        return (1 - u) * (grid - 1)
    return (1 - np.abs(2 * u - 1)) * (grid - 1)


def generate_sequence(class_id: int, seed: int, shape=(12, 7, 7, 16)) -> FeatureSequence:
    """Synthetic moving-blob sequence.

    Class 0 sweeps left to right and class 1 sweeps right to left. Class 2
    goes left to right over the first half and back over the second. The blob brightens
    linearly over the sequence (0.5 to 1.5) and sits on a random row with a
    random positive channel profile.
    """
    if class_id not in range(NUM_SYNTH_CLASSES):
        raise ValueError(f"class_id must be in [0, {NUM_SYNTH_CLASSES}), got {class_id}")
    seq_len, k1, k2, depth = (int(v) for v in shape)
    rng = np.random.default_rng([int(seed), int(class_id)])
    row = rng.uniform(0, k1 - 1)
    profile = rng.uniform(0.5, 1.5, size=depth)
    cols = _column_track(class_id, seq_len, k2)
    gain = np.linspace(0.5, 1.5, seq_len) if seq_len > 1 else np.ones(1)
    rr, cc = np.meshgrid(np.arange(k1), np.arange(k2), indexing="ij")
    frames = np.empty((seq_len, k1, k2, depth))
    for t in range(seq_len):
        blob = np.exp(-((rr - row) ** 2 + (cc - cols[t]) ** 2) / (2 * BLOB_WIDTH ** 2))
        frames[t] = gain[t] * blob[:, :, None] * profile
    frames += rng.normal(0.0, NOISE_STD, size=frames.shape)
    return FeatureSequence(frames.astype(np.float32), class_id, f"class{class_id}_seed{seed}")


def write_features(path, seq: FeatureSequence) -> None:
    t, k1, k2, d = seq.shape
    header = HEADER.pack(FEAT_MAGIC, FEAT_VERSION, int(seq.label), t, k1, k2, d)
    payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_features(path) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated header: expected {HEADER.size} bytes, "
                         f"got {len(raw)} (offset 0)")
    magic, version, label, t, k1, k2, d = HEADER.unpack_from(raw, 0)
    if magic != FEAT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != FEAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at byte offset 8")
    if min(t, k1, k2, d) < 1:
        raise ValueError(f"{path}: zero dimension in header {(t, k1, k2, d)} at byte offset 16")
    expected = t * k1 * k2 * d * 4
    actual = len(raw) - HEADER.size
    if actual != expected:
        raise ValueError(f"{path}: payload at byte offset {HEADER.size} has {actual} bytes, "
                         f"expected {expected}")
    frames = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(t, k1, k2, d)
    return FeatureSequence(frames.astype(np.float32), label, path.stem)


def feature_file_io(path, seq: Optional[FeatureSequence] = None) -> FeatureSequence:
    """Read ``path`` when ``seq`` is None, otherwise write ``seq`` to it."""
    if seq is None:
        return read_features(path)
    write_features(path, seq)
    return seq


@dataclass
class ManifestRecord:
    path: Path
    label: int
    split: str


@dataclass
class Manifest:
    records: List[ManifestRecord] = field(default_factory=list)
    num_classes: int = 0


def load_manifest(path, num_classes: Optional[int] = None):
    """Parse a manifest and load its files.

    Returns ``(manifest, train_sequences, test_sequences)``.
    """
    path = Path(path)
    base = path.parent
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label", "split"]:
            raise ValueError(f"{path}: header must be 'path,label,split', got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: bad label {row['label']!r}") from None
            split = (row["split"] or "").strip()
            if split not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: split must be 'train' or 'test', got {split!r}")
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ValueError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            records.append((lineno, ManifestRecord(base / row["path"].strip(), label, split)))
    splits = {r.split for _, r in records}
    if splits != {"train", "test"}:
        raise ValueError(f"{path}: need at least one train and one test record, got {sorted(splits)}")
    if num_classes is None:
        num_classes = max(r.label for _, r in records) + 1

    train, test = [], []
    first_shape = None
    for lineno, rec in records:
        if not rec.path.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: missing feature file {rec.path}")
        seq = read_features(rec.path)
        if first_shape is None:
            first_shape = (rec.path, seq.shape)
        elif seq.shape != first_shape[1]:
            raise ValueError(f"{path}:{lineno}: shape {seq.shape} of {rec.path} differs from "
                             f"{first_shape[1]} of {first_shape[0]}")
        if seq.label != rec.label:
            raise ValueError(f"{path}:{lineno}: manifest label {rec.label} disagrees with "
                             f"file label {seq.label}")
        seq.label = rec.label
        (train if rec.split == "train" else test).append(seq)
    manifest = Manifest([r for _, r in records], num_classes)
    return manifest, train, test


def generate_dataset(out_dir, per_class: int, seed: int, shape=(12, 7, 7, 16),
                     test_per_class: Optional[int] = None) -> Path:
    """Write a synthetic dataset plus ``manifest.csv``; return the manifest path."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if test_per_class is None:
        test_per_class = max(1, per_class // 2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for split, count in (("train", per_class), ("test", test_per_class)):
        for class_id in range(NUM_SYNTH_CLASSES):
            for i in range(count):
                sample_seed = int(rng.integers(0, 2 ** 31 - 1))
                seq = generate_sequence(class_id, sample_seed, shape)
                name = f"{split}_c{class_id}_{i:04d}.chamfeat"
                write_features(out / name, seq)
                rows.append((name, class_id, split))
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)
    return manifest


def synthetic_split(per_class: int, seed: int, shape=(12, 7, 7, 16)) -> List[FeatureSequence]:
    """In-memory balanced synthetic set, ordered by class then index."""
    rng = np.random.default_rng(seed)
    return [generate_sequence(c, int(rng.integers(0, 2 ** 31 - 1)), shape)
            for c in range(NUM_SYNTH_CLASSES) for _ in range(per_class)]
