"""Dataset manifests: CSV I/O, cleaning, grouped splitting, weighted sampling
and offline augmentation."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import FormatError, ParameterError, SplitError, ValidationError
from .ppm import load_ppm, save_ppm
from .preprocess import AUGMENT_OPS, augment

HEADER = ("path", "patient_id", "eye", "label", "quality", "split")
QUALITY_DIMS = {"high": (480, 640), "low": (1200, 1600)}
SPLITS = ("train", "test", "unassigned")


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    patient_id: str
    eye: str
    label: object
    quality: str
    split: str = "unassigned"

    @property
    def group(self):
        return (self.patient_id, self.eye)

    def problems(self):
        """Reasons this row violates the record invariants (empty if valid)."""
        out = []
        if self.label not in (0, 1):
            out.append(("label", f"label {self.label!r} not in {{0,1}}"))
        if self.quality not in QUALITY_DIMS:
            out.append(("quality", f"quality {self.quality!r} not in {{high,low}}"))
        if self.eye not in ("L", "R"):
            out.append(("eye", f"eye {self.eye!r} not in {{L,R}}"))
        if self.split not in SPLITS:
            out.append(("split", f"split {self.split!r} not in {SPLITS}"))
        return out


@dataclass
class Manifest:
    records: list
    provenance: str = "real"
    source: str | None = None
    bases: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.path in seen:
                raise ValidationError(f"duplicate manifest path {rec.path}")
            seen.add(rec.path)
        for aug, base in self.bases.items():
            if aug not in seen or base not in seen:
                raise ValidationError(f"augmented row {aug} does not reference an existing base row")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, split):
        return [r for r in self.records if r.split == split]

    def with_records(self, records, **changes):
        keep = {r.path for r in records}
        bases = {a: b for a, b in self.bases.items() if a in keep and b in keep}
        return replace(self, records=list(records), bases=bases, **changes)

    def require_valid(self):
        for rec in self.records:
            issues = rec.problems()
            if issues:
                raise ValidationError(f"{rec.path}: {issues[0][1]}")
        return self


def _parse_label(text):
    try:
        return int(text)
    except ValueError:
        return text


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_manifest(path) -> Manifest:
    """Read a manifest CSV; relative paths resolve against its directory.

    Invalid labels/tiers are kept verbatim so that cleaning can report them.
    """
    path = Path(path)
    root = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: manifest is not UTF-8") from exc
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or tuple(header) != HEADER:
        raise FormatError(f"{path}: expected header {','.join(HEADER)}, got {header}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
        p, pid, eye, label, quality, split = row
        records.append(ImageRecord((root / p).resolve(), pid, eye, _parse_label(label), quality, split or "unassigned"))
    provenance, source, bases = "real", None, {}
    meta = _meta_path(path)
    if meta.exists():
        info = json.loads(meta.read_text(encoding="utf-8"))
        provenance = info.get("provenance", "real")
        source = info.get("source")
        bases = {(root / a).resolve(): (root / b).resolve() for a, b in info.get("bases", {}).items()}
    return Manifest(records, provenance, source, bases)


def _rel(p, root):
    return Path(os.path.relpath(Path(p).resolve(), root)).as_posix()


def write_manifest(manifest: Manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for r in manifest.records:
            writer.writerow([_rel(r.path, root), r.patient_id, r.eye, r.label, r.quality, r.split])
    meta = _meta_path(path)
    if manifest.provenance != "real" or manifest.bases or manifest.source:
        info = {
            "provenance": manifest.provenance,
            "source": manifest.source,
            "bases": {_rel(a, root): _rel(b, root) for a, b in manifest.bases.items()},
        }
        meta.write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    elif meta.exists():
        meta.unlink()
    return path


@dataclass(frozen=True)
class Rejection:
    path: Path
    reason: str
    detail: str


def clean_manifest(manifest: Manifest):
    """Drop unreadable, corrupt, mis-sized, mislabeled and duplicate rows.

    Returns ``(cleaned manifest, [Rejection, ...])``.  Duplicates are detected
    by a hash of the decoded pixels; the first occurrence is kept.
    """
    kept, report = [], []
    seen_hashes = {}
    for rec in manifest.records:
        issues = [i for i in rec.problems() if i[0] in ("label", "quality")]
        if issues:
            report.append(Rejection(rec.path, *issues[0]))
            continue
        try:
            image = load_ppm(rec.path)
        except OSError as exc:
            report.append(Rejection(rec.path, "unreadable", str(exc)))
            continue
        except FormatError as exc:
            report.append(Rejection(rec.path, "corrupt", str(exc)))
            continue
        expected = QUALITY_DIMS[rec.quality]
        if image.shape[:2] != expected:
            report.append(Rejection(
                rec.path, "dimensions",
                f"{image.shape[0]}x{image.shape[1]} does not match {rec.quality} tier {expected[0]}x{expected[1]}",
            ))
            continue
        digest = hashlib.sha256(image.tobytes() + repr(image.shape).encode()).hexdigest()
        if digest in seen_hashes:
            report.append(Rejection(rec.path, "duplicate", f"same pixels as {seen_hashes[digest]}"))
            continue
        seen_hashes[digest] = rec.path
        kept.append(rec)
    return manifest.with_records(kept), report


def split(manifest: Manifest, test_fraction, seed):
    """Assign whole (patient, eye) groups to the test split.

    Groups are shuffled with ``seed`` and moved to test until the test image
    count reaches ``test_fraction * total``; everything else is train.
    """
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    groups = OrderedDict()
    for rec in manifest.records:
        groups.setdefault(rec.group, []).append(rec)
    if len(groups) < 2:
        raise SplitError("need at least two (patient, eye) groups to form both splits")
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    target = test_fraction * len(manifest.records)
    test_keys, count = set(), 0
    for i in order:
        if count >= target:
            break
        test_keys.add(keys[i])
        count += len(groups[keys[i]])
    if len(test_keys) == len(keys):
        raise SplitError(f"test fraction {test_fraction} leaves no training groups")
    records = [replace(r, split="test" if r.group in test_keys else "train") for r in manifest.records]
    return manifest.with_records(records)


def weighted_sampler(records, weight_low=2.0, weight_high=1.0, seed=0, block=4096):
    """Infinite i.i.d. index stream with P(i) proportional to its tier weight."""
    records = list(records)
    if not records:
        raise ParameterError("cannot sample from an empty manifest")
    if not (weight_low > 0 and weight_high > 0):
        raise ParameterError(f"sampling weights must be > 0, got low={weight_low}, high={weight_high}")
    weights = np.array([weight_low if r.quality == "low" else weight_high for r in records], dtype=np.float64)
    p = weights / weights.sum()
    rng = np.random.default_rng(seed)

    def stream():
        while True:
            yield from rng.choice(len(records), size=block, p=p).tolist()

    return stream()


def augment_dataset(manifest: Manifest, ops, out_dir, source=None) -> Manifest:
    """Write one augmented copy per (record, op) into ``out_dir``.

    The result lists the original rows followed by the new ones, so its length
    is ``len(manifest) * (1 + len(ops))``.
    """
    ops = list(ops)
    if not ops:
        raise ParameterError("at least one augmentation op is required")
    for op in ops:
        if op not in AUGMENT_OPS:
            raise ParameterError(f"unknown augmentation {op!r}; choose from {', '.join(AUGMENT_OPS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    new_records, bases = [], dict(manifest.bases)
    for i, rec in enumerate(manifest.records):
        image = load_ppm(rec.path)
        for op in ops:
            target = (out_dir / f"{i:06d}_{Path(rec.path).stem}__{op}.ppm").resolve()
            save_ppm(augment(image, op), target)
            new_records.append(replace(rec, path=target))
            bases[target] = rec.path
    return Manifest(list(manifest.records) + new_records, "augmented", source or manifest.source, bases)
