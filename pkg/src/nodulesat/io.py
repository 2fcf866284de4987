"""Readers and writers for volumes, bag manifests, candidates, predictions and configs.

Text formats are comma-separated with a header line. Binary volumes::

    b"VOX3" | u32 version=1 | u32 nx, ny, nz | f32 sx, sy, sz | nx*ny*nz f32 voxels (x fastest)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ParseError
from .metrics import Candidate
from .mil import BagPrediction, InstanceBag
from .preprocess import Volume

VOX_MAGIC = b"VOX3"
VOX_VERSION = 1
_VOX_HEADER = struct.Struct("<4sI3I3f")

MANIFEST_HEADER = ("bag_id", "instance_ref", "label")
PREDICTION_HEADER = ("bag_id", "instance_index", "probability")
CANDIDATE_HEADER = ("seriesuid", "x_mm", "y_mm", "z_mm", "score", "truth", "noduleid")
TRUTH_HEADER = ("bag_id", "instance_index", "key")


# -- volumes --------------------------------------------------------------------


def volume_to_bytes(v: Volume) -> bytes:
    nx, ny, nz = v.dims
    head = _VOX_HEADER.pack(VOX_MAGIC, VOX_VERSION, nx, ny, nz, *v.spacing)
    return head + v.voxels.astype("<f4").ravel(order="F").tobytes()


def volume_from_bytes(buf: bytes) -> Volume:
    if len(buf) < 4:
        raise ParseError("truncated volume file while reading magic", len(buf))
    if buf[:4] != VOX_MAGIC:
        raise ParseError("bad volume magic, expected b'VOX3'", 0)
    if len(buf) < _VOX_HEADER.size:
        raise ParseError("truncated volume header", len(buf))
    _, version, nx, ny, nz, sx, sy, sz = _VOX_HEADER.unpack_from(buf)
    if version != VOX_VERSION:
        raise ParseError(f"unsupported volume version {version}", 4)
    n = nx * ny * nz
    need = _VOX_HEADER.size + 4 * n
    if len(buf) < need:
        # offset of the first voxel that could not be read completely
        got = (len(buf) - _VOX_HEADER.size) // 4
        raise ParseError(f"truncated voxel data: {got} of {n} voxels present", _VOX_HEADER.size + 4 * got)
    if len(buf) > need:
        raise ParseError("trailing bytes after voxel data", need)
    if min(sx, sy, sz) <= 0:
        raise ParseError(f"non-positive spacing {(sx, sy, sz)}", 20)
    vox = np.frombuffer(buf, dtype="<f4", count=n, offset=_VOX_HEADER.size)
    return Volume(vox.astype(np.float64).reshape((nx, ny, nz), order="F"), (sx, sy, sz))


def write_volume(path, v: Volume) -> None:
    Path(path).write_bytes(volume_to_bytes(v))


def read_volume(path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


# -- text helpers ---------------------------------------------------------------


def _read_rows(path, header: Sequence[str], min_cols: int | None = None) -> list[tuple[int, list[str]]]:
    min_cols = len(header) if min_cols is None else min_cols
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file, expected header {','.join(header)}", 1)
    got = [c.strip() for c in rows[0]]
    if got[: len(header)] != list(header)[: len(got)] or len(got) < min_cols:
        raise ParseError(f"{path}: header {got} does not match {list(header)}", 1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        row = [c.strip() for c in row]
        if len(row) < min_cols or len(row) > len(header):
            raise ParseError(f"{path}: expected {min_cols}-{len(header)} fields, got {len(row)}", lineno)
        out.append((lineno, row))
    return out


# -- bag manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    bag_id: str
    instance_ref: str
    label: int | None  # None means masked ("?")


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.bag_id, r.instance_ref, "?" if r.label is None else int(r.label)])


def read_manifest(path) -> list[ManifestRecord]:
    out = []
    for lineno, (bag_id, ref, label) in _read_rows(path, MANIFEST_HEADER):
        if label not in ("0", "1", "?"):
            raise ParseError(f"{path}: label must be 0, 1 or ?, got {label!r}", lineno)
        out.append(ManifestRecord(bag_id, ref, None if label == "?" else int(label)))
    return out


def bags_to_records(bags: Sequence[InstanceBag], refs: Sequence[Sequence[str]]) -> list[ManifestRecord]:
    records = []
    for bag, bag_refs in zip(bags, refs):
        for ref, label, m in zip(bag_refs, bag.labels, bag.mask):
            records.append(ManifestRecord(bag.bag_id, ref, int(label) if m else None))
    return records


def load_bags(manifest_path, features: np.ndarray | None = None) -> list[InstanceBag]:
    """Assemble bags from a manifest. Numeric refs index rows of ``features``;
    other refs are volume paths relative to the manifest's directory."""
    base = Path(manifest_path).parent
    grouped: dict[str, list[ManifestRecord]] = {}
    for rec in read_manifest(manifest_path):
        grouped.setdefault(rec.bag_id, []).append(rec)
    bags = []
    for bag_id, recs in grouped.items():
        payloads = []
        for rec in recs:
            if rec.instance_ref.isdigit():
                if features is None:
                    raise ParseError(f"feature-row reference {rec.instance_ref} but no feature matrix given")
                payloads.append(features[int(rec.instance_ref)])
            else:
                payloads.append(read_volume(base / rec.instance_ref).voxels)
        labels = [np.nan if r.label is None else r.label for r in recs]
        mask = [0 if r.label is None else 1 for r in recs]
        bags.append(InstanceBag(bag_id, payloads, labels, mask))
    return bags


# -- truth sidecar --------------------------------------------------------------


def write_truth(path, bags: Sequence[InstanceBag]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for bag in bags:
            for i, k in enumerate(bag.keys):
                w.writerow([bag.bag_id, i, int(k)])


def read_truth(path) -> dict[str, np.ndarray]:
    grouped: dict[str, list[tuple[int, int]]] = {}
    for lineno, (bag_id, idx, key) in _read_rows(path, TRUTH_HEADER):
        try:
            grouped.setdefault(bag_id, []).append((int(idx), int(key)))
        except ValueError:
            raise ParseError(f"{path}: non-integer index or key", lineno) from None
    return {b: np.array([k for _, k in sorted(v)]) for b, v in grouped.items()}


# -- predictions ----------------------------------------------------------------


def write_predictions(path, preds: Sequence[BagPrediction]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for p in preds:
            for i, prob in enumerate(p.probabilities):
                w.writerow([p.bag_id, i, repr(float(prob))])


def read_predictions(path) -> dict[tuple[str, int], float]:
    out = {}
    for lineno, (bag_id, idx, prob) in _read_rows(path, PREDICTION_HEADER):
        try:
            out[(bag_id, int(idx))] = float(prob)
        except ValueError:
            raise ParseError(f"{path}: malformed prediction row", lineno) from None
    return out


# -- candidates -----------------------------------------------------------------


def write_candidates(path, candidates: Sequence[Candidate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_HEADER)
        for c in candidates:
            x, y, z = c.position
            w.writerow([c.series_id, repr(x), repr(y), repr(z), repr(c.score), int(c.is_nodule), c.nodule_id or ""])


def read_candidates(path) -> list[Candidate]:
    out = []
    for lineno, row in _read_rows(path, CANDIDATE_HEADER, min_cols=6):
        sid, x, y, z, score, truth = row[:6]
        nid = row[6] if len(row) > 6 and row[6] else None
        if truth not in ("0", "1"):
            raise ParseError(f"{path}: truth must be 0 or 1, got {truth!r}", lineno)
        try:
            pos = (float(x), float(y), float(z))
            s = float(score)
        except ValueError:
            raise ParseError(f"{path}: non-numeric coordinate or score", lineno) from None
        try:
            out.append(Candidate(sid, pos, s, truth == "1", nid))
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", lineno) from None
    return out


# -- key=value configs ----------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}: expected key=value, got {raw!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(f"{path}: empty key", lineno)
        out[key] = value
    return out


def write_config(path, values: dict[str, object]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))
