"""Dataset directory format.

One directory per split:

    manifest.json      ids, per-sample seeds, topology spec, generator version
    <id>.img           16-byte header (magic "LUQI", u32 H, u32 W, u32 reserved,
                       little endian) + H*W float32 raster, row major
    landmarks.csv      id, node_index, x, y, annotated(0/1), ood_label

Floats in the CSV use 9 significant digits, which round-trips float32
exactly. All writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError
from .synth import OODLabel, Sample, StructureDef

MAGIC = b"LUQI"
HEADER = struct.Struct("<4sIII")


def _f(x: float) -> str:
    return format(float(x), ".9g")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, payload: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, path)


def write_image(path: Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    atomic_write_bytes(path, HEADER.pack(MAGIC, h, w, 0) + img.astype("<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, h, w, _ = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expected = HEADER.size + 4 * h * w
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(h, w).copy()


def write_split(
    directory: Path,
    samples: list[Sample],
    structures: tuple[StructureDef, ...],
    master_seed: int,
    split: str,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = samples[0].image.shape[-2:]
    manifest = {
        "generator_version": __version__,
        "split": split,
        "master_seed": master_seed,
        "image_hw": [h, w],
        "topology": [[s.name, s.node_count, s.closed] for s in structures],
        "ids": [s.id for s in samples],
        "seeds": [s.seed for s in samples],
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    rows = []
    for s in samples:
        write_image(directory / f"{s.id}.img", s.image)
        for k in range(len(s.landmarks)):
            rows.append(
                [
                    s.id,
                    str(k),
                    _f(s.landmarks[k, 0]),
                    _f(s.landmarks[k, 1]),
                    "1" if s.annotation_mask[k] else "0",
                    s.ood_label.value,
                ]
            )
    tmp = directory / "landmarks.csv.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "node_index", "x", "y", "annotated", "ood_label"])
        writer.writerows(rows)
    os.replace(tmp, directory / "landmarks.csv")


def read_split(directory: Path) -> tuple[list[Sample], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    per_id: dict[str, list] = {sid: [] for sid in manifest["ids"]}
    with open(directory / "landmarks.csv", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            per_id[row["id"]].append(row)
    samples = []
    seeds = manifest.get("seeds", [0] * len(manifest["ids"]))
    for sid, seed in zip(manifest["ids"], seeds):
        rows = sorted(per_id[sid], key=lambda r: int(r["node_index"]))
        if not rows:
            raise DataError(f"{directory}: no landmark rows for {sid!r}")
        landmarks = np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float32)
        mask = np.array([r["annotated"] == "1" for r in rows], dtype=bool)
        label = OODLabel(rows[0]["ood_label"])
        image = read_image(directory / f"{sid}.img")
        samples.append(
            Sample(
                id=sid,
                image=image[None, :, :],
                landmarks=landmarks,
                annotation_mask=mask,
                ood_label=label,
                seed=int(seed),
            )
        )
    return samples, manifest
