"""Scene sample records: ``image_dataset.csv`` joined with ``image_to_trajectory.csv``.

List-valued fields are semicolon separated.  Two optional sidecars extend the
published schema:

* ``image_to_trajectory.csv`` may carry ``trajectory_timestamps`` (seconds,
  one per segment) so dynamic statistics can be looked up per time window;
* ``image_latents.csv`` (``image_path,latent``) stores the scene latent fed to
  the frozen image encoder stand-in.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .aspects import ASPECTS, CLASS_WORDS
from .errors import IntegrityError, ParseError, SchemaError

IMAGE_DATASET_FILE = "image_dataset.csv"
IMAGE_TRAJECTORY_FILE = "image_to_trajectory.csv"
LATENT_FILE = "image_latents.csv"


@dataclass(frozen=True)
class SceneSampleRecord:
    image_path: str
    label_names: tuple
    label_indices: tuple
    trajectory_segments: tuple
    image_to_segment: int
    trajectory_timestamps: tuple = None

    @property
    def image_index(self):
        """Position of the image's segment in the trajectory (first occurrence)."""
        return self.trajectory_segments.index(self.image_to_segment)

    def validate(self, aspects=ASPECTS):
        if len(self.label_names) != len(aspects) or len(self.label_indices) != len(aspects):
            raise IntegrityError(f"{self.image_path}: expected {len(aspects)} labels")
        for aspect, name, idx in zip(aspects, self.label_names, self.label_indices):
            words = CLASS_WORDS[aspect]
            if not 0 <= idx < len(words):
                raise IntegrityError(f"{self.image_path}: label index {idx} out of range for {aspect}")
            if words[idx] != name:
                raise IntegrityError(f"{self.image_path}: label {name!r} does not match index {idx} of {aspect}")
        if self.image_to_segment not in self.trajectory_segments:
            raise IntegrityError(f"{self.image_path}: image segment not on its trajectory")
        ts = self.trajectory_timestamps
        if ts is not None:
            if len(ts) != len(self.trajectory_segments):
                raise IntegrityError(f"{self.image_path}: timestamp count differs from segment count")
            if any(b < a for a, b in zip(ts, ts[1:])):
                raise IntegrityError(f"{self.image_path}: timestamps decrease")


def split_list(text, kind=str):
    """Semicolon-separated list; a bracketed list may use commas instead."""
    text = text.strip()
    sep = ";"
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
        if ";" not in text:
            sep = ","
    if not text.strip():
        return ()
    return tuple(kind(v.strip().strip("'\"")) for v in text.split(sep))


def join_list(values):
    return ";".join(str(v) for v in values)


def _open(path, required):
    if not os.path.exists(path):
        raise SchemaError(f"missing file {path}")
    f = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(f)
    for col in required:
        if col not in (reader.fieldnames or []):
            f.close()
            raise SchemaError(f"{os.path.basename(path)}: missing column {col!r}")
    return f, reader


def load_scene_records(directory, aspects=ASPECTS):
    f, reader = _open(os.path.join(directory, IMAGE_DATASET_FILE),
                      ("image_path", "label_name_list", "label_index_list"))
    labels = {}
    with f:
        for row_no, row in enumerate(reader, start=2):
            try:
                labels[row["image_path"]] = (split_list(row["label_name_list"]),
                                             split_list(row["label_index_list"], int))
            except ValueError:
                raise ParseError(f"row {row_no}: malformed label_index_list") from None
    f, reader = _open(os.path.join(directory, IMAGE_TRAJECTORY_FILE),
                      ("image_path", "trajectory_segments", "image_to_segment"))
    records = []
    with f:
        has_ts = "trajectory_timestamps" in (reader.fieldnames or [])
        for row_no, row in enumerate(reader, start=2):
            path = row["image_path"]
            if path not in labels:
                raise IntegrityError(f"row {row_no}: {path} has no labels in {IMAGE_DATASET_FILE}")
            try:
                segs = split_list(row["trajectory_segments"], int)
                image_seg = int(row["image_to_segment"])
                ts = split_list(row["trajectory_timestamps"], float) if has_ts and row["trajectory_timestamps"] else None
            except ValueError:
                raise ParseError(f"row {row_no}: non-numeric trajectory field") from None
            names, idx = labels[path]
            rec = SceneSampleRecord(path, names, idx, segs, image_seg, ts)
            rec.validate(aspects)
            records.append(rec)
    return records


def write_scene_records(directory, records):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, IMAGE_DATASET_FILE), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("image_path", "label_name_list", "label_index_list"))
        for r in records:
            w.writerow((r.image_path, join_list(r.label_names), join_list(r.label_indices)))
    with open(os.path.join(directory, IMAGE_TRAJECTORY_FILE), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("image_path", "trajectory_segments", "image_to_segment", "trajectory_timestamps"))
        for r in records:
            ts = "" if r.trajectory_timestamps is None else join_list(f"{t:.3f}" for t in r.trajectory_timestamps)
            w.writerow((r.image_path, join_list(r.trajectory_segments), r.image_to_segment, ts))


def load_latents(directory):
    f, reader = _open(os.path.join(directory, LATENT_FILE), ("image_path", "latent"))
    with f:
        try:
            return {row["image_path"]: np.array(split_list(row["latent"], float)) for row in reader}
        except ValueError:
            raise ParseError("image_latents.csv: non-numeric latent entry") from None


def write_latents(directory, latents):
    with open(os.path.join(directory, LATENT_FILE), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("image_path", "latent"))
        for path, z in latents.items():
            w.writerow((path, join_list(repr(float(v)) for v in z)))
