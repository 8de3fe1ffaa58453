"""Writer for the .fbn feature-bundle wire format and corpus manifest reader.

This speaks the toolkit's external interfaces directly: magic ``FBN1``, a
little-endian uint32 header length, a UTF-8 ``key: value`` header, then the
raw float32 row-major payload. Files written here load in the analysis
toolkit with zero conversion.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

MAGIC = b"FBN1"


@dataclass
class ExtractedBundle:
    """One layer's token-aligned features, ready to serialize."""

    id: str
    values: np.ndarray  # (tokens, dim) float32-compatible
    model_group: str
    layer_index: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"{self.id}: values must be a nonempty 2-D matrix")
        if not np.isfinite(self.values).all():
            raise ValueError(f"{self.id}: values contain non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def token_count(self) -> int:
        return self.values.shape[0]


def write_bundle(bundle: ExtractedBundle, path: str | os.PathLike) -> None:
    fields = [
        ("id", bundle.id),
        ("dim", str(bundle.dim)),
        ("token_count", str(bundle.token_count)),
        ("model_group", bundle.model_group),
        ("mds_weight", "default"),
        ("dtype", "f32le"),
        ("layout", "row-major"),
    ]
    if bundle.layer_index is not None:
        fields.append(("layer_index", str(bundle.layer_index)))
    header = "".join(f"{k}: {v}\n" for k, v in fields).encode("utf-8")
    payload = np.ascontiguousarray(bundle.values, dtype="<f4").tobytes()
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".fbn-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header).to_bytes(4, "little"))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class CorpusStory:
    id: str
    tokens: tuple[str, ...]
    role: str


def read_corpus_manifest(path: str | os.PathLike) -> list[CorpusStory]:
    """Read the run-manifest JSON; extraction needs explicit token lists."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    stories = []
    for entry in doc["stories"]:
        if "tokens" not in entry:
            raise ValueError(
                f"story {entry.get('id')!r} has no token list; extraction needs "
                "the actual words, not just a token_count"
            )
        stories.append(CorpusStory(id=entry["id"], tokens=tuple(entry["tokens"]),
                                   role=entry["role"]))
    if not stories:
        raise ValueError("corpus manifest has no stories")
    return stories
