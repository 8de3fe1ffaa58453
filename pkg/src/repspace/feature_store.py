"""Token-aligned feature bundles: on-disk format, validation, and alignment.

A *bundle* is one feature space's T x dim matrix over a shared token stream,
stored as an FBN1 container with dtype ``f32le``. A *corpus* orders stories
over the token index range and marks each story train or test; alignment
glues a set of bundles to one corpus and fixes the canonical representation
order used by every downstream matrix.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .container import ContainerError, read_container, write_container

ROLES = ("train", "test")


class BundleValidationError(ValueError):
    """Bundle contents violate an invariant (shape, finiteness, ids)."""


class AlignmentError(ValueError):
    """Bundles cannot be aligned over the given corpus."""


@dataclass(frozen=True)
class RepresentationSpec:
    """Identity and metadata for one feature space.

    ``mds_weight`` is the per-representation weight used by the weighted
    low-dimensional embedding; ``None`` means "default", resolved at run time
    to 1 / (number of representations sharing ``model_group``).
    """

    id: str
    dim: int
    model_group: str = ""
    layer_index: int | None = None
    mds_weight: float | None = None

    def __post_init__(self):
        if not self.id:
            raise BundleValidationError("representation id must be nonempty")
        if self.dim < 1:
            raise BundleValidationError(f"{self.id}: dim must be >= 1, got {self.dim}")
        if self.layer_index is not None and self.layer_index < 0:
            raise BundleValidationError(f"{self.id}: layer_index must be >= 0")
        if self.mds_weight is not None and not (self.mds_weight > 0):
            raise BundleValidationError(f"{self.id}: mds_weight must be > 0")


@dataclass
class FeatureBundle:
    """One representation's token-aligned feature matrix."""

    spec: RepresentationSpec
    values: np.ndarray  # (token_count, dim) float64 working precision

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise BundleValidationError(f"{self.spec.id}: values must be 2-D")
        if self.values.shape[1] != self.spec.dim:
            raise BundleValidationError(
                f"{self.spec.id}: values have {self.values.shape[1]} columns, "
                f"spec.dim is {self.spec.dim}"
            )
        if self.values.shape[0] < 1:
            raise BundleValidationError(f"{self.spec.id}: bundle has no rows")
        if not np.isfinite(self.values).all():
            raise BundleValidationError(f"{self.spec.id}: values contain non-finite entries")

    @property
    def token_count(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Story:
    id: str
    tokens: tuple[str, ...]
    role: str
    word_times: tuple[float, ...] | None = None  # seconds per token, optional

    def __post_init__(self):
        if self.role not in ROLES:
            raise AlignmentError(f"story {self.id!r}: role must be one of {ROLES}")
        if not self.tokens:
            raise AlignmentError(f"story {self.id!r}: empty token list")
        if self.word_times is not None and len(self.word_times) != len(self.tokens):
            raise AlignmentError(f"story {self.id!r}: word_times length mismatch")


class TokenCorpus:
    """Ordered stories over one contiguous token index range."""

    def __init__(self, stories: list[Story]):
        if not stories:
            raise AlignmentError("corpus has no stories")
        ids = [s.id for s in stories]
        if len(set(ids)) != len(ids):
            raise AlignmentError("duplicate story ids")
        self.stories = list(stories)
        self._ranges: dict[str, range] = {}
        start = 0
        for story in self.stories:
            stop = start + len(story.tokens)
            self._ranges[story.id] = range(start, stop)
            start = stop
        self.total_tokens = start

    def story_range(self, story_id: str) -> range:
        return self._ranges[story_id]

    def role_rows(self, role: str) -> np.ndarray:
        """All token indices of stories with the given role, ascending."""
        rows = [np.arange(r.start, r.stop) for s, r in zip(self.stories, self._ranges.values())
                if s.role == role]
        if not rows:
            return np.empty(0, dtype=np.intp)
        return np.concatenate(rows)


@dataclass
class AlignedDataset:
    """A corpus plus equal-length bundles in canonical order."""

    corpus: TokenCorpus
    bundles: list[FeatureBundle]
    universal_id: str
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {b.spec.id: i for i, b in enumerate(self.bundles)}

    @property
    def n(self) -> int:
        return len(self.bundles)

    @property
    def rep_ids(self) -> list[str]:
        return [b.spec.id for b in self.bundles]

    def bundle(self, rep_id: str) -> FeatureBundle:
        return self.bundles[self._index[rep_id]]

    def index_of(self, rep_id: str) -> int:
        return self._index[rep_id]

    @property
    def universal(self) -> FeatureBundle:
        return self.bundle(self.universal_id)


def write_bundle(bundle: FeatureBundle, path: str | os.PathLike) -> None:
    """Persist a bundle; payload round-trips byte-exactly through read_bundle.

    Values are stored as little-endian float32, row-major.
    """
    spec = bundle.spec
    f32 = bundle.values.astype("<f4")
    if not np.isfinite(f32).all():
        raise BundleValidationError(f"{spec.id}: values overflow 32-bit storage")
    fields = {
        "id": spec.id,
        "dim": str(spec.dim),
        "token_count": str(bundle.token_count),
        "model_group": spec.model_group,
        "mds_weight": "default" if spec.mds_weight is None else repr(spec.mds_weight),
        "dtype": "f32le",
        "layout": "row-major",
    }
    if spec.layer_index is not None:
        fields["layer_index"] = str(spec.layer_index)
    write_container(path, fields, f32)


def read_bundle(path: str | os.PathLike) -> FeatureBundle:
    """Load and validate a bundle, widening storage to float64."""
    fields, flat = read_container(path)
    try:
        dim = int(fields["dim"])
        token_count = int(fields["token_count"])
    except (KeyError, ValueError) as exc:
        raise ContainerError(f"{path}: missing or malformed dim/token_count") from exc
    if dim < 1 or token_count < 1:
        raise BundleValidationError(f"{path}: dim and token_count must be >= 1")
    if fields.get("layout") != "row-major":
        raise ContainerError(f"{path}: unsupported layout {fields.get('layout')!r}")
    if flat.size != dim * token_count:
        raise ContainerError(
            f"{path}: header declares {token_count}x{dim} values, payload has {flat.size}"
        )
    raw_weight = fields.get("mds_weight", "default")
    mds_weight = None if raw_weight == "default" else float(raw_weight)
    layer = fields.get("layer_index")
    spec = RepresentationSpec(
        id=fields.get("id", ""),
        dim=dim,
        model_group=fields.get("model_group", ""),
        layer_index=None if layer is None else int(layer),
        mds_weight=mds_weight,
    )
    return FeatureBundle(spec=spec, values=flat.reshape(token_count, dim))


def align(corpus: TokenCorpus, bundles: list[FeatureBundle], universal_id: str) -> AlignedDataset:
    """Validate bundles against the corpus and fix the canonical order.

    Bundle k in the input list is representation index k everywhere
    downstream.
    """
    ids = [b.spec.id for b in bundles]
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"duplicate bundle ids: {sorted(ids)}")
    for bundle in bundles:
        if bundle.token_count != corpus.total_tokens:
            raise AlignmentError(
                f"bundle {bundle.spec.id!r} has {bundle.token_count} rows, "
                f"corpus has {corpus.total_tokens} tokens"
            )
    if universal_id not in ids:
        raise AlignmentError(f"universal bundle {universal_id!r} not among {ids}")
    keyed = {}
    for bundle in bundles:
        key = (bundle.spec.model_group, bundle.spec.layer_index)
        if key in keyed and bundle.spec.model_group:
            raise AlignmentError(
                f"bundles {keyed[key]!r} and {bundle.spec.id!r} share "
                f"(model_group, layer_index) = {key}"
            )
        keyed[key] = bundle.spec.id
    return AlignedDataset(corpus=corpus, bundles=list(bundles), universal_id=universal_id)


def split(dataset: AlignedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train rows, test rows) partitioned at story boundaries."""
    train = dataset.corpus.role_rows("train")
    test = dataset.corpus.role_rows("test")
    if train.size == 0:
        raise AlignmentError("corpus has no train stories")
    if test.size == 0:
        raise AlignmentError("corpus has no test stories")
    return train, test


def resolved_mds_weights(dataset: AlignedDataset) -> np.ndarray:
    """Per-representation weights with defaults filled in.

    A bundle without an explicit weight gets 1 / (number of bundles in its
    model_group), so a multi-layer model counts once in aggregate.
    """
    groups: dict[str, int] = {}
    for bundle in dataset.bundles:
        groups[bundle.spec.model_group] = groups.get(bundle.spec.model_group, 0) + 1
    weights = np.empty(dataset.n)
    for i, bundle in enumerate(dataset.bundles):
        if bundle.spec.mds_weight is not None:
            weights[i] = bundle.spec.mds_weight
        else:
            weights[i] = 1.0 / groups[bundle.spec.model_group]
    return weights


# -- corpus / run manifest -------------------------------------------------

def _placeholder_tokens(count: int) -> tuple[str, ...]:
    width = max(1, int(math.log10(max(count, 1))) + 1)
    return tuple(f"tok{i:0{width}d}" for i in range(count))


def story_from_dict(entry: dict) -> Story:
    if "tokens" in entry:
        tokens = tuple(entry["tokens"])
    elif "token_count" in entry:
        tokens = _placeholder_tokens(int(entry["token_count"]))
    else:
        raise AlignmentError(f"story {entry.get('id')!r} needs tokens or token_count")
    times = entry.get("word_times")
    return Story(
        id=entry["id"],
        tokens=tokens,
        role=entry["role"],
        word_times=None if times is None else tuple(float(t) for t in times),
    )


def load_corpus_manifest(path: str | os.PathLike) -> tuple[TokenCorpus, list[str], str | None]:
    """Read a run manifest: (corpus, bundle paths, universal id).

    The manifest is a JSON document with ``stories`` (each with id, role, and
    either an explicit token list or a token_count), optional ``bundles``
    (paths relative to the manifest), and optional ``universal_id``.
    """
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    corpus = TokenCorpus([story_from_dict(e) for e in doc["stories"]])
    base = os.path.dirname(os.path.abspath(path))
    bundles = [
        p if os.path.isabs(p) else os.path.join(base, p)
        for p in doc.get("bundles", [])
    ]
    return corpus, bundles, doc.get("universal_id")


def save_corpus_manifest(
    path: str | os.PathLike,
    corpus: TokenCorpus,
    bundle_paths: list[str],
    universal_id: str | None,
    inline_tokens: bool = False,
) -> None:
    stories = []
    for story in corpus.stories:
        entry: dict = {"id": story.id, "role": story.role}
        if inline_tokens:
            entry["tokens"] = list(story.tokens)
        else:
            entry["token_count"] = len(story.tokens)
        if story.word_times is not None:
            entry["word_times"] = list(story.word_times)
        stories.append(entry)
    doc = {"stories": stories, "bundles": list(bundle_paths)}
    if universal_id is not None:
        doc["universal_id"] = universal_id
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.fspath(path))
