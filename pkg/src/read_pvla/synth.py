"""Deterministic synthetic temporal-grounding data and frame-level ranking metrics.

A *world* (fixed by ``world_seed``) owns two projections from a small concept
space into the video and language feature spaces. The language projection is
a blend of the video projection (shared semantics) and a modality-specific
part. A nonzero ``domain`` rotates the concept space seen by words and adds a
constant style offset to them, so a backbone trained on domain 0 misreads
queries from another domain.

Each sample draws a query concept. Frames inside one contiguous span render
that concept, and frames outside it render distractor concepts. The query
words render the concept through the language projection, and the remaining
words are distractors. Every feature is rounded to float32 so that on-disk
round trips are lossless.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CompatibilityError, DatasetSpecError, DegenerateInputError

FORMAT = "read-pvla-dataset/1"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    world_seed: int = 1234
    domain: int = 1
    domain_shift: float = 1.2
    shift_planes: int = 0
    style_shift: float = 3.0
    n_train: int = 40
    n_val: int = 200
    n_test: int = 200
    n_video: tuple[int, int] = (12, 12)
    n_lang: tuple[int, int] = (4, 4)
    span_length: tuple[int, int] = (2, 5)
    concept_dim: int = 16
    video_dim: int = 1024
    lang_dim: int = 1024
    shared_weight: float = 0.6
    noise_sigma: float = 0.5
    n_distractors: int = 2

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test", "concept_dim", "video_dim", "lang_dim"):
            if getattr(self, name) < 1:
                raise DatasetSpecError(f"{name} must be positive")
        for name in ("n_video", "n_lang", "span_length"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise DatasetSpecError(f"{name} range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.style_shift < 0:
            raise DatasetSpecError("style_shift must be non-negative")
        if self.noise_sigma < 0:
            raise DatasetSpecError("noise_sigma must be non-negative")
        if not 0.0 <= self.shared_weight <= 1.0:
            raise DatasetSpecError("shared_weight must lie in [0, 1]")
        if self.span_length[1] >= self.n_video[0]:
            raise DatasetSpecError(
                f"span length up to {self.span_length[1]} leaves no negative frame in "
                f"videos of {self.n_video[0]} frames"
            )
        if self.n_distractors < 1:
            raise DatasetSpecError("n_distractors must be positive")
        if not 0 <= 2 * self.shift_planes <= self.concept_dim:
            raise DatasetSpecError("shift_planes must fit inside the concept space")
        if self.concept_dim < 2:
            raise DatasetSpecError("concept_dim must be at least 2 so distractors can differ")

    @classmethod
    def source(cls, seed: int = 100, **overrides) -> "DatasetSpec":
        """Large unshifted split used to pretrain the stand-in backbone."""
        base = {"seed": seed, "domain": 0, "n_train": 800, "n_val": 100, "n_test": 1}
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        for name in ("n_video", "n_lang", "span_length"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass
class GroundingSample:
    video: np.ndarray
    lang: np.ndarray
    labels: np.ndarray
    query_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != (self.video.shape[0],):
            raise DegenerateInputError("labels must have one entry per frame")

    @property
    def span(self) -> tuple[int, int]:
        idx = np.flatnonzero(self.labels)
        return int(idx[0]), int(idx[-1]) + 1


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list[GroundingSample]
    val: list[GroundingSample]
    test: list[GroundingSample]

    def split(self, name: str) -> list[GroundingSample]:
        return getattr(self, name)


def _unit(rng, n, dim, avoid=None):
    """``n`` random unit vectors, optionally orthogonal to the unit vector ``avoid``."""
    x = rng.standard_normal((n, dim))
    if avoid is not None:
        x -= np.outer(x @ avoid.ravel(), avoid.ravel())
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def domain_rotation(spec: DatasetSpec) -> np.ndarray:
    """Concept-space rotation applied to words of ``spec.domain`` (identity for domain 0).

    The rotation turns ``shift_planes`` random orthogonal planes by
    ``domain_shift`` radians, so words of the shifted domain read like words
    for a different concept of the source domain.
    """
    c = spec.concept_dim
    if spec.domain == 0 or spec.shift_planes == 0:
        return np.eye(c)
    rng = np.random.default_rng([spec.world_seed, spec.domain])
    basis, _ = np.linalg.qr(rng.standard_normal((c, c)))
    cos, sin = np.cos(spec.domain_shift), np.sin(spec.domain_shift)
    block = np.eye(c)
    for k in range(spec.shift_planes):
        i, j = 2 * k, 2 * k + 1
        block[i, i] = block[j, j] = cos
        block[i, j], block[j, i] = -sin, sin
    return basis @ block @ basis.T


def world_projections(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(P_video, P_lang)`` mapping unit concepts (as rows) to feature space."""
    rng = np.random.default_rng(spec.world_seed)
    c = spec.concept_dim
    p_video = rng.standard_normal((c, spec.video_dim))
    own = rng.standard_normal((c, spec.lang_dim))
    shared = p_video if spec.video_dim == spec.lang_dim else rng.standard_normal((c, spec.lang_dim))
    w = spec.shared_weight
    p_lang = w * shared + np.sqrt(1.0 - w * w) * own
    return p_video, domain_rotation(spec) @ p_lang


def style_offset(spec: DatasetSpec) -> np.ndarray:
    """Constant offset added to every word of ``spec.domain`` (zero for domain 0).

    Its norm is ``style_shift`` times the typical norm of a rendered concept.
    """
    if spec.domain == 0 or spec.style_shift == 0:
        return np.zeros(spec.lang_dim)
    u = np.random.default_rng([spec.world_seed, spec.domain, 1]).standard_normal(spec.lang_dim)
    return spec.style_shift * np.sqrt(spec.lang_dim) * u / np.linalg.norm(u)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _draw_sample(rng, spec: DatasetSpec, p_video, p_lang, offset) -> GroundingSample:
    n_v = int(rng.integers(spec.n_video[0], spec.n_video[1] + 1))
    n_l = int(rng.integers(spec.n_lang[0], spec.n_lang[1] + 1))
    span = int(rng.integers(spec.span_length[0], spec.span_length[1] + 1))
    start = int(rng.integers(0, n_v - span + 1))
    concept = _unit(rng, 1, spec.concept_dim)
    distractors = _unit(rng, spec.n_distractors, spec.concept_dim, avoid=concept)

    labels = np.zeros(n_v, dtype=np.uint8)
    labels[start : start + span] = 1
    frame_concepts = distractors[rng.integers(0, spec.n_distractors, size=n_v)]
    frame_concepts[labels == 1] = concept
    video = frame_concepts @ p_video + spec.noise_sigma * rng.standard_normal((n_v, spec.video_dim))

    n_query = max(1, (n_l + 1) // 2)
    query_mask = np.zeros(n_l, dtype=bool)
    query_mask[np.sort(rng.choice(n_l, size=n_query, replace=False))] = True
    word_concepts = _unit(rng, n_l, spec.concept_dim, avoid=concept)
    word_concepts[query_mask] = concept
    lang = word_concepts @ p_lang + offset + spec.noise_sigma * rng.standard_normal((n_l, spec.lang_dim))
    return GroundingSample(_f32(video), _f32(lang), labels, query_mask)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Draw train/val/test splits; a pure function of ``spec``."""
    p_video, p_lang = world_projections(spec)
    offset = style_offset(spec)
    streams = np.random.SeedSequence([spec.seed, spec.world_seed, spec.domain]).spawn(len(SPLITS))
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    splits = {}
    for name, stream in zip(SPLITS, streams):
        rng = np.random.default_rng(stream)
        splits[name] = [_draw_sample(rng, spec, p_video, p_lang, offset) for _ in range(sizes[name])]
    return Dataset(spec, **splits)


# metrics ------------------------------------------------------------------------


def average_precision(scores, labels) -> float:
    """Frame-level AP; ties in score are ranked by lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DegenerateInputError(f"scores {scores.shape} and labels {labels.shape} disagree")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] > 0
    if not hits.any():
        raise DegenerateInputError("average precision is undefined without a positive label")
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, ranks.size + 1) / ranks).mean())


def mean_average_precision(score_lists, label_lists) -> float:
    aps = [average_precision(s, l) for s, l in zip(score_lists, label_lists)]
    if not aps:
        raise DegenerateInputError("mean average precision of an empty split")
    return float(np.mean(aps))


# serialisation ----------------------------------------------------------------------


def save_dataset(ds: Dataset, path: str) -> None:
    """Write one JSON header plus little-endian float32/uint8 blobs per split."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "dataset.json"), "w") as fh:
        json.dump({"format": FORMAT, "spec": asdict(ds.spec), "splits": list(SPLITS)}, fh, indent=2)
    for name in SPLITS:
        samples = ds.split(name)
        header = {
            "format": FORMAT,
            "split": name,
            "count": len(samples),
            "video_dim": ds.spec.video_dim,
            "lang_dim": ds.spec.lang_dim,
            "n_video": [s.video.shape[0] for s in samples],
            "n_lang": [s.lang.shape[0] for s in samples],
        }
        with open(os.path.join(path, f"{name}.json"), "w") as fh:
            json.dump(header, fh)
        for suffix, arrays, dtype in (
            ("video.f32", [s.video for s in samples], "<f4"),
            ("lang.f32", [s.lang for s in samples], "<f4"),
            ("labels.u8", [s.labels for s in samples], "u1"),
            ("query.u8", [s.query_mask for s in samples], "u1"),
        ):
            blob = np.concatenate([a.reshape(-1) for a in arrays]).astype(dtype)
            blob.tofile(os.path.join(path, f"{name}.{suffix}"))


def load_dataset(path: str) -> Dataset:
    with open(os.path.join(path, "dataset.json")) as fh:
        top = json.load(fh)
    if top.get("format") != FORMAT:
        raise CompatibilityError(f"{path}: unrecognised dataset format {top.get('format')!r}")
    spec = DatasetSpec.from_dict(top["spec"])
    splits = {}
    for name in SPLITS:
        with open(os.path.join(path, f"{name}.json")) as fh:
            hdr = json.load(fh)
        n_v, n_l = hdr["n_video"], hdr["n_lang"]
        video = np.fromfile(os.path.join(path, f"{name}.video.f32"), dtype="<f4")
        lang = np.fromfile(os.path.join(path, f"{name}.lang.f32"), dtype="<f4")
        labels = np.fromfile(os.path.join(path, f"{name}.labels.u8"), dtype="u1")
        query = np.fromfile(os.path.join(path, f"{name}.query.u8"), dtype="u1")
        if (
            video.size != sum(n_v) * hdr["video_dim"]
            or lang.size != sum(n_l) * hdr["lang_dim"]
            or labels.size != sum(n_v)
            or query.size != sum(n_l)
        ):
            raise CompatibilityError(f"{path}/{name}: blob sizes disagree with header")
        samples = []
        vo = lo = 0
        for nv, nl in zip(n_v, n_l):
            samples.append(
                GroundingSample(
                    video[vo * hdr["video_dim"] : (vo + nv) * hdr["video_dim"]]
                    .reshape(nv, hdr["video_dim"])
                    .astype(np.float64),
                    lang[lo * hdr["lang_dim"] : (lo + nl) * hdr["lang_dim"]]
                    .reshape(nl, hdr["lang_dim"])
                    .astype(np.float64),
                    labels[vo : vo + nv].copy(),
                    query[lo : lo + nl].astype(bool),
                )
            )
            vo += nv
            lo += nl
        splits[name] = samples
    return Dataset(spec, **splits)
