"""Samples, file formats, synthetic data, and batching.

Feature matrices are stored in a small binary container::

    b"IMGF" | version u16 | rows u32 | cols u32 | rows*cols float32   (little-endian, row-major)

A dataset directory holds ``annotations.jsonl`` plus one feature file per
video and modality (``visual/<id>.imgf``, ``audio/<id>.imgf``) and a token
embedding table ``embeddings.imgf`` indexed by ``query_token_ids``.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import CARRIERS, SyntheticSpec, from_dict, to_dict
from .errors import ConfigError, FormatError, InvalidInputError, ValidationError

MAGIC = b"IMGF"
VERSION = 1
_HEADER = struct.Struct("<4sHII")


@dataclass
class MomentAnnotation:
    start_sec: float
    end_sec: float
    duration_sec: float
    start_idx: int
    end_idx: int

    def __post_init__(self):
        if self.duration_sec <= 0:
            raise ValidationError(f"duration must be positive, got {self.duration_sec}")
        if not 0 <= self.start_sec <= self.end_sec <= self.duration_sec:
            raise ValidationError(
                f"need 0 <= start <= end <= duration, got "
                f"({self.start_sec}, {self.end_sec}, {self.duration_sec})")
        if not 0 <= self.start_idx <= self.end_idx:
            raise ValidationError(f"bad frame span ({self.start_idx}, {self.end_idx})")

    @classmethod
    def from_seconds(cls, start: float, end: float, duration: float, num_frames: int):
        """Attach frame indices using idx = round(sec / duration * (T - 1))."""
        scale = (num_frames - 1) / duration
        return cls(start, end, duration,
                   _round_half_up(start * scale), _round_half_up(end * scale))


@dataclass
class AnnotationRecord:
    """One line of ``annotations.jsonl``; seconds only, frame indices come later."""

    video_id: str
    duration: float
    start: float
    end: float
    query_token_ids: list[int] | None = None
    query_text: str | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"video_id": self.video_id, "duration": self.duration,
               "start": self.start, "end": self.end}
        if self.query_token_ids is not None:
            out["query_token_ids"] = list(self.query_token_ids)
        if self.query_text is not None:
            out["query_text"] = self.query_text
        out.update(self.meta)
        return out


@dataclass
class FeatureBundle:
    visual: np.ndarray            # [T, d_v]
    audio: np.ndarray | None      # [T, d_a]; None when not loaded
    query: np.ndarray             # [N, d_q]
    frame_mask: np.ndarray        # [T] bool
    token_mask: np.ndarray        # [N] bool
    annotation: MomentAnnotation
    video_id: str = ""
    carrier: str | None = None
    split: str | None = None

    @property
    def num_frames(self) -> int:
        return self.visual.shape[0]

    def validate(self, max_frames: int | None = None, max_tokens: int | None = None):
        T, N = self.visual.shape[0], self.query.shape[0]
        if max_frames is not None and T > max_frames:
            raise InvalidInputError(f"{self.video_id}: T={T} exceeds max_frames={max_frames}")
        if max_tokens is not None and N > max_tokens:
            raise InvalidInputError(f"{self.video_id}: N={N} exceeds max_tokens={max_tokens}")
        if self.audio is not None and self.audio.shape[0] != T:
            raise InvalidInputError(f"{self.video_id}: audio has {self.audio.shape[0]} rows, visual {T}")
        if self.frame_mask.shape != (T,) or self.token_mask.shape != (N,):
            raise InvalidInputError(f"{self.video_id}: mask shapes do not match features")
        if not self.frame_mask.any() or not self.token_mask.any():
            raise InvalidInputError(f"{self.video_id}: empty mask")
        for name in ("visual", "audio", "query"):
            arr = getattr(self, name)
            if arr is not None and not np.isfinite(arr).all():
                raise InvalidInputError(f"{self.video_id}: non-finite {name} features")
        if self.annotation.end_idx >= T:
            raise InvalidInputError(f"{self.video_id}: end index {self.annotation.end_idx} >= T={T}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------- IMGF files

def write_features(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise InvalidInputError(f"expected a 2-D matrix, got shape {matrix.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def downsample_indices(num_rows: int, max_frames: int) -> np.ndarray:
    """Uniform row selection round(i * (T - 1) / (max - 1)), i = 0..max-1."""
    if num_rows <= max_frames:
        return np.arange(num_rows)
    if max_frames == 1:
        return np.zeros(1, dtype=np.int64)
    pos = np.arange(max_frames) * (num_rows - 1) / (max_frames - 1)
    return np.floor(pos + 0.5).astype(np.int64)


def load_features(path, max_frames: int | None = None) -> np.ndarray:
    """Read an IMGF matrix, downsampling rows to ``max_frames`` when longer."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if rows == 0 or cols == 0:
        raise FormatError(f"{path}: empty matrix ({rows}x{cols})")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
                          f"expected {expected - _HEADER.size}")
    mat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    if not np.isfinite(mat).all():
        raise ValidationError(f"{path}: non-finite values in payload")
    if max_frames is not None:
        mat = mat[downsample_indices(rows, max_frames)]
    return mat.astype(np.float32)


# ---------------------------------------------------------------- annotations

_REQUIRED = {"video_id": str, "duration": (int, float), "start": (int, float), "end": (int, float)}


def load_annotations(path) -> list[AnnotationRecord]:
    """Parse line-delimited JSON annotation records.

    Malformed lines raise :class:`FormatError` naming the line; records with
    inconsistent times raise :class:`ValidationError`.
    """
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: record must be an object")
            for key, typ in _REQUIRED.items():
                if key not in obj:
                    raise FormatError(f"{path}:{lineno}: missing field {key!r}")
                if isinstance(obj[key], bool) or not isinstance(obj[key], typ):
                    raise FormatError(f"{path}:{lineno}: field {key!r} has wrong type")
            ids, text = obj.pop("query_token_ids", None), obj.pop("query_text", None)
            if ids is None and text is None:
                raise FormatError(f"{path}:{lineno}: need query_token_ids or query_text")
            if ids is not None and (not isinstance(ids, list) or not ids
                                    or not all(isinstance(i, int) and i >= 0 for i in ids)):
                raise FormatError(f"{path}:{lineno}: query_token_ids must be a nonempty list of ints")
            rec = AnnotationRecord(obj.pop("video_id"), float(obj.pop("duration")),
                                   float(obj.pop("start")), float(obj.pop("end")),
                                   ids, text, meta=obj)
            if not (rec.duration > 0 and 0 <= rec.start <= rec.end <= rec.duration):
                raise ValidationError(
                    f"{path}:{lineno}: record {rec.video_id!r} violates "
                    f"0 <= start <= end <= duration ({rec.start}, {rec.end}, {rec.duration})")
            records.append(rec)
    if not records:
        warnings.warn(f"{path}: no annotation records", stacklevel=2)
    return records


def write_annotations(path, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    records: list[AnnotationRecord]
    visual: list[np.ndarray]
    audio: list[np.ndarray]
    embeddings: np.ndarray        # [3K, d_q]
    visual_codes: np.ndarray      # [K, d_v]
    audio_codes: np.ndarray       # [K, d_a]

    def bundles(self) -> list[FeatureBundle]:
        out = []
        for rec, v, a in zip(self.records, self.visual, self.audio):
            out.append(_make_bundle(rec, v, a, self.embeddings))
        return out


def generate_synthetic_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Plant per-code patterns inside a random moment of the carrier modality."""
    T, K = spec.T, spec.codebook_size
    lo, hi = math.ceil(T / 8), T // 2
    if lo < 1 or lo > hi:
        raise ConfigError(f"T={T} leaves no moment length in [T/8, T/2]")
    rng = np.random.default_rng(spec.seed)
    visual_codes = rng.standard_normal((K, spec.d_v)).astype(np.float32)
    audio_codes = rng.standard_normal((K, spec.d_a)).astype(np.float32)
    embeddings = rng.standard_normal((3 * K, spec.d_q)).astype(np.float32)

    n_train = spec.n_samples - spec.n_test
    records, visual, audio = [], [], []
    for i in range(spec.n_samples):
        code = int(rng.integers(K))
        length = int(rng.integers(lo, hi + 1))
        s = int(rng.integers(0, T - length + 1))
        e = s + length - 1
        carrier = CARRIERS[int(rng.choice(4, p=spec.carrier_mix))]
        duration = float(rng.uniform(0.5 * T, 1.5 * T))

        v = spec.noise_std * rng.standard_normal((T, spec.d_v))
        a = spec.noise_std * rng.standard_normal((T, spec.d_a))
        inside = slice(s, e + 1)
        if carrier in ("visual", "both"):
            v[inside] += visual_codes[code]
        if carrier in ("audio", "both"):
            a[inside] += audio_codes[code]
        if carrier == "neither":
            v[inside] = visual_codes[code] + 3 * spec.noise_std * rng.standard_normal((length, spec.d_v))

        # the clamp absorbs rounding at the last frame
        records.append(AnnotationRecord(
            video_id=f"syn{i:05d}", duration=duration,
            start=duration * s / (T - 1), end=min(duration, duration * e / (T - 1)),
            query_token_ids=[3 * code, 3 * code + 1, 3 * code + 2],
            meta={"split": "train" if i < n_train else "test", "carrier": carrier,
                  "code": code, "num_frames": T}))
        visual.append(v.astype(np.float32))
        audio.append(a.astype(np.float32))
    return SyntheticDataset(spec, records, visual, audio, embeddings, visual_codes, audio_codes)


def _make_bundle(rec: AnnotationRecord, visual, audio, embeddings,
                 vocab: dict[str, int] | None = None) -> FeatureBundle:
    T = visual.shape[0]
    if rec.query_token_ids is not None:
        ids = rec.query_token_ids
    else:
        if vocab is None:
            raise InvalidInputError(f"{rec.video_id}: query_text given but no vocab.json")
        ids = [vocab[w] for w in rec.query_text.lower().split() if w in vocab]
        if not ids:
            raise InvalidInputError(f"{rec.video_id}: no query word is in the vocabulary")
    if max(ids) >= embeddings.shape[0]:
        raise InvalidInputError(f"{rec.video_id}: token id out of embedding range")
    query = embeddings[np.asarray(ids)]
    ann = MomentAnnotation.from_seconds(rec.start, rec.end, rec.duration, T)
    return FeatureBundle(
        visual=visual, audio=audio, query=query,
        frame_mask=np.ones(T, dtype=bool), token_mask=np.ones(len(ids), dtype=bool),
        annotation=ann, video_id=rec.video_id,
        carrier=rec.meta.get("carrier"), split=rec.meta.get("split"))


# ---------------------------------------------------------------- dataset dirs

def save_dataset(ds: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / "embeddings.imgf", ds.embeddings)
    for rec, v, a in zip(ds.records, ds.visual, ds.audio):
        write_features(out / "visual" / f"{rec.video_id}.imgf", v)
        write_features(out / "audio" / f"{rec.video_id}.imgf", a)
    write_annotations(out / "annotations.jsonl", ds.records)
    (out / "synthetic_spec.json").write_text(json.dumps(to_dict(ds.spec), indent=2))
    return out


def load_dataset(data_dir, split: str | None = None, load_audio: bool = True,
                 max_frames: int | None = None) -> list[FeatureBundle]:
    """Load a dataset directory into bundles.

    With ``load_audio=False`` no audio file is opened. Missing audio files
    leave ``bundle.audio`` as None.
    """
    root = Path(data_dir)
    records = load_annotations(root / "annotations.jsonl")
    embeddings = load_features(root / "embeddings.imgf")
    vocab_path = root / "vocab.json"
    vocab = json.loads(vocab_path.read_text()) if vocab_path.exists() else None
    bundles = []
    for rec in records:
        if split is not None and rec.meta.get("split") != split:
            continue
        visual = load_features(root / "visual" / f"{rec.video_id}.imgf", max_frames)
        audio = None
        if load_audio:
            apath = root / "audio" / f"{rec.video_id}.imgf"
            if apath.exists():
                audio = load_features(apath, max_frames)
        bundles.append(_make_bundle(rec, visual, audio, embeddings, vocab))
    return bundles


def load_synthetic_spec(data_dir) -> SyntheticSpec | None:
    path = Path(data_dir) / "synthetic_spec.json"
    if not path.exists():
        return None
    return from_dict(SyntheticSpec, json.loads(path.read_text()))


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    visual: torch.Tensor              # [B, T, d_v]
    audio: torch.Tensor | None        # [B, T, d_a]
    query: torch.Tensor               # [B, N, d_q]
    frame_mask: torch.Tensor          # [B, T] bool
    token_mask: torch.Tensor          # [B, N] bool
    start_idx: torch.Tensor           # [B] long
    end_idx: torch.Tensor             # [B] long
    bundles: list[FeatureBundle]

    def __len__(self):
        return self.visual.shape[0]

    def to(self, dtype: torch.dtype) -> "Batch":
        cast = lambda x: None if x is None else x.to(dtype)
        return Batch(cast(self.visual), cast(self.audio), cast(self.query), self.frame_mask,
                     self.token_mask, self.start_idx, self.end_idx, self.bundles)


def collate(bundles: Sequence[FeatureBundle], require_audio: bool = True) -> Batch:
    """Pad a list of bundles to the batch max length and stack them."""
    if not bundles:
        raise InvalidInputError("cannot collate an empty batch")
    B = len(bundles)
    T = max(b.num_frames for b in bundles)
    N = max(b.query.shape[0] for b in bundles)
    d_v, d_q = bundles[0].visual.shape[1], bundles[0].query.shape[1]
    has_audio = all(b.audio is not None for b in bundles)
    if require_audio and not has_audio:
        missing = [b.video_id for b in bundles if b.audio is None]
        raise InvalidInputError(f"audio features missing for {missing[:5]}")

    visual = np.zeros((B, T, d_v), np.float32)
    query = np.zeros((B, N, d_q), np.float32)
    fmask = np.zeros((B, T), bool)
    tmask = np.zeros((B, N), bool)
    audio = np.zeros((B, T, bundles[0].audio.shape[1]), np.float32) if has_audio else None
    for i, b in enumerate(bundles):
        t, n = b.num_frames, b.query.shape[0]
        visual[i, :t] = b.visual
        query[i, :n] = b.query
        fmask[i, :t] = b.frame_mask
        tmask[i, :n] = b.token_mask
        if audio is not None:
            audio[i, :t] = b.audio
    return Batch(
        visual=torch.from_numpy(visual),
        audio=None if audio is None else torch.from_numpy(audio),
        query=torch.from_numpy(query),
        frame_mask=torch.from_numpy(fmask),
        token_mask=torch.from_numpy(tmask),
        start_idx=torch.tensor([b.annotation.start_idx for b in bundles], dtype=torch.long),
        end_idx=torch.tensor([b.annotation.end_idx for b in bundles], dtype=torch.long),
        bundles=list(bundles),
    )
