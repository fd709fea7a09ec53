"""Annotation schema, word tokenizer, dataset I/O and the MES-stratified split.

A dataset directory looks like::

    root/
      manifest.jsonl     one CaptionRecord per line
      images/<id>.png
      masks/<id>.png     optional, synthetic data only
      splits.json        optional, written by ``stratified_split``
"""
from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

VASCULAR_PATTERNS = ("visible", "partially_obliterated", "obliterated")
ERYTHEMA_LEVELS = ("none", "mild", "moderate", "marked")
FRIABILITY_LEVELS = ("none", "low", "moderate", "high")
ULCERATION_LEVELS = ("none", "superficial", "deep")
MES_GRADES = (0, 1, 2, 3)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)


class DatasetError(ValueError):
    """A manifest row or dataset file failed validation."""

    def __init__(self, message: str, record_id: str | None = None, field: str | None = None):
        self.record_id = record_id
        self.field = field
        where = []
        if record_id is not None:
            where.append(f"record {record_id!r}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class ClinicalMetadata:
    mes: int
    vascular_pattern: str = "visible"
    bleeding: bool = False
    erythema: str = "none"
    friability: str = "none"
    ulceration: str = "none"

    def __post_init__(self):
        self.validate()

    def validate(self, record_id: str | None = None) -> None:
        if isinstance(self.mes, bool) or not isinstance(self.mes, (int, np.integer)) or self.mes not in MES_GRADES:
            raise DatasetError(f"MES must be one of {MES_GRADES}, got {self.mes!r}", record_id, "mes")
        for field, allowed in (("vascular_pattern", VASCULAR_PATTERNS), ("erythema", ERYTHEMA_LEVELS),
                               ("friability", FRIABILITY_LEVELS), ("ulceration", ULCERATION_LEVELS)):
            value = getattr(self, field)
            if value not in allowed:
                raise DatasetError(f"{value!r} not in {allowed}", record_id, field)
        if not isinstance(self.bleeding, (bool, np.bool_)):
            raise DatasetError(f"bleeding must be boolean, got {self.bleeding!r}", record_id, "bleeding")
        if self.mes == 0 and (self.bleeding or self.ulceration != "none"):
            raise DatasetError("MES 0 cannot have bleeding or ulceration", record_id, "mes")

    def to_dict(self) -> dict:
        return {**asdict(self), "mes": int(self.mes), "bleeding": bool(self.bleeding)}

    @classmethod
    def from_dict(cls, d: dict, record_id: str | None = None) -> "ClinicalMetadata":
        try:
            return cls(**d)
        except TypeError as exc:
            raise DatasetError(str(exc), record_id, "metadata") from None
        except DatasetError as exc:
            raise DatasetError(str(exc).split(": ", 1)[-1], record_id, exc.field) from None


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    image_path: str
    metadata: ClinicalMetadata
    caption: str
    lesion_mask_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "metadata": self.metadata.to_dict(),
            "caption": self.caption,
            "lesion_mask_path": self.lesion_mask_path,
        }


# -- tokenizer ---------------------------------------------------------------------

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

_TOKEN_RE = re.compile(r"[a-z0-9_\-]+|[^\sa-z0-9_\-]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into words, with punctuation as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    out = ""
    for tok in tokens:
        if out and (tok[0].isalnum() or tok[0] in "_-"):
            out += " "
        elif out and tok not in ",.;:":
            out += " "
        out += tok
    return out


class Vocabulary:
    """Word-level vocabulary with PAD/BOS/EOS/UNK at ids 0-3."""

    def __init__(self, tokens: Iterable[str]):
        words = [t for t in tokens if t not in SPECIALS]
        if len(set(words)) != len(words):
            raise ValueError("vocabulary tokens must be unique")
        self.itos = list(SPECIALS) + words
        self.token_to_id = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids = [self.token_to_id.get(t, UNK_ID) for t in tokenize(text)]
        if add_bos:
            ids.insert(0, BOS_ID)
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int], strip_specials: bool = True) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if strip_specials and i in (PAD_ID, BOS_ID):
                continue
            if strip_specials and i == EOS_ID:
                break
            toks.append(self.itos[i])
        return detokenize(toks)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:4]) != SPECIALS:
            raise ValueError("serialized vocabulary must start with the special tokens")
        return cls(itos[4:])


def build_vocabulary(corpus: Sequence[str], min_count: int = 1) -> Vocabulary:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for text in corpus for t in tokenize(text))
    # sorted for a deterministic id assignment
    return Vocabulary(sorted(t for t, c in counts.items() if c >= min_count and t not in SPECIALS))


# -- split -------------------------------------------------------------------------

def _round_half_down(x: float) -> int:
    return int(math.ceil(x - 0.5 - 1e-9))


def stratified_split(records: Sequence[CaptionRecord], ratios: Sequence[float] = DEFAULT_RATIOS,
                     seed: int = 0) -> dict[str, str]:
    """Assign each record to train/val/test, per MES class.

    Val and test get ``ratio * class_size`` records each, rounded half down;
    the remainder goes to train, so 10 records split 8/1/1.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")
    by_class: dict[int, list[str]] = {}
    for r in records:
        by_class.setdefault(r.metadata.mes, []).append(r.id)
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for mes in sorted(by_class):
        ids = sorted(by_class[mes])
        if len(ids) < 3:
            raise ValueError(f"MES class {mes} has {len(ids)} records; at least 3 are required")
        n = len(ids)
        n_val = _round_half_down(ratios[1] * n)
        n_test = _round_half_down(ratios[2] * n)
        order = rng.permutation(n)
        for rank, idx in enumerate(order):
            split = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
            assignment[ids[idx]] = split
    return {k: assignment[k] for k in sorted(assignment)}


def split_records(records: Sequence[CaptionRecord], assignment: dict[str, str]) -> dict[str, list[CaptionRecord]]:
    out = {s: [] for s in SPLITS}
    for r in records:
        out[assignment[r.id]].append(r)
    return out


def save_splits(assignment: dict[str, str], path: str | Path) -> None:
    Path(path).write_text(json.dumps(assignment, indent=1, sort_keys=True) + "\n")


def load_splits(path: str | Path) -> dict[str, str]:
    data = json.loads(Path(path).read_text())
    bad = {k: v for k, v in data.items() if v not in SPLITS}
    if bad:
        raise DatasetError(f"unknown split names {sorted(set(bad.values()))}")
    return data


# -- dataset I/O ---------------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def record_from_dict(d: dict, line: int | None = None) -> CaptionRecord:
    rid = d.get("id")
    if not isinstance(rid, str) or not rid:
        raise DatasetError(f"missing or empty id (line {line})", None, "id")
    for field in ("image_path", "metadata", "caption"):
        if field not in d:
            raise DatasetError("missing field", rid, field)
    extra = set(d) - {"id", "image_path", "metadata", "caption", "lesion_mask_path"}
    if extra:
        raise DatasetError(f"unexpected fields {sorted(extra)}", rid)
    if not isinstance(d["caption"], str) or not d["caption"].strip():
        raise DatasetError("caption must be non-empty", rid, "caption")
    meta = ClinicalMetadata.from_dict(d["metadata"], rid)
    return CaptionRecord(rid, d["image_path"], meta, d["caption"], d.get("lesion_mask_path"))


def save_dataset(records: Sequence[CaptionRecord], root: str | Path) -> None:
    """Write ``manifest.jsonl``; image and mask files are the caller's job."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seen = set()
    lines = []
    for r in records:
        if r.id in seen:
            raise DatasetError("duplicate id", r.id, "id")
        seen.add(r.id)
        lines.append(json.dumps(r.to_dict(), sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")


def load_dataset(root: str | Path, check_files: bool = True) -> list[CaptionRecord]:
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetError(f"no {MANIFEST} under {root}")
    records, seen = [], set()
    for i, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {i}: invalid JSON ({exc.msg})") from None
        rec = record_from_dict(d, i)
        if rec.id in seen:
            raise DatasetError("duplicate id", rec.id, "id")
        seen.add(rec.id)
        if check_files:
            if not (root / rec.image_path).is_file():
                raise DatasetError(f"image file not found: {rec.image_path}", rec.id, "image_path")
            if rec.lesion_mask_path and not (root / rec.lesion_mask_path).is_file():
                raise DatasetError(f"mask file not found: {rec.lesion_mask_path}", rec.id, "lesion_mask_path")
        records.append(rec)
    return records


def load_image(root: str | Path, rec: CaptionRecord) -> np.ndarray:
    """Image as float array (3, S, S) in [0, 1]."""
    from PIL import Image
    with Image.open(Path(root) / rec.image_path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_mask(root: str | Path, rec: CaptionRecord) -> np.ndarray | None:
    if not rec.lesion_mask_path:
        return None
    from PIL import Image
    with Image.open(Path(root) / rec.lesion_mask_path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.float64)
