"""Deterministic endoscopy-like images with MES-correlated lesions.

Class-conditional lesion table (randomness only in placement and intensity):

======  =====================  ==============  =========  ===================  ================
MES     vascular pattern       erythema        bleeding   ulceration           friability
======  =====================  ==============  =========  ===================  ================
0       visible (4-6 vessels)  none            no         none                 none
1       partial (2-3 faint)    mild/moderate   no         none                 none/low
2       obliterated            moderate/mark.  50%        none                 low/moderate
3       obliterated            marked          yes        superficial/deep     high
======  =====================  ==============  =========  ===================  ================

Erythema patches, bleeding spots and ulcers each contribute their disk to the
lesion mask; vessels do not.  Every record draws from its own RNG stream
seeded by ``(seed, record_index)``, so output never depends on generation order.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import CaptionRecord, ClinicalMetadata, save_dataset

LESION_KINDS = ("erythema_patch", "bleeding_spot", "ulcer")

_SEVERITY = {0: "normal mucosal surface", 1: "mild inflammation",
             2: "moderate inflammation", 3: "severe inflammation"}
_VASCULAR = {"visible": "visible vascular pattern",
             "partially_obliterated": "vascular pattern partially obliterated",
             "obliterated": "vascular pattern obliterated"}

# erythema level -> (patch count range, colour strength range)
_ERYTHEMA_PATCHES = {"mild": ((1, 2), (0.35, 0.5)), "moderate": ((2, 3), (0.55, 0.7)),
                     "marked": ((2, 3), (0.75, 0.9))}


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    samples_per_class: int = 25
    seed: int = 0
    noise_level: float = 0.3

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if self.samples_per_class < 4:
            raise ValueError("samples_per_class must be at least 4")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")


@dataclass(frozen=True)
class LesionSpec:
    kind: str
    center: tuple[float, float]
    radius: float
    intensity: float


@dataclass
class SynthSample:
    metadata: ClinicalMetadata
    image: np.ndarray          # (3, S, S) float in [0, 1]
    mask: np.ndarray           # (S, S) in {0, 1}
    lesions: list[LesionSpec] = field(default_factory=list)


def caption_template(meta: ClinicalMetadata) -> str:
    """Fill-in caption mentioning severity, vascular pattern and every finding."""
    normal = (meta.mes == 0 and meta.erythema == "none" and meta.friability == "none"
              and meta.vascular_pattern == "visible" and not meta.bleeding and meta.ulceration == "none")
    if normal:
        return "normal mucosal surface with visible vascular pattern"
    ery = "no erythema" if meta.erythema == "none" else f"{meta.erythema} erythema"
    if meta.friability != "none":
        ery += f" with {meta.friability} friability"
    bleed = "bleeding present" if meta.bleeding else "no bleeding"
    ulc = "no ulcers" if meta.ulceration == "none" else f"{meta.ulceration} ulcers"
    return f"{_SEVERITY[meta.mes]}; mucosa shows {ery}; {_VASCULAR[meta.vascular_pattern]}; {bleed}; {ulc}"


def sample_metadata(mes: int, rng: np.random.Generator) -> ClinicalMetadata:
    if mes == 0:
        return ClinicalMetadata(0)
    if mes == 1:
        return ClinicalMetadata(1, "partially_obliterated", False, str(rng.choice(["mild", "moderate"])),
                                str(rng.choice(["none", "low"])), "none")
    if mes == 2:
        return ClinicalMetadata(2, "obliterated", bool(rng.random() < 0.5), str(rng.choice(["moderate", "marked"])),
                                str(rng.choice(["low", "moderate"])), "none")
    if mes == 3:
        return ClinicalMetadata(3, "obliterated", True, "marked", "high",
                                str(rng.choice(["superficial", "deep"])))
    raise ValueError(f"invalid MES grade {mes}")


# -- rendering ------------------------------------------------------------------------

def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)
    a = grid[i][:, i]
    b = grid[i][:, i + 1]
    c = grid[i + 1][:, i]
    d = grid[i + 1][:, i + 1]
    fx, fy = f[None, :], f[:, None]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


# diffuse mucosal tint per erythema level: inflamed mucosa is redder overall
_MUCOSA = {"none": (0.88, 0.58, 0.56), "mild": (0.88, 0.51, 0.49), "moderate": (0.87, 0.45, 0.43),
           "marked": (0.84, 0.38, 0.37)}


def _background(rng, size, noise_level, erythema="none"):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) * 2 - 1
    vignette = 1.0 - 0.35 * (xx ** 2 + yy ** 2)
    tex = 0.6 * _value_noise(rng, size, 4) + 0.4 * _value_noise(rng, size, 9)
    amp = 0.08 + 0.12 * noise_level
    base = np.array(_MUCOSA[erythema])[:, None, None]
    img = base * (1 + amp * (tex - 0.5))[None] * vignette[None]
    return img * rng.uniform(0.95, 1.05)


def _blend(img, alpha, color):
    color = np.asarray(color, dtype=float)[:, None, None]
    return img * (1 - alpha[None]) + color * alpha[None]


def _draw_vessels(img, rng, count, strength, max_len):
    size = img.shape[1]
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(count):
        pos = rng.uniform(4, size - 4, size=2)
        ang = rng.uniform(0, 2 * np.pi)
        pts = []
        for _ in range(int(rng.integers(max_len // 2, max_len))):
            ang += rng.normal(0, 0.25)
            pos = pos + np.array([np.cos(ang), np.sin(ang)])
            pts.append(pos.copy())
        pts = np.array(pts)
        d2 = ((yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2).min(axis=-1)
        width = rng.uniform(0.6, 1.1)
        alpha = strength * np.exp(-d2 / (2 * width ** 2))
        img = _blend(img, alpha, (0.55, 0.16, 0.22))
    return img


def _place(rng, size, radius, taken, kind, max_tries=100):
    """Centre keeping the disk inside the image; spots and ulcers never overlap."""
    lo, hi = radius + 1, size - radius - 2
    for _ in range(max_tries):
        c = rng.uniform(lo, hi, size=2)
        if kind == "erythema_patch":
            return c
        if all(np.hypot(*(c - tc)) > radius + tr + 1 for tc, tr, tk in taken if tk != "erythema_patch"):
            return c
    raise SynthError(f"could not place {kind} of radius {radius:.1f} after {max_tries} tries")


def _disk(size, center, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    return np.hypot(yy - center[0], xx - center[1])


def _lesion_plan(meta: ClinicalMetadata, rng, size):
    scale = size / 64.0
    plan = []
    if meta.erythema != "none":
        (lo, hi), (slo, shi) = _ERYTHEMA_PATCHES[meta.erythema]
        if meta.mes == 1:
            lo, hi = 1, 2
        for _ in range(int(rng.integers(lo, hi + 1))):
            plan.append(("erythema_patch", rng.uniform(7, 11) * scale, rng.uniform(slo, shi)))
    if meta.ulceration != "none":
        deep = meta.ulceration == "deep"
        for _ in range(int(rng.integers(2, 4) if deep else rng.integers(1, 3))):
            r = rng.uniform(6, 8.5) if deep else rng.uniform(4, 6)
            plan.append(("ulcer", r * scale, rng.uniform(0.8, 1.0)))
    if meta.bleeding:
        for _ in range(int(rng.integers(1, 4))):
            plan.append(("bleeding_spot", rng.uniform(2, 3.5) * scale, rng.uniform(0.8, 1.0)))
    return plan


def render(meta: ClinicalMetadata, rng: np.random.Generator, size: int = 64,
           noise_level: float = 0.3) -> SynthSample:
    img = _background(rng, size, noise_level, meta.erythema)
    if meta.vascular_pattern == "visible":
        img = _draw_vessels(img, rng, int(rng.integers(4, 7)), 0.75, size)
    elif meta.vascular_pattern == "partially_obliterated":
        img = _draw_vessels(img, rng, int(rng.integers(2, 4)), 0.4, size // 2)
    mask = np.zeros((size, size))
    lesions: list[LesionSpec] = []
    taken = []
    for kind, radius, intensity in _lesion_plan(meta, rng, size):
        c = _place(rng, size, radius, taken, kind)
        taken.append((c, radius, kind))
        dist = _disk(size, c, radius)
        if kind == "erythema_patch":
            alpha = intensity * np.exp(-dist ** 2 / (2 * (radius / 2) ** 2))
            img = _blend(img, alpha, (0.95, 0.18, 0.2))
        elif kind == "bleeding_spot":
            alpha = intensity * np.clip(radius + 0.5 - dist, 0, 1)
            img = _blend(img, alpha, (0.42, 0.02, 0.06))
        else:
            rim = np.clip(1.5 - np.abs(dist - radius + 1.0), 0, 1)
            core = np.clip(radius - 1.5 - dist, 0, 1)
            img = _blend(img, intensity * core, (0.96, 0.92, 0.74))
            img = _blend(img, intensity * rim, (0.36, 0.1, 0.1))
        mask[dist <= radius] = 1.0
        lesions.append(LesionSpec(kind, (float(c[0]), float(c[1])), float(radius), float(intensity)))
    img = img + rng.normal(0, 0.015 + 0.06 * noise_level, size=img.shape)
    return SynthSample(meta, np.clip(img, 0, 1), mask, lesions)


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def render_index(config: SynthConfig, index: int) -> SynthSample:
    mes = index // config.samples_per_class
    rng = record_rng(config.seed, index)
    meta = sample_metadata(mes, rng)
    return render(meta, rng, config.image_size, config.noise_level)


def record_id(index: int) -> str:
    return f"img_{index:05d}"


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def png_bytes(array_hw_or_hwc: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(array_hw_or_hwc).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def generate(config: SynthConfig, out_dir: str | Path | None = None) -> list[CaptionRecord]:
    """Render ``4 * samples_per_class`` records; if ``out_dir`` is given, write the dataset."""
    records = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    for index in range(4 * config.samples_per_class):
        sample = render_index(config, index)
        rid = record_id(index)
        rec = CaptionRecord(rid, f"images/{rid}.png", sample.metadata,
                            caption_template(sample.metadata), f"masks/{rid}.png")
        if out is not None:
            (out / rec.image_path).write_bytes(png_bytes(to_uint8(sample.image.transpose(1, 2, 0))))
            (out / rec.lesion_mask_path).write_bytes(png_bytes((sample.mask * 255).astype(np.uint8)))
        records.append(rec)
    if out is not None:
        save_dataset(records, out)
    return records
