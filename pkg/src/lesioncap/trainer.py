"""End-to-end training: variant wiring, dual loss, Adam, checkpoints and the metric log.

A training step runs augment -> branch A (classifier) -> Grad-CAM -> branch B
-> fuse -> visual projection -> caption decoder, then minimises

    total = caption + lam * mes

where ``mes`` is the classification cross-entropy of branch A plus that of
the MES head reading the fused features.  Grad-CAM maps are constants in the
caption graph.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .captioner import (CaptionDecoder, DecoderConfig, Memory, VisualProjection, build_prompt, generate,
                        pad_batch, prompt_corpus)
from .datamodel import (PAD_ID, CaptionRecord, ClinicalMetadata, Vocabulary, build_vocabulary, load_image,
                        load_mask, tokenize)
from .diffcore import DiffArray
from .diffcore.nn import Linear, Module, frozen
from .encoder import DualBranchEncoder, EncoderConfig, module_rng
from .imageops import AugmentParams, apply_augment, sample_augment
from .lesionattn import CBAM, Fusion, fuse, grad_cam_batch

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_cbam", "no_gradcam", "no_prompts", "no_fusion", "small_backbone")
VARIANT_LABELS = {
    "full": "Full model",
    "no_cbam": "w/o CBAM",
    "no_gradcam": "w/o Grad-CAM",
    "no_prompts": "w/o Clinical Prompts",
    "no_fusion": "No Attention Fusion",
    "small_backbone": "Small backbone",
}
SMALL_CHANNELS = (4, 8)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.2
    learning_rate: float = 3e-4
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    variant: str = "full"
    grad_clip: float = 5.0
    augment: bool = True
    heatmap_cache: bool = False      # compute heatmaps once per epoch instead of every step
    cam_target: str = "truth"        # class used for training-time Grad-CAM: "truth" or "predicted"
    image_size: int = 64
    channels: tuple = (8, 16, 32)
    cbam_reduction: int = 8
    cbam_kernel: int = 7
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 2
    ffn_dim: int = 128
    max_len: int = 48
    checkpoint_every: int = 0        # 0: only the final epoch

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate >= 0, batch_size >= 1 and epochs >= 0 required")
        if self.cam_target not in ("truth", "predicted"):
            raise ValueError("cam_target must be 'truth' or 'predicted'")

    @property
    def encoder_config(self) -> EncoderConfig:
        channels = SMALL_CHANNELS if self.variant == "small_backbone" else self.channels
        return EncoderConfig(channels=channels, input_size=self.image_size)

    def decoder_config(self, vocab_size: int) -> DecoderConfig:
        return DecoderConfig(vocab_size, self.d_model, self.heads, self.encoder_layers, self.decoder_layers,
                             self.ffn_dim, self.max_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    total: float
    caption: float
    mes: float


# -- data --------------------------------------------------------------------------------

@dataclass
class ImageSet:
    """Images and labels held in memory, aligned by position."""
    ids: list[str]
    images: np.ndarray                 # (N, 3, S, S)
    metadata: list[ClinicalMetadata]
    captions: list[str]
    masks: list[np.ndarray | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labels(self) -> np.ndarray:
        return np.array([m.mes for m in self.metadata], dtype=np.int64)

    def subset(self, idx) -> "ImageSet":
        idx = list(idx)
        masks = [self.masks[i] for i in idx] if self.masks else []
        return ImageSet([self.ids[i] for i in idx], self.images[idx], [self.metadata[i] for i in idx],
                        [self.captions[i] for i in idx], masks)

    @classmethod
    def from_records(cls, root, records: Sequence[CaptionRecord]) -> "ImageSet":
        images = np.stack([load_image(root, r) for r in records]) if records else np.zeros((0, 3, 1, 1))
        return cls([r.id for r in records], images, [r.metadata for r in records],
                   [r.caption for r in records], [load_mask(root, r) for r in records])

    @classmethod
    def from_samples(cls, samples, ids: Sequence[str] | None = None) -> "ImageSet":
        """From in-memory synthgen samples, quantized like their PNG files."""
        from .synthgen import caption_template, record_id, to_uint8
        ids = list(ids) if ids is not None else [record_id(i) for i in range(len(samples))]
        images = np.stack([to_uint8(s.image) / 255.0 for s in samples])
        return cls(ids, images, [s.metadata for s in samples], [caption_template(s.metadata) for s in samples],
                   [s.mask for s in samples])


def make_vocabulary(captions: Sequence[str]) -> Vocabulary:
    return build_vocabulary(list(captions) + prompt_corpus())


# -- pipeline / variants ---------------------------------------------------------------------

class Pipeline(Module):
    """The wired model for one variant.

    ``cbam`` is ``None`` for no_cbam/no_fusion; ``fusion`` is ``None`` for
    no_fusion; for no_gradcam ``fusion.alpha`` is frozen at 0.
    """

    def __init__(self, config: TrainConfig, vocab: Vocabulary):
        self._config = config
        self._vocab = vocab
        seed = config.seed
        enc_cfg = config.encoder_config
        c = enc_cfg.channels[-1]
        self.encoder = DualBranchEncoder(enc_cfg, seed)
        use_cbam = config.variant not in ("no_cbam", "no_fusion")
        reduction = min(config.cbam_reduction, c)
        self.cbam = CBAM(module_rng(seed, "cbam"), c, reduction, config.cbam_kernel) if use_cbam else None
        self.fusion = Fusion(learnable=config.variant != "no_gradcam") if config.variant != "no_fusion" else None
        self.mes_head = Linear(module_rng(seed, "mes_head"), c, 4)
        self.projection = VisualProjection(module_rng(seed, "projection"), c, config.d_model)
        self.decoder = CaptionDecoder(config.decoder_config(len(vocab)), seed)

    @property
    def config(self) -> TrainConfig:
        return self._config

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def uses_gradcam(self) -> bool:
        return self.fusion is not None and self._config.variant != "no_gradcam"

    @property
    def uses_prompts(self) -> bool:
        return self._config.variant != "no_prompts"

    def classifier_parameters(self) -> set[int]:
        return {id(p) for p in self.encoder.branch_a.parameters()}

    # forward pieces
    def heatmaps(self, images: np.ndarray, targets=None, activations=None) -> np.ndarray:
        heat, _, _ = grad_cam_batch(self.encoder, images, targets, activations, modules=(self.encoder,))
        return heat

    def fused_features(self, images, heatmaps: np.ndarray | None) -> DiffArray:
        """F' for this variant; ``heatmaps=None`` is the wiring without a Grad-CAM branch."""
        f = self.encoder.forward_features(images)
        if self.fusion is None:
            return f
        if heatmaps is None:
            return f if self.cbam is None else self.cbam(f)
        return fuse(f, heatmaps, self.cbam, self.fusion)

    def mes_logits(self, fused: DiffArray) -> DiffArray:
        pooled = dc.avg_pool2d(fused)
        return self.mes_head(dc.reshape(pooled, pooled.shape[:2]))

    def prompt_ids(self, metadata: Sequence[ClinicalMetadata]) -> np.ndarray:
        if not self.uses_prompts:
            return np.zeros((len(metadata), 0), dtype=np.int64)
        return pad_batch([self._vocab.encode(build_prompt(m)) for m in metadata])

    def memory(self, fused: DiffArray, metadata) -> Memory:
        return self.decoder.encode_memory(self.prompt_ids(metadata), self.projection(fused))

    def caption_targets(self, captions: Sequence[str]) -> np.ndarray:
        """(N, T+1) ids ``BOS caption EOS`` padded; inputs are [:, :-1], targets [:, 1:]."""
        limit = self._config.max_len + 1
        return pad_batch([self._vocab.encode(c, add_bos=True, add_eos=True)[:limit] for c in captions])

    def forward_losses(self, images, metadata, captions, labels, heatmaps=None, cam_target="truth"):
        """Caption and MES cross-entropies plus the fused-head logits.

        ``heatmaps`` are recomputed from this forward pass when not supplied.
        """
        logits_a, acts = self.encoder.forward_classify(images)
        if self.uses_gradcam and heatmaps is None:
            heatmaps = self.heatmaps(images, labels if cam_target == "truth" else None, acts)
        fused = self.fused_features(images, heatmaps if self.uses_gradcam else None)
        aux = self.mes_logits(fused)
        seq = self.caption_targets(captions)
        logits = self.decoder.forward(self.memory(fused, metadata), seq[:, :-1])
        v = logits.shape[-1]
        cap = dc.cross_entropy(dc.reshape(logits, (-1, v)), seq[:, 1:].reshape(-1), ignore_index=PAD_ID)
        mes = dc.add(dc.cross_entropy(logits_a, labels), dc.cross_entropy(aux, labels))
        return cap, mes, aux

    # inference
    def predict_batch(self, images: np.ndarray, metadata, strategy: str = "greedy", beam_width: int = 3,
                      heatmaps: np.ndarray | None = None, with_captions: bool = True):
        """Return ``(mes_pred, heatmaps, captions)``; Grad-CAM uses the predicted class."""
        with frozen(self):
            if heatmaps is None:
                # still computed for variants that do not fuse them, for reporting
                heatmaps = self.heatmaps(images)
            fused = self.fused_features(images, heatmaps if self.uses_gradcam else None)
            pred = self.mes_logits(fused).data.argmax(axis=1)
            caps = generate(self.decoder, self.memory(fused, metadata), self._vocab, strategy, beam_width) \
                if with_captions else None
        return pred, heatmaps, caps

    def predict(self, data: ImageSet, strategy: str = "greedy", batch_size: int = 32, with_captions: bool = True,
                beam_width: int = 3) -> dict:
        preds, heats, caps = [], [], []
        for s in range(0, len(data), batch_size):
            part = data.subset(range(s, min(s + batch_size, len(data))))
            p, h, c = self.predict_batch(part.images, part.metadata, strategy, beam_width,
                                         with_captions=with_captions)
            preds.append(p)
            heats.append(h)
            caps.extend(c or [])
        return {"mes": np.concatenate(preds) if preds else np.zeros(0, int),
                "heatmaps": np.concatenate(heats) if heats else np.zeros((0,) + data.images.shape[-2:]),
                "captions": caps}


def make_variant(config: TrainConfig, vocab: Vocabulary) -> Pipeline:
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}")
    return Pipeline(config, vocab)


# -- optimisation ----------------------------------------------------------------------------

class Adam:
    def __init__(self, named_params: dict[str, DiffArray], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = named_params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = p.data - update.astype(p.dtype)


def clip_grad_norm(params: Sequence[DiffArray], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- checkpoint container ------------------------------------------------------------------------

MAGIC = b"LCAPCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    vocab: list[str]
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    optimizer: dict = field(default_factory=dict)      # {"t": int, ...}; moments live in tensors
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(arr).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {"version": self.version, "config": self.config, "vocab": self.vocab, "epoch": self.epoch,
                  "rng_state": self.rng_state, "history": self.history, "optimizer": self.optimizer,
                  "tensors": entries}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", self.version, len(hb)) + hb + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:len(MAGIC)] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        start = len(MAGIC) + struct.calcsize("<IQ")
        header = json.loads(raw[start:start + hlen])
        base = start + hlen
        tensors = {}
        for e in header["tensors"]:
            buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
            if len(buf) != e["nbytes"]:
                raise ValueError(f"checkpoint truncated at tensor {e['name']}")
            tensors[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        return cls(header["config"], header["vocab"], tensors, header["epoch"], header["rng_state"],
                   header["history"], header["optimizer"], header["version"])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def model_state(self) -> dict[str, np.ndarray]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}


def make_checkpoint(pipeline: Pipeline, epoch: int = 0, history=None, rng_state=None,
                    optimizer: Adam | None = None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in pipeline.state_dict().items()}
    opt = {}
    if optimizer is not None:
        opt = {"t": optimizer.t, "lr": optimizer.lr, "betas": [optimizer.b1, optimizer.b2], "eps": optimizer.eps}
        tensors.update({f"adam.m.{k}": v for k, v in optimizer.m.items()})
        tensors.update({f"adam.v.{k}": v for k, v in optimizer.v.items()})
    return Checkpoint(pipeline.config.to_dict(), pipeline.vocab.to_list(), tensors, epoch,
                      rng_state or {}, list(history or []), opt)


def pipeline_from_checkpoint(ckpt: Checkpoint, config: TrainConfig | None = None) -> Pipeline:
    """Rebuild the pipeline; passing a ``config`` that differs from the stored one is an error."""
    stored = ckpt.train_config
    if config is not None and config != stored:
        diff = {k for k, v in config.to_dict().items() if ckpt.config.get(k) != v}
        raise ValueError(f"checkpoint config mismatch in fields {sorted(diff)}")
    pipe = Pipeline(stored, Vocabulary.from_list(ckpt.vocab))
    pipe.load_state_dict(ckpt.model_state())
    return pipe


def load_pipeline(path: str | Path) -> Pipeline:
    return pipeline_from_checkpoint(Checkpoint.load(path))


# -- training loop ----------------------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "split", "loss_total", "loss_caption", "loss_mes", "mes_acc")


def write_log(history: Sequence[dict], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})
    Path(path).write_text(buf.getvalue())


@dataclass
class TrainResult:
    pipeline: Pipeline
    history: list[dict]
    checkpoint: Checkpoint
    checkpoint_paths: list[Path] = field(default_factory=list)


class Trainer:
    def __init__(self, config: TrainConfig, train_set: ImageSet, val_set: ImageSet | None = None,
                 vocab: Vocabulary | None = None, progress: Callable[[str], None] | None = None):
        self.config = config
        self.train_set = train_set
        self.val_set = val_set
        self.vocab = vocab or make_vocabulary(train_set.captions)
        self.pipeline = make_variant(config, self.vocab)
        named = dict(self.pipeline.named_parameters())
        self.optimizer = Adam(named, config.learning_rate)
        cls_ids = self.pipeline.classifier_parameters()
        # branch A is clipped on its own so its trajectory does not depend on the variant
        self.groups = [[p for p in named.values() if id(p) in cls_ids],
                       [p for p in named.values() if id(p) not in cls_ids]]
        self.shuffle_rng = module_rng(config.seed, "trainer.shuffle")
        self.augment_rng = module_rng(config.seed, "trainer.augment")
        self.history: list[dict] = []
        self.epoch = 0
        self._progress = progress or (lambda msg: log.info(msg))

    def rng_state(self) -> dict:
        return {"shuffle": self.shuffle_rng.bit_generator.state, "augment": self.augment_rng.bit_generator.state}

    def checkpoint(self) -> Checkpoint:
        return make_checkpoint(self.pipeline, self.epoch, self.history, self.rng_state(), self.optimizer)

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume from a checkpoint written by a trainer with the same config."""
        if TrainConfig.from_dict(ckpt.config) != self.config:
            raise ValueError("checkpoint was written under a different config")
        if Vocabulary.from_list(ckpt.vocab) != self.vocab:
            raise ValueError("checkpoint vocabulary differs")
        self.pipeline.load_state_dict(ckpt.model_state())
        for k in self.optimizer.m:
            self.optimizer.m[k] = ckpt.tensors[f"adam.m.{k}"].copy()
            self.optimizer.v[k] = ckpt.tensors[f"adam.v.{k}"].copy()
        self.optimizer.t = int(ckpt.optimizer.get("t", 0))
        self.shuffle_rng.bit_generator.state = ckpt.rng_state["shuffle"]
        self.augment_rng.bit_generator.state = ckpt.rng_state["augment"]
        self.epoch = ckpt.epoch
        self.history = list(ckpt.history)

    def _augment(self, images: np.ndarray) -> tuple[np.ndarray, list[AugmentParams]]:
        if not self.config.augment:
            return images, [AugmentParams()] * len(images)
        params = [sample_augment(self.augment_rng, images.shape[-1]) for _ in range(len(images))]
        return np.stack([apply_augment(im, p) for im, p in zip(images, params)]), params

    def step(self, images, metadata, captions, labels, cached_heatmaps=None) -> tuple[LossBreakdown, np.ndarray]:
        pipe, cfg = self.pipeline, self.config
        pipe.zero_grad()
        cap, mes, aux = pipe.forward_losses(images, metadata, captions, labels, cached_heatmaps, cfg.cam_target)
        total = dc.add(cap, dc.mul(mes, cfg.lam))
        breakdown = LossBreakdown(total.item(), cap.item(), mes.item())
        if not np.isfinite(breakdown.total):
            raise FloatingPointError(f"non-finite loss {breakdown}")
        dc.backward(total)
        for group in self.groups:
            clip_grad_norm(group, cfg.grad_clip)
        self.optimizer.step()
        return breakdown, aux.data.argmax(axis=1)

    def _epoch_heatmaps(self) -> np.ndarray | None:
        if not (self.config.heatmap_cache and self.pipeline.uses_gradcam):
            return None
        data = self.train_set
        target = data.labels if self.config.cam_target == "truth" else None
        out = []
        for s in range(0, len(data), 64):
            part = slice(s, s + 64)
            out.append(self.pipeline.heatmaps(data.images[part], None if target is None else target[part]))
        return np.concatenate(out)

    def evaluate_loss(self, data: ImageSet, batch_size: int = 32) -> dict:
        """Mean losses and MES accuracy without augmentation; Grad-CAM on the predicted class."""
        pipe = self.pipeline
        cap_sum = mes_sum = 0.0
        correct = 0
        with frozen(pipe):
            for st in range(0, len(data), batch_size):
                part = data.subset(range(st, min(st + batch_size, len(data))))
                heat = pipe.heatmaps(part.images) if pipe.uses_gradcam else None
                cap, mes, aux = pipe.forward_losses(part.images, part.metadata, part.captions, part.labels, heat)
                n = len(part)
                cap_sum += cap.item() * n
                mes_sum += mes.item() * n
                correct += int((aux.data.argmax(axis=1) == part.labels).sum())
        n = max(len(data), 1)
        cap_m, mes_m = cap_sum / n, mes_sum / n
        return {"loss_total": cap_m + self.config.lam * mes_m, "loss_caption": cap_m, "loss_mes": mes_m,
                "mes_acc": correct / n}

    def train_epoch(self) -> dict:
        cfg, data = self.config, self.train_set
        cache = self._epoch_heatmaps()
        order = self.shuffle_rng.permutation(len(data))
        tot = cap = mes = 0.0
        correct = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            part = data.subset(idx)
            images, params = self._augment(part.images)
            heat = None
            if cache is not None:
                heat = np.stack([p.apply_geometry(h) for p, h in zip(params, cache[idx])])
            lb, pred = self.step(images, part.metadata, part.captions, part.labels, heat)
            n = len(idx)
            tot += lb.total * n
            cap += lb.caption * n
            mes += lb.mes * n
            correct += int((pred == part.labels).sum())
        n = max(len(data), 1)
        return {"loss_total": tot / n, "loss_caption": cap / n, "loss_mes": mes / n, "mes_acc": correct / n}

    def fit(self, out_dir: str | Path | None = None, epochs: int | None = None) -> TrainResult:
        cfg = self.config
        out = Path(out_dir) if out_dir is not None else None
        paths: list[Path] = []
        target = cfg.epochs if epochs is None else epochs
        while self.epoch < target:
            try:
                row = self.train_epoch()
            except FloatingPointError as exc:
                path = None
                if out is not None:
                    path = str(self.checkpoint().save(out / "ckpt_diverged.bin"))
                raise TrainingDiverged(f"epoch {self.epoch + 1}: {exc}", path) from exc
            self.epoch += 1
            self.history.append({"epoch": self.epoch, "split": "train", **row})
            msg = f"[{cfg.variant}] epoch {self.epoch}/{target} loss {row['loss_total']:.4f} acc {row['mes_acc']:.3f}"
            if self.val_set is not None and len(self.val_set):
                vrow = self.evaluate_loss(self.val_set)
                self.history.append({"epoch": self.epoch, "split": "val", **vrow})
                msg += f" | val loss {vrow['loss_total']:.4f} acc {vrow['mes_acc']:.3f}"
            self._progress(msg)
            if out is not None and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0 \
                    and self.epoch != target:
                paths.append(self.checkpoint().save(out / f"ckpt_{self.epoch}.bin"))
        ckpt = self.checkpoint()
        if out is not None:
            paths.append(ckpt.save(out / f"ckpt_{self.epoch}.bin"))
            write_log(self.history, out / "log.csv")
        return TrainResult(self.pipeline, self.history, ckpt, paths)


def train(train_set: ImageSet, config: TrainConfig, val_set: ImageSet | None = None,
          out_dir: str | Path | None = None, vocab: Vocabulary | None = None, progress=None) -> TrainResult:
    return Trainer(config, train_set, val_set, vocab, progress).fit(out_dir)


def caption_exact_match(pred: Sequence[str], ref: Sequence[str]) -> float:
    if len(pred) != len(ref):
        raise ValueError("length mismatch")
    return float(np.mean([tokenize(a) == tokenize(b) for a, b in zip(pred, ref)])) if ref else 0.0


def select_lambda(train_set: ImageSet, val_set: ImageSet, base: TrainConfig,
                  grid: Sequence[float] = (0.0, 0.2, 1.0), progress=None) -> tuple[float, list[dict]]:
    """Short runs per lambda; returns ``(best, table)``.

    Rank by val MES accuracy and by val BLEU-4 separately (higher is better,
    ties share the mean rank); the lambda with the smallest rank sum wins,
    ties going to the value closest to 0.2 and then to the smaller value.
    """
    from .evalsuite import bleu4
    if len(grid) < 3 or not any(abs(g - 0.2) < 1e-12 for g in grid):
        raise ValueError("grid needs at least three values including 0.2")
    table = []
    for lam in grid:
        res = train(train_set, replace(base, lam=float(lam)), None, progress=progress)
        out = res.pipeline.predict(val_set)
        acc = float((out["mes"] == val_set.labels).mean())
        bleu = float(np.mean([bleu4(tokenize(c["caption"]), tokenize(r))
                              for c, r in zip(out["captions"], val_set.captions)]))
        table.append({"lambda": float(lam), "val_mes_acc": acc, "val_bleu4": bleu})
    return rank_lambdas(table), table


def rank_lambdas(table: list[dict]) -> float:
    """Pick lambda from rows holding ``lambda``, ``val_mes_acc`` and ``val_bleu4``; adds ``rank_sum``."""
    ranks = np.zeros(len(table))
    for key in ("val_mes_acc", "val_bleu4"):
        vals = np.array([row[key] for row in table])
        ranks += np.array([(vals > v).sum() + ((vals == v).sum() - 1) / 2 + 1 for v in vals])
    for row, r in zip(table, ranks):
        row["rank_sum"] = float(r)
    best = min(range(len(table)), key=lambda i: (ranks[i], abs(table[i]["lambda"] - 0.2), table[i]["lambda"]))
    return table[best]["lambda"]
