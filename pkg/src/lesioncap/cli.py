"""Command-line entry point: ``lesioncap <command> [options]``.

Machine output goes to files only; progress and errors go to stderr.  Every
option can also come from ``--config FILE`` (a JSON object keyed by option
name, or a run manifest written by an earlier command); flags win over the
file, the file wins over defaults.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("lesioncap")

MANIFEST_NAME = "run_manifest.json"

DEFAULTS = {
    "synth": {"per_class": 100, "seed": 0, "size": 64, "noise": 0.3},
    "split": {"seed": 0, "ratios": [0.70, 0.15, 0.15]},
    "train": {"variant": "full", "lam": 0.2, "epochs": 50, "seed": 0, "learning_rate": 1e-3,
              "batch_size": 16, "heatmap_cache": False, "augment": True, "checkpoint_every": 0},
    "caption": {"split": "test", "strategy": "greedy", "beam_width": 3},
    "gradcam": {"split": None},
    "eval": {"split": "test", "strategy": "greedy", "baseline": None, "iters": 1000, "seed": 0},
    "ablate": {"lam": 0.2, "epochs": 50, "seed": 0, "learning_rate": 1e-3, "batch_size": 16,
               "variants": None},
    "bootstrap": {"iters": 1000, "seed": 0, "metric": "mes_accuracy"},
}
REQUIRED = {
    "synth": ("out",), "split": ("data",), "train": ("data", "out"), "caption": ("ckpt", "data", "out"),
    "gradcam": ("ckpt", "data", "ids", "out"), "eval": ("ckpt", "data", "out"), "ablate": ("data", "out"),
    "bootstrap": ("a", "b", "refs", "out"),
}


class CliError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------------------

def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    tmp.replace(path)


def manifest(command: str, options: dict, outputs, started: str, status: str = "ok") -> dict:
    return {"command": command, "config": _jsonable(options), "seed": options.get("seed"),
            "code_version": code_version(), "timestamps": {"started": started, "finished": _now()},
            "outputs": sorted(str(o) for o in outputs), "status": status}


def _jsonable(options: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in options.items() if k != "config"}


class _Staging:
    """Build an output directory next to its destination and move it into place on success."""

    def __init__(self, dest: Path):
        self.dest = Path(dest)
        if self.dest.exists() and (not self.dest.is_dir() or any(self.dest.iterdir())):
            raise CliError(f"output directory {self.dest} already exists and is not empty")
        self.dest.parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(tempfile.mkdtemp(prefix=f".{self.dest.name}.", dir=self.dest.parent))

    def __enter__(self) -> Path:
        return self.path

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None or (self.path / MANIFEST_NAME).exists():
            if self.dest.exists():
                self.dest.rmdir()
            self.path.replace(self.dest)
        else:
            shutil.rmtree(self.path, ignore_errors=True)
        return False


def _files(root: Path) -> list[str]:
    return [str(p.relative_to(root)) for p in sorted(root.rglob("*")) if p.is_file()]


def _load_data(data: Path):
    from .datamodel import load_dataset
    return load_dataset(data)


def _split_sets(data: Path, records):
    from .datamodel import load_splits, split_records
    from .trainer import ImageSet
    path = data / "splits.json"
    if not path.is_file():
        raise CliError(f"{path} not found; run `lesioncap split --data {data}` first")
    assignment = load_splits(path)
    missing = [r.id for r in records if r.id not in assignment]
    if missing:
        raise CliError(f"splits.json does not cover record {missing[0]}")
    parts = split_records(records, assignment)
    return {k: ImageSet.from_records(data, v) for k, v in parts.items()}


def _train_config(opts: dict, variant: str | None = None, image_size: int = 64):
    from .trainer import TrainConfig
    return TrainConfig(image_size=int(image_size), lam=float(opts["lam"]),
                       learning_rate=float(opts["learning_rate"]),
                       batch_size=int(opts["batch_size"]), epochs=int(opts["epochs"]), seed=int(opts["seed"]),
                       variant=variant or opts["variant"], heatmap_cache=bool(opts.get("heatmap_cache", False)),
                       augment=bool(opts.get("augment", True)),
                       checkpoint_every=int(opts.get("checkpoint_every", 0)))


# -- commands ----------------------------------------------------------------------------------

def cmd_synth(o: dict) -> None:
    from .synthgen import SynthConfig, generate
    cfg = SynthConfig(image_size=int(o["size"]), samples_per_class=int(o["per_class"]), seed=int(o["seed"]),
                      noise_level=float(o["noise"]))
    started = _now()
    with _Staging(Path(o["out"])) as tmp:
        generate(cfg, tmp)
        log.info("rendered %d images", 4 * cfg.samples_per_class)
        write_atomic(tmp / MANIFEST_NAME, _dump(manifest("synth", o, _files(tmp), started)))


def cmd_split(o: dict) -> None:
    from .datamodel import save_splits, stratified_split
    data = Path(o["data"])
    started = _now()
    records = _load_data(data)
    assignment = stratified_split(records, tuple(o["ratios"]), int(o["seed"]))
    out = data / "splits.json"
    save_splits(assignment, out)
    counts = {s: sum(v == s for v in assignment.values()) for s in ("train", "val", "test")}
    log.info("split %d records: %s", len(records), counts)
    write_atomic(data / "splits.json.manifest.json", _dump(manifest("split", o, ["splits.json"], started)))


def cmd_train(o: dict) -> None:
    from .trainer import Trainer, TrainingDiverged
    data = Path(o["data"])
    sets = _split_sets(data, _load_data(data))
    cfg = _train_config(o, image_size=sets["train"].images.shape[-1])
    started = _now()
    with _Staging(Path(o["out"])) as tmp:
        trainer = Trainer(cfg, sets["train"], sets["val"], progress=lambda m: log.info(m))
        try:
            trainer.fit(tmp)
        except TrainingDiverged as exc:
            write_atomic(tmp / MANIFEST_NAME, _dump(manifest("train", o, _files(tmp), started, "diverged")))
            raise CliError(str(exc)) from exc
        write_atomic(tmp / MANIFEST_NAME, _dump(manifest("train", o, _files(tmp), started)))


def _pipeline_and_split(o: dict, split: str | None):
    from .trainer import load_pipeline
    ckpt = Path(o["ckpt"])
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} not found")
    pipe = load_pipeline(ckpt)
    data = Path(o["data"])
    records = _load_data(data)
    if split in (None, "all"):
        from .trainer import ImageSet
        return pipe, ImageSet.from_records(data, records), records
    sets = _split_sets(data, records)
    if split not in sets:
        raise CliError(f"unknown split {split!r}")
    return pipe, sets[split], records


def cmd_caption(o: dict) -> None:
    from .captioner import build_prompt
    pipe, part, _ = _pipeline_and_split(o, o["split"])
    out = Path(o["out"])
    started = _now()
    res = pipe.predict(part, strategy=o["strategy"], beam_width=int(o["beam_width"]))
    lines = []
    for i, rid in enumerate(part.ids):
        c = res["captions"][i]
        prompt = build_prompt(part.metadata[i]) if pipe.uses_prompts else ""
        lines.append(json.dumps({"id": rid, "prompt": prompt, "caption": c["caption"], "truncated": c["truncated"],
                                 "logprob": c["logprob"], "mes_pred": int(res["mes"][i])}, sort_keys=True))
    write_atomic(out, "\n".join(lines) + "\n")
    write_atomic(out.with_name(out.name + ".manifest.json"), _dump(manifest("caption", o, [out.name], started)))
    log.info("wrote %d captions to %s", len(lines), out)


def cmd_gradcam(o: dict) -> None:
    from .lesionattn import save_overlay
    pipe, data, _ = _pipeline_and_split(o, None)
    ids = [s for s in str(o["ids"]).split(",") if s]
    index = {rid: i for i, rid in enumerate(data.ids)}
    unknown = [i for i in ids if i not in index]
    if unknown:
        raise CliError(f"unknown record ids: {', '.join(unknown)}")
    started = _now()
    with _Staging(Path(o["out"])) as tmp:
        part = data.subset([index[i] for i in ids])
        heat = pipe.heatmaps(part.images)
        for rid, img, h in zip(part.ids, part.images, heat):
            save_overlay(tmp / f"{rid}_cam.png", img, h)
        write_atomic(tmp / MANIFEST_NAME, _dump(manifest("gradcam", o, _files(tmp), started)))


def _bootstrap_all(rows_a, rows_b, iters, seed) -> list[dict]:
    from .evalsuite import BOOTSTRAP_METRICS, paired_bootstrap
    results = []
    for name, (fn, kind) in BOOTSTRAP_METRICS.items():
        if kind == "mes":
            a, b, refs = [r["mes_pred"] for r in rows_a], [r["mes_pred"] for r in rows_b], [r["mes_true"] for r in rows_a]
        else:
            a, b, refs = [r["caption"] for r in rows_a], [r["caption"] for r in rows_b], [r["reference"] for r in rows_a]
        results.append(paired_bootstrap(fn, a, b, refs, iters, seed, name=name).to_dict())
    return results


def cmd_eval(o: dict) -> None:
    from .evalsuite import evaluate
    from .trainer import load_pipeline
    pipe, part, _ = _pipeline_and_split(o, o["split"])
    if not len(part):
        raise CliError(f"split {o['split']!r} is empty")
    started = _now()
    report, rows = evaluate(pipe, part, o["strategy"])
    boot = []
    if o.get("baseline"):
        base_rows = evaluate(load_pipeline(o["baseline"]), part, o["strategy"])[1]
        boot = _bootstrap_all(rows, base_rows, int(o["iters"]), int(o["seed"]))
    with _Staging(Path(o["out"])) as tmp:
        write_atomic(tmp / "metrics.json", _dump(report.to_dict()))
        write_atomic(tmp / "per_sample.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        write_atomic(tmp / "bootstrap.json", _dump(boot))
        write_atomic(tmp / MANIFEST_NAME, _dump(manifest("eval", o, _files(tmp), started)))
    log.info("mes_accuracy %.3f bleu4 %.3f rouge_l %.3f", report.mes_accuracy, report.bleu4, report.rouge_l)


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [columns] + [[r[c] if isinstance(r[c], str) else f"{r[c]:.4f}" for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_ablation(sets: dict, opts: dict, variants=None, out: Path | None = None, progress=None) -> list[dict]:
    """Train and test each variant with the same seed; one row per variant."""
    from .evalsuite import evaluate
    from .trainer import VARIANT_LABELS, VARIANTS, Trainer
    rows = []
    for v in variants or VARIANTS:
        cfg = _train_config(opts, v, sets["train"].images.shape[-1])
        trainer = Trainer(cfg, sets["train"], sets["val"], progress=progress)
        res = trainer.fit(None if out is None else out / v)
        report, per = evaluate(res.pipeline, sets["test"])
        if out is not None:
            write_atomic(out / v / "metrics.json", _dump(report.to_dict()))
            write_atomic(out / v / "per_sample.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in per))
        rows.append({"variant": v, "label": VARIANT_LABELS[v], "mes_accuracy": report.mes_accuracy,
                     "bleu4": report.bleu4, "rouge_l": report.rouge_l, "_items": per})
    return rows


def cmd_ablate(o: dict) -> None:
    from .trainer import VARIANTS
    data = Path(o["data"])
    sets = _split_sets(data, _load_data(data))
    variants = o.get("variants") or list(VARIANTS)
    if isinstance(variants, str):
        variants = [v for v in variants.split(",") if v]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CliError(f"unknown variants: {', '.join(bad)}")
    started = _now()
    with _Staging(Path(o["out"])) as tmp:
        rows = run_ablation(sets, {**o, "variant": "full"}, variants, tmp, progress=lambda m: log.info(m))
        cols = ["variant", "label", "mes_accuracy", "bleu4", "rouge_l"]
        csv_lines = [",".join(cols)] + [",".join(r[c] if isinstance(r[c], str) else repr(float(r[c])) for c in cols)
                                        for r in rows]
        write_atomic(tmp / "ablation.csv", "\n".join(csv_lines) + "\n")
        write_atomic(tmp / "ablation.txt", format_table(rows, cols))
        write_atomic(tmp / MANIFEST_NAME, _dump(manifest("ablate", o, _files(tmp), started)))
    log.info("\n%s", format_table(rows, ["label", "mes_accuracy", "bleu4", "rouge_l"]))


def _read_jsonl(path: Path) -> list[dict]:
    if not Path(path).is_file():
        raise CliError(f"{path} not found")
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CliError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
    return rows


def _item_value(row: dict, kind: str, path):
    if kind == "mes":
        for key in ("mes_pred", "mes_true", "mes"):
            if key in row:
                return int(row[key])
        if "metadata" in row:
            return int(row["metadata"]["mes"])
    else:
        for key in ("caption",):
            if key in row:
                return row[key]
    raise CliError(f"{path}: record {row.get('id')} has no {kind} field")


def cmd_bootstrap(o: dict) -> None:
    from .evalsuite import BOOTSTRAP_METRICS, paired_bootstrap
    if o["metric"] not in BOOTSTRAP_METRICS:
        raise CliError(f"unknown metric {o['metric']!r}; choose from {sorted(BOOTSTRAP_METRICS)}")
    fn, kind = BOOTSTRAP_METRICS[o["metric"]]
    a = {r["id"]: r for r in _read_jsonl(o["a"])}
    b = {r["id"]: r for r in _read_jsonl(o["b"])}
    refs = [r for r in _read_jsonl(o["refs"]) if r.get("id") in a]
    if set(a) != set(b) or len(refs) != len(a):
        raise CliError("--a, --b and --refs must cover the same ids")
    started = _now()
    ids = [r["id"] for r in refs]
    res = paired_bootstrap(fn, [_item_value(a[i], kind, o["a"]) for i in ids],
                           [_item_value(b[i], kind, o["b"]) for i in ids],
                           [_item_value(r, kind, o["refs"]) for r in refs],
                           int(o["iters"]), int(o["seed"]), name=o["metric"])
    out = Path(o["out"])
    write_atomic(out, _dump(res.to_dict()))
    write_atomic(out.with_name(out.name + ".manifest.json"), _dump(manifest("bootstrap", o, [out.name], started)))
    log.info("%s: delta %.4f p %.4f", res.metric, res.observed_delta, res.p_value)


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "caption": cmd_caption,
            "gradcam": cmd_gradcam, "eval": cmd_eval, "ablate": cmd_ablate, "bootstrap": cmd_bootstrap}


# -- argument parsing ------------------------------------------------------------------------------

def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s}")


def build_parser() -> argparse.ArgumentParser:
    from .trainer import VARIANTS
    p = argparse.ArgumentParser(prog="lesioncap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", type=Path, help="JSON file of option values (or a run manifest)")
        sp.add_argument("-q", "--quiet", action="store_true", help="suppress progress messages")
        return sp

    sp = add("synth", "render a synthetic dataset")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--per-class", dest="per_class", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--noise", type=float)

    sp = add("split", "write a stratified train/val/test split")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ratios", type=float, nargs=3)

    def train_flags(sp):
        sp.add_argument("--data", type=Path)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lr", dest="learning_rate", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)

    sp = add("train", "train one variant")
    train_flags(sp)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--heatmap-cache", dest="heatmap_cache", type=_bool)
    sp.add_argument("--augment", type=_bool)
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    sp = add("caption", "caption a split with a trained checkpoint")
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--split")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--strategy", choices=("greedy", "beam"))
    sp.add_argument("--beam-width", dest="beam_width", type=int)

    sp = add("gradcam", "export Grad-CAM overlays")
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--ids", help="comma-separated record ids")
    sp.add_argument("--out", type=Path)

    sp = add("eval", "score a checkpoint on a split")
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--split")
    sp.add_argument("--strategy", choices=("greedy", "beam"))
    sp.add_argument("--baseline", type=Path, help="second checkpoint to bootstrap against")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("ablate", "train and compare all variants")
    train_flags(sp)
    sp.add_argument("--variants", help="comma-separated subset (default: all six)")

    sp = add("bootstrap", "paired bootstrap between two output files")
    sp.add_argument("--a", type=Path)
    sp.add_argument("--b", type=Path)
    sp.add_argument("--refs", type=Path)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--metric")
    return p


def resolve_options(command: str, flags: dict) -> dict:
    """defaults < config file < flags."""
    opts = dict(DEFAULTS[command])
    cfg_path = flags.pop("config", None)
    if cfg_path is not None:
        try:
            loaded = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError(f"config {cfg_path} must hold a JSON object")
        if "command" in loaded and "config" in loaded:
            if loaded["command"] != command:
                raise CliError(f"manifest is for `{loaded['command']}`, not `{command}`")
            loaded = loaded["config"]
        unknown = set(loaded) - set(opts) - set(REQUIRED[command]) - {"quiet"}
        if unknown:
            raise CliError(f"unknown config keys for {command}: {sorted(unknown)}")
        opts.update(loaded)
    opts.update(flags)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise CliError(f"{command}: missing required option(s) {', '.join('--' + m for m in missing)}")
    opts.pop("quiet", None)
    return opts


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.WARNING if flags.get("quiet") else logging.INFO, force=True)
    try:
        opts = resolve_options(args.command, flags)
        np.seterr(over="ignore", under="ignore")
        COMMANDS[args.command](opts)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
