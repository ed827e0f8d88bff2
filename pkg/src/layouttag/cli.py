"""Command-line surface for corpus generation, training, evaluation, and the
two experiment protocols.

Every command writes its artifacts plus a single ``manifest.json`` into a
fresh output directory. The manifest embeds the fully resolved configuration,
seeds, and the corpus hash, so ``layouttag rerun MANIFEST --out DIR``
reproduces the primary outputs byte for byte (wall-clock fields aside).

Exit codes: 0 success, 2 usage error, 3 training failure, 4 compatibility
failure (hash or version mismatch), 1 any other pipeline error. The
``LAYOUTTAG_OUT`` environment variable sets the default output root.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict
from pathlib import Path
from typing import get_type_hints

import click

from .corpus import (
    CorpusFormatError,
    GenerationError,
    GeneratorSpec,
    corpus_hash,
    generate_corpus,
    load_corpus,
    save_corpus,
)
from .experiments import ablation_experiment, learning_curve_experiment
from .ingest import Vocab, build_vocab
from .labels import LabelClass
from .metrics import MetricsError, evaluate
from .model import (
    MODALITY_MODES,
    CheckpointError,
    LayoutModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .train import TrainConfig, TrainError, split_corpus, train_model

MANIFEST_VERSION = "layouttag-manifest/1"
MANIFEST_NAME = "manifest.json"
_MODE_CHOICES = (*MODALITY_MODES, "no_image_no_layout")
_PIPELINE_ERRORS = (
    GenerationError,
    CorpusFormatError,
    CheckpointError,
    MetricsError,
    ValueError,
    OSError,
)


class PipelineFailure(click.ClickException):
    exit_code = 1


class TrainingFailure(click.ClickException):
    exit_code = 3


class CompatibilityFailure(click.ClickException):
    exit_code = 4


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------


def _parse_kv_file(path: Path) -> dict[str, str]:
    data: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise click.UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = key.strip(), value.strip()
        if key in data:
            raise click.UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        data[key] = value
    return data


def _coerce(value: str, target_type, key: str, path: Path):
    try:
        return target_type(value)
    except ValueError:
        raise click.UsageError(
            f"{path}: key {key!r} expects {target_type.__name__}, got {value!r}"
        ) from None


def _load_generator_spec(path: Path | None) -> GeneratorSpec:
    if path is None:
        return GeneratorSpec()
    hints = get_type_hints(GeneratorSpec)
    kwargs = {}
    for key, value in _parse_kv_file(path).items():
        if key not in hints:
            raise click.UsageError(f"{path}: unknown generator key {key!r}")
        kwargs[key] = _coerce(value, hints[key], key, path)
    try:
        spec = GeneratorSpec(**kwargs)
        spec.validate()
    except GenerationError as e:
        raise click.UsageError(str(e)) from None
    return spec


_PROTOCOL_DEFAULTS = {"validation_fraction": 0.3, "split_seed": 0, "subsample_seed": 0}


def _load_training_config(path: Path | None):
    """Split one flat file into (ModelConfig, TrainConfig, protocol dict)."""
    model_hints = get_type_hints(ModelConfig)
    train_hints = get_type_hints(TrainConfig)
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    protocol = dict(_PROTOCOL_DEFAULTS)
    for key, value in (_parse_kv_file(path) if path else {}).items():
        if key == "vocab_size":
            raise click.UsageError(
                f"{path}: vocab_size is derived from the training corpus"
            )
        if key in model_hints:
            model_kwargs[key] = _coerce(value, model_hints[key], key, path)
        elif key in train_hints:
            train_kwargs[key] = _coerce(value, train_hints[key], key, path)
        elif key in protocol:
            protocol[key] = _coerce(value, type(protocol[key]), key, path)
        else:
            raise click.UsageError(f"{path}: unknown config key {key!r}")
    try:
        model_config = ModelConfig(vocab_size=4, **model_kwargs)
        train_config = TrainConfig(**train_kwargs)
    except ValueError as e:
        raise click.UsageError(str(e)) from None
    return model_config, train_config, protocol


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _prepare_out(out: str | None, command: str) -> Path:
    if out is None:
        root = os.environ.get("LAYOUTTAG_OUT", "runs")
        out = Path(root) / command
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if (out / MANIFEST_NAME).exists():
        raise PipelineFailure(
            f"{out} already contains a manifest; choose a fresh output directory"
        )
    return out


def _write_manifest(out: Path, command: str, options: dict, config: dict,
                    seeds: dict, corpus_digest: str | None, artifacts: dict,
                    duration: float) -> None:
    payload = {
        "version": MANIFEST_VERSION,
        "command": command,
        "options": options,
        "config": config,
        "seeds": seeds,
        "corpus_hash": corpus_digest,
        "artifacts": artifacts,
        "duration_seconds": round(duration, 3),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_corpus_checked(corpus_dir: str, expected_hash: str | None = None):
    corpus = load_corpus(corpus_dir)
    if expected_hash is not None:
        digest = corpus_hash(corpus.pages)
        if digest != expected_hash:
            raise CompatibilityFailure(
                f"corpus at {corpus_dir} has hash {digest[:12]}..., manifest "
                f"recorded {expected_hash[:12]}..."
            )
    return corpus


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _history_csv(history) -> str:
    lines = ["epoch,train_loss,macro_f1,accuracy"]
    for row in history.csv_rows():
        lines.append(",".join(_csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def _echo_progress(message: str) -> None:
    click.echo(message, err=True)


# ---------------------------------------------------------------------------
# command bodies (shared between the flag surface and `rerun`)
# ---------------------------------------------------------------------------


def _run_gen(pages: int, seed: int, spec: GeneratorSpec, out: Path) -> None:
    started = time.perf_counter()
    corpus = generate_corpus(pages, seed, spec)
    path = save_corpus(corpus, out)
    digest = corpus_hash(corpus.pages)
    _write_manifest(
        out,
        command="gen",
        options={"pages": pages, "seed": seed},
        config={"generator": asdict(spec)},
        seeds={"seed": seed},
        corpus_digest=digest,
        artifacts={"corpus": path.name, "pages_dir": "pages"},
        duration=time.perf_counter() - started,
    )
    click.echo(f"wrote {pages} pages to {out} (corpus hash {digest[:12]}...)")


def _run_train(corpus_dir: str, model_config: ModelConfig, train_config: TrainConfig,
               protocol: dict, mode: str, out: Path,
               expected_hash: str | None = None) -> None:
    started = time.perf_counter()
    corpus = _load_corpus_checked(corpus_dir, expected_hash)
    digest = corpus_hash(corpus.pages)
    train_split, val_split = split_corpus(
        corpus, protocol["validation_fraction"], seed=protocol["split_seed"]
    )
    try:
        model, vocab, history = train_model(
            train_split, val_split, model_config, train_config, mode, log=_echo_progress
        )
    except TrainError as e:
        raise TrainingFailure(str(e)) from None
    checkpoint_meta = {
        "vocab_hash": vocab.hash(),
        "modality_mode": mode,
        "corpus_hash": digest,
        "train_config": asdict(train_config),
        "protocol": protocol,
    }
    save_checkpoint(out / "checkpoint.npz", model.config, model.params, checkpoint_meta)
    (out / "vocab.json").write_text(
        json.dumps({"words": vocab.id_to_token[4:]}, indent=0) + "\n"
    )
    (out / "history.csv").write_text(_history_csv(history))
    _write_manifest(
        out,
        command="train",
        options={"corpus": str(Path(corpus_dir).resolve()), "mode": mode},
        config={
            "model": {k: v for k, v in asdict(model_config).items() if k != "vocab_size"},
            "train": asdict(train_config),
            "protocol": protocol,
        },
        seeds={"train_seed": train_config.seed, "split_seed": protocol["split_seed"]},
        corpus_digest=digest,
        artifacts={"checkpoint": "checkpoint.npz", "vocab": "vocab.json",
                   "history": "history.csv"},
        duration=time.perf_counter() - started,
    )
    final = history.final_metrics()
    click.echo(f"final validation macro-F1 {final.macro_f1:.4f} -> {out}")


def _load_model_and_vocab(checkpoint_path: str):
    config, params, meta = load_checkpoint(checkpoint_path)
    vocab_path = Path(checkpoint_path).parent / "vocab.json"
    if not vocab_path.exists():
        raise CompatibilityFailure(f"no vocab.json next to {checkpoint_path}")
    try:
        words = json.loads(vocab_path.read_text())["words"]
    except (json.JSONDecodeError, KeyError) as e:
        raise CompatibilityFailure(f"{vocab_path}: malformed vocabulary file: {e}") from None
    vocab = Vocab(words)
    recorded = meta.get("vocab_hash")
    if recorded is not None and vocab.hash() != recorded:
        raise CompatibilityFailure(
            f"{vocab_path} does not match the vocabulary this checkpoint was "
            f"trained with (hash {vocab.hash()[:12]}... != {recorded[:12]}...)"
        )
    if len(vocab) != config.vocab_size:
        raise CompatibilityFailure(
            f"vocabulary size {len(vocab)} != checkpoint vocab_size {config.vocab_size}"
        )
    return LayoutModel(config, params), vocab, meta


def _run_eval(checkpoint_path: str, corpus_dir: str, split: str, out: Path,
              expected_hash: str | None = None) -> None:
    started = time.perf_counter()
    model, vocab, meta = _load_model_and_vocab(checkpoint_path)
    corpus = _load_corpus_checked(corpus_dir, expected_hash)
    digest = corpus_hash(corpus.pages)
    protocol = meta.get("protocol", dict(_PROTOCOL_DEFAULTS))
    if split == "all":
        subset = corpus
    else:
        train_split, val_split = split_corpus(
            corpus, protocol["validation_fraction"], seed=protocol["split_seed"]
        )
        subset = val_split if split == "validation" else train_split
    mode = meta.get("modality_mode", "full")
    report = evaluate(model, vocab, subset, mode)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "table.txt").write_text(report.table() + "\n")
    _write_manifest(
        out,
        command="eval",
        options={"checkpoint": str(Path(checkpoint_path).resolve()),
                 "corpus": str(Path(corpus_dir).resolve()), "split": split},
        config={"modality_mode": mode, "protocol": protocol},
        seeds={"split_seed": protocol["split_seed"]},
        corpus_digest=digest,
        artifacts={"metrics": "metrics.json", "table": "table.txt"},
        duration=time.perf_counter() - started,
    )
    click.echo(report.table())


def _run_ablate(corpus_dir: str, modes: tuple[str, ...], model_config: ModelConfig,
                train_config: TrainConfig, protocol: dict, out: Path,
                expected_hash: str | None = None) -> None:
    started = time.perf_counter()
    corpus = _load_corpus_checked(corpus_dir, expected_hash)
    try:
        result = ablation_experiment(
            corpus, modes, model_config, train_config,
            validation_fraction=protocol["validation_fraction"],
            split_seed=protocol["split_seed"], log=_echo_progress,
        )
    except TrainError as e:
        raise TrainingFailure(str(e)) from None
    (out / "ablation.csv").write_text(result.to_csv())
    _write_manifest(
        out,
        command="ablate",
        options={"corpus": str(Path(corpus_dir).resolve()), "modes": list(result.modes)},
        config={
            "model": {k: v for k, v in asdict(model_config).items() if k != "vocab_size"},
            "train": asdict(train_config),
            "protocol": protocol,
        },
        seeds={"train_seed": train_config.seed, "split_seed": protocol["split_seed"]},
        corpus_digest=corpus_hash(corpus.pages),
        artifacts={"ablation": "ablation.csv"},
        duration=time.perf_counter() - started,
    )
    click.echo((out / "ablation.csv").read_text().rstrip("\n"))


def _run_curve(corpus_dir: str, fractions: tuple[float, ...], model_config: ModelConfig,
               train_config: TrainConfig, protocol: dict, out: Path,
               expected_hash: str | None = None) -> None:
    started = time.perf_counter()
    corpus = _load_corpus_checked(corpus_dir, expected_hash)
    try:
        result = learning_curve_experiment(
            corpus, fractions, model_config, train_config,
            validation_fraction=protocol["validation_fraction"],
            split_seed=protocol["split_seed"],
            subsample_seed=protocol["subsample_seed"], log=_echo_progress,
        )
    except TrainError as e:
        raise TrainingFailure(str(e)) from None
    (out / "curve.csv").write_text(result.to_csv())
    _write_manifest(
        out,
        command="curve",
        options={"corpus": str(Path(corpus_dir).resolve()), "fractions": list(fractions)},
        config={
            "model": {k: v for k, v in asdict(model_config).items() if k != "vocab_size"},
            "train": asdict(train_config),
            "protocol": protocol,
        },
        seeds={"train_seed": train_config.seed, "split_seed": protocol["split_seed"],
               "subsample_seed": protocol["subsample_seed"]},
        corpus_digest=corpus_hash(corpus.pages),
        artifacts={"curve": "curve.csv"},
        duration=time.perf_counter() - started,
    )
    click.echo((out / "curve.csv").read_text().rstrip("\n"))


# ---------------------------------------------------------------------------
# click surface
# ---------------------------------------------------------------------------


@click.group()
@click.version_option(package_name="layouttag")
def main():
    """Synthetic register corpora, multimodal token classifiers, experiments."""


def _out_option():
    return click.option(
        "--out", type=click.Path(file_okay=False), default=None,
        help="Output directory (default: $LAYOUTTAG_OUT/<command>).",
    )


@main.command()
@click.option("--pages", type=int, required=True, help="Number of pages to generate.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--spec", "spec_file", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Flat key=value generator spec file.")
@_out_option()
def gen(pages, seed, spec_file, out):
    """Generate a synthetic register corpus."""
    if pages < 1:
        raise click.BadParameter("must be >= 1", param_hint="--pages")
    spec = _load_generator_spec(Path(spec_file) if spec_file else None)
    out = _prepare_out(out, "gen")
    try:
        _run_gen(pages, seed, spec, out)
    except _PIPELINE_ERRORS as e:
        raise PipelineFailure(str(e)) from None


@main.command()
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Corpus directory written by `gen`.")
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Flat key=value model/training config file.")
@click.option("--mode", type=click.Choice(_MODE_CHOICES), default="full",
              show_default=True, help="Modality mask applied during training.")
@_out_option()
def train(corpus_dir, config_file, mode, out):
    """Fine-tune a classifier on a 70/30 page-level split of the corpus."""
    model_config, train_config, protocol = _load_training_config(
        Path(config_file) if config_file else None
    )
    mode = "text_only" if mode == "no_image_no_layout" else mode
    out = _prepare_out(out, "train")
    try:
        _run_train(corpus_dir, model_config, train_config, protocol, mode, out)
    except _PIPELINE_ERRORS as e:
        raise PipelineFailure(str(e)) from None


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path",
              type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--split", type=click.Choice(("validation", "train", "all")),
              default="validation", show_default=True,
              help="Which side of the checkpoint's recorded split to score.")
@_out_option()
def eval_cmd(checkpoint_path, corpus_dir, split, out):
    """Score a saved checkpoint and print the per-class table."""
    out = _prepare_out(out, "eval")
    try:
        _run_eval(checkpoint_path, corpus_dir, split, out)
    except _PIPELINE_ERRORS as e:
        raise PipelineFailure(str(e)) from None


def _parse_modes(_ctx, _param, value: str) -> tuple[str, ...]:
    modes = tuple(m.strip() for m in value.split(",") if m.strip())
    if not modes:
        raise click.BadParameter("expected a comma-separated list of modes")
    for mode in modes:
        if mode not in _MODE_CHOICES:
            raise click.BadParameter(f"unknown mode {mode!r}; choose from {_MODE_CHOICES}")
    if len(set(modes)) != len(modes):
        raise click.BadParameter("duplicate modes")
    return modes


def _parse_fractions(_ctx, _param, value: str) -> tuple[float, ...]:
    try:
        fractions = tuple(float(f) for f in value.split(",") if f.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from None
    if not fractions:
        raise click.BadParameter("expected at least one fraction")
    if any(not 0 < f <= 1 for f in fractions):
        raise click.BadParameter("fractions must lie in (0, 1]")
    if list(fractions) != sorted(set(fractions)):
        raise click.BadParameter("fractions must be strictly ascending")
    return fractions


@main.command()
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--modes", default="full,no_image,text_only", show_default=True,
              callback=_parse_modes, help="Comma-separated modality modes.")
@_out_option()
def ablate(corpus_dir, config_file, modes, out):
    """Train one arm per modality mode on an identical split and seed."""
    model_config, train_config, protocol = _load_training_config(
        Path(config_file) if config_file else None
    )
    out = _prepare_out(out, "ablate")
    try:
        _run_ablate(corpus_dir, modes, model_config, train_config, protocol, out)
    except _PIPELINE_ERRORS as e:
        raise PipelineFailure(str(e)) from None


@main.command()
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False),
              required=True)
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--fractions", default="0.1,0.2,0.3,0.5,0.75,1.0", show_default=True,
              callback=_parse_fractions,
              help="Comma-separated ascending training-set fractions.")
@_out_option()
def curve(corpus_dir, config_file, fractions, out):
    """Sweep the training-set size against one fixed validation split."""
    model_config, train_config, protocol = _load_training_config(
        Path(config_file) if config_file else None
    )
    out = _prepare_out(out, "curve")
    try:
        _run_curve(corpus_dir, fractions, model_config, train_config, protocol, out)
    except _PIPELINE_ERRORS as e:
        raise PipelineFailure(str(e)) from None


@main.command()
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False))
@_out_option()
def rerun(manifest_path, out):
    """Re-execute a previous run from its manifest, byte-identically."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except json.JSONDecodeError as e:
        raise PipelineFailure(f"{manifest_path}: not valid JSON: {e}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise CompatibilityFailure(
            f"{manifest_path}: manifest version {manifest.get('version')!r} "
            f"(this tool supports {MANIFEST_VERSION!r})"
        )
    command = manifest.get("command")
    options = manifest.get("options", {})
    config = manifest.get("config", {})
    recorded_hash = manifest.get("corpus_hash")
    out = _prepare_out(out, f"rerun-{command}")
    try:
        if command == "gen":
            _run_gen(options["pages"], options["seed"],
                     GeneratorSpec(**config["generator"]), out)
        elif command in ("train", "ablate", "curve"):
            model_config = ModelConfig(vocab_size=4, **config["model"])
            train_config = TrainConfig(**config["train"])
            protocol = config["protocol"]
            if command == "train":
                _run_train(options["corpus"], model_config, train_config, protocol,
                           options["mode"], out, expected_hash=recorded_hash)
            elif command == "ablate":
                _run_ablate(options["corpus"], tuple(options["modes"]), model_config,
                            train_config, protocol, out, expected_hash=recorded_hash)
            else:
                _run_curve(options["corpus"], tuple(options["fractions"]), model_config,
                           train_config, protocol, out, expected_hash=recorded_hash)
        elif command == "eval":
            _run_eval(options["checkpoint"], options["corpus"], options["split"], out,
                      expected_hash=recorded_hash)
        else:
            raise CompatibilityFailure(f"{manifest_path}: unknown command {command!r}")
    except KeyError as e:
        raise CompatibilityFailure(f"{manifest_path}: missing manifest field {e}") from None
    except _PIPELINE_ERRORS as e:
        raise PipelineFailure(str(e)) from None


if __name__ == "__main__":
    main()
