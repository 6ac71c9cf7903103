import json
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import cv2
import numpy as np
import pandas as pd
import torch
import typer
from dotenv import load_dotenv
from eliot import start_action
from PIL import Image
from pycomfort.logging import to_nice_file, to_nice_stdout
from typing_extensions import Annotated

from zxvad.config import (
    Command,
    RelevancyConfig,
    RunConfig,
    TrainConfig,
    dump_config,
    load_flat_document,
    output_root,
    validate_config,
    validate_model,
)
from zxvad.errors import ConfigError, ManifestError, ZxvadError
from zxvad.ingest import DEFAULT_SIZE, DatasetKind, DatasetManifest, build_manifest, load_frame
from zxvad.relevancy import (
    DEFAULT_HUB_REPO,
    KeyedVectorsProvider,
    LabelSet,
    ToyEmbeddingProvider,
    pairwise_abs_cos,
)
from zxvad.scoring import efficiency_report, evaluate
from zxvad.synthesis import FrozenFeatureExtractor, synthesize
from zxvad.toybench import ToySpec, generate_toy_dataset
from zxvad.training import (
    LOG_FILE,
    RESOLVED_CONFIG,
    configure_determinism,
    load_checkpoint,
    resolve_device,
    resolve_sources,
    train,
)

# Load environment variables
load_dotenv()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
DEFAULT_FPS = 30.0
# click UsageError, whether typer ships its own copy of click or uses the installed one
UsageError = typer.BadParameter.__base__

_stdout_ready = False
_log_dirs: set = set()


def setup_logging(output_dir: Path) -> None:
    """Pretty eliot output on stdout plus JSON and rendered log files in ``output_dir``"""
    global _stdout_ready
    if not _stdout_ready:
        to_nice_stdout()
        _stdout_ready = True
    output_dir = Path(output_dir).resolve()
    if output_dir in _log_dirs:
        return
    output_dir.mkdir(parents=True, exist_ok=True)
    to_nice_file(output_file=output_dir / "zxvad.log.json", rendered_file=output_dir / "zxvad.log")
    _log_dirs.add(output_dir)


def resolve_run(run: RunConfig, extra: Optional[Dict[str, object]] = None) -> TrainConfig:
    overrides = run.overrides()
    overrides.update(extra or {})
    cfg = validate_config(run.config_path, overrides)
    return cfg.model_copy(update={"output_dir": output_root(cfg.output_dir)})


app = typer.Typer(help="zxvad: zero-shot cross-domain video anomaly detection", no_args_is_help=True)

ConfigOption = Annotated[Optional[Path], typer.Option("--config", help="Flat key = value configuration file.")]
SeedOption = Annotated[Optional[int], typer.Option(help="Random seed (overrides the config file).")]
DeterministicOption = Annotated[bool, typer.Option("--deterministic", help="Bit-reproducible mode, single worker.")]
OutputOption = Annotated[Optional[Path], typer.Option("--output", help="Output directory.")]


def _decode_video(path: Path, target: Path, fps: float, size: int) -> int:
    capture = cv2.VideoCapture(str(path))
    if not capture.isOpened():
        raise ConfigError([f"Could not open video container: {path}"])
    source_fps = capture.get(cv2.CAP_PROP_FPS) or fps
    step = max(source_fps / fps, 1.0)
    target.mkdir(parents=True, exist_ok=True)
    written, index, next_keep = 0, 0, 0.0
    try:
        while True:
            ok, frame = capture.read()
            if not ok:
                break
            if index >= next_keep - 1e-9:
                rgb = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
                rgb = cv2.resize(rgb, (size, size), interpolation=cv2.INTER_AREA)
                Image.fromarray(rgb).save(target / f"{written:06d}.png")
                written += 1
                next_keep += step
            index += 1
    finally:
        capture.release()
    return written


@app.command("preprocess")
def preprocess_command(
    output: OutputOption = None,
    frames: Annotated[Optional[Path], typer.Option(help="Root of per-video frame directories to index.")] = None,
    videos: Annotated[Optional[Path], typer.Option(help="Directory of video files to decode into frames.")] = None,
    toy: Annotated[Optional[str], typer.Option(help="Toy spec file, or 'default' for the built-in spec.")] = None,
    kind: Annotated[DatasetKind, typer.Option(help="Dataset kind of --frames / --videos.")] = DatasetKind.VAD_TRAIN,
    fps: Annotated[float, typer.Option(help="Target frame rate when decoding videos.")] = DEFAULT_FPS,
    size: Annotated[int, typer.Option(help="Frame size after decoding.")] = DEFAULT_SIZE,
    seed: SeedOption = None,
):
    """Build dataset manifests from frame directories, video files or the toy generator."""
    chosen = [option for option in (frames, videos, toy) if option is not None]
    if len(chosen) != 1:
        raise typer.BadParameter("give exactly one of --frames, --videos or --toy")
    output = output_root(output or Path("data/zxvad"))
    setup_logging(output)
    with start_action(action_type="cli:preprocess", output=str(output)):
        if toy is not None:
            values = {} if toy == "default" else load_flat_document(toy)
            if seed is not None:
                values["seed"] = seed
            spec = validate_model(ToySpec, values)
            dump_config(spec, output / "toy.resolved.cfg")
            corpus = generate_toy_dataset(spec, output)
            typer.echo(f"train manifest: {corpus.train}\ntest manifest: {corpus.test}\nti manifest: {corpus.ti}")
            return
        root = frames
        if videos is not None:
            root = output / "frames"
            for video in sorted(p for p in videos.iterdir() if p.is_file()):
                _decode_video(video, root / video.stem, fps, size)
        manifest = build_manifest(root, kind)
        path = manifest.save(output / f"{kind.value}.manifest.json")
        typer.echo(f"{len(manifest.videos)} videos, {manifest.total_frames} frames: {path}")


@app.command("train")
def train_command(
    config: ConfigOption = None,
    seed: SeedOption = None,
    deterministic: DeterministicOption = False,
    output: OutputOption = None,
    resume: Annotated[Optional[Path], typer.Option(help="Checkpoint to resume from.")] = None,
):
    """Train the generator, discriminator and normalcy classifier."""
    run = RunConfig(command=Command.TRAIN, config_path=config, seed=seed, deterministic=deterministic,
                    output_dir=output)
    cfg = resolve_run(run, {"resume_from": resume} if resume is not None else None)
    setup_logging(cfg.output_dir)
    checkpoint = train(cfg)
    typer.echo(f"checkpoint: {checkpoint}")


@app.command("eval")
def eval_command(
    checkpoint: Annotated[Path, typer.Option(help="Trained checkpoint.")],
    data: Annotated[Path, typer.Option(help="VAD-test manifest.")],
    output: OutputOption = None,
    plots: Annotated[bool, typer.Option("--plots", help="Save anomaly curves and the ROC curve.")] = False,
    difference_maps: Annotated[int, typer.Option(help="Difference maps for the k top-scoring frames per video.")] = 0,
    fps_passes: Annotated[int, typer.Option(help="Timed forward passes for FPS (0 skips timing).")] = 100,
    deterministic: DeterministicOption = False,
):
    """Score a labelled test set: per-video CSVs, summary JSON with AUC and efficiency."""
    output = output_root(output or Path("runs/zxvad/eval"))
    setup_logging(output)
    if deterministic:
        configure_determinism(True)
    manifest = DatasetManifest.load(data)
    summary = evaluate(checkpoint, manifest, output, plots=plots, difference_maps=difference_maps,
                       fps_passes=fps_passes)
    typer.echo(f"AUC: {summary['auc']}")


@app.command("synth")
def synth_command(
    config: ConfigOption = None,
    seed: SeedOption = None,
    output: OutputOption = None,
    count: Annotated[int, typer.Option(help="Number of pseudo-anomalies to write.")] = 8,
):
    """Write pseudo-abnormal frames, their masks and provenance records for inspection."""
    run = RunConfig(command=Command.SYNTH, config_path=config, seed=seed, output_dir=output)
    cfg = resolve_run(run)
    out = Path(cfg.output_dir) / "synth"
    setup_logging(out)
    dump_config(cfg, out / RESOLVED_CONFIG)
    bases, donors = resolve_sources(cfg)
    if not bases.videos or not donors.videos:
        raise ConfigError(["synth needs at least one base video and one donor video"])
    extractor = FrozenFeatureExtractor.from_config(cfg.synthesis_config)
    rng = np.random.default_rng([cfg.seed, 0])
    with start_action(action_type="cli:synth", count=count, output=str(out)):
        for i in range(count):
            base_video = bases.videos[int(rng.integers(len(bases.videos)))]
            donor_video = donors.videos[int(rng.integers(len(donors.videos)))]
            base = load_frame(base_video, int(rng.integers(base_video.frame_count)), cfg.image_size)
            donor = load_frame(donor_video, int(rng.integers(donor_video.frame_count)), cfg.image_size)
            syn = cfg.synthesis_config
            anomaly = synthesize(base, donor, extractor, syn.threshold, rng, syn.mixing, syn.max_resample,
                                 syn.normalize_attention, seed=cfg.seed)
            pixels = ((anomaly.frame + 1) * 127.5).round().clamp(0, 255).to(torch.uint8)
            Image.fromarray(pixels.permute(1, 2, 0).numpy()).save(out / f"pseudo_{i:04d}.png")
            Image.fromarray((anomaly.mask.numpy() * 255).astype(np.uint8)).save(out / f"mask_{i:04d}.png")
            (out / f"pseudo_{i:04d}.json").write_text(anomaly.provenance.model_dump_json(indent=2), encoding="utf-8")
    typer.echo(f"{count} pseudo-anomalies in {out}")


@app.command("relevancy")
def relevancy_command(
    labels_p: Annotated[Path, typer.Option(help="Label file of the first set (one label per line).")],
    labels_q: Annotated[Path, typer.Option(help="Label file of the second set.")],
    embeddings: Annotated[Optional[Path], typer.Option(help="word2vec / gensim embeddings file.")] = None,
    hub_repo: Annotated[Optional[str], typer.Option(
        help=f"Hugging Face repo with gensim vectors, e.g. {DEFAULT_HUB_REPO}.")] = None,
    output: OutputOption = None,
):
    """Mean absolute cosine similarity between two label sets, plus the pairwise matrix."""
    output = output_root(output or Path("runs/zxvad/relevancy"))
    setup_logging(output)
    if embeddings is not None:
        provider = KeyedVectorsProvider.from_file(embeddings)
    elif hub_repo is not None:
        provider = KeyedVectorsProvider.from_hub(hub_repo)
    else:
        provider = ToyEmbeddingProvider()
    p, q = LabelSet.from_file(labels_p), LabelSet.from_file(labels_q)
    dump_config(RelevancyConfig(labels_p=labels_p, labels_q=labels_q, embeddings=embeddings, hub_repo=hub_repo,
                                provider=provider.source_id, output_dir=output), output / RESOLVED_CONFIG)
    with start_action(action_type="cli:relevancy", provider=provider.source_id) as action:
        matrix = pairwise_abs_cos(p, q, provider)
        s_bar = float(matrix.to_numpy().mean())
        action.add_success_fields(mean_abs_cos_sim=s_bar)
    output.mkdir(parents=True, exist_ok=True)
    matrix.to_csv(output / "pairwise.csv")
    (output / "relevancy.json").write_text(json.dumps({
        "mean_abs_cos_sim": s_bar,
        "provider": provider.source_id,
        "labels_p": p.count,
        "labels_q": q.count,
    }, indent=2), encoding="utf-8")
    typer.echo(f"S_bar = {s_bar:.4f}")


@app.command("report")
def report_command(
    checkpoint: Annotated[Path, typer.Option(help="Trained checkpoint.")],
    output: OutputOption = None,
    fps_passes: Annotated[int, typer.Option(help="Timed forward passes for FPS (0 skips timing).")] = 100,
):
    """Efficiency figures of a checkpoint and a digest of its training log."""
    output = output_root(output or Path("runs/zxvad/report"))
    setup_logging(output)
    state, cfg = load_checkpoint(checkpoint, resolve_device("auto"))
    dump_config(cfg, output / RESOLVED_CONFIG)
    input_shape = (cfg.network_config.channels, cfg.image_size, cfg.image_size)
    report: Dict[str, object] = {
        "iteration": state.iteration,
        "efficiency": efficiency_report(state.generator, input_shape, fps_passes).model_dump(),
    }
    log_path = checkpoint.parent.parent / LOG_FILE
    if log_path.is_file():
        log = pd.read_csv(log_path)
        report["final_losses"] = log.iloc[-1].to_dict()
        report["min_L_MSE"] = float(log["L_MSE"].min())
    (output / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    typer.echo(json.dumps(report["efficiency"]))


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one sub-command and map failures onto exit codes (usage 2, config or manifest 3, runtime 1)"""
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        result = app(args=args, prog_name="zxvad", standalone_mode=False)
    except UsageError as e:
        e.show()
        return EXIT_USAGE
    except typer.Exit as e:
        return e.exit_code
    except typer.Abort:
        return EXIT_RUNTIME
    except (ConfigError, ManifestError) as e:
        typer.echo(f"config error: {e}", err=True)
        return EXIT_CONFIG
    except ZxvadError as e:
        typer.echo(f"error: {e}", err=True)
        return EXIT_RUNTIME
    except Exception as e:
        typer.echo(f"unexpected error: {type(e).__name__}: {e}", err=True)
        return EXIT_RUNTIME
    return result if isinstance(result, int) else EXIT_OK


def main() -> None:
    sys.exit(dispatch())


def train_main() -> None:
    """Entry point for zxvad-train (used by pyproject.toml)"""
    sys.exit(dispatch(["train", *sys.argv[1:]]))


def eval_main() -> None:
    """Entry point for zxvad-eval (used by pyproject.toml)"""
    sys.exit(dispatch(["eval", *sys.argv[1:]]))


if __name__ == "__main__":
    main()
