"""Operator entry point (``vip``): synth, ingest, baseline, train, eval,
predict, explain, gradcheck."""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import ModelConfig, TrainConfig, config_fingerprint, default_seed
from .cues import ConfigurationError
from .data_model import ClipFormatError, ClipValidationError, load_npz_pair, save_clip
from .evaluation import evaluate, heuristic_baseline, write_overlays, write_report
from .inference import explain as explain_clip
from .inference import predict as predict_clip
from .model import VIPNet, featurize
from .rationale import GUIDANCE_MODES, HttpRefinementClient, MockRefinementClient
from .scene_synth import (PROFILES, ScenarioSpecError, make_corpus, read_corpus,
                          write_corpus)
from .training import (DataError, TrainingError, grad_check, load_checkpoint,
                       save_checkpoint, train)

_USER_ERRORS = (ScenarioSpecError, ClipValidationError, ClipFormatError,
                ConfigurationError, DataError, ValueError, FileNotFoundError)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except _USER_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except TrainingError as exc:
            click.echo(f"training error: {exc}", err=True)
            sys.exit(2)
        except Exception as exc:  # internal failure
            click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(2)
    return wrapper


def _merge_config(cls, config_file, overrides: dict):
    """Precedence: flags > config file > dataclass defaults."""
    values = {}
    if config_file:
        file_cfg = json.loads(Path(config_file).read_text(encoding="utf-8"))
        fields = {f.name for f in dataclasses.fields(cls)}
        values.update({k: v for k, v in file_cfg.items() if k in fields})
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def _emit_fingerprint(*configs):
    fp = config_fingerprint(*configs)
    click.echo(f"config fingerprint: {fp}")
    return fp


def _dump_effective(outdir: Path, name: str, *configs):
    outdir.mkdir(parents=True, exist_ok=True)
    payload = [dataclasses.asdict(c) if dataclasses.is_dataclass(c) else c for c in configs]
    (outdir / name).write_text(json.dumps(payload, indent=2, sort_keys=True),
                               encoding="utf-8")


@click.group()
def main():
    """Video important-person ranking pipeline."""


@main.command()
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", "outdir", type=click.Path(), required=True)
@click.option("--profile", type=click.Choice(PROFILES), default="mixed")
@click.option("--split", "split_ratios", default="0.6,0.2,0.2", show_default=True)
@click.option("--jobs", type=int, default=1, help="worker cap (generation is cheap; kept serial)")
@_guarded
def synth(count, seed, outdir, profile, split_ratios, jobs):
    """Generate a synthetic corpus with oracle labels."""
    seed = default_seed() if seed is None else seed
    ratios = tuple(float(x) for x in split_ratios.split(","))
    cfg = {"count": count, "seed": seed, "profile": profile, "split": list(ratios)}
    _emit_fingerprint(cfg)
    items = make_corpus(count, ratios, seed=seed, profile=profile)
    write_corpus(items, outdir)
    _dump_effective(Path(outdir), "synth_config.json", cfg)
    click.echo(f"wrote {len(items)} clips to {outdir}")


@main.command()
@click.option("--npz", "npz_path", type=click.Path(exists=True), required=True)
@click.option("--json", "json_path", type=click.Path(exists=True), required=True)
@click.option("--out", "outdir", type=click.Path(), required=True)
@_guarded
def ingest(npz_path, json_path, outdir):
    """Convert a dataset npz+json pair into the canonical clip format."""
    _emit_fingerprint({"npz": str(npz_path), "json": str(json_path)})
    clip = load_npz_pair(npz_path, json_path)
    save_clip(clip, Path(outdir) / clip.clip_id)
    click.echo(f"ingested clip {clip.clip_id} ({len(clip.persons)} persons)")


@main.command()
@click.option("--cue", type=click.Choice(["centrality", "area", "clarity"]), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--split", default=None)
@click.option("--out", "outdir", type=click.Path(), default=None)
@_guarded
def baseline(cue, corpus_dir, split, outdir):
    """Evaluate a parameter-free heuristic baseline on a corpus."""
    cfg = {"cue": cue, "corpus": str(corpus_dir), "split": split}
    fp = _emit_fingerprint(cfg)
    corpus = read_corpus(corpus_dir)
    report = evaluate(lambda clip: heuristic_baseline(clip, cue), corpus,
                      split=split, fingerprint=fp)
    click.echo(f"rank1={report.rank1:.4f} rank2={report.rank2:.4f} rank3={report.rank3:.4f}")
    if outdir:
        write_report(report, outdir)
        _dump_effective(Path(outdir), "baseline_config.json", cfg)


def _train_options(fn):
    opts = [
        click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True),
        click.option("--out", "outdir", type=click.Path(), required=True),
        click.option("--config", "config_file", type=click.Path(exists=True), default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--lr", "base_lr", type=float, default=None),
        click.option("--weight-decay", type=float, default=None),
        click.option("--warmup-epochs", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--lambda-text", type=float, default=None),
        click.option("--lambda-cont", type=float, default=None),
        click.option("--lambda-reg", type=float, default=None),
        click.option("--dim", type=int, default=None),
        click.option("--fusion", type=click.Choice(["transformer", "mlp", "gated", "none"]),
                     default=None),
        click.option("--action-provider", type=click.Choice(["motion_energy", "conv3d"]),
                     default=None),
        click.option("--sweep-cont", default=None,
                     help="comma list of lambda_cont values; trains one model per value"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@main.command(name="train")
@_train_options
@_guarded
def train_cmd(corpus_dir, outdir, config_file, sweep_cont, dim, fusion,
              action_provider, **overrides):
    """Train a model on a corpus (train split; val split for monitoring)."""
    train_cfg = _merge_config(TrainConfig, config_file, overrides)
    model_overrides = {"seed": train_cfg.seed, "dim": dim, "fusion": fusion,
                       "action_provider": action_provider}
    model_cfg = _merge_config(ModelConfig, config_file,
                              {k: v for k, v in model_overrides.items() if v is not None})
    outdir = Path(outdir)

    corpus = read_corpus(corpus_dir)
    train_clips = [c for c, _ in corpus if c.split == "train"]
    val_clips = [c for c, _ in corpus if c.split == "val"]

    sweep = ([float(x) for x in sweep_cont.split(",")] if sweep_cont
             else [train_cfg.lambda_cont])
    rows = []
    for lam in sweep:
        cfg = dataclasses.replace(train_cfg, lambda_cont=lam)
        fp = _emit_fingerprint(model_cfg, cfg)
        run_dir = outdir if len(sweep) == 1 else outdir / f"lambda_cont_{lam:g}"
        run_dir.mkdir(parents=True, exist_ok=True)
        _dump_effective(run_dir, "train_config.json", model_cfg, cfg)
        log_path = run_dir / "metrics.jsonl"
        log_path.write_text("", encoding="utf-8")
        model, metrics = train(train_clips, cfg, model_config=model_cfg,
                               val_corpus=val_clips, log_path=log_path)
        save_checkpoint(model, cfg, run_dir / "checkpoint")
        last = metrics[-1]
        rows.append({"lambda_cont": lam, "final_loss": last["loss"]["total"],
                     "val_rank1": last.get("val_rank1"), "fingerprint": fp})
        click.echo(f"lambda_cont={lam:g}: final loss {last['loss']['total']:.4f}"
                   + (f", val rank1 {last['val_rank1']:.4f}" if "val_rank1" in last else ""))
    if len(sweep) > 1:
        (outdir / "sweep_report.json").write_text(
            json.dumps(rows, indent=2, sort_keys=True), encoding="utf-8")
        click.echo(f"sweep report: {outdir / 'sweep_report.json'}")


@main.command(name="eval")
@click.option("--checkpoint", "ckpt_dir", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--split", default="test", show_default=True)
@click.option("--out", "outdir", type=click.Path(), required=True)
@click.option("--baselines/--no-baselines", default=True, show_default=True)
@click.option("--overlays", is_flag=True, help="write annotated frames when pixels exist")
@click.option("--descriptions", "mode", type=click.Choice(GUIDANCE_MODES), default=None,
              help="also score rationale quality in this guidance mode")
@_guarded
def eval_cmd(ckpt_dir, corpus_dir, split, outdir, baselines, overlays, mode):
    """Evaluate a trained checkpoint and write the report (JSON, CSV, figures)."""
    model, train_cfg = load_checkpoint(ckpt_dir)
    fp = _emit_fingerprint(model.config, train_cfg, {"split": split})
    corpus = read_corpus(corpus_dir)

    descriptions = None
    if mode:
        descriptions = {}
        for clip, _ in corpus:
            if split is None or clip.split == split:
                _, rationale = explain_clip(model, clip, mode=mode)
                descriptions[clip.clip_id] = rationale.refined_text

    report = evaluate(lambda clip: predict_clip(model, clip).ranked_ids, corpus,
                      split=split,
                      baselines=("centrality", "area", "clarity") if baselines else (),
                      descriptions=descriptions, fingerprint=fp)
    write_report(report, outdir)
    _dump_effective(Path(outdir), "eval_config.json",
                    model.config, train_cfg, {"split": split})
    if overlays:
        for clip, _ in corpus:
            if (split is None or clip.split == split) and clip.frames is not None:
                result = predict_clip(model, clip)
                write_overlays(clip, result.vip_id, Path(outdir) / "overlays")
    click.echo(f"rank1={report.rank1:.4f} rank2={report.rank2:.4f} rank3={report.rank3:.4f}")
    click.echo(f"report written to {outdir}")


@main.command(name="predict")
@click.option("--checkpoint", "ckpt_dir", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), default=None)
@click.option("--clip", "clip_dir", type=click.Path(exists=True), default=None)
@click.option("--out", "outdir", type=click.Path(), required=True)
@_guarded
def predict_cmd(ckpt_dir, corpus_dir, clip_dir, outdir):
    """Emit an importance-result JSON per clip."""
    if (corpus_dir is None) == (clip_dir is None):
        raise ValueError("provide exactly one of --corpus or --clip")
    model, train_cfg = load_checkpoint(ckpt_dir)
    _emit_fingerprint(model.config, train_cfg)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if clip_dir:
        from .data_model import load_clip
        clips = [load_clip(clip_dir)]
    else:
        clips = [c for c, _ in read_corpus(corpus_dir)]
    for clip in clips:
        result = predict_clip(model, clip)
        (outdir / f"{clip.clip_id}.json").write_text(
            json.dumps(result.to_json_dict(), indent=2, sort_keys=True), encoding="utf-8")
    click.echo(f"wrote {len(clips)} prediction files to {outdir}")


@main.command(name="explain")
@click.option("--checkpoint", "ckpt_dir", type=click.Path(exists=True), required=True)
@click.option("--clip", "clip_dir", type=click.Path(exists=True), required=True)
@click.option("--mode", type=click.Choice(GUIDANCE_MODES), default="baseline", show_default=True)
@click.option("--refine-url", default=None, help="HTTP refinement endpoint (default: mock)")
@click.option("--out", "outdir", type=click.Path(), required=True)
@_guarded
def explain_cmd(ckpt_dir, clip_dir, mode, refine_url, outdir):
    """Emit the rationale JSON for one clip."""
    from .data_model import load_clip
    model, train_cfg = load_checkpoint(ckpt_dir)
    _emit_fingerprint(model.config, train_cfg, {"mode": mode})
    clip = load_clip(clip_dir)
    client = HttpRefinementClient(refine_url) if refine_url else MockRefinementClient()
    result, rationale = explain_clip(model, clip, mode=mode, client=client)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {
        "clip_id": clip.clip_id,
        "vip_id": result.vip_id,
        "guidance_mode": rationale.guidance_mode,
        "retained_cues": [{"cue": c, "rank": r, "clause": cl}
                          for c, r, cl in rationale.retained_cues],
        "template_text": rationale.template_text,
        "refined_text": rationale.refined_text,
        "refine_warning": rationale.refine_warning,
        "per_cue_rank": result.per_cue_rank,
    }
    (outdir / f"{clip.clip_id}_rationale.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    click.echo(rationale.refined_text or rationale.template_text)


@main.command(name="gradcheck")
@click.option("--seed", type=int, default=None)
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@_guarded
def gradcheck_cmd(seed, tolerance):
    """Finite-difference check of the analytic gradients on a frozen toy model."""
    from .scene_synth import DominanceInterval, ScenarioSpec, synthesize
    import torch

    seed = default_seed() if seed is None else seed
    model_cfg = ModelConfig(dim=8, heads=2, text_layers=1, relate_layers=1,
                            vocab_size=64, max_frames=8, seed=seed)
    train_cfg = TrainConfig(seed=seed, lambda_text=0.0)
    _emit_fingerprint(model_cfg, train_cfg)

    torch.manual_seed(seed)
    spec = ScenarioSpec(seed=seed, num_persons=3, num_frames=6,
                        schedule=[DominanceInterval(0, 3, 0, "speech"),
                                  DominanceInterval(3, 6, 2, "spatial")])
    clip, _ = synthesize(spec)
    model = VIPNet(model_cfg).double()
    errors = grad_check(model, [featurize(clip)], train_cfg, seed=seed)
    worst = max(errors.values())
    for group in sorted(errors):
        click.echo(f"{group:16s} max rel error {errors[group]:.3e}")
    click.echo(f"max relative error: {worst:.3e}")
    if worst >= tolerance:
        click.echo("gradient check FAILED", err=True)
        sys.exit(1)
    click.echo("gradient check passed")


if __name__ == "__main__":
    main()
