"""Command-line entry points for the comparison laboratory.

The artifacts root for runs defaults to $SRLAB_ARTIFACTS, then ./runs.
"""

from __future__ import annotations

import os
from pathlib import Path

import click

from .configio import load_yaml, save_yaml
from .data import build_eval_pairs
from .degrade import DegradationConfig
from .harness import (
    DiffStageConfig,
    ExperimentConfig,
    GanStageConfig,
    MilestoneConfig,
    bench_inference,
    compare_runs,
    evaluate_outputs,
    load_run_model,
    predict_eval_pairs,
    run_experiment,
)
from .images import DatasetManifest
from .metrics import format_metric_table
from .synthetic import write_toy_corpus


def _artifacts_root(out: str | None) -> Path:
    return Path(out or os.environ.get("SRLAB_ARTIFACTS") or "runs")


@click.group()
def main():
    """Desk-scale controlled comparison of single-step and iterative upscalers."""


@main.command("prepare-data")
@click.argument("out_dir", type=click.Path())
@click.option("--n-images", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--size", default=80, show_default=True, help="source image side length")
@click.option("--crop-size", default=64, show_default=True, help="HR training crop side")
@click.option("--scale", default=4, show_default=True)
def prepare_data(out_dir, n_images, seed, size, crop_size, scale):
    """Write a synthetic image corpus plus its manifest."""
    manifest = write_toy_corpus(
        out_dir, n_images=n_images, seed=seed, size=size, crop_size_hr=crop_size, scale=scale
    )
    click.echo(f"wrote {len(manifest.entries)} images under {out_dir}")
    click.echo(f"manifest: {Path(out_dir) / 'manifest.jsonl'}")


@main.command("make-config")
@click.argument("out_path", type=click.Path())
@click.option("--name", required=True)
@click.option("--paradigm", type=click.Choice(["gan", "diffusion"]), required=True)
@click.option("--train-manifest", required=True, type=click.Path(exists=True))
@click.option("--eval-manifest", required=True, type=click.Path(exists=True))
@click.option("--batch-size", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--milestone-unit", default=1, show_default=True)
@click.option("--n-milestones", default=10, show_default=True)
@click.option("--l1-steps", default=60, show_default=True, help="adversarial paradigm only")
@click.option("--sampler", default="dpmpp_2m:13", show_default=True, help="diffusion only")
@click.option("--degrade/--no-degrade", default=False, show_default=True)
def make_config(
    out_path,
    name,
    paradigm,
    train_manifest,
    eval_manifest,
    batch_size,
    seed,
    milestone_unit,
    n_milestones,
    l1_steps,
    sampler,
    degrade,
):
    """Write a run config YAML with desk-scale defaults."""
    cfg = ExperimentConfig(
        name=name,
        paradigm=paradigm,
        train_manifest=str(train_manifest),
        eval_manifest=str(eval_manifest),
        batch_size=batch_size,
        base_seed=seed,
        degradation=DegradationConfig() if degrade else None,
        milestones=MilestoneConfig(n=n_milestones, unit=milestone_unit),
        gan=GanStageConfig(l1_steps=l1_steps),
        diffusion=DiffStageConfig(sampler=sampler),
    )
    save_yaml(cfg, out_path)
    click.echo(f"wrote {out_path} (budget {cfg.milestones.steps()[-1]} steps)")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--out", default=None, help="runs root (default $SRLAB_ARTIFACTS or ./runs)")
def train(config_path, out):
    """Train one run to its milestone budget, stopping early on three strikes."""
    cfg = load_yaml(ExperimentConfig, config_path)
    record = run_experiment(cfg, _artifacts_root(out))
    for m in record.milestones:
        verdict = m.verdict or "-"
        click.echo(
            f"step {m.step:>6}  psnr {m.mean_psnr_db:7.3f} dB  ssim {m.mean_ssim:.4f}  "
            f"{verdict:>6}  strikes {m.strikes}"
        )
    outcome = "stopped early" if record.stopped_early else "ran to budget"
    click.echo(
        f"{record.name}: {outcome} at step {record.final_step}/{record.budget} "
        f"({record.wall_seconds:.1f}s)"
    )


@main.command()
@click.argument("run_dir", type=click.Path(exists=True))
@click.option("--degraded", is_flag=True, help="evaluate on degraded LR inputs")
def evaluate(run_dir, degraded):
    """Score a finished run on its held-out eval set."""
    cfg, model, ema = load_run_model(run_dir)
    manifest = DatasetManifest.load(cfg.eval_manifest)
    degradation = (cfg.degradation or DegradationConfig()) if degraded else None
    pairs = build_eval_pairs(manifest, degradation=degradation)
    outputs = predict_eval_pairs(cfg, model, ema if cfg.use_ema else None, pairs)
    report = evaluate_outputs(outputs, pairs)
    label = cfg.name + (" (degraded eval)" if degraded else "")
    click.echo(format_metric_table({label: report}))


@main.command()
@click.argument("run_dir_1", type=click.Path(exists=True))
@click.argument("run_dir_2", type=click.Path(exists=True))
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--export", "export_dir", default=None, type=click.Path())
def compare(run_dir_1, run_dir_2, alpha, export_dir):
    """Controlled side-by-side comparison of two finished runs."""
    res = compare_runs(run_dir_1, run_dir_2, alpha=alpha, export_dir=export_dir)
    click.echo(f"{res.name_1} vs {res.name_2}")
    click.echo(
        f"  wins {res.wins_1}-{res.wins_2} ties {res.ties}  "
        f"win rate {res.win_rate_1:.1f}%  p={res.p_value:.4g}  -> {res.verdict}"
    )
    click.echo(
        f"  {res.name_1}: psnr {res.mean_1['psnr_db']:.3f} dB ssim {res.mean_1['ssim']:.4f} "
        f"(nfe {res.nfe_1})"
    )
    click.echo(
        f"  {res.name_2}: psnr {res.mean_2['psnr_db']:.3f} dB ssim {res.mean_2['ssim']:.4f} "
        f"(nfe {res.nfe_2})"
    )
    if export_dir:
        click.echo(f"  judging bundle exported to {export_dir}")


@main.command()
@click.argument("run_dir", type=click.Path(exists=True))
@click.option("--repeats", default=3, show_default=True)
def bench(run_dir, repeats):
    """Time single-image inference for a finished run."""
    cfg, model, ema = load_run_model(run_dir)
    pairs = build_eval_pairs(DatasetManifest.load(cfg.eval_manifest))
    pair = pairs[0]
    use_ema = ema if cfg.use_ema else None

    def fn():
        predict_eval_pairs(cfg, model, use_ema, [pair])

    result = bench_inference(fn, cfg.name, nfe=cfg.nfe(), repeats=repeats)
    click.echo(
        f"{result.label}: nfe {result.nfe}, mean {result.mean_seconds * 1e3:.1f} ms, "
        f"min {result.min_seconds * 1e3:.1f} ms, "
        f"{result.seconds_per_nfe * 1e3:.1f} ms/evaluation"
    )


@main.command("serve-sbs")
@click.option("--root", required=True, type=click.Path(), help="judging storage root")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True)
def serve_sbs(root, host, port):
    """Serve the pairwise judging API (and persist judgments under ROOT)."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(root), host=host, port=port)


if __name__ == "__main__":
    main()
