"""Command-line interface chaining the pipeline stages.

Stage subcommands share a run directory (``--out``): each finds its inputs
where the previous stage left them. ``run`` executes the whole chain with
content-hash caching, so re-running after a config change only redoes the
affected stages. File-level utilities (``mask``, ``segment``,
``postprocess``, ``evaluate``) also work on bare files outside a run
directory. The mask-service endpoint for the foundation-model segmenter
comes from --endpoint or the RSFR_MASK_SERVICE environment variable.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import __version__, arrayio, dtfit, kspace, metrics, semantics
from . import pipeline as pl
from . import training as tr


def _load_config(path: str, seed: int | None) -> pl.PipelineConfig:
    cfg = pl.PipelineConfig.from_file(path)
    if seed is not None:
        d = cfg.to_dict()
        d["seed"] = seed
        d["train"]["seed"] = seed
        cfg = pl.PipelineConfig.from_dict(d)
    return cfg


@click.group()
@click.version_option(__version__)
def main():
    """Coarse-to-fine reconstruction pipeline for cardiac diffusion MRI."""


@main.command("init-config")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def init_config(out):
    """Write a default pipeline configuration to edit."""
    path = pl.PipelineConfig().to_file(out)
    click.echo(f"wrote {path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
def simulate(config_path, out, seed):
    """Generate the synthetic phantom dataset."""
    cfg = _load_config(config_path, seed)
    pl.run_pipeline(cfg, out, stages=("simulate",))
    click.echo(f"simulated {cfg.n_train_cases}+{cfg.n_heldout_cases} cases -> {out}")


@main.command()
@click.option("--af", type=click.Choice(["1", "2", "4", "8"]), default="4")
@click.option("--n-pe", type=int, default=kspace.DEFAULT_N_PE)
@click.option("--center-fraction", type=float, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def mask(af, n_pe, center_fraction, seed, out):
    """Emit one sampling mask as bit-exact text (one 0/1 per line)."""
    m = kspace.generate_mask(n_pe=n_pe, af=int(af),
                             center_fraction=center_fraction, seed=seed)
    kspace.save_mask_lines(m, out)
    click.echo(f"{m.n_sampled}/{m.n_pe} lines sampled -> {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
def train(config_path, out, seed):
    """Train the reconstruction networks on the simulated dataset."""
    cfg = _load_config(config_path, seed)
    pl.run_pipeline(cfg, out, stages=("simulate", "mask", "train"))
    click.echo(f"checkpoint -> {Path(out) / 'train' / 'final.npz'}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
def reconstruct(config_path, out, seed):
    """Zero-fill, coarse-reconstruct, segment, and refine held-out slices."""
    cfg = _load_config(config_path, seed)
    pl.run_pipeline(cfg, out,
                    stages=("simulate", "mask", "train", "reconstruct"))
    click.echo(f"reconstructions -> {Path(out) / 'reconstruct'}")


@main.command()
@click.option("--kind", type=click.Choice([k.value for k in
                                           semantics.SegmenterKind]),
              default="fallback")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--reference-mask", type=click.Path(exists=True), default=None)
@click.option("--endpoint", type=str, default=None)
def segment(kind, in_path, out, reference_mask, endpoint):
    """Produce a 3-channel semantic prior from a coarse slice file."""
    slc = kspace.ImageSlice(arrayio.load_array(in_path))
    ref = (arrayio.load_array(reference_mask).astype(bool)
           if reference_mask else None)
    prior = semantics.segment(slc, kind, reference_mask=ref,
                              endpoint=endpoint)
    arrayio.save_array(out, prior.masks,
                       sidecar={"scores": list(prior.scores), "kind": kind})
    click.echo(f"prior (scores {prior.scores}) -> {out}")


@main.command()
@click.option("--series", "series_dir", type=click.Path(exists=True),
              required=True,
              help="directory of slice .arr files with b-value/direction sidecars")
@click.option("--mask-mode", type=click.Choice(["reference", "fallback"]),
              default="reference")
@click.option("--mask-file", type=click.Path(exists=True), default=None,
              help="myocardium mask .arr (required for --mask-mode reference)")
@click.option("--lv-center", type=(float, float), default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def postprocess(series_dir, mask_mode, mask_file, lv_center, out):
    """Least-squares tensor fit and MD/FA/HA parameter maps for one series."""
    paths = sorted(Path(series_dir).glob("slice*.arr"))
    if not paths:
        raise click.ClickException(f"no slice*.arr files in {series_dir}")
    slices = [kspace.ImageSlice(arrayio.load_array(p),
                                meta=arrayio.load_sidecar(p)) for p in paths]
    series = dtfit.DWISeries.from_slices(slices)
    if mask_mode == "reference":
        if mask_file is None:
            candidate = Path(series_dir) / "myo_mask.arr"
            if not candidate.exists():
                raise click.ClickException(
                    "--mask-file required (no myo_mask.arr in series dir)")
            mask_file = candidate
        myo = arrayio.load_array(mask_file).astype(bool)
    else:
        prior = semantics.fallback_segment(
            kspace.normalize_minmax(series.slices[0]))
        myo = prior.masks[0] > 0.5
    if lv_center is None:
        rows, cols = np.nonzero(myo)
        lv_center = (float(rows.mean()), float(cols.mean()))
    params = pl.fit_series(series, myo, tuple(lv_center), Path(out))
    click.echo(f"ha_gradient {params.ha_gradient:.2f} deg/depth -> {out}")


@main.command()
@click.option("--ref", "ref_dir", type=click.Path(exists=True), required=True)
@click.option("--test", "test_dir", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--extractor-seed", type=int, default=0)
def evaluate(ref_dir, test_dir, out, extractor_seed):
    """Per-slice PSNR/SSIM/perceptual metrics between two slice directories."""
    import csv as _csv

    ref_paths = sorted(Path(ref_dir).glob("*.arr"))
    if not ref_paths:
        raise click.ClickException(f"no .arr files in {ref_dir}")
    extractor = tr.RandomConvExtractor(extractor_seed)
    rows = []
    for ref_path in ref_paths:
        test_path = Path(test_dir) / ref_path.name
        if not test_path.exists():
            raise click.ClickException(f"missing counterpart {test_path}")
        a = arrayio.load_array(ref_path)
        b = arrayio.load_array(test_path)
        rows.append((ref_path.name, metrics.psnr(a, b), metrics.ssim(a, b),
                     metrics.perceptual_distance(a, b, extractor)))
    with open(out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["slice", "psnr", "ssim", "perceptual"])
        for name, p, s, lp in rows:
            writer.writerow([name, f"{p:.10g}", f"{s:.10g}", f"{lp:.10g}"])
    with open(str(out) + ".jsonl", "w") as fh:
        for name, p, s, lp in rows:
            fh.write(json.dumps({"slice": name, "psnr": p, "ssim": s,
                                 "perceptual": lp}, sort_keys=True) + "\n")
    click.echo(
        "ssim " + metrics.format_mean_std([r[2] for r in rows], 3)
        + ", psnr " + metrics.format_mean_std(
            metrics.finite_only([r[1] for r in rows]), 2) + f" -> {out}")


@main.command()
@click.option("--out", type=click.Path(exists=True, file_okay=False),
              required=True, help="run directory with completed stages")
def report(out):
    """Emit the summary figures for a completed run."""
    from . import report as rpt
    rpt.emit_figures(out)
    click.echo(f"figures -> {Path(out) / 'report'}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--skip-report", is_flag=True, default=False)
def run(config_path, out, seed, skip_report):
    """Run the full pipeline end to end (stages cached by content hash)."""
    cfg = _load_config(config_path, seed)
    stages = pl.STAGE_ORDER[:-1] if skip_report else pl.STAGE_ORDER
    manifest = pl.run_pipeline(cfg, out, stages=stages)
    summary_path = Path(out) / "evaluate" / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        for arm, vals in summary["arms"].items():
            click.echo(f"{arm}: ssim {vals['ssim']}, psnr {vals['psnr']}")
    click.echo(f"manifest -> {manifest.path}")


if __name__ == "__main__":
    main()
