"""Pipeline orchestration: simulate -> mask -> train -> reconstruct ->
postprocess -> evaluate -> report, with content-hash stage caching and a
run manifest.

Every stage writes into its own subdirectory of the run directory and
records an input hash in ``manifest.json``; a rerun with an unchanged hash
skips the stage. A lockfile serializes access: one pipeline process per run
directory. All artifacts are array containers with JSON sidecars
(:mod:`rsfr.arrayio`), mask text files, line-delimited JSON logs, and CSVs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, arrayio, dtfit, kspace, metrics, phantom, semantics
from . import backbone as bb
from . import fusion as fus
from . import training as tr

STAGE_ORDER = ("simulate", "mask", "train", "reconstruct", "postprocess",
               "evaluate", "report")
STAGE_DEPS = {
    "simulate": (),
    "mask": (),
    "train": ("simulate", "mask"),
    "reconstruct": ("simulate", "mask", "train"),
    "postprocess": ("simulate", "reconstruct"),
    "evaluate": ("simulate", "reconstruct", "postprocess"),
    "report": ("evaluate",),
}
ARMS = ("zf", "coarse", "refined")


@dataclass
class PipelineConfig:
    """Everything a full run needs; serializable to one JSON tree."""

    phantom: phantom.PhantomSpec = field(default_factory=phantom.PhantomSpec)
    n_train_cases: int = 16
    n_heldout_cases: int = 3
    af: int = 4
    center_fraction: float | None = None
    backbone: bb.BackboneConfig = field(default_factory=bb.BackboneConfig)
    sfi: fus.SFIConfig = field(default_factory=fus.SFIConfig)
    segmenter: str = "fallback"
    loss: tr.LossWeights = field(default_factory=tr.LossWeights)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    mask_mode: str = "reference"      # myocardium source for DT fitting
    extractor_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        semantics.SegmenterKind(self.segmenter)
        if self.mask_mode not in ("reference", "fallback"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")

    def to_dict(self) -> dict:
        spec = dataclasses.asdict(self.phantom)
        spec["directions"] = np.asarray(self.phantom.directions).tolist()
        spec["lv_center"] = list(self.phantom.lv_center)
        return {
            "phantom": spec,
            "n_train_cases": self.n_train_cases,
            "n_heldout_cases": self.n_heldout_cases,
            "af": self.af,
            "center_fraction": self.center_fraction,
            "backbone": self.backbone.to_dict(),
            "sfi": self.sfi.to_dict(),
            "segmenter": self.segmenter,
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
            "mask_mode": self.mask_mode,
            "extractor_seed": self.extractor_seed,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        spec = dict(d.pop("phantom", {}))
        if "lv_center" in spec:
            spec["lv_center"] = tuple(spec["lv_center"])
        if "eigenvalues" in spec:
            spec["eigenvalues"] = tuple(spec["eigenvalues"])
        if "b_values" in spec:
            spec["b_values"] = tuple(spec["b_values"])
        if "directions" in spec:
            spec["directions"] = np.asarray(spec["directions"], dtype=np.float64)
        d["phantom"] = phantom.PhantomSpec(**spec)
        d["backbone"] = bb.BackboneConfig.from_dict(
            d.get("backbone", bb.BackboneConfig().to_dict()))
        d["sfi"] = fus.SFIConfig.from_dict(d.get("sfi", fus.SFIConfig().to_dict()))
        d["loss"] = tr.LossWeights.from_dict(
            d.get("loss", tr.LossWeights().to_dict()))
        d["train"] = tr.TrainConfig.from_dict(
            d.get("train", tr.TrainConfig().to_dict()))
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_file(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        return path

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# manifest and locking

class RunManifest:
    def __init__(self, out_dir: Path, config: PipelineConfig):
        self.path = Path(out_dir) / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
            if self.data.get("config_hash") != config.hash():
                raise RuntimeError(
                    "run directory was produced by a different config "
                    "(stale hash); use a fresh --out directory"
                )
        else:
            self.data = {"config_hash": config.hash(), "version": __version__,
                         "stages": {}, "checkpoints": {}}

    def save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, sort_keys=True, indent=1))

    def stage_done(self, name: str, input_hash: str) -> bool:
        record = self.data["stages"].get(name)
        return bool(record) and record.get("input_hash") == input_hash

    def record_stage(self, name: str, input_hash: str):
        self.data["stages"][name] = {
            "input_hash": input_hash,
            "depends_on": list(STAGE_DEPS[name]),
            "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.save()

    def stage_hash(self, name: str) -> str:
        return self.data["stages"].get(name, {}).get("input_hash", "missing")


class RunLock:
    """One pipeline process per output directory."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by another process ({self.path}); "
                "remove the lockfile if that process is gone"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _input_hash(cfg: PipelineConfig, manifest: RunManifest, stage: str) -> str:
    parts = [cfg.hash(), stage]
    parts += [manifest.stage_hash(dep) for dep in STAGE_DEPS[stage]]
    return hashlib.sha256("|".join(parts).encode()).hexdigest()


# ---------------------------------------------------------------------------
# stage: simulate

def _case_dir(root: Path, split: str, index: int) -> Path:
    return root / split / f"case{index:03d}"


def _save_case(case_dir: Path, spec: phantom.PhantomSpec,
               field_: phantom.TensorField, slices: list[kspace.ImageSlice]):
    case_dir.mkdir(parents=True, exist_ok=True)
    arrayio.save_array(case_dir / "myo_mask.arr",
                       field_.myo_mask.astype(np.uint8))
    arrayio.save_array(case_dir / "tensors.arr", field_.tensors)
    spec_dict = dataclasses.asdict(spec)
    spec_dict["directions"] = np.asarray(spec.directions).tolist()
    spec_json = json.dumps(spec_dict, sort_keys=True, indent=1)
    spec_hash = hashlib.sha256(spec_json.encode()).hexdigest()[:16]
    (case_dir / "spec.json").write_text(spec_json)
    for j, slc in enumerate(slices):
        arrayio.save_array(case_dir / f"slice{j:03d}.arr", slc.pixels,
                           sidecar={**slc.meta, "case_seed": spec.seed,
                                    "spec_hash": spec_hash})


def load_case(case_dir: Path):
    mask = arrayio.load_array(case_dir / "myo_mask.arr").astype(bool)
    spec_dict = json.loads((case_dir / "spec.json").read_text())
    slices = []
    for path in sorted(case_dir.glob("slice*.arr")):
        slices.append(kspace.ImageSlice(arrayio.load_array(path),
                                        meta=arrayio.load_sidecar(path)))
    return mask, spec_dict, slices


def stage_simulate(cfg: PipelineConfig, out_dir: Path):
    root = out_dir / "simulate"
    specs = phantom.sample_specs(cfg.phantom,
                                 cfg.n_train_cases + cfg.n_heldout_cases,
                                 seed=cfg.seed)
    for i, spec in enumerate(specs):
        split = "train" if i < cfg.n_train_cases else "heldout"
        index = i if i < cfg.n_train_cases else i - cfg.n_train_cases
        field_, slices = phantom.simulate_case(spec)
        _save_case(_case_dir(root, split, index), spec, field_, slices)


# ---------------------------------------------------------------------------
# stage: mask

def slice_mask(cfg: PipelineConfig, slice_seed: int) -> kspace.SamplingMask:
    n_pe = cfg.phantom.grid_size // 2
    return kspace.generate_mask(n_pe=n_pe, af=cfg.af,
                                center_fraction=cfg.center_fraction,
                                seed=slice_seed)


def stage_mask(cfg: PipelineConfig, out_dir: Path):
    root = out_dir / "masks"
    root.mkdir(parents=True, exist_ok=True)
    kspace.save_mask_lines(slice_mask(cfg, cfg.seed),
                           root / f"mask_af{cfg.af}.txt")


# ---------------------------------------------------------------------------
# stage: train

def degrade_slice(cfg: PipelineConfig, pixels: np.ndarray, slice_seed: int):
    """normalize -> undersample -> zero-fill magnitude clipped to [0, 1]."""
    gt = kspace.normalize_minmax(kspace.ImageSlice(pixels))
    mask = slice_mask(cfg, slice_seed)
    zf = kspace.zero_fill(kspace.forward_operator(gt, mask), mask)
    zf_pixels = np.clip(zf.pixels, 0.0, 1.0)
    return gt, kspace.ImageSlice(zf_pixels, norm=gt.norm, meta=dict(gt.meta))


def _training_pairs(cfg: PipelineConfig, out_dir: Path) -> list[tr.TrainingPair]:
    pairs = []
    root = out_dir / "simulate" / "train"
    for case_dir in sorted(root.glob("case*")):
        myo, _, slices = load_case(case_dir)
        for slc in slices:
            seed = cfg.seed + 7919 * int(slc.meta["case_seed"] % 10_000) \
                + int(slc.meta["index"])
            gt, zf = degrade_slice(cfg, slc.pixels, seed)
            pairs.append(tr.TrainingPair(gt=gt.pixels, zf=zf.pixels,
                                         ref_mask=myo))
    return pairs


def stage_train(cfg: PipelineConfig, out_dir: Path):
    pairs = _training_pairs(cfg, out_dir)
    extractor = (tr.RandomConvExtractor(cfg.extractor_seed)
                 if cfg.loss.gamma > 0 else None)
    tr.train_end_to_end(
        pairs, cfg.train, cfg.loss, backbone_cfg=cfg.backbone,
        sfi_cfg=cfg.sfi, segmenter_kind=cfg.segmenter, extractor=extractor,
        out_dir=out_dir / "train", log_file=out_dir / "train" / "log.jsonl")


# ---------------------------------------------------------------------------
# stage: reconstruct

def stage_reconstruct(cfg: PipelineConfig, out_dir: Path):
    coarse_net, refiner, _ = tr.load_models(out_dir / "train" / "final.npz")
    root = out_dir / "simulate" / "heldout"
    recon_root = out_dir / "reconstruct"
    for case_dir in sorted(root.glob("case*")):
        myo, _, slices = load_case(case_dir)
        dest = recon_root / case_dir.name
        dest.mkdir(parents=True, exist_ok=True)
        for slc in slices:
            seed = cfg.seed + 104_729 * int(slc.meta["case_seed"] % 10_000) \
                + int(slc.meta["index"])
            gt, zf = degrade_slice(cfg, slc.pixels, seed)
            with torch.no_grad():
                t = torch.as_tensor(zf.pixels, dtype=torch.float32)[None, None]
                xbar = coarse_net(t)
                coarse_pixels = np.clip(xbar[0, 0].double().numpy(), 0.0, 1.0)
                prior = semantics.segment(
                    kspace.ImageSlice(coarse_pixels), cfg.segmenter,
                    reference_mask=myo)
                p = torch.as_tensor(prior.masks, dtype=torch.float32)[None]
                xhat = refiner(xbar, p)
                refined_pixels = np.clip(xhat[0, 0].double().numpy(), 0.0, 1.0)

            j = int(slc.meta["index"])
            sidecar = {**slc.meta, "vmin": gt.norm.vmin, "vmax": gt.norm.vmax,
                       "af": cfg.af}
            arrayio.save_array(dest / f"slice{j:03d}_gt.arr", gt.pixels,
                               sidecar=sidecar)
            arrayio.save_array(dest / f"slice{j:03d}_zf.arr", zf.pixels,
                               sidecar=sidecar)
            arrayio.save_array(dest / f"slice{j:03d}_coarse.arr",
                               coarse_pixels, sidecar=sidecar)
            arrayio.save_array(dest / f"slice{j:03d}_refined.arr",
                               refined_pixels, sidecar=sidecar)
            arrayio.save_array(dest / f"slice{j:03d}_prior.arr", prior.masks,
                               sidecar={"scores": list(prior.scores)})


# ---------------------------------------------------------------------------
# stage: postprocess

def _series_from_files(paths: list[Path], denormalize: bool) -> dtfit.DWISeries:
    slices = []
    for path in paths:
        pixels = arrayio.load_array(path)
        meta = arrayio.load_sidecar(path)
        slc = kspace.ImageSlice(pixels, meta=meta)
        if denormalize:
            rec = kspace.NormalizationRecord(meta["vmin"], meta["vmax"])
            slc = kspace.denormalize(slc, rec)
            slc.meta.update(meta)
        slices.append(slc)
    return dtfit.DWISeries.from_slices(slices)


def fit_series(series: dtfit.DWISeries, myo_mask: np.ndarray,
               lv_center: tuple[float, float], dest: Path) -> dtfit.DTParams:
    dtm = dtfit.fit_tensor_lls(series, myo_mask)
    params = dtfit.compute_dt_params(dtm, lv_center)
    dest.mkdir(parents=True, exist_ok=True)
    arrayio.save_array(dest / "md.arr", params.md, sidecar={"units": "mm^2/s"})
    arrayio.save_array(dest / "fa.arr", params.fa, sidecar={"units": "1"})
    arrayio.save_array(dest / "ha.arr", params.ha, sidecar={"units": "deg"})
    mask = params.myo_mask
    summary = {
        "md_mean": float(params.md[mask].mean()),
        "fa_mean": float(params.fa[mask].mean()),
        "ha_gradient": params.ha_gradient,
        "n_skipped_spokes": params.n_skipped_spokes,
    }
    (dest / "params.json").write_text(json.dumps(summary, sort_keys=True,
                                                 indent=1))
    with open(dest / "profiles.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["spoke_id", "depth", "ha", "slope", "intercept",
                         "r_squared", "rmse"])
        for prof in params.profiles:
            for depth, ha in zip(prof.depths, prof.ha):
                writer.writerow([prof.spoke_id, f"{depth:.10g}", f"{ha:.10g}",
                                 f"{prof.slope:.10g}",
                                 f"{prof.intercept:.10g}",
                                 f"{prof.r_squared:.10g}",
                                 f"{prof.rmse:.10g}"])
    return params


def postprocess_mask(cfg: PipelineConfig, myo: np.ndarray,
                     reference_series: dtfit.DWISeries) -> np.ndarray:
    if cfg.mask_mode == "reference":
        return myo
    b0 = reference_series.slices[0]
    prior = semantics.fallback_segment(
        kspace.normalize_minmax(b0))
    return prior.masks[0] > 0.5


def stage_postprocess(cfg: PipelineConfig, out_dir: Path):
    sim_root = out_dir / "simulate" / "heldout"
    recon_root = out_dir / "reconstruct"
    post_root = out_dir / "postprocess"
    for case_dir in sorted(sim_root.glob("case*")):
        myo, spec_dict, slices = load_case(case_dir)
        lv_center = tuple(spec_dict["lv_center"])
        reference = dtfit.DWISeries.from_slices(slices)
        fit_mask = postprocess_mask(cfg, myo, reference)
        dest = post_root / case_dir.name
        fit_series(reference, fit_mask, lv_center, dest / "reference")
        for arm in ARMS:
            paths = sorted((recon_root / case_dir.name).glob(f"slice*_{arm}.arr"))
            series = _series_from_files(paths, denormalize=True)
            fit_series(series, fit_mask, lv_center, dest / arm)


# ---------------------------------------------------------------------------
# stage: evaluate

def stage_evaluate(cfg: PipelineConfig, out_dir: Path):
    recon_root = out_dir / "reconstruct"
    post_root = out_dir / "postprocess"
    eval_root = out_dir / "evaluate"
    eval_root.mkdir(parents=True, exist_ok=True)
    extractor = tr.RandomConvExtractor(cfg.extractor_seed)

    rows = []
    for case_dir in sorted(recon_root.glob("case*")):
        gt_paths = sorted(case_dir.glob("slice*_gt.arr"))
        for gt_path in gt_paths:
            gt = arrayio.load_array(gt_path)
            stem = gt_path.name.replace("_gt.arr", "")
            for arm in ARMS:
                test = arrayio.load_array(case_dir / f"{stem}_{arm}.arr")
                rows.append({
                    "case": case_dir.name, "slice": stem, "arm": arm,
                    "psnr": metrics.psnr(gt, test),
                    "ssim": metrics.ssim(gt, test),
                    "perceptual": metrics.perceptual_distance(gt, test,
                                                              extractor),
                })
    with open(eval_root / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "slice", "arm", "psnr", "ssim", "perceptual"])
        for row in rows:
            writer.writerow([row["case"], row["slice"], row["arm"],
                             f"{row['psnr']:.10g}", f"{row['ssim']:.10g}",
                             f"{row['perceptual']:.10g}"])
    with open(eval_root / "metrics.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    dt_rows = []
    for case_dir in sorted(post_root.glob("case*")):
        ref = json.loads((case_dir / "reference" / "params.json").read_text())
        for arm in ARMS:
            test = json.loads((case_dir / arm / "params.json").read_text())
            dt_rows.append({
                "case": case_dir.name, "arm": arm,
                "mae_md": abs(ref["md_mean"] - test["md_mean"]),
                "mae_fa": abs(ref["fa_mean"] - test["fa_mean"]),
                "mae_ha_gradient": abs(ref["ha_gradient"]
                                       - test["ha_gradient"]),
            })
    with open(eval_root / "dt_mae.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "arm", "mae_md", "mae_fa", "mae_ha_gradient"])
        for row in dt_rows:
            writer.writerow([row["case"], row["arm"], f"{row['mae_md']:.10g}",
                             f"{row['mae_fa']:.10g}",
                             f"{row['mae_ha_gradient']:.10g}"])

    summary = {"config_hash": cfg.hash(), "arms": {}}
    for arm in ARMS:
        arm_rows = [r for r in rows if r["arm"] == arm]
        summary["arms"][arm] = {
            "psnr": metrics.format_mean_std(
                metrics.finite_only([r["psnr"] for r in arm_rows]), 2),
            "ssim": metrics.format_mean_std([r["ssim"] for r in arm_rows], 3),
            "perceptual": metrics.format_mean_std(
                [r["perceptual"] for r in arm_rows], 3),
            "mean_ssim": float(np.mean([r["ssim"] for r in arm_rows])),
            "mae_fa_mean": float(np.mean(
                [r["mae_fa"] for r in dt_rows if r["arm"] == arm])),
            "mae_md_mean": float(np.mean(
                [r["mae_md"] for r in dt_rows if r["arm"] == arm])),
            "mae_ha_gradient_mean": float(np.mean(
                [r["mae_ha_gradient"] for r in dt_rows if r["arm"] == arm])),
        }
    zf_ssim = [r["ssim"] for r in rows if r["arm"] == "zf"]
    refined_ssim = [r["ssim"] for r in rows if r["arm"] == "refined"]
    _, p_value = metrics.mann_whitney_u(refined_ssim, zf_ssim)
    summary["mann_whitney_refined_vs_zf_ssim_p"] = p_value
    (eval_root / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1))


def stage_report(cfg: PipelineConfig, out_dir: Path):
    from . import report
    report.emit_figures(out_dir)


_STAGE_FUNCS = {
    "simulate": stage_simulate,
    "mask": stage_mask,
    "train": stage_train,
    "reconstruct": stage_reconstruct,
    "postprocess": stage_postprocess,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_pipeline(cfg: PipelineConfig, out_dir: str | Path,
                 stages: tuple[str, ...] = STAGE_ORDER) -> RunManifest:
    """Run (or resume) the pipeline; returns the manifest.

    Stages whose recorded input hash matches are skipped. A stage failure
    leaves the manifest with all previously completed stages recorded.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(out_dir):
        manifest = RunManifest(out_dir, cfg)
        cfg.to_file(out_dir / "config.json")
        for stage in stages:
            if stage not in _STAGE_FUNCS:
                raise ValueError(f"unknown stage {stage!r}")
            input_hash = _input_hash(cfg, manifest, stage)
            if manifest.stage_done(stage, input_hash):
                continue
            _STAGE_FUNCS[stage](cfg, out_dir)
            manifest.record_stage(stage, input_hash)
        if (out_dir / "train" / "final.npz").exists():
            manifest.data["checkpoints"]["final"] = str(
                out_dir / "train" / "final.npz")
        manifest.save()
    return manifest
