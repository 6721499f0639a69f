"""Static figures summarizing a completed pipeline run.

Emits four PNG panels (reconstructions with error maps, MD/FA maps, HA map
with transmural line profiles, MAE bar chart) plus ``figures.json`` holding
the numbers drawn on the figures so they can be cross-checked against the
stage outputs they came from.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import arrayio  # noqa: E402

ARMS = ("zf", "coarse", "refined")


def _first_heldout_case(out_dir: Path) -> Path:
    cases = sorted((out_dir / "reconstruct").glob("case*"))
    if not cases:
        raise FileNotFoundError("no reconstruct outputs; run the pipeline first")
    return cases[0]


def _pick_slice(case_dir: Path) -> str:
    stems = sorted(p.name.replace("_gt.arr", "")
                   for p in case_dir.glob("slice*_gt.arr"))
    if not stems:
        raise FileNotFoundError(f"no slices in {case_dir}")
    # prefer a diffusion-weighted slice over the b0
    return stems[1] if len(stems) > 1 else stems[0]


def recon_panel(out_dir: Path, dest: Path) -> dict:
    case = _first_heldout_case(out_dir)
    stem = _pick_slice(case)
    gt = arrayio.load_array(case / f"{stem}_gt.arr")
    fig, axes = plt.subplots(2, len(ARMS) + 1, figsize=(3 * (len(ARMS) + 1), 6))
    axes[0, 0].imshow(gt, cmap="gray", vmin=0, vmax=1)
    axes[0, 0].set_title("reference")
    axes[1, 0].axis("off")
    stats = {}
    for col, arm in enumerate(ARMS, start=1):
        img = arrayio.load_array(case / f"{stem}_{arm}.arr")
        err = np.abs(img - gt)
        stats[arm] = {"error_max": float(err.max()),
                      "error_mean": float(err.mean())}
        axes[0, col].imshow(img, cmap="gray", vmin=0, vmax=1)
        axes[0, col].set_title(arm)
        im = axes[1, col].imshow(err, cmap="inferno", vmin=0,
                                 vmax=max(s["error_max"]
                                          for s in stats.values()))
        axes[1, col].set_title(f"|err| max={err.max():.3f}")
    for ax in axes.ravel():
        ax.set_xticks([]), ax.set_yticks([])
    fig.colorbar(im, ax=axes[1, -1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(dest, dpi=110)
    plt.close(fig)
    return {"case": case.name, "slice": stem, "arms": stats}


def dt_maps_panel(out_dir: Path, dest: Path) -> dict:
    case = _first_heldout_case(out_dir).name
    post = out_dir / "postprocess" / case
    fig, axes = plt.subplots(2, 3, figsize=(10, 6))
    info = {}
    for row, name in enumerate(("md", "fa")):
        ref = arrayio.load_array(post / "reference" / f"{name}.arr")
        test = arrayio.load_array(post / "refined" / f"{name}.arr")
        err = np.abs(ref - test)
        info[name] = {"error_max": float(err.max())}
        vmax = ref.max() if ref.max() > 0 else 1.0
        axes[row, 0].imshow(ref, cmap="viridis", vmin=0, vmax=vmax)
        axes[row, 0].set_title(f"{name.upper()} reference")
        axes[row, 1].imshow(test, cmap="viridis", vmin=0, vmax=vmax)
        axes[row, 1].set_title(f"{name.upper()} refined")
        axes[row, 2].imshow(err, cmap="inferno")
        axes[row, 2].set_title(f"|err| max={err.max():.2e}")
    for ax in axes.ravel():
        ax.set_xticks([]), ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(dest, dpi=110)
    plt.close(fig)
    return {"case": case, **info}


def _read_profiles(csv_path: Path):
    spokes: dict[int, dict] = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            spoke = spokes.setdefault(int(row["spoke_id"]), {
                "depth": [], "ha": [], "slope": float(row["slope"]),
                "r_squared": float(row["r_squared"]),
                "rmse": float(row["rmse"]),
            })
            spoke["depth"].append(float(row["depth"]))
            spoke["ha"].append(float(row["ha"]))
    return spokes


def ha_profile_panel(out_dir: Path, dest: Path) -> dict:
    case = _first_heldout_case(out_dir).name
    post = out_dir / "postprocess" / case
    ha_map = arrayio.load_array(post / "refined" / "ha.arr")
    spokes = _read_profiles(post / "refined" / "profiles.csv")
    mean_r2 = float(np.mean([s["r_squared"] for s in spokes.values()]))
    mean_rmse = float(np.mean([s["rmse"] for s in spokes.values()]))
    median_slope = float(np.median([s["slope"] for s in spokes.values()]))

    fig, (ax_map, ax_lp) = plt.subplots(1, 2, figsize=(11, 5))
    im = ax_map.imshow(ha_map, cmap="twilight", vmin=-90, vmax=90)
    ax_map.set_title(f"HA map ({case}, refined)")
    ax_map.set_xticks([]), ax_map.set_yticks([])
    fig.colorbar(im, ax=ax_map, fraction=0.046, label="degrees")

    for spoke in spokes.values():
        ax_lp.plot(spoke["depth"], spoke["ha"], ".", color="0.7",
                   markersize=2)
    depths = np.linspace(0, 1, 50)
    intercepts = [s["ha"][0] - s["slope"] * s["depth"][0]
                  for s in spokes.values()]
    ax_lp.plot(depths, median_slope * depths + float(np.median(intercepts)),
               "r-", label=f"median slope {median_slope:.1f} deg/depth")
    ax_lp.set_xlabel("wall depth (endo 0 -> epi 1)")
    ax_lp.set_ylabel("helix angle (deg)")
    ax_lp.set_title(f"HA line profiles  R2={mean_r2:.3f}  RMSE={mean_rmse:.2f}")
    ax_lp.legend()
    fig.tight_layout()
    fig.savefig(dest, dpi=110)
    plt.close(fig)
    return {"case": case, "mean_r_squared": mean_r2, "mean_rmse": mean_rmse,
            "median_slope": median_slope}


def mae_bars_panel(out_dir: Path, dest: Path) -> dict:
    rows = []
    with open(out_dir / "evaluate" / "dt_mae.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    params = ("mae_md", "mae_fa", "mae_ha_gradient")
    means = {p: [float(np.mean([float(r[p]) for r in rows
                                if r["arm"] == arm])) for arm in ARMS]
             for p in params}
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, p in zip(axes, params):
        ax.bar(range(len(ARMS)), means[p], tick_label=list(ARMS))
        ax.set_title(p)
        ax.set_ylabel("MAE")
    fig.tight_layout()
    fig.savefig(dest, dpi=110)
    plt.close(fig)
    return means


def emit_figures(out_dir: str | Path) -> dict:
    """All four panels plus figures.json; returns the recorded numbers."""
    out_dir = Path(out_dir)
    dest = out_dir / "report"
    dest.mkdir(parents=True, exist_ok=True)
    info = {
        "recon_panel": recon_panel(out_dir, dest / "recon_panel.png"),
        "dt_maps": dt_maps_panel(out_dir, dest / "dt_maps.png"),
        "ha_profiles": ha_profile_panel(out_dir, dest / "ha_profiles.png"),
        "mae_bars": mae_bars_panel(out_dir, dest / "mae_bars.png"),
    }
    (dest / "figures.json").write_text(json.dumps(info, sort_keys=True,
                                                  indent=1))
    return info
