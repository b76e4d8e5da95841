"""Plain-text tables and SVG curves for evaluation and noise-sweep outputs."""
from __future__ import annotations

from pathlib import Path

from .errors import FormatError


def kind_of(obj: dict) -> str:
    if obj.get("kind") in ("eval", "noise_sweep"):
        return obj["kind"]
    if "r1_at" in obj and "miou" in obj:
        return "eval"
    if "rows" in obj:
        return "noise_sweep"
    raise FormatError("report input is neither an evaluation report nor a noise sweep")


def eval_table(obj: dict) -> str:
    r1 = obj["r1_at"]
    head = f"{'branch':<8} {'count':>6} " + " ".join(f"{'R1@' + k:>8}" for k in r1) + f" {'mIoU':>8}"
    row = (f"{obj.get('branch', '-'):<8} {obj.get('count', len(obj.get('per_query', []))):>6} "
           + " ".join(f"{v:8.2f}" for v in r1.values()) + f" {obj['miou']:8.2f}")
    rule = obj.get("threshold_rule")
    return "\n".join([head, row] + ([f"threshold rule: {rule}"] if rule else []))


def sweep_table(obj: dict) -> str:
    lines = [f"{'fraction':>8} {'mean_p':>8} {'mIoU(AIP)':>10} {'mIoU(p=.5)':>11}"]
    for r in obj["rows"]:
        lines.append(f"{r['fraction']:8.2f} {r['mean_p']:8.3f} {r['miou_with_aip']:10.2f} "
                     f"{r['miou_fixed_half']:11.2f}")
    return "\n".join(lines)


def render_text(obj: dict) -> str:
    return eval_table(obj) if kind_of(obj) == "eval" else sweep_table(obj)


def write_sweep_svgs(obj: dict, out_dir) -> list[Path]:
    """Two curves: mean predicted p and mIoU against the noisy-audio fraction."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = obj["rows"]
    frac = [r["fraction"] for r in rows]
    paths = []

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(frac, [r["mean_p"] for r in rows], marker="o")
    ax.set_xlabel("fraction of noisy audio")
    ax.set_ylabel("mean predicted audio importance")
    fig.tight_layout()
    paths.append(out / "noise_sweep_importance.svg")
    fig.savefig(paths[-1], format="svg")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(frac, [r["miou_with_aip"] for r in rows], marker="o", label="predicted p")
    ax.plot(frac, [r["miou_fixed_half"] for r in rows], marker="s", label="fixed p = 0.5")
    ax.set_xlabel("fraction of noisy audio")
    ax.set_ylabel("mIoU (%)")
    ax.legend()
    fig.tight_layout()
    paths.append(out / "noise_sweep_miou.svg")
    fig.savefig(paths[-1], format="svg")
    plt.close(fig)
    return paths
