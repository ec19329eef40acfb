"""CSV, JSON and figure emitters for analysis artifacts."""
import json
import logging
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from cavlab.config import SCHEMA_VERSION
from cavlab.errors import SchemaVersionError
from cavlab.schemas import (
    ConsistencyReport,
    ConsistencyScoreReport,
    DotDistribution,
    EntanglementResult,
    GammaSweep,
    HeatmapPayload,
    SimilarityMatrix,
    SpatialDependenceResult,
    SpatialNormGrid,
    TcavReport,
    TheoryVerdict,
    TrainingLog,
)

logger = logging.getLogger(__name__)

HEATMAP_SCHEMA_FILE = "heatmap.schema.json"
MANIFEST_PREFIX = "# manifest: "


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def check_schema(payload: dict) -> None:
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"artifact schema_version {version}, this tool reads {SCHEMA_VERSION}")


def write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def write_csv(path: Path, frame: pd.DataFrame, index: bool = False, manifest: str | None = None) -> Path:
    """Write `frame`; with `manifest` set the first line is a `# manifest: <name>` reference."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if manifest:
            handle.write(f"{MANIFEST_PREFIX}{manifest}\n")
        frame.to_csv(handle, index=index)
    return path


def _header_lines(path: Path) -> int:
    count = 0
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("# "):
                break
            count += 1
    return count


def read_manifest_reference(path: Path) -> str | None:
    """Manifest name recorded in a CSV header, or None for a bare table."""
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().rstrip("\n")
    return first[len(MANIFEST_PREFIX):] if first.startswith(MANIFEST_PREFIX) else None


def read_csv(path: Path, **kwargs) -> pd.DataFrame:
    return pd.read_csv(path, skiprows=_header_lines(path), **kwargs)


# ---------------------------------------------------------------- tcav

TCAV_COLUMNS = [
    "concept", "class_name", "layer", "mean", "std", "null_mean", "p_value", "p_threshold",
    "significant", "flag", "above_null", "cav_accuracy", "scores",
]


def tcav_frame(reports: list[TcavReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        row = r.model_dump(exclude={"null_scores"})
        row["scores"] = ";".join(repr(s) for s in r.scores)
        row["flag"] = r.flag
        row["above_null"] = r.above_null
        rows.append(row)
    return pd.DataFrame(rows, columns=TCAV_COLUMNS)


def consistency_score_frame(scores: list[ConsistencyScoreReport]) -> pd.DataFrame:
    rows = [
        {"concept": s.concept, "class_name": s.class_name, "layers": ";".join(s.layers),
         "layers_above_null": int(sum(s.above_null)), "score": s.score}
        for s in scores
    ]
    return pd.DataFrame(rows, columns=["concept", "class_name", "layers", "layers_above_null", "score"])


def plot_tcav(reports: list[TcavReport], path: Path) -> Path:
    """Bars of mean score per concept and layer; black bars are significant, red are not."""
    layers = sorted({r.layer for r in reports})
    concepts = list(dict.fromkeys(r.concept for r in reports))
    width = 0.8 / max(1, len(layers))
    fig, ax = plt.subplots(figsize=(max(6, len(concepts) * 0.9), 4))
    for j, layer in enumerate(layers):
        for i, concept in enumerate(concepts):
            match = [r for r in reports if r.layer == layer and r.concept == concept]
            if not match:
                continue
            r = match[0]
            x = i + j * width
            ax.bar(x, r.mean, width, yerr=r.std, color=r.flag, alpha=0.4 + 0.6 * (j + 1) / len(layers))
            ax.hlines(r.null_mean, x - width / 2, x + width / 2, colors="grey", linestyles="dashed")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(concepts))])
    ax.set_xticklabels(concepts, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("TCAV score")
    ax.set_title(f"{reports[0].class_name} ({', '.join(layers)})")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_tcav(payload: dict, out_dir: Path) -> list[Path]:
    manifest = payload.get("manifest")
    reports = [TcavReport.model_validate(r) for r in payload["reports"]]
    scores = [ConsistencyScoreReport.model_validate(s) for s in payload.get("consistency_scores", [])]
    files = [write_csv(out_dir / "tcav.csv", tcav_frame(reports), manifest=manifest)]
    if scores:
        files.append(write_csv(out_dir / "tcav_consistency_scores.csv", consistency_score_frame(scores),
                               manifest=manifest))
    files.append(write_json(out_dir / "tcav.json", _envelope(payload)))
    for class_name in dict.fromkeys(r.class_name for r in reports):
        subset = [r for r in reports if r.class_name == class_name]
        files.append(plot_tcav(subset, out_dir / "figures" / f"tcav_{_safe(class_name)}.png"))
    return files


# ---------------------------------------------------------------- consistency

def consistency_frame(reports: list[ConsistencyReport]) -> pd.DataFrame:
    rows = []
    for rep in reports:
        for variant, values in rep.errors.items():
            for i, value in enumerate(values):
                rows.append({"concept": rep.concept, "variant": variant, "l1": rep.l1, "l2": rep.l2,
                             "gamma": rep.gamma, "cav": i, "error": value})
    return pd.DataFrame(rows, columns=["concept", "variant", "l1", "l2", "gamma", "cav", "error"])


def boxplot_payload(report: ConsistencyReport) -> dict:
    values = report.normalized or report.errors
    out = {}
    for variant, errors in values.items():
        e = np.asarray(errors)
        q1, median, q3 = np.percentile(e, [25, 50, 75]) if e.size else (0.0, 0.0, 0.0)
        out[variant] = {"values": e.tolist(), "mean": float(e.mean()) if e.size else 0.0,
                        "q1": float(q1), "median": float(median), "q3": float(q3)}
    return {"concept": report.concept, "l1": report.l1, "l2": report.l2,
            "normalized": report.normalized is not None, "variants": out}


def plot_consistency(report: ConsistencyReport, path: Path) -> Path:
    values = report.normalized or report.errors
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot([values[k] for k in values])
    ax.set_xticks(range(1, len(values) + 1))
    ax.set_xticklabels(list(values), rotation=20)
    ax.set_ylabel("normalised consistency error" if report.normalized else "consistency error")
    ax.set_title(f"{report.concept}: {report.l1} -> {report.l2}")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_consistency(payload: dict, out_dir: Path) -> list[Path]:
    manifest = payload.get("manifest")
    reports = [ConsistencyReport.model_validate(r) for r in payload["reports"]]
    sweeps = [GammaSweep.model_validate(s) for s in payload.get("sweeps", [])]
    files = [write_csv(out_dir / "consistency.csv", consistency_frame(reports), manifest=manifest)]
    boxes = _envelope(payload, reports=None, sweeps=None)
    boxes["boxplots"] = [boxplot_payload(r) for r in reports]
    files.append(write_json(out_dir / "consistency_boxplots.json", boxes))
    if sweeps:
        rows = [{"concept": s.concept, "l1": s.l1, "l2": s.l2, "gamma": g, "mean_error": m, "relative_error": rel,
                 "fixed_gamma1": s.fixed_gamma1, "r_squared": s.r_squared}
                for s in sweeps for g, m, rel in zip(s.gammas, s.mean_errors, s.relative_errors)]
        files.append(write_csv(out_dir / "gamma_sweeps.csv", pd.DataFrame(rows), manifest=manifest))
    for r in reports:
        name = f"consistency_{_safe(r.concept)}_{_safe(r.l1)}_{_safe(r.l2)}.png"
        files.append(plot_consistency(r, out_dir / "figures" / name))
    return files


# ---------------------------------------------------------------- similarity and heatmaps

def similarity_frame(matrix: SimilarityMatrix) -> pd.DataFrame:
    frame = pd.DataFrame(matrix.matrix, index=matrix.concepts, columns=matrix.concepts)
    frame.index.name = matrix.layer
    return frame


def write_similarity_csv(matrix: SimilarityMatrix, path: Path, manifest: str | None = None) -> Path:
    return write_csv(path, similarity_frame(matrix), index=True, manifest=manifest)


def read_similarity_csv(path: Path, label: str = "") -> SimilarityMatrix:
    frame = read_csv(path, index_col=0, float_precision="round_trip")
    return SimilarityMatrix(
        concepts=[str(c) for c in frame.index],
        layer=str(frame.index.name),
        matrix=frame.to_numpy(dtype=np.float64).tolist(),
        label=label,
    )


def similarity_heatmap(matrix: SimilarityMatrix, manifest: str | None = None) -> HeatmapPayload:
    title = f"{matrix.label} {matrix.layer}".strip()
    return HeatmapPayload(kind="similarity", title=title, row_labels=matrix.concepts,
                          col_labels=matrix.concepts, values=matrix.matrix, manifest=manifest)


def grid_heatmap(grid: SpatialNormGrid, manifest: str | None = None) -> HeatmapPayload:
    values = grid.grid
    return HeatmapPayload(
        kind="spatial_norm" if grid.reduction == "norm" else "spatial_mean",
        title=f"{grid.concept} {grid.layer}",
        row_labels=[str(i) for i in range(len(values))],
        col_labels=[str(j) for j in range(len(values[0]) if values else 0)],
        values=values,
        manifest=manifest,
    )


def write_heatmap_schema(out_dir: Path) -> Path:
    return write_json(out_dir / HEATMAP_SCHEMA_FILE, HeatmapPayload.model_json_schema())


def plot_heatmap(payload: HeatmapPayload, path: Path) -> Path:
    values = np.asarray(payload.values)
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * values.shape[1] + 2), max(3.5, 0.5 * values.shape[0] + 1.5)))
    if payload.kind == "similarity":
        image = ax.imshow(values, cmap="coolwarm", vmin=-1, vmax=1)
        ax.set_xticks(range(len(payload.col_labels)))
        ax.set_xticklabels(payload.col_labels, rotation=45, ha="right")
        ax.set_yticks(range(len(payload.row_labels)))
        ax.set_yticklabels(payload.row_labels)
    else:
        image = ax.imshow(values, cmap="viridis" if payload.kind == "spatial_norm" else "coolwarm")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(image, ax=ax)
    ax.set_title(payload.title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_entanglement(payload: dict, out_dir: Path) -> list[Path]:
    manifest = payload.get("manifest")
    matrices = [SimilarityMatrix.model_validate(m) for m in payload.get("matrices", [])]
    dots = [DotDistribution.model_validate(d) for d in payload.get("dots", [])]
    flags = [EntanglementResult.model_validate(f) for f in payload.get("flags", [])]
    files = [write_heatmap_schema(out_dir)]
    for m in matrices:
        stem = f"similarity_{_safe(m.label or 'model')}_{_safe(m.layer)}"
        files.append(write_similarity_csv(m, out_dir / f"{stem}.csv", manifest))
        heatmap = similarity_heatmap(m, manifest)
        files.append(write_json(out_dir / f"{stem}.heatmap.json", json.loads(heatmap.model_dump_json())))
        files.append(plot_heatmap(heatmap, out_dir / "figures" / f"{stem}.png"))
    if dots:
        rows = [{"cav_concept": d.cav_concept, "cav_layer": d.cav_layer, "cav_r": d.cav_r,
                 "probe": d.probe_label, "value": v} for d in dots for v in d.values]
        files.append(write_csv(out_dir / "dot_distributions.csv", pd.DataFrame(rows), manifest=manifest))
    if flags:
        files.append(write_csv(out_dir / "entanglement.csv", pd.DataFrame([f.model_dump() for f in flags]),
                               manifest=manifest))
    return files


def emit_spatial(payload: dict, out_dir: Path) -> list[Path]:
    manifest = payload.get("manifest")
    grids = [SpatialNormGrid.model_validate(g) for g in payload.get("grids", [])]
    dependence = [SpatialDependenceResult.model_validate(d) for d in payload.get("dependence", [])]
    reports = [TcavReport.model_validate(r) for r in payload.get("reports", [])]
    files = [write_heatmap_schema(out_dir)]
    for g in grids:
        stem = f"spatial_{g.reduction}_{_safe(g.concept)}_{_safe(g.layer)}"
        files.append(write_csv(out_dir / f"{stem}.csv", pd.DataFrame(g.grid), manifest=manifest))
        heatmap = grid_heatmap(g, manifest)
        files.append(write_json(out_dir / f"{stem}.heatmap.json", json.loads(heatmap.model_dump_json())))
        files.append(plot_heatmap(heatmap, out_dir / "figures" / f"{stem}.png"))
    if payload.get("mass"):
        files.append(write_csv(out_dir / "spatial_mass.csv", pd.DataFrame(payload["mass"]), manifest=manifest))
    if dependence:
        files.append(write_csv(out_dir / "spatial_dependence.csv", pd.DataFrame([d.model_dump() for d in dependence]),
                               manifest=manifest))
    if reports:
        files.append(write_csv(out_dir / "spatial_tcav.csv", tcav_frame(reports), manifest=manifest))
        for class_name in dict.fromkeys(r.class_name for r in reports):
            subset = [r for r in reports if r.class_name == class_name]
            files.append(plot_tcav(subset, out_dir / "figures" / f"spatial_tcav_{_safe(class_name)}.png"))
    if payload.get("contrast"):
        files.append(write_json(out_dir / "spatial_contrast.json", _envelope(payload, grids=None, dependence=None,
                                                                           reports=None, mass=None)))
    return files


# ---------------------------------------------------------------- cav, theory, training

def emit_cav(payload: dict, out_dir: Path) -> list[Path]:
    frame = pd.DataFrame(payload["accuracy"])
    return [write_csv(out_dir / "cav_accuracy.csv", frame, manifest=payload.get("manifest"))]


def emit_theory(payload: dict, out_dir: Path) -> list[Path]:
    manifest = payload.get("manifest")
    verdicts = [TheoryVerdict.model_validate(v) for v in payload["verdicts"]]
    frame = pd.DataFrame([{"case": v.case, "consistent": v.consistent, "max_error": v.max_error,
                           "witnesses": len(v.witnesses), "detail": v.detail} for v in verdicts])
    return [write_csv(out_dir / "theory.csv", frame, manifest=manifest),
            write_json(out_dir / "theory.json", _envelope(payload))]


def save_learning_curves(log: TrainingLog, out_dir: str = "artifacts") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    epochs = [r.epoch for r in log.epochs]
    saved = []

    # ---- Loss plot ----
    plt.figure()
    plt.plot(epochs, [r.loss for r in log.epochs], label="train_loss")
    if any(r.val_loss is not None for r in log.epochs):
        plt.plot(epochs, [r.val_loss for r in log.epochs], label="val_loss")
    plt.xlabel("Epoch")
    plt.ylabel("Loss")
    plt.title("Training vs Validation Loss")
    plt.legend()
    plt.grid(True)
    plt.tight_layout()
    path = os.path.join(out_dir, "learning_curve_loss.png")
    plt.savefig(path, dpi=200)
    plt.close()
    saved.append(path)

    # ---- Accuracy plot ----
    plt.figure()
    plt.plot(epochs, [r.accuracy for r in log.epochs], label="train_acc")
    if any(r.val_accuracy is not None for r in log.epochs):
        plt.plot(epochs, [r.val_accuracy for r in log.epochs], label="val_acc")
    plt.xlabel("Epoch")
    plt.ylabel("Accuracy")
    plt.title("Training vs Validation Accuracy")
    plt.legend()
    plt.grid(True)
    plt.tight_layout()
    path = os.path.join(out_dir, "learning_curve_accuracy.png")
    plt.savefig(path, dpi=200)
    plt.close()
    saved.append(path)
    return saved


def emit_training(payload: dict, out_dir: Path) -> list[Path]:
    manifest = payload.get("manifest")
    log = TrainingLog.model_validate(payload["training_log"])
    frame = pd.DataFrame([e.model_dump() for e in log.epochs])
    files = [write_csv(out_dir / "training_log.csv", frame, manifest=manifest)]
    if log.epochs:
        files.extend(Path(p) for p in save_learning_curves(log, str(out_dir / "figures")))
    return files


def _envelope(payload: dict, **drop) -> dict:
    body = {k: v for k, v in payload.items() if k not in drop}
    body["schema_version"] = SCHEMA_VERSION
    return body


EMITTERS = {
    "train": emit_training,
    "cav": emit_cav,
    "tcav": emit_tcav,
    "consistency": emit_consistency,
    "entangle": emit_entanglement,
    "spatial": emit_spatial,
    "verify-theory": emit_theory,
}


def emit_report(kind: str, payload: dict, out_dir: Path) -> list[Path]:
    """Write CSV, JSON and figures for one analysis artifact."""
    if kind not in EMITTERS:
        raise ValueError(f"unknown report kind {kind!r}; expected one of {', '.join(EMITTERS)}")
    check_schema(payload)
    files = EMITTERS[kind](payload, Path(out_dir))
    logger.info("%s report: %d files", kind, len(files))
    return files
