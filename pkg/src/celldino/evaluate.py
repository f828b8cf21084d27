"""Multi-label metrics (per-class precision/recall/F1, macro-F1), the
90/10 + k-fold cross-validation harness, and report rendering with
mean +- std rows and an error-bar SVG chart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .embed import EmbeddingMatrix
from .head import (
    HeadConfig,
    StandardizationStats,
    apply_standardizer,
    fit_standardizer,
    predict,
    train_head,
)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __post_init__(self):
        self.tp = np.asarray(self.tp, dtype=np.int64)
        self.fp = np.asarray(self.fp, dtype=np.int64)
        self.fn = np.asarray(self.fn, dtype=np.int64)
        if not (self.tp.shape == self.fp.shape == self.fn.shape):
            raise ValueError("tp/fp/fn shapes differ")
        if (self.tp < 0).any() or (self.fp < 0).any() or (self.fn < 0).any():
            raise ValueError("negative counts")


def confusion(y_true, y_pred) -> ConfusionCounts:
    """Per-class true-positive/false-positive/false-negative counts."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.ndim != 2:
        raise ValueError("expected (N, n_classes) multi-hot matrices")
    t = y_true > 0.5
    p = y_pred > 0.5
    return ConfusionCounts(
        tp=(t & p).sum(axis=0),
        fp=(~t & p).sum(axis=0),
        fn=(t & ~p).sum(axis=0),
    )


def f1_per_class(counts: ConfusionCounts) -> np.ndarray:
    """Harmonic mean of precision and recall; empty denominators give 0."""
    tp = counts.tp.astype(np.float64)
    out = np.zeros(tp.shape, dtype=np.float64)
    pred_pos = tp + counts.fp
    true_pos = tp + counts.fn
    valid = (pred_pos > 0) & (true_pos > 0)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(out), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(out), where=true_pos > 0)
    denom = precision + recall
    valid &= denom > 0
    out[valid] = 2.0 * precision[valid] * recall[valid] / denom[valid]
    return out


def macro_f1(f1s: np.ndarray) -> float:
    """Unweighted mean over classes."""
    f1s = np.asarray(f1s, dtype=np.float64)
    if f1s.size == 0:
        raise ValueError("empty F1 vector")
    return float(f1s.mean())


def multilabel_macro_f1(y_true, y_pred) -> float:
    return macro_f1(f1_per_class(confusion(y_true, y_pred)))


# ---------------------------------------------------------------------------
# splits


def holdout_split_ids(
    ids: list[str], seed: int, test_fraction: float = 0.1
) -> tuple[list[str], list[str]]:
    """The 90/10 split shared by pretraining and cross-validation."""
    from .dino import holdout_split

    return holdout_split(list(ids), test_fraction, seed)


def kfold_split(train_ids: list[str], k: int = 5, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """k disjoint (fold-train, fold-val) partitions covering all ids.

    Fold sizes differ by at most one; deterministic per seed.
    """
    n = len(train_ids)
    if not 2 <= k <= n:
        raise ValueError(f"k must be in [2, {n}], got {k}")
    order = np.random.default_rng(seed).permutation(n)
    chunks = np.array_split(order, k)
    folds = []
    for i, chunk in enumerate(chunks):
        val = [train_ids[j] for j in chunk]
        train = [train_ids[j] for c, ch in enumerate(chunks) if c != i for j in ch]
        folds.append((train, val))
    return folds


# ---------------------------------------------------------------------------
# cross-validation harness


@dataclass
class CVReport:
    fold_val_f1: list[float]
    fold_test_f1: list[float]
    mean_test_f1: float
    std_test_f1: float  # sample std (ddof=1) across fold models
    fold_stats: list[dict]  # per-fold standardizer mean/std, for audit
    provenance: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "fold_val_f1": self.fold_val_f1,
            "fold_test_f1": self.fold_test_f1,
            "mean_test_f1": self.mean_test_f1,
            "std_test_f1": self.std_test_f1,
            "fold_stats": self.fold_stats,
            "provenance": self.provenance,
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "CVReport":
        return CVReport(
            fold_val_f1=list(obj["fold_val_f1"]),
            fold_test_f1=list(obj["fold_test_f1"]),
            mean_test_f1=obj["mean_test_f1"],
            std_test_f1=obj["std_test_f1"],
            fold_stats=list(obj["fold_stats"]),
            provenance=dict(obj["provenance"]),
        )


def crossval_run(
    embeddings: EmbeddingMatrix,
    labels: np.ndarray,
    split: tuple[list[str], list[str]],
    head_config: HeadConfig,
    k: int = 5,
    fold_seed: int = 0,
) -> CVReport:
    """Train one head per fold on the 90% side; evaluate each fold model on
    its validation fold and on the untouched 10% test set.

    Standardization statistics come from the fold-train rows only and are
    applied unchanged to validation and test rows.
    """
    train_ids, test_ids = split
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise ValueError(f"train/test overlap: {sorted(overlap)[:3]}...")
    row_of = {image_id: i for i, image_id in enumerate(embeddings.image_ids)}
    missing = [i for i in list(train_ids) + list(test_ids) if i not in row_of]
    if missing:
        raise ValueError(f"split references unknown image ids: {missing[:3]}...")
    labels = np.asarray(labels, dtype=np.float32)
    if labels.shape[0] != embeddings.n:
        raise ValueError("label count != embedding rows")

    def rows_for(ids):
        idx = np.array([row_of[i] for i in ids], dtype=np.int64)
        return embeddings.matrix[idx], labels[idx]

    test_rows, test_labels = rows_for(test_ids)
    fold_val_f1: list[float] = []
    fold_test_f1: list[float] = []
    fold_stats: list[dict] = []
    for fold_idx, (fold_train, fold_val) in enumerate(kfold_split(train_ids, k=k, seed=fold_seed)):
        tr_rows, tr_labels = rows_for(fold_train)
        va_rows, va_labels = rows_for(fold_val)
        stats = fit_standardizer(tr_rows)
        cfg = HeadConfig(**{**head_config.__dict__, "seed": head_config.seed + fold_idx})
        params, _ = train_head(
            apply_standardizer(stats, tr_rows), tr_labels, None, None, cfg
        )
        val_pred = predict(params, apply_standardizer(stats, va_rows), cfg)
        test_pred = predict(params, apply_standardizer(stats, test_rows), cfg)
        fold_val_f1.append(multilabel_macro_f1(va_labels, val_pred))
        fold_test_f1.append(multilabel_macro_f1(test_labels, test_pred))
        fold_stats.append(
            {"mean": stats.mean.tolist(), "std": stats.std.tolist(), "n_train": len(fold_train)}
        )
    arr = np.asarray(fold_test_f1, dtype=np.float64)
    provenance = {
        "embedding": dict(embeddings.provenance),
        "head_config": {**head_config.__dict__, "hidden": list(head_config.hidden)},
        "k": k,
        "fold_seed": fold_seed,
        "test_ids": list(test_ids),
    }
    provenance["embedding"].pop("image_ids", None)
    return CVReport(
        fold_val_f1=fold_val_f1,
        fold_test_f1=fold_test_f1,
        mean_test_f1=float(arr.mean()),
        std_test_f1=float(arr.std(ddof=1)),
        fold_stats=fold_stats,
        provenance=provenance,
    )


def save_report(path, report: CVReport):
    from .binio import canonical_json

    with open(path, "wb") as f:
        f.write(canonical_json(report.to_json_obj()) + b"\n")


def load_report(path) -> CVReport:
    with open(path, "r", encoding="utf-8") as f:
        return CVReport.from_json_obj(json.load(f))


# ---------------------------------------------------------------------------
# rendering


def _row_label(report: CVReport) -> dict:
    emb = report.provenance.get("embedding", {})
    adapter = emb.get("adapter", {})
    approach = "channel replication" if adapter.get("kind") == "replicate" else "channel mapping"
    return {
        "weights": emb.get("weights", "?"),
        "model": emb.get("model", "?"),
        "approach": approach,
        "epochs": emb.get("dino_epochs", "-"),
    }


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} (± {std:.4f})"


def render_table(reports: list[CVReport]) -> str:
    """Text table with one row per configuration."""
    header = ("Weights", "Model", "Embedding Approach", "DINO Epochs", "Mean Macro F1")
    rows = []
    for report in reports:
        label = _row_label(report)
        rows.append(
            (
                str(label["weights"]),
                str(label["model"]),
                label["approach"],
                str(label["epochs"]),
                format_mean_std(report.mean_test_f1, report.std_test_f1),
            )
        )
    widths = [max(len(header[c]), *(len(r[c]) for r in rows)) if rows else len(header[c]) for c in range(5)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def render_error_bar_svg(reports: list[CVReport], title: str = "Mean macro F1 by configuration") -> str:
    """Deterministic bar chart with +-1 std error bars, one bar per report."""
    width, height = 640, 420
    ml, mr, mt, mb = 60, 20, 40, 110
    plot_w, plot_h = width - ml - mr, height - mt - mb
    n = len(reports)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{title}</text>',
    ]
    for tick in range(6):
        frac = tick / 5.0
        y = mt + plot_h * (1.0 - frac)
        parts.append(
            f'<line x1="{ml}" y1="{y:.1f}" x2="{width - mr}" y2="{y:.1f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{frac:.1f}</text>'
        )
    if n:
        slot = plot_w / n
        bar_w = slot * 0.55
        for i, report in enumerate(reports):
            label = _row_label(report)
            mean, std = report.mean_test_f1, report.std_test_f1
            x = ml + slot * i + (slot - bar_w) / 2
            y = mt + plot_h * (1.0 - mean)
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" '
                f'height="{plot_h * mean:.1f}" fill="#4878a8"/>'
            )
            cx = x + bar_w / 2
            y_lo = mt + plot_h * (1.0 - max(mean - std, 0.0))
            y_hi = mt + plot_h * (1.0 - min(mean + std, 1.0))
            parts.append(
                f'<line x1="{cx:.1f}" y1="{y_lo:.1f}" x2="{cx:.1f}" y2="{y_hi:.1f}" '
                f'stroke="black" stroke-width="1.5"/>'
            )
            for yy in (y_lo, y_hi):
                parts.append(
                    f'<line x1="{cx - 6:.1f}" y1="{yy:.1f}" x2="{cx + 6:.1f}" y2="{yy:.1f}" '
                    f'stroke="black" stroke-width="1.5"/>'
                )
            caption = f"{label['weights']} / {label['approach']}"
            parts.append(
                f'<text x="{cx:.1f}" y="{mt + plot_h + 16}" text-anchor="end" '
                f'font-family="sans-serif" font-size="11" '
                f'transform="rotate(-35 {cx:.1f} {mt + plot_h + 16})">{caption}</text>'
            )
            parts.append(
                f'<text x="{cx:.1f}" y="{y - 6:.1f}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10">{mean:.4f}</text>'
            )
    parts.append(
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{width - mr}" y2="{mt + plot_h}" '
        f'stroke="black" stroke-width="1"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
