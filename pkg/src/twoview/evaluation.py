"""Confusion matrices, per-class and weighted precision/recall, report rendering,
and feature export for external embedding tools."""

from __future__ import annotations

import csv
import json
import logging
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .nets import MultiViewModel, SingleViewModel, softmax
from .training import pair_views

log = logging.getLogger(__name__)

CONTEXTS = ("surface", "section", "mixed", "paired")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # counts[true, predicted]
    classes: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_from_labels(y_true, y_pred, classes: list[str]) -> ConfusionMatrix:
    c = len(classes)
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return ConfusionMatrix(counts, list(classes))


def argmax_lowest(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs, axis=1)


def predict_proba(model, items, batch_size: int = 256) -> np.ndarray:
    """Class probabilities for patches (single-view) or PatchPairs (multi-view)."""
    dtype = next(model.parameters()).dtype
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(items), batch_size):
            chunk = items[i : i + batch_size]
            if isinstance(model, MultiViewModel):
                xs = torch.from_numpy(np.stack([p.surface.values for p in chunk])).to(dtype)
                xt = torch.from_numpy(np.stack([p.section.values for p in chunk])).to(dtype)
                logits = model(xs, xt)
            else:
                logits = model(torch.from_numpy(np.stack([p.values for p in chunk])).to(dtype))
            out.append(softmax(logits).numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def confusion(model, items, classes: list[str]) -> ConfusionMatrix:
    if not items:
        raise ValueError("cannot evaluate an empty test set")
    probs = predict_proba(model, items)
    y_true = [classes.index(it.label) for it in items]
    return confusion_from_labels(y_true, argmax_lowest(probs), classes)


@dataclass
class MetricsReport:
    classes: list[str]
    precision: list[float]
    recall: list[float]
    support: list[int]
    weighted_precision: float
    weighted_recall: float
    accuracy: float
    context: str = "mixed"
    model_id: str = ""
    seed: int | None = None
    zero_prediction_classes: list[str] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def metrics_from_confusion(cm: ConfusionMatrix, context: str = "mixed", model_id: str = "",
                           seed: int | None = None) -> MetricsReport:  # fmt: skip
    """Per-class precision/recall and their support-weighted means.

    A class that is never predicted gets precision 0 and is listed in
    ``zero_prediction_classes``.
    """
    m = np.asarray(cm.counts, dtype=np.int64)
    total = int(m.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(m).astype(float)
    predicted = m.sum(axis=0)
    support = m.sum(axis=1)
    precision = np.divide(diag, predicted, out=np.zeros_like(diag), where=predicted > 0)
    recall = np.divide(diag, support, out=np.zeros_like(diag), where=support > 0)
    # exact rational sums, rounded once, so a perfect classifier scores exactly 1.0
    wp = sum((Fraction(int(s) * int(d), int(p)) for s, d, p in zip(support, np.diag(m), predicted) if p), Fraction(0))
    return MetricsReport(
        classes=list(cm.classes),
        precision=precision.tolist(),
        recall=recall.tolist(),
        support=support.tolist(),
        weighted_precision=float(wp / total),
        weighted_recall=float(Fraction(int(diag.sum()), total)),
        accuracy=float(diag.sum() / total),
        context=context,
        model_id=model_id,
        seed=seed,
        zero_prediction_classes=[c for c, n in zip(cm.classes, predicted) if n == 0],
        confusion=m.tolist(),
    )


@dataclass
class SuiteReport:
    rows: list[MetricsReport]
    seeds: dict
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "toolkit_version": __version__,
            "seeds": self.seeds,
            "rows": [r.to_json() for r in self.rows],
            "notes": self.notes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def row(self, model_id: str, context: str) -> MetricsReport | None:
        for r in self.rows:
            if r.model_id == model_id and r.context == context:
                return r
        return None

    def render_text(self) -> str:
        """Aligned table: one line per model, P/R for surface, section and mixed."""
        models = list(dict.fromkeys(r.model_id for r in self.rows))
        header = f"{'Classifier':<28} {'Surf P':>7} {'Surf R':>7} {'Sect P':>7} {'Sect R':>7} {'Mix P':>7} {'Mix R':>7}"
        lines = [f"twoview {__version__}  seeds={json.dumps(self.seeds, sort_keys=True)}", header, "-" * len(header)]

        def cell(r):
            return ("--", "--") if r is None else (f"{r.weighted_precision:.4f}", f"{r.weighted_recall:.4f}")

        for mid in models:
            mixed = self.row(mid, "mixed") or self.row(mid, "paired")
            cols = [*cell(self.row(mid, "surface")), *cell(self.row(mid, "section")), *cell(mixed)]
            lines.append(f"{mid:<28} " + " ".join(f"{c:>7}" for c in cols))
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"


def model_label(model, name: str | None = None) -> str:
    if name:
        return name
    if isinstance(model, MultiViewModel):
        return f"MV-{model.branch_surface.config.family}-{model.fusion}"
    return f"SV-{model.extractor.config.family}"


def evaluate_suite(sv_model: SingleViewModel | None, mv_model: MultiViewModel | None, test_patches, classes: list[str],
                   pairing: str = "specimen_first", pairing_seed: int = 0, names: dict | None = None) -> SuiteReport:  # fmt: skip
    """Table of weighted metrics: SV on surface, section and mixed patches; MV on pairs.

    "Mixed" for the single-view model is the union of surface and section test
    patches evaluated one at a time; the support-weighted average of the
    surface and section rows is added as a note for comparison.
    """
    names = names or {}
    rows: list[MetricsReport] = []
    notes: list[str] = []
    if sv_model is not None:
        sid = model_label(sv_model, names.get("sv"))
        subsets = {
            "surface": [p for p in test_patches if p.view == "surface"],
            "section": [p for p in test_patches if p.view == "section"],
            "mixed": list(test_patches),
        }
        for ctx, items in subsets.items():
            if not items:
                log.warning("no %s test patches; row omitted", ctx)
                continue
            rows.append(metrics_from_confusion(confusion(sv_model, items, classes), ctx, sid, pairing_seed))
        s, t = next((r for r in rows if r.context == "surface"), None), next((r for r in rows if r.context == "section"), None)
        if s and t:
            ns, nt = sum(s.support), sum(t.support)
            wp = (ns * s.weighted_precision + nt * t.weighted_precision) / (ns + nt)
            wr = (ns * s.weighted_recall + nt * t.weighted_recall) / (ns + nt)
            notes.append(f"{sid} surface/section support-weighted average: P={wp:.4f} R={wr:.4f}")
    if mv_model is not None:
        mid = model_label(mv_model, names.get("mv"))
        try:
            pairs = pair_views(list(test_patches), pairing, pairing_seed)
        except ValueError as exc:
            log.warning("cannot pair test views (%s); MV row omitted", exc)
            pairs = []
        if pairs:
            rows.append(metrics_from_confusion(confusion(mv_model, pairs, classes), "paired", mid, pairing_seed))
    return SuiteReport(rows, {"pairing_seed": pairing_seed, "pairing": pairing}, notes)


def export_features(model, items, path: str | Path) -> Path:
    """CSV of learned representations: item_id, true_class, context, f0..f{D'-1}.

    Single-view models export the extractor output per patch; multi-view
    models export the post-fusion vector per pair.
    """
    path = Path(path)
    dtype = next(model.parameters()).dtype
    rows = []
    with torch.no_grad():
        for i in range(0, len(items), 256):
            chunk = items[i : i + 256]
            if isinstance(model, MultiViewModel):
                xs = torch.from_numpy(np.stack([p.surface.values for p in chunk])).to(dtype)
                xt = torch.from_numpy(np.stack([p.section.values for p in chunk])).to(dtype)
                feats = model.representation(xs, xt).numpy()
                meta = [(f"{p.surface.patch_id}|{p.section.patch_id}", p.label, "paired") for p in chunk]
            else:
                feats = model.representation(torch.from_numpy(np.stack([p.values for p in chunk])).to(dtype)).numpy()
                meta = [(p.patch_id, p.label, p.view) for p in chunk]
            rows.extend((*m, *map(repr, map(float, f))) for m, f in zip(meta, feats))
    width = model.fused_dim if isinstance(model, MultiViewModel) else model.extractor.feature_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "true_class", "context", *[f"f{j}" for j in range(width)]])
        w.writerows(rows)
    return path
