"""AUC, accuracy and Cohen's kappa, plus the evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REPORT_COLUMNS = ("auc_h1", "auc_h2", "auc_h2_d", "acc", "kappa")


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    # rank-based count: for each positive, negatives strictly below plus half the ties
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    tied = np.searchsorted(neg_sorted, pos, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (len(pos) * len(neg)))


def macro_ovr_auc(probs, labels, n_classes: int = 3) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    missing = [c for c in range(n_classes) if not np.any(labels == c)]
    if missing:
        raise ValueError(f"classes absent from labels: {missing}")
    return float(np.mean([roc_auc(probs[:, c], labels == c) for c in range(n_classes)]))


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError(f"need equal non-empty lengths, got {preds.shape} and {labels.shape}")
    return float(np.mean(preds == labels))


def cohen_kappa(preds, labels) -> float:
    """(p_o - p_e) / (1 - p_e); 0 when chance agreement is already 1."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size < 2:
        raise ValueError("kappa needs at least two ratings")
    classes = np.union1d(preds, labels)
    p_o = float(np.mean(preds == labels))
    p_e = float(sum(np.mean(preds == c) * np.mean(labels == c) for c in classes))
    if p_e == 1.0:
        return 0.0
    return (p_o - p_e) / (1.0 - p_e)


@dataclass
class EvalReport:
    auc_h1: float
    auc_h2: float
    auc_h2_d: float
    acc: float
    kappa: float
    by_texture: dict[str, tuple[float, float]] = field(default_factory=dict)  # texture -> (acc, kappa)

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, c):.6f}" for c in REPORT_COLUMNS)

    def __str__(self):
        lines = [f"AUC@H1 {self.auc_h1:.4f}  AUC@H2 {self.auc_h2:.4f}  AUC@H2-D {self.auc_h2_d:.4f}",
                 f"accuracy {self.acc:.4f}  kappa {self.kappa:.4f}"]
        for tex, (acc, kap) in sorted(self.by_texture.items()):
            lines.append(f"  {tex:<10s} accuracy {acc:.4f}  kappa {kap:.4f}")
        return "\n".join(lines)


def build_report(h1_scores, h2_probs, preds, labels, textures=None) -> EvalReport:
    labels = np.asarray(labels).astype(int)
    preds = np.asarray(preds).astype(int)
    h2_probs = np.asarray(h2_probs)
    report = EvalReport(
        auc_h1=roc_auc(h1_scores, labels == 1),
        auc_h2=macro_ovr_auc(h2_probs, labels),
        auc_h2_d=roc_auc(h2_probs[:, 1], labels == 1),
        acc=accuracy(preds, labels),
        kappa=cohen_kappa(preds, labels),
    )
    if textures is not None:
        textures = np.asarray(textures)
        for tex in np.unique(textures):
            sel = textures == tex
            kap = cohen_kappa(preds[sel], labels[sel]) if sel.sum() >= 2 else float("nan")
            report.by_texture[str(tex)] = (accuracy(preds[sel], labels[sel]), kap)
    return report
