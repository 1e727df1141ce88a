"""Dual-flow anomaly scoring and privacy-utility evaluation.

An image is scored by the difference of exact log densities under two flows:
one trained on normal images only, one on the normal/abnormal mixture.  Up
to a constant prior term that cancels in rank statistics, this is the log
posterior probability of the normal class, so higher means more normal.
Utility of a privacy budget is the ROC AUC of this score over a privatized
test set.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .flow.model import log_prob
from .mechanism import privatize_batch, privatize_pixels_batch

LABELS = ("normal", "abnormal")


@dataclass
class ScoreEntry:
    image_id: str
    label: str
    score: float


@dataclass
class ScoreSet:
    entries: list

    def __post_init__(self):
        for e in self.entries:
            if e.label not in LABELS:
                raise UsageError(f"label {e.label!r} is not one of {LABELS}")
            if not math.isfinite(e.score):
                raise UsageError(f"non-finite score for image {e.image_id!r}")

    def split(self):
        normal = np.array([e.score for e in self.entries if e.label == "normal"])
        abnormal = np.array([e.score for e in self.entries if e.label == "abnormal"])
        return normal, abnormal


def posterior_score(model_normal, model_mixture, x):
    """log p(x | normal flow) - log p(x | mixture flow); higher = more normal."""
    if model_normal.input_shape != model_mixture.input_shape:
        raise UsageError("the two models must share an input shape")
    return log_prob(model_normal, x) - log_prob(model_mixture, x)


def score_images(model_normal, model_mixture, images, labels, ids=None, batch_size=256):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n = images.shape[0]
    if len(labels) != n:
        raise UsageError("labels must match the number of images")
    scores = np.empty(n)
    for lo in range(0, n, batch_size):
        chunk = images[lo : lo + batch_size]
        scores[lo : lo + chunk.shape[0]] = log_prob(model_normal, chunk) - log_prob(
            model_mixture, chunk
        )
    entries = [
        ScoreEntry(ids[i] if ids else str(i), labels[i], float(scores[i])) for i in range(n)
    ]
    return ScoreSet(entries)


def _ranks_with_ties(values):
    """1-based fractional ranks; tied values share the mean of their ranks."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(score_set):
    """Mann-Whitney AUC: P(random normal outranks random abnormal), ties half.

    Equals the trapezoidal area under the ROC curve.  Accepts a ScoreSet or
    a (normal_scores, abnormal_scores) pair.
    """
    if isinstance(score_set, ScoreSet):
        normal, abnormal = score_set.split()
    else:
        normal, abnormal = (np.asarray(v, dtype=np.float64) for v in score_set)
    if len(normal) == 0 or len(abnormal) == 0:
        raise UsageError("AUC needs at least one score of each label")
    ranks = _ranks_with_ties(np.concatenate([normal, abnormal]))
    rank_sum = ranks[: len(normal)].sum()
    u_stat = rank_sum - len(normal) * (len(normal) + 1) / 2.0
    return u_stat / (len(normal) * len(abnormal))


def roc_points(score_set):
    """ROC curve of the normal-vs-abnormal score: (FPR, TPR) per threshold."""
    if isinstance(score_set, ScoreSet):
        normal, abnormal = score_set.split()
    else:
        normal, abnormal = (np.asarray(v, dtype=np.float64) for v in score_set)
    if len(normal) == 0 or len(abnormal) == 0:
        raise UsageError("ROC needs at least one score of each label")
    thresholds = np.unique(np.concatenate([normal, abnormal]))[::-1]
    fpr = [0.0]
    tpr = [0.0]
    for t in thresholds:
        tpr.append(float(np.mean(normal >= t)))
        fpr.append(float(np.mean(abnormal >= t)))
    return np.array(fpr), np.array(tpr)


def save_scores(score_set, path):
    """Persist as delimited text: id, label, score (tab separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in score_set.entries:
            fh.write(f"{e.image_id}\t{e.label}\t{e.score:.17g}\n")


def load_scores(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise UsageError(f"{path}:{line_no}: expected 3 tab-separated fields")
            entries.append(ScoreEntry(parts[0], parts[1], float(parts[2])))
    return ScoreSet(entries)


@dataclass
class UtilityRow:
    epsilon_label: str
    epsilon: float
    auc_by_mechanism: dict  # mechanism -> mean AUC
    seed_aucs: dict  # mechanism -> list of per-seed AUCs


def utility_curve(
    model_normal,
    model_mixture,
    images,
    labels,
    params,
    pixel_sens,
    epsilons,
    seeds=(0, 1, 2),
    ids=None,
    epsilon_labels=None,
):
    """AUC as a function of the privacy budget, per mechanism.

    For every budget, every image is privatized with the latent mechanism
    (using ``model_mixture`` as the obfuscation flow) and with the
    pixel-domain baseline, then scored by both flows.  The per-budget AUC is
    averaged over the given privatization seeds; the individual values are
    kept in the row.  The infinite budget is run without clipping so it
    reduces to the plain roundtrip.
    """
    images = np.asarray(images, dtype=np.float64)
    if epsilon_labels is None:
        epsilon_labels = ["inf" if math.isinf(e) else f"{e:g}" for e in epsilons]
    rows = []
    for eps, eps_label in zip(epsilons, epsilon_labels):
        clip = not math.isinf(eps)
        per_seed = {"latent-laplace": [], "pixel-laplace": []}
        for seed in seeds:
            run = params.with_epsilon(eps)
            priv, _ = privatize_batch(model_mixture, images, run, seed, clip=clip, ids=ids)
            scores = score_images(model_normal, model_mixture, priv, labels, ids)
            per_seed["latent-laplace"].append(auc(scores))
            base = privatize_pixels_batch(images, eps, pixel_sens, seed)
            scores = score_images(model_normal, model_mixture, base, labels, ids)
            per_seed["pixel-laplace"].append(auc(scores))
        rows.append(
            UtilityRow(
                epsilon_label=eps_label,
                epsilon=eps,
                auc_by_mechanism={k: float(np.mean(v)) for k, v in per_seed.items()},
                seed_aucs=per_seed,
            )
        )
    return rows


def write_utility_table(rows, path):
    """Delimited text table, one row per budget, one column per mechanism."""
    mechanisms = sorted(rows[0].auc_by_mechanism) if rows else []
    with open(path, "w", encoding="utf-8") as fh:
        header = ["epsilon"] + [f"auc_{m}" for m in mechanisms] + [f"seed_aucs_{m}" for m in mechanisms]
        fh.write("\t".join(header) + "\n")
        for row in rows:
            cells = [row.epsilon_label]
            cells += [f"{row.auc_by_mechanism[m]:.6f}" for m in mechanisms]
            cells += [",".join(f"{v:.6f}" for v in row.seed_aucs[m]) for m in mechanisms]
            fh.write("\t".join(cells) + "\n")


_SVG_COLORS = {"latent-laplace": "#1f77b4", "pixel-laplace": "#d62728"}


def utility_svg(rows, width=640, height=420):
    """Hand-rolled SVG line plot: per-element budget on a log axis vs AUC.

    Deterministic output (no timestamps or generated ids) so reports can be
    compared byte for byte across runs.
    """
    margin = 60
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    finite = [r for r in rows if not math.isinf(r.epsilon)]
    if finite:
        log_eps = [math.log10(r.epsilon) for r in finite]
        lo, hi = min(log_eps), max(log_eps)
        if hi - lo < 1e-9:
            lo, hi = lo - 1.0, hi + 1.0
    else:
        lo, hi = 0.0, 1.0
    # Infinite budgets sit on a reserved slot at the right edge.
    span = hi - lo

    def x_pos(eps):
        if math.isinf(eps):
            return margin + plot_w
        return margin + (math.log10(eps) - lo) / span * (plot_w * 0.85)

    def y_pos(value):
        return margin + (1.0 - value) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{margin + plot_h}" x2="{margin + plot_w}" y2="{margin + plot_h}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{margin + plot_h}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="13">total privacy budget</text>',
        f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {height / 2:.1f})">AUC</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y_pos(tick)
        parts.append(f'<line x1="{margin - 4}" y1="{y:.1f}" x2="{margin}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{margin - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{tick:g}</text>')
    for row in rows:
        x = x_pos(row.epsilon)
        parts.append(
            f'<text x="{x:.1f}" y="{margin + plot_h + 16}" text-anchor="middle" font-size="11">{row.epsilon_label}</text>'
        )
    mechanisms = sorted(rows[0].auc_by_mechanism) if rows else []
    for idx, mech in enumerate(mechanisms):
        color = _SVG_COLORS.get(mech, "#2ca02c")
        pts = " ".join(
            f"{x_pos(r.epsilon):.2f},{y_pos(r.auc_by_mechanism[mech]):.2f}" for r in rows
        )
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        for r in rows:
            parts.append(
                f'<circle cx="{x_pos(r.epsilon):.2f}" cy="{y_pos(r.auc_by_mechanism[mech]):.2f}" r="3" fill="{color}"/>'
            )
        ly = margin + 16 + 16 * idx
        parts.append(f'<rect x="{margin + 10}" y="{ly - 9}" width="12" height="12" fill="{color}"/>')
        parts.append(f'<text x="{margin + 28}" y="{ly + 1}" font-size="12">{mech}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_utility_svg(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(utility_svg(rows))
