"""Uncertainty-quality metrics and report assembly.

The central question the report answers: does higher predicted text
uncertainty actually mean worse retrieval?  Queries are grouped into
equal-count quantile bins by their uncertainty scalar, Recall@1 is
computed per bin for both retrieval directions, and Spearman's rank
correlation / an OLS R^2 over (bin index, bin recall) quantify how
monotone and how linear the degradation is.  A well-calibrated model
shows strictly decreasing per-bin recall, S close to -1 and R^2 close
to 1.

All statistics depend on the uncertainty values only through their ranks,
so the whole report is invariant under any strictly monotone rescaling of
the uncertainty scalar.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .adapter import DecomposedBatch, Model
from .objective import model_likelihood_matrix


@dataclass
class GroupStat:
    mean_uncertainty: float
    mean_log_likelihood: float
    count: int


@dataclass
class EvalReport:
    overall_recall1_t2i: float
    overall_recall1_i2t: float
    per_bin_recall_t2i: list
    per_bin_recall_i2t: list
    spearman_t2i: float
    spearman_i2t: float
    r2_t2i: float
    r2_i2t: float
    n_bins: int
    group_stats: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "overall_recall1_t2i": self.overall_recall1_t2i,
            "overall_recall1_i2t": self.overall_recall1_i2t,
            "per_bin_recall_t2i": self.per_bin_recall_t2i,
            "per_bin_recall_i2t": self.per_bin_recall_i2t,
            "spearman_t2i": self.spearman_t2i,
            "spearman_i2t": self.spearman_i2t,
            "r2_t2i": self.r2_t2i,
            "r2_i2t": self.r2_i2t,
            "n_bins": self.n_bins,
            "group_stats": None,
        }
        if self.group_stats is not None:
            out["group_stats"] = {
                label: {
                    "mean_uncertainty": s.mean_uncertainty,
                    "mean_log_likelihood": s.mean_log_likelihood,
                    "count": s.count,
                }
                for label, s in sorted(self.group_stats.items())
            }
        return out


def recall_at_k(rankings, ground_truth, k: int) -> float:
    """Fraction of queries whose ground-truth candidate is in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(rankings) != len(ground_truth):
        raise ValueError(f"{len(rankings)} rankings vs {len(ground_truth)} ground-truth labels")
    hits = 0
    for ranking, truth in zip(rankings, ground_truth):
        n = len(ranking.ordered_candidates)
        if not (0 <= truth < n):
            raise ValueError(f"ground-truth index {truth} out of range for {n} candidates")
        hits += any(idx == truth for idx, _ in ranking.ordered_candidates[:k])
    return hits / len(rankings)


def bin_by_uncertainty(uncertainties, n_bins: int) -> np.ndarray:
    """Equal-count quantile bin index per input (0 = least uncertain).

    Ties resolve by stable input order; sizes differ by at most one, with
    the earlier bins taking the extras.
    """
    values = np.asarray(uncertainties, dtype=np.float64)
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    if values.shape[0] < n_bins:
        raise ValueError(f"need at least {n_bins} samples for {n_bins} bins, got {values.shape[0]}")
    order = np.argsort(values, kind="stable")
    bins = np.empty(values.shape[0], dtype=np.int64)
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        bins[chunk] = b
    return bins


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties, in [-1, 1].

    Constant input on either side has no defined ranking signal and is
    reported as 0 with a warning.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError(f"need two equal-length vectors of length >= 2, got {x.shape} and {y.shape}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        warnings.warn("spearman of a constant sequence is undefined; returning 0")
        return 0.0
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    r = float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))
    return max(-1.0, min(1.0, r))


def r_squared(xs, ys) -> float:
    """Coefficient of determination of the OLS line ys ~ xs, clamped to [0, 1].

    Constant xs admit no regression line (error); constant ys are fit
    perfectly by the constant line and return 1 by convention.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise ValueError(f"need two equal-length vectors of length >= 2, got {x.shape} and {y.shape}")
    if np.all(x == x[0]):
        raise ValueError("constant xs: regression slope is undefined")
    if np.all(y == y[0]):
        return 1.0
    xc = x - x.mean()
    slope = float((xc @ (y - y.mean())) / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    residual = y - (intercept + slope * x)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((residual ** 2).sum()) / total
    return max(0.0, min(1.0, r2))


def uncertainty_scalar(side: DecomposedBatch) -> np.ndarray:
    """Per-row uncertainty: -kappa for spherical families, mean per-dimension
    variance for the Gaussian family, -|raw| for the deterministic baseline
    (rank-equivalent placeholder; the kernel ignores the magnitude)."""
    if side.family == "gauss":
        return np.exp(side.log_var).mean(axis=1)
    if side.family == "cosine":
        return -side.norm
    return -side.kappa


def binned_uncertainty_metrics(uncertainties, t2i_hit, i2t_hit, n_bins: int):
    """Quantile-bin queries by uncertainty and summarize recall degradation.

    Returns (per_bin_t2i, per_bin_i2t, S_t2i, S_i2t, r2_t2i, r2_i2t); all
    outputs depend on the uncertainties only through their ranks.
    """
    t2i_hit = np.asarray(t2i_hit, dtype=np.float64)
    i2t_hit = np.asarray(i2t_hit, dtype=np.float64)
    bins = bin_by_uncertainty(uncertainties, n_bins)
    per_bin_t2i = [float(t2i_hit[bins == b].mean()) for b in range(n_bins)]
    per_bin_i2t = [float(i2t_hit[bins == b].mean()) for b in range(n_bins)]
    bin_idx = np.arange(n_bins, dtype=np.float64)
    return (
        per_bin_t2i,
        per_bin_i2t,
        spearman(bin_idx, per_bin_t2i),
        spearman(bin_idx, per_bin_i2t),
        r_squared(bin_idx, per_bin_t2i),
        r_squared(bin_idx, per_bin_i2t),
    )


def build_report(model: Model, dataset, n_bins: int = 5, include_group_stats: bool = False) -> EvalReport:
    """Evaluate a model over every pair of the dataset.

    Per pair, the text row queries all images (t2i) and the image row
    queries all texts (i2t); both directions are binned by the paired
    text's uncertainty (by the paired image's when only the image side is
    probabilistic, as in the image-adapting ablation).
    """
    entries, text_side, image_side = model_likelihood_matrix(
        model, dataset.text_embs, dataset.image_embs
    )
    pairs = dataset.pairs
    t_rows = pairs[:, 0]
    i_rows = pairs[:, 1]
    best_image = entries.argmax(axis=1)
    best_text = entries.argmax(axis=0)
    t2i_hit = (best_image[t_rows] == i_rows).astype(np.float64)
    i2t_hit = (best_text[i_rows] == t_rows).astype(np.float64)

    if text_side is not None:
        unc = uncertainty_scalar(text_side)[t_rows]
    else:
        unc = uncertainty_scalar(image_side)[i_rows]
    per_bin_t2i, per_bin_i2t, s_t2i, s_i2t, r2_t2i, r2_i2t = binned_uncertainty_metrics(
        unc, t2i_hit, i2t_hit, n_bins
    )

    group_stats = None
    if include_group_stats:
        if dataset.meta is None:
            raise ValueError("group statistics requested but the dataset has no metadata")
        pair_ll = entries[t_rows, i_rows]
        group_stats = {}
        labels = {}
        levels = np.array([m.level for m in dataset.meta])
        tokens = np.array([m.tokens for m in dataset.meta], dtype=np.float64)
        token_bins = bin_by_uncertainty(tokens, 4)
        for p in range(pairs.shape[0]):
            for label in (
                f"level={levels[p]}",
                f"tokens_q{token_bins[p] + 1}",
                f"group={dataset.meta[p].group}",
            ):
                labels.setdefault(label, []).append(p)
        for label, members in labels.items():
            members = np.asarray(members)
            group_stats[label] = GroupStat(
                mean_uncertainty=float(unc[members].mean()),
                mean_log_likelihood=float(pair_ll[members].mean()),
                count=int(members.shape[0]),
            )

    return EvalReport(
        overall_recall1_t2i=float(t2i_hit.mean()),
        overall_recall1_i2t=float(i2t_hit.mean()),
        per_bin_recall_t2i=per_bin_t2i,
        per_bin_recall_i2t=per_bin_i2t,
        spearman_t2i=s_t2i,
        spearman_i2t=s_i2t,
        r2_t2i=r2_t2i,
        r2_i2t=r2_i2t,
        n_bins=n_bins,
        group_stats=group_stats,
    )
