"""Domain similarity from probability-map histograms, and the gated driver.

The source-trained binarizer predicts foreground-probability maps for both
domains; each domain's pixel probabilities are pooled into one normalized
histogram (bin width ``h_prec``). The Pearson correlation between the two
histograms decides whether the plain model transfers (high correlation) or
adversarial adaptation should be trained (correlation at or below ``rho_th``).
KL and Jensen-Shannon divergences plus histogram intersection are computed
alongside for reporting.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .models import predict_prob_map
from .training import TrainConfig, TrainedBinarizer, binarize, train_bindann, train_sae

__all__ = [
    "USE_SAE",
    "USE_DA",
    "DegenerateHistogramError",
    "DomainHistogram",
    "new_histogram",
    "accumulate_histogram",
    "normalize_histogram",
    "pearson",
    "kl_divergence",
    "js_divergence",
    "hist_intersection",
    "gate_decision",
    "SimilarityReport",
    "compare_histograms",
    "domain_histogram",
    "intra_domain_rho",
    "AutoRunResult",
    "autobindann",
    "run_autobindann",
    "histogram_csv",
]

USE_SAE = "UseSAE"
USE_DA = "UseDA"

_KL_SMOOTHING = 1e-10


class DegenerateHistogramError(ValueError):
    """A histogram with zero variance cannot be correlated."""


@dataclass
class DomainHistogram:
    """Pixel counts (or masses, once normalized) over probability bins."""

    bins: np.ndarray
    bin_width: float
    normalized: bool = False

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.float64)
        expected = _bin_count(self.bin_width)
        if self.bins.shape != (expected,):
            raise ValueError(f"expected {expected} bins for width {self.bin_width}")
        if np.any(self.bins < 0):
            raise ValueError("histogram bins must be non-negative")


def _bin_count(h_prec):
    if not 0.0 < h_prec <= 1.0:
        raise ValueError(f"bin width {h_prec} outside (0, 1]")
    n = 1.0 / h_prec
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"bin width {h_prec} does not divide 1 into whole bins")
    return int(round(n))


def new_histogram(h_prec) -> DomainHistogram:
    return DomainHistogram(np.zeros(_bin_count(h_prec)), h_prec)


def accumulate_histogram(prob_map, h_prec, acc=None) -> DomainHistogram:
    """Add one map's pixels into the running domain histogram.

    Pixel p lands in bin floor(p / h_prec); p == 1.0 lands in the closed top
    bin. Values outside [0, 1] are contract violations.
    """
    if acc is None:
        acc = new_histogram(h_prec)
    if acc.normalized:
        raise ValueError("cannot accumulate into a normalized histogram")
    if acc.bin_width != h_prec:
        raise ValueError(f"accumulator bin width {acc.bin_width} != {h_prec}")
    values = np.asarray(prob_map, dtype=np.float64).ravel()
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ValueError("probability map has values outside [0, 1]")
    n = acc.bins.size
    idx = np.minimum(np.floor(values / h_prec).astype(np.int64), n - 1)
    acc.bins += np.bincount(idx, minlength=n)
    return acc


def normalize_histogram(h: DomainHistogram) -> DomainHistogram:
    total = h.bins.sum()
    if total <= 0:
        raise ValueError("cannot normalize an empty histogram")
    return DomainHistogram(h.bins / total, h.bin_width, normalized=True)


def _mass(h, require_normalized):
    if isinstance(h, DomainHistogram):
        if require_normalized and not h.normalized:
            raise ValueError("histogram is not normalized")
        return h.bins
    arr = np.asarray(h, dtype=np.float64)
    if require_normalized and abs(arr.sum() - 1.0) > 1e-6:
        raise ValueError("histogram vector does not sum to 1")
    return arr


def pearson(hs, ht) -> float:
    """Pearson correlation over matching bins (population covariance)."""
    a = _mass(hs, require_normalized=False)
    b = _mass(ht, require_normalized=False)
    if a.shape != b.shape:
        raise ValueError(f"histograms have {a.size} vs {b.size} bins")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(da @ da))
    sb = math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        raise DegenerateHistogramError("constant histogram has zero standard deviation")
    return float(np.clip(float(da @ db) / (sa * sb), -1.0, 1.0))


def _smoothed(h):
    p = _mass(h, require_normalized=True) + _KL_SMOOTHING
    return p / p.sum()


def kl_divergence(p, q) -> float:
    """Kullback-Leibler divergence with zero bins smoothed away; asymmetric."""
    ps, qs = _smoothed(p), _smoothed(q)
    if ps.shape != qs.shape:
        raise ValueError(f"histograms have {ps.size} vs {qs.size} bins")
    return max(float(np.sum(ps * np.log(ps / qs))), 0.0)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence, bounded by ln 2; symmetric."""
    ps, qs = _smoothed(p), _smoothed(q)
    if ps.shape != qs.shape:
        raise ValueError(f"histograms have {ps.size} vs {qs.size} bins")
    m = 0.5 * (ps + qs)
    js = 0.5 * float(np.sum(ps * np.log(ps / m))) + 0.5 * float(np.sum(qs * np.log(qs / m)))
    return min(max(js, 0.0), math.log(2.0))


def hist_intersection(p, q) -> float:
    """Shared mass between two normalized histograms, in [0, 1]; symmetric."""
    ps = _mass(p, require_normalized=True)
    qs = _mass(q, require_normalized=True)
    if ps.shape != qs.shape:
        raise ValueError(f"histograms have {ps.size} vs {qs.size} bins")
    return float(np.minimum(ps, qs).sum())


def gate_decision(rho, rho_th=0.25) -> str:
    """Adaptation is warranted exactly when correlation <= threshold (inclusive)."""
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"correlation {rho} outside [-1, 1]")
    return USE_DA if rho <= rho_th else USE_SAE


@dataclass
class SimilarityReport:
    rho: float
    kl_st: float
    kl_ts: float
    js: float
    hist_intersection: float
    rho_th: float
    decision: str
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "rho": self.rho,
                "kl_st": self.kl_st,
                "kl_ts": self.kl_ts,
                "js": self.js,
                "hist_intersection": self.hist_intersection,
                "rho_th": self.rho_th,
                "decision": self.decision,
                "degenerate_flag": self.degenerate,
            },
            sort_keys=True,
        )


def compare_histograms(hs, ht, rho_th=0.25) -> SimilarityReport:
    """Full metric suite plus the gate decision.

    A degenerate (constant) histogram pair cannot be correlated; the report
    is then flagged and conservatively pinned to rho = 1.0 so the gate keeps
    the plain source-trained model.
    """
    degenerate = False
    try:
        rho = pearson(hs, ht)
    except DegenerateHistogramError:
        rho = 1.0
        degenerate = True
    return SimilarityReport(
        rho=rho,
        kl_st=kl_divergence(hs, ht),
        kl_ts=kl_divergence(ht, hs),
        js=js_divergence(hs, ht),
        hist_intersection=hist_intersection(hs, ht),
        rho_th=rho_th,
        decision=gate_decision(rho, rho_th),
        degenerate=degenerate,
    )


def _pages_of(items):
    for item in items:
        yield item.page if hasattr(item, "page") else item


def domain_histogram(binarizer, pages, h_prec=0.1) -> DomainHistogram:
    """Pool the model's probability maps for all given pages into one
    normalized histogram."""
    model = getattr(binarizer, "model", binarizer)
    acc = new_histogram(h_prec)
    for page in _pages_of(pages):
        accumulate_histogram(predict_prob_map(model, page), h_prec, acc)
    return normalize_histogram(acc)


def intra_domain_rho(binarizer, pages, h_prec=0.1) -> float:
    """Correlation between the histograms of two disjoint halves of a page set."""
    pages = list(pages)
    if len(pages) < 2:
        raise ValueError("need at least two pages to split into halves")
    half = len(pages) // 2
    return pearson(
        domain_histogram(binarizer, pages[:half], h_prec),
        domain_histogram(binarizer, pages[half:], h_prec),
    )


@dataclass
class AutoRunResult:
    """Everything the gated driver produced, for reporting and evaluation."""

    report: SimilarityReport
    sae: TrainedBinarizer
    da: TrainedBinarizer | None
    masks: dict
    hist_source: DomainHistogram
    hist_target: DomainHistogram

    @property
    def used(self) -> TrainedBinarizer:
        return self.da if self.da is not None else self.sae


def autobindann(
    source: Dataset,
    target: Dataset,
    cfg: TrainConfig,
    h_prec=0.1,
    rho_th=0.25,
) -> AutoRunResult:
    """Train on source, gate on histogram correlation, binarize the target.

    The source histogram is built from the validation partition (the same
    pages that picked the threshold); the target histogram pools every target
    page. When the gate fires, the adversarial model is trained and its own
    swept threshold binarizes the target; otherwise the plain model does.
    Target ground truth is never touched: the target dataset carries none.
    """
    sae_tb = train_sae(source, cfg)
    hist_source = domain_histogram(sae_tb, source.validation(), h_prec)
    hist_target = domain_histogram(sae_tb, target.records, h_prec)
    report = compare_histograms(hist_source, hist_target, rho_th)

    da_tb = None
    if report.decision == USE_DA:
        da_tb = train_bindann(source, target, cfg)
    used = da_tb if da_tb is not None else sae_tb

    masks = {
        rec.stem: binarize(predict_prob_map(used.model, rec.page), used.th_s)
        for rec in target.records
    }
    return AutoRunResult(report, sae_tb, da_tb, masks, hist_source, hist_target)


def run_autobindann(source, target, cfg, h_prec=0.1, rho_th=0.25):
    """Gated pipeline; returns (binarized target pages, report, used binarizer)."""
    result = autobindann(source, target, cfg, h_prec, rho_th)
    return result.masks, result.report, result.used


def histogram_csv(h: DomainHistogram) -> str:
    lines = ["bin_low,bin_high,mass"]
    for i, mass in enumerate(h.bins):
        lines.append(f"{repr(i * h.bin_width)},{repr((i + 1) * h.bin_width)},{repr(float(mass))}")
    return "\n".join(lines) + "\n"
