"""Evaluation metrics for multi-rater binary segmentation.

IoU uses the empty-vs-empty = 1 convention (absence agreement counts as
agreement). GED is the plug-in estimator with within-set expectations
over all ordered pairs including self-pairs. NLL, Brier and ECE score a
mean-probability map against every rater by default; a majority-vote
target is selectable. Probabilities are clamped to [1e-7, 1 - 1e-7]
before any log.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .latent import project_gaussian, sample_compact
from .tensor import PROB_EPS, Tensor

TARGET_MODES = ("raters", "majority")


def _as_binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} must be binary")
    return m.astype(bool)


def iou(a, b) -> float:
    """Intersection over union; two empty masks count as perfect overlap."""
    am, bm = _as_binary(a, "a"), _as_binary(b, "b")
    if am.shape != bm.shape:
        raise ValueError(f"mask shapes differ: {am.shape} vs {bm.shape}")
    union = int(np.count_nonzero(am | bm))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(am & bm)) / union


def ged(pred_samples, rater_masks) -> float:
    """Generalized energy distance between two mask sets under d = 1 - IoU.

    GED^2 = 2 E[d(S,Y)] - E[d(S,S')] - E[d(Y,Y')], every expectation a
    plain mean over all ordered pairs (self-pairs included within sets),
    accumulated in a fixed order so an independent loop oracle can match
    the result bit for bit. Returns sqrt(max(GED^2, 0)).
    """
    preds = [_as_binary(m, "pred_samples") for m in pred_samples]
    raters = [_as_binary(m, "rater_masks") for m in rater_masks]
    if not preds or not raters:
        raise ValueError("ged needs non-empty prediction and rater mask lists")

    def mean_distance(xs, ys):
        total = 0.0
        for x in xs:
            for y in ys:
                total += 1.0 - iou(x, y)
        return total / (len(xs) * len(ys))

    sq = 2.0 * mean_distance(preds, raters) - mean_distance(preds, preds) - mean_distance(raters, raters)
    return math.sqrt(max(sq, 0.0))


def majority_mask(rater_masks) -> np.ndarray:
    """Pixelwise majority vote across raters; ties go to foreground."""
    m = np.asarray(rater_masks)
    return (2 * m.sum(axis=0) >= m.shape[0]).astype(np.uint8)


def _target_stack(prob: np.ndarray, rater_masks, against: str) -> np.ndarray:
    if against not in TARGET_MODES:
        raise ValueError(f"against must be one of {TARGET_MODES}, got {against!r}")
    masks = np.asarray(rater_masks, dtype=np.float64)
    if masks.ndim != 3 or masks.shape[1:] != prob.shape:
        raise ValueError(f"rater masks shape {masks.shape} vs prob {prob.shape}")
    if against == "majority":
        return majority_mask(rater_masks)[None].astype(np.float64)
    return masks


def _clamped(prob) -> np.ndarray:
    p = np.asarray(prob, dtype=np.float64)
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def nll(prob, rater_masks, against: str = "raters") -> float:
    """Mean binary negative log-likelihood over (rater, pixel) pairs."""
    p = _clamped(prob)
    y = _target_stack(p, rater_masks, against)
    per = -(y * np.log(p)[None] + (1.0 - y) * np.log1p(-p)[None])
    return float(per.mean())


def brier(prob, rater_masks, against: str = "raters") -> float:
    """Mean squared probability error over (rater, pixel) pairs."""
    p = _clamped(prob)
    y = _target_stack(p, rater_masks, against)
    return float(((p[None] - y) ** 2).mean())


def ece(prob, rater_masks, bins: int = 10, against: str = "raters") -> float:
    """Expected calibration error over pooled (pixel, rater) pairs.

    Confidence is max(p, 1-p) with predicted label 1[p >= 0.5]; bins are
    equal-width over [0, 1]; ECE = sum_b (n_b / N) |acc_b - conf_b|.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    p = _clamped(prob)
    y = _target_stack(p, rater_masks, against)
    pred = (p >= 0.5).astype(np.float64)
    conf = np.maximum(p, 1.0 - p)
    correct = (np.broadcast_to(pred[None], y.shape) == y).astype(np.float64)
    conf_all = np.broadcast_to(conf[None], y.shape).reshape(-1)
    correct = correct.reshape(-1)
    idx = np.minimum((conf_all * bins).astype(np.int64), bins - 1)
    total = conf_all.size
    out = 0.0
    for b in range(bins):
        sel = idx == b
        n_b = int(np.count_nonzero(sel))
        if n_b == 0:
            continue
        acc_b = float(correct[sel].mean())
        conf_b = float(conf_all[sel].mean())
        out += (n_b / total) * abs(acc_b - conf_b)
    return out


# -- model-in-the-loop helpers ---------------------------------------------------


def prediction_maps(model, image: np.ndarray, m: int, rng: np.random.Generator) -> list[np.ndarray]:
    """m sigmoid maps from independent prior draws (no gradients recorded).

    The deterministic backbone and prior head run once; only the latent
    draw and the adapter fusion repeat per sample.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    img = np.asarray(image, dtype=np.float32)
    with T.no_grad():
        x = Tensor(img[None, None])
        feats = model.backbone_forward(x)
        g = model.prior_forward(x)[0]
        gk = project_gaussian(g, model.projection)
        maps = []
        for _ in range(m):
            z = sample_compact(gk, rng.standard_normal(gk.k))
            zt = model.latent_to_native(z.z_k)
            logits = model.fuse_and_predict(feats, [zt])
            maps.append(T.sigmoid(logits).data[0, 0].astype(np.float64))
    return maps


def mean_probability(model, image: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Pixelwise mean of m prior-sampled sigmoid maps, clamped."""
    maps = prediction_maps(model, image, m, rng)
    return _clamped(np.mean(maps, axis=0))


def sample_masks(model, image: np.ndarray, m: int, rng: np.random.Generator, threshold: float = 0.5):
    """m thresholded prediction masks from independent prior draws."""
    return [(p >= threshold).astype(np.uint8) for p in prediction_maps(model, image, m, rng)]


def eval_iou(model, sample, m: int, rng: np.random.Generator) -> float:
    """IoU of the thresholded mean-probability map vs the majority vote."""
    prob = mean_probability(model, sample.image, m, rng)
    return iou((prob >= 0.5).astype(np.uint8), majority_mask(sample.masks))


@dataclass
class MetricsReport:
    iou: float
    ged: float
    nll: float
    brier: float
    ece: float
    num_pred_samples: int

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou out of range: {self.iou}")
        if self.ged < 0.0:
            raise ValueError(f"ged negative: {self.ged}")
        if not 0.0 <= self.brier <= 1.0:
            raise ValueError(f"brier out of range: {self.brier}")
        if not 0.0 <= self.ece <= 1.0:
            raise ValueError(f"ece out of range: {self.ece}")
        if self.nll < 0.0:
            raise ValueError(f"nll negative: {self.nll}")
        if self.num_pred_samples < 1:
            raise ValueError(f"num_pred_samples must be >= 1: {self.num_pred_samples}")

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for key, val in asdict(self).items():
            lines.append(f"{key},{val}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate_model(model, samples, m: int, rng: np.random.Generator,
                   against: str = "raters") -> MetricsReport:
    """Dataset metrics: per-sample scores averaged over all samples."""
    if not samples:
        raise ValueError("no samples to evaluate")
    totals = {"iou": 0.0, "ged": 0.0, "nll": 0.0, "brier": 0.0, "ece": 0.0}
    for s in samples:
        maps = prediction_maps(model, s.image, m, rng)
        prob = _clamped(np.mean(maps, axis=0))
        preds = [(p >= 0.5).astype(np.uint8) for p in maps]
        totals["iou"] += iou((prob >= 0.5).astype(np.uint8), majority_mask(s.masks))
        totals["ged"] += ged(preds, list(s.masks))
        totals["nll"] += nll(prob, s.masks, against=against)
        totals["brier"] += brier(prob, s.masks, against=against)
        totals["ece"] += ece(prob, s.masks, against=against)
    n = len(samples)
    return MetricsReport(
        iou=totals["iou"] / n,
        ged=totals["ged"] / n,
        nll=totals["nll"] / n,
        brier=totals["brier"] / n,
        ece=totals["ece"] / n,
        num_pred_samples=m,
    )
