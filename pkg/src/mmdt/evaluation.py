"""Patch voting, image scores, AUC/EER and protocol reports.

Score convention: higher means more likely recaptured.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from scipy.stats import rankdata

from .data import GENUINE, RECAPTURED, DatasetManifest, extract_patches, label_index
from .errors import MetricError, VoteError


def majority_vote(votes: Sequence) -> str:
    """Strict majority wins; an exact tie goes to recaptured."""
    if len(votes) == 0:
        raise VoteError("no votes")
    n_rec = sum(label_index(v) for v in votes)
    return RECAPTURED if 2 * n_rec >= len(votes) else GENUINE


def image_score(patch_scores: Sequence[float]) -> float:
    scores = np.asarray(patch_scores, dtype=np.float64)
    if scores.size == 0:
        raise VoteError("no patch scores")
    if np.any(scores < 0) or np.any(scores > 1) or not np.all(np.isfinite(scores)):
        raise VoteError("patch scores must lie in [0, 1]")
    return float(scores.mean())


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray([label_index(v) for v in labels], dtype=np.int64)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if y.min(initial=1) == y.max(initial=0) or s.size == 0:
        raise MetricError("both classes must be present")
    return s, y


def auc(scores, labels) -> float:
    """P(recaptured score > genuine score) with ties counted one half (rank-sum form)."""
    s, y = _prepare(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def eer(scores, labels):
    """Equal error rate and its threshold.

    FPR(t) = share of genuine with score >= t, FNR(t) = share of recaptured
    with score < t. Candidates are the minimum score (same operating point as
    -inf), every midpoint between consecutive distinct scores, and +inf. The
    EER is (FPR + FNR) / 2 at the lowest candidate minimizing |FPR - FNR|.
    """
    s, y = _prepare(scores, labels)
    uniq = np.unique(s)
    thresholds = np.concatenate([uniq[:1], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    neg = np.sort(s[y == 0])
    pos = np.sort(s[y == 1])
    n_fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    n_fn = np.searchsorted(pos, thresholds, side="left")
    # |FPR - FNR| scaled by n_neg * n_pos stays integral, so ties are exact
    gap = np.abs(n_fp * pos.size - n_fn * neg.size)
    best = int(np.argmin(gap))  # argmin returns the first, i.e. lowest, minimizer
    return float((n_fp[best] / neg.size + n_fn[best] / pos.size) / 2.0), float(thresholds[best])


@dataclass
class ScoredSample:
    image_id: str
    patch_scores: list
    patch_votes: list
    label: str

    def __post_init__(self):
        if not self.patch_scores or len(self.patch_scores) != len(self.patch_votes):
            raise VoteError(f"{self.image_id}: scores and votes must be non-empty and equal length")
        if any(not 0.0 <= v <= 1.0 for v in self.patch_scores):
            raise VoteError(f"{self.image_id}: patch scores outside [0, 1]")

    @property
    def score(self) -> float:
        return image_score(self.patch_scores)

    @property
    def vote(self) -> str:
        return majority_vote(self.patch_votes)


@dataclass
class EvalReport:
    protocol_name: str
    auc: float
    eer: float
    eer_threshold: float
    samples: list = field(default_factory=list)
    patch_auc: Optional[float] = None
    patch_eer: Optional[float] = None
    vote_accuracy: Optional[float] = None

    @property
    def worse_than_chance(self) -> bool:
        return self.auc < 0.5

    def summary(self) -> dict:
        return {
            "record": "summary",
            "protocol": self.protocol_name,
            "auc": self.auc,
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "patch_auc": self.patch_auc,
            "patch_eer": self.patch_eer,
            "vote_accuracy": self.vote_accuracy,
            "n_images": len(self.samples),
            "worse_than_chance": self.worse_than_chance,
        }

    def write(self, path) -> None:
        """JSON lines: one record per image, then the summary record."""
        with open(path, "w", encoding="utf-8") as fh:
            for s in sorted(self.samples, key=lambda s: s.image_id):
                fh.write(json.dumps({
                    "record": "image",
                    "id": s.image_id,
                    "label": s.label,
                    "n_patches": len(s.patch_scores),
                    "mean_score": s.score,
                    "vote": s.vote,
                }) + "\n")
            fh.write(json.dumps(self.summary()) + "\n")


def vote_of(p_recaptured: float) -> str:
    return RECAPTURED if p_recaptured >= 0.5 else GENUINE


# A scorer maps (patches (P, 3, N, N) in [0, 1], manifest entry) to P probabilities of recapture.
Scorer = Callable[[torch.Tensor, object], np.ndarray]


class ClassifierScorer:
    """Adapts an MMDT classifier plus a trace provider to the scorer interface."""

    def __init__(self, model, traces_provider=None, active=None, batch_size: int = 32):
        from .classifier import ModalityBundle, classify, patch_traces  # avoid import cycle at module load
        self._bundle, self._classify, self._traces = ModalityBundle, classify, patch_traces
        self.model = model
        self.provider = traces_provider
        self.active = tuple(active or model.modalities)
        self.batch_size = batch_size

    def __call__(self, patches, entry):
        need = any(m != "rgb" for m in self.active)
        c = t = None
        if need:
            refs = [f"{entry.image_ref}#{i}" for i in range(len(patches))]
            c, t = self._traces(self.provider, patches, refs)
        out = []
        for s in range(0, len(patches), self.batch_size):
            sl = slice(s, s + self.batch_size)
            bundle = self._bundle.from_traces(patches[sl], c[sl] if c is not None else None,
                                              t[sl] if t is not None else None, self.active)
            out.append(self._classify(bundle, self.model)[:, 1])
        return torch.cat(out).numpy().astype(np.float64)


def run_protocol(model: Union[Scorer, object], train_tag: str, test_manifest: DatasetManifest,
                 traces_provider=None, out_path=None, patch_side: int = 224, active=None,
                 echo: bool = True) -> EvalReport:
    """Score every eval-mode patch, aggregate per image and compute image-level AUC/EER."""
    from .classifier import MMDTClassifier

    scorer = ClassifierScorer(model, traces_provider, active) if isinstance(model, MMDTClassifier) else model
    tags = sorted({e.domain_tag for e in test_manifest.entries})
    protocol = f"{train_tag}->{'+'.join(tags) or 'test'}"
    samples, patch_scores, patch_labels = [], [], []
    for entry in test_manifest.entries:
        try:
            patches = extract_patches(test_manifest.load_image(entry), patch_side, "eval")
            x = torch.from_numpy(np.stack(patches).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
            probs = np.clip(np.asarray(scorer(x, entry), dtype=np.float64), 0.0, 1.0)
        except Exception as exc:
            raise type(exc)(f"{entry.image_ref}: {exc}") from exc
        samples.append(ScoredSample(entry.image_ref, probs.tolist(), [vote_of(p) for p in probs], entry.label))
        patch_scores.extend(probs.tolist())
        patch_labels.extend([entry.label] * len(probs))

    samples.sort(key=lambda s: s.image_id)
    img_scores = [s.score for s in samples]
    img_labels = [s.label for s in samples]
    e, thr = eer(img_scores, img_labels)
    p_e, _ = eer(patch_scores, patch_labels)
    report = EvalReport(
        protocol_name=protocol,
        auc=auc(img_scores, img_labels),
        eer=e,
        eer_threshold=thr,
        samples=samples,
        patch_auc=auc(patch_scores, patch_labels),
        patch_eer=p_e,
        vote_accuracy=float(np.mean([s.vote == s.label for s in samples])),
    )
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        report.write(out_path)
    if echo:
        print(json.dumps(report.summary()))
    return report
