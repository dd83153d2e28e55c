"""Video-level prediction by clip aggregation, dataset accuracy and results tables."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from res3d import ops
from res3d.datapipe import AugmentConfig, FrameSource, eval_clip, eval_clips
from res3d.errors import ConfigurationError, DataError


@dataclass
class VideoPrediction:
    video_id: str
    scores: np.ndarray
    predicted: int
    clip_scores: np.ndarray

    @property
    def num_clips(self):
        return self.clip_scores.shape[0]


@dataclass
class EvalReport:
    name: str
    video_accuracy: float
    clip_accuracy: float
    confusion: np.ndarray
    runtime_seconds: float = 0.0
    predictions: list = field(default_factory=list, repr=False)

    @property
    def accuracy(self):
        return self.video_accuracy


# scores closer than this to the maximum count as tied; covers summation-order rounding
TIE_TOLERANCE = 1e-12


def aggregate_clip_scores(clip_scores):
    """Mean of per-clip softmax vectors and its argmax (lowest index wins ties)."""
    clip_scores = np.asarray(clip_scores, dtype=np.float64)
    if clip_scores.ndim != 2 or clip_scores.shape[0] == 0:
        raise ValueError(f"expected a non-empty (clips, classes) matrix, got {clip_scores.shape}")
    scores = clip_scores.mean(axis=0)
    return scores, tie_break_argmax(scores)


def tie_break_argmax(scores):
    return int(np.flatnonzero(scores >= scores.max() - TIE_TOLERANCE)[0])


def predict_from_logits(video_id, logits):
    """Aggregate the raw logits of one video's clips."""
    clip_scores = ops.softmax(np.asarray(logits, dtype=np.float64))
    scores, pred = aggregate_clip_scores(clip_scores)
    return VideoPrediction(video_id, scores, pred, clip_scores)


def predict_video(net, entry, manifest, aug=None, source=None, batch_size=8):
    """Classify a video from its non-overlapping evaluation windows, in inference mode."""
    aug = aug or AugmentConfig()
    source = source or FrameSource(manifest)
    mean = manifest.channel_mean
    if mean is None:
        raise DataError("manifest has no channel_mean")
    windows = eval_clips(entry, aug.clip_len)
    logits = []
    for i in range(0, len(windows), batch_size):
        clips = np.stack([eval_clip(entry, w, source, aug, mean)[0] for w in windows[i:i + batch_size]])
        logits.append(net.forward(clips, training=False))
    return predict_from_logits(entry.id, np.concatenate(logits))


def evaluate_dataset(net, manifest, split="test", aug=None, name=None, source=None, batch_size=8):
    """Video-level and clip-level accuracy of ``net`` on one split."""
    videos = manifest.split(split)
    if not videos:
        raise DataError(f"split {split!r} is empty")
    source = source or FrameSource(manifest)
    k = manifest.num_classes
    t0 = time.perf_counter()
    confusion = np.zeros((k, k), dtype=np.int64)
    preds = []
    clip_hits = clip_total = 0
    for v in videos:
        p = predict_video(net, v, manifest, aug, source, batch_size)
        confusion[v.label, p.predicted] += 1
        clip_hits += sum(tie_break_argmax(c) == v.label for c in p.clip_scores)
        clip_total += p.num_clips
        preds.append(p)
    video_acc = float(np.trace(confusion) / len(videos))
    if name is None:
        name = net.spec.name if getattr(net, "spec", None) is not None else "network"
    return EvalReport(name, video_acc, clip_hits / clip_total, confusion,
                      time.perf_counter() - t0, preds)


# ---------------------------------------------------------------------------
# results tables
# ---------------------------------------------------------------------------


def _check_names(reports):
    if not reports:
        raise ConfigurationError("need at least one report")
    for r in reports:
        if not str(r.name).strip():
            raise ConfigurationError("architecture name must not be blank")


def format_accuracy(acc):
    return f"{100 * acc:.1f}%"


def emit_results_table(reports, format="markdown"):
    """Architecture/accuracy comparison table; the best row is bold in Markdown."""
    _check_names(reports)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["architecture", "accuracy"])
        for r in reports:
            w.writerow([r.name, repr(float(r.accuracy))])
        return buf.getvalue()
    if format != "markdown":
        raise ConfigurationError(f"unknown table format {format!r}")
    best = max(range(len(reports)), key=lambda i: (reports[i].accuracy, -i))
    lines = ["| Residual Network | Accuracy |", "|---|---|"]
    for i, r in enumerate(reports):
        name, acc = r.name, format_accuracy(r.accuracy)
        if i == best:
            name, acc = f"**{name}**", f"**{acc}**"
        lines.append(f"| {name} | {acc} |")
    return "\n".join(lines) + "\n"


def parse_results_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["architecture", "accuracy"]:
        raise ValueError("not a results table")
    return [(name, float(acc)) for name, acc in rows[1:]]


def confusion_csv(confusion, class_names=None):
    k = confusion.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\predicted", *names])
    for name, row in zip(names, confusion):
        w.writerow([name, *map(int, row)])
    return buf.getvalue()


def write_reports(reports, out_dir, class_names=None):
    """Write results.csv, results.md and one confusion matrix per report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(emit_results_table(reports, "csv"))
    (out_dir / "results.md").write_text(emit_results_table(reports, "markdown"))
    if len(reports) == 1:
        (out_dir / "confusion.csv").write_text(confusion_csv(reports[0].confusion, class_names))
    else:
        for r in reports:
            (out_dir / f"confusion_{r.name}.csv").write_text(confusion_csv(r.confusion, class_names))
    return out_dir
