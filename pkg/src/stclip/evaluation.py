"""Per-aspect prediction, description rendering, metrics and attention export."""

import csv
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .aspects import ASPECTS, CLASS_WORDS, DEFAULT_TEMPLATE
from .errors import DataError, TemplateError
from .model import class_table, context_vectors, logits, text_features
from .scamp import aspect_row_aggregate


@dataclass
class AspectPrediction:
    aspect: str
    index: int
    probabilities: np.ndarray

    @property
    def word(self):
        return CLASS_WORDS[self.aspect][self.index]


def argmax_first(values):
    """Index of the maximum; ties resolve to the smallest index."""
    return int(np.argmax(np.asarray(values)))


def predict_batch(state, batch, chunk=64):
    """(B, P) predicted indices and (B, P, K_max) probabilities (padded slots 0)."""
    _, cmask = class_table(state)
    probs = []
    for start in range(0, len(batch), chunk):
        mb = batch.take(np.arange(start, min(start + chunk, len(batch))))
        probs.append(ad.masked_softmax(logits(state, mb), cmask[None]).data)
    probs = np.concatenate(probs) if probs else np.zeros((0,) + cmask.shape)
    return np.argmax(probs, axis=-1), probs


def predict_aspects(state, batch):
    """One list of AspectPrediction per sample."""
    pred, probs = predict_batch(state, batch)
    aspects = state.config.aspects
    out = []
    for b in range(len(pred)):
        out.append([AspectPrediction(a, int(pred[b, p]), probs[b, p, :len(CLASS_WORDS[a])])
                    for p, a in enumerate(aspects)])
    return out


_PLACEHOLDER = re.compile(r"\[CLASS(\d+)\]")


def render_description(words, template=DEFAULT_TEMPLATE, aspects=ASPECTS):
    """Replace ``[CLASSn]`` with the word predicted for aspect n (1-based).

    ``words`` is a sequence of class words in aspect order, or AspectPrediction
    objects.
    """
    words = [w.word if isinstance(w, AspectPrediction) else w for w in words]
    found = [int(m) for m in _PLACEHOLDER.findall(template)]
    if sorted(found) != list(range(1, len(aspects) + 1)):
        raise TemplateError(f"template needs placeholders [CLASS1]..[CLASS{len(aspects)}] exactly once each, "
                            f"found {found}")
    if len(words) != len(aspects):
        raise TemplateError(f"{len(words)} words for {len(aspects)} aspects")
    return _PLACEHOLDER.sub(lambda m: words[int(m.group(1)) - 1], template)


@dataclass
class AspectMetrics:
    aspect: str
    accuracy: float
    macro_f1: float
    confusion: np.ndarray  # rows = true class, columns = predicted


def confusion_matrix(pred, true, k):
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(true, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def macro_f1(cm):
    """Unweighted mean of per-class F1; a class with no support and no predictions counts as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def accuracy_from_counts(correct, total):
    if total <= 0:
        raise DataError("cannot evaluate an empty sample set")
    return correct / total


def evaluate(pred, labels, aspects=ASPECTS):
    """Per-aspect accuracy, macro-F1 and confusion matrix."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot evaluate an empty sample set")
    if pred.shape != labels.shape:
        raise DataError(f"prediction shape {pred.shape} differs from label shape {labels.shape}")
    report = []
    for p, a in enumerate(aspects):
        cm = confusion_matrix(pred[:, p], labels[:, p], len(CLASS_WORDS[a]))
        report.append(AspectMetrics(a, accuracy_from_counts(int(np.trace(cm)), int(cm.sum())), macro_f1(cm), cm))
    return report


def fmt3(x):
    return f"{x:.3f}"


def write_metrics_csv(path, report):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("aspect", "ACC", "F1"))
        for m in report:
            w.writerow((m.aspect, fmt3(m.accuracy), fmt3(m.macro_f1)))


def write_confusion_csv(path, report):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("aspect", "true_index", "predicted_index", "count"))
        for m in report:
            k = m.confusion.shape[0]
            for i in range(k):
                for j in range(k):
                    w.writerow((m.aspect, i, j, int(m.confusion[i, j])))


def write_predictions_csv(path, sample_ids, predictions):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("sample_id", "aspect", "predicted_index", "predicted_word", "probabilities"))
        for sid, preds in zip(sample_ids, predictions):
            for pr in preds:
                w.writerow((sid, pr.aspect, pr.index, pr.word, ";".join(f"{v:.6g}" for v in pr.probabilities)))


def read_predictions_csv(path, aspects=ASPECTS):
    """sample_id -> (P,) predicted indices."""
    rows = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rows.setdefault(row["sample_id"], {})[row["aspect"]] = int(row["predicted_index"])
    return {sid: [d[a] for a in aspects] for sid, d in rows.items()}


def attention_maps(state, batch):
    """Cross-aspect weights (B, P, P, M, M), cross-modal weights (B, P, H, M, N_p)
    and the per-sample P x P row-normalised aggregate."""
    r = context_vectors(state, batch)
    _, att = text_features(state, r, batch.patches, return_attention=True)
    out = {}
    if "cross_aspect" in att:
        ca = att["cross_aspect"].data
        out["cross_aspect"] = ca
        out["aggregate"] = aspect_row_aggregate(ca)
    if "cross_modal" in att:
        out["cross_modal"] = att["cross_modal"].data
    return out


def _write_matrix(f, m):
    for row in np.atleast_2d(m):
        f.write(" ".join(f"{v:.6g}" for v in row) + "\n")


def export_attention(state, batch, path, sample_ids=None):
    """Sectioned plain-text dump of every attention tensor, one block per sample."""
    maps = attention_maps(state, batch)
    aspects = state.config.aspects
    ids = sample_ids if sample_ids is not None else [str(i) for i in range(len(batch))]
    with open(path, "w", encoding="utf-8") as f:
        for b, sid in enumerate(ids):
            f.write(f"# sample {sid}\n")
            if "cross_aspect" in maps:
                for p, ap in enumerate(aspects):
                    for q, aq in enumerate(aspects):
                        f.write(f"## cross_aspect {ap} {aq}\n")
                        _write_matrix(f, maps["cross_aspect"][b, p, q])
                f.write("## aggregate\n")
                _write_matrix(f, maps["aggregate"][b])
            if "cross_modal" in maps:
                cm = maps["cross_modal"][b]
                for p, ap in enumerate(aspects):
                    for h in range(cm.shape[1]):
                        f.write(f"## cross_modal {ap} head {h}\n")
                        _write_matrix(f, cm[p, h])
    return maps


def read_attention_dump(path):
    """Parse an export back into {sample: {section title: matrix}}."""
    out, sample, title, rows = {}, None, None, []

    def flush():
        if sample is not None and title is not None:
            out[sample][title] = np.array(rows)

    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# sample "):
                flush()
                sample, title, rows = line[9:], None, []
                out[sample] = {}
            elif line.startswith("## "):
                flush()
                title, rows = line[3:], []
            elif line:
                rows.append([float(v) for v in line.split()])
    flush()
    return out
