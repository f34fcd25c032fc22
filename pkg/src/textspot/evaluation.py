"""Detection and end-to-end precision/recall/F-measure, plus the prediction file format."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Quad, polygon_iou
from .synth import DatasetError, read_index

IOU_THRESH = 0.5


class EvalDataError(ValueError):
    pass


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nearest_word(word: str, lexicon: Sequence[str]) -> str:
    """Closest lexicon entry by edit distance; ties go to the lexicographically first."""
    if not lexicon:
        return word
    return min(lexicon, key=lambda w: (edit_distance(word, w), w))


def f_measure(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class MatchResult:
    pairs: list            # (pred index, gt index)
    ignored_preds: list    # predictions excluded for overlapping an ignored gt
    n_pred: int            # predictions counted
    n_gt: int              # non-ignored ground truths


def match_detections(pred: Sequence[Quad], gt: Sequence[tuple[Quad, bool]], thresh: float = IOU_THRESH) -> MatchResult:
    """One-to-one greedy matching in descending IoU order.

    A prediction whose best overlap (IoU >= ``thresh``) is an ignored ground
    truth is dropped from both counts.
    """
    iou = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, (g, _) in enumerate(gt):
            iou[i, j] = polygon_iou(p, g)
    ignore = np.array([bool(flag) for _, flag in gt], dtype=bool)
    dropped = []
    for i in range(len(pred)):
        if len(gt) and iou[i].max() >= thresh and ignore[int(np.argmax(iou[i]))]:
            dropped.append(i)
    keep_pred = np.ones(len(pred), dtype=bool)
    keep_pred[dropped] = False
    cand = [(iou[i, j], i, j) for i in range(len(pred)) for j in range(len(gt))
            if keep_pred[i] and not ignore[j] and iou[i, j] >= thresh]
    cand.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return MatchResult(sorted(pairs), dropped, int(keep_pred.sum()), int((~ignore).sum()))


@dataclass
class EvalReport:
    det_precision: float = 0.0
    det_recall: float = 0.0
    det_f: float = 0.0
    e2e_precision: float = 0.0
    e2e_recall: float = 0.0
    e2e_f: float = 0.0
    n_pred: int = 0
    n_gt: int = 0
    det_tp: int = 0
    e2e_tp: int = 0
    ignored: int = 0
    matches: dict = field(default_factory=dict)   # image id -> [(pred, gt, text ok)]

    def to_text(self) -> str:
        rows = [("", "precision", "recall", "F-measure"),
                ("detection", self.det_precision, self.det_recall, self.det_f),
                ("end-to-end", self.e2e_precision, self.e2e_recall, self.e2e_f)]
        lines = []
        for name, *vals in rows:
            cells = [v if isinstance(v, str) else f"{v:.4f}" for v in vals]
            lines.append(f"{name:<12}" + "".join(f"{c:>11}" for c in cells))
        lines.append(f"predictions {self.n_pred}  ground truth {self.n_gt}  "
                     f"detection tp {self.det_tp}  end-to-end tp {self.e2e_tp}  ignored {self.ignored}")
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        keys = ["det_precision", "det_recall", "det_f", "e2e_precision", "e2e_recall", "e2e_f",
                "n_pred", "n_gt", "det_tp", "e2e_tp", "ignored"]
        return "".join(f"{k}={getattr(self, k)}\n" for k in keys)


def end_to_end_score(pred: dict, gt: dict, lexicon: Sequence[str] | None = None) -> EvalReport:
    """Score predictions against ground truth, keyed by image id.

    ``pred[id]`` is a list of ``(Quad, text)``; ``gt[id]`` a list of
    ``(Quad, text, ignore)``. Images are folded in sorted id order.
    """
    lex = sorted({w.lower() for w in lexicon}) if lexicon else None
    report = EvalReport()
    for image_id in sorted(set(pred) | set(gt)):
        preds = pred.get(image_id, [])
        gts = gt.get(image_id, [])
        for _, text, ignore in gts:
            if not ignore and not text:
                raise EvalDataError(f"image {image_id}: ground truth without transcription")
        res = match_detections([q for q, _ in preds], [(q, ig) for q, _, ig in gts])
        report.n_pred += res.n_pred
        report.n_gt += res.n_gt
        report.ignored += len(res.ignored_preds)
        report.det_tp += len(res.pairs)
        rows = []
        for i, j in res.pairs:
            text = (preds[i][1] or "").lower()
            if lex is not None:
                text = nearest_word(text, lex)
            ok = text == gts[j][1].lower()
            report.e2e_tp += int(ok)
            rows.append((i, j, ok))
        report.matches[image_id] = rows
    p = lambda tp: tp / report.n_pred if report.n_pred else 0.0
    r = lambda tp: tp / report.n_gt if report.n_gt else 0.0
    report.det_precision, report.det_recall = p(report.det_tp), r(report.det_tp)
    report.e2e_precision, report.e2e_recall = p(report.e2e_tp), r(report.e2e_tp)
    report.det_f = f_measure(report.det_precision, report.det_recall)
    report.e2e_f = f_measure(report.e2e_precision, report.e2e_recall)
    return report


# ------------------------------------------------------------ file formats
def format_prediction_line(image_id: str, dets: Sequence[tuple[Quad, str]]) -> str:
    """``id,x1,y1,...,x4,y4,score,...`` with an optional tab-separated transcription list."""
    fields = [image_id]
    for q, _ in dets:
        fields.extend(repr(float(v)) for v in q.points.reshape(-1))
        fields.append(repr(float(q.score)))
    line = ",".join(fields)
    if any(t for _, t in dets):
        line += "\t" + "\t".join(t for _, t in dets)
    return line + "\n"


def parse_prediction_line(line: str, lineno: int = 0) -> tuple[str, list[tuple[Quad, str]]]:
    head, *texts = line.rstrip("\n").split("\t")
    parts = head.split(",")
    image_id, nums = parts[0], parts[1:]
    if not image_id or len(nums) % 9:
        raise EvalDataError(f"line {lineno}: expected image id then groups of 9 numbers")
    try:
        vals = np.array([float(v) for v in nums], dtype=np.float64).reshape(-1, 9)
    except ValueError as exc:
        raise EvalDataError(f"line {lineno}: {exc}") from exc
    if texts and len(texts) != len(vals):
        raise EvalDataError(f"line {lineno}: {len(vals)} quads but {len(texts)} transcriptions")
    texts = texts or [""] * len(vals)
    return image_id, [(Quad(v[:8].reshape(4, 2), float(v[8])), t) for v, t in zip(vals, texts)]


def read_predictions(path: str | Path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            image_id, dets = parse_prediction_line(line, lineno)
            out[image_id] = dets
    return out


def read_ground_truth(path: str | Path) -> dict:
    try:
        index = read_index(path)
    except DatasetError as exc:
        raise EvalDataError(str(exc)) from exc
    return {Path(name).stem: [(i.quad, i.text, i.ignore) for i in insts] for name, insts in index}


def read_lexicon(path: str | Path) -> list[str]:
    return [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines() if w.strip()]
