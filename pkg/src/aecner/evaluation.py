"""Entity-level evaluation: strict and partial span matching, per-type
precision/recall/F1, unweighted macro aggregation, and report emission.

A strict true positive needs identical (start, end, type); a partial one
needs at least one token of overlap and an equal type, with one-to-one
matching resolved greedily by descending overlap. Every 0/0 ratio is
defined as 0 so empty behavior is penalized, and types that appear only in
predictions are included in the macro mean at F1 0.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

from .core import EntitySpan, LabelScheme


class EvalError(ValueError):
    pass


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


@dataclass(frozen=True)
class TypeScore:
    etype: str
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _safe_div(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _safe_div(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return _safe_div(2 * p * r, p + r)


@dataclass(frozen=True)
class EvalReport:
    mode: str  # "strict" | "partial"
    per_type: tuple[TypeScore, ...]
    num_sentences: int
    num_gold: int
    num_pred: int

    @property
    def macro_precision(self) -> float:
        return _safe_div(sum(s.precision for s in self.per_type), len(self.per_type))

    @property
    def macro_recall(self) -> float:
        return _safe_div(sum(s.recall for s in self.per_type), len(self.per_type))

    @property
    def macro_f1(self) -> float:
        return _safe_div(sum(s.f1 for s in self.per_type), len(self.per_type))

    def score(self, etype: str) -> TypeScore:
        for s in self.per_type:
            if s.etype == etype:
                return s
        raise EvalError(f"type {etype!r} not present in report")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "precision": self.macro_precision,
            "recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "num_sentences": self.num_sentences,
            "num_gold": self.num_gold,
            "num_pred": self.num_pred,
            "per_type": {
                s.etype: {
                    "tp": s.tp, "fp": s.fp, "fn": s.fn,
                    "precision": s.precision, "recall": s.recall, "f1": s.f1,
                }
                for s in self.per_type
            },
        }


def _check_ids(gold: dict, pred: dict) -> None:
    if set(gold) != set(pred):
        only_gold = sorted(set(gold) - set(pred))[:5]
        only_pred = sorted(set(pred) - set(gold))[:5]
        raise EvalError(
            f"gold and predictions cover different sentence ids "
            f"(gold-only: {only_gold}, pred-only: {only_pred})"
        )


def _finish(mode: str, tp, fp, fn, gold, pred) -> EvalReport:
    types = sorted(set(tp) | set(fp) | set(fn))
    scores = tuple(
        TypeScore(t, tp.get(t, 0), fp.get(t, 0), fn.get(t, 0)) for t in types
    )
    return EvalReport(
        mode=mode,
        per_type=scores,
        num_sentences=len(gold),
        num_gold=sum(len(v) for v in gold.values()),
        num_pred=sum(len(v) for v in pred.values()),
    )


def strict_match(
    gold: dict[str, list[EntitySpan]],
    pred: dict[str, list[EntitySpan]],
    scheme: LabelScheme | None = None,
) -> EvalReport:
    """Exact-boundary, exact-type matching; each gold span matches at most
    one prediction."""
    _check_ids(gold, pred)
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for sid in gold:
        remaining = Counter((s.start, s.end, s.etype) for s in gold[sid])
        for span in pred[sid]:
            key = (span.start, span.end, span.etype)
            if remaining[key] > 0:
                remaining[key] -= 1
                tp[span.etype] += 1
            else:
                fp[span.etype] += 1
        for (_, _, etype), count in remaining.items():
            fn[etype] += count
    return _finish("strict", tp, fp, fn, gold, pred)


def _overlap(a: EntitySpan, b: EntitySpan) -> int:
    return max(0, min(a.end, b.end) - max(a.start, b.start))


def partial_match(
    gold: dict[str, list[EntitySpan]],
    pred: dict[str, list[EntitySpan]],
    scheme: LabelScheme | None = None,
) -> EvalReport:
    """Overlap-based matching: a pair matches when the token ranges share at
    least one token and the types are equal. Pairs are resolved one-to-one,
    greedily by (descending overlap, ascending gold start, ascending pred
    start)."""
    _check_ids(gold, pred)
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for sid in gold:
        gold_spans = list(gold[sid])
        pred_spans = list(pred[sid])
        candidates = []
        for gi, g in enumerate(gold_spans):
            for pi, p in enumerate(pred_spans):
                ov = _overlap(g, p)
                if ov > 0 and g.etype == p.etype:
                    candidates.append((-ov, g.start, p.start, gi, pi))
        candidates.sort()
        gold_used = [False] * len(gold_spans)
        pred_used = [False] * len(pred_spans)
        for _, _, _, gi, pi in candidates:
            if not gold_used[gi] and not pred_used[pi]:
                gold_used[gi] = True
                pred_used[pi] = True
                tp[gold_spans[gi].etype] += 1
        for used, span in zip(gold_used, gold_spans):
            if not used:
                fn[span.etype] += 1
        for used, span in zip(pred_used, pred_spans):
            if not used:
                fp[span.etype] += 1
    return _finish("partial", tp, fp, fn, gold, pred)


def macro_f1(report: EvalReport) -> float:
    """Unweighted mean of per-type F1 over the report's included types."""
    if not report.per_type:
        raise EvalError("report includes no entity types")
    return report.macro_f1


def _pct(x: float | None) -> str:
    return "/" if x is None else f"{100.0 * x:.2f}"


def emit_report(reports) -> tuple[str, dict]:
    """Render named reports as an aligned text table plus a JSON-ready dict.

    ``reports`` is an ordered list of (name, {"strict": EvalReport | None,
    "partial": EvalReport | None}) pairs. Percentages print with two
    decimals; absent blocks print as "/".
    """
    reports = list(reports)
    if not reports:
        raise EvalError("nothing to report")

    columns = [
        "Model",
        "Strict P", "Strict R", "Strict Macro-F1",
        "Partial P", "Partial R", "Partial Macro-F1",
    ]
    rows = []
    payload_models = []
    for name, by_mode in reports:
        strict = by_mode.get("strict")
        partial = by_mode.get("partial")
        cells = [name]
        for rep in (strict, partial):
            if rep is None:
                cells += ["/", "/", "/"]
            else:
                cells += [
                    _pct(rep.macro_precision),
                    _pct(rep.macro_recall),
                    _pct(rep.macro_f1),
                ]
        rows.append(cells)
        payload_models.append({
            "name": name,
            "strict": strict.to_dict() if strict is not None else None,
            "partial": partial.to_dict() if partial is not None else None,
        })

    widths = [
        max(len(columns[i]), *(len(r[i]) for r in rows)) for i in range(len(columns))
    ]
    lines = [
        "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                  for i, (c, w) in enumerate(zip(columns, widths))),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append(
            "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                      for i, (c, w) in enumerate(zip(row, widths)))
        )
    payload = {"columns": columns, "models": payload_models}
    return "\n".join(lines) + "\n", payload


def save_predictions(path, spans_by_id: dict[str, list[EntitySpan]]) -> None:
    """Prediction-file format: one JSON object per line with sentence_id and
    spans [{start, end, type}]."""
    with open(path, "w", encoding="utf-8") as fh:
        for sid in spans_by_id:
            row = {
                "sentence_id": sid,
                "spans": [
                    {"start": s.start, "end": s.end, "type": s.etype}
                    for s in spans_by_id[sid]
                ],
            }
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def load_predictions(path) -> dict[str, list[EntitySpan]]:
    out: dict[str, list[EntitySpan]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["sentence_id"]] = [
                    EntitySpan(s["start"], s["end"], s["type"]) for s in row["spans"]
                ]
            except (ValueError, KeyError) as exc:
                raise EvalError(f"{path}:{line_no}: bad prediction row: {exc}") from exc
    return out
