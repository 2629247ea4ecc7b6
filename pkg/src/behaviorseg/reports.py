"""Rendering of analysis results as CSV + JSON pairs and a text summary.

Suppressed or undefined cells are written as ``n/a`` in CSV and ``null`` in
JSON. Floats use their shortest round-trip repr so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

from .experiment import TOTAL, UNSEEN

NA = "n/a"

EFFECT_FIELDS = (
    "segment", "name", "users", "user_share", "n_control", "n_test", "suppressed", "metric",
    "control_mean", "test_mean", "abs_diff", "rel_diff", "p_value", "p_adjusted",
    "significant", "flagged_decline", "degenerate", "note",
)


def segment_key(seg):
    if seg == TOTAL:
        return TOTAL
    if seg == UNSEEN:
        return "UNSEEN"
    return int(seg)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _csv_value(v):
    if v is None:
        return NA
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return NA if not math.isfinite(v) else repr(v)
    return str(v)


def write_csv(rows, fieldnames, path_or_buf):
    own = not hasattr(path_or_buf, "write")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_csv_value(r.get(f)) for f in fieldnames])
    finally:
        if own:
            fh.close()


def csv_text(rows, fieldnames) -> str:
    buf = io.StringIO()
    write_csv(rows, fieldnames, buf)
    return buf.getvalue()


def json_text(obj) -> str:
    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return _json_value(x)

    return json.dumps(clean(obj), indent=2, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# row builders


def effect_rows(effects, metrics=None) -> list[dict]:
    """Long format: one row per (segment, metric)."""
    out = []
    for r in effects:
        names = metrics or (list(r.effects) if r.effects else list(effects[-1].effects))
        for m in names:
            e = None if r.suppressed else r.effects.get(m)
            out.append({
                "segment": segment_key(r.segment),
                "name": r.name,
                "users": r.users,
                "user_share": r.user_share,
                "n_control": r.n_control,
                "n_test": r.n_test,
                "suppressed": r.suppressed,
                "metric": m,
                "control_mean": e and e.control_mean,
                "test_mean": e and e.test_mean,
                "abs_diff": e and e.abs_diff,
                "rel_diff": e and e.rel_diff,
                "p_value": e and e.p_value,
                "p_adjusted": e and e.p_adjusted,
                "significant": None if e is None else e.significant,
                "flagged_decline": None if e is None else e.flagged_decline,
                "degenerate": None if e is None else e.degenerate,
                "note": r.note,
            })
    return out


def effect_json(effects) -> list[dict]:
    out = []
    for r in effects:
        metrics = {}
        for m in (r.effects or effects[-1].effects):
            e = None if r.suppressed else r.effects.get(m)
            metrics[m] = None if e is None else {
                "control_mean": e.control_mean, "test_mean": e.test_mean,
                "abs_diff": e.abs_diff, "rel_diff": e.rel_diff,
                "p_value": e.p_value, "p_adjusted": e.p_adjusted,
                "significant": e.significant, "flagged_decline": e.flagged_decline,
                "degenerate": e.degenerate,
            }
        out.append({
            "segment": segment_key(r.segment), "name": r.name, "users": r.users,
            "user_share": r.user_share, "n_control": r.n_control, "n_test": r.n_test,
            "suppressed": r.suppressed, "note": r.note or None, "metrics": metrics,
        })
    return out


IMPORTANCE_FIELDS = ("segment", "name", "metric", "total", "share")


def importance_rows(rows) -> list[dict]:
    out = []
    for r in rows:
        # rows are ImportanceRow objects or their dict form stored in a model file
        d = r if isinstance(r, dict) else vars(r)
        for m, share in d["shares"].items():
            out.append({"segment": segment_key(d["segment"]), "name": d["name"], "metric": m,
                        "total": d["totals"][m], "share": share})
    return out


CONTRIBUTION_FIELDS = ("metric", "segment", "name", "users", "within_diff", "share", "note")


def contribution_rows(contributions: dict) -> list[dict]:
    return [
        {"metric": m, "segment": segment_key(c.segment), "name": c.name, "users": c.users,
         "within_diff": c.within_diff, "share": c.share, "note": c.note}
        for m, rows in contributions.items() for c in rows
    ]


DRILLDOWN_FIELDS = ("segment", "name", "metric", "page_type", "users", "suppressed",
                    "control_mean", "test_mean", "abs_diff", "rel_diff", "p_value")


def drilldown_rows(cells) -> list[dict]:
    return [
        {"segment": segment_key(c.segment), "name": c.name, "metric": c.metric, "page_type": c.page_type,
         "users": c.users, "suppressed": c.suppressed, "control_mean": c.control_mean,
         "test_mean": c.test_mean, "abs_diff": c.abs_diff, "rel_diff": c.rel_diff, "p_value": c.p_value}
        for c in cells
    ]


SEGMENT_FIELDS = ("segment", "name", "size", "share", "top_families")


def segment_rows(profiles) -> list[dict]:
    from .cluster import family_scores

    out = []
    for p in profiles:
        fams = sorted(family_scores(p).items(), key=lambda kv: (-kv[1], kv[0]))[:3]
        out.append({"segment": p.segment, "name": p.name, "size": p.size, "share": p.share,
                    "top_families": "; ".join(f"{f} z={z:+.2f}" for f, z in fams)})
    return out


# ---------------------------------------------------------------------------
# text


def _pct(x):
    return NA if x is None else f"{100 * x:+.1f}%"


def _p(x):
    return NA if x is None else (f"{x:.3g}" if x >= 1e-4 else "<1e-4")


def _table(header, rows) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def segments_text(profiles) -> str:
    rows = [[r["segment"], r["name"], r["size"], f"{100 * r['share']:.1f}%", r["top_families"]]
            for r in segment_rows(profiles)]
    return _table(["segment", "name", "users", "share", "top families"], rows) + "\n"


def curve_text(selection) -> str:
    rows = [[r.K, f"{r.wcss:.6g}", f"{r.bic:.6g}", NA if r.davies_bouldin is None else f"{r.davies_bouldin:.4f}"]
            for r in selection.rows]
    out = _table(["K", "wcss", "bic", "davies_bouldin"], rows)
    out += f"\nrecommended K (BIC): {selection.recommended_k}"
    if selection.db_k is not None:
        out += f"; Davies-Bouldin prefers K={selection.db_k}"
        if selection.criteria_disagree:
            out += " (criteria disagree)"
    return out + "\n"


def summary_text(analysis) -> str:
    metrics = list(analysis.total.effects)
    parts = []
    t = analysis.total
    parts.append("Overall effect (test vs control)")
    parts.append(_table(
        ["metric", "control", "test", "abs diff", "rel diff", "p"],
        [[m, f"{e.control_mean:.4g}", f"{e.test_mean:.4g}", f"{e.abs_diff:+.4g}", _pct(e.rel_diff), _p(e.p_value)]
         for m, e in t.effects.items()],
    ))
    d = analysis.diagnostics
    sc = d["status_counts"]
    parts.append(
        f"users: {d['users']} (both periods {sc['1']}, definition only {sc['2']}, "
        f"experiment only {sc['3']}; excluded {d['excluded_definition_only']})"
    )
    parts.append("\nSegment importance (share of experiment-period totals)")
    imp_metrics = list(analysis.importance[0].shares) if analysis.importance else []
    parts.append(_table(
        ["segment", *imp_metrics],
        [[r.name, *(f"{100 * r.shares[m]:.1f}%" for m in imp_metrics)] for r in analysis.importance],
    ))
    parts.append("\nSegment treatment effects (relative diff, p-value; * flagged decline)")
    rows = []
    for r in analysis.effects:
        cells = [r.name, r.users]
        for m in metrics:
            e = None if r.suppressed else r.effects.get(m)
            if e is None:
                cells.append(NA)
            else:
                mark = "*" if e.flagged_decline else ""
                p = e.p_adjusted if analysis.diagnostics.get("bonferroni") else e.p_value
                cells.append(f"{_pct(e.rel_diff)} (p={_p(p)}){mark}")
        rows.append(cells)
    parts.append(_table(["segment", "users", *metrics], rows))
    if "cpv" in analysis.contributions and analysis.contributions["cpv"]:
        parts.append("\nContribution to overall cpv difference")
        parts.append(_table(
            ["segment", "share"],
            [[c.name, f"{100 * c.share:.1f}%"] for c in analysis.contributions["cpv"]],
        ))
    shown = [c for c in analysis.drilldown if c.metric == "cpv" and not c.suppressed]
    if shown:
        parts.append("\ncpv relative difference by page type")
        pages = sorted({c.page_type for c in shown})
        by = {(c.name, c.page_type): c for c in shown}
        seg_names = list(dict.fromkeys(c.name for c in shown))
        parts.append(_table(
            ["segment", *pages],
            [[s, *(_pct(by[(s, p)].rel_diff) if (s, p) in by else "" for p in pages)] for s in seg_names],
        ))
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# files


def write_analysis(analysis, out_dir, model=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def pair(stem, rows, fields, obj=None):
        p_csv, p_json = out / f"{stem}.csv", out / f"{stem}.json"
        write_csv(rows, fields, p_csv)
        p_json.write_text(json_text(rows if obj is None else obj))
        written.extend([p_csv, p_json])

    overall = [analysis.total]
    pair("overall_effect", effect_rows(overall), EFFECT_FIELDS, effect_json(overall))
    pair("importance", importance_rows(analysis.importance), IMPORTANCE_FIELDS)
    if model is not None and model.importance:
        pair("definition_importance", importance_rows(model.importance), IMPORTANCE_FIELDS)
    pair("segment_effects", effect_rows(analysis.effects), EFFECT_FIELDS, effect_json(analysis.effects))
    pair("contributions", contribution_rows(analysis.contributions), CONTRIBUTION_FIELDS)
    pair("drilldown", drilldown_rows(analysis.drilldown), DRILLDOWN_FIELDS)
    diag = dict(analysis.diagnostics)
    diag["experiment_period"] = analysis.period.to_dict()
    flat = [{"key": k, "value": json.dumps(v, sort_keys=True) if isinstance(v, dict) else v} for k, v in diag.items()]
    pair("diagnostics", flat, ("key", "value"), diag)
    p_txt = out / "summary.txt"
    p_txt.write_text(summary_text(analysis))
    written.append(p_txt)
    return written
