"""Plain-text tables from one or more results files.

Each results file contributes one data column; with several files (e.g. one
per seed) an extra ``mean +- std`` column is appended.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from .results import read_results

ORACLE_ORDER = {"undefended": 0, "randp": 1, "misleader": 2}


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}"


def _mean_std(values: list[float | None]) -> str:
    vals = [v for v in values if v is not None]
    if not vals:
        return "-"
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return f"{100.0 * float(np.mean(vals)):.2f} +- {100.0 * std:.2f}"


def format_table(title: str, headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(headers, *rows)] if rows else [len(h) for h in headers]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [title, line(headers), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out)


def _column_labels(paths: list[Path]) -> list[str]:
    stems = [p.parent.name if p.name == "results.json" else p.stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"run{i}" for i in range(len(paths))]


def _with_summary(cells: list[float | None], many: bool) -> list[str]:
    row = [_fmt(c) for c in cells]
    return row + [_mean_std(cells)] if many else row


def _oracle_key(name: str):
    if name in ORACLE_ORDER:
        return (ORACLE_ORDER[name], 0)
    if name.startswith("member:"):
        return (3, int(name.split(":")[1]))
    return (4, name)


def clone_accuracy_table(records: list[dict], labels: list[str]) -> str:
    many = len(records) > 1
    keys = []
    for rec in records:
        for a in rec["attacks"]:
            k = (a["attack_index"], a["kind"], a["mode"], a["clone_arch"], a["budget"], a["oracle"])
            if k not in keys:
                keys.append(k)
    keys.sort(key=lambda k: (k[0], k[4], _oracle_key(k[5])))
    rows = []
    for k in keys:
        cells = []
        for rec in records:
            hit = [a["clone_accuracy"] for a in rec["attacks"]
                   if (a["attack_index"], a["kind"], a["mode"], a["clone_arch"], a["budget"], a["oracle"]) == k]
            cells.append(hit[0] if hit else None)
        rows.append([f"{k[1]}/{k[2]}", k[3], str(k[4]), k[5]] + _with_summary(cells, many))
    headers = ["attack", "clone", "budget", "defense"] + labels + (["mean +- std"] if many else [])
    return format_table("Clone accuracy (%) by defense", headers, rows)


def utility_table(records: list[dict], labels: list[str]) -> str:
    many = len(records) > 1
    rows = []

    def add(name: str, pick):
        acc = [pick(r, "test_accuracy") for r in records]
        agr = [pick(r, "agreement") for r in records]
        rows.append([name, "accuracy"] + _with_summary(acc, many))
        rows.append(["", "agreement"] + _with_summary(agr, many))

    add("undefended", lambda r, k: r["target"]["test_accuracy"] if k == "test_accuracy" else 1.0)
    add("randp", lambda r, k: r["defense"]["randp"][k])
    add("misleader", lambda r, k: r["defense"]["ensemble"][k])
    n_members = max(len(r["defense"]["members"]) for r in records)
    for i in range(n_members):
        arch = next(r["defense"]["members"][i]["arch"] for r in records if i < len(r["defense"]["members"]))
        add(f"member {i} ({arch})",
            lambda r, k, i=i: r["defense"]["members"][i][k] if i < len(r["defense"]["members"]) else None)
    headers = ["defense", "metric"] + labels + (["mean +- std"] if many else [])
    return format_table("Utility on held-out data (%)", headers, rows)


def arch_matrix(records: list[dict]) -> str:
    """Clone architecture (rows) against defense architecture (columns), per-member oracles only."""
    cells = defaultdict(list)
    for rec in records:
        for a in rec["attacks"]:
            if a["oracle"].startswith("member:") and a["clone_accuracy"] is not None:
                cells[(a["clone_arch"], a["defense_arch"])].append(a["clone_accuracy"])
    if not cells:
        return "Clone x defense architecture matrix\n(no per-member attack results)"
    clones = sorted({c for c, _ in cells})
    defenses = sorted({d for _, d in cells})
    rows = [[c] + [_fmt(float(np.mean(cells[(c, d)]))) if (c, d) in cells else "-" for d in defenses]
            for c in clones]
    return format_table("Clone accuracy (%), clone arch x defense arch", ["clone \\ defense"] + defenses, rows)


def budget_series(records: list[dict]) -> str | None:
    series = defaultdict(lambda: defaultdict(list))
    for rec in records:
        for a in rec["attacks"]:
            series[(a["attack_index"], a["kind"], a["mode"], a["clone_arch"])][(a["budget"], a["oracle"])].append(
                a["clone_accuracy"])
    blocks = []
    for (ai, kind, mode, clone), points in sorted(series.items()):
        budgets = sorted({b for b, _ in points})
        if len(budgets) < 2:
            continue
        oracles = sorted({o for _, o in points}, key=_oracle_key)
        rows = []
        for b in budgets:
            row = [str(b)]
            for o in oracles:
                vals = [v for v in points.get((b, o), []) if v is not None]
                row.append(_fmt(float(np.mean(vals))) if vals else "-")
            rows.append(row)
        blocks.append(format_table(f"Clone accuracy (%) vs query budget: attack {ai} ({kind}/{mode}, {clone})",
                                   ["budget"] + oracles, rows))
    return "\n\n".join(blocks) if blocks else None


def report(results_paths) -> str:
    paths = [Path(p) for p in results_paths]
    if not paths:
        raise ValueError("report needs at least one results file")
    records = [read_results(p) for p in paths]
    labels = _column_labels(paths)
    parts = [clone_accuracy_table(records, labels), utility_table(records, labels), arch_matrix(records)]
    sweep = budget_series(records)
    if sweep:
        parts.append(sweep)
    return "\n\n".join(parts) + "\n"
