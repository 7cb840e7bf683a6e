"""Kendall rank correlation between search-stage and retrain-stage scores."""

import csv
from dataclasses import dataclass

import numpy as np

from ..errors import MetricError


def concordance(x, y):
    """(concordant, discordant) counts over unordered index pairs; ties count as neither."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("score vectors must be 1-D and equally long", x=x.shape, y=y.shape)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise MetricError("scores must be finite")
    iu = np.triu_indices(len(x), k=1)
    prod = (np.sign(x[:, None] - x[None, :]) * np.sign(y[:, None] - y[None, :]))[iu]
    return int(np.count_nonzero(prod > 0)), int(np.count_nonzero(prod < 0))


def kendall_tau(x, y):
    """tau = 2 (concordant - discordant) / (N (N - 1)) over N paired scores."""
    n = len(x)
    if n < 2:
        raise MetricError("kendall tau needs at least two pairs", n=n)
    c, d = concordance(x, y)
    return 2.0 * (c - d) / (n * (n - 1))


def ranks(scores):
    """1 = best; equal scores keep their input order."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    out = np.empty(len(order), dtype=int)
    out[order] = np.arange(1, len(order) + 1)
    return out


@dataclass
class TauReport:
    mode: str
    tau: float
    concordant: int
    discordant: int
    items: list
    search_scores: list
    retrain_scores: list

    def rows(self):
        rs, rr = ranks(self.search_scores), ranks(self.retrain_scores)
        return [
            {"item": item, "search_score": s, "retrain_score": r,
             "search_rank": int(a), "retrain_rank": int(b)}
            for item, s, r, a, b in zip(self.items, self.search_scores, self.retrain_scores, rs, rr)
        ]

    def write_csv(self, path):
        fields = ["item", "search_score", "retrain_score", "search_rank", "retrain_rank"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            for row in self.rows():
                row = dict(row, search_score=repr(float(row["search_score"])),
                           retrain_score=repr(float(row["retrain_score"])))
                writer.writerow(row)

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["mode", "n", "concordant", "discordant", "tau"])
            writer.writerow([self.mode, len(self.items), self.concordant, self.discordant,
                             repr(float(self.tau))])


def tau_report(search_scores, retrain_scores, mode, items=None):
    """Rank correlation between the two stages.

    ``mode="inter"`` pairs the top-k models of one run; ``mode="intra"`` pairs the
    top-1 model of each seeded run. The arithmetic is identical; the mode is
    carried into the report so the two tables stay distinguishable.
    """
    if mode not in ("inter", "intra"):
        raise MetricError("mode must be 'inter' or 'intra'", mode=mode)
    search_scores = [float(v) for v in search_scores]
    retrain_scores = [float(v) for v in retrain_scores]
    tau = kendall_tau(search_scores, retrain_scores)
    c, d = concordance(search_scores, retrain_scores)
    if items is None:
        items = [str(i) for i in range(len(search_scores))]
    return TauReport(mode, tau, c, d, list(items), search_scores, retrain_scores)


def read_scores_csv(path, search_col="search_top1", retrain_col="retrain_top1", item_col=None):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MetricError("empty score table", path=str(path))
    for col in (search_col, retrain_col):
        if col not in rows[0]:
            raise MetricError("missing column", column=col, path=str(path))
    items = [r[item_col] for r in rows] if item_col else None
    return ([float(r[search_col]) for r in rows], [float(r[retrain_col]) for r in rows], items)
