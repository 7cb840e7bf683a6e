import csv
import io
from fractions import Fraction

import numpy as np
import pytest

from desknas.errors import MetricError
from desknas.harness.bench import bench_complexity
from desknas.metrics import (
    CHOICE, counting, kendall_tau, ranks, tau_report, topk_accuracy, write_counter_csv,
)
from desknas.metrics.kendall import concordance, read_scores_csv
from desknas.tensorcore import Tensor, ops


def brute_tau(x, y):
    c = d = 0
    for i in range(len(x)):
        for j in range(i + 1, len(x)):
            s = (x[i] - x[j]) * (y[i] - y[j])
            c += s > 0
            d += s < 0
    return Fraction(2 * (c - d), len(x) * (len(x) - 1))


def test_tau_identity_and_reverse():
    x = [1, 2, 3, 4]
    assert kendall_tau(x, x) == 1.0
    assert kendall_tau(x, x[::-1]) == -1.0


def test_tau_hand_case():
    assert concordance([1, 2, 3], [1, 3, 2]) == (2, 1)
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == 1 / 3


def test_tau_ties_count_as_neither():
    assert concordance([1, 1, 2], [1, 2, 3]) == (2, 0)
    assert kendall_tau([1, 1, 2], [1, 2, 3]) == 2 / 3


def test_tau_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 13))
        x = rng.integers(0, 6, n).tolist()
        y = rng.permutation(n).tolist()
        assert kendall_tau(x, y) == float(brute_tau(x, y))


def test_tau_needs_two_pairs():
    with pytest.raises(MetricError):
        kendall_tau([1.0], [1.0])
    with pytest.raises(MetricError):
        kendall_tau([1.0, 2.0], [1.0])


def test_ranks_best_first_stable():
    assert ranks([0.5, 0.9, 0.5, 0.1]).tolist() == [2, 1, 3, 4]


def test_tau_report_modes_and_csv(tmp_path):
    rep = tau_report([0.3, 0.2, 0.1], [0.3, 0.2, 0.1], "intra", items=["a", "b", "c"])
    assert rep.tau == 1.0 and rep.mode == "intra"
    rep.write_csv(tmp_path / "pairs.csv")
    rep.write_summary_csv(tmp_path / "tau.csv")
    rows = list(csv.DictReader(open(tmp_path / "pairs.csv")))
    assert [r["item"] for r in rows] == ["a", "b", "c"]
    assert list(csv.reader(open(tmp_path / "tau.csv")))[1] == ["intra", "3", "3", "0", "1.0"]
    with pytest.raises(MetricError):
        tau_report([1, 2], [1, 2], "cross")


def test_read_scores_csv(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("rank,arch,search_top1,retrain_top1\n1,0-1,0.9,0.8\n2,1-1,0.7,0.85\n")
    s, r, items = read_scores_csv(p, item_col="arch")
    assert s == [0.9, 0.7] and r == [0.8, 0.85] and items == ["0-1", "1-1"]
    with pytest.raises(MetricError):
        read_scores_csv(p, search_col="nope")


def test_topk_accuracy():
    logits = np.array([[0.1, 0.9, 0.0], [0.8, 0.1, 0.1], [0.3, 0.3, 0.4]])
    labels = np.array([1, 2, 0])
    assert topk_accuracy(logits, labels, 1) == pytest.approx(1 / 3)
    assert topk_accuracy(logits, labels, 2) == pytest.approx(2 / 3)
    assert topk_accuracy(logits, labels, 3) == 1.0
    with pytest.raises(MetricError):
        topk_accuracy(logits, labels, 4)


def test_counter_backward_is_twice_forward():
    w = Tensor(np.ones((4, 3)), requires_grad=True)
    with counting() as c:
        loss = ops.sum(ops.matmul(Tensor(np.ones((2, 4))), w))
        loss.backward()
    assert c.forward_macs == 2 * 4 * 3
    assert c.backward_macs == 2 * c.forward_macs
    assert c.live == 0 and c.peak_activations > 0


def test_counter_scaling_small():
    rows = bench_complexity(ns=(2, 4), layers=2, channels=4, image_size=4, batch_size=2)
    fwd = {(r["method"], r["n"]): r["forward_macs"] for r in rows if r["scope"] == CHOICE}
    assert fwd[("dsnas", 2)] == fwd[("dsnas", 4)]
    for m in ("snas", "proxyless-st"):
        for n in (2, 4):
            assert fwd[(m, n)] == n * fwd[("dsnas", n)]


def test_counter_csv_stream():
    buf = io.StringIO()
    write_counter_csv(buf, [{"method": "dsnas", "n": 2, "scope": "total", "forward_macs": 1,
                             "backward_macs": 2, "peak_activations": 3}])
    assert buf.getvalue().splitlines() == [
        "method,n,scope,forward_macs,backward_macs,peak_activations", "dsnas,2,total,1,2,3"]
