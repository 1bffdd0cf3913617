"""Metrics accounting tests: quantile convention, classification precedence,
conservation identities, and the report files."""

import csv
import json
import math
import random

import pytest

from uavnet.metrics import (OP_ASSESSMENT, OP_DELIVERY, OP_OTHER,
                            OP_SURVEILLANCE, OP_TRACKING, OPERATIONS,
                            MetricsRecorder, quantile, summarize)


def test_quantile_nearest_rank_characterization():
    # nearest-rank: the smallest sample x with #(samples <= x) >= q*n
    rng = random.Random(5)
    for _ in range(50):
        n = rng.randint(1, 40)
        samples = [rng.uniform(-100, 100) for _ in range(n)]
        q = rng.uniform(0.01, 1.0)
        got = quantile(samples, q)
        ordered = sorted(samples)
        eligible = [x for x in ordered
                    if sum(1 for y in samples if y <= x) >= q * n]
        assert got == eligible[0]


def test_quantile_examples():
    data = list(range(1, 11))
    assert quantile(data, 0.5) == 5
    assert quantile(data, 0.95) == 10
    assert quantile(data, 1.0) == 10
    assert quantile(data, 0.05) == 1
    assert quantile([7.0], 0.5) == 7.0


def test_quantile_validation():
    with pytest.raises(ValueError):
        quantile([], 0.5)
    with pytest.raises(ValueError):
        quantile([1.0], 0.0)
    with pytest.raises(ValueError):
        quantile([1.0], 1.5)


def test_quantile_leaves_input_unsorted():
    data = [3.0, 1.0, 2.0]
    quantile(data, 0.5)
    assert data == [3.0, 1.0, 2.0]


def test_summarize_agrees_with_quantile():
    rng = random.Random(9)
    samples = [rng.gauss(50, 10) for _ in range(321)]
    s = summarize(samples)
    assert s["count"] == 321
    assert s["mean"] == pytest.approx(sum(samples) / 321)
    assert s["median"] == quantile(samples, 0.5)
    assert s["p95"] == quantile(samples, 0.95)
    assert s["p99"] == quantile(samples, 0.99)
    assert s["min"] == min(samples)
    assert s["max"] == max(samples)
    assert summarize([]) is None


def _recorder(monitor_id=900):
    return MetricsRecorder(dt_us=100_000, monitor_id=monitor_id)


def test_classification_precedence():
    m = _recorder(monitor_id=7)
    # monitor as sender wins over everything else
    assert m.classify_operation(7, 2, "monitor", "survey") == OP_SURVEILLANCE
    assert m.classify_operation(2, 7, "survey", "monitor") == OP_TRACKING
    assert m.classify_operation(1, 2, "survey", "delivery") == OP_ASSESSMENT
    assert m.classify_operation(1, 2, "connectivity", "delivery") == OP_DELIVERY
    assert m.classify_operation(1, 2, "connectivity", "connectivity") == OP_OTHER


def test_delivery_samples_and_filters():
    m = _recorder(monitor_id=7)
    m.record_delivery(1_000_000, 40.0, 7, 2, "monitor", "survey")
    m.record_delivery(1_500_000, 60.0, 1, 2, "survey", "survey")
    m.record_delivery(2_000_000, 80.0, 3, 4, "delivery", "connectivity")
    assert m.delivered == 3
    assert m.latency_values() == [40.0, 60.0, 80.0]
    assert m.latency_values(operation=OP_SURVEILLANCE) == [40.0]
    assert m.latency_values(operation=OP_ASSESSMENT) == [60.0]
    assert m.latency_values(within_cluster=True) == [60.0]
    assert m.latency_values(within_cluster=False) == [40.0, 80.0]
    assert m.latency_values(operation=OP_DELIVERY, within_cluster=True) == []


def test_accounting_identities():
    m = _recorder()
    assert m.delivery_ratio() is None
    for _ in range(10):
        m.record_send()
    for k in range(6):
        m.record_delivery(0, 50.0, 1, 2, "survey", "survey")
    m.record_drop("link_down")
    m.record_drop("budget")
    assert m.pending() == 2
    assert m.delivery_ratio() == pytest.approx(6 / 8)
    with pytest.raises(ValueError):
        m.record_drop("gremlins")


def test_commit_bookkeeping():
    m = _recorder()
    m.record_commit(0, 5_000_000, 0, 100)
    m.record_commit(1, 10_000_000, 0, 150)
    with pytest.raises(ValueError):
        m.record_commit(1, 11_000_000, 1, 10)
    assert m.txs_committed == 250
    assert m.commit_gaps_s() == [5.0]


def test_tps_buckets_sum_and_placement():
    m = _recorder()
    m.record_commit(0, 2_500_000, 0, 10)    # bucket 2
    m.record_commit(1, 7_000_000, 0, 20)    # bucket 7
    m.record_commit(2, 99_000_000, 0, 5)    # past the horizon, clamps to last
    buckets = m.tps_buckets(10.0)
    assert len(buckets) == 10
    assert buckets[2] == 10
    assert buckets[7] == 20
    assert buckets[9] == 5
    assert sum(buckets) == m.txs_committed
    assert m.mean_tps(10.0) == pytest.approx(3.5)
    assert m.mean_tps(0.0) == 0.0


def test_finality_latencies():
    m = _recorder()
    # heights recorded out of order; latencies come back in height order
    m.record_commit(1, 5_300_000, 0, 1)   # slot at 5.0 -> 0.3
    m.record_commit(0, 300_000, 0, 1)     # slot at 0.0 -> 0.3
    m.record_commit(2, 12_000_000, 1, 1)  # slot at 10.0 -> 2.0
    lat = m.finality_latencies_s(block_time_s=5.0)
    assert lat == pytest.approx([0.3, 0.3, 2.0])


def test_summary_shape():
    m = _recorder(monitor_id=7)
    m.record_send()
    m.record_delivery(500_000, 42.0, 7, 1, "monitor", "survey")
    m.record_commit(0, 5_000_000, 0, 3)
    m.record_incident("example incident")
    s = m.summary(10.0)
    assert s["duration_s"] == 10.0
    assert s["messages"]["sent"] == 1
    assert s["messages"]["delivery_ratio"] == 1.0
    assert s["latency_ms"]["all"]["count"] == 1
    assert OP_SURVEILLANCE in s["latency_ms"]["by_operation"]
    assert OP_TRACKING not in s["latency_ms"]["by_operation"]
    assert s["consensus"]["blocks_committed"] == 1
    assert s["consensus"]["txs_committed"] == 3
    assert s["incidents"] == ["example incident"]


def test_write_report_files(tmp_path):
    m = _recorder(monitor_id=7)
    for k in range(20):
        m.record_send()
        m.record_delivery(k * 250_000, 30.0 + k, 1, 2, "survey", "survey")
    m.record_commit(0, 5_000_000, 0, 10)
    m.record_commit(1, 10_000_000, 2, 12)
    paths = m.write_report(tmp_path, duration_s=10.0)
    assert set(paths) == {"summary", "tps", "latency", "commits"}

    with open(paths["summary"], encoding="utf-8") as fh:
        assert json.load(fh) == json.loads(json.dumps(m.summary(10.0)))

    with open(paths["tps"], newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10
    assert sum(int(r["committed_txs"]) for r in rows) == 22

    with open(paths["latency"], newline="", encoding="utf-8") as fh:
        lat_rows = list(csv.DictReader(fh))
    # sends at 0..4.75 s, all assessment: five second-buckets of four samples
    assert [r["second"] for r in lat_rows] == ["0", "1", "2", "3", "4"]
    assert all(r["operation"] == "assessment" for r in lat_rows)
    assert all(int(r["count"]) == 4 for r in lat_rows)
    first = [30.0, 31.0, 32.0, 33.0]
    assert float(lat_rows[0]["mean_ms"]) == pytest.approx(sum(first) / 4)
    assert float(lat_rows[0]["max_ms"]) == pytest.approx(33.0)
    assert float(lat_rows[0]["p95_ms"]) == pytest.approx(quantile(first, 0.95))

    with open(paths["commits"], newline="", encoding="utf-8") as fh:
        commit_rows = list(csv.DictReader(fh))
    assert [int(r["height"]) for r in commit_rows] == [0, 1]
    assert [int(r["view"]) for r in commit_rows] == [0, 2]
