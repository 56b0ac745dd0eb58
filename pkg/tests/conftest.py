"""Shared fixtures: small deterministic trace datasets."""

from __future__ import annotations

import numpy as np
import pytest

from dptrace.trace import FieldSchema, TraceDataset


FLOW_SCHEMA = (
    FieldSchema("ts", "timestamp"),
    FieldSchema("td", "integer"),
    FieldSchema("srcip", "ip", "group-identifier-part"),
    FieldSchema("dstip", "ip", "group-identifier-part"),
    FieldSchema("srcport", "port", "group-identifier-part"),
    FieldSchema("dstport", "port", "group-identifier-part"),
    FieldSchema("proto", "categorical", "group-identifier-part"),
    FieldSchema("pkt", "integer"),
    FieldSchema("byt", "integer"),
    FieldSchema("label", "categorical", "label"),
)


def make_flow_dataset(n: int = 400, seed: int = 11, n_flows: int = 40) -> TraceDataset:
    """Small flow trace with realistic field shapes and grouped timestamps."""
    rng = np.random.default_rng(seed)
    flow_src = rng.integers(0, 2**32, size=n_flows, dtype=np.int64)
    flow_dst = rng.integers(0, 2**32, size=n_flows, dtype=np.int64)
    flow_sport = rng.integers(1024, 61000, size=n_flows)
    flow_dport = rng.choice([22, 53, 80, 443, 21, 8080], size=n_flows)
    flow_proto = rng.choice(["TCP", "UDP", "ICMP"], size=n_flows, p=[0.7, 0.25, 0.05])

    flow = rng.integers(0, n_flows, size=n)
    ts = np.sort(rng.integers(0, 60_000, size=n))
    pkt = rng.integers(1, 50, size=n)
    byt = pkt * rng.integers(40, 1500, size=n)
    td = rng.integers(0, 5000, size=n)
    label = np.where(rng.random(n) < 0.2, "attack", "benign")
    columns = {
        "ts": ts.astype(np.int64),
        "td": td.astype(np.int64),
        "srcip": flow_src[flow],
        "dstip": flow_dst[flow],
        "srcport": flow_sport[flow].astype(np.int64),
        "dstport": flow_dport[flow].astype(np.int64),
        "proto": np.asarray(flow_proto[flow], dtype=object),
        "pkt": pkt.astype(np.int64),
        "byt": byt.astype(np.int64),
        "label": np.asarray(label, dtype=object),
    }
    return TraceDataset(FLOW_SCHEMA, columns, provenance="raw")


PLANTED_SCHEMA = (
    FieldSchema("proto", "categorical"),
    FieldSchema("dstport", "port"),
    FieldSchema("pkt", "integer"),
    FieldSchema("svc", "categorical"),
    FieldSchema("type", "categorical", "label"),
)


def make_planted_dataset(n: int = 10_000, seed: int = 3) -> TraceDataset:
    """Five attributes with a strong planted (type, dstport) dependency and a
    secondary (dstport, svc) chain; everything else near-independent."""
    rng = np.random.default_rng(seed)
    type_values = np.array(["normal", "ddos", "scan", "inject"], dtype=object)
    type_col = type_values[rng.choice(4, size=n, p=[0.6, 0.2, 0.12, 0.08])]

    port_for_type = {"normal": 443, "ddos": 53, "scan": 22, "inject": 8080}
    dstport = np.array([port_for_type[t] for t in type_col], dtype=np.int64)
    flip = rng.random(n) < 0.08
    dstport[flip] = rng.choice([443, 53, 22, 8080, 80], size=int(flip.sum()))

    svc_for_port = {443: "https", 53: "dns", 22: "ssh", 8080: "proxy", 80: "http"}
    svc = np.array([svc_for_port[p] for p in dstport], dtype=object)
    flip = rng.random(n) < 0.1
    svc[flip] = rng.choice(["https", "dns", "ssh", "proxy", "http"], size=int(flip.sum()))

    proto = rng.choice(["TCP", "UDP", "ICMP"], size=n, p=[0.6, 0.3, 0.1])
    pkt = rng.geometric(0.05, size=n).astype(np.int64)
    columns = {
        "proto": np.asarray(proto, dtype=object),
        "dstport": dstport,
        "pkt": pkt,
        "svc": svc,
        "type": np.asarray(type_col, dtype=object),
    }
    return TraceDataset(PLANTED_SCHEMA, columns, provenance="raw")


@pytest.fixture
def flow_dataset():
    return make_flow_dataset()


@pytest.fixture
def planted_dataset():
    return make_planted_dataset()
