"""CSV round trips, schema handling, and dataset validation."""

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dptrace.errors import ConfigError, DataError
from dptrace.trace import (FieldSchema, TraceDataset, int_to_ip, ip_to_int, load_csv,
                           load_csv_with_report, load_schema, save_schema,
                           validate_schema, write_csv)

UGR_SCHEMA = (
    FieldSchema("ts", "timestamp"),
    FieldSchema("td", "integer"),
    FieldSchema("srcip", "ip"),
    FieldSchema("dstip", "ip"),
    FieldSchema("srcport", "port"),
    FieldSchema("dstport", "port"),
    FieldSchema("proto", "categorical"),
    FieldSchema("pkt", "integer"),
    FieldSchema("byt", "integer"),
    FieldSchema("label", "categorical", "label"),
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestIpConversion:
    def test_round_trip_examples(self):
        for text in ("0.0.0.0", "10.0.0.5", "192.168.1.254", "255.255.255.255"):
            assert int_to_ip(ip_to_int(text)) == text

    def test_rejects_garbage(self):
        for bad in ("10.0.0", "1.2.3.4.5", "299.0.0.1", "a.b.c.d"):
            with pytest.raises(ValueError):
                ip_to_int(bad)


class TestLoadCsv:
    def test_three_row_flow_csv(self, tmp_path):
        path = tmp_path / "flows.csv"
        write_lines(path, [
            "ts,td,srcip,dstip,srcport,dstport,proto,pkt,byt,label",
            "1000,5,10.0.0.1,10.0.0.2,1234,80,TCP,3,180,benign",
            "1010,0,10.0.0.3,10.0.0.2,5353,53,UDP,1,60,benign",
            "1020,9,10.0.0.1,10.0.0.9,2222,22,TCP,7,700,attack",
        ])
        dataset = load_csv(path, UGR_SCHEMA)
        assert dataset.n == 3
        assert dataset.provenance == "raw"
        assert dataset.columns["srcip"][0] == ip_to_int("10.0.0.1")
        assert list(dataset.columns["dstport"]) == [80, 53, 22]
        assert dataset.record(2)["label"] == "attack"

    def test_port_out_of_range_names_row_and_range(self, tmp_path):
        path = tmp_path / "bad.csv"
        write_lines(path, [
            "ts,td,srcip,dstip,srcport,dstport,proto,pkt,byt,label",
            "1000,5,10.0.0.1,10.0.0.2,1234,80,TCP,3,180,benign",
            "1010,0,10.0.0.3,10.0.0.2,70000,53,UDP,1,60,benign",
        ])
        with pytest.raises(DataError) as err:
            load_csv(path, UGR_SCHEMA)
        message = str(err.value)
        assert "row 2" in message
        assert "srcport" in message
        assert "65535" in message

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(tmp_path / "nope.csv", UGR_SCHEMA)

    def test_unknown_column(self, tmp_path):
        path = tmp_path / "odd.csv"
        write_lines(path, ["ts,who", "1,we"])
        with pytest.raises(DataError) as err:
            load_csv(path, (FieldSchema("ts", "timestamp"),))
        assert "who" in str(err.value)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "odd.csv"
        write_lines(path, ["ts", "1"])
        schema = (FieldSchema("ts", "timestamp"), FieldSchema("pkt", "integer"))
        with pytest.raises(DataError) as err:
            load_csv(path, schema)
        assert "pkt" in str(err.value)

    def test_report_mode_skips_but_accounts(self, tmp_path):
        path = tmp_path / "mixed.csv"
        write_lines(path, [
            "ts,pkt",
            "1,2",
            "2,not-a-number",
            "3,4",
        ])
        schema = (FieldSchema("ts", "timestamp"), FieldSchema("pkt", "integer"))
        dataset, report = load_csv_with_report(path, schema)
        assert dataset.n == 2
        assert len(report) == 1 and "row 2" in report[0]
        # order preserved, nothing silently dropped beyond the reported row
        assert list(dataset.columns["ts"]) == [1, 3]

    def test_reordered_header_is_accepted(self, tmp_path):
        path = tmp_path / "re.csv"
        write_lines(path, ["pkt,ts", "2,1"])
        schema = (FieldSchema("ts", "timestamp"), FieldSchema("pkt", "integer"))
        dataset = load_csv(path, schema)
        assert dataset.columns["ts"][0] == 1
        assert dataset.columns["pkt"][0] == 2


class TestWriteCsv:
    def test_round_trip_100_records(self, tmp_path, flow_dataset):
        path = tmp_path / "out.csv"
        write_csv(flow_dataset, path)
        back = load_csv(path, flow_dataset.schema)
        assert back.n == flow_dataset.n
        for f in flow_dataset.schema:
            np.testing.assert_array_equal(back.columns[f.name], flow_dataset.columns[f.name])

    def test_empty_dataset_rejected(self, tmp_path):
        schema = (FieldSchema("pkt", "integer"),)
        dataset = TraceDataset(schema, {"pkt": np.array([], dtype=np.int64)},
                               provenance="synthetic")
        with pytest.raises(DataError):
            write_csv(dataset, tmp_path / "empty.csv")

    def test_header_matches_schema_order_all_kinds(self, tmp_path):
        schema = (
            FieldSchema("srcip", "ip"),
            FieldSchema("dstport", "port"),
            FieldSchema("proto", "categorical"),
            FieldSchema("pkt", "integer"),
            FieldSchema("rate", "float"),
            FieldSchema("ts", "timestamp"),
        )
        dataset = TraceDataset.from_rows(schema, [
            (ip_to_int("10.1.2.3"), 443, "TCP", 5, 1.25, 1700000000000),
        ])
        path = tmp_path / "kinds.csv"
        write_csv(dataset, path)
        header = path.read_text().splitlines()[0]
        assert header == "srcip,dstport,proto,pkt,rate,ts"
        back = load_csv(path, schema)
        assert back.columns["rate"][0] == 1.25
        assert back.columns["srcip"][0] == ip_to_int("10.1.2.3")

    @given(values=st.lists(st.floats(0, 1e12, allow_nan=False, allow_infinity=False),
                           min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_float_round_trip(self, tmp_path_factory, values):
        tmp = tmp_path_factory.mktemp("floats")
        schema = (FieldSchema("td", "float"),)
        dataset = TraceDataset.from_rows(schema, [(v,) for v in values])
        path = tmp / "f.csv"
        write_csv(dataset, path)
        back = load_csv(path, schema)
        np.testing.assert_array_equal(back.columns["td"], dataset.columns["td"])


class TestValidateSchema:
    def test_valid_dataset_empty_report(self, flow_dataset):
        assert validate_schema(flow_dataset).ok

    def test_negative_counter_single_violation(self, flow_dataset):
        flow_dataset.columns["byt"] = flow_dataset.columns["byt"].copy()
        flow_dataset.columns["byt"][7] = -1
        report = validate_schema(flow_dataset)
        assert len(report.violations) == 1
        violation = report.violations[0]
        assert violation.attribute == "byt" and violation.row == 7

    def test_duplicate_attribute_is_schema_level(self):
        schema = (FieldSchema("pkt", "integer"), FieldSchema("pkt", "integer"))
        dataset = TraceDataset(schema, {"pkt": np.array([1])})
        report = validate_schema(dataset)
        assert any(v.attribute is None and "duplicate" in v.message
                   for v in report.violations)

    def test_two_labels_rejected(self):
        schema = (FieldSchema("a", "categorical", "label"),
                  FieldSchema("b", "categorical", "label"))
        dataset = TraceDataset(schema, {"a": np.array(["x"], dtype=object),
                                        "b": np.array(["y"], dtype=object)})
        assert not validate_schema(dataset).ok


class TestSchemaSidecar:
    def test_save_and_load(self, tmp_path):
        path = tmp_path / "schema.json"
        save_schema(UGR_SCHEMA, path)
        assert load_schema(path) == UGR_SCHEMA

    def test_bad_kind_rejected(self, tmp_path):
        path = tmp_path / "schema.json"
        path.write_text('[{"name": "x", "kind": "complex"}]', encoding="utf-8")
        with pytest.raises(ConfigError):
            load_schema(path)

    def test_unknown_role_rejected(self):
        with pytest.raises(ConfigError):
            FieldSchema("x", "integer", "boss")


@pytest.mark.skipif("DPTRACE_TON_CSV" not in os.environ,
                    reason="public TON subset not available in this environment")
def test_ton_subset_dimensions():
    schema = load_schema(os.environ["DPTRACE_TON_SCHEMA"])
    dataset = load_csv(os.environ["DPTRACE_TON_CSV"], schema)
    assert dataset.n == 295_497
    assert len(dataset.schema) == 11
