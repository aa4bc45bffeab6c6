#!/usr/bin/env python3
"""Smoke test for the scent_py extension module.

Build it first:

    cargo build -p scent-py --release

The script locates the cdylib in target/, links it under the importable
name, and exercises every exported function end to end.
"""

import json
import os
import shutil
import sys
import tempfile


def import_scent_py():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    for profile in ("release", "debug"):
        lib = os.path.join(root, "target", profile, "libscent_py.so")
        if os.path.exists(lib):
            stage = tempfile.mkdtemp(prefix="scent_py_")
            shutil.copy(lib, os.path.join(stage, "scent_py.so"))
            sys.path.insert(0, stage)
            import scent_py

            return scent_py
    sys.exit("libscent_py.so not found; run `cargo build -p scent-py --release`")


def main():
    sp = import_scent_py()
    tmp = tempfile.mkdtemp(prefix="scent_smoke_")

    # FCS: known check value, and append-verify round trip
    assert sp.fcs(b"123456789") == 0x2189
    body = b"\x41\x88\x01\x34\x12\xff\xff\x00\x00"
    crc = sp.fcs(body)
    psdu = body + bytes([crc & 0xFF, crc >> 8])
    assert sp.fcs_status(psdu) == "valid"
    assert sp.fcs_status(psdu[:-1] + b"\x00") == "invalid"

    # frame build + parse round trip
    frame = sp.build_data_frame(7, 0x1A62, 0xFFFF, 0x0003, b"hello")
    parsed = sp.parse_frame(frame)
    assert parsed["frame_type"] == "data"
    assert parsed["seq_no"] == 7
    assert parsed["dst"] == "0xffff"
    assert parsed["src"] == "0x0003"
    assert parsed["payload"] == b"hello"
    assert parsed["fcs_status"] == "valid"

    # malformed input raises
    try:
        sp.parse_frame(b"\x01")
        raise AssertionError("expected ValueError")
    except ValueError:
        pass

    # filters: canonical form, matching, rejection
    assert sp.check_filter("wpan.src16==3 && !(wpan.dst16 == 0xffff)")
    assert sp.match_filter("wpan.src16 == 0x0003", frame)
    assert not sp.match_filter("wpan.src16 != 0x0003", frame)
    assert sp.match_filter("wpan.dst16 == 0xffff && wpan.fcs_ok == 1", frame)
    try:
        sp.check_filter("wpan.bogus == 1")
        raise AssertionError("expected ValueError")
    except ValueError:
        pass

    # synthetic capture -> pcap -> features -> evaluation
    pcap = os.path.join(tmp, "net.pcap")
    n = sp.generate_pcap(pcap, duration_s=240.0, seed=3)
    assert n > 200, n

    fcs_present, frames = sp.load_pcap(pcap)
    assert fcs_present and len(frames) == n
    ts0, psdu0 = frames[0]
    assert sp.fcs_status(bytes(psdu0)) == "valid"

    copy = os.path.join(tmp, "copy.pcap")
    assert sp.save_pcap(copy, frames) == n
    with open(pcap, "rb") as a, open(copy, "rb") as b:
        assert a.read() == b.read(), "pcap round trip must be byte-identical"

    csv = os.path.join(tmp, "net.csv")
    rows = sp.extract_features(pcap, csv, window_s=5.0)
    assert rows > 100, rows

    labels = {
        "0x0000": "coordinator",
        "0x0001": "sensor",
        "0x0002": "sensor",
        "0x0003": "plug",
        "0x0004": "plug",
        "0x0005": "lamp",
        "0x0006": "door",
        "0x0007": "switch",
    }
    report = json.loads(
        sp.evaluate([csv], labels, model="forest", trees=25, folds=5, seed=1)
    )
    assert report["macro_f1"] > 0.6, report["macro_f1"]
    assert len(report["per_class"]) == 6

    ranking = sp.importance([csv], labels, trees=25, seed=1)
    assert len(ranking) == 18
    assert ranking[0][1] >= ranking[-1][1]
    assert abs(sum(score for _, score in ranking) - 1.0) < 1e-9

    print("smoke test passed:", n, "frames,", rows, "feature rows,")
    print("  forest macro-f1 %.3f, top feature %s" % (report["macro_f1"], ranking[0][0]))


if __name__ == "__main__":
    main()
