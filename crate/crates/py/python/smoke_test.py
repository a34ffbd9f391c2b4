"""Smoke test for the il_lab_py extension.

Build first:
    cargo build --release -p il-lab-py --features extension-module
    cp target/release/libil_lab_py.so crates/py/python/il_lab_py.so
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import il_lab_py as il


def main():
    assert il.leader_of(5, 4) == 1
    assert "il-local" in il.VARIANTS

    cfg = il.ScenarioConfig(json.dumps({"net": {"n": 4, "f": 1, "seed": 3}, "protocol": {"variant": "plain"}}))
    assert (cfg.n, cfg.f, cfg.seed, cfg.variant) == (4, 1, 3, "plain")
    plain = cfg.run()
    assert plain.proposal_latency_rounds == 3, plain
    assert plain.bytes_incremental_vs_plain == 0

    cfg.variant = "il-rbc"
    with tempfile.TemporaryDirectory() as out:
        rbc = cfg.run(out)
        assert sorted(os.listdir(out)) == ["report.csv", "report.json", "report.md"]
    assert rbc.duplication_factor == 1.0
    assert rbc.bytes_incremental_vs_plain > 0
    assert json.loads(rbc.to_json())["variant"] == "il-rbc"
    assert cfg.run().trace_digest == rbc.trace_digest

    again = il.ScenarioConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()

    try:
        il.ScenarioConfig('{"net": {"n": 4, "f": 2}}')
    except il.ConfigError as e:
        assert "3f+1" in str(e), e
    else:
        raise AssertionError("invalid size accepted")

    assert il.bribery_threshold("il-base", 4, 1) == 2
    assert il.bribery_threshold("il-local", 4, 1) == 1
    assert il.censorship_delay("il-gossip", 4, 1) == (0, 0)
    assert il.censorship_delay("plain", 4, 1)[1] == 1

    table = il.sweep_table(json.dumps({"variants": ["plain", "il-base"], "sizes": [{"n": 4, "f": 1}]}))
    assert len(table.strip().splitlines()) == 4

    for cid, name, passed, detail in il.verify([10]):
        assert passed, (cid, name, detail)

    print("il_lab_py smoke test passed")


if __name__ == "__main__":
    main()
