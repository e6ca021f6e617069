"""Smoke test for the Python bindings: build with maturin, then run this."""

import json
import math

import relsparse_py as rs


def main():
    a = rs.Polygon.from_box(0.0, 0.0, 0.0, 4.0, 2.0)
    b = rs.Polygon.from_box(10.0, 0.0, 0.0, 4.0, 2.0)
    assert abs(a.distance(b) - 6.0) < 1e-12
    assert a.contains(1.0, 0.5) and abs(a.area() - 8.0) < 1e-12

    pairs, total = rs.hungarian([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    assert total == 5.0 and len(pairs) == 3

    ds = rs.Dataset.synthetic(scenes=2, seed=3, duration=2.0)
    assert ds.num_scenes == 2 and ds.num_frames == len(ds.frame_ids())
    again = rs.Dataset.from_json(ds.to_json())
    assert again.to_json() == ds.to_json()

    labels = rs.label(ds)
    assert len(labels) == ds.num_frames
    cal = rs.calibrate(ds)
    assert cal["num_pairs"] > 0 and cal["d_min"] >= 0.0

    report = rs.evaluate(ds, ds.perfect_detections(), labels)
    for key in ("mAP", "NDS", "mAP_RA", "NDS_RA"):
        assert report[key] == 1.0, (key, report[key])

    prof = rs.profile(0.5)
    assert 0.0 < prof["report"]["ratio"] < 1.0

    dense = rs.run_toy_frame(ds, 1.0, mode="dense")
    sparse = rs.run_toy_frame(ds, 0.1)
    assert sum(s["active"] for s in sparse["stages"]) < sum(s["active"] for s in dense["stages"])

    suites = rs.gradcheck()
    assert all(s["passed"] for s in suites)

    try:
        rs.Polygon.hull([(0.0, 0.0), (1.0, 1.0)])
    except ValueError:
        pass
    else:
        raise AssertionError("degenerate hull accepted")

    print(json.dumps({"ok": True, "mAP": report["mAP"], "flop_ratio": round(prof["report"]["ratio"], 4), "suites": len(suites)}))


if __name__ == "__main__":
    main()
