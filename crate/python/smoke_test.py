"""Smoke test for the geoweak Python extension.

Build and install first, e.g.:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/geoweak-*.whl
"""

import json
import math

import geoweak


def main():
    a = geoweak.BBox(0, 0, 2, 2)
    b = geoweak.BBox(1, 1, 3, 3)
    assert abs(geoweak.iou(a, b) - 1 / 7) < 1e-12
    assert a.contains(2.0, 2.0)
    assert geoweak.mbr([1, 0, 2, 1, 1, 2, 0, 1]) == geoweak.BBox(0, 0, 2, 2)

    quarter = geoweak.haversine(0, 0, 0, 90)
    assert abs(quarter - math.pi * 6_371_000 / 2) < 1e-6

    labels = geoweak.dbscan([(0, 0), (0, 0.0009), (0.0009, 0), (10, 10)])
    assert labels == [0, 0, 0, None], labels

    assert geoweak.strong_count(0.10, 11_040) == 1104
    assert geoweak.format_delta(89.5, 93.4) == "+3.9"

    d = geoweak.synth(60, seed=3, n_farms=12).cluster()
    assert d.validate() == []
    back = geoweak.Dataset.from_json(d.to_json())
    assert back.num_annotations == d.num_annotations

    split = geoweak.split_random(d, seed=1)
    clusters = d.cluster_ids()
    seen = {}
    for image_id, s in split.items():
        assert seen.setdefault(clusters[image_id], s) == s

    modes = geoweak.sample_fractions(d, split, 0.1, seed=2)
    pseudo = geoweak.pseudolabel(d, modes, seed=4)
    train_weak = [i for i, m in modes.items() if m == "weak"]
    assert pseudo.num_images == len(train_weak)

    result = json.loads(geoweak.evaluate(d, geoweak.pseudo_predictions(pseudo)))
    maps = [t["map"] for t in result["thresholds"]]
    assert all(0.0 <= m <= 1.0 for m in maps), maps

    table = "group,fraction,iou_0.5\nx,0.01,89.5\nx,0.05,93.4\n"
    assert "+3.9" in geoweak.render_report(table)

    try:
        geoweak.Dataset.from_json("{ not json")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed JSON accepted")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
