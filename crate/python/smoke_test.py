"""Smoke test for the sanlab_py extension.

Build and install with
    pip install --no-build-isolation -e crates/py
then run
    python python/smoke_test.py
"""

import math
import os
import tempfile

import sanlab_py as s


def main():
    voc = s.ScalePartitionScheme.voc()
    assert voc.num_partitions() == 3
    rois = [s.RoI(0, 0, w, h) for w, h in [(120, 120), (160, 160), (200, 200), (288, 288), (300, 300)]]
    assert [voc.partition(r) for r in rois] == [0, 0, 1, 1, 2]

    try:
        s.RoI(5, 5, 1, 1)
    except ValueError:
        pass
    else:
        raise AssertionError("inverted RoI accepted")

    train = s.generate_dataset(12, seed=3)
    test = s.generate_dataset(6, seed=3, first_id=12)
    assert len(train) == 12 and test[0].image_id == 12
    c, h, w = train[0].shape
    assert len(train[0].pixels) == c * h * w

    model, log = s.train_detector(train, iterations=20, san="full", seed=3)
    assert len(log) == 20 and all(math.isfinite(x) for row in log for x in row)
    assert model.has_san

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.bin")
        model.save(path)
        model = s.Detector.load(path)
    m_ap, per_class = model.evaluate(test, seed=3)
    assert 0.0 <= m_ap <= 1.0 and len(per_class) == model.num_classes

    dets = [(cls, 1.0, roi) for cls, roi in test[0].annotations]
    assert s.evaluate_ap(dets, test[0].annotations, model.num_classes)[0] == 1.0

    vectors = [(16, [5.0, 4.0, 0.0, 1.0]), (32, [5.0, 0.0, 4.0, 1.0]), (64, [5.0, 4.0, 0.0, 1.0])]
    ids, values = s.compute_cam(vectors, k=2)
    assert ids == [0, 1, 2] and values[1] == [4.0, 0.0, 4.0]
    assert 0.0 <= s.cam_stability(vectors, k=2) < 1.0

    assert s.rmse_without_san([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert abs(s.rmse_without_san([0.0, 0.0], [3.0, 4.0]) - math.sqrt(12.5)) < 1e-12

    print(f"smoke ok: mAP {m_ap:.3f} after 20 iterations")


if __name__ == "__main__":
    main()
