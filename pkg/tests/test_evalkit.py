import json
from fractions import Fraction

import numpy as np
import pytest

from bihl.boxes import iou
from bihl.errors import BihlError
from bihl.evalkit import (
    LADDERS, EvalReport, Perturbation, best_overlaps, detection_rate, evaluate,
    jpeg_bytes, match_fraction, mabo, perturb, repeatability, time_pipeline,
)
from bihl.imgpyr import ImagePlane, write_pgm
from bihl.proposer import propose
from bihl.trainer import AnnotatedBox

from conftest import random_plane


def gt(*boxes, label="object"):
    return [AnnotatedBox("img", *b, label) for b in boxes]


class TestMetrics:
    def test_iou_example(self):
        assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(float(Fraction(1, 7)))

    def test_iou_disjoint_and_identical(self):
        assert iou((0, 0, 4, 4), (10, 10, 4, 4)) == 0.0
        assert iou((3, 5, 7, 9), (3, 5, 7, 9)) == 1.0

    def test_dr_examples(self):
        g = {"img": gt((0, 0, 10, 10), (50, 50, 10, 10))}
        assert detection_rate({"img": [(0, 0, 10, 10), (50, 50, 10, 10)]}, g) == 1.0
        assert detection_rate({"img": [(200, 200, 10, 10)]}, g) == 0.0
        assert detection_rate({"img": [(0, 0, 10, 10)]}, g) == 0.5

    def test_missing_image_counts_as_miss(self):
        assert detection_rate({}, {"img": gt((0, 0, 10, 10))}) == 0.0

    def test_mabo_single(self):
        assert mabo({"img": [(1, 1, 2, 2)]}, {"img": gt((0, 0, 2, 2))}) == pytest.approx(1 / 7)

    def test_mabo_averages_classes_not_boxes(self):
        # class a: overlaps 1.0 and 0.6, class b: 0.6 -> (0.8 + 0.6) / 2
        g = {"img": gt((0, 0, 10, 10), label="a") + gt((100, 0, 10, 10), label="a") + gt((200, 0, 10, 10), label="b")}
        p = {"img": [(0, 0, 10, 10), (100, 0, 10, 6), (200, 0, 6, 10)]}
        assert mabo(p, g) == pytest.approx(0.7)

    def test_budget_truncates(self):
        g = {"img": gt((50, 50, 10, 10))}
        p = {"img": [(0, 0, 10, 10), (50, 50, 10, 10)]}
        assert detection_rate(p, g, budget=1) == 0.0
        assert detection_rate(p, g, budget=2) == 1.0

    def test_no_ground_truth_raises(self):
        with pytest.raises(BihlError) as e:
            best_overlaps({"img": [(0, 0, 1, 1)]}, {"img": []})
        assert e.value.code == "no-gt"

    def test_dr_monotone_in_budget(self, rng):
        g = {f"i{k}": gt(*[tuple(rng.integers(0, 80, 2)) + (16, 16) for _ in range(3)]) for k in range(5)}
        p = {k: [tuple(rng.integers(0, 80, 2)) + (16, 16) for _ in range(200)] for k in g}
        vals = [detection_rate(p, g, budget=b) for b in (1, 10, 50, 200)]
        assert vals == sorted(vals)
        ms = [mabo(p, g, budget=b) for b in (1, 10, 50, 200)]
        assert ms == sorted(ms)

    def test_report_serialisation(self):
        g = {"img": gt((0, 0, 10, 10))}
        rep = evaluate({"img": [(0, 0, 10, 10)]}, g, sweep=(0.5, 0.9), times=[0.01, 0.03])
        assert isinstance(rep, EvalReport)
        assert rep.detection_rate == 1.0 and rep.mean_time_s == pytest.approx(0.02)
        data = json.loads(rep.to_json())
        assert data["recall_at"] == {"0.5": 1.0, "0.9": 1.0}
        rows = rep.to_csv().splitlines()
        assert rows[0] == "metric,value" and "detection_rate,1.0" in rows


class TestPerturbations:
    def test_ladders(self):
        assert LADDERS["jpeg"] == (50, 20, 10, 5)
        assert Perturbation.from_index("blur", 2).level == 4.0

    def test_invalid(self):
        with pytest.raises(BihlError):
            Perturbation("fisheye")
        with pytest.raises(BihlError):
            Perturbation("blur", 3.0)
        with pytest.raises(BihlError):
            Perturbation.from_index("jpeg", 4)

    @pytest.mark.parametrize("p", [Perturbation("identity"), Perturbation("blur", 0.0), Perturbation("scale", 1.0)])
    def test_identity_levels(self, rng, p):
        img = random_plane(rng, 40, 50)
        out, m = perturb(img, p)
        assert np.array_equal(out.data, img.data)
        assert np.allclose(m.boxes_to_original([(3, 4, 5, 6)]), [(3, 4, 5, 6)])

    def test_scale_two(self, rng):
        img = random_plane(rng, 40, 50)
        out, m = perturb(img, Perturbation("scale", 2.0))
        assert (out.width, out.height) == (100, 80)
        assert np.allclose(m.boxes_to_original([(20, 10, 40, 60)]), [(10, 5, 20, 30)])

    def test_saltpepper_exact_count(self):
        img = ImagePlane(np.full((80, 100), 128, np.uint8))
        out, _ = perturb(img, Perturbation("saltpepper", 0.05), seed=3)
        changed = out.data != 128
        assert changed.sum() == 400
        assert set(np.unique(out.data[changed])) <= {0, 255}

    def test_seed_determinism(self, rng):
        img = random_plane(rng, 30, 30)
        a, _ = perturb(img, Perturbation("saltpepper", 0.1), seed=5)
        b, _ = perturb(img, Perturbation("saltpepper", 0.1), seed=5)
        c, _ = perturb(img, Perturbation("saltpepper", 0.1), seed=6)
        assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)

    @pytest.mark.parametrize("kind", ["scale", "rotate"])
    def test_geometric_round_trip(self, rng, kind):
        img = random_plane(rng, 120, 160)
        for level in LADDERS[kind]:
            _, m = perturb(img, Perturbation(kind, level))
            pts = rng.uniform(0, 100, (50, 2))
            back = m.to_original_points(m.to_perturbed_points(pts))
            assert np.abs(back - pts).max() < 0.5

    def test_rotation_maps_center_to_center(self, rng):
        img = random_plane(rng, 60, 80)
        _, m = perturb(img, Perturbation("rotate", 15.0))
        assert np.allclose(m.to_perturbed_points([(40, 30)]), [(40, 30)])

    def test_illumination_monotone(self, rng):
        img = random_plane(rng, 20, 20)
        out, _ = perturb(img, Perturbation("illumination", 2.0))
        order = np.argsort(img.data.ravel(), kind="stable")
        assert np.all(np.diff(out.data.ravel()[order].astype(int)) >= 0)
        assert np.all(out.data <= img.data)

    def test_jpeg_is_real_jpeg(self, rng):
        img = random_plane(rng, 32, 32)
        data = jpeg_bytes(img, 5)
        assert data[:2] == b"\xff\xd8"
        assert len(jpeg_bytes(img, 5)) < len(jpeg_bytes(img, 50))


class TestRepeatability:
    def test_match_fraction(self):
        a = np.array([(0, 0, 10, 10), (50, 50, 10, 10)], float)
        assert match_fraction(a, a) == 1.0
        assert match_fraction(a, a[:1]) == 0.5
        assert match_fraction(a, np.zeros((0, 4))) == 0.0
        assert match_fraction(np.zeros((0, 4)), np.zeros((0, 4))) == 1.0

    def test_match_is_one_to_one(self):
        a = np.array([(0, 0, 10, 10)], float)
        b = np.array([(0, 0, 10, 10), (0, 0, 10, 11)], float)
        assert match_fraction(a, b) == 0.5

    def test_identity_is_one(self, small_corpus, toy_model):
        assert repeatability(toy_model, small_corpus[0].image, Perturbation("identity")) == 1.0

    def test_black_image_is_zero(self, small_corpus, toy_model):
        img = small_corpus[1].image
        black = ImagePlane(np.zeros_like(img.data))
        a = propose(img, toy_model)[:1000].boxes
        b = propose(black, toy_model)[:1000].boxes
        assert match_fraction(a, b) == 0.0

    def test_scale_uses_mapping(self, small_corpus, toy_model):
        r = repeatability(toy_model, small_corpus[2].image, Perturbation("scale", 2.0))
        assert 0.0 < r <= 1.0


def test_time_pipeline(small_corpus, toy_model, tmp_path):
    paths = []
    for sc in small_corpus[:3]:
        p = tmp_path / f"{sc.name}.pgm"
        write_pgm(sc.image, str(p))
        paths.append(str(p))
    per = []
    t = time_pipeline(toy_model, paths, per_image=per)
    assert len(per) == 3 and t == pytest.approx(sum(per) / 3)
    with pytest.raises(BihlError):
        time_pipeline(toy_model, [])
