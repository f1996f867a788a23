import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskdetr import tensor as T
from deskdetr.boxes import (
    RESIZE_ONLY,
    Box,
    GroundTruthSet,
    SpatialTransform,
    TransformPolicy,
    crop_boxes,
    cxcywh_to_xyxy,
    giou,
    iou,
    pairwise_giou,
    pairwise_iou,
    resize_bilinear,
    sample_transform,
    tensor_cxcywh_to_xyxy,
    tensor_giou,
    transform_boxes,
    transform_image,
    xyxy_to_cxcywh,
)
from deskdetr.exceptions import ParameterError
from helpers import gt_set


@st.composite
def corner_boxes(draw):
    x0 = draw(st.floats(-2, 2))
    y0 = draw(st.floats(-2, 2))
    w = draw(st.floats(0.01, 3))
    h = draw(st.floats(0.01, 3))
    return (x0, y0, x0 + w, y0 + h)


@st.composite
def unit_boxes(draw):
    w = draw(st.floats(0.02, 1.0))
    h = draw(st.floats(0.02, 1.0))
    cx = draw(st.floats(w / 2, 1 - w / 2))
    cy = draw(st.floats(h / 2, 1 - h / 2))
    return (cx, cy, w, h)


gt_sets = st.lists(unit_boxes(), min_size=0, max_size=6).map(
    lambda bs: gt_set(np.array(bs).reshape(-1, 4), np.arange(len(bs)) % 3))


# -- IoU / GIoU ------------------------------------------------------------------------
def test_iou_examples():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert abs(iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) - 1 / 3) <= 1e-12


def test_giou_examples():
    assert giou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert abs(giou((0, 0, 1, 1), (1, 0, 2, 1)) - 0.0) <= 1e-12
    assert abs(giou((0, 0, 1, 1), (2, 0, 3, 1)) - (-1 / 3)) <= 1e-12


def test_iou_accepts_box_objects():
    a = Box(0.5, 0.5, 0.2, 0.2)
    assert iou(a, a) == 1.0 and giou(a, Box.from_corners(0.0, 0.0, 0.1, 0.1)) < 0


@given(corner_boxes(), corner_boxes())
def test_giou_bounds_and_order(a, b):
    i, g = iou(a, b), giou(a, b)
    assert 0.0 <= i <= 1.0
    assert -1.0 <= g <= 1.0
    assert g <= i + 1e-15
    assert g == giou(b, a)


def test_giou_equals_iou_iff_hull_is_union():
    nested = ((0, 0, 4, 4), (1, 1, 2, 2))
    assert giou(*nested) == iou(*nested)
    apart = ((0, 0, 1, 1), (1.5, 0, 2.5, 1))
    assert giou(*apart) < iou(*apart)


def test_pairwise_matches_scalar(rng):
    a = cxcywh_to_xyxy(rng.uniform(0.2, 0.6, size=(4, 4)))
    b = cxcywh_to_xyxy(rng.uniform(0.2, 0.6, size=(3, 4)))
    pi, pg = pairwise_iou(a, b), pairwise_giou(a, b)
    for i in range(4):
        for j in range(3):
            assert pi[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-15)
            assert pg[i, j] == pytest.approx(giou(a[i], b[j]), abs=1e-15)


def test_box_conversions_roundtrip(rng):
    b = rng.uniform(0.1, 0.9, size=(5, 4))
    assert np.allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b, atol=1e-15)


def test_tensor_giou_matches_numpy_and_gradients(rng):
    pred = T.Tensor(rng.uniform(0.2, 0.4, size=(3, 4)), requires_grad=True)
    tgt = rng.uniform(0.2, 0.4, size=(3, 4))
    out = tensor_giou(tensor_cxcywh_to_xyxy(pred), cxcywh_to_xyxy(tgt)).data
    ref = np.diag(pairwise_giou(cxcywh_to_xyxy(pred.data), cxcywh_to_xyxy(tgt)))
    assert np.allclose(out, ref, atol=1e-14)
    report = T.check_gradients(lambda: tensor_giou(tensor_cxcywh_to_xyxy(pred), cxcywh_to_xyxy(tgt)).sum(), [pred])
    assert report.passed(1e-4)


def test_box_validation():
    with pytest.raises(ParameterError):
        Box(1.2, 0.5, 0.1, 0.1)
    with pytest.raises(ParameterError):
        Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ParameterError):
        SpatialTransform("crop", crop_region=(0.5, 0.0, 0.4, 1.0))
    with pytest.raises(ParameterError):
        SpatialTransform("rotate")


# -- box transforms -------------------------------------------------------------------------
def test_flip_example():
    out = transform_boxes(gt_set([0.3, 0.5, 0.2, 0.2]), SpatialTransform("flip_h"))
    assert np.allclose(out.array, [[0.7, 0.5, 0.2, 0.2]], atol=1e-15)


def test_identity_crop():
    g = gt_set([[0.3, 0.5, 0.2, 0.2], [0.6, 0.6, 0.5, 0.3]], [1, 2])
    out = transform_boxes(g, SpatialTransform("crop", crop_region=(0.0, 0.0, 1.0, 1.0)))
    assert np.array_equal(out.array, g.array) and np.array_equal(out.labels, g.labels)


def test_half_crop_example():
    box = xyxy_to_cxcywh(np.array([[0.25, 0.25, 0.75, 0.75]]))
    out, keep, frac = crop_boxes(box, (0.5, 0.0, 1.0, 1.0))
    assert keep[0] and frac[0] == pytest.approx(0.5, abs=1e-15)
    assert np.allclose(cxcywh_to_xyxy(out), [[0.0, 0.25, 0.5, 0.75]], atol=1e-15)


def test_crop_drops_mostly_hidden_boxes():
    g = gt_set([[0.1, 0.5, 0.1, 0.1], [0.55, 0.5, 0.2, 0.2]])
    out = transform_boxes(g, SpatialTransform("crop", crop_region=(0.5, 0.0, 1.0, 1.0)))
    # first box is outside, second keeps 75% of its area
    assert len(out) == 1


pixel_boxes = st.tuples(st.integers(0, 48), st.integers(0, 48), st.integers(2, 16), st.integers(2, 16)).map(
    lambda t: [(t[0] + t[2] / 2) / 64, (t[1] + t[3] / 2) / 64, t[2] / 64, t[3] / 64])


@given(st.lists(pixel_boxes, max_size=6))
def test_flip_is_exact_involution_on_pixel_grid(boxes):
    g = gt_set(np.array(boxes).reshape(-1, 4))
    flip = SpatialTransform("flip_h")
    twice = transform_boxes(transform_boxes(g, flip), flip)
    assert np.array_equal(twice.array, g.array)


@given(gt_sets)
def test_flip_involution_within_one_ulp(g):
    # 1 - (1 - x) can round for x < 0.5 when 1 - x is not representable
    flip = SpatialTransform("flip_h")
    twice = transform_boxes(transform_boxes(g, flip), flip)
    assert np.all(np.abs(twice.array - g.array) <= np.spacing(1.0))


@given(gt_sets, st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0.5, 1), st.floats(0.5, 1))
def test_cropped_boxes_stay_inside(g, x0, y0, sw, sh):
    region = (x0, y0, min(1.0, x0 + sw), min(1.0, y0 + sh))
    out = transform_boxes(g, SpatialTransform("crop", crop_region=region))
    c = cxcywh_to_xyxy(out.array)
    assert np.all(c >= -1e-12) and np.all(c <= 1 + 1e-12)


# -- image transforms ------------------------------------------------------------------------------
def test_image_flip_twice(rng):
    img = rng.normal(size=(3, 8, 10))
    flip = SpatialTransform("flip_h")
    assert np.array_equal(transform_image(transform_image(img, flip), flip), img)


def test_identity_crop_and_resize(rng):
    img = rng.normal(size=(3, 8, 10))
    steps = [SpatialTransform("crop", crop_region=(0, 0, 1, 1)), SpatialTransform("resize", resize_target=(8, 10))]
    assert np.max(np.abs(transform_image(img, steps) - img)) <= 1e-10


def test_downscale_constant():
    img = np.full((3, 16, 16), 0.375)
    out = resize_bilinear(img, (8, 8))
    assert out.shape == (3, 8, 8) and np.all(out == 0.375)


def test_image_and_box_transforms_agree():
    img = np.zeros((1, 32, 32))
    img[:, 8:16, 4:12] = 1.0
    g = gt_set([[8 / 32, 12 / 32, 8 / 32, 8 / 32]])
    steps = [SpatialTransform("flip_h"), SpatialTransform("crop", crop_region=(0.5, 0.0, 1.0, 1.0))]
    out = transform_image(img, steps)
    box = transform_boxes(g, steps).boxes[0]
    x0, y0, x1, y1 = (np.array(box.corners) * [16, 32, 16, 32]).round().astype(int)
    assert out[0, y0:y1, x0:x1].min() == 1.0 and out.sum() == 64.0


def test_empty_crop_rejected():
    with pytest.raises(ParameterError):
        transform_image(np.zeros((1, 4, 4)), SpatialTransform("crop", crop_region=(0.5, 0.5, 0.55, 0.55)))


# -- sampling ----------------------------------------------------------------------------------------
class ForcedCoins:
    """Generator stand-in whose coin draws are fixed; everything else is real."""

    def __init__(self, coin: float, seed: int = 0):
        self.coin = coin
        self._rng = np.random.default_rng(seed)

    def random(self):
        return self.coin

    def __getattr__(self, name):
        return getattr(self._rng, name)


def test_forced_heads():
    kinds = [s.kind for s in sample_transform(ForcedCoins(0.0))]
    assert kinds == ["flip_h", "crop", "resize"]


def test_forced_tails():
    kinds = [s.kind for s in sample_transform(ForcedCoins(0.999))]
    assert kinds == ["resize"]
    assert [s.kind for s in sample_transform(np.random.default_rng(0), RESIZE_ONLY)] == ["resize"]


def test_flip_frequency():
    rng = np.random.default_rng(0)
    flips = sum(sample_transform(rng)[0].kind == "flip_h" for _ in range(10_000))
    assert abs(flips / 10_000 - 0.5) <= 0.02


def test_resize_respects_menu_and_max_size():
    rng = np.random.default_rng(3)
    policy = TransformPolicy(flip_prob=0.0, crop_prob=0.0, resize_menu=(96,), max_size=80)
    target = sample_transform(rng, policy)[-1].resize_target
    assert max(target) == 80
    no_resize = sample_transform(rng, TransformPolicy(flip_prob=0.0, crop_prob=0.0, resize_menu=()))
    assert no_resize == []


def test_groundtruth_array_roundtrip():
    g = GroundTruthSet.from_arrays([[0.5, 0.5, 0.2, 0.3]], [2], image_id=9)
    assert g.image_id == 9 and g.labels.tolist() == [2] and len(GroundTruthSet()) == 0
