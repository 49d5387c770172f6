import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dssn.common import IGNORE, ValidationError
from dssn.evaluation import accumulate, evaluate, metrics_from_confusion, miou, new_confusion
from dssn.synthdata import SynthSpec, generate_dataset

from oracles import iou_sets


def random_instance(rng, c=4, h=8, w=8, ignore=0.1):
    gt = rng.integers(0, c, (h, w))
    gt[rng.random((h, w)) < ignore] = IGNORE
    return rng.integers(0, c, (h, w)), gt


def test_perfect_prediction_is_diagonal():
    gt = np.random.default_rng(0).integers(0, 3, (8, 8))
    cm = accumulate(new_confusion(3), gt, gt)
    assert np.array_equal(cm, np.diag(np.diag(cm))) and cm.sum() == 64


def test_all_ignore_leaves_matrix():
    cm = accumulate(new_confusion(3), np.zeros((4, 4)), np.full((4, 4), IGNORE))
    assert not cm.any()


def test_matches_pixel_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, gt = random_instance(rng)
        ref = np.zeros((4, 4), int)
        for p, g in zip(pred.ravel(), gt.ravel()):
            if g != IGNORE:
                ref[g, p] += 1
        assert np.array_equal(accumulate(new_confusion(4), pred, gt), ref)


def test_perfect_miou():
    gt = np.random.default_rng(2).integers(0, 4, (8, 8))
    iou, mean = miou(accumulate(new_confusion(4), gt, gt))
    assert mean == 1.0 and np.all(iou[~np.isnan(iou)] == 1.0)


def test_half_coverage_case():
    gt = np.zeros((4, 4), int)
    gt[:, 2:] = 1
    iou, mean = miou(accumulate(new_confusion(2), np.zeros((4, 4), int), gt))
    assert iou.tolist() == [0.5, 0.0] and mean == 0.25


def test_matches_set_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        pred, gt = random_instance(rng, c=c)
        iou, mean = miou(accumulate(new_confusion(c), pred, gt))
        ref = np.array(iou_sets(pred, gt, c))
        assert np.array_equal(np.isnan(iou), np.isnan(ref))
        ok = ~np.isnan(ref)
        assert np.abs(iou[ok] - ref[ok]).max() <= 1e-12
        assert abs(mean - ref[ok].mean()) <= 1e-12


def test_absent_classes_excluded():
    gt = np.zeros((2, 2), int)
    iou, mean = miou(accumulate(new_confusion(3), gt, gt))
    assert np.isnan(iou[1]) and np.isnan(iou[2]) and mean == 1.0
    assert metrics_from_confusion(accumulate(new_confusion(3), gt, gt)).per_class_iou == [1.0, None, None]


def test_empty_matrix_rejected():
    with pytest.raises(ValidationError):
        miou(new_confusion(2))


def test_out_of_range_rejected():
    with pytest.raises(ValidationError):
        accumulate(new_confusion(2), np.zeros((2, 2)), np.full((2, 2), 3))
    with pytest.raises(ValidationError):
        accumulate(new_confusion(2), np.full((2, 2), 2), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), data=st.data())
def test_order_and_label_permutation_invariance(seed, data):
    rng = np.random.default_rng(seed)
    pairs = [random_instance(rng) for _ in range(4)]
    order = data.draw(st.permutations(range(4)))
    cm_a, cm_b = new_confusion(4), new_confusion(4)
    for k in range(4):
        cm_a = accumulate(cm_a, *pairs[k])
        cm_b = accumulate(cm_b, *pairs[order[k]])
    assert np.array_equal(cm_a, cm_b)
    perm = np.array(data.draw(st.permutations(range(4))))
    relabel = lambda a: np.where(a == IGNORE, IGNORE, perm[np.minimum(a, 3)])
    cm_p = new_confusion(4)
    for p, g in pairs:
        cm_p = accumulate(cm_p, relabel(p), relabel(g))
    assert miou(cm_a)[1] == pytest.approx(miou(cm_p)[1], abs=1e-12)


class _Oracle(torch.nn.Module):
    """Returns one-hot logits of a fixed mask lookup, keyed by image content."""

    def __init__(self, table, num_classes):
        super().__init__()
        self.arch = type("A", (), {"stride": 1})()
        self.table = table
        self.c = num_classes
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        out = []
        for img in x:
            mask = self.table[img.numpy().tobytes()]
            out.append(torch.nn.functional.one_hot(torch.from_numpy(mask), self.c).permute(2, 0, 1).float())
        return torch.stack(out)


def test_evaluate_ground_truth_is_perfect(tmp_path):
    from dssn.synthdata import load_item

    index = generate_dataset(SynthSpec(image_size=(32, 32), num_images=5, seed=4), tmp_path)
    table = {}
    for i in index.ids:
        img, m = load_item(index, i)
        table[img[0].tobytes()] = m[0]
    m = evaluate(_Oracle(table, 4), index, batch_size=2)
    assert m.miou == 1.0 and m.pixel_acc == 1.0 and m.num_pixels == 5 * 32 * 32
    again = evaluate(_Oracle(table, 4), index, ids=list(reversed(index.ids)), batch_size=3)
    assert np.array_equal(again.confusion, m.confusion)
