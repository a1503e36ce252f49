import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchforge.losses import LossWeights, classification_loss, similarity_loss, total_loss, tv_loss

patches = arrays(np.float64, (3, 5, 5), elements=st.floats(0, 1, allow_nan=False))


def tv_bruteforce(p: np.ndarray, eps: float) -> float:
    c, h, w = p.shape
    total = 0.0
    for k in range(c):
        for i in range(h):
            for j in range(w):
                dy = p[k, i + 1, j] - p[k, i, j] if i + 1 < h else 0.0
                dx = p[k, i, j + 1] - p[k, i, j] if j + 1 < w else 0.0
                total += math.sqrt(dy * dy + dx * dx + eps)
    return total


@pytest.mark.parametrize("probs,expected", [([1, 1, 1], 1.0), ([0, 0], 0.0), ([0.2, 0.4, 0.9], 0.5)])
def test_classification_loss_is_mean_probability(probs, expected):
    assert classification_loss(torch.tensor(probs, dtype=torch.float64)).item() == pytest.approx(expected)


def test_classification_loss_negated_sign():
    p = torch.tensor([0.2, 0.4, 0.9])
    assert classification_loss(p, "negated").item() == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        classification_loss(p, "other")
    with pytest.raises(ValueError):
        classification_loss(torch.tensor([]))


def test_similarity_fixed_points():
    n = torch.rand(3, 4, 4, dtype=torch.float64) + 0.1
    assert similarity_loss(n, n).item() == pytest.approx(-1.0)
    assert similarity_loss(-n, n).item() == pytest.approx(-1.0)
    a = torch.zeros(3, 4, 4)
    b = torch.zeros(3, 4, 4)
    a[:, :2] = 1.0
    b[:, 2:] = 1.0
    assert similarity_loss(a, b).item() == 0.0


def test_similarity_rejects_zero_norm_and_shape_mismatch():
    with pytest.raises(ValueError, match="undefined"):
        similarity_loss(torch.zeros(3, 2, 2), torch.ones(3, 2, 2))
    with pytest.raises(ValueError):
        similarity_loss(torch.ones(3, 2, 2), torch.ones(3, 3, 3))


def test_tv_hand_enumerated_2x2():
    p = torch.tensor([[0.0, 1.0], [0.0, 1.0]], dtype=torch.float64)
    assert tv_loss(p, eps=0.0).item() == pytest.approx(2.0)


def test_tv_constant_patch_is_sum_of_sqrt_eps():
    p = torch.full((3, 6, 6), 0.3, dtype=torch.float64)
    assert tv_loss(p, eps=1e-8).item() == pytest.approx(3 * 36 * 1e-4)


def test_tv_rejects_tiny_patch():
    with pytest.raises(ValueError):
        tv_loss(torch.zeros(3, 1, 5))


@settings(max_examples=30, deadline=None)
@given(patches)
def test_tv_matches_bruteforce(p):
    assert tv_loss(torch.from_numpy(p)).item() == pytest.approx(tv_bruteforce(p, 1e-8), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(patches, st.floats(0.01, 10))
def test_tv_nonnegative_and_homogeneous(p, c):
    t = torch.from_numpy(p)
    base = tv_loss(t, eps=0.0).item()
    assert base >= 0
    assert tv_loss(c * t, eps=0.0).item() == pytest.approx(c * base, rel=1e-9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(patches, st.floats(-1, 1))
def test_tv_shift_invariant(p, shift):
    t = torch.from_numpy(p)
    assert tv_loss(t + shift, eps=1e-12).item() == pytest.approx(tv_loss(t, eps=1e-12).item(), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(patches, patches)
def test_similarity_in_range(p, n):
    if np.linalg.norm(p) == 0 or np.linalg.norm(n) == 0:
        return
    v = similarity_loss(torch.from_numpy(p), torch.from_numpy(n)).item()
    assert -1.0 - 1e-12 <= v <= 0.0


def test_total_loss_arithmetic_oracle():
    out = total_loss(torch.tensor(0.5), torch.tensor(-1.0), torch.tensor(2.0))
    assert out.l_total.item() == pytest.approx(-2.5)
    assert total_loss(0.5, -1.0, 2.0, LossWeights(0, 0)).l_total == pytest.approx(0.5)


@pytest.mark.parametrize("bad", ["l_class", "l_sim", "l_tv"])
def test_total_loss_names_nonfinite_term(bad):
    terms = {"l_class": 0.1, "l_sim": -0.2, "l_tv": 1.0}
    terms[bad] = float("nan")
    with pytest.raises(ValueError, match=bad):
        total_loss(**terms)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(beta=-1)


def test_breakdown_to_dict_is_plain_floats():
    d = total_loss(torch.tensor(0.5), torch.tensor(-1.0), torch.tensor(2.0)).to_dict()
    assert d == {"l_class": 0.5, "l_sim": -1.0, "l_tv": 2.0, "l_total": -2.5, "beta": 4.0, "gamma": 0.5}
