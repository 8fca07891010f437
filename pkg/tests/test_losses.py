import itertools
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mdtrans.losses import (EPS, LossRecord, LossWeights, adv_loss_d, adv_loss_g, identity_loss,
                            reconstruction_loss, total_generator_loss)
from mdtrans.model import DiscriminatorOutput, InputError


def const_out(p, size=6, dtype=torch.float64):
    return DiscriminatorOutput(torch.full((1, size, size), p, dtype=dtype), torch.tensor(p, dtype=dtype))


def brute_mean_abs(a, b):
    total, count = 0.0, 0
    for idx in itertools.product(*(range(s) for s in a.shape)):
        total += abs(float(a[idx]) - float(b[idx]))
        count += 1
    return total / count


# -- adversarial ------------------------------------------------------------

def test_adv_d_perfect_discriminator():
    loss = adv_loss_d(const_out(1 - EPS), [const_out(EPS), const_out(EPS)])
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_adv_d_max_uncertainty():
    loss = adv_loss_d(const_out(0.5), [const_out(0.5)])
    assert float(loss) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_adv_d_arithmetic():
    expected = -math.log(0.9) - math.log(1 - 0.1)
    assert float(adv_loss_d(const_out(0.9), [const_out(0.1)])) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.2107, abs=1e-4)


@pytest.mark.parametrize("size", [1, 3, 30])
@pytest.mark.parametrize("n_fakes", [1, 3])
def test_adv_d_fixed_point_independent_of_patch_size(size, n_fakes):
    loss = adv_loss_d(const_out(0.5, size), [const_out(0.5, size)] * n_fakes)
    assert float(loss) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_adv_d_heads_weighted_equally():
    out = DiscriminatorOutput(torch.full((1, 4, 4), 0.9, dtype=torch.float64), torch.tensor(0.6, dtype=torch.float64))
    fake = const_out(0.5)
    expected = 0.5 * -math.log(0.9) + 0.5 * -math.log(0.6) + math.log(2)
    assert float(adv_loss_d(out, [fake])) == pytest.approx(expected, abs=1e-12)


def test_adv_g_values():
    assert float(adv_loss_g([const_out(1 - EPS)])) == pytest.approx(0.0, abs=1e-6)
    assert float(adv_loss_g([const_out(0.5)])) == pytest.approx(math.log(2), abs=1e-12)
    assert float(adv_loss_g([const_out(0.25)])) == pytest.approx(-math.log(0.25), abs=1e-12)
    assert float(adv_loss_g([const_out(0.5), const_out(0.25)])) == pytest.approx(
        (math.log(2) - math.log(0.25)) / 2, abs=1e-12)


def test_saturation_is_clamped():
    loss = adv_loss_d(const_out(0.0), [const_out(1.0)])
    assert math.isfinite(float(loss))
    assert float(loss) == pytest.approx(-2 * math.log(EPS), rel=1e-6)
    assert math.isfinite(float(adv_loss_g([const_out(0.0)])))


# -- reconstruction / identity ---------------------------------------------

def test_reconstruction_exact_cycle():
    x = torch.rand(3, 4, 4)
    assert float(reconstruction_loss(x, [x.clone(), x.clone()])) == 0.0


def test_reconstruction_constant_offset():
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    assert float(reconstruction_loss(x, [x + 0.5, x + 0.5])) == pytest.approx(1.0, abs=1e-12)


def test_reconstruction_matches_brute_force():
    g = torch.Generator().manual_seed(3)
    x = torch.rand(2, 2, 2, generator=g, dtype=torch.float64) * 2 - 1
    recs = [torch.rand(2, 2, 2, generator=g, dtype=torch.float64) * 2 - 1 for _ in range(2)]
    expected = sum(brute_mean_abs(r, x) for r in recs)
    assert float(reconstruction_loss(x, recs)) == pytest.approx(expected, abs=1e-12)


def test_identity_values():
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    assert float(identity_loss(x, x)) == 0.0
    assert float(identity_loss(x, x + 0.25)) == pytest.approx(0.25, abs=1e-12)
    g = torch.Generator().manual_seed(5)
    y = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    z = torch.rand(3, 5, 5, generator=g, dtype=torch.float64)
    assert float(identity_loss(y, z)) == pytest.approx(brute_mean_abs(y, z), abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(InputError):
        identity_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(InputError):
        reconstruction_loss(torch.zeros(3, 4, 4), [torch.zeros(3, 4, 4), torch.zeros(3, 2, 2)])


arrays = st.lists(st.floats(-1, 1, allow_nan=False), min_size=8, max_size=8)


@settings(max_examples=50, deadline=None)
@given(arrays, arrays, arrays)
def test_l1_nonnegative_and_symmetric(a, b, c):
    x = torch.tensor(a, dtype=torch.float64).reshape(2, 2, 2)
    r1 = torch.tensor(b, dtype=torch.float64).reshape(2, 2, 2)
    r2 = torch.tensor(c, dtype=torch.float64).reshape(2, 2, 2)
    loss = reconstruction_loss(x, [r1, r2])
    assert float(loss) >= 0
    # swap x and the first recovery inside that term only
    swapped = reconstruction_loss(r1, [x]) + reconstruction_loss(x, [r2])
    assert float(loss) == pytest.approx(float(swapped), abs=1e-12)
    assert (float(identity_loss(x, r1)) == 0) == bool(torch.equal(x, r1))


# -- total ------------------------------------------------------------------

def test_total_examples():
    w = LossWeights()
    assert w.lambda_rec == 10 and w.lambda_idt == 10
    assert total_generator_loss(1.0, 0.2, 0.1, w) == pytest.approx(4.0, abs=1e-12)
    assert total_generator_loss(1.3, 0.2, 0.1, LossWeights(0, 0)) == 1.3
    assert total_generator_loss(0.0, 0.0, 0.0, w) == 0.0


finite = st.floats(-1e3, 1e3, allow_nan=False)
nonneg = st.floats(0, 1e3, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(finite, nonneg, nonneg, nonneg, nonneg)
def test_affine_weight_law(a, r, i, lr, li):
    w = LossWeights(lr, li)
    diff = total_generator_loss(a, r, i, w) - total_generator_loss(a, r, i, LossWeights(0, 0))
    assert diff == pytest.approx(lr * r + li * i, rel=1e-12, abs=1e-9)


def test_total_gradient_by_finite_differences():
    w = LossWeights(10, 10)
    a, r, i = (torch.tensor(v, dtype=torch.float64, requires_grad=True) for v in (0.7, 0.3, 0.2))
    total_generator_loss(a, r, i, w).backward()
    h = 1e-6
    base = (0.7, 0.3, 0.2)
    for k, t in enumerate((a, r, i)):
        up, dn = list(base), list(base)
        up[k] += h
        dn[k] -= h
        fd = (total_generator_loss(*up, w) - total_generator_loss(*dn, w)) / (2 * h)
        assert float(t.grad) == pytest.approx(fd, rel=1e-6)
    assert (float(a.grad), float(r.grad), float(i.grad)) == (1.0, 10.0, 10.0)


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-1, 0)


def test_loss_record_invariant_and_json():
    rec = LossRecord.from_terms([1.2, 1.1, 1.3], [0.7, 0.8, 0.9], [0.2, 0.3, 0.1], [0.05, 0.02, 0.01],
                                LossWeights(), iter=4, epoch=1)
    assert rec.total_g == math.fsum([0.7, 0.8, 0.9]) + 10 * math.fsum([0.2, 0.3, 0.1]) + 10 * math.fsum([0.05, 0.02, 0.01])
    d = rec.to_json_dict()
    assert set(d) == {"iter", "epoch", "total_g"} | {f"{k}.{i}" for k in ("adv_d", "adv_g", "rec", "idt") for i in range(3)}
    assert LossRecord.from_json_dict(d) == rec
    assert rec.is_finite()
