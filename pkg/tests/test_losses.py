import numpy as np
import pytest
import torch

from ipcodec.losses import (LossWeights, loss_id, loss_rate, loss_rec, loss_total, msssim, msssim_weights,
                            parse_kind, window_for)

from msssim_oracle import msssim_oracle


def test_l2_examples():
    x = torch.rand(2, 3, 8, 8)
    assert loss_rec(x, x, "l2").item() == 0
    assert loss_rec(torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4), "l2").item() == 1.0


def test_msssim_identical_is_one_and_loss_zero():
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    assert torch.allclose(msssim(x, x), torch.ones(2, dtype=torch.float64), atol=1e-12)
    assert abs(loss_rec(x, x, "ms-ssim").item()) < 1e-12


def test_msssim_matches_oracle_on_noise_pairs():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.random((3, 64, 64))
        y = np.clip(x + rng.normal(0, rng.uniform(0.05, 0.5), x.shape), 0, 1) if rng.random() < 0.7 else rng.random((3, 64, 64))
        got = msssim(torch.from_numpy(x)[None], torch.from_numpy(y)[None]).item()
        assert abs(got - msssim_oracle(x, y)) <= 1e-6
    a, b = rng.random((3, 64, 64)), rng.random((3, 64, 64))
    v = 1 - loss_rec(torch.from_numpy(a)[None], torch.from_numpy(b)[None], "ms-ssim").item()
    assert 0 < v < 1


def test_msssim_weights_and_window():
    w = msssim_weights(3)
    assert abs(sum(w) - 1) < 1e-12 and len(w) == 3
    assert window_for(16) == (11, 1.5)
    size, sigma = window_for(8)
    assert size == 7 and sigma == pytest.approx(1.5 * 7 / 11)


def test_msssim_small_images_and_limit():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    assert abs(msssim(x, x).item() - 1) < 1e-12
    with pytest.raises(ValueError, match="sides"):
        msssim(torch.rand(1, 3, 12, 12), torch.rand(1, 3, 12, 12))


def test_rate_examples():
    assert loss_rate(torch.full((1, 100), 1 / 256)).item() == pytest.approx(800.0)
    assert loss_rate(torch.full((1, 2), 0.5)).item() == pytest.approx(2.0)
    assert loss_rate(torch.ones(3, 5), torch.ones(3, 2)).item() == 0.0
    # batch mean of per-image totals
    p = torch.tensor([[0.5, 0.5], [0.25, 1.0]])
    assert loss_rate(p).item() == pytest.approx(2.0)


def test_id_examples():
    e = torch.tensor([[1.0, 0.0], [0.3, 0.4]])
    assert loss_id(e, e).item() == pytest.approx(0.0, abs=1e-7)
    assert loss_id(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])).item() == pytest.approx(1.0)
    assert loss_id(e, -e).item() == pytest.approx(2.0)
    with pytest.raises(ValueError, match="zero-norm"):
        loss_id(torch.zeros(1, 2), torch.ones(1, 2))


def test_id_scale_invariance():
    g = torch.Generator().manual_seed(0)
    e, eh = torch.randn(4, 8, generator=g, dtype=torch.float64), torch.randn(4, 8, generator=g, dtype=torch.float64)
    assert loss_id(3.7 * e, 0.02 * eh).item() == pytest.approx(loss_id(e, eh).item(), abs=1e-12)


def test_total_examples():
    rec, rate, idl = torch.tensor(0.5), torch.tensor(2.0), torch.tensor(0.3)
    bd = loss_total(rec, rate, idl, LossWeights(0.1, 1.0, "l2"))
    assert bd.total.item() == pytest.approx(1.0)
    assert loss_total(rec, rate, None, LossWeights(0.0, 0.0, "l2")).total.item() == 0.5
    ip = loss_total(rec, rate, idl, LossWeights(0.1, 1.0, "none"))
    assert ip.total.item() == pytest.approx(0.1 * 2.0 + 0.3)
    assert ip.rec.item() == 0.0


def test_total_recomputable_from_parts():
    w = LossWeights(0.37, 1.0, "ms-ssim")
    bd = loss_total(torch.tensor(0.12), torch.tensor(55.0), torch.tensor(0.4), w)
    assert abs(bd.total.item() - (bd.rec.item() + w.lambda_rate * bd.rate.item() + w.lambda_id * bd.id.item())) < 1e-6


def test_lambda_id_zero_bitwise_equals_rec_path():
    rec, rate = torch.tensor(0.123456), torch.tensor(987.654)
    a = loss_total(rec, rate, None, LossWeights(0.01, 0.0, "l2")).total
    b = loss_total(rec, rate, torch.tensor(0.7), LossWeights(0.01, 0.0, "l2")).total
    assert torch.equal(a, rec + 0.01 * rate) and torch.equal(a, b)


def test_weights_validation():
    with pytest.raises(ValueError, match="degenerate"):
        LossWeights(0.01, 0.0, "none")
    with pytest.raises(ValueError):
        LossWeights(-1.0)
    with pytest.raises(ValueError):
        parse_kind("ssim")
    assert parse_kind("MS_SSIM") == "ms-ssim"
    with pytest.raises(ValueError, match="no identity loss"):
        loss_total(torch.tensor(0.0), torch.tensor(1.0), None, LossWeights(0.01, 1.0, "l2"))


def test_row_format():
    bd = loss_total(torch.tensor(0.5, requires_grad=True), torch.tensor(2.0), None, LossWeights(0.1))
    assert bd.row(7) == [7, 0.5, 2.0, 0.0, pytest.approx(0.7)]


def test_loss_gradients(f64):
    from ipcodec.gradcheck import _id_case, _l2_case, _msssim_case, check_case
    assert check_case(_l2_case, 10) < 1e-4
    assert check_case(_msssim_case, 10, probes=24) < 1e-4
    assert check_case(_id_case, 10, probes=24) < 1e-4
