import numpy as np
import pytest
import torch

from ipcodec.embedder import (AlignerConfig, IdentityOverlapError, align, load_embedder, make_embedder,
                              save_embedder)
from ipcodec.losses import loss_id
from ipcodec.tensor import ShapeError


def test_exact_fit_crop_is_plain_crop():
    x = torch.rand(1, 3, 64, 64)
    out = align(x, AlignerConfig(0.5, 32))
    assert torch.allclose(out, x[:, :, 16:48, 16:48], atol=1e-6)


def test_identity_when_full_frame():
    x = torch.rand(2, 3, 40, 40)
    cfg = AlignerConfig(1.0, 40)
    assert torch.allclose(align(x, cfg), x, atol=1e-6)
    assert torch.allclose(align(align(x, cfg), cfg), align(x, cfg), atol=1e-6)


def test_locality_of_gradient():
    x = torch.rand(1, 3, 64, 64, requires_grad=True)
    align(x, AlignerConfig(0.7, 32)).sum().backward()
    top, left, size = AlignerConfig(0.7, 32).window(64, 64)
    mask = torch.zeros(64, 64, dtype=torch.bool)
    mask[top:top + size, left:left + size] = True
    assert torch.all(x.grad[0][:, ~mask] == 0)
    assert torch.any(x.grad[0][:, mask] != 0)


def test_aligner_config_errors():
    for f in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            AlignerConfig(f, 32)


def test_seeded_random_determinism_and_seed_dependence():
    a, b, c = make_embedder("seeded-random", 3), make_embedder("seeded-random", 3), make_embedder("seeded-random", 4)
    assert a.digest() == b.digest() != c.digest()
    for k, v in a.tensors().items():
        assert torch.equal(v, b.tensors()[k])


def test_embed_shape_and_identical_inputs():
    emb = make_embedder("seeded-random", 0)
    x = torch.rand(2, 3, 64, 64)
    e1, e2 = emb(x), emb(x.clone())
    assert e1.shape == (2, 64)
    assert torch.equal(e1, e2)
    assert loss_id(e1, e2).item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ShapeError):
        emb.embed(torch.rand(1, 3, 16, 16))


def test_parameters_are_frozen():
    emb = make_embedder("seeded-random", 0)
    assert emb.frozen
    assert all(not t.requires_grad for t in emb.tensors().values())
    x = torch.rand(1, 3, 64, 64, requires_grad=True)
    emb(x).sum().backward()
    assert x.grad is not None
    assert all(t.grad is None for t in emb.tensors().values())


def test_save_load_roundtrip(tmp_path):
    emb = make_embedder("seeded-random", 11, aligner=AlignerConfig(0.6, 24))
    p = tmp_path / "e.ipem"
    save_embedder(emb, p)
    back = load_embedder(p)
    assert back.digest() == emb.digest()
    assert back.aligner == emb.aligner and back.seed == 11 and back.provenance == "seeded-random"
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_embedder(tmp_path / "bad")


def test_overlap_guard():
    imgs = np.random.default_rng(0).random((4, 3, 32, 32), dtype=np.float32)
    with pytest.raises(IdentityOverlapError):
        make_embedder("pretrained", 0, imgs, ["a", "a", "b", "b"], exclude_identities=["b", "c"])
    with pytest.raises(ValueError):
        make_embedder("pretrained", 0)
    with pytest.raises(ValueError):
        make_embedder("imagenet", 0)


@pytest.mark.slow
def test_pretrained_separates_identities():
    from ipcodec.evaluation import cosine_distances
    from ipcodec.toyfaces import generate_toyfaces
    data = generate_toyfaces(5, 20, 30, 64)
    emb, acc = make_embedder("pretrained", 0, data.images, data.identities, return_accuracy=True)
    assert acc >= 0.9
    held = generate_toyfaces(5, 20, 34, 64)
    idx = np.array([k * 34 + j for k in range(20) for j in range(30, 34)])  # images unseen in pretraining
    X, y = held.images[idx], np.asarray(held.identities)[idx]
    with torch.no_grad():
        D = cosine_distances(emb(torch.from_numpy(X)).numpy(), emb(torch.from_numpy(X)).numpy())
    same = (y[:, None] == y[None, :]) & ~np.eye(len(y), dtype=bool)
    diff = y[:, None] != y[None, :]
    assert D[same].mean() < D[diff].mean()
