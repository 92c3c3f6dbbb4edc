import numpy as np

from ipcodec.imageio import read_manifest
from ipcodec.toyfaces import generate_toyfaces, write_dataset


def test_deterministic():
    a = generate_toyfaces(3, 4, 2, 32, n_embedder_identities=2, embedder_images_per_identity=2)
    b = generate_toyfaces(3, 4, 2, 32, n_embedder_identities=2, embedder_images_per_identity=2)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.identities == b.identities and a.splits == b.splits
    c = generate_toyfaces(4, 4, 2, 32)
    assert c.images.tobytes() != a.images[:8].tobytes()


def test_counts_and_manifest(tmp_path):
    d = generate_toyfaces(0, 2, 3, 32)
    assert d.images.shape == (6, 3, 32, 32)
    assert set(d.splits) <= {"train", "test"} and len(set(d.identities)) == 2
    m = write_dataset(d, tmp_path)
    rows = read_manifest(m)
    assert len(rows) == 6
    # identities are split, not images
    by_id = {}
    for _, ident, split in rows:
        by_id.setdefault(ident, set()).add(split)
    assert all(len(s) == 1 for s in by_id.values())


def test_embedder_split_is_disjoint():
    d = generate_toyfaces(0, 4, 2, 32, n_embedder_identities=3, embedder_images_per_identity=5)
    ids = np.array(d.identities)
    sp = np.array(d.splits)
    assert (sp == "embedder").sum() == 15
    assert not set(ids[sp == "embedder"]) & set(ids[sp != "embedder"])


def test_pixel_range_and_background_varies():
    d = generate_toyfaces(1, 2, 2, 64)
    assert d.images.min() >= 0 and d.images.max() <= 1
    a, b = d.images[0], d.images[1]  # same identity, different nuisances
    assert not np.allclose(a[:, :4, :4], b[:, :4, :4])
