import numpy as np
import pytest

from owtta.backbone import BackboneConfig
from owtta.stream import StreamConfig, build_source_model, gen_stream, prototypes, shift_rotation

B = BackboneConfig(layers=2, dim=16, heads=2, patches=8, classes=4, seed=1)


def cfg(**kw):
    base = dict(id_classes=4, batches=3, batch_size=32, seed=5)
    base.update(kw)
    return StreamConfig(**base)


def test_no_ood_when_ratio_zero():
    assert not any(b.is_ood.any() for b in gen_stream(cfg(ood_ratio=0.0), B))


def test_stream_is_deterministic():
    a, b = gen_stream(cfg(), B), gen_stream(cfg(), B)
    for x, y in zip(a, b):
        assert np.array_equal(x.tokens, y.tokens) and np.array_equal(x.labels, y.labels)
        assert np.array_equal(x.is_ood, y.is_ood)


def test_fixed_ood_count_per_batch():
    for b in gen_stream(cfg(ood_ratio=0.25), B):
        assert b.is_ood.sum() == 8 and len(b) == 32


def test_labels_partition_id_and_ood():
    for b in gen_stream(cfg(), B):
        assert np.all(b.labels[~b.is_ood] < 4) and np.all(b.labels[b.is_ood] >= 4)


def test_prototypes_share_radius():
    P = prototypes(cfg(), B)
    r = np.sqrt((P**2).sum(axis=(1, 2)))
    assert np.allclose(r, r[0])


def test_shift_is_a_rotation():
    R = shift_rotation(cfg(shift_strength=0.7), B.dim)
    assert np.allclose(R @ R.T, np.eye(B.dim), atol=1e-12)
    assert np.allclose(shift_rotation(cfg(shift_strength=0.0), B.dim), np.eye(B.dim))


def test_invalid_configs():
    with pytest.raises(ValueError):
        StreamConfig(ood_ratio=1.0)
    with pytest.raises(ValueError):
        StreamConfig(ood_classes=0, ood_ratio=0.1)
    with pytest.raises(ValueError):
        StreamConfig(batches=0)
    with pytest.raises(ValueError):
        StreamConfig(shift_strength=-1)
    with pytest.raises(ValueError):
        gen_stream(cfg(id_classes=5), B)


def test_source_head_beats_chance_on_clean_data():
    from owtta.backbone import forward_collect
    from owtta.stream import source_samples

    scfg = cfg()
    state = build_source_model(B, scfg)
    x, y = source_samples(scfg, B)
    _, logits = forward_collect(state, x)
    assert np.mean(logits.data.argmax(-1) == y) > 0.5  # chance is 0.25
