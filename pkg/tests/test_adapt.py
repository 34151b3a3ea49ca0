import copy

import numpy as np
import pytest

from owtta.adapt import (
    AdaptConfig,
    LearningRates,
    SGD,
    adapt_batch,
    evaluate,
    predict,
    run_stream,
    sam_perturbation,
    second_loss,
)
from owtta.backbone import BackboneConfig, forward_collect
from owtta.losses import LossWeights
from owtta.stream import StreamConfig, build_source_model, gen_stream
from owtta.tensor import Tape

B = BackboneConfig(layers=2, dim=16, heads=2, patches=8, classes=4, seed=2)
S = StreamConfig(id_classes=4, batches=6, batch_size=16, seed=9)
LR = LearningRates(norm=0.01, aan=0.01, psi=0.05, ladder=0.01)


@pytest.fixture(scope="module")
def source():
    return build_source_model(B, S)


@pytest.fixture(scope="module")
def stream():
    return gen_stream(S, B)


def snapshot(state):
    return {g: [p.data.copy() for p in state.group(g)] for g in state.GROUP_ORDER}


def same(a, b):
    return all(np.array_equal(x, y) for g in a for x, y in zip(a[g], b[g]))


def test_perturbation_examples():
    eps, deg = sam_perturbation(np.array([3.0, 4.0]), 1.0)
    assert np.allclose(eps, [0.6, 0.8]) and not deg
    eps, deg = sam_perturbation(np.zeros(3), 0.05)
    assert np.array_equal(eps, np.zeros(3)) and deg


def test_perturbation_norm_is_rho():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = rng.normal(size=20) * 10 ** rng.uniform(-6, 6)
        assert abs(np.linalg.norm(sam_perturbation(g, 0.05)[0]) - 0.05) < 1e-9


def test_recorded_eps_norm_equals_rho(source, stream):
    state = source.copy()
    cfg = AdaptConfig(lr=LR)
    for r in run_stream(state, stream, cfg):
        if not r.degenerate:
            assert abs(r.eps_norm - cfg.rho) < 1e-9


def test_zero_lr_leaves_parameters_bitwise(source, stream):
    state = source.copy()
    before = snapshot(state)
    cfg = AdaptConfig(lr=LearningRates().zero())
    reports = run_stream(state, stream, cfg)
    assert same(before, snapshot(state))
    frozen = run_stream(source.copy(), stream, cfg, adapt=False)
    for a, b in zip(reports, frozen):
        assert np.array_equal(a.preds, b.preds) and np.array_equal(a.scores, b.scores)


def test_restoration_is_bitwise(source, stream, monkeypatch):
    """Parameters after the virtual ascent equal the stored copy exactly."""
    state = source.copy()
    cfg = AdaptConfig(lr=LR)
    seen = []

    real_step = SGD.step

    def spy(self, groups, grads):
        seen.append({g: [p.data.copy() for p in ps] for g, ps in groups.items()})
        return real_step(self, groups, grads)

    monkeypatch.setattr(SGD, "step", spy)
    before = {g: [p.data.copy() for p in state.group(g)] for g in cfg.active_groups()}
    adapt_batch(state, stream[0], cfg)
    assert all(np.array_equal(x, y) for g in before for x, y in zip(before[g], seen[0][g]))


def test_rho_zero_equals_single_pass_on_second_loss(source, stream):
    w = LossWeights(lambda1=0.5, lambda2=0.5)
    sam = AdaptConfig(lr=LR, weights=w, rho=0.0)
    a = source.copy()
    adapt_batch(a, stream[0], sam)

    b = source.copy()
    groups = {g: b.group(g) for g in sam.active_groups()}
    for ps in b.trainable_groups().values():
        for p in ps:
            p.zero_grad()
    with Tape() as tape:
        tape.backward(second_loss(evaluate(b, stream[0].tokens, sam), sam))
    for g, ps in groups.items():
        lr = getattr(LR, g)
        for p in ps:
            p.data = p.data - lr * p.grad
    for g in groups:
        for x, y in zip(a.group(g), b.group(g)):
            assert np.max(np.abs(x.data - y.data)) <= 1e-12


def test_rho_zero_equals_single_objective_mode(source, stream):
    """With lambda1 = lambda2 = beta1 and no similarity weight the two modes coincide."""
    w = LossWeights(lambda1=0.5, lambda2=0.5, beta1=0.5, beta2=0.0)
    a, b = source.copy(), source.copy()
    adapt_batch(a, stream[1], AdaptConfig(lr=LR, weights=w, rho=0.0, use_aan=False))
    adapt_batch(b, stream[1], AdaptConfig(lr=LR, weights=w, objective="single", use_aan=False))
    for g in ("norm", "psi", "ladder"):
        for x, y in zip(a.group(g), b.group(g)):
            assert np.max(np.abs(x.data - y.data)) <= 1e-12


def test_frozen_groups_never_change(source, stream):
    state = source.copy()
    ck = state.checksum()
    run_stream(state, stream, AdaptConfig(lr=LR))
    assert state.checksum() == ck
    assert state.checksum(("norm",)) != source.checksum(("norm",))


def test_causality(source, stream):
    cfg = AdaptConfig(lr=LR)
    base = run_stream(source.copy(), stream, cfg)
    t = 2
    mutated = [copy.deepcopy(b) for b in stream]
    mutated[t + 1].tokens = mutated[t + 1].tokens[::-1] * 3.0 + 1.0
    other = run_stream(source.copy(), mutated, cfg)
    for a, b in zip(base[: t + 1], other[: t + 1]):
        assert np.array_equal(a.p_final, b.p_final) and np.array_equal(a.preds, b.preds)
        assert a.losses == pytest.approx(b.losses, nan_ok=True) and a.eps_norm == b.eps_norm
    assert not np.array_equal(base[t + 1].p_final, other[t + 1].p_final)


def test_runs_are_bitwise_deterministic(source, stream):
    cfg = AdaptConfig(lr=LR)
    a = run_stream(source.copy(), stream, cfg)
    b = run_stream(source.copy(), stream, cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.p_final, y.p_final) and np.array_equal(x.scores, y.scores)
        assert repr(x.losses) == repr(y.losses) and x.update_norms == y.update_norms


def test_stream_lengths(source, stream):
    cfg = AdaptConfig(lr=LR)
    assert run_stream(source.copy(), [], cfg) == []
    assert len(run_stream(source.copy(), stream[:1], cfg)) == 1
    assert len(run_stream(source.copy(), stream, cfg)) == len(stream)


def test_report_fields(source, stream):
    r = adapt_batch(source.copy(), stream[0], AdaptConfig(lr=LR))
    n = len(stream[0])
    assert r.p_final.shape == (n, B.classes) and r.scores.shape == (n,) and len(r) == n
    assert set(r.losses) == {"entropy", "ood", "sim", "first", "second"}
    assert set(r.update_norms) == {"norm", "aan", "psi", "ladder"}
    assert np.allclose(r.p_final.sum(-1), 1.0)
    assert np.array_equal(r.preds, r.p_final.argmax(-1))


def test_non_finite_loss_skips_update(source, stream):
    state = source.copy()
    bad = copy.deepcopy(stream[0])
    bad.tokens[0, 0, 0] = np.nan
    before = snapshot(state)
    r = adapt_batch(state, bad, AdaptConfig(lr=LR))
    assert r.skipped and same(before, snapshot(state))


def test_disabled_groups_stay_put(source, stream):
    state = source.copy()
    cfg = AdaptConfig(lr=LR, adapt_norm=False, use_aan=False)
    run_stream(state, stream[:2], cfg)
    for g in ("norm", "aan"):
        for x, y in zip(state.group(g), source.group(g)):
            assert np.array_equal(x.data, y.data)


def test_predict_after_update_uses_new_parameters(source, stream):
    cfg = AdaptConfig(lr=LR, predict_after_update=True)
    state = source.copy()
    r = adapt_batch(state, stream[0], cfg)
    assert np.array_equal(r.p_final, predict(state, stream[0], cfg).p_final)


def test_momentum_and_weight_decay_change_the_update(source, stream):
    plain, mom = source.copy(), source.copy()
    run_stream(plain, stream[:3], AdaptConfig(lr=LR))
    run_stream(mom, stream[:3], AdaptConfig(lr=LR, momentum=0.9, weight_decay=1e-3))
    assert plain.checksum(("norm",)) != mom.checksum(("norm",))


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(objective="adam")
    with pytest.raises(ValueError):
        AdaptConfig(rho=-1)
    with pytest.raises(ValueError):
        LearningRates(norm=-0.1)


def test_init_predictions_match_frozen_backbone(source, stream):
    r = predict(source, stream[0], AdaptConfig())
    _, logits = forward_collect(source, stream[0])
    z = logits.data - logits.data.max(-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    assert np.max(np.abs(r.p_final - p)) < 1e-12
