import numpy as np
import pytest

from valr import numerics as nx
from valr.alignment import (ProjectionHead, batch_alignment_loss, repa_loss_multi, repa_loss_single,
                            segment_alignment_loss, upsample_grid, upsample_index)
from valr.data.plans import AlignmentTarget
from valr.errors import ConfigError, DimensionError, EmptyLossError
from valr.numerics import Tape, Tensor


def test_upsample_k4_p16():
    x = Tensor(np.arange(8.0).reshape(4, 2))
    up = upsample_grid(x, 16).data
    assert up.shape == (16, 2)
    np.testing.assert_array_equal(up[0], x.data[0])
    grid = up[:, 0].reshape(4, 4)
    np.testing.assert_array_equal(grid, [[0, 0, 2, 2], [0, 0, 2, 2], [4, 4, 6, 6], [4, 4, 6, 6]])


def test_upsample_identity_and_counts():
    x = Tensor(np.random.default_rng(0).normal(size=(16, 3)))
    assert upsample_grid(x, 16).data.tobytes() == x.data.tobytes()
    idx = upsample_index(16, 64)
    assert np.bincount(idx).tolist() == [4] * 16
    up = upsample_grid(x, 64).data
    rows, counts = np.unique(up, axis=0, return_counts=True)
    assert len(rows) == 16 and (counts == 4).all()


def test_upsample_errors():
    with pytest.raises(DimensionError):
        upsample_index(7, 16)
    with pytest.raises(DimensionError):
        upsample_index(16, 12)
    with pytest.raises(DimensionError):
        upsample_index(16, 4)


def test_identity_head_self_similarity():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(16, 6))
    head = ProjectionHead.identity("a", 6)
    assert abs(repa_loss_single(Tensor(f), head, f).item() + 1.0) < 1e-12


def test_orthogonal_targets():
    head = ProjectionHead.identity("a", 4)
    x = np.zeros((4, 4))
    x[:, 0] = 1.0
    t = np.zeros((4, 4))
    t[:, 1] = 2.0
    assert abs(repa_loss_single(Tensor(x), head, t).item()) < 1e-12


def test_single_loss_gradcheck():
    rng = np.random.default_rng(2)
    head = ProjectionHead("a", 5, 3, seed=1)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    t = rng.normal(size=(16, 3))
    with Tape() as tape:
        loss = repa_loss_single(x, head, t)
    tape.backward(loss)
    assert -1 <= loss.item() <= 1
    for idx in [(0, 0), (2, 3), (3, 4)]:
        num = nx.numerical_grad(lambda: repa_loss_single(x, head, t).item(), x.data, idx)
        assert nx.rel_error(x.grad[idx], num) < 1e-5
    w = head.params["w1"]
    num = nx.numerical_grad(lambda: repa_loss_single(x, head, t).item(), w.data, (1, 2))
    assert nx.rel_error(w.grad[1, 2], num) < 1e-5


def test_scale_invariance_of_targets():
    rng = np.random.default_rng(3)
    head = ProjectionHead("a", 5, 3, seed=2)
    t = rng.normal(size=(16, 3))
    grads = []
    for c in (1.0, 7.5):
        x = Tensor(rng.normal(size=(4, 5)) if not grads else grads[0][2], requires_grad=True)
        with Tape() as tape:
            loss = repa_loss_single(x, head, c * t)
        tape.backward(loss)
        grads.append((loss.item(), x.grad.copy(), x.data))
    assert abs(grads[0][0] - grads[1][0]) < 1e-10
    assert np.abs(grads[0][1] - grads[1][1]).max() < 1e-10


def test_multi_is_mean_of_singles():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 6)))
    heads = [ProjectionHead("a", 6, 5, seed=0), ProjectionHead("b", 6, 2, seed=0), ProjectionHead("c", 6, 7, seed=0)]
    targets = {"a": rng.normal(size=(16, 5)), "b": rng.normal(size=(4, 2)), "c": rng.normal(size=(64, 7))}
    singles = [repa_loss_single(x, h, targets[h.encoder_name]).item() for h in heads]
    for m in (1, 2, 3):
        sub = {h.encoder_name: targets[h.encoder_name] for h in heads[:m]}
        got = repa_loss_multi(x, heads[:m], sub).item()
        assert abs(got - sum(singles[:m]) / m) < 1e-12
    assert repa_loss_multi(x, heads[:1], {"a": targets["a"]}).item() == singles[0]
    with pytest.raises(ConfigError):
        repa_loss_multi(x, heads[:2], {"b": targets["b"], "a": targets["a"]})


def test_multi_identity_heads():
    f = np.random.default_rng(5).normal(size=(9, 4))
    heads = [ProjectionHead.identity(n, 4) for n in "abc"]
    assert abs(repa_loss_multi(Tensor(f), heads, {n: f for n in "abc"}).item() + 1.0) < 1e-12


class _Plan:
    def __init__(self, segments, sample_id="p"):
        self.segments, self.sample_id = segments, sample_id


def test_batch_loss_matches_hand_unrolled():
    rng = np.random.default_rng(6)
    heads = [ProjectionHead("a", 5, 3, seed=3), ProjectionHead("b", 5, 2, seed=4)]
    tapped = [Tensor(rng.normal(size=(12, 5))), Tensor(rng.normal(size=(9, 5)))]
    plans = [_Plan([AlignmentTarget(0, 2, 4, 0, {"a": rng.normal(size=(16, 3)), "b": rng.normal(size=(4, 2))}),
                    AlignmentTarget(1, 7, 4, 1, {"a": rng.normal(size=(16, 3)), "b": rng.normal(size=(4, 2))})]),
             _Plan([AlignmentTarget(0, 3, 4, 0, {"a": rng.normal(size=(16, 3)), "b": rng.normal(size=(4, 2))})])]
    got = batch_alignment_loss(list(zip(plans, tapped)), heads).item()
    # unrolled by hand: per segment, per encoder, per patch
    per_seg = []
    for plan, t in zip(plans, tapped):
        for seg in plan.segments:
            enc = []
            for h in heads:
                F = seg.features[h.encoder_name]
                rows = t.data[seg.start:seg.start + 4]
                up = rows[upsample_index(4, F.shape[0])]
                Fh = h(Tensor(up)).data
                sims = [Fh[p] @ F[p] / (np.linalg.norm(Fh[p]) * np.linalg.norm(F[p])) for p in range(F.shape[0])]
                enc.append(-np.mean(sims))
            per_seg.append(np.mean(enc))
    assert abs(got - np.mean(per_seg)) < 1e-12


def test_batch_loss_equal_segments_and_empty():
    rng = np.random.default_rng(7)
    head = ProjectionHead("a", 4, 3, seed=0)
    rows = rng.normal(size=(4, 4))
    F = rng.normal(size=(16, 3))
    tapped = Tensor(np.concatenate([rows, rows]))
    plan = _Plan([AlignmentTarget(0, 0, 4, 0, {"a": F}), AlignmentTarget(1, 4, 4, 0, {"a": F})])
    ell = repa_loss_single(Tensor(rows), head, F).item()
    assert abs(batch_alignment_loss([(plan, tapped)], [head]).item() - ell) < 1e-12
    with pytest.raises(EmptyLossError):
        batch_alignment_loss([(_Plan([]), tapped)], [head])
    with pytest.raises(EmptyLossError):
        segment_alignment_loss(Tensor(np.zeros((0, 4, 4))), {"a": np.zeros((0, 16, 3))}, [head])


def test_zero_projected_row_has_no_nan():
    head = ProjectionHead("a", 3, 3, seed=0)
    for p in head.params.values():
        p.data[...] = 0.0
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    with Tape() as tape:
        loss = repa_loss_single(x, head, np.ones((4, 3)))
    tape.backward(loss)
    assert loss.item() == 0.0
    assert np.isfinite(x.grad).all() and not x.grad.any()


def test_target_receives_no_gradient():
    rng = np.random.default_rng(8)
    head = ProjectionHead("a", 4, 3, seed=0)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = repa_loss_single(x, head, rng.normal(size=(4, 3)))
    tape.backward(loss)
    leaves = {id(t) for node in tape.nodes for t in node.inputs if not t.requires_grad}
    assert all(n.tag != "cosine_rows" or not n.inputs[1].requires_grad for n in tape.nodes)
    assert leaves
