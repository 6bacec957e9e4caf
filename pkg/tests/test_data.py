import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofm.config import desk_profile
from mofm.data import (DESK_JOINTS, SynthSpec, augment, flip_pairs, gen_corpus, hflip, ingest, joint_names,
                       prepare, read_poses, split_windows, window_starts, write_poses)
from mofm.heatmap import PoseSequence
from mofm.kernel import make_rng


def test_corpus_is_deterministic_and_balanced():
    spec = SynthSpec(per_class=5, seed=3)
    a, b = gen_corpus(spec), gen_corpus(spec)
    assert len(a) == 20
    assert all(np.array_equal(x.coords, y.coords) and x.id == y.id for x, y in zip(a, b))
    assert np.bincount([p.label for p in a]).tolist() == [5, 5, 5, 5]
    assert all(p.coords.shape == (12, 5, 2) and not p.abnormal for p in a)
    other = gen_corpus(SynthSpec(per_class=5, seed=4))
    assert not np.array_equal(other[0].coords, a[0].coords)


def test_anomalies_keep_motion_label():
    corpus = gen_corpus(SynthSpec(per_class=10, anomaly_fraction=0.25, seed=0))
    abnormal = [p for p in corpus if p.abnormal]
    assert len(abnormal) == 10
    assert {p.label for p in abnormal} == {2, 3}
    assert {p.id.split("-")[0] for p in abnormal} == {"reversed_walk", "teleport_jump"}


def test_empty_corpus_warns(caplog):
    assert gen_corpus(SynthSpec(per_class=0)) == []
    assert "zero sequences" in caplog.text


def test_classes_are_distinguishable():
    corpus = gen_corpus(SynthSpec(per_class=20, seed=1, noise=0.0))
    motion = {}
    for p in corpus:
        motion.setdefault(p.label, []).append(np.ptp(p.coords, axis=0).mean())
    still, wave = np.mean(motion[0]), np.mean(motion[1])
    assert still < wave


def test_jsonl_roundtrip_with_missing(tmp_path):
    coords = np.arange(12, dtype=float).reshape(2, 3, 2)
    coords[1, 2] = np.nan
    p = PoseSequence(coords, confidence=np.full((2, 3), 0.5), label=1, id="x", abnormal=True, fps=30.0,
                     person_id=4)
    write_poses(tmp_path / "p.jsonl", [p])
    (q,) = read_poses(tmp_path / "p.jsonl")
    assert np.array_equal(q.coords, coords, equal_nan=True)
    assert (q.label, q.id, q.abnormal, q.fps, q.person_id) == (1, "x", True, 30.0, 4)


def test_malformed_line_reports_position(tmp_path):
    (tmp_path / "p.jsonl").write_text('{"frames": [[[0, 0, 1]]]}\n\n{"frames": [1, 2]}\n')
    with pytest.raises(ValueError, match=r"p.jsonl:3"):
        read_poses(tmp_path / "p.jsonl")


def test_window_starts():
    assert window_starts(12, 12, 6) == [0]
    assert window_starts(5, 12, 6) == [0]
    assert window_starts(30, 12, 6) == [0, 6, 12, 18]
    assert window_starts(27, 12, 6) == [0, 6, 12, 15]
    with pytest.raises(ValueError, match="stride"):
        window_starts(30, 12, 13)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12), st.integers(1, 12))
def test_windows_cover_every_frame(total, frames, stride):
    stride = min(stride, frames)
    p = PoseSequence(np.arange(total * 2, dtype=float).reshape(total, 1, 2), id="s")
    wins = split_windows(p, frames, stride)
    assert all(w.frames == frames for w in wins)
    covered = set()
    for w in wins:
        covered.update(range(w.start, min(w.start + frames, total)))
        assert w.id == ("s" if w.start == 0 else f"s@{w.start}")
    assert covered == set(range(total))


def test_short_sequence_repeats_last_frame():
    p = PoseSequence(np.arange(4, dtype=float).reshape(2, 1, 2), confidence=np.ones((2, 1)))
    (w,) = split_windows(p, 4, 2)
    assert w.coords[:, 0].tolist() == [[0, 1], [2, 3], [2, 3], [2, 3]]


def test_ingest(tmp_path):
    prof = desk_profile()
    write_poses(tmp_path / "p.jsonl", gen_corpus(SynthSpec(per_class=1, frames=18)))
    wins = ingest(tmp_path / "p.jsonl", prof)
    assert len(wins) == 8 and all(w.frames == 12 for w in wins)
    ok = np.concatenate([w.coords[w.valid()] for w in wins])
    assert ok.min() >= 0 and ok.max() <= prof.width - 1
    write_poses(tmp_path / "q.jsonl", gen_corpus(SynthSpec(per_class=1, joints=17)))
    with pytest.raises(ValueError, match="17 joints"):
        ingest(tmp_path / "q.jsonl", prof)


def test_prepare_centers_box():
    prof = desk_profile()
    (p,) = prepare(gen_corpus(SynthSpec(per_class=1, classes=("walk",))), prof)
    lo, hi = p.coords.reshape(-1, 2).min(0), p.coords.reshape(-1, 2).max(0)
    np.testing.assert_allclose((lo + hi) / 2, [(prof.width - 1) / 2] * 2, atol=1e-9)
    assert max(hi - lo) == pytest.approx(prof.margin_ratio * prof.width)


def test_joint_layouts():
    assert joint_names(5) == DESK_JOINTS and len(joint_names(17)) == 17
    assert flip_pairs(DESK_JOINTS) == [(1, 2), (3, 4)]
    assert len(flip_pairs(joint_names(17))) == 8
    with pytest.raises(ValueError):
        joint_names(6)


def test_hflip_is_involution():
    rng = np.random.default_rng(0)
    p = PoseSequence(rng.uniform(0, 23, (3, 5, 2)), confidence=rng.random((3, 5)))
    pairs = flip_pairs(DESK_JOINTS)
    q = hflip(p, 24, pairs)
    assert q.coords[0, 1, 0] == pytest.approx(23 - p.coords[0, 2, 0])
    back = hflip(q, 24, pairs)
    np.testing.assert_allclose(back.coords, p.coords)
    assert np.array_equal(back.confidence, p.confidence)


def test_augment_identity_and_scale():
    p = PoseSequence(np.random.default_rng(0).uniform(0, 23, (3, 5, 2)))
    same = augment(p, make_rng(0), 24, 24, [], scale=(1.0, 1.0), flip_prob=0.0)
    np.testing.assert_allclose(same.coords, p.coords)
    big = augment(p, make_rng(0), 24, 24, [], scale=(2.0, 2.0), flip_prob=0.0)
    np.testing.assert_allclose(big.coords - 11.5, 2 * (p.coords - 11.5))
