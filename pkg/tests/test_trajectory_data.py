import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcr.errors import (
    BoundsError,
    DatasetError,
    FormatError,
    InsufficientLengthError,
    IntegrityError,
    SpecError,
)
from mcr.trajectory_data import (
    ChunkSpec,
    FilterRules,
    Trajectory,
    build_dynamics_chunk,
    cross_video_negatives,
    filter_trajectories,
    read_dataset,
    read_trajectory,
    sample_frame_quintet,
    sample_training_batch,
    write_dataset,
    write_trajectory,
)


def make_traj(T=50, ds=14, da=7, size=8, instruction="pick up the cup", tid="traj", seed=0,
              masks=False):
    rng = np.random.default_rng(seed)
    return Trajectory(
        frames=rng.integers(0, 256, size=(T, size, size, 3), dtype=np.uint8),
        states=rng.normal(size=(T, ds)).astype(np.float32),
        actions=rng.normal(size=(T - 1, da)).astype(np.float32),
        instruction=instruction,
        id=tid,
        masks=rng.random((T, size, size)) > 0.5 if masks else None,
    )


def labelled_traj(T, ds=14, da=7):
    """States hold ``100 * t + j`` and actions ``-(100 * t + j)``, so chunks are readable."""
    states = np.array([[100 * t + j for j in range(ds)] for t in range(T)], dtype=np.float32)
    actions = np.array([[-(100 * t + j) for j in range(da)] for t in range(T - 1)], dtype=np.float32)
    return Trajectory(np.zeros((T, 4, 4, 3), np.uint8), states, actions, "a b", "lab")


# ------------------------------------------------------------------ io


def test_round_trip_T50(tmp_path):
    traj = make_traj(T=50)
    write_trajectory(traj, tmp_path / "t")
    back = read_trajectory(tmp_path / "t")
    assert len(back.frames) == 50
    assert back.states.shape == (50, 14)
    assert back.actions.shape == (49, 7)
    assert back == traj


def test_layout_and_encoding(tmp_path):
    traj = make_traj(T=3, ds=2, da=1, masks=True)
    write_trajectory(traj, tmp_path / "t")
    meta = json.loads((tmp_path / "t" / "meta.json").read_text())
    assert meta == {"length": 3, "instruction": "pick up the cup", "state_dim": 2,
                    "action_dim": 1, "id": "traj"}
    raw = (tmp_path / "t" / "states.f32").read_bytes()
    assert raw == traj.states.astype("<f4").tobytes()
    assert sorted(p.name for p in (tmp_path / "t" / "frames").iterdir()) == [
        "000000.png", "000001.png", "000002.png"]
    assert (tmp_path / "t" / "masks" / "000002.png").is_file()


@settings(max_examples=15, deadline=None)
@given(T=st.integers(1, 12), ds=st.integers(1, 5), da=st.integers(1, 4),
       seed=st.integers(0, 2**16), masks=st.booleans())
def test_round_trip_random(tmp_path_factory, T, ds, da, seed, masks):
    traj = make_traj(T=T, ds=ds, da=da, seed=seed, masks=masks)
    path = tmp_path_factory.mktemp("rt") / "x"
    write_trajectory(traj, path)
    assert read_trajectory(path) == traj


def test_single_frame_trajectory(tmp_path):
    traj = make_traj(T=1)
    write_trajectory(traj, tmp_path / "t")
    meta = json.loads((tmp_path / "t" / "meta.json").read_text())
    assert meta["length"] == 1
    assert (tmp_path / "t" / "actions.f32").read_bytes() == b""
    assert read_trajectory(tmp_path / "t") == traj


def test_overwrite_leaves_no_stale_frames(tmp_path):
    write_trajectory(make_traj(T=10), tmp_path / "t")
    second = make_traj(T=4, seed=3)
    write_trajectory(second, tmp_path / "t")
    assert len(list((tmp_path / "t" / "frames").iterdir())) == 4
    assert read_trajectory(tmp_path / "t") == second
    assert [p.name for p in tmp_path.iterdir()] == ["t"]


def test_corrupted_state_bytes(tmp_path):
    write_trajectory(make_traj(T=5), tmp_path / "t")
    f = tmp_path / "t" / "states.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(IntegrityError):
        read_trajectory(tmp_path / "t")


def test_meta_length_mismatch(tmp_path):
    write_trajectory(make_traj(T=5), tmp_path / "t")
    meta_file = tmp_path / "t" / "meta.json"
    meta = json.loads(meta_file.read_text())
    meta["length"] = 6
    meta_file.write_text(json.dumps(meta))
    with pytest.raises(IntegrityError):
        read_trajectory(tmp_path / "t")


@pytest.mark.parametrize("victim", ["meta.json", "actions.f32"])
def test_missing_file(tmp_path, victim):
    write_trajectory(make_traj(T=5), tmp_path / "t")
    (tmp_path / "t" / victim).unlink()
    with pytest.raises(FormatError):
        read_trajectory(tmp_path / "t")


def test_dataset_round_trip(tmp_path):
    trajs = [make_traj(T=4 + i, tid=f"t{i}", seed=i) for i in range(3)]
    write_dataset(trajs, tmp_path / "ds", extra={"note": "x"})
    index = json.loads((tmp_path / "ds" / "index.json").read_text())
    assert index["trajectories"] == ["t0", "t1", "t2"]
    assert read_dataset(tmp_path / "ds") == trajs


def test_invariants_enforced():
    with pytest.raises(ValueError):
        make_traj(T=5).__class__(np.zeros((3, 2, 2, 3), np.uint8), np.zeros((3, 2)),
                                 np.zeros((3, 1)), "a b", "x")
    with pytest.raises(ValueError):
        Trajectory(np.zeros((2, 2, 2, 3), np.uint8), np.array([[np.nan], [0.0]]),
                   np.zeros((1, 1)), "a b", "x")


# ------------------------------------------------------------- filtering


def test_filter_rules_planted():
    ds = [
        make_traj(T=39, tid="short"),
        make_traj(T=40, tid="boundary"),
        make_traj(T=100, instruction="grasp", tid="oneword"),
        make_traj(T=100, instruction="", tid="empty"),
        make_traj(T=100, instruction="  place   the block ", tid="ok"),
    ]
    kept = filter_trajectories(ds, FilterRules())
    assert [t.id for t in kept] == ["boundary", "ok"]
    assert len(ds) == 5


def test_filter_without_instruction_requirement():
    ds = [make_traj(T=100, instruction="", tid="empty")]
    assert len(filter_trajectories(ds, FilterRules(require_instruction=False))) == 1


@settings(max_examples=30, deadline=None)
@given(lengths=st.lists(st.integers(1, 60), max_size=12), a=st.integers(1, 60), b=st.integers(1, 60))
def test_filter_monotone_in_min_length(lengths, a, b):
    ds = [make_traj(T=T, size=1, tid=str(i)) for i, T in enumerate(lengths)]
    lo, hi = sorted((a, b))
    loose = {t.id for t in filter_trajectories(ds, FilterRules(min_length=lo))}
    tight = {t.id for t in filter_trajectories(ds, FilterRules(min_length=hi))}
    assert tight <= loose


def test_filter_rules_validation():
    with pytest.raises(SpecError):
        FilterRules(min_length=0)


# ----------------------------------------------------------------- chunks


def test_chunk_l3_layout():
    traj = labelled_traj(10)
    chunk = build_dynamics_chunk(traj, 4, ChunkSpec(3))
    assert chunk.shape == (56,)
    expected = np.concatenate([traj.states[3], traj.actions[3], traj.states[4],
                               traj.actions[4], traj.states[5]])
    np.testing.assert_array_equal(chunk, expected)


def test_chunk_l1_is_state():
    traj = labelled_traj(10)
    chunk = build_dynamics_chunk(traj, 0, ChunkSpec(1))
    np.testing.assert_array_equal(chunk, traj.states[0])
    assert build_dynamics_chunk(traj, 9, ChunkSpec(1)).shape == (14,)


@pytest.mark.parametrize("l,dim", [(1, 14), (3, 56), (5, 98), (7, 140)])
def test_chunk_dims(l, dim):
    assert l * 14 + (l - 1) * 7 == dim
    assert ChunkSpec(l).dim == dim
    traj = labelled_traj(20)
    assert build_dynamics_chunk(traj, 10, ChunkSpec(l)).shape == (dim,)


@settings(max_examples=40, deadline=None)
@given(half=st.integers(0, 4), ds=st.integers(1, 6), da=st.integers(0, 5), data=st.data())
def test_chunk_dim_identity(half, ds, da, data):
    l = 2 * half + 1
    T = data.draw(st.integers(l, 3 * l + 2))
    t = data.draw(st.integers(half, T - 1 - half))
    traj = make_traj(T=T, ds=ds, da=da, size=1)
    assert build_dynamics_chunk(traj, t, ChunkSpec(l, ds, da)).shape == (l * ds + (l - 1) * da,)


def test_chunk_bounds():
    traj = labelled_traj(10)
    with pytest.raises(BoundsError):
        build_dynamics_chunk(traj, 0, ChunkSpec(3))
    with pytest.raises(BoundsError):
        build_dynamics_chunk(traj, 9, ChunkSpec(3))
    with pytest.raises(BoundsError):
        build_dynamics_chunk(traj, 2, ChunkSpec(7))


@pytest.mark.parametrize("l", [0, 2, 4, -1])
def test_even_chunk_rejected(l):
    with pytest.raises(SpecError):
        ChunkSpec(l)


# --------------------------------------------------------------- sampling


def test_quintet_T100_windows():
    rng = np.random.default_rng(0)
    for _ in range(500):
        q = sample_frame_quintet(100, rng)
        assert 0 <= q[0] <= 19 and 80 <= q[4] <= 99
        assert all(a < b for a, b in zip(q, q[1:]))


def test_quintet_T5_deterministic():
    rng = np.random.default_rng(1)
    for _ in range(20):
        assert sample_frame_quintet(5, rng) == (0, 1, 2, 3, 4)


def test_quintet_too_short():
    with pytest.raises(InsufficientLengthError):
        sample_frame_quintet(4, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(T=st.integers(5, 400), seed=st.integers(0, 2**32 - 1))
def test_quintet_order_and_windows(T, seed):
    q = sample_frame_quintet(T, np.random.default_rng(seed))
    w = max(1, int(0.2 * T))
    assert len(q) == 5 and all(a < b for a, b in zip(q, q[1:]))
    assert 0 <= q[0] <= w - 1 and T - w <= q[4] <= T - 1


def test_batch_determinism():
    ds = [make_traj(T=30 + i, tid=f"t{i}", seed=i) for i in range(4)]
    spec = ChunkSpec(3)
    a = sample_training_batch(ds, 8, spec, np.random.default_rng(17))
    b = sample_training_batch(ds, 8, spec, np.random.default_rng(17))
    for name in ("images_t", "images_k", "chunks_t", "chunks_k", "actions_t",
                 "images_u", "images_v", "images_w", "t", "k", "u", "v", "w", "negative_index"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert a.trajectory_ids == b.trajectory_ids


def test_batch_contents_consistent():
    ds = [labelled_traj(20)]
    batch = sample_training_batch(ds, 16, ChunkSpec(3), np.random.default_rng(0))
    traj = ds[0]
    for b in range(16):
        t, k = batch.t[b], batch.k[b]
        assert t != k and 1 <= t <= 18 and 1 <= k <= 18
        np.testing.assert_array_equal(batch.chunks_t[b], build_dynamics_chunk(traj, t, ChunkSpec(3)))
        np.testing.assert_array_equal(batch.actions_t[b], traj.actions[t])
        assert batch.u[b] < batch.v[b] < batch.w[b]


def test_single_trajectory_batch_falls_back():
    ds = [make_traj(T=30)]
    batch = sample_training_batch(ds, 2, ChunkSpec(3), np.random.default_rng(0))
    assert batch.trajectory_ids == ["traj", "traj"]
    assert list(batch.negative_index) == [1, 0]


def test_cross_video_negatives_prefer_other_video():
    neg = cross_video_negatives(["a", "a", "b", "a"])
    assert list(neg) == [2, 2, 3, 2]


def test_l1_batches_stay_within_action_range():
    ds = [make_traj(T=6)]
    batch = sample_training_batch(ds, 64, ChunkSpec(1), np.random.default_rng(0))
    assert batch.t.max() <= 4 and batch.k.max() <= 4


def test_t_uniformity_chi_square():
    # T=50, l=3 -> valid t in [1, 48]: 48 cells
    ds = [make_traj(T=50, size=1)]
    rng = np.random.default_rng(123)
    counts = np.zeros(50, dtype=int)
    for _ in range(10_000 // 100):
        batch = sample_training_batch(ds, 100, ChunkSpec(3), rng)
        np.add.at(counts, batch.t, 1)
    assert counts[0] == 0 and counts[49] == 0
    observed = counts[1:49]
    expected = observed.sum() / 48
    chi2 = ((observed - expected) ** 2 / expected).sum()
    # 47 dof, 0.999 quantile is about 82.7
    assert chi2 < 82.7


def test_batch_errors():
    with pytest.raises(DatasetError):
        sample_training_batch([make_traj(T=3)], 4, ChunkSpec(3), np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_training_batch([make_traj(T=30)], 1, ChunkSpec(3), np.random.default_rng(0))
