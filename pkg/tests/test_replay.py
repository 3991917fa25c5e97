import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmnav.replay import EpisodeBuffer, NotReadyError, TransitionBuffer


def fill(buf, n, start=0):
    for i in range(start, start + n):
        buf.append(np.full(buf.obs_dim, i), (0.5, 0.0), float(i), np.full(buf.obs_dim, i + 1), False)


def test_first_insert_size_one():
    buf = TransitionBuffer(14)
    fill(buf, 1)
    assert len(buf) == 1


def test_capacity_fifo():
    buf = TransitionBuffer(14, capacity=100_000)
    fill(buf, 100_001)
    assert len(buf) == 100_000
    # the very first transition (reward 0) was the one evicted
    assert 0.0 not in set(buf.rewards.tolist())
    assert buf.rewards[buf.index_of_oldest()] == 1.0


def test_dimension_mismatch():
    buf = TransitionBuffer(14)
    with pytest.raises(ValueError, match="expected"):
        buf.append(np.zeros(364), (0, 0), 0.0, np.zeros(364), False)
    with pytest.raises(ValueError):
        buf.append(np.zeros(14), (0, 0, 0), 0.0, np.zeros(14), False)


def test_sample_seeded_and_without_replacement():
    buf = TransitionBuffer(4, capacity=500)
    fill(buf, 300)
    a = buf.sample(128, np.random.default_rng(5))
    b = buf.sample(128, np.random.default_rng(5))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert len(set(a["rewards"].tolist())) == 128
    assert np.array_equal(a["next_obs"][:, 0], a["obs"][:, 0] + 1)


def test_sample_underfull():
    buf = TransitionBuffer(4)
    fill(buf, 10)
    with pytest.raises(NotReadyError):
        buf.sample(128, np.random.default_rng(0))


def test_sample_uniform_histogram():
    buf = TransitionBuffer(2, capacity=50)
    fill(buf, 50)
    rng = np.random.default_rng(0)
    counts = np.zeros(50)
    for _ in range(50_000):  # 10^6 draws in batches of 20
        idx = buf.sample(20, rng)["rewards"].astype(int)
        counts += np.bincount(idx, minlength=50)
    p = 20 / 50
    mean, sigma = 50_000 * p, np.sqrt(50_000 * p * (1 - p))
    assert np.abs(counts - mean).max() <= 3 * sigma


# -- episodes ---------------------------------------------------------------------

def store_episode(buf, length, tag, terminal=True):
    for t in range(length):
        last = terminal and t == length - 1
        buf.append(np.full(buf.obs_dim, tag * 1000 + t), (tag, t), 100.0 if last else 0.0,
                   0.0 if last else 1.0, t == 0)


def test_single_step_windows():
    buf = EpisodeBuffer(3)
    store_episode(buf, 5, 1)
    batch = buf.sample(8, 1, np.random.default_rng(0))
    assert batch.shape == (8, 1)
    assert batch.mask.all() and batch.is_first.all()


def test_short_episode_is_padded_and_masked():
    buf = EpisodeBuffer(3)
    store_episode(buf, 4, 1)
    batch = buf.sample(2, 10, np.random.default_rng(0))
    assert batch.mask[0].tolist() == [1] * 4 + [0] * 6
    assert batch.continues[0].tolist() == [1, 1, 1, 0] + [0] * 6
    assert batch.rewards[0, 3] == 100.0
    assert (batch.obs[0, 4:] == 0).all()


def test_empty_buffer_not_ready():
    with pytest.raises(NotReadyError):
        EpisodeBuffer(3).sample(1, 4, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(lengths=st.lists(st.integers(1, 30), min_size=1, max_size=8), L=st.integers(1, 16),
       seed=st.integers(0, 1000))
def test_windows_stay_in_one_episode(lengths, L, seed):
    buf = EpisodeBuffer(2)
    for tag, n in enumerate(lengths, start=1):
        store_episode(buf, n, tag)
    batch = buf.sample(16, L, np.random.default_rng(seed))
    for b in range(16):
        valid = batch.mask[b] == 1
        assert valid[0] and (np.diff(valid.astype(int)) <= 0).all()  # padding only at the end
        codes = batch.obs[b, valid, 0]
        tags = codes // 1000
        assert len(set(tags.tolist())) == 1
        assert (np.diff(codes) == 1).all()  # consecutive steps
        conts = batch.continues[b, valid]
        terminal = codes % 1000 == lengths[int(tags[0]) - 1] - 1
        assert np.array_equal(conts == 0, terminal)
        assert batch.is_first[b, 0] == 1 and (batch.is_first[b, 1:] == 0).all()


def test_every_step_equally_covered():
    # terminal steps carry the only nonzero rewards, so they must be seen as
    # often as any other step; episodes both shorter and longer than L
    lengths, L = [5, 40, 100, 7], 16
    buf = EpisodeBuffer(2)
    for tag, n in enumerate(lengths, start=1):
        store_episode(buf, n, tag)
    rng = np.random.default_rng(0)
    counts = {}
    for _ in range(2500):
        batch = buf.sample(16, L, rng)
        for code in batch.obs[..., 0][batch.mask == 1].astype(int).tolist():
            counts[code] = counts.get(code, 0) + 1
    assert len(counts) == sum(lengths)
    expected = 2500 * 16 * L / sum(n + L - 1 if n >= L else L for n in lengths)
    got = np.array(list(counts.values()))
    assert np.abs(got / expected - 1).max() < 0.1


def test_open_episode_is_sampled_and_eviction():
    buf = EpisodeBuffer(2, capacity=25)
    store_episode(buf, 10, 1)
    store_episode(buf, 10, 2)
    store_episode(buf, 10, 3)
    assert len(buf) == 20 and len(buf.episodes) == 2
    assert buf.episodes[0]["obs"][0, 0] == 2000
    store_episode(buf, 3, 4, terminal=False)
    batch = buf.sample(64, 3, np.random.default_rng(0))
    assert 4 in set((batch.obs[:, 0, 0] // 1000).tolist())


def test_episode_obs_dimension_checked():
    with pytest.raises(ValueError):
        EpisodeBuffer(3).append(np.zeros(4), (0, 0), 0.0, 1.0, True)


def test_dumped_contents_identical_across_runs(tmp_path):
    def run(tag):
        rng = np.random.default_rng(1)
        buf = EpisodeBuffer(3)
        for t in range(40):
            buf.append(rng.normal(size=3), rng.uniform(size=2), 0.0, float(t % 13 != 12), t % 13 == 0)
        buf.dump(tmp_path / f"ep{tag}.npz")
        tb = TransitionBuffer(3, capacity=16)
        for _ in range(20):
            tb.append(rng.normal(size=3), rng.uniform(size=2), 0.0, rng.normal(size=3), False)
        tb.dump(tmp_path / f"tr{tag}.npz")

    run("a")
    run("b")
    for kind in ("ep", "tr"):
        a, b = np.load(tmp_path / f"{kind}a.npz"), np.load(tmp_path / f"{kind}b.npz")
        assert a.files == b.files
        assert all(a[k].tobytes() == b[k].tobytes() for k in a.files)
    assert len(np.load(tmp_path / "tra.npz")["obs"]) == 16
