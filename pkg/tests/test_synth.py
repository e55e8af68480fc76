import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dn2n import manifest
from dn2n.imaging import Image, write_frame, write_pgm
from dn2n.rng import stream
from dn2n.synth import (Mode, NoiseSpec, TauSampler, ToySpec, add_poisson_gaussian, load_frame_directory,
                        make_toy_dataset, q_schedule, read_dataset, region_mask, render_clean_frame, sample_tau,
                        write_dataset)


def test_q_endpoints():
    for mode in Mode:
        assert q_schedule(mode, 0, 24) == 1.0
    assert q_schedule("slow", 24, 24) == pytest.approx(0.916274, abs=1e-6)
    # 30-digit evaluation of exp(-24**0.1 * ln 2)
    assert q_schedule("fast", 24, 24) == pytest.approx(0.385790945710860160553, abs=1e-15)
    assert q_schedule("slow", 24, 24) == pytest.approx(0.916274209270744955340, abs=1e-15)
    with pytest.raises(ValueError):
        q_schedule("slow", 25, 24)
    with pytest.raises(ValueError):
        q_schedule("slow", -1, 24)


@pytest.mark.parametrize("n", [1, 5, 24, 100])
def test_q_monotone(n):
    for mode in Mode:
        q = [q_schedule(mode, i, n) for i in range(n + 1)]
        assert all(0 < v <= 1 for v in q)
        assert all(a > b for a, b in zip(q, q[1:]))


@pytest.mark.parametrize("n", [5, 24, 100])
def test_slow_dominates_fast(n):
    assert all(q_schedule("slow", i, n) > q_schedule("fast", i, n) for i in range(1, n + 1))


def test_schedules_meet_at_single_step():
    # with N = 1 both schedules land on exactly one half
    assert q_schedule("slow", 1, 1) == pytest.approx(0.5, abs=1e-15)
    assert q_schedule("fast", 1, 1) == pytest.approx(0.5, abs=1e-15)


def test_toy_geometry():
    toy = ToySpec()
    assert toy.center == (97, 97) and toy.radius == 72.0
    frame = render_clean_frame(toy, 1.0).pixels
    # pixel (a, b) lives at row b - 1, column a - 1
    assert frame[96, 96] == 175 and frame[0, 0] == 75
    assert frame[96, 96 + 72] == 175
    assert render_clean_frame(toy, 0.5).pixels[96, 96 + 72] == 75
    # the squeeze acts horizontally only
    squeezed = region_mask(toy, 0.5)
    assert squeezed[96 - 72, 96] and not squeezed[96, 96 - 72]
    with pytest.raises(ValueError):
        region_mask(toy, 0.0)
    with pytest.raises(ValueError):
        ToySpec(side=10, center=(11, 3))
    with pytest.raises(ValueError):
        ToySpec(inside=1, outside=1)


def test_region_area_non_increasing():
    toy = ToySpec(side=96)
    for mode in Mode:
        areas = [region_mask(toy, q_schedule(mode, i, 24)).sum() for i in range(25)]
        assert all(a >= b for a, b in zip(areas, areas[1:]))
        assert areas[0] > areas[-1]


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(0, 1)
    with pytest.raises(ValueError):
        NoiseSpec(1, -1)


def test_poisson_gaussian_edge_cases():
    zero = Image(np.zeros((4, 4)))
    assert not np.any(add_poisson_gaussian(zero, NoiseSpec(10, 0), stream(0, "t")).pixels)
    with pytest.raises(ValueError):
        add_poisson_gaussian(Image(-np.ones((2, 2))), NoiseSpec(10, 0), stream(0, "t"))
    # not clamped: dark pixels go negative under Gaussian noise
    y = add_poisson_gaussian(Image(np.zeros((50, 50))), NoiseSpec(10, 25), stream(0, "t"))
    assert y.pixels.min() < 0


@pytest.mark.parametrize("lam,sigma", [(25, 25), (10, 10)])
def test_poisson_gaussian_moments(lam, sigma):
    n = 100_000
    y = add_poisson_gaussian(Image(np.full((1, n), 175.0)), NoiseSpec(lam, sigma), stream(3, "m")).pixels.ravel()
    var = 175 / lam + sigma ** 2
    assert abs(y.mean() - 175) < 3 * math.sqrt(var / n)
    # standard error of the sample variance, excess kurtosis ~ 0 here
    assert abs(y.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1)) * 1.05


def test_make_toy_dataset_contract():
    toy = ToySpec(side=32, n=6)
    clean, noisy = make_toy_dataset("fast", toy, NoiseSpec(25, 10, 4))
    assert len(clean) == len(noisy) == 7
    np.testing.assert_allclose(noisy.times, np.arange(7) * 0.1)
    for i in range(7):
        assert np.array_equal(clean[i].pixels, render_clean_frame(toy, q_schedule("fast", i, 6)).pixels)
    _, again = make_toy_dataset("fast", toy, NoiseSpec(25, 10, 4))
    assert noisy.stack().tobytes() == again.stack().tobytes()
    _, other = make_toy_dataset("fast", toy, NoiseSpec(25, 10, 5))
    assert noisy.stack().tobytes() != other.stack().tobytes()
    c2, near = make_toy_dataset("slow", toy, NoiseSpec(1e9, 0, 1))
    assert np.max(np.abs(near.stack() - c2.stack())) < 1e-2


def test_tau_sampler():
    ident = sample_tau(TauSampler(24, permutation=tuple(range(1, 25))))
    assert [round(t, 12) for t, _ in ident] == [round(0.1 * i, 12) for i in range(1, 25)]
    with pytest.raises(ValueError):
        TauSampler(3, permutation=(1, 1, 2))
    with pytest.raises(ValueError):
        sample_tau(TauSampler(3))
    taus = [t for t, _ in ident]
    assert sum(t * t for t in taus) / 24 == pytest.approx(4900 / 2400, abs=1e-12)


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_tau_is_a_bijection(n, seed):
    plan = sample_tau(TauSampler(n), stream(seed, "tau"))
    frames = sorted(i for _, i in plan)
    assert frames == list(range(1, n + 1))
    assert all(t == i * 0.1 for t, i in plan)


def test_load_frame_directory(tmp_path):
    for i in range(25):
        write_pgm(tmp_path / f"f{i:02d}.pgm", Image(np.full((4, 6), float(i))))
    seq = load_frame_directory(tmp_path)
    assert len(seq) == 25 and seq.times[-1] == pytest.approx(2.4)
    assert [f.pixels[0, 0] for f in seq.frames[:3]] == [0, 1, 2]
    order = tmp_path / "order.txt"
    order.write_text("# reversed\n" + "\n".join(f"f{i:02d}.pgm" for i in reversed(range(25))))
    rev = load_frame_directory(tmp_path, ordering=str(order))
    assert rev[0].pixels[0, 0] == 24
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError):
        load_frame_directory(empty)
    write_frame(empty / "a.dnf", Image(np.zeros((2, 2))))
    write_frame(empty / "b.dnf", Image(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        load_frame_directory(empty)
    with pytest.raises(FileNotFoundError):
        load_frame_directory(tmp_path / "missing")


def test_dataset_roundtrip(tmp_path):
    clean, noisy = make_toy_dataset("slow", ToySpec(side=16, n=4), NoiseSpec(10, 10, 2))
    write_dataset(tmp_path, clean, noisy, {"mode": "slow"})
    info = manifest.read(tmp_path / "manifest.txt")
    assert info["N"] == "4" and info["mode"] == "slow"
    c2, n2, meta = read_dataset(tmp_path)
    assert c2.stack().tobytes() == clean.stack().tobytes()
    assert n2.stack().tobytes() == noisy.stack().tobytes()
    np.testing.assert_allclose(n2.times, noisy.times)
