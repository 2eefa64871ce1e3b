import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condreg.data import SynthSpec, generate, read_csv, write_csv
from condreg.errors import ParseError, ShapeError
from condreg.evaluation import ProbeConfig, probe_leakage
from condreg.stats import LabeledBatch


def _all(split):
    return [split.train, split.test, split.aux]


def test_spec_validation():
    with pytest.raises(ShapeError):
        SynthSpec(d_in=3)
    with pytest.raises(ValueError):
        SynthSpec(correlation=1.5)
    with pytest.raises(ValueError):
        SynthSpec(noise_std=-1.0)


def test_independence_case():
    split = generate(SynthSpec(n=5000, correlation=0.5))
    s = np.concatenate([b.sensitive for b in _all(split)])
    y = np.concatenate([b.main for b in _all(split)])
    assert 0.45 <= np.mean(s == y) <= 0.55


def test_default_correlation(default_split):
    b = default_split.train
    assert np.mean(b.sensitive == b.main) == pytest.approx(0.8, abs=0.03)


def test_noise_free_separable():
    d = 4
    spec = SynthSpec(n=400, d_in=d, y_shift=[1.0, 0, 0, 0], s_shift=[0, 1.0, 0, 0],
                     noise_std=0.0, seed=2)
    b = generate(spec).train
    # orthogonal shifts put y and s on their own coordinates
    np.testing.assert_array_equal(b.samples[:, 0], b.main)
    np.testing.assert_array_equal(b.samples[:, 1], b.sensitive)
    cfg = ProbeConfig(steps=300, seed=1)
    assert probe_leakage(b.samples, b.main, cfg)[0] == 1.0
    assert probe_leakage(b.samples, b.sensitive, cfg)[0] == 1.0


def test_split_sizes():
    split = generate(SynthSpec(n=100))
    assert [len(b) for b in _all(split)] == [60, 20, 20]


def test_splits_disjoint_and_exhaustive():
    spec = SynthSpec(n=500, seed=4)
    split = generate(spec)
    rows = np.concatenate([b.samples for b in _all(split)])
    assert len(rows) == 500
    assert len({r.tobytes() for r in rows}) == 500


def test_split_balance(default_split):
    for b in _all(default_split):
        assert abs(b.main.mean() - 0.5) <= 0.05
        assert abs(b.sensitive.mean() - 0.5) <= 0.05


def test_seed_determinism():
    a = generate(SynthSpec(n=300, seed=9))
    b = generate(SynthSpec(n=300, seed=9))
    c = generate(SynthSpec(n=300, seed=10))
    for x, y in zip(_all(a), _all(b)):
        assert x.samples.tobytes() == y.samples.tobytes()
        np.testing.assert_array_equal(x.sensitive, y.sensitive)
    assert not np.array_equal(a.train.samples, c.train.samples)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(5, 400), seed=st.integers(0, 2**32))
def test_split_partition_property(n, seed):
    split = generate(SynthSpec(n=n, seed=seed))
    assert sum(len(b) for b in _all(split)) == n


def test_csv_round_trip(tmp_path, rng):
    batch = LabeledBatch(rng.normal(size=(30, 4)) * 10.0 ** rng.integers(-8, 8, (30, 4)),
                         rng.integers(0, 2, 30), rng.integers(0, 2, 30))
    back = read_csv(write_csv(batch, tmp_path / "b.csv"))
    np.testing.assert_allclose(back.samples, batch.samples, rtol=1e-15, atol=0)
    assert back.samples.tobytes() == batch.samples.tobytes()
    np.testing.assert_array_equal(back.sensitive, batch.sensitive)
    np.testing.assert_array_equal(back.main, batch.main)


def test_csv_header(tmp_path, rng):
    batch = LabeledBatch(rng.normal(size=(2, 3)), [0, 1], [1, 0])
    path = write_csv(batch, tmp_path / "b.csv")
    assert path.read_text().splitlines()[0] == "f0,f1,f2,y,s"


def test_csv_bad_label_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("f0,f1,y,s\n0.1,0.2,0,1\n0.3,0.4,2,0\n")
    with pytest.raises(ParseError, match="line 3"):
        read_csv(path)


@pytest.mark.parametrize(
    "text, line",
    [
        ("f0,f1,y,s\n0.1,0.2,0\n", 2),
        ("f0,f1,y,s\n0.1,abc,0,1\n", 2),
        ("f0,f1,y,s\n0.1,nan,0,1\n", 2),
        ("a,b,y,s\n0.1,0.2,0,1\n", 1),
        ("f0,f1,s,y\n0.1,0.2,0,1\n", 1),
    ],
)
def test_csv_malformed(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        read_csv(path)
    assert info.value.line == line


def test_csv_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("f0,f1,y,s\n")
    with pytest.raises(ParseError, match="no data rows"):
        read_csv(path)


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(ParseError):
        read_csv(path)
