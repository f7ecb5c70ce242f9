import hashlib
import json

import numpy as np
import pytest

from swbathy.bench_cli import (
    ArtifactError,
    RunRecord,
    emit_plotdata,
    main,
    parse_tests,
    parse_window,
    read_history_csv,
    thin_levels,
    write_history_csv,
)
from swbathy.core_model import FlowHistory
from swbathy.surface_lab import SurfaceSnapshot


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert main(["--quiet", "--out-dir", str(out), "bench", "--tests", "4"]) == 0
    return out


# -- parsing helpers -------------------------------------------------------------


def test_parse_tests():
    assert parse_tests("1..5") == [f"test-{i}" for i in range(1, 6)]
    assert parse_tests("1,3") == ["test-1", "test-3"]


@pytest.mark.parametrize("spec", ["0..2", "7", "a", "3..1"])
def test_parse_tests_rejects(spec):
    from swbathy.bench_cli import UsageError

    with pytest.raises(UsageError):
        parse_tests(spec)


def test_parse_window():
    assert parse_window("27.39,50") == (27.39, 50.0)
    assert parse_window(None) is None


def test_thinning_keeps_ends_and_tail():
    idx = thin_levels(1000, 50)
    assert idx[0] == 0 and idx[-1] == 999
    assert set(range(992, 1000)) <= set(idx.tolist())
    assert np.all(np.diff(idx) > 0)


def test_history_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    hist = FlowHistory(np.cumsum(rng.random(7)), rng.random((7, 5)) + 1, rng.random((7, 5)))
    p = write_history_csv(tmp_path / "h.csv", hist, np.arange(5.0), np.zeros(5))
    back = read_history_csv(p)
    assert np.array_equal(back.times, hist.times)
    assert np.array_equal(back.zeta, hist.zeta) and np.array_equal(back.q, hist.q)
    assert p.read_text().splitlines()[0] == "t,x,zeta,q,h"


# -- exit codes -------------------------------------------------------------------


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["forward"])
    assert info.value.code == 1
    assert main(["--out-dir", str(tmp_path), "forward", "test-9"]) == 1
    assert main(["--out-dir", str(tmp_path), "bench", "--tests", "0..9"]) == 1


def test_missing_file_exits_3(tmp_path):
    assert main(["reconstruct", str(tmp_path / "nothing.json")]) == 3


def test_degenerate_reconstruction_exits_2(bench_dir, capsys):
    snap = bench_dir / "test-4" / "snapshot.json"
    assert main(["--quiet", "reconstruct", str(snap), "--beta", "100"]) == 2
    assert "cell" in capsys.readouterr().err


def test_off_mesh_t_star_is_usage_error(bench_dir, tmp_path):
    hist = bench_dir / "test-4" / "history.csv"
    assert main(["--quiet", "--out-dir", str(tmp_path), "snapshot", str(hist), "--t-star", "3.14159"]) == 1


def test_emit_plotdata_needs_series(tmp_path):
    with pytest.raises(ArtifactError):
        emit_plotdata(RunRecord("", 0, ""), tmp_path)
    assert issubclass(ArtifactError, OSError)


# -- commands -------------------------------------------------------------------


def test_steady_on_flat_surface(tmp_path):
    n = 20
    x = 25 / n * (np.arange(n) + 0.5)
    SurfaceSnapshot(0.0, x, np.full(n, 2.5), np.zeros(n), np.zeros(n), 4.42, 0.0, 0.5).save(tmp_path / "s.json")
    assert main(["--quiet", "steady", str(tmp_path / "s.json")]) == 0
    data = np.loadtxt(tmp_path / "steady.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 2], 0.5)
    np.testing.assert_array_equal(data[:, 1], 2.0)


def test_bench_artifacts(bench_dir):
    d = bench_dir / "test-4"
    for name in ("config.json", "history.csv", "snapshot.json", "snapshot.csv", "reconstruction.csv",
                 "reconstruction.json", "conditions.json", "record.json", "timing.json",
                 "plot_bed.csv", "plot_discharge.csv", "plot_froude.csv", "plot_lambda2.csv"):
        assert (d / name).is_file(), name
    table = json.loads((bench_dir / "table.json").read_text())
    assert [r["method"] for r in table] == ["inverse"]
    assert table[0]["passed"] is True
    assert "timing" not in json.loads((d / "record.json").read_text())


def test_chained_stages_reproduce_bench(bench_dir, tmp_path):
    out = tmp_path / "chain"
    assert main(["--quiet", "--out-dir", str(out), "forward", "test-4"]) == 0
    d = out / "test-4"
    assert main(["--quiet", "snapshot", str(d / "history.csv")]) == 0
    assert main(["--quiet", "reconstruct", str(d / "snapshot.json")]) == 0
    for name in ("snapshot.csv", "snapshot.json", "reconstruction.csv", "reconstruction.json"):
        assert sha(d / name) == sha(bench_dir / "test-4" / name), name


def test_chain_from_thinned_history(bench_dir, tmp_path):
    # the bench history is thinned; the snapshot taken from it must still match
    assert main(["--quiet", "--out-dir", str(tmp_path), "snapshot", str(bench_dir / "test-4" / "history.csv")]) == 0
    assert sha(tmp_path / "test-4" / "snapshot.csv") == sha(bench_dir / "test-4" / "snapshot.csv")


def test_check_command(bench_dir, tmp_path):
    assert main(["--quiet", "--out-dir", str(tmp_path), "check", str(bench_dir / "test-4" / "history.csv")]) == 0
    cond = json.loads((tmp_path / "test-4" / "conditions.json").read_text())
    assert cond["corollary"]["holds"]


def test_noise_study_command(tmp_path):
    assert main(["--quiet", "--out-dir", str(tmp_path), "noise-study", "test-4", "--n-seeds", "2",
                 "--smooth", "--nx", "50"]) == 0
    out = json.loads((tmp_path / "test-4" / "noise-study-smoothed.json").read_text())
    assert [s["seed"] for s in out["per_seed"]] == [0, 1]


def test_bench_repeatable(bench_dir, tmp_path):
    assert main(["--quiet", "--out-dir", str(tmp_path), "bench", "--tests", "4"]) == 0
    for p in sorted((bench_dir / "test-4").iterdir()):
        if p.name != "timing.json":
            assert sha(p) == sha(tmp_path / "test-4" / p.name), p.name
