import subprocess
import sys

import pytest

from kroncov.cli import main
from kroncov.io_formats import read_model, read_tracks

SMALL = ["--grid", "2x2", "--T", "3", "--frames", "6", "--n-train", "40", "--n-test", "20"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("simulate", *SMALL, "--seed", 3, "--out", root / "data") == 0
    assert run("fit", "--train", root / "data/train.ftrk", "--model", root / "m.json", "--T", 3, "--levels", 2) == 0
    assert run("classify", "--model", root / "m.json", "--test", root / "data/test.ftrk", "--out", root / "r.csv") == 0
    return root


def test_simulate_writes_balanced_sets(pipeline):
    train = read_tracks(pipeline / "data/train.ftrk")
    test = read_tracks(pipeline / "data/test.ftrk")
    assert len(train) == 40 and len(test) == 20
    assert sum(t.label for t in train) == 20
    assert all(t.n_frames == 6 and t.grid.shape == (2, 2) for t in train)
    assert not {t.track_id for t in train} & {t.track_id for t in test}


def test_simulate_deterministic(pipeline, tmp_path):
    assert run("simulate", *SMALL, "--seed", 3, "--out", tmp_path / "d") == 0
    for name in ("train.ftrk", "test.ftrk"):
        assert (tmp_path / "d" / name).read_bytes() == (pipeline / "data" / name).read_bytes()


def test_simulate_p_mismatch(tmp_path, capsys):
    assert run("simulate", *SMALL, "--p", 5, "--out", tmp_path / "d") == 2
    assert "does not match grid" in capsys.readouterr().err


def test_fit_records_rank_and_refit_identical(pipeline, tmp_path):
    clf = read_model(pipeline / "m.json")
    assert clf.config.target_rank == 2
    assert all(m.rank <= 2 for k in (0, 1) for m in clf.models.models[k])
    assert run("fit", "--train", pipeline / "data/train.ftrk", "--model", tmp_path / "m.json", "--T", 3, "--levels", 2) == 0
    assert (tmp_path / "m.json").read_bytes() == (pipeline / "m.json").read_bytes()


def test_overall_flag_matches_single_level(pipeline, tmp_path):
    train = pipeline / "data/train.ftrk"
    assert run("fit", "--train", train, "--model", tmp_path / "o.json", "--T", 3, "--overall") == 0
    assert run("fit", "--train", train, "--model", tmp_path / "l.json", "--T", 3, "--levels", 1, "--overall") == 0
    assert (tmp_path / "o.json").read_bytes() == (tmp_path / "l.json").read_bytes()
    clf = read_model(tmp_path / "o.json")
    assert clf.method == "overall-llr" and list(clf.weights) == [1.0] and clf.intercept == 0.0


def test_fit_rejects_rank_and_beta(pipeline):
    with pytest.raises(SystemExit) as info:
        run("fit", "--train", pipeline / "data/train.ftrk", "--model", "x.json", "--rank", 2, "--beta", 0.1)
    assert info.value.code == 1


def test_fit_insufficient_data(tmp_path, capsys):
    (tmp_path / "t.ftrk").write_text(
        "ftrk 1 p=1 grid=1 id=a label=0\n1\n\nftrk 1 p=1 grid=1 id=b label=0\n2\n\nftrk 1 p=1 grid=1 id=c label=1\n3\n"
    )
    assert run("fit", "--train", tmp_path / "t.ftrk", "--model", tmp_path / "m.json", "--T", 1, "--levels", 1) == 2
    assert "class 1" in capsys.readouterr().err


def test_classify_and_eval(pipeline, capsys):
    text = (pipeline / "r.csv").read_text().splitlines()
    assert text[0] == "track_id,true_label,predicted_label,score,llr_0,llr_1,llr_2"
    assert len(text) == 21
    assert run("eval", pipeline / "r.csv") == 0
    out = capsys.readouterr().out
    assert "confusion" in out
    assert out.strip().splitlines()[-1].startswith("accuracy=")


def test_classify_empty_test_file(pipeline, tmp_path):
    (tmp_path / "e.ftrk").write_text("")
    assert run("classify", "--model", pipeline / "m.json", "--test", tmp_path / "e.ftrk", "--out", tmp_path / "r.csv") == 0
    assert (tmp_path / "r.csv").read_text() == "track_id,true_label,predicted_label,score,llr_0,llr_1,llr_2\n"


def test_classify_reports_short_tracks(pipeline, tmp_path, capsys):
    (tmp_path / "s.ftrk").write_text("ftrk 1 p=4 grid=2x2 id=short label=1\n1 2 3 4\n")
    assert run("classify", "--model", pipeline / "m.json", "--test", tmp_path / "s.ftrk", "--out", tmp_path / "r.csv") == 0
    assert "skipped short: 1 frames < T=3" in capsys.readouterr().err


def test_classify_dimension_mismatch(pipeline, tmp_path, capsys):
    (tmp_path / "w.ftrk").write_text("ftrk 1 p=3 grid=3 id=w label=1\n1 2 3\n1 2 3\n1 2 3\n")
    assert run("classify", "--model", pipeline / "m.json", "--test", tmp_path / "w.ftrk", "--out", tmp_path / "r.csv") == 2
    err = capsys.readouterr().err
    assert "p=4" in err and "p=3" in err


def test_classify_separable_training_set(tmp_path, capsys):
    sim = ["--grid", "2", "--T", "2", "--frames", "8", "--n-train", "60", "--n-test", "2", "--separation", "6"]
    assert run("simulate", *sim, "--out", tmp_path / "d") == 0
    assert run("fit", "--train", tmp_path / "d/train.ftrk", "--model", tmp_path / "m.json", "--T", 2, "--levels", 2) == 0
    assert run("classify", "--model", tmp_path / "m.json", "--test", tmp_path / "d/train.ftrk", "--out", tmp_path / "r.csv") == 0
    capsys.readouterr()
    assert run("eval", tmp_path / "r.csv") == 0
    assert "accuracy=1.0" in capsys.readouterr().out


def write_csv(path, pairs):
    lines = ["track_id,true_label,predicted_label,score"]
    lines += [f"t{i},{t},{p},{1.0 if p else -1.0}" for i, (t, p) in enumerate(pairs)]
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize(
    "pairs,expected",
    [
        ([(0, 0), (1, 1), (1, 1)], "accuracy=1.0"),
        ([(0, 0), (0, 1), (1, 1), (1, 0)], "accuracy=0.5"),
        # hand count: 7 of 10 correct, class 0 3/5, class 1 4/5
        ([(0, 0), (0, 0), (0, 0), (0, 1), (0, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 0)], "accuracy=0.7"),
    ],
)
def test_eval_fixtures(tmp_path, capsys, pairs, expected):
    write_csv(tmp_path / "r.csv", pairs)
    assert run("eval", tmp_path / "r.csv") == 0
    assert expected in capsys.readouterr().out


def test_eval_hand_counts(tmp_path, capsys):
    pairs = [(0, 0), (0, 0), (0, 0), (0, 1), (0, 1), (1, 1), (1, 1), (1, 1), (1, 1), (1, 0)]
    write_csv(tmp_path / "r.csv", pairs)
    run("eval", tmp_path / "r.csv")
    out = capsys.readouterr().out
    assert "class 0: 3/5" in out and "class 1: 4/5" in out
    assert "  0: 3 2" in out and "  1: 1 4" in out


def test_eval_requires_truth(tmp_path, capsys):
    (tmp_path / "r.csv").write_text("track_id,predicted_label,score\na,1,0.5\n")
    assert run("eval", tmp_path / "r.csv") == 2
    assert "true_label" in capsys.readouterr().err


def test_missing_input_is_usage_error(tmp_path):
    assert run("eval", tmp_path / "nope.csv") == 1
    assert run("inspect", tmp_path / "nope.json") == 1


def test_unreadable_model(tmp_path):
    (tmp_path / "bad.json").write_text("{ not json")
    assert run("inspect", tmp_path / "bad.json") == 2


def test_inspect(pipeline, capsys):
    assert run("inspect", pipeline / "m.json") == 0
    out = capsys.readouterr().out
    assert "blocks=3" in out and "rho=" in out and "eig_floor_applied=" in out
    clf = read_model(pipeline / "m.json")
    m = clf.models.models[0][0]
    assert f"rank={m.rank}" in out
    assert out.count("factor ") >= m.rank


def test_sweep_reproducible(tmp_path):
    args = ["sweep", "--grid", "2x2", "--frames", "6", "--n-values", "20", "--T-values", "1,2",
            "--trials", "1", "--n-test", "20", "--levels", "2", "--seed", "5"]
    assert run(*args, "--out", tmp_path / "a.csv") == 0
    assert run(*args, "--out", tmp_path / "b.csv") == 0
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    lines = a.splitlines()
    assert lines[0] == "method,T,n,trial,accuracy"
    assert [l.split(",")[:4] for l in lines[1:]] == [
        ["logistic-llr", "1", "20", "0"],
        ["logistic-llr", "2", "20", "0"],
        ["overall-llr", "1", "20", "0"],
        ["overall-llr", "2", "20", "0"],
    ]


def test_sweep_rejects_unknown_method(tmp_path):
    assert run("sweep", "--methods", "svm", "--out", tmp_path / "s.csv") == 2


def test_entry_point_usage_exit_code():
    proc = subprocess.run([sys.executable, "-m", "kroncov.cli", "fit"], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "required" in proc.stderr
