import csv
import json

import numpy as np
import pytest

import seqhash.cli as cli
from seqhash.errors import NumericError
from seqhash.formats import read_codes, read_features, read_graph, read_labels, write_codes, write_features, write_labels
from seqhash.neighborhood import build_graph, build_graph_sharded, mean_pool
from seqhash.retrieval import RetrievalDB, rank

SMALL = ["--code-len", "8", "--hidden1", "6", "--hidden2", "6", "--batch", "10"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    out = tmp_path / "data"
    assert run("gen-data", "--n", 30, "--clusters", 3, "--m", 4, "--d", 6, "--seed", 42, "--out", out) == 0
    return out / "features.ssvh", out / "labels.ssvh"


@pytest.fixture
def graph(tmp_path, data):
    g = tmp_path / "g.nbrg"
    assert run("build-graph", "--features", data[0], "--k1", 4, "--k2", 3, "--out", g) == 0
    return g


@pytest.fixture
def ckpt(tmp_path, data, graph):
    p = tmp_path / "m.ckpt"
    assert run("train", "--features", data[0], "--graph", graph, "--epochs", 2, "--out", p, *SMALL) == 0
    return p


class TestGenData:
    def test_files_and_manifest(self, data):
        feat, labl = data
        assert read_features(feat).shape == (30, 4, 6)
        assert len(read_labels(labl)) == 30
        manifest = json.loads((feat.parent / "manifest.json").read_text())
        assert manifest["command"] == "gen-data" and manifest["seed"] == 42
        assert manifest["config"]["n_videos"] == 30

    def test_same_flags_same_bytes(self, tmp_path, data):
        assert run("gen-data", "--n", 30, "--clusters", 3, "--m", 4, "--d", 6, "--seed", 42, "--out", tmp_path / "again") == 0
        assert (tmp_path / "again" / "features.ssvh").read_bytes() == data[0].read_bytes()

    def test_invalid_combination(self, tmp_path, capsys):
        assert run("gen-data", "--n", 2, "--clusters", 5, "--out", tmp_path / "x") == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("gen-data", "--bogus")
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err


class TestBuildGraph:
    def test_defaults_recorded(self, tmp_path):
        feat = tmp_path / "f.ssvh"
        write_features(np.random.default_rng(0).standard_normal((25, 2, 3)), feat)
        out = tmp_path / "g"
        assert run("build-graph", "--features", feat, "--out", out) == 0
        manifest = json.loads((tmp_path / "g.manifest.json").read_text())
        assert manifest["config"]["k1"] == 20 and manifest["config"]["k2"] == 10

    def test_matches_in_memory(self, data, graph):
        assert read_graph(graph) == build_graph(mean_pool(read_features(data[0])), 4, 3)

    def test_shards(self, tmp_path):
        feat = tmp_path / "f.ssvh"
        x = np.random.default_rng(0).standard_normal((45, 2, 3))
        write_features(x, feat)
        out = tmp_path / "g"
        assert run("build-graph", "--features", feat, "--k1", 2, "--k2", 1, "--shards", 9, "--out", out) == 0
        assert read_graph(out) == build_graph_sharded(mean_pool(read_features(feat)), 2, 1, 9)

    def test_k1_too_large(self, data, tmp_path, capsys):
        assert run("build-graph", "--features", data[0], "--k1", 30, "--out", tmp_path / "g") == 1
        assert "K1" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert run("build-graph", "--features", tmp_path / "nope", "--out", tmp_path / "g") == 2


class TestTrain:
    def test_checkpoint_and_csv(self, ckpt):
        rows = list(csv.DictReader(open(cli.loss_csv_path(ckpt))))
        assert [int(r["epoch"]) for r in rows] == [0, 1]
        for r in rows:
            assert abs(float(r["total"]) - (0.001 * float(r["recon"]) + 0.999 * float(r["neighbor"]))) < 1e-12

    def test_lambda_one(self, tmp_path, data, graph):
        p = tmp_path / "l1.ckpt"
        assert run("train", "--features", data[0], "--graph", graph, "--epochs", 1, "--lambda", 1.0, "--out", p, *SMALL) == 0
        for r in csv.DictReader(open(cli.loss_csv_path(p))):
            assert float(r["total"]) == float(r["recon"])

    def test_resume_numbering(self, tmp_path, data, graph, ckpt):
        p = tmp_path / "r.ckpt"
        assert run("train", "--features", data[0], "--graph", graph, "--resume", ckpt, "--epochs", 2, "--out", p) == 0
        rows = list(csv.DictReader(open(cli.loss_csv_path(p))))
        assert [int(r["epoch"]) for r in rows] == [0, 1, 2, 3]

    def test_inconsistent_n(self, tmp_path, data):
        feat = tmp_path / "f.ssvh"
        write_features(read_features(data[0])[:20], feat)
        g = tmp_path / "g"
        run("build-graph", "--features", feat, "--k1", 3, "--k2", 2, "--out", g)
        assert run("train", "--features", data[0], "--graph", g, "--out", tmp_path / "m", *SMALL) == 1

    def test_config_precedence(self, tmp_path, data, graph):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"eta": 0.5, "epochs": 1, "lambda": 0.25, "code_len": 12}))
        p = tmp_path / "m"
        assert run("train", "--features", data[0], "--graph", graph, "--config", cfg, "--eta", 0.1, "--out", p, "--hidden1", 4, "--hidden2", 4) == 0
        resolved = json.loads((tmp_path / "m.manifest.json").read_text())["config"]
        assert resolved["eta"] == 0.1  # flag beats file
        assert resolved["lam"] == 0.25 and resolved["code_len"] == 12  # file beats default
        assert resolved["batch_size"] == 256 and resolved["effective_batch_size"] == 30

    def test_unknown_config_key(self, tmp_path, data, graph):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"momentum": 0.9}))
        assert run("train", "--features", data[0], "--graph", graph, "--config", cfg, "--out", tmp_path / "m") == 1

    def test_numeric_failure_exit_code(self, tmp_path, data, graph, monkeypatch):
        def boom(*a, **k):
            raise NumericError("epoch 0 batch 0: non-finite neighbor loss")

        monkeypatch.setattr(cli, "train", boom)
        assert run("train", "--features", data[0], "--graph", graph, "--out", tmp_path / "m", *SMALL) == 3

    def test_threads_env(self, tmp_path, data, graph, monkeypatch):
        monkeypatch.setenv("SSVH_THREADS", "3")
        p = tmp_path / "m"
        assert run("train", "--features", data[0], "--graph", graph, "--epochs", 1, "--out", p, *SMALL) == 0
        assert json.loads((tmp_path / "m.manifest.json").read_text())["config"]["threads"] == 3


class TestEncodeRetrieveEval:
    def test_encode_twice_identical(self, tmp_path, data, ckpt):
        a, b = tmp_path / "a.code", tmp_path / "b.code"
        assert run("encode", "--checkpoint", ckpt, "--features", data[0], "--out", a) == 0
        assert run("encode", "--checkpoint", ckpt, "--features", data[0], "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()
        db = read_codes(a)
        assert db.n == 30 and db.packed.shape == (30, 1)

    def test_encode_dim_mismatch(self, tmp_path, ckpt, capsys):
        feat = tmp_path / "f.ssvh"
        write_features(np.zeros((3, 4, 5)), feat)
        assert run("encode", "--checkpoint", ckpt, "--features", feat, "--out", tmp_path / "c") == 2
        assert "checkpoint expects" in capsys.readouterr().err

    def _codes(self, tmp_path):
        codes = np.where(np.random.default_rng(4).random((12, 16)) < 0.5, -1, 1)
        p = tmp_path / "c.code"
        write_codes(RetrievalDB.from_codes(codes), p)
        return p, codes

    def _parse(self, out):
        lines = out.strip().splitlines()[1:]
        return [tuple(int(v) for v in ln.split("\t")) for ln in lines]

    def test_retrieve_matches_rank(self, tmp_path, capsys):
        p, codes = self._codes(tmp_path)
        assert run("retrieve", "--codes", p, "--query-index", 5, "--topk", 4) == 0
        got = self._parse(capsys.readouterr().out)
        r = rank(codes[5], RetrievalDB.from_codes(codes))
        assert got[0][1] == 5
        assert [g[1] for g in got] == r.indices[:4].tolist()
        assert [g[2] for g in got] == r.distances[:4].tolist()

    def test_retrieve_exclude_self(self, tmp_path, capsys):
        p, _ = self._codes(tmp_path)
        assert run("retrieve", "--codes", p, "--query-index", 5, "--exclude-self") == 0
        got = self._parse(capsys.readouterr().out)
        assert 5 not in [g[1] for g in got] and len(got) == 11

    def test_retrieve_topk_too_large(self, tmp_path, capsys):
        p, _ = self._codes(tmp_path)
        assert run("retrieve", "--codes", p, "--query-index", 0, "--topk", 50) == 0
        cap = capsys.readouterr()
        assert len(self._parse(cap.out)) == 12
        assert "warning" in cap.err

    def test_retrieve_bad_index(self, tmp_path):
        p, _ = self._codes(tmp_path)
        assert run("retrieve", "--codes", p, "--query-index", 12) == 1

    def test_eval_perfect_separation_and_csv(self, tmp_path, capsys):
        c = np.where(np.arange(16) < 8, 1, -1)
        codes = np.concatenate([np.tile(c, (6, 1)), np.tile(-c, (6, 1))])
        p, lp, out = tmp_path / "c", tmp_path / "l", tmp_path / "e.csv"
        write_codes(RetrievalDB.from_codes(codes), p)
        write_labels(np.repeat([0, 1], 6), lp)
        assert run("eval", "--codes", p, "--labels", lp, "--topk", "1,5", "--csv", out) == 0
        assert "mAP@5" in capsys.readouterr().out
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["queries", "map@1", "map@5"]
        assert [float(v) for v in rows[1][1:]] == [1.0, 1.0]

    def test_eval_default_ks(self, tmp_path, capsys):
        p, _ = self._codes(tmp_path)
        lp = tmp_path / "l"
        write_labels(np.arange(12) % 3, lp)
        out = tmp_path / "e.csv"
        assert run("eval", "--codes", p, "--labels", lp, "--csv", out) == 0
        assert next(csv.reader(open(out)))[1:] == [f"map@{k}" for k in (5, 10, 20, 40, 60, 80, 100)]

    def test_eval_csv_round_trips_numbers(self, tmp_path, data, ckpt):
        codes = tmp_path / "c"
        run("encode", "--checkpoint", ckpt, "--features", data[0], "--out", codes)
        out = tmp_path / "e.csv"
        assert run("eval", "--codes", codes, "--labels", data[1], "--topk", "5,10", "--csv", out) == 0
        from seqhash.retrieval import map_table

        ref = map_table(read_codes(codes, read_labels(data[1])), (5, 10)).values
        row = list(csv.reader(open(out)))[1]
        assert [float(v) for v in row[1:]] == [ref[5], ref[10]]

    def test_eval_wrong_file_type(self, data):
        assert run("eval", "--codes", data[1], "--labels", data[1]) == 2


class TestSweep:
    def test_lambda_grid_six_rows(self, tmp_path, data, capsys):
        out = tmp_path / "sw"
        assert run("sweep", "--param", "lambda", "--features", data[0], "--labels", data[1], "--k1", 4, "--k2", 3,
                   "--epochs", 1, "--topk", "5", "--out", out, *SMALL) == 0
        rows = list(csv.reader(open(out / "sweep.csv")))
        assert [r[0] for r in rows[1:]] == ["0", "0.0001", "0.001", "0.01", "0.1", "1"]
        m = json.loads((out / "lambda=0.01" / "manifest.json").read_text())
        assert m["config"]["value"] == 0.01 and m["config"]["lam"] == 0.01
        for r in csv.DictReader(open(out / "lambda=0.01" / "loss.csv")):
            assert abs(float(r["total"]) - (0.01 * float(r["recon"]) + 0.99 * float(r["neighbor"]))) < 1e-12

    def test_k_rows_mirror_table_layout(self, tmp_path, data):
        out = tmp_path / "sw"
        assert run("sweep", "--param", "k2", "--values", "2,5", "--k1", 3, "--features", data[0], "--labels", data[1],
                   "--epochs", 1, "--topk", "5,10", "--out", out, *SMALL) == 0
        rows = list(csv.reader(open(out / "sweep.csv")))
        assert rows[0] == ["K1_K2", "map@5", "map@10"]
        assert [r[0] for r in rows[1:]] == ["3_2", "3_5"]
        assert json.loads((out / "k2=3_5" / "manifest.json").read_text())["config"]["k2"] == 5

    def test_bad_values(self, tmp_path, data):
        assert run("sweep", "--param", "k1", "--values", "a,b", "--features", data[0], "--labels", data[1], "--out", tmp_path) == 1
