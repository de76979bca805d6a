import json

import pytest

from treevae.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from treevae.io import read_corpus


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--num", "6", "--seed", "3", "--out", str(root / "raw")]) == EXIT_OK
    assert main(["preprocess", "--input", str(root / "raw"), "--max-height", "4", "--out", str(root / "pre")]) == EXIT_OK
    ckpt = root / "model.json"
    assert main(["train", "--corpus", str(root / "pre"), "--out", str(ckpt), "--profile", "desk", "--epochs", "2"]) == EXIT_OK
    return root


def test_preprocess_outputs(workspace):
    pre = workspace / "pre"
    assert (pre / "norm.json").exists() and (pre / "stats.csv").exists()
    trees = read_corpus(pre)
    assert len(trees) == 6 and all(t.height <= 4 for t in trees)
    header = (pre / "stats.csv").read_text().splitlines()[0]
    assert header == "tree,nodes,bifurcations,height"


def test_train_outputs(workspace):
    assert (workspace / "model_loss.csv").read_text().startswith("epoch,recon,topo,kl,total")
    man = json.loads((workspace / "model_manifest.json").read_text())
    assert man["train_config"]["epochs"] == 2 and man["train_config"]["max_height"] == 5
    assert "checkpoint_sha256" in man


def test_generate_is_reproducible(workspace):
    ckpt = str(workspace / "model.json")
    for name in ("g1", "g2"):
        assert main(["generate", "--ckpt", ckpt, "--num", "4", "--seed", "9", "--max-depth", "3", "--out", str(workspace / name)]) == EXIT_OK
    files1 = sorted(p.name for p in (workspace / "g1").glob("*.tree"))
    assert len(files1) == 4
    for n in files1:
        assert (workspace / "g1" / n).read_bytes() == (workspace / "g2" / n).read_bytes()


def test_mesh_and_evaluate(workspace):
    tree = sorted((workspace / "pre").glob("*.tree"))[0]
    out = workspace / "mesh" / "a.obj"
    assert main(["mesh", "--tree", str(tree), "--resolution", "16", "--out", str(out), "--grid-dump", str(workspace / "g.bin")]) == EXIT_OK
    assert out.read_text().startswith("# treevae")
    assert (workspace / "mesh" / "a.obj.manifest.json").exists()
    rc = main(["evaluate", "--real", str(workspace / "pre"), "--gen", str(workspace / "pre"), "--out", str(workspace / "ev")])
    assert rc == EXIT_OK
    text = (workspace / "ev" / "metrics.csv").read_text()
    assert "cs_radius,1.0" in text and "cov,1.0" in text


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["synth-data", "--num", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["mesh", "--tree", "x", "--resolution", "1", "--out", "y"]) == EXIT_USAGE


def test_data_errors(tmp_path, workspace, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--ckpt", str(bad), "--num", "1", "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "corrupt" in capsys.readouterr().err
    assert main(["preprocess", "--input", str(tmp_path / "missing"), "--out", str(tmp_path / "p")]) == EXIT_DATA
    corpus = tmp_path / "c"
    corpus.mkdir()
    (corpus / "a.tree").write_text("format_version: 1\nnodes: x\n")
    assert main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "m.json"), "--epochs", "1"]) == EXIT_DATA
    assert "a.tree" in capsys.readouterr().err


def test_bad_config_is_usage_error(tmp_path, workspace):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nlr = -1\n")
    rc = main(["train", "--config", str(cfg), "--corpus", str(workspace / "pre"), "--out", str(tmp_path / "m.json")])
    assert rc == EXIT_USAGE
