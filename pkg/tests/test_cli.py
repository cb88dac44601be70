import pytest

from dpnpose.cli import main


def test_no_args_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    assert main(["bench", "--bogus", "1"]) == 2


def test_missing_config_names_path(capsys, tmp_path):
    missing = tmp_path / "nope.cfg"
    assert main(["train", "--config", str(missing)]) == 1
    err = capsys.readouterr().err
    assert str(missing) in err and len(err.strip().splitlines()) == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("net.nonsense = 3\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "net.nonsense" in capsys.readouterr().err


def test_bench_size_table(capsys):
    assert main(["bench", "--arch", "both", "--stages", "3,4,5,6", "--no-timing"]) == 0
    out = capsys.readouterr().out
    assert "3 stages" in out and "6 stages" in out
    assert "103.8" in out and "openpose-style" in out and "dpn" in out


def test_bench_writes_files(tmp_path, capsys):
    prefix = tmp_path / "t"
    assert main(["bench", "--arch", "dpn", "--stages", "3", "--no-timing", "--out", str(prefix)]) == 0
    assert (tmp_path / "t_sizes.tsv").read_text().startswith("Method\t3 stages")


def test_train_eval_decode_render(tmp_path, capsys):
    ck, log = tmp_path / "m.ckpt", tmp_path / "log.tsv"
    assert main(["train", "--profile", "tiny", "--steps", "3", "--checkpoint", str(ck),
                 "--log", str(log)]) == 0
    assert ck.exists() and log.read_text().startswith("step\ttotal")
    assert main(["eval", "--profile", "tiny", "--checkpoint", str(ck), "--n-eval", "2"]) == 0
    assert "PCK@0.2" in capsys.readouterr().out
    assert main(["decode", "--profile", "tiny", "--checkpoint", str(ck), "--scene", "0",
                 "--scales", "1,0.75"]) == 0
    assert capsys.readouterr().out.startswith("person\tkeypoint\tx\ty\tscore")
    out = tmp_path / "scenes"
    assert main(["render", "--profile", "tiny", "--out", str(out), "--count", "2"]) == 0
    assert (out / "scene00001.ppm").exists() and (out / "scene00000.txt").exists()
    assert main(["decode", "--profile", "tiny", "--checkpoint", str(ck),
                 "--image", str(out / "scene00001.ppm")]) == 0


def test_corrupt_checkpoint_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--profile", "tiny", "--checkpoint", str(bad)]) == 1
    assert "magic" in capsys.readouterr().err


def test_seed_flag_is_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        assert main(["train", "--profile", "tiny", "--steps", "2", "--seed", "5",
                     "--log", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name).read_text())
    assert outs[0] == outs[1]
