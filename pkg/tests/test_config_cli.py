import json

import pytest

from musit.cli import main
from musit.config import ConfigError, RunConfig, load_config


def test_defaults_round_trip(tmp_path):
    cfg = load_config()
    p = tmp_path / "c.json"
    p.write_text(cfg.dump())
    assert load_config(p) == cfg
    assert cfg.sampler_config().kind == "ode_heun"
    assert load_config(overrides={"path": "mudit"}).sampler_config().kind == "ddim"


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "train": {"vae": {"steps": 10}}}))
    cfg = load_config(p, {"seed": 9, "train.vae.lr": 0.5, "sampler.steps": 7})
    assert cfg.seed == 9 and cfg.train.vae.steps == 10 and cfg.train.vae.lr == 0.5
    assert cfg.sampler_config().steps == 7
    assert cfg.train_config("vae").steps == 10


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"vae": {"r": 6}},
    {"backbone": {"d_model": 10, "n_heads": 4}},
    {"path": "other"},
    {"sampler": {"kind": "euler"}},
    {"train": {"finetune": {"lyric_dropout": 2.0}}},
])
def test_invalid_configs(tmp_path, data):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(data))
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_runconfig_is_frozen():
    with pytest.raises(Exception):
        RunConfig().seed = 4


def test_cli_usage_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["corpus"]) == 1
    assert main(["frobnicate", "--out", str(tmp_path)]) == 1
    assert main(["generate", "--out", str(tmp_path), "--checkpoints", str(tmp_path)]) == 1
    assert main(["--help"]) == 0


def test_cli_validation_errors(tmp_path):
    out = str(tmp_path / "o")
    assert main(["corpus", "--out", out, "--config", str(tmp_path / "none.json")]) == 1
    assert main(["corpus", "--out", out, "--n", "0"]) == 1
    assert main(["generate", "--out", out, "--checkpoints", str(tmp_path), "--description", "x"]) == 1
    assert main(["train-vae", "--out", out, "--corpus", str(tmp_path)]) == 1


def test_cli_generate_errors(tiny_ckpt, tmp_path):
    base = ["generate", "--out", str(tmp_path / "g"), "--checkpoints", str(tiny_ckpt), "--sampler-steps", "2"]
    assert main(base + ["--description", "x", "--lyrics", str(tmp_path / "missing.txt")]) == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("<chorus>\n<verse>\nla\n")
    assert main(base + ["--description", "x", "--lyrics", str(bad)]) == 1
    assert main(base + ["--description", "x", "--duration", "30"]) == 1
    assert main(base + ["--description", "x", "--sampler", "ddim"]) == 1


def test_cli_runtime_failure_exit_code(tmp_path, monkeypatch):
    import musit.corpus

    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(musit.corpus, "make_corpus", boom)
    assert main(["corpus", "--out", str(tmp_path), "--n", "1"]) == 2


def test_cli_generate_writes_outputs(tiny_ckpt, tmp_path):
    lyr = tmp_path / "l.txt"
    lyr.write_text("<verse>\n花\n<chorus>\n花\n", encoding="utf-8")
    out = tmp_path / "g"
    code = main(["generate", "--out", str(out), "--checkpoints", str(tiny_ckpt), "--description", "sad rainy mood",
                 "--lyrics", str(lyr), "--duration", "3", "--sampler-steps", "2", "--seed", "5"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["seed"] == 5 and report["structure"]["score"] == 1.0
    for name in ("out.wav", "out_mel.pgm", "out_mel.png", "out_latent.csv", "config.resolved.json"):
        assert (out / name).exists()


def test_cli_train_and_eval(tmp_path, corpus8):
    from musit.corpus import write_corpus
    corpus = tmp_path / "corpus"
    write_corpus(corpus8[:2], corpus)
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({"vae": {"hidden": 16, "blocks": 1},
                               "encoder": {"width": 16, "layers": 1, "heads": 2, "d_e": 16},
                               "backbone": {"d_model": 16, "n_layers": 1, "n_heads": 2, "time_freq_dim": 16},
                               "generate": {"invert_iters": 2}}))
    ck = tmp_path / "ck"
    common = ["--config", str(cfg), "--out", str(ck), "--corpus", str(corpus), "--steps", "2"]
    for cmd in ("train-vae", "train-encoder", "pretrain", "finetune"):
        assert main([cmd] + common) == 0
    assert (ck / "pretrain_loss.png").exists()
    ev = tmp_path / "ev"
    assert main(["eval", "--config", str(cfg), "--out", str(ev), "--corpus", str(corpus), "--checkpoints", str(ck),
                 "--n", "2", "--sampler-steps", "2"]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert metrics["n"] == 2
    assert (ev / "alignment.csv").read_text().count("\n") == 3
