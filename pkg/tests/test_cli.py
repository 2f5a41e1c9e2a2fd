import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from ltw import cli
from ltw import pipeline as pl
from ltw import selector as sel
from ltw.errors import ConfigError
from ltw.token_model import TokenModel, read_corpus, tokenize

SMALL = {
    "corpus": "corpus.txt", "model_file": "model.ngram", "selector_file": "selector.txt",
    "out_dir": "out", "corpus_bytes": "150000", "vocab_cap": "100", "n_prompts": "50",
    "prompt_len": "10", "reference_len": "30", "gen_len": "40", "gen_slack": "5",
    "max_train_len": "15", "checkpoint_every": "4", "lr": "1e-3",
}


def write_conf(path: Path, extra: dict | None = None) -> Path:
    values = {**SMALL, **(extra or {})}
    path.write_text("# small run\n" + "".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


def run(*argv) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A run directory with corpus, language model and trained selector."""
    root = tmp_path_factory.mktemp("cli")
    mp = pytest.MonkeyPatch()
    mp.chdir(root)
    conf = write_conf(root / "small.conf")
    for cmd in ("make-corpus", "train-lm", "train-selector"):
        assert run(cmd, "--config", str(conf)) == 0
    yield root
    mp.undo()


@pytest.fixture
def in_workdir(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    return workdir


def test_config_file_and_overrides(tmp_path):
    conf = tmp_path / "c.conf"
    conf.write_text("# comment\ngamma = 0.5  # trailing\n\nkey = 0x10\n")
    pairs = cli.parse_config_file(conf)
    assert pairs == [("gamma", "0.5"), ("key", "0x10")]
    cfg = cli.RunConfig.from_pairs(pairs)
    assert cfg.gamma == 0.5 and cfg.key == 16
    args = cli.build_parser().parse_args(["eval", "--config", str(conf), "--set", "delta=2",
                                          "--set", "gamma=0.3"])
    cfg = cli.resolve_config(args)
    assert (cfg.gamma, cfg.delta) == (0.3, 2.0)
    again = tmp_path / "echo.conf"
    again.write_text(cfg.dumps())
    assert cli.RunConfig.from_pairs(cli.parse_config_file(again)) == cfg


def test_defaults_match_documented_hyperparameters():
    cfg = cli.RunConfig()
    assert (cfg.gamma, cfg.delta, cfg.top_k, cfg.top_p, cfg.no_repeat) == (0.25, 3.0, 100, 0.95, 8)
    assert (cfg.lr, cfg.batch, cfg.max_train_len, cfg.epochs) == (1e-4, 5, 75, 1)
    assert (cfg.gen_len, cfg.gen_slack) == (200, 25)


@pytest.mark.parametrize("pairs", [[("gamma", "1.0")], [("delta", "-1")], [("nope", "1")],
                                   [("gamma", "abc")], [("batch", "0")]])
def test_invalid_config_rejected(pairs):
    with pytest.raises(ConfigError):
        cli.RunConfig.from_pairs(pairs)


def test_invalid_input_exits_1(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run("train-lm", "--set", "corpus=missing.txt") == 1
    assert run("eval", "--set", "gamma=2") == 1
    assert run("eval", "--set", "gamma") == 1
    (tmp_path / "bad.conf").write_text("just words\n")
    assert run("eval", "--config", "bad.conf") == 1
    assert "error:" in capsys.readouterr().err


def test_train_lm_outputs(in_workdir):
    model = TokenModel.load("model.ngram")
    report = dict(line.split() for line in Path("out/train_lm.txt").read_text().splitlines())
    assert int(report["vocab_size"]) == model.vocab_size == 103
    assert math.isfinite(float(report["heldout_perplexity"]))
    # independent UNK count: tokens outside the 100 most frequent types (ties broken by token)
    cfg = cli.RunConfig.from_pairs(cli.parse_config_file("small.conf"))
    train = cli._split(cfg, read_corpus("corpus.txt")).train_docs
    counts = Counter(t for d in train for t in tokenize(d))
    kept = {t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:100]}
    unk = sum(n for t, n in counts.items() if t not in kept) / sum(counts.values())
    assert unk > 0
    assert float(report["unk_fraction"]) == pytest.approx(unk, abs=1e-6)


def test_config_echo_written(in_workdir):
    echo = Path("out/config.train-lm.txt")
    cfg = cli.RunConfig.from_pairs(cli.parse_config_file(echo))
    assert cfg == cli.RunConfig.from_pairs(cli.parse_config_file("small.conf"))


def test_training_outputs(in_workdir):
    rows = Path("out/history.csv").read_text().splitlines()
    assert rows[0] == "step,L_Q,L_D,z_mean,lambda_star,wall_ms"
    assert [int(r.split(",")[0]) for r in rows[1:]] == list(range(1, len(rows)))
    ckpts = sorted(p.name for p in Path("out/checkpoints").iterdir())
    assert ckpts == [f"selector_step{s:06d}.txt" for s in range(4, len(rows), 4)]
    assert sel.load("selector.txt") != sel.init(seed=0)


def test_zero_epochs_writes_initial_weights(in_workdir, tmp_path):
    target = tmp_path / "init.txt"
    assert run("train-selector", "--config", "small.conf", "--set", "epochs=0",
               "--set", f"selector_file={target}", "--set", f"out_dir={tmp_path / 'o'}") == 0
    assert sel.load(target) == sel.init(seed=0)


def test_training_is_seed_deterministic(in_workdir, tmp_path):
    outs = []
    for name in ("a", "b"):
        target = tmp_path / f"{name}.txt"
        assert run("train-selector", "--config", "small.conf", "--set", f"selector_file={target}",
                   "--set", f"out_dir={tmp_path / name}") == 0
        outs.append(target.read_bytes())
    assert outs[0] == outs[1] == Path("selector.txt").read_bytes()


def test_divergence_exits_2_and_keeps_last_good(in_workdir, tmp_path):
    out = tmp_path / "div"
    code = run("train-selector", "--config", "small.conf", "--set", "delta=nan",
               "--set", f"out_dir={out}", "--set", f"selector_file={tmp_path / 's.txt'}")
    assert code == 2
    assert sel.load(out / "selector_last_good.txt") == sel.init(seed=0)
    assert not (tmp_path / "s.txt").exists()


def test_detect_on_records_matches_audit(in_workdir, tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--config", "small.conf", "--set", "n_prompts=5",
               "--set", f"out_dir={out}") == 0
    records = sorted((out / "records").iterdir())
    assert len(records) == 5
    for path in records:
        rec = pl.load_record(path)
        assert run("detect", "--config", "small.conf", "--input", str(path),
                   "--set", f"out_dir={out}") == 0
        report = dict(line.split(" ", 1) for line in (out / "detection.txt").read_text()
                      .splitlines())
        assert float(report["z"]) == rec.audit_z(0.25)
        assert int(report["n_scored"]) == rec.n_scored


def test_wrong_key_scores_near_zero(in_workdir, tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--config", "small.conf", "--set", f"out_dir={out}") == 0
    records = sorted((out / "records").iterdir())
    assert len(records) == 50
    right, wrong = [], []
    for path in records:
        for key, bucket in (("15485863", right), ("12345", wrong)):
            run("detect", "--config", "small.conf", "--input", str(path),
                "--set", f"key={key}", "--set", f"out_dir={tmp_path / 'det'}")
            z = float((tmp_path / "det" / "detection.txt").read_text().split()[1])
            if not math.isnan(z):
                bucket.append(z)
    assert abs(np.mean(wrong)) <= 1.0
    assert np.mean(right) > np.mean(wrong) + 1.0


def test_generate_from_prompt_and_detect_text(in_workdir, tmp_path, capsys):
    out = tmp_path / "p"
    assert run("generate", "--config", "small.conf", "--prompt", "the old",
               "--set", f"out_dir={out}", "--set", "mode=always_on") == 0
    rec = pl.load_record(out / "records" / "record_0000.txt")
    assert len(rec.prompt) == 2
    model = TokenModel.load("model.ngram")
    text = tmp_path / "t.txt"
    text.write_text(cli.dumps_text(rec.full, 2, model.vocab))
    assert cli.load_scored_text(text) == (rec.full, 2)
    assert run("detect", "--config", "small.conf", "--input", str(text), "--set", "mode=always_on",
               "--set", f"out_dir={out}") == 0
    assert (out / "detection.txt").read_text().splitlines()[1] == f"n_scored {len(rec.output)}"
    # a prompt-only text has nothing to score: reported, not an error
    assert run("detect", "--config", "small.conf", "--input", str(text), "--prompt-len",
               str(len(rec.full)), "--set", f"out_dir={out}") == 0
    assert (out / "detection.txt").read_text().startswith("z nan\n")
    bad = tmp_path / "bad.txt"
    bad.write_text("what\n")
    assert run("detect", "--config", "small.conf", "--input", str(bad)) == 1
    capsys.readouterr()


def test_attack_command(in_workdir, tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--config", "small.conf", "--set", "n_prompts=1",
               "--set", f"out_dir={out}") == 0
    src = out / "records" / "record_0000.txt"
    assert run("attack", "--config", "small.conf", "--input", str(src), "--set", "attack_rate=0.5",
               "--set", f"out_dir={out}") == 0
    ids, plen = cli.load_scored_text(out / "attacked_record_0000.txt")
    rec = pl.load_record(src)
    assert ids[:plen] == rec.prompt and len(ids) == len(rec.full)
    assert ids != rec.full


def test_eval_reports_every_mode(in_workdir, tmp_path):
    out = tmp_path / "ev"
    assert run("eval", "--config", "small.conf", "--set", "n_prompts=6",
               "--set", "modes=ltw,always_on,entropy:1.2", "--set", f"out_dir={out}") == 0
    summary = (out / "summary.txt").read_text()
    for label in ("[ltw] prompts=6", "[always_on] prompts=6", "[entropy:1.2] prompts=6"):
        assert label in summary
    rows = (out / "report.csv").read_text().splitlines()
    assert len(rows) == 1 + 18 and rows[0].startswith("prompt_id,mode,")
