"""Command-line front end.

Every subcommand reads one flat ``key = value`` config file (optional) plus
``--set key=value`` overrides, writes the fully resolved config into the
output directory, and derives all randomness from the ``seed`` key.

Exit codes: 0 on success, 1 on invalid input or configuration, 2 on a
runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ltw import corpus as corpus_mod
from ltw import evalkit as ek
from ltw import pipeline as pl
from ltw import selector as sel
from ltw import trainer as tr
from ltw.errors import ConfigError, FormatError, LTWError, TrainingDiverged, UndetectableError
from ltw.partition import HashScheme
from ltw.token_model import (UNK_ID, SamplerConfig, TokenModel, fit_ngram, perplexity,
                             read_corpus, tokenize)

log = logging.getLogger("ltw")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
TEXT_HEADER = "LTW-TEXT v1"


@dataclass
class RunConfig:
    # paths
    corpus: str = "corpus.txt"
    model_file: str = "model.ngram"
    selector_file: str = "selector.txt"
    out_dir: str = "run"
    corpus_bytes: int = 1_200_000
    # language model
    lm_order: int = 2
    lm_alpha: float = 0.1
    vocab_cap: int = 2000
    # watermark
    scheme: str = "context"
    key: int = 15485863
    gamma: float = 0.25
    delta: float = 3.0
    # sampler
    top_k: int = 100
    top_p: float = 0.95
    no_repeat: int = 8
    temperature: float = 1.0
    # selector and threshold policy
    dim: int = 64
    h1: int = 32
    h2: int = 8
    h3: int = 8
    window: int = 6
    tau_low: float = 0.40
    tau_mid: float = 0.50
    tau_high: float = 0.60
    low_band: float = 0.35
    high_band: float = 0.65
    # losses
    lambda_sim: float = 1.0
    lambda_entropy: float = 1.0
    lambda_fix: float = 1.0
    lambda_z: float = 0.05
    lambda_wm: float = 1.0
    lambda_e: float = 2.0
    mu_e: float = 1.2
    ratio_fn: str = "linear"
    # training
    lr: float = 1e-4
    batch: int = 5
    max_train_len: int = 75
    epochs: int = 1
    checkpoint_every: int = 200
    # evaluation
    n_prompts: int = 200
    prompt_len: int = 20
    reference_len: int = 200
    gen_len: int = 200
    gen_slack: int = 25
    attack_rates: str = "0.05,0.1,0.2"
    attack_rate: float = 0.1
    modes: str = "ltw,always_on"
    mode: str = "ltw"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")
        for name in ("epochs", "n_prompts", "prompt_len", "gen_len", "gen_slack"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch < 1 or self.window < 1 or self.prompt_len < 1:
            raise ConfigError("batch, window and prompt_len must be >= 1")

    # -- parsing ----------------------------------------------------------

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "RunConfig":
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in pairs:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kind = type(getattr(defaults, key))
            try:
                values[key] = kind(raw) if kind is not int else int(raw, 0)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**values)

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    # -- views ------------------------------------------------------------

    @property
    def hash_scheme(self) -> HashScheme:
        return HashScheme.parse(self.scheme, self.key)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.top_k, self.top_p, self.no_repeat, self.temperature)

    @property
    def policy(self) -> sel.ThresholdPolicy:
        return sel.ThresholdPolicy(self.tau_low, self.tau_mid, self.tau_high,
                                   self.low_band, self.high_band)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.dim, self.h1, self.h2, self.h3)

    def train_config(self) -> tr.TrainConfig:
        weights = tr.LossWeights(self.lambda_sim, self.lambda_entropy, self.lambda_fix,
                                 self.lambda_z, self.lambda_wm, self.lambda_e, self.mu_e)
        return tr.TrainConfig(self.gamma, self.delta, self.hash_scheme, self.sampler, weights,
                              self.ratio_fn, self.lr, self.batch, self.max_train_len,
                              self.window, self.seed, self.checkpoint_every)

    def eval_config(self, attack_rates: Sequence[float] | None = None) -> ek.EvalConfig:
        rates = self.rates if attack_rates is None else tuple(attack_rates)
        return ek.EvalConfig(self.gamma, self.delta, self.hash_scheme, self.sampler, self.policy,
                             self.window, self.gen_len, self.gen_slack, rates, True, self.seed)

    @property
    def rates(self) -> tuple[float, ...]:
        try:
            return tuple(float(x) for x in self.attack_rates.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"bad attack_rates {self.attack_rates!r}") from None


def parse_config_file(path: str | Path) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key = value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def resolve_config(args: argparse.Namespace) -> RunConfig:
    pairs = parse_config_file(args.config) if args.config else []
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        pairs.append((key.strip(), value.strip()))
    return RunConfig.from_pairs(pairs)


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config.{command}.txt").write_text(cfg.dumps(), encoding="utf-8")
    return out


# -- shared loading ---------------------------------------------------------------

def _need(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _documents(cfg: RunConfig) -> list[str]:
    return read_corpus(_need(cfg.corpus, "corpus"))


def _split(cfg: RunConfig, docs: list[str]) -> corpus_mod.Split:
    """Hold out up to ``n_prompts`` long documents, never more than half of them."""
    need = cfg.prompt_len + cfg.reference_len
    n_long = sum(1 for d in docs if len(tokenize(d)) >= need)
    n_eval = min(cfg.n_prompts, n_long // 2)
    return corpus_mod.split_documents(docs, n_eval, cfg.prompt_len, cfg.reference_len)


def _model(cfg: RunConfig) -> TokenModel:
    return TokenModel.load(_need(cfg.model_file, "model file"))


def _selector(cfg: RunConfig) -> sel.SelectorParams:
    return sel.load(_need(cfg.selector_file, "selector file"), cfg.dims)


def _eval_prompts(cfg: RunConfig, model: TokenModel):
    split = _split(cfg, _documents(cfg))
    return corpus_mod.prompts_from(split.eval_docs, model, cfg.prompt_len, cfg.reference_len)


def dumps_text(ids: Sequence[int], prompt_len: int, vocab: Sequence[str]) -> str:
    return "\n".join([TEXT_HEADER, f"prompt_len {prompt_len}",
                      "ids " + " ".join(map(str, ids)),
                      "text " + " ".join(vocab[i] for i in ids)]) + "\n"


def load_scored_text(path: Path) -> tuple[list[int], int]:
    """Token ids and prompt length from a generation record or a text file."""
    text = path.read_text(encoding="utf-8")
    if text.startswith(pl.RECORD_HEADER):
        rec = pl.loads_record(text)
        return rec.full, len(rec.prompt)
    lines = text.split("\n")
    if lines[0] != TEXT_HEADER:
        raise FormatError(f"{path} is neither a record nor a text file")
    try:
        prompt_len = int(lines[1].split()[1])
        ids = [int(x) for x in lines[2].split()[1:]]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed text file {path}: {exc}") from exc
    return ids, prompt_len


# -- commands -------------------------------------------------------------------

def cmd_make_corpus(cfg: RunConfig, args) -> int:
    _out_dir(cfg, "make-corpus")
    docs = corpus_mod.synthetic_corpus(cfg.corpus_bytes, cfg.seed)
    Path(cfg.corpus).parent.mkdir(parents=True, exist_ok=True)
    corpus_mod.write_corpus(docs, cfg.corpus)
    print(f"wrote {len(docs)} documents to {cfg.corpus}")
    return EXIT_OK


def cmd_train_lm(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "train-lm")
    split = _split(cfg, _documents(cfg))
    model = fit_ngram(split.train_docs, cfg.lm_order, cfg.lm_alpha, cfg.vocab_cap)
    model.save(cfg.model_file)
    train_ids = [model.encode(tokenize(d)) for d in split.train_docs]
    n_tok = sum(len(ids) for ids in train_ids)
    unk = sum(ids.count(UNK_ID) for ids in train_ids) / max(n_tok, 1)
    lines = [f"vocab_size {model.vocab_size}", f"unk_fraction {unk:.6f}"]
    if split.eval_docs:
        nll, count = 0.0, 0
        for d in split.eval_docs:
            ids = model.encode(tokenize(d))
            nll += math.log(perplexity(model, ids)) * len(ids)
            count += len(ids)
        lines.append(f"heldout_perplexity {math.exp(nll / count):.6f}")
    else:
        lines.append("heldout_perplexity nan")
    report = "\n".join(lines) + "\n"
    (out / "train_lm.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def _log_step(row: tr.HistoryRow) -> None:
    log.info("step %d L_Q=%.4f L_D=%.4f z=%.3f lambda=%.3f", row.step, row.L_Q, row.L_D,
             row.z_mean, row.lambda_star)


def cmd_train_selector(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "train-selector")
    model = _model(cfg)
    split = _split(cfg, _documents(cfg))
    prompts = [p for p, _ in corpus_mod.prompts_from(split.train_docs, model, cfg.prompt_len,
                                                      cfg.reference_len)]
    params = sel.init(*cfg.dims, seed=cfg.seed)
    tcfg = cfg.train_config()
    ckpt_dir = out / "checkpoints"

    def checkpoint(step, p):
        ckpt_dir.mkdir(exist_ok=True)
        sel.save(p, ckpt_dir / f"selector_step{step:06d}.txt")

    opt = tr.OptState.for_params(params, tcfg.lr)
    history: list[tr.HistoryRow] = []
    steps_per_epoch = math.ceil(len(prompts) / tcfg.batch_size) if prompts else 0
    try:
        for epoch in range(cfg.epochs):
            if not prompts:
                raise ConfigError("corpus yields no training prompts")
            params, rows = tr.train_epoch(model, params, prompts, tcfg, opt=opt,
                                          step_offset=epoch * steps_per_epoch,
                                          checkpoint=checkpoint, on_step=_log_step)
            history.extend(rows)
    except TrainingDiverged as exc:
        sel.save(exc.last_good, out / "selector_last_good.txt")
        tr.write_history(history, out / "history.csv")
        print(f"training diverged at step {exc.step}; last good weights saved", file=sys.stderr)
        return EXIT_RUNTIME
    sel.save(params, cfg.selector_file)
    tr.write_history(history, out / "history.csv")
    print(f"trained {len(history)} steps on {len(prompts)} prompts; weights in {cfg.selector_file}")
    return EXIT_OK


def _rule(cfg: RunConfig, model: TokenModel, mode: ek.BaselineMode) -> pl.SelectionRule:
    selector = _selector(cfg) if mode.kind is ek.ModeKind.LTW else None
    return ek.rule_for(mode, model, selector, cfg.policy, cfg.window)


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "generate")
    model = _model(cfg)
    rule = _rule(cfg, model, ek.BaselineMode.parse(cfg.mode))
    if args.prompt:
        prompts = [model.encode(tokenize(args.prompt))]
    else:
        prompts = [p for p, _ in _eval_prompts(cfg, model)]
    if not prompts or not all(prompts):
        raise ConfigError("no non-empty prompt to generate from")
    ecfg = cfg.eval_config(())
    rec_dir = out / "records"
    rec_dir.mkdir(exist_ok=True)
    for i, prompt in enumerate(prompts):
        rec = pl.generate(model, rule, ecfg.scheme, ecfg.gamma, ecfg.delta, ecfg.sampler, prompt,
                          ecfg.max_len, np.random.default_rng([cfg.seed, i, 0]),
                          min_len=ecfg.min_len, window=cfg.window)
        pl.save_record(rec, rec_dir / f"record_{i:04d}.txt", model.vocab)
    print(f"wrote {len(prompts)} records to {rec_dir}")
    return EXIT_OK


def cmd_detect(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "detect")
    model = _model(cfg)
    rule = _rule(cfg, model, ek.BaselineMode.parse(cfg.mode))
    ids, prompt_len = load_scored_text(_need(args.input, "input"))
    if args.prompt_len is not None:
        prompt_len = args.prompt_len
    try:
        res = pl.detect_with(model, rule, cfg.hash_scheme, cfg.gamma, ids, prompt_len,
                             window=cfg.window)
    except UndetectableError as exc:
        res = exc.result
    lines = [f"z {res.z!r}", f"n_scored {res.n_scored}", f"n_green {res.n_green}",
             "selected " + " ".join(map(str, res.selected_positions))]
    report = "\n".join(lines) + "\n"
    (out / "detection.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "eval")
    model = _model(cfg)
    prompts = _eval_prompts(cfg, model)
    if not prompts:
        raise ConfigError("corpus yields no evaluation prompts")
    ecfg = cfg.eval_config()
    csv_parts, summaries = [], []
    for label in cfg.modes.split(","):
        mode = ek.BaselineMode.parse(label)
        selector = _selector(cfg) if mode.kind is ek.ModeKind.LTW else None
        results = ek.run_eval(model, selector, mode, prompts, ecfg)
        csv_parts.append(ek.report_csv(results))
        summaries.append(ek.format_summary(ek.summarize(results)))
    header, *_ = csv_parts[0].split("\n", 1)
    body = "".join(part.split("\n", 1)[1] for part in csv_parts)
    (out / "report.csv").write_text(header + "\n" + body, encoding="utf-8")
    summary = "".join(summaries)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg, "attack")
    model = _model(cfg)
    src = _need(args.input, "input")
    ids, prompt_len = load_scored_text(src)
    rng = np.random.default_rng([cfg.seed, 3])
    attacked = ids[:prompt_len] + ek.substitution_attack(ids[prompt_len:], cfg.attack_rate,
                                                         model, rng)
    dest = out / f"attacked_{src.stem}.txt"
    dest.write_text(dumps_text(attacked, prompt_len, model.vocab), encoding="utf-8")
    changed = sum(a != b for a, b in zip(ids, attacked))
    print(f"replaced {changed} of {len(ids) - prompt_len} tokens; wrote {dest}")
    return EXIT_OK


COMMANDS = {
    "make-corpus": (cmd_make_corpus, "write the synthetic training corpus"),
    "train-lm": (cmd_train_lm, "fit the n-gram language model"),
    "train-selector": (cmd_train_selector, "train the selector network"),
    "generate": (cmd_generate, "generate watermarked records"),
    "detect": (cmd_detect, "detect the watermark in a record or text file"),
    "eval": (cmd_eval, "run the evaluation protocol"),
    "attack": (cmd_attack, "apply the substitution attack to a record or text file"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="ltw", description="Learnable selective watermarking")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "generate":
            p.add_argument("--prompt", help="generate from this text instead of held-out prompts")
        if name in ("detect", "attack"):
            p.add_argument("--input", required=True, help="generation record or text file")
        if name == "detect":
            p.add_argument("--prompt-len", type=int, help="override the prompt length")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command][0](cfg, args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LTWError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
