"""Command-line driver.

Every subcommand reads a flat ``[run]`` section from an INI-style config
file (all keys optional), applies ``PROBEMBED_SEED`` and then any
``--seed``/``--set key=value`` flags, validates the result, and works inside
one output directory::

    probembed gen-data        -> train.synd, test.synd, manifest.json
    probembed train           -> model.pgck, history.json
    probembed encode          -> images.pges, texts.pges, prompts.pges
    probembed eval-retrieval  -> retrieval.json
    probembed eval-zeroshot   -> zeroshot.json
    probembed eval-selective  -> selective.json
    probembed eval-robustness -> robustness.json
    probembed export-csv      -> retrieval.csv, risk_coverage_*.csv, robustness.csv
    probembed gradcheck       -> gradcheck.json

The effective config is written to ``effective_config.ini`` by every
command.  Exit status is 0 on success, 1 for usage or validation errors and
2 for runtime failures (missing inputs, I/O, diverged training).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .evalkit import (
    CONFIDENCE_SOURCES,
    DIRECTIONS,
    METRICS,
    EvalError,
    RobustnessReport,
    evaluate_retrieval,
    rsum,
    selective_retrieval,
    zero_shot_eval,
)
from .objective import LossConfig
from .pipeline import run_robustness
from .prob_core import InvalidInputError
from .store import (
    EmbeddingStore,
    StoreError,
    StoreIOError,
    read_dataset,
    read_store,
    write_dataset,
    write_store,
)
from .synth_data import PERTURB_KINDS, SynthConfig, class_prompt_features, generate_dataset, stack_studies
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    batch_inputs,
    encode_corpus,
    encode_texts,
    fit_state,
    gradient_check,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("probembed")

SEED_ENV = "PROBEMBED_SEED"
CONFIG_SECTION = "run"
COMMANDS = (
    "gen-data",
    "train",
    "encode",
    "eval-retrieval",
    "eval-zeroshot",
    "eval-selective",
    "eval-robustness",
    "gradcheck",
    "export-csv",
)


class UsageError(Exception):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Flat union of dataset, model, loss, evaluation and output settings.

    Defaults match the library defaults; ``configs/toy.ini`` holds the
    preset used by the behavioural checks.
    """

    seed: int = 42
    out_dir: str = "run"
    # dataset
    n_train: int = 2000
    n_test: int = 500
    n_classes: int = 10
    ambiguity: float = 0.3
    height: int = 8
    width: int = 8
    text_dim: int = 32
    latent_dim: int = 8
    proto_scale: float = 1.5
    instance_scale: float = 0.6
    pixel_noise: float = 0.02
    text_noise: float = 0.05
    missing_view_rate: float = 0.0
    missing_section_rate: float = 0.0
    jitter_amplitude: float = 0.1
    # model and optimizer
    epochs: int = 50
    batch_size: int = 128
    base_lr: float = 5e-5
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    clip_max_norm: float = 1.0
    schedule: str = "cosine"
    embedding_dim: int = 16
    hidden1: int = 64
    hidden2: int = 64
    objective: str = "probabilistic"
    temperature: float = 0.1
    logvar_bias_init: float = -1.0
    # loss
    lambda_I: float = 0.1
    lambda_T: float = 0.1
    beta_I: float = 1e-4
    beta_T: float = 1e-4
    mode: str = "standard"
    positive_weight: float = 1.0
    # evaluation
    metric: str = "csd"
    ks: tuple[int, ...] = (1, 5, 10, 100)
    selective_ks: tuple[int, ...] = (1, 5)
    confidence_source: str = "match_prob"
    random_controls: int = 100
    robustness_kinds: tuple[str, ...] = PERTURB_KINDS
    robustness_severities: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    gradcheck_batches: int = 1

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for name in ("n_train", "n_test", "random_controls", "gradcheck_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.confidence_source not in CONFIDENCE_SOURCES:
            raise ConfigError(f"confidence_source must be one of {CONFIDENCE_SOURCES}")
        if not self.ks or min(self.ks) < 1 or max(self.ks) > self.n_test:
            raise ConfigError(f"ks must lie in [1, n_test={self.n_test}]")
        if not self.selective_ks or min(self.selective_ks) < 1 or max(self.selective_ks) > self.n_test:
            raise ConfigError(f"selective_ks must lie in [1, n_test={self.n_test}]")
        unknown = set(self.robustness_kinds) - set(PERTURB_KINDS)
        if unknown:
            raise ConfigError(f"unknown robustness kinds {sorted(unknown)}")
        if any(not 0 <= s <= 5 for s in self.robustness_severities):
            raise ConfigError("robustness severities must lie in [0, 5]")
        # Building the component configs runs their own validation.
        try:
            self.synth_config()
            self.train_config()
            self.loss_config()
        except (InvalidInputError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def synth_config(self) -> SynthConfig:
        for name in ("missing_view_rate", "missing_section_rate", "ambiguity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        return SynthConfig(
            height=self.height,
            width=self.width,
            text_dim=self.text_dim,
            latent_dim=self.latent_dim,
            proto_scale=self.proto_scale,
            instance_scale=self.instance_scale,
            pixel_noise=self.pixel_noise,
            text_noise=self.text_noise,
            missing_view_rate=self.missing_view_rate,
            missing_section_rate=self.missing_section_rate,
            jitter_amplitude=self.jitter_amplitude,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            lr_min=self.lr_min,
            weight_decay=self.weight_decay,
            clip_max_norm=self.clip_max_norm,
            schedule=self.schedule,
            seed=self.seed,
            embedding_dim=self.embedding_dim,
            hidden_sizes=(self.hidden1, self.hidden2),
            objective=self.objective,
            temperature=self.temperature,
            logvar_bias_init=self.logvar_bias_init,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_I=self.lambda_I,
            lambda_T=self.lambda_T,
            beta_I=self.beta_I,
            beta_T=self.beta_T,
            mode=self.mode,
            positive_weight=self.positive_weight,
        )

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kwargs[key] = _parse_value(key, known[key].type, raw)
        return cls(**kwargs)

    def to_strings(self) -> dict[str, str]:
        return {f.name: _format_value(getattr(self, f.name)) for f in fields(self)}

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser[CONFIG_SECTION] = self.to_strings()
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _parse_value(key: str, type_name: str, raw: str):
    raw = raw.strip()
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "str":
            return raw
        if type_name == "tuple[int, ...]":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if type_name == "tuple[str, ...]":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type_name}") from exc
    raise ConfigError(f"{key}: unsupported type {type_name}")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def load_run_config(path: str | None, overrides: Sequence[str], seed_flag: int | None, env=None) -> RunConfig:
    """Resolve the config with precedence flag > environment > file > default."""
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        extra = [s for s in parser.sections() if s != CONFIG_SECTION]
        if extra:
            raise ConfigError(f"unknown config sections: {', '.join(extra)}")
        if parser.has_section(CONFIG_SECTION):
            values.update(parser[CONFIG_SECTION])
    if env.get(SEED_ENV):
        values["seed"] = env[SEED_ENV]
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value
    if seed_flag is not None:
        values["seed"] = str(seed_flag)
    return RunConfig.from_strings(values)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise StoreIOError(f"cannot read {path}: {exc}") from exc


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def export_retrieval_csv(report: dict, path) -> None:
    rows = []
    for direction in DIRECTIONS:
        for K, value in sorted(report[direction].items(), key=lambda kv: int(kv[0])):
            rows.append([direction, str(int(K)), _fmt(value)])
    _write_csv(Path(path), ("direction", "K", "value"), rows)


def export_risk_coverage_csv(curve: dict, path) -> None:
    rows = [[_fmt(c), _fmt(r), curve["source"]] for c, r in zip(curve["coverage"], curve["risk"])]
    _write_csv(Path(path), ("coverage", "risk", "source"), rows)


def export_robustness_csv(entries: Sequence[dict], path) -> None:
    ordered = sorted(entries, key=lambda e: (e["kind"], e["severity"], e["K"]))
    rows = [[e["kind"], str(e["severity"]), str(e["K"]), _fmt(e["ratio"])] for e in ordered]
    _write_csv(Path(path), ("kind", "severity", "K", "ratio"), rows)


def robustness_to_json(report: RobustnessReport) -> list[dict]:
    return [dataclasses.asdict(e) for e in report.entries]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


class _Context:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StoreIOError(f"{p} not found; run the earlier pipeline stage first")
        return p

    def dataset(self, split: str):
        return read_dataset(self.require(f"{split}.synd"))

    def state(self):
        return load_checkpoint(self.require("model.pgck"))


def cmd_gen_data(ctx: _Context) -> None:
    cfg = ctx.cfg
    synth = cfg.synth_config()
    train = generate_dataset(cfg.n_train, cfg.n_classes, cfg.ambiguity, cfg.seed, split=0, cfg=synth)
    test = generate_dataset(cfg.n_test, cfg.n_classes, cfg.ambiguity, cfg.seed, split=1, cfg=synth)
    write_dataset(train, ctx.path("train.synd"))
    write_dataset(test, ctx.path("test.synd"))
    manifest = {
        "seed": cfg.seed,
        "files": {"train.synd": len(train), "test.synd": len(test)},
        "n_classes": cfg.n_classes,
        "ambiguity": cfg.ambiguity,
        "ambiguous_fraction": {
            "train": float(np.mean([s.is_ambiguous for s in train])),
            "test": float(np.mean([s.is_ambiguous for s in test])),
        },
        "synth_config": dataclasses.asdict(synth),
        "run_config": cfg.to_strings(),
    }
    _write_json(ctx.path("manifest.json"), manifest)
    print(f"wrote {len(train)} train and {len(test)} test studies to {ctx.out}")


def cmd_train(ctx: _Context) -> None:
    train = ctx.dataset("train")
    state, history = fit_state(train, ctx.cfg.train_config(), ctx.cfg.loss_config())
    save_checkpoint(state, ctx.path("model.pgck"))
    _write_json(ctx.path("history.json"), [h.as_dict() for h in history])
    last = history[-1].total if history else float("nan")
    print(f"trained {len(history)} epochs, {state.step} steps, final loss {last:.6f}")


def cmd_encode(ctx: _Context) -> None:
    model = ctx.state().model
    test = ctx.dataset("test")
    images, texts = encode_corpus(model, test)
    prompts = class_prompt_features(ctx.cfg.n_classes, ctx.cfg.seed, ctx.cfg.synth_config())
    p_mu, p_lv = encode_texts(model, prompts)
    prompt_store = EmbeddingStore([f"class_{c:03d}" for c in range(len(prompts))], p_mu, p_lv)
    write_store(images, ctx.path("images.pges"))
    write_store(texts, ctx.path("texts.pges"))
    write_store(prompt_store, ctx.path("prompts.pges"))
    print(f"encoded {len(images)} studies and {len(prompt_store)} class prompts")


def _stores(ctx: _Context) -> tuple[EmbeddingStore, EmbeddingStore]:
    return read_store(ctx.require("images.pges")), read_store(ctx.require("texts.pges"))


def cmd_eval_retrieval(ctx: _Context) -> None:
    images, texts = _stores(ctx)
    i2t, t2i = evaluate_retrieval(images, texts, ctx.cfg.metric, ctx.cfg.ks)
    report = {"metric": ctx.cfg.metric, "i2t": i2t.recall_at, "t2i": t2i.recall_at}
    if set(ctx.cfg.ks) >= {1, 5, 10, 100}:
        report["rsum"] = rsum(i2t, t2i)
    _write_json(ctx.path("retrieval.json"), report)
    for r in (i2t, t2i):
        print(" ".join(f"{r.direction} R@{K}={v:.2f}" for K, v in r.recall_at.items()))
    if "rsum" in report:
        print(f"RSUM={report['rsum']:.2f}")


def cmd_eval_zeroshot(ctx: _Context) -> None:
    images = read_store(ctx.require("images.pges"))
    prompts = read_store(ctx.require("prompts.pges"))
    labels = [s.class_label for s in ctx.dataset("test")]
    scalars = ctx.state().model.scalars
    report = zero_shot_eval(images, prompts, labels, scalars, ctx.cfg.metric)
    _write_json(ctx.path("zeroshot.json"), {"per_class": report.per_class, "mean": report.mean})
    print(f"zero-shot mean accuracy {report.mean:.2f}% over {report.n_classes} classes")


def cmd_eval_selective(ctx: _Context) -> None:
    cfg = ctx.cfg
    images, texts = _stores(ctx)
    scalars = ctx.state().model.scalars
    results = []
    for direction, (query, gallery) in zip(DIRECTIONS, ((images, texts), (texts, images))):
        for K in cfg.selective_ks:
            res = selective_retrieval(query, gallery, scalars, direction, K, cfg.confidence_source, cfg.metric, cfg.seed)
            controls = [
                selective_retrieval(query, gallery, scalars, direction, K, "random", cfg.metric, seed).curve.aurc
                for seed in np.random.SeedSequence([cfg.seed, K]).generate_state(cfg.random_controls).tolist()
            ]
            results.append(
                {
                    "direction": direction,
                    "K": K,
                    "source": res.curve.confidence_source,
                    "aurc": res.curve.aurc,
                    "random_aurc_mean": float(np.mean(controls)),
                    "ece": res.ece,
                    "coverage": res.curve.coverage.tolist(),
                    "risk": res.curve.risk.tolist(),
                }
            )
            print(f"{direction} K={K} AURC={res.curve.aurc:.4f} random={np.mean(controls):.4f} ECE={res.ece:.4f}")
    _write_json(ctx.path("selective.json"), results)


def cmd_eval_robustness(ctx: _Context) -> None:
    cfg = ctx.cfg
    model = ctx.state().model
    report = run_robustness(
        model, ctx.dataset("test"), cfg.robustness_kinds, cfg.robustness_severities, cfg.seed, cfg.ks, cfg.metric
    )
    _write_json(ctx.path("robustness.json"), robustness_to_json(report))
    print(f"robustness grid: {len(report.entries)} entries")


def cmd_export_csv(ctx: _Context) -> None:
    written = []
    if ctx.path("retrieval.json").exists():
        export_retrieval_csv(_read_json(ctx.path("retrieval.json")), ctx.path("retrieval.csv"))
        written.append("retrieval.csv")
    if ctx.path("selective.json").exists():
        for curve in _read_json(ctx.path("selective.json")):
            name = f"risk_coverage_{curve['direction']}_k{curve['K']}.csv"
            export_risk_coverage_csv(curve, ctx.path(name))
            written.append(name)
    if ctx.path("robustness.json").exists():
        export_robustness_csv(_read_json(ctx.path("robustness.json")), ctx.path("robustness.csv"))
        written.append("robustness.csv")
    if not written:
        raise StoreIOError(f"no reports found in {ctx.out}; run an eval-* command first")
    print("wrote " + ", ".join(written))


def cmd_gradcheck(ctx: _Context) -> None:
    cfg = ctx.cfg
    synth = cfg.synth_config()
    train_cfg = cfg.train_config()
    studies = generate_dataset(4 * cfg.gradcheck_batches, cfg.n_classes, cfg.ambiguity, cfg.seed, split=2, cfg=synth)
    worst = 0.0
    for i in range(cfg.gradcheck_batches):
        batch = studies[4 * i : 4 * i + 4]
        model = init_model(synth.height * synth.width, synth.text_dim, dataclasses.replace(train_cfg, seed=cfg.seed + i))
        inputs = batch_inputs(stack_studies(batch))
        worst = max(worst, gradient_check(model, inputs, cfg.loss_config(), train_cfg))
    _write_json(ctx.path("gradcheck.json"), {"max_relative_error": worst, "batches": cfg.gradcheck_batches})
    print(f"max relative error {worst:.3e}")
    if not worst < 1e-5:
        raise TrainingError(f"gradient check failed: {worst:.3e} >= 1e-5")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "encode": cmd_encode,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-selective": cmd_eval_selective,
    "eval-robustness": cmd_eval_robustness,
    "gradcheck": cmd_gradcheck,
    "export-csv": cmd_export_csv,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="probembed", description="Probabilistic image-text embedding toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or "").strip() or None)
        p.add_argument("-c", "--config", help="INI file with a [run] section")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (same as --set out_dir=...)")
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        print(parser.format_usage(), file=sys.stderr, end="")
        if argv:
            print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        overrides = list(args.overrides)
        if args.out is not None:
            overrides.append(f"out_dir={args.out}")
        cfg = load_run_config(args.config, overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    ctx = _Context(cfg)
    try:
        ctx.out.mkdir(parents=True, exist_ok=True)
        ctx.path("effective_config.ini").write_text(cfg.to_ini(), encoding="utf-8")
        HANDLERS[args.command](ctx)
    except (ConfigError, InvalidInputError, EvalError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except (StoreError, CheckpointError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
