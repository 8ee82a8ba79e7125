"""Command-line surface: data generation, training, decoding, and scoring.

Every command reads an optional flat key=value config file; command-line
flags override file values.  Exit codes: 0 success, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import synthdata, trainer
from .ctc import InfeasibleAlignmentError, greedy_decode
from .diffcore import NumericError
from .encoder import EncoderModel, ModelConfig, PlacementConfig, strategy_names
from .labels import Vocabulary, error_rate
from .synthdata import LanguageSpecError
from .trainer import TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Bad or unknown configuration key/value."""


class DataError(ValueError):
    """Missing or inconsistent data files."""


@dataclass
class GenDataConfig:
    out_dir: str = ""
    seed: int = 0
    n_syllables: int = 20
    n_characters: int = 60
    max_pronunciations: int = 3
    d_in: int = 16
    n_train: int = 50
    n_valid: int = 20
    min_len: int = 3
    max_len: int = 8
    n_homophone_eval: int = 0


@dataclass
class TrainCmdConfig:
    data_dir: str = ""
    out_dir: str = ""
    strategy: str = "alternate"
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    conv_kernel: int = 7
    pos_enc: bool = True
    cond_layer_norm: bool = False
    mix_weight: float = 0.5
    epochs: int = 200
    batch_size: int = 10
    warmup_steps: int = 500
    lr_factor: float = 2.0
    seed: int = 0
    average_k: int = 10
    max_steps: int = 0
    eval_interval: int = 50
    grad_clip: float = 5.0
    early_stop_train_cer: float = -1.0
    n_workers: int = 1


@dataclass
class DecodeConfig:
    model: str = ""
    data: str = ""
    out: str = ""
    dump_intermediate: bool = False


@dataclass
class EvalConfig:
    ref: str = ""
    hyp: str = ""
    csv: str = ""


def _parse_value(raw: str, kind: type):
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from exc


def resolve_config(cls, config_path: str | None, overrides: dict):
    """Defaults <- config file <- command-line flags, rejecting unknown keys."""
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    kinds = {
        name: type(getattr(cls(), name))  # resolved runtime type of the default
        for name in fields
    }
    values: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(raw.strip(), kinds[key])
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(val, kinds[key]) if isinstance(val, str) else val
    return cls(**values)


def print_config(cfg) -> None:
    for f in sorted(dataclasses.fields(cfg), key=lambda f: f.name):
        print(f"{f.name}={getattr(cfg, f.name)}")


def _add_config_flags(parser: argparse.ArgumentParser, cls) -> None:
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--print-config", action="store_true", help="echo the resolved config and exit")
    for f in dataclasses.fields(cls):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _overrides(args: argparse.Namespace, cls) -> dict:
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(cls)}


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: GenDataConfig) -> int:
    if not cfg.out_dir:
        raise ConfigError("out_dir is required")
    out = Path(cfg.out_dir)
    if not out.is_dir():
        raise DataError(f"output directory does not exist: {out}")
    lang = synthdata.make_language(
        seed=cfg.seed,
        n_syllables=cfg.n_syllables,
        n_characters=cfg.n_characters,
        max_pronunciations=cfg.max_pronunciations,
        d_in=cfg.d_in,
    )
    paths = synthdata.generate_dataset(
        lang,
        out,
        n_train=cfg.n_train,
        n_valid=cfg.n_valid,
        len_range=(cfg.min_len, cfg.max_len),
        seed=cfg.seed,
        n_homophone_eval=cfg.n_homophone_eval,
    )
    for name in sorted(paths):
        print(f"wrote {paths[name]}")
    return EXIT_OK


def _load_vocabs(data_dir: Path) -> tuple[Vocabulary, Vocabulary]:
    char_path = data_dir / "chars.vocab"
    syl_path = data_dir / "syllables.vocab"
    for p in (char_path, syl_path):
        if not p.is_file():
            raise DataError(f"vocabulary file not found: {p}")
    return Vocabulary.load(char_path), Vocabulary.load(syl_path)


def _load_split(data_dir: Path, name: str, char_vocab: Vocabulary, syl_vocab: Vocabulary):
    path = data_dir / name
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    return synthdata.read_jsonl(path, char_vocab, syl_vocab)


def cmd_train(cfg: TrainCmdConfig) -> int:
    if not cfg.data_dir or not cfg.out_dir:
        raise ConfigError("data_dir and out_dir are required")
    data_dir = Path(cfg.data_dir)
    out_dir = Path(cfg.out_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory does not exist: {data_dir}")
    if not out_dir.is_dir():
        raise DataError(f"output directory does not exist: {out_dir}")
    if cfg.strategy not in strategy_names():
        raise ConfigError(f"unknown strategy {cfg.strategy!r}; expected one of {strategy_names()}")

    char_vocab, syl_vocab = _load_vocabs(data_dir)
    train_set = _load_split(data_dir, "train.jsonl", char_vocab, syl_vocab)
    valid_set = _load_split(data_dir, "valid.jsonl", char_vocab, syl_vocab)

    placement = PlacementConfig.from_strategy(cfg.strategy, cfg.n_layers)
    model_cfg = ModelConfig(
        d_in=train_set[0].features.shape[1] if train_set else 16,
        d_model=cfg.d_model,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        conv_kernel=cfg.conv_kernel,
        use_pos_enc=cfg.pos_enc,
        cond_layer_norm=cfg.cond_layer_norm,
    )
    model = EncoderModel(model_cfg, placement, char_vocab.size, syl_vocab.size, seed=cfg.seed)
    train_cfg = TrainConfig(
        mix_weight=cfg.mix_weight,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        warmup_steps=cfg.warmup_steps,
        lr_factor=cfg.lr_factor,
        seed=cfg.seed + 1,
        average_k=cfg.average_k,
        max_steps=cfg.max_steps or None,
        eval_interval=cfg.eval_interval,
        grad_clip=cfg.grad_clip,
        early_stop_train_cer=None if cfg.early_stop_train_cer < 0 else cfg.early_stop_train_cer,
        n_workers=cfg.n_workers,
    )
    meta = {"char_tokens": list(char_vocab.tokens), "syl_tokens": list(syl_vocab.tokens)}
    result = trainer.train(model, train_set, valid_set, train_cfg, out_dir, checkpoint_meta=meta)

    print(f"placement char_layers={sorted(placement.char_layers)} "
          f"syl_layers={sorted(placement.syl_layers)} condition={placement.condition}")
    if result.aborted:
        print("training aborted on non-finite values; last finite checkpoint kept")
        return EXIT_NUMERIC
    last = result.metrics[-1]
    print(f"steps {result.steps_run}  valid cer {last.cer_valid:.4f}")
    for layer in sorted(last.ser_valid):
        print(f"valid ser layer {layer}: {last.ser_valid[layer]:.4f}")
    avg_model = model.with_store(result.averaged_store)
    rates = trainer.layerwise_error_rates(avg_model, valid_set)
    print(f"averaged model valid cer {rates[('char', model.n_layers)]:.4f}")
    return EXIT_OK


def cmd_decode(cfg: DecodeConfig) -> int:
    if not cfg.model or not cfg.data or not cfg.out:
        raise ConfigError("model, data, and out are required")
    model_path = Path(cfg.model)
    data_path = Path(cfg.data)
    if not model_path.is_file():
        raise DataError(f"model checkpoint not found: {model_path}")
    if not data_path.is_file():
        raise DataError(f"dataset file not found: {data_path}")
    model, extra = EncoderModel.load(model_path)
    try:
        char_vocab = Vocabulary(tuple(extra["char_tokens"]))
        syl_vocab = Vocabulary(tuple(extra["syl_tokens"]))
    except KeyError as exc:
        raise DataError(f"checkpoint lacks vocabulary metadata ({exc})") from exc
    utts = synthdata.read_jsonl(data_path, char_vocab, syl_vocab)

    with open(cfg.out, "w", encoding="utf-8") as fh:
        for utt in utts:
            out = model.forward(utt.features)
            record: dict = {
                "id": utt.utt_id,
                "chars": char_vocab.decode(greedy_decode(out.final.value)),
            }
            if cfg.dump_intermediate:
                layers: dict = {"char": {}, "syl": {}}
                for layer, probs in sorted(out.char_inters.items()):
                    layers["char"][str(layer)] = char_vocab.decode(greedy_decode(probs.value))
                layers["char"][str(model.n_layers)] = record["chars"]
                for layer, probs in sorted(out.syl_inters.items()):
                    layers["syl"][str(layer)] = syl_vocab.decode(greedy_decode(probs.value))
                record["layers"] = layers
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    print(f"decoded {len(utts)} utterances -> {cfg.out}")
    return EXIT_OK


def _read_records(path: Path) -> dict[str, dict]:
    records: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                records[rec["id"]] = rec
    return records


def cmd_eval(cfg: EvalConfig) -> int:
    if not cfg.ref or not cfg.hyp:
        raise ConfigError("ref and hyp are required")
    ref_path, hyp_path = Path(cfg.ref), Path(cfg.hyp)
    for p in (ref_path, hyp_path):
        if not p.is_file():
            raise DataError(f"file not found: {p}")
    refs = _read_records(ref_path)
    hyps = _read_records(hyp_path)
    if sorted(refs) != sorted(hyps):
        missing = sorted(set(refs) ^ set(hyps))[:5]
        raise DataError(f"reference/hypothesis ids do not match (e.g. {missing})")
    if not refs:
        print("no utterances to score")
        return EXIT_OK

    ids = sorted(refs)
    final_pairs = [(refs[i]["chars"], hyps[i]["chars"]) for i in ids]
    rows: list[tuple[str, int, float]] = []
    with_layers = [i for i in ids if "layers" in hyps[i]]
    if with_layers:
        char_layers = sorted({int(n) for i in with_layers for n in hyps[i]["layers"]["char"]})
        syl_layers = sorted({int(n) for i in with_layers for n in hyps[i]["layers"]["syl"]})
        for layer in char_layers:
            pairs = [
                (refs[i]["chars"], hyps[i]["layers"]["char"][str(layer)]) for i in with_layers
            ]
            rows.append(("char", layer, error_rate(pairs)))
        for layer in syl_layers:
            pairs = [
                (refs[i]["syllables"], hyps[i]["layers"]["syl"][str(layer)]) for i in with_layers
            ]
            rows.append(("syl", layer, error_rate(pairs)))
    else:
        rows.append(("char", 0, error_rate(final_pairs)))

    cer = error_rate(final_pairs)
    print(f"cer {cer:.6f} over {len(ids)} utterances")
    for level, layer, rate in rows:
        if layer:
            name = "cer" if level == "char" else "ser"
            print(f"layer {level} {layer} {name} {rate:.6f}")
    if cfg.csv:
        with open(cfg.csv, "w", encoding="utf-8") as fh:
            fh.write("level,layer,rate\n")
            for level, layer, rate in rows:
                if layer:
                    fh.write(f"{level},{layer},{rate!r}\n")
            if not with_layers:
                fh.write(f"char,final,{cer!r}\n")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

_COMMANDS = {
    "gen-data": (GenDataConfig, cmd_gen_data),
    "train": (TrainCmdConfig, cmd_train),
    "decode": (DecodeConfig, cmd_decode),
    "eval": (EvalConfig, cmd_eval),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condctc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (cls, _) in _COMMANDS.items():
        p = sub.add_parser(name)
        _add_config_flags(p, cls)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cls, handler = _COMMANDS[args.command]
    try:
        cfg = resolve_config(cls, args.config, _overrides(args, cls))
        if args.print_config:
            print_config(cfg)
            return EXIT_OK
        return handler(cfg)
    except (ConfigError, LanguageSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, InfeasibleAlignmentError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
