"""Command-line front end.

Every subcommand accepts ``--config FILE`` (``key=value`` lines) and
``--set key=value`` overrides; explicit flags win over both.  Exit codes:
0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from . import constraints as cg
from .corpus import (
    BpeModel, DataError, TextCodec, Vocabulary, apply_bpe, fit_codec, learn_bpe, read_constraints, read_lines,
    undo_bpe, write_constraints, write_lines,
)
from .decoding import beam_search, covers, dba_search, grid_beam_search
from .evaluation import bleu4
from .memory import ConstraintSet
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .training import train

log = logging.getLogger("cmnt")

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 1, 2, 3
SCENARIOS = {"1": "perfect", "2": "noisy", "3": "auto", "perfect": "perfect", "noisy": "noisy", "auto": "auto"}
DECODERS = ("beam", "gbs", "dba")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    max_len: int = 128
    encoder: str = "shallow"
    integrator: str = "attn"
    # data
    bpe_merges: int = 2000
    vocab_size: int = 4000
    em_iterations: int = 5
    prune_threshold: float = 0.05
    # constraints
    scenario: str = "perfect"
    k: int = 5
    replace_prob: float = 0.6
    train_replace_prob: float = 0.6
    noise_count: int = 0
    # training
    epochs: int = 20
    finetune_epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    warmup: int = 100
    # decoding
    decoder: str = "beam"
    beam: int = 8
    seed: int = 0
    # paths
    train_src: str = ""
    train_ref: str = ""
    test_src: str = ""
    test_ref: str = ""
    test_constraints: str = ""
    out_dir: str = "out"

    def model_config(self, src_vocab: int, tgt_vocab: int, encoder="none", integrator="none") -> ModelConfig:
        return ModelConfig(
            src_vocab=src_vocab, tgt_vocab=tgt_vocab, d_model=self.d_model, heads=self.heads, ff_dim=self.ff_dim,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers, dropout=self.dropout, max_len=self.max_len,
            encoder=encoder, integrator=integrator,
        )

    def dump(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    if key not in FIELD_TYPES:
        raise UsageError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    try:
        return int(value) if kind == "int" else float(value) if kind == "float" else value
    except ValueError:
        raise UsageError(f"config key {key!r} expects {kind}, got {value!r}") from None


def parse_assignments(lines: Sequence[str], origin: str) -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} not found")
        values.update(parse_assignments(path.read_text(encoding="utf-8").splitlines(), str(path)))
    values.update(parse_assignments(getattr(args, "set", None) or [], "--set"))
    for key in FIELD_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    cfg = RunConfig(**values)
    if cfg.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {cfg.scenario!r}")
    cfg.scenario = SCENARIOS[cfg.scenario]
    if cfg.decoder not in DECODERS:
        raise UsageError(f"unknown decoder {cfg.decoder!r}")
    return cfg


# ---------------------------------------------------------------------------
# Codec persistence


CODEC_FILES = ("bpe.src", "bpe.tgt", "vocab.src", "vocab.tgt")


def save_codec(codec: TextCodec, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    codec.src_bpe.save(directory / "bpe.src")
    codec.tgt_bpe.save(directory / "bpe.tgt")
    codec.src_vocab.save(directory / "vocab.src")
    codec.tgt_vocab.save(directory / "vocab.tgt")


def load_codec(directory: Path) -> TextCodec:
    missing = [f for f in CODEC_FILES if not (directory / f).exists()]
    if missing:
        raise DataError(f"codec files missing in {directory}: {', '.join(missing)}")
    return TextCodec(
        BpeModel.load(directory / "bpe.src"), BpeModel.load(directory / "bpe.tgt"),
        Vocabulary.load(directory / "vocab.src"), Vocabulary.load(directory / "vocab.tgt"),
    )


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} {p} not found")
    return p


def _aligned(a: list, b: list, what_a: str, what_b: str) -> None:
    if len(a) != len(b):
        raise DataError(f"{what_a} has {len(a)} lines but {what_b} has {len(b)}")


# ---------------------------------------------------------------------------
# Stages


def generate_constraints(cfg: RunConfig, scenario: str, srcs, refs, freq_src, freq_tgt, table, seed: int,
                         replace_prob: float, noise_count: int):
    """Word constraints and noise positions for every sentence of one scenario."""
    out, positions = [], []
    fallback = sorted(freq_tgt.counts)
    for i in range(len(srcs)):
        if scenario == "auto":
            out.append(cg.auto_constraints(srcs[i], freq_src, table, cfg.k))
            positions.append([])
            continue
        cons = cg.extract_perfect_constraints(refs[i], freq_tgt, cfg.k)
        noise: list[int] = []
        if scenario == "noisy":
            line_seed = seed * 1_000_003 + i
            if noise_count:
                cons, noise = cg.fixed_noise_count(cons, refs[i], table, min(noise_count, len(cons)), line_seed,
                                                   fallback, size=None)
            else:
                cons, noise = cg.inject_noise(cons, refs[i], table, replace_prob, line_seed, fallback)
        out.append(cons)
        positions.append(noise)
    return out, positions


def translate_lines(model, codec: TextCodec, srcs, cons, decoder: str, beam: int):
    """Decode every sentence; returns word hypotheses and per-line metadata."""
    hyps, meta = [], []
    word_final = codec.word_final_ids()
    for src, words in zip(srcs, cons):
        c = codec.encode_constraints(words)
        x = codec.encode_source(src)
        start = time.perf_counter()
        if decoder == "beam":
            h = beam_search(model, x, c if model.cfg.constrained else ConstraintSet(), beam)
        elif decoder == "gbs":
            h = grid_beam_search(model, x, c, beam, word_final=word_final)
        else:
            h = dba_search(model, x, c, beam, word_final=word_final)
        micros = int((time.perf_counter() - start) * 1e6)
        hyps.append(codec.decode_target(h.tokens))
        flags = "".join("1" if covers(h.tokens, ConstraintSet((w,), (s,))) else "0"
                        for w, s in zip(c.words, c.tokens))
        meta.append(f"logprob={h.score:.6f}\tcoverage={flags or '-'}\tmicros={micros}"
                    f"\tflagged={int(h.flagged)}")
    return hyps, meta


# ---------------------------------------------------------------------------
# Subcommands


def cmd_bpe(args) -> int:
    cfg = resolve_config(args)
    inp = _require(args.input, "--input")
    if args.mode == "learn":
        model = learn_bpe(read_lines(inp), cfg.bpe_merges)
        model.save(args.model)
        print(f"learned {len(model.merges)} merges")
        return 0
    lines = read_lines(inp)
    if args.mode == "apply":
        model = BpeModel.load(_require(args.model, "--model"))
        write_lines(args.output, (apply_bpe(model, s) for s in lines))
    else:
        write_lines(args.output, (undo_bpe(s) for s in lines))
    return 0


def cmd_build_table(args) -> int:
    cfg = resolve_config(args)
    src = read_lines(_require(args.src, "--src"))
    ref = read_lines(_require(args.ref, "--ref"))
    _aligned(src, ref, "source", "reference")
    table = cg.build_alignment_table(list(zip(src, ref)), cfg.em_iterations, cfg.prune_threshold)
    table.save(args.out)
    print(f"table entries for {len(table.entries)} source words")
    return 0


def cmd_gen_constraints(args) -> int:
    cfg = resolve_config(args)
    scenario = cfg.scenario
    freq_tgt = freq_src = cg.FrequencyTable()
    table = None
    srcs = refs = None
    if scenario in ("perfect", "noisy"):
        refs = read_lines(_require(args.ref, "--ref"))
        srcs = [[] for _ in refs]
        freq_tgt = cg.FrequencyTable.from_corpus(read_lines(Path(args.freq_corpus)) if args.freq_corpus else refs)
    else:
        srcs = read_lines(_require(args.src, "--src"))
        refs = read_lines(_require(args.ref, "--ref")) if args.ref else None
        freq_src = cg.FrequencyTable.from_corpus(read_lines(Path(args.freq_corpus)) if args.freq_corpus else srcs)
    if scenario in ("noisy", "auto"):
        table = cg.AlignmentTable.load(_require(args.table, "--table"))
    if refs is not None:
        _aligned(srcs, refs, "source", "reference")
    cons, positions = generate_constraints(cfg, scenario, srcs, refs or [[]] * len(srcs), freq_src, freq_tgt,
                                           table, cfg.seed, cfg.replace_prob, cfg.noise_count)
    write_constraints(args.out, cons)
    if args.noise_out:
        cg.write_noise_positions(args.noise_out, positions)
    if refs is not None:
        print(f"noisy_rate={100 * cg.noisy_rate(cons, refs):.4f}")
    return 0


def _train_codec(cfg: RunConfig, src, ref) -> TextCodec:
    return fit_codec(src, ref, cfg.bpe_merges, cfg.vocab_size)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    src = read_lines(_require(cfg.train_src, "train_src"))
    ref = read_lines(_require(cfg.train_ref, "train_ref"))
    _aligned(src, ref, "source", "reference")
    codec_dir = Path(args.codec)
    codec = _train_codec(cfg, src, ref)
    save_codec(codec, codec_dir)
    data = [codec.tuple(s, r) for s, r in zip(src, ref)]
    result = train(data, cfg.model_config(len(codec.src_vocab), len(codec.tgt_vocab)), cfg.epochs, cfg.seed,
                   lr=cfg.lr, batch_size=cfg.batch_size, warmup=cfg.warmup)
    digest = save_checkpoint(result.model, args.out)
    print(f"checkpoint={args.out} sha256={digest}")
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    src = read_lines(_require(cfg.train_src, "train_src"))
    ref = read_lines(_require(cfg.train_ref, "train_ref"))
    cons = read_constraints(_require(args.constraints, "--constraints"))
    _aligned(src, ref, "source", "reference")
    _aligned(src, cons, "source", "constraints")
    codec = load_codec(Path(args.codec))
    base = load_checkpoint(_require(args.base, "--base"))
    data = [codec.tuple(s, r, c) for s, r, c in zip(src, ref, cons)]
    mcfg = base.cfg.with_variant(cfg.encoder, cfg.integrator)
    result = train(data, mcfg, cfg.finetune_epochs, cfg.seed, init=base, lr=cfg.lr, batch_size=cfg.batch_size,
                   warmup=cfg.warmup)
    digest = save_checkpoint(result.model, args.out)
    print(f"checkpoint={args.out} sha256={digest}")
    return 0


def cmd_translate(args) -> int:
    cfg = resolve_config(args)
    srcs = read_lines(_require(args.src, "--src"))
    cons = read_constraints(_require(args.constraints, "--constraints")) if args.constraints else [[]] * len(srcs)
    _aligned(srcs, cons, "source", "constraints")
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    codec = load_codec(Path(args.codec))
    hyps, meta = translate_lines(model, codec, srcs, cons, cfg.decoder, cfg.beam)
    write_lines(args.out, hyps)
    if args.meta:
        Path(args.meta).write_text("".join(m + "\n" for m in meta), encoding="utf-8")
    return 0


def cmd_evaluate(args) -> int:
    hyp = read_lines(_require(args.hyp, "--hyp"))
    ref = read_lines(_require(args.ref, "--ref"))
    _aligned(hyp, ref, "hypothesis", "reference")
    text = bleu4(hyp, ref).render()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_pipeline(args) -> int:
    """Generate training constraints, train, fine-tune, then constrain and translate the test set."""
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    train_src = read_lines(_require(cfg.train_src, "train_src"))
    train_ref = read_lines(_require(cfg.train_ref, "train_ref"))
    test_src = read_lines(_require(cfg.test_src, "test_src"))
    test_ref = read_lines(Path(cfg.test_ref)) if cfg.test_ref else None
    _aligned(train_src, train_ref, "training source", "training reference")
    if test_ref is not None:
        _aligned(test_src, test_ref, "test source", "test reference")
    scenario = cfg.scenario
    if scenario != "auto" and not cfg.test_constraints and test_ref is None:
        raise UsageError(f"scenario {scenario} needs test_constraints or test_ref")

    freq_src = cg.FrequencyTable.from_corpus(train_src)
    freq_tgt = cg.FrequencyTable.from_corpus(train_ref)
    table = cg.build_alignment_table(list(zip(train_src, train_ref)), cfg.em_iterations, cfg.prune_threshold)
    table.save(out / "table.tsv")
    log.info("stage: training constraints (%s)", scenario)
    train_cons, _ = generate_constraints(cfg, scenario, train_src, train_ref, freq_src, freq_tgt, table, cfg.seed,
                                         cfg.train_replace_prob, 0)
    write_constraints(out / "constraints.train.tsv", train_cons)

    if cfg.test_constraints and scenario != "auto":
        test_cons = read_constraints(_require(cfg.test_constraints, "test_constraints"))
        _aligned(test_src, test_cons, "test source", "test constraints")
        positions = None
    else:
        test_cons, positions = generate_constraints(
            cfg, scenario, test_src, test_ref or [[]] * len(test_src), freq_src, freq_tgt, table, cfg.seed + 1,
            cfg.replace_prob, cfg.noise_count)
    write_constraints(out / "constraints.test.tsv", test_cons)
    if positions is not None:
        cg.write_noise_positions(out / "noise.test.txt", positions)

    log.info("stage: baseline training")
    codec = _train_codec(cfg, train_src, train_ref)
    save_codec(codec, out)
    base = train([codec.tuple(s, r) for s, r in zip(train_src, train_ref)],
                 cfg.model_config(len(codec.src_vocab), len(codec.tgt_vocab)), cfg.epochs, cfg.seed,
                 lr=cfg.lr, batch_size=cfg.batch_size, warmup=cfg.warmup)
    base_hash = save_checkpoint(base.model, out / "checkpoint.base.bin")
    log.info("stage: fine-tuning %s-%s", cfg.encoder, cfg.integrator)
    data = [codec.tuple(s, r, c) for s, r, c in zip(train_src, train_ref, train_cons)]
    tuned = train(data, base.model.cfg.with_variant(cfg.encoder, cfg.integrator), cfg.finetune_epochs, cfg.seed,
                  init=base.model, lr=cfg.lr, batch_size=cfg.batch_size, warmup=cfg.warmup)
    ft_hash = save_checkpoint(tuned.model, out / "checkpoint.ft.bin")

    log.info("stage: translating %d sentences with %s", len(test_src), cfg.decoder)
    model = tuned.model if cfg.decoder == "beam" else base.model
    hyps, meta = translate_lines(model, codec, test_src, test_cons, cfg.decoder, cfg.beam)
    write_lines(out / "hyp.txt", hyps)
    (out / "hyp.meta.txt").write_text("".join(m + "\n" for m in meta), encoding="utf-8")

    report = [f"scenario={scenario}", f"decoder={cfg.decoder}", f"sentences={len(test_src)}"]
    if test_ref is not None:
        report.append(f"noisy_rate={100 * cg.noisy_rate(test_cons, test_ref):.4f}")
        text = bleu4(hyps, test_ref).render()
    else:
        text = ""
    (out / "report.txt").write_text(text + "".join(r + "\n" for r in report), encoding="utf-8")
    manifest = [f"config_sha256={cfg.digest()}", f"seed={cfg.seed}", f"checkpoint.base.bin={base_hash}",
                f"checkpoint.ft.bin={ft_hash}"]
    (out / "manifest.txt").write_text("".join(m + "\n" for m in manifest), encoding="utf-8")
    sys.stdout.write(text + "".join(r + "\n" for r in report))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p: argparse.ArgumentParser, *keys: str) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--seed", type=int)
    for key in keys:
        kind = {"int": int, "float": float}.get(FIELD_TYPES[key], str)
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind)


MODEL_KEYS = ("d_model", "heads", "ff_dim", "enc_layers", "dec_layers", "dropout", "max_len")
TRAIN_KEYS = ("epochs", "lr", "batch_size", "warmup", "bpe_merges", "vocab_size", "train_src", "train_ref")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmnt", description="Constraint-memory NMT toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("bpe", help="learn, apply or undo BPE")
    p.add_argument("mode", choices=("learn", "apply", "undo"))
    p.add_argument("--input", required=True)
    p.add_argument("--model")
    p.add_argument("--output")
    _config_flags(p, "bpe_merges")
    p.set_defaults(func=cmd_bpe)

    p = sub.add_parser("build-table", help="IBM Model 1 word translation table")
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p, "em_iterations", "prune_threshold")
    p.set_defaults(func=cmd_build_table)

    p = sub.add_parser("gen-constraints", help="constraints for scenario 1 (perfect), 2 (noisy) or 3 (auto)")
    p.add_argument("--src")
    p.add_argument("--ref")
    p.add_argument("--table")
    p.add_argument("--freq-corpus", help="corpus defining word rarity (default: the input itself)")
    p.add_argument("--out", required=True)
    p.add_argument("--noise-out", help="noise positions, comma-separated per line")
    _config_flags(p, "scenario", "k", "replace_prob", "noise_count")
    p.set_defaults(func=cmd_gen_constraints)

    p = sub.add_parser("train", help="train an unconstrained baseline")
    p.add_argument("--codec", required=True, help="directory for BPE models and vocabularies")
    p.add_argument("--out", required=True)
    _config_flags(p, *MODEL_KEYS, *TRAIN_KEYS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="add constraint memory to a baseline and fine-tune")
    p.add_argument("--base", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--constraints", required=True)
    p.add_argument("--out", required=True)
    _config_flags(p, "encoder", "integrator", "finetune_epochs", "lr", "batch_size", "warmup", "train_src",
                  "train_ref")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("translate", help="decode a source file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--constraints")
    p.add_argument("--out", required=True)
    p.add_argument("--meta", help="sidecar with log-prob, coverage flags and micros per line")
    _config_flags(p, "decoder", "beam")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU-4")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="end-to-end run for one scenario")
    _config_flags(p, *MODEL_KEYS, *TRAIN_KEYS, "encoder", "integrator", "scenario", "k", "replace_prob",
                  "train_replace_prob", "noise_count", "finetune_epochs", "decoder", "beam", "test_src", "test_ref",
                  "test_constraints", "out_dir")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cmnt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, UnicodeDecodeError) as exc:
        print(f"cmnt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"cmnt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
