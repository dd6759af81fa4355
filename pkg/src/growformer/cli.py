"""Command-line entry point: pretrain, expand, verify, compare, dump-attention.

Exit codes: 0 success, 1 verification/threshold/training failure, 2 usage error.
Settings resolve as flags > ``--config`` JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .expansion import (
    AKI,
    DIRECT_COPY,
    FPI,
    RAND,
    GeometryError,
    SourceTargetPair,
    eval_loss,
    expand,
    expansion_report,
    random_eval_batches,
    verify_preservation,
)
from .numerics import limit_threads
from .training import (
    LossLog,
    TrainSchedule,
    TrainingDiverged,
    final_window_loss,
    flops_at_step,
    make_corpus,
    make_windows,
    steps_to_threshold,
    two_stage_train,
)
from .transformer import (
    DECODER,
    ENCODER,
    N_SPECIAL,
    Batch,
    ModelConfig,
    dump_attention,
    rand_init,
)

log = logging.getLogger("growformer")

MODEL_FILE = "model.grwf"
LOSS_FILE = "loss.csv"
REPORT_FILE = "report.txt"
SUMMARY_FILE = "summary.csv"

DEFAULTS = {
    "layers": 2,
    "hidden": 64,
    "heads": 4,
    "ffn": None,
    "variant": ENCODER,
    "max_seq": 32,
    "seq": 32,
    "batch": 32,
    "lr": 1e-3,
    "warmup": 100,
    "epochs": 10,
    "steps": None,
    "eb": 2,
    "lb": 1,
    "two_stage": False,
    "seed": 0,
    "tol": 1e-4,
    "n_inputs": 100,
    "mapping": "random",
    "strategy": FPI,
    "strategies": "scratch,directcopy,fpi,aki,aki+two-stage",
    "window": 100,
    "threshold": None,
    "flush_every": 100,
    "mask_ratio": 0.15,
    "corpus_length": 100_000,
    "vocab": 64,
}

STRATEGY_ALIASES = {"scratch": RAND, "rand": RAND, "directcopy": DIRECT_COPY, "fpi": FPI, "aki": AKI}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- arguments

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag values (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn", type=int, help="FFN inner size (default 4 x hidden)")
    p.add_argument("--variant", choices=[ENCODER, DECODER])
    p.add_argument("--max-seq", type=int, dest="max_seq")


def _add_target(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", help="source checkpoint")
    p.add_argument("--target-layers", type=int, dest="target_layers")
    p.add_argument("--target-hidden", type=int, dest="target_hidden")
    p.add_argument("--target-heads", type=int, dest="target_heads")
    p.add_argument("--target-ffn", type=int, dest="target_ffn")
    p.add_argument("--mapping", choices=["random", "balanced"],
                   help="tail sampling of mappings: uniform with replacement, or balanced")


def _add_corpus(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="'markov[:VOCAB[:LENGTH[:SEED[:ALPHA]]]]' or a file path (byte-level)")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="total optimisation steps (overrides --epochs)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seq", type=int, help="training sequence length")
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--two-stage", action="store_const", const=True, dest="two_stage")
    p.add_argument("--eb", type=int, help="sub-model training epochs")
    p.add_argument("--lb", type=int, help="layers updated per sub-model step")
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p.add_argument("--flush-every", type=int, dest="flush_every")
    p.add_argument("--window", type=int, help="moving-average window for reported and threshold losses")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="growformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a model from random init (or --init checkpoint)")
    _add_common(p)
    _add_model(p)
    _add_corpus(p)
    _add_train(p)
    p.add_argument("--init", help="start from this checkpoint instead of random init")

    p = sub.add_parser("expand", help="grow a checkpoint to a larger architecture")
    _add_common(p)
    _add_target(p)
    _add_corpus(p)
    p.add_argument("--strategy", choices=["scratch", "directcopy", "fpi", "aki"])
    p.add_argument("--tol", type=float)
    p.add_argument("--n-inputs", type=int, dest="n_inputs")

    p = sub.add_parser("verify", help="compare the outputs of two checkpoints")
    _add_common(p)
    _add_corpus(p)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--tol", type=float)
    p.add_argument("--n-inputs", type=int, dest="n_inputs")
    p.add_argument("--seq", type=int)

    p = sub.add_parser("compare", help="train several initialisation strategies and compare")
    _add_common(p)
    _add_target(p)
    _add_corpus(p)
    _add_train(p)
    p.add_argument("--strategies", help="comma list from scratch,directcopy,fpi,aki (suffix +two-stage)")
    p.add_argument("--threshold", type=float, help="loss threshold (default: scratch final loss)")

    p = sub.add_parser("dump-attention", help="write per-layer/head attention matrices as CSV")
    _add_common(p)
    _add_corpus(p)
    p.add_argument("--source")
    p.add_argument("--text", help="input text (byte-level ids); default: first corpus window")
    p.add_argument("--seq", type=int)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags, config file and defaults into one settings dict."""
    cfg: dict = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}") from exc
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    out = dict(DEFAULTS)
    out.update({k: v for k, v in cfg.items()})
    out.update({k: v for k, v in vars(args).items() if v is not None})
    return out


def _require(s: dict, *names: str) -> None:
    missing = [n for n in names if s.get(n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# --------------------------------------------------------------------------- helpers

def load_corpus(spec: str, vocab_default: int, length_default: int) -> tuple[np.ndarray, int]:
    """Parse a corpus spec; returns ``(stream, vocab)``."""
    if spec.startswith("markov") or spec.startswith("synthetic-markov"):
        parts = spec.split(":")
        vocab = int(parts[1]) if len(parts) > 1 and parts[1] else vocab_default
        length = int(parts[2]) if len(parts) > 2 and parts[2] else length_default
        seed = int(parts[3]) if len(parts) > 3 and parts[3] else 0
        alpha = float(parts[4]) if len(parts) > 4 and parts[4] else 0.1
        try:
            stream = make_corpus("synthetic-markov", vocab=vocab, length=length, seed=seed, alpha=alpha)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        return stream, vocab
    path = spec[5:] if spec.startswith("file:") else spec
    if not Path(path).is_file():
        raise UsageError(f"corpus file not found: {path}")
    return make_corpus("file", path=path), 256 + N_SPECIAL


def schedule_from(s: dict, n_layers: int, two_stage: bool | None = None) -> TrainSchedule:
    two = s["two_stage"] if two_stage is None else two_stage
    return TrainSchedule(
        peak_lr=float(s["lr"]),
        warmup_steps=int(s["warmup"]),
        epochs=int(s["epochs"]),
        submodel_epochs=int(s["eb"]) if two else 0,
        layer_step=min(int(s["lb"]), n_layers) if n_layers else 1,
        batch_size=int(s["batch"]),
        seq_len=int(s["seq"]),
        total_steps=int(s["steps"]) if s.get("steps") else None,
        mask_ratio=float(s["mask_ratio"]),
        seed=int(s["seed"]),
    )


def target_config(source: ModelConfig, s: dict) -> ModelConfig:
    hidden = s.get("target_hidden") or source.hidden
    heads = s.get("target_heads")
    if heads is None:
        if hidden % source.head_dim:
            raise UsageError(f"--target-hidden {hidden} is not a multiple of head dim {source.head_dim}")
        heads = hidden // source.head_dim
    ffn = s.get("target_ffn") or (source.d_ff * hidden // source.hidden)
    try:
        return source.with_(n_layers=s.get("target_layers") or source.n_layers,
                            hidden=hidden, n_heads=heads, d_ff=ffn)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _train_logged(config, params, schedule, corpus, out_dir: Path, flush_every: int):
    """Train while streaming the loss log to ``out_dir/loss.csv`` every ``flush_every`` steps."""
    loss_path = out_dir / LOSS_FILE
    partial = LossLog()

    def on_step(rec, _params):
        partial.append(rec)
        if flush_every and rec.step % flush_every == 0:
            partial.flush(loss_path)

    try:
        return two_stage_train(config, params, schedule, corpus, on_step=on_step)
    finally:
        if partial.records:
            partial.flush(loss_path)


# --------------------------------------------------------------------------- commands

def cmd_pretrain(s: dict) -> int:
    _require(s, "corpus", "out")
    corpus, vocab = load_corpus(s["corpus"], s["vocab"], s["corpus_length"])
    if s.get("init"):
        config, params = checkpoint.load(s["init"])
        if config.vocab != vocab:
            raise UsageError(f"checkpoint vocab {config.vocab} does not match corpus vocab {vocab}")
    else:
        if s["layers"] < 1:
            raise UsageError("--layers must be at least 1")
        try:
            config = ModelConfig(variant=s["variant"], n_layers=s["layers"], hidden=s["hidden"],
                                 n_heads=s["heads"], d_ff=s["ffn"] or 4 * s["hidden"],
                                 vocab=vocab, max_seq=max(s["max_seq"], s["seq"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        params = rand_init(config, s["seed"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    schedule = schedule_from(s, config.n_layers)
    try:
        schedule.validate(config.n_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    params, lg = _train_logged(config, params, schedule, corpus, out, s["flush_every"])
    checkpoint.save(config, params, out / MODEL_FILE)
    w = min(s["window"], len(lg))
    first, last = float(lg.losses[:w].mean()), final_window_loss(lg, w)
    log.info("pretrain: %d steps, loss %.4f -> %.4f", len(lg), first, last)
    print(f"steps={len(lg)} initial_loss={first:.6f} final_loss={last:.6f}")
    return 0


def cmd_expand(s: dict) -> int:
    _require(s, "source", "out")
    src_cfg, src_params = checkpoint.load(s["source"])
    tgt_cfg = target_config(src_cfg, s)
    strategy = STRATEGY_ALIASES[s["strategy"]]
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        pair = SourceTargetPair(src_cfg, src_params, tgt_cfg)
        params, plan = expand(pair, strategy, seed=s["seed"], balanced=s["mapping"] == "balanced")
    except GeometryError as exc:
        raise UsageError(str(exc)) from exc
    stream = None
    if s.get("corpus"):
        stream, _ = load_corpus(s["corpus"], src_cfg.vocab, s["corpus_length"])
    report = verify_preservation(src_cfg, src_params, tgt_cfg, params, n_inputs=s["n_inputs"],
                                 tol=s["tol"], seed=s["seed"], stream=stream)
    checkpoint.save(tgt_cfg, params, out / MODEL_FILE)
    (out / REPORT_FILE).write_text(expansion_report(pair, params, plan, s["strategy"], report))
    print(f"strategy={s['strategy']} max_logit_gap={report.max_logit_gap:.3e} "
          f"source_loss={report.source_loss:.6f} target_loss={report.target_loss:.6f}")
    return 0


def cmd_verify(s: dict) -> int:
    _require(s, "source", "target")
    a_cfg, a = checkpoint.load(s["source"])
    b_cfg, b = checkpoint.load(s["target"])
    stream = None
    if s.get("corpus"):
        stream, _ = load_corpus(s["corpus"], a_cfg.vocab, s["corpus_length"])
    try:
        rep = verify_preservation(a_cfg, a, b_cfg, b, n_inputs=s["n_inputs"], tol=s["tol"],
                                  seed=s["seed"], stream=stream,
                                  seq_len=min(s["seq"], a_cfg.max_seq, b_cfg.max_seq))
    except GeometryError as exc:
        raise UsageError(str(exc)) from exc
    status = "PASS" if rep.passed else "FAIL"
    text = (f"max_logit_gap={rep.max_logit_gap!r}\nsource_loss={rep.source_loss!r}\n"
            f"target_loss={rep.target_loss!r}\nloss_gap={rep.loss_gap!r}\n"
            f"tol={rep.tol!r}\nstatus={status}\n")
    print(text, end="")
    if s.get("out"):
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_FILE).write_text(text)
    return 0 if rep.passed else 1


def parse_strategies(text: str) -> list[tuple[str, str, bool]]:
    """``"aki+two-stage"`` -> ``("aki+two-stage", "aki", True)``."""
    out = []
    for token in [t.strip() for t in text.split(",") if t.strip()]:
        base, _, suffix = token.partition("+")
        if base not in STRATEGY_ALIASES or suffix not in ("", "two-stage"):
            raise UsageError(f"unknown strategy {token!r}")
        out.append((token, base, suffix == "two-stage"))
    if not out:
        raise UsageError("no strategies given")
    return out


def summarize(logs: dict[str, LossLog], window: int, threshold: float | None,
              initial: dict[str, float] | None = None) -> tuple[float, list[dict]]:
    """Steps/FLOPs to threshold per run and savings relative to scratch."""
    if threshold is None:
        if "scratch" not in logs:
            raise UsageError("--threshold is required when scratch is not among the strategies")
        threshold = final_window_loss(logs["scratch"], window)
    base = logs.get("scratch")
    base_steps = steps_to_threshold(base, threshold, window) if base is not None else None
    base_flops = flops_at_step(base, base_steps) if base is not None else None
    rows = []
    for name, lg in logs.items():
        steps = steps_to_threshold(lg, threshold, window)
        flops = flops_at_step(lg, steps)
        row = {
            "strategy": name,
            "steps_to_threshold": steps,
            "flops_to_threshold": flops,
            "step_savings_pct": (100.0 * (1.0 - steps / base_steps)) if base_steps and math.isfinite(steps)
            and math.isfinite(base_steps) else (-math.inf if base_steps else math.nan),
            "flop_savings_pct": (100.0 * (1.0 - flops / base_flops)) if base_flops and math.isfinite(flops)
            and math.isfinite(base_flops) else (-math.inf if base_flops else math.nan),
            "initial_eval_loss": (initial or {}).get(name, math.nan),
            "final_loss": final_window_loss(lg, window),
            "threshold": threshold,
        }
        rows.append(row)
    return threshold, rows


SUMMARY_HEADER = ["strategy", "steps_to_threshold", "flops_to_threshold", "step_savings_pct",
                  "flop_savings_pct", "initial_eval_loss", "final_loss", "threshold"]


def write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([r["strategy"]] + [repr(float(r[k])) for k in SUMMARY_HEADER[1:]])


def read_summary(path: str | Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {r["strategy"]: {k: (float(v) if k != "strategy" else v) for k, v in r.items()}
                for r in csv.DictReader(fh)}


def cmd_compare(s: dict) -> int:
    _require(s, "source", "corpus", "out")
    runs = parse_strategies(s["strategies"])
    src_cfg, src_params = checkpoint.load(s["source"])
    tgt_cfg = target_config(src_cfg, s)
    corpus, vocab = load_corpus(s["corpus"], src_cfg.vocab, s["corpus_length"])
    if vocab != src_cfg.vocab:
        raise UsageError(f"corpus vocab {vocab} does not match source vocab {src_cfg.vocab}")
    try:
        pair = SourceTargetPair(src_cfg, src_params, tgt_cfg)
        if any(base == "aki" for _, base, _ in runs) and src_cfg.n_layers < 2:
            raise GeometryError("AKI needs at least two source layers")
    except GeometryError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    eval_batches = random_eval_batches(tgt_cfg, 200, min(s["seq"], tgt_cfg.max_seq), seed=s["seed"] + 7,
                                       stream=corpus)
    logs: dict[str, LossLog] = {}
    initial: dict[str, float] = {}
    status = 0
    for name, base, two in runs:
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        params, _ = expand(pair, STRATEGY_ALIASES[base], seed=s["seed"],
                           balanced=s["mapping"] == "balanced")
        initial[name] = eval_loss(tgt_cfg, params, eval_batches)
        schedule = schedule_from(s, tgt_cfg.n_layers, two_stage=two)
        log.info("compare: %s (initial eval loss %.4f)", name, initial[name])
        try:
            _, lg = _train_logged(tgt_cfg, params, schedule, corpus, run_dir, s["flush_every"])
        except TrainingDiverged as exc:
            log.error("compare: %s diverged: %s", name, exc)
            status = 1
            break
        logs[name] = lg
    window = int(s["window"])
    if logs and (s.get("threshold") is not None or "scratch" in logs):
        threshold, rows = summarize(logs, window, s.get("threshold"), initial)
        write_summary(out / SUMMARY_FILE, rows)
        lines = [f"threshold={threshold!r} window={window}"]
        for r in rows:
            lines.append(f"{r['strategy']}: steps={r['steps_to_threshold']} "
                         f"savings={r['step_savings_pct']:.1f}% flop_savings={r['flop_savings_pct']:.1f}% "
                         f"initial={r['initial_eval_loss']:.4f} final={r['final_loss']:.4f}")
        text = "\n".join(lines) + "\n"
        (out / REPORT_FILE).write_text(text)
        print(text, end="")
    return status


def cmd_dump_attention(s: dict) -> int:
    _require(s, "source", "out")
    config, params = checkpoint.load(s["source"])
    seq = min(s.get("seq") or config.max_seq, config.max_seq)
    if s.get("text") is not None:
        ids = np.frombuffer(s["text"].encode("utf-8"), dtype=np.uint8).astype(np.int64) + N_SPECIAL
        if ids.max(initial=0) >= config.vocab:
            ids = ids % (config.vocab - N_SPECIAL) + N_SPECIAL
        ids = ids[:seq]
    elif s.get("corpus"):
        stream, _ = load_corpus(s["corpus"], config.vocab, s["corpus_length"])
        ids = make_windows(stream, seq)[0]
    else:
        raise UsageError("dump-attention needs --text or --corpus")
    if len(ids) < 1:
        raise UsageError("empty input")
    batch = Batch(ids[None, :], np.full((1, len(ids)), -1), kind="lm" if config.variant == DECODER else "mlm")
    out = Path(s["out"])
    maps = dump_attention(config, params, batch, out / "attention.csv")
    print(f"wrote {maps.shape[0]} layers x {maps.shape[1]} heads of {maps.shape[2]}x{maps.shape[3]}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "expand": cmd_expand,
    "verify": cmd_verify,
    "compare": cmd_compare,
    "dump-attention": cmd_dump_attention,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("GROWFORMER_THREADS")
    if threads:
        limit_threads(int(threads))
    try:
        settings = resolve(args)
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        print(f"growformer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"growformer {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except checkpoint.CheckpointError as exc:
        print(f"growformer {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
