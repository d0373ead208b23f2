"""Command-line entry point.

Subcommands cover the full workflow: train toy models, generate labeled
data, train the pre-verifier, decode, benchmark, sweep, and re-price traces.
Every command takes a flat key=value config file (flags override file values,
file values override defaults) and writes a manifest recording the effective
config hash, input checksums, and package version, so reruns are
reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, rng
from .bench import (CostModel, ablation_sweeps, make_policy_factory,
                    oracle_dynamic_run, run_policy, rows_to_csv,
                    rows_to_long_csv, simulate_cost, sweep_fixed_gamma)
from .checkpoint import file_checksum
from .corpus import default_corpus_path, sample_prompts
from .dataset_io import LabeledDataset, load_dataset, save_dataset
from .errors import AdaspecError, ArgumentError, ConfigError
from .halting import HaltConfig, PreVerifier, load_preverifier, save_preverifier
from .labeling import collect_training_steps
from .lm_train import LmTrainConfig, train_toy_lm
from .model_io import load_lm, save_lm
from .models import ModelSpec
from .packing import pack_steps
from .pv_train import TrainHyperparams, evaluate_classifier, train_preverifier
from .records import read_trace, write_trace
from .specdec import DecodeConfig
from .tokenizer import ByteVocab, load_corpus

COMMANDS = ("train-lm", "gen-data", "train-pv", "decode", "bench", "sweep",
            "oracle", "report")


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="flat key=value config file; flags override it")
    parser.add_argument("--dump-config", action="store_true",
                        help="print the effective config and exit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=str, default="out")
    parser.add_argument("--target", type=str, default=None)
    parser.add_argument("--draft", type=str, default=None)
    parser.add_argument("--preverifier", type=str, default=None)
    parser.add_argument("--prompts", type=str, default=None,
                        help="text file with one prompt per line")
    parser.add_argument("--corpus", type=str, default=str(default_corpus_path()))
    parser.add_argument("--num-prompts", type=int, default=16)
    parser.add_argument("--max-new-tokens", type=int, default=64)
    parser.add_argument("--mode", choices=("greedy", "stochastic"), default="greedy")
    parser.add_argument("--stop", type=str, default="\\n",
                        help="stop text (escapes allowed); empty disables")
    parser.add_argument("--policy", choices=("fixed", "pacer", "prob", "entropy",
                                             "oracle"), default="fixed")
    parser.add_argument("--gamma", type=int, default=4)
    parser.add_argument("--block-size", type=int, default=4)
    parser.add_argument("--threshold", type=float, default=0.70)
    parser.add_argument("--growth", type=float, default=1.05)
    parser.add_argument("--max-rounds", type=int, default=8)
    parser.add_argument("--criterion", choices=("mean", "any", "last"),
                        default="mean")
    parser.add_argument("--scope", choices=("full", "local-draft", "local-block"),
                        default="full")
    parser.add_argument("--heuristic-threshold", type=float, default=0.3)
    parser.add_argument("--cost-draft", type=float, default=16.52)
    parser.add_argument("--cost-target", type=float, default=67.31)
    parser.add_argument("--cost-pv", type=float, default=1.81)
    parser.add_argument("--horizon", type=int, default=50)


def build_parser(command: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=f"adaspec {command}")
    _add_shared(parser)
    if command == "train-lm":
        parser.add_argument("--draft-layers", type=int, default=1)
        parser.add_argument("--draft-dim", type=int, default=32)
        parser.add_argument("--draft-heads", type=int, default=2)
        parser.add_argument("--target-layers", type=int, default=3)
        parser.add_argument("--target-dim", type=int, default=48)
        parser.add_argument("--target-heads", type=int, default=4)
        parser.add_argument("--context", type=int, default=160)
        parser.add_argument("--steps", type=int, default=400)
        parser.add_argument("--lm-lr", type=float, default=3e-3)
        parser.add_argument("--batch-size", type=int, default=24)
        parser.add_argument("--seq-len", type=int, default=80)
    elif command == "gen-data":
        parser.add_argument("--gamma-train", type=int, default=50)
        parser.add_argument("--max-len", type=int, default=96)
    elif command == "train-pv":
        parser.add_argument("--data", type=str, required=False)
        parser.add_argument("--lr", type=float, default=2e-3)
        parser.add_argument("--epochs", type=int, default=8)
        parser.add_argument("--batch-size", type=int, default=4)
        parser.add_argument("--heads", type=int, default=4)
        parser.add_argument("--max-positions", type=int, default=64)
        parser.add_argument("--pos-mode", choices=("learned", "sinusoidal"),
                            default="learned")
        parser.add_argument("--heldout-fraction", type=float, default=0.2)
        parser.add_argument("--hidden-mode", choices=("recompute", "stored"),
                            default="recompute")
        parser.add_argument("--balance-negatives", action="store_true")
    elif command == "decode":
        parser.add_argument("--prompt", type=str, default=None,
                            help="decode a single literal prompt")
    elif command == "sweep":
        parser.add_argument("--kind", choices=("gamma", "ablation"), default="gamma")
        parser.add_argument("--gammas", type=str, default="1:10",
                            help="lo:hi inclusive range or comma list")
    elif command == "report":
        parser.add_argument("--trace", type=str, required=False)
    return parser


def parse_kv_file(path: Path) -> dict[str, str]:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def apply_config_file(parser: argparse.ArgumentParser, path: str) -> None:
    values = parse_kv_file(Path(path))
    known = {}
    for action in parser._actions:
        if action.dest in ("help",):
            continue
        if action.dest in values:
            raw = values[action.dest]
            if isinstance(action, argparse._StoreTrueAction):
                known[action.dest] = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                known[action.dest] = action.type(raw)
            elif action.choices is not None or isinstance(action.default, str) \
                    or action.default is None:
                known[action.dest] = raw
            else:
                known[action.dest] = raw
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    parser.set_defaults(**known)


def effective_config(args: argparse.Namespace) -> dict:
    skip = {"config", "dump_config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def dump_config_text(config: dict) -> str:
    lines = []
    for key, value in config.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key.replace('_', '-')} = {value}")
    return "\n".join(lines) + "\n"


def _config_hash(config: dict) -> str:
    return hashlib.sha256(dump_config_text(config).encode("utf-8")).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict,
                   inputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": {k: (sorted(v) if isinstance(v, frozenset) else v)
                   for k, v in config.items()},
        "config_sha256": _config_hash(config),
        "input_checksums": inputs,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
        encoding="utf-8")


def _stop_tokens(args, vocab: ByteVocab) -> frozenset[int]:
    text = args.stop.encode("utf-8").decode("unicode_escape") if args.stop else ""
    ids = []
    for ch in text:
        try:
            ids.extend(vocab.encode(ch))
        except ArgumentError:
            continue
    return frozenset(ids)


def _require(path: str | None, flag: str) -> Path:
    if not path:
        raise ConfigError(f"missing required flag {flag}")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag} path does not exist: {p}")
    return p


def _load_models(args):
    target, vocab = load_lm(_require(args.target, "--target"))
    draft, dvocab = load_lm(_require(args.draft, "--draft"))
    if vocab is None:
        vocab = dvocab
    if vocab is None:
        raise ConfigError("checkpoints carry no vocabulary; retrain with train-lm")
    return target, draft, vocab


def _load_prompts(args, vocab: ByteVocab) -> list[list[int]]:
    if getattr(args, "prompt", None):
        return [vocab.encode(args.prompt)]
    if args.prompts:
        path = _require(args.prompts, "--prompts")
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln]
        if not lines:
            raise ConfigError(f"--prompts file is empty: {path}")
        return [vocab.encode(ln) for ln in lines]
    corpus = load_corpus(_require(args.corpus, "--corpus"))
    gen = rng.substream(args.seed, rng.PROMPTS)
    return [vocab.encode(p) for p in sample_prompts(corpus, args.num_prompts, gen)]


def _decode_config(args, stop: frozenset[int]) -> DecodeConfig:
    return DecodeConfig(mode=args.mode, gamma=args.gamma,
                        max_new_tokens=args.max_new_tokens, stop_tokens=stop,
                        seed=args.seed)


def _halt_config(args) -> HaltConfig:
    return HaltConfig(block_size=args.block_size, threshold=args.threshold,
                      growth=args.growth, max_rounds=args.max_rounds,
                      criterion=args.criterion,
                      scope=args.scope.replace("-", "_"))


def _cost_model(args) -> CostModel:
    return CostModel(c_draft=args.cost_draft, c_target=args.cost_target,
                     c_preverify=args.cost_pv)


def _policy_bundle(args, config, halt):
    pv = None
    if args.policy == "pacer":
        pv = load_preverifier(_require(args.preverifier, "--preverifier"))
    if args.policy == "oracle":
        return None, pv
    factory = make_policy_factory(args.policy, config, halt=halt, pv=pv,
                                  heuristic_threshold=args.heuristic_threshold)
    return factory, pv


def cmd_train_lm(args, out_dir: Path) -> dict:
    corpus_path = _require(args.corpus, "--corpus")
    corpus = load_corpus(corpus_path)
    vocab = ByteVocab.from_text(corpus)
    for role, layers, dim, heads, steps_scale in (
            ("draft", args.draft_layers, args.draft_dim, args.draft_heads, 0.875),
            ("target", args.target_layers, args.target_dim, args.target_heads, 1.25)):
        spec = ModelSpec("transformer", vocab.size, layers, dim, heads,
                         args.context, seed=rng.torch_seed(args.seed, role) % (1 << 31))
        cfg = LmTrainConfig(steps=max(1, int(args.steps * steps_scale)),
                            batch_size=args.batch_size, seq_len=args.seq_len,
                            lr=args.lm_lr, seed=args.seed)
        result = train_toy_lm(corpus, spec, cfg)
        path = save_lm(out_dir / f"{role}.ckpt", result.model, vocab=vocab,
                       sidecar={"role": role, "val_perplexity": result.val_perplexity,
                                "final_loss": result.final_loss})
        print(f"{role}: val_ppl={result.val_perplexity:.3f} -> {path}")
    return {"corpus": file_checksum(corpus_path)}


def cmd_gen_data(args, out_dir: Path) -> dict:
    target, draft, vocab = _load_models(args)
    stop = _stop_tokens(args, vocab)
    prompts = _load_prompts(args, vocab)
    all_prompts, responses, steps = [], [], []
    for prompt in prompts:
        response, prompt_steps = collect_training_steps(
            target, draft, prompt, gamma_train=args.gamma_train,
            max_len=args.max_len, stop_tokens=stop)
        if prompt_steps:
            all_prompts.append(prompt)
            responses.append(response)
            steps.append(prompt_steps)
    ds = LabeledDataset(prompts=all_prompts, responses=responses, steps=steps,
                        gamma_train=args.gamma_train, seed=args.seed,
                        meta={"target": file_checksum(args.target),
                              "draft": file_checksum(args.draft)})
    path = save_dataset(out_dir / "dataset.bin", ds)
    print(f"{len(all_prompts)} prompts, {ds.total_positions} labeled positions -> {path}")
    return {"target": file_checksum(args.target), "draft": file_checksum(args.draft)}


def cmd_train_pv(args, out_dir: Path) -> dict:
    draft, _ = load_lm(_require(args.draft, "--draft"))
    data_path = _require(args.data, "--data")
    ds = load_dataset(data_path)
    store_model = draft if args.hidden_mode == "stored" else None
    examples = [pack_steps(p, r, s, draft_model=store_model)
                for p, r, s in zip(ds.prompts, ds.responses, ds.steps)]
    heldout_count = max(1, int(len(examples) * args.heldout_fraction))
    heldout, train = examples[:heldout_count], examples[heldout_count:]
    if not train:
        raise ConfigError("dataset too small for the requested held-out fraction")
    pv = PreVerifier(d_model=draft.hidden_dim, heads=args.heads,
                     max_positions=args.max_positions, pos_mode=args.pos_mode,
                     seed=args.seed, vocab_size=draft.vocab_size,
                     context_len=draft.context_len)
    hp = TrainHyperparams(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                          seed=args.seed, balance_negatives=args.balance_negatives)
    recompute_model = None if args.hidden_mode == "stored" else draft
    result = train_preverifier(pv, train, hp, draft_model=recompute_model,
                               heldout=heldout)
    path = save_preverifier(out_dir / "preverifier.ckpt", pv,
                            sidecar={"heldout_auc": result.heldout_auc,
                                     "final_loss": result.final_loss})
    metrics = evaluate_classifier(pv, heldout, recompute_model)
    (out_dir / "metrics.json").write_text(json.dumps({
        "final_loss": result.final_loss,
        "epoch_losses": result.epoch_losses,
        "heldout_auc": metrics.auc,
        "heldout_accuracy": metrics.accuracy,
        "heldout_positions": metrics.positions,
        "calibration": metrics.calibration,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"final_loss={result.final_loss:.4f} heldout_auc={metrics.auc:.3f} -> {path}")
    return {"draft": file_checksum(args.draft), "data": file_checksum(data_path)}


def _run_one_policy(args, target, draft, vocab, prompts, config, cm):
    halt = _halt_config(args)
    factory, pv = _policy_bundle(args, config, halt)
    params = {"policy": args.policy, "gamma": args.gamma}
    if args.policy == "pacer":
        params.update({"b": halt.block_size, "t": halt.threshold,
                       "rho": halt.growth, "criterion": halt.criterion,
                       "scope": halt.scope})
    return run_policy(target, draft, prompts, config, factory, cm,
                      name=args.policy, params=params, pv=pv,
                      horizon=args.horizon)


def cmd_decode(args, out_dir: Path) -> dict:
    target, draft, vocab = _load_models(args)
    stop = _stop_tokens(args, vocab)
    prompts = _load_prompts(args, vocab)
    config = _decode_config(args, stop)
    cm = _cost_model(args)
    run = _run_one_policy(args, target, draft, vocab, prompts, config, cm)
    texts = []
    for prompt, out in zip(prompts, run.outputs):
        texts.append(json.dumps({"prompt": vocab.decode(prompt),
                                 "output": vocab.decode(out)}, sort_keys=True))
    (out_dir / "decode.jsonl").write_text("\n".join(texts) + "\n", encoding="utf-8")
    write_trace(out_dir / "trace.jsonl", run.records)
    print(f"{len(prompts)} prompts decoded; tau={run.report.tau:.3f} "
          f"sim_tokens_per_s={run.report.tokens_per_s:.3f}")
    return {"target": file_checksum(args.target), "draft": file_checksum(args.draft)}


def _write_report(out_dir: Path, rows: list[dict], config_keys: list[str],
                  summary: dict, wall_ms: float | None) -> None:
    (out_dir / "report.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    (out_dir / "report_long.csv").write_text(rows_to_long_csv(rows, config_keys),
                                             encoding="utf-8")
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if wall_ms is not None:
        # measured wall clock lives outside the deterministic report tables
        (out_dir / "timing.json").write_text(
            json.dumps({"wall_ms": wall_ms}) + "\n", encoding="utf-8")


def cmd_bench(args, out_dir: Path) -> dict:
    target, draft, vocab = _load_models(args)
    stop = _stop_tokens(args, vocab)
    prompts = _load_prompts(args, vocab)
    config = _decode_config(args, stop)
    cm = _cost_model(args)
    run = _run_one_policy(args, target, draft, vocab, prompts, config, cm)
    row = dict(run.params)
    row.update(run.report.row())
    summary = {"policy": args.policy, "report": run.report.row(),
               "shares": run.report.shares, "prompts": len(prompts)}
    _write_report(out_dir, [row], list(run.params.keys()), summary,
                  run.report.wall_ms)
    write_trace(out_dir / "trace.jsonl", run.records)
    print(f"policy={args.policy} tau={run.report.tau:.3f} "
          f"tokens_per_s={run.report.tokens_per_s:.3f} speedup={run.report.speedup:.3f}")
    return {"target": file_checksum(args.target), "draft": file_checksum(args.draft)}


def _parse_gammas(text: str) -> list[int]:
    if ":" in text:
        lo, hi = text.split(":", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x]


def cmd_sweep(args, out_dir: Path) -> dict:
    target, draft, vocab = _load_models(args)
    stop = _stop_tokens(args, vocab)
    prompts = _load_prompts(args, vocab)
    config = _decode_config(args, stop)
    cm = _cost_model(args)
    inputs = {"target": file_checksum(args.target), "draft": file_checksum(args.draft)}
    if args.kind == "gamma":
        sweep = sweep_fixed_gamma(target, draft, prompts, _parse_gammas(args.gammas),
                                  cm, config)
        summary = {"kind": "gamma", "best_gamma": sweep["best_gamma"],
                   "prompts": len(prompts)}
        _write_report(out_dir, sweep["rows"], ["gamma"], summary, None)
        print(f"best gamma: {sweep['best_gamma']}")
    else:
        pv = load_preverifier(_require(args.preverifier, "--preverifier"))
        inputs["preverifier"] = file_checksum(args.preverifier)
        tables = ablation_sweeps(target, draft, pv, prompts, cm, config,
                                 base=_halt_config(args))
        for name, rows in tables.items():
            key = {"block_size": "b", "threshold": "t", "growth": "rho"}[name]
            (out_dir / f"ablation_{name}.csv").write_text(rows_to_csv(rows),
                                                          encoding="utf-8")
            (out_dir / f"ablation_{name}_long.csv").write_text(
                rows_to_long_csv(rows, [key]), encoding="utf-8")
        (out_dir / "summary.json").write_text(
            json.dumps({"kind": "ablation", "tables": sorted(tables)},
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print("ablation tables written")
    return inputs


def cmd_oracle(args, out_dir: Path) -> dict:
    target, draft, vocab = _load_models(args)
    stop = _stop_tokens(args, vocab)
    prompts = _load_prompts(args, vocab)
    config = _decode_config(args, stop)
    cm = _cost_model(args)
    sweep = sweep_fixed_gamma(target, draft, prompts, _parse_gammas("1:10"), cm,
                              config)
    best_row = next(r for r in sweep["rows"] if r["gamma"] == sweep["best_gamma"])
    records = []
    for prompt in prompts:
        _, recs = oracle_dynamic_run(target, draft, prompt, config, args.horizon)
        records.extend(recs)
    oracle_report = simulate_cost(records, cm)
    rows = [
        {"config": f"fixed_gamma={sweep['best_gamma']}",
         **{k: v for k, v in best_row.items() if k != "gamma"}},
        {"config": "oracle_window", **oracle_report.row()},
    ]
    summary = {
        "best_fixed_gamma": sweep["best_gamma"],
        "fixed": best_row, "oracle": oracle_report.row(),
        "draft_forward_reduction": best_row["draft_forwards"] - oracle_report.draft_forwards,
        "target_forward_reduction": best_row["target_forwards"] - oracle_report.target_forwards,
        "relative_speedup": best_row["sim_ms"] / oracle_report.sim_ms,
    }
    _write_report(out_dir, rows, ["config"], summary, None)
    write_trace(out_dir / "trace.jsonl", records)
    print(f"oracle vs fixed-{sweep['best_gamma']}: "
          f"relative speedup {summary['relative_speedup']:.3f}")
    return {"target": file_checksum(args.target), "draft": file_checksum(args.draft)}


def cmd_report(args, out_dir: Path) -> dict:
    trace_path = _require(args.trace, "--trace")
    records = read_trace(trace_path)
    if not records:
        raise ConfigError(f"trace is empty: {trace_path}")
    report = simulate_cost(records, _cost_model(args))
    rows = [{"config": "trace", **report.row()}]
    _write_report(out_dir, rows, ["config"],
                  {"report": report.row(), "shares": report.shares}, None)
    print(f"tokens={report.total_tokens} tau={report.tau:.3f} "
          f"tokens_per_s={report.tokens_per_s:.3f}")
    return {"trace": file_checksum(trace_path)}


HANDLERS = {
    "train-lm": cmd_train_lm,
    "gen-data": cmd_gen_data,
    "train-pv": cmd_train_pv,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(f"usage: adaspec {{{','.join(COMMANDS)}}} [flags]\n"
              "run 'adaspec <command> --help' for command flags")
        return 0
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        print(f"[config error] unknown command {command!r}; "
              f"expected one of {', '.join(COMMANDS)}", file=sys.stderr)
        return 2
    parser = build_parser(command)
    try:
        if "--config" in rest:
            cfg_path = rest[rest.index("--config") + 1]
            apply_config_file(parser, cfg_path)
        args = parser.parse_args(rest)
        config = effective_config(args)
        if args.dump_config:
            print(dump_config_text(config), end="")
            return 0
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        inputs = HANDLERS[command](args, out_dir)
        write_manifest(out_dir, command, config, inputs or {})
        return 0
    except (ConfigError, ArgumentError) as exc:
        print(f"[config error] {exc}", file=sys.stderr)
        return 2
    except AdaspecError as exc:
        print(f"[runtime error] {json.dumps({'error': str(exc)})}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"[runtime error] {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse usage errors exit with code 2
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
