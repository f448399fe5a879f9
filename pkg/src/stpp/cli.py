"""Command-line surface: simulate, ingest, split, fit-baseline, train,
evaluate, predict, export-density.

Every command is one process, seeded and bit-reproducible. Exit code 0
means all outputs were written and finite; on failure a machine-readable
error JSON goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import classical, events, gmm, train as trainmod
from .autodiff import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config
from .events import (
    EventSequence,
    load_dataset,
    normalized_axis_times,
    parse_event_csv,
    save_dataset,
    window_sequences,
    write_event_csv,
)
from .neural import NetConfig, init_params
from .rng import STREAM_SIMULATE, make_rng
from .simulate import PinwheelConfig, make_pinwheel_dataset, thinning_sample

TIME_MODELS = {"homo-poisson": "poisson", "hawkes": "hawkes", "self-correcting": "self_correcting"}
SPACE_MODELS = ("gmm-pairwise", "gmm-kcluster")
PAIRWISE_FIT_CAP = 10  # sequences used to fit the pairwise bandwidth/decay


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    rng = make_rng(args.seed, STREAM_SIMULATE)
    out = Path(args.output)
    if args.process == "pinwheel":
        cfg = PinwheelConfig(
            n_clusters=args.clusters,
            per_cluster=args.per_cluster,
            radial_std=args.radial_std,
            tangential_std=args.tangential_std,
            rate=args.rate,
        )
        hawkes = classical.TemporalModelParams.hawkes(args.mu, args.alpha, args.beta)
        evs = make_pinwheel_dataset(cfg, hawkes, rng)
        write_event_csv(evs, 2, out)
        manifest = {
            "kind": "pinwheel",
            "seed": args.seed,
            "count": len(evs),
            "d": 2,
            "clusters": args.clusters,
            "per_cluster": args.per_cluster,
            "hawkes": hawkes.to_dict(),
        }
    else:
        if args.process == "poisson":
            model = classical.TemporalModelParams.poisson(args.lam)
        elif args.process == "hawkes":
            model = classical.TemporalModelParams.hawkes(args.mu, args.alpha, args.beta)
        else:
            model = classical.TemporalModelParams.self_correcting(args.mu, args.alpha, args.beta)
        times = thinning_sample(
            model, rng, n=args.n if args.horizon is None else None, horizon=args.horizon
        )
        evs = [events.Event(t=float(t), x=(), m=1.0) for t in times]
        write_event_csv(evs, 0, out)
        manifest = {
            "kind": args.process,
            "seed": args.seed,
            "count": len(evs),
            "d": 0,
            "model": model.to_dict(),
        }
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {manifest['count']} events to {out}")
    return 0


# ---------------------------------------------------------------------------
# ingest / split


def cmd_ingest(args) -> int:
    data = Path(args.input).read_bytes()
    evs = parse_event_csv(data, args.d)
    if not evs:
        raise CliError("no events in input")
    write_event_csv(evs, args.d, args.output)
    print(f"validated {len(evs)} events (d={args.d}); canonical copy at {args.output}")
    return 0


def cmd_split(args) -> int:
    data = Path(args.input).read_bytes()
    evs = parse_event_csv(data, args.d)
    sequences = window_sequences(evs, args.seq_len, args.overlap, args.l_out)
    dataset = events.split_dataset(sequences, seed=args.seed)
    dataset = events.normalize(dataset)
    save_dataset(
        args.output, evs, args.d, args.seq_len, args.overlap, args.l_out, args.seed,
        dataset.stats,
    )
    print(
        f"dataset at {args.output}: {len(dataset.train)} train / {len(dataset.val)} val / "
        f"{len(dataset.test)} test sequences of length {args.seq_len}"
    )
    return 0


# ---------------------------------------------------------------------------
# baselines


def _axis_times(seq: EventSequence) -> np.ndarray:
    return normalized_axis_times(seq)


def cmd_fit_baseline(args) -> int:
    dataset = load_dataset(args.data)
    out = Path(args.output)
    if args.model in TIME_MODELS:
        seqs = [_axis_times(s) for s in dataset.train]
        model, meta = classical.fit_mle(TIME_MODELS[args.model], seqs)
        classical.save_model(model, meta, out)
        print(f"fitted {args.model}: {model.to_dict()['params']} (mean NLL {meta.nll:.4f})")
    elif args.model == "gmm-pairwise":
        subset = list(dataset.train)[:PAIRWISE_FIT_CAP]
        xs = [s.norm.x[: s.n_in] for s in subset]
        ts = [_axis_times(s)[: s.n_in] for s in subset]
        params = gmm.gmm_pairwise_fit(xs, ts)
        out.write_text(
            json.dumps(
                {
                    "kind": "gmm-pairwise",
                    "params": {
                        "scales": [float(v) for v in params.scales],
                        "gamma": float(params.gamma),
                    },
                },
                indent=2,
            )
        )
        print(f"fitted gmm-pairwise: scales {params.scales}, gamma {params.gamma:.4f}")
    elif args.model == "gmm-kcluster":
        out.write_text(json.dumps({"kind": "gmm-kcluster", "params": {"k": args.k}}, indent=2))
        print(f"gmm-kcluster configured with K={args.k} (fit per history at evaluation)")
    else:
        raise CliError(f"unknown model {args.model!r}")
    return 0


def _evaluate_classical(args, dataset) -> dict:
    """Per-sequence test NLL of the output events, Table-1 conventions."""
    time_model = None
    pairwise_params = None
    if args.model in TIME_MODELS:
        if args.params:
            time_model = classical.load_model(args.params)
        else:
            time_model, _ = classical.fit_mle(
                TIME_MODELS[args.model], [_axis_times(s) for s in dataset.train]
            )
    elif args.model == "gmm-pairwise":
        if args.params:
            doc = json.loads(Path(args.params).read_text())
            pairwise_params = gmm.GmmPairwiseParams(
                scales=np.asarray(doc["params"]["scales"], dtype=float),
                gamma=float(doc["params"]["gamma"]),
            )
        else:
            subset = list(dataset.train)[:PAIRWISE_FIT_CAP]
            pairwise_params = gmm.gmm_pairwise_fit(
                [s.norm.x[: s.n_in] for s in subset],
                [_axis_times(s)[: s.n_in] for s in subset],
            )
    elif args.model != "gmm-kcluster":
        raise CliError(f"unknown model {args.model!r}")

    nll_time, nll_space = [], []
    for idx, seq in enumerate(dataset.test):
        if args.model == "gmm-pairwise":
            space_model = gmm.PairwiseGmm(pairwise_params)
        elif args.model == "gmm-kcluster":
            space_model = gmm.KClusterGmm(args.k, make_rng(args.seed, idx))
        else:
            space_model = None
        res = classical.baseline_loss(
            _axis_times(seq),
            seq.n_in,
            time_model=time_model,
            space_model=space_model,
            locations=seq.norm.x if space_model is not None else None,
            phase="test",
        )
        if time_model is not None:
            nll_time.append(res["nll_time_out"])
        if space_model is not None:
            nll_space.append(res["nll_space_out"])
    out: dict = {}
    if nll_time:
        arr = np.asarray(nll_time)
        out["nll_time"] = {"mean": float(arr.mean()), "std": float(arr.std()), "per_seq": nll_time}
    if nll_space:
        arr = np.asarray(nll_space)
        out["nll_space"] = {"mean": float(arr.mean()), "std": float(arr.std()), "per_seq": nll_space}
    return out


def _fmt_cell(stats: dict | None) -> str:
    if stats is None:
        return "n/a"
    return f"{stats['mean']:.4f}±{stats['std']:.4f}"


def _print_table(model: str, res: dict) -> None:
    print(f"{'model':<16} {'nll_time±std':<20} {'nll_space±std':<20} {'nll_joint±std':<20}")
    print(
        f"{model:<16} {_fmt_cell(res.get('nll_time')):<20} "
        f"{_fmt_cell(res.get('nll_space')):<20} {_fmt_cell(res.get('nll_joint')):<20}"
    )


def _check_finite(res: dict) -> None:
    for key, stats in res.items():
        if isinstance(stats, dict) and "mean" in stats:
            if not math.isfinite(stats["mean"]):
                raise CliError(f"non-finite {key} in results")


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    if args.model == "network":
        run = load_run_config(args.config) if args.config else RunConfig()
        _check_lengths(run, dataset)
        cfg = _net_config(run, dataset)
        store = load_checkpoint(args.ckpt) if args.ckpt else init_params(cfg, run.seed)
        res = trainmod.evaluate(
            store, dataset.test, cfg, time_source=args.time_source, seed=args.seed
        )
    else:
        res = _evaluate_classical(args, dataset)
    _check_finite(res)
    _print_table(args.model, res)
    if args.output:
        Path(args.output).write_text(json.dumps({"model": args.model, **res}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# network train / predict / export


def _net_config(run: RunConfig, dataset) -> NetConfig:
    return NetConfig(
        d_space=dataset.d,
        n_in=run.input_length,
        l_out=run.output_length,
        d_model=run.embedding_dim,
        n_layers=run.attention_layers,
        n_heads=run.attention_heads,
        dropout=run.dropout_rate,
        time_flow=run.time_flow,
    )


def _check_lengths(run: RunConfig, dataset) -> None:
    seq = dataset.train[0]
    if seq.n_in != run.input_length or seq.l_out != run.output_length:
        raise CliError(
            f"dataset windows are ({seq.n_in}, {seq.l_out}) but config asks "
            f"({run.input_length}, {run.output_length})"
        )


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "ablation": args.ablation,
        "data": args.data,
    }
    run = load_run_config(args.config, overrides)
    if run.data is None:
        raise CliError("no dataset: pass --data or set `data` in the config")
    dataset = load_dataset(run.data)
    _check_lengths(run, dataset)
    cfg = _net_config(run, dataset)
    store = init_params(cfg, run.seed)
    tc = trainmod.TrainConfig(
        epochs=run.epochs,
        batch_size=run.batch_size,
        lr0=run.learning_rate,
        patience=run.patience,
        seed=run.seed,
        ablation=run.ablation,
        time_source=run.time_source,
    )
    out_dir = Path(args.output or run.output or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    best, history = trainmod.train(store, dataset, cfg, tc, log_path=out_dir / "history.csv")
    save_checkpoint(best, out_dir / "best.stpp1")
    (out_dir / "run.json").write_text(json.dumps(run.to_dict(), indent=2))
    last = history[-1]
    if not (math.isfinite(last["train_loss"]) and math.isfinite(last["val_loss"])):
        raise CliError("training aborted on non-finite loss (best checkpoint saved)")
    print(
        f"trained {last['epoch']} epochs; val loss {history[0]['val_loss']:.4f} -> "
        f"{min(h['val_loss'] for h in history):.4f}; checkpoint at {out_dir / 'best.stpp1'}"
    )
    return 0


def _pick_sequence(dataset, name: str) -> EventSequence:
    try:
        split, idx = name.rsplit("_", 1)
        return list(getattr(dataset, split))[int(idx)]
    except (ValueError, AttributeError, IndexError):
        raise CliError(
            f"bad sequence name {name!r}; use e.g. test_0, val_3, train_12"
        ) from None


def cmd_predict(args) -> int:
    dataset = load_dataset(args.data)
    run = load_run_config(args.config) if args.config else RunConfig()
    _check_lengths(run, dataset)
    cfg = _net_config(run, dataset)
    store = load_checkpoint(args.ckpt)
    seq = _pick_sequence(dataset, args.seq)
    pred = trainmod.predict(
        store, seq, cfg, dataset.stats, time_source=args.time_source, seed=args.seed
    )
    doc = trainmod.prediction_json(pred)
    doc["true_t"] = [float(e.t) for e in seq.events[seq.n_in :]]
    doc["true_x"] = [[float(v) for v in e.x] for e in seq.events[seq.n_in :]]
    payload = json.dumps(doc, indent=2)
    if args.output:
        Path(args.output).write_text(payload)
    print(payload)
    return 0


def cmd_export_density(args) -> int:
    dataset = load_dataset(args.data)
    run = load_run_config(args.config) if args.config else RunConfig()
    _check_lengths(run, dataset)
    cfg = _net_config(run, dataset)
    store = load_checkpoint(args.ckpt)
    seq = _pick_sequence(dataset, args.seq)
    grids = trainmod.export_density(
        store, seq, cfg, dataset.stats, steps=args.steps, seed=args.seed,
        time_source=args.time_source,
    )
    paths = trainmod.write_density_grids(grids, args.output)
    pred = trainmod.predict(store, seq, cfg, dataset.stats, seed=args.seed)
    pred_path = Path(args.output) / "prediction.json"
    doc = trainmod.prediction_json(pred)
    doc["true_t"] = [float(e.t) for e in seq.events[seq.n_in :]]
    doc["true_x"] = [[float(v) for v in e.x] for e in seq.events[seq.n_in :]]
    doc["history_tail"] = [
        [float(v) for v in e.x] for e in seq.events[max(0, seq.n_in - 50) : seq.n_in]
    ]
    pred_path.write_text(json.dumps(doc, indent=2))
    print(f"wrote {len(paths)} grids and prediction JSON to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stpp",
        description="Marked spatio-temporal point processes: simulate, fit, forecast.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate synthetic event data")
    sim.add_argument("process", choices=["pinwheel", "hawkes", "poisson", "self-correcting"])
    sim.add_argument("--clusters", type=int, default=15)
    sim.add_argument("--per-cluster", type=int, default=150)
    sim.add_argument("--radial-std", type=float, default=0.3)
    sim.add_argument("--tangential-std", type=float, default=0.1)
    sim.add_argument("--rate", type=float, default=0.25)
    sim.add_argument("--mu", type=float, default=0.5)
    sim.add_argument("--alpha", type=float, default=0.5)
    sim.add_argument("--beta", type=float, default=1.0)
    sim.add_argument("--lam", type=float, default=1.0)
    sim.add_argument("-n", type=int, default=None)
    sim.add_argument("--horizon", type=float, default=None)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("-o", "--output", required=True)
    sim.set_defaults(fn=cmd_simulate)

    ing = sub.add_parser("ingest", help="validate an event CSV")
    ing.add_argument("--input", required=True)
    ing.add_argument("-d", type=int, required=True)
    ing.add_argument("-o", "--output", required=True)
    ing.set_defaults(fn=cmd_ingest)

    spl = sub.add_parser("split", help="window, split, and normalize a CSV into a dataset dir")
    spl.add_argument("--input", required=True)
    spl.add_argument("-d", type=int, required=True)
    spl.add_argument("--seq-len", type=int, default=events.DEFAULT_SEQ_LEN)
    spl.add_argument("--overlap", type=int, default=events.DEFAULT_OVERLAP)
    spl.add_argument("--l-out", type=int, default=events.DEFAULT_L_OUT)
    spl.add_argument("--seed", type=int, default=0)
    spl.add_argument("-o", "--output", required=True)
    spl.set_defaults(fn=cmd_split)

    fit = sub.add_parser("fit-baseline", help="fit a classical baseline on the train split")
    fit.add_argument("--data", required=True)
    fit.add_argument("--model", required=True, choices=list(TIME_MODELS) + list(SPACE_MODELS))
    fit.add_argument("--k", type=int, default=5)
    fit.add_argument("-o", "--output", required=True)
    fit.set_defaults(fn=cmd_fit_baseline)

    trn = sub.add_parser("train", help="train the forecasting network")
    trn.add_argument("--config", default=None)
    trn.add_argument("--data", default=None)
    trn.add_argument("--epochs", type=int, default=None)
    trn.add_argument("--seed", type=int, default=None)
    trn.add_argument(
        "--ablation", choices=["none", "zero-encoder", "zero-decoder"], default=None
    )
    trn.add_argument("-o", "--output", default=None)
    trn.set_defaults(fn=cmd_train)

    ev = sub.add_parser("evaluate", help="Table-style test NLL for a model")
    ev.add_argument("--data", required=True)
    ev.add_argument(
        "--model", required=True,
        choices=list(TIME_MODELS) + list(SPACE_MODELS) + ["network"],
    )
    ev.add_argument("--params", default=None, help="fitted baseline JSON")
    ev.add_argument("--ckpt", default=None, help="network checkpoint")
    ev.add_argument("--config", default=None)
    ev.add_argument("--k", type=int, default=5)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--time-source", choices=["true_times", "sampled"], default="true_times")
    ev.add_argument("-o", "--output", default=None)
    ev.set_defaults(fn=cmd_evaluate)

    prd = sub.add_parser("predict", help="forecast the withheld events of one sequence")
    prd.add_argument("--data", required=True)
    prd.add_argument("--ckpt", required=True)
    prd.add_argument("--config", default=None)
    prd.add_argument("--seq", required=True, help="split_index, e.g. test_0")
    prd.add_argument("--seed", type=int, default=0)
    prd.add_argument("--time-source", choices=["true_times", "sampled"], default="true_times")
    prd.add_argument("-o", "--output", default=None)
    prd.set_defaults(fn=cmd_predict)

    exd = sub.add_parser("export-density", help="write spatial density grids for one sequence")
    exd.add_argument("--data", required=True)
    exd.add_argument("--ckpt", required=True)
    exd.add_argument("--config", default=None)
    exd.add_argument("--seq", required=True)
    exd.add_argument("--steps", type=int, default=100)
    exd.add_argument("--seed", type=int, default=0)
    exd.add_argument("--time-source", choices=["true_times", "sampled"], default="true_times")
    exd.add_argument("-o", "--output", required=True)
    exd.set_defaults(fn=cmd_export_density)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "ablation", None):
        args.ablation = args.ablation.replace("-", "_")
    try:
        return args.fn(args)
    except ConfigError as exc:
        _emit_error("config", exc.problems)
        return 1
    except (CliError, ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        _emit_error(type(exc).__name__, [str(exc)])
        return 1


def _emit_error(kind: str, messages: list[str]) -> None:
    sys.stderr.write(json.dumps({"error": {"type": kind, "messages": messages}}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
