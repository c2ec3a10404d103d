"""Command-line entry points.

    matquant pretrain  --config run.json --out DIR [--seed N]
    matquant train     --config run.json --out DIR [--seed N]
    matquant eval      CKPT --bits R [--mode plain|extra] [--config run.json] [--out FILE]
    matquant slice     CKPT --bits R [--mode plain|extra] --out FILE
    matquant mixnmatch CKPT --targets 3,4,5 [--strategy all|NAME[,NAME]] [--mode M] --out DIR [--jobs N]
    matquant histogram CKPT [CKPT ...] --bits R [--mode M] --out FILE

Exit codes: 0 ok, 2 usage or config error, 3 training diverged, 4 unreadable checkpoint.

CSV column orders:

* mixnmatch: ``strategy,target,per_layer_bits,effective_bits,eval_ce``
  (extra mode appends ``effective_bits_extra``)
* histogram: ``checkpoint,layer,bucket_0..bucket_{2^R-1}`` (extra mode adds
  ``overflow``), then ``total,mean_bucket``; ``layer`` is ``all`` on the
  aggregate row of each checkpoint
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import QuantizedModel
from .config import ConfigError, EvalSettings, RunConfig, load_config
from .data import eval_batches, load_corpus, split
from .errors import ContractError, DivergenceError, FormatError
from .mixnmatch import LEVELS, STRATEGIES, MixPlan, effective_bits_extra, evaluate_plan, generate_plans, pareto_front
from .model import ToyTransformer
from .objectives import QuantAux
from .packing import atomic_write, load, save
from .quant import QuantizedTensor, QuantParams, code_histogram, slice_tensor
from .trainer import pretrain_float, train_matquant, write_records

log = logging.getLogger("matquant")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_FORMAT = 0, 2, 3, 4


class UsageError(ContractError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _held_out(settings: EvalSettings, max_len: int | None = None):
    _, held = split(load_corpus())
    T = settings.seq_len if max_len is None else min(settings.seq_len, max_len)
    return list(eval_batches(held, settings.batch_size, T, settings.batches))


def _eval_settings(path) -> EvalSettings:
    return load_config(path).eval if path else EvalSettings()


def _write_records(records, path: Path) -> None:
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        tmp.unlink()
    write_records(records, tmp)
    tmp.replace(path)


def _float_model(run: RunConfig) -> ToyTransformer:
    model = ToyTransformer(run.model)
    if run.init is not None:
        p = Path(run.init)
        if not p.is_file():
            raise ConfigError(f"init weights not found: {p}")
        model.load_state_dict(dict(np.load(p)))
        return model
    if run.pretrain is None:
        raise ConfigError("train needs either 'init' or a 'pretrain' section")
    return pretrain_float(model, load_corpus(), run.pretrain)[0]


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _check_bits(qm: QuantizedModel, bits: int) -> None:
    if not (1 <= bits <= qm.c):
        raise UsageError(f"--bits {bits} outside [1, {qm.c}] for this {qm.c}-bit checkpoint")


def _run_config(args) -> RunConfig:
    run = load_config(args.config)
    return run.with_seed(args.seed) if args.seed is not None else run


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    run = _run_config(args)
    if run.pretrain is None:
        raise ConfigError("pretrain needs a 'pretrain' section")
    out = Path(args.out)
    model, records = pretrain_float(ToyTransformer(run.model), load_corpus(), run.pretrain)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **model.state_dict())
    atomic_write(out / "float.npz", buf.getvalue())
    _write_records(records, out / "runs.jsonl")
    atomic_write(out / "config.json", _dump(run.raw))
    final = records[-1].eval_loss[0] if records else None
    print(_dump({"eval_ce": final, "weights": str(out / "float.npz")}), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    if run.objective is None:
        raise ConfigError("train needs an 'objective' section")
    out = Path(args.out)
    model = _float_model(run)
    aux = QuantAux(model) if run.use_aux else None
    result = train_matquant(model, load_corpus(), run.train, aux)
    mq = run.train.matquant()
    sidecar = min(mq.R) if mq.slice_mode == "extra" else None
    out.mkdir(parents=True, exist_ok=True)
    save(result.quantized, out / "model.matq", sidecar_bits=sidecar)
    _write_records(result.records, out / "runs.jsonl")
    atomic_write(out / "config.json", _dump(run.raw))
    summary = {"eval_loss": {str(k): v for k, v in result.final_eval().items()}, "checkpoint": str(out / "model.matq")}
    if result.diverged_layers:
        summary["diverged_layers"] = result.diverged_layers
    print(_dump(summary), end="")
    return EXIT_OK


def eval_metrics(qm: QuantizedModel, bits: int, mode: str, batches) -> dict:
    ce = qm.evaluate(batches, bits, mode)
    out = {"bits": bits, "mode": mode, "eval_ce": ce, "ppl": math.exp(ce)}
    if mode == "extra":
        per_layer = qm.overflow_fractions(bits)
        params = qm.params_per_layer()
        frac = float(np.dot(per_layer, params) / sum(params))
        out["overflow_fraction"] = frac
        out["effective_bits"] = effective_bits_extra(MixPlan((bits,) * len(params), "uniform", params), per_layer)
    return out


def cmd_eval(args) -> int:
    qm = load(args.checkpoint)
    _check_bits(qm, args.bits)
    metrics = eval_metrics(qm, args.bits, args.mode, _held_out(_eval_settings(args.config), qm.config.seq_len))
    text = _dump(metrics)
    if args.out:
        atomic_write(args.out, text)
    print(text, end="")
    return EXIT_OK


def sliced_checkpoint(qm: QuantizedModel, r: int) -> QuantizedModel:
    """An r-bit checkpoint holding the plain slice of ``qm``.

    Slice codes ``k * 2**(c - r)`` are stored as ``k`` with the scale
    multiplied and the zero-point divided by ``2**(c - r)``; both are exact
    power-of-two rescales, so dequantized values are unchanged.
    """
    step = 2 ** (qm.c - r)
    tensors = {}
    for name, q in qm.tensors.items():
        s = slice_tensor(q, r, "plain")
        p = q.params
        params = QuantParams(p.alpha * np.float32(step), p.z / np.float32(step), r, axis=p.axis)
        tensors[name] = QuantizedTensor((s.codes // step).astype(np.uint16), params)
    return QuantizedModel(qm.config, r, tensors, dict(qm.float_params), dict(qm.affine))


def cmd_slice(args) -> int:
    qm = load(args.checkpoint)
    _check_bits(qm, args.bits)
    if args.mode == "plain":
        if args.bits < 2:
            raise UsageError("plain slices are stored as codes of at least 2 bits")
        save(sliced_checkpoint(qm, args.bits), args.out)
    else:
        # the overflow bucket needs an extra bit, so keep the full codes and add the sidecar
        save(qm, args.out, sidecar_bits=args.bits)
    print(_dump({"bits": args.bits, "mode": args.mode, "checkpoint": str(args.out)}), end="")
    return EXIT_OK


_WORKER: dict = {}


def _init_worker(path: str, mode: str, settings: EvalSettings) -> None:
    _WORKER["qm"] = load(path)
    _WORKER["mode"] = mode
    _WORKER["batches"] = _held_out(settings, _WORKER["qm"].config.seq_len)


def _eval_bits(bits: tuple[int, ...]) -> float:
    qm = _WORKER["qm"]
    return evaluate_plan(qm, MixPlan(bits, "job"), _WORKER["batches"], _WORKER["mode"])


def mixnmatch_rows(qm: QuantizedModel, strategies, targets, mode: str, batches, jobs: int = 1, path=None):
    """One row per (strategy, target): the best of the plans tied nearest to the target."""
    params = qm.params_per_layer()
    plans = {(s, t): generate_plans(qm.config.n_layers, t, s, params) for s in strategies for t in targets}
    unique = sorted({p.per_layer_bits for ps in plans.values() for p in ps})
    if jobs > 1 and path is not None and len(unique) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(str(path), mode, batches_settings(batches))) as ex:
            losses = dict(zip(unique, ex.map(_eval_bits, unique)))
    else:
        shell = qm.build()
        losses = {b: evaluate_plan(qm, MixPlan(b, "x"), batches, mode, shell) for b in unique}
    overflow = {b: qm.overflow_fractions(b) for b in LEVELS} if mode == "extra" else {}
    rows = []
    for (s, t), ps in plans.items():
        for p in ps:
            p.eval_loss = losses[p.per_layer_bits]
        best = min(ps, key=lambda p: (p.eval_loss, p.per_layer_bits))
        row = {"strategy": s, "target": t, "plan": best}
        if mode == "extra":
            layer_frac = [overflow[b][l] for l, b in enumerate(best.per_layer_bits)]
            row["effective_bits_extra"] = effective_bits_extra(best, layer_frac)
        rows.append(row)
    return rows


def batches_settings(batches) -> EvalSettings:
    x, _ = batches[0]
    return EvalSettings(batches=len(batches), batch_size=x.shape[0], seq_len=x.shape[1])


def cmd_mixnmatch(args) -> int:
    path = Path(args.checkpoint)
    qm = load(path)
    strategies = STRATEGIES if args.strategy == "all" else tuple(args.strategy.split(","))
    for s in strategies:
        if s not in STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}; choose from {STRATEGIES} or 'all'")
    targets = _parse_floats(args.targets, "--targets")
    if not targets:
        raise UsageError("--targets is empty")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    batches = _held_out(_eval_settings(args.config), qm.config.seq_len)
    rows = mixnmatch_rows(qm, strategies, targets, args.mode, batches, args.jobs, path)

    fields = ["strategy", "target", "per_layer_bits", "effective_bits", "eval_ce"]
    if args.mode == "extra":
        fields.append("effective_bits_extra")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        p = row["plan"]
        line = [row["strategy"], f"{row['target']:g}", "-".join(map(str, p.per_layer_bits)), repr(p.effective_bits), repr(p.eval_loss)]
        if args.mode == "extra":
            line.append(repr(row["effective_bits_extra"]))
        w.writerow(line)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "mixnmatch.csv", buf.getvalue())
    front = pareto_front([r["plan"] for r in rows])
    atomic_write(out / "pareto.json", _dump([p.to_dict() for p in front]))
    print(buf.getvalue(), end="")
    return EXIT_OK


def histogram_rows(label: str, qm: QuantizedModel, bits: int, mode: str) -> list[list]:
    rows = []
    total = None
    for layer in range(qm.config.n_layers):
        counts = sum(code_histogram(qm.tensors[n], bits, mode) for n in qm.layer_targets(layer))
        total = counts if total is None else total + counts
        rows.append([label, str(layer), counts])
    rows.append([label, "all", total])
    return [[a, b, *map(int, c), int(c.sum()), float(np.dot(np.arange(c.size), c) / c.sum())] for a, b, c in rows]


def cmd_histogram(args) -> int:
    models = [(str(p), load(p)) for p in args.checkpoints]
    for _, qm in models:
        _check_bits(qm, args.bits)
    n = 2**args.bits
    header = ["checkpoint", "layer"] + [f"bucket_{k}" for k in range(n)]
    if args.mode == "extra":
        header.append("overflow")
    header += ["total", "mean_bucket"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for label, qm in models:
        rows = histogram_rows(label, qm, args.bits, args.mode)
        for row in rows:
            w.writerow(row[:-1] + [repr(row[-1])])
        log.info("%s: aggregate mean bucket %.6f at %d bits", label, rows[-1][-1], args.bits)
    atomic_write(args.out, buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="matquant", description="Nested integer quantization toolkit for a toy transformer.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def training(name, fn, text):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.set_defaults(fn=fn)

    training("pretrain", cmd_pretrain, "train the float model")
    training("train", cmd_train, "quantized training; writes model.matq and runs.jsonl")

    def with_ckpt(name, fn, text):
        p = sub.add_parser(name, help=text)
        p.add_argument("checkpoint")
        p.add_argument("--mode", choices=("plain", "extra"), default="plain")
        p.add_argument("--config", help="run config whose 'eval' section sets the held-out batches")
        p.set_defaults(fn=fn)
        return p

    p = with_ckpt("eval", cmd_eval, "held-out cross-entropy at one precision")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--out")
    p = with_ckpt("slice", cmd_slice, "write a checkpoint sliced to fewer bits")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--out", required=True)
    p = with_ckpt("mixnmatch", cmd_mixnmatch, "evaluate layer-wise precision plans")
    p.add_argument("--strategy", default="all")
    p.add_argument("--targets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("histogram", help="per-layer code histograms of one or more checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--mode", choices=("plain", "extra"), default="plain")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_histogram)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except DivergenceError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FORMAT
    except (ContractError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
