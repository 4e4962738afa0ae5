"""Command-line interface.

Subcommands: synth, train, eval, delta, affinity, ablate, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
Report-producing commands write a companion PNG figure next to each CSV
unless --no-plot is given.  The MTI_THREADS environment variable caps worker
threads for data generation (default 1, which keeps runs deterministic).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import ops
from .affinity import affinity_curve, average_curves, write_curve_csv
from .blocks import AttentionTransform, ResidualBlock, SEGate, TaskHead
from .config import SYNTH_TASKS, TASK_METRICS, RunConfig, format_scale, parse_config
from .errors import ConfigError, ContractViolation, DataError, NumericError
from .gradcheck import grad_check
from .losses import ce_loss, l1_loss, normal_loss, total_loss, weighted_bce
from .metrics import (
    MetricsReport,
    delta_m,
    f_best,
    mean_angle_error,
    miou,
    read_metrics_csv,
    rmse,
    write_delta_csv,
    write_metrics_csv,
)
from .model import FeatureHarmonizer, FeaturePropagation, Model, ModelConfig, TaskSpec
from .model import restore_checkpoint, save_checkpoint
from .synthdata import GenConfig, generate_sample, load_dataset, write_dataset
from .tensor import ParamStore, Tensor
from .training import log_header, train

GRADCHECK_TOL = 1e-4
GRADCHECK_EPS = 5e-5  # balances rounding vs truncation for desk-scale objectives


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; the contract is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _worker_threads() -> int:
    raw = os.environ.get("MTI_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MTI_THREADS must be an integer, got {raw!r}") from None


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return parse_config(args.config)
    return parse_config("", from_text=True)


def _load_samples(data_dir):
    cfg, samples = load_dataset(data_dir)
    if not samples:
        raise DataError(f"{data_dir}: dataset contains no samples")
    return cfg, samples


# -- synth ---------------------------------------------------------------------


def cmd_synth(args) -> int:
    run = _load_config(args)
    out_dir = Path(args.out_dir)
    try:
        write_dataset(
            run.data, out_dir, args.count,
            progress=lambda n: print(f"generated {n}/{args.count}"),
            threads=_worker_threads(),
        )
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out_dir}: {exc}") from exc
    print(f"wrote {args.count} samples to {out_dir}")
    return 0


# -- train ---------------------------------------------------------------------


def _format_cell(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def cmd_train(args) -> int:
    run = _load_config(args)
    meta, samples = _load_samples(args.data_dir)
    model_cfg = run.model_config(meta.num_classes)
    header = log_header(model_cfg)
    log_path = Path(args.log)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)

        def on_row(row):
            writer.writerow([_format_cell(row[col]) for col in header])
            fh.flush()

        model, rows = train(samples, model_cfg, run.optim, log_cb=on_row)
    save_checkpoint(model.store, args.out)
    if not args.no_plot:
        from .plotting import plot_training_log

        plot_training_log(rows, log_path.with_suffix(".png"))
    print(f"trained {run.optim.total_steps} steps; checkpoint {args.out}, log {args.log}")
    return 0


# -- eval ----------------------------------------------------------------------


def _forward_dataset(model: Model, model_cfg: ModelConfig, samples, batch_size: int):
    """Final predictions for every target task, stacked over the dataset."""
    preds: dict[str, list[np.ndarray]] = {t.name: [] for t in model_cfg.target_tasks}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = Tensor(np.stack([s.image for s in chunk]).astype(np.float64))
        out = model.forward(images)
        for name, tensor in out.final_predictions.items():
            preds[name].append(tensor.data)
    return {name: np.concatenate(parts) for name, parts in preds.items()}


def evaluate_model(model: Model, model_cfg: ModelConfig, samples, meta: GenConfig,
                   model_id: str, batch_size: int = 8) -> MetricsReport:
    preds = _forward_dataset(model, model_cfg, samples, batch_size)
    report = MetricsReport(model_id)
    for t in model_cfg.target_tasks:
        p = preds[t.name]
        if t.kind == "categorical":
            gt = np.stack([s.seg for s in samples]).astype(np.int64)
            value = miou(p.argmax(axis=1), gt, meta.num_classes)
        elif t.kind == "regression":
            gt = np.stack([s.depth for s in samples]).astype(np.float64)
            value = rmse(p[:, 0], gt)
        elif t.kind == "binary":
            gt = np.stack([s.edge for s in samples]).astype(np.int64)
            value = f_best(1.0 / (1.0 + np.exp(-p[:, 0])), gt)
        else:
            gt = np.stack([s.normals for s in samples]).astype(np.float64)
            value = mean_angle_error(p, gt)
        report.add(t.name, TASK_METRICS[t.kind], value, t.direction)
    return report


def cmd_eval(args) -> int:
    run = _load_config(args)
    meta, samples = _load_samples(args.data_dir)
    model_cfg = run.model_config(meta.num_classes)
    model = Model(model_cfg, seed=run.optim.seed)
    restore_checkpoint(model.store, args.checkpoint)
    model_id = args.model_id or Path(args.checkpoint).stem
    report = evaluate_model(model, model_cfg, samples, meta, model_id,
                            batch_size=run.optim.batch_size)
    write_metrics_csv(report, args.out)
    for task, (metric, value, _) in report.entries.items():
        print(f"{task} {metric} = {value:.4f}")
    return 0


# -- delta ----------------------------------------------------------------------


def cmd_delta(args) -> int:
    model = read_metrics_csv(args.model)
    baseline = read_metrics_csv(args.baseline)
    value = delta_m(model, baseline)
    write_delta_csv(model.model_id, baseline.model_id, value, args.out)
    print(f"delta_m = {value:.2f}%")
    return 0


# -- affinity ---------------------------------------------------------------------


_AFFINITY_KINDS = ("categorical", "binary", "regression")


def cmd_affinity(args) -> int:
    run = _load_config(args)
    _, samples = _load_samples(args.data_dir)
    names = [name for name, _ in run.task_roles if SYNTH_TASKS[name][0] in _AFFINITY_KINDS]
    if len(names) < 2:
        raise ConfigError(
            f"affinity analysis needs at least two label-space tasks, got {names}"
        )
    per_sample = []
    for s in samples:
        rasters = {}
        for name in names:
            kind = SYNTH_TASKS[name][0]
            raster = {"seg": s.seg.astype(np.int64), "depth": s.depth.astype(np.float64),
                      "edge": s.edge.astype(np.int64)}[name]
            rasters[name] = (raster, kind)
        per_sample.append(affinity_curve(rasters, run.affinity))
    rows = average_curves(per_sample)
    write_curve_csv(rows, args.out)
    if not args.no_plot:
        from .plotting import plot_affinity_curves

        plot_affinity_curves(rows, Path(args.out).with_suffix(".png"))
    print(f"wrote {len(rows)} curve rows to {args.out}")
    return 0


# -- ablate ----------------------------------------------------------------------


def cmd_ablate(args) -> int:
    run = _load_config(args)
    meta, samples = _load_samples(args.data_dir)
    target_specs = [t for t in run.tasks(meta.num_classes) if t.role == "target"]

    baseline = MetricsReport("single-task")
    for t in target_specs:
        single_cfg = run.model_config(meta.num_classes, tasks=[
            TaskSpec(t.name, t.kind, t.channels, lower_better=t.lower_better,
                     loss_weight=t.loss_weight, role="target")
        ])
        print(f"training single-task baseline for {t.name} ...")
        model, _ = train(samples, single_cfg, run.optim)
        rep = evaluate_model(model, single_cfg, samples, meta, f"st-{t.name}",
                             batch_size=run.optim.batch_size)
        metric, value, direction = rep.entries[t.name]
        baseline.add(t.name, metric, value, direction)

    metric_cols = [f"{t.name}_{TASK_METRICS[t.kind]}" for t in target_specs]
    header = ["scales", "fpm"] + metric_cols + ["delta_m"]
    rows = [["single-task", "n/a"]
            + [repr(baseline.value(t.name)) for t in target_specs]
            + ["0.00"]]
    plot_labels, plot_deltas = [], []
    all_scales = tuple(sorted(run.scales))
    for n in range(1, len(all_scales) + 1):
        scales = all_scales[:n]
        label = "+".join(format_scale(d) for d in sorted(scales))
        fpm_cell = "n/a" if n == 1 else ("on" if run.fpm else "off")
        cell_cfg = run.model_config(meta.num_classes, scales=scales)
        print(f"training ablation cell scales={label} fpm={fpm_cell} ...")
        model, _ = train(samples, cell_cfg, run.optim)
        rep = evaluate_model(model, cell_cfg, samples, meta, label,
                             batch_size=run.optim.batch_size)
        delta = delta_m(rep, baseline)
        rows.append([label, fpm_cell]
                    + [repr(rep.value(t.name)) for t in target_specs]
                    + [f"{delta:.2f}"])
        plot_labels.append(label)
        plot_deltas.append(delta)

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    if not args.no_plot:
        from .plotting import plot_ablation

        plot_ablation(plot_labels, plot_deltas, Path(args.out).with_suffix(".png"))
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


# -- gradcheck ---------------------------------------------------------------------


def _probe(store: ParamStore, name: str, shape, rng) -> "object":
    p = store.zeros(name, shape)
    p.data[...] = rng.standard_normal(shape)
    return p


def _gradcheck_fixtures(rng):
    """(name, scalar_fn, store, samples_per_param) for every registered block."""
    fixtures = []

    store = ParamStore(0)
    x = _probe(store, "x", (1, 4, 6, 6), rng)
    w = _probe(store, "w", (4, 4, 3, 3), rng)
    b = _probe(store, "b", (1, 4, 1, 1), rng)
    fixtures.append(("conv2d", lambda: ops.mean_all(ops.conv2d(x, w, b, padding=1)), store, None))

    store = ParamStore(1)
    block = ResidualBlock(store, "rb", 8, 8)
    xin = Tensor(rng.standard_normal((1, 8, 4, 4)))
    fixtures.append(("residual_block", lambda: ops.mean_all(block(xin)), store, None))

    store = ParamStore(2)
    gate = SEGate(store, "se", 8)
    xse = Tensor(rng.standard_normal((1, 8, 3, 3)))
    fixtures.append(("se_gate", lambda: ops.mean_all(gate(xse)), store, None))

    store = ParamStore(3)
    attn = AttentionTransform(store, "attn", 4)
    xat = Tensor(rng.standard_normal((1, 4, 3, 3)))
    fixtures.append(("attention_transform", lambda: ops.mean_all(attn(xat)), store, None))

    store = ParamStore(4)
    harm = FeatureHarmonizer(store, "harmonize", 3, 8)
    hfeats = [Tensor(rng.standard_normal((1, 8, 2, 2))) for _ in range(3)]
    fixtures.append(("harmonization", lambda: ops.mean_all(harm(hfeats)), store, 16))

    store = ParamStore(5)
    fpm = FeaturePropagation(store, "fpm", ["a", "b"], 8)
    pfeats = {k: Tensor(rng.standard_normal((1, 8, 2, 2))) for k in ("a", "b")}
    fixtures.append(
        ("fpm", lambda: ops.mean_all(ops.mul(fpm(pfeats)["a"], fpm(pfeats)["b"])), store, 16)
    )

    store = ParamStore(6)
    agg = TaskHead(store, "aggregate", in_c=16, width=8, out_c=3)
    xagg = Tensor(rng.standard_normal((1, 16, 4, 4)))
    fixtures.append(
        ("aggregation", lambda: ops.mean_all(ops.bilinear_upsample(agg(xagg)[1], 4)), store, 16)
    )

    store = ParamStore(7)
    zc = _probe(store, "logits", (1, 4, 4, 4), rng)
    tc = rng.integers(0, 4, size=(1, 4, 4))
    fixtures.append(("ce_loss", lambda: ce_loss(zc, tc), store, None))

    store = ParamStore(8)
    zl = _probe(store, "pred", (1, 1, 4, 4), rng)
    tl = rng.standard_normal((1, 1, 4, 4))
    fixtures.append(("l1_loss", lambda: l1_loss(zl, tl), store, None))

    store = ParamStore(9)
    zb = _probe(store, "logits", (1, 1, 4, 4), rng)
    tb = (rng.standard_normal((1, 4, 4)) > 0).astype(float)
    fixtures.append(("weighted_bce", lambda: weighted_bce(zb, tb), store, None))

    store = ParamStore(10)
    zn = _probe(store, "pred", (1, 3, 4, 4), rng)
    tn = rng.standard_normal((1, 3, 4, 4))
    tn /= np.linalg.norm(tn, axis=1, keepdims=True)
    fixtures.append(("normal_loss", lambda: normal_loss(zn, tn), store, None))

    return fixtures


def end_to_end_gradcheck(run: RunConfig, samples_per_param: int) -> float:
    """Central-difference check of the total training loss on the config's model.

    The probe instance is the smallest legal one for the configured scales.
    Each parameter is probed with a step size matched to its gradient scale:
    strong parameters get a small eps (their perturbation windows would
    otherwise sweep relu kinks), weak parameters a large one (their central
    differences would otherwise drown in the objective's rounding noise).
    Both choices stay inside grad_check's legal eps range.
    """
    side = max(max(run.scales), 16)
    probe_gen = GenConfig(H=max(side, 32), W=max(side, 32), num_shapes=3,
                          num_classes=run.data.num_classes, seed=run.data.seed)
    sample = generate_sample(probe_gen, 0)
    model_cfg = run.model_config()
    model = Model(model_cfg, seed=run.optim.seed)
    image = Tensor(sample.image[None, :, :side, :side].astype(np.float64))
    full_targets = {
        "seg": sample.seg[None, :side, :side].astype(np.int64),
        "depth": sample.depth[None, None, :side, :side].astype(np.float64),
        "edge": sample.edge[None, :side, :side].astype(np.float64),
        "normals": sample.normals[None, :, :side, :side].astype(np.float64),
    }
    targets = {t.name: full_targets[t.name] for t in model_cfg.tasks}

    def fn():
        out = model.forward(image)
        loss, _ = total_loss(out, targets, model_cfg)
        return loss

    model.store.zero_grad()
    fn().backward()
    groups: dict[float, list] = {}
    for p in model.store:
        scale = float(np.max(np.abs(p.grad)))
        eps = min(max(1e-8 / max(scale, 1e-12), 1e-7), 1e-4)
        eps = 10.0 ** round(np.log10(eps))  # decade grid keeps the call count small
        groups.setdefault(eps, []).append(p)
    return max(
        grad_check(fn, params, eps=eps, samples_per_param=samples_per_param)
        for eps, params in sorted(groups.items())
    )


def cmd_gradcheck(args) -> int:
    run = _load_config(args)
    rng = np.random.Generator(np.random.Philox(key=np.array([614, 0], dtype=np.uint64)))
    failures = 0
    for name, fn, store, samples in _gradcheck_fixtures(rng):
        err = grad_check(fn, store, eps=GRADCHECK_EPS, samples_per_param=samples)
        ok = err <= GRADCHECK_TOL
        failures += 0 if ok else 1
        print(f"{name:22s} max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}")
    err = end_to_end_gradcheck(run, args.samples)
    ok = err <= GRADCHECK_TOL
    failures += 0 if ok else 1
    print(f"{'end_to_end':22s} max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}")
    return 0 if failures == 0 else 3


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taskpyramid",
                     description="multi-scale multi-task dense prediction workbench")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset directory")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--out-dir", required=True, help="dataset output directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")

    p = add("train", cmd_train, "train a model on a dataset directory")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", required=True, help="training log CSV path")
    p.add_argument("--no-plot", action="store_true", help="skip the loss-curve figure")

    p = add("eval", cmd_eval, "evaluate a checkpoint; writes the metrics CSV")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--model-id", help="model id for the report (default: checkpoint stem)")

    p = add("delta", cmd_delta, "multi-task performance of a model vs a baseline")
    p.add_argument("--model", required=True, help="model metrics CSV")
    p.add_argument("--baseline", required=True, help="baseline metrics CSV")
    p.add_argument("--out", required=True, help="delta CSV path")

    p = add("affinity", cmd_affinity, "cross-task affinity correspondence curves")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="curve CSV path")
    p.add_argument("--no-plot", action="store_true", help="skip the curve figure")

    p = add("ablate", cmd_ablate, "scale-ablation grid with single-task baselines")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="ablation table CSV path")
    p.add_argument("--no-plot", action="store_true", help="skip the ablation figure")

    p = add("gradcheck", cmd_gradcheck, "finite-difference certification of all blocks")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--samples", type=int, default=1,
                   help="probed coordinates per parameter for the end-to-end check")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, DataError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
