"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 invalid configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import evaluate, linops, metrics, plots, simdata, theory, train, unroll

log = logging.getLogger("lspd")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lspd", description="Stochastic primal-dual unrolling for tomographic reconstruction.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "simulate": "simulate a phantom dataset",
        "train": "train a network (supervised or equivariant imaging)",
        "reconstruct": "reconstruct one measurement to an image file",
        "eval": "evaluate checkpoints and FBP on a dataset split",
        "adapt": "instance adaptation on an out-of-distribution measurement",
        "theory": "run a simplified-LSPD theory scenario",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="experiment JSON file")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--variant", choices=unroll.VARIANTS, default=None)
        s.add_argument("--checkpoint", action="append", default=None, help="model checkpoint (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


# ---------------------------------------------------------------------------


def _dataset_path(cfg, out):
    return cfg.dataset.get("path") or os.path.join(out, "dataset.lspd")


def _get_dataset(cfg, out, op):
    path = _dataset_path(cfg, out)
    if os.path.exists(path):
        ds = simdata.load_dataset(path)
        if ds.geometry != cfg.geometry:
            raise ValueError("geometry mismatch between config and dataset file")
        return ds
    log.info("no dataset at %s, simulating", path)
    return _simulate(cfg, op)


def _simulate(cfg, op):
    d = cfg.dataset
    return simdata.make_dataset(cfg.geometry, cfg.noise, d["count"], d["seed"], d["phantom"], d["val_fraction"],
                                d["test_fraction"], fbp_filter=d["fbp_filter"], op=op)


def _load_models(paths):
    if not paths:
        raise ValueError("--checkpoint is required for this command")
    out = {}
    for p in paths:
        params, header = unroll.UnrollParams.load(p)
        name = header.get("name") or params.config.variant
        if name in out:
            name = f"{name}:{os.path.basename(p)}"
        out[name] = (params, header)
    return out


def cmd_simulate(cfg, args):
    op = linops.assemble_projector(cfg.geometry)
    ds = _simulate(cfg, op)
    path = _dataset_path(cfg, args.out)
    simdata.save_dataset(ds, path)
    first = ds.items[0]
    plots.image_grid({"phantom": first.x_true, "fbp": first.x0}, os.path.join(args.out, "dataset_preview.png"))
    summary = {"path": path, "count": len(ds), "splits": {t: len(ds.split(t)) for t in ("train", "val", "test")}}
    _write_json(os.path.join(args.out, "dataset.json"), summary)
    print(json.dumps(summary))


def cmd_train(cfg, args):
    op = linops.assemble_projector(cfg.geometry)
    ds = _get_dataset(cfg, args.out, op)
    if args.checkpoint:
        params, header = unroll.UnrollParams.load(args.checkpoint[0])
        evaluate.check_geometry(header, cfg.geometry)
    else:
        params = unroll.init_params(cfg.model, unroll.prepare_operator(op, cfg.model), seed=cfg.train.seed)
    name = f"{params.config.variant}-{cfg.train_mode}"

    def logrow(row):
        log.info("epoch %d loss %.3e val_psnr %.2f", row["epoch"], row["train_loss"], row["val_psnr"])

    if cfg.train_mode == "ei":
        params, hist = train.ei_train(params, ds.measurements_only(), op, cfg.train, log=logrow)
    else:
        params, hist = train.supervised_train(params, ds, op, cfg.train, log=logrow)
    ckpt = os.path.join(args.out, f"{name}.ckpt")
    params.save(ckpt, {"name": name, "geometry": cfg.geometry.to_dict(), "train": train.config_dict(cfg.train),
                       "mode": cfg.train_mode})
    train.write_metrics_csv(os.path.join(args.out, f"{name}_metrics.csv"), hist)
    plots.training_curves(hist, os.path.join(args.out, f"{name}_curves.png"))
    print(json.dumps({"checkpoint": ckpt, "final": hist[-1] if hist else None}, default=float))


def cmd_reconstruct(cfg, args):
    op = linops.assemble_projector(cfg.geometry)
    ds = _get_dataset(cfg, args.out, op)
    split = cfg.reconstruct.get("split", "test")
    idx = cfg.reconstruct.get("index", 0)
    items = ds.split(split)
    if not 0 <= idx < len(items):
        raise ValueError(f"index {idx} out of range for split {split!r}")
    it = items[idx]
    (name, (params, header)), *_ = _load_models(args.checkpoint).items()
    evaluate.check_geometry(header, ds.geometry)
    x, calls = unroll.reconstruct(params, op, it.b, it.x0)
    ds_out = simdata.Dataset(ds.geometry, ds.noise, [simdata.MeasurementSample(it.b, x.astype(np.float32), split)])
    simdata.save_dataset(ds_out, os.path.join(args.out, "recon.lspd"))
    plots.save_png16(x, os.path.join(args.out, "recon.png"))
    info = {"method": name, "split": split, "index": idx, "operator_calls": calls}
    if isinstance(it, simdata.Sample):
        info.update(psnr=metrics.psnr(x, it.x_true), ssim=metrics.ssim(x, it.x_true),
                    fbp_psnr=metrics.psnr(it.x0, it.x_true))
        plots.image_grid({"truth": it.x_true, "fbp": it.x0, name: x}, os.path.join(args.out, "recon_grid.png"))
    _write_json(os.path.join(args.out, "recon.json"), info)
    print(json.dumps(info))


def cmd_eval(cfg, args):
    op = linops.assemble_projector(cfg.geometry)
    ds = _get_dataset(cfg, args.out, op)
    models = _load_models(args.checkpoint)
    table = evaluate.evaluate(models, ds, op, cfg.eval.get("split", "test"), workers=cfg.eval.get("workers", 1))
    table.write_csv(os.path.join(args.out, "eval.csv"), os.path.join(args.out, "eval_summary.csv"))
    plots.eval_summary(table, os.path.join(args.out, "eval_summary.png"))
    print(json.dumps(table.summary))


def cmd_adapt(cfg, args):
    op = linops.assemble_projector(cfg.geometry)
    a = cfg.adapt
    noise = simdata.NoiseModel(**a.get("noise", {"I0": cfg.noise.I0}))
    ph = simdata.make_phantom(a.get("phantom", "ellipses"), cfg.geometry.image_size, a.get("phantom_seed", 12345))
    b = simdata.simulate_measurement(ph, op, noise, a.get("noise_seed", 1))
    filt = cfg.dataset["fbp_filter"]
    x0 = linops.fbp(cfg.geometry, b, filt).astype(np.float32)
    models = _load_models(args.checkpoint)
    traces, images, rows = {}, {"truth": ph.image, "fbp": x0}, []
    for name, (params, header) in models.items():
        evaluate.check_geometry(header, cfg.geometry)
        _, x, tr = train.instance_adapt(params, b, x0, op, cfg.train, x_ref=ph.image.ravel(), fbp_filter=filt)
        traces[name] = tr
        images[f"{name} init"] = unroll.reconstruct(params, op, b, x0)[0]
        images[f"{name} adapted"] = x
        rows += [{"method": name, **r} for r in tr.rows()]
    with open(os.path.join(args.out, "adapt_trace.csv"), "w") as f:
        f.write("# " + evaluate.PEAK_NOTE + "; calls cumulative, forward and backward\n")
        f.write("method,step,operator_calls,psnr,loss\n")
        for r in rows:
            f.write(f"{r['method']},{r['step']},{r['operator_calls']!r},{r['psnr']!r},{r['loss']!r}\n")
    plots.adapt_traces(traces, os.path.join(args.out, "adapt_trace.png"))
    plots.image_grid(images, os.path.join(args.out, "adapt_images.png"))
    summary = {n: {"psnr_init": t.psnr[0], "psnr_final": t.psnr[-1], "calls": t.calls[-1]} for n, t in traces.items()}
    _write_json(os.path.join(args.out, "adapt.json"), summary)
    print(json.dumps(summary))


def cmd_theory(cfg, args):
    if cfg.theory is None:
        raise cfgmod.ConfigError("config has no 'theory' section")
    rep = theory.simplified_lspd_experiment(cfg.theory)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        f.write(rep.to_json())
    rep.write_csv(os.path.join(args.out, "curves.csv"))
    plots.theory_curves(rep, os.path.join(args.out, "curves.png"))
    print(json.dumps({"thm31_holds": rep.thm31_holds, "thm32_holds": rep.thm32_holds, "vacuous": rep.vacuous}))


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=float)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "adapt": cmd_adapt,
    "theory": cmd_theory,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.seed, args.variant)
    except cfgmod.ConfigError as exc:
        print(f"lspd: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    try:
        COMMANDS[args.command](cfg, args)
    except cfgmod.ConfigError as exc:
        print(f"lspd: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failure: report and map to exit 3
        log.debug("failure", exc_info=True)
        print(f"lspd: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
