"""Command-line harness: train | invert | reconstruct | edit | eval | kvswap | sweep-tau | ablate.

Every command writes its outputs plus a manifest (config echo, seed, git
describe string, wall time). Exit codes: 0 ok, 2 config error, 3 io error,
4 numeric abort. SDLB_THREADS (0 = auto) bounds intra-op/worker parallelism.
"""

import argparse
import json
import os
import subprocess
import sys
import time


def _apply_thread_env():
    threads = os.environ.get("SDLB_THREADS")
    if threads and threads.isdigit() and int(threads) > 0:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


_apply_thread_env()

import numpy as np  # noqa: E402  (thread env must land before numpy loads)

from .config import RunConfig, load_config  # noqa: E402
from .errors import (AlignmentError, CheckpointError, ConfigError,  # noqa: E402
                     DimensionError, FrozenError, InjectionError, NumericAbort)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

TAU_U_GRID = (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0)


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_manifest(path, command, cfg, seed, outputs, started, extra=None):
    doc = {
        "command": command,
        "config": cfg.echo(),
        "seed": seed,
        "git_describe": _git_describe(),
        "outputs": sorted(outputs),
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        doc["results"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _load_cfg(args):
    return load_config(args.config) if args.config else RunConfig()


def _load_stack(cfg):
    from .pipeline import load_stack

    if not os.path.exists(cfg.model_path):
        raise FileNotFoundError(f"model checkpoint missing: {cfg.model_path}")
    return load_stack(cfg.model_path, cfg)


def _outdir(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def cmd_train(args):
    from .pipeline import build_stack, save_stack
    from .toyworld import export_dataset

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = build_stack(cfg, log=print if args.verbose else None)
    os.makedirs(os.path.dirname(cfg.model_path) or ".", exist_ok=True)
    save_stack(cfg.model_path, stack)
    export_dataset(stack.dataset, cfg.data_dir, cfg.seed)
    manifest = os.path.join(out, "train.manifest.json")
    write_manifest(manifest, "train", cfg, cfg.seed,
                   [cfg.model_path, cfg.data_dir], started)
    print(f"trained stack -> {cfg.model_path}")
    return EXIT_OK


def _resolve_scene(stack, args):
    from .images import read_image
    from .toyworld import Scene, SceneSpec, parse_prompt

    tokens = parse_prompt(args.prompt)
    if args.image:
        image = read_image(args.image).astype(np.float32)
        if image.shape != (32, 32, 3):
            raise ConfigError(f"expected a 32x32 image, got {image.shape}")
        from .toyworld import object_mask

        return image, tokens, object_mask(image)
    raise ConfigError("--image is required")


def cmd_invert(args):
    from .pipeline import _invert_scene, save_run
    from .toyworld import Scene

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = _load_stack(cfg)
    image, tokens, mask = _resolve_scene(stack, args)
    scene = Scene(spec=None, image=image, mask=mask, tokens=tokens)
    run = _invert_scene(stack, scene, cfg.seed, att_reg=cfg.att_reg)
    run_path = args.out or os.path.join(out, "run.sdlb")
    save_run(run_path, run)
    curve_path = os.path.splitext(run_path)[0] + "_loss.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("t,iteration,loss\n")
        for t in sorted(run.loss_curves, reverse=True):
            for i, v in enumerate(run.loss_curves[t]):
                fh.write(f"{t},{i},{v:.8f}\n")
    manifest = os.path.join(out, "invert.manifest.json")
    write_manifest(manifest, "invert", cfg, cfg.seed, [run_path, curve_path], started,
                   extra={"prompt": args.prompt})
    print(f"inversion run -> {run_path}")
    return EXIT_OK


def cmd_reconstruct(args):
    from .images import write_image
    from .inversion import reconstruct
    from .metrics import psnr, ssim
    from .pipeline import load_run, resample_baseline

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = _load_stack(cfg)
    run = load_run(args.run)
    img = reconstruct(run, stack.denoiser, stack.sched, stack.null_embedding(),
                      w=cfg.w_edit)
    base = resample_baseline(run, stack, w=cfg.w_edit)
    out_png = args.out or os.path.join(out, "reconstruction.png")
    write_image(out_png, img)
    results = {
        "psnr": psnr(run.image, img), "ssim": ssim(run.image, img),
        "baseline_psnr": psnr(run.image, base),
    }
    manifest = os.path.join(out, "reconstruct.manifest.json")
    write_manifest(manifest, "reconstruct", cfg, cfg.seed, [out_png], started,
                   extra=results)
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def _edit_spec_from_args(cfg, run, args, tau_u=None):
    from .editing import EditSpec
    from .toyworld import parse_prompt

    return EditSpec(
        mode=args.mode, source_tokens=run.tokens,
        target_tokens=parse_prompt(args.target),
        tau_c=cfg.tau_c if args.tau_c is None else args.tau_c,
        tau_s=cfg.tau_s if args.tau_s is None else args.tau_s,
        tau_u=(cfg.tau_u if args.tau_u is None else args.tau_u) if tau_u is None else tau_u,
        tau_v=cfg.tau_v if args.tau_v is None else args.tau_v,
        reweight=(args.reweight_token, args.reweight_scale)
        if args.reweight_token is not None else None,
        seed=cfg.seed)


def cmd_edit(args):
    from .editing import edit
    from .images import write_image
    from .metrics import layout_iou, ns_region_error, psnr, ssim, target_alignment
    from .pipeline import load_run
    from .toyworld import object_mask

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = _load_stack(cfg)
    run = load_run(args.run)
    spec = _edit_spec_from_args(cfg, run, args)
    img, dual = edit(run, spec, stack.denoiser, stack.sched, stack.text_encoder,
                     w=cfg.w_edit)
    out_png = args.out or os.path.join(out, "edited.png")
    write_image(out_png, img)
    src_mask = object_mask(run.image)
    results = {
        "mode": spec.mode, "target": args.target,
        "taus": {"c": spec.tau_c, "s": spec.tau_s, "u": spec.tau_u, "v": spec.tau_v},
        "layout_iou": layout_iou(object_mask(img), src_mask),
        "ns_region_error": ns_region_error(run.image, img, 1.0 - src_mask),
        "target_alignment": target_alignment(img, spec.target_tokens, stack.classifier),
        "psnr_vs_source": psnr(run.image, img),
        "ssim_vs_source": ssim(run.image, img),
        "seed": spec.seed,
    }
    report = os.path.join(out, "edits.jsonl")
    with open(report, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(results, sort_keys=True) + "\n")
    manifest = os.path.join(out, "edit.manifest.json")
    write_manifest(manifest, "edit", cfg, cfg.seed, [out_png, report], started,
                   extra=results)
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    from .inversion import reconstruct
    from .metrics import (EvalReport, append_reports, attention_mask, format_table,
                          layout_iou, ns_region_error, psnr, ssim, target_alignment)
    from .pipeline import load_run

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = _load_stack(cfg)
    reports = []
    for path in args.runs:
        run = load_run(path)
        tapes = []
        img = reconstruct(run, stack.denoiser, stack.sched, stack.null_embedding(),
                          w=cfg.w_edit, tape_sink=tapes)
        from .toyworld import object_mask

        mask = attention_mask(tapes, token=2)
        reports.append(EvalReport(
            name=os.path.basename(path),
            psnr=psnr(run.image, img), ssim=ssim(run.image, img),
            ns_region_error=ns_region_error(run.image, img, 1.0 - object_mask(run.image)),
            layout_iou=layout_iou(mask, object_mask(run.image)),
            target_alignment=target_alignment(img, run.tokens, stack.classifier)))
    report_path = os.path.join(out, "eval.jsonl")
    append_reports(report_path, reports)
    print(format_table(reports))
    manifest = os.path.join(out, "eval.manifest.json")
    write_manifest(manifest, "eval", cfg, cfg.seed, [report_path], started)
    return EXIT_OK


def cmd_kvswap(args):
    from .experiments import kv_swap_study

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = _load_stack(cfg)
    result = kv_swap_study(stack, pairs=args.pairs, seed=cfg.seed, outdir=out)
    manifest = os.path.join(out, "kvswap.manifest.json")
    write_manifest(manifest, "kvswap", cfg, cfg.seed, result["outputs"], started,
                   extra={k: v for k, v in result.items() if k != "outputs"})
    print(json.dumps({k: v for k, v in result.items() if k != "outputs"}, sort_keys=True))
    return EXIT_OK


def cmd_sweep_tau(args):
    from .editing import edit
    from .images import write_image
    from .metrics import target_alignment
    from .pipeline import load_run

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = _load_stack(cfg)
    run = load_run(args.run)
    rows = []
    outputs = []
    for tau_u in TAU_U_GRID:
        spec = _edit_spec_from_args(cfg, run, args, tau_u=tau_u)
        img, _ = edit(run, spec, stack.denoiser, stack.sched, stack.text_encoder,
                      w=cfg.w_edit)
        png = os.path.join(out, f"sweep_tau_u_{tau_u:.1f}.png")
        write_image(png, img)
        outputs.append(png)
        rows.append({"tau_u": tau_u,
                     "target_alignment": target_alignment(img, spec.target_tokens,
                                                          stack.classifier)})
    report = os.path.join(out, "sweep_tau.jsonl")
    with open(report, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    outputs.append(report)
    manifest = os.path.join(out, "sweep-tau.manifest.json")
    write_manifest(manifest, "sweep-tau", cfg, cfg.seed, outputs, started,
                   extra={"rows": rows})
    print(json.dumps(rows))
    return EXIT_OK


def cmd_ablate(args):
    from .experiments import ablation_study

    cfg = _load_cfg(args)
    started = time.time()
    out = _outdir(cfg)
    stack = _load_stack(cfg)
    result = ablation_study(stack, image_index=args.image_index, target=args.target,
                            seed=cfg.seed)
    report = os.path.join(out, "ablate.jsonl")
    with open(report, "w", encoding="utf-8") as fh:
        for row in result["rows"]:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    manifest = os.path.join(out, "ablate.manifest.json")
    write_manifest(manifest, "ablate", cfg, cfg.seed, [report], started,
                   extra=result)
    print(json.dumps(result["rows"], indent=1))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="sdlab", description=__doc__)
    p.add_argument("--config", help="key=value config file")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="build dataset, train encoders/denoiser/classifier")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("invert", help="invert one image into per-timestep value embeddings")
    sp.add_argument("--image", required=True)
    sp.add_argument("--prompt", required=True, help="'color shape background'")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_invert)

    sp = sub.add_parser("reconstruct", help="sample the learned embeddings back into an image")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_reconstruct)

    def add_edit_args(sp):
        sp.add_argument("--run", required=True)
        sp.add_argument("--target", required=True)
        sp.add_argument("--mode", default="replace", choices=["replace", "refine", "reweight"])
        sp.add_argument("--tau-c", dest="tau_c", type=float)
        sp.add_argument("--tau-s", dest="tau_s", type=float)
        sp.add_argument("--tau-u", dest="tau_u", type=float)
        sp.add_argument("--tau-v", dest="tau_v", type=float)
        sp.add_argument("--reweight-token", dest="reweight_token", type=int)
        sp.add_argument("--reweight-scale", dest="reweight_scale", type=float, default=1.0)
        sp.add_argument("--out")

    sp = sub.add_parser("edit", help="prompt edit via attention injection")
    add_edit_args(sp)
    sp.set_defaults(fn=cmd_edit)

    sp = sub.add_parser("eval", help="metrics over saved runs")
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("kvswap", help="key/value role-separation study")
    sp.add_argument("--pairs", type=int, default=12)
    sp.set_defaults(fn=cmd_kvswap)

    sp = sub.add_parser("sweep-tau", help="tau_u grid over one edit")
    add_edit_args(sp)
    sp.set_defaults(fn=cmd_sweep_tau)

    sp = sub.add_parser("ablate", help="regularization / value-parameterization / tau_u ablations")
    sp.add_argument("--image-index", dest="image_index", type=int, default=0)
    sp.add_argument("--target", default=None)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, AlignmentError, InjectionError, DimensionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, CheckpointError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericAbort, FrozenError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
