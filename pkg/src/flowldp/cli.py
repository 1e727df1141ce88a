"""Command-line interface.

Subcommands cover the full workflow: generate a synthetic dataset, train the
two flows, calibrate privacy parameters from training latents, privatize
images (latent mechanism or pixel-domain baseline), score and evaluate
utility, audit the privacy guarantee empirically, and sanity-check model
invertibility.

Exit codes: 0 success, 1 tolerance or verification failure, 2 usage error,
3 I/O or file-format error.  Every command that produces files also writes
its resolved configuration next to them so a run can be reproduced exactly.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from .detection import (
    auc,
    load_scores,
    roc_points,
    save_scores,
    score_images,
    utility_curve,
    write_utility_svg,
    write_utility_table,
)
from .errors import (
    ConfigError,
    FormatError,
    NumericError,
    TrainingDiverged,
    UsageError,
)
from .flow import build_model, encode_dataset, load_model, save_model
from .mechanism import (
    compute_sensitivity,
    load_params,
    make_privacy_params,
    parse_epsilon,
    pixel_sensitivity,
    privatize_batch,
    privatize_pixels_batch,
    save_params,
)
from .images import from_pixels, pgm_bytes
from .synth import (
    DatasetManifest,
    ManifestEntry,
    apply_block_marker,
    apply_flip,
    generate_dataset,
    load_manifest,
    load_pixel_images,
    load_unit_images,
    save_manifest,
)
from .training import TrainConfig, train
from .verifier import scalar_laplace_mechanism, subflow_mechanism, verify_ldp

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _write_config(args, path):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _parse_shape(text):
    parts = text.lower().split("x")
    if len(parts) not in (2, 3):
        raise UsageError(f"shape must look like 16x16 or 16x16x1, got {text!r}")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"non-integer shape {text!r}") from None
    if len(dims) == 2:
        dims.append(1)
    return tuple(dims)


def _parse_counts(text):
    try:
        counts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"counts must be three integers, got {text!r}") from None
    if len(counts) != 3:
        raise UsageError(f"counts must be three integers, got {text!r}")
    return counts


def _resolve_manifest(path):
    if os.path.isdir(path):
        candidate = os.path.join(path, "manifest.tsv")
        if not os.path.exists(candidate):
            raise UsageError(f"{path} is a directory without a manifest.tsv")
        return candidate
    return path


def _metrics_path(model_path):
    return model_path + ".metrics"


def _last_logged_epoch(metrics_path):
    if not os.path.exists(metrics_path):
        return 0
    last = 0
    with open(metrics_path, encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if len(fields) >= 2 and fields[0] == "epoch":
                last = int(fields[1])
    return last


def cmd_gen_data(args):
    shape = _parse_shape(args.shape)
    if shape[2] != 1:
        raise UsageError("the synthetic generator emits single-channel images")
    counts = _parse_counts(args.counts)
    if sum(counts) == 0:
        raise UsageError("empty dataset: --counts 0,0,0")
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise UsageError(f"output directory {args.out} is not empty (use --force)")
    os.makedirs(args.out, exist_ok=True)
    manifests = generate_dataset(args.out, args.seed, shape[:2], counts, args.overlap)
    _write_config(args, os.path.join(args.out, "run_config.json"))
    for split, manifest in manifests.items():
        print(f"{split}: {len(manifest.entries)} entries")
    return EXIT_OK


def cmd_train(args):
    manifest = load_manifest(args.data)
    pixels, _, _ = load_pixel_images(manifest)
    metrics_path = args.metrics or _metrics_path(args.model)
    start_epoch = 0
    if args.resume:
        model = load_model(args.model)
        start_epoch = _last_logged_epoch(metrics_path)
    else:
        model = build_model(
            manifest.shape,
            levels=args.levels,
            depth=args.depth,
            arch=args.arch,
            hidden=args.hidden,
            seed=args.seed,
            trained_on=manifest.split,
        )
    config = TrainConfig(
        minibatch=args.minibatch,
        epochs=args.epochs,
        samples_per_epoch=args.samples_per_epoch,
        learning_rate=args.lr,
        warmup_epochs=args.warmup_epochs,
        seed=args.seed,
        split_tag=manifest.split,
    )
    mode = "a" if args.resume else "w"
    diverged = False
    with open(metrics_path, mode, encoding="utf-8") as log_fh:
        try:
            result = train(
                model,
                pixels,
                config,
                log_fh=log_fh,
                start_epoch=start_epoch,
                data_init=not args.resume,
            )
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            save_model(exc.last_good_model, args.model)
            diverged = True
    if not diverged:
        save_model(result.model, args.model)
        print(
            f"trained {result.model.trained_on or 'model'}: initial nll "
            f"{result.initial_nll:.3f}, final nll {result.final_nll:.3f}"
        )
    _write_config(args, args.model + ".config.json")
    return EXIT_TOLERANCE if diverged else EXIT_OK


def cmd_latent_stats(args):
    model = load_model(args.model)
    manifest = load_manifest(args.data)
    images, _, _ = load_unit_images(manifest)
    probe_count = int(len(images) * args.probe_frac)
    stats_images = images[: len(images) - probe_count] if probe_count else images
    if stats_images.shape[0] < 2:
        raise UsageError("latent statistics need at least 2 training images")
    latents = encode_dataset(model, stats_images)
    mode = "conservative" if args.conservative_sensitivity else "clipped"
    epsilon = parse_epsilon(args.eps, model.latent_dim) if args.eps else math.inf
    params = make_privacy_params(latents, args.alpha, epsilon, sensitivity_mode=mode)
    save_params(params, args.out)
    _write_config(args, args.out + ".config.json")
    sens = params.sensitivity
    print(
        f"sensitivity per element: min {sens.min():.4f} median {np.median(sens):.4f} "
        f"max {sens.max():.4f} (mode {mode}, alpha {args.alpha})"
    )
    if probe_count:
        probe_latents = encode_dataset(model, images[len(images) - probe_count :])
        lo, hi = params.clip_bounds()
        clipped = float(np.mean((probe_latents < lo) | (probe_latents > hi)))
        print(f"clip fraction on {probe_count}-image probe: {clipped:.4f}")
    if args.split_half:
        half = stats_images.shape[0] // 2
        sens_a = np.maximum(compute_sensitivity(encode_dataset(model, stats_images[:half])), 1e-12)
        sens_b = np.maximum(compute_sensitivity(encode_dataset(model, stats_images[half:])), 1e-12)
        ratio = sens_a / sens_b
        print(
            f"split-half sensitivity ratio band: min {ratio.min():.3f} "
            f"median {np.median(ratio):.3f} max {ratio.max():.3f}"
        )
    return EXIT_OK


def _apply_perturbations(images, args):
    tag = "none"
    if args.mark_block:
        fields = [float(v) for v in args.mark_block.split(",")]
        if len(fields) not in (3, 4):
            raise UsageError("--mark-block wants ROW,COL,SIZE[,PIXELVALUE]")
        row, col, size = (int(v) for v in fields[:3])
        pixel_value = fields[3] if len(fields) == 4 else 255.0
        value = float(from_pixels(np.array(pixel_value)))
        images = np.stack(
            [apply_block_marker(im, (row, col), size, value) for im in images]
        )
        tag = f"block:{row},{col},{size}"
    if args.flip:
        images = np.stack([apply_flip(im) for im in images])
        tag = "flip" if tag == "none" else tag + "+flip"
    return images, tag


def cmd_privatize(args):
    if not args.pixel_baseline:
        if not args.model:
            raise UsageError("the latent mechanism needs --model")
        if not args.params or not os.path.exists(args.params):
            raise UsageError(
                f"params file {args.params or '(none)'} not found; run `flowldp latent-stats` first"
            )
    manifest = load_manifest(_resolve_manifest(args.infile))
    images, labels, ids = load_unit_images(manifest)
    images, tag = _apply_perturbations(images, args)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    clip = not args.no_clip

    if args.pixel_baseline:
        if not args.train_data:
            raise UsageError("--pixel-baseline needs --train-data to calibrate pixel sensitivity")
        train_manifest = load_manifest(args.train_data)
        train_images, _, _ = load_unit_images(train_manifest)
        sens = pixel_sensitivity(train_images)
        eps = parse_epsilon(args.eps, int(np.prod(manifest.shape)))
        privatized = privatize_pixels_batch(images, eps, sens, args.seed)
        audit_lines = [
            f"image={ids[i]} mechanism=pixel-laplace eps={eps:.9g} seed={args.seed ^ i} clip=range"
            for i in range(len(ids))
        ]
    else:
        model = load_model(args.model)
        params = load_params(args.params)
        eps = parse_epsilon(args.eps, params.dim)
        params = params.with_epsilon(eps)
        privatized, audits = privatize_batch(model, images, params, args.seed, clip=clip, ids=ids)
        audit_lines = [a.line() for a in audits]

    entries = []
    for i, image_id in enumerate(ids):
        name = f"images/{image_id}.pgm"
        with open(os.path.join(args.out, name), "wb") as fh:
            fh.write(pgm_bytes(privatized[i]))
        entries.append(ManifestEntry(name, labels[i], tag, args.seed ^ i))
    out_manifest = DatasetManifest(manifest.split, args.seed, manifest.shape, entries, args.out)
    save_manifest(out_manifest, os.path.join(args.out, "manifest.tsv"))
    with open(os.path.join(args.out, "audit.log"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(audit_lines) + "\n")
    _write_config(args, os.path.join(args.out, "run_config.json"))
    print(f"privatized {len(ids)} images at eps={args.eps} -> {args.out}")
    return EXIT_OK


def cmd_score(args):
    m0 = load_model(args.m0)
    m1 = load_model(args.m1)
    manifest = load_manifest(_resolve_manifest(args.infile))
    images, labels, ids = load_unit_images(manifest)
    scores = score_images(m0, m1, images, labels, ids)
    save_scores(scores, args.out)
    _write_config(args, args.out + ".config.json")
    print(f"scored {len(ids)} images -> {args.out}")
    return EXIT_OK


def cmd_eval_auc(args):
    if args.eps_grid:
        return _eval_utility(args)
    if args.scores:
        scores = load_scores(args.scores)
    else:
        if not (args.m0 and args.m1 and args.infile):
            raise UsageError("eval-auc needs either --scores or --m0/--m1/--in")
        m0 = load_model(args.m0)
        m1 = load_model(args.m1)
        manifest = load_manifest(_resolve_manifest(args.infile))
        images, labels, ids = load_unit_images(manifest)
        scores = score_images(m0, m1, images, labels, ids)
    value = auc(scores)
    print(f"auc {value:.6f}")
    if args.roc:
        fpr, tpr = roc_points(scores)
        with open(args.roc, "w", encoding="utf-8") as fh:
            for f, t in zip(fpr, tpr):
                fh.write(f"{f:.6f}\t{t:.6f}\n")
        _write_config(args, args.roc + ".config.json")
    return EXIT_OK


def _eval_utility(args):
    if not (args.m0 and args.m1 and args.infile and args.params and args.train_data):
        raise UsageError(
            "utility mode needs --m0, --m1, --in, --params, and --train-data"
        )
    if not args.out_dir:
        raise UsageError("utility mode needs --out-dir for the table and plot")
    m0 = load_model(args.m0)
    m1 = load_model(args.m1)
    params = load_params(args.params)
    manifest = load_manifest(_resolve_manifest(args.infile))
    images, labels, ids = load_unit_images(manifest)
    train_images, _, _ = load_unit_images(load_manifest(args.train_data))
    sens = pixel_sensitivity(train_images)
    labels_text = [t.strip() for t in args.eps_grid.split(",") if t.strip()]
    epsilons = [parse_epsilon(t, params.dim) for t in labels_text]
    seeds = [args.seed + i for i in range(args.seeds)]
    rows = utility_curve(
        m0, m1, images, labels, params, sens, epsilons,
        seeds=seeds, ids=ids, epsilon_labels=labels_text,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    table = os.path.join(args.out_dir, "utility.tsv")
    write_utility_table(rows, table)
    write_utility_svg(rows, os.path.join(args.out_dir, "utility.svg"))
    _write_config(args, os.path.join(args.out_dir, "run_config.json"))
    for row in rows:
        cells = " ".join(f"{m}={v:.4f}" for m, v in sorted(row.auc_by_mechanism.items()))
        print(f"eps={row.epsilon_label} {cells}")
    return EXIT_OK


def cmd_verify_ldp(args):
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    rng = np.random.default_rng(args.seed)
    epsilon = parse_epsilon(args.eps)
    claimed = epsilon / 2.0 if args.inject_violation else epsilon
    if args.mode == "scalar":
        mech = scalar_laplace_mechanism(args.delta, epsilon)
        lo, hi = (float(v) for v in args.range.split(","))
        report = verify_ldp(
            mech, args.xa, args.xb, claimed,
            bins=args.bins, trials=args.trials, rng=rng, value_range=[(lo, hi)],
        )
    else:
        report = _verify_subflow(args, rng, epsilon, claimed)
    print(report.summary())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.summary() + "\n")
        _write_config(args, args.report + ".config.json")
    return EXIT_OK if report.passed else EXIT_TOLERANCE


def _verify_subflow(args, rng, epsilon, claimed):
    # Tiny self-contained setup: a 2x2 flow with perturbed parameters and a
    # latent window calibrated on a seeded batch of toy inputs.
    from .flow import randomize_parameters

    model = build_model((2, 2, 1), levels=1, depth=2, arch="glow", hidden=4, seed=args.seed)
    randomize_parameters(model, np.random.default_rng(args.seed + 1), scale=0.2)
    train_x = rng.uniform(-0.5, 0.5, size=(64, 2, 2, 1))
    latents = encode_dataset(model, train_x)
    params = make_privacy_params(latents, alpha=0.4, epsilon=epsilon)
    mech = subflow_mechanism(model, params)
    return verify_ldp(
        mech, train_x[0], train_x[1], claimed,
        bins=args.bins, trials=args.trials, rng=rng,
    )


def cmd_roundtrip(args):
    try:
        model = load_model(args.model)
    except FormatError:
        raise
    manifest = load_manifest(_resolve_manifest(args.infile))
    images, _, _ = load_unit_images(manifest)
    if args.limit:
        images = images[: args.limit]
    z, logdet_fwd = model.forward_batch(images)
    recon, logdet_inv = model.inverse_batch(z)
    max_err = float(np.abs(recon - images).max())
    max_logdet = float(np.abs(logdet_fwd + logdet_inv).max())
    rel_logdet = max_logdet / max(1.0, float(np.abs(logdet_fwd).max()))
    print(f"max roundtrip error {max_err:.3e}")
    print(f"max |forward logdet + inverse logdet| {max_logdet:.3e} (relative {rel_logdet:.3e})")
    ok = max_err < args.tol_roundtrip and rel_logdet < args.tol_logdet
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_TOLERANCE


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowldp",
        description="Privacy-preserving image obfuscation through a normalizing flow latent space.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic three-split dataset")
    p.add_argument("--out", required=True, help="output directory for images and manifests")
    p.add_argument("--seed", type=int, default=0, help="generator seed; fixes the whole tree")
    p.add_argument("--shape", default="16x16", help="image size HxW (default 16x16)")
    p.add_argument(
        "--counts",
        default="600,1000,400",
        help="entries per split: normal-train,mixture-train,test (default 600,1000,400)",
    )
    p.add_argument(
        "--overlap",
        type=float,
        default=0.8,
        help="fraction of the smaller training split shared between the two training splits",
    )
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="maximum-likelihood training of a flow")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--model", required=True, help="output checkpoint path")
    p.add_argument("--arch", choices=("glow", "nice"), default="glow",
                   help="glow: affine coupling + learned 1x1 channel mix; nice: additive + reversal")
    p.add_argument("--levels", type=int, default=2, help="multi-scale levels (default 2)")
    p.add_argument("--depth", type=int, default=4, help="flow steps per level (default 4)")
    p.add_argument("--hidden", type=int, default=32, help="coupling conditioner width (default 32)")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--minibatch", type=int, default=16)
    p.add_argument("--samples-per-epoch", type=int, default=2000,
                   help="images drawn (with replacement) per epoch")
    p.add_argument("--lr", type=float, default=1e-3, help="steady-state learning rate (default 1e-3)")
    p.add_argument("--warmup-epochs", type=int, default=5,
                   help="linear ramp to the steady-state rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", default=None, help="metrics log path (default <model>.metrics)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the existing checkpoint and metrics log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("latent-stats",
                       help="calibrate sensitivity and clip windows from training latents")
    p.add_argument("--model", required=True, help="flow checkpoint used for privatization")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--alpha", type=float, default=0.4,
                   help="clip window width as a fraction of the observed per-element range (default 0.4)")
    p.add_argument("--out", required=True, help="output params sidecar")
    p.add_argument("--eps", default=None,
                   help="default budget recorded in the sidecar (privatize --eps overrides)")
    p.add_argument("--conservative-sensitivity", action="store_true",
                   help="calibrate noise to the full observed range instead of the clip width")
    p.add_argument("--probe-frac", type=float, default=0.1,
                   help="fraction of images held out to report the clip fraction")
    p.add_argument("--split-half", action="store_true",
                   help="report the split-half sensitivity stability band")
    p.set_defaults(func=cmd_latent_stats)

    p = sub.add_parser("privatize", help="produce budgeted obfuscated images")
    p.add_argument("--model", help="flow checkpoint (latent mechanism)")
    p.add_argument("--params", default="", help="privacy params sidecar from latent-stats")
    p.add_argument("--eps", required=True,
                   help="total budget: float, inf, or <A>xD for A per latent element (e.g. 1e2xD)")
    p.add_argument("--in", dest="infile", required=True, help="input manifest or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="base seed; image i uses seed XOR i")
    p.add_argument("--no-clip", action="store_true",
                   help="skip latent clipping (pure roundtrip when eps=inf)")
    p.add_argument("--pixel-baseline", action="store_true",
                   help="apply the Laplace mechanism directly to pixels instead")
    p.add_argument("--train-data", default=None,
                   help="training manifest for pixel-sensitivity calibration (baseline only)")
    p.add_argument("--mark-block", default=None, metavar="R,C,SIZE[,VAL]",
                   help="stamp a constant block marker on every input before privatizing")
    p.add_argument("--flip", action="store_true",
                   help="mirror every input left-right before privatizing")
    p.set_defaults(func=cmd_privatize)

    p = sub.add_parser("score", help="dual-flow posterior scores for a manifest")
    p.add_argument("--m0", required=True, help="flow trained on the normal-only split")
    p.add_argument("--m1", required=True, help="flow trained on the mixture split")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True, help="output scores.tsv")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-auc", help="AUC of scores; or the utility-vs-budget table")
    p.add_argument("--scores", default=None, help="existing scores.tsv")
    p.add_argument("--m0", default=None)
    p.add_argument("--m1", default=None)
    p.add_argument("--in", dest="infile", default=None)
    p.add_argument("--roc", default=None, help="write ROC points here")
    p.add_argument("--eps-grid", default=None,
                   help="comma list of budgets (enables utility mode), e.g. inf,1e2xD,1e1xD")
    p.add_argument("--params", default=None, help="privacy params sidecar (utility mode)")
    p.add_argument("--train-data", default=None,
                   help="training manifest for the pixel baseline (utility mode)")
    p.add_argument("--seeds", type=int, default=3,
                   help="privatization seeds averaged per budget (default 3)")
    p.add_argument("--seed", type=int, default=0, help="first privatization seed")
    p.add_argument("--out-dir", default=None, help="directory for utility.tsv and utility.svg")
    p.set_defaults(func=cmd_eval_auc)

    p = sub.add_parser("verify-ldp", help="empirical histogram audit of the privacy bound")
    p.add_argument("--mode", choices=("scalar", "subflow"), default="scalar")
    p.add_argument("--eps", default="1", help="budget the noise is scaled for (default 1)")
    p.add_argument("--trials", type=int, default=10**6)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=1.0,
                   help="scalar-mode sensitivity (default 1)")
    p.add_argument("--xa", type=float, default=0.0, help="scalar-mode first input")
    p.add_argument("--xb", type=float, default=1.0, help="scalar-mode second input")
    p.add_argument("--range", default="-6,7", help="scalar-mode histogram range (default -6,7)")
    p.add_argument("--inject-violation", action="store_true",
                   help="halve the claimed budget without rescaling the noise; must FAIL")
    p.add_argument("--report", default=None, help="also write the verdict to this file")
    p.set_defaults(func=cmd_verify_ldp)

    p = sub.add_parser("roundtrip", help="invertibility and log-det consistency check")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--limit", type=int, default=None, help="check at most this many images")
    p.add_argument("--tol-roundtrip", type=float, default=1e-4)
    p.add_argument("--tol-logdet", type=float, default=1e-6)
    p.set_defaults(func=cmd_roundtrip)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
