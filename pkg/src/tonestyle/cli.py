"""Command-line entry point.

Every command prints one JSON report on stdout and logs to stderr. Exit codes:
0 success, 1 input or domain error, 2 external hook or scorer failure,
3 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("tonestyle")

EXIT_OK, EXIT_INPUT, EXIT_HOOK, EXIT_CONVERGENCE = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".ppm", ".jpg", ".jpeg")
AES_ENV = "TONESTYLE_AES_SCORER"


class ConvergenceError(RuntimeError):
    """An iterative solver or training run did not converge."""


# -- helpers ---------------------------------------------------------------------------


def _image_files(directory) -> list[Path]:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {directory}")
    return files


def _read_images(directory) -> dict[str, np.ndarray]:
    from .imageio import read_image

    return {p.stem: read_image(p) for p in _image_files(directory)}


def _read_labeled(directory) -> tuple[list[np.ndarray], np.ndarray, list[str]]:
    """Images from ``directory/<label>/*``; labels are the subdirectory names."""
    from .imageio import read_image

    images, labels, ids = [], [], []
    for sub in sorted(p for p in Path(directory).iterdir() if p.is_dir()):
        for f in _image_files(sub):
            images.append(read_image(f))
            labels.append(sub.name)
            ids.append(f"{sub.name}/{f.stem}")
    if not images:
        raise FileNotFoundError(f"no labeled images under {directory}")
    return images, np.array(labels), ids


def _write_labeled(directory, images, labels) -> None:
    from .imageio import write_image

    counts: dict = {}
    for img, lab in zip(images, labels):
        k = counts.get(lab, 0)
        counts[lab] = k + 1
        write_image(Path(directory) / f"p{int(lab):03d}" / f"{k:04d}.png", img)


def _scorer_command(arg: str | None):
    from .metrics import ExternalScorer

    cmd = arg if arg is not None else os.environ.get(AES_ENV)
    return ExternalScorer(cmd.split()) if cmd else None


def _check_finite(values, what: str) -> None:
    if not np.all(np.isfinite(np.asarray(values, dtype=float))):
        raise ConvergenceError(f"{what} became non-finite")


def _read_groups(path):
    """Ranking groups as JSON: ``[{"anchor": p, "candidates": [p, ...], "order": [i, ...]}]``."""
    from .imageio import read_image
    from .scorer import RankingGroup

    root = Path(path).parent
    groups = []
    for g in json.loads(Path(path).read_text()):
        groups.append(
            RankingGroup(
                read_image(root / g["anchor"]),
                [read_image(root / c) for c in g["candidates"]],
                tuple(g["order"]),
            )
        )
    return groups


# -- lut -------------------------------------------------------------------------------------


def cmd_lut(args) -> dict:
    from .color import mean_delta_e
    from .imageio import read_image, write_image
    from .lut import LutFitConfig, apply_lut, fit_lut, identity_lut, random_perturbation_lut, read_cube, write_cube

    if args.action == "identity":
        write_cube(identity_lut(args.size), args.out)
        return {"out": args.out, "size": args.size}
    if args.action == "perturb":
        write_cube(random_perturbation_lut(args.seed, args.strength, args.size), args.out)
        return {"out": args.out, "size": args.size, "strength": args.strength, "seed": args.seed}
    if args.action == "apply":
        lut = identity_lut(args.size) if args.lut == "identity" else read_cube(args.lut)
        write_image(args.out, apply_lut(lut, read_image(args.input)))
        return {"out": args.out, "lut": args.lut}
    # fit
    content, stylized = read_image(args.content), read_image(args.stylized)
    if content.shape != stylized.shape:
        raise ValueError(f"image dimensions differ: {content.shape} vs {stylized.shape}")
    src, dst = content.reshape(-1, 3), stylized.reshape(-1, 3)
    order = np.random.default_rng(args.seed).permutation(src.shape[0])
    n_hold = int(round(args.holdout * src.shape[0]))
    held, fit_idx = order[:n_hold], order[n_hold:]
    cfg = LutFitConfig(lattice_size=args.size, smoothness=args.smoothness, max_iterations=args.max_iterations)
    lut, report = fit_lut((src[fit_idx], dst[fit_idx]), cfg)
    write_cube(lut, args.out)
    out = {"out": args.out, **json.loads(report.to_json())}
    out["train_delta_e"] = mean_delta_e(apply_lut(lut, src[fit_idx]), dst[fit_idx])
    out["heldout_delta_e"] = mean_delta_e(apply_lut(lut, src[held]), dst[held]) if n_hold else None
    if not report.converged:
        raise ConvergenceError(json.dumps(out))
    return out


# -- metrics --------------------------------------------------------------------------------


def cmd_metrics(args) -> dict:
    from .imageio import read_image
    from .metrics import evaluate_pair, summarize

    aes = _scorer_command(args.aes_scorer)
    cd = _scorer_command(args.cd_scorer) if args.cd_scorer else None
    if args.manifest:
        root = Path(args.manifest).parent
        pairs = [(p.get("id", str(i)), root / p["output"], root / p["gt"]) for i, p in enumerate(json.loads(Path(args.manifest).read_text()))]
    else:
        if not (args.output and args.gt):
            raise ValueError("give --output and --gt, or --manifest")
        pairs = [("0", Path(args.output), Path(args.gt))]
    rows = [evaluate_pair(read_image(o), read_image(g), pid, aes, cd) for pid, o, g in pairs]
    if len(rows) == 1 and not args.manifest:
        return {k: v for k, v in rows[0].items() if k != "pair_id"}
    return {"rows": rows, "mean": summarize(rows)}


# -- scorer ------------------------------------------------------------------------------------


def _scorer_config(args):
    from .scorer import ScorerConfig

    return ScorerConfig(
        tau=args.tau,
        margin=args.margin,
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        stage2_learning_rate=args.stage2_lr,
        stage2_epochs=args.stage2_epochs,
    )


def _synthetic_retrieval(args):
    from .synthetic import retrieval_benchmark

    return retrieval_benchmark(args.presets, args.contents, args.train_contents, args.size, args.seed)


def cmd_scorer(args) -> dict:
    from .imageio import read_image
    from .scorer import (
        ProjectionHead,
        embed_batch,
        load_head,
        preference_accuracy,
        recall_at_k,
        save_head,
        tone_similarity,
        train_stage1,
        train_stage2,
    )
    from .features import feature_dim, tone_features
    from .synthetic import ranking_groups

    if args.action == "train1":
        cfg = _scorer_config(args)
        if args.data:
            images, labels, _ = _read_labeled(args.data)
        else:
            rs = _synthetic_retrieval(args)
            images, labels = rs.train_images, rs.train_labels
        head, trace = train_stage1(images, labels, cfg, log=logger.info)
        _check_finite(trace, "stage-1 loss")
        save_head(head, args.out, cfg)
        return {"out": args.out, "images": len(images), "labels": len(set(labels.tolist())), "loss": trace}
    if args.action == "train2":
        cfg = _scorer_config(args)
        head = load_head(args.head)
        groups = _read_groups(args.groups) if args.groups else ranking_groups(args.n_groups, np.random.default_rng([args.seed, 2]), args.size)
        tuned, trace = train_stage2(head, groups, cfg)
        _check_finite(trace, "stage-2 loss")
        save_head(tuned, args.out, cfg)
        return {
            "out": args.out,
            "groups": len(groups),
            "loss": trace,
            "pacc_before": preference_accuracy(groups, head),
            "pacc_after": preference_accuracy(groups, tuned),
        }
    if args.action == "score":
        if args.head:
            head = load_head(args.head)
        else:
            logger.warning("no --head given; scoring with an untrained head")
            head = ProjectionHead(feature_dim(16), rng=np.random.default_rng(args.seed))
        return {"similarity": tone_similarity(read_image(args.a), read_image(args.b), head)}
    # eval
    head = load_head(args.head)
    if args.gallery:
        g_imgs, g_labels, _ = _read_labeled(args.gallery)
        q_imgs, q_labels, _ = _read_labeled(args.queries)
    else:
        rs = _synthetic_retrieval(args)
        g_imgs, g_labels, q_imgs, q_labels = rs.train_images, rs.train_labels, rs.query_images, rs.query_labels
    G = embed_batch(np.stack([tone_features(x, head.bins) for x in g_imgs]), head)
    Q = embed_batch(np.stack([tone_features(x, head.bins) for x in q_imgs]), head)
    report = {f"recall@{k}": recall_at_k(G, g_labels, Q, q_labels, k) for k in (1, 2, 5)}
    groups = _read_groups(args.groups) if args.groups else ranking_groups(args.n_groups, np.random.default_rng([args.seed, 3]), args.size)
    report["pacc"] = preference_accuracy(groups, head)
    report["queries"] = len(q_imgs)
    report["groups"] = len(groups)
    return report


# -- pipeline --------------------------------------------------------------------------------------


def cmd_pipeline(args) -> dict:
    from .pipeline import PipelineConfig, audit_manifest, build_triplets, load_preset_pool, read_manifest
    from .scorer import load_head

    if args.action == "audit":
        manifest = read_manifest(args.manifest)
        head = load_head(args.head) if args.head else None
        root = Path(args.manifest).parent if head is not None else None
        problems = audit_manifest(manifest, args.threshold, head, root)
        report = {"rows": len(manifest.rows), "violations": problems}
        if problems:
            raise ValueError(json.dumps(report))
        return report
    images = _read_images(args.images)
    presets = load_preset_pool(args.presets)
    head = load_head(args.head)
    scorer = _scorer_command(args.aes_scorer)
    hooks = [h.split() for h in args.hook or []]
    thresholds = [float(t) for t in args.sweep.split(",")] if args.sweep else [args.threshold]
    counts = []
    for i, thr in enumerate(thresholds):
        cfg = PipelineConfig(
            tone_threshold=thr,
            seed=args.seed,
            hooks=hooks,
            hook_fallback=not args.strict_hooks,
            aesthetic_policy=args.aesthetic_policy,
            workers=args.workers,
        )
        out_dir = args.out if i == len(thresholds) - 1 else None
        manifest = build_triplets(images, presets, head, scorer, cfg, out_dir)
        counts.append({"threshold": thr, "rows": len(manifest.rows)})
        logger.info("threshold %.3f: %d rows", thr, len(manifest.rows))
    return {
        "out": args.out,
        "manifest": str(Path(args.out) / "manifest.jsonl") if args.out else None,
        "rows": len(manifest.rows),
        "warnings": manifest.warnings,
        "sweep": counts,
    }


# -- flow ---------------------------------------------------------------------------------------------


def _flow_dataset(args):
    from .flow import make_canvas
    from .imageio import read_image
    from .pipeline import read_manifest
    from .synthetic import flow_triplets, separated_tone_params

    if args.manifest:
        root = Path(args.manifest).parent
        m = read_manifest(args.manifest)
        return [
            make_canvas(read_image(root / r.content_path), read_image(root / r.reference_path), args.size, read_image(root / r.stylized_path))
            for r in m.rows
        ]
    rng = np.random.default_rng([args.seed, 4])
    presets = separated_tone_params(args.presets, rng)
    return [make_canvas(t.content, t.reference, args.size, t.target) for t in flow_triplets(args.n_triplets, presets, rng, args.size)]


def cmd_flow(args) -> dict:
    from .flow import FlowModel, TrainSchedule, load_checkpoint, sample, save_checkpoint, train, write_trace
    from .imageio import read_image, write_image
    from .scorer import load_head

    if args.action == "infer":
        model, _ = load_checkpoint(args.checkpoint)
        out = sample(model, read_image(args.content), read_image(args.reference), K=args.steps, p=args.size, seed=args.seed)
        write_image(args.out, out)
        return {"out": args.out, "steps": args.steps, "seed": args.seed}
    dataset = _flow_dataset(args)
    total = args.total_steps
    start = total if args.reward_start is None else args.reward_start
    schedule = TrainSchedule(
        total_steps=total,
        reward_start_step=start,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        sampler_steps=args.steps,
    )
    head = load_head(args.head) if args.head else None
    model = FlowModel(hidden=args.hidden, rng=np.random.default_rng([args.seed, 5]))
    model, trace = train(model, dataset, schedule, head, log=logger.info)
    _check_finite([r.fm_loss for r in trace], "flow-matching loss")
    save_checkpoint(model, args.out, schedule, step=total)
    if args.trace:
        write_trace(trace, args.trace)
    tail = max(1, len(trace) // 10)
    return {
        "out": args.out,
        "trace": args.trace,
        "triplets": len(dataset),
        "reward_start_step": start,
        "fm_loss_first": float(np.mean([r.fm_loss for r in trace[:tail]])),
        "fm_loss_last": float(np.mean([r.fm_loss for r in trace[-tail:]])),
    }


# -- synthetic data -------------------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    from .imageio import write_image
    from .pipeline import Preset, save_preset_pool
    from .synthetic import CATEGORIES, content_images, preset_lut, retrieval_benchmark, separated_tone_params

    rng = np.random.default_rng([args.seed, 6])
    out = Path(args.out)
    if args.action == "contents":
        for i, img in enumerate(content_images(args.count, rng, args.size)):
            write_image(out / f"c{i:04d}.png", img)
        return {"out": args.out, "count": args.count}
    if args.action == "presets":
        params = separated_tone_params(args.count, rng)
        pool = [
            Preset(f"p{i:03d}", CATEGORIES[i % len(CATEGORIES)], preset_lut(p, args.lut_size, f"p{i:03d}"))
            for i, p in enumerate(params)
        ]
        save_preset_pool(pool, out)
        return {"out": args.out, "count": len(pool)}
    # retrieval
    rs = retrieval_benchmark(args.count, args.contents, args.train_contents, args.size, args.seed)
    _write_labeled(out / "gallery", rs.train_images, rs.train_labels)
    _write_labeled(out / "queries", rs.query_images, rs.query_labels)
    return {"out": args.out, "gallery": len(rs.train_images), "queries": len(rs.query_images)}


# -- parser -----------------------------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    """Return the parser and a map from ``(group, action)`` to its leaf parser."""
    parser = argparse.ArgumentParser(prog="tonestyle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="parallelism for map stages")
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True)
    leaves: dict = {}

    def leaf(sub, group, name, **kw):
        p = sub.add_parser(name, **kw)
        leaves[(group, name)] = p
        return p

    # lut
    g = groups.add_parser("lut", help="3D LUT fitting and application").add_subparsers(dest="action", required=True)
    p = leaf(g, "lut", "identity")
    p.add_argument("--size", type=int, default=33)
    p.add_argument("--out", required=True)
    p = leaf(g, "lut", "perturb")
    p.add_argument("--size", type=int, default=33)
    p.add_argument("--strength", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p = leaf(g, "lut", "apply")
    p.add_argument("--lut", required=True, help="a .cube file or 'identity'")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=33, help="lattice size of the identity LUT")
    p = leaf(g, "lut", "fit")
    p.add_argument("--content", required=True)
    p.add_argument("--stylized", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=33)
    p.add_argument("--smoothness", type=float, default=1e-3)
    p.add_argument("--max-iterations", type=int, default=1000)
    p.add_argument("--holdout", type=float, default=0.2, help="fraction of pixels kept out of the fit")

    # metrics
    p = groups.add_parser("metrics", help="CP, delta E, PSNR and optional external scores")
    leaves[("metrics", None)] = p
    p.add_argument("--output")
    p.add_argument("--gt")
    p.add_argument("--manifest", help='JSON list of {"id", "output", "gt"} paths')
    p.add_argument("--aes-scorer", help=f"aesthetic scorer command (default: ${AES_ENV})")
    p.add_argument("--cd-scorer", help="learned color-difference scorer command")

    # scorer
    g = groups.add_parser("scorer", help="tone-style scorer training and evaluation").add_subparsers(dest="action", required=True)
    for name in ("train1", "train2", "score", "eval"):
        p = leaf(g, "scorer", name)
        p.add_argument("--head", required=name in ("train2", "eval"))
        if name == "score":
            p.add_argument("--a", required=True)
            p.add_argument("--b", required=True)
            continue
        if name != "eval":
            p.add_argument("--out", required=True)
        p.add_argument("--tau", type=float, default=0.1)
        p.add_argument("--margin", type=float, default=0.3)
        p.add_argument("--lr", type=float, default=0.2)
        p.add_argument("--epochs", type=int, default=40)
        p.add_argument("--stage2-lr", type=float, default=0.05)
        p.add_argument("--stage2-epochs", type=int, default=60)
        p.add_argument("--data", help="directory of <label>/<image> files")
        p.add_argument("--gallery", help="labeled gallery directory for eval")
        p.add_argument("--queries", help="labeled query directory for eval")
        p.add_argument("--groups", help="ranking groups JSON")
        p.add_argument("--n-groups", type=int, default=100, help="synthetic ranking groups")
        p.add_argument("--presets", type=int, default=20, help="synthetic presets")
        p.add_argument("--contents", type=int, default=50)
        p.add_argument("--train-contents", type=int, default=35)
        p.add_argument("--size", type=int, default=32)

    # pipeline
    g = groups.add_parser("pipeline", help="triplet dataset construction").add_subparsers(dest="action", required=True)
    p = leaf(g, "pipeline", "build")
    p.add_argument("--images", required=True)
    p.add_argument("--presets", required=True, help="preset pool directory")
    p.add_argument("--head", required=True)
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--sweep", help="comma-separated thresholds; the last one is written")
    p.add_argument("--aes-scorer", help=f"aesthetic scorer command (default: ${AES_ENV})")
    p.add_argument("--aesthetic-policy", choices=("require", "stub", "skip"), default="require")
    p.add_argument("--hook", action="append", help="normalization command run as 'cmd in.png out.png'")
    p.add_argument("--strict-hooks", action="store_true", help="fail instead of passing images through")
    p = leaf(g, "pipeline", "audit")
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--head", help="recompute similarities from the stored files")

    # flow
    g = groups.add_parser("flow", help="in-context flow model").add_subparsers(dest="action", required=True)
    p = leaf(g, "flow", "train")
    p.add_argument("--manifest", help="pipeline manifest; synthetic triplets otherwise")
    p.add_argument("--head", help="tone-style head, required with --reward-start")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="CSV loss trace")
    p.add_argument("--total-steps", type=int, default=2000)
    p.add_argument("--reward-start", type=int)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--steps", type=int, default=4, help="sampler steps for the reward")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--presets", type=int, default=8)
    p.add_argument("--n-triplets", type=int, default=200)
    p = leaf(g, "flow", "infer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--size", type=int, default=32)

    # synth
    g = groups.add_parser("synth", help="synthetic contents, presets and benchmarks").add_subparsers(dest="action", required=True)
    for name in ("contents", "presets", "retrieval"):
        p = leaf(g, "synth", name)
        p.add_argument("--out", required=True)
        p.add_argument("--count", type=int, default=8)
        p.add_argument("--size", type=int, default=32)
        p.add_argument("--lut-size", type=int, default=17)
        p.add_argument("--contents", type=int, default=50)
        p.add_argument("--train-contents", type=int, default=35)
    return parser, leaves


def parse_args(argv=None) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` fill in options not given explicitly."""
    parser, leaves = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        conf = json.loads(Path(args.config).read_text())
        if not isinstance(conf, dict):
            raise ValueError("config file must hold a JSON object")
        conf = {k.replace("-", "_"): v for k, v in conf.items()}
        top = ("seed", "workers", "verbose")
        parser.set_defaults(**{k: v for k, v in conf.items() if k in top})
        leaves[(args.group, getattr(args, "action", None))].set_defaults(**{k: v for k, v in conf.items() if k not in top})
        args = parser.parse_args(argv)
    return args


COMMANDS = {"lut": cmd_lut, "metrics": cmd_metrics, "scorer": cmd_scorer, "pipeline": cmd_pipeline, "flow": cmd_flow, "synth": cmd_synth}


def _exit_code(e: BaseException) -> int:
    from .metrics import ScorerUnavailable
    from .pipeline import HookError

    if isinstance(e, (HookError, ScorerUnavailable)):
        return EXIT_HOOK
    if isinstance(e, ConvergenceError):
        return EXIT_CONVERGENCE
    return EXIT_INPUT


def main(argv=None) -> int:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.handlers[:] = [handler]
    logger.propagate = False
    logger.setLevel(logging.INFO)
    try:
        args = parse_args(argv)
    except (OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}))
        return EXIT_INPUT
    logger.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    resolved = {k: v for k, v in vars(args).items()}
    logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    try:
        report = COMMANDS[args.group](args)
    except (ValueError, OSError, RuntimeError) as e:
        code = _exit_code(e)
        logger.error("%s: %s", type(e).__name__, e)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}))
        return code
    print(json.dumps({"command": [args.group, getattr(args, "action", None)], "config": resolved, **report}, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
