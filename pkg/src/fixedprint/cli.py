"""Command-line entry point tying the pipeline together.

Subcommands cover synthetic data generation, training, distillation,
template extraction, minutiae-map encoding, alignment, gallery
enrollment, 1:N search, verification/identification evaluation, and
throughput benchmarking.  Machine-readable output is JSON on stdout
(``--json`` where it is optional); diagnostics go to stderr.

Exit codes: 0 success, 2 usage error, 3 validation/format error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (
    DomainError,
    FixedPrintError,
    FormatError,
    ValidationError,
)
from .gallery_search import (
    benchmark,
    build_gallery,
    eval_search,
    eval_verification,
    load_gallery,
    save_gallery,
    search,
)
from .minutiae_map import MapConfig, encode_map, read_mnt, write_map_dump
from .spatial_transform import (
    AlignmentParams,
    build_affine,
    grid_sample,
    read_image,
    write_image,
)
from .synth_data import PerturbationConfig, load_dataset, make_dataset, write_dataset
from .template import FixedTemplate, match_score, read_template, write_template
from .toy_net import (
    NetConfig,
    distill,
    extract_embedding,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .toy_net.train import DEFAULT_MAP_SIGMA, AugmentConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4


def _default_threads() -> int:
    return os.cpu_count() or 1


def _emit(args, payload: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload))
    else:
        print(human)


def _channels(text: str) -> tuple[int, ...]:
    try:
        channels = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not channels:
        raise argparse.ArgumentTypeError("at least one channel count required")
    return channels


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> None:
    perturbation = PerturbationConfig(
        max_rotation_deg=args.max_rotation_deg,
        max_translation_px=args.max_translation_px,
        noise_sigma=args.noise_sigma,
        max_brightness=args.max_brightness,
    )
    dataset = make_dataset(
        args.classes, args.impressions, seed=args.seed, size=args.size,
        config=perturbation,
    )
    write_dataset(dataset, args.out)
    payload = {
        "out": str(args.out),
        "classes": dataset.num_classes,
        "impressions_per_class": dataset.impressions_per_class,
        "train": len(dataset.train),
        "holdout": len(dataset.holdout),
        "image_size": dataset.image_size,
        "seed": dataset.seed,
    }
    _emit(args, payload, f"wrote {len(dataset.train)}+{len(dataset.holdout)} impressions "
                         f"({dataset.num_classes} classes) to {args.out}")


def _net_config_from_args(args, dataset) -> NetConfig:
    return NetConfig(
        in_h=dataset.image_size,
        in_w=dataset.image_size,
        stem_channels=args.stem_channels,
        branch_channels=args.branch_channels,
        embed_dim=args.embed_dim,
        num_classes=dataset.num_classes,
        map_h=args.map_h,
        map_w=args.map_w,
        map_c=args.map_c,
        use_localizer=args.localizer,
        dropout_keep=args.dropout_keep,
        weight_decay=args.weight_decay,
        use_float64=args.float64,
        seed=args.seed,
    )


def _cmd_train(args) -> None:
    dataset = load_dataset(args.data)
    config = _net_config_from_args(args, dataset)
    augment = None if args.no_augment else AugmentConfig()
    params, curve = train(
        dataset, config, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, augment=augment, map_sigma=args.map_sigma, seed=args.seed,
    )
    save_checkpoint(params, args.out)
    final = curve[-1]
    payload = {
        "out": str(args.out),
        "epochs": args.epochs,
        "first_loss": curve[0].total,
        "final_loss": final.total,
        "final_terms": dataclasses.asdict(final),
    }
    _emit(args, payload,
          f"trained {args.epochs} epochs: loss {curve[0].total:.4f} -> "
          f"{final.total:.4f}, checkpoint {args.out}")


def _cmd_distill(args) -> None:
    dataset = load_dataset(args.data)
    teacher = load_checkpoint(args.teacher)
    student_config = dataclasses.replace(
        teacher.config,
        stem_channels=args.stem_channels or teacher.config.stem_channels,
        branch_channels=args.branch_channels or teacher.config.branch_channels,
        seed=args.seed,
    )
    student, curve = distill(
        teacher, student_config, dataset, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, seed=args.seed,
    )
    save_checkpoint(student, args.out)
    payload = {
        "out": str(args.out),
        "epochs": args.epochs,
        "first_loss": curve[0],
        "final_loss": curve[-1],
    }
    _emit(args, payload,
          f"distilled {args.epochs} epochs: loss {curve[0]:.6f} -> "
          f"{curve[-1]:.6f}, checkpoint {args.out}")


def _cmd_extract(args) -> None:
    params = load_checkpoint(args.net)
    image = read_image(args.image)
    template = extract_embedding(params, image)
    write_template(template, args.out)
    payload = {"out": str(args.out), "dim": template.dim}
    _emit(args, payload, f"wrote template (dim {template.dim}) to {args.out}")


def _cmd_encode_map(args) -> None:
    template = read_mnt(args.mnt)
    config = MapConfig(
        h_map=args.map_h, w_map=args.map_w, c=args.channels,
        sigma_s=args.sigma_s, sigma_o=args.sigma_o,
        truncation_radius=args.truncation_radius,
    )
    encoded = encode_map(template, config)
    write_map_dump(encoded, args.out)
    payload = {
        "out": str(args.out),
        "h": args.map_h, "w": args.map_w, "c": args.channels,
        "minutiae": len(template.minutiae),
        "total_mass": float(encoded.values.sum(dtype=np.float64)),
    }
    _emit(args, payload,
          f"encoded {len(template.minutiae)} minutiae into "
          f"{args.map_h}x{args.map_w}x{args.channels} map at {args.out}")


def _cmd_align(args) -> None:
    image = read_image(args.image)
    h, w = image.pixels.shape
    window = args.window if args.window is not None else args.window_fraction * w
    params = AlignmentParams(args.tx, args.ty, args.theta, window=window)
    matrix = build_affine(params, w, h)
    aligned = grid_sample(image, matrix, out_h=h, out_w=w)
    write_image(aligned, args.out)
    payload = {
        "out": str(args.out),
        "tx": params.tx, "ty": params.ty, "theta": params.theta,
        "window": params.window,
    }
    _emit(args, payload, f"wrote aligned crop to {args.out}")


def _template_id(path: Path) -> str:
    return path.stem.split("__")[0]


def _cmd_enroll(args) -> None:
    sources: list[tuple[str, Path]] = []
    if args.dir is not None:
        files = sorted(Path(args.dir).glob("*.fpt"))
        if not files:
            raise ValidationError(f"no .fpt files under {args.dir}")
        sources.extend((f.stem, f) for f in files)
    for spec_pair in args.templates:
        subject_id, sep, path = spec_pair.partition("=")
        if not sep or not subject_id or not path:
            raise ValidationError(f"expected ID=PATH, got {spec_pair!r}")
        sources.append((subject_id, Path(path)))
    if not sources:
        raise ValidationError("nothing to enroll: give --dir and/or ID=PATH pairs")
    for _, path in sources:
        if not path.exists():
            raise ValidationError(f"no such template file: {path}")
    pairs = [(subject_id, read_template(path)) for subject_id, path in sources]
    gallery = build_gallery(pairs)
    save_gallery(gallery, args.out)
    payload = {"out": str(args.out), "size": gallery.size, "dim": gallery.dim}
    _emit(args, payload,
          f"enrolled {gallery.size} templates (dim {gallery.dim}) into {args.out}")


def _cmd_search(args) -> None:
    gallery = load_gallery(args.gallery)
    probe = read_template(args.probe)
    result = search(gallery, probe, k=args.k, workers=args.threads)
    if args.json:
        print(json.dumps({
            "probe": str(args.probe),
            "results": [
                {"rank": i + 1, "id": sid, "score": score}
                for i, (sid, score) in enumerate(result.entries)
            ],
        }))
    else:
        for i, (sid, score) in enumerate(result.entries):
            print(f"rank {i + 1}: {sid} {score:.6f}")


def _read_score_file(path) -> list[float]:
    """Scores, one per line: either a float or two template paths."""
    scores: list[float] = []
    base = Path(path)
    for lineno, raw in enumerate(base.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) == 1:
            try:
                scores.append(float(parts[0]))
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: not a score: {parts[0]!r}")
        elif len(parts) == 2:
            a = read_template(base.parent / parts[0])
            b = read_template(base.parent / parts[1])
            scores.append(match_score(a, b))
        else:
            raise ValidationError(
                f"{path}:{lineno}: expected one score or two template paths"
            )
    return scores


def _cmd_verify_eval(args) -> None:
    genuine = _read_score_file(args.genuine)
    imposter = _read_score_file(args.imposter)
    report = eval_verification(genuine, imposter, far_levels=tuple(args.far))
    if args.json:
        print(json.dumps(report.to_json_dict()))
    else:
        for (level, tar), (_, theta) in zip(report.tar_at_far, report.thresholds):
            print(f"TAR@FAR={level:g}: {tar:.4f} (threshold {theta:.6f})")


def _cmd_search_eval(args) -> None:
    gallery = load_gallery(args.gallery)
    files = sorted(Path(args.probes).glob("*.fpt"))
    if not files:
        raise ValidationError(f"no .fpt probes under {args.probes}")
    probes = [(_template_id(f), read_template(f)) for f in files]
    report = eval_search(probes, gallery, max_rank=args.max_rank)
    if args.json:
        print(json.dumps(report.to_json_dict()))
    else:
        print(f"probes: {len(probes)}  gallery: {gallery.size}")
        print(f"CMC(1): {report.cmc[0]:.4f}")


def _random_unit_rows(rng, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows.astype(np.float32)


def _cmd_bench(args) -> None:
    rng = np.random.default_rng(args.seed)
    rows = _random_unit_rows(rng, args.gallery_size, args.dim)
    gallery = build_gallery(
        [(f"g{i:07d}", FixedTemplate(rows[i])) for i in range(args.gallery_size)]
    )
    queries = [
        FixedTemplate(row) for row in _random_unit_rows(rng, args.probes, args.dim)
    ]
    report = benchmark(gallery, queries, repetitions=args.reps, threads=args.threads)
    payload = {
        "gallery_size": report.gallery_size,
        "dim": report.dim,
        "matches_per_sec_1t": report.matches_per_sec_single,
        "matches_per_sec_mt": report.matches_per_sec_multi,
        "probe_latency_ms": report.probe_latency_ms,
        "n_probes": report.n_probes,
        "repetitions": report.repetitions,
        "threads": report.threads,
    }
    if args.json:
        print(json.dumps(payload))
    else:
        print(f"gallery {report.gallery_size} x dim {report.dim}: "
              f"{report.matches_per_sec_single:,.0f} matches/s (1 thread), "
              f"{report.matches_per_sec_multi:,.0f} matches/s ({report.threads} threads), "
              f"median probe latency {report.probe_latency_ms:.3f} ms")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_json_flag(p) -> None:
    p.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fixedprint",
        description="Fixed-length fingerprint representation pipeline.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic labeled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--impressions", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-rotation-deg", type=float, default=15.0)
    p.add_argument("--max-translation-px", type=float, default=8.0)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--max-brightness", type=float, default=0.1)
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_gen_data, inputs=())

    p = sub.add_parser("train", help="train the multitask network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--map-sigma", type=float, default=DEFAULT_MAP_SIGMA)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--stem-channels", type=_channels, default=(8, 16))
    p.add_argument("--branch-channels", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--map-h", type=int, default=16)
    p.add_argument("--map-w", type=int, default=16)
    p.add_argument("--map-c", type=int, default=6)
    p.add_argument("--dropout-keep", type=float, default=0.8)
    p.add_argument("--weight-decay", type=float, default=4e-5)
    p.add_argument("--localizer", action="store_true")
    p.add_argument("--float64", action="store_true")
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_train, inputs=("data",))

    p = sub.add_parser("distill", help="train a student against a teacher checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stem-channels", type=_channels, default=None)
    p.add_argument("--branch-channels", type=int, default=None)
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_distill, inputs=("data", "teacher"))

    p = sub.add_parser("extract", help="image -> fixed-length template (.fpt)")
    p.add_argument("--net", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_extract, inputs=("net", "image"))

    p = sub.add_parser("encode-map", help="minutiae file (.mnt) -> map dump")
    p.add_argument("--mnt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--map-h", type=int, default=128)
    p.add_argument("--map-w", type=int, default=128)
    p.add_argument("--channels", type=int, default=6)
    p.add_argument("--sigma-s", type=float, default=2.0)
    p.add_argument("--sigma-o", type=float, default=None)
    p.add_argument("--truncation-radius", type=float, default=6.5)
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_encode_map, inputs=("mnt",))

    p = sub.add_parser("align", help="apply a bounded crop-and-rotate to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tx", type=float, default=0.0)
    p.add_argument("--ty", type=float, default=0.0)
    p.add_argument("--theta", type=float, default=0.0, help="rotation in radians")
    p.add_argument("--window", type=float, default=None, help="crop side in pixels")
    p.add_argument("--window-fraction", type=float, default=285.0 / 448.0,
                   help="crop side as a fraction of image width (when --window unset)")
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_align, inputs=("image",))

    p = sub.add_parser("enroll", help="pack templates into a gallery (.fpg)")
    p.add_argument("--out", required=True)
    p.add_argument("--dir", default=None, help="directory of <id>.fpt files")
    p.add_argument("templates", nargs="*", metavar="ID=PATH")
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_enroll, inputs=("dir",))

    p = sub.add_parser("search", help="rank gallery candidates for one probe")
    p.add_argument("--gallery", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("-k", type=int, default=1)
    p.add_argument("--threads", type=int, default=_default_threads())
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_search, inputs=("gallery", "probe"))

    p = sub.add_parser("verify-eval", help="TAR at FAR levels from 1:1 score files")
    p.add_argument("--genuine", required=True)
    p.add_argument("--imposter", required=True)
    p.add_argument("--far", type=float, nargs="+", default=[0.1, 0.01])
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_verify_eval, inputs=("genuine", "imposter"))

    p = sub.add_parser("search-eval", help="CMC curve for a probe directory")
    p.add_argument("--gallery", required=True)
    p.add_argument("--probes", required=True,
                   help="directory of <trueid>[__suffix].fpt files")
    p.add_argument("--max-rank", type=int, default=None)
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_search_eval, inputs=("gallery", "probes"))

    p = sub.add_parser("bench", help="exhaustive-scan throughput on random data")
    p.add_argument("--gallery-size", type=int, default=10000)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--seed", type=int, default=0)
    _add_json_flag(p)
    p.set_defaults(handler=_cmd_bench, inputs=())

    return parser


def _check_input_paths(args) -> None:
    """Every declared input path must exist before any work starts."""
    for name in getattr(args, "inputs", ()):
        value = getattr(args, name, None)
        if value is not None and not Path(value).exists():
            raise ValidationError(f"--{name.replace('_', '-')}: no such path: {value}")


def run(argv=None) -> int:
    """Parses and executes one invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse prints its own diagnostics
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        _check_input_paths(args)
        args.handler(args)
    except (ValidationError, FormatError, DomainError) as e:
        print(f"fixedprint: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FixedPrintError, OSError) as e:
        print(f"fixedprint: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
