"""Command-line entry point.

Five file-based commands tie the library into reproducible runs:

* ``encode-vocab``: nouns/captions/embeddings file -> embeddings JSON
* ``detect``: image (file or seeded) + vocabulary -> detections JSON
* ``reparam-verify``: dual-path equivalence report, exit 1 on failure
* ``label``: captions + fixtures -> annotations JSONL + report
* ``grad-check``: analytic-vs-numeric gradient report, exit 1 on failure

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage or validation error.  All outputs are written atomically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autolabel, gradcheck
from .errors import DimensionError, InputError, LoadError, OvdetError
from .fusion import FusionParams, repvlpan_forward, toy_backbone
from .head import HeadParams, detect, head_forward
from .reparam import verify_equivalence
from .textembed import (
    bake_offline_vocabulary,
    embeddings_to_json,
    load_embeddings,
    toy_encode,
)
from .tensorops import load_tensor
from .util import write_json_atomic, write_text_atomic

DEFAULT_VERIFY_NOUNS = (
    "person", "car", "dog", "cat", "chair", "bottle", "bird", "cup",
)


@dataclass(frozen=True)
class RunConfig:
    """Run-wide knobs; every command reads these from a key=value file."""

    dim: int = 32
    n_bins: int = 16
    heads: int = 4
    max_vocab: int = 80
    nms_thresh: float = 0.5
    conf_thresh: float = 0.3
    img_thresh: float = 0.3
    reparam_tol: float = 1e-6
    seed: int = 0
    relabel: bool = False
    box_accurate: bool = False

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise InputError(f"dim must be even and >= 2, got {self.dim}")
        if self.heads < 1 or self.dim % self.heads:
            raise InputError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.n_bins < 2:
            raise InputError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.max_vocab < 1:
            raise InputError(f"max_vocab must be >= 1, got {self.max_vocab}")
        for name in ("nms_thresh", "conf_thresh", "img_thresh"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise InputError(f"{name} must lie in [0, 1], got {v}")
        if not (self.reparam_tol > 0 and math.isfinite(self.reparam_tol)):
            raise InputError(f"reparam_tol must be positive, got {self.reparam_tol}")


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def parse_config(path) -> RunConfig:
    """Read a flat ``key = value`` file; '#' starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise LoadError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in fields:
            raise LoadError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = fields[key]
        try:
            if kind in ("bool", bool):
                values[key] = _BOOL_WORDS[value.lower()]
            elif kind in ("int", int):
                values[key] = int(value)
            else:
                values[key] = float(value)
        except (ValueError, KeyError) as exc:
            raise LoadError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from exc
    return RunConfig(**values)


def _config_from(args) -> RunConfig:
    config = parse_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON: {exc}") from exc


def default_params(config: RunConfig) -> tuple[FusionParams, HeadParams]:
    fusion = FusionParams.random(config.dim, heads=config.heads, seed=config.seed)
    head = HeadParams.random(config.dim, n_bins=config.n_bins, seed=config.seed)
    return fusion, head


def load_params(path) -> tuple[FusionParams, HeadParams]:
    obj = _load_json(path)
    if not isinstance(obj, dict) or "fusion" not in obj or "head" not in obj:
        raise LoadError(f"params file {path} must carry 'fusion' and 'head'")
    try:
        return FusionParams.from_json(obj["fusion"]), HeadParams.from_json(obj["head"])
    except (KeyError, TypeError) as exc:
        raise LoadError(f"params file {path} is malformed: {exc}") from exc


def save_params(fusion: FusionParams, head: HeadParams, path) -> None:
    write_json_atomic(str(path), {"fusion": fusion.to_json(), "head": head.to_json()})


def _resolve_params(args, config: RunConfig) -> tuple[FusionParams, HeadParams]:
    if getattr(args, "params", None):
        fusion, head = load_params(args.params)
    else:
        fusion, head = default_params(config)
    if fusion.dim != config.dim or head.dim != config.dim:
        raise DimensionError(
            f"params dim ({fusion.dim}/{head.dim}) != configured dim ({config.dim})")
    return fusion, head


# ------------------------------------------------------------- commands

def cmd_encode_vocab(args) -> int:
    config = _config_from(args)
    sources = [s for s in (args.nouns, args.captions, args.embeddings) if s]
    if len(sources) != 1:
        raise InputError("give exactly one of --nouns, --captions, --embeddings")
    if args.embeddings:
        emb = load_embeddings(args.embeddings)
    else:
        if args.nouns:
            nouns = _load_json(args.nouns)
            if not isinstance(nouns, list) or not all(
                    isinstance(n, str) and n for n in nouns):
                raise LoadError(f"{args.nouns} must be a JSON array of nonempty strings")
            nouns = list(dict.fromkeys(nouns))
        else:
            samples = autolabel.read_captions_jsonl(args.captions)
            nouns = list(dict.fromkeys(
                phrase for s in samples for phrase in autolabel.extract_nouns(s.caption)))
        if not nouns:
            raise InputError("no nouns to encode")
        emb = toy_encode(nouns, dim=config.dim, seed=config.seed)
    bake_offline_vocabulary(emb, args.out)
    print(f"encoded {emb.count} nouns at dim {emb.dim} -> {args.out}")
    return 0


def cmd_detect(args) -> int:
    config = _config_from(args)
    emb = load_embeddings(args.vocab)
    if emb.dim != config.dim:
        raise DimensionError(
            f"vocabulary dim {emb.dim} != configured dim {config.dim}")
    fusion_params, head_params = _resolve_params(args, config)

    if args.image:
        image = load_tensor(args.image)
        image_id = Path(args.image).stem
    else:
        try:
            h, w = (int(part) for part in args.image_size.lower().split("x"))
        except ValueError:
            raise InputError(f"--image-size must look like 64x64, got {args.image_size!r}")
        rng = np.random.default_rng([config.seed, 11])
        image = rng.uniform(0.0, 1.0, size=(h, w, 3))
        image_id = f"seeded-{config.seed}"

    pyramid = toy_backbone(image, seed=config.seed, dim=config.dim)
    fused, text_updated = repvlpan_forward(pyramid, emb, fusion_params)
    head_out = head_forward(fused, head_params)
    detections = detect(
        head_out,
        text_updated,
        emb.nouns,
        scale=head_params.scale,
        shift=head_params.shift,
        score_thresh=config.conf_thresh,
        iou_thresh=config.nms_thresh,
    )
    write_json_atomic(args.out, {"image_id": image_id, "detections": detections})
    print(f"{image_id}: {len(detections)} detections -> {args.out}")
    return 0


def cmd_reparam_verify(args) -> int:
    config = _config_from(args)
    if args.vocab:
        emb = load_embeddings(args.vocab)
    else:
        emb = toy_encode(list(DEFAULT_VERIFY_NOUNS), dim=config.dim, seed=config.seed)
    if emb.dim != config.dim:
        raise DimensionError(
            f"vocabulary dim {emb.dim} != configured dim {config.dim}")
    if args.params:
        fusion_params, _ = load_params(args.params)
    else:
        fusion_params, _ = default_params(config)
    tol = args.tol if args.tol is not None else config.reparam_tol
    report = verify_equivalence(
        fusion_params,
        emb,
        trials=args.trials,
        tol=tol,
        seed=config.seed,
        inject_fault=args.inject_fault,
    )
    payload = report.to_json()
    if args.out:
        write_json_atomic(args.out, payload)
    for layer, entry in payload["layers"].items():
        status = "ok" if entry["pass"] else "FAIL"
        print(f"layer {layer}: max rel {entry['max_rel']:.3e} [{status}]")
    print(f"pooled tokens bit-identical: {payload['tokens']['bit_identical']}")
    print(f"text update divergence: {payload['text_update']['max_divergence']:.3e} "
          f"(informational)")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_label(args) -> int:
    config = _config_from(args)
    samples = autolabel.read_captions_jsonl(args.dataset)
    detector = autolabel.FixtureDetector.from_json(_load_json(args.detector))
    scorer = autolabel.FixtureScorer.from_json(_load_json(args.scorer))
    pipeline_config = autolabel.PipelineConfig(
        nms_thresh=config.nms_thresh,
        conf_thresh=config.conf_thresh,
        img_thresh=config.img_thresh,
        relabel=bool(config.relabel or args.relabel),
        box_accurate=config.box_accurate,
        seed=config.seed,
    )
    outcomes, report = autolabel.run_pipeline(samples, detector, scorer, pipeline_config)
    payload = autolabel.annotations_payload(outcomes)
    lines = "".join(json.dumps(entry) + "\n" for entry in payload)
    write_text_atomic(args.out, lines)
    if args.report:
        write_json_atomic(args.report, report)
    print(f"kept {report['images_kept']}/{report['images_in']} images "
          f"({report['images_errored']} errored), "
          f"{report['proposals_kept']} annotations -> {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    ops = None
    if args.ops:
        ops = [op.strip() for op in args.ops.split(",") if op.strip()]
        unknown = [op for op in ops if op not in gradcheck.REGISTRY]
        if unknown:
            raise InputError(
                f"unknown ops {unknown}, have {sorted(gradcheck.REGISTRY)}")
    report = gradcheck.run_grad_checks(ops, seeds=args.seeds, eps=args.eps)
    if args.out:
        write_json_atomic(args.out, report)
    for op_id, entry in report["ops"].items():
        status = "ok" if entry["pass"] else "FAIL"
        print(f"{op_id}: max rel error {entry['max_rel_error']:.3e} "
              f"(worst seed {entry['worst_seed']}) [{status}]")
    print("PASS" if report["pass"] else "FAIL")
    return 0 if report["pass"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovdet",
        description="Open-vocabulary detection toolkit: encode vocabularies, "
                    "run prompt-then-detect inference, verify the folded "
                    "deployment path, mine pseudo-labels, check gradients.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")

    p = sub.add_parser("encode-vocab", help="build an embeddings file")
    common(p)
    p.add_argument("--nouns", help="JSON array of nouns")
    p.add_argument("--captions", help="JSONL caption file; nouns are extracted")
    p.add_argument("--embeddings", help="existing embeddings file to re-validate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode_vocab)

    p = sub.add_parser("detect", help="prompt-then-detect on a toy image")
    common(p)
    p.add_argument("--vocab", required=True, help="embeddings JSON")
    p.add_argument("--params", help="params JSON; omitted = seeded defaults")
    p.add_argument("--image", help="image tensor JSON (H, W, 3)")
    p.add_argument("--image-size", default="96x96",
                   help="extents for the seeded image when --image is omitted; "
                        "96 is the smallest extent whose coarsest level still "
                        "fills the 3x3 token grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("reparam-verify", help="check folded-path equivalence")
    common(p)
    p.add_argument("--vocab", help="embeddings JSON; omitted = builtin toy nouns")
    p.add_argument("--params", help="params JSON; omitted = seeded defaults")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=None,
                   help="relative tolerance; defaults to the config value")
    p.add_argument("--inject-fault", metavar="LAYER",
                   help="corrupt one layer's folded weights to exercise failure")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_reparam_verify)

    p = sub.add_parser("label", help="mine pseudo-labels from captions")
    common(p)
    p.add_argument("--dataset", required=True, help="JSONL caption file")
    p.add_argument("--detector", required=True, help="detector fixture JSON")
    p.add_argument("--scorer", required=True, help="scorer fixture JSON")
    p.add_argument("--relabel", action="store_true",
                   help="re-assign each region to its best-scoring noun")
    p.add_argument("--out", required=True, help="annotations JSONL")
    p.add_argument("--report", help="write the run report here")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("grad-check", help="verify analytic gradients")
    common(p)
    p.add_argument("--ops", help="comma-separated op ids; default: all model ops")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OvdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
