"""``msd`` command line: the full pipeline as subcommands with a JSON manifest per run."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .errors import ConfigInvalid, IOFailure, MissingArtifact, MSDError

log = logging.getLogger("msd")

STYLE_FILE_HELP = "motion JSON, or a dataset row ({'motion': ..., 'text': ...})"


# ---------------------------------------------------------------------------
# helpers


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"required input {path} does not exist")
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_motion_file(path):
    """Return ``(motion, text or None)`` from a motion or dataset-row JSON file."""
    from .motion import motion_from_dict

    path = _require(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if "motion" in doc:
        return motion_from_dict(doc["motion"]), doc.get("text")
    return motion_from_dict(doc), doc.get("text")


def write_motion_file(motion, path, text: str | None = None) -> None:
    from .motion import motion_to_dict

    doc = motion_to_dict(motion) if text is None else {"text": text, "motion": motion_to_dict(motion)}
    _write_text(path, json.dumps(doc))


def _schedule(cfg):
    from .diffusion import make_schedule

    return make_schedule(cfg.schedule, cfg.T, cfg.S)


def _read_data(path):
    from .dataset import read_jsonl

    return read_jsonl(_require(path))


def _load_prior(path):
    from .denoiser import DenoiserModel

    return DenoiserModel.load(_require(path))


def _load_dis(path):
    from .discriminator import DiscriminatorModel

    return DiscriminatorModel.load(_require(path))


def _text_for(text_flag, file_text, what: str) -> str:
    text = text_flag or file_text
    if not text:
        raise ConfigInvalid(f"{what} needs a prompt: pass --text or use a dataset row with a 'text' field")
    return text


def _pair_to_dict(pair) -> dict:
    from .motion import motion_to_dict

    return {"style_prompt": pair.style_prompt, "neutral_prompt": pair.neutral_prompt,
            "style_example": motion_to_dict(pair.style_example), "neutral": motion_to_dict(pair.neutral)}


def _pair_from_dict(doc):
    from .motion import motion_from_dict
    from .transfer import StyleNeutralPair

    try:
        return StyleNeutralPair(motion_from_dict(doc["style_example"]), motion_from_dict(doc["neutral"]),
                                doc["style_prompt"], doc["neutral_prompt"])
    except KeyError as exc:
        raise ConfigInvalid(f"pair file is missing {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands; each returns (outputs, inputs)


def cmd_gen_data(args, cfg):
    from .dataset import DatasetSpec, build_dataset, write_jsonl

    out = Path(args.out or cfg.paths["data"])
    if out.is_dir() or str(args.out or "").endswith("/"):
        out = out / "data.jsonl"
    if args.spec:
        try:
            spec = DatasetSpec.from_dict(json.loads(_require(args.spec).read_text()))
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"invalid dataset spec {args.spec}: {exc}") from exc
        inputs = [Path(args.spec)]
    else:
        make = DatasetSpec.uniform if args.uniform else DatasetSpec
        spec, inputs = make(seed=cfg.seed, per_cell=cfg.per_cell), []
    splits = build_dataset(spec)
    write_jsonl(splits, out)
    log.info("wrote %d train / %d test samples to %s", len(splits["train"]), len(splits["test"]), out)
    return [out], inputs


def cmd_pretrain(args, cfg):
    from .denoiser import ModelConfig, TrainConfig, new_denoiser, pretrain_prior

    data = Path(args.data or cfg.paths["data"])
    out = Path(args.out or cfg.paths["prior"])
    train = _read_data(data)["train"]
    model = new_denoiser(train, ModelConfig.profile(cfg.profile, T=cfg.T), cfg.seed)
    tc = TrainConfig(batch=cfg.prior_batch, lr=cfg.prior_lr, steps=args.steps or cfg.prior_steps, seed=cfg.seed)
    curve = pretrain_prior(model, train, _schedule(cfg), tc)
    model.save(out, {"train": tc.__dict__, "final_loss": float(np.mean(curve[-50:])) if curve else None})
    return [out], [data]


def cmd_pretrain_dis(args, cfg):
    from .discriminator import DiscriminatorConfig, DisTrainConfig, new_discriminator, pretrain_discriminator

    data = Path(args.data or cfg.paths["data"])
    out = Path(args.out or cfg.paths["dis"])
    train = _read_data(data)["train"]
    model = new_discriminator(train, DiscriminatorConfig.profile(cfg.profile), cfg.seed)
    tc = DisTrainConfig(batch=cfg.dis_batch, lr=cfg.dis_lr, steps=args.steps or cfg.dis_steps, seed=cfg.seed)
    curve = pretrain_discriminator(model, train, tc)
    model.save(out, {"train": tc.__dict__, "final_loss": float(np.mean(curve[-50:])) if curve else None})
    return [out], [data]


def _make_pair(args, cfg, prior_path):
    from .transfer import generate_neutral_pair

    motion, file_text = read_motion_file(args.style)
    text = _text_for(args.text, file_text, "the style example")
    return generate_neutral_pair(_load_prior(prior_path), _schedule(cfg), motion, text, cfg.G, cfg.seed)


def cmd_pairgen(args, cfg):
    prior = Path(args.prior or cfg.paths["prior"])
    out = Path(args.out or cfg.paths["pair"])
    pair = _make_pair(args, cfg, prior)
    _write_text(out, json.dumps(_pair_to_dict(pair)))
    return [out], [prior, Path(args.style)]


def cmd_finetune(args, cfg):
    from .motion import motion_to_dict
    from .transfer import FinetuneConfig, finetune_style

    prior_path = Path(args.prior or cfg.paths["prior"])
    dis_path = Path(args.dis or cfg.paths["dis"])
    data = Path(args.data or cfg.paths["data"])
    out = Path(args.out or cfg.paths["model"])
    if args.style:
        pair = _make_pair(args, cfg, prior_path)
        inputs = [prior_path, dis_path, data, Path(args.style)]
    else:
        pair_path = _require(args.pair or cfg.paths["pair"])
        pair = _pair_from_dict(json.loads(pair_path.read_text()))
        inputs = [prior_path, dis_path, data, pair_path]
    fc = FinetuneConfig(G=cfg.G, K=cfg.K, lambda_sr=cfg.lambda_sr, lambda_s=cfg.lambda_s, epochs=cfg.epochs,
                        seed=cfg.seed, batch=cfg.ft_batch, lr=cfg.ft_lr)
    neutral = [s for s in _read_data(data)["train"] if s.style == "neutral"]
    model, history = finetune_style(_load_prior(prior_path), _load_dis(dis_path), neutral, pair, fc, _schedule(cfg))
    model.save(out, {"style_prompt": pair.style_prompt, "neutral_prompt": pair.neutral_prompt, "style": pair.style,
                     "style_example": motion_to_dict(pair.style_example), "neutral": motion_to_dict(pair.neutral),
                     "finetune": fc.__dict__, "history": history})
    return [out], inputs


def _styled_meta(model, path):
    meta = getattr(model, "checkpoint_meta", {})
    if "style" not in meta:
        raise ConfigInvalid(f"{path} is not a style fine-tuned checkpoint")
    return meta


def cmd_transfer(args, cfg):
    from .bvh import export_bvh
    from .motion import motion_from_dict
    from .prompts import stylize_prompt
    from .transfer import transfer

    model_path = Path(args.model or cfg.paths["model"])
    model = _load_prior(model_path)
    meta = _styled_meta(model, model_path)
    content, file_text = read_motion_file(args.content)
    text = _text_for(args.text, file_text, "the content motion")
    target = stylize_prompt(text, meta["style"])
    out = Path(args.out)
    result = transfer(model, _schedule(cfg), content, target, cfg.K, warp=not args.no_warp,
                      style_example=motion_from_dict(meta["style_example"]), source_text=text)
    write_motion_file(result, out)
    outputs = [out]
    if args.bvh:
        try:
            export_bvh(result, args.bvh)
        except OSError as exc:
            raise IOFailure(f"cannot write {args.bvh}: {exc}") from exc
        outputs.append(Path(args.bvh))
    return outputs, [model_path, Path(args.content)]


def cmd_eval(args, cfg):
    from .reporting import evaluate_style_model, write_report

    model_path = Path(args.model or cfg.paths["model"])
    data = Path(args.data or cfg.paths["data"])
    prefix = Path(args.out or cfg.paths["report"])
    model = _load_prior(model_path)
    _styled_meta(model, model_path)
    report = evaluate_style_model(model, _schedule(cfg), _read_data(data), cfg)
    outputs = write_report(report, prefix)
    return outputs, [model_path, data]


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigInvalid(f"expected a comma separated list of integers, got {text!r}") from exc


def cmd_sweep(args, cfg):
    from .transfer import FinetuneConfig, SweepSetup, sweep_GK, write_rows_csv

    prior_path = Path(args.prior or cfg.paths["prior"])
    dis_path = Path(args.dis or cfg.paths["dis"])
    data = Path(args.data or cfg.paths["data"])
    out = Path(args.out)
    splits = _read_data(data)
    pool = splits["test"] + splits["train"]
    examples = []
    for style in ("old", "proud", "angry", "depressed"):
        found = [s for s in pool if s.style == style]
        examples.extend(found[: args.examples])
    contents = [s for s in splits["test"] if s.style == "neutral"][: args.contents]
    fc = FinetuneConfig(G=cfg.G, K=max(cfg.K, 1), lambda_sr=cfg.lambda_sr, lambda_s=cfg.lambda_s, seed=cfg.seed,
                        batch=cfg.ft_batch, lr=cfg.ft_lr, max_steps=args.steps)
    setup = SweepSetup(examples, contents, [s for s in splits["train"] if s.style == "neutral"], fc, cfg.seed)
    rows = sweep_GK(_load_prior(prior_path), _load_dis(dis_path), _schedule(cfg), setup,
                    _int_list(args.G_list), _int_list(args.K_list))
    try:
        write_rows_csv(rows, out)
    except OSError as exc:
        raise IOFailure(f"cannot write {out}: {exc}") from exc
    return [out], [prior_path, dis_path, data]


def cmd_export_bvh(args, cfg):
    from .bvh import export_bvh

    motion, _ = read_motion_file(args.motion)
    try:
        export_bvh(motion, args.out)
    except OSError as exc:
        raise IOFailure(f"cannot write {args.out}: {exc}") from exc
    return [Path(args.out)], [Path(args.motion)]


# ---------------------------------------------------------------------------
# parser


def _common(with_stage_flags: bool = True) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI config file ([run] and [paths] sections)")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--T", type=int)
    p.add_argument("--S", type=int)
    p.add_argument("--lambda-sr", dest="lambda_sr", type=float)
    p.add_argument("--lambda-s", dest="lambda_s", type=float)
    p.add_argument("--manifest", help="manifest path (default: <first output>.manifest.json)")
    p.add_argument("-v", "--verbose", action="store_true")
    if with_stage_flags:
        p.add_argument("--G", type=int)
        p.add_argument("--K", type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="msd", description="Few-shot motion style transfer with diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic text-motion dataset")
    p.add_argument("--out", help="JSONL file, or a directory to hold data.jsonl")
    p.add_argument("--spec", help="dataset spec JSON (fields of DatasetSpec); overrides --per-cell and --uniform")
    p.add_argument("--per-cell", dest="per_cell", type=int)
    p.add_argument("--uniform", action="store_true", help="equal share of every style")
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("pretrain", cmd_pretrain, "train the text-conditioned prior"),
                              ("pretrain-dis", cmd_pretrain_dis, "train the motion-semantic discriminator")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--steps", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("pairgen", parents=[common], help="generate the neutral counterpart of a style example")
    p.add_argument("--prior")
    p.add_argument("--style", required=True, help=STYLE_FILE_HELP)
    p.add_argument("--text", help="prompt of the style example")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pairgen)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune the prior on one style example")
    p.add_argument("--prior")
    p.add_argument("--dis")
    p.add_argument("--data")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--style", help=STYLE_FILE_HELP)
    src.add_argument("--pair", help="pair JSON written by pairgen")
    p.add_argument("--text", help="prompt of the style example")
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("transfer", parents=[common], help="transfer a content motion to the fine-tuned style")
    p.add_argument("--model")
    p.add_argument("--content", required=True, help=STYLE_FILE_HELP)
    p.add_argument("--text", help="prompt of the content motion")
    p.add_argument("--out", required=True)
    p.add_argument("--bvh")
    p.add_argument("--no-warp", action="store_true")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", parents=[common], help="metrics report for a fine-tuned model")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out", help="report prefix; writes <prefix>.json, .csv and _features.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[_common(with_stage_flags=False)], help="G and K ablation as CSV")
    p.add_argument("--prior")
    p.add_argument("--dis")
    p.add_argument("--data")
    p.add_argument("--G", dest="G_list", default="0,500,950", help="comma separated G values")
    p.add_argument("--K", dest="K_list", default="0,100,300", help="comma separated K values")
    p.add_argument("--steps", type=int, default=4, help="fine-tuning steps per K value")
    p.add_argument("--examples", type=int, default=1, help="style examples per style for the G rows")
    p.add_argument("--contents", type=int, default=8, help="content motions per K row")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-bvh", parents=[common], help="convert a motion JSON to BVH")
    p.add_argument("--motion", required=True, help=STYLE_FILE_HELP)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_bvh)
    return parser


OVERRIDE_KEYS = ("seed", "profile", "T", "S", "G", "K", "lambda_sr", "lambda_s", "per_cell")


def _apply_threads() -> None:
    raw = os.environ.get("MSD_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigInvalid(f"MSD_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigInvalid(f"MSD_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        _apply_threads()
        cfg = load_config(args.config, {k: getattr(args, k, None) for k in OVERRIDE_KEYS})
        outputs, inputs = args.func(args, cfg)
        manifest = {
            "command": args.command,
            "argv": list(argv) if argv is not None else sys.argv[1:],
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).exists()},
            "outputs": {str(p): _sha256(Path(p)) for p in outputs},
            "started_at": started,
            "wall_time_s": time.time() - started,
        }
        _write_text(args.manifest or f"{outputs[0]}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    except MSDError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
