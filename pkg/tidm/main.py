import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from . import __version__
from .config import load_config, parse_overrides
from .data import load_split, make_dataset, parse_caption, read_checkpoint, read_ppm, save_checkpoint, save_dataset, write_ppm
from .diffusion import Denoiser, LatentCodec, Vocabulary, finetune_dreambooth, generate, make_linear_schedule, train_base, train_codec
from .diffusion.gradcheck_suite import TOLERANCE, run_gradcheck_suite
from .diffusion.schedule import NoiseSchedule
from .errors import CheckpointFormatError, InputError, TidmError, UsageError
from .evaluation import AnchorCase, EvalPrompt, Evaluator, ProbeClassifier, evaluate, train_probe_classifier
from .models.schemas import (
    AnchorMode,
    AppConfig,
    CodecConfig,
    DenoiserConfig,
    ProbeConfig,
    ScheduleConfig,
    TextConfig,
)
from .numerics import ParamStore, Rng
from .session import RunSession

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
ENV_LOG_LEVEL = "TIDM_LOG_LEVEL"

CODEC_CKPT = "codec.ckpt"
BASE_CKPT = "base.ckpt"
FINETUNED_CKPT = "finetuned.ckpt"
PROBE_CKPT = "probe.ckpt"
BASE_VOCAB = "vocab.txt"
FINETUNED_VOCAB = "vocab_finetuned.txt"
REFERENCE_IMAGES = 256


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


def configure_logging(level: Optional[str]) -> None:
    name = (level or os.getenv(ENV_LOG_LEVEL) or "INFO").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise UsageError(f"unknown log level {name!r}")
    logging.basicConfig(level=name, format=LOG_FORMAT)
    logging.getLogger().setLevel(name)
    # per-batch sampler messages drown out training summaries
    logging.getLogger("tidm.diffusion.sampler").setLevel(logging.WARNING)


# ------------------------------------------------------------------
# Checkpoint helpers
# ------------------------------------------------------------------


def _path(config: AppConfig, *parts: str) -> str:
    return os.path.join(config.out_dir, *parts)


def _schedule(config: ScheduleConfig) -> NoiseSchedule:
    return make_linear_schedule(config.timesteps, config.beta_start, config.beta_end)


def _require_meta(meta: Dict[str, Any], path: str, kind: str, *keys: str) -> None:
    missing = [key for key in keys if key not in meta]
    if missing:
        raise CheckpointFormatError(f"{path} is not a {kind} checkpoint (missing meta {', '.join(missing)})")


def _load_codec(path: str, session: RunSession) -> Tuple[LatentCodec, ParamStore]:
    params, meta = read_checkpoint(path)
    _require_meta(meta, path, "codec", "codec")
    session.record_checkpoint("codec", path, params.checksum())
    return LatentCodec(CodecConfig.model_validate(meta["codec"])), params


def _load_model(path: str, session: RunSession) -> Tuple[Denoiser, ParamStore, Vocabulary, NoiseSchedule]:
    params, meta = read_checkpoint(path)
    _require_meta(meta, path, "denoiser", "denoiser", "text", "schedule", "vocab")
    denoiser = Denoiser(DenoiserConfig.model_validate(meta["denoiser"]), TextConfig.model_validate(meta["text"]))
    vocab = Vocabulary.load(os.path.join(os.path.dirname(os.path.abspath(path)), meta["vocab"]))
    session.record_checkpoint("denoiser", path, params.checksum())
    return denoiser, params, vocab, _schedule(ScheduleConfig.model_validate(meta["schedule"]))


def _model_meta(config: AppConfig, denoiser: Denoiser, vocab_name: str) -> Dict[str, Any]:
    return {
        "denoiser": denoiser.config.model_dump(mode="json"),
        "text": denoiser.text.config.model_dump(mode="json"),
        "schedule": config.schedule.model_dump(mode="json"),
        "vocab": vocab_name,
    }


def _default_model_path(config: AppConfig) -> str:
    finetuned = _path(config, FINETUNED_CKPT)
    return finetuned if os.path.exists(finetuned) else _path(config, BASE_CKPT)


# ------------------------------------------------------------------
# Subcommands
# ------------------------------------------------------------------


def cmd_make_data(args: argparse.Namespace, config: AppConfig, session: RunSession) -> int:
    bundle = make_dataset(config.data, config.seed, config.dreambooth.placeholder)
    out = _path(config, "data")
    save_dataset(out, bundle)
    session.record_seed("data", config.seed)
    session.record_output(out)
    logger.info("Main: dataset written to %s", out)
    return 0


def cmd_train_codec(args: argparse.Namespace, config: AppConfig, session: RunSession) -> int:
    dataset = load_split(_path(config, "data", "train"))
    codec_config = config.codec
    if codec_config.image_size is None:
        codec_config = codec_config.model_copy(update={"image_size": config.data.image_size})
    result = train_codec(
        dataset.images,
        codec_config,
        config.codec_train,
        metrics_path=_path(config, "metrics", "codec.log"),
        progress=args.progress,
    )
    path = _path(config, CODEC_CKPT)
    meta = {
        "codec": codec_config.model_dump(mode="json"),
        "final_mse": result.final_mse,
        "baseline_mse": result.baseline_mse,
    }
    session.record_seed("codec_train", config.codec_train.seed)
    session.record_checkpoint("codec", path, save_checkpoint(path, result.params, meta))
    logger.info("Main: codec mse %.5f (avg-pool/nearest baseline %.5f)", result.final_mse, result.baseline_mse)
    return 0


def cmd_train_base(args: argparse.Namespace, config: AppConfig, session: RunSession) -> int:
    dataset = load_split(_path(config, "data", "train"))
    codec, codec_params = _load_codec(_path(config, CODEC_CKPT), session)
    denoiser = Denoiser(config.denoiser, config.text)
    vocab = Vocabulary.for_grammar(config.data.n_identities, config.data.n_backgrounds)
    os.makedirs(config.out_dir, exist_ok=True)
    vocab.save(_path(config, BASE_VOCAB))

    latents = codec.encode(codec_params, dataset.images)
    token_ids = vocab.tokenize_batch(dataset.captions, denoiser.text.seq_len)
    result = train_base(
        denoiser,
        latents,
        token_ids,
        vocab,
        _schedule(config.schedule),
        config.train,
        metrics_path=_path(config, "metrics", "base.log"),
        progress=args.progress,
    )
    path = _path(config, BASE_CKPT)
    session.record_seed("train", config.train.seed)
    session.record_checkpoint("denoiser", path, save_checkpoint(path, result.params, _model_meta(config, denoiser, BASE_VOCAB)))
    return 0


def cmd_finetune(args: argparse.Namespace, config: AppConfig, session: RunSession) -> int:
    instances = load_split(_path(config, "data", "instances"))
    codec, codec_params = _load_codec(_path(config, CODEC_CKPT), session)
    denoiser, params, vocab, schedule = _load_model(args.checkpoint or _path(config, BASE_CKPT), session)
    result = finetune_dreambooth(
        denoiser,
        params,
        codec,
        codec_params,
        vocab,
        schedule,
        instances.images,
        config.dreambooth,
        instance_captions=instances.captions,
        metrics_path=_path(config, "metrics", "finetune.log"),
        progress=args.progress,
    )
    result.vocab.save(_path(config, FINETUNED_VOCAB))
    path = _path(config, FINETUNED_CKPT)
    meta = _model_meta(config, denoiser, FINETUNED_VOCAB)
    meta["placeholder"] = config.dreambooth.placeholder
    session.record_seed("dreambooth", config.dreambooth.seed)
    session.record_checkpoint("finetuned", path, save_checkpoint(path, result.params, meta))
    return 0


def _sampler_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {
        "steps": args.steps,
        "guidance_scale": args.guidance,
        "strength": args.strength,
        "batch": args.batch,
        "anchor_mode": args.anchor_mode,
        "workers": args.workers,
    }
    return {f"sampler.{key}": value for key, value in flags.items() if value is not None}


def cmd_generate(args: argparse.Namespace, config: AppConfig, session: RunSession) -> int:
    sampler = config.sampler
    if args.anchor is None and sampler.resolved_strength(False) < 1.0:
        raise InputError(f"--strength {sampler.strength} needs an --anchor image")
    anchor = read_ppm(args.anchor) if args.anchor else None
    codec, codec_params = _load_codec(_path(config, CODEC_CKPT), session)
    denoiser, params, vocab, schedule = _load_model(args.checkpoint or _default_model_path(config), session)
    images = generate(
        codec, codec_params, denoiser, params, vocab, schedule, args.prompt, anchor, sampler, progress=args.progress
    )

    out = args.samples_dir or _path(config, "samples")
    strength = sampler.resolved_strength(anchor is not None)
    lines = []
    for i, image in enumerate(images):
        name = f"sample_{i:02d}.ppm"
        write_ppm(os.path.join(out, name), image)
        record = {
            "anchor": args.anchor,
            "guidance": sampler.guidance_scale,
            "index": i,
            "prompt": args.prompt,
            "seed": sampler.seed,
            "steps": sampler.steps,
            "strength": strength,
        }
        lines.append(f"{name} {json.dumps(record, sort_keys=True)}")
        session.record_output(os.path.join(out, name))
    with open(os.path.join(out, "generate.manifest"), "w", encoding="utf-8") as handle:
        handle.write("".join(line + "\n" for line in lines))
    session.record_seed("sampler", sampler.seed)
    logger.info("Main: wrote %d images to %s", len(lines), out)
    return 0


def _probe(config: AppConfig, session: RunSession, progress: bool) -> Tuple[ProbeClassifier, ParamStore]:
    path = _path(config, PROBE_CKPT)
    data = config.data
    if os.path.exists(path):
        params, meta = read_checkpoint(path)
        _require_meta(meta, path, "probe", "probe", "n_identities", "n_backgrounds", "image_size")
        probe = ProbeClassifier(
            ProbeConfig.model_validate(meta["probe"]), meta["n_identities"], meta["n_backgrounds"], meta["image_size"]
        )
        session.record_checkpoint("probe", path, params.checksum())
        return probe, params
    probe, result = train_probe_classifier(
        load_split(_path(config, "data", "probe")), config.probe, data.n_identities, data.n_backgrounds, progress
    )
    meta = {
        "probe": config.probe.model_dump(mode="json"),
        "n_identities": data.n_identities,
        "n_backgrounds": data.n_backgrounds,
        "image_size": data.image_size,
        "holdout_accuracy": result.holdout_accuracy,
    }
    session.record_seed("probe", config.probe.seed)
    session.record_checkpoint("probe", path, save_checkpoint(path, result.params, meta))
    return probe, result.params


def _eval_prompts(config: AppConfig, vocab: Vocabulary) -> Tuple[List[EvalPrompt], List[EvalPrompt]]:
    """Placeholder prompts (held-out identity on the left) and class prompts over seen identities."""
    data = config.data
    held_out = data.held_out
    seen = [i for i in range(data.n_identities) if i != held_out]
    rng = Rng(config.eval.seed).fork("eval/prompts")
    placeholder = config.dreambooth.placeholder
    identity_prompts: List[EvalPrompt] = []
    class_prompts: List[EvalPrompt] = []
    for _ in range(config.eval.n_prompts):
        draws = rng.integers(1 << 30, 3)
        a = seen[draws[0] % len(seen)]
        b = [i for i in seen if i != a][draws[1] % (len(seen) - 1)]
        bg = int(draws[2] % data.n_backgrounds)
        class_prompts.append(EvalPrompt(f"ident{a} meets ident{b} in bg{bg}", a, b))
        if placeholder in vocab:
            prompt = f"{placeholder} meets ident{b} in bg{bg}"
            left, right, _ = parse_caption(prompt, {placeholder: held_out})
            identity_prompts.append(EvalPrompt(prompt, left, right))
    if not identity_prompts:
        return class_prompts, []
    return identity_prompts, class_prompts


def cmd_eval(args: argparse.Namespace, config: AppConfig, session: RunSession) -> int:
    codec, codec_params = _load_codec(_path(config, CODEC_CKPT), session)
    denoiser, params, vocab, schedule = _load_model(args.checkpoint or _default_model_path(config), session)
    probe, probe_params = _probe(config, session, args.progress)
    probe_split = load_split(_path(config, "data", "probe"))

    prompts, class_prompts = _eval_prompts(config, vocab)
    n_anchors = min(config.eval.n_prompts, len(probe_split))
    anchors = [
        AnchorCase(probe_split.captions[i], probe_split.images[i], probe_split.masks[i]) for i in range(n_anchors)
    ]
    evaluator = Evaluator(codec, codec_params, denoiser, params, vocab, schedule, probe, probe_params, config.sampler)
    report = evaluate(
        evaluator, prompts, class_prompts, anchors, probe_split.images[:REFERENCE_IMAGES], config.eval
    )
    path = _path(config, "eval_report.json")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(report.model_dump_json(indent=2) + "\n")
    session.record_seed("eval", config.eval.seed)
    session.record_output(path)
    return 0


def cmd_gradcheck(args: argparse.Namespace, config: AppConfig, session: RunSession) -> int:
    results = run_gradcheck_suite(seed=config.seed)
    failed = 0
    for name, result in results.items():
        ok = result.passed(TOLERANCE)
        failed += not ok
        print(f"{name:<28s} {result.max_rel_error:.3e} {'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} checks within {TOLERANCE:g}")
    return 0 if failed == 0 else 3


COMMANDS: Dict[str, Callable[[argparse.Namespace, AppConfig, RunSession], int]] = {
    "make-data": cmd_make_data,
    "train-codec": cmd_train_codec,
    "train-base": cmd_train_base,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: $TIDM_CONFIG)")
    common.add_argument("--seed", type=int, help="global seed; section seeds follow it unless set")
    common.add_argument("--out-dir", help="run directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--log-level", help=f"logging level (default: ${ENV_LOG_LEVEL} or INFO)")
    common.add_argument("--progress", action="store_true", help="show progress bars")

    parser = _ArgumentParser(prog="tidm", description="Text and anchor-image guided latent diffusion.")
    parser.add_argument("--version", action="version", version=f"tidm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)
    sub.required = True
    sub.add_parser("make-data", parents=[common], help="render the procedural scene corpus")
    sub.add_parser("train-codec", parents=[common], help="train the latent autoencoder")
    sub.add_parser("train-base", parents=[common], help="train the conditional denoiser")
    for name, text in (("finetune", "bind the placeholder to the instance renders"), ("eval", "score a model")):
        cmd = sub.add_parser(name, parents=[common], help=text)
        cmd.add_argument("--checkpoint", help="denoiser checkpoint")

    gen = sub.add_parser("generate", parents=[common], help="sample images for a prompt")
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--anchor", help="anchor image (PPM)")
    gen.add_argument("--steps", type=int, help="DDIM steps (default 50)")
    gen.add_argument("--guidance", type=float, help="guidance scale (default 7.5)")
    gen.add_argument("--strength", type=float, help="noise strength for the anchor (default 0.75)")
    gen.add_argument("--batch", type=int, help="images per prompt (default 4)")
    gen.add_argument("--anchor-mode", choices=[mode.value for mode in AnchorMode])
    gen.add_argument("--workers", type=int)
    gen.add_argument("--checkpoint", help="denoiser checkpoint (default: fine-tuned, else base)")
    gen.add_argument("--samples-dir", help="output directory (default: <out-dir>/samples)")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = dict(parse_overrides(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
        if args.command == "generate":
            overrides["sampler.seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.command == "generate":
        overrides.update(_sampler_overrides(args))
    return overrides


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        config = load_config(args.config, _overrides(args))
        session = RunSession(args.command, config)
        code = COMMANDS[args.command](args, config, session)
        session.write()
        return code
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        logger.error("Main: invalid value: %s", exc)
        return InputError.exit_code
    except TidmError as exc:
        logger.error("Main: %s [%s]", exc, exc.code)
        return exc.exit_code
    except (OSError, ValueError, KeyError) as exc:
        logger.exception("Main: runtime failure: %s", exc)
        return TidmError.exit_code


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
