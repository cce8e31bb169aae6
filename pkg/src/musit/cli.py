"""Command-line entry point: ``musit <subcommand> --out DIR [options]``.

Exit codes: 0 success, 1 validation/usage error (bad config, missing file),
2 runtime failure. Flags override keys from ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


log = logging.getLogger("musit")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its keys")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--path", choices=["mudit", "musit"], help="diffusion path")
    p.add_argument("--float-mode", choices=["f32", "f64"])


def build_parser() -> Parser:
    parser = Parser(prog="musit", description="Lyric- and description-conditioned song generation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("corpus", help="render the synthetic song corpus")
    _common(p)
    p.add_argument("--n", type=int, help="number of songs")

    for name, phase in (("train-vae", "vae"), ("train-encoder", "encoder"),
                        ("pretrain", "pretrain"), ("finetune", "finetune")):
        p = sub.add_parser(name, help=f"{phase} training phase (checkpoints go to --out)")
        _common(p)
        p.add_argument("--corpus", required=True, help="corpus directory (with manifest.jsonl)")
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.set_defaults(phase=phase)

    p = sub.add_parser("generate", help="generate one song")
    _common(p)
    p.add_argument("--checkpoints", required=True, help="directory with vae/encoder/diffusion checkpoints")
    p.add_argument("--description", required=True)
    p.add_argument("--lyrics", help="structured lyrics file; generated from the description when absent")
    p.add_argument("--prompt-audio", help="WAV whose latent fills the leading prompt rows")
    p.add_argument("--prompt-role", default="reference", help="vocal, drums, chords, bass or reference")
    p.add_argument("--duration", type=float, default=16.0)
    _sampler_flags(p)

    p = sub.add_parser("eval", help="generate from corpus descriptions and report metrics")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--n", type=int, help="number of generations")
    _sampler_flags(p)

    p = sub.add_parser("selfcheck", help="run the fast invariant suite")
    _common(p)
    return parser


def _sampler_flags(p):
    p.add_argument("--sampler", choices=["ddim", "ode_heun", "sde_euler"])
    p.add_argument("--sampler-steps", type=int)


def _overrides(args) -> dict:
    o = {"seed": args.seed, "path": args.path, "float_mode": args.float_mode}
    if args.command == "corpus":
        o["corpus_size"] = args.n
    if hasattr(args, "phase"):
        o.update({f"train.{args.phase}.steps": args.steps, f"train.{args.phase}.lr": args.lr,
                  f"train.{args.phase}.batch_size": args.batch_size})
    if hasattr(args, "sampler"):
        o.update({"sampler.kind": args.sampler, "sampler.steps": args.sampler_steps})
    if args.command == "eval":
        o["eval.n_generations"] = args.n
    return o


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_corpus(cfg, args, out: Path) -> None:
    from .corpus import make_corpus, write_corpus
    write_corpus(make_corpus(cfg.corpus_size, cfg.seed, cfg.corpus.build()), out)


def cmd_train(cfg, args, out: Path) -> None:
    from . import pipeline
    from .corpus import description_vocabulary
    from .plotting import plot_loss

    songs = pipeline.load_songs(args.corpus, cfg.mel_config())
    phase = {"vae": "vae", "encoder": "encoder", "pretrain": "diffusion_pretrain",
             "finetune": "diffusion_finetune"}[args.phase]
    tcfg = cfg.train_config(phase)
    if phase == "vae":
        _, rows = pipeline.train_vae(songs, cfg.vae_config(), cfg.mel_config(), tcfg, out)
    elif phase == "encoder":
        _, rows = pipeline.train_encoder(songs, cfg.encoder_config(description_vocabulary()), tcfg, out)
    elif phase == "diffusion_pretrain":
        _, rows = pipeline.pretrain(songs, out, cfg.backbone_config(), tcfg)
    else:
        _, rows = pipeline.finetune(songs, out, tcfg)
    if rows:
        plot_loss({args.phase: [r["loss"] for r in rows]}, out / f"{args.phase}_loss.png", f"{args.phase} loss")


def cmd_generate(cfg, args, out: Path) -> None:
    from . import audio, pipeline
    from .lyrics import parse_structured_lyrics

    models = pipeline.load_models(args.checkpoints)
    lyrics = None
    if args.lyrics:
        p = Path(args.lyrics)
        if not p.exists():
            raise FileNotFoundError(f"lyrics file not found: {p}")
        lyrics = parse_structured_lyrics(p.read_text(encoding="utf-8"))
    prompt = None
    if args.prompt_audio:
        p = Path(args.prompt_audio)
        if not p.exists():
            raise FileNotFoundError(f"prompt audio not found: {p}")
        prompt, rate = audio.read_wav(p)
        if rate != models.mel_cfg.rate:
            raise ValueError(f"prompt audio rate {rate} differs from {models.mel_cfg.rate}")
    req = pipeline.GenerationRequest(args.description, lyrics, prompt, args.prompt_role if prompt is not None else None,
                                     args.duration, cfg.seed, cfg.sampler_config())
    result = pipeline.generate(req, models, cfg.generate.build())
    pipeline.write_generation(result, out, models.mel_cfg.rate)


def cmd_eval(cfg, args, out: Path) -> None:
    from . import pipeline
    from .plotting import plot_alignment

    models = pipeline.load_models(args.checkpoints)
    songs = pipeline.load_songs(args.corpus, models.mel_cfg)
    metrics, rows = pipeline.evaluate(songs, models, cfg.eval.n_generations, cfg.seed, cfg.sampler_config(),
                                      cfg.generate.build())
    _write_json(out / "metrics.json", metrics)
    with open(out / "alignment.csv", "w") as fh:
        fh.write("k,song,shuffled_song,seed,matched,shuffled,structure\n")
        for r in rows:
            fh.write(f"{r['k']},{r['song']},{r['shuffled_song']},{r['seed']},"
                     f"{r['matched']:.6f},{r['shuffled']:.6f},{r['structure']:.6f}\n")
    plot_alignment([r["matched"] for r in rows], [r["shuffled"] for r in rows], out / "alignment.png",
                   metrics["sign_test"]["p_value"])


def cmd_selfcheck(cfg, args, out: Path) -> int:
    from .selfcheck import run
    report = run()
    _write_json(out / "selfcheck.json", report)
    for name, r in report["checks"].items():
        print(f"{'PASS' if r['pass'] else 'FAIL'} {name}")
    return 0 if report["pass"] else 2


COMMANDS = {"corpus": cmd_corpus, "train-vae": cmd_train, "train-encoder": cmd_train, "pretrain": cmd_train,
            "finetune": cmd_train, "generate": cmd_generate, "eval": cmd_eval, "selfcheck": cmd_selfcheck}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from .checkpoint import CheckpointError
    from .config import ConfigError, load_config

    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)

    threads = os.environ.get("MUSIT_THREADS")
    import torch
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"musit: MUSIT_THREADS must be an integer, got {threads!r}", file=sys.stderr)
            return 1

    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(cfg.dump())
        code = COMMANDS[args.command](cfg, args, out)
        return int(code or 0)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"musit {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"musit {args.command}: runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
