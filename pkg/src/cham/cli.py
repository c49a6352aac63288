"""Command-line surface: gen-corpus | train | eval | inspect.

Exit codes: 0 success, 2 usage or config error, 3 numeric abort during
training, 4 I/O or file-format error. Every training run writes the
fully resolved config next to its outputs so reruns are reproducible
from the echo alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import config as C
from . import corpus as corpus_mod
from . import model as model_mod
from . import params as P
from . import rng
from . import trainer as trainer_mod
from .corpus import CorpusFormatError
from .tensor import ConfigError, NumericError
from .trainer import CheckpointFormatError

_ABLATION_FLAGS = (
    # (flag, help, [overrides])
    ("no-specaugment", "disable feature masking", ["augment.enabled=false"]),
    ("no-intermediate-loss", "zero the intermediate loss scale",
     ["heads.intermediate_loss_scale=0"]),
    ("no-long-skip", "disable the front-end skip into each block",
     ["blocks.long_skip=false"]),
    ("no-focal-loss", "train with plain cross-entropy (gamma 0)",
     ["heads.focal_gamma=0"]),
    ("no-share-transposed-conv", "give each head its own upsampling kernel",
     ["heads.share_transposed_conv=false"]),
    ("share-mlp", "share the intermediate heads' hidden projection",
     ["heads.share_mlp=true"]),
)


def _resolved_config(args) -> C.RunConfig:
    cfg = C.load_config(args.config)
    C.apply_overrides(cfg, args.set or [])
    for flag, _, overrides in _ABLATION_FLAGS:
        if getattr(args, flag.replace("-", "_"), False):
            C.apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def cmd_gen_corpus(args) -> int:
    cfg = _resolved_config(args)
    if os.path.exists(args.out) and not args.force:
        raise FileExistsError(f"{args.out} exists; pass --force to overwrite")
    corpus = corpus_mod.generate(cfg.corpus)
    corpus_mod.save_corpus(corpus, args.out)
    with open(args.out, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    print(f"wrote {args.out}: {len(corpus)} utterances, "
          f"{corpus.total_frames} frames, {cfg.corpus.num_labels} labels, "
          f"sha256 {digest[:16]}")
    return 0


def _load_corpora(cfg: C.RunConfig):
    train = corpus_mod.load_corpus(cfg.run.corpus_path)
    if cfg.run.dev_corpus_path:
        if cfg.run.dev_corpus_path == cfg.run.corpus_path:
            dev = train
        else:
            dev = corpus_mod.load_corpus(cfg.run.dev_corpus_path)
        return train, dev
    return corpus_mod.split_dev(train, cfg.run.dev_fraction, cfg.run.seed)


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    os.makedirs(cfg.run.out_dir, exist_ok=True)
    resolved = C.render_config(cfg)
    with open(os.path.join(cfg.run.out_dir, "config.resolved.ini"), "w") as f:
        f.write(resolved)

    train_corpus, dev_corpus = _load_corpora(cfg)
    store, model = model_mod.build_model(cfg.model_config(), cfg.run.seed)
    trainer = trainer_mod.Trainer(model, store, train_corpus, dev_corpus,
                                  cfg.optim, cfg.augment, cfg.run.seed)

    ckpt_path = os.path.join(cfg.run.out_dir, "checkpoint.bin")
    metrics_path = os.path.join(cfg.run.out_dir, "metrics.jsonl")
    mode = "w"
    if args.resume:
        saved_cfg, values, state = trainer_mod.load_checkpoint(ckpt_path)
        if saved_cfg != resolved:
            raise ConfigError(
                "checkpoint was trained with a different configuration; "
                "refusing to resume"
            )
        trainer_mod.restore_trainer(trainer, values, state)
        mode = "a"

    with open(metrics_path, mode) as metrics_fh:
        history = trainer.train(checkpoint_path=ckpt_path, metrics_fh=metrics_fh,
                                config_text=resolved)
    if history:
        last = history[-1]
        print(f"trained to epoch {last['epoch']}: train_ce {last['train_ce']:.4f}, "
              f"dev_ce {last['dev_ce']:.4f}, "
              f"frame_error_rate {last['frame_error_rate']:.4f}")
    else:
        print(f"nothing to train (epoch {trainer.state.epoch} of {cfg.optim.epochs})")
    return 0


def _model_from_checkpoint(path):
    config_text, values, state = trainer_mod.load_checkpoint(path)
    cfg = C.parse_config(config_text)
    store, model = model_mod.build_model(cfg.model_config(), cfg.run.seed)
    store.load_values(values)
    return cfg, store, model, state


def cmd_eval(args) -> int:
    cfg, _, model, _ = _model_from_checkpoint(args.checkpoint)
    corpus = corpus_mod.load_corpus(args.corpus)
    ce, fer = trainer_mod.evaluate_model(model, corpus, cfg.optim.frame_budget,
                                         rng.derive_key(cfg.run.seed, "eval-batches"))
    print(json.dumps({"ce": ce, "frame_error_rate": fer}))
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        config_text, _, _ = trainer_mod.load_checkpoint(args.checkpoint)
        cfg = C.parse_config(config_text)
    else:
        cfg = _resolved_config(args)
    census = model_mod.parameter_census(cfg.model_config())
    print("module           parameters")
    for module in sorted(census.per_module):
        print(f"{module:<16} {census.per_module[module]:>12,}")
    print(f"{'total unique':<16} {census.unique_total:>12,}")
    print(f"{'with re-use':<16} {census.with_reuse_total:>12,}")
    shared = [(n, s) for n, (s, _, u) in census.per_name.items() if u > 1]
    if shared:
        print("shared tensors:")
        for name, shape in sorted(shared):
            uses = census.per_name[name][2]
            print(f"  {name} {shape} x{uses}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cham",
        description="Conformer hybrid acoustic model sandbox on synthetic corpora",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_opts(p, require_config=True):
        p.add_argument("--config", required=require_config,
                       help="path to an INI run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus file")
    add_config_opts(p)
    p.add_argument("--out", required=True, help="output corpus path")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model from a config")
    add_config_opts(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the output directory")
    for flag, help_text, _ in _ABLATION_FLAGS:
        p.add_argument(f"--{flag}", action="store_true", help=help_text)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print the parameter census")
    p.add_argument("--checkpoint", help="read the model config from a checkpoint")
    add_config_opts(p, require_config=False)
    p.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "inspect" and not (args.checkpoint or args.config):
        parser.error("inspect needs --checkpoint or --config")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3
    except (OSError, CorpusFormatError, CheckpointFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
