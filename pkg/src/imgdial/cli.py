"""Command-line front end for the full experimental pipeline.

Subcommands mirror the workflow: generate the micro-world, pretrain and
freeze the text encoder, pretrain and freeze the image reconstructor and
image backbone, train the response generator, then generate, evaluate,
analyze gates, or sweep the image-grounded training size.  Every run writes
``run.json`` (and ``runs/<subcommand>.json``) echoing the resolved
configuration so it can be replayed exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, apply_preset, config_help_text, parse_config_file
from .data import generate_microworld, load_dataset, load_png, save_dataset
from .metrics import (MetricReport, bleu1, distinct_n, embedding_metrics,
                      gate_analysis, load_embedding_table, rouge_l, topic_metrics)
from .pipeline import (BACKBONE_FILE, DISCRIMINATORS_FILE, GENERATOR_FILE,
                       RECONSTRUCTOR_FILE, TEXT_ENCODER_FILE, apply_precision,
                       load_discriminators, load_module, load_split, load_vocab,
                       make_backbone, make_discriminators, make_generator,
                       make_reconstructor, make_text_encoder, save_discriminators,
                       save_module, seeded_rng)
from .reconstructor import pretrain_reconstructor
from .response import pretrain_backbone
from .tagging import TopicalLexicon
from .text_encoder import pretrain_text_encoder
from .training import (TrainingConfig, evaluate_perplexity, train)


class CliError(Exception):
    pass


def _resolve_config(args) -> RunConfig:
    config = apply_preset(RunConfig(), getattr(args, "preset", "desk"))
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        config = parse_config_file(path, base=config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "gate", None):
        config.gate = args.gate
    if getattr(args, "mc_samples", None) is not None:
        config.mc_samples = args.mc_samples
    return config


def _write_run_record(out_dir: Path, subcommand: str, config: RunConfig, args):
    record = {
        "subcommand": subcommand,
        "package_version": __version__,
        "seed": config.seed,
        "config": config.as_dict(),
        "inputs": {
            k: str(v)
            for k, v in vars(args).items()
            if k in ("data", "artifacts", "config", "embeddings", "split")
            and v is not None
        },
        "out": str(out_dir),
    }
    blob = json.dumps(record, sort_keys=True, indent=2) + "\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(blob, encoding="utf-8")
    runs = out_dir / "runs"
    runs.mkdir(exist_ok=True)
    (runs / f"{subcommand}.json").write_text(blob, encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {hint}: {path}")
    return path


def _load_stack(config: RunConfig, artifacts: Path, *, need_generator: bool):
    """Load the frozen components (and optionally the trained generator)."""
    vocab = load_vocab(artifacts)
    encoder = make_text_encoder(config, len(vocab), config.seed)
    load_module(encoder, _require(artifacts / TEXT_ENCODER_FILE, "text encoder"),
                expect_component="text_encoder")
    recon = make_reconstructor(config, config.seed)
    load_module(recon, _require(artifacts / RECONSTRUCTOR_FILE, "reconstructor"),
                expect_component="reconstructor")
    backbone = make_backbone(config, config.seed)
    load_module(backbone, _require(artifacts / BACKBONE_FILE, "image backbone"),
                expect_component="backbone")
    gen = make_generator(config, len(vocab), encoder, backbone, config.seed)
    if need_generator:
        load_module(gen, _require(artifacts / GENERATOR_FILE, "generator"),
                    expect_component="generator")
        gen.gate_enabled = config.gate == "on"
    return vocab, encoder, recon, backbone, gen


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(args)
    splits, manifest, _vocab = generate_microworld(
        seed=config.seed, n=args.n, image_side=config.image_side,
        out_dir=out, text_ratio=config.text_ratio,
    )
    _write_run_record(out, "gen-data", config, args)
    print(f"gen-data: wrote {sum(manifest['splits'].values())} records to {out}")
    return 0


def cmd_pretrain_text(args) -> int:
    config = _resolve_config(args)
    apply_precision(config)
    out = _out_dir(args)
    vocab = load_vocab(args.data)
    vocab.save(out / "vocab.txt")
    records = load_split(args.data, "text_train") + load_split(args.data, "image_train")
    encoder = make_text_encoder(config, len(vocab), config.seed)
    history = pretrain_text_encoder(
        encoder, records, config.epochs_text, vocab=vocab, lr=config.lr_text,
        batch_size=config.batch_size, seed=config.seed,
    )
    save_module(encoder, out / TEXT_ENCODER_FILE, component="text_encoder",
                config=config, extra_meta={"epochs": config.epochs_text})
    (out / "pretrain_text_log.csv").write_text(
        "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)),
        encoding="utf-8")
    _write_run_record(out, "pretrain-text", config, args)
    final = history[-1] if history else float("nan")
    print(f"pretrain-text: {config.epochs_text} epochs, final loss {final:.4f}")
    return 0


def cmd_pretrain_recon(args) -> int:
    config = _resolve_config(args)
    apply_precision(config)
    out = _out_dir(args)
    vocab = load_vocab(out)
    encoder = make_text_encoder(config, len(vocab), config.seed)
    load_module(encoder, _require(out / TEXT_ENCODER_FILE, "text encoder"),
                expect_component="text_encoder")
    if not encoder.frozen:
        raise CliError("text encoder checkpoint is not frozen; rerun pretrain-text")
    records = load_split(args.data, "image_train")

    recon = make_reconstructor(config, config.seed)
    discs = make_discriminators(config, recon, config.seed)
    history = pretrain_reconstructor(
        recon, discs, encoder, records, vocab, args.data,
        epochs=config.epochs_recon, lr=config.lr_reconstructor,
        batch_size=config.gan_batch_size, lambda_ca=config.lambda_ca,
        seed=config.seed, sample_dir=out / "samples",
        sample_every=config.sample_every,
    )
    save_module(recon, out / RECONSTRUCTOR_FILE, component="reconstructor",
                config=config, extra_meta={"epochs": config.epochs_recon})
    save_discriminators(discs, out / DISCRIMINATORS_FILE, config)
    with open(out / "pretrain_recon_log.csv", "w", encoding="utf-8") as f:
        f.write("step,epoch,d_loss,g_loss,g_total,ca_kl\n")
        for row in history:
            f.write(f"{row['step']},{row['epoch']},{row['d_loss']!r},"
                    f"{row['g_loss']!r},{row['g_total']!r},{row['ca_kl']!r}\n")

    backbone = make_backbone(config, config.seed)
    bb_history = pretrain_backbone(
        backbone, records, args.data, epochs=config.epochs_backbone,
        lr=config.lr_backbone, batch_size=config.batch_size, seed=config.seed,
    )
    save_module(backbone, out / BACKBONE_FILE, component="backbone",
                config=config, extra_meta={"epochs": config.epochs_backbone})
    _write_run_record(out, "pretrain-recon", config, args)
    print(f"pretrain-recon: {len(history)} GAN steps; backbone loss "
          f"{bb_history[-1]:.4f}" if bb_history else "pretrain-recon: done")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    apply_precision(config)
    out = _out_dir(args)
    artifacts = Path(args.artifacts) if args.artifacts else out
    vocab, encoder, recon, backbone, gen = _load_stack(
        config, artifacts, need_generator=False)
    gen.gate_enabled = config.gate == "on"

    d_i_train = load_split(args.data, "image_train")
    d_t_train = load_split(args.data, "text_train")
    d_i_valid = load_split(args.data, "image_valid")
    d_t_valid = load_split(args.data, "text_valid")
    if args.image_fraction is not None:
        keep = max(1, int(round(len(d_i_train) * args.image_fraction)))
        d_i_train = d_i_train[:keep]
    if args.text_only_ablation:
        d_t_train = []

    tconf = TrainingConfig(
        lr_generator=config.lr_generator, lr_reconstructor=config.lr_reconstructor,
        batch_size=config.batch_size, mix_cap=config.mix_cap,
        mc_samples=config.mc_samples, patience=config.patience,
        max_epochs=config.max_epochs, seed=config.seed,
        gate_enabled=config.gate == "on", grad_clip=config.grad_clip,
        adam_beta1=config.adam_beta1, adam_beta2=config.adam_beta2,
        adam_eps=config.adam_eps, latent_stage=config.latent_stage,
        val_max_examples=config.val_max_examples, preset=config.preset,
    )
    result = train(gen, recon, d_i_train, d_t_train, d_i_valid, d_t_valid,
                   vocab, args.data, tconf)
    save_module(gen, out / GENERATOR_FILE, component="generator", config=config,
                extra_meta={"best_epoch": result.best_epoch,
                            "best_ppl": result.best_ppl,
                            "gate": config.gate})
    with open(out / "training_log.csv", "w", encoding="utf-8") as f:
        f.write("step,split,loss,ppl\n")
        for row in result.log_rows:
            f.write(f"{row['step']},{row['split']},{row['loss']!r},{row['ppl']!r}\n")
    if artifacts != out:
        vocab.save(out / "vocab.txt")
    _write_run_record(out, "train", config, args)
    print(f"train: best val ppl {result.best_ppl:.4f} at epoch {result.best_epoch}"
          f" ({len(result.val_ppl_by_epoch)} epochs run)")
    return 0


def _latent_for_generation(recon, encoder, ctx_ids, seed, index, stage):
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 7373, index))))
    noise = g.standard_normal(recon.d_noise)
    pyr = recon.reconstruct(encoder, ctx_ids, noise=noise, mode="deterministic")
    return pyr.grid(stage)


def _generate_for_records(gen, recon, records, vocab, config, data_dir):
    """Greedy/beam responses with traces; latent images for text-only records."""
    data_dir = Path(data_dir)
    outputs = []
    for i, rec in enumerate(records):
        ctx_ids = vocab.encode(rec.flat_context())[: gen.encoder.max_len]
        if rec.image_ref is not None:
            image = load_png(data_dir / rec.image_ref)
        else:
            image = _latent_for_generation(recon, gen.encoder, ctx_ids,
                                           config.seed, i, config.latent_stage)
        tokens, trace = gen.generate_response(
            ctx_ids, image, bos_id=vocab.bos_id, eos_id=vocab.eos_id,
            strategy=config.decode_strategy, beam_width=config.beam_width,
            max_len=config.max_response_len,
        )
        outputs.append({
            "tokens": vocab.decode(tokens),
            "gates": [float(g) for g in trace.gates],
            "logprob": float(trace.total_log_prob),
        })
    return outputs


def cmd_generate(args) -> int:
    config = _resolve_config(args)
    apply_precision(config)
    out = _out_dir(args)
    artifacts = Path(args.artifacts)
    vocab, encoder, recon, backbone, gen = _load_stack(
        config, artifacts, need_generator=True)
    data_path = Path(args.data)
    records = load_dataset(_require(data_path, "dataset file"))
    outputs = _generate_for_records(gen, recon, records, vocab, config,
                                    data_path.parent)
    with open(out / "responses.jsonl", "w", encoding="utf-8") as f:
        for o in outputs:
            f.write(json.dumps({
                "response": " ".join(o["tokens"]),
                "gates": o["gates"],
                "logprob": o["logprob"],
            }, sort_keys=True) + "\n")
    _write_run_record(out, "generate", config, args)
    print(f"generate: wrote {len(outputs)} responses to {out / 'responses.jsonl'}")
    return 0


def _decoder_embedding_table(gen, vocab) -> dict[str, np.ndarray]:
    table = gen.embedding.table.data
    return {tok: table[i].astype(np.float64) for i, tok in enumerate(vocab.tokens)}


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    apply_precision(config)
    out = _out_dir(args)
    artifacts = Path(args.artifacts)
    vocab, encoder, recon, backbone, gen = _load_stack(
        config, artifacts, need_generator=True)
    split = f"{args.task}_{args.split}"
    records = load_split(args.data, split)

    ppl, _, n_tokens = evaluate_perplexity(
        gen, recon, records, vocab, args.data, seed=config.seed,
        batch_size=config.batch_size, latent_stage=config.latent_stage,
    )
    outputs = _generate_for_records(gen, recon, records, vocab, config, args.data)
    candidates = [o["tokens"] for o in outputs]
    references = [list(r.response) for r in records]
    contexts = [r.flat_context() for r in records]

    if args.embeddings:
        table = load_embedding_table(args.embeddings)
    else:
        table = _decoder_embedding_table(gen, vocab)
    emb_avg, emb_ext, emb_gre, emb_used, emb_skipped = embedding_metrics(
        candidates, references, table)
    lexicon = TopicalLexicon()
    topic, novel, topic_used, topic_excluded = topic_metrics(
        [(c, g) for c, g in zip(contexts, candidates) if g],
        lexicon)
    report = MetricReport(
        ppl=ppl,
        bleu1=bleu1(candidates, references),
        rouge_l=rouge_l(candidates, references, beta=config.rouge_beta),
        emb_average=emb_avg, emb_extrema=emb_ext, emb_greedy=emb_gre,
        dist1=distinct_n(candidates, 1), dist2=distinct_n(candidates, 2),
        topic=topic, novel_topic=novel,
        counts={
            "pairs": len(records), "tokens_scored": n_tokens,
            "emb_pairs_used": emb_used, "emb_pairs_skipped": emb_skipped,
            "topic_pairs_used": topic_used, "topic_pairs_excluded": topic_excluded,
        },
    )
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.pretty(), encoding="utf-8")
    _write_run_record(out, "eval", config, args)
    print(report.pretty())
    return 0


def cmd_analyze_gate(args) -> int:
    config = _resolve_config(args)
    apply_precision(config)
    out = _out_dir(args)
    artifacts = Path(args.artifacts)
    vocab, encoder, recon, backbone, gen = _load_stack(
        config, artifacts, need_generator=True)
    records = load_split(args.data, f"{args.task}_{args.split}")
    outputs = _generate_for_records(gen, recon, records, vocab, config, args.data)
    lexicon = TopicalLexicon()
    report = gate_analysis(
        [o["gates"] for o in outputs],
        [o["tokens"] for o in outputs],
        [r.flat_context() for r in records],
        lexicon,
    )
    (out / "gate_bins.csv").write_text(report.bins_csv(), encoding="utf-8")
    (out / "gate_word_kinds.csv").write_text(report.word_kinds_csv(), encoding="utf-8")
    _write_run_record(out, "analyze-gate", config, args)
    print(report.bins_csv())
    print(report.word_kinds_csv())
    return 0


def cmd_sweep_lowres(args) -> int:
    config = _resolve_config(args)
    apply_precision(config)
    out = _out_dir(args)
    artifacts = Path(args.artifacts)
    fractions = [float(x) for x in args.fractions.split(",") if x.strip()]
    if not fractions or any(not (0.0 < f <= 1.0) for f in fractions):
        raise CliError("fractions must lie in (0, 1]")

    d_i_train_full = load_split(args.data, "image_train")
    d_t_train = load_split(args.data, "text_train")
    d_i_valid = load_split(args.data, "image_valid")
    d_t_valid = load_split(args.data, "text_valid")
    d_t_test = load_split(args.data, "text_test")

    rows = []
    for fraction in fractions:
        keep = max(1, int(round(len(d_i_train_full) * fraction)))
        d_i_train = d_i_train_full[:keep]
        for variant, use_text in (("full", True), ("image_only", False)):
            vocab, encoder, recon, backbone, gen = _load_stack(
                config, artifacts, need_generator=False)
            gen.gate_enabled = config.gate == "on"
            tconf = TrainingConfig(
                lr_generator=config.lr_generator, batch_size=config.batch_size,
                mix_cap=config.mix_cap, mc_samples=config.mc_samples,
                patience=config.patience, max_epochs=config.max_epochs,
                seed=config.seed, gate_enabled=config.gate == "on",
                grad_clip=config.grad_clip, latent_stage=config.latent_stage,
                val_max_examples=config.val_max_examples, preset=config.preset,
            )
            train(gen, recon, d_i_train, d_t_train if use_text else [],
                  d_i_valid, d_t_valid if use_text else [], vocab, args.data, tconf)
            ppl, _, _ = evaluate_perplexity(
                gen, recon, d_t_test, vocab, args.data, seed=config.seed,
                batch_size=config.batch_size, latent_stage=config.latent_stage,
            )
            outputs = _generate_for_records(gen, recon, d_t_test, vocab, config,
                                            args.data)
            rl = rouge_l([o["tokens"] for o in outputs],
                         [list(r.response) for r in d_t_test],
                         beta=config.rouge_beta)
            rows.append((fraction, variant, ppl, rl))
    with open(out / "sweep.csv", "w", encoding="utf-8") as f:
        f.write("fraction,variant,ppl,rouge_l\n")
        for fraction, variant, ppl, rl in rows:
            f.write(f"{fraction!r},{variant},{ppl!r},{rl!r}\n")
    _write_run_record(out, "sweep-lowres", config, args)
    for fraction, variant, ppl, rl in rows:
        print(f"sweep: fraction={fraction} variant={variant} ppl={ppl:.3f} rouge_l={rl:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p, *, needs_out=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", default="desk", choices=("desk", "paper"),
                   help="named hyperparameter preset")
    p.add_argument("--seed", type=int, default=None, help="run seed")
    if needs_out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imgdial",
        description="latent-image grounded dialogue: data, training, evaluation",
        epilog=config_help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the micro-world corpora")
    _add_common(p)
    p.add_argument("--n", type=int, required=True, help="image-grounded training records")

    p = sub.add_parser("pretrain-text", help="pretrain and freeze the text encoder")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("pretrain-recon",
                       help="pretrain and freeze the image reconstructor and backbone")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("train", help="train the response generator")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--artifacts", help="directory with pretrained checkpoints "
                                       "(defaults to --out)")
    p.add_argument("--gate", choices=("on", "off"), help="gate ablation switch")
    p.add_argument("--mc-samples", type=int, dest="mc_samples",
                   help="latent samples per text-only example")
    p.add_argument("--image-fraction", type=float, dest="image_fraction",
                   help="train on this fraction of the image-grounded set")
    p.add_argument("--text-only-ablation", action="store_true",
                   dest="text_only_ablation",
                   help="drop the text corpus (image-grounded objective only)")

    p = sub.add_parser("generate", help="generate responses for a dataset file")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset .jsonl file")
    p.add_argument("--artifacts", required=True)

    p = sub.add_parser("eval", help="compute the metric report on a test split")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--task", default="text", choices=("text", "image"))
    p.add_argument("--split", default="test", choices=("valid", "test"))
    p.add_argument("--embeddings", help="embedding table file (token + floats per line)")

    p = sub.add_parser("analyze-gate", help="gate-value analyses on a test split")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--task", default="text", choices=("text", "image"))
    p.add_argument("--split", default="test", choices=("valid", "test"))

    p = sub.add_parser("sweep-lowres",
                       help="shrink the image-grounded training set and compare "
                            "the full model against the image-only ablation")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--fractions", default="1.0,0.5,0.25",
                   help="comma-separated fractions in (0, 1]")
    p.add_argument("--gate", choices=("on", "off"))
    p.add_argument("--mc-samples", type=int, dest="mc_samples")

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-text": cmd_pretrain_text,
    "pretrain-recon": cmd_pretrain_recon,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "analyze-gate": cmd_analyze_gate,
    "sweep-lowres": cmd_sweep_lowres,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
