"""Command-line entry point: ``e2eslu <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch
import yaml

from ..am_ctc import AMTrainConfig, EncoderConfig, adapt_am, pretrain_am, train_ngram_lm
from ..am_ctc.decode import decode, write_hypotheses
from ..am_ctc.units import UnitVocabulary
from ..checkpoint import load_checkpoint, read_archive, save_checkpoint
from ..corpus import DatasetManifest, load_manifest, save_manifest, subset
from ..frontend import FeatureStore, PerturbationPolicy, perturb
from ..joint import JointTrainConfig, joint_train
from ..s2i import MultiTaskConfig, predict_manifest, train_s2i, write_predictions
from ..t2i.model import TextEncoderConfig
from ..t2i.train import IntentFinetuneConfig, MLMConfig, build_text_encoder, classify_texts, intent_finetune, mlm_finetune
from ..training import TrainConfig
from ..ttsaug import ExternalCommandBackend, PreSynthesizedDirBackend, StubBackend, synthesize
from .config import load_configs
from .desk import DeskSpec, desk_matrix, prepare_desk_corpus
from .metrics import intent_accuracy, wer
from .pipeline import run_matrix
from .report import MetricsReport, emit_report

logger = logging.getLogger("e2eslu")


def _manifest(path: str, fraction: float = 1.0, seed: int = 0) -> DatasetManifest:
    m = load_manifest(path)
    return subset(m, fraction, seed) if fraction < 1.0 else m


def _add_train_args(p: argparse.ArgumentParser, epochs: int, lr: float, batch_size: int = 16) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch-size", type=int, default=batch_size)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--seed", type=int, default=0)


def _train_kwargs(args) -> dict:
    return dict(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, optimizer=args.optimizer, seed=args.seed)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", required=True, help="training manifest (JSON lines)")
    p.add_argument("--fraction", type=float, default=1.0, help="class-covering subset fraction")
    p.add_argument("--data-seed", type=int, default=0)


def cmd_prepare(args) -> int:
    spec = DeskSpec(n_train=args.n_train, n_test=args.n_test, n_asr=args.n_asr, seed=args.seed)
    paths = prepare_desk_corpus(args.out, spec)
    for split, path in paths.items():
        print(f"{split}\t{path}")
    if not args.no_matrix:
        matrix = Path(args.out) / "matrix.yaml"
        matrix.write_text(yaml.safe_dump(desk_matrix(tuple(args.seeds)), sort_keys=False))
        print(f"matrix\t{matrix}")
    return 0


def cmd_pretrain_am(args) -> int:
    units = UnitVocabulary.graphemes() if args.units == "grapheme" else UnitVocabulary.phones()
    enc = EncoderConfig(layers=args.layers, hidden_per_direction=args.hidden, dropout=args.dropout,
                        subsample=args.subsample)
    cfg = AMTrainConfig(**_train_kwargs(args), encoder=enc)
    heldout = load_manifest(args.heldout) if args.heldout else None
    model = pretrain_am(_manifest(args.train, args.fraction, args.data_seed), units, cfg, heldout,
                        checkpoint_path=args.out)
    print(json.dumps({"checkpoint": args.out, "skipped": model.skipped, "history": model.history}))
    return 0


def cmd_adapt_am(args) -> int:
    base, _ = load_checkpoint(args.base, "acoustic_encoder")
    data = _manifest(args.train, args.fraction, args.data_seed)
    if args.perturb_dir:
        data = perturb(data, PerturbationPolicy(), args.perturb_dir)
    heldout = load_manifest(args.heldout) if args.heldout else None
    model = adapt_am(base, data, TrainConfig(**_train_kwargs(args)), heldout)
    save_checkpoint(args.out, "acoustic_encoder", model, {"history": model.history})
    print(json.dumps({"checkpoint": args.out, "records": len(data), "history": model.history}))
    return 0


def cmd_train_s2i(args) -> int:
    encoder, _ = load_checkpoint(args.encoder)
    data = _manifest(args.train, args.fraction, args.data_seed)
    cfg = MultiTaskConfig(**_train_kwargs(args), ctc_weight=args.ctc_weight, intent_weight=args.intent_weight)
    heldout = load_manifest(args.heldout) if args.heldout else None
    vocab = load_manifest(args.intents_from).intent_vocab if args.intents_from else None
    model = train_s2i(encoder, data, cfg, heldout, args.embed_dim, vocab, checkpoint_dir=args.checkpoint_dir)
    save_checkpoint(args.out, "s2i", model, {"train": cfg.to_dict(), "history": model.history})
    print(json.dumps({"checkpoint": args.out, "history": model.history}))
    return 0


def cmd_train_t2i(args) -> int:
    data = _manifest(args.train, args.fraction, args.data_seed)
    text = load_manifest(args.mlm_text) if args.mlm_text else data
    enc_cfg = TextEncoderConfig(width=args.width, layers=args.layers, heads=args.heads, vocab_size=args.vocab_size)
    encoder = build_text_encoder([r.transcript for r in text], enc_cfg, args.seed)
    encoder = mlm_finetune(encoder, text, MLMConfig(epochs=args.mlm_epochs, lr=args.mlm_lr, seed=args.seed))
    vocab = load_manifest(args.intents_from).intent_vocab if args.intents_from else None
    model = intent_finetune(encoder, data, IntentFinetuneConfig(**_train_kwargs(args)), vocab)
    save_checkpoint(args.out, "t2i", model, {"mlm": encoder.history, "intent": model.history})
    print(json.dumps({"checkpoint": args.out, "mlm": encoder.history, "intent": model.history}))
    return 0


def cmd_joint_train(args) -> int:
    s2i, _ = load_checkpoint(args.s2i, "s2i")
    t2i, _ = load_checkpoint(args.t2i, "t2i")
    cfg = JointTrainConfig(alpha=args.alpha, mse_weight=args.mse_weight, retain_ctc=not args.no_ctc,
                           ctc_weight=args.ctc_weight, epochs=args.epochs, batch_size=args.batch_size,
                           lr_speech=args.lr_speech, lr_text=args.lr_text, seed=args.seed)
    data = _manifest(args.train, args.fraction, args.data_seed)
    heldout = load_manifest(args.heldout) if args.heldout else None
    result = joint_train(data, s2i, t2i, cfg, heldout, log_path=args.log)
    save_checkpoint(args.out, "s2i", result.model, {"joint": asdict(cfg), "history": result.history})
    if args.text_out:
        save_checkpoint(args.text_out, "t2i", result.text_branch, {"joint": asdict(cfg)})
    print(json.dumps({"checkpoint": args.out, "skipped": result.skipped, "history": result.history}))
    return 0


def cmd_synth(args) -> int:
    speakers = args.speakers or [f"tts{i:02d}" for i in range(10)]
    if args.backend == "stub":
        backend = StubBackend(speakers)
    elif args.backend == "external_command":
        if not args.command:
            raise SystemExit("--command is required for the external_command backend")
        backend = ExternalCommandBackend(args.command.split(), speakers)
    else:
        if not args.directory:
            raise SystemExit("--directory is required for the pre_synthesized_dir backend")
        backend = PreSynthesizedDirBackend(args.directory)
    text = _manifest(args.text, args.fraction, args.data_seed)
    syn = synthesize(text, backend, args.seed, Path(args.out_dir) / "wav", args.id_prefix)
    path = save_manifest(syn, Path(args.out_dir) / "manifest.jsonl")
    print(json.dumps({"manifest": str(path), "records": len(syn), "dropped": len(text) - len(syn)}))
    return 0


def cmd_eval(args) -> int:
    test = load_manifest(args.test)
    kind = read_archive(args.model)["kind"]
    store = FeatureStore()
    out: dict = {"model": args.model, "kind": kind, "records": len(test)}
    if kind == "s2i":
        model, _ = load_checkpoint(args.model, "s2i")
        rows = predict_manifest(model, test, store)
        out["intent_accuracy"] = intent_accuracy(test, {i: p for i, p, _ in rows}, model.intent_vocab)
        if args.predictions:
            write_predictions(args.predictions, rows)
    elif kind == "acoustic_encoder":
        encoder, _ = load_checkpoint(args.model, "acoustic_encoder")
        lm = train_ngram_lm(load_manifest(args.lm_text), args.lm_order) if args.lm_text else None
        hyps = [decode(encoder, store.get(r), args.mode, lm, args.beam, args.lm_weight) for r in test]
        out["wer"] = wer([r.words for r in test], hyps, test.ids, test.ids)
        if args.hypotheses:
            write_hypotheses(args.hypotheses, zip(test.ids, hyps))
        if args.t2i:
            t2i, _ = load_checkpoint(args.t2i, "t2i")
            preds = classify_texts(t2i, [" ".join(h) for h in hyps])
            out["intent_accuracy"] = intent_accuracy(test, dict(zip(test.ids, preds)), t2i.intent_vocab)
            if args.predictions:
                write_predictions(args.predictions, [(i, p, 1.0) for i, p in zip(test.ids, preds)])
    elif kind == "t2i":
        t2i, _ = load_checkpoint(args.model, "t2i")
        preds = classify_texts(t2i, [r.transcript for r in test])
        out["intent_accuracy"] = intent_accuracy(test, dict(zip(test.ids, preds)), t2i.intent_vocab)
    else:
        raise SystemExit(f"cannot evaluate a {kind!r} checkpoint")
    print(json.dumps(out))
    return 0


def cmd_matrix(args) -> int:
    configs = []
    for path in args.configs:
        configs.extend(load_configs(path))
    if args.only:
        configs = [c for c in configs if any(c.name.startswith(p) for p in args.only)]
    if not configs:
        raise SystemExit("no experiments selected")
    rows = run_matrix(configs, args.cache_dir, args.jobs, use_cache=not args.no_cache)
    report = MetricsReport(rows)
    text, payload = emit_report(report)
    print(text)
    if args.out:
        report.save(args.out)
    if args.json:
        Path(args.json).write_text(json.dumps(payload, indent=1, sort_keys=True))
    for r in rows:
        if not r.ok:
            print(f"FAILED {r.name} at stage {r.failed_stage}: {r.error}", file=sys.stderr)
    return 0 if all(r.ok for r in rows) else 1


def cmd_report(args) -> int:
    text, payload = emit_report(MetricsReport.load(args.results))
    print(text)
    if args.json:
        Path(args.json).write_text(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e2eslu", description="Speech-to-intent experiments with text augmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate the desk corpus and its experiment matrix")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=DeskSpec.n_train)
    p.add_argument("--n-test", type=int, default=DeskSpec.n_test)
    p.add_argument("--n-asr", type=int, default=DeskSpec.n_asr)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3], help="seeds for the matrix rows")
    p.add_argument("--no-matrix", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain-am", help="CTC pretraining of the acoustic encoder")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--units", choices=("grapheme", "phone"), default="grapheme")
    p.add_argument("--layers", type=int, default=EncoderConfig.layers)
    p.add_argument("--hidden", type=int, default=EncoderConfig.hidden_per_direction)
    p.add_argument("--dropout", type=float, default=EncoderConfig.dropout)
    p.add_argument("--subsample", type=int, default=1)
    p.add_argument("--heldout")
    _add_train_args(p, 10, 3e-4)
    p.set_defaults(func=cmd_pretrain_am)

    p = sub.add_parser("adapt-am", help="continue CTC training on in-domain speech")
    _add_data_args(p)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heldout")
    p.add_argument("--perturb-dir", help="apply speed/tempo perturbation, writing audio here")
    _add_train_args(p, 3, 3e-4)
    p.set_defaults(func=cmd_adapt_am)

    p = sub.add_parser("train-s2i", help="multi-task CTC + intent fine-tuning")
    _add_data_args(p)
    p.add_argument("--encoder", required=True, help="acoustic encoder or S2I checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--ctc-weight", type=float, default=1.0)
    p.add_argument("--intent-weight", type=float, default=1.0)
    p.add_argument("--heldout")
    p.add_argument("--intents-from", help="manifest whose intent set defines the classifier")
    p.add_argument("--checkpoint-dir")
    _add_train_args(p, 10, 3e-4)
    p.set_defaults(func=cmd_train_s2i)

    p = sub.add_parser("train-t2i", help="masked-LM then intent fine-tuning of a text encoder")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mlm-text", help="manifest for masked-LM training (default: --train)")
    p.add_argument("--width", type=int, default=TextEncoderConfig.width)
    p.add_argument("--layers", type=int, default=TextEncoderConfig.layers)
    p.add_argument("--heads", type=int, default=TextEncoderConfig.heads)
    p.add_argument("--vocab-size", type=int, default=TextEncoderConfig.vocab_size)
    p.add_argument("--mlm-epochs", type=int, default=MLMConfig.epochs)
    p.add_argument("--mlm-lr", type=float, default=MLMConfig.lr)
    p.add_argument("--intents-from")
    _add_train_args(p, IntentFinetuneConfig.epochs, IntentFinetuneConfig.lr, 32)
    p.set_defaults(func=cmd_train_t2i)

    p = sub.add_parser("joint-train", help="tie acoustic to text embeddings with a shared classifier")
    _add_data_args(p)
    p.add_argument("--s2i", required=True)
    p.add_argument("--t2i", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--text-out", help="also save the text branch (training use only)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--mse-weight", type=float, default=1.0)
    p.add_argument("--ctc-weight", type=float, default=1.0)
    p.add_argument("--no-ctc", action="store_true")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr-speech", type=float, default=3e-4)
    p.add_argument("--lr-text", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heldout")
    p.add_argument("--log", help="per-step loss breakdown (JSON lines)")
    p.set_defaults(func=cmd_joint_train)

    p = sub.add_parser("synth", help="render text records to synthetic speech")
    p.add_argument("--text", required=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--backend", choices=("stub", "external_command", "pre_synthesized_dir"), default="stub")
    p.add_argument("--speakers", nargs="+")
    p.add_argument("--command", help="external TTS command; called as CMD <requests.tsv> <out_dir>")
    p.add_argument("--directory", help="directory of <id>.wav files")
    p.add_argument("--id-prefix", default="tts-")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a checkpoint on a test manifest")
    p.add_argument("--model", required=True, help="s2i, t2i or acoustic encoder checkpoint")
    p.add_argument("--test", required=True)
    p.add_argument("--t2i", help="with an acoustic encoder: classify its hypotheses (cascade)")
    p.add_argument("--mode", choices=("greedy", "prefix_beam"), default="greedy")
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--lm-text", help="manifest for a character n-gram LM")
    p.add_argument("--lm-order", type=int, default=3)
    p.add_argument("--lm-weight", type=float, default=0.0)
    p.add_argument("--predictions")
    p.add_argument("--hypotheses")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run experiment configs; exit 0 iff every row succeeds")
    p.add_argument("configs", nargs="+")
    p.add_argument("--cache-dir", help="default: $E2ESLU_CACHE_DIR or ~/.cache/e2eslu")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--only", nargs="+", help="run experiments whose name starts with one of these")
    p.add_argument("--no-cache", action="store_true", help="recompute rows even if cached")
    p.add_argument("--out", help="results file for the report subcommand")
    p.add_argument("--json", help="write the machine-readable tables here")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="format a results file")
    p.add_argument("results")
    p.add_argument("--json")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(args.threads)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
