"""Command-line entry point: gen, train, decode, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 numeric/verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from functools import partial

import numpy as np

from .config import RunConfig, apply_overrides, load_config, save_config
from .core import (
    NumericError,
    UsageError,
    decode_labels,
    derive_seed,
    encode_transcript,
    load_vocab,
    save_vocab,
)
from .data import CorpusSpec, build_vocab, default_spec, gen_corpus, load_corpus, save_corpus, split_corpus
from .decode import DecodeConfig, ExternalLMs, alsd_decode
from .discount import DiscountConfig
from .evaluate import evaluate_corpus, format_report, rare_table
from .lm import load_lm
from .loss import LossConfig, combined_loss_and_grads
from .model import ModelDims, init_params, load_params
from .training import LOG_HEADER, append_log, encode_corpus, resume_state, train_epochs

GRADCHECK_DIMS = ModelDims(d_in=4, d_enc=6, d_pred=6, d_joint=6, v=6, d_emb=4)
GRADCHECK_TOL = 1e-4
GRADCHECK_PARAM_CAP = 5000


def _parse_words(raw: str) -> tuple[str, ...]:
    return tuple(w.strip() for w in raw.split(",") if w.strip())


def _parse_domains(raw: str) -> dict[str, tuple[str, ...]]:
    out = {}
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise UsageError(f"domain entry {part!r} must look like name:word|word")
        name, words = part.split(":", 1)
        out[name.strip()] = tuple(w.strip() for w in words.split("|") if w.strip())
    return out


def data_spec(cfg: RunConfig) -> CorpusSpec:
    """CorpusSpec from the [data] section, falling back to the shipped inventory."""
    base = default_spec()
    d = cfg.data
    return CorpusSpec(
        chars=d.chars or base.chars,
        common_words=_parse_words(d.common_words) or base.common_words,
        rare_words=_parse_words(d.rare_words) or base.rare_words,
        utterances=d.utterances,
        words_per_utt=(d.words_per_utt_min, d.words_per_utt_max),
        zipf_s=d.zipf_s,
        frames_per_char=d.frames_per_char,
        noise_sigma=d.noise_sigma,
        seed=derive_seed(cfg.global_.seed, "data"),
        rare_prob=d.rare_prob,
        d_feat=d.d_feat,
        domain_tags=_parse_domains(d.domains) or base.domain_tags,
    )


def decode_config(cfg: RunConfig, strategy: str | None = None) -> DecodeConfig:
    strat = strategy or cfg.decode.strategy
    d = cfg.decode
    discount = None
    if strat in ("adaptlmd", "static_discount"):
        if d.lam is None:
            raise UsageError(f"strategy {strat!r} requires decode.lambda to be set")
        if strat == "adaptlmd" and d.rho is None:
            raise UsageError("strategy 'adaptlmd' requires decode.rho to be set")
        discount = DiscountConfig(
            lam=d.lam,
            rho=d.rho if d.rho is not None else 0.0,
            p_roll_init=d.p_roll_init,
            static_mode=(strat == "static_discount") or d.static_mode,
            ema=d.ema,
        )
    return DecodeConfig(
        strategy=strat,
        beam_width=d.beam_width,
        max_symbols=d.max_symbols if d.max_symbols > 0 else None,
        nbest=d.nbest,
        discount=discount,
        fusion_mu=d.fusion_mu,
        fusion_nu=d.fusion_nu,
        trace=cfg.global_.trace,
    )


def model_dims(cfg: RunConfig, v: int) -> ModelDims:
    m = cfg.model
    return ModelDims(
        d_in=m.d_in, d_enc=m.d_enc, d_pred=m.d_pred, d_joint=m.d_joint, v=v, d_emb=m.d_emb
    )


def _require_dir(path: str) -> None:
    if not os.path.isdir(path):
        raise UsageError(f"output directory {path!r} does not exist")


def cmd_gen(cfg: RunConfig, out_dir: str) -> int:
    _require_dir(out_dir)
    spec = data_spec(cfg)
    vocab = build_vocab(spec)
    utts = gen_corpus(spec)
    holdout = cfg.data.holdout_domain or None
    fractions = (cfg.data.split_train, cfg.data.split_dev, cfg.data.split_test)
    train, dev, test = split_corpus(
        utts,
        fractions,
        seed=derive_seed(cfg.global_.seed, "split"),
        by_domain=holdout,
        domain_tags=spec.domain_tags,
    )
    save_vocab(vocab, os.path.join(out_dir, os.path.basename(cfg.data.vocab)))
    save_corpus(train, os.path.join(out_dir, os.path.basename(cfg.data.train)))
    save_corpus(dev, os.path.join(out_dir, os.path.basename(cfg.data.dev)))
    save_corpus(test, os.path.join(out_dir, os.path.basename(cfg.data.test)))
    save_config(cfg, os.path.join(out_dir, "effective_config.ini"))
    print(f"gen: wrote {len(train)}/{len(dev)}/{len(test)} train/dev/test utterances to {out_dir}")
    return 0


def cmd_train(cfg: RunConfig, corpus_path: str, out_dir: str, resume: bool = False) -> int:
    _require_dir(out_dir)
    vocab = load_vocab(cfg.data.vocab)
    utts = load_corpus(corpus_path)
    items = encode_corpus(utts, vocab)
    dims = model_dims(cfg, vocab.size)
    init_seed = derive_seed(cfg.global_.seed, "init")
    start_epoch = 0
    params = init_params(dims, init_seed)
    if resume:
        state = resume_state(out_dir)
        if state is not None:
            params, start_epoch = state
            if params.dims != dims:
                raise UsageError("checkpoint dims do not match the configuration")
    log_path = os.path.join(out_dir, "train_log.tsv")
    write_header = start_epoch == 0 or not os.path.exists(log_path)
    params, history = train_epochs(
        params,
        items,
        alpha=cfg.loss.alpha,
        beta=cfg.loss.beta,
        eta=cfg.loss.eta,
        lr=cfg.loss.lr,
        epochs=cfg.loss.epochs,
        batch_size=cfg.loss.batch_size,
        clip_norm=cfg.loss.clip_norm,
        seed=cfg.global_.seed,
        start_epoch=start_epoch,
        out_dir=out_dir,
        init_seed=init_seed,
    )
    append_log(log_path, history, write_header)
    save_config(cfg, os.path.join(out_dir, "effective_config.ini"))
    if history:
        print(f"train: {len(history)} epochs, final mean loss {history[-1].mean_loss:.4f}")
    else:
        print("train: nothing to do (already at the configured epoch count)")
    return 0


def _load_lms(cfg: RunConfig, strategy: str) -> ExternalLMs | None:
    if strategy not in ("shallow_fusion", "density_ratio"):
        return None
    src = load_lm(cfg.decode.src_lm) if cfg.decode.src_lm else None
    tgt = load_lm(cfg.decode.tgt_lm) if cfg.decode.tgt_lm else None
    if tgt is None:
        raise UsageError(f"strategy {strategy!r} requires decode.tgt_lm")
    if strategy == "density_ratio" and src is None:
        raise UsageError("strategy 'density_ratio' requires decode.src_lm")
    return ExternalLMs(src=src, tgt=tgt)


def _decode_one(utt, params, dcfg, lms, vocab):
    result = alsd_decode(params, utt.features, dcfg, lms)
    labels, score = result.best
    return utt.id, decode_labels(labels, vocab), score, result.trace


def cmd_decode(
    cfg: RunConfig,
    checkpoint: str,
    corpus_path: str,
    out_path: str,
    strategy: str | None = None,
) -> int:
    params, _ = load_params(checkpoint)
    vocab = load_vocab(cfg.data.vocab)
    if params.dims != model_dims(cfg, vocab.size):
        raise UsageError("checkpoint dims do not match the configuration")
    dcfg = decode_config(cfg, strategy)
    lms = _load_lms(cfg, dcfg.strategy)
    utts = sorted(load_corpus(corpus_path), key=lambda u: u.id)
    worker = partial(_decode_one, params=params, dcfg=dcfg, lms=lms, vocab=vocab)
    if cfg.global_.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.global_.threads) as pool:
            rows = list(pool.map(worker, utts))
    else:
        rows = [worker(u) for u in utts]
    with open(out_path, "w", encoding="utf-8") as fh:
        for utt_id, text, score, _ in rows:
            fh.write(f"{utt_id}\t{text}\t{score!r}\n")
    if cfg.global_.trace:
        with open(out_path + ".trace.jsonl", "w", encoding="utf-8") as fh:
            for utt_id, text, score, trace in rows:
                head = {
                    "type": "begin",
                    "utt": utt_id,
                    "strategy": dcfg.strategy,
                    "lambda": dcfg.discount.lam if dcfg.discount else None,
                    "rho": dcfg.discount.rho if dcfg.discount else None,
                    "p_roll_init": dcfg.discount.p_roll_init if dcfg.discount else 1.0,
                }
                fh.write(json.dumps(head) + "\n")
                for rec in trace or []:
                    fh.write(json.dumps({"utt": utt_id, **rec}) + "\n")
                fh.write(json.dumps({"type": "end", "utt": utt_id, "text": text, "score": score}) + "\n")
    out_dir = os.path.dirname(os.path.abspath(out_path))
    save_config(cfg, os.path.join(out_dir, "effective_config.ini"))
    print(f"decode: wrote {len(rows)} hypotheses to {out_path}")
    return 0


def read_hyps(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise UsageError(f"{path}: line {lineno} is not 'id\\ttext\\tscore'")
            out[parts[0]] = parts[1]
    return out


def load_g2p(path) -> dict[str, list[str]]:
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise UsageError(f"{path}: line {lineno} is not 'word\\tphonemes'")
            table[parts[0]] = parts[1].split()
    return table


def cmd_eval(
    cfg: RunConfig,
    refs_path: str,
    hyps_path: str,
    train_transcripts_path: str,
    out_path: str,
    threshold: int | None = None,
) -> int:
    refs = {u.id: u.transcript for u in load_corpus(refs_path)}
    hyps = read_hyps(hyps_path)
    train_texts = [u.transcript for u in load_corpus(train_transcripts_path)]
    table = rare_table(train_texts, threshold if threshold is not None else cfg.eval.threshold)
    g2p = load_g2p(cfg.eval.g2p) if cfg.eval.g2p else None
    report = evaluate_corpus(refs, hyps, table, g2p)
    text = format_report(report, per_utterance=cfg.eval.per_utterance)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    save_config(cfg, os.path.join(out_dir, "effective_config.ini"))
    print(text, end="")
    return 0


def _gradcheck_batch(seed: int, dims: ModelDims):
    rng = np.random.default_rng(derive_seed(seed, "gradcheck-batch"))
    batch = []
    for i, (frames, k) in enumerate(((3, 2), (4, 1), (5, 3))):
        x = rng.normal(size=(frames, dims.d_in))
        y = tuple(int(t) for t in rng.integers(1, dims.v, size=k))
        batch.append((f"gc{i}", x, y))
    return batch


def cmd_gradcheck(cfg: RunConfig, seed: int | None = None, corrupt_tensor: str | None = None, out=None) -> int:
    """Central finite differences over every parameter of a tiny model.

    Model dims are fixed small here (the shipped desk-scale dims are too large
    to difference exhaustively); the loss settings come from the config.
    """
    out = out or sys.stdout
    seed = cfg.global_.seed if seed is None else seed
    dims = GRADCHECK_DIMS
    params = init_params(dims, derive_seed(seed, "gradcheck-init"))
    if params.n_params() > GRADCHECK_PARAM_CAP:
        raise UsageError(f"gradcheck model has {params.n_params()} > {GRADCHECK_PARAM_CAP} parameters")
    batch = _gradcheck_batch(seed, dims)
    lcfg = LossConfig(
        alpha=cfg.loss.alpha, beta=cfg.loss.beta, eta=cfg.loss.eta,
        seed=derive_seed(seed, "gradcheck-mask"),
    )
    _, grads, report = combined_loss_and_grads(params, batch, lcfg)
    if corrupt_tensor is not None:
        grads[corrupt_tensor] = grads[corrupt_tensor] + 0.01  # negative-control hook
    eps = 1e-5
    n_masked = int(sum(m.sum() for m in report.masks.values()))
    worst = 0.0
    failed = []
    for name, tensor in params.tensors.items():
        max_rel = 0.0
        flat = tensor.ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up, _, _ = combined_loss_and_grads(params, batch, lcfg)
            flat[idx] = orig - eps
            down, _, _ = combined_loss_and_grads(params, batch, lcfg)
            flat[idx] = orig
            fd = (up - down) / (2.0 * eps)
            an = grads[name].ravel()[idx]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
            max_rel = max(max_rel, rel)
        status = "ok" if max_rel < GRADCHECK_TOL else "FAIL"
        print(f"{name}\t{max_rel:.3e}\t{status}", file=out)
        worst = max(worst, max_rel)
        if max_rel >= GRADCHECK_TOL:
            failed.append(name)
    print(f"masked positions: {n_masked}", file=out)
    print(f"max relative error: {worst:.3e} (tolerance {GRADCHECK_TOL})", file=out)
    if failed:
        print(f"gradcheck FAILED for: {', '.join(failed)}", file=out)
        return 2
    print("gradcheck passed", file=out)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tinyrnnt", description=__doc__)
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--trace", action="store_true", help="write decode trace records")
    parser.add_argument("--threads", type=int, help="worker processes for decode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("decode", help="decode a corpus with a strategy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy")

    p = sub.add_parser("eval", help="score hypotheses against references")
    p.add_argument("--refs", required=True)
    p.add_argument("--hyps", required=True)
    p.add_argument("--train-transcripts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int)

    sub.add_parser("gradcheck", help="finite-difference check of the training gradients")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides = [a for a in argv if a.startswith("--") and "=" in a and "." in a.split("=", 1)[0]]
    rest = [a for a in argv if a not in overrides]
    try:
        args = _build_parser().parse_args(rest)
        cfg = load_config(args.config) if args.config else RunConfig()
        apply_overrides(cfg, overrides)
        if args.seed is not None:
            cfg.global_.seed = args.seed
        if args.trace:
            cfg.global_.trace = True
        if args.threads is not None:
            cfg.global_.threads = args.threads
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.corpus, args.out, resume=args.resume)
        if args.command == "decode":
            return cmd_decode(cfg, args.checkpoint, args.corpus, args.out, strategy=args.strategy)
        if args.command == "eval":
            return cmd_eval(cfg, args.refs, args.hyps, args.train_transcripts, args.out, args.threshold)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, seed=args.seed)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
