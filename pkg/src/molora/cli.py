"""Command-line entry points tying the pipeline together.

Commands:
    gen-data   write both synthetic corpora as JSONL
    budget     per-layer and total adapter parameter counts
    train      train the backbone on the first domain, keep the best epoch
    forget     run the two-stage transfer protocol over the configured seeds
    riskcov    risk-coverage curve for a trained checkpoint
    check      self-check suite (update equivalence, gradients, neutrality)

Every command is deterministic given (--config, --seed) and writes only inside
the output directory. Exit codes: 0 success, 1 contract violation, 2 check
suite failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import adapters
from .adapters import MoraAdapter, param_count
from .autodiff import GradTape, grad_check, rng_stream
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .corpus import CorpusError, standard_corpora, write_jsonl, STANDARD_DOMAINS
from .evaluation import MetricError, risk_coverage
from .model import MODE_FULL, build_model
from .training import bleu4_validation, evaluate_model, forgetting_experiment, train

_CONTRACT_ERRORS = (ConfigError, CorpusError, CheckpointError, MetricError, ValueError, OSError)


def _write_csv(path: Path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _outdir(cfg: RunConfig, args) -> Path:
    out = Path(args.out if args.out else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---- commands -------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    seed = args.seed if args.seed is not None else cfg.data_seed
    a, b, _ = standard_corpora(cfg.train_size, cfg.val_size, seed, cfg.model.vocab)
    for corpus, domain in ((a, STANDARD_DOMAINS[0]), (b, STANDARD_DOMAINS[1])):
        path = out / f"{domain.name}.jsonl"
        write_jsonl(corpus.train + corpus.val, path)
        print(f"wrote {len(corpus.train) + len(corpus.val)} records to {path}")
    return 0


def cmd_budget(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    model_cfg = cfg.model
    budget = param_count(model_cfg.fused_dim, model_cfg.d_model, cfg.lora, cfg.mora)
    probe = build_model(model_cfg, cfg.lora, cfg.mora, seed=0)
    backbone = sum(p.value.size for p in probe.backbone_params())
    rows = []
    for i, (lo, mo) in enumerate(zip(budget.lora, budget.mora)):
        rows.append((str(i), str(cfg.lora[i]), str(cfg.mora[i]), str(lo), str(mo), str(lo + mo)))
    rows.append(("total", "", "", str(sum(budget.lora)), str(sum(budget.mora)), str(budget.total)))
    _write_csv(out / "budget.csv", "layer,lora_rank,mora_rank,lora_params,mora_params,layer_total", rows)
    print(f"{'layer':>6} {'r_l':>4} {'r_m':>4} {'lora':>8} {'mora':>8} {'total':>8}")
    for row in rows:
        print(f"{row[0]:>6} {row[1]:>4} {row[2]:>4} {row[3]:>8} {row[4]:>8} {row[5]:>8}")
    print(f"adapters: {budget.total} of {backbone} backbone parameters "
          f"({budget.total / backbone:.2%}); csv: {out / 'budget.csv'}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    seed = args.seed if args.seed is not None else 0
    domain_a, _, vocab = standard_corpora(cfg.train_size, cfg.val_size, cfg.data_seed, cfg.model.vocab)
    model = build_model(cfg.model, cfg.lora, cfg.mora, seed=seed)
    best = {"bleu4": -1.0, "epoch": -1, "params": [p.value.copy() for p in model.params()]}
    rows = []

    def on_epoch(epoch, mean_loss):
        score = bleu4_validation(model, domain_a.val, vocab, cfg.riskcov_max_new)
        rows.append((str(epoch), _fmt(mean_loss), _fmt(score)))
        if score > best["bleu4"]:
            best.update(bleu4=score, epoch=epoch, params=[p.value.copy() for p in model.params()])

    train(model, domain_a.train, vocab, MODE_FULL, cfg.epochs, seed,
          adam=cfg.adam, batch_size=cfg.batch_size, stream="train", on_epoch=on_epoch)
    for p, snap in zip(model.params(), best["params"]):
        p.value[:] = snap
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(model, cfg, ckpt)
    _write_csv(out / "loss_curve.csv", "epoch,train_loss,val_bleu4", rows)
    if rows:
        print(f"kept epoch {best['epoch']} (validation BLEU-4 {best['bleu4']:.4f})")
    print(f"checkpoint: {ckpt}; curve: {out / 'loss_curve.csv'}")
    return 0


def cmd_forget(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    seeds = [args.seed] if args.seed is not None else list(cfg.forget_seeds)
    pairs = forgetting_experiment(cfg.model, cfg.lora, cfg.mora, seeds,
                                  cfg.train_size, cfg.val_size,
                                  cfg.stage1_epochs, cfg.stage2_epochs,
                                  adam=cfg.adam, batch_size=cfg.batch_size,
                                  max_new=cfg.riskcov_max_new)
    rows = []
    for fft, ada in pairs:
        for rep in (fft, ada):
            rows.append((str(rep.seed), rep.strategy,
                         _fmt(100 * rep.train_rouge_l), _fmt(100 * rep.train_meteor),
                         _fmt(100 * rep.train_token_acc), _fmt(100 * rep.pre_rouge_l),
                         _fmt(100 * rep.pre_meteor), _fmt(100 * rep.pre_token_acc)))
    _write_csv(out / "forgetting.csv",
               "seed,strategy,train_rougeL,train_meteor,train_tokacc,pre_rougeL,pre_meteor,pre_tokacc",
               rows)
    for row in rows:
        print(" ".join(row))
    print(f"report: {out / 'forgetting.csv'}")
    return 0


def cmd_riskcov(cfg: RunConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigError("riskcov requires --checkpoint")
    out = _outdir(cfg, args)
    grid = [float(x) for x in args.grid.split(",")] if args.grid else [1.0, 0.9, 0.8, 0.7, 0.6, 0.5]
    model, stored = load_checkpoint(args.checkpoint, expected=cfg)
    domain_a, _, vocab = standard_corpora(stored.train_size, stored.val_size,
                                          stored.data_seed, stored.model.vocab)
    scored = evaluate_model(model, domain_a.val, vocab, max_new=stored.riskcov_max_new)
    _write_csv(out / "samples.csv", "sample_id,uncertainty,rougeL,token_accuracy",
               [(str(s.sample_id), _fmt(s.uncertainty), _fmt(s.rouge_l), _fmt(s.token_accuracy))
                for s in scored])
    points = risk_coverage(scored, grid, metric=cfg.riskcov_metric)
    rows = [(_fmt(p.coverage), _fmt(p.threshold), _fmt(p.value), str(p.retained)) for p in points]
    _write_csv(out / "riskcov.csv", "coverage,threshold,value,retained", rows)
    for p in points:
        print(f"coverage {p.coverage:.2f}: {cfg.riskcov_metric} {p.value:.4f} "
              f"(threshold {p.threshold:.4f}, retained {p.retained})")
    print(f"curve: {out / 'riskcov.csv'}")
    return 0


# ---- self-check suite -------------------------------------------------------------


def equivalence_sweep(seed: int = 0, tolerance: float = 1e-9):
    """Chunked forward vs. materialized update over every awkward shape cell.

    Returns (worst, rows) where rows are (r_hat, k, d, max_abs_error) tuples.
    """
    rng = rng_stream(seed, "check/eq")
    rows = []
    worst = 0.0
    for r_hat in (2, 4, 8):
        for k in (4, 8, 16):
            for d in (k, 2 * k, 3 * k, k + 2):
                adapter = MoraAdapter.create(d=d, k=k, r_hat=r_hat)
                cell = 0.0
                for _ in range(5):
                    adapter.M.value[:] = rng.normal(size=(r_hat, r_hat))
                    delta = adapters.materialize_delta_w(adapter)
                    for _ in range(50):
                        x = rng.normal(size=k)
                        err = float(np.max(np.abs(adapters.mora_forward(adapter, x) - delta @ x)))
                        cell = max(cell, err)
                rows.append((r_hat, k, d, cell))
                worst = max(worst, cell)
    return worst, rows


def gradient_check(seed: int = 0, tolerance: float = 1e-4):
    """Finite-difference check of a combined layer's adapter gradients."""
    rng = rng_stream(seed, "check/grad")
    layer = adapters.MoLoraLayer.create(d=12, k=8, r_l=3, r_m=4, rng=rng)
    layer.lora.B.value[:] = rng.normal(0.0, 0.05, size=layer.lora.B.shape)
    layer.mora.M.value[:] = rng.normal(0.0, 0.05, size=layer.mora.M.shape)
    xs = rng.normal(size=(4, 8))
    u = rng.normal(size=(1, 4))
    v = rng.normal(size=(12, 1))

    def f(tape):
        out = layer.apply(tape, tape.constant(xs))
        return tape.matmul(tape.matmul(tape.constant(u), tape.gelu(out)), tape.constant(v))

    return grad_check(f, [layer.lora.A, layer.lora.B, layer.mora.M])


def neutrality_check(cfg: RunConfig, seed: int = 0, prompts: int = 20) -> int:
    """Count prompts whose logits differ between fresh adapters and no adapters."""
    model = build_model(cfg.model, cfg.lora, cfg.mora, seed=seed)
    rng = rng_stream(seed, "check/neutral")
    mismatches = 0
    for _ in range(prompts):
        tokens = rng.integers(0, cfg.model.vocab, size=int(rng.integers(1, 16)))
        adapted = model.forward(GradTape(), tokens).value
        plain = model.forward(GradTape(), tokens, use_adapters=False).value
        if not np.array_equal(adapted, plain):
            mismatches += 1
    return mismatches


def cmd_check(cfg: RunConfig, args) -> int:
    failures = 0

    worst, rows = equivalence_sweep()
    ok = worst < 1e-9
    failures += not ok
    print(f"{'PASS' if ok else 'FAIL'} update-equivalence sweep: max |f(Mg(x)) - DWx| = {worst:.3e}")
    for r_hat, k, d, err in rows:
        print(f"    r_hat={r_hat:<2d} k={k:<3d} d={d:<3d} max_err={err:.3e}")

    err = gradient_check()
    ok = err < 1e-4
    failures += not ok
    print(f"{'PASS' if ok else 'FAIL'} adapter gradients vs central differences: rel err {err:.3e}")

    mismatches = neutrality_check(cfg)
    ok = mismatches == 0
    failures += not ok
    print(f"{'PASS' if ok else 'FAIL'} zero-init neutrality: {mismatches} of 20 prompts diverged")

    print(f"{3 - failures}/3 checks passed")
    return 0 if failures == 0 else 2


# ---- argument plumbing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="molora",
        description="rank-vector adapter toolkit: training, forgetting protocol, selective prediction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, blurb in (
        ("gen-data", cmd_gen_data, "write both synthetic corpora as JSONL"),
        ("budget", cmd_budget, "adapter parameter budget per layer"),
        ("train", cmd_train, "train on the first domain and save a checkpoint"),
        ("forget", cmd_forget, "two-stage transfer protocol over the configured seeds"),
        ("riskcov", cmd_riskcov, "risk-coverage curve from a checkpoint"),
        ("check", cmd_check, "run the self-check suite"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", help="path to a JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="run seed (command-specific default)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--checkpoint", help="checkpoint path (riskcov)")
        p.add_argument("--grid", help="comma-separated descending coverage fractions (riskcov)")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        return args.fn(cfg, args)
    except _CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
