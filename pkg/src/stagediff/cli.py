"""Command-line surface: train, sample, eval, inspect.

Configuration is a flat key=value text file; command-line flags override file
values. Every command is deterministic under a fixed seed, exits 0 on
success, and on failure prints a single machine-parsable line
``ERROR_CLASS: message`` to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import zlib
from pathlib import Path

import numpy as np

from .canon import canonical_form
from .chem import AtomVocab, ChemError
from .checkpoint import (
    CheckpointCorrupt, CheckpointError, CheckpointIncompatible,
    load_checkpoint, save_checkpoint,
)
from .diffusion import Prior
from .evalrank import EvalSettings, format_case_records, rank_and_evaluate
from .figures import render_loss_curve, render_metrics, render_trace_strip
from .model import ArchConfig, DenoiserParams, init_params
from .pipeline import (
    PipelineError, StageConfig, StageOrder, TrainSettings, build_stage_kernels,
    sample, train, write_trace_mgf,
)
from .evalrank import score_candidate, _trace_to_supervision
from .reactions import (
    ReactionError, build_vocab, compute_group_budget, extract_supervision,
    read_corpus, remap_graph,
)
from .smiles import parse_molecule, write_molecule


class CliError(Exception):
    def __init__(self, error_class: str, message: str):
        super().__init__(message)
        self.error_class = error_class


@dataclasses.dataclass
class RunConfig:
    """Flat run configuration; every key can appear in the config file."""

    corpus: str = ""
    test_corpus: str = ""
    checkpoint: str = ""
    out: str = "runs"
    # stage parameters
    t1: int = 500
    t2: int = 50
    mu: float = 0.2
    n_g: int = 0                    # 0 = derive from the corpus statistics
    prior: str = "absorbing"
    stage_order: str = "group_then_bond"
    schedule_s: float = 0.008
    # training
    steps1: int = 2000
    steps2: int = 1000
    batch: int = 8
    lr: float = 1e-4
    lr_final: float = 0.0           # 0 = constant learning rate
    seed: int = 0
    log_every: int = 50
    replay: float = 0.3
    checkpoint_every: int = 0       # 0 = final checkpoint only
    # architecture
    n_layer: int = 4
    dx: int = 64
    de: int = 32
    dy: int = 32
    n_head: int = 4
    # evaluation / sampling
    samples_per_case: int = 100
    k_list: str = "1,3,5,10"
    score_timesteps: int = 50
    jobs: int = 1
    num_samples: int = 8
    trace: bool = False
    trace_stride: int = 1

    def parsed_k_list(self) -> tuple[int, ...]:
        try:
            ks = tuple(int(k) for k in self.k_list.split(","))
        except ValueError:
            raise CliError("CONFIG_INVALID", f"k_list is not a comma list of ints: {self.k_list!r}")
        if not ks or any(k < 1 for k in ks):
            raise CliError("CONFIG_INVALID", f"k_list entries must be >= 1: {self.k_list!r}")
        return ks

    def validate_numeric(self) -> None:
        checks = [
            ("t1", self.t1 >= 1), ("t2", self.t2 >= 1), ("n_g", self.n_g >= 0),
            ("steps1", self.steps1 >= 0), ("steps2", self.steps2 >= 0),
            ("batch", self.batch >= 1), ("lr", self.lr > 0),
            ("mu", self.mu >= 0), ("jobs", self.jobs >= 1),
            ("samples_per_case", self.samples_per_case >= 1),
            ("num_samples", self.num_samples >= 1),
            ("score_timesteps", self.score_timesteps >= 1),
            ("n_layer", self.n_layer >= 1),
            ("trace_stride", self.trace_stride >= 1),
            ("replay", 0.0 <= self.replay <= 1.0),
        ]
        for name, ok in checks:
            if not ok:
                raise CliError("CONFIG_INVALID", f"field {name} is out of range")
        if self.prior not in ("absorbing", "uniform"):
            raise CliError("CONFIG_INVALID", f"field prior must be absorbing|uniform, got {self.prior!r}")
        orders = {o.value for o in StageOrder}
        if self.stage_order not in orders:
            raise CliError("CONFIG_INVALID",
                           f"field stage_order must be one of {sorted(orders)}")


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError("IO_ERROR", f"cannot read config file: {exc}")
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError("CONFIG_INVALID", f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise CliError("CONFIG_INVALID", f"{path}:{lineno}: unknown field {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "bool":
                setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
            elif ftype == "int":
                setattr(cfg, key, int(value))
            elif ftype == "float":
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        except ValueError:
            raise CliError("CONFIG_INVALID", f"{path}:{lineno}: bad value for {key}: {value!r}")
    return cfg


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for name in (f.name for f in dataclasses.fields(RunConfig)):
        if hasattr(args, name) and getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    return cfg


def _stage_config(cfg: RunConfig, n_g: int) -> StageConfig:
    return StageConfig(
        t1=cfg.t1, t2=cfg.t2, mu=cfg.mu, n_g=n_g,
        prior_kind=Prior(cfg.prior),
        stage_order=StageOrder(cfg.stage_order),
        schedule_s=cfg.schedule_s,
    )


def _read_corpus_records(path: str, field: str):
    if not path:
        raise CliError("CONFIG_INVALID", f"missing field {field}")
    if not Path(path).exists():
        raise CliError("CONFIG_INVALID", f"field {field}: path {path!r} does not exist")
    try:
        return read_corpus(path)
    except ReactionError as exc:
        raise CliError("PARSE_ERROR", str(exc))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    cfg.validate_numeric()
    records = _read_corpus_records(cfg.corpus, "corpus")
    vocab = build_vocab(records)
    records = [dataclasses.replace(
        r, product=remap_graph(r.product, vocab),
        reactants=remap_graph(r.reactants, vocab)) for r in records]

    sups = [extract_supervision(r) for r in records]
    budget = compute_group_budget(sups)
    n_g = cfg.n_g if cfg.n_g > 0 else budget.n_g
    stage_cfg = _stage_config(cfg, n_g)

    arch = ArchConfig(n_layer=cfg.n_layer, dx=cfg.dx, de=cfg.de, dy=cfg.dy,
                      n_head=cfg.n_head)
    params = init_params(arch, vocab, seed=cfg.seed)
    settings = TrainSettings(
        steps_per_stage=(cfg.steps1, cfg.steps2), batch=cfg.batch, lr=cfg.lr,
        lr_final=cfg.lr_final if cfg.lr_final > 0 else None,
        seed=cfg.seed, log_every=cfg.log_every, replay_fraction=cfg.replay,
    )

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    opt, skipped, log_rows = train(params, records, stage_cfg, settings)
    if skipped:
        print(f"skipped {skipped} records with groups larger than n_g={n_g}")

    save_checkpoint(out / "model.ckpt", params, opt, stage_cfg)
    log_path = out / "train_log.tsv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step\tstage\tatom_ce\tbond_ce\n")
        for step, stage, atom, bond in log_rows:
            fh.write(f"{step}\t{stage}\t{atom:.6f}\t{bond:.6f}\n")
    if log_rows:
        render_loss_curve(log_rows, out / "train_loss.svg")
    print(f"n_g={n_g} (mean={budget.mean:.3f} std={budget.std:.3f} "
          f"excluded={budget.excluded_count})")
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def _load_params(path: str):
    if not path:
        raise CliError("CONFIG_INVALID", "missing field checkpoint")
    try:
        return load_checkpoint(path)
    except CheckpointCorrupt as exc:
        raise CliError("CHECKPOINT_CORRUPT", str(exc))
    except CheckpointIncompatible as exc:
        raise CliError("CHECKPOINT_INCOMPATIBLE", str(exc))
    except CheckpointError as exc:
        raise CliError("CHECKPOINT_CORRUPT", str(exc))
    except OSError as exc:
        raise CliError("IO_ERROR", str(exc))


def cmd_sample(cfg: RunConfig, product_text: str) -> int:
    cfg.validate_numeric()
    params, _, stage_cfg = _load_params(cfg.checkpoint)
    if stage_cfg is None:
        stage_cfg = _stage_config(cfg, max(cfg.n_g, 1))
    try:
        product, _ = parse_molecule(product_text)
        product = remap_graph(product, params.vocab)
    except ChemError as exc:
        if "not in vocabulary" in str(exc):
            raise CliError("CHECKPOINT_INCOMPATIBLE",
                           f"product uses an element outside the checkpoint vocabulary: {exc}")
        raise CliError("PARSE_ERROR", str(exc))

    kernels = build_stage_kernels(stage_cfg, params.vocab.width)
    scored = {}
    first_trace = None
    for s in range(cfg.num_samples):
        trace = sample(params, product, stage_cfg,
                       np.random.SeedSequence((cfg.seed, s)), kernels,
                       record_trace=(cfg.trace and s == 0))
        if s == 0:
            first_trace = trace
        canon = canonical_form(trace.reactant)
        if canon in scored:
            continue
        cand_sup = _trace_to_supervision(trace)
        cs = score_candidate(params, product, cand_sup, stage_cfg, kernels,
                             cfg.seed, cfg.score_timesteps,
                             candidate=trace.reactant)
        scored[canon] = (cs.score, canon, s, trace)

    ranked = sorted(scored.values(), key=lambda x: (x[0], x[1], x[2]))
    for score, _, _, trace in ranked:
        print(f"{score:.6f}\t{write_molecule(trace.reactant)}")

    if cfg.trace and first_trace is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        write_trace_mgf(first_trace, out / "trace.mgf")
        render_trace_strip(first_trace, out / "trace.svg", stride=cfg.trace_stride)
        print(f"wrote {out / 'trace.mgf'} and {out / 'trace.svg'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    cfg.validate_numeric()
    params, _, stage_cfg = _load_params(cfg.checkpoint)
    if stage_cfg is None:
        raise CliError("CHECKPOINT_INCOMPATIBLE",
                       "checkpoint carries no stage configuration")
    records = _read_corpus_records(cfg.test_corpus, "test_corpus")
    if not records:
        raise CliError("EMPTY_TEST_SET", "the test corpus holds no reactions")
    try:
        records = [dataclasses.replace(
            r, product=remap_graph(r.product, params.vocab),
            reactants=remap_graph(r.reactants, params.vocab)) for r in records]
    except ChemError as exc:
        raise CliError("CHECKPOINT_INCOMPATIBLE",
                       f"corpus element outside the checkpoint vocabulary: {exc}")

    settings = EvalSettings(
        samples_per_case=cfg.samples_per_case, k_list=cfg.parsed_k_list(),
        score_timesteps=cfg.score_timesteps, seed=cfg.seed, jobs=cfg.jobs,
    )
    report, cases = rank_and_evaluate(params, records, stage_cfg, settings)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    products = [write_molecule(r.product) for r in records]
    (out / "cases.tsv").write_text(format_case_records(cases, products),
                                   encoding="utf-8")
    all_scores = [s for c in cases for s in c.top_scores]
    render_metrics(report, all_scores, out / "metrics.svg")
    sys.stdout.write(report.to_text())
    print(f"wrote {out / 'metrics.txt'}, {out / 'cases.tsv'}, {out / 'metrics.svg'}")
    return 0


def cmd_inspect(path: str) -> int:
    p = Path(path)
    if not p.exists():
        raise CliError("IO_ERROR", f"no such file: {path}")
    try:
        head = p.open("rb").read(4)
    except OSError as exc:
        raise CliError("IO_ERROR", str(exc))
    if head == b"RDCK":
        params, opt, stage_cfg = _load_params(path)
        print(f"checkpoint {path}")
        print(f"vocab {' '.join(params.vocab.symbols)}")
        arch = params.arch
        print(f"arch n_layer={arch.n_layer} dx={arch.dx} de={arch.de} "
              f"dy={arch.dy} n_head={arch.n_head}")
        if stage_cfg is not None:
            print("stage_config " + " ".join(
                f"{k}={v}" for k, v in sorted(stage_cfg.to_dict().items())))
        print(f"adam_step {opt.step if opt is not None else '-'}")
        print(f"tensors {len(params.tensors)}")
        for name in sorted(params.tensors):
            arr = params.tensors[name]
            crc = zlib.crc32(np.ascontiguousarray(arr, dtype='<f4').tobytes()) & 0xFFFFFFFF
            print(f"  {name} shape={'x'.join(map(str, arr.shape))} crc32={crc:08x}")
        return 0
    # otherwise treat as a reaction corpus
    records = _read_corpus_records(path, "corpus")
    sups = [extract_supervision(r) for r in records]
    budget = compute_group_budget(sups)
    sizes = {}
    elements = {}
    for r in records:
        sizes[r.product.n] = sizes.get(r.product.n, 0) + 1
        for g in (r.product, r.reactants):
            for i in range(g.n):
                elements[g.symbol(i)] = elements.get(g.symbol(i), 0) + 1
    flagged = sum(1 for s in sups if s.flags)
    print(f"corpus {path}")
    print(f"reactions {len(records)}")
    print("product_size_histogram " + " ".join(
        f"{k}:{v}" for k, v in sorted(sizes.items())))
    print("element_counts " + " ".join(
        f"{k}:{v}" for k, v in sorted(elements.items())))
    print(f"group_size mean={budget.mean:.4f} std={budget.std:.4f} "
          f"excluded_3sigma={budget.excluded_count} n_g={budget.n_g}")
    print(f"flagged_records {flagged}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stagediff",
                                 description="staged graph-diffusion retrosynthesis")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", help="output directory")

    p_train = sub.add_parser("train", help="train on a reaction corpus")
    common(p_train)
    p_train.add_argument("--corpus")
    for name, typ in (("t1", int), ("t2", int), ("mu", float), ("n_g", int),
                      ("steps1", int), ("steps2", int), ("batch", int),
                      ("lr", float), ("n_layer", int), ("log_every", int),
                      ("replay", float)):
        p_train.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    p_train.add_argument("--prior", choices=["absorbing", "uniform"])
    p_train.add_argument("--stage-order", dest="stage_order",
                         choices=[o.value for o in StageOrder])

    p_sample = sub.add_parser("sample", help="sample reactants for one product")
    common(p_sample)
    p_sample.add_argument("--checkpoint")
    p_sample.add_argument("--product", required=True)
    p_sample.add_argument("--num-samples", dest="num_samples", type=int)
    p_sample.add_argument("--score-timesteps", dest="score_timesteps", type=int)
    p_sample.add_argument("--trace", action="store_const", const=True, default=None)
    p_sample.add_argument("--trace-stride", dest="trace_stride", type=int)

    p_eval = sub.add_parser("eval", help="rank samples over a test corpus")
    common(p_eval)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--test-corpus", dest="test_corpus")
    p_eval.add_argument("--samples-per-case", dest="samples_per_case", type=int)
    p_eval.add_argument("--score-timesteps", dest="score_timesteps", type=int)
    p_eval.add_argument("--k-list", dest="k_list")

    p_inspect = sub.add_parser("inspect", help="dump a checkpoint or corpus")
    p_inspect.add_argument("path")
    return ap


def main(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.path)
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "sample":
            return cmd_sample(cfg, args.product)
        if args.command == "eval":
            return cmd_eval(cfg)
        raise CliError("USAGE", f"unknown command {args.command!r}")
    except CliError as exc:
        print(f"{exc.error_class}: {exc}", file=sys.stderr)
        return 1
    except (ReactionError, ChemError) as exc:
        print(f"PARSE_ERROR: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"CONFIG_INVALID: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
