"""``echoatt`` command line: teacher pretraining, analysis, planning, distillation, eval, bench."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import SimilarityReport, attention_similarity, build_plan, select_unchanged_layers
from .bench import format_table3, run_bench, table3
from .config import RunConfig, validate
from .data import BatchPlan, fixed_length_samples, load_corpus
from .distill import TrainReport, evaluate_perplexity, pretrain, run_distillation
from .errors import ConfigError, EchoAttError, PlanMismatchError
from .model import TINYLLAMA, TransformerModel, build_student
from .plan import PUBLISHED_SHARED_INDICES, SharingPlan
from .toycorpus import bundled_corpus_path

MISSING_FILE_EXIT = 2


def _write_json(path: Path, doc: dict, schema: str) -> None:
    validate(doc, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus(cfg: RunConfig):
    d = cfg.data
    corpus = load_corpus(d.path or bundled_corpus_path(), d.mode, d.vocab, d.val_fraction,
                         seed=cfg.seed_for("data.split"))
    if corpus.vocab_size > cfg.model.vocab_size:
        raise ConfigError(f"tokenizer has {corpus.vocab_size} ids but model.vocab_size is {cfg.model.vocab_size}")
    if d.max_train_tokens is not None:
        corpus.train = corpus.train[: d.max_train_tokens]
    return corpus


def _batch_plan(cfg: RunConfig, label: str):
    return BatchPlan(cfg.data.seq_len, cfg.data.batch_size, seed=cfg.seed_for(label) % 2**32)


def _load_model(path, cfg: RunConfig) -> TransformerModel:
    model = TransformerModel.load(path)
    if model.config != cfg.model:
        raise PlanMismatchError(f"checkpoint {path} architecture does not match the config's model block")
    return model


def _train_log(path: Path, cfg: RunConfig):
    f = open(path, "w")
    report = TrainReport(sink=f, timing=cfg.report_timing)
    report.header(cfg.to_dict())
    return f, report


def match_published_label(indices, n_layers: int) -> str | None:
    for name, (n, idx) in PUBLISHED_SHARED_INDICES.items():
        if n == n_layers and set(idx) == set(indices):
            return f"published-{name.split('-')[-1]}"
    return None


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg, args)
    corpus = _corpus(cfg)
    model = TransformerModel(cfg.model, seed=cfg.seed_for("teacher.init") % 2**32)
    f, report = _train_log(out / "teacher_train.ndjson", cfg)
    with f:
        pretrain(model, corpus, _batch_plan(cfg, "teacher.shuffle"), cfg.teacher_optim, cfg.teacher_epochs,
                 report, log_every=args.log_every)
        ppl = evaluate_perplexity(model, corpus.val, cfg.data.seq_len)
        report.summary("teacher", ppl)
    model.save(out / "teacher.ckpt")
    return {"checkpoint": str(out / "teacher.ckpt"), "perplexity": ppl}


def cmd_analyze(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg, args)
    model = _load_model(args.checkpoint, cfg)
    corpus = _corpus(cfg)
    samples = fixed_length_samples(corpus.val, cfg.data.analysis_seq_len, cfg.data.analysis_samples)
    step = cfg.data.batch_size
    report = attention_similarity(model, [samples[i:i + step] for i in range(0, len(samples), step)],
                                  workers=args.workers)
    validate(report.to_dict(), "similarity_report")
    report.write(out / "report.json", out / "report_pairs.csv", out / "report_layers.csv")
    return {"report": str(out / "report.json"), "per_layer_avg": report.per_layer_avg.tolist()}


def cmd_plan(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg, args)
    n = cfg.model.n_layers
    indices = args.indices if args.indices is not None else (
        list(cfg.plan.indices) if cfg.plan.source == "explicit" else None)
    selection = None
    if indices is not None:
        bad = [i for i in indices if not 0 < i < n]
        if bad:
            raise PlanMismatchError(f"indices {bad} are outside 1..{n - 1} for a {n}-layer model")
        plan = SharingPlan.from_shared_indices(indices, n, label=match_published_label(indices, n))
    else:
        if not args.report:
            raise ConfigError("automatic planning needs --report (or pass --indices)")
        report = SimilarityReport.read(args.report)
        if report.n_layers != n:
            raise PlanMismatchError(f"report covers {report.n_layers} layers, config has {n}")
        selection = select_unchanged_layers(report)
        k = args.k or cfg.plan.k
        plan = build_plan(selection.unchanged, n, k, cfg.plan.b)
    doc = plan.to_dict()
    doc["selection"] = selection.to_dict() if selection else None
    _write_json(out / "plan.json", doc, "sharing_plan")
    return {"plan": str(out / "plan.json"), "source_of": list(plan.source_of),
            "sharing_ratio": plan.sharing_ratio, "label": plan.label}


def cmd_distill(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg, args)
    teacher = _load_model(args.teacher, cfg)
    plan_path = Path(args.plan)
    if not plan_path.is_file():
        raise FileNotFoundError(f"plan file not found: {plan_path}")
    plan_doc = json.loads(plan_path.read_text())
    validate(plan_doc, "sharing_plan")
    plan = SharingPlan.from_dict(plan_doc)
    plan.check_layers(cfg.model.n_layers)
    student = build_student(teacher, plan)
    corpus = _corpus(cfg)
    f, report = _train_log(out / "train.ndjson", cfg)
    with f:
        result = run_distillation(teacher, student, corpus, _batch_plan(cfg, "distill.shuffle"), cfg.distill,
                                  cfg.optim, report, log_every=args.log_every)
    student.save(out / "student.ckpt")
    result.optimizer.save(out / "student.optim")
    TransformerModel(cfg.model, plan, params=result.stage1_state).save(out / "student_stage1.ckpt")
    return {"checkpoint": str(out / "student.ckpt"), "perplexity": report.perplexity}


def cmd_eval(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg, args)
    model = _load_model(args.checkpoint, cfg)
    corpus = _corpus(cfg)
    ppl = evaluate_perplexity(model, corpus.val, cfg.data.seq_len)
    doc = {"checkpoint": str(args.checkpoint), "perplexity": ppl, "val_tokens": int(corpus.val.size),
           "seq_len": cfg.data.seq_len}
    _write_json(out / "eval.json", doc, "eval")
    return doc


def cmd_bench(cfg: RunConfig, args) -> dict:
    out = _out_dir(cfg, args)
    baseline = _load_model(args.baseline, cfg)
    student = _load_model(args.student, cfg)
    b = cfg.bench
    report = run_bench(baseline, student, b.seq_len, b.batch, b.repeats, b.warmup, seed=cfg.seed_for("bench") % 2**32)
    _write_json(out / "bench.json", report.to_dict(), "bench_report")
    print(report.table())
    return {"bench": str(out / "bench.json")}


def cmd_table3(cfg: RunConfig | None, args) -> dict:
    model = cfg.model if cfg is not None else TINYLLAMA
    result = table3(model)
    out = Path(args.out or (cfg.out if cfg else "."))
    _write_json(out / "table3.json", result, "table3")
    print(format_table3(result))
    return {"table3": str(out / "table3.json")}


# ---------------------------------------------------------------------------


def _indices(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad index list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="echoatt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, config_required=True):
        sp = sub.add_parser(name, help=help_text)
        if config_required:
            sp.add_argument("config", help="run config JSON")
        else:
            sp.add_argument("config", nargs="?", help="run config JSON (TinyLlaMA constants if omitted)")
        sp.add_argument("--out", help="output directory (overrides config 'out')")
        sp.add_argument("--workers", type=int, default=1, help="worker threads for analysis")
        sp.add_argument("--log-every", type=int, default=0, help="print progress every N steps")
        sp.set_defaults(func=func)
        return sp

    command("train-teacher", cmd_train_teacher, "pretrain a dense teacher on the corpus")
    sp = command("analyze", cmd_analyze, "cross-layer attention similarity of a dense checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp = command("plan", cmd_plan, "build a sharing plan from a report or an explicit index list")
    sp.add_argument("--report")
    sp.add_argument("--k", type=int)
    sp.add_argument("--indices", type=_indices, help="shared layer indices, e.g. 2,3,4,5,7")
    sp = command("distill", cmd_distill, "stage 1 distillation then stage 2 continual training")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--plan", required=True)
    sp = command("eval", cmd_eval, "validation perplexity of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp = command("bench", cmd_bench, "parameter, FLOP and throughput comparison")
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--student", required=True)
    command("table3", cmd_table3, "parameter-reduction arithmetic for the TinyLlaMA sharing ratios",
            config_required=False)
    return p


def _fail(code: str, message: str, exit_code: int) -> int:
    doc = {"error": code, "message": message, "exit_code": exit_code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else None
        result = args.func(cfg, args)
    except FileNotFoundError as exc:
        return _fail("missing_file", str(exc), MISSING_FILE_EXIT)
    except EchoAttError as exc:
        return _fail(exc.code, str(exc), exc.exit_code)
    print(json.dumps(result, sort_keys=True, default=_jsonable))
    return 0


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x).__name__}")


if __name__ == "__main__":
    sys.exit(main())
