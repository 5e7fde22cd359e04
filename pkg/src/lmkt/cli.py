"""Command-line surface: one verb per experiment artifact.

  simulate     write the synthetic dataset splits plus oracle sidecars
  ingest-slam  convert a SLAM-format file to the same history JSONL
  train-kt     train a knowledge-tracing model (text / qid / qonly)
  train-qg     train the difficulty-controlled generator
  eval-kt      AUC table and reliability curve      -> table1_auc.json, fig2_*
  eval-qg      ablations, control sweep, novelty    -> table2_*, fig3_*, novelty.json
  generate     sample questions at a target difficulty
  bench-pool   selection-vs-generation tradeoff     -> fig4_*

Every command exits 0 on success and nonzero with a one-line JSON error on
stderr. Figures (PNG) are rendered next to each delimited report. The
LMKT_REPORT_DIR environment variable overrides paths.report_dir.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import figures
from . import ktrain
from . import qgen
from . import simworld
from .config import (MetricsRecord, RunConfig, append_metrics, apply_override,
                     config_hash, load_config, save_config)
from .corpus import (Question, QuestionIdRegistry, StudentHistory, Vocab,
                     ingest_slam, read_histories, read_oracle_sidecar,
                     write_histories, write_oracle_sidecar)

ANCHOR_FULL_SCALE_AUC = {
    "seen": {"text": 0.75, "qid": 0.72, "qonly": 0.67},
    "unseen": {"text": 0.76, "qid": 0.70, "qonly": 0.58},
}
ANCHOR_CONTROL_RMSE = {"no_penalty": 0.052, "with_penalty": 0.062}
ANCHOR_NOVELTY = {"overall": 0.43, "hard_with_penalty": 0.66,
                  "hard_no_penalty": (0.06, 0.11)}
ANCHOR_NONFLUENT = 0.03
ANCHOR_FULL_SCALE_TRAIN = {"kt_steps": 13_000, "qg_steps": 25_000,
                           "batch_size": 2, "lr": 5e-5, "context_tokens": 1024}


# ---------------------------------------------------------------------------
# shared plumbing


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _build_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    tree = cfg.to_dict()
    for ov in args.set or []:
        if "=" not in ov:
            raise ValueError(f"--set expects key.path=value, got {ov!r}")
        key, val = ov.split("=", 1)
        apply_override(tree, key, val)
    env_report = os.environ.get("LMKT_REPORT_DIR")
    if env_report:
        tree["paths"]["report_dir"] = env_report
    return RunConfig.from_dict(tree)


def _record(cfg: RunConfig, command: str, metrics: dict, started: str) -> None:
    rec = MetricsRecord(
        run_id=f"{command}-{config_hash(cfg)}",
        version=f"lmkt-{__version__}",
        command=command,
        config_hash=config_hash(cfg),
        metrics=metrics,
        started=started,
        finished=_now(),
    )
    append_metrics(Path(cfg.paths.report_dir) / "runs.jsonl", rec)


def _load_world(cfg: RunConfig) -> tuple[simworld.SimWorld, list[Question], list[Question]]:
    """Rebuild the world recorded at simulate time (bank is seed-deterministic)."""
    path = Path(cfg.paths.data_dir) / "world.json"
    if not path.exists():
        raise FileNotFoundError(f"no world description at {path}; run simulate first")
    obj = json.loads(path.read_text(encoding="utf-8"))
    wcfg_raw = dict(obj["config"])
    wcfg_raw["templates"] = tuple(wcfg_raw["templates"])
    world = simworld.SimWorld(simworld.WorldConfig(**wcfg_raw))
    seen = [Question.from_text(t) for t in obj["seen"]]
    unseen = [Question.from_text(t) for t in obj["unseen"]]
    return world, seen, unseen


def _read_split(cfg: RunConfig, name: str, with_oracle: bool = False):
    data = Path(cfg.paths.data_dir)
    histories = read_histories(data / f"{name}.jsonl")
    if not with_oracle:
        return histories
    oracle_path = data / f"{name}.oracle.jsonl"
    traces = None
    if oracle_path.exists():
        by_id = read_oracle_sidecar(oracle_path)
        traces = [by_id[h.student_id] for h in histories]
    return histories, traces


def _ckpt_path(cfg: RunConfig, name: str) -> Path:
    p = Path(name)
    if p.exists() or p.is_absolute():
        return p
    return Path(cfg.paths.ckpt_dir) / name


def _load_kt_checked(cfg: RunConfig, name: str) -> ktrain.KT:
    path = _ckpt_path(cfg, name)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return ktrain.load_kt(path)


def _load_qg_checked(cfg: RunConfig, name: str) -> qgen.QG:
    path = _ckpt_path(cfg, name)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return qgen.load_qg(path)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


# ---------------------------------------------------------------------------
# simulate / ingest


def cmd_simulate(cfg: RunConfig, args) -> int:
    started = _now()
    data = Path(cfg.paths.data_dir)
    data.mkdir(parents=True, exist_ok=True)
    world = simworld.SimWorld(cfg.world)
    splits = simworld.make_splits(world)
    save_config(data / "config.json", cfg)
    _write_json(data / "world.json", {
        "config": asdict(cfg.world),
        "seen": [sq.question.text for sq in splits.seen],
        "unseen": [sq.question.text for sq in splits.unseen],
    })
    sizes = {}
    for name, split in splits.splits.items():
        write_histories(data / f"{name}.jsonl", split.histories)
        write_oracle_sidecar(
            data / f"{name}.oracle.jsonl",
            [(h.student_id, tr) for h, tr in zip(split.histories, split.traces)])
        sizes[name] = len(split.histories)
    print(f"bank {len(world.bank)} questions "
          f"({len(splits.seen)} seen / {len(splits.unseen)} held out)")
    for name, n in sizes.items():
        print(f"{name}: {n} students x {cfg.world.steps_per_student} interactions")
    _record(cfg, "simulate", {"bank": len(world.bank), **sizes}, started)
    return 0


def cmd_ingest_slam(cfg: RunConfig, args) -> int:
    started = _now()
    histories = ingest_slam(args.path, languages=args.languages)
    data = Path(cfg.paths.data_dir)
    data.mkdir(parents=True, exist_ok=True)
    out = data / args.out
    write_histories(out, histories)
    n_inter = sum(len(h.interactions) for h in histories)
    print(f"{len(histories)} students, {n_inter} exercises -> {out}")
    _record(cfg, "ingest-slam",
            {"students": len(histories), "exercises": n_inter}, started)
    return 0


# ---------------------------------------------------------------------------
# training


def _vocab_for_training(cfg: RunConfig, histories) -> Vocab:
    world_path = Path(cfg.paths.data_dir) / "world.json"
    if world_path.exists():
        world, _, _ = _load_world(cfg)
        return Vocab(world.words())
    words = sorted({w for h in histories for it in h.interactions
                    for w in it.question.words})
    return Vocab(words)


def cmd_train_kt(cfg: RunConfig, args) -> int:
    started = _now()
    kind = args.kind
    out = _ckpt_path(cfg, args.out or f"kt_{kind}")
    out.mkdir(parents=True, exist_ok=True)
    histories = _read_split(cfg, args.split)
    tcfg = cfg.kt_train
    if args.resume:
        kt, adam, start_step, tcfg = ktrain.load_kt_training(out)
        if kt.kind != kind:
            raise ValueError(f"checkpoint is kind {kt.kind!r}, asked for {kind!r}")
    else:
        start_step = 0
        adam = None
        if kind == "qid":
            distinct = {it.question.text for h in histories for it in h.interactions}
            registry = QuestionIdRegistry(capacity=len(distinct) + 64)
            kt = ktrain.new_kt(kind, registry=registry, **cfg.kt_model.kwargs())
        else:
            vocab = _vocab_for_training(cfg, histories)
            kt = ktrain.new_kt(kind, vocab=vocab, **cfg.kt_model.kwargs())
    dataset = ktrain.build_kt_dataset(kt, histories,
                                      answers_only=tcfg.answers_only)
    result = ktrain.train_kt(kt, dataset, tcfg, ckpt_dir=out,
                             checkpoint_every=args.checkpoint_every,
                             loss_csv=out / "loss.csv", adam=adam,
                             start_step=start_step)
    figures.save_loss_figure(result.loss_rows, out / "loss.png",
                             title=f"kt-{kind} training loss")
    print(f"{kind}: {result.steps_run} steps, final loss {result.final_loss:.4f}"
          f" -> {out}")
    _record(cfg, "train-kt", {"kind": kind, "steps": tcfg.steps,
                              "final_loss": result.final_loss}, started)
    return 0


def cmd_train_qg(cfg: RunConfig, args) -> int:
    started = _now()
    out = _ckpt_path(cfg, args.out or ("qg" if args.targets == "continuous"
                                       else "qg_binary"))
    out.mkdir(parents=True, exist_ok=True)
    data = Path(cfg.paths.data_dir)
    dev = _read_split(cfg, args.split)
    tcfg = cfg.qg_train
    if args.resume:
        qg, adam, start_step, tcfg = qgen.load_qg_training(out)
        examples = qgen.read_qg_dataset(data / f"qg_{args.targets}.jsonl")
    else:
        start_step = 0
        adam = None
        kt = _load_kt_checked(cfg, args.kt)
        if args.targets == "continuous":
            states = qgen.prefix_states(dev, cfg.qg_data.prefixes_per_student,
                                        seed=cfg.qg_data.seed)
            _, seen, _ = _load_world(cfg)
            examples = qgen.build_qg_dataset(kt, states, seen,
                                             pairs_per_state=cfg.qg_data.pairs_per_prefix,
                                             seed=cfg.qg_data.seed)
        else:
            examples = qgen.next_question_examples(
                dev, cfg.qg_data.per_student_next, seed=cfg.qg_data.seed)
        qgen.write_qg_dataset(data / f"qg_{args.targets}.jsonl", examples)
        qg = qgen.new_qg(kt.vocab, **cfg.qg_model.kwargs())
    result = qgen.train_qg(qg, examples, tcfg, ckpt_dir=out,
                           checkpoint_every=args.checkpoint_every,
                           loss_csv=out / "loss.csv", adam=adam,
                           start_step=start_step)
    figures.save_loss_figure(result.loss_rows, out / "loss.png",
                             title=f"qg ({args.targets}) training loss")
    print(f"qg/{args.targets}: {len(examples)} examples, {result.steps_run} steps, "
          f"final loss {result.final_loss:.4f} -> {out}")
    _record(cfg, "train-qg", {"targets": args.targets, "steps": tcfg.steps,
                              "examples": len(examples),
                              "final_loss": result.final_loss}, started)
    return 0


# ---------------------------------------------------------------------------
# evaluation


def _subsample(instances: list, limit: int, seed: int) -> list:
    if limit <= 0 or len(instances) <= limit:
        return instances
    idx = np.random.default_rng([seed, 53]).choice(len(instances), size=limit,
                                                   replace=False)
    return [instances[int(i)] for i in np.sort(idx)]


def cmd_eval_kt(cfg: RunConfig, args) -> int:
    started = _now()
    report_dir = Path(cfg.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    models = {
        "text": _load_kt_checked(cfg, args.kt),
        "qid": _load_kt_checked(cfg, args.dkt),
        "qonly": _load_kt_checked(cfg, args.qonly),
    }
    seen_h, seen_tr = _read_split(cfg, "test_seen", with_oracle=True)
    unseen_h, unseen_tr = _read_split(cfg, "test_unseen", with_oracle=True)
    unseen_texts: set[str] | None = None
    world_path = Path(cfg.paths.data_dir) / "world.json"
    if world_path.exists():
        _, _, unseen_qs = _load_world(cfg)
        unseen_texts = {q.text for q in unseen_qs}

    es = cfg.eval
    seen_inst = _subsample(ev.kt_instances(seen_h, seen_tr), es.max_kt_instances,
                           es.seed)
    unseen_inst = _subsample(ev.kt_instances(unseen_h, unseen_tr, unseen_texts),
                             es.max_kt_instances, es.seed)

    table: dict = {"auc": {}, "full_scale_anchor": ANCHOR_FULL_SCALE_AUC}
    timing: dict = {}
    for name, kt in models.items():
        s_scores, s_secs = ev.score_instances(kt, seen_inst)
        u_scores, u_secs = ev.score_instances(kt, unseen_inst)
        entry = {"seen": ev.auc_roc(s_scores, [x.label for x in seen_inst]),
                 "unseen_all": ev.auc_roc(u_scores, [x.label for x in unseen_inst])}
        if unseen_texts is not None:
            mask = np.array([bool(x.unseen) for x in unseen_inst])
            if mask.any() and not mask.all():
                entry["unseen_targets"] = ev.auc_roc(
                    u_scores[mask], [x.label for x, m in zip(unseen_inst, mask) if m])
        table["auc"][name] = entry
        timing[name] = {"seen": s_secs, "unseen": u_secs}
        if name == "text":
            text_scores = (s_scores, u_scores)

    # reliability curve and oracle agreement for the text model
    all_inst = list(seen_inst) + list(unseen_inst)
    all_scores = np.concatenate([text_scores[0], text_scores[1]])
    labels = [x.label for x in all_inst]
    calib = ev.calibration(all_scores, labels, n_bins=es.n_bins,
                           n_boot=es.n_boot, seed=es.seed)
    rows = [[f"{calib.bin_edges[b]:.2f}", f"{calib.bin_edges[b + 1]:.2f}",
             calib.count[b],
             "" if calib.pred_mean[b] is None else f"{calib.pred_mean[b]:.6f}",
             "" if calib.frac_correct[b] is None else f"{calib.frac_correct[b]:.6f}",
             "" if calib.bootstrap_sd[b] is None else f"{calib.bootstrap_sd[b]:.6f}"]
            for b in range(es.n_bins)]
    _write_csv(report_dir / "fig2_calibration.csv",
               ["bin_lo", "bin_hi", "count", "pred_mean", "frac_correct",
                "bootstrap_sd"], rows)
    figures.save_calibration_figure(calib, report_dir / "fig2_calibration.png")

    metrics = {}
    true_p = [x.true_p for x in all_inst]
    if all(tp is not None for tp in true_p):
        metrics["mae_vs_oracle"] = float(np.mean(np.abs(all_scores - np.array(true_p))))
    metrics["calibration_max_dev"] = calib.max_deviation(min_count=es.min_bin_count)
    table["calibration"] = {"max_deviation": metrics["calibration_max_dev"],
                            "min_bin_count": es.min_bin_count}
    if "mae_vs_oracle" in metrics:
        table["mae_vs_oracle"] = metrics["mae_vs_oracle"]
    _write_json(report_dir / "table1_auc.json", table)
    # timing kept out of the metric reports so reruns stay bit-identical
    _write_json(report_dir / "timing_eval_kt.json", timing)
    for name, entry in table["auc"].items():
        parts = ", ".join(f"{k} {v:.4f}" for k, v in entry.items())
        print(f"{name}: {parts}")
    print(f"calibration max deviation {metrics['calibration_max_dev']:.4f}"
          + (f", oracle MAE {metrics['mae_vs_oracle']:.4f}"
             if "mae_vs_oracle" in metrics else ""))
    flat = {f"auc_{m}_{k}": v for m, e in table["auc"].items() for k, v in e.items()}
    _record(cfg, "eval-kt", {**flat, **metrics}, started)
    return 0


def _oracle_fn_for(cfg: RunConfig, histories: list[StudentHistory]):
    """Score generated questions with the true student model, when the data
    came from the simulator; end-of-history ability is replayed from config."""
    world_path = Path(cfg.paths.data_dir) / "world.json"
    if not world_path.exists():
        return None, None
    world, _, _ = _load_world(cfg)
    wcfg = world.cfg
    by_id: dict[str, simworld.SimStudent] = {}
    for h in histories:
        name, _, idx = h.student_id.rpartition("_")
        if name not in simworld.SPLIT_IDS or not idx.isdigit():
            return None, None
        st = simworld.new_student(wcfg, simworld.student_seed_keys(wcfg, name, int(idx)))
        by_id[h.student_id] = simworld.replay_student(wcfg, world, h, st.ability)

    def oracle(state: StudentHistory, q: Question) -> float:
        sq = simworld.SimQuestion(q, world.question_b(q))
        return simworld.true_correct_prob(wcfg, by_id[state.student_id], sq)

    return oracle, world


def cmd_eval_qg(cfg: RunConfig, args) -> int:
    started = _now()
    report_dir = Path(cfg.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    es = cfg.eval
    kt = _load_kt_checked(cfg, args.kt)
    qg = _load_qg_checked(cfg, args.qg)

    test_h = _read_split(cfg, "test_seen")
    eval_set = qgen.next_question_examples(test_h, es.ablation_per_student,
                                           seed=es.seed, kt=kt)
    qg_by_kind = {"continuous": qg}
    if args.qg_binary:
        qg_by_kind["binary"] = _load_qg_checked(cfg, args.qg_binary)
    ablation = ev.ablation_report(qg_by_kind, eval_set, seed=es.seed,
                                  n_boot=es.n_boot)
    _write_json(report_dir / "table2_ablation.json", {
        "rows": [asdict(r) for r in ablation.rows],
        "n_eval_examples": len(eval_set),
    })

    students = test_h[:es.control_students]
    oracle_fn, world = _oracle_fn_for(cfg, students)
    theta = es.penalty_theta if args.with_penalty else 1.0
    params = qgen.SamplingParams(
        top_p=cfg.sampling.top_p, max_new_tokens=cfg.sampling.max_new_tokens,
        repetition_penalty=theta, temperature=cfg.sampling.temperature,
        seed=cfg.sampling.seed)
    sweep = ev.control_sweep(kt, qg, students, n_per=es.control_samples,
                             params=params, oracle_fn=oracle_fn)
    rows = [[c.student_id, f"{c.d_target:.1f}", len(c.achieved), c.failures,
             f"{c.mean:.6f}", f"{c.sd:.6f}",
             "" if c.oracle is None or not c.oracle
             else f"{float(np.mean(c.oracle)):.6f}"]
            for c in sweep.cells]
    _write_csv(report_dir / "fig3_control.csv",
               ["student_id", "d_target", "n", "failures", "achieved_mean",
                "achieved_sd", "oracle_mean"], rows)
    figures.save_control_figure(sweep, report_dir / "fig3_control.png")

    # novelty and fluency at the hard end, with and without the penalty
    bank_texts: set[str] = set()
    if world is None:
        w2, seen_qs, unseen_qs = None, [], []
        world_path = Path(cfg.paths.data_dir) / "world.json"
        if world_path.exists():
            w2, seen_qs, unseen_qs = _load_world(cfg)
        bank_texts = {q.text for q in seen_qs} | {q.text for q in unseen_qs}
        fluency_world = w2
    else:
        bank_texts = {sq.question.text for sq in world.bank}
        fluency_world = world
    novelty: dict = {"d_target": 0.1, "n_requested": es.novelty_n,
                     "full_scale_anchor": ANCHOR_NOVELTY,
                     "full_scale_nonfluent_anchor": ANCHOR_NONFLUENT}
    if bank_texts:
        per_student = max(1, es.novelty_n // max(len(students), 1))
        for label, th in (("penalty_off", 1.0), ("penalty_on", es.penalty_theta)):
            gens: list[Question] = []
            failures = 0
            for si, state in enumerate(students):
                p = qgen.SamplingParams(top_p=cfg.sampling.top_p,
                                        max_new_tokens=cfg.sampling.max_new_tokens,
                                        repetition_penalty=th,
                                        temperature=cfg.sampling.temperature,
                                        seed=cfg.sampling.seed + 101 + si)
                batch = qgen.generate_batch(qg, state, 0.1, per_student, p,
                                            skip_failures=True)
                gens.extend(batch.questions)
                failures += batch.failures
            novelty[label] = {
                "n": len(gens),
                "failures": failures,
                "novelty_rate": ev.novelty_rate(gens, bank_texts) if gens else None,
                "nonfluent_rate": (ev.fluency_proxy(gens, fluency_world)
                                   if gens and fluency_world else None),
            }
    _write_json(report_dir / "novelty.json", novelty)

    summary = {
        "control_rmse": sweep.rmse,
        "control_oracle_rmse": sweep.oracle_rmse,
        "control_failures": sweep.n_failures,
        "penalty_theta": theta,
        "full_scale_anchor_rmse": ANCHOR_CONTROL_RMSE,
        "target_means": {f"{t:.1f}": m for t, m in sweep.target_means().items()},
    }
    _write_json(report_dir / "fig3_control.json", summary)
    print(f"control rmse {sweep.rmse:.4f} over {sweep.n_samples} samples "
          f"({sweep.n_failures} failures), theta={theta:g}")
    for kind in qg_by_kind:
        ordered = " < ".join(f"{m}:{ablation.get(m, kind).perplexity:.2f}"
                             for m in ev.ABLATION_MODES)
        print(f"ablation[{kind}]: {ordered}")
    metrics = {"control_rmse": sweep.rmse, "control_failures": sweep.n_failures}
    if sweep.oracle_rmse is not None:
        metrics["control_oracle_rmse"] = sweep.oracle_rmse
    for r in ablation.rows:
        metrics[f"ppl_{r.target_kind}_{r.mode}"] = r.perplexity
    for label in ("penalty_off", "penalty_on"):
        if label in novelty and novelty[label]["novelty_rate"] is not None:
            metrics[f"novelty_{label}"] = novelty[label]["novelty_rate"]
    _record(cfg, "eval-qg", metrics, started)
    return 0


def cmd_generate(cfg: RunConfig, args) -> int:
    kt = _load_kt_checked(cfg, args.kt)
    qg = _load_qg_checked(cfg, args.qg)
    histories = _read_split(cfg, args.split)
    if not 0 <= args.student_index < len(histories):
        raise IndexError(f"student index {args.student_index} outside split of "
                         f"{len(histories)} students")
    state = histories[args.student_index]
    params = qgen.SamplingParams(
        top_p=cfg.sampling.top_p, max_new_tokens=cfg.sampling.max_new_tokens,
        repetition_penalty=args.theta, temperature=cfg.sampling.temperature,
        seed=args.seed if args.seed is not None else cfg.sampling.seed)
    batch = qgen.generate_batch(qg, state, args.difficulty, args.n, params,
                                skip_failures=True)
    for i, q in enumerate(batch.questions):
        d = ktrain.predict_difficulty(kt, state, q).d
        print(json.dumps({"student_id": state.student_id,
                          "d_target": args.difficulty, "question": q.text,
                          "d_model": round(d, 6), "seed": params.seed,
                          "sample": i}, sort_keys=True))
    if batch.failures:
        print(f"# {batch.failures} empty generations skipped", file=sys.stderr)
    return 0


def cmd_bench_pool(cfg: RunConfig, args) -> int:
    started = _now()
    report_dir = Path(cfg.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    es = cfg.eval
    kt = _load_kt_checked(cfg, args.kt)
    qg = _load_qg_checked(cfg, args.qg)
    _, seen_qs, unseen_qs = _load_world(cfg)
    bank = seen_qs + unseen_qs
    histories = _read_split(cfg, args.split)
    state = histories[args.student_index]
    params = qgen.SamplingParams(
        top_p=cfg.sampling.top_p, max_new_tokens=cfg.sampling.max_new_tokens,
        repetition_penalty=1.0, temperature=cfg.sampling.temperature,
        seed=cfg.sampling.seed)
    targets = [float(t) for t in (args.targets or "0.2,0.5,0.8").split(",")]
    report = ev.pool_benchmark(kt, qg, state, targets, list(es.pool_sizes),
                               bank, k=es.pool_k, seed=es.seed, params=params)
    rows = [[r.method, r.pool_size, f"{r.d_target:.2f}", f"{r.rmse:.6f}",
             f"{r.seconds:.4f}", r.failures] for r in report.rows]
    _write_csv(report_dir / "fig4_pool.csv",
               ["method", "pool_size", "d_target", "rmse", "seconds", "failures"],
               rows)
    figures.save_pool_figure(report, report_dir / "fig4_pool.png")
    gap = report.hard_easy_gap
    insufficiently_skewed = gap is None or gap < es.skew_gap_threshold
    _write_json(report_dir / "fig4_pool.json", {
        "hard_easy_gap": gap,
        "insufficiently_skewed": insufficiently_skewed,
        "skew_gap_threshold": es.skew_gap_threshold,
        "k": es.pool_k,
        "pool_sizes": list(es.pool_sizes),
        "targets": targets,
    })
    print(f"pool sizes {list(es.pool_sizes)}, k={es.pool_k}, "
          f"hard-easy gap {gap if gap is None else round(gap, 4)}"
          + (" (bank not skewed toward easy)" if insufficiently_skewed else ""))
    metrics = {f"pool{r.pool_size}_d{r.d_target:g}": r.rmse
               for r in report.rows if r.method == "pool"}
    for r in report.rows:
        if r.method == "generate":
            metrics[f"gen_d{r.d_target:g}"] = r.rmse
    if gap is not None:
        metrics["hard_easy_gap"] = gap
    metrics["insufficiently_skewed"] = insufficiently_skewed
    _record(cfg, "bench-pool", metrics, started)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmkt",
        description="knowledge tracing and difficulty-controlled question "
                    "generation on a synthetic student oracle")
    parser.add_argument("--config", help="JSON config file (defaults built in)")
    parser.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                        help="override any config field, e.g. world.seed=3")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="write synthetic dataset splits")

    p = sub.add_parser("ingest-slam", help="convert a SLAM-format file")
    p.add_argument("path")
    p.add_argument("--languages", help="comma-separated language filter")
    p.add_argument("--out", default="slam.jsonl")

    p = sub.add_parser("train-kt", help="train a knowledge-tracing model")
    p.add_argument("--kind", choices=ktrain.KINDS, default="text")
    p.add_argument("--split", default="train")
    p.add_argument("--out", help="checkpoint directory name")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("train-qg", help="train the question generator")
    p.add_argument("--kt", default="kt_text", help="KT checkpoint for targets")
    p.add_argument("--split", default="dev")
    p.add_argument("--targets", choices=("continuous", "binary"),
                   default="continuous")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = sub.add_parser("eval-kt", help="AUC table and reliability curve")
    p.add_argument("--kt", default="kt_text")
    p.add_argument("--dkt", default="kt_qid")
    p.add_argument("--qonly", default="kt_qonly")

    p = sub.add_parser("eval-qg", help="ablations, control sweep, novelty")
    p.add_argument("--kt", default="kt_text")
    p.add_argument("--qg", default="qg")
    p.add_argument("--qg-binary", default=None)
    p.add_argument("--with-penalty", action="store_true",
                   help="apply the repetition penalty during the sweep")

    p = sub.add_parser("generate", help="sample questions at a difficulty")
    p.add_argument("--kt", default="kt_text")
    p.add_argument("--qg", default="qg")
    p.add_argument("--difficulty", type=float, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--split", default="dev")
    p.add_argument("--student-index", type=int, default=0)
    p.add_argument("--theta", type=float, default=1.0,
                   help="repetition penalty (1 disables)")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("bench-pool", help="selection vs generation tradeoff")
    p.add_argument("--kt", default="kt_text")
    p.add_argument("--qg", default="qg")
    p.add_argument("--split", default="test_seen")
    p.add_argument("--student-index", type=int, default=0)
    p.add_argument("--targets", help="comma-separated d targets")

    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "ingest-slam": cmd_ingest_slam,
    "train-kt": cmd_train_kt,
    "train-qg": cmd_train_qg,
    "eval-kt": cmd_eval_kt,
    "eval-qg": cmd_eval_qg,
    "generate": cmd_generate,
    "bench-pool": cmd_bench_pool,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as e:  # noqa: BLE001 - single reporting point for the CLI
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
