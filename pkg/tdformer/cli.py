"""
Command line: ``tdformer {train,analyze,compare} --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import analysis, reports
from .config import load_config
from .datasets import synth_dataset
from .errors import ConfigurationError, NumericError, TrainingDivergedError
from .model import (collect_features, load_checkpoint, measure_activity, save_checkpoint,
                    train)
from .tensor import get_precision, set_precision

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

ANALYZE_KINDS = ("bounds", "moments", "epsilon", "variance", "jacobian", "mi", "energy")
CHECKPOINT_KINDS = ("mi", "energy")
MOMENT_RATES = (0.05, 0.1)
VARIANCE_CASES = (("qkta", "independent"), ("ssa", "independent"), ("ssa", "matrix"))


def cmd_train(cfg, args):
    dataset = synth_dataset(cfg.dataset, cfg.sizes, seed=cfg.seed)
    logger.info("[Train] %s, T=%s, %s sub-networks, %s epochs", cfg.dataset, cfg.model.T, cfg.model.n_sub,
                cfg.training.epochs)
    try:
        report = train(dataset, cfg.model, training=cfg.training)
    except TrainingDivergedError as err:
        logger.error("[Train] %s (%s)", err, err.diagnostic)
        raise
    meta = reports.provenance(cfg, dataset=cfg.dataset)
    save_checkpoint(report.model, reports.output_path(cfg.out, "checkpoint.json"), cfg.hash)
    reports.write_csv(reports.output_path(cfg.out, "train_report.csv"), reports.TRAIN_FIELDS,
                      reports.train_rows(report), meta)
    reports.write_csv(reports.output_path(cfg.out, "stage_losses.csv"), reports.STAGE_FIELDS,
                      reports.stage_rows(report), meta)
    return EXIT_OK


def _checkpoint_model(cfg, path):
    if path is None:
        raise ConfigurationError("this analysis needs --checkpoint", field="checkpoint")
    if not os.path.exists(path):
        raise ConfigurationError("{} does not exist".format(path), field="checkpoint")
    model = load_checkpoint(path)
    if model.cfg.T != cfg.model.T:
        raise ConfigurationError("checkpoint runs {} steps, config has {}".format(model.cfg.T, cfg.model.T),
                                 field="T")
    return model


def _analyze_bounds(cfg):
    results = analysis.bounds_grid(samples=cfg.samples, seed=cfg.seed, workers=cfg.workers)
    violations = sum(r.violation for r in results)
    logger.info("[Analyze] %s grid points, %s violations", len(results), violations)
    meta = {"samples": cfg.samples, "tolerance_sigmas": results[0].sigmas, "violations": violations}
    return "bounds.csv", reports.BOUND_FIELDS, reports.bound_rows(results), meta


def _analyze_moments(cfg):
    children = np.random.SeedSequence(cfg.seed).spawn(len(MOMENT_RATES))
    results = [analysis.pm_moments(f, cfg.model.clamp_a, cfg.model.clamp_b, 1024, cfg.samples,
                                   np.random.default_rng(child))
               for f, child in zip(MOMENT_RATES, children)]
    meta = {"weights": "N(0, 1), centred, unit norm", "samples": cfg.samples}
    return "moments.csv", reports.MOMENT_FIELDS, reports.moment_rows(results), meta


def _analyze_epsilon(cfg):
    report = analysis.epsilon_check(cfg.model.lif(), samples=10000, dphi_dS=1.0, seed=cfg.seed)
    logger.info("[Analyze] largest closed-form/autodiff gap %.3e", report.max_error)
    meta = {"dphi_dS": report.dphi_dS, "max_error": report.max_error}
    return "epsilon.csv", reports.EPSILON_FIELDS, reports.epsilon_rows(report), meta


def _analyze_variance(cfg):
    children = np.random.SeedSequence(cfg.seed).spawn(len(VARIANCE_CASES))
    results = [analysis.attention_variance_mc(kind, 0.3, 0.3, 0.3, 16, 16, cfg.samples, sampler,
                                              np.random.default_rng(child))
               for (kind, sampler), child in zip(VARIANCE_CASES, children)]
    return "variance.csv", reports.VARIANCE_FIELDS, reports.variance_rows(results), {"samples": cfg.samples}


def _analyze_jacobian(cfg):
    jacobian = analysis.feedback_jacobian(steps=cfg.model.T, units=16, seed=cfg.seed)
    logger.info("[Analyze] |dO/dH1| max: baseline %.3e, feedback %.3e", jacobian.baseline_max, jacobian.feedback_max)
    meta = {"steps": jacobian.steps, "feedback_weight": jacobian.feedback_weight}
    return "jacobian.csv", reports.JACOBIAN_FIELDS, reports.jacobian_rows(jacobian), meta


def _analyze_mi(cfg, model):
    dataset = synth_dataset(cfg.dataset, cfg.sizes, seed=cfg.seed)
    matrix = analysis.mi_matrix(collect_features(model, dataset.x_test), cfg.mi_units, seed=cfg.seed,
                                estimator=cfg.mi_estimator, bins=cfg.mi_bins)
    meta = dict(matrix.metadata(), layer="final block output", mean_off_diagonal=matrix.mean_off_diagonal)
    reports.write_heatmap(reports.output_path(cfg.out, "mi.svg"), matrix.values,
                          "mutual information (bits)", reports.provenance(cfg, **meta))
    return "mi.csv", reports.mi_fields(matrix), reports.mi_rows(matrix), meta


def _analyze_energy(cfg, model):
    dataset = synth_dataset(cfg.dataset, cfg.sizes, seed=cfg.seed)
    recorder = measure_activity(model, dataset.x_test)
    ledger = analysis.energy_report(model, recorder.firing_rates(), cfg.e_mac, cfg.e_ac)
    logger.info("[Analyze] %.4g pJ per sample, feedback path %.2f%%", ledger.total_pj, 100 * ledger.tdac_share)
    return "energy.csv", reports.ENERGY_FIELDS, reports.energy_rows(ledger), reports.energy_meta(ledger)


def cmd_analyze(cfg, args):
    if args.kind in CHECKPOINT_KINDS:
        model = _checkpoint_model(cfg, args.checkpoint)
        handler = {"mi": _analyze_mi, "energy": _analyze_energy}[args.kind]
        filename, fields, rows, meta = handler(cfg, model)
    else:
        handler = {"bounds": _analyze_bounds, "moments": _analyze_moments, "epsilon": _analyze_epsilon,
                   "variance": _analyze_variance, "jacobian": _analyze_jacobian}[args.kind]
        filename, fields, rows, meta = handler(cfg)
    reports.write_csv(reports.output_path(cfg.out, filename), fields, rows, reports.provenance(cfg, **meta))
    return EXIT_OK


def _run_arm(cfg, seed, feedback):
    model_cfg = replace(cfg.model, seed=seed, feedback=feedback)
    dataset = synth_dataset(cfg.dataset, cfg.sizes, seed=seed)
    report = train(dataset, model_cfg, training=cfg.training)
    model = report.model
    features = collect_features(model, dataset.x_test)
    matrix = analysis.mi_matrix(features, cfg.mi_units, seed=seed, estimator=cfg.mi_estimator,
                                bins=cfg.mi_bins)
    ledger = analysis.energy_report(model, measure_activity(model, dataset.x_test).firing_rates(),
                                    cfg.e_mac, cfg.e_ac)
    return {"seed": seed, "arm": "feedback-on" if feedback else "feedback-off",
            "test_accuracy": report.final.test_accuracy, "mi_off_diagonal": matrix.mean_off_diagonal,
            "energy_pj": ledger.total_pj, "tdac_pj": ledger.tdac_pj}, ledger


def cmd_compare(cfg, args):
    seeds = list(args.seeds) if args.seeds else list(cfg.seeds)
    if len(seeds) < 2:
        raise ConfigurationError("a paired comparison needs at least two seeds", field="seeds")
    treated_feedback = args.ablation == "feedback"
    rows, energy = [], []
    for seed in seeds:
        logger.info("[Compare] seed %s", seed)
        treated, treated_ledger = _run_arm(cfg, seed, treated_feedback)
        control, control_ledger = _run_arm(cfg, seed, False)
        if not treated_feedback:
            treated["arm"] = "feedback-off (repeat)"
        rows += [treated, control]
        for arm, ledger in ((treated["arm"], treated_ledger), (control["arm"], control_ledger)):
            energy += [dict(row, seed=seed, arm=arm) for row in reports.energy_rows(ledger)]

    summary = []
    for metric in ("test_accuracy", "mi_off_diagonal"):
        paired = analysis.PairedSummary(metric, [r[metric] for r in rows[0::2]], [r[metric] for r in rows[1::2]])
        direction = "higher" if paired.mean_delta > 0 else "lower" if paired.mean_delta < 0 else "equal"
        summary.append({"metric": metric, "mean_treated": float(np.mean(paired.treated)),
                        "mean_control": float(np.mean(paired.control)), "mean_delta": paired.mean_delta,
                        "positive": paired.positive, "negative": paired.negative, "p_value": paired.p_value,
                        "direction": direction})
        logger.info("[Compare] %s: mean delta %+.4f (%s up, %s down)", metric, paired.mean_delta,
                    paired.positive, paired.negative)

    meta = reports.provenance(cfg, ablation=args.ablation, seeds=" ".join(str(s) for s in seeds))
    energy_fields = ["seed", "arm"] + reports.ENERGY_FIELDS
    reports.write_csv(reports.output_path(cfg.out, "compare.csv"), reports.COMPARE_FIELDS, rows, meta)
    reports.write_csv(reports.output_path(cfg.out, "compare_summary.csv"), reports.SUMMARY_FIELDS, summary, meta)
    reports.write_csv(reports.output_path(cfg.out, "compare_energy.csv"), energy_fields, energy, meta)
    reports.write_workbook(reports.output_path(cfg.out, "compare.xlsx"),
                           [("runs", reports.COMPARE_FIELDS, rows),
                            ("summary", reports.SUMMARY_FIELDS, summary),
                            ("energy", energy_fields, energy)], meta)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="tdformer",
                                     description="Desk-scale spiking transformer with top-down feedback.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat YAML experiment file")
    common.add_argument("--seed", type=int, default=None, help="override the seed in the config")
    common.add_argument("--out", default=None, help="folder for reports and checkpoints")
    common.add_argument("--precision", type=int, choices=(32, 64), default=None, help="float width")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train_parser = commands.add_parser("train", parents=[common], help="train and write a checkpoint")
    train_parser.set_defaults(handler=cmd_train)

    analyze_parser = commands.add_parser("analyze", parents=[common], help="run one numerical check")
    analyze_parser.add_argument("kind", choices=ANALYZE_KINDS)
    analyze_parser.add_argument("--checkpoint", default=None, help="checkpoint for mi and energy")
    analyze_parser.set_defaults(handler=cmd_analyze)

    compare_parser = commands.add_parser("compare", parents=[common], help="paired feedback ablation")
    compare_parser.add_argument("--seeds", type=int, nargs="+", default=None)
    compare_parser.add_argument("--ablation", choices=("feedback", "null"), default="feedback",
                                help="feedback: on against off; null: off against off")
    compare_parser.set_defaults(handler=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s %(message)s")
    previous = get_precision()
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "precision": args.precision})
        set_precision(cfg.precision)
        return args.handler(cfg, args)
    except (ConfigurationError, FileNotFoundError) as err:
        logger.error("[Config] %s", err)
        return EXIT_CONFIG
    except NumericError as err:
        logger.error("[Numeric] %s", err)
        return EXIT_NUMERIC
    finally:
        set_precision(previous)


if __name__ == "__main__":
    sys.exit(main())
