"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from ._seeding import derive_seed
from .backends import (
    BackendDescriptor, BackendError, HTTPChatBackend, ModelPool, ParseError,
    PlantedPopulationMock, select_backend,
)
from .calibration import (
    BinningConfig, detect_bottleneck, estimate_conditional, fit_calibration,
    generalization_gain_lower_bound, reweight, write_calibration_json,
)
from .config import ConfigError, RunManifest, load_config
from .data import (
    DataError, add_months, build_ood_split, generate_synthetic_market, load_market, write_market,
)
from .dialogue import (
    DialogueAborted, load_role_templates, refine_rule_via_dialogue, relay_dealer_mock,
    simulate_wholesale, write_transcript, ScriptedRoleMock,
)
from .meanfield import (
    MeanFieldError, WindowConfig, init_meanfield, linear_response_runner, retail_batch_runner,
    run_meanfield,
)
from .metrics import InstanceMismatch, MetricError, evaluate_run, ood_report, write_report
from .prompts import (
    build_alignment_dataset, eligible_transactions, iter_instances, summarize_profile,
    write_alignment_jsonl,
)
from .retail import (
    ECONOMIC_PRIOR, EpisodeError, PerturbationConfig, attention_divergence,
    elicit_feature_emphasis, episode_record, generate_candidate_strategies,
    multi_sample_consistency, sample_episodes, score_and_select_strategy,
)
from .symbolic import ExpressionSyntaxError, discover_rule

logger = logging.getLogger("econsandbox")

FAILURE_ABORT_RATE = 0.5


class UsageError(Exception):
    pass


class RunAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _config(args):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mock", False):
        overrides["mock"] = True
    if getattr(args, "out", None):
        overrides["paths.out_dir"] = args.out
    if getattr(args, "data", None):
        overrides["paths.data_dir"] = args.data
    return load_config(getattr(args, "config", None), overrides)


def _out_dir(cfg) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _market(cfg):
    tx, prod = cfg.data_path("transactions"), cfg.data_path("products")
    if tx is None or prod is None:
        raise ConfigError("no input data: set paths.data_dir (or --data) or paths.transactions "
                          "and paths.products")
    for p in (tx, prod):
        if not p.exists():
            raise ConfigError(f"input file not found: {p}")
    try:
        market = load_market(tx, prod, cfg.data_path("customers"), cfg.data_path("planted"))
    except DataError as exc:
        raise DataError(f"{tx}: {exc}") from exc
    if not market.transactions:
        raise DataError(f"{tx}: no transactions")
    return market


def _split(cfg, catalog):
    if cfg.split is None or not (cfg.split.train and cfg.split.test):
        return None
    return build_ood_split(catalog, cfg.split.train, cfg.split.test)


def _instances(cfg, market):
    indices = eligible_transactions(market.transactions, market.catalog)
    if cfg.dataset.limit is not None:
        indices = indices[:cfg.dataset.limit]
    if not indices:
        raise DataError("no eligible transactions")
    return list(iter_instances(market.transactions, market.catalog, market.customers, indices,
                               cfg.seed, cfg.dataset.k, cfg.dataset.trends_window))


def _backend(cfg, market):
    """Mock population when ``mock`` is set, else the configured HTTP pool."""
    if cfg.mock:
        if not market.planted_params:
            raise ConfigError("--mock needs planted parameters (planted.json) for the customers")
        return PlantedPopulationMock(market.planted_params, cfg.retail.sigma, cfg.seed)
    if not cfg.backends:
        raise ConfigError("no backends configured; add a backends list or pass --mock")
    backends = [HTTPChatBackend(BackendDescriptor(**vars(b))) for b in cfg.backends]
    return backends[0] if len(backends) == 1 else ModelPool(tuple(backends), cfg.seed)


def _pick(backend, index: int):
    return select_backend(backend, index) if isinstance(backend, ModelPool) else backend


def _write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def _truth_record(inst, market) -> dict:
    t = inst.transaction
    cust = market.customers.get(t.customer_id)
    return {"instance_id": inst.instance_id, "customer_id": t.customer_id,
            "product_id": t.product_id, "quantity": t.quantity,
            "category": market.catalog[t.product_id].category,
            "income_bracket": cust.income_bracket if cust else "unknown",
            "discount": float(t.discount)}


def _check_failures(records, what: str) -> None:
    failed = sum(1 for r in records if not r["valid"])
    if records and failed / len(records) > FAILURE_ABORT_RATE:
        raise RunAborted(f"{failed} of {len(records)} {what} failed; aborting")
    if failed:
        logger.warning("%d of %d %s failed", failed, len(records), what)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args, cfg) -> int:
    out = Path(args.out_data or cfg.paths.data_dir or cfg.paths.out_dir)
    market = generate_synthetic_market(cfg.seed, args.customers, args.categories, args.months,
                                       beta=args.beta)
    write_market(market, out)
    print(f"generated {len(market.transactions)} transactions, {len(market.catalog)} products, "
          f"{len(market.customers)} customers in {out}")
    return 0


def cmd_build_dataset(args, cfg) -> int:
    market = _market(cfg)
    out = _out_dir(cfg)
    manifest = RunManifest.start("build-dataset", cfg)
    examples, report = build_alignment_dataset(
        market.transactions, market.catalog, market.customers, _split(cfg, market.catalog),
        cfg.seed, cfg.dataset.k, cfg.dataset.trends_window)
    if cfg.dataset.limit is not None:
        examples = examples[:cfg.dataset.limit]
        report["n_examples"] = len(examples)
    write_alignment_jsonl(examples, out / "alignment.jsonl")
    with open(out / "dataset_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    for name in ("alignment.jsonl", "dataset_report.json"):
        manifest.record(out / name)
    manifest.finish(out / "manifest.json")
    print(f"wrote {len(examples)} examples to {out / 'alignment.jsonl'}")
    return 0


def _retail_record(inst, market, backend, cfg) -> dict:
    t = inst.transaction
    customer = market.customers[t.customer_id]
    style = customer.style_params if cfg.retail.use_style else None
    seed = derive_seed(cfg.seed, inst.instance_id)
    agent = _pick(backend, seed)
    K = max(cfg.retail.K, 1)
    calls, strategy = 0, None
    try:
        if cfg.retail.strategies:
            profile = summarize_profile(customer, t.timestamp, market.catalog)
            strategies = generate_candidate_strategies(profile, customer.history_before(t.timestamp))
            chosen, first = score_and_select_strategy(strategies, inst.prompt, agent, customer, style)
            strategy = chosen.name if chosen else None
            calls += 2
            episodes = [first] + (sample_episodes(customer, first.prompt, style, agent, K - 1, seed)
                                  if K > 1 else [])
        else:
            episodes = sample_episodes(customer, inst.prompt, style, agent, K, seed)
        calls += len(episodes) - (1 if cfg.retail.strategies else 0)
    except EpisodeError as exc:
        return {"instance_id": inst.instance_id, "valid": False, "buy": None, "product_id": None,
                "quantity": None, "error": str(exc), "samples": [], "cost": calls + 1}
    rec = episode_record(episodes[0], inst.instance_id)
    if cfg.retail.diagnostics:
        calls += _diagnostics(rec, customer, inst.prompt, style, agent, seed, max(K, 2),
                              cfg.retail.perturb_sigma)
    rec.update(samples=[ep.quantity for ep in episodes if ep.valid], cost=calls,
               strategy=strategy)
    return rec


def _diagnostics(rec, customer, prompt, style, agent, seed, K, sigma) -> int:
    """Adds the consistency loss and attention divergence to ``rec``; returns calls made."""
    try:
        _, l_cons = multi_sample_consistency(customer, prompt, PerturbationConfig(sigma, K, seed),
                                             agent, style)
    except EpisodeError as exc:
        l_cons = None
        logger.warning("%s: consistency loss unavailable: %s", rec["instance_id"], exc)
    try:
        A = elicit_feature_emphasis(agent, prompt)
        attention, kl = A.as_dict(), attention_divergence(A, ECONOMIC_PRIOR)
    except (ParseError, BackendError) as exc:
        attention = kl = None
        logger.warning("%s: emphasis report unusable: %s", rec["instance_id"], exc)
    rec.update(l_cons=l_cons, attention=attention, attention_kl=kl)
    return K + 2


def _simulate_retail(cfg, market, backend, instances, out, manifest) -> None:
    with ThreadPoolExecutor(max_workers=max(cfg.workers, 1)) as pool:
        records = list(pool.map(lambda i: _retail_record(i, market, backend, cfg), instances))
    truth = [_truth_record(i, market) for i in instances]
    for rec, tr in zip(records, truth):
        rec.update(category=tr["category"], income_bracket=tr["income_bracket"],
                   discount=tr["discount"])
    _check_failures(records, "episodes")
    _write_jsonl(out / "episodes.jsonl", records)
    _write_jsonl(out / "truth.jsonl", truth)
    report = evaluate_run(records, {t["instance_id"]: (t["product_id"], t["quantity"]) for t in truth},
                          config_id=manifest.config_hash)
    write_report(report, out / "report.json", out / "report.md")
    for name in ("episodes.jsonl", "truth.jsonl", "report.json", "report.md"):
        manifest.record(out / name)
    qe = "n/a" if report.quantity_error is None else f"{report.quantity_error:.4f}"
    st = "n/a" if report.stability is None else f"{report.stability:.4f}"
    print(f"retail: {len(records)} episodes, hit rate {report.hit_rate:.4f}, "
          f"quantity error {qe}, stability {st}")


def _simulate_wholesale(cfg, market, backend, instances, out, manifest) -> None:
    templates = load_role_templates(cfg.wholesale.templates_dir)
    instances = instances[:cfg.wholesale.n_dialogues]
    tdir = out / "transcripts"
    tdir.mkdir(exist_ok=True)
    pool = relay_dealer_mock(backend) if cfg.mock else backend
    records, truth = [], []
    for inst in instances:
        seed = derive_seed(cfg.seed, inst.instance_id)
        rec = {"instance_id": inst.instance_id, "cost": cfg.wholesale.rounds}
        try:
            decision, history = simulate_wholesale(inst.prompt.rendered_text, cfg.wholesale.rounds,
                                                   pool, templates, seed, inst.prompt.candidate_ids)
            rec.update(valid=True, buy=True, product_id=decision.product_id,
                       quantity=decision.quantity, fallback=decision.fallback)
        except DialogueAborted as exc:
            history = exc.state.history
            rec.update(valid=False, buy=None, product_id=None, quantity=None, error=str(exc))
        except Exception as exc:  # parse errors keep the full transcript
            history = getattr(exc, "transcript", ())
            rec.update(valid=False, buy=None, product_id=None, quantity=None,
                       error=f"{type(exc).__name__}: {exc}")
        write_transcript(history, tdir / f"{inst.instance_id}.jsonl")
        records.append(rec)
        truth.append(_truth_record(inst, market))
    _check_failures(records, "dialogues")
    _write_jsonl(out / "episodes.jsonl", records)
    _write_jsonl(out / "truth.jsonl", truth)
    report = evaluate_run(records, {t["instance_id"]: (t["product_id"], t["quantity"]) for t in truth},
                          config_id=manifest.config_hash)
    write_report(report, out / "report.json", out / "report.md")
    for name in ("episodes.jsonl", "truth.jsonl", "report.json", "report.md"):
        manifest.record(out / name)
    print(f"wholesale: {len(records)} dialogues of {cfg.wholesale.rounds} rounds, "
          f"hit rate {report.hit_rate:.4f}")


def _simulate_meanfield(cfg, market, backend, instances, out, manifest) -> None:
    mf = cfg.meanfield
    if not mf.enabled:
        raise ConfigError("meanfield.enabled is false")
    last = max(t.month for t in market.transactions)
    mu0 = init_meanfield(market.transactions, market.catalog, mf.W, add_months(last, 1),
                         mf.smoothing)
    if mf.runner == "linear":
        runner = linear_response_runner(mf.intercept, mf.slope, sorted(market.catalog),
                                        n_agents=len(market.catalog))
    elif mf.runner == "agents":
        runner = retail_batch_runner(instances, backend)
    else:
        raise ConfigError(f"meanfield.runner must be 'linear' or 'agents', not {mf.runner!r}")
    try:
        mu, traj = run_meanfield(WindowConfig(mf.W, mf.eta), mu0, runner, mf.tol, mf.max_iter,
                                 market.catalog, mf.smoothing)
    except MeanFieldError as exc:
        if exc.trajectory is not None:
            exc.trajectory.write_jsonl(out / "trajectory.jsonl")
        raise
    traj.write_jsonl(out / "trajectory.jsonl")
    with open(out / "meanfield.json", "w", encoding="utf-8") as fh:
        json.dump({"converged": traj.converged, "iterations": len(traj.deltas),
                   "final_delta": traj.deltas[-1] if traj.deltas else None,
                   "state": mu.to_dict()}, fh, indent=1, sort_keys=True)
    for name in ("trajectory.jsonl", "meanfield.json"):
        manifest.record(out / name)
    manifest.extra.update(converged=traj.converged, iterations=len(traj.deltas))
    if not traj.converged:
        logger.warning("mean field did not converge in %d iterations", mf.max_iter)
    print(f"meanfield: converged={str(traj.converged).lower()} after {len(traj.deltas)} "
          f"iterations (last change {traj.deltas[-1]:.3g})")


def cmd_simulate(args, cfg) -> int:
    mode = args.mode
    market = _market(cfg)
    out = _out_dir(cfg)
    manifest = RunManifest.start(f"simulate-{mode}", cfg)
    needs_agents = mode != "meanfield" or cfg.meanfield.runner == "agents"
    backend = _backend(cfg, market) if needs_agents else None
    instances = _instances(cfg, market) if needs_agents else []
    {"retail": _simulate_retail, "wholesale": _simulate_wholesale,
     "meanfield": _simulate_meanfield}[mode](cfg, market, backend, instances, out, manifest)
    manifest.finish(out / "manifest.json")
    return 0


def cmd_evaluate(args, cfg) -> int:
    if args.ood and cfg.split is None:
        raise UsageError("--ood needs a split section (train/test categories) in the config")
    episodes = _read_jsonl(args.episodes)
    truth_rows = _read_jsonl(args.truth)
    truth = {t["instance_id"]: (t["product_id"], t["quantity"]) for t in truth_rows}
    out = _out_dir(cfg)
    manifest = RunManifest.start("evaluate", cfg)
    report = evaluate_run(episodes, truth, config_id=args.config_id or "")
    write_report(report, out / "report.json", out / "report.md")
    manifest.record(out / "report.json")
    manifest.record(out / "report.md")
    if args.ood:
        side = {}
        for name, cats in (("train", set(cfg.split.train)), ("test", set(cfg.split.test))):
            ids = {t["instance_id"] for t in truth_rows if t.get("category") in cats}
            if not ids:
                raise DataError(f"no {name}-side instances in {args.truth}")
            side[name] = evaluate_run([e for e in episodes if e["instance_id"] in ids],
                                      {i: truth[i] for i in ids}, config_id=args.config_id or "",
                                      ood=name == "test", categories=cats)
        comparison = ood_report(side["train"], side["test"])
        with open(out / "ood_report.json", "w", encoding="utf-8") as fh:
            json.dump(comparison, fh, indent=1, sort_keys=True)
        manifest.record(out / "ood_report.json")
    manifest.finish(out / "manifest.json")
    qe = "n/a" if report.quantity_error is None else f"{report.quantity_error:.4f}"
    st = "n/a" if report.stability is None else f"{report.stability:.4f}"
    print(f"hit rate {report.hit_rate:.4f}, quantity error {qe}, stability {st} "
          f"({report.n_valid} valid, {report.n_invalid} invalid)")
    return 0


def _market_records(cfg) -> list[dict]:
    market = _market(cfg)
    out = []
    for t in market.transactions:
        cust = market.customers.get(t.customer_id)
        out.append({"category": market.catalog[t.product_id].category,
                    "income_bracket": cust.income_bracket if cust else "unknown",
                    "discount": float(t.discount), "quantity": t.quantity})
    return out


def _kpis(records) -> dict:
    """Mean order size and each category's share of units sold."""
    units = {}
    for r in records:
        units[r["category"]] = units.get(r["category"], 0) + r["quantity"]
    total = sum(units.values())
    out = {"mean_quantity": total / len(records)}
    out.update({f"share:{c}": (u / total if total else 0.0) for c, u in sorted(units.items())})
    return out


def _write_kpi_report(path, sim, real, delta) -> list:
    kpis, baseline = _kpis(sim), _kpis(real)
    for k in baseline:
        kpis.setdefault(k, 0.0)
    kpis = {k: kpis[k] for k in sorted(kpis) if k in baseline}
    signals = detect_bottleneck(kpis, baseline, default_delta=delta)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"kpis": kpis, "baseline": baseline, "delta": delta,
                   "signals": [vars(s) for s in signals]}, fh, indent=1, sort_keys=True)
    return signals


def cmd_calibrate(args, cfg) -> int:
    c = cfg.calibration
    binning = BinningConfig(tuple(c.discount_edges), smoothing=c.smoothing, min_count=c.min_count)
    sim = [r for r in _read_jsonl(args.sim) if r.get("valid", True) and r.get("quantity") is not None]
    real = _read_jsonl(args.real) if args.real else _market_records(cfg)
    if not sim or not real:
        raise DataError("calibration needs non-empty simulated and real decision sets")
    P_sim = estimate_conditional(sim, binning)
    P_real = estimate_conditional(real, binning)
    missing = sorted(set(P_real.probs) - set(P_sim.probs))
    if missing:
        logger.warning("%d real bins have no simulated decisions; skipped", len(missing))
        P_real.probs = {k: v for k, v in P_real.probs.items() if k in P_sim.probs}
        if not P_real.probs:
            raise DataError("no bin is shared by the simulated and real decisions")
    cmap = fit_calibration(P_sim, P_real)
    table = reweight(P_real, P_sim, c.w_min, c.w_max)
    out = _out_dir(cfg)
    manifest = RunManifest.start("calibrate", cfg)
    write_calibration_json(out / "calibration.json", cmap, table, binning)
    signals = _write_kpi_report(out / "kpi_report.json", sim, real, c.delta)
    manifest.record(out / "calibration.json")
    manifest.record(out / "kpi_report.json")
    manifest.finish(out / "manifest.json")
    total = sum(P_real.counts[k] for k in cmap.maps)
    before = sum(P_real.counts[k] * cmap.kl_before[k] for k in cmap.maps) / total
    after = max(sum(P_real.counts[k] * cmap.kl_after[k] for k in cmap.maps) / total, 0.0)
    reduction = 0.0 if before == 0 else 100.0 * (1 - after / before)
    print(f"calibrated {len(cmap.maps)} bins: KL {before:.6f} -> {after:.6f} "
          f"(reduction {reduction:.1f}%), {len(signals)} KPI signal(s)")
    return 0


def _rule_dataset(args, cfg) -> list:
    if args.dataset is None:
        market = _market(cfg)
        return [({"price": float(t.unit_price), "discount": float(t.discount)}, float(t.quantity))
                for t in market.transactions]
    path = Path(args.dataset)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    target = args.target
    if path.suffix == ".csv":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = [r.get("features", r) | ({target: r["target"]} if "target" in r else {})
                for r in _read_jsonl(path)]
    try:
        return [({k: float(v) for k, v in r.items() if k != target}, float(r[target])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad data point ({exc})") from None


def cmd_discover_rules(args, cfg) -> int:
    data = _rule_dataset(args, cfg)
    s = cfg.symbolic
    fit = discover_rule(data, s.budget, cfg.seed, s.max_depth, dataset_id=str(args.dataset or "market"),
                        population_size=s.population_size)
    status = None
    if s.refine:
        market = None if args.dataset else _market(cfg)
        pool = (ScriptedRoleMock({}) if cfg.mock else _backend(cfg, market))
        fit, status = refine_rule_via_dialogue(
            fit, data, "Review the purchasing formula below and propose a better one if you can.",
            pool, cfg.wholesale.rounds, load_role_templates(cfg.wholesale.templates_dir), cfg.seed)
    out = _out_dir(cfg)
    manifest = RunManifest.start("discover-rules", cfg)
    with open(out / "rules.json", "w", encoding="utf-8") as fh:
        json.dump({"rules": [{**fit.to_dict(), "refinement": status}]}, fh, indent=1, sort_keys=True)
    manifest.record(out / "rules.json")
    manifest.finish(out / "manifest.json")
    print(f"q = {fit.expression}  (rmse {fit.rmse:.3g}, {fit.complexity} nodes)")
    return 0


def cmd_bound(args, cfg) -> int:
    try:
        value = generalization_gain_lower_bound(args.d, args.n_target, args.n_full, args.lam,
                                                args.r_transfer)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{value:.12g}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _global_flags(parser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, metavar="PATH", help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=d, help="override the configured seed")
    parser.add_argument("--mock", action="store_true", default=d if suppress else False,
                        help="use mock agents instead of configured backends")
    parser.add_argument("--out", default=d, metavar="DIR", help="output directory")
    parser.add_argument("--data", default=d, metavar="DIR",
                        help="market directory (transactions.csv, products.jsonl, ...)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="econsandbox", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a seeded synthetic market")
    p.add_argument("--customers", type=int, default=200)
    p.add_argument("--categories", type=int, default=10)
    p.add_argument("--months", type=int, default=12)
    p.add_argument("--beta", type=float, default=None, help="common price elasticity")
    p.add_argument("--to", dest="out_data", metavar="DIR",
                   help="market directory (default: --data, else --out)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("build-dataset", parents=[common], help="write the alignment dataset")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("simulate", parents=[common], help="run a simulation pipeline")
    p.add_argument("--mode", choices=("retail", "wholesale", "meanfield"), default="retail")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("meanfield", parents=[common], help="alias of simulate --mode meanfield")
    p.set_defaults(func=cmd_simulate, mode="meanfield")

    p = sub.add_parser("evaluate", parents=[common], help="score episodes against ground truth")
    p.add_argument("--episodes", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--ood", action="store_true", help="add a train/test category comparison")
    p.add_argument("--config-id", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", parents=[common], help="fit quantity calibration maps")
    p.add_argument("--sim", required=True, help="simulated decisions (JSON lines)")
    p.add_argument("--real", help="real decisions (JSON lines); default: the market data")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("discover-rules", parents=[common], help="symbolic regression on quantities")
    p.add_argument("--dataset", help="CSV or JSON lines of features plus target")
    p.add_argument("--target", default="quantity")
    p.set_defaults(func=cmd_discover_rules)

    p = sub.add_parser("bound", parents=[common], help="generalization-gain lower bound")
    p.add_argument("--d", type=float, required=True, help="model capacity")
    p.add_argument("--n-target", type=float, required=True)
    p.add_argument("--n-full", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--r-transfer", type=float, default=0.0)
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InstanceMismatch as exc:
        print(f"error: {exc} (first offending id: {exc.instance_id})", file=sys.stderr)
        return 1
    except (RunAborted, MetricError, MeanFieldError, BackendError, ExpressionSyntaxError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
