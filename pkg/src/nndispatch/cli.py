"""Command line entry point: ``nndispatch <command> [options]``.

Every option can also come from a key-value config file passed with
``--config``.  Keys live in a section named after the command (or in
``[defaults]`` for all commands) and use the long option name with dashes
or underscores; flags on the command line win.

Exit codes: 0 success, 2 infeasible or invalid input, 3 certificate
failure, 4 convergence failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .network import build_matrices, load_network
from .powerflow import PowerFlowError, check_feasibility

EXIT_OK, EXIT_INFEASIBLE, EXIT_CERTIFICATE, EXIT_CONVERGENCE = 0, 2, 3, 4

log = logging.getLogger("nndispatch")


def read_vector(text: str) -> np.ndarray:
    """Comma separated numbers, or a .json / .npy / .csv / .txt file."""
    p = Path(text)
    if "," not in text and p.suffix and p.exists():
        if p.suffix == ".npy":
            return np.load(p).astype(float).ravel()
        if p.suffix == ".json":
            return np.asarray(json.loads(p.read_text()), dtype=float).ravel()
        return np.loadtxt(p, delimiter=",", ndmin=1).astype(float).ravel()
    return np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()])


def _emit(obj, out):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text)
    print(text)


# --------------------------------------------------------------------------- commands
def cmd_gen_data(a):
    from .bench import generate_dataset
    from .robust import AffineRule
    net = load_network(a.network)
    rule = AffineRule.load(a.rule, net) if a.rule else None
    ds = generate_dataset(net, seed=a.seed, count=a.count, radius=a.radius, rule=rule,
                          progress=(lambda i, n: log.info("%d/%d", i, n) if i % 500 == 0 else None))
    ds.save(a.out)
    log.info("wrote %s (%d samples, %d redraws)", a.out, len(ds), ds.resampled)
    return EXIT_OK


def cmd_fit_ip(a):
    from .inner import assemble_inner_system, make_taylor_cuts, nominal_expansion_state
    from .robust import NoInteriorRule, ScenarioBox, fit_affine_rule
    net = load_network(a.network)
    sys_ = assemble_inner_system(net, build_matrices(net), make_taylor_cuts(net, nominal_expansion_state(net)))
    try:
        rule = fit_affine_rule(sys_, ScenarioBox.around(net, a.radius), net.fingerprint,
                               method=a.method, refine=not a.no_refine)
    except NoInteriorRule as exc:
        print(f"no certified interior rule on the +/-{a.radius:g} box: {exc}\n"
              f"try a smaller box, e.g. --radius {a.radius / 2:g}", file=sys.stderr)
        return EXIT_CERTIFICATE
    rule.save(a.out)
    _emit({"s_star": rule.s_star, "s_opt": rule.s_opt, "out": str(a.out)}, None)
    return EXIT_OK


def cmd_train(a):
    from .bench import LabeledDataset
    from .robust import ScenarioBox
    from .surrogate import TrainConfig, TrainingError, save_model, train
    net = load_network(a.network)
    ds = LabeledDataset.load(a.data, net)
    cfg = TrainConfig(hidden=tuple(int(h) for h in str(a.hidden).split("x")), lr=a.lr,
                      pretrain_epochs=a.pretrain_epochs, epochs=a.epochs, batch_size=a.batch_size,
                      pi_v=a.pi_v, pi_l=a.pi_l, seed=a.seed)
    box = ScenarioBox.around(net, a.radius)
    Xtr, Ftr, _ = ds.part("train")
    Xva, Fva, _ = ds.part("val")
    try:
        res = train(net, Xtr, Ftr, Xva, Fva, cfg, x_lo=box.lo, x_hi=box.hi)
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    last = res.log[-1] if res.log else None
    save_model(a.out, res.params, net, cfg, pretrained=res.pretrained,
               metrics={"val_feasible": last.val_feasible if last else None})
    log.info("wrote %s", a.out)
    return EXIT_OK


def cmd_bench(a):
    from .bench import LabeledDataset, run_benchmark
    from .robust import AffineRule
    from .surrogate import load_model
    net = load_network(a.network)
    ds = LabeledDataset.load(a.data, net)
    p_nn, v_nn, _ = load_model(a.model, net)
    if v_nn is None:
        print("model file has no supervised-phase checkpoint", file=sys.stderr)
        return EXIT_INFEASIBLE
    rule = AffineRule.load(a.rule, net)
    rep = run_benchmark(net, ds, p_nn, v_nn, rule, split=a.split, limit=a.limit,
                        solver_baseline=a.solver_baseline)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "report.csv")
    rep.write_samples_csv(out / "samples.csv")
    rep.write_json(out / "summary.json")
    for r in rep.rows.values():
        print(f"{r.method:5s} gap {r.gap_mean:8.3f} %  feasible {r.feasibility:7.2f} %  "
              f"infer {r.infer_time:.2e} s  proj {r.proj_time:.2e} s")
    return EXIT_OK


def _scenario(net, a):
    x = read_vector(a.scenario) if a.scenario else net.nominal_scenario()
    if x.shape != (net.scenario_dim,):
        raise ValueError(f"scenario needs {net.scenario_dim} entries, got {x.size}")
    return x


def cmd_project(a):
    from .projection import BisectionConfig, CertificateFailure, project
    from .robust import AffineRule, eval_interior_point
    net = load_network(a.network)
    x = _scenario(net, a)
    f_nn = read_vector(a.dispatch)
    if a.interior:
        f_ip = read_vector(a.interior)
    elif a.rule:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f_ip = eval_interior_point(AffineRule.load(a.rule, net), x)
    else:
        raise ValueError("either --rule or --interior is required")
    try:
        res = project(net, f_nn, f_ip, x, BisectionConfig(a.max_iter, a.kappa_tol, a.tol))
    except CertificateFailure as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    _emit({"dispatch": res.f.tolist(), "kappa": res.kappa, "iterations": res.iterations,
           "feasible_before": res.feasible_before}, a.out)
    return EXIT_OK


def cmd_check(a):
    net = load_network(a.network)
    x = _scenario(net, a)
    f = read_vector(a.dispatch)
    if f.shape != (net.dispatch_dim,):
        raise ValueError(f"dispatch needs {net.dispatch_dim} entries, got {f.size}")
    rep = check_feasibility(net, f, x, a.tol)
    _emit({"feasible": rep.feasible, "diverged": rep.diverged, "violations": rep.violations}, a.out)
    if rep.diverged:
        return EXIT_CONVERGENCE
    return EXIT_OK if rep.feasible else EXIT_INFEASIBLE


# --------------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nndispatch", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key-value config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--network", default="ieee33", help="feeder JSON file or bundled name")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a labelled dataset")
    p.add_argument("--count", type=int, default=7000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=0.25)
    p.add_argument("--rule", help="affine rule whose interior point seeds the oracle")
    p.add_argument("--out", default="data.npz")

    p = add("fit-ip", cmd_fit_ip, "fit the certified affine interior-point rule")
    p.add_argument("--radius", type=float, default=0.25)
    p.add_argument("--method", default="ipm", choices=["ipm", "highs", "simplex"])
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--out", default="rule.json")

    p = add("train", cmd_train, "train the surrogate (supervised, then penalised)")
    p.add_argument("--data", required=False, default="data.npz")
    p.add_argument("--hidden", default="64x64")
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--pretrain-epochs", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--pi-v", type=float, default=1.0)
    p.add_argument("--pi-l", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, default=0.25)
    p.add_argument("--out", default="model.json")

    p = add("bench", cmd_bench, "compare V-NN, P-NN and B-NN")
    p.add_argument("--data", default="data.npz")
    p.add_argument("--model", default="model.json")
    p.add_argument("--rule", default="rule.json")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--limit", type=int)
    p.add_argument("--solver-baseline", action="store_true")
    p.add_argument("--out-dir", default="bench-out")

    for name, fn, help in (("project", cmd_project, "restore feasibility of one dispatch"),
                           ("check", cmd_check, "feasibility report for one dispatch")):
        p = add(name, fn, help)
        p.add_argument("--scenario", help="loads and PV availability (default: nominal)")
        p.add_argument("--dispatch", required=False, help="PV P then Q setpoints")
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--out", help="also write the JSON result here")
    proj = sub.choices["project"]
    proj.add_argument("--rule", help="affine rule file for the interior point")
    proj.add_argument("--interior", help="explicit interior dispatch instead of a rule")
    proj.add_argument("--max-iter", type=int, default=30)
    proj.add_argument("--kappa-tol", type=float, default=1e-6)
    return ap


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise FileNotFoundError(known.config)
    for name, sp in parser._subparsers._group_actions[0].choices.items():
        dests = {a.dest: a for a in sp._actions}
        vals = {}
        for section in ("defaults", name):
            if cp.has_section(section):
                for k, v in cp.items(section):
                    dest = k.replace("-", "_")
                    if dest not in dests:
                        continue
                    act = dests[dest]
                    if isinstance(act, argparse._StoreTrueAction):
                        vals[dest] = cp.getboolean(section, k)
                    else:
                        vals[dest] = act.type(v) if act.type else v
        sp.set_defaults(**vals)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (FileNotFoundError, ValueError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    if a.command in ("project", "check") and not a.dispatch:
        parser.error("--dispatch is required")
    try:
        return a.func(a)
    except PowerFlowError as exc:
        print(f"power flow failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, FileNotFoundError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
