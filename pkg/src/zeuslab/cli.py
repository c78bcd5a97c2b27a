"""Command-line harness: ``zeus-lab <subcommand> --config <path> [--seed N] [--out <dir>]``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, validate_document
from .families import UnsupportedFamilyError, as_context
from .metrics import fit_lipschitz_constants
from .training import ZeroShotViolation, evaluate_zero_shot
from .zeus import ZeusModel
from . import experiments as ex

SUBCOMMANDS = ("metric", "bounds", "train", "eval", "analyze", "identifiability")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BOUND = 2
EXIT_CHECKSUM = 3
EXIT_CONFIG = 4


def code_version() -> str:
    """Package version plus a digest of the shipped sources."""
    h = hashlib.sha256()
    root = resources.files("zeuslab")
    for name in sorted(p.name for p in root.iterdir() if p.name.endswith(".py")):
        h.update(name.encode())
        h.update(root.joinpath(name).read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _stream(cfg: ExperimentConfig, *path) -> int:
    return int(cfg.seed_sequence(*path).generate_state(1)[0])


class Output:
    """All writes of a run go through here and stay inside ``root``."""

    def __init__(self, root: Path):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = {}

    def _path(self, name) -> Path:
        p = (self.root / name).resolve()
        if p.parent != self.root:
            raise ValueError(f"refusing to write outside the output directory: {name}")
        return p

    def write_bytes(self, name, data: bytes, key=None):
        p = self._path(name)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, p)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if key:
            self.files[key] = name
        return p

    def write_json(self, name, doc, schema=None, key=None):
        if schema:
            validate_document(doc, schema)
        text = json.dumps(_plain(doc), indent=2, sort_keys=True) + "\n"
        return self.write_bytes(name, text.encode(), key)

    def write_csv(self, name, rows, key=None):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return self.write_bytes(name, buf.getvalue().encode(), key)


def _plain(x):
    """JSON-ready copy: numpy scalars and arrays become Python values, dict keys strings."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _summary(cfg, sub, passed, **fields):
    doc = {"subcommand": sub, "config_hash": cfg.config_hash(), "seed": cfg.seed,
           "family": cfg.raw["experiment"]["family"], "passed": bool(passed)}
    doc.update(fields)
    return _plain(doc)


def _matrix_rows(labels, m):
    return [["context"] + [repr(float(c)) for c in labels]] + [
        [repr(float(c))] + [repr(float(v)) for v in row] for c, row in zip(labels, m)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_metric(cfg, out):
    fam = cfg.family()
    contexts = list(cfg.split().train)
    mcfg = cfg.section("metric")
    res = ex.metric_experiment(fam, contexts, mcfg["tol"], mcfg["vi_tol"])
    out.write_csv("dtask.csv", _matrix_rows(contexts, res["dtask"].d), "dtask")
    L_p, L_r = fit_lipschitz_constants(fam, contexts)
    thm1 = dict(res["theorem1"])
    thm1.pop("dtask")
    summary = _summary(cfg, "metric", res["passed"], contexts=contexts, axioms=res["axioms"],
                       lemma1=res["lemma1"], theorem1=thm1, lipschitz={"L_p": L_p, "L_r": L_r})
    return summary, EXIT_OK if res["passed"] else EXIT_BOUND


def cmd_bounds(cfg, out):
    bcfg = cfg.section("bounds")
    mcfg = cfg.section("metric")
    fam = cfg.family()
    split = cfg.split()
    form = bcfg["bound_form"]
    thm1 = ex.theorem1_random_audit(bcfg["n_theorem1_families"], _stream(cfg, "theorem1"),
                                    sizes=tuple(bcfg["grid_sizes"]), gamma=cfg.gamma,
                                    metric_tol=mcfg["tol"], vi_tol=mcfg["vi_tol"])
    reports = ex.bound_sweep(bcfg["n_draws"], _stream(cfg, "bounds"),
                             family=None if bcfg["random_families"] else fam,
                             contexts=split.train,
                             radius_fractions=tuple(bcfg["radius_fractions"]),
                             chat_offsets=tuple(bcfg["chat_offsets"]),
                             grid_sizes=tuple(bcfg["grid_sizes"]), gamma=cfg.gamma)
    out.write_json("bounds.json", reports, "bounds.schema.json", "bounds")
    ok = [ex.report_satisfied(r, form) for r in reports]
    stated_fail = sum(not r["satisfied"] for r in reports)
    ref_fail = sum(not ex.report_satisfied(r, "reference") for r in reports)
    passed = all(ok) and thm1["passed"]
    summary = _summary(
        cfg, "bounds", passed, bound_form=form, n_draws=len(reports),
        violations=len(ok) - sum(ok), stated_violations=stated_fail,
        reference_violations=ref_fail,
        max_lhs_minus_rhs=max((r["lhs"] - r["rhs"] for r in reports), default=0.0),
        theorem1={"families": len(thm1["reports"]), "violations": thm1["violations"],
                  "max_excess": max((r["max_excess"] for r in thm1["reports"]), default=0.0)})
    return summary, EXIT_OK if passed else EXIT_BOUND


def _train_for(cfg):
    fam = cfg.family()
    split = cfg.split()
    tcfg = ex.train_config(cfg.section("train"), cfg.gamma)
    model, tlog, _ = ex.train_one(fam, split, dict(cfg.section("model")), tcfg, _stream(cfg, "train"))
    return fam, split, model, tlog


def cmd_train(cfg, out):
    fam, split, model, tlog = _train_for(cfg)
    out.write_csv("log.csv", tlog.csv_rows(), "log")
    out.write_bytes("model.json", (json.dumps(_plain(model.to_dict()), sort_keys=True) + "\n").encode(),
                    "model")
    last = tlog.updates[-1] if tlog.updates else (0, np.nan, np.nan, np.nan, np.nan)
    first = tlog.updates[0] if tlog.updates else last
    returns = {float(as_context(c)[0]): tlog.returns_for(i) for i, c in enumerate(split.train)}
    summary = _summary(
        cfg, "train", True, steps=cfg.section("train")["total_steps"],
        model_checksum=model.checksum(),
        first_losses=dict(zip(("context_term", "dynamics_term", "reward_term", "total"), first[1:])),
        final_losses=dict(zip(("context_term", "dynamics_term", "reward_term", "total"), last[1:])),
        final_returns={c: (float(np.mean(r[-3:])) if r else None) for c, r in returns.items()},
        episodes=len(tlog.episodes))
    return summary, EXIT_OK


def cmd_eval(cfg, out):
    fam = cfg.family()
    split = cfg.split()
    saved = out.root / "model.json"
    if saved.exists():
        model = ZeusModel.from_dict(json.loads(saved.read_text()))
    else:
        fam, split, model, tlog = _train_for(cfg)
        out.write_csv("log.csv", tlog.csv_rows(), "log")
    episodes = cfg.section("eval")["episodes"]
    seed = _stream(cfg, "eval")
    sets = {"train": split.train, "interpolation": split.eval_interpolation,
            "extrapolation": split.eval_extrapolation}
    before = model.checksum()
    returns = {}
    try:
        for name, ctx in sets.items():
            returns[name] = evaluate_zero_shot(model, fam, ctx, episodes, seed) if ctx else {}
    except ZeroShotViolation as exc:
        summary = _summary(cfg, "eval", False, error=str(exc), model_checksum=before)
        return summary, EXIT_CHECKSUM
    gap = ex.empirical_generalization_gap(
        {"train": list(returns["train"].values())},
        {k: list(v.values()) for k, v in returns.items() if k != "train" and v})
    summary = _summary(cfg, "eval", True, returns=returns, generalization_gap=gap,
                       model_checksum=before, checksum_unchanged=model.checksum() == before)
    return summary, EXIT_OK


def cmd_analyze(cfg, out):
    fam = cfg.family()
    split = cfg.split()
    acfg = cfg.section("analysis")
    tcfg = ex.train_config(cfg.section("train"), cfg.gamma)
    seeds = [_stream(cfg, "analyze", s) for s in acfg["seeds"]]
    try:
        res = ex.ablation_experiment(fam, split, dict(cfg.section("model")), tcfg, seeds,
                                     episodes=cfg.section("eval")["episodes"],
                                     windows_per_context=acfg["windows_per_context"],
                                     alpha_without=acfg["alpha_without"])
    except ZeroShotViolation as exc:
        return _summary(cfg, "analyze", False, error=str(exc)), EXIT_CHECKSUM
    s = res["summary"]
    mean_mat = np.mean([r["context_matrix"] for r in res["runs"]["with"]], axis=0)
    out.write_csv("context_matrix.csv", _matrix_rows(split.train, mean_mat), "context_matrix")
    rows = [("variant", "seed", "spearman", "extrapolation_return")]
    extrap = [float(as_context(c)[0]) for c in split.eval_extrapolation]
    for tag in ("with", "without"):
        for r in res["runs"][tag]:
            rows.append((tag, r["seed"], repr(r["spearman"]),
                         repr(float(np.mean([r["returns"][c] for c in extrap])))))
    out.write_csv("log.csv", rows, "log")
    directional = {
        "spearman_gap_at_least_0.1": s["spearman_with"] - s["spearman_without"] >= 0.1,
        "extrapolation_with_not_worse": s["extrapolation_return_with"] >= s["extrapolation_return_without"],
        "regret_trend_positive": bool(s["regret_spearman"] > 0),
    }
    pcfg = dict(cfg.section("probe"))
    k = pcfg.pop("k")
    probe = ex.probe_experiment(fam, split.train, k, _stream(cfg, "probe"), **pcfg)
    summary = _summary(cfg, "analyze", s["checksums_ok"], seeds=seeds,
                       probe_mse=probe["test_mse"], probe_label_variance=probe["label_variance"],
                       directional=directional,
                       runs={tag: [{"seed": r["seed"], "spearman": r["spearman"], "returns": r["returns"]}
                                   for r in res["runs"][tag]] for tag in res["runs"]},
                       **s)
    return summary, EXIT_OK if s["checksums_ok"] else EXIT_CHECKSUM


def cmd_identifiability(cfg, out):
    fam = cfg.family()
    split = cfg.split()
    pcfg = dict(cfg.section("probe"))
    k = pcfg.pop("k")
    res = ex.probe_experiment(fam, split.train, k, _stream(cfg, "probe"), **pcfg)
    summary = _summary(cfg, "identifiability", True, k=k, threshold=1e-3,
                       meets_threshold=res["test_mse"] <= 1e-3, **res)
    return summary, EXIT_OK


COMMANDS = {"metric": cmd_metric, "bounds": cmd_bounds, "train": cmd_train, "eval": cmd_eval,
            "analyze": cmd_analyze, "identifiability": cmd_identifiability}


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def run(subcommand: str, config_path, seed=None, out=None) -> int:
    started = _now()
    cfg = load_config(config_path, seed, out)
    output = Output(cfg.output_dir)
    output.write_bytes("config.toml", Path(config_path).read_bytes(), "config")
    try:
        summary, code = COMMANDS[subcommand](cfg, output)
    except UnsupportedFamilyError as exc:
        summary, code = _summary(cfg, subcommand, False, error=str(exc)), EXIT_ERROR
    output.write_json("summary.json", summary, "summary.schema.json", "summary")
    manifest = {"config_hash": hashlib.sha256(Path(config_path).read_bytes()).hexdigest(),
                "code_version": code_version(), "seed": cfg.seed, "subcommand": subcommand,
                "started": started, "finished": _now(), "exit_code": code,
                "results": dict(output.files)}
    output.write_json("manifest.json", manifest, "manifest.schema.json")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zeus-lab", description=__doc__)
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    p.add_argument("--out", default=None, help="override experiment.output_dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args.subcommand, args.config, args.seed, args.out)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"zeus-lab: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
