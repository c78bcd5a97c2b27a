"""Composite experiments behind the CLI subcommands and the acceptance suite."""

from __future__ import annotations

import time

import numpy as np

from .analysis import ProbeConfig, identifiability_probe, pairwise_context_matrix, spearman
from .bounds import (audit_tolerance, build_abstraction, empirical_generalization_gap,
                     verify_theorem1, verify_value_bound)
from .families import ContextualFamily, SlipGrid, as_context, context_distance, random_slipgrid
from .mdp import value_iteration
from .metrics import bisim_metric, task_metric
from .training import (TrainConfig, build_model, evaluate_zero_shot, oracle_return, train)


def lemma1_audit(mdp, metric_tol=1e-8, vi_tol=1e-10) -> dict:
    """|V*(s) - V*(s')| <= d~(s, s') / (1 - gamma) over all state pairs."""
    d = bisim_metric(mdp, metric_tol).d
    v = value_iteration(mdp, vi_tol).max(axis=1)
    excess = np.abs(v[:, None] - v[None, :]) - d / (1.0 - mdp.gamma)
    tol = audit_tolerance(mdp.gamma, vi_tol, metric_tol)
    return {"max_excess": float(excess.max()), "tolerance": tol,
            "passed": bool(excess.max() <= tol), "axioms": _axioms(d)}


def _axioms(d):
    from .metrics import DistanceMatrix
    return DistanceMatrix(d).audit()


def metric_experiment(family: ContextualFamily, contexts, metric_tol=1e-8, vi_tol=1e-10) -> dict:
    dm = task_metric(family, contexts, metric_tol)
    axioms = dm.audit()
    lemma = [dict(context=float(as_context(c)[0]), **lemma1_audit(family.instantiate(c), metric_tol, vi_tol))
             for c in contexts]
    thm1 = verify_theorem1(family, contexts, vi_tol, metric_tol)
    passed = axioms["passed"] and all(x["passed"] for x in lemma) and thm1["passed"]
    return {"dtask": dm, "axioms": axioms, "lemma1": lemma, "theorem1": thm1, "passed": bool(passed)}


def theorem1_random_audit(n_families, seed, contexts_per_family=4, sizes=(3, 4, 5), gamma=0.9,
                          metric_tol=1e-8, vi_tol=1e-10) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    reports = []
    t0 = time.perf_counter()
    for _ in range(n_families):
        fam = random_slipgrid(rng, gamma=gamma, sizes=sizes)
        ctx = sorted(float(x) for x in rng.uniform(0.0, 0.6, size=contexts_per_family))
        rep = verify_theorem1(fam, ctx, vi_tol, metric_tol)
        rep["n_states"] = fam.n_states
        reports.append(rep)
    violations = sum(r["violations"] for r in reports)
    return {"reports": reports, "violations": violations, "passed": violations == 0,
            "seconds": time.perf_counter() - t0}


def bound_sweep(n_draws, seed, family: SlipGrid | None = None, contexts=None, radius_fractions=(0.0, 0.05, 0.2, 0.5),
                chat_offsets=(0.0, 0.01, 0.05, 0.1), grid_sizes=(3, 4), gamma=0.9) -> list:
    """Randomized value-bound audit.

    Each draw picks a family (a random SlipGrid unless ``family`` is given),
    a context pair, an abstraction radius (as a fraction of the largest
    bisimulation distance under c_i) and a c_hat offset from the fixed grid.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    contexts = list(contexts) if contexts is not None else list(SlipGrid().default_split().train)
    out = []
    for draw in range(n_draws):
        fam = family if family is not None else random_slipgrid(rng, gamma=gamma, sizes=grid_sizes)
        i, j = rng.integers(len(contexts), size=2)
        c_i, c_j = contexts[i], contexts[j]
        frac = radius_fractions[draw % len(radius_fractions)]
        off = chat_offsets[(draw // len(radius_fractions)) % len(chat_offsets)]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        c_hat = float(np.clip(c_i + sign * off, fam.low, fam.high))
        d = bisim_metric(fam.instantiate(c_i))
        ab = build_abstraction(d, frac * float(d.d.max()))
        rep = verify_value_bound(fam, c_i, c_j, ab, c_hat).to_dict()
        rep["draw"] = draw
        out.append(rep)
    return out


def report_satisfied(rep: dict, form: str = "stated") -> bool:
    if form == "reference":
        return rep["lhs"] <= rep["reference_rhs"] + rep["tolerance"]
    return bool(rep["satisfied"])


# ---------------------------------------------------------------------------
# learner experiments


def model_kwargs(cfg_model: dict, alpha=None) -> dict:
    kw = dict(cfg_model)
    if alpha is not None:
        kw["alpha"] = alpha
    return kw


def train_config(cfg_train: dict, gamma: float) -> TrainConfig:
    return TrainConfig(gamma=gamma, **cfg_train)


def train_one(family, split, model_cfg: dict, tcfg: TrainConfig, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))
    model = build_model(family, model_cfg, rng)
    return train(model, family, split.train, tcfg, seed)


def nearest_train_distance(c, train_contexts) -> float:
    return min(context_distance(c, t) for t in train_contexts)


def ablation_experiment(family, split, model_cfg: dict, tcfg: TrainConfig, seeds, episodes=5,
                        windows_per_context=32, alpha_without=0.0, oracle_episodes=5,
                        progress=None) -> dict:
    """Train ZeUS with and without the context loss on every seed; collect
    context-ranking correlations, zero-shot returns and the regret trend."""
    runs = {"with": [], "without": []}
    models = {}
    eval_contexts = list(split.train) + list(split.eval_interpolation) + list(split.eval_extrapolation)
    for seed in seeds:
        for tag, alpha in (("with", model_cfg.get("alpha", 1.0)), ("without", alpha_without)):
            model, tlog, _ = train_one(family, split, model_kwargs(model_cfg, alpha), tcfg, seed)
            rep = pairwise_context_matrix(model, family, split.train, windows_per_context,
                                          seed=int(np.random.SeedSequence([seed, 20]).generate_state(1)[0]))
            ev_seed = int(np.random.SeedSequence([seed, 30]).generate_state(1)[0])
            before = model.checksum()
            returns = evaluate_zero_shot(model, family, eval_contexts, episodes, ev_seed)
            checksum_ok = model.checksum() == before
            tail = {i: float(np.mean(tlog.returns_for(i)[-3:])) if tlog.returns_for(i) else float("nan")
                    for i in range(len(split.train))}
            runs[tag].append({"seed": seed, "alpha": alpha, "spearman": rep.spearman_rho,
                              "context_matrix": rep.embedding_distance.tolist(),
                              "returns": returns, "checksum_ok": checksum_ok,
                              "train_tail_returns": tail,
                              "final_losses": list(tlog.updates[-1][1:]) if tlog.updates else []})
            models[(tag, seed)] = model
            if progress:
                progress(tag, seed, rep.spearman_rho, returns)
    oracle = {float(as_context(c)[0]): oracle_return(family, c, oracle_episodes, 999)
              for c in eval_contexts}
    best = {}
    for c in oracle:
        achieved = [r["returns"][c] for tag in runs for r in runs[tag]]
        best[c] = max([oracle[c]] + achieved)
    extrap = [float(as_context(c)[0]) for c in split.eval_extrapolation]
    regret = {c: float(np.mean([best[c] - r["returns"][c] for r in runs["with"]])) for c in extrap}
    dist = {c: nearest_train_distance(c, split.train) for c in extrap}
    try:
        regret_rho = spearman([dist[c] for c in extrap], [regret[c] for c in extrap])
    except ValueError:
        regret_rho = float("nan")

    def mean_extrap(tag):
        return float(np.mean([np.mean([r["returns"][c] for c in extrap]) for r in runs[tag]]))

    train_ctx = [float(as_context(c)[0]) for c in split.train]
    interp = [float(as_context(c)[0]) for c in split.eval_interpolation]
    gap = empirical_generalization_gap(
        {"train": [r["returns"][c] for r in runs["with"] for c in train_ctx]},
        {"interpolation": [r["returns"][c] for r in runs["with"] for c in interp] or [np.nan],
         "extrapolation": [r["returns"][c] for r in runs["with"] for c in extrap]})
    summary = {
        "spearman_with": float(np.mean([r["spearman"] for r in runs["with"]])),
        "spearman_without": float(np.mean([r["spearman"] for r in runs["without"]])),
        "extrapolation_return_with": mean_extrap("with"),
        "extrapolation_return_without": mean_extrap("without"),
        "regret": regret,
        "distance_to_train": dist,
        "regret_spearman": regret_rho,
        "best_known_return": best,
        "oracle_return": oracle,
        "checksums_ok": all(r["checksum_ok"] for tag in runs for r in runs[tag]),
        "generalization_gap": gap,
    }
    return {"summary": summary, "runs": runs, "models": models}


def probe_experiment(family, contexts, k=5, seed=0, **probe_kw) -> dict:
    return identifiability_probe(family, contexts, k, ProbeConfig(**probe_kw), seed)
