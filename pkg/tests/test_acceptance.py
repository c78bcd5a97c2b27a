"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest
terminal summary (and directly when run as a script).

Criteria 6-8 train the shipped DragPointMass experiment over five seeds and
take several minutes per seed.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from zeuslab.bounds import StateAbstraction, verify_value_bound
from zeuslab.cli import main
from zeuslab.config import load_config
from zeuslab.experiments import bound_sweep, probe_experiment, theorem1_random_audit
from zeuslab.families import SlipGrid
from zeuslab.metrics import bisim_operator
from zeuslab.nn import DenseNet, stop_gradient_backward
from zeuslab.transport import wasserstein_discrete

from conftest import random_mdp, record_criterion
from gradcheck import numeric_grad, rel_error
from test_transport import rand_prob, w1_cdf, w1_vertices

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_criterion_01_theorem1_audit():
    t0 = time.perf_counter()
    res = theorem1_random_audit(50, seed=2024, contexts_per_family=4, sizes=(3, 4, 5), gamma=0.9)
    secs = time.perf_counter() - t0
    ok = res["violations"] == 0 and secs < 300
    worst = max(r["max_excess"] for r in res["reports"])
    assert record_criterion(1, ok, f"50 families, violations={res['violations']}, "
                            f"worst excess={worst:.3g}, runtime={secs:.0f}s (< 300s)")


def test_criterion_02_value_bound_sweep():
    cfg = load_config(CONFIGS / "slipgrid.toml")
    b = cfg.section("bounds")
    reports = bound_sweep(200, seed=cfg.seed, radius_fractions=tuple(b["radius_fractions"]),
                          chat_offsets=tuple(b["chat_offsets"]), grid_sizes=tuple(b["grid_sizes"]),
                          gamma=cfg.gamma)
    bad = [r for r in reports if not r["satisfied"]]
    same = verify_value_bound(SlipGrid(), 0.2, 0.2, StateAbstraction.identity(25), 0.2)
    ref_bad = sum(r["lhs"] > r["reference_rhs"] + r["tolerance"] for r in reports)
    ok = not bad and same.lhs <= 1e-6
    worst = max(reports, key=lambda r: r["lhs"] - r["rhs"])
    assert record_criterion(
        2, ok, f"{len(reports) - len(bad)}/200 satisfied (worst lhs={worst['lhs']:.3f} vs "
               f"rhs={worst['rhs']:.3f}); identity same-context lhs={same.lhs:.2e}; "
               f"reference-form violations={ref_bad}")


def test_criterion_03_transport_exactness():
    rng = np.random.default_rng(303)
    err_cdf = err_lp = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 9))
        x = np.sort(rng.normal(size=n))
        p, q = rand_prob(rng, n), rand_prob(rng, n)
        g = np.abs(np.subtract.outer(x, x))
        err_cdf = max(err_cdf, abs(wasserstein_discrete(p, q, g) - w1_cdf(x, p, q)))
    for _ in range(500):
        n = int(rng.integers(1, 4))
        pts = rng.normal(size=(n, 2))
        g = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        p, q = rand_prob(rng, n), rand_prob(rng, n)
        err_lp = max(err_lp, abs(wasserstein_discrete(p, q, g) - w1_vertices(p, q, g)))
    ok = err_cdf <= 1e-9 and err_lp <= 1e-9
    assert record_criterion(3, ok, f"max |err| 1-D closed form={err_cdf:.1e}, "
                            f"vertex enumeration={err_lp:.1e} (tol 1e-9)")


def test_criterion_04_contraction():
    rng = np.random.default_rng(404)
    worst = -np.inf
    for _ in range(100):
        mdp = random_mdp(rng)
        n = mdp.n_states
        d1, d2 = (np.abs(rng.normal(size=(n, n))) * 3 for _ in range(2))
        d1, d2 = d1 + d1.T, d2 + d2.T
        np.fill_diagonal(d1, 0)
        np.fill_diagonal(d2, 0)
        lhs = np.max(np.abs(bisim_operator(mdp, d1) - bisim_operator(mdp, d2)))
        worst = max(worst, lhs - mdp.gamma * np.max(np.abs(d1 - d2)))
    ok = worst <= 1e-12
    assert record_criterion(4, ok, f"100 MDPs, max(||F d1 - F d2|| - gamma ||d1 - d2||)={worst:.3g}")


def _dense_gradient_error(rng):
    worst = 0.0
    for acts in (["relu", "relu", "identity"], ["identity", "relu", "identity"],
                 ["relu", "identity", "relu"]):
        done = 0
        while done < 20:
            net = DenseNet([4, 6, 5, 3], acts, rng=rng)
            for k in range(net.n_layers):
                net.params[2 * k + 1][:] = rng.normal(scale=0.5, size=net.widths[k + 1])
            x = rng.normal(size=(7, 4))
            y, cache = net.forward(x)
            if min(np.abs(a).min() for a in cache.pre) <= 1e-3:
                continue
            t = rng.normal(size=y.shape)
            grads, gx = net.backward(cache, 2 * (y - t))

            def loss():
                return float(np.sum((net(x) - t) ** 2))

            for p, g in zip(net.params, grads):
                worst = max(worst, rel_error(g, numeric_grad(loss, p)))
            worst = max(worst, rel_error(gx, numeric_grad(loss, x)))
            done += 1
    return worst


def _zeus_gradient_error(rng):
    from test_zeus import random_batch, small_model
    from zeuslab.zeus import pairwise_model_distance, zeus_loss

    worst, stopped_max = 0.0, 0.0
    for seed, how in enumerate(("mean", "sum", "concat", "max", "min", "product")):
        m = small_model(seed=seed, aggregator=how, alpha=0.8)
        b = random_batch(m, rng)
        res = zeus_loss(m, b)
        z = m.phi(b.obs)
        emb = m.encode_windows(b.window)[0]
        frozen = {"target": m.phi(b.next_obs),
                  "d_hat": pairwise_model_distance(m, emb, emb[b.partner], z, b.action)}

        def total():
            return zeus_loss(m, b, frozen=frozen, need_grads=False).breakdown.total

        for name in ("phi", "psi", "dynamics", "reward"):
            for p, g in zip(getattr(m, name).params, res.grads[name]):
                worst = max(worst, rel_error(g, numeric_grad(total, p)))
        stopped_max = max([stopped_max] + [float(np.max(np.abs(g))) for g in res.stopped.values()])
    stopped_max = max(stopped_max, float(np.max(np.abs(stop_gradient_backward(rng.normal(size=5))))))
    return worst, stopped_max


def test_criterion_05_gradient_fidelity():
    rng = np.random.default_rng(505)
    dense = _dense_gradient_error(rng)
    loss, stopped = _zeus_gradient_error(rng)
    ok = dense <= 1e-4 and loss <= 1e-4 and stopped == 0.0
    assert record_criterion(5, ok, f"max rel err dense={dense:.1e}, context loss={loss:.1e}; "
                            f"stopped-branch gradient max |g|={stopped}")


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("analyze")
    code = main(["analyze", "--config", str(CONFIGS / "dragpointmass.toml"), "--out", str(out)])
    return code, json.loads((out / "summary.json").read_text())


def test_criterion_06_context_loss_ranking(ablation):
    _, s = ablation
    gap = s["spearman_with"] - s["spearman_without"]
    ok = len(s["seeds"]) >= 5 and gap >= 0.1
    assert record_criterion(6, ok, f"{len(s['seeds'])} seeds: rho with={s['spearman_with']:.3f}, "
                            f"without={s['spearman_without']:.3f}, gap={gap:.3f} (need >= 0.1)")


def test_criterion_07_zero_shot_ordering(ablation):
    code, s = ablation
    ok = (s["extrapolation_return_with"] >= s["extrapolation_return_without"]
          and s["checksums_ok"] and code == 0)
    assert record_criterion(7, ok, f"extrapolation return with={s['extrapolation_return_with']:.2f}, "
                            f"without={s['extrapolation_return_without']:.2f}; "
                            f"checksums unchanged={s['checksums_ok']}")


def test_criterion_08_degradation_trend(ablation):
    _, s = ablation
    rho = s["regret_spearman"]
    ok = rho is not None and rho > 0
    detail = ", ".join(f"c={c}: d={s['distance_to_train'][c]:.2f} regret={s['regret'][c]:.2f}"
                       for c in s["regret"])
    assert record_criterion(8, ok, f"spearman(regret, distance)={rho}; {detail}")


def test_criterion_09_identifiability():
    results = {}
    for name in ("slipgrid", "dragpointmass"):
        cfg = load_config(CONFIGS / f"{name}.toml")
        p = dict(cfg.section("probe"))
        k = p.pop("k")
        results[name] = probe_experiment(cfg.family(), cfg.split().train, k, cfg.seed, **p)
    ok = all(r["test_mse"] <= 1e-3 for r in results.values())
    detail = "; ".join(f"{n}: mse={r['test_mse']:.3g} (label var {r['label_variance']:.3g})"
                       for n, r in results.items())
    assert record_criterion(9, ok, f"{detail}; threshold 1e-3")


SMALL = {
    "slipgrid": """
[experiment]
family = "slipgrid"
seed = 0
output_dir = "{out}"
[family]
size = 3
[bounds]
n_draws = 6
n_theorem1_families = 2
grid_sizes = [3]
[probe]
windows_per_context = 30
steps = 50
""",
    "dragpointmass": """
[experiment]
family = "dragpointmass"
seed = 0
output_dir = "{out}"
[family]
horizon = 10
[model]
latent_dim = 4
context_dim = 3
hidden = 8
q_hidden = 8
[train]
total_steps = 40
batch_size = 16
probe_size = 16
warmup_steps = 10
[eval]
episodes = 1
[analysis]
seeds = [0, 1]
windows_per_context = 3
[probe]
windows_per_context = 20
steps = 20
""",
}


def test_criterion_10_determinism(tmp_path):
    plan = [("metric", "slipgrid"), ("bounds", "slipgrid"), ("identifiability", "slipgrid"),
            ("train", "dragpointmass"), ("eval", "dragpointmass"), ("analyze", "dragpointmass"),
            ("identifiability", "dragpointmass")]
    same = {}
    for sub, fam in plan:
        digests = []
        for rep in range(2):
            out = tmp_path / f"{sub}-{fam}-{rep}"
            cfg = tmp_path / f"{sub}-{fam}-{rep}.toml"
            # identical config text apart from nothing: both runs share one output path
            cfg.write_text(SMALL[fam].format(out=tmp_path / f"{sub}-{fam}"))
            main([sub, "--config", str(cfg)])
            digests.append((tmp_path / f"{sub}-{fam}" / "summary.json").read_bytes())
        same[f"{sub}/{fam}"] = digests[0] == digests[1]
    ok = all(same.values())
    assert record_criterion(10, ok, "byte-identical summary.json on rerun: " +
                            ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in same.items()))


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
