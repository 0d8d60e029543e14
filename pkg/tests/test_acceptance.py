"""End-to-end acceptance checks, one test per criterion."""

import os
import time

import numpy as np
import pytest

from gprompt import autodiff as ad
from gprompt.cli import main
from gprompt.gnn import GinModel, ProjectionHead, readout
from gprompt.prompt import PromptBasis, PromptState, apply_prompt, ecr, edit
from gprompt.rl import (
    PolicyBundle, Transition, TransitionBatch, clipped_surrogate, critic_loss, critic_value, discounted_returns,
    gae, ppo_loss_continuous, ppo_loss_discrete, reward,
)
from gprompt.theorem import judge, run_suite
from gprompt.trainer import smoke_experiment

from test_rl import gae_oracle, returns_oracle


def test_1_sufficiency_suite(criterion):
    t0 = time.perf_counter()
    trials = [t for t in run_suite(cases=200, necessity=0, max_nodes=8, layers=(1, 2, 3), seed=0)]
    elapsed = time.perf_counter() - t0
    ok_all, worst = judge(trials)
    counts = {k: sum(t["kind"] == k for t in trials) for k in worst}
    dims_ok = all(3 <= t["N"] <= 8 and 2 <= t["D"] <= 6 and t["L"] in (1, 2, 3) for t in trials)
    ok = (ok_all and dims_ok and elapsed < 30 and all(c == 200 for c in counts.values())
          and worst["feature"] <= 1e-12 and worst["structure"] <= 1e-8 and worst["component"] <= 1e-6)
    criterion(1, ok, f"max residual feature={worst['feature']:.1e} structure={worst['structure']:.1e} "
                     f"component={worst['component']:.1e}; {elapsed:.2f}s")
    assert ok


def test_2_necessity_suite(criterion):
    trials = run_suite(cases=0, necessity=100, seed=0)
    at = max(t["residual_at_forced"] for t in trials)
    off = min(t["residual_off"] for t in trials)
    ok = (len(trials) == 100 and at <= 1e-9 and off > 1e-3
          and all(t["offset_inf"] >= 0.1 and t["consistent_at_forced"] for t in trials))
    criterion(2, ok, f"max residual at delta*={at:.1e}, min residual off delta*={off:.1e}")
    assert ok


def _instances(seed):
    rng = np.random.default_rng(seed)
    n, d, hdim = int(rng.integers(4, 8)), 3, 5
    upper = np.triu(rng.random((n, n)) < 0.5, 1)
    A = (upper | upper.T).astype(float)
    X = rng.standard_normal((n, d))
    return rng, n, d, hdim, A, X


def _randomize_biases(rng, params):
    # zero-initialised biases put ReLU inputs exactly on the kink for inactive nodes
    for p in params:
        if p.name.endswith("bias"):
            p.value[...] = rng.normal(0.0, 0.5, p.value.shape)


def _gradient_checks(seed):
    rng, n, d, hdim, A, X = _instances(seed)
    errs = {}
    gin = GinModel(d, hidden=hdim, layers=2, dropout=0.0, seed=seed)
    head = ProjectionHead(hdim, 3, layers=2, hidden=4, dropout=0.0, seed=seed)
    _randomize_biases(rng, gin.parameters() + head.parameters())
    y = [int(rng.integers(3))]
    fn = lambda: ad.cross_entropy(head(readout(gin(X, A), "sum")), y)  # noqa: E731
    errs["gin+head"] = ad.grad_check(fn, gin.parameters() + head.parameters())

    basis = PromptBasis(4, d, basis=rng.standard_normal((4, d)), projections=rng.standard_normal((4, d)))
    fn = lambda: ad.cross_entropy(head(readout(gin(apply_prompt(X, basis(X)), A), "mean")), y)  # noqa: E731
    errs["prompt basis+projections"] = ad.grad_check(fn, basis.parameters())

    bundle = PolicyBundle(hdim, d, n, hidden=6, sigma=0.4, seed=seed)
    _randomize_biases(rng, bundle.parameters())
    ts = []
    for _ in range(5):
        state = rng.standard_normal((n, hdim))
        ts.append(Transition(state, np.ones(n), int(rng.integers(n)), np.zeros(d), rng.standard_normal(d) * 0.4,
                             np.zeros(d), float(-np.log(n) + rng.normal(0, 0.1)), float(rng.normal(-3, 0.3)),
                             0.0, 0.0, advantage=float(rng.standard_normal()), ret=float(rng.standard_normal())))
    batch = TransitionBatch.stack(ts)
    adv = batch.advantages
    errs["discrete actor"] = ad.grad_check(lambda: ppo_loss_discrete(bundle, batch, adv, 0.2, 0.01),
                                           bundle.discrete.parameters())
    errs["continuous actor"] = ad.grad_check(lambda: ppo_loss_continuous(bundle, batch, adv, 0.2, 0.01),
                                             bundle.continuous.parameters())
    errs["critic"] = ad.grad_check(lambda: critic_loss(critic_value(bundle, batch.states, batch.masks),
                                                       batch.returns), bundle.critic.parameters())
    return errs


def test_3_gradient_suite(criterion):
    worst = {}
    for seed in range(3):
        for k, v in _gradient_checks(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    ok = max(worst.values()) <= 1e-4
    criterion(3, ok, "max relative error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + " over 3 instances")
    assert ok


def test_4_rl_oracles(criterion):
    rng = np.random.default_rng(0)
    err = 0.0
    for T in range(1, 17):
        for _ in range(5):
            r, v = rng.standard_normal(T), rng.standard_normal(T + 1)
            err = max(err, np.max(np.abs(discounted_returns(r, 0.99) - returns_oracle(r, 0.99))),
                      np.max(np.abs(gae(r, v, 0.99, 0.95) - gae_oracle(r, v, 0.99, 0.95))))
    plateau = True
    clip = 0.2
    for kappa, sign in ((1 + 2 * clip, 1.0), (1 - 2 * clip, -1.0)):
        p = ad.parameter([[np.log(kappa)]])
        with ad.Tape() as tape:
            obj = clipped_surrogate(p, [[0.0]], [sign], clip)
        (g,) = tape.gradients(obj, [p])
        plateau &= g[0, 0] == 0.0 and abs(obj.item() - (1 + np.sign(kappa - 1) * clip) * sign) < 1e-12
    tele = 0.0
    for _ in range(50):
        T = int(rng.integers(1, 17))
        losses = rng.uniform(0, 3, T + 1)
        total = sum(reward(losses[t], losses[t + 1], rng.random(), 0.0) for t in range(T))
        tele = max(tele, abs(total - (losses[0] - losses[T])))
    ok = err <= 1e-10 and plateau and tele <= 1e-10
    criterion(4, ok, f"returns/GAE max error={err:.1e}, clip plateau={'ok' if plateau else 'broken'}, "
                     f"telescoping error={tele:.1e}")
    assert ok


def test_5_prompt_identities(criterion):
    rng = np.random.default_rng(0)
    same = True
    for _ in range(20):
        X = rng.standard_normal((6, 4))
        p1 = PromptBasis(1, 4, seed=int(rng.integers(1 << 30)))(X).value
        proj = np.tile(rng.standard_normal((1, 4)), (3, 1))
        p2 = PromptBasis(3, 4, basis=rng.standard_normal((3, 4)), projections=proj)(X).value
        same &= bool(np.all(p1 == p1[0]) and np.all(p2 == p2[0]))
    ecr_ok = True
    for _ in range(50):
        n = int(rng.integers(1, 9))
        s = PromptState.start(np.zeros((n, 2)))
        prev = ecr(s.counts)
        for v in rng.integers(0, n, 3 * n):
            s = edit(s, int(v), [0.1, 0.1])
            cur = ecr(s.counts)
            ecr_ok &= 0.0 <= prev <= cur <= 1.0
            ecr_ok &= (cur == 1.0) == bool(np.all(s.counts > 0))
            prev = cur
        full = PromptState.start(np.zeros((n, 2)))
        for v in range(n):
            full = edit(full, v, [0.0, 0.0])
        ecr_ok &= ecr(full.counts) == 1.0
    ok = same and ecr_ok
    criterion(5, ok, f"GPF degeneracy exact={same}, ECR bounded/monotone/full-coverage={ecr_ok}")
    assert ok


@pytest.mark.slow
def test_6_end_to_end_smoke(criterion):
    t0 = time.perf_counter()
    res = smoke_experiment(seeds=range(5))
    elapsed = time.perf_counter() - t0
    full = np.median([m["roc_auc"] for m in res["FULL"]])
    head = np.median([m["roc_auc"] for m in res["HEAD_ONLY"]])
    d_full = np.mean([m["mean_distinct_edited"] for m in res["FULL"]])
    d_noecr = np.mean([m["mean_distinct_edited"] for m in res["NO_ECR"]])
    ok = full >= 0.85 and full >= head + 0.02 and d_noecr < d_full and elapsed < 300
    criterion(6, ok, f"median test ROC-AUC FULL={full:.3f} HEAD_ONLY={head:.3f}; distinct edited nodes "
                     f"FULL={d_full:.3f} NO_ECR={d_noecr:.3f}; {elapsed:.0f}s")
    assert ok


TINY = """
epochs = 2
k = 3
h = 1
batch_size = 16
readout = mean
generator.graphs_per_class = 8
generator.min_nodes = 5
generator.max_nodes = 7
generator.feature_dim = 3
pretrain.epochs = 1
gin_hidden = 6
gin_layers = 2
"""

COMMANDS = [
    ["verify", "--cases", "20", "--necessity", "10"],
    ["gen"],
    ["pretrain"],
    ["train", "--dump-trajectories"],
    ["ablate"],
    ["sweep", "--seeds", "1,2"],
]


def test_7_determinism(criterion, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    compared, diffs = 0, []
    for cmd in COMMANDS:
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{cmd[0]}_{rep}"
            extra = [] if cmd[0] == "verify" else ["--config", str(cfg), "--seed", "5"]
            assert main(cmd + extra + ["--out", str(out)]) == 0
            outs.append(out)
        names = sorted(os.listdir(outs[0]))
        if names != sorted(os.listdir(outs[1])):
            diffs.append(f"{cmd[0]}: file sets differ")
            continue
        for f in names:
            compared += 1
            if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes():
                diffs.append(f"{cmd[0]}/{f}")
    ok = not diffs
    criterion(7, ok, f"{compared} output files compared across {len(COMMANDS)} commands"
                     + (f"; differing: {', '.join(diffs)}" if diffs else "; all byte-identical"))
    assert ok
