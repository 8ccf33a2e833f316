"""Acceptance checks, one printed pass/fail line per criterion.

Criteria 1-5 and 10 are computed here.  Criteria 6-9 need hours of training;
they are produced by ``python3 scripts/acceptance_runs.py`` into
``acceptance/results.json`` and only read here (SKIP when absent).
"""

import json
import math
import os
import time

import numpy as np
import pytest

from catprior.evaluate import min_max_ratio, visit_entropy
from catprior.nn import ParamSet, backward, mlp_forward, sample_categorical
from catprior.prior import (
    DistillConfig, KinematicLatentEnv, PriorNet, ShiftConfig, SyntheticEncoder, distill_loss, distill_prior,
    shift_prior,
)
from catprior.quantizer import (
    Codebook, gaussian_kl_to_standard, onehot_kl_to_uniform, posterior_onehot, quantize, soft_posterior,
)
from catprior.rl import PpoConfig
from helpers import gradcheck, report
from test_cli import TINY, run_pipeline
from test_imitation import objective_gradcheck
from test_prior import clip_conditional
from test_upper import upper_gradcheck

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RESULTS = os.path.join(ROOT, "acceptance", "results.json")
RUN_CMD = "python3 scripts/acceptance_runs.py"


def heavy(stage: str):
    if not os.path.exists(RESULTS):
        return None
    with open(RESULTS) as fh:
        return json.load(fh).get(stage)


def distill_gradcheck(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = ParamSet.init([6, 10, 5], rng)
    x = rng.normal(size=(12, 6))
    y = rng.integers(0, 5, size=12)
    logits, tr = mlp_forward(net, x)
    _, g = distill_loss(y, logits)
    grads, _ = backward(tr, g)
    return gradcheck(lambda: distill_loss(y, mlp_forward(net, x)[0])[0], net.arrays(), grads, rng, 10)


def true_visits(prior, env, n_frames, steps, rng):
    """Per-frame visit counts by the synthetic env's own frame index.

    Frame matching cannot tell exact duplicate frames apart (a clip's rest
    poses), so the env's ground-truth index is used here instead.
    """
    counts = np.zeros(n_frames, dtype=np.int64)
    obs = env.reset(rng)
    for _ in range(steps // env.n_envs):
        done = env.step_codes(sample_categorical(prior.logits(obs), rng), rng)
        idx = env.true_index()
        np.add.at(counts, idx[idx >= 0], 1)
        env.reset_envs(np.flatnonzero(done), rng)
        obs = env.observe_state()
    return counts


class TestAcceptance:
    def test_1_gradients(self):
        t = time.time()
        seeds = range(100)
        worst = {
            "imitation": max(objective_gradcheck(s, normalized=s % 2 == 1) for s in seeds),
            "distillation": max(distill_gradcheck(s) for s in seeds),
            "task": max(upper_gradcheck(s) for s in seeds),
        }
        dt = time.time() - t
        ok = max(worst.values()) < 1e-4 and dt < 60
        report(1, "finite-difference gradients", ok,
               ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f" over 100 seeds each, {dt:.1f}s")
        assert ok

    def test_2_quantizer_oracle(self):
        t = time.time()
        rng = np.random.default_rng(0)
        mismatches = 0
        soft_err = 0.0
        for _ in range(1000):
            k, d = int(rng.integers(1, 65)), int(rng.integers(1, 17))
            book = Codebook(rng.standard_normal((k, d)))
            z = rng.standard_normal((1, d))
            brute = int(np.argmin([((z[0] - c) ** 2).sum() for c in book.codes]))
            onehot = np.eye(k)[brute]
            mismatches += int(quantize(book, z).index[0] != brute)
            mismatches += int(not np.array_equal(posterior_onehot(book, z)[0], onehot))
            soft_err = max(soft_err, float(np.abs(soft_posterior(book, z, 1e-8)[0] - onehot).max()))
        dt = time.time() - t
        ok = mismatches == 0 and soft_err <= 1e-6 and dt < 10
        report(2, "quantizer vs brute force", ok,
               f"1000 instances, {mismatches} mismatches, soft posterior max err {soft_err:.1e}, {dt:.1f}s")
        assert ok

    def test_3_constant_kl(self):
        t = time.time()
        rng = np.random.default_rng(0)
        exact = True
        for _ in range(500):
            k, d = int(rng.integers(1, 65)), int(rng.integers(1, 17))
            book = Codebook(rng.standard_normal((k, d)))
            kl = onehot_kl_to_uniform(posterior_onehot(book, rng.standard_normal((4, d))))
            exact &= bool(np.all(kl == math.log(k)))
        enc = ParamSet.init([5, 16, 2 * 3], rng)  # Gaussian encoder: mean and log std of a 3-d latent
        out = mlp_forward(enc, rng.standard_normal((50, 5)))[0]
        gkl = gaussian_kl_to_standard(out[:, :3], np.exp(out[:, 3:]))
        varies = bool(gkl.max() > gkl.min())
        dt = time.time() - t
        ok = exact and varies and dt < 10
        report(3, "one-hot KL constant, Gaussian KL varies", ok,
               f"one-hot KL == ln K on 2000 inputs: {exact}; Gaussian KL range [{gkl.min():.4f}, {gkl.max():.4f}], "
               f"{dt:.1f}s")
        assert ok

    def test_4_distillation_fit(self, two_skill_dataset):
        t = time.time()
        rng = np.random.default_rng(1)
        env = KinematicLatentEnv(two_skill_dataset, 64)
        prior = PriorNet.init(env.obs_dim, 8, (64, 64), rng)
        prior, _, _ = distill_prior(prior, env, SyntheticEncoder(clip_conditional), DistillConfig(iterations=400), rng)
        probe = KinematicLatentEnv(two_skill_dataset, 256)
        probe.reset(np.random.default_rng(123))
        tv = 0.5 * np.abs(prior.probs(probe.observe_state()) - clip_conditional(probe)).sum(axis=1)
        dt = time.time() - t
        ok = tv.max() < 0.05 and dt < 600
        report(4, "distillation total variation", ok,
               f"max TV {tv.max():.4f} (mean {tv.mean():.4f}) over 256 probe states, {dt:.1f}s")
        assert ok

    def test_5_prior_shift_flattens_visits(self, two_skill_dataset):
        t = time.time()
        ds = two_skill_dataset
        rng = np.random.default_rng(0)
        biased = np.array([0.31, 0.31, 0.31, 0.07 / 3, 0.07 / 3, 0.07 / 3, 0.0, 0.0])
        env = KinematicLatentEnv(ds, 64)
        prior = PriorNet.init(env.obs_dim, 8, (64, 64), rng)
        prior, _, _ = distill_prior(prior, env, SyntheticEncoder(lambda e: np.tile(biased, (e.n_envs, 1))),
                                    DistillConfig(iterations=300), rng)
        cfg = ShiftConfig(steps=150_000, window=20_000, ppo=PpoConfig(lr=1e-3))
        shifted, _, _ = shift_prior(prior, KinematicLatentEnv(ds, 64), ds, cfg, rng)

        def visits(p):
            return true_visits(p, KinematicLatentEnv(ds, 64), ds.n_frames, 20_000, np.random.default_rng(5))

        before, after = visits(prior), visits(shifted)
        n0 = len(ds.clips[0])
        imbalance = before[:n0].sum() / max(before[n0:].sum(), 1)
        h_ratio = visit_entropy(after) / math.log(ds.n_frames)
        r0, r1 = min_max_ratio(before), min_max_ratio(after)
        gain = r1 / r0 if r0 > 0 else (math.inf if r1 > 0 else 0.0)
        dt = time.time() - t
        ok = imbalance >= 9 and h_ratio >= 0.95 and gain >= 5 and dt < 1800
        report(5, "prior shifting flattens visits", ok,
               f"pre-shift imbalance {imbalance:.1f}:1, post entropy {h_ratio:.4f} ln N, min/max {r0:.3f} -> {r1:.3f} "
               f"({gain:.1f}x), {dt:.1f}s")
        assert ok

    def test_6_imitation(self):
        r = heavy("imitation")
        if r is None:
            report(6, "desk-scale imitation", None, f"no results; run `{RUN_CMD} --stages pipeline,imitation`")
            pytest.skip("heavy run not present")
        seeds = r["seeds"]
        steps = max(s["steps"] for s in seeds.values())
        ok = len(seeds) >= 3 and r["mean"] >= 0.6 and steps <= 2_000_000 and r["sampler_violations"] == 0
        per_seed = ", ".join(f"seed {k} {v['mean']:.3f}" for k, v in sorted(seeds.items()))
        report(6, "desk-scale imitation", ok,
               f"mean tracking {r['mean']:.3f} ({per_seed}) at {steps} steps; worst clip not max-p in "
               f"{r['sampler_violations']} of {r['sampler_rows']} refresh rows")
        assert ok

    def test_7_coverage(self):
        r = heavy("coverage")
        if r is None:
            report(7, "reconstruction coverage", None, f"no results; run `{RUN_CMD} --stages pipeline,coverage`")
            pytest.skip("heavy run not present")
        ok = r["pool_size"] >= 100_000 and r["ratio"] >= 0.9
        report(7, "reconstruction coverage", ok,
               f"{100 * r['ratio']:.1f}% of frames score > 0.5 with a {r['pool_size']}-frame pool")
        assert ok

    def test_8_kl_regularization(self):
        r = heavy("strike")
        if r is None:
            report(8, "KL weight ordering on strike", None, f"no results; run `{RUN_CMD} --stages pipeline,strike`")
            pytest.skip("heavy run not present")
        free, reg = r["alpha_0.0"], r["alpha_0.05"]
        ok = (len(free["runs"]) >= 3 and len(reg["runs"]) >= 3 and free["final_reward"] >= reg["final_reward"]
              and reg["mean_kl"] <= 0.5 * free["mean_kl"])
        report(8, "KL weight ordering on strike", ok,
               f"final reward {free['final_reward']:.4f} (alpha_kl 0) vs {reg['final_reward']:.4f} (0.05); "
               f"mean KL {free['mean_kl']:.4f} vs {reg['mean_kl']:.4f} (ratio {reg['mean_kl'] / free['mean_kl']:.2f})")
        assert ok

    def test_9_self_play(self):
        r = heavy("compete")
        if r is None:
            report(9, "self-play progress", None, f"no results; run `{RUN_CMD} --stages pipeline,compete`")
            pytest.skip("heavy run not present")
        ok = r["matches"] >= 100 and r["win_rate"] >= 0.7 and r["last_quartile_mean"] > r["first_quartile_mean"]
        report(9, "self-play progress", ok,
               f"final vs first pooled: {r['wins']}W {r['draws']}D {r['losses']}L (win rate {r['win_rate']:.2f}); "
               f"Elo last quartile {r['last_quartile_mean']:.0f} vs first {r['first_quartile_mean']:.0f}")
        assert ok

    def test_10_determinism(self, tmp_path):
        t = time.time()
        a = run_pipeline(tmp_path / "a", TINY)
        b = run_pipeline(tmp_path / "b", TINY)
        differ = sorted(k for k in a if a.get(k) != b.get(k))
        ok = sorted(a) == sorted(b) and not differ
        report(10, "byte-identical reruns", ok,
               f"{len(a)} files from all 9 stages compared, {len(differ)} differ, {time.time() - t:.1f}s")
        assert ok
