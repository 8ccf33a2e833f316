"""Quantitative evaluation: reconstruction coverage of dataset frames by
generated motion, per-frame visit histograms, PCA projections of latent
vectors, and CSV/manifest export.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import dataclass

import numpy as np

from catprior.errors import UsageError
from catprior.motion import MotionDataset
from catprior.nn import sample_categorical
from catprior.prior import MatchConfig, match_frame
from catprior.tracking import TrackingWeights, joint_pos_term, root_vel_term

# ------------------------------------------------------------------ reconstruction score
SCORE_COLUMNS = ["frame", "clip", "clip_frame", "score"]


@dataclass
class ScoreReport:
    scores: np.ndarray  # one per dataset frame, in (0, 1]
    threshold: float
    bins: np.ndarray  # histogram edges over [0, 1]
    counts: np.ndarray

    @property
    def ratio(self) -> float:
        """Fraction of dataset frames whose score exceeds the threshold."""
        return float((self.scores > self.threshold).mean())


def frame_pair_score(frames_a, frames_b, n_joints: int, w: TrackingWeights = TrackingWeights()) -> np.ndarray:
    """0.5 * joint-position term + 0.5 * root-velocity term, broadcast over leading axes."""
    J = n_joints
    a = np.asarray(frames_a)
    b = np.asarray(frames_b)
    jp = joint_pos_term(a[..., 3:3 + J], b[..., 3:3 + J], w)
    rv = root_vel_term(a[..., 3 + J:5 + J], a[..., 5 + J], b[..., 3 + J:5 + J], b[..., 5 + J], w)
    return 0.5 * jp + 0.5 * rv


def reconstruction_score(dataset: MotionDataset, pool: np.ndarray, threshold: float = 0.5,
                         chunk: int = 4096, n_bins: int = 20) -> ScoreReport:
    """Best score of every dataset frame against a pool of generated frames.

    The pool is scanned in chunks so memory stays bounded by
    ``chunk * n_dataset_frames``.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if pool.shape[0] == 0 or pool.size == 0:
        raise UsageError("frame pool is empty; generate frames before scoring")
    ref = dataset.all_frames
    if pool.shape[1] != ref.shape[1]:
        raise UsageError(f"pool frame width {pool.shape[1]} != dataset frame width {ref.shape[1]}")
    J = dataset.model.n_joints
    best = np.full(len(ref), -np.inf)
    for s in range(0, len(pool), chunk):
        sc = frame_pair_score(ref[:, None, :], pool[None, s:s + chunk, :], J)
        best = np.maximum(best, sc.max(axis=1))
    bins = np.linspace(0.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(best, bins=bins)
    return ScoreReport(best, threshold, bins, counts)


def score_rows(dataset: MotionDataset, report: ScoreReport) -> list[list]:
    rows = []
    for i, sc in enumerate(report.scores):
        c, t = dataset.unflat(i)
        rows.append([i, dataset.clips[c].clip_id, t, float(sc)])
    return rows


def sample_frame_pool(prior, latent_env, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Roll codes sampled from ``prior`` through ``latent_env`` and collect own-frame frames."""
    obs = latent_env.reset(rng)
    out = []
    total = 0
    while total < n_frames:
        codes = sample_categorical(prior.logits(obs), rng)
        done = latent_env.step_codes(codes, rng)
        fr, _ = latent_env.frames(0)
        out.append(fr.copy())
        total += len(fr)
        latent_env.reset_envs(np.flatnonzero(done), rng)
        obs = latent_env.observe_state()
    return np.concatenate(out)[:n_frames]


# ------------------------------------------------------------------ visit histograms
def visit_histogram(prior, latent_env, dataset: MotionDataset, steps: int, rng: np.random.Generator,
                    match: MatchConfig = MatchConfig()) -> np.ndarray:
    """Per-dataset-frame visit counts over ``steps`` generated states (unmatched states dropped)."""
    counts = np.zeros(dataset.n_frames, dtype=np.int64)
    obs = latent_env.reset(rng)
    done_steps = 0
    while done_steps < steps:
        codes = sample_categorical(prior.logits(obs), rng)
        done = latent_env.step_codes(codes, rng)
        fr, keys = latent_env.frames(0)
        take = min(len(fr), steps - done_steps)
        idx, _ = match_frame(fr[:take], keys[:take], dataset, match.threshold, match.weights)
        np.add.at(counts, idx[idx >= 0], 1)
        done_steps += take
        latent_env.reset_envs(np.flatnonzero(done), rng)
        obs = latent_env.observe_state()
    return counts


def visit_entropy(counts) -> float:
    """Shannon entropy (nats) of the normalized visit distribution."""
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        return 0.0
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum())


def min_max_ratio(counts) -> float:
    c = np.asarray(counts, dtype=np.float64)
    return float(c.min() / c.max()) if c.max() > 0 else 0.0


HISTOGRAM_COLUMNS = ["rank", "frame", "count_before", "count_after"]


def histogram_rows(before, after) -> list[list]:
    """Rows ordered by decreasing pre-shift count (stable on frame id)."""
    before = np.asarray(before)
    after = np.asarray(after)
    order = np.lexsort((np.arange(len(before)), -before))
    return [[r, int(i), int(before[i]), int(after[i])] for r, i in enumerate(order)]


# ------------------------------------------------------------------ projection
@dataclass
class Projection:
    coords: np.ndarray  # (N, 2)
    components: np.ndarray  # (2, dim), zero rows past the rank
    variances: np.ndarray  # (2,)
    rank: int


PROJECTION_COLUMNS = ["index", "pc1", "pc2"]


def latent_projection(vectors, tol: float = 1e-12) -> Projection:
    """Top-two principal components by covariance eigendecomposition.

    Each component's sign makes its largest-magnitude loading positive.
    With fewer than two non-degenerate directions the missing coordinate is 0.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise UsageError("need at least two vectors to project")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    rank = int((evals > tol * max(scale, 1.0)).sum())
    comps = np.zeros((2, x.shape[1]))
    var = np.zeros(2)
    for i in range(min(2, rank)):
        v = evecs[:, i]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps[i] = v
        var[i] = evals[i]
    return Projection(xc @ comps.T, comps, var, rank)


# ------------------------------------------------------------------ export
def digest(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha256(data).hexdigest()


def csv_text(columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def export_report(tables: dict[str, tuple[list[str], list[list]]], path, config_text: str,
                  seeds: dict[str, int], checkpoint_hashes: dict[str, str] | None = None) -> dict[str, str]:
    """Write one CSV per table plus ``manifest.txt``.  Returns file name -> sha256.

    The manifest lists the config hash, seeds, checkpoint hashes and the hash
    of every emitted CSV, one ``key = value`` pair per line.
    """
    os.makedirs(path, exist_ok=True)
    written = {}
    for name in sorted(tables):
        cols, rows = tables[name]
        for r in rows:
            if len(r) != len(cols):
                raise UsageError(f"table {name}: row width {len(r)} != {len(cols)} columns")
        text = csv_text(cols, rows)
        fname = f"{name}.csv"
        with open(os.path.join(path, fname), "w", newline="") as fh:
            fh.write(text)
        written[fname] = digest(text)
    lines = [f"config_hash = {digest(config_text)}"]
    lines += [f"seed.{k} = {v}" for k, v in sorted(seeds.items())]
    lines += [f"checkpoint.{k} = {v}" for k, v in sorted((checkpoint_hashes or {}).items())]
    lines += [f"file.{k} = {v}" for k, v in sorted(written.items())]
    manifest = "\n".join(lines) + "\n"
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write(manifest)
    written["manifest.txt"] = digest(manifest)
    return written
