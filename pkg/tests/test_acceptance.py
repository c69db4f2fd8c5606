"""Acceptance gate: one test per criterion, each recorded as a PASS/FAIL line.

Criteria 7, 8 and 11 share one generated dataset and a cache of training runs,
all driven through the command-line interface. Expect ~20 minutes on one core.
"""

import csv
import math
import time

import numpy as np
import pytest

from conftest import record
from oracles import diameter_invariant_trials, diameter_oracle_trials, label_trials, pairing_trials, trapezoid_auc
from test_stm import as64, random_params, transcript
from stmixer import diffcore as dc
from stmixer.cli import gradcheck_model, main
from stmixer.dataprep import measure_diameter
from stmixer.dataset_io import load_dataset
from stmixer.hloss import HeadOutputs, HLossConfig, hloss, wce
from stmixer.metrics import cohen_kappa, roc_auc
from stmixer.model import ModelConfig, STMixerModel
from stmixer.stm import mix
from stmixer.trainer import TrainConfig, evaluate, lr_at
from stmixer.volume import Volume3D

DATASET_N, DATASET_SEED, EPOCHS = 2000, 42, 20
ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def dataset(workdir):
    out = workdir / "data"
    assert main(["synth", "--preset", "acceptance", "--n", str(DATASET_N), "--seed", str(DATASET_SEED),
                 "--out", str(out)]) == 0
    return out


class Runs:
    """Lazily trains (mixer, seed, tag) through the CLI and caches the outcome."""

    def __init__(self, workdir, dataset):
        self.workdir, self.dataset, self.done = workdir, dataset, {}

    def get(self, mixer, seed, tag="a"):
        key = (mixer, seed, tag)
        if key not in self.done:
            out = self.workdir / f"{mixer}-{seed}-{tag}"
            start = time.perf_counter()
            code = main(["train", "--dataset", str(self.dataset), "--out", str(out), "--mixer", mixer,
                         "--seed", str(seed), "--epochs", str(EPOCHS)])
            elapsed = time.perf_counter() - start
            assert code == 0
            rows = list(csv.DictReader((out / "metrics.csv").open()))
            self.done[key] = {"dir": out, "rows": rows, "seconds": elapsed,
                              "final": {k: float(v) for k, v in rows[-1].items()}}
        return self.done[key]


@pytest.fixture(scope="session")
def runs(workdir, dataset):
    return Runs(workdir, dataset)


def test_criterion_01_full_scale_results():
    record(1, None, "full-scale benchmark numbers need the original clinical data; criteria 2-11 substitute")
    pytest.skip("not reproducible at desk scale")


def test_criterion_02_full_model_gradients():
    start = time.perf_counter()
    err = gradcheck_model(seed=0, per_param=20)
    elapsed = time.perf_counter() - start
    ok = err < 1e-3 and elapsed < 60
    record(2, ok, f"max rel err {err:.2e} (< 1e-3), {elapsed:.1f} s (< 60 s), 20 entries per tensor, 51 tensors")
    assert ok


def test_criterion_03_stm_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        params = random_params(rng)
        F = [rng.normal(size=8) for _ in range(3)]
        got = mix(*(dc.constant(f) for f in F), params).data
        worst = max(worst, float(np.abs(got - transcript(*F, as64(params))).max()))
    ok = worst < 1e-5
    record(3, ok, f"max abs diff {worst:.2e} over 100 draws (< 1e-5)")
    assert ok


def test_criterion_04_alpha_zero_is_h2_wce():
    rng = np.random.default_rng(4)
    cfg = HLossConfig(alpha=0.0)
    worst = 0.0
    for _ in range(1000):
        scale = rng.uniform(0.1, 10)
        h1 = rng.normal(0, scale, 2).astype(np.float32)
        h2 = rng.normal(0, scale, 3).astype(np.float32)
        y = int(rng.integers(0, 3))
        got = hloss(HeadOutputs(dc.constant(h1), dc.constant(h2)), y, cfg).item()
        worst = max(worst, abs(got - wce(h2, y, cfg.h2_weights).item()))
    ok = worst < 1e-7
    record(4, ok, f"max |hloss(alpha=0) - wce_H2| {worst:.2e} over 1000 draws (< 1e-7)")
    assert ok


def test_criterion_05_diameter_oracle():
    worst, failures = diameter_oracle_trials(200, seed=5)
    unit = np.zeros((3, 3, 3), dtype=np.float32)
    unit[1, 1, 1] = 1
    block = np.zeros((4, 8, 8), dtype=np.float32)
    block[2, 2:5, 1:6] = 1
    fixtures = (measure_diameter(Volume3D(unit)).value_mm, measure_diameter(Volume3D(block)).value_mm)
    ok = not failures and fixtures == (1.0, 5.0)
    record(5, ok, f"worst rel err {worst:.2e} on 200 masks (< 5e-3), fixtures {fixtures} == (1.0, 5.0)")
    assert ok


def test_criterion_06_dataprep_properties():
    n = 10_000
    fails = {"pairing": pairing_trials(n, seed=6), "labeling": label_trials(n, seed=7),
             "diameter": diameter_invariant_trials(n, seed=8)}
    ok = not any(fails.values())
    record(6, ok, ", ".join(f"{k} {len(v)} failures" for k, v in fails.items()) + f" in {n} trials each")
    assert ok, {k: v[:3] for k, v in fails.items()}


def test_criterion_07_end_to_end_learning(dataset, runs):
    _, cases = load_dataset(dataset)
    val = [c for c in cases if c.split == "val"]
    untrained = evaluate(STMixerModel(ModelConfig(), seed=0), val)
    run = runs.get("stm", 0)
    final = run["final"]
    best = max(float(r["auc_h1"]) for r in run["rows"])
    ok = (final["auc_h1"] >= 0.85 and final["auc_h2_d"] >= 0.80 and abs(untrained.auc_h1 - 0.5) <= 0.05
          and len(run["rows"]) <= EPOCHS and run["seconds"] < 30 * 60)
    record(7, ok, f"final val AUC@H1 {final['auc_h1']:.3f} (>= 0.85, best {best:.3f}), "
                  f"AUC@H2-D {final['auc_h2_d']:.3f} (>= 0.80), untrained AUC@H1 {untrained.auc_h1:.3f}, "
                  f"{len(run['rows'])} epochs in {run['seconds'] / 60:.1f} min on {len(val)} val cases")
    assert ok


def test_criterion_08_ablation_direction(runs):
    stm = [runs.get("stm", s)["final"]["auc_h1"] for s in ABLATION_SEEDS]
    concat = [runs.get("concat", s)["final"]["auc_h1"] for s in ABLATION_SEEDS]
    ok = np.mean(stm) >= np.mean(concat) - 0.02
    record(8, ok, f"mean AUC@H1 STM {np.mean(stm):.3f} {np.round(stm, 3).tolist()} vs "
                  f"Concat {np.mean(concat):.3f} {np.round(concat, 3).tolist()} (STM >= Concat - 0.02)")
    assert ok


def test_criterion_09_schedule():
    cfg = TrainConfig()
    values = (lr_at(0, cfg), lr_at(5, cfg), lr_at(60, cfg))
    jump = abs(lr_at(5 - 1e-9, cfg) - lr_at(5 + 1e-9, cfg))
    ok = (values[0] == 1e-6 and math.isclose(values[1], 1.25e-4, rel_tol=0, abs_tol=1e-15)
          and values[2] == 0.0 and jump < 1e-12 and abs(lr_at(5, cfg) - cfg.peak_lr) < 1e-12)
    record(9, ok, f"lr(0)={values[0]:.3g} lr(5)={values[1]:.6g} lr(60)={values[2]:.3g}, jump at 5: {jump:.1e}")
    assert ok


def test_criterion_10_metric_oracles():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 60))
        y = rng.permutation(np.r_[[0, 1], rng.integers(0, 2, n - 2)])
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        worst = max(worst, abs(roc_auc(s, y) - trapezoid_auc(s, y)))
    kappa = cohen_kappa(["A", "A", "B", "B"], ["A", "B", "A", "B"])
    ok = worst < 1e-9 and kappa == 0.0
    record(10, ok, f"max |MW - trapezoid| {worst:.1e} over 500 trials (< 1e-9), kappa fixture {kappa}")
    assert ok


def test_criterion_11_determinism(runs):
    first = (runs.get("stm", 0)["dir"] / "metrics.csv").read_bytes()
    second = (runs.get("stm", 0, tag="b")["dir"] / "metrics.csv").read_bytes()
    ok = first == second
    record(11, ok, f"metrics CSVs of two identical runs {'are' if ok else 'are NOT'} byte-identical "
                   f"({len(first)} bytes)")
    assert ok
