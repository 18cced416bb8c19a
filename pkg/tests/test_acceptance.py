"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The protocol runs (criteria 4 to 6) share one module-scoped fixture that
trains a teacher and six students per seed on the default experiment
configuration; expect roughly a quarter of an hour on one CPU core.
"""
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, TINY
from rffkd import cli, harness
from rffkd.config import ExperimentConfig
from rffkd.distill import (DistillConfig, distill_epoch, kl_loss, read_trace_csv, softened_probs,
                           supervised_epoch)
from rffkd.featurizer import StftParams, build_dataset, stft_magnitude
from rffkd.models import Student, StudentConfig, Teacher, TeacherConfig
from rffkd.numcore import finite_difference_check, ops
from rffkd.ppoctrl import clipped_objective, gae
from rffkd.sigmodel import ChannelConfig, DeviceFingerprint, apply_impairments, rician_gain
from test_numcore import _primitive_cases
from test_ppoctrl import gae_oracle

PROTOCOL_SEEDS = range(5)
# key biases get an identically zero gradient (softmax ignores per-query shifts);
# both sides must sit below this floor there, far under the 1e-5 step's roundoff
ZERO_GRAD = 1e-8


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---- 1. gradient correctness

def _model_loss(model, x, y):
    def loss_for(name):
        def loss(w):
            old = model.params
            model.params = {**old, name: w}
            try:
                return ops.cross_entropy(model(x), y) + model.reg_loss()
            finally:
                model.params = old
        return loss
    return loss_for


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    prim_err, e2e_err = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for _, f, x in _primitive_cases(rng):
            prim_err = max(prim_err, finite_difference_check(f, x, 1e-5))
        tcfg = TeacherConfig(input_dim=3, lstm_layers=1, lstm_hidden=2, attn_layers=1, attn_heads=2, model_dim=4,
                             num_classes=3, dropout_rate=0.0, reg_lambda=0.05)
        scfg = StudentConfig(channels=(2, 3), strides=(2, 1), num_classes=3, reg_lambda=0.1)
        for model, shape in ((Teacher(tcfg, rng), (2, 3, 3)), (Student(scfg, rng), (2, 6, 4))):
            x, y = rng.normal(size=shape), rng.integers(0, 3, size=2)
            loss_for = _model_loss(model, x, y)
            for name, p in model.params.items():
                e2e_err = max(e2e_err, finite_difference_check(loss_for(name), p.data.copy(), atol=ZERO_GRAD))
    wall = time.perf_counter() - t0
    verdict(1, prim_err < 1e-5 and e2e_err < 1e-4 and wall < 60,
            f"20 seeds, primitive max rel err {prim_err:.2e} < 1e-5, end-to-end {e2e_err:.2e} < 1e-4, {wall:.1f} s")


# ---- 2. oracle equivalence

def test_criterion_2_oracles():
    rng = np.random.default_rng(2)
    gae_err = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 11))
        r, v = rng.normal(size=n), rng.normal(size=n)
        vn, gamma, lam = rng.normal(), rng.uniform(0.5, 1), rng.uniform(0, 1)
        gae_err = max(gae_err, float(np.abs(gae(r, v, vn, gamma, lam) - gae_oracle(r, v, vn, gamma, lam)).max()))

    kappa = 0.2
    lr = np.log(np.linspace(0.5, 1.5, 11))
    adv = np.linspace(-2, 2, 9)
    new, a = np.repeat(lr, adv.size), np.tile(adv, lr.size)
    got = clipped_objective(new, np.zeros_like(new), a, kappa).data
    r = np.exp(new)
    closed = np.where(a >= 0, np.where(r > 1 + kappa, (1 + kappa) * a, r * a),
                      np.where(r < 1 - kappa, (1 - kappa) * a, r * a))
    grid_exact = bool(np.array_equal(got, closed))

    kl_err = 0.0
    for _ in range(20):
        t, s, tau = rng.normal(size=(4, 5)) * 3, rng.normal(size=(4, 5)) * 3, rng.uniform(0.5, 8)
        p, q = softened_probs(t, tau), softened_probs(s, tau)
        direct = np.mean([sum(pi * math.log(pi / qi) for pi, qi in zip(pr, qr)) for pr, qr in zip(p, q)])
        kl_err = max(kl_err, abs(kl_loss(t, s, tau, tau_squared=False).item() - direct))
    verdict(2, gae_err < 1e-12 and grid_exact and kl_err < 1e-12,
            f"GAE max err {gae_err:.1e} on 100 trajectories, clipped objective grid exact={grid_exact}, "
            f"KL max err {kl_err:.1e}")


# ---- 3. reductions

@pytest.fixture(scope="module")
def toy():
    fleet = [DeviceFingerprint(0, 0.6, 1.0, 50.0), DeviceFingerprint(1, 1.0, 4.0, 400.0)]
    ch = ChannelConfig(ricean_k=math.inf, noise_var=0.0, n_samples=512, los_phase=0.0)
    return build_dataset(fleet, ch, 30, np.random.default_rng(0))


def test_criterion_3_reductions(toy):
    scfg = StudentConfig(channels=(4, 8), strides=(2, 2), num_classes=2)
    cfg = DistillConfig()
    a, b = Student(scfg, np.random.default_rng(0)), Student(scfg, np.random.default_rng(0))
    teacher = Student(scfg, np.random.default_rng(9))
    opt_a, opt_b = cfg.optim.make(a.parameters()), cfg.optim.make(b.parameters())
    rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
    for _ in range(2):
        supervised_epoch(a, toy, opt_a, rng_a)
        distill_epoch(b, teacher, toy, 4.0, 0.0, opt_b, rng_b)
    identical = all(np.array_equal(v, b.params[k].data) for k, v in a.state_dict().items())

    s = Student(scfg, np.random.default_rng(1))
    clone = s.clone()
    opt = cfg.optim.make(s.parameters())
    kl = distill_epoch(s, clone, toy, 1.0, 1.0, opt, np.random.default_rng(0)).kl
    verdict(3, identical and kl < 1e-12,
            f"beta=0 weights bit-identical={identical}, clone teacher tau=1 epoch KL={kl:.1e}")


# ---- 4 to 6. protocol runs

@pytest.fixture(scope="module")
def protocol(tmp_path_factory):
    t0 = time.perf_counter()
    runs = []
    for seed in PROTOCOL_SEEDS:
        cfg = ExperimentConfig(seed=seed)
        out = tmp_path_factory.mktemp(f"protocol{seed}")
        report = harness.run_all(cfg, out)
        runs.append((cfg, out, report))
    return runs, time.perf_counter() - t0


def _mean(runs, label, field="test_accuracy"):
    return float(np.mean([getattr(r.models[label], field) for _, _, r in runs]))


def test_criterion_4_protocol(protocol):
    runs, wall = protocol
    teacher = [r.models["teacher"].test_accuracy for _, _, r in runs]
    nkd, dyn = _mean(runs, "nkd"), _mean(runs, "dynamic")
    fixed = {harness.mode_label("fixed", t): _mean(runs, harness.mode_label("fixed", t))
             for t in ExperimentConfig().fixed_taus}
    best_label = max(fixed, key=fixed.get)
    ok_a = min(teacher) >= 0.90
    ok_b = dyn >= nkd
    ok_c = dyn >= fixed[best_label] - 0.005
    verdict(4, ok_a and ok_b and ok_c and wall < 1800,
            f"{len(runs)} seeds; teacher min {min(teacher):.4f} >= 0.90: {ok_a}; dynamic {dyn:.4f} >= NKD {nkd:.4f}: "
            f"{ok_b}; dynamic >= best fixed {best_label} {fixed[best_label]:.4f} - 0.005: {ok_c}; {wall:.0f} s")


def test_criterion_5_controller(protocol):
    runs, _ = protocol
    in_range, sigma_ok, stable = True, True, 0
    spreads = []
    for cfg, out, report in runs:
        rows = read_controller(out / report.models["dynamic"].controller_trace)
        taus = np.array([r["tau"] for r in rows])
        ccfg = cfg.controller
        in_range &= bool(np.all((taus >= ccfg.tau_min) & (taus <= ccfg.tau_max)))
        above = [r["t"] for r in rows if r["val_acc"] > ccfg.a_base]
        if above:
            lo, hi = ccfg.sigma_clip
            sigma_ok &= all(lo <= r["sigma"] <= hi for r in rows if r["t"] > above[0])
        q = max(1, len(taus) // 4)
        first, last = float(np.std(taus[:q])), float(np.std(taus[-q:]))
        spreads.append(f"{first:.2f}->{last:.2f}")
        stable += last < first
    verdict(5, in_range and sigma_ok and stable >= 4,
            f"tau in range: {in_range}; sigma clamped after val > A_base: {sigma_ok}; "
            f"late tau std below early in {stable}/{len(runs)} seeds ({', '.join(spreads)})")


def read_controller(path):
    import csv
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def test_criterion_6_silhouette(protocol):
    runs, _ = protocol
    dyn, nkd = _mean(runs, "dynamic", "silhouette"), _mean(runs, "nkd", "silhouette")
    per_seed = ", ".join(f"{r.models['dynamic'].silhouette:.3f}/{r.models['nkd'].silhouette:.3f}" for _, _, r in runs)
    verdict(6, dyn > nkd, f"mean silhouette dynamic {dyn:.4f} vs NKD {nkd:.4f} (per seed dynamic/NKD: {per_seed})")


def test_protocol_report_consistent_with_traces(protocol):
    runs, _ = protocol
    for _, out, report in runs:
        for res in report.models.values():
            assert read_trace_csv(out / res.trace)[-1]["val_acc"] == res.final_val_accuracy
            counts = harness.read_confusion_csv(out / res.confusion_csv)
            assert np.trace(counts) / counts.sum() == res.test_accuracy


# ---- 7. determinism

def test_criterion_7_cli_determinism(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    capture = tmp_path / "cap.iq"
    capture.write_bytes(np.random.default_rng(0).normal(size=2 * 1024 * 4).astype("<f4").tobytes())
    verbs = [["synth"], ["featurize"], ["train-teacher"], ["distill", "--mode", "nkd"],
             ["distill", "--mode", "fixed", "--tau", "4"], ["distill", "--mode", "dynamic"], ["compare"],
             ["eval", "--checkpoint", "{out}/students/nkd.ckpt"],
             ["export-features", "--checkpoint", "{out}/teacher.ckpt", "--split", "val"]]
    dirs = [tmp_path / "a", tmp_path / "b"]
    codes = []
    for out in dirs:
        for verb in verbs:
            codes.append(cli.main(["--config", str(cfg), "--seed", "11", "--out", str(out)]
                                  + [v.format(out=out) for v in verb]))
        codes.append(cli.main(["--config", str(cfg), "--out", str(out / "ing"), "ingest", str(capture),
                               "--label", "0", "--frame-len", "1024"]))
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file() and p.name != "timing.json")
    same = [(dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in files]
    verdict(7, set(codes) == {0} and all(same),
            f"{len(verbs) + 1} commands run twice, exit codes {sorted(set(codes))}, "
            f"{sum(same)}/{len(files)} output files byte-identical")


# ---- 8. signal model

def test_criterion_8_signal_model():
    powers = {}
    for k in (0.0, 1.0, 10.0):
        rng = np.random.default_rng(int(k) + 7)
        phases = rng.uniform(0, 2 * math.pi, 100_000)
        hs = np.array([rician_gain(rng, k, los=complex(math.cos(p), math.sin(p))) for p in phases])
        powers[k] = float(np.mean(np.abs(hs) ** 2))
    rician_ok = all(abs(p - 1.0) <= 0.02 for p in powers.values())

    rng = np.random.default_rng(8)
    parseval = 0.0
    for w in (16, 32, 64, 256):
        s = rng.normal(size=4 * w) + 1j * rng.normal(size=4 * w)
        m = stft_magnitude(s, StftParams(w, w, "rectangular"))
        for col in range(4):
            energy = w * np.sum(np.abs(s[col * w:(col + 1) * w]) ** 2)
            parseval = max(parseval, abs(np.sum(m[:, col] ** 2) - energy) / energy)

    def fp(alpha=1.0, phi=2 * math.pi, f0=0.0):
        return DeviceFingerprint(0, alpha, phi, f0)

    b = np.random.default_rng(9).normal(size=(2, 16))
    cases = [
        (apply_impairments(b[0], b[1], fp(), np.arange(16) * 1e-6), b[0] + 0j),
        (apply_impairments(np.array([0.7]), np.array([0.3]), fp(f0=0.25), np.array([1.0])), np.array([-0.3j])),
        (apply_impairments(np.array([1.0]), np.array([1.0]), fp(alpha=0.9, phi=0.1, f0=0.125), np.array([1.0])),
         np.array([0.9 * math.cos(math.pi / 4 + 0.1) - 1j * math.sin(math.pi / 4)])),
    ]
    imp_err = max(float(np.abs(got - want).max()) for got, want in cases)
    verdict(8, rician_ok and parseval < 1e-9 and imp_err < 1e-12,
            "Rician E|H|^2 " + ", ".join(f"K={k:g}: {p:.4f}" for k, p in powers.items())
            + f"; Parseval rel err {parseval:.1e}; impairment max err {imp_err:.1e}")
