"""End-to-end acceptance checks, one test per criterion.

Each test prints one ``[acceptance N] PASS|FAIL: ...`` line straight to the
terminal, bypassing pytest's output capture.
"""
import re
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import numeric_grad, qp_by_grid, random_batch, random_cbf_qp, random_scene, rel_err, v_interval
from stereocbf import cli
from stereocbf import errormodel as em
from stereocbf.geometry import CameraRig, RobotPose
from stereocbf.matching import reconstruct
from stereocbf.qp import kkt_residuals
from stereocbf.safety import barrier, cbf_qp, index_set, random_instance, robust_index_set
from stereocbf.scene import INVALID, Plane, Scene, TextureSpec, render_triple

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
C = 0.33


@pytest.fixture
def announce(capsys):
    def report(n, ok, detail):
        line = f"[acceptance {n}] {'PASS' if ok else 'FAIL'}: {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report


def _read_report(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        k, v = (x.strip() for x in line.split("=", 1))
        out[k] = v
    return out


# 1 -------------------------------------------------------------------------

def test_reconstruction_oracle(announce):
    rig = CameraRig()
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    exact = total = 0
    for _ in range(12):
        pose = RobotPose(0.0, rng.uniform(-0.1, 0.1), rng.uniform(-0.2, 0.2))
        _, gt = render_triple(random_scene(rng), pose, rig)
        m = ~gt.occlusion_mask & (gt.d13 != INVALID)
        recon = reconstruct(gt.d12, gt.d23, rig.d_max)
        exact += int(np.sum(recon[m] == gt.d13[m]))
        total += int(m.sum())
    elapsed = time.perf_counter() - t0
    ok = total > 0 and exact == total and elapsed < 10.0
    announce(1, ok, f"12 scenes, {exact}/{total} unoccluded pixels exact, {elapsed:.2f} s")


# 2 -------------------------------------------------------------------------

def test_gradient_check(announce):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        b = random_batch(rng, n=int(rng.integers(1, 12)))
        W = rng.normal(scale=0.5, size=(em.N_FEATURES, em.N_CLASSES))
        _, g = em.loss_and_grad(em.ErrorModelParams(W), b)
        worst = max(worst, rel_err(g, numeric_grad(W, b, h=1e-5)))
    announce(2, worst <= 1e-5, f"100 instances, max relative error {worst:.2e}")


# 3 -------------------------------------------------------------------------

def test_calibration(announce):
    """Stationary injected errors on a rendered wall; labels come from the reconstruction error."""
    rig = CameraRig()
    P = np.array([0.9, 0.08, 0.02, 0.0, 0.0])
    scene = Scene((Plane((1.0, 0, 0), (-1, 0, 0), TextureSpec("value_noise", seed=3)),))
    triple, gt = render_triple(scene, RobotPose(), rig)
    keep = ~gt.occlusion_mask
    rng = np.random.default_rng(303)
    params = em.ErrorModelParams.zeros()

    def frame():
        mag = rng.choice(em.N_CLASSES, size=gt.d13.shape, p=P)
        sign = rng.choice([-1, 1], size=gt.d13.shape)
        d_hat = np.where(keep, np.clip(gt.d13 + sign * mag, 0, rig.d_max), INVALID)
        return em.make_batch(triple.I1, triple.I3, d_hat, gt.d13)

    for _ in range(2000):
        params = em.sgd_step(params, frame(), 0.001)
    held_out = frame()
    pred = em.predict(params, held_out.features).mean(axis=0)
    freq = np.bincount(held_out.labels, minlength=em.N_CLASSES) / held_out.labels.size
    gap = float(np.max(np.abs(pred - freq)))
    announce(3, gap <= 0.03, f"predicted {np.round(pred, 3).tolist()} vs empirical "
                             f"{np.round(freq, 3).tolist()}, max gap {gap:.4f}")


# 4 -------------------------------------------------------------------------

def test_qp_correctness(announce):
    rng = np.random.default_rng(404)
    worst_kkt = worst_grid = 0.0
    mismatched_flags = checked = 0
    while checked < 1000:
        u_des, A, b = random_cbf_qp(rng)
        lo, hi = v_interval(A, b)
        v_star = min(max(u_des[0], lo), hi) if lo <= hi else None
        if v_star is not None and abs(v_star - u_des[0]) > 0.45:
            continue  # optimum outside the oracle's search box
        res = cbf_qp(u_des, A, b)
        g = qp_by_grid(u_des, A, b, step=1e-3)
        checked += 1
        if v_star is None or g is None:
            mismatched_flags += int(res.feasible or g is not None)
            continue
        if not res.feasible:
            mismatched_flags += 1
            continue
        worst_kkt = max(worst_kkt, max(kkt_residuals(res.u, u_des, A, b, res.qp.multipliers).values()))
        worst_grid = max(worst_grid, float(np.linalg.norm(res.u - g)))
    ok = worst_kkt <= 1e-8 and worst_grid <= 2e-3 and mismatched_flags == 0
    announce(4, ok, f"1000 instances, max KKT residual {worst_kkt:.1e}, max grid distance "
                    f"{worst_grid:.1e}, feasibility disagreements {mismatched_flags}")


# 5 -------------------------------------------------------------------------

def test_theorem_verifier(announce, capsys):
    code = cli.main(["check-theorem", "--trials", "10000", "--seed", "0"])
    out = capsys.readouterr().out
    fields = dict(re.findall(r"^(\w+) = (\S+)$", out, re.M))
    ok = (code == 0 and fields["trials"] == "10000" and fields["violations"] == "0"
          and int(fields["negative_control_violations"]) >= 1)
    announce(5, ok, f"violations {fields['violations']}/10000, negative control "
                    f"{fields['negative_control_violations']}/{fields['negative_control_trials']} violating")


# 6 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def three_way(tmp_path_factory):
    root = tmp_path_factory.mktemp("three_way")
    frames, model, out = root / "frames", root / "model.bin", root / "out"
    assert cli.main(["render-frames", "--config", str(CONFIGS / "pretrain_checker.conf"), "--out", str(frames),
                     "--count", "8", "--seed", "0"]) == 0
    assert cli.main(["pretrain", "--frames", str(frames), "--out", str(model), "--eta", "0.001",
                     "--epochs", "3000"]) == 0
    runs = {}
    for mode in ("naive", "robust-pretrained", "robust-online"):
        t0 = time.perf_counter()
        code = cli.main(["simulate", "--config", str(CONFIGS / "sphere_corrupted.conf"), "--mode", mode,
                         "--out", str(out), "--model", str(model)])
        runs[mode] = (code, time.perf_counter() - t0, _read_report(out / f"{mode}.report.txt"))
    return runs


def test_three_way_experiment(three_way, announce):
    lines, ok = [], True
    for mode, (code, wall, rep) in three_way.items():
        h_min, h_end, standoff = (float(rep[k]) for k in ("min_h_ns_true", "final_h_ns_true", "final_standoff"))
        if mode == "naive":
            good = h_min < 0
        elif mode == "robust-pretrained":
            good = h_min >= 0 and standoff >= C + 0.1 and code == 0
        else:
            good = C <= standoff <= C + 0.1 and h_min >= -0.01 and h_end >= 0
        good = good and wall < 60.0
        ok &= good
        lines.append(f"{mode}: min h {h_min:.4f}, standoff {standoff:.3f} m, {wall:.1f} s "
                     f"{'ok' if good else 'BAD'}")
    announce(6, ok, "; ".join(lines))


# 7 -------------------------------------------------------------------------

def test_containment(announce):
    rig = CameraRig()
    rng = np.random.default_rng(707)
    not_contained = unequal = 0
    for _ in range(1000):
        pose, rho_true, sets = random_instance(rng, rig)
        delta = float(rng.choice([0.0, 0.01, 0.1, 1.0]))
        lam = set(index_set(barrier(pose, rho_true, C), delta).tolist())
        lam_hat = set(robust_index_set(pose, sets, C, delta).tolist())
        not_contained += int(not lam <= lam_hat)
        # same pixels with zero-width intervals: each set is the single measured point
        exact = [em.uncertainty_set(rig, pose, s.pixel, s.d_hat, 0) for s in sets]
        points = np.array([s.measured for s in exact])
        lam = index_set(barrier(pose, points, C), delta)
        unequal += int(not np.array_equal(lam, robust_index_set(pose, exact, C, delta)))
    ok = not_contained == 0 and unequal == 0
    announce(7, ok, f"1000 instances, {not_contained} containment failures, "
                    f"{unequal} singleton mismatches")


# 8 -------------------------------------------------------------------------

SHORT_RUN = """
duration_s = 1.5
start_distance = 0.6
obstacle.0.kind = sphere
obstacle.0.center = 0.85, 0, 0
obstacle.0.radius = 0.25
obstacle.0.texture = value_noise
obstacle.0.texture.seed = 7
corruption.bias = 2
"""


def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(Path(directory).rglob("*")) if p.is_file()}


def _run_all(root: Path, capsys):
    root.mkdir()
    conf = root / "run.conf"
    conf.write_text(SHORT_RUN)
    stdout = {}

    def call(name, argv):
        code = cli.main(argv)
        stdout[name] = (code, capsys.readouterr().out)

    call("render-frames", ["render-frames", "--config", str(CONFIGS / "pretrain_checker.conf"),
                           "--out", str(root / "frames"), "--count", "3", "--seed", "4"])
    call("pretrain", ["pretrain", "--frames", str(root / "frames"), "--out", str(root / "model.bin"),
                      "--eta", "0.001", "--epochs", "20"])
    for mode in ("naive", "robust-pretrained", "robust-online", "robust-oracle"):
        call(mode, ["simulate", "--config", str(conf), "--mode", mode, "--out", str(root / "out"),
                    "--model", str(root / "model.bin"), "--seed", "5"])
    call("eval-stereo", ["eval-stereo", "--config", str(conf), "--frames", "2", "--steps-per-frame", "3"])
    call("check-theorem", ["check-theorem", "--trials", "30", "--seed", "9"])
    return stdout


def _normalise(text, root):
    return text.replace(str(root), "<root>")


def test_determinism(tmp_path, announce, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    out_a, out_b = _run_all(a, capsys), _run_all(b, capsys)
    files_a, files_b = _snapshot(a), _snapshot(b)
    differing = sorted(k for k in files_a.keys() | files_b.keys() if files_a.get(k) != files_b.get(k))
    differing += sorted(k for k in out_a if (out_a[k][0], _normalise(out_a[k][1], a))
                        != (out_b[k][0], _normalise(out_b[k][1], b)))
    ok = not differing and len(files_a) > 0
    announce(8, ok, f"{len(out_a)} CLI invocations, {len(files_a)} output files, "
                    f"differences: {differing or 'none'}")
