"""Command-line entry points.

Exit codes: 0 success, 1 failed check, 2 safety violation in a mode that
promises safety, 3 configuration error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import errormodel as em
from .config import ConfigError, load_config
from .geometry import RobotPose
from .matching import reconstruct, reconstruction_error
from .safety import theorem_trials
from .scene import INVALID, render_triple, write_pgm
from .sim import MODES, emit_outputs, frame_maps, load_frames, pretrain, run_experiment

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_UNSAFE = 2
EXIT_CONFIG = 3


def approach_poses(cfg, count: int):
    """Poses along the straight approach covered by a run at the desired speed."""
    travel = max(cfg.start_distance - cfg.c, 0.0)
    xs = np.linspace(0.0, travel, count)
    return [RobotPose(float(x), 0.0, 0.0) for x in xs]


def random_poses(cfg, count: int, seed: int):
    """Seeded poses scattered around the approach: along-track, lateral and yaw jitter."""
    rng = np.random.default_rng(seed)
    travel = max(cfg.start_distance - cfg.c, 0.0)
    return [RobotPose(float(rng.uniform(-0.5, travel)), float(rng.uniform(-0.2, 0.2)),
                      float(rng.uniform(-0.2, 0.2))) for _ in range(count)]


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, {"mode": args.mode, "seed": args.seed})
    model = None
    if cfg.mode in ("robust-pretrained", "robust-online"):
        if args.model is None:
            raise ConfigError(f"--model is required for mode {cfg.mode}")
        model = em.load_model(args.model)
    log, report = run_experiment(cfg, model)
    paths = emit_outputs(log, report, args.out)
    sys.stdout.write(report.as_text())
    print(f"outputs = {paths['csv'].parent}")
    if report.safety_violated and cfg.mode != "naive":
        return EXIT_UNSAFE
    return EXIT_OK


def cmd_pretrain(args) -> int:
    frames = load_frames(args.frames)
    cfg = load_config(args.config) if args.config else None
    kw = {"match_cfg": cfg.match, "scales": cfg.scales} if cfg else {}
    params, loss = pretrain(frames, args.eta, args.epochs, **kw)
    em.save_model(args.out, params)
    print(f"frames = {len(frames)}")
    print(f"final_loss = {loss!r}")
    return EXIT_OK


def cmd_render_frames(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = approach_poses(cfg, args.count) if args.seed is None else random_poses(cfg, args.count, args.seed)
    for i, pose in enumerate(poses):
        triple, _ = render_triple(cfg.world, pose, cfg.rig)
        for k, img in enumerate((triple.I1, triple.I2, triple.I3), 1):
            write_pgm(out / f"frame{i:04d}.I{k}.pgm", img)
    print(f"frames = {args.count}")
    return EXIT_OK


def cmd_eval_stereo(args) -> int:
    cfg = load_config(args.config)
    rig = cfg.rig
    exact = total = 0
    hist = np.zeros(em.N_CLASSES)
    params = em.ErrorModelParams.zeros()
    probs, freqs = [], []
    for pose in approach_poses(cfg, args.frames):
        triple, gt = render_triple(cfg.world, pose, rig)
        recon = reconstruct(gt.d12, gt.d23, rig.d_max)
        m = ~gt.occlusion_mask
        exact += int(np.sum(recon[m] == gt.d13[m]))
        total += int(m.sum())
        d12, d23, d13 = frame_maps(triple, cfg.match)
        re = reconstruction_error(d13, reconstruct(d12, d23, rig.d_max))
        labels = em.error_classes(re[re != INVALID])
        hist += np.bincount(labels, minlength=em.N_CLASSES)
        feats = em.feature_map(triple.I1, triple.I3, d13, cfg.scales)
        for _ in range(args.steps_per_frame):
            params, _ = em.adapt_online(params, triple, None, cfg.eta, rig.d_max, cfg.scales,
                                        maps=(d12, d23, d13), features=feats)
        rows, cols = np.nonzero(re != INVALID)
        probs.append(em.predict(params, feats[rows, cols]).mean(axis=0))
        freqs.append(np.bincount(labels, minlength=em.N_CLASSES) / max(labels.size, 1))
    print(f"reconstruction_exact_fraction = {exact / max(total, 1)!r}")
    print(f"reconstruction_pixels = {total}")
    print("error_class_frequencies = " + ",".join(f"{x:.6f}" for x in hist / max(hist.sum(), 1)))
    print("mean_predicted_probabilities = " + ",".join(f"{x:.6f}" for x in probs[-1]))
    print(f"calibration_max_abs_gap = {float(np.max(np.abs(probs[-1] - freqs[-1]))):.6f}")
    return EXIT_OK


def cmd_check_theorem(args) -> int:
    n, bad = theorem_trials(args.trials, args.seed)
    print(f"trials = {n}")
    print(f"violations = {bad}")
    control_trials = max(1, min(args.trials, 1000))
    _, control_bad = theorem_trials(control_trials, args.seed, understate=0.0)
    print(f"negative_control_trials = {control_trials}")
    print(f"negative_control_violations = {control_bad}")
    ok = bad == 0 and control_bad >= 1
    print(f"result = {'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereocbf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one closed-loop experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", required=True, choices=MODES)
    s.add_argument("--out", required=True)
    s.add_argument("--model")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("pretrain", help="fit the error model on stored frame triples")
    s.add_argument("--frames", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eta", type=float, required=True)
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--config", help="optional run config supplying matcher and feature settings")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("eval-stereo", help="reconstruction oracle and calibration metrics")
    s.add_argument("--config", required=True)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--steps-per-frame", type=int, default=200)
    s.set_defaults(func=cmd_eval_stereo)

    s = sub.add_parser("check-theorem", help="randomised robust-implication verifier")
    s.add_argument("--trials", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_check_theorem)

    s = sub.add_parser("render-frames", help="write PGM image triples along the approach path")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--seed", type=int, help="scatter poses randomly instead of along the approach")
    s.set_defaults(func=cmd_render_frames)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
