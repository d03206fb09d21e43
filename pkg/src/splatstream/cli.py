"""Command-line front end: scene generation, training, streaming
simulation, built-in oracle checks and run reports.

Errors from the library surface as a single ``ERR:<CODE>: message`` line
on stderr with a nonzero exit status.
"""

import os as _os

# Honor the thread budget before any numeric backend spins up its pools.
_threads = _os.environ.get("SPLATSTREAM_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, codec, grouping, metrics, pruning, rasterizer, scene_gen, streamsim, train
from .config import RunConfig, thread_count
from .errors import MissingArtifactError, SplatStreamError
from .model import DeltaTensor, GaussianFrame, load_scene
from .scene_gen import SceneSpec


def _load_run_config(path):
    if path is None:
        return RunConfig()
    return RunConfig.from_json(Path(path).read_text())


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}")
    return path


def cmd_gen_scene(args) -> int:
    spec = SceneSpec(
        num_blobs=args.blobs,
        num_frames=args.frames,
        mover_fraction=args.movers,
        motion_amplitude=args.amplitude,
        appearance_frames=tuple(args.appear or ()),
        min_separation=args.separation,
        seed=args.seed,
    )
    cams = scene_gen.default_rig(count=args.cameras, resolution=(args.resolution, args.resolution))
    paths = scene_gen.write_scene(args.out, spec, cams)
    print(f"wrote scene: {paths['scene']}")
    print(f"wrote cameras: {paths['cameras']}")
    print(f"wrote spec: {paths['spec']}")
    return 0


def _load_scene_dir(scene_dir):
    scene_dir = Path(scene_dir)
    frames = load_scene(_require(scene_dir / "scene.gssc", "scene"))
    cams = scene_gen.load_cameras(_require(scene_dir / "cameras.json", "camera rig"))
    return frames, cams


def _targets_for(frames, cams):
    return [
        train.GroundTruth(images=tuple(rasterizer.render(f, cam).pixels for cam in cams))
        for f in frames
    ]


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if args.tau is not None:
        cfg = dataclasses.replace(cfg, tau_db=args.tau)
    frames, cams = _load_scene_dir(args.scene)
    targets = _targets_for(frames, cams)
    bounds = SceneSpec.from_json(Path(args.scene, "spec.json").read_text()).bounds \
        if Path(args.scene, "spec.json").exists() else scene_gen.DEFAULT_BOUNDS
    progress = print if args.verbose else None
    stream = grouping.build_groups(
        targets, cams, cfg.weights(), cfg.frame_config(), cfg.first_frame_config(),
        bounds, cfg.init_count, tau_db=cfg.tau_db, sh_degree=cfg.sh_degree,
        seed=cfg.seed, key_cfg=cfg.keyframe_config(), progress=progress,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(stream.plan.to_json())
    grouping.save_stream(out / "stream.npz", stream)
    (out / "run_config.json").write_text(cfg.to_json())
    qs = stream.qualities()
    print(f"trained {len(frames)} frames into {len(stream.plan.groups)} group(s); "
          f"quality {min(qs):.2f}..{max(qs):.2f} dB")
    print(f"wrote {out / 'plan.json'}")
    print(f"wrote {out / 'stream.npz'}")
    return 0


def cmd_simulate(args) -> int:
    run_dir = Path(args.run)
    stream = grouping.load_stream(_require(run_dir / "stream.npz", "trained stream"))
    cfg = _load_run_config(
        run_dir / "run_config.json" if (run_dir / "run_config.json").exists() else args.config
    )
    _, cams = _load_scene_dir(args.scene)
    if args.trace is not None:
        trace = streamsim.BandwidthTrace.from_csv(Path(args.trace).read_text())
    else:
        duration = len(stream.records) / cfg.target_rate_R
        trace = streamsim.BandwidthTrace.constant(args.bandwidth_mbps * 1e6, duration)
    progress = print if args.verbose else None
    report, _, log = streamsim.run_session(stream, cams, trace, cfg.sim_config(), progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    level_rows = pruning.levels_to_csv_rows([s for s in log.level_spaces if s is not None])
    with open(out / "pruning_levels.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "ratio", "quality_db", "size_bytes"])
        writer.writeheader()
        writer.writerows(level_rows)
    cdf = report.stall_cdf()
    print(f"streamed {len(report.frames)} frames, {report.total_bytes} bytes total")
    print(f"stall total {report.total_stall_s:.3f}s; "
          + ", ".join(f"{k}={v:.3f}s" for k, v in cdf.items()))
    print(f"wrote {out / 'report.json'}")
    print(f"wrote {out / 'report.csv'}")
    print(f"wrote {out / 'pruning_levels.csv'}")
    return 0


def _oracle_gradients(rng) -> str:
    from .camera import look_at

    n, width = 6, 17
    params = rng.normal(0, 0.3, (n, width))
    params[:, 7:10] = np.log(rng.uniform(0.05, 0.15, (n, 3)))
    frame = GaussianFrame(params=params, frame_index=0, group_key=0)
    cam = look_at((0, 0, -2.0), (0, 0, 0), focal=48.0, resolution=(32, 32))
    image, state = rasterizer.render_forward(frame, cam)
    d_image = rng.normal(size=image.shape)
    grad = rasterizer.render_backward(state, d_image)
    h = 1e-5
    checked = worst = 0
    for _ in range(40):
        i, j = int(rng.integers(n)), int(rng.integers(width))
        p_hi, p_lo = params.copy(), params.copy()
        p_hi[i, j] += h
        p_lo[i, j] -= h
        f_hi = np.sum(d_image * rasterizer.render_forward(frame.with_params(p_hi), cam)[0])
        f_lo = np.sum(d_image * rasterizer.render_forward(frame.with_params(p_lo), cam)[0])
        fd = (f_hi - f_lo) / (2 * h)
        denom = max(abs(fd), abs(grad[i, j]), 1e-6)
        worst = max(worst, abs(fd - grad[i, j]) / denom)
        checked += 1
    if worst > 1e-3:
        raise AssertionError(f"gradient mismatch: rel err {worst:.2e} over {checked} coords")
    return f"{checked} coords, max rel err {worst:.2e}"


def _oracle_selection(rng) -> str:
    from .pruning import PruningLevel, PruningLevelSpace, SelectionContext, select_pruning_level

    def linear_scan(space, ctx):
        q = space.qualities()
        previous = q[0] - q[1]
        keep = [0]
        for i in range(1, len(q)):
            drop = q[i - 1] - q[i]
            if drop / max(previous, 1e-12) > ctx.cliff_beta:
                break
            keep.append(i)
            previous = drop
        fits = [i for i in keep if space.levels[i].size_bytes <= ctx.budget_bytes]
        return min(fits) if fits else len(space.levels) - 1

    trials = 300
    for _ in range(trials):
        k = int(rng.integers(2, 12))
        drops = rng.uniform(0.01, 5.0, k - 1)
        qs = 60.0 - np.concatenate([[0.0], np.cumsum(drops)])
        sizes = np.sort(rng.integers(10, 5000, k))[::-1]
        sizes = np.unique(sizes)[::-1]
        if len(sizes) < 2:
            continue
        qs = qs[: len(sizes)]
        space = PruningLevelSpace(
            levels=tuple(
                PruningLevel(ratio=i / len(sizes), quality_db=float(q), size_bytes=int(s),
                             pruned_indices=())
                for i, (q, s) in enumerate(zip(qs, sizes))
            ),
            frame_index=0,
        )
        ctx = SelectionContext(bandwidth_B=float(rng.integers(100, 50000)), target_rate_R=1.0)
        got, want = select_pruning_level(space, ctx), linear_scan(space, ctx)
        if got != want:
            raise AssertionError(f"selection {got} != linear scan {want}")
    return f"{trials} random level spaces match the linear scan"


def _oracle_codec(rng) -> str:
    trials = 50
    for _ in range(trials):
        n = int(rng.integers(1, 40))
        params = rng.normal(0, 1.0, (n, 17))
        frame = GaussianFrame(params=params, frame_index=int(rng.integers(100)), group_key=0)
        decoded = codec.decode_frame(codec.AttributeImageSet.from_bytes(codec.encode_frame(frame).to_bytes()))
        spans = frame.params.max(axis=0) - frame.params.min(axis=0)
        tol = spans / (2**16 - 1) + 1e-12
        if np.any(np.abs(decoded.params - frame.params) > tol):
            raise AssertionError("attribute-image round trip exceeded one quantization step")
        step = 1e-6
        entries = {int(i): np.round(rng.normal(0, 0.1, 17) / step) * step
                   for i in rng.choice(n, size=min(n, 5), replace=False)}
        delta = DeltaTensor(base_count=n, param_width=17, entries=entries)
        payload = codec.encode_delta(delta, step)
        back = codec.decode_delta(payload, n, 17)
        for i, v in delta.entries.items():
            if np.any(v != 0) and np.max(np.abs(back.entries[i] - v)) > step / 2:
                raise AssertionError("delta round trip exceeded half a quantization step")
    return f"{trials} frame and delta round trips within quantization tolerance"


def _oracle_kernels(rng) -> str:
    from . import _kernels_py

    try:
        from . import _composite
    except ImportError:
        return "compiled kernels unavailable; numpy fallback in use (nothing to compare)"
    n, h, w = 8, 24, 24
    means2d = rng.uniform(2, 22, (n, 2))
    conics = np.zeros((n, 3))
    conics[:, 0] = rng.uniform(0.05, 0.3, n)
    conics[:, 2] = rng.uniform(0.05, 0.3, n)
    alphas = rng.uniform(0.2, 0.9, n)
    colors = rng.uniform(0, 1, (n, 3))
    bboxes = np.zeros((n, 4), dtype=np.int64)
    bboxes[:, 1] = h
    bboxes[:, 3] = w
    out_py = _kernels_py.forward(means2d, conics, alphas, colors, bboxes, h, w, True)
    out_cy = _composite.forward(means2d, conics, alphas, colors, bboxes, h, w, True)
    # float planes may differ by rounding order; integer decisions must not
    for a, b in zip(out_py[:2], out_cy[:2]):
        if np.max(np.abs(np.asarray(a) - np.asarray(b))) > 1e-12:
            raise AssertionError("compiled and numpy kernels disagree beyond rounding")
    for a, b in zip(out_py[2:], out_cy[2:]):
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            raise AssertionError("compiled and numpy kernels disagree on usage or masks")
    d_image = rng.normal(size=(h, w, 3))
    g_py = _kernels_py.backward(means2d, conics, alphas, colors, bboxes, h, w,
                                out_py[3], out_py[1], d_image)
    g_cy = _composite.backward(means2d, conics, alphas, colors, bboxes, h, w,
                               out_cy[3], out_cy[1], d_image)
    worst = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(g_py, g_cy))
    if worst > 1e-12:
        raise AssertionError(f"kernel backward mismatch {worst:.2e}")
    return f"forward within rounding, decisions exact; backward within {worst:.1e}"


def cmd_oracle_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    checks = [
        ("analytic-vs-finite-difference gradients", _oracle_gradients),
        ("pruning level selection vs linear scan", _oracle_selection),
        ("codec round trips", _oracle_codec),
        ("compiled vs numpy kernels", _oracle_kernels),
    ]
    failures = 0
    for name, fn in checks:
        try:
            detail = fn(rng)
            print(f"OK   {name}: {detail}")
        except AssertionError as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
    print(f"backend: {rasterizer.KERNEL_BACKEND}, threads: {thread_count()}")
    return 1 if failures else 0


def cmd_report(args) -> int:
    run_dir = Path(args.run) if args.run else None
    sim_dir = Path(args.sim) if args.sim else None
    if run_dir is None and sim_dir is None:
        raise MissingArtifactError("report needs --run and/or --sim")
    if run_dir is not None:
        stream = grouping.load_stream(_require(run_dir / "stream.npz", "trained stream"))
        plan = stream.plan
        print(f"training run: {run_dir}")
        print(f"  frames: {plan.frame_count}, groups: {len(plan.groups)}, tau: {plan.tau_db} dB")
        for g in plan.groups:
            space = stream.spaces[g.key]
            qs = [stream.records[t].quality_db for t in range(g.start, g.end + 1)]
            print(f"  group {g.key}: frames {g.start}..{g.end}, "
                  f"{space.frame.live_count()} live primitives, "
                  f"quality {min(qs):.2f}..{max(qs):.2f} dB")
        with open(run_dir / "quality.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["frame_index", "group_key", "is_keyframe", "quality_db"])
            writer.writeheader()
            for r in stream.records:
                writer.writerow({"frame_index": r.frame_index, "group_key": r.group_key,
                                 "is_keyframe": r.is_keyframe, "quality_db": r.quality_db})
        print(f"  wrote {run_dir / 'quality.csv'}")
    if sim_dir is not None:
        obj = json.loads(_require(sim_dir / "report.json", "simulation report").read_text())
        print(f"simulation: {sim_dir}")
        print(f"  frames: {len(obj['frames'])}, total {obj['total_bytes']} bytes, "
              f"mean quality {obj['mean_quality_db']:.2f} dB")
        cdf = obj["stall_cdf"]
        print("  stall: total {:.3f}s, ".format(obj["total_stall_s"])
              + ", ".join(f"{k}={cdf[k]:.3f}s" for k in sorted(cdf)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatstream",
        description="Train and stream time-varying Gaussian splat scenes.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write a synthetic ground-truth scene")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--blobs", type=int, default=4)
    p.add_argument("--frames", type=int, default=6)
    p.add_argument("--movers", type=float, default=0.25, help="fraction of blobs that drift")
    p.add_argument("--amplitude", type=float, default=0.08)
    p.add_argument("--appear", type=int, action="append",
                   help="frame index where a new blob appears (repeatable)")
    p.add_argument("--separation", type=float, default=0.45)
    p.add_argument("--cameras", type=int, default=3)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="fit keyframes and per-frame deltas")
    p.add_argument("--scene", required=True, help="directory from gen-scene")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="RunConfig JSON path")
    p.add_argument("--tau", type=float, help="override the grouping threshold (dB)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="stream a trained run over a bandwidth trace")
    p.add_argument("--run", required=True, help="directory from train")
    p.add_argument("--scene", required=True, help="scene directory (for the camera rig)")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="CSV with header time_s,bandwidth_mbps")
    p.add_argument("--bandwidth-mbps", type=float, default=1.0,
                   help="constant bandwidth when no trace is given")
    p.add_argument("--config", help="RunConfig JSON path (fallback if the run has none)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle-check", help="run built-in correctness oracles")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("report", help="summarize training and simulation artifacts")
    p.add_argument("--run", help="directory from train")
    p.add_argument("--sim", help="directory from simulate")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SplatStreamError as exc:
        print(f"ERR:{exc.code}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
