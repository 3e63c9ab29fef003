"""Command line front end: dataset synthesis, pipeline runs, run reports."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .camera import CameraModel, parse_keyvalue
from .errors import ConfigError, SeamosaicError
from .pipeline import Pipeline, RunConfig
from .stream import RateBudget, StreamBroker
from .synthetic import (
    SceneSpec,
    TrajectorySpec,
    comex_like_specs,
    render_sequence,
)

logger = logging.getLogger(__name__)


def _build_synth_specs(path: Path):
    entries = parse_keyvalue(path.read_text())
    preset = entries.get("preset")
    if preset:
        n_frames = int(entries.get("n_frames", "121"))
        altitude = float(entries.get("altitude", "2.0"))
        if preset == "comex":
            return comex_like_specs(n_frames=n_frames, altitude=altitude)
        if preset == "comex_step":
            scene, traj, camera = comex_like_specs(
                n_frames=n_frames,
                altitude=altitude,
                terrain="two_level",
                step_height=0.5 * altitude,
            )
            return scene, traj, camera
        raise ConfigError(f"unknown preset {preset!r}")

    scene = SceneSpec(
        terrain=entries.get("terrain", "flat"),
        extent=(
            float(entries.get("extent_x", "30.0")),
            float(entries.get("extent_y", "1.2")),
        ),
        texture_seed=int(entries.get("texture_seed", "0")),
        blob_density=float(entries.get("blob_density", "120.0")),
        step_height=float(entries.get("step_height", "0.0")),
        step_position=float(entries.get("step_position", "0.0")),
        incline_deg=float(entries.get("incline_deg", "0.0")),
    )
    traj = TrajectorySpec(
        pattern=entries.get("pattern", "single_strip"),
        altitude=float(entries.get("altitude", "2.0")),
        speed=float(entries.get("speed", "0.1")),
        frame_rate=float(entries.get("frame_rate", "0.5")),
        overlap=float(entries.get("overlap", "0.8")),
    )
    camera = CameraModel(
        fx=float(entries.get("fx", "840.0")),
        fy=float(entries.get("fy", "840.0")),
        cx=float(entries.get("cx", "483.5")),
        cy=float(entries.get("cy", "363.5")),
        width=int(entries.get("width", "968")),
        height=int(entries.get("height", "728")),
    )
    return scene, traj, camera


def cmd_synth(args: argparse.Namespace) -> int:
    scene, traj, camera = _build_synth_specs(Path(args.scene))
    out = Path(args.out)
    print(f"rendering {scene.terrain} scene to {out} ...")
    start = time.perf_counter()
    dataset = render_sequence(scene, traj, camera, seed=args.seed)
    dataset.write(out)
    print(
        f"done: {len(dataset.images)} frames of {camera.width}x{camera.height} "
        f"in {time.perf_counter() - start:.1f}s"
    )
    config_lines = [
        "camera_path = camera.txt",
        "images_dir = images",
        "input_mode = replay_with_trajectory",
        "trajectory_path = trajectory.txt",
        "ahrs_path = ahrs.txt",
        "output_dir = runs",
        f"fps = {traj.frame_rate}",
        "fast = true",
    ]
    (out / "run.cfg").write_text("\n".join(config_lines) + "\n")
    print(f"wrote {out / 'run.cfg'}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    if args.fast:
        config.fast = True
    if args.batch:
        config.batch = True
    if args.run_name:
        config.run_name = args.run_name
    if args.listen:
        config.listen = args.listen

    broker = StreamBroker(
        budget=RateBudget(pose_hz=config.pose_hz, cloud_hz=config.cloud_hz)
    )
    server = None
    if config.listen:
        from .server import StreamServer

        host, _, port = config.listen.rpartition(":")
        pipeline = Pipeline(config, broker=broker)
        asset_dirs = {"/products": pipeline.run_dir}
        if args.viewer_assets:
            asset_dirs["/"] = Path(args.viewer_assets)
        server = StreamServer(
            broker, host=host or "127.0.0.1", port=int(port), asset_dirs=asset_dirs
        )
        server.start()
        print(f"stream service on ws://{server.host}:{server.port}/stream")
    else:
        pipeline = Pipeline(config, broker=broker)

    try:
        report = pipeline.run()
    finally:
        if server is not None and not args.keep_serving:
            server.stop()
    print(report.to_text())
    print(f"products in {pipeline.run_dir}")
    if server is not None and args.keep_serving:
        print("serving until interrupted ...")
        try:
            while True:
                time.sleep(1.0)
        except KeyboardInterrupt:
            server.stop()
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    report = run_dir / "report.txt"
    if not report.exists():
        print(f"no report.txt under {run_dir}", file=sys.stderr)
        return 1
    print(report.read_text())
    manifest = run_dir / "manifest.txt"
    if manifest.exists():
        print(manifest.read_text())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="seamosaic",
        description="Real-time seabed mapping pipeline: VO, plane fitting, "
        "2D mosaicing and planar point-cloud projection.",
    )
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the pipeline over a dataset")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--fast", action="store_true", help="no acquisition pacing")
    p_run.add_argument("--batch", action="store_true", help="terminate on tracking loss")
    p_run.add_argument("--listen", help="host:port for the stream service")
    p_run.add_argument("--run-name")
    p_run.add_argument("--viewer-assets", help="directory of viewer static files")
    p_run.add_argument(
        "--keep-serving", action="store_true",
        help="keep the stream service up after the run finishes",
    )
    p_run.set_defaults(func=cmd_run)

    p_synth = sub.add_parser("synth", help="render a synthetic dataset")
    p_synth.add_argument("--scene", required=True, help="scene spec file")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_report = sub.add_parser("report", help="print a run's report")
    p_report.add_argument("run_dir")
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except SeamosaicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
