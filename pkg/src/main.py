import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables before importing other modules
load_dotenv()

from rich.console import Console
from rich.table import Table

from src.config import Config, load_config
from src.errors import ConfigError, FormatError, RigSplatError, UsageError
from src.gaussians import load_gaussians
from src.geometry import RigDelta, load_rig
from src.logger import setup_logging
from src import logger as stats_logger

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so every usage error maps to exit 2."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="rigsplat", description="Gaussian-splat view synthesis and rig-robustness benchmark")
    parser.add_argument("--config", default=os.getenv("RIGSPLAT_CONFIG"), help="TOML config file")
    parser.add_argument("--log-dir", default=os.getenv("RIGSPLAT_LOG_DIR", "logs"), help="Log directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress to the console")
    sub = parser.add_subparsers(dest="command")

    render = sub.add_parser("render", help="Render a scene through a (perturbed) rig")
    source = render.add_mutually_exclusive_group()
    source.add_argument("--seed", type=int, help="Synthetic scene seed")
    source.add_argument("--scene", help="Serialized GaussianSet file")
    render.add_argument("--rig", help="Rig description (JSON)")
    render.add_argument("--delta-pitch", type=float, default=0.0, help="Pitch delta in degrees")
    render.add_argument("--delta-height", type=float, default=0.0, help="Height delta in meters")
    render.add_argument("--delta-depth", type=float, default=0.0, help="Depth delta in meters")
    render.add_argument("--timestep", type=int, default=0, help="Scene timestep (seeded scenes)")
    render.add_argument("--reference", action="store_true", help="Use the dense reference rasterizer")
    render.add_argument("--against", help="Directory of cam<N>.raw renders to report PSNR against")
    render.add_argument("--output-dir", help="Where to write cam<N>.png / cam<N>.raw")

    grad = sub.add_parser("gradcheck", help="Finite-difference check of the rasterizer gradients")
    grad.add_argument("--scene-size", type=int, default=8, help="Number of Gaussians")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--image-size", type=int, default=16)
    grad.add_argument("--tolerance", type=float, default=1e-3)
    grad.add_argument("--perturb-analytic", type=float, default=0.0, help="Fault injection: scale analytic gradients")

    bench = sub.add_parser("bench", help="Run the unseen-rig benchmark")
    bench.add_argument("--seed", type=int, help="Run a single scene seed")
    bench.add_argument("--rigs", choices=("default", "superset", "subset"), help="Training-range preset")
    bench.add_argument("--workers", type=int, help="Worker processes over scene seeds")
    bench.add_argument("--output-dir", help="Report directory")
    bench.add_argument("--png", action="store_true", help="Also write synthesized views as PNG")

    fit = sub.add_parser("fit", help="Fit a LinearHead on the toy scene")
    fit.add_argument("--steps", type=int, default=200)
    fit.add_argument("--lr", type=float, default=0.01)
    fit.add_argument("--seed", type=int, default=0)
    return parser


def _seed_override(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.getenv("RIGSPLAT_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"RIGSPLAT_SEED must be an integer, got '{env}'", key="RIGSPLAT_SEED")
    return None


def cmd_render(args, config: Config) -> int:
    from src.harness import build_scene, psnr, resolve_rig
    from src.pipeline import render_rig
    from src.rasterizer import RenderSettings, read_raw

    rig = load_rig(args.rig) if args.rig else resolve_rig(config)
    delta = RigDelta(args.delta_pitch, args.delta_height, args.delta_depth)
    settings = RenderSettings.from_config(config.rasterizer)
    if args.scene:
        gaussians = load_gaussians(args.scene)
        posed = rig.perturbed(delta)
    else:
        seed = _seed_override(args.seed)
        scene = build_scene(seed if seed is not None else config.benchmark.seeds[0], cfg=config.scene)
        gaussians = scene.gaussians_at(args.timestep)
        posed = rig.perturbed(delta).at_ego_pose(scene.ego_pose(args.timestep))

    output_dir = args.output_dir or os.path.join(config.benchmark.output_dir, "render")
    os.makedirs(output_dir, exist_ok=True)
    views = render_rig(gaussians, posed, settings, reference=args.reference)
    for n, view in enumerate(views):
        view.save_png(os.path.join(output_dir, f"cam{n}.png"))
        view.save_raw(os.path.join(output_dir, f"cam{n}.raw"))
    console.print(f"✅ Wrote {len(views)} renders ({delta.label()}) to {output_dir}")

    if args.against:
        table = Table(title="PSNR against reference renders")
        table.add_column("camera")
        table.add_column("PSNR (dB)", justify="right")
        for n, view in enumerate(views):
            truth = read_raw(os.path.join(args.against, f"cam{n}.raw"))
            table.add_row(rig.names[n], f"{psnr(view.color, truth[..., :3]):.2f}")
        console.print(table)
    return EXIT_OK


def cmd_gradcheck(args, config: Config) -> int:
    from src.gradcheck import GROUPS, run_gradcheck

    result = run_gradcheck(args.scene_size, args.seed, args.image_size, args.tolerance, args.perturb_analytic)
    table = Table(title=f"Gradient check ({args.scene_size} Gaussians, seed {args.seed})")
    table.add_column("group")
    table.add_column("entries", justify="right")
    table.add_column("max rel err", justify="right")
    table.add_column("status")
    passed = result.group_passed()
    maxima = result.group_max()
    for group in GROUPS:
        table.add_row(group, str(len(result.group_rows(group))), f"{maxima[group]:.3e}", "pass" if passed[group] else "FAIL")
    console.print(table)
    if not result.passed:
        worst = result.worst()
        console.print(
            f"❌ Worst entry: {worst.group}{list(worst.index)} analytic={worst.analytic:.6e} "
            f"numeric={worst.numeric:.6e} rel_err={worst.rel_err:.3e}"
        )
        return EXIT_FAILED
    return EXIT_OK


def cmd_bench(args, config: Config) -> int:
    from src.harness import run_benchmark, write_report

    seed = _seed_override(args.seed)
    if seed is not None:
        config.benchmark.seeds = [seed]
    if args.rigs:
        config.ranges.preset = args.rigs
    if args.workers is not None:
        config.benchmark.workers = args.workers
    if args.output_dir:
        config.benchmark.output_dir = args.output_dir
    if args.png:
        config.benchmark.write_png = True

    report = run_benchmark(config)
    csv_path, summary_path = write_report(report, config.benchmark.output_dir)

    table = Table(title="Unseen-rig benchmark (means over seeds)")
    for column in ("setting", "PSNR", "cyclic", "distill", "feature err", "L2 avg", "collision avg"):
        table.add_column(column, justify="left" if column == "setting" else "right")
    for setting, means in report.setting_means().items():
        table.add_row(
            setting,
            f"{means['psnr']:.2f}",
            f"{means['cyclic']:.5f}",
            f"{means['distill']:.5f}",
            f"{means['feature_consistency']:.5f}",
            f"{means['l2_avg']:.3f}",
            f"{means['collision_avg']:.3f}",
        )
    console.print(table)
    console.print(f"✅ Report written to {csv_path} and {summary_path}")
    return EXIT_OK


def cmd_fit(args, config: Config) -> int:
    from src.train import build_fit_problem, fit_linear_head

    problem = build_fit_problem(args.seed)
    result = fit_linear_head(problem, steps=args.steps, lr=args.lr, seed=args.seed, log_path=stats_logger.STATS_FILE)
    table = Table(title="LinearHead fit")
    table.add_column("step", justify="right")
    table.add_column("objective", justify="right")
    for step in range(0, len(result.history), max(1, args.steps // 8)):
        table.add_row(str(step), f"{result.history[step]:.6f}")
    console.print(table)
    console.print(f"✅ Objective {result.initial:.6f} -> {result.final:.6f}")
    return EXIT_OK


COMMANDS = {"render": cmd_render, "gradcheck": cmd_gradcheck, "bench": cmd_bench, "fit": cmd_fit}


def run(argv: Optional[List[str]] = None) -> int:
    """Parses ``argv`` and runs one subcommand; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            build_parser().print_help()
            return EXIT_USAGE
        setup_logging(args.log_dir, verbose=args.verbose, console=True)
        config = load_config(args.config)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        suffix = f" (key: {e.key})" if e.key else ""
        console.print(f"❌ Error: {e}{suffix}")
        return EXIT_USAGE
    except (UsageError, FormatError) as e:
        console.print(f"❌ Error: {e}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        console.print(f"❌ Error: file not found: {e.filename}")
        return EXIT_USAGE
    except RigSplatError as e:
        logger.error(f"Command failed: {e}")
        console.print(f"❌ Error: {e}")
        return EXIT_FAILED


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
