"""Command-line entry point: ``amnerf build|render|ablate``.

Exit codes: 0 success, 1 usage error, 2 I/O or format error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .renderer import image_psnr, render_image, render_reference, write_ppm
from .scene import SceneError, load_scene
from .subdivision import TreeFormatError, build_kdtree, build_regular_grid, load_tree, save_tree

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("amnerf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _workers(v) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("workers must be >= 1")
    return n


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="amnerf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the scene's seed")
    common.add_argument("--workers", type=_workers, default=os.cpu_count() or 1)

    b = sub.add_parser("build", parents=[common], help="distill a tree from a scene file")
    b.add_argument("--scene", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--grid", type=int, default=None, help="regular r^3 grid instead of the adaptive tree")

    r = sub.add_parser("render", parents=[common], help="render a tree to a PPM image")
    r.add_argument("--tree", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--path", choices=("naive", "batched"), default="batched")
    r.add_argument("--no-hcheck", action="store_true", help="always descend to leaves")
    r.add_argument("--psnr-ref", action="store_true", help="also report PSNR against dense quadrature")
    r.add_argument("--camera", type=int, default=0)

    a = sub.add_parser("ablate", parents=[common], help="adaptive vs grid, HCheck on vs off")
    a.add_argument("--scene", required=True)
    a.add_argument("--grid", type=int, required=True)
    a.add_argument("--camera", type=int, default=None, help="single camera index (default: all)")
    return p


def _scene(args):
    cfg = load_scene(args.scene)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _pick_camera(cfg, idx):
    cams = cfg.camera_objects()
    if not 0 <= idx < len(cams):
        raise _Usage(f"camera index {idx} out of range (scene has {len(cams)})")
    return cams[idx]


class _Usage(Exception):
    pass


def _build(cfg, grid, workers):
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        if grid is not None:
            return build_regular_grid(cfg.teacher, cfg.domain, grid, cfg.build, executor=pool)
        return build_kdtree(cfg.teacher, cfg.domain, cfg.build, executor=pool)
    finally:
        if pool:
            pool.shutdown()


def cmd_build(args) -> int:
    cfg = _scene(args)
    if args.grid is not None and (args.grid < 1 or args.grid & (args.grid - 1)):
        raise _Usage(f"--grid must be a power of two, got {args.grid}")
    tree = _build(cfg, args.grid, args.workers)
    save_tree(tree, args.out)
    hist = tree.depth_histogram()
    print(f"nodes {tree.node_count}")
    print(f"leaves {len(tree.leaves())}")
    print("depth_histogram " + " ".join(f"{d}:{n}" for d, n in sorted(hist.items())))
    print(f"distill_iterations {tree.node_count * cfg.build.distill.iterations}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _scene(args)
    tree = load_tree(args.tree)
    if tree.arch != cfg.build.arch:
        log.warning("tree architecture %s differs from the scene's %s", tree.arch, cfg.build.arch)
    cam = _pick_camera(cfg, args.camera)
    hp = None if args.no_hcheck else cfg.hcheck(cam)
    img, st = render_image(tree, cam, hp, cfg.sampling, path=args.path, workers=args.workers,
                           background=cfg.render.background)
    write_ppm(img, args.out)
    print(f"rays {st.ray_count}")
    print(f"avg_samples_per_ray {st.avg_samples_per_ray:.4f}")
    print(f"total_samples {st.total_samples}")
    print(f"batches {st.batch_count}")
    print(f"max_batch {st.max_batch}")
    print(f"wall_ms {st.wall_ms:.1f}")
    if args.psnr_ref:
        ref = render_reference(cfg.teacher, cam, cfg.render.reference_steps,
                               background=cfg.render.background)
        print(f"psnr_db {image_psnr(img, ref):.4f}")
    return EXIT_OK


def ablation_rows(cfg, grid: int, workers: int = 1, cameras=None):
    """``(config, psnr_db, avg_samples_per_ray, batches, wall_ms)`` for the four setups.

    Both trees use the scene's build settings; stats are summed over cameras and
    PSNR is the mean over cameras.
    """
    cams = cfg.camera_objects() if cameras is None else cameras
    refs = [render_reference(cfg.teacher, c, cfg.render.reference_steps, background=cfg.render.background)
            for c in cams]
    trees = {"adaptive": _build(cfg, None, workers), "regular": _build(cfg, grid, workers)}
    rows = []
    for tname, tree in trees.items():
        for hname, on in (("hcheck", True), ("leaf", False)):
            psnr, samples, rays, batches, ms = 0.0, 0, 0, 0, 0.0
            for cam, ref in zip(cams, refs):
                img, st = render_image(tree, cam, cfg.hcheck(cam) if on else None, cfg.sampling,
                                       workers=workers, background=cfg.render.background)
                psnr += image_psnr(img, ref)
                samples += st.total_samples
                rays += st.ray_count
                batches += st.batch_count
                ms += st.wall_ms
            rows.append((f"{tname}+{hname}", psnr / len(cams), samples / max(rays, 1), batches, ms))
    return rows, trees


def cmd_ablate(args) -> int:
    cfg = _scene(args)
    if args.grid < 1 or args.grid & (args.grid - 1):
        raise _Usage(f"--grid must be a power of two, got {args.grid}")
    cams = None if args.camera is None else [_pick_camera(cfg, args.camera)]
    rows, trees = ablation_rows(cfg, args.grid, args.workers, cams)
    print(f"# nodes adaptive={trees['adaptive'].node_count} regular={trees['regular'].node_count}")
    print("config,psnr_db,avg_samples_per_ray,batches,wall_ms")
    for name, psnr, spr, nb, ms in rows:
        print(f"{name},{psnr:.4f},{spr:.4f},{nb},{ms:.1f}")
    return EXIT_OK


_COMMANDS = {"build": cmd_build, "render": cmd_render, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except _Usage as e:
        print(f"amnerf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneError, TreeFormatError, OSError) as e:
        print(f"amnerf: error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001 - last-resort mapping to the internal-error code
        print(f"amnerf: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
