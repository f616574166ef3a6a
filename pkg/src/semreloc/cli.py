"""Command-line entry point: ``semreloc simulate | build-map | relocalize | evaluate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import Config
from .dataset import Dataset, read_trajectory, write_dataset
from .errors import SemrelocError
from .mapfile import MapFile
from .pipeline import build_map, evaluate, load_results, relocalize, save_results
from .reloc import MODES, OK
from .simulator import SceneSpec, desk_mapping_scene, desk_query_scene, render_sequence

log = logging.getLogger("semreloc")

SCENES = {"desk-mapping": desk_mapping_scene, "desk-query": desk_query_scene}


def _config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.reloc.mode = args.mode
    cfg.validate()
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.scene in SCENES:
        kw = {"seed": cfg.seed}
        if args.frames is not None:
            kw["steps" if args.scene == "desk-mapping" else "n"] = args.frames
        scene = SCENES[args.scene](**kw)
    else:
        scene = SceneSpec.from_dict(json.loads(Path(args.scene).read_text()))
        if args.seed is not None:
            scene.seed = args.seed
    t0 = time.perf_counter()
    frames = render_sequence(scene, workers=args.workers)
    write_dataset(args.out, frames, scene.camera, scene=scene.to_dict())
    log.info("rendered %d frames in %.1f s", len(frames), time.perf_counter() - t0)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_build_map(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    mp = build_map(args.dataset, cfg, workers=args.workers, with_voxels=not args.no_voxels)
    mp.save(args.out)
    log.info("mapped in %.1f s", time.perf_counter() - t0)
    print(f"wrote {len(mp)} objects to {args.out}")
    return 0


def cmd_relocalize(args) -> int:
    cfg = _config(args)
    mp = MapFile.load(args.map)
    t0 = time.perf_counter()
    results = relocalize(args.dataset, mp, cfg, workers=args.workers)
    save_results(args.out, results)
    ok = sum(r.status == OK for r in results)
    log.info("relocalized in %.1f s", time.perf_counter() - t0)
    print(f"{ok}/{len(results)} frames relocalized; results in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    gt_path = Path(args.groundtruth)
    gt = Dataset.open(gt_path).groundtruth() if gt_path.is_dir() else read_trajectory(gt_path)
    report = evaluate(load_results(args.results), gt, cfg)
    if args.out:
        report.save(args.out)
    print(report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semreloc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")

    s = sub.add_parser("simulate", help="render a synthetic dataset")
    s.add_argument("--scene", default="desk-mapping", help=f"one of {sorted(SCENES)} or a scene JSON file")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    common(s)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("build-map", help="build an object map from a posed dataset")
    b.add_argument("dataset")
    b.add_argument("--out", required=True)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--no-voxels", action="store_true", help="skip the voxel sidecar")
    common(b, seed=False)
    b.set_defaults(func=cmd_build_map)

    r = sub.add_parser("relocalize", help="relocalize query frames against a map")
    r.add_argument("dataset")
    r.add_argument("--map", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=MODES, default=None)
    r.add_argument("--workers", type=int, default=1)
    common(r)
    r.set_defaults(func=cmd_relocalize)

    e = sub.add_parser("evaluate", help="compare relocalization results with ground truth")
    e.add_argument("results")
    e.add_argument("--groundtruth", required=True, help="dataset directory or groundtruth.txt")
    e.add_argument("--out", default=None)
    common(e, seed=False)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SemrelocError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
