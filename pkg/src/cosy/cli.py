"""Command-line pipeline: simulate a scene, solve it, evaluate the result.

Subcommands
    simulate  write models / observations / ground-truth files for a synthetic scene
    solve     observations -> matching -> refinement -> estimate file
    eval      score an estimate against ground truth, optional before/after table
    report    render an eval output file as readable text

All randomness flows from --seed: subsystem generators are seeded by
stable hashes of it, so reruns are byte-identical and --threads never
changes results. Timing is printed to stdout and kept out of output
files for the same reason.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .evaluation import (
    DEFAULT_AUC_MAX,
    DEFAULT_DIAMETER_FRACTION,
    DEFAULT_NMS_RADIUS,
    PosePrediction,
    evaluate,
    nms_3d,
)
from .matching import MatchParams, build_match_graph, extract_physical_objects
from .refinement import (
    RefineConfig,
    SceneState,
    express_in_camera_frames,
    refine_best_of,
    total_loss,
)
from .scene_io import (
    EstimatedCamera,
    EstimatedObject,
    InvariantError,
    ParseError,
    SceneEstimate,
    SceneObservations,
    SchemaError,
    UnknownLabelError,
    dump_json,
    load_estimate,
    load_json,
    load_models,
    load_observations,
    save_estimate,
    save_models,
    save_observations,
)
from .simulation import (
    NoiseModel,
    ScenarioConfig,
    generate_observations,
    generate_scene,
    load_ground_truth,
    make_models,
    save_ground_truth,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_SCENE = 3

_CONFIG_ERRORS = (
    ValueError,
    KeyError,
    OSError,
    ParseError,
    SchemaError,
    InvariantError,
    UnknownLabelError,
)


def derive_seed(seed: int, stream: str) -> int:
    """Stable 63-bit child seed for a named subsystem."""
    digest = hashlib.blake2b(f"{seed}:{stream}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


@dataclass
class RunConfig:
    """One subcommand invocation's full configuration.

    `echo` is the flat flag dictionary written into output files for
    provenance; it holds everything that can influence the result (so
    not --threads, which is result-neutral by construction).
    """

    command: str
    seed: int | None = None
    paths: dict[str, str] = field(default_factory=dict)
    scenario: ScenarioConfig | None = None
    noise: NoiseModel | None = None
    match: MatchParams | None = None
    refine: RefineConfig | None = None
    min_score: float = 0.3
    nms_radius: float = DEFAULT_NMS_RADIUS
    restarts: int = 4
    threads: int = 1
    diameter_fraction: float = DEFAULT_DIAMETER_FRACTION
    auc_max: float = DEFAULT_AUC_MAX
    compare_fraction: float = 0.5
    echo: dict = field(default_factory=dict)


# ----------------------------------------------------------------- simulate


def cmd_simulate(cfg: RunConfig) -> int:
    rng_obs = np.random.default_rng(derive_seed(cfg.seed, "observations"))
    db = make_models(
        cfg.scenario.model_labels,
        seed=derive_seed(cfg.seed, "models"),
        n_points=cfg.echo["n_points"],
        symmetric=tuple(cfg.echo["symmetric_labels"]),
        radius_range=tuple(cfg.echo["radius_range"]),
    )
    scene = generate_scene(cfg.scenario, db)
    obs, provenance = generate_observations(scene, cfg.noise, rng_obs)

    out = cfg.paths["out_dir"]
    os.makedirs(out, exist_ok=True)
    save_models(db, f"{out}/models.json")
    save_observations(obs, f"{out}/observations.json")
    save_ground_truth(scene, provenance, f"{out}/ground_truth.json")

    n_outliers = sum(1 for p in provenance if p < 0)
    print(
        f"scene: {cfg.scenario.n_views} views, {cfg.scenario.n_objects} objects, "
        f"{len(obs.candidates)} candidates ({n_outliers} outliers)"
    )
    print(f"wrote {out}/models.json, {out}/observations.json, {out}/ground_truth.json")
    return EXIT_OK


# -------------------------------------------------------------------- solve


def _diagnostic_estimate(cfg: RunConfig, stats: dict) -> SceneEstimate:
    return SceneEstimate(cameras=(), objects=(), config=dict(cfg.echo), stats=stats)


def cmd_solve(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    db = load_models(cfg.paths["models"])
    raw = load_observations(cfg.paths["observations"], db)
    keep_idx = [i for i, c in enumerate(raw.candidates) if c.score > cfg.min_score]
    obs = SceneObservations(
        views=raw.views, candidates=tuple(raw.candidates[i] for i in keep_idx)
    )
    t_load = time.perf_counter() - t0
    print(
        f"load: {len(raw.candidates)} candidates, {len(obs.candidates)} above "
        f"score {cfg.min_score} ({t_load:.3f}s)"
    )

    stats = {
        "n_candidates_raw": len(raw.candidates),
        "n_candidates": len(obs.candidates),
        "n_edges": 0,
        "n_components": 0,
        "n_inlier_members": 0,
        "n_objects": 0,
        "final_loss": None,
    }

    t0 = time.perf_counter()
    graph = build_match_graph(obs, db, cfg.match, threads=cfg.threads)
    objects = extract_physical_objects(graph)
    t_match = time.perf_counter() - t0
    stats["n_edges"] = len(graph.edges)
    stats["n_components"] = len(objects)
    print(f"match: {len(graph.edges)} edges, {len(objects)} components ({t_match:.3f}s)")
    if not objects:
        save_estimate(_diagnostic_estimate(cfg, stats), cfg.paths["out"])
        print("no physical objects recovered; wrote diagnostic estimate")
        return EXIT_NO_SCENE

    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # unreachable-view pruning is reported below
        state, kept, init_state = refine_best_of(
            objects, graph.hypotheses, obs, db, cfg.refine, n_starts=cfg.restarts
        )
    t_refine = time.perf_counter() - t0
    stats["n_components"] = len(kept)
    stats["n_inlier_members"] = sum(len(o.members) for o in kept)
    if not kept:
        save_estimate(_diagnostic_estimate(cfg, stats), cfg.paths["out"])
        print("all components lost to disconnected views; wrote diagnostic estimate")
        return EXIT_NO_SCENE
    final_loss = total_loss(state, kept, obs, db, cfg.refine)
    stats["final_loss"] = final_loss
    print(
        f"refine: {len(kept)} objects over {len(state.camera_poses)} cameras, "
        f"loss {final_loss:.6f} ({t_refine:.3f}s)"
    )

    # 3D non-max suppression on refined world poses, then per-view records.
    t0 = time.perf_counter()
    by_id = {o.id: o for o in kept}
    records = [
        EstimatedObject(
            object_id=f"P{o.id:03d}",
            label=o.label,
            pose_world=state.object_poses[o.id],
            score=sum(obs.candidates[i].score for _, i in o.members),
            members=tuple((v, keep_idx[i]) for v, i in o.members),
        )
        for o in kept
    ]
    surviving = nms_3d(records, radius=cfg.nms_radius)
    surviving_ids = {int(r.object_id[1:]) for r in surviving}
    final_objects = [by_id[i] for i in sorted(surviving_ids)]
    expressed = express_in_camera_frames(state, final_objects, obs)
    t_out = time.perf_counter() - t0
    stats["n_objects"] = len(surviving)
    stats["n_view_object_records"] = len(expressed)
    print(
        f"output: {len(surviving)} objects after nms, "
        f"{len(expressed)} view-object records ({t_out:.3f}s)"
    )

    cameras = tuple(
        EstimatedCamera(view_id=v, pose_world=state.camera_poses[v])
        for v in sorted(state.camera_poses)
    )
    est = SceneEstimate(
        cameras=cameras,
        objects=tuple(surviving),
        config=dict(cfg.echo),
        stats=stats,
    )
    save_estimate(est, cfg.paths["out"])
    print(f"wrote {cfg.paths['out']}")

    if cfg.paths.get("init_out"):
        init_records = tuple(
            EstimatedObject(
                object_id=r.object_id,
                label=r.label,
                pose_world=init_state.object_poses[int(r.object_id[1:])],
                score=r.score,
                members=r.members,
            )
            for r in surviving
        )
        init_cameras = tuple(
            EstimatedCamera(view_id=v, pose_world=init_state.camera_poses[v])
            for v in sorted(init_state.camera_poses)
        )
        init_est = SceneEstimate(
            cameras=init_cameras,
            objects=init_records,
            config=dict(cfg.echo),
            stats={"stage": "initialization"},
        )
        save_estimate(init_est, cfg.paths["init_out"])
        print(f"wrote {cfg.paths['init_out']}")
    return EXIT_OK


# --------------------------------------------------------------------- eval


def _predictions_from_estimate(est: SceneEstimate) -> list[PosePrediction]:
    """Per-view pose records: every estimated object in every camera."""
    preds = []
    for cam in est.cameras:
        inv = cam.pose_world.inverse()
        for obj in est.objects:
            preds.append(
                PosePrediction(
                    view_id=cam.view_id,
                    label=obj.label,
                    score=obj.score,
                    pose=inv.compose(obj.pose_world),
                )
            )
    return preds


def _ground_truth_records(scene, db) -> list[PosePrediction]:
    gts = []
    for vi, view in enumerate(scene.views):
        for oi in range(len(scene.object_labels)):
            gts.append(
                PosePrediction(
                    view_id=view.view_id,
                    label=scene.object_labels[oi],
                    score=1.0,
                    pose=scene.camera_frame_pose(vi, oi),
                )
            )
    return gts


def _metrics_doc(report) -> dict:
    doc = {
        "add": report.add,
        "adds": report.adds,
        "auc_adds": report.auc_adds,
        "recall_0p1d": report.recall_0p1d,
        "map_adds": report.map_adds,
        "n_gt": report.n_gt,
        "n_matched": report.n_matched,
        "n_predictions": report.n_predictions,
    }
    return doc


def cmd_eval(cfg: RunConfig) -> int:
    db = load_models(cfg.paths["models"])
    est = load_estimate(cfg.paths["estimate"])
    scene, _provenance = load_ground_truth(cfg.paths["ground_truth"], db)

    gts = _ground_truth_records(scene, db)
    preds = _predictions_from_estimate(est)
    report = evaluate(
        preds, gts, db, fraction=cfg.diameter_fraction, auc_max=cfg.auc_max
    )

    doc = {
        "aggregate": _metrics_doc(report),
        "per_label": {
            label: {
                "add": m.add,
                "adds": m.adds,
                "auc_adds": m.auc_adds,
                "recall_0p1d": m.recall_0p1d,
                "ap_adds": m.ap_adds,
                "n_gt": m.n_gt,
                "n_matched": m.n_matched,
                "n_predictions": m.n_predictions,
            }
            for label, m in sorted(report.per_label.items())
        },
        "config": dict(cfg.echo),
    }

    if cfg.paths.get("before"):
        # Stage comparison gates at a generous fraction of the diameter so
        # pre-refinement states (which rarely clear the strict recall gate)
        # still produce a number; wildly wrong poses count as misses.
        before_est = load_estimate(cfg.paths["before"])
        before_report = evaluate(
            _predictions_from_estimate(before_est),
            gts,
            db,
            fraction=cfg.compare_fraction,
            auc_max=cfg.auc_max,
        )
        after_report = evaluate(
            preds, gts, db, fraction=cfg.compare_fraction, auc_max=cfg.auc_max
        )
        before_mm = None if before_report.adds is None else before_report.adds * 1000.0
        after_mm = None if after_report.adds is None else after_report.adds * 1000.0
        reduction = None
        if before_mm and after_mm is not None:
            reduction = 100.0 * (1.0 - after_mm / before_mm)
        doc["comparison"] = {
            "before_adds_mm": before_mm,
            "after_adds_mm": after_mm,
            "before_matched": before_report.n_matched,
            "after_matched": after_report.n_matched,
            "gate_fraction": cfg.compare_fraction,
            "reduction_percent": reduction,
        }

    dump_json(doc, cfg.paths["out"])
    adds_mm = "n/a" if report.adds is None else f"{report.adds * 1000.0:.2f} mm"
    print(
        f"eval: ADD-S {adds_mm}, AUC {report.auc_adds:.4f}, "
        f"recall@0.1d {report.recall_0p1d:.4f}, mAP {report.map_adds:.4f}"
    )
    print(f"wrote {cfg.paths['out']}")
    return EXIT_OK


# ------------------------------------------------------------------- report


def _fmt(value, spec=".4f") -> str:
    return "n/a" if value is None else format(value, spec)


def cmd_report(cfg: RunConfig) -> int:
    doc = load_json(cfg.paths["input"])
    for key in ("aggregate", "per_label"):
        if key not in doc:
            raise SchemaError(f"{cfg.paths['input']}: missing '{key}'")
    agg = doc["aggregate"]
    lines = [
        "aggregate metrics",
        f"  ADD     : {_fmt(agg.get('add'))}",
        f"  ADD-S   : {_fmt(agg.get('adds'))}",
        f"  AUC     : {_fmt(agg.get('auc_adds'))}",
        f"  recall  : {_fmt(agg.get('recall_0p1d'))}",
        f"  mAP     : {_fmt(agg.get('map_adds'))}",
        f"  matched : {agg.get('n_matched')}/{agg.get('n_gt')} "
        f"({agg.get('n_predictions')} predictions)",
        "",
        f"{'label':<12} {'ADD-S':>10} {'AUC':>8} {'recall':>8} {'AP':>8} {'gt':>4}",
    ]
    for label, m in sorted(doc["per_label"].items()):
        lines.append(
            f"{label:<12} {_fmt(m.get('adds'), '.6f'):>10} "
            f"{_fmt(m.get('auc_adds')):>8} {_fmt(m.get('recall_0p1d')):>8} "
            f"{_fmt(m.get('ap_adds')):>8} {m.get('n_gt'):>4}"
        )
    if "comparison" in doc:
        comp = doc["comparison"]
        lines += [
            "",
            "refinement comparison (ADD-S, mm)",
            f"  before : {_fmt(comp.get('before_adds_mm'), '.2f')} "
            f"({comp.get('before_matched')} matched)",
            f"  after  : {_fmt(comp.get('after_adds_mm'), '.2f')} "
            f"({comp.get('after_matched')} matched)",
            f"  change : {_fmt(comp.get('reduction_percent'), '.1f')}% reduction",
        ]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if cfg.paths.get("out"):
        with open(cfg.paths["out"], "w", encoding="utf-8") as f:
            f.write(text)
        print(f"wrote {cfg.paths['out']}")
    return EXIT_OK


# ------------------------------------------------------------------ parsing


def _add_simulate(sub) -> None:
    p = sub.add_parser("simulate", help="generate a synthetic scene on disk")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-objects", type=int, default=6)
    p.add_argument("--n-views", type=int, default=4)
    p.add_argument("--n-labels", type=int, default=None,
                   help="distinct model labels (default: one per object)")
    p.add_argument("--box-size", type=float, default=0.5)
    p.add_argument("--camera-distance", type=float, nargs=2, default=(1.0, 1.5),
                   metavar=("MIN", "MAX"))
    p.add_argument("--n-points", type=int, default=48)
    p.add_argument("--radius-range", type=float, nargs=2, default=(0.03, 0.07),
                   metavar=("MIN", "MAX"))
    p.add_argument("--symmetric-labels", default="",
                   help="comma-separated labels given a continuous z symmetry")
    p.add_argument("--rot-sigma-deg", type=float, default=0.0)
    p.add_argument("--trans-sigma", type=float, default=0.0)
    p.add_argument("--depth-sigma-extra", type=float, default=0.0)
    p.add_argument("--miss-prob", type=float, default=0.0)
    p.add_argument("--outlier-prob", type=float, default=0.0)
    p.add_argument("--label-confusion-prob", type=float, default=0.0)


def _add_solve(sub) -> None:
    p = sub.add_parser("solve", help="reconstruct a consistent scene from observations")
    p.add_argument("--models", required=True)
    p.add_argument("--observations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--init-out", default=None,
                   help="also write the pre-refinement estimate here")
    p.add_argument("--min-score", type=float, default=0.3)
    p.add_argument("--inlier-threshold", type=float, default=0.02)
    p.add_argument("--ransac-max-iters", type=int, default=2000)
    p.add_argument("--min-inliers", type=int, default=3)
    p.add_argument("--lm-iters", type=int, default=100)
    p.add_argument("--truncation-px", type=float, default=25.0)
    p.add_argument("--damping-init", type=float, default=1e-4)
    p.add_argument("--damping-factor", type=float, default=10.0)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--symmetry-angles", type=int, default=64)
    p.add_argument("--nms-radius", type=float, default=DEFAULT_NMS_RADIUS)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--threads", type=int, default=1)


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="score an estimate against ground truth")
    p.add_argument("--models", required=True)
    p.add_argument("--estimate", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--before", default=None,
                   help="pre-refinement estimate for a before/after table")
    p.add_argument("--diameter-fraction", type=float,
                   default=DEFAULT_DIAMETER_FRACTION)
    p.add_argument("--auc-max", type=float, default=DEFAULT_AUC_MAX)
    p.add_argument("--compare-fraction", type=float, default=0.5,
                   help="matching gate (fraction of diameter) for the "
                        "before/after table")


def _add_report(sub) -> None:
    p = sub.add_parser("report", help="render an eval output as text")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cosy",
        description="multi-view object-pose scene reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    _add_solve(sub)
    _add_eval(sub)
    _add_report(sub)
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.command == "simulate":
        n_labels = args.n_labels if args.n_labels is not None else args.n_objects
        if n_labels < 1:
            raise ValueError("n_labels must be >= 1")
        labels = tuple(f"obj_{i:02d}" for i in range(n_labels))
        symmetric = tuple(s for s in args.symmetric_labels.split(",") if s)
        for s in symmetric:
            if s not in labels:
                raise ValueError(f"symmetric label {s!r} not among {labels}")
        scenario = ScenarioConfig(
            n_objects=args.n_objects,
            n_views=args.n_views,
            model_labels=labels,
            box_size=args.box_size,
            camera_distance_range=tuple(args.camera_distance),
            seed=derive_seed(args.seed, "scene"),
        )
        noise = NoiseModel(
            rot_sigma_deg=args.rot_sigma_deg,
            trans_sigma=args.trans_sigma,
            depth_sigma_extra=args.depth_sigma_extra,
            miss_prob=args.miss_prob,
            outlier_prob=args.outlier_prob,
            label_confusion_prob=args.label_confusion_prob,
        )
        echo = {
            "command": "simulate",
            "seed": args.seed,
            "n_objects": args.n_objects,
            "n_views": args.n_views,
            "n_labels": n_labels,
            "box_size": args.box_size,
            "camera_distance": list(args.camera_distance),
            "n_points": args.n_points,
            "radius_range": list(args.radius_range),
            "symmetric_labels": list(symmetric),
            "rot_sigma_deg": args.rot_sigma_deg,
            "trans_sigma": args.trans_sigma,
            "depth_sigma_extra": args.depth_sigma_extra,
            "miss_prob": args.miss_prob,
            "outlier_prob": args.outlier_prob,
            "label_confusion_prob": args.label_confusion_prob,
        }
        return RunConfig(
            command="simulate",
            seed=args.seed,
            paths={"out_dir": args.out_dir},
            scenario=scenario,
            noise=noise,
            echo=echo,
        )
    if args.command == "solve":
        match = MatchParams(
            inlier_threshold=args.inlier_threshold,
            max_iterations=args.ransac_max_iters,
            min_inliers=args.min_inliers,
            seed=derive_seed(args.seed, "match"),
            symmetry_angles=args.symmetry_angles,
        )
        refine_cfg = RefineConfig(
            max_iterations=args.lm_iters,
            truncation=args.truncation_px,
            damping_init=args.damping_init,
            damping_factor=args.damping_factor,
            rel_tol=args.rel_tol,
            seed=derive_seed(args.seed, "refine"),
            symmetry_angles=args.symmetry_angles,
        )
        if args.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if args.threads < 1:
            raise ValueError("threads must be >= 1")
        echo = {
            "command": "solve",
            "seed": args.seed,
            "min_score": args.min_score,
            "inlier_threshold": args.inlier_threshold,
            "ransac_max_iters": args.ransac_max_iters,
            "min_inliers": args.min_inliers,
            "lm_iters": args.lm_iters,
            "truncation_px": args.truncation_px,
            "damping_init": args.damping_init,
            "damping_factor": args.damping_factor,
            "rel_tol": args.rel_tol,
            "symmetry_angles": args.symmetry_angles,
            "nms_radius": args.nms_radius,
            "restarts": args.restarts,
        }
        paths = {
            "models": args.models,
            "observations": args.observations,
            "out": args.out,
        }
        if args.init_out:
            paths["init_out"] = args.init_out
        return RunConfig(
            command="solve",
            seed=args.seed,
            paths=paths,
            match=match,
            refine=refine_cfg,
            min_score=args.min_score,
            nms_radius=args.nms_radius,
            restarts=args.restarts,
            threads=args.threads,
            echo=echo,
        )
    if args.command == "eval":
        echo = {
            "command": "eval",
            "diameter_fraction": args.diameter_fraction,
            "auc_max": args.auc_max,
            "compare_fraction": args.compare_fraction,
        }
        paths = {
            "models": args.models,
            "estimate": args.estimate,
            "ground_truth": args.ground_truth,
            "out": args.out,
        }
        if args.before:
            paths["before"] = args.before
        return RunConfig(
            command="eval",
            paths=paths,
            diameter_fraction=args.diameter_fraction,
            auc_max=args.auc_max,
            compare_fraction=args.compare_fraction,
            echo=echo,
        )
    # report
    paths = {"input": args.input}
    if args.out:
        paths["out"] = args.out
    return RunConfig(command="report", paths=paths)


_COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, 0 on --help; keep those codes
        return int(exc.code or 0)
    try:
        cfg = _config_from_args(args)
        return _COMMANDS[cfg.command](cfg)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
