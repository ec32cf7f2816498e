"""Command-line harness: render, attack, the three study designs, viz and gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from itertools import combinations
from pathlib import Path

import numpy as np

from . import __version__, gradcheck, render, snowsim
from .attack import GROUPS, AttackConfig, attack, evaluate_transfer, aee
from .flowvictim import EstimatorConfig, estimate_flow
from .scenefmt import (FormatError, flow_to_color, load_scene, read_flo, write_atomic,
                       write_flo, write_ppm)

log = logging.getLogger("snowattack")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
AUTO = "auto"
VICTIMS = ("horn_schunck", "lucas_kanade")


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    def __init__(self, msg, line=None, source="<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + msg)
        self.line = line


# -- config ------------------------------------------------------------------

def _groups(text):
    items = [s.strip() for s in str(text).replace("+", ",").split(",") if s.strip()]
    bad = [s for s in items if s not in GROUPS]
    if bad or not items:
        raise ValueError(f"optimize must list groups from {', '.join(GROUPS)}")
    return ",".join(g for g in GROUPS if g in items)


def _auto_float(text):
    return AUTO if str(text).strip() == AUTO else float(text)


def _color(text):
    vals = tuple(float(x) for x in str(text).split(","))
    if len(vals) != 3 or not all(0 <= v <= 1 for v in vals):
        raise ValueError("flake_color needs three values in [0, 1]")
    return ",".join(repr(v) for v in vals)


def _defaults():
    a, e, d = AttackConfig(), EstimatorConfig(), snowsim.SnowDirection()
    return {
        "target": (str, a.target),
        "alpha_t": (float, a.alpha_t),
        "alpha_t1": (float, a.alpha_t1),
        "steps": (int, a.steps),
        "lr_delta": (float, a.lr_delta),
        "lr_w": (float, a.lr_w),
        "optimize": (_groups, ",".join(a.optimize)),
        "seed": (int, a.seed),
        "flakes": (int, 200),
        "fall_px": (float, 10.0),
        "flake_px": (float, 2.5),
        "snow_down": (float, d.down),
        "snow_right": (float, d.right),
        "snow_jitter": (float, d.jitter),
        "victim": (str, e.kind),
        "hs_lambda": (float, e.hs_lambda),
        "hs_iterations": (int, e.hs_iterations),
        "lk_window": (int, e.lk_window),
        "pyramid_levels": (int, e.pyramid_levels),
        "warps": (int, e.warps),
        "lk_eps": (float, e.lk_eps),
        "focus_depth": (_auto_float, AUTO),
        "aperture": (_auto_float, AUTO),
        "transparency_falloff": (_auto_float, AUTO),
        "visibility_softness": (float, render.RenderParams.visibility_softness),
        "transparency_near": (float, render.RenderParams.transparency_near),
        "flake_color": (_color, "1.0,1.0,1.0"),
    }


CONFIG_KEYS = tuple(_defaults())


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    spec = _defaults()
    out = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no, source)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in spec:
            raise ConfigError(f"unknown key {key!r}", no, source)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", no, source)
        try:
            out[key] = spec[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", no, source) from None
        try:
            _check_value(key, out[key])
        except ValueError as exc:
            raise ConfigError(str(exc), no, source) from None
    return out


def _check_value(key, value):
    if key == "steps" and value < 1:
        raise ValueError("steps must be >= 1")
    if key == "flakes" and value < 0:
        raise ValueError("flakes must be >= 0")
    if key == "victim" and value not in VICTIMS:
        raise ValueError(f"victim must be one of {', '.join(VICTIMS)}")


def load_config(path) -> dict:
    """Read a config file, or the embedded config of a run record (JSON)."""
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", source=str(path)) from None
    if text.lstrip().startswith("{"):
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad run record: {exc}", exc.lineno, str(path)) from None
        cfg = rec.get("config", rec)
        lines = "\n".join(f"{k} = {v}" for k, v in cfg.items())
        return parse_config(lines, str(path))
    return parse_config(text, str(path))


def resolve_config(raw: dict, scene, **overrides) -> dict:
    """Fill every key: defaults, then the file, then CLI overrides; ``auto``
    render settings are computed from the scene."""
    spec = _defaults()
    cfg = {k: d for k, (_, d) in spec.items()}
    cfg.update(raw)
    for k, v in overrides.items():
        if v is not None:
            _check_value(k, v)
            cfg[k] = v
    auto = render.RenderParams.for_scene(scene)
    for k in ("focus_depth", "aperture", "transparency_falloff"):
        if cfg[k] == AUTO:
            cfg[k] = float(getattr(auto, k))
    return cfg


def build(cfg: dict, scene):
    """Turn a resolved config into ``(AttackConfig, RenderParams, snowfield kwargs)``."""
    victim = EstimatorConfig(kind=cfg["victim"], hs_lambda=cfg["hs_lambda"],
                             hs_iterations=cfg["hs_iterations"], lk_window=cfg["lk_window"],
                             pyramid_levels=cfg["pyramid_levels"], warps=cfg["warps"],
                             lk_eps=cfg["lk_eps"])
    target = cfg["target"]
    if target != "zero_flow":
        target = read_flo(target)
    acfg = AttackConfig(target=target, alpha_t=cfg["alpha_t"], alpha_t1=cfg["alpha_t1"],
                        steps=cfg["steps"], lr_delta=cfg["lr_delta"], lr_w=cfg["lr_w"],
                        optimize=tuple(cfg["optimize"].split(",")), victim=victim, seed=cfg["seed"])
    params = render.RenderParams(
        focus_depth=cfg["focus_depth"], aperture=cfg["aperture"],
        visibility_softness=cfg["visibility_softness"],
        flake_color=tuple(float(x) for x in cfg["flake_color"].split(",")),
        transparency_near=cfg["transparency_near"], transparency_falloff=cfg["transparency_falloff"])
    snow = dict(direction=snowsim.SnowDirection(cfg["snow_down"], cfg["snow_right"], cfg["snow_jitter"]),
                fall_speed=snowsim.default_fall_speed(scene, cfg["fall_px"]),
                flake_size=snowsim.default_flake_size(scene, cfg["flake_px"]),
                seed=cfg["seed"], params=params)
    return acfg, params, snow


def make_field(scene, cfg: dict, params=None):
    _, params_b, snow = build(cfg, scene)
    snow["params"] = params or params_b
    return snowsim.init_snowfield(scene, cfg["flakes"], **snow)


# -- output helpers ----------------------------------------------------------

def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue().encode()


def _rel(path, start) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(start).resolve())).as_posix()


def _flow_images(flows: dict, out: Path) -> dict:
    """Color-code flows with one shared scale so the images are comparable."""
    scale = max(float(np.max(np.linalg.norm(f, axis=-1))) for f in flows.values())
    paths = {}
    for name, f in flows.items():
        p = out / f"flow_{name}.ppm"
        write_ppm(flow_to_color(f, scale if scale > 0 else None), p)
        paths[f"flow_{name}_color"] = p.name
    return paths


# -- commands ----------------------------------------------------------------

STAGE_SEQUENCE = (
    ("init", render.Stages(False, False, False, False)),
    ("scaling", render.Stages(True, False, False, False)),
    ("transparency", render.Stages(True, True, False, False)),
    ("blur", render.Stages(True, True, True, False)),
    ("occlusion", render.FULL),
)


def cmd_render(scene_dir, out_dir, config=None, seed=None, flakes=None) -> dict:
    scene = load_scene(scene_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve_config(load_config(config), scene, seed=seed, flakes=flakes)
    _, params, _ = build(cfg, scene)
    fld = make_field(scene, cfg, params)
    I_t, I_t1, _ = render.render_pair(scene, fld, params)
    write_ppm(I_t, out / "frame_t.ppm")
    write_ppm(I_t1, out / "frame_t1.ppm")
    artifacts = {"frame_t": "frame_t.ppm", "frame_t1": "frame_t1.ppm"}
    for i, (name, stages) in enumerate(STAGE_SEQUENCE):
        img, _ = render.render_frame_t(scene, fld, params, stages)
        p = out / f"stage_{i}_{name}.ppm"
        write_ppm(img, p)
        artifacts[f"stage_{name}"] = p.name
    if scene.gt_flow is not None:
        flow = snowsim.snow_ground_truth_flow(scene, fld, params)
        write_flo(flow, out / "snow_flow.flo")
        write_ppm(flow_to_color(flow), out / "snow_flow.ppm")
        artifacts.update(snow_flow="snow_flow.flo", snow_flow_color="snow_flow.ppm")
    else:
        log.warning("scene has no gt_flow.flo; skipping snow ground truth")
    write_atomic(out / "snowfield.json", _json_bytes(fld.to_dict()))
    artifacts["snowfield"] = "snowfield.json"
    record = {"command": "render", "version": __version__, "scene": _rel(scene_dir, out),
              "config": cfg, "seed": cfg["seed"], "artifacts": artifacts}
    write_atomic(out / "render_record.json", _json_bytes(record))
    return record


def run_attack(scene, scene_dir, cfg: dict, out_dir, field0=None):
    """One attack with all artifacts; returns ``(record, result)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    acfg, params, _ = build(cfg, scene)
    fld = field0 if field0 is not None else make_field(scene, cfg, params)
    res = attack(scene, fld, acfg, params)
    target = acfg.target_flow(scene.shape)
    clean = estimate_flow(scene.frame_t, scene.frame_t1, acfg.victim)
    write_ppm(res.frames[0], out / "attacked_t.ppm")
    write_ppm(res.frames[1], out / "attacked_t1.ppm")
    write_flo(res.flow, out / "flow_attacked.flo")
    write_flo(res.initial_flow, out / "flow_initial.flo")
    write_flo(target, out / "flow_target.flo")
    artifacts = {"attacked_t": "attacked_t.ppm", "attacked_t1": "attacked_t1.ppm",
                 "flow_attacked": "flow_attacked.flo", "flow_initial": "flow_initial.flo",
                 "flow_target": "flow_target.flo"}
    artifacts.update(_flow_images({"original": clean, "initial": res.initial_flow,
                                   "attacked": res.flow}, out))
    write_ppm(flow_to_color(target), out / "flow_target.ppm")
    artifacts["flow_target_color"] = "flow_target.ppm"
    steps = range(len(res.loss))
    gt = res.aee_gt if res.aee_gt else [float("nan")] * len(res.loss)
    write_atomic(out / "loss.csv", _csv_bytes(
        ["step", "loss", "aee_target", "penalty", "aee_gt"],
        zip(steps, res.loss, res.aee_target, res.penalty, gt)))
    artifacts["loss_curve"] = "loss.csv"
    write_atomic(out / "snowfield.json", _json_bytes(res.field.to_dict()))
    artifacts["snowfield"] = "snowfield.json"
    record = {
        "command": "attack", "version": __version__, "scene": _rel(scene_dir, out),
        "config": cfg, "seed": cfg["seed"],
        "trace": {"loss": res.loss, "aee_target": res.aee_target, "penalty": res.penalty,
                  "aee_gt": res.aee_gt},
        "metrics": {"initial_aee_target": res.initial_aee, "final_aee_target": res.final_aee,
                    "final_penalty": res.penalty[-1], "final_loss": res.loss[-1],
                    "clean_aee_target": aee(clean, target),
                    "final_aee_gt": res.aee_gt[-1] if res.aee_gt else None},
        "artifacts": artifacts,
    }
    write_atomic(out / "run_record.json", _json_bytes(record))
    return record, res


def cmd_attack(scene_dir, out_dir, config=None, seed=None, flakes=None, victim=None) -> dict:
    scene = load_scene(scene_dir)
    cfg = resolve_config(load_config(config), scene, seed=seed, flakes=flakes, victim=victim)
    record, _ = run_attack(scene, scene_dir, cfg, out_dir)
    return record


def replay(record_path):
    """Re-run an attack from its record; returns the AttackResult."""
    record_path = Path(record_path)
    rec = json.loads(record_path.read_text())
    scene = load_scene(record_path.parent / rec["scene"])
    cfg = resolve_config(load_config(record_path), scene)
    acfg, params, _ = build(cfg, scene)
    return attack(scene, make_field(scene, cfg, params), acfg, params)


def cmd_density_sweep(scene_dir, out_dir, counts, config=None, seed=None, victim=None) -> list:
    scene = load_scene(scene_dir)
    out = Path(out_dir)
    base = resolve_config(load_config(config), scene, seed=seed, victim=victim)
    rows = []
    for n in counts:
        cfg = dict(base, flakes=int(n))
        rec, _ = run_attack(scene, scene_dir, cfg, out / f"count_{n}")
        rows.append((int(n), rec["metrics"]["initial_aee_target"], rec["metrics"]["final_aee_target"]))
        log.info("count %d: AEE %.4f -> %.4f", *rows[-1])
    write_atomic(out / "density_sweep.csv", _csv_bytes(
        ["count", "aee_to_target_initial", "aee_to_target_final"], rows))
    return rows


ABLATION_ROWS = tuple(",".join(c) for k in (1, 2, 3) for c in combinations(GROUPS, k))


def cmd_ablation(scene_dir, out_dir, config=None, seed=None, flakes=None, victim=None) -> list:
    scene = load_scene(scene_dir)
    out = Path(out_dir)
    base = resolve_config(load_config(config), scene, seed=seed, flakes=flakes, victim=victim)
    rows, initial = [], None
    for groups in ABLATION_ROWS:
        label = groups.replace(",", "+")
        rec, _ = run_attack(scene, scene_dir, dict(base, optimize=groups), out / label)
        initial = rec["metrics"]["initial_aee_target"]
        rows.append((label, rec["metrics"]["final_aee_target"]))
        log.info("%s: %.4f", label, rows[-1][1])
    rows.insert(0, ("initial_snow", initial))
    write_atomic(out / "ablation.csv", _csv_bytes(["optimized", "aee_to_target"], rows))
    return rows


def cmd_transfer(scene_dir, out_dir, config=None, seed=None, flakes=None) -> list:
    scene = load_scene(scene_dir)
    out = Path(out_dir)
    base = resolve_config(load_config(config), scene, seed=seed, flakes=flakes)
    victims = {}
    for v in VICTIMS:
        acfg, _, _ = build(dict(base, victim=v), scene)
        victims[v] = acfg.victim
    rows = []
    for row in VICTIMS:
        cfg = dict(base, victim=row)
        acfg, params, _ = build(cfg, scene)
        rec, res = run_attack(scene, scene_dir, cfg, out / f"optimized_on_{row}")
        cells = []
        for col in VICTIMS:
            if col == row:
                cells.append(rec["metrics"]["final_aee_target"])
            else:
                cells.append(evaluate_transfer(scene, res.field, victims[col], acfg.target, params))
        rows.append((row, *cells))
    target = build(base, scene)[0].target_flow(scene.shape)
    rows.append(("no_snow", *(aee(estimate_flow(scene.frame_t, scene.frame_t1, victims[c]), target)
                              for c in VICTIMS)))
    for j, col in enumerate(VICTIMS):
        diag = rows[j][1 + j]
        for i, row in enumerate(VICTIMS):
            if i != j and rows[i][1 + j] < diag:
                log.info("transfer %s -> %s (%.4f) beats self-attack (%.4f)", row, col, rows[i][1 + j], diag)
    write_atomic(out / "transfer.csv", _csv_bytes(["optimized_on", *VICTIMS], rows))
    return rows


def cmd_gradcheck(out, seed=0, sizes=(16,), corrupt=0.0) -> dict:
    report = {}
    ok = True
    for size in sizes:
        for r in gradcheck.run_all(range(seed, seed + 10), size, corrupt=corrupt):
            report[f"{r.name}@{size}"] = r.to_dict()
            ok &= r.passed
    report["passed"] = ok
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        write_atomic(Path(out), _json_bytes(report))
    return report


def cmd_viz(flow_path, out, max_flow=None):
    flow = read_flo(flow_path)
    write_ppm(flow_to_color(flow, max_flow), out)


# -- entry point -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _counts(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("counts must be comma-separated integers") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("counts must be non-negative integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snowattack", description="Adversarial snow against optical flow.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def scene_cmd(name, help, out_help="output directory"):
        s = sub.add_parser(name, help=help)
        s.add_argument("--scene", required=True, help="scene directory")
        s.add_argument("--config", help="key = value config file or run record")
        s.add_argument("--out", required=True, help=out_help)
        s.add_argument("--seed", type=int)
        return s

    s = scene_cmd("render", "render snow into a scene, with per-stage images")
    s.add_argument("--flakes", type=int)
    s = scene_cmd("attack", "optimize snow against one victim")
    s.add_argument("--flakes", type=int)
    s.add_argument("--victim", choices=VICTIMS)
    s = scene_cmd("density-sweep", "one attack per flake count")
    s.add_argument("--counts", type=_counts, default=[50, 100, 200])
    s.add_argument("--victim", choices=VICTIMS)
    s = scene_cmd("ablation", "attacks for every subset of parameter groups")
    s.add_argument("--flakes", type=int)
    s.add_argument("--victim", choices=VICTIMS)
    s = scene_cmd("transfer", "optimize on each victim, evaluate on both")
    s.add_argument("--flakes", type=int)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sizes", type=_counts, default=[16])
    s.add_argument("--out", help="JSON report path")
    s.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)

    s = sub.add_parser("viz", help="color-code a .flo file")
    s.add_argument("flow", help="input .flo")
    s.add_argument("--out", required=True, help="output .ppm")
    s.add_argument("--max-flow", type=float)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "render":
            cmd_render(args.scene, args.out, args.config, args.seed, args.flakes)
        elif args.command == "attack":
            rec = cmd_attack(args.scene, args.out, args.config, args.seed, args.flakes, args.victim)
            m = rec["metrics"]
            print(f"AEE to target: {m['initial_aee_target']:.4f} -> {m['final_aee_target']:.4f}")
        elif args.command == "density-sweep":
            rows = cmd_density_sweep(args.scene, args.out, args.counts, args.config, args.seed, args.victim)
            for n, a0, a1 in rows:
                print(f"{n:6d}  {a0:.4f}  {a1:.4f}")
        elif args.command == "ablation":
            for label, v in cmd_ablation(args.scene, args.out, args.config, args.seed, args.flakes, args.victim):
                print(f"{label:24s} {v:.4f}")
        elif args.command == "transfer":
            print("optimized_on", *VICTIMS)
            for row in cmd_transfer(args.scene, args.out, args.config, args.seed, args.flakes):
                print(row[0], *(f"{v:.4f}" for v in row[1:]))
        elif args.command == "gradcheck":
            rep = cmd_gradcheck(args.out, args.seed, args.sizes, args.corrupt_gradient)
            for name, r in rep.items():
                if name == "passed":
                    continue
                status = "PASS" if r["passed"] else "FAIL"
                groups = ", ".join(f"{g} {v['error']:.2e} ({v['excluded']} excluded)"
                                   for g, v in r["groups"].items())
                print(f"{status} {name}: worst {r['worst']:.2e} (tolerance {r['tolerance']:.0e}); {groups}")
            if not rep["passed"]:
                return EXIT_CHECK
        elif args.command == "viz":
            cmd_viz(args.flow, args.out, args.max_flow)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
