"""Batch experiment runner: teach drives, closed-loop repeats, sweeps, corners.

A teach run drives the plant along a scripted path with a simple waypoint
follower (the stand-in for manual driving), recording keyframes from the
drifting odometry while the camera sees the true world. A repeat run closes
the full loop: render -> NCC corrections -> reference lookup -> sliding-mode
control -> plant step -> odometry update, logging at the controller rate.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ExperimentConfig
from .metrics import TrialMetrics, compute_metrics
from .paths import TeachPath, build_path
from .planner import (Correction, Keyframe, KeyframeMatcher, PlannerGains,
                      PoseEstimate, SpeedProfile, TeachMap,
                      apply_correction, orientation_correction,
                      patch_normalize, reference_lookup, should_record)
from .smc import (ControlOutput, ControllerGains, Reference,
                  SlidingModeController, global_error, to_local_frame)
from .vehicle import (RobotState, TerrainProfile, VehicleParams, step_hold,
                      wrap_angle)
from .world import (IMG_W, WorldModel, OdometryModel, get_profile,
                    render_camera, odometry_step)


def _trial_rng(seed: int, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def load_models(cfg: ExperimentConfig):
    params = (VehicleParams.from_file(cfg.vehicle_file) if cfg.vehicle_file
              else VehicleParams.nominal())
    gains = (ControllerGains.from_file(cfg.gains_file) if cfg.gains_file
             else ControllerGains.table_defaults())
    pgains = (PlannerGains.from_file(cfg.planner_file) if cfg.planner_file
              else PlannerGains.table_defaults())
    terrain, odom = get_profile(cfg.profile_file or cfg.profile)
    return params, gains, pgains, terrain, odom


@dataclass
class TeachResult:
    tmap: TeachMap
    path: TeachPath
    t: np.ndarray
    gt: np.ndarray            # (n, 3) true poses at controller rate
    odom: np.ndarray          # (n, 3) odometry estimate
    odom_arc: np.ndarray      # cumulative measured arc-length per tick

    def true_pose_at(self, s: float):
        """Teach-phase true pose at a map (odometry) arc-length."""
        arc = self.odom_arc
        s = min(max(s, arc[0]), arc[-1])
        x = np.interp(s, arc, self.gt[:, 0])
        y = np.interp(s, arc, self.gt[:, 1])
        th = np.interp(s, arc, np.unwrap(self.gt[:, 2]))
        return x, y, wrap_angle(th)

    @property
    def terminal_drift(self) -> float:
        return float(math.hypot(self.odom[-1, 0] - self.gt[-1, 0],
                                self.odom[-1, 1] - self.gt[-1, 1]))


def _teach_body_cmd(path: TeachPath, state: RobotState, s_hint: float,
                    v_des: float, params: VehicleParams):
    """Pure-pursuit style follower with steady-state input inversion."""
    s_near = path.nearest_s(state.x, state.y, s_hint)
    lookahead = 0.7
    tx, ty, _ = path.pose_at(min(s_near + lookahead, path.length))
    bearing = math.atan2(ty - state.y, tx - state.x)
    herr = wrap_angle(bearing - state.theta)
    w_des = 1.8 * herr
    w_des = min(max(w_des, -1.5), 1.5)
    v_sc = v_des * max(0.2, math.cos(min(abs(herr), math.pi / 2)))
    u_v = params.c4 * v_sc - params.c3 * state.omega ** 2 \
        + params.c1 * 1.5 * (v_sc - state.v_x)
    u_w = (params.c5 * state.v_x + params.c6) * w_des \
        + params.c2 * 4.0 * (w_des - state.omega)
    return (u_v, u_w), s_near, herr


def run_teach(cfg: ExperimentConfig, world: WorldModel = None) -> TeachResult:
    """Drive the scripted path, record keyframes from odometry, log ground truth."""
    params, gains, pgains, terrain, odom_model = load_models(cfg)
    if world is None:
        world = WorldModel(seed=cfg.world_seed)
    path = build_path(cfg.teach_path, cfg.path_length)
    rng_plant = _trial_rng(cfg.world_seed, 1, 0)
    rng_odom = _trial_rng(cfg.world_seed, 1, 1)

    profile = SpeedProfile(v_max=cfg.speed, total_length=path.length)
    x0, y0, th0 = path.pose_at(0.0)
    state = RobotState(x0, y0, th0, 0.0, 0.0)
    est = (x0, y0, th0)
    dt, sub = cfg.dt_plant, cfg.substeps

    t_log, gt_log, od_log, arc_log = [], [], [], []
    keyframes, arcs = [], []
    arc = 0.0
    s_hint = 0.0
    last_kf_pose = None
    t = 0.0
    t_max = 3.0 * path.length / max(cfg.speed, 0.05) + 30.0
    stall = 0.0
    dist_thr, ang_thr = cfg.dist_threshold, math.radians(cfg.angle_threshold_deg)

    while s_hint < path.length - 0.05:
        if t > t_max:
            raise RuntimeError("teach follower timed out; path infeasible "
                               "at the configured speed cap")
        t_log.append(t)
        gt_log.append((state.x, state.y, state.theta))
        od_log.append(est)
        arc_log.append(arc)

        if last_kf_pose is None or should_record(est, last_kf_pose,
                                                 dist_thr, ang_thr):
            raw = render_camera(world, (state.x, state.y, state.theta))
            arcs.append(arc if not arcs else max(arc, arcs[-1] + 1e-6))
            keyframes.append(Keyframe(pose=est, image=patch_normalize(raw),
                                      raw_image=raw, index=len(keyframes)))
            last_kf_pose = est

        v_des = max(profile.speed(min(s_hint, path.length)), 0.08)
        (u, s_hint, herr) = _teach_body_cmd(path, state, s_hint, v_des, params)
        if abs(herr) > math.radians(135.0):
            stall += cfg.ctrl_period
            if stall > 5.0:
                raise RuntimeError("teach follower lost the path; "
                                   "path infeasible at the speed cap")
        else:
            stall = 0.0
        prev = state
        state = step_hold(state, u, dt, sub, params, terrain, rng_plant)

        ct, st = math.cos(prev.theta), math.sin(prev.theta)
        dxg, dyg = state.x - prev.x, state.y - prev.y
        delta = (ct * dxg + st * dyg, -st * dxg + ct * dyg,
                 wrap_angle(state.theta - prev.theta))
        mdx, mdy, mdth = odometry_step(delta, odom_model, rng_odom)
        ce, se = math.cos(est[2]), math.sin(est[2])
        est = (est[0] + ce * mdx - se * mdy,
               est[1] + se * mdx + ce * mdy,
               wrap_angle(est[2] + mdth))
        arc += math.hypot(mdx, mdy)
        t += cfg.ctrl_period

    tmap = TeachMap(keyframes=keyframes, dist_threshold=dist_thr,
                    angle_threshold=ang_thr, arc_lengths=np.asarray(arcs))
    return TeachResult(tmap=tmap, path=path, t=np.asarray(t_log),
                       gt=np.asarray(gt_log), odom=np.asarray(od_log),
                       odom_arc=np.asarray(arc_log))


@dataclass
class BaselineGains:
    """Proportional follower without a dynamics model (comparison baseline)."""

    k_v: float = 1.0           # m/s per metre of along-path error
    k_h: float = 2.2           # rad/s per rad of heading-to-reference error
    blend_dist: float = 0.25   # m, bearing-vs-heading blend scale
    g_v: float = 8.0           # static input gain, tuned once at 0.35 m/s
    g_w: float = 4.4


def baseline_controller_step(state: RobotState, reference: Reference,
                             bgains: BaselineGains,
                             params: VehicleParams) -> ControlOutput:
    """v from the along-path error, omega from the heading-to-reference error."""
    q_e = global_error(reference, state)
    eps = to_local_frame(q_e, state.theta)
    d = math.hypot(q_e[0], q_e[1])
    herr_pose = wrap_angle(reference.theta - state.theta)
    if d > 1e-6:
        bearing = math.atan2(q_e[1], q_e[0])
        w_far = min(d / bgains.blend_dist, 1.0)
        herr = w_far * wrap_angle(bearing - state.theta) + (1.0 - w_far) * herr_pose
    else:
        herr = herr_pose
    v_des = max(reference.v_x + bgains.k_v * eps[0], 0.0)
    w_des = bgains.k_h * herr
    v_r = bgains.g_v * v_des
    w_r = bgains.g_w * w_des
    v_sat = abs(v_r) >= params.v_r_max
    w_sat = abs(w_r) >= params.w_r_max
    v_r = min(max(v_r, -params.v_r_max), params.v_r_max)
    w_r = min(max(w_r, -params.w_r_max), params.w_r_max)
    return ControlOutput(v_x_r=v_r, omega_r=w_r, s1=0.0, s2=0.0,
                         v_saturated=v_sat, w_saturated=w_sat)


@dataclass
class TrialRecord:
    name: str
    t: np.ndarray
    gt: np.ndarray
    est: np.ndarray
    ref: np.ndarray          # controller reference (map frame)
    ref_truth: np.ndarray    # teach-phase true pose at the same progress
    s1: np.ndarray
    s2: np.ndarray
    v_cmd: np.ndarray
    w_cmd: np.ndarray
    rho: np.ndarray
    progress: np.ndarray
    metrics: TrialMetrics
    stable: bool
    reason: str
    completion: float


def run_repeat(cfg: ExperimentConfig, teach: TeachResult, trial: int = 0,
               controller: str = "smc", speed: float = None,
               plant_params: VehicleParams = None,
               initial_offset=(0.0, 0.0, 0.0),
               world: WorldModel = None, name: str = None) -> TrialRecord:
    """One full closed-loop repeat trial at the controller rate."""
    params, gains, pgains, terrain, odom_model = load_models(cfg)
    plant = plant_params if plant_params is not None else params
    if world is None:
        world = WorldModel(seed=cfg.world_seed)
    speed = cfg.speed if speed is None else speed
    tmap = teach.tmap
    total = tmap.total_length
    profile = SpeedProfile(v_max=speed, total_length=total)
    matcher = getattr(teach, "_matcher", None)
    if matcher is None or matcher.d != pgains.d_search:
        matcher = KeyframeMatcher(tmap, pgains.d_search)
        teach._matcher = matcher
    ctrl = SlidingModeController(params, gains)

    rng_plant = _trial_rng(cfg.world_seed, 2, trial, 0)
    rng_odom = _trial_rng(cfg.world_seed, 2, trial, 1)

    sx, sy, sth = teach.gt[0]
    state = RobotState(sx + initial_offset[0], sy + initial_offset[1],
                       sth + initial_offset[2], 0.0, 0.0)
    kf0 = tmap.keyframes[0].pose
    est = PoseEstimate(kf0[0], kf0[1], kf0[2], 1e-6)
    v_meas = w_meas = 0.0
    dt, sub, dt_c = cfg.dt_plant, cfg.substeps, cfg.ctrl_period

    logs = {k: [] for k in ("t", "gt", "est", "ref", "ref_truth",
                            "s1", "s2", "v", "w", "rho", "progress")}
    stable, reason = True, "completed"
    sat_time = 0.0
    t = 0.0
    t_max = 2.5 * total / max(speed, 0.05) + 30.0
    end_tol = max(tmap.local_spacing(len(tmap) - 2), 0.1)

    while est.progress < total - end_tol:
        if t > t_max:
            stable, reason = False, "timeout"
            break
        ref = reference_lookup(tmap, est.progress, profile)
        raw = render_camera(world, (state.x, state.y, state.theta))
        query = patch_normalize(raw)
        idx = tmap.nearest_index(est.progress)
        off_px, rho, ds_full, _ = matcher.match(query, idx, pgains)
        # remove the map-predicted offset so only genuine deviation corrects:
        # a perfectly tracking robot already sees the keyframe rotated by the
        # taught heading difference between the keyframe and the reference
        exp_px = wrap_angle(ref.theta - tmap.keyframes[idx].pose[2]) \
            / (pgains.fov / IMG_W)
        net_px = min(max(off_px - exp_px, -pgains.d_search), pgains.d_search)
        dth = orientation_correction(net_px, pgains)
        corr = Correction(delta_theta=dth, delta_s=ds_full * dt_c, rho=rho)
        est = apply_correction(est, corr, pgains)
        est.progress = min(max(est.progress, 1e-6), total)
        ctrl_state = RobotState(est.x, est.y, est.theta, v_meas, w_meas)
        if controller == "smc":
            out = ctrl.control_step(ctrl_state, ref)
        elif controller == "baseline":
            out = baseline_controller_step(ctrl_state, ref, BaselineGains(), params)
        else:
            raise ValueError(f"unknown controller {controller!r}")

        rt = teach.true_pose_at(est.progress)
        logs["t"].append(t)
        logs["gt"].append((state.x, state.y, state.theta))
        logs["est"].append((est.x, est.y, est.theta))
        logs["ref"].append((ref.x, ref.y, ref.theta))
        logs["ref_truth"].append(rt)
        logs["s1"].append(out.s1)
        logs["s2"].append(out.s2)
        logs["v"].append(out.v_x_r)
        logs["w"].append(out.omega_r)
        logs["rho"].append(rho)
        logs["progress"].append(est.progress)

        prev = state
        state = step_hold(state, (out.v_x_r, out.omega_r), dt, sub,
                          plant, terrain, rng_plant)
        ct, st = math.cos(prev.theta), math.sin(prev.theta)
        dxg, dyg = state.x - prev.x, state.y - prev.y
        delta = (ct * dxg + st * dyg, -st * dxg + ct * dyg,
                 wrap_angle(state.theta - prev.theta))
        mdx, mdy, mdth = odometry_step(delta, odom_model, rng_odom)
        ce, se = math.cos(est.theta), math.sin(est.theta)
        est = PoseEstimate(est.x + ce * mdx - se * mdy,
                           est.y + se * mdx + ce * mdy,
                           wrap_angle(est.theta + mdth),
                           min(max(est.progress + mdx, 1e-6), total))
        v_meas, w_meas = mdx / dt_c, mdth / dt_c
        t += dt_c

        if not all(math.isfinite(v) for v in
                   (state.x, state.y, state.theta, state.v_x, state.omega)):
            stable, reason = False, "non-finite state"
            break
        rt2 = teach.true_pose_at(est.progress)
        if math.hypot(state.x - rt2[0], state.y - rt2[1]) > cfg.divergence_dist:
            stable, reason = False, "divergence"
            break
        sat_time = sat_time + dt_c if (out.v_saturated and out.w_saturated) else 0.0
        if sat_time > cfg.saturation_limit:
            stable, reason = False, "persistent saturation"
            break

    completion = min(est.progress / total, 1.0) if total > 0 else 0.0
    if not logs["t"]:
        raise RuntimeError("repeat produced no samples")
    gt = np.asarray(logs["gt"])
    ref_truth = np.asarray(logs["ref_truth"])
    metrics = compute_metrics(gt, ref_truth, stable=stable, completion=completion)
    return TrialRecord(
        name=name or f"{controller}_trial{trial}",
        t=np.asarray(logs["t"]), gt=gt, est=np.asarray(logs["est"]),
        ref=np.asarray(logs["ref"]), ref_truth=ref_truth,
        s1=np.asarray(logs["s1"]), s2=np.asarray(logs["s2"]),
        v_cmd=np.asarray(logs["v"]), w_cmd=np.asarray(logs["w"]),
        rho=np.asarray(logs["rho"]), progress=np.asarray(logs["progress"]),
        metrics=metrics, stable=stable, reason=reason, completion=completion)


def run_trials(cfg: ExperimentConfig, teach: TeachResult,
               controller: str = "smc", world: WorldModel = None):
    """cfg.trials independent seeded repeats."""
    if world is None:
        world = WorldModel(seed=cfg.world_seed)
    return [run_repeat(cfg, teach, trial=i, controller=controller, world=world)
            for i in range(cfg.trials)]


def run_speed_sweep(cfg: ExperimentConfig, teach: TeachResult, speeds,
                    controller: str = "smc", world: WorldModel = None):
    """Repeats at each commanded speed cap with identical gains throughout."""
    speeds = list(speeds)
    if not speeds:
        raise ValueError("speed sweep needs a non-empty speed list")
    if world is None:
        world = WorldModel(seed=cfg.world_seed)
    out = []
    for i, v in enumerate(speeds):
        rec = run_repeat(cfg, teach, trial=i, controller=controller,
                         speed=v, world=world,
                         name=f"{controller}_v{v:g}")
        out.append((v, rec))
    return out


def corner_signs():
    """All 2^6 sign combinations for the ci coefficients."""
    for mask in range(64):
        yield tuple(1 if mask & (1 << i) else -1 for i in range(6))


def run_robustness_corners(cfg: ExperimentConfig, teach: TeachResult,
                           fraction: float = 0.25, world: WorldModel = None):
    """Plant at every ci corner and both ICR extremes; controller stays nominal."""
    params, gains, _, _, _ = load_models(cfg)
    if world is None:
        world = WorldModel(seed=cfg.world_seed)
    rows = []
    for signs in corner_signs():
        for x0 in (gains.x0_min, gains.x0_max):
            plant = params.scaled(signs, fraction, x0=x0)
            rec = run_repeat(cfg, teach, trial=0, world=world, plant_params=plant,
                             name="corner_" + "".join("p" if s > 0 else "m"
                                                      for s in signs)
                                  + f"_x0{x0:+g}")
            rows.append({"signs": signs, "x0": x0, "record": rec,
                         "metrics": rec.metrics})
    return rows
