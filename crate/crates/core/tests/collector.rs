use miles::collector::*;
use miles::demo::{record_scenario_demo, ticks_between, Demonstration};
use miles::disturbance::{calibrate, CalibrationConfig, FeatureExtractor};
use miles::sim::{reset, Gripper, RandomizationSpec, Scenario, SimConfig};
use miles::{Error, Pose, PoseTolerance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn demo(sc: &str) -> Demonstration {
    record_scenario_demo(&SimConfig::default(), sc, 0).unwrap()
}

fn calibrated(d: &Demonstration) -> CollectorConfig {
    let cal = calibrate(
        &SimConfig::default(),
        d,
        &FeatureExtractor::default(),
        &PoseTolerance::default(),
        &CalibrationConfig::default(),
    )
    .unwrap();
    CollectorConfig {
        theta: cal.theta,
        ..Default::default()
    }
}

#[test]
fn offsets_stay_in_the_box() {
    let cfg = CollectorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let mut sum = [0.0; 3];
    for _ in 0..n {
        let p = sample_start_offset(&mut rng, &cfg);
        assert!(p.x.abs() <= 0.04 && p.y.abs() <= 0.04);
        assert!(p.theta.abs() <= 4f64.to_radians() + 1e-15);
        sum[0] += p.x;
        sum[1] += p.y;
        sum[2] += p.theta;
    }
    // Uniform on [-a, a] has standard deviation a / sqrt(3).
    let ranges = [0.04, 0.04, 4f64.to_radians()];
    for i in 0..3 {
        let sigma_mean = ranges[i] / 3f64.sqrt() / (n as f64).sqrt();
        assert!((sum[i] / n as f64).abs() < 3.0 * sigma_mean, "component {i}");
    }
    let zero = CollectorConfig {
        trans_range: 0.0,
        rot_range: 0.0,
        ..Default::default()
    };
    assert_eq!(sample_start_offset(&mut rng, &zero), Pose::IDENTITY);
}

#[test]
fn free_space_return_takes_the_kinematic_step_count() {
    let d = demo("reach");
    let cfg = CollectorConfig::default();
    let mut w = reset("reach", 0, &RandomizationSpec::none()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let c = sample_trajectory(&mut w, &d, 0, &cfg, &mut rng);
        assert!(c.reached);
        let expected = ticks_between(&c.traj.start_pose(), d.waypoint(0), w.config());
        assert_eq!(c.traj.len(), expected);
        assert!(c.traj.steps.iter().all(|s| s.obs.force.magnitude() == 0.0));
    }
}

#[test]
fn zero_offset_gives_one_identity_record() {
    let d = demo("reach");
    let cfg = CollectorConfig::default();
    let mut w = reset("reach", 0, &RandomizationSpec::none()).unwrap();
    let c = record_return(&mut w, d.waypoint(0), Gripper::Open, &cfg, 0);
    assert!(c.reached);
    assert_eq!(c.traj.len(), 1);
    assert_eq!(c.traj.steps[0].action.delta, Pose::IDENTITY);
}

#[test]
fn lateral_return_into_the_slot_touches_the_walls() {
    let d = demo("peg");
    let cfg = CollectorConfig::default();
    // First waypoint with the tool inside the chamfered mouth.
    let k = d.steps.iter().position(|s| s.waypoint.x >= 0.085).unwrap();
    let mut w = reset("peg", 0, &RandomizationSpec::none()).unwrap();
    return_to_waypoint(&mut w, k, &d, &cfg.pose_tol).unwrap();
    w.place_ee(d.waypoint(k).compose(&Pose::new(-0.015, 0.02, 0.0)));
    let c = record_return(&mut w, d.waypoint(k), Gripper::Open, &cfg, k);
    assert!(c.reached);
    assert!(c.traj.steps.iter().any(|s| s.obs.force.magnitude() > 0.0));
}

#[test]
fn reachability_verdicts() {
    let tol = PoseTolerance::default();
    let p = Pose::IDENTITY;
    assert!(check_reachability(&p, &p, &tol));
    let edge = Pose::new(tol.trans_tol(), 0.0, 0.0);
    assert!(check_reachability(&edge, &p, &tol));

    // A return aimed through the face of the socket stops short.
    let cfg = CollectorConfig::default();
    let mut w = reset("peg", 0, &RandomizationSpec::none()).unwrap();
    w.place_ee(Pose::new(0.06, 0.035, 0.0));
    let target = Pose::new(0.10, 0.0, 0.0);
    let c = record_return(&mut w, &target, Gripper::Open, &cfg, 0);
    assert!(!c.reached);
    assert!(c.traj.end_pose.translation_distance(&target) > 0.008);
    assert!(!check_reachability(&c.traj.end_pose, &target, &tol));
}

#[test]
fn recovery_restores_waypoints() {
    let tol = PoseTolerance::default();
    let d = demo("peg");
    let sc = Scenario::get("peg").unwrap();
    let mut w = reset("peg", 0, &RandomizationSpec::none()).unwrap();
    return_to_waypoint(&mut w, 0, &d, &tol).unwrap();
    assert!(w.ee_pose().approx_eq(d.waypoint(0), &tol));
    let last = d.last_index();
    return_to_waypoint(&mut w, last, &d, &tol).unwrap();
    assert!(sc.success(&w));

    // Jam a candidate, then recover.
    let k = last;
    return_to_waypoint(&mut w, k, &d, &tol).unwrap();
    w.place_ee(Pose::new(0.06, 0.035, 0.0));
    let c = record_return(&mut w, d.waypoint(k), Gripper::Open, &CollectorConfig::default(), k);
    assert!(!c.reached);
    return_to_waypoint(&mut w, k, &d, &tol).unwrap();
    assert!(w.ee_pose().approx_eq(d.waypoint(k), &tol));
}

#[test]
fn reach_collects_every_waypoint() {
    let d = demo("reach");
    assert_eq!(d.len(), 10);
    let cfg = CollectorConfig::default();
    let mut w = reset("reach", 0, &RandomizationSpec::none()).unwrap();
    let r = collect(&mut w, &d, &cfg).unwrap();
    assert_eq!(r.dataset.len(), 100);
    assert_eq!(r.r, d.last_index());
    assert_eq!(r.stop_reason, StopReason::Completed);
    assert!(r.zeta_remaining.is_empty());
    for k in 0..d.len() {
        assert_eq!(r.count_for(k), 10);
    }
    let ks: Vec<usize> = r.dataset.iter().map(|t| t.target_index).collect();
    assert_eq!(ks[0], 0);
    assert!(ks.windows(2).all(|p| p[0] <= p[1]));
    for t in &r.dataset {
        assert!(check_reachability(&t.end_pose, d.waypoint(t.target_index), &cfg.pose_tol));
        for n in 0..t.len() {
            let next = if n + 1 < t.len() { t.steps[n + 1].waypoint } else { t.end_pose };
            let p = t.steps[n].waypoint.compose(&t.steps[n].action.delta);
            assert!(p.translation_distance(&next) < 1e-9 && p.angular_distance(&next) < 1e-9);
        }
    }
}

#[test]
fn scripted_disturbance_sets_r() {
    let d = demo("push-block");
    let cfg = calibrated(&d);
    let j = 5;
    let mut w = reset("push-block", 0, &RandomizationSpec::none()).unwrap();
    let r = collect_with(&mut w, &d, &cfg, |k, world| {
        if k == j {
            world.objects_mut()[0].pose.y += 0.03;
        }
    })
    .unwrap();
    assert_eq!(r.stop_reason, StopReason::Disturbance);
    assert_eq!(r.r, j);
    assert!(r.dataset.iter().all(|t| t.target_index < j));
    for k in 0..j {
        assert_eq!(r.count_for(k), cfg.z);
    }
    assert_eq!(r.zeta_remaining, d.actions_between(j, d.last_index()));
}

#[test]
fn peg_collection_recovers_from_jams_and_is_deterministic() {
    let d = demo("peg");
    let cfg = calibrated(&d);
    let run = || {
        let mut w = reset("peg", 0, &RandomizationSpec::none()).unwrap();
        collect(&mut w, &d, &cfg).unwrap()
    };
    let a = run();
    assert!(a.stats.unreachable > 0);
    assert_eq!(a.stats.unreachable, a.stats.recoveries);
    assert_eq!(a.stop_reason, StopReason::Completed);
    for t in &a.dataset {
        assert!(check_reachability(&t.end_pose, d.waypoint(t.target_index), &cfg.pose_tol));
    }
    assert_eq!(a, run());
}

#[test]
fn dataset_files_round_trip() {
    let d = demo("reach");
    let cfg = CollectorConfig {
        z: 2,
        ..Default::default()
    };
    let mut w = reset("reach", 0, &RandomizationSpec::none()).unwrap();
    let r = collect(&mut w, &d, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (dp, mp) = (dir.path().join("d.jsonl"), dir.path().join("m.json"));
    save_collection(&r, &dp, &mp).unwrap();
    assert_eq!(load_collection(&dp, &mp).unwrap(), r);
    let mut bytes = std::fs::read(&dp).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&dp, &bytes).unwrap();
    assert!(matches!(load_collection(&dp, &mp), Err(Error::Integrity(_))));
}

#[test]
fn rejects_bad_configs() {
    let d = demo("reach");
    let mut w = reset("reach", 0, &RandomizationSpec::none()).unwrap();
    for cfg in [
        CollectorConfig { z: 0, ..Default::default() },
        CollectorConfig { theta: 1.0, ..Default::default() },
        CollectorConfig { trans_range: -1.0, ..Default::default() },
    ] {
        assert!(matches!(collect(&mut w, &d, &cfg), Err(Error::InvalidConfig(_))));
    }
}
