use miles::collector::{collect, CollectorConfig};
use miles::demo::{record_scenario_demo, Action, Observation};
use miles::fusion::{fuse, FusedDataset};
use miles::policy::net::{encode_force, encode_image, step_loss, Net, NetConfig, StepCache, KERNEL, OUTPUTS};
use miles::policy::train::{clip_gradient, loss, loss_and_grad, SeqTensor};
use miles::policy::{self, load_policy, load_policy_expecting, save_policy, Policy, TrainConfig};
use miles::sim::{reset, Gripper, RandomizationSpec, SimConfig};
use miles::{Error, Pose};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reach_fused(z: usize) -> FusedDataset {
    let sim = SimConfig::default();
    let d = record_scenario_demo(&sim, "reach", 0).unwrap();
    let mut w = reset("reach", 0, &RandomizationSpec::none()).unwrap();
    let r = collect(&mut w, &d, &CollectorConfig { z, ..Default::default() }).unwrap();
    fuse(&r, &d).unwrap()
}

fn observations(data: &FusedDataset, n: usize) -> Vec<Observation> {
    data.sequences[0].steps.iter().take(n).map(|s| s.obs.clone()).collect()
}

fn tiny_policy(seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Policy {
        net: Net::init(&NetConfig::tiny(), &mut rng).unwrap(),
        action_std: [0.004, 0.002, 0.03],
        scenario: "reach".into(),
        r: 4,
        demo_len: 10,
        hidden_reset_interval: 10,
        zeta_remaining: vec![Action::identity(Gripper::Open); 4],
        dataset_hash: "0".repeat(64),
        train_config: TrainConfig::default(),
    }
}

fn random_seq<R: Rng>(rng: &mut R, cfg: &NetConfig, len: usize) -> SeqTensor {
    SeqTensor {
        images: (0..len * cfg.input_len()).map(|_| rng.random_range(-0.5..0.5)).collect(),
        forces: (0..len).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
        targets: (0..len).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect(),
        closed: (0..len).map(|_| rng.random_bool(0.5)).collect(),
    }
}

#[test]
fn zero_parameters_give_zero_deltas() {
    let net = Net::zeros(&NetConfig::default()).unwrap();
    let p = Policy {
        net,
        ..tiny_policy(0)
    };
    let data = reach_fused(1);
    for a in p.actions(&observations(&data, 5)).unwrap() {
        assert_eq!(a.delta, Pose::IDENTITY);
        assert_eq!(a.gripper, Gripper::Open);
    }
}

#[test]
fn inference_is_deterministic() {
    let data = reach_fused(1);
    let obs = observations(&data, 6);
    let p = tiny_policy(3);
    assert_eq!(p.actions(&obs).unwrap(), p.actions(&obs).unwrap());
    let mut s = p.new_state();
    let stepped: Vec<Action> = obs.iter().map(|o| p.act(o, &mut s).unwrap()).collect();
    assert_eq!(stepped, p.actions(&obs).unwrap());
}

#[test]
fn hidden_state_resets_on_schedule() {
    let data = reach_fused(1);
    let obs = observations(&data, 3);
    let mut p = tiny_policy(5);
    p.hidden_reset_interval = 2;
    let mut s = p.new_state();
    let a: Vec<Action> = [&obs[0], &obs[1], &obs[0], &obs[1]].iter().map(|o| p.act(o, &mut s).unwrap()).collect();
    assert_eq!(a[0], a[2]);
    assert_eq!(a[1], a[3]);
}

// Independent forward pass written with plain index arithmetic.
fn oracle_step(net: &Net, img: &[f64], force: [f64; 3], h_prev: &[f64]) -> ([f64; OUTPUTS], Vec<f64>) {
    let cfg = &net.cfg;
    let v = |n: &str| net.view(n).unwrap().0;
    let conv = |inp: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], cout: usize| {
        let os = side / 2;
        let mut out = vec![0.0; cout * os * os];
        for o in 0..cout {
            for y in 0..os {
                for x in 0..os {
                    let mut s = b[o];
                    for i in 0..cin {
                        for ky in 0..KERNEL {
                            for kx in 0..KERNEL {
                                let iy = (2 * y + ky) as isize - 1;
                                let ix = (2 * x + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                                    continue;
                                }
                                s += w[((o * cin + i) * KERNEL + ky) * KERNEL + kx]
                                    * inp[(i * side + iy as usize) * side + ix as usize];
                            }
                        }
                    }
                    out[(o * os + y) * os + x] = s.max(0.0);
                }
            }
        }
        out
    };
    let lin = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
            .collect()
    };
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let a1 = conv(img, 3, cfg.image_size, v("conv1.w"), v("conv1.b"), cfg.conv1_channels);
    let a2 = conv(&a1, cfg.conv1_channels, cfg.image_size / 2, v("conv2.w"), v("conv2.b"), cfg.conv2_channels);
    let mut x = relu(lin(v("fc.w"), v("fc.b"), &a2));
    let f1 = relu(lin(v("force1.w"), v("force1.b"), &force));
    x.extend(relu(lin(v("force2.w"), v("force2.b"), &f1)));
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let gate = |g: &str, hh: &[f64]| {
        let a = lin(v(&format!("gru.w{g}")), v(&format!("gru.b{g}")), &x);
        let u = lin(v(&format!("gru.u{g}")), &vec![0.0; cfg.hidden], hh);
        a.iter().zip(&u).map(|(a, b)| a + b).collect::<Vec<_>>()
    };
    let z: Vec<f64> = gate("z", h_prev).into_iter().map(sig).collect();
    let r: Vec<f64> = gate("r", h_prev).into_iter().map(sig).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = gate("n", &rh).into_iter().map(f64::tanh).collect();
    let h: Vec<f64> = (0..cfg.hidden).map(|j| (1.0 - z[j]) * n[j] + z[j] * h_prev[j]).collect();
    let o = lin(v("head.w"), v("head.b"), &h);
    ([o[0], o[1], o[2], o[3]], h)
}

#[test]
fn forward_matches_a_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for cfg in [NetConfig::tiny(), NetConfig { image_size: 16, ..NetConfig::tiny() }] {
        let mut net = Net::init(&cfg, &mut rng).unwrap();
        // Nonzero biases so they are exercised too.
        for t in net.layout.tensors.clone() {
            if t.shape.len() == 1 {
                for p in net.view_mut(&t.name).unwrap() {
                    *p = rng.random_range(-0.3..0.3);
                }
            }
        }
        let seq = random_seq(&mut rng, &cfg, 4);
        let mut c = StepCache::new(&cfg);
        let mut h = vec![0.0; cfg.hidden];
        for t in 0..4 {
            c.h_prev.copy_from_slice(&h);
            net.step(seq.image(t, cfg.input_len()), seq.forces[t], &mut c);
            let (out, h2) = oracle_step(&net, seq.image(t, cfg.input_len()), seq.forces[t], &h);
            for k in 0..OUTPUTS {
                assert!((out[k] - c.out[k]).abs() < 1e-12, "step {t} output {k}");
            }
            h = h2;
        }
    }
}

#[test]
fn loss_examples() {
    // Zero logit against either label costs ln 2.
    let (l, d) = step_loss(&[0.0; 4], &[0.0; 3], true);
    assert!((l - 2f64.ln()).abs() < 1e-15);
    assert!((d[3] + 0.5).abs() < 1e-15);
    let (l, _) = step_loss(&[1.0, -2.0, 0.5, 3.0], &[0.0, 0.0, 0.0], false);
    let bce = -(1.0 - 1.0 / (1.0 + (-3.0f64).exp())).ln();
    assert!((l - (1.0 + 4.0 + 0.25 + bce)).abs() < 1e-12);
    // Large logits stay finite.
    let (l, _) = step_loss(&[0.0, 0.0, 0.0, -800.0], &[0.0; 3], true);
    assert!((l - 800.0).abs() < 1e-9);
}

#[test]
fn perfect_fit_has_zero_head_gradient() {
    let cfg = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = Net::init(&cfg, &mut rng).unwrap();
    net.view_mut("head.w").unwrap().fill(0.0);
    let b = net.view_mut("head.b").unwrap();
    b.copy_from_slice(&[0.3, -0.2, 0.1, 40.0]);
    let mut seq = random_seq(&mut rng, &cfg, 3);
    seq.targets = vec![[0.3, -0.2, 0.1]; 3];
    seq.closed = vec![true; 3];
    let mut grad = vec![0.0; net.param_count()];
    let l = loss_and_grad(&net, &[&seq], &mut grad);
    assert!(l < 1e-15);
    let t = net.layout.get("head.w").unwrap();
    assert!(grad[t.offset..t.offset + t.len()].iter().all(|g| g.abs() < 1e-15));
}

// Central differences over every parameter of the tiny network, with memory
// and without. Relative error uses max(|analytic|, |numeric|, 1e-6) as the
// denominator so parameters with vanishing gradients are compared absolutely.
#[test]
fn gradient_matches_finite_differences() {
    for memory in [true, false] {
        let cfg = NetConfig { memory, ..NetConfig::tiny() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Net::init(&cfg, &mut rng).unwrap();
        for p in net.params.iter_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        let seqs = [random_seq(&mut rng, &cfg, 3), random_seq(&mut rng, &cfg, 2)];
        let batch: Vec<&SeqTensor> = seqs.iter().collect();
        let mut grad = vec![0.0; net.param_count()];
        loss_and_grad(&net, &batch, &mut grad);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..net.param_count() {
            let p0 = net.params[i];
            net.params[i] = p0 + eps;
            let lp = loss(&net, &batch);
            net.params[i] = p0 - eps;
            let lm = loss(&net, &batch);
            net.params[i] = p0;
            let num = (lp - lm) / (2.0 * eps);
            let rel = (num - grad[i]).abs() / grad[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "memory {memory}: worst relative error {worst:e}");
    }
}

proptest! {
    #[test]
    fn clipping_bounds_the_norm(v in proptest::collection::vec(-100.0f64..100.0, 1..50), c in 0.01f64..10.0) {
        let mut g = v.clone();
        let before = clip_gradient(&mut g, c);
        let after = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= c * (1.0 + 1e-12));
        if before <= c {
            prop_assert_eq!(g, v);
        }
    }
}

fn constant_actions(mut data: FusedDataset, a: Action) -> FusedDataset {
    for s in &mut data.sequences {
        for st in &mut s.steps {
            st.action = a;
        }
    }
    data
}

#[test]
fn learns_a_constant_action() {
    let target = Action {
        delta: Pose::new(0.003, -0.001, 0.01),
        gripper: Gripper::Closed,
    };
    let data = constant_actions(reach_fused(1).fraction(0.5).unwrap(), target);
    let cfg = TrainConfig {
        epochs: 150,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let (p, _) = policy::train(&data, &NetConfig::tiny(), &cfg).unwrap();
    for a in p.actions(&observations(&data, 10)).unwrap() {
        assert!((a.delta.x - target.delta.x).abs() < 1e-3);
        assert!((a.delta.y - target.delta.y).abs() < 1e-3);
        assert!((a.delta.theta - target.delta.theta).abs() < 1e-3);
        assert_eq!(a.gripper, Gripper::Closed);
    }
}

#[test]
fn reach_training_reduces_loss_tenfold() {
    let data = reach_fused(10);
    let (p, losses) = policy::train(&data, &NetConfig::default(), &TrainConfig::default()).unwrap();
    assert_eq!(losses.len(), 50);
    let last = *losses.last().unwrap();
    assert!(last < 0.1 * losses[0], "loss {} -> {last}", losses[0]);
    assert_eq!(p.net.param_count(), 122_784);
    assert_eq!(p.hidden_reset_interval, 2 * data.demo_len);
    assert!(p.zeta_remaining.is_empty());
}

#[test]
fn training_is_deterministic_and_ignores_waypoints() {
    let data = reach_fused(1).fraction(0.5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let (a, la) = policy::train(&data, &NetConfig::tiny(), &cfg).unwrap();
    let (b, lb) = policy::train(&data, &NetConfig::tiny(), &cfg).unwrap();
    assert_eq!(a.net.params, b.net.params);
    assert_eq!(la, lb);
    // Proprioception lives only in the sidecar; moving it changes nothing.
    let mut moved = data.clone();
    for e in &mut moved.sidecar {
        e.start_pose = e.start_pose.compose(&Pose::new(0.02, -0.01, 0.1));
        e.seam_pose = Pose::new(1.0, 1.0, 1.0);
    }
    let (c, _) = policy::train(&moved, &NetConfig::tiny(), &cfg).unwrap();
    assert_eq!(a.net.params, c.net.params);
    let obs = observations(&data, 5);
    assert_eq!(a.actions(&obs).unwrap(), c.actions(&obs).unwrap());
}

#[test]
fn non_finite_loss_is_reported() {
    let mut data = reach_fused(1).fraction(0.5).unwrap();
    data.sequences[1].steps[0].action.delta.x = f64::NAN;
    let err = policy::train(&data, &NetConfig::tiny(), &TrainConfig { epochs: 2, ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0 }), "{err}");
}

#[test]
fn policy_files_round_trip_and_detect_damage() {
    let p = tiny_policy(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.bin");
    save_policy(&p, &path).unwrap();
    let q = load_policy(&path).unwrap();
    assert_eq!(q, p);
    assert_eq!(q.hash(), p.hash());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_policy(&path), Err(Error::Checksum)));

    save_policy(&p, &path).unwrap();
    let other = NetConfig {
        image_size: 16,
        ..NetConfig::tiny()
    };
    match load_policy_expecting(&path, &other) {
        Err(Error::Shape { layer, .. }) => assert_eq!(layer, "fc.w"),
        r => panic!("expected a shape error, got {r:?}"),
    }
    assert!(load_policy_expecting(&path, &NetConfig::tiny()).is_ok());
}

#[test]
fn encoders_scale_inputs() {
    let data = reach_fused(1);
    let obs = &data.sequences[0].steps[0].obs;
    let x = encode_image(&obs.image, 32).unwrap();
    assert_eq!(x.len(), 3 * 32 * 32);
    assert!(x.iter().all(|v| (-0.5..=0.5).contains(v)));
    assert!(matches!(encode_image(&obs.image, 48), Err(Error::Shape { .. })));
    let f = encode_force(&[10.0, -20.0, 0.05].into(), &NetConfig::default());
    assert_eq!(f, [1.0, -2.0, 0.5]);
}
