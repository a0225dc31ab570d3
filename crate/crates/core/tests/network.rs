mod common;

use common::*;
use rand::Rng;

use ragc::autodiff::checkpoint::Checkpoint;
use ragc::autodiff::{Mode, Tape};
use ragc::model::{Network, NetworkConfig, PolicyKind};
use ragc::pointcloud::PointCloud;
use ragc::synth::{generate_scene, SynthConfig, RADIUS_SCALE};

/// Parameter count of the default 4-class network, frozen at first build.
const GOLDEN_PARAMETERS_4: usize = 2_581_572;

fn scene(class: usize, index: usize) -> PointCloud {
    generate_scene(class, 5, index, &SynthConfig::default())
}

fn default_net(classes: usize, seed: u64) -> Network {
    let cfg = NetworkConfig {
        seed,
        ..NetworkConfig::reference(classes).with_radius_scale(RADIUS_SCALE)
    };
    Network::new(cfg).unwrap()
}

#[test]
fn golden_parameter_count() {
    assert_eq!(default_net(4, 0).num_parameters(), GOLDEN_PARAMETERS_4);
    assert_eq!(default_net(4, 9).num_parameters(), GOLDEN_PARAMETERS_4);
    // Only the last FC depends on the class count.
    assert_eq!(default_net(6, 0).num_parameters(), GOLDEN_PARAMETERS_4 + 2 * 129);
}

#[test]
fn six_classes_five_poolings() {
    let net = default_net(6, 0);
    assert_eq!(net.num_poolings(), 5);
    assert_eq!(net.num_blocks(), 8);
    let pc = scene(1, 0);
    assert_eq!(net.logits(&[&pc]).unwrap().shape(), &[1, 6]);
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &[&pc], Mode::Eval, &mut rng(0)).unwrap();
    assert_eq!(out.stage_nodes.len(), 6);
    assert!(out.stage_nodes.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.stage_nodes);
}

#[test]
fn plain_network_keeps_the_layer_count() {
    let cfg = NetworkConfig {
        residual: false,
        ..NetworkConfig::reference(4)
    };
    let plain = Network::new(cfg).unwrap();
    let res = default_net(4, 0);
    assert_eq!(plain.num_blocks(), res.num_blocks());
    assert_eq!(plain.num_poolings(), res.num_poolings());
    assert!(plain.num_parameters() < res.num_parameters());
}

#[test]
fn inconsistent_radii_rejected() {
    let mut cfg = NetworkConfig::reference(4);
    cfg.pool_radii.pop();
    assert!(matches!(Network::new(cfg), Err(ragc::Error::Config(_))));
    let mut cfg = NetworkConfig::reference(4);
    cfg.policy = PolicyKind::Knn(0);
    assert!(Network::new(cfg).is_err());
}

#[test]
fn probabilities_and_batch_independence() {
    let net = default_net(4, 1);
    let clouds: Vec<PointCloud> = (0..4).map(|c| scene(c, 1)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    for row in net.predict(&refs).unwrap() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let twin = net.logits(&[&clouds[2], &clouds[2]]).unwrap();
    for (a, b) in twin.row(0).iter().zip(twin.row(1)) {
        assert!((a - b).abs() < 1e-9);
    }

    let batch = net.logits(&refs).unwrap();
    for (i, pc) in clouds.iter().enumerate() {
        let alone = net.logits(&[pc]).unwrap();
        for (a, b) in alone.data().iter().zip(batch.row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn perturbing_one_sample_leaves_others_untouched() {
    let net = default_net(4, 2);
    let mut clouds: Vec<PointCloud> = (0..3).map(|c| scene(c, 2)).collect();
    let before = net.logits(&clouds.iter().collect::<Vec<_>>()).unwrap();
    let mut r = rng(1);
    for p in clouds[1].points.iter_mut() {
        p[0] += r.gen_range(-0.2..0.2);
    }
    let after = net.logits(&clouds.iter().collect::<Vec<_>>()).unwrap();
    for i in [0, 2] {
        let same = before.row(i).iter().zip(after.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "sample {i} changed");
    }
    assert_ne!(before.row(1), after.row(1));
}

#[test]
fn full_network_gradient_check() {
    let c = network_gradient_check(20);
    assert!(c.passes(1e-3), "{c:?}");
}

#[test]
fn checkpoint_round_trip() {
    let mut net = default_net(4, 3);
    // Non-trivial running statistics.
    let data: Vec<PointCloud> = (0..4).map(|c| scene(c, 3)).collect();
    net.recalibrate_batch_norm(&data.iter().collect::<Vec<_>>(), 4).unwrap();
    let ckpt = net.to_checkpoint();
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(&bytes[..]).unwrap();
    assert_eq!(back, ckpt);
    let restored = Network::from_checkpoint(&back).unwrap();
    assert_eq!(restored.config, net.config);
    let refs: Vec<&PointCloud> = data.iter().collect();
    let (a, b) = (net.logits(&refs).unwrap(), restored.logits(&refs).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    // Truncation is reported rather than read as garbage.
    assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::read_from(&b"NOTACKPT...."[..]).is_err());
}
