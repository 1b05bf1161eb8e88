use super::checkpoint::{Checkpoint, CheckpointError, SCHEMA_VERSION};
use super::gradcheck::max_gradient_error;
use super::*;
use ndarray::Array2;

pub(crate) fn arch(factors: usize) -> Architecture {
    Architecture {
        model: ModelConfig::default(),
        obs_dim: 5 * 9 + 7 * 18,
        action_factors: factors,
        max_cameras: 5,
    }
}

#[test]
fn deterministic_and_row_independent() {
    let net = Network::new(arch(3));
    let p: Vec<f64> = net.init_params(7);
    let obs = Array2::zeros((2, net.arch.obs_dim));
    let h = Array2::zeros((2, 128));
    let t = Array2::zeros((2, 4));
    let a = net.step(&p, obs.clone(), h.clone(), t.clone()).unwrap();
    let b = net.step(&p, obs, h, t).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.logits.row(0), a.logits.row(1));
    assert_eq!(a.h.row(0), a.h.row(1));
}

#[test]
fn shape_mismatch_reported() {
    let net = Network::new(arch(3));
    let p: Vec<f64> = net.init_params(0);
    let err = net
        .step(&p, Array2::zeros((1, 10)), Array2::zeros((1, 128)), Array2::zeros((1, 4)))
        .unwrap_err();
    assert_eq!(
        err,
        NeuralError::ShapeMismatch {
            what: "observation",
            expected: 171,
            got: 10
        }
    );
}

#[test]
fn specs_tile_parameter_vector() {
    let net = Network::new(arch(5));
    let mut next = 0;
    for s in &net.specs {
        assert_eq!(s.offset, next, "{}", s.name);
        next += s.len();
    }
    assert_eq!(next, net.n_params);
}

#[test]
fn full_network_gradient_check() {
    let err = max_gradient_error(60, 3);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn checkpoint_round_trip() {
    let net = Network::new(arch(3));
    let p: Vec<f32> = net.init_params(9);
    let ck = Checkpoint::from_params(&net, &p);
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&buf[..]).unwrap();
    assert_eq!(back, ck);
    back.ensure_arch(&net.arch).unwrap();
    assert!(back.ensure_arch(&arch(5)).is_err());

    buf[8..12].copy_from_slice(&(SCHEMA_VERSION + 1).to_le_bytes());
    match Checkpoint::read_from(&buf[..]) {
        Err(CheckpointError::VersionMismatch { found, .. }) => assert_eq!(found, SCHEMA_VERSION + 1),
        other => panic!("unexpected {other:?}"),
    }
    buf[0] = b'X';
    assert!(matches!(Checkpoint::read_from(&buf[..]), Err(CheckpointError::BadMagic)));
}

#[test]
fn architecture_hash_tracks_layout() {
    assert_eq!(arch(3).hash(), arch(3).hash());
    assert_ne!(arch(3).hash(), arch(5).hash());
}
