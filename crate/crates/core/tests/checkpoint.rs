use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use softq::agent::{AgentConfig, AgentState, Algorithm, PolicySnapshot};
use softq::checkpoint::{
    load_agent, load_network, load_policy, load_policy_table, load_pool, load_q_table,
    load_snapshot, save_agent, save_network, save_policy_table, save_pool, save_q_table,
    save_snapshot, CheckpointError, PoolManifest, FORMAT_VERSION, NETWORK_MAGIC,
};
use softq::mdp::build_gridworld;
use softq::nn::{param_count, MlpParams};
use softq::selfplay::{GateState, OpponentPool, VersionedSnapshot};
use softq::tabular::{soft_value_iteration, TabularPolicy};

fn random_inputs(dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn trained_agent() -> AgentState {
    let mut cfg = AgentConfig::new(Algorithm::Qop, vec![5, 12, 7, 3]);
    cfg.alpha = 0.37;
    cfg.n = 3;
    let q1 = MlpParams::init(&cfg.layer_sizes, 1).unwrap();
    let q2 = MlpParams::init(&cfg.layer_sizes, 2).unwrap();
    let mut agent = AgentState::from_networks(cfg, q1, q2).unwrap();
    agent.q1_target = MlpParams::init(&[5, 12, 7, 3], 3).unwrap();
    agent
}

#[test]
fn network_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut net = MlpParams::init(&[6, 10, 4], 9).unwrap();
    for (i, b) in net.biases_mut(0).iter_mut().enumerate() {
        *b = (i as f64 * 0.731).sin();
    }
    save_network(&path, &net).unwrap();
    let back = load_network(&path, Some(&[6, 10, 4])).unwrap();
    assert_eq!(back, net);
    for x in random_inputs(6, 50) {
        let (a, b) = (net.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn network_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let sizes = [2usize, 3, 1];
    let data: Vec<f64> = (0..param_count(&sizes)).map(|i| i as f64 + 0.5).collect();
    save_network(&path, &MlpParams::from_flat(&sizes, data.clone()).unwrap()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[0..4], NETWORK_MAGIC);
    assert_eq!(
        u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        FORMAT_VERSION
    );
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    let dims: Vec<u64> = (0..3)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()))
        .collect();
    assert_eq!(dims, vec![2, 3, 1]);
    let floats: Vec<f64> = bytes[36..]
        .chunks(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(floats, data);
}

#[test]
fn agent_round_trip_preserves_all_four_networks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.ckpt");
    let agent = trained_agent();
    save_agent(&path, &agent).unwrap();
    let back = load_agent(&path).unwrap();
    assert_eq!(back.config, agent.config);
    assert_eq!(back.alpha(), agent.alpha());
    for (a, b) in [
        (&agent.q1, &back.q1),
        (&agent.q2, &back.q2),
        (&agent.q1_target, &back.q1_target),
        (&agent.q2_target, &back.q2_target),
    ] {
        assert_eq!(a, b);
    }
    for x in random_inputs(5, 20) {
        let (p, q) = (agent.target_q(&x).unwrap(), back.target_q(&x).unwrap());
        assert!(p.iter().zip(&q).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    let policy = load_policy(&path).unwrap();
    assert_eq!(policy, agent.snapshot());
}

#[test]
fn snapshot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.ckpt");
    let snap = trained_agent().snapshot();
    save_snapshot(&path, &snap).unwrap();
    assert_eq!(load_snapshot(&path).unwrap(), snap);
    assert_eq!(load_policy(&path).unwrap(), snap);
}

#[test]
fn shape_mismatch_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_network(&path, &MlpParams::init(&[4, 8, 2], 0).unwrap()).unwrap();
    match load_network(&path, Some(&[4, 8, 3])) {
        Err(e @ CheckpointError::Shape { .. }) => {
            let msg = e.to_string();
            assert!(
                msg.contains("[4, 8, 2]") && msg.contains("[4, 8, 3]"),
                "{msg}"
            );
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn version_mismatch_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_network(&path, &MlpParams::init(&[4, 2], 0).unwrap()).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4..8].copy_from_slice(&(FORMAT_VERSION + 6).to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    match load_network(&path, None) {
        Err(e @ CheckpointError::Version { .. }) => {
            assert!(e.to_string().contains(&(FORMAT_VERSION + 6).to_string()))
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn wrong_kind_and_truncation_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net_path = dir.path().join("net.ckpt");
    save_network(&net_path, &MlpParams::init(&[4, 2], 0).unwrap()).unwrap();
    assert!(matches!(
        load_agent(&net_path),
        Err(CheckpointError::Magic { .. })
    ));
    assert!(matches!(
        load_policy(&net_path),
        Err(CheckpointError::Magic { .. })
    ));
    let bytes = std::fs::read(&net_path).unwrap();
    std::fs::write(&net_path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        load_network(&net_path, None),
        Err(CheckpointError::Corrupt(_))
    ));
    let mut long = bytes.clone();
    long.push(0);
    std::fs::write(&net_path, long).unwrap();
    assert!(matches!(
        load_network(&net_path, None),
        Err(CheckpointError::Corrupt(_))
    ));
}

#[test]
fn missing_file_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.ckpt");
    let err = load_agent(&path).unwrap_err();
    assert!(matches!(err, CheckpointError::Io { .. }));
    assert!(err.to_string().contains("absent.ckpt"));
}

#[test]
fn tables_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mdp = build_gridworld(3, 3, 0.9, 0.1).unwrap();
    let q = soft_value_iteration(&mdp, 0.2, 1e-12, 10_000).unwrap().q;
    let pi = TabularPolicy::softmax_of(&q).unwrap();
    save_q_table(&dir.path().join("q.tbl"), &q).unwrap();
    save_policy_table(&dir.path().join("pi.tbl"), &pi).unwrap();
    assert_eq!(load_q_table(&dir.path().join("q.tbl")).unwrap(), q);
    assert_eq!(load_policy_table(&dir.path().join("pi.tbl")).unwrap(), pi);
    assert!(load_q_table(&dir.path().join("pi.tbl")).is_err());
}

#[test]
fn pool_round_trip_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let snap = |seed: u64, version: u64| {
        let net = MlpParams::init(&[14, 8, 6], seed).unwrap();
        VersionedSnapshot {
            version,
            snapshot: Arc::new(PolicySnapshot {
                q_a: net.clone(),
                q_b: net,
                alpha: 0.05,
            }),
        }
    };
    let mut pool = OpponentPool::new(snap(0, 1), 0.8, 3).unwrap();
    let mut gate = GateState::default();
    for v in [4, 9, 12, 20] {
        pool.promote_target(snap(v, v), &mut gate);
    }
    let manifest_path = save_pool(dir.path(), &pool).unwrap();
    let manifest: PoolManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest.target.version, 20);
    assert_eq!(
        manifest
            .history
            .iter()
            .map(|e| e.version)
            .collect::<Vec<_>>(),
        vec![4, 9, 12]
    );
    let back = load_pool(dir.path()).unwrap();
    assert_eq!(back.target(), pool.target());
    assert!(back.history().eq(pool.history()));
    assert_eq!(back.mix_prob, 0.8);
    assert_eq!(back.history_bound(), 3);
}
