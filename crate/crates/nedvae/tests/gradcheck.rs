//! Finite-difference conformance for the whole layer catalog, the full
//! model forward+loss, and the batch objective with density estimators.
//! Everything runs at f64 with h = 1e-5 against a 1e-3 tolerance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nedvae::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use nedvae::graphdata::{gen_er, GenConfig};
use nedvae::layers::{
    dense, edge_to_edge_conv, edge_to_edge_deconv, edge_to_node_pool, graph_conv,
    node_to_edge_deconv, normalized_adjacency, row_deconv1d, Activation,
};
use nedvae::model::{graph_edge_tensor, graph_node_tensor, Model, ModelConfig, ModelKind, NoiseDraw};
use nedvae::objective::{
    build_batch_objective, recon_bce_edge, recon_bce_node, BatchInputs, ObjectiveSpec, Variant,
};
use nedvae::tape::{Tape, VarId};
use nedvae::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, 0.9, &mut rng(seed))
}

/// Scalar probe: elementwise-multiply by a fixed random mask and sum, so
/// every output entry contributes a distinct gradient path.
fn probed_sum(tape: &mut Tape<f64>, out: VarId, seed: u64) -> VarId {
    let shape = tape.shape(out).to_vec();
    let mask = tape.constant(Tensor::rand_uniform(shape, 1.0, &mut rng(seed ^ 0xa5a5)));
    let masked = tape.mul(out, mask);
    tape.sum_all(masked)
}

#[test]
fn dense_passes_gradcheck_over_20_seeds() {
    for seed in 0..20 {
        let x = rand_t(vec![4, 5], seed * 3);
        let w = rand_t(vec![5, 3], seed * 3 + 1);
        let b = rand_t(vec![3], seed * 3 + 2);
        let report = check_gradients(&[x, w, b], DEFAULT_STEP, |tape, vars| {
            let y = dense(tape, vars[0], vars[1], vars[2], Activation::LeakyRelu);
            probed_sum(tape, y, seed)
        });
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn graph_conv_passes_gradcheck_over_20_seeds() {
    let ds = gen_er(&GenConfig::er_default(6, 20), 9).unwrap();
    for seed in 0..20 {
        let adj = normalized_adjacency::<f64>(&graph_edge_tensor(&ds.records[seed as usize].0));
        let h = rand_t(vec![6, 4], seed * 5);
        let w = rand_t(vec![4, 3], seed * 5 + 1);
        let report = check_gradients(&[h, w], DEFAULT_STEP, |tape, vars| {
            let nadj = tape.constant(adj.clone());
            let y = graph_conv(tape, vars[0], nadj, vars[1], Activation::LeakyRelu);
            probed_sum(tape, y, seed)
        });
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn edge_to_edge_conv_passes_gradcheck_over_20_seeds() {
    for seed in 0..20 {
        let h = rand_t(vec![5, 5, 2], seed * 7);
        let wr = rand_t(vec![2, 3], seed * 7 + 1);
        let wc = rand_t(vec![2, 3], seed * 7 + 2);
        let b = rand_t(vec![3], seed * 7 + 3);
        let report = check_gradients(&[h, wr, wc, b], DEFAULT_STEP, |tape, vars| {
            let y = edge_to_edge_conv(tape, vars[0], vars[1], vars[2], vars[3], Activation::LeakyRelu);
            probed_sum(tape, y, seed)
        });
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn edge_to_edge_deconv_passes_gradcheck_over_20_seeds() {
    for seed in 0..20 {
        let h = rand_t(vec![4, 4, 3], seed * 11);
        let wr = rand_t(vec![3, 2], seed * 11 + 1);
        let wc = rand_t(vec![3, 2], seed * 11 + 2);
        let b = rand_t(vec![2], seed * 11 + 3);
        let report = check_gradients(&[h, wr, wc, b], DEFAULT_STEP, |tape, vars| {
            let y =
                edge_to_edge_deconv(tape, vars[0], vars[1], vars[2], vars[3], Activation::Sigmoid);
            probed_sum(tape, y, seed)
        });
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn edge_to_node_pool_passes_gradcheck_over_20_seeds() {
    for seed in 0..20 {
        let h = rand_t(vec![5, 5, 3], seed * 13);
        let w = rand_t(vec![3, 4], seed * 13 + 1);
        let b = rand_t(vec![4], seed * 13 + 2);
        let report = check_gradients(&[h, w, b], DEFAULT_STEP, |tape, vars| {
            let y = edge_to_node_pool(tape, vars[0], vars[1], vars[2], Activation::LeakyRelu);
            probed_sum(tape, y, seed)
        });
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn node_to_edge_deconv_passes_gradcheck_over_20_seeds() {
    for seed in 0..20 {
        let u = rand_t(vec![5, 3], seed * 17);
        let w = rand_t(vec![6, 2], seed * 17 + 1);
        let b = rand_t(vec![2], seed * 17 + 2);
        let report = check_gradients(&[u, w, b], DEFAULT_STEP, |tape, vars| {
            let y = node_to_edge_deconv(tape, vars[0], vars[1], vars[2], Activation::LeakyRelu);
            probed_sum(tape, y, seed)
        });
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn row_deconv1d_passes_gradcheck_over_20_seeds() {
    for seed in 0..20 {
        let h = rand_t(vec![6, 4], seed * 19);
        let w = rand_t(vec![4, 2], seed * 19 + 1);
        let b = rand_t(vec![2], seed * 19 + 2);
        let report = check_gradients(&[h, w, b], DEFAULT_STEP, |tape, vars| {
            let y = row_deconv1d(tape, vars[0], vars[1], vars[2], Activation::Sigmoid);
            probed_sum(tape, y, seed)
        });
        assert!(report.passes(DEFAULT_TOLERANCE), "seed {seed}: {report:?}");
    }
}

/// Full model forward plus reconstruction and KL losses, differentiated
/// with respect to every parameter.
#[test]
fn full_forward_and_loss_pass_gradcheck() {
    let n = 6;
    let ds = gen_er(&GenConfig::er_default(n, 3), 31).unwrap();
    let config = ModelConfig::new(n, 1, 2, ModelKind::NedVae);
    let model = Model::<f64>::init(config.clone(), 5);
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let tensors: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let spec = ObjectiveSpec::new(Variant::NedVae).with_n_data(3);
    let groups = config.group_ranges();
    let noises: Vec<NoiseDraw<f64>> = (0..3)
        .map(|i| NoiseDraw::from_seed(&config, 100 + i))
        .collect();

    let build = |tape: &mut Tape<f64>, vars: &[VarId]| {
        // the forward builder reads parameters through the binding, so the
        // externally-perturbed vars are wired in directly
        let m = Model {
            config: config.clone(),
            params: nedvae::param::ParamStore::<f64>::new(),
        };
        let binding =
            nedvae::param::ParamBinding::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let mut recon_node = Vec::new();
        let mut recon_edge = Vec::new();
        let mut mu_rows = Vec::new();
        let mut lv_rows = Vec::new();
        let mut z_rows = Vec::new();
        for (i, (graph, _)) in ds.records.iter().enumerate() {
            let fwd = m.build_forward(tape, &binding, graph, &noises[i]);
            recon_node.push(recon_bce_node(tape, fwd.fhat, &graph_node_tensor(graph)));
            recon_edge.push(recon_bce_edge(tape, fwd.ehat, &graph_edge_tensor(graph)));
            mu_rows.push(fwd.mu);
            lv_rows.push(fwd.logvar);
            z_rows.push(fwd.z);
        }
        let mu = tape.stack_rows(&mu_rows);
        let logvar = tape.stack_rows(&lv_rows);
        let z = tape.stack_rows(&z_rows);
        let batch = BatchInputs {
            recon_node,
            recon_edge,
            mu,
            logvar,
            z,
        };
        build_batch_objective(tape, &spec, &groups, &batch)
            .expect("objective builds")
            .total
    };
    let report = check_gradients(&tensors, DEFAULT_STEP, build);
    assert!(
        report.passes(DEFAULT_TOLERANCE),
        "full forward+loss gradcheck: max rel err {} over {} components",
        report.max_rel_err,
        report.components
    );
}

/// The estimator-based objective (density estimators included) must also be
/// exactly differentiable end to end.
#[test]
fn estimator_objective_passes_gradcheck() {
    let b = 6;
    let l = 6;
    let groups = vec![0..2, 2..4, 4..6];
    let mu = rand_t(vec![b, l], 41);
    let logvar = rand_t(vec![b, l], 42);
    let z = rand_t(vec![b, l], 43);
    let mut spec = ObjectiveSpec::new(Variant::NedVtcvae).with_n_data(b);
    spec.beta = 2.0;
    spec.gamma1 = 1.5;
    spec.gamma2 = 0.5;
    spec.gamma3 = 3.0;
    let report = check_gradients(&[mu, logvar, z], DEFAULT_STEP, |tape, vars| {
        let recon_node: Vec<VarId> = (0..b)
            .map(|i| tape.constant(Tensor::scalar(1.0 + i as f64)))
            .collect();
        let recon_edge: Vec<VarId> = (0..b)
            .map(|i| tape.constant(Tensor::scalar(2.0 + i as f64)))
            .collect();
        let batch = BatchInputs {
            recon_node,
            recon_edge,
            mu: vars[0],
            logvar: vars[1],
            z: vars[2],
        };
        build_batch_objective(tape, &spec, &groups, &batch)
            .expect("objective builds")
            .total
    });
    assert!(
        report.passes(DEFAULT_TOLERANCE),
        "estimator gradcheck: max rel err {}",
        report.max_rel_err
    );
}
