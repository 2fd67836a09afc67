//! Minibatch training loop, run logging, and checkpoint persistence.
//!
//! One optimization step records the whole batch on a single tape: every
//! sample's forward pass shares one parameter binding, the per-sample
//! posterior vectors are stacked for the batch-level terms, and one
//! backward pass yields the parameter gradients. All randomness flows from
//! the seeded run stream, so a run is a pure function of
//! `(dataset, configs, seed)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adam::{adam_step, AdamError, AdamParams, AdamState};
use crate::graphdata::Dataset;
use crate::model::{Model, ModelConfig, NoiseDraw};
use crate::objective::{
    build_batch_objective, extract_breakdown, recon_bce_edge, recon_bce_node, LossBreakdown,
    ObjectiveError, ObjectiveSpec,
};
use crate::param::{collect_named, ParamStore};
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

fn default_iterations() -> usize {
    500
}
fn default_batch_size() -> usize {
    256
}
fn default_learning_rate() -> f64 {
    2e-4
}
fn default_eval_every() -> usize {
    50
}
fn default_grad_clip() -> f64 {
    5.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Global gradient-norm clip; deconvolution stacks blow up early
    /// without it.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: default_iterations(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            seed: 0,
            eval_every: default_eval_every(),
            grad_clip: default_grad_clip(),
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be at least 2 (density estimators need it)".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("train configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint version mismatch: file has {found}, this build expects {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error(
        "non-finite loss at iteration {iteration} (batch ids {batch_ids:?}); \
         last good state {}",
        dump.as_ref().map(|p| format!("dumped to {}", p.display())).unwrap_or_else(|| "not dumped (no checkpoint path)".into())
    )]
    Numeric {
        iteration: u64,
        batch_ids: Vec<usize>,
        dump: Option<PathBuf>,
        #[source]
        source: TapeError,
    },
}

/// Full training state: everything needed to resume or evaluate.
#[derive(Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub objective_spec: ObjectiveSpec,
    pub iteration: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn model(&self) -> Model<f32> {
        Model {
            config: self.model_config.clone(),
            params: self.params.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub breakdown: LossBreakdown,
}

/// Bernoulli cross-entropy of the constant all-0.5 prediction, per graph:
/// `ln 2` for every node entry and every off-diagonal edge entry.
pub fn half_baseline_bce(n: usize, k: usize, d: usize) -> (f64, f64) {
    let node = (n * d) as f64 * std::f64::consts::LN_2;
    let edge = ((n * n - n) * k) as f64 * std::f64::consts::LN_2;
    (node, edge)
}

/// Train a fresh or resumed model. The MWS dataset-size correction is
/// pinned to the training-set length. Returns the final checkpoint (also
/// written to `config.checkpoint_path` when set) and the loss log.
pub fn train(
    ds: &Dataset,
    model_config: ModelConfig,
    objective: ObjectiveSpec,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<(Checkpoint, Vec<TrainLogRecord>), TrainError> {
    config.validate()?;
    if ds.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    let sample = &ds.records[0].0;
    if sample.n != model_config.n || sample.k != model_config.k || sample.d != model_config.d {
        return Err(TrainError::Config(format!(
            "dataset graphs are {}x{}x{} (n/k/d) but the model expects {}x{}x{}",
            sample.n, sample.k, sample.d, model_config.n, model_config.k, model_config.d
        )));
    }
    if objective.variant.model_kind() != model_config.kind {
        return Err(TrainError::Config(format!(
            "objective {} requires model kind {:?}, got {:?}",
            objective.variant,
            objective.variant.model_kind(),
            model_config.kind
        )));
    }
    let objective = objective.with_n_data(ds.len());
    objective.validate()?;

    let adam_params = AdamParams::<f32> {
        learning_rate: config.learning_rate as f32,
        ..AdamParams::default()
    };
    let (mut params, mut adam, mut rng, start_iter) = match resume {
        Some(cp) => {
            if cp.model_config != model_config {
                return Err(TrainError::Config(
                    "resume checkpoint has a different model configuration".into(),
                ));
            }
            let mut rng = ChaCha8Rng::from_seed(cp.rng_seed);
            rng.set_word_pos(cp.rng_word_pos);
            (cp.params, cp.adam, rng, cp.iteration)
        }
        None => {
            let model = Model::<f32>::init(model_config.clone(), config.seed);
            let adam = AdamState::new(&model.params, adam_params);
            let rng = ChaCha8Rng::seed_from_u64(config.seed);
            (model.params, adam, rng, 0)
        }
    };

    let len = ds.len();
    let batch = config.batch_size.min(len).max(2.min(len));
    if batch < 2 {
        return Err(TrainError::Config(
            "dataset must contain at least 2 records".into(),
        ));
    }
    let groups = model_config.group_ranges();
    let mut order: Vec<usize> = (0..len).collect();
    let mut pos = len + 1; // force a shuffle at the first step
    let mut log = Vec::new();

    for step in 0..config.iterations {
        let iteration = start_iter + step as u64 + 1;
        if pos + batch > len {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let batch_ids: Vec<usize> = order[pos..pos + batch].to_vec();
        pos += batch;

        let noises: Vec<NoiseDraw<f32>> = (0..batch)
            .map(|_| NoiseDraw::draw(&model_config, &mut rng))
            .collect();

        let model = Model {
            config: model_config.clone(),
            params,
        };
        let mut tape = Tape::<f32>::new();
        let binding = model.bind(&mut tape);
        let mut recon_node = Vec::with_capacity(batch);
        let mut recon_edge = Vec::with_capacity(batch);
        let mut mu_rows = Vec::with_capacity(batch);
        let mut logvar_rows = Vec::with_capacity(batch);
        let mut z_rows = Vec::with_capacity(batch);
        for (&id, noise) in batch_ids.iter().zip(&noises) {
            let (graph, _) = &ds.records[id];
            let fwd = model.build_forward(&mut tape, &binding, graph, noise);
            let f_target = crate::model::graph_node_tensor::<f32>(graph);
            let e_target = crate::model::graph_edge_tensor::<f32>(graph);
            recon_node.push(recon_bce_node(&mut tape, fwd.fhat, &f_target));
            recon_edge.push(recon_bce_edge(&mut tape, fwd.ehat, &e_target));
            mu_rows.push(fwd.mu);
            logvar_rows.push(fwd.logvar);
            z_rows.push(fwd.z);
        }
        let mu = tape.stack_rows(&mu_rows);
        let logvar = tape.stack_rows(&logvar_rows);
        let z = tape.stack_rows(&z_rows);
        let batch_inputs = crate::objective::BatchInputs {
            recon_node,
            recon_edge,
            mu,
            logvar,
            z,
        };
        let loss = build_batch_objective(&mut tape, &objective, &groups, &batch_inputs)?;

        let grads = match tape.backward(loss.total) {
            Ok(g) => g,
            Err(err) => {
                let dump = dump_last_good(
                    config,
                    &model_config,
                    &objective,
                    iteration - 1,
                    &model.params,
                    &adam,
                    &rng,
                )?;
                return Err(TrainError::Numeric {
                    iteration,
                    batch_ids,
                    dump,
                    source: err,
                });
            }
        };
        let total_value = tape.value(loss.total).item();
        if !total_value.is_finite() {
            let dump = dump_last_good(
                config,
                &model_config,
                &objective,
                iteration - 1,
                &model.params,
                &adam,
                &rng,
            )?;
            return Err(TrainError::Numeric {
                iteration,
                batch_ids,
                dump,
                source: TapeError::Numeric {
                    op: "loss",
                    node: 0,
                },
            });
        }

        let mut named = collect_named(&grads, &binding, &model.params);
        clip_global_norm(&mut named, config.grad_clip as f32);

        params = model.params;
        adam_step(&mut params, &named, &mut adam)?;

        if iteration % config.eval_every as u64 == 0 || step + 1 == config.iterations {
            let breakdown = extract_breakdown(&tape, &objective, &loss);
            log.push(TrainLogRecord {
                iteration,
                breakdown,
            });
        }
    }

    let checkpoint = Checkpoint {
        model_config,
        objective_spec: objective,
        iteration: start_iter + config.iterations as u64,
        params,
        adam,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    };
    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&checkpoint, path)?;
    }
    Ok((checkpoint, log))
}

fn dump_last_good(
    config: &TrainConfig,
    model_config: &ModelConfig,
    objective: &ObjectiveSpec,
    iteration: u64,
    params: &ParamStore<f32>,
    adam: &AdamState<f32>,
    rng: &ChaCha8Rng,
) -> Result<Option<PathBuf>, TrainError> {
    let Some(path) = &config.checkpoint_path else {
        return Ok(None);
    };
    let mut dump = path.clone().into_os_string();
    dump.push(".lastgood");
    let dump = PathBuf::from(dump);
    let cp = Checkpoint {
        model_config: model_config.clone(),
        objective_spec: objective.clone(),
        iteration,
        params: params.clone(),
        adam: adam.clone(),
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    };
    save_checkpoint(&cp, &dump)?;
    Ok(Some(dump))
}

fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, clip: f32) {
    if clip <= 0.0 {
        return;
    }
    let mut sq_sum = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            sq_sum += (v as f64) * (v as f64);
        }
    }
    let norm = sq_sum.sqrt() as f32;
    if norm > clip {
        let scale = clip / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

// ---- checkpoint file format -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorPayload {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerPayload {
    step: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: BTreeMap<String, TensorPayload>,
    v: BTreeMap<String, TensorPayload>,
}

#[derive(Serialize, Deserialize)]
struct RngPayload {
    seed_b64: String,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    model_config: ModelConfig,
    objective_spec: ObjectiveSpec,
    iteration: u64,
    tensors: BTreeMap<String, TensorPayload>,
    optimizer: OptimizerPayload,
    rng: RngPayload,
}

fn encode_tensor(t: &Tensor<f32>) -> TensorPayload {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorPayload {
        shape: t.shape().to_vec(),
        data_b64: B64.encode(bytes),
    }
}

fn decode_tensor(p: &TensorPayload) -> Result<Tensor<f32>, TrainError> {
    let bytes = B64
        .decode(&p.data_b64)
        .map_err(|e| TrainError::Parse(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(TrainError::Parse("tensor payload not a multiple of 4 bytes".into()));
    }
    let numel: usize = p.shape.iter().product();
    if bytes.len() / 4 != numel {
        return Err(TrainError::Parse(format!(
            "tensor payload holds {} values but shape {:?} needs {numel}",
            bytes.len() / 4,
            p.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(p.shape.clone(), data))
}

fn encode_store(store: &ParamStore<f32>) -> BTreeMap<String, TensorPayload> {
    store
        .iter()
        .map(|(name, t)| (name.clone(), encode_tensor(t)))
        .collect()
}

fn encode_map(map: &BTreeMap<String, Tensor<f32>>) -> BTreeMap<String, TensorPayload> {
    map.iter()
        .map(|(name, t)| (name.clone(), encode_tensor(t)))
        .collect()
}

fn decode_map(
    map: &BTreeMap<String, TensorPayload>,
) -> Result<BTreeMap<String, Tensor<f32>>, TrainError> {
    map.iter()
        .map(|(name, p)| Ok((name.clone(), decode_tensor(p)?)))
        .collect()
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let (m, v) = cp.adam.moments();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        model_config: cp.model_config.clone(),
        objective_spec: cp.objective_spec.clone(),
        iteration: cp.iteration,
        tensors: encode_store(&cp.params),
        optimizer: OptimizerPayload {
            step: cp.adam.step,
            learning_rate: cp.adam.params.learning_rate as f64,
            beta1: cp.adam.params.beta1 as f64,
            beta2: cp.adam.params.beta2 as f64,
            epsilon: cp.adam.params.epsilon as f64,
            m: encode_map(m),
            v: encode_map(v),
        },
        rng: RngPayload {
            seed_b64: B64.encode(cp.rng_seed),
            word_pos_hi: (cp.rng_word_pos >> 64) as u64,
            word_pos_lo: cp.rng_word_pos as u64,
        },
    };
    let out = File::create(path)?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &file)
        .map_err(|e| TrainError::Parse(format!("checkpoint serialization failed: {e}")))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let file = File::open(path)?;
    let parsed: CheckpointFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| TrainError::Parse(e.to_string()))?;
    if parsed.version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: parsed.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut params = ParamStore::new();
    for (name, payload) in &parsed.tensors {
        params.insert(name.clone(), decode_tensor(payload)?);
    }
    let adam_params = AdamParams::<f32> {
        learning_rate: parsed.optimizer.learning_rate as f32,
        beta1: parsed.optimizer.beta1 as f32,
        beta2: parsed.optimizer.beta2 as f32,
        epsilon: parsed.optimizer.epsilon as f32,
    };
    let m = decode_map(&parsed.optimizer.m)?;
    let v = decode_map(&parsed.optimizer.v)?;
    let adam = AdamState::restore(&params, adam_params, parsed.optimizer.step, m, v);
    let seed_bytes = B64
        .decode(&parsed.rng.seed_b64)
        .map_err(|e| TrainError::Parse(format!("bad rng seed: {e}")))?;
    let rng_seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| TrainError::Parse("rng seed must be 32 bytes".into()))?;
    Ok(Checkpoint {
        model_config: parsed.model_config,
        objective_spec: parsed.objective_spec,
        iteration: parsed.iteration,
        params,
        adam,
        rng_seed,
        rng_word_pos: ((parsed.rng.word_pos_hi as u128) << 64) | parsed.rng.word_pos_lo as u128,
    })
}
