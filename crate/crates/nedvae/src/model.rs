//! The model family: three sub-encoders inferring grouped posteriors over
//! `(z_e, z_f, z_g)`, reparameterized sampling, node/edge co-decoders, and
//! the single-encoder baseline that infers one undifferentiated latent.
//!
//! Information routing is architectural: the node decoder reads only
//! `(z_f, z_g)` and the edge decoder only `(z_e, z_g)`, so gradients of
//! node outputs with respect to `z_e` (and edge outputs with respect to
//! `z_f`) vanish identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graphdata::AttributedGraph;
use crate::layers::{
    dense, edge_to_edge_conv, edge_to_edge_deconv, edge_to_node_pool, graph_conv,
    node_to_edge_deconv, normalized_adjacency, row_deconv1d, Activation,
};
use crate::param::{ParamBinding, ParamStore};
use crate::tape::{Tape, TapeError, VarId};
use crate::tensor::{Scalar, Tensor};

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    NedVae,
    Gdvae,
}

/// One of the three latent groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentGroup {
    E,
    F,
    G,
}

impl LatentGroup {
    pub const ALL: [LatentGroup; 3] = [LatentGroup::E, LatentGroup::F, LatentGroup::G];
}

impl std::fmt::Display for LatentGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LatentGroup::E => write!(f, "e"),
            LatentGroup::F => write!(f, "f"),
            LatentGroup::G => write!(f, "g"),
        }
    }
}

fn default_latent() -> usize {
    3
}
fn default_enc_ch() -> [usize; 3] {
    [10, 8, 6]
}
fn default_node_dec_feat() -> usize {
    16
}
fn default_edge_dec_feat() -> usize {
    6
}
fn default_node_dec_ch() -> [usize; 2] {
    [8, 10]
}
fn default_edge_dec_ch() -> [usize; 2] {
    [8, 6]
}
fn default_kind() -> ModelKind {
    ModelKind::NedVae
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    #[serde(default = "default_latent")]
    pub l1: usize,
    #[serde(default = "default_latent")]
    pub l2: usize,
    #[serde(default = "default_latent")]
    pub l3: usize,
    /// Channel widths of the encoder stacks.
    #[serde(default = "default_enc_ch")]
    pub enc_channels: [usize; 3],
    /// Width of the per-node feature vector replicated by the node decoder.
    #[serde(default = "default_node_dec_feat")]
    pub node_dec_feat: usize,
    /// Width of the per-node feature vector replicated by the edge decoder.
    #[serde(default = "default_edge_dec_feat")]
    pub edge_dec_feat: usize,
    #[serde(default = "default_node_dec_ch")]
    pub node_dec_channels: [usize; 2],
    #[serde(default = "default_edge_dec_ch")]
    pub edge_dec_channels: [usize; 2],
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
}

impl ModelConfig {
    pub fn new(n: usize, k: usize, d: usize, kind: ModelKind) -> Self {
        ModelConfig {
            n,
            k,
            d,
            l1: default_latent(),
            l2: default_latent(),
            l3: default_latent(),
            enc_channels: default_enc_ch(),
            node_dec_feat: default_node_dec_feat(),
            edge_dec_feat: default_edge_dec_feat(),
            node_dec_channels: default_node_dec_ch(),
            edge_dec_channels: default_edge_dec_ch(),
            kind,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.l1 + self.l2 + self.l3
    }

    /// Column range of a group inside the concatenated latent
    /// `[z_e; z_f; z_g]`.
    pub fn group_range(&self, group: LatentGroup) -> std::ops::Range<usize> {
        match group {
            LatentGroup::E => 0..self.l1,
            LatentGroup::F => self.l1..self.l1 + self.l2,
            LatentGroup::G => self.l1 + self.l2..self.latent_dim(),
        }
    }

    pub fn group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        LatentGroup::ALL.iter().map(|&g| self.group_range(g)).collect()
    }
}

/// Per-group posterior means and clamped log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<T: Scalar> {
    pub mu_e: Tensor<T>,
    pub logvar_e: Tensor<T>,
    pub mu_f: Tensor<T>,
    pub logvar_f: Tensor<T>,
    pub mu_g: Tensor<T>,
    pub logvar_g: Tensor<T>,
}

impl<T: Scalar> GaussianPosterior<T> {
    /// Concatenated means `[mu_e; mu_f; mu_g]`.
    pub fn mu_concat(&self) -> Vec<T> {
        let mut out = self.mu_e.data().to_vec();
        out.extend_from_slice(self.mu_f.data());
        out.extend_from_slice(self.mu_g.data());
        out
    }

    pub fn logvar_concat(&self) -> Vec<T> {
        let mut out = self.logvar_e.data().to_vec();
        out.extend_from_slice(self.logvar_f.data());
        out.extend_from_slice(self.logvar_g.data());
        out
    }

    fn from_concat(config: &ModelConfig, mu: &[T], logvar: &[T]) -> Self {
        let r = |g| config.group_range(g);
        let (re, rf, rg) = (r(LatentGroup::E), r(LatentGroup::F), r(LatentGroup::G));
        GaussianPosterior {
            mu_e: Tensor::vector(mu[re.clone()].to_vec()),
            logvar_e: Tensor::vector(logvar[re].to_vec()),
            mu_f: Tensor::vector(mu[rf.clone()].to_vec()),
            logvar_f: Tensor::vector(logvar[rf].to_vec()),
            mu_g: Tensor::vector(mu[rg.clone()].to_vec()),
            logvar_g: Tensor::vector(logvar[rg].to_vec()),
        }
    }
}

/// Sampled latent code, one vector per group.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T: Scalar> {
    pub z_e: Tensor<T>,
    pub z_f: Tensor<T>,
    pub z_g: Tensor<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn concat(&self) -> Vec<T> {
        let mut out = self.z_e.data().to_vec();
        out.extend_from_slice(self.z_f.data());
        out.extend_from_slice(self.z_g.data());
        out
    }

    pub fn from_concat(config: &ModelConfig, z: &[T]) -> Self {
        LatentCode {
            z_e: Tensor::vector(z[config.group_range(LatentGroup::E)].to_vec()),
            z_f: Tensor::vector(z[config.group_range(LatentGroup::F)].to_vec()),
            z_g: Tensor::vector(z[config.group_range(LatentGroup::G)].to_vec()),
        }
    }
}

/// Per-decode standard-normal node assignment vector `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeAssignment<T: Scalar> {
    pub s: Tensor<T>,
}

impl<T: Scalar> NodeAssignment<T> {
    pub fn draw(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NodeAssignment {
            s: Tensor::randn(vec![n], &mut rng),
        }
    }
}

/// Noise consumed by one forward pass: group-ordered reparameterization
/// draws followed by the node assignment vector.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T: Scalar> {
    pub eps: Tensor<T>,
    pub s: Tensor<T>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn draw(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        NoiseDraw {
            eps: Tensor::randn(vec![config.latent_dim()], rng),
            s: Tensor::randn(vec![config.n], rng),
        }
    }

    pub fn from_seed(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::draw(config, &mut rng)
    }
}

/// Reparameterized sample `z = mu + exp(logvar / 2) * eps` per group.
pub fn reparameterize<T: Scalar>(
    config: &ModelConfig,
    posterior: &GaussianPosterior<T>,
    noise_seed: u64,
) -> LatentCode<T> {
    let noise = NoiseDraw::from_seed(config, noise_seed);
    let mu = posterior.mu_concat();
    let logvar = posterior.logvar_concat();
    let half = T::from_f64(0.5);
    let z: Vec<T> = mu
        .iter()
        .zip(&logvar)
        .zip(noise.eps.data())
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect();
    LatentCode::from_concat(config, &z)
}

/// Tape nodes produced by one forward pass.
pub struct ForwardVars {
    pub mu: VarId,
    pub logvar: VarId,
    pub z: VarId,
    pub fhat: VarId,
    pub ehat: VarId,
}

/// Value-level forward output.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    pub fhat: Tensor<T>,
    pub ehat: Tensor<T>,
    pub posterior: GaussianPosterior<T>,
    pub latent: LatentCode<T>,
}

#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Xavier-uniform initialization; weights are drawn in lexicographic
    /// parameter-name order from one seeded stream. Weights feeding the
    /// row/column aggregations see coherent sums over all `n` nodes, whose
    /// variance grows with `n^2`; their fan-in is scaled accordingly so
    /// pre-activations start near unit scale.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut shapes: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let [c1, c2, c3] = config.enc_channels;
        let (n, k, d) = (config.n, config.k, config.d);
        let (l1, l2, l3) = (config.l1, config.l2, config.l3);
        let l = config.latent_dim();
        {
            let mut weight = |name: &str, shape: Vec<usize>, fan_in: usize| {
                shapes.push((name.to_string(), shape, fan_in));
            };
            match config.kind {
                ModelKind::NedVae => {
                    weight("enc_node.conv1.w", vec![d, c1], d);
                    weight("enc_node.conv1.b", vec![c1], 0);
                    weight("enc_node.conv2.w", vec![c1, c2], c1);
                    weight("enc_node.conv2.b", vec![c2], 0);
                    weight("enc_node.mu.w", vec![n * c2, l2], n * c2);
                    weight("enc_node.mu.b", vec![l2], 0);
                    weight("enc_node.logvar.w", vec![n * c2, l2], n * c2);
                    weight("enc_node.logvar.b", vec![l2], 0);

                    weight("enc_edge.conv1.wr", vec![k, c1], n * n * k);
                    weight("enc_edge.conv1.wc", vec![k, c1], n * n * k);
                    weight("enc_edge.conv1.b", vec![c1], 0);
                    weight("enc_edge.conv2.wr", vec![c1, c2], n * n * c1);
                    weight("enc_edge.conv2.wc", vec![c1, c2], n * n * c1);
                    weight("enc_edge.conv2.b", vec![c2], 0);
                    weight("enc_edge.pool.w", vec![c2, c3], n * n * c2);
                    weight("enc_edge.pool.b", vec![c3], 0);
                    weight("enc_edge.mu.w", vec![c3, l1], c3);
                    weight("enc_edge.mu.b", vec![l1], 0);
                    weight("enc_edge.logvar.w", vec![c3, l1], c3);
                    weight("enc_edge.logvar.b", vec![l1], 0);

                    weight("enc_graph.conv1.w", vec![d, c1], d);
                    weight("enc_graph.conv2.w", vec![c1, c2], c1);
                    weight("enc_graph.fc.w", vec![c2, c3], c2);
                    weight("enc_graph.fc.b", vec![c3], 0);
                    weight("enc_graph.mu.w", vec![c3, l3], c3);
                    weight("enc_graph.mu.b", vec![l3], 0);
                    weight("enc_graph.logvar.w", vec![c3, l3], c3);
                    weight("enc_graph.logvar.b", vec![l3], 0);
                }
                ModelKind::Gdvae => {
                    weight("enc.conv1.w", vec![d, c1], d);
                    weight("enc.conv2.w", vec![c1, c2], c1);
                    weight("enc.fc.w", vec![c2, c3], c2);
                    weight("enc.fc.b", vec![c3], 0);
                    weight("enc.mu.w", vec![c3, l], c3);
                    weight("enc.mu.b", vec![l], 0);
                    weight("enc.logvar.w", vec![c3, l], c3);
                    weight("enc.logvar.b", vec![l], 0);
                }
            }
            let feat = config.node_dec_feat;
            weight("dec_node.fc.w", vec![l2 + l3, feat], l2 + l3);
            weight("dec_node.fc.b", vec![feat], 0);
            let [nd1, nd2] = config.node_dec_channels;
            weight("dec_node.rd1.w", vec![feat + 1, nd1], feat + 1);
            weight("dec_node.rd1.b", vec![nd1], 0);
            weight("dec_node.rd2.w", vec![nd1, nd2], nd1);
            weight("dec_node.rd2.b", vec![nd2], 0);
            weight("dec_node.rd3.w", vec![nd2, d], nd2);
            weight("dec_node.rd3.b", vec![d], 0);

            let efeat = config.edge_dec_feat;
            weight("dec_edge.fc.w", vec![l1 + l3, efeat], l1 + l3);
            weight("dec_edge.fc.b", vec![efeat], 0);
            let [ed1, ed2] = config.edge_dec_channels;
            weight("dec_edge.n2e.w", vec![2 * (efeat + 1), ed1], 2 * (efeat + 1));
            weight("dec_edge.n2e.b", vec![ed1], 0);
            weight("dec_edge.e2e1.wr", vec![ed1, ed2], n * n * ed1);
            weight("dec_edge.e2e1.wc", vec![ed1, ed2], n * n * ed1);
            weight("dec_edge.e2e1.b", vec![ed2], 0);
            // Output layer starts 16x smaller so untrained reconstructions
            // sit near the uninformative 0.5 plateau.
            weight("dec_edge.e2e2.wr", vec![ed2, k], 256 * n * n * ed2);
            weight("dec_edge.e2e2.wc", vec![ed2, k], 256 * n * n * ed2);
            weight("dec_edge.e2e2.b", vec![k], 0);
        }

        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, fan_in) in shapes {
            let tensor = if name.ends_with("logvar.b") {
                // Posteriors start confident (sigma ~ 0.37). At sigma = 1 the
                // KL gradient w.r.t. logvar vanishes and sampling noise
                // swamps the means, freezing dimensions in the dead-latent
                // plateau; starting below the prior lets reconstruction
                // decide which dimensions earn their keep.
                Tensor::filled(shape, T::from_f64(-2.0))
            } else if name.ends_with(".b") {
                // Slightly off zero: integer-valued edge tensors would
                // otherwise park pre-activations exactly on the leaky-ReLU
                // kink.
                Tensor::filled(shape, T::from_f64(0.01))
            } else {
                let fan_out = shape[1];
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::rand_uniform(shape, limit, &mut rng)
            };
            params.insert(name, tensor);
        }
        Model { config, params }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ParamBinding {
        self.params.bind(tape)
    }

    fn heads(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        h: VarId,
        prefix: &str,
    ) -> (VarId, VarId) {
        let mu = dense(
            tape,
            h,
            bind.var(&format!("{prefix}.mu.w")),
            bind.var(&format!("{prefix}.mu.b")),
            Activation::Identity,
        );
        let lv = dense(
            tape,
            h,
            bind.var(&format!("{prefix}.logvar.w")),
            bind.var(&format!("{prefix}.logvar.b")),
            Activation::Identity,
        );
        let clamp = T::from_f64(LOGVAR_CLAMP);
        let lv = tape.clamp(lv, -clamp, clamp);
        (mu, lv)
    }

    /// Node encoder: two per-row 1-D convolutions, flatten, dense heads.
    pub fn encode_node(&self, tape: &mut Tape<T>, bind: &ParamBinding, f: VarId) -> (VarId, VarId) {
        let h = dense(
            tape,
            f,
            bind.var("enc_node.conv1.w"),
            bind.var("enc_node.conv1.b"),
            Activation::LeakyRelu,
        );
        let h = dense(
            tape,
            h,
            bind.var("enc_node.conv2.w"),
            bind.var("enc_node.conv2.b"),
            Activation::LeakyRelu,
        );
        let flat_len = self.config.n * self.config.enc_channels[1];
        let flat = tape.reshape(h, vec![flat_len]);
        self.heads(tape, bind, flat, "enc_node")
    }

    /// Edge encoder: two edge convolutions, pooling to node level, then a
    /// permutation-invariant mean over nodes before the heads.
    pub fn encode_edge(&self, tape: &mut Tape<T>, bind: &ParamBinding, e: VarId) -> (VarId, VarId) {
        let h = edge_to_edge_conv(
            tape,
            e,
            bind.var("enc_edge.conv1.wr"),
            bind.var("enc_edge.conv1.wc"),
            bind.var("enc_edge.conv1.b"),
            Activation::LeakyRelu,
        );
        let h = edge_to_edge_conv(
            tape,
            h,
            bind.var("enc_edge.conv2.wr"),
            bind.var("enc_edge.conv2.wc"),
            bind.var("enc_edge.conv2.b"),
            Activation::LeakyRelu,
        );
        let nodes = edge_to_node_pool(
            tape,
            h,
            bind.var("enc_edge.pool.w"),
            bind.var("enc_edge.pool.b"),
            Activation::LeakyRelu,
        );
        let pooled = tape.mean_rows(nodes);
        self.heads(tape, bind, pooled, "enc_edge")
    }

    /// Graph encoder: two graph convolutions over `F` with the normalized
    /// adjacency from `E`, mean over nodes, one dense layer, heads.
    pub fn encode_graph(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        norm_adj: VarId,
        f: VarId,
    ) -> (VarId, VarId) {
        self.graph_trunk_heads(tape, bind, norm_adj, f, "enc_graph")
    }

    fn graph_trunk_heads(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        norm_adj: VarId,
        f: VarId,
        prefix: &str,
    ) -> (VarId, VarId) {
        let h = graph_conv(
            tape,
            f,
            norm_adj,
            bind.var(&format!("{prefix}.conv1.w")),
            Activation::LeakyRelu,
        );
        let h = graph_conv(
            tape,
            h,
            norm_adj,
            bind.var(&format!("{prefix}.conv2.w")),
            Activation::LeakyRelu,
        );
        let pooled = tape.mean_rows(h);
        let h = dense(
            tape,
            pooled,
            bind.var(&format!("{prefix}.fc.w")),
            bind.var(&format!("{prefix}.fc.b")),
            Activation::LeakyRelu,
        );
        self.heads(tape, bind, h, prefix)
    }

    /// Node decoder: `(z_f, z_g)` to a replicated feature matrix with the
    /// node assignment column, then a row-deconvolution stack and sigmoid.
    pub fn decode_node(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        z_f: VarId,
        z_g: VarId,
        s: VarId,
    ) -> VarId {
        let z = tape.concat_cols(z_f, z_g);
        let feat = dense(
            tape,
            z,
            bind.var("dec_node.fc.w"),
            bind.var("dec_node.fc.b"),
            Activation::LeakyRelu,
        );
        let rows = tape.repeat_rows(feat, self.config.n);
        let s_col = tape.reshape(s, vec![self.config.n, 1]);
        let h = tape.concat_cols(rows, s_col);
        let h = row_deconv1d(
            tape,
            h,
            bind.var("dec_node.rd1.w"),
            bind.var("dec_node.rd1.b"),
            Activation::LeakyRelu,
        );
        let h = row_deconv1d(
            tape,
            h,
            bind.var("dec_node.rd2.w"),
            bind.var("dec_node.rd2.b"),
            Activation::LeakyRelu,
        );
        let h = row_deconv1d(
            tape,
            h,
            bind.var("dec_node.rd3.w"),
            bind.var("dec_node.rd3.b"),
            Activation::Identity,
        );
        tape.sigmoid(h)
    }

    /// Edge decoder: `(z_e, z_g)` through node-to-edge and edge-to-edge
    /// deconvolutions, sigmoid, symmetrization, zero diagonal.
    pub fn decode_edge(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        z_e: VarId,
        z_g: VarId,
        s: VarId,
    ) -> VarId {
        let n = self.config.n;
        let z = tape.concat_cols(z_e, z_g);
        let feat = dense(
            tape,
            z,
            bind.var("dec_edge.fc.w"),
            bind.var("dec_edge.fc.b"),
            Activation::LeakyRelu,
        );
        let rows = tape.repeat_rows(feat, n);
        let s_col = tape.reshape(s, vec![n, 1]);
        let u = tape.concat_cols(rows, s_col);
        let h = node_to_edge_deconv(
            tape,
            u,
            bind.var("dec_edge.n2e.w"),
            bind.var("dec_edge.n2e.b"),
            Activation::LeakyRelu,
        );
        let h = edge_to_edge_deconv(
            tape,
            h,
            bind.var("dec_edge.e2e1.wr"),
            bind.var("dec_edge.e2e1.wc"),
            bind.var("dec_edge.e2e1.b"),
            Activation::LeakyRelu,
        );
        let h = edge_to_edge_deconv(
            tape,
            h,
            bind.var("dec_edge.e2e2.wr"),
            bind.var("dec_edge.e2e2.wc"),
            bind.var("dec_edge.e2e2.b"),
            Activation::Identity,
        );
        let sig = tape.sigmoid(h);
        let sig_t = tape.transpose12(sig);
        let sum = tape.add(sig, sig_t);
        let sym = tape.scale(sum, T::from_f64(0.5));
        let mask = tape.constant(offdiag_mask(n, self.config.k));
        tape.mul(sym, mask)
    }

    /// Record the full forward pass for one graph on `tape`.
    pub fn build_forward(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        graph: &AttributedGraph,
        noise: &NoiseDraw<T>,
    ) -> ForwardVars {
        let f_const = tape.constant(graph_node_tensor(graph));
        let e_tensor = graph_edge_tensor(graph);
        let (mu, logvar) = match self.config.kind {
            ModelKind::NedVae => {
                let e_const = tape.constant(e_tensor.clone());
                let nadj = tape.constant(normalized_adjacency(&e_tensor));
                let (mu_f, lv_f) = self.encode_node(tape, bind, f_const);
                let (mu_e, lv_e) = self.encode_edge(tape, bind, e_const);
                let (mu_g, lv_g) = self.encode_graph(tape, bind, nadj, f_const);
                let mu_ef = tape.concat_cols(mu_e, mu_f);
                let mu = tape.concat_cols(mu_ef, mu_g);
                let lv_ef = tape.concat_cols(lv_e, lv_f);
                let logvar = tape.concat_cols(lv_ef, lv_g);
                (mu, logvar)
            }
            ModelKind::Gdvae => {
                let nadj = tape.constant(normalized_adjacency(&e_tensor));
                self.graph_trunk_heads(tape, bind, nadj, f_const, "enc")
            }
        };
        // z = mu + exp(logvar / 2) * eps
        let eps = tape.constant(noise.eps.clone());
        let half_lv = tape.scale(logvar, T::from_f64(0.5));
        let sigma = tape.exp(half_lv);
        let scaled = tape.mul(sigma, eps);
        let z = tape.add(mu, scaled);
        self.build_decode(tape, bind, z, noise, mu, logvar)
    }

    fn build_decode(
        &self,
        tape: &mut Tape<T>,
        bind: &ParamBinding,
        z: VarId,
        noise: &NoiseDraw<T>,
        mu: VarId,
        logvar: VarId,
    ) -> ForwardVars {
        let c = &self.config;
        let re = c.group_range(LatentGroup::E);
        let rf = c.group_range(LatentGroup::F);
        let rg = c.group_range(LatentGroup::G);
        let z_e = tape.slice_cols(z, re.start, re.end);
        let z_f = tape.slice_cols(z, rf.start, rf.end);
        let z_g = tape.slice_cols(z, rg.start, rg.end);
        let s = tape.constant(noise.s.clone());
        let fhat = self.decode_node(tape, bind, z_f, z_g, s);
        let ehat = self.decode_edge(tape, bind, z_e, z_g, s);
        ForwardVars {
            mu,
            logvar,
            z,
            fhat,
            ehat,
        }
    }

    /// Value-level forward pass with a fresh seeded noise draw.
    pub fn forward(
        &self,
        graph: &AttributedGraph,
        noise_seed: u64,
    ) -> Result<ForwardOutput<T>, TapeError> {
        let noise = NoiseDraw::from_seed(&self.config, noise_seed);
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let vars = self.build_forward(&mut tape, &bind, graph, &noise);
        if let Some(err) = tape.numeric_error() {
            return Err(err.clone());
        }
        let mu = tape.value(vars.mu).data().to_vec();
        let logvar = tape.value(vars.logvar).data().to_vec();
        let z = tape.value(vars.z).data().to_vec();
        Ok(ForwardOutput {
            fhat: tape.value(vars.fhat).clone(),
            ehat: tape.value(vars.ehat).clone(),
            posterior: GaussianPosterior::from_concat(&self.config, &mu, &logvar),
            latent: LatentCode::from_concat(&self.config, &z),
        })
    }

    /// Posterior means and log-variances without sampling.
    pub fn encode(&self, graph: &AttributedGraph) -> Result<GaussianPosterior<T>, TapeError> {
        let noise = NoiseDraw {
            eps: Tensor::zeros(vec![self.config.latent_dim()]),
            s: Tensor::zeros(vec![self.config.n]),
        };
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let vars = self.build_forward(&mut tape, &bind, graph, &noise);
        if let Some(err) = tape.numeric_error() {
            return Err(err.clone());
        }
        let mu = tape.value(vars.mu).data().to_vec();
        let logvar = tape.value(vars.logvar).data().to_vec();
        Ok(GaussianPosterior::from_concat(&self.config, &mu, &logvar))
    }

    /// Decode a given latent code with a given node assignment.
    pub fn decode(
        &self,
        latent: &LatentCode<T>,
        assignment: &NodeAssignment<T>,
    ) -> Result<(Tensor<T>, Tensor<T>), TapeError> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let z_e = tape.constant(latent.z_e.clone());
        let z_f = tape.constant(latent.z_f.clone());
        let z_g = tape.constant(latent.z_g.clone());
        let s = tape.constant(assignment.s.clone());
        let fhat = self.decode_node(&mut tape, &bind, z_f, z_g, s);
        let ehat = self.decode_edge(&mut tape, &bind, z_e, z_g, s);
        if let Some(err) = tape.numeric_error() {
            return Err(err.clone());
        }
        Ok((tape.value(fhat).clone(), tape.value(ehat).clone()))
    }
}

/// `1 - I` mask zeroing the diagonal of an `[n, n, k]` tensor.
pub fn offdiag_mask<T: Scalar>(n: usize, k: usize) -> Tensor<T> {
    let mut mask = Tensor::filled(vec![n, n, k], T::ONE);
    for i in 0..n {
        for ch in 0..k {
            mask.set3(i, i, ch, T::ZERO);
        }
    }
    mask
}

pub fn graph_node_tensor<T: Scalar>(graph: &AttributedGraph) -> Tensor<T> {
    Tensor::from_f64_slice(
        vec![graph.n, graph.d],
        &graph.node_attr.to_f64_vec(),
    )
}

pub fn graph_edge_tensor<T: Scalar>(graph: &AttributedGraph) -> Tensor<T> {
    Tensor::from_f64_slice(
        vec![graph.n, graph.n, graph.k],
        &graph.edge_attr.to_f64_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::{gen_er, GenConfig};

    fn sample_graph(seed: u64) -> AttributedGraph {
        let ds = gen_er(&GenConfig::er_default(8, 1), seed).unwrap();
        ds.records[0].0.clone()
    }

    fn small_config(kind: ModelKind) -> ModelConfig {
        ModelConfig::new(8, 1, 2, kind)
    }

    #[test]
    fn forward_shapes_are_contractual() {
        let g = sample_graph(3);
        let model = Model::<f32>::init(small_config(ModelKind::NedVae), 1);
        let out = model.forward(&g, 7).unwrap();
        assert_eq!(out.fhat.shape(), &[8, 2]);
        assert_eq!(out.ehat.shape(), &[8, 8, 1]);
        assert_eq!(out.latent.z_e.len(), 3);
        assert_eq!(out.posterior.mu_f.len(), 3);
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let g = sample_graph(4);
        let model = Model::<f32>::init(small_config(ModelKind::NedVae), 2);
        let a = model.forward(&g, 11).unwrap();
        let b = model.forward(&g, 11).unwrap();
        assert_eq!(a.fhat, b.fhat);
        assert_eq!(a.ehat, b.ehat);
        assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn identical_node_attributes_give_identical_node_posterior() {
        let g1 = sample_graph(5);
        let mut g2 = sample_graph(6);
        g2.node_attr = g1.node_attr.clone();
        let model = Model::<f32>::init(small_config(ModelKind::NedVae), 3);
        let p1 = model.encode(&g1).unwrap();
        let p2 = model.encode(&g2).unwrap();
        assert_eq!(p1.mu_f, p2.mu_f);
        assert_eq!(p1.logvar_f, p2.logvar_f);
        assert_ne!(p1.mu_e, p2.mu_e, "edge posteriors should differ across graphs");
    }

    #[test]
    fn zero_edge_tensor_gives_constant_edge_posterior() {
        let mut g = sample_graph(7);
        g.edge_attr = Tensor::zeros(vec![8, 8, 1]);
        let model = Model::<f32>::init(small_config(ModelKind::NedVae), 4);
        let p1 = model.encode(&g).unwrap();
        let p2 = model.encode(&g).unwrap();
        assert_eq!(p1.mu_e, p2.mu_e);
    }

    #[test]
    fn edge_output_is_symmetric_zero_diagonal_in_unit_interval() {
        let g = sample_graph(8);
        let model = Model::<f32>::init(small_config(ModelKind::NedVae), 5);
        let out = model.forward(&g, 13).unwrap();
        for i in 0..8 {
            assert_eq!(out.ehat.at3(i, i, 0), 0.0);
            for j in 0..8 {
                let v = out.ehat.at3(i, j, 0);
                assert_eq!(v, out.ehat.at3(j, i, 0));
                assert!((0.0..1.0).contains(&v));
                if i != j {
                    assert!(v > 0.0);
                }
            }
        }
        for &v in out.fhat.data() {
            assert!((0.0..1.0).contains(&v) && v > 0.0, "sigmoid range violated: {v}");
        }
    }

    #[test]
    fn constant_assignment_vector_gives_identical_node_rows() {
        let model = Model::<f32>::init(small_config(ModelKind::NedVae), 6);
        let latent = LatentCode {
            z_e: Tensor::vector(vec![0.1, -0.3, 0.5]),
            z_f: Tensor::vector(vec![0.7, 0.0, -0.2]),
            z_g: Tensor::vector(vec![0.2, 0.2, -0.6]),
        };
        let assignment = NodeAssignment {
            s: Tensor::filled(vec![8], 0.25),
        };
        let (fhat, _) = model.decode(&latent, &assignment).unwrap();
        for i in 1..8 {
            for c in 0..2 {
                assert_eq!(fhat.at2(i, c), fhat.at2(0, c));
            }
        }
    }

    #[test]
    fn reparameterize_collapses_to_mean_at_clamped_logvar() {
        let config = small_config(ModelKind::NedVae);
        let post = GaussianPosterior {
            mu_e: Tensor::vector(vec![1.0f32, -1.0, 0.5]),
            logvar_e: Tensor::filled(vec![3], -10.0),
            mu_f: Tensor::vector(vec![0.3, 0.3, 0.3]),
            logvar_f: Tensor::filled(vec![3], -10.0),
            mu_g: Tensor::vector(vec![-0.7, 0.0, 0.9]),
            logvar_g: Tensor::filled(vec![3], -10.0),
        };
        let z = reparameterize(&config, &post, 99);
        for (zv, mv) in z.concat().iter().zip(post.mu_concat()) {
            assert!((zv - mv).abs() < 1e-2, "sigma = e^-5 keeps z within 1e-2 of mu");
        }
    }

    #[test]
    fn reparameterize_sample_mean_approaches_mu() {
        let config = ModelConfig {
            l1: 1,
            l2: 1,
            l3: 1,
            ..small_config(ModelKind::NedVae)
        };
        let post = GaussianPosterior {
            mu_e: Tensor::vector(vec![0.4f64]),
            logvar_e: Tensor::vector(vec![0.0]),
            mu_f: Tensor::vector(vec![-1.2]),
            logvar_f: Tensor::vector(vec![0.0]),
            mu_g: Tensor::vector(vec![2.0]),
            logvar_g: Tensor::vector(vec![0.0]),
        };
        let draws = 100_000;
        let mut sums = [0.0f64; 3];
        for seed in 0..draws {
            let z = reparameterize(&config, &post, seed);
            for (s, v) in sums.iter_mut().zip(z.concat()) {
                *s += v;
            }
        }
        // CLT bound: 3 sigma / sqrt(draws) with sigma = 1
        let bound = 3.0 / (draws as f64).sqrt();
        for (s, m) in sums.iter().zip(post.mu_concat()) {
            assert!((s / draws as f64 - m).abs() < bound);
        }
    }

    #[test]
    fn gdvae_splits_single_latent_into_thirds() {
        let g = sample_graph(9);
        let model = Model::<f32>::init(small_config(ModelKind::Gdvae), 7);
        let out = model.forward(&g, 17).unwrap();
        assert_eq!(out.latent.z_e.len(), 3);
        assert_eq!(out.latent.z_f.len(), 3);
        assert_eq!(out.latent.z_g.len(), 3);
        assert_eq!(out.fhat.shape(), &[8, 2]);
        assert_eq!(out.ehat.shape(), &[8, 8, 1]);
    }

    #[test]
    fn node_output_ignores_z_e_and_edge_output_ignores_z_f() {
        // The routing invariant, checked through autodiff: gradients of the
        // node reconstruction w.r.t. z_e and of the edge reconstruction
        // w.r.t. z_f must not exist at all.
        let model = Model::<f64>::init(small_config(ModelKind::NedVae), 8);
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let z = tape.var(Tensor::vector(vec![0.1, 0.2, 0.3, -0.1, -0.2, -0.3, 0.5, 0.4, 0.3]));
        let z_e = tape.slice_cols(z, 0, 3);
        let z_f = tape.slice_cols(z, 3, 6);
        let z_g = tape.slice_cols(z, 6, 9);
        let s = tape.constant(Tensor::randn(vec![8], &mut ChaCha8Rng::seed_from_u64(1)));
        let fhat = model.decode_node(&mut tape, &bind, z_f, z_g, s);
        let ehat = model.decode_edge(&mut tape, &bind, z_e, z_g, s);

        let node_loss = tape.sum_all(fhat);
        let g = tape.backward(node_loss).unwrap();
        let dz = g.get(z).unwrap();
        for d in 0..3 {
            assert_eq!(dz.data()[d], 0.0, "dF/dz_e must vanish");
        }
        assert!(dz.data()[3..].iter().any(|&v| v != 0.0));

        let edge_loss = tape.sum_all(ehat);
        let g = tape.backward(edge_loss).unwrap();
        let dz = g.get(z).unwrap();
        for d in 3..6 {
            assert_eq!(dz.data()[d], 0.0, "dE/dz_f must vanish");
        }
        assert!(dz.data()[0..3].iter().any(|&v| v != 0.0));
        assert!(dz.data()[6..9].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn untrained_reconstruction_sits_near_half_baseline() {
        use crate::objective::{recon_bce_edge, recon_bce_node};
        let ds = gen_er(&GenConfig::er_default(20, 30), 23).unwrap();
        let base = (20.0 * 2.0 + 20.0 * 19.0) * std::f64::consts::LN_2;
        for seed in 0..3 {
            let model = Model::<f64>::init(ModelConfig::new(20, 1, 2, ModelKind::NedVae), seed);
            let mut total = 0.0;
            for (i, (g, _)) in ds.records.iter().enumerate() {
                let noise = NoiseDraw::from_seed(&model.config, i as u64);
                let mut tape = Tape::new();
                let bind = model.bind(&mut tape);
                let fwd = model.build_forward(&mut tape, &bind, g, &noise);
                let f_t = graph_node_tensor::<f64>(g);
                let e_t = graph_edge_tensor::<f64>(g);
                let rn = recon_bce_node(&mut tape, fwd.fhat, &f_t);
                let re = recon_bce_edge(&mut tape, fwd.ehat, &e_t);
                total += tape.value(rn).item() + tape.value(re).item();
            }
            let ratio = total / (ds.len() as f64 * base);
            assert!(
                (0.9..1.1).contains(&ratio),
                "untrained recon should be within 10% of the all-0.5 baseline, ratio {ratio}"
            );
        }
    }

    #[test]
    fn graph_encoder_is_permutation_invariant() {
        let g = sample_graph(10);
        let model = Model::<f64>::init(small_config(ModelKind::NedVae), 9);
        let perm: Vec<usize> = vec![3, 1, 7, 0, 5, 2, 6, 4];
        let gp = permute_graph(&g, &perm);
        let p1 = model.encode(&g).unwrap();
        let p2 = model.encode(&gp).unwrap();
        for (a, b) in p1.mu_g.data().iter().zip(p2.mu_g.data()) {
            assert!((a - b).abs() < 1e-9, "mu_g changed under relabeling");
        }
        for (a, b) in p1.mu_e.data().iter().zip(p2.mu_e.data()) {
            assert!((a - b).abs() < 1e-9, "mu_e changed under relabeling");
        }
    }

    fn permute_graph(g: &AttributedGraph, perm: &[usize]) -> AttributedGraph {
        let n = g.n;
        let mut edge = Tensor::<f32>::zeros(vec![n, n, g.k]);
        let mut node = Tensor::<f32>::zeros(vec![n, g.d]);
        for i in 0..n {
            for c in 0..g.d {
                node.set2(perm[i], c, g.node_attr.at2(i, c));
            }
            for j in 0..n {
                for ch in 0..g.k {
                    edge.set3(perm[i], perm[j], ch, g.edge_attr.at3(i, j, ch));
                }
            }
        }
        AttributedGraph::new(edge, node)
    }
}
