//! The conditional VAE.
//!
//! Encoder: `x → ReLU(W1 x + b1) → (μ, log σ²)` with affine heads.
//! Decoder: `h = ReLU(Wc z + Wp c + b1)`, `x̂ = sigmoid(W2 h + b2)`.
//!
//! The first decoder layer is stored as two blocks. `Wc` (`hidden x 2`) acts on
//! the latent code and is shared by every category. `Wp` (`hidden x n`) holds
//! one column per category seen so far; a one-hot condition selects exactly
//! one of them, so `Wp c` is a column lookup and the gradient reaching `Wp` is
//! confined to that column. Growing the model for a new category appends a
//! column to `Wp` and leaves everything else untouched.

use crate::error::{Error, Result};
use crate::ndcore::{
    add_broadcast_col, matmul, matmul_nt, matmul_tn, relu, relu_prime, sample_standard_normal,
    sigmoid, SeededRng, Tensor2,
};

/// Width of the latent code. Fixed for the lifetime of a model.
pub const LATENT_DIM: usize = 2;

/// `log σ²` is clamped to this range before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Input and hidden widths. The latent width is always [`LATENT_DIM`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
}

impl Dims {
    /// 28x28 images, 256 hidden units.
    pub const MNIST: Dims = Dims { input: 784, hidden: 256 };
}

impl Default for Dims {
    fn default() -> Self {
        Dims::MNIST
    }
}

/// All trainable tensors. Gradients use the same layout (see [`CvaeGrads`]).
#[derive(Debug, Clone, PartialEq)]
pub struct CvaeParams {
    pub enc_w1: Tensor2,
    pub enc_b1: Tensor2,
    pub enc_w_mu: Tensor2,
    pub enc_b_mu: Tensor2,
    pub enc_w_lv: Tensor2,
    pub enc_b_lv: Tensor2,
    pub dec_wc: Tensor2,
    pub dec_wp: Tensor2,
    pub dec_b1: Tensor2,
    pub dec_w2: Tensor2,
    pub dec_b2: Tensor2,
}

/// Gradients with respect to every tensor of [`CvaeParams`].
pub type CvaeGrads = CvaeParams;

/// Serialization and optimizer order of the parameter tensors.
pub const TENSOR_NAMES: [&str; 11] = [
    "enc_w1", "enc_b1", "enc_w_mu", "enc_b_mu", "enc_w_lv", "enc_b_lv", "dec_wc", "dec_wp",
    "dec_b1", "dec_w2", "dec_b2",
];

/// Index of `dec_wp` in [`TENSOR_NAMES`].
pub const DEC_WP_INDEX: usize = 7;

/// Uniform draw in `[-1/√fan_in, 1/√fan_in]`.
fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng) -> Tensor2 {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor2::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

impl CvaeParams {
    /// Fresh model with a single category.
    ///
    /// Weights are drawn from one seeded stream in this order: `enc_w1`,
    /// `enc_w_mu`, `enc_w_lv`, `dec_wc`, `dec_wp`, `dec_w2`, each row-major and
    /// uniform in `±1/√fan_in` of its layer. The decoder's first layer has
    /// `fan_in = 2 + n_categories = 3`. Biases start at zero.
    pub fn init(dims: Dims, seed: u64) -> Self {
        Self::init_with_categories(dims, 1, seed)
    }

    /// Same scheme as [`CvaeParams::init`] with a fixed number of categories.
    /// Used by the joint-training baseline, which never grows.
    pub fn init_with_categories(dims: Dims, n_categories: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let Dims { input, hidden } = dims;
        let dec_fan_in = LATENT_DIM + n_categories;
        let enc_w1 = init_uniform(hidden, input, input, &mut rng);
        let enc_w_mu = init_uniform(LATENT_DIM, hidden, hidden, &mut rng);
        let enc_w_lv = init_uniform(LATENT_DIM, hidden, hidden, &mut rng);
        let dec_wc = init_uniform(hidden, LATENT_DIM, dec_fan_in, &mut rng);
        let dec_wp = init_uniform(hidden, n_categories, dec_fan_in, &mut rng);
        let dec_w2 = init_uniform(input, hidden, hidden, &mut rng);
        CvaeParams {
            enc_w1,
            enc_b1: Tensor2::zeros(hidden, 1),
            enc_w_mu,
            enc_b_mu: Tensor2::zeros(LATENT_DIM, 1),
            enc_w_lv,
            enc_b_lv: Tensor2::zeros(LATENT_DIM, 1),
            dec_wc,
            dec_wp,
            dec_b1: Tensor2::zeros(hidden, 1),
            dec_w2,
            dec_b2: Tensor2::zeros(input, 1),
        }
    }

    /// All-zero tensors shaped like a model with `n_categories` columns in `Wp`.
    pub fn zeros(dims: Dims, n_categories: usize) -> Self {
        let Dims { input, hidden } = dims;
        CvaeParams {
            enc_w1: Tensor2::zeros(hidden, input),
            enc_b1: Tensor2::zeros(hidden, 1),
            enc_w_mu: Tensor2::zeros(LATENT_DIM, hidden),
            enc_b_mu: Tensor2::zeros(LATENT_DIM, 1),
            enc_w_lv: Tensor2::zeros(LATENT_DIM, hidden),
            enc_b_lv: Tensor2::zeros(LATENT_DIM, 1),
            dec_wc: Tensor2::zeros(hidden, LATENT_DIM),
            dec_wp: Tensor2::zeros(hidden, n_categories),
            dec_b1: Tensor2::zeros(hidden, 1),
            dec_w2: Tensor2::zeros(input, hidden),
            dec_b2: Tensor2::zeros(input, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims(), self.n_categories())
    }

    pub fn dims(&self) -> Dims {
        Dims { input: self.enc_w1.cols(), hidden: self.enc_w1.rows() }
    }

    /// Number of categories the decoder can be conditioned on.
    pub fn n_categories(&self) -> usize {
        self.dec_wp.cols()
    }

    pub fn tensors(&self) -> [&Tensor2; 11] {
        [
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_w_mu,
            &self.enc_b_mu,
            &self.enc_w_lv,
            &self.enc_b_lv,
            &self.dec_wc,
            &self.dec_wp,
            &self.dec_b1,
            &self.dec_w2,
            &self.dec_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 11] {
        [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w_mu,
            &mut self.enc_b_mu,
            &mut self.enc_w_lv,
            &mut self.enc_b_lv,
            &mut self.dec_wc,
            &mut self.dec_wp,
            &mut self.dec_b1,
            &mut self.dec_w2,
            &mut self.dec_b2,
        ]
    }

    /// Rebuilds a parameter set from tensors in [`TENSOR_NAMES`] order,
    /// validating every shape against the first encoder layer.
    pub fn from_tensors(tensors: Vec<Tensor2>) -> Result<Self> {
        let [enc_w1, enc_b1, enc_w_mu, enc_b_mu, enc_w_lv, enc_b_lv, dec_wc, dec_wp, dec_b1, dec_w2, dec_b2]: [Tensor2; 11] =
            tensors.try_into().map_err(|v: Vec<Tensor2>| {
                Error::Config(format!("expected 11 parameter tensors, got {}", v.len()))
            })?;
        let params = CvaeParams {
            enc_w1,
            enc_b1,
            enc_w_mu,
            enc_b_mu,
            enc_w_lv,
            enc_b_lv,
            dec_wc,
            dec_wp,
            dec_b1,
            dec_w2,
            dec_b2,
        };
        let expected = Self::zeros(params.dims(), params.n_categories());
        for ((name, got), want) in TENSOR_NAMES.iter().zip(params.tensors()).zip(expected.tensors()) {
            if got.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(params)
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all values from a flat vector in [`TENSOR_NAMES`] order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_values(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// `self += s * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &CvaeParams, s: f64) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled_inplace(b, s)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bit_eq(&self, other: &CvaeParams) -> bool {
        self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.bit_eq(b))
    }

    /// Appends one randomly initialized column to `Wp`.
    ///
    /// The column is drawn from `SeededRng::new(seed)`, uniform in
    /// `±1/√(2 + n + 1)` where `n` is the category count before growth. Every
    /// other value is copied bit for bit.
    pub fn grow(&self, seed: u64) -> CvaeParams {
        let n = self.n_categories() + 1;
        let hidden = self.dims().hidden;
        let mut rng = SeededRng::new(seed);
        let column = init_uniform(hidden, 1, LATENT_DIM + n, &mut rng).into_vec();
        let mut grown = self.clone();
        grown.dec_wp = self.dec_wp.append_column(&column).expect("column height matches hidden");
        grown
    }
}

/// One-hot category selector, or the all-zero probe used to isolate the
/// common content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionVector {
    dim: usize,
    hot: Option<usize>,
}

impl ConditionVector {
    pub fn one_hot(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::LabelOutOfRange { label: index, n_categories: dim });
        }
        Ok(Self { dim, hot: Some(index) })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, hot: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hot_index(&self) -> Option<usize> {
        self.hot
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if let Some(i) = self.hot {
            v[i] = 1.0;
        }
        v
    }
}

/// Conditions for a whole batch: one shared vector, or one per example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Conditioning {
    Shared(ConditionVector),
    PerExample(Vec<ConditionVector>),
}

impl From<ConditionVector> for Conditioning {
    fn from(c: ConditionVector) -> Self {
        Conditioning::Shared(c)
    }
}

impl Conditioning {
    /// One-hot condition per example from category indices.
    pub fn labels(dim: usize, labels: &[usize]) -> Result<Self> {
        let conds = labels
            .iter()
            .map(|&l| ConditionVector::one_hot(dim, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Conditioning::PerExample(conds))
    }

    fn hot_indices(&self, batch: usize, n_categories: usize) -> Result<Vec<Option<usize>>> {
        match self {
            Conditioning::Shared(c) => {
                if c.dim != n_categories {
                    return Err(Error::ConditionDim { expected: n_categories, got: c.dim });
                }
                Ok(vec![c.hot; batch])
            }
            Conditioning::PerExample(cs) => {
                if cs.len() != batch {
                    return Err(Error::Shape {
                        op: "conditioning",
                        left: (n_categories, batch),
                        right: (n_categories, cs.len()),
                    });
                }
                cs.iter()
                    .map(|c| {
                        if c.dim != n_categories {
                            Err(Error::ConditionDim { expected: n_categories, got: c.dim })
                        } else {
                            Ok(c.hot)
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Encoder output for a batch plus the reparameterized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Tensor2,
    /// Clamped to `±LOG_VAR_CLAMP`.
    pub log_var: Tensor2,
    pub z: Tensor2,
    pub eps: Tensor2,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Tensor2,
    enc_pre: Tensor2,
    enc_h: Tensor2,
    log_var_raw: Tensor2,
    pub stats: LatentStats,
    hot: Vec<Option<usize>>,
    dec_pre: Tensor2,
    dec_h: Tensor2,
    pub x_hat: Tensor2,
    dims: Dims,
    n_categories: usize,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.x.cols()
    }

    /// Smallest `|pre-activation|` over both ReLU layers, i.e. how far this
    /// pass is from a point where the loss is not differentiable.
    pub fn relu_margin(&self) -> f64 {
        self.enc_pre.data().iter().chain(self.dec_pre.data()).fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Loss gradients at the network outputs, as produced by the `losses` module.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    /// `∂J/∂(W2 h + b2)`, i.e. with respect to the decoder's output
    /// pre-activation.
    pub d_out_pre: Tensor2,
    pub d_mu: Tensor2,
    pub d_log_var: Tensor2,
}

impl OutputGrads {
    pub fn zeros(input: usize, batch: usize) -> Self {
        OutputGrads {
            d_out_pre: Tensor2::zeros(input, batch),
            d_mu: Tensor2::zeros(LATENT_DIM, batch),
            d_log_var: Tensor2::zeros(LATENT_DIM, batch),
        }
    }

    pub fn add(&self, other: &OutputGrads) -> Result<OutputGrads> {
        Ok(OutputGrads {
            d_out_pre: self.d_out_pre.add(&other.d_out_pre)?,
            d_mu: self.d_mu.add(&other.d_mu)?,
            d_log_var: self.d_log_var.add(&other.d_log_var)?,
        })
    }
}

/// Encoder pass: returns `(μ, log σ²)`, the latter clamped.
pub fn encode(params: &CvaeParams, x: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let (_, _, mu, _, log_var) = encode_full(params, x)?;
    Ok((mu, log_var))
}

fn encode_full(
    params: &CvaeParams,
    x: &Tensor2,
) -> Result<(Tensor2, Tensor2, Tensor2, Tensor2, Tensor2)> {
    if x.rows() != params.dims().input {
        return Err(Error::Shape { op: "encode", left: params.enc_w1.shape(), right: x.shape() });
    }
    let enc_pre = add_broadcast_col(&matmul(&params.enc_w1, x)?, &params.enc_b1)?;
    let enc_h = relu(&enc_pre);
    let mu = add_broadcast_col(&matmul(&params.enc_w_mu, &enc_h)?, &params.enc_b_mu)?;
    let log_var_raw = add_broadcast_col(&matmul(&params.enc_w_lv, &enc_h)?, &params.enc_b_lv)?;
    let log_var = log_var_raw.map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
    Ok((enc_pre, enc_h, mu, log_var_raw, log_var))
}

/// `z = μ + exp(½ log σ²) ⊙ ε`.
pub fn reparameterize(mu: &Tensor2, log_var: &Tensor2, eps: &Tensor2) -> Result<Tensor2> {
    let sigma_eps = log_var.zip_map(eps, "reparameterize", |lv, e| (0.5 * lv).exp() * e)?;
    mu.add(&sigma_eps)
}

fn decoder_pre(params: &CvaeParams, z: &Tensor2, hot: &[Option<usize>]) -> Result<Tensor2> {
    if z.rows() != LATENT_DIM {
        return Err(Error::Shape { op: "decode", left: params.dec_wc.shape(), right: z.shape() });
    }
    let mut pre = add_broadcast_col(&matmul(&params.dec_wc, z)?, &params.dec_b1)?;
    let hidden = params.dims().hidden;
    for (b, h) in hot.iter().enumerate() {
        if let Some(i) = *h {
            for r in 0..hidden {
                let v = pre.get(r, b) + params.dec_wp.get(r, i);
                pre.set(r, b, v);
            }
        }
    }
    Ok(pre)
}

fn decode_full(
    params: &CvaeParams,
    z: &Tensor2,
    hot: &[Option<usize>],
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    let dec_pre = decoder_pre(params, z, hot)?;
    let dec_h = relu(&dec_pre);
    let out_pre = add_broadcast_col(&matmul(&params.dec_w2, &dec_h)?, &params.dec_b2)?;
    Ok((dec_pre, dec_h, sigmoid(&out_pre)))
}

/// Decoder pass with one condition shared by the whole batch.
pub fn decode(params: &CvaeParams, z: &Tensor2, c: &ConditionVector) -> Result<Tensor2> {
    decode_with(params, z, &Conditioning::Shared(*c))
}

pub fn decode_with(params: &CvaeParams, z: &Tensor2, c: &Conditioning) -> Result<Tensor2> {
    let hot = c.hot_indices(z.cols(), params.n_categories())?;
    Ok(decode_full(params, z, &hot)?.2)
}

/// Full encode → reparameterize → decode pass, caching intermediates.
pub fn forward(
    params: &CvaeParams,
    x: &Tensor2,
    c: &Conditioning,
    eps: &Tensor2,
) -> Result<ForwardCache> {
    let batch = x.cols();
    if eps.shape() != (LATENT_DIM, batch) {
        return Err(Error::Shape { op: "forward eps", left: (LATENT_DIM, batch), right: eps.shape() });
    }
    let hot = c.hot_indices(batch, params.n_categories())?;
    let (enc_pre, enc_h, mu, log_var_raw, log_var) = encode_full(params, x)?;
    let z = reparameterize(&mu, &log_var, eps)?;
    let (dec_pre, dec_h, x_hat) = decode_full(params, &z, &hot)?;
    Ok(ForwardCache {
        x: x.clone(),
        enc_pre,
        enc_h,
        log_var_raw,
        stats: LatentStats { mu, log_var, z, eps: eps.clone() },
        hot,
        dec_pre,
        dec_h,
        x_hat,
        dims: params.dims(),
        n_categories: params.n_categories(),
    })
}

/// Gradients plus the first decoder layer's error signal `δ¹` (`hidden x B`).
#[derive(Debug, Clone)]
pub struct Backprop {
    pub grads: CvaeGrads,
    pub dec_delta1: Tensor2,
}

/// Analytic gradients of the loss whose output gradients are `out`.
pub fn backward(params: &CvaeParams, cache: &ForwardCache, out: &OutputGrads) -> Result<CvaeGrads> {
    Ok(backward_traced(params, cache, out)?.grads)
}

/// As [`backward`], also returning `δ¹`.
///
/// Layer recursion: `δˡ = (Wˡ⁺¹)ᵀ δˡ⁺¹ ⊙ σ'(zˡ)`. For the private block,
/// `∂J/∂Wp = δ¹ cᵀ`: column `i` accumulates `δ¹` only over examples whose
/// condition selects `i`, and every other column stays exactly zero.
pub fn backward_traced(
    params: &CvaeParams,
    cache: &ForwardCache,
    out: &OutputGrads,
) -> Result<Backprop> {
    if cache.dims != params.dims() || cache.n_categories != params.n_categories() {
        return Err(Error::StaleCache(format!(
            "cache built for {:?} with {} categories, params are {:?} with {}",
            cache.dims,
            cache.n_categories,
            params.dims(),
            params.n_categories()
        )));
    }
    let batch = cache.batch_size();
    if out.d_out_pre.shape() != cache.x_hat.shape()
        || out.d_mu.shape() != (LATENT_DIM, batch)
        || out.d_log_var.shape() != (LATENT_DIM, batch)
    {
        return Err(Error::StaleCache(format!(
            "output gradients do not match a batch of {batch}"
        )));
    }
    let hidden = params.dims().hidden;
    let mut g = params.zeros_like();

    // decoder output layer
    let delta_out = &out.d_out_pre;
    g.dec_w2 = matmul_nt(delta_out, &cache.dec_h)?;
    g.dec_b2 = delta_out.sum_cols();

    // first decoder layer
    let delta1 = matmul_tn(&params.dec_w2, delta_out)?.hadamard(&relu_prime(&cache.dec_pre))?;
    g.dec_wc = matmul_nt(&delta1, &cache.stats.z)?;
    g.dec_b1 = delta1.sum_cols();
    for (b, h) in cache.hot.iter().enumerate() {
        if let Some(i) = *h {
            for r in 0..hidden {
                let v = g.dec_wp.get(r, i) + delta1.get(r, b);
                g.dec_wp.set(r, i, v);
            }
        }
    }

    // through the reparameterization into the heads
    let d_z = matmul_tn(&params.dec_wc, &delta1)?;
    let d_mu = out.d_mu.add(&d_z)?;
    let stats = &cache.stats;
    let mut d_log_var = out.d_log_var.clone();
    for r in 0..LATENT_DIM {
        for b in 0..batch {
            let lv = stats.log_var.get(r, b);
            let dz_dlv = 0.5 * (0.5 * lv).exp() * stats.eps.get(r, b);
            d_log_var.set(r, b, d_log_var.get(r, b) + d_z.get(r, b) * dz_dlv);
        }
    }
    let d_log_var_raw = d_log_var.zip_map(&cache.log_var_raw, "log_var clamp", |d, raw| {
        if (-LOG_VAR_CLAMP..=LOG_VAR_CLAMP).contains(&raw) {
            d
        } else {
            0.0
        }
    })?;

    g.enc_w_mu = matmul_nt(&d_mu, &cache.enc_h)?;
    g.enc_b_mu = d_mu.sum_cols();
    g.enc_w_lv = matmul_nt(&d_log_var_raw, &cache.enc_h)?;
    g.enc_b_lv = d_log_var_raw.sum_cols();

    // encoder hidden layer
    let d_h = matmul_tn(&params.enc_w_mu, &d_mu)?.add(&matmul_tn(&params.enc_w_lv, &d_log_var_raw)?)?;
    let delta_enc = d_h.hadamard(&relu_prime(&cache.enc_pre))?;
    g.enc_w1 = matmul_nt(&delta_enc, &cache.x)?;
    g.enc_b1 = delta_enc.sum_cols();

    Ok(Backprop { grads: g, dec_delta1: delta1 })
}

/// Decodes `n` standard-normal latent draws under category `label`. The
/// encoder is not involved.
pub fn generate(params: &CvaeParams, n: usize, label: usize, seed: u64) -> Result<Tensor2> {
    let c = ConditionVector::one_hot(params.n_categories(), label)?;
    let z = sample_standard_normal(LATENT_DIM, n, &mut SeededRng::new(seed));
    decode(params, &z, &c)
}

/// Decodes `n` latent draws with the all-zero condition, so only `Wc`, the
/// bias and the output layer contribute. Uses the same latent draws as
/// [`generate`] for the same seed.
pub fn common_content(params: &CvaeParams, n: usize, seed: u64) -> Result<Tensor2> {
    let z = sample_standard_normal(LATENT_DIM, n, &mut SeededRng::new(seed));
    decode(params, &z, &ConditionVector::zero(params.n_categories()))
}
