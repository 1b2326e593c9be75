//! Contrastive bottleneck density model over state-action pairs.
//!
//! A forward encoder `e(z|x)` and a backward encoder `b(z|x')` map a
//! state-action vector and a multiplicatively noised copy of it to diagonal
//! Gaussians over a shared latent space. Training minimizes the bidirectional
//! CatGen bound, which uses the other batch elements as contrastive samples.
//! After training, encoder means of the offline data are summarized by a
//! Gaussian mixture `m(z)` and a pair is scored by its rate
//! `log e(z̄|x) - log m(z̄)` with `z̄` the encoder mean.

mod gmm;

pub use gmm::{EmTrace, GaussianMixture, COLLAPSE_VARIANCE};

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::checkpoint::{read_params, write_params};
use crate::numkit::gaussian::{clamp_log_std, diag_logpdf, log_sum_exp, LOG_STD_MAX, LOG_STD_MIN};
use crate::numkit::{Activation, AdamConfig, Matrix, MlpGrads, MlpParams, Normalizer, OptimState};
use crate::rng::{self, Rng};
use crate::storage::Transition;

/// Bounds of the per-feature multiplicative noise `u ~ U(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CebNoiseSpec {
    pub lo: f64,
    pub hi: f64,
}

impl Default for CebNoiseSpec {
    fn default() -> Self {
        Self { lo: 0.99, hi: 1.01 }
    }
}

impl CebNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.lo <= self.hi && self.hi.is_finite()) {
            return Err(Error::Config(format!("noise bounds need 0 < lo <= hi, got ({}, {})", self.lo, self.hi)));
        }
        Ok(())
    }
}

fn default_latent_dim() -> usize {
    16
}
fn default_hidden() -> Vec<usize> {
    vec![256, 128, 64]
}
fn default_batch_size() -> usize {
    128
}
fn default_lr() -> f64 {
    3e-4
}
fn default_components() -> usize {
    32
}
fn default_em_iters() -> usize {
    200
}

/// Training and marginal settings. `beta` and `steps` have no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CebConfig {
    pub beta: f64,
    /// Gradient steps of CatGen training.
    pub steps: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub noise: CebNoiseSpec,
    #[serde(default = "default_components")]
    pub mixture_components: usize,
    #[serde(default = "default_em_iters")]
    pub em_iters: usize,
    /// Refit the marginal on offline plus online data every this many online
    /// steps. `None` fits it once.
    #[serde(default)]
    pub marginal_refresh_every: Option<usize>,
}

impl CebConfig {
    pub fn new(beta: f64, steps: usize) -> Self {
        Self {
            beta,
            steps,
            latent_dim: default_latent_dim(),
            hidden: default_hidden(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            noise: CebNoiseSpec::default(),
            mixture_components: default_components(),
            em_iters: default_em_iters(),
            marginal_refresh_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be a finite non-negative number, got {}", self.beta)));
        }
        if self.latent_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("latent and hidden sizes must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive batches need at least 2 elements".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.mixture_components == 0 {
            return Err(Error::Config("the marginal needs at least one component".into()));
        }
        if self.marginal_refresh_every == Some(0) {
            return Err(Error::Config("marginal refresh period must be positive".into()));
        }
        self.noise.validate()
    }
}

/// Frozen randomness for one loss evaluation: multiplicative input noise
/// `u` and the standard-normal draws that reparameterize both latents.
#[derive(Debug, Clone, PartialEq)]
pub struct CebNoise {
    pub u: Matrix,
    pub xi: Matrix,
    pub zeta: Matrix,
}

impl CebNoise {
    pub fn draw(batch: usize, input_dim: usize, latent_dim: usize, spec: CebNoiseSpec, rng: &mut Rng) -> Self {
        let u = (0..batch * input_dim).map(|_| rng::uniform(rng, spec.lo, spec.hi)).collect();
        let xi = rng::normals(rng, batch * latent_dim);
        let zeta = rng::normals(rng, batch * latent_dim);
        Self {
            u: Matrix::from_vec(batch, input_dim, u).expect("sizes agree"),
            xi: Matrix::from_vec(batch, latent_dim, xi).expect("sizes agree"),
            zeta: Matrix::from_vec(batch, latent_dim, zeta).expect("sizes agree"),
        }
    }
}

/// Loss value split into its β-weighted residual part and the two
/// contrastive parts. `loss = residual + contrastive`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatgenEval {
    pub loss: f64,
    pub residual: f64,
    pub contrastive: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CebModel {
    pub encoder: MlpParams,
    pub backward: MlpParams,
    pub latent_dim: usize,
    pub beta: f64,
    pub noise: CebNoiseSpec,
    pub input_norm: Normalizer,
    trained: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    latent_dim: usize,
    beta: f64,
    noise: CebNoiseSpec,
    input_norm: Normalizer,
    trained: bool,
}

/// Per-row Gaussian heads with clamped log-std, plus a mask that is 0 where
/// the clamp was active.
struct Heads {
    mean: Matrix,
    log_std: Matrix,
    live: Matrix,
}

fn split_heads(out: &Matrix, l: usize) -> Heads {
    let k = out.rows();
    let mut mean = Matrix::zeros(k, l);
    let mut log_std = Matrix::zeros(k, l);
    let mut live = Matrix::zeros(k, l);
    for r in 0..k {
        let row = out.row(r);
        for j in 0..l {
            mean.set(r, j, row[j]);
            let raw = row[l + j];
            log_std.set(r, j, clamp_log_std(raw));
            live.set(r, j, if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) { 1.0 } else { 0.0 });
        }
    }
    Heads { mean, log_std, live }
}

fn reparam(h: &Heads, eps: &Matrix) -> Matrix {
    let mut z = h.mean.clone();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += h.log_std.data()[i].exp() * eps.data()[i];
    }
    z
}

/// Gradients of `Σ_j log N(z_j; μ_j, σ_j)` scaled by `c`, accumulated into
/// the latent, mean and log-std buffers.
#[inline]
fn accumulate_logpdf_grad(
    c: f64,
    z: &[f64],
    mean: &[f64],
    log_std: &[f64],
    gz: &mut [f64],
    gmean: &mut [f64],
    glog_std: &mut [f64],
) {
    for j in 0..z.len() {
        let inv = (-log_std[j]).exp();
        let r = (z[j] - mean[j]) * inv;
        gz[j] -= c * r * inv;
        gmean[j] += c * r * inv;
        glog_std[j] += c * (r * r - 1.0);
    }
}

impl CebModel {
    pub fn new(input_dim: usize, config: &CebConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![input_dim];
        sizes.extend(&config.hidden);
        sizes.push(2 * config.latent_dim);
        let encoder = MlpParams::new(&sizes, Activation::Elu, Activation::Identity, false, rng)?;
        let backward = MlpParams::new(&sizes, Activation::Elu, Activation::Identity, false, rng)?;
        Ok(Self {
            encoder,
            backward,
            latent_dim: config.latent_dim,
            beta: config.beta,
            noise: config.noise,
            input_norm: Normalizer::identity(input_dim),
            trained: false,
        })
    }

    /// Builds a model from given networks, marked as trained.
    pub fn from_parts(
        encoder: MlpParams,
        backward: MlpParams,
        beta: f64,
        noise: CebNoiseSpec,
        input_norm: Normalizer,
    ) -> Result<Self> {
        let m = Self {
            latent_dim: encoder.out_dim() / 2,
            encoder,
            backward,
            beta,
            noise,
            input_norm,
            trained: true,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let d = self.input_dim();
        if self.encoder.out_dim() != 2 * self.latent_dim
            || self.backward.out_dim() != 2 * self.latent_dim
            || self.latent_dim == 0
        {
            return Err(Error::Shape("encoders must output mean and log-std of one latent size".into()));
        }
        if self.backward.in_dim() != d || self.input_norm.dim() != d {
            return Err(Error::Shape("encoders and normalizer disagree on input size".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        self.noise.validate()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn check_batch(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!("expected {} input features, got {}", self.input_dim(), x.cols())));
        }
        if x.rows() < 2 {
            return Err(Error::Contrastive(format!("batch of {} has no contrastive partner", x.rows())));
        }
        Ok(())
    }

    fn noised(&self, x: &Matrix, u: &Matrix) -> Matrix {
        let mut xp = x.clone();
        for (v, f) in xp.data_mut().iter_mut().zip(u.data()) {
            *v *= f;
        }
        xp
    }

    pub fn catgen_loss(&self, x: &Matrix, rng: &mut Rng) -> Result<f64> {
        self.check_batch(x)?;
        let noise = CebNoise::draw(x.rows(), x.cols(), self.latent_dim, self.noise, rng);
        Ok(self.catgen_eval(x, &noise)?.loss)
    }

    pub fn catgen_eval(&self, x: &Matrix, noise: &CebNoise) -> Result<CatgenEval> {
        Ok(self.catgen_inner(x, noise, false)?.0)
    }

    /// Loss and gradients for the encoder and backward networks.
    pub fn catgen_grads(&self, x: &Matrix, noise: &CebNoise) -> Result<(CatgenEval, MlpGrads, MlpGrads)> {
        let (eval, grads) = self.catgen_inner(x, noise, true)?;
        let (ge, gb) = grads.expect("requested");
        Ok((eval, ge, gb))
    }

    fn catgen_inner(&self, x: &Matrix, noise: &CebNoise, want_grads: bool) -> Result<(CatgenEval, Option<(MlpGrads, MlpGrads)>)> {
        self.check_batch(x)?;
        let (k, l) = (x.rows(), self.latent_dim);
        if noise.u.rows() != k || noise.u.cols() != x.cols() || noise.xi.rows() != k || noise.xi.cols() != l
            || noise.zeta.rows() != k || noise.zeta.cols() != l
        {
            return Err(Error::Shape("noise draws do not match the batch".into()));
        }
        let xn = self.input_norm.apply_matrix(x);
        let xpn = self.input_norm.apply_matrix(&self.noised(x, &noise.u));
        let ecache = self.encoder.forward_cached(&xn)?;
        let bcache = self.backward.forward_cached(&xpn)?;
        let e = split_heads(ecache.output(), l);
        let b = split_heads(bcache.output(), l);
        let z = reparam(&e, &noise.xi);
        let zp = reparam(&b, &noise.zeta);

        // cross[k][i] = log b(z_k | x'_i), cross_p[k][i] = log e(z'_k | x_i).
        let mut cross = Matrix::zeros(k, k);
        let mut cross_p = Matrix::zeros(k, k);
        for r in 0..k {
            for i in 0..k {
                cross.set(r, i, diag_logpdf(b.mean.row(i), b.log_std.row(i), z.row(r)));
                cross_p.set(r, i, diag_logpdf(e.mean.row(i), e.log_std.row(i), zp.row(r)));
            }
        }
        if !cross.is_finite() || !cross_p.is_finite() {
            return Err(Error::training("catgen loss", 0, "non-finite latent density"));
        }
        let ln_k = (k as f64).ln();
        let beta = self.beta;
        let mut residual = 0.0;
        let mut contrastive = 0.0;
        let mut soft = Matrix::zeros(k, k);
        let mut soft_p = Matrix::zeros(k, k);
        let mut shifted = vec![0.0; k];
        for r in 0..k {
            let e_self = diag_logpdf(e.mean.row(r), e.log_std.row(r), z.row(r));
            let b_self = diag_logpdf(b.mean.row(r), b.log_std.row(r), zp.row(r));
            residual += beta * (e_self - cross.get(r, r)) + beta * (b_self - cross_p.get(r, r));
            for (m, softm) in [(&cross, &mut soft), (&cross_p, &mut soft_p)] {
                let diag = m.get(r, r);
                for i in 0..k {
                    shifted[i] = m.get(r, i) - diag;
                }
                let lse = log_sum_exp(&shifted);
                contrastive += lse - ln_k;
                for i in 0..k {
                    softm.set(r, i, (shifted[i] - lse).exp());
                }
            }
        }
        let eval = CatgenEval {
            loss: (residual + contrastive) / k as f64,
            residual: residual / k as f64,
            contrastive: contrastive / k as f64,
        };
        if !eval.loss.is_finite() {
            return Err(Error::training("catgen loss", 0, "loss is not finite"));
        }
        if !want_grads {
            return Ok((eval, None));
        }

        let mut gz = Matrix::zeros(k, l);
        let mut gzp = Matrix::zeros(k, l);
        let mut ge_mean = Matrix::zeros(k, l);
        let mut ge_ls = Matrix::zeros(k, l);
        let mut gb_mean = Matrix::zeros(k, l);
        let mut gb_ls = Matrix::zeros(k, l);
        for r in 0..k {
            // Self terms enter with weight β.
            accumulate_logpdf_grad(
                beta,
                z.row(r),
                e.mean.row(r),
                e.log_std.row(r),
                gz.row_mut(r),
                ge_mean.row_mut(r),
                ge_ls.row_mut(r),
            );
            accumulate_logpdf_grad(
                beta,
                zp.row(r),
                b.mean.row(r),
                b.log_std.row(r),
                gzp.row_mut(r),
                gb_mean.row_mut(r),
                gb_ls.row_mut(r),
            );
            for i in 0..k {
                let diag = if i == r { 1.0 + beta } else { 0.0 };
                let c = soft.get(r, i) - diag;
                let cp = soft_p.get(r, i) - diag;
                accumulate_logpdf_grad(
                    c,
                    z.row(r),
                    b.mean.row(i),
                    b.log_std.row(i),
                    gz.row_mut(r),
                    gb_mean.row_mut(i),
                    gb_ls.row_mut(i),
                );
                accumulate_logpdf_grad(
                    cp,
                    zp.row(r),
                    e.mean.row(i),
                    e.log_std.row(i),
                    gzp.row_mut(r),
                    ge_mean.row_mut(i),
                    ge_ls.row_mut(i),
                );
            }
        }
        let scale = 1.0 / k as f64;
        let mut de = Matrix::zeros(k, 2 * l);
        let mut db = Matrix::zeros(k, 2 * l);
        for r in 0..k {
            for j in 0..l {
                let se = e.log_std.get(r, j).exp();
                let sb = b.log_std.get(r, j).exp();
                let dze = gz.get(r, j);
                let dzb = gzp.get(r, j);
                de.set(r, j, scale * (ge_mean.get(r, j) + dze));
                de.set(r, l + j, scale * e.live.get(r, j) * (ge_ls.get(r, j) + dze * se * noise.xi.get(r, j)));
                db.set(r, j, scale * (gb_mean.get(r, j) + dzb));
                db.set(r, l + j, scale * b.live.get(r, j) * (gb_ls.get(r, j) + dzb * sb * noise.zeta.get(r, j)));
            }
        }
        let (ge, _) = self.encoder.backward(&ecache, &de)?;
        let (gb, _) = self.backward.backward(&bcache, &db)?;
        Ok((eval, Some((ge, gb))))
    }

    /// Encoder means for each row of `x`.
    pub fn encode_means(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!("expected {} input features, got {}", self.input_dim(), x.cols())));
        }
        let out = self.encoder.forward_batch(&self.input_norm.apply_matrix(x))?;
        Ok(out.columns(0, self.latent_dim))
    }

    /// `log e(z̄|x)` and `z̄` per row.
    fn encoder_at_mean(&self, x: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let out = self.encoder.forward_batch(&self.input_norm.apply_matrix(x))?;
        let l = self.latent_dim;
        let zbar = out.columns(0, l);
        let log_e = out
            .iter_rows()
            .map(|row| diag_logpdf(&row[..l], &row[l..], &row[..l]))
            .collect();
        Ok((log_e, zbar))
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let meta = Meta {
            latent_dim: self.latent_dim,
            beta: self.beta,
            noise: self.noise,
            input_norm: self.input_norm.clone(),
            trained: self.trained,
        };
        write_params(w, &[&self.encoder, &self.backward], serde_json::to_value(meta)?)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let (mut nets, meta) = read_params(r)?;
        if nets.len() != 2 {
            return Err(Error::Format(format!("expected 2 networks, found {}", nets.len())));
        }
        let meta: Meta = serde_json::from_value(meta)?;
        let backward = nets.pop().expect("two nets");
        let encoder = nets.pop().expect("two nets");
        let m = Self {
            encoder,
            backward,
            latent_dim: meta.latent_dim,
            beta: meta.beta,
            noise: meta.noise,
            input_norm: meta.input_norm,
            trained: meta.trained,
        };
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Concatenates `(s, a)` of each transition into one row.
pub fn state_action_rows<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = items.into_iter().map(|t| [t.s.as_slice(), t.a.as_slice()].concat()).collect();
    if rows.is_empty() {
        return Err(Error::Config("no state-action pairs given".into()));
    }
    Matrix::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CebTrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Fits both encoders on minibatches drawn uniformly with replacement from
/// the rows of `data`.
pub fn train_ceb(data: &Matrix, config: &CebConfig, rng: &mut Rng) -> Result<(CebModel, CebTrainReport)> {
    config.validate()?;
    if data.rows() == 0 {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut model = CebModel::new(data.cols(), config, rng)?;
    model.input_norm = Normalizer::fit(data.iter_rows(), data.cols());
    let adam = AdamConfig::new(config.lr);
    let mut enc_opt = OptimState::for_mlp(&model.encoder, adam);
    let mut bwd_opt = OptimState::for_mlp(&model.backward, adam);
    let mut losses = Vec::with_capacity(config.steps);
    let mut batch = Matrix::zeros(config.batch_size, data.cols());
    for step in 0..config.steps {
        for r in 0..config.batch_size {
            batch.row_mut(r).copy_from_slice(data.row(rng::index(rng, data.rows())));
        }
        let noise = CebNoise::draw(config.batch_size, data.cols(), config.latent_dim, config.noise, rng);
        let (eval, ge, gb) = model.catgen_grads(&batch, &noise).map_err(|e| match e {
            Error::Training { reason, .. } => Error::training("ceb", step, reason),
            other => other,
        })?;
        enc_opt.step_mlp(&mut model.encoder, &ge)?;
        bwd_opt.step_mlp(&mut model.backward, &gb)?;
        losses.push(eval.loss);
    }
    model.trained = true;
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok((model, CebTrainReport { losses, final_loss }))
}

/// Fits the latent marginal on encoder means of `data`.
pub fn fit_marginal(
    model: &CebModel,
    data: &Matrix,
    components: usize,
    em_iters: usize,
    rng: &mut Rng,
) -> Result<(GaussianMixture, EmTrace)> {
    if !model.is_trained() {
        return Err(Error::State("marginal fit needs a trained model".into()));
    }
    let z = model.encode_means(data)?;
    GaussianMixture::fit(&z, components, em_iters, 1e-6, rng)
}

/// A trained model and its marginal, scoring state-action pairs by rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    pub model: CebModel,
    pub marginal: GaussianMixture,
}

impl RateModel {
    pub fn new(model: CebModel, marginal: GaussianMixture) -> Result<Self> {
        if !model.is_trained() {
            return Err(Error::State("rate needs a trained model".into()));
        }
        if marginal.dim() != model.latent_dim {
            return Err(Error::Shape(format!(
                "marginal over {} dims, latent has {}",
                marginal.dim(),
                model.latent_dim
            )));
        }
        Ok(Self { model, marginal })
    }

    /// Trains the encoders on `data` and fits the marginal to them.
    pub fn fit(data: &Matrix, config: &CebConfig, rng: &mut Rng) -> Result<(Self, CebTrainReport)> {
        let (model, report) = train_ceb(data, config, rng)?;
        let (marginal, _) = fit_marginal(&model, data, config.mixture_components, config.em_iters, rng)?;
        Ok((Self::new(model, marginal)?, report))
    }

    /// Rate of every row of `x`.
    pub fn rate_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (log_e, zbar) = self.model.encoder_at_mean(x)?;
        Ok(log_e
            .iter()
            .zip(zbar.iter_rows())
            .map(|(le, z)| le - self.marginal.log_density(z))
            .collect())
    }

    /// Rate of each `(s_i, a_i)` row pair.
    pub fn rate_batch(&self, s: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
        if s.rows() != a.rows() {
            return Err(Error::Shape(format!("{} states but {} actions", s.rows(), a.rows())));
        }
        // Chunked so very wide planning levels stay within memory.
        crate::planner::chunked(s, a, 8192, |s, a| self.rate_rows(&s.hcat(a)?))
    }

    pub fn rate(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let x = Matrix::from_vec(1, s.len() + a.len(), [s, a].concat())?;
        Ok(self.rate_rows(&x)?[0])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("ceb.ptg"))?;
        self.marginal.save(&dir.join("marginal.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(CebModel::load(&dir.join("ceb.ptg"))?, GaussianMixture::load(&dir.join("marginal.json"))?)
    }
}

/// Rate of a standalone model and marginal.
pub fn rate(model: &CebModel, marginal: &GaussianMixture, s: &[f64], a: &[f64]) -> Result<f64> {
    if !model.is_trained() {
        return Err(Error::State("rate needs a trained model".into()));
    }
    let x = Matrix::from_vec(1, s.len() + a.len(), [s, a].concat())?;
    let (log_e, zbar) = model.encoder_at_mean(&x)?;
    Ok(log_e[0] - marginal.log_density(zbar.row(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(beta: f64, steps: usize) -> CebConfig {
        CebConfig {
            latent_dim: 3,
            hidden: vec![8, 8],
            batch_size: 16,
            lr: 1e-3,
            mixture_components: 4,
            ..CebConfig::new(beta, steps)
        }
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        Matrix::from_vec(n, d, rng::normals(&mut r, n * d)).unwrap()
    }

    fn all_params(m: &CebModel) -> Vec<f64> {
        m.encoder.tensors().into_iter().chain(m.backward.tensors()).flatten().copied().collect()
    }

    fn set_param(m: &mut CebModel, idx: usize, v: f64) {
        let mut i = idx;
        for t in m.encoder.tensors_mut().into_iter().chain(m.backward.tensors_mut()) {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("index out of range");
    }

    fn flat(g: &MlpGrads) -> Vec<f64> {
        g.tensors().into_iter().flatten().copied().collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::seeded(11);
        let cfg = tiny_config(0.3, 0);
        let mut m = CebModel::new(5, &cfg, &mut r).unwrap();
        let x = random_rows(4, 5, 12);
        let noise = CebNoise::draw(4, 5, 3, CebNoiseSpec { lo: 0.9, hi: 1.1 }, &mut r);
        let (_, ge, gb) = m.catgen_grads(&x, &noise).unwrap();
        let analytic: Vec<f64> = flat(&ge).into_iter().chain(flat(&gb)).collect();
        let params = all_params(&m);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (i, &p) in params.iter().enumerate() {
            set_param(&mut m, i, p + h);
            let up = m.catgen_eval(&x, &noise).unwrap().loss;
            set_param(&mut m, i, p - h);
            let down = m.catgen_eval(&x, &noise).unwrap().loss;
            set_param(&mut m, i, p);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut r = rng::seeded(1);
        let m = CebModel::new(4, &tiny_config(0.1, 0), &mut r).unwrap();
        let x = random_rows(6, 4, 2);
        let noise = CebNoise::draw(6, 4, 3, CebNoiseSpec::default(), &mut r);
        let perm = [3, 0, 5, 1, 4, 2];
        let pick = |mat: &Matrix| Matrix::from_rows(&perm.iter().map(|&i| mat.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let permuted = CebNoise { u: pick(&noise.u), xi: pick(&noise.xi), zeta: pick(&noise.zeta) };
        let a = m.catgen_eval(&x, &noise).unwrap().loss;
        let b = m.catgen_eval(&pick(&x), &permuted).unwrap().loss;
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn symmetric_infonce_lower_bound() {
        let mut r = rng::seeded(3);
        let mut cfg = tiny_config(0.0, 0);
        cfg.noise = CebNoiseSpec { lo: 1.0, hi: 1.0 };
        let mut m = CebModel::new(4, &cfg, &mut r).unwrap();
        m.backward = m.encoder.clone();
        for seed in 0..20 {
            let k = 2 + seed as usize % 7;
            let x = random_rows(k, 4, 100 + seed);
            let loss = m.catgen_loss(&x, &mut r).unwrap();
            assert!(loss > -2.0 * (k as f64).ln(), "k={k} loss={loss}");
        }
    }

    #[test]
    fn duplicate_batch_has_zero_contrastive_term() {
        let mut r = rng::seeded(4);
        let mut cfg = tiny_config(0.5, 0);
        cfg.noise = CebNoiseSpec { lo: 1.0, hi: 1.0 };
        let m = CebModel::new(3, &cfg, &mut r).unwrap();
        let x = Matrix::from_rows(&vec![vec![0.3, -1.2, 0.7]; 9]).unwrap();
        let noise = CebNoise::draw(9, 3, 3, cfg.noise, &mut r);
        let eval = m.catgen_eval(&x, &noise).unwrap();
        assert_eq!(eval.contrastive, 0.0);
        assert!((eval.loss - eval.residual).abs() == 0.0);
    }

    #[test]
    fn singleton_batch_is_contrastive_error() {
        let m = CebModel::new(2, &tiny_config(0.1, 0), &mut rng::seeded(0)).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(matches!(m.catgen_loss(&x, &mut rng::seeded(1)), Err(Error::Contrastive(_))));
    }

    #[test]
    fn beta_and_steps_are_required_config_fields() {
        assert!(serde_json::from_str::<CebConfig>(r#"{"steps": 10}"#).is_err());
        assert!(serde_json::from_str::<CebConfig>(r#"{"beta": 0.01}"#).is_err());
        let c: CebConfig = serde_json::from_str(r#"{"beta": 0.01, "steps": 10}"#).unwrap();
        assert_eq!(c.hidden, vec![256, 128, 64]);
        assert_eq!(c.mixture_components, 32);
    }

    fn clustered_rows(n: usize, seed: u64) -> Matrix {
        let mut r = rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 1.0 } else { -1.0 };
                (0..4).map(|j| c * (j as f64 * 0.5 - 0.5) + 0.2 * rng::normal(&mut r)).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn training_loss_decreases() {
        let data = clustered_rows(2000, 9);
        let mut improvements = Vec::new();
        for seed in 0..5 {
            let (_, rep) = train_ceb(&data, &tiny_config(0.01, 500), &mut rng::seeded(seed)).unwrap();
            let head: f64 = rep.losses[..50].iter().sum::<f64>() / 50.0;
            let tail: f64 = rep.losses[450..].iter().sum::<f64>() / 50.0;
            improvements.push(head - tail);
        }
        improvements.sort_by(f64::total_cmp);
        assert!(improvements[2] > 0.0, "{improvements:?}");
    }

    #[test]
    fn rate_is_higher_far_from_the_data() {
        let data = clustered_rows(3000, 5);
        let (rm, _) = RateModel::fit(&data, &tiny_config(0.01, 1500), &mut rng::seeded(6)).unwrap();
        let held = clustered_rows(300, 77);
        let mut far = held.clone();
        far.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let near_rate = mean(rm.rate_rows(&held).unwrap());
        let far_rate = mean(rm.rate_rows(&far).unwrap());
        assert!(near_rate < far_rate, "{near_rate} vs {far_rate}");
    }

    #[test]
    fn rate_is_finite_and_deterministic() {
        let data = clustered_rows(400, 1);
        let (rm, _) = RateModel::fit(&data, &tiny_config(0.01, 50), &mut rng::seeded(2)).unwrap();
        let s = &data.row(0)[..2];
        let a = &data.row(0)[2..];
        let v = rm.rate(s, a).unwrap();
        assert!(v.is_finite());
        assert_eq!(v.to_bits(), rm.rate(s, a).unwrap().to_bits());
        assert_eq!(v.to_bits(), rate(&rm.model, &rm.marginal, s, a).unwrap().to_bits());
        let batch = rm.rate_rows(&data).unwrap();
        assert!((batch[0] - v).abs() < 1e-12);
    }

    #[test]
    fn untrained_model_cannot_score() {
        let mut r = rng::seeded(0);
        let m = CebModel::new(4, &tiny_config(0.01, 0), &mut r).unwrap();
        let g = GaussianMixture { weights: vec![1.0], means: vec![vec![0.0; 3]], variances: vec![vec![1.0; 3]] };
        assert!(matches!(rate(&m, &g, &[0.0, 0.0], &[0.0, 0.0]), Err(Error::State(_))));
        assert!(matches!(RateModel::new(m, g), Err(Error::State(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = clustered_rows(200, 3);
        let (rm, _) = RateModel::fit(&data, &tiny_config(0.01, 20), &mut rng::seeded(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rm.save(dir.path()).unwrap();
        let back = RateModel::load(dir.path()).unwrap();
        assert_eq!(back, rm);
    }
}
