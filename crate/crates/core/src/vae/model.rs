use serde::Serialize;

use super::VaeError;
use crate::autodiff::{AutodiffError, Tape, Var};
use crate::estimators::{build_surrogate, sample_noise, EstimatorConfig, EstimatorKind, EstimatorNoise};
use crate::samplers::{OneHotSample, RngStream};
use crate::tensor::{Tensor, TensorError};
use crate::variance::{entropy_rows, GradientProbe, VarianceError};

pub const PIXELS: usize = 784;
pub const LATENTS: usize = 30;
pub const CATEGORIES: usize = 10;
pub const LATENT_DIM: usize = LATENTS * CATEGORIES;

/// Encoder `784 -> hidden -> 30 x 10` logits and decoder
/// `300 -> hidden -> 784` Bernoulli logits, both with one ReLU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub hidden_enc: usize,
    pub hidden_dec: usize,
    /// `enc_w1, enc_b1, enc_w2, enc_b2, dec_w1, dec_b1, dec_w2, dec_b2`.
    pub params: Vec<Tensor>,
}

pub const PARAM_NAMES: [&str; 8] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2",
];

/// Number of leading entries of `params` that belong to the encoder.
pub const ENCODER_TENSORS: usize = 4;

fn glorot(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * a).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("sizes agree")
}

impl VaeModel {
    pub fn new(hidden_enc: usize, hidden_dec: usize, rng: &mut RngStream) -> Self {
        let params = vec![
            glorot(PIXELS, hidden_enc, rng),
            Tensor::zeros(&[hidden_enc]),
            glorot(hidden_enc, LATENT_DIM, rng),
            Tensor::zeros(&[LATENT_DIM]),
            glorot(LATENT_DIM, hidden_dec, rng),
            Tensor::zeros(&[hidden_dec]),
            glorot(hidden_dec, PIXELS, rng),
            Tensor::zeros(&[PIXELS]),
        ];
        Self {
            hidden_enc,
            hidden_dec,
            params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.shape().to_vec()).collect()
    }

    /// Places the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Encoder logits for `batch`, `(B * 30) x 10`.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, AutodiffError> {
        let b = tape.shape(x)[0];
        let h = tape.matmul(x, vars[0])?;
        let h = tape.add_bias(h, vars[1])?;
        let h = tape.relu_plus(h)?;
        let l = tape.matmul(h, vars[2])?;
        let l = tape.add_bias(l, vars[3])?;
        tape.reshape(l, &[b * LATENTS, CATEGORIES])
    }

    /// Decoder pixel logits, `B x 784`, from latents `(B * 30) x 10`.
    pub fn decode(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var, AutodiffError> {
        let b = tape.shape(z)[0] / LATENTS;
        let z = tape.reshape(z, &[b, LATENT_DIM])?;
        let h = tape.matmul(z, vars[4])?;
        let h = tape.add_bias(h, vars[5])?;
        let h = tape.relu_plus(h)?;
        let o = tape.matmul(h, vars[6])?;
        tape.add_bias(o, vars[7])
    }

    /// Detached encoder logits for `batch`.
    pub fn encoder_logits(&self, batch: &Tensor) -> Result<Tensor, VaeError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(batch.clone());
        let l = self.encode(&mut tape, &vars, x)?;
        Ok(tape.value(l).clone())
    }
}

/// Scalar pieces of one negative-ELBO evaluation. `loss` is the node to
/// differentiate; its value is `recon + kl`.
#[derive(Debug, Clone)]
pub struct ElboTerms {
    pub loss: Var,
    pub recon: f64,
    pub kl: f64,
    pub entropy: f64,
    pub samples: Vec<OneHotSample>,
    pub decoder_input: Var,
}

impl ElboTerms {
    pub fn neg_elbo(&self) -> f64 {
        self.recon + self.kl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub neg_elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub entropy: f64,
}

fn term<T>(name: &'static str, r: Result<T, AutodiffError>) -> Result<T, VaeError> {
    r.map_err(|e| match e {
        AutodiffError::Tensor(TensorError::NonFinite { .. }) => VaeError::NonFinite { term: name },
        other => other.into(),
    })
}

fn finite(name: &'static str, x: f64) -> Result<f64, VaeError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(VaeError::NonFinite { term: name })
    }
}

/// Mean negative ELBO over `batch` with the estimator noise drawn from `rng`.
pub fn elbo_loss(
    tape: &mut Tape,
    model: &VaeModel,
    vars: &[Var],
    batch: &Tensor,
    cfg: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<ElboTerms, VaeError> {
    let x = tape.constant(batch.clone());
    let logits = term("encoder", model.encode(tape, vars, x))?;
    let noise = sample_noise(tape.value(logits), cfg, rng)?;
    elbo_rest(tape, model, vars, batch, logits, &noise, cfg)
}

/// [`elbo_loss`] with frozen estimator noise.
pub fn elbo_loss_with_noise(
    tape: &mut Tape,
    model: &VaeModel,
    vars: &[Var],
    batch: &Tensor,
    noise: &EstimatorNoise,
    cfg: &EstimatorConfig,
) -> Result<ElboTerms, VaeError> {
    let x = tape.constant(batch.clone());
    let logits = term("encoder", model.encode(tape, vars, x))?;
    elbo_rest(tape, model, vars, batch, logits, noise, cfg)
}

fn elbo_rest(
    tape: &mut Tape,
    model: &VaeModel,
    vars: &[Var],
    batch: &Tensor,
    logits: Var,
    noise: &EstimatorNoise,
    cfg: &EstimatorConfig,
) -> Result<ElboTerms, VaeError> {
    let b = batch.shape()[0];
    let inv_b = 1.0 / b as f64;
    let out = build_surrogate(tape, logits, noise, cfg)?;
    let entropy = entropy_rows(tape.value(out.surrogate_probs));

    let (recon_rows, recon) = term(
        "reconstruction",
        (|| {
            let xl = model.decode(tape, vars, out.output)?;
            let nll = tape.bce_with_logits(xl, batch)?;
            let rows = tape.row_sum(nll)?;
            let total = tape.sum(rows)?;
            Ok((rows, tape.scale(total, inv_b)?))
        })(),
    )?;

    let kl = term(
        "kl",
        (|| {
            let logp = tape.log_softmax(logits)?;
            let p = tape.exp(logp)?;
            let shifted = tape.add_scalar(logp, (CATEGORIES as f64).ln())?;
            let pk = tape.mul(p, shifted)?;
            let total = tape.sum(pk)?;
            tape.scale(total, inv_b)
        })(),
    )?;

    let mut loss = term("loss", tape.add(recon, kl))?;
    if cfg.kind == EstimatorKind::Reinforce {
        // Score-function term with zero forward value:
        // f * log p(D) - stop_grad(f * log p(D)), with f = stop_grad(recon).
        let logp = out.log_prob.expect("REINFORCE output carries log_prob");
        loss = term(
            "score",
            (|| {
                let per_example = tape.reshape(logp, &[b, LATENTS])?;
                let per_example = tape.row_sum(per_example)?;
                let f = tape.stop_grad(recon_rows)?;
                let s = tape.mul(f, per_example)?;
                let s = tape.sum(s)?;
                let s = tape.scale(s, inv_b)?;
                let frozen = tape.stop_grad(s)?;
                let zero = tape.sub(s, frozen)?;
                tape.add(loss, zero)
            })(),
        )?;
    }

    Ok(ElboTerms {
        loss,
        recon: finite("reconstruction", tape.value(recon).data()[0])?,
        kl: finite("kl", tape.value(kl).data()[0])?,
        entropy,
        samples: out.samples,
        decoder_input: out.output,
    })
}

/// Loss and full gradient (parameter declaration order) for one batch.
pub fn loss_and_grads(
    model: &VaeModel,
    batch: &Tensor,
    cfg: &EstimatorConfig,
    rng: &mut RngStream,
) -> Result<(LossBreakdown, Vec<Tensor>), VaeError> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let terms = elbo_loss(&mut tape, model, &vars, batch, cfg, rng)?;
    tape.backward(terms.loss)?;
    let grads = collect_grads(&tape, model, &vars);
    Ok((
        LossBreakdown {
            neg_elbo: terms.neg_elbo(),
            recon: terms.recon,
            kl: terms.kl,
            entropy: terms.entropy,
        },
        grads,
    ))
}

fn collect_grads(tape: &Tape, model: &VaeModel, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .zip(&model.params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// Frozen model plus a fixed batch, for gradient-variance profiling.
#[derive(Debug, Clone)]
pub struct VaeSnapshotProbe {
    pub model: VaeModel,
    pub batch: Tensor,
    logits0: Tensor,
}

impl VaeSnapshotProbe {
    pub fn new(model: VaeModel, batch: Tensor) -> Result<Self, VaeError> {
        let logits0 = model.encoder_logits(&batch)?;
        Ok(Self { model, batch, logits0 })
    }
}

impl GradientProbe for VaeSnapshotProbe {
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn logits0(&self) -> Tensor {
        self.logits0.clone()
    }

    fn gradient(&self, cfg: &EstimatorConfig, noise: &EstimatorNoise) -> Result<Vec<f64>, VarianceError> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let terms = elbo_loss_with_noise(&mut tape, &self.model, &vars, &self.batch, noise, cfg)
            .map_err(|e| VarianceError::Probe(e.to_string()))?;
        tape.backward(terms.loss)?;
        let mut flat = Vec::with_capacity(self.model.param_count());
        for (&v, p) in vars.iter().zip(&self.model.params) {
            match tape.grad(v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.resize(flat.len() + p.len(), 0.0),
            }
        }
        Ok(flat)
    }
}
