//! The forecasting network.
//!
//! Forward path: feature-level attention reweights the input block, a
//! transformer encoder mixes it over time, mean pooling collapses the time
//! axis, and a linear head emits the `w_out`-day forecast. A domain
//! classifier branches off the pooled vector behind a gradient-reversal
//! boundary, so minimizing the combined loss trains the encoder to predict
//! stress while un-learning participant identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParameterSet, Tensor};
use crate::error::Error;
use crate::rng::stream;
use crate::Result;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub d_features: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub w_in: usize,
    pub w_out: usize,
    pub n_domains: usize,
    pub dropout: f64,
    pub grl_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_features: 15,
            d_model: 128,
            n_heads: 8,
            n_layers: 2,
            d_ff: 256,
            w_in: 5,
            w_out: 1,
            n_domains: 14,
            dropout: 0.1,
            grl_alpha: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_domains == 0 {
            return Err(Error::Config(
                "need at least 1 domain for the adversarial head".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.grl_alpha) {
            return Err(Error::Config(format!(
                "grl_alpha {} outside [0,1]",
                self.grl_alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        for (name, v) in [
            ("d_features", self.d_features),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("w_in", self.w_in),
            ("w_out", self.w_out),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(
        params: &mut ParameterSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Linear {
            w: params.register(format!("{name}.w"), Tensor::param(&[fan_in, fan_out], w)),
            b: params.register(
                format!("{name}.b"),
                Tensor::param(&[fan_out], vec![0.0; fan_out]),
            ),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_row(&self.b)
    }
}

struct Norm {
    gamma: Tensor,
    beta: Tensor,
}

impl Norm {
    fn new(params: &mut ParameterSet, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: params.register(format!("{name}.gamma"), Tensor::param(&[dim], vec![1.0; dim])),
            beta: params.register(format!("{name}.beta"), Tensor::param(&[dim], vec![0.0; dim])),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm_last(&self.gamma, &self.beta, 1e-5)
    }
}

struct EncoderLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_attn: Norm,
    ff1: Linear,
    ff2: Linear,
    norm_ff: Norm,
}

/// Forward products: the forecast, optional domain logits, the feature
/// attention weights, and per-layer attention maps for diagnostics.
pub struct ForwardOutput {
    /// `[batch, w_out]`
    pub y_hat: Tensor,
    /// `[batch, n_domains]`, present when requested.
    pub domain_logits: Option<Tensor>,
    /// `[batch, d_features]`, rows sum to 1.
    pub feature_weights: Tensor,
    /// One `[batch, n_heads, w_in, w_in]` tensor per encoder layer.
    pub attention: Vec<Tensor>,
}

/// Loss components for one batch.
pub struct LossParts {
    pub total: Tensor,
    pub main: f64,
    pub domain: Option<f64>,
}

pub struct AdaptStressModel {
    pub cfg: ModelConfig,
    pub params: ParameterSet,
    attn_score1: Linear,
    attn_score2: Linear,
    embed: Linear,
    positions: Tensor,
    layers: Vec<EncoderLayer>,
    head: Linear,
    domain1: Linear,
    domain2: Linear,
}

impl AdaptStressModel {
    /// Builds a model with Xavier-uniform weights drawn from a named stream
    /// of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<AdaptStressModel> {
        cfg.validate()?;
        let mut rng = stream(seed, "model-init", 0);
        let mut params = ParameterSet::new();
        let d = cfg.d_features;
        let m = cfg.d_model;

        let attn_score1 = Linear::new(&mut params, "feature_attn.score1", 2 * d, 2 * d, &mut rng);
        let attn_score2 = Linear::new(&mut params, "feature_attn.score2", 2 * d, d, &mut rng);
        let embed = Linear::new(&mut params, "embed", d, m, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("encoder.{i}");
                EncoderLayer {
                    wq: Linear::new(&mut params, &format!("{p}.attn.q"), m, m, &mut rng),
                    wk: Linear::new(&mut params, &format!("{p}.attn.k"), m, m, &mut rng),
                    wv: Linear::new(&mut params, &format!("{p}.attn.v"), m, m, &mut rng),
                    wo: Linear::new(&mut params, &format!("{p}.attn.o"), m, m, &mut rng),
                    norm_attn: Norm::new(&mut params, &format!("{p}.norm_attn"), m),
                    ff1: Linear::new(&mut params, &format!("{p}.ff1"), m, cfg.d_ff, &mut rng),
                    ff2: Linear::new(&mut params, &format!("{p}.ff2"), cfg.d_ff, m, &mut rng),
                    norm_ff: Norm::new(&mut params, &format!("{p}.norm_ff"), m),
                }
            })
            .collect();
        let head = Linear::new(&mut params, "head", m, cfg.w_out, &mut rng);
        let d_hidden = (m / 2).max(2);
        let domain1 = Linear::new(&mut params, "domain.fc1", m, d_hidden, &mut rng);
        let domain2 = Linear::new(&mut params, "domain.fc2", d_hidden, cfg.n_domains, &mut rng);

        let positions = sinusoidal_positions(cfg.w_in, m);

        Ok(AdaptStressModel {
            cfg,
            params,
            attn_score1,
            attn_score2,
            embed,
            positions,
            layers,
            head,
            domain1,
            domain2,
        })
    }

    /// Adjusts the gradient-reversal strength (adaptation phases tune this).
    pub fn set_grl_alpha(&mut self, alpha: f64) {
        self.cfg.grl_alpha = alpha;
    }

    /// Independent copy with its own parameter storage; adapting the copy
    /// leaves this model untouched.
    pub fn deep_clone(&self) -> Result<AdaptStressModel> {
        let clone = AdaptStressModel::new(self.cfg.clone(), 0)?;
        clone.params.load_from(&self.params)?;
        Ok(clone)
    }

    /// Softmax weights over features from each window's per-feature mean and
    /// standard deviation, and the input block rescaled by `d * weight` so a
    /// uniform weighting is the identity.
    pub fn feature_attention(&self, x: &Tensor) -> (Tensor, Tensor) {
        let d = self.cfg.d_features;
        assert_eq!(x.shape().len(), 3, "inputs must be [batch, w_in, d]");
        assert_eq!(x.shape()[2], d, "feature dimension mismatch");
        let mean = x.mean_mid();
        let centered = x.sub_bcast_mid(&mean);
        let var = centered.mul(&centered).mean_mid();
        let std = var.sqrt_eps(1e-8);
        let summary = mean.concat_last(&std);
        let hidden = self.attn_score1.forward(&summary).gelu();
        let scores = self.attn_score2.forward(&hidden);
        let weights = scores.softmax_last();
        let reweighted = x.mul_bcast_mid(&weights.scale(d as f64));
        (reweighted, weights)
    }

    /// Transformer encoder over the reweighted block. Returns the encoded
    /// sequence and per-layer attention maps.
    pub fn encode(
        &self,
        x: &Tensor,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Tensor, Vec<Tensor>) {
        let s = x.shape();
        assert_eq!(s.len(), 3, "encode expects [batch, w_in, d]");
        let (b, t, _) = (s[0], s[1], s[2]);
        assert_eq!(t, self.cfg.w_in, "time axis must equal w_in");
        let m = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let hd = m / h;

        let mut e = self.embed.forward(x).add_bcast_batch(&self.positions);
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let split = |y: Tensor| y.reshape(&[b, t, h, hd]).permute(&[0, 2, 1, 3]);
            let q = split(layer.wq.forward(&e));
            let k = split(layer.wk.forward(&e));
            let v = split(layer.wv.forward(&e));
            let scores = q
                .bmm(&k.permute(&[0, 1, 3, 2]))
                .scale(1.0 / (hd as f64).sqrt());
            let attn = scores.softmax_last();
            maps.push(attn.clone());
            let ctx = attn.bmm(&v).permute(&[0, 2, 1, 3]).reshape(&[b, t, m]);
            let mixed = layer.wo.forward(&ctx);
            let mixed = self.dropout(mixed, &mut dropout_rng);
            e = layer.norm_attn.forward(&e.add(&mixed));
            let ff = layer.ff2.forward(&layer.ff1.forward(&e).gelu());
            let ff = self.dropout(ff, &mut dropout_rng);
            e = layer.norm_ff.forward(&e.add(&ff));
        }
        (e, maps)
    }

    /// Full forward pass on `[batch, w_in, d_features]` inputs.
    ///
    /// `dropout_rng` enables training-mode dropout; `None` gives the
    /// deterministic inference path.
    pub fn forward(
        &self,
        x: &Tensor,
        return_domain: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> ForwardOutput {
        let (reweighted, feature_weights) = self.feature_attention(x);
        let (encoded, attention) = self.encode(&reweighted, dropout_rng);
        let pooled = encoded.mean_mid();
        let y_hat = self.head.forward(&pooled);
        let domain_logits = return_domain.then(|| {
            let reversed = pooled.grad_reverse(self.cfg.grl_alpha);
            let hidden = self.domain1.forward(&reversed).gelu();
            self.domain2.forward(&hidden)
        });
        ForwardOutput {
            y_hat,
            domain_logits,
            feature_weights,
            attention,
        }
    }

    fn dropout(&self, x: Tensor, rng: &mut Option<&mut ChaCha8Rng>) -> Tensor {
        let p = self.cfg.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| {
                        if rng.gen_range(0.0..1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                x.mul(&Tensor::from_vec(x.shape(), mask))
            }
            _ => x,
        }
    }

    /// Inference helper: predictions as plain rows, no tape.
    pub fn predict(&self, inputs: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let d = self.cfg.d_features;
        let t = self.cfg.w_in;
        assert_eq!(inputs.len(), batch * t * d);
        crate::autodiff::no_grad(|| {
            let x = Tensor::from_vec(&[batch, t, d], inputs.to_vec());
            let out = self.forward(&x, false, None);
            out.y_hat
                .to_vec()
                .chunks(self.cfg.w_out)
                .map(|c| c.to_vec())
                .collect()
        })
    }
}

/// `L_main + alpha * L_domain`: forecast MSE plus weighted domain
/// cross-entropy. With `alpha = 0` or no domain branch, exactly the MSE.
pub fn combined_loss(
    y_hat: &Tensor,
    targets: &Tensor,
    domain: Option<(&Tensor, &[usize])>,
    alpha: f64,
) -> Result<LossParts> {
    if y_hat.shape() != targets.shape() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} vs target shape {:?}",
            y_hat.shape(),
            targets.shape()
        )));
    }
    let diff = y_hat.sub(targets);
    let main = diff.mul(&diff).mean_all();
    let main_value = main.value();
    match domain {
        Some((logits, labels)) => {
            let ce = logits.cross_entropy_logits(labels)?;
            let domain_value = ce.value();
            let total = main.add(&ce.scale(alpha));
            Ok(LossParts {
                total,
                main: main_value,
                domain: Some(domain_value),
            })
        }
        None => Ok(LossParts {
            total: main,
            main: main_value,
            domain: None,
        }),
    }
}

fn sinusoidal_positions(t: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; t * m];
    for pos in 0..t {
        for i in 0..m {
            let exponent = (2 * (i / 2)) as f64 / m as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * m + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[t, m], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::no_grad;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_features: 4,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 12,
            w_in: 3,
            w_out: 2,
            n_domains: 3,
            dropout: 0.0,
            grl_alpha: 0.1,
        }
    }

    fn batch(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "model-test-batch", 0);
        let data: Vec<f64> = (0..b * cfg.w_in * cfg.d_features)
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Tensor::from_vec(&[b, cfg.w_in, cfg.d_features], data)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.n_heads = 7;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.n_domains = 0;
        assert!(bad.validate().is_err());
        let mut single = ModelConfig::default();
        single.n_domains = 1;
        assert!(single.validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.grl_alpha = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes_across_grid() {
        for (w_in, w_out) in [(3, 1), (5, 3), (7, 5), (9, 7)] {
            let cfg = ModelConfig {
                w_in,
                w_out,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 8,
                d_features: 4,
                n_domains: 3,
                dropout: 0.0,
                grl_alpha: 0.1,
            };
            let model = AdaptStressModel::new(cfg.clone(), 1).unwrap();
            let x = batch(&cfg, 2, 9);
            let out = no_grad(|| model.forward(&x, true, None));
            assert_eq!(out.y_hat.shape(), &[2, w_out]);
            assert_eq!(out.domain_logits.unwrap().shape(), &[2, 3]);
            assert_eq!(out.feature_weights.shape(), &[2, 4]);
        }
    }

    #[test]
    fn feature_weights_are_a_distribution() {
        let cfg = tiny_cfg();
        let model = AdaptStressModel::new(cfg.clone(), 2).unwrap();
        let x = batch(&cfg, 5, 3);
        let out = no_grad(|| model.forward(&x, false, None));
        let w = out.feature_weights.to_vec();
        for row in w.chunks(cfg.d_features) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn constant_scorer_gives_identity_reweighting() {
        let cfg = tiny_cfg();
        let model = AdaptStressModel::new(cfg.clone(), 4).unwrap();
        // zero the scorer output layer: all scores equal, softmax uniform
        model.attn_score2.w.set_data(vec![0.0; 8 * 4]);
        model.attn_score2.b.set_data(vec![0.0; 4]);
        let x = batch(&cfg, 3, 5);
        let (reweighted, weights) = no_grad(|| model.feature_attention(&x));
        for w in weights.to_vec() {
            assert!((w - 0.25).abs() < 1e-12);
        }
        for (a, b) in reweighted.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-12, "uniform weights must be identity");
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = tiny_cfg();
        let model = AdaptStressModel::new(cfg.clone(), 6).unwrap();
        let x = batch(&cfg, 2, 7);
        let out = no_grad(|| model.forward(&x, false, None));
        assert_eq!(out.attention.len(), cfg.n_layers);
        for map in &out.attention {
            assert_eq!(map.shape(), &[2, cfg.n_heads, cfg.w_in, cfg.w_in]);
            for row in map.to_vec().chunks(cfg.w_in) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permuting_time_steps_changes_the_output() {
        let cfg = tiny_cfg();
        let model = AdaptStressModel::new(cfg.clone(), 8).unwrap();
        let x = batch(&cfg, 1, 11);
        let permuted = {
            let mut data = x.to_vec();
            let d = cfg.d_features;
            data.rotate_left(d); // day order 2,3,1
            Tensor::from_vec(x.shape(), data)
        };
        let a = no_grad(|| model.forward(&x, false, None).y_hat.to_vec());
        let b = no_grad(|| model.forward(&permuted, false, None).y_hat.to_vec());
        let max_delta = a
            .iter()
            .zip(&b)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_delta > 1e-8, "position encoding must break permutation symmetry");
    }

    #[test]
    fn zero_input_is_finite() {
        let cfg = tiny_cfg();
        let model = AdaptStressModel::new(cfg.clone(), 10).unwrap();
        let x = Tensor::zeros(&[2, cfg.w_in, cfg.d_features]);
        let out = no_grad(|| model.forward(&x, true, None));
        assert!(out.y_hat.to_vec().iter().all(|v| v.is_finite()));
        assert!(out
            .domain_logits
            .unwrap()
            .to_vec()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_off_is_deterministic() {
        let cfg = tiny_cfg();
        let model = AdaptStressModel::new(cfg.clone(), 12).unwrap();
        let x = batch(&cfg, 4, 13);
        let a = no_grad(|| model.forward(&x, true, None).y_hat.to_vec());
        let b = no_grad(|| model.forward(&x, true, None).y_hat.to_vec());
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_on_perturbs_training_forward() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.5;
        let model = AdaptStressModel::new(cfg.clone(), 14).unwrap();
        let x = batch(&cfg, 4, 15);
        let mut rng = stream(14, "dropout", 0);
        let a = model.forward(&x, false, Some(&mut rng)).y_hat.to_vec();
        let b = no_grad(|| model.forward(&x, false, None).y_hat.to_vec());
        assert_ne!(a, b);
    }

    #[test]
    fn combined_loss_values() {
        let y_hat = Tensor::from_vec(&[2, 1], vec![0.5, 0.25]);
        let y = Tensor::from_vec(&[2, 1], vec![0.5, 0.25]);
        let logits = Tensor::from_vec(&[2, 14], vec![0.0; 28]);
        let parts = combined_loss(&y_hat, &y, Some((&logits, &[0, 5])), 0.1).unwrap();
        assert_eq!(parts.main, 0.0);
        let expected = 0.1 * (14.0f64).ln();
        assert!((parts.total.value() - expected).abs() < 1e-12);
        assert!(parts.total.value() >= 0.0);

        // alpha = 0 collapses to the MSE exactly
        let y2 = Tensor::from_vec(&[2, 1], vec![0.0, 0.0]);
        let parts0 = combined_loss(&y_hat, &y2, Some((&logits, &[0, 5])), 0.0).unwrap();
        assert_eq!(parts0.total.value(), parts0.main);

        // shape mismatch is a contract error
        let bad = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert!(combined_loss(&y_hat, &bad, None, 0.0).is_err());
        // invalid label is a contract error
        assert!(combined_loss(&y_hat, &y, Some((&logits, &[0, 99])), 0.1).is_err());
    }

    #[test]
    fn domain_gradients_reverse_with_alpha() {
        let cfg = tiny_cfg();
        let alpha = cfg.grl_alpha;
        let build = || AdaptStressModel::new(tiny_cfg(), 20).unwrap();
        let x = batch(&cfg, 3, 21);
        let labels = [0usize, 1, 2];

        let domain_grad = |model: &AdaptStressModel, name: &str| -> Vec<f64> {
            model.params.clear_grads();
            let out = model.forward(&x, true, None);
            let ce = out
                .domain_logits
                .as_ref()
                .unwrap()
                .cross_entropy_logits(&labels)
                .unwrap();
            ce.backward().unwrap();
            model.params.get(name).unwrap().grad().unwrap()
        };

        let reversed = build();
        let mut identity = build();
        // -(-1) = +1: the boundary becomes the identity in the backward pass
        identity.cfg.grl_alpha = -1.0;
        for name in ["embed.w", "encoder.0.attn.q.w", "feature_attn.score1.w"] {
            let g_rev = domain_grad(&reversed, name);
            let g_id = domain_grad(&identity, name);
            for (r, i) in g_rev.iter().zip(&g_id) {
                assert!(
                    (r + alpha * i).abs() <= 1e-10,
                    "{name}: reversed {r} vs identity {i}"
                );
            }
        }
        // the domain head itself sits after the boundary: plain gradients
        let g_rev = domain_grad(&reversed, "domain.fc2.w");
        let g_id = domain_grad(&identity, "domain.fc2.w");
        for (r, i) in g_rev.iter().zip(&g_id) {
            assert!((r - i).abs() <= 1e-10);
        }
    }

    #[test]
    fn full_model_gradcheck_sampled() {
        let cfg = tiny_cfg();
        let alpha = cfg.grl_alpha;
        let model = AdaptStressModel::new(cfg.clone(), 30).unwrap();
        let x = batch(&cfg, 2, 31);
        let targets = Tensor::from_vec(&[2, cfg.w_out], vec![0.3, 0.6, 0.2, 0.8]);
        let labels = [1usize, 2];

        let parts = || {
            let out = model.forward(&x, true, None);
            combined_loss(
                &out.y_hat,
                &targets,
                Some((out.domain_logits.as_ref().unwrap(), &labels)),
                alpha,
            )
            .unwrap()
        };
        model.params.clear_grads();
        parts().total.backward().unwrap();

        // Finite differences measure the true derivative, but the reversal
        // boundary makes the tape report d_main - alpha^2 * d_ce for
        // parameters before it (and alpha * d_ce for the domain head), so the
        // oracle measures the two loss components separately and combines
        // them with those factors.
        let h = 1e-5;
        let mut checked = 0;
        for (name, tensor) in model.params.iter() {
            let grad = tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; tensor.len()]);
            let base = tensor.to_vec();
            let ce_factor = if name.starts_with("domain.") { alpha } else { -alpha * alpha };
            // a handful of elements per tensor keeps the test fast while
            // covering every parameter matrix
            let stride = (base.len() / 3).max(1);
            for i in (0..base.len()).step_by(stride) {
                let mut up = base.clone();
                up[i] += h;
                tensor.set_data(up);
                let p_up = no_grad(&parts);
                let (main_up, ce_up) = (p_up.main, p_up.domain.unwrap());
                let mut dn = base.clone();
                dn[i] -= h;
                tensor.set_data(dn);
                let p_dn = no_grad(&parts);
                let (main_dn, ce_dn) = (p_dn.main, p_dn.domain.unwrap());
                tensor.set_data(base.clone());
                let fd_main = (main_up - main_dn) / (2.0 * h);
                let fd_ce = (ce_up - ce_dn) / (2.0 * h);
                let expected = fd_main + ce_factor * fd_ce;
                let an = grad[i];
                let denom = expected.abs().max(an.abs()).max(1e-3);
                assert!(
                    (expected - an).abs() / denom < 1e-4,
                    "{name}[{i}]: finite-diff {expected} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 40, "sampled {checked} coordinates");
    }
}
