use serde::{Deserialize, Serialize};

use super::{PromptSet, ScoreModel};
use crate::autodiff::{Graph, NodeId};
use crate::diffusion::{perturb, NoiseSchedule};
use crate::error::{check_dim, LabError, Result};
use crate::linalg;
use crate::par::{map_range, Execution};
use crate::rng::{normal_vec, stream, LabRng, Stream};
use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// MLP over `concat(x, c / embed_scale, time features)` with SiLU hidden
/// layers. The raw output `F` gives the score `F / σ_t` with
/// `σ_t² = ᾱ_t·data_var + 1 − ᾱ_t`, the marginal variance of data with
/// per-coordinate variance `data_var`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedScoreNet {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub time_features: usize,
    #[serde(default = "one")]
    pub data_var: f64,
    #[serde(default = "one")]
    pub embed_scale: f64,
    pub layers: Vec<DenseLayer>,
}

fn one() -> f64 {
    1.0
}

impl LearnedScoreNet {
    /// Random init with weights drawn from `N(0, 1/fan_in)`, zero biases.
    pub fn new(data_dim: usize, embed_dim: usize, hidden: &[usize], time_features: usize, seed: u64) -> Self {
        let mut rng = LabRng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = data_dim + embed_dim + time_features;
        for &width in hidden.iter().chain(std::iter::once(&data_dim)) {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            layers.push(DenseLayer {
                rows: width,
                cols: fan_in,
                weights: (0..width * fan_in).map(|_| dist.sample(&mut rng)).collect(),
                bias: vec![0.0; width],
            });
            fan_in = width;
        }
        Self {
            data_dim,
            embed_dim,
            time_features,
            data_var: 1.0,
            embed_scale: 1.0,
            layers,
        }
    }

    /// Sets the output scaling variance and the embedding input divisor.
    pub fn with_scales(mut self, data_var: f64, embed_scale: f64) -> Result<Self> {
        if !(data_var > 0.0 && data_var.is_finite() && embed_scale > 0.0 && embed_scale.is_finite()) {
            return Err(LabError::InvalidArgument(format!(
                "scales must be positive and finite, got data_var={data_var}, embed_scale={embed_scale}"
            )));
        }
        self.data_var = data_var;
        self.embed_scale = embed_scale;
        Ok(self)
    }

    fn out_scale(&self, t: usize, sched: &NoiseSchedule) -> f64 {
        let ab = sched.alpha_bar(t);
        1.0 / (ab * self.data_var + 1.0 - ab).sqrt()
    }

    /// 3 × 64 SiLU with 8 time features.
    pub fn desk_default(data_dim: usize, embed_dim: usize, seed: u64) -> Self {
        Self::new(data_dim, embed_dim, &[64, 64, 64], 8, seed)
    }

    pub fn zeroed(mut self) -> Self {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        self
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| linalg::all_finite(&l.weights) && linalg::all_finite(&l.bias))
    }

    /// Sinusoidal features of `t / T`.
    pub fn time_embedding(&self, t: usize, sched: &NoiseSchedule) -> Vec<f64> {
        let tau = t as f64 / sched.steps() as f64;
        (0..self.time_features)
            .map(|i| {
                let freq = std::f64::consts::PI * (1u64 << (i / 2)) as f64 / 2.0;
                if i % 2 == 0 {
                    (freq * tau).sin()
                } else {
                    (freq * tau).cos()
                }
            })
            .collect()
    }

    /// Raw network output `F`.
    pub fn forward(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        check_dim(self.data_dim, x.len(), "learned net x")?;
        check_dim(self.embed_dim, c.len(), "learned net c")?;
        sched.check_t(t)?;
        let inv = 1.0 / self.embed_scale;
        let mut h: Vec<f64> = x
            .iter()
            .copied()
            .chain(c.iter().map(|v| v * inv))
            .chain(self.time_embedding(t, sched))
            .collect();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z: Vec<f64> = (0..l.rows)
                .map(|r| linalg::dot(&l.weights[r * l.cols..(r + 1) * l.cols], &h) + l.bias[r])
                .collect();
            if i < last {
                z.iter_mut().for_each(|v| *v *= 1.0 / (1.0 + (-*v).exp()));
            }
            h = z;
        }
        Ok(h)
    }

    fn const_params(&self, g: &mut Graph) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .map(|l| (g.constant(l.weights.clone()), g.constant(l.bias.clone())))
            .collect()
    }

    fn input_params(&self, g: &mut Graph) -> Vec<(NodeId, NodeId)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    g.input(&format!("w{i}"), l.weights.len()),
                    g.input(&format!("b{i}"), l.bias.len()),
                )
            })
            .collect()
    }

    fn output_expr(
        &self,
        g: &mut Graph,
        x: NodeId,
        c: NodeId,
        t: usize,
        sched: &NoiseSchedule,
        params: &[(NodeId, NodeId)],
    ) -> NodeId {
        let tf = g.constant(self.time_embedding(t, sched));
        let cs = g.scale(c, 1.0 / self.embed_scale);
        let mut h = g.concat(&[x, cs, tf]);
        let last = self.layers.len() - 1;
        for (i, (l, (w, b))) in self.layers.iter().zip(params).enumerate() {
            let z = g.matvec(*w, l.rows, l.cols, h);
            h = g.add(z, *b);
            if i < last {
                h = g.silu(h);
            }
        }
        h
    }

    fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    fn apply_step(&mut self, grad: &[f64], lr: f64) {
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w -= lr * grad[off];
                off += 1;
            }
        }
    }
}

impl ScoreModel for LearnedScoreNet {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn score(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let f = self.forward(x, c, t, sched)?;
        Ok(linalg::scale(&f, self.out_scale(t, sched)))
    }

    fn score_expr(&self, g: &mut Graph, x: NodeId, c: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId {
        let params = self.const_params(g);
        let f = self.output_expr(g, x, c, t, sched, &params);
        g.scale(f, self.out_scale(t, sched))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Std of Gaussian jitter added to prompt embeddings, so the network sees
    /// a neighbourhood of each embedding rather than four points.
    pub embed_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 64,
            lr: 0.05,
            seed: 0,
            embed_jitter: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: LearnedScoreNet,
    pub losses: Vec<f64>,
}

/// Denoising score matching with plain SGD. Each step draws a batch of
/// `(y, c, x₀, t, ε)`, forms `x_t` and minimises `‖ε̂ − ε‖²` with
/// `ε̂ = −√(1−ᾱ_t) s_θ`, which is `‖s_θ + ε/√(1−ᾱ_t)‖²` weighted by `1−ᾱ_t`. Per-sample gradients run in
/// parallel and are summed in index order, so results do not depend on the
/// thread count.
pub fn train_dsm(
    net: LearnedScoreNet,
    data: &PromptSet,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(LabError::InvalidArgument("batch and lr must be positive".into()));
    }
    check_dim(data.model.data_dim, net.data_dim, "training data dim")?;
    check_dim(data.model.embed_dim, net.embed_dim, "training embed dim")?;
    let mut net = net;
    let mut losses = Vec::with_capacity(cfg.steps);
    let n_params = net.num_params();
    for step in 0..cfg.steps {
        let current = &net;
        let per_sample = map_range(exec, cfg.batch, |i| {
            let mut rng = stream(cfg.seed, Stream::Training, (step * cfg.batch + i) as u64);
            sample_gradient(current, data, sched, cfg, &mut rng)
        });
        let mut grad = vec![0.0; n_params];
        let mut loss = 0.0;
        for r in per_sample {
            let (l, g) = r.map_err(|_| LabError::Diverged { step })?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(LabError::Diverged { step });
        }
        net.apply_step(&grad, cfg.lr * inv);
        if !net.is_finite() {
            return Err(LabError::Diverged { step });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { net, losses })
}

fn sample_gradient(
    net: &LearnedScoreNet,
    data: &PromptSet,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut LabRng,
) -> Result<(f64, Vec<f64>)> {
    let y = rng.random_range(0..data.len());
    let jitter = normal_vec(rng, net.embed_dim);
    let c = linalg::axpy(&data.embeddings[y], cfg.embed_jitter, &jitter);
    let x0 = data.model.sample(&c, 0, sched, rng);
    let t = rng.random_range(1..=sched.steps());
    let eps = normal_vec(rng, net.data_dim);
    let xt = perturb(&x0, t, &eps, sched)?;

    let mut g = Graph::new();
    let xn = g.input("x", net.data_dim);
    let cn = g.input("c", net.embed_dim);
    let target = g.input("eps", net.data_dim);
    let params = net.input_params(&mut g);
    let f = net.output_expr(&mut g, xn, cn, t, sched, &params);
    let pred = g.scale(f, -(1.0 - sched.alpha_bar(t)).sqrt() * net.out_scale(t, sched));
    let diff = g.sub(pred, target);
    let loss = g.dot(diff, diff);
    g.set_output(loss);

    let mut bindings: Vec<(String, Vec<f64>)> = vec![
        ("x".into(), xt),
        ("c".into(), c),
        ("eps".into(), eps),
    ];
    for (i, l) in net.layers.iter().enumerate() {
        bindings.push((format!("w{i}"), l.weights.clone()));
        bindings.push((format!("b{i}"), l.bias.clone()));
    }
    let refs: Vec<(&str, &[f64])> = bindings.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    let value = g.evaluate(&refs)?[0];
    let mut adj = g.backward()?;
    let mut grad = Vec::with_capacity(net.num_params());
    for i in 0..net.layers.len() {
        grad.extend(adj.take(&format!("w{i}")).expect("weight input"));
        grad.extend(adj.take(&format!("b{i}")).expect("bias input"));
    }
    debug_assert_eq!(grad.len(), net.flat_params().len());
    Ok((value, grad))
}
