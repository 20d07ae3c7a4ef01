use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ScoreModel;
use crate::autodiff::{gauss_log_density, Graph, NodeId};
use crate::diffusion::NoiseSchedule;
use crate::error::{check_dim, LabError, Result};
use crate::linalg::{self, Mat};
use crate::rng::{normal_vec, LabRng};
use rand::Rng;

/// One component: mean `M c + b`, diagonal covariance `S`, weight logit `a·c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean_map: Mat,
    pub offset: Vec<f64>,
    pub var: Vec<f64>,
    pub logit: Vec<f64>,
}

/// `p(x₀ | c) = Σ_k softmax_k(a_k·c) N(M_k c + b_k, S_k)`; the forward process
/// keeps it a mixture, so scores and likelihoods are exact at every `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMixtureModel {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub components: Vec<MixtureComponent>,
}

/// Per-component quantities at a given `(c, t)`.
struct Perturbed {
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
}

impl AnalyticMixtureModel {
    pub fn new(data_dim: usize, embed_dim: usize, components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(LabError::InvalidArgument("mixture needs at least one component".into()));
        }
        for comp in &components {
            check_dim(data_dim, comp.mean_map.rows, "mean map rows")?;
            check_dim(embed_dim, comp.mean_map.cols, "mean map cols")?;
            check_dim(data_dim, comp.offset.len(), "mean offset")?;
            check_dim(data_dim, comp.var.len(), "component variance")?;
            check_dim(embed_dim, comp.logit.len(), "weight logit")?;
            if comp.var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(LabError::Degenerate("component variance must be positive".into()));
            }
        }
        Ok(Self {
            data_dim,
            embed_dim,
            components,
        })
    }

    /// Single Gaussian `N(M c + b, diag(var))` with constant weight.
    pub fn single_gaussian(mean_map: Mat, offset: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let (d, e) = (mean_map.rows, mean_map.cols);
        Self::new(
            d,
            e,
            vec![MixtureComponent {
                mean_map,
                offset,
                var,
                logit: vec![0.0; e],
            }],
        )
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    fn logit_matrix(&self) -> Mat {
        Mat::from_rows(&self.components.iter().map(|k| k.logit.clone()).collect::<Vec<_>>())
    }

    pub fn weights(&self, c: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self.components.iter().map(|k| linalg::dot(&k.logit, c)).collect();
        linalg::softmax(&logits)
    }

    pub fn component_mean(&self, k: usize, c: &[f64]) -> Vec<f64> {
        let comp = &self.components[k];
        linalg::add(&comp.mean_map.matvec(c), &comp.offset)
    }

    fn perturbed(&self, c: &[f64], t: usize, sched: &NoiseSchedule) -> Perturbed {
        let ab = sched.alpha_bar(t);
        let sa = ab.sqrt();
        let logits: Vec<f64> = self.components.iter().map(|k| linalg::dot(&k.logit, c)).collect();
        let lse = linalg::log_sum_exp(&logits);
        Perturbed {
            means: (0..self.num_components())
                .map(|k| linalg::scale(&self.component_mean(k, c), sa))
                .collect(),
            vars: self
                .components
                .iter()
                .map(|k| k.var.iter().map(|s| ab * s + 1.0 - ab).collect())
                .collect(),
            log_weights: logits.into_iter().map(|l| l - lse).collect(),
        }
    }

    fn check_inputs(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<()> {
        check_dim(self.data_dim, x.len(), "analytic model x")?;
        check_dim(self.embed_dim, c.len(), "analytic model c")?;
        if t > sched.steps() {
            return Err(LabError::TimestepOutOfRange { t, max: sched.steps() });
        }
        Ok(())
    }

    /// Log-joint per component and the responsibilities.
    fn responsibilities(&self, x: &[f64], p: &Perturbed) -> (Vec<f64>, Vec<f64>) {
        let joint: Vec<f64> = (0..self.num_components())
            .map(|k| p.log_weights[k] + gauss_log_density(x, &p.means[k], &p.vars[k]))
            .collect();
        let r = linalg::softmax(&joint);
        (joint, r)
    }

    /// Exact `log q_t(x | c)`; `t = 0` gives the data density.
    pub fn log_likelihood(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<f64> {
        self.check_inputs(x, c, t, sched)?;
        let p = self.perturbed(c, t, sched);
        let (joint, _) = self.responsibilities(x, &p);
        Ok(linalg::log_sum_exp(&joint))
    }

    /// Exact `∇_x log q_t(x | c)`.
    pub fn analytic_score(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_inputs(x, c, t, sched)?;
        let p = self.perturbed(c, t, sched);
        let (_, r) = self.responsibilities(x, &p);
        let mut s = vec![0.0; self.data_dim];
        for k in 0..self.num_components() {
            for i in 0..self.data_dim {
                s[i] += r[k] * (p.means[k][i] - x[i]) / p.vars[k][i];
            }
        }
        Ok(s)
    }

    /// Exact `∇_c log q_t(x | c)`.
    pub fn grad_c_log_likelihood(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_inputs(x, c, t, sched)?;
        let sa = sched.alpha_bar(t).sqrt();
        let p = self.perturbed(c, t, sched);
        let (_, r) = self.responsibilities(x, &p);
        let w = self.weights(c);
        let mut g = vec![0.0; self.embed_dim];
        for (k, comp) in self.components.iter().enumerate() {
            let z: Vec<f64> = (0..self.data_dim)
                .map(|i| (x[i] - p.means[k][i]) / p.vars[k][i])
                .collect();
            let mz = comp.mean_map.matvec_t(&z);
            for j in 0..self.embed_dim {
                g[j] += r[k] * (comp.logit[j] + sa * mz[j]) - w[k] * comp.logit[j];
            }
        }
        Ok(g)
    }

    /// `E[x₀ | x_t, c]` from per-component Gaussian posteriors weighted by
    /// responsibilities; independent of the score-based Tweedie route.
    pub fn posterior_mean(&self, x_t: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_inputs(x_t, c, t, sched)?;
        let ab = sched.alpha_bar(t);
        let sa = ab.sqrt();
        let p = self.perturbed(c, t, sched);
        let (_, r) = self.responsibilities(x_t, &p);
        let mut m = vec![0.0; self.data_dim];
        for (k, comp) in self.components.iter().enumerate() {
            let mk = self.component_mean(k, c);
            for i in 0..self.data_dim {
                let gain = sa * comp.var[i] / p.vars[k][i];
                m[i] += r[k] * (mk[i] + gain * (x_t[i] - p.means[k][i]));
            }
        }
        Ok(m)
    }

    /// Mean and covariance of `p(x₀ | c)`.
    pub fn moments(&self, c: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.data_dim;
        let w = self.weights(c);
        let means: Vec<Vec<f64>> = (0..self.num_components()).map(|k| self.component_mean(k, c)).collect();
        let mut mu = vec![0.0; d];
        for (wk, mk) in w.iter().zip(&means) {
            for i in 0..d {
                mu[i] += wk * mk[i];
            }
        }
        let mut cov = vec![vec![0.0; d]; d];
        for (k, comp) in self.components.iter().enumerate() {
            for i in 0..d {
                cov[i][i] += w[k] * comp.var[i];
                for j in 0..d {
                    cov[i][j] += w[k] * (means[k][i] - mu[i]) * (means[k][j] - mu[j]);
                }
            }
        }
        (mu, cov)
    }

    /// Draw from `q_t(x | c)`; `t = 0` samples clean data.
    pub fn sample(&self, c: &[f64], t: usize, sched: &NoiseSchedule, rng: &mut LabRng) -> Vec<f64> {
        let p = self.perturbed(c, t, sched);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.num_components() - 1;
        for (i, lw) in p.log_weights.iter().enumerate() {
            acc += lw.exp();
            if u < acc {
                k = i;
                break;
            }
        }
        let z = normal_vec(rng, self.data_dim);
        (0..self.data_dim)
            .map(|i| p.means[k][i] + p.vars[k][i].sqrt() * z[i])
            .collect()
    }

    fn mean_exprs(&self, g: &mut Graph, c: NodeId, t: usize, sched: &NoiseSchedule) -> Vec<NodeId> {
        let sa = sched.alpha_bar(t).sqrt();
        self.components
            .iter()
            .map(|comp| {
                let w = Arc::new(comp.mean_map.scaled(sa));
                g.affine(w, Some(linalg::scale(&comp.offset, sa)), c)
            })
            .collect()
    }

    fn perturbed_vars(&self, t: usize, sched: &NoiseSchedule) -> Vec<Vec<f64>> {
        let ab = sched.alpha_bar(t);
        self.components
            .iter()
            .map(|k| k.var.iter().map(|s| ab * s + 1.0 - ab).collect())
            .collect()
    }

    /// Returns (unnormalised log-joint vector, logits, per-component means).
    fn joint_expr(&self, g: &mut Graph, x: NodeId, c: NodeId, t: usize, sched: &NoiseSchedule) -> (NodeId, NodeId, Vec<NodeId>) {
        let logits = g.affine(Arc::new(self.logit_matrix()), None, c);
        let means = self.mean_exprs(g, c, t, sched);
        let vars = self.perturbed_vars(t, sched);
        let lls: Vec<NodeId> = means
            .iter()
            .zip(vars)
            .map(|(m, v)| g.gauss_log_density(x, *m, v))
            .collect();
        let ll = g.concat(&lls);
        let joint = g.add(logits, ll);
        (joint, logits, means)
    }

    pub fn log_likelihood_expr(&self, g: &mut Graph, x: NodeId, c: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId {
        let (joint, logits, _) = self.joint_expr(g, x, c, t, sched);
        let num = g.log_sum_exp(joint);
        let den = g.log_sum_exp(logits);
        g.sub(num, den)
    }

    /// Closed-form `∇_c log q_t(x|c)` recorded as an expression in `(x, c)`.
    pub fn grad_c_log_likelihood_expr(&self, g: &mut Graph, x: NodeId, c: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId {
        let sa = sched.alpha_bar(t).sqrt();
        let (joint, logits, means) = self.joint_expr(g, x, c, t, sched);
        let r = g.softmax(joint);
        let w = g.softmax(logits);
        let vars = self.perturbed_vars(t, sched);
        let mut total = g.affine(Arc::new(self.logit_matrix().transpose()), None, w);
        total = g.scale(total, -1.0);
        for (k, comp) in self.components.iter().enumerate() {
            let rk = g.index(r, k);
            let diff = g.sub(x, means[k]);
            let z = g.mul_const(diff, vars[k].iter().map(|v| 1.0 / v).collect());
            let back = g.affine(Arc::new(comp.mean_map.transpose().scaled(sa)), Some(comp.logit.clone()), z);
            let term = g.scalar_mul(rk, back);
            total = g.add(total, term);
        }
        total
    }
}

impl ScoreModel for AnalyticMixtureModel {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn score(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.analytic_score(x, c, t, sched)
    }

    fn score_expr(&self, g: &mut Graph, x: NodeId, c: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId {
        let (joint, _, means) = self.joint_expr(g, x, c, t, sched);
        let r = g.softmax(joint);
        let vars = self.perturbed_vars(t, sched);
        let mut total: Option<NodeId> = None;
        for (k, m) in means.iter().enumerate() {
            let rk = g.index(r, k);
            let diff = g.sub(*m, x);
            let z = g.mul_const(diff, vars[k].iter().map(|v| 1.0 / v).collect());
            let term = g.scalar_mul(rk, z);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        total.expect("at least one component")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::rng::{stream, Stream};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(10, ScheduleKind::Linear, 0.01, 0.3).unwrap()
    }

    fn two_component() -> AnalyticMixtureModel {
        AnalyticMixtureModel::new(
            2,
            3,
            vec![
                MixtureComponent {
                    mean_map: Mat::from_rows(&[vec![1.0, 0.2, 0.0], vec![0.0, 0.5, -0.3]]),
                    offset: vec![0.5, 0.0],
                    var: vec![0.3, 0.2],
                    logit: vec![0.4, -0.2, 0.9],
                },
                MixtureComponent {
                    mean_map: Mat::from_rows(&[vec![-0.6, 0.0, 0.3], vec![0.4, 0.1, 0.0]]),
                    offset: vec![-1.0, 0.7],
                    var: vec![0.15, 0.4],
                    logit: vec![-0.3, 0.6, 0.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_gaussian_score_at_clean_data() {
        let m = AnalyticMixtureModel::single_gaussian(
            Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]),
            vec![0.5, 0.5],
            vec![1.0, 1.0],
        )
        .unwrap();
        let (x, c) = ([0.3, -0.4], [1.0, 0.5]);
        let mean = m.component_mean(0, &c);
        let s = m.analytic_score(&x, &c, 0, &sched()).unwrap();
        for i in 0..2 {
            assert!((s[i] + (x[i] - mean[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_mixture_has_zero_score_at_center() {
        let comp = |off: f64| MixtureComponent {
            mean_map: Mat::zeros(2, 1),
            offset: vec![off, 0.0],
            var: vec![0.5, 0.5],
            logit: vec![0.0],
        };
        let m = AnalyticMixtureModel::new(2, 1, vec![comp(1.5), comp(-1.5)]).unwrap();
        let s = m.analytic_score(&[0.0, 0.0], &[0.3], 4, &sched()).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gaussian_peak_log_likelihood() {
        let var = 0.7;
        let m = AnalyticMixtureModel::single_gaussian(Mat::zeros(3, 1), vec![0.0; 3], vec![var; 3]).unwrap();
        let ll = m.log_likelihood(&[0.0; 3], &[1.0], 0, &sched()).unwrap();
        let want = -1.5 * (2.0 * std::f64::consts::PI * var).ln();
        assert!((ll - want).abs() < 1e-13);
    }

    #[test]
    fn weights_are_shift_invariant_and_normalised() {
        let m = two_component();
        let c = [0.2, -1.0, 0.4];
        let w = m.weights(&c);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mut shifted = m.clone();
        for comp in &mut shifted.components {
            for (a, d) in comp.logit.iter_mut().zip([0.7, -2.0, 1.3]) {
                *a += d;
            }
        }
        let ws = shifted.weights(&c);
        for (a, b) in w.iter().zip(ws) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn score_equals_autodiff_of_log_likelihood() {
        let m = two_component();
        let s = sched();
        let mut rng = stream(11, Stream::Verification, 0);
        for t in [0usize, 1, 5, 10] {
            for _ in 0..20 {
                let x = normal_vec(&mut rng, 2);
                let c = normal_vec(&mut rng, 3);
                let mut g = Graph::new();
                let xn = g.input("x", 2);
                let cn = g.input("c", 3);
                let ll = m.log_likelihood_expr(&mut g, xn, cn, t, &s);
                g.set_output(ll);
                let v = g.evaluate(&[("x", &x), ("c", &c)]).unwrap()[0];
                assert!((v - m.log_likelihood(&x, &c, t, &s).unwrap()).abs() < 1e-12);
                let adj = g.backward().unwrap();
                let exact = m.analytic_score(&x, &c, t, &s).unwrap();
                for (a, b) in adj.wrt("x").unwrap().iter().zip(&exact) {
                    assert!((a - b).abs() < 1e-9);
                }
                let exact_c = m.grad_c_log_likelihood(&x, &c, t, &s).unwrap();
                for (a, b) in adj.wrt("c").unwrap().iter().zip(&exact_c) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn score_expression_matches_numeric_score() {
        let m = two_component();
        let s = sched();
        let mut rng = stream(12, Stream::Verification, 0);
        for _ in 0..20 {
            let x = normal_vec(&mut rng, 2);
            let c = normal_vec(&mut rng, 3);
            let mut g = Graph::new();
            let xn = g.input("x", 2);
            let cn = g.input("c", 3);
            let out = m.score_expr(&mut g, xn, cn, 3, &s);
            g.set_output(out);
            let v = g.evaluate(&[("x", &x), ("c", &c)]).unwrap();
            let want = m.analytic_score(&x, &c, 3, &s).unwrap();
            for (a, b) in v.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
            let mut g = Graph::new();
            let xn = g.input("x", 2);
            let cn = g.input("c", 3);
            let out = m.grad_c_log_likelihood_expr(&mut g, xn, cn, 3, &s);
            g.set_output(out);
            let v = g.evaluate(&[("x", &x), ("c", &c)]).unwrap();
            let want = m.grad_c_log_likelihood(&x, &c, 3, &s).unwrap();
            for (a, b) in v.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn density_integrates_to_one_on_a_grid() {
        let m = AnalyticMixtureModel::new(
            2,
            1,
            vec![
                MixtureComponent {
                    mean_map: Mat::from_rows(&[vec![0.5], vec![0.0]]),
                    offset: vec![0.3, -0.2],
                    var: vec![0.05, 0.08],
                    logit: vec![1.0],
                },
                MixtureComponent {
                    mean_map: Mat::from_rows(&[vec![0.0], vec![-0.4]]),
                    offset: vec![-0.4, 0.3],
                    var: vec![0.06, 0.04],
                    logit: vec![-0.5],
                },
            ],
        )
        .unwrap();
        let s = sched();
        let (lo, hi, n) = (-3.0, 3.0, 600);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += m.log_likelihood(&x, &[0.8], 0, &s).unwrap().exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 0.01, "integral {total}");
    }

    #[test]
    fn rejects_bad_components() {
        let bad = MixtureComponent {
            mean_map: Mat::zeros(2, 1),
            offset: vec![0.0, 0.0],
            var: vec![0.0, 1.0],
            logit: vec![0.0],
        };
        assert!(AnalyticMixtureModel::new(2, 1, vec![bad]).is_err());
        assert!(AnalyticMixtureModel::new(2, 1, vec![]).is_err());
    }
}
