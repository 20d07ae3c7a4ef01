use std::sync::Arc;

use super::{AnalyticMixtureModel, ScoreModel};
use crate::autodiff::{Graph, NodeId};
use crate::diffusion::NoiseSchedule;
use crate::error::{check_dim, LabError, Result};
use crate::linalg;

/// Discrete prompts: an embedding table over one analytic model plus prior
/// probabilities. Supplies the Bayes classifier `p(y | x_t)` and the
/// prior-weighted unconditional model used by guidance.
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub model: Arc<AnalyticMixtureModel>,
    pub embeddings: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
}

impl PromptSet {
    pub fn new(model: Arc<AnalyticMixtureModel>, embeddings: Vec<Vec<f64>>, priors: Vec<f64>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(LabError::InvalidArgument("empty prompt set".into()));
        }
        check_dim(embeddings.len(), priors.len(), "prompt priors")?;
        for e in &embeddings {
            check_dim(model.embed_dim, e.len(), "prompt embedding")?;
        }
        let total: f64 = priors.iter().sum();
        if priors.iter().any(|p| !(*p > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(LabError::InvalidArgument(format!(
                "priors must be positive and sum to 1 (sum {total})"
            )));
        }
        Ok(Self {
            model,
            embeddings,
            priors,
        })
    }

    pub fn uniform(model: Arc<AnalyticMixtureModel>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        let n = embeddings.len().max(1);
        Self::new(model, embeddings, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn embedding(&self, y: usize) -> Result<&[f64]> {
        self.embeddings
            .get(y)
            .map(|v| v.as_slice())
            .ok_or_else(|| LabError::InvalidArgument(format!("prompt {y} out of range")))
    }

    fn log_joint(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.embeddings
            .iter()
            .zip(&self.priors)
            .map(|(c, p)| Ok(self.model.log_likelihood(x, c, t, sched)? + p.ln()))
            .collect()
    }

    /// `log p(y | x_t)` for every prompt by Bayes' rule.
    pub fn classifier_log_prob(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let joint = self.log_joint(x, t, sched)?;
        let z = linalg::log_sum_exp(&joint);
        Ok(joint.into_iter().map(|j| j - z).collect())
    }

    /// `log Σ_y p(y) q_t(x | c_y)`
    pub fn unconditional_log_likelihood(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<f64> {
        Ok(linalg::log_sum_exp(&self.log_joint(x, t, sched)?))
    }

    pub fn unconditional_score(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let post = linalg::softmax(&self.log_joint(x, t, sched)?);
        let mut s = vec![0.0; x.len()];
        for (c, p) in self.embeddings.iter().zip(post) {
            let sy = self.model.analytic_score(x, c, t, sched)?;
            for (a, b) in s.iter_mut().zip(sy) {
                *a += p * b;
            }
        }
        Ok(s)
    }

    fn log_joint_expr(&self, g: &mut Graph, x: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId {
        let parts: Vec<NodeId> = self
            .embeddings
            .iter()
            .map(|c| {
                let cn = g.constant(c.clone());
                self.model.log_likelihood_expr(g, x, cn, t, sched)
            })
            .collect();
        let ll = g.concat(&parts);
        let lp = g.constant(self.priors.iter().map(|p| p.ln()).collect());
        g.add(ll, lp)
    }

    /// `log p(y | x_t)` as a graph expression in `x`.
    pub fn classifier_log_prob_expr(&self, g: &mut Graph, x: NodeId, y: usize, t: usize, sched: &NoiseSchedule) -> NodeId {
        let joint = self.log_joint_expr(g, x, t, sched);
        let jy = g.index(joint, y);
        let z = g.log_sum_exp(joint);
        g.sub(jy, z)
    }

    /// `∇_x log p(y | x_t)` by reverse-mode differentiation of the Bayes
    /// classifier.
    pub fn classifier_grad(&self, x: &[f64], y: usize, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.embedding(y)?;
        let mut g = Graph::new();
        let xn = g.input("x", x.len());
        let out = self.classifier_log_prob_expr(&mut g, xn, y, t, sched);
        g.set_output(out);
        g.evaluate(&[("x", x)])?;
        g.gradient("x")
    }

    /// Moments of `p(x₀ | c_y)`.
    pub fn conditional_moments(&self, y: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        Ok(self.model.moments(self.embedding(y)?))
    }
}

/// `p(x | ∅) = Σ_y p(y) p(x | c_y)`; ignores the embedding argument.
#[derive(Clone, Debug)]
pub struct UnconditionalModel {
    pub prompts: PromptSet,
}

impl ScoreModel for UnconditionalModel {
    fn data_dim(&self) -> usize {
        self.prompts.model.data_dim
    }

    fn embed_dim(&self) -> usize {
        self.prompts.model.embed_dim
    }

    fn score(&self, x: &[f64], _c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.prompts.unconditional_score(x, t, sched)
    }

    fn score_expr(&self, g: &mut Graph, x: NodeId, _c: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId {
        let joint = self.prompts.log_joint_expr(g, x, t, sched);
        let post = g.softmax(joint);
        let mut total: Option<NodeId> = None;
        for (y, c) in self.prompts.embeddings.iter().enumerate() {
            let cn = g.constant(c.clone());
            let sy = self.prompts.model.score_expr(g, x, cn, t, sched);
            let py = g.index(post, y);
            let term = g.scalar_mul(py, sy);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        total.expect("nonempty prompt set")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::linalg::Mat;
    use crate::models::MixtureComponent;
    use crate::rng::{normal_vec, stream, Stream};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(20, ScheduleKind::Linear, 0.01, 0.2).unwrap()
    }

    fn model() -> Arc<AnalyticMixtureModel> {
        Arc::new(
            AnalyticMixtureModel::new(
                2,
                2,
                vec![
                    MixtureComponent {
                        mean_map: Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
                        offset: vec![0.0, 0.0],
                        var: vec![0.2, 0.3],
                        logit: vec![0.5, -0.5],
                    },
                    MixtureComponent {
                        mean_map: Mat::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]),
                        offset: vec![0.2, 0.0],
                        var: vec![0.25, 0.1],
                        logit: vec![-0.5, 0.5],
                    },
                ],
            )
            .unwrap(),
        )
    }

    #[test]
    fn single_prompt_log_prob_is_zero() {
        let p = PromptSet::uniform(model(), vec![vec![1.0, 0.0]]).unwrap();
        let lp = p.classifier_log_prob(&[0.3, 0.2], 5, &sched()).unwrap();
        assert!(lp[0].abs() < 1e-15);
    }

    #[test]
    fn identical_prompts_split_evenly() {
        let p = PromptSet::uniform(model(), vec![vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let lp = p.classifier_log_prob(&[0.3, 0.2], 5, &sched()).unwrap();
        for v in lp {
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn bayes_identity_for_scores() {
        let p = PromptSet::new(
            model(),
            vec![vec![1.5, 0.0], vec![0.0, 1.5], vec![-1.0, -1.0]],
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        let s = sched();
        let mut rng = stream(3, Stream::Verification, 0);
        for _ in 0..50 {
            let x = normal_vec(&mut rng, 2);
            for t in [1, 7, 20] {
                let su = p.unconditional_score(&x, t, &s).unwrap();
                for y in 0..3 {
                    let grad = p.classifier_grad(&x, y, t, &s).unwrap();
                    let sy = p.model.analytic_score(&x, &p.embeddings[y], t, &s).unwrap();
                    for i in 0..2 {
                        assert!((su[i] + grad[i] - sy[i]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn unconditional_expression_matches_numeric() {
        let p = PromptSet::uniform(model(), vec![vec![1.5, 0.0], vec![0.0, 1.5]]).unwrap();
        let u = UnconditionalModel { prompts: p };
        let s = sched();
        let x = [0.4, -0.9];
        let mut g = Graph::new();
        let xn = g.input("x", 2);
        let cn = g.input("c", 2);
        let out = u.score_expr(&mut g, xn, cn, 4, &s);
        g.set_output(out);
        let v = g.evaluate(&[("x", &x), ("c", &[9.0, 9.0])]).unwrap();
        let want = u.score(&x, &[0.0, 0.0], 4, &s).unwrap();
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_prompt_sets() {
        assert!(PromptSet::uniform(model(), vec![]).is_err());
        assert!(PromptSet::new(model(), vec![vec![0.0, 0.0]], vec![0.5]).is_err());
    }
}
