//! Priors over grasp configurations: an EM-fit Gaussian mixture, the
//! mixture emitted per object by the MDN, and the bounded uniform prior.
//! Each exposes log-density, its exact gradient, and sampling.

use crate::geom::Vec3;
use crate::grasp::{BoundBox, GraspConfig, GraspType, CONFIG_DIM};
use rand::Rng;
use tensornet::gaussian;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VAR_FLOOR: f64 = 1e-4;
pub const MIXTURE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("need at least {need} configurations to fit {k} components, got {got}")]
    InsufficientData { need: usize, got: usize, k: usize },
    #[error("no mixture component tagged `{0}`")]
    UnknownTag(GraspType),
    #[error("mixture parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, PriorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentTag {
    Side,
    Overhead,
    Unlabeled,
}

impl From<GraspType> for ComponentTag {
    fn from(t: GraspType) -> Self {
        match t {
            GraspType::Side => ComponentTag::Side,
            GraspType::Overhead => ComponentTag::Overhead,
        }
    }
}

/// K-component Gaussian mixture with diagonal covariances over the 14-D
/// grasp configuration, plus the box samples are clamped into.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixturePrior {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; CONFIG_DIM]>,
    pub variances: Vec<[f64; CONFIG_DIM]>,
    pub tags: Vec<ComponentTag>,
    pub bound_box: BoundBox,
    pub format_version: u32,
}

impl MixturePrior {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Structural invariants: simplex weights, floored variances, finite means.
    pub fn check(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.means.len() != k || self.variances.len() != k || self.tags.len() != k {
            return Err(PriorError::Parse("inconsistent component counts".into()));
        }
        let wsum: f64 = self.weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(PriorError::Parse(format!("weights sum to {wsum}")));
        }
        for v in &self.variances {
            if v.iter().any(|x| *x < VAR_FLOOR * (1.0 - 1e-12)) {
                return Err(PriorError::Parse("variance below floor".into()));
            }
        }
        for m in &self.means {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(PriorError::Parse("non-finite mean".into()));
            }
        }
        Ok(())
    }

    /// Stable log-density at `theta` via log-sum-exp over components.
    pub fn log_density(&self, theta: &[f64; CONFIG_DIM]) -> f64 {
        let logs = self.component_log_terms(theta);
        log_sum_exp(&logs)
    }

    /// Exact gradient of [`Self::log_density`]: responsibility-weighted
    /// Mahalanobis pullback per component.
    pub fn log_density_grad(&self, theta: &[f64; CONFIG_DIM]) -> [f64; CONFIG_DIM] {
        let logs = self.component_log_terms(theta);
        let total = log_sum_exp(&logs);
        let mut grad = [0.0; CONFIG_DIM];
        for k in 0..self.k() {
            let resp = (logs[k] - total).exp();
            for d in 0..CONFIG_DIM {
                grad[d] += resp * (self.means[k][d] - theta[d]) / self.variances[k][d];
            }
        }
        grad
    }

    fn component_log_terms(&self, theta: &[f64; CONFIG_DIM]) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let mut log_pdf = 0.0;
                for d in 0..CONFIG_DIM {
                    let var = self.variances[k][d];
                    let diff = theta[d] - self.means[k][d];
                    log_pdf += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                }
                self.weights[k].max(1e-300).ln() + log_pdf
            })
            .collect()
    }

    /// Draw one configuration: categorical over weights (optionally
    /// restricted to a tagged component), then a diagonal Gaussian draw,
    /// clamped into the bound box.
    pub fn sample<R: Rng>(&self, rng: &mut R, component: Option<GraspType>) -> Result<GraspConfig> {
        let k = match component {
            None => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = self.k() - 1;
                for (i, w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
            Some(t) => {
                let want: ComponentTag = t.into();
                let candidates: Vec<usize> = (0..self.k()).filter(|&i| self.tags[i] == want).collect();
                if candidates.is_empty() {
                    return Err(PriorError::UnknownTag(t));
                }
                // categorical restricted to the tagged components
                let total: f64 = candidates.iter().map(|&i| self.weights[i]).sum();
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = *candidates.last().unwrap();
                for &i in &candidates {
                    acc += self.weights[i];
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        };
        let mut v = [0.0; CONFIG_DIM];
        for d in 0..CONFIG_DIM {
            v[d] = self.means[k][d] + self.variances[k][d].sqrt() * gaussian(rng);
        }
        self.bound_box.clamp(&mut v);
        Ok(GraspConfig::from_vec(&v))
    }

    /// Tag each component side/overhead by where its mean approach axis
    /// points: downward within 45 degrees of object -z means overhead.
    pub fn tag_components(mut self) -> MixturePrior {
        for k in 0..self.k() {
            let mean = GraspConfig::from_vec(&self.means[k]);
            let approach = mean.approach_axis();
            let down = approach.dot(&-Vec3::z());
            self.tags[k] = if down >= std::f64::consts::FRAC_PI_4.cos() {
                ComponentTag::Overhead
            } else {
                ComponentTag::Side
            };
        }
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let prior: MixturePrior =
            serde_json::from_str(s).map_err(|e| PriorError::Parse(e.to_string()))?;
        if prior.format_version != MIXTURE_FORMAT_VERSION {
            return Err(PriorError::Parse(format!(
                "unsupported mixture format version {}",
                prior.format_version
            )));
        }
        prior.check()?;
        Ok(prior)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Bounded uniform prior: log-density 0 (un-normalized) with zero gradient;
/// the box itself is enforced by the optimizer, not the density.
#[derive(Clone, Debug)]
pub struct UniformPrior {
    pub bound_box: BoundBox,
}

impl UniformPrior {
    pub fn log_density(&self, _theta: &[f64; CONFIG_DIM]) -> f64 {
        0.0
    }

    pub fn log_density_grad(&self, _theta: &[f64; CONFIG_DIM]) -> [f64; CONFIG_DIM] {
        [0.0; CONFIG_DIM]
    }
}

/// Fit a diagonal-covariance GMM by EM with k-means++ initialization.
///
/// Iterates to a log-likelihood gain below 1e-6 or 500 iterations. The
/// per-iteration log-likelihood is asserted non-decreasing (up to float
/// noise). Components whose variance collapses are floored at `VAR_FLOOR`;
/// components whose weight collapses are re-seeded on a data point.
pub fn fit_gmm(
    configs: &[GraspConfig],
    k: usize,
    seed: u64,
    bound_box: BoundBox,
) -> Result<MixturePrior> {
    let n = configs.len();
    if k == 0 || n < k * 15 {
        return Err(PriorError::InsufficientData {
            need: k.max(1) * 15,
            got: n,
            k,
        });
    }
    let data: Vec<[f64; CONFIG_DIM]> = configs.iter().map(|c| c.to_vec()).collect();
    let mut rng = crate::rng::derive_rng(seed, "gmm-em");

    let mut means = kmeans_pp_init(&data, k, &mut rng);
    let global_var = dimension_variances(&data);
    let mut variances = vec![global_var; k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = vec![vec![0.0; k]; n];
    for _iter in 0..500 {
        // E step
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            let logs: Vec<f64> = (0..k)
                .map(|c| {
                    let mut lp = weights[c].max(1e-300).ln();
                    for d in 0..CONFIG_DIM {
                        let var = variances[c][d];
                        let diff = x[d] - means[c][d];
                        lp += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
                    }
                    lp
                })
                .collect();
            let total = log_sum_exp(&logs);
            ll += total;
            for c in 0..k {
                resp[i][c] = (logs[c] - total).exp();
            }
        }
        assert!(
            ll >= prev_ll - 1e-9 * prev_ll.abs().max(1.0),
            "EM log-likelihood decreased: {prev_ll} -> {ll}"
        );
        let gain = ll - prev_ll;
        prev_ll = ll;
        if gain.abs() < 1e-6 && _iter > 0 {
            break;
        }

        // M step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i][c]).sum();
            if nk < 1e-9 {
                // collapsed component: re-seed on a random data point
                let pick = rng.random_range(0..n);
                means[c] = data[pick];
                variances[c] = global_var;
                weights[c] = 1.0 / n as f64;
                log::warn!("re-seeded collapsed mixture component {c}");
                continue;
            }
            weights[c] = nk / n as f64;
            let mut mean = [0.0; CONFIG_DIM];
            for (i, x) in data.iter().enumerate() {
                for d in 0..CONFIG_DIM {
                    mean[d] += resp[i][c] * x[d];
                }
            }
            for m in mean.iter_mut() {
                *m /= nk;
            }
            means[c] = mean;
            let mut var = [0.0; CONFIG_DIM];
            for (i, x) in data.iter().enumerate() {
                for d in 0..CONFIG_DIM {
                    let diff = x[d] - mean[d];
                    var[d] += resp[i][c] * diff * diff;
                }
            }
            for v in var.iter_mut() {
                *v = (*v / nk).max(VAR_FLOOR);
            }
            variances[c] = var;
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
    }

    let prior = MixturePrior {
        weights,
        means,
        variances,
        tags: vec![ComponentTag::Unlabeled; k],
        bound_box,
        format_version: MIXTURE_FORMAT_VERSION,
    };
    prior.check()?;
    Ok(prior)
}

fn dimension_variances(data: &[[f64; CONFIG_DIM]]) -> [f64; CONFIG_DIM] {
    let n = data.len() as f64;
    let mut mean = [0.0; CONFIG_DIM];
    for x in data {
        for d in 0..CONFIG_DIM {
            mean[d] += x[d];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; CONFIG_DIM];
    for x in data {
        for d in 0..CONFIG_DIM {
            let diff = x[d] - mean[d];
            var[d] += diff * diff;
        }
    }
    for v in var.iter_mut() {
        *v = (*v / n).max(VAR_FLOOR);
    }
    var
}

fn kmeans_pp_init<R: Rng>(data: &[[f64; CONFIG_DIM]], k: usize, rng: &mut R) -> Vec<[f64; CONFIG_DIM]> {
    let n = data.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(data[rng.random_range(0..n)]);
    let mut dist2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let latest = centers.last().unwrap();
        let mut total = 0.0;
        for (i, x) in data.iter().enumerate() {
            let d2: f64 = (0..CONFIG_DIM).map(|d| (x[d] - latest[d]).powi(2)).sum();
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
            total += dist2[i];
        }
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &d2) in dist2.iter().enumerate() {
                acc += d2;
                if target < acc {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centers.push(data[pick]);
    }
    centers
}

/// Raw MDN head output layout and the mixture math shared between training
/// and inference: `[k logits][k * 14 means][k * 14 raw scales]` per sample,
/// with weights from softmax and variances from `softplus(raw) + VAR_FLOOR`.
#[derive(Clone, Copy, Debug)]
pub struct MdnHeadSpec {
    pub k: usize,
}

impl MdnHeadSpec {
    pub fn output_dim(&self) -> usize {
        self.k * (1 + 2 * CONFIG_DIM)
    }

    pub fn unpack(&self, raw: &[f64], bound_box: BoundBox) -> MixturePrior {
        let k = self.k;
        assert_eq!(raw.len(), self.output_dim());
        let logits = &raw[..k];
        let weights = softmax(logits);
        let mut means = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        for c in 0..k {
            let mut mean = [0.0; CONFIG_DIM];
            mean.copy_from_slice(&raw[k + c * CONFIG_DIM..k + (c + 1) * CONFIG_DIM]);
            means.push(mean);
            let mut var = [0.0; CONFIG_DIM];
            let base = k + k * CONFIG_DIM + c * CONFIG_DIM;
            for d in 0..CONFIG_DIM {
                var[d] = softplus(raw[base + d]) + VAR_FLOOR;
            }
            variances.push(var);
        }
        MixturePrior {
            weights,
            means,
            variances,
            tags: vec![ComponentTag::Unlabeled; k],
            bound_box,
            format_version: MIXTURE_FORMAT_VERSION,
        }
    }

    /// Negative log-likelihood of `theta` under the mixture encoded by
    /// `raw`, with the exact gradient w.r.t. `raw`.
    pub fn nll_and_grad(&self, raw: &[f64], theta: &[f64; CONFIG_DIM]) -> (f64, Vec<f64>) {
        let k = self.k;
        let logits = &raw[..k];
        let weights = softmax(logits);
        let mut grad = vec![0.0; raw.len()];

        // per-component joint log terms
        let mut logs = vec![0.0; k];
        for c in 0..k {
            let mean = &raw[k + c * CONFIG_DIM..k + (c + 1) * CONFIG_DIM];
            let scale_base = k + k * CONFIG_DIM + c * CONFIG_DIM;
            let mut lp = weights[c].max(1e-300).ln();
            for d in 0..CONFIG_DIM {
                let var = softplus(raw[scale_base + d]) + VAR_FLOOR;
                let diff = theta[d] - mean[d];
                lp += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + diff * diff / var);
            }
            logs[c] = lp;
        }
        let total = log_sum_exp(&logs);
        let nll = -total;

        for c in 0..k {
            let resp = (logs[c] - total).exp();
            // logits: d nll / d logit_c = w_c - r_c
            grad[c] = weights[c] - resp;
            let mean = &raw[k + c * CONFIG_DIM..k + (c + 1) * CONFIG_DIM];
            let scale_base = k + k * CONFIG_DIM + c * CONFIG_DIM;
            for d in 0..CONFIG_DIM {
                let var = softplus(raw[scale_base + d]) + VAR_FLOOR;
                let diff = theta[d] - mean[d];
                // means
                grad[k + c * CONFIG_DIM + d] = -resp * diff / var;
                // raw scales, chained through softplus
                let dvar = -resp * (-0.5 / var + 0.5 * diff * diff / (var * var));
                grad[scale_base + d] = dvar * sigmoid(raw[scale_base + d]);
            }
        }
        (nll, grad)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
