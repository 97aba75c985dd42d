//! Per-domain adaptation: batch-norm statistics and affine, learnable spatial
//! priors, and a learnable output smoothing filter for each dataset.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Scalar, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Initial prior spread and smoothing width.
pub const PRIOR_INIT_SIGMA: f64 = 0.25;
pub const SMOOTH_INIT_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// How each domain's spatial priors are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorForm {
    /// `count` anisotropic Gaussians, five parameters each.
    Gaussian,
    /// `count` free `H×W` maps passed through softplus.
    FreeMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T: Scalar = f32> {
    pub site: String,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainContext<T: Scalar = f32> {
    pub id: String,
    pub bn: Vec<BnState<T>>,
    /// `P×5` Gaussian table or `P×H×W` free maps; `None` when `P = 0`.
    pub priors: Option<ParamId>,
    pub prior_form: PriorForm,
    /// Shape `[1]`.
    pub smooth_log_sigma: ParamId,
}

impl<T: Scalar> DomainContext<T> {
    pub fn bn_site(&self, site: &str) -> Result<&BnState<T>> {
        self.bn
            .iter()
            .find(|s| s.site == site)
            .ok_or_else(|| Error::config(format!("domain `{}` has no norm site `{site}`", self.id)))
    }

    fn bn_site_mut(&mut self, site: &str) -> Result<&mut BnState<T>> {
        let id = self.id.clone();
        self.bn
            .iter_mut()
            .find(|s| s.site == site)
            .ok_or_else(|| Error::config(format!("domain `{id}` has no norm site `{site}`")))
    }

    /// Every parameter owned by this domain.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.bn.iter().flat_map(|s| [s.gamma, s.beta]).collect();
        ids.extend(self.priors);
        ids.push(self.smooth_log_sigma);
        ids
    }
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T: Scalar = f32> {
    pub domain: String,
    pub site: String,
    pub stats: BatchStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub count: usize,
    pub form: PriorForm,
    /// Map extents, needed only for [`PriorForm::FreeMap`].
    pub height: usize,
    pub width: usize,
}

/// One [`DomainContext`] per dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTable<T: Scalar = f32> {
    domains: Vec<DomainContext<T>>,
}

impl<T: Scalar> DomainTable<T> {
    /// Builds the table, registering every domain's parameters in `store`.
    /// `sites` lists each norm site with its channel count.
    pub fn register(
        ids: &[String],
        sites: &[(&str, usize)],
        priors: &PriorSpec,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut domains = Vec::with_capacity(ids.len());
        for id in ids {
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::config(format!("invalid domain id `{id}`")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::config(format!("duplicate domain id `{id}`")));
            }
            let mut bn = Vec::new();
            for &(site, channels) in sites {
                let gamma = store.add(format!("domain.{id}.bn.{site}.gamma"), Tensor::ones(&[channels]))?;
                let beta = store.add(format!("domain.{id}.bn.{site}.beta"), Tensor::zeros(&[channels]))?;
                bn.push(BnState {
                    site: site.to_string(),
                    running_mean: vec![T::zero(); channels],
                    running_var: vec![T::one(); channels],
                    gamma,
                    beta,
                });
            }
            let prior_param = match (priors.count, priors.form) {
                (0, _) => None,
                (p, PriorForm::Gaussian) => {
                    let row = [0.5, 0.5, PRIOR_INIT_SIGMA.ln(), PRIOR_INIT_SIGMA.ln(), 0.0];
                    let t = Tensor::from_fn(&[p, 5], |i| T::of(row[i % 5]));
                    Some(store.add(format!("domain.{id}.priors"), t)?)
                }
                (p, PriorForm::FreeMap) => {
                    // softplus⁻¹(1) so every free map starts flat at one
                    let t = Tensor::full(&[p, priors.height, priors.width], T::of(1f64.exp_m1().ln()));
                    Some(store.add(format!("domain.{id}.prior_maps"), t)?)
                }
            };
            let smooth = store.add(
                format!("domain.{id}.smooth_log_sigma"),
                Tensor::full(&[1], T::of(SMOOTH_INIT_SIGMA.ln())),
            )?;
            domains.push(DomainContext {
                id: id.clone(),
                bn,
                priors: prior_param,
                prior_form: priors.form,
                smooth_log_sigma: smooth,
            });
        }
        Ok(DomainTable { domains })
    }

    /// Rebinds a table onto a store loaded from disk, by parameter name.
    pub fn from_store(
        ids: &[String],
        sites: &[(&str, usize)],
        form: PriorForm,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        let need = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter `{name}`")))
        };
        let mut domains = Vec::new();
        for id in ids {
            let mut bn = Vec::new();
            for &(site, channels) in sites {
                bn.push(BnState {
                    site: site.to_string(),
                    running_mean: vec![T::zero(); channels],
                    running_var: vec![T::one(); channels],
                    gamma: need(format!("domain.{id}.bn.{site}.gamma"))?,
                    beta: need(format!("domain.{id}.bn.{site}.beta"))?,
                });
            }
            let priors = match form {
                PriorForm::Gaussian => store.id(&format!("domain.{id}.priors")),
                PriorForm::FreeMap => store.id(&format!("domain.{id}.prior_maps")),
            };
            domains.push(DomainContext {
                id: id.clone(),
                bn,
                priors,
                prior_form: form,
                smooth_log_sigma: need(format!("domain.{id}.smooth_log_sigma"))?,
            });
        }
        Ok(DomainTable { domains })
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DomainContext<T>> {
        self.domains.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DomainContext<T>> {
        self.domains.iter_mut()
    }

    pub fn ids(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&DomainContext<T>> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut DomainContext<T>> {
        self.domains
            .iter_mut()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    /// Folds a batch's statistics into the running estimates with momentum
    /// [`BN_MOMENTUM`]; the variance fold uses the unbiased estimate.
    pub fn apply_bn_update(&mut self, update: &BnUpdate<T>) -> Result<()> {
        let state = self.get_mut(&update.domain)?.bn_site_mut(&update.site)?;
        let m = T::of(BN_MOMENTUM);
        let n = update.stats.count as f64;
        let unbias = T::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        for c in 0..state.running_mean.len() {
            state.running_mean[c] = (T::one() - m) * state.running_mean[c] + m * update.stats.mean[c];
            state.running_var[c] =
                (T::one() - m) * state.running_var[c] + m * update.stats.var[c] * unbias;
        }
        Ok(())
    }

    /// Keeps Gaussian prior centres inside the unit square.
    pub fn project(&self, store: &mut ParamStore<T>) {
        for d in &self.domains {
            if let (Some(p), PriorForm::Gaussian) = (d.priors, d.prior_form) {
                for row in store.get_mut(p).data_mut().chunks_mut(5) {
                    row[0] = row[0].max(T::zero()).min(T::one());
                    row[1] = row[1].max(T::zero()).min(T::one());
                }
            }
        }
    }
}

/// Returns the single domain shared by a batch, rejecting mixed batches.
pub fn single_domain<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<&'a str> {
    let mut it = ids.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::Usage("empty batch".into()))?;
    for other in it {
        if other != first {
            return Err(Error::Usage(format!(
                "batch mixes domains `{first}` and `{other}`; batches must be single-domain"
            )));
        }
    }
    Ok(first)
}

/// Domain-specific batch normalization of an `N×C×H×W` batch at `site`.
///
/// Training mode normalizes with the batch statistics and returns them for
/// the caller to fold into the running estimates; inference uses the
/// running estimates.
pub fn domain_batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    x: Var,
    domain: &DomainContext<T>,
    site: &str,
    mode: Mode,
) -> Result<(Var, Option<BnUpdate<T>>)> {
    let state = domain.bn_site(site)?;
    let (gamma, beta) = (bound[state.gamma], bound[state.beta]);
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, T::of(BN_EPS))?;
            Ok((
                y,
                Some(BnUpdate {
                    domain: domain.id.clone(),
                    site: site.to_string(),
                    stats,
                }),
            ))
        }
        Mode::Infer => {
            let y = tape.batch_norm_fixed(
                x,
                gamma,
                beta,
                &state.running_mean,
                &state.running_var,
                T::of(BN_EPS),
            )?;
            Ok((y, None))
        }
    }
}

/// Renders the domain's priors as a `P×H×W` volume, or `None` when `P = 0`.
pub fn render_priors<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    domain: &DomainContext<T>,
    h: usize,
    w: usize,
) -> Result<Option<Var>> {
    let Some(p) = domain.priors else {
        return Ok(None);
    };
    match domain.prior_form {
        PriorForm::Gaussian => tape.gaussian_priors(bound[p], h, w).map(Some),
        PriorForm::FreeMap => {
            if &tape.shape(bound[p])[1..] != [h, w] {
                return Err(Error::Dimension {
                    op: "render_priors",
                    lhs: tape.shape(bound[p]).to_vec(),
                    rhs: vec![h, w],
                });
            }
            Ok(Some(tape.softplus(bound[p])))
        }
    }
}

/// Blurs a normalized `H×W` map with the domain's Gaussian and renormalizes.
pub fn smooth_prediction<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    map: Var,
    domain: &DomainContext<T>,
) -> Result<Var> {
    let blurred = tape.gaussian_blur(map, bound[domain.smooth_log_sigma])?;
    tape.normalize_sum(blurred)
}
