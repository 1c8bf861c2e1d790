//! Task-driven multimodal dictionary learning.
//!
//! The model holds one dictionary `D^s` and one decision matrix `W^s` per
//! modality plus a shared bias `b`. A sample `(x^1..x^M, y)` is encoded
//! jointly (see [`crate::jsc`]) and scored by the cumulative squared loss
//! `Σ_s ½‖y − W^s α^s − b‖²`. Dictionaries are trained through the implicit
//! derivative of the sparse code: on the active rows `Λ` of `A*`,
//!
//! ```text
//! β_Υ = (D̂ᵀD̂ + λ1 Δ + λ2 I)⁻¹ g,   β_Υᶜ = 0
//! ∇_{D^s} = (x^s − D^s α^s) β_sᵀ − D^s β_s α^sᵀ
//! ```
//!
//! where `D̂` stacks the block-diagonal atom groups of `Λ`, `Δ` the
//! curvature blocks of the row norms and `g` the loss gradient on `A*_Λ`.
//!
//! Index layout: the full `β ∈ R^{dM}` is modality-major, so position
//! `s·d + j` is modality `s`, atom `j`. Inside `Υ` the ordering follows
//! `D̂`: active row `Λ[k]`, modality `s` sits at `k·M + s`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::jsc::{self, Dictionary, JointCode, JscError, JscParams};
use crate::linalg::{Cholesky, LinalgError};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"SFDL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TddlError {
    #[error(transparent)]
    Jsc(#[from] JscError),
    #[error("active set is empty")]
    EmptyActiveSet,
    #[error("iteration {iteration}: linear solve for beta failed: {source}")]
    Solve {
        iteration: usize,
        #[source]
        source: LinalgError,
    },
    #[error("iteration {iteration}: non-finite {what} after update")]
    NonFinite { iteration: usize, what: &'static str },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid training configuration: {0}")]
    Config(&'static str),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a fusion model file (bad magic)")]
    BadMagic,
    #[error("unsupported fusion model version {0}")]
    Version(u32),
    #[error("fusion model file truncated")]
    Truncated,
    #[error("corrupt fusion model file: {0}")]
    Corrupt(&'static str),
}

/// One training pair: an observation per modality and the target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub x: Vec<Array1<T>>,
    pub y: Array1<T>,
}

/// Dictionaries, decision matrices and bias of the fusion model.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel<T> {
    pub dicts: Vec<Dictionary<T>>,
    /// `W^s`, each `p × d`.
    pub weights: Vec<Array2<T>>,
    /// Shared bias of length `p`.
    pub bias: Array1<T>,
}

impl<T: Real> FusionModel<T> {
    pub fn new(dicts: Vec<Dictionary<T>>, weights: Vec<Array2<T>>, bias: Array1<T>) -> Result<Self, TddlError> {
        if dicts.is_empty() {
            return Err(TddlError::Dimension("model needs at least one modality".into()));
        }
        if dicts.len() != weights.len() {
            return Err(TddlError::Dimension(format!(
                "{} dictionaries but {} weight matrices",
                dicts.len(),
                weights.len()
            )));
        }
        let d = dicts[0].atom_count();
        for (s, (ds, ws)) in dicts.iter().zip(&weights).enumerate() {
            if ds.atom_count() != d || ws.ncols() != d || ws.nrows() != bias.len() {
                return Err(TddlError::Dimension(format!(
                    "modality {s}: dictionary has {} atoms, weights are {}x{}, bias has {}",
                    ds.atom_count(),
                    ws.nrows(),
                    ws.ncols(),
                    bias.len()
                )));
            }
        }
        Ok(Self { dicts, weights, bias })
    }

    pub fn modalities(&self) -> usize {
        self.dicts.len()
    }

    pub fn atom_count(&self) -> usize {
        self.dicts[0].atom_count()
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn signal_dims(&self) -> Vec<usize> {
        self.dicts.iter().map(Dictionary::signal_dim).collect()
    }

    /// Dictionaries stacked vertically: `(Σ n^s) × d`.
    pub fn stacked_dictionary(&self) -> Array2<T> {
        let views: Vec<_> = self.dicts.iter().map(Dictionary::atoms).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal atom counts")
    }

    /// Decision matrices side by side: `p × (M d)`.
    pub fn stacked_weights(&self) -> Array2<T> {
        let views: Vec<_> = self.weights.iter().map(|w| w.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("equal output dims")
    }

    /// Decision score `W^s α^s + b` of one modality.
    pub fn modality_score(&self, code: &JointCode<T>, s: usize) -> Array1<T> {
        self.weights[s].dot(&code.alpha(s)) + &self.bias
    }

    /// `(1/M) Σ_s (W^s α^s + b)`.
    pub fn predict(&self, code: &JointCode<T>) -> Array1<T> {
        let m = self.modalities();
        let mut acc = Array1::zeros(self.output_dim());
        for s in 0..m {
            acc += &self.weights[s].dot(&code.alpha(s));
        }
        acc.mapv(|v| v / T::from_usize(m).expect("small count")) + &self.bias
    }

    fn check_sample(&self, sample: &Sample<T>) -> Result<(), TddlError> {
        if sample.x.len() != self.modalities() {
            return Err(TddlError::Dimension(format!(
                "sample has {} modalities, model has {}",
                sample.x.len(),
                self.modalities()
            )));
        }
        if sample.y.len() != self.output_dim() {
            return Err(TddlError::Dimension(format!(
                "target has length {}, model outputs {}",
                sample.y.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.dicts.iter().all(|d| d.atoms().iter().all(|v| v.is_finite()))
            && self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.bias.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub lambda1: T,
    pub lambda2: T,
    /// Ridge on the decision matrices.
    pub nu: T,
    pub rho: T,
    pub t0: T,
    pub iterations: usize,
    /// Atom count `d` of each dictionary.
    pub atoms: usize,
    pub seed: u64,
    pub jsc_max_iter: usize,
    pub jsc_tol: T,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self::with_iterations(100_000)
    }
}

impl<T: Real> TrainConfig<T> {
    /// Defaults with `T` iterations and `t0 = max(1, T/10)`.
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            lambda1: T::lit(0.015),
            lambda2: T::lit(0.002),
            nu: T::lit(1e-4),
            rho: T::lit(0.01),
            t0: T::lit((iterations as f64 / 10.0).max(1.0)),
            iterations,
            atoms: 150,
            seed: 0,
            jsc_max_iter: 300,
            jsc_tol: T::lit(1e-7),
        }
    }

    pub fn jsc_params(&self) -> JscParams<T> {
        JscParams {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            max_iter: self.jsc_max_iter,
            tol: self.jsc_tol,
        }
    }

    pub fn validate(&self) -> Result<(), TddlError> {
        if !(self.rho > T::zero()) {
            return Err(TddlError::Config("rho must be > 0"));
        }
        if !(self.t0 >= T::one()) {
            return Err(TddlError::Config("t0 must be >= 1"));
        }
        if !(self.lambda2 > T::zero()) {
            return Err(TddlError::Config("lambda2 must be > 0"));
        }
        if !(self.nu >= T::zero()) {
            return Err(TddlError::Config("nu must be >= 0"));
        }
        if !(self.lambda1 >= T::zero()) {
            return Err(TddlError::Config("lambda1 must be >= 0"));
        }
        if self.atoms == 0 {
            return Err(TddlError::Config("atom count must be positive"));
        }
        Ok(())
    }

    /// Annealed step `min(ρ, ρ t0 / t)`.
    pub fn learning_rate(&self, t: usize) -> T {
        let t = T::from_usize(t.max(1)).expect("iteration fits");
        self.rho.min(self.rho * self.t0 / t)
    }
}

/// `Σ_s ½‖y − (W^s α^s + b)‖²`; the ν ridge is applied in the update, not here.
pub fn supervised_loss<T: Real>(y: &Array1<T>, model: &FusionModel<T>, code: &JointCode<T>) -> T {
    let half = T::lit(0.5);
    (0..model.modalities())
        .map(|s| {
            let e = y - &model.modality_score(code, s);
            half * e.dot(&e)
        })
        .sum()
}

/// `n × M|Λ|` matrix whose `k`-th column group is `blkdiag(d^1_j, …, d^M_j)` for `j = Λ[k]`.
pub fn build_dhat<T: Real>(dicts: &[Dictionary<T>], active: &[usize]) -> Result<Array2<T>, TddlError> {
    if active.is_empty() {
        return Err(TddlError::EmptyActiveSet);
    }
    let m = dicts.len();
    let n: usize = dicts.iter().map(Dictionary::signal_dim).sum();
    let mut out = Array2::zeros((n, m * active.len()));
    for (k, &j) in active.iter().enumerate() {
        let mut offset = 0;
        for (s, ds) in dicts.iter().enumerate() {
            let rows = ds.signal_dim();
            out.slice_mut(ndarray::s![offset..offset + rows, k * m + s])
                .assign(&ds.atom(j));
            offset += rows;
        }
    }
    Ok(out)
}

/// `blkdiag(Δ_j)` with `Δ_j = I/‖a_j‖ − a_jᵀ a_j / ‖a_j‖³` for `j ∈ Λ`.
///
/// Panics if an active row has zero norm.
pub fn build_delta<T: Real>(a: ArrayView2<'_, T>, active: &[usize]) -> Array2<T> {
    let m = a.ncols();
    let mut out = Array2::zeros((m * active.len(), m * active.len()));
    for (k, &j) in active.iter().enumerate() {
        let row = a.row(j);
        let norm = row.dot(&row).sqrt();
        assert!(norm > T::zero(), "active row {j} has zero norm");
        let inv = T::one() / norm;
        let inv3 = inv * inv * inv;
        for p in 0..m {
            for q in 0..m {
                let eye = if p == q { inv } else { T::zero() };
                out[[k * m + p, k * m + q]] = eye - inv3 * row[p] * row[q];
            }
        }
    }
    out
}

/// Solves `(D̂ᵀD̂ + λ1 Δ + λ2 I) β_Υ = g` by Cholesky.
pub fn build_beta<T: Real>(
    dhat: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    g: &Array1<T>,
    lambda1: T,
    lambda2: T,
) -> Result<Array1<T>, LinalgError> {
    let mut h = dhat.t().dot(&dhat);
    h.scaled_add(lambda1, &delta);
    h.diag_mut().mapv_inplace(|v| v + lambda2);
    Cholesky::factor(h.view())?.solve(g.view())
}

/// Scatters `β_Υ` into the modality-major `dM` vector (zeros off `Υ`).
pub fn expand_beta<T: Real>(beta_upsilon: &Array1<T>, active: &[usize], d: usize, m: usize) -> Array1<T> {
    let mut full = Array1::zeros(d * m);
    for (k, &j) in active.iter().enumerate() {
        for s in 0..m {
            full[s * d + j] = beta_upsilon[k * m + s];
        }
    }
    full
}

/// Positions of `Υ` in the full modality-major layout, in `D̂` column order.
pub fn upsilon_indices(active: &[usize], d: usize, m: usize) -> Vec<usize> {
    active.iter().flat_map(|&j| (0..m).map(move |s| s * d + j)).collect()
}

/// Intermediate quantities of one implicit-gradient evaluation.
#[derive(Debug, Clone)]
pub struct GradientWorkspace<T> {
    pub active: Vec<usize>,
    pub upsilon: Vec<usize>,
    /// System matrix `D̂ᵀD̂ + λ1 Δ + λ2 I`.
    pub system: Array2<T>,
    pub g: Array1<T>,
    /// Full modality-major `β` of length `dM`.
    pub beta: Array1<T>,
}

/// Parameter gradients of the cumulative supervised loss (ν excluded).
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub dicts: Vec<Array2<T>>,
    pub weights: Vec<Array2<T>>,
    pub bias: Array1<T>,
    pub workspace: Option<GradientWorkspace<T>>,
}

/// System matrix assembled from per-modality Gram blocks; equal to
/// `D̂ᵀD̂ + λ1Δ + λ2I` without materializing `D̂`.
fn system_matrix<T: Real>(model: &FusionModel<T>, code: &JointCode<T>, lambda1: T, lambda2: T) -> Array2<T> {
    let active = &code.active_rows;
    let m = model.modalities();
    let size = m * active.len();
    let mut h = Array2::zeros((size, size));
    for (s, ds) in model.dicts.iter().enumerate() {
        for (k1, &j1) in active.iter().enumerate() {
            let a1 = ds.atom(j1);
            for (k2, &j2) in active.iter().enumerate().skip(k1) {
                let v = a1.dot(&ds.atom(j2));
                h[[k1 * m + s, k2 * m + s]] = v;
                h[[k2 * m + s, k1 * m + s]] = v;
            }
        }
    }
    h.scaled_add(lambda1, &build_delta(code.a.view(), active));
    h.diag_mut().mapv_inplace(|v| v + lambda2);
    h
}

/// Analytic gradients at a given joint code.
pub fn gradients<T: Real>(
    model: &FusionModel<T>,
    sample: &Sample<T>,
    code: &JointCode<T>,
    lambda1: T,
    lambda2: T,
    iteration: usize,
) -> Result<Gradients<T>, TddlError> {
    let m = model.modalities();
    let d = model.atom_count();
    let errors: Vec<Array1<T>> = (0..m).map(|s| &sample.y - &model.modality_score(code, s)).collect();

    let weights = (0..m)
        .map(|s| {
            let e = errors[s].view().insert_axis(Axis(1));
            let alpha = code.alpha(s).insert_axis(Axis(0));
            -e.dot(&alpha)
        })
        .collect();
    let mut bias = Array1::zeros(model.output_dim());
    for e in &errors {
        bias -= e;
    }

    let mut dicts: Vec<Array2<T>> = model
        .dicts
        .iter()
        .map(|ds| Array2::zeros(ds.atoms().raw_dim()))
        .collect();
    if code.active_rows.is_empty() {
        return Ok(Gradients {
            dicts,
            weights,
            bias,
            workspace: None,
        });
    }

    let active = &code.active_rows;
    // ∂L/∂α^s = −W^sᵀ e^s, restricted to Λ in D̂ order
    let wte: Vec<Array1<T>> = (0..m).map(|s| -model.weights[s].t().dot(&errors[s])).collect();
    let mut g = Array1::zeros(m * active.len());
    for (k, &j) in active.iter().enumerate() {
        for s in 0..m {
            g[k * m + s] = wte[s][j];
        }
    }
    let system = system_matrix(model, code, lambda1, lambda2);
    let beta_u = Cholesky::factor(system.view())
        .and_then(|ch| ch.solve(g.view()))
        .map_err(|source| TddlError::Solve { iteration, source })?;
    if beta_u.iter().any(|v| !v.is_finite()) {
        return Err(TddlError::NonFinite {
            iteration,
            what: "beta",
        });
    }
    let beta = expand_beta(&beta_u, active, d, m);

    for (s, ds) in model.dicts.iter().enumerate() {
        let beta_s = beta.slice(ndarray::s![s * d..(s + 1) * d]);
        let alpha = code.alpha(s);
        let resid = &sample.x[s] - &ds.atoms().dot(&alpha);
        let d_beta = ds.atoms().dot(&beta_s);
        let grad = &mut dicts[s];
        // (x − Dα) βᵀ − (Dβ) αᵀ
        for ((i, j), v) in grad.indexed_iter_mut() {
            *v = resid[i] * beta_s[j] - d_beta[i] * alpha[j];
        }
    }

    Ok(Gradients {
        dicts,
        weights,
        bias,
        workspace: Some(GradientWorkspace {
            active: active.clone(),
            upsilon: upsilon_indices(active, d, m),
            system,
            g,
            beta,
        }),
    })
}

/// Outcome of one stochastic step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo<T> {
    /// Supervised loss of the drawn sample before the update.
    pub loss: T,
    pub active: usize,
    pub learning_rate: T,
}

/// One projected stochastic gradient step on a single sample.
pub fn train_step<T: Real>(
    model: &mut FusionModel<T>,
    sample: &Sample<T>,
    t: usize,
    cfg: &TrainConfig<T>,
) -> Result<StepInfo<T>, TddlError> {
    model.check_sample(sample)?;
    let rate = cfg.learning_rate(t);
    let code = jsc::encode(&sample.x, &model.dicts, &cfg.jsc_params(), None)?;
    let loss = supervised_loss(&sample.y, model, &code);

    if code.active_rows.is_empty() {
        let shrink = T::one() - rate * cfg.nu;
        for w in &mut model.weights {
            w.mapv_inplace(|v| v * shrink);
        }
        return Ok(StepInfo {
            loss,
            active: 0,
            learning_rate: rate,
        });
    }

    let grads = gradients(model, sample, &code, cfg.lambda1, cfg.lambda2, t)?;
    for (w, gw) in model.weights.iter_mut().zip(&grads.weights) {
        let nu = cfg.nu;
        w.zip_mut_with(gw, |wv, &gv| *wv -= rate * (gv + nu * *wv));
    }
    model.bias.scaled_add(-rate, &grads.bias);
    for (ds, gd) in model.dicts.iter_mut().zip(&grads.dicts) {
        ds.atoms_mut().scaled_add(-rate, gd);
        ds.project_unit_ball();
    }
    if !model.all_finite() {
        return Err(TddlError::NonFinite {
            iteration: t,
            what: "model parameters",
        });
    }
    Ok(StepInfo {
        loss,
        active: code.active_rows.len(),
        learning_rate: rate,
    })
}

/// Dictionaries from randomly drawn training observations (columns normalized;
/// all-zero draws fall back to Gaussian atoms), zero decision matrices and
/// the mean target as bias.
pub fn initialize<T: Real>(
    dataset: &[Sample<T>],
    atoms: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FusionModel<T>, TddlError> {
    let first = dataset.first().ok_or(TddlError::EmptyDataset)?;
    let m = first.x.len();
    let dims: Vec<usize> = first.x.iter().map(Array1::len).collect();
    let p = first.y.len();
    for s in dataset {
        if s.x.len() != m || s.y.len() != p || s.x.iter().map(Array1::len).ne(dims.iter().copied()) {
            return Err(TddlError::Dimension("samples have inconsistent shapes".into()));
        }
    }
    let mut raw: Vec<Array2<T>> = dims.iter().map(|&n| Array2::zeros((n, atoms))).collect();
    for j in 0..atoms {
        let pick = &dataset[rng.random_range(0..dataset.len())];
        for (s, dict) in raw.iter_mut().enumerate() {
            let col = &pick.x[s];
            if col.dot(col) > T::zero() {
                dict.column_mut(j).assign(col);
            } else {
                for v in dict.column_mut(j).iter_mut() {
                    *v = T::lit(rng.sample::<f64, _>(StandardNormal));
                }
            }
        }
    }
    let dicts = raw
        .into_iter()
        .map(Dictionary::normalized)
        .collect::<Result<Vec<_>, _>>()?;
    let weights = dims.iter().map(|_| Array2::zeros((p, atoms))).collect();
    let mut bias = Array1::zeros(p);
    for s in dataset {
        bias += &s.y;
    }
    let count = T::from_usize(dataset.len()).expect("dataset size");
    bias.mapv_inplace(|v| v / count);
    FusionModel::new(dicts, weights, bias)
}

/// Per-step record of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport<T> {
    pub step_losses: Vec<T>,
    pub empty_active_steps: usize,
}

impl<T: Real> TrainReport<T> {
    /// Mean of the last `window` step losses.
    pub fn tail_mean(&self, window: usize) -> Option<T> {
        let n = self.step_losses.len();
        if n == 0 || window == 0 {
            return None;
        }
        let tail = &self.step_losses[n - window.min(n)..];
        Some(tail.iter().copied().sum::<T>() / T::from_usize(tail.len()).expect("len"))
    }
}

/// Runs the stochastic projected gradient loop for `cfg.iterations` steps.
pub fn train<T: Real>(dataset: &[Sample<T>], cfg: &TrainConfig<T>) -> Result<FusionModel<T>, TddlError> {
    train_with_report(dataset, cfg).map(|(m, _)| m)
}

pub fn train_with_report<T: Real>(
    dataset: &[Sample<T>],
    cfg: &TrainConfig<T>,
) -> Result<(FusionModel<T>, TrainReport<T>), TddlError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = initialize(dataset, cfg.atoms, &mut rng)?;
    let mut report = TrainReport {
        step_losses: Vec::with_capacity(cfg.iterations),
        empty_active_steps: 0,
    };
    for t in 1..=cfg.iterations {
        let sample = &dataset[rng.random_range(0..dataset.len())];
        let info = train_step(&mut model, sample, t, cfg)?;
        if info.active == 0 {
            report.empty_active_steps += 1;
        }
        report.step_losses.push(info.loss);
        if t % 10_000 == 0 {
            log::debug!("tddl step {t}: loss {} active {}", info.loss, info.active);
        }
    }
    Ok((model, report))
}

/// Mean supervised loss of `model` over `dataset`.
pub fn mean_loss<T: Real>(
    model: &FusionModel<T>,
    dataset: &[Sample<T>],
    params: &JscParams<T>,
) -> Result<T, TddlError> {
    if dataset.is_empty() {
        return Err(TddlError::EmptyDataset);
    }
    let mut total = T::zero();
    for s in dataset {
        let code = jsc::encode(&s.x, &model.dicts, params, None)?;
        total += supervised_loss(&s.y, model, &code);
    }
    Ok(total / T::from_usize(dataset.len()).expect("len"))
}

// ---------------------------------------------------------------------------
// Finite-difference verification

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckOptions {
    /// Coordinates sampled per parameter group (all if fewer exist).
    pub coordinates: usize,
    pub step: f64,
    pub seed: u64,
    /// Step reductions tried when a perturbation changes the active set.
    pub max_retries: usize,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 50,
            step: 1e-5,
            seed: 0,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    /// `max_i |analytic_i − fd_i| / max(max_i |analytic_i|, max_i |fd_i|)` over checked dictionary entries.
    pub dict_rel_error: f64,
    pub weight_rel_error: f64,
    pub dict_coordinates: usize,
    pub weight_coordinates: usize,
    /// Largest absolute analytic gradient entry of each group.
    pub dict_grad_scale: f64,
    pub weight_grad_scale: f64,
    /// Smallest nonzero row norm of `A*` at the base point.
    pub min_active_norm: f64,
    /// Set when some coordinate changed the active set at every tried step.
    pub inconclusive: bool,
}

impl GradientCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.dict_rel_error.max(self.weight_rel_error)
    }
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Compares the analytic gradients of the cumulative supervised loss with
/// central finite differences, re-solving the joint code to high precision
/// at every perturbed point.
pub fn gradient_check<T: Real>(
    model: &FusionModel<T>,
    sample: &Sample<T>,
    cfg: &TrainConfig<T>,
    opts: &GradientCheckOptions,
) -> Result<GradientCheckReport, TddlError> {
    model.check_sample(sample)?;
    let params = JscParams {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        max_iter: 200_000,
        tol: T::lit(1e-13).max(T::epsilon() * T::lit(100.0)),
    };
    let solve = |m: &FusionModel<T>| jsc::encode_unchecked(&sample.x, &m.dicts, &params, None);
    let base = solve(model)?;
    let grads = gradients(model, sample, &base, cfg.lambda1, cfg.lambda2, 0)?;
    let min_active_norm = base
        .active_rows
        .iter()
        .map(|&j| base.row_norm(j).to_f64_lossy())
        .fold(f64::INFINITY, f64::min);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let m = model.modalities();
    let d = model.atom_count();
    let p = model.output_dim();
    let mut inconclusive = false;

    // dictionary coordinates
    let dims = model.signal_dims();
    let dict_total: usize = dims.iter().map(|n| n * d).sum();
    let dict_coords: Vec<(usize, usize, usize)> = pick_coordinates(&mut rng, dict_total, opts.coordinates)
        .into_iter()
        .map(|mut flat| {
            let mut s = 0;
            while flat >= dims[s] * d {
                flat -= dims[s] * d;
                s += 1;
            }
            (s, flat / d, flat % d)
        })
        .collect();
    let mut dict_analytic = Vec::new();
    let mut dict_numeric = Vec::new();
    for &(s, i, j) in &dict_coords {
        let mut h = opts.step;
        let mut done = false;
        for _ in 0..=opts.max_retries {
            let eval = |delta: f64| -> Result<(T, Vec<usize>), TddlError> {
                let mut probe = model.clone();
                probe.dicts[s].atoms_mut()[[i, j]] += T::lit(delta);
                let code = solve(&probe)?;
                Ok((supervised_loss(&sample.y, &probe, &code), code.active_rows))
            };
            let (lp, ap) = eval(h)?;
            let (lm, am) = eval(-h)?;
            if ap == base.active_rows && am == base.active_rows {
                dict_analytic.push(grads.dicts[s][[i, j]].to_f64_lossy());
                dict_numeric.push((lp - lm).to_f64_lossy() / (2.0 * h));
                done = true;
                break;
            }
            h /= 10.0;
        }
        if !done {
            inconclusive = true;
        }
    }

    // decision-matrix coordinates: the code does not depend on W
    let weight_coords = pick_coordinates(&mut rng, m * p * d, opts.coordinates);
    let mut weight_analytic = Vec::new();
    let mut weight_numeric = Vec::new();
    for flat in weight_coords {
        let (s, rest) = (flat / (p * d), flat % (p * d));
        let (i, j) = (rest / d, rest % d);
        let h = opts.step;
        let eval = |delta: f64| {
            let mut probe = model.clone();
            probe.weights[s][[i, j]] += T::lit(delta);
            supervised_loss(&sample.y, &probe, &base)
        };
        weight_analytic.push(grads.weights[s][[i, j]].to_f64_lossy());
        weight_numeric.push((eval(h) - eval(-h)).to_f64_lossy() / (2.0 * h));
    }

    let scale = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(GradientCheckReport {
        dict_rel_error: relative_error(&dict_analytic, &dict_numeric),
        weight_rel_error: relative_error(&weight_analytic, &weight_numeric),
        dict_coordinates: dict_analytic.len(),
        weight_coordinates: weight_analytic.len(),
        dict_grad_scale: scale(&dict_analytic),
        weight_grad_scale: scale(&weight_analytic),
        min_active_norm: if min_active_norm.is_finite() {
            min_active_norm
        } else {
            0.0
        },
        inconclusive,
    })
}

fn pick_coordinates(rng: &mut ChaCha8Rng, total: usize, wanted: usize) -> Vec<usize> {
    if wanted >= total {
        return (0..total).collect();
    }
    let mut picked = rand::seq::index::sample(rng, total, wanted).into_vec();
    picked.sort_unstable();
    picked
}

// ---------------------------------------------------------------------------
// Persistence

/// Little-endian layout: magic `SFDL`, version u32, `M` u32, `d` u32, the
/// `M` signal dims `n^s` as u32, output dim `p` u32, then f64 values of each
/// dictionary (`n^s × d`, row-major), each `W^s` (`p × d`, row-major) and `b`.
pub fn write_model<T: Real>(model: &FusionModel<T>, mut w: impl Write) -> Result<(), TddlError> {
    w.write_all(MAGIC)?;
    w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(model.modalities() as u32).to_le_bytes())?;
    w.write_all(&(model.atom_count() as u32).to_le_bytes())?;
    for n in model.signal_dims() {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    w.write_all(&(model.output_dim() as u32).to_le_bytes())?;
    let mut put = |v: T| w.write_all(&v.to_f64_lossy().to_le_bytes());
    for ds in &model.dicts {
        for row in ds.atoms().rows() {
            for &v in row {
                put(v)?;
            }
        }
    }
    for ws in &model.weights {
        for row in ws.rows() {
            for &v in row {
                put(v)?;
            }
        }
    }
    for &v in &model.bias {
        put(v)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TddlError> {
        let end = self.pos.checked_add(n).ok_or(TddlError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(TddlError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, TddlError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn matrix<T: Real>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>, TddlError> {
        let len = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(8))
            .ok_or(TddlError::Truncated)?;
        let vals: Vec<T> = self
            .take(len)?
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), vals).expect("sized"))
    }
}

pub fn read_model<T: Real>(mut r: impl Read) -> Result<FusionModel<T>, TddlError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).map_err(|_| TddlError::BadMagic)? != MAGIC {
        return Err(TddlError::BadMagic);
    }
    let version = cur.u32()? as u32;
    if version != MODEL_FORMAT_VERSION {
        return Err(TddlError::Version(version));
    }
    let m = cur.u32()?;
    let d = cur.u32()?;
    if m == 0 || d == 0 {
        return Err(TddlError::Corrupt("zero modalities or atoms"));
    }
    let dims = (0..m).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
    let p = cur.u32()?;
    let mut dict_mats = Vec::with_capacity(m);
    for &n in &dims {
        dict_mats.push(cur.matrix::<T>(n, d)?);
    }
    let mut weights = Vec::with_capacity(m);
    for _ in 0..m {
        weights.push(cur.matrix::<T>(p, d)?);
    }
    let bias = cur.matrix::<T>(1, p)?.into_shape_with_order(p).expect("vector");
    if cur.pos != bytes.len() {
        return Err(TddlError::Corrupt("trailing bytes"));
    }
    let dicts = dict_mats
        .into_iter()
        .map(Dictionary::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| TddlError::Corrupt("non-finite dictionary entry"))?;
    FusionModel::new(dicts, weights, bias)
}

pub fn save_model<T: Real>(model: &FusionModel<T>, path: impl AsRef<Path>) -> Result<(), TddlError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<FusionModel<T>, TddlError> {
    read_model(std::fs::File::open(path)?)
}
