//! Joint sparse coding across modalities.
//!
//! Given observations `x^s` and dictionaries `D^s` for `s = 1..M`, finds the
//! code matrix `A = [α^1 … α^M]` (atoms × modalities) minimizing
//!
//! ```text
//! ½ Σ_s ‖x^s − D^s α^s‖² + λ1 Σ_j ‖a_j‖₂ + (λ2/2) ‖A‖²_F
//! ```
//!
//! where `a_j` is row `j` of `A`. The row-group penalty makes every modality
//! select the same atoms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};

use crate::linalg::dot;
use crate::scalar::Real;

/// Rows whose final norm falls below this are zeroed, so the active set is exact.
pub const ZERO_ROW_THRESHOLD: f64 = 1e-12;
/// Largest column norm accepted by [`encode`].
pub const ATOM_NORM_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum JscError {
    #[error("got {signals} signals for {dicts} dictionaries")]
    ModalityCount { dicts: usize, signals: usize },
    #[error("modality {modality}: signal has length {got}, dictionary expects {expected}")]
    SignalDim {
        modality: usize,
        expected: usize,
        got: usize,
    },
    #[error("modality {modality} has {got} atoms, expected {expected}")]
    AtomCount {
        modality: usize,
        expected: usize,
        got: usize,
    },
    #[error("modality {modality}, atom {atom}: norm {norm} exceeds 1")]
    AtomNorm { modality: usize, atom: usize, norm: f64 },
    #[error("dictionary contains non-finite entries")]
    NonFinite,
    #[error("warm start has shape {got:?}, expected {expected:?}")]
    WarmStart {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid parameters: {0}")]
    Params(&'static str),
    #[error("no modalities given")]
    Empty,
}

/// Atoms of one modality as the columns of an `n × d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary<T> {
    atoms: Array2<T>,
}

impl<T: Real> Dictionary<T> {
    pub fn new(atoms: Array2<T>) -> Result<Self, JscError> {
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(JscError::NonFinite);
        }
        // column-major keeps each atom contiguous
        let mut cm = Array2::zeros(atoms.raw_dim().f());
        cm.assign(&atoms);
        Ok(Self { atoms: cm })
    }

    /// Scales every nonzero column to unit norm.
    pub fn normalized(atoms: Array2<T>) -> Result<Self, JscError> {
        let mut d = Self::new(atoms)?;
        for mut col in d.atoms.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            if norm > T::zero() {
                col.mapv_inplace(|v| v / norm);
            }
        }
        Ok(d)
    }

    pub fn atoms(&self) -> ArrayView2<'_, T> {
        self.atoms.view()
    }

    pub fn atoms_mut(&mut self) -> &mut Array2<T> {
        &mut self.atoms
    }

    pub fn atom(&self, j: usize) -> ArrayView1<'_, T> {
        self.atoms.column(j)
    }

    /// Signal dimension `n^s`.
    pub fn signal_dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn column_norms(&self) -> Vec<T> {
        self.atoms.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect()
    }

    /// Projects onto the unit column ball: columns longer than 1 are rescaled to 1.
    pub fn project_unit_ball(&mut self) {
        for mut col in self.atoms.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            if norm > T::one() {
                col.mapv_inplace(|v| v / norm);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JscParams<T> {
    /// Row-group (ℓ1,2) penalty.
    pub lambda1: T,
    /// Frobenius ridge; must be positive for uniqueness and differentiability.
    pub lambda2: T,
    pub max_iter: usize,
    /// Stop when the largest row change of a sweep drops below this.
    pub tol: T,
}

impl<T: Real> Default for JscParams<T> {
    fn default() -> Self {
        Self {
            lambda1: T::lit(0.015),
            lambda2: T::lit(0.002),
            max_iter: 300,
            tol: T::lit(1e-7),
        }
    }
}

impl<T: Real> JscParams<T> {
    pub fn validate(&self) -> Result<(), JscError> {
        if !(self.lambda1 >= T::zero()) || !self.lambda1.is_finite() {
            return Err(JscError::Params("lambda1 must be finite and >= 0"));
        }
        if !(self.lambda2 > T::zero()) || !self.lambda2.is_finite() {
            return Err(JscError::Params("lambda2 must be finite and > 0"));
        }
        if !(self.tol > T::zero()) {
            return Err(JscError::Params("tol must be > 0"));
        }
        Ok(())
    }
}

/// Solution of one joint sparse coding problem.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCode<T> {
    /// `d × M`; column `s` is `α^s`.
    pub a: Array2<T>,
    /// Rows with nonzero norm, ascending.
    pub active_rows: Vec<usize>,
    pub converged: bool,
    pub sweeps: usize,
}

impl<T: Real> JointCode<T> {
    pub fn alpha(&self, s: usize) -> ArrayView1<'_, T> {
        self.a.column(s)
    }

    pub fn row_norm(&self, j: usize) -> T {
        let r = self.a.row(j);
        r.dot(&r).sqrt()
    }
}

fn check_problem<T: Real>(x: &[Array1<T>], dicts: &[Dictionary<T>]) -> Result<usize, JscError> {
    if dicts.is_empty() {
        return Err(JscError::Empty);
    }
    if x.len() != dicts.len() {
        return Err(JscError::ModalityCount {
            dicts: dicts.len(),
            signals: x.len(),
        });
    }
    let d = dicts[0].atom_count();
    for (s, (xs, ds)) in x.iter().zip(dicts).enumerate() {
        if ds.atom_count() != d {
            return Err(JscError::AtomCount {
                modality: s,
                expected: d,
                got: ds.atom_count(),
            });
        }
        if xs.len() != ds.signal_dim() {
            return Err(JscError::SignalDim {
                modality: s,
                expected: ds.signal_dim(),
                got: xs.len(),
            });
        }
    }
    Ok(d)
}

/// Minimizer of `½ Σ_s q_s a_s² − c·a + λ1‖a‖ + (λ2/2)‖a‖²` over one row,
/// with `q_s = ‖d_j^s‖²`. Equal `q` gives the group soft-threshold in closed
/// form; unequal `q` (columns shrunk below unit norm) solves the scalar
/// secular equation for `‖a‖` by Newton's method.
fn solve_row<T: Real>(c: &[T], q: &[T], lambda1: T, lambda2: T, out: &mut [T]) {
    let cnorm = c.iter().map(|&v| v * v).sum::<T>().sqrt();
    if cnorm <= lambda1 {
        out.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let equal_q = q.iter().all(|&v| (v - q[0]).abs() <= T::lit(1e-14) * (T::one() + q[0]));
    if equal_q {
        let factor = (T::one() - lambda1 / cnorm) / (q[0] + lambda2);
        for (o, &cv) in out.iter_mut().zip(c) {
            *o = cv * factor;
        }
        return;
    }
    if lambda1 == T::zero() {
        for ((o, &cv), &qv) in out.iter_mut().zip(c).zip(q) {
            *o = cv / (qv + lambda2);
        }
        return;
    }
    // φ(t) = Σ c_s² / (k_s t + λ1)² − 1 is convex and decreasing; Newton from
    // t = 0 increases monotonically to the root.
    let mut t = T::zero();
    for _ in 0..100 {
        let mut phi = -T::one();
        let mut dphi = T::zero();
        for (&cv, &qv) in c.iter().zip(q) {
            let k = qv + lambda2;
            let den = k * t + lambda1;
            phi += cv * cv / (den * den);
            dphi -= T::lit(2.0) * cv * cv * k / (den * den * den);
        }
        let step = phi / dphi;
        let next = t - step;
        let done = (next - t).abs() <= T::epsilon() * T::lit(4.0) * next.abs().max(T::one());
        t = next;
        if done {
            break;
        }
    }
    for ((o, &cv), &qv) in out.iter_mut().zip(c).zip(q) {
        *o = cv * t / ((qv + lambda2) * t + lambda1);
    }
}

/// Cyclic block coordinate descent over the rows of `A`.
///
/// `warm` optionally seeds the iterate; the problem is strictly convex, so
/// the answer does not depend on it beyond solver tolerance. When `max_iter`
/// sweeps pass without meeting `tol` the last iterate is returned with
/// `converged = false`.
pub fn encode<T: Real>(
    x: &[Array1<T>],
    dicts: &[Dictionary<T>],
    params: &JscParams<T>,
    warm: Option<&Array2<T>>,
) -> Result<JointCode<T>, JscError> {
    let slack = T::one() + T::lit(ATOM_NORM_SLACK);
    for (s, ds) in dicts.iter().enumerate() {
        for (j, norm) in ds.column_norms().into_iter().enumerate() {
            if norm > slack {
                return Err(JscError::AtomNorm {
                    modality: s,
                    atom: j,
                    norm: norm.to_f64_lossy(),
                });
            }
        }
    }
    encode_unchecked(x, dicts, params, warm)
}

/// [`encode`] without the unit-norm check on atoms; the row solver handles
/// arbitrary column norms. Used where dictionaries are probed off the unit ball.
pub fn encode_unchecked<T: Real>(
    x: &[Array1<T>],
    dicts: &[Dictionary<T>],
    params: &JscParams<T>,
    warm: Option<&Array2<T>>,
) -> Result<JointCode<T>, JscError> {
    params.validate()?;
    let d = check_problem(x, dicts)?;
    let m = dicts.len();
    let mut q = Array2::<T>::zeros((d, m));
    for (s, ds) in dicts.iter().enumerate() {
        for (j, norm) in ds.column_norms().into_iter().enumerate() {
            q[[j, s]] = norm * norm;
        }
    }

    let mut a = match warm {
        Some(w) if w.dim() != (d, m) => {
            return Err(JscError::WarmStart {
                expected: (d, m),
                got: w.dim(),
            })
        }
        Some(w) => w.clone(),
        None => Array2::zeros((d, m)),
    };
    let mut residual: Vec<Array1<T>> = x
        .iter()
        .zip(dicts)
        .enumerate()
        .map(|(s, (xs, ds))| xs - &ds.atoms.dot(&a.column(s)))
        .collect();

    let mut c = vec![T::zero(); m];
    let mut qrow = vec![T::zero(); m];
    let mut row = vec![T::zero(); m];
    let mut update_row = |j: usize, a: &mut Array2<T>, residual: &mut [Array1<T>]| -> T {
        for s in 0..m {
            let atom = dicts[s].atoms.column(j);
            let atom = atom.as_slice().expect("atoms are contiguous");
            qrow[s] = q[[j, s]];
            c[s] = dot(atom, residual[s].as_slice().expect("owned vector")) + qrow[s] * a[[j, s]];
        }
        solve_row(&c, &qrow, params.lambda1, params.lambda2, &mut row);
        let mut change = T::zero();
        for s in 0..m {
            let delta = row[s] - a[[j, s]];
            if delta != T::zero() {
                let atom = dicts[s].atoms.column(j);
                let atom = atom.as_slice().expect("atoms are contiguous");
                for (r, &v) in residual[s].iter_mut().zip(atom) {
                    *r -= delta * v;
                }
                a[[j, s]] = row[s];
                change += delta * delta;
            }
        }
        change.sqrt()
    };

    // Sweeps alternate between the full row set and the rows that were
    // nonzero after the last full sweep; convergence is only declared on a
    // full sweep, so the stopping rule is the same as plain cyclic descent.
    let all_rows: Vec<usize> = (0..d).collect();
    let mut working: Vec<usize> = Vec::new();
    let mut full = true;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < params.max_iter {
        sweeps += 1;
        let rows = if full { &all_rows } else { &working };
        let mut max_change = T::zero();
        for &j in rows {
            max_change = max_change.max(update_row(j, &mut a, &mut residual));
        }
        if full {
            if max_change < params.tol {
                converged = true;
                break;
            }
            working = active_set(a.view());
            full = working.len() == d;
        } else if max_change < params.tol {
            full = true;
        }
    }

    let zero = T::lit(ZERO_ROW_THRESHOLD);
    for mut r in a.rows_mut() {
        if r.dot(&r).sqrt() < zero {
            r.fill(T::zero());
        }
    }
    let active_rows = active_set(a.view());
    Ok(JointCode {
        a,
        active_rows,
        converged,
        sweeps,
    })
}

/// Indices of the rows of `a` with nonzero norm.
pub fn active_set<T: Real>(a: ArrayView2<'_, T>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|v| *v != T::zero()))
        .map(|(j, _)| j)
        .collect()
}

/// Value of the joint sparse coding objective at `a`.
pub fn objective<T: Real>(x: &[Array1<T>], dicts: &[Dictionary<T>], a: ArrayView2<'_, T>, params: &JscParams<T>) -> T {
    let half = T::lit(0.5);
    let mut fit = T::zero();
    for (s, (xs, ds)) in x.iter().zip(dicts).enumerate() {
        let r = xs - &ds.atoms.dot(&a.column(s));
        fit += r.dot(&r);
    }
    let group: T = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
    let frob: T = a.iter().map(|v| *v * *v).sum();
    half * fit + params.lambda1 * group + half * params.lambda2 * frob
}

/// Gradient of the smooth part `½Σ‖x^s − D^s α^s‖² + (λ2/2)‖A‖²` with respect to `A`.
pub fn smooth_gradient<T: Real>(
    x: &[Array1<T>],
    dicts: &[Dictionary<T>],
    a: ArrayView2<'_, T>,
    lambda2: T,
) -> Array2<T> {
    let mut g = Array2::zeros(a.raw_dim());
    for (s, (xs, ds)) in x.iter().zip(dicts).enumerate() {
        let r = xs - &ds.atoms.dot(&a.column(s));
        let col = ds.atoms.t().dot(&r).mapv(|v| -v) + &a.column(s).mapv(|v| v * lambda2);
        g.column_mut(s).assign(&col);
    }
    g
}

/// Largest violation of the optimality conditions at `a`: for active rows
/// `‖∇_j + λ1 a_j/‖a_j‖‖`, for inactive rows `max(0, ‖∇_j‖ − λ1)`.
pub fn kkt_violation<T: Real>(
    x: &[Array1<T>],
    dicts: &[Dictionary<T>],
    a: ArrayView2<'_, T>,
    params: &JscParams<T>,
) -> T {
    let g = smooth_gradient(x, dicts, a, params.lambda2);
    let mut worst = T::zero();
    for (gr, ar) in g.rows().into_iter().zip(a.rows()) {
        let an = ar.dot(&ar).sqrt();
        let v = if an > T::zero() {
            let scale = params.lambda1 / an;
            gr.iter()
                .zip(ar.iter())
                .map(|(&gv, &av)| {
                    let e = gv + scale * av;
                    e * e
                })
                .sum::<T>()
                .sqrt()
        } else {
            (gr.dot(&gr).sqrt() - params.lambda1).max(T::zero())
        };
        worst = worst.max(v);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_dict(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dictionary<f64> {
        let raw = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        Dictionary::normalized(raw).unwrap()
    }

    fn tight() -> JscParams<f64> {
        JscParams {
            lambda1: 0.05,
            lambda2: 0.01,
            max_iter: 20_000,
            tol: 1e-13,
        }
    }

    #[test]
    fn zero_signal_gives_zero_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dicts = vec![random_dict(&mut rng, 5, 4), random_dict(&mut rng, 5, 4)];
        let x = vec![Array1::zeros(5), Array1::zeros(5)];
        let code = encode(&x, &dicts, &JscParams::default(), None).unwrap();
        assert!(code.a.iter().all(|v| *v == 0.0));
        assert!(code.active_rows.is_empty());
        assert!(code.converged);
    }

    #[test]
    fn orthonormal_kill_condition() {
        // identity dictionary, λ1 at least max |d_jᵀ x| kills every row
        let dict = Dictionary::new(Array2::eye(4)).unwrap();
        let x = vec![array![0.3, -0.2, 0.1, 0.05]];
        let params = JscParams {
            lambda1: 0.3,
            ..tight()
        };
        let code = encode(&x, std::slice::from_ref(&dict), &params, None).unwrap();
        assert!(code.active_rows.is_empty());
        // slightly below the threshold only the largest coefficient survives
        let params = JscParams {
            lambda1: 0.25,
            ..tight()
        };
        let code = encode(&x, &[dict], &params, None).unwrap();
        assert_eq!(code.active_rows, vec![0]);
        // closed form: (0.3 - 0.25) / (1 + λ2)
        assert!((code.a[[0, 0]] - 0.05 / 1.01).abs() < 1e-12);
    }

    #[test]
    fn objective_terms() {
        let dict = Dictionary::new(array![[1.0f64, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let x = vec![array![1.0, 2.0, 2.0]];
        let zero = Array2::zeros((2, 1));
        let p = JscParams::default();
        assert!((objective(&x, std::slice::from_ref(&dict), zero.view(), &p) - 4.5).abs() < 1e-15);
        let a = array![[1.0], [2.0]];
        // residual (0,0,2): 2; group: λ1·(1+2); frob: λ2/2·5
        let expect = 2.0 + 0.015 * 3.0 + 0.001 * 5.0;
        assert!((objective(&x, std::slice::from_ref(&dict), a.view(), &p) - expect).abs() < 1e-15);
        let xz = vec![Array1::zeros(3)];
        assert_eq!(objective(&xz, &[dict], zero.view(), &p), 0.0);
    }

    #[test]
    fn active_set_cases() {
        assert!(active_set(Array2::<f64>::zeros((5, 2)).view()).is_empty());
        let mut a = Array2::<f64>::zeros((5, 2));
        a[[3, 1]] = 0.1;
        assert_eq!(active_set(a.view()), vec![3]);
    }

    #[test]
    fn encode_satisfies_kkt_and_matches_active_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let dicts: Vec<_> = (0..3).map(|_| random_dict(&mut rng, 6, 8)).collect();
            let x: Vec<Array1<f64>> = (0..3)
                .map(|_| Array1::from_shape_fn(6, |_| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let p = tight();
            let code = encode(&x, &dicts, &p, None).unwrap();
            assert!(code.converged);
            assert!(kkt_violation(&x, &dicts, code.a.view(), &p) < 1e-9);
            for j in 0..8 {
                let nonzero = code.row_norm(j) > 0.0;
                assert_eq!(nonzero, code.active_rows.contains(&j));
                if nonzero {
                    assert!(code.a.row(j).iter().all(|v| *v != 0.0));
                }
            }
        }
    }

    #[test]
    fn objective_decreases_across_sweeps() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dicts: Vec<_> = (0..2).map(|_| random_dict(&mut rng, 6, 10)).collect();
        let x: Vec<Array1<f64>> = (0..2)
            .map(|_| Array1::from_shape_fn(6, |_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut prev = f64::INFINITY;
        for sweeps in 1..30 {
            let p = JscParams {
                max_iter: sweeps,
                ..tight()
            };
            let code = encode(&x, &dicts, &p, None).unwrap();
            let obj = objective(&x, &dicts, code.a.view(), &p);
            assert!(obj <= prev + 1e-12, "sweep {sweeps}: {obj} > {prev}");
            prev = obj;
        }
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dicts: Vec<_> = (0..2).map(|_| random_dict(&mut rng, 6, 6)).collect();
        let x: Vec<Array1<f64>> = (0..2)
            .map(|_| Array1::from_shape_fn(6, |_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let p = tight();
        let cold = encode(&x, &dicts, &p, None).unwrap();
        let init = Array2::from_shape_fn((6, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let warm = encode(&x, &dicts, &p, Some(&init)).unwrap();
        let diff = (&cold.a - &warm.a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6);
    }

    #[test]
    fn shrunken_atoms_use_secular_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut dicts: Vec<_> = (0..3).map(|_| random_dict(&mut rng, 5, 6)).collect();
        for (s, d) in dicts.iter_mut().enumerate() {
            d.atoms_mut().column_mut(2).mapv_inplace(|v| v * (0.3 + 0.2 * s as f64));
        }
        let x: Vec<Array1<f64>> = (0..3)
            .map(|_| Array1::from_shape_fn(5, |_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let p = tight();
        let code = encode(&x, &dicts, &p, None).unwrap();
        assert!(kkt_violation(&x, &dicts, code.a.view(), &p) < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dict = Dictionary::new(Array2::eye(3)).unwrap();
        let p = JscParams::default();
        assert!(matches!(
            encode(&[Array1::zeros(2)], std::slice::from_ref(&dict), &p, None),
            Err(JscError::SignalDim { .. })
        ));
        assert!(matches!(
            encode(&[Array1::zeros(3)], &[dict.clone(), dict.clone()], &p, None),
            Err(JscError::ModalityCount { .. })
        ));
        let long = Dictionary::new(Array2::eye(3) * 2.0).unwrap();
        assert!(matches!(
            encode(&[Array1::zeros(3)], &[long], &p, None),
            Err(JscError::AtomNorm { .. })
        ));
        let bad = JscParams {
            lambda2: 0.0,
            ..JscParams::default()
        };
        assert!(matches!(
            encode(&[Array1::zeros(3)], &[dict], &bad, None),
            Err(JscError::Params(_))
        ));
    }

    #[test]
    fn single_precision_solve() {
        let dict = Dictionary::<f32>::new(Array2::eye(3)).unwrap();
        let x = vec![array![1.0f32, 0.0, 0.0]];
        let code = encode(&x, &[dict], &JscParams::default(), None).unwrap();
        assert_eq!(code.active_rows, vec![0]);
        assert!((code.a[[0, 0]] - (1.0 - 0.015) / 1.002).abs() < 1e-6);
    }
}
