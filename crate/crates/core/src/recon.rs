//! Nonnegative regularised least squares:
//! `min_{p ≥ 0} ‖Mp − s‖² + λ₁‖p‖² + λ₂‖Δp‖²`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{dot, norm_sq, LinearOperator};
use crate::types::{GridSpec, ImageGrid, Sinogram};

/// How `lambda_tikhonov` and `lambda_laplacian` are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaScale {
    /// Used as given.
    Absolute,
    /// Multiplied by the largest eigenvalue of `MᵀM`.
    OperatorNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub lambda_tikhonov: f64,
    pub lambda_laplacian: f64,
    pub lambda_scale: LambdaScale,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub power_iters: usize,
    pub grid: GridSpec,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            lambda_tikhonov: 1e-2,
            lambda_laplacian: 1e-2,
            lambda_scale: LambdaScale::OperatorNorm,
            max_iters: 200,
            rel_tol: 1e-6,
            power_iters: 30,
            grid: GridSpec::square(128, 5e-3),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (name, v) in [("lambda_tikhonov", self.lambda_tikhonov), ("lambda_laplacian", self.lambda_laplacian)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(Error::Config(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        if self.max_iters == 0 || self.power_iters == 0 {
            return Err(Error::Config("max_iters and power_iters must be positive".into()));
        }
        Ok(())
    }

    /// Effective `(λ₁, λ₂)` for `op`.
    pub fn resolve_lambdas(&self, op: &dyn LinearOperator) -> (f64, f64) {
        match self.lambda_scale {
            LambdaScale::Absolute => (self.lambda_tikhonov, self.lambda_laplacian),
            LambdaScale::OperatorNorm => {
                let mu = power_iteration(op.domain_shape(), self.power_iters, |x| op.apply_adjoint(&op.apply(x))).0;
                (self.lambda_tikhonov * mu, self.lambda_laplacian * mu)
            }
        }
    }
}

/// Five-point Laplacian; an out-of-range neighbour takes the centre value.
pub fn laplacian(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = p.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let v = p[[r, c]];
            let up = if r > 0 { p[[r - 1, c]] } else { v };
            let down = if r + 1 < h { p[[r + 1, c]] } else { v };
            let left = if c > 0 { p[[r, c - 1]] } else { v };
            let right = if c + 1 < w { p[[r, c + 1]] } else { v };
            out[[r, c]] = up + down + left + right - 4.0 * v;
        }
    }
    out
}

pub fn laplacian_apply(p: &ImageGrid) -> ImageGrid {
    ImageGrid::new(laplacian(p.pixels()), p.extent_m()).expect("same grid")
}

/// Largest eigenvalue of a symmetric positive semidefinite map and its
/// eigenvector estimate.
pub fn power_iteration(
    shape: (usize, usize),
    iters: usize,
    apply: impl Fn(&Array2<f64>) -> Array2<f64>,
) -> (f64, Array2<f64>) {
    let mut x = Array2::from_shape_fn(shape, |(r, c)| 1.0 + 0.1 * ((r * shape.1 + c) as f64 * 0.7).sin());
    x /= norm_sq(&x).sqrt();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = apply(&x);
        lambda = dot(&x, &y);
        let n = norm_sq(&y).sqrt();
        if n == 0.0 {
            return (0.0, x);
        }
        x = y / n;
    }
    (lambda, x)
}

fn check_shapes(s: &Array2<f64>, op: &dyn LinearOperator, grid: &GridSpec) -> Result<()> {
    if s.dim() != op.range_shape() {
        return Err(Error::Shape(format!(
            "sinogram is {:?} but the operator produces {:?}",
            s.dim(),
            op.range_shape()
        )));
    }
    if grid.shape() != op.domain_shape() {
        return Err(Error::Shape(format!(
            "grid is {:?} but the operator acts on {:?}",
            grid.shape(),
            op.domain_shape()
        )));
    }
    Ok(())
}

struct Problem<'a> {
    op: &'a dyn LinearOperator,
    s: &'a Array2<f64>,
    l1: f64,
    l2: f64,
}

impl Problem<'_> {
    /// Objective given `p` and `Mp`.
    fn value(&self, p: &Array2<f64>, mp: &Array2<f64>) -> f64 {
        let r = mp - self.s;
        let mut f = norm_sq(&r) + self.l1 * norm_sq(p);
        if self.l2 > 0.0 {
            f += self.l2 * norm_sq(&laplacian(p));
        }
        f
    }

    /// Gradient given `p` and `Mp`.
    fn gradient(&self, p: &Array2<f64>, mp: &Array2<f64>) -> Array2<f64> {
        let mut g = self.op.apply_adjoint(&(mp - self.s));
        g.scaled_add(self.l1, p);
        if self.l2 > 0.0 {
            g.scaled_add(self.l2, &laplacian(&laplacian(p)));
        }
        g * 2.0
    }

    /// Half-Hessian `MᵀM + λ₁I + λ₂Δ²`.
    fn half_hessian(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = self.op.apply_adjoint(&self.op.apply(x));
        y.scaled_add(self.l1, x);
        if self.l2 > 0.0 {
            y.scaled_add(self.l2, &laplacian(&laplacian(x)));
        }
        y
    }
}

/// Objective value `‖Mp − s‖² + λ₁‖p‖² + λ₂‖Δp‖²` with the configured
/// regularisation.
pub fn objective(p: &ImageGrid, s: &Sinogram, op: &dyn LinearOperator, cfg: &ReconConfig) -> Result<f64> {
    check_shapes(s.data(), op, &p.spec())?;
    let (l1, l2) = cfg.resolve_lambdas(op);
    let prob = Problem {
        op,
        s: s.data(),
        l1,
        l2,
    };
    Ok(prob.value(p.pixels(), &op.apply(p.pixels())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Accelerated,
    /// Plain projected gradient from the last accepted iterate.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub kind: StepKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconTrace {
    pub lambda_tikhonov: f64,
    pub lambda_laplacian: f64,
    /// Lipschitz constant of the gradient used for the step size.
    pub lipschitz: f64,
    pub initial_objective: f64,
    pub iterations: Vec<IterRecord>,
    pub converged: bool,
}

impl ReconTrace {
    pub fn final_objective(&self) -> f64 {
        self.iterations.last().map_or(self.initial_objective, |r| r.objective)
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: ImageGrid,
    pub trace: ReconTrace,
}

fn project(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Monotone accelerated projected gradient from `p = 0`.
pub fn reconstruct(s: &Sinogram, op: &dyn LinearOperator, cfg: &ReconConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    check_shapes(s.data(), op, &cfg.grid)?;
    let (l1, l2) = cfg.resolve_lambdas(op);
    let prob = Problem {
        op,
        s: s.data(),
        l1,
        l2,
    };
    let shape = op.domain_shape();
    let mut lip = 2.0 * 1.05 * power_iteration(shape, cfg.power_iters, |x| prob.half_hessian(x)).0;
    let mut trace = ReconTrace {
        lambda_tikhonov: l1,
        lambda_laplacian: l2,
        lipschitz: lip,
        initial_objective: norm_sq(s.data()),
        iterations: Vec::new(),
        converged: false,
    };
    let mut x = Array2::zeros(shape);
    if lip <= 0.0 {
        // M = 0 and no regularisation: every p ≥ 0 is optimal
        trace.converged = true;
        return Ok(Reconstruction {
            image: ImageGrid::new(x, cfg.grid.extent_m)?,
            trace,
        });
    }
    let mut mx = Array2::zeros(s.data().dim());
    let mut fx = trace.initial_objective;
    let mut y = x.clone();
    let mut my = mx.clone();
    let mut t = 1.0f64;
    let non_finite = |trace: &ReconTrace, k: usize| {
        let tail: Vec<String> = trace.iterations.iter().rev().take(5).map(|r| format!("{:.6e}", r.objective)).collect();
        Error::Numerical(format!(
            "objective became non-finite at iteration {k} (recent objectives, newest first: [{}])",
            tail.join(", ")
        ))
    };
    for k in 1..=cfg.max_iters {
        let g = prob.gradient(&y, &my);
        let mut z = &y - &(g / lip);
        project(&mut z);
        let mut mz = op.apply(&z);
        let mut fz = prob.value(&z, &mz);
        if !fz.is_finite() {
            return Err(non_finite(&trace, k));
        }
        let mut kind = StepKind::Accelerated;
        if fz > fx {
            kind = StepKind::Fallback;
            let gx = prob.gradient(&x, &mx);
            loop {
                z = &x - &(&gx / lip);
                project(&mut z);
                mz = op.apply(&z);
                fz = prob.value(&z, &mz);
                if !fz.is_finite() {
                    return Err(non_finite(&trace, k));
                }
                // a valid 1/L step never increases the objective
                if fz <= fx + 1e-12 * fx.abs() || lip > 1e300 {
                    break;
                }
                lip *= 2.0;
                trace.lipschitz = lip;
            }
            if fz > fx {
                fz = fx;
                z.assign(&x);
                mz.assign(&mx);
            }
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = if kind == StepKind::Accelerated { (t - 1.0) / t_next } else { 0.0 };
        y = &z + &((&z - &x) * beta);
        my = &mz + &((&mz - &mx) * beta);
        let change = (fx - fz).abs() / fx.abs().max(f64::MIN_POSITIVE);
        x = z;
        mx = mz;
        fx = fz;
        t = if kind == StepKind::Accelerated { t_next } else { 1.0 };
        trace.iterations.push(IterRecord {
            iter: k,
            objective: fx,
            kind,
        });
        if change < cfg.rel_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(Reconstruction {
        image: ImageGrid::new(x, cfg.grid.extent_m)?,
        trace,
    })
}

/// Gradient of the objective at `p`, used for optimality checks.
pub fn objective_gradient(p: &Array2<f64>, s: &Array2<f64>, op: &dyn LinearOperator, l1: f64, l2: f64) -> Array2<f64> {
    let prob = Problem { op, s, l1, l2 };
    prob.gradient(p, &op.apply(p))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ForwardOperator;
    use crate::operator::{DenseOperator, IdentityOperator};
    use crate::rng::{seeded_rng, RngSeed};
    use crate::types::ArrayGeometry;

    fn rand(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut r = seeded_rng(RngSeed(seed), "recon");
        Array2::from_shape_fn(shape, |_| r.normal())
    }

    fn abs_cfg(n: usize, l1: f64, l2: f64) -> ReconConfig {
        ReconConfig {
            lambda_tikhonov: l1,
            lambda_laplacian: l2,
            lambda_scale: LambdaScale::Absolute,
            max_iters: 500,
            rel_tol: 1e-12,
            grid: GridSpec::square(n, 1e-3),
            ..Default::default()
        }
    }

    #[test]
    fn laplacian_stencil_and_constants() {
        let c = Array2::from_elem((5, 6), 3.5);
        assert!(laplacian(&c).iter().all(|&v| v == 0.0));
        let mut e = Array2::zeros((5, 5));
        e[[2, 2]] = 1.0;
        let l = laplacian(&e);
        assert_eq!(l[[2, 2]], -4.0);
        for (r, c) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(l[[r, c]], 1.0);
        }
        assert_eq!(l.iter().filter(|&&v| v != 0.0).count(), 5);
    }

    #[test]
    fn laplacian_is_self_adjoint() {
        for seed in 0..5 {
            let x = rand((7, 9), seed);
            let y = rand((7, 9), seed + 100);
            let a = dot(&laplacian(&x), &y);
            let b = dot(&x, &laplacian(&y));
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
        }
    }

    #[test]
    fn objective_basic_values() {
        let op = IdentityOperator { shape: (4, 4) };
        let s = Sinogram::new(rand((4, 4), 1), 1.0).unwrap();
        let zero = ImageGrid::zeros(&GridSpec::square(4, 1e-3));
        let cfg = abs_cfg(4, 0.3, 0.2);
        let f0 = objective(&zero, &s, &op, &cfg).unwrap();
        assert!((f0 - norm_sq(s.data())).abs() < 1e-12);
        let s2 = s.with_data(s.data() * 2.0).unwrap();
        assert!((objective(&zero, &s2, &op, &cfg).unwrap() - 4.0 * f0).abs() < 1e-12);
        let bad = Sinogram::new(rand((3, 4), 1), 1.0).unwrap();
        assert!(objective(&zero, &bad, &op, &cfg).is_err());
    }

    #[test]
    fn dense_preimage_has_zero_objective() {
        let geom = ArrayGeometry {
            n_transducers: 16,
            ..ArrayGeometry::desk_64()
        };
        let grid = GridSpec::square(16, 5e-3);
        let op = ForwardOperator::new(geom, grid, 256, 1466).unwrap();
        let dense = DenseOperator::materialize(&op);
        let p = rand((16, 16), 2).mapv(f64::abs);
        let s = Sinogram::new(dense.apply(&p), 40e6).unwrap();
        let img = ImageGrid::new(p, 5e-3).unwrap();
        let cfg = ReconConfig {
            grid,
            ..abs_cfg(16, 0.0, 0.0)
        };
        let f = objective(&img, &s, &dense, &cfg).unwrap();
        assert!(f <= 1e-20 * norm_sq(s.data()).max(1.0), "{f}");
    }

    #[test]
    fn identity_recovers_nonnegative_data_and_projects_negative() {
        let op = IdentityOperator { shape: (8, 8) };
        let pos = rand((8, 8), 3).mapv(f64::abs);
        let s = Sinogram::new(pos.clone(), 1.0).unwrap();
        // objective gaps of rel_tol translate to pixel errors of order sqrt(rel_tol)
        let cfg = ReconConfig {
            rel_tol: 1e-14,
            ..abs_cfg(8, 0.0, 0.0)
        };
        let out = reconstruct(&s, &op, &cfg).unwrap();
        let err = (out.image.pixels() - &pos).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-6, "{err}");
        let mixed = rand((8, 8), 4);
        let s = Sinogram::new(mixed.clone(), 1.0).unwrap();
        let out = reconstruct(&s, &op, &cfg).unwrap();
        let expect = mixed.mapv(|v| v.max(0.0));
        let err = (out.image.pixels() - &expect).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err < 1e-6, "{err}");
    }

    fn small_problem() -> (DenseOperator, Array2<f64>) {
        let m = rand((60, 36), 5);
        let op = DenseOperator {
            matrix: m,
            domain: (6, 6),
            range: (6, 10),
        };
        let s = rand((6, 10), 6);
        (op, s)
    }

    #[test]
    fn objective_is_monotone_and_iterates_nonnegative() {
        let (op, s) = small_problem();
        let s = Sinogram::new(s, 1.0).unwrap();
        let cfg = ReconConfig {
            grid: GridSpec::square(6, 1e-3),
            ..abs_cfg(6, 0.5, 0.1)
        };
        let out = reconstruct(&s, &op, &cfg).unwrap();
        let mut prev = out.trace.initial_objective;
        for r in &out.trace.iterations {
            assert!(r.objective <= prev + 1e-10, "iteration {} rose", r.iter);
            prev = r.objective;
        }
        assert!(out.image.is_nonnegative());
    }

    #[test]
    fn kkt_conditions_hold_at_convergence() {
        let (op, s) = small_problem();
        let cfg = ReconConfig {
            grid: GridSpec::square(6, 1e-3),
            max_iters: 5000,
            rel_tol: 1e-14,
            ..abs_cfg(6, 0.5, 0.1)
        };
        let out = reconstruct(&Sinogram::new(s.clone(), 1.0).unwrap(), &op, &cfg).unwrap();
        let p = out.image.pixels();
        let g = objective_gradient(p, &s, &op, 0.5, 0.1);
        let scale = objective_gradient(&Array2::zeros((6, 6)), &s, &op, 0.5, 0.1)
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        let tol = 1e-6 * scale;
        let mut active = 0;
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            if pv > 0.0 {
                assert!(gv.abs() <= tol, "free pixel gradient {gv}");
            } else {
                active += 1;
                assert!(gv >= -tol, "active pixel gradient {gv}");
            }
        }
        assert!(active > 0 && active < 36, "test should exercise both cases");
    }

    #[test]
    fn point_target_centroid_is_recovered() {
        let grid = GridSpec::square(32, 5e-3);
        let op = ForwardOperator::new(ArrayGeometry::desk_64(), grid, 256, 1466).unwrap();
        let mut p = Array2::zeros((32, 32));
        p[[11, 19]] = 1.0;
        let s = op.apply_forward(&ImageGrid::new(p, 5e-3).unwrap()).unwrap();
        let cfg = ReconConfig {
            grid,
            max_iters: 100,
            lambda_tikhonov: 1e-3,
            lambda_laplacian: 1e-4,
            ..Default::default()
        };
        let out = reconstruct(&s, &op, &cfg).unwrap();
        let img = out.image.pixels();
        let (mut wsum, mut rsum, mut csum) = (0.0, 0.0, 0.0);
        let peak = img.fold(0.0f64, |m, &v| m.max(v));
        for ((r, c), &v) in img.indexed_iter() {
            if v >= 0.5 * peak {
                wsum += v;
                rsum += v * r as f64;
                csum += v * c as f64;
            }
        }
        let (rc, cc) = (rsum / wsum, csum / wsum);
        assert!(((rc - 11.0).powi(2) + (cc - 19.0).powi(2)).sqrt() <= 1.0, "centroid ({rc}, {cc})");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let op = IdentityOperator { shape: (4, 4) };
        let s = Sinogram::new(rand((4, 4), 1), 1.0).unwrap();
        assert!(reconstruct(&s, &op, &abs_cfg(5, 0.0, 0.0)).is_err());
    }
}
