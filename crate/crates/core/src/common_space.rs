//! Shared latent space for both modalities.
//!
//! Modality A is sparse-coded on a basis (`X ≈ B·S`) and carried into the
//! latent space by a transform (`X′ = R·S`); modality B is factorized
//! (`Y ≈ U·Y′`). With quantizer reconstructions `CP`, `DQ` held fixed the
//! mapping objective is
//!
//! ```text
//! ‖X − BS‖² + ρ|S|₁ + η‖Y − UY′‖² + λ‖Y′ − RS‖² + ‖RS − CP‖² + ‖Y′ − DQ‖²
//! ```
//!
//! with every column of `B`, `U`, `R` inside the unit ball. During
//! initialization the last two terms are absent; every block update takes
//! the reconstructions as an `Option` for that reason.

use nalgebra::{DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DenseMatrix, Modality, PairedDataset};
use crate::error::{Error, Result};
use crate::solvers::{
    project_columns, solve_lasso, solve_qcls, LassoProblem, QclsProblem, SolverBudget,
};

/// Ridge floor used whenever a normal-equation matrix can be singular.
pub const RIDGE_FLOOR: f64 = 1e-8;

/// Columns per independent sparse-coding batch. Fixed so results do not
/// depend on the thread count.
const LASSO_BATCH: usize = 256;

const QUERY_LASSO_MAX_ITER: usize = 1000;
const QUERY_LASSO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingHyper {
    /// Sparsity weight.
    pub rho: f64,
    /// Text reconstruction weight.
    pub eta: f64,
    /// Image/text alignment weight in the latent space.
    pub lambda: f64,
}

impl Default for MappingHyper {
    fn default() -> Self {
        MappingHyper {
            rho: 0.3,
            eta: 0.3,
            lambda: 0.3,
        }
    }
}

impl MappingHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("eta", self.eta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be a finite value ≥ 0")));
            }
        }
        Ok(())
    }
}

/// Statistics fitted on training data and reapplied to every query.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub mean_a: DVector<f64>,
    pub mean_b: DVector<f64>,
    /// `d_pca × D_I`, orthonormal rows.
    pub pca: DenseMatrix,
}

impl Preprocessing {
    pub fn raw_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::A => self.mean_a.len(),
            Modality::B => self.mean_b.len(),
        }
    }

    fn transform_columns(&self, modality: Modality, raw: &DenseMatrix) -> Result<DenseMatrix> {
        let mean = match modality {
            Modality::A => &self.mean_a,
            Modality::B => &self.mean_b,
        };
        if raw.nrows() != mean.len() {
            return Err(Error::Shape(format!(
                "modality {modality} features have {} rows, model expects {}",
                raw.nrows(),
                mean.len()
            )));
        }
        let mut centered = raw.clone();
        for mut col in centered.column_iter_mut() {
            col -= mean;
        }
        Ok(match modality {
            Modality::A => &self.pca * centered,
            Modality::B => centered,
        })
    }

    /// Centers, projects (modality A) and unit-normalizes every column.
    pub fn apply(&self, modality: Modality, raw: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = self.transform_columns(modality, raw)?;
        normalize_columns(&mut out)?;
        Ok(out)
    }

    pub fn apply_query(&self, modality: Modality, raw: &DVector<f64>) -> Result<DVector<f64>> {
        let raw = DenseMatrix::from_column_slice(raw.len(), 1, raw.as_slice());
        let out = self.transform_columns(modality, &raw)?;
        let norm = out.norm();
        if !(norm > 0.0) {
            return Err(Error::ZeroNormQuery);
        }
        Ok(out.column(0) / norm)
    }
}

fn normalize_columns(m: &mut DenseMatrix) -> Result<()> {
    for (item, mut col) in m.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) {
            return Err(Error::ZeroNormColumn { item });
        }
        col /= norm;
    }
    Ok(())
}

/// Principal axes of the columns of `x` (already centered), as the rows of
/// a `dim × rows(x)` matrix ordered by decreasing variance. Each axis is
/// signed so its largest-magnitude entry is positive.
pub fn principal_axes(x: &DenseMatrix, dim: usize) -> DenseMatrix {
    let n = x.ncols().max(1) as f64;
    let cov = (x * x.transpose()) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut axes = DenseMatrix::zeros(dim, x.nrows());
    for (row, &idx) in order.iter().take(dim).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let pivot = v.iter().copied().fold(0.0_f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if pivot < 0.0 {
            v = -v;
        }
        axes.set_row(row, &v.transpose());
    }
    axes
}

/// Mean-centers both modalities, projects modality A onto its top
/// `target_pca_dim` principal axes, and scales every column to unit length.
pub fn preprocess(ds: &PairedDataset, target_pca_dim: usize) -> Result<(PairedDataset, Preprocessing)> {
    let n = ds.len();
    let a = ds.features_a();
    if target_pca_dim == 0 || target_pca_dim > a.nrows() {
        return Err(Error::Config(format!(
            "PCA dimension {target_pca_dim} must be in 1..={}",
            a.nrows()
        )));
    }
    if n < target_pca_dim {
        return Err(Error::Config(format!(
            "{n} items is fewer than the PCA dimension {target_pca_dim}"
        )));
    }
    let mean_a = a.column_mean();
    let mean_b = ds.features_b().column_mean();
    let mut centered_a = a.clone();
    for mut col in centered_a.column_iter_mut() {
        col -= &mean_a;
    }
    let pca = principal_axes(&centered_a, target_pca_dim);
    let stats = Preprocessing { mean_a, mean_b, pca };
    let out_a = stats.apply(Modality::A, a)?;
    let out_b = stats.apply(Modality::B, ds.features_b())?;
    let out = PairedDataset::new(out_a, out_b, ds.labels().map(<[_]>::to_vec))?;
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommonSpaceModel {
    /// `d_pca × b` sparse-coding basis.
    pub basis: DenseMatrix,
    /// `D_T × D` text factor.
    pub factor_u: DenseMatrix,
    /// `D × b` transform from sparse codes into the latent space.
    pub transform_r: DenseMatrix,
    pub preprocessing: Preprocessing,
    pub hyper: MappingHyper,
}

/// Per-item training variables of the mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingState {
    /// `b × N`
    pub sparse_codes: DenseMatrix,
    /// `D × N`, the text items in the latent space.
    pub latent_b: DenseMatrix,
}

/// Fixed quantizer reconstructions `CP` (modality A) and `DQ` (modality B).
#[derive(Debug, Clone, Copy)]
pub struct QuantTargets<'a> {
    pub recon_a: &'a DenseMatrix,
    pub recon_b: &'a DenseMatrix,
}

/// Training features after preprocessing.
#[derive(Debug, Clone, Copy)]
pub struct MappingData<'a> {
    /// `d_pca × N`
    pub x: &'a DenseMatrix,
    /// `D_T × N`
    pub y: &'a DenseMatrix,
}

impl CommonSpaceModel {
    /// Basis columns are drawn from training items (with light noise), `U`
    /// and `R` are Gaussian; all three are then made feasible.
    pub fn initialize<R: Rng>(
        data: MappingData<'_>,
        latent_dim: usize,
        num_bases: usize,
        hyper: MappingHyper,
        preprocessing: Preprocessing,
        rng: &mut R,
    ) -> Result<Self> {
        hyper.validate()?;
        if latent_dim == 0 || num_bases == 0 {
            return Err(Error::Config("latent dimension and basis count must be positive".into()));
        }
        let n = data.x.ncols();
        if n == 0 {
            return Err(Error::Config("cannot initialize from an empty dataset".into()));
        }
        let d = data.x.nrows();
        let mut basis = DenseMatrix::zeros(d, num_bases);
        for j in 0..num_bases {
            let src = rng.random_range(0..n);
            let mut col = data.x.column(src).into_owned();
            for v in col.iter_mut() {
                *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
            basis.set_column(j, &col);
        }
        let dt = data.y.nrows();
        let mut factor_u =
            DenseMatrix::from_fn(dt, latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal))
                / (dt as f64).sqrt();
        project_columns(&mut factor_u, 1.0);
        let mut transform_r =
            DenseMatrix::from_fn(latent_dim, num_bases, |_, _| rng.sample::<f64, _>(StandardNormal))
                / (latent_dim as f64).sqrt();
        project_columns(&mut transform_r, 1.0);
        Ok(CommonSpaceModel {
            basis,
            factor_u,
            transform_r,
            preprocessing,
            hyper,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.transform_r.nrows()
    }

    pub fn num_bases(&self) -> usize {
        self.basis.ncols()
    }

    pub fn initial_state(&self, num_items: usize) -> MappingState {
        MappingState {
            sparse_codes: DenseMatrix::zeros(self.num_bases(), num_items),
            latent_b: DenseMatrix::zeros(self.latent_dim(), num_items),
        }
    }

    /// Images in the latent space, `X′ = R·S`.
    pub fn latent_a(&self, state: &MappingState) -> DenseMatrix {
        &self.transform_r * &state.sparse_codes
    }

    /// Largest squared column norm over `B`, `U`, `R`.
    pub fn max_column_norm_sq(&self) -> f64 {
        [&self.basis, &self.factor_u, &self.transform_r]
            .iter()
            .flat_map(|m| m.column_iter().map(|c| c.norm_squared()))
            .fold(0.0, f64::max)
    }
}

/// Exact value of the mapping objective (with the two quantization terms
/// when `quant` is given).
pub fn mapping_objective(
    model: &CommonSpaceModel,
    state: &MappingState,
    data: MappingData<'_>,
    quant: Option<QuantTargets<'_>>,
) -> f64 {
    let h = model.hyper;
    let s = &state.sparse_codes;
    let yl = &state.latent_b;
    let rs = &model.transform_r * s;
    let mut f = (data.x - &model.basis * s).norm_squared()
        + h.rho * s.lp_norm(1)
        + h.eta * (data.y - &model.factor_u * yl).norm_squared()
        + h.lambda * (yl - &rs).norm_squared();
    if let Some(q) = quant {
        f += (&rs - q.recon_a).norm_squared() + (yl - q.recon_b).norm_squared();
    }
    f
}

/// Closed-form minimizer over `Y′`:
/// `(ηUᵀU + (λ+1)I)⁻¹ (DQ + ηUᵀY + λRS)`; without quantizer targets the
/// `DQ` term and the `+1` are dropped.
pub fn update_latent_text(
    model: &CommonSpaceModel,
    state: &MappingState,
    data: MappingData<'_>,
    recon_b: Option<&DenseMatrix>,
) -> Result<DenseMatrix> {
    let h = model.hyper;
    let d = model.latent_dim();
    let u = &model.factor_u;
    let coupling = if recon_b.is_some() { 1.0 } else { 0.0 };
    let mut diag = h.lambda + coupling;
    if diag == 0.0 {
        diag = RIDGE_FLOOR;
    }
    let lhs = u.transpose() * u * h.eta + DenseMatrix::identity(d, d) * diag;
    let mut rhs = u.transpose() * data.y * h.eta;
    if h.lambda != 0.0 {
        rhs += (&model.transform_r * &state.sparse_codes) * h.lambda;
    }
    if let Some(dq) = recon_b {
        rhs += dq;
    }
    let chol = lhs
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("latent text system is not positive definite".into()))?;
    let out = chol.solve(&rhs);
    crate::data::ensure_finite(&out).map_err(|_| Error::NonFiniteIterate("latent text update"))?;
    Ok(out)
}

/// Weight of the combined coupling term on `R·S` and its target:
/// `λ‖Y′ − RS‖² + ‖CP − RS‖² = (λ+1)‖T − RS‖² + const` with
/// `T = (CP + λY′)/(λ+1)`.
fn coupling_target(
    model: &CommonSpaceModel,
    state: &MappingState,
    recon_a: Option<&DenseMatrix>,
) -> Option<(f64, DenseMatrix)> {
    let lambda = model.hyper.lambda;
    let weight = lambda + if recon_a.is_some() { 1.0 } else { 0.0 };
    if weight == 0.0 {
        return None;
    }
    let mut target = &state.latent_b * lambda;
    if let Some(cp) = recon_a {
        target += cp;
    }
    Some((weight, target / weight))
}

/// The stacked sparse-coding problem for `S`: design `[√(1/w)·B ; R]`,
/// targets `[√(1/w)·X ; T]`, L1 weight `ρ/w`, where `w` is the coupling
/// weight. Without any coupling it is plain sparse coding of `X` on `B`.
pub fn stacked_sparse_problem(
    model: &CommonSpaceModel,
    state: &MappingState,
    x: &DenseMatrix,
    recon_a: Option<&DenseMatrix>,
) -> (DenseMatrix, DenseMatrix, f64) {
    let rho = model.hyper.rho;
    match coupling_target(model, state, recon_a) {
        None => (model.basis.clone(), x.clone(), rho),
        Some((w, target)) => {
            let scale = (1.0 / w).sqrt();
            let d = model.basis.nrows();
            let l = model.latent_dim();
            let b = model.num_bases();
            let n = x.ncols();
            let mut design = DenseMatrix::zeros(d + l, b);
            design.view_mut((0, 0), (d, b)).copy_from(&(&model.basis * scale));
            design.view_mut((d, 0), (l, b)).copy_from(&model.transform_r);
            let mut targets = DenseMatrix::zeros(d + l, n);
            targets.view_mut((0, 0), (d, n)).copy_from(&(x * scale));
            targets.view_mut((d, 0), (l, n)).copy_from(&target);
            (design, targets, rho / w)
        }
    }
}

pub fn update_sparse_codes(
    model: &CommonSpaceModel,
    state: &MappingState,
    data: MappingData<'_>,
    recon_a: Option<&DenseMatrix>,
    budget: &SolverBudget,
) -> Result<DenseMatrix> {
    let (design, targets, weight) = stacked_sparse_problem(model, state, data.x, recon_a);
    solve_lasso_batched(&design, &targets, weight, &state.sparse_codes, budget.lasso_max_iter, budget.lasso_tol)
}

fn solve_lasso_batched(
    design: &DenseMatrix,
    targets: &DenseMatrix,
    weight: f64,
    init: &DenseMatrix,
    max_iter: usize,
    tol: f64,
) -> Result<DenseMatrix> {
    let n = targets.ncols();
    let starts: Vec<usize> = (0..n).step_by(LASSO_BATCH).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let len = LASSO_BATCH.min(n - start);
            let t = targets.columns(start, len).into_owned();
            let s0 = init.columns(start, len).into_owned();
            let p = LassoProblem {
                design,
                targets: &t,
                l1_weight: weight,
            };
            solve_lasso(&p, &s0, max_iter, tol).map(|o| o.solution)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DenseMatrix::zeros(design.ncols(), n);
    for (&start, part) in starts.iter().zip(parts) {
        out.columns_mut(start, part.ncols()).copy_from(&part);
    }
    Ok(out)
}

/// Updated `(B, U, R)`, each a warm-started constrained least-squares
/// solve. `R` is left unchanged when no term involves it.
pub fn update_dictionaries(
    model: &CommonSpaceModel,
    state: &MappingState,
    data: MappingData<'_>,
    recon_a: Option<&DenseMatrix>,
    budget: &SolverBudget,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let s = &state.sparse_codes;
    let sst = s * s.transpose();

    let u_problem = QclsProblem::new(data.y, &state.latent_b, 1.0)?;
    let u = solve_qcls(&u_problem, &model.factor_u, budget.qcls_max_iter, budget.qcls_tol)?.solution;

    let b_problem = QclsProblem::from_gram(sst.clone(), data.x * s.transpose(), data.x.norm_squared(), 1.0)?;
    let b = solve_qcls(&b_problem, &model.basis, budget.qcls_max_iter, budget.qcls_tol)?.solution;

    let r = match coupling_target(model, state, recon_a) {
        None => model.transform_r.clone(),
        Some((_, target)) => {
            let cross = &target * s.transpose();
            let r_problem = QclsProblem::from_gram(sst, cross, target.norm_squared(), 1.0)?;
            solve_qcls(&r_problem, &model.transform_r, budget.qcls_max_iter, budget.qcls_tol)?.solution
        }
    };
    Ok((b, u, r))
}

/// One pass of the mapping updates in the order `Y′, S, U, B, R`.
pub fn mapping_round(
    model: &mut CommonSpaceModel,
    state: &mut MappingState,
    data: MappingData<'_>,
    quant: Option<QuantTargets<'_>>,
    budget: &SolverBudget,
) -> Result<()> {
    state.latent_b = update_latent_text(model, state, data, quant.map(|q| q.recon_b))?;
    state.sparse_codes = update_sparse_codes(model, state, data, quant.map(|q| q.recon_a), budget)?;
    let (b, u, r) = update_dictionaries(model, state, data, quant.map(|q| q.recon_a), budget)?;
    model.basis = b;
    model.factor_u = u;
    model.transform_r = r;
    Ok(())
}

/// Sparse code of preprocessed modality-A columns on the basis:
/// `argmin ‖x − Bs‖² + ρ|s|₁` per column.
pub fn sparse_code_queries(model: &CommonSpaceModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.nrows() != model.basis.nrows() {
        return Err(Error::Shape(format!(
            "query has {} rows, basis expects {}",
            x.nrows(),
            model.basis.nrows()
        )));
    }
    let init = DenseMatrix::zeros(model.num_bases(), x.ncols());
    solve_lasso_batched(&model.basis, x, model.hyper.rho, &init, QUERY_LASSO_MAX_ITER, QUERY_LASSO_TOL)
}

/// Latent embedding `R·s*` of preprocessed modality-A columns.
pub fn embed_a(model: &CommonSpaceModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(&model.transform_r * sparse_code_queries(model, x)?)
}

/// Latent embedding `(UᵀU + δI)⁻¹Uᵀy` of preprocessed modality-B columns.
pub fn embed_b(model: &CommonSpaceModel, y: &DenseMatrix) -> Result<DenseMatrix> {
    let u = &model.factor_u;
    if y.nrows() != u.nrows() {
        return Err(Error::Shape(format!(
            "query has {} rows, text factor expects {}",
            y.nrows(),
            u.nrows()
        )));
    }
    let d = u.ncols();
    let lhs = u.transpose() * u + DenseMatrix::identity(d, d) * RIDGE_FLOOR;
    let chol = lhs
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("text query normal equations".into()))?;
    Ok(chol.solve(&(u.transpose() * y)))
}

/// Embeds preprocessed columns of either modality.
pub fn embed(model: &CommonSpaceModel, modality: Modality, features: &DenseMatrix) -> Result<DenseMatrix> {
    match modality {
        Modality::A => embed_a(model, features),
        Modality::B => embed_b(model, features),
    }
}

/// Preprocesses and embeds one raw query vector.
pub fn embed_query(model: &CommonSpaceModel, modality: Modality, raw: &DVector<f64>) -> Result<DVector<f64>> {
    let q = model.preprocessing.apply_query(modality, raw)?;
    let q = DenseMatrix::from_column_slice(q.len(), 1, q.as_slice());
    Ok(embed(model, modality, &q)?.column(0).into_owned())
}

/// Preprocesses and embeds raw feature columns.
pub fn embed_raw(model: &CommonSpaceModel, modality: Modality, raw: &DenseMatrix) -> Result<DenseMatrix> {
    let pre = model.preprocessing.apply(modality, raw)?;
    embed(model, modality, &pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::{lasso_optimality_violation, qcls_objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn identity_preprocessing(da: usize, db: usize) -> Preprocessing {
        Preprocessing {
            mean_a: DVector::zeros(da),
            mean_b: DVector::zeros(db),
            pca: DenseMatrix::identity(da, da),
        }
    }

    struct Fixture {
        model: CommonSpaceModel,
        state: MappingState,
        x: DenseMatrix,
        y: DenseMatrix,
        cp: DenseMatrix,
        dq: DenseMatrix,
    }

    impl Fixture {
        fn data(&self) -> MappingData<'_> {
            MappingData { x: &self.x, y: &self.y }
        }
        fn quant(&self) -> QuantTargets<'_> {
            QuantTargets {
                recon_a: &self.cp,
                recon_b: &self.dq,
            }
        }
    }

    fn fixture(seed: u64, hyper: MappingHyper) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dt, l, b, n) = (6, 5, 3, 8, 12);
        let x = random(&mut rng, d, n);
        let y = random(&mut rng, dt, n);
        let model = CommonSpaceModel::initialize(
            MappingData { x: &x, y: &y },
            l,
            b,
            hyper,
            identity_preprocessing(d, dt),
            &mut rng,
        )
        .unwrap();
        let state = MappingState {
            sparse_codes: random(&mut rng, b, n) * 0.2,
            latent_b: random(&mut rng, l, n),
        };
        Fixture {
            model,
            state,
            cp: random(&mut rng, l, n),
            dq: random(&mut rng, l, n),
            x,
            y,
        }
    }

    #[test]
    fn preprocess_centers_and_normalizes() {
        let a = DenseMatrix::from_column_slice(2, 2, &[1.0, 1.0, 3.0, 3.0]);
        let b = a.clone();
        let ds = PairedDataset::new(a, b, None).unwrap();
        let (out, _) = preprocess(&ds, 2).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let fb = out.features_b();
        assert!((fb[(0, 0)] + h).abs() < 1e-12 && (fb[(1, 0)] + h).abs() < 1e-12);
        assert!((fb[(0, 1)] - h).abs() < 1e-12 && (fb[(1, 1)] - h).abs() < 1e-12);
        for col in out.features_a().column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_keeps_all_variance_of_rank_one_data() {
        let dir = DVector::from_vec(vec![0.6, 0.8]);
        let x = DenseMatrix::from_fn(2, 7, |r, c| dir[r] * (c as f64 - 3.0));
        let axes = principal_axes(&x, 1);
        let recon = axes.transpose() * (&axes * &x);
        assert!((recon - &x).norm() < 1e-10);
    }

    #[test]
    fn pca_rows_orthonormal_and_match_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = random(&mut rng, 10, 40);
        let mean = x.column_mean();
        for mut c in x.column_iter_mut() {
            c -= &mean;
        }
        let axes = principal_axes(&x, 4);
        let gram = &axes * axes.transpose();
        assert!((gram - DenseMatrix::identity(4, 4)).amax() < 1e-10);
        // Oracle: captured variance equals the sum of the top-4 eigenvalues
        // found by deflated power iteration on the covariance.
        let mut cov = (&x * x.transpose()) / 40.0;
        let mut top = 0.0;
        for _ in 0..4 {
            let mut v = DVector::from_element(10, 1.0);
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let w = &cov * &v;
                lambda = v.dot(&w);
                v = &w / w.norm();
            }
            top += lambda;
            cov -= &v * v.transpose() * lambda;
        }
        let captured = (&axes * &x).norm_squared() / 40.0;
        assert!((captured - top).abs() < 1e-8, "{captured} vs {top}");
    }

    #[test]
    fn zero_norm_column_reports_item() {
        let a = DenseMatrix::from_column_slice(2, 3, &[1.0, 0.0, 2.0, 1.0, 3.0, 2.0]);
        let b = DenseMatrix::from_column_slice(1, 3, &[0.0, 1.0, 2.0]);
        let ds = PairedDataset::new(a, b, None).unwrap();
        assert!(matches!(preprocess(&ds, 1), Err(Error::ZeroNormColumn { item: 1 })));
    }

    #[test]
    fn latent_text_scalar_case() {
        let model = CommonSpaceModel {
            basis: DenseMatrix::from_element(1, 1, 1.0),
            factor_u: DenseMatrix::from_element(1, 1, 1.0),
            transform_r: DenseMatrix::from_element(1, 1, 1.0),
            preprocessing: identity_preprocessing(1, 1),
            hyper: MappingHyper {
                rho: 0.1,
                eta: 1.0,
                lambda: 0.0,
            },
        };
        let state = MappingState {
            sparse_codes: DenseMatrix::zeros(1, 1),
            latent_b: DenseMatrix::zeros(1, 1),
        };
        let x = DenseMatrix::zeros(1, 1);
        let y = DenseMatrix::from_element(1, 1, 2.0);
        let dq = DenseMatrix::from_element(1, 1, 1.0);
        let out = update_latent_text(&model, &state, MappingData { x: &x, y: &y }, Some(&dq)).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn latent_text_degenerates_to_reconstruction() {
        let mut f = fixture(1, MappingHyper {
            rho: 0.1,
            eta: 0.0,
            lambda: 0.0,
        });
        f.model.hyper.eta = 0.0;
        let out = update_latent_text(&f.model, &f.state, f.data(), Some(&f.dq)).unwrap();
        assert!((out - &f.dq).amax() < 1e-15);
    }

    #[test]
    fn latent_text_zeroes_gradient() {
        for seed in 0..5 {
            let f = fixture(seed, MappingHyper::default());
            let mut state = f.state.clone();
            state.latent_b = update_latent_text(&f.model, &f.state, f.data(), Some(&f.dq)).unwrap();
            // Finite-difference gradient of the full mapping objective in Y′.
            let h = 1e-6;
            let mut max_rel = 0.0_f64;
            for idx in 0..state.latent_b.len() {
                let mut up = state.clone();
                up.latent_b[idx] += h;
                let mut down = state.clone();
                down.latent_b[idx] -= h;
                let g = (mapping_objective(&f.model, &up, f.data(), Some(f.quant()))
                    - mapping_objective(&f.model, &down, f.data(), Some(f.quant())))
                    / (2.0 * h);
                max_rel = max_rel.max(g.abs());
            }
            assert!(max_rel < 1e-5, "seed {seed}: {max_rel}");
        }
    }

    #[test]
    fn huge_rho_zeroes_sparse_codes() {
        let mut f = fixture(2, MappingHyper::default());
        f.model.hyper.rho = 1e6;
        let s = update_sparse_codes(&f.model, &f.state, f.data(), Some(&f.cp), &SolverBudget::default()).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacked_problem_without_coupling_is_plain_sparse_coding() {
        let mut f = fixture(3, MappingHyper::default());
        f.model.hyper.lambda = 0.0;
        let (design, targets, w) = stacked_sparse_problem(&f.model, &f.state, &f.x, None);
        assert_eq!(design, f.model.basis);
        assert_eq!(targets, f.x);
        assert_eq!(w, f.model.hyper.rho);
    }

    #[test]
    fn stacked_objective_equals_three_term_sum_up_to_constant() {
        // Oracle: the original sum of every S-dependent term, evaluated
        // directly. The stacked objective times (λ+1) must differ from it by
        // a constant independent of S.
        let f = fixture(4, MappingHyper::default());
        let lam = f.model.hyper.lambda;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (design, targets, w) = stacked_sparse_problem(&f.model, &f.state, &f.x, Some(&f.cp));
        let mut offsets = Vec::new();
        for _ in 0..4 {
            let s = random(&mut rng, f.model.num_bases(), f.x.ncols());
            let rs = &f.model.transform_r * &s;
            let original = (&f.x - &f.model.basis * &s).norm_squared()
                + lam * (&f.state.latent_b - &rs).norm_squared()
                + (&f.cp - &rs).norm_squared()
                + f.model.hyper.rho * s.lp_norm(1);
            let stacked = (&targets - &design * &s).norm_squared() + w * s.lp_norm(1);
            offsets.push(original - (lam + 1.0) * stacked);
        }
        for o in &offsets[1..] {
            assert!((o - offsets[0]).abs() < 1e-9, "{offsets:?}");
        }
    }

    #[test]
    fn sparse_update_satisfies_optimality() {
        let f = fixture(5, MappingHyper::default());
        let budget = SolverBudget {
            lasso_max_iter: 20_000,
            lasso_tol: 1e-9,
            ..Default::default()
        };
        let s = update_sparse_codes(&f.model, &f.state, f.data(), Some(&f.cp), &budget).unwrap();
        let (design, targets, w) = stacked_sparse_problem(&f.model, &f.state, &f.x, Some(&f.cp));
        let p = LassoProblem {
            design: &design,
            targets: &targets,
            l1_weight: w,
        };
        assert!(lasso_optimality_violation(&p, &s) < 1e-8);
    }

    #[test]
    fn u_update_matches_projected_least_squares_for_orthonormal_latents() {
        // Y′ with orthonormal rows makes the unconstrained fit Y·Y′ᵀ; the
        // constraint is separable per column, so the optimum is that fit
        // with each column projected.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = fixture(6, MappingHyper::default());
        let q = random(&mut rng, 12, 3).qr().q();
        f.state.latent_b = q.transpose();
        f.y = random(&mut rng, 5, 12) * 2.0;
        let budget = SolverBudget {
            qcls_max_iter: 5000,
            qcls_tol: 1e-12,
            ..Default::default()
        };
        let (_, u, _) = update_dictionaries(&f.model, &f.state, f.data(), Some(&f.cp), &budget).unwrap();
        let mut oracle = &f.y * q;
        project_columns(&mut oracle, 1.0);
        assert!((u - oracle).amax() < 1e-9);
    }

    #[test]
    fn realizable_factorization_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut f = fixture(7, MappingHyper::default());
        let mut truth = random(&mut rng, 5, 3);
        project_columns(&mut truth, 0.9);
        f.state.latent_b = random(&mut rng, 3, 12);
        f.y = &truth * &f.state.latent_b;
        let budget = SolverBudget {
            qcls_max_iter: 10_000,
            qcls_tol: 1e-12,
            ..Default::default()
        };
        let (_, u, _) = update_dictionaries(&f.model, &f.state, f.data(), Some(&f.cp), &budget).unwrap();
        assert!((&f.y - &u * &f.state.latent_b).norm_squared() < 1e-12);
    }

    #[test]
    fn dictionary_updates_are_feasible_and_monotone() {
        for seed in 0..5 {
            let f = fixture(seed + 20, MappingHyper::default());
            let (b, u, r) =
                update_dictionaries(&f.model, &f.state, f.data(), Some(&f.cp), &SolverBudget::default()).unwrap();
            for m in [&b, &u, &r] {
                for col in m.column_iter() {
                    assert!(col.norm_squared() <= 1.0 + 1e-9);
                }
            }
            let y_before = (&f.y - &f.model.factor_u * &f.state.latent_b).norm_squared();
            let y_after = (&f.y - &u * &f.state.latent_b).norm_squared();
            assert!(y_after <= y_before + 1e-12);
            let s = &f.state.sparse_codes;
            let x_before = (&f.x - &f.model.basis * s).norm_squared();
            let x_after = (&f.x - &b * s).norm_squared();
            assert!(x_after <= x_before + 1e-12);
            let lam = f.model.hyper.lambda;
            let target = (&f.cp + &f.state.latent_b * lam) / (lam + 1.0);
            let p = QclsProblem::new(&target, s, 1.0).unwrap();
            assert!(qcls_objective(&p, &r) <= qcls_objective(&p, &f.model.transform_r) + 1e-12);
        }
    }

    #[test]
    fn full_round_does_not_increase_mapping_objective() {
        for seed in 0..5 {
            let mut f = fixture(seed + 40, MappingHyper::default());
            let before = mapping_objective(&f.model, &f.state, f.data(), Some(f.quant()));
            let (x, y, cp, dq) = (f.x.clone(), f.y.clone(), f.cp.clone(), f.dq.clone());
            let data = MappingData { x: &x, y: &y };
            let quant = QuantTargets {
                recon_a: &cp,
                recon_b: &dq,
            };
            mapping_round(&mut f.model, &mut f.state, data, Some(quant), &SolverBudget::default()).unwrap();
            let after = mapping_objective(&f.model, &f.state, data, Some(quant));
            assert!(after <= before + 1e-8 * (1.0 + before.abs()), "{after} > {before}");
            assert!(f.model.max_column_norm_sq() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn embed_b_orthonormal_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut f = fixture(8, MappingHyper::default());
        f.model.factor_u = random(&mut rng, 5, 3).qr().q();
        let y = random(&mut rng, 5, 4);
        let out = embed_b(&f.model, &y).unwrap();
        assert!((out - f.model.factor_u.transpose() * &y).amax() < 1e-7);
    }

    #[test]
    fn embed_b_recovers_column_space_and_matches_augmented_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut f = fixture(9, MappingHyper::default());
        f.model.factor_u = random(&mut rng, 5, 3);
        let coeffs = random(&mut rng, 3, 2);
        let y = &f.model.factor_u * &coeffs;
        let out = embed_b(&f.model, &y).unwrap();
        assert!((&f.model.factor_u * &out - &y).amax() < 1e-6);

        // Oracle: least squares on the augmented system [U; √δ·I] via SVD.
        let y = random(&mut rng, 5, 2);
        let mut aug = DenseMatrix::zeros(8, 3);
        aug.view_mut((0, 0), (5, 3)).copy_from(&f.model.factor_u);
        aug.view_mut((5, 0), (3, 3)).copy_from(&(DenseMatrix::identity(3, 3) * RIDGE_FLOOR.sqrt()));
        let mut rhs = DenseMatrix::zeros(8, 2);
        rhs.view_mut((0, 0), (5, 2)).copy_from(&y);
        let oracle = aug.svd(true, true).solve(&rhs, 1e-15).unwrap();
        assert!((embed_b(&f.model, &y).unwrap() - oracle).amax() < 1e-10);
    }

    #[test]
    fn embed_a_of_basis_column() {
        let f = fixture(10, MappingHyper {
            rho: 1e-6,
            eta: 0.3,
            lambda: 0.3,
        });
        let mut model = f.model.clone();
        model.hyper.rho = 1e-6;
        // Orthonormal basis makes the basis column the unique sparse fit.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        model.basis = random(&mut rng, 6, 6).qr().q();
        model.transform_r = random(&mut rng, 3, 6);
        let x = model.basis.columns(2, 1).into_owned();
        let s = sparse_code_queries(&model, &x).unwrap();
        let mut e = DVector::zeros(6);
        e[2] = 1.0;
        assert!((s.column(0) - &e).amax() < 1e-5);
        let emb = embed_a(&model, &x).unwrap();
        assert!((emb.column(0) - model.transform_r.column(2)).amax() < 1e-5);
        assert_eq!(emb, embed_a(&model, &x).unwrap());
    }

    #[test]
    fn embed_a_large_rho_is_zero() {
        let mut f = fixture(11, MappingHyper::default());
        f.model.hyper.rho = 1e6;
        let x = f.x.columns(0, 2).into_owned();
        assert!(embed_a(&f.model, &x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_norm_query_rejected() {
        let f = fixture(12, MappingHyper::default());
        let raw = DVector::zeros(6);
        assert!(matches!(
            embed_query(&f.model, Modality::A, &raw),
            Err(Error::ZeroNormQuery)
        ));
    }
}
