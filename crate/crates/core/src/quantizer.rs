//! Composite quantization with collaborative alignment.
//!
//! Each modality's latent vectors are approximated by a sum of `M`
//! dictionary elements, one per dictionary. The two modalities are trained
//! jointly on the penalty objective
//!
//! ```text
//! Ψ = ‖X′ − CP‖² + ‖Y′ − DQ‖² + γ‖CP − DQ‖²
//!     + μ Σₙ (crossCₙ − ε₁)² + μ Σₙ (crossDₙ − ε₂)²
//! ```
//!
//! where `crossₙ = Σ_{i≠j} cᵢ·cⱼ` over the elements item `n` selects. Holding
//! the cross term near a constant `ε` is what lets search drop it and score
//! items with table lookups.
//!
//! Whenever `γ = 0` the partner modality is never read, so a collaborative
//! run with `γ = 0` is bit-identical to two independent single-modality runs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CodeMatrix, DenseMatrix, Modality};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::solvers::{minimize_lbfgs, LbfgsConfig, LbfgsStatus};

const KMEANS_ITERATIONS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeQuantizer {
    /// `M` matrices of shape `D × K`; columns are dictionary elements.
    dictionaries: Vec<DenseMatrix>,
    pub epsilon: f64,
}

impl CompositeQuantizer {
    pub fn new(dictionaries: Vec<DenseMatrix>, epsilon: f64) -> Result<Self> {
        let Some(first) = dictionaries.first() else {
            return Err(Error::Config("a quantizer needs at least one dictionary".into()));
        };
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::Shape(format!("dictionary shape {shape:?} is empty")));
        }
        for (m, d) in dictionaries.iter().enumerate() {
            if d.shape() != shape {
                return Err(Error::Shape(format!(
                    "dictionary {m} is {:?}, dictionary 0 is {shape:?}",
                    d.shape()
                )));
            }
            crate::data::ensure_finite(d)?;
        }
        if !epsilon.is_finite() {
            return Err(Error::NonFiniteIterate("epsilon"));
        }
        Ok(CompositeQuantizer {
            dictionaries,
            epsilon,
        })
    }

    pub fn num_dictionaries(&self) -> usize {
        self.dictionaries.len()
    }

    pub fn dictionary_size(&self) -> usize {
        self.dictionaries[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.dictionaries[0].nrows()
    }

    pub fn dictionaries(&self) -> &[DenseMatrix] {
        &self.dictionaries
    }

    pub fn set_dictionaries(&mut self, dictionaries: Vec<DenseMatrix>) -> Result<()> {
        let eps = self.epsilon;
        *self = CompositeQuantizer::new(dictionaries, eps)?;
        Ok(())
    }

    pub fn check_codes(&self, codes: &CodeMatrix) -> Result<()> {
        if codes.num_dictionaries() != self.num_dictionaries()
            || codes.dictionary_size() != self.dictionary_size()
        {
            return Err(Error::Codes(format!(
                "codes use M={} K={}, quantizer has M={} K={}",
                codes.num_dictionaries(),
                codes.dictionary_size(),
                self.num_dictionaries(),
                self.dictionary_size()
            )));
        }
        Ok(())
    }

    /// Sum of the selected elements for one item.
    pub fn decode(&self, item: &[u32]) -> nalgebra::DVector<f64> {
        let mut out = nalgebra::DVector::zeros(self.dim());
        for (dict, &k) in self.dictionaries.iter().zip(item) {
            out += dict.column(k as usize);
        }
        out
    }

    fn flatten(&self) -> Vec<f64> {
        self.dictionaries
            .iter()
            .flat_map(|d| d.as_slice().iter().copied())
            .collect()
    }

    fn unflatten(&self, flat: &[f64]) -> Vec<DenseMatrix> {
        let (d, k) = (self.dim(), self.dictionary_size());
        flat.chunks_exact(d * k)
            .map(|chunk| DenseMatrix::from_column_slice(d, k, chunk))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizationHyper {
    /// Weight of the pairwise alignment `‖CP − DQ‖²`.
    pub gamma: f64,
    /// Penalty weight on cross-term deviations from `ε`.
    pub mu: f64,
}

impl Default for QuantizationHyper {
    fn default() -> Self {
        QuantizationHyper { gamma: 0.3, mu: 0.1 }
    }
}

/// `D × N` matrix whose column `n` is the sum of item `n`'s selected elements.
pub fn reconstruct(q: &CompositeQuantizer, codes: &CodeMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(q.dim(), codes.num_items());
    for (n, item) in codes.items().enumerate() {
        let mut col = out.column_mut(n);
        for (dict, &k) in q.dictionaries.iter().zip(item) {
            col += dict.column(k as usize);
        }
    }
    out
}

/// `Σ_{i≠j} cᵢ·cⱼ` over the selected elements, both orderings counted.
pub fn cross_term(q: &CompositeQuantizer, item: &[u32]) -> f64 {
    let mut total = 0.0;
    for i in 0..item.len() {
        let ci = q.dictionaries[i].column(item[i] as usize);
        for j in (i + 1)..item.len() {
            total += ci.dot(&q.dictionaries[j].column(item[j] as usize));
        }
    }
    2.0 * total
}

pub fn cross_terms(q: &CompositeQuantizer, codes: &CodeMatrix) -> Vec<f64> {
    codes.items().map(|item| cross_term(q, item)).collect()
}

/// The mean cross term, which minimizes `Σₙ (crossₙ − ε)²`.
pub fn update_epsilon(q: &CompositeQuantizer, codes: &CodeMatrix) -> f64 {
    let n = codes.num_items();
    if n == 0 {
        return q.epsilon;
    }
    cross_terms(q, codes).iter().sum::<f64>() / n as f64
}

/// Everything one modality contributes to the penalty objective.
#[derive(Debug, Clone, Copy)]
pub struct QuantSide<'a> {
    /// `D × N` latent vectors being quantized.
    pub latent: &'a DenseMatrix,
    pub quantizer: &'a CompositeQuantizer,
    pub codes: &'a CodeMatrix,
}

#[derive(Debug, Clone, Copy)]
pub struct PenaltyObjective<'a> {
    pub a: QuantSide<'a>,
    pub b: QuantSide<'a>,
    pub hyper: QuantizationHyper,
}

impl<'a> PenaltyObjective<'a> {
    pub fn side(&self, which: Modality) -> QuantSide<'a> {
        match which {
            Modality::A => self.a,
            Modality::B => self.b,
        }
    }
}

/// Evaluates Ψ exactly.
pub fn evaluate_psi(obj: &PenaltyObjective<'_>) -> f64 {
    let rec_a = reconstruct(obj.a.quantizer, obj.a.codes);
    let rec_b = reconstruct(obj.b.quantizer, obj.b.codes);
    let mut psi = (obj.a.latent - &rec_a).norm_squared() + (obj.b.latent - &rec_b).norm_squared();
    if obj.hyper.gamma != 0.0 {
        psi += obj.hyper.gamma * (&rec_a - &rec_b).norm_squared();
    }
    for side in [obj.a, obj.b] {
        let eps = side.quantizer.epsilon;
        psi += obj.hyper.mu
            * cross_terms(side.quantizer, side.codes)
                .iter()
                .map(|c| (c - eps) * (c - eps))
                .sum::<f64>();
    }
    psi
}

/// The partner's reconstruction and the alignment weight, present only
/// when the alignment term is active.
type Partner<'a> = Option<(&'a DenseMatrix, f64)>;

/// Value of the terms of Ψ that depend on one side's dictionaries, and
/// optionally the gradient with respect to them. The alignment term's value
/// is included only if `count_alignment`; its gradient is always included
/// when a partner is given.
fn side_value_and_gradient(
    dicts: &[DenseMatrix],
    latent: &DenseMatrix,
    codes: &CodeMatrix,
    epsilon: f64,
    mu: f64,
    partner: Partner<'_>,
    count_alignment: bool,
    mut grad: Option<&mut [DenseMatrix]>,
) -> f64 {
    let d = latent.nrows();
    let mut value = 0.0;
    let mut recon = nalgebra::DVector::zeros(d);
    let mut coeff = nalgebra::DVector::zeros(d);
    for (n, item) in codes.items().enumerate() {
        recon.fill(0.0);
        let mut norms = 0.0;
        for (dict, &k) in dicts.iter().zip(item) {
            let c = dict.column(k as usize);
            recon += c;
            norms += c.norm_squared();
        }
        let cross = recon.norm_squared() - norms;
        let x = latent.column(n);
        let dev = cross - epsilon;
        value += (x - &recon).norm_squared() + mu * dev * dev;
        // residual part of the gradient: 2(r − x) + 2γ(r − y)
        coeff.copy_from(&recon);
        coeff -= x;
        if let Some((partner_recon, gamma)) = partner {
            let y = partner_recon.column(n);
            let gap = &recon - y;
            if count_alignment {
                value += gamma * gap.norm_squared();
            }
            coeff.axpy(gamma, &gap, 1.0);
        }
        if let Some(grad) = grad.as_deref_mut() {
            let w = 4.0 * mu * dev;
            for (m, &k) in item.iter().enumerate() {
                let c = dicts[m].column(k as usize);
                let mut g = grad[m].column_mut(k as usize);
                g.axpy(2.0, &coeff, 1.0);
                if w != 0.0 {
                    // Σ_{l≠m} c_l = recon − c_m
                    g.axpy(w, &recon, 1.0);
                    g.axpy(-w, &c, 1.0);
                }
            }
        }
    }
    value
}

/// Analytic `∂Ψ/∂C_m` for every dictionary of one side (separate
/// dictionaries), following
/// `2((γ+1)CP − X′ − γDQ)P_mᵀ + Σₙ 4μ(crossₙ − ε)(Σ_{l≠m} C_l p_nl) p_nmᵀ`.
pub fn dictionary_gradient(obj: &PenaltyObjective<'_>, which: Modality) -> Vec<DenseMatrix> {
    let own = obj.side(which);
    let other = obj.side(which.other());
    let partner_recon = reconstruct(other.quantizer, other.codes);
    let q = own.quantizer;
    let mut grad = vec![DenseMatrix::zeros(q.dim(), q.dictionary_size()); q.num_dictionaries()];
    side_value_and_gradient(
        &q.dictionaries,
        own.latent,
        own.codes,
        q.epsilon,
        obj.hyper.mu,
        (obj.hyper.gamma != 0.0).then_some((&partner_recon, obj.hyper.gamma)),
        true,
        Some(&mut grad),
    );
    grad
}

/// Gradient of Ψ with respect to one dictionary set shared by both sides.
pub fn shared_dictionary_gradient(obj: &PenaltyObjective<'_>) -> Vec<DenseMatrix> {
    let q = obj.a.quantizer;
    let mut grad = vec![DenseMatrix::zeros(q.dim(), q.dictionary_size()); q.num_dictionaries()];
    shared_value_and_gradient(obj, &q.dictionaries, Some(&mut grad));
    grad
}

fn shared_value_and_gradient(
    obj: &PenaltyObjective<'_>,
    dicts: &[DenseMatrix],
    mut grad: Option<&mut [DenseMatrix]>,
) -> f64 {
    let h = obj.hyper;
    let as_quantizer = |eps| CompositeQuantizer {
        dictionaries: dicts.to_vec(),
        epsilon: eps,
    };
    let (rec_a, rec_b) = if h.gamma != 0.0 {
        (
            Some(reconstruct(&as_quantizer(0.0), obj.a.codes)),
            Some(reconstruct(&as_quantizer(0.0), obj.b.codes)),
        )
    } else {
        (None, None)
    };
    let pa = rec_b.as_ref().map(|r| (r, h.gamma));
    let pb = rec_a.as_ref().map(|r| (r, h.gamma));
    let va = side_value_and_gradient(
        dicts,
        obj.a.latent,
        obj.a.codes,
        obj.a.quantizer.epsilon,
        h.mu,
        pa,
        true,
        grad.as_deref_mut(),
    );
    let vb = side_value_and_gradient(
        dicts,
        obj.b.latent,
        obj.b.codes,
        obj.b.quantizer.epsilon,
        h.mu,
        pb,
        false,
        grad,
    );
    va + vb
}

#[derive(Debug, Clone)]
pub struct DictionaryUpdate {
    pub dictionaries: Vec<DenseMatrix>,
    pub status: LbfgsStatus,
    /// Value of the dictionary-dependent part of Ψ before and after.
    pub before: f64,
    pub after: f64,
}

fn run_lbfgs<F>(q: &CompositeQuantizer, mut value_and_grad: F, cfg: &LbfgsConfig) -> Result<DictionaryUpdate>
where
    F: FnMut(&[DenseMatrix], &mut [DenseMatrix]) -> f64,
{
    let (d, k, m) = (q.dim(), q.dictionary_size(), q.num_dictionaries());
    let mut grad_buf = vec![DenseMatrix::zeros(d, k); m];
    let x0 = q.flatten();
    let mut before = None;
    let outcome = minimize_lbfgs(
        |flat, g| {
            let dicts = q.unflatten(flat);
            grad_buf.iter_mut().for_each(|b| b.fill(0.0));
            let v = value_and_grad(&dicts, &mut grad_buf);
            for (chunk, gm) in g.chunks_exact_mut(d * k).zip(&grad_buf) {
                chunk.copy_from_slice(gm.as_slice());
            }
            before.get_or_insert(v);
            v
        },
        x0,
        cfg,
    )?;
    let before = before.unwrap_or(outcome.value);
    if outcome.status == LbfgsStatus::LineSearchFailed {
        log::warn!(
            "dictionary line search failed after {} accepted steps (|g| = {:.3e})",
            outcome.iterations,
            outcome.gradient_norm
        );
    }
    Ok(DictionaryUpdate {
        dictionaries: q.unflatten(&outcome.x),
        status: outcome.status,
        before,
        after: outcome.value,
    })
}

/// L-BFGS on one side's dictionaries with codes, `ε` and the partner fixed.
pub fn update_dictionary(obj: &PenaltyObjective<'_>, which: Modality, cfg: &LbfgsConfig) -> Result<DictionaryUpdate> {
    let own = obj.side(which);
    let other = obj.side(which.other());
    own.quantizer.check_codes(own.codes)?;
    let partner_recon = if obj.hyper.gamma != 0.0 {
        Some(reconstruct(other.quantizer, other.codes))
    } else {
        None
    };
    let partner = partner_recon.as_ref().map(|r| (r, obj.hyper.gamma));
    run_lbfgs(
        own.quantizer,
        |dicts, grad| {
            side_value_and_gradient(
                dicts,
                own.latent,
                own.codes,
                own.quantizer.epsilon,
                obj.hyper.mu,
                partner,
                true,
                Some(grad),
            )
        },
        cfg,
    )
}

/// L-BFGS on a dictionary set used by both sides (`C = D`).
pub fn update_shared_dictionary(obj: &PenaltyObjective<'_>, cfg: &LbfgsConfig) -> Result<DictionaryUpdate> {
    obj.a.quantizer.check_codes(obj.a.codes)?;
    obj.b.quantizer.check_codes(obj.b.codes)?;
    run_lbfgs(
        obj.a.quantizer,
        |dicts, grad| shared_value_and_gradient(obj, dicts, Some(grad)),
        cfg,
    )
}

/// Per-item objective `‖x′ − Cp‖² + γ‖Cp − y‖² + μ(cross − ε)²`, with the
/// alignment term present only when a partner vector is supplied.
pub fn item_objective(
    q: &CompositeQuantizer,
    item: &[u32],
    latent: nalgebra::DVectorView<'_, f64>,
    partner: Option<(nalgebra::DVectorView<'_, f64>, f64)>,
    mu: f64,
) -> f64 {
    let recon = q.decode(item);
    let dev = cross_term(q, item) - q.epsilon;
    let mut v = (latent - &recon).norm_squared() + mu * dev * dev;
    if let Some((y, gamma)) = partner {
        v += gamma * (&recon - y).norm_squared();
    }
    v
}

/// Precomputed per-quantizer data for greedy assignment.
struct AssignContext<'a> {
    q: &'a CompositeQuantizer,
    /// `‖c_mk‖²` for every element.
    norms: Vec<Vec<f64>>,
    mu: f64,
}

impl<'a> AssignContext<'a> {
    fn new(q: &'a CompositeQuantizer, mu: f64) -> Self {
        let norms = q
            .dictionaries
            .iter()
            .map(|d| d.column_iter().map(|c| c.norm_squared()).collect())
            .collect();
        AssignContext { q, norms, mu }
    }

    /// Greedy cyclic coordinate descent over the item's `M` indices. Stops
    /// after `max_cycles` or once a full cycle changes nothing. Returns the
    /// number of cycles run.
    fn assign_item(
        &self,
        code: &mut [u32],
        x: nalgebra::DVectorView<'_, f64>,
        partner: Option<(nalgebra::DVectorView<'_, f64>, f64)>,
        max_cycles: usize,
    ) -> usize {
        let q = self.q;
        let d = q.dim();
        let mut total = q.decode(code);
        let mut total_norms: f64 = code
            .iter()
            .enumerate()
            .map(|(m, &k)| self.norms[m][k as usize])
            .sum();
        let mut rest = nalgebra::DVector::zeros(d);
        let mut linear = nalgebra::DVector::zeros(d);
        for cycle in 0..max_cycles {
            let mut changed = false;
            for m in 0..code.len() {
                let dict = &q.dictionaries[m];
                let current = code[m] as usize;
                rest.copy_from(&total);
                rest -= dict.column(current);
                let rest_norms = total_norms - self.norms[m][current];
                let base = rest.norm_squared() - rest_norms - q.epsilon;
                // score(c) = c·u + (1+γ)‖c‖² + μ(base + 2 r·c)²
                // with u = −2(x − r) + 2γ(r − y)
                linear.copy_from(&rest);
                linear -= x;
                linear *= 2.0;
                let mut quad = 1.0;
                if let Some((y, gamma)) = partner {
                    linear.axpy(2.0 * gamma, &rest, 1.0);
                    linear.axpy(-2.0 * gamma, &y, 1.0);
                    quad += gamma;
                }
                let lin_scores = dict.tr_mul(&linear);
                let rest_dots = if self.mu != 0.0 { Some(dict.tr_mul(&rest)) } else { None };
                let mut best = 0usize;
                let mut best_score = f64::INFINITY;
                for k in 0..dict.ncols() {
                    let mut s = lin_scores[k] + quad * self.norms[m][k];
                    if let Some(rd) = &rest_dots {
                        let dev = base + 2.0 * rd[k];
                        s += self.mu * dev * dev;
                    }
                    if s < best_score {
                        best_score = s;
                        best = k;
                    }
                }
                if best != current {
                    code[m] = best as u32;
                    total.copy_from(&rest);
                    total += dict.column(best);
                    total_norms = rest_norms + self.norms[m][best];
                    changed = true;
                }
            }
            if !changed {
                return cycle + 1;
            }
        }
        max_cycles
    }
}

/// Greedy cyclic update of one side's codes with everything else fixed.
/// Each block picks the index minimizing the item's objective given the
/// other blocks (lowest index on ties).
pub fn assign_codes(obj: &PenaltyObjective<'_>, which: Modality, max_cycles: usize) -> Result<CodeMatrix> {
    let own = obj.side(which);
    let other = obj.side(which.other());
    own.quantizer.check_codes(own.codes)?;
    let partner_recon = if obj.hyper.gamma != 0.0 {
        Some(reconstruct(other.quantizer, other.codes))
    } else {
        None
    };
    let partner = partner_recon.as_ref().map(|r| (r, obj.hyper.gamma));
    Ok(assign_with(own.quantizer, own.latent, own.codes.clone(), partner, obj.hyper.mu, max_cycles))
}

fn assign_with(
    q: &CompositeQuantizer,
    latent: &DenseMatrix,
    mut codes: CodeMatrix,
    partner: Partner<'_>,
    mu: f64,
    max_cycles: usize,
) -> CodeMatrix {
    let ctx = AssignContext::new(q, mu);
    codes
        .items_mut()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .for_each(|(n, code)| {
            let p = partner.map(|(r, g)| (r.column(n), g));
            ctx.assign_item(code, latent.column(n), p, max_cycles);
        });
    codes
}

/// Encodes vectors that have no partner (held-out database items): a
/// residual pass picks an initial index per dictionary, then greedy cycles
/// run on `‖x′ − Cp‖² + μ(cross − ε)²`.
pub fn encode(q: &CompositeQuantizer, latent: &DenseMatrix, mu: f64, max_cycles: usize) -> Result<CodeMatrix> {
    if latent.nrows() != q.dim() {
        return Err(Error::Shape(format!(
            "latent vectors have {} rows, quantizer expects {}",
            latent.nrows(),
            q.dim()
        )));
    }
    let m = q.num_dictionaries();
    let mut codes = CodeMatrix::zeros(latent.ncols(), m, q.dictionary_size());
    let norms: Vec<Vec<f64>> = q
        .dictionaries
        .iter()
        .map(|d| d.column_iter().map(|c| c.norm_squared()).collect())
        .collect();
    for (n, code) in codes.items_mut().enumerate() {
        let mut residual = latent.column(n).into_owned();
        for (slot, (dict, dn)) in code.iter_mut().zip(q.dictionaries.iter().zip(&norms)) {
            let dots = dict.tr_mul(&residual);
            let mut best = 0;
            let mut best_v = f64::INFINITY;
            for k in 0..dict.ncols() {
                let v = dn[k] - 2.0 * dots[k];
                if v < best_v {
                    best_v = v;
                    best = k;
                }
            }
            *slot = best as u32;
            residual -= dict.column(best);
        }
    }
    Ok(assign_with(q, latent, codes, None, mu, max_cycles))
}

/// Settings for a block of quantization rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSchedule {
    pub rounds: usize,
    pub greedy_cycles: usize,
    pub lbfgs: LbfgsConfig,
}

/// Both modalities' quantization variables.
#[derive(Debug, Clone, PartialEq)]
pub struct CollaborativeState {
    pub quant_a: CompositeQuantizer,
    pub quant_b: CompositeQuantizer,
    pub codes_a: CodeMatrix,
    pub codes_b: CodeMatrix,
}

impl CollaborativeState {
    pub fn objective<'a>(
        &'a self,
        latent_a: &'a DenseMatrix,
        latent_b: &'a DenseMatrix,
        hyper: QuantizationHyper,
    ) -> PenaltyObjective<'a> {
        PenaltyObjective {
            a: QuantSide {
                latent: latent_a,
                quantizer: &self.quant_a,
                codes: &self.codes_a,
            },
            b: QuantSide {
                latent: latent_b,
                quantizer: &self.quant_b,
                codes: &self.codes_b,
            },
            hyper,
        }
    }
}

/// Per-block values of Ψ recorded during one collaborative round, for
/// monotonicity checks.
#[derive(Debug, Clone, Default)]
pub struct RoundTrace {
    /// Ψ at the start and after each of: C, D, ε, P, Q.
    pub psi: Vec<f64>,
}

/// One collaborative round: update `C`, `D` (or the shared set), both
/// `ε`, then greedy cycles over `P` and `Q`.
pub fn collaborative_round(
    state: &mut CollaborativeState,
    latent_a: &DenseMatrix,
    latent_b: &DenseMatrix,
    hyper: QuantizationHyper,
    shared: bool,
    schedule: &QuantSchedule,
    trace: Option<&mut RoundTrace>,
) -> Result<()> {
    let mut trace = trace;
    let mut record = |state: &CollaborativeState| {
        if let Some(t) = trace.as_deref_mut() {
            t.psi.push(evaluate_psi(&state.objective(latent_a, latent_b, hyper)));
        }
    };
    record(state);
    if shared {
        let upd = update_shared_dictionary(&state.objective(latent_a, latent_b, hyper), &schedule.lbfgs)?;
        state.quant_a.set_dictionaries(upd.dictionaries.clone())?;
        state.quant_b.set_dictionaries(upd.dictionaries)?;
        record(state);
        record(state);
    } else {
        let upd = update_dictionary(&state.objective(latent_a, latent_b, hyper), Modality::A, &schedule.lbfgs)?;
        state.quant_a.set_dictionaries(upd.dictionaries)?;
        record(state);
        let upd = update_dictionary(&state.objective(latent_a, latent_b, hyper), Modality::B, &schedule.lbfgs)?;
        state.quant_b.set_dictionaries(upd.dictionaries)?;
        record(state);
    }
    state.quant_a.epsilon = update_epsilon(&state.quant_a, &state.codes_a);
    state.quant_b.epsilon = update_epsilon(&state.quant_b, &state.codes_b);
    record(state);
    state.codes_a = assign_codes(&state.objective(latent_a, latent_b, hyper), Modality::A, schedule.greedy_cycles)?;
    record(state);
    state.codes_b = assign_codes(&state.objective(latent_a, latent_b, hyper), Modality::B, schedule.greedy_cycles)?;
    record(state);
    Ok(())
}

/// Plain composite quantization of one modality: residual k-means seeding
/// followed by `schedule.rounds` rounds of (dictionaries, ε, codes) with no
/// partner.
pub fn train_single<R: Rng>(
    latent: &DenseMatrix,
    num_dictionaries: usize,
    dictionary_size: usize,
    mu: f64,
    schedule: &QuantSchedule,
    rng: &mut R,
) -> Result<(CompositeQuantizer, CodeMatrix)> {
    let (mut q, mut codes) = seed_quantizer(latent, num_dictionaries, dictionary_size, rng)?;
    for _ in 0..schedule.rounds {
        single_round(&mut q, &mut codes, latent, mu, schedule)?;
    }
    Ok((q, codes))
}

/// Dictionary `m` is k-means of the residual left by dictionaries `1..m`.
pub fn seed_quantizer<R: Rng>(
    latent: &DenseMatrix,
    num_dictionaries: usize,
    dictionary_size: usize,
    rng: &mut R,
) -> Result<(CompositeQuantizer, CodeMatrix)> {
    if num_dictionaries == 0 || dictionary_size == 0 {
        return Err(Error::Config("M and K must be positive".into()));
    }
    let n = latent.ncols();
    let mut residual = latent.clone();
    let mut dictionaries = Vec::with_capacity(num_dictionaries);
    let mut codes = CodeMatrix::zeros(n, num_dictionaries, dictionary_size);
    for m in 0..num_dictionaries {
        let (centroids, assignment) = kmeans(&residual, dictionary_size, KMEANS_ITERATIONS, rng);
        for (i, &a) in assignment.iter().enumerate() {
            codes.item_mut(i)[m] = a;
            let mut col = residual.column_mut(i);
            col -= centroids.column(a as usize);
        }
        dictionaries.push(centroids);
    }
    let mut q = CompositeQuantizer::new(dictionaries, 0.0)?;
    q.epsilon = update_epsilon(&q, &codes);
    Ok((q, codes))
}

fn single_round(
    q: &mut CompositeQuantizer,
    codes: &mut CodeMatrix,
    latent: &DenseMatrix,
    mu: f64,
    schedule: &QuantSchedule,
) -> Result<()> {
    let upd = run_lbfgs(
        q,
        |dicts, grad| side_value_and_gradient(dicts, latent, codes, q.epsilon, mu, None, true, Some(grad)),
        &schedule.lbfgs,
    )?;
    q.set_dictionaries(upd.dictionaries)?;
    q.epsilon = update_epsilon(q, codes);
    *codes = assign_with(q, latent, codes.clone(), None, mu, schedule.greedy_cycles);
    Ok(())
}

/// Shared-dictionary seeding: one quantizer trained on both modalities'
/// latent vectors side by side.
pub fn train_shared_single<R: Rng>(
    latent_a: &DenseMatrix,
    latent_b: &DenseMatrix,
    num_dictionaries: usize,
    dictionary_size: usize,
    mu: f64,
    schedule: &QuantSchedule,
    rng: &mut R,
) -> Result<CollaborativeState> {
    let n = latent_a.ncols();
    let mut joint = DenseMatrix::zeros(latent_a.nrows(), n + latent_b.ncols());
    joint.columns_mut(0, n).copy_from(latent_a);
    joint.columns_mut(n, latent_b.ncols()).copy_from(latent_b);
    let (q, codes) = train_single(&joint, num_dictionaries, dictionary_size, mu, schedule, rng)?;
    let idx_a: Vec<usize> = (0..n).collect();
    let idx_b: Vec<usize> = (n..n + latent_b.ncols()).collect();
    let codes_a = codes.select(&idx_a);
    let codes_b = codes.select(&idx_b);
    let mut quant_a = q.clone();
    let mut quant_b = q;
    quant_a.epsilon = update_epsilon(&quant_a, &codes_a);
    quant_b.epsilon = update_epsilon(&quant_b, &codes_b);
    Ok(CollaborativeState {
        quant_a,
        quant_b,
        codes_a,
        codes_b,
    })
}
