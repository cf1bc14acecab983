//! Alternating optimization of the full model.
//!
//! Training minimizes the penalty-form objective
//!
//! ```text
//! F = ‖X − BS‖² + ρ|S|₁ + η‖Y − UY′‖² + λ‖Y′ − RS‖² + Ψ
//! ```
//!
//! by alternating mapping rounds (quantizers fixed) with collaborative
//! quantization rounds (mapping fixed). Every block update is an exact or
//! monotone minimization of its block, so `F` never increases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::common_space::{
    embed_raw, mapping_objective, mapping_round, preprocess, CommonSpaceModel, MappingData, MappingHyper,
    MappingState, Preprocessing, QuantTargets,
};
use crate::data::{CodeMatrix, DenseMatrix, LabelSet, Modality, PairedDataset};
use crate::error::{Error, Result};
use crate::eval::{map_at, RelevanceJudge};
use crate::quantizer::{
    collaborative_round, cross_terms, evaluate_psi, reconstruct, train_shared_single, train_single,
    CollaborativeState, QuantSchedule, QuantizationHyper,
};
use crate::search::{ids, search_batch, SearchIndex};
use crate::solvers::SolverBudget;
use crate::synth::split_queries;

/// Validation queries use MAP at this cutoff.
pub const VALIDATION_T: usize = 50;
const VALIDATION_FRACTION: f64 = 0.1;
const VALIDATION_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub rho: f64,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        let m = MappingHyper::default();
        let q = QuantizationHyper::default();
        Hyper {
            rho: m.rho,
            eta: m.eta,
            lambda: m.lambda,
            gamma: q.gamma,
            mu: q.mu,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct Ablation {
    pub gamma_zero: bool,
    pub lambda_zero: bool,
    pub shared_dictionary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct TrainConfig {
    pub bits: usize,
    #[serde(rename = "M")]
    pub num_dictionaries: usize,
    #[serde(rename = "K")]
    pub dictionary_size: usize,
    pub hyper: Hyper,
    pub outer_rounds: usize,
    pub mapping_rounds_per_outer: usize,
    pub quant_rounds_per_outer: usize,
    pub greedy_cycles: usize,
    /// Mapping rounds of the quantizer-free initial solve.
    pub init_mapping_rounds: usize,
    /// Rounds of each independent composite quantizer at initialization.
    pub init_quant_rounds: usize,
    pub pca_dim: usize,
    pub num_bases: usize,
    pub ablation: Ablation,
    pub budget: SolverBudget,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bits: 32,
            num_dictionaries: 4,
            dictionary_size: 256,
            hyper: Hyper::default(),
            outer_rounds: 10,
            mapping_rounds_per_outer: 3,
            quant_rounds_per_outer: 3,
            greedy_cycles: 3,
            init_mapping_rounds: 5,
            init_quant_rounds: 5,
            pca_dim: 64,
            num_bases: 512,
            ablation: Ablation::default(),
            budget: SolverBudget::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Sets `bits` and `M` for a code length of `bits` with the current `K`.
    pub fn with_bits(mut self, bits: usize) -> Result<Self> {
        let per = bits_per_dictionary(self.dictionary_size)?;
        if bits == 0 || !bits.is_multiple_of(per) {
            return Err(Error::Config(format!(
                "{bits} bits is not a positive multiple of log2(K) = {per}"
            )));
        }
        self.bits = bits;
        self.num_dictionaries = bits / per;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let per = bits_per_dictionary(self.dictionary_size)?;
        if self.num_dictionaries == 0 {
            return Err(Error::Config("M must be positive".into()));
        }
        if self.bits != self.num_dictionaries * per {
            return Err(Error::Config(format!(
                "bits = {} but M·log2(K) = {}·{} = {}",
                self.bits,
                self.num_dictionaries,
                per,
                self.num_dictionaries * per
            )));
        }
        if self.pca_dim == 0 || self.num_bases == 0 {
            return Err(Error::Config("PCA dimension and basis count must be positive".into()));
        }
        let h = self.hyper;
        for (name, v) in [
            ("rho", h.rho),
            ("eta", h.eta),
            ("lambda", h.lambda),
            ("gamma", h.gamma),
            ("mu", h.mu),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        self.budget.lbfgs.validate()
    }

    /// Latent dimension equals the code length in bits.
    pub fn latent_dim(&self) -> usize {
        self.bits
    }

    pub fn mapping_hyper(&self) -> MappingHyper {
        MappingHyper {
            rho: self.hyper.rho,
            eta: self.hyper.eta,
            lambda: if self.ablation.lambda_zero { 0.0 } else { self.hyper.lambda },
        }
    }

    pub fn quant_hyper(&self) -> QuantizationHyper {
        QuantizationHyper {
            gamma: if self.ablation.gamma_zero { 0.0 } else { self.hyper.gamma },
            mu: self.hyper.mu,
        }
    }

    fn schedule(&self, rounds: usize) -> QuantSchedule {
        QuantSchedule {
            rounds,
            greedy_cycles: self.greedy_cycles,
            lbfgs: self.budget.lbfgs,
        }
    }
}

fn bits_per_dictionary(k: usize) -> Result<usize> {
    if k < 2 || !k.is_power_of_two() {
        return Err(Error::Config(format!("K = {k} must be a power of two ≥ 2")));
    }
    Ok(k.trailing_zeros() as usize)
}

/// The equality-constrained view of the model: objective without the `μ`
/// penalties, plus the largest cross-term deviation per modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConstrainedForm {
    pub objective: f64,
    pub violation_a: f64,
    pub violation_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub common_space: CommonSpaceModel,
    pub mapping: MappingState,
    pub quant: CollaborativeState,
    /// `F` after initialization and after every outer round.
    pub objective_trace: Vec<f64>,
    pub constrained_trace: Vec<ConstrainedForm>,
}

impl TrainedModel {
    pub fn latent_a(&self) -> DenseMatrix {
        self.common_space.latent_a(&self.mapping)
    }

    pub fn quantizer(&self, modality: Modality) -> &crate::quantizer::CompositeQuantizer {
        match modality {
            Modality::A => &self.quant.quant_a,
            Modality::B => &self.quant.quant_b,
        }
    }

    pub fn codes(&self, modality: Modality) -> &CodeMatrix {
        match modality {
            Modality::A => &self.quant.codes_a,
            Modality::B => &self.quant.codes_b,
        }
    }

    /// Search index over the training items of one modality.
    pub fn index(&self, database: Modality, labels: Option<Vec<LabelSet>>) -> Result<SearchIndex> {
        SearchIndex::new(
            self.common_space.clone(),
            self.quantizer(database).clone(),
            self.codes(database).clone(),
            database,
            labels,
        )
    }
}

/// Value of `F` for the current state.
pub fn full_objective(
    common_space: &CommonSpaceModel,
    mapping: &MappingState,
    quant: &CollaborativeState,
    data: MappingData<'_>,
    hyper: QuantizationHyper,
) -> f64 {
    let latent_a = common_space.latent_a(mapping);
    mapping_objective(common_space, mapping, data, None)
        + evaluate_psi(&quant.objective(&latent_a, &mapping.latent_b, hyper))
}

pub fn constrained_form(
    common_space: &CommonSpaceModel,
    mapping: &MappingState,
    quant: &CollaborativeState,
    data: MappingData<'_>,
    hyper: QuantizationHyper,
) -> ConstrainedForm {
    let no_penalty = QuantizationHyper { mu: 0.0, ..hyper };
    let max_dev = |q: &crate::quantizer::CompositeQuantizer, c: &CodeMatrix| {
        cross_terms(q, c)
            .iter()
            .map(|x| (x - q.epsilon).abs())
            .fold(0.0, f64::max)
    };
    ConstrainedForm {
        objective: full_objective(common_space, mapping, quant, data, no_penalty),
        violation_a: max_dev(&quant.quant_a, &quant.codes_a),
        violation_b: max_dev(&quant.quant_b, &quant.codes_b),
    }
}

/// Quantizer-free mapping solve followed by independent composite
/// quantization of `X′` and `Y′`. `ds` must already be preprocessed.
pub fn initialize(ds: &PairedDataset, preprocessing: Preprocessing, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = MappingData {
        x: ds.features_a(),
        y: ds.features_b(),
    };
    let mut common_space = CommonSpaceModel::initialize(
        data,
        cfg.latent_dim(),
        cfg.num_bases,
        cfg.mapping_hyper(),
        preprocessing,
        &mut rng,
    )?;
    let mut mapping = common_space.initial_state(ds.len());
    for _ in 0..cfg.init_mapping_rounds {
        mapping_round(&mut common_space, &mut mapping, data, None, &cfg.budget)?;
    }

    let latent_a = common_space.latent_a(&mapping);
    let latent_b = &mapping.latent_b;
    let (m, k, mu) = (cfg.num_dictionaries, cfg.dictionary_size, cfg.hyper.mu);
    let schedule = cfg.schedule(cfg.init_quant_rounds);
    let quant = if cfg.ablation.shared_dictionary {
        train_shared_single(&latent_a, latent_b, m, k, mu, &schedule, &mut rng)?
    } else {
        let (quant_a, codes_a) = train_single(&latent_a, m, k, mu, &schedule, &mut rng)?;
        let (quant_b, codes_b) = train_single(latent_b, m, k, mu, &schedule, &mut rng)?;
        CollaborativeState {
            quant_a,
            quant_b,
            codes_a,
            codes_b,
        }
    };
    let hyper = cfg.quant_hyper();
    let f0 = full_objective(&common_space, &mapping, &quant, data, hyper);
    let c0 = constrained_form(&common_space, &mapping, &quant, data, hyper);
    log::info!("initial objective {f0:.6e}");
    Ok(TrainedModel {
        config: cfg.clone(),
        common_space,
        mapping,
        quant,
        objective_trace: vec![f0],
        constrained_trace: vec![c0],
    })
}

/// One outer round: mapping updates against the current reconstructions,
/// then collaborative quantization rounds against the new latents.
pub fn outer_round(model: &mut TrainedModel, ds: &PairedDataset) -> Result<()> {
    if ds.len() != model.mapping.sparse_codes.ncols() {
        return Err(Error::Shape(format!(
            "model was initialized with {} items, dataset has {}",
            model.mapping.sparse_codes.ncols(),
            ds.len()
        )));
    }
    let cfg = model.config.clone();
    let data = MappingData {
        x: ds.features_a(),
        y: ds.features_b(),
    };
    let recon_a = reconstruct(&model.quant.quant_a, &model.quant.codes_a);
    let recon_b = reconstruct(&model.quant.quant_b, &model.quant.codes_b);
    let targets = QuantTargets {
        recon_a: &recon_a,
        recon_b: &recon_b,
    };
    for _ in 0..cfg.mapping_rounds_per_outer {
        mapping_round(&mut model.common_space, &mut model.mapping, data, Some(targets), &cfg.budget)?;
    }
    let latent_a = model.latent_a();
    let schedule = cfg.schedule(cfg.quant_rounds_per_outer);
    for _ in 0..cfg.quant_rounds_per_outer {
        collaborative_round(
            &mut model.quant,
            &latent_a,
            &model.mapping.latent_b,
            cfg.quant_hyper(),
            cfg.ablation.shared_dictionary,
            &schedule,
            None,
        )?;
    }
    let hyper = cfg.quant_hyper();
    let f = full_objective(&model.common_space, &model.mapping, &model.quant, data, hyper);
    let prev = *model.objective_trace.last().expect("trace starts at initialization");
    if f > prev + 1e-8 * (1.0 + prev.abs()) {
        log::warn!("objective rose from {prev:.9e} to {f:.9e}");
    }
    model.objective_trace.push(f);
    model
        .constrained_trace
        .push(constrained_form(&model.common_space, &model.mapping, &model.quant, data, hyper));
    Ok(())
}

/// Trains on an already preprocessed dataset.
pub fn train_preprocessed(ds: &PairedDataset, preprocessing: Preprocessing, cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut model = initialize(ds, preprocessing, cfg)?;
    for round in 0..cfg.outer_rounds {
        outer_round(&mut model, ds).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })?;
        log::info!(
            "round {round}: objective {:.6e}",
            model.objective_trace.last().copied().unwrap_or_default()
        );
    }
    Ok(model)
}

/// Preprocesses raw features and trains.
pub fn train(ds: &PairedDataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let (pre, stats) = preprocess(ds, cfg.pca_dim)?;
    train_preprocessed(&pre, stats, cfg)
}

/// Latent embeddings of raw query features.
pub fn embed_queries(model: &TrainedModel, modality: Modality, raw: &DenseMatrix) -> Result<DenseMatrix> {
    embed_raw(&model.common_space, modality, raw)
}

/// Codes for held-out items of one modality: embed, then greedy assignment
/// with the cross-term penalty but no partner (held-out items have none).
/// Returns the codes and the latent vectors they approximate.
pub fn encode_raw(model: &TrainedModel, modality: Modality, raw: &DenseMatrix) -> Result<(CodeMatrix, DenseMatrix)> {
    if raw.ncols() == 0 {
        return Err(Error::Config("no items to encode".into()));
    }
    let latent = embed_queries(model, modality, raw)?;
    let codes = crate::quantizer::encode(
        model.quantizer(modality),
        &latent,
        model.config.hyper.mu,
        model.config.greedy_cycles,
    )?;
    Ok((codes, latent))
}

/// Top-`t` rankings of raw queries of one modality against the training
/// codes of the other.
pub fn rank_queries(model: &TrainedModel, query_modality: Modality, raw: &DenseMatrix, t: usize) -> Result<Vec<Vec<usize>>> {
    let latent = embed_queries(model, query_modality, raw)?;
    let database = query_modality.other();
    let results = search_batch(&latent, model.quantizer(database), model.codes(database), t, false)?;
    Ok(results.iter().map(|r| ids(r)).collect())
}

/// MAP@`t` of raw paired queries against the training database, as
/// `(A queries → B database, B queries → A database)`.
pub fn cross_modal_map(
    model: &TrainedModel,
    queries: &PairedDataset,
    database_labels: &[LabelSet],
    t: usize,
) -> Result<(f64, f64)> {
    let query_labels = queries.labels().ok_or(Error::MissingLabels("queries"))?;
    let judge = RelevanceJudge::new(query_labels, database_labels)?;
    let a_to_b = rank_queries(model, Modality::A, queries.features_a(), t)?;
    let b_to_a = rank_queries(model, Modality::B, queries.features_b(), t)?;
    Ok((map_at(&a_to_b, &judge, t), map_at(&b_to_a, &judge, t)))
}

/// Grid points that vary one of `ρ, η, λ, γ` over `values` while keeping
/// the rest at `base`. `base` comes first; duplicates are dropped.
pub fn one_at_a_time_grid(base: Hyper, values: &[f64]) -> Vec<Hyper> {
    let mut grid = vec![base];
    for field in 0..4 {
        for &v in values {
            let mut h = base;
            match field {
                0 => h.rho = v,
                1 => h.eta = v,
                2 => h.lambda = v,
                _ => h.gamma = v,
            }
            if !grid.contains(&h) {
                grid.push(h);
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: Hyper,
    /// Mean validation MAP of both directions for every grid point.
    pub scores: Vec<(Hyper, f64)>,
}

/// Trains once per grid point on 90% of the items (at most 2000 held
/// out), scores the held-out items as queries in both directions, and
/// returns the point with the highest mean MAP. Earlier points win ties.
pub fn validate_select(ds: &PairedDataset, grid: &[Hyper], cfg: &TrainConfig) -> Result<Selection> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let labels = ds.labels().ok_or(Error::MissingLabels("validation"))?;
    let n = ds.len();
    let held_out = ((n as f64 * VALIDATION_FRACTION).ceil() as usize).clamp(1, VALIDATION_CAP);
    let (train_idx, val_idx) = split_queries(n, held_out, cfg.seed)?;
    let train_ds = ds.select(&train_idx);
    let val_ds = ds.select(&val_idx);
    let train_labels: Vec<LabelSet> = train_idx.iter().map(|&i| labels[i].clone()).collect();

    let scores = grid
        .par_iter()
        .map(|&h| {
            let point_cfg = TrainConfig {
                hyper: h,
                ..cfg.clone()
            };
            let model = train(&train_ds, &point_cfg)?;
            let t = VALIDATION_T.min(train_ds.len());
            let (ab, ba) = cross_modal_map(&model, &val_ds, &train_labels, t)?;
            Ok((h, 0.5 * (ab + ba)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.1 > scores[best].1 {
            best = i;
        }
    }
    Ok(Selection {
        best: scores[best].0,
        scores,
    })
}
