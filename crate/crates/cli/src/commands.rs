use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use xmq_core::io::{load_codes, load_labels, load_matrix, save_codes, save_json, save_labels, save_matrix, write_atomic};
use xmq_core::search::{search_batch, ResultList};
use xmq_core::trainer::{encode_raw, one_at_a_time_grid, train as train_model, validate_select, TrainConfig};
use xmq_core::{common_space, eval, model_io, quantizer, synth as synth_data, DenseMatrix, LabelSet, PairedDataset};

use crate::manifest::RunManifest;
use crate::{EncodeArgs, EvalArgs, PreprocessArgs, SearchArgs, SynthArgs, TrainArgs};

pub const RESULTS_HEADER: &str = "queryId,rank,itemId,score";

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn synth(a: &SynthArgs, threads: usize) -> Result<()> {
    let mut run = RunManifest::new("synth", a, threads)?;
    run.seed = Some(a.seed);
    let params = synth_data::SynthParams {
        clusters: a.clusters,
        latent_dim: a.latent_dim,
        num_pairs: a.num_pairs + a.num_queries,
        dim_a: a.dim_a,
        dim_b: a.dim_b,
        noise: a.noise,
        seed: a.seed,
    };
    let data = run.timed("generate", || synth_data::synthesize(&params))?;
    mkdir(&a.out_dir)?;
    let total = params.num_pairs;
    let (db_idx, q_idx) = if a.num_queries > 0 {
        synth_data::split_queries(total, a.num_queries, a.seed)?
    } else {
        ((0..total).collect(), Vec::new())
    };
    let db = data.dataset.select(&db_idx);
    let mut write = |name: &str, m: &DenseMatrix| -> Result<()> {
        let path = a.out_dir.join(name);
        save_matrix(m, &path)?;
        run.output(path);
        Ok(())
    };
    write("features_a.xmqm", db.features_a())?;
    write("features_b.xmqm", db.features_b())?;
    write("latent.xmqm", &data.latent.select_columns(&db_idx))?;
    write("centers.xmqm", &data.centers)?;
    write("map_a.xmqm", &data.map_a)?;
    write("map_b.xmqm", &data.map_b)?;
    if !q_idx.is_empty() {
        let q = data.dataset.select(&q_idx);
        write("queries_a.xmqm", &q.features_a().transpose())?;
        write("queries_b.xmqm", &q.features_b().transpose())?;
        save_labels(q.labels().unwrap_or_default(), a.out_dir.join("query_labels.txt"))?;
        run.output(a.out_dir.join("query_labels.txt"));
    }
    save_labels(db.labels().unwrap_or_default(), a.out_dir.join("labels.txt"))?;
    run.output(a.out_dir.join("labels.txt"));
    run.note("databasePairs", db.len())?;
    run.note("queries", q_idx.len())?;
    println!(
        "wrote {} database pairs and {} queries to {}",
        db.len(),
        q_idx.len(),
        a.out_dir.display()
    );
    run.finish(&a.out_dir)?;
    Ok(())
}

fn load_pair(run: &mut RunManifest, fa: &Path, fb: &Path, labels: Option<&Path>) -> Result<PairedDataset> {
    run.input(fa)?;
    run.input(fb)?;
    let a = load_matrix(fa)?;
    let b = load_matrix(fb)?;
    let labels = match labels {
        Some(p) => {
            run.input(p)?;
            Some(load_labels(p)?)
        }
        None => None,
    };
    Ok(PairedDataset::new(a, b, labels)?)
}

pub fn preprocess(a: &PreprocessArgs, threads: usize) -> Result<()> {
    let mut run = RunManifest::new("preprocess", a, threads)?;
    let ds = load_pair(&mut run, &a.features_a, &a.features_b, None)?;
    let (out, stats) = run.timed("preprocess", || common_space::preprocess(&ds, a.pca_dim))?;
    mkdir(&a.out_dir)?;
    let column = |v: &[f64]| DenseMatrix::from_column_slice(v.len(), 1, v);
    for (name, m) in [
        ("features_a.xmqm", out.features_a().clone()),
        ("features_b.xmqm", out.features_b().clone()),
        ("mean_a.xmqm", column(stats.mean_a.as_slice())),
        ("mean_b.xmqm", column(stats.mean_b.as_slice())),
        ("pca.xmqm", stats.pca.clone()),
    ] {
        let path = a.out_dir.join(name);
        save_matrix(&m, &path)?;
        run.output(path);
    }
    println!("preprocessed {} pairs into {}", ds.len(), a.out_dir.display());
    run.finish(&a.out_dir)?;
    Ok(())
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => xmq_core::io::load_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.dictionary_size = k;
        if a.bits.is_none() {
            let bits = cfg.bits;
            cfg = cfg.with_bits(bits)?;
        }
    }
    if let Some(bits) = a.bits {
        cfg = cfg.with_bits(bits)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.outer_rounds {
        cfg.outer_rounds = v;
    }
    if let Some(v) = a.num_bases {
        cfg.num_bases = v;
    }
    if let Some(v) = a.pca_dim {
        cfg.pca_dim = v;
    }
    let h = &mut cfg.hyper;
    for (flag, field) in [
        (a.rho, &mut h.rho),
        (a.eta, &mut h.eta),
        (a.lambda, &mut h.lambda),
        (a.gamma, &mut h.gamma),
        (a.mu, &mut h.mu),
    ] {
        if let Some(v) = flag {
            *field = v;
        }
    }
    cfg.ablation.gamma_zero |= a.gamma_zero;
    cfg.ablation.lambda_zero |= a.lambda_zero;
    cfg.ablation.shared_dictionary |= a.shared_dictionary;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs, threads: usize) -> Result<()> {
    let mut run = RunManifest::new("train", a, threads)?;
    let mut cfg = build_config(a)?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }
    let ds = load_pair(&mut run, &a.features_a, &a.features_b, a.labels.as_deref())?;
    if let Some(values) = &a.validate_grid {
        ensure!(ds.labels().is_some(), "--validate-grid needs --labels");
        let grid = one_at_a_time_grid(cfg.hyper, values);
        log::info!("validating {} grid points", grid.len());
        let selection = run.timed("validation", || validate_select(&ds, &grid, &cfg))?;
        for (h, score) in &selection.scores {
            log::info!("rho={} eta={} lambda={} gamma={} → MAP {score:.4}", h.rho, h.eta, h.lambda, h.gamma);
        }
        cfg.hyper = selection.best;
        run.note("validation", &selection)?;
    }
    run.seed = Some(cfg.seed);
    let model = run.timed("train", || train_model(&ds, &cfg))?;
    model_io::save_model(&model, &a.out)?;
    run.output(&a.out);
    let first = model.objective_trace.first().copied().unwrap_or_default();
    let last = model.objective_trace.last().copied().unwrap_or_default();
    run.note("resolvedConfig", &cfg)?;
    run.note("objectiveTrace", &model.objective_trace)?;
    println!(
        "trained {} pairs: bits={} M={} K={}, objective {first:.6e} → {last:.6e}",
        ds.len(),
        cfg.bits,
        cfg.num_dictionaries,
        cfg.dictionary_size
    );
    run.finish(&a.out)?;
    Ok(())
}

pub fn encode(a: &EncodeArgs, threads: usize) -> Result<()> {
    let mut run = RunManifest::new("encode", a, threads)?;
    run.input(&a.features)?;
    run.input(&a.model.join("manifest.json"))?;
    let model = model_io::load_model(&a.model)?;
    let raw = load_matrix(&a.features)?;
    ensure!(raw.ncols() > 0, "{} holds no items", a.features.display());
    let (codes, latent) = run.timed("encode", || encode_raw(&model, a.modality, &raw))?;
    let recon = quantizer::reconstruct(model.quantizer(a.modality), &codes);
    let err = (&latent - &recon).norm_squared();
    let rel = err / latent.norm_squared().max(f64::MIN_POSITIVE);
    save_codes(&codes, &a.out)?;
    run.output(&a.out);
    run.output(xmq_core::io::sidecar_path(&a.out));
    run.note("reconstructionError", err)?;
    run.note("relativeReconstructionError", rel)?;
    println!(
        "encoded {} items of modality {}: reconstruction error {err:.6e} (relative {rel:.4})",
        codes.num_items(),
        a.modality
    );
    run.finish(&a.out)?;
    Ok(())
}

pub fn format_results(results: &[ResultList]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for (q, hits) in results.iter().enumerate() {
        for (rank, h) in hits.iter().enumerate() {
            let _ = writeln!(out, "{q},{},{},{}", rank + 1, h.item, h.score);
        }
    }
    out
}

pub fn search(a: &SearchArgs, threads: usize) -> Result<()> {
    let mut run = RunManifest::new("search", a, threads)?;
    run.input(&a.model.join("manifest.json"))?;
    run.input(&a.queries)?;
    let model = model_io::load_model(&a.model)?;
    let database = a.query_modality.other();
    let codes = match &a.codes {
        Some(p) => {
            run.input(p)?;
            load_codes(p)?
        }
        None => model.codes(database).clone(),
    };
    let q = model.quantizer(database);
    q.check_codes(&codes)?;
    let queries = load_matrix(&a.queries)?;
    ensure!(queries.nrows() > 0, "{} holds no queries", a.queries.display());
    let n = codes.num_items();
    if a.top_t > n {
        log::warn!("top-T {} exceeds the database size {n}; returning {n} per query", a.top_t);
    }
    let results = run.timed("search", || -> Result<Vec<ResultList>> {
        let latent = xmq_core::trainer::embed_queries(&model, a.query_modality, &queries.transpose())?;
        Ok(search_batch(&latent, q, &codes, a.top_t, a.exhaustive)?)
    })?;
    write_atomic(&a.out, format_results(&results).as_bytes())?;
    run.output(&a.out);
    run.note("queries", results.len())?;
    run.note("databaseSize", n)?;
    println!(
        "searched {} queries of modality {} against {n} items ({} path)",
        results.len(),
        a.query_modality,
        if a.exhaustive { "exhaustive" } else { "table" }
    );
    run.finish(&a.out)?;
    Ok(())
}

/// Rankings per query id from a results CSV; queries absent from the file
/// get empty rankings.
pub fn parse_results(text: &str, num_queries: usize, database_size: usize) -> Result<Vec<Vec<usize>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RESULTS_HEADER => {}
        other => bail!("results header should be {RESULTS_HEADER:?}, found {other:?}"),
    }
    let mut by_query: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        ensure!(fields.len() == 4, "line {}: expected 4 fields", i + 2);
        let query: usize = fields[0].trim().parse().with_context(|| format!("line {}: queryId", i + 2))?;
        let rank: usize = fields[1].trim().parse().with_context(|| format!("line {}: rank", i + 2))?;
        let item: usize = fields[2].trim().parse().with_context(|| format!("line {}: itemId", i + 2))?;
        ensure!(query < num_queries, "line {}: queryId {query} but only {num_queries} query labels", i + 2);
        ensure!(item < database_size, "line {}: itemId {item} but only {database_size} database labels", i + 2);
        by_query.entry(query).or_default().push((rank, item));
    }
    let mut rankings = vec![Vec::new(); num_queries];
    for (q, mut hits) in by_query {
        hits.sort_unstable();
        rankings[q] = hits.into_iter().map(|(_, item)| item).collect();
    }
    Ok(rankings)
}

pub fn eval(a: &EvalArgs, threads: usize) -> Result<()> {
    let mut run = RunManifest::new("eval", a, threads)?;
    for p in [&a.results, &a.query_labels, &a.database_labels] {
        run.input(p)?;
    }
    let query_labels: Vec<LabelSet> = load_labels(&a.query_labels)?;
    let database_labels: Vec<LabelSet> = load_labels(&a.database_labels)?;
    let text = fs::read_to_string(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    let rankings = parse_results(&text, query_labels.len(), database_labels.len())?;
    let judge = eval::RelevanceJudge::new(&query_labels, &database_labels)?;
    let report = eval::MetricReport::compute(&rankings, &judge, &a.map_t, &a.precision_t)?;
    let json_path = a.out_prefix.with_extension("json");
    let csv_path = a.out_prefix.with_extension("csv");
    save_json(&report, &json_path)?;
    write_atomic(&csv_path, report.to_csv().as_bytes())?;
    run.output(&json_path);
    run.output(&csv_path);
    for (t, m) in &report.map_at_t {
        println!("MAP@{t} = {m:.4}");
    }
    if report.zero_relevant_queries > 0 {
        println!(
            "{} queries had no relevant item in their top {} and scored AP = 0",
            report.zero_relevant_queries, report.per_query_t
        );
    }
    run.note("mapAtT", &report.map_at_t)?;
    run.finish(&json_path)?;
    Ok(())
}
