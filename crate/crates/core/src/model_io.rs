//! On-disk layout of a trained model.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/preprocessing/{mean_a,mean_b,pca}.xmqm
//! <dir>/mapping/{basis,factor_u,transform_r,sparse_codes,latent_b}.xmqm
//! <dir>/quant_{a,b}/quantizer.json          {M, K, epsilon}
//! <dir>/quant_{a,b}/dict_<m>.xmqm           D × K
//! <dir>/codes_{a,b}.xmqm + codes_{a,b}.json
//! <dir>/trace.csv
//! ```
//!
//! Nothing time-dependent is written, so identical training runs produce
//! byte-identical directories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::common_space::{CommonSpaceModel, MappingState, Preprocessing};
use crate::data::{DenseMatrix, Modality};
use crate::error::{Error, Result};
use crate::io::{load_codes, load_json, load_matrix, save_codes, save_json, save_matrix, write_atomic};
use crate::quantizer::{CollaborativeState, CompositeQuantizer};
use crate::trainer::{ConstrainedForm, TrainConfig, TrainedModel};

pub const MODEL_FORMAT: &str = "xmq-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub config: TrainConfig,
    pub num_items: usize,
    pub latent_dim: usize,
    pub num_bases: usize,
    pub pca_dim: usize,
    pub raw_dim_a: usize,
    pub raw_dim_b: usize,
    pub objective_trace: Vec<f64>,
    pub constrained_trace: Vec<ConstrainedForm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerMeta {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub epsilon: f64,
}

fn column(v: &nalgebra::DVector<f64>) -> DenseMatrix {
    DenseMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn load_vector(path: &Path) -> Result<nalgebra::DVector<f64>> {
    let m = load_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Shape(format!("{} should be a single column", path.display())));
    }
    Ok(m.column(0).into_owned())
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn quant_dir(modality: Modality) -> String {
    format!("quant_{modality}")
}

pub fn save_quantizer(q: &CompositeQuantizer, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    save_json(
        &QuantizerMeta {
            m: q.num_dictionaries(),
            k: q.dictionary_size(),
            epsilon: q.epsilon,
        },
        dir.join("quantizer.json"),
    )?;
    for (m, d) in q.dictionaries().iter().enumerate() {
        save_matrix(d, dir.join(format!("dict_{m}.xmqm")))?;
    }
    Ok(())
}

pub fn load_quantizer(dir: &Path) -> Result<CompositeQuantizer> {
    let meta: QuantizerMeta = load_json(dir.join("quantizer.json"))?;
    let dicts = (0..meta.m)
        .map(|m| load_matrix(dir.join(format!("dict_{m}.xmqm"))))
        .collect::<Result<Vec<_>>>()?;
    let q = CompositeQuantizer::new(dicts, meta.epsilon)?;
    if q.dictionary_size() != meta.k {
        return Err(Error::Shape(format!(
            "{} declares K={} but dictionaries have {} columns",
            dir.display(),
            meta.k,
            q.dictionary_size()
        )));
    }
    Ok(q)
}

/// `round,objective,constrainedObjective,violationA,violationB`; round 0 is
/// the initialized model.
pub fn trace_csv(model: &TrainedModel) -> String {
    let mut out = String::from("round,objective,constrainedObjective,violationA,violationB\n");
    for (i, (f, c)) in model.objective_trace.iter().zip(&model.constrained_trace).enumerate() {
        let _ = writeln!(out, "{i},{f},{},{},{}", c.objective, c.violation_a, c.violation_b);
    }
    out
}

pub fn save_model(model: &TrainedModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    mkdir(dir)?;
    let cs = &model.common_space;
    let pre = &cs.preprocessing;

    let pdir = dir.join("preprocessing");
    mkdir(&pdir)?;
    save_matrix(&column(&pre.mean_a), pdir.join("mean_a.xmqm"))?;
    save_matrix(&column(&pre.mean_b), pdir.join("mean_b.xmqm"))?;
    save_matrix(&pre.pca, pdir.join("pca.xmqm"))?;

    let mdir = dir.join("mapping");
    mkdir(&mdir)?;
    save_matrix(&cs.basis, mdir.join("basis.xmqm"))?;
    save_matrix(&cs.factor_u, mdir.join("factor_u.xmqm"))?;
    save_matrix(&cs.transform_r, mdir.join("transform_r.xmqm"))?;
    save_matrix(&model.mapping.sparse_codes, mdir.join("sparse_codes.xmqm"))?;
    save_matrix(&model.mapping.latent_b, mdir.join("latent_b.xmqm"))?;

    for modality in [Modality::A, Modality::B] {
        save_quantizer(model.quantizer(modality), &dir.join(quant_dir(modality)))?;
        save_codes(model.codes(modality), dir.join(format!("codes_{modality}.xmqm")))?;
    }
    write_atomic(&dir.join("trace.csv"), trace_csv(model).as_bytes())?;

    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config: model.config.clone(),
        num_items: model.quant.codes_a.num_items(),
        latent_dim: cs.latent_dim(),
        num_bases: cs.num_bases(),
        pca_dim: pre.pca.nrows(),
        raw_dim_a: pre.raw_dim(Modality::A),
        raw_dim_b: pre.raw_dim(Modality::B),
        objective_trace: model.objective_trace.clone(),
        constrained_trace: model.constrained_trace.clone(),
    };
    // written last so a readable manifest implies a complete directory
    save_json(&manifest, dir.join("manifest.json"))
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<ModelManifest> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = load_json(dir.join("manifest.json"))?;
    if manifest.format != MODEL_FORMAT || manifest.version != MODEL_VERSION {
        return Err(Error::Parse {
            path: dir.join("manifest.json"),
            message: format!(
                "unsupported model format {} v{}",
                manifest.format, manifest.version
            ),
        });
    }
    Ok(manifest)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<TrainedModel> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    let pdir = dir.join("preprocessing");
    let preprocessing = Preprocessing {
        mean_a: load_vector(&pdir.join("mean_a.xmqm"))?,
        mean_b: load_vector(&pdir.join("mean_b.xmqm"))?,
        pca: load_matrix(pdir.join("pca.xmqm"))?,
    };
    let mdir = dir.join("mapping");
    let common_space = CommonSpaceModel {
        basis: load_matrix(mdir.join("basis.xmqm"))?,
        factor_u: load_matrix(mdir.join("factor_u.xmqm"))?,
        transform_r: load_matrix(mdir.join("transform_r.xmqm"))?,
        preprocessing,
        hyper: manifest.config.mapping_hyper(),
    };
    let mapping = MappingState {
        sparse_codes: load_matrix(mdir.join("sparse_codes.xmqm"))?,
        latent_b: load_matrix(mdir.join("latent_b.xmqm"))?,
    };
    let quant = CollaborativeState {
        quant_a: load_quantizer(&dir.join(quant_dir(Modality::A)))?,
        quant_b: load_quantizer(&dir.join(quant_dir(Modality::B)))?,
        codes_a: load_codes(dir.join("codes_a.xmqm"))?,
        codes_b: load_codes(dir.join("codes_b.xmqm"))?,
    };
    quant.quant_a.check_codes(&quant.codes_a)?;
    quant.quant_b.check_codes(&quant.codes_b)?;

    let d = common_space.latent_dim();
    let consistent = common_space.basis.shape() == (manifest.pca_dim, manifest.num_bases)
        && common_space.factor_u.shape() == (manifest.raw_dim_b, d)
        && common_space.transform_r.shape() == (manifest.latent_dim, manifest.num_bases)
        && common_space.preprocessing.pca.shape() == (manifest.pca_dim, manifest.raw_dim_a)
        && mapping.sparse_codes.shape() == (manifest.num_bases, manifest.num_items)
        && mapping.latent_b.shape() == (d, manifest.num_items)
        && quant.quant_a.dim() == d
        && quant.quant_b.dim() == d
        && quant.codes_a.num_items() == manifest.num_items
        && quant.codes_b.num_items() == manifest.num_items;
    if !consistent {
        return Err(Error::Shape(format!(
            "model files in {} disagree with the manifest",
            dir.display()
        )));
    }
    Ok(TrainedModel {
        config: manifest.config,
        common_space,
        mapping,
        quant,
        objective_trace: manifest.objective_trace,
        constrained_trace: manifest.constrained_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, SynthParams};
    use crate::trainer::train;

    #[test]
    fn round_trip_is_exact() {
        let ds = synthesize(&SynthParams {
            num_pairs: 60,
            latent_dim: 6,
            dim_a: 20,
            dim_b: 12,
            ..Default::default()
        })
        .unwrap()
        .dataset;
        let cfg = TrainConfig {
            dictionary_size: 8,
            pca_dim: 10,
            num_bases: 16,
            outer_rounds: 1,
            ..TrainConfig::default()
        }
        .with_bits(6)
        .unwrap();
        let model = train(&ds, &cfg).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_model(&model, tmp.path()).unwrap();
        let back = load_model(tmp.path()).unwrap();
        assert_eq!(back, model);

        let tmp2 = tempfile::tempdir().unwrap();
        save_model(&back, tmp2.path()).unwrap();
        for f in ["manifest.json", "trace.csv", "mapping/basis.xmqm", "quant_b/quantizer.json"] {
            assert_eq!(
                fs::read(tmp.path().join(f)).unwrap(),
                fs::read(tmp2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let csv = fs::read_to_string(tmp.path().join("trace.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2);
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(tmp.path()), Err(Error::Io { .. })));
    }
}
