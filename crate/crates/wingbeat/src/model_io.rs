//! Versioned JSON model document.
//!
//! ```json
//! { "version": 1, "kind": "two_stage", "kernel": "rbf", "gamma": 0.03,
//!   "classes": ["background", "species_a", ...], "background": "background",
//!   "threshold": 0.0, "normalizer": {"mean": [...], "std": [...]},
//!   "dsp": {...}, "models": [{"stage": 1, "pair": ["mosquito", "background"],
//!   "bias": ..., "support_vectors": [[...]], "dual_coefficients": [...]}, ...] }
//! ```
//!
//! `pair` lists the positive class first. Numbers are written with full
//! round-trip precision.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wingbeat_core::dsp::DspConfig;
use wingbeat_core::pipeline::{Normalizer, TwoStageModel};
use wingbeat_core::svm::{BinarySvmModel, KernelSpec, MulticlassSvmModel, PairModel};
use wingbeat_core::ClassId;

use crate::error::{io_err, Error, Result};
use crate::fsutil::atomic_write_bytes;

pub const MODEL_VERSION: u64 = 1;
const KIND: &str = "two_stage";

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    version: u64,
    kind: String,
    kernel: String,
    #[serde(default)]
    gamma: Option<f64>,
    classes: Vec<ClassId>,
    background: ClassId,
    threshold: f64,
    normalizer: Normalizer,
    dsp: DspConfig,
    models: Vec<PairDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairDocument {
    stage: u8,
    pair: [ClassId; 2],
    bias: f64,
    support_vectors: Vec<Vec<f64>>,
    dual_coefficients: Vec<f64>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

fn kernel_fields(kernel: &KernelSpec) -> (String, Option<f64>) {
    match kernel {
        KernelSpec::Linear => ("linear".into(), None),
        KernelSpec::Rbf { gamma } => ("rbf".into(), Some(*gamma)),
    }
}

fn pair_doc(stage: u8, model: &BinarySvmModel) -> PairDocument {
    PairDocument {
        stage,
        pair: [model.positive_class.clone(), model.negative_class.clone()],
        bias: model.bias,
        support_vectors: model.support_vectors.clone(),
        dual_coefficients: model.dual_coefficients.clone(),
    }
}

pub fn to_json(model: &TwoStageModel) -> Result<String> {
    let kernel = model.stage1.kernel;
    if model.stage2.pairwise.iter().any(|p| p.model.kernel != kernel) {
        return Err(Error::ModelField {
            field: "kernel",
            message: "both stages must share one kernel".into(),
        });
    }
    let (kernel_name, gamma) = kernel_fields(&kernel);
    let mut models = vec![pair_doc(1, &model.stage1)];
    models.extend(model.stage2.pairwise.iter().map(|p| pair_doc(2, &p.model)));
    let doc = ModelDocument {
        version: MODEL_VERSION,
        kind: KIND.into(),
        kernel: kernel_name,
        gamma,
        classes: model.classes(),
        background: model.background.clone(),
        threshold: model.threshold,
        normalizer: model.normalizer.clone(),
        dsp: model.dsp_config.clone(),
        models,
    };
    Ok(serde_json::to_string_pretty(&doc).expect("model document serializes"))
}

fn field(field: &'static str, message: impl Into<String>) -> Error {
    Error::ModelField {
        field,
        message: message.into(),
    }
}

fn parse_error(e: serde_json::Error) -> Error {
    Error::ModelParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn from_json(text: &str) -> Result<TwoStageModel> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(parse_error)?;
    if probe.version != MODEL_VERSION {
        return Err(Error::ModelVersion {
            found: probe.version,
            expected: MODEL_VERSION,
        });
    }
    let doc: ModelDocument = serde_json::from_str(text).map_err(parse_error)?;
    if doc.kind != KIND {
        return Err(field("kind", format!("expected `{KIND}`, found `{}`", doc.kind)));
    }
    let kernel = match (doc.kernel.as_str(), doc.gamma) {
        ("linear", _) => KernelSpec::Linear,
        ("rbf", Some(gamma)) => KernelSpec::Rbf { gamma },
        ("rbf", None) => return Err(field("gamma", "rbf kernel needs gamma")),
        (other, _) => return Err(field("kernel", format!("unknown kernel `{other}`"))),
    };
    kernel.validate().map_err(|e| field("gamma", e.to_string()))?;
    doc.dsp.validate().map_err(|e| field("dsp", e.to_string()))?;
    if doc.normalizer.mean.len() != doc.normalizer.std.len() {
        return Err(field("normalizer", "mean and std lengths differ"));
    }
    if doc.classes.first() != Some(&doc.background) {
        return Err(field("classes", "must start with the background class"));
    }
    let species: Vec<ClassId> = doc.classes[1..].to_vec();
    let dim = doc.normalizer.mean.len();

    let binary = |p: PairDocument| -> Result<BinarySvmModel> {
        if p.support_vectors.len() != p.dual_coefficients.len() {
            return Err(field("models", "support_vectors and dual_coefficients lengths differ"));
        }
        if p.support_vectors.iter().any(|sv| sv.len() != dim) {
            return Err(field("models", format!("support vector dimension differs from {dim}")));
        }
        let [positive_class, negative_class] = p.pair;
        Ok(BinarySvmModel {
            support_vectors: p.support_vectors,
            dual_coefficients: p.dual_coefficients,
            bias: p.bias,
            kernel,
            negative_class,
            positive_class,
        })
    };

    let mut stage1 = None;
    let mut pairwise = Vec::new();
    for p in doc.models {
        match p.stage {
            1 if stage1.is_none() => {
                if p.pair[1] != doc.background {
                    return Err(field("models", "stage-1 negative class must be the background"));
                }
                stage1 = Some(binary(p)?);
            }
            1 => return Err(field("models", "more than one stage-1 model")),
            2 => {
                let index = |c: &ClassId| {
                    species
                        .iter()
                        .position(|s| s == c)
                        .ok_or_else(|| field("models", format!("pair names unknown species `{c}`")))
                };
                let (first, second) = (index(&p.pair[0])?, index(&p.pair[1])?);
                pairwise.push(PairModel {
                    first,
                    second,
                    model: binary(p)?,
                });
            }
            s => return Err(field("models", format!("unknown stage {s}"))),
        }
    }
    let k = species.len();
    if pairwise.len() != k * (k - 1) / 2 {
        return Err(field(
            "models",
            format!(
                "{} stage-2 models for {k} species, expected {}",
                pairwise.len(),
                k * (k - 1) / 2
            ),
        ));
    }
    Ok(TwoStageModel {
        normalizer: doc.normalizer,
        stage1: stage1.ok_or_else(|| field("models", "missing stage-1 model"))?,
        stage2: MulticlassSvmModel {
            classes: species.clone(),
            pairwise,
        },
        species_list: species,
        background: doc.background,
        threshold: doc.threshold,
        dsp_config: doc.dsp,
    })
}

pub fn save_model(path: &Path, model: &TwoStageModel) -> Result<()> {
    atomic_write_bytes(path, to_json(model)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<TwoStageModel> {
    from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
}
