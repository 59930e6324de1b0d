//! Model parameters as one f64 tensor file per named array plus `params.json`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use stableseg_core::decoder::ModelParams;
use stableseg_core::numerics::Matrix;

use crate::config::{ModelSection, RunConfig};
use crate::dataset::write_json;
use crate::tensor::Tensor;

pub const PARAMS_FORMAT: &str = "stableseg-params/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub format: String,
    pub model: ModelSection,
    pub max_clip_len: usize,
    pub output_size: Option<(usize, usize)>,
    pub tensors: Vec<TensorEntry>,
}

fn matrix<'a>(name: String, m: &'a mut Matrix, out: &mut Vec<(String, Vec<usize>, &'a mut [f64])>) {
    let dims = vec![m.rows(), m.cols()];
    out.push((name, dims, m.data_mut()));
}

fn vector<'a>(name: String, v: &'a mut [f64], out: &mut Vec<(String, Vec<usize>, &'a mut [f64])>) {
    let dims = vec![v.len()];
    out.push((name, dims, v));
}

/// Every learnable array under a stable name.
fn named_arrays(p: &mut ModelParams) -> Vec<(String, Vec<usize>, &mut [f64])> {
    let mut out = Vec::new();
    // the query matrix is stored separately: QuerySet has no mutable access
    let q = &mut p.query;
    vector("query.alpha_txt".into(), std::slice::from_mut(&mut q.alpha_txt), &mut out);
    matrix("query.prior.class_embeddings".into(), &mut q.prior.class_embeddings, &mut out);
    vector("query.prior.context".into(), &mut q.prior.context, &mut out);
    for (l, layer) in q.layers.iter_mut().enumerate() {
        let n = |s: &str| format!("query.layer{l}.{s}");
        matrix(n("w_q"), &mut layer.w_q, &mut out);
        matrix(n("w_k"), &mut layer.w_k, &mut out);
        matrix(n("w_v"), &mut layer.w_v, &mut out);
        matrix(n("phi"), &mut layer.phi, &mut out);
        vector(n("phi_bias"), &mut layer.phi_bias, &mut out);
        vector(n("ln_gain"), &mut layer.ln_gain, &mut out);
        vector(n("ln_bias"), &mut layer.ln_bias, &mut out);
        vector(n("gate_logit"), std::slice::from_mut(&mut layer.gate_logit), &mut out);
    }
    matrix("embed.temporal".into(), &mut p.embeddings.temporal, &mut out);
    matrix("embed.scale".into(), &mut p.embeddings.scale, &mut out);
    for (i, b) in p.decoder.blocks.iter_mut().enumerate() {
        let n = |s: &str| format!("decoder.block{i}.{s}");
        vector(n("norm1_gain"), &mut b.norm1_gain, &mut out);
        vector(n("norm1_bias"), &mut b.norm1_bias, &mut out);
        matrix(n("w_q"), &mut b.w_q, &mut out);
        matrix(n("w_k"), &mut b.w_k, &mut out);
        matrix(n("w_v"), &mut b.w_v, &mut out);
        matrix(n("w_o"), &mut b.w_o, &mut out);
        vector(n("norm2_gain"), &mut b.norm2_gain, &mut out);
        vector(n("norm2_bias"), &mut b.norm2_bias, &mut out);
        matrix(n("ff1"), &mut b.ff1, &mut out);
        vector(n("ff1_bias"), &mut b.ff1_bias, &mut out);
        matrix(n("ff2"), &mut b.ff2, &mut out);
        vector(n("ff2_bias"), &mut b.ff2_bias, &mut out);
    }
    matrix("head.class_proj".into(), &mut p.decoder.head.class_proj, &mut out);
    vector("head.mask_scale".into(), &mut p.decoder.head.mask_scale, &mut out);
    for (l, (proj, bias)) in p.fuse.proj.iter_mut().zip(p.fuse.proj_bias.iter_mut()).enumerate() {
        matrix(format!("fuse.scale{l}.proj"), proj, &mut out);
        vector(format!("fuse.scale{l}.bias"), bias, &mut out);
    }
    vector("fuse.ln_gain".into(), &mut p.fuse.ln_gain, &mut out);
    vector("fuse.ln_bias".into(), &mut p.fuse.ln_bias, &mut out);
    out
}

fn file_name(name: &str) -> String {
    format!("{name}.t2g")
}

pub fn save_params(dir: &Path, params: &ModelParams, model: &ModelSection) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut p = params.clone();
    let max_clip_len = p.embeddings.temporal.rows();
    let mut tensors = Vec::new();
    let q = p.query.queries.values();
    let qdims = vec![q.rows(), q.cols()];
    Tensor::f64(qdims.clone(), q.data().to_vec())?.save(dir.join(file_name("query.queries")))?;
    tensors.push(TensorEntry {
        name: "query.queries".into(),
        file: file_name("query.queries"),
        dims: qdims,
    });
    for (name, dims, data) in named_arrays(&mut p) {
        let file = file_name(&name);
        Tensor::f64(dims.clone(), data.to_vec())?.save(dir.join(&file))?;
        tensors.push(TensorEntry { name, file, dims });
    }
    write_json(
        &dir.join("params.json"),
        &ParamsManifest {
            format: PARAMS_FORMAT.into(),
            model: model.clone(),
            max_clip_len,
            output_size: params.output_size,
            tensors,
        },
    )
}

pub fn load_params(dir: &Path) -> Result<(ModelParams, ModelSection)> {
    let path = dir.join("params.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: ParamsManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(m.format == PARAMS_FORMAT, "unknown params format {:?}", m.format);
    let cfg = RunConfig {
        model: m.model.clone(),
        ..RunConfig::default()
    };
    let spec = cfg.scale_spec()?;
    let mut params = ModelParams::init(0, &spec, &cfg.model_config(m.max_clip_len));
    params.output_size = m.output_size;
    let files: BTreeMap<&str, &TensorEntry> = m.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let read = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let entry = files.get(name).with_context(|| format!("params.json lacks tensor {name}"))?;
        let t = Tensor::load(dir.join(&entry.file)).with_context(|| format!("loading {name}"))?;
        if t.dims() != dims {
            bail!("tensor {name} has dims {:?}, expected {dims:?}", t.dims());
        }
        let v = t.to_f64();
        ensure!(v.iter().all(|x| x.is_finite()), "tensor {name} holds non-finite values");
        Ok(v)
    };
    let q = params.query.queries.values();
    let queries = Matrix::new(q.rows(), q.cols(), read("query.queries", &[q.rows(), q.cols()])?)?;
    params.query.queries = stableseg_core::queries::QuerySet::new(queries);
    let expected = named_arrays(&mut params).len() + 1;
    ensure!(m.tensors.len() == expected, "params.json lists {} tensors, expected {expected}", m.tensors.len());
    for (name, dims, data) in named_arrays(&mut params) {
        data.copy_from_slice(&read(&name, &dims)?);
    }
    Ok((params, m.model))
}
