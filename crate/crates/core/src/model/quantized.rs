//! Post-training quantization pipeline: prepare -> calibrate -> convert.
//!
//! `prepare` attaches an empty observer to every weight, embedding table and
//! (optionally) linear input selected by a [`QuantSpec`]. `calibrate` feeds
//! weight observers from the weights themselves and activation observers
//! from float forward passes over calibration sequences. `convert` turns
//! every observer into quantization parameters and replaces weight payloads
//! with integer or power-of-two codes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::config::GPTConfig;
use super::forward::{run_forward, FloatExec, LanguageModel, LinearExec, OpStats, StorageSummary};
use super::weights::{GPTWeights, LinearId};
use crate::error::{Error, Result};
use crate::kernels::{linear_f32, shift_linear};
use crate::qspec::{ExecMode, QuantSpec};
use crate::quant::{
    compute_params, dequantize, pot_dequantize, pot_quantize, pot_storage_bits_folded, quantize,
    quantize_affine, Observer, PoTWeight, QScheme, QTensor, QuantParams,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Weight,
    Table,
    Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Float passthrough (activations, or not yet converted).
    Float,
    Uniform(QTensor),
    PoT(PoTWeight),
}

#[derive(Debug, Clone)]
pub struct Site {
    pub name: String,
    pub kind: SiteKind,
    pub scheme: QScheme,
    pub observer: Observer,
    pub params: Option<QuantParams>,
    pub payload: Payload,
    /// Dequantized payload, cached at convert time.
    dequantized: Option<Tensor>,
    summary: Option<SiteSummary>,
}

impl Site {
    fn new(name: String, kind: SiteKind, scheme: QScheme) -> Self {
        Self {
            name,
            kind,
            scheme,
            observer: Observer::new(),
            params: None,
            payload: Payload::Float,
            dequantized: None,
            summary: None,
        }
    }

    pub fn dequantized(&self) -> Option<&Tensor> {
        self.dequantized.as_ref()
    }

    pub fn summary(&self) -> Option<&SiteSummary> {
        self.summary.as_ref()
    }
}

/// Per-site quantization outcome for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub name: String,
    pub kind: SiteKind,
    pub scheme: String,
    pub scale: f64,
    pub zero_point: i64,
    pub storage_bits: u32,
    pub elements: u64,
    pub max_abs_error: f64,
    pub rmse: f64,
    pub zero_fraction: f64,
}

#[derive(Debug, Clone)]
struct LinearPlan {
    /// Dequantized weight; `None` runs the float weight.
    weight: Option<Tensor>,
    /// PoT codes for the integer path.
    pot: Option<PoTWeight>,
    activation: Option<QuantParams>,
}

#[derive(Debug, Clone)]
struct Plan {
    tok_table: Option<Tensor>,
    pos_table: Option<Tensor>,
    linears: Vec<LinearPlan>,
}

/// A model instrumented with quantization sites.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    /// Original float weights; biases and layer norms are always read from here.
    weights: GPTWeights,
    spec: QuantSpec,
    sites: Vec<Site>,
    index: HashMap<String, usize>,
    mode: ExecMode,
    plan: Option<Plan>,
}

pub const TOK_EMB_SITE: &str = "tok_emb";
pub const POS_EMB_SITE: &str = "pos_emb";

pub fn activation_site_name(id: LinearId) -> String {
    format!("{}.input", id.site_name())
}

/// Inserts observers for every site the spec selects.
pub fn prepare(weights: &GPTWeights, spec: &QuantSpec) -> Result<QuantizedModel> {
    weights.validate()?;
    spec.validate()?;
    let n_layer = weights.config.n_layer;
    let mut sites = Vec::new();
    for name in [TOK_EMB_SITE, POS_EMB_SITE] {
        if let Some(scheme) = spec.resolve(name)? {
            sites.push(Site::new(name.to_string(), SiteKind::Table, scheme));
        }
    }
    for id in LinearId::all(n_layer) {
        if id == LinearId::LmHead && weights.tied_lm_head {
            continue;
        }
        let name = id.site_name();
        if let Some(scheme) = spec.resolve(&name)? {
            sites.push(Site::new(name, SiteKind::Weight, scheme));
        }
    }
    if let Some(act) = spec.effective_activations() {
        for id in LinearId::all(n_layer) {
            sites.push(Site::new(
                activation_site_name(id),
                SiteKind::Activation,
                act,
            ));
        }
    }
    let index = sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.clone(), i))
        .collect();
    Ok(QuantizedModel {
        weights: weights.clone(),
        spec: spec.clone(),
        sites,
        index,
        mode: spec.mode,
        plan: None,
    })
}

struct CalibrationExec<'a> {
    weights: &'a GPTWeights,
    /// Activation site index per linear, indexed by `LinearId::index`.
    act_sites: &'a [Option<usize>],
    observers: &'a mut [Observer],
}

impl LinearExec for CalibrationExec<'_> {
    fn linear(&mut self, id: LinearId, x: &Tensor, stats: &mut OpStats) -> Result<Tensor> {
        if let Some(site) = self.act_sites[id.index(self.weights.config.n_layer)] {
            self.observers[site].update(x.data())?;
        }
        FloatExec(self.weights).linear(id, x, stats)
    }
}

impl QuantizedModel {
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, name: &str) -> Option<&Site> {
        self.index.get(name).map(|&i| &self.sites[i])
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn float_weights(&self) -> &GPTWeights {
        &self.weights
    }

    pub fn is_converted(&self) -> bool {
        self.plan.is_some()
    }

    /// Convenience: prepare, calibrate and convert in one go.
    pub fn build(weights: &GPTWeights, spec: &QuantSpec, batches: &[Vec<usize>]) -> Result<Self> {
        let mut m = prepare(weights, spec)?;
        m.calibrate(batches)?;
        m.convert()?;
        Ok(m)
    }

    /// Float weight tensor behind a weight or table site.
    fn source_tensor(&self, site: &Site) -> Option<&Tensor> {
        match site.kind {
            SiteKind::Table if site.name == TOK_EMB_SITE => Some(&self.weights.tok_emb),
            SiteKind::Table => Some(&self.weights.pos_emb),
            SiteKind::Weight => LinearId::all(self.weights.config.n_layer)
                .into_iter()
                .find(|id| id.site_name() == site.name)
                .map(|id| &self.weights.linear(id).weight),
            SiteKind::Activation => None,
        }
    }

    fn activation_sites(&self) -> Vec<Option<usize>> {
        LinearId::all(self.weights.config.n_layer)
            .into_iter()
            .map(|id| self.index.get(&activation_site_name(id)).copied())
            .collect()
    }

    /// Runs observers: weight and table sites read their tensors directly,
    /// activation sites watch float forward passes over `batches`.
    pub fn calibrate(&mut self, batches: &[Vec<usize>]) -> Result<()> {
        if batches.is_empty() {
            return Err(Error::Uncalibrated(None));
        }
        let mut observers: Vec<Observer> = self.sites.iter().map(|s| s.observer).collect();
        for (i, site) in self.sites.iter().enumerate() {
            if let Some(t) = self.source_tensor(site) {
                observers[i].update(t.data())?;
            }
        }
        let act_sites = self.activation_sites();
        if act_sites.iter().any(Option::is_some) {
            let mut exec = CalibrationExec {
                weights: &self.weights,
                act_sites: &act_sites,
                observers: &mut observers,
            };
            for seq in batches {
                run_forward(
                    &self.weights,
                    &self.weights.tok_emb,
                    &self.weights.pos_emb,
                    &mut exec,
                    seq,
                    &mut OpStats::default(),
                )?;
            }
        }
        for (site, obs) in self.sites.iter_mut().zip(observers) {
            site.observer = obs;
        }
        Ok(())
    }

    /// Computes parameters for every site and builds the execution plan.
    pub fn convert(&mut self) -> Result<()> {
        let mut sources = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            sources.push(self.source_tensor(site).cloned());
        }
        for (site, source) in self.sites.iter_mut().zip(sources) {
            let params = compute_params(&site.observer, site.scheme).map_err(|e| match e {
                Error::Uncalibrated(_) => Error::Uncalibrated(Some(site.name.clone())),
                other => other,
            })?;
            site.params = Some(params);
            let Some(w) = source else {
                site.payload = Payload::Float;
                site.dequantized = None;
                site.summary = None;
                continue;
            };
            let (payload, deq) = match site.scheme {
                QScheme::PoT(cfg) => {
                    let pw = pot_quantize(&w, params.scale as f32, &cfg)?;
                    let deq = pot_dequantize(&pw);
                    (Payload::PoT(pw), deq)
                }
                _ => {
                    let q = quantize(&w, &params)?;
                    let deq = dequantize(&q);
                    (Payload::Uniform(q), deq)
                }
            };
            site.summary = Some(summarize(site, &params, &payload, &w, &deq));
            site.payload = payload;
            site.dequantized = Some(deq);
        }
        self.plan = Some(self.build_plan()?);
        Ok(())
    }

    fn build_plan(&self) -> Result<Plan> {
        let table = |name: &str| self.site(name).and_then(|s| s.dequantized.clone());
        let tok_site = self.site(TOK_EMB_SITE);
        let mut linears = Vec::new();
        for id in LinearId::all(self.weights.config.n_layer) {
            let tied_head = id == LinearId::LmHead && self.weights.tied_lm_head;
            let weight_site = if tied_head {
                tok_site
            } else {
                self.site(&id.site_name())
            };
            let activation = self.site(&activation_site_name(id)).and_then(|s| s.params);
            let (weight, pot) = match weight_site {
                None => (None, None),
                Some(site) => {
                    let deq = site.dequantized.clone().expect("converted weight site");
                    let deq = if tied_head { deq.transpose2d()? } else { deq };
                    let pot = match (&site.payload, self.mode) {
                        (Payload::PoT(pw), ExecMode::Integer) => Some(if tied_head {
                            pw.transposed()?
                        } else {
                            pw.clone()
                        }),
                        _ => None,
                    };
                    if pot.is_some() && activation.is_none() {
                        return Err(Error::InvalidConfig(format!(
                            "integer execution of {} needs a calibrated activation site",
                            id.site_name()
                        )));
                    }
                    (Some(deq), pot)
                }
            };
            linears.push(LinearPlan {
                weight,
                pot,
                activation,
            });
        }
        Ok(Plan {
            tok_table: table(TOK_EMB_SITE),
            pos_table: table(POS_EMB_SITE),
            linears,
        })
    }

    /// Float weights with every quantized tensor replaced by its dequantized value.
    pub fn dequantized_weights(&self) -> Result<GPTWeights> {
        let mut w = self.weights.clone();
        for site in &self.sites {
            let Some(deq) = site.dequantized.clone() else {
                continue;
            };
            match site.name.as_str() {
                TOK_EMB_SITE => w.tok_emb = deq,
                POS_EMB_SITE => w.pos_emb = deq,
                name => {
                    let id = LinearId::all(w.config.n_layer)
                        .into_iter()
                        .find(|id| id.site_name() == name)
                        .expect("weight site names a linear");
                    w.linear_mut(id).weight = deq;
                }
            }
        }
        w.retie()?;
        Ok(w)
    }

    pub fn site_summaries(&self) -> Vec<SiteSummary> {
        self.sites
            .iter()
            .filter_map(|s| s.summary.clone())
            .collect()
    }
}

fn summarize(
    site: &Site,
    params: &QuantParams,
    payload: &Payload,
    orig: &Tensor,
    deq: &Tensor,
) -> SiteSummary {
    let n = orig.len().max(1) as f64;
    let (mut max_abs, mut sq) = (0.0f64, 0.0f64);
    for (a, b) in orig.data().iter().zip(deq.data()) {
        let e = (*a as f64 - *b as f64).abs();
        max_abs = max_abs.max(e);
        sq += e * e;
    }
    let zeros = match payload {
        Payload::PoT(pw) => pw.zero_count(),
        Payload::Uniform(q) => q
            .values
            .iter()
            .filter(|&&v| v as i64 == q.params.zero_point)
            .count(),
        Payload::Float => 0,
    };
    SiteSummary {
        name: site.name.clone(),
        kind: site.kind,
        scheme: site.scheme.to_string(),
        scale: params.scale,
        zero_point: params.zero_point,
        storage_bits: site.scheme.storage_bits(),
        elements: orig.len() as u64,
        max_abs_error: max_abs,
        rmse: (sq / n).sqrt(),
        zero_fraction: zeros as f64 / n,
    }
}

struct QuantExec<'a> {
    model: &'a QuantizedModel,
    plan: &'a Plan,
}

fn fake_quantize(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    Ok(dequantize(&quantize(x, params)?))
}

impl LinearExec for QuantExec<'_> {
    fn linear(&mut self, id: LinearId, x: &Tensor, stats: &mut OpStats) -> Result<Tensor> {
        let weights = &self.model.weights;
        let lp = &self.plan.linears[id.index(weights.config.n_layer)];
        let lin = weights.linear(id);
        let bias = lin.bias.as_ref();
        if let (Some(pot), Some(act)) = (&lp.pot, &lp.activation) {
            let xq = quantize_affine(x, act)?;
            return shift_linear(&xq, pot, bias, &mut stats.linear);
        }
        let w = lp.weight.as_ref().unwrap_or(&lin.weight);
        match &lp.activation {
            Some(act) => linear_f32(&fake_quantize(x, act)?, w, bias, &mut stats.linear),
            None => linear_f32(x, w, bias, &mut stats.linear),
        }
    }
}

impl LanguageModel for QuantizedModel {
    fn config(&self) -> &GPTConfig {
        &self.weights.config
    }

    fn forward_counted(&self, tokens: &[usize], stats: &mut OpStats) -> Result<Tensor> {
        match &self.plan {
            None => self.weights.forward_counted(tokens, stats),
            Some(plan) => {
                let tok = plan.tok_table.as_ref().unwrap_or(&self.weights.tok_emb);
                let pos = plan.pos_table.as_ref().unwrap_or(&self.weights.pos_emb);
                let mut exec = QuantExec { model: self, plan };
                run_forward(&self.weights, tok, pos, &mut exec, tokens, stats)
            }
        }
    }

    fn storage(&self) -> StorageSummary {
        let mut s = self.weights.storage();
        for site in &self.sites {
            if site.kind == SiteKind::Activation {
                continue;
            }
            let Some(t) = self.source_tensor(site) else {
                continue;
            };
            let n = t.len() as u64;
            let folded = match &site.scheme {
                QScheme::PoT(cfg) => pot_storage_bits_folded(cfg),
                other => other.storage_bits(),
            };
            s.quantized_bits = s.quantized_bits - 32 * n + site.scheme.storage_bits() as u64 * n;
            s.quantized_bits_folded = s.quantized_bits_folded - 32 * n + folded as u64 * n;
        }
        s
    }
}
