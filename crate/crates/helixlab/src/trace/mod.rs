//! Activation capture, re-injection, and on-disk dumps.
//!
//! A [`SiteKey`] addresses one activation vector: a named site inside a
//! layer at one token position. [`run_with_trace`] records requested sites
//! without disturbing the forward pass; [`run_with_intervention`] overwrites
//! sites before anything downstream consumes them. Dumps serialize traces to
//! the shared container format so activations captured from other models can
//! be analyzed without the producing model present.

use crate::error::{Error, Result};
use crate::model::container::{read_container, write_container};
use crate::model::task::{TaskSpec, EQ_POS};
use crate::model::transformer::{HookSite, SiteKind, ToyTransformer};
use crate::model::SEQ_LEN;
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

/// Activation site within a layer. `ResidPre` with `layer == n_layers`
/// addresses the final pre-unembed stream; `Logits` uses the same layer
/// index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    ResidPre,
    AttnOut,
    HeadOut(usize),
    MlpOut,
    NeuronPre,
    Logits,
}

impl Site {
    pub(crate) fn kind(self) -> SiteKind {
        match self {
            Site::ResidPre => SiteKind::ResidPre,
            Site::AttnOut => SiteKind::AttnOut,
            Site::HeadOut(h) => SiteKind::HeadOut(h),
            Site::MlpOut => SiteKind::MlpOut,
            Site::NeuronPre => SiteKind::NeuronPre,
            Site::Logits => SiteKind::Logits,
        }
    }

    fn parse(s: &str) -> Result<Site> {
        Ok(match s {
            "resid_pre" => Site::ResidPre,
            "attn_out" => Site::AttnOut,
            "mlp_out" => Site::MlpOut,
            "neuron_pre" => Site::NeuronPre,
            "logits" => Site::Logits,
            _ => {
                let h = s
                    .strip_prefix("head_out(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|r| r.parse::<usize>().ok());
                match h {
                    Some(h) => Site::HeadOut(h),
                    None => return Err(Error::UnknownSite(s.to_string())),
                }
            }
        })
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::ResidPre => write!(f, "resid_pre"),
            Site::AttnOut => write!(f, "attn_out"),
            Site::HeadOut(h) => write!(f, "head_out({h})"),
            Site::MlpOut => write!(f, "mlp_out"),
            Site::NeuronPre => write!(f, "neuron_pre"),
            Site::Logits => write!(f, "logits"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteKey {
    pub layer: usize,
    pub site: Site,
    pub position: usize,
}

impl SiteKey {
    pub fn new(layer: usize, site: Site, position: usize) -> Self {
        SiteKey { layer, site, position }
    }

    /// Final-token residual stream entering `layer`.
    pub fn resid(layer: usize) -> Self {
        SiteKey::new(layer, Site::ResidPre, EQ_POS)
    }

    /// Width of the stored vector for this site under `model`'s config.
    pub fn width(&self, model: &ToyTransformer) -> usize {
        match self.site {
            Site::NeuronPre => model.config.d_mlp,
            Site::Logits => model.config.vocab_size,
            _ => model.config.d_model,
        }
    }

    pub fn validate(&self, model: &ToyTransformer, seq_len: usize) -> Result<()> {
        let l = model.config.n_layers;
        let ok = match self.site {
            Site::ResidPre => self.layer <= l,
            Site::Logits => self.layer == l,
            Site::HeadOut(h) => self.layer < l && h < model.config.n_heads,
            _ => self.layer < l,
        };
        if !ok || self.position >= seq_len {
            return Err(Error::UnknownSite(self.to_string()));
        }
        Ok(())
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}.{}.p{}", self.layer, self.site, self.position)
    }
}

impl std::str::FromStr for SiteKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<SiteKey> {
        let bad = || Error::UnknownSite(s.to_string());
        let rest = s.strip_prefix('l').ok_or_else(bad)?;
        let (layer_str, rest) = rest.split_once('.').ok_or_else(bad)?;
        let (site_str, pos_str) = rest.rsplit_once(".p").ok_or_else(bad)?;
        Ok(SiteKey {
            layer: layer_str.parse().map_err(|_| bad())?,
            site: Site::parse(site_str)?,
            position: pos_str.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptInfo {
    pub a: i64,
    pub b: i64,
    pub task: String,
    pub correct: bool,
}

/// Captured activations for one prompt.
#[derive(Clone, Debug)]
pub struct Trace {
    pub info: PromptInfo,
    values: BTreeMap<SiteKey, Tensor>,
}

impl Trace {
    pub fn new(info: PromptInfo) -> Self {
        Trace { info, values: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: SiteKey, value: Tensor) {
        self.values.insert(key, value);
    }

    pub fn get(&self, key: &SiteKey) -> Option<&Tensor> {
        self.values.get(key)
    }

    pub fn value(&self, key: &SiteKey) -> Result<&Tensor> {
        self.values.get(key).ok_or_else(|| Error::UnknownSite(format!("{key} not in trace")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &SiteKey> {
        self.values.keys()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Run the model over tokenized `(a, b)` prompts, capturing `sites` into one
/// trace per prompt. The returned logits are bit-identical to an
/// uninstrumented forward.
pub fn run_with_trace(
    model: &ToyTransformer,
    task: &TaskSpec,
    pairs: &[(i64, i64)],
    sites: &[SiteKey],
) -> Result<(Tensor, Vec<Trace>)> {
    let prompts: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| task.tokenize(a, b)).collect::<Result<_>>()?;
    let n = prompts.len();
    let s = SEQ_LEN;
    for key in sites {
        key.validate(model, s)?;
    }
    let mut traces: Vec<Trace> = pairs
        .iter()
        .map(|&(a, b)| {
            Trace::new(PromptInfo { a, b, task: task.name().to_string(), correct: false })
        })
        .collect();

    let mut by_hook: BTreeMap<(usize, SiteKind), Vec<SiteKey>> = BTreeMap::new();
    for key in sites {
        by_hook.entry((key.layer, key.site.kind())).or_default().push(*key);
    }

    let logits = {
        let traces = &mut traces;
        let mut hook = |hs: &HookSite, t: &mut Tensor| -> Result<()> {
            if let Some(keys) = by_hook.get(&(hs.layer, hs.kind)) {
                let width = t.numel() / (n * s);
                for key in keys {
                    for (i, trace) in traces.iter_mut().enumerate() {
                        let row = i * s + key.position;
                        let v = t.data()[row * width..(row + 1) * width].to_vec();
                        trace.insert(*key, Tensor::vector(v));
                    }
                }
            }
            Ok(())
        };
        model.forward_hooked(&prompts, &mut hook)?
    };

    let v = model.config.vocab_size;
    for (i, (trace, &(a, b))) in traces.iter_mut().zip(pairs).enumerate() {
        let row = i * s + (s - 1);
        let logit_row = &logits.data()[row * v..(row + 1) * v];
        let argmax = logit_row
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        trace.info.correct = argmax == task.answer_token(a, b)?;
    }
    Ok((logits, traces))
}

/// How a patched value reaches the logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    /// Replace the activation in place; downstream layers see the new value.
    All,
    /// Leave the computation untouched and add the patch-minus-computed
    /// delta to the final pre-unembed residual only, isolating the site's
    /// direct path to the logits.
    DirectOnly,
}

/// Run the model on raw token prompts with `patches` applied. Each patch
/// tensor is either a single vector broadcast over the batch or a
/// `(batch, width)` matrix of per-prompt vectors. Returns `(batch*seq, vocab)`
/// logits.
pub fn run_with_intervention(
    model: &ToyTransformer,
    prompts: &[Vec<usize>],
    patches: &BTreeMap<SiteKey, Tensor>,
    routing: Routing,
) -> Result<Tensor> {
    let routed: Vec<(SiteKey, Tensor, Routing)> =
        patches.iter().map(|(k, v)| (*k, v.clone(), routing)).collect();
    run_with_routed_patches(model, prompts, &routed)
}

/// As `run_with_intervention`, but with a routing choice per patch, so
/// in-place replacements and direct-only deltas can share one run.
pub fn run_with_routed_patches(
    model: &ToyTransformer,
    prompts: &[Vec<usize>],
    patches: &[(SiteKey, Tensor, Routing)],
) -> Result<Tensor> {
    let n = prompts.len();
    let s = prompts.first().map(|p| p.len()).unwrap_or(SEQ_LEN);
    let d = model.config.d_model;
    let mut by_hook: BTreeMap<(usize, SiteKind), Vec<(&SiteKey, &Tensor, Routing)>> = BTreeMap::new();
    let mut any_direct = false;
    for (key, value, routing) in patches {
        key.validate(model, s)?;
        let width = key.width(model);
        let ok = value.shape() == [width] || value.shape() == [n, width];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "patch value",
                lhs: vec![n, width],
                rhs: value.shape().to_vec(),
            });
        }
        if *routing == Routing::DirectOnly && key.site != Site::Logits {
            if width != d {
                return Err(Error::invalid(
                    "direct-only routing needs a residual-width site (head_out, attn_out, mlp_out, resid_pre)",
                ));
            }
            any_direct = true;
        }
        by_hook.entry((key.layer, key.site.kind())).or_default().push((key, value, *routing));
    }

    // position -> per-prompt deltas destined for the final residual
    let mut deferred: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    let final_layer = model.config.n_layers;

    let mut hook = |hs: &HookSite, t: &mut Tensor| -> Result<()> {
        if let Some(entries) = by_hook.get(&(hs.layer, hs.kind)) {
            let width = t.numel() / (n * s);
            for (key, value, routing) in entries {
                let replace = *routing == Routing::All || key.site == Site::Logits;
                for i in 0..n {
                    let row = i * s + key.position;
                    let src = if value.shape().len() == 1 {
                        value.data()
                    } else {
                        &value.data()[i * width..(i + 1) * width]
                    };
                    let dst = &mut t.data_mut()[row * width..(row + 1) * width];
                    if replace {
                        dst.copy_from_slice(src);
                    } else {
                        let deltas = deferred
                            .entry(key.position)
                            .or_insert_with(|| vec![0.0; n * d]);
                        for (k, (&pv, &cv)) in src.iter().zip(dst.iter()).enumerate() {
                            deltas[i * d + k] += pv - cv;
                        }
                    }
                }
            }
        }
        if any_direct && hs.layer == final_layer && hs.kind == SiteKind::ResidPre {
            for (&pos, deltas) in &deferred {
                for i in 0..n {
                    let row = i * s + pos;
                    let dst = &mut t.data_mut()[row * d..(row + 1) * d];
                    for (x, dv) in dst.iter_mut().zip(&deltas[i * d..(i + 1) * d]) {
                        *x += dv;
                    }
                }
            }
        }
        Ok(())
    };
    model.forward_hooked(prompts, &mut hook)
}

const DUMP_KIND: &str = "dump";

#[derive(Serialize, Deserialize)]
struct DumpMeta {
    kind: String,
    model_desc: serde_json::Value,
    prompts: Vec<PromptInfo>,
}

/// Serialize traces to `dir` in the shared container format. `model_desc`
/// is free-form provenance (architecture, seed, source).
pub fn export_dump(traces: &[Trace], model_desc: serde_json::Value, dir: &Path) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Insufficient { what: "traces to export".into(), need: 1, have: 0 });
    }
    let meta = DumpMeta {
        kind: DUMP_KIND.into(),
        model_desc,
        prompts: traces.iter().map(|t| t.info.clone()).collect(),
    };
    let mut arrays: Vec<(String, &Tensor)> = Vec::new();
    for (i, trace) in traces.iter().enumerate() {
        for (key, value) in &trace.values {
            arrays.push((format!("t{i}.{key}"), value));
        }
    }
    write_container(dir, serde_json::to_value(&meta)?, &arrays)
}

/// Read a dump back. Returns the stored model description and one trace per
/// recorded prompt.
pub fn import_dump(dir: &Path) -> Result<(serde_json::Value, Vec<Trace>)> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingArtifact {
            path: dir.display().to_string(),
            producer: "helixlab capture".into(),
        });
    }
    let (meta_value, arrays) = read_container(dir)?;
    let meta: DumpMeta = serde_json::from_value(meta_value)
        .map_err(|e| Error::DumpFormat(format!("dump manifest: {e}")))?;
    if meta.kind != DUMP_KIND {
        return Err(Error::DumpFormat(format!("expected kind=dump, got {}", meta.kind)));
    }
    let mut traces: Vec<Trace> = meta.prompts.into_iter().map(Trace::new).collect();
    for (name, tensor) in arrays {
        let (idx_str, key_str) = name
            .strip_prefix('t')
            .and_then(|r| r.split_once('.'))
            .ok_or_else(|| Error::DumpFormat(format!("unparseable array name {name}")))?;
        let idx: usize = idx_str
            .parse()
            .map_err(|_| Error::DumpFormat(format!("unparseable array name {name}")))?;
        let key: SiteKey = key_str.parse()?;
        let trace = traces
            .get_mut(idx)
            .ok_or_else(|| Error::DumpFormat(format!("array {name}: no prompt {idx}")))?;
        trace.insert(key, tensor);
    }
    Ok((meta.model_desc, traces))
}

/// Attention mass from the final position onto labeled prompt positions,
/// averaged over the batch. `on_other` absorbs the remaining positions, so
/// the four fields sum to 1 per head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadAttnProfile {
    pub layer: usize,
    pub head: usize,
    pub on_a: f64,
    pub on_b: f64,
    pub on_last: f64,
    pub on_other: f64,
}

pub fn attention_profile(
    model: &ToyTransformer,
    task: &TaskSpec,
    pairs: &[(i64, i64)],
) -> Result<Vec<HeadAttnProfile>> {
    if pairs.is_empty() {
        return Err(Error::Insufficient { what: "prompts".into(), need: 1, have: 0 });
    }
    let prompts: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| task.tokenize(a, b)).collect::<Result<_>>()?;
    let n = prompts.len();
    let s = SEQ_LEN;
    let (a_pos, b_pos, last) = (crate::model::A_POS, crate::model::B_POS, s - 1);
    let mut rows: Vec<HeadAttnProfile> = Vec::new();
    for l in 0..model.config.n_layers {
        for h in 0..model.config.n_heads {
            rows.push(HeadAttnProfile { layer: l, head: h, on_a: 0.0, on_b: 0.0, on_last: 0.0, on_other: 0.0 });
        }
    }
    let n_heads = model.config.n_heads;
    let mut hook = |hs: &HookSite, t: &mut Tensor| -> Result<()> {
        if let SiteKind::AttnPattern(h) = hs.kind {
            let slot = &mut rows[hs.layer * n_heads + h];
            for i in 0..n {
                let base = (i * s + last) * s;
                let row = &t.data()[base..base + s];
                for (pos, &w) in row.iter().enumerate() {
                    let w = w as f64 / n as f64;
                    if pos == a_pos {
                        slot.on_a += w;
                    } else if pos == b_pos {
                        slot.on_b += w;
                    } else if pos == last {
                        slot.on_last += w;
                    } else {
                        slot.on_other += w;
                    }
                }
            }
        }
        Ok(())
    };
    model.forward_hooked(&prompts, &mut hook)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TaskSpec};

    fn setup() -> (ToyTransformer, TaskSpec) {
        let task = TaskSpec::add_mod(11);
        let config = ModelConfig::tiny(&task, 3);
        (ToyTransformer::new(&config).unwrap(), task)
    }

    fn some_pairs(task: &TaskSpec, n: usize) -> Vec<(i64, i64)> {
        task.valid_pairs().into_iter().step_by(7).take(n).collect()
    }

    #[test]
    fn capture_is_transparent_and_matches_forward() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 12);
        let sites: Vec<SiteKey> = (0..=model.config.n_layers).map(SiteKey::resid).collect();
        let (logits, traces) = run_with_trace(&model, &task, &pairs, &sites).unwrap();
        let prompts: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| task.tokenize(a, b).unwrap()).collect();
        let plain = model.forward(&prompts).unwrap();
        assert_eq!(logits.data(), plain.data());
        assert_eq!(traces.len(), pairs.len());
        for t in &traces {
            assert_eq!(t.len(), sites.len());
        }
    }

    #[test]
    fn residual_stream_telescopes() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 6);
        let l = model.config.n_layers;
        let mut sites: Vec<SiteKey> = (0..=l).map(SiteKey::resid).collect();
        for layer in 0..l {
            sites.push(SiteKey::new(layer, Site::AttnOut, EQ_POS));
            sites.push(SiteKey::new(layer, Site::MlpOut, EQ_POS));
        }
        let (_, traces) = run_with_trace(&model, &task, &pairs, &sites).unwrap();
        for t in &traces {
            let mut acc = t.value(&SiteKey::resid(0)).unwrap().data().to_vec();
            for layer in 0..l {
                let a = t.value(&SiteKey::new(layer, Site::AttnOut, EQ_POS)).unwrap();
                let m = t.value(&SiteKey::new(layer, Site::MlpOut, EQ_POS)).unwrap();
                for (x, (&av, &mv)) in acc.iter_mut().zip(a.data().iter().zip(m.data())) {
                    *x += av + mv;
                }
            }
            let end = t.value(&SiteKey::resid(l)).unwrap();
            for (x, y) in acc.iter().zip(end.data()) {
                assert!((x - y).abs() <= 1e-5, "telescoped {x} vs stored {y}");
            }
        }
    }

    #[test]
    fn logits_site_and_neuron_pre_match_oracles() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 4);
        let l = model.config.n_layers;
        let sites = vec![
            SiteKey::new(l, Site::Logits, EQ_POS),
            SiteKey::new(0, Site::NeuronPre, EQ_POS),
            SiteKey::resid(0),
            SiteKey::new(0, Site::AttnOut, EQ_POS),
        ];
        let (logits, traces) = run_with_trace(&model, &task, &pairs, &sites).unwrap();
        let v = model.config.vocab_size;
        let s = SEQ_LEN;
        for (i, t) in traces.iter().enumerate() {
            let row = i * s + EQ_POS;
            let stored = t.value(&SiteKey::new(l, Site::Logits, EQ_POS)).unwrap();
            assert_eq!(stored.data(), &logits.data()[row * v..(row + 1) * v]);

            // neuron_pre equals LN2(resid_pre + attn_out) @ w_up
            let resid = t.value(&SiteKey::resid(0)).unwrap();
            let attn = t.value(&SiteKey::new(0, Site::AttnOut, EQ_POS)).unwrap();
            let mid = resid.add(attn).unwrap().reshape(&[1, model.config.d_model]).unwrap();
            let normed = mid
                .layer_norm_rows(model.param("layer0.ln2.g"), model.param("layer0.ln2.b"), crate::model::LN_EPS)
                .unwrap();
            let pre = normed.matmul(model.param("layer0.mlp.w_up")).unwrap();
            let got = t.value(&SiteKey::new(0, Site::NeuronPre, EQ_POS)).unwrap();
            for (x, y) in pre.data().iter().zip(got.data()) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn identity_patch_leaves_logits_unchanged() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 8);
        let n = pairs.len();
        let sites = vec![
            SiteKey::resid(1),
            SiteKey::new(0, Site::AttnOut, EQ_POS),
            SiteKey::new(0, Site::HeadOut(1), 2),
            SiteKey::new(0, Site::NeuronPre, EQ_POS),
        ];
        let (clean, traces) = run_with_trace(&model, &task, &pairs, &sites).unwrap();
        let mut patches = BTreeMap::new();
        for key in &sites {
            let width = key.width(&model);
            let mut data = Vec::with_capacity(n * width);
            for t in &traces {
                data.extend_from_slice(t.value(key).unwrap().data());
            }
            patches.insert(*key, Tensor::matrix(n, width, data).unwrap());
        }
        let prompts: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| task.tokenize(a, b).unwrap()).collect();
        let patched = run_with_intervention(&model, &prompts, &patches, Routing::All).unwrap();
        for (x, y) in patched.data().iter().zip(clean.data()) {
            assert!((x - y).abs() <= 1e-6, "identity patch moved a logit: {x} vs {y}");
        }
    }

    #[test]
    fn full_final_residual_patch_restores_clean_logits() {
        let (model, task) = setup();
        let clean_pairs = some_pairs(&task, 8);
        let corrupted_pairs: Vec<(i64, i64)> = clean_pairs.iter().map(|&(a, b)| (b, (a + 1) % 11)).collect();
        let n = clean_pairs.len();
        let l = model.config.n_layers;
        let key = SiteKey::resid(l);
        let (clean_logits, traces) = run_with_trace(&model, &task, &clean_pairs, &[key]).unwrap();
        let mut data = Vec::new();
        for t in &traces {
            data.extend_from_slice(t.value(&key).unwrap().data());
        }
        let mut patches = BTreeMap::new();
        patches.insert(key, Tensor::matrix(n, model.config.d_model, data).unwrap());
        let prompts: Vec<Vec<usize>> = corrupted_pairs.iter().map(|&(a, b)| task.tokenize(a, b).unwrap()).collect();
        let patched = run_with_intervention(&model, &prompts, &patches, Routing::All).unwrap();
        let s = SEQ_LEN;
        let v = model.config.vocab_size;
        for i in 0..n {
            let row = i * s + EQ_POS;
            for j in 0..v {
                let x = patched.data()[row * v + j];
                let y = clean_logits.data()[row * v + j];
                assert!((x - y).abs() <= 1e-4, "prompt {i} logit {j}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn mean_ablation_matches_recompute_oracle() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 10);
        let key = SiteKey::new(0, Site::NeuronPre, EQ_POS);
        let (_, traces) = run_with_trace(&model, &task, &pairs, &[key]).unwrap();
        let d_mlp = model.config.d_mlp;
        let mut mean = vec![0.0f32; d_mlp];
        for t in &traces {
            for (m, &v) in mean.iter_mut().zip(t.value(&key).unwrap().data()) {
                *m += v / pairs.len() as f32;
            }
        }
        let mut patches = BTreeMap::new();
        patches.insert(key, Tensor::vector(mean.clone()));
        let prompts: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| task.tokenize(a, b).unwrap()).collect();
        let patched = run_with_intervention(&model, &prompts, &patches, Routing::All).unwrap();

        // oracle: recompute the block from the edited preactivation
        let resid_key = SiteKey::resid(0);
        let attn_key = SiteKey::new(0, Site::AttnOut, EQ_POS);
        let (_, full) = run_with_trace(&model, &task, &pairs, &[resid_key, attn_key]).unwrap();
        let d = model.config.d_model;
        let v = model.config.vocab_size;
        let s = SEQ_LEN;
        for (i, t) in full.iter().enumerate() {
            let mid = t.value(&resid_key).unwrap().add(t.value(&attn_key).unwrap()).unwrap();
            let act = Tensor::vector(mean.clone()).sigmoid().unwrap().reshape(&[1, d_mlp]).unwrap();
            let mlp_out = act.matmul(model.param("layer0.mlp.w_down")).unwrap();
            let h = mid.reshape(&[1, d]).unwrap().add(&mlp_out).unwrap();
            let logits = model.unembed_rows(&h).unwrap();
            let row = i * s + EQ_POS;
            for j in 0..v {
                let got = patched.data()[row * v + j];
                let want = logits.data()[j];
                assert!((got - want).abs() <= 1e-4, "prompt {i} logit {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn direct_only_defers_delta_to_final_residual() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 5);
        let n = pairs.len();
        let key = SiteKey::new(0, Site::AttnOut, EQ_POS);
        let prompts: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| task.tokenize(a, b).unwrap()).collect();

        let width = model.config.d_model;
        let patch = Tensor::vector(vec![0.5; width]);
        let mut patches = BTreeMap::new();
        patches.insert(key, patch.clone());
        let routed = run_with_intervention(&model, &prompts, &patches, Routing::DirectOnly).unwrap();

        // oracle: unembed(final_resid + (patch - captured attn_out)) per prompt
        let l = model.config.n_layers;
        let (_, base) = run_with_trace(&model, &task, &pairs, &[key, SiteKey::resid(l)]).unwrap();
        let v = model.config.vocab_size;
        let s = SEQ_LEN;
        for i in 0..n {
            let attn = base[i].value(&key).unwrap();
            let fin = base[i].value(&SiteKey::resid(l)).unwrap();
            let shifted: Vec<f32> = fin
                .data()
                .iter()
                .zip(attn.data())
                .zip(patch.data())
                .map(|((&f, &a), &p)| f + (p - a))
                .collect();
            let logits = model.unembed_rows(&Tensor::matrix(1, width, shifted).unwrap()).unwrap();
            let row = i * s + EQ_POS;
            for j in 0..v {
                let got = routed.data()[row * v + j];
                let want = logits.data()[j];
                assert!((got - want).abs() <= 1e-4, "prompt {i} logit {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn bad_sites_and_shapes_rejected() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 2);
        let l = model.config.n_layers;
        for key in [
            SiteKey::new(l + 1, Site::ResidPre, 0),
            SiteKey::new(0, Site::HeadOut(99), 0),
            SiteKey::new(l, Site::MlpOut, 0),
            SiteKey::new(0, Site::ResidPre, SEQ_LEN),
        ] {
            let err = run_with_trace(&model, &task, &pairs, &[key]).unwrap_err();
            assert!(matches!(err, Error::UnknownSite(_)), "{key}: {err}");
        }
        let prompts: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| task.tokenize(a, b).unwrap()).collect();
        let mut patches = BTreeMap::new();
        patches.insert(SiteKey::resid(0), Tensor::vector(vec![0.0; 3]));
        let err = run_with_intervention(&model, &prompts, &patches, Routing::All).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn dump_round_trip_byte_exact_and_tamper_rejected() {
        let (model, task) = setup();
        let pairs = some_pairs(&task, 3);
        let sites = vec![SiteKey::resid(0), SiteKey::new(0, Site::HeadOut(2), EQ_POS)];
        let (_, traces) = run_with_trace(&model, &task, &pairs, &sites).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dump(&traces, serde_json::json!({"arch": "tiny"}), dir.path()).unwrap();
        let bin1 = std::fs::read(dir.path().join("data.bin")).unwrap();
        let man1 = std::fs::read(dir.path().join("manifest.json")).unwrap();

        let (desc, loaded) = import_dump(dir.path()).unwrap();
        assert_eq!(desc, serde_json::json!({"arch": "tiny"}));
        assert_eq!(loaded.len(), traces.len());
        for (t1, t2) in traces.iter().zip(&loaded) {
            assert_eq!(t1.info, t2.info);
            for key in t1.keys() {
                assert_eq!(t1.value(key).unwrap().data(), t2.value(key).unwrap().data());
            }
        }
        let dir2 = tempfile::tempdir().unwrap();
        export_dump(&loaded, desc, dir2.path()).unwrap();
        assert_eq!(std::fs::read(dir2.path().join("data.bin")).unwrap(), bin1);
        assert_eq!(std::fs::read(dir2.path().join("manifest.json")).unwrap(), man1);

        // tampered array name must be rejected
        let text = String::from_utf8(man1.clone()).unwrap();
        std::fs::write(dir.path().join("manifest.json"), text.replace("t0.l0.resid_pre.p4", "bogus")).unwrap();
        assert!(import_dump(dir.path()).is_err());

        export_dump(&[], serde_json::json!({}), dir2.path()).unwrap_err();
    }

    #[test]
    fn external_dump_without_model_still_imports() {
        // GPT-J-shaped vectors: no producing model exists in-process.
        let d = 4096;
        let mut traces = Vec::new();
        for i in 0..2i64 {
            let mut t = Trace::new(PromptInfo { a: i, b: 7, task: "add100".into(), correct: true });
            let v: Vec<f32> = (0..d).map(|j| ((i as usize * d + j) % 97) as f32 * 0.01).collect();
            t.insert(SiteKey::new(14, Site::ResidPre, 3), Tensor::vector(v));
            traces.push(t);
        }
        let dir = tempfile::tempdir().unwrap();
        export_dump(&traces, serde_json::json!({"d_model": d, "n_layers": 28}), dir.path()).unwrap();
        let (_, loaded) = import_dump(dir.path()).unwrap();
        assert_eq!(loaded[1].value(&SiteKey::new(14, Site::ResidPre, 3)).unwrap().shape(), &[d]);
    }

    #[test]
    fn attention_masses_sum_to_one_and_uniform_for_zero_scores() {
        let (_, task) = setup();
        let config = ModelConfig::tiny(&task, 5);
        let mut model = ToyTransformer::new(&config).unwrap();
        // zero query/key weights give uniform causal attention
        for l in 0..config.n_layers {
            for w in ["wq", "wk"] {
                let name = format!("layer{l}.attn.{w}");
                let t = Tensor::zeros(model.param(&name).shape());
                model.set_param(&name, t).unwrap();
            }
        }
        let pairs = some_pairs(&task, 6);
        let profile = attention_profile(&model, &task, &pairs).unwrap();
        assert_eq!(profile.len(), config.n_layers * config.n_heads);
        let inv = 1.0 / SEQ_LEN as f64;
        for p in &profile {
            let sum = p.on_a + p.on_b + p.on_last + p.on_other;
            assert!((sum - 1.0).abs() <= 1e-5, "mass sum {sum}");
            assert!((p.on_a - inv).abs() <= 1e-5);
            assert!((p.on_b - inv).abs() <= 1e-5);
            assert!((p.on_last - inv).abs() <= 1e-5);
            assert!((p.on_other - 2.0 * inv).abs() <= 1e-5);
        }
    }

    #[test]
    fn site_key_string_round_trip() {
        for key in [
            SiteKey::new(0, Site::ResidPre, 4),
            SiteKey::new(27, Site::HeadOut(15), 0),
            SiteKey::new(1, Site::NeuronPre, 2),
            SiteKey::new(1, Site::Logits, 4),
        ] {
            let s = key.to_string();
            let back: SiteKey = s.parse().unwrap();
            assert_eq!(back, key);
        }
        assert!("l0.bogus.p1".parse::<SiteKey>().is_err());
        assert!("junk".parse::<SiteKey>().is_err());
    }
}
