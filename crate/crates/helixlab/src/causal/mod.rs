//! Intervention-based effect estimation: activation patching, fit patching,
//! direct-effect path patching, sender-to-receiver route patching,
//! gradient-based attribution, subspace ablation, top-k component selection,
//! and attention-head categorization.
//!
//! The metric everywhere is the clean-answer logit: LD is the mean, over
//! prompt pairs, of that logit after the intervention minus the same logit
//! on the unpatched corrupted run.

use crate::error::{Error, Result};
use crate::manifold::{
    fit_joint, fit_manifold, project_subspace, reconstruct, reconstruct_joint, BasisSpec,
    JointFit, JointPart, ManifoldFit, JOINT_ALL,
};
use crate::model::{
    mlp_forward, mlp_from_preactivations, TaskSpec, ToyTransformer, A_POS, B_POS, EQ_POS, LN_EPS,
    SEQ_LEN,
};
use crate::numerics::{Tape, Tensor};
use crate::trace::{
    run_with_intervention, run_with_routed_patches, run_with_trace, Routing, Site, SiteKey, Trace,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

/// Identifier recorded in every report for the effect metric in use.
pub const METRIC_ID: &str = "clean_answer_logit";

const EVAL_CHUNK: usize = 2048;

/// One clean/corrupted prompt pair. Both prompts are answered correctly by
/// the model; the effect metric always reads the clean answer's logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: (i64, i64),
    pub corrupted: (i64, i64),
    /// Token id of the clean answer.
    pub answer_token: usize,
}

/// Which operand the corrupted prompt replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorruptMode {
    CorruptA,
    CorruptB,
}

impl fmt::Display for CorruptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorruptMode::CorruptA => write!(f, "corrupt_a"),
            CorruptMode::CorruptB => write!(f, "corrupt_b"),
        }
    }
}

impl std::str::FromStr for CorruptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrupt_a" | "a" => Ok(CorruptMode::CorruptA),
            "corrupt_b" | "b" => Ok(CorruptMode::CorruptB),
            other => Err(Error::invalid(format!("unknown corrupt mode {other:?}"))),
        }
    }
}

/// Prompt token the value of interest sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    A,
    B,
    Last,
}

impl TokenRole {
    pub fn position(&self) -> usize {
        match self {
            TokenRole::A => A_POS,
            TokenRole::B => B_POS,
            TokenRole::Last => EQ_POS,
        }
    }

    /// The value the role's representation is indexed by; `Last` uses the
    /// raw sum so periodic bases can absorb any modular wraparound.
    pub fn value(&self, a: i64, b: i64) -> i64 {
        match self {
            TokenRole::A => a,
            TokenRole::B => b,
            TokenRole::Last => a + b,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenRole::A => "a",
            TokenRole::B => "b",
            TokenRole::Last => "last",
        }
    }
}

impl std::str::FromStr for TokenRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(TokenRole::A),
            "b" => Ok(TokenRole::B),
            "last" => Ok(TokenRole::Last),
            other => Err(Error::invalid(format!("unknown token role {other:?}"))),
        }
    }
}

/// A patchable unit: a set of whole sites, or one neuron inside a layer's
/// preactivation vector.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Sites(Vec<SiteKey>),
    Neuron { layer: usize, position: usize, index: usize },
}

impl Component {
    pub fn site(key: SiteKey) -> Self {
        Component::Sites(vec![key])
    }

    pub fn head(layer: usize, head: usize, position: usize) -> Self {
        Component::site(SiteKey::new(layer, Site::HeadOut(head), position))
    }

    pub fn mlp(layer: usize, position: usize) -> Self {
        Component::site(SiteKey::new(layer, Site::MlpOut, position))
    }

    pub fn neuron(layer: usize, index: usize, position: usize) -> Self {
        Component::Neuron { layer, position, index }
    }

    pub fn label(&self) -> String {
        match self {
            Component::Sites(keys) => {
                keys.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("+")
            }
            Component::Neuron { layer, position, index } => {
                format!("l{layer}.neuron[{index}].p{position}")
            }
        }
    }

    pub fn layer(&self) -> usize {
        match self {
            Component::Sites(keys) => keys.iter().map(|k| k.layer).min().unwrap_or(0),
            Component::Neuron { layer, .. } => *layer,
        }
    }

    /// Head or neuron index when the component has one.
    pub fn index(&self) -> Option<usize> {
        match self {
            Component::Sites(keys) => match keys.as_slice() {
                [k] => match k.site {
                    Site::HeadOut(h) => Some(h),
                    _ => None,
                },
                _ => None,
            },
            Component::Neuron { index, .. } => Some(*index),
        }
    }

    /// Sites whose clean and corrupted values the component's patch needs.
    fn capture_keys(&self) -> Vec<SiteKey> {
        match self {
            Component::Sites(keys) => keys.clone(),
            Component::Neuron { layer, position, .. } => {
                vec![SiteKey::new(*layer, Site::NeuronPre, *position)]
            }
        }
    }
}

/// Per-component effects in logit-difference units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectRow {
    pub component: String,
    pub layer: usize,
    pub index: Option<usize>,
    pub te: f64,
    pub de: Option<f64>,
    /// IE = TE − DE whenever DE was computed.
    pub ie: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchReport {
    pub metric: String,
    pub n_pairs: usize,
    pub rows: Vec<EffectRow>,
}

impl PatchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,layer,index,te,de,ie,n_pairs\n");
        for row in &self.rows {
            let idx = row.index.map(|i| i.to_string()).unwrap_or_default();
            let de = row.de.map(|x| x.to_string()).unwrap_or_default();
            let ie = row.ie.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.component, row.layer, idx, row.te, de, ie, self.n_pairs
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Prompts the model answers correctly, in task enumeration order.
pub fn correct_prompts(model: &ToyTransformer, task: &TaskSpec) -> Result<Vec<(i64, i64)>> {
    let all = task.valid_pairs();
    let mask = correct_mask(model, task, &all)?;
    Ok(all.into_iter().zip(mask).filter(|(_, ok)| *ok).map(|(p, _)| p).collect())
}

/// Seeded uniform sample (without replacement) of correctly answered prompts.
pub fn sample_correct_prompts(
    model: &ToyTransformer,
    task: &TaskSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(i64, i64)>> {
    let mut pool = correct_prompts(model, task)?;
    if pool.len() < n {
        return Err(Error::Insufficient { what: "correct prompts", need: n, have: pool.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    Ok(pool)
}

fn correct_mask(model: &ToyTransformer, task: &TaskSpec, pairs: &[(i64, i64)]) -> Result<Vec<bool>> {
    let v = task.vocab_size();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let prompts: Vec<Vec<usize>> =
            chunk.iter().map(|&(a, b)| task.tokenize(a, b)).collect::<Result<_>>()?;
        let logits = model.logits_last(&prompts)?;
        for (i, &(a, b)) in chunk.iter().enumerate() {
            let row = &logits.data()[i * v..(i + 1) * v];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            out.push(argmax == task.answer_token(a, b)?);
        }
    }
    Ok(out)
}

/// Sample `n` clean/corrupted pairs uniformly without replacement from all
/// combinations of correctly answered prompts sharing the uncorrupted
/// operand. Deterministic per seed.
pub fn make_prompt_pairs(
    model: &ToyTransformer,
    task: &TaskSpec,
    n: usize,
    mode: CorruptMode,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    if n == 0 {
        return Err(Error::Insufficient { what: "requested pairs", need: 1, have: 0 });
    }
    let correct = correct_prompts(model, task)?;
    let mut groups: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
    for (a, b) in correct {
        match mode {
            CorruptMode::CorruptA => groups.entry(b).or_default().push(a),
            CorruptMode::CorruptB => groups.entry(a).or_default().push(b),
        }
    }
    let groups: Vec<(i64, Vec<i64>)> = groups.into_iter().filter(|(_, v)| v.len() >= 2).collect();
    let counts: Vec<usize> = groups.iter().map(|(_, v)| v.len() * (v.len() - 1)).collect();
    let total: usize = counts.iter().sum();
    if total < n {
        return Err(Error::Insufficient { what: "clean/corrupted prompt pairs", need: n, have: total });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut idx = rng.gen_range(0..total);
        if !chosen.insert(idx) {
            continue;
        }
        let mut g = 0;
        while idx >= counts[g] {
            idx -= counts[g];
            g += 1;
        }
        let (fixed, ops) = &groups[g];
        let m = ops.len();
        let i = idx / (m - 1);
        let mut j = idx % (m - 1);
        if j >= i {
            j += 1;
        }
        let (clean, corrupted) = match mode {
            CorruptMode::CorruptA => ((ops[i], *fixed), (ops[j], *fixed)),
            CorruptMode::CorruptB => ((*fixed, ops[i]), (*fixed, ops[j])),
        };
        out.push(PromptPair {
            clean,
            corrupted,
            answer_token: task.answer_token(clean.0, clean.1)?,
        });
    }
    Ok(out)
}

/// Tokenized pairs plus baseline clean/corrupted answer logits.
struct PairBatch {
    clean_pairs: Vec<(i64, i64)>,
    corr_pairs: Vec<(i64, i64)>,
    corr_prompts: Vec<Vec<usize>>,
    answers: Vec<usize>,
    clean_logit: Vec<f64>,
    corr_logit: Vec<f64>,
}

impl PairBatch {
    fn prepare(model: &ToyTransformer, task: &TaskSpec, pairs: &[PromptPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Insufficient { what: "prompt pairs", need: 1, have: 0 });
        }
        let clean_pairs: Vec<(i64, i64)> = pairs.iter().map(|p| p.clean).collect();
        let corr_pairs: Vec<(i64, i64)> = pairs.iter().map(|p| p.corrupted).collect();
        let clean_prompts: Vec<Vec<usize>> =
            clean_pairs.iter().map(|&(a, b)| task.tokenize(a, b)).collect::<Result<_>>()?;
        let corr_prompts: Vec<Vec<usize>> =
            corr_pairs.iter().map(|&(a, b)| task.tokenize(a, b)).collect::<Result<_>>()?;
        let answers: Vec<usize> = pairs.iter().map(|p| p.answer_token).collect();
        let clean_logit = answer_logits(model, &clean_prompts, &answers)?;
        let corr_logit = answer_logits(model, &corr_prompts, &answers)?;
        Ok(PairBatch { clean_pairs, corr_pairs, corr_prompts, answers, clean_logit, corr_logit })
    }

    fn n(&self) -> usize {
        self.answers.len()
    }

    /// Mean answer-logit gain of `(batch*seq, vocab)` patched logits over
    /// the corrupted baseline.
    fn ld(&self, patched: &Tensor, vocab: usize) -> f64 {
        let n = self.n();
        let s = patched.numel() / (n * vocab);
        let mut sum = 0.0;
        for i in 0..n {
            let row = i * s + s - 1;
            let logit = patched.data()[row * vocab + self.answers[i]] as f64;
            sum += logit - self.corr_logit[i];
        }
        sum / n as f64
    }

    /// The full-restoration ceiling: mean clean-minus-corrupted answer logit.
    fn full_gap(&self) -> f64 {
        self.clean_logit
            .iter()
            .zip(&self.corr_logit)
            .map(|(c, r)| c - r)
            .sum::<f64>()
            / self.n() as f64
    }
}

fn answer_logits(
    model: &ToyTransformer,
    prompts: &[Vec<usize>],
    answers: &[usize],
) -> Result<Vec<f64>> {
    let v = model.config.vocab_size;
    let logits = model.logits_last(prompts)?;
    Ok(answers
        .iter()
        .enumerate()
        .map(|(i, &t)| logits.data()[i * v + t] as f64)
        .collect())
}

fn capture_both(
    model: &ToyTransformer,
    task: &TaskSpec,
    batch: &PairBatch,
    keys: &[SiteKey],
) -> Result<(Vec<Trace>, Vec<Trace>)> {
    let (_, clean) = run_with_trace(model, task, &batch.clean_pairs, keys)?;
    let (_, corr) = run_with_trace(model, task, &batch.corr_pairs, keys)?;
    Ok((clean, corr))
}

/// Stack one site's vectors from per-prompt traces into `(n, width)`.
fn stack_site(traces: &[Trace], key: &SiteKey) -> Result<Tensor> {
    let n = traces.len();
    let w = traces[0].value(key)?.numel();
    let mut data = Vec::with_capacity(n * w);
    for t in traces {
        data.extend_from_slice(t.value(key)?.data());
    }
    Tensor::matrix(n, w, data)
}

/// Patches replaying the component's clean values into a corrupted run.
fn component_patches(
    component: &Component,
    clean: &[Trace],
    corr: &[Trace],
) -> Result<BTreeMap<SiteKey, Tensor>> {
    let mut patches = BTreeMap::new();
    merge_component_patches(component, clean, corr, &mut patches)?;
    Ok(patches)
}

/// Adds `component`'s patch into `patches`, merging neuron edits that share
/// a preactivation vector.
fn merge_component_patches(
    component: &Component,
    clean: &[Trace],
    corr: &[Trace],
    patches: &mut BTreeMap<SiteKey, Tensor>,
) -> Result<()> {
    match component {
        Component::Sites(keys) => {
            for key in keys {
                patches.insert(*key, stack_site(clean, key)?);
            }
        }
        Component::Neuron { layer, position, index } => {
            let key = SiteKey::new(*layer, Site::NeuronPre, *position);
            let base = match patches.remove(&key) {
                Some(existing) => existing,
                None => stack_site(corr, &key)?,
            };
            let mut base = base;
            let w = base.shape()[1];
            if *index >= w {
                return Err(Error::invalid(format!("neuron index {index} out of range for width {w}")));
            }
            for (i, trace) in clean.iter().enumerate() {
                base.data_mut()[i * w + index] = trace.value(&key)?.data()[*index];
            }
            patches.insert(key, base);
        }
    }
    Ok(())
}

/// Total effect of each component: clean values patched into the corrupted
/// run, downstream recomputed, mean answer-logit gain. Captures are shared
/// across components.
pub fn activation_patch_many(
    model: &ToyTransformer,
    task: &TaskSpec,
    components: &[Component],
    pairs: &[PromptPair],
) -> Result<Vec<f64>> {
    let batch = PairBatch::prepare(model, task, pairs)?;
    let keys = union_capture_keys(components);
    let (clean, corr) = capture_both(model, task, &batch, &keys)?;
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(components.len());
    for comp in components {
        let patches = component_patches(comp, &clean, &corr)?;
        if patches.is_empty() {
            out.push(0.0);
            continue;
        }
        let logits = run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All)?;
        out.push(batch.ld(&logits, v));
    }
    Ok(out)
}

pub fn activation_patch(
    model: &ToyTransformer,
    task: &TaskSpec,
    component: &Component,
    pairs: &[PromptPair],
) -> Result<f64> {
    Ok(activation_patch_many(model, task, std::slice::from_ref(component), pairs)?[0])
}

fn union_capture_keys(components: &[Component]) -> Vec<SiteKey> {
    let set: BTreeSet<SiteKey> = components.iter().flat_map(|c| c.capture_keys()).collect();
    set.into_iter().collect()
}

fn additive_site(key: &SiteKey) -> bool {
    matches!(key.site, Site::HeadOut(_) | Site::AttnOut | Site::MlpOut)
}

/// Direct effect: the component's clean-minus-corrupted output delta is
/// routed straight to the final pre-unembed residual; every other
/// computation stays corrupted.
pub fn path_patch_direct(
    model: &ToyTransformer,
    task: &TaskSpec,
    component: &Component,
    pairs: &[PromptPair],
) -> Result<f64> {
    Ok(direct_effect_many(model, task, std::slice::from_ref(component), pairs)?[0])
}

pub fn direct_effect_many(
    model: &ToyTransformer,
    task: &TaskSpec,
    components: &[Component],
    pairs: &[PromptPair],
) -> Result<Vec<f64>> {
    let batch = PairBatch::prepare(model, task, pairs)?;
    let v = model.config.vocab_size;

    let mut keys = BTreeSet::new();
    for comp in components {
        match comp {
            Component::Sites(site_keys) => {
                for key in site_keys {
                    if !additive_site(key) {
                        return Err(Error::invalid(
                            "direct effect needs an additive component (head_out, attn_out, mlp_out, or a neuron)",
                        ));
                    }
                    keys.insert(*key);
                }
            }
            Component::Neuron { layer, position, .. } => {
                keys.insert(SiteKey::new(*layer, Site::NeuronPre, *position));
                keys.insert(SiteKey::new(*layer, Site::ResidPre, *position));
                keys.insert(SiteKey::new(*layer, Site::AttnOut, *position));
            }
        }
    }
    let keys: Vec<SiteKey> = keys.into_iter().collect();
    let (clean, corr) = capture_both(model, task, &batch, &keys)?;

    let mut out = Vec::with_capacity(components.len());
    for comp in components {
        let routed: Vec<(SiteKey, Tensor, Routing)> = match comp {
            Component::Sites(site_keys) => site_keys
                .iter()
                .map(|key| Ok((*key, stack_site(&clean, key)?, Routing::DirectOnly)))
                .collect::<Result<_>>()?,
            Component::Neuron { layer, position, index } => {
                let out_patched =
                    neuron_patched_mlp_out(model, *layer, *position, *index, &clean, &corr)?;
                vec![(SiteKey::new(*layer, Site::MlpOut, *position), out_patched, Routing::DirectOnly)]
            }
        };
        if routed.is_empty() {
            out.push(0.0);
            continue;
        }
        let logits = run_with_routed_patches(model, &batch.corr_prompts, &routed)?;
        out.push(batch.ld(&logits, v));
    }
    Ok(out)
}

/// Corrupted-run MLP output recomputed with one neuron's preactivation set
/// to its clean value.
fn neuron_patched_mlp_out(
    model: &ToyTransformer,
    layer: usize,
    position: usize,
    index: usize,
    clean: &[Trace],
    corr: &[Trace],
) -> Result<Tensor> {
    let pre_key = SiteKey::new(layer, Site::NeuronPre, position);
    let resid_key = SiteKey::new(layer, Site::ResidPre, position);
    let attn_key = SiteKey::new(layer, Site::AttnOut, position);
    let mut pre = stack_site(corr, &pre_key)?;
    let w = pre.shape()[1];
    if index >= w {
        return Err(Error::invalid(format!("neuron index {index} out of range for width {w}")));
    }
    for (i, trace) in clean.iter().enumerate() {
        pre.data_mut()[i * w + index] = trace.value(&pre_key)?.data()[index];
    }
    let mid = stack_site(corr, &resid_key)?.add(&stack_site(corr, &attn_key)?)?;
    let x = mid.layer_norm_rows(
        model.param(&format!("layer{layer}.ln2.g")),
        model.param(&format!("layer{layer}.ln2.b")),
        LN_EPS,
    )?;
    mlp_from_preactivations(&x, &pre, &model.mlp_weights(layer), model.config.mlp_kind)
}

/// Effect of the single sender-to-receiver path: the sender's clean delta is
/// visible only to the receiver's input, the receiver's output change then
/// propagates normally. `receiver` is an MLP site or the logits.
pub fn path_patch_route(
    model: &ToyTransformer,
    task: &TaskSpec,
    sender: SiteKey,
    receiver: SiteKey,
    pairs: &[PromptPair],
) -> Result<f64> {
    if !additive_site(&sender) {
        return Err(Error::invalid("route sender must be head_out, attn_out, or mlp_out"));
    }
    match receiver.site {
        Site::Logits => {
            // the receiver consumes the final residual directly
            return path_patch_direct(model, task, &Component::site(sender), pairs);
        }
        Site::MlpOut => {}
        _ => return Err(Error::invalid("route receiver must be mlp_out or logits")),
    }
    let sender_before_receiver = sender.layer < receiver.layer
        || (sender.layer == receiver.layer && sender.site != Site::MlpOut);
    if !sender_before_receiver {
        return Err(Error::invalid("route sender must run before the receiver"));
    }
    if sender.position != receiver.position {
        return Err(Error::invalid("route sender and receiver must share a position"));
    }

    let batch = PairBatch::prepare(model, task, pairs)?;
    let v = model.config.vocab_size;
    let layer = receiver.layer;
    let resid_key = SiteKey::new(layer, Site::ResidPre, receiver.position);
    let attn_key = SiteKey::new(layer, Site::AttnOut, receiver.position);
    let keys = vec![sender, resid_key, attn_key];
    let (clean, corr) = capture_both(model, task, &batch, &keys)?;

    let delta = stack_site(&clean, &sender)?.sub(&stack_site(&corr, &sender)?)?;
    let mid = stack_site(&corr, &resid_key)?
        .add(&stack_site(&corr, &attn_key)?)?
        .add(&delta)?;
    let x = mid.layer_norm_rows(
        model.param(&format!("layer{layer}.ln2.g")),
        model.param(&format!("layer{layer}.ln2.b")),
        LN_EPS,
    )?;
    let (_, out_patched) = mlp_forward(&x, &model.mlp_weights(layer), model.config.mlp_kind)?;

    let mut patches = BTreeMap::new();
    patches.insert(receiver, out_patched);
    let logits = run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All)?;
    Ok(batch.ld(&logits, v))
}

/// First-order estimate of every component's total effect from one taped
/// corrupted run: LD̂ = ∇h logit(answer) · (clean − corrupted).
pub fn attribution_patch(
    model: &ToyTransformer,
    task: &TaskSpec,
    components: &[Component],
    pairs: &[PromptPair],
) -> Result<Vec<f64>> {
    let batch = PairBatch::prepare(model, task, pairs)?;
    let n = batch.n();
    let s = SEQ_LEN;
    let keys = union_capture_keys(components);
    let (clean, corr) = capture_both(model, task, &batch, &keys)?;

    let mut tape = Tape::new();
    let fwd = model.forward_taped(&mut tape, &batch.corr_prompts)?;
    let picked = tape.pick_per_row(fwd.last_logits, &batch.answers)?;
    let root = tape.sum_all(picked)?;
    tape.backward(root)?;
    let site_grads: BTreeMap<(usize, crate::model::SiteKind), &crate::numerics::Var> =
        fwd.sites.iter().map(|(hs, var)| ((hs.layer, hs.kind), var)).collect();

    let mut out = Vec::with_capacity(components.len());
    for comp in components {
        let mut total = 0.0f64;
        for key in comp.capture_keys() {
            let var = site_grads
                .get(&(key.layer, key.site.kind()))
                .ok_or_else(|| Error::UnknownSite(format!("{key} not on tape")))?;
            let grad = tape
                .grad(**var)
                .ok_or_else(|| Error::invalid("no gradient recorded at site"))?;
            let w = key.width(model);
            let logits_site = key.site == Site::Logits;
            for i in 0..n {
                let row = if logits_site { i } else { i * s + key.position };
                let g = &grad.data()[row * w..(row + 1) * w];
                let cl = clean[i].value(&key)?.data();
                let co = corr[i].value(&key)?.data();
                match comp {
                    Component::Neuron { index, .. } => {
                        total += g[*index] as f64 * (cl[*index] - co[*index]) as f64;
                    }
                    Component::Sites(_) => {
                        for k in 0..w {
                            total += g[k] as f64 * (cl[k] - co[k]) as f64;
                        }
                    }
                }
            }
        }
        out.push(total / n as f64);
    }
    Ok(out)
}

/// Average a site's activation over prompts, grouped by the role's value.
pub fn collect_role_vectors(
    model: &ToyTransformer,
    task: &TaskSpec,
    key: SiteKey,
    role: TokenRole,
    prompts: &[(i64, i64)],
) -> Result<BTreeMap<i64, Tensor>> {
    let mut sums: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in prompts.chunks(EVAL_CHUNK) {
        let (_, traces) = run_with_trace(model, task, chunk, &[key])?;
        for (trace, &(a, b)) in traces.iter().zip(chunk) {
            let v = role.value(a, b);
            let t = trace.value(&key)?;
            let entry = sums.entry(v).or_insert_with(|| (vec![0.0; t.numel()], 0));
            for (acc, &x) in entry.0.iter_mut().zip(t.data()) {
                *acc += x as f64;
            }
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(v, (sum, count))| {
            (v, Tensor::vector(sum.iter().map(|&x| (x / count as f64) as f32).collect()))
        })
        .collect())
}

/// One vector per prompt pair at a site (no averaging), for joint fits.
pub fn collect_pair_vectors(
    model: &ToyTransformer,
    task: &TaskSpec,
    key: SiteKey,
    prompts: &[(i64, i64)],
) -> Result<BTreeMap<(i64, i64), Tensor>> {
    let mut out = BTreeMap::new();
    for chunk in prompts.chunks(EVAL_CHUNK) {
        let (_, traces) = run_with_trace(model, task, chunk, &[key])?;
        for (trace, &(a, b)) in traces.iter().zip(chunk) {
            out.insert((a, b), trace.value(&key)?.clone());
        }
    }
    Ok(out)
}

/// Fit a basis to role-averaged activations at a site, stamping the fit
/// with its layer and role for later validation.
pub fn fit_role_manifold(
    model: &ToyTransformer,
    task: &TaskSpec,
    key: SiteKey,
    role: TokenRole,
    prompts: &[(i64, i64)],
    spec: &BasisSpec,
    pca_dim: usize,
) -> Result<ManifoldFit> {
    if role.position() != key.position {
        return Err(Error::invalid(format!(
            "role {} sits at position {}, not {}",
            role.as_str(),
            role.position(),
            key.position
        )));
    }
    let vectors = collect_role_vectors(model, task, key, role, prompts)?;
    let mut fit = fit_manifold(&vectors, spec, pca_dim)?;
    fit.layer = Some(key.layer);
    fit.role = Some(role.as_str().to_string());
    Ok(fit)
}

/// Random relabeling of value-indexed vectors; the shuffled fit is the
/// negative control for fit patching.
pub fn shuffle_value_labels(
    vectors: &BTreeMap<i64, Tensor>,
    seed: u64,
) -> BTreeMap<i64, Tensor> {
    let values: Vec<i64> = vectors.keys().copied().collect();
    let mut shuffled = values.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    values
        .iter()
        .zip(shuffled)
        .map(|(&orig, new)| (new, vectors[&orig].clone()))
        .collect()
}

/// Patch a site with the fit's reconstruction of each pair's clean value.
pub fn patch_with_fit(
    model: &ToyTransformer,
    task: &TaskSpec,
    key: SiteKey,
    fit: &ManifoldFit,
    pairs: &[PromptPair],
) -> Result<f64> {
    let role: TokenRole = fit
        .role
        .as_deref()
        .ok_or_else(|| Error::invalid("fit has no token role; build it with fit_role_manifold"))?
        .parse()?;
    if role.position() != key.position {
        return Err(Error::invalid(format!(
            "fit role {} does not match patch position {}",
            role.as_str(),
            key.position
        )));
    }
    let batch = PairBatch::prepare(model, task, pairs)?;
    let v = model.config.vocab_size;
    let d = fit.dim();
    let mut data = Vec::with_capacity(batch.n() * d);
    for &(a, b) in &batch.clean_pairs {
        let rec = reconstruct(fit, role.value(a, b))?;
        data.extend_from_slice(rec.data());
    }
    let mut patches = BTreeMap::new();
    patches.insert(key, Tensor::matrix(batch.n(), d, data)?);
    let logits = run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All)?;
    Ok(batch.ld(&logits, v))
}

/// LD of patching a joint-fit reconstruction of the clean pair into
/// corrupted runs at `key`.
pub fn patch_with_joint_fit(
    model: &ToyTransformer,
    task: &TaskSpec,
    key: SiteKey,
    fit: &JointFit,
    pairs: &[PromptPair],
) -> Result<f64> {
    let batch = PairBatch::prepare(model, task, pairs)?;
    let v = model.config.vocab_size;
    let d = fit.c.shape()[0];
    let mut data = Vec::with_capacity(batch.n() * d);
    for &(a, b) in &batch.clean_pairs {
        data.extend_from_slice(reconstruct_joint(fit, a, b)?.data());
    }
    let mut patches = BTreeMap::new();
    patches.insert(key, Tensor::matrix(batch.n(), d, data)?);
    let logits = run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All)?;
    Ok(batch.ld(&logits, v))
}

/// One basis family's causal score within a comparison bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitPatchEntry {
    pub basis: String,
    pub r2: f64,
    pub ld: f64,
}

/// Fig.-4-style comparison at matched parameter counts: the full-layer patch
/// ceiling against helix, circle, polynomial, PCA, and a shuffled-label
/// helix control.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitPatchBundle {
    pub k: usize,
    pub layer: usize,
    pub role: String,
    pub layer_ld: f64,
    pub entries: Vec<FitPatchEntry>,
}

impl FitPatchBundle {
    pub fn entry(&self, basis: &str) -> Option<&FitPatchEntry> {
        self.entries.iter().find(|e| e.basis == basis)
    }
}

/// Periods for a k-frequency bundle: leading defaults, capped at k.
fn bundle_periods(k: usize) -> Vec<f64> {
    crate::manifold::DEFAULT_PERIODS.iter().copied().take(k).collect()
}

pub fn compare_fit_patches(
    model: &ToyTransformer,
    task: &TaskSpec,
    key: SiteKey,
    role: TokenRole,
    fit_prompts: &[(i64, i64)],
    pairs: &[PromptPair],
    k: usize,
    pca_dim: usize,
    shuffle_seed: u64,
) -> Result<FitPatchBundle> {
    if role.position() != key.position {
        return Err(Error::invalid("role does not sit at the patched position"));
    }
    let vectors = collect_role_vectors(model, task, key, role, fit_prompts)?;
    let layer_ld = activation_patch(model, task, &Component::site(key), pairs)?;

    let periods = bundle_periods(k);
    let specs: Vec<(String, BasisSpec, bool)> = vec![
        ("helix".into(), BasisSpec::helix(&periods), false),
        ("circle".into(), BasisSpec::circle(&periods), false),
        ("polynomial".into(), BasisSpec::polynomial(k), false),
        ("pca".into(), BasisSpec::pca_baseline(k), false),
        ("helix_shuffled".into(), BasisSpec::helix(&periods), true),
    ];
    let mut entries = Vec::new();
    for (name, spec, shuffled) in specs {
        let source = if shuffled {
            shuffle_value_labels(&vectors, shuffle_seed)
        } else {
            vectors.clone()
        };
        let mut fit = fit_manifold(&source, &spec, pca_dim)?;
        fit.layer = Some(key.layer);
        fit.role = Some(role.as_str().to_string());
        let ld = patch_with_fit(model, task, key, &fit, pairs)?;
        entries.push(FitPatchEntry { basis: name, r2: fit.r2, ld });
    }
    Ok(FitPatchBundle {
        k,
        layer: key.layer,
        role: role.as_str().to_string(),
        layer_ld,
        entries,
    })
}

/// Accuracy and mean answer logit before/after replacing the fitted
/// subspace's content with its dataset mean, with the full-layer mean
/// ablation for scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub n_prompts: usize,
    pub baseline_accuracy: f64,
    pub baseline_logit: f64,
    pub subspace_accuracy: f64,
    pub subspace_logit: f64,
    pub full_accuracy: f64,
    pub full_logit: f64,
}

impl AblationReport {
    pub fn subspace_drop(&self) -> f64 {
        self.baseline_accuracy - self.subspace_accuracy
    }

    pub fn full_drop(&self) -> f64 {
        self.baseline_accuracy - self.full_accuracy
    }
}

fn accuracy_and_logit(
    logits: &Tensor,
    vocab: usize,
    prompts: &[(i64, i64)],
    task: &TaskSpec,
) -> Result<(f64, f64)> {
    let n = prompts.len();
    let s = logits.numel() / (n * vocab);
    let mut correct = 0usize;
    let mut logit_sum = 0.0f64;
    for (i, &(a, b)) in prompts.iter().enumerate() {
        let row = (i * s + s - 1) * vocab;
        let slice = &logits.data()[row..row + vocab];
        let ans = task.answer_token(a, b)?;
        let argmax = slice
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        if argmax == ans {
            correct += 1;
        }
        logit_sum += slice[ans] as f64;
    }
    Ok((correct as f64 / n as f64, logit_sum / n as f64))
}

/// Replace the in-subspace component of (h−μ) at `key` with its dataset
/// mean over `prompts`; everything orthogonal to the fit passes through.
pub fn ablate_subspace(
    model: &ToyTransformer,
    task: &TaskSpec,
    fit: &ManifoldFit,
    key: SiteKey,
    prompts: &[(i64, i64)],
) -> Result<AblationReport> {
    if prompts.is_empty() {
        return Err(Error::Insufficient { what: "prompts", need: 1, have: 0 });
    }
    let v = model.config.vocab_size;
    let (base_logits, traces) = run_with_trace(model, task, prompts, &[key])?;
    let (baseline_accuracy, baseline_logit) = accuracy_and_logit(&base_logits, v, prompts, task)?;

    let h = stack_site(&traces, &key)?;
    let d = h.shape()[1];
    if d != fit.dim() {
        return Err(Error::ShapeMismatch { op: "ablate_subspace", lhs: vec![fit.dim()], rhs: vec![d] });
    }
    let coords = project_subspace(fit, &h)?;
    let mean_coords = coords.col_mean_tensor()?;
    let centered = coords.sub_row(&mean_coords)?;
    let ablated = h.sub(&centered.matmul(&fit.c.transpose()?)?)?;

    let prompt_tokens: Vec<Vec<usize>> =
        prompts.iter().map(|&(a, b)| task.tokenize(a, b)).collect::<Result<_>>()?;
    let mut patches = BTreeMap::new();
    patches.insert(key, ablated);
    let sub_logits = run_with_intervention(model, &prompt_tokens, &patches, Routing::All)?;
    let (subspace_accuracy, subspace_logit) = accuracy_and_logit(&sub_logits, v, prompts, task)?;

    let mean_row = h.col_mean_tensor()?;
    let mut patches = BTreeMap::new();
    patches.insert(key, mean_row);
    let full_logits = run_with_intervention(model, &prompt_tokens, &patches, Routing::All)?;
    let (full_accuracy, full_logit) = accuracy_and_logit(&full_logits, v, prompts, task)?;

    Ok(AblationReport {
        n_prompts: prompts.len(),
        baseline_accuracy,
        baseline_logit,
        subspace_accuracy,
        subspace_logit,
        full_accuracy,
        full_logit,
    })
}

/// Result of the minimal-prefix search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TopkSelection {
    /// Component indices sorted by effect (descending; ties by layer then
    /// index then label).
    pub order: Vec<usize>,
    /// Smallest prefix length whose joint patch reaches the threshold.
    pub k: usize,
    /// False when even the full set misses the threshold; `k` is then the
    /// component count.
    pub reached: bool,
    pub all_ld: f64,
    /// Joint LD of each measured prefix, `prefix_lds[i]` for k = i+1.
    pub prefix_lds: Vec<f64>,
}

/// Smallest top-effect prefix whose jointly measured patch reaches
/// `threshold` times the all-components patch.
pub fn select_topk(
    model: &ToyTransformer,
    task: &TaskSpec,
    components: &[Component],
    effects: &[f64],
    threshold: f64,
    pairs: &[PromptPair],
) -> Result<TopkSelection> {
    if components.is_empty() || components.len() != effects.len() {
        return Err(Error::invalid("components and effects must be non-empty and aligned"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("threshold must be in (0, 1]"));
    }
    let batch = PairBatch::prepare(model, task, pairs)?;
    let v = model.config.vocab_size;
    let keys = union_capture_keys(components);
    let (clean, corr) = capture_both(model, task, &batch, &keys)?;

    let mut order: Vec<usize> = (0..components.len()).collect();
    order.sort_by(|&i, &j| {
        effects[j]
            .partial_cmp(&effects[i])
            .unwrap()
            .then_with(|| components[i].layer().cmp(&components[j].layer()))
            .then_with(|| components[i].index().cmp(&components[j].index()))
            .then_with(|| components[i].label().cmp(&components[j].label()))
    });

    let joint = |idx: &[usize]| -> Result<f64> {
        let mut patches = BTreeMap::new();
        for &i in idx {
            merge_component_patches(&components[i], &clean, &corr, &mut patches)?;
        }
        let logits = run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All)?;
        Ok(batch.ld(&logits, v))
    };

    let all_ld = joint(&order)?;
    let target = threshold * all_ld;
    let mut prefix_lds = Vec::new();
    for k in 1..=order.len() {
        let ld = joint(&order[..k])?;
        prefix_lds.push(ld);
        if all_ld > 0.0 && ld >= target {
            return Ok(TopkSelection { order, k, reached: true, all_ld, prefix_lds });
        }
    }
    let k = order.len();
    Ok(TopkSelection { order, k, reached: false, all_ld, prefix_lds })
}

/// Head roles in the two-stage circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLabel {
    /// Moves a/b information for downstream processing.
    Operand,
    /// Writes a+b structure straight toward the logits.
    Answer,
    /// Low confidence either way; validated with true outputs.
    Mixed,
}

/// Confidence scores from effect ratios: c_{a,b} = (1−DE/TE)·R_{a,b} and
/// c_{a+b} = (DE/TE)·R_{a+b}. Pure arithmetic, unit-scale invariant.
pub fn head_confidences(te: f64, de: f64, r_operand: f64, r_answer: f64) -> (f64, f64) {
    let ratio = de / te;
    ((1.0 - ratio) * r_operand, ratio * r_answer)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadCategory {
    pub layer: usize,
    pub head: usize,
    pub te: f64,
    pub de: f64,
    /// Fit-patched TE ratios against the full a,b,a+b joint fit.
    pub r_operand: f64,
    pub r_answer: f64,
    pub c_operand: f64,
    pub c_answer: f64,
    pub label: HeadLabel,
    /// TE too small for ratios; treated like mixed in validation.
    pub excluded: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadCategorization {
    pub heads: Vec<HeadCategory>,
    /// How many low-confidence heads were labeled mixed.
    pub m: usize,
    /// Joint patch with every head's true clean output.
    pub true_ld: f64,
    /// Joint patch with operand heads reconstructed from B(a),B(b), answer
    /// heads from B(a+b) routed direct-only, mixed heads true.
    pub categorized_ld: f64,
}

impl HeadCategorization {
    pub fn recovered_fraction(&self) -> f64 {
        if self.true_ld == 0.0 {
            return 0.0;
        }
        self.categorized_ld / self.true_ld
    }
}

/// Categorize attention heads as operand-movers or answer-writers from
/// TE/DE ratios and joint-fit patch ratios, then validate by patching each
/// class with its reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn categorize_heads(
    model: &ToyTransformer,
    task: &TaskSpec,
    heads: &[(usize, usize)],
    pairs: &[PromptPair],
    fit_prompts: &[(i64, i64)],
    spec: &BasisSpec,
    pca_dim: usize,
    m: usize,
) -> Result<HeadCategorization> {
    if heads.is_empty() {
        return Err(Error::Insufficient { what: "heads", need: 1, have: 0 });
    }
    let batch = PairBatch::prepare(model, task, pairs)?;
    let v = model.config.vocab_size;
    let components: Vec<Component> =
        heads.iter().map(|&(l, h)| Component::head(l, h, EQ_POS)).collect();
    let tes = activation_patch_many(model, task, &components, pairs)?;
    let des = direct_effect_many(model, task, &components, pairs)?;
    let te_scale = tes.iter().fold(0.0f64, |acc, t| acc.max(t.abs())).max(1e-12);

    let keys: Vec<SiteKey> =
        heads.iter().map(|&(l, h)| SiteKey::new(l, Site::HeadOut(h), EQ_POS)).collect();
    let (clean, _) = capture_both(model, task, &batch, &keys)?;

    let operand_parts = [JointPart::A, JointPart::B];
    let answer_parts = [JointPart::Sum];
    let mut cats = Vec::with_capacity(heads.len());
    let mut operand_fits: BTreeMap<(usize, usize), JointFit> = BTreeMap::new();
    let mut answer_fits: BTreeMap<(usize, usize), JointFit> = BTreeMap::new();

    for (idx, (&(layer, head), key)) in heads.iter().zip(&keys).enumerate() {
        let vectors = collect_pair_vectors(model, task, *key, fit_prompts)?;
        let fit_op = fit_joint(&vectors, spec, pca_dim, &operand_parts)?;
        let fit_ans = fit_joint(&vectors, spec, pca_dim, &answer_parts)?;
        let fit_full = fit_joint(&vectors, spec, pca_dim, &JOINT_ALL)?;

        let patch_ld = |fit: &JointFit| -> Result<f64> {
            let d = fit.c.shape()[0];
            let mut data = Vec::with_capacity(batch.n() * d);
            for &(a, b) in &batch.clean_pairs {
                data.extend_from_slice(reconstruct_joint(fit, a, b)?.data());
            }
            let mut patches = BTreeMap::new();
            patches.insert(*key, Tensor::matrix(batch.n(), d, data)?);
            let logits = run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All)?;
            Ok(batch.ld(&logits, v))
        };
        let ld_op = patch_ld(&fit_op)?;
        let ld_ans = patch_ld(&fit_ans)?;
        let ld_full = patch_ld(&fit_full)?;

        let te = tes[idx];
        let de = des[idx];
        let excluded = te.abs() < 1e-4 * te_scale || ld_full.abs() < 1e-12;
        let (r_operand, r_answer, c_operand, c_answer) = if excluded {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            let r_op = ld_op / ld_full;
            let r_ans = ld_ans / ld_full;
            let (c_op, c_ans) = head_confidences(te, de, r_op, r_ans);
            (r_op, r_ans, c_op, c_ans)
        };
        let label = if c_operand >= c_answer { HeadLabel::Operand } else { HeadLabel::Answer };
        operand_fits.insert((layer, head), fit_op);
        answer_fits.insert((layer, head), fit_ans);
        cats.push(HeadCategory {
            layer,
            head,
            te,
            de,
            r_operand,
            r_answer,
            c_operand,
            c_answer,
            label,
            excluded,
        });
    }

    // lowest-confidence m heads become mixed
    let mut by_conf: Vec<usize> = (0..cats.len()).collect();
    by_conf.sort_by(|&i, &j| {
        let ci = cats[i].c_operand.max(cats[i].c_answer);
        let cj = cats[j].c_operand.max(cats[j].c_answer);
        ci.partial_cmp(&cj).unwrap()
    });
    for &i in by_conf.iter().take(m.min(cats.len())) {
        cats[i].label = HeadLabel::Mixed;
    }

    let true_patches: Vec<(SiteKey, Tensor, Routing)> = keys
        .iter()
        .map(|key| Ok((*key, stack_site(&clean, key)?, Routing::All)))
        .collect::<Result<_>>()?;
    let true_ld = batch.ld(
        &run_with_routed_patches(model, &batch.corr_prompts, &true_patches)?,
        v,
    );

    let mut routed = Vec::with_capacity(keys.len());
    for (cat, key) in cats.iter().zip(&keys) {
        let id = (cat.layer, cat.head);
        let (tensor, routing) = if cat.excluded || cat.label == HeadLabel::Mixed {
            (stack_site(&clean, key)?, Routing::All)
        } else {
            let fit = match cat.label {
                HeadLabel::Operand => &operand_fits[&id],
                HeadLabel::Answer => &answer_fits[&id],
                HeadLabel::Mixed => unreachable!(),
            };
            let d = fit.c.shape()[0];
            let mut data = Vec::with_capacity(batch.n() * d);
            for &(a, b) in &batch.clean_pairs {
                data.extend_from_slice(reconstruct_joint(fit, a, b)?.data());
            }
            let routing = match cat.label {
                HeadLabel::Operand => Routing::All,
                _ => Routing::DirectOnly,
            };
            (Tensor::matrix(batch.n(), d, data)?, routing)
        };
        routed.push((*key, tensor, routing));
    }
    let categorized_ld =
        batch.ld(&run_with_routed_patches(model, &batch.corr_prompts, &routed)?, v);

    Ok(HeadCategorization { heads: cats, m, true_ld, categorized_ld })
}

/// TE (and DE where defined) for every component, as one report.
pub fn patch_sweep(
    model: &ToyTransformer,
    task: &TaskSpec,
    components: &[Component],
    pairs: &[PromptPair],
    with_de: bool,
) -> Result<PatchReport> {
    let tes = activation_patch_many(model, task, components, pairs)?;
    let des: Vec<Option<f64>> = if with_de {
        components
            .iter()
            .zip(&tes)
            .map(|(comp, _)| {
                let supported = match comp {
                    Component::Sites(keys) => keys.iter().all(additive_site),
                    Component::Neuron { .. } => true,
                };
                if supported {
                    direct_effect_many(model, task, std::slice::from_ref(comp), pairs)
                        .map(|v| Some(v[0]))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; components.len()]
    };
    let rows = components
        .iter()
        .zip(tes.iter().zip(des))
        .map(|(comp, (&te, de))| EffectRow {
            component: comp.label(),
            layer: comp.layer(),
            index: comp.index(),
            te,
            de,
            ie: de.map(|d| te - d),
        })
        .collect();
    Ok(PatchReport { metric: METRIC_ID.to_string(), n_pairs: pairs.len(), rows })
}

/// Mean clean-vs-corrupted answer-logit gap: the full-restoration ceiling
/// every LD is compared against.
pub fn restoration_ceiling(
    model: &ToyTransformer,
    task: &TaskSpec,
    pairs: &[PromptPair],
) -> Result<f64> {
    Ok(PairBatch::prepare(model, task, pairs)?.full_gap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_task, ModelConfig, TrainConfig};
    use std::sync::OnceLock;

    fn trained() -> &'static (ToyTransformer, TaskSpec) {
        static MODEL: OnceLock<(ToyTransformer, TaskSpec)> = OnceLock::new();
        MODEL.get_or_init(|| {
            let task = TaskSpec::add_mod(7);
            let config = ModelConfig {
                n_layers: 1,
                d_model: 48,
                n_heads: 2,
                d_head: 24,
                d_mlp: 96,
                vocab_size: task.vocab_size(),
                max_seq_len: SEQ_LEN,
                mlp_kind: crate::model::MlpKind::Simple,
                seed: 5,
            };
            let train = TrainConfig {
                steps: 1500,
                weight_decay: 0.05,
                train_fraction: 0.9,
                seed: 5,
                target_val_accuracy: Some(0.999),
                ..TrainConfig::quick()
            };
            let outcome = train_task(&config, &task, &train).unwrap();
            (outcome.model, task)
        })
    }

    fn pairs_fixture(n: usize) -> (&'static ToyTransformer, &'static TaskSpec, Vec<PromptPair>) {
        let (model, task) = trained();
        let pairs = make_prompt_pairs(model, task, n, CorruptMode::CorruptA, 11).unwrap();
        (model, task, pairs)
    }

    #[test]
    fn prompt_pairs_are_valid_and_seeded() {
        let (model, task, pairs) = pairs_fixture(30);
        assert_eq!(pairs.len(), 30);
        let mut seen = BTreeSet::new();
        for p in &pairs {
            assert_eq!(p.clean.1, p.corrupted.1, "corrupt_a keeps b fixed");
            assert_ne!(p.clean, p.corrupted);
            assert_eq!(p.answer_token, task.answer_token(p.clean.0, p.clean.1).unwrap());
            seen.insert((p.clean, p.corrupted));
        }
        assert_eq!(seen.len(), 30, "pairs sampled without replacement");
        for p in &pairs {
            for prompt in [p.clean, p.corrupted] {
                let mask = correct_mask(model, task, &[prompt]).unwrap();
                assert!(mask[0], "prompt {prompt:?} answered correctly");
            }
        }
        let again = make_prompt_pairs(model, task, 30, CorruptMode::CorruptA, 11).unwrap();
        assert_eq!(pairs, again);
        let b_mode = make_prompt_pairs(model, task, 10, CorruptMode::CorruptB, 3).unwrap();
        for p in &b_mode {
            assert_eq!(p.clean.0, p.corrupted.0, "corrupt_b keeps a fixed");
        }
    }

    #[test]
    fn too_many_pairs_requested_errors() {
        let (model, task) = trained();
        let err = make_prompt_pairs(model, task, 10_000_000, CorruptMode::CorruptA, 0);
        match err {
            Err(Error::Insufficient { have, .. }) => assert!(have < 10_000_000),
            other => panic!("expected Insufficient, got {other:?}"),
        }
    }

    #[test]
    fn empty_patch_is_zero_and_full_residual_restores() {
        let (model, task, pairs) = pairs_fixture(25);
        let ld = activation_patch(model, task, &Component::Sites(vec![]), &pairs).unwrap();
        assert_eq!(ld, 0.0);

        let final_resid = Component::site(SiteKey::resid(model.config.n_layers));
        let ld = activation_patch(model, task, &final_resid, &pairs).unwrap();
        let ceiling = restoration_ceiling(model, task, &pairs).unwrap();
        assert!((ld - ceiling).abs() <= 1e-4, "ld {ld} vs ceiling {ceiling}");
        assert!(ceiling > 0.1, "corruption moves the answer logit");
    }

    #[test]
    fn neuron_patch_matches_manual_vector_patch() {
        let (model, task, pairs) = pairs_fixture(8);
        let comp = Component::neuron(0, 3, EQ_POS);
        let ld = activation_patch(model, task, &comp, &pairs).unwrap();

        let batch = PairBatch::prepare(model, task, &pairs).unwrap();
        let key = SiteKey::new(0, Site::NeuronPre, EQ_POS);
        let (clean, corr) = capture_both(model, task, &batch, &[key]).unwrap();
        let mut manual = stack_site(&corr, &key).unwrap();
        let w = manual.shape()[1];
        for (i, trace) in clean.iter().enumerate() {
            manual.data_mut()[i * w + 3] = trace.value(&key).unwrap().data()[3];
        }
        let mut patches = BTreeMap::new();
        patches.insert(key, manual);
        let logits =
            run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All).unwrap();
        let expect = batch.ld(&logits, model.config.vocab_size);
        assert!((ld - expect).abs() <= 1e-6);
    }

    #[test]
    fn direct_effect_equals_total_effect_when_no_downstream_reader() {
        let (model, task, pairs) = pairs_fixture(20);
        // nothing runs after the MLP in a 1-layer model
        let mlp = Component::mlp(0, EQ_POS);
        let te = activation_patch(model, task, &mlp, &pairs).unwrap();
        let de = path_patch_direct(model, task, &mlp, &pairs).unwrap();
        assert!((te - de).abs() <= 1e-4, "mlp: te {te} de {de}");

        // a head's output still feeds the layer's own MLP, so its direct
        // effect must differ from its total effect unless the MLP is lesioned
        let head = Component::head(0, 1, EQ_POS);
        let te = activation_patch(model, task, &head, &pairs).unwrap();
        let de = path_patch_direct(model, task, &head, &pairs).unwrap();
        assert!((te - de).abs() > 1e-3, "head MLP path should be visible: te {te} de {de}");

        let mut lesioned = model.clone();
        let d_mlp = lesioned.config.d_mlp;
        let d = lesioned.config.d_model;
        lesioned
            .set_param("layer0.mlp.w_down", Tensor::matrix(d_mlp, d, vec![0.0; d_mlp * d]).unwrap())
            .unwrap();
        let pairs = make_prompt_pairs(&lesioned, task, 12, CorruptMode::CorruptA, 7).unwrap();
        let te = activation_patch(&lesioned, task, &head, &pairs).unwrap();
        let de = path_patch_direct(&lesioned, task, &head, &pairs).unwrap();
        assert!((te - de).abs() <= 1e-4, "lesioned head: te {te} de {de}");

        let resid = Component::site(SiteKey::resid(0));
        assert!(path_patch_direct(model, task, &resid, &pairs).is_err());
    }

    #[test]
    fn neuron_direct_effect_is_zero_off_the_last_token() {
        let (model, task, pairs) = pairs_fixture(10);
        let de =
            path_patch_direct(model, task, &Component::neuron(0, 2, A_POS), &pairs).unwrap();
        assert_eq!(de, 0.0, "off-token delta never reaches the readout");
        let de_last =
            path_patch_direct(model, task, &Component::neuron(0, 2, EQ_POS), &pairs).unwrap();
        let te_last =
            activation_patch(model, task, &Component::neuron(0, 2, EQ_POS), &pairs).unwrap();
        // single layer: the neuron's only path to the logits is direct
        assert!((de_last - te_last).abs() <= 1e-3, "de {de_last} te {te_last}");
    }

    #[test]
    fn attribution_is_exact_at_logits_and_zero_for_identical_pairs() {
        let (model, task, pairs) = pairs_fixture(15);
        let key = SiteKey::new(model.config.n_layers, Site::Logits, EQ_POS);
        let comp = Component::site(key);
        let approx = attribution_patch(model, task, &[comp.clone()], &pairs).unwrap()[0];
        let exact = activation_patch(model, task, &comp, &pairs).unwrap();
        assert!(
            (approx - exact).abs() <= 1e-4,
            "logits site is affine downstream: {approx} vs {exact}"
        );

        let degenerate: Vec<PromptPair> = pairs
            .iter()
            .map(|p| PromptPair { clean: p.clean, corrupted: p.clean, answer_token: p.answer_token })
            .collect();
        let zero = attribution_patch(model, task, &[comp], &degenerate).unwrap()[0];
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn attribution_matches_small_interpolation_slope() {
        let (model, task, pairs) = pairs_fixture(12);
        let comp = Component::neuron(0, 7, EQ_POS);
        let grad_est = attribution_patch(model, task, &[comp], &pairs).unwrap()[0];

        // finite-difference oracle: patch pre_j = corr + eps*(clean-corr)
        let batch = PairBatch::prepare(model, task, &pairs).unwrap();
        let key = SiteKey::new(0, Site::NeuronPre, EQ_POS);
        let (clean, corr) = capture_both(model, task, &batch, &[key]).unwrap();
        let eps = 1e-2f32;
        let mut patched = stack_site(&corr, &key).unwrap();
        let w = patched.shape()[1];
        for (i, (cl, co)) in clean.iter().zip(&corr).enumerate() {
            let c = cl.value(&key).unwrap().data()[7];
            let r = co.value(&key).unwrap().data()[7];
            patched.data_mut()[i * w + 7] = r + eps * (c - r);
        }
        let mut patches = BTreeMap::new();
        patches.insert(key, patched);
        let logits =
            run_with_intervention(model, &batch.corr_prompts, &patches, Routing::All).unwrap();
        let slope = batch.ld(&logits, model.config.vocab_size) / eps as f64;
        assert!(
            (grad_est - slope).abs() <= 0.05 * grad_est.abs().max(slope.abs()).max(1e-6),
            "attribution {grad_est} vs slope {slope}"
        );
    }

    #[test]
    fn exact_interpolating_fit_matches_activation_patch() {
        let (model, task, pairs) = pairs_fixture(20);
        // embeddings at the a position depend only on a, so the role-average
        // is exact and a full-rank PCA fit interpolates it
        let key = SiteKey::new(0, Site::ResidPre, A_POS);
        let prompts: Vec<(i64, i64)> = task.valid_pairs();
        let fit =
            fit_role_manifold(model, task, key, TokenRole::A, &prompts, &BasisSpec::pca_baseline(3), 64)
                .unwrap();
        let fit_ld = patch_with_fit(model, task, key, &fit, &pairs).unwrap();
        let act_ld =
            activation_patch(model, task, &Component::site(key), &pairs).unwrap();
        assert!((fit_ld - act_ld).abs() <= 1e-4, "fit {fit_ld} vs activation {act_ld}");
    }

    #[test]
    fn fit_role_mismatch_errors() {
        let (model, task, pairs) = pairs_fixture(5);
        let key = SiteKey::new(0, Site::ResidPre, A_POS);
        let prompts = task.valid_pairs();
        let fit =
            fit_role_manifold(model, task, key, TokenRole::A, &prompts, &BasisSpec::pca_baseline(2), 32)
                .unwrap();
        let wrong_key = SiteKey::new(0, Site::ResidPre, B_POS);
        assert!(patch_with_fit(model, task, wrong_key, &fit, &pairs).is_err());
        assert!(fit_role_manifold(
            model,
            task,
            wrong_key,
            TokenRole::A,
            &prompts,
            &BasisSpec::pca_baseline(2),
            32
        )
        .is_err());
    }

    #[test]
    fn full_space_fit_ablation_equals_mean_ablation() {
        let (model, task) = trained();
        let prompts = sample_correct_prompts(model, task, 40, 9).unwrap();
        // the embedding stream at the a position depends only on a, so 6 PCA
        // components span the whole 7-value cloud and the subspace ablation
        // collapses every prompt to the dataset mean
        let key = SiteKey::new(0, Site::ResidPre, A_POS);
        let fit = fit_role_manifold(
            model,
            task,
            key,
            TokenRole::A,
            &task.valid_pairs(),
            &BasisSpec::pca_baseline(3),
            64,
        )
        .unwrap();
        let report = ablate_subspace(model, task, &fit, key, &prompts).unwrap();
        assert!(
            (report.subspace_accuracy - report.full_accuracy).abs() <= 1e-4,
            "subspace {} vs full {}",
            report.subspace_accuracy,
            report.full_accuracy
        );
        assert!((report.subspace_logit - report.full_logit).abs() <= 1e-3);
        assert!(report.baseline_accuracy == 1.0, "sampled prompts are all correct");
    }

    #[test]
    fn select_topk_dominant_component_and_monotone_threshold() {
        let (model, task, pairs) = pairs_fixture(20);
        let mut components = vec![Component::site(SiteKey::resid(model.config.n_layers))];
        for h in 0..model.config.n_heads {
            components.push(Component::head(0, h, EQ_POS));
        }
        let effects = activation_patch_many(model, task, &components, &pairs).unwrap();
        let sel = select_topk(model, task, &components, &effects, 0.95, &pairs).unwrap();
        assert!(sel.reached);
        assert_eq!(sel.k, 1, "final-residual patch alone restores everything");
        assert_eq!(sel.order[0], 0);

        let loose = select_topk(model, task, &components, &effects, 0.5, &pairs).unwrap();
        assert!(loose.k <= sel.k);
    }

    #[test]
    fn select_topk_tie_break_is_by_layer_then_index() {
        let (model, task, pairs) = pairs_fixture(5);
        let components =
            vec![Component::head(0, 1, EQ_POS), Component::head(0, 0, EQ_POS)];
        let sel = select_topk(model, task, &components, &[1.0, 1.0], 1.0, &pairs).unwrap();
        assert_eq!(sel.order, vec![1, 0], "equal effects sort by head index");
    }

    #[test]
    fn route_patch_equals_te_when_receiver_is_sole_consumer() {
        let (model, task) = trained();
        // zero the MLP output weights: heads' only consumer is the readout
        let mut lesioned = model.clone();
        let d_mlp = lesioned.config.d_mlp;
        let d = lesioned.config.d_model;
        lesioned
            .set_param("layer0.mlp.w_down", Tensor::matrix(d_mlp, d, vec![0.0; d_mlp * d]).unwrap())
            .unwrap();
        let pairs = make_prompt_pairs(&lesioned, task, 12, CorruptMode::CorruptA, 2).unwrap();
        let sender = SiteKey::new(0, Site::AttnOut, EQ_POS);
        let receiver = SiteKey::new(lesioned.config.n_layers, Site::Logits, EQ_POS);
        let route = path_patch_route(&lesioned, task, sender, receiver, &pairs).unwrap();
        let te =
            activation_patch(&lesioned, task, &Component::site(sender), &pairs).unwrap();
        assert!((route - te).abs() <= 1e-4, "route {route} vs te {te}");
    }

    #[test]
    fn route_ordering_violations_error() {
        let (model, task, pairs) = pairs_fixture(5);
        let mlp = SiteKey::new(0, Site::MlpOut, EQ_POS);
        assert!(path_patch_route(model, task, mlp, mlp, &pairs).is_err());
        let attn = SiteKey::new(0, Site::AttnOut, EQ_POS);
        let resid = SiteKey::resid(0);
        assert!(path_patch_route(model, task, resid, mlp, &pairs).is_err());
        // receiver must be mlp_out or logits
        assert!(path_patch_route(model, task, attn, resid, &pairs).is_err());
    }

    #[test]
    fn confidence_arithmetic() {
        let (c_op, c_ans) = head_confidences(1.0, 0.2, 0.9, 0.5);
        assert!((c_op - 0.72).abs() < 1e-12);
        assert!((c_ans - 0.1).abs() < 1e-12);
        // DE = TE and a perfect a+b fit: pure answer head
        let (c_op, c_ans) = head_confidences(2.0, 2.0, 0.4, 1.0);
        assert_eq!(c_op, 0.0);
        assert_eq!(c_ans, 1.0);
        // scale invariance
        let (a1, b1) = head_confidences(1.5, 0.6, 0.8, 0.7);
        let (a2, b2) = head_confidences(3.0, 1.2, 0.8, 0.7);
        assert!((a1 - a2).abs() < 1e-12 && (b1 - b2).abs() < 1e-12);
    }

    #[test]
    fn categorize_heads_runs_and_validates() {
        let (model, task, pairs) = pairs_fixture(20);
        let heads: Vec<(usize, usize)> = (0..model.config.n_heads).map(|h| (0, h)).collect();
        let fit_prompts = sample_correct_prompts(model, task, 40, 21).unwrap();
        let spec = BasisSpec::circle(&[7.0]);
        let cat =
            categorize_heads(model, task, &heads, &pairs, &fit_prompts, &spec, 32, 1).unwrap();
        assert_eq!(cat.heads.len(), heads.len());
        assert_eq!(cat.heads.iter().filter(|c| c.label == HeadLabel::Mixed).count(), 1);
        assert!(cat.true_ld.is_finite() && cat.categorized_ld.is_finite());
        for c in &cat.heads {
            if !c.excluded {
                assert!(c.c_operand.is_finite() && c.c_answer.is_finite());
            }
        }
    }

    #[test]
    fn patch_sweep_report_layout() {
        let (model, task, pairs) = pairs_fixture(10);
        let components = vec![
            Component::mlp(0, EQ_POS),
            Component::head(0, 0, EQ_POS),
            Component::neuron(0, 5, EQ_POS),
            Component::site(SiteKey::resid(0)),
        ];
        let report = patch_sweep(model, task, &components, &pairs, true).unwrap();
        assert_eq!(report.metric, METRIC_ID);
        assert_eq!(report.n_pairs, 10);
        assert_eq!(report.rows.len(), 4);
        for row in &report.rows[..3] {
            let de = row.de.expect("additive component has DE");
            assert!((row.ie.unwrap() - (row.te - de)).abs() < 1e-12);
        }
        assert!(report.rows[3].de.is_none(), "resid_pre has no direct-effect decomposition");
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("component,layer,index,te,de,ie,n_pairs"));
        assert!(csv.contains("l0.neuron[5].p4"));
    }

    #[test]
    fn shuffled_labels_permute_but_preserve_multiset() {
        let mut vectors = BTreeMap::new();
        for v in 0..10i64 {
            vectors.insert(v, Tensor::vector(vec![v as f32, 1.0]));
        }
        let shuffled = shuffle_value_labels(&vectors, 4);
        assert_eq!(shuffled.len(), 10);
        let mut firsts: Vec<f32> = shuffled.values().map(|t| t.data()[0]).collect();
        firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(firsts, (0..10).map(|v| v as f32).collect::<Vec<_>>());
        let moved = (0..10i64).filter(|v| shuffled[v].data()[0] != *v as f32).count();
        assert!(moved > 0, "seed 4 actually permutes");
    }
}
