//! Per-layer record / replace / inject hooks consulted by every attention
//! layer of the denoiser.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::{
    apply_map, AttentionMap, AttentionMode, AttentionOutput, Replacement, Treatment,
};
use crate::error::{Error, Result};
use crate::infotheory::{self, LayerStats};
use crate::numcore::Tensor;

/// Which guidance branch a forward pass belongs to: condition (`u` = null
/// or negative prompt, `c` = prompt) and attention treatment of the
/// entropy-targeted layer (`A` native, `U` uniform, `I` identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    UncondNative,
    CondNative,
    CondUniform,
    CondIdentity,
    UncondIdentity,
}

impl Branch {
    /// Fixed evaluation order inside one sampling step.
    pub const ORDER: [Branch; 5] = [
        Branch::UncondNative,
        Branch::CondNative,
        Branch::CondUniform,
        Branch::CondIdentity,
        Branch::UncondIdentity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UncondNative => "uA",
            Self::CondNative => "cA",
            Self::CondUniform => "cU",
            Self::CondIdentity => "cI",
            Self::UncondIdentity => "uI",
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(
            self,
            Self::CondNative | Self::CondUniform | Self::CondIdentity
        )
    }

    /// Replacement applied to the targeted layer on this branch.
    pub fn targeted_replacement(self) -> Option<Replacement> {
        match self {
            Self::UncondNative | Self::CondNative => None,
            Self::CondUniform => Some(Replacement::Uniform),
            Self::CondIdentity | Self::UncondIdentity => Some(Replacement::Identity),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a layer does to its attention on every pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Action {
    Replace(Replacement),
    /// Use the banked map recorded for the same branch, timestep and block.
    Inject,
    /// Keep own queries, take keys and values from the bank.
    InjectKeysValues,
    /// Keep own map, take values from the bank.
    InjectValues,
    /// Cross-attention map replacement. The toy model has no
    /// cross-attention, so registering this fails.
    CrossAttentionReplace,
}

impl Action {
    fn label(self) -> &'static str {
        match self {
            Self::Replace(_) => "replace",
            Self::Inject => "inject",
            Self::InjectKeysValues => "inject_kv",
            Self::InjectValues => "inject_v",
            Self::CrossAttentionReplace => "cross_replace",
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inject" | "map" => Ok(Self::Inject),
            "inject_kv" | "kv" => Ok(Self::InjectKeysValues),
            "inject_v" | "v" | "values" => Ok(Self::InjectValues),
            other => other.parse().map(Self::Replace),
        }
    }
}

/// What to keep from a layer's passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Capture {
    #[default]
    Off,
    /// Attention maps only.
    Maps,
    /// Maps plus keys, values and the mixed output.
    Full,
    /// Per-pass [`LayerStats`] only; maps are discarded.
    Stats,
}

/// One registry entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Registration {
    Record {
        layer: usize,
        capture: Capture,
    },
    Act {
        layer: usize,
        action: Action,
    },
    /// Never capture this layer, even when recording is otherwise on.
    SuppressRecord {
        layer: usize,
    },
}

impl Registration {
    pub fn layer(&self) -> usize {
        match *self {
            Self::Record { layer, .. }
            | Self::Act { layer, .. }
            | Self::SuppressRecord { layer } => layer,
        }
    }
}

/// One layer's captured attention on one pass and token block.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub branch: Branch,
    pub layer_index: usize,
    pub mode: AttentionMode,
    pub timestep: usize,
    pub block_index: usize,
    pub map: AttentionMap,
    pub keys: Option<Tensor>,
    pub values: Option<Tensor>,
    pub mixed: Option<Tensor>,
}

impl AttentionRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            branch: self.branch,
            layer: self.layer_index,
            timestep: self.timestep,
            block: self.block_index,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub branch: Branch,
    pub layer: usize,
    pub timestep: usize,
    pub block: usize,
}

/// One hook invocation, logged per layer and pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HookCall {
    pub branch: Branch,
    pub layer: usize,
    pub timestep: usize,
    pub kind: &'static str,
    pub blocks: usize,
}

#[derive(Clone, Debug, Default)]
struct LayerHooks {
    capture: Capture,
    action: Option<Action>,
    suppressed: bool,
}

/// Hooks for one run. Not shared between concurrent runs.
#[derive(Clone, Debug)]
pub struct Registry {
    layers: Vec<LayerHooks>,
    bank: HashMap<RecordKey, AttentionRecord>,
    records: Vec<AttentionRecord>,
    stats: Vec<(Branch, LayerStats)>,
    calls: Vec<HookCall>,
    branch: Branch,
    overlay: Option<(usize, Replacement)>,
}

impl Registry {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerHooks::default(); n_layers],
            bank: HashMap::new(),
            records: Vec::new(),
            stats: Vec::new(),
            calls: Vec::new(),
            branch: Branch::CondNative,
            overlay: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn slot(&mut self, layer: usize) -> Result<&mut LayerHooks> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::Registry(format!("unknown layer index {layer} (model has {n})")))
    }

    pub fn register(&mut self, reg: Registration) -> Result<()> {
        match reg {
            Registration::Record { layer, capture } => self.slot(layer)?.capture = capture,
            Registration::SuppressRecord { layer } => self.slot(layer)?.suppressed = true,
            Registration::Act { layer, action } => {
                if action == Action::CrossAttentionReplace {
                    return Err(Error::Unsupported(
                        "cross-attention replacement: the model has no cross-attention".into(),
                    ));
                }
                let slot = self.slot(layer)?;
                if let Some(existing) = slot.action {
                    return Err(Error::Registry(format!(
                        "layer {layer} already has a {} action",
                        existing.label()
                    )));
                }
                slot.action = Some(action);
            }
        }
        Ok(())
    }

    pub fn register_all(&mut self, regs: impl IntoIterator<Item = Registration>) -> Result<()> {
        regs.into_iter().try_for_each(|r| self.register(r))
    }

    /// Captures every layer with `capture`.
    pub fn record_all(&mut self, capture: Capture) {
        for l in &mut self.layers {
            l.capture = capture;
        }
    }

    /// Back to pass-through: drops registrations, bank, records, stats and
    /// the call log.
    pub fn clear(&mut self) {
        let n = self.layers.len();
        *self = Self::new(n);
    }

    pub fn is_passthrough(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.capture == Capture::Off && l.action.is_none())
            && self.overlay.is_none()
    }

    /// Layers with a registered action, ascending.
    pub fn acted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&l| self.layers[l].action.is_some())
            .collect()
    }

    pub fn action(&self, layer: usize) -> Option<Action> {
        self.layers.get(layer).and_then(|l| l.action)
    }

    /// Sets the branch tag and the one-layer replacement overlay used by the
    /// perturbed guidance branches. The overlay wins over a registered
    /// action on the same layer.
    pub fn begin_pass(&mut self, branch: Branch, overlay: Option<(usize, Replacement)>) {
        self.branch = branch;
        self.overlay = overlay;
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// Makes `records` available to `Inject*` actions. Later entries with
    /// the same key replace earlier ones.
    pub fn load_bank(&mut self, records: impl IntoIterator<Item = AttentionRecord>) {
        for r in records {
            self.bank.insert(r.key(), r);
        }
    }

    pub fn clear_bank(&mut self) {
        self.bank.clear();
    }

    pub fn records(&self) -> &[AttentionRecord] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord> {
        std::mem::take(&mut self.records)
    }

    pub fn stats(&self) -> &[(Branch, LayerStats)] {
        &self.stats
    }

    pub fn take_stats(&mut self) -> Vec<(Branch, LayerStats)> {
        std::mem::take(&mut self.stats)
    }

    pub fn calls(&self) -> &[HookCall] {
        &self.calls
    }

    /// Number of logged calls of `kind` (`"inject"`, `"replace"`, ...).
    pub fn call_count(&self, kind: &str) -> usize {
        self.calls.iter().filter(|c| c.kind == kind).count()
    }

    pub(crate) fn layer_plan(&self, layer: usize) -> LayerPlan {
        let hooks = &self.layers[layer];
        let action = match self.overlay {
            Some((l, r)) if l == layer => Some(Action::Replace(r)),
            _ => hooks.action,
        };
        let capture = if hooks.suppressed {
            Capture::Off
        } else {
            hooks.capture
        };
        LayerPlan { action, capture }
    }

    /// Treatment for one block. Missing bank entries are injection errors.
    pub(crate) fn treatment(
        &self,
        plan: &LayerPlan,
        layer: usize,
        timestep: usize,
        block: usize,
    ) -> Result<Treatment<'_>> {
        let Some(action) = plan.action else {
            return Ok(Treatment::Native);
        };
        if let Action::Replace(r) = action {
            return Ok(Treatment::Replace(r));
        }
        let key = RecordKey {
            branch: self.branch,
            layer,
            timestep,
            block,
        };
        let rec = self.bank.get(&key).ok_or_else(|| {
            Error::Injection(format!(
                "no banked attention for branch {} layer {layer} t={timestep} block {block}",
                self.branch
            ))
        })?;
        let missing =
            |what: &str| Error::Injection(format!("banked record for layer {layer} has no {what}"));
        Ok(match action {
            Action::Inject => Treatment::InjectMap(&rec.map),
            Action::InjectKeysValues => Treatment::InjectKeysValues {
                keys: rec.keys.as_ref().ok_or_else(|| missing("keys"))?,
                values: rec.values.as_ref().ok_or_else(|| missing("values"))?,
            },
            Action::InjectValues => {
                Treatment::InjectValues(rec.values.as_ref().ok_or_else(|| missing("values"))?)
            }
            Action::Replace(_) | Action::CrossAttentionReplace => unreachable!(),
        })
    }

    /// Logs the call and captures whatever the layer's plan asks for.
    pub(crate) fn observe(
        &mut self,
        plan: &LayerPlan,
        layer: usize,
        mode: AttentionMode,
        timestep: usize,
        outputs: Vec<AttentionOutput>,
    ) -> Result<()> {
        let branch = self.branch;
        let blocks = outputs.len();
        if let Some(a) = plan.action {
            self.calls.push(HookCall {
                branch,
                layer,
                timestep,
                kind: a.label(),
                blocks,
            });
        }
        match plan.capture {
            Capture::Off => {}
            Capture::Stats => {
                self.calls.push(HookCall {
                    branch,
                    layer,
                    timestep,
                    kind: "stats",
                    blocks,
                });
                let s = layer_stats(layer, mode, timestep, &outputs)?;
                self.stats.push((branch, s));
            }
            Capture::Maps | Capture::Full => {
                self.calls.push(HookCall {
                    branch,
                    layer,
                    timestep,
                    kind: "record",
                    blocks,
                });
                let full = plan.capture == Capture::Full;
                for (block_index, o) in outputs.into_iter().enumerate() {
                    self.records.push(AttentionRecord {
                        branch,
                        layer_index: layer,
                        mode,
                        timestep,
                        block_index,
                        map: o.map,
                        keys: full.then_some(o.keys),
                        values: full.then_some(o.values),
                        mixed: full.then_some(o.mixed),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerPlan {
    pub action: Option<Action>,
    pub capture: Capture,
}

impl LayerPlan {
    pub fn is_noop(&self) -> bool {
        self.action.is_none() && self.capture == Capture::Off
    }
}

/// Aggregates one layer's blocks into [`LayerStats`]: entropy and map
/// energy averaged over blocks, output energies summed.
pub fn layer_stats(
    layer: usize,
    mode: AttentionMode,
    timestep: usize,
    outputs: &[AttentionOutput],
) -> Result<LayerStats> {
    let n = outputs.first().map(|o| o.map.n_tokens()).unwrap_or(0);
    let nb = outputs.len().max(1) as f64;
    let (mut h, mut e_map, mut e_av, mut e_uv, mut e_iv, mut inside) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
    let mut exact = true;
    let eye = Tensor::eye(n);
    for o in outputs {
        h += infotheory::entropy(&o.map)?;
        e_map += infotheory::energy_map(&o.map);
        let av = infotheory::energy_out(&o.mixed);
        let uv = uniform_output_energy(&o.values);
        let iv = infotheory::energy_out(&apply_map(&eye, &o.values)?);
        exact &= iv.to_bits() == infotheory::energy_out(&o.values).to_bits();
        if uv <= av && av <= iv {
            inside += 1;
        }
        e_av += av;
        e_uv += uv;
        e_iv += iv;
    }
    let entropy = h / nb;
    Ok(LayerStats {
        layer_index: layer,
        mode,
        n_tokens: n,
        timestep,
        entropy,
        entropy_pct: infotheory::entropy_pct(entropy, n),
        energy_map: e_map / nb,
        energy_out: e_av,
        energy_out_uniform: e_uv,
        energy_out_identity: e_iv,
        identity_energy_exact: exact,
        containment: inside as f64 / nb,
    })
}

/// `E(U·V)`: every row of `U·V` is the column mean of `V`.
fn uniform_output_energy(v: &Tensor) -> f64 {
    let (n, d) = v.shape2().expect("values are 2-D");
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| v.data()[r * d + c] as f64).sum::<f64>() / n as f64;
        total += n as f64 * mean * mean;
    }
    total
}
