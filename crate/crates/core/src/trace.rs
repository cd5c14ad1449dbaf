//! Pruning traces: what each stage removed, with scores and budgets.

use serde::{Deserialize, Serialize, Serializer};

use crate::seq::SegmentKind;
use crate::stage1::Stage1Selection;

pub(crate) fn round6<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(to6(*v))
}

pub(crate) fn round6_vec<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| to6(*x)))
}

fn to6(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    // avoid "-0.0" in output
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub index: usize,
    #[serde(serialize_with = "round6")]
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLabel {
    Stage1,
    Stage2Context,
    Stage2Query,
    /// Query and context pruned together at layer `K`.
    Stage2Merged,
    /// Single-shot removal by a baseline criterion.
    Criterion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRemoval {
    pub stage: StageLabel,
    pub layer: Option<usize>,
    /// Removed tokens in removal order.
    pub removed: Vec<ScoredToken>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRetention {
    pub segment: usize,
    pub kind: SegmentKind,
    pub sample_index: u32,
    pub start: usize,
    pub tokens: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    pub stage1_removed: usize,
    pub stage2_context: usize,
    pub stage2_query: usize,
    pub total_removed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardFlags {
    /// The per-image minimum changed a budget somewhere.
    pub min_guard_binding: bool,
    /// Tokens moved between the context and query quotas to respect the
    /// per-image minimum.
    pub spilled: usize,
    /// Stage-1 floor rounding already removed more than the overall target.
    pub stage1_overshoot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrace {
    pub method: String,
    pub seed: u64,
    pub ratio: f64,
    pub start_layer: Option<usize>,
    pub num_layers: Option<usize>,
    pub ablations: Vec<String>,
    pub total_image_tokens: usize,
    pub target_retained: usize,
    pub retained_image_tokens: usize,
    pub stage1: Vec<Stage1Selection>,
    pub removals: Vec<StageRemoval>,
    /// Per-token criterion scores over every image token (baselines only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scored: Vec<ScoredToken>,
    /// Every retained global token index (image and text), ascending.
    pub final_retained: Vec<usize>,
    pub per_image: Vec<ImageRetention>,
    pub budgets: Budgets,
    pub guard: GuardFlags,
    /// Rows entering each decoder layer, when a decoder ran.
    pub layer_tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl PruneTrace {
    pub fn stage(&self, label: StageLabel) -> Option<&StageRemoval> {
        self.removals.iter().find(|r| r.stage == label)
    }

    pub fn removed_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .removals
            .iter()
            .flat_map(|r| r.removed.iter().map(|t| t.index))
            .collect();
        v.sort_unstable();
        v
    }

    /// Retained image tokens of the demonstrations, in sample order.
    pub fn icd_retained_counts(&self) -> Vec<usize> {
        self.per_image
            .iter()
            .filter(|p| p.kind == SegmentKind::IcdImage)
            .map(|p| p.retained)
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}
