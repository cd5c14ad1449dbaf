//! Closed-form prefill cost: per-layer FLOPs `4nd² + 2n²d + 3ndm` summed
//! over a token schedule, plus a KV-cache size estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{InContextSequence, PruneConfig};
use crate::stage1::stage1_budget;
use crate::stage2::{final_target, split_stage2_budget};
use crate::trace::PruneTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden_d: u64,
    pub ffn_m: u64,
    pub layers: usize,
    pub kv_bytes_per_elem: u64,
    /// Grouped-query sharing divisor; 1 for plain multi-head attention.
    pub kv_group_factor: f64,
}

impl ModelDims {
    /// LLaVA-NeXT-7B (Mistral-7B backbone) with an fp16 KV cache.
    pub fn llava_next_7b() -> Self {
        Self {
            hidden_d: 4096,
            ffn_m: 11008,
            layers: 32,
            kv_bytes_per_elem: 2,
            kv_group_factor: 1.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.hidden_d == 0 || self.ffn_m == 0 || self.layers == 0 || self.kv_bytes_per_elem == 0 {
            return Err(Error::invalid("model dims must be positive"));
        }
        if !(self.kv_group_factor >= 1.0 && self.kv_group_factor.is_finite()) {
            return Err(Error::invalid("kv group factor must be >= 1"));
        }
        Ok(())
    }
}

/// Tokens entering each decoder layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSchedule(Vec<u64>);

impl TokenSchedule {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("schedule needs at least one layer"));
        }
        if counts.contains(&0) {
            return Err(Error::invalid("schedule layers need at least one token"));
        }
        if counts.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("schedule must be non-increasing across layers"));
        }
        Ok(Self(counts))
    }

    pub fn uniform(n: u64, layers: usize) -> Result<Self> {
        Self::new(vec![n; layers])
    }

    /// Schedule actually executed by a pipeline run.
    pub fn from_trace(trace: &PruneTrace) -> Result<Self> {
        Self::new(trace.layer_tokens.iter().map(|&n| n as u64).collect())
    }

    pub fn counts(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> u64 {
        self.0.last().copied().unwrap_or(0)
    }
}

/// `4nd² + 2n²d + 3ndm` in checked integer arithmetic.
pub fn layer_flops(n: u64, d: u64, m: u64) -> Result<u128> {
    let (n, d, m) = (n as u128, d as u128, m as u128);
    let overflow = || Error::invalid("FLOPs overflow u128");
    let attn_proj = n.checked_mul(d).and_then(|v| v.checked_mul(d)).and_then(|v| v.checked_mul(4));
    let attn_mix = n.checked_mul(n).and_then(|v| v.checked_mul(d)).and_then(|v| v.checked_mul(2));
    let ffn = n.checked_mul(d).and_then(|v| v.checked_mul(m)).and_then(|v| v.checked_mul(3));
    attn_proj
        .zip(attn_mix)
        .zip(ffn)
        .and_then(|((a, b), c)| a.checked_add(b)?.checked_add(c))
        .ok_or_else(overflow)
}

pub fn schedule_flops(schedule: &TokenSchedule, dims: &ModelDims) -> Result<u128> {
    schedule.counts().iter().try_fold(0u128, |acc, &n| {
        acc.checked_add(layer_flops(n, dims.hidden_d, dims.ffn_m)?)
            .ok_or_else(|| Error::invalid("FLOPs overflow u128"))
    })
}

/// `1 - FLOPs(pruned) / FLOPs(vanilla)`.
pub fn flops_reduction(pruned: &TokenSchedule, vanilla: &TokenSchedule, dims: &ModelDims) -> Result<f64> {
    let p = schedule_flops(pruned, dims)?;
    let v = schedule_flops(vanilla, dims)?;
    if v == 0 {
        return Err(Error::invalid("vanilla schedule has zero cost"));
    }
    Ok(1.0 - p as f64 / v as f64)
}

/// `2 · L · n · d · bytes / group`, rounded to the nearest byte. An
/// estimator, not a measurement.
pub fn kv_bytes(n_final: u64, dims: &ModelDims) -> u128 {
    let raw = 2 * dims.layers as u128 * n_final as u128 * dims.hidden_d as u128 * dims.kv_bytes_per_elem as u128;
    (raw as f64 / dims.kv_group_factor).round() as u128
}

/// Token counts of a sequence, without embeddings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSizes {
    /// Demonstration image sizes in order.
    pub icd_images: Vec<usize>,
    pub query_image: usize,
    /// All text tokens (demonstrations and query).
    pub text_tokens: usize,
    pub system_tokens: usize,
}

impl SequenceSizes {
    pub fn uniform(n_shots: usize, tokens_per_image: usize, text_tokens: usize, system_tokens: usize) -> Self {
        Self {
            icd_images: vec![tokens_per_image; n_shots],
            query_image: tokens_per_image,
            text_tokens,
            system_tokens,
        }
    }

    pub fn of(seq: &InContextSequence) -> Self {
        use crate::seq::SegmentKind::*;
        let mut s = Self {
            icd_images: Vec::new(),
            query_image: 0,
            text_tokens: 0,
            system_tokens: 0,
        };
        for seg in seq.segments() {
            match seg.kind {
                System => s.system_tokens += seg.span.len,
                IcdImage => s.icd_images.push(seg.span.len),
                QueryImage => s.query_image += seg.span.len,
                IcdText | QueryText => s.text_tokens += seg.span.len,
            }
        }
        s
    }

    pub fn image_tokens(&self) -> usize {
        self.icd_images.iter().sum::<usize>() + self.query_image
    }

    pub fn non_image_tokens(&self) -> usize {
        self.text_tokens + self.system_tokens
    }

    pub fn total(&self) -> usize {
        self.image_tokens() + self.non_image_tokens()
    }
}

/// Image-token counts at the three points of the pipeline, from the same
/// integer budget rules the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCounts {
    pub after_stage1: usize,
    pub after_context: usize,
    pub after_query: usize,
}

pub fn catp_image_counts(sizes: &SequenceSizes, config: &PruneConfig) -> Result<ImageCounts> {
    config.check()?;
    let b = |n: usize| stage1_budget(n, config.ratio, config.stage1_fraction, config.min_tokens_per_image);
    let icd: Vec<usize> = sizes.icd_images.iter().map(|&n| b(n)).collect();
    let query = b(sizes.query_image);
    let after_stage1 = icd.iter().sum::<usize>() + query;
    let target = final_target(sizes.image_tokens(), config.ratio);
    let q = split_stage2_budget(&icd, query, target, config.min_tokens_per_image)?;
    Ok(ImageCounts {
        after_stage1,
        after_context: after_stage1 - q.context,
        after_query: after_stage1 - q.context - q.query,
    })
}

/// Which tokens the FLOPs formula counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenConvention {
    /// Every token in the sequence (primary).
    AllTokens,
    /// Image tokens only.
    ImageOnly,
}

/// Per-layer token counts for a pruned run: decoder layers `0..=K` see the
/// stage-1 survivors, layer `K + 1` the post-context set, and layers from
/// `K + 2` the final set.
pub fn catp_schedule(
    sizes: &SequenceSizes,
    config: &PruneConfig,
    dims: &ModelDims,
    convention: TokenConvention,
) -> Result<TokenSchedule> {
    dims.check()?;
    let k = config.start_layer;
    if k + 2 > dims.layers {
        return Err(Error::invalid(format!("K = {k} needs at least {} layers", k + 2)));
    }
    let c = catp_image_counts(sizes, config)?;
    let extra = match convention {
        TokenConvention::AllTokens => sizes.non_image_tokens(),
        TokenConvention::ImageOnly => 0,
    } as u64;
    let mut counts = Vec::with_capacity(dims.layers);
    counts.extend(std::iter::repeat_n(c.after_stage1 as u64 + extra, k + 1));
    counts.push(c.after_context as u64 + extra);
    counts.extend(std::iter::repeat_n(c.after_query as u64 + extra, dims.layers - k - 2));
    TokenSchedule::new(counts)
}

pub fn vanilla_schedule(sizes: &SequenceSizes, dims: &ModelDims, convention: TokenConvention) -> Result<TokenSchedule> {
    let n = match convention {
        TokenConvention::AllTokens => sizes.total(),
        TokenConvention::ImageOnly => sizes.image_tokens(),
    };
    TokenSchedule::uniform(n as u64, dims.layers)
}

/// One row of the cost CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub config_id: String,
    #[serde(rename = "R")]
    pub ratio: f64,
    #[serde(rename = "K")]
    pub start_layer: usize,
    pub flops_vanilla: u128,
    pub flops_pruned: u128,
    pub reduction: f64,
    pub kv_bytes_vanilla: u128,
    pub kv_bytes_pruned: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub row: CostRow,
    /// Reduction when only image tokens are counted.
    pub image_only_reduction: f64,
}

pub fn cost_report(config_id: &str, sizes: &SequenceSizes, config: &PruneConfig, dims: &ModelDims) -> Result<CostReport> {
    let pruned = catp_schedule(sizes, config, dims, TokenConvention::AllTokens)?;
    let vanilla = vanilla_schedule(sizes, dims, TokenConvention::AllTokens)?;
    let pruned_img = catp_schedule(sizes, config, dims, TokenConvention::ImageOnly)?;
    let vanilla_img = vanilla_schedule(sizes, dims, TokenConvention::ImageOnly)?;
    Ok(CostReport {
        row: CostRow {
            config_id: config_id.to_string(),
            ratio: config.ratio,
            start_layer: config.start_layer,
            flops_vanilla: schedule_flops(&vanilla, dims)?,
            flops_pruned: schedule_flops(&pruned, dims)?,
            reduction: flops_reduction(&pruned, &vanilla, dims)?,
            kv_bytes_vanilla: kv_bytes(vanilla.last(), dims),
            kv_bytes_pruned: kv_bytes(pruned.last(), dims),
        },
        image_only_reduction: flops_reduction(&pruned_img, &vanilla_img, dims)?,
    })
}
