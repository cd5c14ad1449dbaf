//! Command implementations behind the `catp` binary.

pub mod heatmap;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use catp::baselines::{apply_criterion, Criterion, Scope};
use catp::compare::{jaccard, keep_scores, retained_images, spearman};
use catp::cost::{cost_report, CostRow, ModelDims, SequenceSizes};
use catp::decoder::ToyDecoderConfig;
use catp::format::{load_sequence, save_sequence, SequenceFormat};
use catp::pipeline::{run_catp_detailed, Ablation};
use catp::seq::{synth_with, SynthSpec};
use catp::{Ablations, InContextSequence, PruneConfig, PruneTrace};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Reduction used as the reference point in cost reports.
pub const REFERENCE_REDUCTION: f64 = 0.790;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] catp::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(catp::Error::Infeasible { .. }) => 3,
            CliError::Core(catp::Error::Io(_)) | CliError::Io { .. } | CliError::Csv(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "catp", version, about = "Two-stage image token pruning for multimodal in-context sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic sequence file.
    Gen(GenArgs),
    /// Run the two-stage pipeline; writes trace, summary and heatmap.
    Prune(PruneArgs),
    /// Run a single-criterion baseline.
    Baseline(BaselineArgs),
    /// Pairwise overlap and rank correlation between methods.
    Compare(CompareArgs),
    /// Closed-form FLOPs and KV-cache report.
    Cost(CostArgs),
    /// Render a trace as an SVG heatmap.
    Heatmap(HeatmapArgs),
}

fn parse_synth(s: &str) -> std::result::Result<SynthSpec, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [n, img, txt, dim] => Ok(SynthSpec::new(n, img, txt, dim)),
        [n, img, txt, dim, sys] => Ok(SynthSpec {
            system_tokens: sys,
            ..SynthSpec::new(n, img, txt, dim)
        }),
        _ => Err("expected n,img,txt,dim[,system]".into()),
    }
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct InputArgs {
    /// Sequence file (JSON or CATP1 binary).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Synthetic sequence: n,img,txt,dim[,system].
    #[arg(long, value_parser = parse_synth)]
    pub synth: Option<SynthSpec>,
}

impl InputArgs {
    pub fn load(&self, seed: u64) -> Result<InContextSequence> {
        match (&self.input, self.synth) {
            (Some(p), _) => Ok(load_sequence(&read(p)?)?),
            (None, Some(spec)) => Ok(synth_with(seed, spec)?),
            (None, None) => unreachable!("clap enforces one input"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 6)]
    pub start_layer: usize,
    #[arg(long, default_value_t = 0.7)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.6)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub stage1_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_per_image: usize,
    /// Toy decoder depth.
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, env = "CATP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Omit the timestamp so re-runs are byte-identical.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub deterministic: bool,
}

impl RunArgs {
    pub fn config(&self, ratio: f64) -> PruneConfig {
        PruneConfig {
            ratio,
            start_layer: self.start_layer,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            stage1_fraction: self.stage1_fraction,
            min_tokens_per_image: self.min_per_image,
            seed: self.seed,
        }
    }

    pub fn decoder(&self) -> ToyDecoderConfig {
        ToyDecoderConfig::with_layers(self.layers)
    }

    fn stamp(&self, trace: &mut PruneTrace) {
        if !self.deterministic {
            trace.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = parse_synth)]
    pub synth: SynthSpec,
    #[arg(long, env = "CATP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Catp1)]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Json,
    Catp1,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Pruning ratio; a comma list runs a sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.778")]
    pub ratio: Vec<f64>,
    #[arg(long = "ablation")]
    pub ablations: Vec<Ablation>,
    /// Also write decoder attention diagnostics.
    #[arg(long)]
    pub dump_decoder: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Global,
    PerImage,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Global => Scope::Global,
            ScopeArg::PerImage => Scope::PerImage,
        }
    }
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 0.778)]
    pub ratio: f64,
    /// random | fastv[:l] | intra-cross[:l] | query-cross[:l] | diversity
    #[arg(long)]
    pub criterion: String,
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    pub scope: ScopeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 0.778)]
    pub ratio: f64,
    /// Methods to compare; `catp` is the full pipeline.
    #[arg(long, default_values_t = vec!["catp".to_string(), "random".to_string()])]
    pub criterion: Vec<String>,
    #[arg(long = "ablation")]
    pub ablations: Vec<Ablation>,
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    pub scope: ScopeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Take token counts from a sequence file instead of the size flags.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.778")]
    pub ratio: Vec<f64>,
    #[arg(long, default_value_t = 6)]
    pub start_layer: usize,
    #[arg(long, default_value_t = 0.5)]
    pub stage1_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_per_image: usize,
    /// Model depth.
    #[arg(long, default_value_t = 32)]
    pub layers: usize,
    #[arg(long, default_value_t = 4096)]
    pub hidden_d: u64,
    #[arg(long, default_value_t = 11008)]
    pub ffn_m: u64,
    #[arg(long, default_value_t = 2)]
    pub kv_bytes: u64,
    #[arg(long, default_value_t = 1.0)]
    pub kv_group: f64,
    #[arg(long, default_value_t = 4)]
    pub n_shots: usize,
    #[arg(long, default_value_t = 576)]
    pub tokens_per_image: usize,
    /// Total text tokens across all segments.
    #[arg(long, default_value_t = 120)]
    pub text_tokens: usize,
    #[arg(long, default_value_t = 35)]
    pub system_tokens: usize,
    #[arg(long, default_value = "llava-next-7b")]
    pub config_id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Stable summary CSV schema, one row per run.
#[derive(Debug, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub seed: u64,
    pub ratio: f64,
    pub start_layer: Option<usize>,
    pub num_layers: Option<usize>,
    pub ablations: String,
    pub total_image_tokens: usize,
    pub target_retained: usize,
    pub retained_image_tokens: usize,
    pub stage1_removed: usize,
    pub stage2_context: usize,
    pub stage2_query: usize,
    pub total_removed: usize,
    pub min_guard_binding: bool,
    pub spilled: usize,
    pub icd_retained: String,
    pub query_retained: usize,
}

impl SummaryRow {
    pub fn of(t: &PruneTrace) -> Self {
        let icd: Vec<String> = t.icd_retained_counts().iter().map(|c| c.to_string()).collect();
        Self {
            method: t.method.clone(),
            seed: t.seed,
            ratio: t.ratio,
            start_layer: t.start_layer,
            num_layers: t.num_layers,
            ablations: t.ablations.join("|"),
            total_image_tokens: t.total_image_tokens,
            target_retained: t.target_retained,
            retained_image_tokens: t.retained_image_tokens,
            stage1_removed: t.budgets.stage1_removed,
            stage2_context: t.budgets.stage2_context,
            stage2_query: t.budgets.stage2_query,
            total_removed: t.budgets.total_removed,
            min_guard_binding: t.guard.min_guard_binding,
            spilled: t.guard.spilled,
            icd_retained: icd.join(";"),
            query_retained: t.per_image.iter().filter(|p| !p.kind.is_icd()).map(|p| p.retained).sum(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CompareRow {
    pub a: String,
    pub b: String,
    pub jaccard: f64,
    pub spearman: Option<f64>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn ratio_tag(r: f64) -> String {
    format!("r{r}")
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Prune(a) => cmd_prune(&a, out),
        Command::Baseline(a) => cmd_baseline(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
        Command::Cost(a) => cmd_cost(&a, out),
        Command::Heatmap(a) => cmd_heatmap(&a, out),
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) {
    let _ = writeln!(out, "{line}");
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let seq = synth_with(a.seed, a.synth)?;
    let fmt = match a.format {
        FormatArg::Json => SequenceFormat::Json,
        FormatArg::Catp1 => SequenceFormat::Catp1,
    };
    write_atomic(&a.out, &save_sequence(&seq, fmt)?)?;
    say(out, format_args!("wrote {} ({} tokens, seed {})", a.out.display(), seq.len(), a.seed));
    Ok(())
}

struct PruneOutput {
    trace: PruneTrace,
    decoder: Option<serde_json::Value>,
}

fn prune_one(seq: &InContextSequence, a: &PruneArgs, ablations: &Ablations, ratio: f64) -> Result<PruneOutput> {
    let r = run_catp_detailed(seq, &a.run.config(ratio), &a.run.decoder(), ablations)?;
    let decoder = if a.dump_decoder {
        let last = |t: &catp::decoder::DecoderTrace| t.hidden[0].rows().saturating_sub(1);
        let mut m = serde_json::Map::new();
        if let Some(t) = &r.decoder {
            m.insert("full".into(), serde_json::to_value(t.diagnostics(&[last(t)]))?);
        }
        if let Some(t) = &r.after_context {
            m.insert("after_context".into(), serde_json::to_value(t.diagnostics(&[last(t)]))?);
        }
        if let Some(t) = &r.after_query {
            m.insert("after_query".into(), serde_json::to_value(t.diagnostics(&[last(t)]))?);
        }
        Some(serde_json::Value::Object(m))
    } else {
        None
    };
    let mut trace = r.trace;
    a.run.stamp(&mut trace);
    Ok(PruneOutput { trace, decoder })
}

pub fn cmd_prune(a: &PruneArgs, out: &mut dyn Write) -> Result<()> {
    let seq = a.input.load(a.run.seed)?;
    let ablations = Ablations::from_list(&a.ablations)?;
    // Sweep points run in parallel; each writes its own files.
    let results: Vec<Result<PruneOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = a
            .ratio
            .iter()
            .map(|&r| {
                let (seq, ablations) = (&seq, &ablations);
                s.spawn(move || prune_one(seq, a, ablations, r))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("prune worker panicked")).collect()
    });
    let sweep = a.ratio.len() > 1;
    let mut rows = Vec::new();
    for (res, &ratio) in results.into_iter().zip(&a.ratio) {
        let o = res?;
        let suffix = if sweep { format!("-{}", ratio_tag(ratio)) } else { String::new() };
        write_atomic(&a.out.join(format!("trace{suffix}.json")), &json_bytes(&o.trace)?)?;
        write_atomic(&a.out.join(format!("heatmap{suffix}.svg")), heatmap::render(&o.trace).as_bytes())?;
        if let Some(d) = o.decoder {
            write_atomic(&a.out.join(format!("decoder{suffix}.json")), &json_bytes(&d)?)?;
        }
        say(
            out,
            format_args!(
                "R={ratio}: retained {}/{} image tokens (target {}), per-ICD {:?}",
                o.trace.retained_image_tokens,
                o.trace.total_image_tokens,
                o.trace.target_retained,
                o.trace.icd_retained_counts()
            ),
        );
        rows.push(SummaryRow::of(&o.trace));
    }
    write_atomic(&a.out.join("summary.csv"), &csv_bytes(&rows)?)?;
    Ok(())
}

fn baseline_trace(seq: &InContextSequence, run: &RunArgs, name: &str, ratio: f64, scope: Scope) -> Result<PruneTrace> {
    let criterion = Criterion::parse(name, run.seed)?;
    let mut t = apply_criterion(seq, &criterion, ratio, &run.decoder(), scope)?;
    t.seed = run.seed;
    Ok(t)
}

pub fn cmd_baseline(a: &BaselineArgs, out: &mut dyn Write) -> Result<()> {
    let seq = a.input.load(a.run.seed)?;
    let mut t = baseline_trace(&seq, &a.run, &a.criterion, a.ratio, a.scope.into())?;
    a.run.stamp(&mut t);
    write_atomic(&a.out.join("trace.json"), &json_bytes(&t)?)?;
    write_atomic(&a.out.join("heatmap.svg"), heatmap::render(&t).as_bytes())?;
    write_atomic(&a.out.join("summary.csv"), &csv_bytes(&[SummaryRow::of(&t)])?)?;
    say(
        out,
        format_args!("{}: retained {}/{} image tokens", t.method, t.retained_image_tokens, t.total_image_tokens),
    );
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let seq = a.input.load(a.run.seed)?;
    let ablations = Ablations::from_list(&a.ablations)?;
    let mut traces = Vec::with_capacity(a.criterion.len());
    for name in &a.criterion {
        let t = if name.eq_ignore_ascii_case("catp") {
            run_catp_detailed(&seq, &a.run.config(a.ratio), &a.run.decoder(), &ablations)?.trace
        } else {
            baseline_trace(&seq, &a.run, name, a.ratio, a.scope.into())?
        };
        traces.push(t);
    }
    let mut rows = Vec::new();
    for i in 0..traces.len() {
        for j in i + 1..traces.len() {
            let (x, y) = (&traces[i], &traces[j]);
            rows.push(CompareRow {
                a: x.method.clone(),
                b: y.method.clone(),
                jaccard: jaccard(&retained_images(&seq, x), &retained_images(&seq, y)),
                spearman: spearman(&keep_scores(&seq, x), &keep_scores(&seq, y)),
            });
        }
    }
    for r in &rows {
        say(out, format_args!("{} vs {}: jaccard {:.4} spearman {:?}", r.a, r.b, r.jaccard, r.spearman));
    }
    write_atomic(&a.out.join("compare.csv"), &csv_bytes(&rows)?)?;
    Ok(())
}

pub fn cost_rows(a: &CostArgs) -> Result<(SequenceSizes, Vec<catp::cost::CostReport>)> {
    let sizes = match &a.input {
        Some(p) => SequenceSizes::of(&load_sequence(&read(p)?)?),
        None => SequenceSizes::uniform(a.n_shots, a.tokens_per_image, a.text_tokens, a.system_tokens),
    };
    let dims = ModelDims {
        hidden_d: a.hidden_d,
        ffn_m: a.ffn_m,
        layers: a.layers,
        kv_bytes_per_elem: a.kv_bytes,
        kv_group_factor: a.kv_group,
    };
    let reports = a
        .ratio
        .iter()
        .map(|&ratio| {
            let cfg = PruneConfig {
                ratio,
                start_layer: a.start_layer,
                stage1_fraction: a.stage1_fraction,
                min_tokens_per_image: a.min_per_image,
                ..Default::default()
            };
            cost_report(&a.config_id, &sizes, &cfg, &dims).map_err(CliError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sizes, reports))
}

pub fn cmd_cost(a: &CostArgs, out: &mut dyn Write) -> Result<()> {
    let (sizes, reports) = cost_rows(a)?;
    say(
        out,
        format_args!(
            "assumptions: d={} m={} L={} images={:?}+{} text={} system={} stage1_fraction={} min_per_image={}",
            a.hidden_d,
            a.ffn_m,
            a.layers,
            sizes.icd_images,
            sizes.query_image,
            sizes.text_tokens,
            sizes.system_tokens,
            a.stage1_fraction,
            a.min_per_image
        ),
    );
    say(
        out,
        format_args!(
            "schedule: layers 0..={k} at the stage-1 count, layer {} after context removal, the rest after query removal; KV bytes are an estimate",
            a.start_layer + 1,
            k = a.start_layer
        ),
    );
    for r in &reports {
        say(
            out,
            format_args!(
                "R={} K={}: reduction {:.4} (all tokens, primary), {:.4} (image tokens only); reference {REFERENCE_REDUCTION:.3}, deviation {:+.4}",
                r.row.ratio,
                r.row.start_layer,
                r.row.reduction,
                r.image_only_reduction,
                r.row.reduction - REFERENCE_REDUCTION
            ),
        );
    }
    let rows: Vec<CostRow> = reports.into_iter().map(|r| r.row).collect();
    write_atomic(&a.out.join("cost.csv"), &csv_bytes(&rows)?)?;
    Ok(())
}

pub fn cmd_heatmap(a: &HeatmapArgs, out: &mut dyn Write) -> Result<()> {
    let trace: PruneTrace = serde_json::from_slice(&read(&a.trace)?)?;
    write_atomic(&a.out, heatmap::render(&trace).as_bytes())?;
    say(out, format_args!("wrote {}", a.out.display()));
    Ok(())
}
