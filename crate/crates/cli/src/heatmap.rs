//! SVG retention heatmaps.

use std::collections::HashMap;
use std::fmt::Write;

use catp::seq::SegmentKind;
use catp::trace::StageLabel;
use catp::PruneTrace;

const CELL: usize = 8;
const GAP: usize = 1;
const LABEL_W: usize = 64;
const PAD: usize = 8;

fn stage_color(stage: StageLabel) -> &'static str {
    match stage {
        StageLabel::Stage1 => "#1f77b4",
        StageLabel::Stage2Context => "#d62728",
        StageLabel::Stage2Query => "#ff7f0e",
        StageLabel::Stage2Merged => "#9467bd",
        StageLabel::Criterion => "#2ca02c",
    }
}

fn stage_name(stage: StageLabel) -> &'static str {
    match stage {
        StageLabel::Stage1 => "stage 1",
        StageLabel::Stage2Context => "context",
        StageLabel::Stage2Query => "query",
        StageLabel::Stage2Merged => "merged",
        StageLabel::Criterion => "criterion",
    }
}

/// One row of cells per image: retained tokens filled, removed tokens
/// hollow with a stroke colored by the removing stage.
pub fn render(trace: &PruneTrace) -> String {
    let removed_by: HashMap<usize, StageLabel> = trace
        .removals
        .iter()
        .flat_map(|r| r.removed.iter().map(move |t| (t.index, r.stage)))
        .collect();
    let widest = trace.per_image.iter().map(|p| p.tokens).max().unwrap_or(0);
    let stages: Vec<StageLabel> = trace.removals.iter().map(|r| r.stage).collect();
    let width = PAD * 2 + LABEL_W + widest * (CELL + GAP);
    let legend_h = if stages.is_empty() { 0 } else { CELL + PAD };
    let height = PAD * 2 + trace.per_image.len() * (CELL + GAP) + legend_h + 14;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="8">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}">{} R={} retained {}/{}</text>"#,
        PAD + 6,
        trace.method,
        trace.ratio,
        trace.retained_image_tokens,
        trace.total_image_tokens
    );
    let top = PAD + 14;
    for (row, img) in trace.per_image.iter().enumerate() {
        let y = top + row * (CELL + GAP);
        let label = match img.kind {
            SegmentKind::QueryImage => "query".to_string(),
            _ => format!("icd {}", img.sample_index),
        };
        let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{label}</text>"#, y + CELL - 1);
        for k in 0..img.tokens {
            let x = PAD + LABEL_W + k * (CELL + GAP);
            let g = img.start + k;
            match removed_by.get(&g) {
                None => {
                    let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#333333"/>"##);
                }
                Some(&st) => {
                    let _ = writeln!(
                        s,
                        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}" stroke-width="1"/>"#,
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        CELL - 1,
                        CELL - 1,
                        stage_color(st)
                    );
                }
            }
        }
    }
    let ly = top + trace.per_image.len() * (CELL + GAP) + PAD;
    let mut lx = PAD;
    for st in stages {
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{}"/><text x="{}" y="{}">{}</text>"#,
            lx as f64 + 0.5,
            ly as f64 + 0.5,
            CELL - 1,
            CELL - 1,
            stage_color(st),
            lx + CELL + 3,
            ly + CELL - 1,
            stage_name(st)
        );
        lx += CELL + 3 + 6 * stage_name(st).len() + PAD;
    }
    s.push_str("</svg>\n");
    s
}
