//! Report-side analytics: policy agreement, action-distribution grids,
//! hand-rolled SVG rendering, and the serializable run report.
//!
//! Everything here is a pure function from numbers to numbers or strings;
//! the pipeline runner owns all file I/O. Rendered artifacts are fully
//! deterministic (fixed float formatting, no timestamps), so regenerating a
//! report from unchanged inputs reproduces it byte for byte. Wall-clock
//! timings therefore live in a separate sidecar, with the report carrying
//! only its file name.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Greedy action of a distribution; exact ties go to the lowest index.
pub fn argmax_action(policy: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in policy.iter().enumerate().skip(1) {
        if p > policy[best] {
            best = i;
        }
    }
    best
}

/// Fraction of states where the two policies pick the same greedy action.
pub fn policy_agreement(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!(
            "agreement needs matched state sets ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Usage("agreement over zero states".into()));
    }
    let matches = a
        .iter()
        .zip(b)
        .filter(|(pa, pb)| argmax_action(pa) == argmax_action(pb))
        .count();
    Ok(matches as f64 / a.len() as f64)
}

/// Pairwise agreement over a set of policies evaluated on the same states.
pub fn agreement_matrix(policies: &[&[Vec<f64>]]) -> Result<Vec<Vec<f64>>> {
    let n = policies.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            matrix[i][j] = policy_agreement(policies[i], policies[j])?;
        }
    }
    Ok(matrix)
}

/// Frequency of greedy actions over states, arranged on the 5x5 treatment
/// grid: `grid[iv_bin][vaso_bin]`, so action 0 sits at `grid[0][0]` and
/// action 24 at `grid[4][4]`. Cells sum to 1.
pub fn action_distribution(policies: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if policies.is_empty() {
        return Err(Error::Usage("action distribution over zero states".into()));
    }
    let mut grid = vec![vec![0.0; 5]; 5];
    let share = 1.0 / policies.len() as f64;
    for policy in policies {
        if policy.len() != 25 {
            return Err(Error::Schema(format!(
                "action distribution expects 25 actions, got {}",
                policy.len()
            )));
        }
        let a = argmax_action(policy);
        grid[a / 5][a % 5] += share;
    }
    Ok(grid)
}

/// Fixed-width float for rendered artifacts (CSV cells, SVG labels).
fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// CSV for a 5x5 grid: one row per IV bin, columns per vasopressor bin.
pub fn grid_csv(grid: &[Vec<f64>]) -> String {
    let mut out = String::from("iv_bin,vaso_0,vaso_1,vaso_2,vaso_3,vaso_4\n");
    for (iv, row) in grid.iter().enumerate() {
        out.push_str(&iv.to_string());
        for v in row {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    out
}

/// Minimal SVG heatmap of a 5x5 grid, IV dose increasing upward and
/// vasopressor dose to the right (action 0 bottom-left, 24 top-right).
pub fn svg_heatmap(grid: &[Vec<f64>], title: &str) -> String {
    const CELL: f64 = 56.0;
    const PAD: f64 = 46.0;
    let width = PAD + 5.0 * CELL + 14.0;
    let height = PAD + 5.0 * CELL + 30.0;
    let max = grid.iter().flatten().cloned().fold(0.0_f64, f64::max).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"16\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        width / 2.0,
        title
    ));
    for (iv, row) in grid.iter().enumerate() {
        for (vaso, &v) in row.iter().enumerate() {
            let x = PAD + vaso as f64 * CELL;
            // IV bin 0 renders at the bottom.
            let y = 24.0 + (4 - iv) as f64 * CELL;
            let shade = (255.0 - 205.0 * (v / max)).round() as u8;
            svg.push_str(&format!(
                "  <rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" \
                 fill=\"rgb({shade},{shade},255)\" stroke=\"#666\"/>\n"
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0,
                fmt(v)
            ));
        }
    }
    for bin in 0..5 {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{bin}</text>\n",
            PAD + bin as f64 * CELL + CELL / 2.0,
            24.0 + 5.0 * CELL + 16.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{bin}</text>\n",
            PAD - 14.0,
            24.0 + (4 - bin) as f64 * CELL + CELL / 2.0 + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">vasopressor bin</text>\n",
        PAD + 2.5 * CELL,
        24.0 + 5.0 * CELL + 29.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Minimal SVG bar chart over labeled bins.
pub fn svg_bars(bins: &[(String, f64)], title: &str, y_label: &str) -> String {
    const BAR: f64 = 34.0;
    const GAP: f64 = 8.0;
    const H: f64 = 180.0;
    let width = 60.0 + bins.len() as f64 * (BAR + GAP) + 12.0;
    let height = H + 70.0;
    let max = bins.iter().map(|(_, v)| *v).fold(0.0_f64, f64::max).max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"16\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        width / 2.0,
        title
    ));
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        24.0 + H / 2.0,
        24.0 + H / 2.0,
        y_label
    ));
    for (i, (label, v)) in bins.iter().enumerate() {
        let x = 60.0 + i as f64 * (BAR + GAP);
        let h = H * (v / max);
        let y = 24.0 + (H - h);
        svg.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{y}\" width=\"{BAR}\" height=\"{h}\" fill=\"rgb(90,90,220)\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x + BAR / 2.0,
            24.0 + H + 14.0,
            label
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\">{}</text>\n",
            x + BAR / 2.0,
            y - 3.0,
            fmt(*v)
        ));
    }
    svg.push_str(&format!(
        "  <line x1=\"56\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n",
        24.0 + H,
        width - 8.0,
        24.0 + H
    ));
    svg.push_str("</svg>\n");
    svg
}

/// One row of the policy-value table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyValueRow {
    pub encoding: String,
    pub policy: String,
    /// WDR with V-hat = max_a Q (the DQN policy's value function).
    pub wdr_dqn_value: f64,
    /// WDR with V-hat = mean_a Q.
    pub wdr_behavior_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub encoding: String,
    pub policy: String,
    pub fraction_nonzero: f64,
    pub fraction_nonzero_final: f64,
    pub zero_count: usize,
    pub total_cells: usize,
    /// (log10 decade, count) pairs plus the zero bucket count.
    pub decade_histogram: Vec<(i32, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgreementTable {
    pub encoding: String,
    pub policies: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionGridEntry {
    pub encoding: String,
    pub policy: String,
    pub grid: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub encoding: String,
    pub comparison: String,
    pub resamples: usize,
    pub skipped: usize,
    pub mean: f64,
    pub percentile_2_5: f64,
    pub percentile_97_5: f64,
    pub original: f64,
    pub min: f64,
    pub max: f64,
    pub negative_fraction: f64,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardModelSummary {
    pub test_accuracy: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub fraction_in_unit_band: f64,
    /// Fraction of transition rewards inside [-3, 3].
    pub fraction_in_reported_band: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub scale: String,
    pub patients: usize,
    /// Wall-clock timings live in this sidecar so the report itself stays
    /// byte-stable across reruns.
    pub timings_file: String,
}

/// The full run report, serialized as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    /// Empirical mean discounted return of the logged test trajectories.
    pub test_mean_return: f64,
    pub policy_values: Vec<PolicyValueRow>,
    pub agreement: Vec<AgreementTable>,
    pub action_grids: Vec<ActionGridEntry>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub bootstrap: Vec<BootstrapSummary>,
    pub reward_model: RewardModelSummary,
}

/// CSV of the policy-value table.
pub fn policy_value_csv(rows: &[PolicyValueRow]) -> String {
    let mut out = String::from("encoding,policy,wdr_dqn_value,wdr_behavior_value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.encoding, r.policy, r.wdr_dqn_value, r.wdr_behavior_value
        ));
    }
    out
}

/// CSV of one agreement matrix.
pub fn agreement_csv(table: &AgreementTable) -> String {
    let mut out = String::from("policy");
    for name in &table.policies {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, row) in table.policies.iter().zip(&table.matrix) {
        out.push_str(name);
        for v in row {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    out
}
