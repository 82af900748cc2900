//! Preprocessing, action discretization, cohort splitting, and cohort CSV
//! input/output.
//!
//! Preprocessing follows the feature table in [`crate::features`]: symmetric
//! features are standardized, heavy-tailed ones get log(1 + x); both are then
//! min-max rescaled into [0, 1] with statistics fitted on training data only.
//! Treatments are discretized onto a 5x5 grid (zero dose is its own bin, the
//! four remaining bins split the nonzero training doses at their quartiles),
//! giving action indices 0..24 with `index = 5 * iv_bin + vaso_bin`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Transform, FEATURES, FEATURE_COUNT};
use crate::sim::{Outcome, RawStep, RawTrajectory};

/// Fitted normalization for one feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub transform: Transform,
    /// Mean/stddev of the raw values (standardized features only).
    pub mean: f64,
    pub sd: f64,
    /// Range of the transformed values on the training set.
    pub post_min: f64,
    pub post_max: f64,
    /// True when the training column was constant; such features map to 0.5.
    pub constant: bool,
}

/// Fitted preprocessing for the whole 45-feature schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub features: Vec<FeatureStats>,
    pub warnings: Vec<String>,
}

/// The 5x5 treatment grid: bin 0 is exactly zero dose, bins 1-4 split the
/// nonzero doses at the fitted quartile edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionSpace {
    pub iv_edges: [f64; 4],
    pub vaso_edges: [f64; 4],
}

pub const ACTION_COUNT: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedStep {
    /// 45 values in [0, 1].
    pub obs: Vec<f64>,
    pub action: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedTrajectory {
    pub patient_id: String,
    pub steps: Vec<ProcessedStep>,
    pub outcome: Outcome,
}

// ----------------------------------------------------------------------
// Preprocessing
// ----------------------------------------------------------------------

fn check_widths(cohort: &[RawTrajectory]) -> Result<()> {
    for traj in cohort {
        for step in &traj.steps {
            if step.features.len() != FEATURE_COUNT {
                return Err(Error::Schema(format!(
                    "patient {} has {} features per step, expected {FEATURE_COUNT}",
                    traj.patient_id,
                    step.features.len()
                )));
            }
        }
    }
    Ok(())
}

/// Fit per-feature normalization statistics on a training cohort.
pub fn fit_preprocess(train: &[RawTrajectory]) -> Result<PreprocessStats> {
    if train.len() < 2 {
        return Err(Error::Data(format!(
            "preprocessing needs at least 2 trajectories, got {}",
            train.len()
        )));
    }
    check_widths(train)?;
    let mut features = Vec::with_capacity(FEATURE_COUNT);
    let mut warnings = Vec::new();
    for (j, def) in FEATURES.iter().enumerate() {
        // First pass: raw mean/stddev and the log-domain check.
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for traj in train {
            for (t, step) in traj.steps.iter().enumerate() {
                let x = step.features[j];
                if def.transform == Transform::Log && x < 0.0 {
                    return Err(Error::Data(format!(
                        "feature {} (index {j}) is log-transformed but has negative value \
                         {x} at patient {} step {t}",
                        def.name, traj.patient_id
                    )));
                }
                n += 1;
                sum += x;
                sumsq += x * x;
            }
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = (sumsq / nf - mean * mean).max(0.0);
        let sd = var.sqrt();

        // Second pass: transformed range.
        let constant_raw = def.transform == Transform::Standardize && sd < 1e-12;
        let mut post_min = f64::INFINITY;
        let mut post_max = f64::NEG_INFINITY;
        for traj in train {
            for step in &traj.steps {
                let y = transform_value(def.transform, mean, sd, constant_raw, step.features[j]);
                post_min = post_min.min(y);
                post_max = post_max.max(y);
            }
        }
        let constant = constant_raw || (post_max - post_min) < 1e-12;
        if constant {
            warnings.push(format!(
                "feature {} (index {j}) is constant on the training set; mapping it to 0.5",
                def.name
            ));
        }
        features.push(FeatureStats {
            transform: def.transform,
            mean,
            sd,
            post_min,
            post_max,
            constant,
        });
    }
    Ok(PreprocessStats { features, warnings })
}

/// Standardize or log-transform a single raw value (no rescaling yet).
fn transform_value(transform: Transform, mean: f64, sd: f64, constant: bool, x: f64) -> f64 {
    match transform {
        Transform::Standardize => {
            if constant {
                0.0
            } else {
                (x - mean) / sd
            }
        }
        Transform::Log => x.max(0.0).ln_1p(),
    }
}

impl PreprocessStats {
    /// Map one raw feature value into [0, 1].
    pub fn scale(&self, j: usize, x: f64) -> f64 {
        let s = &self.features[j];
        if s.constant {
            return 0.5;
        }
        let y = transform_value(s.transform, s.mean, s.sd, false, x);
        ((y - s.post_min) / (s.post_max - s.post_min)).clamp(0.0, 1.0)
    }
}

/// Apply fitted statistics to one trajectory, producing per-step observations
/// in [0, 1]. Out-of-range values (unseen during fit) clamp to the boundary.
pub fn apply_preprocess(stats: &PreprocessStats, raw: &RawTrajectory) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(raw.steps.len());
    for step in &raw.steps {
        if step.features.len() != stats.features.len() {
            return Err(Error::Schema(format!(
                "patient {} has {} features per step, expected {}",
                raw.patient_id,
                step.features.len(),
                stats.features.len()
            )));
        }
        let obs: Vec<f64> =
            (0..stats.features.len()).map(|j| stats.scale(j, step.features[j])).collect();
        out.push(obs);
    }
    Ok(out)
}

// ----------------------------------------------------------------------
// Action discretization
// ----------------------------------------------------------------------

/// Linear-interpolation percentile of an ascending-sorted slice:
/// rank h = (n − 1) p, interpolating between the straddling order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Fit the 5x5 action grid: per drug, edges at the 25/50/75/100th percentiles
/// of the nonzero training doses.
pub fn fit_action_space(train: &[RawTrajectory]) -> Result<ActionSpace> {
    let fit_drug = |name: &str, pick: &dyn Fn(&RawStep) -> f64| -> Result<[f64; 4]> {
        let mut doses: Vec<f64> = train
            .iter()
            .flat_map(|t| t.steps.iter())
            .map(pick)
            .filter(|&d| d > 0.0)
            .collect();
        if doses.is_empty() {
            return Err(Error::Config(format!(
                "cannot fit {name} bins: every training dose is zero"
            )));
        }
        doses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let edges = [
            percentile(&doses, 0.25),
            percentile(&doses, 0.50),
            percentile(&doses, 0.75),
            percentile(&doses, 1.00),
        ];
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "{name} quartile edges are not strictly increasing: {edges:?}"
            )));
        }
        Ok(edges)
    };
    Ok(ActionSpace {
        iv_edges: fit_drug("IV fluid", &|s| s.iv_dose)?,
        vaso_edges: fit_drug("vasopressor", &|s| s.vaso_dose)?,
    })
}

fn dose_bin(edges: &[f64; 4], dose: f64) -> usize {
    if dose == 0.0 {
        return 0;
    }
    // Values on an edge belong to the lower bin; values beyond the last edge
    // stay in bin 4.
    let above = edges.iter().filter(|&&e| e < dose).count();
    (1 + above).min(4)
}

impl ActionSpace {
    /// Discretize a dose pair into the 0..24 action index.
    pub fn discretize(&self, iv: f64, vaso: f64) -> Result<u8> {
        if iv < 0.0 || vaso < 0.0 {
            return Err(Error::Data(format!(
                "doses must be nonnegative, got iv={iv}, vaso={vaso}"
            )));
        }
        let iv_bin = dose_bin(&self.iv_edges, iv);
        let vaso_bin = dose_bin(&self.vaso_edges, vaso);
        Ok((5 * iv_bin + vaso_bin) as u8)
    }
}

/// Preprocess and discretize a whole cohort.
pub fn process_cohort(
    stats: &PreprocessStats,
    space: &ActionSpace,
    cohort: &[RawTrajectory],
) -> Result<Vec<ProcessedTrajectory>> {
    cohort
        .iter()
        .map(|raw| {
            let observations = apply_preprocess(stats, raw)?;
            let steps = observations
                .into_iter()
                .zip(&raw.steps)
                .map(|(obs, step)| {
                    Ok(ProcessedStep {
                        obs,
                        action: space.discretize(step.iv_dose, step.vaso_dose)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ProcessedTrajectory {
                patient_id: raw.patient_id.clone(),
                steps,
                outcome: raw.outcome,
            })
        })
        .collect()
}

// ----------------------------------------------------------------------
// Splitting
// ----------------------------------------------------------------------

/// Split a cohort at patient granularity: `floor(ratio * n)` patients go to
/// the training set. Membership is a seeded shuffle; each half keeps the
/// original cohort order.
pub fn split_cohort(
    cohort: &[RawTrajectory],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<RawTrajectory>, Vec<RawTrajectory>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if cohort.is_empty() {
        return Err(Error::Data("cannot split an empty cohort".into()));
    }
    let mut indices: Vec<usize> = (0..cohort.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_train = (ratio * cohort.len() as f64).floor() as usize;
    let train_set: BTreeSet<usize> = indices[..n_train].iter().copied().collect();
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(cohort.len() - n_train);
    for (i, traj) in cohort.iter().enumerate() {
        if train_set.contains(&i) {
            train.push(traj.clone());
        } else {
            test.push(traj.clone());
        }
    }
    Ok((train, test))
}

// ----------------------------------------------------------------------
// Cohort CSV
// ----------------------------------------------------------------------

/// Summary of a CSV ingestion: the cohort plus how many patients were
/// excluded for missing values (empty feature/dose cells; no imputation).
#[derive(Debug)]
pub struct IngestedCohort {
    pub cohort: Vec<RawTrajectory>,
    pub excluded_patients: usize,
}

/// Write a cohort as CSV: one row per (patient, step) with columns
/// `patient_id, t, f_00..f_44, iv_raw, vaso_raw, outcome` where outcome 1
/// means non-survivor.
pub fn write_cohort_csv(path: &Path, cohort: &[RawTrajectory]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["patient_id".to_string(), "t".to_string()];
    header.extend((0..FEATURE_COUNT).map(|j| format!("f_{j:02}")));
    header.push("iv_raw".into());
    header.push("vaso_raw".into());
    header.push("outcome".into());
    w.write_record(&header).map_err(csv_err)?;
    for traj in cohort {
        let outcome = match traj.outcome {
            Outcome::Survivor => "0",
            Outcome::NonSurvivor => "1",
        };
        for (t, step) in traj.steps.iter().enumerate() {
            let mut rec = vec![traj.patient_id.clone(), t.to_string()];
            rec.extend(step.features.iter().map(|v| v.to_string()));
            rec.push(step.iv_dose.to_string());
            rec.push(step.vaso_dose.to_string());
            rec.push(outcome.into());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Read a cohort CSV written by [`write_cohort_csv`] (or shaped like it).
/// Rows of one patient must be contiguous with `t` counting up from 0.
/// Patients containing empty cells are excluded (counted, not imputed);
/// malformed numbers or schema violations are hard errors.
pub fn read_cohort_csv(path: &Path) -> Result<IngestedCohort> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let width = 2 + FEATURE_COUNT + 3;
    {
        let header = r.headers().map_err(csv_err)?;
        if header.len() != width {
            return Err(Error::Schema(format!(
                "cohort csv has {} columns, expected {width}",
                header.len()
            )));
        }
    }

    struct Pending {
        id: String,
        steps: Vec<RawStep>,
        outcome: Outcome,
        has_missing: bool,
    }

    let mut cohort = Vec::new();
    let mut excluded = 0usize;
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    let mut pending: Option<Pending> = None;

    let flush = |p: Option<Pending>, cohort: &mut Vec<RawTrajectory>, excluded: &mut usize| {
        if let Some(p) = p {
            if p.has_missing {
                *excluded += 1;
            } else {
                cohort.push(RawTrajectory {
                    patient_id: p.id,
                    steps: p.steps,
                    outcome: p.outcome,
                    latent_trace: None,
                    intended_actions: None,
                });
            }
        }
    };

    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = line + 2; // 1-based, after the header
        if rec.len() != width {
            return Err(Error::Schema(format!(
                "row {row}: {} columns, expected {width}",
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        let t: usize = rec[1]
            .parse()
            .map_err(|_| Error::Data(format!("row {row}: bad step index '{}'", &rec[1])))?;
        let outcome = match &rec[width - 1] {
            "0" => Outcome::Survivor,
            "1" => Outcome::NonSurvivor,
            other => {
                return Err(Error::Data(format!("row {row}: bad outcome '{other}'")));
            }
        };

        let is_new = pending.as_ref().map(|p| p.id != id).unwrap_or(true);
        if is_new {
            flush(pending.take(), &mut cohort, &mut excluded);
            if !seen_ids.insert(id.clone()) {
                return Err(Error::Data(format!(
                    "row {row}: patient {id} appears in non-contiguous blocks"
                )));
            }
            if t != 0 {
                return Err(Error::Data(format!(
                    "row {row}: patient {id} starts at t={t}, expected 0"
                )));
            }
            pending = Some(Pending { id, steps: Vec::new(), outcome, has_missing: false });
        }
        let p = pending.as_mut().unwrap();
        if !is_new {
            if t != p.steps.len() {
                return Err(Error::Data(format!(
                    "row {row}: patient {} has t={t}, expected {}",
                    p.id,
                    p.steps.len()
                )));
            }
            if outcome != p.outcome {
                return Err(Error::Data(format!(
                    "row {row}: patient {} changes outcome mid-trajectory",
                    p.id
                )));
            }
        }

        let mut features = Vec::with_capacity(FEATURE_COUNT);
        let mut missing = false;
        let mut parse_cell = |cell: &str, col: &str| -> Result<f64> {
            if cell.is_empty() {
                missing = true;
                return Ok(f64::NAN);
            }
            cell.parse::<f64>()
                .map_err(|_| Error::Data(format!("row {row}: bad number '{cell}' in {col}")))
        };
        for j in 0..FEATURE_COUNT {
            let v = parse_cell(&rec[2 + j], &format!("f_{j:02}"))?;
            features.push(v);
        }
        let iv_dose = parse_cell(&rec[2 + FEATURE_COUNT], "iv_raw")?;
        let vaso_dose = parse_cell(&rec[2 + FEATURE_COUNT + 1], "vaso_raw")?;
        p.has_missing |= missing;
        p.steps.push(RawStep { features, iv_dose, vaso_dose });
    }
    flush(pending.take(), &mut cohort, &mut excluded);
    if cohort.is_empty() && excluded == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok(IngestedCohort { cohort, excluded_patients: excluded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{
        generate_cohort, sepsis_default, CANONICAL_IV_EDGES, CANONICAL_VASO_EDGES,
    };

    fn traj(id: &str, columns: Vec<Vec<f64>>, doses: Vec<(f64, f64)>) -> RawTrajectory {
        // `columns` holds per-step feature vectors.
        RawTrajectory {
            patient_id: id.into(),
            steps: columns
                .into_iter()
                .zip(doses)
                .map(|(features, (iv, vaso))| RawStep { features, iv_dose: iv, vaso_dose: vaso })
                .collect(),
            outcome: Outcome::Survivor,
            latent_trace: None,
            intended_actions: None,
        }
    }

    /// Two trajectories whose feature `j` takes exactly the given values,
    /// with every other feature pinned to benign in-range constants.
    fn cohort_with_feature_values(j: usize, values: &[f64]) -> Vec<RawTrajectory> {
        let base: Vec<f64> = FEATURES.iter().map(|d| (d.lo + d.hi) / 2.0).collect();
        let mk = |vals: &[f64], id: &str| {
            let cols: Vec<Vec<f64>> = vals
                .iter()
                .map(|&v| {
                    let mut row = base.clone();
                    row[j] = v;
                    row
                })
                .collect();
            let doses = vec![(50.0, 0.05); vals.len()];
            traj(id, cols, doses)
        };
        let half = values.len() / 2;
        vec![mk(&values[..half], "a"), mk(&values[half..], "b")]
    }

    #[test]
    fn standardized_feature_rescales_affinely() {
        // {0, 10, 20} must land on {0, 0.5, 1} regardless of the mean/sd.
        let j = crate::features::feature_index("HR").unwrap();
        let cohort = cohort_with_feature_values(j, &[0.0, 10.0, 20.0, 10.0]);
        let stats = fit_preprocess(&cohort).unwrap();
        assert_eq!(stats.scale(j, 0.0), 0.0);
        assert!((stats.scale(j, 10.0) - 0.5).abs() < 1e-12);
        assert_eq!(stats.scale(j, 20.0), 1.0);
    }

    #[test]
    fn constant_feature_maps_to_half() {
        let j = crate::features::feature_index("Sodium").unwrap();
        let cohort = cohort_with_feature_values(j, &[137.0, 137.0, 137.0, 137.0]);
        let stats = fit_preprocess(&cohort).unwrap();
        assert!(stats.features[j].constant);
        assert_eq!(stats.scale(j, 137.0), 0.5);
        assert_eq!(stats.scale(j, 150.0), 0.5);
        assert!(stats.warnings.iter().any(|w| w.contains("Sodium")));
    }

    #[test]
    fn training_set_spans_unit_interval_after_fit() {
        let cohort = generate_cohort(&sepsis_default(), 60, 2).unwrap();
        let stats = fit_preprocess(&cohort).unwrap();
        let mut min = vec![f64::INFINITY; FEATURE_COUNT];
        let mut max = vec![f64::NEG_INFINITY; FEATURE_COUNT];
        for t in &cohort {
            for obs in apply_preprocess(&stats, t).unwrap() {
                for (j, v) in obs.iter().enumerate() {
                    assert!((0.0..=1.0).contains(v));
                    min[j] = min[j].min(*v);
                    max[j] = max[j].max(*v);
                }
            }
        }
        for j in 0..FEATURE_COUNT {
            if !stats.features[j].constant {
                assert!(min[j].abs() < 1e-9, "feature {j} min {}", min[j]);
                assert!((max[j] - 1.0).abs() < 1e-9, "feature {j} max {}", max[j]);
            }
        }
    }

    #[test]
    fn out_of_range_values_clamp() {
        let j = crate::features::feature_index("HR").unwrap();
        let cohort = cohort_with_feature_values(j, &[60.0, 80.0, 100.0, 80.0]);
        let stats = fit_preprocess(&cohort).unwrap();
        assert_eq!(stats.scale(j, 150.0), 1.0);
        assert_eq!(stats.scale(j, 10.0), 0.0);
    }

    #[test]
    fn negative_log_feature_is_a_data_error() {
        let j = crate::features::feature_index("BUN").unwrap();
        let cohort = cohort_with_feature_values(j, &[10.0, -1.0, 12.0, 14.0]);
        let err = fit_preprocess(&cohort).unwrap_err().to_string();
        assert!(err.contains("BUN"), "message: {err}");
        assert!(err.contains("patient a") && err.contains("step 1"), "message: {err}");
    }

    #[test]
    fn feature_width_mismatch_is_a_schema_error() {
        let cohort = generate_cohort(&sepsis_default(), 4, 3).unwrap();
        let stats = fit_preprocess(&cohort).unwrap();
        let bad = traj("x", vec![vec![0.5; 44]], vec![(0.0, 0.0)]);
        assert!(matches!(apply_preprocess(&stats, &bad), Err(Error::Schema(_))));
    }

    #[test]
    fn quartile_edges_match_percentile_oracle() {
        // Nonzero IV doses exactly 1..=100; vaso doses the same scaled down.
        let doses: Vec<(f64, f64)> = (1..=100).map(|i| (i as f64, i as f64 / 1000.0)).collect();
        let cols = vec![vec![0.5; FEATURE_COUNT]; 100];
        let cohort = vec![
            traj("a", cols[..50].to_vec(), doses[..50].to_vec()),
            traj("b", cols[50..].to_vec(), doses[50..].to_vec()),
        ];
        let space = fit_action_space(&cohort).unwrap();
        let expect = [25.75, 50.5, 75.25, 100.0];
        for (got, want) in space.iv_edges.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "iv edges {:?}", space.iv_edges);
        }
        for (got, want) in space.vaso_edges.iter().zip(expect.map(|e| e / 1000.0)) {
            assert!((got - want).abs() < 1e-12, "vaso edges {:?}", space.vaso_edges);
        }
    }

    #[test]
    fn zero_and_max_doses_hit_the_grid_corners() {
        let space = ActionSpace { iv_edges: CANONICAL_IV_EDGES, vaso_edges: CANONICAL_VASO_EDGES };
        assert_eq!(space.discretize(0.0, 0.0).unwrap(), 0);
        assert_eq!(space.discretize(1500.0, 1.5).unwrap(), 24);
        // Doses beyond the top edge stay in the top bin.
        assert_eq!(space.discretize(99999.0, 99.0).unwrap(), 24);
        // Zero IV with a mid-range vasopressor stays in the first row.
        let a = space.discretize(0.0, 0.2).unwrap();
        assert!(a >= 1 && a <= 4, "action {a}");
    }

    #[test]
    fn edge_doses_assign_to_the_lower_bin() {
        let space = ActionSpace { iv_edges: CANONICAL_IV_EDGES, vaso_edges: CANONICAL_VASO_EDGES };
        assert_eq!(space.discretize(100.0, 0.0).unwrap(), 5); // iv bin 1
        assert_eq!(space.discretize(300.0, 0.0).unwrap(), 10); // iv bin 2
        assert_eq!(space.discretize(0.0, 0.1).unwrap(), 1); // vaso bin 1
    }

    #[test]
    fn discretize_is_monotone_in_each_dose() {
        let space = ActionSpace { iv_edges: CANONICAL_IV_EDGES, vaso_edges: CANONICAL_VASO_EDGES };
        let probes = [0.0, 1.0, 50.0, 100.0, 100.1, 250.0, 300.0, 650.0, 800.0, 1500.0, 2000.0];
        let mut prev = 0;
        for &iv in &probes {
            let bin = space.discretize(iv, 0.0).unwrap() / 5;
            assert!(bin >= prev, "iv bin dropped at {iv}");
            prev = bin;
        }
    }

    #[test]
    fn negative_dose_is_a_data_error() {
        let space = ActionSpace { iv_edges: CANONICAL_IV_EDGES, vaso_edges: CANONICAL_VASO_EDGES };
        assert!(matches!(space.discretize(-1.0, 0.0), Err(Error::Data(_))));
    }

    #[test]
    fn all_zero_drug_column_is_a_config_error() {
        let cols = vec![vec![0.5; FEATURE_COUNT]; 4];
        let cohort = vec![
            traj("a", cols[..2].to_vec(), vec![(10.0, 0.0), (20.0, 0.0)]),
            traj("b", cols[2..].to_vec(), vec![(30.0, 0.0), (40.0, 0.0)]),
        ];
        let err = fit_action_space(&cohort).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
        assert!(err.to_string().contains("vasopressor"));
    }

    #[test]
    fn simulated_doses_round_trip_through_canonical_edges() {
        // The simulator draws doses from per-bin ranges that avoid the
        // canonical edges, so discretization must recover the intended bin
        // for every single step.
        let cohort = generate_cohort(&sepsis_default(), 300, 21).unwrap();
        let space = ActionSpace { iv_edges: CANONICAL_IV_EDGES, vaso_edges: CANONICAL_VASO_EDGES };
        let mut checked = 0usize;
        for t in &cohort {
            let intended = t.intended_actions.as_ref().unwrap();
            for (step, &want) in t.steps.iter().zip(intended) {
                let got = space.discretize(step.iv_dose, step.vaso_dose).unwrap();
                assert_eq!(got, want);
                checked += 1;
            }
        }
        assert!(checked > 1000, "too few steps checked: {checked}");
    }

    #[test]
    fn split_respects_ratio_and_partitions_patients() {
        let cohort = generate_cohort(&sepsis_default(), 100, 5).unwrap();
        let (train, test) = split_cohort(&cohort, 0.75, 9).unwrap();
        assert_eq!(train.len(), 75);
        assert_eq!(test.len(), 25);
        let train_ids: BTreeSet<_> = train.iter().map(|t| &t.patient_id).collect();
        assert!(test.iter().all(|t| !train_ids.contains(&t.patient_id)));

        let (t2, s2) = split_cohort(&cohort, 0.75, 9).unwrap();
        assert_eq!(train, t2);
        assert_eq!(test, s2);
        let (t3, _) = split_cohort(&cohort, 0.75, 10).unwrap();
        assert_ne!(train, t3);
    }

    #[test]
    fn split_of_two_at_half_is_one_and_one() {
        let cohort = generate_cohort(&sepsis_default(), 2, 0).unwrap();
        let (train, test) = split_cohort(&cohort, 0.5, 1).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
    }

    #[test]
    fn cohort_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        let mut cohort = generate_cohort(&sepsis_default(), 10, 4).unwrap();
        write_cohort_csv(&path, &cohort).unwrap();
        let back = read_cohort_csv(&path).unwrap();
        assert_eq!(back.excluded_patients, 0);
        // Ground-truth sidecar fields do not travel through the CSV.
        for t in &mut cohort {
            t.latent_trace = None;
            t.intended_actions = None;
        }
        assert_eq!(back.cohort, cohort);
    }

    #[test]
    fn missing_values_exclude_the_patient() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        let cohort = generate_cohort(&sepsis_default(), 3, 8).unwrap();
        write_cohort_csv(&path, &cohort).unwrap();
        // Blank one feature cell in the second patient's first row.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let row = 1 + cohort[0].steps.len(); // header + patient 0
        let mut cells: Vec<&str> = lines[row].split(',').collect();
        cells[5] = "";
        lines[row] = cells.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();

        let back = read_cohort_csv(&path).unwrap();
        assert_eq!(back.excluded_patients, 1);
        assert_eq!(back.cohort.len(), 2);
        assert!(back.cohort.iter().all(|t| t.patient_id != cohort[1].patient_id));
    }

    #[test]
    fn malformed_numbers_are_hard_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        let cohort = generate_cohort(&sepsis_default(), 2, 8).unwrap();
        write_cohort_csv(&path, &cohort).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cells: Vec<&str> = lines[1].split(',').collect();
        cells[3] = "not-a-number";
        lines[1] = cells.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = read_cohort_csv(&path).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("not-a-number"), "message: {err}");
    }

    #[test]
    fn processed_cohort_has_valid_actions_and_observations() {
        let cohort = generate_cohort(&sepsis_default(), 40, 6).unwrap();
        let stats = fit_preprocess(&cohort).unwrap();
        let space = fit_action_space(&cohort).unwrap();
        let processed = process_cohort(&stats, &space, &cohort).unwrap();
        assert_eq!(processed.len(), cohort.len());
        for (p, r) in processed.iter().zip(&cohort) {
            assert_eq!(p.steps.len(), r.steps.len());
            assert_eq!(p.outcome, r.outcome);
            for s in &p.steps {
                assert!(s.action < 25);
                assert_eq!(s.obs.len(), FEATURE_COUNT);
                assert!(s.obs.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
