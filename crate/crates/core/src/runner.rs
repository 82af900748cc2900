//! Pipeline orchestration: each subcommand is a stage that reads upstream
//! artifacts from the output directory and writes its own, so any stage can
//! be re-run in isolation and `all` chains the full sequence.
//!
//! Artifact writes are atomic (temp sibling + rename) and deterministic
//! given the same inputs: floats serialize via their shortest round-trip
//! representation and nothing embeds timestamps. Wall-clock timings go to
//! `timings.json` only, keeping `report.json` and the tables byte-stable
//! across reruns. Missing inputs surface as dependency errors naming the
//! stage that produces them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{fnv1a, PipelineConfig, Scale};
use crate::encoder::{
    train_sequence_autoencoder, train_sparse_autoencoder, SequenceEncoder, SequenceEncoderConfig,
    SparseAutoencoder, SparseEncoderConfig,
};
use crate::error::{Error, Result};
use crate::experts::{
    dqn_policy, restrict_actions, train_ddqn, DqnConfig, IndexEntry, NeighborIndex, QNetwork,
    Transition,
};
use crate::features::{feature_names, FEATURE_COUNT};
use crate::gate::{
    extract_gating_features, mixture_policy, optimize_gate, FeatureStandardizer, GateConfig,
    GateDataset, GateModel, GateStep, GateTrajectory, GATING_FEATURE_COUNT,
};
use crate::pipeline::{
    fit_action_space, fit_preprocess, process_cohort, read_cohort_csv, split_cohort,
    write_cohort_csv, ActionSpace, PreprocessStats, ProcessedTrajectory,
};
use crate::report::{
    action_distribution, agreement_csv, agreement_matrix, grid_csv, policy_value_csv, svg_bars,
    svg_heatmap, ActionGridEntry, AgreementTable, BootstrapSummary, DiagnosticsRow,
    PolicyValueRow, Provenance, RewardModelSummary, RunReport,
};
use crate::reward::{reward_histogram, train_mortality_model, MortalityModel, RewardModelConfig};
use crate::sim::{self, Outcome};
use crate::wdr::{
    bootstrap_difference, control_variates, importance_weights, wdr_estimate, weight_diagnostics,
    EvalStep, EvalTrajectory, EvaluationDataset, VariateMode, Variates,
};

pub const ACTIONS: usize = 25;

/// One pipeline subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Preprocess,
    TrainEncoder,
    TrainReward,
    TrainDqn,
    FitKernel,
    FitMoe,
    Evaluate,
    Bootstrap,
    Report,
    All,
    Verify,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Preprocess => "preprocess",
            Stage::TrainEncoder => "train-encoder",
            Stage::TrainReward => "train-reward",
            Stage::TrainDqn => "train-dqn",
            Stage::FitKernel => "fit-kernel",
            Stage::FitMoe => "fit-moe",
            Stage::Evaluate => "evaluate",
            Stage::Bootstrap => "bootstrap",
            Stage::Report => "report",
            Stage::All => "all",
            Stage::Verify => "verify",
        }
    }
}

/// The full sequence `all` runs, in order.
const PIPELINE: [Stage; 10] = [
    Stage::Simulate,
    Stage::Preprocess,
    Stage::TrainEncoder,
    Stage::TrainReward,
    Stage::TrainDqn,
    Stage::FitKernel,
    Stage::FitMoe,
    Stage::Evaluate,
    Stage::Bootstrap,
    Stage::Report,
];

/// The two state encodings evaluated side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Recurrent,
    Sparse,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Recurrent, Arm::Sparse];
    pub fn name(self) -> &'static str {
        match self {
            Arm::Recurrent => "recurrent",
            Arm::Sparse => "sparse",
        }
    }
}

const POLICY_NAMES: [&str; 4] = ["physician", "kernel", "dqn", "moe"];

/// All artifact locations, derived from the output directory.
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Paths {
    pub fn new(config: &PipelineConfig) -> Paths {
        Paths { out_dir: config.out_dir.clone() }
    }
    fn file(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.file("config.toml")
    }
    pub fn cohort(&self) -> PathBuf {
        self.file("cohort.csv")
    }
    pub fn truth(&self) -> PathBuf {
        self.file("truth.json")
    }
    pub fn preprocess(&self) -> PathBuf {
        self.file("preprocess.json")
    }
    pub fn processed(&self, split: &str) -> PathBuf {
        self.file(&format!("{split}.csv"))
    }
    pub fn encoder(&self) -> PathBuf {
        self.file("encoder.ckpt")
    }
    pub fn sparse(&self) -> PathBuf {
        self.file("sparse.ckpt")
    }
    pub fn reward(&self) -> PathBuf {
        self.file("reward.ckpt")
    }
    pub fn mortality_logits(&self) -> PathBuf {
        self.file("mortality_logits.csv")
    }
    pub fn mortality_gradients(&self) -> PathBuf {
        self.file("mortality_gradients.csv")
    }
    pub fn dqn(&self, arm: Arm) -> PathBuf {
        self.file(&format!("dqn_{}.ckpt", arm.name()))
    }
    pub fn dqn_loss(&self, arm: Arm) -> PathBuf {
        self.file(&format!("dqn_loss_{}.csv", arm.name()))
    }
    pub fn policies(&self, arm: Arm) -> PathBuf {
        self.file(&format!("policies_{}.csv", arm.name()))
    }
    pub fn gate(&self, arm: Arm) -> PathBuf {
        self.file(&format!("gate_{}.json", arm.name()))
    }
    pub fn gate_trace(&self, arm: Arm) -> PathBuf {
        self.file(&format!("gate_trace_{}.csv", arm.name()))
    }
    pub fn evaluation(&self) -> PathBuf {
        self.file("evaluation.json")
    }
    pub fn bootstrap_csv(&self, arm: Arm) -> PathBuf {
        self.file(&format!("bootstrap_{}.csv", arm.name()))
    }
    pub fn bootstrap_summary(&self) -> PathBuf {
        self.file("bootstrap.json")
    }
    pub fn report(&self) -> PathBuf {
        self.file("report.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.file("timings.json")
    }
}

/// Run one stage (or the whole pipeline) against a validated config.
pub fn run(config: &PipelineConfig, stage: Stage) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;
    let paths = Paths::new(config);
    write_atomic(&paths.config_snapshot(), config.to_toml().as_bytes())?;
    match stage {
        Stage::All => {
            for s in PIPELINE {
                run_timed(config, &paths, s)?;
            }
            Ok(())
        }
        Stage::Verify => stage_verify(config, &paths),
        s => run_timed(config, &paths, s),
    }
}

fn run_timed(config: &PipelineConfig, paths: &Paths, stage: Stage) -> Result<()> {
    let started = Instant::now();
    match stage {
        Stage::Simulate => stage_simulate(config, paths)?,
        Stage::Preprocess => stage_preprocess(config, paths)?,
        Stage::TrainEncoder => stage_train_encoder(config, paths)?,
        Stage::TrainReward => stage_train_reward(config, paths)?,
        Stage::TrainDqn => stage_train_dqn(config, paths)?,
        Stage::FitKernel => stage_fit_kernel(config, paths)?,
        Stage::FitMoe => stage_fit_moe(config, paths)?,
        Stage::Evaluate => stage_evaluate(config, paths)?,
        Stage::Bootstrap => stage_bootstrap(config, paths)?,
        Stage::Report => stage_report(config, paths)?,
        Stage::All | Stage::Verify => unreachable!("dispatched in run()"),
    }
    let elapsed = started.elapsed().as_secs_f64();
    record_timing(paths, stage.name(), elapsed)?;
    eprintln!("{}: done in {elapsed:.1}s", stage.name());
    Ok(())
}

// ----------------------------------------------------------------------
// Shared plumbing
// ----------------------------------------------------------------------

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("{}: serialization failed: {e}", path.display())))?;
    write_atomic(path, json.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn require(path: &Path, producer: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "{} is missing; run `moerl {}` first",
            path.display(),
            producer.name()
        )))
    }
}

fn record_timing(paths: &Paths, stage: &str, seconds: f64) -> Result<()> {
    let path = paths.timings();
    let mut timings: BTreeMap<String, f64> = if path.exists() {
        read_json(&path)?
    } else {
        BTreeMap::new()
    };
    timings.insert(stage.to_string(), seconds);
    write_json(&path, &timings)
}

/// Stage-specific RNG seed derived from the run seed.
fn stage_seed(base: u64, tag: &str) -> u64 {
    base ^ fnv1a(tag.as_bytes())
}

fn scale_name(scale: Scale) -> &'static str {
    match scale {
        Scale::Desk => "desk",
        Scale::Paper => "paper",
    }
}

// ----------------------------------------------------------------------
// Processed-cohort CSV (patient_id, t, p_00..p_44, action, outcome)
// ----------------------------------------------------------------------

fn write_processed_csv(path: &Path, cohort: &[ProcessedTrajectory]) -> Result<()> {
    let mut out = String::from("patient_id,t");
    for j in 0..FEATURE_COUNT {
        out.push_str(&format!(",p_{j:02}"));
    }
    out.push_str(",action,outcome\n");
    for traj in cohort {
        for (t, step) in traj.steps.iter().enumerate() {
            out.push_str(&traj.patient_id);
            out.push(',');
            out.push_str(&t.to_string());
            for v in &step.obs {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push(',');
            out.push_str(&step.action.to_string());
            out.push(',');
            out.push_str(if traj.outcome == Outcome::NonSurvivor { "1" } else { "0" });
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

fn read_processed_csv(path: &Path) -> Result<Vec<ProcessedTrajectory>> {
    let bad = |row: usize, why: String| {
        Error::Data(format!("{}: row {row}: {why}", path.display()))
    };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("patient_id,t,p_00") {
        return Err(Error::Schema(format!(
            "{}: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut cohort: Vec<ProcessedTrajectory> = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != FEATURE_COUNT + 4 {
            return Err(bad(row, format!("{} fields, expected {}", fields.len(), FEATURE_COUNT + 4)));
        }
        let patient_id = fields[0].to_string();
        let t: usize = fields[1].parse().map_err(|_| bad(row, "bad step index".into()))?;
        let mut obs = Vec::with_capacity(FEATURE_COUNT);
        for f in &fields[2..2 + FEATURE_COUNT] {
            obs.push(
                f.parse::<f64>().map_err(|_| bad(row, format!("bad feature value '{f}'")))?,
            );
        }
        let action: u8 =
            fields[2 + FEATURE_COUNT].parse().map_err(|_| bad(row, "bad action".into()))?;
        if action as usize >= ACTIONS {
            return Err(bad(row, format!("action {action} out of range")));
        }
        let outcome = match fields[3 + FEATURE_COUNT] {
            "0" => Outcome::Survivor,
            "1" => Outcome::NonSurvivor,
            other => return Err(bad(row, format!("bad outcome '{other}'"))),
        };
        let step = crate::pipeline::ProcessedStep { obs, action };
        match cohort.last_mut() {
            Some(last) if last.patient_id == patient_id => {
                if t != last.steps.len() || last.outcome != outcome {
                    return Err(bad(row, "steps out of order or outcome flips".into()));
                }
                last.steps.push(step);
            }
            _ => {
                if t != 0 {
                    return Err(bad(row, "patient does not start at t = 0".into()));
                }
                if cohort.iter().any(|c| c.patient_id == patient_id) {
                    return Err(bad(row, format!("patient {patient_id} appears twice")));
                }
                cohort.push(ProcessedTrajectory { patient_id, steps: vec![step], outcome });
            }
        }
    }
    if cohort.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Ok(cohort)
}

// ----------------------------------------------------------------------
// Per-step expert policies CSV (split, patient_id, t, max_dist, k_*, b_*)
// ----------------------------------------------------------------------

/// Kernel and behavior distributions for one logged step, plus the distance
/// to the k-th training neighbor (a gating feature).
#[derive(Debug, Clone)]
pub struct StepPolicies {
    pub kernel: Vec<f64>,
    pub behavior: Vec<f64>,
    pub max_distance: f64,
}

type SplitPolicies = Vec<Vec<StepPolicies>>;

fn write_policies_csv(path: &Path, train: &SplitPolicies, test: &SplitPolicies, train_ids: &[&str], test_ids: &[&str]) -> Result<()> {
    let mut out = String::from("split,patient_id,t,max_dist");
    for a in 0..ACTIONS {
        out.push_str(&format!(",k_{a:02}"));
    }
    for a in 0..ACTIONS {
        out.push_str(&format!(",b_{a:02}"));
    }
    out.push('\n');
    for (split, policies, ids) in
        [("train", train, train_ids), ("test", test, test_ids)]
    {
        for (traj, id) in policies.iter().zip(ids) {
            for (t, step) in traj.iter().enumerate() {
                out.push_str(split);
                out.push(',');
                out.push_str(id);
                out.push(',');
                out.push_str(&t.to_string());
                out.push(',');
                out.push_str(&step.max_distance.to_string());
                for v in step.kernel.iter().chain(&step.behavior) {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
    }
    write_atomic(path, out.as_bytes())
}

fn read_policies_csv(path: &Path) -> Result<(SplitPolicies, SplitPolicies)> {
    let bad = |row: usize, why: String| {
        Error::Data(format!("{}: row {row}: {why}", path.display()))
    };
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("split,patient_id,t,max_dist") {
        return Err(Error::Schema(format!(
            "{}: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut train: SplitPolicies = Vec::new();
    let mut test: SplitPolicies = Vec::new();
    let mut last_key: Option<(String, String)> = None;
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + 2 * ACTIONS {
            return Err(bad(row, format!("{} fields, expected {}", fields.len(), 4 + 2 * ACTIONS)));
        }
        let split = fields[0].to_string();
        let patient_id = fields[1].to_string();
        let t: usize = fields[2].parse().map_err(|_| bad(row, "bad step index".into()))?;
        let parse = |f: &str| {
            f.parse::<f64>().map_err(|_| bad(row, format!("bad probability '{f}'")))
        };
        let max_distance = parse(fields[3])?;
        let mut kernel = Vec::with_capacity(ACTIONS);
        let mut behavior = Vec::with_capacity(ACTIONS);
        for f in &fields[4..4 + ACTIONS] {
            kernel.push(parse(f)?);
        }
        for f in &fields[4 + ACTIONS..] {
            behavior.push(parse(f)?);
        }
        let target = match split.as_str() {
            "train" => &mut train,
            "test" => &mut test,
            other => return Err(bad(row, format!("bad split '{other}'"))),
        };
        let key = (split, patient_id);
        let entry = StepPolicies { kernel, behavior, max_distance };
        if last_key.as_ref() == Some(&key) {
            let traj = target.last_mut().unwrap();
            if t != traj.len() {
                return Err(bad(row, "steps out of order".into()));
            }
            traj.push(entry);
        } else {
            if t != 0 {
                return Err(bad(row, "patient does not start at t = 0".into()));
            }
            target.push(vec![entry]);
            last_key = Some(key);
        }
    }
    Ok((train, test))
}

fn check_alignment(
    policies: &SplitPolicies,
    cohort: &[ProcessedTrajectory],
    what: &str,
) -> Result<()> {
    if policies.len() != cohort.len()
        || policies.iter().zip(cohort).any(|(p, c)| p.len() != c.steps.len())
    {
        return Err(Error::Schema(format!(
            "{what} policies are out of sync with the processed cohort; re-run `moerl fit-kernel`"
        )));
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Encoding and rewards shared by training and evaluation stages
// ----------------------------------------------------------------------

struct Encoders {
    lstm: SequenceEncoder,
    sparse: SparseAutoencoder,
}

fn load_encoders(paths: &Paths) -> Result<Encoders> {
    require(&paths.encoder(), Stage::TrainEncoder)?;
    require(&paths.sparse(), Stage::TrainEncoder)?;
    Ok(Encoders {
        lstm: SequenceEncoder::load(&paths.encoder())?,
        sparse: SparseAutoencoder::load(&paths.sparse())?,
    })
}

/// Per-step encoded states for every trajectory: the recurrent arm encodes
/// each history prefix, the sparse arm each observation alone.
fn encode_cohort(
    encoders: &Encoders,
    arm: Arm,
    cohort: &[ProcessedTrajectory],
) -> Vec<Vec<Vec<f64>>> {
    cohort
        .iter()
        .map(|traj| {
            let seq: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.obs.clone()).collect();
            match arm {
                Arm::Recurrent => encoders.lstm.encode_prefixes(&seq),
                Arm::Sparse => seq.iter().map(|o| encoders.sparse.encode(o)).collect(),
            }
        })
        .collect()
}

/// Per-step rewards: log-odds drop between consecutive observations, zero
/// for the final (terminal) step.
fn transition_rewards(model: &MortalityModel, traj: &ProcessedTrajectory) -> Vec<f64> {
    let n = traj.steps.len();
    (0..n)
        .map(|t| {
            if t + 1 < n {
                model.reward(&traj.steps[t].obs, &traj.steps[t + 1].obs)
            } else {
                0.0
            }
        })
        .collect()
}

// ----------------------------------------------------------------------
// Stages
// ----------------------------------------------------------------------

fn stage_simulate(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    if let Some(source) = &config.cohort_csv {
        let ingested = read_cohort_csv(source)?;
        if ingested.excluded_patients > 0 {
            eprintln!(
                "simulate: excluded {} patients with missing values",
                ingested.excluded_patients
            );
        }
        let tmp = paths.cohort().with_extension("csv.tmp");
        write_cohort_csv(&tmp, &ingested.cohort)?;
        std::fs::rename(&tmp, paths.cohort())?;
        // A user cohort has no ground truth; drop any stale sidecar.
        let _ = std::fs::remove_file(paths.truth());
        return Ok(());
    }
    let mdp = sim::sepsis_default();
    let seed = stage_seed(config.seed, "simulate");
    let cohort = sim::generate_cohort(&mdp, config.patients, seed)?;
    let truth = sim::CohortTruth {
        seed,
        canonical_iv_edges: sim::CANONICAL_IV_EDGES,
        canonical_vaso_edges: sim::CANONICAL_VASO_EDGES,
        behavior_value: sim::exact_policy_value(&mdp, &mdp.behavior, config.discount)?,
        death_probability: sim::death_probability(&mdp, &mdp.behavior)?,
        latent_traces: cohort
            .iter()
            .map(|t| t.latent_trace.clone().unwrap_or_default())
            .collect(),
        intended_actions: cohort
            .iter()
            .map(|t| t.intended_actions.clone().unwrap_or_default())
            .collect(),
    };
    let tmp = paths.cohort().with_extension("csv.tmp");
    write_cohort_csv(&tmp, &cohort)?;
    std::fs::rename(&tmp, paths.cohort())?;
    write_json(&paths.truth(), &truth)
}

/// Fitted preprocessing plus the split, serialized for later stages.
#[derive(Debug, Serialize, Deserialize)]
struct PreprocessArtifact {
    stats: PreprocessStats,
    action_space: ActionSpace,
    excluded_patients: usize,
    train_patients: Vec<String>,
    test_patients: Vec<String>,
}

fn stage_preprocess(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    require(&paths.cohort(), Stage::Simulate)?;
    let ingested = read_cohort_csv(&paths.cohort())?;
    let (train_raw, test_raw) =
        split_cohort(&ingested.cohort, config.split_ratio, stage_seed(config.seed, "split"))?;
    let stats = fit_preprocess(&train_raw)?;
    for w in &stats.warnings {
        eprintln!("preprocess: {w}");
    }
    let space = fit_action_space(&train_raw)?;
    let train = process_cohort(&stats, &space, &train_raw)?;
    let test = process_cohort(&stats, &space, &test_raw)?;
    let artifact = PreprocessArtifact {
        stats,
        action_space: space,
        excluded_patients: ingested.excluded_patients,
        train_patients: train.iter().map(|t| t.patient_id.clone()).collect(),
        test_patients: test.iter().map(|t| t.patient_id.clone()).collect(),
    };
    write_json(&paths.preprocess(), &artifact)?;
    write_processed_csv(&paths.processed("train"), &train)?;
    write_processed_csv(&paths.processed("test"), &test)
}

fn load_split(paths: &Paths, split: &str) -> Result<Vec<ProcessedTrajectory>> {
    require(&paths.processed(split), Stage::Preprocess)?;
    read_processed_csv(&paths.processed(split))
}

fn stage_train_encoder(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    let train = load_split(paths, "train")?;
    let sequences: Vec<Vec<Vec<f64>>> = train
        .iter()
        .map(|t| t.steps.iter().map(|s| s.obs.clone()).collect())
        .collect();
    let seed = stage_seed(config.seed, "encoder");
    let model = train_sequence_autoencoder(
        &sequences,
        &SequenceEncoderConfig {
            hidden_dim: config.encoder.hidden_dim,
            epochs: config.encoder.epochs,
            batch_size: config.encoder.batch_size,
            learning_rate: config.encoder.learning_rate,
            seed,
        },
    )?;
    model.save(&paths.encoder(), seed)?;

    let observations: Vec<Vec<f64>> =
        train.iter().flat_map(|t| t.steps.iter().map(|s| s.obs.clone())).collect();
    let sparse_seed = stage_seed(config.seed, "sparse");
    let sparse = train_sparse_autoencoder(
        &observations,
        &SparseEncoderConfig {
            hidden_dim: config.sparse.hidden_dim,
            epochs: config.sparse.epochs,
            batch_size: config.sparse.batch_size,
            learning_rate: config.sparse.learning_rate,
            sparsity_target: config.sparse.sparsity_target,
            sparsity_weight: config.sparse.sparsity_weight,
            seed: sparse_seed,
        },
    )?;
    sparse.save(&paths.sparse(), sparse_seed)
}

fn stage_train_reward(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    let train = load_split(paths, "train")?;
    let test = load_split(paths, "test")?;
    let mut observations = Vec::new();
    let mut died = Vec::new();
    for traj in &train {
        for step in &traj.steps {
            observations.push(step.obs.clone());
            died.push(traj.outcome == Outcome::NonSurvivor);
        }
    }
    let seed = stage_seed(config.seed, "reward");
    let model = train_mortality_model(
        &observations,
        &died,
        &RewardModelConfig {
            hidden: (64, 32),
            epochs: config.reward.epochs,
            batch_size: config.reward.batch_size,
            learning_rate: config.reward.learning_rate,
            l1_weight: config.reward.l1_weight,
            seed,
        },
    )?;
    model.save(&paths.reward(), seed)?;

    // Per-observation test logits by class, for the log-odds histograms.
    let mut logits_csv = String::from("patient_id,t,logit,died\n");
    for traj in &test {
        for (t, step) in traj.steps.iter().enumerate() {
            logits_csv.push_str(&format!(
                "{},{t},{},{}\n",
                traj.patient_id,
                model.logit(&step.obs),
                if traj.outcome == Outcome::NonSurvivor { 1 } else { 0 }
            ));
        }
    }
    write_atomic(&paths.mortality_logits(), logits_csv.as_bytes())?;

    // Per-feature |correlation(value, d logit / d feature)| over test steps.
    let test_obs: Vec<&Vec<f64>> =
        test.iter().flat_map(|t| t.steps.iter().map(|s| &s.obs)).collect();
    let mut gradients_csv = String::from("feature_index,feature,abs_correlation,mean_abs_gradient\n");
    let mut values = vec![Vec::with_capacity(test_obs.len()); FEATURE_COUNT];
    let mut grads = vec![Vec::with_capacity(test_obs.len()); FEATURE_COUNT];
    for obs in &test_obs {
        let g = model.network.input_gradient(obs);
        for j in 0..FEATURE_COUNT {
            values[j].push(obs[j]);
            grads[j].push(g[j]);
        }
    }
    for (j, name) in feature_names().iter().enumerate() {
        let corr = correlation(&values[j], &grads[j]).abs();
        let mean_abs = grads[j].iter().map(|g| g.abs()).sum::<f64>() / grads[j].len() as f64;
        gradients_csv.push_str(&format!("{j},{name},{corr},{mean_abs}\n"));
    }
    write_atomic(&paths.mortality_gradients(), gradients_csv.as_bytes())
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx < 1e-18 || vy < 1e-18 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn stage_train_dqn(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    let train = load_split(paths, "train")?;
    require(&paths.reward(), Stage::TrainReward)?;
    let reward_model = MortalityModel::load(&paths.reward())?;
    let encoders = load_encoders(paths)?;
    for arm in Arm::ALL {
        let states = encode_cohort(&encoders, arm, &train);
        let dim = states[0][0].len();
        let mut transitions = Vec::new();
        for (traj, traj_states) in train.iter().zip(&states) {
            let rewards = transition_rewards(&reward_model, traj);
            let n = traj.steps.len();
            for t in 0..n {
                transitions.push(Transition {
                    state: traj_states[t].clone(),
                    action: traj.steps[t].action as usize,
                    reward: rewards[t],
                    next_state: if t + 1 < n {
                        traj_states[t + 1].clone()
                    } else {
                        vec![0.0; dim]
                    },
                    terminal: t + 1 == n,
                });
            }
        }
        let trained = train_ddqn(
            transitions,
            &DqnConfig {
                steps: config.dqn.steps,
                batch_size: config.dqn.batch_size,
                learning_rate: config.dqn.learning_rate,
                gamma: config.discount,
                lambda: config.dqn.lambda,
                r_max: config.dqn.r_max,
                target_sync: config.dqn.target_sync,
                per_alpha: config.dqn.per_alpha,
                per_beta_start: config.dqn.per_beta_start,
                priority_floor: config.dqn.priority_floor,
                seed: stage_seed(config.seed, &format!("dqn-{}", arm.name())),
                action_count: Some(ACTIONS),
            },
        )?;
        trained.network.save(&paths.dqn(arm), config.seed)?;
        let mut loss_csv = String::from("window,mean_loss\n");
        for (w, loss) in trained.loss_log.iter().enumerate() {
            loss_csv.push_str(&format!("{w},{loss}\n"));
        }
        write_atomic(&paths.dqn_loss(arm), loss_csv.as_bytes())?;
    }
    Ok(())
}

fn stage_fit_kernel(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    let train = load_split(paths, "train")?;
    let test = load_split(paths, "test")?;
    let encoders = load_encoders(paths)?;
    for arm in Arm::ALL {
        let train_states = encode_cohort(&encoders, arm, &train);
        let test_states = encode_cohort(&encoders, arm, &test);
        let mut entries = Vec::new();
        for (traj, states) in train.iter().zip(&train_states) {
            for (t, state) in states.iter().enumerate() {
                entries.push(IndexEntry {
                    state: state.clone(),
                    patient_id: traj.patient_id.clone(),
                    t,
                    action: traj.steps[t].action as usize,
                    died: traj.outcome == Outcome::NonSurvivor,
                });
            }
        }
        let index = NeighborIndex::build(entries, ACTIONS)?;
        if config.k_neighbors > index.len() {
            return Err(Error::Config(format!(
                "k_neighbors: {} exceeds the {} indexed training states",
                config.k_neighbors,
                index.len()
            )));
        }
        let query_split = |states: &[Vec<Vec<f64>>]| -> Result<SplitPolicies> {
            states
                .iter()
                .map(|traj| {
                    traj.iter()
                        .map(|state| {
                            let (kernel, behavior, max_distance) =
                                index.policies(state, config.k_neighbors)?;
                            Ok(StepPolicies { kernel, behavior, max_distance })
                        })
                        .collect()
                })
                .collect()
        };
        let train_policies = query_split(&train_states)?;
        let test_policies = query_split(&test_states)?;
        let train_ids: Vec<&str> = train.iter().map(|t| t.patient_id.as_str()).collect();
        let test_ids: Vec<&str> = test.iter().map(|t| t.patient_id.as_str()).collect();
        write_policies_csv(
            &paths.policies(arm),
            &train_policies,
            &test_policies,
            &train_ids,
            &test_ids,
        )?;
    }
    Ok(())
}

fn stage_fit_moe(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    let train = load_split(paths, "train")?;
    require(&paths.reward(), Stage::TrainReward)?;
    let reward_model = MortalityModel::load(&paths.reward())?;
    let encoders = load_encoders(paths)?;
    for arm in Arm::ALL {
        require(&paths.policies(arm), Stage::FitKernel)?;
        require(&paths.dqn(arm), Stage::TrainDqn)?;
        let (train_policies, _) = read_policies_csv(&paths.policies(arm))?;
        check_alignment(&train_policies, &train, "train")?;
        let qnet = QNetwork::load(&paths.dqn(arm))?;
        let states = encode_cohort(&encoders, arm, &train);

        // Raw gating features first: the standardizer is fitted on them.
        let mut raw_rows: Vec<[f64; GATING_FEATURE_COUNT]> = Vec::new();
        for (traj, traj_policies) in train.iter().zip(&train_policies) {
            for (t, step) in traj.steps.iter().enumerate() {
                raw_rows.push(extract_gating_features(
                    &step.obs,
                    t + 1,
                    traj_policies[t].max_distance,
                ));
            }
        }
        let standardizer = FeatureStandardizer::fit(&raw_rows)?;

        let mut trajectories = Vec::with_capacity(train.len());
        let mut row = 0;
        for ((traj, traj_policies), traj_states) in
            train.iter().zip(&train_policies).zip(&states)
        {
            let actions: Vec<usize> = traj.steps.iter().map(|s| s.action as usize).collect();
            let (q_hat, v_hat) =
                control_variates(&qnet, VariateMode::DqnValue, traj_states, &actions);
            let rewards = transition_rewards(&reward_model, traj);
            let mut steps = Vec::with_capacity(traj.steps.len());
            for (t, policies) in traj_policies.iter().enumerate() {
                let dqn_full = restrict_actions(
                    &dqn_policy(&qnet, &traj_states[t], config.dqn.temperature),
                    &policies.behavior,
                    config.eval.restriction_threshold,
                );
                let a = actions[t];
                steps.push(GateStep {
                    features: standardizer.apply(&raw_rows[row]),
                    pi_kernel: policies.kernel[a],
                    pi_dqn: dqn_full[a],
                    pi_behavior: policies.behavior[a],
                    reward: rewards[t],
                    q_hat: q_hat[t],
                    v_hat: v_hat[t],
                });
                row += 1;
            }
            trajectories.push(GateTrajectory { steps });
        }
        let dataset = GateDataset { trajectories, discount: config.discount };
        let seed = stage_seed(config.seed, &format!("gate-{}", arm.name()));
        let fit = optimize_gate(
            &dataset,
            &GateConfig {
                minibatch: config.gate.minibatch,
                restarts: config.gate.restarts,
                learning_rate: config.gate.learning_rate,
                epochs: config.gate.epochs,
                seed,
            },
        )?;
        for line in &fit.log {
            eprintln!("fit-moe ({}): {line}", arm.name());
        }
        eprintln!(
            "fit-moe ({}): objective {:.4} (pure kernel {:.4}, pure DQN {:.4})",
            arm.name(),
            fit.objective,
            fit.corner_kernel_objective,
            fit.corner_dqn_objective
        );
        GateModel::new(&fit, standardizer, seed).save(&paths.gate(arm))?;
        let mut trace_csv = String::from("restart,objective\n");
        for (restart, objective) in &fit.trace {
            trace_csv.push_str(&format!("{restart},{objective}\n"));
        }
        write_atomic(&paths.gate_trace(arm), trace_csv.as_bytes())?;
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------

/// Everything `evaluate` derives for one encoding arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodingEvaluation {
    pub encoding: String,
    pub policy_values: Vec<PolicyValueRow>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub agreement: AgreementTable,
    pub grids: Vec<ActionGridEntry>,
}

/// The `evaluation.json` artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub test_mean_return: f64,
    pub reward_model: RewardModelSummary,
    pub encodings: Vec<EncodingEvaluation>,
}

/// Per-policy evaluation inputs on the test split of one arm.
struct ArmEvaluation {
    /// Full per-step action distributions, one inner Vec per policy in
    /// `POLICY_NAMES` order, flattened over steps.
    full_policies: Vec<Vec<Vec<f64>>>,
    /// WDR datasets in `POLICY_NAMES` order.
    datasets: Vec<EvaluationDataset>,
    variates_dqn: Variates,
    variates_behavior: Variates,
}

fn build_arm_evaluation(
    config: &PipelineConfig,
    paths: &Paths,
    arm: Arm,
    test: &[ProcessedTrajectory],
    encoders: &Encoders,
    reward_model: &MortalityModel,
) -> Result<ArmEvaluation> {
    require(&paths.policies(arm), Stage::FitKernel)?;
    require(&paths.dqn(arm), Stage::TrainDqn)?;
    require(&paths.gate(arm), Stage::FitMoe)?;
    let (_, test_policies) = read_policies_csv(&paths.policies(arm))?;
    check_alignment(&test_policies, test, "test")?;
    let qnet = QNetwork::load(&paths.dqn(arm))?;
    let gate = GateModel::load(&paths.gate(arm))?;
    let gate_params = gate.params();
    let states = encode_cohort(encoders, arm, test);

    let mut full_policies: Vec<Vec<Vec<f64>>> = vec![Vec::new(); POLICY_NAMES.len()];
    let mut step_sets: Vec<Vec<Vec<EvalStep>>> =
        vec![Vec::with_capacity(test.len()); POLICY_NAMES.len()];
    let mut q_rows = Vec::with_capacity(test.len());
    let mut v_rows_dqn = Vec::with_capacity(test.len());
    let mut v_rows_behavior = Vec::with_capacity(test.len());

    for ((traj, traj_policies), traj_states) in test.iter().zip(&test_policies).zip(&states) {
        let actions: Vec<usize> = traj.steps.iter().map(|s| s.action as usize).collect();
        let rewards = transition_rewards(reward_model, traj);
        let (q_hat, v_dqn) =
            control_variates(&qnet, VariateMode::DqnValue, traj_states, &actions);
        let (_, v_behavior) =
            control_variates(&qnet, VariateMode::BehaviorValue, traj_states, &actions);
        q_rows.push(q_hat);
        v_rows_dqn.push(v_dqn);
        v_rows_behavior.push(v_behavior);

        let mut per_policy_steps: Vec<Vec<EvalStep>> =
            vec![Vec::with_capacity(traj.steps.len()); POLICY_NAMES.len()];
        for (t, policies) in traj_policies.iter().enumerate() {
            let dqn_full = restrict_actions(
                &dqn_policy(&qnet, &traj_states[t], config.dqn.temperature),
                &policies.behavior,
                config.eval.restriction_threshold,
            );
            let raw = extract_gating_features(
                &traj.steps[t].obs,
                t + 1,
                policies.max_distance,
            );
            let (p_k, _) = gate_params.probability(&gate.feature_stats.apply(&raw));
            let moe_full = mixture_policy(p_k, &policies.kernel, &dqn_full);
            let a = actions[t];
            let pi_b = policies.behavior[a];
            let pi_by_policy =
                [pi_b, policies.kernel[a], dqn_full[a], moe_full[a]];
            for (p, &pi_e) in pi_by_policy.iter().enumerate() {
                per_policy_steps[p].push(EvalStep { reward: rewards[t], pi_e, pi_b });
            }
            full_policies[0].push(policies.behavior.clone());
            full_policies[1].push(policies.kernel.clone());
            full_policies[2].push(dqn_full);
            full_policies[3].push(moe_full);
        }
        for (p, steps) in per_policy_steps.into_iter().enumerate() {
            step_sets[p].push(steps);
        }
    }

    let datasets = step_sets
        .into_iter()
        .map(|trajs| EvaluationDataset {
            trajectories: trajs.into_iter().map(|steps| EvalTrajectory { steps }).collect(),
            discount: config.discount,
        })
        .collect();
    Ok(ArmEvaluation {
        full_policies,
        datasets,
        variates_dqn: Variates { q: q_rows.clone(), v: v_rows_dqn },
        variates_behavior: Variates { q: q_rows, v: v_rows_behavior },
    })
}

fn compute_evaluation(config: &PipelineConfig, paths: &Paths) -> Result<EvaluationArtifact> {
    let test = load_split(paths, "test")?;
    require(&paths.reward(), Stage::TrainReward)?;
    let reward_model = MortalityModel::load(&paths.reward())?;
    let encoders = load_encoders(paths)?;

    let mut encodings = Vec::new();
    let mut test_mean_return = 0.0;
    for arm in Arm::ALL {
        let built =
            build_arm_evaluation(config, paths, arm, &test, &encoders, &reward_model)?;
        let lengths: Vec<usize> = test.iter().map(|t| t.steps.len()).collect();
        let mut policy_values = Vec::new();
        let mut diagnostics = Vec::new();
        for (p, name) in POLICY_NAMES.iter().enumerate() {
            let ds = &built.datasets[p];
            let wdr_dqn_value = wdr_estimate(ds, Some(&built.variates_dqn))?;
            let wdr_behavior_value = wdr_estimate(ds, Some(&built.variates_behavior))?;
            policy_values.push(PolicyValueRow {
                encoding: arm.name().to_string(),
                policy: name.to_string(),
                wdr_dqn_value,
                wdr_behavior_value,
            });
            let weights = importance_weights(ds)?;
            let diag = weight_diagnostics(&weights, &lengths);
            diagnostics.push(DiagnosticsRow {
                encoding: arm.name().to_string(),
                policy: name.to_string(),
                fraction_nonzero: diag.fraction_nonzero,
                fraction_nonzero_final: diag.fraction_nonzero_final,
                zero_count: diag.zero_count,
                total_cells: diag.total_cells,
                decade_histogram: diag.decade_histogram,
            });
        }
        test_mean_return = built.datasets[0].mean_discounted_return();

        let refs: Vec<&[Vec<f64>]> =
            built.full_policies.iter().map(|p| p.as_slice()).collect();
        let agreement = AgreementTable {
            encoding: arm.name().to_string(),
            policies: POLICY_NAMES.iter().map(|s| s.to_string()).collect(),
            matrix: agreement_matrix(&refs)?,
        };
        let grids = POLICY_NAMES
            .iter()
            .zip(&built.full_policies)
            .map(|(name, policies)| {
                Ok(ActionGridEntry {
                    encoding: arm.name().to_string(),
                    policy: name.to_string(),
                    grid: action_distribution(policies)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        encodings.push(EncodingEvaluation {
            encoding: arm.name().to_string(),
            policy_values,
            diagnostics,
            agreement,
            grids,
        });
    }

    // Reward-model summary over test transitions.
    let mut rewards = Vec::new();
    for traj in &test {
        for t in 0..traj.steps.len().saturating_sub(1) {
            rewards.push(reward_model.reward(&traj.steps[t].obs, &traj.steps[t + 1].obs));
        }
    }
    let mut observations = Vec::new();
    let mut died = Vec::new();
    for traj in &test {
        for step in &traj.steps {
            observations.push(step.obs.clone());
            died.push(traj.outcome == Outcome::NonSurvivor);
        }
    }
    let in_band = |lo: f64, hi: f64| {
        rewards.iter().filter(|r| **r >= lo && **r <= hi).count() as f64
            / rewards.len().max(1) as f64
    };
    let reward_model_summary = RewardModelSummary {
        test_accuracy: reward_model.accuracy(&observations, &died),
        reward_min: rewards.iter().cloned().fold(f64::INFINITY, f64::min),
        reward_max: rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        fraction_in_unit_band: in_band(-1.0, 1.0),
        fraction_in_reported_band: in_band(-3.0, 3.0),
    };
    Ok(EvaluationArtifact {
        test_mean_return,
        reward_model: reward_model_summary,
        encodings,
    })
}

fn stage_evaluate(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    let artifact = compute_evaluation(config, paths)?;
    write_json(&paths.evaluation(), &artifact)
}

fn stage_bootstrap(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    let test = load_split(paths, "test")?;
    require(&paths.reward(), Stage::TrainReward)?;
    let reward_model = MortalityModel::load(&paths.reward())?;
    let encoders = load_encoders(paths)?;
    let mut summaries = Vec::new();
    for arm in Arm::ALL {
        let built =
            build_arm_evaluation(config, paths, arm, &test, &encoders, &reward_model)?;
        let moe = &built.datasets[3];
        let physician = &built.datasets[0];
        let result = bootstrap_difference(
            moe,
            &built.variates_dqn,
            physician,
            &built.variates_dqn,
            config.eval.bootstrap_resamples,
            stage_seed(config.seed, &format!("bootstrap-{}", arm.name())),
        )?;
        let mut csv = String::from("difference\n");
        for d in &result.differences {
            csv.push_str(&format!("{d}\n"));
        }
        write_atomic(&paths.bootstrap_csv(arm), csv.as_bytes())?;
        let negative = result.differences.iter().filter(|d| **d < 0.0).count();
        let successful = result.differences.len();
        summaries.push(BootstrapSummary {
            encoding: arm.name().to_string(),
            comparison: "moe_minus_physician".to_string(),
            resamples: config.eval.bootstrap_resamples,
            skipped: result.skipped,
            mean: result.mean,
            percentile_2_5: result.percentile_2_5,
            percentile_97_5: result.percentile_97_5,
            original: result.original,
            min: result.differences.iter().cloned().fold(f64::INFINITY, f64::min),
            max: result.differences.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            negative_fraction: negative as f64 / successful.max(1) as f64,
            note: format!(
                "difference negative in {negative} of {successful} successful resamples"
            ),
        });
    }
    write_json(&paths.bootstrap_summary(), &summaries)
}

fn stage_report(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    require(&paths.evaluation(), Stage::Evaluate)?;
    require(&paths.bootstrap_summary(), Stage::Bootstrap)?;
    require(&paths.mortality_logits(), Stage::TrainReward)?;
    let evaluation: EvaluationArtifact = read_json(&paths.evaluation())?;
    let bootstrap: Vec<BootstrapSummary> = read_json(&paths.bootstrap_summary())?;

    let mut policy_values = Vec::new();
    let mut agreement = Vec::new();
    let mut action_grids = Vec::new();
    let mut diagnostics = Vec::new();
    for enc in &evaluation.encodings {
        policy_values.extend(enc.policy_values.iter().cloned());
        agreement.push(enc.agreement.clone());
        action_grids.extend(enc.grids.iter().cloned());
        diagnostics.extend(enc.diagnostics.iter().cloned());
    }
    let report = RunReport {
        provenance: Provenance {
            config_hash: config.content_hash(),
            seed: config.seed,
            scale: scale_name(config.scale).to_string(),
            patients: config.patients,
            timings_file: "timings.json".to_string(),
        },
        test_mean_return: evaluation.test_mean_return,
        policy_values,
        agreement,
        action_grids,
        diagnostics,
        bootstrap: bootstrap.clone(),
        reward_model: evaluation.reward_model.clone(),
    };
    write_json(&paths.report(), &report)?;

    // Tables.
    write_atomic(
        &paths.out_dir.join("table_policy_values.csv"),
        policy_value_csv(&report.policy_values).as_bytes(),
    )?;
    for table in &report.agreement {
        write_atomic(
            &paths.out_dir.join(format!("table_agreement_{}.csv", table.encoding)),
            agreement_csv(table).as_bytes(),
        )?;
    }

    // Action-distribution grids, CSV and SVG per (policy, encoding).
    for entry in &report.action_grids {
        let base = format!("grid_{}_{}", entry.policy, entry.encoding);
        write_atomic(
            &paths.out_dir.join(format!("{base}.csv")),
            grid_csv(&entry.grid).as_bytes(),
        )?;
        let title = format!("{} policy ({})", entry.policy, entry.encoding);
        write_atomic(
            &paths.out_dir.join(format!("{base}.svg")),
            svg_heatmap(&entry.grid, &title).as_bytes(),
        )?;
    }

    // Importance-weight decade histograms for the MoE policy.
    for row in report.diagnostics.iter().filter(|d| d.policy == "moe") {
        let mut bins = vec![("zero".to_string(), row.zero_count as f64)];
        for (decade, count) in &row.decade_histogram {
            bins.push((format!("1e{decade}"), *count as f64));
        }
        let svg = svg_bars(
            &bins,
            &format!("MoE importance weights ({})", row.encoding),
            "count",
        );
        write_atomic(
            &paths.out_dir.join(format!("weight_decades_{}.svg", row.encoding)),
            svg.as_bytes(),
        )?;
    }

    // Bootstrap difference histograms.
    for summary in &bootstrap {
        let csv_path = paths.bootstrap_csv(match summary.encoding.as_str() {
            "recurrent" => Arm::Recurrent,
            _ => Arm::Sparse,
        });
        require(&csv_path, Stage::Bootstrap)?;
        let differences: Vec<f64> = std::fs::read_to_string(&csv_path)?
            .lines()
            .skip(1)
            .map(|l| l.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        let bins = histogram_bins(&differences, 12);
        let svg = svg_bars(
            &bins,
            &format!(
                "WDR(MoE) − WDR(physician), {}; original {:.4}",
                summary.encoding, summary.original
            ),
            "resamples",
        );
        write_atomic(
            &paths.out_dir.join(format!("bootstrap_{}.svg", summary.encoding)),
            svg.as_bytes(),
        )?;
    }

    // Mortality log-odds histograms per outcome class.
    let logits_text = std::fs::read_to_string(paths.mortality_logits())?;
    let mut survivor_logits = Vec::new();
    let mut nonsurvivor_logits = Vec::new();
    for line in logits_text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Schema(format!(
                "{}: malformed row '{line}'",
                paths.mortality_logits().display()
            )));
        }
        let logit: f64 = fields[2]
            .parse()
            .map_err(|e| Error::Data(format!("mortality_logits.csv: {e}")))?;
        if fields[3] == "1" {
            nonsurvivor_logits.push(logit);
        } else {
            survivor_logits.push(logit);
        }
    }
    for (class, logits) in
        [("survivors", &survivor_logits), ("nonsurvivors", &nonsurvivor_logits)]
    {
        let (counts, below, above) = reward_histogram(logits, -8.0, 8.0, 16);
        let mut bins = vec![("<-8".to_string(), below as f64)];
        for (b, count) in counts.iter().enumerate() {
            let lo = -8.0 + b as f64;
            bins.push((format!("{lo:.0}"), *count as f64));
        }
        bins.push((">8".to_string(), above as f64));
        let svg = svg_bars(&bins, &format!("Mortality log-odds, {class}"), "observations");
        write_atomic(
            &paths.out_dir.join(format!("mortality_logits_{class}.svg")),
            svg.as_bytes(),
        )?;
    }
    Ok(())
}

fn histogram_bins(values: &[f64], bins: usize) -> Vec<(String, f64)> {
    if values.is_empty() {
        return vec![("none".to_string(), 0.0)];
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(b, c)| (format!("{:.2}", lo + (b as f64 + 0.5) * width), *c as f64))
        .collect()
}

fn stage_verify(config: &PipelineConfig, paths: &Paths) -> Result<()> {
    require(&paths.report(), Stage::Report)?;
    let report: RunReport = read_json(&paths.report())?;
    let recomputed = compute_evaluation(config, paths)?;
    let mut fresh = Vec::new();
    for enc in &recomputed.encodings {
        fresh.extend(enc.policy_values.iter().cloned());
    }
    if fresh.len() != report.policy_values.len() {
        return Err(Error::Data(format!(
            "verify: report has {} policy-value rows, recomputation {}",
            report.policy_values.len(),
            fresh.len()
        )));
    }
    for (a, b) in report.policy_values.iter().zip(&fresh) {
        if a.encoding != b.encoding
            || a.policy != b.policy
            || a.wdr_dqn_value.to_bits() != b.wdr_dqn_value.to_bits()
            || a.wdr_behavior_value.to_bits() != b.wdr_behavior_value.to_bits()
        {
            return Err(Error::Data(format!(
                "verify: policy-value row ({}, {}) does not reproduce: report ({}, {}), recomputed ({}, {})",
                a.encoding, a.policy, a.wdr_dqn_value, a.wdr_behavior_value,
                b.wdr_dqn_value, b.wdr_behavior_value
            )));
        }
    }
    println!(
        "verify: report matches recomputation ({} policy-value rows)",
        fresh.len()
    );
    Ok(())
}
