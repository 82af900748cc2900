//! Scratch diagnostic: project trained experts onto the latent chain and
//! DP-evaluate them exactly against behavior and the optimal policy.

use std::collections::BTreeMap;
use std::path::Path;

use moerl::encoder::{SequenceEncoder, SparseAutoencoder};
use moerl::experts::{dqn_policy, restrict_actions, QNetwork};
use moerl::gate::{extract_gating_features, mixture_policy, GateModel};
use moerl::reward::MortalityModel;
use moerl::sim::{self, CohortTruth};
use moerl::wdr::{
    control_variates, wdr_estimate, EvalStep, EvalTrajectory, EvaluationDataset, VariateMode,
    Variates,
};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "/tmp/desk0".into());
    if out == "sweep" {
        sweep();
        return;
    }
    let out = Path::new(&out);
    let mdp = sim::sepsis_default();
    let a_count = mdp.action_count;

    // Optimal value via value iteration on the latent chain.
    let s_count = mdp.latent_states;
    let mut v = vec![0.0f64; s_count];
    for _ in 0..4000 {
        let mut nv = vec![0.0f64; s_count];
        for z in 0..s_count {
            let mut best = f64::NEG_INFINITY;
            for a in 0..a_count {
                let mut q = 0.0;
                for z2 in 0..s_count {
                    let p = mdp.transition[(z * a_count + a) * s_count + z2];
                    if p > 0.0 {
                        q += p * (mdp.reward(z, a, z2) + mdp.discount * v[z2]);
                    }
                }
                best = best.max(q);
            }
            nv[z] = if z == mdp.discharge_state || z == mdp.death_state { 0.0 } else { best };
        }
        v = nv;
    }
    let optimal_start: f64 = mdp.start.iter().zip(&v).map(|(p, v)| p * v).sum();

    let truth: CohortTruth =
        serde_json::from_str(&std::fs::read_to_string(out.join("truth.json")).unwrap()).unwrap();
    let behavior_value = sim::exact_policy_value(&mdp, &mdp.behavior, mdp.discount).unwrap();
    let mortality = sim::death_probability(&mdp, &mdp.behavior).unwrap();
    println!("behavior value {behavior_value:.4}   optimal value {optimal_start:.4}   headroom {:.4}   mortality {mortality:.4}", optimal_start - behavior_value);

    if !out.join("encoder.ckpt").exists() {
        oracle_kernel(&mdp, &truth);
        restricted_optima(&mdp);
        return;
    }

    // Test split processed rows, keyed by patient.
    let test = std::fs::read_to_string(out.join("test.csv")).unwrap();
    let mut per_patient: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for line in test.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let id = f[0].to_string();
        let obs: Vec<f64> = f[2..47].iter().map(|v| v.parse().unwrap()).collect();
        if !per_patient.contains_key(&id) {
            order.push(id.clone());
        }
        per_patient.entry(id).or_default().push(obs);
    }

    // policies CSV: kernel/behavior per test step.
    let pol = std::fs::read_to_string(out.join("policies_recurrent.csv")).unwrap();
    let mut step_pol: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for line in pol.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] != "test" {
            continue;
        }
        let id = f[1].to_string();
        let t: usize = f[2].parse().unwrap();
        let max_d: f64 = f[3].parse().unwrap();
        let k: Vec<f64> = f[4..29].iter().map(|v| v.parse().unwrap()).collect();
        let b: Vec<f64> = f[29..54].iter().map(|v| v.parse().unwrap()).collect();
        step_pol.insert((id, t), (k, b, max_d));
    }

    let encoder = SequenceEncoder::load(&out.join("encoder.ckpt")).unwrap();
    let _sparse = SparseAutoencoder::load(&out.join("sparse.ckpt")).unwrap();
    let qnet = QNetwork::load(&out.join("dqn_recurrent.ckpt")).unwrap();
    let gate = GateModel::load(&out.join("gate_recurrent.json")).unwrap();
    let params = gate.params();

    // Accumulate mean action distribution per latent state for each policy.
    let temperature: f64 = std::env::args()
        .nth(2)
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.2);
    println!("dqn softmax temperature: {temperature}");
    let names = ["behavior", "kernel", "dqn", "moe"];
    let mut sums = vec![vec![vec![0.0f64; a_count]; s_count]; names.len()];
    let mut counts = vec![0usize; s_count];
    let mut q_gap = 0.0;
    let mut q_gap_n = 0usize;
    // Weight-survival and gate diagnostics: fraction of logged test steps
    // where each policy puts mass on the logged action.
    let mut nonzero = [0usize; 4];
    let mut steps_total = 0usize;
    let mut p_k_sum = 0.0;
    let mut p_k_min = f64::INFINITY;
    let mut p_k_max = f64::NEG_INFINITY;
    // The logged action per test step, recovered from the processed rows.
    let test_actions: BTreeMap<(String, usize), usize> = test
        .lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            ((f[0].to_string(), f[1].parse().unwrap()), f[47].parse().unwrap())
        })
        .collect();
    for id in &order {
        let idx: usize = id[1..].parse().unwrap();
        let trace = &truth.latent_traces[idx];
        let seq = &per_patient[id];
        let states = encoder.encode_prefixes(seq);
        for (t, state) in states.iter().enumerate() {
            let z = trace[t];
            let (kernel, behavior, max_d) = step_pol[&(id.clone(), t)].clone();
            let dqn_full = dqn_policy(&qnet, state, temperature);
            let dqn_r = restrict_actions(&dqn_full, &behavior, 0.01);
            let raw = extract_gating_features(&seq[t], t + 1, max_d);
            let (p_k, _) = params.probability(&gate.feature_stats.apply(&raw));
            let moe = mixture_policy(p_k, &kernel, &dqn_r);
            counts[z] += 1;
            p_k_sum += p_k;
            p_k_min = p_k_min.min(p_k);
            p_k_max = p_k_max.max(p_k);
            let logged = test_actions[&(id.clone(), t)];
            steps_total += 1;
            for (p, dist) in [&behavior, &kernel, &dqn_r, &moe].iter().enumerate() {
                if dist[logged] > 0.0 {
                    nonzero[p] += 1;
                }
                for a in 0..a_count {
                    sums[p][z][a] += dist[a];
                }
            }
            let (q, vmax) = control_variates(&qnet, VariateMode::DqnValue, &[state.clone()], &[0]);
            let _ = q;
            q_gap += vmax[0];
            q_gap_n += 1;
        }
    }
    println!("mean max-Q over test states: {:.4}", q_gap / q_gap_n as f64);
    println!(
        "gate p_k over test steps: mean {:.3}  min {:.3}  max {:.3}",
        p_k_sum / steps_total as f64,
        p_k_min,
        p_k_max
    );
    for (p, name) in names.iter().enumerate() {
        println!(
            "  {name:<10} mass on logged action at {:.1}% of test steps",
            100.0 * nonzero[p] as f64 / steps_total as f64
        );
    }

    for (p, name) in names.iter().enumerate() {
        let mut flat = vec![0.0; s_count * a_count];
        for z in 0..s_count {
            if counts[z] == 0 || z == mdp.discharge_state || z == mdp.death_state {
                flat[z * a_count] = 1.0;
                continue;
            }
            for a in 0..a_count {
                flat[z * a_count + a] = sums[p][z][a] / counts[z] as f64;
            }
        }
        let value = sim::exact_policy_value(&mdp, &flat, mdp.discount).unwrap();
        let death = sim::death_probability(&mdp, &flat).unwrap();
        println!("{name:<10} projected latent value {value:.4}   death {death:.4}");
    }
    println!("state visit counts (test): {counts:?}");

    // Test-set WDR of the mixture at a sweep of CONSTANT gate values,
    // against the physician under both variate modes.
    let model = MortalityModel::load(&out.join("reward.ckpt")).unwrap();
    let sweep = [1.0, 0.95, 0.9, 0.8, 0.65, 0.5, 0.35, 0.0];
    let mut phys: Vec<EvalTrajectory> = Vec::new();
    let mut mixes: Vec<Vec<EvalTrajectory>> = vec![Vec::new(); sweep.len()];
    let (mut q_rows, mut vmax_rows, mut vmean_rows) = (Vec::new(), Vec::new(), Vec::new());
    for id in &order {
        let seq = &per_patient[id];
        let states = encoder.encode_prefixes(seq);
        let actions: Vec<usize> =
            (0..seq.len()).map(|t| test_actions[&(id.clone(), t)]).collect();
        let (q, vmax) = control_variates(&qnet, VariateMode::DqnValue, &states, &actions);
        let (_, vmean) = control_variates(&qnet, VariateMode::BehaviorValue, &states, &actions);
        q_rows.push(q);
        vmax_rows.push(vmax);
        vmean_rows.push(vmean);
        let mut p_steps = Vec::new();
        let mut m_steps: Vec<Vec<EvalStep>> = vec![Vec::new(); sweep.len()];
        for (t, state) in states.iter().enumerate() {
            let reward = if t + 1 < seq.len() {
                model.reward(&seq[t], &seq[t + 1])
            } else {
                0.0
            };
            let (kernel, behavior, _) = step_pol[&(id.clone(), t)].clone();
            let dqn_r = restrict_actions(&dqn_policy(&qnet, state, temperature), &behavior, 0.01);
            let a = test_actions[&(id.clone(), t)];
            p_steps.push(EvalStep { reward, pi_e: behavior[a], pi_b: behavior[a] });
            for (j, &pk) in sweep.iter().enumerate() {
                let mix = mixture_policy(pk, &kernel, &dqn_r);
                m_steps[j].push(EvalStep { reward, pi_e: mix[a], pi_b: behavior[a] });
            }
        }
        phys.push(EvalTrajectory { steps: p_steps });
        for (j, steps) in m_steps.into_iter().enumerate() {
            mixes[j].push(EvalTrajectory { steps });
        }
    }
    let v_max = Variates { q: q_rows.clone(), v: vmax_rows };
    let v_mean = Variates { q: q_rows, v: vmean_rows };
    let eval = |trajs: Vec<EvalTrajectory>| -> (f64, f64) {
        let ds = EvaluationDataset { trajectories: trajs, discount: mdp.discount };
        (
            wdr_estimate(&ds, Some(&v_max)).unwrap(),
            wdr_estimate(&ds, Some(&v_mean)).unwrap(),
        )
    };
    let (pd, pb) = eval(phys);
    println!("test WDR physician: V_d {pd:.4}  V_b {pb:.4}");
    for (j, &pk) in sweep.iter().enumerate() {
        let (md, mb) = eval(std::mem::take(&mut mixes[j]));
        println!(
            "test WDR mixture p_k={pk:.2}: V_d {md:.4} ({:+.4})  V_b {mb:.4} ({:+.4})",
            md - pd,
            mb - pb
        );
    }

    oracle_kernel(&mdp, &truth);
    restricted_optima(&mdp);
}

// Oracle kernel: survivor action frequencies conditioned on the TRUE
// latent state, over the whole cohort. Upper bound for the kNN expert.
fn oracle_kernel(mdp: &sim::SimMdp, truth: &CohortTruth) {
    let a_count = mdp.action_count;
    let s_count = mdp.latent_states;
    let mut surv = vec![vec![0.0f64; a_count]; s_count];
    let mut all = vec![vec![0.0f64; a_count]; s_count];
    for (idx, trace) in truth.latent_traces.iter().enumerate() {
        let actions = &truth.intended_actions[idx];
        let died = *trace.last().unwrap() == mdp.death_state;
        for (t, &a) in actions.iter().enumerate() {
            all[trace[t]][a as usize] += 1.0;
            if !died {
                surv[trace[t]][a as usize] += 1.0;
            }
        }
    }
    let mut oracle = vec![0.0; s_count * a_count];
    for z in 0..s_count {
        let total: f64 = surv[z].iter().sum();
        let fallback: f64 = all[z].iter().sum();
        for a in 0..a_count {
            oracle[z * a_count + a] = if total > 0.0 {
                surv[z][a] / total
            } else if fallback > 0.0 {
                all[z][a] / fallback
            } else if a == 0 {
                1.0
            } else {
                0.0
            };
        }
    }
    let ov = sim::exact_policy_value(mdp, &oracle, mdp.discount).unwrap();
    let od = sim::death_probability(mdp, &oracle).unwrap();
    println!("oracle-kernel (true z, survivor freq): value {ov:.4}   death {od:.4}");

    // Decomposition: where does the oracle tilt live, and what is each
    // state's row worth on its own?
    let dose = |row: &[f64]| -> f64 {
        row.iter()
            .enumerate()
            .map(|(a, p)| p * ((a / 5) + (a % 5)) as f64)
            .sum()
    };
    let bv = sim::exact_policy_value(mdp, &mdp.behavior, mdp.discount).unwrap();
    for z in 0..6 {
        let b_row = &mdp.behavior[z * a_count..(z + 1) * a_count];
        let o_row = &oracle[z * a_count..(z + 1) * a_count];
        let mut swapped = mdp.behavior.clone();
        swapped[z * a_count..(z + 1) * a_count].copy_from_slice(o_row);
        let sv = sim::exact_policy_value(mdp, &swapped, mdp.discount).unwrap();
        println!(
            "  z={z}: dose behavior {:.2}  survivors {:.2}  ideal {:.2}   swap-value gain {:+.4}",
            dose(b_row),
            dose(o_row),
            8.0 * z as f64 / 5.0,
            sv - bv,
        );
    }
}

// Restricted optimal: greedy over actions the behavior takes often enough.
fn restricted_optima(mdp: &sim::SimMdp) {
    let a_count = mdp.action_count;
    let s_count = mdp.latent_states;
    for threshold in [0.006, 0.01, 0.02] {
        let mut v = vec![0.0f64; s_count];
        for _ in 0..4000 {
            let mut nv = vec![0.0f64; s_count];
            for z in 0..s_count {
                if z == mdp.discharge_state || z == mdp.death_state {
                    continue;
                }
                let mut best = f64::NEG_INFINITY;
                for a in 0..a_count {
                    if mdp.behavior[z * a_count + a] < threshold {
                        continue;
                    }
                    let mut q = 0.0;
                    for z2 in 0..s_count {
                        let p = mdp.transition[(z * a_count + a) * s_count + z2];
                        if p > 0.0 {
                            q += p * (mdp.reward(z, a, z2) + mdp.discount * v[z2]);
                        }
                    }
                    best = best.max(q);
                }
                nv[z] = best;
            }
            v = nv;
        }
        let rv: f64 = mdp.start.iter().zip(&v).map(|(p, v)| p * v).sum();
        println!("restricted-optimal (behavior >= {threshold}): value {rv:.4}");
    }
}

// ---------------------------------------------------------------------------
// Simulator parameter sweep: rebuild the chain under candidate settings and
// report exact behavior/optimal values, mortality, and the survivor-frequency
// kernel oracle's edge, all from DP plus one simulated cohort.

#[derive(Clone)]
struct Cand {
    name: &'static str,
    mu0: f64,
    mu1: f64,
    sg0: f64,
    sg1: f64,
    death_base: [f64; 6],
    improve_scale: [f64; 6],
    dlo: f64,
    dhi: f64,
    eps: f64,
}

fn build_sim(c: &Cand) -> sim::SimMdp {
    let mut mdp = sim::sepsis_default();
    let s_count = mdp.latent_states;
    let a_count = mdp.action_count;
    let discharge_base = [0.32, 0.17, 0.08, 0.03, 0.0, 0.0];
    let sev = |z: usize| z as f64 / 5.0;
    let mismatch = |a: usize, s: f64| -> f64 {
        let iv = (a / 5) as f64;
        let vaso = (a % 5) as f64;
        let intensity = (iv + vaso) / 8.0;
        ((intensity - s).abs() + 0.15 * (vaso / 4.0) * (1.0 - s)).min(1.0)
    };
    for z in 0..6 {
        let s = sev(z);
        for a in 0..a_count {
            let m = mismatch(a, s);
            let p_disc = discharge_base[z] * (1.0 - 0.7 * m);
            let p_death = c.death_base[z] * (c.dlo + c.dhi * m);
            let p_improve = (0.07 + 0.40 * (1.0 - m)) * c.improve_scale[z];
            let p_worsen = if z < 5 { 0.03 + 0.40 * m } else { 0.0 };
            let p_stay = 1.0 - p_disc - p_death - p_improve - p_worsen;
            assert!(p_stay >= 0.0, "stay negative at z={z} a={a}: {p_stay}");
            let row = &mut mdp.transition[(z * a_count + a) * s_count..(z * a_count + a + 1) * s_count];
            row.iter_mut().for_each(|p| *p = 0.0);
            row[mdp.discharge_state] = p_disc;
            row[mdp.death_state] = p_death;
            if z > 0 {
                row[z - 1] = p_improve;
            }
            if z < 5 {
                row[z + 1] = p_worsen;
            }
            row[z] += p_stay;
        }
        let mu = c.mu0 + c.mu1 * s;
        let sigma = c.sg0 + c.sg1 * s;
        let mut row = vec![0.0; a_count];
        let mut total = 0.0;
        for (a, slot) in row.iter_mut().enumerate() {
            let iv = (a / 5) as f64;
            let vaso = (a % 5) as f64;
            let d2 = (iv - mu).powi(2) + (vaso - mu).powi(2);
            *slot = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *slot;
        }
        for (a, &w) in row.iter().enumerate() {
            mdp.behavior[z * a_count + a] = (1.0 - c.eps) * w / total + c.eps / a_count as f64;
        }
    }
    mdp
}

fn sweep() {
    let base_death = [0.0, 0.0, 0.003, 0.025, 0.075, 0.18];
    let base_improve = [0.0, 1.0, 1.0, 0.9, 0.55, 0.45];
    let cands = vec![
        Cand { name: "current", mu0: 0.2, mu1: 2.9, sg0: 1.2, sg1: 1.2, death_base: base_death, improve_scale: base_improve, dlo: 0.08, dhi: 2.8, eps: 0.15 },
        Cand { name: "sg-hi", mu0: 0.2, mu1: 2.9, sg0: 1.0, sg1: 1.8, death_base: base_death, improve_scale: base_improve, dlo: 0.08, dhi: 2.8, eps: 0.15 },
        Cand { name: "eps20", mu0: 0.2, mu1: 2.9, sg0: 1.2, sg1: 1.2, death_base: base_death, improve_scale: base_improve, dlo: 0.08, dhi: 2.8, eps: 0.20 },
        Cand { name: "slope33", mu0: 0.2, mu1: 2.9, sg0: 1.2, sg1: 1.2, death_base: [0.0, 0.0, 0.003, 0.022, 0.068, 0.16], improve_scale: base_improve, dlo: 0.05, dhi: 3.3, eps: 0.15 },
        Cand { name: "slope38", mu0: 0.2, mu1: 2.9, sg0: 1.2, sg1: 1.2, death_base: [0.0, 0.0, 0.003, 0.020, 0.062, 0.145], improve_scale: base_improve, dlo: 0.03, dhi: 3.8, eps: 0.15 },
        Cand { name: "dwell", mu0: 0.2, mu1: 2.9, sg0: 1.2, sg1: 1.2, death_base: [0.0, 0.0, 0.003, 0.022, 0.065, 0.15], improve_scale: [0.0, 1.0, 1.0, 0.85, 0.48, 0.38], dlo: 0.08, dhi: 2.8, eps: 0.15 },
        Cand { name: "combo", mu0: 0.2, mu1: 2.9, sg0: 1.0, sg1: 1.8, death_base: [0.0, 0.0, 0.003, 0.020, 0.060, 0.14], improve_scale: [0.0, 1.0, 1.0, 0.85, 0.48, 0.38], dlo: 0.05, dhi: 3.3, eps: 0.15 },
    ];
    println!("{:<10} {:>8} {:>8} {:>9} {:>9} {:>8} {:>9} {:>9}", "name", "behav", "optimal", "headroom", "mortal", "oracle", "edge", "o-death");
    for c in &cands {
        let mdp = build_sim(c);
        mdp.validate().unwrap();
        let bv = sim::exact_policy_value(&mdp, &mdp.behavior, mdp.discount).unwrap();
        let opt = optimal_value(&mdp);
        let mort = sim::death_probability(&mdp, &mdp.behavior).unwrap();
        let (ov, od) = survivor_oracle(&mdp);
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>8.4} {:>+9.4} {:>9.4}",
            c.name, bv, opt, opt - bv, mort, ov, ov - bv, od
        );
    }
}

fn optimal_value(mdp: &sim::SimMdp) -> f64 {
    let s_count = mdp.latent_states;
    let a_count = mdp.action_count;
    let mut v = vec![0.0f64; s_count];
    for _ in 0..4000 {
        let mut nv = vec![0.0f64; s_count];
        for z in 0..s_count {
            if z == mdp.discharge_state || z == mdp.death_state {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..a_count {
                let mut q = 0.0;
                for z2 in 0..s_count {
                    let p = mdp.transition[(z * a_count + a) * s_count + z2];
                    if p > 0.0 {
                        q += p * (mdp.reward(z, a, z2) + mdp.discount * v[z2]);
                    }
                }
                best = best.max(q);
            }
            nv[z] = best;
        }
        v = nv;
    }
    mdp.start.iter().zip(&v).map(|(p, v)| p * v).sum()
}

fn survivor_oracle(mdp: &sim::SimMdp) -> (f64, f64) {
    let cohort = sim::generate_cohort(mdp, 2000, 0).unwrap();
    let a_count = mdp.action_count;
    let s_count = mdp.latent_states;
    let mut surv = vec![vec![0.0f64; a_count]; s_count];
    let mut all = vec![vec![0.0f64; a_count]; s_count];
    for traj in &cohort {
        let trace = traj.latent_trace.as_ref().unwrap();
        let actions = traj.intended_actions.as_ref().unwrap();
        let died = *trace.last().unwrap() == mdp.death_state;
        for (t, &a) in actions.iter().enumerate() {
            all[trace[t]][a as usize] += 1.0;
            if !died {
                surv[trace[t]][a as usize] += 1.0;
            }
        }
    }
    let mut oracle = vec![0.0; s_count * a_count];
    for z in 0..s_count {
        let total: f64 = surv[z].iter().sum();
        let fallback: f64 = all[z].iter().sum();
        for a in 0..a_count {
            oracle[z * a_count + a] = if total > 0.0 {
                surv[z][a] / total
            } else if fallback > 0.0 {
                all[z][a] / fallback
            } else if a == 0 {
                1.0
            } else {
                0.0
            };
        }
    }
    (
        sim::exact_policy_value(mdp, &oracle, mdp.discount).unwrap(),
        sim::death_probability(mdp, &oracle).unwrap(),
    )
}
