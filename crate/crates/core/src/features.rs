//! The fixed 45-column observation schema.
//!
//! Columns cover demographics, vitals, labs and fluid-balance measurements
//! recorded per 4-hour window. Two preprocessing families exist: values with
//! roughly symmetric ranges are standardized, heavy-tailed ones are
//! log-transformed; both are then min-max rescaled into [0, 1].
//!
//! The attribute catalogue this schema descends from lists 48 columns, three
//! of which are not observations: `max_dose_vaso` and `input_4hourly_tev` are
//! the two treatment channels (they become the discrete action), and
//! `input_total_tev` duplicates `cumulated_balance_tev`. Dropping those three
//! leaves the 45 observation columns below, in fixed order.

use serde::{Deserialize, Serialize};

/// How a raw feature is normalized before min-max rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// Subtract mean, divide by standard deviation.
    Standardize,
    /// Apply log(1 + x); raw values must be nonnegative.
    Log,
}

/// Static description of one observation column.
///
/// `healthy`/`sick` anchor the synthetic emission model: the simulator
/// interpolates between them with latent severity. `lo`/`hi` are plausible
/// physiological clamps. `per_patient` marks demographics drawn once per
/// patient rather than per window.
#[derive(Debug, Clone, Copy)]
pub struct FeatureDef {
    pub name: &'static str,
    pub transform: Transform,
    pub healthy: f64,
    pub sick: f64,
    pub noise_sd: f64,
    pub lo: f64,
    pub hi: f64,
    pub per_patient: bool,
}

pub const FEATURE_COUNT: usize = 45;

const fn f(
    name: &'static str,
    transform: Transform,
    healthy: f64,
    sick: f64,
    noise_sd: f64,
    lo: f64,
    hi: f64,
    per_patient: bool,
) -> FeatureDef {
    FeatureDef { name, transform, healthy, sick, noise_sd, lo, hi, per_patient }
}

use Transform::{Log, Standardize};

/// The canonical column order. Indices into this table are the feature ids
/// used everywhere else (CSV columns `f_00`..`f_44`, gradient reports, the
/// gating features).
pub const FEATURES: [FeatureDef; FEATURE_COUNT] = [
    f("age", Standardize, 58.0, 70.0, 14.0, 18.0, 91.0, true),
    f("Weight_kg", Standardize, 80.0, 78.0, 18.0, 35.0, 200.0, true),
    f("GCS", Standardize, 14.5, 6.0, 1.5, 3.0, 15.0, false),
    f("HR", Standardize, 82.0, 125.0, 12.0, 30.0, 190.0, false),
    f("SysBP", Standardize, 118.0, 85.0, 12.0, 40.0, 220.0, false),
    f("MeanBP", Standardize, 84.0, 58.0, 9.0, 30.0, 160.0, false),
    f("DiaBP", Standardize, 66.0, 45.0, 8.0, 20.0, 120.0, false),
    f("RR", Standardize, 16.0, 30.0, 4.0, 4.0, 50.0, false),
    f("Temp_C", Standardize, 36.9, 39.2, 0.7, 32.0, 42.0, false),
    f("FiO2_1", Standardize, 0.30, 0.85, 0.08, 0.21, 1.0, false),
    f("Potassium", Standardize, 4.0, 5.1, 0.45, 2.0, 8.0, false),
    f("Sodium", Standardize, 139.0, 131.0, 4.0, 110.0, 165.0, false),
    f("Chloride", Standardize, 103.0, 96.0, 4.0, 80.0, 130.0, false),
    f("Glucose", Standardize, 105.0, 185.0, 25.0, 40.0, 500.0, false),
    f("Magnesium", Standardize, 2.0, 2.6, 0.25, 1.0, 5.0, false),
    f("Calcium", Standardize, 8.6, 7.4, 0.5, 5.0, 12.0, false),
    f("Hb", Standardize, 12.5, 8.5, 1.3, 4.0, 20.0, false),
    f("WBC_count", Standardize, 8.0, 19.0, 3.5, 1.0, 60.0, false),
    f("Platelets_count", Standardize, 250.0, 110.0, 50.0, 10.0, 800.0, false),
    f("PTT", Standardize, 32.0, 58.0, 8.0, 20.0, 150.0, false),
    f("PT", Standardize, 13.0, 21.0, 2.5, 9.0, 60.0, false),
    f("Arterial_pH", Standardize, 7.40, 7.24, 0.05, 6.9, 7.7, false),
    f("paO2", Standardize, 95.0, 68.0, 12.0, 30.0, 400.0, false),
    f("paCO2", Standardize, 40.0, 50.0, 6.0, 15.0, 100.0, false),
    f("Arterial_BE", Standardize, 0.5, -7.0, 2.5, -25.0, 20.0, false),
    f("HCO3", Standardize, 24.0, 17.0, 2.5, 5.0, 45.0, false),
    f("Arterial_lactate", Standardize, 1.2, 5.5, 0.8, 0.3, 20.0, false),
    f("SOFA", Standardize, 3.0, 14.0, 2.0, 0.0, 24.0, false),
    f("SIRS", Standardize, 1.0, 3.4, 0.6, 0.0, 4.0, false),
    f("Shock_Index", Standardize, 0.65, 1.35, 0.12, 0.2, 3.0, false),
    f("PaO2_FiO2", Standardize, 320.0, 110.0, 40.0, 30.0, 600.0, false),
    f("cumulated_balance_tev", Standardize, 800.0, 4200.0, 900.0, -5000.0, 20000.0, false),
    f("Elixhauser", Standardize, 2.2, 4.6, 1.4, 0.0, 15.0, true),
    f("Albumin", Standardize, 3.6, 2.3, 0.4, 1.0, 6.0, false),
    f("CO2_mEqL", Standardize, 25.0, 18.0, 3.0, 5.0, 50.0, false),
    f("Ionised_Ca", Standardize, 1.18, 1.02, 0.07, 0.5, 2.0, false),
    f("SpO2", Log, 97.0, 89.0, 2.2, 50.0, 100.0, false),
    f("BUN", Log, 18.0, 48.0, 8.0, 2.0, 200.0, false),
    f("Creatinine", Log, 0.9, 2.8, 0.5, 0.1, 20.0, false),
    f("SGOT", Log, 35.0, 180.0, 40.0, 5.0, 5000.0, false),
    f("SGPT", Log, 30.0, 150.0, 35.0, 5.0, 5000.0, false),
    f("Total_bili", Log, 0.8, 4.5, 0.9, 0.1, 50.0, false),
    f("INR", Log, 1.1, 1.9, 0.25, 0.5, 12.0, false),
    f("output_total", Log, 1500.0, 600.0, 350.0, 0.0, 10000.0, false),
    f("output_4hourly", Log, 180.0, 60.0, 45.0, 0.0, 2000.0, false),
];

/// Index of a feature by its column name.
pub fn feature_index(name: &str) -> Option<usize> {
    FEATURES.iter().position(|d| d.name == name)
}

/// Ordered feature names, e.g. for CSV headers.
pub fn feature_names() -> Vec<&'static str> {
    FEATURES.iter().map(|d| d.name).collect()
}
