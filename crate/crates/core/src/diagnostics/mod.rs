//! Verification instruments: SNR estimators, the feature-correlation metric
//! and the finite-difference gradient checker.

mod correlation;
mod gradcheck;
mod montecarlo;
mod snr;
mod suite;

pub use correlation::{
    correlation_report, feature_correlation, CorrelationGroup, CorrelationReport,
    FeatureCorrelation, LayerCorrelation,
};
pub use gradcheck::{grad_check, Coordinate, GradCheckConfig, GradCheckReport};
pub use montecarlo::{mc_sums, MC_CHUNK};
pub use suite::{gradient_suite, SuiteEntry, SUITE_CASES};
pub use snr::{
    cross_term_ratio, ncmn_noise_variance, ncmn_noise_variance_mc, shake_snr, snr_analytic,
    model_snr, snr_monte_carlo, snr_report, InputMoments, LayerSnr, ShakeSnr, SnrReport,
};

/// Serializes non-finite values as the strings `"inf"`, `"-inf"` or `"nan"`.
pub(crate) mod finite_or_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Tag(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float tag {other}"))),
            },
        }
    }
}
