//! Text formatting shared by the CSV writers.

/// Formats with 17 significant digits so the value round-trips exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
