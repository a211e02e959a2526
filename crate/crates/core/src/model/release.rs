use super::ModelError;

/// Release-volume-weighted mean of per-layer simulated temperatures:
/// `u = Σ_d f_d m_d / Σ_d f_d`.
pub fn flow_average_temperature(flows: &[f64], temps: &[f64]) -> Result<f64, ModelError> {
    if flows.len() != temps.len() || flows.is_empty() {
        return Err(ModelError::Shape(format!(
            "{} flow layers vs {} temperature layers",
            flows.len(),
            temps.len()
        )));
    }
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (&f, &m) in flows.iter().zip(temps) {
        weighted += f * m;
        total += f;
    }
    if total == 0.0 {
        return Err(ModelError::ZeroTotalFlow);
    }
    Ok(weighted / total)
}

/// Flow-average temperature with the zero-flow fallback: when nothing is
/// released the unweighted layer mean is used and the day is flagged.
pub fn flow_average_or_mean(flows: &[f64], temps: &[f64]) -> Result<(f64, bool), ModelError> {
    match flow_average_temperature(flows, temps) {
        Ok(u) => Ok((u, false)),
        Err(ModelError::ZeroTotalFlow) => {
            let mean = temps.iter().sum::<f64>() / temps.len() as f64;
            Ok((mean, true))
        }
        Err(e) => Err(e),
    }
}
