use crate::error::{invalid, Result};

/// Holm step-down procedure. Returns, in input order, whether each null
/// hypothesis is rejected at family-wise level `alpha`.
pub fn holm_decide(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return invalid(format!("p-value {p} outside [0, 1]"));
    }
    let n = p_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps equal p-values in input order
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut decisions = vec![false; n];
    for (rank, &idx) in order.iter().enumerate() {
        if p_values[idx] <= alpha / (n - rank) as f64 {
            decisions[idx] = true;
        } else {
            break;
        }
    }
    Ok(decisions)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_significant() {
        assert_eq!(holm_decide(&[0.01, 0.04], 0.05).unwrap(), vec![true, true]);
        assert_eq!(holm_decide(&[0.03, 0.001], 0.05).unwrap(), vec![true, true]);
    }

    #[test]
    fn step_down_stops() {
        assert_eq!(holm_decide(&[0.03, 0.04], 0.05).unwrap(), vec![false, false]);
        assert_eq!(holm_decide(&[0.2, 0.001, 0.02], 0.05).unwrap(), vec![false, true, true]);
    }

    #[test]
    fn empty_and_invalid() {
        assert!(holm_decide(&[], 0.05).unwrap().is_empty());
        assert!(holm_decide(&[0.5], 0.0).is_err());
        assert!(holm_decide(&[1.5], 0.05).is_err());
    }
}
