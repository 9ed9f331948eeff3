use crate::error::{CctError, Result};

/// Unbiased pass@k: `1 - C(n - c, k) / C(n, k)` for `c` passing samples out
/// of `n`, evaluated as `1 - prod_{i = n-c+1}^{n} (1 - k / i)`.
pub fn pass_at_k(n: usize, correct: usize, k: usize) -> Result<f64> {
    if correct > n {
        return Err(CctError::Contract(format!(
            "correct count {correct} exceeds sample count {n}"
        )));
    }
    if k == 0 || k > n {
        return Err(CctError::Contract(format!("k = {k} must lie in 1..={n}")));
    }
    if n - correct < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - correct + 1..=n)
        .map(|i| 1.0 - k as f64 / i as f64)
        .product();
    Ok(1.0 - miss)
}
