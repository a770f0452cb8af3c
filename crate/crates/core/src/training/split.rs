use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::PatientRecord;
use crate::model::LossConfig;

/// Per-class stratified split of `items` into `(kept, held_out)`.
///
/// Each class contributes `round(fraction · n_c)` items to the held-out side, clamped to
/// `[1, n_c − 1]`. Both sides keep the input order.
pub fn stratified_partition<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> u8,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; items.len()];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..items.len()).filter(|&i| label(&items[i]) == class).collect();
        if members.len() < 2 {
            return Err(Error::Domain(format!(
                "class {class} has {} members; stratified split needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let take = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        for &i in &members[..take] {
            held[i] = true;
        }
    }
    let mut kept = Vec::new();
    let mut out = Vec::new();
    for (item, &h) in items.iter().zip(&held) {
        if h {
            out.push(item.clone());
        } else {
            kept.push(item.clone());
        }
    }
    Ok((kept, out))
}

/// Patient-level split; all slides of a patient stay on one side.
pub fn stratified_split(
    records: &[PatientRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>)> {
    stratified_partition(records, |r| r.label, fraction, seed)
}

/// Inverse-frequency weights `w_c = N / (2 · N_c)`.
///
/// The quotients are correctly rounded, then nudged by at most two ulps when needed so that
/// `w_0 · N_0 + w_1 · N_1` evaluates to exactly `N` in `f64`.
pub fn class_weights(labels: &[u8]) -> Result<LossConfig> {
    let n1 = labels.iter().filter(|&&y| y != 0).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Domain(format!(
            "class weights need both classes (negatives {n0}, positives {n1})"
        )));
    }
    let (n, n0, n1) = (labels.len() as f64, n0 as f64, n1 as f64);
    let (w0, w1) = (n / (2.0 * n0), n / (2.0 * n1));
    let mut best = (w0, w1);
    let mut best_cost = usize::MAX;
    for (c0, x) in ulp_neighbors(w0) {
        for (c1, y) in ulp_neighbors(w1) {
            if x * n0 + y * n1 == n && c0 + c1 < best_cost {
                best = (x, y);
                best_cost = c0 + c1;
            }
        }
    }
    LossConfig::new(best.0, best.1)
}

/// `w` and its neighbours up to two ulps away, tagged with their distance.
fn ulp_neighbors(w: f64) -> [(usize, f64); 5] {
    [
        (0, w),
        (1, w.next_down()),
        (1, w.next_up()),
        (2, w.next_down().next_down()),
        (2, w.next_up().next_up()),
    ]
}
