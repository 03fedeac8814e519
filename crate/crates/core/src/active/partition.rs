use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Label-stratified split of `0..labels.len()` into `(rest, held_out)` with
/// `held_out.len() == held_out_size`. Both index lists are sorted.
///
/// Each class contributes `floor(size * n_k / n)` indices, and the remaining
/// slots go to the classes with the largest fractional shares (lower class
/// id first on ties).
pub fn partition_dataset(labels: &[usize], held_out_size: usize, rng: &mut RngState) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if held_out_size >= n {
        return Err(Error::invalid(format!(
            "split size {held_out_size} must be smaller than the dataset ({n})"
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut quota: Vec<usize> = by_class.iter().map(|c| held_out_size * c.len() / n).collect();
    let mut remaining = held_out_size - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..num_classes).collect();
    // fractional part numerators: (size * n_k) mod n
    order.sort_by_key(|&k| (std::cmp::Reverse(held_out_size * by_class[k].len() % n), k));
    for &k in &order {
        if remaining == 0 {
            break;
        }
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            remaining -= 1;
        }
    }
    let mut held = Vec::with_capacity(held_out_size);
    for (k, members) in by_class.iter_mut().enumerate() {
        let mut crng = rng.fork_index(k as u64);
        crng.shuffle(members);
        held.extend_from_slice(&members[..quota[k]]);
    }
    held.sort_unstable();
    let mut is_held = vec![false; n];
    for &i in &held {
        is_held[i] = true;
    }
    let rest = (0..n).filter(|&i| !is_held[i]).collect();
    Ok((rest, held))
}
