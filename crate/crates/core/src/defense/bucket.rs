use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::model::ParamVector;

use super::check_updates;

/// Shuffle, average within buckets of at most `s` updates, and hand the
/// bucket means to `inner`.
pub fn bucketing<R, F>(updates: &[ParamVector], s: usize, rng: &mut R, inner: F) -> Result<ParamVector>
where
    R: Rng + ?Sized,
    F: FnOnce(&[ParamVector]) -> Result<ParamVector>,
{
    check_updates(updates, 1, "bucketing")?;
    if s == 0 {
        return Err(invalid("bucket size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.shuffle(rng);
    let means = order
        .chunks(s)
        .map(|bucket| {
            let mut acc = vec![0f64; updates[0].len()];
            for &i in bucket {
                for (a, v) in acc.iter_mut().zip(updates[i].as_slice()) {
                    *a += *v as f64;
                }
            }
            let k = bucket.len() as f64;
            updates[0].with_values(acc.into_iter().map(|a| (a / k) as f32).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    inner(&means)
}
