use rand::seq::index::sample;

use super::config::OnlinePolicy;
use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A device's parameters and its training-set size `N_k`.
#[derive(Clone, Copy, Debug)]
pub struct Update<'a> {
    pub device_id: usize,
    pub params: &'a ParamSet,
    pub num_samples: usize,
}

/// Size-weighted mean of every parameter (weights, architecture parameters
/// and batch-norm statistics alike), with weights `N_k / Σ N_k`.
///
/// Updates are reduced in device-id order as `x_ref + Σ_k w_k (x_k − x_ref)`
/// where `x_ref` is the lowest-id update. This makes the result independent
/// of input order and exact when all updates agree.
///
/// Returns the parameters and the normalizer `Σ N_k`.
pub fn aggregate(updates: &[Update<'_>]) -> Result<(ParamSet, usize)> {
    let mut sorted: Vec<&Update> = updates.iter().collect();
    sorted.sort_by_key(|u| u.device_id);
    let first = *sorted.first().ok_or_else(|| Error::Invalid("aggregate needs at least one update".into()))?;
    for u in &sorted[1..] {
        if u.device_id == first.device_id {
            return Err(Error::Invalid(format!("device {} appears twice", u.device_id)));
        }
        let diff = first.params.symmetric_difference(u.params);
        if !diff.is_empty() {
            return Err(Error::ParamMismatch(diff));
        }
    }
    let total: usize = sorted.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Invalid("aggregate weights sum to zero".into()));
    }
    let weights: Vec<f64> = sorted.iter().map(|u| u.num_samples as f64 / total as f64).collect();
    let mut out = first.params.clone();
    for idx in 0..out.len() {
        let id = out.get(idx).id.clone();
        let reference = first.params.get(idx).tensor.data();
        let sources: Vec<&[f64]> =
            sorted.iter().map(|u| u.params.by_id(&id).expect("id sets checked").tensor.data()).collect();
        if let Some(bad) = sources.iter().position(|s| s.len() != reference.len()) {
            return Err(Error::shape(
                "aggregate",
                format!("`{id}` differs in size on device {}", sorted[bad].device_id),
            ));
        }
        let dst = out.get_mut(idx).tensor.data_mut();
        for e in 0..dst.len() {
            let r = reference[e];
            let mut acc = 0.0;
            for (s, w) in sources.iter().zip(&weights) {
                acc += w * (s[e] - r);
            }
            dst[e] = r + acc;
        }
    }
    Ok((out, total))
}

/// Devices taking part in a round, in increasing id order.
pub fn sample_online(device_ids: &[usize], policy: OnlinePolicy, rng: &mut Rng) -> Result<Vec<usize>> {
    let k = device_ids.len();
    if k == 0 {
        return Err(Error::Invalid("no devices to sample from".into()));
    }
    let m = match policy {
        OnlinePolicy::All => k,
        OnlinePolicy::Fraction { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Invalid(format!("online fraction must be in (0, 1], got {fraction}")));
            }
            ((fraction * k as f64).round() as usize).clamp(1, k)
        }
        OnlinePolicy::Fixed { m } => {
            if m == 0 || m > k {
                return Err(Error::Invalid(format!("cannot sample {m} of {k} devices")));
            }
            m
        }
    };
    let mut chosen: Vec<usize> =
        if m == k { device_ids.to_vec() } else { sample(rng, k, m).into_iter().map(|i| device_ids[i]).collect() };
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::{ParamKind, Tensor};

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.register("w", ParamKind::Weight, Tensor::scalar(v));
        p
    }

    #[test]
    fn weighted_mean_examples() {
        let (a, b) = (scalar_set(0.0), scalar_set(4.0));
        let (out, n) = aggregate(&[
            Update { device_id: 0, params: &a, num_samples: 1 },
            Update { device_id: 1, params: &b, num_samples: 3 },
        ])
        .unwrap();
        assert_eq!(out.by_id("w").unwrap().tensor.item(), 3.0);
        assert_eq!(n, 4);
        let (single, _) = aggregate(&[Update { device_id: 5, params: &b, num_samples: 7 }]).unwrap();
        assert_eq!(single, b);
    }

    #[test]
    fn mismatched_ids_listed() {
        let a = scalar_set(1.0);
        let mut b = ParamSet::new();
        b.register("v", ParamKind::Weight, Tensor::scalar(1.0));
        match aggregate(&[
            Update { device_id: 0, params: &a, num_samples: 1 },
            Update { device_id: 1, params: &b, num_samples: 1 },
        ]) {
            Err(Error::ParamMismatch(ids)) => assert_eq!(ids, vec!["v".to_string(), "w".to_string()]),
            other => panic!("expected mismatch, got {other:?}"),
        }
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn online_policies() {
        let ids: Vec<usize> = (0..10).collect();
        let mut rng = Rng::seed_from_u64(0);
        assert_eq!(sample_online(&ids, OnlinePolicy::All, &mut rng).unwrap(), ids);
        assert_eq!(sample_online(&ids, OnlinePolicy::Fixed { m: 3 }, &mut rng).unwrap().len(), 3);
        assert_eq!(sample_online(&ids, OnlinePolicy::Fraction { fraction: 0.01 }, &mut rng).unwrap().len(), 1);
        assert!(sample_online(&ids, OnlinePolicy::Fixed { m: 11 }, &mut rng).is_err());
    }
}
