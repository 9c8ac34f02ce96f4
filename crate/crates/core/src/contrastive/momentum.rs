use crate::nn::ParamSet;
use crate::tensor::{Real, TensorError};

/// `target ← η·target + (1 − η)·online`, scalar by scalar.
pub fn momentum_update<T: Real>(target: &mut ParamSet<T>, online: &ParamSet<T>, eta: f64) -> Result<(), TensorError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(TensorError::InvalidArgument(format!("momentum must lie in [0, 1], got {eta}")));
    }
    target.check_layout(online)?;
    if eta == 1.0 {
        return Ok(());
    }
    let (a, b) = (T::of_f64(eta), T::of_f64(1.0 - eta));
    for (t, (_, o)) in target.tensors_mut().zip(online.iter()) {
        if eta == 0.0 {
            t.data_mut().copy_from_slice(o.data());
            continue;
        }
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = a * *tv + b * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64([v.len()], v).unwrap());
        p
    }

    #[test]
    fn endpoints_and_midpoint() {
        let online = set(&[0.0, 2.0]);
        let mut t = set(&[1.0, -1.0]);
        momentum_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, set(&[1.0, -1.0]));
        momentum_update(&mut t, &online, 0.9).unwrap();
        assert!((t.get(0).data()[0] - 0.9).abs() < 1e-15);
        momentum_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, online);
    }

    #[test]
    fn rejects_mismatch() {
        let mut t = set(&[1.0]);
        assert!(momentum_update(&mut t, &set(&[1.0, 2.0]), 0.5).is_err());
        assert!(momentum_update(&mut t, &set(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn distance_decays_geometrically() {
        let online = set(&[0.3, -0.2, 1.0]);
        for eta in [0.9, 0.99] {
            let mut t = set(&[1.0, 2.0, -3.0]);
            let d0 = t.distance(&online);
            for _ in 0..50 {
                momentum_update(&mut t, &online, eta).unwrap();
            }
            let ratio = t.distance(&online) / (eta.powi(50) * d0);
            assert!((ratio - 1.0).abs() < 1e-6, "{ratio}");
        }
    }
}
