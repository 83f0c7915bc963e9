//! Reference forecasters: last-value naive, seasonal naive with a residual
//! bootstrap envelope, and bottom-up aggregation of arbitrary samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{anchor_value, HierDataset};
use crate::error::{Error, Result};
use crate::factor::SampleBlock;
use crate::hierarchy::AggregationMatrix;

/// Last observation before `t0` repeated over the horizon, for every
/// hierarchy row, `[N, N_h]`.
pub fn naive_forecast(data: &HierDataset, s: &AggregationMatrix, t0: usize, horizon: usize) -> Result<Vec<f64>> {
    if t0 == 0 || t0 > data.len() {
        return Err(Error::Data(format!("no observation before position {} of {}", t0, data.len())));
    }
    let bottom: Vec<f64> = (0..data.n_bottom())
        .flat_map(|b| std::iter::repeat_n(data.series(b)[t0 - 1], horizon))
        .collect();
    s.aggregate(&bottom, horizon)
}

/// Aggregate `[N_b, N_h, N_s]` bottom samples to all rows, optionally
/// clipping at zero first.
pub fn bottom_up(bottom: &SampleBlock, s: &AggregationMatrix, clip: bool) -> Result<SampleBlock> {
    if bottom.n_rows != s.n_bottom() {
        return Err(Error::shape("bottom_up", format!("{} sample rows for {} bottom series", bottom.n_rows, s.n_bottom())));
    }
    let width = bottom.n_horizons * bottom.n_samples;
    let values: Vec<f64> = if clip {
        bottom.values.iter().map(|v| v.max(0.0)).collect()
    } else {
        bottom.values.clone()
    };
    SampleBlock::new(s.n_rows(), bottom.n_horizons, bottom.n_samples, s.aggregate(&values, width)?)
}

/// Seasonal naive point forecast plus bootstrapped in-sample seasonal-naive
/// residuals. One residual date is drawn per (horizon, sample) and shared by
/// all series, which keeps their cross-sectional dependence.
pub fn seasonal_naive_empirical(
    data: &HierDataset,
    s: &AggregationMatrix,
    t0: usize,
    horizon: usize,
    period: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SampleBlock> {
    if period == 0 || t0 < 2 * period || t0 > data.len() {
        return Err(Error::Data(format!(
            "seasonal naive needs two full seasons ({} steps) before the forecast origin, got {}",
            2 * period,
            t0
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    let nb = data.n_bottom();
    let dates: Vec<usize> = (period..t0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..horizon * n_samples).map(|_| dates[rng.random_range(0..dates.len())]).collect();
    let mut bottom = vec![0.0; nb * horizon * n_samples];
    for b in 0..nb {
        let y = data.series(b);
        for h in 0..horizon {
            let point = anchor_value(y, t0 + h, t0, period);
            for i in 0..n_samples {
                let tau = picks[h * n_samples + i];
                bottom[(b * horizon + h) * n_samples + i] = point + y[tau] - y[tau - period];
            }
        }
    }
    bottom_up(&SampleBlock::new(nb, horizon, n_samples, bottom)?, s, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::halves_hierarchy;
    use crate::hierarchy::LevelMask;
    use crate::scoring::{rel_se, scrps};

    fn periodic(nb: usize, t: usize, p: usize) -> HierDataset {
        let spec = halves_hierarchy(nb);
        let values = (0..nb).flat_map(|b| (0..t).map(move |i| 1.0 + b as f64 + (i % p) as f64)).collect();
        HierDataset {
            spec,
            timestamps: (0..t).map(|i| i.to_string()).collect(),
            values,
            exog_names: vec![],
            exog: vec![],
            static_names: vec![],
            static_values: vec![],
        }
    }

    #[test]
    fn naive_repeats_last_value_coherently() {
        let mut ds = periodic(4, 20, 4);
        ds.values[9] = 7.0; // series 0, t = 9
        let s = AggregationMatrix::build(&ds.spec).unwrap();
        let f = naive_forecast(&ds, &s, 10, 3).unwrap();
        let row0 = s.n_aggregate();
        assert_eq!(&f[row0 * 3..row0 * 3 + 3], &[7.0, 7.0, 7.0]);
        for r in 0..s.n_aggregate() {
            for h in 0..3 {
                let sum: f64 = s.members(r).iter().map(|&b| f[(row0 + b) * 3 + h]).sum();
                assert_eq!(f[r * 3 + h], sum);
            }
        }
        let targets = ds.aggregated(&s, 10..13).unwrap();
        let last: Vec<f64> = (0..s.n_rows()).map(|r| f[r * 3]).collect();
        let v = rel_se(&targets, &f, &last, &LevelMask::overall(s.n_rows())).unwrap();
        assert_eq!(v, 1.0);
        assert!(naive_forecast(&ds, &s, 0, 3).is_err());
    }

    #[test]
    fn periodic_series_have_degenerate_envelopes() {
        let ds = periodic(4, 40, 6);
        let s = AggregationMatrix::build(&ds.spec).unwrap();
        let block = seasonal_naive_empirical(&ds, &s, 30, 6, 6, 50, 1).unwrap();
        let targets = ds.aggregated(&s, 30..36).unwrap();
        for r in 0..s.n_rows() {
            for h in 0..6 {
                assert!(block.cell(r, h).iter().all(|&v| v == targets[r * 6 + h]));
            }
        }
        assert_eq!(scrps(&targets, &block, &s.overall_mask()).unwrap(), 0.0);
        assert!(seasonal_naive_empirical(&ds, &s, 11, 6, 6, 50, 1).is_err());
    }

    #[test]
    fn envelopes_are_nonnegative_and_coherent() {
        let (ds, _) = crate::data::make_synthetic(6, 120, 1, 5).unwrap();
        let s = AggregationMatrix::build(&ds.spec).unwrap();
        let block = seasonal_naive_empirical(&ds, &s, 100, 12, 12, 200, 2).unwrap();
        assert!(block.values.iter().all(|&v| v >= 0.0));
        assert!(block.max_coherence_error(&s) <= 1e-9);
    }

    #[test]
    fn bottom_up_cases() {
        let ds = periodic(4, 10, 2);
        let s = AggregationMatrix::build(&ds.spec).unwrap();
        let zero = SampleBlock::new(4, 2, 3, vec![0.0; 24]).unwrap();
        assert!(bottom_up(&zero, &s, true).unwrap().values.iter().all(|&v| v == 0.0));
        let vals: Vec<f64> = (0..24).map(|i| (i as f64 * 0.77).sin() * 3.0).collect();
        let raw = SampleBlock::new(4, 2, 3, vals.clone()).unwrap();
        let agg = bottom_up(&raw, &s, false).unwrap();
        for r in 0..s.n_aggregate() {
            for h in 0..2 {
                for i in 0..3 {
                    let sum: f64 = s.members(r).iter().map(|&b| vals[(b * 2 + h) * 3 + i]).sum();
                    assert!((agg.cell(r, h)[i] - sum).abs() <= 1e-12);
                }
            }
        }
        assert!(bottom_up(&SampleBlock::new(3, 2, 3, vec![0.0; 18]).unwrap(), &s, true).is_err());
    }

    #[test]
    fn bottom_up_reproduces_factor_samples() {
        use crate::factor::{draw_noise, sample, FactorParams};
        use crate::tensor::Tape;
        let ds = periodic(4, 10, 2);
        let s = AggregationMatrix::build(&ds.spec).unwrap();
        let tape = Tape::new();
        let mu = vec![0.5, -0.2, 1.0, 0.1, 0.3, 0.0, -1.0, 2.0];
        let p = FactorParams::constant(&tape, (4, 1, 2), mu, vec![1.0; 8], vec![0.5; 8]).unwrap();
        let set = sample(&p, &draw_noise(4, 1, 2, 64, 3).unwrap(), &s).unwrap();
        let ours = bottom_up(&set.bottom_raw_block(), &s, true).unwrap();
        let theirs = set.coherent_block();
        assert!(ours.values.iter().zip(&theirs.values).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}
