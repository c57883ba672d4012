//! Shift-sensitivity study: how much does each downsampling operator's
//! output move when the input shifts by one pixel?
//!
//! The study has two halves. A fixed worked example pins the classic
//! arithmetic exactly: max-pooling the alternating-pairs block gives
//! `[0,1,0,1]`, the same block shifted one column gives `[1,1,1,1]`, and
//! the width-wise average fusion of the split sub-patches with a constant
//! low-resolution row gives `[1/3, 1, 1/3, 1]`. A randomized half then
//! measures mean/max L2 output change under one-pixel periodic shifts of
//! binary grids, for max-pooling and for the bi-fusion mix with averaging
//! and with learned weights.

use crate::pyramid::blocks::{bfm_forward, BfmParams};
use crate::tensor::ops::{self, ConvParams};
use crate::tensor::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

use super::ExperimentError;

/// Side of the randomized binary input grids.
pub const GRID_PX: usize = 8;

/// Shift statistics for one downsampling operator.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorShift {
    pub operator: &'static str,
    /// Mean L2 distance between outputs on original and shifted inputs.
    pub mean_l2: f64,
    /// Largest such distance over all trials.
    pub max_l2: f64,
}

/// The worked example's exact outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftFixture {
    /// Max-pooled alternating-pairs block: `[0, 1, 0, 1]`.
    pub pooled: [f64; 4],
    /// Same block shifted one column left (a 1 enters on the right,
    /// continuing the period-4 pattern), then pooled: `[1, 1, 1, 1]`.
    pub pooled_shifted: [f64; 4],
    /// Average-weight fusion of the split sub-patches with a constant
    /// low-resolution row: `[1/3, 1, 1/3, 1]`.
    pub fused_average: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    pub seed: u64,
    pub n_trials: usize,
    pub fixture: ShiftFixture,
    /// Stats for max-pooling, average-weight fusion, learned fusion.
    pub operators: [OperatorShift; 3],
}

/// Computes the worked example. All three outputs are exact in f64.
pub fn classic_fixture() -> Result<ShiftFixture, ExperimentError> {
    let row = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    // One column to the left; the vacated last column continues the
    // period-4 pattern with a 1.
    let mut shifted = [0.0; 8];
    shifted[..7].copy_from_slice(&row[1..]);
    shifted[7] = 1.0;

    let two_rows = |r: &[f64; 8]| {
        let mut data = r.to_vec();
        data.extend_from_slice(r);
        Tensor4::from_vec(Shape4::new(1, 1, 2, 8), data).expect("2x8 block")
    };
    let (pooled, _) = ops::maxpool2(&two_rows(&row))?;
    let (pooled_shifted, _) = ops::maxpool2(&two_rows(&shifted))?;

    // Width-wise analog of the fusion mix on single-row maps: split the
    // high-resolution row into even/odd column sub-patches, bundle them
    // with the low-resolution row, and average the three channels.
    let fm_high = Tensor4::from_row(&row);
    let fm_low = Tensor4::from_row(&[1.0, 1.0, 1.0, 1.0]);
    let packed = ops::space_to_depth_w2(&fm_high)?;
    let bundle = ops::concat_channels(&[&packed, &fm_low])?;
    let mix = ConvParams::new(
        Tensor4::filled(Shape4::new(1, 3, 1, 1), 1.0 / 3.0),
        Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
        1,
        0,
    )?;
    let fused = ops::conv2d(&bundle, &mix)?;

    let four = |t: &Tensor4| -> [f64; 4] { t.data().try_into().expect("4 values") };
    Ok(ShiftFixture {
        pooled: four(&pooled),
        pooled_shifted: four(&pooled_shifted),
        fused_average: four(&fused),
    })
}

/// 2x2 block mean at stride 2: the smooth downsample feeding the fusion's
/// low-resolution input.
fn mean_pool2(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(out_shape);
    let mut i = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            for r in 0..s.h / 2 {
                for col in 0..s.w / 2 {
                    let top = 2 * r * s.w + 2 * col;
                    let bottom = top + s.w;
                    out.data_mut()[i] =
                        (src[top] + src[top + 1] + src[bottom] + src[bottom + 1]) / 4.0;
                    i += 1;
                }
            }
        }
    }
    out
}

/// One-pixel horizontal shift with periodic wrap: column `c` takes the
/// value of column `c + 1`.
fn shift_cols_periodic(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for r in 0..s.h {
                let src = x.plane(n, c);
                let row = &src[r * s.w..(r + 1) * s.w];
                let base = ((n * s.c + c) * s.h + r) * s.w;
                for col in 0..s.w {
                    out.data_mut()[base + col] = row[(col + 1) % s.w];
                }
            }
        }
    }
    out
}

fn l2(a: &Tensor4, b: &Tensor4) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Order-free reduction of per-trial distances: values are sorted before
/// summation, so mean and max are bitwise invariant to trial order.
pub(crate) fn reduce(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let max = *sorted.last().expect("at least one trial");
    (mean, max)
}

/// Runs the full study: the exact worked example plus `n_trials` random
/// binary grids, each compared against its one-pixel periodic shift under
/// the three operators. The learned fusion uses a single seeded weight
/// draw held fixed across trials.
pub fn shift_experiment(seed: u64, n_trials: usize) -> Result<ShiftReport, ExperimentError> {
    assert!(n_trials >= 1, "need at least one trial");
    let base = Rng::seeded(seed).fork("shift");
    let avg = BfmParams::average(1, 1)?;
    let learned = BfmParams::seeded(1, 1, &mut base.fork("bfm.learned"))?;

    let mut pool_l2 = Vec::with_capacity(n_trials);
    let mut avg_l2 = Vec::with_capacity(n_trials);
    let mut learned_l2 = Vec::with_capacity(n_trials);
    let mut grid_rng = base.fork("grids");
    for _ in 0..n_trials {
        let data: Vec<f64> = (0..GRID_PX * GRID_PX)
            .map(|_| grid_rng.below(2) as f64)
            .collect();
        let x = Tensor4::from_vec(Shape4::new(1, 1, GRID_PX, GRID_PX), data).expect("grid");
        let xs = shift_cols_periodic(&x);

        let (pooled, _) = ops::maxpool2(&x)?;
        let (pooled_s, _) = ops::maxpool2(&xs)?;
        pool_l2.push(l2(&pooled, &pooled_s));

        let low = mean_pool2(&x);
        let low_s = mean_pool2(&xs);
        avg_l2.push(l2(
            &bfm_forward(&x, &low, &avg)?,
            &bfm_forward(&xs, &low_s, &avg)?,
        ));
        learned_l2.push(l2(
            &bfm_forward(&x, &low, &learned)?,
            &bfm_forward(&xs, &low_s, &learned)?,
        ));
    }

    let stats = |name: &'static str, values: &[f64]| {
        let (mean_l2, max_l2) = reduce(values);
        OperatorShift {
            operator: name,
            mean_l2,
            max_l2,
        }
    };
    Ok(ShiftReport {
        seed,
        n_trials,
        fixture: classic_fixture()?,
        operators: [
            stats("maxpool2", &pool_l2),
            stats("bfm-average", &avg_l2),
            stats("bfm-learned", &learned_l2),
        ],
    })
}
