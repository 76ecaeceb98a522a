//! Accumulator state and per-parameter "Ada" features computed from the
//! averaged worker delta.
//!
//! Feature columns, in order (this order is part of the checkpoint format):
//!
//! | cols    | feature                                              |
//! |---------|------------------------------------------------------|
//! | 0       | parameter value `w`                                  |
//! | 1..=3   | momenta `m_i`, decays beta1..beta3                   |
//! | 4       | second moment `v`, decay beta4                       |
//! | 5..=7   | `m_i / sqrt(v)`                                      |
//! | 8       | `1 / sqrt(v)`                                        |
//! | 9..=11  | `delta * row_factor_i * col_factor_i`                |
//! | 12..=14 | row accumulators `r_i` tiled, decays beta5..beta7    |
//! | 15..=17 | column accumulators `c_i` tiled                      |
//! | 18..=20 | `1 / sqrt(r_i)` tiled                                |
//! | 21..=23 | `1 / sqrt(c_i)` tiled                                |
//! | 24..=26 | `m_i * row_factor_i * col_factor_i`                  |
//! | 27..=37 | `tanh(t / x)` for the 11 timescales below            |
//!
//! Row/column statistics are per tensor on its 2-D fold (leading dims become
//! rows, the last dim columns; a vector of length n is n x 1). With
//! `row_factor = 1/sqrt(r / mean(r))` and `col_factor = 1/sqrt(c)` the
//! product is the Adafactor estimate of `1/sqrt(v)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fold_2d, ModelParams};

pub const NUM_FEATURES: usize = 38;
/// Columns `0..NUM_NORMALIZED` are RMS-normalized per tensor.
pub const NUM_NORMALIZED: usize = 27;
pub const TIMESTEP_SCALES: [f64; 11] = [
    1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 3e3, 1e4, 3e4, 1e5,
];
pub const EPS: f64 = 1e-8;

pub mod col {
    pub const PARAM: usize = 0;
    pub const MOMENTUM: usize = 1;
    pub const SECOND_MOMENT: usize = 4;
    pub const MOMENTUM_OVER_RMS: usize = 5;
    pub const RSQRT_V: usize = 8;
    pub const DELTA_FACTORED: usize = 9;
    pub const ROW: usize = 12;
    pub const COL: usize = 15;
    pub const RSQRT_ROW: usize = 18;
    pub const RSQRT_COL: usize = 21;
    pub const MOMENTUM_FACTORED: usize = 24;
    pub const TIMESTEP: usize = 27;
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// beta1..beta7 in (0, 1), obtained from unconstrained raw values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayCoeffs(pub [f64; 7]);

impl DecayCoeffs {
    pub const INITIAL: [f64; 7] = [0.1, 0.5, 0.9, 0.999, 0.1, 0.5, 0.9];

    pub fn from_raw(raw: &[f64; 7]) -> Self {
        Self(raw.map(sigmoid))
    }

    pub fn initial_raw() -> [f64; 7] {
        Self::INITIAL.map(logit)
    }

    pub fn momentum(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn second_moment(&self) -> f64 {
        self.0[3]
    }

    pub fn factored(&self, i: usize) -> f64 {
        self.0[4 + i]
    }
}

impl Default for DecayCoeffs {
    fn default() -> Self {
        Self(Self::INITIAL)
    }
}

/// Accumulators carried between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateState {
    pub momenta: [ModelParams; 3],
    pub second_moment: ModelParams,
    /// `rows[i][tensor]` has one entry per folded row.
    pub rows: [Vec<Vec<f64>>; 3],
    /// `cols[i][tensor]` has one entry per folded column.
    pub cols: [Vec<Vec<f64>>; 3],
    pub t: u64,
}

/// All-zero accumulators shaped like `like`, with `t = 0`.
pub fn init_state(like: &ModelParams) -> AggregateState {
    let zeros = ModelParams::zeros_like(like);
    let (rows, cols): (Vec<_>, Vec<_>) = like
        .tensors()
        .map(|t| {
            let (r, c) = t.fold_2d();
            (vec![0.0; r], vec![0.0; c])
        })
        .unzip();
    AggregateState {
        momenta: [zeros.clone(), zeros.clone(), zeros.clone()],
        second_moment: zeros,
        rows: [rows.clone(), rows.clone(), rows],
        cols: [cols.clone(), cols.clone(), cols],
        t: 0,
    }
}

impl AggregateState {
    /// Folds one round's averaged delta into the accumulators and advances `t`.
    pub fn update(&mut self, delta: &ModelParams, betas: &DecayCoeffs) -> Result<()> {
        self.second_moment.check_compatible(delta)?;
        for i in 0..3 {
            let b = betas.momentum(i);
            for (m, d) in self.momenta[i].tensors_mut().zip(delta.tensors()) {
                for (mv, &dv) in m.data_mut().iter_mut().zip(d.data()) {
                    *mv = b * *mv + (1.0 - b) * dv;
                }
            }
        }
        let b4 = betas.second_moment();
        for (v, d) in self.second_moment.tensors_mut().zip(delta.tensors()) {
            for (vv, &dv) in v.data_mut().iter_mut().zip(d.data()) {
                *vv = b4 * *vv + (1.0 - b4) * dv * dv;
            }
        }
        for (ti, d) in delta.tensors().enumerate() {
            let (nr, nc) = d.fold_2d();
            let mut row_mean = vec![0.0; nr];
            let mut col_mean = vec![0.0; nc];
            for (r, chunk) in d.data().chunks_exact(nc).enumerate() {
                for (c, &x) in chunk.iter().enumerate() {
                    row_mean[r] += x * x;
                    col_mean[c] += x * x;
                }
            }
            row_mean.iter_mut().for_each(|v| *v /= nc as f64);
            col_mean.iter_mut().for_each(|v| *v /= nr as f64);
            for i in 0..3 {
                let b = betas.factored(i);
                for (acc, &x) in self.rows[i][ti].iter_mut().zip(&row_mean) {
                    *acc = b * *acc + (1.0 - b) * x;
                }
                for (acc, &x) in self.cols[i][ti].iter_mut().zip(&col_mean) {
                    *acc = b * *acc + (1.0 - b) * x;
                }
            }
        }
        self.t += 1;
        Ok(())
    }
}

/// Pure form of [`AggregateState::update`].
pub fn update_state(u: &AggregateState, delta: &ModelParams, betas: &DecayCoeffs) -> Result<AggregateState> {
    let mut next = u.clone();
    next.update(delta, betas)?;
    Ok(next)
}

/// `P x ncols` row-major features for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFeatures {
    pub ncols: usize,
    pub data: Vec<f64>,
}

impl TensorFeatures {
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.ncols
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.ncols..(p + 1) * self.ncols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.iter().skip(j).step_by(self.ncols).copied().collect()
    }
}

/// Per-tensor feature rows, in [`ModelParams`] entry order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub tensors: Vec<TensorFeatures>,
}

impl FeatureMatrix {
    pub fn ncols(&self) -> usize {
        self.tensors.first().map_or(NUM_FEATURES, |t| t.ncols)
    }
}

pub fn timestep_features(t: u64) -> [f64; 11] {
    TIMESTEP_SCALES.map(|x| (t as f64 / x).tanh())
}

/// Un-normalized feature rows. `u` must already include this round's delta.
pub fn compute_features(w: &ModelParams, u: &AggregateState, delta: &ModelParams) -> Result<FeatureMatrix> {
    w.check_compatible(delta)?;
    u.second_moment.check_compatible(w)?;
    let ts = timestep_features(u.t);
    let mut tensors = Vec::with_capacity(w.num_tensors());
    for (ti, (wt, dt)) in w.tensors().zip(delta.tensors()).enumerate() {
        let (nr, nc) = fold_2d(wt.shape());
        let p_count = wt.len();
        let mut data = vec![0.0; p_count * NUM_FEATURES];

        let mut row_fac = [vec![0.0; nr], vec![0.0; nr], vec![0.0; nr]];
        let mut col_fac = [vec![0.0; nc], vec![0.0; nc], vec![0.0; nc]];
        for i in 0..3 {
            let rows = &u.rows[i][ti];
            let cols = &u.cols[i][ti];
            if rows.len() != nr || cols.len() != nc {
                return Err(Error::Shape(format!("row/col accumulators for tensor {ti}")));
            }
            let mean_r = rows.iter().sum::<f64>() / nr as f64;
            for (f, &r) in row_fac[i].iter_mut().zip(rows) {
                *f = 1.0 / (r / (mean_r + EPS) + EPS).sqrt();
            }
            for (f, &c) in col_fac[i].iter_mut().zip(cols) {
                *f = 1.0 / (c + EPS).sqrt();
            }
        }

        let m = [
            u.momenta[0].tensor(ti).data(),
            u.momenta[1].tensor(ti).data(),
            u.momenta[2].tensor(ti).data(),
        ];
        let v = u.second_moment.tensor(ti).data();
        for (p, row) in data.chunks_exact_mut(NUM_FEATURES).enumerate() {
            let (r, c) = (p / nc, p % nc);
            let rsqrt_v = 1.0 / (v[p] + EPS).sqrt();
            row[col::PARAM] = wt.data()[p];
            row[col::SECOND_MOMENT] = v[p];
            row[col::RSQRT_V] = rsqrt_v;
            for i in 0..3 {
                let fac = row_fac[i][r] * col_fac[i][c];
                row[col::MOMENTUM + i] = m[i][p];
                row[col::MOMENTUM_OVER_RMS + i] = m[i][p] * rsqrt_v;
                row[col::DELTA_FACTORED + i] = dt.data()[p] * fac;
                row[col::ROW + i] = u.rows[i][ti][r];
                row[col::COL + i] = u.cols[i][ti][c];
                row[col::RSQRT_ROW + i] = 1.0 / (u.rows[i][ti][r] + EPS).sqrt();
                row[col::RSQRT_COL + i] = 1.0 / (u.cols[i][ti][c] + EPS).sqrt();
                row[col::MOMENTUM_FACTORED + i] = m[i][p] * fac;
            }
            row[col::TIMESTEP..].copy_from_slice(&ts);
        }
        tensors.push(TensorFeatures {
            ncols: NUM_FEATURES,
            data,
        });
    }
    Ok(FeatureMatrix { tensors })
}

/// `x / (rms(x) + eps)`; an all-zero input stays zero.
pub fn rms_normalize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (ms.sqrt() + EPS);
    x.iter_mut().for_each(|v| *v *= scale);
}

/// Divides each non-timestep column by its per-tensor RMS.
pub fn normalize_features(mut f: FeatureMatrix) -> FeatureMatrix {
    for t in &mut f.tensors {
        let n = t.num_rows();
        let ncols = t.ncols;
        let mut ms = [0.0; NUM_NORMALIZED];
        for row in t.data.chunks_exact(ncols) {
            for (acc, &x) in ms.iter_mut().zip(&row[..NUM_NORMALIZED]) {
                *acc += x * x;
            }
        }
        let scale = ms.map(|s| 1.0 / ((s / n as f64).sqrt() + EPS));
        for row in t.data.chunks_exact_mut(ncols) {
            for (x, s) in row[..NUM_NORMALIZED].iter_mut().zip(&scale) {
                *x *= s;
            }
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(shapes: &[&[usize]]) -> ModelParams {
        ModelParams::new(
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("t{i}"), Tensor::zeros(s)))
                .collect(),
        )
    }

    #[test]
    fn init_state_is_zero_and_shaped() {
        let like = params(&[&[4, 3], &[3], &[3, 3, 2, 5]]);
        let u = init_state(&like);
        assert_eq!(u.t, 0);
        assert!(u.second_moment.check_compatible(&like).is_ok());
        let rows: Vec<usize> = u.rows[0].iter().map(Vec::len).collect();
        let cols: Vec<usize> = u.cols[2].iter().map(Vec::len).collect();
        assert_eq!(rows, vec![4, 3, 18]);
        assert_eq!(cols, vec![3, 1, 5]);
        assert!(u.momenta.iter().all(|m| m.flatten().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_delta_is_pure_decay() {
        let like = params(&[&[2, 2]]);
        let mut u = init_state(&like);
        u.momenta[0].tensor_mut(0).data_mut().fill(1.0);
        u.second_moment.tensor_mut(0).data_mut().fill(2.0);
        let betas = DecayCoeffs::default();
        let next = update_state(&u, &like, &betas).unwrap();
        assert!(next.momenta[0].flatten().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!(next.second_moment.flatten().iter().all(|&v| (v - 2.0 * 0.999).abs() < 1e-15));
        assert_eq!(next.t, 1);
        assert_eq!(u.t, 0);
    }

    #[test]
    fn scalar_momentum_step() {
        let like = params(&[&[1]]);
        let u = init_state(&like);
        let delta = ModelParams::new(vec![("t0".into(), Tensor::scalar_vec(&[1.0]))]);
        let betas = DecayCoeffs([0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let next = update_state(&u, &delta, &betas).unwrap();
        assert!((next.momenta[0].tensor(0).data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn row_means_of_squares() {
        let like = params(&[&[2, 2]]);
        let u = init_state(&like);
        let delta = ModelParams::new(vec![(
            "t0".into(),
            Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap(),
        )]);
        let betas = DecayCoeffs([0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0]);
        let next = update_state(&u, &delta, &betas).unwrap();
        assert_eq!(next.rows[0][0], vec![1.0, 9.0]);
        assert_eq!(next.cols[0][0], vec![5.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let u = init_state(&params(&[&[2, 2]]));
        assert!(update_state(&u, &params(&[&[2, 3]]), &DecayCoeffs::default()).is_err());
    }

    #[test]
    fn feature_catalog_width_and_timesteps() {
        let w = params(&[&[3, 2], &[2]]);
        let mut u = init_state(&w);
        u.update(&w, &DecayCoeffs::default()).unwrap();
        let f = compute_features(&w, &u, &w).unwrap();
        assert_eq!(f.ncols(), 38);
        let expected = timestep_features(1);
        for t in &f.tensors {
            for p in 0..t.num_rows() {
                assert_eq!(&t.row(p)[27..], &expected);
            }
        }
        assert_eq!(expected[0], 1f64.tanh());
        assert_eq!(expected[10], (1e-5f64).tanh());
    }

    #[test]
    fn degenerate_state_reciprocals() {
        let w = params(&[&[2, 2]]);
        let u = init_state(&w);
        let f = compute_features(&w, &u, &w).unwrap();
        let big = 1.0 / EPS.sqrt();
        for p in 0..4 {
            let row = f.tensors[0].row(p);
            for j in [col::MOMENTUM, col::SECOND_MOMENT, col::MOMENTUM_OVER_RMS, col::DELTA_FACTORED] {
                assert_eq!(row[j], 0.0);
            }
            for j in [col::RSQRT_V, col::RSQRT_ROW, col::RSQRT_COL] {
                assert!((row[j] - big).abs() < 1e-6 * big);
            }
        }
    }

    #[test]
    fn momentum_over_rms_value() {
        let w = params(&[&[1]]);
        let mut u = init_state(&w);
        u.momenta[0].tensor_mut(0).data_mut()[0] = 0.1;
        u.second_moment.tensor_mut(0).data_mut()[0] = 0.01;
        let f = compute_features(&w, &u, &w).unwrap();
        assert!((f.tensors[0].row(0)[col::MOMENTUM_OVER_RMS] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalization_examples() {
        let mut data = vec![0.0; 2 * NUM_FEATURES];
        data[0] = 3.0;
        data[NUM_FEATURES] = 4.0;
        data[1] = 2.5;
        data[NUM_FEATURES + 1] = 2.5;
        data[27] = 0.7;
        data[NUM_FEATURES + 27] = 0.7;
        let f = FeatureMatrix {
            tensors: vec![TensorFeatures {
                ncols: NUM_FEATURES,
                data,
            }],
        };
        let n = normalize_features(f);
        let c0 = n.tensors[0].column(0);
        assert!((c0[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-8);
        assert!((c0[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-8);
        assert!(n.tensors[0].column(1).iter().all(|v| (v - 1.0).abs() < 1e-8));
        assert!(n.tensors[0].column(2).iter().all(|&v| v == 0.0));
        assert_eq!(n.tensors[0].column(27), vec![0.7, 0.7]);
    }
}
