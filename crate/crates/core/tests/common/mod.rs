#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ppg_resp::dsp::{Scale, SegmentPair};
use ppg_resp::nn::{ConvBranch, Encoder, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixture model: two branches per encoder, hidden size 4.
pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        fine_kernels: vec![3, 5],
        coarse_kernels: vec![3, 5],
        coarse_dilation: 2,
        branch_channels: 2,
        hidden: 4,
        time_dim: 8,
        lambda_ppg: 1.0,
    }
}

/// Random parameters including non-zero biases so every term is exercised.
pub fn random_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for a in p.arrays_mut() {
        a.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    p
}

pub fn pair(subject: &str, index: usize, len: usize, phase: f64) -> SegmentPair {
    let scale = Scale {
        offset: 0.0,
        span: 1.0,
        constant: false,
    };
    SegmentPair {
        subject_id: subject.into(),
        segment_index: index,
        ppg: (0..len).map(|i| 0.5 + 0.45 * (i as f64 * 0.21 + phase).sin()).collect(),
        resp: (0..len).map(|i| (i as f64 * 0.21 + phase).sin()).collect(),
        ppg_scale: scale,
        resp_scale: scale,
    }
}

/// `S * x` where `S[i][i + shift] = 1` inside the sequence.
fn shift_matrix(len: usize, shift: isize) -> DMatrix<f64> {
    DMatrix::from_fn(len, len, |i, j| if j as isize == i as isize + shift { 1.0 } else { 0.0 })
}

fn conv_oracle(b: &ConvBranch, x: &DVector<f64>) -> DMatrix<f64> {
    let len = x.len();
    let r = (b.kernel / 2) as isize;
    let mut out = DMatrix::zeros(b.out_channels, len);
    for o in 0..b.out_channels {
        let mut row = DVector::from_element(len, b.bias[o]);
        for k in 0..b.kernel {
            let w = b.weight[(o * b.in_channels) * b.kernel + k];
            row += shift_matrix(len, (k as isize - r) * b.dilation as isize) * x * w;
        }
        out.set_row(o, &row.transpose());
    }
    out
}

fn encoder_oracle(e: &Encoder, x: &DVector<f64>) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = e.branches.iter().map(|b| conv_oracle(b, x)).collect();
    let rows = blocks.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, x.len());
    let mut r0 = 0;
    for m in blocks {
        out.rows_mut(r0, m.nrows()).copy_from(&m);
        r0 += m.nrows();
    }
    out
}

/// Independent evaluation of the noise predictor with dense linear algebra,
/// following the architecture equations term by term.
pub fn predict_oracle(p: &ModelParams, y_t: &[f64], t: usize, x_ppg: &[f64]) -> Vec<f64> {
    let len = y_t.len();
    let x = DVector::from_column_slice(x_ppg);
    let y = DVector::from_column_slice(y_t);

    let fine = encoder_oracle(&p.fine_ppg, &x);
    let coarse = encoder_oracle(&p.coarse_ppg, &x);
    let proj_w = DMatrix::from_row_slice(p.coarse_proj.out_channels, p.coarse_proj.in_channels, &p.coarse_proj.weight);
    let mut proj = proj_w * coarse;
    for (o, b) in p.coarse_proj.bias.iter().enumerate() {
        proj.row_mut(o).add_scalar_mut(*b);
    }
    let f_ppg = fine + proj * p.config.lambda_ppg;
    let f_y = encoder_oracle(&p.fine_y, &y);

    let d = f_ppg.nrows() + f_y.nrows();
    let mut features = DMatrix::zeros(d, len);
    features.rows_mut(0, f_ppg.nrows()).copy_from(&f_ppg);
    features.rows_mut(f_ppg.nrows(), f_y.nrows()).copy_from(&f_y);

    let half = p.time.dim / 2;
    let emb = DVector::from_fn(p.time.dim, |k, _| {
        let w = 10000f64.powf(-((k % half) as f64) / half as f64);
        if k < half {
            (t as f64 * w).sin()
        } else {
            (t as f64 * w).cos()
        }
    });
    let time_w = DMatrix::from_row_slice(p.time.dim, p.time.out, &p.time.weight);
    let tau = time_w.transpose() * emb + DVector::from_column_slice(&p.time.bias);
    for mut col in features.column_iter_mut() {
        col += &tau;
    }

    let h = p.rnn.hidden;
    let w_in_f = DMatrix::from_row_slice(d, h, &p.rnn.w_in_fwd);
    let w_hh_f = DMatrix::from_row_slice(h, h, &p.rnn.w_hh_fwd);
    let w_in_b = DMatrix::from_row_slice(d, h, &p.rnn.w_in_bwd);
    let w_hh_b = DMatrix::from_row_slice(h, h, &p.rnn.w_hh_bwd);
    let b_f = DVector::from_column_slice(&p.rnn.b_fwd);
    let b_b = DVector::from_column_slice(&p.rnn.b_bwd);

    let mut fwd = vec![DVector::zeros(h); len];
    let mut state = DVector::zeros(h);
    for i in 0..len {
        let a = w_in_f.transpose() * features.column(i) + w_hh_f.transpose() * &state + &b_f;
        state = a.map(f64::tanh);
        fwd[i] = state.clone();
    }
    let mut bwd = vec![DVector::zeros(h); len];
    let mut state = DVector::zeros(h);
    for i in (0..len).rev() {
        let a = w_in_b.transpose() * features.column(i) + w_hh_b.transpose() * &state + &b_b;
        state = a.map(f64::tanh);
        bwd[i] = state.clone();
    }
    let head_f = DVector::from_column_slice(&p.rnn.head_w[..h]);
    let head_b = DVector::from_column_slice(&p.rnn.head_w[h..]);
    (0..len)
        .map(|i| head_f.dot(&fwd[i]) + head_b.dot(&bwd[i]) + p.rnn.head_b[0])
        .collect()
}
