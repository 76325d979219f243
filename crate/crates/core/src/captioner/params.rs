use ndarray::{Array1, Array2};
use rand::Rng;

use super::CaptionerConfig;

macro_rules! parameter_set {
    ($($name:ident: $kind:ident),* $(,)?) => {
        /// Every learnable tensor of the captioner. Matrices act on row vectors (`x · W`).
        #[derive(Debug, Clone, PartialEq)]
        pub struct Params {
            $(pub $name: parameter_set!(@ty $kind),)*
        }

        impl Params {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
                vec![$((stringify!($name), self.$name.as_slice().expect("standard layout"))),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
                vec![$((stringify!($name), self.$name.as_slice_mut().expect("standard layout"))),*]
            }

            pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
                vec![$((stringify!($name), self.$name.shape().to_vec())),*]
            }

            pub fn zeros_like(&self) -> Params {
                Params {
                    $($name: parameter_set!(@zeros $kind, self.$name),)*
                }
            }
        }
    };
    (@ty mat) => { Array2<f64> };
    (@ty vec) => { Array1<f64> };
    (@zeros mat, $e:expr) => { Array2::zeros($e.raw_dim()) };
    (@zeros vec, $e:expr) => { Array1::zeros($e.raw_dim()) };
}

parameter_set! {
    conv0_w: mat, conv0_b: vec,
    conv1_w: mat, conv1_b: vec,
    conv2_w: mat, conv2_b: vec,
    conv3_w: mat, conv3_b: vec,
    init_h_w: mat, init_h_b: vec,
    init_c_w: mat, init_c_b: vec,
    att_feat_w: mat, att_b: vec,
    att_hidden_w: mat, att_score_w: vec,
    embed: mat,
    lstm_x_w: mat, lstm_h_w: mat, lstm_b: vec,
    out_w: mat, out_b: vec,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

impl Params {
    /// Random initialization: He-uniform for the ReLU conv stack, Glorot-uniform
    /// elsewhere, zero biases, forget-gate bias 1.
    pub fn init(cfg: &CaptionerConfig, vocab_size: usize, rng: &mut impl Rng) -> Params {
        let ch = cfg.conv_channels();
        let conv = |rng: &mut _, i: usize| {
            let fan_in = ch[i] * 9;
            uniform(rng, fan_in, ch[i + 1], (6.0 / fan_in as f64).sqrt())
        };
        let glorot = |rng: &mut _, r: usize, c: usize| uniform(rng, r, c, (6.0 / (r + c) as f64).sqrt());
        let (d, h, e, a) = (cfg.feature_dim, cfg.hidden, cfg.embed, cfg.attn);
        let mut lstm_b = Array1::zeros(4 * h);
        lstm_b.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
        Params {
            conv0_w: conv(rng, 0),
            conv0_b: Array1::zeros(ch[1]),
            conv1_w: conv(rng, 1),
            conv1_b: Array1::zeros(ch[2]),
            conv2_w: conv(rng, 2),
            conv2_b: Array1::zeros(ch[3]),
            conv3_w: conv(rng, 3),
            conv3_b: Array1::zeros(ch[4]),
            init_h_w: glorot(rng, d, h),
            init_h_b: Array1::zeros(h),
            init_c_w: glorot(rng, d, h),
            init_c_b: Array1::zeros(h),
            att_feat_w: glorot(rng, d, a),
            att_b: Array1::zeros(a),
            att_hidden_w: glorot(rng, h, a),
            att_score_w: Array1::from_shape_fn(a, |_| rng.gen_range(-0.5..0.5)),
            embed: uniform(rng, vocab_size, e, 0.5),
            lstm_x_w: glorot(rng, e + d, 4 * h),
            lstm_h_w: glorot(rng, h, 4 * h),
            lstm_b,
            out_w: glorot(rng, h, vocab_size),
            out_b: Array1::zeros(vocab_size),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
