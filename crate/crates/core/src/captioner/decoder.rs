//! LSTM decoder with additive attention over feature positions.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::params::Params;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut e = v.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

fn outer_acc(acc: &mut Array2<f64>, col: ArrayView1<f64>, row: ArrayView1<f64>) {
    let c = col.insert_axis(Axis(1));
    let r = row.insert_axis(Axis(0));
    ndarray::linalg::general_mat_mul(1.0, &c, &r, 1.0, acc);
}

/// Per-image quantities that do not change across decoding steps.
pub(crate) struct Prepared {
    pub feats: Array2<f64>,
    /// `feats · att_feat_w + att_b`, one row per position.
    pub proj: Array2<f64>,
}

pub(crate) fn prepare(p: &Params, feats: Array2<f64>) -> Prepared {
    let mut proj = feats.dot(&p.att_feat_w);
    proj += &p.att_b;
    Prepared { feats, proj }
}

/// Initial hidden and cell state from the mean feature vector.
pub(crate) fn init_state(p: &Params, prep: &Prepared) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let mean = prep.feats.mean_axis(Axis(0)).expect("at least one position");
    let h = (mean.dot(&p.init_h_w) + &p.init_h_b).mapv(f64::tanh);
    let c = (mean.dot(&p.init_c_w) + &p.init_c_b).mapv(f64::tanh);
    (mean, h, c)
}

pub(crate) struct Step {
    pub h_prev: Array1<f64>,
    pub c_prev: Array1<f64>,
    pub token: usize,
    pub x: Array1<f64>,
    pub att_hidden: Array2<f64>,
    pub alpha: Array1<f64>,
    pub gates: Array1<f64>,
    pub c: Array1<f64>,
    pub tanh_c: Array1<f64>,
    pub h: Array1<f64>,
    pub probs: Array1<f64>,
}

/// One decoding step: attend, update the LSTM, predict the next token.
pub(crate) fn step(p: &Params, prep: &Prepared, h_prev: &Array1<f64>, c_prev: &Array1<f64>, token: usize) -> Step {
    let hsz = h_prev.len();
    let hid = h_prev.dot(&p.att_hidden_w);
    let att_hidden = (&prep.proj + &hid).mapv(f64::tanh);
    let scores = att_hidden.dot(&p.att_score_w);
    let alpha = softmax(scores.view());
    let context = alpha.dot(&prep.feats);

    let emb = p.embed.row(token);
    let mut x = Array1::zeros(emb.len() + context.len());
    x.slice_mut(s![..emb.len()]).assign(&emb);
    x.slice_mut(s![emb.len()..]).assign(&context);

    let pre = x.dot(&p.lstm_x_w) + h_prev.dot(&p.lstm_h_w) + &p.lstm_b;
    let mut gates = pre;
    gates.slice_mut(s![..3 * hsz]).mapv_inplace(sigmoid);
    gates.slice_mut(s![3 * hsz..]).mapv_inplace(f64::tanh);
    let (i, f, o, u) = (
        gates.slice(s![..hsz]),
        gates.slice(s![hsz..2 * hsz]),
        gates.slice(s![2 * hsz..3 * hsz]),
        gates.slice(s![3 * hsz..]),
    );
    let c = &f * c_prev + &i * &u;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    let logits = h.dot(&p.out_w) + &p.out_b;
    let probs = softmax(logits.view());
    Step {
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        token,
        x,
        att_hidden,
        alpha,
        gates,
        c,
        tanh_c,
        h,
        probs,
    }
}

/// Gradient flowing out of one step into the previous state, the features
/// and the attention projection.
pub(crate) struct StepGrads {
    pub dh_prev: Array1<f64>,
    pub dc_prev: Array1<f64>,
}

/// Backpropagate one step. `dlogits` is the loss gradient w.r.t. this step's
/// logits, `dalpha_extra` an additional gradient on the attention weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_backward(
    p: &Params,
    prep: &Prepared,
    st: &Step,
    dlogits: &Array1<f64>,
    dalpha_extra: Option<ArrayView1<f64>>,
    dh_next: &Array1<f64>,
    dc_next: &Array1<f64>,
    dfeats: &mut Array2<f64>,
    dproj: &mut Array2<f64>,
    g: &mut Params,
) -> StepGrads {
    let hsz = st.h.len();
    let esz = p.embed.ncols();

    outer_acc(&mut g.out_w, st.h.view(), dlogits.view());
    g.out_b += dlogits;
    let dh = dlogits.dot(&p.out_w.t()) + dh_next;

    let i = st.gates.slice(s![..hsz]);
    let f = st.gates.slice(s![hsz..2 * hsz]);
    let o = st.gates.slice(s![2 * hsz..3 * hsz]);
    let u = st.gates.slice(s![3 * hsz..]);

    let dc = &dh * &o * &st.tanh_c.mapv(|t| 1.0 - t * t) + dc_next;
    let mut dpre = Array1::zeros(4 * hsz);
    for k in 0..hsz {
        let di = dc[k] * u[k];
        let df = dc[k] * st.c_prev[k];
        let d_o = dh[k] * st.tanh_c[k];
        let du = dc[k] * i[k];
        dpre[k] = di * i[k] * (1.0 - i[k]);
        dpre[hsz + k] = df * f[k] * (1.0 - f[k]);
        dpre[2 * hsz + k] = d_o * o[k] * (1.0 - o[k]);
        dpre[3 * hsz + k] = du * (1.0 - u[k] * u[k]);
    }
    let dc_prev = &dc * &f;

    outer_acc(&mut g.lstm_x_w, st.x.view(), dpre.view());
    outer_acc(&mut g.lstm_h_w, st.h_prev.view(), dpre.view());
    g.lstm_b += &dpre;
    let dx = dpre.dot(&p.lstm_x_w.t());
    let mut dh_prev = dpre.dot(&p.lstm_h_w.t());

    let mut demb = g.embed.row_mut(st.token);
    demb += &dx.slice(s![..esz]);
    let dcontext = dx.slice(s![esz..]);

    // context = alpha · feats
    outer_acc(dfeats, st.alpha.view(), dcontext);
    let mut dalpha = prep.feats.dot(&dcontext);
    if let Some(extra) = dalpha_extra {
        dalpha += &extra;
    }
    let weighted = st.alpha.dot(&dalpha);
    let dscores = &st.alpha * &dalpha.mapv(|d| d - weighted);

    // scores = tanh(proj + h_prev · W) · w
    outer_acc_t(&mut g.att_score_w, &st.att_hidden, &dscores);
    let mut datt = Array2::zeros(st.att_hidden.raw_dim());
    for (pos, mut row) in datt.axis_iter_mut(Axis(0)).enumerate() {
        let th = st.att_hidden.row(pos);
        row.assign(&(&p.att_score_w * dscores[pos]));
        row.zip_mut_with(&th, |d, &t| *d *= 1.0 - t * t);
    }
    *dproj += &datt;
    let dhid = datt.sum_axis(Axis(0));
    outer_acc(&mut g.att_hidden_w, st.h_prev.view(), dhid.view());
    dh_prev += &dhid.dot(&p.att_hidden_w.t());

    StepGrads { dh_prev, dc_prev }
}

/// `acc += Σ_pos dscores[pos] * rows[pos]`
fn outer_acc_t(acc: &mut Array1<f64>, rows: &Array2<f64>, dscores: &Array1<f64>) {
    *acc += &dscores.dot(rows);
}

/// Backpropagate through the projection and initial-state maps once all steps are done.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_backward(
    p: &Params,
    prep: &Prepared,
    mean: &Array1<f64>,
    h0: &Array1<f64>,
    c0: &Array1<f64>,
    dh0: &Array1<f64>,
    dc0: &Array1<f64>,
    dproj: &Array2<f64>,
    mut dfeats: Array2<f64>,
    g: &mut Params,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &prep.feats.t(), dproj, 1.0, &mut g.att_feat_w);
    g.att_b += &dproj.sum_axis(Axis(0));
    dfeats += &dproj.dot(&p.att_feat_w.t());

    let dpre_h = dh0 * &h0.mapv(|t| 1.0 - t * t);
    let dpre_c = dc0 * &c0.mapv(|t| 1.0 - t * t);
    outer_acc(&mut g.init_h_w, mean.view(), dpre_h.view());
    outer_acc(&mut g.init_c_w, mean.view(), dpre_c.view());
    g.init_h_b += &dpre_h;
    g.init_c_b += &dpre_c;
    let dmean = dpre_h.dot(&p.init_h_w.t()) + dpre_c.dot(&p.init_c_w.t());
    let n = dfeats.nrows() as f64;
    dfeats += &(dmean / n);
    dfeats
}
