//! Minimal reverse-mode differentiation over coarse matrix operations.
//!
//! A [`Tape`] records the forward pass as a sequence of typed ops over
//! row-major `(batch, features)` matrices; [`Tape::backward`] replays it in
//! reverse and accumulates exact gradients for every parameter that was
//! touched. Ops are deliberately coarse (one node per LSTM cell step, fused
//! loss heads) so the tape stays small and the backward rules stay local.

use ndarray::{Array2, Axis};

use super::params::{ModelParams, GATES};
use crate::error::{Error, Result};
use crate::objectives::{PROB_FLOOR, R_CLAMP_DELTA};

pub type NodeId = usize;

/// `ln(1e-12)`; log-probabilities are floored here.
pub fn ln_floor() -> f64 {
    PROB_FLOOR.ln()
}

pub struct Tape {
    nodes: Vec<Node>,
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

enum Op {
    /// Embedding lookup; value is the gathered rows.
    Embed { ids: Vec<u32> },
    /// Pre-activation gates `x . w_ih + h_prev . w_hh + bias` for one layer.
    GateAffine { x: NodeId, h_prev: Option<NodeId>, layer: usize },
    /// LSTM cell nonlinearity; value is the new hidden state `h`.
    LstmCell { preact: NodeId, prev: Option<NodeId>, cache: CellCache },
    /// Output projection `h . w_out + b_out`; value is the logits.
    OutputAffine { h: NodeId },
    /// Per-row `-log softmax(logits)[target]`, floored at 1e-12.
    NllLoss { logits: NodeId, targets: Vec<u32>, log_probs: Array2<f64> },
    /// Per-row discriminator loss (Eq. 5 form); q0 rows enter as constants.
    DiscLoss {
        logits: NodeId,
        targets: Vec<u32>,
        q0: Array2<f64>,
        dq: Vec<f64>,
        dp: Vec<f64>,
    },
    /// Per-row fine-tuning loss `-log q_theta(w*) + t log t`; q0 and r enter
    /// as per-target constants.
    FinetuneLoss {
        logits: NodeId,
        targets: Vec<u32>,
        log_probs: Array2<f64>,
        nll: Vec<f64>,
        t_log_t: Vec<f64>,
        /// d(loss)/d(log q_theta(target)) per row.
        grad_factor: Vec<f64>,
    },
    /// Per-row softmax probability of the target word.
    TargetProb { logits: NodeId, targets: Vec<u32>, log_probs: Array2<f64> },
    /// Sum of squares of every model parameter; a 1x1 node.
    ParamSumSquares,
}

struct CellCache {
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn embed(&mut self, params: &ModelParams, ids: Vec<u32>) -> Result<NodeId> {
        let h = params.dims.hidden;
        let mut value = Array2::zeros((ids.len(), h));
        for (row, &id) in ids.iter().enumerate() {
            if id as usize > params.dims.vocab_size {
                return Err(Error::Invalid(format!(
                    "token id {id} out of range 0..={}",
                    params.dims.vocab_size
                )));
            }
            value.row_mut(row).assign(&params.embedding.row(id as usize));
        }
        Ok(self.push(value, Op::Embed { ids }))
    }

    pub fn gate_affine(
        &mut self,
        params: &ModelParams,
        x: NodeId,
        h_prev: Option<NodeId>,
        layer: usize,
    ) -> NodeId {
        let lp = &params.layers[layer];
        let mut value = self.nodes[x].value.dot(&lp.w_ih);
        if let Some(hp) = h_prev {
            value = value + self.nodes[hp].value.dot(&lp.w_hh);
        }
        value += &lp.bias;
        self.push(value, Op::GateAffine { x, h_prev, layer })
    }

    pub fn lstm_cell(&mut self, params: &ModelParams, preact: NodeId, prev: Option<NodeId>) -> NodeId {
        let h = params.dims.hidden;
        let pre = &self.nodes[preact].value;
        let batch = pre.nrows();
        debug_assert_eq!(pre.ncols(), GATES * h);
        let prev_c = prev.map(|p| match &self.nodes[p].op {
            Op::LstmCell { cache, .. } => &cache.c,
            _ => panic!("prev of an LstmCell must be an LstmCell"),
        });
        let mut i = Array2::zeros((batch, h));
        let mut f = Array2::zeros((batch, h));
        let mut g = Array2::zeros((batch, h));
        let mut o = Array2::zeros((batch, h));
        let mut c = Array2::zeros((batch, h));
        let mut tanh_c = Array2::zeros((batch, h));
        let mut value = Array2::zeros((batch, h));
        {
            let pre_s = pre.as_slice().unwrap();
            let prev_s = prev_c.map(|p| p.as_slice().unwrap());
            let i_s = i.as_slice_mut().unwrap();
            let f_s = f.as_slice_mut().unwrap();
            let g_s = g.as_slice_mut().unwrap();
            let o_s = o.as_slice_mut().unwrap();
            let c_s = c.as_slice_mut().unwrap();
            let t_s = tanh_c.as_slice_mut().unwrap();
            let v_s = value.as_slice_mut().unwrap();
            for b in 0..batch {
                let row = &pre_s[b * GATES * h..(b + 1) * GATES * h];
                let base = b * h;
                for u in 0..h {
                    let iv = sigmoid(row[u]);
                    let fv = sigmoid(row[h + u]);
                    let gv = row[2 * h + u].tanh();
                    let ov = sigmoid(row[3 * h + u]);
                    let mut cv = iv * gv;
                    if let Some(p) = prev_s {
                        cv += fv * p[base + u];
                    }
                    let tc = cv.tanh();
                    i_s[base + u] = iv;
                    f_s[base + u] = fv;
                    g_s[base + u] = gv;
                    o_s[base + u] = ov;
                    c_s[base + u] = cv;
                    t_s[base + u] = tc;
                    v_s[base + u] = ov * tc;
                }
            }
        }
        self.push(
            value,
            Op::LstmCell { preact, prev, cache: CellCache { i, f, g, o, c, tanh_c } },
        )
    }

    pub fn output_affine(&mut self, params: &ModelParams, h: NodeId) -> NodeId {
        let mut value = self.nodes[h].value.dot(&params.w_out);
        value += &params.b_out;
        self.push(value, Op::OutputAffine { h })
    }

    /// Row-wise log-softmax of a logits node, via max-subtraction and
    /// log-sum-exp.
    pub fn log_softmax(&self, logits: NodeId) -> Array2<f64> {
        log_softmax_of(&self.nodes[logits].value)
    }

    /// Row-wise elementwise sigmoid of a logits node; the discriminator
    /// probability surface. Clamped into `[delta, 1-delta]` when requested.
    pub fn sigmoid_rows(&self, logits: NodeId, clamp: bool) -> Array2<f64> {
        let mut r = self.nodes[logits].value.mapv(sigmoid);
        if clamp {
            r.mapv_inplace(|v| v.clamp(R_CLAMP_DELTA, 1.0 - R_CLAMP_DELTA));
        }
        r
    }

    pub fn nll_loss(&mut self, logits: NodeId, targets: Vec<u32>) -> Result<NodeId> {
        let log_probs = self.log_softmax(logits);
        check_targets(&targets, log_probs.ncols())?;
        let floor = ln_floor();
        let value = Array2::from_shape_fn((targets.len(), 1), |(b, _)| {
            -log_probs[[b, targets[b] as usize - 1]].max(floor)
        });
        Ok(self.push(value, Op::NllLoss { logits, targets, log_probs }))
    }

    /// Discriminator loss per row: `-sum_w q0[w] ln r[w] - ln(1 - r[target])`
    /// with r = sigmoid(logits) clamped into `[delta, 1-delta]`. `q0` is a
    /// constant `(batch, V)` matrix; no gradient flows into it.
    pub fn disc_loss(&mut self, logits: NodeId, targets: Vec<u32>, q0: Array2<f64>) -> Result<NodeId> {
        let z = &self.nodes[logits].value;
        check_targets(&targets, z.ncols())?;
        if q0.dim() != z.dim() {
            return Err(Error::Invalid("q0 constant shape mismatch".into()));
        }
        let ln_delta = R_CLAMP_DELTA.ln();
        let batch = z.nrows();
        let mut dq = vec![0.0f64; batch];
        let mut dp = vec![0.0f64; batch];
        for b in 0..batch {
            let zrow = z.row(b);
            let q0row = q0.row(b);
            let mut acc = 0.0;
            for (won, &zv) in zrow.iter().enumerate() {
                // ln r = -softplus(-z), clamped below at ln(delta)
                let ln_r = (-softplus(-zv)).max(ln_delta);
                acc -= q0row[won] * ln_r;
            }
            dq[b] = acc;
            let zt = zrow[targets[b] as usize - 1];
            let ln_1mr = (-softplus(zt)).max(ln_delta);
            dp[b] = -ln_1mr;
        }
        let value = Array2::from_shape_fn((batch, 1), |(b, _)| dq[b] + dp[b]);
        Ok(self.push(value, Op::DiscLoss { logits, targets, q0, dq, dp }))
    }

    /// Fine-tuning loss per row with per-target constants `q0_t`, `r_t`
    /// (the frozen model probability and discriminator output at the target).
    pub fn finetune_loss(
        &mut self,
        logits: NodeId,
        targets: Vec<u32>,
        q0_t: &[f64],
        r_t: &[f64],
    ) -> Result<NodeId> {
        let log_probs = self.log_softmax(logits);
        check_targets(&targets, log_probs.ncols())?;
        let batch = targets.len();
        if q0_t.len() != batch || r_t.len() != batch {
            return Err(Error::Invalid("finetune constants length mismatch".into()));
        }
        let floor = ln_floor();
        let mut nll = vec![0.0f64; batch];
        let mut tlt = vec![0.0f64; batch];
        let mut grad_factor = vec![0.0f64; batch];
        for b in 0..batch {
            let lp_raw = log_probs[[b, targets[b] as usize - 1]];
            let floored = lp_raw <= floor;
            let lp = lp_raw.max(floor);
            nll[b] = -lp;
            let r = r_t[b].clamp(R_CLAMP_DELTA, 1.0 - R_CLAMP_DELTA);
            let ln_t = lp - q0_t[b].max(PROB_FLOOR).ln() + r.ln() - (1.0 - r).ln();
            let t = ln_t.exp();
            tlt[b] = if t == 0.0 { 0.0 } else { t * ln_t };
            grad_factor[b] = if floored { 0.0 } else { -1.0 + t * (ln_t + 1.0) };
        }
        let value = Array2::from_shape_fn((batch, 1), |(b, _)| nll[b] + tlt[b]);
        Ok(self.push(
            value,
            Op::FinetuneLoss { logits, targets, log_probs, nll, t_log_t: tlt, grad_factor },
        ))
    }

    /// Softmax probability of the target word per row; differentiable, used
    /// to extract `v = grad_theta q_theta(w*|c)`.
    pub fn target_prob(&mut self, logits: NodeId, targets: Vec<u32>) -> Result<NodeId> {
        let log_probs = self.log_softmax(logits);
        check_targets(&targets, log_probs.ncols())?;
        let value = Array2::from_shape_fn((targets.len(), 1), |(b, _)| {
            log_probs[[b, targets[b] as usize - 1]].exp()
        });
        Ok(self.push(value, Op::TargetProb { logits, targets, log_probs }))
    }

    /// `sum_p p^2` over every model parameter.
    pub fn param_sum_squares(&mut self, params: &ModelParams) -> NodeId {
        let value = Array2::from_elem((1, 1), params.sq_norm());
        self.push(value, Op::ParamSumSquares)
    }

    /// Sum of a `(batch, 1)` node's entries.
    pub fn sum(&self, id: NodeId) -> f64 {
        self.nodes[id].value.iter().sum()
    }

    /// Term breakdown sums for a disc-loss node: `(sum dq, sum dp)`.
    pub fn disc_terms(&self, id: NodeId) -> (f64, f64) {
        match &self.nodes[id].op {
            Op::DiscLoss { dq, dp, .. } => (dq.iter().sum(), dp.iter().sum()),
            _ => panic!("disc_terms on a non-disc node"),
        }
    }

    /// Term breakdown sums for a finetune-loss node: `(sum nll, sum t log t)`.
    pub fn finetune_terms(&self, id: NodeId) -> (f64, f64) {
        match &self.nodes[id].op {
            Op::FinetuneLoss { nll, t_log_t, .. } => (nll.iter().sum(), t_log_t.iter().sum()),
            _ => panic!("finetune_terms on a non-finetune node"),
        }
    }

    /// Reverse sweep. Each `(node, seed)` pair seeds `d(total)/d(entry) =
    /// seed` for every entry of that node's value; gradients for all reached
    /// parameters are accumulated into a zero-initialized mirror of `params`.
    pub fn backward(&self, params: &ModelParams, seeds: &[(NodeId, f64)]) -> ModelParams {
        let mut grads = ModelParams::zeros_like(params);
        let n = self.nodes.len();
        let mut grad: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        let mut cell_grad: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        for &(id, seed) in seeds {
            let shape = self.nodes[id].value.dim();
            add_grad(&mut grad, id, Array2::from_elem(shape, seed));
        }
        for idx in (0..n).rev() {
            let has_h = grad[idx].is_some();
            let has_c = cell_grad[idx].is_some();
            if !has_h && !has_c {
                continue;
            }
            let g = grad[idx].take();
            let gc = cell_grad[idx].take();
            match &self.nodes[idx].op {
                Op::Embed { ids } => {
                    let g = g.expect("embed node used only through h path");
                    for (row, &id) in ids.iter().enumerate() {
                        let mut dst = grads.embedding.row_mut(id as usize);
                        dst += &g.row(row);
                    }
                }
                Op::GateAffine { x, h_prev, layer } => {
                    let g = g.expect("gate affine used only through h path");
                    let lp = &params.layers[*layer];
                    let gl = &mut grads.layers[*layer];
                    gl.w_ih = &gl.w_ih + &self.nodes[*x].value.t().dot(&g);
                    add_grad(&mut grad, *x, g.dot(&lp.w_ih.t()));
                    if let Some(hp) = h_prev {
                        gl.w_hh = &gl.w_hh + &self.nodes[*hp].value.t().dot(&g);
                        add_grad(&mut grad, *hp, g.dot(&lp.w_hh.t()));
                    }
                    gl.bias = &gl.bias + &g.sum_axis(Axis(0));
                }
                Op::LstmCell { preact, prev, cache } => {
                    let batch = self.nodes[idx].value.nrows();
                    let h = cache.i.ncols();
                    let prev_c = prev.map(|p| match &self.nodes[p].op {
                        Op::LstmCell { cache, .. } => &cache.c,
                        _ => unreachable!(),
                    });
                    let mut dpre = Array2::zeros((batch, GATES * h));
                    let mut dc_prev =
                        prev.map(|_| Array2::<f64>::zeros((batch, h)));
                    {
                        let gh_s = g.as_ref().map(|a| a.as_slice().unwrap());
                        let gc_s = gc.as_ref().map(|a| a.as_slice().unwrap());
                        let i_s = cache.i.as_slice().unwrap();
                        let f_s = cache.f.as_slice().unwrap();
                        let g_s = cache.g.as_slice().unwrap();
                        let o_s = cache.o.as_slice().unwrap();
                        let t_s = cache.tanh_c.as_slice().unwrap();
                        let prev_s = prev_c.map(|p| p.as_slice().unwrap());
                        let dpre_s = dpre.as_slice_mut().unwrap();
                        let mut dcp_s =
                            dc_prev.as_mut().map(|a| a.as_slice_mut().unwrap());
                        for b in 0..batch {
                            let base = b * h;
                            let pre_base = b * GATES * h;
                            for u in 0..h {
                                let k = base + u;
                                // total cell gradient: direct contribution
                                // from the next step plus the h path through
                                // o * tanh(c)
                                let mut dc = gc_s.map_or(0.0, |s| s[k]);
                                let mut d_o = 0.0;
                                if let Some(gh) = gh_s {
                                    let tc = t_s[k];
                                    d_o = gh[k] * tc;
                                    dc += gh[k] * o_s[k] * (1.0 - tc * tc);
                                }
                                let iv = i_s[k];
                                let fv = f_s[k];
                                let gv = g_s[k];
                                let ov = o_s[k];
                                dpre_s[pre_base + u] = dc * gv * iv * (1.0 - iv);
                                dpre_s[pre_base + 2 * h + u] = dc * iv * (1.0 - gv * gv);
                                dpre_s[pre_base + 3 * h + u] = d_o * ov * (1.0 - ov);
                                if let Some(p) = prev_s {
                                    dpre_s[pre_base + h + u] =
                                        dc * p[k] * fv * (1.0 - fv);
                                }
                                if let Some(dcp) = dcp_s.as_deref_mut() {
                                    dcp[k] = dc * fv;
                                }
                            }
                        }
                    }
                    if let (Some(p), Some(dcp)) = (prev, dc_prev) {
                        add_cell_grad(&mut cell_grad, *p, dcp);
                    }
                    add_grad(&mut grad, *preact, dpre);
                }
                Op::OutputAffine { h } => {
                    let g = g.expect("output affine used only through h path");
                    grads.w_out = &grads.w_out + &self.nodes[*h].value.t().dot(&g);
                    grads.b_out = &grads.b_out + &g.sum_axis(Axis(0));
                    add_grad(&mut grad, *h, g.dot(&params.w_out.t()));
                }
                Op::NllLoss { logits, targets, log_probs } => {
                    let g = g.expect("loss node");
                    let floor = ln_floor();
                    let mut dlogits = Array2::zeros(log_probs.dim());
                    for (b, &target) in targets.iter().enumerate() {
                        let t = target as usize - 1;
                        if log_probs[[b, t]] <= floor {
                            continue; // floored: loss is constant in this row
                        }
                        let seed = g[[b, 0]];
                        for w in 0..log_probs.ncols() {
                            let softmax = log_probs[[b, w]].exp();
                            dlogits[[b, w]] = seed * (softmax - if w == t { 1.0 } else { 0.0 });
                        }
                    }
                    add_grad(&mut grad, *logits, dlogits);
                }
                Op::DiscLoss { logits, targets, q0, .. } => {
                    let g = g.expect("loss node");
                    let z = &self.nodes[*logits].value;
                    // clamp boundaries in logit space: sigma(z) in [delta, 1-delta]
                    let z_lo = (R_CLAMP_DELTA / (1.0 - R_CLAMP_DELTA)).ln();
                    let z_hi = -z_lo;
                    let mut dlogits = Array2::zeros(z.dim());
                    for (b, &target) in targets.iter().enumerate() {
                        let seed = g[[b, 0]];
                        for w in 0..z.ncols() {
                            let zv = z[[b, w]];
                            let r = sigmoid(zv);
                            // -q0 ln r term; zero once r is clamped at delta
                            if zv >= z_lo {
                                dlogits[[b, w]] += seed * (-q0[[b, w]] * (1.0 - r));
                            }
                            if w == target as usize - 1 && zv <= z_hi {
                                // -ln(1 - r) term at the observed word
                                dlogits[[b, w]] += seed * r;
                            }
                        }
                    }
                    add_grad(&mut grad, *logits, dlogits);
                }
                Op::FinetuneLoss { logits, targets, log_probs, grad_factor, .. } => {
                    let g = g.expect("loss node");
                    let mut dlogits = Array2::zeros(log_probs.dim());
                    for (b, &target) in targets.iter().enumerate() {
                        let t = target as usize - 1;
                        let factor = g[[b, 0]] * grad_factor[b];
                        if factor == 0.0 {
                            continue;
                        }
                        for w in 0..log_probs.ncols() {
                            let softmax = log_probs[[b, w]].exp();
                            dlogits[[b, w]] =
                                factor * (if w == t { 1.0 } else { 0.0 } - softmax);
                        }
                    }
                    add_grad(&mut grad, *logits, dlogits);
                }
                Op::TargetProb { logits, targets, log_probs } => {
                    let g = g.expect("loss node");
                    let mut dlogits = Array2::zeros(log_probs.dim());
                    for (b, &target) in targets.iter().enumerate() {
                        let t = target as usize - 1;
                        let q_t = log_probs[[b, t]].exp();
                        let factor = g[[b, 0]] * q_t;
                        for w in 0..log_probs.ncols() {
                            let softmax = log_probs[[b, w]].exp();
                            dlogits[[b, w]] =
                                factor * (if w == t { 1.0 } else { 0.0 } - softmax);
                        }
                    }
                    add_grad(&mut grad, *logits, dlogits);
                }
                Op::ParamSumSquares => {
                    let g = g.expect("loss node");
                    grads.add_scaled(params, 2.0 * g[[0, 0]]);
                }
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn add_grad(store: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut store[id] {
        Some(existing) => *existing = &*existing + &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn add_cell_grad(store: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    add_grad(store, id, delta);
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` computed without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_softmax_of(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_targets(targets: &[u32], vocab: usize) -> Result<()> {
    for &t in targets {
        if t == 0 || t as usize > vocab {
            return Err(Error::Invalid(format!("target word id {t} out of range 1..={vocab}")));
        }
    }
    Ok(())
}
