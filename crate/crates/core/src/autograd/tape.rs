//! Recording executor and reverse pass.
//!
//! The tape runs exactly the per-sample primitives of [`Eager`], so its
//! forward output is bitwise identical. Sign nodes remember their
//! pre-activation; in both sign modes their backward rule is the tanh
//! derivative. Binarized conv weights receive the straight-through gradient
//! `upstream * scale * 1{|w| <= 1}`.
//!
//! [`Eager`]: crate::units::Eager

use std::collections::BTreeMap;

use crate::binarize::{tanh_surrogate_unchecked, weight_ste_grad};
use crate::bitconv::{conv2d_fp_backward_input, conv2d_fp_backward_weight, ConvGeometry};
use crate::error::{Error, Result};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::units::exec::{self, Batch, BnMode, ConvSpec, Exec, Mode, Network, SignMode};
use crate::units::layers::{self, BnBatchStats, BnIds, RedistIds, RprIds, ViewScatter, BN_EPS};

/// Handle of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Redistribute { x: Var, p: RedistIds },
    Sign { x: Var, alpha: f64 },
    BinConv { x: Var, w: ParamId, g: ConvGeometry },
    FpConv { x: Var, w: ParamId, bias: Option<ParamId>, g: ConvGeometry },
    BnTrain { x: Var, p: BnIds, xhat: Batch, inv_std: Vec<f64> },
    BnEval { x: Var, p: BnIds },
    Rprelu { x: Var, p: RprIds },
    Add { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    Sigmoid { x: Var },
    ScaleChannels { x: Var, s: Var },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    ChannelPairMean { x: Var },
    Concat { a: Var, b: Var },
    Scatter { x: Var, scatter: Box<ViewScatter> },
}

struct Node {
    op: Op,
    value: Batch,
}

/// Batch-norm statistics observed during a training-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub ids: BnIds,
    pub stats: BnBatchStats,
}

/// Gradients keyed by parameter.
pub type Gradients = BTreeMap<ParamId, Tensor>;

/// Result of a reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub params: Gradients,
    /// Gradient with respect to each recorded input, in recording order.
    pub inputs: Vec<Batch>,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn input(&mut self, x: Batch) -> Result<Var> {
        if x.is_empty() {
            return Err(Error::EmptyTensor);
        }
        Ok(self.push(Op::Input, x))
    }

    fn push(&mut self, op: Op, value: Batch) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Result<&Batch> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::TapeMismatch(format!("variable {} not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> Result<&Batch> {
        self.val(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which side of its threshold every recorded RPReLU input fell on.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Rprelu { x, p } = &n.op {
                let gamma = self.store.data(p.gamma);
                for t in &self.nodes[x.0].value {
                    let plane = t.len() / gamma.len();
                    out.extend(t.data().iter().enumerate().map(|(i, &v)| v > gamma[i / plane]));
                }
            }
        }
        out
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }

    /// Reverse pass from `out` with upstream gradient `dy`.
    pub fn backward(&self, out: Var, dy: Batch) -> Result<Backward> {
        let out_val = self.val(out)?;
        if out_val.len() != dy.len() {
            return Err(Error::TapeMismatch(format!(
                "upstream gradient has {} samples, output {}",
                dy.len(),
                out_val.len()
            )));
        }
        for (a, b) in out_val.iter().zip(&dy) {
            if a.dims() != b.dims() {
                return Err(Error::TapeMismatch(format!(
                    "upstream gradient {:?} for output {:?}",
                    b.dims(),
                    a.dims()
                )));
            }
        }
        let mut grads: Vec<Option<Batch>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(dy);
        let mut params = Gradients::new();
        for id in self.touched_params() {
            params.insert(id, Tensor::zeros(self.store.tensor(id).dims())?);
        }
        let mut inputs = Vec::new();
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else {
                if matches!(self.nodes[i].op, Op::Input) {
                    inputs.push(self.nodes[i].value.iter().map(|t| Tensor::zeros(t.dims())).collect::<Result<_>>()?);
                }
                continue;
            };
            match &self.nodes[i].op {
                Op::Input => inputs.push(g),
                op => {
                    for (v, dx) in self.node_backward(op, i, &g, &mut params)? {
                        accumulate(&mut grads[v.0], dx)?;
                    }
                }
            }
        }
        inputs.reverse();
        Ok(Backward { params, inputs })
    }

    /// Trainable parameters read by recorded ops, in id order.
    fn touched_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Redistribute { p, .. } => ids.extend(p.ids()),
                Op::BinConv { w, .. } => ids.push(*w),
                Op::FpConv { w, bias, .. } => {
                    ids.push(*w);
                    ids.extend(bias);
                }
                Op::BnTrain { p, .. } | Op::BnEval { p, .. } => ids.extend(p.trainable()),
                Op::Rprelu { p, .. } => ids.extend(p.ids()),
                _ => {}
            }
        }
        ids.retain(|id| self.store.entry(*id).trainable);
        ids.sort();
        ids.dedup();
        ids
    }

    fn node_backward(
        &self,
        op: &Op,
        node: usize,
        g: &Batch,
        params: &mut Gradients,
    ) -> Result<Vec<(Var, Batch)>> {
        let store = self.store;
        let out = &self.nodes[node].value;
        Ok(match op {
            Op::Input => Vec::new(),
            Op::Redistribute { x, p } => {
                let xv = self.val(*x)?;
                let k = store.data(p.k);
                let dx = exec::map_batch(g, |d| channel_scale(d, k))?;
                let dk = channel_sums(&exec::zip_batch(g, xv, |d, xx| d.zip_map(xx, |a, b| a * b))?)?;
                let db = channel_sums(g)?;
                add_param(params, p.k, &dk)?;
                add_param(params, p.b, &db)?;
                vec![(*x, dx)]
            }
            Op::Sign { x, alpha } => {
                let a = *alpha;
                let dx = exec::zip_batch(g, self.val(*x)?, |d, xx| {
                    d.zip_map(xx, |dd, v| dd * tanh_surrogate_unchecked(v, a).1)
                })?;
                vec![(*x, dx)]
            }
            Op::BinConv { x, w, g: geom } => {
                let bp = store.expect_binary(*w)?;
                let wf = match self.mode.sign {
                    SignMode::Hard => bp.effective_weights(),
                    SignMode::Surrogate => bp.clipped_weights(),
                };
                let xv = self.val(*x)?;
                let dx = exec::map_batch(g, |d| conv2d_fp_backward_input(d, &wf, geom))?;
                let dws = exec::zip_batch(xv, g, |xx, d| conv2d_fp_backward_weight(xx, d, geom, -1.0))?;
                let dw = sum_batch(&dws)?;
                add_param(params, *w, &weight_ste_grad(&dw, bp)?)?;
                vec![(*x, dx)]
            }
            Op::FpConv { x, w, bias, g: geom } => {
                let wt = store.tensor(*w);
                let xv = self.val(*x)?;
                let dx = exec::map_batch(g, |d| conv2d_fp_backward_input(d, wt, geom))?;
                let dws = exec::zip_batch(xv, g, |xx, d| conv2d_fp_backward_weight(xx, d, geom, 0.0))?;
                add_param(params, *w, &sum_batch(&dws)?)?;
                if let Some(b) = bias {
                    add_param(params, *b, &channel_sums(g)?)?;
                }
                vec![(*x, dx)]
            }
            Op::BnTrain { x, p, xhat, inv_std } => {
                let gamma = store.data(p.weight);
                let dgamma = channel_sums(&exec::zip_batch(g, xhat, |d, xh| d.zip_map(xh, |a, b| a * b))?)?;
                let dbeta = channel_sums(g)?;
                let (_, h, w) = g[0].chw()?;
                let n = (h * w * g.len()) as f64;
                let scale: Vec<f64> = gamma.iter().zip(inv_std).map(|(a, b)| a * b / n).collect();
                let (dg, db) = (dgamma.data(), dbeta.data());
                let dx = exec::zip_batch(g, xhat, |d, xh| {
                    let mut out = d.clone();
                    let plane = h * w;
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        let c = i / plane;
                        *v = scale[c] * (n * *v - db[c] - xh.data()[i] * dg[c]);
                    }
                    Ok(out)
                })?;
                add_param(params, p.weight, &dgamma)?;
                add_param(params, p.bias, &dbeta)?;
                vec![(*x, dx)]
            }
            Op::BnEval { x, p } => {
                let gamma = store.data(p.weight);
                let mean = store.data(p.running_mean);
                let var = store.data(p.running_var);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let s: Vec<f64> = gamma.iter().zip(&inv).map(|(a, b)| a * b).collect();
                let xv = self.val(*x)?;
                let dx = exec::map_batch(g, |d| channel_scale(d, &s))?;
                let xhat = exec::map_batch(xv, |xx| {
                    let (_, h, w) = xx.chw()?;
                    let mut t = xx.clone();
                    for (i, v) in t.data_mut().iter_mut().enumerate() {
                        let c = i / (h * w);
                        *v = (*v - mean[c]) * inv[c];
                    }
                    Ok(t)
                })?;
                let dgamma = channel_sums(&exec::zip_batch(g, &xhat, |d, xh| d.zip_map(xh, |a, b| a * b))?)?;
                add_param(params, p.weight, &dgamma)?;
                add_param(params, p.bias, &channel_sums(g)?)?;
                vec![(*x, dx)]
            }
            Op::Rprelu { x, p } => {
                let view = p.view(store);
                let xv = self.val(*x)?;
                let parts = exec::zip_batch(g, xv, |d, y| {
                    // Rows: dx, dbeta, dgamma, dzeta (per element).
                    let (c, h, w) = y.chw()?;
                    let plane = h * w;
                    let mut t = Tensor::zeros(&[4, c, h, w])?;
                    let n = c * plane;
                    let td = t.data_mut();
                    for i in 0..n {
                        let ch = i / plane;
                        let (b, gm) = (view.beta[ch], view.gamma[ch]);
                        let (dd, yy) = (d.data()[i], y.data()[i]);
                        if yy > gm {
                            td[i] = dd;
                            td[2 * n + i] = -dd;
                        } else {
                            td[i] = b * dd;
                            td[n + i] = dd * (yy - gm);
                            td[2 * n + i] = -b * dd;
                        }
                        td[3 * n + i] = dd;
                    }
                    Ok(t)
                })?;
                let (c, h, w) = xv[0].chw()?;
                let n = c * h * w;
                let dx = parts
                    .iter()
                    .map(|t| Tensor::new(&[c, h, w], t.data()[..n].to_vec()))
                    .collect::<Result<Batch>>()?;
                for (row, id) in [(1, p.beta), (2, p.gamma), (3, p.zeta)] {
                    let rows = parts
                        .iter()
                        .map(|t| Tensor::new(&[c, h, w], t.data()[row * n..(row + 1) * n].to_vec()))
                        .collect::<Result<Batch>>()?;
                    add_param(params, id, &channel_sums(&rows)?)?;
                }
                vec![(*x, dx)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::GlobalAvgPool { x } => {
                let xv = self.val(*x)?;
                let dx = exec::zip_batch(g, xv, |d, xx| {
                    let (c, h, w) = xx.chw()?;
                    let n = (h * w) as f64;
                    Tensor::from_fn(&[c, h, w], |i| d.data()[i / (h * w)] / n)
                })?;
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let dx = exec::zip_batch(g, out, |d, s| d.zip_map(s, |dd, ss| dd * ss * (1.0 - ss)))?;
                vec![(*x, dx)]
            }
            Op::ScaleChannels { x, s } => {
                let xv = self.val(*x)?;
                let sv = self.val(*s)?;
                let dx = exec::zip_batch(g, sv, layers::scale_channels)?;
                let ds = exec::zip_batch(g, xv, |d, xx| {
                    let (c, h, w) = xx.chw()?;
                    let prod = d.zip_map(xx, |a, b| a * b)?;
                    let sums = prod.data().chunks(h * w).map(|ch| ch.iter().sum()).collect();
                    Tensor::new(&[c, 1, 1], sums)
                })?;
                vec![(*x, dx), (*s, ds)]
            }
            Op::AvgPool2 { x } => {
                let dx = exec::map_batch(g, |d| Ok(layers::upsample2(d)?.scale(0.25)))?;
                vec![(*x, dx)]
            }
            Op::Upsample2 { x } => {
                let dx = exec::map_batch(g, |d| Ok(layers::avg_pool2(d)?.scale(4.0)))?;
                vec![(*x, dx)]
            }
            Op::ChannelPairMean { x } => {
                let dx = exec::map_batch(g, |d| {
                    let (c, h, w) = d.chw()?;
                    let plane = h * w;
                    Tensor::from_fn(&[2 * c, h, w], |i| 0.5 * d.data()[(i / plane / 2) * plane + i % plane])
                })?;
                vec![(*x, dx)]
            }
            Op::Concat { a, b } => {
                let ca = self.val(*a)?[0].chw()?.0;
                let (mut da, mut db) = (Vec::with_capacity(g.len()), Vec::with_capacity(g.len()));
                for d in g {
                    let (c, h, w) = d.chw()?;
                    let split = ca * h * w;
                    da.push(Tensor::new(&[ca, h, w], d.data()[..split].to_vec())?);
                    db.push(Tensor::new(&[c - ca, h, w], d.data()[split..].to_vec())?);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scatter { x, scatter } => {
                let per_group = par::map_slice(g, |d| scatter.backward(d))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                vec![(*x, per_group.into_iter().flatten().collect())]
            }
        })
    }

}

fn accumulate(slot: &mut Option<Batch>, dx: Batch) -> Result<()> {
    match slot {
        None => *slot = Some(dx),
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&dx) {
                a.add_assign(d)?;
            }
        }
    }
    Ok(())
}

fn add_param(params: &mut Gradients, id: ParamId, g: &Tensor) -> Result<()> {
    match params.get_mut(&id) {
        Some(acc) => acc.add_assign(g),
        // Buffers are never differentiated.
        None => Ok(()),
    }
}

/// Sum over the batch, in sample order.
fn sum_batch(b: &[Tensor]) -> Result<Tensor> {
    let mut acc = b.first().ok_or(Error::EmptyTensor)?.clone();
    for t in &b[1..] {
        acc.add_assign(t)?;
    }
    Ok(acc)
}

/// Per-channel sums over samples and space, as a `(C,)` tensor.
fn channel_sums(b: &[Tensor]) -> Result<Tensor> {
    let (c, h, w) = b.first().ok_or(Error::EmptyTensor)?.chw()?;
    let mut out = vec![0.0; c];
    for t in b {
        for (ci, ch) in t.data().chunks(h * w).enumerate() {
            out[ci] += ch.iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], out)
}

fn channel_scale(d: &Tensor, s: &[f64]) -> Result<Tensor> {
    let (_, h, w) = d.chw()?;
    let mut out = d.clone();
    for (ci, ch) in out.data_mut().chunks_mut(h * w).enumerate() {
        ch.iter_mut().for_each(|v| *v *= s[ci]);
    }
    Ok(out)
}

impl Exec for Tape<'_> {
    type Val = Var;

    fn store(&self) -> &ParamStore {
        self.store
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn dims(&self, v: &Var) -> Result<Vec<usize>> {
        Ok(self.val(*v)?[0].dims().to_vec())
    }

    fn redistribute(&mut self, x: &Var, p: RedistIds) -> Result<Var> {
        let y = exec::redistribute_batch(self.store, self.val(*x)?, p)?;
        Ok(self.push(Op::Redistribute { x: *x, p }, y))
    }

    fn sign(&mut self, x: &Var, alpha: f64) -> Result<Var> {
        let y = exec::sign_batch(self.mode.sign, self.val(*x)?, alpha)?;
        Ok(self.push(Op::Sign { x: *x, alpha }, y))
    }

    fn bin_conv(&mut self, x: &Var, w: ParamId, spec: ConvSpec) -> Result<Var> {
        let (y, g) = exec::bin_conv_batch(self.store, self.mode.sign, self.val(*x)?, w, spec)?;
        Ok(self.push(Op::BinConv { x: *x, w, g }, y))
    }

    fn fp_conv(&mut self, x: &Var, w: ParamId, bias: Option<ParamId>, spec: ConvSpec) -> Result<Var> {
        let (y, g) = exec::fp_conv_batch(self.store, self.val(*x)?, w, bias, spec)?;
        Ok(self.push(Op::FpConv { x: *x, w, bias, g }, y))
    }

    fn batch_norm(&mut self, x: &Var, p: BnIds) -> Result<Var> {
        match self.mode.bn {
            BnMode::Eval => {
                let y = exec::bn_eval_batch(self.store, self.val(*x)?, p)?;
                Ok(self.push(Op::BnEval { x: *x, p }, y))
            }
            BnMode::Train => {
                let xv = self.val(*x)?;
                let (y, stats) = layers::batch_norm_train(xv, self.store.data(p.weight), self.store.data(p.bias))?;
                let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let ones = vec![1.0; inv_std.len()];
                let zeros = vec![0.0; inv_std.len()];
                let xhat = exec::map_batch(xv, |t| layers::batch_norm_eval(t, &ones, &zeros, &stats.mean, &stats.var))?;
                self.bn_updates.push(BnUpdate { ids: p, stats });
                Ok(self.push(Op::BnTrain { x: *x, p, xhat, inv_std }, y))
            }
        }
    }

    fn rprelu(&mut self, x: &Var, p: RprIds) -> Result<Var> {
        let view = p.view(self.store);
        let y = exec::map_batch(self.val(*x)?, |t| layers::rprelu(t, view))?;
        Ok(self.push(Op::Rprelu { x: *x, p }, y))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = exec::zip_batch(self.val(*a)?, self.val(*b)?, |x, y| x.add(y))?;
        Ok(self.push(Op::Add { a: *a, b: *b }, y))
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let y = exec::map_batch(self.val(*x)?, layers::global_avg_pool)?;
        Ok(self.push(Op::GlobalAvgPool { x: *x }, y))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let y = exec::map_batch(self.val(*x)?, |t| Ok(layers::sigmoid(t)))?;
        Ok(self.push(Op::Sigmoid { x: *x }, y))
    }

    fn scale_channels(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let y = exec::zip_batch(self.val(*x)?, self.val(*s)?, layers::scale_channels)?;
        Ok(self.push(Op::ScaleChannels { x: *x, s: *s }, y))
    }

    fn avg_pool2(&mut self, x: &Var) -> Result<Var> {
        let y = exec::map_batch(self.val(*x)?, layers::avg_pool2)?;
        Ok(self.push(Op::AvgPool2 { x: *x }, y))
    }

    fn upsample2(&mut self, x: &Var) -> Result<Var> {
        let y = exec::map_batch(self.val(*x)?, layers::upsample2)?;
        Ok(self.push(Op::Upsample2 { x: *x }, y))
    }

    fn channel_pair_mean(&mut self, x: &Var) -> Result<Var> {
        let y = exec::map_batch(self.val(*x)?, layers::channel_pair_mean)?;
        Ok(self.push(Op::ChannelPairMean { x: *x }, y))
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = exec::zip_batch(self.val(*a)?, self.val(*b)?, layers::concat_channels)?;
        Ok(self.push(Op::Concat { a: *a, b: *b }, y))
    }

    fn scatter_views(&mut self, x: &Var, scatter: &ViewScatter) -> Result<Var> {
        let y = exec::scatter_batch(self.val(*x)?, scatter)?;
        let scatter = Box::new(scatter.clone());
        Ok(self.push(Op::Scatter { x: *x, scatter }, y))
    }
}

/// Runs `net` on a recording tape; returns the tape and the output handle.
pub fn forward_record<'a, N: Network>(
    net: &N,
    store: &'a ParamStore,
    mode: Mode,
    x: Batch,
) -> Result<(Tape<'a>, Var)> {
    let mut tape = Tape::new(store, mode);
    let input = tape.input(x)?;
    let out = net.forward(&mut tape, &input)?;
    Ok((tape, out))
}

/// Folds training-batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    use crate::units::layers::BN_MOMENTUM;
    for u in updates {
        let unbiased = u.stats.unbiased_var();
        let m = store.tensor_mut(u.ids.running_mean);
        for (r, b) in m.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let v = store.tensor_mut(u.ids.running_var);
        for (r, b) in v.data_mut().iter_mut().zip(&unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
    Ok(())
}
