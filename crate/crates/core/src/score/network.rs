//! Residual MLP with label/time conditioning and hand-written backpropagation.
//!
//! Layout of one forward pass over a batch of `n` rows:
//!
//! ```text
//! cond  = label_emb[j] + (sinusoid(tau) W_t + b_t)            n x d
//! h_0   = silu(x W_in + b_in)                                  n x H
//! h_b+1 = silu(GN(h_b + cond W_c + b_c + F_b(h_b)))            n x H
//!         F_b(h) = silu(h W_1 + b_1) W_2 + b_2
//! z     = h_B W_out + b_out                                    n x K
//! ```
//!
//! Without conditioning the `cond` path and its parameters are absent, which
//! gives the plain classifier used as a baseline.
//!
//! All parameters live in one flat `Vec<f64>` described by a list of
//! [`TensorSpec`]s, so optimisers and serialisation treat them uniformly.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::rng::Rng;

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub groups: usize,
    pub conditioned: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.hidden == 0 || self.groups == 0 || !self.hidden.is_multiple_of(self.groups) {
            return bad("hidden width must be a positive multiple of the group count");
        }
        if self.conditioned && (self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2)) {
            return bad("embed_dim must be even and at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    cond_w: Option<usize>,
    cond_b: Option<usize>,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct CondIdx {
    label_emb: usize,
    time_w: usize,
    time_b: usize,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    specs: Vec<TensorSpec>,
    params: Vec<f64>,
    cond: Option<CondIdx>,
    enc_w: usize,
    enc_b: usize,
    blocks: Vec<BlockIdx>,
    head_w: usize,
    head_b: usize,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NetworkCache {
    x: Array2<f64>,
    labels: Vec<usize>,
    feats: Option<Array2<f64>>,
    cond: Option<Array2<f64>>,
    enc_pre: Array2<f64>,
    /// Input to every block plus the final trunk output.
    hs: Vec<Array2<f64>>,
    blocks: Vec<BlockCache>,
    logits: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    a1: Array2<f64>,
    u1: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array2<f64>,
    g: Array2<f64>,
}

impl NetworkCache {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features of a scalar in `[0, 1]`, frequencies from 1 to 1000.
pub(crate) fn time_features(tau: f64, width: usize) -> impl Iterator<Item = f64> {
    let half = width / 2;
    let step = if half > 1 {
        (1000f64).ln() / (half - 1) as f64
    } else {
        0.0
    };
    (0..width).map(move |i| {
        let f = i % half;
        let arg = tau * (step * f as f64).exp();
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

impl Network {
    /// Allocates and initialises parameters; the output head starts at zero so
    /// the initial model predicts all-equal logits.
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = specs.last().map_or(0, |s: &TensorSpec| s.offset + s.len());
            specs.push(TensorSpec {
                name,
                shape,
                offset,
            });
            specs.len() - 1
        };
        let (d, h, k) = (config.embed_dim, config.hidden, config.num_classes);
        let cond = config.conditioned.then(|| CondIdx {
            label_emb: push("label_emb".into(), vec![k, d]),
            time_w: push("time_w".into(), vec![d, d]),
            time_b: push("time_b".into(), vec![d]),
        });
        let enc_w = push("enc_w".into(), vec![config.input_dim, h]);
        let enc_b = push("enc_b".into(), vec![h]);
        let mut blocks = Vec::new();
        for b in 0..config.blocks {
            let w1 = push(format!("block{b}.w1"), vec![h, h]);
            let b1 = push(format!("block{b}.b1"), vec![h]);
            let w2 = push(format!("block{b}.w2"), vec![h, h]);
            let b2 = push(format!("block{b}.b2"), vec![h]);
            let (cond_w, cond_b) = if config.conditioned {
                (
                    Some(push(format!("block{b}.cond_w"), vec![d, h])),
                    Some(push(format!("block{b}.cond_b"), vec![h])),
                )
            } else {
                (None, None)
            };
            let gamma = push(format!("block{b}.gn_gamma"), vec![h]);
            let beta = push(format!("block{b}.gn_beta"), vec![h]);
            blocks.push(BlockIdx {
                w1,
                b1,
                w2,
                b2,
                cond_w,
                cond_b,
                gamma,
                beta,
            });
        }
        let head_w = push("head_w".into(), vec![h, k]);
        let head_b = push("head_b".into(), vec![k]);

        let total = specs.last().map_or(0, |s| s.offset + s.len());
        let mut net = Self {
            config,
            specs,
            params: vec![0.0; total],
            cond,
            enc_w,
            enc_b,
            blocks,
            head_w,
            head_b,
        };
        net.initialize(rng);
        Ok(net)
    }

    fn initialize(&mut self, rng: &mut Rng) {
        for idx in 0..self.specs.len() {
            let spec = self.specs[idx].clone();
            let name = spec.name.as_str();
            let slot = &mut self.params[spec.range()];
            if name.ends_with("gn_gamma") {
                slot.fill(1.0);
            } else if spec.shape.len() == 1 || name.starts_with("head") {
                slot.fill(0.0);
            } else {
                let std = if name == "label_emb" {
                    1.0
                } else {
                    (1.0 / spec.shape[0] as f64).sqrt()
                };
                for v in slot.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = std * z;
                }
            }
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Replaces all parameters; used by checkpoint loading.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_len(self.params.len(), params.len())?;
        self.params = params;
        Ok(())
    }

    fn m(&self, idx: usize) -> ArrayView2<'_, f64> {
        let s = &self.specs[idx];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &self.params[s.range()])
            .expect("layout is consistent")
    }

    fn v(&self, idx: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.specs[idx].range()])
    }

    fn gm<'a>(&self, grad: &'a mut [f64], idx: usize) -> ArrayViewMut2<'a, f64> {
        let s = &self.specs[idx];
        ArrayViewMut2::from_shape((s.shape[0], s.shape[1]), &mut grad[s.range()])
            .expect("layout is consistent")
    }

    fn gv<'a>(&self, grad: &'a mut [f64], idx: usize) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut grad[self.specs[idx].range()])
    }

    fn affine(&self, input: &ArrayView2<'_, f64>, w: usize, b: usize) -> Array2<f64> {
        let mut out = input.dot(&self.m(w));
        out += &self.v(b);
        out
    }

    /// Forward pass over a batch. `labels`/`taus` must be given iff the network
    /// is conditioned.
    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        conditioning: Option<(&[usize], &[f64])>,
    ) -> Result<NetworkCache> {
        let n = x.nrows();
        check_len(self.config.input_dim, x.ncols())?;
        let (feats, cond, labels) = match (self.cond, conditioning) {
            (Some(ci), Some((labels, taus))) => {
                check_len(n, labels.len())?;
                check_len(n, taus.len())?;
                let d = self.config.embed_dim;
                let mut feats = Array2::zeros((n, d));
                for (mut row, &tau) in feats.rows_mut().into_iter().zip(taus) {
                    if !tau.is_finite() {
                        return Err(Error::Invalid(format!("non-finite time input {tau}")));
                    }
                    row.iter_mut()
                        .zip(time_features(tau, d))
                        .for_each(|(r, f)| *r = f);
                }
                let mut cond = self.affine(&feats.view(), ci.time_w, ci.time_b);
                let emb = self.m(ci.label_emb);
                for (mut row, &j) in cond.rows_mut().into_iter().zip(labels) {
                    if j >= self.config.num_classes {
                        return Err(Error::Invalid(format!("label {j} out of range")));
                    }
                    row += &emb.row(j);
                }
                (Some(feats), Some(cond), labels.to_vec())
            }
            (None, None) => (None, None, Vec::new()),
            (Some(_), None) => {
                return Err(Error::Invalid(
                    "conditioned network needs labels and times".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Invalid(
                    "unconditioned network takes no labels".into(),
                ))
            }
        };

        let enc_pre = self.affine(&x, self.enc_w, self.enc_b);
        let mut h = enc_pre.mapv(silu);
        let mut hs = Vec::with_capacity(self.blocks.len() + 1);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let a1 = self.affine(&h.view(), blk.w1, blk.b1);
            let u1 = a1.mapv(silu);
            let mut sum = self.affine(&u1.view(), blk.w2, blk.b2);
            sum += &h;
            if let (Some(cond), Some(cw), Some(cb)) = (&cond, blk.cond_w, blk.cond_b) {
                sum += &self.affine(&cond.view(), cw, cb);
            }
            let (xhat, inv_std) = self.group_normalize(&sum);
            let g = &xhat * &self.v(blk.gamma) + self.v(blk.beta);
            let next = g.mapv(silu);
            hs.push(std::mem::replace(&mut h, next));
            caches.push(BlockCache {
                a1,
                u1,
                xhat,
                inv_std,
                g,
            });
        }
        let logits = self.affine(&h.view(), self.head_w, self.head_b);
        hs.push(h);
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite logit {bad} in forward pass (parameter norm {:.3e})",
                self.params.iter().map(|p| p * p).sum::<f64>().sqrt()
            )));
        }
        Ok(NetworkCache {
            x: x.to_owned(),
            labels,
            feats,
            cond,
            enc_pre,
            hs,
            blocks: caches,
            logits,
        })
    }

    fn group_normalize(&self, input: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (n, h) = input.dim();
        let groups = self.config.groups;
        let size = h / groups;
        let mut xhat = Array2::zeros((n, h));
        let mut inv_std = Array2::zeros((n, groups));
        for r in 0..n {
            for g in 0..groups {
                let seg = input.slice(s![r, g * size..(g + 1) * size]);
                let mean = seg.sum() / size as f64;
                let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / size as f64;
                let is = 1.0 / (var + GN_EPS).sqrt();
                inv_std[[r, g]] = is;
                for (o, v) in xhat
                    .slice_mut(s![r, g * size..(g + 1) * size])
                    .iter_mut()
                    .zip(seg.iter())
                {
                    *o = (v - mean) * is;
                }
            }
        }
        (xhat, inv_std)
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(
        &self,
        cache: &NetworkCache,
        dlogits: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        check_len(self.params.len(), grad.len())?;
        if dlogits.dim() != cache.logits.dim() {
            return Err(Error::Invalid("logit gradient shape mismatch".into()));
        }
        let groups = self.config.groups;
        let size = self.config.hidden / groups;

        let h_last = cache.hs.last().expect("trunk output cached");
        general_mat_mul(
            1.0,
            &h_last.t(),
            &dlogits,
            1.0,
            &mut self.gm(grad, self.head_w),
        );
        self.gv(grad, self.head_b)
            .scaled_add(1.0, &dlogits.sum_axis(Axis(0)));
        let mut dh = dlogits.dot(&self.m(self.head_w).t());

        let mut dcond = cache.cond.as_ref().map(|c| Array2::<f64>::zeros(c.dim()));
        for (b, blk) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[b];
            let h_in = &cache.hs[b];
            // through the output nonlinearity
            let mut dg = dh;
            dg.zip_mut_with(&bc.g, |d, &g| *d *= silu_grad(g));
            self.gv(grad, blk.gamma)
                .scaled_add(1.0, &(&dg * &bc.xhat).sum_axis(Axis(0)));
            self.gv(grad, blk.beta)
                .scaled_add(1.0, &dg.sum_axis(Axis(0)));
            // group norm
            let mut dxhat = dg;
            dxhat *= &self.v(blk.gamma);
            let mut dsum = Array2::<f64>::zeros(dxhat.dim());
            for r in 0..dxhat.nrows() {
                for g in 0..groups {
                    let range = g * size..(g + 1) * size;
                    let dx = dxhat.slice(s![r, range.clone()]);
                    let xh = bc.xhat.slice(s![r, range.clone()]);
                    let mean_d = dx.sum() / size as f64;
                    let mean_dx =
                        dx.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / size as f64;
                    let is = bc.inv_std[[r, g]];
                    for ((o, &d), &x) in dsum
                        .slice_mut(s![r, range])
                        .iter_mut()
                        .zip(dx.iter())
                        .zip(xh.iter())
                    {
                        *o = is * (d - mean_d - x * mean_dx);
                    }
                }
            }
            // conditioning projection
            if let (Some(cond), Some(dc), Some(cw), Some(cb)) =
                (&cache.cond, dcond.as_mut(), blk.cond_w, blk.cond_b)
            {
                general_mat_mul(1.0, &cond.t(), &dsum, 1.0, &mut self.gm(grad, cw));
                self.gv(grad, cb).scaled_add(1.0, &dsum.sum_axis(Axis(0)));
                general_mat_mul(1.0, &dsum, &self.m(cw).t(), 1.0, dc);
            }
            // residual branch
            general_mat_mul(1.0, &bc.u1.t(), &dsum, 1.0, &mut self.gm(grad, blk.w2));
            self.gv(grad, blk.b2)
                .scaled_add(1.0, &dsum.sum_axis(Axis(0)));
            let mut da1 = dsum.dot(&self.m(blk.w2).t());
            da1.zip_mut_with(&bc.a1, |d, &a| *d *= silu_grad(a));
            general_mat_mul(1.0, &h_in.t(), &da1, 1.0, &mut self.gm(grad, blk.w1));
            self.gv(grad, blk.b1)
                .scaled_add(1.0, &da1.sum_axis(Axis(0)));
            // skip path
            dh = dsum;
            general_mat_mul(1.0, &da1, &self.m(blk.w1).t(), 1.0, &mut dh);
        }

        let mut denc = dh;
        denc.zip_mut_with(&cache.enc_pre, |d, &a| *d *= silu_grad(a));
        general_mat_mul(
            1.0,
            &cache.x.t(),
            &denc,
            1.0,
            &mut self.gm(grad, self.enc_w),
        );
        self.gv(grad, self.enc_b)
            .scaled_add(1.0, &denc.sum_axis(Axis(0)));

        if let (Some(ci), Some(dc), Some(feats)) = (self.cond, dcond, &cache.feats) {
            general_mat_mul(1.0, &feats.t(), &dc, 1.0, &mut self.gm(grad, ci.time_w));
            self.gv(grad, ci.time_b)
                .scaled_add(1.0, &dc.sum_axis(Axis(0)));
            let mut demb = self.gm(grad, ci.label_emb);
            for (row, &j) in dc.rows().into_iter().zip(&cache.labels) {
                let mut target = demb.row_mut(j);
                target += &row;
            }
        }
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn snap_to_f32(&mut self) {
        self.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
    }

    pub fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }
}

/// Stacks feature rows into a matrix.
pub(crate) fn stack_rows<'a>(
    rows: impl ExactSizeIterator<Item = &'a [f64]>,
    width: usize,
) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * width);
    for r in rows {
        check_len(width, r.len())?;
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((n, width), flat).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn small(conditioned: bool) -> Network {
        let cfg = NetworkConfig {
            input_dim: 3,
            num_classes: 4,
            embed_dim: 6,
            hidden: 8,
            blocks: 2,
            groups: 2,
            conditioned,
        };
        let mut net = Network::new(cfg, &mut seeded(21)).unwrap();
        // give the zero-initialised head and biases some mass so gradients are generic
        let mut rng = seeded(22);
        for p in net.params_mut() {
            *p += 0.3 * (rng.random::<f64>() - 0.5);
        }
        net
    }

    fn weighted_logit_sum(
        net: &Network,
        x: &Array2<f64>,
        cond: Option<(&[usize], &[f64])>,
        w: &Array2<f64>,
    ) -> f64 {
        let c = net.forward(x.view(), cond).unwrap();
        (c.logits() * w).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        for conditioned in [true, false] {
            let mut net = small(conditioned);
            let mut rng = seeded(5);
            let x = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
            let w = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() - 0.5);
            let labels = [0usize, 3, 1, 1, 2];
            let taus = [0.0, 0.2, 0.5, 0.9, 1.0];
            let cond = conditioned.then_some((&labels[..], &taus[..]));
            let cache = net.forward(x.view(), cond).unwrap();
            let mut grad = net.zero_grad();
            net.backward(&cache, w.view(), &mut grad).unwrap();
            let eps = 1e-6;
            for i in 0..net.num_params() {
                let orig = net.params()[i];
                net.params_mut()[i] = orig + eps;
                let up = weighted_logit_sum(&net, &x, cond, &w);
                net.params_mut()[i] = orig - eps;
                let down = weighted_logit_sum(&net, &x, cond, &w);
                net.params_mut()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err < 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn zero_head_gives_constant_logits() {
        let net = Network::new(
            NetworkConfig {
                input_dim: 2,
                num_classes: 3,
                embed_dim: 4,
                hidden: 8,
                blocks: 1,
                groups: 4,
                conditioned: true,
            },
            &mut seeded(1),
        )
        .unwrap();
        let x = Array2::from_shape_vec((2, 2), vec![0.3, -2.0, 1.0, 4.0]).unwrap();
        let c = net.forward(x.view(), Some((&[0, 2], &[0.1, 0.7]))).unwrap();
        assert!(c.logits().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn conditioning_mismatch_is_rejected() {
        let net = small(true);
        let x = Array2::zeros((1, 3));
        assert!(net.forward(x.view(), None).is_err());
        assert!(net.forward(x.view(), Some((&[4], &[0.5]))).is_err());
        let plain = small(false);
        assert!(plain.forward(x.view(), Some((&[0], &[0.5]))).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = *small(true).config();
        cfg.groups = 3;
        assert!(cfg.validate().is_err());
        cfg.groups = 2;
        cfg.embed_dim = 5;
        assert!(cfg.validate().is_err());
    }
}
