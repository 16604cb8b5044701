//! Valid-padding 2-d cross-correlation with max-pooling on the currents.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of one convolutional stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl ConvGeometry {
    pub fn conv_hw(&self) -> (usize, usize) {
        (self.height + 1 - self.kernel, self.width + 1 - self.kernel)
    }

    pub fn pooled_hw(&self) -> (usize, usize) {
        let (h, w) = self.conv_hw();
        (h / self.pool, w / self.pool)
    }

    pub fn inputs(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn outputs(&self) -> usize {
        let (h, w) = self.pooled_hw();
        self.out_channels * h * w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel > self.height || self.kernel > self.width {
            return Err(Error::Dimension(format!(
                "kernel {} does not fit a {}×{} input",
                self.kernel, self.height, self.width
            )));
        }
        if self.pool == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        let (ph, pw) = self.pooled_hw();
        if ph == 0 || pw == 0 {
            return Err(Error::Dimension("pooling leaves no output".into()));
        }
        Ok(())
    }
}

/// `input[batch × C·H·W]` correlated with `weights[C' × C × k × k]`, valid
/// padding. Output `[batch × C'·H'·W']`, `H' = H - k + 1`.
pub fn conv2d_valid(geo: &ConvGeometry, weights: &Tensor, input: &[f32], batch: usize) -> Result<Vec<f32>> {
    geo.validate()?;
    if weights.shape() != geo.weight_shape() {
        return Err(Error::Dimension(format!(
            "conv weights {:?}, expected {:?}",
            weights.shape(),
            geo.weight_shape()
        )));
    }
    if input.len() != batch * geo.inputs() {
        return Err(Error::Dimension(format!(
            "conv input holds {} values, expected {}",
            input.len(),
            batch * geo.inputs()
        )));
    }
    let (oh, ow) = geo.conv_hw();
    let (h, w, k) = (geo.height, geo.width, geo.kernel);
    let wd = weights.data();
    let mut out = vec![0.0f32; batch * geo.out_channels * oh * ow];
    for b in 0..batch {
        let img = &input[b * geo.inputs()..(b + 1) * geo.inputs()];
        for co in 0..geo.out_channels {
            let plane = &mut out[(b * geo.out_channels + co) * oh * ow..][..oh * ow];
            for ci in 0..geo.in_channels {
                let chan = &img[ci * h * w..(ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = wd[((co * geo.in_channels + ci) * k + ki) * k + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let src = &chan[(y + ki) * w + kj..][..ow];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Non-overlapping `pool × pool` max-pool over `[batch × C × H × W]`.
/// Returns the pooled values and, per output, the flat index of the winning
/// input (first maximum in row-major window order).
pub fn max_pool(x: &[f32], batch: usize, channels: usize, h: usize, w: usize, pool: usize) -> (Vec<f32>, Vec<u32>) {
    let (ph, pw) = (h / pool, w / pool);
    let n = batch * channels * ph * pw;
    let mut vals = vec![0.0f32; n];
    let mut idx = vec![0u32; n];
    for bc in 0..batch * channels {
        let base = bc * h * w;
        for py in 0..ph {
            for px in 0..pw {
                let mut best = base + (py * pool) * w + px * pool;
                for dy in 0..pool {
                    for dx in 0..pool {
                        let i = base + (py * pool + dy) * w + px * pool + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                let o = (bc * ph + py) * pw + px;
                vals[o] = x[best];
                idx[o] = best as u32;
            }
        }
    }
    (vals, idx)
}

/// Pooled synaptic current of a conv stage, plus the pooling routes.
pub fn conv_current(geo: &ConvGeometry, weights: &Tensor, input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let batch = input.shape()[0];
    let conv = conv2d_valid(geo, weights, input.data(), batch)?;
    let (oh, ow) = geo.conv_hw();
    let (vals, idx) = max_pool(&conv, batch, geo.out_channels, oh, ow, geo.pool);
    Ok((Tensor::new(vec![batch, geo.outputs()], vals)?, idx))
}

/// Backward through pool and correlation. `d_pooled` is `[batch × outputs]`
/// (gradient w.r.t. the pooled current). Accumulates into `d_weights` and,
/// when requested, returns the gradient w.r.t. the input.
pub fn conv_backward(
    geo: &ConvGeometry,
    weights: &Tensor,
    input: &[f32],
    pool_index: &[u32],
    d_pooled: &[f32],
    batch: usize,
    d_weights: &mut [f32],
    want_input_grad: bool,
) -> Option<Vec<f32>> {
    let (oh, ow) = geo.conv_hw();
    let (h, w, k) = (geo.height, geo.width, geo.kernel);
    let plane = oh * ow;
    let mut d_conv = vec![0.0f32; batch * geo.out_channels * plane];
    for (&i, &g) in pool_index.iter().zip(d_pooled) {
        d_conv[i as usize] += g;
    }
    let wd = weights.data();
    let mut d_in = want_input_grad.then(|| vec![0.0f32; batch * geo.inputs()]);
    for b in 0..batch {
        let img = &input[b * geo.inputs()..(b + 1) * geo.inputs()];
        for co in 0..geo.out_channels {
            let g = &d_conv[(b * geo.out_channels + co) * plane..][..plane];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ci in 0..geo.in_channels {
                let chan = &img[ci * h * w..(ci + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ((co * geo.in_channels + ci) * k + ki) * k + kj;
                        let mut acc = 0.0f32;
                        for y in 0..oh {
                            let src = &chan[(y + ki) * w + kj..][..ow];
                            for (&s, &gv) in src.iter().zip(&g[y * ow..(y + 1) * ow]) {
                                acc += s * gv;
                            }
                        }
                        d_weights[widx] += acc;
                        if let Some(d_in) = d_in.as_mut() {
                            let wv = wd[widx];
                            let dchan = &mut d_in[b * geo.inputs() + ci * h * w..][..h * w];
                            for y in 0..oh {
                                let dst = &mut dchan[(y + ki) * w + kj..][..ow];
                                for (d, &gv) in dst.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::rand_uniform;

    fn geo(c: usize, h: usize, w: usize, co: usize, k: usize, pool: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel: k,
            pool,
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let g = geo(1, 4, 4, 1, 1, 1);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        assert_eq!(conv2d_valid(&g, &w, &x, 1).unwrap(), x);
    }

    #[test]
    fn constant_input_constant_output() {
        let mut rng = Rng::new(3);
        let g = geo(2, 6, 6, 3, 3, 2);
        let w = rand_uniform(&mut rng, &g.weight_shape(), -1.0, 1.0).unwrap();
        let x = vec![0.7f32; g.inputs()];
        let out = conv2d_valid(&g, &w, &x, 1).unwrap();
        let (oh, ow) = g.conv_hw();
        for co in 0..3 {
            let p = &out[co * oh * ow..(co + 1) * oh * ow];
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }

    #[test]
    fn matches_quadruple_loop() {
        let mut rng = Rng::new(17);
        let g = geo(1, 6, 6, 2, 3, 2);
        let w = rand_uniform(&mut rng, &g.weight_shape(), -1.0, 1.0).unwrap();
        let x = rand_uniform(&mut rng, &[1, 36], -1.0, 1.0).unwrap();
        let out = conv2d_valid(&g, &w, x.data(), 1).unwrap();
        for co in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let mut acc = 0.0f64;
                    for ki in 0..3 {
                        for kj in 0..3 {
                            acc += w.at(&[co, 0, ki, kj]) as f64 * x.data()[(y + ki) * 6 + xx + kj] as f64;
                        }
                    }
                    assert!((out[(co * 4 + y) * 4 + xx] as f64 - acc).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn kernel_larger_than_input() {
        let g = geo(1, 3, 3, 1, 5, 1);
        let w = Tensor::zeros(&g.weight_shape());
        assert!(matches!(conv2d_valid(&g, &w, &[0.0; 9], 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn pool_picks_maximum() {
        let x = [
            1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0, 0.0, 0.0, 8.0, 7.0, 2.0, 2.0, 6.0, 6.0,
        ];
        let (v, i) = max_pool(&x, 1, 1, 4, 4, 2);
        assert_eq!(v, vec![5.0, 9.0, 2.0, 8.0]);
        assert_eq!(i, vec![1, 6, 12, 10]);
    }

    #[test]
    fn batch_permutation_commutes() {
        let mut rng = Rng::new(5);
        let g = geo(2, 8, 8, 3, 3, 2);
        let w = rand_uniform(&mut rng, &g.weight_shape(), -1.0, 1.0).unwrap();
        let x = rand_uniform(&mut rng, &[3, g.inputs()], 0.0, 1.0).unwrap();
        let (a, _) = conv_current(&g, &w, &x).unwrap();
        let perm = [2usize, 0, 1];
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(x.outer_slice(p));
        }
        let xp = Tensor::new(vec![3, g.inputs()], xp).unwrap();
        let (b, _) = conv_current(&g, &w, &xp).unwrap();
        for (row, &p) in perm.iter().enumerate() {
            assert_eq!(b.outer_slice(row), a.outer_slice(p));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let g = geo(2, 6, 6, 2, 3, 2);
        let w = rand_uniform(&mut rng, &g.weight_shape(), -1.0, 1.0).unwrap();
        let x = rand_uniform(&mut rng, &[2, g.inputs()], -1.0, 1.0).unwrap();
        let coef = rand_uniform(&mut rng, &[2, g.outputs()], -1.0, 1.0).unwrap();
        let loss = |w: &Tensor, x: &Tensor| -> f64 {
            let (p, _) = conv_current(&g, w, x).unwrap();
            p.data()
                .iter()
                .zip(coef.data())
                .map(|(&a, &c)| a as f64 * c as f64)
                .sum()
        };
        let (_, idx) = conv_current(&g, &w, &x).unwrap();
        let mut dw = vec![0.0f32; w.len()];
        let dx = conv_backward(&g, &w, x.data(), &idx, coef.data(), 2, &mut dw, true).unwrap();
        let eps = 1e-2f32;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i] -= eps;
            let fd = (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * eps as f64);
            assert!((fd - dw[i] as f64).abs() < 1e-3, "w[{i}] fd {fd} got {}", dw[i]);
        }
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3, "x[{i}] fd {fd} got {}", dx[i]);
        }
    }
}
