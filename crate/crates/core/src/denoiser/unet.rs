//! U-Net layout: named parameter tensors, inference, and the training
//! forward/backward pair.

use serde::{Deserialize, Serialize};

use super::tensor::*;
use crate::error::{Error, Result};
use crate::rng::OaRng;

/// Encoder/decoder depth and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserArch {
    pub levels: usize,
    pub base_channels: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            levels: 4,
            base_channels: 32,
        }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Config(format!("levels must be in 1..=8, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.base_channels > 1024 {
            return Err(Error::Config(format!("base_channels must be in 1..=1024, got {}", self.base_channels)));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        let d = self.divisor();
        if rows == 0 || cols == 0 || !rows.is_multiple_of(d) || !cols.is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "denoiser input {rows}x{cols}: both dimensions must be nonzero multiples of {d} (2^levels)"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One named tensor inside a flat vector.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub len: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.len;
        let spec = TensorSpec { name, shape, offset };
        self.len += spec.len();
        self.tensors.push(spec);
        offset
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, Copy)]
struct Cbr {
    cin: usize,
    cout: usize,
    weight: usize,
    /// `gamma` then `beta`, `cout` each.
    affine: usize,
    /// Running mean then running variance in the buffer vector.
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    a: Cbr,
    b: Cbr,
}

#[derive(Debug, Clone, Copy)]
struct Up {
    cin: usize,
    cout: usize,
    weight: usize,
    bias: usize,
}

/// Index of every tensor of a U-Net built from a [`DenoiserArch`].
#[derive(Debug, Clone)]
pub struct Unet {
    pub arch: DenoiserArch,
    pub params: Layout,
    pub buffers: Layout,
    enc: Vec<Block>,
    ups: Vec<Up>,
    dec: Vec<Block>,
    head_weight: usize,
    head_bias: usize,
}

struct CbrTape<T> {
    x: Fmap<T>,
    bn: BnCache<T>,
    out: Fmap<T>,
}

struct BlockTape<T> {
    a: CbrTape<T>,
    b: CbrTape<T>,
}

/// Activations recorded by [`Unet::forward_train`].
pub struct Tape<T> {
    enc: Vec<BlockTape<T>>,
    pools: Vec<Vec<u8>>,
    up_in: Vec<Fmap<T>>,
    dec: Vec<BlockTape<T>>,
    head_in: Fmap<T>,
}

fn gamma_beta<T>(p: &[T], c: Cbr) -> (&[T], &[T]) {
    p[c.affine..c.affine + 2 * c.cout].split_at(c.cout)
}

fn weight_len(c: Cbr) -> usize {
    c.cout * c.cin * 9
}

impl Unet {
    pub fn new(arch: DenoiserArch) -> Result<Self> {
        arch.validate()?;
        let mut params = Layout::default();
        let mut buffers = Layout::default();
        let mut cbr = |name: &str, cin: usize, cout: usize| Cbr {
            cin,
            cout,
            weight: params.push(format!("{name}.conv.weight"), vec![cout, cin, 3, 3]),
            affine: {
                let g = params.push(format!("{name}.norm.gamma"), vec![cout]);
                params.push(format!("{name}.norm.beta"), vec![cout]);
                g
            },
            stats: {
                let m = buffers.push(format!("{name}.norm.running_mean"), vec![cout]);
                buffers.push(format!("{name}.norm.running_var"), vec![cout]);
                m
            },
        };
        let mut enc = Vec::new();
        let mut cin = 1;
        for l in 0..=arch.levels {
            let c = arch.channels(l);
            let tag = if l == arch.levels { "bottleneck".to_string() } else { format!("enc{l}") };
            enc.push(Block {
                a: cbr(&format!("{tag}.0"), cin, c),
                b: cbr(&format!("{tag}.1"), c, c),
            });
            cin = c;
        }
        let mut dec = vec![None; arch.levels];
        let mut ups = vec![None; arch.levels];
        for l in (0..arch.levels).rev() {
            let c = arch.channels(l);
            dec[l] = Some(Block {
                a: cbr(&format!("dec{l}.0"), 2 * c, c),
                b: cbr(&format!("dec{l}.1"), c, c),
            });
        }
        for l in (0..arch.levels).rev() {
            let (ci, co) = (arch.channels(l + 1), arch.channels(l));
            ups[l] = Some(Up {
                cin: ci,
                cout: co,
                weight: params.push(format!("up{l}.weight"), vec![ci, co, 2, 2]),
                bias: params.push(format!("up{l}.bias"), vec![co]),
            });
        }
        let c0 = arch.channels(0);
        let head_weight = params.push("head.weight".into(), vec![1, c0]);
        let head_bias = params.push("head.bias".into(), vec![1]);
        Ok(Unet {
            arch,
            params,
            buffers,
            enc,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head_weight,
            head_bias,
        })
    }

    /// He-normal convolutions, unit scale and zero shift in every
    /// normalisation, zero head. Running statistics start at (0, 1).
    pub fn init<T: Scalar>(&self, rng: &mut OaRng) -> (Vec<T>, Vec<T>) {
        let mut p = vec![T::zero(); self.params.len];
        let all = self.enc.iter().chain(&self.dec);
        for blk in all {
            for c in [blk.a, blk.b] {
                let std = (2.0 / (c.cin * 9) as f64).sqrt();
                for v in &mut p[c.weight..c.weight + weight_len(c)] {
                    *v = T::of(std * rng.normal());
                }
                p[c.affine..c.affine + c.cout].iter_mut().for_each(|v| *v = T::one());
            }
        }
        for u in &self.ups {
            let std = (1.0 / u.cin as f64).sqrt();
            for v in &mut p[u.weight..u.weight + u.cin * u.cout * 4] {
                *v = T::of(std * rng.normal());
            }
        }
        let mut b = vec![T::zero(); self.buffers.len];
        for blk in self.enc.iter().chain(&self.dec) {
            for c in [blk.a, blk.b] {
                b[c.stats + c.cout..c.stats + 2 * c.cout].iter_mut().for_each(|v| *v = T::one());
            }
        }
        (p, b)
    }

    fn check_lengths<T>(&self, params: &[T], buffers: &[T]) {
        assert_eq!(params.len(), self.params.len, "parameter vector length");
        assert_eq!(buffers.len(), self.buffers.len, "buffer vector length");
    }

    fn cbr_eval<T: Scalar>(&self, c: Cbr, p: &[T], buf: &[T], x: &Fmap<T>) -> Fmap<T> {
        let y = conv3x3(x, &p[c.weight..c.weight + weight_len(c)], c.cout);
        let (g, b) = gamma_beta(p, c);
        let (m, v) = buf[c.stats..c.stats + 2 * c.cout].split_at(c.cout);
        let mut y = batchnorm_eval(&y, g, b, m, v);
        relu_in_place(&mut y);
        y
    }

    fn block_eval<T: Scalar>(&self, blk: Block, p: &[T], buf: &[T], x: &Fmap<T>) -> Fmap<T> {
        let h = self.cbr_eval(blk.a, p, buf, x);
        self.cbr_eval(blk.b, p, buf, &h)
    }

    fn head<T: Scalar>(&self, p: &[T], h: &Fmap<T>) -> Fmap<T> {
        let c0 = self.arch.channels(0);
        conv1x1(h, &p[self.head_weight..self.head_weight + c0], &p[self.head_bias..self.head_bias + 1])
    }

    fn up<T: Scalar>(&self, u: Up, p: &[T], h: &Fmap<T>) -> Fmap<T> {
        upconv2(h, &p[u.weight..u.weight + u.cin * u.cout * 4], &p[u.bias..u.bias + u.cout])
    }

    /// Inference with frozen running statistics.
    pub fn forward_eval<T: Scalar>(&self, params: &[T], buffers: &[T], x: &Fmap<T>) -> Fmap<T> {
        self.check_lengths(params, buffers);
        let lv = self.arch.levels;
        let mut skips = Vec::with_capacity(lv);
        let mut h = x.clone();
        for l in 0..lv {
            let s = self.block_eval(self.enc[l], params, buffers, &h);
            h = maxpool2(&s).0;
            skips.push(s);
        }
        h = self.block_eval(self.enc[lv], params, buffers, &h);
        for l in (0..lv).rev() {
            let u = self.up(self.ups[l], params, &h);
            let cat = concat(&skips[l], &u);
            h = self.block_eval(self.dec[l], params, buffers, &cat);
        }
        self.head(params, &h)
    }

    fn cbr_train<T: Scalar>(&self, c: Cbr, p: &[T], buf: Option<&mut [T]>, x: Fmap<T>) -> CbrTape<T> {
        let y = conv3x3(&x, &p[c.weight..c.weight + weight_len(c)], c.cout);
        let (g, b) = gamma_beta(p, c);
        let running = buf.map(|b| b[c.stats..c.stats + 2 * c.cout].split_at_mut(c.cout));
        let (mut out, bn) = batchnorm_train(&y, g, b, running);
        relu_in_place(&mut out);
        CbrTape { x, bn, out }
    }

    fn block_train<T: Scalar>(&self, blk: Block, p: &[T], mut buf: Option<&mut [T]>, x: Fmap<T>) -> BlockTape<T> {
        let a = self.cbr_train(blk.a, p, buf.as_deref_mut(), x);
        let b = self.cbr_train(blk.b, p, buf, a.out.clone());
        BlockTape { a, b }
    }

    /// Training-mode pass: normalisation uses the statistics of the current
    /// sample; running statistics are updated when `buffers` is given.
    pub fn forward_train<T: Scalar>(&self, params: &[T], mut buffers: Option<&mut [T]>, x: &Fmap<T>) -> (Fmap<T>, Tape<T>) {
        assert_eq!(params.len(), self.params.len, "parameter vector length");
        let lv = self.arch.levels;
        let mut enc = Vec::with_capacity(lv + 1);
        let mut pools = Vec::with_capacity(lv);
        let mut h = x.clone();
        for l in 0..lv {
            let t = self.block_train(self.enc[l], params, buffers.as_deref_mut(), h);
            let (pooled, arg) = maxpool2(&t.b.out);
            h = pooled;
            pools.push(arg);
            enc.push(t);
        }
        let t = self.block_train(self.enc[lv], params, buffers.as_deref_mut(), h);
        h = t.b.out.clone();
        enc.push(t);
        let mut up_in = vec![Fmap::zeros(0, 0, 0); lv];
        let mut dec: Vec<Option<BlockTape<T>>> = (0..lv).map(|_| None).collect();
        for l in (0..lv).rev() {
            let u = self.up(self.ups[l], params, &h);
            let cat = concat(&enc[l].b.out, &u);
            up_in[l] = h;
            let t = self.block_train(self.dec[l], params, buffers.as_deref_mut(), cat);
            h = t.b.out.clone();
            dec[l] = Some(t);
        }
        let out = self.head(params, &h);
        let tape = Tape {
            enc,
            pools,
            up_in,
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head_in: h,
        };
        (out, tape)
    }

    fn cbr_backward<T: Scalar>(&self, c: Cbr, p: &[T], t: &CbrTape<T>, mut dy: Fmap<T>, g: &mut [T], want_dx: bool) -> Option<Fmap<T>> {
        relu_backward_in_place(&t.out, &mut dy);
        let (gamma, _) = gamma_beta(p, c);
        let (dg, db) = g[c.affine..c.affine + 2 * c.cout].split_at_mut(c.cout);
        let dconv = batchnorm_backward(&t.bn, gamma, &dy, dg, db);
        let wr = c.weight..c.weight + weight_len(c);
        conv3x3_backward(&t.x, &p[wr.clone()], &dconv, &mut g[wr], want_dx)
    }

    fn block_backward<T: Scalar>(&self, blk: Block, p: &[T], t: &BlockTape<T>, dy: Fmap<T>, g: &mut [T], want_dx: bool) -> Option<Fmap<T>> {
        let d = self.cbr_backward(blk.b, p, &t.b, dy, g, true).expect("inner gradient");
        self.cbr_backward(blk.a, p, &t.a, d, g, want_dx)
    }

    /// Accumulates parameter gradients of `<d_out, forward(x)>` into `grads`.
    pub fn backward<T: Scalar>(&self, params: &[T], tape: &Tape<T>, d_out: &Fmap<T>, grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len, "gradient vector length");
        let lv = self.arch.levels;
        let c0 = self.arch.channels(0);
        let hw = self.head_weight..self.head_weight + c0;
        let mut dbias = [T::zero()];
        let mut dweight = vec![T::zero(); c0];
        let mut dh = conv1x1_backward(&tape.head_in, &params[hw.clone()], d_out, &mut dweight, &mut dbias);
        for (g, d) in grads[hw].iter_mut().zip(&dweight) {
            *g += *d;
        }
        grads[self.head_bias] += dbias[0];
        let mut dskips = Vec::with_capacity(lv);
        for l in 0..lv {
            let dcat = self.block_backward(self.dec[l], params, &tape.dec[l], dh, grads, true).expect("decoder gradient");
            let (dskip, du) = split(dcat, self.arch.channels(l));
            let u = self.ups[l];
            let wr = u.weight..u.weight + u.cin * u.cout * 4;
            let mut dw = vec![T::zero(); wr.len()];
            let mut db = vec![T::zero(); u.cout];
            dh = upconv2_backward(&tape.up_in[l], &params[wr.clone()], &du, &mut dw, &mut db);
            for (g, d) in grads[wr].iter_mut().zip(&dw) {
                *g += *d;
            }
            for (g, d) in grads[u.bias..u.bias + u.cout].iter_mut().zip(&db) {
                *g += *d;
            }
            dskips.push(dskip);
        }
        let mut d = self
            .block_backward(self.enc[lv], params, &tape.enc[lv], dh, grads, true)
            .expect("bottleneck gradient");
        for l in (0..lv).rev() {
            let src = &tape.enc[l].b.out;
            let mut up = maxpool2_backward(&d, &tape.pools[l], src.h, src.w);
            for (a, b) in up.data.iter_mut().zip(&dskips[l].data) {
                *a += *b;
            }
            match self.block_backward(self.enc[l], params, &tape.enc[l], up, grads, l > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, RngSeed};

    #[test]
    fn layout_is_deterministic_and_named() {
        let u = Unet::new(DenoiserArch { levels: 2, base_channels: 4 }).unwrap();
        let v = Unet::new(DenoiserArch { levels: 2, base_channels: 4 }).unwrap();
        assert_eq!(u.params, v.params);
        assert!(u.params.get("enc0.0.conv.weight").is_some());
        assert!(u.params.get("bottleneck.1.norm.beta").is_some());
        assert_eq!(u.params.get("head.weight").unwrap().shape, vec![1, 4]);
        // contiguous, non-overlapping
        let mut end = 0;
        for t in &u.params.tensors {
            assert_eq!(t.offset, end);
            end += t.len();
        }
        assert_eq!(end, u.params.len);
    }

    #[test]
    fn parameter_count_formula() {
        let arch = DenoiserArch { levels: 1, base_channels: 2 };
        let u = Unet::new(arch).unwrap();
        // enc0: 1->2, 2->2; bottleneck: 2->4, 4->4; dec0: 4->2, 2->2; up: 4->2; head
        let conv = 2 * 9 + 2 * 2 * 9 + 2 * 4 * 9 + 4 * 4 * 9 + 4 * 2 * 9 + 2 * 2 * 9;
        let norm = 2 * (2 + 2 + 4 + 4 + 2 + 2);
        let up = 4 * 2 * 4 + 2;
        assert_eq!(u.params.len, conv + norm + up + 2 + 1);
    }

    #[test]
    fn train_and_eval_agree_when_running_stats_match_sample() {
        // with zero head both passes give the constant bias
        let u = Unet::new(DenoiserArch { levels: 1, base_channels: 2 }).unwrap();
        let mut rng = seeded_rng(RngSeed(1), "init");
        let (mut p, b) = u.init::<f64>(&mut rng);
        let hb = u.params.get("head.bias").unwrap().offset;
        p[hb] = 0.5;
        let x = Fmap::from_vec(1, 4, 8, (0..32).map(|i| i as f64).collect());
        let e = u.forward_eval(&p, &b, &x);
        let (t, _) = u.forward_train(&p, None, &x);
        assert!(e.data.iter().chain(&t.data).all(|&v| v == 0.5));
    }
}
