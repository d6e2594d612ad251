//! Orthonormal 2-D Haar analysis/synthesis and the wavelet encode/decode
//! blocks built on it.
//!
//! For each 2×2 block `[[a, b], [c, d]]` (row-major):
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
//! hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2
//! ```

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{dim_err, Result};
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The four half-resolution subbands of one analysis step.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> SubbandSet<T> {
    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    pub fn energy(&self) -> T {
        self.ll.sum_squares() + self.lh.sum_squares() + self.hl.sum_squares() + self.hh.sum_squares()
    }

    fn check(&self) -> Result<()> {
        let s = self.ll.shape();
        if s.len() != 3 || [&self.lh, &self.hl, &self.hh].iter().any(|b| b.shape() != s) {
            return dim_err(
                "idwt2_haar",
                format!(
                    "inconsistent subbands {:?} {:?} {:?} {:?}",
                    s,
                    self.lh.shape(),
                    self.hl.shape(),
                    self.hh.shape()
                ),
            );
        }
        Ok(())
    }
}

fn even_hwc<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return dim_err(op, format!("expected [H,W,C], got {:?}", x.shape()));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return dim_err(op, format!("extents {h}×{w} must be even and non-zero"));
    }
    Ok((h, w, c))
}

/// Calls `f(a, b, c, d, dst)` per block and channel, where `a..d` index the
/// full-resolution block and `dst` its half-resolution position.
fn for_each_block(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (h2, w2) = (h / 2, w / 2);
    for i in 0..h2 {
        for j in 0..w2 {
            let a = ((2 * i) * w + 2 * j) * c;
            let b = a + c;
            let cc = a + w * c;
            let d = cc + c;
            let dst = (i * w2 + j) * c;
            for ch in 0..c {
                f(a + ch, b + ch, cc + ch, d + ch, dst + ch);
            }
        }
    }
}

pub fn dwt2_haar<T: Scalar>(x: &Tensor<T>) -> Result<SubbandSet<T>> {
    let (h, w, c) = even_hwc("dwt2_haar", x)?;
    let half = T::lit(0.5);
    let shape = [h / 2, w / 2, c];
    let n = shape.iter().product();
    let (mut ll, mut lh, mut hl, mut hh) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let s = x.data();
    for_each_block(h, w, c, |a, b, cc, d, o| {
        let (a, b, cc, d) = (s[a], s[b], s[cc], s[d]);
        ll[o] = (a + b + cc + d) * half;
        lh[o] = (a - b + cc - d) * half;
        hl[o] = (a + b - cc - d) * half;
        hh[o] = (a - b - cc + d) * half;
    });
    Ok(SubbandSet {
        ll: Tensor::from_vec(&shape, ll)?,
        lh: Tensor::from_vec(&shape, lh)?,
        hl: Tensor::from_vec(&shape, hl)?,
        hh: Tensor::from_vec(&shape, hh)?,
    })
}

pub fn idwt2_haar<T: Scalar>(s: &SubbandSet<T>) -> Result<Tensor<T>> {
    s.check()?;
    let (h2, w2, c) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); h * w * c];
    let (ll, lh, hl, hh) = (s.ll.data(), s.lh.data(), s.hl.data(), s.hh.data());
    for_each_block(h, w, c, |a, b, cc, d, o| {
        let (p, q, r, t) = (ll[o], lh[o], hl[o], hh[o]);
        out[a] = (p + q + r + t) * half;
        out[b] = (p - q + r - t) * half;
        out[cc] = (p + q - r - t) * half;
        out[d] = (p - q - r + t) * half;
    });
    Tensor::from_vec(&[h, w, c], out)
}

/// Analysis with subbands packed along channels: `[H,W,C] → [H/2,W/2,4C]`
/// in the order LL, LH, HL, HH.
pub fn dwt2_packed<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = even_hwc("dwt2_haar", x)?;
    let half = T::lit(0.5);
    let c4 = 4 * c;
    let mut out = vec![T::zero(); h * w * c];
    let s = x.data();
    let (h2, w2) = (h / 2, w / 2);
    for i in 0..h2 {
        for j in 0..w2 {
            let a0 = ((2 * i) * w + 2 * j) * c;
            let (b0, c0) = (a0 + c, a0 + w * c);
            let d0 = c0 + c;
            let o = (i * w2 + j) * c4;
            for ch in 0..c {
                let (a, b, cc, d) = (s[a0 + ch], s[b0 + ch], s[c0 + ch], s[d0 + ch]);
                out[o + ch] = (a + b + cc + d) * half;
                out[o + c + ch] = (a - b + cc - d) * half;
                out[o + 2 * c + ch] = (a + b - cc - d) * half;
                out[o + 3 * c + ch] = (a - b - cc + d) * half;
            }
        }
    }
    Tensor::from_vec(&[h2, w2, c4], out)
}

/// Inverse of [`dwt2_packed`]: `[H/2,W/2,4C] → [H,W,C]`.
pub fn idwt2_packed<T: Scalar>(y: &Tensor<T>) -> Result<Tensor<T>> {
    if y.rank() != 3 || y.shape()[2] % 4 != 0 {
        return dim_err("idwt2_haar", format!("expected [h,w,4C], got {:?}", y.shape()));
    }
    let (h2, w2, c4) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let half = T::lit(0.5);
    let mut out = vec![T::zero(); h * w * c];
    let s = y.data();
    for i in 0..h2 {
        for j in 0..w2 {
            let a0 = ((2 * i) * w + 2 * j) * c;
            let (b0, c0) = (a0 + c, a0 + w * c);
            let d0 = c0 + c;
            let o = (i * w2 + j) * c4;
            for ch in 0..c {
                let (p, q, r, t) = (s[o + ch], s[o + c + ch], s[o + 2 * c + ch], s[o + 3 * c + ch]);
                out[a0 + ch] = (p + q + r + t) * half;
                out[b0 + ch] = (p - q + r - t) * half;
                out[c0 + ch] = (p + q - r - t) * half;
                out[d0 + ch] = (p - q - r + t) * half;
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Channel reduction ahead of the transform.
#[derive(Clone, Debug)]
pub struct WaveletEncodeParams {
    /// 1×1 kernel `[1, 1, C, C/4]`.
    pub reduce_kernel: ParamId,
    pub channels: usize,
}

impl WaveletEncodeParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        group: Group,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels % 4 != 0 || channels == 0 {
            return dim_err("wavelet_encode", format!("C={channels} not divisible by 4"));
        }
        let reduce_kernel = store.kaiming(
            format!("{prefix}.reduce"),
            group,
            &[1, 1, channels, channels / 4],
            channels,
            rng,
        );
        Ok(WaveletEncodeParams {
            reduce_kernel,
            channels,
        })
    }
}

/// `F₂ = Concat(DWT(Reduce(F₀)))`: `[H,W,C] → [H/2,W/2,C]`.
pub fn wavelet_encode<'t, T: Scalar>(
    g: &Graph<'t, T>,
    f0: Var<'t, T>,
    p: &WaveletEncodeParams,
) -> Result<Var<'t, T>> {
    let shape = f0.shape();
    if shape.len() != 3 || shape[2] % 4 != 0 {
        return dim_err("wavelet_encode", format!("C must be divisible by 4, got {shape:?}"));
    }
    if shape[2] != p.channels {
        return dim_err("wavelet_encode", format!("params for C={}, input {shape:?}", p.channels));
    }
    let f1 = f0.conv2d(g.param(p.reduce_kernel), 1, 0, 1)?;
    f1.dwt2_haar()
}

/// Weights of the decode block.
#[derive(Clone, Debug)]
pub struct WaveletDecodeParams {
    /// `[1, 1, C/2, C]` projection after inverse-transform upsampling.
    pub fw_kernel: ParamId,
    /// Two depthwise `[3, 3, 1, C]` kernels around a residual.
    pub depth_kernels: [ParamId; 2],
    /// `[1, 1, 2C, C]`.
    pub decode_kernel: ParamId,
    /// `[1, 1, C, C]` producing `F_p` from `F₀`.
    pub fp_projection: ParamId,
    pub channels: usize,
}

impl WaveletDecodeParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        group: Group,
        prefix: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        if c % 4 != 0 || c == 0 {
            return dim_err("wavelet_decode", format!("C={c} not divisible by 4"));
        }
        Ok(WaveletDecodeParams {
            fw_kernel: store.kaiming(format!("{prefix}.fw"), group, &[1, 1, c / 2, c], c / 2, rng),
            depth_kernels: [
                store.kaiming(format!("{prefix}.depth0"), group, &[3, 3, 1, c], 9, rng),
                store.kaiming(format!("{prefix}.depth1"), group, &[3, 3, 1, c], 9, rng),
            ],
            decode_kernel: store.kaiming(format!("{prefix}.decode"), group, &[1, 1, 2 * c, c], 2 * c, rng),
            fp_projection: store.kaiming(format!("{prefix}.fp"), group, &[1, 1, c, c], c, rng),
            channels: c,
        })
    }
}

/// `S₂ = FW(Concat(F₂,F₃))`, `F₄ = Depth(F_p + S₂)`, `F₅ = Decode(Concat(F₄,F₀))`.
///
/// `FW` splits the `2C` channels into four `C/2` subbands, synthesizes them
/// to full resolution, and projects to `C` channels.
pub fn wavelet_decode<'t, T: Scalar>(
    g: &Graph<'t, T>,
    f2: Var<'t, T>,
    f3: Var<'t, T>,
    f0: Var<'t, T>,
    p: &WaveletDecodeParams,
) -> Result<Var<'t, T>> {
    let (s2s, s3s, s0s) = (f2.shape(), f3.shape(), f0.shape());
    if s2s != s3s {
        return dim_err("wavelet_decode", format!("F2 {s2s:?} vs F3 {s3s:?}"));
    }
    if s0s.len() != 3 || s2s.len() != 3 || s0s[0] != 2 * s2s[0] || s0s[1] != 2 * s2s[1] || s0s[2] != s2s[2] {
        return dim_err("wavelet_decode", format!("F0 {s0s:?} is not double-resolution of {s2s:?}"));
    }
    if s0s[2] != p.channels {
        return dim_err("wavelet_decode", format!("params for C={}, input {s0s:?}", p.channels));
    }
    let c = p.channels;
    let up = Var::concat_last(&[f2, f3])?.idwt2_haar()?;
    let s2 = up.conv2d(g.param(p.fw_kernel), 1, 0, 1)?;
    let fp = f0.conv2d(g.param(p.fp_projection), 1, 0, 1)?;
    let y = fp.add(s2)?;
    let inner = y
        .conv2d(g.param(p.depth_kernels[0]), 1, 1, c)?
        .relu()?
        .conv2d(g.param(p.depth_kernels[1]), 1, 1, c)?;
    let f4 = y.add(inner)?;
    Var::concat_last(&[f4, f0])?.conv2d(g.param(p.decode_kernel), 1, 0, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn constant_block_has_no_detail() {
        let s = dwt2_haar(&t(&[2, 2, 1], &[1.0; 4])).unwrap();
        assert_eq!((s.ll.item(), s.lh.item(), s.hl.item(), s.hh.item()), (2.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn ramp_block() {
        let s = dwt2_haar(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!((s.ll.item(), s.lh.item(), s.hl.item(), s.hh.item()), (5.0, -1.0, -2.0, 0.0));
    }

    #[test]
    fn inverse_of_pure_ll() {
        let z = t(&[1, 1, 1], &[0.0]);
        let s = SubbandSet {
            ll: t(&[1, 1, 1], &[2.0]),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        };
        assert_eq!(idwt2_haar(&s).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn zero_subbands_give_zero() {
        let z = Tensor::<f64>::zeros(&[3, 2, 4]);
        let s = SubbandSet {
            ll: z.clone(),
            lh: z.clone(),
            hl: z.clone(),
            hh: z,
        };
        assert_eq!(idwt2_haar(&s).unwrap(), Tensor::zeros(&[6, 4, 4]));
    }

    #[test]
    fn subband_shapes() {
        let s = dwt2_haar(&Tensor::<f32>::ones(&[8, 8, 16])).unwrap();
        for b in [&s.ll, &s.lh, &s.hl, &s.hh] {
            assert_eq!(b.shape(), &[4, 4, 16]);
        }
    }

    #[test]
    fn odd_extent_rejected() {
        assert!(dwt2_haar(&Tensor::<f64>::ones(&[3, 4, 1])).is_err());
        assert!(dwt2_packed(&Tensor::<f64>::ones(&[4, 5, 1])).is_err());
    }

    #[test]
    fn inconsistent_subbands_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 2, 1]);
        let s = SubbandSet {
            ll: a.clone(),
            lh: a.clone(),
            hl: a,
            hh: Tensor::zeros(&[2, 1, 1]),
        };
        assert!(idwt2_haar(&s).is_err());
    }

    #[test]
    fn packed_matches_separate_subbands() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[4, 6, 3], 1.0, &mut rng);
        let s = dwt2_haar(&x).unwrap();
        let packed = dwt2_packed(&x).unwrap();
        let expect = crate::ops::concat_last(&[&s.ll, &s.lh, &s.hl, &s.hh]).unwrap();
        assert_eq!(packed, expect);
        assert_eq!(idwt2_packed(&packed).unwrap().max_abs_diff(&x) < 1e-15, true);
    }

    #[test]
    fn encode_shapes_and_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::rng::seeded(0);
        let p = WaveletEncodeParams::new(&mut store, Group::Stage(0), "we", 16, &mut rng).unwrap();
        {
let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let y = wavelet_encode(&g, g.input(Tensor::ones(&[8, 8, 16])), &p).unwrap();
        assert_eq!(y.shape(), vec![4, 4, 16]);
        let z = wavelet_encode(&g, g.input(Tensor::zeros(&[8, 8, 16])), &p).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
        }

        assert!(WaveletEncodeParams::new(&mut store, Group::Stage(0), "bad", 6, &mut rng).is_err());
    }

    #[test]
    fn encode_with_summing_reduce_gives_channel_sum_subbands() {
        // C=4 → one reduced channel; a reduce kernel of ones sums the inputs
        let mut store = ParamStore::<f64>::new();
        let id = store.add("reduce", Group::Stage(0), Tensor::ones(&[1, 1, 4, 1]));
        let p = WaveletEncodeParams {
            reduce_kernel: id,
            channels: 4,
        };
        let x = t(
            &[2, 2, 4],
            &[1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 4.0],
        );
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let y = wavelet_encode(&g, g.input(x), &p).unwrap();
        // channel sums per pixel are [[1,2],[3,4]]
        assert_eq!(y.value().data(), &[5.0, -1.0, -2.0, 0.0]);
    }

    #[test]
    fn decode_shapes_and_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::rng::seeded(0);
        let p = WaveletDecodeParams::new(&mut store, Group::Stage(0), "wd", 16, &mut rng).unwrap();
        {
let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let f2 = g.input(Tensor::ones(&[4, 4, 16]));
        let f3 = g.input(Tensor::ones(&[4, 4, 16]));
        let f0 = g.input(Tensor::ones(&[8, 8, 16]));
        assert_eq!(wavelet_decode(&g, f2, f3, f0, &p).unwrap().shape(), vec![8, 8, 16]);
        let bad = g.input(Tensor::ones(&[6, 8, 16]));
        assert!(wavelet_decode(&g, f2, f3, bad, &p).is_err());
        }

        store.zero_all();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let z = wavelet_decode(
            &g,
            g.input(Tensor::zeros(&[4, 4, 16])),
            g.input(Tensor::zeros(&[4, 4, 16])),
            g.input(Tensor::zeros(&[8, 8, 16])),
            &p,
        )
        .unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }
}
