//! Local-global enhancement: the wavelet and hybrid-attention branches
//! composed into one block, in seven wirings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{downsample, encode_tokens, hybrid_encode, AttentionParams};
use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{wavelet_decode, wavelet_encode, WaveletDecodeParams, WaveletEncodeParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LgeVariant {
    A,
    B,
    C,
    D,
    E,
    F,
    #[default]
    G,
}

impl LgeVariant {
    pub const ALL: [LgeVariant; 7] = [
        LgeVariant::A,
        LgeVariant::B,
        LgeVariant::C,
        LgeVariant::D,
        LgeVariant::E,
        LgeVariant::F,
        LgeVariant::G,
    ];
}

impl fmt::Display for LgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for LgeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LgeVariant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown LGE variant {s:?} (expected A..G)")))
    }
}

/// Computational unit in a wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    WaveletEncode,
    HybridEncode,
    /// Hybrid encode on the undownsampled grid.
    HybridEncodeFull,
    /// Learned 1×1 projection of the downsampled attention input.
    Projection,
    /// Nearest-neighbour upsampling; shape glue, no weights.
    Upsample,
    /// Upsample followed by a 1×1 conv, no skip from the input.
    PointwiseDecode,
    WaveletDecode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    Concat,
}

/// Topology of one enhancement block. Node 0 is the block input; blocks are
/// numbered in the order branches, then tail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Wiring {
    pub branches: Vec<Vec<Block>>,
    pub merge: Option<Merge>,
    pub tail: Vec<Block>,
    /// Constructible but known not to train.
    pub unstable: bool,
}

impl Wiring {
    pub fn merges(&self) -> usize {
        usize::from(self.merge.is_some())
    }

    /// Weighted units, excluding `Upsample` glue.
    pub fn stages(&self) -> usize {
        self.blocks().filter(|b| *b != Block::Upsample).count()
    }

    pub fn node_count(&self) -> usize {
        1 + self.blocks().count()
    }

    pub fn blocks(&self) -> impl Iterator<Item = Block> + '_ {
        self.branches.iter().flatten().chain(&self.tail).copied()
    }

    /// Data-flow edges between node indices.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        let mut next = 1;
        let mut ends = Vec::new();
        for branch in &self.branches {
            let mut prev = 0;
            for _ in branch {
                edges.push((prev, next));
                prev = next;
                next += 1;
            }
            ends.push(prev);
        }
        for (i, _) in self.tail.iter().enumerate() {
            if i == 0 {
                for &e in &ends {
                    edges.push((e, next));
                }
            } else {
                edges.push((next - 1, next));
            }
            next += 1;
        }
        edges
    }

    /// True if every branch is a straight chain feeding one tail chain.
    pub fn is_serial(&self) -> bool {
        self.branches.len() == 1
    }
}

pub fn build_variant(id: LgeVariant) -> Wiring {
    use Block::*;
    let (branches, merge, tail, unstable) = match id {
        LgeVariant::A => (vec![vec![WaveletEncode]], None, vec![WaveletDecode], false),
        LgeVariant::B => (vec![vec![HybridEncode]], None, vec![PointwiseDecode], false),
        LgeVariant::C => (vec![vec![HybridEncode, Projection]], None, vec![WaveletDecode], false),
        LgeVariant::D => (vec![vec![HybridEncode, Upsample, WaveletEncode]], None, vec![WaveletDecode], false),
        LgeVariant::E => (vec![vec![WaveletEncode, HybridEncode, Upsample]], None, vec![WaveletDecode], true),
        LgeVariant::F => (vec![vec![WaveletEncode, WaveletDecode, HybridEncodeFull]], None, vec![], false),
        LgeVariant::G => (
            vec![vec![WaveletEncode], vec![HybridEncode]],
            Some(Merge::Concat),
            vec![WaveletDecode],
            false,
        ),
    };
    Wiring {
        branches,
        merge,
        tail,
        unstable,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgeConfig {
    pub variant: LgeVariant,
    pub iterations: usize,
    pub heads: usize,
}

impl Default for LgeConfig {
    fn default() -> Self {
        LgeConfig {
            variant: LgeVariant::G,
            iterations: 4,
            heads: 4,
        }
    }
}

/// Weights of one repetition of the block. Unused slots stay `None`.
#[derive(Clone, Debug)]
pub struct LgeIteration {
    pub encode: Option<WaveletEncodeParams>,
    pub hybrid: Option<AttentionParams>,
    pub decode: Option<WaveletDecodeParams>,
    /// `[1,1,C,C]`: the variant-C stand-in for `F₂`, or the variant-B decoder.
    pub projection: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct LgeParams {
    pub variant: LgeVariant,
    pub channels: usize,
    pub iterations: Vec<LgeIteration>,
}

impl LgeParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        group: Group,
        prefix: &str,
        channels: usize,
        cfg: &LgeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.iterations == 0 {
            return Err(Error::Config("lge.iterations must be at least 1".into()));
        }
        if channels % 4 != 0 || channels == 0 {
            return dim_err("lge_forward", format!("C={channels} not divisible by 4"));
        }
        let wiring = build_variant(cfg.variant);
        if wiring.unstable {
            log::warn!("LGE variant {} is known not to converge", cfg.variant);
        }
        let has = |b: Block| wiring.blocks().any(|x| x == b);
        let mut iterations = Vec::with_capacity(cfg.iterations);
        for i in 0..cfg.iterations {
            let p = format!("{prefix}.it{i}");
            let encode = if has(Block::WaveletEncode) {
                Some(WaveletEncodeParams::new(store, group, &format!("{p}.we"), channels, rng)?)
            } else {
                None
            };
            let hybrid = if has(Block::HybridEncode) || has(Block::HybridEncodeFull) {
                let mut a = AttentionParams::new(store, group, &format!("{p}.he"), channels, cfg.heads, rng)?;
                if has(Block::HybridEncodeFull) {
                    a.down_stride = 1;
                }
                Some(a)
            } else {
                None
            };
            let decode = if has(Block::WaveletDecode) {
                Some(WaveletDecodeParams::new(store, group, &format!("{p}.wd"), channels, rng)?)
            } else {
                None
            };
            let projection = if has(Block::Projection) || has(Block::PointwiseDecode) {
                Some(store.kaiming(format!("{p}.proj"), group, &[1, 1, channels, channels], channels, rng))
            } else {
                None
            };
            iterations.push(LgeIteration {
                encode,
                hybrid,
                decode,
                projection,
            });
        }
        Ok(LgeParams {
            variant: cfg.variant,
            channels,
            iterations,
        })
    }

    pub fn wiring(&self) -> Wiring {
        build_variant(self.variant)
    }
}

fn slot<'a, P>(p: &'a Option<P>, what: &str) -> Result<&'a P> {
    p.as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("LGE params lack the {what} block")))
}

fn iterate<'t, T: Scalar>(
    g: &Graph<'t, T>,
    x: Var<'t, T>,
    it: &LgeIteration,
    variant: LgeVariant,
) -> Result<Var<'t, T>> {
    let zeros_like = |v: Var<'t, T>| g.input(Tensor::zeros(&v.shape()));
    let conv1 = |v: Var<'t, T>, k: ParamId| v.conv2d(g.param(k), 1, 0, 1);
    match variant {
        LgeVariant::A => {
            let f2 = wavelet_encode(g, x, slot(&it.encode, "encode")?)?;
            wavelet_decode(g, f2, zeros_like(f2), x, slot(&it.decode, "decode")?)
        }
        LgeVariant::B => {
            let f3 = hybrid_encode(g, x, slot(&it.hybrid, "hybrid")?)?;
            conv1(f3.upsample_nearest2()?, *slot(&it.projection, "projection")?)
        }
        LgeVariant::C => {
            let hp = slot(&it.hybrid, "hybrid")?;
            let s1 = downsample(g, x, hp)?;
            let f3 = encode_tokens(g, s1, hp)?;
            let f2 = conv1(s1, *slot(&it.projection, "projection")?)?;
            wavelet_decode(g, f2, f3, x, slot(&it.decode, "decode")?)
        }
        LgeVariant::D => {
            let f3 = hybrid_encode(g, x, slot(&it.hybrid, "hybrid")?)?;
            let f2 = wavelet_encode(g, f3.upsample_nearest2()?, slot(&it.encode, "encode")?)?;
            wavelet_decode(g, f2, f3, x, slot(&it.decode, "decode")?)
        }
        LgeVariant::E => {
            let s = x.shape();
            if s[0] % 4 != 0 || s[1] % 4 != 0 {
                return dim_err("lge_forward", format!("variant E needs extents divisible by 4, got {s:?}"));
            }
            let f2 = wavelet_encode(g, x, slot(&it.encode, "encode")?)?;
            let f3 = hybrid_encode(g, f2, slot(&it.hybrid, "hybrid")?)?.upsample_nearest2()?;
            wavelet_decode(g, f2, f3, x, slot(&it.decode, "decode")?)
        }
        LgeVariant::F => {
            let f2 = wavelet_encode(g, x, slot(&it.encode, "encode")?)?;
            let local = wavelet_decode(g, f2, zeros_like(f2), x, slot(&it.decode, "decode")?)?;
            hybrid_encode(g, local, slot(&it.hybrid, "hybrid")?)
        }
        LgeVariant::G => {
            let f2 = wavelet_encode(g, x, slot(&it.encode, "encode")?)?;
            let f3 = hybrid_encode(g, x, slot(&it.hybrid, "hybrid")?)?;
            wavelet_decode(g, f2, f3, x, slot(&it.decode, "decode")?)
        }
    }
}

/// Applies every iteration of the block in sequence. Output shape equals
/// input shape.
pub fn lge_forward<'t, T: Scalar>(g: &Graph<'t, T>, f0: Var<'t, T>, params: &LgeParams) -> Result<Var<'t, T>> {
    let s = f0.shape();
    if s.len() != 3 || s[2] != params.channels {
        return dim_err(
            "lge_forward",
            format!("input {s:?} for a C={} block", params.channels),
        );
    }
    if s[0] % 2 != 0 || s[1] % 2 != 0 {
        return dim_err("lge_forward", format!("odd extents {}×{}", s[0], s[1]));
    }
    let mut x = f0;
    for it in &params.iterations {
        x = iterate(g, x, it, params.variant)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn build(variant: LgeVariant, iterations: usize, seed: u64) -> (ParamStore<f64>, LgeParams) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(seed);
        let cfg = LgeConfig {
            variant,
            iterations,
            heads: 2,
        };
        let p = LgeParams::new(&mut store, Group::Stage(0), "lge", 16, &cfg, &mut rng).unwrap();
        (store, p)
    }

    fn input(shape: &[usize]) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, &mut crate::rng::seeded(77))
    }

    #[test]
    fn wiring_counts() {
        let g = build_variant(LgeVariant::G);
        assert_eq!((g.branches.len(), g.merges()), (2, 1));
        assert_eq!(g.merge, Some(Merge::Concat));
        let a = build_variant(LgeVariant::A);
        assert_eq!((a.branches.len(), a.merges()), (1, 0));
        let d = build_variant(LgeVariant::D);
        assert!(d.is_serial());
        assert_eq!(d.stages(), 3);
        assert!(build_variant(LgeVariant::E).unstable);
        assert!(LgeVariant::ALL.iter().filter(|v| build_variant(**v).unstable).count() == 1);
    }

    #[test]
    fn edges_follow_topology() {
        // input → WE(1), input → HE(2), both → WD(3)
        assert_eq!(build_variant(LgeVariant::G).edges(), vec![(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(build_variant(LgeVariant::A).edges(), vec![(0, 1), (1, 2)]);
        for v in LgeVariant::ALL {
            let w = build_variant(v);
            assert_eq!(w.node_count(), 1 + w.blocks().count());
            assert!(w.edges().iter().all(|&(a, b)| a < b && b < w.node_count()));
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("g".parse::<LgeVariant>().unwrap(), LgeVariant::G);
        assert_eq!("C".parse::<LgeVariant>().unwrap(), LgeVariant::C);
        assert!("H".parse::<LgeVariant>().is_err());
        assert_eq!(LgeVariant::default(), LgeVariant::G);
    }

    #[test]
    fn every_variant_preserves_shape() {
        for v in LgeVariant::ALL {
            let (store, p) = build(v, 2, 3);
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let y = lge_forward(&g, g.input(input(&[8, 8, 16])), &p).unwrap();
            assert_eq!(y.shape(), vec![8, 8, 16], "variant {v}");
        }
    }

    #[test]
    fn g_four_iterations_shape() {
        let (store, p) = build(LgeVariant::G, 4, 5);
        assert_eq!(p.iterations.len(), 4);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        assert_eq!(lge_forward(&g, g.input(input(&[8, 8, 16])), &p).unwrap().shape(), vec![8, 8, 16]);
    }

    #[test]
    fn g_with_silent_hybrid_equals_a() {
        let (mut gstore, gp) = build(LgeVariant::G, 2, 11);
        let (mut astore, ap) = build(LgeVariant::A, 2, 11);
        for (gi, ai) in gp.iterations.iter().zip(&ap.iterations) {
            let h = gi.hybrid.as_ref().unwrap();
            for id in [h.wq, h.wk, h.wv, h.wo, h.ffn_w1, h.ffn_b1, h.ffn_w2, h.ffn_b2, h.down_kernel, h.ln_gain, h.ln_bias] {
                let z = Tensor::zeros(gstore.get(id).shape());
                gstore.set(id, z).unwrap();
            }
            let (ge, ae) = (gi.encode.as_ref().unwrap(), ai.encode.as_ref().unwrap());
            astore.set(ae.reduce_kernel, gstore.get(ge.reduce_kernel).clone()).unwrap();
            let (gd, ad) = (gi.decode.as_ref().unwrap(), ai.decode.as_ref().unwrap());
            for (gid, aid) in [
                (gd.fw_kernel, ad.fw_kernel),
                (gd.depth_kernels[0], ad.depth_kernels[0]),
                (gd.depth_kernels[1], ad.depth_kernels[1]),
                (gd.decode_kernel, ad.decode_kernel),
                (gd.fp_projection, ad.fp_projection),
            ] {
                astore.set(aid, gstore.get(gid).clone()).unwrap();
            }
        }
        let x = input(&[8, 8, 16]);
        let run = |store: &ParamStore<f64>, p: &LgeParams| {
            let tape = Tape::new();
            let g = Graph::new(&tape, store);
            let y = lge_forward(&g, g.input(x.clone()), p).unwrap().value();
            (*y).clone()
        };
        assert_eq!(run(&gstore, &gp), run(&astore, &ap));
    }

    #[test]
    fn deterministic_output() {
        let (store, p) = build(LgeVariant::G, 1, 9);
        let run = || {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            (*lge_forward(&g, g.input(input(&[4, 4, 16])), &p).unwrap().value()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn parameter_count_linear_in_iterations() {
        let n1 = build(LgeVariant::G, 1, 1).0.num_scalars();
        let n3 = build(LgeVariant::G, 3, 1).0.num_scalars();
        assert_eq!(n3, 3 * n1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::rng::seeded(1);
        let zero = LgeConfig {
            iterations: 0,
            ..LgeConfig::default()
        };
        assert!(LgeParams::new(&mut store, Group::Stage(0), "x", 16, &zero, &mut rng).is_err());
        assert!(LgeParams::new(&mut store, Group::Stage(0), "x", 6, &LgeConfig::default(), &mut rng).is_err());
        let (store, p) = build(LgeVariant::G, 1, 2);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        assert!(lge_forward(&g, g.input(input(&[6, 6, 8])), &p).is_err());
    }
}
