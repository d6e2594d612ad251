//! The full detector: BEV stem, per-stage LGE and heatmap heads, and the
//! shared query decoder. Also the checkpoint format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::config::{ModelConfig, StageMode};
use crate::error::{dim_err, Error, Result};
use crate::head::{select_multistage, DecoderParams, HeatmapHeadParams, Selection};
use crate::lge::{lge_forward, LgeConfig, LgeParams};
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::scene::{BEV_STAT_CHANNELS, NUM_CLASSES};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x6d6f_6465_6c;

/// Two 3×3 conv + relu layers lifting BEV statistics to `C` channels.
#[derive(Clone, Debug)]
pub struct StemParams {
    pub k1: ParamId,
    pub b1: ParamId,
    pub k2: ParamId,
    pub b2: ParamId,
}

impl StemParams {
    pub fn new<T: Scalar, R: rand::Rng>(store: &mut ParamStore<T>, inputs: usize, channels: usize, rng: &mut R) -> Self {
        let g = Group::Backbone;
        StemParams {
            k1: store.kaiming("stem.k1", g, &[3, 3, inputs, channels], 9 * inputs, rng),
            b1: store.zeros("stem.b1", g, &[channels]),
            k2: store.kaiming("stem.k2", g, &[3, 3, channels, channels], 9 * channels, rng),
            b2: store.zeros("stem.b2", g, &[channels]),
        }
    }
}

pub fn stem_forward<'t, T: Scalar>(g: &Graph<'t, T>, x: Var<'t, T>, p: &StemParams) -> Result<Var<'t, T>> {
    x.conv2d(g.param(p.k1), 1, 1, 1)?
        .add_bias(g.param(p.b1))?
        .relu()?
        .conv2d(g.param(p.k2), 1, 1, 1)?
        .add_bias(g.param(p.b2))?
        .relu()
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub lge: LgeParams,
    pub head: HeatmapHeadParams,
}

/// Architecture description stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub lge: LgeConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Detector<T> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
    pub stem: StemParams,
    pub stages: Vec<StageParams>,
    pub decoder: DecoderParams,
}

/// Per-stage tensors of one forward pass.
pub struct StageOutputs<'t, T> {
    pub base: Var<'t, T>,
    /// Enhanced feature map per stage, `[H, W, C]`.
    pub features: Vec<Var<'t, T>>,
    /// Sigmoid heatmaps per stage, `[H, W, classes]`.
    pub heatmaps: Vec<Var<'t, T>>,
}

impl<T: Scalar> Detector<T> {
    pub fn new(model: &ModelConfig, lge: &LgeConfig, seed: u64) -> Result<Self> {
        if model.stages == 0 {
            return Err(Error::Config("model.stages must be at least 1".into()));
        }
        let mut rng = rng::derived(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let c = model.channels;
        let stem = StemParams::new(&mut store, BEV_STAT_CHANNELS, c, &mut rng);
        let mut stages = Vec::with_capacity(model.stages);
        for i in 0..model.stages {
            let group = Group::Stage(i);
            let prefix = format!("stage{i}");
            let lge = LgeParams::new(&mut store, group, &format!("{prefix}.lge"), c, lge, &mut rng)?;
            let head = HeatmapHeadParams::new(
                &mut store,
                group,
                &format!("{prefix}.head"),
                c,
                model.head_hidden,
                NUM_CLASSES,
                &mut rng,
            );
            stages.push(StageParams { lge, head });
        }
        let decoder = DecoderParams::new(&mut store, c, model.decoder_radius, &mut rng);
        Ok(Detector {
            arch: Architecture {
                model: model.clone(),
                lge: lge.clone(),
                seed,
            },
            store,
            stem,
            stages,
            decoder,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Runs the stem and every stage on `bev` (`[H, W, 5]`).
    pub fn forward<'t>(&self, g: &Graph<'t, T>, bev: &Tensor<T>) -> Result<StageOutputs<'t, T>> {
        if bev.rank() != 3 || bev.shape()[2] != BEV_STAT_CHANNELS {
            return dim_err("detector", format!("BEV input {:?}", bev.shape()));
        }
        let base = stem_forward(g, g.input(bev.clone()), &self.stem)?;
        let mut features = Vec::with_capacity(self.stages.len());
        let mut heatmaps = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let input = match (self.arch.model.mode, features.last()) {
                (StageMode::Cascaded, Some(&prev)) => prev,
                _ => base,
            };
            let f = lge_forward(g, input, &s.lge)?;
            heatmaps.push(crate::head::heatmap_head(g, f, &s.head)?);
            features.push(f);
        }
        Ok(StageOutputs {
            base,
            features,
            heatmaps,
        })
    }

    /// Forward pass followed by the masked multi-stage selection. `total`
    /// raises the query budget beyond `K × N`.
    pub fn run_multistage<'t>(
        &self,
        g: &Graph<'t, T>,
        bev: &Tensor<T>,
        total: Option<usize>,
    ) -> Result<(StageOutputs<'t, T>, Selection)> {
        let out = self.forward(g, bev)?;
        let maps: Vec<Tensor<T>> = out.heatmaps.iter().map(|h| (*h.value()).clone()).collect();
        let sel = select_multistage(&maps, self.arch.model.queries, total, self.arch.model.pool_kernel)?;
        Ok((out, sel))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// `LGECKPT1`, element width, architecture JSON, then each parameter as
    /// a name and a flattened tensor.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        let arch = serde_json::to_vec(&self.arch)?;
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for e in self.store.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&e.value.reshape(&[e.value.numel()])?.to_bytes()?);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let width = r.u32()? as usize;
        if width != T::BYTES {
            return Err(Error::Format(format!(
                "checkpoint holds {width}-byte scalars, expected {}",
                T::BYTES
            )));
        }
        let n = r.u32()? as usize;
        let arch: Architecture = serde_json::from_slice(r.take(n)?)?;
        let mut det = Detector::new(&arch.model, &arch.lge, arch.seed)?;
        let count = r.u32()? as usize;
        if count != det.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameters, architecture needs {}",
                det.store.len()
            )));
        }
        for e in det.store.entries_mut() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("parameter name".into()))?;
            if name != e.name {
                return Err(Error::Format(format!("expected parameter {}, found {name}", e.name)));
            }
            let (flat, used) = Tensor::<T>::decode_prefix(&bytes[r.pos..])?;
            r.pos += used;
            if flat.numel() != e.value.numel() {
                return Err(Error::Format(format!("parameter {name}: wrong size")));
            }
            e.value = flat.into_reshape(e.value.shape())?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(det)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"LGECKPT1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::lge::LgeVariant;

    fn small(mode: StageMode, stages: usize) -> (ModelConfig, LgeConfig) {
        let m = ModelConfig {
            channels: 8,
            head_hidden: 8,
            stages,
            queries: 4,
            mode,
            pool_kernel: 3,
            decoder_radius: 1,
        };
        let l = LgeConfig {
            variant: LgeVariant::G,
            iterations: 1,
            heads: 2,
        };
        (m, l)
    }

    fn bev(h: usize) -> Tensor<f64> {
        let mut r = rng::seeded(3);
        Tensor::uniform(&[h, h, BEV_STAT_CHANNELS], 1.0, &mut r)
    }

    #[test]
    fn forward_shapes() {
        let (m, l) = small(StageMode::Parallel, 2);
        let det = Detector::<f64>::new(&m, &l, 1).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &det.store);
        let out = det.forward(&g, &bev(8)).unwrap();
        assert_eq!(out.features.len(), 2);
        assert_eq!(out.heatmaps[1].shape(), vec![8, 8, NUM_CLASSES]);
        assert_eq!(out.features[0].shape(), vec![8, 8, 8]);
    }

    #[test]
    fn single_stage_modes_agree() {
        let (mp, l) = small(StageMode::Parallel, 1);
        let mc = ModelConfig {
            mode: StageMode::Cascaded,
            ..mp.clone()
        };
        let a = Detector::<f64>::new(&mp, &l, 5).unwrap();
        let b = Detector::<f64>::new(&mc, &l, 5).unwrap();
        let x = bev(8);
        let ta = Tape::new();
        let tb = Tape::new();
        let (_, sa) = a.run_multistage(&Graph::new(&ta, &a.store), &x, None).unwrap();
        let (_, sb) = b.run_multistage(&Graph::new(&tb, &b.store), &x, None).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn parallel_stages_are_isolated() {
        let (m, l) = small(StageMode::Parallel, 3);
        let mut det = Detector::<f64>::new(&m, &l, 2).unwrap();
        let x = bev(8);
        let before = {
            let tape = Tape::new();
            let g = Graph::new(&tape, &det.store);
            (*det.forward(&g, &x).unwrap().heatmaps[0].value()).clone()
        };
        for e in det.store.entries_mut() {
            if e.group == Group::Stage(1) || e.group == Group::Stage(2) {
                e.value = e.value.map(|v| v * 3.0 + 0.1);
            }
        }
        let tape = Tape::new();
        let g = Graph::new(&tape, &det.store);
        let after = det.forward(&g, &x).unwrap();
        assert_eq!(*after.heatmaps[0].value(), before);
    }

    #[test]
    fn cascaded_differs_from_parallel() {
        let (mp, l) = small(StageMode::Parallel, 2);
        let mc = ModelConfig {
            mode: StageMode::Cascaded,
            ..mp.clone()
        };
        let a = Detector::<f64>::new(&mp, &l, 5).unwrap();
        let b = Detector::<f64>::new(&mc, &l, 5).unwrap();
        let x = bev(8);
        let ta = Tape::new();
        let tb = Tape::new();
        let fa = a.forward(&Graph::new(&ta, &a.store), &x).unwrap();
        let fb = b.forward(&Graph::new(&tb, &b.store), &x).unwrap();
        assert_eq!(*fa.heatmaps[0].value(), *fb.heatmaps[0].value());
        assert_ne!(*fa.heatmaps[1].value(), *fb.heatmaps[1].value());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, l) = small(StageMode::Cascaded, 2);
        let mut det = Detector::<f32>::new(&m, &l, 9).unwrap();
        det.store.entries_mut()[0].value.data_mut()[0] = 0.123;
        let back = Detector::<f32>::from_bytes(&det.to_bytes().unwrap()).unwrap();
        assert_eq!(back.arch, det.arch);
        for (a, b) in back.store.entries().iter().zip(det.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let bytes = det.to_bytes().unwrap();
        assert!(Detector::<f64>::from_bytes(&bytes).is_err());
        assert!(Detector::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let (m, l) = small(StageMode::Parallel, 2);
        let a = Detector::<f32>::new(&m, &l, 4).unwrap();
        let b = Detector::<f32>::new(&m, &l, 4).unwrap();
        let c = Detector::<f32>::new(&m, &l, 5).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }
}
