//! Heatmap prediction, masked multi-stage query selection and the windowed
//! query decoder.

use std::cmp::Ordering;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::params::{Graph, Group, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::scene::{wrap_angle, Box3D, GridSpec};
use crate::tensor::Tensor;

/// Initial bias of the heatmap logits: a prior score of about 0.1.
pub const HEATMAP_PRIOR_BIAS: f64 = -2.19;
/// Regression outputs per query: δx, δy, z, log l, log w, log h, sin, cos.
pub const BOX_CODE: usize = 8;

#[derive(Clone, Debug)]
pub struct HeatmapHeadParams {
    /// `[3, 3, C, hidden]` and `[hidden]`.
    pub conv: ParamId,
    pub conv_bias: ParamId,
    /// `[1, 1, hidden, classes]` and `[classes]`.
    pub out: ParamId,
    pub out_bias: ParamId,
    pub classes: usize,
}

impl HeatmapHeadParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        group: Group,
        prefix: &str,
        channels: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        HeatmapHeadParams {
            conv: store.kaiming(format!("{prefix}.conv"), group, &[3, 3, channels, hidden], 9 * channels, rng),
            conv_bias: store.zeros(format!("{prefix}.conv_b"), group, &[hidden]),
            out: store.kaiming(format!("{prefix}.out"), group, &[1, 1, hidden, classes], hidden, rng),
            out_bias: store.add(
                format!("{prefix}.out_b"),
                group,
                Tensor::full(&[classes], T::lit(HEATMAP_PRIOR_BIAS)),
            ),
            classes,
        }
    }
}

/// Pre-sigmoid scores `[H, W, classes]`.
pub fn heatmap_logits<'t, T: Scalar>(g: &Graph<'t, T>, f: Var<'t, T>, p: &HeatmapHeadParams) -> Result<Var<'t, T>> {
    f.conv2d(g.param(p.conv), 1, 1, 1)?
        .add_bias(g.param(p.conv_bias))?
        .relu()?
        .conv2d(g.param(p.out), 1, 0, 1)?
        .add_bias(g.param(p.out_bias))
}

/// 3×3 conv, relu, 1×1 conv, sigmoid.
pub fn heatmap_head<'t, T: Scalar>(g: &Graph<'t, T>, f: Var<'t, T>, p: &HeatmapHeadParams) -> Result<Var<'t, T>> {
    heatmap_logits(g, f, p)?.sigmoid()
}

/// Binary spatial mask; `true` marks a cell still open for selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub stage_index: usize,
}

impl StageMask {
    pub fn ones(height: usize, width: usize) -> Self {
        StageMask {
            height,
            width,
            bits: vec![true; height * width],
            stage_index: 0,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn open_cells(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// True when every open cell here is also open in `earlier`.
    pub fn is_subset_of(&self, earlier: &StageMask) -> bool {
        self.bits.iter().zip(&earlier.bits).all(|(now, before)| !*now || *before)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    /// Heatmap value at selection time.
    pub score: f64,
    pub stage: usize,
}

impl Query {
    pub fn cell_index(&self, width: usize) -> usize {
        self.row * width + self.col
    }

    /// Feature vector of the query's cell in an `[H, W, C]` map.
    pub fn feature<T: Scalar>(&self, f: &Tensor<T>) -> Vec<T> {
        let (w, c) = (f.shape()[1], f.shape()[2]);
        let k = self.cell_index(w) * c;
        f.data()[k..k + c].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub queries: Vec<Query>,
    pub mask: StageMask,
    /// Fewer open cells than requested.
    pub capped: bool,
}

fn check_heatmap<T: Scalar>(op: &'static str, h: &Tensor<T>, m: &StageMask) -> Result<usize> {
    if h.rank() != 3 || h.shape()[0] != m.height || h.shape()[1] != m.width {
        return dim_err(op, format!("heatmap {:?} vs mask {}×{}", h.shape(), m.height, m.width));
    }
    Ok(h.shape()[2])
}

/// The `k` best open cells, one query per cell (its best class). Ordering is
/// score descending, then row, column, class. Selected cells are closed in
/// the returned mask.
pub fn masked_topk<T: Scalar>(h: &Tensor<T>, m: &StageMask, k: usize) -> Result<TopK> {
    let classes = check_heatmap("masked_topk", h, m)?;
    let mut cand: Vec<Query> = Vec::with_capacity(m.open_cells());
    let d = h.data();
    for row in 0..m.height {
        for col in 0..m.width {
            if !m.get(row, col) || classes == 0 {
                continue;
            }
            let base = (row * m.width + col) * classes;
            let mut best = 0;
            for c in 1..classes {
                if d[base + c] > d[base + best] {
                    best = c;
                }
            }
            cand.push(Query {
                row,
                col,
                class_id: best,
                score: d[base + best].as_f64(),
                stage: m.stage_index,
            });
        }
    }
    let capped = k > cand.len();
    let take = k.min(cand.len());
    let order = |a: &Query, b: &Query| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    };
    if take < cand.len() && take > 0 {
        cand.select_nth_unstable_by(take - 1, order);
    }
    cand.truncate(take);
    cand.sort_by(order);
    if capped {
        log::warn!("masked_topk: requested {k}, only {take} open cells");
    }
    let mut mask = m.clone();
    for q in &cand {
        mask.set(q.row, q.col, false);
    }
    Ok(TopK {
        queries: cand,
        mask,
        capped,
    })
}

/// Min-pool erosion: every cell within the `kernel × kernel` window of a
/// closed cell is closed. Cells beyond the border count as open.
pub fn box_pool_mask(m: &StageMask, kernel: usize) -> Result<StageMask> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("pool kernel must be odd, got {kernel}")));
    }
    let r = kernel / 2;
    let mut out = m.clone();
    for row in 0..m.height {
        for col in 0..m.width {
            if m.get(row, col) {
                continue;
            }
            for rr in row.saturating_sub(r)..=(row + r).min(m.height - 1) {
                for cc in col.saturating_sub(r)..=(col + r).min(m.width - 1) {
                    out.set(rr, cc, false);
                }
            }
        }
    }
    Ok(out)
}

/// Ground truth restricted to open cells, broadcast over classes.
pub fn stage_targets<T: Scalar>(gt: &Tensor<T>, m: &StageMask) -> Result<Tensor<T>> {
    let classes = check_heatmap("stage_targets", gt, m)?;
    let mut out = gt.clone();
    for (cell, open) in m.bits.iter().enumerate() {
        if !open {
            out.data_mut()[cell * classes..(cell + 1) * classes].fill(T::zero());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// In selection order.
    pub queries: Vec<Query>,
    /// Mask entering each stage during the first round; index `K` is the
    /// mask after the last stage.
    pub stage_masks: Vec<StageMask>,
    pub capped: bool,
}

impl Selection {
    pub fn stage_queries(&self, stage: usize) -> impl Iterator<Item = &Query> {
        self.queries.iter().filter(move |q| q.stage == stage)
    }
}

/// Runs the mask fold over per-stage heatmaps: each stage takes
/// `per_stage` queries under the running mask, which is then eroded by
/// [`box_pool_mask`]. A `total` budget above `K × per_stage` continues with
/// further rounds over the stages in the same order, so a larger budget
/// only appends to the selection.
pub fn select_multistage<T: Scalar>(
    heatmaps: &[Tensor<T>],
    per_stage: usize,
    total: Option<usize>,
    pool_kernel: usize,
) -> Result<Selection> {
    let k = heatmaps.len();
    if k == 0 {
        return Err(Error::InvalidArgument("no stages".into()));
    }
    let s = heatmaps[0].shape();
    if s.len() != 3 || heatmaps.iter().any(|h| h.shape() != s) {
        return dim_err("run_multistage", "stage heatmaps differ in shape");
    }
    let (h, w) = (s[0], s[1]);
    let base = k * per_stage;
    if base > h * w {
        return Err(Error::InvalidArgument(format!(
            "K·N = {base} exceeds the {} maskable cells",
            h * w
        )));
    }
    let budget = total.unwrap_or(base).max(base);
    let mut mask = StageMask::ones(h, w);
    let mut stage_masks = Vec::with_capacity(k + 1);
    let mut queries = Vec::with_capacity(budget);
    let mut capped = false;
    let mut round = 0;
    loop {
        for (i, hm) in heatmaps.iter().enumerate() {
            mask.stage_index = i;
            if round == 0 {
                stage_masks.push(mask.clone());
            }
            let want = per_stage.min(budget - queries.len());
            if want == 0 {
                continue;
            }
            let top = masked_topk(hm, &mask, want)?;
            capped |= top.capped;
            queries.extend(top.queries);
            mask = box_pool_mask(&top.mask, pool_kernel)?;
        }
        if round == 0 {
            stage_masks.push(mask.clone());
        }
        round += 1;
        if queries.len() >= budget {
            break;
        }
        if mask.open_cells() == 0 || per_stage == 0 {
            capped = true;
            break;
        }
    }
    Ok(Selection {
        queries,
        stage_masks,
        capped,
    })
}

/// Writes `stage,row,col,class,score` records.
pub fn write_query_csv(w: &mut impl Write, queries: &[Query]) -> Result<()> {
    writeln!(w, "stage,row,col,class,score")?;
    for q in queries {
        writeln!(w, "{},{},{},{},{}", q.stage, q.row, q.col, q.class_id, q.score)?;
    }
    Ok(())
}

/// Single cross-attention layer from each query cell to a window of the
/// feature map, followed by box and score heads.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub radius: usize,
    pub channels: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Learned offset embedding `[(2r+1)², C]`.
    pub pos: ParamId,
    /// `[C, 8]` and `[8]`, zero-initialized.
    pub reg: ParamId,
    pub reg_bias: ParamId,
    /// `[C, 1]` and `[1]`, zero-initialized.
    pub cls: ParamId,
    pub cls_bias: ParamId,
}

impl DecoderParams {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, channels: usize, radius: usize, rng: &mut R) -> Self {
        let c = channels;
        let win = (2 * radius + 1) * (2 * radius + 1);
        let g = Group::Decoder;
        DecoderParams {
            radius,
            channels,
            wq: store.kaiming("dec.wq", g, &[c, c], c, rng),
            wk: store.kaiming("dec.wk", g, &[c, c], c, rng),
            wv: store.kaiming("dec.wv", g, &[c, c], c, rng),
            pos: store.add("dec.pos", g, Tensor::uniform(&[win, c], 0.1, rng)),
            reg: store.zeros("dec.reg", g, &[c, BOX_CODE]),
            reg_bias: store.zeros("dec.reg_b", g, &[BOX_CODE]),
            cls: store.zeros("dec.cls", g, &[c, 1]),
            cls_bias: store.zeros("dec.cls_b", g, &[1]),
        }
    }

    pub fn window(&self) -> usize {
        let d = 2 * self.radius + 1;
        d * d
    }
}

/// Raw decoder outputs for a batch of queries.
pub struct DecodedQueries<'t, T> {
    /// `[Q, 8]`.
    pub regression: Var<'t, T>,
    /// `[Q, 1]` additive logit correction of the heatmap score.
    pub refine: Var<'t, T>,
}

/// Decodes queries against one `[H, W, C]` feature map.
pub fn decode_query_outputs<'t, T: Scalar>(
    g: &Graph<'t, T>,
    queries: &[Query],
    f: Var<'t, T>,
    p: &DecoderParams,
) -> Result<DecodedQueries<'t, T>> {
    let s = f.shape();
    if s.len() != 3 || s[2] != p.channels {
        return dim_err("decode_queries", format!("features {s:?} for C={}", p.channels));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if let Some(q) = queries.iter().find(|q| q.row >= h || q.col >= w) {
        return Err(Error::InvalidArgument(format!(
            "query at ({}, {}) outside the {h}×{w} grid",
            q.row, q.col
        )));
    }
    let nq = queries.len();
    let win = p.window();
    let r = p.radius as isize;
    let mut window_idx = Vec::with_capacity(nq * win);
    let mut pos_idx = Vec::with_capacity(nq * win);
    for q in queries {
        let mut slot = 0;
        for dr in -r..=r {
            for dc in -r..=r {
                let (rr, cc) = (q.row as isize + dr, q.col as isize + dc);
                let inside = rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize;
                window_idx.push(inside.then(|| rr as usize * w + cc as usize));
                pos_idx.push(Some(slot));
                slot += 1;
            }
        }
    }
    let flat = f.reshape(&[h * w, c])?;
    let centre = flat.gather_rows(queries.iter().map(|q| Some(q.cell_index(w))).collect())?;
    let keys = flat
        .gather_rows(window_idx)?
        .add(g.param(p.pos).gather_rows(pos_idx)?)?;
    let q = centre.matmul(g.param(p.wq))?.reshape(&[nq, 1, c])?;
    let k = keys.matmul(g.param(p.wk))?.reshape(&[nq, win, c])?;
    let v = keys.matmul(g.param(p.wv))?.reshape(&[nq, win, c])?;
    let scale = T::one() / T::from_usize_lossy(c).sqrt();
    let attended = q.attention(k, v, scale)?.reshape(&[nq, c])?;
    let hidden = centre.add(attended)?;
    Ok(DecodedQueries {
        regression: hidden.matmul(g.param(p.reg))?.add_bias(g.param(p.reg_bias))?,
        refine: hidden.matmul(g.param(p.cls))?.add_bias(g.param(p.cls_bias))?,
    })
}

const LOG_SIZE_LIMIT: f64 = 6.0;

/// Turns decoder outputs into world-frame boxes.
pub fn boxes_from_outputs<T: Scalar>(
    queries: &[Query],
    regression: &Tensor<T>,
    refine: &Tensor<T>,
    grid: &GridSpec,
) -> Vec<Box3D> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let r: Vec<f64> = regression.data()[i * BOX_CODE..(i + 1) * BOX_CODE]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let base = grid.cell_center(q.row, q.col);
            let size = [3, 4, 5].map(|j| r[j].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp());
            let p = q.score.clamp(1e-6, 1.0 - 1e-6);
            let logit = (p / (1.0 - p)).ln() + refine.data()[i].as_f64();
            Box3D {
                center: [
                    base[0] + r[0] * grid.cell_size,
                    base[1] + r[1] * grid.cell_size,
                    r[2],
                ],
                size,
                yaw: wrap_angle(r[6].atan2(r[7])),
                class_id: q.class_id,
                score: 1.0 / (1.0 + (-logit).exp()),
            }
        })
        .collect()
}

/// Regression target of `gt` relative to the center of cell `(row, col)`.
pub fn box_code(gt: &Box3D, row: usize, col: usize, grid: &GridSpec) -> [f64; BOX_CODE] {
    let c = grid.cell_center(row, col);
    let (s, co) = gt.yaw.sin_cos();
    [
        (gt.center[0] - c[0]) / grid.cell_size,
        (gt.center[1] - c[1]) / grid.cell_size,
        gt.center[2],
        gt.size[0].ln(),
        gt.size[1].ln(),
        gt.size[2].ln(),
        s,
        co,
    ]
}

/// Forward-only convenience: decodes queries against `f` into boxes.
pub fn decode_queries<'t, T: Scalar>(
    g: &Graph<'t, T>,
    queries: &[Query],
    f: Var<'t, T>,
    grid: &GridSpec,
    p: &DecoderParams,
) -> Result<Vec<Box3D>> {
    let out = decode_query_outputs(g, queries, f, p)?;
    Ok(boxes_from_outputs(queries, &out.regression.value(), &out.refine.value(), grid))
}
