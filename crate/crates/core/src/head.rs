//! Prediction head over the channel-concatenated search tokens of both
//! streams, box decoding and the training loss.

use crate::error::{Error, Result};
use crate::model::{Init, ParamSpec};
use crate::tensor::{Bound, Tape, Tensor, Var};

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const PROB_EPS: f64 = 1e-7;

/// Axis-aligned box with center coordinates, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h, score: None }
    }

    /// Box from its top-left corner and extent.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn with_score(self, score: f64) -> Self {
        Self { score: Some(score), ..self }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    /// Area from the edges, so that a box and its own overlap agree exactly.
    pub fn area(&self) -> f64 {
        (self.right() - self.left()).max(0.0) * (self.bottom() - self.top()).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.right().min(o.right()) - self.left().max(o.left())).max(0.0);
        let h = (self.bottom().min(o.bottom()) - self.top().max(o.top())).max(0.0);
        w * h
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn giou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        let cw = self.right().max(o.right()) - self.left().min(o.left());
        let ch = self.bottom().max(o.bottom()) - self.top().min(o.top());
        let hull = cw * ch;
        if hull <= 0.0 || union <= 0.0 {
            return 0.0;
        }
        inter / union - (hull - union) / hull
    }

    pub fn center_distance(&self, o: &BBox) -> f64 {
        (self.cx - o.cx).hypot(self.cy - o.cy)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { cx: self.cx + dx, cy: self.cy + dy, ..*self }
    }
}

/// `1 - GIoU(pred, gt)`, in `[0, 2]`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - pred.giou(gt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 5.0, giou: 2.0 }
    }
}

const STACKS: [(&str, usize); 3] = [("cls", 1), ("off", 2), ("size", 2)];

pub fn param_specs(dim: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for (name, out) in STACKS {
        let p = format!("head.{name}");
        specs.push(ParamSpec::weight(format!("{p}.w1"), vec![2 * dim, hidden]));
        specs.push(ParamSpec::new(format!("{p}.b1"), vec![hidden], Init::Zeros));
        specs.push(ParamSpec::weight(format!("{p}.w2"), vec![hidden, out]));
        specs.push(ParamSpec::new(format!("{p}.b2"), vec![out], Init::Zeros));
    }
    specs
}

/// Per-cell predictions on the tape, one row per search cell in row-major
/// order: score `N x 1` in (0,1), offset `N x 2` in cells, size `N x 2` in
/// cells.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub score: Var,
    pub offset: Var,
    pub size: Var,
    pub grid: usize,
}

fn stack(tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let p = format!("head.{name}");
    let h = tape.matmul(x, bound.at(&p, "w1")?)?;
    let h = tape.add_bias(h, bound.at(&p, "b1")?)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, bound.at(&p, "w2")?)?;
    tape.add_bias(o, bound.at(&p, "b2")?)
}

pub fn predict(tape: &mut Tape, bound: &Bound, search_r: Var, search_x: Var) -> Result<HeadVars> {
    let (n, _) = tape.value(search_r).dims2()?;
    if tape.shape(search_r) != tape.shape(search_x) {
        return Err(Error::Shape {
            op: "predict",
            detail: format!("{:?} vs {:?}", tape.shape(search_r), tape.shape(search_x)),
        });
    }
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || n == 0 {
        return Err(Error::Shape {
            op: "predict",
            detail: format!("{n} search tokens do not form a square grid"),
        });
    }
    let cat = tape.concat(&[search_r, search_x], 1)?;
    let cls = stack(tape, bound, "cls", cat)?;
    let off = stack(tape, bound, "off", cat)?;
    let size = stack(tape, bound, "size", cat)?;
    let score = tape.sigmoid(cls);
    let offset = tape.sigmoid(off);
    let size = tape.sigmoid(size);
    let size = tape.scale(size, grid as f64);
    Ok(HeadVars { score, offset, size, grid })
}

/// Head predictions as plain values: score `G x G`, offset and size
/// `2 x G x G` (channel, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub score: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

impl HeadOutput {
    pub fn from_vars(tape: &Tape, hv: &HeadVars) -> Result<Self> {
        let g = hv.grid;
        let planes = |v: Var| -> Result<Tensor> {
            let t = tape.value(v);
            let mut out = vec![0.0; 2 * g * g];
            for cell in 0..g * g {
                out[cell] = t.data()[2 * cell];
                out[g * g + cell] = t.data()[2 * cell + 1];
            }
            Tensor::new(vec![2, g, g], out)
        };
        Ok(Self {
            score: tape.value(hv.score).clone().reshape(&[g, g])?,
            offset: planes(hv.offset)?,
            size: planes(hv.size)?,
        })
    }

    pub fn grid(&self) -> usize {
        self.score.shape()[0]
    }
}

/// Row-major index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Box at the score peak, in pixels of the search crop.
pub fn decode_box(ho: &HeadOutput, stride: f64) -> BBox {
    let g = ho.grid();
    let t = argmax(ho.score.data());
    let (yd, xd) = (t / g, t % g);
    let plane = |p: &Tensor, c: usize| p.data()[c * g * g + t];
    BBox {
        cx: (xd as f64 + plane(&ho.offset, 0)) * stride,
        cy: (yd as f64 + plane(&ho.offset, 1)) * stride,
        w: plane(&ho.size, 0) * stride,
        h: plane(&ho.size, 1) * stride,
        score: Some(ho.score.data()[t]),
    }
}

/// Cell containing the point `(x, y)` given in cell units, clamped to the grid.
pub fn cell_of(x: f64, y: f64, grid: usize) -> (usize, usize) {
    let clamp = |v: f64| (v.floor().max(0.0) as usize).min(grid - 1);
    (clamp(x), clamp(y))
}

/// Gaussian heatmap peaked at the cell holding the box center, with
/// `sigma = radius / 3` and the radius set by half the larger box side
/// (at least one cell). All quantities are in cell units.
pub fn gaussian_target(grid: usize, cx: f64, cy: f64, w: f64, h: f64) -> Tensor {
    let (ix, iy) = cell_of(cx, cy, grid);
    let radius = (w.max(h) / 2.0).max(1.0);
    let sigma = radius / 3.0;
    let mut data = vec![0.0; grid * grid];
    for y in 0..grid {
        for x in 0..grid {
            let d2 = (x as f64 - ix as f64).powi(2) + (y as f64 - iy as f64).powi(2);
            data[y * grid + x] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    Tensor::new(vec![grid, grid], data).expect("grid data")
}

/// Center-point focal loss over a probability map and a heatmap target,
/// normalized by the number of positive cells.
pub fn focal_loss(tape: &mut Tape, p: Var, target: &Tensor) -> Result<Var> {
    if tape.value(p).len() != target.len() {
        return Err(Error::Shape {
            op: "focal_loss",
            detail: format!("{:?} vs {:?}", tape.shape(p), target.shape()),
        });
    }
    let shape = tape.shape(p).to_vec();
    let pos: Vec<f64> = target.data().iter().map(|&t| if t >= 1.0 { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = target
        .data()
        .iter()
        .map(|&t| if t >= 1.0 { 0.0 } else { (1.0 - t).powf(FOCAL_BETA) })
        .collect();
    let num_pos = pos.iter().sum::<f64>().max(1.0);
    let lo = tape.constant(Tensor::filled(&shape, PROB_EPS));
    let hi = tape.constant(Tensor::filled(&shape, 1.0 - PROB_EPS));
    let pc = tape.maximum(p, lo)?;
    let pc = tape.minimum(pc, hi)?;
    let neg_pc = tape.scale(pc, -1.0);
    let one_minus = tape.shift(neg_pc, 1.0);

    let log_p = tape.log(pc);
    let w_pos = tape.powf(one_minus, FOCAL_ALPHA);
    let pos_term = tape.mul(w_pos, log_p)?;
    let pos_mask = tape.constant(Tensor::new(shape.clone(), pos)?);
    let pos_term = tape.mul(pos_term, pos_mask)?;

    let log_q = tape.log(one_minus);
    let w_neg = tape.powf(pc, FOCAL_ALPHA);
    let neg_term = tape.mul(w_neg, log_q)?;
    let neg_mask = tape.constant(Tensor::new(shape, neg)?);
    let neg_term = tape.mul(neg_term, neg_mask)?;

    let both = tape.add(pos_term, neg_term)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0 / num_pos))
}

/// [`focal_loss`] on plain values.
pub fn focal_loss_value(p: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = focal_loss(&mut tape, pv, target)?;
    Ok(tape.value(l).item())
}

/// `1 - GIoU` between a `[cx, cy, w, h]` box on the tape and a fixed box.
pub fn giou_loss_var(tape: &mut Tape, pred: Var, gt: &BBox) -> Result<Var> {
    if tape.value(pred).len() != 4 {
        return Err(Error::Shape {
            op: "giou_loss",
            detail: format!("box of shape {:?}", tape.shape(pred)),
        });
    }
    let mut c = |v: f64| tape.constant(Tensor::new(vec![1], vec![v]).expect("scalar"));
    let (gx1, gx2, gy1, gy2, zero) = (c(gt.left()), c(gt.right()), c(gt.top()), c(gt.bottom()), c(0.0));
    let g_area = gt.area();
    let cx = tape.gather(pred, &[0])?;
    let cy = tape.gather(pred, &[1])?;
    let w = tape.gather(pred, &[2])?;
    let h = tape.gather(pred, &[3])?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;

    let ix1 = tape.maximum(x1, gx1)?;
    let ix2 = tape.minimum(x2, gx2)?;
    let iy1 = tape.maximum(y1, gy1)?;
    let iy2 = tape.minimum(y2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.maximum(iw, zero)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.maximum(ih, zero)?;
    let inter = tape.mul(iw, ih)?;
    let p_area = tape.mul(w, h)?;
    let sum_area = tape.shift(p_area, g_area);
    let union = tape.sub(sum_area, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(x1, gx1)?;
    let hx2 = tape.maximum(x2, gx2)?;
    let hy1 = tape.minimum(y1, gy1)?;
    let hy2 = tape.maximum(y2, gy2)?;
    let hw = tape.sub(hx2, hx1)?;
    let hh = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw, hh)?;
    let gap = tape.sub(hull, union)?;
    let gap = tape.div(gap, hull)?;
    let giou = tape.sub(iou, gap)?;
    let neg = tape.scale(giou, -1.0);
    let loss = tape.shift(neg, 1.0);
    Ok(tape.sum(loss))
}

/// Loss terms for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub focal: Var,
    pub l1: Var,
    pub giou: Var,
}

/// Focal + λ₁·L1 + λ₂·GIoU for a ground-truth box given in pixels of a
/// square search crop of side `search_size`. The regression terms read the
/// predictions at the ground-truth cell and compare boxes normalized by the
/// crop side.
pub fn total_loss(
    tape: &mut Tape,
    hv: &HeadVars,
    gt: &BBox,
    search_size: f64,
    weights: &LossWeights,
) -> Result<LossParts> {
    let g = hv.grid;
    let stride = search_size / g as f64;
    let (ix, iy) = cell_of(gt.cx / stride, gt.cy / stride, g);
    let target = gaussian_target(g, gt.cx / stride, gt.cy / stride, gt.w / stride, gt.h / stride);
    let score = tape.reshape(hv.score, &[g, g])?;
    let focal = focal_loss(tape, score, &target)?;

    let t = iy * g + ix;
    let off = tape.gather(hv.offset, &[2 * t, 2 * t + 1])?;
    let cell = tape.constant(Tensor::new(vec![2], vec![ix as f64, iy as f64])?);
    let center = tape.add(off, cell)?;
    let size = tape.gather(hv.size, &[2 * t, 2 * t + 1])?;
    let center = tape.reshape(center, &[1, 2])?;
    let size = tape.reshape(size, &[1, 2])?;
    let pred = tape.concat(&[center, size], 1)?;
    let pred = tape.scale(pred, 1.0 / g as f64);

    let gt_n = BBox::new(gt.cx / search_size, gt.cy / search_size, gt.w / search_size, gt.h / search_size);
    let gt_vec = tape.constant(Tensor::new(vec![1, 4], vec![gt_n.cx, gt_n.cy, gt_n.w, gt_n.h])?);
    let diff = tape.sub(pred, gt_vec)?;
    let diff = tape.abs(diff);
    let l1 = tape.mean(diff);
    let giou = giou_loss_var(tape, pred, &gt_n)?;

    let a = tape.scale(l1, weights.l1);
    let b = tape.scale(giou, weights.giou);
    let total = tape.add(focal, a)?;
    let total = tape.add(total, b)?;
    Ok(LossParts { total, focal, l1, giou })
}

/// One prediction record: `frame_index,cx,cy,w,h,score`.
pub fn format_prediction(frame: usize, b: &BBox) -> String {
    format!(
        "{frame},{},{},{},{},{}",
        b.cx,
        b.cy,
        b.w,
        b.h,
        b.score.unwrap_or(0.0)
    )
}

pub fn parse_prediction(line: &str) -> Result<(usize, BBox)> {
    let f: Vec<&str> = line.trim().split(',').collect();
    if f.len() != 6 {
        return Err(Error::Format(format!("prediction line `{line}` needs 6 fields")));
    }
    let frame = f[0]
        .parse()
        .map_err(|_| Error::Format(format!("bad frame index in `{line}`")))?;
    let mut v = [0.0; 5];
    for (slot, s) in v.iter_mut().zip(&f[1..]) {
        *slot = s
            .parse()
            .map_err(|_| Error::Format(format!("bad number `{s}` in `{line}`")))?;
    }
    Ok((frame, BBox::new(v[0], v[1], v[2], v[3]).with_score(v[4])))
}
