//! Inference loop with the dual-template update rule, and training.

mod config;
mod crop;
mod train;

use std::fmt::Write as _;
use std::path::Path;

pub use config::{TrackerConfig, KEYS as CONFIG_KEYS};
pub use crop::{crop_image, CropWindow};
pub use train::{make_sample, sample_loss, train, train_with, AdamW, StepLog, TrainReport, TrainSample};

use crate::embed::{patchify, FramePair, Image, StreamPatches};
use crate::error::{Error, Result};
use crate::head::{decode_box, BBox, HeadOutput};
use crate::model::{forward, ModelConfig};
use crate::synthgen::{Modality, SequenceDataset};
use crate::tensor::{read_checkpoint, write_checkpoint, Params, Tape, Tensor};

pub const MIN_EXTENT: f64 = 2.0;
pub const CONFIG_FILE: &str = "config.txt";

/// Dual-template update gate: the interval has elapsed and the peak score
/// clears the threshold.
pub fn update_due(frames_since_update: usize, score: f64, interval: usize, threshold: f64) -> bool {
    frames_since_update >= interval && score > threshold
}

fn clamp_extent(b: &BBox) -> BBox {
    BBox {
        w: if b.w.is_finite() { b.w.max(MIN_EXTENT) } else { MIN_EXTENT },
        h: if b.h.is_finite() { b.h.max(MIN_EXTENT) } else { MIN_EXTENT },
        ..*b
    }
}

/// Crop of side `factor * max(w, h)` around `b`, resampled to `out` pixels.
pub fn crop_around(b: &BBox, factor: f64, out: usize) -> CropWindow {
    let b = clamp_extent(b);
    CropWindow::centered(b.cx, b.cy, factor * b.w.max(b.h), out)
}

/// Per-sequence tracking state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    template_init: [Tensor; 2],
    template_dyn: [Tensor; 2],
    frames_since_update: usize,
    last_box: BBox,
    last_window: Option<CropWindow>,
    frame_size: (usize, usize),
}

impl TrackState {
    /// RGB and X patches of the initial template.
    pub fn initial_templates(&self) -> &[Tensor; 2] {
        &self.template_init
    }

    pub fn dynamic_templates(&self) -> &[Tensor; 2] {
        &self.template_dyn
    }

    pub fn frames_since_update(&self) -> usize {
        self.frames_since_update
    }

    pub fn last_box(&self) -> BBox {
        self.last_box
    }

    pub fn last_window(&self) -> Option<CropWindow> {
        self.last_window
    }
}

/// Interaction weights of one stream after one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub stream: Modality,
    pub token_weights: Option<Tensor>,
    pub embed_weights: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub bbox: BBox,
    pub score: f64,
    pub updated: bool,
    pub attention: Vec<AttentionRecord>,
}

/// Frozen model plus tracking settings.
#[derive(Clone, Debug)]
pub struct Tracker {
    cfg: TrackerConfig,
    model: ModelConfig,
    params: Params,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model_config();
        for spec in model.param_specs() {
            let t = params
                .get(&spec.name)
                .map_err(|_| Error::Tracker(format!("checkpoint lacks `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Tracker(format!(
                    "`{}` has shape {:?}, config expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(Self { cfg, model, params })
    }

    /// Reads `config.txt` and the checkpoint from a training output directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = TrackerConfig::load(&dir.join(CONFIG_FILE))?;
        Self::new(cfg, read_checkpoint(dir)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_checkpoint(&self.params, dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.cfg.to_text())?;
        Ok(())
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    fn template_pair(&self, fp: &FramePair, b: &BBox) -> Result<[Tensor; 2]> {
        let win = crop_around(b, self.cfg.template_factor, self.cfg.template_size);
        Ok([
            patchify(&crop_image(&fp.rgb, &win), self.cfg.patch)?,
            patchify(&crop_image(&fp.x, &win), self.cfg.patch)?,
        ])
    }

    pub fn init(&self, fp: &FramePair, bb: &BBox) -> Result<TrackState> {
        let (w, h) = (fp.width() as f64, fp.height() as f64);
        if !bb.is_valid() || bb.cx < 0.0 || bb.cy < 0.0 || bb.cx > w || bb.cy > h {
            return Err(Error::Tracker(format!(
                "initial box ({}, {}, {}, {}) is not inside the {w}x{h} frame",
                bb.cx, bb.cy, bb.w, bb.h
            )));
        }
        let t = self.template_pair(fp, bb)?;
        Ok(TrackState {
            template_dyn: t.clone(),
            template_init: t,
            frames_since_update: 0,
            last_box: *bb,
            last_window: None,
            frame_size: (fp.width(), fp.height()),
        })
    }

    /// Counts the frame and refreshes the dynamic template when due.
    pub fn maybe_update_template(&self, st: &mut TrackState, score: f64, bb: &BBox, fp: &FramePair) -> Result<bool> {
        st.frames_since_update += 1;
        if update_due(st.frames_since_update, score, self.cfg.update_interval, self.cfg.update_threshold) {
            st.template_dyn = self.template_pair(fp, bb)?;
            st.frames_since_update = 0;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn track_step(&self, st: &mut TrackState, fp: &FramePair, record_attention: bool) -> Result<StepResult> {
        let win = crop_around(&st.last_box, self.cfg.search_factor, self.cfg.search_size);
        let patches = |m: usize, img: &Image| -> Result<StreamPatches> {
            Ok(StreamPatches {
                template_init: st.template_init[m].clone(),
                template_dyn: st.template_dyn[m].clone(),
                search: patchify(&crop_image(img, &win), self.cfg.patch)?,
            })
        };
        let rgb = patches(0, &fp.rgb)?;
        let x = patches(1, &fp.x)?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = forward(&mut tape, &bound, &self.model, &rgb, &x)?;
        let ho = HeadOutput::from_vars(&tape, &out.head)?;
        let stride = self.cfg.search_size as f64 / ho.grid() as f64;
        let in_crop = decode_box(&ho, stride);
        let score = in_crop.score.unwrap_or(0.0);
        let mut bbox = clamp_extent(&win.to_frame(&in_crop));
        let (fw, fh) = st.frame_size;
        bbox.cx = bbox.cx.clamp(0.0, fw as f64);
        bbox.cy = bbox.cy.clamp(0.0, fh as f64);
        bbox.score = Some(score);

        let mut attention = Vec::new();
        if record_attention {
            let val = |v: Option<crate::tensor::Var>| v.map(|v| tape.value(v).clone());
            for tr in &out.traces {
                for (stream, o) in [(Modality::Rgb, &tr.rgb), (Modality::X, &tr.x)] {
                    attention.push(AttentionRecord {
                        layer: tr.layer,
                        stream,
                        token_weights: val(o.token_weights),
                        embed_weights: val(o.embed_weights),
                    });
                }
            }
        }

        st.last_box = bbox;
        st.last_window = Some(win);
        let updated = self.maybe_update_template(st, score, &bbox, fp)?;
        Ok(StepResult {
            bbox,
            score,
            updated,
            attention,
        })
    }

    /// Initializes on the first frame's ground truth and tracks the rest.
    /// The first output is the initial box with score 1.
    pub fn track_sequence(&self, ds: &SequenceDataset, record_attention: bool) -> Result<SequenceTrack> {
        let first = ds
            .frames
            .first()
            .ok_or_else(|| Error::Tracker("empty sequence".into()))?;
        let mut st = self.init(first, &ds.gt[0])?;
        let mut boxes = vec![ds.gt[0].with_score(1.0)];
        let mut attention = String::new();
        for fp in &ds.frames[1..] {
            let r = self.track_step(&mut st, fp, record_attention)?;
            if record_attention {
                attention.push_str(&format_attention(fp.frame_index, &r.attention));
            }
            boxes.push(r.bbox);
        }
        Ok(SequenceTrack { boxes, attention })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTrack {
    pub boxes: Vec<BBox>,
    /// Attention export text; empty unless requested.
    pub attention: String,
}

impl SequenceTrack {
    /// Prediction file contents, one record per frame.
    pub fn predictions_text(&self) -> String {
        self.boxes
            .iter()
            .enumerate()
            .map(|(i, b)| crate::head::format_prediction(i, b) + "\n")
            .collect()
    }
}

fn write_matrix(out: &mut String, header: &str, t: &Tensor) {
    let (r, c) = t.dims2().unwrap_or((1, t.len()));
    let _ = writeln!(out, "{header} {r}x{c}");
    for i in 0..r {
        let row: Vec<String> = t.data()[i * c..(i + 1) * c].iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Text blocks of the token-learning (`A`) and token-embedding (`B_w`)
/// weights of one frame.
pub fn format_attention(frame: usize, records: &[AttentionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let base = format!("frame {frame} layer {} stream {}", r.layer, r.stream.name());
        if let Some(a) = &r.token_weights {
            write_matrix(&mut out, &format!("{base} A"), a);
        }
        if let Some(b) = &r.embed_weights {
            write_matrix(&mut out, &format!("{base} B_w"), b);
        }
    }
    out
}
