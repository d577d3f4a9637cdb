//! Shared patch tokenization for both modality streams.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Bound, Tape, Tensor, Var};

/// `H x W x 3` image with channel-interleaved values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Embed(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Clamps to `[0, 1]` and rounds to the 8-bit grid, so the image
    /// survives a PPM round trip unchanged.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer sized from dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|b| f64::from(*b) / 255.0).collect(),
        }
    }

    /// Binary PPM (P6, 8-bit).
    pub fn load_ppm(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::ImageEncoder;
        let rgb = self.to_rgb8();
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        PnmEncoder::new(file)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)?;
        Ok(())
    }
}

/// One time step of paired RGB / X input.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub rgb: Image,
    pub x: Image,
    pub frame_index: usize,
}

impl FramePair {
    pub fn new(rgb: Image, x: Image, frame_index: usize) -> Result<Self> {
        if rgb.width != x.width || rgb.height != x.height {
            return Err(Error::Embed(format!(
                "modalities differ in size: {}x{} vs {}x{}",
                rgb.width, rgb.height, x.width, x.height
            )));
        }
        if !rgb.data.iter().chain(&x.data).all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rgb, x, frame_index })
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }
}

/// Patch and crop geometry shared by the embedding and the tracker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub patch: usize,
    pub template: usize,
    pub search: usize,
    pub dim: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            patch: 8,
            template: 32,
            search: 64,
            dim: 64,
        }
    }
}

impl Geometry {
    pub fn template_grid(&self) -> usize {
        self.template / self.patch
    }

    pub fn search_grid(&self) -> usize {
        self.search / self.patch
    }

    /// Template tokens for the initial and the dynamic template together.
    pub fn n_template(&self) -> usize {
        2 * self.template_grid() * self.template_grid()
    }

    pub fn n_search(&self) -> usize {
        self.search_grid() * self.search_grid()
    }

    pub fn n_tokens(&self) -> usize {
        self.n_template() + self.n_search()
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 {
            return Err(Error::Config("patch and dim must be positive".into()));
        }
        for (extent, value) in [("template", self.template), ("search", self.search)] {
            if value == 0 || value % self.patch != 0 {
                return Err(Error::Indivisible {
                    extent,
                    value,
                    patch: self.patch,
                });
            }
        }
        Ok(())
    }
}

/// Splits an image into `P x P` patches in row-major patch order; each row
/// is one patch flattened as `(row, col, channel)`.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 {
        return Err(Error::Embed("patch size must be positive".into()));
    }
    for (extent, value) in [("height", img.height), ("width", img.width)] {
        if value % patch != 0 {
            return Err(Error::Indivisible {
                extent,
                value,
                patch,
            });
        }
    }
    let (gw, gh) = (img.width / patch, img.height / patch);
    let plen = 3 * patch * patch;
    let mut out = Vec::with_capacity(gw * gh * plen);
    for py in 0..gh {
        for px in 0..gw {
            for r in 0..patch {
                let start = ((py * patch + r) * img.width + px * patch) * 3;
                out.extend_from_slice(&img.data[start..start + 3 * patch]);
            }
        }
    }
    Tensor::matrix(gw * gh, plen, out)
}

/// Token matrix of one modality stream: template tokens first, then search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Var,
    pub n_template: usize,
    pub n_search: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.n_template + self.n_search
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }

    pub fn search(&self, tape: &mut Tape) -> Result<Var> {
        tape.slice(self.tokens, 0, self.n_template, self.n_search)
    }
}

pub const PROJ: &str = "embed.proj";
pub const POS: &str = "embed.pos";

/// Patch matrices of the three crops of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPatches {
    pub template_init: Tensor,
    pub template_dyn: Tensor,
    pub search: Tensor,
}

impl StreamPatches {
    pub fn from_images(t_init: &Image, t_dyn: &Image, search: &Image, patch: usize) -> Result<Self> {
        Ok(Self {
            template_init: patchify(t_init, patch)?,
            template_dyn: patchify(t_dyn, patch)?,
            search: patchify(search, patch)?,
        })
    }
}

/// `[t_init; t_dyn; s] · E + p` with the shared projection and positional
/// embedding bound on `tape`.
pub fn embed_modality(tape: &mut Tape, bound: &Bound, patches: &StreamPatches) -> Result<TokenSeq> {
    let n_template = patches.template_init.dims2()?.0 + patches.template_dyn.dims2()?.0;
    let n_search = patches.search.dims2()?.0;
    let parts = [
        tape.constant(patches.template_init.clone()),
        tape.constant(patches.template_dyn.clone()),
        tape.constant(patches.search.clone()),
    ];
    let raw = tape.concat(&parts, 0)?;
    let proj = bound.get(PROJ)?;
    let pos = bound.get(POS)?;
    let tokens = tape.matmul(raw, proj)?;
    if tape.shape(pos) != tape.shape(tokens) {
        return Err(Error::Embed(format!(
            "positional embedding {:?} does not match {:?} tokens",
            tape.shape(pos),
            tape.shape(tokens)
        )));
    }
    let tokens = tape.add(tokens, pos)?;
    Ok(TokenSeq {
        tokens,
        n_template,
        n_search,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    /// Inverse of `patchify`, written against pixel coordinates.
    fn reassemble(patches: &Tensor, w: usize, h: usize, p: usize) -> Image {
        let mut img = Image::new(w, h);
        let gw = w / p;
        for (i, row) in (0..patches.dims2().unwrap().0).map(|i| (i, patches.row(i))) {
            let (py, px) = (i / gw, i % gw);
            for r in 0..p {
                for c in 0..p {
                    for ch in 0..3 {
                        img.set(px * p + c, py * p + r, ch, row[(r * p + c) * 3 + ch]);
                    }
                }
            }
        }
        img
    }

    #[test]
    fn single_patch_is_flat_image() {
        let img = random_image(8, 8, 1);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[1, 192]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn first_patch_is_top_left_block() {
        let img = random_image(16, 16, 2);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[4, 192]);
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..3 {
                    assert_eq!(p.row(0)[(r * 8 + c) * 3 + ch], img.get(c, r, ch));
                }
            }
        }
    }

    #[test]
    fn patches_reassemble_exactly() {
        let img = random_image(32, 32, 3);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(reassemble(&p, 32, 32, 8), img);
    }

    #[test]
    fn indivisible_extent_is_named() {
        let img = random_image(16, 12, 4);
        let err = patchify(&img, 8).unwrap_err();
        assert!(err.to_string().contains("height = 12"), "{err}");
    }

    #[test]
    fn default_geometry_token_counts() {
        let g = Geometry::default();
        assert_eq!(g.n_template(), 32);
        assert_eq!(g.n_search(), 64);
        assert_eq!(g.n_tokens(), 96);
    }

    fn tiny_geometry() -> Geometry {
        Geometry {
            patch: 2,
            template: 4,
            search: 4,
            dim: 12,
        }
    }

    fn stream(seed: u64, g: &Geometry) -> StreamPatches {
        StreamPatches::from_images(
            &random_image(g.template, g.template, seed),
            &random_image(g.template, g.template, seed + 1),
            &random_image(g.search, g.search, seed + 2),
            g.patch,
        )
        .unwrap()
    }

    #[test]
    fn identity_projection_returns_raw_patches() {
        let g = tiny_geometry();
        let mut eye = Tensor::zeros(&[12, 12]);
        for i in 0..12 {
            eye.data_mut()[i * 12 + i] = 1.0;
        }
        let mut params = Params::new();
        params.insert(PROJ, eye, true).unwrap();
        params.insert(POS, Tensor::zeros(&[g.n_tokens(), 12]), true).unwrap();
        let s = stream(10, &g);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let seq = embed_modality(&mut tape, &b, &s).unwrap();
        let raw = [s.template_init.data(), s.template_dyn.data(), s.search.data()].concat();
        assert_eq!(tape.value(seq.tokens).data(), &raw[..]);
        assert_eq!((seq.n_template, seq.n_search), (8, 4));
    }

    #[test]
    fn both_modalities_share_one_embedding() {
        let g = tiny_geometry();
        let mut params = Params::new();
        params.insert(PROJ, crate::testutil::random_matrix(12, 12, 5), true).unwrap();
        params
            .insert(POS, crate::testutil::random_matrix(g.n_tokens(), 12, 6), true)
            .unwrap();
        let s = stream(20, &g);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let as_rgb = embed_modality(&mut tape, &b, &s).unwrap();
        let as_x = embed_modality(&mut tape, &b, &s).unwrap();
        assert_eq!(tape.value(as_rgb.tokens), tape.value(as_x.tokens));
    }

    #[test]
    fn positional_length_mismatch_rejected() {
        let g = tiny_geometry();
        let mut params = Params::new();
        params.insert(PROJ, Tensor::zeros(&[12, 12]), true).unwrap();
        params.insert(POS, Tensor::zeros(&[g.n_tokens() + 1, 12]), true).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        assert!(embed_modality(&mut tape, &b, &stream(1, &g)).is_err());
    }
}
