//! Blinded side-by-side MD montages and the rating session built from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::run::{write, CORD_MASK_FILE, MD_FILE};
use super::UNCORRECTED;
use crate::error::{Error, Result};
use crate::nifti::load_volume;
use crate::volume::{Mask, Volume};

/// 8-bit grayscale raster, row-major from the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = v;
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::InvalidSpec(format!("png: {e}")))?;
            w.write_image_data(&self.pixels)
                .map_err(|e| Error::InvalidSpec(format!("png: {e}")))?;
        }
        Ok(buf)
    }
}

// 5x7 capitals, one byte per row, bit 4 leftmost.
const GLYPHS: [[u8; 7]; 26] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
    [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
    [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
];

const CAPTION_HEIGHT: usize = 11;
const SEPARATOR: u8 = 128;

/// Burns `text` (upper-cased; characters other than A-Z render as blanks) at `(x0, y0)`.
pub fn draw_text(img: &mut GrayImage, x0: usize, y0: usize, text: &str) {
    for (n, ch) in text.to_ascii_uppercase().bytes().enumerate() {
        if !ch.is_ascii_uppercase() {
            continue;
        }
        let glyph = GLYPHS[(ch - b'A') as usize];
        for (r, bits) in glyph.iter().enumerate() {
            for c in 0..5 {
                if bits & (0x10 >> c) != 0 {
                    img.set(x0 + 6 * n + c, y0 + r, 255);
                }
            }
        }
    }
}

/// Neutral label of the `i`-th shuffled panel: "Method A", "Method B", ...
pub fn panel_label(i: usize) -> String {
    format!("Method {}", (b'A' + i as u8) as char)
}

fn panel_file(i: usize) -> String {
    format!("panel_{}.png", (b'a' + i as u8) as char)
}

/// Mid-sagittal slice of `md` with superior at the top, replicated so pixels are
/// roughly isotropic, windowed to the min-max inside `cord` dilated by 2 voxels,
/// with `caption` above.
pub fn render_panel(md: &Volume, cord: &Mask, caption: &str) -> Result<GrayImage> {
    md.grid().ensure_matches(cord.grid(), "MD vs cord mask")?;
    let g = md.grid();
    let [nx, ny, nz] = g.dims;
    let i = nx / 2;
    let finest = g.spacing[1].min(g.spacing[2]);
    let ry = (g.spacing[1] / finest).round().max(1.0) as usize;
    let rz = (g.spacing[2] / finest).round().max(1.0) as usize;
    let window = cord.dilate(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..nz {
        for j in 0..ny {
            let idx = g.index(i, j, k);
            if window.contains(idx) {
                lo = lo.min(md.data()[idx]);
                hi = hi.max(md.data()[idx]);
            }
        }
    }
    let mut img = GrayImage::new(ny * ry, CAPTION_HEIGHT + nz * rz);
    for k in 0..nz {
        for j in 0..ny {
            let v = md.data()[g.index(i, j, k)];
            let level = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 };
            for dz in 0..rz {
                for dy in 0..ry {
                    img.set(j * ry + dy, CAPTION_HEIGHT + (nz - 1 - k) * rz + dz, level);
                }
            }
        }
    }
    draw_text(&mut img, 2, 2, caption);
    Ok(img)
}

/// Panels side by side with one separator column between neighbours.
pub fn tile(panels: &[GrayImage]) -> GrayImage {
    let height = panels.iter().map(|p| p.height).max().unwrap_or(0);
    let width = panels.iter().map(|p| p.width).sum::<usize>() + panels.len().saturating_sub(1);
    let mut out = GrayImage::new(width, height);
    let mut x0 = 0;
    for (n, p) in panels.iter().enumerate() {
        if n > 0 {
            for y in 0..height {
                out.set(x0, y, SEPARATOR);
            }
            x0 += 1;
        }
        for y in 0..p.height {
            for x in 0..p.width {
                out.set(x0 + x, y, p.get(x, y));
            }
        }
        x0 += p.width;
    }
    out
}

/// Method order shown for case `case_index`: a seeded shuffle, independent per case.
pub fn shuffled(methods: &[String], seed: u64, case_index: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case_index as u64);
    let mut out = methods.to_vec();
    out.shuffle(&mut rng);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelRef {
    pub label: String,
    pub image_url: String,
}

/// What a rater's browser may see of one case.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseView {
    pub case_id: String,
    pub panels: Vec<PanelRef>,
    pub reference_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSession {
    pub session_id: String,
    pub seed: u64,
    pub raters: Vec<String>,
    pub cases: Vec<CaseView>,
    /// case → label → method. Kept in a separate file and never sent to clients.
    #[serde(skip)]
    pub key: BTreeMap<String, BTreeMap<String, String>>,
}

pub const RATING_DIR: &str = "rating";
const SESSION_FILE: &str = "session.json";
const KEY_FILE: &str = "key.json";
pub const IMAGE_DIR: &str = "images";

impl RatingSession {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let bad = |e: serde_json::Error| Error::Malformed(format!("rating session: {e}"));
        let mut s: RatingSession = serde_json::from_str(&read(SESSION_FILE)?).map_err(bad)?;
        s.key = serde_json::from_str(&read(KEY_FILE)?).map_err(bad)?;
        for c in &s.cases {
            let k = s.key.get(&c.case_id).ok_or_else(|| Error::Malformed(format!("no key for case {}", c.case_id)))?;
            if k.len() != c.panels.len() || c.panels.iter().any(|p| !k.contains_key(&p.label)) {
                return Err(Error::Malformed(format!("key of case {} does not match its panels", c.case_id)));
            }
        }
        Ok(s)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write(&dir.join(SESSION_FILE), serde_json::to_string_pretty(self).expect("session serializes") + "\n")?;
        write(&dir.join(KEY_FILE), serde_json::to_string_pretty(&self.key).expect("key serializes") + "\n")
    }

    pub fn case(&self, id: &str) -> Option<&CaseView> {
        self.cases.iter().find(|c| c.case_id == id)
    }
}

fn load_condition(cfg: &PipelineConfig, subject: &str, condition: &str) -> Result<(Volume, Mask)> {
    let dir = cfg.condition_dir(subject, condition);
    let (md, cord) = (dir.join(MD_FILE), dir.join(CORD_MASK_FILE));
    if !md.is_file() || !cord.is_file() {
        return Err(Error::MissingMethodOutput(format!("{condition} (subject {subject})")));
    }
    let cord = load_volume(&cord)?;
    Ok((load_volume(&md)?, Mask::from_threshold(&cord, 0.5)))
}

/// Renders the montage of subject `case_index`: the uncorrected reference panel
/// followed by the corrected conditions in shuffled order under neutral labels.
/// Writes the panel PNGs and `montage.png`; returns the public view and label → method map.
pub fn cmd_render_montage(cfg: &PipelineConfig, case_index: usize) -> Result<(CaseView, BTreeMap<String, String>)> {
    let subject = &cfg
        .subjects
        .get(case_index)
        .ok_or_else(|| Error::InvalidConfig(format!("no subject #{case_index}")))?
        .id;
    let order = shuffled(&cfg.corrected_conditions(), cfg.seed, case_index);
    let dir = image_dir(cfg).join(subject);
    let (md, cord) = load_condition(cfg, subject, UNCORRECTED)?;
    let reference = render_panel(&md, &cord, "Uncorrected")?;
    let mut images = vec![reference.clone()];
    let mut panels = Vec::new();
    let mut key = BTreeMap::new();
    for (n, method) in order.iter().enumerate() {
        let (md, cord) = load_condition(cfg, subject, method)?;
        let label = panel_label(n);
        let img = render_panel(&md, &cord, &label)?;
        write(&dir.join(panel_file(n)), img.to_png()?)?;
        panels.push(PanelRef {
            label: label.clone(),
            image_url: format!("/images/{subject}/{}", panel_file(n)),
        });
        key.insert(label, method.clone());
        images.push(img);
    }
    write(&dir.join("reference.png"), reference.to_png()?)?;
    write(&dir.join("montage.png"), tile(&images).to_png()?)?;
    let view = CaseView {
        case_id: subject.clone(),
        panels,
        reference_url: format!("/images/{subject}/reference.png"),
    };
    Ok((view, key))
}

pub fn rating_dir(cfg: &PipelineConfig) -> PathBuf {
    rating_dir_of(&cfg.output_dir)
}

pub fn rating_dir_of(output_dir: &Path) -> PathBuf {
    output_dir.join(RATING_DIR)
}

fn image_dir(cfg: &PipelineConfig) -> PathBuf {
    rating_dir(cfg).join(IMAGE_DIR)
}

/// Montages for every subject plus the session files the rating service loads.
pub fn cmd_montage(cfg: &PipelineConfig) -> Result<RatingSession> {
    cfg.validate()?;
    let mut session = RatingSession {
        session_id: format!("session-{:016x}", cfg.seed),
        seed: cfg.seed,
        raters: cfg.raters.clone(),
        cases: Vec::new(),
        key: BTreeMap::new(),
    };
    for i in 0..cfg.subjects.len() {
        let (view, key) = cmd_render_montage(cfg, i)?;
        session.key.insert(view.case_id.clone(), key);
        session.cases.push(view);
    }
    session.save(&rating_dir(cfg))?;
    Ok(session)
}

/// Whether `file` is one of the images a montage directory may hold.
pub(crate) fn is_montage_file(file: &str) -> bool {
    match file {
        "reference.png" | "montage.png" => true,
        f => {
            let b = f.as_bytes();
            f.len() == "panel_a.png".len() && f.starts_with("panel_") && f.ends_with(".png") && b[6].is_ascii_lowercase()
        }
    }
}
