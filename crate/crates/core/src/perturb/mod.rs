//! Input perturbation: seeded Gaussian image noise, question rephrasing via
//! a helper model, and question-on-image composition.
//!
//! Images live in a `[0,1]` float pixel domain (1 or 3 channels) and travel
//! as PNG so no lossy artifacts enter the pipeline. All perturbations are
//! deterministic functions of their inputs and an explicit seed; the disk
//! cache only avoids recomputation, never changes results.

mod font;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::gateway::{Gateway, GatewayError, SamplingParams};
use crate::prompts::render_rephrase_request;

/// Reply budget for rephrase requests (must fit a numbered list of
/// questions).
const REPHRASE_MAX_TOKENS: u32 = 1024;

/// Glyph cell geometry of the embedded font.
const GLYPH_W: usize = 8;
const GLYPH_H: usize = 16;
/// Padding around the rendered text band.
const TEXT_MARGIN: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum PerturbError {
    #[error("pixel buffer length {got} does not match {width}x{height}x{channels}")]
    BadLength {
        width: u32,
        height: u32,
        channels: u8,
        got: usize,
    },
    #[error("channels must be 1 or 3, got {0}")]
    BadChannels(u8),
    #[error("image dimensions must be positive, got {width}x{height}")]
    BadDimensions { width: u32, height: u32 },
    #[error("pixel value {0} outside [0, 1]")]
    PixelOutOfRange(f32),
    #[error("noise sigma must be finite and ≥ 0, got {0}")]
    BadSigma(f64),
    #[error("schedule needs n ≥ 1 and step ≥ 0, got n={n}, step={step}")]
    BadSchedule { n: usize, step: f64 },
    #[error("question is empty after trimming")]
    EmptyQuestion,
    #[error("PNG codec: {0}")]
    Png(String),
    #[error("image I/O on {path}: {message}")]
    Io { path: String, message: String },
    #[error(
        "rephrase reply yielded {found} parseable question(s), needed {wanted}; last reply: {reply:?}"
    )]
    RephraseParse {
        wanted: usize,
        found: usize,
        reply: String,
    },
    #[error("rephrase count must be ≥ 1")]
    BadRephraseCount,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A decoded image: `[0,1]` floats, row-major, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(
        width: u32,
        height: u32,
        channels: u8,
        pixels: Vec<f32>,
    ) -> Result<Self, PerturbError> {
        if width == 0 || height == 0 {
            return Err(PerturbError::BadDimensions { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(PerturbError::BadChannels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(PerturbError::BadLength {
                width,
                height,
                channels,
                got: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PerturbError::PixelOutOfRange(*bad));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// A uniform image with every channel set to `value`.
    pub fn constant(
        width: u32,
        height: u32,
        channels: u8,
        value: f32,
    ) -> Result<Self, PerturbError> {
        let len = width as usize * height as usize * channels as usize;
        ImageBuffer::new(width, height, channels, vec![value; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Mean over all pixel values.
    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|v| f64::from(*v)).sum::<f64>() / self.pixels.len() as f64
    }

    /// Population standard deviation over all pixel values.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .pixels
            .iter()
            .map(|v| (f64::from(*v) - mean).powi(2))
            .sum::<f64>()
            / self.pixels.len() as f64;
        var.sqrt()
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, PerturbError> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| PerturbError::Png(e.to_string()))?;
        let gray = matches!(
            decoded.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let img = decoded.to_luma8();
            let (width, height) = img.dimensions();
            let pixels = img.pixels().map(|p| f32::from(p.0[0]) / 255.0).collect();
            ImageBuffer::new(width, height, 1, pixels)
        } else {
            let img = decoded.to_rgb8();
            let (width, height) = img.dimensions();
            let pixels = img
                .pixels()
                .flat_map(|p| p.0.into_iter().map(|v| f32::from(v) / 255.0))
                .collect();
            ImageBuffer::new(width, height, 3, pixels)
        }
    }

    pub fn load_png(path: &Path) -> Result<Self, PerturbError> {
        let bytes = std::fs::read(path).map_err(|e| PerturbError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        ImageBuffer::decode_png(&bytes)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, PerturbError> {
        let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let mut out = std::io::Cursor::new(Vec::new());
        match self.channels {
            1 => {
                let img = image::GrayImage::from_raw(
                    self.width,
                    self.height,
                    self.pixels.iter().copied().map(quantize).collect(),
                )
                .expect("length invariant");
                img.write_to(&mut out, image::ImageFormat::Png)
                    .map_err(|e| PerturbError::Png(e.to_string()))?;
            }
            3 => {
                let img = image::RgbImage::from_raw(
                    self.width,
                    self.height,
                    self.pixels.iter().copied().map(quantize).collect(),
                )
                .expect("length invariant");
                img.write_to(&mut out, image::ImageFormat::Png)
                    .map_err(|e| PerturbError::Png(e.to_string()))?;
            }
            other => return Err(PerturbError::BadChannels(other)),
        }
        Ok(out.into_inner())
    }
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` to every
/// pixel value, clamping to `[0,1]`. Deterministic in `seed`; `sigma = 0`
/// returns the input unchanged.
pub fn add_gaussian_noise(
    img: &ImageBuffer,
    sigma: f64,
    seed: u64,
) -> Result<ImageBuffer, PerturbError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(PerturbError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0f64, sigma).map_err(|_| PerturbError::BadSigma(sigma))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = img
        .pixels
        .iter()
        .map(|v| (f64::from(*v) + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(ImageBuffer {
        width: img.width,
        height: img.height,
        channels: img.channels,
        pixels,
    })
}

/// Noises a PNG end to end. `sigma = 0` returns the input bytes untouched
/// (bit-exact identity, no re-encode).
pub fn noised_png(png: &[u8], sigma: f64, seed: u64) -> Result<Vec<u8>, PerturbError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(PerturbError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(png.to_vec());
    }
    let img = ImageBuffer::decode_png(png)?;
    add_gaussian_noise(&img, sigma, seed)?.encode_png()
}

/// The per-sample noise levels: `[0, step, 2·step, …, (n−1)·step]`.
pub fn noise_schedule(n: usize, step: f64) -> Result<Vec<f64>, PerturbError> {
    if n < 1 || !step.is_finite() || step < 0.0 {
        return Err(PerturbError::BadSchedule { n, step });
    }
    Ok((0..n).map(|k| k as f64 * step).collect())
}

/// Noise seed for sample `sample_index` of `record_id` under `run_seed`.
/// Stable across runs and independent of execution order.
pub fn sample_noise_seed(run_seed: u64, record_id: &str, sample_index: u32) -> u64 {
    let digest = Sha256::digest(format!("noise\u{0}{run_seed}\u{0}{record_id}\u{0}{sample_index}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn glyph_for(ch: char) -> &'static [u8; GLYPH_H] {
    let code = ch as u32;
    if (0x20..=0x7E).contains(&code) {
        &font::GLYPHS[(code - 0x20) as usize]
    } else {
        &font::GLYPHS[(b'?' - 0x20) as usize]
    }
}

/// Greedy word wrap to `per_line` characters; words longer than a line are
/// hard-broken.
fn wrap_text(text: &str, per_line: usize) -> Vec<String> {
    assert!(per_line >= 1);
    let mut lines: Vec<String> = Vec::new();
    let mut current = String::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        while start < chars.len() {
            let remaining = &chars[start..];
            let cur_len = current.chars().count();
            let need_space = usize::from(!current.is_empty());
            if cur_len + need_space + remaining.len() <= per_line {
                if !current.is_empty() {
                    current.push(' ');
                }
                current.extend(remaining);
                break;
            }
            if remaining.len() <= per_line {
                // Fits on a fresh line.
                lines.push(std::mem::take(&mut current));
                continue;
            }
            // Longer than any line: fill what is left, then wrap.
            let space_left = per_line.saturating_sub(cur_len + need_space);
            if space_left == 0 {
                lines.push(std::mem::take(&mut current));
                continue;
            }
            if !current.is_empty() {
                current.push(' ');
            }
            current.extend(&remaining[..space_left]);
            start += space_left;
            lines.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        lines.push(current);
    }
    if lines.is_empty() {
        lines.push(String::new());
    }
    lines
}

/// Appends a white band below the image with the question rendered in black
/// monospaced glyphs (wrapped to the image width). The original pixels are
/// preserved untouched above the band.
pub fn compose_question_on_image(
    img: &ImageBuffer,
    question: &str,
) -> Result<ImageBuffer, PerturbError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(PerturbError::EmptyQuestion);
    }
    let per_line = ((img.width as usize).saturating_sub(2 * TEXT_MARGIN) / GLYPH_W).max(1);
    let lines = wrap_text(question, per_line);
    let band_height = lines.len() * GLYPH_H + 2 * TEXT_MARGIN;

    let width = img.width as usize;
    let channels = img.channels as usize;
    let mut pixels = img.pixels.clone();
    let n_band = band_height * width * channels;
    pixels.resize(pixels.len() + n_band, 1.0f32);

    let mut set_black = |x: usize, y: usize| {
        if x >= width {
            return;
        }
        let base = (y * width + x) * channels;
        for c in 0..channels {
            pixels[base + c] = 0.0;
        }
    };
    let band_top = img.height as usize;
    for (line_idx, line) in lines.iter().enumerate() {
        for (col, ch) in line.chars().enumerate() {
            let glyph = glyph_for(ch);
            let x0 = TEXT_MARGIN + col * GLYPH_W;
            let y0 = band_top + TEXT_MARGIN + line_idx * GLYPH_H;
            for (row, bits) in glyph.iter().enumerate() {
                for bit in 0..GLYPH_W {
                    if bits & (0x80 >> bit) != 0 {
                        set_black(x0 + bit, y0 + row);
                    }
                }
            }
        }
    }

    ImageBuffer::new(
        img.width,
        img.height + band_height as u32,
        img.channels,
        pixels,
    )
}

/// PNG-to-PNG question composition.
pub fn composed_png(png: &[u8], question: &str) -> Result<Vec<u8>, PerturbError> {
    let img = ImageBuffer::decode_png(png)?;
    compose_question_on_image(&img, question)?.encode_png()
}

/// Extracts at least `n` rephrased questions from a model reply. Accepts the
/// bracketed-list form (`[1."Q-a",2."Q-b"]`) and numbered lines (`1. Q-a`);
/// returns the first `n`.
pub fn parse_rephrase_reply(reply: &str, n: usize) -> Result<Vec<String>, PerturbError> {
    if n < 1 {
        return Err(PerturbError::BadRephraseCount);
    }
    let quoted_re = regex::Regex::new(r#"(?s)\d+\s*\.\s*"([^"]+)""#).expect("static regex");
    let quoted: Vec<String> = quoted_re
        .captures_iter(reply)
        .map(|c| c[1].trim().to_string())
        .filter(|q| !q.is_empty())
        .collect();

    let line_re = regex::Regex::new(r"^\s*\d+\s*[.):]\s*(.+?)\s*$").expect("static regex");
    let lines: Vec<String> = reply
        .lines()
        .filter_map(|line| line_re.captures(line))
        .map(|c| {
            let mut item = c[1].trim().trim_end_matches([',', ']']).trim().to_string();
            if item.len() >= 2 && item.starts_with('"') && item.ends_with('"') {
                item = item[1..item.len() - 1].to_string();
            }
            item
        })
        .filter(|q| !q.is_empty())
        .collect();

    let best = if quoted.len() >= lines.len() { quoted } else { lines };
    if best.len() < n {
        return Err(PerturbError::RephraseParse {
            wanted: n,
            found: best.len(),
            reply: reply.to_string(),
        });
    }
    Ok(best.into_iter().take(n).collect())
}

/// Asks the rephraser endpoint for `n` semantically equivalent questions.
/// One greedy request; an unparseable reply is retried once at the next
/// sample index before the parse error is reported.
pub async fn rephrase_questions(
    gateway: &Gateway,
    question: &str,
    n: usize,
    seed: i64,
) -> Result<Vec<String>, PerturbError> {
    if n < 1 {
        return Err(PerturbError::BadRephraseCount);
    }
    let messages = render_rephrase_request(question, n).map_err(|_| PerturbError::BadRephraseCount)?;
    let params = SamplingParams::greedy(REPHRASE_MAX_TOKENS, seed);
    let first = gateway.complete(&messages, params, false).await?;
    match parse_rephrase_reply(&first.response_text, n) {
        Ok(questions) => Ok(questions),
        Err(_) => {
            log::warn!(
                "rephrase reply for {question:?} was unparseable; retrying once"
            );
            let retry = gateway
                .complete_indexed(&messages, params, false, Some(1))
                .await?;
            parse_rephrase_reply(&retry.response_text, n)
        }
    }
}

/// Disk cache for derived (noised/composited) PNGs, keyed by the source
/// image hash and a perturbation tag. Writes are atomic;
/// entries are immutable once written.
pub struct ImageCache {
    dir: PathBuf,
}

impl ImageCache {
    pub fn new(dir: PathBuf) -> Self {
        ImageCache { dir }
    }

    /// Cache tag for Gaussian noising.
    pub fn noise_tag(sigma: f64, seed: u64) -> String {
        format!("noise:{:016x}:{seed}", sigma.to_bits())
    }

    /// Cache tag for question composition.
    pub fn compose_tag(question: &str) -> String {
        format!("compose:{}", hex::encode(Sha256::digest(question.as_bytes())))
    }

    fn path_for(&self, source_hash: &str, tag: &str) -> PathBuf {
        let key = hex::encode(Sha256::digest(format!("{source_hash}\u{0}{tag}").as_bytes()));
        self.dir.join(format!("{key}.png"))
    }

    /// Returns the cached derivative, computing and storing it on miss.
    pub fn get_or_insert_with(
        &self,
        source_hash: &str,
        tag: &str,
        compute: impl FnOnce() -> Result<Vec<u8>, PerturbError>,
    ) -> Result<Vec<u8>, PerturbError> {
        let path = self.path_for(source_hash, tag);
        match std::fs::read(&path) {
            Ok(bytes) => return Ok(bytes),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {}
            Err(err) => {
                return Err(PerturbError::Io {
                    path: path.display().to_string(),
                    message: err.to_string(),
                })
            }
        }
        let bytes = compute()?;
        let io_err = |e: &dyn std::fmt::Display| PerturbError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| io_err(&e))?;
        let tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| io_err(&e))?;
        std::fs::write(tmp.path(), &bytes).map_err(|e| io_err(&e))?;
        tmp.persist(&path).map_err(|e| io_err(&e))?;
        Ok(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_invariants_are_enforced() {
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0; 4]).is_ok());
        assert!(matches!(
            ImageBuffer::new(2, 2, 1, vec![0.0; 3]),
            Err(PerturbError::BadLength { .. })
        ));
        assert!(matches!(
            ImageBuffer::new(2, 2, 2, vec![0.0; 8]),
            Err(PerturbError::BadChannels(2))
        ));
        assert!(matches!(
            ImageBuffer::new(0, 2, 1, vec![]),
            Err(PerturbError::BadDimensions { .. })
        ));
        assert!(matches!(
            ImageBuffer::new(1, 1, 1, vec![1.5]),
            Err(PerturbError::PixelOutOfRange(_))
        ));
    }

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let pixels: Vec<f32> = (0..=255).map(|v| v as f32 / 255.0).collect();
        let img = ImageBuffer::new(16, 16, 1, pixels).unwrap();
        let png = img.encode_png().unwrap();
        let back = ImageBuffer::decode_png(&png).unwrap();
        assert_eq!(img, back);

        let rgb = ImageBuffer::new(4, 4, 3, (0..48).map(|v| v as f32 / 255.0).collect()).unwrap();
        let back = ImageBuffer::decode_png(&rgb.encode_png().unwrap()).unwrap();
        assert_eq!(rgb, back);
    }

    #[test]
    fn zero_sigma_noise_is_the_identity() {
        let img = ImageBuffer::constant(8, 8, 3, 0.25).unwrap();
        let out = add_gaussian_noise(&img, 0.0, 99).unwrap();
        assert_eq!(img, out);
        let png = img.encode_png().unwrap();
        assert_eq!(noised_png(&png, 0.0, 99).unwrap(), png);
    }

    #[test]
    fn noise_statistics_match_the_requested_sigma() {
        let img = ImageBuffer::constant(256, 256, 1, 0.5).unwrap();
        let out = add_gaussian_noise(&img, 0.1, 7).unwrap();
        assert!((out.mean() - 0.5).abs() < 0.01, "mean {}", out.mean());
        assert!((out.std() - 0.1).abs() < 0.01, "std {}", out.std());
    }

    #[test]
    fn noise_is_seed_deterministic_and_seed_sensitive() {
        let img = ImageBuffer::constant(32, 32, 3, 0.5).unwrap();
        let a = add_gaussian_noise(&img, 0.05, 1).unwrap();
        let b = add_gaussian_noise(&img, 0.05, 1).unwrap();
        let c = add_gaussian_noise(&img, 0.05, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_clamps_to_unit_interval() {
        let img = ImageBuffer::constant(16, 16, 1, 1.0).unwrap();
        let out = add_gaussian_noise(&img, 0.5, 3).unwrap();
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        // Heavy noise on a saturated image must clip somewhere.
        assert!(out.pixels().iter().any(|v| *v < 1.0));
    }

    #[test]
    fn negative_or_non_finite_sigma_is_rejected() {
        let img = ImageBuffer::constant(2, 2, 1, 0.5).unwrap();
        assert!(matches!(
            add_gaussian_noise(&img, -0.1, 0),
            Err(PerturbError::BadSigma(_))
        ));
        assert!(matches!(
            add_gaussian_noise(&img, f64::NAN, 0),
            Err(PerturbError::BadSigma(_))
        ));
    }

    #[test]
    fn schedule_is_an_arithmetic_ramp_from_zero() {
        let s = noise_schedule(10, 0.05).unwrap();
        let expected = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45];
        assert_eq!(s.len(), 10);
        for (got, want) in s.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(noise_schedule(1, 0.05).unwrap(), vec![0.0]);
        assert_eq!(noise_schedule(3, 0.1).unwrap(), vec![0.0, 0.1, 0.2]);
        assert!(noise_schedule(0, 0.05).is_err());
        assert!(noise_schedule(3, -0.1).is_err());
        // Non-decreasing, starts at zero.
        let s = noise_schedule(7, 0.3).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn noise_seeds_are_stable_and_distinct() {
        let a = sample_noise_seed(1, "rec-1", 0);
        assert_eq!(a, sample_noise_seed(1, "rec-1", 0));
        assert_ne!(a, sample_noise_seed(1, "rec-1", 1));
        assert_ne!(a, sample_noise_seed(1, "rec-2", 0));
        assert_ne!(a, sample_noise_seed(2, "rec-1", 0));
    }

    #[test]
    fn wrapping_is_greedy_and_hard_breaks_long_words() {
        assert_eq!(wrap_text("ab cd ef", 5), vec!["ab cd", "ef"]);
        assert_eq!(wrap_text("abcdefgh", 3), vec!["abc", "def", "gh"]);
        assert_eq!(wrap_text("a bb ccc", 3), vec!["a", "bb", "ccc"]);
        assert_eq!(wrap_text("one", 10), vec!["one"]);
    }

    #[test]
    fn composition_appends_a_band_and_preserves_the_image() {
        let img = ImageBuffer::constant(100, 50, 3, 0.25).unwrap();
        let out = compose_question_on_image(&img, "Q?").unwrap();
        assert_eq!(out.width(), 100);
        assert_eq!(out.height(), 50 + 16 + 8);
        assert_eq!(out.channels(), 3);
        // Original rows untouched.
        let n_orig = 100 * 50 * 3;
        assert_eq!(&out.pixels()[..n_orig], img.pixels());
        // The band contains both white background and black glyph pixels.
        let band = &out.pixels()[n_orig..];
        assert!(band.contains(&1.0));
        assert!(band.contains(&0.0));
    }

    #[test]
    fn long_questions_wrap_to_taller_bands() {
        let img = ImageBuffer::constant(88, 10, 1, 0.5).unwrap();
        // 88px → (88-8)/8 = 10 chars per line.
        let out = compose_question_on_image(&img, "abcdefghij klmnop").unwrap();
        assert_eq!(out.height(), 10 + 2 * 16 + 8);
        let three = compose_question_on_image(&img, "abcdefghij klmnopqrst uvwxyz").unwrap();
        assert_eq!(three.height(), 10 + 3 * 16 + 8);
    }

    #[test]
    fn empty_question_is_rejected() {
        let img = ImageBuffer::constant(20, 20, 1, 0.5).unwrap();
        assert!(matches!(
            compose_question_on_image(&img, "   "),
            Err(PerturbError::EmptyQuestion)
        ));
    }

    #[test]
    fn non_ascii_characters_render_as_the_fallback_glyph() {
        let img = ImageBuffer::constant(64, 8, 1, 0.5).unwrap();
        let a = compose_question_on_image(&img, "é").unwrap();
        let b = compose_question_on_image(&img, "?").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rephrase_parsing_accepts_bracketed_lists_and_numbered_lines() {
        let bracketed = r#"[1."Who painted this?",2."Which artist made this?"]"#;
        assert_eq!(
            parse_rephrase_reply(bracketed, 2).unwrap(),
            vec!["Who painted this?", "Which artist made this?"]
        );
        let lines = "1. Q-a\n2. Q-b\n";
        assert_eq!(parse_rephrase_reply(lines, 2).unwrap(), vec!["Q-a", "Q-b"]);
        let quoted_lines = "1. \"Q-a\",\n2. \"Q-b\"]\n";
        assert_eq!(parse_rephrase_reply(quoted_lines, 2).unwrap(), vec!["Q-a", "Q-b"]);
        // Extra items: first n returned.
        let extra = r#"[1."a",2."b",3."c"]"#;
        assert_eq!(parse_rephrase_reply(extra, 2).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn rephrase_parsing_errors_when_items_are_missing() {
        let err = parse_rephrase_reply(r#"[1."only one"]"#, 2).unwrap_err();
        match err {
            PerturbError::RephraseParse { wanted, found, reply } => {
                assert_eq!(wanted, 2);
                assert_eq!(found, 1);
                assert!(reply.contains("only one"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_rephrase_reply("no list at all", 1).is_err());
        assert!(parse_rephrase_reply("1. x", 0).is_err());
    }

    #[tokio::test]
    async fn rephrasing_via_gateway_parses_the_scripted_reply() {
        use crate::gateway::{EndpointSpec, MockScript};
        use std::sync::Arc;
        use tokio::sync::Semaphore;

        let script: MockScript = toml::from_str(
            r#"
            [[rules]]
            match = "generate 2 semantically equivalent questions"
            answers = [{ text = '[1."Who painted it?",2."Which artist made it?"]' }]
            "#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gateway = Gateway::with_mock_script(
            EndpointSpec::mock("rephraser", "rephraser-model", "inline"),
            script,
            dir.path(),
            Arc::new(Semaphore::new(2)),
        )
        .unwrap();
        let out = rephrase_questions(&gateway, "Who painted this?", 2, 0)
            .await
            .unwrap();
        assert_eq!(out, vec!["Who painted it?", "Which artist made it?"]);
    }

    #[tokio::test]
    async fn unparseable_rephrase_reply_errors_after_one_retry() {
        use crate::gateway::{EndpointSpec, MockScript};
        use std::sync::Arc;
        use tokio::sync::Semaphore;

        let script: MockScript = toml::from_str(
            r#"
            fallback_answer = "I cannot rephrase that."
            "#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gateway = Gateway::with_mock_script(
            EndpointSpec::mock("rephraser", "rephraser-model", "inline"),
            script,
            dir.path(),
            Arc::new(Semaphore::new(2)),
        )
        .unwrap();
        let err = rephrase_questions(&gateway, "Q?", 2, 0).await.unwrap_err();
        assert!(matches!(err, PerturbError::RephraseParse { .. }));
        // Both the first attempt and the retry hit the backend.
        assert_eq!(gateway.backend_calls(), 2);
    }

    #[test]
    fn image_cache_computes_once_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::new(dir.path().join("imgcache"));
        let mut calls = 0;
        let first = cache
            .get_or_insert_with("srchash", "tag", || {
                calls += 1;
                Ok(vec![1, 2, 3])
            })
            .unwrap();
        assert_eq!(first, vec![1, 2, 3]);
        let second = cache
            .get_or_insert_with("srchash", "tag", || {
                calls += 1;
                Ok(vec![9])
            })
            .unwrap();
        assert_eq!(second, vec![1, 2, 3]);
        assert_eq!(calls, 1);
        // Different tag → different entry.
        let other = cache
            .get_or_insert_with("srchash", "tag2", || Ok(vec![9]))
            .unwrap();
        assert_eq!(other, vec![9]);
        assert_ne!(
            ImageCache::noise_tag(0.1, 5),
            ImageCache::noise_tag(0.1, 6)
        );
        assert_ne!(
            ImageCache::compose_tag("a"),
            ImageCache::compose_tag("b")
        );
    }
}
