//! Synthetic translating-texture sequences.
//!
//! Each sequence is a band-limited random texture that moves horizontally by a
//! constant number of pixels per frame. The ground truth is the constant speed
//! (meters per frame) times the number of frame intervals, so the only cue for
//! the label is the apparent motion between adjacent frames.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ::image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{load_rgb, write_ppm};
use super::{Dataset, DatasetItem, FrameStore, SampleSource};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Id of the first generated sample; ids select the per-sample streams.
    pub first_id: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Meters per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub pixels_per_meter: f64,
    /// Sinusoids summed into each texture.
    pub components: usize,
    /// Shortest and longest texture wavelength in pixels.
    pub wavelength_range: [f64; 2],
    /// RMS of the texture around mid gray, before clipping to [0, 1].
    pub contrast: f64,
    pub d_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 2000,
            first_id: 0,
            frames: 10,
            width: 128,
            height: 64,
            speed_min: 0.0,
            speed_max: 3.1 / 9.0,
            pixels_per_meter: 72.0,
            components: 16,
            wavelength_range: [16.0, 64.0],
            contrast: 0.3,
            d_max: 3.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.width == 0 || self.height == 0 || self.components == 0 {
            return Err(Error::config("synthetic frames must be >= 2 and extents/components positive"));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return Err(Error::domain(format!("bad speed range [{}, {}]", self.speed_min, self.speed_max)));
        }
        let limit = self.d_max / (self.frames - 1) as f64;
        if self.speed_max > limit * (1.0 + 1e-9) {
            return Err(Error::domain(format!(
                "speed_max {} exceeds d_max/(frames-1) = {limit}; labels would leave the representable range",
                self.speed_max
            )));
        }
        let [lo, hi] = self.wavelength_range;
        if !(lo >= 2.0 && lo <= hi) {
            return Err(Error::config(format!("bad wavelength range [{lo}, {hi}]")));
        }
        if !(self.contrast > 0.0 && self.contrast <= 0.5) {
            return Err(Error::config(format!("contrast {} outside (0, 0.5]", self.contrast)));
        }
        if !(self.pixels_per_meter > 0.0) {
            return Err(Error::config("pixels_per_meter must be positive"));
        }
        Ok(())
    }
}

struct Component {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
    color: [f64; 3],
}

fn texture<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<Component> {
    let [lo, hi] = cfg.wavelength_range;
    let mut comps: Vec<Component> = (0..cfg.components)
        .map(|_| {
            let theta = rng.gen_range(-PI / 2.0..PI / 2.0);
            let lambda = lo * (hi / lo).powf(rng.gen::<f64>());
            Component {
                fx: theta.cos() / lambda,
                fy: theta.sin() / lambda,
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: rng.gen_range(0.5..1.0),
                color: [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)],
            }
        })
        .collect();
    let rms = (comps.iter().map(|c| c.amp * c.amp).sum::<f64>() / 2.0).sqrt();
    for c in &mut comps {
        c.amp *= cfg.contrast / rms;
    }
    comps
}

/// Renders one frame of the texture shifted right by `shift` pixels.
fn render(comps: &[Component], w: usize, h: usize, shift: f64) -> RgbImage {
    let mut acc = vec![0.5f64; 3 * w * h];
    let mut sa = vec![0.0; w];
    let mut ca = vec![0.0; w];
    let mut sb = vec![0.0; h];
    let mut cb = vec![0.0; h];
    for c in comps {
        for x in 0..w {
            let a = 2.0 * PI * c.fx * (x as f64 - shift) + c.phase;
            sa[x] = a.sin();
            ca[x] = a.cos();
        }
        for y in 0..h {
            let b = 2.0 * PI * c.fy * y as f64;
            sb[y] = b.sin();
            cb[y] = b.cos();
        }
        for y in 0..h {
            for x in 0..w {
                let v = c.amp * (sa[x] * cb[y] + ca[x] * sb[y]);
                let p = 3 * (y * w + x);
                acc[p] += v * c.color[0];
                acc[p + 1] += v * c.color[1];
                acc[p + 2] += v * c.color[2];
            }
        }
    }
    let raw = acc.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image")
}

/// Frames for sample `id`: texture and speed are drawn from the sample's own
/// stream so any subset regenerates identically.
pub fn render_sequence(cfg: &SynthConfig, id: usize) -> (f64, Vec<RgbImage>) {
    let mut rng = stream(cfg.seed, Purpose::Synth, &[id as u64]);
    let speed = if cfg.speed_max > cfg.speed_min { rng.gen_range(cfg.speed_min..=cfg.speed_max) } else { cfg.speed_min };
    let comps = texture(cfg, &mut rng);
    let shift = speed * cfg.pixels_per_meter;
    let frames = (0..cfg.frames).map(|f| render(&comps, cfg.width, cfg.height, f as f64 * shift)).collect();
    (speed, frames)
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let intervals = (cfg.frames - 1) as f64;
    let items = (cfg.first_id..cfg.first_id + cfg.count)
        .map(|id| {
            let (speed, frames) = render_sequence(cfg, id);
            DatasetItem {
                source: SampleSource { sequence: "synth".into(), start: id },
                gt_distance: speed * intervals,
                speed: Some(speed),
                frames: FrameStore::Memory(frames),
            }
        })
        .collect();
    Ok(Dataset::new(items))
}

/// Writes `<dir>/<id:06>/<frame:02>.ppm` plus a manifest of `id,speed,gt_distance`.
pub fn save_synthetic(dir: &Path, data: &Dataset) -> Result<()> {
    let mut manifest = String::new();
    for item in data.items() {
        let id = item.source.start;
        let sub = dir.join(format!("{id:06}"));
        fs::create_dir_all(&sub)?;
        for (f, img) in item.images()?.iter().enumerate() {
            write_ppm(&sub.join(format!("{f:02}.ppm")), img)?;
        }
        let speed = item.speed.unwrap_or(item.gt_distance / (item.frame_count() - 1) as f64);
        manifest.push_str(&format!("{id},{speed:.17e},{:.17e}\n", item.gt_distance));
    }
    crate::io::write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

/// Reads a directory written by [`save_synthetic`]. With `in_memory` the
/// frames are decoded eagerly.
pub fn load_synthetic(dir: &Path, in_memory: bool) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse { line: n + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad("expected id,speed,gt_distance"));
        }
        let id: usize = f[0].parse().map_err(|_| bad("bad id"))?;
        let speed: f64 = f[1].parse().map_err(|_| bad("bad speed"))?;
        let gt: f64 = f[2].parse().map_err(|_| bad("bad gt_distance"))?;
        let sub = dir.join(format!("{id:06}"));
        let mut paths: Vec<_> = fs::read_dir(&sub)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        paths.sort();
        if paths.len() < 2 {
            return Err(Error::Ingest(format!("{} holds {} frames", sub.display(), paths.len())));
        }
        let frames = if in_memory {
            FrameStore::Memory(paths.iter().map(|p| load_rgb(p)).collect::<Result<_>>()?)
        } else {
            FrameStore::Files(paths)
        };
        items.push(DatasetItem { source: SampleSource { sequence: "synth".into(), start: id }, gt_distance: gt, speed: Some(speed), frames });
    }
    Ok(Dataset::new(items))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { count: 6, width: 48, height: 24, ..SynthConfig::default() }
    }

    #[test]
    fn labels_follow_speed() {
        let cfg = small();
        let data = synth_generate(&cfg).unwrap();
        assert_eq!(data.len(), 6);
        for it in data.items() {
            let s = it.speed.unwrap();
            assert!(s >= cfg.speed_min && s <= cfg.speed_max);
            assert!((it.gt_distance - 9.0 * s).abs() < 1e-12);
            assert!(it.gt_distance <= cfg.d_max + 1e-9);
            assert_eq!(it.frame_count(), 10);
        }
    }

    #[test]
    fn deterministic_per_id() {
        let cfg = small();
        let a = render_sequence(&cfg, 3);
        let b = render_sequence(&cfg, 3);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(render_sequence(&cfg, 4).1[0], a.1[0]);
    }

    #[test]
    fn frames_are_translated_copies() {
        let cfg = SynthConfig { speed_min: 4.0 / 72.0, speed_max: 4.0 / 72.0, d_max: 1.0, ..small() };
        let (_, frames) = render_sequence(&cfg, 0);
        let (w, h) = (cfg.width as u32, cfg.height as u32);
        for y in 0..h {
            for x in 4..w {
                let a = frames[1].get_pixel(x, y);
                let b = frames[0].get_pixel(x - 4, y);
                for c in 0..3 {
                    assert!((a[c] as i32 - b[c] as i32).abs() <= 1);
                }
            }
        }
    }

    #[test]
    fn rejects_unreachable_speeds() {
        let cfg = SynthConfig { speed_max: 0.5, ..small() };
        assert!(matches!(synth_generate(&cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_generate(&small()).unwrap();
        save_synthetic(dir.path(), &data).unwrap();
        let back = load_synthetic(dir.path(), false).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.items().iter().zip(back.items()) {
            assert_eq!(a.gt_distance, b.gt_distance);
            assert_eq!(a.images().unwrap(), b.images().unwrap());
        }
    }
}
