#![allow(dead_code)]

use std::path::Path;

use distancenet::config::RunConfig;
use distancenet::data::{synth_generate, Dataset, SynthConfig};
use distancenet::model::{Channels, ModelConfig};

/// 64x32 inputs, 1/16 channels, 6 cells per direction.
pub fn small_model() -> ModelConfig {
    ModelConfig { width: 64, height: 32, channels: Channels::divided(16), max_disp: 2, hidden: 6, ..ModelConfig::desk() }
}

pub fn small_run(out: &Path, count: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig { seed: 3, output: out.to_path_buf(), model: small_model(), ..RunConfig::default() };
    cfg.data.synth = SynthConfig { count, width: 64, height: 32, pixels_per_meter: 36.0, seed: 5, ..SynthConfig::default() };
    cfg.data.eval_count = 8;
    cfg.train.epochs = epochs;
    cfg.train.effective_batch = 8;
    cfg.train.micro_batch = 4;
    cfg.train.eval_batch = 8;
    cfg
}

pub fn synth(cfg: &RunConfig, first_id: usize, count: usize) -> Dataset {
    synth_generate(&SynthConfig { first_id, count, ..cfg.data.synth.clone() }).unwrap()
}

/// KITTI layout under `root` with one straight-line sequence per
/// `(name, frames, meters_per_frame)`; images are `w`x`h` gradients.
pub fn fake_kitti(root: &Path, sequences: &[(&str, usize, f64)], w: u32, h: u32) {
    std::fs::create_dir_all(root.join("poses")).unwrap();
    for &(name, frames, step) in sequences {
        let mut poses = String::new();
        for i in 0..frames {
            let z = i as f64 * step;
            poses.push_str(&format!("1 0 0 0 0 1 0 0 0 0 1 {z:e}\n"));
        }
        std::fs::write(root.join("poses").join(format!("{name}.txt")), poses).unwrap();
        let dir = root.join("sequences").join(name).join("image_2");
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..frames {
            let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 + i as u32 * 3) as u8, (y * 11) as u8, 128]));
            img.save(dir.join(format!("{i:06}.png"))).unwrap();
        }
    }
}
