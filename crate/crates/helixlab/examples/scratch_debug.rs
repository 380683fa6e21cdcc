//! Scratch probe: embedding Fourier sparsity of a saved checkpoint.

use helixlab::model::load_checkpoint;
use helixlab::numerics::dft_spectrum;
use std::path::Path;

fn main() {
    let dir = std::env::args().nth(1).expect("usage: scratch_debug <ckpt dir>");
    let (model, meta) = load_checkpoint(Path::new(&dir)).unwrap();
    eprintln!("step {} val_acc {}", meta.step, meta.val_accuracy);
    let embed = model.param("embed.w");
    let p = 113usize;
    let d = model.config.d_model;
    let mut energy = vec![0.0f64; p / 2];
    for j in 0..d {
        let signal: Vec<f32> = (0..p).map(|a| embed.data()[a * d + j]).collect();
        let spec = dft_spectrum(&signal).unwrap();
        for (i, bin) in spec.iter().enumerate() {
            energy[i] += (bin.magnitude as f64).powi(2);
        }
    }
    let total: f64 = energy.iter().sum();
    let mut sorted = energy.clone();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let top6: f64 = sorted.iter().take(6).sum();
    eprintln!("top-6 non-DC energy fraction: {:.4}", top6 / total);
}
